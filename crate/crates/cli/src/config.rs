//! Experiment configuration: one TOML document, every key optional.

use crate::error::{CliError, Result};
use serde::{Deserialize, Serialize};
use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;
use vpb_core::{
    sigma, BackendSpec, CalibrationConfig, DuhamelConfig, LinearDecayConfig, NonlinearConfig,
    StationaryConfig, TorusConfig,
};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    #[default]
    Validate,
    Modes,
    Decay,
    Duhamel,
    Torus,
    Nonlinear,
    Stationary,
}

impl ExperimentKind {
    pub const ALL: [ExperimentKind; 7] = [
        Self::Validate,
        Self::Modes,
        Self::Decay,
        Self::Duhamel,
        Self::Torus,
        Self::Nonlinear,
        Self::Stationary,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::Validate => "validate",
            Self::Modes => "modes",
            Self::Decay => "decay",
            Self::Duhamel => "duhamel",
            Self::Torus => "torus",
            Self::Nonlinear => "nonlinear",
            Self::Stationary => "stationary",
        }
    }

    pub fn description(self) -> &'static str {
        match self {
            Self::Validate => {
                "moment table, projection algebra, collision structure, generator dissipation"
            }
            Self::Modes => "per-mode Lyapunov calibration and sourced audits",
            Self::Decay => "whole-space algebraic decay exponent (optionally with refinement)",
            Self::Duhamel => "sup-over-time Duhamel ratio under horizon doubling",
            Self::Torus => "exponential decay on the torus against the certified floor",
            Self::Nonlinear => "1D torus nonlinear structural suite",
            Self::Stationary => "stationary potential and its scaling in the background",
        }
    }
}

impl fmt::Display for ExperimentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ExperimentKind {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| CliError::UnknownKind(s.to_string()))
    }
}

/// Invariant suite sizes and tolerances.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ValidateConfig {
    /// Gauss-Hermite order of the n = 3 moment grid.
    pub moment_order: usize,
    pub projection_order: usize,
    /// Number of random slices for the projection and collision checks.
    pub slices: usize,
    pub surrogate_order: usize,
    /// Wavenumbers of the generator dissipation check.
    pub k_values: Vec<f64>,
    pub tolerance: f64,
    /// Also assemble and check the hard-sphere operator (slow).
    pub hard_sphere: bool,
    pub hard_sphere_order: usize,
    pub angular_order: usize,
}

impl Default for ValidateConfig {
    fn default() -> Self {
        Self {
            moment_order: 16,
            projection_order: 8,
            slices: 100,
            surrogate_order: 6,
            k_values: vec![0.05, 0.5, 1.0, 5.0, 20.0],
            tolerance: 1e-10,
            hard_sphere: false,
            hard_sphere_order: 6,
            angular_order: 6,
        }
    }
}

/// Per-mode calibration followed by sourced audits on random states.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModesConfig {
    pub backend: BackendSpec,
    /// |k| values along the first axis.
    pub k_values: Vec<f64>,
    /// Random trajectories per k, for calibration and again for the audit.
    pub trajectories: usize,
    pub audit_steps: usize,
    /// Decay rate of the microscopic source e^{−rate·t}{I−P}h₀; 0 disables the source.
    pub source_decay: f64,
    pub calibration: CalibrationConfig,
}

impl Default for ModesConfig {
    fn default() -> Self {
        Self {
            backend: BackendSpec::surrogate(3, 4),
            k_values: vec![0.05, 0.5, 1.0, 5.0, 20.0],
            trajectories: 20,
            audit_steps: 40,
            source_decay: 1.0,
            calibration: CalibrationConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub kind: ExperimentKind,
    pub out_dir: PathBuf,
    /// Seed of the randomized suites (validate slices, calibration and audit
    /// states); TOML integers limit it to [0, 2^63).
    pub seed: u64,
    /// Decay only: repeat at doubled velocity order and k-resolution.
    pub refine: bool,
    pub validate: ValidateConfig,
    pub modes: ModesConfig,
    pub decay: LinearDecayConfig,
    pub duhamel: DuhamelConfig,
    pub torus: TorusConfig,
    pub nonlinear: NonlinearConfig,
    pub stationary: StationaryConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            kind: ExperimentKind::default(),
            out_dir: PathBuf::from("out"),
            seed: 1,
            refine: false,
            validate: ValidateConfig::default(),
            modes: ModesConfig::default(),
            decay: LinearDecayConfig::default(),
            duhamel: DuhamelConfig::default(),
            torus: TorusConfig::default(),
            nonlinear: NonlinearConfig::default(),
            stationary: StationaryConfig::default(),
        }
    }
}

impl ExperimentConfig {
    /// Decay exponent the decay kind is checked against: σ_{q,m} for reduced
    /// data, σ_{q,m−1} for generic data, m = |α − α'|.
    pub fn sigma_target(&self) -> Option<f64> {
        if self.kind != ExperimentKind::Decay {
            return None;
        }
        let d = &self.decay;
        let m: i64 = d
            .alpha
            .iter()
            .zip(&d.alpha_prime)
            .map(|(a, p)| i64::from(*a) - i64::from(*p))
            .sum();
        let reduced = d.data.subtract_p0 || d.data.microscopic;
        let m = if reduced { m } else { m - 1 };
        Some(sigma(d.backend.dim, d.q, m as i32))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| CliError::Serialize(e.to_string()))
    }
}

/// Parses a TOML document; missing keys take their defaults, unknown keys are
/// rejected with their location.
pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let cfg: ExperimentConfig =
        toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
    let dims = [
        (
            "decay",
            cfg.decay.backend.dim,
            cfg.decay.alpha.len(),
            cfg.decay.alpha_prime.len(),
        ),
        (
            "duhamel",
            cfg.duhamel.backend.dim,
            cfg.duhamel.alpha.len(),
            cfg.duhamel.alpha_prime.len(),
        ),
    ];
    for (section, dim, a, p) in dims {
        if a != dim || p != dim {
            return Err(CliError::Config(format!(
                "{section}: alpha and alpha_prime need {dim} entries to match backend.dim"
            )));
        }
    }
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_text_gives_defaults() {
        assert_eq!(parse_config("").unwrap(), ExperimentConfig::default());
    }

    #[test]
    fn kinds_parse_by_name() {
        for k in ExperimentKind::ALL {
            assert_eq!(k.name().parse::<ExperimentKind>().unwrap(), k);
        }
        assert!("bogus".parse::<ExperimentKind>().is_err());
    }

    #[test]
    fn partial_sections_keep_sibling_defaults() {
        let c = parse_config("kind = \"torus\"\n[torus]\nt_end = 10.0\n").unwrap();
        assert_eq!(c.kind, ExperimentKind::Torus);
        assert_eq!(c.torus.t_end, 10.0);
        assert_eq!(c.torus.k_max, TorusConfig::default().k_max);
    }

    #[test]
    fn unknown_key_is_rejected_with_location() {
        let err = parse_config("seed = 3\n[decay]\nqq = 1\n")
            .unwrap_err()
            .to_string();
        assert!(err.contains("qq"), "{err}");
        assert!(err.contains("line 3"), "{err}");
    }

    #[test]
    fn alpha_length_must_match_dimension() {
        assert!(parse_config("[decay]\nalpha = [1, 0]\n").is_err());
    }
}
