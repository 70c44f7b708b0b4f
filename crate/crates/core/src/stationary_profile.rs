//! Stationary background potential: Newton solution of Δφ = e^φ − ρ̄ on a radial
//! grid in R³ (φ(R) = 0) or on the periodic interval [0, 2π), weighted sup-norms and
//! the linear smallness scaling of φ against ρ̄ − 1.
//!
//! Both geometries use second-order central differences on uniform nodes. The radial
//! operator is written for ψ = rφ, so Δφ = ψ''/r, which keeps the stencil symmetric
//! up to the diagonal scaling and needs no condition at r = 0 beyond ψ(0) = 0.

use crate::error::{invalid, LabError, Result};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Geometry {
    /// Nodes r_i = iR/nodes, i = 0..=nodes, with φ(R) = 0.
    Radial { radius: f64, nodes: usize },
    /// Nodes x_j = 2πj/nodes on the torus.
    Torus { nodes: usize },
}

impl Geometry {
    fn validate(&self) -> Result<()> {
        match *self {
            Geometry::Radial { radius, nodes } => {
                if !(radius > 0.0 && radius.is_finite()) || nodes < 4 {
                    return Err(invalid(
                        "geometry",
                        "radial grid needs R > 0 and at least 4 nodes",
                    ));
                }
            }
            Geometry::Torus { nodes } => {
                if nodes < 4 {
                    return Err(invalid("geometry", "torus grid needs at least 4 nodes"));
                }
            }
        }
        Ok(())
    }

    /// Node coordinates (r for the radial grid, x for the torus).
    pub fn coords(&self) -> Vec<f64> {
        match *self {
            Geometry::Radial { radius, nodes } => (0..=nodes)
                .map(|i| radius * i as f64 / nodes as f64)
                .collect(),
            Geometry::Torus { nodes } => (0..nodes)
                .map(|j| 2.0 * PI * j as f64 / nodes as f64)
                .collect(),
        }
    }

    pub fn spacing(&self) -> f64 {
        match *self {
            Geometry::Radial { radius, nodes } => radius / nodes as f64,
            Geometry::Torus { nodes } => 2.0 * PI / nodes as f64,
        }
    }

    /// |x| entering the weight (1+|x|)^θ: r, or the periodic distance to 0.
    fn distance(&self, x: f64) -> f64 {
        match self {
            Geometry::Radial { .. } => x,
            Geometry::Torus { .. } => x.min(2.0 * PI - x),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BumpShape {
    /// exp(−|x|²/(2s²)), with |x| the periodic distance on the torus.
    Gaussian,
    /// (1 + cos(π|x|/s))/2 for |x| < s, else 0.
    Cosine,
}

/// ρ̄(x) = 1 + ε·bump(x).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackgroundSpec {
    pub shape: BumpShape,
    pub epsilon: f64,
    pub scale: f64,
}

impl Default for BackgroundSpec {
    fn default() -> Self {
        Self {
            shape: BumpShape::Gaussian,
            epsilon: 1e-3,
            scale: 1.0,
        }
    }
}

impl BackgroundSpec {
    pub fn bump(&self, distance: f64) -> f64 {
        let s = self.scale;
        match self.shape {
            BumpShape::Gaussian => (-distance * distance / (2.0 * s * s)).exp(),
            BumpShape::Cosine => {
                if distance < s {
                    0.5 * (1.0 + (PI * distance / s).cos())
                } else {
                    0.0
                }
            }
        }
    }

    pub fn sample(&self, geometry: &Geometry) -> Vec<f64> {
        geometry
            .coords()
            .iter()
            .map(|&x| 1.0 + self.epsilon * self.bump(geometry.distance(x)))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StationaryConfig {
    pub geometry: Geometry,
    pub background: BackgroundSpec,
    /// Newton stops once max|Δφ − e^φ + ρ̄| ≤ tol.
    pub tol: f64,
    pub max_iter: usize,
    /// Largest admissible ‖ρ̄ − 1‖_∞.
    pub smallness: f64,
    /// ε values of the scaling study (each half the previous in the default).
    pub scaling_epsilons: Vec<f64>,
    /// (m, θ) of the weighted norm W^{m,∞}_θ.
    pub norm_order: usize,
    pub theta: f64,
}

impl Default for StationaryConfig {
    /// Radial grid R = 30 with 1500 intervals, Gaussian bump of width 1, ε = 10⁻³.
    fn default() -> Self {
        Self {
            geometry: Geometry::Radial {
                radius: 30.0,
                nodes: 1500,
            },
            background: BackgroundSpec::default(),
            tol: 1e-10,
            max_iter: 50,
            smallness: 0.5,
            scaling_epsilons: vec![1e-3, 5e-4],
            norm_order: 2,
            theta: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StationaryProfile {
    pub geometry: Geometry,
    pub coords: Vec<f64>,
    pub phi: Vec<f64>,
    pub rho_bar: Vec<f64>,
    pub residual: f64,
    /// Residual before each Newton step and after the last one.
    pub history: Vec<f64>,
}

impl StationaryProfile {
    pub fn iterations(&self) -> usize {
        self.history.len().saturating_sub(1)
    }

    pub fn phi_sup(&self) -> f64 {
        self.phi.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn phi_norm(&self, m: usize, theta: f64) -> Result<f64> {
        weighted_sup_norm(&self.geometry, &self.phi, m, theta)
    }

    pub fn background_norm(&self, m: usize, theta: f64) -> Result<f64> {
        let dev: Vec<f64> = self.rho_bar.iter().map(|r| r - 1.0).collect();
        weighted_sup_norm(&self.geometry, &dev, m, theta)
    }

    /// max r_{j+1}/r_j² over steps with r_j ≤ 10⁻² and r_{j+1} above the roundoff floor.
    pub fn quadratic_constant(&self) -> Option<f64> {
        self.history
            .windows(2)
            .filter(|w| w[0] <= 1e-2 && w[0] > 0.0 && w[1] > 1e-14)
            .map(|w| w[1] / (w[0] * w[0]))
            .fold(None, |m: Option<f64>, c| Some(m.map_or(c, |m| m.max(c))))
    }
}

/// Unknowns: φ(r_0..r_{N−1}) radially (φ(r_N) = 0), or all torus nodes.
struct Discrete {
    geometry: Geometry,
    rho: Vec<f64>,
    h: f64,
    coords: Vec<f64>,
}

impl Discrete {
    fn unknowns(&self) -> usize {
        match self.geometry {
            Geometry::Radial { nodes, .. } => nodes,
            Geometry::Torus { nodes } => nodes,
        }
    }

    /// Discrete Laplacian at node i of the unknown vector.
    fn laplacian(&self, phi: &[f64], i: usize) -> f64 {
        let h2 = self.h * self.h;
        match self.geometry {
            Geometry::Radial { nodes, .. } => {
                let r = &self.coords;
                let at = |j: usize| if j >= nodes { 0.0 } else { phi[j] };
                if i == 0 {
                    6.0 * (phi[1] - phi[0]) / h2
                } else {
                    (r[i + 1] * at(i + 1) - 2.0 * r[i] * phi[i] + r[i - 1] * phi[i - 1])
                        / (h2 * r[i])
                }
            }
            Geometry::Torus { nodes } => {
                let n = nodes;
                (phi[(i + 1) % n] - 2.0 * phi[i] + phi[(i + n - 1) % n]) / h2
            }
        }
    }

    fn residual(&self, phi: &[f64]) -> Vec<f64> {
        (0..phi.len())
            .map(|i| self.laplacian(phi, i) - phi[i].exp() + self.rho[i])
            .collect()
    }

    /// Newton correction δ solving (Δ − diag e^φ) δ = −F.
    fn correction(&self, phi: &[f64], f: &[f64]) -> Result<Vec<f64>> {
        let n = phi.len();
        let h2 = self.h * self.h;
        match self.geometry {
            Geometry::Radial { .. } => {
                let r = &self.coords;
                let mut lower = vec![0.0; n];
                let mut diag = vec![0.0; n];
                let mut upper = vec![0.0; n];
                for i in 0..n {
                    if i == 0 {
                        diag[0] = -6.0 / h2 - phi[0].exp();
                        upper[0] = 6.0 / h2;
                    } else {
                        lower[i] = r[i - 1] / (h2 * r[i]);
                        diag[i] = -2.0 / h2 - phi[i].exp();
                        upper[i] = r[i + 1] / (h2 * r[i]);
                    }
                }
                let rhs: Vec<f64> = f.iter().map(|v| -v).collect();
                thomas(&lower, &diag, &upper, &rhs)
            }
            Geometry::Torus { .. } => {
                let mut j = DMatrix::<f64>::zeros(n, n);
                for i in 0..n {
                    j[(i, i)] = -2.0 / h2 - phi[i].exp();
                    j[(i, (i + 1) % n)] += 1.0 / h2;
                    j[(i, (i + n - 1) % n)] += 1.0 / h2;
                }
                let rhs = DVector::from_iterator(n, f.iter().map(|v| -v));
                j.lu()
                    .solve(&rhs)
                    .map(|d| d.iter().copied().collect())
                    .ok_or_else(|| LabError::NewtonDivergence(f64::NAN))
            }
        }
    }

    fn full_profile(&self, phi: &[f64]) -> Vec<f64> {
        let mut out = phi.to_vec();
        if matches!(self.geometry, Geometry::Radial { .. }) {
            out.push(0.0);
        }
        out
    }
}

/// Tridiagonal solve (lower[0] and upper[n−1] unused).
fn thomas(lower: &[f64], diag: &[f64], upper: &[f64], rhs: &[f64]) -> Result<Vec<f64>> {
    let n = diag.len();
    let mut c = vec![0.0; n];
    let mut d = vec![0.0; n];
    let mut denom = diag[0];
    if denom == 0.0 {
        return Err(LabError::NewtonDivergence(f64::NAN));
    }
    c[0] = upper[0] / denom;
    d[0] = rhs[0] / denom;
    for i in 1..n {
        denom = diag[i] - lower[i] * c[i - 1];
        if denom == 0.0 {
            return Err(LabError::NewtonDivergence(f64::NAN));
        }
        c[i] = if i + 1 < n { upper[i] / denom } else { 0.0 };
        d[i] = (rhs[i] - lower[i] * d[i - 1]) / denom;
    }
    for i in (0..n - 1).rev() {
        d[i] -= c[i] * d[i + 1];
    }
    Ok(d)
}

fn sup(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

fn discretize(cfg: &StationaryConfig) -> Result<Discrete> {
    cfg.geometry.validate()?;
    if !(cfg.tol > 0.0) || cfg.max_iter == 0 {
        return Err(invalid("stationary", "need tol > 0 and max_iter ≥ 1"));
    }
    if !(cfg.background.scale > 0.0) || !cfg.background.epsilon.is_finite() {
        return Err(invalid("background", "need scale > 0 and finite ε"));
    }
    let rho = cfg.background.sample(&cfg.geometry);
    let dev = rho.iter().fold(0.0f64, |m, r| m.max((r - 1.0).abs()));
    if !(dev <= cfg.smallness) {
        return Err(invalid(
            "background",
            format!(
                "‖ρ̄ − 1‖_∞ = {dev} exceeds the smallness threshold {}",
                cfg.smallness
            ),
        ));
    }
    let coords = cfg.geometry.coords();
    let mut rho = rho;
    if matches!(cfg.geometry, Geometry::Radial { .. }) {
        rho.pop();
    }
    Ok(Discrete {
        geometry: cfg.geometry.clone(),
        rho,
        h: cfg.geometry.spacing(),
        coords,
    })
}

pub fn solve_stationary(cfg: &StationaryConfig) -> Result<StationaryProfile> {
    solve_stationary_from(cfg, None)
}

/// Newton iteration from φ = 0 or from a given profile on the full node set.
pub fn solve_stationary_from(
    cfg: &StationaryConfig,
    start: Option<&[f64]>,
) -> Result<StationaryProfile> {
    let disc = discretize(cfg)?;
    let n = disc.unknowns();
    let mut phi = match start {
        Some(s) if s.len() == cfg.geometry.coords().len() => s[..n].to_vec(),
        Some(s) => {
            return Err(LabError::GridMismatch {
                expected: cfg.geometry.coords().len(),
                got: s.len(),
            })
        }
        None => vec![0.0; n],
    };
    let mut f = disc.residual(&phi);
    let mut history = vec![sup(&f)];
    while *history.last().unwrap() > cfg.tol {
        let last = *history.last().unwrap();
        if history.len() > cfg.max_iter || !last.is_finite() || last > 1e6 * history[0].max(1.0) {
            return Err(LabError::NewtonDivergence(last));
        }
        let delta = disc.correction(&phi, &f)?;
        phi.iter_mut().zip(&delta).for_each(|(p, d)| *p += d);
        f = disc.residual(&phi);
        history.push(sup(&f));
    }
    let mut rho_bar = disc.rho.clone();
    if matches!(cfg.geometry, Geometry::Radial { .. }) {
        rho_bar.push(1.0 + cfg.background.epsilon * cfg.background.bump(disc.coords[n]));
    }
    Ok(StationaryProfile {
        geometry: cfg.geometry.clone(),
        coords: disc.coords.clone(),
        phi: disc.full_profile(&phi),
        rho_bar,
        residual: *history.last().unwrap(),
        history,
    })
}

/// Largest supported derivative order of the weighted norm.
pub const MAX_NORM_ORDER: usize = 2;

/// sup_x (1+|x|)^θ Σ_{j≤m} |g^{(j)}(x)| with central differences; radial profiles
/// are extended evenly through r = 0 and use one-sided stencils at r = R.
pub fn weighted_sup_norm(geometry: &Geometry, values: &[f64], m: usize, theta: f64) -> Result<f64> {
    if m > MAX_NORM_ORDER {
        return Err(invalid(
            "m",
            format!("{m} > {MAX_NORM_ORDER} is beyond the difference stencils"),
        ));
    }
    if !(theta >= 0.0) {
        return Err(invalid("theta", "must be non-negative"));
    }
    let coords = geometry.coords();
    if values.len() != coords.len() {
        return Err(LabError::GridMismatch {
            expected: coords.len(),
            got: values.len(),
        });
    }
    let n = values.len();
    let h = geometry.spacing();
    let torus = matches!(geometry, Geometry::Torus { .. });
    let at = |i: isize| -> f64 {
        if torus {
            values[i.rem_euclid(n as isize) as usize]
        } else {
            values[i.unsigned_abs()]
        }
    };
    let mut best = 0.0f64;
    for i in 0..n {
        let ii = i as isize;
        let (d1, d2) = if !torus && i == n - 1 {
            let (a, b, c) = (at(ii), at(ii - 1), at(ii - 2));
            (
                (3.0 * a - 4.0 * b + c) / (2.0 * h),
                (a - 2.0 * b + c) / (h * h),
            )
        } else {
            let (p, q) = (at(ii + 1), at(ii - 1));
            ((p - q) / (2.0 * h), (p - 2.0 * values[i] + q) / (h * h))
        };
        let mut s = values[i].abs();
        if m >= 1 {
            s += d1.abs();
        }
        if m >= 2 {
            s += d2.abs();
        }
        best = best.max((1.0 + geometry.distance(coords[i])).powf(theta) * s);
    }
    Ok(best)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalingReport {
    pub epsilons: Vec<f64>,
    pub phi_sup: Vec<f64>,
    /// ‖φ‖_{W^{m,∞}_θ} / ‖ρ̄−1‖_{W^{m,∞}_θ} per ε.
    pub constants: Vec<f64>,
    /// ‖φ_ε‖_∞ / ‖φ_{ε'}‖_∞ over consecutive pairs, normalized by ε/ε'.
    pub normalized_ratios: Vec<f64>,
    pub max_residual: f64,
}

pub fn scaling_study(cfg: &StationaryConfig) -> Result<ScalingReport> {
    if cfg.scaling_epsilons.len() < 2 {
        return Err(invalid("scaling_epsilons", "need at least two values"));
    }
    let mut rep = ScalingReport {
        epsilons: cfg.scaling_epsilons.clone(),
        phi_sup: Vec::new(),
        constants: Vec::new(),
        normalized_ratios: Vec::new(),
        max_residual: 0.0,
    };
    for &eps in &cfg.scaling_epsilons {
        let mut c = cfg.clone();
        c.background.epsilon = eps;
        let p = solve_stationary(&c)?;
        rep.phi_sup.push(p.phi_sup());
        let bg = p.background_norm(cfg.norm_order, cfg.theta)?;
        rep.constants.push(if bg > 0.0 {
            p.phi_norm(cfg.norm_order, cfg.theta)? / bg
        } else {
            0.0
        });
        rep.max_residual = rep.max_residual.max(p.residual);
    }
    for i in 1..rep.epsilons.len() {
        let r = rep.phi_sup[i - 1] / rep.phi_sup[i];
        rep.normalized_ratios
            .push(r / (rep.epsilons[i - 1] / rep.epsilons[i]));
    }
    Ok(rep)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StationaryReport {
    pub profile: StationaryProfile,
    pub scaling: ScalingReport,
    pub quadratic_constant: Option<f64>,
    /// max|φ_a − φ_b| for Newton started at 0 and at a perturbed linearized profile.
    pub uniqueness_gap: f64,
    /// max|φ_R − φ_{2R}| on the common nodes (radial only).
    pub cutoff_sensitivity: Option<f64>,
    pub passed: bool,
}

/// Tolerance on the normalized halving ratio.
pub const SCALING_TOLERANCE: f64 = 0.1;

pub fn run_stationary(cfg: &StationaryConfig) -> Result<StationaryReport> {
    let profile = solve_stationary(cfg)?;
    let scaling = scaling_study(cfg)?;
    let disc = discretize(cfg)?;
    let lin = linearized_profile(&disc)?;
    let start: Vec<f64> = disc.full_profile(&lin).iter().map(|v| 1.5 * v).collect();
    let other = solve_stationary_from(cfg, Some(&start))?;
    let uniqueness_gap = profile
        .phi
        .iter()
        .zip(&other.phi)
        .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
    let cutoff_sensitivity = match cfg.geometry {
        Geometry::Radial { radius, nodes } => {
            let mut c = cfg.clone();
            c.geometry = Geometry::Radial {
                radius: 2.0 * radius,
                nodes: 2 * nodes,
            };
            let wide = solve_stationary(&c)?;
            Some(
                profile
                    .phi
                    .iter()
                    .zip(&wide.phi)
                    .fold(0.0f64, |m, (a, b)| m.max((a - b).abs())),
            )
        }
        Geometry::Torus { .. } => None,
    };
    let tol_gap = 10.0 * cfg.tol;
    let passed = profile.residual <= cfg.tol
        && scaling.max_residual <= cfg.tol
        && scaling
            .normalized_ratios
            .iter()
            .all(|r| (r - 1.0).abs() <= SCALING_TOLERANCE)
        && uniqueness_gap <= tol_gap;
    Ok(StationaryReport {
        quadratic_constant: profile.quadratic_constant(),
        profile,
        scaling,
        uniqueness_gap,
        cutoff_sensitivity,
        passed,
    })
}

/// Solution of the linearization (Δ − 1)φ = 1 − ρ̄ about φ = 0.
fn linearized_profile(disc: &Discrete) -> Result<Vec<f64>> {
    let zero = vec![0.0; disc.unknowns()];
    let f = disc.residual(&zero);
    disc.correction(&zero, &f)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn radial(eps: f64) -> StationaryConfig {
        let mut c = StationaryConfig::default();
        c.geometry = Geometry::Radial {
            radius: 20.0,
            nodes: 400,
        };
        c.background.epsilon = eps;
        c
    }

    #[test]
    fn flat_background_gives_zero_potential() {
        for g in [
            Geometry::Radial {
                radius: 10.0,
                nodes: 50,
            },
            Geometry::Torus { nodes: 32 },
        ] {
            let mut c = StationaryConfig::default();
            c.geometry = g;
            c.background.epsilon = 0.0;
            let p = solve_stationary(&c).unwrap();
            assert!(p.phi.iter().all(|v| *v == 0.0));
            assert_eq!(p.iterations(), 0);
        }
    }

    #[test]
    fn newton_converges_quadratically() {
        let mut c = radial(0.3);
        c.tol = 1e-13;
        let p = solve_stationary(&c).unwrap();
        assert!(p.residual <= 1e-13);
        assert!(p.iterations() >= 3);
        let k = p.quadratic_constant().unwrap();
        assert!(k < 10.0, "{k} {:?}", p.history);
        assert_eq!(*p.phi.last().unwrap(), 0.0);
        assert!(p.phi[0] > 0.0);
    }

    #[test]
    fn linear_regime_halves_with_epsilon() {
        for g in [
            Geometry::Radial {
                radius: 20.0,
                nodes: 400,
            },
            Geometry::Torus { nodes: 64 },
        ] {
            let mut c = StationaryConfig::default();
            c.geometry = g;
            let s = scaling_study(&c).unwrap();
            assert_relative_eq!(s.normalized_ratios[0], 1.0, epsilon = 1e-3);
            assert!(s.max_residual <= 1e-10);
            assert!(s.constants.iter().all(|c| *c > 0.0 && c.is_finite()));
        }
    }

    #[test]
    fn linearized_radial_solution_matches_screened_coulomb() {
        let mut c = radial(1e-7);
        c.geometry = Geometry::Radial {
            radius: 25.0,
            nodes: 2500,
        };
        let p = solve_stationary(&c).unwrap();
        // (Δ − 1)φ = −ε e^{−r²/2}: φ(0) = ε ∫ r e^{−r} e^{−r²/2} dr with the Yukawa kernel.
        let n = 20000;
        let h = 25.0 / n as f64;
        let oracle: f64 = (0..n)
            .map(|i| {
                let r = (i as f64 + 0.5) * h;
                r * (-r).exp() * (-r * r / 2.0).exp() * h
            })
            .sum::<f64>()
            * 1e-7;
        assert_relative_eq!(p.phi[0], oracle, max_relative = 1e-3);
    }

    #[test]
    fn torus_solution_balances_mass() {
        let mut c = StationaryConfig::default();
        c.geometry = Geometry::Torus { nodes: 64 };
        c.background.epsilon = 0.2;
        let p = solve_stationary(&c).unwrap();
        let lhs: f64 = p.phi.iter().map(|v| v.exp()).sum();
        let rhs: f64 = p.rho_bar.iter().sum();
        assert_relative_eq!(lhs, rhs, max_relative = 1e-10);
    }

    #[test]
    fn rejects_large_or_invalid_backgrounds() {
        let c = radial(0.8);
        assert!(matches!(
            solve_stationary(&c),
            Err(LabError::InvalidArgument { .. })
        ));
        let mut c = radial(1e-3);
        c.geometry = Geometry::Torus { nodes: 2 };
        assert!(solve_stationary(&c).is_err());
        let c = radial(1e-3);
        assert!(solve_stationary_from(&c, Some(&[0.0; 3])).is_err());
    }

    #[test]
    fn newton_reports_divergence_from_a_far_start() {
        let mut c = radial(1e-3);
        c.max_iter = 2;
        let far = vec![30.0; 401];
        assert!(matches!(
            solve_stationary_from(&c, Some(&far)),
            Err(LabError::NewtonDivergence(_))
        ));
    }

    #[test]
    fn weighted_norm_examples() {
        let g = Geometry::Radial {
            radius: 10.0,
            nodes: 1000,
        };
        assert_eq!(
            weighted_sup_norm(&g, &vec![0.0; 1001], 2, 1.0).unwrap(),
            0.0
        );
        assert!(weighted_sup_norm(&g, &vec![0.0; 1001], 3, 1.0).is_err());
        assert!(weighted_sup_norm(&g, &vec![0.0; 10], 0, 1.0).is_err());
        // g = (1+r)^{−θ}: the weighted sum is 1 + θ/(1+r) + θ(θ+1)/(1+r)², maximal at r = 0.
        let theta = 1.5;
        let sample = |nodes: usize| {
            let g = Geometry::Radial {
                radius: 10.0,
                nodes,
            };
            let v: Vec<f64> = g.coords().iter().map(|r| (1.0 + r).powf(-theta)).collect();
            (g.clone(), v)
        };
        let (g1, v1) = sample(2000);
        let m0 = weighted_sup_norm(&g1, &v1, 0, theta).unwrap();
        assert_relative_eq!(m0, 1.0, epsilon = 1e-12);
        let fine = weighted_sup_norm(&g1, &v1, 1, theta).unwrap();
        let (g2, v2) = sample(4000);
        let finer = weighted_sup_norm(&g2, &v2, 1, theta).unwrap();
        assert_relative_eq!(fine, finer, max_relative = 1e-2);
        let interior = (1.0 + 1.0f64).powf(theta) * (2.0f64.powf(-theta) * (1.0 + theta / 2.0));
        assert!(fine >= interior * 0.999);
        let bump = BackgroundSpec {
            shape: BumpShape::Cosine,
            epsilon: 1.0,
            scale: 1.0,
        };
        let off: Vec<f64> = g1
            .coords()
            .iter()
            .map(|r| bump.bump((r - 5.0).abs()))
            .collect();
        let a = weighted_sup_norm(&g1, &off, 0, 0.5).unwrap();
        let b = weighted_sup_norm(&g1, &off, 0, 1.0).unwrap();
        assert!(b > a && a > 1.0);
    }

    #[test]
    fn full_report_passes_and_is_unique() {
        let r = run_stationary(&radial(1e-3)).unwrap();
        assert!(r.passed, "{r:?}");
        assert!(r.uniqueness_gap <= 1e-9);
        assert!(r.cutoff_sensitivity.unwrap() < 1e-6);
    }
}
