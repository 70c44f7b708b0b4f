//! Field-wise regression comparison of two run records.

use crate::error::{CliError, Result};
use crate::run::RunRecord;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};

/// Absolute tolerance per metric; `default` applies to unlisted metrics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Tolerances {
    pub default: f64,
    pub fields: BTreeMap<String, f64>,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self {
            default: 0.0,
            fields: BTreeMap::new(),
        }
    }
}

impl Tolerances {
    pub fn uniform(default: f64) -> Self {
        Self {
            default,
            fields: BTreeMap::new(),
        }
    }

    pub fn with(mut self, field: &str, tol: f64) -> Self {
        self.fields.insert(field.into(), tol);
        self
    }

    pub fn get(&self, field: &str) -> f64 {
        self.fields.get(field).copied().unwrap_or(self.default)
    }
}

/// A metric that differs between the records; a missing side is `None`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiffEntry {
    pub field: String,
    pub a: Option<f64>,
    pub b: Option<f64>,
    pub delta: Option<f64>,
    pub tolerance: f64,
    pub within: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiffReport {
    pub kind: String,
    pub entries: Vec<DiffEntry>,
    pub passed: bool,
}

impl DiffReport {
    pub fn flagged(&self) -> impl Iterator<Item = &DiffEntry> {
        self.entries.iter().filter(|e| !e.within)
    }
}

fn verdict(r: &RunRecord) -> f64 {
    f64::from(u8::from(r.summary.passed))
}

/// Compares the summary metrics and the overall verdict; only differing
/// fields are listed.
pub fn compare(a: &RunRecord, b: &RunRecord, tol: &Tolerances) -> Result<DiffReport> {
    if a.summary.kind != b.summary.kind {
        return Err(CliError::KindMismatch {
            a: a.summary.kind.to_string(),
            b: b.summary.kind.to_string(),
        });
    }
    let mut fields: BTreeSet<&String> = a.summary.metrics.keys().collect();
    fields.extend(b.summary.metrics.keys());
    let mut entries = Vec::new();
    let passed_key = "passed".to_string();
    let rows = fields
        .into_iter()
        .map(|f| {
            (
                f,
                a.summary.metrics.get(f).copied(),
                b.summary.metrics.get(f).copied(),
            )
        })
        .chain(std::iter::once((
            &passed_key,
            Some(verdict(a)),
            Some(verdict(b)),
        )));
    for (field, va, vb) in rows {
        let tolerance = tol.get(field);
        let delta = match (va, vb) {
            (Some(x), Some(y)) => Some((x - y).abs()),
            _ => None,
        };
        if delta == Some(0.0) {
            continue;
        }
        entries.push(DiffEntry {
            field: field.clone(),
            a: va,
            b: vb,
            delta,
            tolerance,
            within: delta.is_some_and(|d| d <= tolerance),
        });
    }
    Ok(DiffReport {
        kind: a.summary.kind.to_string(),
        passed: entries.iter().all(|e| e.within),
        entries,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{ExperimentConfig, ExperimentKind};
    use crate::run::Summary;

    fn record(kind: ExperimentKind, metrics: &[(&str, f64)]) -> RunRecord {
        RunRecord {
            config: ExperimentConfig::default(),
            version: "0".into(),
            wall_time_s: 1.0,
            outputs: Vec::new(),
            summary: Summary {
                kind,
                passed: true,
                metrics: metrics.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
                checks: Vec::new(),
                notes: Vec::new(),
            },
        }
    }

    #[test]
    fn identical_records_give_empty_diff() {
        let a = record(ExperimentKind::Decay, &[("exponent", 0.25)]);
        let d = compare(&a, &a.clone(), &Tolerances::default()).unwrap();
        assert!(d.entries.is_empty() && d.passed);
    }

    #[test]
    fn drift_under_tolerance_passes_with_delta() {
        let a = record(ExperimentKind::Decay, &[("exponent", 0.25)]);
        let b = record(ExperimentKind::Decay, &[("exponent", 0.27)]);
        let d = compare(&a, &b, &Tolerances::uniform(0.0).with("exponent", 0.05)).unwrap();
        assert!(d.passed);
        assert_eq!(d.entries.len(), 1);
        assert!((d.entries[0].delta.unwrap() - 0.02).abs() < 1e-12);
    }

    #[test]
    fn drift_over_tolerance_is_flagged() {
        let a = record(ExperimentKind::Decay, &[("exponent", 0.25)]);
        let b = record(ExperimentKind::Decay, &[("exponent", 0.40)]);
        let d = compare(&a, &b, &Tolerances::uniform(0.05)).unwrap();
        assert!(!d.passed);
        assert_eq!(d.flagged().next().unwrap().field, "exponent");
    }

    #[test]
    fn missing_metric_and_verdict_flip_are_flagged() {
        let a = record(ExperimentKind::Torus, &[("rate", 0.2), ("lambda", 0.1)]);
        let mut b = record(ExperimentKind::Torus, &[("rate", 0.2)]);
        b.summary.passed = false;
        let d = compare(&a, &b, &Tolerances::uniform(1.0)).unwrap();
        let flagged: Vec<&str> = d.flagged().map(|e| e.field.as_str()).collect();
        assert_eq!(flagged, vec!["lambda"]);
        let d = compare(&a, &b, &Tolerances::uniform(0.5)).unwrap();
        let flagged: Vec<&str> = d.flagged().map(|e| e.field.as_str()).collect();
        assert_eq!(flagged, vec!["lambda", "passed"]);
    }

    #[test]
    fn kind_mismatch_is_an_error() {
        let a = record(ExperimentKind::Decay, &[]);
        let b = record(ExperimentKind::Torus, &[]);
        assert!(matches!(
            compare(&a, &b, &Tolerances::default()),
            Err(CliError::KindMismatch { .. })
        ));
    }
}
