//! Calibrated constants, each with the experiment that produced it and a
//! cheaper rerun that reproduces it within a recorded tolerance.

use serde::{Deserialize, Serialize};

use crate::comparison::{bulk_map, cy_pairs, measure_mgff_c_y};
use crate::error::{domain, Error, Result};
use crate::extremes::{barrier_probability, lower_bound_from_maxima, FieldDesign, ScaleGap};
use crate::green::{moment_bound_check_with, PairEvaluator};
use crate::kernels::KernelSpec;
use crate::samplers::{HierarchicalConfig, HierarchicalSampler};

pub const GOLDEN_SCHEMA_VERSION: u32 = 1;

/// The bundled golden file.
pub const BUNDLED_GOLDENS: &str = include_str!("../goldens.json");

/// An experiment whose outcome is a single number.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Experiment {
    /// Largest `|implied - exact|` covariance of the hierarchical MBRW sampler.
    HierarchicalDiscrepancy { d: usize, eps: f64, levels_per_unit: usize, z_resolution: usize },
    /// Largest `|Cov(X_eps) + (2/pi) log max(eps, ‖x-y‖)|` on the bulk pairs.
    MgffDeviation { scales: Vec<f64> },
    /// Largest `E[(X^x - X^y)²] eps / ‖x-y‖` over bulk pairs with `‖x-y‖ ≤ eps`.
    MgffRatio { scales: Vec<f64> },
    /// The class constant `C_Y` of the rescaled bulk MGFF.
    MgffClassConstant { scales: Vec<f64> },
    /// `P(max ≥ m_eps)` for the MBRW on `V_eps`.
    Exceedance { d: usize, eps: f64, replicas: usize, seed: u64 },
    /// `E[max] - m_eps` for the MBRW on `V_eps`.
    ExpectationGap { d: usize, eps: f64, replicas: usize, seed: u64 },
    /// `T^{3/2} P(barrier event)`.
    Barrier { horizon: f64, steps_per_unit: usize, replicas: usize, seed: u64 },
}

/// A measured value with its Monte Carlo standard error, if any.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Measurement {
    pub value: f64,
    pub se: Option<f64>,
}

impl Measurement {
    fn exact(value: f64) -> Self {
        Self { value, se: None }
    }
}

/// Bulk pairs for the moment checks at mollifier radius `eps`.
pub fn mgff_moment_pairs(eps: f64) -> Vec<([f64; 2], [f64; 2])> {
    cy_pairs(2.0 * eps).iter().map(|(x, y)| (bulk_map(x), bulk_map(y))).collect()
}

fn moment_reports(scales: &[f64]) -> Result<Vec<crate::green::MomentReport>> {
    if scales.is_empty() {
        return domain("no scale given");
    }
    scales
        .iter()
        .map(|&eps| {
            if !(eps > 0.0 && eps <= 0.125) {
                return domain(format!("bulk moment scale {eps} outside (0, 1/8]"));
            }
            moment_bound_check_with(&PairEvaluator::Bulk { eps }, eps, 0.25, &mgff_moment_pairs(eps))
        })
        .collect()
}

impl Experiment {
    pub fn run(&self) -> Result<Measurement> {
        match self {
            Experiment::HierarchicalDiscrepancy { d, eps, levels_per_unit, z_resolution } => {
                let spec = KernelSpec::Mbrw { d: *d, eps: *eps };
                let cfg = HierarchicalConfig { levels_per_unit: *levels_per_unit, z_resolution: *z_resolution };
                Ok(Measurement::exact(HierarchicalSampler::new(&spec, cfg)?.max_discrepancy()?.0))
            }
            Experiment::MgffDeviation { scales } => {
                let r = moment_reports(scales)?;
                Ok(Measurement::exact(r.iter().map(|r| r.max_deviation).fold(0.0, f64::max)))
            }
            Experiment::MgffRatio { scales } => {
                let r = moment_reports(scales)?;
                Ok(Measurement::exact(r.iter().filter_map(|r| r.max_ratio).fold(0.0, f64::max)))
            }
            Experiment::MgffClassConstant { scales } => Ok(Measurement::exact(measure_mgff_c_y(scales)?.c_y)),
            Experiment::Exceedance { d, eps, replicas, seed } => {
                let design = FieldDesign::mbrw(*d, *eps)?;
                let maxima = design.maxima(*replicas, *seed)?;
                let p = lower_bound_from_maxima(&design, &maxima).estimate;
                let se = (p.estimate * (1.0 - p.estimate) / *replicas as f64).sqrt();
                Ok(Measurement { value: p.estimate, se: Some(se) })
            }
            Experiment::ExpectationGap { d, eps, replicas, seed } => {
                let design = FieldDesign::mbrw(*d, *eps)?;
                let maxima = design.maxima(*replicas, *seed)?;
                let g = ScaleGap::from_maxima(*eps, design.recentering.value, &maxima);
                Ok(Measurement { value: g.gap, se: Some(g.se) })
            }
            Experiment::Barrier { horizon, steps_per_unit, replicas, seed } => {
                let b = barrier_probability(*horizon, *steps_per_unit, *replicas, *seed)?;
                Ok(Measurement { value: b.scaled, se: Some(b.se * horizon.powf(1.5)) })
            }
        }
    }
}

/// One calibrated constant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GoldenEntry {
    pub name: String,
    pub description: String,
    /// The calibration run.
    pub experiment: Experiment,
    pub value: f64,
    pub se: Option<f64>,
    /// The constant frozen from `value`, when it differs from it.
    pub frozen: Option<f64>,
    /// The rerun used by validation.
    pub reduced: Experiment,
    /// Validation passes when `|reduced - value| < tolerance`.
    pub tolerance: f64,
}

impl GoldenEntry {
    /// `frozen` if set, else `value`.
    pub fn constant(&self) -> f64 {
        self.frozen.unwrap_or(self.value)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GoldenFile {
    pub schema_version: u32,
    pub entries: Vec<GoldenEntry>,
}

impl GoldenFile {
    pub fn parse(text: &str) -> Result<Self> {
        let file: GoldenFile = serde_json::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        if file.schema_version != GOLDEN_SCHEMA_VERSION {
            return Err(Error::Parse(format!(
                "golden schema version {} (expected {GOLDEN_SCHEMA_VERSION})",
                file.schema_version
            )));
        }
        Ok(file)
    }

    pub fn bundled() -> Self {
        Self::parse(BUNDLED_GOLDENS).expect("bundled goldens parse")
    }

    pub fn get(&self, name: &str) -> Result<&GoldenEntry> {
        self.entries
            .iter()
            .find(|e| e.name == name)
            .ok_or_else(|| Error::Domain(format!("no golden entry named {name}")))
    }

    /// The frozen constant of entry `name`.
    pub fn constant(&self, name: &str) -> Result<f64> {
        self.get(name).map(GoldenEntry::constant)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("goldens serialize")
    }
}

/// Outcome of one validation rerun.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GoldenCheck {
    pub name: String,
    pub expected: f64,
    pub measured: f64,
    pub difference: f64,
    pub tolerance: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GoldenReport {
    pub checks: Vec<GoldenCheck>,
    pub passed: bool,
}

impl GoldenReport {
    pub fn failures(&self) -> Vec<&GoldenCheck> {
        self.checks.iter().filter(|c| !c.passed).collect()
    }
}

/// Reruns every reduced experiment and compares it with its golden value.
pub fn validate_golden(file: &GoldenFile) -> Result<GoldenReport> {
    let checks = file
        .entries
        .iter()
        .map(|e| {
            let measured = e.reduced.run()?.value;
            let difference = (measured - e.value).abs();
            Ok(GoldenCheck {
                name: e.name.clone(),
                expected: e.value,
                measured,
                difference,
                tolerance: e.tolerance,
                passed: difference < e.tolerance,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let passed = checks.iter().all(|c| c.passed);
    Ok(GoldenReport { checks, passed })
}

/// Reads and validates a golden file from disk.
pub fn validate_golden_path(path: &std::path::Path) -> Result<GoldenReport> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
    validate_golden(&GoldenFile::parse(&text)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bundled_file_parses_and_names_are_unique() {
        let g = GoldenFile::bundled();
        let mut names: Vec<&str> = g.entries.iter().map(|e| e.name.as_str()).collect();
        names.sort_unstable();
        names.dedup();
        assert_eq!(names.len(), g.entries.len());
        assert!(g.entries.iter().all(|e| e.tolerance > 0.0));
    }

    #[test]
    fn corrupted_file_is_a_parse_error() {
        assert!(matches!(GoldenFile::parse("{\"schema_version\": 1, \"entries\": [{]}"), Err(Error::Parse(_))));
        assert!(matches!(GoldenFile::parse("{\"schema_version\": 9, \"entries\": []}"), Err(Error::Parse(_))));
    }

    #[test]
    fn zero_tolerance_fails() {
        let mut g = GoldenFile::bundled();
        g.entries.retain(|e| matches!(e.reduced, Experiment::HierarchicalDiscrepancy { .. }));
        assert!(validate_golden(&g).unwrap().passed);
        g.entries[0].tolerance = 0.0;
        let report = validate_golden(&g).unwrap();
        assert!(!report.passed);
        assert_eq!(report.failures().len(), 1);
    }
}
