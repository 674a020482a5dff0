//! Regenerates `goldens.json`: `cargo run --release --example calibrate > crates/core/goldens.json`.

use logfield::comparison::default_cy_scales;
use logfield::extremes::{GAP_SLACK, LOWER_BOUND_FLOOR};
use logfield::golden::{Experiment, GoldenEntry, GoldenFile, GOLDEN_SCHEMA_VERSION};

fn dyadic(range: std::ops::RangeInclusive<i32>) -> Vec<f64> {
    range.map(|k| (-k as f64).exp2()).collect()
}

fn round_up(x: f64, digits: i32) -> f64 {
    let s = 10f64.powi(digits);
    (x * s).ceil() / s
}

fn entry(name: &str, description: &str, experiment: Experiment, frozen: impl Fn(f64) -> Option<f64>, reduced: Experiment) -> GoldenEntry {
    let m = experiment.run().expect("calibration run");
    let tolerance = match (m.se, replicas(&experiment), replicas(&reduced)) {
        // The reduced run shares its first replicas with the full one.
        (Some(se), Some(full), Some(part)) => 4.0 * se * (full as f64 / part as f64).sqrt(),
        _ => 1e-9 * m.value.abs().max(1.0),
    };
    eprintln!("{name}: {} (se {:?}) tolerance {tolerance:e}", m.value, m.se);
    GoldenEntry {
        name: name.into(),
        description: description.into(),
        frozen: frozen(m.value),
        value: m.value,
        se: m.se,
        experiment,
        reduced,
        tolerance,
    }
}

fn replicas(e: &Experiment) -> Option<usize> {
    match *e {
        Experiment::Exceedance { replicas, .. }
        | Experiment::ExpectationGap { replicas, .. }
        | Experiment::Barrier { replicas, .. } => Some(replicas),
        _ => None,
    }
}

fn main() {
    let eps = |k: i32| (-k as f64).exp2();
    let hier = Experiment::HierarchicalDiscrepancy { d: 2, eps: eps(4), levels_per_unit: 8, z_resolution: 8 };
    let entries = vec![
        entry(
            "hierarchical_discrepancy",
            "max covariance discrepancy of the hierarchical MBRW sampler, d = 2, eps = 2^-4, L = 8, z = 8; frozen bound is the value rounded up to 2 decimals",
            hier.clone(),
            |v| Some(round_up(v, 2)),
            hier,
        ),
        entry(
            "mgff_deviation",
            "sup |Cov(X_eps) + (2/pi) log max(eps, |x-y|)| on bulk pairs, eps = 2^-3..2^-7; frozen bound rounded up to 2 decimals",
            Experiment::MgffDeviation { scales: dyadic(3..=7) },
            |v| Some(round_up(v, 2)),
            Experiment::MgffDeviation { scales: dyadic(3..=4) },
        ),
        entry(
            "mgff_ratio",
            "sup E[(X^x - X^y)^2] eps / |x-y| on bulk pairs with |x-y| <= eps, eps = 2^-3..2^-7; frozen bound rounded up to 2 decimals",
            Experiment::MgffRatio { scales: dyadic(3..=7) },
            |v| Some(round_up(v, 2)),
            Experiment::MgffRatio { scales: dyadic(7..=7) },
        ),
        entry(
            "mgff_class_constant",
            "C_Y of Y = sqrt(pi/2) X_{eps/2}(1/4 + x/2) over eps = 2^-3..2^-14",
            Experiment::MgffClassConstant { scales: default_cy_scales() },
            |_| None,
            Experiment::MgffClassConstant { scales: dyadic(14..=14) },
        ),
        entry(
            "exceedance_floor",
            "P(max >= m_eps) for the MBRW, d = 2, eps = 2^-6; the frozen floor sits far below it",
            Experiment::Exceedance { d: 2, eps: eps(6), replicas: 10_000, seed: 1 },
            |_| Some(LOWER_BOUND_FLOOR),
            Experiment::Exceedance { d: 2, eps: eps(6), replicas: 1_000, seed: 1 },
        ),
        entry(
            "gap_slack",
            "E[max] - m_eps for the MBRW, d = 2, eps = 2^-6; the frozen slack bounds its drift over scales",
            Experiment::ExpectationGap { d: 2, eps: eps(6), replicas: 10_000, seed: 1 },
            |_| Some(GAP_SLACK),
            Experiment::ExpectationGap { d: 2, eps: eps(6), replicas: 1_000, seed: 1 },
        ),
        entry(
            "barrier_t16",
            "T^{3/2} P(W <= 1 on [0, T], W_T >= 0) at T = 16, 4 steps per unit",
            Experiment::Barrier { horizon: 16.0, steps_per_unit: 4, replicas: 100_000, seed: 3 },
            |_| None,
            Experiment::Barrier { horizon: 16.0, steps_per_unit: 4, replicas: 10_000, seed: 3 },
        ),
    ];
    let file = GoldenFile { schema_version: GOLDEN_SCHEMA_VERSION, entries };
    println!("{}", file.to_json());
}
