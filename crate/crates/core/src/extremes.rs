//! Monte Carlo for the recentered maximum: tails, the lower bound at the
//! recentering, the expectation gap across scales, and the barrier estimate.

use std::f64::consts::PI;

use rand::seq::IndexedRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};
use crate::green::bulk_points;
use crate::kernels::{m_eps, KernelSpec, RecenteringConstant};
use crate::lattice::PointSet;
use crate::rng::SeedSpec;
use crate::samplers::{
    CholeskySampler, FieldSample, HierarchicalConfig, HierarchicalSampler, Method, Sampler, TreeSampler,
};

/// Largest grid sampled exactly by Cholesky.
pub const EXACT_POINT_CAP: usize = 4096;

/// Two-sided 95% normal quantile.
pub const Z95: f64 = 1.959_963_984_540_054;

/// Largest value and the lowest index attaining it.
pub fn max_statistic(sample: &FieldSample) -> Result<(f64, usize)> {
    max_of(&sample.values)
}

pub fn max_of(values: &[f64]) -> Result<(f64, usize)> {
    let mut it = values.iter().enumerate();
    let (_, &first) = it.next().ok_or_else(|| Error::Domain("maximum of an empty sample".into()))?;
    let mut best = (first, 0);
    for (i, &v) in it {
        if v > best.0 {
            best = (v, i);
        }
    }
    Ok(best)
}

/// A field, the points it is observed on, how it is sampled and how its
/// maximum is recentered.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldDesign {
    pub kernel: KernelSpec,
    pub points: PointSet,
    pub method: Method,
    pub hierarchical: Option<HierarchicalConfig>,
    pub recentering: RecenteringConstant,
    /// Stream label shared by every experiment on this design.
    pub label: String,
}

impl FieldDesign {
    /// MBRW on `V_eps`: exact up to [`EXACT_POINT_CAP`] points, hierarchical above.
    pub fn mbrw(d: usize, eps: f64) -> Result<Self> {
        let kernel = KernelSpec::Mbrw { d, eps };
        let points = kernel.lattice_points()?;
        if points.len() <= EXACT_POINT_CAP {
            Self::mbrw_with(d, eps, Method::Cholesky, None)
        } else {
            Self::mbrw_with(d, eps, Method::Hierarchical, Some(HierarchicalConfig { levels_per_unit: 4, z_resolution: 4 }))
        }
    }

    pub fn mbrw_with(d: usize, eps: f64, method: Method, hierarchical: Option<HierarchicalConfig>) -> Result<Self> {
        let kernel = KernelSpec::Mbrw { d, eps };
        if method == Method::Hierarchical && hierarchical.is_none() {
            return domain("hierarchical sampling needs a configuration");
        }
        if !matches!(method, Method::Cholesky | Method::Hierarchical) {
            return domain(format!("MBRW cannot be sampled with {}", method.as_str()));
        }
        Ok(Self {
            kernel,
            points: kernel.lattice_points()?,
            method,
            hierarchical,
            recentering: kernel.recentering()?,
            label: format!("mbrw/d{d}/eps{eps:e}/{}", method.as_str()),
        })
    }

    /// BRW of depth `n` sampled on its tree.
    pub fn brw(d: usize, n: u32) -> Result<Self> {
        let kernel = KernelSpec::Brw { d, n };
        Ok(Self {
            kernel,
            points: kernel.lattice_points()?,
            method: Method::Tree,
            hierarchical: None,
            recentering: kernel.recentering()?,
            label: format!("brw/d{d}/n{n}/tree"),
        })
    }

    /// The bulk of the MGFF at scale `eps`: the field mollified at radius
    /// `eps/2` on `Q = [1/4, 3/4)²`, sampled at `1/4 + V_eps/2`, with maximum
    /// recentered by `sqrt(2/pi) m_eps`.
    pub fn mgff_bulk(eps: f64, truncation: usize) -> Result<Self> {
        let kernel = KernelSpec::Mgff { eps: eps / 2.0, truncation };
        kernel.validate()?;
        Ok(Self {
            kernel,
            points: bulk_points(eps)?,
            method: Method::Cholesky,
            hierarchical: None,
            recentering: RecenteringConstant::new(2, eps, (2.0 / PI).sqrt())?,
            label: format!("mgff/eps{eps:e}/n{truncation}/cholesky"),
        })
    }

    /// Any kernel on explicit points, sampled exactly.
    pub fn custom(kernel: KernelSpec, points: PointSet, recentering: RecenteringConstant, label: &str) -> Self {
        Self { kernel, points, method: Method::Cholesky, hierarchical: None, recentering, label: label.to_string() }
    }

    pub fn eps(&self) -> f64 {
        self.recentering.eps
    }

    /// Maxima of replicas `0..m`, in replica order.
    pub fn maxima(&self, m: usize, master_seed: u64) -> Result<Vec<f64>> {
        let seed = SeedSpec::new(master_seed, 0, self.label.clone());
        let range = 0..m as u64;
        let max = |_: u64, v: &[f64]| max_of(v).map(|x| x.0).unwrap_or(f64::NAN);
        match self.method {
            Method::Cholesky => {
                if self.points.len() > EXACT_POINT_CAP {
                    return Err(Error::Size { what: "exact sampling grid", size: self.points.len(), cap: EXACT_POINT_CAP });
                }
                CholeskySampler::new(&self.kernel, &self.points)?.draw_map_batched(&seed, range, max)
            }
            Method::Tree => {
                let (d, n) = match self.kernel {
                    KernelSpec::Brw { d, n } => (d, n),
                    _ => return domain("tree sampling needs a BRW kernel"),
                };
                TreeSampler::new(n, d)?.draw_map(&seed, range, max)
            }
            Method::Hierarchical => {
                let cfg = self.hierarchical.ok_or_else(|| Error::Domain("missing hierarchical configuration".into()))?;
                HierarchicalSampler::new(&self.kernel, cfg)?.draw_map(&seed, range, max)
            }
            Method::SheetGrid => domain("maxima of the sheet field are not part of any experiment"),
        }
    }
}

/// A binomial proportion with its Wilson 95% interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Proportion {
    pub count: usize,
    pub total: usize,
    pub estimate: f64,
    pub lower: f64,
    pub upper: f64,
}

impl Proportion {
    pub fn wilson(count: usize, total: usize) -> Self {
        let n = total as f64;
        let p = count as f64 / n;
        let z2 = Z95 * Z95;
        let denom = 1.0 + z2 / n;
        let center = (p + z2 / (2.0 * n)) / denom;
        let half = Z95 / denom * (p * (1.0 - p) / n + z2 / (4.0 * n * n)).sqrt();
        let lower = (center - half).max(0.0).min(p);
        let upper = (center + half).min(1.0).max(p);
        Self { count, total, estimate: p, lower, upper }
    }

    pub fn half_width(&self) -> f64 {
        0.5 * (self.upper - self.lower)
    }
}

/// Least-squares decay rate of `log P` against `λ`, with a bootstrap interval.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateFit {
    pub rate: f64,
    pub lower: f64,
    pub upper: f64,
    pub lambdas_used: Vec<f64>,
    pub bootstrap_draws: usize,
}

impl RateFit {
    pub fn excludes_zero(&self) -> bool {
        self.rate > 0.0 && self.lower > 0.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TailEstimate {
    pub lambda_grid: Vec<f64>,
    pub right_tail: Vec<Proportion>,
    pub left_tail: Vec<Proportion>,
    /// Nonincreasing projections of the raw estimates.
    pub right_isotonic: Vec<f64>,
    pub left_isotonic: Vec<f64>,
    /// Grid indices where the projection moved a fitted estimate by more than
    /// its interval half-width.
    pub isotonic_flags: Vec<usize>,
    pub m_ref: RecenteringConstant,
    pub replicas: usize,
    pub right_rate: Option<RateFit>,
    pub left_rate: Option<RateFit>,
    pub method: Method,
    pub label: String,
    pub master_seed: u64,
}

/// Probability window used for rate fits.
pub fn fit_window(m: usize) -> (f64, f64) {
    (10.0 / m as f64, 0.2)
}

/// Bootstrap resamples for rate intervals.
pub const BOOTSTRAP_DRAWS: usize = 200;

/// Tail estimates of `max - m_ref` over `lambda_grid`.
pub fn tail_estimate(design: &FieldDesign, m: usize, lambda_grid: &[f64], master_seed: u64, force: bool) -> Result<TailEstimate> {
    if m < 100 {
        return domain("tail estimation needs at least 100 replicas");
    }
    let maxima = design.maxima(m, master_seed)?;
    tail_from_maxima(design, &maxima, lambda_grid, master_seed, force)
}

/// Same as [`tail_estimate`] on already drawn maxima.
pub fn tail_from_maxima(
    design: &FieldDesign,
    maxima: &[f64],
    lambda_grid: &[f64],
    master_seed: u64,
    force: bool,
) -> Result<TailEstimate> {
    let m = maxima.len();
    if lambda_grid.is_empty() || lambda_grid.windows(2).any(|w| !(w[1] > w[0])) {
        return domain("lambda grid must be nonempty and strictly increasing");
    }
    let shifted: Vec<f64> = maxima.iter().map(|x| x - design.recentering.value).collect();
    let (right, left) = tail_counts(&shifted, lambda_grid);
    let unresolved = right.iter().zip(&left).filter(|(r, l)| **r == 0 && **l == 0).count();
    if unresolved > 1 && !force {
        let first = right.iter().zip(&left).position(|(r, l)| *r == 0 && *l == 0).unwrap_or(0);
        return Err(Error::UnresolvableGrid { lambda: lambda_grid[first], replicas: m });
    }
    let right_tail: Vec<Proportion> = right.iter().map(|&c| Proportion::wilson(c, m)).collect();
    let left_tail: Vec<Proportion> = left.iter().map(|&c| Proportion::wilson(c, m)).collect();
    let right_isotonic = isotonic_nonincreasing(&right_tail.iter().map(|p| p.estimate).collect::<Vec<_>>());
    let left_isotonic = isotonic_nonincreasing(&left_tail.iter().map(|p| p.estimate).collect::<Vec<_>>());
    let (lo, hi) = fit_window(m);
    let mut isotonic_flags = Vec::new();
    for (k, (p, iso)) in right_tail.iter().zip(&right_isotonic).enumerate() {
        if *iso >= lo && *iso <= hi && (iso - p.estimate).abs() > p.half_width() {
            isotonic_flags.push(k);
        }
    }
    let boot = SeedSpec::new(master_seed, 0, format!("{}/bootstrap", design.label));
    let right_rate = fit_rate(&shifted, lambda_grid, &boot.child("right"), |x, l| x >= l);
    let left_rate = fit_rate(&shifted, lambda_grid, &boot.child("left"), |x, l| x <= -l);
    Ok(TailEstimate {
        lambda_grid: lambda_grid.to_vec(),
        right_tail,
        left_tail,
        right_isotonic,
        left_isotonic,
        isotonic_flags,
        m_ref: design.recentering,
        replicas: m,
        right_rate,
        left_rate,
        method: design.method,
        label: design.label.clone(),
        master_seed,
    })
}

fn tail_counts(shifted: &[f64], grid: &[f64]) -> (Vec<usize>, Vec<usize>) {
    let right = grid.iter().map(|&l| shifted.iter().filter(|&&x| x >= l).count()).collect();
    let left = grid.iter().map(|&l| shifted.iter().filter(|&&x| x <= -l).count()).collect();
    (right, left)
}

/// Pool-adjacent-violators projection onto nonincreasing sequences.
pub fn isotonic_nonincreasing(values: &[f64]) -> Vec<f64> {
    let mut blocks: Vec<(f64, usize)> = Vec::with_capacity(values.len());
    for &v in values {
        blocks.push((v, 1));
        while blocks.len() > 1 {
            let (b, nb) = blocks[blocks.len() - 1];
            let (a, na) = blocks[blocks.len() - 2];
            if a >= b {
                break;
            }
            blocks.pop();
            let last = blocks.last_mut().unwrap();
            *last = ((a * na as f64 + b * nb as f64) / (na + nb) as f64, na + nb);
        }
    }
    blocks.into_iter().flat_map(|(v, n)| std::iter::repeat_n(v, n)).collect()
}

fn slope_fit(shifted: &[f64], grid: &[f64], hit: &impl Fn(f64, f64) -> bool) -> Option<(f64, Vec<f64>)> {
    let m = shifted.len();
    let (lo, hi) = fit_window(m);
    let raw: Vec<f64> = grid.iter().map(|&l| shifted.iter().filter(|&&x| hit(x, l)).count() as f64 / m as f64).collect();
    let iso = isotonic_nonincreasing(&raw);
    let pts: Vec<(f64, f64)> = grid.iter().zip(&iso).filter(|(_, &p)| p >= lo && p <= hi).map(|(&l, &p)| (l, p.ln())).collect();
    if pts.len() < 2 {
        return None;
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    if sxx == 0.0 {
        return None;
    }
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    Some((-sxy / sxx, pts.iter().map(|p| p.0).collect()))
}

fn fit_rate(shifted: &[f64], grid: &[f64], seed: &SeedSpec, hit: impl Fn(f64, f64) -> bool + Sync) -> Option<RateFit> {
    let (rate, lambdas_used) = slope_fit(shifted, grid, &hit)?;
    let mut rates: Vec<f64> = (0..BOOTSTRAP_DRAWS as u64)
        .into_par_iter()
        .filter_map(|b| {
            let mut rng = seed.replica(b).rng();
            let resample: Vec<f64> = (0..shifted.len()).map(|_| *shifted.choose(&mut rng).unwrap()).collect();
            slope_fit(&resample, grid, &hit).map(|r| r.0)
        })
        .collect();
    rates.sort_by(f64::total_cmp);
    if rates.len() < BOOTSTRAP_DRAWS / 2 {
        return Some(RateFit { rate, lower: f64::NAN, upper: f64::NAN, lambdas_used, bootstrap_draws: rates.len() });
    }
    let q = |p: f64| rates[((p * (rates.len() - 1) as f64).round() as usize).min(rates.len() - 1)];
    Some(RateFit { rate, lower: q(0.025), upper: q(0.975), lambdas_used, bootstrap_draws: rates.len() })
}

/// `P(max ≥ m_ref)` with the calibrated floor it is required to clear.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LowerBound {
    pub estimate: Proportion,
    pub floor: f64,
    pub eps: f64,
}

impl LowerBound {
    pub fn holds(&self) -> bool {
        self.estimate.lower > self.floor && self.estimate.estimate <= 1.0
    }
}

/// Calibrated floor for `P(max ≥ m_eps)`.
pub const LOWER_BOUND_FLOOR: f64 = 0.01;

/// Shares replicas with [`tail_estimate`]: with the same design and seed it
/// equals the right tail at `λ = 0`.
pub fn lower_bound_check(design: &FieldDesign, m: usize, master_seed: u64) -> Result<LowerBound> {
    let maxima = design.maxima(m, master_seed)?;
    Ok(lower_bound_from_maxima(design, &maxima))
}

pub fn lower_bound_from_maxima(design: &FieldDesign, maxima: &[f64]) -> LowerBound {
    let count = maxima.iter().filter(|&&x| x - design.recentering.value >= 0.0).count();
    LowerBound { estimate: Proportion::wilson(count, maxima.len()), floor: LOWER_BOUND_FLOOR, eps: design.eps() }
}

/// Mean maximum at one scale.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScaleGap {
    pub eps: f64,
    pub mean_max: f64,
    pub se: f64,
    pub m_ref: f64,
    pub gap: f64,
}

impl ScaleGap {
    pub fn from_maxima(eps: f64, m_ref: f64, maxima: &[f64]) -> Self {
        let n = maxima.len() as f64;
        let mean = maxima.iter().sum::<f64>() / n;
        let var = maxima.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
        Self { eps, mean_max: mean, se: (var / n).sqrt(), m_ref, gap: mean - m_ref }
    }
}

/// Expectation gaps over a sweep of scales, coarsest first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaxSummary {
    pub scale_sweep: Vec<ScaleGap>,
    pub slack: f64,
}

/// Calibrated slack for the flatness of the gap.
pub const GAP_SLACK: f64 = 1.0;

impl MaxSummary {
    pub fn new(mut scale_sweep: Vec<ScaleGap>) -> Self {
        scale_sweep.sort_by(|a, b| b.eps.total_cmp(&a.eps));
        Self { scale_sweep, slack: GAP_SLACK }
    }

    /// Largest `|gap_k - gap_0| - 3 sqrt(se_k² + se_0²)` against the coarsest scale.
    pub fn worst_drift(&self) -> f64 {
        let Some(first) = self.scale_sweep.first() else { return 0.0 };
        self.scale_sweep
            .iter()
            .map(|g| (g.gap - first.gap).abs() - 3.0 * (g.se * g.se + first.se * first.se).sqrt())
            .fold(f64::NEG_INFINITY, f64::max)
    }

    /// Every gap stays within `slack + 3·SE` of the coarsest one.
    pub fn is_flat(&self) -> bool {
        self.worst_drift() <= self.slack
    }
}

pub fn expectation_gap(designs: &[FieldDesign], m: usize, master_seed: u64) -> Result<MaxSummary> {
    let gaps = designs
        .iter()
        .map(|d| d.maxima(m, master_seed).map(|mx| ScaleGap::from_maxima(d.eps(), d.recentering.value, &mx)))
        .collect::<Result<Vec<_>>>()?;
    Ok(MaxSummary::new(gaps))
}

/// Monte Carlo estimate of `P(W_t ≤ 1 for t ≤ T, W_T ≥ 0)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BarrierEstimate {
    pub horizon: f64,
    pub steps_per_unit: usize,
    pub replicas: usize,
    pub estimate: f64,
    pub se: f64,
    /// `T^{3/2} · estimate`.
    pub scaled: f64,
}

/// Closed form by reflection: `Φ(1/√T) - 1/2 - (Φ(2/√T) - Φ(1/√T))`.
pub fn barrier_exact(horizon: f64) -> f64 {
    let s = horizon.sqrt();
    let phi = crate::special::normal_cdf;
    phi(1.0 / s) - 0.5 - (phi(2.0 / s) - phi(1.0 / s))
}

/// Random-walk skeleton with the Brownian-bridge crossing correction: each
/// step contributes the probability `1 - exp(-2 (1-a)(1-b)/Δ)` that the bridge
/// between the endpoints stays below 1.
pub fn barrier_probability(horizon: f64, steps_per_unit: usize, m: usize, master_seed: u64) -> Result<BarrierEstimate> {
    if !(horizon > 0.0) || steps_per_unit < 1 || m < 2 {
        return domain("barrier estimate needs T > 0, at least one step per unit and two replicas");
    }
    let steps = (horizon * steps_per_unit as f64).round() as usize;
    let dt = horizon / steps as f64;
    let sd = dt.sqrt();
    let seed = SeedSpec::new(master_seed, 0, format!("barrier/T{horizon}/s{steps_per_unit}"));
    let weights: Vec<f64> = (0..m as u64)
        .into_par_iter()
        .map(|r| {
            let mut rng = seed.replica(r).rng();
            let mut w = 0.0f64;
            let mut weight = 1.0f64;
            for _ in 0..steps {
                let z: f64 = rng.sample(StandardNormal);
                let next = w + sd * z;
                if next > 1.0 {
                    return 0.0;
                }
                weight *= -(-2.0 * (1.0 - w) * (1.0 - next) / dt).exp_m1();
                w = next;
            }
            if w >= 0.0 {
                weight
            } else {
                0.0
            }
        })
        .collect();
    let n = m as f64;
    let mean = weights.iter().sum::<f64>() / n;
    let var = weights.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Ok(BarrierEstimate {
        horizon,
        steps_per_unit,
        replicas: m,
        estimate: mean,
        se: (var / n).sqrt(),
        scaled: horizon.powf(1.5) * mean,
    })
}

/// `m_eps` for the MGFF bulk, `sqrt(2/pi) m_eps`.
pub fn mgff_recentering(eps: f64) -> Result<f64> {
    Ok((2.0 / PI).sqrt() * m_eps(2, eps)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tie_break_lowest_index() {
        assert_eq!(max_of(&[1.0, 3.0, 3.0]).unwrap(), (3.0, 1));
        assert_eq!(max_of(&[0.0, 0.0]).unwrap(), (0.0, 0));
        assert_eq!(max_of(&[-2.5]).unwrap(), (-2.5, 0));
        assert!(max_of(&[]).is_err());
    }

    #[test]
    fn pava_examples() {
        assert_eq!(isotonic_nonincreasing(&[0.5, 0.6, 0.2]), vec![0.55, 0.55, 0.2]);
        assert_eq!(isotonic_nonincreasing(&[0.3, 0.2, 0.1]), vec![0.3, 0.2, 0.1]);
        let v = isotonic_nonincreasing(&[0.1, 0.2, 0.3]);
        assert!(v.iter().all(|&x| (x - 0.2).abs() < 1e-15));
    }

    #[test]
    fn wilson_contains_estimate() {
        for (k, n) in [(0, 10), (5, 10), (10, 10), (3, 1000)] {
            let p = Proportion::wilson(k, n);
            assert!(p.lower <= p.estimate && p.estimate <= p.upper);
        }
        // Textbook value: 0/10 has upper end z²/(n+z²).
        let p = Proportion::wilson(0, 10);
        assert!((p.upper - Z95 * Z95 / (10.0 + Z95 * Z95)).abs() < 1e-12);
    }

    #[test]
    fn barrier_formula_limits() {
        let p = barrier_exact(1.0);
        assert!(p > 0.0 && p < 1.0);
        // T^{3/2} p → 1/sqrt(2 pi).
        let big: f64 = 1e6;
        assert!((big.powf(1.5) * barrier_exact(big) - 1.0 / (2.0 * PI).sqrt()).abs() < 1e-3);
    }

    #[test]
    fn barrier_estimator_is_unbiased_for_short_horizon() {
        let est = barrier_probability(1.0, 8, 20_000, 11).unwrap();
        assert!((est.estimate - barrier_exact(1.0)).abs() < 4.0 * est.se);
    }

    #[test]
    fn unresolvable_grid_refused() {
        let pts = PointSet::new(1, vec![0.0]).unwrap();
        let kernel = KernelSpec::Mbrw { d: 1, eps: 0.25 };
        let design = FieldDesign::custom(kernel, pts, RecenteringConstant { d: 1, eps: 0.25, factor: 1.0, value: 0.0 }, "t");
        let maxima = vec![0.1; 100];
        let grid = [0.0, 1.0, 2.0, 3.0];
        assert!(matches!(tail_from_maxima(&design, &maxima, &grid, 1, false), Err(Error::UnresolvableGrid { .. })));
        assert!(tail_from_maxima(&design, &maxima, &grid, 1, true).is_ok());
    }
}
