//! Numerical certificates for the two Slepian comparisons between a field `Y`
//! of the log-correlated class and the MBRW.
//!
//! Right tail: `Y_{δε}^{δx}` against `a(x) ξ_ε^{[x]} + ψ_ε^x` on the grid
//! `V_{ε/s}`, `s` points per box side. Left tail: `Y_{δε}^u` against
//! `b(u) ξ_ε^{ρu}` on the lattice `V_{ε/ρ}`. Every link of the chains of
//! inequalities behind the two comparisons is evaluated at every tested point
//! or pair and kept in a ledger, so a certificate can be re-checked by
//! [`reevaluate`], which recomputes every entry through separate quadrature
//! routes.

use std::collections::{BTreeMap, HashMap};
use std::f64::consts::{FRAC_PI_2, PI};

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};
use crate::green::{bulk_mollified_cov, gamma_of_distance, moment_bound_check_with, PairEvaluator};
use crate::kernels::{bsheet_cov, mbrw_cov, overlap_integral, sandwich_constant, sharp_sandwich_constant, KernelSpec};
use crate::lattice::{dist2, dist_inf, dyadic_exponent, floor_to_grid, Lattice, PointSet, MAX_DIM};
use crate::quad::{adaptive_simpson, gauss_legendre};
use crate::rng::SeedSpec;

/// Pairs drawn per scale when a grid is too large for exhaustive pairs.
pub const DEFAULT_PAIR_BUDGET: usize = 100_000;
/// Grids with at most this many points are always tested on all pairs.
pub const EXHAUSTIVE_POINTS: usize = 64;
/// Default number of test points per box side on the right tail.
pub const DEFAULT_SUBDIVISION: usize = 2;
/// Relative rounding allowance in every ledger margin.
pub const ROUNDING: f64 = 1e-12;
/// Relative allowance when re-evaluating a ledger through the reference routes.
pub const REEVAL_TOL: f64 = 1e-8;

/// Where the class constant came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Assumed,
    MeasuredFromMgff,
}

/// The constant `C_Y` of the two defining bounds of the field class.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FieldClassParams {
    pub c_y: f64,
    pub d: usize,
    pub provenance: Provenance,
}

impl FieldClassParams {
    pub fn new(c_y: f64, d: usize, provenance: Provenance) -> Result<Self> {
        if !(c_y >= 0.0 && c_y.is_finite()) {
            return domain(format!("C_Y = {c_y} must be finite and nonnegative"));
        }
        if d == 0 || d > MAX_DIM {
            return domain(format!("dimension {d} outside 1..={MAX_DIM}"));
        }
        Ok(Self { c_y, d, provenance })
    }

    /// The synthetic MBRW-type field with its analytic constant.
    pub fn synthetic(d: usize) -> Result<Self> {
        Self::new(synthetic_c_y(d), d, Provenance::Assumed)
    }
}

/// Class constant of [`YField::SyntheticMbrw`]: `max(C_d, 2 sqrt(d))`.
///
/// For `‖x-y‖_∞ ≥ eps` the covariance sits in `[-log‖x-y‖_∞ - C_d, -log‖x-y‖_∞]`
/// and `‖x-y‖_∞ ≤ ‖x-y‖ ≤ sqrt(d) ‖x-y‖_∞`; below that the variance loss is at
/// most `‖x-y‖_1 / eps ≤ d`. Increments obey
/// `E[(Y^x - Y^y)²] ≤ 2 ‖x-y‖_1 / eps ≤ 2 sqrt(d) ‖x-y‖ / eps`.
pub fn synthetic_c_y(d: usize) -> f64 {
    sandwich_constant(d).max(2.0 * (d as f64).sqrt())
}

/// `log(2 sqrt(d))`: `max(eps, ‖x-y‖) ≤ 2 sqrt(d) ‖[x]-[y]‖_∞` for points in
/// different boxes.
pub fn geometric_constant(d: usize) -> f64 {
    (2.0 * (d as f64).sqrt()).ln()
}

/// The field `Y`, a family indexed by its scale `eps`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum YField {
    /// `Cov(Y_eps^x, Y_eps^y) = ∫_0^{log 1/eps} Π_i (1 - e^r |x_i - y_i|)_+ dr` at
    /// arbitrary points of `[0,1]^d`.
    SyntheticMbrw { d: usize },
    /// `Y_eps^x = sqrt(pi/2) X_{eps/2}^{1/4 + x/2}`: the mollified GFF on the bulk
    /// square, rescaled to `[0,1]²` and to unit log-coefficient.
    MgffBulk,
}

impl YField {
    pub fn dim(&self) -> usize {
        match *self {
            YField::SyntheticMbrw { d } => d,
            YField::MgffBulk => 2,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            YField::SyntheticMbrw { .. } => "synthetic_mbrw",
            YField::MgffBulk => "mgff_bulk",
        }
    }

    fn check(&self, eps: f64, x: &[f64], y: &[f64]) -> Result<()> {
        if !(eps > 0.0 && eps <= 1.0) {
            return domain(format!("scale {eps} outside (0,1]"));
        }
        let d = self.dim();
        if x.len() != d || y.len() != d {
            return Err(Error::Mismatch(format!("expected {d}-dimensional points")));
        }
        if x.iter().chain(y).any(|c| !(0.0..=1.0).contains(c)) {
            return domain("points of Y must lie in [0,1]^d");
        }
        Ok(())
    }

    pub fn cov(&self, eps: f64, x: &[f64], y: &[f64]) -> Result<f64> {
        self.check(eps, x, y)?;
        match self {
            YField::SyntheticMbrw { .. } => {
                let a: Vec<f64> = x.iter().zip(y).map(|(p, q)| (p - q).abs()).collect();
                Ok(overlap_integral(&a, (1.0 / eps).ln()))
            }
            YField::MgffBulk => {
                if eps > 0.5 {
                    return domain(format!("MGFF scale {eps} exceeds 1/2"));
                }
                Ok(FRAC_PI_2 * bulk_mollified_cov(eps / 2.0, &bulk_map(x), &bulk_map(y))?)
            }
        }
    }

    pub fn var(&self, eps: f64, x: &[f64]) -> Result<f64> {
        self.cov(eps, x, x)
    }
}

/// `x ↦ 1/4 + x/2`, from `[0,1]²` onto the bulk square.
pub fn bulk_map(x: &[f64]) -> [f64; 2] {
    [0.25 + 0.5 * x[0], 0.25 + 0.5 * x[1]]
}

/// A square-root variance ratio, or the negative radicand that prevents it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum RatioValue {
    Value { value: f64 },
    Infeasible { radicand: f64 },
}

impl RatioValue {
    pub fn value(&self) -> Option<f64> {
        match *self {
            RatioValue::Value { value } => Some(value),
            RatioValue::Infeasible { .. } => None,
        }
    }
}

fn check_params(params: &FieldClassParams, field: &YField) -> Result<()> {
    if field.dim() != params.d {
        return Err(Error::Mismatch(format!(
            "field of dimension {} with class parameters for d = {}",
            field.dim(),
            params.d
        )));
    }
    Ok(())
}

fn check_scale(delta: f64) -> Result<()> {
    if !(delta > 0.0 && delta <= 1.0) {
        return domain(format!("delta = {delta} outside (0,1]"));
    }
    Ok(())
}

fn scaled(x: &[f64], s: f64) -> Vec<f64> {
    x.iter().map(|c| c * s).collect()
}

/// `a(x) = sqrt((Var Y_{δε}^{δx} - Var ψ_ε^x) / Var ξ_ε^{[x]})`.
pub fn a_of_x(params: &FieldClassParams, field: &YField, x: &[f64], eps: f64, delta: f64, p: f64) -> Result<RatioValue> {
    check_params(params, field)?;
    check_scale(delta)?;
    let d = params.d;
    let sheet = KernelSpec::BrownianSheet { d, eps, p };
    let var_psi = bsheet_cov(&sheet, x, x)?;
    let corner = floor_to_grid(x, eps)?;
    let var_xi = mbrw_variance(d, eps, &corner)?;
    let var_y = field.var(delta * eps, &scaled(x, delta))?;
    let radicand = var_y - var_psi;
    if radicand < 0.0 {
        return Ok(RatioValue::Infeasible { radicand });
    }
    Ok(RatioValue::Value { value: (radicand / var_xi).sqrt() })
}

fn mbrw_variance(d: usize, eps: f64, v: &[f64]) -> Result<f64> {
    let spec = KernelSpec::Mbrw { d, eps };
    let t = (1.0 / eps).ln();
    mbrw_cov(&spec, v, v, t, t)
}

/// `b(u)` together with the range check `1 ≤ b(u) ≤ 2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BValue {
    pub value: f64,
    pub in_range: bool,
}

/// `b(u) = sqrt(Var Y_{δε}^u / Var ξ_ε)`. The MBRW variance is the same at
/// every site.
pub fn b_of_u(params: &FieldClassParams, field: &YField, u: &[f64], eps: f64, delta: f64) -> Result<BValue> {
    check_params(params, field)?;
    check_scale(delta)?;
    let var_xi = mbrw_variance(params.d, eps, &vec![0.0; params.d])?;
    let value = (field.var(delta * eps, u)? / var_xi).sqrt();
    Ok(BValue { value, in_range: (1.0..=2.0).contains(&value) })
}

/// Which tail a certificate addresses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    Right,
    Left,
}

impl Side {
    pub fn as_str(self) -> &'static str {
        match self {
            Side::Right => "right",
            Side::Left => "left",
        }
    }
}

/// One inequality `lhs ≤ rhs` of the comparison chains.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Link {
    Radicand,
    AAtMostOne,
    YIncrement,
    ConstantBelowSheet,
    SheetIncrement,
    SlepianIncrement,
    MbrwUpper,
    LatticeToContinuum,
    DeltaRoom,
    YCovLower,
    SlepianCovRight,
    BAtLeastOne,
    BAtMostTwo,
    YCovUpper,
    RhoRoom,
    MbrwLower,
    SlepianCovLeft,
}

impl Link {
    /// Whether a certificate needs this link. `b ≤ 2` is only used afterwards.
    pub fn required(self) -> bool {
        self != Link::BAtMostTwo
    }

    pub fn statement(self) -> &'static str {
        match self {
            Link::Radicand => "Var ψ^x ≤ Var Y^{δx}",
            Link::AAtMostOne => "Var Y^{δx} - Var ψ^x ≤ Var ξ^{[x]}",
            Link::YIncrement => "E(Y^{δx} - Y^{δy})² ≤ C_Y (δε)^-1 ‖δx - δy‖",
            Link::ConstantBelowSheet => "C_Y ε^-1 ‖x - y‖ ≤ p^d ε^-1 ‖x - y‖_1",
            Link::SheetIncrement => "p^d ε^-1 ‖x - y‖_1 ≤ E(ψ^x - ψ^y)²",
            Link::SlepianIncrement => "E(Y^{δx} - Y^{δy})² ≤ E(Z^x - Z^y)²",
            Link::MbrwUpper => "a(x) a(y) Cov(ξ^{[x]}, ξ^{[y]}) ≤ -log‖[x] - [y]‖_∞",
            Link::LatticeToContinuum => "-log‖[x] - [y]‖_∞ ≤ -log max(ε, ‖x - y‖) + log(2 sqrt d)",
            Link::DeltaRoom => "-log max(ε, ‖x - y‖) + log(2 sqrt d) ≤ -log max(δε, δ‖x - y‖) - C_Y",
            Link::YCovLower => "-log max(δε, δ‖x - y‖) - C_Y ≤ Cov(Y^{δx}, Y^{δy})",
            Link::SlepianCovRight => "Cov(Z^x, Z^y) ≤ Cov(Y^{δx}, Y^{δy})",
            Link::BAtLeastOne => "Var ξ ≤ Var Y^u",
            Link::BAtMostTwo => "Var Y^u ≤ 4 Var ξ",
            Link::YCovUpper => "Cov(Y^u, Y^v) ≤ -log‖u - v‖ + C_Y",
            Link::RhoRoom => "-log‖u - v‖ + C_Y ≤ -log‖ρu - ρv‖_∞ - C",
            Link::MbrwLower => "-log‖ρu - ρv‖_∞ - C ≤ Cov(ξ^{ρu}, ξ^{ρv})",
            Link::SlepianCovLeft => "Cov(Y^u, Y^v) ≤ b(u) b(v) Cov(ξ^{ρu}, ξ^{ρv})",
        }
    }
}

/// One evaluated inequality. `i == j` marks a single-point link.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LedgerEntry {
    /// Index into [`ComparisonCertificate::grids`].
    pub grid: usize,
    pub link: Link,
    pub i: usize,
    pub j: usize,
    pub lhs: f64,
    pub rhs: f64,
}

impl LedgerEntry {
    /// `rhs - lhs` plus the rounding allowance `ROUNDING · max(1, |lhs|, |rhs|)`.
    pub fn margin(&self) -> f64 {
        margin_with(self.lhs, self.rhs, ROUNDING)
    }
}

fn margin_with(lhs: f64, rhs: f64, tol: f64) -> f64 {
    let m = rhs - lhs + tol * lhs.abs().max(rhs.abs()).max(1.0);
    if m.is_nan() {
        f64::NEG_INFINITY
    } else {
        m
    }
}

/// The points tested at one scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestedGrid {
    pub eps: f64,
    /// Spacing of the tested points: `eps / s` (right) or `eps / rho` (left).
    pub spacing: f64,
    pub points: PointSet,
    pub pairs: usize,
    pub same_box_pairs: usize,
    pub exhaustive: bool,
}

/// The entry with the smallest margin, with coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorstOffender {
    pub eps: f64,
    pub link: Link,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub lhs: f64,
    pub rhs: f64,
    pub margin: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonCertificate {
    pub side: Side,
    pub field: YField,
    pub params: FieldClassParams,
    pub delta: f64,
    /// `p` on the right tail, `rho` on the left.
    pub p_or_rho: f64,
    /// The MBRW constant `C` used in the left chain.
    pub mbrw_constant: f64,
    /// `log(2 sqrt d)`, used in the right chain.
    pub geometric_constant: f64,
    pub eps_tested: Vec<f64>,
    pub grids: Vec<TestedGrid>,
    /// Smallest margin over required links (0 when there are none).
    pub min_margin: f64,
    pub valid: bool,
    /// No pair was tested.
    pub degenerate: bool,
    pub candidates_tried: usize,
    /// Range of `a(x)` (right) or `b(u)` (left) over the tested points.
    pub ratio_range: (f64, f64),
    /// Whether the informational links (`b ≤ 2`) held.
    pub informational_holds: bool,
    pub worst: Option<WorstOffender>,
    pub ledger: Vec<LedgerEntry>,
}

/// Count and smallest margin of one link.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinkSummary {
    pub count: usize,
    pub min_margin: f64,
    pub required: bool,
}

impl ComparisonCertificate {
    pub fn link_summary(&self) -> BTreeMap<Link, LinkSummary> {
        let mut out: BTreeMap<Link, LinkSummary> = BTreeMap::new();
        for e in &self.ledger {
            let s = out.entry(e.link).or_insert(LinkSummary {
                count: 0,
                min_margin: f64::INFINITY,
                required: e.link.required(),
            });
            s.count += 1;
            s.min_margin = s.min_margin.min(e.margin());
        }
        out
    }

    /// Coordinates of the two points of an entry, as tested.
    pub fn entry_points(&self, e: &LedgerEntry) -> (Vec<f64>, Vec<f64>) {
        let pts = &self.grids[e.grid].points;
        (pts.get(e.i).to_vec(), pts.get(e.j).to_vec())
    }
}

/// Search grid and sampling controls for a certification.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CertifyOptions {
    pub eps_list: Vec<f64>,
    /// Tried in order; largest first.
    pub deltas: Vec<f64>,
    /// `p` values (right tail, smallest first) or `rho` values (left tail, largest first).
    pub second: Vec<f64>,
    /// Sampled pairs per scale on large grids; 0 tests single points only.
    pub pair_budget: usize,
    pub seed: u64,
    /// Test points per box side on the right tail; a power of two.
    pub subdivision: usize,
    /// The constant `C` in the MBRW lower bound used by the left chain.
    pub mbrw_constant: f64,
}

/// `1, 1/2, …, 2^-8`.
pub fn default_deltas() -> Vec<f64> {
    (0..=8).map(|k| (-(k as f64)).exp2()).collect()
}

impl CertifyOptions {
    /// `delta ∈ {1, …, 2^-8}`, `p ∈ {1, …, 8}`.
    pub fn right(d: usize, eps_list: Vec<f64>, seed: u64) -> Self {
        Self {
            eps_list,
            deltas: default_deltas(),
            second: (1..=8).map(|p| p as f64).collect(),
            pair_budget: DEFAULT_PAIR_BUDGET,
            seed,
            subdivision: DEFAULT_SUBDIVISION,
            mbrw_constant: sharp_sandwich_constant(d),
        }
    }

    /// `delta ∈ {1, …, 2^-8}`, `rho` dyadic from 1 down to the largest tested `eps`.
    pub fn left(d: usize, eps_list: Vec<f64>, seed: u64) -> Self {
        let floor = eps_list.iter().copied().fold(0.0, f64::max);
        let second = (0..=30).map(|k| (-(k as f64)).exp2()).filter(|&r| r >= floor).collect();
        Self { second, ..Self::right(d, eps_list, seed) }
    }

    /// Replaces the `p` grid by `1, 1 + step, …` up to 8.
    pub fn with_p_step(mut self, step: f64) -> Self {
        let n = ((7.0 / step) + 1e-9).floor() as usize;
        self.second = (0..=n).map(|k| 1.0 + k as f64 * step).collect();
        self
    }
}

fn validate_options(side: Side, params: &FieldClassParams, field: &YField, opts: &CertifyOptions) -> Result<()> {
    check_params(params, field)?;
    if opts.eps_list.is_empty() {
        return domain("no scale to test");
    }
    for &eps in &opts.eps_list {
        if !(eps < 1.0) {
            return domain(format!("eps = {eps} must be below 1"));
        }
        dyadic_exponent(eps)?;
    }
    if opts.deltas.is_empty() || opts.second.is_empty() {
        return domain("empty search grid");
    }
    for &delta in &opts.deltas {
        check_scale(delta)?;
    }
    match side {
        Side::Right => {
            if opts.second.iter().any(|&p| !(p >= 1.0 && p.is_finite())) {
                return domain("p must be at least 1");
            }
            if !opts.subdivision.is_power_of_two() {
                return domain(format!("subdivision {} must be a power of two", opts.subdivision));
            }
        }
        Side::Left => {
            for &rho in &opts.second {
                check_scale(rho)?;
                for &eps in &opts.eps_list {
                    if rho < eps {
                        return domain(format!("rho = {rho} below eps = {eps}"));
                    }
                    dyadic_exponent(eps / rho)?;
                }
            }
        }
    }
    if !(opts.mbrw_constant >= 0.0) {
        return domain("MBRW constant must be nonnegative");
    }
    Ok(())
}

// All pairs when cheap; otherwise every pair inside a group plus a seeded
// uniform sample of `budget` pairs, sorted and deduplicated. A zero budget
// tests points only.
fn select_pairs(n: usize, groups: Option<&[usize]>, budget: usize, seed: &SeedSpec) -> (Vec<(usize, usize)>, bool) {
    if budget == 0 {
        return (Vec::new(), false);
    }
    let total = n * n.saturating_sub(1) / 2;
    if n <= EXHAUSTIVE_POINTS || total <= budget {
        let mut out = Vec::with_capacity(total);
        for i in 0..n {
            for j in i + 1..n {
                out.push((i, j));
            }
        }
        return (out, true);
    }
    let mut out = Vec::new();
    if let Some(g) = groups {
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by_key(|&i| (g[i], i));
        for chunk in order.chunk_by(|&a, &b| g[a] == g[b]) {
            for (k, &i) in chunk.iter().enumerate() {
                for &j in &chunk[k + 1..] {
                    out.push((i.min(j), i.max(j)));
                }
            }
        }
    }
    let mut rng = seed.rng();
    let mut drawn = 0;
    while drawn < budget {
        let i = rng.random_range(0..n);
        let j = rng.random_range(0..n);
        if i != j {
            out.push((i.min(j), i.max(j)));
            drawn += 1;
        }
    }
    out.sort_unstable();
    out.dedup();
    (out, false)
}

struct RightGrid {
    eps: f64,
    points: PointSet,
    corners: Vec<Vec<f64>>,
    pairs: Vec<(usize, usize)>,
    same_box: Vec<bool>,
    /// MBRW covariance of the corners, for pairs in different boxes.
    xi: Vec<f64>,
    exhaustive: bool,
}

fn right_grid(d: usize, eps: f64, s: usize, budget: usize, seed: u64) -> Result<RightGrid> {
    let n = dyadic_exponent(eps)?;
    let fine = Lattice::new(d, n + s.trailing_zeros())?;
    let coarse = Lattice::new(d, n)?;
    let points = fine.points();
    let corners: Vec<Vec<f64>> = points.iter().map(|x| floor_to_grid(x, eps)).collect::<Result<_>>()?;
    let ids: Vec<usize> = corners.iter().map(|c| coarse.index_of(c)).collect::<Result<_>>()?;
    let stream = SeedSpec::new(seed, 0, format!("comparison/right/eps={eps}"));
    let (pairs, exhaustive) = select_pairs(points.len(), Some(&ids), budget, &stream);
    let same_box: Vec<bool> = pairs.iter().map(|&(i, j)| ids[i] == ids[j]).collect();
    let spec = KernelSpec::Mbrw { d, eps };
    let t = (1.0 / eps).ln();
    let xi = pairs
        .par_iter()
        .zip(&same_box)
        .map(|(&(i, j), &same)| if same { Ok(t) } else { mbrw_cov(&spec, &corners[i], &corners[j], t, t) })
        .collect::<Result<_>>()?;
    Ok(RightGrid { eps, points, corners, pairs, same_box, xi, exhaustive })
}

struct YValues {
    var: Vec<f64>,
    cov: Vec<f64>,
}

fn y_values(field: &YField, scale: f64, zoom: f64, points: &PointSet, pairs: &[(usize, usize)]) -> Result<YValues> {
    let z: Vec<Vec<f64>> = points.iter().map(|x| scaled(x, zoom)).collect();
    let var = z.par_iter().map(|x| field.var(scale, x)).collect::<Result<_>>()?;
    let cov = pairs.par_iter().map(|&(i, j)| field.cov(scale, &z[i], &z[j])).collect::<Result<_>>()?;
    Ok(YValues { var, cov })
}

fn l1(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| (a - b).abs()).sum()
}

fn delta_room_entries(k: usize, g: &RightGrid, c_y: f64, c_geo: f64, delta: f64) -> Vec<LedgerEntry> {
    g.pairs
        .iter()
        .zip(&g.same_box)
        .filter(|(_, &same)| !same)
        .map(|(&(i, j), _)| {
            let m = g.eps.max(dist2(g.points.get(i), g.points.get(j)));
            LedgerEntry {
                grid: k,
                link: Link::DeltaRoom,
                i,
                j,
                lhs: -m.ln() + c_geo,
                rhs: -(delta * m).ln() - c_y,
            }
        })
        .collect()
}

fn right_entries(k: usize, g: &RightGrid, y: &YValues, d: usize, c_y: f64, c_geo: f64, delta: f64, p: f64) -> Result<(Vec<LedgerEntry>, Vec<f64>)> {
    let eps = g.eps;
    let l = (1.0 / eps).ln();
    let sheet = KernelSpec::BrownianSheet { d, eps, p };
    let n = g.points.len();
    let var_psi: Vec<f64> = (0..n).map(|i| bsheet_cov(&sheet, g.points.get(i), g.points.get(i))).collect::<Result<_>>()?;
    let a: Vec<f64> = (0..n).map(|i| ((y.var[i] - var_psi[i]).max(0.0) / l).sqrt()).collect();
    let mut out = Vec::with_capacity(2 * n + 5 * g.pairs.len());
    for i in 0..n {
        out.push(LedgerEntry { grid: k, link: Link::Radicand, i, j: i, lhs: var_psi[i], rhs: y.var[i] });
        out.push(LedgerEntry { grid: k, link: Link::AAtMostOne, i, j: i, lhs: y.var[i] - var_psi[i], rhs: l });
    }
    let pd = p.powi(d as i32);
    let per_pair: Vec<Vec<LedgerEntry>> = (0..g.pairs.len())
        .into_par_iter()
        .map(|q| {
            let (i, j) = g.pairs[q];
            let (x, z) = (g.points.get(i), g.points.get(j));
            let e = |link, lhs, rhs| LedgerEntry { grid: k, link, i, j, lhs, rhs };
            if g.same_box[q] {
                let inc_y = y.var[i] + y.var[j] - 2.0 * y.cov[q];
                let inc_psi = var_psi[i] + var_psi[j] - 2.0 * bsheet_cov(&sheet, x, z)?;
                let inc_z = (a[i] - a[j]).powi(2) * l + inc_psi;
                let cy_term = c_y / (delta * eps) * (delta * dist2(x, z));
                let sheet_term = pd / eps * l1(x, z);
                Ok(vec![
                    e(Link::YIncrement, inc_y, cy_term),
                    e(Link::ConstantBelowSheet, cy_term, sheet_term),
                    e(Link::SheetIncrement, sheet_term, inc_psi),
                    e(Link::SlepianIncrement, inc_y, inc_z),
                ])
            } else {
                let cov_z = a[i] * a[j] * g.xi[q];
                let box_dist = -dist_inf(&g.corners[i], &g.corners[j]).ln();
                let m = eps.max(dist2(x, z));
                let lower_y = -(delta * m).ln() - c_y;
                Ok(vec![
                    e(Link::MbrwUpper, cov_z, box_dist),
                    e(Link::LatticeToContinuum, box_dist, -m.ln() + c_geo),
                    e(Link::DeltaRoom, -m.ln() + c_geo, lower_y),
                    e(Link::YCovLower, lower_y, y.cov[q]),
                    e(Link::SlepianCovRight, cov_z, y.cov[q]),
                ])
            }
        })
        .collect::<Result<_>>()?;
    out.extend(per_pair.into_iter().flatten());
    Ok((out, a))
}

#[allow(clippy::too_many_arguments)]
fn assemble(
    side: Side,
    field: &YField,
    params: &FieldClassParams,
    opts: &CertifyOptions,
    delta: f64,
    second: f64,
    grids: Vec<TestedGrid>,
    ledger: Vec<LedgerEntry>,
    ratios: &[f64],
    tried: usize,
) -> ComparisonCertificate {
    let mut min_margin = f64::INFINITY;
    let mut worst: Option<&LedgerEntry> = None;
    let mut informational_holds = true;
    for e in &ledger {
        let m = e.margin();
        if !e.link.required() {
            informational_holds &= m >= 0.0;
            continue;
        }
        if m < min_margin {
            min_margin = m;
            worst = Some(e);
        }
    }
    if worst.is_none() {
        min_margin = 0.0;
    }
    let worst = worst.map(|e| {
        let pts = &grids[e.grid].points;
        WorstOffender {
            eps: grids[e.grid].eps,
            link: e.link,
            x: pts.get(e.i).to_vec(),
            y: pts.get(e.j).to_vec(),
            lhs: e.lhs,
            rhs: e.rhs,
            margin: e.margin(),
        }
    });
    let degenerate = grids.iter().all(|g| g.pairs == 0);
    let lo = ratios.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = ratios.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    ComparisonCertificate {
        side,
        field: *field,
        params: *params,
        delta,
        p_or_rho: second,
        mbrw_constant: opts.mbrw_constant,
        geometric_constant: geometric_constant(params.d),
        eps_tested: opts.eps_list.clone(),
        grids,
        min_margin,
        valid: min_margin >= 0.0,
        degenerate,
        candidates_tried: tried,
        ratio_range: (lo, hi),
        informational_holds,
        worst,
        ledger,
    }
}

fn min_required_margin(entries: &[LedgerEntry]) -> f64 {
    entries.iter().filter(|e| e.link.required()).map(LedgerEntry::margin).fold(f64::INFINITY, f64::min)
}

/// Outcome of the search loop shared by both tails.
struct Search {
    tried: usize,
    fallback: Option<ComparisonCertificate>,
    best: Option<(f64, f64, f64)>,
}

impl Search {
    fn new() -> Self {
        Self { tried: 0, fallback: None, best: None }
    }

    fn note(&mut self, margin: f64, delta: f64, second: f64) {
        if self.best.is_none_or(|b| margin > b.0) {
            self.best = Some((margin, delta, second));
        }
    }

    // Returns the certificate when the search may stop.
    fn offer(&mut self, cert: ComparisonCertificate) -> Option<ComparisonCertificate> {
        self.note(cert.min_margin, cert.delta, cert.p_or_rho);
        if cert.valid && !cert.degenerate {
            return Some(cert);
        }
        if cert.valid && self.fallback.is_none() {
            self.fallback = Some(cert);
        }
        None
    }
}

/// Searches `(delta, p)` for the right-tail comparison: `delta` from largest,
/// then `p` from smallest; the first candidate whose required links all hold at
/// every tested scale is returned. Otherwise the candidate with the largest
/// minimum margin is returned, marked invalid, with its full ledger.
pub fn certify_right(params: &FieldClassParams, field: &YField, opts: &CertifyOptions) -> Result<ComparisonCertificate> {
    validate_options(Side::Right, params, field, opts)?;
    let d = params.d;
    let c_y = params.c_y;
    let c_geo = geometric_constant(d);
    let grids: Vec<RightGrid> = opts
        .eps_list
        .iter()
        .map(|&eps| right_grid(d, eps, opts.subdivision, opts.pair_budget, opts.seed))
        .collect::<Result<_>>()?;
    let tested = |grids: &[RightGrid]| -> Vec<TestedGrid> {
        grids
            .iter()
            .map(|g| TestedGrid {
                eps: g.eps,
                spacing: g.eps / opts.subdivision as f64,
                points: g.points.clone(),
                pairs: g.pairs.len(),
                same_box_pairs: g.same_box.iter().filter(|&&s| s).count(),
                exhaustive: g.exhaustive,
            })
            .collect()
    };
    let evaluate = |delta: f64, p: f64, ys: &[YValues], tried: usize| -> Result<ComparisonCertificate> {
        let mut ledger = Vec::new();
        let mut ratios = Vec::new();
        for (k, (g, y)) in grids.iter().zip(ys).enumerate() {
            let (entries, a) = right_entries(k, g, y, d, c_y, c_geo, delta, p)?;
            ledger.extend(entries);
            ratios.extend(a);
        }
        Ok(assemble(Side::Right, field, params, opts, delta, p, tested(&grids), ledger, &ratios, tried))
    };
    let y_for = |delta: f64| -> Result<Vec<YValues>> {
        grids.iter().map(|g| y_values(field, delta * g.eps, delta, &g.points, &g.pairs)).collect()
    };
    let mut search = Search::new();
    for &delta in &opts.deltas {
        // The room left by delta depends on geometry only; skip hopeless deltas.
        let room: Vec<LedgerEntry> =
            grids.iter().enumerate().flat_map(|(k, g)| delta_room_entries(k, g, c_y, c_geo, delta)).collect();
        let room_margin = min_required_margin(&room);
        if room_margin < 0.0 {
            search.tried += opts.second.len();
            search.note(room_margin, delta, opts.second[0]);
            continue;
        }
        let ys = y_for(delta)?;
        for &p in &opts.second {
            search.tried += 1;
            if let Some(cert) = search.offer(evaluate(delta, p, &ys, search.tried)?) {
                return Ok(cert);
            }
        }
    }
    if let Some(mut cert) = search.fallback {
        cert.candidates_tried = search.tried;
        return Ok(cert);
    }
    let (_, delta, p) = search.best.expect("search grid is nonempty");
    evaluate(delta, p, &y_for(delta)?, search.tried)
}

struct LeftGrid {
    eps: f64,
    points: PointSet,
    pairs: Vec<(usize, usize)>,
    xi: Vec<f64>,
    exhaustive: bool,
}

fn left_grid(d: usize, eps: f64, rho: f64, budget: usize, seed: u64) -> Result<LeftGrid> {
    let lattice = Lattice::from_eps(d, eps / rho)?;
    let points = lattice.points();
    let stream = SeedSpec::new(seed, 0, format!("comparison/left/eps={eps}/rho={rho}"));
    let (pairs, exhaustive) = select_pairs(points.len(), None, budget, &stream);
    let spec = KernelSpec::Mbrw { d, eps };
    let t = (1.0 / eps).ln();
    let xi = pairs
        .par_iter()
        .map(|&(i, j)| mbrw_cov(&spec, &scaled(points.get(i), rho), &scaled(points.get(j), rho), t, t))
        .collect::<Result<_>>()?;
    Ok(LeftGrid { eps, points, pairs, xi, exhaustive })
}

fn rho_room_entries(k: usize, g: &LeftGrid, c_y: f64, c: f64, rho: f64) -> Vec<LedgerEntry> {
    g.pairs
        .iter()
        .map(|&(i, j)| {
            let (u, v) = (g.points.get(i), g.points.get(j));
            LedgerEntry {
                grid: k,
                link: Link::RhoRoom,
                i,
                j,
                lhs: -dist2(u, v).ln() + c_y,
                rhs: -(rho * dist_inf(u, v)).ln() - c,
            }
        })
        .collect()
}

fn left_entries(k: usize, g: &LeftGrid, y: &YValues, c_y: f64, c: f64, rho: f64) -> (Vec<LedgerEntry>, Vec<f64>) {
    let l = (1.0 / g.eps).ln();
    let n = g.points.len();
    let b: Vec<f64> = y.var.iter().map(|v| (v / l).sqrt()).collect();
    let mut out = Vec::with_capacity(2 * n + 4 * g.pairs.len());
    for i in 0..n {
        out.push(LedgerEntry { grid: k, link: Link::BAtLeastOne, i, j: i, lhs: l, rhs: y.var[i] });
        out.push(LedgerEntry { grid: k, link: Link::BAtMostTwo, i, j: i, lhs: y.var[i], rhs: 4.0 * l });
    }
    for (q, &(i, j)) in g.pairs.iter().enumerate() {
        let (u, v) = (g.points.get(i), g.points.get(j));
        let e = |link, lhs, rhs| LedgerEntry { grid: k, link, i, j, lhs, rhs };
        let upper_y = -dist2(u, v).ln() + c_y;
        let lower_xi = -(rho * dist_inf(u, v)).ln() - c;
        out.push(e(Link::YCovUpper, y.cov[q], upper_y));
        out.push(e(Link::RhoRoom, upper_y, lower_xi));
        out.push(e(Link::MbrwLower, lower_xi, g.xi[q]));
        out.push(e(Link::SlepianCovLeft, y.cov[q], b[i] * b[j] * g.xi[q]));
    }
    (out, b)
}

/// Searches `(delta, rho)` for the left-tail comparison: `delta` from largest,
/// then `rho` from largest. Same return rules as [`certify_right`].
pub fn certify_left(params: &FieldClassParams, field: &YField, opts: &CertifyOptions) -> Result<ComparisonCertificate> {
    validate_options(Side::Left, params, field, opts)?;
    let d = params.d;
    let c_y = params.c_y;
    let c = opts.mbrw_constant;
    let mut cache: HashMap<u64, Vec<LeftGrid>> = HashMap::new();
    for &rho in &opts.second {
        let grids = opts
            .eps_list
            .iter()
            .map(|&eps| left_grid(d, eps, rho, opts.pair_budget, opts.seed))
            .collect::<Result<_>>()?;
        cache.insert(rho.to_bits(), grids);
    }
    let evaluate = |delta: f64, rho: f64, tried: usize| -> Result<ComparisonCertificate> {
        let grids = &cache[&rho.to_bits()];
        let mut ledger = Vec::new();
        let mut ratios = Vec::new();
        for (k, g) in grids.iter().enumerate() {
            let y = y_values(field, delta * g.eps, 1.0, &g.points, &g.pairs)?;
            let (entries, b) = left_entries(k, g, &y, c_y, c, rho);
            ledger.extend(entries);
            ratios.extend(b);
        }
        let tested = grids
            .iter()
            .map(|g| TestedGrid {
                eps: g.eps,
                spacing: g.eps / rho,
                points: g.points.clone(),
                pairs: g.pairs.len(),
                same_box_pairs: 0,
                exhaustive: g.exhaustive,
            })
            .collect();
        Ok(assemble(Side::Left, field, params, opts, delta, rho, tested, ledger, &ratios, tried))
    };
    let mut search = Search::new();
    for &delta in &opts.deltas {
        for &rho in &opts.second {
            search.tried += 1;
            let grids = &cache[&rho.to_bits()];
            let room: Vec<LedgerEntry> =
                grids.iter().enumerate().flat_map(|(k, g)| rho_room_entries(k, g, c_y, c, rho)).collect();
            let room_margin = min_required_margin(&room);
            if room_margin < 0.0 {
                search.note(room_margin, delta, rho);
                continue;
            }
            if let Some(cert) = search.offer(evaluate(delta, rho, search.tried)?) {
                return Ok(cert);
            }
        }
    }
    if let Some(mut cert) = search.fallback {
        cert.candidates_tried = search.tried;
        return Ok(cert);
    }
    let (_, delta, rho) = search.best.expect("search grid is nonempty");
    evaluate(delta, rho, search.tried)
}

/// Measured class constant of [`YField::MgffBulk`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CyMeasurement {
    /// `max(max_deviation, max_ratio)` rounded up to three decimals.
    pub c_y: f64,
    /// `max |Cov(Y^x, Y^y) + log max(eps, ‖x-y‖)|`.
    pub max_deviation: f64,
    /// `max E[(Y^x - Y^y)²] eps / ‖x-y‖` over `‖x-y‖ ≤ eps`.
    pub max_ratio: f64,
    pub worst_deviation: ([f64; 2], [f64; 2], f64),
    pub worst_ratio: ([f64; 2], [f64; 2], f64),
    pub scales: Vec<f64>,
    pub pairs_per_scale: usize,
}

/// `2^-3, …, 2^-14`: every scale `delta·eps` reached by the default searches
/// at `eps ≥ 2^-6`.
pub fn default_cy_scales() -> Vec<f64> {
    (3..=14).map(|k| (-(k as f64)).exp2()).collect()
}

/// Pairs in `[0,1]²` at which `C_Y` is measured for scale `eps`: all pairs and
/// diagonals of the 9×9 grid with spacing 1/8, and near pairs from a 5×5 grid
/// of base points displaced by `t·eps` in five directions.
pub fn cy_pairs(eps: f64) -> Vec<([f64; 2], [f64; 2])> {
    let coarse: Vec<[f64; 2]> =
        (0..9).flat_map(|i| (0..9).map(move |j| [i as f64 / 8.0, j as f64 / 8.0])).collect();
    let mut out = Vec::new();
    for (k, x) in coarse.iter().enumerate() {
        for y in &coarse[k..] {
            out.push((*x, *y));
        }
    }
    let ts = [1.0 / 16.0, 0.125, 0.25, 0.5, 0.5f64.sqrt(), 0.75, 1.0, 2.0f64.sqrt(), 1.5, 2.0, 3.0];
    for i in 0..5 {
        for j in 0..5 {
            let x = [0.1 + 0.2 * i as f64, 0.1 + 0.2 * j as f64];
            for dir in 0..5 {
                let th = dir as f64 * PI / 8.0;
                for &t in &ts {
                    let y = [x[0] + t * eps * th.cos(), x[1] + t * eps * th.sin()];
                    if y.iter().all(|c| (0.0..=1.0).contains(c)) {
                        out.push((x, y));
                    }
                }
            }
        }
    }
    out
}

/// Measures `C_Y` for the bulk MGFF through the moment check at each scale.
pub fn measure_mgff_c_y(scales: &[f64]) -> Result<CyMeasurement> {
    if scales.is_empty() {
        return domain("no scale to measure");
    }
    let mut max_deviation = 0.0;
    let mut max_ratio = 0.0;
    let mut worst_deviation = ([0.0; 2], [0.0; 2], scales[0]);
    let mut worst_ratio = worst_deviation;
    let mut pairs_per_scale = 0;
    for &s in scales {
        if !(s > 0.0 && s <= 0.5) {
            return domain(format!("scale {s} outside (0, 1/2]"));
        }
        let pairs = cy_pairs(s);
        pairs_per_scale = pairs_per_scale.max(pairs.len());
        let mapped: Vec<([f64; 2], [f64; 2])> = pairs.iter().map(|(x, y)| (bulk_map(x), bulk_map(y))).collect();
        let r = s / 2.0;
        let report = moment_bound_check_with(&PairEvaluator::Bulk { eps: r }, r, 0.25, &mapped)?;
        for (entry, (x, y)) in report.entries.iter().zip(&pairs) {
            let dist = dist2(x, y);
            let dev = (FRAC_PI_2 * entry.cov + s.max(dist).ln()).abs();
            if dev > max_deviation {
                max_deviation = dev;
                worst_deviation = (*x, *y, s);
            }
            if let Some(ratio) = entry.ratio {
                let ratio = FRAC_PI_2 * ratio;
                if ratio > max_ratio {
                    max_ratio = ratio;
                    worst_ratio = (*x, *y, s);
                }
            }
        }
    }
    let c_y = (f64::max(max_deviation, max_ratio) * 1000.0).ceil() / 1000.0;
    Ok(CyMeasurement {
        c_y,
        max_deviation,
        max_ratio,
        worst_deviation,
        worst_ratio,
        scales: scales.to_vec(),
        pairs_per_scale,
    })
}

/// Outcome of re-checking a ledger through the reference routes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SoundnessReport {
    pub checked: usize,
    pub failures: usize,
    /// Smallest recomputed margin over required links, with allowance `REEVAL_TOL`.
    pub min_margin: f64,
    /// Largest `|(rhs - lhs)_reference - (rhs - lhs)_ledger|`.
    pub max_abs_difference: f64,
    pub first_failure: Option<LedgerEntry>,
    pub passed: bool,
}

/// Recomputes every ledger entry of `cert` from the tested coordinates alone,
/// with adaptive quadrature for MBRW-type covariances and, for the MGFF, a
/// polar quadrature of the whole-plane part and a separate summation of the
/// Green series.
pub fn reevaluate(cert: &ComparisonCertificate) -> Result<SoundnessReport> {
    let d = cert.params.d;
    let c_y = cert.params.c_y;
    let delta = cert.delta;
    let zoom = if cert.side == Side::Right { delta } else { 1.0 };
    let mut pair_keys: Vec<(usize, usize, usize)> =
        cert.ledger.iter().filter(|e| e.i != e.j).map(|e| (e.grid, e.i, e.j)).collect();
    pair_keys.sort_unstable();
    pair_keys.dedup();
    let mut point_keys: Vec<(usize, usize)> = cert.ledger.iter().flat_map(|e| [(e.grid, e.i), (e.grid, e.j)]).collect();
    point_keys.sort_unstable();
    point_keys.dedup();
    let y_at = |g: usize, i: usize| -> Vec<f64> { scaled(cert.grids[g].points.get(i), zoom) };
    let vars: HashMap<(usize, usize), f64> = point_keys
        .par_iter()
        .map(|&(g, i)| {
            let x = y_at(g, i);
            Ok(((g, i), reference_y_cov(&cert.field, delta * cert.grids[g].eps, &x, &x)))
        })
        .collect::<Result<_>>()?;
    let covs: HashMap<(usize, usize, usize), f64> = pair_keys
        .par_iter()
        .map(|&(g, i, j)| Ok(((g, i, j), reference_y_cov(&cert.field, delta * cert.grids[g].eps, &y_at(g, i), &y_at(g, j)))))
        .collect::<Result<_>>()?;
    let p = cert.p_or_rho;
    let rho = cert.p_or_rho;
    let recomputed: Vec<(LedgerEntry, f64)> = cert
        .ledger
        .par_iter()
        .map(|e| {
            let grid = &cert.grids[e.grid];
            let eps = grid.eps;
            let l = -eps.ln();
            let (x, y) = (grid.points.get(e.i), grid.points.get(e.j));
            let vy = |i: usize| vars[&(e.grid, i)];
            let cy = || covs[&(e.grid, e.i, e.j)];
            let (lhs, rhs) = match cert.side {
                Side::Right => {
                    let corner = |z: &[f64]| -> Vec<f64> { z.iter().map(|c| (c / eps).floor() * eps).collect() };
                    let sheet_var = |z: &[f64]| -> f64 {
                        let b = corner(z);
                        z.iter().zip(&b).map(|(c, bc)| p * (1.0 + (c - bc) / eps)).product()
                    };
                    let a = |i: usize, z: &[f64]| ((vy(i) - sheet_var(z)).max(0.0) / l).sqrt();
                    let (bx, by) = (corner(x), corner(y));
                    let r = dist2(x, y);
                    match e.link {
                        Link::Radicand => (sheet_var(x), vy(e.i)),
                        Link::AAtMostOne => (vy(e.i) - sheet_var(x), l),
                        Link::YIncrement | Link::ConstantBelowSheet | Link::SheetIncrement | Link::SlepianIncrement => {
                            let inc_y = vy(e.i) + vy(e.j) - 2.0 * cy();
                            let cross: f64 =
                                x.iter().zip(y).zip(&bx).map(|((u, v), b)| p * (1.0 + (u.min(*v) - b) / eps)).product();
                            let inc_psi = sheet_var(x) + sheet_var(y) - 2.0 * cross;
                            let cy_term = c_y * r / eps;
                            let sheet_term = p.powi(d as i32) * l1(x, y) / eps;
                            match e.link {
                                Link::YIncrement => (inc_y, cy_term),
                                Link::ConstantBelowSheet => (cy_term, sheet_term),
                                Link::SheetIncrement => (sheet_term, inc_psi),
                                _ => (inc_y, (a(e.i, x) - a(e.j, y)).powi(2) * l + inc_psi),
                            }
                        }
                        _ => {
                            let xi = reference_overlap(&bx, &by, l);
                            let box_log = -dist_inf(&bx, &by).ln();
                            let m = eps.max(r);
                            let cont = -m.ln() + (2.0 * (d as f64).sqrt()).ln();
                            let lower_y = -m.ln() - delta.ln() - c_y;
                            let cov_z = a(e.i, x) * a(e.j, y) * xi;
                            match e.link {
                                Link::MbrwUpper => (cov_z, box_log),
                                Link::LatticeToContinuum => (box_log, cont),
                                Link::DeltaRoom => (cont, lower_y),
                                Link::YCovLower => (lower_y, cy()),
                                _ => (cov_z, cy()),
                            }
                        }
                    }
                }
                Side::Left => match e.link {
                    Link::BAtLeastOne => (l, vy(e.i)),
                    Link::BAtMostTwo => (vy(e.i), 4.0 * l),
                    _ => {
                        let (ru, rv) = (scaled(x, rho), scaled(y, rho));
                        let xi = reference_overlap(&ru, &rv, l);
                        let upper_y = -dist2(x, y).ln() + c_y;
                        let lower_xi = -dist_inf(&ru, &rv).ln() - cert.mbrw_constant;
                        match e.link {
                            Link::YCovUpper => (cy(), upper_y),
                            Link::RhoRoom => (upper_y, lower_xi),
                            Link::MbrwLower => (lower_xi, xi),
                            _ => (cy(), (vy(e.i) / l).sqrt() * (vy(e.j) / l).sqrt() * xi),
                        }
                    }
                },
            };
            let diff = ((rhs - lhs) - (e.rhs - e.lhs)).abs();
            Ok((LedgerEntry { lhs, rhs, ..*e }, diff))
        })
        .collect::<Result<_>>()?;
    let mut failures = 0;
    let mut first_failure = None;
    let mut min_margin = f64::INFINITY;
    let mut max_abs_difference: f64 = 0.0;
    for (e, diff) in &recomputed {
        max_abs_difference = max_abs_difference.max(if diff.is_nan() { f64::INFINITY } else { *diff });
        if !e.link.required() {
            continue;
        }
        let m = margin_with(e.lhs, e.rhs, REEVAL_TOL);
        min_margin = min_margin.min(m);
        if m < 0.0 {
            failures += 1;
            first_failure.get_or_insert(*e);
        }
    }
    if recomputed.is_empty() {
        min_margin = 0.0;
    }
    Ok(SoundnessReport {
        checked: recomputed.len(),
        failures,
        min_margin,
        max_abs_difference,
        first_failure,
        passed: failures == 0,
    })
}

// ∫_0^upper Π (1 - e^r |x_i - y_i|)_+ dr by adaptive Simpson on [0, r*].
fn reference_overlap(x: &[f64], y: &[f64], upper: f64) -> f64 {
    let a: Vec<f64> = x.iter().zip(y).map(|(p, q)| (p - q).abs()).collect();
    let amax = a.iter().copied().fold(0.0, f64::max);
    let end = if amax > 0.0 { upper.min(-amax.ln()) } else { upper };
    if end <= 0.0 {
        return 0.0;
    }
    let f = |r: f64| a.iter().map(|ai| (1.0 - r.exp() * ai).max(0.0)).product::<f64>();
    adaptive_simpson(&f, 0.0, end, 1e-13)
}

fn reference_y_cov(field: &YField, eps: f64, x: &[f64], y: &[f64]) -> f64 {
    match field {
        YField::SyntheticMbrw { .. } => reference_overlap(x, y, -eps.ln()),
        YField::MgffBulk => {
            let (qx, qy) = (bulk_map(x), bulk_map(y));
            let r = eps / 2.0;
            FRAC_PI_2 * (reference_whole_plane(r, &qx, &qy) - reference_harmonic(&qx, &qy))
        }
    }
}

// Double disk average of Γ: the inner average over D(y, r) is the closed form
// log(1/max(s, r)) + (1 - s²/r²)_+/2 at distance s; the outer average over
// D(x, r) runs along rays from x, split where the ray crosses |z - y| = r.
fn reference_whole_plane(r: f64, x: &[f64], y: &[f64]) -> f64 {
    let dd = dist2(x, y);
    let (gx, gw) = gauss_legendre(16);
    let phi = |s: f64| (1.0 / s.max(r)).ln() + 0.5 * (1.0 - (s / r).powi(2)).max(0.0);
    let ray = |th: f64| -> f64 {
        let b = dd * th.cos();
        let disc = r * r - (dd * th.sin()).powi(2);
        let mut cuts = vec![0.0, r];
        if disc > 0.0 {
            for c in [b - disc.sqrt(), b + disc.sqrt()] {
                if c > 0.0 && c < r {
                    cuts.push(c);
                }
            }
        }
        cuts.sort_by(f64::total_cmp);
        let mut total = 0.0;
        for w in cuts.windows(2) {
            let (h, m) = (0.5 * (w[1] - w[0]), 0.5 * (w[1] + w[0]));
            for (t, wt) in gx.iter().zip(&gw) {
                let rho = m + h * t;
                let s = (rho * rho - 2.0 * rho * b + dd * dd).max(0.0).sqrt();
                total += h * wt * rho * phi(s);
            }
        }
        total
    };
    let outer = 2.0 * adaptive_simpson(&ray, 0.0, PI, 1e-13);
    2.0 / PI * outer / (PI * r * r)
}

// h = Γ - G with G summed in sinh-product form along the coordinate that
// separates more; close pairs use a ring of radius 0.07 around y.
fn reference_harmonic(x: &[f64], y: &[f64]) -> f64 {
    if dist2(x, y) >= 0.03 {
        return gamma_of_distance(dist2(x, y)) - reference_green(x, y);
    }
    let nodes = 24;
    let mut total = 0.0;
    for k in 0..nodes {
        let t = 2.0 * PI * k as f64 / nodes as f64;
        let z = [y[0] + 0.07 * t.cos(), y[1] + 0.07 * t.sin()];
        total += gamma_of_distance(dist2(x, &z)) - reference_green(x, &z);
    }
    total / nodes as f64
}

// Σ_m sin(mπa) sin(mπb)/(m² + n²) = pi sinh(nπ lo) sinh(nπ(1-hi)) / (2n sinh nπ).
fn reference_green(x: &[f64], y: &[f64]) -> f64 {
    let (k, c) = if (x[0] - y[0]).abs() >= (x[1] - y[1]).abs() { (0, 1) } else { (1, 0) };
    let (lo, hi) = (x[k].min(y[k]), x[k].max(y[k]));
    let gap = hi - lo;
    let mut total = 0.0;
    let mut n = 1usize;
    loop {
        let nf = n as f64;
        let decay = (-nf * PI * gap).exp();
        if decay < 1e-18 {
            break;
        }
        let closed = decay * -(-2.0 * nf * PI * lo).exp_m1() * -(-2.0 * nf * PI * (1.0 - hi)).exp_m1()
            / (2.0 * -(-2.0 * nf * PI).exp_m1());
        total += (nf * PI * x[c]).sin() * (nf * PI * y[c]).sin() * PI / (2.0 * nf) * closed;
        n += 1;
    }
    16.0 / (PI * PI) * total
}
