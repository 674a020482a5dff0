//! Closed-form covariance kernels and the recentering constant `m_eps`.

use std::f64::consts::{LN_2, PI};

use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};
use crate::green::{self, MollifiedGreen};
use crate::lattice::{check_on_grid, dist_inf, dyadic_exponent, floor_to_grid, PointSet, MAX_DIM};
use crate::linalg::CovMatrix;

/// Default cap on the number of points in a dense kernel matrix.
pub const DEFAULT_MATRIX_CAP: usize = 8192;

/// One of the five covariance kernels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum KernelSpec {
    /// Modified branching random walk on `V_eps`.
    Mbrw { d: usize, eps: f64 },
    /// Dyadic branching random walk of depth `n` (`eps = 2^-n`).
    Brw { d: usize, n: u32 },
    /// Per-box Brownian sheets mapped onto `[p, 2p)^d`.
    BrownianSheet { d: usize, eps: f64, p: f64 },
    /// Mollified GFF on the unit square: disk radius `eps`, series truncation `truncation`.
    Mgff { eps: f64, truncation: usize },
    /// Whole-plane log kernel, disk-mollified at radius `eps` so the diagonal is finite.
    WholePlaneLog { eps: f64 },
}

impl KernelSpec {
    pub fn validate(&self) -> Result<()> {
        let check_d = |d: usize| {
            if d == 0 || d > MAX_DIM {
                domain(format!("dimension {d} outside 1..={MAX_DIM}"))
            } else {
                Ok(())
            }
        };
        let check_eps = |eps: f64| {
            if eps > 0.0 && eps < 1.0 {
                Ok(())
            } else {
                domain(format!("eps = {eps} outside (0,1)"))
            }
        };
        match *self {
            KernelSpec::Mbrw { d, eps } => {
                check_d(d)?;
                check_eps(eps)
            }
            KernelSpec::Brw { d, n } => {
                check_d(d)?;
                if n as usize * d > 30 {
                    return domain(format!("BRW depth {n} in dimension {d} is too deep"));
                }
                Ok(())
            }
            KernelSpec::BrownianSheet { d, eps, p } => {
                check_d(d)?;
                check_eps(eps)?;
                if !(p >= 1.0) {
                    return domain(format!("block parameter p = {p} must be at least 1"));
                }
                Ok(())
            }
            KernelSpec::Mgff { eps, truncation } => {
                check_eps(eps)?;
                if truncation == 0 {
                    return domain("series truncation must be at least 1");
                }
                Ok(())
            }
            KernelSpec::WholePlaneLog { eps } => check_eps(eps),
        }
    }

    pub fn dim(&self) -> usize {
        match *self {
            KernelSpec::Mbrw { d, .. } | KernelSpec::Brw { d, .. } | KernelSpec::BrownianSheet { d, .. } => d,
            KernelSpec::Mgff { .. } | KernelSpec::WholePlaneLog { .. } => 2,
        }
    }

    pub fn eps(&self) -> f64 {
        match *self {
            KernelSpec::Mbrw { eps, .. }
            | KernelSpec::BrownianSheet { eps, .. }
            | KernelSpec::Mgff { eps, .. }
            | KernelSpec::WholePlaneLog { eps } => eps,
            KernelSpec::Brw { n, .. } => (-(n as f64)).exp2(),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            KernelSpec::Mbrw { .. } => "mbrw",
            KernelSpec::Brw { .. } => "brw",
            KernelSpec::BrownianSheet { .. } => "bsheet",
            KernelSpec::Mgff { .. } => "mgff",
            KernelSpec::WholePlaneLog { .. } => "whole_plane_log",
        }
    }

    /// Terminal time of the time-indexed kernels (`log(1/eps)` or `n log 2`).
    pub fn terminal_time(&self) -> Option<f64> {
        match *self {
            KernelSpec::Mbrw { eps, .. } => Some((1.0 / eps).ln()),
            KernelSpec::Brw { n, .. } => Some(n as f64 * LN_2),
            _ => None,
        }
    }

    /// The recentering used for maxima: `m_eps` for the lattice fields and
    /// `sqrt(2/pi) m_eps` (with `d = 2`) for the MGFF.
    pub fn recentering(&self) -> Result<RecenteringConstant> {
        match *self {
            KernelSpec::Mbrw { d, eps } => RecenteringConstant::new(d, eps, 1.0),
            KernelSpec::Brw { d, .. } => RecenteringConstant::new(d, self.eps(), 1.0),
            KernelSpec::Mgff { eps, .. } => RecenteringConstant::new(2, eps, (2.0 / PI).sqrt()),
            _ => domain(format!("no recentering is defined for the {} kernel", self.name())),
        }
    }

    /// The canonical point set of the kernel: the lattice `V_eps`. For BRW the
    /// lattice has spacing `2^-n`.
    pub fn lattice_points(&self) -> Result<PointSet> {
        self.validate()?;
        let n = match *self {
            KernelSpec::Brw { n, .. } => n,
            _ => dyadic_exponent(self.eps())?,
        };
        Ok(crate::lattice::Lattice::new(self.dim(), n)?.points())
    }

    /// Covariance at terminal time between two points.
    pub fn cov(&self, x: &[f64], y: &[f64]) -> Result<f64> {
        self.validate()?;
        if x.len() != self.dim() || y.len() != self.dim() {
            return Err(Error::Mismatch(format!(
                "points of dimension {}/{} for a {}-dimensional kernel",
                x.len(),
                y.len(),
                self.dim()
            )));
        }
        match *self {
            KernelSpec::Mbrw { eps, .. } => {
                let t = (1.0 / eps).ln();
                mbrw_cov(self, x, y, t, t)
            }
            KernelSpec::Brw { n, .. } => {
                let t = n as f64 * LN_2;
                brw_cov(self, x, y, t, t)
            }
            KernelSpec::BrownianSheet { .. } => bsheet_cov(self, x, y),
            KernelSpec::Mgff { eps, truncation } => MollifiedGreen::new(truncation, eps)?.cov(x, y),
            KernelSpec::WholePlaneLog { eps } => green::whole_plane_mollified(eps, x, y),
        }
    }
}

/// `m_eps` together with the factor applied to it (1 or `sqrt(2/pi)`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RecenteringConstant {
    pub d: usize,
    pub eps: f64,
    pub factor: f64,
    pub value: f64,
}

impl RecenteringConstant {
    pub fn new(d: usize, eps: f64, factor: f64) -> Result<Self> {
        Ok(Self { d, eps, factor, value: factor * m_eps(d, eps)? })
    }
}

/// `m_eps = sqrt(2d) log(1/eps) - 3/(2 sqrt(2d)) log log(1/eps)`, for `0 < eps < 1/e`.
pub fn m_eps(d: usize, eps: f64) -> Result<f64> {
    if d < 1 {
        return domain("dimension must be at least 1");
    }
    if !(eps > 0.0 && eps < (-1.0f64).exp()) {
        return domain(format!("m_eps needs 0 < eps < 1/e, got {eps}"));
    }
    let s = (2.0 * d as f64).sqrt();
    let l = (1.0 / eps).ln();
    Ok(s * l - 1.5 / s * l.ln())
}

/// `∫_0^upper Π_i (1 - e^r a_i)_+ dr` for `a_i ≥ 0`, by the subset expansion
/// `Σ_k (-1)^k e_k(a) φ_k(r*)` with `e_k` the elementary symmetric polynomials.
pub fn overlap_integral(a: &[f64], upper: f64) -> f64 {
    let amax = a.iter().copied().fold(0.0, f64::max);
    let r_star = if amax > 0.0 { upper.min(-amax.ln()) } else { upper };
    if r_star <= 0.0 {
        return 0.0;
    }
    // e[k] accumulates the elementary symmetric polynomial of degree k.
    let mut e = [0.0f64; MAX_DIM + 1];
    e[0] = 1.0;
    for (i, &ai) in a.iter().enumerate() {
        for k in (1..=i + 1).rev() {
            e[k] += ai * e[k - 1];
        }
    }
    let mut total = r_star;
    for (k, &ek) in e.iter().enumerate().take(a.len() + 1).skip(1) {
        if ek == 0.0 {
            continue;
        }
        let phi = (k as f64 * r_star).exp_m1() / k as f64;
        let term = ek * phi;
        if k % 2 == 1 {
            total -= term;
        } else {
            total += term;
        }
    }
    // The integrand lies in [0,1]; clamp the last ulps of cancellation.
    total.clamp(0.0, r_star)
}

fn check_time(t: f64, terminal: f64) -> Result<()> {
    if !(t >= 0.0 && t <= terminal * (1.0 + 1e-12)) {
        return domain(format!("time {t} outside [0, {terminal}]"));
    }
    Ok(())
}

fn mbrw_params(spec: &KernelSpec) -> Result<(usize, f64)> {
    spec.validate()?;
    match *spec {
        KernelSpec::Mbrw { d, eps } => Ok((d, eps)),
        other => Err(Error::Mismatch(format!("expected an MBRW kernel, got {}", other.name()))),
    }
}

/// MBRW covariance `Cov(ξ^v(t), ξ^u(s))` on the lattice `V_eps`.
pub fn mbrw_cov(spec: &KernelSpec, v: &[f64], u: &[f64], t: f64, s: f64) -> Result<f64> {
    let (d, eps) = mbrw_params(spec)?;
    if v.len() != d || u.len() != d {
        return Err(Error::Mismatch(format!("expected {d}-dimensional points")));
    }
    check_on_grid(v, eps)?;
    check_on_grid(u, eps)?;
    let terminal = (1.0 / eps).ln();
    check_time(t, terminal)?;
    check_time(s, terminal)?;
    let a: Vec<f64> = v.iter().zip(u).map(|(x, y)| (x - y).abs()).collect();
    Ok(overlap_integral(&a, t.min(s)))
}

/// `C_d = Σ_{k=1}^d C(d,k)/k`.
pub fn sandwich_constant(d: usize) -> f64 {
    let mut binom = 1.0;
    let mut total = 0.0;
    for k in 1..=d {
        binom = binom * (d + 1 - k) as f64 / k as f64;
        total += binom / k as f64;
    }
    total
}

/// `H_d = Σ_{k=1}^d 1/k`, the supremum of `-log‖v-u‖_∞ - Cov` over distinct
/// sites. Bounding the integrand below by `(1 - e^r a_max)^d` gives
/// `-log a_max - Cov ≤ ∫_0^1 (1 - (1-t)^d)/t dt = H_d`, approached as the
/// sites merge along a diagonal.
pub fn sharp_sandwich_constant(d: usize) -> f64 {
    (1..=d).map(|k| 1.0 / k as f64).sum()
}

/// Violations of `-log‖v-u‖_∞ - C_d ≤ Cov ≤ -log‖v-u‖_∞` at terminal time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SandwichReport {
    /// `Cov - (-log‖v-u‖_∞)`; must be `≤ 0`.
    pub lower_violation: f64,
    /// `(-log‖v-u‖_∞) - Cov`; must be `≤ C_d`.
    pub upper_violation: f64,
    pub constant: f64,
}

impl SandwichReport {
    pub fn holds(&self) -> bool {
        self.lower_violation <= 0.0 && self.upper_violation <= self.constant
    }
}

pub fn mbrw_cov_bounds_check(spec: &KernelSpec, v: &[f64], u: &[f64]) -> Result<SandwichReport> {
    let (d, eps) = mbrw_params(spec)?;
    let dist = dist_inf(v, u);
    if dist == 0.0 {
        return domain("sandwich bound needs distinct points");
    }
    let t = (1.0 / eps).ln();
    let cov = mbrw_cov(spec, v, u, t, t)?;
    let reference = -dist.ln();
    Ok(SandwichReport {
        lower_violation: cov - reference,
        upper_violation: reference - cov,
        constant: sandwich_constant(d),
    })
}

/// First level `k` at which `v` and `u` fall in different dyadic boxes of side
/// `2^-k`; `n + 1` when `v = u`.
pub fn brw_level(v: &[f64], u: &[f64], n: u32) -> Result<u32> {
    if v.len() != u.len() {
        return Err(Error::Mismatch("points of different dimension".into()));
    }
    let eps = (-(n as f64)).exp2();
    check_on_grid(v, eps)?;
    check_on_grid(u, eps)?;
    let side = 1u64 << n;
    let iv: Vec<u64> = v.iter().map(|c| (c * side as f64).round() as u64).collect();
    let iu: Vec<u64> = u.iter().map(|c| (c * side as f64).round() as u64).collect();
    for k in 0..=n {
        let shift = n - k;
        if iv.iter().zip(&iu).any(|(a, b)| (a >> shift) != (b >> shift)) {
            return Ok(k);
        }
    }
    Ok(n + 1)
}

/// `min(t, s, l(v,u))` with `l = brw_level · log 2` (infinite when `v = u`).
pub fn brw_cov(spec: &KernelSpec, v: &[f64], u: &[f64], t: f64, s: f64) -> Result<f64> {
    spec.validate()?;
    let (d, n) = match *spec {
        KernelSpec::Brw { d, n } => (d, n),
        other => return Err(Error::Mismatch(format!("expected a BRW kernel, got {}", other.name()))),
    };
    if v.len() != d || u.len() != d {
        return Err(Error::Mismatch(format!("expected {d}-dimensional points")));
    }
    let terminal = n as f64 * LN_2;
    check_time(t, terminal)?;
    check_time(s, terminal)?;
    let k = brw_level(v, u, n)?;
    let m = t.min(s);
    if k > n {
        return Ok(m);
    }
    Ok(m.min(k as f64 * LN_2))
}

/// Covariance of the per-box Brownian sheets: `Π_i min(l(x)_i, l(y)_i)` in a
/// shared box, 0 across boxes.
pub fn bsheet_cov(spec: &KernelSpec, x: &[f64], y: &[f64]) -> Result<f64> {
    spec.validate()?;
    let (d, eps, p) = match *spec {
        KernelSpec::BrownianSheet { d, eps, p } => (d, eps, p),
        other => return Err(Error::Mismatch(format!("expected a Brownian-sheet kernel, got {}", other.name()))),
    };
    if x.len() != d || y.len() != d {
        return Err(Error::Mismatch(format!("expected {d}-dimensional points")));
    }
    let bx = floor_to_grid(x, eps)?;
    let by = floor_to_grid(y, eps)?;
    if bx != by {
        return Ok(0.0);
    }
    let mut prod = 1.0;
    for i in 0..d {
        let lx = p + p * (x[i] - bx[i]) / eps;
        let ly = p + p * (y[i] - bx[i]) / eps;
        prod *= lx.min(ly);
    }
    Ok(prod)
}

/// Covariance matrix of `spec` on `points`, capped at [`DEFAULT_MATRIX_CAP`].
pub fn kernel_matrix(spec: &KernelSpec, points: &PointSet) -> Result<CovMatrix> {
    kernel_matrix_capped(spec, points, DEFAULT_MATRIX_CAP)
}

pub fn kernel_matrix_capped(spec: &KernelSpec, points: &PointSet, cap: usize) -> Result<CovMatrix> {
    spec.validate()?;
    if points.len() > cap {
        return Err(Error::Size { what: "kernel matrix", size: points.len(), cap });
    }
    if points.dim() != spec.dim() {
        return Err(Error::Mismatch(format!(
            "{}-dimensional points for a {}-dimensional kernel",
            points.dim(),
            spec.dim()
        )));
    }
    match *spec {
        KernelSpec::Mgff { eps, truncation } => MollifiedGreen::new(truncation, eps)?.matrix(points),
        _ => CovMatrix::from_fn(points.clone(), |i, j| spec.cov(points.get(i), points.get(j))),
    }
}
