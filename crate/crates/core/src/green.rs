//! Dirichlet Green function of the unit square, the whole-plane kernel and the
//! disk-mollified GFF covariance.
//!
//! The Green function is the double sine series
//!
//! ```text
//! G(u, v) = 4/pi^2 Σ_{n,m ≥ 1} sin(nπu₁) sin(mπu₂) sin(nπv₁) sin(mπv₂) / (n² + m²)
//! ```
//!
//! truncated at `n, m ≤ N`. That series is the Green function of `-Δ`, whose
//! logarithmic singularity is `(1/2pi) log(1/r)`, while the whole-plane kernel
//! used alongside it is `Γ = (2/pi) log(1/r)`. By default the series is scaled
//! by 4 so that `G - Γ` is harmonic; [`Normalization::Laplacian`] keeps the
//! `4/pi^2` prefactor.
//!
//! Disk averages of a single term factorize, so the
//! mollified covariance is again a diagonal form in the sine modes. Two routes
//! compute the disk averages: a closed-form plane-wave weight `2 J1(z)/z`, and a
//! polar Gauss–Legendre rule that serves as the reference.

use std::f64::consts::PI;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};
use crate::lattice::{dist2, Lattice, PointSet};
use crate::linalg::CovMatrix;
use crate::quad::gauss_legendre;
use crate::special::disk_average_weight;

/// Default series truncation.
pub const DEFAULT_TRUNCATION: usize = 400;

/// Overall constant in front of the sine series.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    /// `16/pi^2`: matches `Γ = (2/pi) log(1/r)` on the diagonal.
    #[default]
    MatchGamma,
    /// `4/pi^2`: the Green function of `-Δ`.
    Laplacian,
}

impl Normalization {
    pub fn prefactor(self) -> f64 {
        match self {
            Normalization::MatchGamma => 16.0 / (PI * PI),
            Normalization::Laplacian => 4.0 / (PI * PI),
        }
    }
}

/// How the double series is cut off.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Summation {
    /// All terms with `n, m ≤ N`.
    #[default]
    Square,
    /// The index along the coordinate with the larger separation is summed in
    /// closed form; the other runs to `N`. Converges exponentially for `u ≠ v`.
    Resummed,
}

/// Truncated Green series on the square `(0, L)²`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GreenSeries {
    pub truncation: usize,
    pub side: f64,
    #[serde(default)]
    pub normalization: Normalization,
    #[serde(default)]
    pub summation: Summation,
}

/// Raised when two points are too close for the truncated series to resolve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AccuracyWarning {
    pub distance: f64,
    pub threshold: f64,
}

/// A series value together with an optional accuracy warning.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GreenValue {
    pub value: f64,
    pub warning: Option<AccuracyWarning>,
}

impl GreenSeries {
    pub fn new(truncation: usize, side: f64) -> Result<Self> {
        if truncation == 0 {
            return domain("series truncation must be at least 1");
        }
        if !(side > 0.0 && side.is_finite()) {
            return domain(format!("domain side {side} must be positive"));
        }
        Ok(Self { truncation, side, normalization: Normalization::default(), summation: Summation::default() })
    }

    pub fn with_normalization(mut self, normalization: Normalization) -> Self {
        self.normalization = normalization;
        self
    }

    pub fn with_summation(mut self, summation: Summation) -> Self {
        self.summation = summation;
        self
    }

    /// Series on `(0,1)²`.
    pub fn unit(truncation: usize) -> Result<Self> {
        Self::new(truncation, 1.0)
    }

    /// Series on `Q = (0,1/2)²`.
    pub fn half(truncation: usize) -> Result<Self> {
        Self::new(truncation, 0.5)
    }

    /// Rough size of the discarded tail, `prefactor · (pi/4) / N`
    /// (`(4/pi)/N` for the Laplacian normalization).
    pub fn tail_estimate(&self) -> f64 {
        self.normalization.prefactor() * PI / (4.0 * self.truncation as f64)
    }

    /// Distance below which the truncated series is flagged as unreliable.
    pub fn resolution(&self) -> f64 {
        3.0 * self.side / self.truncation as f64
    }

    fn check_point(&self, p: &[f64]) -> Result<()> {
        if p.len() != 2 {
            return Err(Error::Mismatch(format!("expected a planar point, got dimension {}", p.len())));
        }
        if p.iter().any(|&c| !(0.0..=self.side).contains(&c)) {
            return domain(format!("point {p:?} outside the closed square of side {}", self.side));
        }
        Ok(())
    }

    pub fn eval(&self, u: &[f64], v: &[f64]) -> Result<GreenValue> {
        self.check_point(u)?;
        self.check_point(v)?;
        let n = self.truncation;
        let total = match self.summation {
            Summation::Square => {
                let s1 = product_table(u[0], v[0], n, self.side);
                let s2 = product_table(u[1], v[1], n, self.side);
                let mut total = 0.0;
                for (i, a) in s1.iter().enumerate() {
                    let nn = ((i + 1) * (i + 1)) as f64;
                    let mut inner = 0.0;
                    for (j, b) in s2.iter().enumerate() {
                        inner += b / (nn + ((j + 1) * (j + 1)) as f64);
                    }
                    total += a * inner;
                }
                total
            }
            Summation::Resummed => {
                // Close the sum along the coordinate that separates more.
                let (k, c) = if (u[0] - v[0]).abs() >= (u[1] - v[1]).abs() { (1, 0) } else { (0, 1) };
                let s = product_table(u[k], v[k], n, self.side);
                let (a, b) = (u[c] / self.side, v[c] / self.side);
                let theta1 = PI * (a - b).abs();
                let theta2 = PI * (a + b);
                let mut total = 0.0;
                for (i, si) in s.iter().enumerate() {
                    let nf = (i + 1) as f64;
                    total += si * PI / (4.0 * nf) * (cosh_ratio(nf, theta1) - cosh_ratio(nf, theta2));
                }
                total
            }
        };
        let distance = dist2(u, v);
        let threshold = self.resolution();
        let warning = (distance < threshold).then_some(AccuracyWarning { distance, threshold });
        Ok(GreenValue { value: self.normalization.prefactor() * total, warning })
    }
}

// cosh(n(pi - theta)) / sinh(n pi) for theta in [0, 2 pi], without overflow.
// From Σ_{m≥1} cos(mθ)/(m² + n²) = (pi/2n) cosh(n(pi-θ))/sinh(n pi) - 1/(2n²).
fn cosh_ratio(n: f64, theta: f64) -> f64 {
    ((-n * theta).exp() + (-n * (2.0 * PI - theta)).exp()) / (-(2.0 * PI * n)).exp_m1().abs()
}

/// `sin(nπx/L)` for `n = 1..=N`.
pub fn sin_table(x: f64, n: usize, side: f64) -> Vec<f64> {
    (1..=n).map(|k| (k as f64 * PI * x / side).sin()).collect()
}

// Products sin(kπa/L)·sin(kπb/L); symmetric in (a, b) bit for bit.
fn product_table(a: f64, b: f64, n: usize, side: f64) -> Vec<f64> {
    sin_table(a, n, side).into_iter().zip(sin_table(b, n, side)).map(|(x, y)| x * y).collect()
}

pub fn green_eval(series: &GreenSeries, u: &[f64], v: &[f64]) -> Result<GreenValue> {
    series.eval(u, v)
}

/// `Γ(x, y) = (2/pi) log(1/‖x - y‖)`.
pub fn gamma_eval(x: &[f64], y: &[f64]) -> Result<f64> {
    let r = dist2(x, y);
    if r == 0.0 {
        return domain("the whole-plane kernel is infinite on the diagonal");
    }
    Ok(gamma_of_distance(r))
}

pub fn gamma_of_distance(r: f64) -> f64 {
    2.0 / PI * (1.0 / r).ln()
}

/// `|G_Q(u/2, v/2) - G(u, v)|` with both series truncated at the same order.
pub fn scaling_identity_residual(truncation: usize, u: &[f64], v: &[f64]) -> Result<GreenValue> {
    let g = GreenSeries::unit(truncation)?.eval(u, v)?;
    let uh = [u[0] / 2.0, u[1] / 2.0];
    let vh = [v[0] / 2.0, v[1] / 2.0];
    let gq = GreenSeries::half(truncation)?.eval(&uh, &vh)?;
    Ok(GreenValue { value: (gq.value - g.value).abs(), warning: g.warning.or(gq.warning) })
}

/// Result of scanning `|G - Γ|` over a bulk grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HarmonicReport {
    pub sup: f64,
    pub worst_pair: ([f64; 2], [f64; 2]),
    /// `Γ(K/2)`.
    pub bound: f64,
    pub slack: f64,
    pub pairs: usize,
}

impl HarmonicReport {
    pub fn holds(&self) -> bool {
        self.sup <= self.bound + self.slack
    }
}

/// Max of `|G(u,y) - Γ(u,y)|` over distinct pairs of `grid`, with every point at
/// distance at least `margin` from the boundary.
pub fn harmonic_correction_bound(series: &GreenSeries, margin: f64, grid: &PointSet) -> Result<HarmonicReport> {
    if !(margin > 0.0) {
        return domain("margin must be positive");
    }
    if series.side != 1.0 {
        return domain("harmonic bound is stated on the unit square");
    }
    for p in grid.iter() {
        check_margin(p, margin)?;
    }
    let n = grid.len();
    let rows: Vec<(f64, usize, usize)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut best = (0.0, i, i);
            for j in 0..i {
                let (u, y) = (grid.get(i), grid.get(j));
                let g = series.eval(u, y)?.value;
                let diff = (g - gamma_eval(u, y)?).abs();
                if diff > best.0 {
                    best = (diff, i, j);
                }
            }
            Ok(best)
        })
        .collect::<Result<_>>()?;
    let (sup, i, j) = rows.into_iter().fold((0.0, 0, 0), |acc, r| if r.0 > acc.0 { r } else { acc });
    let p = |k: usize| [grid.get(k)[0], grid.get(k)[1]];
    Ok(HarmonicReport {
        sup,
        worst_pair: (p(i), p(j)),
        bound: gamma_of_distance(margin / 2.0),
        slack: 0.01,
        pairs: n * n.saturating_sub(1) / 2,
    })
}

fn check_margin(p: &[f64], margin: f64) -> Result<()> {
    let dist = p.iter().map(|&c| c.min(1.0 - c)).fold(f64::INFINITY, f64::min);
    if dist < margin - 1e-12 {
        return domain(format!("point {p:?} is closer than {margin} to the boundary"));
    }
    Ok(())
}

/// `k×k` grid on `[margin, 1 - margin]²`, endpoints included.
pub fn bulk_grid(margin: f64, k: usize) -> PointSet {
    let coords: Vec<f64> = (0..k)
        .map(|i| if k == 1 { 0.5 } else { margin + (1.0 - 2.0 * margin) * i as f64 / (k - 1) as f64 })
        .collect();
    let mut flat = Vec::with_capacity(2 * k * k);
    for &a in &coords {
        for &b in &coords {
            flat.push(a);
            flat.push(b);
        }
    }
    PointSet::new(2, flat).expect("planar grid")
}

/// How disk averages are computed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum DiskRule {
    /// Plane-wave weight `2 J1(z)/z` per mode.
    Analytic,
    /// Gauss–Legendre in the radius, offset trapezoid in the angle.
    Polar { radial: usize, angular: usize },
}

impl Default for DiskRule {
    fn default() -> Self {
        DiskRule::Polar { radial: 32, angular: 64 }
    }
}

/// Uniform averaging over `D(x, eps)`, optionally intersected with `(0,1)²`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MollifierSpec {
    pub eps: f64,
    pub rule: DiskRule,
    pub clip: bool,
}

impl MollifierSpec {
    pub fn analytic(eps: f64) -> Self {
        Self { eps, rule: DiskRule::Analytic, clip: false }
    }

    pub fn polar(eps: f64, radial: usize, angular: usize) -> Self {
        Self { eps, rule: DiskRule::Polar { radial, angular }, clip: false }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eps > 0.0 && self.eps.is_finite()) {
            return domain(format!("mollifier radius {} must be positive", self.eps));
        }
        if let DiskRule::Polar { radial, angular } = self.rule {
            if radial < 4 || angular < 4 {
                return domain("polar rule needs at least 4 radial and 4 angular nodes");
            }
        }
        Ok(())
    }

    fn disk_inside(&self, x: &[f64]) -> bool {
        x.iter().all(|&c| c - self.eps > 0.0 && c + self.eps < 1.0)
    }
}

/// Quadrature nodes and weights for the average over `D(x, eps)`. Weights carry
/// the `1/(pi eps²)` normalization; with `clip` the nodes outside `(0,1)²` are
/// dropped and the normalization is kept, as in the defining formula.
pub fn disk_nodes(x: &[f64], moll: &MollifierSpec) -> Result<Vec<([f64; 2], f64)>> {
    moll.validate()?;
    let (radial, angular) = match moll.rule {
        DiskRule::Polar { radial, angular } => (radial, angular),
        DiskRule::Analytic => return Err(Error::Mismatch("analytic rule has no nodes".into())),
    };
    if !moll.clip && !moll.disk_inside(x) {
        return Err(Error::Precondition(format!(
            "disk of radius {} around {x:?} leaves the square and clipping is off",
            moll.eps
        )));
    }
    let (gx, gw) = gauss_legendre(radial);
    let eps = moll.eps;
    let norm = 1.0 / (PI * eps * eps);
    let dtheta = 2.0 * PI / angular as f64;
    let mut nodes = Vec::with_capacity(radial * angular);
    for (xi, wi) in gx.iter().zip(&gw) {
        let rho = 0.5 * eps * (1.0 + xi);
        let w_r = 0.5 * eps * wi * rho;
        for j in 0..angular {
            let theta = (j as f64 + 0.5) * dtheta;
            let p = [x[0] + rho * theta.cos(), x[1] + rho * theta.sin()];
            if moll.clip && !(p[0] > 0.0 && p[0] < 1.0 && p[1] > 0.0 && p[1] < 1.0) {
                continue;
            }
            nodes.push((p, norm * w_r * dtheta));
        }
    }
    Ok(nodes)
}

/// Disk averages `A[n][m]` of `sin(nπu₁) sin(mπu₂)` for every mode, row-major.
pub fn mode_averages(x: &[f64], n: usize, moll: &MollifierSpec) -> Result<Vec<f64>> {
    let mut a = vec![0.0; n * n];
    match moll.rule {
        DiskRule::Analytic => {
            if !moll.disk_inside(x) {
                return Err(Error::Precondition(format!(
                    "analytic disk average needs D({x:?}, {}) inside the square",
                    moll.eps
                )));
            }
            let s = sin_table(x[0], n, 1.0);
            let t = sin_table(x[1], n, 1.0);
            for i in 0..n {
                for j in 0..n {
                    a[i * n + j] = s[i] * t[j] * mode_weight(i + 1, j + 1, moll.eps);
                }
            }
        }
        DiskRule::Polar { radial, angular } => {
            let work = (radial * angular) as f64 * (n * n) as f64;
            if work > 2e11 {
                return Err(Error::Budget(format!("quadrature of {work:.3e} operations per point")));
            }
            for (p, w) in disk_nodes(x, moll)? {
                let s = sin_table(p[0], n, 1.0);
                let t = sin_table(p[1], n, 1.0);
                for i in 0..n {
                    let ws = w * s[i];
                    let row = &mut a[i * n..(i + 1) * n];
                    for (r, tj) in row.iter_mut().zip(&t) {
                        *r += ws * tj;
                    }
                }
            }
        }
    }
    Ok(a)
}

fn coefficient(prefactor: f64, n: usize, m: usize) -> f64 {
    prefactor / ((n * n + m * m) as f64)
}

fn mode_weight(n: usize, m: usize, eps: f64) -> f64 {
    disk_average_weight(PI * eps * ((n * n + m * m) as f64).sqrt())
}

/// `(1/(pi eps²))² ∫∫_{D(x,eps)×D(y,eps)} G(u,v) du dv` for the unit square.
pub fn mollified_green(series: &GreenSeries, moll: &MollifierSpec, x: &[f64], y: &[f64]) -> Result<f64> {
    moll.validate()?;
    if series.side != 1.0 {
        return domain("mollified covariance is defined on the unit square");
    }
    series.check_point(x)?;
    series.check_point(y)?;
    let n = series.truncation;
    let ax = mode_averages(x, n, moll)?;
    let ay = if x == y { ax.clone() } else { mode_averages(y, n, moll)? };
    Ok(diagonal_form(&ax, &ay, n, series.normalization.prefactor()))
}

fn diagonal_form(ax: &[f64], ay: &[f64], n: usize, prefactor: f64) -> f64 {
    let mut total = 0.0;
    for i in 0..n {
        let mut inner = 0.0;
        for j in 0..n {
            let k = i * n + j;
            inner += coefficient(prefactor, i + 1, j + 1) * (ax[k] * ay[k]);
        }
        total += inner;
    }
    total
}

/// Fast analytic-route evaluator of the mollified covariance: the weights
/// `c_nm · w_nm²` are tabulated once. Uses the default normalization.
#[derive(Debug, Clone)]
pub struct MollifiedGreen {
    n: usize,
    eps: f64,
    k: Vec<f64>,
}

impl MollifiedGreen {
    pub fn new(truncation: usize, eps: f64) -> Result<Self> {
        Self::with_normalization(truncation, eps, Normalization::default())
    }

    pub fn with_normalization(truncation: usize, eps: f64, normalization: Normalization) -> Result<Self> {
        if truncation == 0 {
            return domain("series truncation must be at least 1");
        }
        if !(eps > 0.0 && eps.is_finite()) {
            return domain(format!("mollifier radius {eps} must be positive"));
        }
        let prefactor = normalization.prefactor();
        let n = truncation;
        let mut k = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                let w = mode_weight(i + 1, j + 1, eps);
                k[i * n + j] = coefficient(prefactor, i + 1, j + 1) * w * w;
            }
        }
        Ok(Self { n, eps, k })
    }

    pub fn eps(&self) -> f64 {
        self.eps
    }

    pub fn truncation(&self) -> usize {
        self.n
    }

    fn check(p: &[f64]) -> Result<()> {
        if p.len() != 2 {
            return Err(Error::Mismatch(format!("expected a planar point, got dimension {}", p.len())));
        }
        if p.iter().any(|&c| !(0.0..=1.0).contains(&c)) {
            return domain(format!("MGFF point {p:?} outside [0,1]²"));
        }
        Ok(())
    }

    /// Covariance of the mollified field at `x, y ∈ [0,1]²`. Near the boundary
    /// this is the disk average of the odd extension of `G`.
    pub fn cov(&self, x: &[f64], y: &[f64]) -> Result<f64> {
        Self::check(x)?;
        Self::check(y)?;
        let s = product_table(x[0], y[0], self.n, 1.0);
        let t = product_table(x[1], y[1], self.n, 1.0);
        Ok(self.combine(&s, &t))
    }

    fn inner(&self, i: usize, t: &[f64]) -> f64 {
        let row = &self.k[i * self.n..(i + 1) * self.n];
        let mut acc = 0.0;
        for (kij, tj) in row.iter().zip(t) {
            acc += kij * tj;
        }
        acc
    }

    fn combine(&self, s: &[f64], t: &[f64]) -> f64 {
        let mut total = 0.0;
        for (i, si) in s.iter().enumerate() {
            total += si * self.inner(i, t);
        }
        total
    }

    /// Full covariance matrix. Entries are bit-identical to [`MollifiedGreen::cov`].
    pub fn matrix(&self, points: &PointSet) -> Result<CovMatrix> {
        if points.dim() != 2 {
            return Err(Error::Mismatch("MGFF points must be planar".into()));
        }
        for p in points.iter() {
            Self::check(p)?;
        }
        let xs = unique_values(points.iter().map(|p| p[0]));
        let ys = unique_values(points.iter().map(|p| p[1]));
        if ys.len() > 256 {
            return CovMatrix::from_fn(points.clone(), |i, j| self.cov(points.get(i), points.get(j)));
        }
        let n = self.n;
        let sx: Vec<Vec<f64>> = xs.iter().map(|&a| sin_table(a, n, 1.0)).collect();
        let ty: Vec<Vec<f64>> = ys.iter().map(|&b| sin_table(b, n, 1.0)).collect();
        let nb = ys.len();
        // inner[b][b'][i] = Σ_j K_ij (T[b][j] T[b'][j]) for b' ≤ b.
        let inner: Vec<Vec<f64>> = (0..nb * (nb + 1) / 2)
            .into_par_iter()
            .map(|idx| {
                let (b, bp) = tri_index(idx);
                let t: Vec<f64> = ty[b].iter().zip(&ty[bp]).map(|(p, q)| p * q).collect();
                (0..n).map(|i| self.inner(i, &t)).collect()
            })
            .collect();
        let xi: Vec<usize> = points.iter().map(|p| xs.binary_search_by(|v| v.total_cmp(&p[0])).unwrap()).collect();
        let yi: Vec<usize> = points.iter().map(|p| ys.binary_search_by(|v| v.total_cmp(&p[1])).unwrap()).collect();
        CovMatrix::from_fn(points.clone(), |p, q| {
            let (a, ap) = (xi[p], xi[q]);
            let (b, bp) = (yi[p].max(yi[q]), yi[p].min(yi[q]));
            let row = &inner[b * (b + 1) / 2 + bp];
            let mut total = 0.0;
            for i in 0..n {
                total += (sx[a][i] * sx[ap][i]) * row[i];
            }
            Ok(total)
        })
    }
}

fn tri_index(idx: usize) -> (usize, usize) {
    let mut b = ((((8 * idx + 1) as f64).sqrt() - 1.0) / 2.0) as usize;
    while b * (b + 1) / 2 > idx {
        b -= 1;
    }
    while (b + 1) * (b + 2) / 2 <= idx {
        b += 1;
    }
    (b, idx - b * (b + 1) / 2)
}

fn unique_values(values: impl Iterator<Item = f64>) -> Vec<f64> {
    let mut v: Vec<f64> = values.collect();
    v.sort_by(f64::total_cmp);
    v.dedup();
    v
}

/// The bulk square `Q = [1/4, 3/4)²` sampled at `q(V_eps) = 1/4 + V_eps/2`.
pub fn bulk_points(eps: f64) -> Result<PointSet> {
    let lattice = Lattice::from_eps(2, eps)?;
    Ok(lattice.points().map(|p, out| {
        for (o, c) in out.iter_mut().zip(p) {
            *o = 0.25 + 0.5 * c;
        }
    }))
}

/// Disk-mollified whole-plane kernel: `Γ` averaged over `D(x,eps) × D(y,eps)`.
/// Equals `Γ(‖x-y‖)` once the disks are disjoint.
pub fn whole_plane_mollified(eps: f64, x: &[f64], y: &[f64]) -> Result<f64> {
    if !(eps > 0.0 && eps.is_finite()) {
        return domain(format!("mollifier radius {eps} must be positive"));
    }
    if x.len() != 2 || y.len() != 2 {
        return Err(Error::Mismatch("whole-plane kernel takes planar points".into()));
    }
    let delta = dist2(x, y);
    if delta >= 2.0 * eps {
        return Ok(gamma_of_distance(delta));
    }
    // U - V = (x - y) + eps·S with |S| having density 2 s A(s)/pi on [0, 2],
    // A the lens area of two unit disks at distance s. Given |S| the direction
    // is uniform and the circle average of log(1/|z|) is log(1/max(delta, eps s)).
    let s0 = delta / eps;
    let f = |s: f64| -> f64 {
        let lens = 2.0 * (s / 2.0).acos() - (s / 2.0) * (4.0 - s * s).max(0.0).sqrt();
        lens * s * (1.0 / delta.max(eps * s)).ln()
    };
    let total = graded_integral(&f, 0.0, s0) + graded_integral(&f, s0, 2.0);
    Ok(4.0 / (PI * PI) * total)
}

// Composite Gauss–Legendre with panels refined toward both endpoints.
fn graded_integral(f: &dyn Fn(f64) -> f64, a: f64, b: f64) -> f64 {
    if b <= a {
        return 0.0;
    }
    let (x, w) = gauss_legendre(24);
    let mut breaks = vec![0.0, 1.0];
    for k in 1..=12 {
        let h = 0.5f64.powi(k);
        breaks.push(h);
        breaks.push(1.0 - h);
    }
    breaks.sort_by(f64::total_cmp);
    breaks.dedup();
    let mut total = 0.0;
    for win in breaks.windows(2) {
        let (lo, hi) = (a + (b - a) * win[0], a + (b - a) * win[1]);
        let half = 0.5 * (hi - lo);
        let mid = 0.5 * (hi + lo);
        total += half * x.iter().zip(&w).map(|(xi, wi)| wi * f(mid + half * xi)).sum::<f64>();
    }
    total
}

/// Below this separation [`harmonic_part`] switches to a ring average.
const HARMONIC_DIRECT_MIN: f64 = 0.02;
const HARMONIC_RING: f64 = 0.1;
const HARMONIC_RING_NODES: usize = 32;
/// Points handed to [`harmonic_part`] must keep this distance from the boundary.
pub const HARMONIC_MARGIN: f64 = 0.125;

/// `h(x, y) = Γ(x, y) - G(x, y)` on the unit square, default normalization.
///
/// `h` is harmonic in each argument and finite on the diagonal. Pairs at least
/// 0.02 apart use the resummed series with a truncation chosen from the
/// separation; closer pairs average `h(x, ·)` over a circle of radius 0.1
/// around `y`, which by the mean-value property returns `h(x, y)` itself.
pub fn harmonic_part(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != 2 || y.len() != 2 {
        return Err(Error::Mismatch("harmonic part takes planar points".into()));
    }
    check_margin(x, HARMONIC_MARGIN)?;
    check_margin(y, HARMONIC_MARGIN)?;
    if dist2(x, y) >= HARMONIC_DIRECT_MIN {
        return harmonic_direct(x, y);
    }
    let mut total = 0.0;
    for k in 0..HARMONIC_RING_NODES {
        let t = 2.0 * PI * (k as f64 + 0.5) / HARMONIC_RING_NODES as f64;
        let z = [y[0] + HARMONIC_RING * t.cos(), y[1] + HARMONIC_RING * t.sin()];
        total += harmonic_direct(x, &z)?;
    }
    Ok(total / HARMONIC_RING_NODES as f64)
}

fn harmonic_direct(x: &[f64], y: &[f64]) -> Result<f64> {
    let sep = (x[0] - y[0]).abs().max((x[1] - y[1]).abs());
    // Terms decay like exp(-n pi sep); stop well below double precision.
    let n = (40.0 / (PI * sep)).ceil() as usize + 10;
    let g = GreenSeries::unit(n)?.with_summation(Summation::Resummed).eval(x, y)?.value;
    Ok(gamma_of_distance(dist2(x, y)) - g)
}

/// Disk-mollified GFF covariance in the bulk, as `Γ_eps(x, y) - h(x, y)`.
///
/// Averaging the harmonic `h` over the two disks leaves it unchanged, so this
/// is exact once both disks lie inside the square, at any radius.
pub fn bulk_mollified_cov(eps: f64, x: &[f64], y: &[f64]) -> Result<f64> {
    let inside = |p: &[f64]| p.iter().all(|&c| c - eps > 0.0 && c + eps < 1.0);
    if !inside(x) || !inside(y) {
        return Err(Error::Precondition("bulk covariance needs disks inside the square".into()));
    }
    Ok(whole_plane_mollified(eps, x, y)? - harmonic_part(x, y)?)
}

/// One pair in a moment check.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MomentEntry {
    pub x: [f64; 2],
    pub y: [f64; 2],
    pub distance: f64,
    pub cov: f64,
    /// `|Cov + (2/pi) log max(eps, ‖x-y‖)|`.
    pub deviation: f64,
    /// `E[(X^x - X^y)²] · eps / ‖x-y‖`, for `0 < ‖x-y‖ ≤ eps`.
    pub ratio: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentReport {
    pub eps: f64,
    pub max_deviation: f64,
    pub max_ratio: Option<f64>,
    pub entries: Vec<MomentEntry>,
}

/// Covariance deviation and increment ratio over `pairs`, all in the bulk.
pub fn moment_bound_check(
    series: &GreenSeries,
    moll: &MollifierSpec,
    margin: f64,
    pairs: &[([f64; 2], [f64; 2])],
) -> Result<MomentReport> {
    moll.validate()?;
    if series.side != 1.0 {
        return domain("moment check is stated on the unit square");
    }
    for (x, y) in pairs {
        check_margin(x, margin)?;
        check_margin(y, margin)?;
    }
    let eval = PairEvaluator::new(series, moll)?;
    moment_bound_check_with(&eval, moll.eps, margin, pairs)
}

/// [`moment_bound_check`] with an explicit evaluator at mollifier radius `eps`.
pub fn moment_bound_check_with(
    eval: &PairEvaluator,
    eps: f64,
    margin: f64,
    pairs: &[([f64; 2], [f64; 2])],
) -> Result<MomentReport> {
    for (x, y) in pairs {
        check_margin(x, margin)?;
        check_margin(y, margin)?;
    }
    let entries: Vec<MomentEntry> = pairs
        .par_iter()
        .map(|(x, y)| {
            let cov = eval.cov(x, y)?;
            let distance = dist2(x, y);
            let deviation = (cov + 2.0 / PI * eps.max(distance).ln()).abs();
            let ratio = if distance > 0.0 && distance <= eps {
                let vx = eval.cov(x, x)?;
                let vy = eval.cov(y, y)?;
                Some((vx + vy - 2.0 * cov) * eps / distance)
            } else {
                None
            };
            Ok(MomentEntry { x: *x, y: *y, distance, cov, deviation, ratio })
        })
        .collect::<Result<_>>()?;
    let max_deviation = entries.iter().map(|e| e.deviation).fold(0.0, f64::max);
    let max_ratio = entries.iter().filter_map(|e| e.ratio).reduce(f64::max);
    Ok(MomentReport { eps, max_deviation, max_ratio, entries })
}

/// Pair evaluation for either route, sharing tables across calls.
pub enum PairEvaluator {
    Analytic(MollifiedGreen),
    Quadrature { series: GreenSeries, moll: MollifierSpec },
    /// [`bulk_mollified_cov`] at the given radius.
    Bulk { eps: f64 },
}

impl PairEvaluator {
    pub fn new(series: &GreenSeries, moll: &MollifierSpec) -> Result<Self> {
        Ok(match moll.rule {
            DiskRule::Analytic => PairEvaluator::Analytic(MollifiedGreen::with_normalization(
                series.truncation,
                moll.eps,
                series.normalization,
            )?),
            DiskRule::Polar { .. } => PairEvaluator::Quadrature { series: *series, moll: *moll },
        })
    }

    pub fn cov(&self, x: &[f64], y: &[f64]) -> Result<f64> {
        match self {
            PairEvaluator::Analytic(g) => {
                let inside = |p: &[f64]| p.iter().all(|&c| c - g.eps() > 0.0 && c + g.eps() < 1.0);
                if !inside(x) || !inside(y) {
                    return Err(Error::Precondition("analytic disk average needs disks inside the square".into()));
                }
                g.cov(x, y)
            }
            PairEvaluator::Quadrature { series, moll } => mollified_green(series, moll, x, y),
            PairEvaluator::Bulk { eps } => bulk_mollified_cov(*eps, x, y),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn boundary_values_vanish() {
        let g = GreenSeries::unit(50).unwrap();
        assert_eq!(g.eval(&[0.3, 0.4], &[0.0, 0.7]).unwrap().value, 0.0);
        assert_eq!(g.eval(&[0.3, 0.4], &[1.0, 0.7]).unwrap().value.abs() < 1e-13, true);
    }

    #[test]
    fn symmetric_exactly() {
        let g = GreenSeries::unit(120).unwrap();
        let (u, v) = ([0.31, 0.47], [0.62, 0.18]);
        assert_eq!(g.eval(&u, &v).unwrap().value, g.eval(&v, &u).unwrap().value);
    }

    #[test]
    fn resummed_agrees_with_large_square_truncation() {
        let (u, v) = ([0.3, 0.4], [0.45, 0.62]);
        let exact = GreenSeries::unit(60).unwrap().with_summation(Summation::Resummed).eval(&u, &v).unwrap().value;
        let big = GreenSeries::unit(3000).unwrap().eval(&u, &v).unwrap().value;
        assert!((exact - big).abs() < 2e-4, "{exact} vs {big}");
        let more = GreenSeries::unit(120).unwrap().with_summation(Summation::Resummed).eval(&u, &v).unwrap().value;
        assert!((exact - more).abs() < 1e-13);
        let swapped = GreenSeries::unit(60).unwrap().with_summation(Summation::Resummed).eval(&v, &u).unwrap().value;
        assert_eq!(exact, swapped);
    }

    #[test]
    fn warning_near_diagonal() {
        let g = GreenSeries::unit(100).unwrap();
        assert!(g.eval(&[0.5, 0.5], &[0.51, 0.5]).unwrap().warning.is_some());
        assert!(g.eval(&[0.5, 0.5], &[0.6, 0.5]).unwrap().warning.is_none());
    }

    #[test]
    fn gamma_values() {
        assert_eq!(gamma_eval(&[0.0, 0.0], &[1.0, 0.0]).unwrap(), 0.0);
        let r = (-PI / 2.0).exp();
        assert!((gamma_eval(&[0.0, 0.0], &[r, 0.0]).unwrap() - 1.0).abs() < 1e-14);
        assert!((gamma_eval(&[0.0, 0.0], &[0.5, 0.0]).unwrap() - 0.441_271_200_305_303_6).abs() < 1e-12);
        assert!(gamma_eval(&[0.1, 0.1], &[0.1, 0.1]).is_err());
    }

    #[test]
    fn whole_plane_diagonal_and_far_field() {
        let eps = 0.01;
        let v = whole_plane_mollified(eps, &[0.5, 0.5], &[0.5, 0.5]).unwrap();
        let oracle = 2.0 / PI * ((1.0 / eps).ln() + 0.25);
        assert!((v - oracle).abs() < 1e-9, "{v} vs {oracle}");
        let at_contact = whole_plane_mollified(eps, &[0.5, 0.5], &[0.52, 0.5]).unwrap();
        let just_inside = whole_plane_mollified(eps, &[0.5, 0.5], &[0.52 - 1e-9, 0.5]).unwrap();
        assert!((at_contact - gamma_of_distance(0.02)).abs() < 1e-14);
        assert!((just_inside - at_contact).abs() < 1e-7);
    }

    #[test]
    fn analytic_matches_polar() {
        let series = GreenSeries::unit(60).unwrap();
        let eps = 0.05;
        let a = mollified_green(&series, &MollifierSpec::analytic(eps), &[0.4, 0.45], &[0.47, 0.41]).unwrap();
        let q = mollified_green(&series, &MollifierSpec::polar(eps, 32, 64), &[0.4, 0.45], &[0.47, 0.41]).unwrap();
        assert!((a - q).abs() < 1e-9, "{a} vs {q}");
    }

    #[test]
    fn unclipped_disk_outside_rejected() {
        let series = GreenSeries::unit(10).unwrap();
        let r = mollified_green(&series, &MollifierSpec::polar(0.1, 8, 8), &[0.05, 0.5], &[0.5, 0.5]);
        assert!(matches!(r, Err(Error::Precondition(_))));
        let clipped = MollifierSpec { clip: true, ..MollifierSpec::polar(0.1, 8, 8) };
        assert!(mollified_green(&series, &clipped, &[0.05, 0.5], &[0.5, 0.5]).is_ok());
    }

    #[test]
    fn matrix_matches_pairwise() {
        let g = MollifiedGreen::new(40, 0.06).unwrap();
        let pts = bulk_points(0.25).unwrap();
        let m = g.matrix(&pts).unwrap();
        for i in 0..pts.len() {
            for j in 0..pts.len() {
                assert_eq!(m.get(i, j).to_bits(), g.cov(pts.get(i), pts.get(j)).unwrap().to_bits());
            }
        }
    }

    #[test]
    fn triangular_index_round_trip() {
        let mut idx = 0;
        for b in 0..30 {
            for bp in 0..=b {
                assert_eq!(tri_index(idx), (b, bp));
                idx += 1;
            }
        }
    }

    #[test]
    fn harmonic_part_branches_agree() {
        let x = [0.4, 0.35];
        // Just above and below the switch to the ring average.
        let far = harmonic_part(&x, &[0.4 + 0.0201, 0.35]).unwrap();
        let near = harmonic_part(&x, &[0.4 + 0.0199, 0.35]).unwrap();
        assert!((far - near).abs() < 1e-4, "{far} vs {near}");
        let a = harmonic_part(&[0.3, 0.6], &[0.55, 0.42]).unwrap();
        let b = harmonic_part(&[0.55, 0.42], &[0.3, 0.6]).unwrap();
        assert!((a - b).abs() < 1e-12);
        assert!(harmonic_part(&[0.05, 0.5], &[0.5, 0.5]).is_err());
    }

    #[test]
    fn bulk_route_matches_mode_sum() {
        for &eps in &[0.0625, 0.03125] {
            let g = MollifiedGreen::new(400, eps).unwrap();
            for (x, y) in [([0.5, 0.5], [0.5, 0.5]), ([0.3, 0.4], [0.33, 0.41]), ([0.3, 0.7], [0.62, 0.35])] {
                let a = bulk_mollified_cov(eps, &x, &y).unwrap();
                let b = g.cov(&x, &y).unwrap();
                assert!((a - b).abs() < 2e-3, "eps {eps} {x:?} {y:?}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn harmonic_part_at_center_is_log_conformal_radius() {
        // The disk-to-square map z ↦ C ∫_0^z (1 + ζ⁴)^(-1/2) dζ sends 1 to a side
        // midpoint, so the conformal radius of the unit square at its center is
        // 1 / (2 ∫_0^1 (1 + t⁴)^(-1/2) dt), and (pi/2) h(c, c) = log(1/R).
        let k = crate::quad::adaptive_simpson(&|t: f64| 1.0 / (1.0 + t.powi(4)).sqrt(), 0.0, 1.0, 1e-14);
        let expected = (2.0 * k).ln();
        let h = harmonic_part(&[0.5, 0.5], &[0.5, 0.5]).unwrap();
        assert!((PI / 2.0 * h - expected).abs() < 1e-10, "{} vs {expected}", PI / 2.0 * h);
    }
}
