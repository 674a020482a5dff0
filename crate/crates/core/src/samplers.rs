//! Exact and approximate samplers.
//!
//! Every sampler draws one replica from one [`SeedSpec`] stream on a single
//! thread. Batches of replicas run in parallel and are returned in replica
//! order, so output never depends on the size of the thread pool.

use std::f64::consts::LN_2;
use std::ops::Range;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};
use crate::kernels::{kernel_matrix, mbrw_cov, KernelSpec};
use crate::lattice::{dyadic_exponent, Lattice, PointSet};
use crate::linalg::{CholeskyFactor, CovMatrix};
use crate::rng::{normals, SeedSpec};

/// How a sample was produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Cholesky,
    Tree,
    Hierarchical,
    SheetGrid,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Cholesky => "cholesky",
            Method::Tree => "tree",
            Method::Hierarchical => "hierarchical",
            Method::SheetGrid => "sheet_grid",
        }
    }
}

/// One realization with its provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldSample {
    pub points: PointSet,
    pub values: Vec<f64>,
    pub seed: SeedSpec,
    pub kernel: KernelSpec,
    pub method: Method,
}

/// Replicas per batch handed to one worker.
const BATCH: usize = 16;

/// A reusable sampler for a fixed kernel and point set.
pub trait Sampler: Sync {
    fn points(&self) -> &PointSet;
    fn kernel(&self) -> &KernelSpec;
    fn method(&self) -> Method;

    /// Values of the replica identified by `seed`.
    fn draw(&self, seed: &SeedSpec) -> Result<Vec<f64>>;

    fn sample(&self, seed: &SeedSpec) -> Result<FieldSample> {
        Ok(FieldSample {
            points: self.points().clone(),
            values: self.draw(seed)?,
            seed: seed.clone(),
            kernel: *self.kernel(),
            method: self.method(),
        })
    }

    /// Applies `f` to replicas `range` of the stream family `seed` and returns
    /// the results in replica order.
    fn draw_map<T, F>(&self, seed: &SeedSpec, range: Range<u64>, f: F) -> Result<Vec<T>>
    where
        T: Send,
        F: Fn(u64, &[f64]) -> T + Sync,
        Self: Sized,
    {
        let replicas: Vec<u64> = range.collect();
        let chunks: Vec<Vec<T>> = replicas
            .par_chunks(BATCH)
            .map(|chunk| {
                chunk
                    .iter()
                    .map(|&r| self.draw(&seed.replica(r)).map(|v| f(r, &v)))
                    .collect::<Result<Vec<T>>>()
            })
            .collect::<Result<_>>()?;
        Ok(chunks.into_iter().flatten().collect())
    }

    fn draw_many(&self, seed: &SeedSpec, range: Range<u64>) -> Result<Vec<Vec<f64>>>
    where
        Self: Sized,
    {
        self.draw_map(seed, range, |_, v| v.to_vec())
    }
}

/// Dense Cholesky sampler: `values = L z` with `z` standard normal.
pub struct CholeskySampler {
    kernel: KernelSpec,
    points: PointSet,
    factor: CholeskyFactor,
}

impl CholeskySampler {
    pub fn new(kernel: &KernelSpec, points: &PointSet) -> Result<Self> {
        let m = kernel_matrix(kernel, points)?;
        Self::from_matrix(kernel, &m)
    }

    pub fn from_matrix(kernel: &KernelSpec, matrix: &CovMatrix) -> Result<Self> {
        Ok(Self { kernel: *kernel, points: matrix.labels().clone(), factor: matrix.cholesky()? })
    }

    pub fn factor(&self) -> &CholeskyFactor {
        &self.factor
    }

    /// Like [`Sampler::draw_map`], but multiplies whole batches at once. The
    /// values are bit-identical to [`Sampler::draw`].
    pub fn draw_map_batched<T, F>(&self, seed: &SeedSpec, range: Range<u64>, f: F) -> Result<Vec<T>>
    where
        T: Send,
        F: Fn(u64, &[f64]) -> T + Sync,
    {
        let n = self.points.len();
        let replicas: Vec<u64> = range.collect();
        let chunks: Vec<Vec<T>> = replicas
            .par_chunks(BATCH)
            .map(|chunk| {
                let k = chunk.len();
                let mut z = vec![0.0; n * k];
                for (col, &r) in chunk.iter().enumerate() {
                    let zr = normals(&mut seed.replica(r).rng(), n);
                    for (i, v) in zr.into_iter().enumerate() {
                        z[i * k + col] = v;
                    }
                }
                let mut out = vec![0.0; n * k];
                self.factor.mul_batch(&z, k, &mut out);
                let mut values = vec![0.0; n];
                chunk
                    .iter()
                    .enumerate()
                    .map(|(col, &r)| {
                        for (i, v) in values.iter_mut().enumerate() {
                            *v = out[i * k + col];
                        }
                        f(r, &values)
                    })
                    .collect()
            })
            .collect();
        Ok(chunks.into_iter().flatten().collect())
    }
}

impl Sampler for CholeskySampler {
    fn points(&self) -> &PointSet {
        &self.points
    }
    fn kernel(&self) -> &KernelSpec {
        &self.kernel
    }
    fn method(&self) -> Method {
        Method::Cholesky
    }
    fn draw(&self, seed: &SeedSpec) -> Result<Vec<f64>> {
        let n = self.points.len();
        let z = normals(&mut seed.rng(), n);
        let mut out = vec![0.0; n];
        self.factor.mul_vec(&z, &mut out);
        Ok(out)
    }
}

/// One exact sample from a covariance matrix.
pub fn sample_cholesky(matrix: &CovMatrix, kernel: &KernelSpec, seed: &SeedSpec) -> Result<FieldSample> {
    CholeskySampler::from_matrix(kernel, matrix)?.sample(seed)
}

/// Largest number of BRW leaves, as `n·d`.
pub const MAX_TREE_EXPONENT: u32 = 24;

/// Branching random walk on `V_{2^-n}`: one `N(0, log 2)` increment per dyadic
/// box at each level `0..n`, summed along each leaf's ancestry.
pub struct TreeSampler {
    kernel: KernelSpec,
    points: PointSet,
    n: u32,
    d: usize,
}

impl TreeSampler {
    pub fn new(n: u32, d: usize) -> Result<Self> {
        if d == 0 || n as usize * d > MAX_TREE_EXPONENT as usize {
            return Err(Error::Size { what: "BRW tree (log2 leaves)", size: n as usize * d, cap: MAX_TREE_EXPONENT as usize });
        }
        let kernel = KernelSpec::Brw { d, n };
        Ok(Self { kernel, points: Lattice::new(d, n)?.points(), n, d })
    }
}

impl Sampler for TreeSampler {
    fn points(&self) -> &PointSet {
        &self.points
    }
    fn kernel(&self) -> &KernelSpec {
        &self.kernel
    }
    fn method(&self) -> Method {
        Method::Tree
    }
    fn draw(&self, seed: &SeedSpec) -> Result<Vec<f64>> {
        let mut rng = seed.rng();
        let (n, d) = (self.n as usize, self.d);
        let leaves = 1usize << (n * d);
        let mut values = vec![0.0; leaves];
        let sd = LN_2.sqrt();
        let side = 1usize << n;
        for k in 0..n {
            let boxes_side = 1usize << k;
            let inc = normals(&mut rng, boxes_side.pow(d as u32));
            let shift = n - k;
            for (leaf, v) in values.iter_mut().enumerate() {
                // Row-major multi-index of the leaf, coarsened to level k.
                let mut rest = leaf;
                let mut b = 0usize;
                let mut stride = 1usize;
                for _ in 0..d {
                    let c = rest % side;
                    rest /= side;
                    b += (c >> shift) * stride;
                    stride *= boxes_side;
                }
                *v += sd * inc[b];
            }
        }
        Ok(values)
    }
}

pub fn sample_brw_tree(n: u32, d: usize, seed: &SeedSpec) -> Result<FieldSample> {
    TreeSampler::new(n, d)?.sample(seed)
}

/// Discretization of the white-noise representation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HierarchicalConfig {
    /// Slabs per `log 2` of the scale axis.
    pub levels_per_unit: usize,
    /// Noise cells per unit length across a box support.
    pub z_resolution: usize,
}

impl HierarchicalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.levels_per_unit < 1 {
            return domain("levels_per_unit must be at least 1");
        }
        if self.z_resolution < 2 {
            return domain("z_resolution must be at least 2 cells across a box");
        }
        Ok(())
    }

    pub fn refined(&self) -> Self {
        Self { levels_per_unit: 2 * self.levels_per_unit, z_resolution: 2 * self.z_resolution }
    }
}

/// Cap on noise cells drawn per replica.
pub const MAX_HIERARCHICAL_CELLS: usize = 50_000_000;

// Normalized overlap weights of one box side with the cell grid.
#[derive(Debug, Clone)]
struct SideWeights {
    start: usize,
    w: Vec<f64>,
}

#[derive(Debug, Clone)]
struct Slab {
    width: f64,
    cells_per_dim: usize,
    // Indexed by integer lattice coordinate.
    sides: Vec<SideWeights>,
}

/// White-noise sampler for the MBRW: the scale axis is cut into `n·L` slabs;
/// in each, the box `A(v, r)` of side 1 around `e^r v` collects independent cell
/// noise weighted by exact overlap fractions, renormalized so that every slab
/// contributes exactly its width to the variance.
pub struct HierarchicalSampler {
    kernel: KernelSpec,
    points: PointSet,
    lattice: Lattice,
    slabs: Vec<Slab>,
}

impl HierarchicalSampler {
    pub fn new(spec: &KernelSpec, cfg: HierarchicalConfig) -> Result<Self> {
        cfg.validate()?;
        let (d, eps) = match *spec {
            KernelSpec::Mbrw { d, eps } => (d, eps),
            other => return Err(Error::Mismatch(format!("hierarchical sampler needs an MBRW kernel, got {}", other.name()))),
        };
        let n = dyadic_exponent(eps)?;
        let lattice = Lattice::new(d, n)?;
        let side = lattice.side();
        let count = n as usize * cfg.levels_per_unit;
        let total = (1.0 / eps).ln();
        let width = if count > 0 { total / count as f64 } else { 0.0 };
        let z = cfg.z_resolution as f64;
        let mut slabs = Vec::with_capacity(count);
        let mut cells = 0usize;
        for j in 0..count {
            let r = (j as f64 + 0.5) * width;
            let scale = r.exp();
            let sides: Vec<SideWeights> = (0..side)
                .map(|c| {
                    // Box [s, s + z] in cell units, cells [k, k + 1].
                    let s = scale * (c as f64 * eps) * z;
                    let lo = s.floor();
                    let hi = (s + z).ceil();
                    let start = lo as usize;
                    let mut w: Vec<f64> = (start..hi as usize)
                        .map(|k| ((k + 1) as f64).min(s + z) - (k as f64).max(s))
                        .map(|o| o.max(0.0))
                        .collect();
                    let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
                    w.iter_mut().for_each(|x| *x /= norm);
                    SideWeights { start, w }
                })
                .collect();
            let cells_per_dim = sides.iter().map(|s| s.start + s.w.len()).max().unwrap_or(0);
            cells = cells.saturating_add(cells_per_dim.saturating_pow(d as u32));
            slabs.push(Slab { width, cells_per_dim, sides });
        }
        if cells > MAX_HIERARCHICAL_CELLS {
            return Err(Error::Budget(format!(
                "{cells} noise cells per replica exceed the cap of {MAX_HIERARCHICAL_CELLS}"
            )));
        }
        Ok(Self { kernel: *spec, points: lattice.points(), lattice, slabs })
    }

    pub fn slab_count(&self) -> usize {
        self.slabs.len()
    }

    /// Exact covariance of the discretized field between points `i` and `j`.
    pub fn implied_cov(&self, i: usize, j: usize) -> f64 {
        let a = self.lattice.multi_index(i);
        let b = self.lattice.multi_index(j);
        let mut total = 0.0;
        for slab in &self.slabs {
            let mut prod = 1.0;
            for (&ca, &cb) in a.iter().zip(&b) {
                prod *= side_inner(&slab.sides[ca], &slab.sides[cb]);
                if prod == 0.0 {
                    break;
                }
            }
            total += slab.width * prod;
        }
        total
    }

    /// Largest `|implied - exact|` over all pairs, and the pair attaining it.
    pub fn max_discrepancy(&self) -> Result<(f64, usize, usize)> {
        let n = self.points.len();
        let t = (1.0 / self.kernel.eps()).ln();
        let rows: Vec<(f64, usize, usize)> = (0..n)
            .into_par_iter()
            .map(|i| {
                let mut best = (0.0, i, i);
                for j in 0..=i {
                    let exact = mbrw_cov(&self.kernel, self.points.get(i), self.points.get(j), t, t)?;
                    let diff = (self.implied_cov(i, j) - exact).abs();
                    if diff > best.0 {
                        best = (diff, i, j);
                    }
                }
                Ok(best)
            })
            .collect::<Result<_>>()?;
        Ok(rows.into_iter().fold((0.0, 0, 0), |acc, r| if r.0 > acc.0 { r } else { acc }))
    }
}

fn side_inner(a: &SideWeights, b: &SideWeights) -> f64 {
    let lo = a.start.max(b.start);
    let hi = (a.start + a.w.len()).min(b.start + b.w.len());
    let mut acc = 0.0;
    for k in lo..hi {
        acc += a.w[k - a.start] * b.w[k - b.start];
    }
    acc
}

impl Sampler for HierarchicalSampler {
    fn points(&self) -> &PointSet {
        &self.points
    }
    fn kernel(&self) -> &KernelSpec {
        &self.kernel
    }
    fn method(&self) -> Method {
        Method::Hierarchical
    }
    fn draw(&self, seed: &SeedSpec) -> Result<Vec<f64>> {
        let mut rng = seed.rng();
        let d = self.lattice.dim();
        let npts = self.points.len();
        let mut values = vec![0.0; npts];
        let idx: Vec<Vec<usize>> = (0..npts).map(|i| self.lattice.multi_index(i)).collect();
        for slab in &self.slabs {
            let m = slab.cells_per_dim;
            let noise = normals(&mut rng, m.pow(d as u32));
            let amp = slab.width.sqrt();
            for (v, c) in values.iter_mut().zip(&idx) {
                *v += amp * box_sum(&noise, m, c, &slab.sides);
            }
        }
        Ok(values)
    }
}

// Σ over the cells meeting a box of Π_i w_i(k_i) · noise[k], row-major with the
// last coordinate fastest.
fn box_sum(noise: &[f64], m: usize, c: &[usize], sides: &[SideWeights]) -> f64 {
    fn rec(noise: &[f64], m: usize, c: &[usize], sides: &[SideWeights], offset: usize, weight: f64) -> f64 {
        match c.split_first() {
            None => weight * noise[offset],
            Some((&ci, rest)) => {
                let s = &sides[ci];
                let mut acc = 0.0;
                for (k, w) in s.w.iter().enumerate() {
                    acc += rec(noise, m, rest, sides, offset * m + s.start + k, weight * w);
                }
                acc
            }
        }
    }
    rec(noise, m, c, sides, 0, 1.0)
}

pub fn sample_mbrw_hier(spec: &KernelSpec, cfg: HierarchicalConfig, seed: &SeedSpec) -> Result<FieldSample> {
    HierarchicalSampler::new(spec, cfg)?.sample(seed)
}

/// Largest per-box grid for the sheet sampler.
pub const MAX_SHEET_BOX_POINTS: usize = 4096;

/// Brownian sheets on a `resolution^d` grid inside every box, one independent
/// exact sheet per box. Output is in row-major order of the fine grid of
/// spacing `eps / resolution`.
pub struct SheetSampler {
    kernel: KernelSpec,
    points: PointSet,
    factor: CholeskyFactor,
    boxes: usize,
    per_box: usize,
    // For each (box, local) draw position, the global output index.
    scatter: Vec<usize>,
}

impl SheetSampler {
    pub fn new(spec: &KernelSpec, resolution: usize) -> Result<Self> {
        let (d, eps, p) = match *spec {
            KernelSpec::BrownianSheet { d, eps, p } => (d, eps, p),
            other => return Err(Error::Mismatch(format!("sheet sampler needs a Brownian-sheet kernel, got {}", other.name()))),
        };
        spec.validate()?;
        if resolution < 2 {
            return domain("sheet resolution must be at least 2");
        }
        let per_box = resolution.checked_pow(d as u32).filter(|&c| c <= MAX_SHEET_BOX_POINTS).ok_or(Error::Size {
            what: "per-box sheet grid",
            size: resolution.saturating_pow(d as u32),
            cap: MAX_SHEET_BOX_POINTS,
        })?;
        let n = dyadic_exponent(eps)?;
        let coarse = Lattice::new(d, n)?;
        let boxes = coarse.len();
        let fine_side = coarse.side() * resolution;
        let total = boxes * per_box;
        if total > crate::kernels::DEFAULT_MATRIX_CAP * 64 {
            return Err(Error::Size { what: "sheet grid", size: total, cap: crate::kernels::DEFAULT_MATRIX_CAP * 64 });
        }
        let local_idx = |mut l: usize| {
            let mut out = vec![0usize; d];
            for slot in out.iter_mut().rev() {
                *slot = l % resolution;
                l /= resolution;
            }
            out
        };
        // Per-box covariance Π_i min(l_i, l'_i) with l = p + p·j/resolution.
        let local = PointSet::new(d, (0..per_box).flat_map(&local_idx).map(|j| j as f64).collect())?;
        let m = CovMatrix::from_fn(local.clone(), |a, b| {
            let (x, y) = (local.get(a), local.get(b));
            Ok(x.iter().zip(y).map(|(&i, &j)| p + p * i.min(j) / resolution as f64).product())
        })?;
        let factor = m.cholesky()?;
        let mut scatter = vec![0usize; total];
        let mut coords = vec![0.0; total * d];
        for b in 0..boxes {
            let bi = coarse.multi_index(b);
            for l in 0..per_box {
                let li = local_idx(l);
                let mut g = 0usize;
                for i in 0..d {
                    g = g * fine_side + bi[i] * resolution + li[i];
                }
                scatter[b * per_box + l] = g;
                for i in 0..d {
                    coords[g * d + i] = (bi[i] * resolution + li[i]) as f64 * eps / resolution as f64;
                }
            }
        }
        Ok(Self { kernel: *spec, points: PointSet::new(d, coords)?, factor, boxes, per_box, scatter })
    }

    /// Factor of the per-box covariance.
    pub fn factor(&self) -> &CholeskyFactor {
        &self.factor
    }
}

impl Sampler for SheetSampler {
    fn points(&self) -> &PointSet {
        &self.points
    }
    fn kernel(&self) -> &KernelSpec {
        &self.kernel
    }
    fn method(&self) -> Method {
        Method::SheetGrid
    }
    fn draw(&self, seed: &SeedSpec) -> Result<Vec<f64>> {
        let mut rng = seed.rng();
        let mut values = vec![0.0; self.points.len()];
        let mut local = vec![0.0; self.per_box];
        for b in 0..self.boxes {
            let z = normals(&mut rng, self.per_box);
            self.factor.mul_vec(&z, &mut local);
            for (l, v) in local.iter().enumerate() {
                values[self.scatter[b * self.per_box + l]] = *v;
            }
        }
        Ok(values)
    }
}

pub fn sample_bsheet(spec: &KernelSpec, resolution: usize, seed: &SeedSpec) -> Result<FieldSample> {
    SheetSampler::new(spec, resolution)?.sample(seed)
}

/// Unbiased sample covariance with elementwise standard errors
/// `sqrt((C_ii C_jj + C_ij²)/M)`.
#[derive(Debug, Clone)]
pub struct EmpiricalCov {
    pub cov: CovMatrix,
    pub se: CovMatrix,
    pub replicas: usize,
}

impl EmpiricalCov {
    /// Largest `|empirical - reference| / se` over entries with positive SE.
    pub fn max_z_score(&self, reference: &CovMatrix) -> f64 {
        let n = self.cov.size();
        let mut worst: f64 = 0.0;
        for i in 0..n {
            for j in 0..=i {
                let se = self.se.get(i, j);
                if se > 0.0 {
                    worst = worst.max((self.cov.get(i, j) - reference.get(i, j)).abs() / se);
                }
            }
        }
        worst
    }
}

/// Empirical covariance of replicas given as value vectors over `points`.
pub fn empirical_cov_values(points: &PointSet, replicas: &[Vec<f64>]) -> Result<EmpiricalCov> {
    let m = replicas.len();
    if m < 2 {
        return domain("empirical covariance needs at least two replicas");
    }
    let n = points.len();
    if replicas.iter().any(|r| r.len() != n) {
        return Err(Error::Mismatch("replica length differs from the point count".into()));
    }
    let mut mean = vec![0.0; n];
    for r in replicas {
        for (a, v) in mean.iter_mut().zip(r) {
            *a += v;
        }
    }
    mean.iter_mut().for_each(|a| *a /= m as f64);
    let centered: Vec<Vec<f64>> = replicas.iter().map(|r| r.iter().zip(&mean).map(|(v, mu)| v - mu).collect()).collect();
    let cov = CovMatrix::from_fn(points.clone(), |i, j| {
        let s: f64 = centered.iter().map(|r| r[i] * r[j]).sum();
        Ok(s / (m - 1) as f64)
    })?;
    let se = CovMatrix::from_fn(points.clone(), |i, j| {
        let c = cov.get(i, j);
        Ok(((cov.get(i, i) * cov.get(j, j) + c * c) / m as f64).sqrt())
    })?;
    Ok(EmpiricalCov { cov, se, replicas: m })
}

/// Empirical covariance of a collection of samples of one field.
pub fn empirical_cov(samples: &[FieldSample]) -> Result<EmpiricalCov> {
    let first = samples.first().ok_or_else(|| Error::Domain("no samples".into()))?;
    for s in samples {
        if s.points != first.points || s.kernel != first.kernel {
            return Err(Error::Mismatch("samples come from different point sets or kernels".into()));
        }
    }
    let values: Vec<Vec<f64>> = samples.iter().map(|s| s.values.clone()).collect();
    empirical_cov_values(&first.points, &values)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_by_one_is_deterministic() {
        let pts = PointSet::new(1, vec![0.0]).unwrap();
        let m = CovMatrix::from_row_major(pts, vec![4.0]).unwrap();
        let spec = KernelSpec::Mbrw { d: 1, eps: 0.5 };
        let a = sample_cholesky(&m, &spec, &SeedSpec::new(1, 0, "t")).unwrap();
        let b = sample_cholesky(&m, &spec, &SeedSpec::new(1, 0, "t")).unwrap();
        assert_eq!(a.values, b.values);
        let z = normals(&mut SeedSpec::new(1, 0, "t").rng(), 1)[0];
        assert_eq!(a.values[0], 2.0 * z);
    }

    #[test]
    fn zero_matrix_gives_zero_sample() {
        let pts = PointSet::new(1, vec![0.0, 0.5]).unwrap();
        let spec = KernelSpec::Mbrw { d: 1, eps: 0.5 };
        let s = sample_cholesky(&CovMatrix::zeros(pts), &spec, &SeedSpec::new(3, 0, "z")).unwrap();
        assert_eq!(s.values, vec![0.0, 0.0]);
    }

    #[test]
    fn batched_equals_single() {
        let spec = KernelSpec::Mbrw { d: 1, eps: 0.0625 };
        let s = CholeskySampler::new(&spec, &spec.lattice_points().unwrap()).unwrap();
        let seed = SeedSpec::new(9, 0, "b");
        let batched = s.draw_map_batched(&seed, 0..37, |_, v| v.to_vec()).unwrap();
        let single = s.draw_many(&seed, 0..37).unwrap();
        assert_eq!(batched, single);
    }

    #[test]
    fn tree_depth_zero_is_zero() {
        let s = sample_brw_tree(0, 2, &SeedSpec::new(1, 0, "t")).unwrap();
        assert_eq!(s.values, vec![0.0]);
    }

    #[test]
    fn tree_cap() {
        assert!(matches!(TreeSampler::new(13, 2), Err(Error::Size { .. })));
    }

    #[test]
    fn hierarchical_variance_is_exact() {
        let spec = KernelSpec::Mbrw { d: 2, eps: 0.125 };
        let h = HierarchicalSampler::new(&spec, HierarchicalConfig { levels_per_unit: 2, z_resolution: 3 }).unwrap();
        let t = 8f64.ln();
        for i in 0..h.points().len() {
            assert!((h.implied_cov(i, i) - t).abs() < 1e-12);
        }
    }

    #[test]
    fn hierarchical_slabs_above_log2_decouple_half_distance() {
        // Boxes around 0 and e^r/2 are disjoint once r > log 2.
        let spec = KernelSpec::Mbrw { d: 1, eps: 0.0625 };
        let cfg = HierarchicalConfig { levels_per_unit: 4, z_resolution: 8 };
        let h = HierarchicalSampler::new(&spec, cfg).unwrap();
        let j = h.lattice.index_of(&[0.5]).unwrap();
        for slab in h.slabs.iter().skip(cfg.levels_per_unit) {
            assert_eq!(side_inner(&slab.sides[0], &slab.sides[j]), 0.0);
        }
    }

    #[test]
    fn hierarchical_rejects_coarse_grid() {
        let spec = KernelSpec::Mbrw { d: 1, eps: 0.25 };
        assert!(HierarchicalSampler::new(&spec, HierarchicalConfig { levels_per_unit: 1, z_resolution: 1 }).is_err());
    }

    #[test]
    fn sheet_local_covariance() {
        let spec = KernelSpec::BrownianSheet { d: 1, eps: 0.5, p: 2.0 };
        let s = SheetSampler::new(&spec, 2).unwrap();
        assert_eq!(s.points().coords(), &[0.0, 0.25, 0.5, 0.75]);
        let f = s.factor();
        let c00 = f.row(0)[0] * f.row(0)[0];
        let c01 = f.row(1)[0] * f.row(0)[0];
        let c11 = f.row(1).iter().map(|x| x * x).sum::<f64>();
        assert!((c00 - 2.0).abs() < 1e-12 && (c01 - 2.0).abs() < 1e-12 && (c11 - 3.0).abs() < 1e-12);
    }

    #[test]
    fn empirical_of_zero_field() {
        let pts = PointSet::new(1, vec![0.0, 0.5]).unwrap();
        let e = empirical_cov_values(&pts, &vec![vec![0.0, 0.0]; 5]).unwrap();
        assert!(e.cov.data().iter().all(|&v| v == 0.0));
    }
}
