//! Dense symmetric covariance matrices and a jittered Cholesky factorization.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lattice::PointSet;

/// Dense symmetric matrix, row-major with both triangles filled, labelled by
/// the points it was built from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovMatrix {
    n: usize,
    data: Vec<f64>,
    labels: PointSet,
}

impl CovMatrix {
    /// Wraps row-major data. The caller guarantees symmetry.
    pub fn from_row_major(labels: PointSet, data: Vec<f64>) -> Result<Self> {
        let n = labels.len();
        if data.len() != n * n {
            return Err(Error::Mismatch(format!(
                "{} entries for a {n}x{n} matrix",
                data.len()
            )));
        }
        Ok(Self { n, data, labels })
    }

    /// Builds the matrix from an entry function evaluated on the lower triangle
    /// (rows in parallel) and mirrored.
    pub fn from_fn<F>(labels: PointSet, f: F) -> Result<Self>
    where
        F: Fn(usize, usize) -> Result<f64> + Sync,
    {
        let n = labels.len();
        let rows: Vec<Vec<f64>> = (0..n)
            .into_par_iter()
            .map(|i| (0..=i).map(|j| f(i, j)).collect::<Result<Vec<f64>>>())
            .collect::<Result<_>>()?;
        let mut data = vec![0.0; n * n];
        for (i, row) in rows.into_iter().enumerate() {
            for (j, v) in row.into_iter().enumerate() {
                data[i * n + j] = v;
                data[j * n + i] = v;
            }
        }
        Ok(Self { n, data, labels })
    }

    pub fn zeros(labels: PointSet) -> Self {
        let n = labels.len();
        Self { n, data: vec![0.0; n * n], labels }
    }

    pub fn size(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    pub fn set_sym(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.n + j] = v;
        self.data[j * self.n + i] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.n..(i + 1) * self.n]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn labels(&self) -> &PointSet {
        &self.labels
    }

    pub fn trace(&self) -> f64 {
        (0..self.n).map(|i| self.get(i, i)).sum()
    }

    pub fn max_abs_asymmetry(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for i in 0..self.n {
            for j in 0..i {
                worst = worst.max((self.get(i, j) - self.get(j, i)).abs());
            }
        }
        worst
    }

    /// Smallest eigenvalue (symmetric eigensolver).
    pub fn min_eigenvalue(&self) -> f64 {
        if self.n == 0 {
            return 0.0;
        }
        let m = DMatrix::from_row_slice(self.n, self.n, &self.data);
        m.symmetric_eigenvalues().iter().copied().fold(f64::INFINITY, f64::min)
    }

    /// Cholesky factor with the escalating diagonal jitter policy: boost 0, then
    /// `1e-12·trace/n`, growing by 10x up to `1e-6·trace/n`.
    pub fn cholesky(&self) -> Result<CholeskyFactor> {
        let n = self.n;
        let trace = self.trace();
        if n > 0 && trace == 0.0 && self.data.iter().all(|&v| v == 0.0) {
            return Ok(CholeskyFactor { n, lower: vec![0.0; n * (n + 1) / 2], jitter: 0.0 });
        }
        let scale = if n > 0 { trace / n as f64 } else { 0.0 };
        let mut boosts = vec![0.0];
        let mut b = 1e-12;
        while b <= 1e-6 * (1.0 + 1e-9) {
            boosts.push(b * scale);
            b *= 10.0;
        }
        let mut last_pivot = 0;
        for jitter in boosts {
            match factor_lower(&self.data, n, jitter) {
                Ok(lower) => return Ok(CholeskyFactor { n, lower, jitter }),
                Err(pivot) => last_pivot = pivot,
            }
        }
        Err(Error::NotPositiveDefinite { pivot: last_pivot, jitter: 1e-6 * scale })
    }
}

/// Lower-triangular factor `L` with `L Lᵀ = A + jitter·I`, packed by rows.
#[derive(Debug, Clone)]
pub struct CholeskyFactor {
    n: usize,
    lower: Vec<f64>,
    jitter: f64,
}

impl CholeskyFactor {
    pub fn size(&self) -> usize {
        self.n
    }

    /// Diagonal boost that made the factorization succeed.
    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let start = i * (i + 1) / 2;
        &self.lower[start..start + i + 1]
    }

    /// `out = L z`. Each entry is a left-to-right sum over the row, the same
    /// order used by [`CholeskyFactor::mul_batch`].
    pub fn mul_vec(&self, z: &[f64], out: &mut [f64]) {
        for (i, o) in out.iter_mut().enumerate().take(self.n) {
            let mut acc = 0.0;
            for (l, zk) in self.row(i).iter().zip(z) {
                acc += l * zk;
            }
            *o = acc;
        }
    }

    /// Applies `L` to `k` vectors stored interleaved (`z[point * k + replica]`),
    /// writing `out` in the same layout. Bit-identical to `k` calls of
    /// [`CholeskyFactor::mul_vec`].
    pub fn mul_batch(&self, z: &[f64], k: usize, out: &mut [f64]) {
        let mut acc = vec![0.0; k];
        for i in 0..self.n {
            acc.iter_mut().for_each(|a| *a = 0.0);
            for (col, &l) in self.row(i).iter().enumerate() {
                let zs = &z[col * k..(col + 1) * k];
                for (a, &zv) in acc.iter_mut().zip(zs) {
                    *a += l * zv;
                }
            }
            out[i * k..(i + 1) * k].copy_from_slice(&acc);
        }
    }
}

// Row-oriented Cholesky–Crout. Rows are finished in blocks; inside a block the
// off-diagonal part of each row depends only on earlier blocks, so those rows
// run in parallel. Every entry is the same sequential dot product regardless of
// the thread count.
fn factor_lower(a: &[f64], n: usize, jitter: f64) -> std::result::Result<Vec<f64>, usize> {
    const BLOCK: usize = 64;
    let mut rows: Vec<Vec<f64>> = (0..n).map(|i| vec![0.0; i + 1]).collect();
    let mut b0 = 0;
    while b0 < n {
        let b1 = (b0 + BLOCK).min(n);
        let (done, rest) = rows.split_at_mut(b0);
        let block = &mut rest[..b1 - b0];
        let done: &[Vec<f64>] = done;
        block.par_iter_mut().enumerate().for_each(|(off, row)| {
            let i = b0 + off;
            for j in 0..b0 {
                let s = a[i * n + j] - dot(&row[..j], &done[j][..j]);
                row[j] = s / done[j][j];
            }
        });
        for i in b0..b1 {
            let (before, current) = rows.split_at_mut(i);
            let row = &mut current[0];
            for j in b0..i {
                let s = a[i * n + j] - dot(&row[..j], &before[j][..j]);
                row[j] = s / before[j][j];
            }
            let d = a[i * n + i] + jitter - dot(&row[..i], &row[..i]);
            if !(d > 0.0) || !d.is_finite() {
                return Err(i);
            }
            row[i] = d.sqrt();
        }
        b0 = b1;
    }
    Ok(rows.into_iter().flatten().collect())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    // Four fixed lanes; the order is a function of the length only.
    let mut s = [0.0f64; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let k = 4 * c;
        s[0] += a[k] * b[k];
        s[1] += a[k + 1] * b[k + 1];
        s[2] += a[k + 2] * b[k + 2];
        s[3] += a[k + 3] * b[k + 3];
    }
    let mut tail = 0.0;
    for k in 4 * chunks..a.len() {
        tail += a[k] * b[k];
    }
    (s[0] + s[1]) + (s[2] + s[3]) + tail
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labels(n: usize) -> PointSet {
        PointSet::new(1, (0..n).map(|i| i as f64 / n as f64).collect()).unwrap()
    }

    #[test]
    fn factor_reproduces_matrix() {
        let n = 150;
        let m = CovMatrix::from_fn(labels(n), |i, j| {
            let x = i as f64 / n as f64;
            let y = j as f64 / n as f64;
            Ok((-(x - y).abs() * 3.0).exp())
        })
        .unwrap();
        let f = m.cholesky().unwrap();
        assert_eq!(f.jitter(), 0.0);
        for i in 0..n {
            for j in 0..=i {
                let s: f64 = f.row(i)[..=j].iter().zip(f.row(j)).map(|(a, b)| a * b).sum();
                assert!((s - m.get(i, j)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn batch_matches_single() {
        let n = 70;
        let m = CovMatrix::from_fn(labels(n), |i, j| Ok(1.0 / (1.0 + (i as f64 - j as f64).abs()))).unwrap();
        let f = m.cholesky().unwrap();
        let k = 5;
        let z: Vec<f64> = (0..n * k).map(|t| ((t * 7919) % 113) as f64 / 57.0 - 1.0).collect();
        let mut batch = vec![0.0; n * k];
        f.mul_batch(&z, k, &mut batch);
        for r in 0..k {
            let zr: Vec<f64> = (0..n).map(|i| z[i * k + r]).collect();
            let mut out = vec![0.0; n];
            f.mul_vec(&zr, &mut out);
            for i in 0..n {
                assert_eq!(out[i].to_bits(), batch[i * k + r].to_bits());
            }
        }
    }

    #[test]
    fn jitter_rescues_rank_deficient_psd() {
        // Rank one: all-ones matrix.
        let m = CovMatrix::from_fn(labels(4), |_, _| Ok(1.0)).unwrap();
        let f = m.cholesky().unwrap();
        assert!(f.jitter() > 0.0 && f.jitter() <= 1e-6);
    }

    #[test]
    fn indefinite_matrix_fails() {
        let m = CovMatrix::from_row_major(labels(2), vec![1.0, 2.0, 2.0, 1.0]).unwrap();
        assert!(matches!(m.cholesky(), Err(Error::NotPositiveDefinite { .. })));
    }

    #[test]
    fn zero_matrix_has_zero_factor() {
        let f = CovMatrix::zeros(labels(3)).cholesky().unwrap();
        let mut out = vec![1.0; 3];
        f.mul_vec(&[1.0, 2.0, 3.0], &mut out);
        assert_eq!(out, vec![0.0; 3]);
    }

    #[test]
    fn min_eigenvalue_of_diagonal() {
        let m = CovMatrix::from_row_major(labels(2), vec![3.0, 0.0, 0.0, 0.5]).unwrap();
        assert!((m.min_eigenvalue() - 0.5).abs() < 1e-14);
    }
}
