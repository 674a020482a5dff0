//! Dyadic lattices `V_eps = (eps Z^d) ∩ [0,1)^d` and flat point sets.

use serde::{Deserialize, Serialize};

use crate::error::{domain, Result};

/// Largest supported dimension.
pub const MAX_DIM: usize = 6;

/// Representation tolerance for on-lattice checks.
pub const LATTICE_TOL: f64 = 1e-12;

/// An ordered list of points in `R^d`, stored flat with stride `d`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointSet {
    d: usize,
    coords: Vec<f64>,
}

impl PointSet {
    pub fn new(d: usize, coords: Vec<f64>) -> Result<Self> {
        if d == 0 || d > MAX_DIM {
            return domain(format!("dimension {d} outside 1..={MAX_DIM}"));
        }
        if coords.len() % d != 0 {
            return domain(format!(
                "{} coordinates do not split into points of dimension {d}",
                coords.len()
            ));
        }
        if coords.iter().any(|c| !c.is_finite()) {
            return domain("non-finite coordinate");
        }
        Ok(Self { d, coords })
    }

    pub fn from_points<P: AsRef<[f64]>>(d: usize, points: &[P]) -> Result<Self> {
        let mut coords = Vec::with_capacity(points.len() * d);
        for p in points {
            let p = p.as_ref();
            if p.len() != d {
                return domain(format!("point of dimension {} in a {d}-dimensional set", p.len()));
            }
            coords.extend_from_slice(p);
        }
        Self::new(d, coords)
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn len(&self) -> usize {
        self.coords.len() / self.d
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn get(&self, i: usize) -> &[f64] {
        &self.coords[i * self.d..(i + 1) * self.d]
    }

    pub fn iter(&self) -> impl ExactSizeIterator<Item = &[f64]> + '_ {
        self.coords.chunks_exact(self.d)
    }

    pub fn coords(&self) -> &[f64] {
        &self.coords
    }

    /// Applies `f` to every point, keeping the order.
    pub fn map(&self, mut f: impl FnMut(&[f64], &mut [f64])) -> PointSet {
        let mut out = vec![0.0; self.coords.len()];
        for (src, dst) in self.coords.chunks_exact(self.d).zip(out.chunks_exact_mut(self.d)) {
            f(src, dst);
        }
        PointSet { d: self.d, coords: out }
    }

    /// Reorders points: entry `k` of the result is point `perm[k]` of `self`.
    pub fn permuted(&self, perm: &[usize]) -> PointSet {
        let mut coords = Vec::with_capacity(self.coords.len());
        for &i in perm {
            coords.extend_from_slice(self.get(i));
        }
        PointSet { d: self.d, coords }
    }
}

/// The lattice `V_eps` with `eps = 2^-n`, enumerated in row-major order
/// (last coordinate fastest).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Lattice {
    d: usize,
    n: u32,
}

impl Lattice {
    pub fn new(d: usize, n: u32) -> Result<Self> {
        if d == 0 || d > MAX_DIM {
            return domain(format!("dimension {d} outside 1..={MAX_DIM}"));
        }
        if n as usize * d > 30 {
            return domain(format!("lattice 2^-{n} in d = {d} is too large to enumerate"));
        }
        Ok(Self { d, n })
    }

    /// Builds the lattice for a dyadic spacing, rejecting anything that is not `2^-n`.
    pub fn from_eps(d: usize, eps: f64) -> Result<Self> {
        Self::new(d, dyadic_exponent(eps)?)
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn depth(&self) -> u32 {
        self.n
    }

    pub fn eps(&self) -> f64 {
        (-(self.n as f64)).exp2()
    }

    /// Points per coordinate axis.
    pub fn side(&self) -> usize {
        1usize << self.n
    }

    pub fn len(&self) -> usize {
        1usize << (self.n as usize * self.d)
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Integer multi-index of the `i`-th point.
    pub fn multi_index(&self, mut i: usize) -> Vec<usize> {
        let side = self.side();
        let mut idx = vec![0; self.d];
        for slot in idx.iter_mut().rev() {
            *slot = i % side;
            i /= side;
        }
        idx
    }

    pub fn point(&self, i: usize) -> Vec<f64> {
        let eps = self.eps();
        self.multi_index(i).into_iter().map(|k| k as f64 * eps).collect()
    }

    pub fn points(&self) -> PointSet {
        let eps = self.eps();
        let side = self.side();
        let mut coords = Vec::with_capacity(self.len() * self.d);
        for i in 0..self.len() {
            let mut rem = i;
            let start = coords.len();
            coords.resize(start + self.d, 0.0);
            for k in (0..self.d).rev() {
                coords[start + k] = (rem % side) as f64 * eps;
                rem /= side;
            }
        }
        PointSet { d: self.d, coords }
    }

    /// Integer coordinates of `x` if it lies on the lattice.
    pub fn integer_coords(&self, x: &[f64]) -> Result<Vec<u64>> {
        if x.len() != self.d {
            return domain(format!("point of dimension {} on a {}-dimensional lattice", x.len(), self.d));
        }
        let scale = self.side() as f64;
        x.iter()
            .map(|&c| {
                if !(0.0..1.0).contains(&c) {
                    return domain(format!("coordinate {c} outside [0,1)"));
                }
                let k = (c * scale).round();
                if (c * scale - k).abs() > LATTICE_TOL * scale.max(1.0) {
                    return domain(format!("coordinate {c} is not on the 2^-{} lattice", self.n));
                }
                Ok(k as u64)
            })
            .collect()
    }

    pub fn index_of(&self, x: &[f64]) -> Result<usize> {
        let side = self.side() as u64;
        Ok(self
            .integer_coords(x)?
            .into_iter()
            .fold(0u64, |acc, k| acc * side + k) as usize)
    }

    /// The corner `[x]` of the lattice box containing `x ∈ [0,1)^d`.
    pub fn floor(&self, x: &[f64]) -> Result<Vec<f64>> {
        floor_to_grid(x, self.eps())
    }
}

/// `n` such that `eps = 2^-n` exactly.
pub fn dyadic_exponent(eps: f64) -> Result<u32> {
    if !(eps > 0.0 && eps <= 1.0) {
        return domain(format!("scale {eps} outside (0,1]"));
    }
    let n = -eps.log2();
    let r = n.round();
    if (n - r).abs() > 1e-12 || r > 60.0 {
        return domain(format!("scale {eps} is not a dyadic 2^-n"));
    }
    Ok(r as u32)
}

/// Corner of the `eps`-box containing `x ∈ [0,1)^d`, for any spacing in (0,1].
pub fn floor_to_grid(x: &[f64], eps: f64) -> Result<Vec<f64>> {
    x.iter()
        .map(|&c| {
            if !(0.0..1.0).contains(&c) {
                return domain(format!("coordinate {c} outside [0,1)"));
            }
            // Snap values within rounding of a grid line onto it.
            let q = c / eps;
            let k = if (q - q.round()).abs() <= LATTICE_TOL * q.abs().max(1.0) {
                q.round()
            } else {
                q.floor()
            };
            Ok(k * eps)
        })
        .collect()
}

/// Checks that `x` lies on `(eps Z^d) ∩ [0,1)^d` for a not necessarily dyadic `eps`.
pub fn check_on_grid(x: &[f64], eps: f64) -> Result<()> {
    for &c in x {
        if !(0.0..1.0).contains(&c) {
            return domain(format!("coordinate {c} outside [0,1)"));
        }
        let q = c / eps;
        if (q - q.round()).abs() > LATTICE_TOL * q.abs().max(1.0) {
            return domain(format!("coordinate {c} is not on the {eps} lattice"));
        }
    }
    Ok(())
}

/// Sup-norm distance.
pub fn dist_inf(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Euclidean distance.
pub fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// l1 distance.
pub fn dist1(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn enumerates_full_lattice() {
        let lat = Lattice::new(2, 3).unwrap();
        assert_eq!(lat.len(), 64);
        let pts = lat.points();
        assert_eq!(pts.len(), 64);
        assert_eq!(pts.get(1), &[0.0, 0.125]);
        assert_eq!(pts.get(8), &[0.125, 0.0]);
        for (i, p) in pts.iter().enumerate() {
            assert_eq!(lat.index_of(p).unwrap(), i);
            assert_eq!(lat.floor(p).unwrap(), p.to_vec());
            assert!(p.iter().all(|&c| (0.0..1.0).contains(&c)));
        }
    }

    #[test]
    fn rejects_non_dyadic_and_off_lattice() {
        assert!(Lattice::from_eps(1, 0.3).is_err());
        assert!(Lattice::from_eps(1, 0.0).is_err());
        let lat = Lattice::from_eps(1, 0.25).unwrap();
        assert!(lat.index_of(&[0.3]).is_err());
        assert!(lat.index_of(&[1.0]).is_err());
        assert_eq!(lat.index_of(&[0.75]).unwrap(), 3);
    }

    proptest! {
        #[test]
        fn floor_maps_onto_lattice(n in 0u32..8, x in 0.0f64..1.0, y in 0.0f64..1.0) {
            let lat = Lattice::new(2, n).unwrap();
            let f = lat.floor(&[x, y]).unwrap();
            prop_assert!(lat.index_of(&f).is_ok());
            prop_assert!(f[0] <= x && x < f[0] + lat.eps());
            prop_assert!(f[1] <= y && y < f[1] + lat.eps());
        }
    }
}
