//! Special functions used by the Green-function numerics and the estimators.

use std::f64::consts::{FRAC_1_SQRT_2, PI};

/// Bessel function of the first kind of order one.
///
/// Power series below `|z| = 12`, Hankel asymptotic expansion above.
pub fn bessel_j1(z: f64) -> f64 {
    if z < 0.0 {
        return -bessel_j1(-z);
    }
    if z <= 12.0 {
        let q = 0.25 * z * z;
        let mut term = 0.5 * z;
        let mut sum = term;
        let mut k = 0.0;
        loop {
            term *= -q / ((k + 1.0) * (k + 2.0));
            sum += term;
            k += 1.0;
            if term.abs() <= 1e-17 * sum.abs().max(1e-300) && k > z {
                break;
            }
        }
        sum
    } else {
        let mu = 4.0;
        let mut a = 1.0;
        let mut p = 1.0;
        let mut q = 0.0;
        let mut last = f64::INFINITY;
        let mut zk = 1.0;
        for k in 1..200 {
            let kf = k as f64;
            let odd = 2.0 * kf - 1.0;
            a *= (mu - odd * odd) / (8.0 * kf);
            zk *= z;
            let t = a / zk;
            if t.abs() > last || t.abs() < 1e-18 {
                break;
            }
            last = t.abs();
            // P takes the even orders, Q the odd ones, both with alternating signs.
            match k % 4 {
                0 => p += t,
                1 => q += t,
                2 => p -= t,
                _ => q -= t,
            }
        }
        let chi = z - 0.75 * PI;
        (2.0 / (PI * z)).sqrt() * (p * chi.cos() - q * chi.sin())
    }
}

/// Average of a unit-amplitude plane wave `exp(i k·u)` over a disk of radius `r`
/// when `z = |k| r`: `2 J1(z) / z`.
pub fn disk_average_weight(z: f64) -> f64 {
    if z.abs() < 1e-6 {
        1.0 - z * z / 8.0
    } else {
        2.0 * bessel_j1(z) / z
    }
}

/// Upper tail of the standard normal distribution.
pub fn normal_sf(x: f64) -> f64 {
    0.5 * statrs::function::erf::erfc(x * FRAC_1_SQRT_2)
}

/// Standard normal distribution function.
pub fn normal_cdf(x: f64) -> f64 {
    normal_sf(-x)
}

#[cfg(test)]
mod tests {
    use super::*;

    // Bessel's integral, trapezoid over a full period (spectrally accurate).
    fn j1_integral(z: f64) -> f64 {
        let k = (z + 12.0 * z.cbrt() + 64.0).ceil() as usize;
        let h = 2.0 * PI / k as f64;
        (0..k)
            .map(|j| {
                let t = j as f64 * h;
                (t - z * t.sin()).cos()
            })
            .sum::<f64>()
            / k as f64
    }

    #[test]
    fn j1_matches_bessel_integral() {
        let mut z = 0.0;
        while z < 300.0 {
            let a = bessel_j1(z);
            let b = j1_integral(z);
            assert!((a - b).abs() < 1e-10, "z = {z}: {a} vs {b}");
            z += 0.37;
        }
        for z in [11.9, 12.0, 12.0001, 12.5] {
            assert!((bessel_j1(z) - j1_integral(z)).abs() < 1e-10);
        }
    }

    #[test]
    fn j1_known_values() {
        // First zero of J1 and J1(1).
        assert!(bessel_j1(3.831_705_970_207_512).abs() < 1e-13);
        assert!((bessel_j1(1.0) - 0.440_050_585_744_933_5).abs() < 1e-15);
    }

    #[test]
    fn weight_is_one_at_zero() {
        assert_eq!(disk_average_weight(0.0), 1.0);
        assert!((disk_average_weight(1e-3) - (2.0 * bessel_j1(1e-3) / 1e-3)).abs() < 1e-15);
    }

    #[test]
    fn normal_tail_symmetry() {
        assert!((normal_sf(0.0) - 0.5).abs() < 1e-16);
        assert!((normal_sf(1.959_963_984_540_054) - 0.025).abs() < 1e-10);
        assert!((normal_cdf(1.3) + normal_sf(1.3) - 1.0).abs() < 1e-15);
    }
}
