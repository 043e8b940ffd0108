//! Truncated normal densities and sampling.

use rand::Rng;
use rand_distr::{Distribution, Exp1, StandardNormal};
use statrs::function::erf::erfc;

const SQRT_2: f64 = std::f64::consts::SQRT_2;

/// `Φ(b) - Φ(a)` for standardized bounds, computed on the tail that keeps
/// precision.
pub fn standard_mass(a: f64, b: f64) -> f64 {
    if a >= 0.0 {
        0.5 * (erfc(a / SQRT_2) - erfc(b / SQRT_2))
    } else if b <= 0.0 {
        0.5 * (erfc(-b / SQRT_2) - erfc(-a / SQRT_2))
    } else {
        1.0 - 0.5 * erfc(b / SQRT_2) - 0.5 * erfc(-a / SQRT_2)
    }
}

/// Log-density of `N(mean, sd²)` truncated to `[lo, hi)`.
pub fn log_density(x: f64, mean: f64, sd: f64, lo: f64, hi: f64) -> f64 {
    if !(x >= lo && x < hi) || !(sd > 0.0) {
        return f64::NEG_INFINITY;
    }
    let mass = standard_mass((lo - mean) / sd, (hi - mean) / sd);
    crate::kernel::normal_logpdf(x, mean, sd) - mass.ln()
}

/// Draws from `N(mean, sd²)` truncated to `[lo, hi)`. A zero `sd` returns the
/// mean clamped into the support.
pub fn sample<R: Rng + ?Sized>(rng: &mut R, mean: f64, sd: f64, lo: f64, hi: f64) -> f64 {
    debug_assert!(lo < hi);
    if !(sd > 0.0) {
        return mean.clamp(lo, next_down(hi));
    }
    let a = (lo - mean) / sd;
    let b = (hi - mean) / sd;
    let z = sample_standard(rng, a, b);
    (mean + sd * z).clamp(lo, next_down(hi))
}

fn next_down(x: f64) -> f64 {
    if x.is_finite() {
        f64::from_bits(x.to_bits() - 1)
    } else {
        x
    }
}

fn sample_standard<R: Rng + ?Sized>(rng: &mut R, a: f64, b: f64) -> f64 {
    if standard_mass(a, b) >= 0.25 {
        loop {
            let z: f64 = StandardNormal.sample(rng);
            if z >= a && z < b {
                return z;
            }
        }
    }
    if b <= 0.0 {
        return -sample_standard(rng, -b, -a);
    }
    if a <= 0.0 {
        // Narrow interval straddling zero; the density peaks at zero.
        loop {
            let z = rng.random_range(a..b);
            if rng.random::<f64>().ln() <= -0.5 * z * z {
                return z;
            }
        }
    }
    if b - a < 1.0 {
        loop {
            let z = rng.random_range(a..b);
            if rng.random::<f64>().ln() <= 0.5 * (a * a - z * z) {
                return z;
            }
        }
    }
    // One-sided exponential proposal (Robert 1995).
    let lambda = 0.5 * (a + (a * a + 4.0).sqrt());
    loop {
        let e: f64 = Exp1.sample(rng);
        let z = a + e / lambda;
        if z < b && rng.random::<f64>().ln() <= -0.5 * (z - lambda).powi(2) {
            return z;
        }
    }
}
