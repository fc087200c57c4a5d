//! `libm`-backed float helpers (no `std` float intrinsics here).

pub use libm::{ceil, cos, exp, floor, log, pow, round, sin, sqrt};

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + exp(-x))
    } else {
        let e = exp(x);
        e / (1.0 + e)
    }
}

pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + log(xs.iter().map(|v| exp(v - max)).sum::<f64>())
}

pub fn softmax_in_place(xs: &mut [f64]) {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in xs.iter_mut() {
        *v = exp(*v - max);
        total += *v;
    }
    for v in xs.iter_mut() {
        *v /= total;
    }
}

#[inline]
pub fn clamp(x: f64, lo: f64, hi: f64) -> f64 {
    x.max(lo).min(hi)
}

/// Standard normal sample via Box-Muller.
pub fn normal<R: rand::Rng + ?Sized>(rng: &mut R) -> f64 {
    let u1: f64 = rng.gen::<f64>().max(1e-300);
    let u2: f64 = rng.gen();
    sqrt(-2.0 * log(u1)) * cos(core::f64::consts::TAU * u2)
}
