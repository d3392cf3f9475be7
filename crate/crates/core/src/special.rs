//! Error-function helpers for log-domain Gaussian integrals.

use std::f64::consts::PI;

use crate::quadrature;

const SQRT_PI: f64 = 1.772_453_850_905_516;

/// Scaled complementary error function `exp(x²)·erfc(x)` for `x ≥ 0`.
pub fn erfcx(x: f64) -> f64 {
    debug_assert!(x >= 0.0);
    if x < 25.0 {
        // split x² into head and exact tail so exp does not amplify its rounding
        let x2 = x * x;
        let tail = x.mul_add(x, -x2);
        x2.exp() * libm::erfc(x) * (1.0 + tail)
    } else {
        // asymptotic series; the first omitted term is below 1e-17 relative here
        let y = 1.0 / (2.0 * x * x);
        let mut term = 1.0;
        let mut sum = 1.0;
        for k in 1..=6 {
            term *= -((2 * k - 1) as f64) * y;
            sum += term;
        }
        sum / (x * PI.sqrt())
    }
}

/// `ln ∫_l^r exp(-t²) dt` for `l < r`, without overflow or catastrophic cancellation.
pub fn ln_gaussian_integral(l: f64, r: f64) -> f64 {
    debug_assert!(l < r);
    if l < 0.0 && r > 0.0 {
        return (0.5 * SQRT_PI * (libm::erf(r) - libm::erf(l))).ln();
    }
    // same sign: reflect onto the positive half-line
    let (lo, hi) = if l >= 0.0 { (l, r) } else { (-r, -l) };
    // ∫_lo^hi e^{-t²} dt = e^{-lo²} ∫_0^{hi-lo} e^{-u(u+2 lo)} du
    let width = hi - lo;
    let scaled = if width * (hi + lo) <= 2.0 {
        let (x, w) = quadrature::gauss_legendre(32);
        quadrature::integrate(|u| (-u * (u + 2.0 * lo)).exp(), 0.0, width, &x, &w)
    } else {
        0.5 * SQRT_PI * (erfcx(lo) - (lo * lo - hi * hi).exp() * erfcx(hi))
    };
    -lo * lo + scaled.ln()
}
