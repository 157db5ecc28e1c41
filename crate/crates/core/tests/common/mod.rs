//! Independent oracles for one-dimensional p-Laplacian problems on (0, 1).
#![allow(dead_code)]

use std::f64::consts::PI;

fn phi(t: f64, p: f64) -> f64 {
    t.signum() * t.abs().powf(p - 1.0)
}

/// Closed form `(p-1) (2π / (p sin(π/p)))^p` of λ₁ on (0, 1).
pub fn lambda1_closed_form(p: f64) -> f64 {
    (p - 1.0) * (2.0 * PI / (p * (PI / p).sin())).powf(p)
}

/// Position of the peak of the solution of `-(φ_p(u'))' = λ φ_p(u)`, `u(0) = 0`, `u'(0) = 1`.
///
/// RK4 in `(u, w = φ_p(u'))` until `w` changes sign; the crossing is located by linear
/// interpolation.
fn peak(lambda: f64, p: f64, steps_per_unit: usize) -> f64 {
    let q = 1.0 / (p - 1.0);
    let rhs = |s: [f64; 2]| [s[1].signum() * s[1].abs().powf(q), -lambda * phi(s[0], p)];
    let h = 1.0 / steps_per_unit as f64;
    let mut s = [0.0, 1.0];
    let mut x = 0.0;
    loop {
        let k1 = rhs(s);
        let k2 = rhs([s[0] + 0.5 * h * k1[0], s[1] + 0.5 * h * k1[1]]);
        let k3 = rhs([s[0] + 0.5 * h * k2[0], s[1] + 0.5 * h * k2[1]]);
        let k4 = rhs([s[0] + h * k3[0], s[1] + h * k3[1]]);
        let next = [
            s[0] + h / 6.0 * (k1[0] + 2.0 * k2[0] + 2.0 * k3[0] + k4[0]),
            s[1] + h / 6.0 * (k1[1] + 2.0 * k2[1] + 2.0 * k3[1] + k4[1]),
        ];
        if next[1] <= 0.0 {
            return x + h * s[1] / (s[1] - next[1]);
        }
        s = next;
        x += h;
        if x > 1.0 {
            // beyond the interval; only the comparison with 1/2 matters
            return x;
        }
    }
}

/// λ₁ on (0, 1) by shooting: bisection on λ until the peak sits at x = 1/2.
pub fn lambda1_shooting(p: f64) -> f64 {
    let (mut lo, mut hi) = (1e-3f64, 1e4f64);
    for _ in 0..100 {
        let mid = (lo * hi).sqrt();
        if peak(mid, p, 200_000) > 0.5 {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi / lo - 1.0 < 1e-12 {
            break;
        }
    }
    0.5 * (lo + hi)
}

/// Solution of `-(φ_p(u'))' = 1` on (0, 1) with zero boundary values.
pub fn torsion(p: f64, x: f64) -> f64 {
    let pc = p / (p - 1.0);
    (0.5f64.powf(pc) - (0.5 - x).abs().powf(pc)) / pc
}
