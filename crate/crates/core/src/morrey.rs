//! Discrete Morrey norms `‖f‖_{M^q(p;ω)}` and the empirical Morrey–Adams constant.
//!
//! The supremum over balls is taken on a lattice: centers on grid nodes, radii
//! `h·2^k < diam(ω)`. The result is therefore a lower estimate of the true norm.
//! Cell integrals use the average of `|f|` over the cell's corner nodes; in 2D the
//! ball–cell overlap of partially covered cells is counted on a 16×16 lattice.

use std::sync::Arc;

use rayon::prelude::*;
use serde::Serialize;

use crate::corpus::Corpus;
use crate::discretization::{elem_grad, Grid, GridFunction};
use crate::error::{Error, Result};

const SUB: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    PLtN,
    PEqN,
    PGtN,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MorreyNorm {
    pub q: f64,
    pub p: f64,
    pub value: f64,
    pub regime: Regime,
    /// Ball realizing the value (absent for the `L¹` regime).
    pub center: Option<[f64; 2]>,
    pub radius: Option<f64>,
}

pub fn regime(p: f64, n: usize) -> Regime {
    let n = n as f64;
    if p < n {
        Regime::PLtN
    } else if p == n {
        Regime::PEqN
    } else {
        Regime::PGtN
    }
}

fn cell_averages(f: &GridFunction) -> Vec<f64> {
    let g = f.grid();
    (0..g.num_cells())
        .map(|c| {
            let nodes = g.cell_nodes(c);
            nodes.iter().map(|&i| f.values()[i].abs()).sum::<f64>() / nodes.len() as f64
        })
        .collect()
}

/// `∫_{ω∩B_r(y)} |f|` from cell averages.
fn ball_integral(g: &Grid, avg: &[f64], y: [f64; 2], r: f64) -> f64 {
    let (lo, h) = (g.lo(), g.h());
    let n = g.resolution();
    if g.dim() == 1 {
        let i0 = (((y[0] - r - lo[0]) / h[0]).floor().max(0.0) as usize).min(n[0] - 2);
        let i1 = (((y[0] + r - lo[0]) / h[0]).ceil().max(0.0) as usize).min(n[0] - 1);
        let mut s = 0.0;
        for c in i0..i1 {
            let a = lo[0] + c as f64 * h[0];
            let b = a + h[0];
            let len = (b.min(y[0] + r) - a.max(y[0] - r)).max(0.0);
            s += avg[c] * len;
        }
        return s;
    }
    let r2 = r * r;
    let cx0 = (((y[0] - r - lo[0]) / h[0]).floor().max(0.0) as usize).min(n[0] - 2);
    let cx1 = (((y[0] + r - lo[0]) / h[0]).ceil().max(0.0) as usize).min(n[0] - 1);
    let cy0 = (((y[1] - r - lo[1]) / h[1]).floor().max(0.0) as usize).min(n[1] - 2);
    let cy1 = (((y[1] + r - lo[1]) / h[1]).ceil().max(0.0) as usize).min(n[1] - 1);
    let area = h[0] * h[1];
    let mut s = 0.0;
    for j in cy0..cy1 {
        let ya = lo[1] + j as f64 * h[1];
        let yb = ya + h[1];
        for i in cx0..cx1 {
            let a = avg[j * (n[0] - 1) + i];
            if a == 0.0 {
                continue;
            }
            let xa = lo[0] + i as f64 * h[0];
            let xb = xa + h[0];
            let nx = y[0].clamp(xa, xb) - y[0];
            let ny = y[1].clamp(ya, yb) - y[1];
            if nx * nx + ny * ny >= r2 {
                continue;
            }
            let fx = (y[0] - xa).abs().max((y[0] - xb).abs());
            let fy = (y[1] - ya).abs().max((y[1] - yb).abs());
            if fx * fx + fy * fy <= r2 {
                s += a * area;
                continue;
            }
            let mut cnt = 0usize;
            for sj in 0..SUB {
                let py = ya + (sj as f64 + 0.5) * h[1] / SUB as f64 - y[1];
                for si in 0..SUB {
                    let px = xa + (si as f64 + 0.5) * h[0] / SUB as f64 - y[0];
                    if px * px + py * py < r2 {
                        cnt += 1;
                    }
                }
            }
            s += a * area * cnt as f64 / (SUB * SUB) as f64;
        }
    }
    s
}

/// Morrey norm of `f` for the exponent pair `(p, q)` on the whole grid box.
///
/// For `p > n` the space is `L¹` and `q` is reported as 1 whatever was passed.
pub fn morrey_norm(f: &GridFunction, p: f64, q: f64) -> Result<MorreyNorm> {
    let g = f.grid();
    let n = g.dim();
    let nf = n as f64;
    if !(p > 1.0 && p.is_finite()) {
        return Err(Error::invalid(format!("p must satisfy 1 < p < inf, got {p}")));
    }
    let reg = regime(p, n);
    match reg {
        Regime::PLtN if !(q > nf / p) => {
            return Err(Error::invalid(format!("regime p < n requires q > n/p = {}, got q = {q}", nf / p)))
        }
        Regime::PEqN if !(q > nf) => return Err(Error::invalid(format!("regime p = n requires q > n = {nf}, got q = {q}"))),
        _ => {}
    }
    let avg = cell_averages(f);
    if reg == Regime::PGtN {
        let cell = if n == 1 { g.h()[0] } else { g.h()[0] * g.h()[1] };
        let value = avg.iter().sum::<f64>() * cell;
        return Ok(MorreyNorm { q: 1.0, p, value, regime: reg, center: None, radius: None });
    }
    let diam = g.diameter();
    let qp = q / (q - 1.0);
    let mut radii = Vec::new();
    let mut r = g.h()[0].min(if n == 2 { g.h()[1] } else { f64::INFINITY });
    while r < diam {
        radii.push(r);
        r *= 2.0;
    }
    let weight = |r: f64| match reg {
        Regime::PLtN => r.powf(-nf / qp),
        _ => (diam / r).ln().powf(nf / qp),
    };
    let best: Vec<(f64, usize, f64)> = (0..g.num_nodes())
        .into_par_iter()
        .map(|i| {
            let y = g.coord(i);
            let mut b = (0.0f64, i, 0.0f64);
            for &r in &radii {
                let v = weight(r) * ball_integral(g, &avg, y, r);
                if v > b.0 {
                    b = (v, i, r);
                }
            }
            b
        })
        .collect();
    let mut top = (0.0f64, 0usize, 0.0f64);
    for b in best {
        if b.0 > top.0 {
            top = b;
        }
    }
    let (center, radius) = if top.0 > 0.0 { (Some(g.coord(top.1)), Some(top.2)) } else { (None, None) };
    Ok(MorreyNorm { q, p, value: top.0, regime: reg, center, radius })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AdamsReport {
    /// `∫ |V| |u|^p`.
    pub lhs: f64,
    /// `δ ‖∇u‖_p^p`.
    pub rhs_gradient: f64,
    /// `δ^{-n/(pq-n)} ‖V‖^{pq/(pq-n)} ‖u‖_p^p`.
    pub rhs_factor: f64,
    /// Smallest constant closing the inequality on this pair.
    pub c_emp: f64,
    pub morrey_norm: f64,
    pub q: f64,
    pub delta: f64,
}

/// Empirical Morrey–Adams constant for one `(V, u)` pair.
pub fn morrey_adams_check(v: &GridFunction, u: &GridFunction, p: f64, q: f64, delta: f64) -> Result<AdamsReport> {
    let norm = morrey_norm(v, p, q)?;
    morrey_adams_check_with_norm(v, u, p, norm.q, delta, norm.value)
}

pub(crate) fn morrey_adams_check_with_norm(
    v: &GridFunction,
    u: &GridFunction,
    p: f64,
    q: f64,
    delta: f64,
    vnorm: f64,
) -> Result<AdamsReport> {
    let g = u.grid();
    if !v.grid().same_geometry(g) {
        return Err(Error::GridMismatch("V and u live on different grids".into()));
    }
    let n = g.dim() as f64;
    if !(p * q > n) {
        return Err(Error::invalid(format!("Morrey–Adams needs pq > n, got pq = {}", p * q)));
    }
    if !(delta > 0.0) {
        return Err(Error::invalid("delta must be positive"));
    }
    if (0..g.num_nodes()).any(|i| !g.is_free(i) && u.values()[i] != 0.0) {
        return Err(Error::invalid("u must vanish off the active region (W1p0)"));
    }
    let m = g.mass();
    let lhs: f64 = (0..g.num_nodes()).map(|i| m[i] * v.values()[i].abs() * u.values()[i].abs().powf(p)).sum();
    let grad: f64 = g
        .elems()
        .iter()
        .map(|e| {
            let d = elem_grad(e, u.values());
            e.measure * d[0].hypot(d[1]).powf(p)
        })
        .sum();
    let un: f64 = (0..g.num_nodes()).map(|i| m[i] * u.values()[i].abs().powf(p)).sum();
    let e = p * q - n;
    let rhs_factor = delta.powf(-n / e) * vnorm.powf(p * q / e) * un;
    let rhs_gradient = delta * grad;
    let excess = (lhs - rhs_gradient).max(0.0);
    let c_emp = if excess == 0.0 {
        0.0
    } else if rhs_factor > 0.0 {
        excess / rhs_factor
    } else {
        f64::INFINITY
    };
    Ok(AdamsReport { lhs, rhs_gradient, rhs_factor, c_emp, morrey_norm: vnorm, q, delta })
}

/// Functions used for the empirical constant: the smooth part of the standard corpus.
pub(crate) fn adams_corpus(grid: &Arc<Grid>) -> Vec<GridFunction> {
    let c = Corpus::smooth(grid);
    c.members.iter().map(|m| m.to_function(grid)).collect()
}
