//! Cellwise verifiers: the Picone identity, the Díaz–Saá integrals, the first-order field
//! `S = ∇v/v`, and nonnegativity of `Q` read off from a field.
//!
//! Ratios like `u/v` are evaluated at element centroids (P1 midpoint values) with the
//! element gradients, so the product and chain rules hold exactly at cell level.

use serde::Serialize;

use crate::corpus::Corpus;
use crate::dirichlet::{hat_residuals, DirichletProblem, DirichletSolution, Boundary};
use crate::discretization::{check_same, elem_grad, energy_raw, Elem, GridFunction, Space};
use crate::error::{Error, Result};
use crate::operator::{AOperator, Vec2};

pub const DEFAULT_FLOOR: f64 = 1e-10;

fn centroid(e: &Elem, u: &[f64]) -> f64 {
    e.nodes[..e.nv].iter().map(|&i| u[i]).sum::<f64>() / e.nv as f64
}

fn dot(a: Vec2, b: Vec2) -> f64 {
    a[0] * b[0] + a[1] * b[1]
}

fn touches_constrained(grid: &crate::discretization::Grid, e: &Elem) -> bool {
    e.nodes[..e.nv].iter().any(|&i| !grid.is_free(i))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PiconeReport {
    pub max_lr_gap: f64,
    pub min_l: f64,
    pub integral_l: f64,
    /// `Q[u]` with the supplied potential.
    pub energy: f64,
    /// `Q[u] - ∫L`; zero for a solution `v` of `Q'[v] = 0`, nonnegative for a supersolution.
    pub slack: f64,
    pub functional_gap: f64,
    /// Elements evaluated and the per-element `L`, `R` values.
    pub elements: Vec<usize>,
    pub l_field: Vec<f64>,
    pub r_field: Vec<f64>,
}

/// `L(u,v)` and `R(u,v)` per element.
///
/// `L = |∇u|^p + (p-1)(u/v)^p |∇v|^p - p (u/v)^{p-1} A(∇v)·∇u` and
/// `R = |∇u|^p - A(∇v)·∇(u^p / v^{p-1})` with the product-rule gradient
/// `∇(u^p/v^{p-1}) = p (u/v)^{p-1} ∇u - (p-1)(u/v)^p ∇v`.
pub fn picone_check(op: &AOperator, pot: &GridFunction, u: &GridFunction, v: &GridFunction, floor: f64) -> Result<PiconeReport> {
    check_same(u, v)?;
    check_same(pot, u)?;
    let grid = u.grid();
    let p = op.p();
    if u.values().iter().any(|&x| x < 0.0) {
        return Err(Error::invalid("Picone needs u >= 0"));
    }
    let skip_boundary = v.space() == Space::W1p0;
    let (uv, vv) = (u.values(), v.values());
    let mut elements = Vec::new();
    let mut l_field = Vec::new();
    let mut r_field = Vec::new();
    for (k, e) in grid.elems().iter().enumerate() {
        if skip_boundary && touches_constrained(grid, e) {
            continue;
        }
        if e.nodes[..e.nv].iter().any(|&i| vv[i] < floor) {
            return Err(Error::invalid(format!("v falls below the positivity floor {floor:e} on element {k}")));
        }
        let um = centroid(e, uv);
        let vm = centroid(e, vv);
        let gu = elem_grad(e, uv);
        let gv = elem_grad(e, vv);
        let t = um / vm;
        let av = op.a_raw(e.cell, gv);
        let nu = op.norm_p(e.cell, gu);
        let l = nu + (p - 1.0) * t.powf(p) * op.norm_p(e.cell, gv) - p * t.powf(p - 1.0) * dot(av, gu);
        let gphi = [
            p * t.powf(p - 1.0) * gu[0] - (p - 1.0) * t.powf(p) * gv[0],
            p * t.powf(p - 1.0) * gu[1] - (p - 1.0) * t.powf(p) * gv[1],
        ];
        let r = nu - dot(av, gphi);
        elements.push(k);
        l_field.push(l);
        r_field.push(r);
    }
    let elems = grid.elems();
    let max_lr_gap = l_field.iter().zip(&r_field).map(|(l, r)| (l - r).abs()).fold(0.0, f64::max);
    let min_l = l_field.iter().copied().fold(f64::INFINITY, f64::min);
    let integral_l: f64 = elements.iter().zip(&l_field).map(|(&k, l)| elems[k].measure * l).sum();
    let energy = energy_raw(op, grid, pot.values(), uv).total;
    let slack = energy - integral_l;
    Ok(PiconeReport {
        max_lr_gap,
        min_l: if min_l.is_finite() { min_l } else { 0.0 },
        integral_l,
        energy,
        slack,
        functional_gap: slack.abs(),
        elements,
        l_field,
        r_field,
    })
}

/// A nonnegative solution of `Q'_V[w] = g` with its data.
#[derive(Debug, Clone)]
pub struct SolutionData {
    pub w: GridFunction,
    pub g: GridFunction,
    pub v: GridFunction,
}

impl From<&DirichletSolution> for SolutionData {
    fn from(s: &DirichletSolution) -> Self {
        Self { w: s.u.clone(), g: s.problem.g.clone(), v: s.problem.v.clone() }
    }
}

impl SolutionData {
    /// Eigenpair `(λ, w)` viewed as a solution with `g = λ w^{p-1}`.
    pub fn eigen(w: &GridFunction, lambda: f64, v: &GridFunction, p: f64) -> Self {
        Self { w: w.clone(), g: w.map(|x| lambda * x.abs().powf(p - 1.0)), v: v.clone() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DiazSaaReport {
    pub h: f64,
    pub i_h: f64,
    pub l_h: f64,
    pub constant: f64,
    /// `I_h - C L_h`.
    pub value: f64,
}

/// Largest hat-tested residual accepted as "converged" for the Díaz–Saá inputs.
const SOLUTION_TOL: f64 = 1e-6;

/// `I_h - C L_h` for two nonnegative solutions, `C` the operator's empirical convexity
/// constant (seeded sampling, `samples` draws).
pub fn diaz_saa_integrand(op: &AOperator, s1: &SolutionData, s2: &SolutionData, h: f64, samples: usize) -> Result<DiazSaaReport> {
    if !(h >= 0.0) {
        return Err(Error::invalid("h must be nonnegative"));
    }
    check_same(&s1.w, &s2.w)?;
    let grid = s1.w.grid();
    let p = op.p();
    for (k, s) in [s1, s2].iter().enumerate() {
        check_same(&s.w, &s.g)?;
        check_same(&s.w, &s.v)?;
        if s.w.values().iter().any(|&x| x < 0.0) {
            return Err(Error::invalid(format!("solution {} is not nonnegative", k + 1)));
        }
        let prob = DirichletProblem::new(op.clone(), s.v.clone(), s.g.clone(), Boundary::Zero, grid.clone())?;
        let r = hat_residuals(&prob, &s.w)?;
        let m = grid.mass();
        let worst = (0..grid.num_nodes())
            .filter(|&i| grid.is_free(i) && m[i] > 0.0)
            .map(|i| (r[i] / m[i]).abs())
            .fold(0.0, f64::max);
        if worst > SOLUTION_TOL * (1.0 + s.g.sup_norm() + s.v.sup_norm()) {
            return Err(Error::invalid(format!("solution {} is not converged (nodal residual {worst:e})", k + 1)));
        }
    }
    let (w1, w2) = (s1.w.values(), s2.w.values());
    if h == 0.0 {
        let ok = (0..grid.num_nodes()).filter(|&i| grid.is_free(i)).all(|i| w1[i] > 0.0 && w2[i] > 0.0);
        if !ok {
            return Err(Error::invalid("h = 0 needs strictly positive solutions"));
        }
    }
    let m = grid.mass();
    let mut i_h = 0.0;
    for i in 0..grid.num_nodes() {
        let a = w1[i] + h;
        let b = w2[i] + h;
        if a <= 0.0 || b <= 0.0 {
            continue;
        }
        let f1 = (s1.g.values()[i] - s1.v.values()[i] * w1[i].powf(p - 1.0)) / a.powf(p - 1.0);
        let f2 = (s2.g.values()[i] - s2.v.values()[i] * w2[i].powf(p - 1.0)) / b.powf(p - 1.0);
        i_h += m[i] * (f1 - f2) * (a.powf(p) - b.powf(p));
    }
    let mut l_h = 0.0;
    for e in grid.elems() {
        let a = centroid(e, w1) + h;
        let b = centroid(e, w2) + h;
        if a <= 0.0 || b <= 0.0 {
            continue;
        }
        let g1 = elem_grad(e, w1);
        let g2 = elem_grad(e, w2);
        let x1 = [g1[0] / a, g1[1] / a];
        let x2 = [g2[0] / b, g2[1] / b];
        let br = a.powf(p) * op.bracket_raw(e.cell, x1, x2) + b.powf(p) * op.bracket_raw(e.cell, x2, x1);
        l_h += e.measure * br;
    }
    let constant = op.check_structure(samples, 0).convexity_constant;
    Ok(DiazSaaReport { h, i_h, l_h, constant, value: i_h - constant * l_h })
}

/// Box `[lo, hi]` of hats tested by the field residual.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Window {
    pub lo: Vec2,
    pub hi: Vec2,
}

impl Window {
    /// Middle half of the grid box in every direction.
    pub fn middle_half(grid: &crate::discretization::Grid) -> Self {
        let (lo, hi) = (grid.lo(), grid.hi());
        let q = |k: usize| 0.25 * (hi[k] - lo[k]);
        Self { lo: [lo[0] + q(0), lo[1] + q(1)], hi: [hi[0] - q(0), hi[1] - q(1)] }
    }

    fn contains(&self, x: Vec2, dim: usize) -> bool {
        (0..dim).all(|k| x[k] >= self.lo[k] - 1e-12 && x[k] <= self.hi[k] + 1e-12)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FirstOrderField {
    /// `S = ∇v / v` per element (centroid value of `v`).
    pub s: Vec<Vec2>,
    /// Largest weak residual over the tested hats.
    pub residual: f64,
    pub window: Window,
    pub tested_hats: usize,
}

/// `S = ∇v/v` and the hat-tested residual of `-div A(S) + (1-p) A(S)·S + V = 0`.
///
/// Without an explicit window, all free hats are tested when `v` is positive on the
/// boundary; for `W1p0` fields (which vanish there and make `S` blow up like `1/h`) only
/// hats in the middle half of the box are tested.
pub fn field_from_solution(op: &AOperator, pot: &GridFunction, v: &GridFunction, window: Option<Window>) -> Result<FirstOrderField> {
    check_same(pot, v)?;
    let grid = v.grid();
    let p = op.p();
    let vv = v.values();
    let window = match window {
        Some(w) => w,
        None if v.space() == Space::W1p0 => Window::middle_half(grid),
        None => Window { lo: grid.lo(), hi: grid.hi() },
    };
    let dim = grid.dim();
    let tested: Vec<bool> = (0..grid.num_nodes()).map(|i| grid.is_free(i) && window.contains(grid.coord(i), dim)).collect();
    let mut s = Vec::with_capacity(grid.elems().len());
    let mut res = vec![0.0; grid.num_nodes()];
    for e in grid.elems() {
        let vm = centroid(e, vv);
        let needed = e.nodes[..e.nv].iter().any(|&i| tested[i]);
        if vm <= 0.0 {
            if needed {
                return Err(Error::invalid("v must be strictly positive on the tested region"));
            }
            s.push([0.0, 0.0]);
            continue;
        }
        let gv = elem_grad(e, vv);
        let si = [gv[0] / vm, gv[1] / vm];
        s.push(si);
        if !needed {
            continue;
        }
        let a = op.a_raw(e.cell, si);
        let quad = (1.0 - p) * dot(a, si) * e.measure / e.nv as f64;
        for k in 0..e.nv {
            res[e.nodes[k]] += e.measure * dot(a, e.grads[k]) + quad;
        }
    }
    if let Some(&bad) = (0..grid.num_nodes()).find(|&i| tested[i] && vv[i] <= 0.0).as_ref() {
        return Err(Error::invalid(format!("v is not positive at node {bad}")));
    }
    let m = grid.mass();
    let mut residual = 0.0f64;
    let mut count = 0;
    for i in 0..grid.num_nodes() {
        if tested[i] {
            residual = residual.max((res[i] + m[i] * pot.values()[i]).abs());
            count += 1;
        }
    }
    Ok(FirstOrderField { s, residual, window, tested_hats: count })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NonnegativityReport {
    /// `min_ψ Q[ψ]` over the corpus.
    pub min_q: f64,
    /// `min_ψ Q[ψ] / ‖ψ‖_p^p`.
    pub min_q_normalized: f64,
    /// Corpus index attaining `min_q_normalized`.
    pub argmin: usize,
    /// `min_ψ ∫ (|∇ψ|^p + (p-1)|ψ|^p |S|^p - p |ψ|^{p-2}ψ A(S)·∇ψ) / ‖ψ‖_p^p`, nonnegative by Young.
    pub min_young_slack: f64,
    /// Largest cellwise excess of `|A(S)·∇ψ|` over `|S|^{p-1} |∇ψ|` (generalized Hölder).
    pub holder_violation: f64,
    pub corpus_size: usize,
}

/// Corpus minimum of `Q` and the Young-chain slack for the field `S`.
pub fn nonnegativity_from_field(op: &AOperator, field: &FirstOrderField, pot: &GridFunction, corpus: &Corpus) -> Result<NonnegativityReport> {
    let grid = &corpus.grid;
    if !pot.grid().same_geometry(grid) {
        return Err(Error::GridMismatch("potential and corpus grids differ".into()));
    }
    if field.s.len() != grid.elems().len() {
        return Err(Error::GridMismatch("field and corpus grids differ".into()));
    }
    let p = op.p();
    let m = grid.mass();
    let pv = pot.values();
    let per = corpus.map(|mem, els, u| {
        let mut grad_term = 0.0;
        let mut young = 0.0;
        let mut holder = 0.0f64;
        for &k in els {
            let e = &grid.elems()[k];
            let gu = elem_grad(e, u);
            let s = field.s[k];
            let nu = op.norm_p(e.cell, gu);
            grad_term += e.measure * nu;
            let um = centroid(e, u);
            let a = op.a_raw(e.cell, s);
            let ns = op.norm_p(e.cell, s);
            let ad = dot(a, gu);
            young += e.measure * (nu + (p - 1.0) * um.abs().powf(p) * ns - p * um.abs().powf(p - 2.0) * um * ad);
            let bound = ns.powf((p - 1.0) / p) * nu.powf(1.0 / p);
            holder = holder.max((ad.abs() - bound) / (1.0 + bound));
        }
        let mut pot_term = 0.0;
        let mut norm = 0.0;
        for &(i, x) in &mem.entries {
            let a = x.abs().powf(p);
            pot_term += m[i] * pv[i] * a;
            norm += m[i] * a;
        }
        (grad_term + pot_term, norm, young, holder)
    });
    let mut rep = NonnegativityReport {
        min_q: f64::INFINITY,
        min_q_normalized: f64::INFINITY,
        argmin: 0,
        min_young_slack: f64::INFINITY,
        holder_violation: 0.0,
        corpus_size: per.len(),
    };
    for (k, (q, n, y, hv)) in per.into_iter().enumerate() {
        if n <= 0.0 {
            continue;
        }
        rep.min_q = rep.min_q.min(q);
        if q / n < rep.min_q_normalized {
            rep.min_q_normalized = q / n;
            rep.argmin = k;
        }
        rep.min_young_slack = rep.min_young_slack.min(y / n);
        rep.holder_violation = rep.holder_violation.max(hv);
    }
    Ok(rep)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::discretization::Grid;
    use std::sync::Arc;

    fn line(n: usize) -> Arc<Grid> {
        Arc::new(Grid::interval(0.0, 1.0, n).unwrap())
    }

    #[test]
    fn picone_equal_and_multiple() {
        let g = line(41);
        let op = AOperator::p_laplacian(3.0, 1).unwrap();
        let v = GridFunction::from_fn(&g, Space::W1p, |x| 1.0 + x[0] * (1.0 - x[0]));
        let zero = GridFunction::constant(&g, 0.0);
        for k in [1.0, 2.0] {
            let r = picone_check(&op, &zero, &v.scaled(k), &v, DEFAULT_FLOOR).unwrap();
            assert!(r.l_field.iter().all(|l| l.abs() < 1e-12));
            assert!(r.max_lr_gap < 1e-12);
        }
    }

    #[test]
    fn picone_rejects_small_v() {
        let g = line(11);
        let op = AOperator::p_laplacian(2.0, 1).unwrap();
        let zero = GridFunction::constant(&g, 0.0);
        let u = GridFunction::constant(&g, 1.0);
        assert!(picone_check(&op, &zero, &u, &zero, DEFAULT_FLOOR).is_err());
    }

    #[test]
    fn constant_field() {
        let g = line(21);
        let op = AOperator::p_laplacian(2.5, 1).unwrap();
        let v = GridFunction::constant(&g, 3.0);
        let f = field_from_solution(&op, &GridFunction::constant(&g, 0.0), &v, None).unwrap();
        assert!(f.s.iter().all(|s| s[0] == 0.0));
        assert_eq!(f.residual, 0.0);
        let f2 = field_from_solution(&op, &GridFunction::constant(&g, 0.0), &v.scaled(2.0), None).unwrap();
        assert_eq!(f.s, f2.s);
    }

    #[test]
    fn zero_field_gives_nonnegative_q() {
        let g = line(21);
        let op = AOperator::p_laplacian(2.0, 1).unwrap();
        let zero = GridFunction::constant(&g, 0.0);
        let f = field_from_solution(&op, &zero, &GridFunction::constant(&g, 1.0), None).unwrap();
        let r = nonnegativity_from_field(&op, &f, &zero, &Corpus::standard(&g)).unwrap();
        assert!(r.min_q >= 0.0);
        assert!(r.min_young_slack >= 0.0);
    }
}
