//! Quasilinear Dirichlet problems `Q'_{p,A,V}[u] = g`, the monotone sub/supersolution
//! iteration, and the comparison / maximum-principle harness.
//!
//! Solutions minimize `J[u] = Q[u] - p ∫ g u` (lumped), whose first variation is
//! `p (Q'[u] - g)`.

use std::sync::Arc;

use serde::Serialize;

use crate::discretization::{FreeIndex, Grid, GridFunction, Objective, Space};
use crate::eigensolver::{principal_eigen, SolverConfig};
use crate::error::{Error, Result};
use crate::linalg::Cholesky;
use crate::operator::AOperator;

#[derive(Debug, Clone, PartialEq)]
pub enum Boundary {
    Zero,
    /// Values on boundary-mask nodes are taken from this function.
    Prescribed(GridFunction),
}

#[derive(Debug, Clone)]
pub struct DirichletProblem {
    pub op: AOperator,
    pub v: GridFunction,
    pub g: GridFunction,
    pub boundary: Boundary,
    pub grid: Arc<Grid>,
}

impl DirichletProblem {
    pub fn new(op: AOperator, v: GridFunction, g: GridFunction, boundary: Boundary, grid: Arc<Grid>) -> Result<Self> {
        for (name, f) in [("potential", &v), ("right-hand side", &g)] {
            if !f.grid().same_geometry(&grid) {
                return Err(Error::GridMismatch(format!("{name} and grid differ in geometry")));
            }
        }
        if let Boundary::Prescribed(b) = &boundary {
            if !b.grid().same_geometry(&grid) {
                return Err(Error::GridMismatch("boundary data and grid differ in geometry".into()));
            }
        }
        if op.dim() != grid.dim() {
            return Err(Error::invalid("operator and grid dimensions differ"));
        }
        if let Some(n) = op.cell_count() {
            if n != grid.num_cells() {
                return Err(Error::GridMismatch("operator coefficients do not match grid cells".into()));
            }
        }
        Ok(Self { op, v, g, boundary, grid })
    }

    /// Nodal values on constrained nodes (zero off the boundary mask).
    fn boundary_values(&self) -> Vec<f64> {
        let bm = self.grid.boundary_mask();
        match &self.boundary {
            Boundary::Zero => vec![0.0; self.grid.num_nodes()],
            Boundary::Prescribed(b) => (0..self.grid.num_nodes()).map(|i| if bm[i] { b.values()[i] } else { 0.0 }).collect(),
        }
    }

    fn with_data(&self, v: GridFunction, g: GridFunction) -> Self {
        Self { op: self.op.clone(), v, g, boundary: self.boundary.clone(), grid: self.grid.clone() }
    }

    fn lin(&self) -> Vec<f64> {
        let p = self.op.p();
        self.grid.mass().iter().zip(self.g.values()).map(|(m, g)| p * m * g).collect()
    }
}

#[derive(Debug, Clone)]
pub struct DirichletSolution {
    pub u: GridFunction,
    /// Lumped `L^{p'}` norm of `Q'[u] - g` on free nodes.
    pub residual: f64,
    pub iterations: usize,
    /// Principal eigenvalue computed for the coercivity check, when one was needed.
    pub lambda1: Option<f64>,
    pub problem: DirichletProblem,
}

/// `1e-8 (1 + ‖g‖ + ‖|V| |u|^{p-1}‖)` in the lumped `L^{p'}` norm, re-evaluated at each iterate.
pub(crate) fn relative_tol(cfg: &SolverConfig, grid: &Grid, p: f64, pot: &[f64], rhs: &[f64], u: &[f64]) -> f64 {
    if let Some(t) = cfg.tol {
        return t;
    }
    let q = p / (p - 1.0);
    let m = grid.mass();
    let norm = |f: &dyn Fn(usize) -> f64| -> f64 {
        (0..m.len()).filter(|&i| grid.is_free(i)).map(|i| m[i] * f(i).abs().powf(q)).sum::<f64>().powf(1.0 / q)
    };
    let gn = norm(&|i| rhs[i]);
    let vn = norm(&|i| pot[i].abs() * u[i].abs().powf(p - 1.0));
    1e-8 * (1.0 + gn + vn)
}

/// Minimizer of `J` over the constrained space.
///
/// With zero boundary data and a potential that is negative somewhere, the principal
/// eigenvalue is computed first; `λ₁ ≤ 0` is a coercivity failure.
pub fn solve_dirichlet(prob: &DirichletProblem, cfg: &SolverConfig) -> Result<DirichletSolution> {
    let grid = &prob.grid;
    let negative = (0..grid.num_nodes()).any(|i| grid.is_free(i) && prob.v.values()[i] < 0.0);
    let lambda1 = if negative {
        // only the sign of λ₁ matters here, so the residual is measured against the size of V
        let vmax = prob.v.values().iter().fold(0.0f64, |a, b| a.max(b.abs()));
        let mut c = cfg.clone();
        c.restarts = 1;
        c.tol = Some(cfg.tol.unwrap_or(1e-8 * (1.0 + vmax)));
        let r = principal_eigen(&prob.op, &prob.v, grid, &c)?;
        if r.lambda1 <= 0.0 {
            return Err(Error::CoercivityFailure { lambda1: r.lambda1 });
        }
        Some(r.lambda1)
    } else {
        None
    };
    let mut u = prob.boundary_values();
    let idx = grid.free_index();
    let lin = prob.lin();
    initial_guess(prob, &idx, &lin, &mut u);
    let stats = minimize(&prob.op, grid, prob.v.values(), Some(&lin), prob.g.values(), &idx, &mut u, cfg)?;
    Ok(DirichletSolution {
        u: GridFunction::from_parts(grid.clone(), u, if matches!(prob.boundary, Boundary::Zero) { Space::W1p0 } else { Space::W1p }),
        residual: stats.residual,
        iterations: stats.iterations,
        lambda1,
        problem: prob.clone(),
    })
}

/// Best multiple of the `p = 2` solution with `|V|` potential, which is cheap and has the
/// right shape; the boundary part of `u` is left untouched.
fn initial_guess(prob: &DirichletProblem, idx: &FreeIndex, lin: &[f64], u: &mut [f64]) {
    if idx.len() == 0 || lin.iter().all(|&b| b == 0.0) {
        return;
    }
    let grid = &prob.grid;
    let lap = AOperator::p_laplacian(2.0, grid.dim()).expect("p = 2 is valid");
    let vabs: Vec<f64> = prob.v.values().iter().map(|x| x.abs()).collect();
    let obj = Objective { op: &lap, grid, pot: &vabs, lin: None, eps: 0.0 };
    let zero = vec![0.0; u.len()];
    let Ok(c) = obj.hessian(&zero, idx, &vabs, 0.0).cholesky() else { return };
    // rhs in the p = 2 scaling, with the boundary lift moved to the right-hand side
    let mut b: Vec<f64> = idx.nodes.iter().map(|&i| 2.0 * lin[i] / prob.op.p()).collect();
    let mut lift = vec![0.0; u.len()];
    obj.gradient(u, &mut lift);
    for (k, &i) in idx.nodes.iter().enumerate() {
        b[k] -= lift[i];
    }
    c.solve(&mut b);
    let mut w = vec![0.0; u.len()];
    for (k, &i) in idx.nodes.iter().enumerate() {
        w[i] = b[k];
    }
    // J(u_b + t w) along t, sampled on a coarse log ladder
    let j = Objective { op: &prob.op, grid, pot: prob.v.values(), lin: Some(lin), eps: 0.0 };
    let base = u.to_vec();
    let at = |t: f64| -> f64 {
        let trial: Vec<f64> = base.iter().zip(&w).map(|(a, b)| a + t * b).collect();
        j.value(&trial)
    };
    let mut best = (at(1.0), 1.0);
    let mut t = 1.0 / 1024.0;
    while t <= 1024.0 {
        let v = at(t);
        if v.is_finite() && v < best.0 {
            best = (v, t);
        }
        t *= 2.0;
    }
    for (x, (a, b)) in u.iter_mut().zip(base.iter().zip(&w)) {
        *x = a + best.1 * b;
    }
}

pub(crate) struct MinStats {
    pub iterations: usize,
    pub residual: f64,
}

/// Lumped `L^{p'}` norm of `∇E / p` on the nodes of `idx`.
pub(crate) fn dual_residual(p: f64, grid: &Grid, idx: &FreeIndex, grad: &[f64]) -> f64 {
    let m = grid.mass();
    let q = p / (p - 1.0);
    idx.nodes
        .iter()
        .filter(|&&i| m[i] > 0.0)
        .map(|&i| m[i] * (grad[i] / (p * m[i])).abs().powf(q))
        .sum::<f64>()
        .powf(1.0 / q)
}

/// Damped Newton for `E(u) = Q_{pot}[u] - Σ lin_i u_i` over the nodes of `idx`; other
/// nodes keep their values. `rhs` is the nodal right-hand side behind `lin`, used only to
/// scale the stopping tolerance.
///
/// The Hessian uses the ε-smoothed operator derivative (the lagged-diffusion matrix for
/// `p < 2`). When it is not positive definite the negative part of the potential is dropped.
#[allow(clippy::too_many_arguments)]
pub(crate) fn minimize(
    op: &AOperator,
    grid: &Grid,
    pot: &[f64],
    lin: Option<&[f64]>,
    rhs: &[f64],
    idx: &FreeIndex,
    u: &mut [f64],
    cfg: &SolverConfig,
) -> Result<MinStats> {
    let p = op.p();
    let obj = Objective { op, grid, pot, lin, eps: 0.0 };
    let pos: Vec<f64> = pot.iter().map(|&x| x.max(0.0)).collect();
    let mut grad = vec![0.0; u.len()];
    let mut f0 = obj.value(u);
    let mut trace = vec![f0];
    let h = grid.h_max();
    let mut heps = if p == 2.0 { 0.0 } else { h };
    let mut fixed_pc: Option<Cholesky> = None;
    for it in 0..cfg.max_iters {
        obj.gradient(u, &mut grad);
        let res = dual_residual(p, grid, idx, &grad);
        let tol = relative_tol(cfg, grid, p, pot, rhs, u);
        if res <= tol || idx.len() == 0 {
            return Ok(MinStats { iterations: it, residual: res });
        }
        let g: Vec<f64> = idx.nodes.iter().map(|&i| grad[i]).collect();
        let mut d = g.clone();
        if p == 2.0 {
            if fixed_pc.is_none() {
                let c = obj.hessian(u, idx, pot, 0.0).cholesky().or_else(|_| obj.hessian(u, idx, &pos, 0.0).cholesky());
                fixed_pc = Some(c.map_err(|_| Error::Diverged {
                    iterations: it,
                    reason: "stiffness matrix is not positive definite".into(),
                    trace: trace.clone(),
                })?);
            }
            fixed_pc.as_ref().expect("factored").solve(&mut d);
        } else {
            let c = obj.hessian(u, idx, pot, heps).cholesky().or_else(|_| obj.hessian(u, idx, &pos, heps.max(1e-8)).cholesky());
            match c {
                Ok(c) => c.solve(&mut d),
                Err(_) => {
                    return Err(Error::Diverged {
                        iterations: it,
                        reason: "Newton matrix is not positive definite".into(),
                        trace,
                    })
                }
            }
        }
        d.iter_mut().for_each(|x| *x = -*x);
        let slope: f64 = g.iter().zip(&d).map(|(a, b)| a * b).sum();
        match energy_line_search(&obj, idx, u, &d, f0, slope) {
            Some((w, f)) => {
                u.copy_from_slice(&w);
                f0 = f;
                trace.push(f);
            }
            None => {
                if heps > cfg.eps_min {
                    heps = (heps * 0.1).max(cfg.eps_min);
                    continue;
                }
                return Err(Error::Diverged {
                    iterations: it,
                    reason: format!("line search stalled with residual {res:e} (tolerance {tol:e})"),
                    trace,
                });
            }
        }
        // tighten the smoothing as the iterate settles
        if p != 2.0 {
            heps = (heps * 0.5).max(cfg.eps_min);
        }
    }
    Err(Error::Diverged { iterations: cfg.max_iters, reason: format!("no convergence within {} iterations", cfg.max_iters), trace })
}

/// Strong Wolfe search along `d`, driven mostly by the directional derivative, which stays
/// informative after energy differences have sunk into roundoff.
fn energy_line_search(obj: &Objective, idx: &FreeIndex, u: &[f64], d: &[f64], f0: f64, slope: f64) -> Option<(Vec<f64>, f64)> {
    if !(slope < 0.0) {
        return None;
    }
    let mut gw = vec![0.0; u.len()];
    let mut trial = |tau: f64| -> (Vec<f64>, f64, f64) {
        let mut w = u.to_vec();
        for (k, &i) in idx.nodes.iter().enumerate() {
            w[i] += tau * d[k];
        }
        let f = obj.value(&w);
        if !f.is_finite() {
            return (w, f, f64::NAN);
        }
        obj.gradient(&w, &mut gw);
        let s = idx.nodes.iter().zip(d).map(|(&i, di)| gw[i] * di).sum();
        (w, f, s)
    };
    let c = 1e-4;
    let noise = 1e-13 * (1.0 + f0.abs());
    let (mut lo, mut s_lo) = (0.0, slope);
    let mut hi: Option<(f64, f64)> = None;
    let mut best: Option<(Vec<f64>, f64)> = None;
    let mut tau = 1.0;
    for _ in 0..60 {
        let (w, f, s) = trial(tau);
        let sufficient = f.is_finite() && (f <= f0 + c * tau * slope || f - f0 <= noise);
        if sufficient && s.abs() <= 0.9 * slope.abs() {
            return Some((w, f));
        }
        if sufficient && f < best.as_ref().map_or(f0, |b| b.1) {
            best = Some((w, f));
        }
        if !sufficient || s > 0.0 {
            hi = Some((tau, s));
        } else {
            lo = tau;
            s_lo = s;
        }
        tau = match hi {
            None => {
                // extrapolate the root of the directional derivative
                let t = lo * slope / (slope - s_lo);
                if t.is_finite() && t > lo { t.clamp(2.0 * lo, 64.0 * lo) } else { 2.0 * lo }
            }
            Some((t_hi, s_hi)) => {
                let width = t_hi - lo;
                let t = if s_hi.is_finite() && s_hi > s_lo { lo - s_lo * width / (s_hi - s_lo) } else { lo + 0.5 * width };
                t.clamp(lo + 0.1 * width, t_hi - 0.1 * width)
            }
        };
        if hi.is_some_and(|(t, _)| t - lo <= 1e-14 * t) {
            break;
        }
    }
    best
}

/// Weak action `⟨Q'_V[u] - g, ψ_i⟩` for every nodal hat `ψ_i` (zero on constrained nodes).
pub fn hat_residuals(prob: &DirichletProblem, u: &GridFunction) -> Result<Vec<f64>> {
    if !u.grid().same_geometry(&prob.grid) {
        return Err(Error::GridMismatch("function and problem grids differ".into()));
    }
    let grid = &prob.grid;
    let p = prob.op.p();
    let obj = Objective { op: &prob.op, grid, pot: prob.v.values(), lin: None, eps: 0.0 };
    let mut g = vec![0.0; grid.num_nodes()];
    obj.gradient(u.values(), &mut g);
    let m = grid.mass();
    Ok((0..grid.num_nodes())
        .map(|i| if grid.is_free(i) { g[i] / p - m[i] * prob.g.values()[i] } else { 0.0 })
        .collect())
}

/// Supersolution test against all nonnegative nodal hats, with a tolerance relative to the
/// size of the individual terms.
pub fn is_supersolution(prob: &DirichletProblem, u: &GridFunction, tol: f64) -> Result<bool> {
    Ok(hat_residuals(prob, u)?.iter().all(|&r| r >= -tol))
}

pub fn is_subsolution(prob: &DirichletProblem, u: &GridFunction, tol: f64) -> Result<bool> {
    Ok(hat_residuals(prob, u)?.iter().all(|&r| r <= tol))
}

fn hat_tol(prob: &DirichletProblem) -> f64 {
    let m = prob.grid.mass();
    let scale = m.iter().zip(prob.g.values()).map(|(m, g)| m * g.abs()).fold(0.0f64, f64::max);
    1e-9 * (1.0 + scale)
}

#[derive(Debug, Clone)]
pub struct MonotoneResult {
    pub solution: GridFunction,
    /// Limit reached from the supersolution end.
    pub upper: GridFunction,
    pub outer_iterations: usize,
    /// Sup-norm change of the last sweep from below.
    pub last_change: f64,
    /// Residual of the limit in the original problem.
    pub residual: f64,
    /// True when every iterate from below dominated its predecessor.
    pub monotone: bool,
}

/// Iterates `T(v)`: the solution of `Q'_{|V|}[u] = g + 2 V⁻ v^{p-1}` from both ends.
pub fn monotone_iterate(prob: &DirichletProblem, sub: &GridFunction, sup: &GridFunction, cfg: &SolverConfig) -> Result<MonotoneResult> {
    let grid = &prob.grid;
    for f in [sub, sup] {
        if !f.grid().same_geometry(grid) {
            return Err(Error::GridMismatch("sub/supersolution grid differs".into()));
        }
    }
    let n = grid.num_nodes();
    if (0..n).any(|i| sub.values()[i] > sup.values()[i]) {
        return Err(Error::invalid("subsolution exceeds supersolution"));
    }
    if sub.values().iter().any(|&x| x < 0.0) {
        return Err(Error::invalid("subsolution must be nonnegative"));
    }
    if prob.g.values().iter().any(|&x| x < 0.0) {
        return Err(Error::invalid("right-hand side must be nonnegative"));
    }
    let tol = hat_tol(prob);
    if !is_subsolution(prob, sub, tol)? {
        return Err(Error::invalid("lower function is not a subsolution (hat test)"));
    }
    if !is_supersolution(prob, sup, tol)? {
        return Err(Error::invalid("upper function is not a supersolution (hat test)"));
    }
    let bvals = prob.boundary_values();
    let bm = grid.boundary_mask();
    if (0..n).any(|i| bm[i] && (sub.values()[i] > bvals[i] + 1e-12 || sup.values()[i] < bvals[i] - 1e-12)) {
        return Err(Error::invalid("boundary data is not between the sub- and supersolution"));
    }

    let p = prob.op.p();
    let vabs = prob.v.map(f64::abs);
    let vneg: Vec<f64> = prob.v.values().iter().map(|&x| (-x).max(0.0)).collect();
    let step = |w: &GridFunction| -> Result<GridFunction> {
        let rhs: Vec<f64> = (0..n)
            .map(|i| prob.g.values()[i] + 2.0 * vneg[i] * w.values()[i].max(0.0).powf(p - 1.0))
            .collect();
        let inner = prob.with_data(vabs.clone(), GridFunction::from_parts(grid.clone(), rhs, Space::W1p));
        Ok(solve_dirichlet(&inner, cfg)?.u)
    };

    let mut lo = sub.clone();
    let mut hi = sup.clone();
    let mut monotone = true;
    let mut last_change = f64::INFINITY;
    let mut outer = 0;
    let mut lo_done = false;
    let mut hi_done = false;
    while outer < cfg.max_outer && !(lo_done && hi_done) {
        outer += 1;
        if !lo_done {
            let next = step(&lo)?;
            let mut change = 0.0f64;
            for i in 0..n {
                let d = next.values()[i] - lo.values()[i];
                // roundoff of the inner solve is tolerated
                if d < -1e-9 * (1.0 + lo.values()[i].abs()) {
                    monotone = false;
                }
                change = change.max(d.abs());
            }
            lo = next;
            last_change = change;
            lo_done = change < 1e-10;
        }
        if !hi_done {
            let next = step(&hi)?;
            let change = (0..n).map(|i| (next.values()[i] - hi.values()[i]).abs()).fold(0.0, f64::max);
            hi = next;
            hi_done = change < 1e-10;
        }
    }
    let r = hat_residuals(prob, &lo)?;
    let m = grid.mass();
    let q = p / (p - 1.0);
    let residual = (0..n)
        .filter(|&i| grid.is_free(i) && m[i] > 0.0)
        .map(|i| m[i] * (r[i] / m[i]).abs().powf(q))
        .sum::<f64>()
        .powf(1.0 / q);
    let space = sub.space();
    Ok(MonotoneResult {
        solution: GridFunction::from_parts(grid.clone(), lo.values().to_vec(), space),
        upper: hi,
        outer_iterations: outer,
        last_change,
        residual,
        monotone,
    })
}

/// `M` times the solution of `Q'_{|V|}[w] = 1` with zero data; a supersolution of
/// `Q'_V[u] = g` once `M` is large enough, which is checked by doubling.
pub fn scaled_supersolution(prob: &DirichletProblem, cfg: &SolverConfig) -> Result<GridFunction> {
    let grid = &prob.grid;
    let ones = GridFunction::constant(grid, 1.0);
    let inner = DirichletProblem {
        op: prob.op.clone(),
        v: prob.v.map(f64::abs),
        g: ones,
        boundary: Boundary::Zero,
        grid: grid.clone(),
    };
    let w = solve_dirichlet(&inner, cfg)?.u;
    let bvals = prob.boundary_values();
    let bmax = bvals.iter().fold(0.0f64, |a, &b| a.max(b));
    let tol = hat_tol(prob);
    let mut mult = 1.0;
    for _ in 0..60 {
        let cand: Vec<f64> = (0..grid.num_nodes()).map(|i| mult * w.values()[i] + bmax).collect();
        let f = GridFunction::from_parts(grid.clone(), cand, Space::W1p);
        if is_supersolution(prob, &f, tol)? {
            return Ok(f);
        }
        mult *= 2.0;
    }
    Err(Error::invalid("no scaled supersolution found"))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Premises {
    pub lambda1_positive: bool,
    pub g_nonnegative: bool,
    pub boundary_ordered: bool,
    pub u1_subsolution: bool,
    pub u2_supersolution: bool,
    pub u2_positive_on_boundary: bool,
}

impl Premises {
    pub fn all(&self) -> bool {
        self.lambda1_positive
            && self.g_nonnegative
            && self.boundary_ordered
            && self.u1_subsolution
            && self.u2_supersolution
            && self.u2_positive_on_boundary
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComparisonReport {
    /// `max (u₁ - u₂)⁺` over nodes.
    pub violation: f64,
    pub premises: Premises,
    pub premises_ok: bool,
    pub lambda1: f64,
}

pub fn check_weak_comparison(
    prob: &DirichletProblem,
    u1: &GridFunction,
    u2: &GridFunction,
    cfg: &SolverConfig,
) -> Result<ComparisonReport> {
    let grid = &prob.grid;
    for f in [u1, u2] {
        if !f.grid().same_geometry(grid) {
            return Err(Error::GridMismatch("compared functions live on another grid".into()));
        }
    }
    let mut c = cfg.clone();
    c.restarts = 1;
    let lambda1 = principal_eigen(&prob.op, &prob.v, grid, &c)?.lambda1;
    let n = grid.num_nodes();
    let bm = grid.boundary_mask();
    let tol = hat_tol(prob);
    let premises = Premises {
        lambda1_positive: lambda1 > 0.0,
        g_nonnegative: prob.g.values().iter().all(|&x| x >= 0.0),
        boundary_ordered: (0..n).all(|i| !bm[i] || u1.values()[i] <= u2.values()[i]),
        u1_subsolution: is_subsolution(prob, u1, tol)?,
        u2_supersolution: is_supersolution(prob, u2, tol)?,
        u2_positive_on_boundary: (0..n).all(|i| !bm[i] || u2.values()[i] > 0.0),
    };
    let violation = (0..n).map(|i| (u1.values()[i] - u2.values()[i]).max(0.0)).fold(0.0, f64::max);
    let premises_ok = premises.all();
    Ok(ComparisonReport { violation, premises, premises_ok, lambda1 })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RhsOutcome {
    pub name: String,
    /// Minimum over interior (free) nodes.
    pub interior_min: f64,
    pub max: f64,
    pub residual: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaxPrincipleReport {
    pub lambda1: f64,
    pub outcomes: Vec<RhsOutcome>,
    /// `-v` for the principal eigenfunction `v`, when `λ₁ < 0`.
    pub witness: Option<GridFunction>,
    /// Its right-hand side `-λ₁ v^{p-1} ≥ 0`.
    pub witness_rhs: Option<GridFunction>,
    pub witness_residual: Option<f64>,
    /// The biconditional at this resolution: positive solutions when `λ₁ > 0`, a negative
    /// solution for nonnegative data when `λ₁ < 0`.
    pub holds: bool,
}

/// Nonnegative right-hand sides used by [`check_maximum_principle`].
pub fn rhs_corpus(grid: &Arc<Grid>) -> Vec<(String, GridFunction)> {
    let (lo, hi) = (grid.lo(), grid.hi());
    let dim = grid.dim();
    let rel = move |x: [f64; 2], k: usize| (x[k] - lo[k]) / (hi[k] - lo[k]);
    let bump = move |x: [f64; 2], c: f64| {
        let mut d2 = (rel(x, 0) - c).powi(2);
        if dim == 2 {
            d2 += (rel(x, 1) - 0.5).powi(2);
        }
        let r2 = 0.04;
        if d2 < r2 {
            (1.0 - d2 / r2).powi(2)
        } else {
            0.0
        }
    };
    vec![
        ("one".to_string(), GridFunction::constant(grid, 1.0)),
        ("bump-left".to_string(), GridFunction::from_fn(grid, Space::W1p, move |x| bump(x, 0.25))),
        ("bump-center".to_string(), GridFunction::from_fn(grid, Space::W1p, move |x| bump(x, 0.5))),
        ("bump-right".to_string(), GridFunction::from_fn(grid, Space::W1p, move |x| bump(x, 0.75))),
        (
            "middle-third".to_string(),
            GridFunction::from_fn(grid, Space::W1p, move |x| {
                let t = rel(x, 0);
                if (1.0 / 3.0..=2.0 / 3.0).contains(&t) {
                    1.0
                } else {
                    0.0
                }
            }),
        ),
    ]
}

pub fn check_maximum_principle(op: &AOperator, v: &GridFunction, grid: &Arc<Grid>, cfg: &SolverConfig) -> Result<MaxPrincipleReport> {
    let eig = principal_eigen(op, v, grid, cfg)?;
    let lambda1 = eig.lambda1;
    let p = op.p();
    if lambda1 > 0.0 {
        let mut outcomes = Vec::new();
        let mut holds = true;
        for (name, g) in rhs_corpus(grid) {
            let prob = DirichletProblem::new(op.clone(), v.clone(), g, Boundary::Zero, grid.clone())?;
            let sol = solve_dirichlet(&prob, cfg)?;
            let interior_min = (0..grid.num_nodes())
                .filter(|&i| grid.is_free(i))
                .map(|i| sol.u.values()[i])
                .fold(f64::INFINITY, f64::min);
            holds &= interior_min > 0.0;
            outcomes.push(RhsOutcome { name, interior_min, max: sol.u.sup_norm(), residual: sol.residual });
        }
        return Ok(MaxPrincipleReport { lambda1, outcomes, witness: None, witness_rhs: None, witness_residual: None, holds });
    }
    let w = eig.eigenfunction.scaled(-1.0);
    let rhs = eig.eigenfunction.map(|x| -lambda1 * x.abs().powf(p - 1.0));
    let prob = DirichletProblem::new(op.clone(), v.clone(), rhs.clone(), Boundary::Zero, grid.clone())?;
    let r = hat_residuals(&prob, &w)?;
    let m = grid.mass();
    let q = p / (p - 1.0);
    let residual = (0..grid.num_nodes())
        .filter(|&i| grid.is_free(i) && m[i] > 0.0)
        .map(|i| m[i] * (r[i] / m[i]).abs().powf(q))
        .sum::<f64>()
        .powf(1.0 / q);
    let negative = (0..grid.num_nodes()).filter(|&i| grid.is_free(i)).all(|i| w.values()[i] < 0.0);
    let holds = lambda1 < 0.0 && negative && rhs.values().iter().all(|&x| x >= 0.0) && residual <= cfg.tol_for(lambda1);
    Ok(MaxPrincipleReport {
        lambda1,
        outcomes: Vec::new(),
        witness: Some(w),
        witness_rhs: Some(rhs),
        witness_residual: Some(residual),
        holds,
    })
}
