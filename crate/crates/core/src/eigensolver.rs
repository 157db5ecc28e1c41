//! Principal eigenvalue `λ₁ = inf Q[u] / ‖u‖_p^p` over the discrete `W^{1,p}_0` space.
//!
//! Projected descent on the unit `‖·‖_p` sphere. The descent direction is the gradient
//! preconditioned by the (ε-smoothed) Hessian of `Q_{V+s}` with `s` chosen so that
//! `V + s ≥ 0`; for `p = 2` a unit step is exactly shifted inverse iteration, and the
//! Armijo search on the sphere may lengthen or shorten it.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::discretization::{check_same, lp_pow, FreeIndex, Grid, GridFunction, Objective, Space};
use crate::error::{Error, Result};
use crate::linalg::Cholesky;
use crate::morrey;
use crate::operator::AOperator;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SolverConfig {
    pub max_iters: usize,
    /// Absolute residual tolerance; `None` means `1e-8 (1 + |λ|)`.
    pub tol: Option<f64>,
    pub restarts: usize,
    pub eps_min: f64,
    pub seed: u64,
    /// Outer iterations of the monotone scheme.
    pub max_outer: usize,
    /// Tolerance for "λ₁ ≈ 0"; `None` means `10 h`.
    pub tol_crit: Option<f64>,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self { max_iters: 20_000, tol: None, restarts: 3, eps_min: 1e-8, seed: 0, max_outer: 200, tol_crit: None }
    }
}

impl SolverConfig {
    pub fn tol_for(&self, lambda: f64) -> f64 {
        self.tol.unwrap_or(1e-8 * (1.0 + lambda.abs()))
    }

    pub fn tol_crit_for(&self, grid: &Grid) -> f64 {
        self.tol_crit.unwrap_or(10.0 * grid.h_max())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EigenResult {
    pub lambda1: f64,
    /// Nonnegative, `‖·‖_p = 1` (weighted when a weight was given).
    pub eigenfunction: GridFunction,
    pub residual: f64,
    pub iterations: usize,
    pub trace: Vec<f64>,
    pub positivity_margin: f64,
    /// Max pairwise sup-distance between the eigenfunctions of converged restarts.
    pub simplicity_gap: f64,
    pub seed: u64,
    pub restart_lambdas: Vec<f64>,
}

/// Optional knobs beyond [`SolverConfig`].
#[derive(Debug, Clone, Default)]
pub struct EigenOptions {
    /// Nonnegative nodal weight in the norm, `‖u‖^p = Σ m_i w_i |u_i|^p`.
    pub weight: Option<GridFunction>,
    /// Warm start used by the first restart.
    pub init: Option<GridFunction>,
}

pub fn principal_eigen(op: &AOperator, v: &GridFunction, grid: &Arc<Grid>, cfg: &SolverConfig) -> Result<EigenResult> {
    principal_eigen_with(op, v, grid, cfg, &EigenOptions::default())
}

pub fn principal_eigen_with(
    op: &AOperator,
    v: &GridFunction,
    grid: &Arc<Grid>,
    cfg: &SolverConfig,
    opts: &EigenOptions,
) -> Result<EigenResult> {
    let prob = Problem::new(op, v, grid, cfg, opts)?;
    let restarts = cfg.restarts.max(1);
    let runs: Vec<(u64, Result<Run>)> = (0..restarts as u64)
        .into_par_iter()
        .map(|k| {
            let seed = cfg.seed.wrapping_add(k);
            let init = if k == 0 { opts.init.as_ref() } else { None };
            (seed, prob.run(seed, init))
        })
        .collect();

    let mut ok: Vec<(u64, Run)> = Vec::new();
    let mut first_err = None;
    for (seed, r) in runs {
        match r {
            Ok(run) => ok.push((seed, run)),
            Err(e) => {
                if first_err.is_none() {
                    first_err = Some(e);
                }
            }
        }
    }
    if ok.is_empty() {
        return Err(first_err.unwrap_or_else(|| Error::invalid("no restarts")));
    }
    let restart_lambdas: Vec<f64> = ok.iter().map(|(_, r)| r.lambda).collect();
    let mut gap = 0.0f64;
    for i in 0..ok.len() {
        for j in i + 1..ok.len() {
            let d = ok[i].1.u.iter().zip(&ok[j].1.u).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
            gap = gap.max(d);
        }
    }
    // lowest quotient wins, ties go to the lowest seed
    let best = ok
        .into_iter()
        .min_by(|a, b| a.1.lambda.total_cmp(&b.1.lambda).then(a.0.cmp(&b.0)))
        .expect("nonempty");
    let (seed, run) = best;
    let positivity_margin = (0..grid.num_nodes())
        .filter(|&i| grid.is_free(i))
        .map(|i| run.u[i])
        .fold(f64::INFINITY, f64::min);
    Ok(EigenResult {
        lambda1: run.lambda,
        eigenfunction: GridFunction::from_parts(grid.clone(), run.u, Space::W1p0),
        residual: run.residual,
        iterations: run.iterations,
        trace: run.trace,
        positivity_margin,
        simplicity_gap: gap,
        seed,
        restart_lambdas,
    })
}

struct Run {
    lambda: f64,
    u: Vec<f64>,
    residual: f64,
    iterations: usize,
    trace: Vec<f64>,
}

struct Problem<'a> {
    op: &'a AOperator,
    grid: &'a Arc<Grid>,
    pot: Vec<f64>,
    hpot: Vec<f64>,
    weight: Vec<f64>,
    idx: FreeIndex,
    cfg: &'a SolverConfig,
    fixed_pc: Option<Cholesky>,
}

impl<'a> Problem<'a> {
    fn new(
        op: &'a AOperator,
        v: &GridFunction,
        grid: &'a Arc<Grid>,
        cfg: &'a SolverConfig,
        opts: &EigenOptions,
    ) -> Result<Self> {
        if !v.grid().same_geometry(grid) {
            return Err(Error::GridMismatch("potential and grid differ in geometry".into()));
        }
        if op.dim() != grid.dim() {
            return Err(Error::invalid("operator and grid dimensions differ"));
        }
        if let Some(n) = op.cell_count() {
            if n != grid.num_cells() {
                return Err(Error::GridMismatch("operator coefficients do not match grid cells".into()));
            }
        }
        let idx = grid.free_index();
        let pot: Vec<f64> = v.values().to_vec();
        let vmin = idx.nodes.iter().map(|&i| pot[i]).fold(f64::INFINITY, f64::min);
        let s = (-vmin).max(0.0);
        let hpot: Vec<f64> = pot.iter().map(|&x| (x + s).max(0.0)).collect();
        let weight = match &opts.weight {
            Some(w) => {
                if !w.grid().same_geometry(grid) {
                    return Err(Error::GridMismatch("weight and grid differ in geometry".into()));
                }
                if w.values().iter().any(|&x| x < 0.0) {
                    return Err(Error::invalid("norm weight must be nonnegative"));
                }
                if !idx.nodes.iter().any(|&i| w.values()[i] > 0.0) {
                    return Err(Error::invalid("norm weight vanishes on the active region"));
                }
                w.values().to_vec()
            }
            None => vec![1.0; grid.num_nodes()],
        };
        let mut prob = Self { op, grid, pot, hpot, weight, idx, cfg, fixed_pc: None };
        if op.p() == 2.0 {
            // Hessian is independent of u: factor once for all restarts
            let zero = vec![0.0; grid.num_nodes()];
            prob.fixed_pc = Some(prob.factor(&zero, 0.0)?);
        }
        Ok(prob)
    }

    fn norm_pow(&self, u: &[f64]) -> f64 {
        let p = self.op.p();
        u.iter()
            .zip(self.grid.mass())
            .zip(&self.weight)
            .map(|((x, m), w)| m * w * x.abs().powf(p))
            .sum()
    }

    fn objective(&self, eps: f64) -> Objective<'_> {
        Objective { op: self.op, grid: self.grid, pot: &self.pot, lin: None, eps }
    }

    fn factor(&self, u: &[f64], eps: f64) -> Result<Cholesky> {
        let obj = self.objective(0.0);
        let mut e = eps;
        for _ in 0..8 {
            let h = obj.hessian(u, &self.idx, &self.hpot, e);
            match h.cholesky() {
                Ok(c) => return Ok(c),
                Err(_) => e = if e == 0.0 { 1e-8 } else { e * 10.0 },
            }
        }
        Err(Error::Diverged { iterations: 0, reason: "preconditioner is not positive definite".into(), trace: vec![] })
    }

    /// Factor of `H_Q - (λ - σ) H_N` (Hessian of the Lagrangian plus a small multiple of the
    /// norm's Hessian). Only positive definite near a minimizer; `None` otherwise.
    fn lagrangian_factor(&self, u: &[f64], lam: f64, eps: f64) -> Option<Cholesky> {
        let sigma = 0.1 * (1.0 + lam.abs());
        let hl: Vec<f64> = self.pot.iter().zip(&self.weight).map(|(v, w)| v - (lam - sigma) * w).collect();
        self.objective(0.0).hessian(u, &self.idx, &hl, eps).cholesky().ok()
    }

    fn initial(&self, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dist = self.grid.distance_to_boundary();
        (0..self.grid.num_nodes())
            .map(|i| if self.grid.is_free(i) { rng.gen_range(0.5..1.5) * dist[i] } else { 0.0 })
            .collect()
    }

    fn normalize(&self, u: &mut [f64]) -> Result<()> {
        let n = self.norm_pow(u);
        if !(n > 0.0 && n.is_finite()) {
            return Err(Error::invalid("iterate has zero norm"));
        }
        let s = n.powf(-1.0 / self.op.p());
        u.iter_mut().for_each(|x| *x *= s);
        Ok(())
    }

    /// Quotient `Q_ε(u / ‖u‖)` for unnormalized `u`.
    fn quotient(&self, u: &[f64], eps: f64) -> f64 {
        let n = self.norm_pow(u);
        if eps == 0.0 || self.op.p() == 2.0 {
            return self.objective(0.0).value(u) / n;
        }
        let s = n.powf(-1.0 / self.op.p());
        let w: Vec<f64> = u.iter().map(|x| x * s).collect();
        self.objective(eps).value(&w)
    }

    /// Gradient of the quotient at a normalized `u`, restricted to free nodes.
    fn sphere_gradient(&self, u: &[f64], eps: f64) -> Vec<f64> {
        let p = self.op.p();
        let mut gq = vec![0.0; u.len()];
        self.objective(eps).gradient(u, &mut gq);
        let lam = self.idx.nodes.iter().map(|&i| gq[i] * u[i]).sum::<f64>() / p;
        let m = self.grid.mass();
        self.idx
            .nodes
            .iter()
            .map(|&i| gq[i] - lam * p * m[i] * self.weight[i] * u[i].abs().powf(p - 2.0) * u[i])
            .collect()
    }

    fn residual(&self, u: &[f64], lambda: f64) -> f64 {
        eigen_residual_raw(self.op, self.grid, &self.pot, &self.weight, lambda, u)
    }

    fn run(&self, seed: u64, init: Option<&GridFunction>) -> Result<Run> {
        let p = self.op.p();
        let mut u = match init {
            Some(f) => {
                if !f.grid().same_geometry(self.grid) {
                    return Err(Error::GridMismatch("initial guess grid differs".into()));
                }
                (0..self.grid.num_nodes()).map(|i| if self.grid.is_free(i) { f.values()[i].abs() } else { 0.0 }).collect()
            }
            None => self.initial(seed),
        };
        if self.norm_pow(&u) == 0.0 {
            u = self.initial(seed);
        }
        self.normalize(&mut u)?;

        let h = self.grid.h_max();
        let mut stages = Vec::new();
        if p != 2.0 {
            let mut e = h;
            while e > self.cfg.eps_min {
                stages.push(e);
                e *= 0.5;
            }
        }
        stages.push(0.0);

        let mut trace = Vec::new();
        let mut iterations = 0usize;
        let nstages = stages.len();
        for (si, &eps) in stages.iter().enumerate() {
            let last = si + 1 == nstages;
            if last {
                u.iter_mut().for_each(|x| *x = x.abs());
                self.normalize(&mut u)?;
            }
            let heps = if last { self.cfg.eps_min } else { eps };
            let stage_start = trace.len();
            let mut lam = self.quotient(&u, eps);
            loop {
                if iterations >= self.cfg.max_iters {
                    return Err(Error::Diverged {
                        iterations,
                        reason: format!("no convergence within {} iterations", self.cfg.max_iters),
                        trace,
                    });
                }
                iterations += 1;
                let g = self.sphere_gradient(&u, eps);
                let mut d = g.clone();
                match &self.fixed_pc {
                    Some(c) => c.solve(&mut d),
                    None => self.lagrangian_factor(&u, lam, heps).map_or_else(|| self.factor(&u, heps), Ok)?.solve(&mut d),
                }
                d.iter_mut().for_each(|x| *x = -*x);
                let slope: f64 = g.iter().zip(&d).map(|(a, b)| a * b).sum();
                let step = self.line_search(&u, &d, lam, slope, eps);
                let stalled = step.is_none();
                if let Some((unew, lnew)) = step {
                    u = unew;
                    lam = lnew;
                    self.normalize(&mut u)?;
                }
                trace.push(lam);

                let k = trace.len() - stage_start;
                if last {
                    let flat = k > 25 && {
                        let old = trace[trace.len() - 26];
                        (old - lam) / (1.0 + lam.abs()) < 1e-12
                    };
                    if flat || stalled {
                        let lam0 = self.quotient(&u, 0.0);
                        let res = self.residual(&u, lam0);
                        if res < self.cfg.tol_for(lam0) {
                            return Ok(Run { lambda: lam0, u, residual: res, iterations, trace });
                        }
                        if stalled {
                            return Err(Error::Diverged {
                                iterations,
                                reason: format!("line search stalled with residual {res:e}"),
                                trace,
                            });
                        }
                    }
                } else {
                    let settled = k > 3 && {
                        let old = trace[trace.len() - 4];
                        (old - lam) / (1.0 + lam.abs()) < 1e-10
                    };
                    if settled || stalled || k >= 80 {
                        break;
                    }
                }
            }
        }
        unreachable!("the last stage always returns")
    }

    /// Derivative of `τ ↦ Q_ε((u + τd)/‖u + τd‖)` at the trial point `w = u + τd`.
    fn slope_at(&self, w: &[f64], d: &[f64], eps: f64) -> f64 {
        let p = self.op.p();
        let n = self.norm_pow(w);
        let r = n.powf(1.0 / p);
        let m = self.grid.mass();
        let free = &self.idx.nodes;
        let gn_d: f64 = free
            .iter()
            .zip(d)
            .map(|(&i, di)| p * m[i] * self.weight[i] * w[i].abs().powf(p - 2.0) * w[i] * di)
            .sum();
        let y: Vec<f64> = w.iter().map(|x| x / r).collect();
        let mut gq = vec![0.0; w.len()];
        self.objective(eps).gradient(&y, &mut gq);
        let c = gn_d / (p * n);
        free.iter().zip(d).map(|(&i, di)| gq[i] * (di - c * w[i]) / r).sum()
    }

    fn line_search(&self, u: &[f64], d: &[f64], f0: f64, slope: f64, eps: f64) -> Option<(Vec<f64>, f64)> {
        if !(slope < 0.0) {
            return None;
        }
        let free = &self.idx.nodes;
        let trial = |tau: f64| -> (Vec<f64>, f64) {
            let mut w = u.to_vec();
            for (k, &i) in free.iter().enumerate() {
                w[i] += tau * d[k];
            }
            let q = self.quotient(&w, eps);
            (w, q)
        };
        let c = 1e-4;
        // below this the quotient difference is roundoff and only the slope is informative
        let noise = 1e-13 * (1.0 + f0.abs());
        let accept = |tau: f64, w: &[f64], q: f64| -> bool {
            if !q.is_finite() {
                return false;
            }
            if q <= f0 + c * tau * slope {
                return true;
            }
            if q - f0 > noise {
                return false;
            }
            let s = self.slope_at(w, d, eps);
            s >= 0.9 * slope && s <= -0.8 * slope
        };
        let mut tau = 1.0;
        let (mut w, mut q) = trial(tau);
        if accept(tau, &w, q) {
            if q <= f0 + c * tau * slope {
                // try longer steps while they keep improving
                for _ in 0..4 {
                    let (w2, q2) = trial(tau * 2.0);
                    if q2.is_finite() && q2 < q && q2 <= f0 + c * 2.0 * tau * slope {
                        tau *= 2.0;
                        w = w2;
                        q = q2;
                    } else {
                        break;
                    }
                }
            }
            return Some((w, q));
        }
        for _ in 0..50 {
            tau *= 0.5;
            let t = trial(tau);
            w = t.0;
            q = t.1;
            if accept(tau, &w, q) {
                return Some((w, q));
            }
        }
        None
    }
}

fn eigen_residual_raw(op: &AOperator, grid: &Grid, pot: &[f64], weight: &[f64], lambda: f64, u: &[f64]) -> f64 {
    let p = op.p();
    let shifted: Vec<f64> = pot.iter().zip(weight).map(|(v, w)| v - lambda * w).collect();
    let obj = Objective { op, grid, pot: &shifted, lin: None, eps: 0.0 };
    let mut g = vec![0.0; u.len()];
    obj.gradient(u, &mut g);
    let m = grid.mass();
    let q = p / (p - 1.0);
    let mut acc = 0.0;
    for i in 0..u.len() {
        if grid.is_free(i) && m[i] > 0.0 {
            let z = g[i] / (p * m[i]);
            acc += m[i] * z.abs().powf(q);
        }
    }
    let un = u.iter().zip(m).zip(weight).map(|((x, mi), w)| mi * w * x.abs().powf(p)).sum::<f64>();
    acc.powf(1.0 / q) / un.powf((p - 1.0) / p)
}

/// Discrete `L^{p'}` norm (lumped Riesz map) of `Q'_{V-λ}[u]` on free nodes, scaled by `‖u‖_p^{p-1}`.
pub fn eigen_residual(op: &AOperator, v: &GridFunction, lambda: f64, u: &GridFunction) -> Result<f64> {
    check_same(v, u)?;
    let grid = u.grid();
    if lp_pow(grid, u.values(), op.p()) <= 0.0 {
        return Err(Error::invalid("residual needs a nonzero function"));
    }
    let ones = vec![1.0; grid.num_nodes()];
    Ok(eigen_residual_raw(op, grid, v.values(), &ones, lambda, u.values()))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LowerBound {
    pub bound: f64,
    pub constant: f64,
    pub morrey_norm: f64,
    pub q: f64,
}

/// `-C α^{-n/(pq-n)} ‖V‖^{pq/(pq-n)}` with `C` the largest empirical Morrey–Adams constant
/// over the built-in corpus on `V`'s grid (δ = α).
pub fn lambda1_lower_bound(op: &AOperator, v: &GridFunction, p: f64, q: f64) -> Result<LowerBound> {
    let grid = v.grid();
    let n = grid.dim() as f64;
    if !(p * q > n) {
        return Err(Error::invalid(format!("lower bound needs pq > n, got p = {p}, q = {q}, n = {n}")));
    }
    let vabs = v.map(f64::abs);
    let norm = morrey::morrey_norm(&vabs, p, q)?;
    let qe = norm.q;
    let alpha = op.alpha();
    let mut c = 0.0f64;
    let w0 = Arc::new((**grid).clone());
    for u in morrey::adams_corpus(&w0) {
        let rep = morrey::morrey_adams_check_with_norm(&vabs, &u, p, qe, alpha, norm.value)?;
        c = c.max(rep.c_emp);
    }
    let e = p * qe - n;
    let bound = if norm.value == 0.0 { 0.0 } else { -c * alpha.powf(-n / e) * norm.value.powf(p * qe / e) };
    Ok(LowerBound { bound, constant: c, morrey_norm: norm.value, q: qe })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimplicityReport {
    pub lambda1: f64,
    pub simplicity_gap: f64,
    pub delta: f64,
    /// `|λ₁(V - λ₁ + δ) - δ|`.
    pub shift_error: f64,
}

/// Cross-restart agreement of eigenfunctions plus a shifted-problem consistency check.
pub fn check_simplicity(op: &AOperator, v: &GridFunction, grid: &Arc<Grid>, cfg: &SolverConfig) -> Result<SimplicityReport> {
    let mut c = cfg.clone();
    c.restarts = cfg.restarts.max(3);
    let base = principal_eigen(op, v, grid, &c)?;
    let delta = 1e-2 * (1.0 + base.lambda1.abs());
    let shifted = v.map(|x| x - base.lambda1 + delta);
    let mut c1 = c.clone();
    c1.restarts = 1;
    let again = principal_eigen(op, &shifted, grid, &c1)?;
    Ok(SimplicityReport {
        lambda1: base.lambda1,
        simplicity_gap: base.simplicity_gap,
        delta,
        shift_error: (again.lambda1 - delta).abs(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn line(n: usize) -> Arc<Grid> {
        Arc::new(Grid::interval(0.0, 1.0, n).unwrap())
    }

    #[test]
    fn laplacian_interval() {
        let g = line(201);
        let op = AOperator::p_laplacian(2.0, 1).unwrap();
        let v = GridFunction::constant(&g, 0.0);
        let r = principal_eigen(&op, &v, &g, &SolverConfig::default()).unwrap();
        // discrete value with lumped mass: (2/h²)(1 - cos(πh))
        let h = 1.0 / 200.0;
        let exact = 2.0 / (h * h) * (1.0 - (PI * h).cos());
        assert!((r.lambda1 - exact).abs() < 1e-9 * exact, "{} vs {}", r.lambda1, exact);
        assert!(r.positivity_margin > 0.0);
        assert!(r.simplicity_gap < 1e-6);
        assert!((r.eigenfunction.lp_norm(2.0) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn plaplacian_p3_converges() {
        let g = line(101);
        let op = AOperator::p_laplacian(3.0, 1).unwrap();
        let v = GridFunction::constant(&g, 0.0);
        let r = principal_eigen(&op, &v, &g, &SolverConfig::default()).unwrap();
        assert!(r.residual < 1e-8 * (1.0 + r.lambda1));
        assert!(r.lambda1 > 0.0);
    }

    #[test]
    fn plaplacian_p15_converges() {
        let g = line(101);
        let op = AOperator::p_laplacian(1.5, 1).unwrap();
        let v = GridFunction::constant(&g, 0.0);
        let r = principal_eigen(&op, &v, &g, &SolverConfig::default()).unwrap();
        assert!(r.residual < 1e-8 * (1.0 + r.lambda1));
    }
}
