//! Classification of `Q_{p,A,V}` at grid resolution: subcritical (with a Hardy-weight),
//! critical (with a null-sequence and ground state) or supercritical (with a negative
//! energy witness). Also the perturbation threshold `τ₊`, the `(A,V)`-capacity and the
//! Poincaré-type check for the critical case.
//!
//! Every verdict is "at resolution h"; nothing here certifies the continuum problem.

use std::sync::Arc;

use rayon::prelude::*;
use serde::Serialize;

use crate::corpus::Corpus;
use crate::dirichlet::minimize;
use crate::discretization::{energy_raw, FreeIndex, Grid, GridFunction, Objective, Space};
use crate::eigensolver::{principal_eigen, principal_eigen_with, EigenOptions, EigenResult, SolverConfig};
use crate::error::{Error, Result};
use crate::operator::AOperator;

/// Shortfall allowed when validating a Hardy-weight on the corpus.
pub const HARDY_VALIDATION_TOL: f64 = 1e-8;
/// Target `|λ₁|` for the root finders in `t`.
pub const ROOT_TOL: f64 = 1e-10;
const MAX_DOUBLINGS: usize = 60;
const MAX_ROOT_STEPS: usize = 200;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Classification {
    Subcritical,
    Critical,
    Supercritical,
    Inconclusive,
}

#[derive(Debug, Clone, Serialize)]
pub struct LevelEigen {
    pub level: usize,
    pub free_nodes: usize,
    pub lambda1: f64,
}

#[derive(Debug, Clone)]
pub struct Witness {
    /// `‖φ‖_p = 1`, supported in an exhaustion level.
    pub phi: GridFunction,
    pub energy: f64,
    pub level: usize,
}

#[derive(Debug, Clone)]
pub struct HardyWeight {
    pub w: GridFunction,
    /// Patch constants `C_k = min(c_{U_k}, 1)` in cover order.
    pub patch_constants: Vec<f64>,
    /// Scalar applied after validation (1 when the raw weight passed).
    pub multiplier: f64,
    /// `min_φ (Q[φ] - ∫W|φ|^p) / ‖φ‖_p^p` over the corpus.
    pub min_slack: f64,
}

#[derive(Debug, Clone)]
pub struct NullSequence {
    pub members: Vec<GridFunction>,
    pub energies: Vec<f64>,
    pub anchor_norms: Vec<f64>,
    /// Nodes of the anchor set `U`.
    pub anchor_set: Vec<bool>,
    /// Shift `t_i` with `λ₁(Q_{V - t_i 𝐕}; ω_i) = 0`.
    pub shifts: Vec<f64>,
    pub residual_lambdas: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct CriticalityReport {
    pub classification: Classification,
    pub h: f64,
    pub tol_crit: f64,
    pub lambda1_trace: Vec<LevelEigen>,
    pub witness: Option<Witness>,
    pub hardy_weight: Option<HardyWeight>,
    pub null_sequence: Option<NullSequence>,
    pub ground_state: Option<GridFunction>,
    pub tau_plus: Option<f64>,
    pub capacity_values: Vec<(f64, f64)>,
    pub diagnostics: Vec<String>,
}

/// Nested active regions `ω_1 ⊂ … ⊂ ω_m`, the last being the full active region. Level `i`
/// keeps nodes farther than `(1 - i/m) r/2` from the active boundary, `r` the largest such
/// distance.
pub fn exhaustion(grid: &Arc<Grid>, levels: usize) -> Result<Vec<Arc<Grid>>> {
    if levels < 2 {
        return Err(Error::invalid(format!("at least 2 exhaustion levels are needed, got {levels}")));
    }
    let dist = grid.distance_to_boundary();
    let rmax = dist.iter().copied().fold(0.0f64, f64::max);
    let mut out = Vec::with_capacity(levels);
    let mut prev = 0usize;
    for i in 1..=levels {
        let g = if i == levels {
            grid.clone()
        } else {
            let cut = 0.5 * rmax * (1.0 - i as f64 / levels as f64);
            let mask: Vec<bool> = (0..grid.num_nodes()).map(|k| grid.is_free(k) && dist[k] > cut).collect();
            Arc::new(grid.with_free_mask(mask)?)
        };
        let n = g.num_free();
        if n == 0 || n <= prev {
            return Err(Error::invalid(format!("grid too coarse for {levels} strictly nested exhaustion levels")));
        }
        prev = n;
        out.push(g);
    }
    Ok(out)
}

fn lift(f: &GridFunction, grid: &Arc<Grid>) -> GridFunction {
    GridFunction::from_parts(grid.clone(), f.values().to_vec(), Space::W1p0)
}

/// Smooth nonnegative bump on `ω_1`, vanishing on its boundary.
fn default_bump(inner: &Grid, full: &Arc<Grid>) -> GridFunction {
    let dist = inner.distance_to_boundary();
    let dmax = dist.iter().copied().fold(0.0f64, f64::max);
    GridFunction::from_parts(
        full.clone(),
        dist.iter().map(|&d| if dmax > 0.0 { (d / dmax).powi(2) } else { 0.0 }).collect(),
        Space::W1p0,
    )
}

pub fn classify(op: &AOperator, v: &GridFunction, grid: &Arc<Grid>, levels: usize, cfg: &SolverConfig) -> Result<CriticalityReport> {
    let grids = exhaustion(grid, levels)?;
    let tol = cfg.tol_crit_for(grid);
    let mut report = CriticalityReport {
        classification: Classification::Inconclusive,
        h: grid.h_max(),
        tol_crit: tol,
        lambda1_trace: Vec::new(),
        witness: None,
        hardy_weight: None,
        null_sequence: None,
        ground_state: None,
        tau_plus: None,
        capacity_values: Vec::new(),
        diagnostics: Vec::new(),
    };
    let solves: Vec<Result<EigenResult>> = grids.par_iter().map(|g| principal_eigen(op, v, g, cfg)).collect();
    let mut eig = Vec::new();
    for (i, r) in solves.into_iter().enumerate() {
        match r {
            Ok(e) => {
                report.lambda1_trace.push(LevelEigen { level: i + 1, free_nodes: grids[i].num_free(), lambda1: e.lambda1 });
                eig.push(e);
            }
            Err(e) => {
                report.diagnostics.push(format!("level {}: {e}", i + 1));
                return Ok(report);
            }
        }
    }
    let lam: Vec<f64> = eig.iter().map(|e| e.lambda1).collect();
    let full = *lam.last().expect("levels >= 2");

    if let Some((k, &l)) = lam.iter().enumerate().filter(|(_, &l)| l < -tol).min_by(|a, b| a.1.total_cmp(b.1)) {
        let phi = lift(&eig[k].eigenfunction, grid);
        let energy = energy_raw(op, grid, v.values(), phi.values()).total;
        report.diagnostics.push(format!("negative principal eigenvalue {l:e} on level {}", k + 1));
        report.witness = Some(Witness { phi, energy, level: k + 1 });
        report.classification = Classification::Supercritical;
        return Ok(report);
    }
    if full > tol {
        match hardy_weight(op, v, grid, cfg) {
            Ok(w) => {
                report.hardy_weight = Some(w);
                report.classification = Classification::Subcritical;
                report.capacity_values = center_capacity(op, v, grid, cfg, &mut report.diagnostics);
            }
            Err(e) => report.diagnostics.push(format!("hardy-weight: {e}")),
        }
        return Ok(report);
    }
    let decreasing = lam.windows(2).all(|w| w[1] < w[0]);
    let positive_before = lam[..lam.len() - 1].iter().all(|&l| l > 0.0);
    if !(decreasing && positive_before) {
        report.diagnostics.push("λ₁ near zero on the full grid but the exhaustion trace is not decreasing and positive".into());
        return Ok(report);
    }
    match build_null_sequence_on(op, v, &grids, cfg, None, None) {
        Ok(ns) => {
            report.ground_state = ns.members.last().cloned();
            report.null_sequence = Some(ns);
            report.classification = Classification::Critical;
            report.capacity_values = center_capacity(op, v, grid, cfg, &mut report.diagnostics);
        }
        Err(e) => report.diagnostics.push(format!("null-sequence: {e}")),
    }
    Ok(report)
}

/// Capacity of a ball of radius `r/4` around the deepest active node.
fn center_capacity(op: &AOperator, v: &GridFunction, grid: &Arc<Grid>, cfg: &SolverConfig, diag: &mut Vec<String>) -> Vec<(f64, f64)> {
    let dist = grid.distance_to_boundary();
    let (imax, rmax) = dist.iter().enumerate().fold((0, 0.0f64), |b, (i, &d)| if d > b.1 { (i, d) } else { b });
    let c = grid.coord(imax);
    let r = 0.25 * rmax;
    let k: Vec<bool> = (0..grid.num_nodes()).map(|i| grid.is_free(i) && (grid.coord(i)[0] - c[0]).hypot(grid.coord(i)[1] - c[1]) <= r).collect();
    match capacity(op, v, &k, grid, cfg) {
        Ok(cap) => vec![(r, cap.value)],
        Err(e) => {
            diag.push(format!("capacity: {e}"));
            Vec::new()
        }
    }
}

/// Patches of the two-level dyadic cover of the active bounding box, as `(lo, hi)`.
fn dyadic_cover(grid: &Grid) -> Vec<([f64; 2], [f64; 2])> {
    let free: Vec<[f64; 2]> = (0..grid.num_nodes()).filter(|&i| grid.is_free(i)).map(|i| grid.coord(i)).collect();
    let mut lo = [f64::INFINITY; 2];
    let mut hi = [f64::NEG_INFINITY; 2];
    for x in &free {
        for d in 0..2 {
            lo[d] = lo[d].min(x[d]);
            hi[d] = hi[d].max(x[d]);
        }
    }
    let ny = |k: usize| if grid.dim() == 2 { k } else { 1 };
    let mut out = Vec::new();
    for k in [2usize, 4] {
        for j in 0..ny(k) {
            for i in 0..k {
                let wx = (hi[0] - lo[0]) / k as f64;
                let wy = (hi[1] - lo[1]) / ny(k) as f64;
                out.push((
                    [lo[0] + i as f64 * wx, lo[1] + j as f64 * wy],
                    [lo[0] + (i + 1) as f64 * wx, lo[1] + (j + 1) as f64 * wy],
                ));
            }
        }
    }
    out
}

/// Smooth partition of unity on the active region subordinate to the cover: each patch
/// carries a squared tent over its box enlarged by half a width, and the tents are normalized.
fn partition(grid: &Grid, cover: &[([f64; 2], [f64; 2])]) -> Vec<Vec<f64>> {
    let n = grid.num_nodes();
    let mut chi: Vec<Vec<f64>> = cover
        .iter()
        .map(|(lo, hi)| {
            (0..n)
                .map(|i| {
                    if !grid.is_free(i) {
                        return 0.0;
                    }
                    let x = grid.coord(i);
                    let mut b = 1.0;
                    for d in 0..grid.dim() {
                        let c = 0.5 * (lo[d] + hi[d]);
                        let w = hi[d] - lo[d];
                        b *= (1.0 - (x[d] - c).abs() / w).max(0.0).powi(2);
                    }
                    b
                })
                .collect()
        })
        .collect();
    for i in 0..n {
        let s: f64 = chi.iter().map(|c| c[i]).sum();
        if s > 0.0 {
            chi.iter_mut().for_each(|c| c[i] /= s);
        }
    }
    chi
}

/// `min_φ (Q[φ] - ∫W|φ|^p) / ‖φ‖_p^p` over the standard corpus.
fn corpus_slack(op: &AOperator, v: &[f64], w: &[f64], corpus: &Corpus) -> f64 {
    let p = op.p();
    let m = corpus.grid.mass();
    let es = corpus.energies(op, v);
    let ws: Vec<f64> = corpus.map(|mem, _, _| mem.entries.iter().map(|&(i, x)| m[i] * w[i] * x.abs().powf(p)).sum::<f64>());
    es.iter()
        .zip(&ws)
        .filter(|((_, n), _)| *n > 0.0)
        .map(|((q, n), wq)| (q - wq) / n)
        .fold(f64::INFINITY, f64::min)
}

/// Hardy-weight `W = Σ_k 2^{-k} C_k χ_k` on the two-level dyadic cover, where `C_k` is the
/// smaller of 1 and the best constant in `Q[φ] ≥ c ∫χ_k|φ|^p` (a weighted eigenvalue).
pub fn hardy_weight(op: &AOperator, v: &GridFunction, grid: &Arc<Grid>, cfg: &SolverConfig) -> Result<HardyWeight> {
    let full = principal_eigen(op, v, grid, cfg)?;
    if full.lambda1 <= cfg.tol_crit_for(grid) {
        return Err(Error::invalid(format!(
            "a Hardy-weight needs a subcritical functional, but λ₁ = {:e} is within tol_crit of zero or below",
            full.lambda1
        )));
    }
    let cover = dyadic_cover(grid);
    let chi = partition(grid, &cover);
    let mut probe = cfg.clone();
    probe.restarts = 1;
    let consts: Vec<Result<f64>> = chi
        .par_iter()
        .map(|c| {
            if !c.iter().any(|&x| x > 0.0) {
                return Ok(0.0);
            }
            let opts = EigenOptions {
                weight: Some(GridFunction::from_parts(grid.clone(), c.clone(), Space::W1p)),
                init: Some(full.eigenfunction.clone()),
            };
            principal_eigen_with(op, v, grid, &probe, &opts).map(|e| e.lambda1.min(1.0))
        })
        .collect();
    let consts = consts.into_iter().collect::<Result<Vec<f64>>>()?;
    let n = grid.num_nodes();
    let mut w = vec![0.0; n];
    for (k, (c, x)) in consts.iter().zip(&chi).enumerate() {
        let f = 0.5f64.powi(k as i32 + 1) * c.max(0.0);
        for i in 0..n {
            w[i] += f * x[i];
        }
    }
    let corpus = Corpus::standard(grid).with_extra(std::slice::from_ref(&full.eigenfunction));
    let mut multiplier = 1.0;
    let mut slack = corpus_slack(op, v.values(), &w, &corpus);
    if slack < -HARDY_VALIDATION_TOL {
        let (mut lo, mut hi) = (0.0, 1.0);
        for _ in 0..40 {
            let mid = 0.5 * (lo + hi);
            let wm: Vec<f64> = w.iter().map(|x| mid * x).collect();
            if corpus_slack(op, v.values(), &wm, &corpus) >= -HARDY_VALIDATION_TOL {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        multiplier = lo;
        w.iter_mut().for_each(|x| *x *= lo);
        slack = corpus_slack(op, v.values(), &w, &corpus);
    }
    if !w.iter().any(|&x| x > 0.0) {
        return Err(Error::Inconclusive("the Hardy-weight collapsed to zero during validation".into()));
    }
    Ok(HardyWeight { w: GridFunction::from_parts(grid.clone(), w, Space::W1p), patch_constants: consts, multiplier, min_slack: slack })
}

/// Best constant `C` in `Q[u] ≥ C ∫W|u|^p` (a weighted principal eigenvalue).
pub fn weighted_constant(op: &AOperator, v: &GridFunction, weight: &GridFunction, grid: &Arc<Grid>, cfg: &SolverConfig) -> Result<EigenResult> {
    principal_eigen_with(op, v, grid, cfg, &EigenOptions { weight: Some(weight.clone()), init: None })
}

/// Bracketed root of a decreasing `t ↦ λ(t)` with `λ(lo) > 0 > λ(hi)` (Illinois false
/// position). Returns the final `(t, λ, eigen)`.
fn root_in_t(
    mut eval: impl FnMut(f64, Option<&GridFunction>) -> Result<EigenResult>,
    (mut a, mut fa): (f64, f64),
    (mut b, mut fb): (f64, f64),
    mut warm: Option<GridFunction>,
    samples: &mut Vec<(f64, f64)>,
) -> Result<(f64, f64, EigenResult)> {
    let mut side = 0i8;
    let mut last: Option<(f64, EigenResult)> = None;
    for _ in 0..MAX_ROOT_STEPS {
        let mut t = (a * fb - b * fa) / (fb - fa);
        if !(t > a && t < b) {
            t = 0.5 * (a + b);
        }
        let e = eval(t, warm.as_ref())?;
        let l = e.lambda1;
        samples.push((t, l));
        warm = Some(e.eigenfunction.clone());
        let done = l.abs() <= ROOT_TOL || (b - a) <= 1e-15 * b.abs().max(1.0);
        if l > 0.0 {
            a = t;
            fa = l;
            if side == 1 {
                fb *= 0.5;
            }
            side = 1;
        } else {
            b = t;
            fb = l;
            if side == -1 {
                fa *= 0.5;
            }
            side = -1;
        }
        last = Some((t, e));
        if done {
            break;
        }
    }
    let (t, e) = last.expect("at least one step");
    Ok((t, e.lambda1, e))
}

#[derive(Debug, Clone, Serialize)]
pub struct TauResult {
    pub tau_plus: f64,
    pub lambda_at_tau: f64,
    /// Every `(t, λ₁(Q_{V + t𝐕}))` evaluated, in order.
    pub samples: Vec<(f64, f64)>,
}

/// Zero `τ₊` of `t ↦ λ₁(Q_{V + t𝐕})` on the full grid.
pub fn perturbation_threshold(op: &AOperator, v: &GridFunction, bigv: &GridFunction, grid: &Arc<Grid>, cfg: &SolverConfig) -> Result<TauResult> {
    if !bigv.grid().same_geometry(grid) {
        return Err(Error::GridMismatch("perturbation and grid differ in geometry".into()));
    }
    if !(0..grid.num_nodes()).any(|i| grid.is_free(i) && bigv.values()[i] < 0.0) {
        return Err(Error::invalid("the perturbation must be negative somewhere on the active region"));
    }
    let base = principal_eigen(op, v, grid, cfg)?;
    let mut samples = vec![(0.0, base.lambda1)];
    if base.lambda1 <= 0.0 {
        return Err(Error::invalid(format!("τ₊ needs a subcritical functional, got λ₁ = {:e}", base.lambda1)));
    }
    let mut probe = cfg.clone();
    probe.restarts = 1;
    let eval = |t: f64, warm: Option<&GridFunction>| -> Result<EigenResult> {
        let vt: Vec<f64> = v.values().iter().zip(bigv.values()).map(|(a, b)| a + t * b).collect();
        let vt = GridFunction::from_parts(grid.clone(), vt, Space::W1p);
        principal_eigen_with(op, &vt, grid, &probe, &EigenOptions { weight: None, init: warm.cloned() })
    };
    let mut t_max = 1.0;
    let mut warm = base.eigenfunction.clone();
    let mut lo = (0.0, base.lambda1);
    let mut hi = None;
    for _ in 0..=MAX_DOUBLINGS {
        let e = eval(t_max, Some(&warm))?;
        samples.push((t_max, e.lambda1));
        if e.lambda1 <= 0.0 {
            hi = Some((t_max, e.lambda1));
            break;
        }
        lo = (t_max, e.lambda1);
        warm = e.eigenfunction;
        t_max *= 2.0;
    }
    let Some(hi) = hi else {
        return Err(Error::Inconclusive(format!("no sign change of λ₁(t) after {MAX_DOUBLINGS} doublings; samples {samples:?}")));
    };
    if hi.1 == 0.0 {
        return Ok(TauResult { tau_plus: hi.0, lambda_at_tau: 0.0, samples });
    }
    let (t, l, _) = root_in_t(eval, lo, hi, Some(warm), &mut samples)?;
    Ok(TauResult { tau_plus: t, lambda_at_tau: l, samples })
}

/// Null-sequence through the exhaustion of `grid` with `levels` levels.
pub fn build_null_sequence(op: &AOperator, v: &GridFunction, grid: &Arc<Grid>, levels: usize, cfg: &SolverConfig) -> Result<NullSequence> {
    let grids = exhaustion(grid, levels)?;
    build_null_sequence_on(op, v, &grids, cfg, None, None)
}

/// As [`build_null_sequence`] with an explicit anchor set and perturbation; both default to
/// the innermost level and a bump supported in it.
pub fn build_null_sequence_with(
    op: &AOperator,
    v: &GridFunction,
    grid: &Arc<Grid>,
    levels: usize,
    cfg: &SolverConfig,
    anchor: Option<&[bool]>,
    bump: Option<&GridFunction>,
) -> Result<NullSequence> {
    let grids = exhaustion(grid, levels)?;
    build_null_sequence_on(op, v, &grids, cfg, anchor, bump)
}

fn build_null_sequence_on(
    op: &AOperator,
    v: &GridFunction,
    grids: &[Arc<Grid>],
    cfg: &SolverConfig,
    anchor: Option<&[bool]>,
    bump: Option<&GridFunction>,
) -> Result<NullSequence> {
    let full = grids.last().expect("nonempty exhaustion").clone();
    let inner = &grids[0];
    let p = op.p();
    let bigv = match bump {
        Some(b) => {
            if b.values().iter().any(|&x| x < 0.0) {
                return Err(Error::invalid("the null-sequence perturbation must be nonnegative"));
            }
            b.clone()
        }
        None => default_bump(inner, &full),
    };
    let anchor_set: Vec<bool> = match anchor {
        Some(a) if a.len() == full.num_nodes() => a.to_vec(),
        Some(_) => return Err(Error::invalid("anchor mask length does not match node count")),
        None => (0..full.num_nodes()).map(|i| inner.is_free(i)).collect(),
    };
    if !anchor_set.iter().enumerate().any(|(i, &a)| a && full.is_free(i)) {
        return Err(Error::invalid("anchor set has no active node"));
    }
    let mut probe = cfg.clone();
    probe.restarts = 1;
    let anchor_pow = |u: &[f64]| -> f64 {
        let m = full.mass();
        (0..u.len()).filter(|&i| anchor_set[i]).map(|i| m[i] * u[i].abs().powf(p)).sum()
    };

    let per_level: Vec<Result<(f64, f64, GridFunction)>> = grids
        .par_iter()
        .map(|g| {
            let eval = |t: f64, warm: Option<&GridFunction>| -> Result<EigenResult> {
                let vt: Vec<f64> = v.values().iter().zip(bigv.values()).map(|(a, b)| a - t * b).collect();
                let vt = GridFunction::from_parts(g.clone(), vt, Space::W1p);
                principal_eigen_with(op, &vt, g, &probe, &EigenOptions { weight: None, init: warm.map(|w| lift(w, g)) })
            };
            let base = eval(0.0, None)?;
            if base.lambda1 <= ROOT_TOL {
                return Ok((0.0, base.lambda1, base.eigenfunction));
            }
            let mut samples = Vec::new();
            let mut t = 1.0;
            let mut lo = (0.0, base.lambda1);
            let mut warm = base.eigenfunction.clone();
            for _ in 0..=MAX_DOUBLINGS {
                let e = eval(t, Some(&warm))?;
                if e.lambda1 <= 0.0 {
                    let (t, l, e) = root_in_t(&eval, lo, (t, e.lambda1), Some(warm), &mut samples)?;
                    return Ok((t, l, e.eigenfunction));
                }
                lo = (t, e.lambda1);
                warm = e.eigenfunction;
                t *= 2.0;
            }
            Err(Error::Inconclusive(format!("no bracket for t on a level with {} free nodes", g.num_free())))
        })
        .collect();

    let mut ns = NullSequence {
        members: Vec::new(),
        energies: Vec::new(),
        anchor_norms: Vec::new(),
        anchor_set: anchor_set.clone(),
        shifts: Vec::new(),
        residual_lambdas: Vec::new(),
    };
    for r in per_level {
        let (t, l, u) = r?;
        let a = anchor_pow(u.values());
        if !(a > 0.0) {
            return Err(Error::Inconclusive("eigenfunction vanishes on the anchor set".into()));
        }
        let s = a.powf(-1.0 / p);
        let u = GridFunction::from_parts(full.clone(), u.values().iter().map(|x| s * x).collect(), Space::W1p0);
        ns.energies.push(energy_raw(op, &full, v.values(), u.values()).total);
        ns.anchor_norms.push(anchor_pow(u.values()).powf(1.0 / p));
        ns.members.push(u);
        ns.shifts.push(t);
        ns.residual_lambdas.push(l);
    }
    Ok(ns)
}

#[derive(Debug, Clone, Serialize)]
pub struct CapacityResult {
    pub value: f64,
    /// Nodes of `K` held at exactly 1 in the minimizer.
    pub active_nodes: usize,
    pub residual: f64,
    pub iterations: usize,
}

/// `inf { Q[φ] : φ ∈ W1p0, φ ≥ 1 on K }` by an active-set method: `K` nodes start clamped
/// at 1, and a clamped node is released when the energy would decrease by raising it.
pub fn capacity(op: &AOperator, v: &GridFunction, k: &[bool], grid: &Arc<Grid>, cfg: &SolverConfig) -> Result<CapacityResult> {
    let n = grid.num_nodes();
    if k.len() != n {
        return Err(Error::invalid("K mask length does not match node count"));
    }
    if (0..n).any(|i| k[i] && !grid.is_free(i)) {
        return Err(Error::invalid("K must lie strictly inside the active region"));
    }
    if !k.iter().any(|&x| x) {
        return Ok(CapacityResult { value: 0.0, active_nodes: 0, residual: 0.0, iterations: 0 });
    }
    if !v.grid().same_geometry(grid) {
        return Err(Error::GridMismatch("potential and grid differ in geometry".into()));
    }
    if (0..n).any(|i| grid.is_free(i) && v.values()[i] < 0.0) {
        let e = principal_eigen(op, v, grid, cfg)?;
        if e.lambda1 < -cfg.tol_crit_for(grid) {
            return Err(Error::invalid(format!("capacity needs Q ≥ 0, but λ₁ = {:e}", e.lambda1)));
        }
    }
    let zero = vec![0.0; n];
    let mut clamped = k.to_vec();
    let mut u: Vec<f64> = (0..n).map(|i| if k[i] { 1.0 } else { 0.0 }).collect();
    let mut total_it = 0;
    let obj = Objective { op, grid, pot: v.values(), lin: None, eps: 0.0 };
    let mut g = vec![0.0; n];
    for _ in 0..50 {
        let idx = FreeIndex::with_fixed(grid, &clamped);
        let stats = minimize(op, grid, v.values(), None, &zero, &idx, &mut u, cfg)?;
        total_it += stats.iterations;
        let mut changed = false;
        for i in 0..n {
            if k[i] && !clamped[i] && u[i] < 1.0 {
                u[i] = 1.0;
                clamped[i] = true;
                changed = true;
            }
        }
        obj.gradient(&u, &mut g);
        let tol = 1e-9 * (1.0 + g.iter().fold(0.0f64, |a, b| a.max(b.abs())));
        for i in 0..n {
            if clamped[i] && g[i] < -tol {
                clamped[i] = false;
                changed = true;
            }
        }
        if !changed {
            let value = energy_raw(op, grid, v.values(), &u).total;
            let active = clamped.iter().filter(|&&c| c).count();
            return Ok(CapacityResult { value, active_nodes: active, residual: stats.residual, iterations: total_it });
        }
    }
    Err(Error::Diverged { iterations: total_it, reason: "active set did not settle".into(), trace: vec![] })
}

#[derive(Debug, Clone, Serialize)]
pub struct PoincareReport {
    pub constant: f64,
    pub min_slack: f64,
    pub corpus_size: usize,
}

/// Smallest `C` with `Q[φ] + C|∫φψ|^p ≥ C^{-1}∫W|φ|^p` over the corpus plus the ground state.
pub fn poincare_type_check(
    op: &AOperator,
    v: &GridFunction,
    psi: &GridFunction,
    ground_state: &GridFunction,
    w: &GridFunction,
    grid: &Arc<Grid>,
) -> Result<PoincareReport> {
    let p = op.p();
    let m = grid.mass();
    let dot = |a: &[f64]| -> f64 { a.iter().zip(psi.values()).zip(m).map(|((x, y), mi)| mi * x * y).sum() };
    let pg = dot(ground_state.values());
    let scale = ground_state.lp_norm(2.0) * psi.lp_norm(2.0);
    if !(pg.abs() > 1e-12 * scale) {
        return Err(Error::invalid("ψ is orthogonal to the ground state"));
    }
    if w.values().iter().any(|&x| x < 0.0) {
        return Err(Error::invalid("W must be nonnegative"));
    }
    let corpus = Corpus::standard(grid).with_extra(std::slice::from_ref(ground_state));
    let es = corpus.energies(op, v.values());
    let terms: Vec<(f64, f64)> = corpus.map(|mem, _, u| {
        let a = dot(u).abs().powf(p);
        let b: f64 = mem.entries.iter().map(|&(i, x)| m[i] * w.values()[i] * x.abs().powf(p)).sum();
        (a, b)
    });
    let mut c = 0.0f64;
    for ((q, _), &(a, b)) in es.iter().zip(&terms) {
        let need = if a > 0.0 {
            (-q + (q * q + 4.0 * a * b).sqrt()) / (2.0 * a)
        } else if b == 0.0 {
            0.0
        } else if *q > 0.0 {
            b / q
        } else {
            f64::INFINITY
        };
        c = c.max(need);
    }
    let min_slack = if c.is_finite() && c > 0.0 {
        es.iter().zip(&terms).map(|((q, _), &(a, b))| q + c * a - b / c).fold(f64::INFINITY, f64::min)
    } else {
        f64::NAN
    };
    Ok(PoincareReport { constant: c, min_slack, corpus_size: corpus.len() })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line(n: usize) -> Arc<Grid> {
        Arc::new(Grid::interval(0.0, 1.0, n).unwrap())
    }

    #[test]
    fn exhaustion_is_nested() {
        let g = line(101);
        let gs = exhaustion(&g, 4).unwrap();
        for w in gs.windows(2) {
            assert!(w[0].num_free() < w[1].num_free());
            for i in 0..g.num_nodes() {
                assert!(!w[0].is_free(i) || w[1].is_free(i));
            }
        }
        assert!(exhaustion(&g, 1).is_err());
    }

    #[test]
    fn tau_for_constant_perturbation() {
        let g = line(201);
        let op = AOperator::p_laplacian(2.0, 1).unwrap();
        let v = GridFunction::constant(&g, 0.0);
        let lam = principal_eigen(&op, &v, &g, &SolverConfig::default()).unwrap().lambda1;
        let r = perturbation_threshold(&op, &v, &GridFunction::constant(&g, -1.0), &g, &SolverConfig::default()).unwrap();
        assert!((r.tau_plus - lam).abs() < 1e-8, "{} vs {lam}", r.tau_plus);
    }

    #[test]
    fn capacity_of_empty_set() {
        let g = line(51);
        let op = AOperator::p_laplacian(2.0, 1).unwrap();
        let v = GridFunction::constant(&g, 0.0);
        let r = capacity(&op, &v, &[false; 51], &g, &SolverConfig::default()).unwrap();
        assert_eq!(r.value, 0.0);
    }

    #[test]
    fn capacity_1d_closed_form() {
        // φ = 1 on [0.4, 0.6], linear to 0 at the ends: Q = 2 (1/0.4)
        let g = line(101);
        let op = AOperator::p_laplacian(2.0, 1).unwrap();
        let v = GridFunction::constant(&g, 0.0);
        let k: Vec<bool> = (0..101).map(|i| (40..=60).contains(&i)).collect();
        let r = capacity(&op, &v, &k, &g, &SolverConfig::default()).unwrap();
        assert!((r.value - 5.0).abs() < 1e-9, "{}", r.value);
    }

    #[test]
    fn supercritical_witness() {
        let g = line(201);
        let op = AOperator::p_laplacian(2.0, 1).unwrap();
        let v = GridFunction::constant(&g, -2.0 * std::f64::consts::PI.powi(2));
        let r = classify(&op, &v, &g, 3, &SolverConfig::default()).unwrap();
        assert_eq!(r.classification, Classification::Supercritical);
        assert!(r.witness.unwrap().energy < -r.tol_crit);
    }
}
