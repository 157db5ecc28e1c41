use std::sync::Arc;

use serde::Serialize;

use super::config::{expr_field, ExperimentConfig, FieldSpec, WindowChoice};
use super::report::{to_json, trace_csv, SCHEMA};
use super::CommandKind;
use crate::corpus::Corpus;
use crate::criticality::{self, Classification};
use crate::dirichlet::{solve_dirichlet, Boundary, DirichletProblem, DirichletSolution};
use crate::discretization::{Grid, GridFunction, Space};
use crate::eigensolver::{principal_eigen, principal_eigen_with, EigenOptions, SolverConfig};
use crate::error::{Error, Result};
use crate::identities::{field_from_solution, nonnegativity_from_field, picone_check, Window};
use crate::morrey;
use crate::operator::{AOperator, OperatorKind};

pub(super) struct CommandOutput {
    pub json: String,
    pub artifacts: Vec<(String, String)>,
    pub inconclusive: bool,
}

#[derive(Serialize)]
struct GridInfo {
    dim: usize,
    lo: Vec<f64>,
    hi: Vec<f64>,
    resolution: Vec<usize>,
    h: Vec<f64>,
    free_nodes: usize,
}

#[derive(Serialize)]
struct OperatorInfo {
    kind: OperatorKind,
    p: f64,
    alpha: f64,
    beta: f64,
}

#[derive(Serialize)]
struct Envelope<'a, T: Serialize> {
    schema: &'static str,
    command: &'static str,
    config_hash: &'a str,
    seed: u64,
    grid: GridInfo,
    operator: OperatorInfo,
    solver: &'a SolverConfig,
    status: &'static str,
    result: T,
    artifacts: Vec<String>,
}

struct Ctx<'a> {
    cfg: &'a ExperimentConfig,
    grid: Arc<Grid>,
    op: AOperator,
    v: GridFunction,
    solver: SolverConfig,
    hash: &'a str,
    command: CommandKind,
}

impl Ctx<'_> {
    fn finish<T: Serialize>(&self, result: T, artifacts: Vec<(String, String)>, inconclusive: bool) -> CommandOutput {
        let d = self.grid.dim();
        let g = &self.grid;
        let env = Envelope {
            schema: SCHEMA,
            command: self.command.name(),
            config_hash: self.hash,
            seed: self.cfg.seed,
            grid: GridInfo {
                dim: d,
                lo: g.lo()[..d].to_vec(),
                hi: g.hi()[..d].to_vec(),
                resolution: g.resolution()[..d].to_vec(),
                h: g.h()[..d].to_vec(),
                free_nodes: g.num_free(),
            },
            operator: OperatorInfo { kind: self.op.kind(), p: self.op.p(), alpha: self.op.alpha(), beta: self.op.beta() },
            solver: &self.solver,
            status: if inconclusive { "inconclusive" } else { "ok" },
            result,
            artifacts: artifacts.iter().map(|a| a.0.clone()).collect(),
        };
        CommandOutput { json: to_json(&env), artifacts, inconclusive }
    }

    fn file(&self, suffix: &str) -> String {
        format!("{}_{suffix}", self.command.name())
    }

    fn expr(&self, field: &str, src: &str, space: Space) -> Result<GridFunction> {
        expr_field(field, src, &self.grid, space)
    }

    fn dirichlet_problem(&self) -> Result<DirichletProblem> {
        let g = self.expr("dirichlet.rhs", &self.cfg.dirichlet.rhs, Space::W1p)?;
        let boundary = match &self.cfg.dirichlet.boundary {
            Some(b) => Boundary::Prescribed(self.expr("dirichlet.boundary", b, Space::W1p)?),
            None => Boundary::Zero,
        };
        DirichletProblem::new(self.op.clone(), self.v.clone(), g, boundary, self.grid.clone())
    }
}

pub(super) fn execute(kind: CommandKind, cfg: &ExperimentConfig, hash: &str) -> Result<CommandOutput> {
    let grid = cfg.grid()?;
    let op = cfg.operator(&grid)?;
    let v = cfg.potential(&grid)?;
    let ctx = Ctx { cfg, grid, op, v, solver: cfg.solver_config(), hash, command: kind };
    match kind {
        CommandKind::Eig => eig(&ctx),
        CommandKind::Dirichlet => dirichlet(&ctx),
        CommandKind::Picone => picone(&ctx),
        CommandKind::AapCheck => aap_check(&ctx),
        CommandKind::Classify => classify(&ctx),
        CommandKind::Capacity => capacity(&ctx),
        CommandKind::Hardy => hardy(&ctx),
        CommandKind::Tau => tau(&ctx),
        CommandKind::Morrey => morrey_cmd(&ctx),
        CommandKind::VerifyOperator => verify_operator(&ctx),
    }
}

#[derive(Serialize)]
struct EigResult {
    lambda1: f64,
    residual: f64,
    iterations: usize,
    positivity_margin: f64,
    simplicity_gap: f64,
    seed: u64,
    restart_lambdas: Vec<f64>,
    weighted: bool,
}

fn eig(c: &Ctx) -> Result<CommandOutput> {
    let weight = match &c.cfg.eig.weight {
        Some(w) => Some(c.expr("eig.weight", w, Space::W1p0)?),
        None => None,
    };
    let weighted = weight.is_some();
    let r = principal_eigen_with(&c.op, &c.v, &c.grid, &c.solver, &EigenOptions { weight, init: None })?;
    let artifacts = vec![
        (c.file("eigenfunction.csv"), r.eigenfunction.to_csv()),
        (c.file("trace.csv"), trace_csv(["iteration", "rayleigh_quotient"], r.trace.iter().enumerate().map(|(i, &q)| (i as f64, q)))),
    ];
    let res = EigResult {
        lambda1: r.lambda1,
        residual: r.residual,
        iterations: r.iterations,
        positivity_margin: r.positivity_margin,
        simplicity_gap: r.simplicity_gap,
        seed: r.seed,
        restart_lambdas: r.restart_lambdas,
        weighted,
    };
    Ok(c.finish(res, artifacts, false))
}

#[derive(Serialize)]
struct DirichletResult {
    residual: f64,
    iterations: usize,
    lambda1: Option<f64>,
    min: f64,
    max: f64,
    boundary: &'static str,
}

fn solution_summary(s: &DirichletSolution) -> DirichletResult {
    let vals = s.u.values();
    DirichletResult {
        residual: s.residual,
        iterations: s.iterations,
        lambda1: s.lambda1,
        min: vals.iter().copied().fold(f64::INFINITY, f64::min),
        max: vals.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        boundary: if matches!(s.problem.boundary, Boundary::Zero) { "zero" } else { "prescribed" },
    }
}

fn dirichlet(c: &Ctx) -> Result<CommandOutput> {
    let prob = c.dirichlet_problem()?;
    let s = solve_dirichlet(&prob, &c.solver)?;
    let artifacts = vec![(c.file("solution.csv"), s.u.to_csv())];
    Ok(c.finish(solution_summary(&s), artifacts, false))
}

#[derive(Serialize)]
struct PiconeResult {
    max_lr_gap: f64,
    min_l: f64,
    integral_l: f64,
    energy: f64,
    /// `Q[u] - ∫L`: zero when `Q'[v] = 0`, nonnegative for a supersolution.
    slack: f64,
    functional_gap: f64,
    /// Whether `v` is a converged Dirichlet solution (the gap is only meaningful then).
    v_is_solution: bool,
    solution: Option<DirichletResult>,
    elements: usize,
}

fn picone(c: &Ctx) -> Result<CommandOutput> {
    let u = c.expr("picone.u", &c.cfg.picone.u, Space::W1p0)?;
    let (v, sol) = match &c.cfg.picone.v {
        Some(src) => (c.expr("picone.v", src, Space::W1p)?, None),
        None => {
            let s = solve_dirichlet(&c.dirichlet_problem()?, &c.solver)?;
            (s.u.clone(), Some(s))
        }
    };
    let r = picone_check(&c.op, &c.v, &u, &v, c.cfg.picone.floor)?;
    let fields = {
        let mut s = String::from("element,L,R\n");
        for ((k, l), rr) in r.elements.iter().zip(&r.l_field).zip(&r.r_field) {
            s.push_str(&format!("{k},{l:.16e},{rr:.16e}\n"));
        }
        s
    };
    let res = PiconeResult {
        max_lr_gap: r.max_lr_gap,
        min_l: r.min_l,
        integral_l: r.integral_l,
        energy: r.energy,
        slack: r.slack,
        functional_gap: r.functional_gap,
        v_is_solution: sol.is_some(),
        solution: sol.as_ref().map(solution_summary),
        elements: r.elements.len(),
    };
    Ok(c.finish(res, vec![(c.file("fields.csv"), fields)], false))
}

#[derive(Serialize)]
struct AapResult {
    /// Nonnegativity read off from the corpus (or refuted by a witness).
    nonnegative: bool,
    lambda1: Option<f64>,
    field_residual: Option<f64>,
    /// `10 × 1e-8 (1 + ‖V‖∞)`.
    field_tolerance: f64,
    tested_hats: Option<usize>,
    min_q_over_corpus: f64,
    min_q_normalized: f64,
    min_young_slack: Option<f64>,
    holder_violation: Option<f64>,
    corpus_size: usize,
    witness_energy: Option<f64>,
}

fn aap_check(c: &Ctx) -> Result<CommandOutput> {
    let vmax = c.v.sup_norm();
    let field_tolerance = 10.0 * c.solver.tol.unwrap_or(1e-8 * (1.0 + vmax));
    let b = GridFunction::constant(&c.grid, c.cfg.aap.boundary);
    let prob = DirichletProblem::new(c.op.clone(), c.v.clone(), GridFunction::constant(&c.grid, 0.0), Boundary::Prescribed(b), c.grid.clone())?;
    match solve_dirichlet(&prob, &c.solver) {
        Ok(sol) => {
            let window = match c.cfg.aap.window {
                WindowChoice::MiddleHalf => Window::middle_half(&c.grid),
                WindowChoice::All => Window { lo: c.grid.lo(), hi: c.grid.hi() },
            };
            let field = field_from_solution(&c.op, &c.v, &sol.u, Some(window))?;
            let corpus = Corpus::standard(&c.grid);
            let nn = nonnegativity_from_field(&c.op, &field, &c.v, &corpus)?;
            let res = AapResult {
                nonnegative: nn.min_q >= -1e-8,
                lambda1: sol.lambda1,
                field_residual: Some(field.residual),
                field_tolerance,
                tested_hats: Some(field.tested_hats),
                min_q_over_corpus: nn.min_q,
                min_q_normalized: nn.min_q_normalized,
                min_young_slack: Some(nn.min_young_slack),
                holder_violation: Some(nn.holder_violation),
                corpus_size: nn.corpus_size,
                witness_energy: None,
            };
            Ok(c.finish(res, vec![(c.file("solution.csv"), sol.u.to_csv())], false))
        }
        Err(Error::CoercivityFailure { lambda1 }) => {
            let e = principal_eigen(&c.op, &c.v, &c.grid, &c.solver)?;
            let corpus = Corpus::standard(&c.grid).with_extra(std::slice::from_ref(&e.eigenfunction));
            let es = corpus.energies(&c.op, c.v.values());
            let (mut min_q, mut min_n) = (f64::INFINITY, f64::INFINITY);
            for (q, n) in es {
                min_q = min_q.min(q);
                if n > 0.0 {
                    min_n = min_n.min(q / n);
                }
            }
            let res = AapResult {
                nonnegative: false,
                lambda1: Some(lambda1.min(e.lambda1)),
                field_residual: None,
                field_tolerance,
                tested_hats: None,
                min_q_over_corpus: min_q,
                min_q_normalized: min_n,
                min_young_slack: None,
                holder_violation: None,
                corpus_size: corpus.len(),
                witness_energy: Some(e.lambda1),
            };
            Ok(c.finish(res, vec![(c.file("witness.csv"), e.eigenfunction.to_csv())], false))
        }
        Err(e) => Err(e),
    }
}

#[derive(Serialize)]
struct ClassifyResult {
    classification: Classification,
    /// Verdicts hold at this mesh size only.
    at_resolution_h: f64,
    tol_crit: f64,
    lambda1_trace: Vec<criticality::LevelEigen>,
    witness_energy: Option<f64>,
    hardy_multiplier: Option<f64>,
    hardy_min_slack: Option<f64>,
    hardy_patch_constants: Option<Vec<f64>>,
    null_energies: Option<Vec<f64>>,
    null_shifts: Option<Vec<f64>>,
    null_anchor_norms: Option<Vec<f64>>,
    capacity_values: Vec<(f64, f64)>,
    diagnostics: Vec<String>,
}

fn classify(c: &Ctx) -> Result<CommandOutput> {
    let r = criticality::classify(&c.op, &c.v, &c.grid, c.cfg.classify.levels, &c.solver)?;
    let mut artifacts = vec![(
        c.file("trace.csv"),
        trace_csv(["level", "lambda1"], r.lambda1_trace.iter().map(|l| (l.level as f64, l.lambda1))),
    )];
    if let Some(w) = &r.witness {
        artifacts.push((c.file("witness.csv"), w.phi.to_csv()));
    }
    if let Some(h) = &r.hardy_weight {
        artifacts.push((c.file("hardy_weight.csv"), h.w.to_csv()));
    }
    if let Some(g) = &r.ground_state {
        artifacts.push((c.file("ground_state.csv"), g.to_csv()));
    }
    let inconclusive = r.classification == Classification::Inconclusive;
    let ns = r.null_sequence.as_ref();
    let res = ClassifyResult {
        classification: r.classification,
        at_resolution_h: r.h,
        tol_crit: r.tol_crit,
        lambda1_trace: r.lambda1_trace.clone(),
        witness_energy: r.witness.as_ref().map(|w| w.energy),
        hardy_multiplier: r.hardy_weight.as_ref().map(|h| h.multiplier),
        hardy_min_slack: r.hardy_weight.as_ref().map(|h| h.min_slack),
        hardy_patch_constants: r.hardy_weight.as_ref().map(|h| h.patch_constants.clone()),
        null_energies: ns.map(|n| n.energies.clone()),
        null_shifts: ns.map(|n| n.shifts.clone()),
        null_anchor_norms: ns.map(|n| n.anchor_norms.clone()),
        capacity_values: r.capacity_values.clone(),
        diagnostics: r.diagnostics.clone(),
    };
    Ok(c.finish(res, artifacts, inconclusive))
}

fn capacity(c: &Ctx) -> Result<CommandOutput> {
    let e = super::config::parse_expr("capacity.k", &c.cfg.capacity.k)?;
    let k: Vec<bool> = (0..c.grid.num_nodes())
        .map(|i| {
            let x = c.grid.coord(i);
            c.grid.is_free(i) && e.eval(x[0], x[1]) >= 0.0
        })
        .collect();
    let r = criticality::capacity(&c.op, &c.v, &k, &c.grid, &c.solver)?;
    Ok(c.finish(r, Vec::new(), false))
}

#[derive(Serialize)]
struct HardyResult {
    /// Best constant against the configured weight, when one was given.
    best_constant: Option<f64>,
    residual: Option<f64>,
    patch_constants: Option<Vec<f64>>,
    multiplier: Option<f64>,
    min_slack: Option<f64>,
}

fn hardy(c: &Ctx) -> Result<CommandOutput> {
    match &c.cfg.hardy.weight {
        Some(src) => {
            let w = c.expr("hardy.weight", src, Space::W1p0)?;
            let r = criticality::weighted_constant(&c.op, &c.v, &w, &c.grid, &c.solver)?;
            let res = HardyResult { best_constant: Some(r.lambda1), residual: Some(r.residual), patch_constants: None, multiplier: None, min_slack: None };
            Ok(c.finish(res, vec![(c.file("extremal.csv"), r.eigenfunction.to_csv())], false))
        }
        None => {
            let h = criticality::hardy_weight(&c.op, &c.v, &c.grid, &c.solver)?;
            let res = HardyResult {
                best_constant: None,
                residual: None,
                patch_constants: Some(h.patch_constants.clone()),
                multiplier: Some(h.multiplier),
                min_slack: Some(h.min_slack),
            };
            Ok(c.finish(res, vec![(c.file("weight.csv"), h.w.to_csv())], false))
        }
    }
}

fn tau(c: &Ctx) -> Result<CommandOutput> {
    let spec: &FieldSpec = &c.cfg.tau.perturbation;
    let bigv = c.cfg.field("tau.perturbation", spec, &c.grid, Space::W1p)?;
    let r = criticality::perturbation_threshold(&c.op, &c.v, &bigv, &c.grid, &c.solver)?;
    let artifacts = vec![(c.file("samples.csv"), trace_csv(["t", "lambda1"], r.samples.iter().copied()))];
    Ok(c.finish(r, artifacts, false))
}

#[derive(Serialize)]
struct MorreyResult {
    norm: morrey::MorreyNorm,
    delta: f64,
    /// Largest empirical Morrey–Adams constant over the smooth corpus.
    adams_constant: Option<f64>,
    adams_skipped: Option<String>,
}

fn morrey_cmd(c: &Ctx) -> Result<CommandOutput> {
    let f = match &c.cfg.morrey.f {
        Some(spec) => c.cfg.field("morrey.f", spec, &c.grid, Space::W1p)?,
        None => c.v.clone(),
    };
    let p = c.op.p();
    let norm = morrey::morrey_norm(&f, p, c.cfg.morrey.q)?;
    let n = c.grid.dim() as f64;
    let (adams_constant, adams_skipped) = if p * norm.q > n {
        let mut best = 0.0f64;
        for u in morrey::adams_corpus(&c.grid) {
            let r = morrey::morrey_adams_check_with_norm(&f, &u, p, norm.q, c.cfg.morrey.delta, norm.value)?;
            best = best.max(r.c_emp);
        }
        (Some(best), None)
    } else {
        (None, Some(format!("pq = {} does not exceed n", p * norm.q)))
    };
    let res = MorreyResult { norm, delta: c.cfg.morrey.delta, adams_constant, adams_skipped };
    Ok(c.finish(res, Vec::new(), false))
}

#[derive(Serialize)]
struct VerifyResult {
    report: crate::operator::StructureReport,
    passes: bool,
    tolerance: f64,
}

fn verify_operator(c: &Ctx) -> Result<CommandOutput> {
    let tol = 1e-10;
    let report = c.op.check_structure(c.cfg.verify.samples, c.cfg.seed);
    let passes = report.passes(tol);
    Ok(c.finish(VerifyResult { report, passes, tolerance: tol }, Vec::new(), false))
}
