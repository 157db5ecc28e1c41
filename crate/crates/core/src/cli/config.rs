//! Experiment configuration: a TOML document with sections, every key optional. Command-line
//! flags are applied to the parsed table before it is typed, so the config hash covers them.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::Deserialize;

use super::expr::Expr;
use crate::discretization::{parse_numbers, Grid, GridFunction, Space};
use crate::eigensolver::SolverConfig;
use crate::error::{Error, Result};
use crate::operator::{AOperator, CellField, Mat2, OperatorKind};

pub const MAX_RESOLUTION: usize = 4096;

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub domain: DomainSpec,
    pub operator: OperatorSpec,
    pub potential: FieldSpec,
    pub solver: SolverSpec,
    pub output: OutputSpec,
    pub eig: EigSpec,
    pub dirichlet: DirichletSpec,
    pub picone: PiconeSpec,
    pub aap: AapSpec,
    pub classify: ClassifySpec,
    pub capacity: CapacitySpec,
    pub hardy: HardySpec,
    pub tau: TauSpec,
    pub morrey: MorreySpec,
    pub verify: VerifySpec,
    /// Directory against which relative file paths resolve (not part of the file).
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            domain: DomainSpec::default(),
            operator: OperatorSpec::default(),
            potential: FieldSpec { expr: Some("0".into()), file: None },
            solver: SolverSpec::default(),
            output: OutputSpec::default(),
            eig: EigSpec::default(),
            dirichlet: DirichletSpec::default(),
            picone: PiconeSpec::default(),
            aap: AapSpec::default(),
            classify: ClassifySpec::default(),
            capacity: CapacitySpec::default(),
            hardy: HardySpec::default(),
            tau: TauSpec::default(),
            morrey: MorreySpec::default(),
            verify: VerifySpec::default(),
            base_dir: PathBuf::from("."),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DomainSpec {
    pub dim: usize,
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    /// Nodes per axis.
    pub resolution: Vec<usize>,
    /// Active region: interior nodes where this expression is positive.
    pub region: Option<String>,
}

impl Default for DomainSpec {
    fn default() -> Self {
        Self { dim: 1, lo: vec![0.0], hi: vec![1.0], resolution: vec![1001], region: None }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OperatorSpec {
    pub kind: OperatorKind,
    pub p: f64,
    pub matrix: Option<Mat2>,
    /// Per-cell matrices, four numbers per cell (row-major entries), cells row-major.
    pub matrix_file: Option<String>,
    pub weights: Option<[f64; 2]>,
    /// Per-cell weights, two numbers per cell.
    pub weights_file: Option<String>,
    /// Mixing parameter of the convex combination.
    pub t: f64,
}

impl Default for OperatorSpec {
    fn default() -> Self {
        Self { kind: OperatorKind::PLaplacian, p: 2.0, matrix: None, matrix_file: None, weights: None, weights_file: None, t: 0.5 }
    }
}

/// A nodal field given by an expression or a file. Files hold either a grid-function CSV
/// or one value per cell (row-major), which is averaged onto the nodes.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FieldSpec {
    pub expr: Option<String>,
    pub file: Option<String>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverSpec {
    pub max_iters: Option<usize>,
    pub tol: Option<f64>,
    pub restarts: Option<usize>,
    pub eps_min: Option<f64>,
    pub max_outer: Option<usize>,
    pub tol_crit: Option<f64>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSpec {
    pub dir: String,
}

impl Default for OutputSpec {
    fn default() -> Self {
        Self { dir: "qcrit-out".into() }
    }
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EigSpec {
    /// Optional norm weight.
    pub weight: Option<String>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DirichletSpec {
    pub rhs: String,
    /// Boundary data; absent means zero (W1p0).
    pub boundary: Option<String>,
}

impl Default for DirichletSpec {
    fn default() -> Self {
        Self { rhs: "1".into(), boundary: None }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PiconeSpec {
    pub u: String,
    /// Second argument; absent means the Dirichlet solution of the `[dirichlet]` problem.
    pub v: Option<String>,
    pub floor: f64,
}

impl Default for PiconeSpec {
    fn default() -> Self {
        Self { u: "sin(pi * x)".into(), v: None, floor: crate::identities::DEFAULT_FLOOR }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WindowChoice {
    /// Centered box of half the extent along each axis.
    MiddleHalf,
    All,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AapSpec {
    /// Boundary value of the positive solution used to build the field.
    pub boundary: f64,
    /// Hats tested in the field residual.
    pub window: WindowChoice,
}

impl Default for AapSpec {
    fn default() -> Self {
        Self { boundary: 1.0, window: WindowChoice::MiddleHalf }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClassifySpec {
    pub levels: usize,
}

impl Default for ClassifySpec {
    fn default() -> Self {
        Self { levels: 4 }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CapacitySpec {
    /// `K` = active nodes where this expression is nonnegative.
    pub k: String,
}

impl Default for CapacitySpec {
    fn default() -> Self {
        Self { k: "0.01 - (x - 0.5)^2".into() }
    }
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HardySpec {
    /// When set, the best constant against this weight is computed instead of synthesizing one.
    pub weight: Option<String>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TauSpec {
    pub perturbation: FieldSpec,
}

impl Default for TauSpec {
    fn default() -> Self {
        Self { perturbation: FieldSpec { expr: Some("-1".into()), file: None } }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MorreySpec {
    pub q: f64,
    pub delta: f64,
    /// Function whose norm is taken; absent means the potential.
    pub f: Option<FieldSpec>,
}

impl Default for MorreySpec {
    fn default() -> Self {
        Self { q: 2.0, delta: 0.5, f: None }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VerifySpec {
    pub samples: usize,
}

impl Default for VerifySpec {
    fn default() -> Self {
        Self { samples: 100_000 }
    }
}

fn cfg_err(field: &str, msg: impl std::fmt::Display) -> Error {
    Error::Config(format!("{field}: {msg}"))
}

/// Sets `path = value` in `table`, creating sections as needed; `value` is parsed as a TOML
/// value and falls back to a string.
pub fn set_override(table: &mut toml::Table, path: &str, value: &str) -> Result<()> {
    let parsed: toml::Value = match toml::from_str::<toml::Table>(&format!("v = {value}")) {
        Ok(mut t) => t.remove("v").expect("key v"),
        Err(_) => toml::Value::String(value.to_string()),
    };
    let mut keys: Vec<&str> = path.split('.').collect();
    let last = keys.pop().filter(|k| !k.is_empty()).ok_or_else(|| cfg_err(path, "empty override key"))?;
    let mut cur = table;
    for k in keys {
        let entry = cur.entry(k.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry.as_table_mut().ok_or_else(|| cfg_err(path, format!("'{k}' is not a section")))?;
    }
    cur.insert(last.to_string(), parsed);
    Ok(())
}

pub fn load_table(path: Option<&Path>) -> Result<toml::Table> {
    let Some(path) = path else {
        return Ok(toml::Table::new());
    };
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io { path: path.display().to_string(), source: e })?;
    toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

impl ExperimentConfig {
    pub fn from_table(table: &toml::Table, base_dir: &Path) -> Result<Self> {
        let mut c: Self = toml::Value::Table(table.clone())
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        c.base_dir = base_dir.to_path_buf();
        c.validate()?;
        Ok(c)
    }

    fn validate(&self) -> Result<()> {
        let d = &self.domain;
        if d.dim != 1 && d.dim != 2 {
            return Err(cfg_err("domain.dim", format!("must be 1 or 2, got {}", d.dim)));
        }
        for (name, v) in [("domain.lo", d.lo.len()), ("domain.hi", d.hi.len()), ("domain.resolution", d.resolution.len())] {
            if v != d.dim {
                return Err(cfg_err(name, format!("needs {} entries, got {v}", d.dim)));
            }
        }
        for &n in &d.resolution {
            if !(3..=MAX_RESOLUTION).contains(&n) {
                return Err(cfg_err("domain.resolution", format!("{n} is outside [3, {MAX_RESOLUTION}]")));
            }
        }
        if self.potential.expr.is_some() == self.potential.file.is_some() {
            return Err(cfg_err("potential", "give exactly one of 'expr' or 'file'"));
        }
        Ok(())
    }

    pub fn resolve(&self, file: &str) -> PathBuf {
        let p = Path::new(file);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn solver_config(&self) -> SolverConfig {
        let d = SolverConfig::default();
        let s = &self.solver;
        SolverConfig {
            max_iters: s.max_iters.unwrap_or(d.max_iters),
            tol: s.tol,
            restarts: s.restarts.unwrap_or(d.restarts),
            eps_min: s.eps_min.unwrap_or(d.eps_min),
            seed: self.seed,
            max_outer: s.max_outer.unwrap_or(d.max_outer),
            tol_crit: s.tol_crit,
        }
    }

    pub fn grid(&self) -> Result<Arc<Grid>> {
        let d = &self.domain;
        let g = if d.dim == 1 {
            Grid::interval(d.lo[0], d.hi[0], d.resolution[0])?
        } else {
            Grid::rectangle([d.lo[0], d.lo[1]], [d.hi[0], d.hi[1]], [d.resolution[0], d.resolution[1]])?
        };
        let g = match &d.region {
            Some(src) => {
                let e = parse_expr("domain.region", src)?;
                g.with_region(|x| e.eval(x[0], x[1]) > 0.0)?
            }
            None => g,
        };
        if g.num_free() == 0 {
            return Err(cfg_err("domain.region", "no active node"));
        }
        Ok(Arc::new(g))
    }

    fn cell_numbers(&self, field: &str, file: &str, per_cell: usize, grid: &Grid) -> Result<Vec<f64>> {
        let path = self.resolve(file);
        let text = std::fs::read_to_string(&path).map_err(|e| cfg_err(field, format!("cannot read '{}': {e}", path.display())))?;
        let nums = parse_numbers(text.lines()).map_err(|e| cfg_err(field, e))?;
        if nums.len() != per_cell * grid.num_cells() {
            return Err(cfg_err(field, format!("expected {} numbers ({per_cell} per cell), got {}", per_cell * grid.num_cells(), nums.len())));
        }
        Ok(nums)
    }

    pub fn operator(&self, grid: &Grid) -> Result<AOperator> {
        let o = &self.operator;
        let dim = self.domain.dim;
        let matrices = match (&o.matrix, &o.matrix_file) {
            (Some(_), Some(_)) => return Err(cfg_err("operator.matrix", "give either 'matrix' or 'matrix_file'")),
            (Some(m), None) => CellField::Uniform(*m),
            (None, Some(f)) => {
                let n = self.cell_numbers("operator.matrix_file", f, 4, grid)?;
                CellField::PerCell(n.chunks(4).map(|c| [[c[0], c[1]], [c[2], c[3]]]).collect())
            }
            (None, None) => CellField::Uniform([[1.0, 0.0], [0.0, 1.0]]),
        };
        let weights = match (&o.weights, &o.weights_file) {
            (Some(_), Some(_)) => return Err(cfg_err("operator.weights", "give either 'weights' or 'weights_file'")),
            (Some(w), None) => CellField::Uniform(*w),
            (None, Some(f)) => {
                let n = self.cell_numbers("operator.weights_file", f, 2, grid)?;
                CellField::PerCell(n.chunks(2).map(|c| [c[0], c[1]]).collect())
            }
            (None, None) => CellField::Uniform([1.0, 1.0]),
        };
        let r = match o.kind {
            OperatorKind::PLaplacian => AOperator::p_laplacian(o.p, dim),
            OperatorKind::PALaplacian => AOperator::pa_laplacian(o.p, dim, matrices),
            OperatorKind::PseudoPLaplacian => AOperator::pseudo_p_laplacian(o.p, dim, weights),
            OperatorKind::ConvexCombination => AOperator::convex_combination(o.p, dim, o.t, weights, matrices),
        };
        r.map_err(|e| cfg_err("operator", e))
    }

    pub fn field(&self, name: &str, spec: &FieldSpec, grid: &Arc<Grid>, space: Space) -> Result<GridFunction> {
        match (&spec.expr, &spec.file) {
            (Some(src), None) => expr_field(&format!("{name}.expr"), src, grid, space),
            (None, Some(file)) => {
                let field = format!("{name}.file");
                let path = self.resolve(file);
                let text = std::fs::read_to_string(&path).map_err(|e| cfg_err(&field, format!("cannot read '{}': {e}", path.display())))?;
                let f = if text.trim_start().starts_with("qcrit-gridfunction") {
                    GridFunction::from_csv(grid, &text, space)
                } else {
                    parse_numbers(text.lines())
                        .and_then(|cells| grid.cell_to_node(&cells))
                        .and_then(|v| GridFunction::new(grid.clone(), v, space))
                };
                f.map_err(|e| cfg_err(&field, e))
            }
            _ => Err(cfg_err(name, "give exactly one of 'expr' or 'file'")),
        }
    }

    pub fn potential(&self, grid: &Arc<Grid>) -> Result<GridFunction> {
        self.field("potential", &self.potential, grid, Space::W1p)
    }
}

pub fn parse_expr(field: &str, src: &str) -> Result<Expr> {
    Expr::parse(src).map_err(|e| cfg_err(field, format!("'{src}' {e}")))
}

/// Nodal values of an expression; non-finite values are rejected with the offending node.
pub fn expr_field(field: &str, src: &str, grid: &Arc<Grid>, space: Space) -> Result<GridFunction> {
    let e = parse_expr(field, src)?;
    let mut vals = Vec::with_capacity(grid.num_nodes());
    for i in 0..grid.num_nodes() {
        let x = grid.coord(i);
        let v = if space == Space::W1p0 && !grid.is_free(i) { 0.0 } else { e.eval(x[0], x[1]) };
        if !v.is_finite() {
            return Err(cfg_err(field, format!("'{src}' is not finite at node {i} ({}, {})", x[0], x[1])));
        }
        vals.push(v);
    }
    GridFunction::new(grid.clone(), vals, space).map_err(|e| cfg_err(field, e))
}
