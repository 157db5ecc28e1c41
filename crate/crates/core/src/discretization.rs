//! Grids, nodal functions and the discrete energy.
//!
//! P1 elements: intervals in 1D, rectangles split along the south-west/north-east
//! diagonal in 2D. Gradients are constant per element, the potential term uses the
//! lumped (row-sum) mass, and coefficients are constant per rectangle cell.

use std::fmt::Write as _;
use std::path::Path;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::linalg::BandMatrix;
use crate::operator::{AOperator, Vec2};

#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct Elem {
    pub nodes: [usize; 3],
    pub nv: usize,
    pub cell: usize,
    pub grads: [Vec2; 3],
    pub measure: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    dim: usize,
    lo: Vec2,
    hi: Vec2,
    n: [usize; 2],
    h: Vec2,
    free: Vec<bool>,
    boundary: Vec<bool>,
    elems: Vec<Elem>,
    mass: Vec<f64>,
}

/// Orientation of the diagonal used to split each rectangle.
pub const DIAGONAL: &str = "sw-ne";

impl Grid {
    /// Interval `[a, b]` with `nodes` nodes; the two end nodes are the boundary.
    pub fn interval(a: f64, b: f64, nodes: usize) -> Result<Self> {
        Self::build(1, [a, 0.0], [b, 0.0], [nodes, 1], None)
    }

    /// Rectangle `[lo, hi]` with `nodes[0] x nodes[1]` nodes, row-major (x fastest).
    pub fn rectangle(lo: Vec2, hi: Vec2, nodes: [usize; 2]) -> Result<Self> {
        Self::build(2, lo, hi, nodes, None)
    }

    /// Restricts the active region to interior nodes whose coordinates satisfy `inside`.
    pub fn with_region(&self, inside: impl Fn(Vec2) -> bool) -> Result<Self> {
        let mask: Vec<bool> = (0..self.num_nodes())
            .map(|i| self.is_interior_of_box(i) && inside(self.coord(i)))
            .collect();
        self.with_free_mask(mask)
    }

    /// Uses an explicit mask of unconstrained nodes; rectangle-edge nodes are always constrained.
    pub fn with_free_mask(&self, mask: Vec<bool>) -> Result<Self> {
        if mask.len() != self.num_nodes() {
            return Err(Error::invalid("free mask length does not match node count"));
        }
        Self::build(self.dim, self.lo, self.hi, self.n, Some(mask))
    }

    fn build(dim: usize, lo: Vec2, hi: Vec2, n: [usize; 2], mask: Option<Vec<bool>>) -> Result<Self> {
        for d in 0..dim {
            if n[d] < 3 {
                return Err(Error::invalid(format!("resolution must be at least 3 nodes per axis, got {}", n[d])));
            }
            if !(lo[d].is_finite() && hi[d].is_finite() && hi[d] > lo[d]) {
                return Err(Error::invalid(format!("extent along axis {d} must be a finite interval with lo < hi")));
            }
        }
        let h = [
            (hi[0] - lo[0]) / (n[0] - 1) as f64,
            if dim == 2 { (hi[1] - lo[1]) / (n[1] - 1) as f64 } else { 0.0 },
        ];
        let mut g = Grid {
            dim,
            lo,
            hi,
            n,
            h,
            free: Vec::new(),
            boundary: Vec::new(),
            elems: Vec::new(),
            mass: Vec::new(),
        };
        let nn = g.num_nodes();
        let interior: Vec<bool> = (0..nn).map(|i| g.is_interior_of_box(i)).collect();
        let masked = mask.is_some();
        let free = match mask {
            Some(m) => m.iter().zip(&interior).map(|(a, b)| *a && *b).collect(),
            None => interior,
        };
        if !free.iter().any(|&f| f) {
            return Err(Error::invalid("active region has no interior nodes"));
        }
        g.free = free;
        g.build_elems(!masked);
        Ok(g)
    }

    fn is_interior_of_box(&self, i: usize) -> bool {
        let (ix, iy) = (i % self.n[0], i / self.n[0]);
        let x_ok = ix > 0 && ix + 1 < self.n[0];
        if self.dim == 1 {
            x_ok
        } else {
            x_ok && iy > 0 && iy + 1 < self.n[1]
        }
    }

    /// On the plain box every element and every edge node belongs to the closed domain;
    /// with a mask only elements inside the closure of the free set are kept.
    fn build_elems(&mut self, whole_box: bool) {
        let nn = self.num_nodes();
        let mut all = Vec::new();
        if self.dim == 1 {
            let hx = self.h[0];
            for c in 0..self.n[0] - 1 {
                all.push(Elem {
                    nodes: [c, c + 1, 0],
                    nv: 2,
                    cell: c,
                    grads: [[-1.0 / hx, 0.0], [1.0 / hx, 0.0], [0.0, 0.0]],
                    measure: hx,
                });
            }
        } else {
            let (hx, hy) = (self.h[0], self.h[1]);
            let nx = self.n[0];
            for j in 0..self.n[1] - 1 {
                for i in 0..nx - 1 {
                    let cell = j * (nx - 1) + i;
                    let a = j * nx + i;
                    let b = a + 1;
                    let c = a + nx;
                    let d = c + 1;
                    let area = 0.5 * hx * hy;
                    // (a, b, d): lower-right triangle
                    all.push(Elem {
                        nodes: [a, b, d],
                        nv: 3,
                        cell,
                        grads: [[-1.0 / hx, 0.0], [1.0 / hx, -1.0 / hy], [0.0, 1.0 / hy]],
                        measure: area,
                    });
                    // (a, d, c): upper-left triangle
                    all.push(Elem {
                        nodes: [a, d, c],
                        nv: 3,
                        cell,
                        grads: [[0.0, -1.0 / hy], [1.0 / hx, 0.0], [-1.0 / hx, 1.0 / hy]],
                        measure: area,
                    });
                }
            }
        }
        let mut boundary = vec![false; nn];
        if whole_box {
            boundary.iter_mut().zip(&self.free).for_each(|(b, f)| *b = !f);
        }
        for e in &all {
            let vs = &e.nodes[..e.nv];
            if vs.iter().any(|&v| self.free[v]) {
                for &v in vs {
                    if !self.free[v] {
                        boundary[v] = true;
                    }
                }
            }
        }
        let mut mass = vec![0.0; nn];
        let mut elems = Vec::new();
        for e in all {
            if e.nodes[..e.nv].iter().all(|&v| self.free[v] || boundary[v]) {
                for &v in &e.nodes[..e.nv] {
                    mass[v] += e.measure / e.nv as f64;
                }
                elems.push(e);
            }
        }
        self.boundary = boundary;
        self.elems = elems;
        self.mass = mass;
    }

    pub fn dim(&self) -> usize {
        self.dim
    }
    pub fn lo(&self) -> Vec2 {
        self.lo
    }
    pub fn hi(&self) -> Vec2 {
        self.hi
    }
    /// Nodes per axis (`[n, 1]` in 1D).
    pub fn resolution(&self) -> [usize; 2] {
        self.n
    }
    /// Cell size per axis (second entry is 0 in 1D).
    pub fn h(&self) -> Vec2 {
        self.h
    }
    pub fn h_max(&self) -> f64 {
        self.h[0].max(self.h[1])
    }
    pub fn num_nodes(&self) -> usize {
        self.n[0] * self.n[1]
    }
    pub fn num_cells(&self) -> usize {
        if self.dim == 1 {
            self.n[0] - 1
        } else {
            (self.n[0] - 1) * (self.n[1] - 1)
        }
    }
    pub fn free_mask(&self) -> &[bool] {
        &self.free
    }
    pub fn boundary_mask(&self) -> &[bool] {
        &self.boundary
    }
    pub fn is_free(&self, i: usize) -> bool {
        self.free[i]
    }
    /// Lumped node masses over the active elements.
    pub fn mass(&self) -> &[f64] {
        &self.mass
    }
    pub(crate) fn elems(&self) -> &[Elem] {
        &self.elems
    }
    pub fn num_free(&self) -> usize {
        self.free.iter().filter(|&&f| f).count()
    }
    pub fn diameter(&self) -> f64 {
        let dx = self.hi[0] - self.lo[0];
        let dy = if self.dim == 2 { self.hi[1] - self.lo[1] } else { 0.0 };
        dx.hypot(dy)
    }

    pub fn coord(&self, i: usize) -> Vec2 {
        let (ix, iy) = (i % self.n[0], i / self.n[0]);
        [self.lo[0] + ix as f64 * self.h[0], self.lo[1] + iy as f64 * self.h[1]]
    }

    /// Index of the rectangle cell containing `x` (clamped to the grid).
    pub fn cell_at(&self, x: Vec2) -> usize {
        let ix = (((x[0] - self.lo[0]) / self.h[0]).floor().max(0.0) as usize).min(self.n[0] - 2);
        if self.dim == 1 {
            return ix;
        }
        let iy = (((x[1] - self.lo[1]) / self.h[1]).floor().max(0.0) as usize).min(self.n[1] - 2);
        iy * (self.n[0] - 1) + ix
    }

    /// Corner nodes of a rectangle cell (two in 1D, four in 2D).
    pub fn cell_nodes(&self, cell: usize) -> Vec<usize> {
        if self.dim == 1 {
            vec![cell, cell + 1]
        } else {
            let nx = self.n[0];
            let (i, j) = (cell % (nx - 1), cell / (nx - 1));
            let a = j * nx + i;
            vec![a, a + 1, a + nx, a + nx + 1]
        }
    }

    /// Averages per-cell values onto nodes (mean over adjacent cells).
    pub fn cell_to_node(&self, cells: &[f64]) -> Result<Vec<f64>> {
        if cells.len() != self.num_cells() {
            return Err(Error::invalid(format!(
                "expected {} cell values, got {}",
                self.num_cells(),
                cells.len()
            )));
        }
        let mut sum = vec![0.0; self.num_nodes()];
        let mut cnt = vec![0usize; self.num_nodes()];
        for (c, &v) in cells.iter().enumerate() {
            for k in self.cell_nodes(c) {
                sum[k] += v;
                cnt[k] += 1;
            }
        }
        Ok(sum.iter().zip(&cnt).map(|(s, &c)| s / c as f64).collect())
    }

    /// Euclidean distance from each node to the nearest constrained node of the active
    /// boundary (zero off the free set).
    pub fn distance_to_boundary(&self) -> Vec<f64> {
        let bnodes: Vec<Vec2> = (0..self.num_nodes()).filter(|&i| self.boundary[i]).map(|i| self.coord(i)).collect();
        (0..self.num_nodes())
            .map(|i| {
                if !self.free[i] {
                    return 0.0;
                }
                let x = self.coord(i);
                bnodes
                    .iter()
                    .map(|b| (x[0] - b[0]).hypot(x[1] - b[1]))
                    .fold(f64::INFINITY, f64::min)
            })
            .collect()
    }

    /// A subgrid sharing the geometry whose active region is the intersection with `inside`.
    pub fn subregion(&self, inside: impl Fn(Vec2) -> bool) -> Result<Self> {
        let mask: Vec<bool> = (0..self.num_nodes()).map(|i| self.free[i] && inside(self.coord(i))).collect();
        self.with_free_mask(mask)
    }

    /// Whether `other` has the same geometry (the active region may differ).
    pub fn same_geometry(&self, other: &Grid) -> bool {
        self.dim == other.dim && self.lo == other.lo && self.hi == other.hi && self.n == other.n
    }

    pub(crate) fn free_index(&self) -> FreeIndex {
        FreeIndex::new(self)
    }
}

/// Compressed numbering of the free nodes, with the band width of the stiffness pattern.
#[derive(Debug, Clone)]
pub(crate) struct FreeIndex {
    pub nodes: Vec<usize>,
    pub map: Vec<usize>,
    pub bw: usize,
}

impl FreeIndex {
    pub fn new(grid: &Grid) -> Self {
        Self::with_fixed(grid, &vec![false; grid.num_nodes()])
    }

    /// Free nodes minus those flagged in `fixed`.
    pub fn with_fixed(grid: &Grid, fixed: &[bool]) -> Self {
        let mut map = vec![usize::MAX; grid.num_nodes()];
        let mut nodes = Vec::new();
        for i in 0..grid.num_nodes() {
            if grid.free[i] && !fixed[i] {
                map[i] = nodes.len();
                nodes.push(i);
            }
        }
        let mut bw = 0;
        for e in &grid.elems {
            let ids: Vec<usize> = e.nodes[..e.nv].iter().map(|&v| map[v]).filter(|&k| k != usize::MAX).collect();
            if let (Some(a), Some(b)) = (ids.iter().min(), ids.iter().max()) {
                bw = bw.max(b - a);
            }
        }
        Self { nodes, map, bw }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
pub enum Space {
    W1p,
    W1p0,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridFunction {
    grid: Arc<Grid>,
    values: Vec<f64>,
    space: Space,
}

impl GridFunction {
    pub fn new(grid: Arc<Grid>, values: Vec<f64>, space: Space) -> Result<Self> {
        if values.len() != grid.num_nodes() {
            return Err(Error::invalid(format!(
                "grid function has {} values, grid has {} nodes",
                values.len(),
                grid.num_nodes()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("grid function values must be finite"));
        }
        if space == Space::W1p0 {
            if let Some(i) = (0..values.len()).find(|&i| !grid.free[i] && values[i] != 0.0) {
                return Err(Error::invalid(format!("W1p0 function is nonzero at constrained node {i}")));
            }
        }
        Ok(Self { grid, values, space })
    }

    /// Samples `f` at every node; W1p0 functions are zeroed off the free set.
    pub fn from_fn(grid: &Arc<Grid>, space: Space, f: impl Fn(Vec2) -> f64) -> Self {
        let values = (0..grid.num_nodes())
            .map(|i| if space == Space::W1p0 && !grid.free[i] { 0.0 } else { f(grid.coord(i)) })
            .collect();
        Self { grid: grid.clone(), values, space }
    }

    pub fn zeros(grid: &Arc<Grid>, space: Space) -> Self {
        Self { grid: grid.clone(), values: vec![0.0; grid.num_nodes()], space }
    }

    pub fn constant(grid: &Arc<Grid>, c: f64) -> Self {
        Self { grid: grid.clone(), values: vec![c; grid.num_nodes()], space: Space::W1p }
    }

    pub(crate) fn from_parts(grid: Arc<Grid>, values: Vec<f64>, space: Space) -> Self {
        Self { grid, values, space }
    }

    pub fn grid(&self) -> &Arc<Grid> {
        &self.grid
    }
    pub fn values(&self) -> &[f64] {
        &self.values
    }
    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }
    pub fn into_values(self) -> Vec<f64> {
        self.values
    }
    pub fn space(&self) -> Space {
        self.space
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        let mut out = self.clone();
        out.values.iter_mut().for_each(|v| *v = f(*v));
        out
    }

    pub fn scaled(&self, s: f64) -> Self {
        self.map(|v| s * v)
    }

    /// Same values on another grid with identical geometry (e.g. an exhaustion level).
    pub fn on_grid(&self, grid: &Arc<Grid>) -> Result<Self> {
        if !self.grid.same_geometry(grid) {
            return Err(Error::GridMismatch("target grid has different geometry".into()));
        }
        Self::new(grid.clone(), self.values.clone(), Space::W1p)
    }

    /// Restriction to `grid`'s free set as a W1p0 function.
    pub fn restrict_w0(&self, grid: &Arc<Grid>) -> Result<Self> {
        if !self.grid.same_geometry(grid) {
            return Err(Error::GridMismatch("target grid has different geometry".into()));
        }
        let values = (0..grid.num_nodes()).map(|i| if grid.free[i] { self.values[i] } else { 0.0 }).collect();
        Ok(Self::from_parts(grid.clone(), values, Space::W1p0))
    }

    /// `(Σ m_i |u_i|^p)^{1/p}` with lumped masses.
    pub fn lp_norm(&self, p: f64) -> f64 {
        lp_pow(&self.grid, &self.values, p).powf(1.0 / p)
    }

    pub fn sup_norm(&self) -> f64 {
        self.values.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    /// Lumped `∫ u`.
    pub fn integral(&self) -> f64 {
        self.values.iter().zip(self.grid.mass()).map(|(v, m)| v * m).sum()
    }

    /// CSV text with header `qcrit-gridfunction v1, dim, nx[, ny]`, one grid row per line.
    pub fn to_csv(&self) -> String {
        let g = &self.grid;
        let mut s = if g.dim == 1 {
            format!("qcrit-gridfunction v1, 1, {}\n", g.n[0])
        } else {
            format!("qcrit-gridfunction v1, 2, {}, {}\n", g.n[0], g.n[1])
        };
        for row in self.values.chunks(g.n[0]) {
            let line: Vec<String> = row.iter().map(|v| format!("{v:.16e}")).collect();
            let _ = writeln!(s, "{}", line.join(","));
        }
        s
    }

    pub fn from_csv(grid: &Arc<Grid>, text: &str, space: Space) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines.next().ok_or_else(|| Error::invalid("empty grid function file"))?;
        let fields: Vec<&str> = header.split(',').map(str::trim).collect();
        if fields.first() != Some(&"qcrit-gridfunction v1") {
            return Err(Error::invalid("missing 'qcrit-gridfunction v1' header"));
        }
        let nums: Vec<usize> = fields[1..]
            .iter()
            .map(|f| f.parse::<usize>().map_err(|_| Error::invalid(format!("bad header field '{f}'"))))
            .collect::<Result<_>>()?;
        let expect: Vec<usize> = if grid.dim == 1 { vec![1, grid.n[0]] } else { vec![2, grid.n[0], grid.n[1]] };
        if nums != expect {
            return Err(Error::GridMismatch(format!("file header {nums:?} does not match grid {expect:?}")));
        }
        let values = parse_numbers(lines)?;
        Self::new(grid.clone(), values, space)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::Io { path: path.display().to_string(), source: e })
    }

    pub fn read_csv(grid: &Arc<Grid>, path: &Path, space: Space) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io { path: path.display().to_string(), source: e })?;
        Self::from_csv(grid, &text, space)
    }
}

/// Parses comma/whitespace separated numbers, one logical record per line.
pub fn parse_numbers<'a>(lines: impl Iterator<Item = &'a str>) -> Result<Vec<f64>> {
    let mut out = Vec::new();
    for (k, line) in lines.enumerate() {
        for tok in line.split(|c: char| c == ',' || c.is_whitespace()).filter(|t| !t.is_empty()) {
            let v: f64 = tok
                .parse()
                .map_err(|_| Error::invalid(format!("line {}: cannot parse '{tok}' as a number", k + 2)))?;
            out.push(v);
        }
    }
    Ok(out)
}

pub(crate) fn lp_pow(grid: &Grid, u: &[f64], p: f64) -> f64 {
    u.iter().zip(grid.mass()).map(|(v, m)| m * v.abs().powf(p)).sum()
}

pub(crate) fn check_same(a: &GridFunction, b: &GridFunction) -> Result<()> {
    if Arc::ptr_eq(&a.grid, &b.grid) || a.grid.same_geometry(&b.grid) {
        Ok(())
    } else {
        Err(Error::GridMismatch("functions live on grids with different geometry".into()))
    }
}

fn check_op(op: &AOperator, grid: &Grid) -> Result<()> {
    if op.dim() != grid.dim() {
        return Err(Error::invalid(format!("operator dimension {} does not match grid dimension {}", op.dim(), grid.dim())));
    }
    if let Some(n) = op.cell_count() {
        if n != grid.num_cells() {
            return Err(Error::GridMismatch(format!("operator has {n} cell coefficients, grid has {} cells", grid.num_cells())));
        }
    }
    Ok(())
}

#[inline]
pub(crate) fn elem_grad(e: &Elem, u: &[f64]) -> Vec2 {
    let mut g = [0.0, 0.0];
    for k in 0..e.nv {
        let v = u[e.nodes[k]];
        g[0] += v * e.grads[k][0];
        g[1] += v * e.grads[k][1];
    }
    g
}

/// Exact gradient of the P1 interpolant, one vector per active element.
pub fn gradient(u: &GridFunction) -> Vec<Vec2> {
    u.grid.elems.iter().map(|e| elem_grad(e, &u.values)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct EnergyBreakdown {
    pub gradient_term: f64,
    pub potential_term: f64,
    pub total: f64,
}

/// `Q[u] = ∫ |∇u|_A^p + ∫ V |u|^p` (no `1/p` factor), unregularized.
pub fn energy(op: &AOperator, v: &GridFunction, u: &GridFunction) -> Result<EnergyBreakdown> {
    check_same(v, u)?;
    check_op(op, &u.grid)?;
    Ok(energy_raw(op, &u.grid, &v.values, &u.values))
}

pub(crate) fn energy_raw(op: &AOperator, grid: &Grid, v: &[f64], u: &[f64]) -> EnergyBreakdown {
    let gradient_term = grad_term(op, grid, u, 0.0);
    let p = op.p();
    let potential_term: f64 = u.iter().zip(v).zip(grid.mass()).map(|((ui, vi), m)| m * vi * ui.abs().powf(p)).sum();
    EnergyBreakdown { gradient_term, potential_term, total: gradient_term + potential_term }
}

#[inline]
fn phi_eps(np: f64, p: f64, eps: f64) -> f64 {
    if eps == 0.0 || p == 2.0 {
        np
    } else {
        let n2 = np.powf(2.0 / p);
        (n2 + eps * eps).powf(p / 2.0) - eps.powf(p)
    }
}

pub(crate) fn grad_term(op: &AOperator, grid: &Grid, u: &[f64], eps: f64) -> f64 {
    let p = op.p();
    grid.elems.iter().map(|e| e.measure * phi_eps(op.norm_p(e.cell, elem_grad(e, u)), p, eps)).sum()
}

/// Nodal gradient of the energy with the gradient term regularized through
/// `(|ξ|_A² + ε²)^{1/2}`; constrained nodes carry zero for W1p0 functions.
pub fn energy_gradient(op: &AOperator, v: &GridFunction, u: &GridFunction, eps: f64) -> Result<GridFunction> {
    check_same(v, u)?;
    check_op(op, &u.grid)?;
    if !(eps >= 0.0) {
        return Err(Error::invalid("regularization must be nonnegative"));
    }
    let obj = Objective { op, grid: &u.grid, pot: &v.values, lin: None, eps };
    let mut g = vec![0.0; u.values.len()];
    obj.gradient(&u.values, &mut g);
    if u.space == Space::W1p0 {
        for (i, gi) in g.iter_mut().enumerate() {
            if !u.grid.free[i] {
                *gi = 0.0;
            }
        }
    }
    Ok(GridFunction::from_parts(u.grid.clone(), g, u.space))
}

/// `E(u) = Σ_e |e| Φ_ε(∇u) + Σ_i m_i pot_i |u_i|^p - Σ_i lin_i u_i`.
pub(crate) struct Objective<'a> {
    pub op: &'a AOperator,
    pub grid: &'a Grid,
    pub pot: &'a [f64],
    pub lin: Option<&'a [f64]>,
    pub eps: f64,
}

impl Objective<'_> {
    pub fn value(&self, u: &[f64]) -> f64 {
        let p = self.op.p();
        let mut e = grad_term(self.op, self.grid, u, self.eps);
        e += u
            .iter()
            .zip(self.pot)
            .zip(self.grid.mass())
            .map(|((ui, vi), m)| m * vi * ui.abs().powf(p))
            .sum::<f64>();
        if let Some(b) = self.lin {
            e -= u.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
        }
        e
    }

    pub fn gradient(&self, u: &[f64], out: &mut [f64]) {
        let p = self.op.p();
        out.iter_mut().for_each(|v| *v = 0.0);
        for e in &self.grid.elems {
            let xi = elem_grad(e, u);
            let mut a = self.op.a_raw(e.cell, xi);
            if self.eps > 0.0 && p != 2.0 {
                let n2 = self.op.norm_p(e.cell, xi).powf(2.0 / p);
                let f = if n2 > 0.0 { (1.0 + self.eps * self.eps / n2).powf((p - 2.0) / 2.0) } else { 0.0 };
                a = [f * a[0], f * a[1]];
            }
            let s = p * e.measure;
            for k in 0..e.nv {
                out[e.nodes[k]] += s * (a[0] * e.grads[k][0] + a[1] * e.grads[k][1]);
            }
        }
        let m = self.grid.mass();
        for i in 0..u.len() {
            let ui = u[i];
            if ui != 0.0 && self.pot[i] != 0.0 {
                out[i] += p * m[i] * self.pot[i] * ui.abs().powf(p - 2.0) * ui;
            }
        }
        if let Some(b) = self.lin {
            for (o, bi) in out.iter_mut().zip(b) {
                *o -= bi;
            }
        }
    }

    /// Symmetric approximation of the Hessian on the free nodes of `idx`, with the potential
    /// part taken from `hpot` (callers pass a nonnegative field to keep it positive definite).
    pub fn hessian(&self, u: &[f64], idx: &FreeIndex, hpot: &[f64], eps: f64) -> BandMatrix {
        let p = self.op.p();
        let mut h = BandMatrix::zeros(idx.len(), idx.bw);
        for e in &self.grid.elems {
            let xi = elem_grad(e, u);
            let d = self.op.da_reg(e.cell, xi, eps);
            let s = p * e.measure;
            for a in 0..e.nv {
                let ia = idx.map[e.nodes[a]];
                if ia == usize::MAX {
                    continue;
                }
                let ga = e.grads[a];
                let dga = [d[0][0] * ga[0] + d[0][1] * ga[1], d[1][0] * ga[0] + d[1][1] * ga[1]];
                for b in 0..e.nv {
                    let ib = idx.map[e.nodes[b]];
                    if ib == usize::MAX || ib > ia {
                        continue;
                    }
                    let gb = e.grads[b];
                    h.add(ia, ib, s * (dga[0] * gb[0] + dga[1] * gb[1]));
                }
            }
        }
        let m = self.grid.mass();
        for (k, &i) in idx.nodes.iter().enumerate() {
            let w = hpot[i];
            if w != 0.0 {
                let f = if p == 2.0 { 1.0 } else { (u[i] * u[i] + eps * eps).powf((p - 2.0) / 2.0) };
                h.add(k, k, p * (p - 1.0) * w * m[i] * f);
            }
        }
        h
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn linear_reproduction() {
        let g = Arc::new(Grid::interval(0.0, 1.0, 11).unwrap());
        let u = GridFunction::from_fn(&g, Space::W1p, |x| x[0]);
        assert!(gradient(&u).iter().all(|v| (v[0] - 1.0).abs() < 1e-12));
        let c = GridFunction::constant(&g, 3.0);
        assert!(gradient(&c).iter().all(|v| v[0].abs() < 1e-12));

        let g2 = Arc::new(Grid::rectangle([0.0, 0.0], [1.0, 1.0], [6, 5]).unwrap());
        let u = GridFunction::from_fn(&g2, Space::W1p, |x| x[0] + 2.0 * x[1]);
        for v in gradient(&u) {
            assert_relative_eq!(v[0], 1.0, epsilon = 1e-12);
            assert_relative_eq!(v[1], 2.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn masses_sum_to_measure() {
        let g = Grid::rectangle([0.0, -1.0], [2.0, 1.0], [9, 7]).unwrap();
        assert_relative_eq!(g.mass().iter().sum::<f64>(), 4.0, epsilon = 1e-12);
        let g1 = Grid::interval(-1.0, 2.0, 31).unwrap();
        assert_relative_eq!(g1.mass().iter().sum::<f64>(), 3.0, epsilon = 1e-12);
    }

    #[test]
    fn sine_energy() {
        let g = Arc::new(Grid::interval(0.0, 1.0, 1001).unwrap());
        let op = AOperator::p_laplacian(2.0, 1).unwrap();
        let v = GridFunction::constant(&g, 0.0);
        let u = GridFunction::from_fn(&g, Space::W1p0, |x| (std::f64::consts::PI * x[0]).sin());
        let e = energy(&op, &v, &u).unwrap();
        let pi2 = std::f64::consts::PI.powi(2);
        assert!((e.gradient_term - pi2 / 2.0).abs() < 1e-3 * pi2 / 2.0);
        assert_eq!(e.potential_term, 0.0);
    }

    #[test]
    fn region_boundary() {
        let g = Grid::rectangle([-1.0, -1.0], [1.0, 1.0], [21, 21]).unwrap();
        let d = g.with_region(|x| x[0] * x[0] + x[1] * x[1] < 0.5).unwrap();
        for i in 0..d.num_nodes() {
            if d.boundary_mask()[i] {
                assert!(!d.is_free(i));
            }
        }
        assert!(d.num_free() < g.num_free());
        let idx = d.free_index();
        assert!(idx.bw <= 22);
    }

    #[test]
    fn csv_roundtrip() {
        let g = Arc::new(Grid::rectangle([0.0, 0.0], [1.0, 2.0], [4, 3]).unwrap());
        let u = GridFunction::from_fn(&g, Space::W1p, |x| x[0] * 0.1 + x[1].sin());
        let text = u.to_csv();
        assert!(text.starts_with("qcrit-gridfunction v1, 2, 4, 3\n"));
        let back = GridFunction::from_csv(&g, &text, Space::W1p).unwrap();
        assert_eq!(back.values(), u.values());
    }
}
