//! The operator family `A(x, ξ) = ∇_ξ F(x, ξ)` with a `p`-homogeneous convex Lagrangian `F`.
//!
//! Spatial coefficients (weights `a_i`, matrices `M`) are piecewise constant per grid
//! cell, so a "point" is addressed by its cell index. Vectors are always stored as
//! `[f64; 2]`; in 1D the second component is ignored.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec2 = [f64; 2];
pub type Mat2 = [[f64; 2]; 2];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OperatorKind {
    PLaplacian,
    PALaplacian,
    PseudoPLaplacian,
    ConvexCombination,
}

/// A coefficient that is either uniform or given per cell.
#[derive(Debug, Clone, PartialEq)]
pub enum CellField<T> {
    Uniform(T),
    PerCell(Vec<T>),
}

impl<T: Copy> CellField<T> {
    #[inline]
    pub fn at(&self, cell: usize) -> T {
        match self {
            CellField::Uniform(v) => *v,
            CellField::PerCell(v) => v[cell],
        }
    }

    pub fn values(&self) -> Vec<T> {
        match self {
            CellField::Uniform(v) => vec![*v],
            CellField::PerCell(v) => v.clone(),
        }
    }

    pub fn len_hint(&self) -> Option<usize> {
        match self {
            CellField::Uniform(_) => None,
            CellField::PerCell(v) => Some(v.len()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AOperator {
    kind: OperatorKind,
    p: f64,
    dim: usize,
    matrices: CellField<Mat2>,
    weights: CellField<Vec2>,
    mix_t: f64,
    alpha: f64,
    beta: f64,
}

#[inline]
fn dot(a: Vec2, b: Vec2) -> f64 {
    a[0] * b[0] + a[1] * b[1]
}

#[inline]
fn sub(a: Vec2, b: Vec2) -> Vec2 {
    [a[0] - b[0], a[1] - b[1]]
}

#[inline]
fn norm2(a: Vec2) -> f64 {
    a[0].hypot(a[1])
}

#[inline]
fn matvec(m: &Mat2, x: Vec2) -> Vec2 {
    [m[0][0] * x[0] + m[0][1] * x[1], m[1][0] * x[0] + m[1][1] * x[1]]
}

/// Eigenvalues of the leading `dim x dim` block of a symmetric matrix.
fn sym_eigs(m: &Mat2, dim: usize) -> (f64, f64) {
    if dim == 1 {
        return (m[0][0], m[0][0]);
    }
    let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
    let disc = ((m[0][0] - m[1][1]).powi(2) / 4.0 + m[0][1] * m[1][0]).max(0.0).sqrt();
    let hi = (m[0][0] + m[1][1]) / 2.0 + disc;
    // det/hi is the accurate form of the smaller root
    let lo = if hi > 0.0 { det / hi } else { hi - 2.0 * disc };
    (lo, hi)
}

fn mask(dim: usize, xi: Vec2) -> Vec2 {
    if dim == 1 {
        [xi[0], 0.0]
    } else {
        xi
    }
}

#[inline]
fn phi_p(t: f64, p: f64) -> f64 {
    if t == 0.0 {
        0.0
    } else {
        t.abs().powf(p - 2.0) * t
    }
}

impl AOperator {
    /// `F = |ξ|^p / p`.
    pub fn p_laplacian(p: f64, dim: usize) -> Result<Self> {
        Self::build(
            OperatorKind::PLaplacian,
            p,
            dim,
            CellField::Uniform([[1.0, 0.0], [0.0, 1.0]]),
            CellField::Uniform([1.0, 1.0]),
            0.0,
        )
    }

    /// `F = (ξ·Mξ)^{p/2} / p` with an SPD matrix per cell.
    pub fn pa_laplacian(p: f64, dim: usize, matrices: CellField<Mat2>) -> Result<Self> {
        Self::build(OperatorKind::PALaplacian, p, dim, matrices, CellField::Uniform([1.0, 1.0]), 0.0)
    }

    /// `F = Σ a_i |ξ_i|^p / p` with positive weights per cell.
    pub fn pseudo_p_laplacian(p: f64, dim: usize, weights: CellField<Vec2>) -> Result<Self> {
        Self::build(
            OperatorKind::PseudoPLaplacian,
            p,
            dim,
            CellField::Uniform([[1.0, 0.0], [0.0, 1.0]]),
            weights,
            0.0,
        )
    }

    /// `F_t = t F_pseudo + (1 - t) F_M`.
    pub fn convex_combination(
        p: f64,
        dim: usize,
        t: f64,
        weights: CellField<Vec2>,
        matrices: CellField<Mat2>,
    ) -> Result<Self> {
        Self::build(OperatorKind::ConvexCombination, p, dim, matrices, weights, t)
    }

    fn build(
        kind: OperatorKind,
        p: f64,
        dim: usize,
        matrices: CellField<Mat2>,
        weights: CellField<Vec2>,
        mix_t: f64,
    ) -> Result<Self> {
        if !(p.is_finite() && p > 1.0) {
            return Err(Error::invalid(format!("exponent p must satisfy 1 < p < inf, got {p}")));
        }
        if dim != 1 && dim != 2 {
            return Err(Error::invalid(format!("dimension must be 1 or 2, got {dim}")));
        }
        if !(0.0..=1.0).contains(&mix_t) {
            return Err(Error::invalid(format!("mix_t must lie in [0,1], got {mix_t}")));
        }
        let uses_w = matches!(kind, OperatorKind::PseudoPLaplacian | OperatorKind::ConvexCombination);
        let uses_m = matches!(kind, OperatorKind::PALaplacian | OperatorKind::ConvexCombination);

        let (mut wmin, mut wmax) = (f64::INFINITY, 0.0f64);
        for w in weights.values() {
            for &a in &w[..dim] {
                if uses_w && !(a.is_finite() && a > 0.0) {
                    return Err(Error::invalid(format!("weights must be positive and finite, got {a}")));
                }
                wmin = wmin.min(a);
                wmax = wmax.max(a);
            }
        }
        let (mut emin, mut emax) = (f64::INFINITY, 0.0f64);
        for m in matrices.values() {
            if uses_m {
                if m.iter().flatten().any(|v| !v.is_finite()) {
                    return Err(Error::invalid("matrix entries must be finite"));
                }
                if dim == 2 && (m[0][1] - m[1][0]).abs() > 1e-12 * (m[0][1].abs() + 1.0) {
                    return Err(Error::invalid("matrix field must be symmetric"));
                }
            }
            let (lo, hi) = sym_eigs(&m, dim);
            if uses_m && !(lo > 0.0) {
                return Err(Error::invalid(format!("matrix field must be positive definite, min eigenvalue {lo}")));
            }
            emin = emin.min(lo);
            emax = emax.max(hi);
        }

        let n = dim as f64;
        // norm-equivalence factors between Σ|ξ_i|^p and |ξ|^p
        let (ps_lo, ps_hi) = if p >= 2.0 {
            (wmin * n.powf(1.0 - p / 2.0), wmax)
        } else {
            (wmin, wmax * n.powf((2.0 - p) / 2.0))
        };
        let (m_lo, m_hi) = (emin.powf(p / 2.0), emax.powf(p / 2.0));
        let (alpha, beta) = match kind {
            OperatorKind::PLaplacian => (1.0, 1.0),
            OperatorKind::PALaplacian => (m_lo, m_hi),
            OperatorKind::PseudoPLaplacian => (ps_lo, ps_hi),
            OperatorKind::ConvexCombination => (
                mix_t * ps_lo + (1.0 - mix_t) * m_lo,
                mix_t * ps_hi + (1.0 - mix_t) * m_hi,
            ),
        };
        Ok(Self { kind, p, dim, matrices, weights, mix_t, alpha, beta })
    }

    pub fn kind(&self) -> OperatorKind {
        self.kind
    }
    pub fn p(&self) -> f64 {
        self.p
    }
    pub fn dim(&self) -> usize {
        self.dim
    }
    pub fn mix_t(&self) -> f64 {
        self.mix_t
    }
    /// Lower ellipticity constant: `α|ξ|^p ≤ A·ξ`.
    pub fn alpha(&self) -> f64 {
        self.alpha
    }
    /// Upper ellipticity constant: `|A| ≤ β|ξ|^{p-1}`.
    pub fn beta(&self) -> f64 {
        self.beta
    }
    pub fn matrices(&self) -> &CellField<Mat2> {
        &self.matrices
    }
    pub fn weights(&self) -> &CellField<Vec2> {
        &self.weights
    }

    /// Number of cells the coefficient data is tied to, if any field is per-cell.
    pub fn cell_count(&self) -> Option<usize> {
        let uses_w = matches!(self.kind, OperatorKind::PseudoPLaplacian | OperatorKind::ConvexCombination);
        let uses_m = matches!(self.kind, OperatorKind::PALaplacian | OperatorKind::ConvexCombination);
        let w = if uses_w { self.weights.len_hint() } else { None };
        let m = if uses_m { self.matrices.len_hint() } else { None };
        w.or(m)
    }

    #[inline]
    fn pseudo_sum(&self, cell: usize, xi: Vec2) -> f64 {
        let a = self.weights.at(cell);
        let mut s = a[0] * xi[0].abs().powf(self.p);
        if self.dim == 2 {
            s += a[1] * xi[1].abs().powf(self.p);
        }
        s
    }

    #[inline]
    fn pseudo_a(&self, cell: usize, xi: Vec2) -> Vec2 {
        let a = self.weights.at(cell);
        let y = if self.dim == 2 { a[1] * phi_p(xi[1], self.p) } else { 0.0 };
        [a[0] * phi_p(xi[0], self.p), y]
    }

    #[inline]
    fn m_quad(&self, cell: usize, xi: Vec2) -> f64 {
        dot(xi, matvec(&self.matrices.at(cell), xi)).max(0.0)
    }

    #[inline]
    fn m_a(&self, cell: usize, xi: Vec2) -> Vec2 {
        let m = self.matrices.at(cell);
        let mx = matvec(&m, xi);
        let s = dot(xi, mx);
        if s <= 0.0 {
            return [0.0, 0.0];
        }
        let f = s.powf((self.p - 2.0) / 2.0);
        [f * mx[0], f * mx[1]]
    }

    /// `|ξ|_A^p = A·ξ = pF`, computed without forming `A`.
    #[inline]
    pub(crate) fn norm_p(&self, cell: usize, xi: Vec2) -> f64 {
        let xi = mask(self.dim, xi);
        let p = self.p;
        match self.kind {
            OperatorKind::PLaplacian => {
                let s = dot(xi, xi);
                if p == 2.0 {
                    s
                } else {
                    s.powf(p / 2.0)
                }
            }
            OperatorKind::PALaplacian => {
                let s = self.m_quad(cell, xi);
                if p == 2.0 {
                    s
                } else {
                    s.powf(p / 2.0)
                }
            }
            OperatorKind::PseudoPLaplacian => self.pseudo_sum(cell, xi),
            OperatorKind::ConvexCombination => {
                let t = self.mix_t;
                t * self.pseudo_sum(cell, xi) + (1.0 - t) * self.m_quad(cell, xi).powf(p / 2.0)
            }
        }
    }

    #[inline]
    pub(crate) fn a_raw(&self, cell: usize, xi: Vec2) -> Vec2 {
        let xi = mask(self.dim, xi);
        let p = self.p;
        match self.kind {
            OperatorKind::PLaplacian => {
                if p == 2.0 {
                    return xi;
                }
                let s = dot(xi, xi);
                if s == 0.0 {
                    return [0.0, 0.0];
                }
                let f = s.powf((p - 2.0) / 2.0);
                [f * xi[0], f * xi[1]]
            }
            OperatorKind::PALaplacian => self.m_a(cell, xi),
            OperatorKind::PseudoPLaplacian => self.pseudo_a(cell, xi),
            OperatorKind::ConvexCombination => {
                let t = self.mix_t;
                let a = self.pseudo_a(cell, xi);
                let b = self.m_a(cell, xi);
                [t * a[0] + (1.0 - t) * b[0], t * a[1] + (1.0 - t) * b[1]]
            }
        }
    }

    /// Derivative `D_ξ A` with the scalar magnitudes smoothed by `ε²`; symmetric positive
    /// definite for `ε > 0` and exact for `ε = 0` away from `ξ = 0`.
    pub(crate) fn da_reg(&self, cell: usize, xi: Vec2, eps: f64) -> Mat2 {
        let xi = mask(self.dim, xi);
        let p = self.p;
        let e2 = eps * eps;
        let iso = |m: &Mat2| -> Mat2 {
            let mx = matvec(m, xi);
            let s = dot(xi, mx) + e2;
            if s <= 0.0 {
                return if p == 2.0 { *m } else { [[0.0; 2]; 2] };
            }
            let f = s.powf((p - 2.0) / 2.0);
            // for p < 2 the lagged-diffusion matrix majorizes the Hessian; Newton on |ξ|^p
            // would flip the sign of small gradients
            let g = if p < 2.0 { 0.0 } else { (p - 2.0) / s };
            [
                [f * (m[0][0] + g * mx[0] * mx[0]), f * (m[0][1] + g * mx[0] * mx[1])],
                [f * (m[1][0] + g * mx[1] * mx[0]), f * (m[1][1] + g * mx[1] * mx[1])],
            ]
        };
        let pseudo = || -> Mat2 {
            let a = self.weights.at(cell);
            let d = |t: f64, w: f64| {
                let s = t * t + e2;
                if s <= 0.0 {
                    if p == 2.0 {
                        w
                    } else {
                        0.0
                    }
                } else {
                    (p - 1.0).max(1.0) * w * s.powf((p - 2.0) / 2.0)
                }
            };
            [[d(xi[0], a[0]), 0.0], [0.0, d(xi[1], a[1])]]
        };
        let mut out = match self.kind {
            OperatorKind::PLaplacian => iso(&[[1.0, 0.0], [0.0, 1.0]]),
            OperatorKind::PALaplacian => iso(&self.matrices.at(cell)),
            OperatorKind::PseudoPLaplacian => pseudo(),
            OperatorKind::ConvexCombination => {
                let t = self.mix_t;
                let a = pseudo();
                let b = iso(&self.matrices.at(cell));
                [
                    [t * a[0][0] + (1.0 - t) * b[0][0], t * a[0][1] + (1.0 - t) * b[0][1]],
                    [t * a[1][0] + (1.0 - t) * b[1][0], t * a[1][1] + (1.0 - t) * b[1][1]],
                ]
            }
        };
        if self.dim == 1 {
            out[0][1] = 0.0;
            out[1][0] = 0.0;
            out[1][1] = 0.0;
        }
        out
    }

    fn check_xi(&self, xi: &[f64]) -> Result<Vec2> {
        if xi.len() != self.dim {
            return Err(Error::invalid(format!("vector has {} components, operator dimension is {}", xi.len(), self.dim)));
        }
        if xi.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("non-finite vector component"));
        }
        Ok(if self.dim == 1 { [xi[0], 0.0] } else { [xi[0], xi[1]] })
    }

    fn check_cell(&self, cell: usize) -> Result<()> {
        match self.cell_count() {
            Some(n) if cell >= n => Err(Error::invalid(format!("cell index {cell} out of range (operator has {n} cells)"))),
            _ => Ok(()),
        }
    }

    /// `F(x, ξ)`.
    pub fn eval_f(&self, cell: usize, xi: &[f64]) -> Result<f64> {
        self.check_cell(cell)?;
        let xi = self.check_xi(xi)?;
        Ok(self.norm_p(cell, xi) / self.p)
    }

    /// `A(x, ξ)`; at `ξ = 0` this is the zero vector for every `p > 1`.
    pub fn eval_a(&self, cell: usize, xi: &[f64]) -> Result<Vec<f64>> {
        self.check_cell(cell)?;
        let xi = self.check_xi(xi)?;
        let a = self.a_raw(cell, xi);
        Ok(a[..self.dim].to_vec())
    }

    /// `|ξ|_A = (A(x,ξ)·ξ)^{1/p}`.
    pub fn eval_norm_a(&self, cell: usize, xi: &[f64]) -> Result<f64> {
        self.check_cell(cell)?;
        let xi = self.check_xi(xi)?;
        Ok(self.norm_p(cell, xi).powf(1.0 / self.p))
    }

    /// `[ξ, η]_A`.
    pub fn eval_bracket(&self, cell: usize, xi: &[f64], eta: &[f64]) -> Result<f64> {
        self.check_cell(cell)?;
        let xi = self.check_xi(xi)?;
        let eta = self.check_xi(eta)?;
        Ok(self.bracket_raw(cell, xi, eta))
    }

    #[inline]
    pub(crate) fn norm_a_raw(&self, cell: usize, xi: Vec2) -> f64 {
        self.norm_p(cell, xi).powf(1.0 / self.p)
    }

    pub(crate) fn bracket_raw(&self, cell: usize, xi: Vec2, eta: Vec2) -> f64 {
        let d = sub(xi, eta);
        if self.p >= 2.0 {
            return self.norm_p(cell, d);
        }
        let nd = self.norm_a_raw(cell, d);
        if nd == 0.0 {
            return 0.0;
        }
        let ne = self.norm_a_raw(cell, eta);
        (ne + nd).powf(self.p - 2.0) * nd * nd
    }

    /// Samples random `(x, ξ, η, λ)` tuples and reports the worst relative violation of each
    /// structural property plus the best empirical stronger-convexity constant.
    pub fn check_structure(&self, samples: usize, seed: u64) -> StructureReport {
        const CHUNK: usize = 4096;
        let ncells = self.cell_count().unwrap_or(1);
        let chunks = samples.div_ceil(CHUNK);
        let parts: Vec<StructureReport> = (0..chunks)
            .into_par_iter()
            .map(|c| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(c as u64);
                let n = CHUNK.min(samples - c * CHUNK);
                let mut rep = StructureReport::empty(self.kind, self.p);
                for _ in 0..n {
                    let cell = rng.gen_range(0..ncells);
                    let xi = sample_vec(&mut rng, self.dim);
                    let eta = sample_vec(&mut rng, self.dim);
                    let lam = {
                        let m = (rng.gen_range(-2.0f64..2.0) * std::f64::consts::LN_10).exp();
                        if rng.gen_bool(0.5) {
                            m
                        } else {
                            -m
                        }
                    };
                    self.probe(cell, xi, eta, lam, &mut rep);
                }
                rep.samples = n;
                rep
            })
            .collect();
        let mut rep = StructureReport::empty(self.kind, self.p);
        for part in parts {
            rep.merge(&part);
        }
        rep.alpha = self.alpha;
        rep.beta = self.beta;
        rep
    }

    fn probe(&self, cell: usize, xi: Vec2, eta: Vec2, lam: f64, rep: &mut StructureReport) {
        let p = self.p;
        let tiny = 1e-300;
        let pos = |v: f64| v.max(0.0);

        let a_xi = self.a_raw(cell, xi);
        let a_eta = self.a_raw(cell, eta);
        let axi = dot(a_xi, xi);
        let pf = self.norm_p(cell, xi);
        let nxi = norm2(xi);

        let euler = (axi - pf).abs() / axi.abs().max(pf.abs()).max(tiny);
        rep.max_violation.euler = rep.max_violation.euler.max(euler);

        let a_lam = self.a_raw(cell, [lam * xi[0], lam * xi[1]]);
        let fac = lam * lam.abs().powf(p - 2.0);
        let expect = [fac * a_xi[0], fac * a_xi[1]];
        let hom = norm2(sub(a_lam, expect)) / (norm2(expect).max(tiny));
        rep.max_violation.homogeneity = rep.max_violation.homogeneity.max(hom);

        let lo = self.alpha * nxi.powf(p);
        rep.max_violation.ellipticity_lower = rep.max_violation.ellipticity_lower.max(pos(lo - axi) / lo.max(tiny));
        let hi = self.beta * nxi.powf(p - 1.0);
        rep.max_violation.ellipticity_upper =
            rep.max_violation.ellipticity_upper.max(pos(norm2(a_xi) - hi) / hi.max(tiny));

        let d = sub(xi, eta);
        let nd = norm2(d);
        let mono = dot(sub(a_xi, a_eta), d);
        let mscale = (norm2(a_xi) + norm2(a_eta)) * nd;
        if nd > 0.0 {
            rep.max_violation.monotonicity = rep.max_violation.monotonicity.max(pos(-mono) / mscale.max(tiny));
        }

        let nxa = pf.powf(1.0 / p);
        let nea = self.norm_a_raw(cell, eta);
        let holder_rhs = nxa.powf(p - 1.0) * nea;
        let holder = pos(dot(a_xi, eta).abs() - holder_rhs) / holder_rhs.max(tiny);
        rep.max_violation.holder = rep.max_violation.holder.max(holder);

        let pe = self.norm_p(cell, eta);
        let lhs = pf - pe - p * dot(a_eta, d);
        let cscale = pf + pe + p * norm2(a_eta) * nd;
        rep.max_violation.convexity = rep.max_violation.convexity.max(pos(-lhs) / cscale.max(tiny));
        let br = self.bracket_raw(cell, xi, eta);
        if br > 0.0 {
            rep.convexity_constant = rep.convexity_constant.min(lhs / br);
        }
    }
}

fn sample_vec(rng: &mut ChaCha8Rng, dim: usize) -> Vec2 {
    let theta = rng.gen_range(0.0..std::f64::consts::TAU);
    let dir = if dim == 1 {
        [if theta < std::f64::consts::PI { 1.0 } else { -1.0 }, 0.0]
    } else {
        [theta.cos(), theta.sin()]
    };
    let r = if rng.gen_bool(0.5) {
        1.0
    } else {
        // log-uniform radius over six decades
        (rng.gen_range(-3.0f64..3.0) * std::f64::consts::LN_10).exp()
    };
    [r * dir[0], r * dir[1]]
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct Violations {
    pub euler: f64,
    pub homogeneity: f64,
    pub ellipticity_lower: f64,
    pub ellipticity_upper: f64,
    pub monotonicity: f64,
    pub holder: f64,
    pub convexity: f64,
}

impl Violations {
    pub fn max(&self) -> f64 {
        [
            self.euler,
            self.homogeneity,
            self.ellipticity_lower,
            self.ellipticity_upper,
            self.monotonicity,
            self.holder,
            self.convexity,
        ]
        .into_iter()
        .fold(0.0, f64::max)
    }
}

/// Relative violations are `(lhs - rhs)^+ / scale` with the natural magnitude of the terms.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StructureReport {
    pub kind: OperatorKind,
    pub p: f64,
    pub samples: usize,
    pub alpha: f64,
    pub beta: f64,
    pub max_violation: Violations,
    /// Smallest observed ratio of the convexity gap to the bracket.
    pub convexity_constant: f64,
}

impl StructureReport {
    fn empty(kind: OperatorKind, p: f64) -> Self {
        Self {
            kind,
            p,
            samples: 0,
            alpha: 0.0,
            beta: 0.0,
            max_violation: Violations::default(),
            convexity_constant: f64::INFINITY,
        }
    }

    fn merge(&mut self, o: &StructureReport) {
        self.samples += o.samples;
        let a = &mut self.max_violation;
        let b = &o.max_violation;
        a.euler = a.euler.max(b.euler);
        a.homogeneity = a.homogeneity.max(b.homogeneity);
        a.ellipticity_lower = a.ellipticity_lower.max(b.ellipticity_lower);
        a.ellipticity_upper = a.ellipticity_upper.max(b.ellipticity_upper);
        a.monotonicity = a.monotonicity.max(b.monotonicity);
        a.holder = a.holder.max(b.holder);
        a.convexity = a.convexity.max(b.convexity);
        self.convexity_constant = self.convexity_constant.min(o.convexity_constant);
    }

    /// True when every violation is at most `tol` and the convexity constant is positive.
    pub fn passes(&self, tol: f64) -> bool {
        self.max_violation.max() <= tol && self.convexity_constant > 0.0
    }
}
