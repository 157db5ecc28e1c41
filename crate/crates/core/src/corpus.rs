//! Fixed, versioned test-function corpus: every nodal hat, 50 seeded positive bumps and
//! tensor sine modes up to order 4. Members are stored sparsely so hats stay cheap.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::discretization::{elem_grad, Grid, GridFunction, Space};
use crate::operator::AOperator;

pub const CORPUS_VERSION: &str = "qcrit-corpus v1";
pub const CORPUS_SEED: u64 = 0x5eed_c0de;
const NUM_BUMPS: usize = 50;
const MAX_MODE: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum MemberKind {
    Hat(usize),
    Bump(usize),
    Sine(usize, usize),
    Extra(usize),
}

#[derive(Debug, Clone)]
pub struct Member {
    pub kind: MemberKind,
    pub entries: Vec<(usize, f64)>,
}

impl Member {
    pub fn to_function(&self, grid: &Arc<Grid>) -> GridFunction {
        let mut v = vec![0.0; grid.num_nodes()];
        for &(i, x) in &self.entries {
            v[i] = x;
        }
        GridFunction::from_parts(grid.clone(), v, Space::W1p0)
    }
}

#[derive(Debug, Clone)]
pub struct Corpus {
    pub grid: Arc<Grid>,
    pub members: Vec<Member>,
    node_elems: Vec<Vec<usize>>,
}

impl Corpus {
    /// The standard corpus on `grid`'s active region.
    pub fn standard(grid: &Arc<Grid>) -> Self {
        let mut c = Self::smooth(grid);
        for i in 0..grid.num_nodes() {
            if grid.is_free(i) {
                c.members.push(Member { kind: MemberKind::Hat(i), entries: vec![(i, 1.0)] });
            }
        }
        c
    }

    /// Bumps and sine modes only.
    pub fn smooth(grid: &Arc<Grid>) -> Self {
        let mut node_elems = vec![Vec::new(); grid.num_nodes()];
        for (k, e) in grid.elems().iter().enumerate() {
            for &v in &e.nodes[..e.nv] {
                node_elems[v].push(k);
            }
        }
        let mut members = Vec::new();
        let free: Vec<usize> = (0..grid.num_nodes()).filter(|&i| grid.is_free(i)).collect();
        let (lo, hi) = (grid.lo(), grid.hi());
        let dim = grid.dim();
        let ky_max = if dim == 2 { MAX_MODE } else { 1 };
        for kx in 1..=MAX_MODE {
            for ky in 1..=ky_max {
                let entries = free
                    .iter()
                    .map(|&i| {
                        let x = grid.coord(i);
                        let sx = (kx as f64 * std::f64::consts::PI * (x[0] - lo[0]) / (hi[0] - lo[0])).sin();
                        let sy = if dim == 2 {
                            (ky as f64 * std::f64::consts::PI * (x[1] - lo[1]) / (hi[1] - lo[1])).sin()
                        } else {
                            1.0
                        };
                        (i, sx * sy)
                    })
                    .filter(|&(_, v)| v != 0.0)
                    .collect();
                members.push(Member { kind: MemberKind::Sine(kx, ky), entries });
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(CORPUS_SEED);
        let ext = (hi[0] - lo[0]).max(if dim == 2 { hi[1] - lo[1] } else { 0.0 });
        let h = grid.h_max();
        for b in 0..NUM_BUMPS {
            let c = grid.coord(free[rng.gen_range(0..free.len())]);
            let r = rng.gen_range((2.0 * h).min(0.5 * ext)..=0.5 * ext);
            let entries: Vec<(usize, f64)> = free
                .iter()
                .filter_map(|&i| {
                    let x = grid.coord(i);
                    let d2 = ((x[0] - c[0]).powi(2) + (x[1] - c[1]).powi(2)) / (r * r);
                    (d2 < 1.0).then(|| (i, (1.0 - d2).powi(2)))
                })
                .collect();
            if !entries.is_empty() {
                members.push(Member { kind: MemberKind::Bump(b), entries });
            }
        }
        Self { grid: grid.clone(), members, node_elems }
    }

    /// Appends caller-supplied functions (e.g. an eigenfunction), restricted to the free set.
    pub fn with_extra(mut self, extra: &[GridFunction]) -> Self {
        for (k, f) in extra.iter().enumerate() {
            let entries = (0..self.grid.num_nodes())
                .filter(|&i| self.grid.is_free(i) && f.values()[i] != 0.0)
                .map(|i| (i, f.values()[i]))
                .collect();
            self.members.push(Member { kind: MemberKind::Extra(k), entries });
        }
        self
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    /// Element indices touching the support of a member.
    pub(crate) fn support_elems(&self, m: &Member) -> Vec<usize> {
        let mut out: Vec<usize> = m.entries.iter().flat_map(|&(i, _)| self.node_elems[i].iter().copied()).collect();
        out.sort_unstable();
        out.dedup();
        out
    }

    /// Evaluates `f` on every member in parallel; results come back in corpus order.
    pub fn map<T: Send>(&self, f: impl Fn(&Member, &[usize], &mut Vec<f64>) -> T + Sync) -> Vec<T> {
        let n = self.grid.num_nodes();
        self.members
            .par_iter()
            .map_init(
                || vec![0.0; n],
                |scratch, m| {
                    for &(i, x) in &m.entries {
                        scratch[i] = x;
                    }
                    let els = self.support_elems(m);
                    let r = f(m, &els, scratch);
                    for &(i, _) in &m.entries {
                        scratch[i] = 0.0;
                    }
                    r
                },
            )
            .collect()
    }

    /// `(Q[ψ], ‖ψ‖_p^p)` for every member.
    pub fn energies(&self, op: &AOperator, pot: &[f64]) -> Vec<(f64, f64)> {
        let p = op.p();
        let grid = &self.grid;
        let m = grid.mass();
        self.map(|mem, els, u| {
            let mut q = 0.0;
            for &k in els {
                let e = &grid.elems()[k];
                q += e.measure * op.norm_p(e.cell, elem_grad(e, u));
            }
            let mut n = 0.0;
            for &(i, x) in &mem.entries {
                let a = x.abs().powf(p);
                q += m[i] * pot[i] * a;
                n += m[i] * a;
            }
            (q, n)
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn corpus_shape() {
        let g = Arc::new(Grid::interval(0.0, 1.0, 21).unwrap());
        let c = Corpus::standard(&g);
        let hats = c.members.iter().filter(|m| matches!(m.kind, MemberKind::Hat(_))).count();
        assert_eq!(hats, 19);
        let sines = c.members.iter().filter(|m| matches!(m.kind, MemberKind::Sine(..))).count();
        assert_eq!(sines, 4);
        let g2 = Arc::new(Grid::rectangle([0.0, 0.0], [1.0, 1.0], [9, 9]).unwrap());
        let c2 = Corpus::smooth(&g2);
        let sines = c2.members.iter().filter(|m| matches!(m.kind, MemberKind::Sine(..))).count();
        assert_eq!(sines, 16);
    }

    #[test]
    fn energies_match_dense_evaluation() {
        let g = Arc::new(Grid::rectangle([0.0, 0.0], [1.0, 1.0], [9, 9]).unwrap());
        let op = AOperator::p_laplacian(3.0, 2).unwrap();
        let v = GridFunction::from_fn(&g, Space::W1p, |x| x[0] - 0.3);
        let c = Corpus::standard(&g);
        let es = c.energies(&op, v.values());
        for (m, (q, _)) in c.members.iter().zip(es).step_by(7) {
            let f = m.to_function(&g);
            let e = crate::discretization::energy(&op, &v, &f).unwrap();
            assert!((e.total - q).abs() < 1e-12 * (1.0 + q.abs()));
        }
    }
}
