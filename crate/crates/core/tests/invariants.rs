use std::f64::consts::PI;
use std::sync::Arc;

use proptest::prelude::*;
use qcrit::cli::expr::Expr;
use qcrit::dirichlet::{solve_dirichlet, Boundary, DirichletProblem};
use qcrit::discretization::{energy, Grid, GridFunction, Space};
use qcrit::eigensolver::{principal_eigen, SolverConfig};
use qcrit::identities::picone_check;
use qcrit::operator::{AOperator, CellField};

fn grid(n: usize) -> Arc<Grid> {
    Arc::new(Grid::interval(0.0, 1.0, n).unwrap())
}

fn trig(g: &Arc<Grid>, space: Space, a: &[f64]) -> GridFunction {
    GridFunction::from_fn(g, space, |x| a.iter().enumerate().map(|(k, c)| c * ((k + 1) as f64 * PI * x[0]).sin()).sum())
}

fn family(kind: usize, p: f64) -> AOperator {
    let w = CellField::Uniform([0.7, 1.8]);
    let m = CellField::Uniform([[1.5, -0.4], [-0.4, 0.9]]);
    match kind {
        0 => AOperator::p_laplacian(p, 2).unwrap(),
        1 => AOperator::pa_laplacian(p, 2, m).unwrap(),
        2 => AOperator::pseudo_p_laplacian(p, 2, w).unwrap(),
        _ => AOperator::convex_combination(p, 2, 0.3, w, m).unwrap(),
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, ..ProptestConfig::default() })]

    #[test]
    fn euler_identity_and_homogeneity(kind in 0usize..4, p in 1.2f64..5.0, xi in prop::array::uniform2(-3.0f64..3.0), t in -4.0f64..4.0) {
        let op = family(kind, p);
        let a = op.eval_a(0, &xi).unwrap();
        let f = op.eval_f(0, &xi).unwrap();
        prop_assert!((dot(&a, &xi) - p * f).abs() <= 1e-12 * (1.0 + p * f));
        let txi = [t * xi[0], t * xi[1]];
        let at = op.eval_a(0, &txi).unwrap();
        let s = t.abs().powf(p - 2.0) * t;
        for k in 0..2 {
            prop_assert!((at[k] - s * a[k]).abs() <= 1e-11 * (1.0 + (s * a[k]).abs()));
        }
    }

    #[test]
    fn monotone_vector_field(kind in 0usize..4, p in 1.2f64..5.0, xi in prop::array::uniform2(-3.0f64..3.0), eta in prop::array::uniform2(-3.0f64..3.0)) {
        let op = family(kind, p);
        let (a, b) = (op.eval_a(0, &xi).unwrap(), op.eval_a(0, &eta).unwrap());
        let d = [xi[0] - eta[0], xi[1] - eta[1]];
        let m = dot(&[a[0] - b[0], a[1] - b[1]], &d);
        prop_assert!(m >= -1e-12 * (1.0 + dot(&a, &xi).abs() + dot(&b, &eta).abs()));
    }

    #[test]
    fn energy_is_p_homogeneous(p in 1.3f64..4.0, a in prop::collection::vec(-1.0f64..1.0, 3), v in prop::collection::vec(-5.0f64..5.0, 2), t in -3.0f64..3.0) {
        let g = grid(101);
        let op = AOperator::p_laplacian(p, 1).unwrap();
        let u = trig(&g, Space::W1p0, &a);
        let pot = GridFunction::from_fn(&g, Space::W1p, |x| v[0] + v[1] * x[0]);
        let q = energy(&op, &pot, &u).unwrap();
        let qt = energy(&op, &pot, &u.scaled(t)).unwrap();
        let s = t.abs().powf(p);
        prop_assert!((qt.gradient_term - s * q.gradient_term).abs() <= 1e-10 * (1.0 + s * q.gradient_term));
        prop_assert!((qt.potential_term - s * q.potential_term).abs() <= 1e-10 * (1.0 + (s * q.potential_term).abs()));
    }

    #[test]
    fn picone_integrand_is_nonnegative_and_exact(p in 1.3f64..4.0, a in prop::collection::vec(-0.4f64..0.4, 3), b in prop::collection::vec(-0.3f64..0.3, 3)) {
        let g = grid(151);
        let op = AOperator::p_laplacian(p, 1).unwrap();
        let u = GridFunction::from_fn(&g, Space::W1p0, |x| {
            let s = (PI * x[0]).sin();
            (s * (1.0 + a.iter().enumerate().map(|(k, c)| c * ((k + 2) as f64 * PI * x[0]).cos()).sum::<f64>())).max(0.0)
        });
        let v = GridFunction::from_fn(&g, Space::W1p, |x| 1.0 + b.iter().enumerate().map(|(k, c)| c * ((k + 1) as f64 * PI * x[0]).sin()).sum::<f64>());
        let r = picone_check(&op, &GridFunction::constant(&g, 0.0), &u, &v, 0.0).unwrap();
        prop_assert!(r.max_lr_gap <= 1e-10);
        prop_assert!(r.min_l >= -1e-12);
    }

    #[test]
    fn expression_arithmetic(a in -100.0f64..100.0, b in 0.5f64..100.0, x in -2.0f64..2.0) {
        let e = Expr::parse(&format!("({a:?}) * x + ({b:?}) / 2 - x^2")).unwrap();
        prop_assert!((e.eval(x, 0.0) - (a * x + b / 2.0 - x * x)).abs() <= 1e-12 * (1.0 + a.abs() + b));
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 12, ..ProptestConfig::default() })]

    #[test]
    fn eigenvalue_shift_covariance(p in prop::sample::select(vec![1.5, 2.0, 3.0]), a in prop::collection::vec(-4.0f64..4.0, 2), c in -8.0f64..8.0) {
        let g = grid(81);
        let op = AOperator::p_laplacian(p, 1).unwrap();
        let v = trig(&g, Space::W1p, &a);
        let cfg = SolverConfig::default();
        let l0 = principal_eigen(&op, &v, &g, &cfg).unwrap().lambda1;
        let l1 = principal_eigen(&op, &v.map(|x| x + c), &g, &cfg).unwrap().lambda1;
        prop_assert!((l1 - l0 - c).abs() <= 1e-12 * (1.0 + l0.abs()));
    }

    #[test]
    fn eigenvalue_is_monotone_in_the_potential(p in prop::sample::select(vec![1.5, 2.0, 3.0]), a in prop::collection::vec(-4.0f64..4.0, 2), d in prop::collection::vec(0.0f64..3.0, 2)) {
        let g = grid(81);
        let op = AOperator::p_laplacian(p, 1).unwrap();
        let v = trig(&g, Space::W1p, &a);
        let w = GridFunction::from_fn(&g, Space::W1p, |x| v.values()[((x[0] * 80.0).round()) as usize] + d[0] + d[1] * x[0]);
        let cfg = SolverConfig::default();
        let l0 = principal_eigen(&op, &v, &g, &cfg).unwrap().lambda1;
        let l1 = principal_eigen(&op, &w, &g, &cfg).unwrap().lambda1;
        prop_assert!(l1 >= l0 - 1e-9 * (1.0 + l0.abs()));
    }

    #[test]
    fn nonnegative_data_gives_nonnegative_solutions(p in prop::sample::select(vec![1.5, 2.0, 3.0]), a in prop::collection::vec(0.0f64..2.0, 3), c in 0.0f64..5.0) {
        let g = grid(101);
        let op = AOperator::p_laplacian(p, 1).unwrap();
        let rhs = GridFunction::from_fn(&g, Space::W1p, |x| a[0] + a[1] * x[0] + a[2] * (PI * x[0]).sin() + 0.1);
        let prob = DirichletProblem::new(op, GridFunction::constant(&g, c), rhs, Boundary::Zero, g.clone()).unwrap();
        let s = solve_dirichlet(&prob, &SolverConfig::default()).unwrap();
        prop_assert!((0..g.num_nodes()).filter(|&i| g.is_free(i)).all(|i| s.u.values()[i] > 0.0));
    }
}
