mod common;

use std::sync::Arc;

use approx::assert_relative_eq;
use qcrit::dirichlet::{solve_dirichlet, Boundary, DirichletProblem};
use qcrit::discretization::{Grid, GridFunction};
use qcrit::eigensolver::{principal_eigen, SolverConfig};
use qcrit::operator::AOperator;

#[test]
fn shooting_matches_closed_form() {
    for p in [1.5, 2.0, 3.0, 4.0] {
        assert_relative_eq!(common::lambda1_shooting(p), common::lambda1_closed_form(p), max_relative = 1e-6);
    }
}

#[test]
fn eigenvalue_against_shooting() {
    let g = Arc::new(Grid::interval(0.0, 1.0, 501).unwrap());
    let v = GridFunction::constant(&g, 0.0);
    for p in [1.5, 2.5, 4.0] {
        let op = AOperator::p_laplacian(p, 1).unwrap();
        let r = principal_eigen(&op, &v, &g, &SolverConfig::default()).unwrap();
        assert_relative_eq!(r.lambda1, common::lambda1_shooting(p), max_relative = 5e-3);
    }
}

#[test]
fn torsion_against_closed_form() {
    let g = Arc::new(Grid::interval(0.0, 1.0, 801).unwrap());
    for p in [1.5, 2.0, 3.0] {
        let op = AOperator::p_laplacian(p, 1).unwrap();
        let prob = DirichletProblem::new(op, GridFunction::constant(&g, 0.0), GridFunction::constant(&g, 1.0), Boundary::Zero, g.clone()).unwrap();
        let s = solve_dirichlet(&prob, &SolverConfig::default()).unwrap();
        let peak = common::torsion(p, 0.5);
        let err = (0..g.num_nodes()).map(|i| (s.u.values()[i] - common::torsion(p, g.coord(i)[0])).abs()).fold(0.0, f64::max);
        assert!(err <= 1e-3 * peak, "p = {p}: sup error {err:e} against peak {peak}");
    }
}

#[test]
fn constant_potential_shifts_the_torsion_scale() {
    // for p = 2 and V = c > 0 the solution of -u'' + c u = 1 is 1/c (1 - cosh(√c (x - 1/2)) / cosh(√c / 2))
    let g = Arc::new(Grid::interval(0.0, 1.0, 1001).unwrap());
    let c: f64 = 4.0;
    let op = AOperator::p_laplacian(2.0, 1).unwrap();
    let prob = DirichletProblem::new(op, GridFunction::constant(&g, c), GridFunction::constant(&g, 1.0), Boundary::Zero, g.clone()).unwrap();
    let s = solve_dirichlet(&prob, &SolverConfig::default()).unwrap();
    let exact = |x: f64| (1.0 - (c.sqrt() * (x - 0.5)).cosh() / (0.5 * c.sqrt()).cosh()) / c;
    let err = (0..g.num_nodes()).map(|i| (s.u.values()[i] - exact(g.coord(i)[0])).abs()).fold(0.0, f64::max);
    assert!(err < 1e-6, "sup error {err:e}");
}
