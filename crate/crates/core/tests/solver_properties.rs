mod common;

use common::*;
use nalgebra::DVector;
use rand::Rng;
use topamr::fem::{apply_constraints, assemble, MaterialSpec, SparseSymSystem};
use topamr::linsolve::{
    minres, rescale, solve_equilibrium, transfer_displacement, Preconditioner, SolveStats,
    SolverOptions,
};
use topamr::mesh::{AdaptiveMesh, MarkSet};
use topamr::sparse::CsrMatrix;

fn fem_system(mesh: &AdaptiveMesh, rho: &[f64]) -> SparseSymSystem {
    let (w, h) = mesh.domain();
    assemble(mesh, rho, &MaterialSpec::default(), &cantilever_bc(w, h)).unwrap()
}

fn solve(a: &CsrMatrix, b: &[f64], m: &Preconditioner) -> (Vec<f64>, SolveStats) {
    minres(
        |v, out| a.spmv(v, out),
        |r, z| m.apply(r, z),
        b,
        None,
        1e-10,
        10 * b.len(),
    )
    .unwrap()
}

fn assert_monotone(history: &[f64]) {
    assert!(history.len() > 2);
    for w in history.windows(2) {
        assert!(
            w[1] <= w[0] * (1.0 + 1e-10),
            "residual rose from {:e} to {:e}",
            w[0],
            w[1]
        );
    }
}

#[test]
fn minres_residuals_never_increase() {
    let mut r = rng(41);
    for _ in 0..10 {
        let mesh = random_refined_mesh(&mut r, 8, 4, 2000, 10);
        let rho = random_densities(&mut r, mesh.num_active(), 1e-3);
        let con = apply_constraints(&fem_system(&mesh, &rho));
        let s = rescale(&con.matrix, &con.rhs).unwrap();
        for m in [
            Preconditioner::Identity,
            Preconditioner::ic0_or_jacobi(&s.matrix),
        ] {
            let (_, stats) = solve(&s.matrix, &s.rhs, &m);
            assert!(stats.converged);
            assert_monotone(&stats.history);
        }
    }
}

#[test]
fn rescaled_matrix_has_unit_diagonal() {
    let mut r = rng(42);
    for _ in 0..10 {
        let mesh = random_refined_mesh(&mut r, 8, 4, 2000, 10);
        let rho = random_densities(&mut r, mesh.num_active(), 1e-3);
        let con = apply_constraints(&fem_system(&mesh, &rho));
        let s = rescale(&con.matrix, &con.rhs).unwrap();
        assert!(s.matrix.diagonal().iter().all(|&d| (d - 1.0).abs() < 1e-14));
        assert!(s.matrix.asymmetry() < 1e-14);
        let off = s.matrix.max_abs();
        assert!(
            off <= 1.0 + 1e-14,
            "entry {off} exceeds the unit diagonal of an SPD matrix"
        );
    }
}

#[test]
fn rescaling_does_not_worsen_conditioning() {
    let mut r = rng(43);
    let mesh = AdaptiveMesh::create_uniform(8, 4, 2.0, 1.0).unwrap();
    let rho: Vec<f64> = (0..mesh.num_active())
        .map(|_| if r.gen_bool(0.5) { 1.0 } else { 1e-3 })
        .collect();
    let con = apply_constraints(&fem_system(&mesh, &rho));
    let s = rescale(&con.matrix, &con.rhs).unwrap();
    let cond = |a: &CsrMatrix| {
        let ev = csr_to_dense(a).symmetric_eigenvalues();
        ev.max() / ev.min()
    };
    assert!(cond(&s.matrix) < cond(&con.matrix));
}

#[test]
fn warm_start_needs_no_more_iterations_than_cold() {
    let mut r = rng(44);
    let opts = SolverOptions::default();
    for _ in 0..15 {
        let mesh = random_refined_mesh(&mut r, 16, 8, 4000, 12);
        let rho = random_densities(&mut r, mesh.num_active(), 0.05);
        let sys = fem_system(&mesh, &rho);
        let (u, _) = solve_equilibrium(&sys, &apply_constraints(&sys), None, &opts).unwrap();

        // a small design update, as between two optimization steps
        let next: Vec<f64> = rho
            .iter()
            .map(|&x| (x * r.gen_range(0.97..1.03)).clamp(1e-3, 1.0))
            .collect();
        let sys = fem_system(&mesh, &next);
        let con = apply_constraints(&sys);
        let (_, cold) = solve_equilibrium(&sys, &con, None, &opts).unwrap();
        let (_, warm) = solve_equilibrium(&sys, &con, Some(&u.values), &opts).unwrap();
        assert!(warm.converged && cold.converged);
        assert!(
            warm.iterations <= cold.iterations,
            "warm {} > cold {}",
            warm.iterations,
            cold.iterations
        );
    }
}

#[test]
fn warm_start_across_refinement_needs_no_more_iterations() {
    let mut r = rng(45);
    let opts = SolverOptions::default();
    for _ in 0..10 {
        let mesh = random_refined_mesh(&mut r, 16, 8, 2000, 6);
        let rho = random_densities(&mut r, mesh.num_active(), 0.3);
        let sys = fem_system(&mesh, &rho);
        let (u, _) = solve_equilibrium(&sys, &apply_constraints(&sys), None, &opts).unwrap();

        let mut marks = MarkSet::default();
        marks
            .refine
            .extend(mesh.active().iter().copied().filter(|_| r.gen_bool(0.2)));
        let mut fine = mesh.clone();
        fine.apply_marks(&mesh.enforce_compatibility(&marks))
            .unwrap();
        let fine_rho: Vec<f64> = fine
            .active()
            .iter()
            .map(|&e| {
                let c = mesh.center(e);
                rho[mesh.active_index(mesh.locate_point(c[0], c[1])).unwrap()]
            })
            .collect();
        let guess = transfer_displacement(&mesh, &u.values, &fine);
        let sys = fem_system(&fine, &fine_rho);
        let con = apply_constraints(&sys);
        let (_, cold) = solve_equilibrium(&sys, &con, None, &opts).unwrap();
        let (_, warm) = solve_equilibrium(&sys, &con, Some(&guess), &opts).unwrap();
        assert!(
            warm.iterations <= cold.iterations,
            "warm {} > cold {}",
            warm.iterations,
            cold.iterations
        );
    }
}

#[test]
fn random_spd_systems_match_dense_solve() {
    let mut r = rng(46);
    for _ in 0..10 {
        let a = random_spd(&mut r, 50);
        let b: Vec<f64> = (0..50).map(|_| r.gen_range(-1.0..1.0)).collect();
        let s = rescale(&a, &b).unwrap();
        let (xt, stats) = solve(&s.matrix, &s.rhs, &Preconditioner::ic0_or_jacobi(&s.matrix));
        assert!(stats.converged);
        let x = s.unscale(&xt);
        let want = csr_to_dense(&a)
            .cholesky()
            .unwrap()
            .solve(&DVector::from_column_slice(&b));
        let err = max_abs_diff(&x, want.as_slice()) / max_abs(want.as_slice());
        assert!(err < 1e-8, "relative error {err:e}");
    }
}

#[test]
fn incomplete_cholesky_cuts_iterations_on_a_laplacian() {
    let a = laplacian_2d(30);
    let b = vec![1.0; a.dim()];
    let (_, plain) = solve(&a, &b, &Preconditioner::Identity);
    let ic = Preconditioner::ic0_or_jacobi(&a);
    assert!(matches!(ic, Preconditioner::IncompleteCholesky(_)));
    let (x, pre) = solve(&a, &b, &ic);
    assert!(pre.converged && plain.converged);
    assert!(
        3 * pre.iterations < 2 * plain.iterations,
        "IC {} vs plain {}",
        pre.iterations,
        plain.iterations
    );
    let mut ax = vec![0.0; b.len()];
    a.spmv(&x, &mut ax);
    assert!(max_abs_diff(&ax, &b) < 1e-8);
}
