//! Reference implementations shared by the oracle suites and the acceptance run.
#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::seq::IteratorRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use topamr::fem::{
    element_stiffness_q4, simp_modulus, BoundarySpec, Component, DomainEdge, FixedCondition,
    MaterialSpec, PointLoad, Selector, SparseSymSystem,
};
use topamr::mesh::{AdaptiveMesh, MarkSet};
use topamr::sparse::CsrMatrix;
use topamr::topopt::OcParams;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn cantilever_bc(width: f64, height: f64) -> BoundarySpec {
    BoundarySpec {
        fixed: vec![FixedCondition {
            selector: Selector::Edge(DomainEdge::Left),
            components: vec![Component::X, Component::Y],
            value: 0.0,
        }],
        loads: vec![PointLoad {
            selector: Selector::Point([width, height / 2.0]),
            component: Component::Y,
            magnitude: -1.0,
        }],
    }
}

/// Refines random leaves (with compatibility closure) while the node count stays within `max_nodes`.
pub fn random_refined_mesh(
    rng: &mut impl Rng,
    nx: u32,
    ny: u32,
    max_nodes: usize,
    attempts: usize,
) -> AdaptiveMesh {
    let mut mesh = AdaptiveMesh::create_uniform(nx, ny, nx as f64, ny as f64).unwrap();
    for _ in 0..attempts {
        let k = rng.gen_range(1..=2);
        let mut marks = MarkSet::default();
        marks
            .refine
            .extend(mesh.active().iter().copied().choose_multiple(rng, k));
        let marks = mesh.enforce_compatibility(&marks);
        let mut next = mesh.clone();
        next.apply_marks(&marks).unwrap();
        if next.num_nodes() <= max_nodes {
            mesh = next;
        }
    }
    mesh
}

/// One random adaptation: some leaves refined, some complete sibling groups coarsened.
pub fn random_marks(rng: &mut impl Rng, mesh: &AdaptiveMesh, max_level: u8) -> MarkSet {
    let mut marks = MarkSet::default();
    for &e in mesh.active() {
        let roll: f64 = rng.gen();
        if roll < 0.15 && e.level < max_level {
            marks.refine.insert(e);
        } else if roll > 0.6 && e.level > 0 {
            marks.derefine.insert(e);
        }
    }
    marks
}

pub fn random_densities(rng: &mut impl Rng, n: usize, lo: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(lo..=1.0)).collect()
}

/// Dense global stiffness over all DOFs, summed element by element.
pub fn dense_stiffness(mesh: &AdaptiveMesh, rho: &[f64], mat: &MaterialSpec) -> DMatrix<f64> {
    let n = 2 * mesh.num_nodes();
    let mut k = DMatrix::zeros(n, n);
    for ((e, conn), &r) in mesh.active().iter().zip(mesh.connectivity()).zip(rho) {
        let ke = element_stiffness_q4(simp_modulus(r, mat.p, mat.e0), mat.nu, mesh.area(*e).sqrt());
        for a in 0..4 {
            for b in 0..4 {
                for (ca, cb) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                    k[(2 * conn[a] + ca, 2 * conn[b] + cb)] += ke[2 * a + ca][2 * b + cb];
                }
            }
        }
    }
    k
}

pub fn csr_to_dense(a: &CsrMatrix) -> DMatrix<f64> {
    let n = a.dim();
    let mut d = DMatrix::zeros(n, n);
    for i in 0..n {
        let (cols, vals) = a.row(i);
        for (&j, &v) in cols.iter().zip(vals) {
            d[(i, j)] += v;
        }
    }
    d
}

/// Solves `K u = f` by writing every DOF as `u = T a + g` over the independent
/// DOFs `a` (neither hanging nor fixed) and solving `T'KT a = T'(f - K g)` densely.
pub fn direct_elimination(k: &DMatrix<f64>, sys: &SparseSymSystem) -> Vec<f64> {
    let n = sys.num_dofs();
    let mut fixed = vec![None; n];
    for &(d, v) in &sys.fixed {
        fixed[d] = Some(v);
    }
    let mut hanging = vec![None; n];
    for c in &sys.interpolation {
        hanging[c.dof] = Some(*c);
    }
    let mut index = vec![usize::MAX; n];
    let mut m = 0;
    for d in 0..n {
        if hanging[d].is_none() && fixed[d].is_none() {
            index[d] = m;
            m += 1;
        }
    }

    let mut t = DMatrix::zeros(n, m);
    let mut g = DVector::zeros(n);
    let put = |row: usize, d: usize, w: f64, t: &mut DMatrix<f64>, g: &mut DVector<f64>| {
        assert!(
            hanging[d].is_none(),
            "constraint parent {d} is itself constrained"
        );
        match fixed[d] {
            Some(v) => g[row] += w * v,
            None => t[(row, index[d])] += w,
        }
    };
    for d in 0..n {
        match hanging[d] {
            Some(c) => {
                put(d, c.parents[0], c.weights[0], &mut t, &mut g);
                put(d, c.parents[1], c.weights[1], &mut t, &mut g);
            }
            None => put(d, d, 1.0, &mut t, &mut g),
        }
    }

    let f = DVector::from_column_slice(&sys.rhs);
    let kr = t.transpose() * k * &t;
    let fr = t.transpose() * (f - k * &g);
    let a = kr.cholesky().expect("reduced stiffness is SPD").solve(&fr);
    (t * a + g).iter().copied().collect()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

pub fn max_abs(a: &[f64]) -> f64 {
    a.iter().map(|x| x.abs()).fold(0.0, f64::max)
}

/// The mesh-independency filter summed over every pair of elements.
pub fn brute_force_filter(mesh: &AdaptiveMesh, rho: &[f64], dc: &[f64], rmin: f64) -> Vec<f64> {
    let active = mesh.active();
    (0..active.len())
        .map(|e| {
            let ce = mesh.center(active[e]);
            let (mut num, mut den) = (0.0, 0.0);
            for (d, &other) in active.iter().enumerate() {
                let cd = mesh.center(other);
                let h = (rmin - (ce[0] - cd[0]).hypot(ce[1] - cd[1])).max(0.0);
                num += h * mesh.area(other) * rho[d] * dc[d];
                den += h * mesh.area(other);
            }
            if den == 0.0 {
                dc[e]
            } else {
                num / (rho[e] * den)
            }
        })
        .collect()
}

fn oracle_candidate(rho: f64, dc: f64, vol: f64, lambda: f64, rho_min: f64, p: &OcParams) -> f64 {
    let raw = rho * ((-dc) / (lambda * vol)).max(0.0).powf(p.eta);
    raw.max(rho_min)
        .max(rho - p.move_limit)
        .min(1.0)
        .min(rho + p.move_limit)
}

/// OC densities at the multiplier found by scanning a log-spaced grid and
/// bisecting inside the bracketing cell.
pub fn oc_grid_oracle(
    rho: &[f64],
    dc: &[f64],
    volumes: &[f64],
    rho_min: f64,
    target: f64,
    params: &OcParams,
) -> Vec<f64> {
    let update = |lambda: f64| -> Vec<f64> {
        rho.iter()
            .zip(dc)
            .zip(volumes)
            .map(|((&r, &d), &v)| oracle_candidate(r, d, v, lambda, rho_min, params))
            .collect()
    };
    let material =
        |lambda: f64| -> f64 { update(lambda).iter().zip(volumes).map(|(r, v)| r * v).sum() };
    let grid: Vec<f64> = (0..=4000)
        .map(|k| 10f64.powf(-20.0 + 40.0 * k as f64 / 4000.0))
        .collect();
    let k = grid
        .windows(2)
        .position(|w| material(w[0]) > target && material(w[1]) <= target)
        .expect("target volume is bracketed by the grid");
    let (mut lo, mut hi) = (grid[k], grid[k + 1]);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if material(mid) > target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    update(hi)
}

/// Dense SPD test matrix `B'B + n I` with a sparse random `B`.
pub fn random_spd(rng: &mut impl Rng, n: usize) -> CsrMatrix {
    let b = DMatrix::from_fn(n, n, |_, _| {
        if rng.gen_bool(0.1) {
            rng.gen_range(-1.0..1.0)
        } else {
            0.0
        }
    });
    let a = b.transpose() * &b + DMatrix::identity(n, n) * (0.1 * n as f64);
    let mut t = Vec::new();
    for i in 0..n {
        for j in 0..n {
            if a[(i, j)] != 0.0 {
                t.push((i, j, a[(i, j)]));
            }
        }
    }
    CsrMatrix::from_triplets(n, t)
}

/// Five-point Laplacian on an `m x m` grid with Dirichlet boundary.
pub fn laplacian_2d(m: usize) -> CsrMatrix {
    let id = |i: usize, j: usize| i * m + j;
    let mut t = Vec::new();
    for i in 0..m {
        for j in 0..m {
            t.push((id(i, j), id(i, j), 4.0));
            if i > 0 {
                t.push((id(i, j), id(i - 1, j), -1.0));
            }
            if i + 1 < m {
                t.push((id(i, j), id(i + 1, j), -1.0));
            }
            if j > 0 {
                t.push((id(i, j), id(i, j - 1), -1.0));
            }
            if j + 1 < m {
                t.push((id(i, j), id(i, j + 1), -1.0));
            }
        }
    }
    CsrMatrix::from_triplets(m * m, t)
}
