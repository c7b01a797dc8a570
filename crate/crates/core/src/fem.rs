//! Plane-stress bilinear quadrilateral elasticity on an adaptive mesh.
//!
//! Every mesh node keeps both of its DOFs (`2n`, `2n+1`) in the global
//! system. Hanging-node DOFs are eliminated by the projection
//! `Q^T K Q + I_c`, where `Q` is the identity on unconstrained DOFs and maps
//! each constrained DOF to the mean of its two edge endpoints; the
//! constrained rows are left as unit rows and recovered afterwards with `Q`.
//! Dirichlet DOFs are eliminated symmetrically in the same way.

use std::collections::{BTreeMap, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::FemError;
use crate::mesh::AdaptiveMesh;
use crate::sparse::CsrMatrix;

pub type ElementMatrix = [[f64; 8]; 8];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaterialSpec {
    pub e0: f64,
    pub nu: f64,
    pub p: f64,
    pub rho_min: f64,
}

impl Default for MaterialSpec {
    fn default() -> Self {
        MaterialSpec {
            e0: 1.0,
            nu: 0.3,
            p: 3.0,
            rho_min: 1e-3,
        }
    }
}

impl MaterialSpec {
    pub fn with_penalty(self, p: f64) -> Self {
        MaterialSpec { p, ..self }
    }
}

/// 8x8 stiffness of a square plane-stress Q4 element with unit thickness,
/// integrated with 2x2 Gauss points. DOFs are `[u1, v1, .., u4, v4]` for the
/// corners counter-clockwise from lower-left.
pub fn element_stiffness_q4(e: f64, nu: f64, size: f64) -> ElementMatrix {
    let c = e / (1.0 - nu * nu);
    let d = [
        [c, c * nu, 0.0],
        [c * nu, c, 0.0],
        [0.0, 0.0, c * (1.0 - nu) / 2.0],
    ];
    let xi_n = [-1.0, 1.0, 1.0, -1.0];
    let eta_n = [-1.0, -1.0, 1.0, 1.0];
    let g = 1.0 / 3f64.sqrt();
    let det_j = size * size / 4.0;
    let inv_j = 2.0 / size;

    let mut k = [[0.0; 8]; 8];
    for &xi in &[-g, g] {
        for &eta in &[-g, g] {
            let mut b = [[0.0; 8]; 3];
            for a in 0..4 {
                let dx = 0.25 * xi_n[a] * (1.0 + eta * eta_n[a]) * inv_j;
                let dy = 0.25 * eta_n[a] * (1.0 + xi * xi_n[a]) * inv_j;
                b[0][2 * a] = dx;
                b[1][2 * a + 1] = dy;
                b[2][2 * a] = dy;
                b[2][2 * a + 1] = dx;
            }
            let mut db = [[0.0; 8]; 3];
            for r in 0..3 {
                for col in 0..8 {
                    db[r][col] = (0..3).map(|s| d[r][s] * b[s][col]).sum();
                }
            }
            for i in 0..8 {
                for j in 0..8 {
                    k[i][j] += det_j * (0..3).map(|r| b[r][i] * db[r][j]).sum::<f64>();
                }
            }
        }
    }
    // exact symmetry
    for i in 0..8 {
        for j in 0..i {
            let m = 0.5 * (k[i][j] + k[j][i]);
            k[i][j] = m;
            k[j][i] = m;
        }
    }
    k
}

/// SIMP-penalised modulus `rho^p E0`.
pub fn simp_modulus(rho: f64, p: f64, e0: f64) -> f64 {
    assert!(rho > 0.0 && rho <= 1.0, "density {rho} outside (0, 1]");
    rho.powf(p) * e0
}

/// Unit-modulus element stiffness, computed once per refinement level.
#[derive(Clone, Debug)]
pub struct StiffnessCache {
    nu: f64,
    h0: f64,
    by_level: HashMap<u8, ElementMatrix>,
}

impl StiffnessCache {
    pub fn new(nu: f64, h0: f64) -> Self {
        StiffnessCache {
            nu,
            h0,
            by_level: HashMap::new(),
        }
    }

    pub fn get(&mut self, level: u8) -> &ElementMatrix {
        let (nu, size) = (self.nu, self.h0 / (1u64 << level) as f64);
        self.by_level
            .entry(level)
            .or_insert_with(|| element_stiffness_q4(1.0, nu, size))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Component {
    X,
    Y,
}

impl Component {
    fn offset(self) -> usize {
        match self {
            Component::X => 0,
            Component::Y => 1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DomainEdge {
    Left,
    Right,
    Bottom,
    Top,
}

/// Geometric node selector, resolved against the current mesh with a
/// tolerance of half the finest element size.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Selector {
    /// The single node closest to the point.
    Point([f64; 2]),
    /// Every node on the segment.
    Segment([[f64; 2]; 2]),
    /// Every node on one side of the domain.
    Edge(DomainEdge),
}

impl fmt::Display for Selector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Selector::Point(p) => write!(f, "point({}, {})", p[0], p[1]),
            Selector::Segment([a, b]) => {
                write!(f, "segment(({}, {}) - ({}, {}))", a[0], a[1], b[0], b[1])
            }
            Selector::Edge(e) => write!(f, "edge({e:?})"),
        }
    }
}

impl Selector {
    pub fn resolve(&self, mesh: &AdaptiveMesh) -> Result<Vec<usize>, FemError> {
        let tol = 0.5 * mesh.size_at(mesh.max_level());
        let coords = (0..mesh.num_nodes()).map(|n| (n, mesh.node_coords(n)));
        let nodes: Vec<usize> = match self {
            Selector::Point(p) => coords
                .map(|(n, c)| (n, (c[0] - p[0]).hypot(c[1] - p[1])))
                .filter(|&(_, d)| d <= tol)
                .min_by(|a, b| a.1.total_cmp(&b.1))
                .map(|(n, _)| n)
                .into_iter()
                .collect(),
            Selector::Segment([a, b]) => coords
                .filter(|(_, c)| point_segment_distance(*c, *a, *b) <= tol)
                .map(|(n, _)| n)
                .collect(),
            Selector::Edge(edge) => {
                let (w, h) = mesh.domain();
                coords
                    .filter(|(_, c)| match edge {
                        DomainEdge::Left => c[0].abs() <= tol,
                        DomainEdge::Right => (c[0] - w).abs() <= tol,
                        DomainEdge::Bottom => c[1].abs() <= tol,
                        DomainEdge::Top => (c[1] - h).abs() <= tol,
                    })
                    .map(|(n, _)| n)
                    .collect()
            }
        };
        if nodes.is_empty() {
            return Err(FemError::EmptySelector(self.to_string()));
        }
        Ok(nodes)
    }
}

fn point_segment_distance(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((p[0] - a[0]) * dx + (p[1] - a[1]) * dy) / len2).clamp(0.0, 1.0)
    };
    (p[0] - a[0] - t * dx).hypot(p[1] - a[1] - t * dy)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FixedCondition {
    pub selector: Selector,
    pub components: Vec<Component>,
    #[serde(default)]
    pub value: f64,
}

/// A load whose magnitude is split evenly over the nodes its selector matches.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PointLoad {
    pub selector: Selector,
    pub component: Component,
    pub magnitude: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BoundarySpec {
    pub fixed: Vec<FixedCondition>,
    pub loads: Vec<PointLoad>,
}

/// Constrained DOF expressed as a weighted sum of two unconstrained DOFs.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DofConstraint {
    pub dof: usize,
    pub parents: [usize; 2],
    pub weights: [f64; 2],
}

#[derive(Clone, Debug)]
pub struct SparseSymSystem {
    /// Raw stiffness over all DOFs, before any constraint treatment.
    pub matrix: CsrMatrix,
    pub rhs: Vec<f64>,
    /// The interpolation `P` from unconstrained to hanging-node DOFs.
    pub interpolation: Vec<DofConstraint>,
    /// Dirichlet DOFs with prescribed values, sorted by DOF.
    pub fixed: Vec<(usize, f64)>,
}

impl SparseSymSystem {
    pub fn num_dofs(&self) -> usize {
        self.rhs.len()
    }

    pub fn num_free(&self) -> usize {
        self.num_dofs() - self.interpolation.len() - self.fixed.len()
    }
}

/// System after hanging-node projection and Dirichlet elimination; symmetric
/// positive definite over all DOFs.
#[derive(Clone, Debug)]
pub struct ConstrainedSystem {
    pub matrix: CsrMatrix,
    pub rhs: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DisplacementField {
    pub values: Vec<f64>,
}

impl DisplacementField {
    pub fn zeros(num_dofs: usize) -> Self {
        DisplacementField {
            values: vec![0.0; num_dofs],
        }
    }

    pub fn node(&self, n: usize) -> [f64; 2] {
        [self.values[2 * n], self.values[2 * n + 1]]
    }

    pub fn element(&self, conn: &[usize; 4]) -> [f64; 8] {
        let mut ue = [0.0; 8];
        for (a, &n) in conn.iter().enumerate() {
            ue[2 * a] = self.values[2 * n];
            ue[2 * a + 1] = self.values[2 * n + 1];
        }
        ue
    }
}

/// Sparsity pattern, scatter map and boundary data for one mesh; reused
/// across optimization steps until the mesh changes.
#[derive(Clone, Debug)]
pub struct Assembler {
    pattern: CsrMatrix,
    scatter: Vec<[usize; 64]>,
    levels: Vec<u8>,
    load: Vec<f64>,
    interpolation: Vec<DofConstraint>,
    fixed: Vec<(usize, f64)>,
    plan: Option<ProjectionPlan>,
}

impl Assembler {
    pub fn new(mesh: &AdaptiveMesh, bc: &BoundarySpec) -> Result<Self, FemError> {
        let ndof = 2 * mesh.num_nodes();
        let conn = mesh.connectivity();
        let dofs: Vec<[usize; 8]> = conn.iter().map(element_dofs).collect();

        let mut rows: Vec<Vec<usize>> = vec![Vec::new(); ndof];
        for d in &dofs {
            for &i in d {
                rows[i].extend_from_slice(d);
            }
        }
        for r in rows.iter_mut() {
            r.sort_unstable();
            r.dedup();
        }
        let pattern = CsrMatrix::from_pattern(&rows);
        let scatter = dofs
            .iter()
            .map(|d| {
                let mut s = [0; 64];
                for i in 0..8 {
                    for j in 0..8 {
                        s[8 * i + j] = pattern.find(d[i], d[j]).expect("pattern covers element");
                    }
                }
                s
            })
            .collect();

        let mut load = vec![0.0; ndof];
        for l in &bc.loads {
            let nodes = l.selector.resolve(mesh)?;
            let share = l.magnitude / nodes.len() as f64;
            for n in nodes {
                load[2 * n + l.component.offset()] += share;
            }
        }
        let mut fixed = BTreeMap::new();
        for f in &bc.fixed {
            for n in f.selector.resolve(mesh)? {
                for c in &f.components {
                    fixed.insert(2 * n + c.offset(), f.value);
                }
            }
        }
        let interpolation = mesh
            .hanging_constraints()?
            .iter()
            .flat_map(|h| {
                (0..2).map(move |c| DofConstraint {
                    dof: 2 * h.node + c,
                    parents: [2 * h.parents[0] + c, 2 * h.parents[1] + c],
                    weights: h.weights,
                })
            })
            .collect();

        Ok(Assembler {
            pattern,
            scatter,
            levels: mesh.active().iter().map(|e| e.level).collect(),
            load,
            interpolation,
            fixed: fixed.into_iter().collect(),
            plan: None,
        })
    }

    pub fn num_dofs(&self) -> usize {
        self.load.len()
    }

    /// `K = sum_e rho_e^p E0 k_e` with `f` from the point loads.
    pub fn assemble(
        &self,
        rho: &[f64],
        mat: &MaterialSpec,
        cache: &mut StiffnessCache,
    ) -> Result<SparseSymSystem, FemError> {
        if rho.len() != self.scatter.len() {
            return Err(FemError::DensityLength {
                got: rho.len(),
                expected: self.scatter.len(),
            });
        }
        let mut matrix = self.pattern.clone();
        let values = matrix.values_mut();
        for (e, scatter) in self.scatter.iter().enumerate() {
            let modulus = simp_modulus(rho[e], mat.p, mat.e0);
            let ke = cache.get(self.levels[e]);
            for i in 0..8 {
                for j in 0..8 {
                    values[scatter[8 * i + j]] += modulus * ke[i][j];
                }
            }
        }
        Ok(SparseSymSystem {
            matrix,
            rhs: self.load.clone(),
            interpolation: self.interpolation.clone(),
            fixed: self.fixed.clone(),
        })
    }

    /// Same as [`apply_constraints`], reusing the projection pattern between calls.
    pub fn constrain(&mut self, sys: &SparseSymSystem) -> ConstrainedSystem {
        let plan = self.plan.get_or_insert_with(|| ProjectionPlan::new(sys));
        plan.apply(sys)
    }
}

fn element_dofs(conn: &[usize; 4]) -> [usize; 8] {
    let mut d = [0; 8];
    for (a, &n) in conn.iter().enumerate() {
        d[2 * a] = 2 * n;
        d[2 * a + 1] = 2 * n + 1;
    }
    d
}

pub fn assemble(
    mesh: &AdaptiveMesh,
    rho: &[f64],
    mat: &MaterialSpec,
    bc: &BoundarySpec,
) -> Result<SparseSymSystem, FemError> {
    let mut cache = StiffnessCache::new(mat.nu, mesh.initial_size());
    Assembler::new(mesh, bc)?.assemble(rho, mat, &mut cache)
}

/// Projects out hanging-node DOFs and eliminates Dirichlet DOFs.
pub fn apply_constraints(sys: &SparseSymSystem) -> ConstrainedSystem {
    ProjectionPlan::new(sys).apply(sys)
}

/// Maps each stored entry of `K` to its destinations in `Q^T K Q`.
#[derive(Clone, Debug)]
struct ProjectionPlan {
    pattern: CsrMatrix,
    target_ptr: Vec<usize>,
    targets: Vec<(usize, f64)>,
    unit_diagonal: Vec<usize>,
    dirichlet: Vec<DirichletRow>,
}

#[derive(Clone, Debug)]
struct DirichletRow {
    dof: usize,
    value: f64,
    diag: usize,
    /// (column, position of (dof, column), position of (column, dof))
    couplings: Vec<(usize, usize, usize)>,
}

impl ProjectionPlan {
    fn new(sys: &SparseSymSystem) -> Self {
        let k = &sys.matrix;
        let n = k.dim();
        let mut map: Vec<Vec<(usize, f64)>> = (0..n).map(|i| vec![(i, 1.0)]).collect();
        for c in &sys.interpolation {
            map[c.dof] = vec![(c.parents[0], c.weights[0]), (c.parents[1], c.weights[1])];
        }

        let mut rows: Vec<Vec<usize>> = vec![Vec::new(); n];
        for i in 0..n {
            let (cols, _) = k.row(i);
            for &j in cols {
                for &(ti, _) in &map[i] {
                    for &(tj, _) in &map[j] {
                        rows[ti].push(tj);
                    }
                }
            }
        }
        for c in &sys.interpolation {
            rows[c.dof].push(c.dof);
        }
        for &(d, _) in &sys.fixed {
            rows[d].push(d);
        }
        for r in rows.iter_mut() {
            r.sort_unstable();
            r.dedup();
        }
        let pattern = CsrMatrix::from_pattern(&rows);

        let mut target_ptr = Vec::with_capacity(k.nnz() + 1);
        let mut targets = Vec::new();
        target_ptr.push(0);
        for i in 0..n {
            let (cols, _) = k.row(i);
            for &j in cols {
                for &(ti, wi) in &map[i] {
                    for &(tj, wj) in &map[j] {
                        targets.push((pattern.find(ti, tj).unwrap(), wi * wj));
                    }
                }
                target_ptr.push(targets.len());
            }
        }
        let unit_diagonal = sys
            .interpolation
            .iter()
            .map(|c| pattern.find(c.dof, c.dof).unwrap())
            .collect();
        let dirichlet = sys
            .fixed
            .iter()
            .map(|&(dof, value)| {
                let (cols, _) = pattern.row(dof);
                let couplings = cols
                    .iter()
                    .filter(|&&j| j != dof)
                    .map(|&j| {
                        (
                            j,
                            pattern.find(dof, j).unwrap(),
                            pattern.find(j, dof).unwrap(),
                        )
                    })
                    .collect();
                DirichletRow {
                    dof,
                    value,
                    diag: pattern.find(dof, dof).unwrap(),
                    couplings,
                }
            })
            .collect();
        ProjectionPlan {
            pattern,
            target_ptr,
            targets,
            unit_diagonal,
            dirichlet,
        }
    }

    fn apply(&self, sys: &SparseSymSystem) -> ConstrainedSystem {
        let mut matrix = self.pattern.clone();
        let values = matrix.values_mut();
        for (k, &v) in sys.matrix.values().iter().enumerate() {
            for &(pos, w) in &self.targets[self.target_ptr[k]..self.target_ptr[k + 1]] {
                values[pos] += w * v;
            }
        }
        let mut rhs = sys.rhs.clone();
        for c in &sys.interpolation {
            let f = rhs[c.dof];
            rhs[c.parents[0]] += c.weights[0] * f;
            rhs[c.parents[1]] += c.weights[1] * f;
            rhs[c.dof] = 0.0;
        }
        for &pos in &self.unit_diagonal {
            values[pos] = 1.0;
        }
        for row in &self.dirichlet {
            for &(j, pos_row, pos_col) in &row.couplings {
                rhs[j] -= values[pos_col] * row.value;
                values[pos_row] = 0.0;
                values[pos_col] = 0.0;
            }
        }
        for row in &self.dirichlet {
            values[row.diag] = 1.0;
            rhs[row.dof] = row.value;
        }
        ConstrainedSystem { matrix, rhs }
    }
}

/// Overwrites the constrained DOFs of the projected solution with `P u`.
pub fn recover_full(sys: &SparseSymSystem, u_hat: &[f64]) -> DisplacementField {
    let mut values = u_hat.to_vec();
    for c in &sys.interpolation {
        values[c.dof] = c.weights[0] * values[c.parents[0]] + c.weights[1] * values[c.parents[1]];
    }
    DisplacementField { values }
}

/// `f^T u`
pub fn compliance(f: &[f64], u: &[f64]) -> f64 {
    f.iter().zip(u).map(|(a, b)| a * b).sum()
}
