//! Iterative solution of the equilibrium systems.
//!
//! Each system is rescaled symmetrically to unit diagonal, preconditioned with
//! a zero-fill incomplete Cholesky factor of the rescaled matrix, and solved
//! with preconditioned MINRES, warm-started from the previous step.

use std::time::Instant;

use log::{debug, warn};

use crate::error::SolverError;
use crate::fem::{recover_full, ConstrainedSystem, DisplacementField, SparseSymSystem};
use crate::mesh::AdaptiveMesh;
use crate::sparse::{dot, CsrMatrix};

/// `D^{-1/2} K D^{-1/2}` with the scaling needed to map solutions back.
#[derive(Clone, Debug)]
pub struct RescaledSystem {
    pub matrix: CsrMatrix,
    /// Diagonal of the original matrix.
    pub scale: Vec<f64>,
    pub rhs: Vec<f64>,
    inv_sqrt: Vec<f64>,
}

impl RescaledSystem {
    /// `x = D^{-1/2} x~`
    pub fn unscale(&self, x_tilde: &[f64]) -> Vec<f64> {
        x_tilde
            .iter()
            .zip(&self.inv_sqrt)
            .map(|(x, s)| x * s)
            .collect()
    }

    /// `x~ = D^{1/2} x`
    pub fn scale_guess(&self, x: &[f64]) -> Vec<f64> {
        x.iter().zip(&self.inv_sqrt).map(|(x, s)| x / s).collect()
    }
}

pub fn rescale(k: &CsrMatrix, f: &[f64]) -> Result<RescaledSystem, SolverError> {
    let scale = k.diagonal();
    if let Some((dof, &value)) = scale.iter().enumerate().find(|(_, &d)| !(d > 0.0)) {
        return Err(SolverError::SingularDof { dof, value });
    }
    let inv_sqrt: Vec<f64> = scale.iter().map(|d| 1.0 / d.sqrt()).collect();
    let mut matrix = k.clone();
    let row_ptr = matrix.row_ptr().to_vec();
    let cols = matrix.col_idx().to_vec();
    let values = matrix.values_mut();
    for i in 0..row_ptr.len() - 1 {
        for p in row_ptr[i]..row_ptr[i + 1] {
            let j = cols[p];
            values[p] = if i == j {
                1.0
            } else {
                values[p] * inv_sqrt[i] * inv_sqrt[j]
            };
        }
    }
    let rhs = f.iter().zip(&inv_sqrt).map(|(b, s)| b * s).collect();
    Ok(RescaledSystem {
        matrix,
        scale,
        rhs,
        inv_sqrt,
    })
}

/// Lower-triangular incomplete Cholesky factor on the pattern of `tril(A)`.
/// The diagonal entry is stored last in each row.
#[derive(Clone, Debug)]
pub struct IcFactor {
    n: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<f64>,
}

impl IcFactor {
    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn row(&self, i: usize) -> (&[usize], &[f64]) {
        let r = self.row_ptr[i]..self.row_ptr[i + 1];
        (&self.col_idx[r.clone()], &self.values[r])
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let (cols, vals) = self.row(i);
        cols.binary_search(&j).map_or(0.0, |k| vals[k])
    }

    /// `z = (L L^T)^{-1} r`
    pub fn solve(&self, r: &[f64], z: &mut [f64]) {
        z.copy_from_slice(r);
        for i in 0..self.n {
            let (cols, vals) = self.row(i);
            let last = cols.len() - 1;
            let mut acc = z[i];
            for k in 0..last {
                acc -= vals[k] * z[cols[k]];
            }
            z[i] = acc / vals[last];
        }
        for i in (0..self.n).rev() {
            let (cols, vals) = self.row(i);
            let last = cols.len() - 1;
            z[i] /= vals[last];
            let zi = z[i];
            for k in 0..last {
                z[cols[k]] -= vals[k] * zi;
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NonPositivePivot {
    pub row: usize,
    pub value: f64,
}

/// IC(0): Cholesky restricted to the existing lower-triangular pattern.
pub fn ic0(a: &CsrMatrix) -> Result<IcFactor, NonPositivePivot> {
    ic0_shifted(a, 0.0)
}

/// IC(0) of `A + alpha diag(A)`.
pub fn ic0_shifted(a: &CsrMatrix, alpha: f64) -> Result<IcFactor, NonPositivePivot> {
    let n = a.dim();
    let mut row_ptr = Vec::with_capacity(n + 1);
    let mut col_idx = Vec::new();
    let mut values: Vec<f64> = Vec::new();
    row_ptr.push(0);
    for i in 0..n {
        let (cols, vals) = a.row(i);
        let start = col_idx.len();
        for (&j, &v) in cols.iter().zip(vals) {
            if j < i {
                col_idx.push(j);
                values.push(v);
            } else if j == i {
                col_idx.push(j);
                values.push(v * (1.0 + alpha));
            }
        }
        if col_idx.last() != Some(&i) {
            return Err(NonPositivePivot { row: i, value: 0.0 });
        }
        let end = col_idx.len();
        for p in start..end - 1 {
            let k = col_idx[p];
            // sum_{j<k} L[i,j] L[k,j] over the shared pattern
            let (kr0, kr1) = (row_ptr[k], row_ptr[k + 1] - 1);
            let (mut a_p, mut b_p) = (start, kr0);
            let mut s = 0.0;
            while a_p < p && b_p < kr1 {
                let (ca, cb) = (col_idx[a_p], col_idx[b_p]);
                if ca == cb {
                    s += values[a_p] * values[b_p];
                    a_p += 1;
                    b_p += 1;
                } else if ca < cb {
                    a_p += 1;
                } else {
                    b_p += 1;
                }
            }
            values[p] = (values[p] - s) / values[kr1];
        }
        let s: f64 = values[start..end - 1].iter().map(|v| v * v).sum();
        let d = values[end - 1] - s;
        if !(d > 0.0) {
            return Err(NonPositivePivot { row: i, value: d });
        }
        values[end - 1] = d.sqrt();
        row_ptr.push(end);
    }
    Ok(IcFactor {
        n,
        row_ptr,
        col_idx,
        values,
    })
}

/// Diagonal shifts tried in turn when IC(0) breaks down.
const IC_SHIFTS: [f64; 6] = [0.0, 1e-3, 1e-2, 5e-2, 0.2, 1.0];

#[derive(Clone, Debug)]
pub enum Preconditioner {
    Identity,
    IncompleteCholesky(IcFactor),
    Jacobi(Vec<f64>),
}

impl Preconditioner {
    /// IC(0) of `a`. When a pivot breaks down the factorization is retried
    /// on `A + alpha diag(A)` for growing `alpha`, and Jacobi is the last resort.
    pub fn ic0_or_jacobi(a: &CsrMatrix) -> Self {
        let mut last = None;
        for alpha in IC_SHIFTS {
            match ic0_shifted(a, alpha) {
                Ok(f) => {
                    if let Some(p) = last {
                        debug!("IC(0) breakdown {p:?}; using diagonal shift {alpha}");
                    }
                    return Preconditioner::IncompleteCholesky(f);
                }
                Err(p) => last = Some(p),
            }
        }
        let p = last.expect("at least one shift tried");
        warn!(
            "IC(0) pivot {} at row {} is not positive; falling back to Jacobi",
            p.value, p.row
        );
        Preconditioner::Jacobi(a.diagonal().iter().map(|d| 1.0 / d).collect())
    }

    pub fn apply(&self, r: &[f64], z: &mut [f64]) {
        match self {
            Preconditioner::Identity => z.copy_from_slice(r),
            Preconditioner::IncompleteCholesky(f) => f.solve(r, z),
            Preconditioner::Jacobi(inv) => {
                for ((zi, ri), d) in z.iter_mut().zip(r).zip(inv) {
                    *zi = ri * d;
                }
            }
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SolveStats {
    pub iterations: usize,
    /// Preconditioned residual norm relative to the preconditioned norm of the right-hand side.
    pub final_relres: f64,
    pub wall_time: f64,
    pub converged: bool,
    /// Relative preconditioned residual after each iteration, starting with the initial one.
    pub history: Vec<f64>,
}

/// Preconditioned MINRES for symmetric `A` and SPD `M^{-1}`.
///
/// Stops when the preconditioned residual norm falls below
/// `tol * ||b||_{M^{-1}}`; with a zero initial guess that is the initial
/// residual. Reaching `maxit` is reported through `converged = false`.
pub fn minres(
    apply_a: impl Fn(&[f64], &mut [f64]),
    apply_minv: impl Fn(&[f64], &mut [f64]),
    b: &[f64],
    x0: Option<&[f64]>,
    tol: f64,
    maxit: usize,
) -> Result<(Vec<f64>, SolveStats), SolverError> {
    let start = Instant::now();
    let n = b.len();
    let mut x = match x0 {
        Some(x0) if x0.len() != n => {
            return Err(SolverError::Dimension {
                expected: n,
                got: x0.len(),
            })
        }
        Some(x0) => x0.to_vec(),
        None => vec![0.0; n],
    };

    let mut y = vec![0.0; n];
    apply_minv(b, &mut y);
    let bnorm_sq = dot(b, &y);
    if bnorm_sq < 0.0 {
        return Err(SolverError::IndefinitePreconditioner(bnorm_sq));
    }
    let bnorm = bnorm_sq.sqrt();
    let mut stats = SolveStats {
        converged: true,
        ..Default::default()
    };
    if bnorm == 0.0 {
        x.iter_mut().for_each(|v| *v = 0.0);
        stats.history.push(0.0);
        stats.wall_time = start.elapsed().as_secs_f64();
        return Ok((x, stats));
    }

    let mut r1 = vec![0.0; n];
    apply_a(&x, &mut r1);
    for (r, bi) in r1.iter_mut().zip(b) {
        *r = bi - *r;
    }
    apply_minv(&r1, &mut y);
    let beta1_sq = dot(&r1, &y);
    if beta1_sq < 0.0 {
        return Err(SolverError::IndefinitePreconditioner(beta1_sq));
    }
    let beta1 = beta1_sq.sqrt();
    stats.history.push(beta1 / bnorm);
    if beta1 <= tol * bnorm {
        stats.final_relres = beta1 / bnorm;
        stats.wall_time = start.elapsed().as_secs_f64();
        return Ok((x, stats));
    }

    let mut r2 = r1.clone();
    let mut v = vec![0.0; n];
    let mut w = vec![0.0; n];
    let mut w1 = vec![0.0; n];
    let mut w2 = vec![0.0; n];
    let (mut oldb, mut beta) = (0.0, beta1);
    let (mut dbar, mut epsln, mut phibar) = (0.0, 0.0, beta1);
    let (mut cs, mut sn) = (-1.0f64, 0.0f64);
    stats.converged = false;

    for itn in 1..=maxit {
        let s = 1.0 / beta;
        for (vi, yi) in v.iter_mut().zip(&y) {
            *vi = s * yi;
        }
        apply_a(&v, &mut y);
        if itn >= 2 {
            let f = beta / oldb;
            for (yi, ri) in y.iter_mut().zip(&r1) {
                *yi -= f * ri;
            }
        }
        let alfa = dot(&v, &y);
        let f = alfa / beta;
        for (yi, ri) in y.iter_mut().zip(&r2) {
            *yi -= f * ri;
        }
        std::mem::swap(&mut r1, &mut r2);
        r2.copy_from_slice(&y);
        apply_minv(&r2, &mut y);
        oldb = beta;
        let beta_sq = dot(&r2, &y);
        if beta_sq < 0.0 {
            return Err(SolverError::IndefinitePreconditioner(beta_sq));
        }
        beta = beta_sq.sqrt();

        let oldeps = epsln;
        let delta = cs * dbar + sn * alfa;
        let gbar = sn * dbar - cs * alfa;
        epsln = sn * beta;
        dbar = -cs * beta;
        let gamma = gbar.hypot(beta).max(f64::EPSILON);
        cs = gbar / gamma;
        sn = beta / gamma;
        let phi = cs * phibar;
        phibar *= sn;

        let denom = 1.0 / gamma;
        std::mem::swap(&mut w1, &mut w2);
        std::mem::swap(&mut w2, &mut w);
        for i in 0..n {
            w[i] = (v[i] - oldeps * w1[i] - delta * w2[i]) * denom;
            x[i] += phi * w[i];
        }
        if !phibar.is_finite() || !phi.is_finite() {
            return Err(SolverError::NotFinite(itn));
        }
        stats.iterations = itn;
        stats.history.push(phibar / bnorm);
        if phibar <= tol * bnorm {
            stats.converged = true;
            break;
        }
        if beta == 0.0 {
            warn!("MINRES breakdown at iteration {itn}: residual {phibar:e} with beta = 0");
            break;
        }
    }
    stats.final_relres = phibar / bnorm;
    stats.wall_time = start.elapsed().as_secs_f64();
    Ok((x, stats))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SolverOptions {
    pub tol: f64,
    /// `None` selects `max(10 sqrt(free dofs), 1000)`.
    pub maxit: Option<usize>,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            tol: 1e-8,
            maxit: None,
        }
    }
}

impl SolverOptions {
    pub fn max_iterations(&self, free_dofs: usize) -> usize {
        self.maxit
            .unwrap_or_else(|| ((10.0 * (free_dofs as f64).sqrt()) as usize).max(1000))
    }
}

/// Rescale, factor, solve with MINRES from the warm start, unscale, and
/// interpolate the hanging-node DOFs.
pub fn solve_equilibrium(
    sys: &SparseSymSystem,
    constrained: &ConstrainedSystem,
    warm: Option<&[f64]>,
    opts: &SolverOptions,
) -> Result<(DisplacementField, SolveStats), SolverError> {
    let scaled = rescale(&constrained.matrix, &constrained.rhs)?;
    let precond = Preconditioner::ic0_or_jacobi(&scaled.matrix);
    if let Some(u) = warm {
        if u.len() != sys.num_dofs() {
            return Err(SolverError::Dimension {
                expected: sys.num_dofs(),
                got: u.len(),
            });
        }
    }
    let x0 = warm.map(|u| {
        // the projected unknowns vanish on hanging dofs and equal the prescribed values on fixed ones
        let mut guess = u.to_vec();
        for c in &sys.interpolation {
            guess[c.dof] = 0.0;
        }
        for &(d, v) in &sys.fixed {
            guess[d] = v;
        }
        scaled.scale_guess(&guess)
    });
    let maxit = opts.max_iterations(sys.num_free());
    let (xt, stats) = minres(
        |v, out| scaled.matrix.spmv(v, out),
        |r, z| precond.apply(r, z),
        &scaled.rhs,
        x0.as_deref(),
        opts.tol,
        maxit,
    )?;
    if !stats.converged {
        warn!(
            "MINRES stopped at {} iterations with relative residual {:e}",
            stats.iterations, stats.final_relres
        );
    }
    let u_hat = scaled.unscale(&xt);
    Ok((recover_full(sys, &u_hat), stats))
}

/// Maps a displacement field onto a new mesh: persisting nodes keep their
/// values and new nodes take the bilinear interpolant of the old field.
pub fn transfer_displacement(old: &AdaptiveMesh, u: &[f64], new: &AdaptiveMesh) -> Vec<f64> {
    let mut out = vec![0.0; 2 * new.num_nodes()];
    let old_conn = old.connectivity();
    for (n, &key) in new.node_keys().iter().enumerate() {
        if let Some(m) = old.node_id(key) {
            out[2 * n] = u[2 * m];
            out[2 * n + 1] = u[2 * m + 1];
            continue;
        }
        let [x, y] = new.key_coords(key);
        let e = old.locate_point(x, y);
        let Some(idx) = old.active_index(e) else {
            continue;
        };
        let el = old.element(e).expect("active element");
        let s = ((x - el.origin[0]) / el.size).clamp(0.0, 1.0);
        let t = ((y - el.origin[1]) / el.size).clamp(0.0, 1.0);
        let w = [(1.0 - s) * (1.0 - t), s * (1.0 - t), s * t, (1.0 - s) * t];
        for (a, &node) in old_conn[idx].iter().enumerate() {
            out[2 * n] += w[a] * u[2 * node];
            out[2 * n + 1] += w[a] * u[2 * node + 1];
        }
    }
    out
}
