//! SIMP sensitivities, volume-weighted sensitivity filtering and the
//! Optimality Criteria density update.

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::OptError;
use crate::fem::{DisplacementField, MaterialSpec, StiffnessCache};
use crate::mesh::{AdaptiveMesh, CenterGrid};

/// Element densities in active-element order.
#[derive(Clone, Debug, PartialEq)]
pub struct DensityField {
    pub values: Vec<f64>,
    pub rho_min: f64,
}

impl DensityField {
    pub fn uniform(n: usize, value: f64, rho_min: f64) -> Self {
        DensityField {
            values: vec![value; n],
            rho_min,
        }
    }

    /// `sum_e rho_e V_e`
    pub fn material(&self, volumes: &[f64]) -> f64 {
        self.values.iter().zip(volumes).map(|(r, v)| r * v).sum()
    }
}

pub fn element_volumes(mesh: &AdaptiveMesh) -> Vec<f64> {
    mesh.active().iter().map(|&e| mesh.area(e)).collect()
}

/// `dc/drho_e = -p rho_e^(p-1) E0 u_e^T k0 u_e`, clamped to be non-positive.
pub fn sensitivities(
    mesh: &AdaptiveMesh,
    rho: &[f64],
    u: &DisplacementField,
    mat: &MaterialSpec,
    cache: &mut StiffnessCache,
) -> Vec<f64> {
    mesh.active()
        .iter()
        .zip(mesh.connectivity())
        .zip(rho)
        .map(|((e, conn), &r)| {
            let ue = u.element(conn);
            let k0 = cache.get(e.level);
            let mut energy = 0.0;
            for i in 0..8 {
                let ki: f64 = (0..8).map(|j| k0[i][j] * ue[j]).sum();
                energy += ue[i] * ki;
            }
            (-mat.p * r.powf(mat.p - 1.0) * mat.e0 * energy).min(0.0)
        })
        .collect()
}

/// Distance weights `H_de V_d` for every pair with centre distance below `rmin`.
#[derive(Clone, Debug)]
pub struct SensitivityFilter {
    ptr: Vec<usize>,
    entries: Vec<(usize, f64)>,
    effective: bool,
}

impl SensitivityFilter {
    pub fn new(mesh: &AdaptiveMesh, rmin: f64) -> Self {
        let n = mesh.num_active();
        let mut ptr = Vec::with_capacity(n + 1);
        let mut entries = Vec::new();
        let mut effective = false;
        ptr.push(0);
        if rmin > 0.0 {
            let grid = CenterGrid::new(mesh, rmin);
            let active = mesh.active();
            for e in 0..n {
                let start = entries.len();
                grid.for_each_within(grid.centers()[e], rmin, |d, dist| {
                    let h = rmin - dist;
                    if h > 0.0 {
                        entries.push((d, h * mesh.area(active[d])));
                    }
                });
                entries[start..].sort_by_key(|&(d, _)| d);
                effective |= entries[start..].iter().any(|&(d, _)| d != e);
                ptr.push(entries.len());
            }
        } else {
            ptr.resize(n + 1, 0);
        }
        SensitivityFilter {
            ptr,
            entries,
            effective,
        }
    }

    /// True when at least one element has a neighbour within the radius.
    pub fn is_effective(&self) -> bool {
        self.effective
    }

    pub fn weights(&self, e: usize) -> &[(usize, f64)] {
        &self.entries[self.ptr[e]..self.ptr[e + 1]]
    }

    pub fn apply(&self, rho: &[f64], dc: &[f64]) -> Vec<f64> {
        (0..dc.len())
            .map(|e| {
                let w = self.weights(e);
                let denom: f64 = w.iter().map(|&(_, hv)| hv).sum();
                if denom == 0.0 {
                    return dc[e];
                }
                let num: f64 = w.iter().map(|&(d, hv)| rho[d] * hv * dc[d]).sum();
                num / (rho[e] * denom)
            })
            .collect()
    }
}

/// Volume-weighted sensitivity filter; returns `dc` unchanged when no element
/// has a neighbour within `rmin`.
pub fn filter_sensitivities(mesh: &AdaptiveMesh, rho: &[f64], dc: &[f64], rmin: f64) -> Vec<f64> {
    let filter = SensitivityFilter::new(mesh, rmin);
    if !filter.is_effective() {
        warn!("filter radius {rmin} is below the element spacing; filter inactive");
        return dc.to_vec();
    }
    filter.apply(rho, dc)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OcParams {
    #[serde(rename = "move")]
    pub move_limit: f64,
    pub eta: f64,
    pub bisection_tol: f64,
    pub lambda_bracket: [f64; 2],
}

impl Default for OcParams {
    fn default() -> Self {
        OcParams {
            move_limit: 0.2,
            eta: 0.5,
            bisection_tol: 1e-6,
            lambda_bracket: [1e-9, 1e9],
        }
    }
}

/// How far the multiplier bracket may be widened before giving up.
const LAMBDA_LIMITS: [f64; 2] = [1e-300, 1e300];

fn oc_candidate(rho: f64, dc: f64, vol: f64, lambda: f64, rho_min: f64, p: &OcParams) -> f64 {
    let b = (-dc).max(0.0) / (lambda * vol);
    let lo = (rho - p.move_limit).max(rho_min);
    let hi = (rho + p.move_limit).min(1.0);
    (rho * b.powf(p.eta)).clamp(lo, hi)
}

/// OC step `rho_e <- clip(rho_e B_e^eta)` with `B_e = -dc_e / (lambda V_e)`,
/// `lambda` found by log-space bisection so that the material equals
/// `target_volume` (within `bisection_tol`, never above it).
pub fn oc_update(
    rho: &DensityField,
    dc: &[f64],
    volumes: &[f64],
    target_volume: f64,
    params: &OcParams,
) -> Result<DensityField, OptError> {
    let rmin = rho.rho_min;
    let update = |lambda: f64| -> Vec<f64> {
        rho.values
            .iter()
            .zip(dc)
            .zip(volumes)
            .map(|((&r, &d), &v)| oc_candidate(r, d, v, lambda, rmin, params))
            .collect()
    };
    let material = |x: &[f64]| -> f64 { x.iter().zip(volumes).map(|(r, v)| r * v).sum() };
    let field = |values| DensityField {
        values,
        rho_min: rmin,
    };

    let [mut lo, mut hi] = params.lambda_bracket;
    while material(&update(hi)) > target_volume {
        hi *= 10.0;
        if hi > LAMBDA_LIMITS[1] {
            return Err(OptError::BracketExhausted {
                target: target_volume,
            });
        }
    }
    while material(&update(lo)) <= target_volume {
        lo /= 10.0;
        if lo < LAMBDA_LIMITS[0] {
            // even the upper move limit is feasible: the constraint is inactive
            return Ok(field(update(lo * 10.0)));
        }
    }
    let mut best = update(hi);
    for _ in 0..400 {
        if target_volume - material(&best) <= params.bisection_tol * target_volume {
            break;
        }
        let mid = (lo * hi).sqrt();
        if !(mid > lo && mid < hi) {
            break;
        }
        let cand = update(mid);
        if material(&cand) > target_volume {
            lo = mid;
        } else {
            hi = mid;
            best = cand;
        }
    }
    Ok(field(best))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ConvergenceCheck {
    pub converged: bool,
    pub max_change: f64,
    pub argmax: usize,
}

/// Converged iff `max_e |next_e - prev_e| < tol` (strict).
pub fn check_convergence(prev: &[f64], next: &[f64], tol: f64) -> ConvergenceCheck {
    let (argmax, max_change) = prev
        .iter()
        .zip(next)
        .map(|(a, b)| (b - a).abs())
        .enumerate()
        .fold(
            (0, 0.0),
            |best, (i, d)| if d > best.1 { (i, d) } else { best },
        );
    ConvergenceCheck {
        converged: max_change < tol,
        max_change,
        argmax,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ContinuationSchedule {
    pub p_start: f64,
    pub p_end: f64,
    pub p_step: f64,
    pub steps_per_stage: usize,
}

impl Default for ContinuationSchedule {
    fn default() -> Self {
        ContinuationSchedule {
            p_start: 1.0,
            p_end: 3.0,
            p_step: 0.5,
            steps_per_stage: 30,
        }
    }
}

impl ContinuationSchedule {
    pub fn next(&self, p: f64) -> f64 {
        (p + self.p_step).min(self.p_end)
    }

    pub fn at_end(&self, p: f64) -> bool {
        p >= self.p_end
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::ElemId;

    #[test]
    fn filter_uniform_fields_pass_through() {
        let mesh = AdaptiveMesh::create_uniform(6, 3, 2.0, 1.0).unwrap();
        let n = mesh.num_active();
        let out = filter_sensitivities(&mesh, &vec![0.4; n], &vec![-2.5; n], 0.8);
        for v in out {
            assert!((v + 2.5).abs() < 1e-14);
        }
    }

    #[test]
    fn filter_below_element_size_is_inactive() {
        let mut mesh = AdaptiveMesh::create_uniform(4, 2, 2.0, 1.0).unwrap();
        mesh.refine_element(ElemId::new(0, 1, 1)).unwrap();
        let n = mesh.num_active();
        let dc: Vec<f64> = (0..n).map(|i| -(i as f64) - 1.0).collect();
        let rho: Vec<f64> = (0..n).map(|i| 0.1 + 0.05 * i as f64).collect();
        assert!(!SensitivityFilter::new(&mesh, 0.2).is_effective());
        assert_eq!(filter_sensitivities(&mesh, &rho, &dc, 0.2), dc);
        assert_eq!(filter_sensitivities(&mesh, &rho, &dc, 0.0), dc);
    }

    #[test]
    fn oc_symmetric_start_is_uniform() {
        let n = 8;
        let rho = DensityField::uniform(n, 0.5, 1e-3);
        let out = oc_update(
            &rho,
            &vec![-1.0; n],
            &vec![1.0; n],
            0.4 * n as f64,
            &OcParams::default(),
        )
        .unwrap();
        for v in &out.values {
            assert!((v - 0.4).abs() < 1e-6);
        }
    }

    #[test]
    fn oc_zero_move_keeps_design() {
        let rho = DensityField {
            values: vec![0.2, 0.9, 0.5],
            rho_min: 1e-3,
        };
        let params = OcParams {
            move_limit: 0.0,
            ..Default::default()
        };
        let out = oc_update(&rho, &[-3.0, -0.1, -1.0], &[1.0; 3], 1.6, &params).unwrap();
        assert_eq!(out.values, rho.values);
    }

    #[test]
    fn convergence_threshold_is_strict() {
        let a = [0.5, 0.5, 0.5];
        assert!(check_convergence(&a, &a, 0.01).converged);
        let b = [0.5, 0.52, 0.5];
        let c = check_convergence(&a, &b, 0.01);
        assert!(!c.converged);
        assert_eq!(c.argmax, 1);
        assert!(!check_convergence(&[0.0], &[0.01], 0.01).converged);
    }

    #[test]
    fn continuation_ladder() {
        let s = ContinuationSchedule::default();
        let mut p = s.p_start;
        let mut ladder = vec![p];
        while !s.at_end(p) {
            p = s.next(p);
            ladder.push(p);
        }
        assert_eq!(ladder, vec![1.0, 1.5, 2.0, 2.5, 3.0]);
    }
}
