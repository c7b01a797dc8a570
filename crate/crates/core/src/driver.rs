//! The optimization loop: solve, sensitivities, filter, OC update, then
//! (conditionally) adapt the mesh and transfer the design.

use std::time::Instant;

use log::{debug, info, warn};
use serde::{Deserialize, Serialize};

use crate::config::ProblemConfig;
use crate::error::{MeshError, Result};
use crate::fem::{compliance, Assembler, DisplacementField, MaterialSpec, StiffnessCache};
use crate::linsolve::{solve_equilibrium, transfer_displacement, SolverOptions};
use crate::mesh::{AdaptChange, AdaptiveMesh, CenterGrid, ElemId, MarkSet};
use crate::topopt::{
    check_convergence, element_volumes, oc_update, sensitivities, ContinuationSchedule,
    DensityField, OcParams, SensitivityFilter,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdaptMode {
    /// Refine and derefine whenever the trigger fires.
    Dynamic,
    /// Converge, refine the finest region once, never derefine, repeat.
    RefineOnlyStatic,
    /// Plain fixed-mesh optimization.
    None,
}

/// Quantity compared against `change_tol` when deciding to adapt.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdaptTrigger {
    /// `max_e |rho_e+ - rho_e|` of the last OC step.
    #[default]
    DesignChange,
    /// `|c_k - c_{k-1}| / c_k`.
    ComplianceChange,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdaptationPolicy {
    pub mode: AdaptMode,
    pub r_amr: f64,
    pub rho_s: f64,
    pub min_steps_between: usize,
    pub max_steps_between: usize,
    pub change_tol: f64,
    pub max_total_levels: u8,
}

impl Default for AdaptationPolicy {
    fn default() -> Self {
        AdaptationPolicy {
            mode: AdaptMode::Dynamic,
            r_amr: 0.0,
            rho_s: 0.5,
            min_steps_between: 5,
            max_steps_between: 10,
            change_tol: 0.01,
            max_total_levels: 0,
        }
    }
}

/// Adapt when the change is small and enough steps have passed, or when too
/// many steps have passed regardless.
pub fn should_adapt(change: f64, steps_since_adapt: usize, policy: &AdaptationPolicy) -> bool {
    (change < policy.change_tol && steps_since_adapt >= policy.min_steps_between)
        || steps_since_adapt >= policy.max_steps_between
}

/// Refine solid elements and everything within `r_amr` of one; derefine void
/// elements with no solid element within `r_amr`. The result still has to go
/// through [`AdaptiveMesh::enforce_compatibility`].
pub fn mark_elements(mesh: &AdaptiveMesh, rho: &[f64], policy: &AdaptationPolicy) -> MarkSet {
    let active = mesh.active();
    let n = active.len();
    let mut near_solid = vec![false; n];
    let grid = CenterGrid::new(mesh, policy.r_amr.max(mesh.size_at(mesh.max_level())));
    for e in 0..n {
        if rho[e] >= policy.rho_s {
            near_solid[e] = true;
            if policy.r_amr > 0.0 {
                grid.for_each_within(grid.centers()[e], policy.r_amr, |d, _| near_solid[d] = true);
            }
        }
    }

    let mut marks = MarkSet::default();
    let finest = mesh.max_level();
    for (e, &id) in active.iter().enumerate() {
        if near_solid[e] {
            if id.level >= policy.max_total_levels {
                continue;
            }
            // the static baseline only refines inside the previous refinement region
            if policy.mode == AdaptMode::RefineOnlyStatic && id.level != finest {
                continue;
            }
            marks.refine.insert(id);
        } else if policy.mode == AdaptMode::Dynamic && id.level >= 1 {
            marks.derefine.insert(id);
        }
    }
    marks
}

/// Element densities on `new` given densities on `old`: refined elements
/// inherit the parent value, derefined parents get the mean of their children.
pub fn transfer_density(old: &AdaptiveMesh, rho: &[f64], new: &AdaptiveMesh) -> Vec<f64> {
    fn value(old: &AdaptiveMesh, rho: &[f64], id: ElemId) -> f64 {
        if let Some(i) = old.active_index(id) {
            return rho[i];
        }
        if old.has_children(id) {
            let [a, b, c, d] = id.children().map(|ch| value(old, rho, ch));
            return ((a + b) + (c + d)) / 4.0;
        }
        let parent = id.parent().expect("level-0 elements always exist");
        value(old, rho, parent)
    }
    new.active().iter().map(|&id| value(old, rho, id)).collect()
}

/// Per-step log entry.
#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub p: f64,
    pub compliance: f64,
    /// Material fraction of the updated design.
    pub volume: f64,
    pub max_change: f64,
    pub n_elem: usize,
    pub n_unknowns: usize,
    pub lmax: u8,
    pub solver_iters: usize,
    pub solver_relres: f64,
    /// True when the mesh changed at the end of this step.
    pub adapted: bool,
    /// Seconds spent in the linear solver.
    pub solve_time: f64,
    /// Seconds for the whole step, adaptation included.
    pub step_time: f64,
}

/// One row of the adaptation table.
#[derive(Clone, Debug, PartialEq)]
pub struct AdaptationSummary {
    pub step: usize,
    pub lmax_before: u8,
    pub lmax: u8,
    pub n_elem_before: usize,
    pub n_elem: usize,
    pub n_unknowns_before: usize,
    pub n_unknowns: usize,
    pub refined: usize,
    pub derefined: usize,
}

#[derive(Clone, Debug)]
pub struct DesignState {
    pub mesh: AdaptiveMesh,
    pub rho: DensityField,
    pub u: DisplacementField,
    pub compliance: f64,
    pub step: usize,
    pub steps_since_adapt: usize,
    pub p: f64,
    pub history: Vec<StepRecord>,
}

impl DesignState {
    pub fn new(mesh: AdaptiveMesh, rho: DensityField, p: f64) -> Self {
        let u = DisplacementField::zeros(2 * mesh.num_nodes());
        DesignState {
            mesh,
            rho,
            u,
            compliance: f64::NAN,
            step: 0,
            steps_since_adapt: 0,
            p,
            history: Vec::new(),
        }
    }

    pub fn volume_fraction(&self) -> f64 {
        let (w, h) = self.mesh.domain();
        self.rho.material(&element_volumes(&self.mesh)) / (w * h)
    }
}

/// Applies compatible marks and transfers density and displacement.
pub fn adapt_mesh(state: &mut DesignState, marks: &MarkSet) -> Result<AdaptChange, MeshError> {
    let old = state.mesh.clone();
    let change = state.mesh.apply_marks(marks)?;
    state.steps_since_adapt = 0;
    if change.is_empty() {
        return Ok(change);
    }
    state.rho.values = transfer_density(&old, &state.rho.values, &state.mesh);
    state.u.values = if state.u.values.len() == 2 * old.num_nodes() {
        transfer_displacement(&old, &state.u.values, &state.mesh)
    } else {
        vec![0.0; 2 * state.mesh.num_nodes()]
    };
    Ok(change)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopReason {
    Converged,
    StepCap,
}

#[derive(Clone, Debug)]
pub struct RunReport {
    pub state: DesignState,
    pub adaptations: Vec<AdaptationSummary>,
    pub stop: StopReason,
}

impl RunReport {
    pub fn converged(&self) -> bool {
        self.stop == StopReason::Converged
    }

    pub fn steps(&self) -> &[StepRecord] {
        &self.state.history
    }

    pub fn total_solver_iterations(&self) -> usize {
        self.steps().iter().map(|s| s.solver_iters).sum()
    }

    pub fn total_unknowns(&self) -> usize {
        self.steps().iter().map(|s| s.n_unknowns).sum()
    }
}

/// Runs the configured problem from a uniform initial design.
pub fn run(cfg: &ProblemConfig) -> Result<RunReport> {
    let d = &cfg.domain;
    let mesh = AdaptiveMesh::create_uniform(d.nx, d.ny, d.width, d.height)?;
    let rho = DensityField::uniform(
        mesh.num_active(),
        cfg.problem.volume_fraction,
        cfg.material.rho_min,
    );
    run_from(cfg, mesh, rho)
}

/// Runs the configured problem from a given mesh and design.
pub fn run_from(cfg: &ProblemConfig, mesh: AdaptiveMesh, rho: DensityField) -> Result<RunReport> {
    info!("effective configuration:\n{}", cfg.effective_toml());
    let mut opt = Optimizer::new(cfg, mesh, rho)?;
    let stop = opt.run()?;
    Ok(RunReport {
        state: opt.state,
        adaptations: opt.adaptations,
        stop,
    })
}

struct Optimizer {
    material: MaterialSpec,
    bc: crate::fem::BoundarySpec,
    policy: AdaptationPolicy,
    trigger: AdaptTrigger,
    oc: OcParams,
    solver: SolverOptions,
    schedule: ContinuationSchedule,
    max_steps: usize,
    target_fraction: f64,
    convergence_tol: f64,
    filter_radius: f64,

    state: DesignState,
    adaptations: Vec<AdaptationSummary>,
    cache: StiffnessCache,
    assembler: Assembler,
    filter: SensitivityFilter,
    volumes: Vec<f64>,
}

impl Optimizer {
    fn new(cfg: &ProblemConfig, mesh: AdaptiveMesh, rho: DensityField) -> Result<Self> {
        let material = cfg.material_spec();
        let bc = cfg.boundary();
        let filter_radius = cfg.filter_radius();
        let cache = StiffnessCache::new(material.nu, mesh.initial_size());
        let assembler = Assembler::new(&mesh, &bc)?;
        let filter = SensitivityFilter::new(&mesh, filter_radius);
        let volumes = element_volumes(&mesh);
        if rho.values.len() != mesh.num_active() {
            return Err(crate::error::FemError::DensityLength {
                got: rho.values.len(),
                expected: mesh.num_active(),
            }
            .into());
        }
        let opt = Optimizer {
            material,
            bc,
            policy: cfg.policy(),
            trigger: cfg.amr.trigger,
            oc: cfg.oc,
            solver: cfg.solver_options(),
            schedule: cfg.continuation,
            max_steps: cfg.run.max_steps,
            target_fraction: cfg.problem.volume_fraction,
            convergence_tol: cfg.problem.convergence_tol,
            filter_radius,
            state: DesignState::new(mesh, rho, cfg.continuation.p_start),
            adaptations: Vec::new(),
            cache,
            assembler,
            filter,
            volumes,
        };
        opt.warn_inactive_filter();
        Ok(opt)
    }

    fn warn_inactive_filter(&self) {
        if !self.filter.is_effective() {
            warn!(
                "filter radius {} is below the element spacing of the current mesh; filter inactive",
                self.filter_radius
            );
        }
    }

    fn run(&mut self) -> Result<StopReason> {
        let mut steps_in_stage = 0;
        let mut last_trigger_unchanged = false;
        let mut prev_compliance = f64::NAN;
        while self.state.step < self.max_steps {
            let t_step = Instant::now();
            let st = &mut self.state;
            st.step += 1;
            let mat = self.material.with_penalty(st.p);

            let sys = self
                .assembler
                .assemble(&st.rho.values, &mat, &mut self.cache)?;
            let constrained = self.assembler.constrain(&sys);
            let warm = (st.u.values.len() == sys.num_dofs()).then_some(st.u.values.as_slice());
            let (u, stats) = solve_equilibrium(&sys, &constrained, warm, &self.solver)?;
            st.u = u;
            st.compliance = compliance(&sys.rhs, &st.u.values);

            let dc = sensitivities(&st.mesh, &st.rho.values, &st.u, &mat, &mut self.cache);
            // The volume-weighted filter averages sensitivity densities; dc
            // itself scales with element area, so divide it out and back in.
            let dc = if self.filter.is_effective() {
                let density: Vec<f64> = dc.iter().zip(&self.volumes).map(|(d, v)| d / v).collect();
                let filtered = self.filter.apply(&st.rho.values, &density);
                filtered
                    .iter()
                    .zip(&self.volumes)
                    .map(|(d, v)| d * v)
                    .collect()
            } else {
                dc
            };
            let (w, h) = st.mesh.domain();
            let next = oc_update(
                &st.rho,
                &dc,
                &self.volumes,
                self.target_fraction * w * h,
                &self.oc,
            )?;
            let conv = check_convergence(&st.rho.values, &next.values, self.convergence_tol);
            st.rho = next;
            st.steps_since_adapt += 1;
            steps_in_stage += 1;

            let compliance_change = ((st.compliance - prev_compliance) / st.compliance).abs();
            prev_compliance = st.compliance;
            let mut record = StepRecord {
                step: st.step,
                p: st.p,
                compliance: st.compliance,
                volume: st.rho.material(&self.volumes) / (w * h),
                max_change: conv.max_change,
                n_elem: st.mesh.num_active(),
                n_unknowns: sys.num_dofs(),
                lmax: st.mesh.max_level(),
                solver_iters: stats.iterations,
                solver_relres: stats.final_relres,
                adapted: false,
                solve_time: stats.wall_time,
                step_time: 0.0,
            };
            debug!(
                "step {} p={} c={:.6e} change={:.4} elems={} iters={}",
                record.step,
                record.p,
                record.compliance,
                record.max_change,
                record.n_elem,
                record.solver_iters
            );

            let at_end = self.schedule.at_end(st.p);
            let mut done = false;
            if !at_end && (conv.converged || steps_in_stage >= self.schedule.steps_per_stage) {
                st.p = self.schedule.next(st.p);
                steps_in_stage = 0;
                info!("step {}: penalization raised to {}", st.step, st.p);
            }

            match self.policy.mode {
                AdaptMode::None => done = conv.converged && at_end,
                AdaptMode::Dynamic => {
                    let change = match self.trigger {
                        AdaptTrigger::DesignChange => conv.max_change,
                        AdaptTrigger::ComplianceChange => compliance_change,
                    };
                    if should_adapt(change, self.state.steps_since_adapt, &self.policy) {
                        let changed = self.adapt()?;
                        record.adapted = changed;
                        last_trigger_unchanged = !changed;
                    }
                    done = conv.converged && at_end && last_trigger_unchanged;
                }
                AdaptMode::RefineOnlyStatic => {
                    if conv.converged && at_end {
                        if self.state.steps_since_adapt >= self.policy.min_steps_between
                            && self.state.mesh.max_level() < self.policy.max_total_levels
                        {
                            let changed = self.adapt()?;
                            record.adapted = changed;
                            done = !changed;
                        } else {
                            done = self.state.mesh.max_level() >= self.policy.max_total_levels;
                        }
                    }
                }
            }
            record.step_time = t_step.elapsed().as_secs_f64();
            self.state.history.push(record);
            if done {
                info!("converged after {} steps", self.state.step);
                return Ok(StopReason::Converged);
            }
        }
        warn!("step cap {} reached before convergence", self.max_steps);
        Ok(StopReason::StepCap)
    }

    /// Mark, make compatible and adapt; returns whether the mesh changed.
    fn adapt(&mut self) -> Result<bool> {
        let st = &mut self.state;
        let marks = mark_elements(&st.mesh, &st.rho.values, &self.policy);
        let marks = st.mesh.enforce_compatibility(&marks);
        let (lmax_before, n_elem_before, n_unknowns_before) = (
            st.mesh.max_level(),
            st.mesh.num_active(),
            2 * st.mesh.num_nodes(),
        );
        let change = adapt_mesh(st, &marks)?;
        if change.is_empty() {
            debug!("step {}: adaptation left the mesh unchanged", st.step);
            return Ok(false);
        }
        let summary = AdaptationSummary {
            step: st.step,
            lmax_before,
            lmax: st.mesh.max_level(),
            n_elem_before,
            n_elem: st.mesh.num_active(),
            n_unknowns_before,
            n_unknowns: 2 * st.mesh.num_nodes(),
            refined: change.refined.len(),
            derefined: change.derefined.len(),
        };
        info!(
            "step {}: adapted mesh, {} -> {} elements, lmax {} (refined {}, derefined {})",
            summary.step,
            summary.n_elem_before,
            summary.n_elem,
            summary.lmax,
            summary.refined,
            summary.derefined
        );
        self.adaptations.push(summary);
        self.assembler = Assembler::new(&st.mesh, &self.bc)?;
        self.filter = SensitivityFilter::new(&st.mesh, self.filter_radius);
        self.volumes = element_volumes(&st.mesh);
        self.warn_inactive_filter();
        Ok(true)
    }
}
