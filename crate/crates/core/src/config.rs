//! TOML problem configuration.
//!
//! ```toml
//! [domain]
//! width = 2.0
//! height = 1.0
//! nx = 32
//! ny = 16
//! max_total_levels = 2
//!
//! [problem]
//! volume_fraction = 0.5
//!
//! [[fixed]]
//! selector = { edge = "left" }
//! components = ["x", "y"]
//!
//! [[load]]
//! selector = { point = [2.0, 0.5] }
//! component = "y"
//! magnitude = -1.0
//! ```
//!
//! Every other section is optional; see the README for the full key list.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::driver::{AdaptMode, AdaptTrigger, AdaptationPolicy};
use crate::error::ConfigError;
use crate::fem::{BoundarySpec, FixedCondition, MaterialSpec, PointLoad};
use crate::linsolve::SolverOptions;
use crate::topopt::{ContinuationSchedule, OcParams};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainConfig {
    pub width: f64,
    pub height: f64,
    pub nx: u32,
    pub ny: u32,
    /// Highest refinement level an element may reach (level 0 is the initial grid).
    #[serde(default)]
    pub max_total_levels: u8,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MaterialConfig {
    pub e0: f64,
    pub nu: f64,
    pub rho_min: f64,
}

impl Default for MaterialConfig {
    fn default() -> Self {
        let m = MaterialSpec::default();
        MaterialConfig {
            e0: m.e0,
            nu: m.nu,
            rho_min: m.rho_min,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemSection {
    pub volume_fraction: f64,
    /// The run has converged once no density moves by this much in one step.
    #[serde(default = "default_convergence_tol")]
    pub convergence_tol: f64,
    /// Sensitivity filter radius; defaults to `amr.radius`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub filter_radius: Option<f64>,
}

fn default_convergence_tol() -> f64 {
    0.01
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AmrConfig {
    pub mode: AdaptMode,
    /// Marking radius; defaults to `problem.filter_radius`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub radius: Option<f64>,
    pub solid_threshold: f64,
    pub min_steps_between: usize,
    pub max_steps_between: usize,
    pub change_tol: f64,
    pub trigger: AdaptTrigger,
}

impl Default for AmrConfig {
    fn default() -> Self {
        AmrConfig {
            mode: AdaptMode::Dynamic,
            radius: None,
            solid_threshold: 0.5,
            min_steps_between: 5,
            max_steps_between: 10,
            change_tol: 0.01,
            trigger: AdaptTrigger::DesignChange,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverConfig {
    pub tol: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_iterations: Option<usize>,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            tol: 1e-8,
            max_iterations: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub max_steps: usize,
    /// Reserved; the optimizer is deterministic.
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            max_steps: 1000,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    pub dir: PathBuf,
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig {
            dir: PathBuf::from("output"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemConfig {
    pub domain: DomainConfig,
    #[serde(default)]
    pub material: MaterialConfig,
    pub problem: ProblemSection,
    #[serde(default)]
    pub amr: AmrConfig,
    #[serde(default)]
    pub oc: OcParams,
    #[serde(default)]
    pub solver: SolverConfig,
    #[serde(default)]
    pub continuation: ContinuationSchedule,
    #[serde(default)]
    pub run: RunConfig,
    #[serde(default)]
    pub output: OutputConfig,
    #[serde(default)]
    pub fixed: Vec<FixedCondition>,
    #[serde(default, rename = "load")]
    pub loads: Vec<PointLoad>,
}

pub fn parse_config(text: &str) -> Result<ProblemConfig, ConfigError> {
    let mut cfg: ProblemConfig =
        toml::from_str(text).map_err(|e| ConfigError::Syntax(e.to_string()))?;
    cfg.apply_defaults();
    cfg.validate()?;
    Ok(cfg)
}

impl ProblemConfig {
    fn finest_size(&self) -> f64 {
        self.domain.width / self.domain.nx as f64 / (1u64 << self.domain.max_total_levels) as f64
    }

    fn apply_defaults(&mut self) {
        let r = self
            .problem
            .filter_radius
            .or(self.amr.radius)
            .unwrap_or(1.5 * self.finest_size());
        self.problem.filter_radius.get_or_insert(r);
        self.amr.radius.get_or_insert(r);
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let d = &self.domain;
        check(d.width > 0.0, "domain.width", "must be positive")?;
        check(d.height > 0.0, "domain.height", "must be positive")?;
        check(d.nx >= 1, "domain.nx", "must be at least 1")?;
        check(d.ny >= 1, "domain.ny", "must be at least 1")?;
        let (dx, dy) = (d.width / d.nx as f64, d.height / d.ny as f64);
        check(
            ((dx - dy) / dx).abs() <= 1e-12,
            "domain.ny",
            format!("elements must be square (width/nx = {dx}, height/ny = {dy})"),
        )?;
        check(
            d.max_total_levels <= 16,
            "domain.max_total_levels",
            "must be at most 16",
        )?;

        let m = &self.material;
        check(m.e0 > 0.0, "material.e0", "must be positive")?;
        check(
            (0.0..0.5).contains(&m.nu),
            "material.nu",
            "must lie in [0, 0.5)",
        )?;
        check(
            m.rho_min > 0.0 && m.rho_min < 1.0,
            "material.rho_min",
            "must lie in (0, 1)",
        )?;

        let vf = self.problem.volume_fraction;
        check(
            vf > m.rho_min && vf <= 1.0,
            "problem.volume_fraction",
            "must lie in (rho_min, 1]",
        )?;
        check(
            self.problem.convergence_tol > 0.0,
            "problem.convergence_tol",
            "must be positive",
        )?;
        check(
            self.filter_radius() >= 0.0,
            "problem.filter_radius",
            "must be non-negative",
        )?;

        let a = &self.amr;
        check(
            self.amr_radius() >= 0.0,
            "amr.radius",
            "must be non-negative",
        )?;
        check(
            a.solid_threshold > m.rho_min && a.solid_threshold <= 1.0,
            "amr.solid_threshold",
            "must lie in (rho_min, 1]",
        )?;
        check(
            a.min_steps_between <= a.max_steps_between,
            "amr.min_steps_between",
            "must not exceed amr.max_steps_between",
        )?;
        check(
            a.max_steps_between >= 1,
            "amr.max_steps_between",
            "must be at least 1",
        )?;
        check(a.change_tol > 0.0, "amr.change_tol", "must be positive")?;

        let o = &self.oc;
        check(
            o.move_limit > 0.0 && o.move_limit <= 1.0,
            "oc.move",
            "must lie in (0, 1]",
        )?;
        check(o.eta > 0.0 && o.eta <= 1.0, "oc.eta", "must lie in (0, 1]")?;
        check(
            o.bisection_tol > 0.0,
            "oc.bisection_tol",
            "must be positive",
        )?;
        check(
            o.lambda_bracket[0] > 0.0 && o.lambda_bracket[0] < o.lambda_bracket[1],
            "oc.lambda_bracket",
            "must be an increasing pair of positive numbers",
        )?;

        let c = &self.continuation;
        check(
            c.p_start >= 1.0,
            "continuation.p_start",
            "must be at least 1",
        )?;
        check(
            c.p_start <= c.p_end,
            "continuation.p_end",
            "must not be below p_start",
        )?;
        check(c.p_step > 0.0, "continuation.p_step", "must be positive")?;
        check(
            c.steps_per_stage >= 1,
            "continuation.steps_per_stage",
            "must be at least 1",
        )?;

        check(
            self.solver.tol > 0.0 && self.solver.tol < 1.0,
            "solver.tol",
            "must lie in (0, 1)",
        )?;
        check(
            self.run.max_steps >= 1,
            "run.max_steps",
            "must be at least 1",
        )?;
        check(
            !self.fixed.is_empty(),
            "fixed",
            "at least one fixed boundary is required",
        )?;
        check(
            !self.loads.is_empty(),
            "load",
            "at least one load is required",
        )?;
        for (i, f) in self.fixed.iter().enumerate() {
            check(
                !f.components.is_empty(),
                &format!("fixed[{i}].components"),
                "must not be empty",
            )?;
        }
        Ok(())
    }

    pub fn filter_radius(&self) -> f64 {
        self.problem
            .filter_radius
            .unwrap_or(1.5 * self.finest_size())
    }

    pub fn amr_radius(&self) -> f64 {
        self.amr.radius.unwrap_or(self.filter_radius())
    }

    pub fn material_spec(&self) -> MaterialSpec {
        MaterialSpec {
            e0: self.material.e0,
            nu: self.material.nu,
            p: self.continuation.p_start,
            rho_min: self.material.rho_min,
        }
    }

    pub fn boundary(&self) -> BoundarySpec {
        BoundarySpec {
            fixed: self.fixed.clone(),
            loads: self.loads.clone(),
        }
    }

    pub fn policy(&self) -> AdaptationPolicy {
        AdaptationPolicy {
            mode: self.amr.mode,
            r_amr: self.amr_radius(),
            rho_s: self.amr.solid_threshold,
            min_steps_between: self.amr.min_steps_between,
            max_steps_between: self.amr.max_steps_between,
            change_tol: self.amr.change_tol,
            max_total_levels: self.domain.max_total_levels,
        }
    }

    pub fn solver_options(&self) -> SolverOptions {
        SolverOptions {
            tol: self.solver.tol,
            maxit: self.solver.max_iterations,
        }
    }

    /// The configuration with every default filled in, as TOML.
    pub fn effective_toml(&self) -> String {
        toml::to_string(self).unwrap_or_else(|e| format!("<unserializable config: {e}>"))
    }
}

fn check(ok: bool, key: &str, message: impl Into<String>) -> Result<(), ConfigError> {
    if ok {
        Ok(())
    } else {
        Err(ConfigError::range(key, message))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fem::{Component, DomainEdge, Selector};

    const MINIMAL: &str = r#"
[domain]
width = 2.0
height = 1.0
nx = 8
ny = 4

[problem]
volume_fraction = 0.5

[[fixed]]
selector = { edge = "left" }
components = ["x", "y"]

[[load]]
selector = { point = [2.0, 0.5] }
component = "y"
magnitude = -1.0
"#;

    #[test]
    fn minimal_config_gets_defaults() {
        let cfg = parse_config(MINIMAL).unwrap();
        assert_eq!(cfg.material, MaterialConfig::default());
        assert_eq!(cfg.amr.mode, AdaptMode::Dynamic);
        assert_eq!(cfg.amr.min_steps_between, 5);
        assert_eq!(cfg.amr.max_steps_between, 10);
        assert_eq!(cfg.amr.change_tol, 0.01);
        assert_eq!(cfg.problem.convergence_tol, 0.01);
        assert_eq!(cfg.oc, OcParams::default());
        assert_eq!(cfg.continuation, ContinuationSchedule::default());
        assert_eq!(cfg.solver.tol, 1e-8);
        assert_eq!(cfg.filter_radius(), 1.5 * 0.25);
        assert_eq!(cfg.amr_radius(), cfg.filter_radius());
        assert_eq!(cfg.fixed[0].selector, Selector::Edge(DomainEdge::Left));
        assert_eq!(cfg.loads[0].component, Component::Y);
        let echoed = cfg.effective_toml();
        assert!(echoed.contains("min_steps_between = 5"));
        assert!(echoed.contains("filter_radius"));
        assert_eq!(parse_config(&echoed).unwrap(), cfg);
    }

    #[test]
    fn out_of_range_volume_fraction_names_key() {
        let text = MINIMAL.replace("volume_fraction = 0.5", "volume_fraction = 1.5");
        match parse_config(&text) {
            Err(ConfigError::Range { key, .. }) => assert_eq!(key, "problem.volume_fraction"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn unknown_key_is_rejected() {
        let text = MINIMAL.replace("[problem]", "[problem]\nvolume_fractoin = 0.3");
        let err = parse_config(&text).unwrap_err().to_string();
        assert!(err.contains("volume_fractoin"), "{err}");
    }

    #[test]
    fn missing_required_key() {
        let text = MINIMAL.replace("volume_fraction = 0.5", "");
        let err = parse_config(&text).unwrap_err().to_string();
        assert!(err.contains("volume_fraction"), "{err}");
    }

    #[test]
    fn non_square_grid_rejected() {
        let text = MINIMAL.replace("ny = 4", "ny = 5");
        assert!(matches!(
            parse_config(&text),
            Err(ConfigError::Range { .. })
        ));
    }

    #[test]
    fn shipped_cantilever_config() {
        let cfg = parse_config(include_str!("../../../configs/cantilever_dynamic.toml")).unwrap();
        assert_eq!(cfg.domain.width / cfg.domain.height, 2.0);
        assert_eq!(cfg.problem.volume_fraction, 0.5);
        assert_eq!(cfg.fixed[0].selector, Selector::Edge(DomainEdge::Left));
        assert_eq!(cfg.loads.len(), 1);
        assert_eq!(cfg.loads[0].component, Component::Y);
        assert!(cfg.loads[0].magnitude < 0.0);
        match cfg.loads[0].selector {
            Selector::Point(p) => assert_eq!(p[0], cfg.domain.width),
            ref s => panic!("tip load should be a point, got {s}"),
        }
        assert_eq!(cfg.amr.mode, AdaptMode::Dynamic);
        assert_eq!(cfg.domain.max_total_levels, 2);
    }
}
