//! Minimum-compliance topology optimization (SIMP with an Optimality Criteria
//! update) on dynamically refined and derefined quadtree meshes.
//!
//! The pieces, bottom-up:
//! - [`mesh`]: quadtree of square elements, hanging nodes, level-one balance.
//! - [`fem`]: plane-stress bilinear quads, assembly, constraint projection.
//! - [`linsolve`]: diagonal rescaling, IC(0), preconditioned MINRES.
//! - [`topopt`]: sensitivities, filter, OC update, continuation.
//! - [`driver`]: the optimization loop with mesh adaptation.
//! - [`config`], [`raster`], [`output`]: input and result files.

pub mod config;
pub mod driver;
pub mod error;
pub mod fem;
pub mod linsolve;
pub mod mesh;
pub mod output;
pub mod raster;
pub mod sparse;
pub mod topopt;

pub use config::{parse_config, ProblemConfig};
pub use driver::{run, run_from, AdaptMode, AdaptationPolicy, DesignState, RunReport};
pub use error::{Error, Result};
pub use mesh::{AdaptiveMesh, ElemId, MarkSet};
pub use raster::{design_difference, rasterize, DensityRaster};
pub use topopt::DensityField;
