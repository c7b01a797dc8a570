use thiserror::Error;

use crate::mesh::ElemId;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MeshError {
    #[error("elements must be square: width/nx = {dx} but height/ny = {dy}")]
    NonSquare { dx: f64, dy: f64 },
    #[error("invalid grid {nx}x{ny} over {width}x{height}")]
    InvalidGrid {
        nx: u32,
        ny: u32,
        width: f64,
        height: f64,
    },
    #[error("element {0} is not active")]
    NotActive(ElemId),
    #[error("element {0} has no children to remove")]
    NotRefined(ElemId),
    #[error("child {child} of {parent} is not an active leaf; derefine one level at a time")]
    ChildNotLeaf { parent: ElemId, child: ElemId },
    #[error("refinement level {0} exceeds the supported lattice depth")]
    TooDeep(u8),
    #[error("level-two incompatibility between {coarse} and the children of {fine}")]
    LevelTwo { coarse: ElemId, fine: ElemId },
    #[error("hanging node {0} is interpolated from another hanging node")]
    ConstrainedParent(usize),
}

#[derive(Debug, Error)]
pub enum FemError {
    #[error("boundary selector {0} matched no node of the current mesh")]
    EmptySelector(String),
    #[error("density vector has {got} entries but the mesh has {expected} active elements")]
    DensityLength { got: usize, expected: usize },
    #[error(transparent)]
    Mesh(#[from] MeshError),
}

#[derive(Debug, Error)]
pub enum SolverError {
    #[error("diagonal entry {value} at dof {dof} is not positive; the dof is unconstrained")]
    SingularDof { dof: usize, value: f64 },
    #[error("non-finite value encountered in MINRES at iteration {0}")]
    NotFinite(usize),
    #[error("preconditioner is not positive definite (r'Mr = {0})")]
    IndefinitePreconditioner(f64),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
}

#[derive(Debug, Error)]
pub enum OptError {
    #[error("OC multiplier bracket could not be widened to reach the volume target {target}")]
    BracketExhausted { target: f64 },
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config syntax: {0}")]
    Syntax(String),
    #[error("{key}: {message}")]
    Range { key: String, message: String },
}

impl ConfigError {
    pub(crate) fn range(key: &str, message: impl Into<String>) -> Self {
        ConfigError::Range {
            key: key.to_string(),
            message: message.into(),
        }
    }
}

#[derive(Debug, Error)]
pub enum RasterError {
    #[error("raster dimensions differ: {0}x{1} vs {2}x{3}")]
    Dimensions(usize, usize, usize, usize),
    #[error("element at level {level} is finer than the raster level {lmax}")]
    LevelAboveRaster { level: u8, lmax: u8 },
    #[error("reference design has zero material")]
    EmptyReference,
    #[error("malformed {what}: {detail}")]
    Format { what: &'static str, detail: String },
}

/// Top-level error for the optimization driver and the file tools.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Mesh(#[from] MeshError),
    #[error(transparent)]
    Fem(#[from] FemError),
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error(transparent)]
    Opt(#[from] OptError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Raster(#[from] RasterError),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
