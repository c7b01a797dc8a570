//! Result files. Every file is written to a temporary sibling and renamed
//! into place, so readers never see a partial file.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::driver::{AdaptationSummary, RunReport, StepRecord};
use crate::error::{Error, Result};
use crate::raster::{rasterize, write_mesh_dump};

pub const CONVERGENCE_HEADER: &str =
    "step,p,compliance,volume,max_change,n_elem,n_unknowns,lmax,solver_iters,solver_relres,adapted";
pub const ADAPTATION_HEADER: &str =
    "step,lmax_before,lmax,n_elem_before,n_elem,n_unknowns_before,n_unknowns,refined,derefined";
pub const TIMINGS_HEADER: &str = "step,solve_seconds,step_seconds";

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.display().to_string(),
        source,
    }
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let tmp = path.with_file_name(format!(".{name}.tmp"));
    fs::write(&tmp, bytes).map_err(io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(io_err(path))
}

pub fn convergence_csv(steps: &[StepRecord]) -> String {
    let mut out = format!("{CONVERGENCE_HEADER}\n");
    for s in steps {
        writeln!(
            out,
            "{},{},{:e},{},{:e},{},{},{},{},{:e},{}",
            s.step,
            s.p,
            s.compliance,
            s.volume,
            s.max_change,
            s.n_elem,
            s.n_unknowns,
            s.lmax,
            s.solver_iters,
            s.solver_relres,
            u8::from(s.adapted)
        )
        .unwrap();
    }
    out
}

pub fn adaptation_csv(rows: &[AdaptationSummary]) -> String {
    let mut out = format!("{ADAPTATION_HEADER}\n");
    for a in rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            a.step,
            a.lmax_before,
            a.lmax,
            a.n_elem_before,
            a.n_elem,
            a.n_unknowns_before,
            a.n_unknowns,
            a.refined,
            a.derefined
        )
        .unwrap();
    }
    out
}

pub fn timings_csv(steps: &[StepRecord]) -> String {
    let mut out = format!("{TIMINGS_HEADER}\n");
    for s in steps {
        writeln!(out, "{},{:.6},{:.6}", s.step, s.solve_time, s.step_time).unwrap();
    }
    out
}

/// Writes `density.pgm`, `density.csv`, `mesh.txt`, `convergence.csv`,
/// `adaptations.csv` and `timings.csv` into `dir`, rasterizing at `lmax`.
pub fn write_outputs(report: &RunReport, dir: &Path, lmax: u8) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let st = &report.state;
    let raster = rasterize(&st.mesh, &st.rho.values, lmax.max(st.mesh.max_level()))?;
    let files: [(&str, Vec<u8>); 6] = [
        ("density.pgm", raster.to_pgm()),
        ("density.csv", raster.to_csv().into_bytes()),
        (
            "mesh.txt",
            write_mesh_dump(&st.mesh, &st.rho.values).into_bytes(),
        ),
        (
            "convergence.csv",
            convergence_csv(report.steps()).into_bytes(),
        ),
        (
            "adaptations.csv",
            adaptation_csv(&report.adaptations).into_bytes(),
        ),
        ("timings.csv", timings_csv(report.steps()).into_bytes()),
    ];
    let mut written = Vec::with_capacity(files.len());
    for (name, bytes) in files {
        let path = dir.join(name);
        write_atomic(&path, &bytes)?;
        written.push(path);
    }
    Ok(written)
}
