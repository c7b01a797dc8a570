use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use log::info;

use topamr::output::{write_atomic, write_outputs};
use topamr::raster::{parse_mesh_dump, rasterize_elements, DensityRaster};
use topamr::{design_difference, parse_config};

#[derive(Parser, Debug)]
#[command(
    name = "topamr",
    version,
    about = "Topology optimization on adaptive quadtree meshes"
)]
struct Cli {
    /// error, warn, info, debug or trace
    #[arg(long, global = true, default_value = "info")]
    log_level: log::LevelFilter,

    /// Overrides `run.max_steps`.
    #[arg(long, global = true)]
    max_steps: Option<usize>,

    /// Overrides `output.dir`; also where `rasterize` writes.
    #[arg(long, global = true)]
    output_dir: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run the optimization described by a TOML config.
    Run { config: PathBuf },
    /// Relative L1 difference of two CSV rasters; the first is the reference.
    Diff { reference: PathBuf, other: PathBuf },
    /// Turn a mesh dump into finest-level CSV and PGM rasters.
    Rasterize {
        mesh_dump: PathBuf,
        #[arg(long)]
        lmax: u8,
    },
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    env_logger::Builder::new()
        .filter_level(cli.log_level)
        .format_timestamp(None)
        .init();

    match cli.command {
        Command::Run { config } => {
            let mut cfg = parse_config(&read(&config)?)
                .with_context(|| format!("invalid config {}", config.display()))?;
            if let Some(n) = cli.max_steps {
                cfg.run.max_steps = n;
            }
            if let Some(dir) = cli.output_dir {
                cfg.output.dir = dir;
            }
            let report = topamr::run(&cfg)?;
            let files = write_outputs(&report, &cfg.output.dir, cfg.domain.max_total_levels)?;
            let last = report.steps().last();
            println!(
                "{} after {} steps: compliance {:.6e}, {} elements, lmax {}",
                if report.converged() {
                    "converged"
                } else {
                    "stopped at step cap"
                },
                report.state.step,
                report.state.compliance,
                report.state.mesh.num_active(),
                last.map_or(0, |s| s.lmax),
            );
            for f in files {
                info!("wrote {}", f.display());
            }
        }
        Command::Diff { reference, other } => {
            let a = DensityRaster::from_csv(&read(&reference)?)
                .with_context(|| format!("parsing {}", reference.display()))?;
            let b = DensityRaster::from_csv(&read(&other)?)
                .with_context(|| format!("parsing {}", other.display()))?;
            println!("{}", design_difference(&a, &b)?);
        }
        Command::Rasterize { mesh_dump, lmax } => {
            let elements = parse_mesh_dump(&read(&mesh_dump)?)
                .with_context(|| format!("parsing {}", mesh_dump.display()))?;
            let raster = rasterize_elements(&elements, lmax)?;
            let dir = cli.output_dir.unwrap_or_else(|| PathBuf::from("."));
            fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
            let stem = mesh_dump
                .file_stem()
                .map_or("raster".into(), |s| s.to_string_lossy());
            let csv = dir.join(format!("{stem}.csv"));
            let pgm = dir.join(format!("{stem}.pgm"));
            write_atomic(&csv, raster.to_csv().as_bytes())?;
            write_atomic(&pgm, &raster.to_pgm())?;
            println!(
                "{} x {} raster: {}, {}",
                raster.nx,
                raster.ny,
                csv.display(),
                pgm.display()
            );
        }
    }
    Ok(())
}
