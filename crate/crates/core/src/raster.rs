//! Finest-level density rasters, the relative L1 design difference, and the
//! text formats used to move designs between runs.

use std::fmt::Write as _;

use crate::error::RasterError;
use crate::mesh::AdaptiveMesh;

/// Densities on a uniform grid of square cells; row 0 is the bottom row.
#[derive(Clone, Debug, PartialEq)]
pub struct DensityRaster {
    pub nx: usize,
    pub ny: usize,
    pub cell: f64,
    pub values: Vec<f64>,
}

impl DensityRaster {
    pub fn get(&self, ix: usize, iy: usize) -> f64 {
        self.values[iy * self.nx + ix]
    }

    /// `sum rho * cell_area`
    pub fn material(&self) -> f64 {
        self.values.iter().sum::<f64>() * self.cell * self.cell
    }

    /// Comma-separated rows, top row first, preceded by a `# cell=` line.
    /// Values use the shortest representation that parses back exactly.
    pub fn to_csv(&self) -> String {
        let mut out = format!("# cell={}\n", self.cell);
        for iy in (0..self.ny).rev() {
            for ix in 0..self.nx {
                if ix > 0 {
                    out.push(',');
                }
                write!(out, "{}", self.get(ix, iy)).unwrap();
            }
            out.push('\n');
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self, RasterError> {
        let bad = |detail: String| RasterError::Format {
            what: "raster csv",
            detail,
        };
        let mut cell = None;
        let mut rows: Vec<Vec<f64>> = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(comment) = line.strip_prefix('#') {
                if let Some(v) = comment.trim().strip_prefix("cell=") {
                    cell = Some(
                        v.trim()
                            .parse::<f64>()
                            .map_err(|e| bad(format!("cell: {e}")))?,
                    );
                }
                continue;
            }
            let row = line
                .split(',')
                .map(|t| t.trim().parse::<f64>())
                .collect::<Result<Vec<_>, _>>()
                .map_err(|e| bad(format!("line {}: {e}", lineno + 1)))?;
            if let Some(first) = rows.first() {
                if first.len() != row.len() {
                    return Err(bad(format!(
                        "line {} has {} values, expected {}",
                        lineno + 1,
                        row.len(),
                        first.len()
                    )));
                }
            }
            rows.push(row);
        }
        if rows.is_empty() {
            return Err(bad("no data rows".into()));
        }
        let (nx, ny) = (rows[0].len(), rows.len());
        let values = rows.into_iter().rev().flatten().collect();
        Ok(DensityRaster {
            nx,
            ny,
            cell: cell.unwrap_or(1.0),
            values,
        })
    }

    /// Binary greyscale image (P5, maxval 255, `round(255 rho)`), top row first.
    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.nx, self.ny).into_bytes();
        for iy in (0..self.ny).rev() {
            for ix in 0..self.nx {
                out.push((255.0 * self.get(ix, iy).clamp(0.0, 1.0)).round() as u8);
            }
        }
        out
    }
}

/// One line of a mesh dump: `id level x y size density`.
#[derive(Clone, Debug, PartialEq)]
pub struct DumpElement {
    pub id: usize,
    pub level: u8,
    pub x: f64,
    pub y: f64,
    pub size: f64,
    pub density: f64,
}

pub fn mesh_elements(mesh: &AdaptiveMesh, rho: &[f64]) -> Vec<DumpElement> {
    mesh.active()
        .iter()
        .zip(rho)
        .enumerate()
        .map(|(id, (&e, &density))| {
            let el = mesh.element(e).expect("active element");
            DumpElement {
                id,
                level: e.level,
                x: el.origin[0],
                y: el.origin[1],
                size: el.size,
                density,
            }
        })
        .collect()
}

pub fn write_mesh_dump(mesh: &AdaptiveMesh, rho: &[f64]) -> String {
    let mut out = String::from("# id level x y size density\n");
    for e in mesh_elements(mesh, rho) {
        writeln!(
            out,
            "{} {} {} {} {} {}",
            e.id, e.level, e.x, e.y, e.size, e.density
        )
        .unwrap();
    }
    out
}

pub fn parse_mesh_dump(text: &str) -> Result<Vec<DumpElement>, RasterError> {
    let bad = |detail: String| RasterError::Format {
        what: "mesh dump",
        detail,
    };
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 6 {
            return Err(bad(format!(
                "line {}: expected 6 fields, got {}",
                lineno + 1,
                f.len()
            )));
        }
        let num = |i: usize| {
            f[i].parse::<f64>()
                .map_err(|e| bad(format!("line {} field {}: {e}", lineno + 1, i + 1)))
        };
        let int_err = |e: std::num::ParseIntError| bad(format!("line {}: {e}", lineno + 1));
        out.push(DumpElement {
            id: f[0].parse().map_err(int_err)?,
            level: f[1].parse().map_err(int_err)?,
            x: num(2)?,
            y: num(3)?,
            size: num(4)?,
            density: num(5)?,
        });
    }
    if out.is_empty() {
        return Err(bad("no elements".into()));
    }
    Ok(out)
}

/// Replicates each element value over the cells of the level-`lmax` grid it
/// covers. Fails if an element is finer than `lmax` or the cells are not
/// tiled exactly once.
pub fn rasterize_elements(
    elements: &[DumpElement],
    lmax: u8,
) -> Result<DensityRaster, RasterError> {
    let bad = |detail: String| RasterError::Format {
        what: "mesh dump",
        detail,
    };
    let first = elements.first().ok_or_else(|| bad("no elements".into()))?;
    let h0 = first.size * (1u64 << first.level) as f64;
    let cell = h0 / (1u64 << lmax) as f64;
    let width = elements.iter().map(|e| e.x + e.size).fold(0.0, f64::max);
    let height = elements.iter().map(|e| e.y + e.size).fold(0.0, f64::max);
    let nx = (width / cell).round() as usize;
    let ny = (height / cell).round() as usize;

    let mut values = vec![f64::NAN; nx * ny];
    for e in elements {
        if e.level > lmax {
            return Err(RasterError::LevelAboveRaster {
                level: e.level,
                lmax,
            });
        }
        let span = 1usize << (lmax - e.level);
        let ix0 = (e.x / cell).round() as usize;
        let iy0 = (e.y / cell).round() as usize;
        if ix0 + span > nx || iy0 + span > ny {
            return Err(bad(format!("element {} lies outside the domain", e.id)));
        }
        for iy in iy0..iy0 + span {
            for ix in ix0..ix0 + span {
                let v = &mut values[iy * nx + ix];
                if !v.is_nan() {
                    return Err(bad(format!("element {} overlaps another element", e.id)));
                }
                *v = e.density;
            }
        }
    }
    if values.iter().any(|v| v.is_nan()) {
        return Err(bad("elements do not cover the domain".into()));
    }
    Ok(DensityRaster {
        nx,
        ny,
        cell,
        values,
    })
}

pub fn rasterize(mesh: &AdaptiveMesh, rho: &[f64], lmax: u8) -> Result<DensityRaster, RasterError> {
    rasterize_elements(&mesh_elements(mesh, rho), lmax)
}

/// `sum |r1 - r2| / sum r1` over equal-area cells; `r1` is the reference.
pub fn design_difference(r1: &DensityRaster, r2: &DensityRaster) -> Result<f64, RasterError> {
    if (r1.nx, r1.ny) != (r2.nx, r2.ny) {
        return Err(RasterError::Dimensions(r1.nx, r1.ny, r2.nx, r2.ny));
    }
    let reference: f64 = r1.values.iter().sum();
    if !(reference > 0.0) {
        return Err(RasterError::EmptyReference);
    }
    let diff: f64 = r1
        .values
        .iter()
        .zip(&r2.values)
        .map(|(a, b)| (a - b).abs())
        .sum();
    Ok(diff / reference)
}
