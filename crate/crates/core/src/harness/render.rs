//! Classification-map rendering as binary PPM (P6), bit-exact for given
//! class assignments.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::data::{patch_at, HsiCube};
use crate::error::{Error, Result};
use crate::model::ModelState;

/// Fixed palette: index 0 (unlabeled) is black, then 16 distinct colors.
pub const PALETTE: [[u8; 3]; 17] = [
    [0, 0, 0],
    [230, 25, 75],
    [60, 180, 75],
    [255, 225, 25],
    [0, 130, 200],
    [245, 130, 48],
    [145, 30, 180],
    [70, 240, 240],
    [240, 50, 230],
    [210, 245, 60],
    [250, 190, 212],
    [0, 128, 128],
    [220, 190, 255],
    [170, 110, 40],
    [255, 250, 200],
    [128, 0, 0],
    [170, 255, 195],
];

/// What to paint: the cube's labels or a model's predictions.
pub enum MapSource<'a> {
    GroundTruth,
    Predictions {
        state: &'a ModelState,
        baseline: bool,
    },
}

/// Class of every pixel (1-based, 0 = unlabeled) according to the source.
/// Predictions cover every pixel, labeled or not.
pub fn class_grid(cube: &HsiCube, source: &MapSource) -> Result<Vec<u16>> {
    match source {
        MapSource::GroundTruth => Ok(cube.labels.clone()),
        MapSource::Predictions { state, baseline } => {
            if state.bands != cube.bands || state.num_classes != cube.num_classes {
                return Err(Error::dim(format!(
                    "model expects {} bands / {} classes, cube has {} / {}",
                    state.bands, state.num_classes, cube.bands, cube.num_classes
                )));
            }
            let mut grid = vec![0u16; cube.rows * cube.cols];
            for row in 0..cube.rows {
                for col in 0..cube.cols {
                    let patch = patch_at(cube, row, col, state.neighbor)?;
                    let class = state.predict(&patch, *baseline)?;
                    grid[row * cube.cols + col] = class as u16 + 1;
                }
            }
            Ok(grid)
        }
    }
}

/// Write a class grid as binary PPM, one image pixel per cube pixel.
pub fn write_ppm<W: Write>(
    grid: &[u16],
    rows: usize,
    cols: usize,
    palette: &[[u8; 3]],
    mut w: W,
) -> Result<()> {
    if grid.len() != rows * cols {
        return Err(Error::dim(format!(
            "grid length {} does not match {rows}x{cols}",
            grid.len()
        )));
    }
    if let Some(&max) = grid.iter().max() {
        if max as usize >= palette.len() {
            return Err(Error::invalid(format!(
                "palette has {} entries, class {max} needs more",
                palette.len()
            )));
        }
    }
    write!(w, "P6\n{cols} {rows}\n255\n")?;
    for &class in grid {
        w.write_all(&palette[class as usize])?;
    }
    Ok(())
}

/// Render the cube's truth or a model's predictions to a PPM file.
pub fn render_map(
    cube: &HsiCube,
    source: &MapSource,
    palette: &[[u8; 3]],
    path: &Path,
) -> Result<()> {
    if palette.len() < cube.num_classes + 1 {
        return Err(Error::invalid(format!(
            "palette has {} entries, need {}",
            palette.len(),
            cube.num_classes + 1
        )));
    }
    let grid = class_grid(cube, source)?;
    write_ppm(
        &grid,
        cube.rows,
        cube.cols,
        palette,
        BufWriter::new(File::create(path)?),
    )
}
