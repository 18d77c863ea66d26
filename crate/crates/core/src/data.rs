//! Synthetic hyperspectral scenes, the cube file format, patch extraction,
//! and train/test splitting.
//!
//! A scene pixel of class `m` is `s^m + sum_i w_i n_i + e`: the class
//! signature plus a random combination of generator-side base noises plus
//! white sensor noise. Classes are laid out as square blocks so that
//! spatial context carries information, like a land-cover map.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

const CUBE_MAGIC: &[u8; 4] = b"HSIC";
const CUBE_VERSION: u32 = 1;

/// A radiance cube with per-pixel labels. Label 0 means unlabeled; classes
/// are 1..=num_classes.
#[derive(Debug, Clone, PartialEq)]
pub struct HsiCube {
    pub bands: usize,
    pub rows: usize,
    pub cols: usize,
    pub num_classes: usize,
    /// Row-major, band outermost: `radiance[(band * rows + row) * cols + col]`.
    pub radiance: Vec<f64>,
    /// Row-major `rows x cols`.
    pub labels: Vec<u16>,
}

impl HsiCube {
    pub fn radiance_at(&self, band: usize, row: usize, col: usize) -> f64 {
        self.radiance[(band * self.rows + row) * self.cols + col]
    }

    pub fn label_at(&self, row: usize, col: usize) -> u16 {
        self.labels[row * self.cols + col]
    }

    /// Spectrum of one pixel across all bands.
    pub fn spectrum(&self, row: usize, col: usize) -> Vec<f64> {
        (0..self.bands)
            .map(|b| self.radiance_at(b, row, col))
            .collect()
    }

    /// All labeled pixel coordinates of one class, row-major order.
    pub fn class_pixels(&self, class: u16) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for row in 0..self.rows {
            for col in 0..self.cols {
                if self.label_at(row, col) == class {
                    out.push((row, col));
                }
            }
        }
        out
    }

    fn validate(&self) -> Result<()> {
        let spatial = self
            .rows
            .checked_mul(self.cols)
            .ok_or_else(|| Error::Format("spatial extent overflow".to_string()))?;
        let total = spatial
            .checked_mul(self.bands)
            .ok_or_else(|| Error::Format("cube extent overflow".to_string()))?;
        if self.radiance.len() != total || self.labels.len() != spatial {
            return Err(Error::Format("payload length mismatch".to_string()));
        }
        if self.radiance.iter().any(|v| !v.is_finite()) {
            return Err(Error::Format("non-finite radiance".to_string()));
        }
        if let Some(&bad) = self
            .labels
            .iter()
            .find(|&&l| l as usize > self.num_classes)
        {
            return Err(Error::Format(format!(
                "label {bad} exceeds class count {}",
                self.num_classes
            )));
        }
        Ok(())
    }
}

/// Recipe for a synthetic scene.
#[derive(Debug, Clone)]
pub struct SceneSpec {
    pub num_classes: usize,
    pub bands: usize,
    pub rows: usize,
    pub cols: usize,
    /// One spectral signature per class, each of length `bands`.
    pub signatures: Vec<Vec<f64>>,
    /// Generator-side base noises, each of length `bands`.
    pub true_bases: Vec<Vec<f64>>,
    /// Per-pixel base weights are uniform in [-noise_amplitude, noise_amplitude).
    pub noise_amplitude: f64,
    /// Standard deviation of per-band white sensor noise.
    pub white_noise_sigma: f64,
    /// Side length of the square class blocks.
    pub region_size: usize,
    pub seed: u64,
}

impl SceneSpec {
    /// Build a full synthetic recipe from scalar knobs: Gaussian-bump
    /// signatures (distinct center and width per class, unit peak) and
    /// unit-norm random base noises, all derived from the seed.
    #[allow(clippy::too_many_arguments)]
    pub fn synthetic(
        num_classes: usize,
        bands: usize,
        rows: usize,
        cols: usize,
        true_base_count: usize,
        noise_amplitude: f64,
        white_noise_sigma: f64,
        region_size: usize,
        seed: u64,
    ) -> SceneSpec {
        Self::confusable(
            num_classes,
            bands,
            rows,
            cols,
            true_base_count,
            noise_amplitude,
            white_noise_sigma,
            region_size,
            0.0,
            seed,
        )
    }

    /// Like [`SceneSpec::synthetic`], but each base noise is a unit-norm
    /// blend of a random direction and one pairwise signature difference:
    /// `normalize((1 - mix) * r + mix * (s_a - s_b))`, pairs cycling over
    /// all ordered class pairs. With `mix > 0` the structured noise moves
    /// pixels along class-confusing directions instead of directions a
    /// classifier could simply project away.
    #[allow(clippy::too_many_arguments)]
    pub fn confusable(
        num_classes: usize,
        bands: usize,
        rows: usize,
        cols: usize,
        true_base_count: usize,
        noise_amplitude: f64,
        white_noise_sigma: f64,
        region_size: usize,
        signature_mix: f64,
        seed: u64,
    ) -> SceneSpec {
        let signatures = gaussian_signatures(num_classes, bands);
        let pairs: Vec<(usize, usize)> = (0..num_classes)
            .flat_map(|a| (0..num_classes).filter(move |&b| b != a).map(move |b| (a, b)))
            .collect();
        let mut rng = Rng::seeded(seed).split(0xBA5E5);
        let true_bases = (0..true_base_count)
            .map(|i| {
                let r: Vec<f64> = (0..bands).map(|_| rng.uniform(-1.0, 1.0)).collect();
                let rn = crate::tensor::l2_norm(&r);
                let mut v: Vec<f64> = r.iter().map(|x| (1.0 - signature_mix) * x / rn).collect();
                if signature_mix != 0.0 && !pairs.is_empty() {
                    let (a, b) = pairs[i % pairs.len()];
                    let diff: Vec<f64> = signatures[a]
                        .iter()
                        .zip(&signatures[b])
                        .map(|(x, y)| x - y)
                        .collect();
                    let dn = crate::tensor::l2_norm(&diff);
                    for (vi, di) in v.iter_mut().zip(&diff) {
                        *vi += signature_mix * di / dn;
                    }
                }
                let vn = crate::tensor::l2_norm(&v);
                v.into_iter().map(|x| x / vn).collect()
            })
            .collect();
        SceneSpec {
            num_classes,
            bands,
            rows,
            cols,
            signatures,
            true_bases,
            noise_amplitude,
            white_noise_sigma,
            region_size,
            seed,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.num_classes == 0 || self.bands == 0 || self.rows == 0 || self.cols == 0 {
            return Err(Error::invalid("scene extents must be positive".to_string()));
        }
        if self.num_classes > u16::MAX as usize {
            return Err(Error::invalid("too many classes for u16 labels".to_string()));
        }
        if self.signatures.len() != self.num_classes
            || self.signatures.iter().any(|s| s.len() != self.bands)
        {
            return Err(Error::invalid(
                "need one signature of length bands per class".to_string(),
            ));
        }
        for a in 0..self.signatures.len() {
            for b in a + 1..self.signatures.len() {
                if self.signatures[a] == self.signatures[b] {
                    return Err(Error::invalid(format!(
                        "signatures {a} and {b} are identical"
                    )));
                }
            }
        }
        if self.true_bases.is_empty() || self.true_bases.iter().any(|n| n.len() != self.bands) {
            return Err(Error::invalid(
                "need at least one base noise of length bands".to_string(),
            ));
        }
        if self.noise_amplitude < 0.0 || self.white_noise_sigma < 0.0 {
            return Err(Error::invalid("noise scales must be >= 0".to_string()));
        }
        if self.region_size == 0 || self.region_size > self.rows || self.region_size > self.cols {
            return Err(Error::invalid(format!(
                "region size {} does not fit the {}x{} grid",
                self.region_size, self.rows, self.cols
            )));
        }
        Ok(())
    }
}

/// Gaussian-bump signatures: per class a unit-peak bump with its own center
/// and width along the band axis.
pub fn gaussian_signatures(num_classes: usize, bands: usize) -> Vec<Vec<f64>> {
    (0..num_classes)
        .map(|m| {
            let center = bands as f64 * (m as f64 + 1.0) / (num_classes as f64 + 1.0);
            let width = bands as f64 / 8.0 * (1.0 + 0.2 * m as f64);
            (0..bands)
                .map(|b| {
                    let z = (b as f64 - center) / width;
                    (-0.5 * z * z).exp()
                })
                .collect()
        })
        .collect()
}

/// Generate a scene: tile the grid into `region_size` blocks assigned to
/// classes cyclically, then per pixel add the weighted base noises and white
/// noise to the class signature. Deterministic given the recipe.
pub fn generate_scene(spec: &SceneSpec) -> Result<HsiCube> {
    spec.validate()?;
    let (rows, cols, bands) = (spec.rows, spec.cols, spec.bands);
    let blocks_per_row = cols.div_ceil(spec.region_size);

    let mut labels = vec![0u16; rows * cols];
    for row in 0..rows {
        for col in 0..cols {
            let block = (row / spec.region_size) * blocks_per_row + col / spec.region_size;
            labels[row * cols + col] = (block % spec.num_classes) as u16 + 1;
        }
    }

    let mut rng = Rng::seeded(spec.seed).split(0x50E7E);
    let mut radiance = vec![0.0; bands * rows * cols];
    for row in 0..rows {
        for col in 0..cols {
            let class = labels[row * cols + col] as usize - 1;
            let weights: Vec<f64> = (0..spec.true_bases.len())
                .map(|_| rng.uniform(-1.0, 1.0) * spec.noise_amplitude)
                .collect();
            for band in 0..bands {
                let mut v = spec.signatures[class][band];
                for (w, base) in weights.iter().zip(&spec.true_bases) {
                    v += w * base[band];
                }
                if spec.white_noise_sigma > 0.0 {
                    v += spec.white_noise_sigma * rng.normal();
                }
                radiance[(band * rows + row) * cols + col] = v;
            }
        }
    }

    Ok(HsiCube {
        bands,
        rows,
        cols,
        num_classes: spec.num_classes,
        radiance,
        labels,
    })
}

// ── Cube file format ────────────────────────────────────────────────
//
// Little-endian: magic "HSIC", version u32, bands u32, rows u32, cols u32,
// num_classes u32, radiance f64 row-major band-outermost, labels u16
// row-major.

pub fn write_cube<W: Write>(cube: &HsiCube, mut w: W) -> Result<()> {
    cube.validate()?;
    for dim in [cube.bands, cube.rows, cube.cols, cube.num_classes] {
        if dim > u32::MAX as usize {
            return Err(Error::Format(format!("extent {dim} exceeds u32")));
        }
    }
    w.write_all(CUBE_MAGIC)?;
    w.write_all(&CUBE_VERSION.to_le_bytes())?;
    for dim in [cube.bands, cube.rows, cube.cols, cube.num_classes] {
        w.write_all(&(dim as u32).to_le_bytes())?;
    }
    for v in &cube.radiance {
        w.write_all(&v.to_le_bytes())?;
    }
    for l in &cube.labels {
        w.write_all(&l.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_cube<R: Read>(mut r: R) -> Result<HsiCube> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| Error::Format("truncated cube header".to_string()))?;
    if &magic != CUBE_MAGIC {
        return Err(Error::Format(format!(
            "bad magic {magic:?}, expected {CUBE_MAGIC:?}"
        )));
    }
    let version = read_u32(&mut r)?;
    if version != CUBE_VERSION {
        return Err(Error::Format(format!("unsupported cube version {version}")));
    }
    let bands = read_u32(&mut r)? as usize;
    let rows = read_u32(&mut r)? as usize;
    let cols = read_u32(&mut r)? as usize;
    let num_classes = read_u32(&mut r)? as usize;

    let spatial = rows
        .checked_mul(cols)
        .ok_or_else(|| Error::Format("spatial extent overflow".to_string()))?;
    let total = spatial
        .checked_mul(bands)
        .ok_or_else(|| Error::Format("cube extent overflow".to_string()))?;

    let mut radiance = vec![0.0f64; total];
    let mut buf8 = [0u8; 8];
    for v in radiance.iter_mut() {
        r.read_exact(&mut buf8)
            .map_err(|_| Error::Format("truncated radiance payload".to_string()))?;
        *v = f64::from_le_bytes(buf8);
    }
    let mut labels = vec![0u16; spatial];
    let mut buf2 = [0u8; 2];
    for l in labels.iter_mut() {
        r.read_exact(&mut buf2)
            .map_err(|_| Error::Format("truncated label payload".to_string()))?;
        *l = u16::from_le_bytes(buf2);
    }
    let mut rest = Vec::new();
    r.read_to_end(&mut rest)?;
    if !rest.is_empty() {
        return Err(Error::Format(format!(
            "{} trailing bytes after cube payload",
            rest.len()
        )));
    }

    let cube = HsiCube {
        bands,
        rows,
        cols,
        num_classes,
        radiance,
        labels,
    };
    cube.validate()?;
    Ok(cube)
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)
        .map_err(|_| Error::Format("truncated cube header".to_string()))?;
    Ok(u32::from_le_bytes(buf))
}

pub fn save_cube(cube: &HsiCube, path: &Path) -> Result<()> {
    write_cube(cube, BufWriter::new(File::create(path)?))
}

pub fn load_cube(path: &Path) -> Result<HsiCube> {
    read_cube(BufReader::new(File::open(path)?))
}

// ── Patch extraction ────────────────────────────────────────────────

/// Mirror reflection about the border pixel (no edge duplication). For a
/// single-element axis every index maps to 0.
fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut m = i.rem_euclid(period);
    if m >= n as isize {
        m = period - m;
    }
    m as usize
}

/// The `w x w` spatial window centered at the pixel across all bands, with
/// mirror-reflected borders. Does not require the center to be labeled.
pub fn patch_at(cube: &HsiCube, row: usize, col: usize, w: usize) -> Result<Tensor> {
    if w % 2 == 0 {
        return Err(Error::invalid(format!("neighbor size {w} must be odd")));
    }
    if row >= cube.rows || col >= cube.cols {
        return Err(Error::invalid(format!(
            "pixel ({row}, {col}) outside {}x{} grid",
            cube.rows, cube.cols
        )));
    }
    let r = (w / 2) as isize;
    let mut data = Vec::with_capacity(cube.bands * w * w);
    for band in 0..cube.bands {
        for dy in -r..=r {
            let y = reflect(row as isize + dy, cube.rows);
            for dx in -r..=r {
                let x = reflect(col as isize + dx, cube.cols);
                data.push(cube.radiance_at(band, y, x));
            }
        }
    }
    Tensor::new(vec![cube.bands, w, w], data)
}

/// [`patch_at`] for a labeled center pixel.
pub fn extract_patch(cube: &HsiCube, row: usize, col: usize, w: usize) -> Result<Tensor> {
    if row >= cube.rows || col >= cube.cols || cube.label_at(row, col) == 0 {
        return Err(Error::invalid(format!(
            "pixel ({row}, {col}) is not a labeled pixel"
        )));
    }
    patch_at(cube, row, col, w)
}

// ── Train/test splitting ────────────────────────────────────────────

/// Draw exactly `per_class` labeled pixels per class for training (without
/// replacement, seeded); everything else labeled is test. Deterministic.
pub fn split_train_test(
    cube: &HsiCube,
    per_class: usize,
    seed: u64,
) -> Result<(Vec<(usize, usize)>, Vec<(usize, usize)>)> {
    let mut rng = Rng::seeded(seed).split(0x5911);
    let mut train = Vec::new();
    let mut test = Vec::new();
    for class in 1..=cube.num_classes as u16 {
        let pixels = cube.class_pixels(class);
        if pixels.len() <= per_class {
            return Err(Error::invalid(format!(
                "class {class} has {} labeled pixels, need more than {per_class}",
                pixels.len()
            )));
        }
        let chosen = rng.choose_indices(pixels.len(), per_class);
        let mut in_train = vec![false; pixels.len()];
        for &i in &chosen {
            in_train[i] = true;
            train.push(pixels[i]);
        }
        for (i, &p) in pixels.iter().enumerate() {
            if !in_train[i] {
                test.push(p);
            }
        }
    }
    Ok((train, test))
}

/// Audit CSV of a split: `row,col,class,role` with role `train` or `test`.
pub fn write_split_csv<W: Write>(
    cube: &HsiCube,
    train: &[(usize, usize)],
    test: &[(usize, usize)],
    mut w: W,
) -> Result<()> {
    writeln!(w, "row,col,class,role")?;
    for &(row, col) in train {
        writeln!(w, "{row},{col},{},train", cube.label_at(row, col))?;
    }
    for &(row, col) in test {
        writeln!(w, "{row},{col},{},test", cube.label_at(row, col))?;
    }
    Ok(())
}

pub fn save_split_csv(
    cube: &HsiCube,
    train: &[(usize, usize)],
    test: &[(usize, usize)],
    path: &Path,
) -> Result<()> {
    write_split_csv(cube, train, test, BufWriter::new(File::create(path)?))
}
