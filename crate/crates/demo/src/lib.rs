//! Browser bindings: three interactive views onto the classifier.
//!
//! - [`SceneLab`]: generate a synthetic scene and look at it (false-color
//!   composite and ground-truth map) while moving the noise knobs.
//! - [`NoiseLab`]: the noise-space geometry in 2-D — cosine similarities,
//!   energy-preserving weights, and the reconstructed vector.
//! - [`TrainLab`]: train a small model live, with or without the noise
//!   module, watching the predicted map and the held-out accuracy.
//!
//! Everything is deterministic given the seeds; no host entropy or clocks.

use wasm_bindgen::prelude::*;

use hsiden_core::data::{extract_patch, generate_scene, patch_at, split_train_test, HsiCube, SceneSpec};
use hsiden_core::harness::{confusion_from_pairs, compute_metrics, PALETTE};
use hsiden_core::model::{ModelState, TrainBatch, TrainParams};
use hsiden_core::noise_space::{NoiseSpace, UpdateSign};
use hsiden_core::rng::Rng;
use hsiden_core::tensor::Tensor;

fn grid_rgba(grid: &[u16]) -> Vec<u8> {
    let mut out = Vec::with_capacity(grid.len() * 4);
    for &class in grid {
        let [r, g, b] = PALETTE[class as usize % PALETTE.len()];
        out.extend_from_slice(&[r, g, b, 255]);
    }
    out
}

/// False-color composite: three bands spread over the spectrum, each
/// min-max normalized over the scene.
fn composite_rgba(cube: &HsiCube) -> Vec<u8> {
    let picks = [cube.bands / 6, cube.bands / 2, (cube.bands * 5) / 6];
    let mut ranges = Vec::new();
    for &band in &picks {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for row in 0..cube.rows {
            for col in 0..cube.cols {
                let v = cube.radiance_at(band, row, col);
                lo = lo.min(v);
                hi = hi.max(v);
            }
        }
        ranges.push((lo, (hi - lo).max(1e-12)));
    }
    let mut out = Vec::with_capacity(cube.rows * cube.cols * 4);
    for row in 0..cube.rows {
        for col in 0..cube.cols {
            for (i, &band) in picks.iter().enumerate() {
                let (lo, span) = ranges[i];
                let v = (cube.radiance_at(band, row, col) - lo) / span;
                out.push((v.clamp(0.0, 1.0) * 255.0) as u8);
            }
            out.push(255);
        }
    }
    out
}

/// Synthetic-scene explorer.
#[wasm_bindgen]
pub struct SceneLab {
    cube: HsiCube,
}

#[wasm_bindgen]
impl SceneLab {
    /// Generate a 4-class, 16-band scene. `signature_mix` blends the base
    /// noises toward class-difference directions.
    #[wasm_bindgen(constructor)]
    pub fn new(
        seed: u64,
        noise_amplitude: f64,
        white_noise_sigma: f64,
        signature_mix: f64,
        region_size: usize,
    ) -> Result<SceneLab, JsError> {
        let spec = SceneSpec::confusable(
            4,
            16,
            48,
            48,
            8,
            noise_amplitude.max(0.0),
            white_noise_sigma.max(0.0),
            region_size.clamp(4, 48),
            signature_mix.clamp(0.0, 1.0),
            seed,
        );
        let cube = generate_scene(&spec).map_err(|e| JsError::new(&e.to_string()))?;
        Ok(SceneLab { cube })
    }

    pub fn rows(&self) -> usize {
        self.cube.rows
    }

    pub fn cols(&self) -> usize {
        self.cube.cols
    }

    /// RGBA bytes of the ground-truth class map.
    pub fn truth_rgba(&self) -> Vec<u8> {
        grid_rgba(&self.cube.labels)
    }

    /// RGBA bytes of a false-color composite of three bands.
    pub fn composite_rgba(&self) -> Vec<u8> {
        composite_rgba(&self.cube)
    }

    /// The spectrum of one pixel, for plotting.
    pub fn spectrum(&self, row: usize, col: usize) -> Vec<f64> {
        if row < self.cube.rows && col < self.cube.cols {
            self.cube.spectrum(row, col)
        } else {
            Vec::new()
        }
    }

    pub fn label_at(&self, row: usize, col: usize) -> u16 {
        if row < self.cube.rows && col < self.cube.cols {
            self.cube.label_at(row, col)
        } else {
            0
        }
    }
}

/// Noise-space geometry in two dimensions.
#[wasm_bindgen]
pub struct NoiseLab {
    space: NoiseSpace,
}

#[wasm_bindgen]
impl NoiseLab {
    /// Bases given as interleaved `[angle_rad, length]` pairs.
    #[wasm_bindgen(constructor)]
    pub fn new(base_params: Vec<f64>) -> Result<NoiseLab, JsError> {
        if base_params.len() < 2 || base_params.len() % 2 != 0 {
            return Err(JsError::new("need interleaved [angle, length] pairs"));
        }
        let k = base_params.len() / 2;
        let mut bases = Vec::with_capacity(k * 2);
        for pair in base_params.chunks(2) {
            bases.push(pair[1] * pair[0].cos());
            bases.push(pair[1] * pair[0].sin());
        }
        let space = NoiseSpace::with_bases(k, 2, bases).map_err(|e| JsError::new(&e.to_string()))?;
        Ok(NoiseLab { space })
    }

    pub fn k(&self) -> usize {
        self.space.k()
    }

    /// Flat `[x, y]` pairs of the current bases.
    pub fn bases(&self) -> Vec<f64> {
        self.space.bases_flat().to_vec()
    }

    /// Run the estimate for an extracted-noise vector `(x, y)`.
    ///
    /// Returns `[degenerate, energy_ratio, pre_x, pre_y, res_x, res_y,
    /// s_1..s_k, w_1..w_k]`.
    pub fn estimate(&self, x: f64, y: f64) -> Vec<f64> {
        let est = match self.space.estimate(vec![x, y]) {
            Ok(e) => e,
            Err(_) => return Vec::new(),
        };
        let norm_f = (x * x + y * y).sqrt();
        let norm_r = (est.reconstructed[0].powi(2) + est.reconstructed[1].powi(2)).sqrt();
        let ratio = if norm_f > 0.0 { norm_r / norm_f } else { 0.0 };
        let mut out = vec![
            if est.degenerate { 1.0 } else { 0.0 },
            ratio,
            est.pre_reconstruction[0],
            est.pre_reconstruction[1],
            est.reconstructed[0],
            est.reconstructed[1],
        ];
        out.extend(&est.similarities);
        out.extend(&est.weights);
        out
    }

    /// One decayed self-supervised update toward reconstructing `(x, y)`.
    pub fn update_step(&mut self, x: f64, y: f64, beta: f64) {
        self.space.beta = beta.clamp(0.0, 1.0);
        if self.space.k() < 2 {
            return;
        }
        if let Ok(est) = self.space.estimate(vec![x, y]) {
            if let Ok(grads) = self.space.base_gradients(&est.extracted, &est.weights) {
                let _ = self.space.apply_update(&grads, UpdateSign::Descent);
            }
        }
    }
}

/// Live training of a small model on a generated scene.
#[wasm_bindgen]
pub struct TrainLab {
    cube: HsiCube,
    state: ModelState,
    opts: TrainParams,
    patches: Vec<Tensor>,
    labels: Vec<usize>,
    eval_coords: Vec<(usize, usize)>,
    order: Vec<usize>,
    shuffle_rng: Rng,
    epoch: usize,
    neighbor: usize,
    last_losses: [f64; 5],
}

const TRAIN_NEIGHBOR: usize = 3;
const TRAIN_BATCH: usize = 4;

#[wasm_bindgen]
impl TrainLab {
    /// A 3-class, 8-band, 32x32 scene; `baseline` disables the noise module.
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u64, baseline: bool, noise_amplitude: f64) -> Result<TrainLab, JsError> {
        let spec = SceneSpec::confusable(3, 8, 32, 32, 4, noise_amplitude.max(0.0), 0.03, 8, 0.9, seed);
        let cube = generate_scene(&spec).map_err(|e| JsError::new(&e.to_string()))?;
        let (train, test) =
            split_train_test(&cube, 30, seed).map_err(|e| JsError::new(&e.to_string()))?;

        let mut state = ModelState::init(cube.bands, TRAIN_NEIGHBOR, cube.num_classes, 16, 16, seed)
            .map_err(|e| JsError::new(&e.to_string()))?;
        state.centers.gamma = 0.9;

        let patches = train
            .iter()
            .map(|&(r, c)| extract_patch(&cube, r, c, TRAIN_NEIGHBOR))
            .collect::<hsiden_core::Result<Vec<_>>>()
            .map_err(|e| JsError::new(&e.to_string()))?;
        let labels: Vec<usize> = train
            .iter()
            .map(|&(r, c)| cube.label_at(r, c) as usize - 1)
            .collect();
        let order: Vec<usize> = (0..patches.len()).collect();
        let eval_coords: Vec<(usize, usize)> = test.iter().step_by(3).copied().collect();

        Ok(TrainLab {
            cube,
            state,
            opts: TrainParams {
                lr: 1e-2,
                lambda_c: 0.1,
                update_sign: UpdateSign::Descent,
                baseline,
            },
            patches,
            labels,
            eval_coords,
            order,
            shuffle_rng: Rng::seeded(seed).split(0x0EDE2),
            epoch: 0,
            neighbor: TRAIN_NEIGHBOR,
            last_losses: [0.0; 5],
        })
    }

    pub fn rows(&self) -> usize {
        self.cube.rows
    }

    pub fn cols(&self) -> usize {
        self.cube.cols
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    /// Train one epoch and return the held-out overall accuracy.
    pub fn step_epoch(&mut self) -> Result<f64, JsError> {
        self.shuffle_rng.shuffle(&mut self.order);
        let mut sums = [0.0f64; 5];
        let mut steps = 0.0;
        for chunk in self.order.chunks(TRAIN_BATCH) {
            let batch = TrainBatch {
                patches: chunk.iter().map(|&i| self.patches[i].clone()).collect(),
                labels: chunk.iter().map(|&i| self.labels[i]).collect(),
            };
            let report = self
                .state
                .train_step(&batch, &self.opts)
                .map_err(|e| JsError::new(&e.to_string()))?;
            sums[0] += report.cross_entropy;
            sums[1] += report.center;
            sums[2] += report.reconstruction;
            sums[3] += report.sparsity;
            sums[4] += report.diversity;
            steps += 1.0;
        }
        for (slot, sum) in self.last_losses.iter_mut().zip(sums) {
            *slot = sum / steps;
        }
        self.epoch += 1;
        self.held_out_accuracy()
    }

    /// Overall accuracy on the fixed held-out subset.
    pub fn held_out_accuracy(&self) -> Result<f64, JsError> {
        let mut truth = Vec::with_capacity(self.eval_coords.len());
        let mut pred = Vec::with_capacity(self.eval_coords.len());
        for &(row, col) in &self.eval_coords {
            let patch = extract_patch(&self.cube, row, col, self.neighbor)
                .map_err(|e| JsError::new(&e.to_string()))?;
            truth.push(self.cube.label_at(row, col) as usize - 1);
            pred.push(
                self.state
                    .predict(&patch, self.opts.baseline)
                    .map_err(|e| JsError::new(&e.to_string()))?,
            );
        }
        let confusion = confusion_from_pairs(&truth, &pred, self.cube.num_classes)
            .map_err(|e| JsError::new(&e.to_string()))?;
        compute_metrics(&confusion)
            .map(|r| r.overall_accuracy)
            .map_err(|e| JsError::new(&e.to_string()))
    }

    /// `[cross_entropy, center, reconstruction, sparsity, diversity]` of
    /// the last epoch.
    pub fn losses(&self) -> Vec<f64> {
        self.last_losses.to_vec()
    }

    /// RGBA bytes of the predicted class map over the whole scene.
    pub fn predicted_rgba(&self) -> Result<Vec<u8>, JsError> {
        let mut grid = vec![0u16; self.cube.rows * self.cube.cols];
        for row in 0..self.cube.rows {
            for col in 0..self.cube.cols {
                let patch = patch_at(&self.cube, row, col, self.neighbor)
                    .map_err(|e| JsError::new(&e.to_string()))?;
                let class = self
                    .state
                    .predict(&patch, self.opts.baseline)
                    .map_err(|e| JsError::new(&e.to_string()))?;
                grid[row * self.cube.cols + col] = class as u16 + 1;
            }
        }
        Ok(grid_rgba(&grid))
    }

    /// RGBA bytes of the ground-truth map.
    pub fn truth_rgba(&self) -> Vec<u8> {
        grid_rgba(&self.cube.labels)
    }
}
