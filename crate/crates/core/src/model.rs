//! The full classifier: 3-D CNN backbone, noise extraction and subtraction,
//! linear head, center loss, and the combined training step.
//!
//! The backbone is two convolution blocks and a fully connected layer onto
//! the feature dimension. Kernel extents are clamped to the input extents so
//! small patches (down to 1x1 spatial, few bands) remain valid. Backbone,
//! extractor, and head train by gradient descent on cross-entropy plus a
//! weighted center loss; class centers move by a moving average off the
//! tape; the noise bank moves only through its self-supervised rule.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::noise_space::{NoiseSpace, TapeEstimate, UpdateSign};
use crate::rng::Rng;
use crate::tensor::{Gradients, Tape, Tensor, VarId};

const CONV1_KERNELS: usize = 8;
const CONV1_SPECTRAL: usize = 7;
const CONV1_SPATIAL: usize = 3;
const CONV2_KERNELS: usize = 16;
const CONV2_SPECTRAL: usize = 5;
const CONV2_SPATIAL: usize = 2;
/// The extractor starts at half the usual init scale: a full-scale random
/// extractor subtracts a large arbitrary direction from every feature
/// vector early in training, which the rest of the net then has to unlearn.
const EXTRACTOR_INIT_DAMP: f64 = 0.5;

const CHECKPOINT_MAGIC: &[u8; 4] = b"HDNM";
const CHECKPOINT_VERSION: u32 = 1;

/// Per-class feature centers updated by moving average.
#[derive(Debug, Clone, PartialEq)]
pub struct CenterBank {
    num_classes: usize,
    d: usize,
    /// Row-major `num_classes x d`.
    centers: Vec<f64>,
    /// Update rate toward the batch mean of each class.
    pub gamma: f64,
}

pub const DEFAULT_GAMMA: f64 = 0.5;

impl CenterBank {
    pub fn zeros(num_classes: usize, d: usize, gamma: f64) -> CenterBank {
        CenterBank {
            num_classes,
            d,
            centers: vec![0.0; num_classes * d],
            gamma,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn center(&self, class: usize) -> &[f64] {
        &self.centers[class * self.d..(class + 1) * self.d]
    }

    pub fn centers_flat(&self) -> &[f64] {
        &self.centers
    }

    /// Half the summed squared distance of each feature to its class center.
    pub fn loss(&self, features: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
        let mut total = 0.0;
        for (f, &label) in features.iter().zip(labels) {
            if label >= self.num_classes {
                return Err(Error::LabelOutOfRange {
                    label,
                    classes: self.num_classes,
                });
            }
            total += f
                .iter()
                .zip(self.center(label))
                .map(|(x, c)| (x - c) * (x - c))
                .sum::<f64>();
        }
        Ok(0.5 * total)
    }

    /// Move each class center present in the batch toward the mean of that
    /// class's features: `c <- c - gamma * mean(c - f)`. Absent classes are
    /// unchanged.
    pub fn update(&mut self, features: &[Vec<f64>], labels: &[usize]) -> Result<()> {
        if features.is_empty() || features.len() != labels.len() {
            return Err(Error::invalid(
                "center update needs a nonempty feature/label batch".to_string(),
            ));
        }
        for class in 0..self.num_classes {
            let members: Vec<&Vec<f64>> = features
                .iter()
                .zip(labels)
                .filter(|(_, &l)| l == class)
                .map(|(f, _)| f)
                .collect();
            if members.is_empty() {
                continue;
            }
            let n = members.len() as f64;
            let gamma = self.gamma;
            let center = &mut self.centers[class * self.d..(class + 1) * self.d];
            for (j, c) in center.iter_mut().enumerate() {
                let delta = members.iter().map(|f| *c - f[j]).sum::<f64>() / n;
                *c -= gamma * delta;
            }
        }
        Ok(())
    }
}

/// One training batch of spectral-spatial patches with 0-based class labels.
#[derive(Debug, Clone)]
pub struct TrainBatch {
    pub patches: Vec<Tensor>,
    pub labels: Vec<usize>,
}

/// Knobs of one training step.
#[derive(Debug, Clone, Copy)]
pub struct TrainParams {
    pub lr: f64,
    /// Weight of the center loss in the combined objective.
    pub lambda_c: f64,
    pub update_sign: UpdateSign,
    /// Disable the noise module (ablation).
    pub baseline: bool,
}

pub const DEFAULT_LAMBDA_C: f64 = 0.01;

/// Losses of one step, means over the batch.
#[derive(Debug, Clone, Copy)]
pub struct StepReport {
    pub cross_entropy: f64,
    pub center: f64,
    pub reconstruction: f64,
    pub sparsity: f64,
    pub diversity: f64,
    pub degenerate_samples: usize,
}

/// All learned state of the classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub bands: usize,
    pub neighbor: usize,
    pub num_classes: usize,
    pub feature_dim: usize,
    conv1_kernels: Tensor,
    conv1_bias: Tensor,
    conv2_kernels: Tensor,
    conv2_bias: Tensor,
    fc_weight: Tensor,
    fc_bias: Tensor,
    extractor_weight: Tensor,
    extractor_bias: Tensor,
    head_weight: Tensor,
    head_bias: Tensor,
    pub noise_space: NoiseSpace,
    pub centers: CenterBank,
}

/// Tape handles of the trainable parameters for one step.
pub struct TapeModel {
    conv1_kernels: VarId,
    conv1_bias: VarId,
    conv2_kernels: VarId,
    conv2_bias: VarId,
    fc_weight: VarId,
    fc_bias: VarId,
    extractor_weight: VarId,
    extractor_bias: VarId,
    head_weight: VarId,
    head_bias: VarId,
}

impl TapeModel {
    fn ids(&self) -> [VarId; 10] {
        [
            self.conv1_kernels,
            self.conv1_bias,
            self.conv2_kernels,
            self.conv2_bias,
            self.fc_weight,
            self.fc_bias,
            self.extractor_weight,
            self.extractor_bias,
            self.head_weight,
            self.head_bias,
        ]
    }
}

struct BatchForward {
    tape: Tape,
    params: TapeModel,
    ce_vars: Vec<VarId>,
    clean_vars: Vec<VarId>,
    estimates: Vec<TapeEstimate>,
    total: VarId,
    center: VarId,
}

/// One sample's forward pass on the tape.
pub struct SampleForward {
    pub features: VarId,
    pub clean: VarId,
    pub logits: VarId,
    /// The noise-module products; `None` in baseline mode.
    pub noise: Option<TapeEstimate>,
}

impl ModelState {
    /// Seeded initialization. Kernel extents are clamped so the declared
    /// architecture fits the configured bands and neighbor size.
    pub fn init(
        bands: usize,
        neighbor: usize,
        num_classes: usize,
        feature_dim: usize,
        noise_bases: usize,
        seed: u64,
    ) -> Result<ModelState> {
        if bands == 0 || feature_dim == 0 {
            return Err(Error::invalid(
                "bands and feature dimension must be positive".to_string(),
            ));
        }
        if neighbor == 0 || neighbor % 2 == 0 {
            return Err(Error::invalid(format!(
                "neighbor size {neighbor} must be odd"
            )));
        }
        if num_classes < 2 {
            return Err(Error::invalid("need at least two classes".to_string()));
        }

        let (kd1, ks1) = (CONV1_SPECTRAL.min(bands), CONV1_SPATIAL.min(neighbor));
        let d1 = bands - kd1 + 1;
        let s1 = neighbor - ks1 + 1;
        let (kd2, ks2) = (CONV2_SPECTRAL.min(d1), CONV2_SPATIAL.min(s1));
        let d2 = d1 - kd2 + 1;
        let s2 = s1 - ks2 + 1;
        let flat = CONV2_KERNELS * d2 * s2 * s2;

        let mut master = Rng::seeded(seed);
        let fan = |n: usize| 1.0 / (n as f64).sqrt();
        let conv1_kernels = Tensor::uniform(
            vec![CONV1_KERNELS, 1, kd1, ks1, ks1],
            fan(kd1 * ks1 * ks1),
            &mut master.split(1),
        );
        let conv2_kernels = Tensor::uniform(
            vec![CONV2_KERNELS, CONV1_KERNELS, kd2, ks2, ks2],
            fan(CONV1_KERNELS * kd2 * ks2 * ks2),
            &mut master.split(2),
        );
        let fc_weight = Tensor::uniform(vec![feature_dim, flat], fan(flat), &mut master.split(3));
        let extractor_weight = Tensor::uniform(
            vec![feature_dim, feature_dim],
            EXTRACTOR_INIT_DAMP * fan(feature_dim),
            &mut master.split(4),
        );
        let head_weight = Tensor::uniform(
            vec![num_classes, feature_dim],
            fan(feature_dim),
            &mut master.split(5),
        );
        let noise_space = NoiseSpace::init(noise_bases, feature_dim, master.split(6).next_u64())?;

        Ok(ModelState {
            bands,
            neighbor,
            num_classes,
            feature_dim,
            conv1_kernels,
            conv1_bias: Tensor::zeros(vec![CONV1_KERNELS]),
            conv2_kernels,
            conv2_bias: Tensor::zeros(vec![CONV2_KERNELS]),
            fc_weight,
            fc_bias: Tensor::zeros(vec![feature_dim]),
            extractor_weight,
            extractor_bias: Tensor::zeros(vec![feature_dim]),
            head_weight,
            head_bias: Tensor::zeros(vec![num_classes]),
            noise_space,
            centers: CenterBank::zeros(num_classes, feature_dim, DEFAULT_GAMMA),
        })
    }

    pub fn extractor_weight(&self) -> &Tensor {
        &self.extractor_weight
    }

    pub fn extractor_bias(&self) -> &Tensor {
        &self.extractor_bias
    }

    /// Overwrite the extractor parameters (used to force degenerate
    /// estimates in tests and ablations).
    pub fn set_extractor(&mut self, weight: Tensor, bias: Tensor) -> Result<()> {
        let d = self.feature_dim;
        if weight.shape() != [d, d] || bias.shape() != [d] {
            return Err(Error::shape("extractor shapes must be [d,d] and [d]".to_string()));
        }
        self.extractor_weight = weight;
        self.extractor_bias = bias;
        Ok(())
    }

    fn parameters(&self) -> [(&'static str, &Tensor); 10] {
        [
            ("conv1.kernels", &self.conv1_kernels),
            ("conv1.bias", &self.conv1_bias),
            ("conv2.kernels", &self.conv2_kernels),
            ("conv2.bias", &self.conv2_bias),
            ("fc.weight", &self.fc_weight),
            ("fc.bias", &self.fc_bias),
            ("extractor.weight", &self.extractor_weight),
            ("extractor.bias", &self.extractor_bias),
            ("head.weight", &self.head_weight),
            ("head.bias", &self.head_bias),
        ]
    }

    fn parameters_mut(&mut self) -> [(&'static str, &mut Tensor); 10] {
        [
            ("conv1.kernels", &mut self.conv1_kernels),
            ("conv1.bias", &mut self.conv1_bias),
            ("conv2.kernels", &mut self.conv2_kernels),
            ("conv2.bias", &mut self.conv2_bias),
            ("fc.weight", &mut self.fc_weight),
            ("fc.bias", &mut self.fc_bias),
            ("extractor.weight", &mut self.extractor_weight),
            ("extractor.bias", &mut self.extractor_bias),
            ("head.weight", &mut self.head_weight),
            ("head.bias", &mut self.head_bias),
        ]
    }

    /// Record the trainable parameters on a tape.
    pub fn register(&self, tape: &mut Tape, tracked: bool) -> TapeModel {
        let mut reg = |t: &Tensor| {
            if tracked {
                tape.input(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        TapeModel {
            conv1_kernels: reg(&self.conv1_kernels),
            conv1_bias: reg(&self.conv1_bias),
            conv2_kernels: reg(&self.conv2_kernels),
            conv2_bias: reg(&self.conv2_bias),
            fc_weight: reg(&self.fc_weight),
            fc_bias: reg(&self.fc_bias),
            extractor_weight: reg(&self.extractor_weight),
            extractor_bias: reg(&self.extractor_bias),
            head_weight: reg(&self.head_weight),
            head_bias: reg(&self.head_bias),
        }
    }

    /// Backbone: conv -> relu -> conv -> relu -> flatten -> fully connected
    /// -> relu, producing the feature vector.
    pub fn backbone_forward(
        &self,
        tape: &mut Tape,
        params: &TapeModel,
        patch: VarId,
    ) -> Result<VarId> {
        let shape = tape.value(patch).shape().to_vec();
        if shape != [self.bands, self.neighbor, self.neighbor] {
            return Err(Error::shape(format!(
                "patch shape {shape:?} does not match configured [{}, {}, {}]",
                self.bands, self.neighbor, self.neighbor
            )));
        }
        let p4 = tape.reshape(patch, vec![1, self.bands, self.neighbor, self.neighbor])?;
        let c1 = tape.conv3d(p4, params.conv1_kernels, 1)?;
        let b1 = tape.channel_bias(c1, params.conv1_bias)?;
        let r1 = tape.relu(b1)?;
        let c2 = tape.conv3d(r1, params.conv2_kernels, 1)?;
        let b2 = tape.channel_bias(c2, params.conv2_bias)?;
        let r2 = tape.relu(b2)?;
        let flat_len = tape.value(r2).numel();
        let flat = tape.reshape(r2, vec![flat_len, 1])?;
        let mm = tape.matmul(params.fc_weight, flat)?;
        let bias = tape.reshape(params.fc_bias, vec![self.feature_dim, 1])?;
        let h = tape.add(mm, bias)?;
        let r = tape.relu(h)?;
        tape.reshape(r, vec![self.feature_dim])
    }

    /// Affine extraction of the noise estimate on the tape.
    fn extract_on_tape(&self, tape: &mut Tape, params: &TapeModel, features: VarId) -> Result<VarId> {
        let col = tape.reshape(features, vec![self.feature_dim, 1])?;
        let mm = tape.matmul(params.extractor_weight, col)?;
        let bias = tape.reshape(params.extractor_bias, vec![self.feature_dim, 1])?;
        let sum = tape.add(mm, bias)?;
        tape.reshape(sum, vec![self.feature_dim])
    }

    fn head_on_tape(&self, tape: &mut Tape, params: &TapeModel, clean: VarId) -> Result<VarId> {
        let col = tape.reshape(clean, vec![self.feature_dim, 1])?;
        let mm = tape.matmul(params.head_weight, col)?;
        let bias = tape.reshape(params.head_bias, vec![self.num_classes, 1])?;
        let sum = tape.add(mm, bias)?;
        tape.reshape(sum, vec![self.num_classes])
    }

    /// Forward one sample: backbone, noise estimate, denoise, logits.
    /// In baseline mode (or on a degenerate estimate) the clean features are
    /// the backbone features themselves.
    pub fn forward_sample(
        &self,
        tape: &mut Tape,
        params: &TapeModel,
        patch: VarId,
        baseline: bool,
    ) -> Result<SampleForward> {
        let features = self.backbone_forward(tape, params, patch)?;
        let (clean, noise) = if baseline {
            (features, None)
        } else {
            let extracted = self.extract_on_tape(tape, params, features)?;
            let est = self.noise_space.reconstruct_on_tape(tape, extracted)?;
            let clean = match est.reconstructed {
                Some(n_res) => denoise(tape, features, n_res)?,
                None => features,
            };
            (clean, Some(est))
        };
        let logits = self.head_on_tape(tape, params, clean)?;
        Ok(SampleForward {
            features,
            clean,
            logits,
        noise,
        })
    }

    /// Predicted 0-based class of one patch.
    pub fn predict(&self, patch: &Tensor, baseline: bool) -> Result<usize> {
        let mut tape = Tape::new();
        let params = self.register(&mut tape, false);
        let patch = tape.constant(patch.clone());
        let fwd = self.forward_sample(&mut tape, &params, patch, baseline)?;
        let logits = tape.value(fwd.logits).data();
        Ok(argmax(logits))
    }

    fn forward_batch(&self, batch: &TrainBatch, opts: &TrainParams) -> Result<BatchForward> {
        if batch.patches.is_empty() || batch.patches.len() != batch.labels.len() {
            return Err(Error::invalid(
                "batch needs matching nonempty patches and labels".to_string(),
            ));
        }
        for &label in &batch.labels {
            if label >= self.num_classes {
                return Err(Error::LabelOutOfRange {
                    label,
                    classes: self.num_classes,
                });
            }
        }

        let mut tape = Tape::new();
        let params = self.register(&mut tape, true);

        let mut ce_vars = Vec::with_capacity(batch.patches.len());
        let mut clean_vars = Vec::with_capacity(batch.patches.len());
        let mut estimates = Vec::new();
        for (patch, &label) in batch.patches.iter().zip(&batch.labels) {
            let patch_var = tape.constant(patch.clone());
            let fwd = self.forward_sample(&mut tape, &params, patch_var, opts.baseline)?;
            ce_vars.push(tape.softmax_cross_entropy(fwd.logits, label)?);
            clean_vars.push(fwd.clean);
            if let Some(est) = fwd.noise {
                estimates.push(est);
            }
        }

        let lc = center_loss_on_tape(&mut tape, &clean_vars, &batch.labels, &self.centers)?;
        let total = total_loss_on_tape(&mut tape, &ce_vars, lc, opts.lambda_c)?;
        Ok(BatchForward {
            tape,
            params,
            ce_vars,
            clean_vars,
            estimates,
            total,
            center: lc,
        })
    }

    /// Combined-loss value of one batch, no update.
    pub fn batch_loss(&self, batch: &TrainBatch, opts: &TrainParams) -> Result<f64> {
        let fwd = self.forward_batch(batch, opts)?;
        Ok(fwd.tape.value(fwd.total).item())
    }

    /// Gradient of the combined loss for every named parameter, no update.
    /// `None` for parameters the loss does not reach.
    pub fn batch_gradients(
        &self,
        batch: &TrainBatch,
        opts: &TrainParams,
    ) -> Result<Vec<(&'static str, Option<Tensor>)>> {
        let fwd = self.forward_batch(batch, opts)?;
        let grads = fwd.tape.backward(fwd.total)?;
        let ids = fwd.params.ids();
        Ok(self
            .parameters()
            .iter()
            .zip(ids)
            .map(|((name, _), id)| (*name, grads.get(id).cloned()))
            .collect())
    }

    pub(crate) fn param(&self, name: &str) -> Option<&Tensor> {
        self.parameters()
            .into_iter()
            .find(|(n, _)| *n == name)
            .map(|(_, t)| t)
    }

    pub(crate) fn set_param(&mut self, name: &str, tensor: Tensor) -> Result<()> {
        for (n, t) in self.parameters_mut() {
            if n == name {
                if t.shape() != tensor.shape() {
                    return Err(Error::shape(format!(
                        "parameter '{name}' has shape {:?}, got {:?}",
                        t.shape(),
                        tensor.shape()
                    )));
                }
                *t = tensor;
                return Ok(());
            }
        }
        Err(Error::invalid(format!("no parameter named '{name}'")))
    }

    /// One training step: forward the batch, descend the combined loss,
    /// move the centers, update the noise bank.
    pub fn train_step(&mut self, batch: &TrainBatch, opts: &TrainParams) -> Result<StepReport> {
        let BatchForward {
            tape,
            params,
            ce_vars,
            clean_vars,
            estimates,
            total,
            center,
        } = self.forward_batch(batch, opts)?;

        let b = batch.patches.len() as f64;
        let ce_mean = ce_vars
            .iter()
            .map(|&v| tape.value(v).item())
            .sum::<f64>()
            / b;
        let lc_val = tape.value(center).item();
        let total_val = tape.value(total).item();
        if !total_val.is_finite() {
            return Err(Error::NonFiniteLoss(format!(
                "step aborted: total={total_val}, cross_entropy={ce_mean}, center={lc_val}"
            )));
        }

        let grads = tape.backward(total)?;
        self.apply_sgd(&params, &grads, opts.lr);

        let clean_values: Vec<Vec<f64>> = clean_vars
            .iter()
            .map(|&v| tape.value(v).data().to_vec())
            .collect();
        self.centers.update(&clean_values, &batch.labels)?;

        let mut report = StepReport {
            cross_entropy: ce_mean,
            center: lc_val,
            reconstruction: 0.0,
            sparsity: 0.0,
            diversity: 0.0,
            degenerate_samples: estimates.iter().filter(|e| e.degenerate).count(),
        };
        if !opts.baseline && !estimates.is_empty() {
            report.reconstruction =
                estimates.iter().map(|e| e.reconstruction_loss).sum::<f64>() / b;
            report.sparsity = estimates.iter().map(|e| e.sparsity_loss).sum::<f64>() / b;
            if self.noise_space.k() >= 2 {
                report.diversity = self.noise_space.diversity_loss()?;
                let mut mean_grads =
                    vec![vec![0.0; self.noise_space.d()]; self.noise_space.k()];
                for est in &estimates {
                    let g = self
                        .noise_space
                        .base_gradients(&est.extracted, &est.weights)?;
                    for (acc, gi) in mean_grads.iter_mut().zip(g) {
                        for (a, v) in acc.iter_mut().zip(gi) {
                            *a += v / b;
                        }
                    }
                }
                self.noise_space.apply_update(&mean_grads, opts.update_sign)?;
            }
        }
        Ok(report)
    }

    fn apply_sgd(&mut self, params: &TapeModel, grads: &Gradients, lr: f64) {
        let ids = params.ids();
        for (id, (_, tensor)) in ids.iter().zip(self.parameters_mut()) {
            if let Some(g) = grads.get(*id) {
                let updated: Vec<f64> = tensor
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(p, gv)| p - lr * gv)
                    .collect();
                *tensor = Tensor::new(tensor.shape().to_vec(), updated)
                    .expect("gradient shape matches parameter");
            }
        }
    }

    // ── Checkpoint format ───────────────────────────────────────────
    //
    // Little-endian: magic "HDNM", version u32, then per block: name length
    // u32, name bytes, shape rank u32, extents u32 each, f64 payload.
    // Blocks: meta, the ten parameters, noise_space [k,d], centers [C,d].

    pub fn write_checkpoint<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        let meta = Tensor::vector(vec![
            self.bands as f64,
            self.neighbor as f64,
            self.num_classes as f64,
            self.feature_dim as f64,
            self.noise_space.alpha,
            self.noise_space.beta,
            self.noise_space.epsilon,
            self.centers.gamma,
        ]);
        write_block(&mut w, "meta", &meta)?;
        for (name, tensor) in self.parameters() {
            write_block(&mut w, name, tensor)?;
        }
        let spaces = Tensor::new(
            vec![self.noise_space.k(), self.noise_space.d()],
            self.noise_space.bases_flat().to_vec(),
        )?;
        write_block(&mut w, "noise_space", &spaces)?;
        let centers = Tensor::new(
            vec![self.num_classes, self.feature_dim],
            self.centers.centers_flat().to_vec(),
        )?;
        write_block(&mut w, "centers", &centers)?;
        Ok(())
    }

    pub fn read_checkpoint<R: Read>(mut r: R) -> Result<ModelState> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)
            .map_err(|_| Error::Format("truncated checkpoint header".to_string()))?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Format(format!(
                "bad magic {magic:?}, expected {CHECKPOINT_MAGIC:?}"
            )));
        }
        let mut buf4 = [0u8; 4];
        r.read_exact(&mut buf4)
            .map_err(|_| Error::Format("truncated checkpoint header".to_string()))?;
        let version = u32::from_le_bytes(buf4);
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!(
                "unsupported checkpoint version {version}"
            )));
        }

        let mut blocks = std::collections::HashMap::new();
        while let Some((name, tensor)) = read_block(&mut r)? {
            blocks.insert(name, tensor);
        }
        let mut take = |name: &str| {
            blocks
                .remove(name)
                .ok_or_else(|| Error::Format(format!("checkpoint missing block '{name}'")))
        };

        let meta = take("meta")?;
        if meta.numel() != 8 {
            return Err(Error::Format("meta block must have 8 values".to_string()));
        }
        let m = meta.data();
        let (bands, neighbor, num_classes, feature_dim) =
            (m[0] as usize, m[1] as usize, m[2] as usize, m[3] as usize);

        let spaces = take("noise_space")?;
        if spaces.shape().len() != 2 || spaces.shape()[1] != feature_dim {
            return Err(Error::Format(format!(
                "noise_space block shape {:?} does not match feature dim {feature_dim}",
                spaces.shape()
            )));
        }
        let mut noise_space = NoiseSpace::with_bases(
            spaces.shape()[0],
            feature_dim,
            spaces.data().to_vec(),
        )?;
        noise_space.alpha = m[4];
        noise_space.beta = m[5];
        noise_space.epsilon = m[6];

        let centers_t = take("centers")?;
        if centers_t.shape() != [num_classes, feature_dim] {
            return Err(Error::Format(format!(
                "centers block shape {:?} does not match [{num_classes}, {feature_dim}]",
                centers_t.shape()
            )));
        }
        let mut centers = CenterBank::zeros(num_classes, feature_dim, m[7]);
        centers.centers = centers_t.data().to_vec();

        let state = ModelState {
            bands,
            neighbor,
            num_classes,
            feature_dim,
            conv1_kernels: take("conv1.kernels")?,
            conv1_bias: take("conv1.bias")?,
            conv2_kernels: take("conv2.kernels")?,
            conv2_bias: take("conv2.bias")?,
            fc_weight: take("fc.weight")?,
            fc_bias: take("fc.bias")?,
            extractor_weight: take("extractor.weight")?,
            extractor_bias: take("extractor.bias")?,
            head_weight: take("head.weight")?,
            head_bias: take("head.bias")?,
            noise_space,
            centers,
        };
        if !blocks.is_empty() {
            let names: Vec<_> = blocks.keys().cloned().collect();
            return Err(Error::Format(format!(
                "unexpected checkpoint blocks: {names:?}"
            )));
        }
        Ok(state)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.write_checkpoint(BufWriter::new(File::create(path)?))
    }

    pub fn load(path: &Path) -> Result<ModelState> {
        Self::read_checkpoint(BufReader::new(File::open(path)?))
    }
}

fn write_block<W: Write>(w: &mut W, name: &str, tensor: &Tensor) -> Result<()> {
    let bytes = name.as_bytes();
    w.write_all(&(bytes.len() as u32).to_le_bytes())?;
    w.write_all(bytes)?;
    w.write_all(&(tensor.shape().len() as u32).to_le_bytes())?;
    for &e in tensor.shape() {
        if e > u32::MAX as usize {
            return Err(Error::Format(format!("extent {e} exceeds u32")));
        }
        w.write_all(&(e as u32).to_le_bytes())?;
    }
    for v in tensor.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

/// Read one `(name, tensor)` block; `None` at clean end of stream.
fn read_block<R: Read>(r: &mut R) -> Result<Option<(String, Tensor)>> {
    let mut buf4 = [0u8; 4];
    match r.read_exact(&mut buf4) {
        Ok(()) => {}
        Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(e.into()),
    }
    let name_len = u32::from_le_bytes(buf4) as usize;
    if name_len > 4096 {
        return Err(Error::Format(format!("implausible block name length {name_len}")));
    }
    let mut name = vec![0u8; name_len];
    r.read_exact(&mut name)
        .map_err(|_| Error::Format("truncated block name".to_string()))?;
    let name = String::from_utf8(name)
        .map_err(|_| Error::Format("block name is not UTF-8".to_string()))?;

    r.read_exact(&mut buf4)
        .map_err(|_| Error::Format("truncated block rank".to_string()))?;
    let rank = u32::from_le_bytes(buf4) as usize;
    if rank > 8 {
        return Err(Error::Format(format!("implausible block rank {rank}")));
    }
    let mut shape = Vec::with_capacity(rank);
    let mut numel: usize = 1;
    for _ in 0..rank {
        r.read_exact(&mut buf4)
            .map_err(|_| Error::Format("truncated block extents".to_string()))?;
        let e = u32::from_le_bytes(buf4) as usize;
        shape.push(e);
        numel = numel
            .checked_mul(e)
            .ok_or_else(|| Error::Format("block extent overflow".to_string()))?;
    }
    let mut data = vec![0.0f64; numel];
    let mut buf8 = [0u8; 8];
    for v in data.iter_mut() {
        r.read_exact(&mut buf8)
            .map_err(|_| Error::Format(format!("truncated payload in block '{name}'")))?;
        *v = f64::from_le_bytes(buf8);
    }
    Ok(Some((name, Tensor::new(shape, data)?)))
}

/// The denoise step: subtract the reconstructed noise from the features.
pub fn denoise(tape: &mut Tape, features: VarId, reconstructed: VarId) -> Result<VarId> {
    tape.sub(features, reconstructed)
}

/// Center loss on the tape: half the summed squared distance of each clean
/// feature to its class center. Centers enter as constants.
pub fn center_loss_on_tape(
    tape: &mut Tape,
    clean: &[VarId],
    labels: &[usize],
    centers: &CenterBank,
) -> Result<VarId> {
    if clean.is_empty() || clean.len() != labels.len() {
        return Err(Error::invalid(
            "center loss needs matching nonempty features and labels".to_string(),
        ));
    }
    let mut acc: Option<VarId> = None;
    for (&f, &label) in clean.iter().zip(labels) {
        if label >= centers.num_classes() {
            return Err(Error::LabelOutOfRange {
                label,
                classes: centers.num_classes(),
            });
        }
        let c = tape.constant(Tensor::vector(centers.center(label).to_vec()));
        let diff = tape.sub(f, c)?;
        let sq = tape.dot(diff, diff)?;
        acc = Some(match acc {
            None => sq,
            Some(a) => tape.add(a, sq)?,
        });
    }
    tape.scale(acc.expect("nonempty batch"), 0.5)
}

/// Combined objective: mean cross-entropy plus `lambda_c` times the center
/// loss.
pub fn total_loss_on_tape(
    tape: &mut Tape,
    cross_entropies: &[VarId],
    center_loss: VarId,
    lambda_c: f64,
) -> Result<VarId> {
    if cross_entropies.is_empty() {
        return Err(Error::invalid("need at least one sample loss".to_string()));
    }
    if lambda_c < 0.0 {
        return Err(Error::invalid("lambda_c must be >= 0".to_string()));
    }
    let mut acc = cross_entropies[0];
    for &ce in &cross_entropies[1..] {
        acc = tape.add(acc, ce)?;
    }
    let ce_mean = tape.scale(acc, 1.0 / cross_entropies.len() as f64)?;
    let weighted = tape.scale(center_loss, lambda_c)?;
    tape.add(ce_mean, weighted)
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in xs.iter().enumerate() {
        if *v > xs[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{finite_diff_grad, rel_err};

    fn tiny_state(seed: u64) -> ModelState {
        ModelState::init(4, 3, 2, 8, 4, seed).unwrap()
    }

    fn random_patch(state: &ModelState, rng: &mut Rng) -> Tensor {
        Tensor::uniform(
            vec![state.bands, state.neighbor, state.neighbor],
            1.0,
            rng,
        )
    }

    fn default_params() -> TrainParams {
        TrainParams {
            lr: 1e-2,
            lambda_c: DEFAULT_LAMBDA_C,
            update_sign: UpdateSign::Descent,
            baseline: false,
        }
    }

    #[test]
    fn zero_patch_zero_biases_gives_zero_features() {
        let state = tiny_state(1);
        let mut tape = Tape::new();
        let params = state.register(&mut tape, false);
        let patch = tape.constant(Tensor::zeros(vec![4, 3, 3]));
        let f = state.backbone_forward(&mut tape, &params, patch).unwrap();
        assert!(tape.value(f).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn backbone_is_deterministic() {
        let state = tiny_state(2);
        let mut rng = Rng::seeded(3);
        let patch = random_patch(&state, &mut rng);
        let run = || {
            let mut tape = Tape::new();
            let params = state.register(&mut tape, false);
            let p = tape.constant(patch.clone());
            let f = state.backbone_forward(&mut tape, &params, p).unwrap();
            tape.value(f).data().to_vec()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn backbone_rejects_wrong_patch_shape() {
        let state = tiny_state(4);
        let mut tape = Tape::new();
        let params = state.register(&mut tape, false);
        let p = tape.constant(Tensor::zeros(vec![4, 5, 5]));
        assert!(state.backbone_forward(&mut tape, &params, p).is_err());
    }

    #[test]
    fn backbone_patch_gradient_matches_finite_differences() {
        let state = tiny_state(5);
        let mut rng = Rng::seeded(6);
        let patch = random_patch(&state, &mut rng);

        let run = |p: &Tensor| {
            let mut tape = Tape::new();
            let params = state.register(&mut tape, false);
            let pv = tape.input(p.clone());
            let f = state.backbone_forward(&mut tape, &params, pv).unwrap();
            let loss = tape.sum(f).unwrap();
            (tape, pv, loss)
        };
        let (tape, pv, loss) = run(&patch);
        let grads = tape.backward(loss).unwrap();
        let fd = finite_diff_grad(
            |p| {
                let (t, _, l) = run(p);
                t.value(l).item()
            },
            &patch,
            1e-5,
        );
        let err = rel_err(grads.get(pv).unwrap().data(), fd.data());
        assert!(err <= 1e-4, "rel err {err}");
    }

    #[test]
    fn denoise_cases() {
        let mut tape = Tape::new();
        let f = tape.constant(Tensor::vector(vec![1.0, 2.0, 3.0]));
        let zero = tape.constant(Tensor::zeros(vec![3]));
        let same = denoise(&mut tape, f, zero).unwrap();
        assert_eq!(tape.value(same).data(), &[1.0, 2.0, 3.0]);

        let self_sub = denoise(&mut tape, f, f).unwrap();
        assert_eq!(tape.value(self_sub).data(), &[0.0, 0.0, 0.0]);

        let half = tape.constant(Tensor::vector(vec![0.5, 0.5, 0.5]));
        let out = denoise(&mut tape, f, half).unwrap();
        assert_eq!(tape.value(out).data(), &[0.5, 1.5, 2.5]);
    }

    #[test]
    fn center_loss_cases() {
        let mut bank = CenterBank::zeros(2, 2, 0.5);
        bank.centers = vec![1.0, 0.0, 0.0, 1.0];

        // every feature at its center
        let loss = bank
            .loss(&[vec![1.0, 0.0], vec![0.0, 1.0]], &[0, 1])
            .unwrap();
        assert_eq!(loss, 0.0);

        // one sample at distance 2
        let loss = bank.loss(&[vec![3.0, 0.0]], &[0]).unwrap();
        assert_eq!(loss, 2.0);

        assert!(bank.loss(&[vec![0.0, 0.0]], &[5]).is_err());
    }

    #[test]
    fn center_loss_tape_matches_plain_and_finite_differences() {
        let mut bank = CenterBank::zeros(2, 3, 0.5);
        bank.centers = vec![0.1, -0.2, 0.3, 0.5, 0.0, -0.5];
        let f0 = Tensor::vector(vec![0.4, 0.2, -0.1]);
        let labels = [1usize];

        let run = |f: &Tensor| {
            let mut tape = Tape::new();
            let fv = tape.input(f.clone());
            let lc = center_loss_on_tape(&mut tape, &[fv], &labels, &bank).unwrap();
            (tape, fv, lc)
        };
        let (tape, fv, lc) = run(&f0);
        let plain = bank.loss(&[f0.data().to_vec()], &labels).unwrap();
        assert!((tape.value(lc).item() - plain).abs() < 1e-12);

        let grads = tape.backward(lc).unwrap();
        let fd = finite_diff_grad(
            |f| {
                let (t, _, l) = run(f);
                t.value(l).item()
            },
            &f0,
            1e-5,
        );
        assert!(rel_err(grads.get(fv).unwrap().data(), fd.data()) <= 1e-5);
        // gradient w.r.t. features is (f - c)
        let expect: Vec<f64> = f0
            .data()
            .iter()
            .zip(bank.center(1))
            .map(|(f, c)| f - c)
            .collect();
        for (g, e) in grads.get(fv).unwrap().data().iter().zip(&expect) {
            assert!((g - e).abs() < 1e-12);
        }
    }

    #[test]
    fn center_update_cases() {
        let mut bank = CenterBank::zeros(2, 2, 0.0);
        bank.centers = vec![1.0, 1.0, -1.0, -1.0];
        let before = bank.centers.clone();
        bank.update(&[vec![5.0, 5.0]], &[0]).unwrap();
        assert_eq!(bank.centers, before); // gamma = 0

        bank.gamma = 1.0;
        bank.update(&[vec![5.0, 5.0], vec![2.0, 0.0]], &[0, 1]).unwrap();
        assert_eq!(bank.center(0), &[5.0, 5.0]);
        assert_eq!(bank.center(1), &[2.0, 0.0]);

        let mut bank = CenterBank::zeros(1, 2, 0.5);
        bank.update(&[vec![2.0, 0.0]], &[0]).unwrap();
        assert_eq!(bank.center(0), &[1.0, 0.0]);
    }

    #[test]
    fn center_update_strictly_decreases_loss() {
        let mut bank = CenterBank::zeros(2, 3, 0.5);
        bank.centers = vec![0.5, -0.5, 0.2, -0.1, 0.3, 0.9];
        let mut rng = Rng::seeded(7);
        let features: Vec<Vec<f64>> = (0..6)
            .map(|_| (0..3).map(|_| rng.uniform(-1.0, 1.0)).collect())
            .collect();
        let labels = [0, 1, 0, 1, 0, 1];
        let before = bank.loss(&features, &labels).unwrap();
        bank.update(&features, &labels).unwrap();
        let after = bank.loss(&features, &labels).unwrap();
        assert!(after < before, "{after} !< {before}");
    }

    #[test]
    fn total_loss_composition() {
        let mut tape = Tape::new();
        let ce = tape.input(Tensor::scalar(1.0));
        let lc = tape.input(Tensor::scalar(2.0));
        let total = total_loss_on_tape(&mut tape, &[ce], lc, 0.01).unwrap();
        assert!((tape.value(total).item() - 1.02).abs() < 1e-12);

        // lambda zero decouples the center term
        let total = total_loss_on_tape(&mut tape, &[ce], lc, 0.0).unwrap();
        assert_eq!(tape.value(total).item(), 1.0);

        assert!(total_loss_on_tape(&mut tape, &[ce], lc, -0.1).is_err());
    }

    #[test]
    fn frozen_step_leaves_state_bit_identical() {
        let mut state = tiny_state(8);
        state.noise_space.beta = 1.0;
        state.centers.gamma = 0.0;
        let frozen = TrainParams {
            lr: 0.0,
            lambda_c: DEFAULT_LAMBDA_C,
            update_sign: UpdateSign::Descent,
            baseline: false,
        };
        let before = state.clone();
        let mut rng = Rng::seeded(9);
        let batch = TrainBatch {
            patches: (0..4).map(|_| random_patch(&state, &mut rng)).collect(),
            labels: vec![0, 1, 0, 1],
        };
        state.train_step(&batch, &frozen).unwrap();
        assert_eq!(state, before);
    }

    #[test]
    fn train_step_is_deterministic() {
        let run = || {
            let mut state = tiny_state(10);
            let mut rng = Rng::seeded(11);
            for _ in 0..5 {
                let batch = TrainBatch {
                    patches: (0..4).map(|_| random_patch(&state, &mut rng)).collect(),
                    labels: vec![0, 1, 1, 0],
                };
                state.train_step(&batch, &default_params()).unwrap();
            }
            state
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn loss_decreases_on_separable_toy_problem() {
        // two classes with clearly distinct patches
        let mut finals = Vec::new();
        for seed in [21u64, 22, 23] {
            let mut state = tiny_state(seed);
            let mut rng = Rng::seeded(seed ^ 0xF00D);
            let make_patch = |class: usize, rng: &mut Rng| {
                let mut t = vec![0.0; 4 * 9];
                for (i, v) in t.iter_mut().enumerate() {
                    let band = i / 9;
                    let base = if class == 0 {
                        [1.0, 0.8, 0.2, 0.0][band]
                    } else {
                        [0.0, 0.2, 0.8, 1.0][band]
                    };
                    *v = base + 0.05 * rng.uniform(-1.0, 1.0);
                }
                Tensor::new(vec![4, 3, 3], t).unwrap()
            };
            let mut first = None;
            let mut last = 0.0;
            for _ in 0..50 {
                let batch = TrainBatch {
                    patches: vec![
                        make_patch(0, &mut rng),
                        make_patch(1, &mut rng),
                        make_patch(0, &mut rng),
                        make_patch(1, &mut rng),
                    ],
                    labels: vec![0, 1, 0, 1],
                };
                let report = state.train_step(&batch, &default_params()).unwrap();
                if first.is_none() {
                    first = Some(report.cross_entropy);
                }
                last = report.cross_entropy;
            }
            finals.push((first.unwrap(), last));
        }
        let improved = finals.iter().filter(|(f, l)| l < f).count();
        assert!(improved >= 2, "losses did not decrease: {finals:?}");
    }

    #[test]
    fn degenerate_estimate_equals_baseline_forward() {
        let mut state = tiny_state(12);
        // zero extractor forces a degenerate estimate for every sample
        state
            .set_extractor(Tensor::zeros(vec![8, 8]), Tensor::zeros(vec![8]))
            .unwrap();
        let mut rng = Rng::seeded(13);
        let patch = random_patch(&state, &mut rng);

        let logits = |baseline: bool| {
            let mut tape = Tape::new();
            let params = state.register(&mut tape, false);
            let p = tape.constant(patch.clone());
            let fwd = state
                .forward_sample(&mut tape, &params, p, baseline)
                .unwrap();
            tape.value(fwd.logits).data().to_vec()
        };
        assert_eq!(logits(false), logits(true));
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut state = tiny_state(14);
        // make the state non-trivial
        let mut rng = Rng::seeded(15);
        let batch = TrainBatch {
            patches: (0..4).map(|_| random_patch(&state, &mut rng)).collect(),
            labels: vec![0, 1, 0, 1],
        };
        state.train_step(&batch, &default_params()).unwrap();

        let mut buf = Vec::new();
        state.write_checkpoint(&mut buf).unwrap();
        let back = ModelState::read_checkpoint(buf.as_slice()).unwrap();
        assert_eq!(state, back);
    }

    #[test]
    fn checkpoint_rejects_bad_magic() {
        let state = tiny_state(16);
        let mut buf = Vec::new();
        state.write_checkpoint(&mut buf).unwrap();
        buf[0] = b'Z';
        assert!(ModelState::read_checkpoint(buf.as_slice()).is_err());
    }

    #[test]
    fn checkpoint_bytes_are_deterministic() {
        let state = tiny_state(17);
        let mut a = Vec::new();
        let mut b = Vec::new();
        state.write_checkpoint(&mut a).unwrap();
        state.write_checkpoint(&mut b).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn non_finite_loss_aborts() {
        let mut state = tiny_state(18);
        // centers far enough away that the squared distance overflows
        state.centers.centers = vec![1e200; 16];
        let mut rng = Rng::seeded(19);
        let batch = TrainBatch {
            patches: vec![random_patch(&state, &mut rng)],
            labels: vec![0],
        };
        match state.train_step(&batch, &default_params()) {
            Err(Error::NonFiniteLoss(_)) => {}
            other => panic!("expected non-finite loss abort, got {other:?}"),
        }
    }
}
