//! Learned noise space: a bank of base-noise vectors that reconstructs a
//! per-sample noise estimate by cosine similarity with energy preservation,
//! plus the decayed self-supervised update of the bank.
//!
//! The bank is never trained by backpropagation. During a training step the
//! reconstruction is rebuilt on the tape as a function of the extracted
//! noise (so the extractor receives a gradient through it), while the bases
//! enter as constants; the bases themselves move only through
//! [`NoiseSpace::apply_update`].

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{dot, l2_norm, Tape, Tensor, VarId};

/// Direction of the decayed base update.
///
/// The update rule combines decay with a gradient step. `Descent` subtracts
/// the gradient (minimizing the reconstruction + diversity objective);
/// `AsWritten` adds it, preserved as a switch for comparison runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UpdateSign {
    Descent,
    AsWritten,
}

impl std::str::FromStr for UpdateSign {
    type Err = Error;
    fn from_str(s: &str) -> Result<UpdateSign> {
        match s {
            "descent" => Ok(UpdateSign::Descent),
            "as-written" => Ok(UpdateSign::AsWritten),
            other => Err(Error::Config(format!(
                "update-sign must be 'descent' or 'as-written', got '{other}'"
            ))),
        }
    }
}

/// Loss terms of the reconstruction objective:
/// `total = reconstruction + sparsity + alpha * diversity`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    /// Squared residual norm of the reconstruction.
    pub reconstruction: f64,
    /// L1 norm of the weights. Diagnostic only: under the fixed-weight
    /// convention it contributes no gradient to the bases.
    pub sparsity: f64,
    /// Mean pairwise inner product of the bases (0 when k < 2).
    pub diversity: f64,
    pub total: f64,
}

impl LossBreakdown {
    fn new(reconstruction: f64, sparsity: f64, diversity: f64, alpha: f64) -> LossBreakdown {
        LossBreakdown {
            reconstruction,
            sparsity,
            diversity,
            total: reconstruction + sparsity + alpha * diversity,
        }
    }
}

/// Everything produced by one pass through the noise module for one sample.
#[derive(Debug, Clone)]
pub struct NoiseEstimate {
    /// Extracted noise `n_f` (affine image of the features).
    pub extracted: Vec<f64>,
    /// Cosine similarity of each base with `n_f`, each in [-1, 1].
    pub similarities: Vec<f64>,
    /// Similarity-weighted combination of the bases.
    pub pre_reconstruction: Vec<f64>,
    /// Final weights: similarities rescaled so the reconstruction keeps the
    /// energy of `n_f`.
    pub weights: Vec<f64>,
    /// Weighted combination of the bases; zero when degenerate.
    pub reconstructed: Vec<f64>,
    /// Set when a norm fell below epsilon and the zero fallback fired.
    pub degenerate: bool,
    pub losses: LossBreakdown,
}

/// The noise reconstruction rebuilt on a tape for one sample.
///
/// `reconstructed` is a differentiable function of the extracted-noise
/// variable; it is `None` when the estimate is degenerate (the caller then
/// skips the subtraction, making denoising an identity).
pub struct TapeEstimate {
    pub reconstructed: Option<VarId>,
    /// Weight values, for the self-supervised update (zeros when degenerate).
    pub weights: Vec<f64>,
    /// Extracted-noise values.
    pub extracted: Vec<f64>,
    pub degenerate: bool,
    /// Squared reconstruction residual (value only).
    pub reconstruction_loss: f64,
    /// L1 norm of the weights (value only).
    pub sparsity_loss: f64,
}

/// Bank of `k` base-noise vectors of feature dimension `d`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSpace {
    k: usize,
    d: usize,
    /// Row-major `k x d`.
    bases: Vec<f64>,
    /// Diversity tradeoff constant.
    pub alpha: f64,
    /// Decay rate of the base update, in [0, 1].
    pub beta: f64,
    /// Norm guard below which the zero fallback fires.
    pub epsilon: f64,
}

pub const DEFAULT_ALPHA: f64 = 1.0;
pub const DEFAULT_BETA: f64 = 0.9;
pub const DEFAULT_EPSILON: f64 = 1e-8;

impl NoiseSpace {
    /// Seeded initialization: entries i.i.d. uniform in [-1/sqrt(d), 1/sqrt(d)),
    /// resampling any base that comes out exactly zero.
    pub fn init(k: usize, d: usize, seed: u64) -> Result<NoiseSpace> {
        if k == 0 || d == 0 {
            return Err(Error::invalid(format!(
                "noise space needs k >= 1 and d >= 1, got k={k}, d={d}"
            )));
        }
        let scale = 1.0 / (d as f64).sqrt();
        let mut rng = Rng::seeded(seed);
        let mut bases = vec![0.0; k * d];
        for base in bases.chunks_mut(d) {
            loop {
                for v in base.iter_mut() {
                    *v = rng.uniform(-scale, scale);
                }
                if base.iter().any(|&v| v != 0.0) {
                    break;
                }
            }
        }
        Ok(NoiseSpace {
            k,
            d,
            bases,
            alpha: DEFAULT_ALPHA,
            beta: DEFAULT_BETA,
            epsilon: DEFAULT_EPSILON,
        })
    }

    /// Build from explicit bases (row-major `k x d`).
    pub fn with_bases(k: usize, d: usize, bases: Vec<f64>) -> Result<NoiseSpace> {
        if k == 0 || d == 0 || bases.len() != k * d {
            return Err(Error::invalid(format!(
                "bases length {} does not match k={k} x d={d}",
                bases.len()
            )));
        }
        Ok(NoiseSpace {
            k,
            d,
            bases,
            alpha: DEFAULT_ALPHA,
            beta: DEFAULT_BETA,
            epsilon: DEFAULT_EPSILON,
        })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn base(&self, i: usize) -> &[f64] {
        &self.bases[i * self.d..(i + 1) * self.d]
    }

    pub fn bases_flat(&self) -> &[f64] {
        &self.bases
    }

    /// Cosine similarity of each base with the extracted noise. Returns the
    /// similarity vector and whether the extracted noise was below the norm
    /// guard (in which case all similarities are zero).
    pub fn similarities(&self, extracted: &[f64]) -> Result<(Vec<f64>, bool)> {
        self.check_dim(extracted)?;
        let norm_f = l2_norm(extracted);
        if norm_f < self.epsilon {
            return Ok((vec![0.0; self.k], true));
        }
        let mut sims = Vec::with_capacity(self.k);
        for i in 0..self.k {
            let base = self.base(i);
            let norm_b = l2_norm(base);
            if norm_b < self.epsilon {
                sims.push(0.0);
            } else {
                sims.push((dot(base, extracted) / (norm_b * norm_f)).clamp(-1.0, 1.0));
            }
        }
        Ok((sims, false))
    }

    /// Similarity-weighted combination of the bases.
    pub fn pre_reconstruct(&self, similarities: &[f64]) -> Result<Vec<f64>> {
        self.combine(similarities)
    }

    /// Rescale similarities so the final reconstruction keeps the energy of
    /// the extracted noise. Returns the weights and the degenerate flag.
    pub fn estimate_weights(
        &self,
        extracted: &[f64],
        pre_reconstruction: &[f64],
        similarities: &[f64],
    ) -> Result<(Vec<f64>, bool)> {
        self.check_dim(extracted)?;
        self.check_dim(pre_reconstruction)?;
        self.check_len(similarities)?;
        let norm_p = l2_norm(pre_reconstruction);
        if norm_p < self.epsilon {
            return Ok((vec![0.0; self.k], true));
        }
        let ratio = l2_norm(extracted) / norm_p;
        Ok((similarities.iter().map(|s| ratio * s).collect(), false))
    }

    /// Weight-combined reconstruction.
    pub fn reconstruct(&self, weights: &[f64]) -> Result<Vec<f64>> {
        self.combine(weights)
    }

    fn combine(&self, coeffs: &[f64]) -> Result<Vec<f64>> {
        self.check_len(coeffs)?;
        let mut out = vec![0.0; self.d];
        for (i, &c) in coeffs.iter().enumerate() {
            if c == 0.0 {
                continue;
            }
            for (o, b) in out.iter_mut().zip(self.base(i)) {
                *o += c * b;
            }
        }
        Ok(out)
    }

    /// Mean pairwise inner product over all ordered pairs of distinct bases.
    pub fn diversity_loss(&self) -> Result<f64> {
        if self.k < 2 {
            return Err(Error::invalid(
                "diversity needs at least two bases".to_string(),
            ));
        }
        let mut sum = 0.0;
        for l in 0..self.k {
            for m in 0..self.k {
                if l != m {
                    sum += dot(self.base(l), self.base(m));
                }
            }
        }
        Ok(sum / (self.k * (self.k - 1)) as f64)
    }

    /// Squared residual norm of reconstructing `extracted` with `weights`.
    pub fn reconstruction_loss(&self, extracted: &[f64], weights: &[f64]) -> Result<f64> {
        self.check_dim(extracted)?;
        let recon = self.combine(weights)?;
        Ok(extracted
            .iter()
            .zip(&recon)
            .map(|(f, r)| (f - r) * (f - r))
            .sum())
    }

    /// Analytic gradient of the fixed-weight objective
    /// `||n_f - sum_j w_j n_j||^2 + alpha * diversity` for each base:
    /// `g_i = -2 w_i (n_f - sum_j w_j n_j) + alpha * 2/(k(k-1)) * sum_{l != i} n_l`.
    /// The weights are treated as constants.
    pub fn base_gradients(&self, extracted: &[f64], weights: &[f64]) -> Result<Vec<Vec<f64>>> {
        if self.k < 2 {
            return Err(Error::invalid(
                "base gradients need at least two bases".to_string(),
            ));
        }
        self.check_dim(extracted)?;
        self.check_len(weights)?;

        let recon = self.combine(weights)?;
        let residual: Vec<f64> = extracted.iter().zip(&recon).map(|(f, r)| f - r).collect();

        let mut total = vec![0.0; self.d];
        for i in 0..self.k {
            for (t, b) in total.iter_mut().zip(self.base(i)) {
                *t += b;
            }
        }
        let div_scale = self.alpha * 2.0 / (self.k * (self.k - 1)) as f64;

        let mut grads = Vec::with_capacity(self.k);
        for i in 0..self.k {
            let w = weights[i];
            let base = self.base(i);
            let grad = residual
                .iter()
                .zip(total.iter().zip(base))
                .map(|(r, (t, b))| -2.0 * w * r + div_scale * (t - b))
                .collect();
            grads.push(grad);
        }
        Ok(grads)
    }

    /// Decayed self-supervised update of every base:
    /// `n_j <- beta * n_j - (1 - beta) * g_j` under `Descent`
    /// (`+` under `AsWritten`). All gradients are taken against the current
    /// state, so the result is independent of base order.
    pub fn apply_update(&mut self, gradients: &[Vec<f64>], sign: UpdateSign) -> Result<()> {
        if gradients.len() != self.k {
            return Err(Error::dim(format!(
                "expected {} gradients, got {}",
                self.k,
                gradients.len()
            )));
        }
        let step = match sign {
            UpdateSign::Descent => -(1.0 - self.beta),
            UpdateSign::AsWritten => 1.0 - self.beta,
        };
        for (i, grad) in gradients.iter().enumerate() {
            if grad.len() != self.d {
                return Err(Error::dim(format!(
                    "gradient {i} has length {}, expected {}",
                    grad.len(),
                    self.d
                )));
            }
            let beta = self.beta;
            for (b, g) in self.bases[i * self.d..(i + 1) * self.d]
                .iter_mut()
                .zip(grad)
            {
                *b = beta * *b + step * g;
            }
        }
        Ok(())
    }

    /// Full pass: similarities, pre-reconstruction, energy-preserving
    /// weights, reconstruction, and the loss diagnostics.
    pub fn estimate(&self, extracted: Vec<f64>) -> Result<NoiseEstimate> {
        self.check_dim(&extracted)?;
        let (similarities, degenerate_f) = self.similarities(&extracted)?;
        let pre = self.pre_reconstruct(&similarities)?;
        let (weights, degenerate_p) = if degenerate_f {
            (vec![0.0; self.k], true)
        } else {
            self.estimate_weights(&extracted, &pre, &similarities)?
        };
        let degenerate = degenerate_f || degenerate_p;
        let reconstructed = if degenerate {
            vec![0.0; self.d]
        } else {
            self.reconstruct(&weights)?
        };

        let reconstruction = extracted
            .iter()
            .zip(&reconstructed)
            .map(|(f, r)| (f - r) * (f - r))
            .sum();
        let sparsity = weights.iter().map(|w| w.abs()).sum();
        let diversity = if self.k >= 2 {
            self.diversity_loss()?
        } else {
            0.0
        };
        Ok(NoiseEstimate {
            extracted,
            similarities,
            pre_reconstruction: pre,
            weights,
            reconstructed,
            degenerate,
            losses: LossBreakdown::new(reconstruction, sparsity, diversity, self.alpha),
        })
    }

    /// Extraction followed by [`NoiseSpace::estimate`].
    pub fn estimate_from_features(
        &self,
        features: &[f64],
        weight: &Tensor,
        bias: &Tensor,
    ) -> Result<NoiseEstimate> {
        self.estimate(extract_noise(features, weight, bias)?)
    }

    /// Rebuild the reconstruction on a tape as a differentiable function of
    /// the extracted-noise variable. The bases enter as constants: gradient
    /// flows through the similarities and the energy rescale into the
    /// extraction, never into the bank.
    pub fn reconstruct_on_tape(&self, tape: &mut Tape, extracted: VarId) -> Result<TapeEstimate> {
        let extracted_vals = tape.value(extracted).data().to_vec();
        if extracted_vals.len() != self.d {
            return Err(Error::dim(format!(
                "extracted noise has length {}, noise space expects {}",
                extracted_vals.len(),
                self.d
            )));
        }

        let degenerate = |extracted_vals: Vec<f64>, k: usize| TapeEstimate {
            reconstructed: None,
            weights: vec![0.0; k],
            reconstruction_loss: extracted_vals.iter().map(|v| v * v).sum(),
            sparsity_loss: 0.0,
            extracted: extracted_vals,
            degenerate: true,
        };

        let norm_f = tape.l2_norm(extracted)?;
        if tape.value(norm_f).item() < self.epsilon {
            return Ok(degenerate(extracted_vals, self.k));
        }
        let inv_norm_f = tape.recip(norm_f)?;

        // s_j for every base above the norm guard, as tape nodes.
        let mut sim_vars: Vec<Option<VarId>> = Vec::with_capacity(self.k);
        for i in 0..self.k {
            let base = self.base(i);
            let norm_b = l2_norm(base);
            if norm_b < self.epsilon {
                sim_vars.push(None);
                continue;
            }
            let base_var = tape.constant(Tensor::vector(base.to_vec()));
            let d = tape.dot(base_var, extracted)?;
            let dn = tape.mul(d, inv_norm_f)?;
            sim_vars.push(Some(tape.scale(dn, 1.0 / norm_b)?));
        }

        // Pre-reconstruction: similarity-weighted sum of the bases.
        let mut pre: Option<VarId> = None;
        for (i, sim) in sim_vars.iter().enumerate() {
            let Some(sim) = *sim else { continue };
            let base_var = tape.constant(Tensor::vector(self.base(i).to_vec()));
            let term = tape.smul(sim, base_var)?;
            pre = Some(match pre {
                None => term,
                Some(acc) => tape.add(acc, term)?,
            });
        }
        let Some(pre) = pre else {
            return Ok(degenerate(extracted_vals, self.k));
        };

        let norm_p = tape.l2_norm(pre)?;
        if tape.value(norm_p).item() < self.epsilon {
            return Ok(degenerate(extracted_vals, self.k));
        }
        let inv_norm_p = tape.recip(norm_p)?;
        let ratio = tape.mul(norm_f, inv_norm_p)?;
        let reconstructed = tape.smul(ratio, pre)?;

        let ratio_val = tape.value(ratio).item();
        let weights: Vec<f64> = sim_vars
            .iter()
            .map(|s| s.map_or(0.0, |v| ratio_val * tape.value(v).item()))
            .collect();
        let recon_vals = tape.value(reconstructed).data();
        let reconstruction_loss = extracted_vals
            .iter()
            .zip(recon_vals)
            .map(|(f, r)| (f - r) * (f - r))
            .sum();
        let sparsity_loss = weights.iter().map(|w| w.abs()).sum();

        Ok(TapeEstimate {
            reconstructed: Some(reconstructed),
            weights,
            extracted: extracted_vals,
            degenerate: false,
            reconstruction_loss,
            sparsity_loss,
        })
    }

    fn check_dim(&self, v: &[f64]) -> Result<()> {
        if v.len() != self.d {
            return Err(Error::dim(format!(
                "vector length {} does not match feature dimension {}",
                v.len(),
                self.d
            )));
        }
        Ok(())
    }

    fn check_len(&self, v: &[f64]) -> Result<()> {
        if v.len() != self.k {
            return Err(Error::dim(format!(
                "coefficient length {} does not match base count {}",
                v.len(),
                self.k
            )));
        }
        Ok(())
    }
}

/// Affine extraction of the noise estimate from backbone features:
/// `n_f = W f + b` with `W: [d, d]`, `b: [d]`.
pub fn extract_noise(features: &[f64], weight: &Tensor, bias: &Tensor) -> Result<Vec<f64>> {
    let d = features.len();
    if weight.shape() != [d, d] {
        return Err(Error::dim(format!(
            "extraction weight shape {:?} does not match feature dim {d}",
            weight.shape()
        )));
    }
    if bias.shape() != [d] {
        return Err(Error::dim(format!(
            "extraction bias shape {:?} does not match feature dim {d}",
            bias.shape()
        )));
    }
    let w = weight.data();
    Ok((0..d)
        .map(|i| dot(&w[i * d..(i + 1) * d], features) + bias.data()[i])
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use crate::tensor::{finite_diff_grad, rel_err};
    use proptest::prelude::*;

    fn random_space(k: usize, d: usize, seed: u64) -> NoiseSpace {
        NoiseSpace::init(k, d, seed).unwrap()
    }

    fn random_vec(d: usize, rng: &mut Rng) -> Vec<f64> {
        (0..d).map(|_| rng.uniform(-1.0, 1.0)).collect()
    }

    #[test]
    fn init_is_deterministic() {
        let a = NoiseSpace::init(16, 8, 99).unwrap();
        let b = NoiseSpace::init(16, 8, 99).unwrap();
        assert_eq!(a.bases_flat(), b.bases_flat());
    }

    #[test]
    fn init_rejects_zero_sizes() {
        assert!(NoiseSpace::init(0, 4, 1).is_err());
        assert!(NoiseSpace::init(4, 0, 1).is_err());
    }

    #[test]
    fn init_paper_scale_shapes() {
        let s = NoiseSpace::init(1024, 400, 7).unwrap();
        assert_eq!(s.k(), 1024);
        assert_eq!(s.d(), 400);
        for i in 0..s.k() {
            assert!(s.base(i).iter().any(|&v| v != 0.0));
        }
    }

    #[test]
    fn init_base_norms_in_unit_interval() {
        for seed in 0..1000 {
            let s = NoiseSpace::init(4, 9, seed).unwrap();
            for i in 0..s.k() {
                let n = l2_norm(s.base(i));
                assert!(n > 0.0 && n <= 1.0, "seed {seed} base {i} norm {n}");
            }
        }
    }

    #[test]
    fn extraction_identity_and_zero() {
        let f = [1.5, -2.0, 0.25];
        let out = extract_noise(&f, &Tensor::identity(3), &Tensor::zeros(vec![3])).unwrap();
        assert_eq!(out, f);
        let zero = extract_noise(&f, &Tensor::zeros(vec![3, 3]), &Tensor::zeros(vec![3])).unwrap();
        assert_eq!(zero, vec![0.0; 3]);
    }

    #[test]
    fn extraction_hand_affine() {
        let w = Tensor::matrix(vec![vec![1.0, 1.0], vec![0.0, 1.0]]).unwrap();
        let b = Tensor::vector(vec![1.0, 0.0]);
        assert_eq!(extract_noise(&[2.0, 3.0], &w, &b).unwrap(), vec![6.0, 3.0]);
    }

    #[test]
    fn extraction_dim_mismatch() {
        assert!(extract_noise(&[1.0, 2.0], &Tensor::identity(3), &Tensor::zeros(vec![3])).is_err());
    }

    #[test]
    fn similarity_parallel_orthogonal_hand() {
        let space = NoiseSpace::with_bases(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let (s, deg) = space.similarities(&[3.0, 0.0]).unwrap();
        assert!(!deg);
        assert!((s[0] - 1.0).abs() < 1e-12); // parallel, any positive scale
        assert!(s[1].abs() < 1e-12); // orthogonal

        let (s, _) = space.similarities(&[1.0, 1.0]).unwrap();
        assert!((s[0] - 1.0 / 2.0_f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn similarity_zero_extraction_degenerates() {
        let space = random_space(4, 3, 1);
        let (s, deg) = space.similarities(&[0.0; 3]).unwrap();
        assert!(deg);
        assert_eq!(s, vec![0.0; 4]);
    }

    #[test]
    fn pre_reconstruct_cases() {
        let space = NoiseSpace::with_bases(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(space.pre_reconstruct(&[0.0, 0.0]).unwrap(), vec![0.0, 0.0]);
        let combo = space.pre_reconstruct(&[1.0, 0.5]).unwrap();
        assert_eq!(combo, vec![1.0, 0.5]);
        assert!((l2_norm(&combo) - 1.25_f64.sqrt()).abs() < 1e-12);

        let single = NoiseSpace::with_bases(1, 2, vec![2.0, -1.0]).unwrap();
        assert_eq!(single.pre_reconstruct(&[0.5]).unwrap(), vec![1.0, -0.5]);
    }

    #[test]
    fn weight_estimation_cases() {
        let space = NoiseSpace::with_bases(1, 2, vec![1.0, 0.0]).unwrap();
        // equal norms: weights equal similarities
        let (w, deg) = space
            .estimate_weights(&[0.0, 2.0], &[2.0, 0.0], &[0.5])
            .unwrap();
        assert!(!deg);
        assert_eq!(w, vec![0.5]);
        // ratio 2/4 halves the similarity
        let (w, _) = space
            .estimate_weights(&[2.0, 0.0], &[0.0, 4.0], &[0.5])
            .unwrap();
        assert_eq!(w, vec![0.25]);
        // guard
        let (w, deg) = space
            .estimate_weights(&[1.0, 1.0], &[0.0, 0.0], &[0.5])
            .unwrap();
        assert!(deg);
        assert_eq!(w, vec![0.0]);
    }

    #[test]
    fn reconstruct_zero_weights() {
        let space = random_space(5, 4, 2);
        assert_eq!(space.reconstruct(&[0.0; 5]).unwrap(), vec![0.0; 4]);
    }

    #[test]
    fn single_base_reconstruction_is_signed_projection() {
        let mut rng = Rng::seeded(3);
        for _ in 0..20 {
            let base = random_vec(4, &mut rng);
            let n_f = random_vec(4, &mut rng);
            let space = NoiseSpace::with_bases(1, 4, base.clone()).unwrap();
            let est = space.estimate(n_f.clone()).unwrap();
            if est.degenerate {
                continue;
            }
            let sign = est.similarities[0].signum();
            let norm_b = l2_norm(&base);
            let expect: Vec<f64> = base
                .iter()
                .map(|b| sign * l2_norm(&n_f) * b / norm_b)
                .collect();
            for (a, e) in est.reconstructed.iter().zip(&expect) {
                assert!((a - e).abs() < 1e-9, "{a} vs {e}");
            }
        }
    }

    #[test]
    fn energy_preserved_on_random_instance() {
        let space = random_space(8, 16, 4);
        let mut rng = Rng::seeded(5);
        let n_f = random_vec(16, &mut rng);
        let est = space.estimate(n_f.clone()).unwrap();
        assert!(!est.degenerate);
        let ratio = l2_norm(&est.reconstructed) / l2_norm(&n_f);
        assert!((ratio - 1.0).abs() <= 1e-9, "ratio {ratio}");
    }

    #[test]
    fn diversity_orthogonal_is_zero() {
        let space = NoiseSpace::with_bases(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(space.diversity_loss().unwrap(), 0.0);
    }

    #[test]
    fn diversity_hand_ordered_pairs() {
        let space = NoiseSpace::with_bases(2, 2, vec![1.0, 0.0, 1.0, 0.0]).unwrap();
        assert_eq!(space.diversity_loss().unwrap(), 1.0);
    }

    #[test]
    fn diversity_matches_brute_force() {
        let space = random_space(3, 5, 6);
        let mut brute = 0.0;
        for l in 0..3 {
            for m in 0..3 {
                if l != m {
                    brute += dot(space.base(l), space.base(m));
                }
            }
        }
        brute /= (3 * 2) as f64;
        assert_eq!(space.diversity_loss().unwrap(), brute);
    }

    #[test]
    fn diversity_needs_two_bases() {
        let space = random_space(1, 4, 7);
        assert!(space.diversity_loss().is_err());
    }

    #[test]
    fn reconstruction_loss_cases() {
        // exact coefficients reconstruct exactly
        let space = NoiseSpace::with_bases(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(
            space
                .reconstruction_loss(&[0.3, -0.7], &[0.3, -0.7])
                .unwrap(),
            0.0
        );
        // zero weights leave the full squared norm
        assert_eq!(
            space.reconstruction_loss(&[3.0, 4.0], &[0.0, 0.0]).unwrap(),
            25.0
        );
        // residual (1,1)
        assert_eq!(
            space.reconstruction_loss(&[1.0, 1.0], &[0.0, 0.0]).unwrap(),
            2.0
        );
    }

    #[test]
    fn gradient_zero_at_stationary_point() {
        // exact reconstruction and all-zero bases: both terms vanish
        let space = NoiseSpace::with_bases(2, 3, vec![0.0; 6]).unwrap();
        let grads = space.base_gradients(&[0.0; 3], &[0.4, -0.2]).unwrap();
        for g in &grads {
            assert!(g.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn gradient_decoupled_case() {
        let mut space = random_space(4, 6, 8);
        space.alpha = 0.0;
        let grads = space.base_gradients(&[0.0; 6], &[0.0; 4]).unwrap();
        for g in &grads {
            assert!(g.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let space = random_space(8, 16, 9);
        let mut rng = Rng::seeded(10);
        let n_f = random_vec(16, &mut rng);
        let est = space.estimate(n_f.clone()).unwrap();
        let weights = est.weights.clone();

        let analytic = space.base_gradients(&n_f, &weights).unwrap();

        // independent oracle: perturb the flattened bank, weights frozen
        let flat = Tensor::vector(space.bases_flat().to_vec());
        let objective = |bases: &Tensor| {
            let mut s = NoiseSpace::with_bases(8, 16, bases.data().to_vec()).unwrap();
            s.alpha = space.alpha;
            let recon = s.reconstruction_loss(&n_f, &weights).unwrap();
            recon + s.alpha * s.diversity_loss().unwrap()
        };
        let fd = finite_diff_grad(objective, &flat, 1e-6);

        let analytic_flat: Vec<f64> = analytic.into_iter().flatten().collect();
        let err = rel_err(&analytic_flat, fd.data());
        assert!(err <= 1e-4, "rel err {err}");
    }

    #[test]
    fn diversity_gradient_identity() {
        // the diversity part of the analytic gradient equals brute-force
        // differentiation of the ordered-pair double sum
        let space = random_space(5, 3, 11);
        let zero_w = vec![0.0; 5];
        let zero_f = vec![0.0; 3];
        let analytic = space.base_gradients(&zero_f, &zero_w).unwrap();

        let flat = Tensor::vector(space.bases_flat().to_vec());
        let brute = finite_diff_grad(
            |bases: &Tensor| {
                let mut sum = 0.0;
                for l in 0..5 {
                    for m in 0..5 {
                        if l != m {
                            let bl = &bases.data()[l * 3..(l + 1) * 3];
                            let bm = &bases.data()[m * 3..(m + 1) * 3];
                            sum += dot(bl, bm);
                        }
                    }
                }
                space.alpha * sum / (5.0 * 4.0)
            },
            &flat,
            1e-6,
        );
        let analytic_flat: Vec<f64> = analytic.into_iter().flatten().collect();
        assert!(rel_err(&analytic_flat, brute.data()) <= 1e-7);

        // and exactly: alpha * 2/(k(k-1)) * (total - n_i)
        let mut total = vec![0.0; 3];
        for i in 0..5 {
            for (t, b) in total.iter_mut().zip(space.base(i)) {
                *t += b;
            }
        }
        for i in 0..5 {
            let expect: Vec<f64> = total
                .iter()
                .zip(space.base(i))
                .map(|(t, b)| space.alpha * 2.0 / 20.0 * (t - b))
                .collect();
            let got = space.base_gradients(&zero_f, &zero_w).unwrap()[i].clone();
            assert_eq!(got, expect);
        }
    }

    #[test]
    fn update_beta_one_is_identity() {
        let mut space = random_space(3, 4, 12);
        space.beta = 1.0;
        let before = space.bases_flat().to_vec();
        let grads = vec![vec![1.0; 4]; 3];
        space.apply_update(&grads, UpdateSign::Descent).unwrap();
        assert_eq!(space.bases_flat(), &before[..]);
    }

    #[test]
    fn update_zero_gradient_shrinks() {
        let mut space = NoiseSpace::with_bases(1, 2, vec![1.0, -2.0]).unwrap();
        space.beta = 0.9;
        space
            .apply_update(&[vec![0.0, 0.0]], UpdateSign::Descent)
            .unwrap();
        assert!((space.base(0)[0] - 0.9).abs() < 1e-15);
        assert!((space.base(0)[1] + 1.8).abs() < 1e-15);
    }

    #[test]
    fn update_hand_case() {
        let mut space = NoiseSpace::with_bases(1, 2, vec![1.0, 0.0]).unwrap();
        space.beta = 0.9;
        space
            .apply_update(&[vec![1.0, 0.0]], UpdateSign::Descent)
            .unwrap();
        assert!((space.base(0)[0] - 0.8).abs() < 1e-15);
        assert_eq!(space.base(0)[1], 0.0);
    }

    #[test]
    fn update_beta_zero_is_pure_step() {
        let mut space = NoiseSpace::with_bases(1, 2, vec![5.0, 5.0]).unwrap();
        space.beta = 0.0;
        space
            .apply_update(&[vec![1.0, -2.0]], UpdateSign::Descent)
            .unwrap();
        assert_eq!(space.base(0), &[-1.0, 2.0]);
    }

    #[test]
    fn update_as_written_flips_sign() {
        let mut space = NoiseSpace::with_bases(1, 1, vec![1.0]).unwrap();
        space.beta = 0.9;
        space
            .apply_update(&[vec![1.0]], UpdateSign::AsWritten)
            .unwrap();
        assert!((space.base(0)[0] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn estimate_zero_features_degenerate() {
        let space = random_space(4, 3, 13);
        let est = space
            .estimate_from_features(
                &[0.0; 3],
                &Tensor::zeros(vec![3, 3]),
                &Tensor::zeros(vec![3]),
            )
            .unwrap();
        assert!(est.degenerate);
        assert_eq!(est.reconstructed, vec![0.0; 3]);
    }

    #[test]
    fn estimate_single_base_collinear() {
        let space = NoiseSpace::with_bases(1, 3, vec![1.0, 2.0, 2.0]).unwrap();
        let est = space.estimate(vec![0.5, -0.3, 0.8]).unwrap();
        assert!(!est.degenerate);
        // cross product with the base is ~zero: collinear
        let r = &est.reconstructed;
        let b = [1.0, 2.0, 2.0];
        let cross = [
            r[1] * b[2] - r[2] * b[1],
            r[2] * b[0] - r[0] * b[2],
            r[0] * b[1] - r[1] * b[0],
        ];
        assert!(l2_norm(&cross) < 1e-9);
        assert!((l2_norm(r) - l2_norm(&[0.5, -0.3, 0.8])).abs() < 1e-9);
    }

    #[test]
    fn tape_route_matches_plain_estimate() {
        let space = random_space(6, 8, 14);
        let mut rng = Rng::seeded(15);
        for _ in 0..10 {
            let n_f = random_vec(8, &mut rng);
            let plain = space.estimate(n_f.clone()).unwrap();

            let mut tape = Tape::new();
            let nf_var = tape.input(Tensor::vector(n_f.clone()));
            let taped = space.reconstruct_on_tape(&mut tape, nf_var).unwrap();
            assert!(!taped.degenerate);
            let recon = tape.value(taped.reconstructed.unwrap());

            for (a, b) in recon.data().iter().zip(&plain.reconstructed) {
                assert!((a - b).abs() < 1e-12, "{a} vs {b}");
            }
            for (a, b) in taped.weights.iter().zip(&plain.weights) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn tape_route_gradient_matches_finite_differences() {
        let space = random_space(5, 6, 16);
        let mut rng = Rng::seeded(17);
        let n_f = Tensor::vector(random_vec(6, &mut rng));

        // loss = sum(n_res) as a function of n_f
        let run = |x: &Tensor| {
            let mut tape = Tape::new();
            let v = tape.input(x.clone());
            let est = space.reconstruct_on_tape(&mut tape, v).unwrap();
            let s = tape.sum(est.reconstructed.unwrap()).unwrap();
            (tape, v, s)
        };
        let (tape, v, loss) = run(&n_f);
        let grads = tape.backward(loss).unwrap();
        let fd = finite_diff_grad(
            |x| {
                let (t, _, l) = run(x);
                t.value(l).item()
            },
            &n_f,
            1e-6,
        );
        let err = rel_err(grads.get(v).unwrap().data(), fd.data());
        assert!(err <= 1e-6, "rel err {err}");
    }

    #[test]
    fn tape_route_degenerate_on_zero_extraction() {
        let space = random_space(4, 3, 18);
        let mut tape = Tape::new();
        let v = tape.input(Tensor::zeros(vec![3]));
        let est = space.reconstruct_on_tape(&mut tape, v).unwrap();
        assert!(est.degenerate);
        assert!(est.reconstructed.is_none());
        assert_eq!(est.weights, vec![0.0; 4]);
    }

    proptest! {
        #[test]
        fn prop_energy_preservation(
            seed in 0u64..5000,
            k in 1usize..9,
            d in 2usize..12,
        ) {
            let space = random_space(k, d, seed);
            let mut rng = Rng::seeded(seed ^ 0xABCD);
            let n_f = random_vec(d, &mut rng);
            let est = space.estimate(n_f.clone()).unwrap();
            if !est.degenerate {
                let nf = l2_norm(&n_f);
                let nr = l2_norm(&est.reconstructed);
                prop_assert!((nr - nf).abs() <= 1e-9 * nf);
                // collinear with the pre-reconstruction, positive scale
                let cos = dot(&est.reconstructed, &est.pre_reconstruction)
                    / (nr * l2_norm(&est.pre_reconstruction));
                prop_assert!((cos - 1.0).abs() <= 1e-9);
            } else {
                prop_assert!(est.reconstructed.iter().all(|&v| v == 0.0));
            }
            for s in &est.similarities {
                prop_assert!((-1.0..=1.0).contains(s));
            }
            prop_assert!(est.reconstructed.iter().all(|v| v.is_finite()));
        }

        #[test]
        fn prop_similarity_scale_equivariance(
            seed in 0u64..5000,
            scale in 1e-3f64..1e3,
        ) {
            let space = random_space(5, 7, seed);
            let mut rng = Rng::seeded(seed ^ 0x1234);
            let n_f = random_vec(7, &mut rng);
            let scaled: Vec<f64> = n_f.iter().map(|v| v * scale).collect();
            let (s1, d1) = space.similarities(&n_f).unwrap();
            let (s2, d2) = space.similarities(&scaled).unwrap();
            prop_assert_eq!(d1, d2);
            for (a, b) in s1.iter().zip(&s2) {
                prop_assert!((a - b).abs() <= 1e-12);
            }
        }

        #[test]
        fn prop_degenerate_safety_no_nan(
            seed in 0u64..2000,
            zero_features in proptest::bool::ANY,
        ) {
            let space = random_space(3, 4, seed);
            let n_f = if zero_features {
                vec![0.0; 4]
            } else {
                let mut rng = Rng::seeded(seed);
                random_vec(4, &mut rng)
            };
            let est = space.estimate(n_f).unwrap();
            prop_assert!(est.reconstructed.iter().all(|v| v.is_finite()));
            prop_assert!(est.weights.iter().all(|v| v.is_finite()));
            prop_assert!(est.losses.total.is_finite());
        }
    }
}
