//! Run configuration: defaults, `key = value` config files, validation.

use std::path::PathBuf;

use crate::error::{Error, Result};
use crate::noise_space::UpdateSign;

/// Everything a training/evaluation run needs. Defaults are desk scale
/// (k=64, d=64) so CI finishes in minutes; paper-scale values (k=1024,
/// d=400, lr 1e-4, batch 4, alpha 1, beta 0.9) are one flag away.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub cube: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    /// Number of base noises.
    pub k: usize,
    /// Feature dimension.
    pub d: usize,
    /// Neighbor (patch) size, odd.
    pub neighbor: usize,
    pub lr: f64,
    pub batch: usize,
    /// Diversity tradeoff.
    pub alpha: f64,
    /// Decay rate of the noise-space update.
    pub beta: f64,
    /// Center-loss weight in the combined objective.
    pub lambda_c: f64,
    /// Center update rate.
    pub gamma: f64,
    pub epochs: usize,
    /// Training pixels drawn per class.
    pub per_class: usize,
    pub seed: u64,
    pub update_sign: UpdateSign,
    /// Disable the noise module (ablation).
    pub baseline: bool,
}

impl Default for RunConfig {
    fn default() -> RunConfig {
        RunConfig {
            cube: None,
            checkpoint: None,
            out_dir: None,
            k: 64,
            d: 64,
            neighbor: 5,
            lr: 1e-4,
            batch: 4,
            alpha: 1.0,
            beta: 0.9,
            lambda_c: 0.01,
            gamma: 0.5,
            epochs: 30,
            per_class: 200,
            seed: 1,
            update_sign: UpdateSign::Descent,
            baseline: false,
        }
    }
}

impl RunConfig {
    /// Apply one `key = value` assignment (kebab-case keys, identical for
    /// config files and CLI flags).
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let bad = |what: &str| Error::Config(format!("invalid value '{value}' for {what}"));
        match key {
            "cube" => self.cube = Some(PathBuf::from(value)),
            "checkpoint" => self.checkpoint = Some(PathBuf::from(value)),
            "out-dir" => self.out_dir = Some(PathBuf::from(value)),
            "k" => self.k = value.parse().map_err(|_| bad("k"))?,
            "d" => self.d = value.parse().map_err(|_| bad("d"))?,
            "neighbor" => self.neighbor = value.parse().map_err(|_| bad("neighbor"))?,
            "lr" => self.lr = value.parse().map_err(|_| bad("lr"))?,
            "batch" => self.batch = value.parse().map_err(|_| bad("batch"))?,
            "alpha" => self.alpha = value.parse().map_err(|_| bad("alpha"))?,
            "beta" => self.beta = value.parse().map_err(|_| bad("beta"))?,
            "lambda-c" => self.lambda_c = value.parse().map_err(|_| bad("lambda-c"))?,
            "gamma" => self.gamma = value.parse().map_err(|_| bad("gamma"))?,
            "epochs" => self.epochs = value.parse().map_err(|_| bad("epochs"))?,
            "per-class" => self.per_class = value.parse().map_err(|_| bad("per-class"))?,
            "seed" => self.seed = value.parse().map_err(|_| bad("seed"))?,
            "update-sign" => self.update_sign = value.parse()?,
            "baseline" => {
                self.baseline = match value {
                    "true" | "1" => true,
                    "false" | "0" => false,
                    _ => return Err(bad("baseline")),
                }
            }
            other => return Err(Error::Config(format!("unknown config key '{other}'"))),
        }
        Ok(())
    }

    /// Merge a config file of `key = value` lines ('#' starts a comment).
    pub fn merge_file_text(&mut self, text: &str) -> Result<()> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Config(format!(
                    "line {}: expected 'key = value', got '{raw}'",
                    lineno + 1
                )));
            };
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    pub fn merge_file(&mut self, path: &std::path::Path) -> Result<()> {
        let text = std::fs::read_to_string(path)?;
        self.merge_file_text(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.neighbor == 0 || self.neighbor % 2 == 0 {
            return Err(Error::Config(format!(
                "neighbor size {} must be odd",
                self.neighbor
            )));
        }
        if self.k == 0 || self.d == 0 {
            return Err(Error::Config("k and d must be >= 1".to_string()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr {} must be positive", self.lr)));
        }
        if self.batch == 0 {
            return Err(Error::Config("batch must be >= 1".to_string()));
        }
        if self.per_class == 0 {
            return Err(Error::Config("per-class must be >= 1".to_string()));
        }
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(Error::Config(format!(
                "beta {} must be in [0, 1]",
                self.beta
            )));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::Config(format!(
                "gamma {} must be in [0, 1]",
                self.gamma
            )));
        }
        if self.alpha < 0.0 || !self.alpha.is_finite() {
            return Err(Error::Config(format!("alpha {} must be >= 0", self.alpha)));
        }
        if self.lambda_c < 0.0 || !self.lambda_c.is_finite() {
            return Err(Error::Config(format!(
                "lambda-c {} must be >= 0",
                self.lambda_c
            )));
        }
        Ok(())
    }
}
