//! Flat `key=value` run configuration shared by every command.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::data::DiversityConfig;
use crate::encoders::ModelDims;
use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::pipeline::{StageConfig, StageTag};

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub output_dir: PathBuf,
    pub seed: u64,
    pub num_ids: usize,
    pub images_per_id: usize,
    pub texts_per_id: usize,
    pub image_noise: f64,
    pub text_noise: f64,
    pub text_mixing: f64,
    pub prototype_scale: f64,
    pub attribute_dim: usize,
    pub n_nodes: usize,
    pub dim: usize,
    pub dim_in: usize,
    pub patch_rows: usize,
    pub tokens: usize,
    pub gcn_layers: usize,
    pub batch_size: usize,
    pub baseline_iterations: usize,
    pub baseline_lr: f64,
    pub stage1_iterations: usize,
    pub stage1_lr: f64,
    pub stage2_iterations: usize,
    pub stage2_lr: f64,
    pub stage3_iterations: usize,
    pub stage3_lr: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub epsilon: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let d = DiversityConfig::default();
        let m = ModelDims::default();
        let w = LossWeights::default();
        Self {
            output_dir: PathBuf::from("xag-run"),
            seed: d.seed,
            num_ids: d.num_ids,
            images_per_id: d.images_per_id,
            texts_per_id: d.texts_per_id,
            image_noise: d.image_noise,
            text_noise: d.text_noise,
            text_mixing: d.text_mixing,
            prototype_scale: d.prototype_scale,
            attribute_dim: d.attribute_dim,
            n_nodes: m.n_nodes,
            dim: m.dim,
            dim_in: m.dim_in,
            patch_rows: m.patch_rows,
            tokens: m.tokens,
            gcn_layers: crate::graph::DEFAULT_GCN_LAYERS,
            batch_size: 16,
            baseline_iterations: 2000,
            baseline_lr: 1e-4,
            stage1_iterations: 2000,
            stage1_lr: 1e-4,
            stage2_iterations: 300,
            stage2_lr: 1e-2,
            stage3_iterations: 2000,
            stage3_lr: 1e-4,
            lambda1: w.lambda1,
            lambda2: w.lambda2,
            epsilon: w.epsilon,
        }
    }
}

fn parse_value<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value {value:?} for {key}")))
}

impl RunConfig {
    /// Every recognised key, in canonical order.
    pub const KEYS: [&'static str; 28] = [
        "output_dir",
        "seed",
        "num_ids",
        "images_per_id",
        "texts_per_id",
        "image_noise",
        "text_noise",
        "text_mixing",
        "prototype_scale",
        "attribute_dim",
        "n_nodes",
        "dim",
        "dim_in",
        "patch_rows",
        "tokens",
        "gcn_layers",
        "batch_size",
        "baseline_iterations",
        "baseline_lr",
        "stage1_iterations",
        "stage1_lr",
        "stage2_iterations",
        "stage2_lr",
        "stage3_iterations",
        "stage3_lr",
        "lambda1",
        "lambda2",
        "epsilon",
    ];

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "output_dir" => self.output_dir = PathBuf::from(value),
            "seed" => self.seed = parse_value(key, value)?,
            "num_ids" => self.num_ids = parse_value(key, value)?,
            "images_per_id" => self.images_per_id = parse_value(key, value)?,
            "texts_per_id" => self.texts_per_id = parse_value(key, value)?,
            "image_noise" => self.image_noise = parse_value(key, value)?,
            "text_noise" => self.text_noise = parse_value(key, value)?,
            "text_mixing" => self.text_mixing = parse_value(key, value)?,
            "prototype_scale" => self.prototype_scale = parse_value(key, value)?,
            "attribute_dim" => self.attribute_dim = parse_value(key, value)?,
            "n_nodes" => self.n_nodes = parse_value(key, value)?,
            "dim" => self.dim = parse_value(key, value)?,
            "dim_in" => self.dim_in = parse_value(key, value)?,
            "patch_rows" => self.patch_rows = parse_value(key, value)?,
            "tokens" => self.tokens = parse_value(key, value)?,
            "gcn_layers" => self.gcn_layers = parse_value(key, value)?,
            "batch_size" => self.batch_size = parse_value(key, value)?,
            "baseline_iterations" => self.baseline_iterations = parse_value(key, value)?,
            "baseline_lr" => self.baseline_lr = parse_value(key, value)?,
            "stage1_iterations" => self.stage1_iterations = parse_value(key, value)?,
            "stage1_lr" => self.stage1_lr = parse_value(key, value)?,
            "stage2_iterations" => self.stage2_iterations = parse_value(key, value)?,
            "stage2_lr" => self.stage2_lr = parse_value(key, value)?,
            "stage3_iterations" => self.stage3_iterations = parse_value(key, value)?,
            "stage3_lr" => self.stage3_lr = parse_value(key, value)?,
            "lambda1" => self.lambda1 = parse_value(key, value)?,
            "lambda2" => self.lambda2 = parse_value(key, value)?,
            "epsilon" => self.epsilon = parse_value(key, value)?,
            _ => return Err(Error::Config(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    /// Parses `key=value` lines over the defaults. Blank lines and `#`
    /// comments are skipped; unknown and repeated keys are rejected.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value, got {line:?}", lineno + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            if seen.contains(&key) {
                return Err(Error::Config(format!("line {}: duplicate key {key:?}", lineno + 1)));
            }
            seen.push(key);
            cfg.set(key, value)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn get(&self, key: &str) -> Option<String> {
        Some(match key {
            "output_dir" => self.output_dir.display().to_string(),
            "seed" => self.seed.to_string(),
            "num_ids" => self.num_ids.to_string(),
            "images_per_id" => self.images_per_id.to_string(),
            "texts_per_id" => self.texts_per_id.to_string(),
            "image_noise" => self.image_noise.to_string(),
            "text_noise" => self.text_noise.to_string(),
            "text_mixing" => self.text_mixing.to_string(),
            "prototype_scale" => self.prototype_scale.to_string(),
            "attribute_dim" => self.attribute_dim.to_string(),
            "n_nodes" => self.n_nodes.to_string(),
            "dim" => self.dim.to_string(),
            "dim_in" => self.dim_in.to_string(),
            "patch_rows" => self.patch_rows.to_string(),
            "tokens" => self.tokens.to_string(),
            "gcn_layers" => self.gcn_layers.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "baseline_iterations" => self.baseline_iterations.to_string(),
            "baseline_lr" => self.baseline_lr.to_string(),
            "stage1_iterations" => self.stage1_iterations.to_string(),
            "stage1_lr" => self.stage1_lr.to_string(),
            "stage2_iterations" => self.stage2_iterations.to_string(),
            "stage2_lr" => self.stage2_lr.to_string(),
            "stage3_iterations" => self.stage3_iterations.to_string(),
            "stage3_lr" => self.stage3_lr.to_string(),
            "lambda1" => self.lambda1.to_string(),
            "lambda2" => self.lambda2.to_string(),
            "epsilon" => self.epsilon.to_string(),
            _ => return None,
        })
    }

    /// Canonical rendering of every key; parsing it back yields `self`.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for key in Self::KEYS {
            let _ = writeln!(out, "{key}={}", self.get(key).expect("known key"));
        }
        out
    }

    /// SHA-256 of the canonical rendering without `output_dir`, so moving a
    /// run does not invalidate its checkpoints.
    pub fn hash(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        for key in Self::KEYS.iter().filter(|k| **k != "output_dir") {
            h.update(format!("{key}={}\n", self.get(key).expect("known key")).as_bytes());
        }
        h.finalize().into()
    }

    pub fn validate(&self) -> Result<()> {
        self.diversity().validate()?;
        self.dims().validate()?;
        self.weights().validate()?;
        if self.gcn_layers == 0 {
            return Err(Error::Config("gcn_layers must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        for tag in StageTag::ALL {
            self.stage(tag).validate()?;
        }
        Ok(())
    }

    pub fn diversity(&self) -> DiversityConfig {
        DiversityConfig {
            image_noise: self.image_noise,
            text_noise: self.text_noise,
            text_mixing: self.text_mixing,
            images_per_id: self.images_per_id,
            texts_per_id: self.texts_per_id,
            num_ids: self.num_ids,
            prototype_scale: self.prototype_scale,
            attribute_dim: self.attribute_dim,
            seed: self.seed,
        }
    }

    pub fn dims(&self) -> ModelDims {
        ModelDims {
            n_nodes: self.n_nodes,
            dim: self.dim,
            dim_in: self.dim_in,
            patch_rows: self.patch_rows,
            tokens: self.tokens,
        }
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights {
            lambda1: self.lambda1,
            lambda2: self.lambda2,
            epsilon: self.epsilon,
        }
    }

    pub fn stage(&self, stage: StageTag) -> StageConfig {
        let (iterations, lr) = match stage {
            StageTag::Baseline => (self.baseline_iterations, self.baseline_lr),
            StageTag::Scfc => (self.stage1_iterations, self.stage1_lr),
            StageTag::Attack => (self.stage2_iterations, self.stage2_lr),
            StageTag::Adversarial => (self.stage3_iterations, self.stage3_lr),
        };
        StageConfig {
            stage,
            iterations,
            lr,
            weights: self.weights(),
            batch_size: self.batch_size,
            seed: self.seed,
            dims: self.dims(),
            gcn_layers: self.gcn_layers,
            config_hash: self.hash(),
        }
    }
}
