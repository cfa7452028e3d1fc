//! Flat `key = value` run configuration.
//!
//! Every key has a default. A file overrides defaults line by line and
//! [`RunConfig::set`] applies command-line overrides on top. `#` starts a
//! comment. Unknown keys and unparsable values are errors.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::encoder::PatchConfig;
use crate::error::{DipError, Result};
use crate::geometry::AffineConfig;
use crate::losses::LossConfig;
use crate::model::ModelConfig;
use crate::training::augment::EraseConfig;
use crate::training::data::{DatasetSpec, ToySpec};
use crate::training::trainer::TrainConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub patch: PatchConfig,
    pub weighting: bool,
    pub dropout: f64,
    pub neck: bool,
    pub train: TrainConfig,
    pub toy: ToySpec,
    pub data_seed: u64,
    pub camera_filter: bool,
    /// Evaluate every this many epochs (0: only after the last).
    pub eval_every: usize,
    /// Write a checkpoint every this many epochs (0: only after the last).
    pub checkpoint_every: usize,
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            patch: PatchConfig::default(),
            weighting: true,
            dropout: 0.0,
            neck: true,
            train: TrainConfig::default(),
            toy: ToySpec::default(),
            data_seed: 0,
            camera_filter: true,
            eval_every: 20,
            checkpoint_every: 50,
            data_dir: PathBuf::from("data"),
            out_dir: PathBuf::from("runs/default"),
        }
    }
}

fn parse<V: FromStr>(key: &str, value: &str) -> Result<V> {
    value.parse().map_err(|_| DipError::Config(format!("`{key}`: cannot parse `{value}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "yes" | "on" | "1" => Ok(true),
        "false" | "no" | "off" | "0" => Ok(false),
        _ => Err(DipError::Config(format!("`{key}`: expected true or false, got `{value}`"))),
    }
}

impl RunConfig {
    /// Recognized keys in file order.
    pub const KEYS: &'static [&'static str] = &[
        "height",
        "width",
        "patch",
        "stride",
        "dim",
        "dips",
        "layers",
        "heads",
        "weighting",
        "dropout",
        "neck",
        "epochs",
        "p_ids",
        "k_imgs",
        "lr",
        "momentum",
        "warmup_epochs",
        "grad_clip",
        "erase_prob",
        "erase_area_min",
        "erase_area_max",
        "erase_aspect_min",
        "erase_aspect_max",
        "transform",
        "translate",
        "scale_min",
        "scale_max",
        "hflip_prob",
        "lambda_id",
        "lambda_t",
        "lambda_pe",
        "margin",
        "seed",
        "identities",
        "train_per_identity",
        "query_per_identity",
        "gallery_per_identity",
        "train_occlusion",
        "noise",
        "data_seed",
        "camera_filter",
        "eval_every",
        "checkpoint_every",
        "data_dir",
        "out_dir",
    ];

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let t = &mut self.train;
        match key {
            "height" => {
                self.patch.height = parse(key, v)?;
                self.toy.base.height = self.patch.height;
            }
            "width" => {
                self.patch.width = parse(key, v)?;
                self.toy.base.width = self.patch.width;
            }
            "patch" => self.patch.patch = parse(key, v)?,
            "stride" => self.patch.stride = parse(key, v)?,
            "dim" => self.patch.dim = parse(key, v)?,
            "dips" => self.patch.dips = parse(key, v)?,
            "layers" => self.patch.layers = parse(key, v)?,
            "heads" => self.patch.heads = parse(key, v)?,
            "weighting" => self.weighting = parse_bool(key, v)?,
            "dropout" => self.dropout = parse(key, v)?,
            "neck" => self.neck = parse_bool(key, v)?,
            "epochs" => t.epochs = parse(key, v)?,
            "p_ids" => t.p_ids = parse(key, v)?,
            "k_imgs" => t.k_imgs = parse(key, v)?,
            "lr" => t.lr0 = parse(key, v)?,
            "momentum" => t.momentum = parse(key, v)?,
            "warmup_epochs" => t.warmup_epochs = parse(key, v)?,
            "grad_clip" => t.grad_clip = parse(key, v)?,
            "erase_prob" => t.erase.prob = parse(key, v)?,
            "erase_area_min" => t.erase.area_min = parse(key, v)?,
            "erase_area_max" => t.erase.area_max = parse(key, v)?,
            "erase_aspect_min" => t.erase.aspect_min = parse(key, v)?,
            "erase_aspect_max" => t.erase.aspect_max = parse(key, v)?,
            "transform" => t.transform = parse_bool(key, v)?,
            "translate" => t.affine.translate = parse(key, v)?,
            "scale_min" => t.affine.scale_min = parse(key, v)?,
            "scale_max" => t.affine.scale_max = parse(key, v)?,
            "hflip_prob" => t.affine.hflip_prob = parse(key, v)?,
            "lambda_id" => t.loss.lambda_id = parse(key, v)?,
            "lambda_t" => t.loss.lambda_t = parse(key, v)?,
            "lambda_pe" => t.loss.lambda_pe = parse(key, v)?,
            "margin" => t.loss.margin = parse(key, v)?,
            "seed" => t.seed = parse(key, v)?,
            "identities" => self.toy.base.identities = parse(key, v)?,
            "train_per_identity" => self.toy.train_per_identity = parse(key, v)?,
            "query_per_identity" => self.toy.query_per_identity = parse(key, v)?,
            "gallery_per_identity" => self.toy.gallery_per_identity = parse(key, v)?,
            "train_occlusion" => self.toy.train_occlusion = parse(key, v)?,
            "noise" => self.toy.base.noise = parse(key, v)?,
            "data_seed" => self.data_seed = parse(key, v)?,
            "camera_filter" => self.camera_filter = parse_bool(key, v)?,
            "eval_every" => self.eval_every = parse(key, v)?,
            "checkpoint_every" => self.checkpoint_every = parse(key, v)?,
            "data_dir" => self.data_dir = PathBuf::from(v),
            "out_dir" => self.out_dir = PathBuf::from(v),
            _ => return Err(DipError::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Current value of `key` in file syntax.
    pub fn get(&self, key: &str) -> Option<String> {
        let t = &self.train;
        let s = match key {
            "height" => self.patch.height.to_string(),
            "width" => self.patch.width.to_string(),
            "patch" => self.patch.patch.to_string(),
            "stride" => self.patch.stride.to_string(),
            "dim" => self.patch.dim.to_string(),
            "dips" => self.patch.dips.to_string(),
            "layers" => self.patch.layers.to_string(),
            "heads" => self.patch.heads.to_string(),
            "weighting" => self.weighting.to_string(),
            "dropout" => self.dropout.to_string(),
            "neck" => self.neck.to_string(),
            "epochs" => t.epochs.to_string(),
            "p_ids" => t.p_ids.to_string(),
            "k_imgs" => t.k_imgs.to_string(),
            "lr" => t.lr0.to_string(),
            "momentum" => t.momentum.to_string(),
            "warmup_epochs" => t.warmup_epochs.to_string(),
            "grad_clip" => t.grad_clip.to_string(),
            "erase_prob" => t.erase.prob.to_string(),
            "erase_area_min" => t.erase.area_min.to_string(),
            "erase_area_max" => t.erase.area_max.to_string(),
            "erase_aspect_min" => t.erase.aspect_min.to_string(),
            "erase_aspect_max" => t.erase.aspect_max.to_string(),
            "transform" => t.transform.to_string(),
            "translate" => t.affine.translate.to_string(),
            "scale_min" => t.affine.scale_min.to_string(),
            "scale_max" => t.affine.scale_max.to_string(),
            "hflip_prob" => t.affine.hflip_prob.to_string(),
            "lambda_id" => t.loss.lambda_id.to_string(),
            "lambda_t" => t.loss.lambda_t.to_string(),
            "lambda_pe" => t.loss.lambda_pe.to_string(),
            "margin" => t.loss.margin.to_string(),
            "seed" => t.seed.to_string(),
            "identities" => self.toy.base.identities.to_string(),
            "train_per_identity" => self.toy.train_per_identity.to_string(),
            "query_per_identity" => self.toy.query_per_identity.to_string(),
            "gallery_per_identity" => self.toy.gallery_per_identity.to_string(),
            "train_occlusion" => self.toy.train_occlusion.to_string(),
            "noise" => self.toy.base.noise.to_string(),
            "data_seed" => self.data_seed.to_string(),
            "camera_filter" => self.camera_filter.to_string(),
            "eval_every" => self.eval_every.to_string(),
            "checkpoint_every" => self.checkpoint_every.to_string(),
            "data_dir" => self.data_dir.display().to_string(),
            "out_dir" => self.out_dir.display().to_string(),
            _ => return None,
        };
        Some(s)
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    /// Applies the assignments in `text` on top of the current values.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| DipError::Config(format!("line {}: expected `key = value`, got `{line}`", n + 1)))?;
            self.set(key.trim(), value)
                .map_err(|e| DipError::Config(format!("line {}: {}", n + 1, e.to_string().trim_start_matches("invalid configuration: "))))?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| DipError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_text(&text)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for key in Self::KEYS {
            let _ = writeln!(out, "{key} = {}", self.get(key).expect("listed key"));
        }
        out
    }

    /// Sets `k_imgs` so that `P x K` equals `batch`.
    pub fn set_batch(&mut self, batch: usize) -> Result<()> {
        let p = self.train.p_ids;
        if p == 0 || batch % p != 0 || batch / p < 2 {
            return Err(DipError::Config(format!("batch {batch} is not a multiple of P = {p} with K >= 2")));
        }
        self.train.k_imgs = batch / p;
        Ok(())
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            patch: self.patch.clone(),
            classes: self.toy.base.identities,
            weighting: self.weighting,
            dropout: self.dropout,
            neck: self.neck,
        }
    }

    pub fn dataset_spec(&self) -> &DatasetSpec {
        &self.toy.base
    }

    pub fn erase(&self) -> &EraseConfig {
        &self.train.erase
    }

    pub fn affine(&self) -> &AffineConfig {
        &self.train.affine
    }

    pub fn losses(&self) -> &LossConfig {
        &self.train.loss
    }

    pub fn validate(&self) -> Result<()> {
        self.model_config().validate()?;
        self.train.validate()?;
        if (self.toy.base.height, self.toy.base.width) != (self.patch.height, self.patch.width) {
            return Err(DipError::Config("image extents and patch configuration disagree".into()));
        }
        if self.toy.base.identities < self.train.p_ids {
            return Err(DipError::Config(format!(
                "{} identities cannot fill P = {}",
                self.toy.base.identities, self.train.p_ids
            )));
        }
        Ok(())
    }
}
