//! Encoder, DiP head and identity classifier assembled into one model.
//!
//! Retrieval always works on a set of "parts" with weightings. With DiP
//! tokens the parts are the DiP features and the weightings come from the
//! head; without them the single part is `f_cls` with weighting 1, which turns
//! the part-based distance into the plain Euclidean distance.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::dip_head::{self, HeadParams};
use crate::encoder::{self, EncoderOutput, EncoderParams, PatchConfig};
use crate::error::{DipError, Result};
use crate::params::{trunc_normal, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const NECK_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub patch: PatchConfig,
    pub classes: usize,
    /// Learned DiP weightings; when off every weighting is fixed at 1.
    pub weighting: bool,
    pub dropout: f64,
    /// Standardize the classifier input over the batch. Retrieval and the
    /// triplet loss keep the raw feature.
    pub neck: bool,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.patch.validate()?;
        if self.classes == 0 {
            return Err(DipError::Config("classifier needs at least one identity".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(DipError::Config(format!("dropout must lie in [0, 1), got {}", self.dropout)));
        }
        Ok(())
    }

    /// Parts per image used by retrieval: `M`, or 1 for the `f_cls` baseline.
    pub fn parts(&self) -> usize {
        self.patch.dips.max(1)
    }
}

#[derive(Clone, Debug)]
pub struct DipModel<T> {
    pub config: ModelConfig,
    pub store: ParamStore<T>,
    pub encoder: EncoderParams,
    pub head: Option<HeadParams>,
    pub classifier_w: ParamId,
    pub classifier_b: ParamId,
}

/// Graph handles for one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ModelOutput {
    pub encoder: EncoderOutput,
    /// Raw head output `[B, M, 3]`.
    pub head: Option<Var>,
    /// Predicted positions `[B, M, 2]`.
    pub positions: Option<Var>,
    /// `[B, M', D]` with `M' = max(M, 1)`.
    pub parts: Var,
    /// `[B, M']`
    pub weights: Var,
    /// Weighted part sum `[B, D]` fed to the classifier.
    pub feature: Var,
    /// `[B, classes]`
    pub logits: Var,
}

/// Detached per-image results of an inference pass.
#[derive(Clone, Debug, PartialEq)]
pub struct Inference<T> {
    /// `[B, M', D]`
    pub parts: Tensor<T>,
    /// `[B, M']`
    pub weights: Tensor<T>,
    /// `[B, M, 2]` when the model has DiP tokens.
    pub positions: Option<Tensor<T>>,
    /// `[B, M, D]` when the model has DiP tokens.
    pub dips: Option<Tensor<T>>,
    /// `[B, N, D]`
    pub patches: Tensor<T>,
}

impl<T: Scalar> DipModel<T> {
    pub fn new<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let encoder = EncoderParams::init(&mut store, &config.patch, rng);
        let head = (config.patch.dips > 0).then(|| HeadParams::init(&mut store, config.patch.dim, rng));
        let d = config.patch.dim;
        let classifier_w = store.register("classifier.w", trunc_normal(&[d, config.classes], 1.0 / (d as f64).sqrt(), rng));
        let classifier_b = store.register("classifier.b", Tensor::zeros(&[config.classes]));
        Ok(DipModel { config, store, encoder, head, classifier_w, classifier_b })
    }

    pub fn patch_config(&self) -> &PatchConfig {
        &self.config.patch
    }

    /// Records the model on `g` for images `[B, H, W, C]`; `vars` come from `self.store.bind(g)`.
    pub fn forward<R: Rng + ?Sized>(
        &self,
        g: &Graph<T>,
        vars: &[Var],
        images: &Tensor<T>,
        dropout_rng: Option<&mut R>,
    ) -> Result<ModelOutput> {
        let cfg = &self.config.patch;
        let mut patches = encoder::patchify(images, cfg)?;
        if patches.rank() == 2 {
            let s = patches.shape().to_vec();
            patches = patches.reshape(&[1, s[0], s[1]])?;
        }
        let batch = patches.shape()[0];
        let x = g.constant(patches);
        let z0 = encoder::embed(g, vars, &self.encoder, x, cfg)?;
        let enc = encoder::encode(g, vars, &self.encoder, z0, cfg, self.config.dropout, dropout_rng)?;

        let (head, positions, parts, weights) = match (enc.dips, &self.head) {
            (Some(dips), Some(hp)) => {
                let head = dip_head::predict(g, vars, hp, dips)?;
                let (positions, learned) = dip_head::split_prediction(g, head)?;
                let weights = if self.config.weighting {
                    learned
                } else {
                    g.constant(Tensor::ones(&[batch, cfg.dips]))
                };
                (Some(head), Some(positions), dips, weights)
            }
            _ => {
                let parts = g.reshape(enc.cls, &[batch, 1, cfg.dim])?;
                (None, None, parts, g.constant(Tensor::ones(&[batch, 1])))
            }
        };
        let m = self.config.parts();
        let w_row = g.reshape(weights, &[batch, 1, m])?;
        let feature = g.matmul(w_row, parts)?;
        let feature = g.reshape(feature, &[batch, cfg.dim])?;
        let head_in = if self.config.neck { batch_standardize(g, feature)? } else { feature };
        let logits = g.linear(head_in, vars[self.classifier_w], vars[self.classifier_b])?;
        Ok(ModelOutput { encoder: enc, head, positions, parts, weights, feature, logits })
    }

    /// Deterministic forward pass without dropout, in chunks of `chunk` images.
    pub fn infer(&self, images: &Tensor<T>, chunk: usize) -> Result<Inference<T>> {
        let s = images.shape();
        if s.len() != 4 {
            return Err(DipError::shape("infer", format!("images {s:?} are not [B, H, W, C]")));
        }
        let per_image: usize = s[1..].iter().product();
        let chunk = chunk.max(1);
        let mut pieces: Vec<Inference<T>> = Vec::new();
        let mut start = 0;
        while start < s[0] {
            let len = chunk.min(s[0] - start);
            let batch = Tensor::new(
                &[len, s[1], s[2], s[3]],
                images.data()[start * per_image..(start + len) * per_image].to_vec(),
            )?;
            let g = Graph::new();
            let vars: Vec<Var> = self.store.tensors().iter().map(|t| g.constant(t.clone())).collect();
            let out = self.forward::<rand_chacha::ChaCha8Rng>(&g, &vars, &batch, None)?;
            pieces.push(Inference {
                parts: g.value(out.parts).clone(),
                weights: g.value(out.weights).clone(),
                positions: out.positions.map(|p| g.value(p).clone()),
                dips: out.encoder.dips.map(|d| g.value(d).clone()),
                patches: g.value(out.encoder.patches).clone(),
            });
            start += len;
        }
        let cat = |f: &dyn Fn(&Inference<T>) -> Tensor<T>| -> Result<Tensor<T>> { concat_rows(pieces.iter().map(f)) };
        Ok(Inference {
            parts: cat(&|p| p.parts.clone())?,
            weights: cat(&|p| p.weights.clone())?,
            positions: match pieces.first().and_then(|p| p.positions.as_ref()) {
                Some(_) => Some(cat(&|p| p.positions.clone().expect("uniform pieces"))?),
                None => None,
            },
            dips: match pieces.first().and_then(|p| p.dips.as_ref()) {
                Some(_) => Some(cat(&|p| p.dips.clone().expect("uniform pieces"))?),
                None => None,
            },
            patches: cat(&|p| p.patches.clone())?,
        })
    }
}

/// Concatenates tensors along their leading axis.
fn concat_rows<T: Scalar>(items: impl Iterator<Item = Tensor<T>>) -> Result<Tensor<T>> {
    let mut shape: Option<Vec<usize>> = None;
    let mut data = Vec::new();
    for t in items {
        match &mut shape {
            None => shape = Some(t.shape().to_vec()),
            Some(s) => {
                if s[1..] != t.shape()[1..] {
                    return Err(DipError::shape("concat_rows", format!("{s:?} vs {:?}", t.shape())));
                }
                s[0] += t.shape()[0];
            }
        }
        data.extend_from_slice(t.data());
    }
    let shape = shape.ok_or_else(|| DipError::InsufficientData("no images to infer".into()))?;
    Tensor::new(&shape, data)
}

/// Per-dimension standardization over the batch of `[B, D]`, without affine.
pub fn batch_standardize<T: Scalar>(g: &Graph<T>, x: Var) -> Result<Var> {
    let cols = g.permute(x, &[1, 0])?;
    let mean = g.mean_last(cols)?;
    let centered = g.sub(x, mean)?;
    let var = g.mean_last(g.permute(g.square(centered), &[1, 0])?)?;
    let inv = g.pow(g.offset(var, NECK_EPS), -0.5);
    g.mul(centered, inv)
}
