//! Overlapping patch tokenization and the pre-norm transformer encoder.
//!
//! The token sequence is `[cls; patch_1 .. patch_N; dip_1 .. dip_M]` plus a
//! learnable position embedding with one row per token. Patch `(i, j)` with
//! 1-based `i` in `1..=N_H` and `j` in `1..=N_W` sits at sequence index
//! `1 + (i - 1) * N_W + (j - 1)`.

use rand::{Rng, RngExt};
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{DipError, Result};
use crate::params::{trunc_normal, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const INIT_STD: f64 = 0.02;
pub const LN_EPS: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchConfig {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    /// Patch side.
    pub patch: usize,
    pub stride: usize,
    /// Embedding width.
    pub dim: usize,
    /// Number of DiP tokens.
    pub dips: usize,
    pub layers: usize,
    pub heads: usize,
}

impl Default for PatchConfig {
    fn default() -> Self {
        PatchConfig {
            height: 64,
            width: 32,
            channels: 3,
            patch: 8,
            stride: 8,
            dim: 64,
            dips: 4,
            layers: 4,
            heads: 4,
        }
    }
}

impl PatchConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(DipError::Config(m));
        if self.patch == 0 || self.patch > self.height || self.patch > self.width {
            return bad(format!(
                "patch side {} must be in 1..=min(height {}, width {})",
                self.patch, self.height, self.width
            ));
        }
        if self.stride == 0 {
            return bad("stride must be at least 1".into());
        }
        if self.channels == 0 || self.dim == 0 || self.heads == 0 || self.dim % self.heads != 0 {
            return bad(format!("dim {} must be a positive multiple of heads {}", self.dim, self.heads));
        }
        Ok(())
    }

    /// `floor((H + S - P) / S)`
    pub fn grid_h(&self) -> usize {
        (self.height + self.stride - self.patch) / self.stride
    }

    /// `floor((W + S - P) / S)`
    pub fn grid_w(&self) -> usize {
        (self.width + self.stride - self.patch) / self.stride
    }

    pub fn num_patches(&self) -> usize {
        self.grid_h() * self.grid_w()
    }

    pub fn seq_len(&self) -> usize {
        1 + self.num_patches() + self.dips
    }

    pub fn patch_len(&self) -> usize {
        self.patch * self.patch * self.channels
    }

    /// Sequence index of 1-based patch `(i, j)`.
    pub fn token_index(&self, i: usize, j: usize) -> usize {
        1 + (i - 1) * self.grid_w() + (j - 1)
    }
}

/// Flattens `[H, W, C]` or `[B, H, W, C]` images into `[N, P*P*C]` or
/// `[B, N, P*P*C]` rows; within a row the order is `(dy, dx, c)`.
pub fn patchify<T: Scalar>(images: &Tensor<T>, cfg: &PatchConfig) -> Result<Tensor<T>> {
    cfg.validate()?;
    let s = images.shape();
    let (batch, single) = match s.len() {
        3 => (1, true),
        4 => (s[0], false),
        _ => return Err(DipError::shape("patchify", format!("expected [B,H,W,C], got {s:?}"))),
    };
    let tail = &s[s.len() - 3..];
    if tail != [cfg.height, cfg.width, cfg.channels] {
        return Err(DipError::shape(
            "patchify",
            format!("image {tail:?} vs config [{}, {}, {}]", cfg.height, cfg.width, cfg.channels),
        ));
    }
    let (nh, nw, p, c, st) = (cfg.grid_h(), cfg.grid_w(), cfg.patch, cfg.channels, cfg.stride);
    let row_len = cfg.width * c;
    let img_len = cfg.height * row_len;
    let mut out = Vec::with_capacity(batch * nh * nw * cfg.patch_len());
    for b in 0..batch {
        let img = &images.data()[b * img_len..(b + 1) * img_len];
        for i in 0..nh {
            for j in 0..nw {
                for dy in 0..p {
                    let at = (i * st + dy) * row_len + j * st * c;
                    out.extend_from_slice(&img[at..at + p * c]);
                }
            }
        }
    }
    let shape: Vec<usize> = if single {
        vec![nh * nw, cfg.patch_len()]
    } else {
        vec![batch, nh * nw, cfg.patch_len()]
    };
    Tensor::new(&shape, out)
}

#[derive(Clone, Debug)]
pub struct LayerParams {
    pub ln1_g: ParamId,
    pub ln1_b: ParamId,
    pub qkv_w: ParamId,
    pub qkv_b: ParamId,
    pub proj_w: ParamId,
    pub proj_b: ParamId,
    pub ln2_g: ParamId,
    pub ln2_b: ParamId,
    pub fc1_w: ParamId,
    pub fc1_b: ParamId,
    pub fc2_w: ParamId,
    pub fc2_b: ParamId,
}

#[derive(Clone, Debug)]
pub struct EncoderParams {
    pub patch_w: ParamId,
    pub patch_b: ParamId,
    pub cls: ParamId,
    pub dip_tokens: Option<ParamId>,
    pub pos_embed: ParamId,
    pub layers: Vec<LayerParams>,
    pub norm_g: ParamId,
    pub norm_b: ParamId,
}

impl EncoderParams {
    pub fn init<T: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<T>, cfg: &PatchConfig, rng: &mut R) -> Self {
        let d = cfg.dim;
        let hidden = 4 * d;
        let patch_w = store.register("encoder.patch_w", trunc_normal(&[cfg.patch_len(), d], INIT_STD, rng));
        let patch_b = store.register("encoder.patch_b", Tensor::zeros(&[d]));
        let cls = store.register("encoder.cls", trunc_normal(&[1, d], INIT_STD, rng));
        let dip_tokens = (cfg.dips > 0)
            .then(|| store.register("encoder.dip_tokens", trunc_normal(&[cfg.dips, d], INIT_STD, rng)));
        let pos_embed = store.register("encoder.pos_embed", trunc_normal(&[cfg.seq_len(), d], INIT_STD, rng));
        let layers = (0..cfg.layers)
            .map(|l| {
                let mut reg = |name: &str, t: Tensor<T>| store.register(format!("encoder.layer{l}.{name}"), t);
                LayerParams {
                    ln1_g: reg("ln1_g", Tensor::ones(&[d])),
                    ln1_b: reg("ln1_b", Tensor::zeros(&[d])),
                    qkv_w: reg("qkv_w", trunc_normal(&[d, 3 * d], INIT_STD, rng)),
                    qkv_b: reg("qkv_b", Tensor::zeros(&[3 * d])),
                    proj_w: reg("proj_w", trunc_normal(&[d, d], INIT_STD, rng)),
                    proj_b: reg("proj_b", Tensor::zeros(&[d])),
                    ln2_g: reg("ln2_g", Tensor::ones(&[d])),
                    ln2_b: reg("ln2_b", Tensor::zeros(&[d])),
                    fc1_w: reg("fc1_w", trunc_normal(&[d, hidden], INIT_STD, rng)),
                    fc1_b: reg("fc1_b", Tensor::zeros(&[hidden])),
                    fc2_w: reg("fc2_w", trunc_normal(&[hidden, d], INIT_STD, rng)),
                    fc2_b: reg("fc2_b", Tensor::zeros(&[d])),
                }
            })
            .collect();
        let norm_g = store.register("encoder.norm_g", Tensor::ones(&[d]));
        let norm_b = store.register("encoder.norm_b", Tensor::zeros(&[d]));
        EncoderParams { patch_w, patch_b, cls, dip_tokens, pos_embed, layers, norm_g, norm_b }
    }
}

/// Encoder outputs split by token role.
#[derive(Clone, Copy, Debug)]
pub struct EncoderOutput {
    /// `[B, D]`
    pub cls: Var,
    /// `[B, N, D]`, patch `(i, j)` at row `(i - 1) * N_W + (j - 1)`.
    pub patches: Var,
    /// `[B, M, D]`; absent when the model has no DiP tokens.
    pub dips: Option<Var>,
    /// The full final sequence `[B, 1 + N + M, D]`.
    pub sequence: Var,
}

/// Builds `Z_0 = [cls; proj(patches); dip tokens] + pos_embed` for `[B, N, P*P*C]` patches.
pub fn embed<T: Scalar>(
    g: &Graph<T>,
    vars: &[Var],
    params: &EncoderParams,
    patches: Var,
    cfg: &PatchConfig,
) -> Result<Var> {
    let shape = g.shape(patches);
    if shape.len() != 3 || shape[1] != cfg.num_patches() || shape[2] != cfg.patch_len() {
        return Err(DipError::shape(
            "embed",
            format!("patches {shape:?} vs [B, {}, {}]", cfg.num_patches(), cfg.patch_len()),
        ));
    }
    let batch = shape[0];
    let tokens = g.linear(patches, vars[params.patch_w], vars[params.patch_b])?;
    let cls = g.repeat(vars[params.cls], batch);
    let mut parts = vec![cls, tokens];
    if let Some(dips) = params.dip_tokens {
        parts.push(g.repeat(vars[dips], batch));
    }
    let seq = g.concat(&parts, 1)?;
    g.add(seq, vars[params.pos_embed])
}

fn affine_norm<T: Scalar>(g: &Graph<T>, x: Var, gain: Var, bias: Var) -> Result<Var> {
    let n = g.layer_norm(x, LN_EPS)?;
    let n = g.mul(n, gain)?;
    g.add(n, bias)
}

fn dropout<T: Scalar, R: Rng + ?Sized>(g: &Graph<T>, x: Var, p: f64, rng: Option<&mut R>) -> Result<Var> {
    let Some(rng) = rng else { return Ok(x) };
    if p <= 0.0 {
        return Ok(x);
    }
    let keep = T::of(1.0 / (1.0 - p));
    let mask = Tensor::from_fn(&g.shape(x), |_| if rng.random_bool(p) { T::zero() } else { keep });
    let mask = g.constant(mask);
    g.mul(x, mask)
}

fn attention<T: Scalar>(g: &Graph<T>, vars: &[Var], lp: &LayerParams, x: Var, cfg: &PatchConfig) -> Result<Var> {
    let shape = g.shape(x);
    let (b, t, d) = (shape[0], shape[1], shape[2]);
    let h = cfg.heads;
    let dh = d / h;
    let qkv = g.linear(x, vars[lp.qkv_w], vars[lp.qkv_b])?;
    let qkv = g.reshape(qkv, &[b, t, 3, h, dh])?;
    let qkv = g.permute(qkv, &[2, 0, 3, 1, 4])?;
    let head = |k: usize| -> Result<Var> {
        let s = g.slice(qkv, 0, k, 1)?;
        g.reshape(s, &[b * h, t, dh])
    };
    let (q, k, v) = (head(0)?, head(1)?, head(2)?);
    let kt = g.permute(k, &[0, 2, 1])?;
    let scores = g.matmul(q, kt)?;
    let scores = g.scale(scores, 1.0 / (dh as f64).sqrt());
    let attn = g.softmax(scores)?;
    let ctx = g.matmul(attn, v)?;
    let ctx = g.reshape(ctx, &[b, h, t, dh])?;
    let ctx = g.permute(ctx, &[0, 2, 1, 3])?;
    let ctx = g.reshape(ctx, &[b, t, d])?;
    g.linear(ctx, vars[lp.proj_w], vars[lp.proj_b])
}

/// Runs `cfg.layers` pre-norm blocks and the final norm over `Z_0`, then splits by role.
///
/// `dropout_rng` enables dropout with rate `dropout_p` after the attention
/// projection and the MLP; pass `None` for deterministic inference.
pub fn encode<T: Scalar, R: Rng + ?Sized>(
    g: &Graph<T>,
    vars: &[Var],
    params: &EncoderParams,
    z0: Var,
    cfg: &PatchConfig,
    dropout_p: f64,
    mut dropout_rng: Option<&mut R>,
) -> Result<EncoderOutput> {
    let shape = g.shape(z0);
    if shape.len() != 3 || shape[1] != cfg.seq_len() || shape[2] != cfg.dim {
        return Err(DipError::shape(
            "encode",
            format!("sequence {shape:?} vs [B, {}, {}]", cfg.seq_len(), cfg.dim),
        ));
    }
    let mut x = z0;
    for lp in &params.layers {
        let n = affine_norm(g, x, vars[lp.ln1_g], vars[lp.ln1_b])?;
        let a = attention(g, vars, lp, n, cfg)?;
        let a = dropout(g, a, dropout_p, dropout_rng.as_deref_mut())?;
        x = g.add(x, a)?;
        let n = affine_norm(g, x, vars[lp.ln2_g], vars[lp.ln2_b])?;
        let m = g.linear(n, vars[lp.fc1_w], vars[lp.fc1_b])?;
        let m = g.gelu(m);
        let m = g.linear(m, vars[lp.fc2_w], vars[lp.fc2_b])?;
        let m = dropout(g, m, dropout_p, dropout_rng.as_deref_mut())?;
        x = g.add(x, m)?;
    }
    let z = affine_norm(g, x, vars[params.norm_g], vars[params.norm_b])?;
    let b = shape[0];
    let n = cfg.num_patches();
    let cls = g.slice(z, 1, 0, 1)?;
    let cls = g.reshape(cls, &[b, cfg.dim])?;
    let patches = g.slice(z, 1, 1, n)?;
    let dips = if cfg.dips > 0 { Some(g.slice(z, 1, 1 + n, cfg.dips)?) } else { None };
    Ok(EncoderOutput { cls, patches, dips, sequence: z })
}
