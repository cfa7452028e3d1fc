//! The optimization loop.
//!
//! One step: draw a PK batch, random-erase each image to form `X`, sample one
//! affine `K` per image and warp `X` into `X'`, run both branches, build the
//! detached implicit-position targets `p` (from `X`) and `K p` (for `X'`),
//! and take an SGD step on the total loss.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{DipError, Result};
use crate::eval::{evaluate, RankingResult};
use crate::geometry::{sample_affine, transform_image, transform_positions, AffineConfig, AffineTransform};
use crate::implicit_position::{implicit_positions, PatchGrid, CORRELATION_EPS};
use crate::losses::{total_loss, Branch, LossBreakdown, LossConfig};
use crate::model::{DipModel, ModelConfig};
use crate::rng::stream;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::training::augment::{random_erase, EraseConfig};
use crate::training::checkpoint::Checkpoint;
use crate::training::data::Dataset;
use crate::training::optim::{LrSchedule, Sgd};
use crate::training::sampler::pk_epoch;

// stream tags
const TAG_INIT: u64 = 1;
const TAG_SAMPLER: u64 = 2;
const TAG_AUGMENT: u64 = 3;
const TAG_DROPOUT: u64 = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Identities per batch.
    pub p_ids: usize,
    /// Images per identity in a batch.
    pub k_imgs: usize,
    pub lr0: f64,
    pub momentum: f64,
    pub warmup_epochs: usize,
    pub erase: EraseConfig,
    pub affine: AffineConfig,
    /// Train the transformed-image branch `X'`; ignored without DiP tokens.
    pub transform: bool,
    pub loss: LossConfig,
    /// Global gradient-norm ceiling; 0 disables clipping.
    pub grad_clip: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 200,
            p_ids: 8,
            k_imgs: 4,
            lr0: 0.04,
            momentum: 0.9,
            warmup_epochs: 5,
            erase: EraseConfig::default(),
            affine: AffineConfig::default(),
            transform: true,
            loss: LossConfig::default(),
            grad_clip: 1.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn batch_size(&self) -> usize {
        self.p_ids * self.k_imgs
    }

    pub fn validate(&self) -> Result<()> {
        if self.p_ids < 2 || self.k_imgs < 2 {
            return Err(DipError::Config(format!("batch needs P >= 2 and K >= 2, got {}x{}", self.p_ids, self.k_imgs)));
        }
        if self.lr0 < 0.0 || !(0.0..1.0).contains(&self.momentum) {
            return Err(DipError::Config(format!("lr {} / momentum {} out of range", self.lr0, self.momentum)));
        }
        self.affine.validate()
    }
}

/// Model and training configuration stored inside checkpoints.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSnapshot {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

/// Held-out sets scored after an epoch.
#[derive(Clone, Copy, Debug)]
pub struct EvalSets<'a> {
    pub query: &'a Dataset,
    pub gallery: &'a Dataset,
    pub query_occluded: Option<&'a Dataset>,
    pub camera_filter: bool,
}

/// One metrics-log line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub steps: usize,
    pub lr: f64,
    #[serde(flatten)]
    pub losses: LossBreakdown,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub rank1: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub map: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub occluded_rank1: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub occluded_map: Option<f64>,
}

impl EpochRecord {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("plain numbers serialize")
    }
}

#[derive(Clone, Debug)]
pub struct Trainer<T> {
    pub config: TrainConfig,
    pub model: DipModel<T>,
    pub optimizer: Sgd<T>,
    /// Completed epochs.
    pub epoch: usize,
    pub step: usize,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(model: ModelConfig, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let model = DipModel::new(model, &mut stream(config.seed, &[TAG_INIT]))?;
        let optimizer = Sgd::new(&model.store, config.momentum);
        Ok(Trainer { config, model, optimizer, epoch: 0, step: 0 })
    }

    pub fn snapshot(&self) -> RunSnapshot {
        RunSnapshot { model: self.model.config.clone(), train: self.config.clone() }
    }

    pub fn checkpoint(&self) -> Checkpoint<T> {
        let params = self.model.store.names().iter().cloned().zip(self.model.store.tensors().iter().cloned()).collect();
        Checkpoint {
            config: serde_json::to_string(&self.snapshot()).expect("config serializes"),
            params,
            velocity: self.optimizer.velocity.clone(),
            epoch: self.epoch,
            step: self.step,
            seed: self.config.seed,
        }
    }

    /// Rebuilds the exact training state stored in `ckpt`.
    pub fn from_checkpoint(ckpt: &Checkpoint<T>) -> Result<Self> {
        let snap: RunSnapshot = serde_json::from_str(&ckpt.config)
            .map_err(|e| DipError::Corrupted(format!("stored configuration: {e}")))?;
        let mut trainer = Trainer::new(snap.model, snap.train)?;
        load_params(&mut trainer.model, ckpt)?;
        if ckpt.velocity.len() != trainer.optimizer.velocity.len()
            || ckpt.velocity.iter().zip(&trainer.optimizer.velocity).any(|(a, b)| a.shape() != b.shape())
        {
            return Err(DipError::ConfigMismatch("momentum buffers do not match the model".into()));
        }
        trainer.optimizer.velocity = ckpt.velocity.clone();
        trainer.epoch = ckpt.epoch;
        trainer.step = ckpt.step;
        Ok(trainer)
    }

    pub fn grid(&self) -> PatchGrid {
        let p = self.model.patch_config();
        PatchGrid::new(p.grid_h(), p.grid_w())
    }

    /// Nominal steps per epoch used by the schedule.
    pub fn steps_per_epoch(&self, data: &Dataset) -> usize {
        let k = self.config.k_imgs;
        let mut counts = std::collections::BTreeMap::<usize, usize>::new();
        for l in data.labels() {
            *counts.entry(l).or_default() += 1;
        }
        let chunks: usize = counts.values().map(|n| n / k).sum();
        (chunks / self.config.p_ids).max(1)
    }

    pub fn schedule(&self, data: &Dataset) -> LrSchedule {
        LrSchedule::from_epochs(self.config.lr0, self.config.warmup_epochs, self.config.epochs, self.steps_per_epoch(data))
    }

    /// `X'` supervises DiP positions, so the class-token baseline trains without it.
    pub fn transformed_branch(&self) -> bool {
        self.config.transform && self.model.config.patch.dips > 0
    }

    /// Builds `X`, and `X'` with its per-image transforms, for one batch.
    fn prepare(&self, data: &Dataset, batch: &[usize]) -> Result<(Tensor<T>, Option<(Tensor<T>, Vec<AffineTransform>)>)> {
        let (h, w) = data.extents()?;
        let per = h * w * 3;
        let branch = self.transformed_branch();
        let prepared = batch
            .par_iter()
            .map(|&i| {
                let mut rng = stream(self.config.seed, &[TAG_AUGMENT, self.epoch as u64, i as u64]);
                let mut img: Tensor<T> = data.samples[i].image.to_tensor();
                random_erase(&mut img, &mut rng, &self.config.erase)?;
                let warped = if branch {
                    let k = sample_affine(&mut rng, &self.config.affine);
                    Some((transform_image(&img, &k)?, k))
                } else {
                    None
                };
                Ok((img, warped))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut x = Vec::with_capacity(batch.len() * per);
        let mut xt = Vec::new();
        let mut ks = Vec::new();
        for (img, warped) in prepared {
            x.extend_from_slice(img.data());
            if let Some((t, k)) = warped {
                xt.extend_from_slice(t.data());
                ks.push(k);
            }
        }
        let shape = [batch.len(), h, w, 3];
        let transformed = if branch { Some((Tensor::new(&shape, xt)?, ks)) } else { None };
        Ok((Tensor::new(&shape, x)?, transformed))
    }

    /// Forward, loss and backward for one batch; returns gradients per parameter.
    pub fn batch_gradients(&self, data: &Dataset, batch: &[usize], batch_no: usize) -> Result<(LossBreakdown, Vec<Option<Tensor<T>>>)> {
        let labels: Vec<usize> = batch.iter().map(|&i| data.samples[i].identity).collect();
        let (x, xt) = self.prepare(data, batch)?;
        let g = Graph::new();
        let vars = self.model.store.bind(&g);
        let mut drop_rng = stream(self.config.seed, &[TAG_DROPOUT, self.epoch as u64, batch_no as u64]);
        let drop = (self.model.config.dropout > 0.0).then_some(&mut drop_rng);
        let out = self.model.forward(&g, &vars, &x, drop)?;
        let grid = self.grid();
        let targets = match out.encoder.dips {
            Some(d) => Some(implicit_positions(&g.value(d), &g.value(out.encoder.patches), &grid, CORRELATION_EPS)?.1),
            None => None,
        };
        let mut out_t = None;
        let mut targets_t = None;
        if let Some((xt, ks)) = &xt {
            let drop = (self.model.config.dropout > 0.0).then_some(&mut drop_rng);
            out_t = Some(self.model.forward(&g, &vars, xt, drop)?);
            targets_t = targets.as_ref().map(|p| transform_each(p, ks));
        }
        let original = Branch { output: &out, targets: targets.as_ref() };
        let transformed = out_t.as_ref().map(|o| Branch { output: o, targets: targets_t.as_ref() });
        let (loss, breakdown) = total_loss(&g, &original, transformed.as_ref(), &labels, &self.config.loss)
            .map_err(|e| match e {
                DipError::NonFinite(_) => DipError::Divergence { epoch: self.epoch, loss: f64::NAN },
                other => other,
            })?;
        let mut grads = g.backward_scalar(loss)?;
        let grads = vars.iter().map(|&v: &Var| grads.take(v)).collect();
        Ok((breakdown, grads))
    }

    /// Runs one epoch and returns its mean losses.
    pub fn train_epoch(&mut self, data: &Dataset) -> Result<EpochRecord> {
        let schedule = self.schedule(data);
        let labels = data.labels();
        let batches = pk_epoch(
            &labels,
            self.config.p_ids,
            self.config.k_imgs,
            &mut stream(self.config.seed, &[TAG_SAMPLER, self.epoch as u64]),
        )?;
        let mut sum = LossBreakdown::default();
        let lr_start = schedule.lr_at(self.step);
        for (batch_no, batch) in batches.iter().enumerate() {
            let (bd, mut grads) = self.batch_gradients(data, batch, batch_no)?;
            clip_global_norm(&mut grads, self.config.grad_clip);
            if !bd.total.is_finite() {
                return Err(DipError::Divergence { epoch: self.epoch, loss: bd.total });
            }
            let lr = schedule.lr_at(self.step);
            self.optimizer.step(&mut self.model.store, &grads, lr)?;
            self.step += 1;
            sum.id_loss += bd.id_loss;
            sum.id_loss_transformed += bd.id_loss_transformed;
            sum.triplet_loss += bd.triplet_loss;
            sum.pe_loss += bd.pe_loss;
            sum.pe_loss_transformed += bd.pe_loss_transformed;
            sum.total += bd.total;
        }
        let n = batches.len() as f64;
        let c = &self.config.loss;
        let losses = LossBreakdown {
            id_loss: sum.id_loss / n,
            id_loss_transformed: sum.id_loss_transformed / n,
            triplet_loss: sum.triplet_loss / n,
            pe_loss: sum.pe_loss / n,
            pe_loss_transformed: sum.pe_loss_transformed / n,
            total: sum.total / n,
            lambda_id: c.lambda_id,
            lambda_t: c.lambda_t,
            lambda_pe: c.lambda_pe,
        };
        if !self.model.store.tensors().iter().all(Tensor::is_finite) {
            return Err(DipError::Divergence { epoch: self.epoch, loss: losses.total });
        }
        self.epoch += 1;
        Ok(EpochRecord {
            epoch: self.epoch,
            steps: batches.len(),
            lr: lr_start,
            losses,
            rank1: None,
            map: None,
            occluded_rank1: None,
            occluded_map: None,
        })
    }

    pub fn evaluate(&self, sets: &EvalSets<'_>) -> Result<(RankingResult, Option<RankingResult>)> {
        let clean = evaluate(&self.model, sets.query, sets.gallery, sets.camera_filter)?;
        let occluded = match sets.query_occluded {
            Some(q) => Some(evaluate(&self.model, q, sets.gallery, sets.camera_filter)?),
            None => None,
        };
        Ok((clean, occluded))
    }

    /// Trains until `config.epochs`, scoring `eval` every `eval_every` epochs
    /// (and after the last) and handing each record to `on_epoch`.
    pub fn run(
        &mut self,
        data: &Dataset,
        eval: Option<&EvalSets<'_>>,
        eval_every: usize,
        mut on_epoch: impl FnMut(&EpochRecord, &Self) -> Result<()>,
    ) -> Result<Vec<EpochRecord>> {
        let mut records = Vec::new();
        while self.epoch < self.config.epochs {
            let mut rec = self.train_epoch(data)?;
            let due = self.epoch == self.config.epochs || (eval_every > 0 && self.epoch % eval_every == 0);
            if let (Some(sets), true) = (eval, due) {
                let (clean, occluded) = self.evaluate(sets)?;
                rec.rank1 = Some(clean.rank1);
                rec.map = Some(clean.map);
                rec.occluded_rank1 = occluded.as_ref().map(|r| r.rank1);
                rec.occluded_map = occluded.as_ref().map(|r| r.map);
            }
            on_epoch(&rec, self)?;
            records.push(rec);
        }
        Ok(records)
    }
}

/// Rescales all gradients together so their joint L2 norm is at most `max_norm`.
pub fn clip_global_norm<T: Scalar>(grads: &mut [Option<Tensor<T>>], max_norm: f64) -> f64 {
    let norm = grads.iter().flatten().flat_map(|g| g.data()).map(|v| v.as_f64().powi(2)).sum::<f64>().sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = T::of(max_norm / norm);
        for g in grads.iter_mut().flatten() {
            for v in g.data_mut() {
                *v *= s;
            }
        }
    }
    norm
}

fn transform_each<T: Scalar>(p: &Tensor<T>, ks: &[AffineTransform]) -> Tensor<T> {
    let per = p.len() / ks.len().max(1);
    let mut data = Vec::with_capacity(p.len());
    for (chunk, k) in p.data().chunks(per).zip(ks) {
        let t = Tensor::new(&[chunk.len()], chunk.to_vec()).expect("flat chunk");
        data.extend_from_slice(transform_positions(&t, k).data());
    }
    Tensor::new(p.shape(), data).expect("same shape")
}

/// Copies stored parameters into `model`, matching by name and shape.
pub fn load_params<T: Scalar>(model: &mut DipModel<T>, ckpt: &Checkpoint<T>) -> Result<()> {
    if ckpt.params.len() != model.store.len() {
        return Err(DipError::ConfigMismatch(format!(
            "checkpoint has {} tensors, model has {}",
            ckpt.params.len(),
            model.store.len()
        )));
    }
    for (name, t) in &ckpt.params {
        let id = model.store.find(name).ok_or_else(|| DipError::ConfigMismatch(format!("unknown tensor {name}")))?;
        let slot = model.store.get_mut(id);
        if slot.shape() != t.shape() {
            return Err(DipError::ConfigMismatch(format!("{name}: {:?} vs {:?}", t.shape(), slot.shape())));
        }
        slot.data_mut().copy_from_slice(t.data());
    }
    Ok(())
}

/// Model stored in a checkpoint, ready for inference.
pub fn model_from_checkpoint<T: Scalar>(ckpt: &Checkpoint<T>) -> Result<DipModel<T>> {
    let snap: RunSnapshot =
        serde_json::from_str(&ckpt.config).map_err(|e| DipError::Corrupted(format!("stored configuration: {e}")))?;
    let mut model = DipModel::new(snap.model, &mut stream(0, &[TAG_INIT]))?;
    load_params(&mut model, ckpt)?;
    Ok(model)
}
