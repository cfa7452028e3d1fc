//! Whole-epoch behavior of the trainer.

mod common;

use common::{criteria, require};
use dip_core::config::RunConfig;
use dip_core::losses::LossConfig;
use dip_core::training::data::{DatasetSpec, ToySpec, ToySplits};
use dip_core::training::trainer::Trainer;

fn small() -> (RunConfig, ToySplits) {
    let mut cfg = RunConfig::default();
    cfg.toy = ToySpec { base: DatasetSpec { identities: 8, ..DatasetSpec::default() }, train_per_identity: 8, ..ToySpec::default() };
    cfg.train.p_ids = 4;
    let splits = ToySplits::generate(&cfg.toy, 2);
    (cfg, splits)
}

fn params_after_one_epoch(cfg: &RunConfig, splits: &ToySplits) -> (Vec<dip_core::Tensor<f32>>, Vec<dip_core::Tensor<f32>>) {
    let mut t = Trainer::<f32>::new(cfg.model_config(), cfg.train.clone()).unwrap();
    let before = t.model.store.tensors().to_vec();
    t.train_epoch(&splits.train).unwrap();
    (before, t.model.store.tensors().to_vec())
}

#[test]
fn seeded_runs_repeat_and_resume_exactly() {
    require(criteria::determinism_and_resume());
}

#[test]
fn zero_loss_weights_leave_parameters_alone() {
    let (mut cfg, splits) = small();
    cfg.train.loss = LossConfig { lambda_id: 0.0, lambda_t: 0.0, lambda_pe: 0.0, ..LossConfig::default() };
    let (before, after) = params_after_one_epoch(&cfg, &splits);
    assert_eq!(before, after);
}

#[test]
fn zero_learning_rate_leaves_parameters_alone() {
    let (mut cfg, splits) = small();
    cfg.train.lr0 = 0.0;
    let (before, after) = params_after_one_epoch(&cfg, &splits);
    assert_eq!(before, after);
}

#[test]
fn default_run_halves_total_loss_within_fifty_epochs() {
    let cfg = RunConfig::default();
    let splits = ToySplits::generate(&cfg.toy, cfg.data_seed);
    let mut t = Trainer::<f32>::new(cfg.model_config(), cfg.train.clone()).unwrap();
    let first = t.train_epoch(&splits.train).unwrap().losses.total;
    let mut last = first;
    for _ in 1..50 {
        last = t.train_epoch(&splits.train).unwrap().losses.total;
    }
    assert!(last <= 0.5 * first, "total loss {first:.4} -> {last:.4}");
}
