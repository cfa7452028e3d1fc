//! Configuration sweeps: loss combinations, DiP count, weighting and the
//! transformed branch.

use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{DipError, Result};
use crate::eval::RankingResult;
use crate::training::data::ToySplits;
use crate::training::trainer::{EpochRecord, EvalSets, Trainer};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Axis {
    Losses,
    DipCount,
    Weighting,
    Transform,
}

impl FromStr for Axis {
    type Err = DipError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "losses" => Ok(Axis::Losses),
            "dip-count" => Ok(Axis::DipCount),
            "weighting" => Ok(Axis::Weighting),
            "transform" => Ok(Axis::Transform),
            _ => Err(DipError::Config(format!(
                "unknown ablation axis `{s}` (expected losses, dip-count, weighting or transform)"
            ))),
        }
    }
}

pub const DIP_COUNTS: [usize; 5] = [0, 4, 8, 12, 16];

/// Labeled configurations of one sweep, derived from `base`.
pub fn variants(axis: Axis, base: &RunConfig) -> Vec<(String, RunConfig)> {
    let with = |f: &dyn Fn(&mut RunConfig)| {
        let mut c = base.clone();
        f(&mut c);
        c
    };
    match axis {
        Axis::Losses => vec![
            (
                "0: id + triplet (cls, euclidean)".into(),
                with(&|c| {
                    c.patch.dips = 0;
                    c.train.loss.lambda_pe = 0.0;
                    c.train.transform = false;
                }),
            ),
            (
                "1: + part-based triplet".into(),
                with(&|c| {
                    c.train.loss.lambda_pe = 0.0;
                    c.train.transform = false;
                }),
            ),
            ("2: + position equivariance".into(), with(&|c| c.train.transform = false)),
            ("3: + transformed image".into(), base.clone()),
        ],
        Axis::DipCount => DIP_COUNTS.iter().map(|&m| (format!("dips = {m}"), with(&|c| c.patch.dips = m))).collect(),
        Axis::Weighting => vec![
            ("weighting off".into(), with(&|c| c.weighting = false)),
            ("weighting on".into(), with(&|c| c.weighting = true)),
        ],
        Axis::Transform => vec![
            ("transform off".into(), with(&|c| c.train.transform = false)),
            ("transform on".into(), with(&|c| c.train.transform = true)),
        ],
    }
}

/// Trained model with its clean and occluded retrieval scores.
pub struct RunOutcome {
    pub trainer: Trainer<f32>,
    pub records: Vec<EpochRecord>,
    pub clean: RankingResult,
    pub occluded: RankingResult,
}

/// Trains `cfg` on `splits.train` and scores the query and occluded-query sets.
pub fn train_and_score(
    cfg: &RunConfig,
    splits: &ToySplits,
    on_epoch: impl FnMut(&EpochRecord, &Trainer<f32>) -> Result<()>,
) -> Result<RunOutcome> {
    cfg.validate()?;
    let mut trainer = Trainer::<f32>::new(cfg.model_config(), cfg.train.clone())?;
    let sets = EvalSets {
        query: &splits.query,
        gallery: &splits.gallery,
        query_occluded: Some(&splits.query_occluded),
        camera_filter: cfg.camera_filter,
    };
    let records = trainer.run(&splits.train, Some(&sets), cfg.eval_every, on_epoch)?;
    let (clean, occluded) = trainer.evaluate(&sets)?;
    let occluded = occluded.expect("occluded queries were supplied");
    Ok(RunOutcome { trainer, records, clean, occluded })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    pub seed: u64,
    pub rank1: f64,
    pub map: f64,
    pub occluded_rank1: f64,
    pub occluded_map: f64,
}

/// Runs every variant of `axis` once per seed.
pub fn run_ablation(
    axis: Axis,
    base: &RunConfig,
    seeds: &[u64],
    splits: &ToySplits,
    mut progress: impl FnMut(&AblationRow),
) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::new();
    for (label, cfg) in variants(axis, base) {
        for &seed in seeds {
            let mut c = cfg.clone();
            c.train.seed = seed;
            let out = train_and_score(&c, splits, |_, _| Ok(()))?;
            let row = AblationRow {
                label: label.clone(),
                seed,
                rank1: out.clean.rank1,
                map: out.clean.map,
                occluded_rank1: out.occluded.rank1,
                occluded_map: out.occluded.map,
            };
            progress(&row);
            rows.push(row);
        }
    }
    Ok(rows)
}

/// Seed-averaged metrics per label, in first-seen order.
pub fn summarize(rows: &[AblationRow]) -> Vec<AblationRow> {
    let mut out: Vec<(AblationRow, usize)> = Vec::new();
    for r in rows {
        match out.iter_mut().find(|(s, _)| s.label == r.label) {
            Some((s, n)) => {
                s.rank1 += r.rank1;
                s.map += r.map;
                s.occluded_rank1 += r.occluded_rank1;
                s.occluded_map += r.occluded_map;
                *n += 1;
            }
            None => out.push((r.clone(), 1)),
        }
    }
    out.into_iter()
        .map(|(mut s, n)| {
            let n = n as f64;
            s.rank1 /= n;
            s.map /= n;
            s.occluded_rank1 /= n;
            s.occluded_map /= n;
            s
        })
        .collect()
}

/// Markdown table of seed-averaged results.
pub fn table(rows: &[AblationRow]) -> String {
    let mut out = String::from("| configuration | R1 | mAP | occluded R1 | occluded mAP |\n|---|---|---|---|---|\n");
    for r in summarize(rows) {
        let _ = writeln!(
            out,
            "| {} | {:.3} | {:.3} | {:.3} | {:.3} |",
            r.label, r.rank1, r.map, r.occluded_rank1, r.occluded_map
        );
    }
    out
}
