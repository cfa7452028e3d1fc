//! Quick acceptance checks shared by the focused suites and the acceptance target.
//! Each returns a one-line detail on success or the first violation.

use std::time::Instant;

use dip_core::autograd::Graph;
use dip_core::config::RunConfig;
use dip_core::encoder::PatchConfig;
use dip_core::eval::{cmc_map, distance_matrix, GalleryIndex, Protocol};
use dip_core::geometry::{sample_affine, transform_positions, AffineConfig, AffineTransform};
use dip_core::implicit_position::{implicit_position, implicit_positions, PatchGrid, CORRELATION_EPS};
use dip_core::losses::{mine_batch_hard, part_distance_matrix};
use dip_core::training::augment::EraseConfig;
use dip_core::training::data::{DatasetSpec, ToySpec, ToySplits};
use dip_core::training::sampler::pk_sample;
use dip_core::training::trainer::Trainer;
use dip_core::Tensor;
use rand::RngExt;

use super::grad_cases::{worst_error, Term};
use super::oracles::{self, Parts};

pub type Verdict = std::result::Result<String, String>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> std::result::Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

pub fn gradient_suite() -> Verdict {
    let start = Instant::now();
    let mut worst = (0.0f64, 0.0f64);
    for term in [Term::Id, Term::Triplet, Term::Pe, Term::Total, Term::Position] {
        let e64 = worst_error::<f64>(term);
        let e32 = worst_error::<f32>(term);
        ensure(e64 < 1e-5, || format!("{term:?} 64-bit error {e64:e}"))?;
        ensure(e32 < 1e-3, || format!("{term:?} 32-bit error {e32:e}"))?;
        worst = (worst.0.max(e64), worst.1.max(e32));
    }
    let secs = start.elapsed().as_secs_f64();
    ensure(secs < 120.0, || format!("took {secs:.1}s"))?;
    Ok(format!("worst 64-bit {:.1e}, 32-bit {:.1e}, {secs:.1}s", worst.0, worst.1))
}

pub fn patch_count() -> Verdict {
    let count = |stride| PatchConfig { height: 256, width: 128, patch: 16, stride, ..PatchConfig::default() }.num_patches();
    let (a, b) = (count(16), count(12));
    ensure(a == 128 && b == 210, || format!("got {a} and {b}"))?;
    Ok(format!("S=16 gives {a}, S=12 gives {b}"))
}

pub fn implicit_invariants() -> Verdict {
    let mut rng = oracles::rng(71);
    let mut sets = 0;
    while sets < 1000 {
        let grid = PatchGrid::new(rng.random_range(1..17), rng.random_range(1..9));
        let (b, m, d) = (rng.random_range(1..3), rng.random_range(1..5), rng.random_range(1..9));
        let scale = 10f64.powf(rng.random_range(-2.0..2.0));
        let dips = Tensor::from_fn(&[b, m, d], |_| scale * rng.random_range(-1.0..1.0));
        let patches = Tensor::from_fn(&[b, grid.len(), d], |_| scale * rng.random_range(-1.0..1.0));
        let (w, p) = implicit_positions::<f64>(&dips, &patches, &grid, CORRELATION_EPS).map_err(|e| e.to_string())?;
        for (k, row) in w.data().chunks(grid.len()).enumerate() {
            let total: f64 = row.iter().sum();
            ensure((total - 1.0).abs() < 1e-6, || format!("W sums to {total}"))?;
            let (x, y) = (p.data()[2 * k], p.data()[2 * k + 1]);
            let (lo_x, lo_y) = (1.0 / grid.rows as f64, 1.0 / grid.cols as f64);
            let tol = 1e-12;
            ensure(x >= lo_x - tol && x <= 1.0 + tol && y >= lo_y - tol && y <= 1.0 + tol, || {
                format!("p = ({x}, {y}) outside the {}x{} hull", grid.rows, grid.cols)
            })?;
            sets += 1;
        }
    }

    let grid = PatchGrid::new(16, 8);
    let patches = Tensor::from_fn(&[1, grid.len(), 3], |i| [0.2, -0.4, 0.7][i % 3]);
    let dips = Tensor::new(&[1, 1, 3], vec![1.0, 2.0, 3.0]).unwrap();
    let (_, p) = implicit_positions::<f64>(&dips, &patches, &grid, CORRELATION_EPS).map_err(|e| e.to_string())?;
    let (ux, uy) = (p.data()[0], p.data()[1]);
    ensure((ux - 0.53125).abs() < 1e-9 && (uy - 0.5625).abs() < 1e-9, || format!("uniform gives ({ux}, {uy})"))?;

    for idx in 0..grid.len() {
        let w = Tensor::from_fn(&[grid.len()], |i| if i == idx { 1.0 } else { 0.0 });
        let p = implicit_position::<f64>(&w, &grid).map_err(|e| e.to_string())?;
        let (ex, ey) = grid.location(idx / grid.cols + 1, idx % grid.cols + 1);
        ensure((p.x - ex).abs() < 1e-9 && (p.y - ey).abs() < 1e-9, || format!("one-hot {idx} gives ({}, {})", p.x, p.y))?;
    }
    Ok(format!("{sets} sets; uniform 16x8 ({ux}, {uy}); {} one-hot maps", grid.len()))
}

/// Small default model on a few identities with augmentation switched off.
fn fixed_trainer(affine: AffineConfig) -> (Trainer<f64>, ToySplits) {
    let mut cfg = RunConfig::default();
    cfg.toy = ToySpec {
        base: DatasetSpec { identities: 4, ..DatasetSpec::default() },
        train_per_identity: 4,
        ..ToySpec::default()
    };
    cfg.train.p_ids = 4;
    cfg.train.erase = EraseConfig { prob: 0.0, ..EraseConfig::default() };
    cfg.train.affine = affine;
    let splits = ToySplits::generate(&cfg.toy, 5);
    (Trainer::new(cfg.model_config(), cfg.train.clone()).expect("valid config"), splits)
}

pub fn equivariance() -> Verdict {
    let fixed = AffineConfig { translate: 0.0, scale_min: 1.0, scale_max: 1.0, hflip_prob: 0.0 };
    let (trainer, splits) = fixed_trainer(fixed.clone());
    let batch = pk_sample(&splits.train.labels(), 4, 4, &mut oracles::rng(3)).map_err(|e| e.to_string())?;
    let (losses, _) = trainer.batch_gradients(&splits.train, &batch, 0).map_err(|e| e.to_string())?;
    ensure(losses.pe_loss > 0.0 && losses.pe_loss == losses.pe_loss_transformed, || {
        format!("identity K: L_PE {} vs L'_PE {}", losses.pe_loss, losses.pe_loss_transformed)
    })?;

    let mut rng = oracles::rng(9);
    let translate = AffineConfig { translate: 0.2, ..fixed };
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let k = sample_affine(&mut rng, &translate);
        let t = (k.k[0][2], k.k[1][2]);
        ensure(k == AffineTransform::translation(t.0, t.1), || format!("sampled {k:?} is not a pure translation"))?;
        let p = Tensor::from_fn(&[3, 4, 2], |_| rng.random_range(0.0..1.0));
        let moved = transform_positions::<f64>(&p, &k);
        for (a, b) in p.data().chunks(2).zip(moved.data().chunks(2)) {
            worst = worst.max((b[0] - a[0] - t.0).abs()).max((b[1] - a[1] - t.1).abs());
        }
    }
    ensure(worst < 1e-9, || format!("translation residual {worst:e}"))?;
    Ok(format!("L_PE = L'_PE = {:.6}; translation residual {worst:.1e}", losses.pe_loss))
}

pub fn metric_oracles() -> Verdict {
    let mut rng = oracles::rng(11);
    let queries: Vec<Parts> = (0..3).map(|_| Parts::random(&mut rng, 4, 6)).collect();
    let gallery: Vec<Parts> = (0..5).map(|_| Parts::random(&mut rng, 4, 6)).collect();
    let index = |v: &[Parts]| {
        GalleryIndex::<f64>::new(v.iter().map(Parts::to_set).collect(), vec![0; v.len()], vec![0; v.len()]).unwrap()
    };
    let dist = distance_matrix(&index(&queries), &index(&gallery)).map_err(|e| e.to_string())?;
    let mut worst = 0.0f64;
    for (q, qp) in queries.iter().enumerate() {
        for (g, gp) in gallery.iter().enumerate() {
            worst = worst.max((dist.data()[q * 5 + g] - oracles::part_distance(qp, gp)).abs());
        }
    }
    ensure(worst < 1e-6, || format!("3x5 distance error {worst:e}"))?;

    let all: Vec<Parts> = queries.iter().chain(&gallery).cloned().collect();
    let g = Graph::<f64>::new();
    let parts = g.constant(Tensor::from_fn(&[8, 4, 6], |i| all[i / 24].dips[(i / 6) % 4][i % 6]));
    let weights = g.constant(Tensor::from_fn(&[8, 4], |i| all[i / 4].weights[i % 4]));
    let batch = g.value(part_distance_matrix(&g, parts, weights).map_err(|e| e.to_string())?);
    for a in 0..8 {
        for b in 0..8 {
            let e = (batch.data()[a * 8 + b] - oracles::part_distance(&all[a], &all[b])).abs();
            ensure(e < 1e-6, || format!("batch distance ({a}, {b}) error {e:e}"))?;
        }
    }

    let (nq, ng) = (5, 20);
    let q_meta: Vec<(usize, usize)> = (0..nq).map(|q| (q, 0)).collect();
    let mut g_meta: Vec<(usize, usize)> = (0..ng).map(|_| (rng.random_range(0..nq), rng.random_range(0..3))).collect();
    for q in 0..nq {
        g_meta[q] = (q, 1);
    }
    // coarse values force ties so the index tie-break is exercised
    let d = Tensor::from_fn(&[nq, ng], |_| rng.random_range(0..8) as f64 / 4.0);
    for filter in [true, false] {
        let (gl, gc): (Vec<usize>, Vec<usize>) = g_meta.iter().cloned().unzip();
        let (ql, qc): (Vec<usize>, Vec<usize>) = q_meta.iter().cloned().unzip();
        let proto = Protocol {
            query_labels: &ql,
            query_cameras: &qc,
            gallery_labels: &gl,
            gallery_cameras: &gc,
            camera_filter: filter,
        };
        let r = cmc_map(&d, &proto).map_err(|e| e.to_string())?;
        let mut ap_sum = 0.0;
        let mut hits = vec![0usize; ng];
        for q in 0..nq {
            let row = &d.data()[q * ng..(q + 1) * ng];
            let ap = oracles::average_precision(row, q_meta[q], &g_meta, filter);
            ensure(ap.to_bits() == r.average_precision[q].to_bits(), || {
                format!("query {q} AP {} vs oracle {ap}", r.average_precision[q])
            })?;
            ap_sum += ap;
            for h in &mut hits[oracles::first_hit(row, q_meta[q], &g_meta, filter) - 1..] {
                *h += 1;
            }
        }
        ensure((ap_sum / nq as f64).to_bits() == r.map.to_bits(), || format!("mAP {} vs oracle", r.map))?;
        for (k, &h) in hits.iter().enumerate() {
            ensure(r.cmc[k] == h as f64 / nq as f64, || format!("CMC@{} {} vs oracle", k + 1, r.cmc[k]))?;
        }
    }

    let hand = Tensor::new(&[1, 4], vec![0.1, 0.2, 0.3, 0.4]).unwrap();
    let r = cmc_map(
        &hand,
        &Protocol {
            query_labels: &[1],
            query_cameras: &[0],
            gallery_labels: &[1, 2, 1, 3],
            gallery_cameras: &[1, 1, 1, 1],
            camera_filter: true,
        },
    )
    .map_err(|e| e.to_string())?;
    ensure(r.map == (1.0 + 2.0 / 3.0) / 2.0 && (r.map - 0.8333).abs() < 1e-4, || format!("hand case AP {}", r.map))?;
    Ok(format!("3x5 error {worst:.1e}; 5x20 AP bit-exact with and without filtering; hand AP {:.4}", r.map))
}

pub fn mining_oracle() -> Verdict {
    let mut rng = oracles::rng(13);
    for batch in 0..100 {
        let (p, k) = if batch % 2 == 0 { (4, 2) } else { (2, 4) };
        let labels: Vec<usize> = (0..p * k).map(|i| i / k).collect();
        let parts: Vec<Parts> = (0..p * k).map(|_| Parts::random(&mut rng, 3, 4)).collect();
        let dist: Vec<Vec<f64>> = parts.iter().map(|a| parts.iter().map(|b| oracles::part_distance(a, b)).collect()).collect();
        let flat = Tensor::new(&[p * k, p * k], dist.iter().flatten().copied().collect()).unwrap();
        let mined: Vec<(usize, usize, usize)> = mine_batch_hard(&flat, &labels)
            .map_err(|e| e.to_string())?
            .iter()
            .map(|t| (t.anchor, t.positive, t.negative))
            .collect();
        let expected = oracles::exhaustive_triplets(&dist, &labels);
        ensure(mined == expected, || format!("batch {batch}: mined {mined:?}, exhaustive {expected:?}"))?;
    }
    Ok("100 batches of 8 agree".into())
}

/// Identical seeds give identical logs; resuming from a checkpoint reproduces
/// the next epoch bit for bit.
pub fn determinism_and_resume() -> Verdict {
    let mut cfg = RunConfig::default();
    cfg.toy = ToySpec { base: DatasetSpec { identities: 8, ..DatasetSpec::default() }, train_per_identity: 8, ..ToySpec::default() };
    cfg.train.epochs = 3;
    cfg.train.p_ids = 4;
    let splits = ToySplits::generate(&cfg.toy, 1);
    let run = || -> dip_core::Result<(Vec<String>, Vec<dip_core::training::checkpoint::Checkpoint<f32>>)> {
        let mut t = Trainer::<f32>::new(cfg.model_config(), cfg.train.clone())?;
        let (mut logs, mut ckpts) = (Vec::new(), Vec::new());
        for _ in 0..cfg.train.epochs {
            logs.push(t.train_epoch(&splits.train)?.to_json_line());
            ckpts.push(t.checkpoint());
        }
        Ok((logs, ckpts))
    };
    let (a, ckpts) = run().map_err(|e| e.to_string())?;
    let (b, _) = run().map_err(|e| e.to_string())?;
    ensure(a == b, || "two runs with one seed logged different metrics".into())?;

    let bytes = ckpts[0].to_bytes();
    let restored = dip_core::training::checkpoint::Checkpoint::<f32>::from_bytes(&bytes).map_err(|e| e.to_string())?;
    let mut resumed = Trainer::from_checkpoint(&restored).map_err(|e| e.to_string())?;
    let mut tail = Vec::new();
    for _ in 1..cfg.train.epochs {
        tail.push(resumed.train_epoch(&splits.train).map_err(|e| e.to_string())?.to_json_line());
    }
    ensure(tail == a[1..], || format!("resumed {tail:?}\nuninterrupted {:?}", &a[1..]))?;
    let last = resumed.checkpoint();
    ensure(last.params == ckpts[2].params && last.velocity == ckpts[2].velocity, || {
        "resumed parameters drifted from the uninterrupted run".into()
    })?;
    Ok(format!("{} epochs replayed; resume after epoch 1 matches bit for bit", cfg.train.epochs))
}
