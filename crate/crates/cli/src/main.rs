use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use dip_core::ablation::{self, Axis};
use dip_core::config::RunConfig;
use dip_core::eval::evaluate;
use dip_core::training::checkpoint::Checkpoint;
use dip_core::training::data::{Dataset, ToySplits};
use dip_core::training::trainer::{model_from_checkpoint, EvalSets, Trainer};
use dip_core::{visualize, DipError};

const EXIT_IO: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_DATA: u8 = 3;
const EXIT_DIVERGENCE: u8 = 4;
const EXIT_MISMATCH: u8 = 5;

/// Part-token metric learning on a small vision transformer.
#[derive(Parser, Debug)]
#[command(name = "dip", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render the synthetic train/query/gallery splits to disk.
    GenData {
        #[command(flatten)]
        run: RunArgs,
    },
    /// Train a model and write checkpoints plus a JSON-lines metrics log.
    Train {
        #[command(flatten)]
        run: RunArgs,
        /// Render the dataset first when the data directory is missing.
        #[arg(long)]
        gen_data: bool,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long, value_name = "FILE")]
        resume: Option<PathBuf>,
    },
    /// Score a checkpoint with CMC Rank-1 and mAP.
    Eval {
        #[command(flatten)]
        ckpt: CheckpointArgs,
        /// Query split to rank against the gallery.
        #[arg(long, default_value = "query")]
        split: String,
        /// Also write the distance matrix as CSV.
        #[arg(long)]
        distances: bool,
    },
    /// Export score maps, positions and weightings per image.
    Visualize {
        #[command(flatten)]
        ckpt: CheckpointArgs,
        #[arg(long, default_value = "query")]
        split: String,
        /// Export at most this many images.
        #[arg(long, value_name = "N")]
        limit: Option<usize>,
    },
    /// Sweep one ablation axis and print a comparison table.
    Ablate {
        #[command(flatten)]
        run: RunArgs,
        /// losses, dip-count, weighting or transform.
        #[arg(long)]
        axis: String,
        /// Comma-separated training seeds.
        #[arg(long, default_value = "0", value_delimiter = ',')]
        seeds: Vec<u64>,
    },
}

/// Overrides applied on top of the defaults and the config file.
#[derive(Args, Debug, Default)]
struct RunArgs {
    /// Flat `key = value` configuration file.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Run seed [default: 0]
    #[arg(long)]
    seed: Option<u64>,
    /// Training epochs [default: 200]
    #[arg(long)]
    epochs: Option<usize>,
    /// Initial learning rate [default: 0.04]
    #[arg(long)]
    lr: Option<f64>,
    /// Batch size, a multiple of the 8 identities per batch [default: 32]
    #[arg(long)]
    batch: Option<usize>,
    /// DiP tokens; 0 trains the class-token baseline without the transformed branch [default: 4]
    #[arg(long, value_name = "M")]
    dips: Option<usize>,
    /// Patch stride [default: 8]
    #[arg(long, value_name = "S")]
    stride: Option<usize>,
    /// ID loss weight [default: 1]
    #[arg(long)]
    lambda_id: Option<f64>,
    /// Triplet loss weight [default: 1]
    #[arg(long)]
    lambda_t: Option<f64>,
    /// Position-equivariance loss weight [default: 1]
    #[arg(long)]
    lambda_pe: Option<f64>,
    /// Triplet margin [default: 0.3]
    #[arg(long)]
    margin: Option<f64>,
    /// Skip the transformed-image branch.
    #[arg(long)]
    no_transform: bool,
    /// Fix every DiP weighting at 1.
    #[arg(long)]
    no_weighting: bool,
    /// Keep same-identity same-camera gallery entries.
    #[arg(long)]
    no_camera_filter: bool,
    /// Dataset root [default: data]
    #[arg(long, value_name = "DIR")]
    data: Option<PathBuf>,
    /// Output directory [default: runs/default]
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

impl RunArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        let mut set = |key: &str, v: Option<String>| -> Result<()> {
            if let Some(v) = v {
                cfg.set(key, &v)?;
            }
            Ok(())
        };
        set("seed", self.seed.map(|v| v.to_string()))?;
        set("epochs", self.epochs.map(|v| v.to_string()))?;
        set("lr", self.lr.map(|v| v.to_string()))?;
        set("dips", self.dips.map(|v| v.to_string()))?;
        set("stride", self.stride.map(|v| v.to_string()))?;
        set("lambda_id", self.lambda_id.map(|v| v.to_string()))?;
        set("lambda_t", self.lambda_t.map(|v| v.to_string()))?;
        set("lambda_pe", self.lambda_pe.map(|v| v.to_string()))?;
        set("margin", self.margin.map(|v| v.to_string()))?;
        set("data_dir", self.data.as_ref().map(|p| p.display().to_string()))?;
        set("out_dir", self.out.as_ref().map(|p| p.display().to_string()))?;
        if let Some(b) = self.batch {
            cfg.set_batch(b)?;
        }
        if self.no_transform {
            cfg.train.transform = false;
        }
        if self.no_weighting {
            cfg.weighting = false;
        }
        if self.no_camera_filter {
            cfg.camera_filter = false;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args, Debug)]
struct CheckpointArgs {
    #[arg(long, value_name = "FILE")]
    checkpoint: PathBuf,
    /// Dataset root [default: data]
    #[arg(long, value_name = "DIR", default_value = "data")]
    data: PathBuf,
    /// Keep same-identity same-camera gallery entries.
    #[arg(long)]
    no_camera_filter: bool,
    /// Output directory.
    #[arg(long, value_name = "DIR", default_value = "eval")]
    out: PathBuf,
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<DipError>() {
        Some(DipError::Config(_)) => EXIT_CONFIG,
        Some(DipError::InsufficientData(_)) => EXIT_DATA,
        Some(DipError::Divergence { .. } | DipError::NonFinite(_)) => EXIT_DIVERGENCE,
        Some(DipError::ConfigMismatch(_) | DipError::VersionMismatch { .. } | DipError::Corrupted(_)) => EXIT_MISMATCH,
        _ => EXIT_IO,
    }
}

fn configure_threads() -> Result<()> {
    if let Ok(v) = std::env::var("DIP_THREADS") {
        let n: usize = v.parse().map_err(|_| DipError::Config(format!("DIP_THREADS must be a positive integer, got `{v}`")))?;
        if n == 0 {
            bail!(DipError::Config("DIP_THREADS must be at least 1".into()));
        }
        dip_core::set_threads(n)?;
    }
    Ok(())
}

fn load_splits(root: &Path) -> Result<ToySplits> {
    ToySplits::load(root).with_context(|| format!("loading dataset from {}", root.display()))
}

fn load_split(root: &Path, name: &str) -> Result<Dataset> {
    let dir = root.join(name);
    if !dir.join("labels.csv").is_file() {
        bail!(DipError::InsufficientData(format!("missing split {}", dir.display())));
    }
    Ok(Dataset::load(&dir)?)
}

fn gen_data(cfg: &RunConfig) -> Result<()> {
    let splits = ToySplits::generate(&cfg.toy, cfg.data_seed);
    splits.save(&cfg.data_dir).with_context(|| format!("writing {}", cfg.data_dir.display()))?;
    println!(
        "wrote {} train, {} query, {} gallery images to {}",
        splits.train.len(),
        splits.query.len(),
        splits.gallery.len(),
        cfg.data_dir.display()
    );
    Ok(())
}

fn train(cfg: &RunConfig, generate: bool, resume: Option<&Path>) -> Result<()> {
    if generate && !cfg.data_dir.join("train").is_dir() {
        gen_data(cfg)?;
    }
    let splits = load_splits(&cfg.data_dir)?;
    let out = &cfg.out_dir;
    fs::create_dir_all(out)?;
    fs::write(out.join("config.txt"), cfg.to_text())?;

    let mut trainer = match resume {
        Some(path) => {
            let t = Trainer::<f32>::from_checkpoint(&Checkpoint::load(path)?)?;
            let wanted = (cfg.model_config(), cfg.train.clone());
            if (t.model.config.clone(), t.config.clone()) != wanted {
                bail!(DipError::ConfigMismatch(format!("{} was written with a different configuration", path.display())));
            }
            t
        }
        None => Trainer::<f32>::new(cfg.model_config(), cfg.train.clone())?,
    };
    let sets = EvalSets {
        query: &splits.query,
        gallery: &splits.gallery,
        query_occluded: Some(&splits.query_occluded),
        camera_filter: cfg.camera_filter,
    };
    let log_path = out.join("metrics.jsonl");
    let mut log = fs::OpenOptions::new().create(true).append(true).open(&log_path)?;
    if resume.is_none() {
        log.set_len(0)?;
    }
    let every = cfg.checkpoint_every;
    let total = cfg.train.epochs;
    trainer.run(&splits.train, Some(&sets), cfg.eval_every, |rec, t| {
        writeln!(log, "{}", rec.to_json_line())?;
        if let (Some(r1), Some(map)) = (rec.rank1, rec.map) {
            println!("epoch {:>4}  loss {:.4}  R1 {:.3}  mAP {:.3}", rec.epoch, rec.losses.total, r1, map);
        }
        if every > 0 && rec.epoch % every == 0 && rec.epoch != total {
            t.checkpoint().save(&out.join(format!("epoch{:04}.ckpt", rec.epoch)))?;
        }
        Ok(())
    })?;
    trainer.checkpoint().save(&out.join("final.ckpt"))?;
    let (clean, occluded) = trainer.evaluate(&sets)?;
    fs::write(out.join("result.json"), clean.to_json())?;
    if let Some(o) = occluded {
        fs::write(out.join("result_occluded.json"), o.to_json())?;
    }
    println!("final  R1 {:.3}  mAP {:.3}  ({})", clean.rank1, clean.map, out.display());
    Ok(())
}

fn eval(args: &CheckpointArgs, split: &str, distances: bool) -> Result<()> {
    let model = model_from_checkpoint::<f32>(&Checkpoint::load(&args.checkpoint)?)?;
    let query = load_split(&args.data, split)?;
    let gallery = load_split(&args.data, "gallery")?;
    let result = evaluate(&model, &query, &gallery, !args.no_camera_filter)?;
    let json = result.to_json();
    fs::create_dir_all(&args.out)?;
    fs::write(args.out.join("eval.json"), &json)?;
    if distances {
        fs::write(args.out.join("distances.csv"), result.distances_csv())?;
    }
    println!("{json}");
    Ok(())
}

fn visualize_cmd(args: &CheckpointArgs, split: &str, limit: Option<usize>) -> Result<()> {
    let model = model_from_checkpoint::<f32>(&Checkpoint::load(&args.checkpoint)?)?;
    let mut data = load_split(&args.data, split)?;
    if let Some(n) = limit {
        data.samples.truncate(n);
    }
    let files = visualize::export(&model, &data, &args.out)?;
    println!("wrote {} files to {}", files.len(), args.out.display());
    Ok(())
}

fn ablate(cfg: &RunConfig, axis: &str, seeds: &[u64]) -> Result<()> {
    let axis: Axis = axis.parse()?;
    let splits = if cfg.data_dir.join("train").is_dir() {
        load_splits(&cfg.data_dir)?
    } else {
        ToySplits::generate(&cfg.toy, cfg.data_seed)
    };
    fs::create_dir_all(&cfg.out_dir)?;
    let mut log = fs::File::create(cfg.out_dir.join("ablation.jsonl"))?;
    let rows = ablation::run_ablation(axis, cfg, seeds, &splits, |row| {
        println!("{:<36} seed {:<3} R1 {:.3}  mAP {:.3}", row.label, row.seed, row.rank1, row.map);
        let _ = writeln!(log, "{}", serde_json::to_string(row).unwrap_or_default());
    })?;
    let table = ablation::table(&rows);
    fs::write(cfg.out_dir.join("ablation.md"), &table)?;
    print!("{table}");
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    configure_threads()?;
    match cli.command {
        Command::GenData { run } => gen_data(&run.resolve()?),
        Command::Train { run, gen_data, resume } => train(&run.resolve()?, gen_data, resume.as_deref()),
        Command::Eval { ckpt, split, distances } => eval(&ckpt, &split, distances),
        Command::Visualize { ckpt, split, limit } => visualize_cmd(&ckpt, &split, limit),
        Command::Ablate { run, axis, seeds } => ablate(&run.resolve()?, &axis, &seeds),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
