//! Command-line interface.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::checkpoint::Checkpoint;
use crate::config::{Profile, Strategy, TrainConfig};
use crate::data::{
    generate_synthetic_dataset, load_clip_features, load_manifest, sample_clips, SynthConfig,
    FEATURES_DIR, MANIFEST_FILE,
};
use crate::dataset::PreparedDataset;
use crate::error::{Error, Result};
use crate::inference::{evaluate, load_retriever, mask_curves, write_predictions, Retriever};
use crate::trainer::{train, METRICS_FILE};

#[derive(Debug, Parser)]
#[command(name = "mcmt", version, about = "Weakly supervised video moment retrieval")]
pub struct Cli {
    /// TOML configuration file; keys override the selected profile.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Built-in hyperparameter profile.
    #[arg(long, global = true, value_parser = ["charades", "activitynet", "synthetic"])]
    pub profile: Option<String>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Top-1 selection strategy at inference.
    #[arg(long, global = true, value_parser = ["vote", "attn"])]
    pub strategy: Option<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train both models and write per-epoch checkpoints.
    Train(TrainArgs),
    /// Score a checkpoint on the evaluation split of a manifest.
    Eval(EvalArgs),
    /// Retrieve the moment of one query in one video.
    Infer(InferArgs),
    /// Write a planted-moment synthetic dataset.
    Synth(SynthArgs),
    /// Dump the proposal masks of one query as columnar text.
    InspectMasks(InspectArgs),
}

#[derive(Debug, Args)]
pub struct DataDir {
    /// Directory with manifest.jsonl, features/ and embeddings.txt.
    #[arg(long, env = "MCMT_DATA_DIR")]
    pub data_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataDir,
    /// Output directory for checkpoints and the metrics log.
    #[arg(long, required_unless_present = "dry_run")]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Print the effective configuration and exit.
    #[arg(long)]
    pub dry_run: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    pub data: DataDir,
    /// Manifest to evaluate; defaults to the data directory's.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_values_t = [0.3, 0.5, 0.7])]
    pub thresholds: Vec<f64>,
    /// Where to write the JSONL prediction dump.
    #[arg(long)]
    pub predictions: Option<PathBuf>,
    /// Count a vote only when IoU exceeds this value.
    #[arg(long)]
    pub vote_threshold: Option<f64>,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    pub data: DataDir,
    #[arg(long)]
    pub video_id: String,
    #[arg(long)]
    pub query: String,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub n_train: Option<usize>,
    #[arg(long)]
    pub n_test: Option<usize>,
    /// Noise amplitude on moment clips.
    #[arg(long)]
    pub sigma: Option<f64>,
    /// Noise amplitude on clips outside the moment.
    #[arg(long)]
    pub background: Option<f64>,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    pub data: DataDir,
    #[arg(long)]
    pub video_id: String,
    #[arg(long)]
    pub query: String,
    #[arg(long)]
    pub out: PathBuf,
}

impl Cli {
    fn profile(&self) -> Result<Option<Profile>> {
        self.profile.as_deref().map(str::parse).transpose()
    }

    fn strategy(&self) -> Result<Option<Strategy>> {
        self.strategy.as_deref().map(str::parse).transpose()
    }

    /// Profile, then config file, then flags.
    fn train_config(&self) -> Result<TrainConfig> {
        let base = self.profile()?.unwrap_or(Profile::Synthetic);
        let mut cfg = match &self.config {
            Some(path) => TrainConfig::from_file(path, base)?,
            None => TrainConfig::profile(base),
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(s) = self.strategy()? {
            cfg.inference_strategy = s;
        }
        cfg.normalized().validated()
    }

    /// A checkpoint's configuration with inference-only flag overrides. An
    /// explicit `--config` or `--profile` must describe the same architecture.
    fn checkpoint_config(&self, ck: &Checkpoint) -> Result<TrainConfig> {
        if self.config.is_some() || self.profile.is_some() {
            ck.check_compatible(&self.train_config()?)?;
        }
        let mut cfg = ck.config.clone();
        if let Some(s) = self.strategy()? {
            cfg.inference_strategy = s;
        }
        Ok(cfg)
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::Train(a) => cmd_train(&cli, a),
        Command::Eval(a) => cmd_eval(&cli, a),
        Command::Infer(a) => cmd_infer(&cli, a),
        Command::Synth(a) => cmd_synth(&cli, a),
        Command::InspectMasks(a) => cmd_inspect(&cli, a),
    }
}

fn cmd_train(cli: &Cli, a: &TrainArgs) -> Result<()> {
    let mut cfg = cli.train_config()?;
    if let Some(e) = a.epochs {
        cfg.epochs = e;
    }
    if a.dry_run {
        print!("{}", cfg.to_toml());
        return Ok(());
    }
    let out = a.out.as_deref().expect("clap requires --out without --dry-run");
    let data = PreparedDataset::load(&a.data.data_dir, &cfg)?;
    log::info!(
        "{} training and {} evaluation queries over {} videos",
        data.train.len(),
        data.eval.len(),
        data.videos.len()
    );
    let outcome = train(&cfg, &data, out)?;
    println!(
        "wrote {} checkpoints and {}",
        outcome.checkpoints.len(),
        out.join(METRICS_FILE).display()
    );
    Ok(())
}

fn open_retriever(cli: &Cli, checkpoint: &Path) -> Result<Retriever> {
    let ck = Checkpoint::read(checkpoint)?;
    let cfg = cli.checkpoint_config(&ck)?;
    let mut r = load_retriever(checkpoint)?;
    r.config = cfg;
    Ok(r)
}

fn cmd_eval(cli: &Cli, a: &EvalArgs) -> Result<()> {
    let mut r = open_retriever(cli, &a.checkpoint)?;
    if a.vote_threshold.is_some() {
        r.config.vote_threshold = a.vote_threshold;
    }
    r.config.validate()?;
    let manifest_path = a.manifest.clone().unwrap_or_else(|| a.data.data_dir.join(MANIFEST_FILE));
    let manifest = load_manifest(&manifest_path)?;
    manifest.eval_records()?;
    let data = PreparedDataset::from_manifest(&a.data.data_dir, &manifest, r.vocab.clone(), r.table.clone(), &r.config)?;
    let (report, records) = evaluate(&r.generator, &r.config, &data, &data.eval, &a.thresholds)?;
    print!("{}", report.to_table());
    let dump = a
        .predictions
        .clone()
        .unwrap_or_else(|| a.checkpoint.with_extension(format!("{}.predictions.jsonl", r.config.inference_strategy)));
    write_predictions(&dump, &records)?;
    log::info!("predictions written to {}", dump.display());
    Ok(())
}

fn load_video(data_dir: &Path, video_id: &str, cfg: &TrainConfig) -> Result<crate::data::ClipFeatureSequence> {
    let manifest = load_manifest(&data_dir.join(MANIFEST_FILE))?;
    let record = manifest
        .find_video(video_id)
        .ok_or_else(|| Error::InvalidArgument(format!("unknown video id `{video_id}`")))?;
    let raw = load_clip_features(&data_dir.join(FEATURES_DIR), video_id, cfg.d_v)?;
    sample_clips(&raw, cfg.n_v, video_id, record.duration)
}

fn cmd_infer(cli: &Cli, a: &InferArgs) -> Result<()> {
    let r = open_retriever(cli, &a.checkpoint)?;
    let video = load_video(&a.data.data_dir, &a.video_id, &r.config)?;
    let out = r.retrieve(&video, &a.query)?;
    println!("{:.3} {:.3}", out.moment.start(), out.moment.end());
    Ok(())
}

fn cmd_synth(cli: &Cli, a: &SynthArgs) -> Result<()> {
    let defaults = SynthConfig::default();
    let cfg = SynthConfig {
        n_train: a.n_train.unwrap_or(defaults.n_train),
        n_test: a.n_test.unwrap_or(defaults.n_test),
        sigma: a.sigma.unwrap_or(defaults.sigma),
        background: a.background.unwrap_or(defaults.background),
        ..defaults
    };
    let seed = cli.seed.unwrap_or(TrainConfig::profile(Profile::Synthetic).seed);
    let ds = generate_synthetic_dataset(&cfg, seed)?;
    ds.write_to(&a.out)?;
    println!("wrote {} queries to {}", ds.manifest.len(), a.out.display());
    Ok(())
}

fn cmd_inspect(cli: &Cli, a: &InspectArgs) -> Result<()> {
    let r = open_retriever(cli, &a.checkpoint)?;
    let video = load_video(&a.data.data_dir, &a.video_id, &r.config)?;
    let curves = mask_curves(&r.generator, &r.config, &r.vocab, &r.table, &video, &a.query)?;
    if let Some(parent) = a.out.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(&a.out, curves.to_columns())?;
    Ok(())
}
