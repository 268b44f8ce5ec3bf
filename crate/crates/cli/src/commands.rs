use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, Parser, Subcommand, ValueEnum};
use nmn_core::checkpoint::{Checkpoint, CHECKPOINT_JSON};
use nmn_core::config::{RunConfig, SynthVariant};
use nmn_core::preprocess::{preprocess as preprocess_recording, read_feature_dataset, read_raw_dataset, synth_recordings,
    write_feature_dataset, write_raw_dataset, Sample};
use nmn_core::train::{
    extract_embeddings, fold_seed, fold_split, map_folds, predict, run_fold_from, EvalReport, ModelKind, Predictions,
    TrainConfig, TrainState, DEFAULT_EMBED_SAMPLES,
};
use nmn_core::{Error, Result};

#[derive(Parser)]
#[command(name = "plastic-nmn", version, about = "Plastic neural memory network: synthetic data, preprocessing, training and evaluation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand)]
pub enum Command {
    /// Generate a synthetic raw-recording dataset.
    Synth(SynthArgs),
    /// Turn raw recordings into windowed band features.
    Preprocess(PreprocessArgs),
    /// Train with stratified cross-validation.
    Train(TrainArgs),
    /// Evaluate a checkpoint.
    Eval(EvalArgs),
    /// Export PCA-projected embeddings of a checkpoint.
    Embed(EmbedArgs),
}

#[derive(Args)]
pub struct SynthArgs {
    /// Run config (JSON); defaults apply when absent.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output dataset directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Seed (overrides the environment and the config).
    #[arg(long)]
    seed: Option<u64>,
    /// Class layout (overrides the config).
    #[arg(long, value_enum)]
    variant: Option<Variant>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Variant {
    Default,
    Hard,
}

#[derive(Args)]
pub struct PreprocessArgs {
    /// Raw dataset directory.
    #[arg(long = "in")]
    input: PathBuf,
    /// Output feature dataset directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum FoldArg {
    All,
    One(usize),
}

impl FromStr for FoldArg {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        if s == "all" {
            return Ok(FoldArg::All);
        }
        s.parse().map(FoldArg::One).map_err(|_| format!("expected `all` or a fold index, got `{s}`"))
    }
}

#[derive(Args)]
pub struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Feature dataset directory.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Output directory (one `fold-N` subdirectory per fold).
    #[arg(long)]
    out: Option<PathBuf>,
    /// plastic-nmn, nmn-fixed or lstm-baseline (overrides the config).
    #[arg(long, value_parser = parse_model)]
    model: Option<ModelKind>,
    /// `all` or a single fold index.
    #[arg(long, default_value = "all")]
    fold: FoldArg,
    /// Epoch count (overrides the config).
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Continue from the checkpoints already in the output directory.
    #[arg(long)]
    resume: bool,
}

fn parse_model(s: &str) -> std::result::Result<ModelKind, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

#[derive(Clone, Copy, PartialEq, ValueEnum)]
enum Split {
    /// The checkpoint's held-out fold.
    Test,
    /// Every sample, in dataset order.
    All,
}

#[derive(Args)]
pub struct EvalArgs {
    /// Checkpoint directory (a `fold-N` directory written by train).
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Samples to evaluate; defaults to `test` for fold checkpoints.
    #[arg(long, value_enum)]
    split: Option<Split>,
}

#[derive(Args)]
pub struct EmbedArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Number of samples drawn without replacement.
    #[arg(long, default_value_t = DEFAULT_EMBED_SAMPLES)]
    n: usize,
    #[arg(long, value_enum)]
    split: Option<Split>,
    /// Sampling seed (defaults to the environment, then the run seed).
    #[arg(long)]
    seed: Option<u64>,
}

fn load_config(path: Option<&Path>, seed: Option<u64>) -> Result<RunConfig> {
    let mut config = RunConfig::load_or_default(path)?;
    config.apply_env()?;
    if let Some(s) = seed {
        config.train.seed = s;
    }
    Ok(config)
}

fn required(flag: Option<PathBuf>, configured: &Option<PathBuf>, name: &str) -> Result<PathBuf> {
    flag.or_else(|| configured.clone())
        .ok_or_else(|| Error::InvalidArgument(format!("--{name} is required (or set `{name}` in the config)")))
}

pub fn synth(args: SynthArgs) -> Result<()> {
    let mut config = load_config(args.config.as_deref(), args.seed)?;
    if let Some(v) = args.variant {
        config.synth.variant = match v {
            Variant::Default => SynthVariant::Default,
            Variant::Hard => SynthVariant::Hard,
        };
        config.synth.specs = None;
    }
    config.synth.validate()?;
    let out = required(args.out, &config.out, "out")?;
    config.out = Some(out.clone());
    let s = &config.synth;
    let recordings = synth_recordings(&s.class_specs(), &s.class_counts()?, config.train.seed, s.duration_seconds, s.sample_rate)?;
    write_raw_dataset(&out, &recordings)?;
    config.write_echo(&out)?;
    println!("wrote {} recordings to {}", recordings.len(), out.display());
    Ok(())
}

pub fn preprocess(args: PreprocessArgs) -> Result<()> {
    let mut config = load_config(args.config.as_deref(), None)?;
    config.data = Some(args.input.clone());
    config.out = Some(args.out.clone());
    let recordings = read_raw_dataset(&args.input)?;
    let mut samples = Vec::new();
    for r in &recordings {
        samples.extend(preprocess_recording(r)?);
    }
    write_feature_dataset(&args.out, &samples)?;
    config.write_echo(&args.out)?;
    println!("wrote {} windows from {} recordings to {}", samples.len(), recordings.len(), args.out.display());
    Ok(())
}

fn losses_csv(losses: &[f64]) -> String {
    let mut text = String::from("epoch,loss\n");
    for (e, l) in losses.iter().enumerate() {
        let _ = writeln!(text, "{},{l}", e + 1);
    }
    text
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn same_run(a: &TrainConfig, b: &TrainConfig) -> bool {
    TrainConfig { epochs: None, ..a.clone() } == TrainConfig { epochs: None, ..b.clone() }
}

fn train_one(run: &RunConfig, samples: &[Sample], fold: usize, out: &Path, resume: bool) -> Result<Predictions> {
    let config = &run.train;
    let dir = out.join(format!("fold-{fold}"));
    let seed = fold_seed(config.seed, fold);
    let mut start = None;
    if resume && dir.join(CHECKPOINT_JSON).exists() {
        let ckpt = Checkpoint::load(&dir)?;
        if ckpt.fold != Some(fold) || ckpt.seed != seed || !same_run(&ckpt.state.model.config, config) {
            return Err(Error::InvalidArgument(format!(
                "checkpoint in {} belongs to a different run configuration",
                dir.display()
            )));
        }
        log::info!("fold {fold}: resuming after epoch {}", ckpt.state.epoch);
        let mut state = ckpt.state;
        state.model.config = config.resolved();
        start = Some(state);
    }
    let save = |state: &TrainState| -> Result<()> {
        Checkpoint {
            state: state.clone(),
            seed,
            fold: Some(fold),
        }
        .save(&dir)?;
        write_file(&dir.join("losses.csv"), &losses_csv(&state.losses))
    };
    run.write_echo(&dir)?;
    let outcome = run_fold_from(config, samples, fold, start, &mut |s| save(s))?;
    save(&outcome.state)?;
    let report = EvalReport::from_parts(config.model, &[&outcome.predictions])?;
    report.write(&dir)?;
    log::info!("fold {fold}: test weighted-F1 {:.4}", report.mean_weighted_f1);
    Ok(outcome.predictions)
}

pub fn train(args: TrainArgs) -> Result<()> {
    let mut config = load_config(args.config.as_deref(), args.seed)?;
    if let Some(m) = args.model {
        config.train.model = m;
    }
    if let Some(e) = args.epochs {
        config.train.epochs = Some(e);
    }
    config.train.validate()?;
    let data = required(args.data, &config.data, "data")?;
    let out = required(args.out, &config.out, "out")?;
    config.data = Some(data.clone());
    config.out = Some(out.clone());
    let folds: Vec<usize> = match args.fold {
        FoldArg::All => (0..config.train.folds).collect(),
        FoldArg::One(f) if f < config.train.folds => vec![f],
        FoldArg::One(f) => {
            return Err(Error::InvalidArgument(format!("--fold {f} out of range 0..{}", config.train.folds)));
        }
    };
    let samples = read_feature_dataset(&data)?;
    config.write_echo(&out)?;
    let config = config.resolved()?;
    let train = &config.train;
    let parts = map_folds(&folds, &|f| train_one(&config, &samples, f, &out, args.resume))?;
    let merged = EvalReport::from_parts(train.model, &parts.iter().collect::<Vec<_>>())?;
    merged.write(&out)?;
    println!(
        "{}: mean weighted-F1 {:.4} over {} fold(s)",
        train.model,
        merged.mean_weighted_f1,
        folds.len()
    );
    Ok(())
}

/// Samples a checkpoint is evaluated on, in evaluation order.
fn selection<'a>(ckpt: &Checkpoint, samples: &'a [Sample], split: Option<Split>) -> Result<Vec<&'a Sample>> {
    let split = split.unwrap_or(if ckpt.fold.is_some() { Split::Test } else { Split::All });
    match (split, ckpt.fold) {
        (Split::All, _) => Ok(samples.iter().collect()),
        (Split::Test, Some(f)) => {
            let (_, test) = fold_split(samples, &ckpt.state.model.config, f)?;
            Ok(test.iter().map(|&i| &samples[i]).collect())
        }
        (Split::Test, None) => Err(Error::InvalidArgument("--split test needs a checkpoint trained on a fold".into())),
    }
}

fn echo_for(ckpt: &Checkpoint, data: &Path, out: &Path) -> Result<()> {
    let mut config = RunConfig {
        train: ckpt.state.model.config.clone(),
        data: Some(data.to_path_buf()),
        out: Some(out.to_path_buf()),
        ..RunConfig::default()
    };
    config.apply_env()?;
    config.write_echo(out)
}

pub fn eval(args: EvalArgs) -> Result<()> {
    let ckpt = Checkpoint::load(&args.checkpoint)?;
    let samples = read_feature_dataset(&args.data)?;
    let refs = selection(&ckpt, &samples, args.split)?;
    let model = &ckpt.state.model;
    let predictions = predict(model, &refs)?;
    let report = EvalReport::from_parts(model.kind(), &[&predictions])?;
    report.write(&args.out)?;
    echo_for(&ckpt, &args.data, &args.out)?;
    println!(
        "{}: weighted-F1 {:.4}, accuracy {:.4} on {} samples",
        model.kind(),
        report.mean_weighted_f1,
        report.accuracy,
        refs.len()
    );
    Ok(())
}

pub fn embed(args: EmbedArgs) -> Result<()> {
    if args.n == 0 {
        return Err(Error::InvalidArgument("--n must be positive".into()));
    }
    let ckpt = Checkpoint::load(&args.checkpoint)?;
    let samples = read_feature_dataset(&args.data)?;
    let refs = selection(&ckpt, &samples, args.split)?;
    let mut run = RunConfig {
        train: ckpt.state.model.config.clone(),
        ..RunConfig::default()
    };
    run.apply_env()?;
    let seed = args.seed.unwrap_or(run.train.seed);
    let (table, _) = extract_embeddings(&ckpt.state.model, &refs, args.n, seed)?;
    table.write(&args.out)?;
    echo_for(&ckpt, &args.data, &args.out)?;
    println!(
        "wrote {} embeddings (explained variance {:.3}/{:.3}, centroid accuracy {:.4})",
        table.rows.len(),
        table.explained_variance[0],
        table.explained_variance[1],
        table.centroid_accuracy
    );
    Ok(())
}
