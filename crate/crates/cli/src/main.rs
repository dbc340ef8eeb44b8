//! `avsep`: corpus synthesis, training, evaluation, separation and model
//! inspection. Results go to stdout as JSON; diagnostics go to stderr.
//!
//! Exit codes: 0 success, 2 configuration error, 3 I/O or data error,
//! 4 numeric failure.

mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use avsep::checkpoint::Checkpoint;
use avsep::eval::{evaluate, Estimator};
use avsep::model::{count_parameters, Model, ModelConfig};
use avsep::synth::{build_corpus, MixtureManifest, Split};
use avsep::tensor::{Precision, Real};
use avsep::train::{Example, Trainer};
use avsep::visual::load_embeddings;
use avsep::wav::{read_wav, write_wav, WavFormat};
use clap::{Args, Parser, Subcommand};
use serde_json::json;

use config::{parse_range, RunConfig};

/// Error carrying the process exit code.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    pub fn config(message: impl Into<String>) -> Self {
        Failure { code: 2, message: message.into() }
    }

    pub fn io(message: impl Into<String>) -> Self {
        Failure { code: 3, message: message.into() }
    }
}

impl From<avsep::Error> for Failure {
    fn from(e: avsep::Error) -> Self {
        use avsep::Error as E;
        let code = match &e {
            E::Config(_) | E::Shape(_) => 2,
            E::Numeric(_) => 4,
            E::Io { .. } | E::Wav { .. } | E::Format(_) | E::Data(_) | E::Json(_) => 3,
        };
        Failure { code, message: e.to_string() }
    }
}

type Outcome = Result<(), Failure>;

#[derive(Parser)]
#[command(name = "avsep", version, about = "Audiovisual target speech separation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize a mixture corpus split with its manifest.
    SynthData(SynthArgs),
    /// Train a model on a synthesized corpus.
    Train(TrainArgs),
    /// Score estimates on a manifest and write a JSON-lines report.
    Eval(EvalArgs),
    /// Separate one mixture given one embedding file per speaker.
    Separate(SeparateArgs),
    /// Print a configuration and its parameter count.
    Info(InfoArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    num_items: Option<usize>,
    #[arg(long)]
    speakers: Option<usize>,
    /// Target-to-interference range in dB, `lo,hi`.
    #[arg(long, allow_hyphen_values = true, value_parser = parse_range)]
    tir_range: Option<(f64, f64)>,
    /// Background noise SNR range in dB, `lo,hi`; omitted means no noise.
    #[arg(long, allow_hyphen_values = true, value_parser = parse_range)]
    snr_range: Option<(f64, f64)>,
    #[arg(long, default_value = "train")]
    split: Split,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Corpus directory holding `train.jsonl` and optionally `val.jsonl`.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    max_epochs: Option<usize>,
    #[arg(long)]
    max_steps: Option<usize>,
    /// Continue from `<out>/last.ckpt`.
    #[arg(long)]
    resume: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long, required_unless_present_any = ["oracle", "identity"])]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    report: PathBuf,
    /// Score the true sources instead of model outputs.
    #[arg(long, conflicts_with_all = ["checkpoint", "identity"])]
    oracle: bool,
    /// Score the unprocessed mixture.
    #[arg(long, conflicts_with = "checkpoint")]
    identity: bool,
    /// Also write every estimate as a WAV file here.
    #[arg(long)]
    export: Option<PathBuf>,
}

#[derive(Args)]
struct SeparateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    mixture: PathBuf,
    /// One embedding file per speaker; output `c` follows file `c`.
    #[arg(long, num_args = 1.., required = true)]
    embeddings: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct InfoArgs {
    #[arg(long, conflicts_with = "checkpoint")]
    config: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

fn print_json(v: &serde_json::Value) {
    println!("{}", serde_json::to_string_pretty(v).expect("serializable"));
}

fn create_dir(dir: &Path) -> Outcome {
    std::fs::create_dir_all(dir).map_err(|e| Failure::io(format!("creating {}: {e}", dir.display())))
}

fn synth_data(a: SynthArgs) -> Outcome {
    let mut run = RunConfig::load(a.config.as_deref())?;
    let c = &mut run.corpus;
    c.split = a.split;
    if let Some(v) = a.seed {
        c.master_seed = v;
    }
    if let Some(v) = a.num_items {
        c.num_items = v;
    }
    if let Some(v) = a.speakers {
        c.speakers = v;
    }
    if let Some(v) = a.tir_range {
        c.tir_range = v;
    }
    if a.snr_range.is_some() {
        c.snr_range = a.snr_range;
    }
    run.corpus.validate()?;
    create_dir(&a.out)?;
    let manifest = build_corpus(&run.corpus, &a.out)?;
    print_json(&json!({
        "split": run.corpus.split.name(),
        "items": manifest.items.len(),
        "manifest": MixtureManifest::manifest_path(&a.out, run.corpus.split),
    }));
    Ok(())
}

fn load_split<T: Real>(cfg: &ModelConfig, dir: &Path, split: Split) -> Result<Vec<Example<T>>, Failure> {
    let path = MixtureManifest::manifest_path(dir, split);
    if split != Split::Train && !path.exists() {
        return Ok(Vec::new());
    }
    let manifest = MixtureManifest::read(&path)?;
    (0..manifest.items.len())
        .map(|i| Ok(Example::new(cfg, &manifest.load_item(i)?)?))
        .collect()
}

fn train_with<T: Real>(run: &RunConfig, a: &TrainArgs) -> Outcome {
    let train = load_split::<T>(&run.model, &a.data, Split::Train)?;
    let val = load_split::<T>(&run.model, &a.data, Split::Val)?;
    if train.is_empty() {
        return Err(Failure::io(format!("no training items under {}", a.data.display())));
    }
    let last = a.out.join("last.ckpt");
    let mut trainer = if a.resume {
        let ck = Checkpoint::load(&last)?;
        if ck.config != run.model {
            return Err(Failure::config("model configuration differs from the checkpoint being resumed"));
        }
        Trainer::<T>::from_checkpoint(&ck, Some(run.train.clone()))?
    } else {
        Trainer::new(Model::new(run.model.clone(), run.train.seed)?, run.train.clone())?
    };
    eprintln!(
        "training {} parameters on {} items ({} validation)",
        trainer.model.num_parameters(),
        train.len(),
        val.len()
    );
    let summary = trainer.fit(&train, &val, Some(&a.out), |r| {
        eprintln!(
            "epoch {:4}  train {:9.4}  val {:9.4}  lr {:.3e}",
            r.epoch, r.train_loss, r.val_loss, r.lr
        );
    })?;
    print_json(&json!({
        "epochs": summary.epochs,
        "steps": summary.steps,
        "best_val_loss": summary.best_val_loss,
        "best_epoch": summary.best_epoch,
        "early_stopped": summary.early_stopped,
        "best_checkpoint": a.out.join("best.ckpt"),
        "last_checkpoint": last,
    }));
    Ok(())
}

fn train(a: TrainArgs) -> Outcome {
    let mut run = RunConfig::load(a.config.as_deref())?;
    if let Some(v) = a.seed {
        run.train.seed = v;
    }
    if let Some(v) = a.max_epochs {
        run.train.max_epochs = v;
    }
    if a.max_steps.is_some() {
        run.train.max_steps = a.max_steps;
    }
    run.validate()?;
    create_dir(&a.out)?;
    let echo = serde_json::to_string_pretty(&run).expect("serializable");
    std::fs::write(a.out.join("config.json"), echo).map_err(|e| Failure::io(format!("writing config: {e}")))?;
    match run.model.precision {
        Precision::Double => train_with::<f64>(&run, &a),
        Precision::Single => train_with::<f32>(&run, &a),
    }
}

fn eval_with<T: Real>(est: &Estimator<T>, a: &EvalArgs) -> Outcome {
    let manifest = MixtureManifest::read(&a.manifest)?;
    let report = evaluate(est, &manifest, a.export.as_deref())?;
    for (id, e) in &report.errors {
        eprintln!("{id}: {e}");
    }
    report.save(&a.report)?;
    print_json(&serde_json::to_value(report.aggregate()).expect("serializable"));
    Ok(())
}

fn eval(a: EvalArgs) -> Outcome {
    if a.oracle {
        return eval_with::<f64>(&Estimator::Oracle, &a);
    }
    if a.identity {
        return eval_with::<f64>(&Estimator::Identity, &a);
    }
    let ck = Checkpoint::load(a.checkpoint.as_deref().expect("required by clap"))?;
    match ck.config.precision {
        Precision::Double => eval_with(&Estimator::Model(&ck.to_model::<f64>()?), &a),
        Precision::Single => eval_with(&Estimator::Model(&ck.to_model::<f32>()?), &a),
    }
}

fn separate_with<T: Real>(ck: &Checkpoint, a: &SeparateArgs) -> Outcome {
    let model = ck.to_model::<T>()?;
    let mixture = read_wav(&a.mixture)?;
    let visuals = a
        .embeddings
        .iter()
        .map(|p| load_embeddings(p))
        .collect::<avsep::Result<Vec<_>>>()?;
    let outs = model.separate(&mixture, &visuals)?;
    create_dir(&a.out)?;
    let mut written = Vec::new();
    for (c, w) in outs.iter().enumerate() {
        let path = a.out.join(format!("stream{c}.wav"));
        write_wav(&path, w, WavFormat::Float32)?;
        written.push(path);
    }
    print_json(&json!({ "outputs": written, "samples": mixture.len() }));
    Ok(())
}

fn separate(a: SeparateArgs) -> Outcome {
    let ck = Checkpoint::load(&a.checkpoint)?;
    match ck.config.precision {
        Precision::Double => separate_with::<f64>(&ck, &a),
        Precision::Single => separate_with::<f32>(&ck, &a),
    }
}

fn info(a: InfoArgs) -> Outcome {
    let (model, train) = match &a.checkpoint {
        Some(p) => {
            let ck = Checkpoint::load(p)?;
            let train = ck.meta.get("train_config").cloned();
            (ck.config, train)
        }
        None => {
            let run = RunConfig::load(a.config.as_deref())?;
            run.model.validate()?;
            (run.model, Some(serde_json::to_value(run.train).expect("serializable")))
        }
    };
    print_json(&json!({
        "model": model,
        "train": train,
        "parameters": count_parameters(&model),
    }));
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let r = match cli.command {
        Command::SynthData(a) => synth_data(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Separate(a) => separate(a),
        Command::Info(a) => info(a),
    };
    match r {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
