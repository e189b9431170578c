use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use kws_core::audio::{read_wav, CLIP_SAMPLES};
use kws_core::bench::{emit_tradeoff, run_bench, tradeoff_csv, BenchConfig, InputSource};
use kws_core::dataset::{
    build_manifest, AugmentConfig, Dataset, DatasetManifest, ManifestOptions, Split,
    DEFAULT_KEYWORDS,
};
use kws_core::engine::{export_assets, Engine};
use kws_core::eval::evaluate_accuracy;
use kws_core::features::{compute_mfcc, MfccConfig};
use kws_core::nn::{Model, ModelSpec};
use kws_core::slim::{slim, variant_name, SlimConfig};
use kws_core::store::{load_model, save_model, write_atomic};
use kws_core::synth::{write_tone_dataset, ToneSetConfig};
use kws_core::train::{finetune, train, EpochLog, TrainConfig, TrainOutcome, DEFAULT_LAMBDA_L1};
use kws_core::{KwsError, Result};
use serde_json::json;

/// Keyword spotting: data preparation, training, network slimming, evaluation and benchmarking.
#[derive(Parser)]
#[command(name = "kws", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Scan a Speech-Commands-style tree and write a manifest with hash-based splits.
    Prepare(PrepareArgs),
    /// Write the synthetic three-tone dataset and its manifest.
    Synth(SynthArgs),
    /// Train a fresh model.
    Train(TrainArgs),
    /// Continue training an existing (usually pruned) model.
    Finetune(FinetuneArgs),
    /// Remove the smallest-|γ| channels of a slim-ready model.
    Prune(PruneArgs),
    /// Accuracy on one split.
    Eval(EvalArgs),
    /// Posteriors for one WAV file.
    Infer(InferArgs),
    /// Latency report for one model.
    Bench(BenchArgs),
    /// Latency/accuracy table for several models.
    Tradeoff(TradeoffArgs),
    /// Copy a model and its labels into the demo's asset layout.
    Export(ExportArgs),
    /// Dump the MFCC matrix of one WAV file as CSV.
    Features(FeaturesArgs),
}

#[derive(Args)]
struct DataArgs {
    /// Dataset root.
    #[arg(long)]
    data: PathBuf,
    /// Manifest file [default: <data>/manifest.json].
    #[arg(long)]
    manifest: Option<PathBuf>,
}

impl DataArgs {
    fn load(&self) -> Result<Dataset> {
        let path = self
            .manifest
            .clone()
            .unwrap_or_else(|| self.data.join("manifest.json"));
        Ok(Dataset::new(&self.data, DatasetManifest::load(path)?))
    }
}

#[derive(Args)]
struct PrepareArgs {
    #[arg(long)]
    data: PathBuf,
    /// Comma-separated keyword list.
    #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_KEYWORDS.map(String::from))]
    keywords: Vec<String>,
    #[arg(long, default_value_t = 80)]
    train_pct: u32,
    #[arg(long, default_value_t = 10)]
    val_pct: u32,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// [default: <data>/manifest.json]
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 50)]
    per_class: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct Hyper {
    #[arg(long, default_value_t = 30)]
    epochs: usize,
    #[arg(long, default_value_t = 0.1)]
    lr: f64,
    #[arg(long, default_value_t = 0.9)]
    momentum: f64,
    #[arg(long, default_value_t = 64)]
    batch_size: usize,
    /// L1 weight on batch-norm scales [default: 1e-4 with --slim-ready, else 0].
    #[arg(long)]
    sparsity: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Disable time-shift and noise augmentation.
    #[arg(long)]
    no_augment: bool,
    /// Also append the JSON-lines training log to this file.
    #[arg(long)]
    log: Option<PathBuf>,
}

impl Hyper {
    fn config(&self, slim_ready: bool) -> TrainConfig {
        let default_l1 = if slim_ready { DEFAULT_LAMBDA_L1 } else { 0.0 };
        let augment = if self.no_augment {
            AugmentConfig::disabled()
        } else {
            AugmentConfig {
                seed: self.seed,
                ..AugmentConfig::default()
            }
        };
        TrainConfig {
            lr: self.lr,
            momentum: self.momentum,
            batch_size: self.batch_size,
            epochs: self.epochs,
            lambda_l1: self.sparsity.unwrap_or(default_l1),
            seed: self.seed,
            augment,
            ..TrainConfig::default()
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, default_value = "res8-narrow")]
    arch: String,
    /// Give every prunable batch norm a trainable scale γ.
    #[arg(long)]
    slim_ready: bool,
    #[command(flatten)]
    hyper: Hyper,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct FinetuneArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    model: PathBuf,
    #[command(flatten)]
    hyper: Hyper,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PruneArgs {
    #[arg(long)]
    model: PathBuf,
    /// Share of prunable channels to remove, in [0, 1).
    #[arg(long)]
    fraction: f64,
    #[arg(long, default_value_t = 1)]
    min_keep: usize,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    model: PathBuf,
    #[arg(long, default_value = "test")]
    split: Split,
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    wav: PathBuf,
}

#[derive(Args)]
struct BenchOpts {
    #[arg(long, default_value_t = 100)]
    runs: usize,
    #[arg(long, default_value_t = 10)]
    warmup: usize,
    /// Seed of the random input clips.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Time this WAV file instead of random clips.
    #[arg(long)]
    wav: Option<PathBuf>,
    #[arg(long, default_value = "local")]
    device_label: String,
}

impl BenchOpts {
    fn config(&self) -> Result<BenchConfig> {
        let input = match &self.wav {
            Some(p) => InputSource::Fixed(read_wav(p)?.fit_to_length(CLIP_SAMPLES)),
            None => InputSource::Random {
                seed: self.seed,
                count: 8,
            },
        };
        Ok(BenchConfig {
            runs: self.runs,
            warmup: self.warmup,
            input,
            device_label: self.device_label.clone(),
        })
    }
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long)]
    model: PathBuf,
    #[command(flatten)]
    opts: BenchOpts,
    /// Write the JSON report here.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Write a CSV report here.
    #[arg(long)]
    csv: Option<PathBuf>,
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct TradeoffArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Repeat once per model; names come from the file stems.
    #[arg(long, required = true)]
    model: Vec<PathBuf>,
    #[command(flatten)]
    opts: BenchOpts,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ExportArgs {
    #[arg(long)]
    model: PathBuf,
    /// Asset name [default: the model file stem].
    #[arg(long)]
    name: Option<String>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct FeaturesArgs {
    #[arg(long)]
    wav: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn exit_code(e: &KwsError) -> u8 {
    match e {
        KwsError::Io { .. }
        | KwsError::Corrupt { .. }
        | KwsError::Format { .. }
        | KwsError::NotModel(_)
        | KwsError::Version { .. }
        | KwsError::Payload { .. }
        | KwsError::Ingestion(_)
        | KwsError::Json(_) => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Prepare(a) => prepare(a),
        Command::Synth(a) => synth(a),
        Command::Train(a) => {
            let data = a.data.load()?;
            let spec = ModelSpec::by_name(&a.arch)?.slim_ready(a.slim_ready);
            let cfg = a.hyper.config(a.slim_ready);
            let out = with_log(a.hyper.log.as_deref(), |log| train(spec, &data, &cfg, log))?;
            finish_training(out, &a.out)
        }
        Command::Finetune(a) => {
            let data = a.data.load()?;
            let model = load_model(&a.model)?;
            let cfg = a.hyper.config(false);
            let out = with_log(a.hyper.log.as_deref(), |log| {
                finetune(model, &data, &cfg, log)
            })?;
            finish_training(out, &a.out)
        }
        Command::Prune(a) => prune(a),
        Command::Eval(a) => {
            let data = a.data.load()?;
            let model = load_model(&a.model)?;
            let acc = evaluate_accuracy(&model, &data, a.split)?;
            if a.json {
                let n = data.manifest.count(a.split);
                println!(
                    "{}",
                    json!({ "split": a.split.to_string(), "clips": n, "accuracy": acc })
                );
            } else {
                println!(
                    "{} accuracy: {:.4} ({} clips)",
                    a.split,
                    acc,
                    data.manifest.count(a.split)
                );
            }
            Ok(())
        }
        Command::Infer(a) => {
            let engine = Engine::new(load_model(&a.model)?)?;
            let clip = read_wav(&a.wav)?;
            if clip.sample_rate != engine.model().mfcc.sample_rate {
                return Err(KwsError::Contract(format!(
                    "{} is sampled at {} Hz; the model expects {} Hz",
                    a.wav.display(),
                    clip.sample_rate,
                    engine.model().mfcc.sample_rate
                )));
            }
            let r = engine.infer_pcm(&clip.fit_to_length(CLIP_SAMPLES).samples)?;
            let best = r.argmax();
            println!(
                "{}",
                json!({
                    "label": engine.labels()[best],
                    "index": best,
                    "labels": engine.labels(),
                    "posteriors": r.posteriors,
                    "featurize_ms": r.featurize_ms,
                    "forward_ms": r.forward_ms,
                })
            );
            Ok(())
        }
        Command::Bench(a) => bench(a),
        Command::Tradeoff(a) => {
            let data = a.data.load()?;
            let models = a
                .model
                .iter()
                .map(|p| Ok((stem(p), load_model(p)?)))
                .collect::<Result<Vec<_>>>()?;
            let rows = emit_tradeoff(&models, &data, &a.opts.config()?)?;
            let csv = tradeoff_csv(&rows);
            if let Some(out) = &a.out {
                write_atomic(out, csv.as_bytes())?;
            }
            print!("{csv}");
            Ok(())
        }
        Command::Export(a) => {
            let name = a.name.unwrap_or_else(|| stem(&a.model));
            export_assets(&a.model, &name, &a.out)?;
            eprintln!("exported {name} to {}", a.out.display());
            Ok(())
        }
        Command::Features(a) => {
            let clip = read_wav(&a.wav)?.fit_to_length(CLIP_SAMPLES);
            let csv = compute_mfcc(&clip, &MfccConfig::default())?.to_csv();
            match &a.out {
                Some(out) => write_atomic(out, csv.as_bytes()),
                None => {
                    print!("{csv}");
                    Ok(())
                }
            }
        }
    }
}

fn stem(p: &Path) -> String {
    p.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "model".into())
}

fn prepare(a: PrepareArgs) -> Result<()> {
    let keywords: Vec<&str> = a.keywords.iter().map(String::as_str).collect();
    let opts = ManifestOptions {
        train_pct: a.train_pct,
        val_pct: a.val_pct,
        seed: a.seed,
        ..ManifestOptions::default()
    };
    let manifest = build_manifest(&a.data, &keywords, &opts)?;
    let out = a.out.unwrap_or_else(|| a.data.join("manifest.json"));
    manifest.save(&out)?;
    eprintln!(
        "{} entries (train {}, validation {}, test {}) written to {}",
        manifest.entries.len(),
        manifest.count(Split::Train),
        manifest.count(Split::Validation),
        manifest.count(Split::Test),
        out.display()
    );
    Ok(())
}

fn synth(a: SynthArgs) -> Result<()> {
    let cfg = ToneSetConfig {
        per_class: a.per_class,
        seed: a.seed,
        ..ToneSetConfig::default()
    };
    let manifest = write_tone_dataset(&a.out, &cfg)?;
    manifest.save(a.out.join("manifest.json"))?;
    eprintln!(
        "{} clips written to {}",
        manifest.entries.len(),
        a.out.display()
    );
    Ok(())
}

/// Streams epoch logs to stdout (and optionally a file) as JSON lines.
fn with_log(
    path: Option<&Path>,
    body: impl FnOnce(&mut dyn FnMut(&EpochLog)) -> Result<TrainOutcome>,
) -> Result<TrainOutcome> {
    let mut lines = Vec::new();
    let out = body(&mut |e: &EpochLog| {
        let line = e.to_json_line();
        println!("{line}");
        let _ = std::io::stdout().flush();
        lines.push(line);
    })?;
    if let Some(p) = path {
        let mut text = lines.join("\n");
        text.push('\n');
        write_atomic(p, text.as_bytes())?;
    }
    Ok(out)
}

fn finish_training(out: TrainOutcome, path: &Path) -> Result<()> {
    save_model(&out.model, path)?;
    eprintln!("best epoch {} saved to {}", out.best_epoch, path.display());
    Ok(())
}

fn prune(a: PruneArgs) -> Result<()> {
    let model = load_model(&a.model)?;
    let cfg = SlimConfig {
        fraction: a.fraction,
        min_keep: a.min_keep,
    };
    let (pruned, mask) = slim(&model, &cfg)?;
    save_model(&pruned, &a.out)?;
    let (h, w) = (model.mfcc.frame_count(CLIP_SAMPLES), model.mfcc.n_mfcc);
    let summary = json!({
        "variant": variant_name(&model.spec.arch, a.fraction),
        "inner_widths": pruned.spec.inner_widths,
        "kept": mask.kept,
        "params": [model.count_params(), pruned.count_params()],
        "multiplies": [model.count_multiplies(h, w), pruned.count_multiplies(h, w)],
    });
    if a.json {
        println!("{summary}");
    } else {
        println!(
            "{}: inner widths {:?}, params {} -> {}, multiplies {} -> {}",
            summary["variant"].as_str().unwrap_or_default(),
            pruned.spec.inner_widths,
            model.count_params(),
            pruned.count_params(),
            model.count_multiplies(h, w),
            pruned.count_multiplies(h, w)
        );
    }
    Ok(())
}

fn bench(a: BenchArgs) -> Result<()> {
    let model: Model = load_model(&a.model)?;
    let report = run_bench(&model, &stem(&a.model), &a.opts.config()?)?;
    let text = report.to_json();
    if let Some(p) = &a.out {
        write_atomic(p, text.as_bytes())?;
    }
    if let Some(p) = &a.csv {
        write_atomic(p, report.to_csv().as_bytes())?;
    }
    if a.json {
        println!("{text}");
    } else {
        for (stage, s) in [
            ("featurize", &report.featurize),
            ("forward", &report.forward),
            ("end_to_end", &report.end_to_end),
        ] {
            println!(
                "{stage:>10}: p50 {:.3} ms  p95 {:.3} ms  mean {:.3} ms  (min {:.3}, max {:.3})",
                s.p50, s.p95, s.mean, s.min, s.max
            );
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn io_and_file_problems_exit_2() {
        let io = KwsError::io(
            "reading x",
            std::io::Error::from(std::io::ErrorKind::NotFound),
        );
        assert_eq!(exit_code(&io), 2);
        assert_eq!(exit_code(&KwsError::NotModel(*b"XXXX")), 2);
        assert_eq!(
            exit_code(&KwsError::Payload {
                expected: 8,
                actual: 4
            }),
            2
        );
        assert_eq!(exit_code(&KwsError::Config("bad".into())), 1);
        assert_eq!(exit_code(&KwsError::Contract("bad".into())), 1);
    }

    #[test]
    fn sparsity_defaults_follow_slim_ready() {
        let cli = Cli::try_parse_from([
            "kws",
            "train",
            "--data",
            "d",
            "--out",
            "m.kwsm",
            "--slim-ready",
        ])
        .unwrap();
        let Command::Train(a) = cli.command else {
            panic!("parsed as another command")
        };
        assert_eq!(a.hyper.config(true).lambda_l1, DEFAULT_LAMBDA_L1);
        assert_eq!(a.hyper.config(false).lambda_l1, 0.0);
        assert!(Cli::try_parse_from([
            "kws", "eval", "--data", "d", "--model", "m", "--split", "dev"
        ])
        .is_err());
    }
}
