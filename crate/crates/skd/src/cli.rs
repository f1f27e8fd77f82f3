//! Command-line front end.
//!
//! Exit status: 0 success, 1 failed check, 2 usage or input error,
//! 3 training divergence.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::PathBuf;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use skd_core::decoding::{beam_search, default_max_len, greedy_decode, BeamConfig};
use skd_core::distill::{expand_dataset, generate_pseudo_labels, TrainingPair, Utterance};
use skd_core::metrics::{EvalReport, UtteranceScore};
use skd_core::model::Seq2Seq;
use skd_core::train::{train, EpochRecord, StopReason, TrainConfig};
use skd_core::vocab::Vocabulary;

use crate::binio::write_atomic;
use crate::checks::{gradcheck_suite, TOLERANCE};
use crate::config::{describe, RunConfig};
use crate::error::{Result, SkdError};
use crate::executor::Threads;
use crate::run_manifest::RunManifest;
use crate::synth::{write_corpus, SynthConfig};
use crate::{checkpoint, labels, manifest, report};

/// Environment variable that overrides every `--seed`.
pub const SEED_ENV: &str = "SKD_SEED";

#[derive(Debug, Parser)]
#[command(name = "skd", version, about = "Sequence-level knowledge distillation for attention-based recognizers")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
#[allow(clippy::large_enum_variant)]
pub enum Command {
    /// Write a synthetic corpus (features and train/dev/test manifests).
    SynthData(SynthArgs),
    /// Train a model on references or pseudo-labels.
    Train(TrainArgs),
    /// Generate k-best pseudo-labels with a teacher.
    Decode(DecodeArgs),
    /// Score transcripts against references.
    Eval(EvalArgs),
    /// Finite-difference check of every loss gradient.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 100)]
    pub utterances: usize,
    #[arg(long, default_value_t = 4)]
    pub min_len: usize,
    #[arg(long, default_value_t = 10)]
    pub max_len: usize,
    #[arg(long, default_value_t = 0.3)]
    pub noise_std: f64,
    #[arg(long, default_value_t = 16)]
    pub dim: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Train/dev/test sizes, e.g. `2000,200,200`.
    #[arg(long, value_delimiter = ',')]
    pub split: Option<Vec<usize>>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Training manifest.
    #[arg(long)]
    pub data: PathBuf,
    /// Output checkpoint.
    #[arg(long)]
    pub out: PathBuf,
    /// `key=value` file with model and training settings.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Pseudo-labels replacing the manifest transcripts.
    #[arg(long)]
    pub labels: Option<PathBuf>,
    /// Validation manifest for model selection and early stopping.
    #[arg(long)]
    pub dev: Option<PathBuf>,
    #[arg(long)]
    pub preset: Option<String>,
    /// Extra `key=value` setting; repeatable, applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub decay: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub teacher_forcing: Option<f64>,
    #[arg(long)]
    pub dropout: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Epochs without improvement before stopping; 0 disables.
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub workers: Option<usize>,
    /// Training log (JSON lines); defaults to `<out>.log.jsonl`.
    #[arg(long)]
    pub log: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DecodeArgs {
    /// Teacher checkpoint.
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Output pseudo-label file.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 5)]
    pub beam_size: usize,
    #[arg(long, default_value_t = 5)]
    pub top_k: usize,
    /// Output length limit including eos; per-utterance default otherwise.
    #[arg(long)]
    pub max_len: Option<usize>,
    #[arg(long)]
    pub workers: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Beam width; greedy decoding when absent.
    #[arg(long)]
    pub beam_size: Option<usize>,
    #[arg(long)]
    pub max_len: Option<usize>,
    /// Report file; the report always goes to stdout as well.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub workers: Option<usize>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Model size to check; only `tiny` is supported.
    #[arg(long, default_value = "tiny")]
    pub sizes: String,
    #[arg(long, hide = true)]
    pub corrupt_gradient: bool,
}

fn seed_override(flag: Option<u64>) -> Result<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(s) => s
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| SkdError::Usage(format!("{SEED_ENV}={s:?} is not an unsigned integer"))),
        Err(_) => Ok(flag),
    }
}

fn threads(workers: Option<usize>) -> Threads {
    Threads::new(workers.unwrap_or(1))
}

fn utterance_max_len(model: &Seq2Seq<f32>, u: &Utterance, max_len: Option<usize>) -> usize {
    max_len.unwrap_or_else(|| default_max_len(model.config().encoder_len(u.features.num_frames()).unwrap_or(1)))
}

pub fn synth_data(args: &SynthArgs) -> Result<()> {
    let start = Instant::now();
    let seed = seed_override(Some(args.seed))?.unwrap_or(args.seed);
    let split = match args.split.as_deref() {
        Some(&[a, b, c]) => Some([a, b, c]),
        Some(_) => return Err(SkdError::Usage("--split takes three sizes: train,dev,test".into())),
        None => None,
    };
    let cfg = SynthConfig {
        utterances: args.utterances,
        min_len: args.min_len,
        max_len: args.max_len,
        noise_std: args.noise_std,
        dim: args.dim,
        seed,
        split,
    };
    fs::create_dir_all(&args.out).map_err(SkdError::io(&args.out))?;
    let written = write_corpus(&args.out, &cfg)?;
    let [a, b, c] = cfg.split_sizes();
    println!("wrote {} utterances to {} (train {a}, dev {b}, test {c})", cfg.utterances, args.out.display());

    let mut run = RunManifest::new("synth-data");
    for (k, v) in [
        ("utterances", cfg.utterances.to_string()),
        ("min_len", cfg.min_len.to_string()),
        ("max_len", cfg.max_len.to_string()),
        ("noise_std", cfg.noise_std.to_string()),
        ("dim", cfg.dim.to_string()),
        ("split", format!("{a},{b},{c}")),
    ] {
        run.config.insert(k.into(), v);
    }
    run.seed = Some(seed);
    written.iter().filter(|p| p.extension().is_some_and(|e| e == "jsonl")).for_each(|p| run.output(p));
    run.wall_clock_secs = start.elapsed().as_secs_f64();
    run.write(&args.out)?;
    Ok(())
}

pub fn train_cmd(args: &TrainArgs) -> Result<()> {
    let start = Instant::now();
    let exec = threads(args.workers);
    let data = manifest::load_dataset(&args.data, &exec)?;
    let dim = data
        .first()
        .map(|u| u.features.dim())
        .ok_or_else(|| SkdError::Usage(format!("{}: no utterances", args.data.display())))?;
    if let Some(u) = data.iter().find(|u| u.features.dim() != dim) {
        return Err(SkdError::Usage(format!("{}: dimension {} differs from {dim}", u.id(), u.features.dim())));
    }

    let mut run = RunManifest::new("train");
    run.input(&args.data)?;
    let mut rc = match &args.config {
        Some(p) => {
            run.input(p)?;
            let text = fs::read_to_string(p).map_err(SkdError::io(p))?;
            RunConfig::from_text(&text)?
        }
        None => RunConfig::default(),
    };
    for s in &args.set {
        rc.set_arg(s)?;
    }
    if let Some(p) = &args.preset {
        rc.preset = Some(p.clone());
    }
    let mut tc = TrainConfig::default();
    let mut mc = rc.resolve(dim, &mut tc)?;
    if let Some(v) = args.lr {
        tc.learning_rate = v;
    }
    if let Some(v) = args.decay {
        tc.decay_per_epoch = v;
    }
    if let Some(v) = args.batch_size {
        tc.batch_size = v;
    }
    if let Some(v) = args.teacher_forcing {
        tc.teacher_forcing_rate = v;
    }
    if let Some(v) = args.dropout {
        tc.dropout = v;
        mc.dropout = v;
    }
    if let Some(v) = args.epochs {
        tc.max_epochs = v;
    }
    if let Some(v) = args.patience {
        tc.patience = v;
    }
    if let Some(v) = seed_override(args.seed)? {
        tc.seed = v;
    }
    tc.validate()?;

    let pairs: Vec<TrainingPair> = match &args.labels {
        Some(p) => {
            run.input(p)?;
            let set = labels::read_labels(p)?;
            let (pairs, skipped) = expand_dataset(&data, &set)?;
            println!(
                "{} pseudo-label pairs from {} utterances ({skipped} without hypotheses)",
                pairs.len(),
                data.len()
            );
            pairs
        }
        None => data.iter().map(TrainingPair::from).collect(),
    };
    let dev = match &args.dev {
        Some(p) => {
            run.input(p)?;
            manifest::load_dataset(p, &exec)?
        }
        None => Vec::new(),
    };

    let mut model = Seq2Seq::<f32>::new(mc.clone(), tc.seed)?;
    println!("{} parameters, {} training pairs", model.params().numel(), pairs.len());
    let log_path = args.log.clone().unwrap_or_else(|| {
        let mut name = args.out.file_name().unwrap_or_default().to_os_string();
        name.push(".log.jsonl");
        args.out.with_file_name(name)
    });
    let file = File::create(&log_path).map_err(SkdError::io(&log_path))?;
    let mut log = BufWriter::new(file);
    let mut log_err = None;
    let mut on_epoch = |r: &EpochRecord| {
        let line = serde_json::json!({
            "epoch": r.epoch,
            "step": r.step,
            "loss": r.loss,
            "lr": r.lr,
            "val_cer": r.val_cer,
        });
        match r.val_cer {
            Some(c) => eprintln!("epoch {:>3}  loss {:.4}  lr {:.3e}  dev CER {c:.2}%", r.epoch, r.loss, r.lr),
            None => eprintln!("epoch {:>3}  loss {:.4}  lr {:.3e}", r.epoch, r.loss, r.lr),
        }
        if let Err(e) = writeln!(log, "{line}").and_then(|_| log.flush()) {
            log_err.get_or_insert(e);
        }
    };
    let outcome = train(&mut model, &pairs, &dev, &tc, &exec, &mut on_epoch)?;
    if let Some(e) = log_err {
        return Err(SkdError::Io { path: log_path, source: e });
    }
    if !outcome.rejected.is_empty() {
        eprintln!("skipped {} batch updates with non-finite gradients", outcome.rejected.len());
    }

    if outcome.best_epoch.is_some() {
        let digest = checkpoint::save(&args.out, &model)?;
        println!(
            "saved {} (epoch {}, {} steps, sha256 {digest})",
            args.out.display(),
            outcome.best_epoch.unwrap_or(0),
            outcome.steps
        );
        run.output(&args.out);
    }
    run.output(&log_path);
    run.config = describe(&mc, &tc);
    run.seed = Some(tc.seed);
    run.wall_clock_secs = start.elapsed().as_secs_f64();
    run.write(&args.out)?;
    match outcome.stop {
        StopReason::Diverged => Err(SkdError::Diverged(format!(
            "non-finite loss after {} epochs",
            outcome.epochs
        ))),
        StopReason::Patience => {
            println!("stopped early after {} epochs", outcome.epochs);
            Ok(())
        }
        StopReason::MaxEpochs => Ok(()),
    }
}

pub fn decode_cmd(args: &DecodeArgs) -> Result<()> {
    let start = Instant::now();
    BeamConfig::new(args.beam_size, args.top_k, args.max_len.unwrap_or(1))
        .map_err(|e| SkdError::Usage(e.to_string()))?;
    let exec = threads(args.workers);
    let (teacher, digest) = checkpoint::load(&args.model)?;
    let data = manifest::load_dataset(&args.data, &exec)?;
    let set = generate_pseudo_labels(&teacher, &data, args.beam_size, args.top_k, args.max_len, &digest, &exec)?;
    labels::write(&args.out, &set)?;
    let empty = set.empty_ids();
    println!(
        "{} hypotheses for {} utterances, {} empty beams",
        set.hypothesis_count(),
        set.entries.len(),
        empty.len()
    );
    for id in empty {
        eprintln!("empty beam: {id}");
    }

    let mut run = RunManifest::new("decode");
    run.input(&args.model)?;
    run.input(&args.data)?;
    run.config.insert("beam_size".into(), args.beam_size.to_string());
    run.config.insert("top_k".into(), args.top_k.to_string());
    if let Some(l) = args.max_len {
        run.config.insert("max_len".into(), l.to_string());
    }
    run.output(&args.out);
    run.wall_clock_secs = start.elapsed().as_secs_f64();
    run.write(&args.out)?;
    Ok(())
}

pub fn eval_cmd(args: &EvalArgs) -> Result<()> {
    let start = Instant::now();
    if args.beam_size == Some(0) || args.max_len == Some(0) {
        return Err(SkdError::Usage("beam size and max length must be at least 1".into()));
    }
    let exec = threads(args.workers);
    let (model, _) = checkpoint::load(&args.model)?;
    let data = manifest::load_dataset(&args.data, &exec)?;
    let vocab = Vocabulary;
    let scores = skd_core::exec::Executor::map(&exec, &data, |_, u| -> Result<UtteranceScore> {
        let len = utterance_max_len(&model, u, args.max_len);
        let tokens = match args.beam_size {
            None => greedy_decode(&model, &u.features, len)?.tokens,
            Some(b) => {
                let out = beam_search(&model, &u.features, &BeamConfig::new(b, 1, len)?)?;
                out.hypotheses.into_iter().next().map(|h| h.tokens).unwrap_or_default()
            }
        };
        Ok(UtteranceScore::new(u.id(), vocab.detokenize(&u.target), vocab.detokenize(&tokens)))
    });
    let report = EvalReport::new(scores.into_iter().collect::<Result<_>>()?)?;
    let text = report::render(&report);
    print!("{text}");

    if let Some(out) = &args.out {
        write_atomic(out, text.as_bytes())?;
        let mut run = RunManifest::new("eval");
        run.input(&args.model)?;
        run.input(&args.data)?;
        match args.beam_size {
            Some(b) => run.config.insert("beam_size".into(), b.to_string()),
            None => run.config.insert("search".into(), "greedy".into()),
        };
        if let Some(l) = args.max_len {
            run.config.insert("max_len".into(), l.to_string());
        }
        run.output(out);
        run.wall_clock_secs = start.elapsed().as_secs_f64();
        run.write(out)?;
    }
    Ok(())
}

pub fn gradcheck_cmd(args: &GradcheckArgs) -> Result<()> {
    if args.sizes != "tiny" {
        return Err(SkdError::Usage(format!("unsupported size {:?}; only `tiny` is available", args.sizes)));
    }
    let seed = seed_override(Some(args.seed))?.unwrap_or(args.seed);
    let mut failed = Vec::new();
    for c in gradcheck_suite(seed, args.corrupt_gradient)? {
        let ok = c.report.max_rel_error < TOLERANCE;
        let worst = c.report.worst.as_ref().map_or(String::new(), |(n, i)| format!(" at {n}[{i}]"));
        println!(
            "{:<9} max rel error {:.3e}{worst} over {} coordinates: {}",
            c.loss,
            c.report.max_rel_error,
            c.report.checked,
            if ok { "ok" } else { "FAIL" }
        );
        if !ok {
            failed.push(c.loss);
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(SkdError::CheckFailed(format!("gradient mismatch in {}", failed.join(", "))))
    }
}

pub fn dispatch(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::SynthData(a) => synth_data(a),
        Command::Train(a) => train_cmd(a),
        Command::Decode(a) => decode_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Gradcheck(a) => gradcheck_cmd(a),
    }
}

/// Parses the process arguments, runs the command and returns the exit status.
pub fn run() -> i32 {
    let cli = Cli::parse();
    match dispatch(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
