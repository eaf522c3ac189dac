//! Command-line pipeline: synthetic data generation, training, decoding,
//! evaluation, and the regime benchmark.
//!
//! Every command writes a `config.json` snapshot into its output directory
//! so a run can be reproduced from the artifacts alone. Flags override
//! values from `--config <file>` (a JSON rendering of the same snapshot),
//! which override built-in defaults.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use pipedec_bench::{run_benchmark, BenchConfig, RegimeModels};
use pipedec_core::data::{
    build_vocab, encode_examples, gen_sentence_copy, gen_span_copy, load_jsonl, save_jsonl,
    split_ids_on_separator, SyntheticSpec,
};
use pipedec_core::decode::{pipelined_decode, sequential_greedy, write_trace_jsonl};
use pipedec_core::model::{checkpoint, Model, ModelConfig, Vocab};
use pipedec_core::schedule::PipelineSchedule;
use pipedec_core::train::{fit, RunMetadata, TrainConfig};
use pipedec_core::Regime;

const OUT_ROOT_ENV: &str = "PIPEDEC_OUT_ROOT";

#[derive(Parser)]
#[command(
    name = "pipedec",
    about = "Encoder-decoder transformer with a pipelined parallel decoder",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset and split it into train/test files.
    GenData(GenDataArgs),
    /// Train a model under one decoding regime.
    Train(TrainArgs),
    /// Decode a dataset and print per-example subsequences.
    Decode(DecodeArgs),
    /// Score a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Compare regimes: quality, step counts, throughput, speedup.
    Bench(BenchArgs),
}

/// Errors that indicate misuse (exit 2) rather than runtime failure
/// (exit 1).
#[derive(Debug)]
enum CliError {
    Usage(String),
    Runtime(anyhow::Error),
}

impl<E: Into<anyhow::Error>> From<E> for CliError {
    fn from(e: E) -> Self {
        CliError::Runtime(e.into())
    }
}

type CliResult = Result<(), CliError>;

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

fn require_file(path: &Path, what: &str) -> Result<(), CliError> {
    if path.is_file() {
        Ok(())
    } else {
        Err(usage(format!("{what} not found: {}", path.display())))
    }
}

fn out_dir(explicit: &Option<PathBuf>, command: &str) -> PathBuf {
    match explicit {
        Some(p) => p.clone(),
        None => {
            let root = std::env::var(OUT_ROOT_ENV).unwrap_or_else(|_| "runs".into());
            PathBuf::from(root).join(command)
        }
    }
}

/// Self-describing snapshot written into every run directory.
#[derive(Debug, Serialize, Deserialize)]
struct RunConfig {
    format_version: u32,
    command: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    dataset: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    synthetic: Option<SyntheticSpec>,
    #[serde(skip_serializing_if = "Option::is_none")]
    model: Option<ModelConfig>,
    #[serde(skip_serializing_if = "Option::is_none")]
    train: Option<TrainConfig>,
    #[serde(skip_serializing_if = "Option::is_none")]
    schedule: Option<PipelineSchedule>,
    #[serde(skip_serializing_if = "Option::is_none")]
    regime: Option<Regime>,
    seed: u64,
    output_dir: PathBuf,
}

impl RunConfig {
    fn save(&self, dir: &Path) -> std::io::Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(
            dir.join("config.json"),
            serde_json::to_vec_pretty(self).expect("serializable"),
        )
    }
}

// ---------------------------------------------------------------------------
// gen-data
// ---------------------------------------------------------------------------

#[derive(Args)]
struct GenDataArgs {
    /// JSON file holding the generator settings; defaults apply otherwise.
    #[arg(long)]
    spec: Option<PathBuf>,
    /// Task family: span-copy or sentence-copy.
    #[arg(long, default_value = "span-copy")]
    task: String,
    /// Fraction of examples reserved for the test split.
    #[arg(long, default_value_t = 0.2)]
    test_fraction: f64,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    count: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn cmd_gen_data(args: GenDataArgs) -> CliResult {
    let mut spec = match &args.spec {
        Some(path) => {
            require_file(path, "generator spec")?;
            serde_json::from_slice::<SyntheticSpec>(&std::fs::read(path)?)
                .map_err(|e| usage(format!("bad generator spec: {e}")))?
        }
        None => SyntheticSpec::default(),
    };
    if let Some(seed) = args.seed {
        spec.seed = seed;
    }
    if let Some(count) = args.count {
        spec.example_count = count;
    }
    if !(0.0..1.0).contains(&args.test_fraction) {
        return Err(usage("--test-fraction must be in [0, 1)"));
    }
    let examples = match args.task.as_str() {
        "span-copy" => gen_span_copy(&spec)?,
        "sentence-copy" => gen_sentence_copy(&spec)?,
        other => return Err(usage(format!("unknown task `{other}`"))),
    };
    let dir = out_dir(&args.out, "gen-data");
    std::fs::create_dir_all(&dir)?;
    let test_len = ((examples.len() as f64) * args.test_fraction).round() as usize;
    let split = examples.len() - test_len;
    save_jsonl(&examples[..split], &dir.join("train.jsonl"))?;
    save_jsonl(&examples[split..], &dir.join("test.jsonl"))?;
    RunConfig {
        format_version: 1,
        command: "gen-data".into(),
        dataset: None,
        synthetic: Some(spec.clone()),
        model: None,
        train: None,
        schedule: None,
        regime: None,
        seed: spec.seed,
        output_dir: dir.clone(),
    }
    .save(&dir)?;
    println!(
        "wrote {} train / {} test examples to {}",
        split,
        test_len,
        dir.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value = "pipelined")]
    regime: Regime,
    /// JSON config snapshot whose model/train sections seed the run.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    delay: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    max_input_len: Option<usize>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    early_stop_loss: Option<f64>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    model_dim: Option<usize>,
    #[arg(long)]
    feedforward_dim: Option<usize>,
    #[arg(long)]
    dropout: Option<f64>,
    /// Tokens appearing fewer times than this map to the unknown id.
    #[arg(long, default_value_t = 1)]
    min_count: usize,
}

fn cmd_train(args: TrainArgs) -> CliResult {
    require_file(&args.data, "training data")?;
    let base: Option<RunConfig> = match &args.config {
        Some(path) => {
            require_file(path, "config file")?;
            Some(
                serde_json::from_slice(&std::fs::read(path)?)
                    .map_err(|e| usage(format!("bad config file: {e}")))?,
            )
        }
        None => None,
    };

    let examples = load_jsonl(&args.data)?;
    if examples.is_empty() {
        return Err(usage("training data is empty"));
    }
    let vocab = build_vocab(&examples, args.min_count);

    let mut model_cfg = base
        .as_ref()
        .and_then(|c| c.model.clone())
        .unwrap_or_else(|| ModelConfig {
            num_layers: 2,
            num_heads: 4,
            model_dim: 128,
            feedforward_dim: 256,
            vocab_size: 0,
            num_relative_buckets: 32,
            max_relative_distance: 128,
            dropout_rate: 0.0,
        });
    if let Some(v) = args.layers {
        model_cfg.num_layers = v;
    }
    if let Some(v) = args.heads {
        model_cfg.num_heads = v;
    }
    if let Some(v) = args.model_dim {
        model_cfg.model_dim = v;
    }
    if let Some(v) = args.feedforward_dim {
        model_cfg.feedforward_dim = v;
    }
    if let Some(v) = args.dropout {
        model_cfg.dropout_rate = v;
    }
    model_cfg.vocab_size = vocab.len();

    let mut train_cfg = base
        .as_ref()
        .and_then(|c| c.train.clone())
        .unwrap_or_default();
    if let Some(v) = args.delay {
        train_cfg.delay = v;
    }
    if let Some(v) = args.batch_size {
        train_cfg.batch_size = v;
    }
    if let Some(v) = args.learning_rate {
        train_cfg.learning_rate = v;
    }
    if let Some(v) = args.epochs {
        train_cfg.epochs = v;
    }
    if let Some(v) = args.seed {
        train_cfg.seed = v;
    }
    if let Some(v) = args.max_input_len {
        train_cfg.max_input_len = v;
    }
    if let Some(v) = args.weight_decay {
        train_cfg.weight_decay = v;
    }
    if args.early_stop_loss.is_some() {
        train_cfg.early_stop_loss = args.early_stop_loss;
    }

    let dir = out_dir(&args.out, "train");
    std::fs::create_dir_all(&dir)?;
    let encoded = encode_examples(&examples, &vocab);
    let mut model: Model<f32> = Model::new(model_cfg.clone(), train_cfg.seed)?;
    let report = fit(&mut model, &encoded, args.regime, &train_cfg)?;

    vocab.save(&dir.join("vocab.txt"))?;
    checkpoint::save(&model, &vocab.content_hash(), &dir.join("model.ckpt"))?;
    RunMetadata::new(&model, &train_cfg, args.regime, &vocab.content_hash(), &report)
        .save(&dir.join("run.json"))?;
    RunConfig {
        format_version: 1,
        command: "train".into(),
        dataset: Some(args.data.clone()),
        synthetic: None,
        model: Some(model_cfg),
        train: Some(train_cfg.clone()),
        schedule: Some(PipelineSchedule::with_delay(train_cfg.delay)),
        regime: Some(args.regime),
        seed: train_cfg.seed,
        output_dir: dir.clone(),
    }
    .save(&dir)?;
    println!(
        "trained {} epochs (final loss {:.4}); artifacts in {}",
        report.epoch_losses.len(),
        report.epoch_losses.last().copied().unwrap_or(f64::NAN),
        dir.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// decode / eval / bench
// ---------------------------------------------------------------------------

fn load_model_and_vocab(ckpt: &Path, vocab_path: &Path) -> Result<(Model<f32>, Vocab), CliError> {
    require_file(ckpt, "checkpoint")?;
    require_file(vocab_path, "vocab file")?;
    let (model, stored_hash) = checkpoint::load::<f32>(ckpt)?;
    let vocab = Vocab::load(vocab_path)?;
    if vocab.content_hash() != stored_hash {
        return Err(usage(format!(
            "vocab file {} does not match the checkpoint (hash {} vs {})",
            vocab_path.display(),
            vocab.content_hash(),
            stored_hash
        )));
    }
    Ok((model, vocab))
}

#[derive(Args)]
struct DecodeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    vocab: PathBuf,
    #[arg(long)]
    input: PathBuf,
    #[arg(long, default_value = "pipelined")]
    regime: Regime,
    #[arg(long, default_value_t = 1)]
    delay: usize,
    #[arg(long, default_value_t = 50)]
    time_max: usize,
    #[arg(long, default_value_t = 20)]
    sub_max: usize,
    /// Sequential generation cap.
    #[arg(long, default_value_t = 64)]
    max_len: usize,
    /// Write per-step decode traces (line-delimited JSON) here.
    #[arg(long)]
    trace_out: Option<PathBuf>,
}

#[derive(Serialize)]
struct DecodeLine {
    subsequences: Vec<Vec<String>>,
    steps: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    termination: Option<pipedec_core::decode::Termination>,
}

fn cmd_decode(args: DecodeArgs) -> CliResult {
    let (model, vocab) = load_model_and_vocab(&args.checkpoint, &args.vocab)?;
    require_file(&args.input, "input data")?;
    let examples = load_jsonl(&args.input)?;
    let schedule = PipelineSchedule {
        delay: args.delay,
        time_max: args.time_max,
        sub_max: args.sub_max,
    };
    let mut trace_file = match &args.trace_out {
        Some(p) => Some(std::io::BufWriter::new(std::fs::File::create(p)?)),
        None => None,
    };
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    for ex in &examples {
        let input_ids = vocab.encode(&ex.input);
        let line = match args.regime {
            Regime::Pipelined => {
                let r = pipelined_decode(&model, &input_ids, &schedule)?;
                if let Some(f) = trace_file.as_mut() {
                    write_trace_jsonl(&r.trace, f)?;
                }
                DecodeLine {
                    subsequences: r.subsequences.iter().map(|s| vocab.decode(s)).collect(),
                    steps: r.steps,
                    termination: Some(r.termination),
                }
            }
            Regime::Sequential => {
                let r = sequential_greedy(&model, &input_ids, args.max_len)?;
                let subseqs = split_ids_on_separator(&r.tokens, pipedec_core::model::vocab::SEP_ID);
                DecodeLine {
                    subsequences: subseqs.iter().map(|s| vocab.decode(s)).collect(),
                    steps: r.steps,
                    termination: None,
                }
            }
        };
        serde_json::to_writer(&mut out, &line).map_err(anyhow::Error::from)?;
        use std::io::Write;
        writeln!(out)?;
    }
    Ok(())
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    vocab: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "pipelined")]
    regime: Regime,
    #[arg(long, default_value_t = 1)]
    delay: usize,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    workers: Option<usize>,
}

fn cmd_eval(args: EvalArgs) -> CliResult {
    let (model, vocab) = load_model_and_vocab(&args.checkpoint, &args.vocab)?;
    require_file(&args.data, "evaluation data")?;
    let examples = load_jsonl(&args.data)?;
    let mut cfg = BenchConfig::default();
    if let Some(w) = args.workers {
        cfg.workers = w;
    }
    let models = match args.regime {
        Regime::Sequential => RegimeModels {
            sequential: Some(&model),
            pipelined: vec![],
        },
        Regime::Pipelined => RegimeModels {
            sequential: None,
            pipelined: vec![(args.delay, &model)],
        },
    };
    let report = run_benchmark(&models, &examples, &vocab, &cfg).map_err(anyhow::Error::from)?;
    let agg = pipedec_bench::aggregate(&report.runs[0].scores);
    println!(
        "{}",
        serde_json::to_string_pretty(&agg).map_err(anyhow::Error::from)?
    );
    let dir = out_dir(&args.out, "eval");
    std::fs::create_dir_all(&dir)?;
    std::fs::write(
        dir.join("report.json"),
        serde_json::to_vec_pretty(&report).map_err(anyhow::Error::from)?,
    )?;
    Ok(())
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    vocab: PathBuf,
    /// Sequential-regime checkpoint.
    #[arg(long)]
    sequential: Option<PathBuf>,
    /// Pipelined checkpoints as delay=path pairs, repeatable.
    #[arg(long = "pipelined", value_name = "DELAY=PATH")]
    pipelined: Vec<String>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long, default_value_t = 50)]
    time_max: usize,
    #[arg(long, default_value_t = 20)]
    sub_max: usize,
    #[arg(long, default_value_t = 64)]
    seq_max_len: usize,
    #[arg(long, default_value_t = 10)]
    min_group: usize,
}

fn cmd_bench(args: BenchArgs) -> CliResult {
    require_file(&args.vocab, "vocab file")?;
    require_file(&args.data, "benchmark data")?;
    let vocab = Vocab::load(&args.vocab)?;
    let examples = load_jsonl(&args.data)?;

    let mut seq_model = None;
    if let Some(path) = &args.sequential {
        require_file(path, "sequential checkpoint")?;
        let (m, hash) = checkpoint::load::<f32>(path)?;
        check_hash(&vocab, &hash, path)?;
        seq_model = Some(m);
    }
    let mut pipelined_models: Vec<(usize, Model<f32>)> = Vec::new();
    for entry in &args.pipelined {
        let (delay_str, path) = entry
            .split_once('=')
            .ok_or_else(|| usage(format!("--pipelined wants DELAY=PATH, got `{entry}`")))?;
        let delay: usize = delay_str
            .parse()
            .map_err(|_| usage(format!("bad delay `{delay_str}`")))?;
        let path = PathBuf::from(path);
        require_file(&path, "pipelined checkpoint")?;
        let (m, hash) = checkpoint::load::<f32>(&path)?;
        check_hash(&vocab, &hash, &path)?;
        pipelined_models.push((delay, m));
    }
    if seq_model.is_none() && pipelined_models.is_empty() {
        return Err(usage("supply --sequential and/or --pipelined checkpoints"));
    }

    let mut cfg = BenchConfig {
        time_max: args.time_max,
        sub_max: args.sub_max,
        seq_max_len: args.seq_max_len,
        min_group_size: args.min_group,
        ..BenchConfig::default()
    };
    if let Some(w) = args.workers {
        cfg.workers = w;
    }

    let models = RegimeModels {
        sequential: seq_model.as_ref(),
        pipelined: pipelined_models.iter().map(|(d, m)| (*d, m)).collect(),
    };
    let report = run_benchmark(&models, &examples, &vocab, &cfg).map_err(anyhow::Error::from)?;

    let dir = out_dir(&args.out, "bench");
    std::fs::create_dir_all(&dir)?;
    let csv = pipedec_bench::report::csv_string(&report);
    std::fs::write(dir.join("report.csv"), &csv)?;
    pipedec_bench::report::write_plot_data(&report, &dir)?;
    std::fs::write(
        dir.join("report.json"),
        serde_json::to_vec_pretty(&report).map_err(anyhow::Error::from)?,
    )?;
    print!("{csv}");
    println!("artifacts in {}", dir.display());
    Ok(())
}

fn check_hash(vocab: &Vocab, stored: &str, path: &Path) -> Result<(), CliError> {
    if vocab.content_hash() != stored {
        return Err(usage(format!(
            "vocab does not match checkpoint {}",
            path.display()
        )));
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(args) => cmd_gen_data(args),
        Command::Train(args) => cmd_train(args),
        Command::Decode(args) => cmd_decode(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Bench(args) => cmd_bench(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(CliError::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
