use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use surfacefuse::analysis::{self, SpectrumLabel, Split};
use surfacefuse::config::{prepare, DataConfig, Prepared, RunConfig};
use surfacefuse::data::{write_dictionary, write_side, Example};
use surfacefuse::gradcheck::{model_suite, primitive_suite, GradCheckOptions, SuiteEntry};
use surfacefuse::surface_fusion::FusionMode;
use surfacefuse::train::{corpus_bleu, decode_all, evaluate, Trainer, LAST_CHECKPOINT};
use surfacefuse::transformer::checkpoint::{model_from_checkpoint, Checkpoint};
use surfacefuse::transformer::Seq2Seq;
use surfacefuse::{Error, Result};

/// Name of the resolved configuration inside a run directory.
const RUN_CONFIG: &str = "config.json";

/// Largest relative gradient error accepted by `gradcheck`.
const GRAD_TOLERANCE: f64 = 1e-4;

#[derive(Parser)]
#[command(name = "surfacefuse", version, about = "Encoder layer fusion experiments on a small Transformer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset as text files.
    Gen(GenArgs),
    /// Train a model; writes checkpoints, metrics and the resolved config.
    Train(TrainArgs),
    /// Decode a data split or a file of source sentences.
    Decode(DecodeArgs),
    /// Run a diagnostic on a trained checkpoint.
    Analyze(AnalyzeArgs),
    /// Compare analytic gradients with finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Task {
    Copy,
    Cipher,
}

#[derive(Args)]
struct GenArgs {
    /// Take the task from a run config instead of the flags below.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "cipher")]
    task: Task,
    #[arg(long, default_value_t = 40)]
    content: usize,
    /// Fraction of tokens the cipher maps to themselves.
    #[arg(long, default_value_t = 0.25)]
    shared: f64,
    /// Swap adjacent target pairs.
    #[arg(long)]
    reorder: bool,
    #[arg(long, default_value_t = 3)]
    min_len: usize,
    #[arg(long, default_value_t = 10)]
    max_len: usize,
    #[arg(long, default_value_t = 5000)]
    train: usize,
    #[arg(long, default_value_t = 500)]
    valid: usize,
    #[arg(long, default_value_t = 500)]
    test: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

/// Overrides applied on top of a run config.
#[derive(Args)]
struct Overrides {
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    mode: Option<FusionMode>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    tau: Option<f64>,
    /// DropConnect probability of the layer attention weights.
    #[arg(long)]
    dropconnect: Option<f64>,
}

impl Overrides {
    fn apply(&self, config: &mut RunConfig) {
        if let Some(s) = self.seed {
            config.train.seed = s;
        }
        if let Some(m) = self.mode {
            config.fusion.mode = m;
        }
        if let Some(l) = self.lambda {
            config.fusion.lambda = l;
        }
        if self.tau.is_some() {
            config.fusion.tau = self.tau;
        }
        if let Some(p) = self.dropconnect {
            config.fusion.p = p;
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    /// Run directory; defaults to `out` in the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Continue from the last checkpoint in the run directory.
    #[arg(long)]
    resume: bool,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Clone, Copy, ValueEnum)]
enum DataSplit {
    Valid,
    Test,
}

#[derive(Args)]
struct DecodeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Run config; defaults to the one next to the checkpoint.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Source sentences to translate, one per line, instead of a split.
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "test")]
    split: DataSplit,
    #[arg(long)]
    beam: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
    /// Hypothesis file; defaults to `decode.txt` next to the checkpoint.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    Heatmap,
    MaskSweep,
    Svd,
    EmbedSim,
}

#[derive(Args)]
struct AnalyzeArgs {
    #[arg(value_enum)]
    kind: Kind,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Report directory; defaults to `analysis/<kind>` next to the checkpoint.
    #[arg(long)]
    out: Option<PathBuf>,
    /// mask-sweep: only mask this encoder layer (0 is the embedding layer).
    #[arg(long)]
    layer: Option<usize>,
    /// svd: decoder layer whose weights order the dimensions (default: top).
    #[arg(long)]
    decoder_layer: Option<usize>,
    /// embed-sim: dictionary subset; both when omitted.
    #[arg(long)]
    split: Option<Split>,
    /// svd: seed of the random dimension half.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Scope {
    Primitives,
    Model,
    All,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, value_enum, default_value = "all")]
    scope: Scope,
    /// Perturb the analytic gradients; the check must then fail.
    #[arg(long)]
    corrupt: bool,
    /// Check this many random coordinates per case instead of all.
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long, default_value_t = 1e-5)]
    eps: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Write the report as JSON.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Gen(a) => cmd_gen(a),
        Command::Train(a) => cmd_train(a),
        Command::Decode(a) => cmd_decode(a),
        Command::Analyze(a) => cmd_analyze(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn write_splits(dir: &Path, data: &Prepared) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for (name, split) in [("train", &data.train), ("valid", &data.valid), ("test", &data.test)] {
        write_side(dir.join(format!("{name}.src")), split, false, &data.src_vocab)?;
        write_side(dir.join(format!("{name}.tgt")), split, true, &data.tgt_vocab)?;
    }
    if let Some(dict) = &data.dictionary {
        write_dictionary(dir.join("alignment.json"), dict, &data.src_vocab, &data.tgt_vocab)?;
    }
    Ok(())
}

fn cmd_gen(a: GenArgs) -> Result<u8> {
    let (spec, seed) = match &a.config {
        Some(path) => {
            let c = RunConfig::load(path)?;
            (c.data, c.train.seed)
        }
        None => {
            let spec = match a.task {
                Task::Copy => DataConfig::Copy {
                    content: a.content,
                    min_len: a.min_len,
                    max_len: a.max_len,
                    train: a.train,
                    valid: a.valid,
                    test: a.test,
                },
                Task::Cipher => DataConfig::Cipher {
                    content: a.content,
                    shared_fraction: a.shared,
                    reorder: a.reorder,
                    min_len: a.min_len,
                    max_len: a.max_len,
                    train: a.train,
                    valid: a.valid,
                    test: a.test,
                },
            };
            (spec, a.seed)
        }
    };
    if matches!(spec, DataConfig::Files { .. }) {
        return Err(Error::Config {
            path: "data.task".into(),
            message: "gen needs a synthetic task".into(),
        });
    }
    let data = prepare(&spec, seed)?;
    write_splits(&a.out, &data)?;
    eprintln!(
        "wrote {} train, {} valid, {} test pairs to {}",
        data.train.len(),
        data.valid.len(),
        data.test.len(),
        a.out.display()
    );
    Ok(0)
}

fn cmd_train(a: TrainArgs) -> Result<u8> {
    let mut config = RunConfig::load(&a.config)?;
    a.overrides.apply(&mut config);
    let out = a.out.clone().or_else(|| config.out.clone()).ok_or_else(|| Error::Config {
        path: "out".into(),
        message: "no run directory given (use --out or set `out`)".into(),
    })?;
    let data = prepare(&config.data, config.train.seed)?;
    config.resolve(&data)?;
    config.out = Some(out.clone());
    std::fs::create_dir_all(&out)?;
    std::fs::write(out.join(RUN_CONFIG), config.to_json() + "\n")?;

    let last = out.join(LAST_CHECKPOINT);
    let mut trainer = if a.resume && last.exists() {
        let t = Trainer::resume(&Checkpoint::load(&last)?, config.train.clone())?;
        if t.model.config != config.model || t.model.fusion != config.fusion {
            return Err(Error::Config {
                path: "model".into(),
                message: "checkpoint does not match the run config".into(),
            });
        }
        eprintln!("resuming at step {}", t.step);
        t
    } else {
        Trainer::new(Seq2Seq::new(config.model.clone(), config.fusion.clone(), config.train.seed)?, config.train.clone())?
    };
    let start = Instant::now();
    let report = trainer.run(&data.train, &data.valid, Some(&out))?;
    for row in &report.log {
        eprintln!(
            "step {:>6}  loss {:.4}  acc {:.4}  val_loss {:.4}  val_acc {:.4}",
            row.step, row.loss, row.token_acc, row.val_loss, row.val_acc
        );
    }
    eprintln!("trained to step {} in {:.1?}", trainer.step, start.elapsed());
    Ok(0)
}

/// The run config for a checkpoint: explicit, or the one in its directory.
fn run_config_for(checkpoint: &Path, explicit: Option<&Path>) -> Result<RunConfig> {
    let path = match explicit {
        Some(p) => p.to_path_buf(),
        None => checkpoint.parent().unwrap_or(Path::new(".")).join(RUN_CONFIG),
    };
    RunConfig::load(&path)
}

fn load_model(checkpoint: &Path) -> Result<Seq2Seq> {
    model_from_checkpoint(&Checkpoint::load(checkpoint)?)
}

fn cmd_decode(a: DecodeArgs) -> Result<u8> {
    let mut config = run_config_for(&a.checkpoint, a.config.as_deref())?;
    if let Some(b) = a.beam {
        config.decode.beam = b;
    }
    if let Some(al) = a.alpha {
        config.decode.alpha = al;
    }
    config.validate()?;
    let model = load_model(&a.checkpoint)?;
    let data = prepare(&config.data, config.train.seed)?;
    let split: Option<&[Example]> = match (&a.input, a.split) {
        (Some(_), _) => None,
        (None, DataSplit::Valid) => Some(&data.valid),
        (None, DataSplit::Test) => Some(&data.test),
    };
    let sources: Vec<Vec<usize>> = match (&a.input, split) {
        (Some(path), _) => std::fs::read_to_string(path)?
            .lines()
            .map(|l| data.src_vocab.encode(l))
            .collect(),
        (None, split) => split.unwrap_or_default().iter().map(|e| e.src.clone()).collect(),
    };
    let start = Instant::now();
    let hyps = decode_all(&model, &sources, &config.decode)?;
    let elapsed = start.elapsed();
    let out = a
        .out
        .unwrap_or_else(|| a.checkpoint.parent().unwrap_or(Path::new(".")).join("decode.txt"));
    let mut text = String::new();
    for h in &hyps {
        text.push_str(&data.tgt_vocab.decode(h));
        text.push('\n');
    }
    std::fs::write(&out, text)?;
    eprintln!("decoded {} sentences in {:.2?}", hyps.len(), elapsed);
    if let Some(split) = split {
        let refs: Vec<Vec<usize>> = split.iter().map(|e| e.tgt.clone()).collect();
        let eval = evaluate(&model, split, config.train.max_tokens)?;
        let report = json!({
            "sentences": hyps.len(),
            "bleu": corpus_bleu(&hyps, &refs)?,
            "token_acc": eval.token_acc,
            "loss": eval.loss,
        });
        println!("{report}");
    }
    Ok(0)
}

fn cmd_analyze(a: AnalyzeArgs) -> Result<u8> {
    let model = load_model(&a.checkpoint)?;
    let base = a.checkpoint.parent().unwrap_or(Path::new("."));
    let name = match a.kind {
        Kind::Heatmap => "heatmap",
        Kind::MaskSweep => "mask-sweep",
        Kind::Svd => "svd",
        Kind::EmbedSim => "embed-sim",
    };
    let out = a.out.clone().unwrap_or_else(|| base.join("analysis").join(name));
    match a.kind {
        Kind::Heatmap => {
            let report = analysis::heatmap(&model)?;
            std::fs::create_dir_all(&out)?;
            analysis::write_json(out.join("report.json"), &report)?;
            analysis::write_pgm(out.join("heatmap.pgm"), &report.matrix)?;
            let weights = model.layer_weights()?;
            analysis::write_json(out.join("weights.json"), &analysis::TensorDump::from(&weights))?;
        }
        Kind::MaskSweep => {
            let config = run_config_for(&a.checkpoint, a.config.as_deref())?;
            let data = prepare(&config.data, config.train.seed)?;
            let mut report = analysis::mask_sweep(&model, &data.test, config.train.max_tokens, &config.decode)?;
            if let Some(n) = a.layer {
                if n >= report.layers.len() {
                    return Err(Error::Index(format!("encoder layer {n} of {}", report.layers.len())));
                }
                report.layers = vec![report.layers.swap_remove(n)];
            }
            std::fs::create_dir_all(&out)?;
            analysis::write_json(out.join("report.json"), &report)?;
        }
        Kind::Svd => {
            let reports = if model.fusion.mode.is_layer_attention() {
                let m = a.decoder_layer.unwrap_or(model.config.decoder_layers);
                analysis::expressivity(&model, m, a.seed)?
            } else {
                vec![analysis::svd_spectrum(
                    &analysis::word_embeddings(&model)?,
                    SpectrumLabel::FullEmbedding,
                )?]
            };
            std::fs::create_dir_all(&out)?;
            for r in &reports {
                let label = serde_json::to_value(r.label)?;
                let label = label.as_str().unwrap_or("spectrum");
                analysis::write_spectrum_csv(out.join(format!("{label}.csv")), r)?;
            }
            analysis::write_json(out.join("report.json"), &reports)?;
        }
        Kind::EmbedSim => {
            let config = run_config_for(&a.checkpoint, a.config.as_deref())?;
            let data = prepare(&config.data, config.train.seed)?;
            let dict = data.dictionary.as_ref().ok_or_else(|| Error::Data("the dataset has no alignment dictionary".into()))?;
            let splits = match a.split {
                Some(s) => vec![s],
                None => vec![Split::All, Split::NonShared],
            };
            let reports = splits
                .into_iter()
                .map(|s| analysis::model_cosine(&model, dict, &data.src_vocab, &data.tgt_vocab, s))
                .collect::<Result<Vec<_>>>()?;
            std::fs::create_dir_all(&out)?;
            analysis::write_json(out.join("report.json"), &reports)?;
        }
    }
    eprintln!("wrote {}", out.display());
    Ok(0)
}

fn cmd_gradcheck(a: GradcheckArgs) -> Result<u8> {
    let opts = GradCheckOptions {
        eps: a.eps,
        samples: a.samples,
        seed: a.seed,
        corrupt: a.corrupt,
    };
    let mut entries: Vec<SuiteEntry> = Vec::new();
    if a.scope != Scope::Model {
        entries.extend(primitive_suite(&opts)?);
    }
    if a.scope != Scope::Primitives {
        entries.extend(model_suite(&opts)?);
    }
    let mut failed = 0;
    let mut rows = Vec::new();
    for e in &entries {
        let ok = e.report.max_rel_error < GRAD_TOLERANCE;
        failed += usize::from(!ok);
        println!(
            "{} {:<24} max_rel_error {:.3e}  checked {:>6}  kinks {}",
            if ok { "PASS" } else { "FAIL" },
            e.name,
            e.report.max_rel_error,
            e.report.checked,
            e.report.kinks
        );
        rows.push(json!({
            "name": e.name,
            "max_rel_error": e.report.max_rel_error,
            "checked": e.report.checked,
            "kinks": e.report.kinks,
            "worst": e.report.worst,
            "pass": ok,
        }));
    }
    if let Some(path) = &a.out {
        analysis::write_json(path, &json!({ "tolerance": GRAD_TOLERANCE, "cases": rows }))?;
    }
    if failed > 0 {
        eprintln!("{failed} of {} gradient checks failed", entries.len());
        return Ok(2);
    }
    Ok(0)
}
