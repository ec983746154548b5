use std::path::{Path, PathBuf};
use std::process::ExitCode;

use c2l::config::{AugmentVariant, RunConfig};
use c2l::pipeline::{self, EncoderSource, EvalKind, PretrainOptions};
use c2l::trainer::MixupMode;
use clap::{Args, Parser, Subcommand};

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

/// Contrastive pretraining with batch/feature mixup, a momentum teacher and
/// a memory queue, plus probe/fine-tune evaluation.
#[derive(Parser, Debug)]
#[command(name = "c2l", version)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// JSON run configuration; flags override its keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for every random component of the run.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (a file path for `export`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Full checkpoint to continue from (pretrain only).
    #[arg(long, global = true)]
    resume: Option<PathBuf>,
    /// Single-threaded, bitwise-reproducible execution.
    #[arg(long, global = true)]
    deterministic: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic corpus (pretrain/, train/, test/).
    Synth,
    /// Run contrastive pretraining.
    Pretrain(PretrainArgs),
    /// Linear probe on frozen encoder features.
    Probe(EvalArgs),
    /// Fine-tune the whole encoder with a linear head.
    Finetune(EvalArgs),
    /// Pretrain-and-probe over a grid of mixup modes, queue lengths and
    /// augmentation settings.
    Ablate(AblateArgs),
    /// Write a student-only export from any checkpoint.
    Export(ExportArgs),
}

#[derive(Args, Debug)]
struct PretrainArgs {
    /// Dataset root (with pretrain/) or a directory holding manifest.csv.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    mixup: Option<MixupMode>,
    #[arg(long)]
    queue_len: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Numbered checkpoint cadence in epochs (0 disables).
    #[arg(long)]
    checkpoint_every: Option<usize>,
    /// Stop after this many epochs, leaving a resumable checkpoint.
    #[arg(long)]
    stop_after: Option<usize>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Dataset root with train/ and test/.
    #[arg(long)]
    data: PathBuf,
    /// Encoder checkpoint (student export or full checkpoint).
    #[arg(long, conflicts_with = "init", required_unless_present = "init")]
    encoder: Option<PathBuf>,
    /// `random`: evaluate a freshly initialized encoder instead.
    #[arg(long, value_parser = ["random"])]
    init: Option<String>,
    /// Comma-separated seeds; defaults to the run seed.
    #[arg(long, value_delimiter = ',')]
    seeds: Vec<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Fail when any class has an undefined AUROC.
    #[arg(long)]
    strict: bool,
}

#[derive(Args, Debug)]
struct AblateArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_delimiter = ',')]
    modes: Vec<MixupMode>,
    #[arg(long, value_delimiter = ',')]
    queue_lens: Vec<usize>,
    #[arg(long, value_delimiter = ',', value_parser = parse_variant)]
    augment: Vec<AugmentVariant>,
    #[arg(long, value_delimiter = ',')]
    seeds: Vec<u64>,
    /// Pretraining epochs per cell.
    #[arg(long)]
    epochs: Option<usize>,
}

#[derive(Args, Debug)]
struct ExportArgs {
    /// Checkpoint to read.
    checkpoint: PathBuf,
}

fn parse_variant(s: &str) -> Result<AugmentVariant, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string()))
        .map_err(|_| format!("unknown augmentation variant {s:?}"))
}

enum Failure {
    Usage(String),
    Runtime(c2l::Error),
}

impl From<c2l::Error> for Failure {
    fn from(e: c2l::Error) -> Self {
        match e {
            c2l::Error::Config(m) => Failure::Usage(m),
            e => Failure::Runtime(e),
        }
    }
}

fn require_out(common: &Common) -> Result<&Path, Failure> {
    common
        .out
        .as_deref()
        .ok_or_else(|| Failure::Usage("--out is required".into()))
}

fn load_config(common: &Common) -> Result<RunConfig, Failure> {
    let mut run = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if common.seed.is_some() {
        run.seed = common.seed;
    }
    if common.deterministic {
        run.deterministic = true;
    }
    if let Some(o) = &common.out {
        run.out = Some(o.clone());
    }
    Ok(run)
}

fn print_reports(kind: EvalKind, reports: &[c2l::eval::EvalReport], strict: bool) -> Result<(), Failure> {
    for r in reports {
        for c in &r.per_class {
            match c.auroc {
                Some(a) => println!("{} seed {} {}: auroc {a:.4}", kind.name(), r.seed, c.class),
                None => println!("{} seed {} {}: auroc undefined", kind.name(), r.seed, c.class),
            }
        }
    }
    match pipeline::mean_of(reports) {
        Some(m) => println!("{} mean auroc {m:.4} over {} seed(s)", kind.name(), reports.len()),
        None => println!("{} mean auroc undefined", kind.name()),
    }
    let undefined: Vec<&str> = reports.iter().flat_map(|r| r.undefined_classes()).collect();
    if strict && !undefined.is_empty() {
        return Err(Failure::Runtime(c2l::Error::SingleClass));
    }
    Ok(())
}

fn evaluate(mut run: RunConfig, kind: EvalKind, a: EvalArgs, common: &Common) -> Result<(), Failure> {
    let out = require_out(common)?;
    if let Some(e) = a.epochs {
        match kind {
            EvalKind::Probe => run.probe.epochs = e,
            EvalKind::Finetune => run.finetune.epochs = e,
        }
    }
    let run = run.resolve()?;
    let source = match a.encoder {
        Some(p) => EncoderSource::Checkpoint(p),
        None => EncoderSource::Random,
    };
    let seeds = if a.seeds.is_empty() {
        vec![match kind {
            EvalKind::Probe => run.probe.seed,
            EvalKind::Finetune => run.finetune.seed,
        }]
    } else {
        a.seeds
    };
    let reports = pipeline::cmd_eval(&run, kind, &a.data, out, &source, &seeds)?;
    print_reports(kind, &reports, a.strict)
}

fn run(cli: Cli) -> Result<(), Failure> {
    let common = &cli.common;
    if common.resume.is_some() && !matches!(cli.command, Command::Pretrain(_)) {
        return Err(Failure::Usage("--resume only applies to pretrain".into()));
    }
    let mut run = load_config(common)?;
    match cli.command {
        Command::Synth => {
            let out = require_out(common)?;
            let run = run.resolve()?;
            pipeline::cmd_synth(&run, out)?;
            println!("wrote synthetic corpus to {}", out.display());
        }
        Command::Pretrain(a) => {
            let out = require_out(common)?;
            let t = &mut run.train;
            if let Some(v) = a.epochs {
                t.epochs = v;
            }
            if let Some(v) = a.mixup {
                t.mixup = v;
            }
            if let Some(v) = a.queue_len {
                t.queue_len = v;
            }
            if let Some(v) = a.batch_size {
                t.batch_size = v;
            }
            if let Some(v) = a.lr {
                t.lr = v;
            }
            if let Some(v) = a.checkpoint_every {
                run.checkpoint_every = v;
            }
            let run = run.resolve()?;
            let opts = PretrainOptions {
                resume: common.resume.clone(),
                stop_after: a.stop_after,
            };
            let outcome = pipeline::cmd_pretrain(&run, &a.data, out, &opts)?;
            match outcome.export {
                Some(p) => println!("pretraining finished after {} steps; student at {}", outcome.state.iteration, p.display()),
                None => println!(
                    "stopped at epoch {}; resume with --resume {}",
                    outcome.state.epoch,
                    out.join(pipeline::LAST_CHECKPOINT).display()
                ),
            }
        }
        Command::Probe(a) => evaluate(run, EvalKind::Probe, a, common)?,
        Command::Finetune(a) => evaluate(run, EvalKind::Finetune, a, common)?,
        Command::Ablate(a) => {
            let out = require_out(common)?;
            let ab = &mut run.ablate;
            if !a.modes.is_empty() {
                ab.modes = a.modes;
            }
            if !a.queue_lens.is_empty() {
                ab.queue_lens = a.queue_lens;
            }
            if !a.augment.is_empty() {
                ab.augment = a.augment;
            }
            if !a.seeds.is_empty() {
                ab.seeds = a.seeds;
            } else if let Some(s) = run.seed {
                ab.seeds = vec![s];
            }
            if a.epochs.is_some() {
                ab.epochs = a.epochs;
            }
            let run = run.resolve()?;
            let rows = pipeline::cmd_ablate(&run, &a.data, out)?;
            print!("{}", pipeline::ablation_csv(&rows));
        }
        Command::Export(a) => {
            let out = require_out(common)?;
            pipeline::cmd_export(&a.checkpoint, out)?;
            println!("wrote student export to {}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            let mut src = std::error::Error::source(&e);
            while let Some(s) = src {
                eprintln!("  caused by: {s}");
                src = s.source();
            }
            ExitCode::from(2)
        }
    }
}
