//! `mose` command-line tool: train, eval, sr, audit, gradcheck, synth.
//!
//! Exit codes: 0 success, 1 usage or configuration, 2 data or i/o,
//! 3 numeric failure.

mod audit;
pub mod config;
mod eval;
mod train;

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use mose::MoseError;

pub use audit::{audit_report, AuditReport, AuditRow};
pub use config::{RunConfig, TrainConfig};
pub use eval::{eval_corpus, super_resolve, EvalRow, SUMMARY_ID};
pub use train::{checkpoint_name, train, TrainOptions, TrainRow, TrainSummary, FINAL_NAME, LOG_NAME};

pub const EXIT_OK: u8 = 0;
pub const EXIT_USAGE: u8 = 1;
pub const EXIT_DATA: u8 = 2;
pub const EXIT_NUMERIC: u8 = 3;

pub const THREADS_ENV: &str = "MOSE_THREADS";

/// Failure of a command, carrying its exit code.
#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        CliError {
            code: EXIT_USAGE,
            message: message.into(),
        }
    }

    pub fn numeric(message: impl Into<String>) -> Self {
        CliError {
            code: EXIT_NUMERIC,
            message: message.into(),
        }
    }
}

impl From<MoseError> for CliError {
    fn from(e: MoseError) -> Self {
        let code = match e {
            MoseError::InvalidArgument(_) | MoseError::Config(_) | MoseError::Json(_) => EXIT_USAGE,
            MoseError::NonFinite { .. } => EXIT_NUMERIC,
            MoseError::Shape(_) | MoseError::Format { .. } | MoseError::Data(_) | MoseError::Io { .. } => EXIT_DATA,
        };
        CliError {
            code,
            message: e.to_string(),
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "mose", version, about = "Swin2-MoSE multispectral super-resolution")]
pub struct Cli {
    /// Worker threads (default: available cores; MOSE_THREADS overrides).
    #[arg(long, global = true)]
    pub threads: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train on an `lr/` + `hr/` MSR corpus.
    Train(TrainArgs),
    /// Score a checkpoint and the bicubic baseline on a corpus.
    Eval(EvalArgs),
    /// Super-resolve one MSR file.
    Sr(SrArgs),
    /// Print active and stored parameter counts.
    Audit(AuditArgs),
    /// Compare analytic and finite-difference gradients of the full loss.
    Gradcheck(GradcheckArgs),
    /// Write a synthetic LR/HR corpus.
    Synth(SynthArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Init and batch-order seed (default 0, or the checkpoint's on resume).
    #[arg(long)]
    pub seed: Option<u64>,
    /// Steps to run in this invocation (default: from the config).
    #[arg(long)]
    pub steps: Option<u64>,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub report: PathBuf,
}

#[derive(Debug, Args)]
pub struct SrArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub png: Option<PathBuf>,
    #[arg(long, default_value_t = 8, value_parser = clap::value_parser!(u8).range(8..=16))]
    pub png_bits: u8,
}

#[derive(Debug, Args)]
pub struct AuditArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = 3)]
    pub seed: u64,
    #[arg(long, hide = true)]
    pub corrupt: bool,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 8)]
    pub n: usize,
    /// HR side length.
    #[arg(long, default_value_t = 64)]
    pub hw: usize,
    #[arg(long, default_value_t = 2)]
    pub scale: usize,
    #[arg(long, default_value_t = 4)]
    pub bands: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn main_with_args<I, A>(args: I) -> u8
where
    I: IntoIterator<Item = A>,
    A: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match run(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {}", e.message);
            e.code
        }
    }
}

pub fn run(cli: Cli) -> CliResult<()> {
    configure_threads(cli.threads)?;
    match cli.command {
        Command::Train(a) => cmd_train(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Sr(a) => cmd_sr(&a),
        Command::Audit(a) => cmd_audit(&a),
        Command::Gradcheck(a) => cmd_gradcheck(&a),
        Command::Synth(a) => cmd_synth(&a),
    }
}

fn configure_threads(flag: Option<usize>) -> CliResult<()> {
    let threads = match std::env::var(THREADS_ENV) {
        Ok(v) => Some(
            v.parse::<usize>()
                .map_err(|_| CliError::usage(format!("{THREADS_ENV}={v:?} is not a thread count")))?,
        ),
        Err(_) => flag,
    };
    if let Some(n) = threads {
        if n == 0 {
            return Err(CliError::usage("thread count must be positive"));
        }
        // A second call in the same process keeps the first pool.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(())
}

fn load_config(path: Option<&Path>) -> CliResult<RunConfig> {
    Ok(match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    })
}

pub fn cmd_train(a: &TrainArgs) -> CliResult<()> {
    let cfg = load_config(a.config.as_deref())?;
    let opts = TrainOptions {
        seed: a.seed,
        steps: a.steps,
        resume: a.resume.clone(),
        model_from_config: a.config.is_some(),
    };
    let summary = train(&cfg, &a.data, &a.out, &opts)?;
    println!(
        "trained steps {}..{} final loss {:.6} -> {}",
        summary.first_step,
        summary.last_step,
        summary.final_loss,
        summary.final_checkpoint.display()
    );
    Ok(())
}

pub fn cmd_eval(a: &EvalArgs) -> CliResult<()> {
    let rows = eval::cmd_eval(&a.ckpt, &a.data, &a.report)?;
    let mean = rows.last().expect("summary row");
    println!(
        "{} images: model psnr {:.4} dB ssim {:.6} ncc {:.6} | bicubic psnr {:.4} dB ssim {:.6} ncc {:.6}",
        rows.len() - 1,
        mean.model.psnr,
        mean.model.ssim,
        mean.model.ncc,
        mean.bicubic.psnr,
        mean.bicubic.ssim,
        mean.bicubic.ncc
    );
    Ok(())
}

pub fn cmd_sr(a: &SrArgs) -> CliResult<()> {
    let depth = match a.png_bits {
        8 => mose::data::PngDepth::Eight,
        16 => mose::data::PngDepth::Sixteen,
        b => return Err(CliError::usage(format!("--png-bits must be 8 or 16, got {b}"))),
    };
    let out = eval::super_resolve_file(&a.ckpt, &a.input, &a.out, a.png.as_deref(), depth)?;
    println!("{} bands {}x{} -> {}", out.bands, out.height, out.width, a.out.display());
    Ok(())
}

pub fn cmd_audit(a: &AuditArgs) -> CliResult<()> {
    let cfg = load_config(a.config.as_deref())?;
    let report = audit_report(&cfg.model)?;
    if a.json {
        println!("{}", serde_json::to_string_pretty(&report).map_err(MoseError::from)?);
    } else {
        print!("{}", report.to_table());
    }
    Ok(())
}

pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

pub fn cmd_gradcheck(a: &GradcheckArgs) -> CliResult<()> {
    let cfg = match &a.config {
        Some(p) => RunConfig::load(p)?.model,
        None => mose::model::ModelConfig::toy(),
    };
    let opts = mose::numerics::GradCheckOptions {
        corrupt: a.corrupt,
        only: None,
    };
    let start = std::time::Instant::now();
    let r = mose::model::model_grad_check(&cfg, a.seed, &opts)?;
    for (name, err) in &r.per_param {
        println!("{name:<48} {err:.3e}");
    }
    let verdict = if r.max_rel_error < GRADCHECK_TOLERANCE { "PASS" } else { "FAIL" };
    println!(
        "{verdict} max relative error {:.3e} at {}[{}] ({} probes, {:.1} s)",
        r.max_rel_error,
        r.worst_param,
        r.worst_index,
        r.probes,
        start.elapsed().as_secs_f64()
    );
    if r.max_rel_error < GRADCHECK_TOLERANCE {
        Ok(())
    } else {
        Err(CliError::numeric(format!(
            "gradient check failed: {:.3e} >= {GRADCHECK_TOLERANCE:e} at {}",
            r.max_rel_error, r.worst_param
        )))
    }
}

pub fn cmd_synth(a: &SynthArgs) -> CliResult<()> {
    let mut rng = mose::numerics::Rng::new(a.seed);
    let pairs = mose::data::synth_pairs(a.n, a.hw, a.scale, a.bands, &mut rng)?;
    mose::data::write_corpus(&a.out, &pairs)?;
    println!("wrote {} pairs to {}", pairs.len(), a.out.display());
    Ok(())
}
