//! Command-line front end: argument parsing, configuration assembly and the
//! exit-code contract.
//!
//! | code | meaning |
//! |------|---------|
//! | 0 | success |
//! | 1 | usage or configuration error |
//! | 2 | data error (manifest, frames, checkpoint, undefined metric) |
//! | 3 | numerical abort (non-finite values, failed gradient check) |

use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use starvqa::Error;

pub mod commands;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

/// Environment variable capping the worker thread count.
pub const THREADS_VAR: &str = "SVQA_THREADS";

#[derive(Debug, Parser)]
#[command(name = "starvqa", version, about = "Space-time attention video quality assessment")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model and write a checkpoint plus its loss log.
    Train(TrainArgs),
    /// Score one directory of PPM frames.
    Predict(PredictArgs),
    /// Score every video of a manifest and report SROCC/PLCC.
    Evaluate(EvaluateArgs),
    /// Compare analytic gradients with finite differences in 64-bit mode.
    Gradcheck(GradcheckArgs),
    /// Print the soft label vector of a score.
    Encode(EncodeArgs),
    /// Print the effective configuration of a config file or checkpoint.
    Describe(DescribeArgs),
    /// Write the procedural 8-clip dataset and a matching training config.
    Synth(SynthArgs),
}

/// Configuration sources shared by the commands that build a `RunConfig`.
#[derive(Debug, Clone, Default, Args)]
pub struct ConfigArgs {
    /// `key=value` configuration file; defaults apply to omitted keys.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one configuration key; may be repeated.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// `f32` or `f64`.
    #[arg(long)]
    pub precision: Option<String>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Checkpoint path; round r > 0 writes `<out>.r<r>`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Directory of `frame_NNNNN.ppm` files.
    #[arg(long)]
    pub frames: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    /// Scatter file of `video_id,ground_truth,prediction` lines
    /// [default: `<checkpoint>.scatter.csv`].
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Architecture to check [default: the tiny verification config].
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Seed of the random instance.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct EncodeArgs {
    /// Raw score on the `[lo, hi]` scale.
    #[arg(long, allow_negative_numbers = true)]
    pub mos: f64,
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    pub lo: f64,
    #[arg(long, default_value_t = 5.0, allow_negative_numbers = true)]
    pub hi: f64,
}

#[derive(Debug, Args)]
pub struct DescribeArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Describe the configuration stored in a checkpoint instead.
    #[arg(long, conflicts_with_all = ["config", "overrides", "seed", "precision"])]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Noise seed.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

/// Exit code for a library error.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) => EXIT_USAGE,
        Error::NonFinite { .. } | Error::GradCheck(_) => EXIT_NUMERIC,
        Error::Video { source, .. } => match **source {
            Error::NonFinite { .. } => EXIT_NUMERIC,
            _ => EXIT_DATA,
        },
        _ => EXIT_DATA,
    }
}

/// Applies `SVQA_THREADS` to the global worker pool. Only the first call in
/// a process has an effect.
pub fn configure_threads() -> Result<(), Error> {
    let Ok(value) = std::env::var(THREADS_VAR) else {
        return Ok(());
    };
    let n: usize = value
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Config(format!("{THREADS_VAR} must be a positive integer, got `{value}`")))?;
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

/// Parses `args` (program name first), runs the command and returns the exit
/// code. Results go to `out`, diagnostics to `err`.
pub fn run<I, A>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = A>,
    A: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let text = e.render().to_string();
            let _ = if code == EXIT_OK { out.write_all(text.as_bytes()) } else { err.write_all(text.as_bytes()) };
            return code;
        }
    };
    let result = configure_threads().and_then(|()| commands::dispatch(cli.command, out, err));
    match result {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            exit_code(&e)
        }
    }
}
