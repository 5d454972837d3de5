//! Command implementations. Each returns the exit code on success and an
//! error otherwise; results are written to `out`, warnings to `err`.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use starvqa::checkpoint::{log_path, AnyCheckpoint, Checkpoint, Container};
use starvqa::config::RunConfig;
use starvqa::dataset::{load_all, load_videos, Manifest, Video};
use starvqa::eval::{evaluate, Predictions};
use starvqa::gradcheck::{grad_check, GradCheckReport};
use starvqa::quality::{decode_score, encode_mos, predict, scale_mos, MosScale, QualityVector};
use starvqa::synthetic::{overfit_config, SyntheticSpec, MANIFEST_NAME};
use starvqa::train::{fit, round_seed, RoundSummary};
use starvqa::{Error, Precision, Result, Scalar};

use crate::{
    Command, ConfigArgs, DescribeArgs, EncodeArgs, EvaluateArgs, GradcheckArgs, PredictArgs, SynthArgs, TrainArgs,
    EXIT_OK,
};

/// Name of the training config written next to a synthetic set.
pub const SYNTH_CONFIG_NAME: &str = "overfit.cfg";
/// Checkpoint name used by that config.
pub const SYNTH_CHECKPOINT_NAME: &str = "overfit.ckpt";

pub fn dispatch(command: Command, out: &mut dyn Write, err: &mut dyn Write) -> Result<i32> {
    match command {
        Command::Train(a) => train(&a, out, err),
        Command::Predict(a) => predict_frames(&a, out),
        Command::Evaluate(a) => evaluate_manifest(&a, out, err),
        Command::Gradcheck(a) => gradcheck(&a, out),
        Command::Encode(a) => encode(&a, out),
        Command::Describe(a) => describe(&a, out),
        Command::Synth(a) => synth(&a, out),
    }
}

fn apply_overrides(run: &mut RunConfig, overrides: &[String]) -> Result<()> {
    for kv in overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got `{kv}`")))?;
        run.set(k.trim(), v.trim())?;
    }
    Ok(())
}

/// Relative `manifest` and `out` paths in a config file are taken relative
/// to the file's directory.
fn resolve_against(path: &mut Option<PathBuf>, base: &Path) {
    if let Some(p) = path {
        if p.is_relative() {
            *p = base.join(&*p);
        }
    }
}

/// Defaults, then the config file, then `--set`, `--seed` and `--precision`.
pub fn build_config(args: &ConfigArgs) -> Result<RunConfig> {
    let mut run = match &args.config {
        Some(path) => {
            let mut run = RunConfig::load(path)?;
            let base = path.parent().unwrap_or(Path::new(""));
            resolve_against(&mut run.manifest, base);
            resolve_against(&mut run.out, base);
            run
        }
        None => RunConfig::default(),
    };
    apply_overrides(&mut run, &args.overrides)?;
    if let Some(seed) = args.seed {
        run.train.seed = seed;
    }
    if let Some(p) = &args.precision {
        run.set("precision", p)?;
    }
    run.validate()?;
    Ok(run)
}

/// Checkpoint path of round `round`.
pub fn round_path(out: &Path, round: usize) -> PathBuf {
    if round == 0 {
        out.to_path_buf()
    } else {
        let mut s = out.as_os_str().to_owned();
        s.push(format!(".r{round}"));
        PathBuf::from(s)
    }
}

fn join<T: std::fmt::Display>(values: &[T]) -> String {
    values.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(" ")
}

fn metric(v: Option<f64>) -> String {
    v.map_or_else(|| "nan".to_string(), |x| x.to_string())
}

fn train(args: &TrainArgs, out: &mut dyn Write, err: &mut dyn Write) -> Result<i32> {
    let mut run = build_config(&args.config)?;
    if let Some(m) = &args.manifest {
        run.manifest = Some(m.clone());
    }
    if let Some(o) = &args.out {
        run.out = Some(o.clone());
    }
    let manifest_path = run
        .manifest
        .clone()
        .ok_or_else(|| Error::Config("no manifest given: pass --manifest or set `manifest`".into()))?;
    let out_path = run
        .out
        .clone()
        .ok_or_else(|| Error::Config("no output path given: pass --out or set `out`".into()))?;
    let manifest = Manifest::load(&manifest_path)?;
    let videos = load_all(&manifest, run.encoder.frames)?;
    let started = Instant::now();
    match run.precision {
        Precision::F32 => train_rounds::<f32>(&run, &videos, &out_path, out)?,
        Precision::F64 => train_rounds::<f64>(&run, &videos, &out_path, out)?,
    }
    writeln!(err, "elapsed {:.2}s", started.elapsed().as_secs_f64())?;
    Ok(EXIT_OK)
}

fn train_rounds<T: Scalar>(run: &RunConfig, videos: &[Video], out_path: &Path, out: &mut dyn Write) -> Result<()> {
    let rounds = run.train.rounds;
    let mut states = Vec::with_capacity(rounds);
    for r in 0..rounds {
        let path = round_path(out_path, r);
        let mut round = run.clone();
        round.train.seed = round_seed(run.train.seed, r);
        round.out = Some(path.clone());
        if rounds > 1 {
            writeln!(out, "round {r} seed {}", round.train.seed)?;
        }
        let mut log = BufWriter::new(File::create(log_path(&path))?);
        let mut io_error = None;
        let fitted = fit::<T>(round.encoder, &round.train, videos, |rec| {
            if io_error.is_some() {
                return;
            }
            let line = rec.log_line();
            if let Err(e) = writeln!(log, "{line}").and_then(|()| log.flush()).and_then(|()| writeln!(out, "{line}")) {
                io_error = Some(e);
            }
        });
        if let Some(e) = io_error {
            return Err(e.into());
        }
        let state = fitted?;
        let ckpt = Checkpoint { run: round, state };
        ckpt.save(&path)?;
        writeln!(out, "checkpoint {}", path.display())?;
        states.push(ckpt.state);
    }
    if rounds > 1 {
        let s = RoundSummary::of(&states);
        writeln!(out, "mean over {} rounds: srocc {} plcc {}", s.rounds, metric(s.mean_srocc), metric(s.mean_plcc))?;
    }
    Ok(())
}

fn predict_with<T: Scalar>(c: &Checkpoint<T>, dir: &Path, out: &mut dyn Write) -> Result<()> {
    let cfg = c.run.encoder;
    let video = Video::from_dir(dir.display().to_string(), dir, 0.0, cfg.frames)?;
    let y: QualityVector<T> = predict(&c.state.params, &video.center_clip(&cfg)?)?;
    let score = decode_score(&y, c.run.train.decode, c.state.decoder.as_ref())?;
    writeln!(out, "score {score}")?;
    writeln!(out, "probabilities {}", join(y.as_slice()))?;
    Ok(())
}

fn predict_frames(args: &PredictArgs, out: &mut dyn Write) -> Result<i32> {
    match AnyCheckpoint::load(&args.checkpoint)? {
        AnyCheckpoint::F32(c) => predict_with(&c, &args.frames, out)?,
        AnyCheckpoint::F64(c) => predict_with(&c, &args.frames, out)?,
    }
    Ok(EXIT_OK)
}

fn evaluate_with<T: Scalar>(c: &Checkpoint<T>, videos: &[Video]) -> Result<Predictions> {
    evaluate(&c.state.params, videos, c.run.train.decode, c.state.decoder.as_ref())
}

/// Default scatter path for a checkpoint.
pub fn scatter_path(checkpoint: &Path) -> PathBuf {
    let mut s = checkpoint.as_os_str().to_owned();
    s.push(".scatter.csv");
    PathBuf::from(s)
}

fn evaluate_manifest(args: &EvaluateArgs, out: &mut dyn Write, err: &mut dyn Write) -> Result<i32> {
    let ckpt = AnyCheckpoint::load(&args.checkpoint)?;
    let manifest = Manifest::load(&args.manifest)?;
    let (videos, failed) = load_videos(&manifest, ckpt.run().encoder.frames);
    for (id, e) in &failed {
        writeln!(err, "warning: skipped `{id}`: {e}")?;
    }
    let preds = match &ckpt {
        AnyCheckpoint::F32(c) => evaluate_with(c, &videos)?,
        AnyCheckpoint::F64(c) => evaluate_with(c, &videos)?,
    };
    for (id, e) in &preds.skipped {
        writeln!(err, "warning: skipped `{id}`: {e}")?;
    }
    let scatter = args.out.clone().unwrap_or_else(|| scatter_path(&args.checkpoint));
    preds.write_scatter(&scatter)?;
    writeln!(out, "scatter {}", scatter.display())?;
    let report = preds.report()?;
    writeln!(out, "videos {} skipped {}", report.entries.len(), failed.len() + report.skipped.len())?;
    writeln!(out, "srocc {}", report.srocc)?;
    writeln!(out, "plcc {}", report.plcc)?;
    Ok(EXIT_OK)
}

/// Per-tensor table of a gradient check.
pub fn render_gradcheck(report: &GradCheckReport) -> String {
    let mut s = format!("{:<28} {:>6} {:>12} {:>12}\n", "tensor", "numel", "max_rel", "max_abs");
    for e in &report.entries {
        s.push_str(&format!(
            "{:<28} {:>6} {:>12.3e} {:>12.3e}\n",
            e.name, e.numel, e.max_rel_error, e.max_abs_error
        ));
    }
    s.push_str(&format!(
        "max relative error {:.3e} (tolerance {:e})\n",
        report.max_rel_error(),
        report.tolerance
    ));
    s
}

fn gradcheck(args: &GradcheckArgs, out: &mut dyn Write) -> Result<i32> {
    let mut run = match &args.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::tiny(),
    };
    apply_overrides(&mut run, &args.overrides)?;
    run.validate()?;
    let report = grad_check(run.encoder, args.seed)?;
    out.write_all(render_gradcheck(&report).as_bytes())?;
    report.into_result()?;
    writeln!(out, "PASS")?;
    Ok(EXIT_OK)
}

fn encode(args: &EncodeArgs, out: &mut dyn Write) -> Result<i32> {
    let usage = |e: Error| Error::Config(e.to_string());
    let scale = MosScale::new(args.lo, args.hi).map_err(usage)?;
    let q = encode_mos::<f64>(scale_mos(args.mos, scale).map_err(usage)?)?;
    writeln!(out, "{}", join(q.as_slice()))?;
    Ok(EXIT_OK)
}

fn describe(args: &DescribeArgs, out: &mut dyn Write) -> Result<i32> {
    let text = match &args.checkpoint {
        Some(path) => Container::load(path)?.config,
        None => build_config(&args.config)?.to_text(),
    };
    out.write_all(text.as_bytes())?;
    Ok(EXIT_OK)
}

fn synth(args: &SynthArgs, out: &mut dyn Write) -> Result<i32> {
    let spec = SyntheticSpec {
        seed: args.seed,
        ..SyntheticSpec::default()
    };
    let manifest = spec.write(&args.out)?;
    let mut cfg = overfit_config();
    cfg.manifest = Some(PathBuf::from(MANIFEST_NAME));
    cfg.out = Some(PathBuf::from(SYNTH_CHECKPOINT_NAME));
    let cfg_path = args.out.join(SYNTH_CONFIG_NAME);
    fs::write(&cfg_path, cfg.to_text())?;
    writeln!(out, "clips {}", spec.clips)?;
    writeln!(out, "manifest {}", manifest.display())?;
    writeln!(out, "config {}", cfg_path.display())?;
    Ok(EXIT_OK)
}
