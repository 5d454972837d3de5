//! `key=value` run configuration.
//!
//! Every key has a default; unknown or repeated keys are rejected. The
//! canonical text form lists all keys in a fixed order and parses back to the
//! same configuration.

use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;

use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::scalar::Precision;
use crate::train::TrainConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub encoder: EncoderConfig,
    pub train: TrainConfig,
    pub precision: Precision,
    pub manifest: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            train: TrainConfig::default(),
            precision: Precision::F32,
            manifest: None,
            out: None,
        }
    }
}

/// Keys in canonical order.
pub const KEYS: &[&str] = &[
    "frames",
    "height",
    "width",
    "patch",
    "dim",
    "heads",
    "blocks",
    "mlp_hidden",
    "head_hidden",
    "epochs",
    "batch_size",
    "learning_rate",
    "beta1",
    "beta2",
    "adam_eps",
    "seed",
    "split",
    "rounds",
    "eval_set",
    "decode",
    "precision",
    "manifest",
    "out",
];

fn parse_value<V: FromStr>(key: &str, value: &str) -> Result<V> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value `{value}` for `{key}`")))
}

impl RunConfig {
    /// Defaults overridden by the `key=value` lines of `text`. Blank lines
    /// and `#` comments are ignored.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let at = |e: Error| match e {
                Error::Config(m) => Error::Config(format!("line {}: {m}", i + 1)),
                other => other,
            };
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| at(Error::Config(format!("expected `key=value`, got `{line}`"))))?;
            let key = key.trim();
            if seen.contains(&key) {
                return Err(at(Error::Config(format!("`{key}` given twice"))));
            }
            seen.push(key);
            cfg.set(key, value.trim()).map_err(at)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Sets one key without validating the whole configuration.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let e = &mut self.encoder;
        let t = &mut self.train;
        match key {
            "frames" => e.frames = parse_value(key, value)?,
            "height" => e.height = parse_value(key, value)?,
            "width" => e.width = parse_value(key, value)?,
            "patch" => e.patch = parse_value(key, value)?,
            "dim" => e.dim = parse_value(key, value)?,
            "heads" => e.heads = parse_value(key, value)?,
            "blocks" => e.blocks = parse_value(key, value)?,
            "mlp_hidden" => e.mlp_hidden = parse_value(key, value)?,
            "head_hidden" => e.head_hidden = parse_value(key, value)?,
            "epochs" => t.epochs = parse_value(key, value)?,
            "batch_size" => t.batch_size = parse_value(key, value)?,
            "learning_rate" => t.learning_rate = parse_value(key, value)?,
            "beta1" => t.beta1 = parse_value(key, value)?,
            "beta2" => t.beta2 = parse_value(key, value)?,
            "adam_eps" => t.adam_eps = parse_value(key, value)?,
            "seed" => t.seed = parse_value(key, value)?,
            "split" => t.split = parse_value(key, value)?,
            "rounds" => t.rounds = parse_value(key, value)?,
            "eval_set" => t.eval_set = value.parse()?,
            "decode" => t.decode = value.parse()?,
            "precision" => {
                self.precision = value
                    .parse()
                    .map_err(|_| Error::Config(format!("invalid value `{value}` for `precision` (f32 or f64)")))?
            }
            "manifest" => self.manifest = Some(PathBuf::from(value)),
            "out" => self.out = Some(PathBuf::from(value)),
            other => return Err(Error::Config(format!("unknown key `{other}`"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.train.validate()
    }

    /// Canonical `key=value` text; unset paths are omitted.
    pub fn to_text(&self) -> String {
        let e = &self.encoder;
        let t = &self.train;
        let mut out = String::new();
        let mut put = |k: &str, v: &dyn std::fmt::Display| writeln!(out, "{k}={v}").expect("string write");
        put("frames", &e.frames);
        put("height", &e.height);
        put("width", &e.width);
        put("patch", &e.patch);
        put("dim", &e.dim);
        put("heads", &e.heads);
        put("blocks", &e.blocks);
        put("mlp_hidden", &e.mlp_hidden);
        put("head_hidden", &e.head_hidden);
        put("epochs", &t.epochs);
        put("batch_size", &t.batch_size);
        put("learning_rate", &t.learning_rate);
        put("beta1", &t.beta1);
        put("beta2", &t.beta2);
        put("adam_eps", &t.adam_eps);
        put("seed", &t.seed);
        put("split", &t.split);
        put("rounds", &t.rounds);
        put("eval_set", &t.eval_set);
        put("decode", &t.decode);
        put("precision", &self.precision);
        if let Some(m) = &self.manifest {
            put("manifest", &m.display());
        }
        if let Some(o) = &self.out {
            put("out", &o.display());
        }
        out
    }

    /// The tiny verification architecture with default training settings.
    pub fn tiny() -> Self {
        Self {
            encoder: EncoderConfig::tiny(),
            ..Self::default()
        }
    }
}
