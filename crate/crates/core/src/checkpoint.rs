//! Binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "SVQA"              magic
//! u32                 format version (1)
//! u32 + UTF-8         run configuration text
//! u32                 entry count
//! per entry:
//!   u32 + UTF-8       name
//!   u8                dtype (0 = f32, 1 = f64, 2 = u64)
//!   u32               rank
//!   u64 × rank        dimensions
//!   raw values        little-endian, row-major
//! ```
//!
//! Model tensors are stored as `param.<name>`, optimizer moments as
//! `adam.m.<name>` / `adam.v.<name>`, plus `adam.step`, `meta.seed`,
//! `meta.epoch`, `meta.history` (one `epoch,step,loss,srocc,plcc` row per
//! epoch, undefined metrics as NaN) and, when fitted, `decoder.linear`.

use std::path::{Path, PathBuf};

use crate::config::RunConfig;
use crate::encoder::ModelParams;
use crate::error::{Error, Result};
use crate::quality::LinearDecoder;
use crate::scalar::{Precision, Scalar};
use crate::tensor::Tensor;
use crate::train::{Adam, EpochRecord, TrainState};

pub const MAGIC: &[u8; 4] = b"SVQA";
pub const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DType {
    F32,
    F64,
    U64,
}

impl DType {
    fn tag(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F64 => 1,
            DType::U64 => 2,
        }
    }

    fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(DType::F32),
            1 => Some(DType::F64),
            2 => Some(DType::U64),
            _ => None,
        }
    }

    fn width(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 | DType::U64 => 8,
        }
    }

    fn of<T: Scalar>() -> Self {
        match T::PRECISION {
            Precision::F32 => DType::F32,
            Precision::F64 => DType::F64,
        }
    }
}

/// One named array with its raw little-endian payload.
#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    bytes: Vec<u8>,
}

impl Entry {
    pub fn from_tensor<T: Scalar>(name: impl Into<String>, t: &Tensor<T>) -> Self {
        let mut bytes = Vec::with_capacity(t.len() * T::BYTES);
        for &v in t.data() {
            v.write_le(&mut bytes);
        }
        Self {
            name: name.into(),
            dtype: DType::of::<T>(),
            shape: t.shape().to_vec(),
            bytes,
        }
    }

    pub fn from_f64(name: impl Into<String>, shape: Vec<usize>, values: &[f64]) -> Self {
        Self::from_tensor(name, &Tensor::new(shape, values.to_vec()).expect("shape matches values"))
    }

    pub fn from_u64(name: impl Into<String>, values: &[u64]) -> Self {
        Self {
            name: name.into(),
            dtype: DType::U64,
            shape: vec![values.len()],
            bytes: values.iter().flat_map(|v| v.to_le_bytes()).collect(),
        }
    }

    fn expect(&self, dtype: DType) -> Result<()> {
        if self.dtype != dtype {
            return Err(Error::Input(format!(
                "entry `{}` holds {:?}, expected {dtype:?}",
                self.name, self.dtype
            )));
        }
        Ok(())
    }

    pub fn tensor<T: Scalar>(&self) -> Result<Tensor<T>> {
        self.expect(DType::of::<T>())?;
        let data = self.bytes.chunks_exact(T::BYTES).map(T::read_le).collect();
        Tensor::new(self.shape.clone(), data)
    }

    pub fn u64s(&self) -> Result<Vec<u64>> {
        self.expect(DType::U64)?;
        Ok(self
            .bytes
            .chunks_exact(8)
            .map(|c| u64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }

    fn single_u64(&self) -> Result<u64> {
        match self.u64s()?.as_slice() {
            [v] => Ok(*v),
            other => Err(Error::Input(format!("entry `{}` holds {} values, expected 1", self.name, other.len()))),
        }
    }
}

/// The configuration text plus every stored array, in file order.
#[derive(Clone, Debug, PartialEq)]
pub struct Container {
    pub config: String,
    pub entries: Vec<Entry>,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format(self.path, "truncated checkpoint"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        let raw = self.take(n)?;
        String::from_utf8(raw.to_vec()).map_err(|_| Error::format(self.path, "string is not UTF-8"))
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&u32::try_from(v).expect("fits in u32").to_le_bytes());
}

impl Container {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        put_u32(&mut out, self.config.len());
        out.extend_from_slice(self.config.as_bytes());
        put_u32(&mut out, self.entries.len());
        for e in &self.entries {
            put_u32(&mut out, e.name.len());
            out.extend_from_slice(e.name.as_bytes());
            out.push(e.dtype.tag());
            put_u32(&mut out, e.shape.len());
            for &d in &e.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            out.extend_from_slice(&e.bytes);
        }
        out
    }

    /// Parses checkpoint bytes; `path` only labels errors.
    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            return Err(Error::format(path, "not a SVQA checkpoint"));
        }
        let mut r = Reader { bytes, pos: 4, path };
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::format(path, format!("unsupported checkpoint version {version}")));
        }
        let config = r.string()?;
        let count = r.u32()? as usize;
        let mut entries = Vec::new();
        for _ in 0..count {
            let name = r.string()?;
            let tag = r.take(1)?[0];
            let dtype =
                DType::from_tag(tag).ok_or_else(|| Error::format(path, format!("entry `{name}` has unknown dtype {tag}")))?;
            let rank = r.u32()? as usize;
            let mut shape = Vec::with_capacity(rank.min(16));
            let mut numel: usize = 1;
            for _ in 0..rank {
                let d = usize::try_from(r.u64()?).map_err(|_| Error::format(path, "dimension overflow"))?;
                numel = numel
                    .checked_mul(d)
                    .ok_or_else(|| Error::format(path, format!("entry `{name}` is too large")))?;
                shape.push(d);
            }
            let len = numel
                .checked_mul(dtype.width())
                .ok_or_else(|| Error::format(path, format!("entry `{name}` is too large")))?;
            let bytes = r.take(len)?.to_vec();
            entries.push(Entry { name, dtype, shape, bytes });
        }
        if r.pos != bytes.len() {
            return Err(Error::format(path, "trailing bytes after the last entry"));
        }
        Ok(Self { config, entries })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::format(path, format!("cannot write: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::format(path, format!("cannot read: {e}")))?;
        Self::from_bytes(&bytes, path)
    }

    pub fn get(&self, name: &str) -> Result<&Entry> {
        self.entries
            .iter()
            .find(|e| e.name == name)
            .ok_or_else(|| Error::Input(format!("checkpoint has no entry `{name}`")))
    }

    pub fn run_config(&self) -> Result<RunConfig> {
        RunConfig::parse(&self.config)
    }
}

/// A training state together with the configuration that produced it.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T: Scalar> {
    pub run: RunConfig,
    pub state: TrainState<T>,
}

const PARAM: &str = "param.";
const MOMENT1: &str = "adam.m.";
const MOMENT2: &str = "adam.v.";

impl<T: Scalar> Checkpoint<T> {
    pub fn to_container(&self) -> Container {
        let mut run = self.run.clone();
        run.precision = T::PRECISION;
        let s = &self.state;
        let mut entries = Vec::new();
        for (_, name, t) in s.params.store.iter() {
            entries.push(Entry::from_tensor(format!("{PARAM}{name}"), t));
        }
        for (i, (_, name, _)) in s.params.store.iter().enumerate() {
            entries.push(Entry::from_tensor(format!("{MOMENT1}{name}"), &s.adam.m[i]));
            entries.push(Entry::from_tensor(format!("{MOMENT2}{name}"), &s.adam.v[i]));
        }
        entries.push(Entry::from_u64("adam.step", &[s.adam.step]));
        entries.push(Entry::from_u64("meta.seed", &[s.seed]));
        entries.push(Entry::from_u64("meta.epoch", &[s.epoch as u64]));
        let history: Vec<f64> = s
            .history
            .iter()
            .flat_map(|r| {
                [
                    r.epoch as f64,
                    r.step as f64,
                    r.loss,
                    r.srocc.unwrap_or(f64::NAN),
                    r.plcc.unwrap_or(f64::NAN),
                ]
            })
            .collect();
        entries.push(Entry::from_f64("meta.history", vec![s.history.len(), 5], &history));
        if let Some(d) = &s.decoder {
            entries.push(Entry::from_f64("decoder.linear", vec![LinearDecoder::LEN], &d.coefficients()));
        }
        Container {
            config: run.to_text(),
            entries,
        }
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let run = c.run_config()?;
        if run.precision != T::PRECISION {
            return Err(Error::Input(format!(
                "checkpoint holds {} parameters, {} requested",
                run.precision,
                T::PRECISION
            )));
        }
        let named = c
            .entries
            .iter()
            .filter_map(|e| e.name.strip_prefix(PARAM).map(|n| Ok((n.to_string(), e.tensor::<T>()?))))
            .collect::<Result<Vec<_>>>()?;
        let params = ModelParams::from_named(run.encoder, named)?;
        let mut adam = Adam::new(&params.store, &run.train);
        for (i, (_, name, t)) in params.store.iter().enumerate() {
            for (prefix, slot) in [(MOMENT1, &mut adam.m[i]), (MOMENT2, &mut adam.v[i])] {
                let m = c.get(&format!("{prefix}{name}"))?.tensor::<T>()?;
                if m.shape() != t.shape() {
                    return Err(Error::shape("optimizer moment", t.shape(), m.shape()));
                }
                *slot = m;
            }
        }
        adam.step = c.get("adam.step")?.single_u64()?;
        let hist = c.get("meta.history")?.tensor::<f64>()?;
        if hist.cols() != 5 && !hist.is_empty() {
            return Err(Error::Input("meta.history must have 5 columns".into()));
        }
        let metric = |v: f64| (!v.is_nan()).then_some(v);
        let history = (0..hist.rows())
            .map(|r| {
                let row = hist.row(r);
                EpochRecord {
                    epoch: row[0] as usize,
                    step: row[1] as u64,
                    loss: row[2],
                    srocc: metric(row[3]),
                    plcc: metric(row[4]),
                }
            })
            .collect();
        let decoder = match c.get("decoder.linear") {
            Ok(e) => Some(LinearDecoder::from_coefficients(e.tensor::<f64>()?.data())?),
            Err(_) => None,
        };
        Ok(Self {
            state: TrainState {
                params,
                adam,
                decoder,
                seed: c.get("meta.seed")?.single_u64()?,
                epoch: c.get("meta.epoch")?.single_u64()? as usize,
                history,
            },
            run,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(&Container::load(path)?)
    }
}

/// A checkpoint in whichever precision it was written.
#[derive(Clone, Debug, PartialEq)]
pub enum AnyCheckpoint {
    F32(Checkpoint<f32>),
    F64(Checkpoint<f64>),
}

impl AnyCheckpoint {
    pub fn load(path: &Path) -> Result<Self> {
        let c = Container::load(path)?;
        let wrap = |e: Error| match e {
            e @ Error::Format { .. } => e,
            other => Error::format(path, other.to_string()),
        };
        match c.run_config().map_err(wrap)?.precision {
            Precision::F32 => Checkpoint::from_container(&c).map(AnyCheckpoint::F32).map_err(wrap),
            Precision::F64 => Checkpoint::from_container(&c).map(AnyCheckpoint::F64).map_err(wrap),
        }
    }

    pub fn run(&self) -> &RunConfig {
        match self {
            AnyCheckpoint::F32(c) => &c.run,
            AnyCheckpoint::F64(c) => &c.run,
        }
    }
}

/// `<path>.log`, where the loss log of a checkpoint is written.
pub fn log_path(checkpoint: &Path) -> PathBuf {
    let mut s = checkpoint.as_os_str().to_owned();
    s.push(".log");
    PathBuf::from(s)
}
