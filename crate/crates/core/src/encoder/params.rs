use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::attention::AttentionPattern;
use crate::encoder::config::{EncoderConfig, ANCHORS};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tape::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Standard deviation of the truncated-normal initializer.
pub const INIT_STD: f64 = 0.02;

/// Role of a parameter tensor, which decides its initialization.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Bias,
    NormGain,
    NormBias,
    Embedding,
}

/// Projections of one attention pass (time or space).
#[derive(Clone, Debug)]
pub struct AttentionParams {
    pub norm_gain: ParamId,
    pub norm_bias: ParamId,
    /// `[A, D_h, D]`: head `a` owns rows `a·D_h..(a+1)·D_h` of the `D×D` view.
    pub query: ParamId,
    pub key: ParamId,
    pub value: ParamId,
    /// `[D, D]`, applied to the heads-concatenated attention output.
    pub output: ParamId,
}

#[derive(Clone, Debug)]
pub struct MlpParams {
    pub norm_gain: ParamId,
    pub norm_bias: ParamId,
    pub fc1_weight: ParamId,
    pub fc1_bias: ParamId,
    pub fc2_weight: ParamId,
    pub fc2_bias: ParamId,
}

/// One encoding block; time and space passes have independent weights.
#[derive(Clone, Debug)]
pub struct BlockParams {
    pub time: AttentionParams,
    pub space: AttentionParams,
    pub mlp: MlpParams,
}

#[derive(Clone, Debug)]
pub struct EmbeddingParams {
    /// `[D, 3P²]` patch projection.
    pub projection: ParamId,
    /// `[S·F+1, D]` joint space-time positions; row 0 belongs to the label token.
    pub positions: ParamId,
    /// `[D]` initial label token.
    pub label: ParamId,
}

#[derive(Clone, Debug)]
pub struct HeadParams {
    pub fc1_weight: ParamId,
    pub fc1_bias: ParamId,
    pub fc2_weight: ParamId,
    pub fc2_bias: ParamId,
}

/// Every learnable tensor of the network plus typed handles into the store.
#[derive(Clone, Debug)]
pub struct ModelParams<T> {
    config: EncoderConfig,
    pub store: ParamStore<T>,
    pub embedding: EmbeddingParams,
    pub blocks: Vec<BlockParams>,
    pub head: HeadParams,
    time_pattern: Arc<AttentionPattern>,
    space_pattern: Arc<AttentionPattern>,
}

impl<T: Scalar> PartialEq for ModelParams<T> {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config && self.store == other.store
    }
}

impl<T: Scalar> ModelParams<T> {
    /// Registers every tensor in a fixed order, asking `fill` for its value.
    pub fn build(
        config: EncoderConfig,
        mut fill: impl FnMut(&str, Vec<usize>, ParamKind) -> Result<Tensor<T>>,
    ) -> Result<Self> {
        config.validate()?;
        let d = config.dim;
        let mut store = ParamStore::new();
        let mut reg = |name: String, shape: Vec<usize>, kind: ParamKind| -> Result<ParamId> {
            let t = fill(&name, shape.clone(), kind)?;
            if t.shape() != shape.as_slice() {
                return Err(Error::shape("parameter", &shape, t.shape()));
            }
            store.register(name, t)
        };

        let embedding = EmbeddingParams {
            projection: reg("embed.projection".into(), vec![d, config.patch_len()], ParamKind::Weight)?,
            positions: reg("embed.positions".into(), vec![config.tokens(), d], ParamKind::Embedding)?,
            label: reg("embed.label".into(), vec![d], ParamKind::Embedding)?,
        };

        let qkv_shape = vec![config.heads, config.head_dim(), d];
        let mut blocks = Vec::with_capacity(config.blocks);
        for l in 0..config.blocks {
            let mut attention = |pass: &str| -> Result<AttentionParams> {
                let p = format!("blocks.{l}.{pass}");
                Ok(AttentionParams {
                    norm_gain: reg(format!("{p}.norm.gain"), vec![d], ParamKind::NormGain)?,
                    norm_bias: reg(format!("{p}.norm.bias"), vec![d], ParamKind::NormBias)?,
                    query: reg(format!("{p}.query"), qkv_shape.clone(), ParamKind::Weight)?,
                    key: reg(format!("{p}.key"), qkv_shape.clone(), ParamKind::Weight)?,
                    value: reg(format!("{p}.value"), qkv_shape.clone(), ParamKind::Weight)?,
                    output: reg(format!("{p}.output"), vec![d, d], ParamKind::Weight)?,
                })
            };
            let time = attention("time")?;
            let space = attention("space")?;
            let p = format!("blocks.{l}.mlp");
            let h = config.mlp_hidden;
            let mlp = MlpParams {
                norm_gain: reg(format!("{p}.norm.gain"), vec![d], ParamKind::NormGain)?,
                norm_bias: reg(format!("{p}.norm.bias"), vec![d], ParamKind::NormBias)?,
                fc1_weight: reg(format!("{p}.fc1.weight"), vec![h, d], ParamKind::Weight)?,
                fc1_bias: reg(format!("{p}.fc1.bias"), vec![h], ParamKind::Bias)?,
                fc2_weight: reg(format!("{p}.fc2.weight"), vec![d, h], ParamKind::Weight)?,
                fc2_bias: reg(format!("{p}.fc2.bias"), vec![d], ParamKind::Bias)?,
            };
            blocks.push(BlockParams { time, space, mlp });
        }

        let hh = config.head_hidden;
        let head = HeadParams {
            fc1_weight: reg("head.fc1.weight".into(), vec![hh, d], ParamKind::Weight)?,
            fc1_bias: reg("head.fc1.bias".into(), vec![hh], ParamKind::Bias)?,
            fc2_weight: reg("head.fc2.weight".into(), vec![ANCHORS, hh], ParamKind::Weight)?,
            fc2_bias: reg("head.fc2.bias".into(), vec![ANCHORS], ParamKind::Bias)?,
        };

        let s = config.patches_per_frame();
        Ok(Self {
            config,
            store,
            embedding,
            blocks,
            head,
            time_pattern: Arc::new(AttentionPattern::time(s, config.frames)),
            space_pattern: Arc::new(AttentionPattern::space(s, config.frames)),
        })
    }

    /// Truncated-normal weights and embeddings (std 0.02, cut at ±2 std),
    /// zero biases, unit layernorm gains.
    pub fn init<R: Rng + ?Sized>(config: EncoderConfig, rng: &mut R) -> Result<Self> {
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        Self::build(config, |_, shape, kind| {
            Ok(match kind {
                ParamKind::Weight | ParamKind::Embedding => {
                    let n = shape.iter().product();
                    let data = (0..n)
                        .map(|_| loop {
                            let x: f64 = normal.sample(rng);
                            if x.abs() <= 2.0 * INIT_STD {
                                break T::lit(x);
                            }
                        })
                        .collect();
                    Tensor::new(shape, data)?
                }
                ParamKind::NormGain => Tensor::full(shape, T::one()),
                ParamKind::Bias | ParamKind::NormBias => Tensor::zeros(shape),
            })
        })
    }

    /// All weights, biases and embeddings zero; layernorm gains one.
    pub fn zeroed(config: EncoderConfig) -> Result<Self> {
        Self::build(config, |_, shape, kind| {
            Ok(match kind {
                ParamKind::NormGain => Tensor::full(shape, T::one()),
                _ => Tensor::zeros(shape),
            })
        })
    }

    /// Rebuilds a model from named tensors; every expected name must be
    /// present with the expected shape and nothing else may be left over.
    pub fn from_named(config: EncoderConfig, mut tensors: Vec<(String, Tensor<T>)>) -> Result<Self> {
        let params = Self::build(config, |name, shape, _| {
            let pos = tensors
                .iter()
                .position(|(n, _)| n == name)
                .ok_or_else(|| Error::Input(format!("missing parameter `{name}`")))?;
            let (_, t) = tensors.swap_remove(pos);
            if t.shape() != shape.as_slice() {
                return Err(Error::Input(format!(
                    "parameter `{name}` has shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
            Ok(t)
        })?;
        if let Some((name, _)) = tensors.first() {
            return Err(Error::Input(format!("unexpected parameter `{name}`")));
        }
        Ok(params)
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn time_pattern(&self) -> &Arc<AttentionPattern> {
        &self.time_pattern
    }

    pub fn space_pattern(&self) -> &Arc<AttentionPattern> {
        &self.space_pattern
    }

    pub fn parameter_count(&self) -> usize {
        self.store.scalar_count()
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        let mut store = ParamStore::new();
        for (_, name, t) in self.store.iter() {
            store.register(name, t.cast()).expect("names are unique");
        }
        ModelParams {
            config: self.config,
            store,
            embedding: self.embedding.clone(),
            blocks: self.blocks.clone(),
            head: self.head.clone(),
            time_pattern: Arc::clone(&self.time_pattern),
            space_pattern: Arc::clone(&self.space_pattern),
        }
    }
}
