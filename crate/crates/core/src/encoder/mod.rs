//! The space-time attention trunk.
//!
//! Patches are embedded with a learnable projection and a joint space-time
//! position table, a label token is prepended, and `L` encoding blocks are
//! applied. Each block runs
//!
//! 1. temporal attention: every patch attends to the label token and to the
//!    patches at its own spatial location in all frames;
//! 2. spatial attention: every patch attends to the label token and to all
//!    patches of its own frame;
//! 3. a residual GELU MLP.
//!
//! Both attention passes are pre-norm with their own layernorm and
//! projections, and add their output back onto their own input. The label
//! token skips the temporal pass and attends globally in the spatial pass.
//!
//! All functions are generic over [`Graph`], so the same code is used for
//! training on a [`crate::tape::Tape`] and for inference on [`crate::tape::Eval`].

mod config;
mod params;

use std::sync::Arc;

pub use config::{EncoderConfig, ANCHORS};
pub use params::{
    AttentionParams, BlockParams, EmbeddingParams, HeadParams, MlpParams, ModelParams, ParamKind, INIT_STD,
};

use crate::attention::AttentionPattern;
use crate::error::{Error, Result};
use crate::preprocess::PatchArray;
use crate::scalar::Scalar;
use crate::tape::Graph;

/// Query, key and value projections of every token row.
pub struct Qkv<V> {
    pub query: V,
    pub key: V,
    pub value: V,
}

/// Builds the `(S·F+1)×D` input sequence: row 0 is the label token plus its
/// position, row `1 + t·S + p` is `M·x(p,t) + pos(p,t)`.
pub fn embed<T: Scalar, G: Graph<T>>(g: &mut G, params: &ModelParams<T>, patches: &PatchArray<T>) -> Result<G::Var> {
    let cfg = params.config();
    if patches.patch_len() != cfg.patch_len()
        || patches.frames() != cfg.frames
        || patches.patches_per_frame() != cfg.patches_per_frame()
    {
        return Err(Error::shape(
            "embed",
            &[cfg.frames, cfg.patches_per_frame(), cfg.patch_len()],
            &[patches.frames(), patches.patches_per_frame(), patches.patch_len()],
        ));
    }
    let x = g.constant(patches.tensor().clone());
    let projection = g.param(&params.store, params.embedding.projection);
    let embedded = g.linear(&x, &projection)?;
    let label = g.param(&params.store, params.embedding.label);
    let sequence = g.concat_rows(&label, &embedded)?;
    let positions = g.param(&params.store, params.embedding.positions);
    g.add(&sequence, &positions)
}

/// `q, k, v = W·LN(token)` for every row, heads concatenated along columns.
pub fn qkv_project<T: Scalar, G: Graph<T>>(
    g: &mut G,
    params: &ModelParams<T>,
    tokens: &G::Var,
    attention: &AttentionParams,
) -> Result<Qkv<G::Var>> {
    let gain = g.param(&params.store, attention.norm_gain);
    let bias = g.param(&params.store, attention.norm_bias);
    let normed = g.layernorm(tokens, &gain, &bias)?;
    let wq = g.param(&params.store, attention.query);
    let wk = g.param(&params.store, attention.key);
    let wv = g.param(&params.store, attention.value);
    Ok(Qkv {
        query: g.linear(&normed, &wq)?,
        key: g.linear(&normed, &wk)?,
        value: g.linear(&normed, &wv)?,
    })
}

fn attention_pass<T: Scalar, G: Graph<T>>(
    g: &mut G,
    params: &ModelParams<T>,
    tokens: &G::Var,
    attention: &AttentionParams,
    pattern: &Arc<AttentionPattern>,
) -> Result<G::Var> {
    let qkv = qkv_project(g, params, tokens, attention)?;
    let mixed = g.attention(&qkv.query, &qkv.key, &qkv.value, pattern, params.config().heads)?;
    let wo = g.param(&params.store, attention.output);
    let projected = g.linear(&mixed, &wo)?;
    g.add(&projected, tokens)
}

/// Temporal attention plus residual; the label row is passed through.
pub fn time_attention<T: Scalar, G: Graph<T>>(
    g: &mut G,
    params: &ModelParams<T>,
    tokens: &G::Var,
    block: &BlockParams,
) -> Result<G::Var> {
    attention_pass(g, params, tokens, &block.time, params.time_pattern())
}

/// Spatial attention plus residual onto the temporal output.
pub fn space_attention<T: Scalar, G: Graph<T>>(
    g: &mut G,
    params: &ModelParams<T>,
    tokens: &G::Var,
    block: &BlockParams,
) -> Result<G::Var> {
    attention_pass(g, params, tokens, &block.space, params.space_pattern())
}

/// `MLP(LN(x)) + x` with a GELU hidden layer.
fn mlp_residual<T: Scalar, G: Graph<T>>(
    g: &mut G,
    params: &ModelParams<T>,
    tokens: &G::Var,
    mlp: &MlpParams,
) -> Result<G::Var> {
    let gain = g.param(&params.store, mlp.norm_gain);
    let bias = g.param(&params.store, mlp.norm_bias);
    let normed = g.layernorm(tokens, &gain, &bias)?;
    let w1 = g.param(&params.store, mlp.fc1_weight);
    let b1 = g.param(&params.store, mlp.fc1_bias);
    let hidden = g.linear(&normed, &w1)?;
    let hidden = g.add_bias(&hidden, &b1)?;
    let hidden = g.gelu(&hidden);
    let w2 = g.param(&params.store, mlp.fc2_weight);
    let b2 = g.param(&params.store, mlp.fc2_bias);
    let out = g.linear(&hidden, &w2)?;
    let out = g.add_bias(&out, &b2)?;
    g.add(&out, tokens)
}

/// One full encoding block; the output has the input's shape.
pub fn encode_block<T: Scalar, G: Graph<T>>(
    g: &mut G,
    params: &ModelParams<T>,
    tokens: &G::Var,
    block: &BlockParams,
) -> Result<G::Var> {
    let after_time = time_attention(g, params, tokens, block)?;
    let after_space = space_attention(g, params, &after_time, block)?;
    mlp_residual(g, params, &after_space, &block.mlp)
}

/// Embedding followed by all `L` blocks; returns the whole final sequence.
pub fn forward_tokens<T: Scalar, G: Graph<T>>(
    g: &mut G,
    params: &ModelParams<T>,
    patches: &PatchArray<T>,
) -> Result<G::Var> {
    let mut tokens = embed(g, params, patches)?;
    for block in &params.blocks {
        tokens = encode_block(g, params, &tokens, block)?;
    }
    Ok(tokens)
}

/// Final label-token embedding as a `1×D` row.
pub fn forward_trunk<T: Scalar, G: Graph<T>>(
    g: &mut G,
    params: &ModelParams<T>,
    patches: &PatchArray<T>,
) -> Result<G::Var> {
    let tokens = forward_tokens(g, params, patches)?;
    g.select_row(&tokens, 0)
}
