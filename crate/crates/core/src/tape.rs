//! Parameter registry and reverse-mode differentiation.
//!
//! Model code is written once against the [`Graph`] trait. Running it on a
//! [`Tape`] records every primitive so [`Tape::backward`] can replay the
//! vector-Jacobian products in reverse; running it on [`Eval`] only computes
//! values and drops intermediates as soon as they go out of scope. Both share
//! the same forward kernels, so their outputs are bit-identical.

use std::collections::HashMap;
use std::marker::PhantomData;
use std::sync::Arc;

use crate::attention::{attention_backward, attention_forward, AttentionPattern, AttentionWeights};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{
    cosine_distance, cosine_distance_grad, gelu, gelu_grad, layernorm_rows, layernorm_rows_backward, matmul,
    matmul_nt, matmul_tn, softmax_backward, softmax_in_place, NormStats, Tensor,
};

/// Index of a tensor in a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered collection of named learnable tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    by_name: HashMap<String, ParamId>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
            by_name: HashMap::new(),
        }
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::Input(format!("parameter `{name}` registered twice")));
        }
        let id = ParamId(self.tensors.len());
        self.by_name.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(tensor);
        Ok(id)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<T>)> {
        self.tensors
            .iter()
            .enumerate()
            .map(|(i, t)| (ParamId(i), self.names[i].as_str(), t))
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }
}

/// One gradient tensor per registered parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients<T> {
    tensors: Vec<Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn zeros_like(store: &ParamStore<T>) -> Self {
        Self {
            tensors: store.tensors.iter().map(|t| Tensor::zeros(t.shape().to_vec())).collect(),
        }
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor<T>)> {
        self.tensors.iter().enumerate().map(|(i, t)| (ParamId(i), t))
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            a.add_assign(b)?;
        }
        Ok(())
    }

    pub fn scale(&mut self, factor: T) {
        for t in &mut self.tensors {
            t.scale(factor);
        }
    }

    /// Name of the first parameter whose gradient holds a NaN or infinity.
    pub fn first_non_finite<'a>(&self, store: &'a ParamStore<T>) -> Option<&'a str> {
        self.tensors
            .iter()
            .position(|t| !t.is_finite())
            .map(|i| store.name(ParamId(i)))
    }
}

/// Builder interface shared by the recording [`Tape`] and the value-only
/// [`Eval`] backends.
pub trait Graph<T: Scalar> {
    type Var: Clone;

    fn constant(&mut self, value: Tensor<T>) -> Self::Var;

    fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Self::Var;

    fn value<'a>(&'a self, var: &'a Self::Var) -> &'a Tensor<T>;

    /// `a·b` for matrices.
    fn matmul(&mut self, a: &Self::Var, b: &Self::Var) -> Result<Self::Var>;

    /// `x·wᵀ` where `w` is viewed as `out × in` with `in` its last dimension.
    fn linear(&mut self, x: &Self::Var, w: &Self::Var) -> Result<Self::Var>;

    fn add(&mut self, a: &Self::Var, b: &Self::Var) -> Result<Self::Var>;

    /// Adds a vector to every row.
    fn add_bias(&mut self, x: &Self::Var, bias: &Self::Var) -> Result<Self::Var>;

    /// Stacks the rows of `b` under the rows of `a`.
    fn concat_rows(&mut self, a: &Self::Var, b: &Self::Var) -> Result<Self::Var>;

    /// Row-wise layernorm with learnable gain and bias.
    fn layernorm(&mut self, x: &Self::Var, gain: &Self::Var, bias: &Self::Var) -> Result<Self::Var>;

    fn gelu(&mut self, x: &Self::Var) -> Self::Var;

    fn softmax_rows(&mut self, x: &Self::Var) -> Self::Var;

    /// Multi-head attention of `q` against `k`/`v` over the given key lists.
    fn attention(
        &mut self,
        q: &Self::Var,
        k: &Self::Var,
        v: &Self::Var,
        pattern: &Arc<AttentionPattern>,
        heads: usize,
    ) -> Result<Self::Var>;

    fn select_row(&mut self, x: &Self::Var, row: usize) -> Result<Self::Var>;

    /// Scalar `1 − cos(x, target)` with `x` flattened.
    fn cosine_distance(&mut self, x: &Self::Var, target: &[T]) -> Result<Self::Var>;

    /// Scalar `Σ xᵢ·wᵢ` against a constant weight tensor.
    fn weighted_sum(&mut self, x: &Self::Var, weights: &Tensor<T>) -> Result<Self::Var>;
}

// Forward kernels shared by both backends.

fn linear_forward<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>) -> Result<Tensor<T>> {
    let inputs = w.cols();
    if x.cols() != inputs || inputs == 0 {
        return Err(Error::shape("linear", x.shape(), w.shape()));
    }
    let w2 = w.clone().reshape(vec![w.len() / inputs, inputs])?;
    let x2 = x.clone().reshape(vec![x.rows(), inputs])?;
    matmul_nt(&x2, &w2)
}

fn add_forward<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let mut out = a.clone();
    out.add_assign(b).map_err(|_| Error::shape("add", a.shape(), b.shape()))?;
    Ok(out)
}

fn add_bias_forward<T: Scalar>(x: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if b.len() != x.cols() {
        return Err(Error::shape("add_bias", x.shape(), b.shape()));
    }
    let mut out = x.clone();
    for r in 0..out.rows() {
        for (o, &bi) in out.row_mut(r).iter_mut().zip(b.data()) {
            *o += bi;
        }
    }
    Ok(out)
}

fn concat_rows_forward<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.cols() != b.cols() {
        return Err(Error::shape("concat_rows", a.shape(), b.shape()));
    }
    let mut data = Vec::with_capacity(a.len() + b.len());
    data.extend_from_slice(a.data());
    data.extend_from_slice(b.data());
    Tensor::new(vec![a.rows() + b.rows(), a.cols()], data)
}

fn softmax_rows_forward<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let mut out = x.clone();
    for r in 0..out.rows() {
        softmax_in_place(out.row_mut(r));
    }
    out
}

fn select_row_forward<T: Scalar>(x: &Tensor<T>, row: usize) -> Result<Tensor<T>> {
    if row >= x.rows() {
        return Err(Error::shape("select_row", x.shape(), &[row]));
    }
    Tensor::new(vec![1, x.cols()], x.row(row).to_vec())
}

fn weighted_sum_forward<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>) -> Result<Tensor<T>> {
    if x.len() != w.len() {
        return Err(Error::shape("weighted_sum", x.shape(), w.shape()));
    }
    Ok(Tensor::scalar(x.data().iter().zip(w.data()).map(|(&a, &b)| a * b).sum()))
}

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op<T> {
    Constant,
    Param(ParamId),
    MatMul(usize, usize),
    Linear { x: usize, w: usize },
    Add(usize, usize),
    AddBias { x: usize, bias: usize },
    ConcatRows(usize, usize),
    LayerNorm { x: usize, gain: usize, bias: usize, stats: NormStats<T> },
    Gelu(usize),
    SoftmaxRows(usize),
    Attention {
        q: usize,
        k: usize,
        v: usize,
        pattern: Arc<AttentionPattern>,
        weights: AttentionWeights<T>,
    },
    SelectRow { x: usize, row: usize },
    CosineDistance { x: usize, target: Vec<T> },
    WeightedSum { x: usize, weights: Tensor<T> },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Constant => "constant",
            Op::Param(_) => "param",
            Op::MatMul(..) => "matmul",
            Op::Linear { .. } => "linear",
            Op::Add(..) => "add",
            Op::AddBias { .. } => "add_bias",
            Op::ConcatRows(..) => "concat_rows",
            Op::LayerNorm { .. } => "layernorm",
            Op::Gelu(_) => "gelu",
            Op::SoftmaxRows(_) => "softmax",
            Op::Attention { .. } => "attention",
            Op::SelectRow { .. } => "select_row",
            Op::CosineDistance { .. } => "cosine_distance",
            Op::WeightedSum { .. } => "weighted_sum",
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Define-by-run record of primitive operations.
///
/// Nodes are appended in evaluation order, so reverse index order is a
/// reverse topological order of the graph. Each parameter is recorded at
/// most once per tape.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    params: HashMap<ParamId, usize>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
        }
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[usize]) -> Var {
        let needs_grad = matches!(op, Op::Param(_)) || inputs.iter().any(|&i| self.nodes[i].needs_grad);
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn val(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Description of the first recorded node holding a non-finite value.
    pub fn first_non_finite(&self, store: &ParamStore<T>) -> Option<String> {
        self.nodes.iter().enumerate().find(|(_, n)| !n.value.is_finite()).map(|(i, n)| match n.op {
            Op::Param(id) => format!("parameter `{}`", store.name(id)),
            ref op => format!("node {i} ({})", op.name()),
        })
    }

    /// Reverse-mode gradients of a scalar node with respect to every
    /// parameter in `store`. Parameters the loss does not reach get zeros.
    pub fn backward(&self, loss: Var, store: &ParamStore<T>) -> Result<Gradients<T>> {
        if self.val(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.val(loss).shape()
            )));
        }
        let mut out = Gradients::zeros_like(store);
        let mut grads: Vec<Option<Tensor<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.val(loss).shape().to_vec(), T::one()));

        for i in (0..=loss.0).rev() {
            let Some(dy) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Constant => {}
                Op::Param(id) => {
                    let slot = &mut out.tensors[id.0];
                    if slot.shape() != dy.shape() {
                        return Err(Error::shape("param gradient", slot.shape(), dy.shape()));
                    }
                    slot.add_assign(&dy)?;
                }
                &Op::MatMul(a, b) => {
                    if self.nodes[a].needs_grad {
                        let da = matmul_nt(&dy, &self.nodes[b].value)?;
                        self.accumulate(&mut grads, a, da)?;
                    }
                    if self.nodes[b].needs_grad {
                        let db = matmul_tn(&self.nodes[a].value, &dy)?;
                        self.accumulate(&mut grads, b, db)?;
                    }
                }
                &Op::Linear { x, w } => {
                    let xv = &self.nodes[x].value;
                    let wv = &self.nodes[w].value;
                    let inputs = wv.cols();
                    if self.nodes[x].needs_grad {
                        let w2 = wv.clone().reshape(vec![wv.len() / inputs, inputs])?;
                        let dx = matmul(&dy, &w2)?;
                        self.accumulate(&mut grads, x, dx)?;
                    }
                    if self.nodes[w].needs_grad {
                        let x2 = xv.clone().reshape(vec![xv.rows(), inputs])?;
                        let dw = matmul_tn(&dy, &x2)?;
                        self.accumulate(&mut grads, w, dw)?;
                    }
                }
                &Op::Add(a, b) => {
                    if self.nodes[b].needs_grad {
                        self.accumulate(&mut grads, b, dy.clone())?;
                    }
                    if self.nodes[a].needs_grad {
                        self.accumulate(&mut grads, a, dy)?;
                    }
                }
                &Op::AddBias { x, bias } => {
                    if self.nodes[bias].needs_grad {
                        let mut db = Tensor::zeros(self.nodes[bias].value.shape().to_vec());
                        for r in 0..dy.rows() {
                            for (d, &g) in db.data_mut().iter_mut().zip(dy.row(r)) {
                                *d += g;
                            }
                        }
                        self.accumulate(&mut grads, bias, db)?;
                    }
                    if self.nodes[x].needs_grad {
                        self.accumulate(&mut grads, x, dy)?;
                    }
                }
                &Op::ConcatRows(a, b) => {
                    let split = self.nodes[a].value.len();
                    if self.nodes[a].needs_grad {
                        let da = Tensor::new(vec![self.nodes[a].value.rows(), dy.cols()], dy.data()[..split].to_vec())?;
                        self.accumulate(&mut grads, a, da)?;
                    }
                    if self.nodes[b].needs_grad {
                        let db = Tensor::new(vec![self.nodes[b].value.rows(), dy.cols()], dy.data()[split..].to_vec())?;
                        self.accumulate(&mut grads, b, db)?;
                    }
                }
                Op::LayerNorm { x, gain, bias, stats } => {
                    let (dx, dgain, dbias) =
                        layernorm_rows_backward(&self.nodes[*x].value, &self.nodes[*gain].value, stats, &dy);
                    if self.nodes[*gain].needs_grad {
                        self.accumulate(&mut grads, *gain, dgain)?;
                    }
                    if self.nodes[*bias].needs_grad {
                        self.accumulate(&mut grads, *bias, dbias)?;
                    }
                    if self.nodes[*x].needs_grad {
                        self.accumulate(&mut grads, *x, dx)?;
                    }
                }
                &Op::Gelu(x) => {
                    let xv = &self.nodes[x].value;
                    let mut dx = dy;
                    for (d, &v) in dx.data_mut().iter_mut().zip(xv.data()) {
                        *d *= gelu_grad(v);
                    }
                    self.accumulate(&mut grads, x, dx)?;
                }
                &Op::SoftmaxRows(x) => {
                    let y = &node.value;
                    let mut dx = Tensor::zeros(y.shape().to_vec());
                    for r in 0..y.rows() {
                        softmax_backward(y.row(r), dy.row(r), dx.row_mut(r));
                    }
                    self.accumulate(&mut grads, x, dx)?;
                }
                Op::Attention { q, k, v, pattern, weights } => {
                    let (dq, dk, dv) = attention_backward(
                        &self.nodes[*q].value,
                        &self.nodes[*k].value,
                        &self.nodes[*v].value,
                        pattern,
                        weights,
                        &dy,
                    );
                    for (idx, g) in [(*q, dq), (*k, dk), (*v, dv)] {
                        if self.nodes[idx].needs_grad {
                            self.accumulate(&mut grads, idx, g)?;
                        }
                    }
                }
                &Op::SelectRow { x, row } => {
                    let mut dx = Tensor::zeros(self.nodes[x].value.shape().to_vec());
                    dx.row_mut(row).copy_from_slice(dy.data());
                    self.accumulate(&mut grads, x, dx)?;
                }
                Op::CosineDistance { x, target } => {
                    let xv = &self.nodes[*x].value;
                    let g = dy.data()[0];
                    let dx: Vec<T> = cosine_distance_grad(xv.data(), target).into_iter().map(|d| d * g).collect();
                    self.accumulate(&mut grads, *x, Tensor::new(xv.shape().to_vec(), dx)?)?;
                }
                Op::WeightedSum { x, weights } => {
                    let mut dx = weights.clone().reshape(self.nodes[*x].value.shape().to_vec())?;
                    dx.scale(dy.data()[0]);
                    self.accumulate(&mut grads, *x, dx)?;
                }
            }
        }
        Ok(out)
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], idx: usize, g: Tensor<T>) -> Result<()> {
        if !self.nodes[idx].needs_grad {
            return Ok(());
        }
        let g = if g.shape() == self.nodes[idx].value.shape() {
            g
        } else {
            g.reshape(self.nodes[idx].value.shape().to_vec())?
        };
        match &mut grads[idx] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => {
                *slot = Some(g);
                Ok(())
            }
        }
    }
}

impl<T: Scalar> Graph<T> for Tape<T> {
    type Var = Var;

    fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Constant, &[])
    }

    fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&node) = self.params.get(&id) {
            return Var(node);
        }
        let v = self.push(store.get(id).clone(), Op::Param(id), &[]);
        self.params.insert(id, v.0);
        v
    }

    fn value<'a>(&'a self, var: &'a Var) -> &'a Tensor<T> {
        self.val(*var)
    }

    fn matmul(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let value = matmul(self.val(*a), self.val(*b))?;
        Ok(self.push(value, Op::MatMul(a.0, b.0), &[a.0, b.0]))
    }

    fn linear(&mut self, x: &Var, w: &Var) -> Result<Var> {
        let value = linear_forward(self.val(*x), self.val(*w))?;
        Ok(self.push(value, Op::Linear { x: x.0, w: w.0 }, &[x.0, w.0]))
    }

    fn add(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let value = add_forward(self.val(*a), self.val(*b))?;
        Ok(self.push(value, Op::Add(a.0, b.0), &[a.0, b.0]))
    }

    fn add_bias(&mut self, x: &Var, bias: &Var) -> Result<Var> {
        let value = add_bias_forward(self.val(*x), self.val(*bias))?;
        Ok(self.push(value, Op::AddBias { x: x.0, bias: bias.0 }, &[x.0, bias.0]))
    }

    fn concat_rows(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let value = concat_rows_forward(self.val(*a), self.val(*b))?;
        Ok(self.push(value, Op::ConcatRows(a.0, b.0), &[a.0, b.0]))
    }

    fn layernorm(&mut self, x: &Var, gain: &Var, bias: &Var) -> Result<Var> {
        let (value, stats) = layernorm_rows(self.val(*x), self.val(*gain), self.val(*bias))?;
        let op = Op::LayerNorm {
            x: x.0,
            gain: gain.0,
            bias: bias.0,
            stats,
        };
        Ok(self.push(value, op, &[x.0, gain.0, bias.0]))
    }

    fn gelu(&mut self, x: &Var) -> Var {
        let value = self.val(*x).map(gelu);
        self.push(value, Op::Gelu(x.0), &[x.0])
    }

    fn softmax_rows(&mut self, x: &Var) -> Var {
        let value = softmax_rows_forward(self.val(*x));
        self.push(value, Op::SoftmaxRows(x.0), &[x.0])
    }

    fn attention(&mut self, q: &Var, k: &Var, v: &Var, pattern: &Arc<AttentionPattern>, heads: usize) -> Result<Var> {
        let (value, weights) = attention_forward(self.val(*q), self.val(*k), self.val(*v), pattern, heads)?;
        let op = Op::Attention {
            q: q.0,
            k: k.0,
            v: v.0,
            pattern: Arc::clone(pattern),
            weights,
        };
        Ok(self.push(value, op, &[q.0, k.0, v.0]))
    }

    fn select_row(&mut self, x: &Var, row: usize) -> Result<Var> {
        let value = select_row_forward(self.val(*x), row)?;
        Ok(self.push(value, Op::SelectRow { x: x.0, row }, &[x.0]))
    }

    fn cosine_distance(&mut self, x: &Var, target: &[T]) -> Result<Var> {
        let value = Tensor::scalar(cosine_distance(self.val(*x).data(), target)?);
        let op = Op::CosineDistance {
            x: x.0,
            target: target.to_vec(),
        };
        Ok(self.push(value, op, &[x.0]))
    }

    fn weighted_sum(&mut self, x: &Var, weights: &Tensor<T>) -> Result<Var> {
        let value = weighted_sum_forward(self.val(*x), weights)?;
        let op = Op::WeightedSum {
            x: x.0,
            weights: weights.clone(),
        };
        Ok(self.push(value, op, &[x.0]))
    }
}

/// Value-only backend: no recording, intermediates are owned by the caller.
pub struct Eval<T>(PhantomData<T>);

impl<T> Default for Eval<T> {
    fn default() -> Self {
        Self(PhantomData)
    }
}

impl<T: Scalar> Eval<T> {
    pub fn new() -> Self {
        Self::default()
    }
}

impl<T: Scalar> Graph<T> for Eval<T> {
    type Var = Tensor<T>;

    fn constant(&mut self, value: Tensor<T>) -> Tensor<T> {
        value
    }

    fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Tensor<T> {
        store.get(id).clone()
    }

    fn value<'a>(&'a self, var: &'a Tensor<T>) -> &'a Tensor<T> {
        var
    }

    fn matmul(&mut self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        matmul(a, b)
    }

    fn linear(&mut self, x: &Tensor<T>, w: &Tensor<T>) -> Result<Tensor<T>> {
        linear_forward(x, w)
    }

    fn add(&mut self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        add_forward(a, b)
    }

    fn add_bias(&mut self, x: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
        add_bias_forward(x, bias)
    }

    fn concat_rows(&mut self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        concat_rows_forward(a, b)
    }

    fn layernorm(&mut self, x: &Tensor<T>, gain: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(layernorm_rows(x, gain, bias)?.0)
    }

    fn gelu(&mut self, x: &Tensor<T>) -> Tensor<T> {
        x.map(gelu)
    }

    fn softmax_rows(&mut self, x: &Tensor<T>) -> Tensor<T> {
        softmax_rows_forward(x)
    }

    fn attention(
        &mut self,
        q: &Tensor<T>,
        k: &Tensor<T>,
        v: &Tensor<T>,
        pattern: &Arc<AttentionPattern>,
        heads: usize,
    ) -> Result<Tensor<T>> {
        Ok(attention_forward(q, k, v, pattern, heads)?.0)
    }

    fn select_row(&mut self, x: &Tensor<T>, row: usize) -> Result<Tensor<T>> {
        select_row_forward(x, row)
    }

    fn cosine_distance(&mut self, x: &Tensor<T>, target: &[T]) -> Result<Tensor<T>> {
        Ok(Tensor::scalar(cosine_distance(x.data(), target)?))
    }

    fn weighted_sum(&mut self, x: &Tensor<T>, weights: &Tensor<T>) -> Result<Tensor<T>> {
        weighted_sum_forward(x, weights)
    }
}
