//! Multi-head attention restricted to per-query key sets.
//!
//! Divided space-time attention is ordinary scaled dot-product attention in
//! which every query row only sees a fixed list of key rows. The lists are
//! stored once per configuration in an [`AttentionPattern`]; the kernels below
//! work for any pattern.
//!
//! Token rows follow the sequence layout: row 0 is the label token and the
//! patch at spatial location `p` of frame `t` lives at row `1 + t·S + p`.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{softmax_backward, softmax_in_place, Tensor};

/// Row of patch `patch` of frame `frame` in a token sequence.
#[inline]
pub fn token_row(patch: usize, frame: usize, patches_per_frame: usize) -> usize {
    1 + frame * patches_per_frame + patch
}

/// Compressed per-query key lists.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionPattern {
    offsets: Vec<usize>,
    keys: Vec<usize>,
}

impl AttentionPattern {
    pub fn from_lists(lists: &[Vec<usize>]) -> Result<Self> {
        let rows = lists.len();
        let mut offsets = Vec::with_capacity(rows + 1);
        let mut keys = Vec::new();
        offsets.push(0);
        for list in lists {
            if let Some(&k) = list.iter().find(|&&k| k >= rows) {
                return Err(Error::Input(format!("key row {k} out of range for {rows} tokens")));
            }
            keys.extend_from_slice(list);
            offsets.push(keys.len());
        }
        Ok(Self { offsets, keys })
    }

    /// Temporal pass over `S` locations and `F` frames.
    ///
    /// Patch `(p,t)` attends to the label token followed by `(p,1..F)`. The
    /// label token's key list is empty: its row passes through the temporal
    /// pass as a pure residual.
    pub fn time(patches_per_frame: usize, frames: usize) -> Self {
        let s = patches_per_frame;
        let mut lists = vec![Vec::new()];
        for _ in 0..frames {
            for p in 0..s {
                let mut keys = Vec::with_capacity(frames + 1);
                keys.push(0);
                keys.extend((0..frames).map(|tt| token_row(p, tt, s)));
                lists.push(keys);
            }
        }
        Self::from_lists(&lists).expect("time pattern rows are in range")
    }

    /// Spatial pass over `S` locations and `F` frames.
    ///
    /// Patch `(p,t)` attends to the label token followed by `(1..S,t)`. The
    /// label token attends to itself and every patch of every frame.
    pub fn space(patches_per_frame: usize, frames: usize) -> Self {
        let s = patches_per_frame;
        let total = s * frames + 1;
        let mut lists = vec![(0..total).collect::<Vec<_>>()];
        for t in 0..frames {
            for _ in 0..s {
                let mut keys = Vec::with_capacity(s + 1);
                keys.push(0);
                keys.extend((0..s).map(|pp| token_row(pp, t, s)));
                lists.push(keys);
            }
        }
        Self::from_lists(&lists).expect("space pattern rows are in range")
    }

    /// Number of query rows.
    pub fn rows(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn keys(&self, row: usize) -> &[usize] {
        &self.keys[self.offsets[row]..self.offsets[row + 1]]
    }

    /// Total number of (query, key) pairs.
    pub fn pairs(&self) -> usize {
        self.keys.len()
    }

    fn offset(&self, row: usize) -> usize {
        self.offsets[row]
    }
}

/// Attention weights of every (query, head, key) triple.
///
/// Row `r`, head `h`, key `j` lives at `heads·offset(r) + h·len(r) + j`.
#[derive(Clone, Debug)]
pub struct AttentionWeights<T> {
    heads: usize,
    weights: Vec<T>,
}

impl<T: Scalar> AttentionWeights<T> {
    /// Weight vector of one query row for one head, in key-list order.
    pub fn row<'a>(&'a self, pattern: &AttentionPattern, row: usize, head: usize) -> &'a [T] {
        let len = pattern.keys(row).len();
        let start = self.heads * pattern.offset(row) + head * len;
        &self.weights[start..start + len]
    }

    pub fn heads(&self) -> usize {
        self.heads
    }
}

fn check_inputs<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    pattern: &AttentionPattern,
    heads: usize,
) -> Result<usize> {
    let (rows, dim) = (q.rows(), q.cols());
    if k.shape() != q.shape() || v.shape() != q.shape() {
        return Err(Error::shape("attention", q.shape(), k.shape()));
    }
    if pattern.rows() != rows {
        return Err(Error::shape("attention pattern", &[pattern.rows()], &[rows]));
    }
    if heads == 0 || dim % heads != 0 {
        return Err(Error::Input(format!("dimension {dim} not divisible by {heads} heads")));
    }
    Ok(dim / heads)
}

fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

/// Per-head attention weights `softmax(q·kᵀ/√d_h)` over each row's key list.
pub fn attention_weights<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    pattern: &AttentionPattern,
    heads: usize,
) -> Result<AttentionWeights<T>> {
    let head_dim = check_inputs(q, k, k, pattern, heads)?;
    let scale = T::one() / T::from_usize(head_dim).unwrap().sqrt();
    let mut weights = vec![T::zero(); pattern.pairs() * heads];
    for r in 0..pattern.rows() {
        let keys = pattern.keys(r);
        let base = heads * pattern.offset(r);
        for h in 0..heads {
            let cols = h * head_dim..(h + 1) * head_dim;
            let qh = &q.row(r)[cols.clone()];
            let w = &mut weights[base + h * keys.len()..base + (h + 1) * keys.len()];
            for (wj, &kr) in w.iter_mut().zip(keys) {
                *wj = dot(qh, &k.row(kr)[cols.clone()]) * scale;
            }
            if !w.is_empty() {
                softmax_in_place(w);
            }
        }
    }
    Ok(AttentionWeights { heads, weights })
}

/// Heads-concatenated attention output `s` and the weights that produced it.
///
/// A row with an empty key list produces a zero output.
pub fn attention_forward<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    pattern: &AttentionPattern,
    heads: usize,
) -> Result<(Tensor<T>, AttentionWeights<T>)> {
    let head_dim = check_inputs(q, k, v, pattern, heads)?;
    let weights = attention_weights(q, k, pattern, heads)?;
    let mut out = Tensor::zeros(vec![q.rows(), q.cols()]);
    for r in 0..pattern.rows() {
        let keys = pattern.keys(r);
        for h in 0..heads {
            let cols = h * head_dim..(h + 1) * head_dim;
            let w = weights.row(pattern, r, h);
            let orow = &mut out.row_mut(r)[cols.clone()];
            for (&wj, &kr) in w.iter().zip(keys) {
                for (o, &x) in orow.iter_mut().zip(&v.row(kr)[cols.clone()]) {
                    *o += wj * x;
                }
            }
        }
    }
    Ok((out, weights))
}

/// Vector-Jacobian product of [`attention_forward`]; returns `(dq, dk, dv)`.
pub(crate) fn attention_backward<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    pattern: &AttentionPattern,
    weights: &AttentionWeights<T>,
    dout: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let heads = weights.heads;
    let head_dim = q.cols() / heads;
    let scale = T::one() / T::from_usize(head_dim).unwrap().sqrt();
    let mut dq = Tensor::zeros(q.shape().to_vec());
    let mut dk = Tensor::zeros(k.shape().to_vec());
    let mut dv = Tensor::zeros(v.shape().to_vec());
    let mut dw = Vec::new();
    let mut dlogit = Vec::new();
    for r in 0..pattern.rows() {
        let keys = pattern.keys(r);
        if keys.is_empty() {
            continue;
        }
        for h in 0..heads {
            let cols = h * head_dim..(h + 1) * head_dim;
            let w = weights.row(pattern, r, h);
            let ds = &dout.row(r)[cols.clone()];
            dw.clear();
            for (&wj, &kr) in w.iter().zip(keys) {
                dw.push(dot(ds, &v.row(kr)[cols.clone()]));
                for (d, &g) in dv.row_mut(kr)[cols.clone()].iter_mut().zip(ds) {
                    *d += wj * g;
                }
            }
            dlogit.clear();
            dlogit.resize(keys.len(), T::zero());
            softmax_backward(w, &dw, &mut dlogit);
            for (&dl, &kr) in dlogit.iter().zip(keys) {
                let g = dl * scale;
                if g == T::zero() {
                    continue;
                }
                for c in cols.clone() {
                    let kv = k.row(kr)[c];
                    let qv = q.row(r)[c];
                    dq.row_mut(r)[c] += g * kv;
                    dk.row_mut(kr)[c] += g * qv;
                }
            }
        }
    }
    (dq, dk, dv)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn time_pattern_layout() {
        let p = AttentionPattern::time(2, 3);
        assert_eq!(p.rows(), 7);
        assert!(p.keys(0).is_empty());
        // patch 1 of frame 2 -> row 1 + 2*2 + 1 = 6
        assert_eq!(p.keys(6), &[0, 2, 4, 6]);
        assert_eq!(p.keys(1), &[0, 1, 3, 5]);
    }

    #[test]
    fn space_pattern_layout() {
        let p = AttentionPattern::space(2, 3);
        assert_eq!(p.keys(0), &[0, 1, 2, 3, 4, 5, 6]);
        assert_eq!(p.keys(3), &[0, 3, 4]);
        assert_eq!(p.keys(6), &[0, 5, 6]);
    }

    #[test]
    fn zero_queries_give_uniform_weights() {
        let q = Tensor::<f64>::zeros(vec![5, 4]);
        let k = Tensor::new(vec![5, 4], (0..20).map(|i| i as f64 * 0.3).collect()).unwrap();
        let pattern = AttentionPattern::time(2, 2);
        let w = attention_weights(&q, &k, &pattern, 2).unwrap();
        for r in 1..5 {
            for h in 0..2 {
                assert!(w.row(&pattern, r, h).iter().all(|&x| (x - 1.0 / 3.0).abs() < 1e-15));
            }
        }
    }

    #[test]
    fn empty_key_list_yields_zero_row() {
        let t = Tensor::new(vec![3, 2], vec![1.0f64, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let pattern = AttentionPattern::time(2, 1);
        let (out, _) = attention_forward(&t, &t, &t, &pattern, 1).unwrap();
        assert_eq!(out.row(0), &[0.0, 0.0]);
    }

    #[test]
    fn rejects_bad_head_count() {
        let t = Tensor::<f32>::zeros(vec![3, 6]);
        let pattern = AttentionPattern::time(2, 1);
        assert!(attention_forward(&t, &t, &t, &pattern, 4).is_err());
    }
}
