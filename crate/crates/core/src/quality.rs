//! Quality vectors, the prediction head, the vectorized regression loss and
//! score decoding.
//!
//! A mean opinion score is scaled to `[0, 5]` and soft-assigned onto the
//! anchors `b = [0, 1, 2, 3, 4, 5]`:
//!
//! ```text
//! q_n = exp(-(mos - n)²) / Σ_m exp(-(mos - m)²)
//! ```
//!
//! The network predicts `y = softmax(MLP(ē₀))` and is trained on
//! `1 - cos(q, y)`.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};

use crate::encoder::{forward_trunk, ModelParams, ANCHORS};
use crate::error::{Error, Result};
use crate::preprocess::PatchArray;
use crate::scalar::Scalar;
use crate::tape::{Eval, Graph};
use crate::tensor::{cosine_distance, Tensor};

/// Upper end of the scaled MOS range.
pub const MOS_MAX: f64 = 5.0;

/// A probability vector over the six quality anchors.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QualityVector<T>([T; ANCHORS]);

impl<T: Scalar> QualityVector<T> {
    /// Accepts nonnegative finite entries summing to one within `1e-6`.
    pub fn new(values: [T; ANCHORS]) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite() || *v < T::zero()) {
            return Err(Error::Input(format!("quality vector has a negative or non-finite entry: {values:?}")));
        }
        let sum: f64 = values.iter().map(|v| v.to_f64_lossy()).sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(Error::Input(format!("quality vector sums to {sum}, not 1")));
        }
        Ok(Self(values))
    }

    pub fn from_slice(values: &[T]) -> Result<Self> {
        let arr: [T; ANCHORS] = values
            .try_into()
            .map_err(|_| Error::shape("quality vector", &[ANCHORS], &[values.len()]))?;
        Self::new(arr)
    }

    /// Degenerate vector with all mass on `anchor`.
    pub fn one_hot(anchor: usize) -> Self {
        let mut v = [T::zero(); ANCHORS];
        v[anchor] = T::one();
        Self(v)
    }

    pub fn as_slice(&self) -> &[T] {
        &self.0
    }

    pub fn values(&self) -> [T; ANCHORS] {
        self.0
    }

    pub fn sum(&self) -> T {
        self.0.iter().copied().sum()
    }

    /// Index of the largest entry, the first one on ties.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &v) in self.0.iter().enumerate() {
            if v > self.0[best] {
                best = i;
            }
        }
        best
    }
}

/// Raw score bounds of one dataset.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MosScale {
    lo: f64,
    hi: f64,
}

impl MosScale {
    pub fn new(lo: f64, hi: f64) -> Result<Self> {
        if !(lo.is_finite() && hi.is_finite() && lo < hi) {
            return Err(Error::Input(format!("MOS bounds must satisfy lo < hi, got [{lo}, {hi}]")));
        }
        Ok(Self { lo, hi })
    }

    pub fn lo(&self) -> f64 {
        self.lo
    }

    pub fn hi(&self) -> f64 {
        self.hi
    }

    pub fn contains(&self, raw: f64) -> bool {
        (self.lo..=self.hi).contains(&raw)
    }
}

/// Maps a raw score affinely from `[lo, hi]` to `[0, 5]`.
pub fn scale_mos(raw: f64, scale: MosScale) -> Result<f64> {
    if !scale.contains(raw) {
        return Err(Error::Input(format!(
            "raw MOS {raw} outside [{}, {}]",
            scale.lo, scale.hi
        )));
    }
    Ok(MOS_MAX * (raw - scale.lo) / (scale.hi - scale.lo))
}

/// Soft assignment of a scaled score onto the anchors.
pub fn encode_mos<T: Scalar>(mos: T) -> Result<QualityVector<T>> {
    if !(mos >= T::zero() && mos <= T::lit(MOS_MAX)) {
        return Err(Error::Input(format!("scaled MOS {mos:?} outside [0, 5]")));
    }
    let mut q = [T::zero(); ANCHORS];
    for (n, slot) in q.iter_mut().enumerate() {
        let d = mos - T::lit(n as f64);
        *slot = (-(d * d)).exp();
    }
    let total: T = q.iter().copied().sum();
    for v in &mut q {
        *v /= total;
    }
    Ok(QualityVector(q))
}

/// `y = softmax(fc2(GELU(fc1(x))))` for a `1×D` label embedding.
pub fn predict_vector<T: Scalar, G: Graph<T>>(g: &mut G, params: &ModelParams<T>, label: &G::Var) -> Result<G::Var> {
    let head = &params.head;
    let w1 = g.param(&params.store, head.fc1_weight);
    let b1 = g.param(&params.store, head.fc1_bias);
    let w2 = g.param(&params.store, head.fc2_weight);
    let b2 = g.param(&params.store, head.fc2_bias);
    let hidden = g.linear(label, &w1)?;
    let hidden = g.add_bias(&hidden, &b1)?;
    let hidden = g.gelu(&hidden);
    let logits = g.linear(&hidden, &w2)?;
    let logits = g.add_bias(&logits, &b2)?;
    Ok(g.softmax_rows(&logits))
}

/// Trunk plus head for one clip, recorded on `g`.
pub fn forward<T: Scalar, G: Graph<T>>(g: &mut G, params: &ModelParams<T>, patches: &PatchArray<T>) -> Result<G::Var> {
    let label = forward_trunk(g, params, patches)?;
    predict_vector(g, params, &label)
}

/// Scalar VR loss of one clip against its encoded target.
pub fn clip_loss<T: Scalar, G: Graph<T>>(
    g: &mut G,
    params: &ModelParams<T>,
    patches: &PatchArray<T>,
    target: &QualityVector<T>,
) -> Result<G::Var> {
    let y = forward(g, params, patches)?;
    g.cosine_distance(&y, target.as_slice())
}

/// Inference without recording a tape.
pub fn predict<T: Scalar>(params: &ModelParams<T>, patches: &PatchArray<T>) -> Result<QualityVector<T>> {
    let y = forward(&mut Eval::new(), params, patches)?;
    QualityVector::from_slice(y.data())
}

/// `1 − ⟨q,y⟩/(‖q‖·‖y‖)`.
pub fn vr_loss<T: Scalar>(q: &QualityVector<T>, y: &QualityVector<T>) -> Result<T> {
    cosine_distance(q.as_slice(), y.as_slice())
}

/// How a predicted vector is turned back into a scalar score.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum DecodeMode {
    /// `Σ n·y_n`.
    #[default]
    Expectation,
    /// Least-squares affine map fitted on training predictions.
    LinearFit,
}

impl DecodeMode {
    pub fn as_str(self) -> &'static str {
        match self {
            DecodeMode::Expectation => "expectation",
            DecodeMode::LinearFit => "linear-fit",
        }
    }
}

impl fmt::Display for DecodeMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DecodeMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "expectation" => Ok(DecodeMode::Expectation),
            "linear-fit" => Ok(DecodeMode::LinearFit),
            other => Err(Error::Config(format!(
                "unknown decode mode `{other}` (expected expectation or linear-fit)"
            ))),
        }
    }
}

/// `score = w·y + c`.
///
/// Because every `y` sums to one, the intercept is collinear with the
/// weights; the fit returns the minimum-norm least-squares solution.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LinearDecoder {
    pub weights: [f64; ANCHORS],
    pub intercept: f64,
}

impl LinearDecoder {
    /// Number of stored coefficients, weights followed by the intercept.
    pub const LEN: usize = ANCHORS + 1;

    pub fn fit<T: Scalar>(pairs: &[(QualityVector<T>, f64)]) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::Input("cannot fit a linear decoder on no examples".into()));
        }
        let x = DMatrix::from_fn(pairs.len(), Self::LEN, |r, c| {
            if c < ANCHORS {
                pairs[r].0.as_slice()[c].to_f64_lossy()
            } else {
                1.0
            }
        });
        let b = DVector::from_iterator(pairs.len(), pairs.iter().map(|p| p.1));
        let svd = x.svd(true, true);
        let cutoff = svd.singular_values.max() * 1e-12;
        let w = svd.solve(&b, cutoff).map_err(|e| Error::Input(format!("least squares failed: {e}")))?;
        let coeffs: Vec<f64> = w.iter().copied().collect();
        Self::from_coefficients(&coeffs)
    }

    pub fn coefficients(&self) -> Vec<f64> {
        let mut c = self.weights.to_vec();
        c.push(self.intercept);
        c
    }

    pub fn from_coefficients(c: &[f64]) -> Result<Self> {
        if c.len() != Self::LEN || c.iter().any(|v| !v.is_finite()) {
            return Err(Error::Input(format!(
                "linear decoder needs {} finite coefficients, got {c:?}",
                Self::LEN
            )));
        }
        let mut weights = [0.0; ANCHORS];
        weights.copy_from_slice(&c[..ANCHORS]);
        Ok(Self { weights, intercept: c[ANCHORS] })
    }

    pub fn decode<T: Scalar>(&self, y: &QualityVector<T>) -> f64 {
        self.intercept
            + self
                .weights
                .iter()
                .zip(y.as_slice())
                .map(|(w, v)| w * v.to_f64_lossy())
                .sum::<f64>()
    }
}

/// Anchor expectation `Σ n·y_n`.
pub fn expectation<T: Scalar>(y: &QualityVector<T>) -> T {
    y.as_slice()
        .iter()
        .enumerate()
        .map(|(n, &v)| T::lit(n as f64) * v)
        .sum()
}

/// Decodes a predicted vector to a scaled score.
pub fn decode_score<T: Scalar>(y: &QualityVector<T>, mode: DecodeMode, linear: Option<&LinearDecoder>) -> Result<f64> {
    match mode {
        DecodeMode::Expectation => Ok(expectation(y).to_f64_lossy()),
        DecodeMode::LinearFit => linear
            .map(|d| d.decode(y))
            .ok_or_else(|| Error::State("linear-fit decoding requested but no decoder has been fitted".into())),
    }
}

/// Packs a quality vector into a `1×6` tensor.
pub fn to_tensor<T: Scalar>(y: &QualityVector<T>) -> Tensor<T> {
    Tensor::new(vec![1, ANCHORS], y.as_slice().to_vec()).expect("six entries")
}
