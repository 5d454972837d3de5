//! Correlation metrics and per-video evaluation reports.

use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;

use crate::dataset::Video;
use crate::encoder::ModelParams;
use crate::error::{Error, Result};
use crate::quality::{decode_score, predict, DecodeMode, LinearDecoder, QualityVector};
use crate::scalar::Scalar;

fn check_pair<T: Scalar>(x: &[T], y: &[T]) -> Result<()> {
    if x.len() != y.len() {
        return Err(Error::shape("correlation", &[x.len()], &[y.len()]));
    }
    if x.len() < 2 {
        return Err(Error::UndefinedMetric(format!("need at least 2 pairs, got {}", x.len())));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::Input("correlation of non-finite scores".into()));
    }
    Ok(())
}

/// 1-based ranks; tied values share the mean of the ranks they span.
pub fn average_ranks<T: Scalar>(x: &[T]) -> Vec<T> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].partial_cmp(&x[b]).expect("finite scores"));
    let mut ranks = vec![T::zero(); x.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && x[order[end]] == x[order[start]] {
            end += 1;
        }
        let rank = T::lit((start + end + 1) as f64 / 2.0);
        for &i in &order[start..end] {
            ranks[i] = rank;
        }
        start = end;
    }
    ranks
}

/// Pearson correlation with population normalization.
pub fn plcc<T: Scalar>(x: &[T], y: &[T]) -> Result<T> {
    check_pair(x, y)?;
    let n = T::lit(x.len() as f64);
    let mx = x.iter().copied().sum::<T>() / n;
    let my = y.iter().copied().sum::<T>() / n;
    let (mut sxy, mut sxx, mut syy) = (T::zero(), T::zero(), T::zero());
    for (&a, &b) in x.iter().zip(y) {
        let (da, db) = (a - mx, b - my);
        sxy += da * db;
        sxx += da * da;
        syy += db * db;
    }
    if sxx == T::zero() || syy == T::zero() {
        return Err(Error::UndefinedMetric("correlation of a constant score list".into()));
    }
    let r = sxy / (sxx * syy).sqrt();
    Ok(r.max(-T::one()).min(T::one()))
}

/// Spearman rank correlation: Pearson correlation of average ranks.
pub fn srocc<T: Scalar>(x: &[T], y: &[T]) -> Result<T> {
    check_pair(x, y)?;
    plcc(&average_ranks(x), &average_ranks(y))
}

/// One evaluated video.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub id: String,
    /// Scaled ground-truth MOS.
    pub truth: f64,
    /// Decoded predicted score.
    pub score: f64,
    pub vector: Vec<f64>,
}

/// Per-video predictions plus the videos that could not be evaluated.
#[derive(Clone, Debug, Default)]
pub struct Predictions {
    pub entries: Vec<Prediction>,
    pub skipped: Vec<(String, String)>,
}

/// Predictions together with their correlations.
#[derive(Clone, Debug)]
pub struct EvalReport {
    pub entries: Vec<Prediction>,
    pub skipped: Vec<(String, String)>,
    pub srocc: f64,
    pub plcc: f64,
}

impl Predictions {
    pub fn truths(&self) -> Vec<f64> {
        self.entries.iter().map(|e| e.truth).collect()
    }

    pub fn scores(&self) -> Vec<f64> {
        self.entries.iter().map(|e| e.score).collect()
    }

    pub fn report(self) -> Result<EvalReport> {
        let (t, s) = (self.truths(), self.scores());
        Ok(EvalReport {
            srocc: srocc(&t, &s)?,
            plcc: plcc(&t, &s)?,
            entries: self.entries,
            skipped: self.skipped,
        })
    }

    /// `video_id,ground_truth,prediction` lines.
    pub fn scatter_text(&self) -> String {
        let mut out = String::new();
        for e in &self.entries {
            writeln!(out, "{},{},{}", e.id, e.truth, e.score).expect("string write");
        }
        out
    }

    pub fn write_scatter(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.scatter_text())?;
        Ok(())
    }
}

/// Predicts every video with a center crop, in parallel, keeping input order.
/// Videos whose prediction fails are listed in `skipped`.
pub fn evaluate<T: Scalar>(
    params: &ModelParams<T>,
    videos: &[Video],
    mode: DecodeMode,
    decoder: Option<&LinearDecoder>,
) -> Result<Predictions> {
    if mode == DecodeMode::LinearFit && decoder.is_none() {
        return Err(Error::State("linear-fit decoding requested but no decoder has been fitted".into()));
    }
    let results: Vec<Result<Prediction>> = videos
        .par_iter()
        .map(|v| {
            let y: QualityVector<T> = predict(params, &v.center_clip(params.config())?)?;
            Ok(Prediction {
                id: v.id.clone(),
                truth: v.mos,
                score: decode_score(&y, mode, decoder)?,
                vector: y.as_slice().iter().map(|x| x.to_f64_lossy()).collect(),
            })
        })
        .collect();
    let mut out = Predictions::default();
    for (v, r) in videos.iter().zip(results) {
        match r {
            Ok(p) => out.entries.push(p),
            Err(e) => out.skipped.push((v.id.clone(), e.to_string())),
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn srocc_examples() {
        assert_eq!(srocc(&[1.0, 2.0, 3.0, 4.0], &[2.0, 3.0, 9.0, 10.0]).unwrap(), 1.0);
        assert_eq!(srocc(&[1.0, 2.0, 3.0, 4.0], &[4.0, 3.0, 2.0, 1.0]).unwrap(), -1.0);
        assert!((srocc(&[1.0f64, 2.0, 3.0, 4.0], &[1.0, 3.0, 2.0, 4.0]).unwrap() - 0.8).abs() < 1e-15);
    }

    #[test]
    fn plcc_examples() {
        let x = [1.0, 2.0, 3.0, 4.5];
        let affine: Vec<f64> = x.iter().map(|v| 2.0 * v + 3.0).collect();
        assert!((plcc(&x, &affine).unwrap() - 1.0).abs() < 1e-15);
        let neg: Vec<f64> = x.iter().map(|v| -v).collect();
        assert!((plcc(&x, &neg).unwrap() + 1.0).abs() < 1e-15);
        // Hand covariance over standard deviations.
        assert!((plcc(&[1.0f64, 2.0, 3.0], &[1.0, 2.0, 4.0]).unwrap() - 0.981_980_506_061_965_7).abs() < 1e-15);
    }

    #[test]
    fn undefined_cases() {
        assert!(matches!(plcc(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]), Err(Error::UndefinedMetric(_))));
        assert!(matches!(srocc(&[1.0, 2.0], &[2.5, 2.5]), Err(Error::UndefinedMetric(_))));
        assert!(matches!(srocc(&[1.0], &[2.0]), Err(Error::UndefinedMetric(_))));
        assert!(matches!(plcc(&[1.0, 2.0], &[2.0]), Err(Error::Shape { .. })));
    }

    #[test]
    fn ranks_average_ties() {
        assert_eq!(average_ranks(&[10.0, 20.0, 10.0, 5.0]), vec![2.5, 4.0, 2.5, 1.0]);
        assert_eq!(average_ranks(&[3.0, 3.0, 3.0]), vec![2.0, 2.0, 2.0]);
    }

    #[test]
    fn scatter_lines() {
        let p = Predictions {
            entries: vec![
                Prediction { id: "a".into(), truth: 1.5, score: 2.0, vector: vec![] },
                Prediction { id: "b".into(), truth: 4.0, score: 3.25, vector: vec![] },
            ],
            skipped: vec![],
        };
        assert_eq!(p.scatter_text(), "a,1.5,2\nb,4,3.25\n");
    }

    fn distinct(n: usize) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::btree_set(-1000i32..1000, n)
            .prop_map(|s| s.into_iter().map(|i| f64::from(i) / 7.0).collect::<Vec<_>>())
            .prop_shuffle()
    }

    proptest! {
        #[test]
        fn srocc_monotone_invariance(x in distinct(8), y in prop::collection::vec(-5.0f64..5.0, 8)) {
            prop_assume!(y.iter().any(|v| *v != y[0]));
            let base = srocc(&x, &y).unwrap();
            let fx: Vec<f64> = x.iter().map(|v| v.powi(3) + 2.0 * v).collect();
            let fy: Vec<f64> = y.iter().map(|v| v.exp()).collect();
            prop_assert!((srocc(&fx, &fy).unwrap() - base).abs() < 1e-12);
            prop_assert_eq!(srocc(&y, &x).unwrap(), base);
        }

        #[test]
        fn plcc_affine_invariance(x in prop::collection::vec(-5.0f64..5.0, 3..12), a in 0.1f64..10.0, b in -5.0f64..5.0) {
            let y: Vec<f64> = x.iter().enumerate().map(|(i, v)| v * v + i as f64).collect();
            prop_assume!(x.iter().any(|v| (v - x[0]).abs() > 1e-3));
            let base = plcc(&x, &y).unwrap();
            let ax: Vec<f64> = x.iter().map(|v| a * v + b).collect();
            prop_assert!((plcc(&ax, &y).unwrap() - base).abs() < 1e-9);
            prop_assert!((plcc(&y, &x).unwrap() - base).abs() < 1e-15);
        }

        #[test]
        fn tie_free_srocc_matches_rank_difference_formula(x in distinct(7), y in distinct(7)) {
            let rx = average_ranks(&x);
            let ry = average_ranks(&y);
            let d2: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - b) * (a - b)).sum();
            let n = 7.0;
            let formula = 1.0 - 6.0 * d2 / (n * (n * n - 1.0));
            prop_assert!((srocc(&x, &y).unwrap() - formula).abs() < 1e-12);
        }
    }
}
