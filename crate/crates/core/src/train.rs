//! Optimization of the full network against the VR loss.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::dataset::Video;
use crate::encoder::{EncoderConfig, ModelParams};
use crate::error::{Error, Result};
use crate::eval::{evaluate, Predictions};
use crate::preprocess::PatchArray;
use crate::quality::{clip_loss, encode_mos, DecodeMode, LinearDecoder, QualityVector};
use crate::scalar::Scalar;
use crate::tape::{Gradients, Graph, ParamStore, Tape};
use crate::tensor::Tensor;

/// Which videos the per-epoch metrics are computed on.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum EvalSet {
    Train,
    #[default]
    Test,
}

impl EvalSet {
    pub fn as_str(self) -> &'static str {
        match self {
            EvalSet::Train => "train",
            EvalSet::Test => "test",
        }
    }
}

impl fmt::Display for EvalSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EvalSet {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(EvalSet::Train),
            "test" => Ok(EvalSet::Test),
            other => Err(Error::Config(format!("unknown eval set `{other}` (expected train or test)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    /// Fraction of videos used for training; `1` trains on everything.
    pub split: f64,
    pub rounds: usize,
    pub eval_set: EvalSet,
    pub decode: DecodeMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 4,
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            split: 0.8,
            rounds: 1,
            eval_set: EvalSet::Test,
            decode: DecodeMode::Expectation,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.batch_size == 0 {
            return fail("batch_size must be at least 1".into());
        }
        if self.rounds == 0 {
            return fail("rounds must be at least 1".into());
        }
        if !(self.split > 0.0 && self.split <= 1.0) {
            return fail(format!("split must lie in (0, 1], got {}", self.split));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return fail(format!("learning_rate must be finite and nonnegative, got {}", self.learning_rate));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return fail(format!("{name} must lie in [0, 1), got {b}"));
            }
        }
        if !(self.adam_eps > 0.0 && self.adam_eps.is_finite()) {
            return fail(format!("adam_eps must be positive, got {}", self.adam_eps));
        }
        if self.split == 1.0 && self.eval_set == EvalSet::Test {
            return fail("split = 1 leaves no test videos; set eval_set = train".into());
        }
        Ok(())
    }
}

/// Adaptive moment estimation without weight decay.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T> {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(store: &ParamStore<T>, cfg: &TrainConfig) -> Self {
        let zeros: Vec<Tensor<T>> = store.iter().map(|(_, _, t)| Tensor::zeros(t.shape().to_vec())).collect();
        Self {
            learning_rate: cfg.learning_rate,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.adam_eps,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn update(&mut self, store: &mut ParamStore<T>, grads: &Gradients<T>) {
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let (c1, c2) = (T::one() - b1, T::one() - b2);
        let correct1 = T::lit(1.0 - self.beta1.powi(t));
        let correct2 = T::lit(1.0 - self.beta2.powi(t));
        let lr = T::lit(self.learning_rate);
        let eps = T::lit(self.eps);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let i = id.index();
            let g = grads.get(id).data();
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            for (j, p) in store.get_mut(id).data_mut().iter_mut().enumerate() {
                m[j] = b1 * m[j] + c1 * g[j];
                v[j] = b2 * v[j] + c2 * g[j] * g[j];
                let mhat = m[j] / correct1;
                let vhat = v[j] / correct2;
                *p -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}

/// One training input with its encoded target.
#[derive(Clone, Debug)]
pub struct Example<T> {
    pub patches: PatchArray<T>,
    pub target: QualityVector<T>,
}

impl<T: Scalar> Example<T> {
    pub fn new(patches: PatchArray<T>, mos: f64) -> Result<Self> {
        Ok(Self {
            patches,
            target: encode_mos(T::lit(mos))?,
        })
    }
}

fn item_gradients<T: Scalar>(params: &ModelParams<T>, ex: &Example<T>) -> Result<(T, Gradients<T>)> {
    let mut tape = Tape::new();
    let loss = clip_loss(&mut tape, params, &ex.patches, &ex.target)?;
    let value = tape.value(&loss).data()[0];
    if !value.is_finite() {
        let tensor = tape
            .first_non_finite(&params.store)
            .unwrap_or_else(|| "loss".to_string());
        return Err(Error::NonFinite { tensor });
    }
    let grads = tape.backward(loss, &params.store)?;
    if let Some(name) = grads.first_non_finite(&params.store) {
        return Err(Error::NonFinite {
            tensor: format!("gradient of `{name}`"),
        });
    }
    Ok((value, grads))
}

/// Mean loss and mean gradient over a batch. Items run in parallel; their
/// gradients are summed in item order, so the result does not depend on
/// the thread count.
pub fn batch_gradients<T: Scalar>(params: &ModelParams<T>, batch: &[Example<T>]) -> Result<(T, Gradients<T>)> {
    if batch.is_empty() {
        return Err(Error::Input("empty batch".into()));
    }
    let items: Vec<Result<(T, Gradients<T>)>> = batch.par_iter().map(|ex| item_gradients(params, ex)).collect();
    let mut total = Gradients::zeros_like(&params.store);
    let mut loss = T::zero();
    for item in items {
        let (l, g) = item?;
        loss += l;
        total.add_assign(&g)?;
    }
    let inv = T::one() / T::lit(batch.len() as f64);
    total.scale(inv);
    Ok((loss * inv, total))
}

/// Forward, backward and one optimizer update; returns the mean batch loss
/// measured before the update.
pub fn train_step<T: Scalar>(params: &mut ModelParams<T>, adam: &mut Adam<T>, batch: &[Example<T>]) -> Result<T> {
    let (loss, grads) = batch_gradients(params, batch)?;
    adam.update(&mut params.store, &grads);
    if let Some(name) = params.store.iter().find(|(_, _, t)| !t.is_finite()).map(|(_, n, _)| n.to_string()) {
        return Err(Error::NonFinite {
            tensor: format!("parameter `{name}` after update"),
        });
    }
    Ok(loss)
}

/// Train/test index partition: a seeded shuffle, the first
/// `round(split·n)` indices (at least one) train.
pub fn split_indices(n: usize, split: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(2);
    idx.shuffle(&mut rng);
    let k = ((split * n as f64).round() as usize).clamp(1.min(n), n);
    let test = idx.split_off(k);
    (idx, test)
}

/// One line of the loss log.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub step: u64,
    pub loss: f64,
    pub srocc: Option<f64>,
    pub plcc: Option<f64>,
}

impl EpochRecord {
    /// `epoch,step,loss,srocc,plcc`; an undefined metric is written `nan`.
    pub fn log_line(&self) -> String {
        let m = |v: Option<f64>| v.map_or_else(|| "nan".to_string(), |x| x.to_string());
        format!("{},{},{},{},{}", self.epoch, self.step, self.loss, m(self.srocc), m(self.plcc))
    }

    pub fn parse(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.trim().split(',').collect();
        let bad = || Error::Input(format!("malformed log line `{line}`"));
        if f.len() != 5 {
            return Err(bad());
        }
        let metric = |s: &str| -> Result<Option<f64>> {
            let v: f64 = s.parse().map_err(|_| bad())?;
            Ok((!v.is_nan()).then_some(v))
        };
        Ok(Self {
            epoch: f[0].parse().map_err(|_| bad())?,
            step: f[1].parse().map_err(|_| bad())?,
            loss: f[2].parse().map_err(|_| bad())?,
            srocc: metric(f[3])?,
            plcc: metric(f[4])?,
        })
    }
}

/// Everything a training run produces.
#[derive(Clone, Debug)]
pub struct TrainState<T> {
    pub params: ModelParams<T>,
    pub adam: Adam<T>,
    pub decoder: Option<LinearDecoder>,
    pub seed: u64,
    pub epoch: usize,
    pub history: Vec<EpochRecord>,
}

impl<T: Scalar> PartialEq for TrainState<T> {
    fn eq(&self, other: &Self) -> bool {
        self.params == other.params
            && self.adam == other.adam
            && self.decoder == other.decoder
            && self.seed == other.seed
            && self.epoch == other.epoch
            && self.history == other.history
    }
}

impl<T: Scalar> TrainState<T> {
    /// Seeded initialization; nothing trained yet.
    pub fn init(encoder: EncoderConfig, cfg: &TrainConfig) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let params = ModelParams::init(encoder, &mut rng)?;
        let adam = Adam::new(&params.store, cfg);
        Ok(Self {
            params,
            adam,
            decoder: None,
            seed: cfg.seed,
            epoch: 0,
            history: Vec::new(),
        })
    }

    /// Center-crop predictions of `videos` with the configured decoder.
    pub fn predict_videos(&self, videos: &[Video], mode: DecodeMode) -> Result<Predictions> {
        evaluate(&self.params, videos, mode, self.decoder.as_ref())
    }

    /// Least-squares decoder fitted on center-crop predictions of `videos`.
    pub fn fit_decoder(&mut self, videos: &[Video]) -> Result<()> {
        let preds = evaluate(&self.params, videos, DecodeMode::Expectation, None)?;
        if let Some((id, e)) = preds.skipped.first() {
            return Err(Error::Input(format!("cannot fit decoder, video `{id}` failed: {e}")));
        }
        let pairs = preds
            .entries
            .iter()
            .map(|p| Ok((QualityVector::<f64>::from_slice(&p.vector)?, p.truth)))
            .collect::<Result<Vec<_>>>()?;
        self.decoder = Some(LinearDecoder::fit(&pairs)?);
        Ok(())
    }
}

fn metrics(preds: &Predictions) -> Result<(Option<f64>, Option<f64>)> {
    let (t, s) = (preds.truths(), preds.scores());
    let keep = |r: Result<f64>| match r {
        Ok(v) => Ok(Some(v)),
        Err(Error::UndefinedMetric(_)) => Ok(None),
        Err(e) => Err(e),
    };
    Ok((keep(crate::eval::srocc(&t, &s))?, keep(crate::eval::plcc(&t, &s))?))
}

/// Trains from a seeded initialization for `cfg.epochs` epochs.
///
/// Each epoch shuffles the training videos, takes random crops, and runs
/// `⌈n/batch_size⌉` optimizer steps; afterwards the eval set is scored with
/// center crops and `on_epoch` receives the log record.
pub fn fit<T: Scalar>(
    encoder: EncoderConfig,
    cfg: &TrainConfig,
    videos: &[Video],
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainState<T>> {
    cfg.validate()?;
    encoder.validate()?;
    if videos.is_empty() {
        return Err(Error::Input("no videos to train on".into()));
    }
    let (train_idx, test_idx) = split_indices(videos.len(), cfg.split, cfg.seed);
    let train: Vec<Video> = train_idx.iter().map(|&i| videos[i].clone()).collect();
    let test: Vec<Video> = test_idx.iter().map(|&i| videos[i].clone()).collect();
    let scored = match cfg.eval_set {
        EvalSet::Train => &train,
        EvalSet::Test if test.is_empty() => {
            return Err(Error::Config("the split leaves no test videos; set eval_set = train".into()))
        }
        EvalSet::Test => &test,
    };

    let mut state = TrainState::<T>::init(encoder, cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let mut order: Vec<usize> = (0..train.len()).collect();

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch = chunk
                .iter()
                .map(|&i| Example::new(train[i].random_clip(&encoder, &mut rng)?, train[i].mos))
                .collect::<Result<Vec<_>>>()?;
            let loss = train_step(&mut state.params, &mut state.adam, &batch)?;
            loss_sum += loss.to_f64_lossy() * batch.len() as f64;
        }
        if cfg.decode == DecodeMode::LinearFit {
            state.fit_decoder(&train)?;
        }
        let preds = state.predict_videos(scored, cfg.decode)?;
        if let Some((id, e)) = preds.skipped.first() {
            return Err(Error::Input(format!("evaluation of `{id}` failed: {e}")));
        }
        let (srocc, plcc) = metrics(&preds)?;
        let record = EpochRecord {
            epoch,
            step: state.adam.step,
            loss: loss_sum / train.len() as f64,
            srocc,
            plcc,
        };
        on_epoch(&record);
        state.history.push(record);
        state.epoch = epoch;
    }
    Ok(state)
}

/// Mean final-epoch metrics over several rounds.
#[derive(Clone, Debug, PartialEq)]
pub struct RoundSummary {
    pub rounds: usize,
    pub mean_srocc: Option<f64>,
    pub mean_plcc: Option<f64>,
}

impl RoundSummary {
    pub fn of<T>(states: &[TrainState<T>]) -> Self {
        let mean = |f: fn(&EpochRecord) -> Option<f64>| -> Option<f64> {
            let vals: Option<Vec<f64>> = states.iter().map(|s| s.history.last().and_then(f)).collect();
            vals.filter(|v| !v.is_empty()).map(|v| v.iter().sum::<f64>() / v.len() as f64)
        };
        Self {
            rounds: states.len(),
            mean_srocc: mean(|r| r.srocc),
            mean_plcc: mean(|r| r.plcc),
        }
    }
}

/// Seed used by round `r` of a run seeded with `seed`.
pub fn round_seed(seed: u64, round: usize) -> u64 {
    seed.wrapping_add(round as u64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::preprocess::Frame;
    use crate::quality::predict;
    use rand::Rng;

    fn tiny_videos(n: usize, seed: u64) -> Vec<Video> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| {
                let frames = (0..2)
                    .map(|_| Frame::new(10, 9, (0..10 * 9 * 3).map(|_| rng.random()).collect()).unwrap())
                    .collect();
                Video {
                    id: format!("v{i}"),
                    mos: 0.5 + i as f64 * 4.0 / n as f64,
                    indices: vec![0, 1],
                    frames,
                }
            })
            .collect()
    }

    fn examples(videos: &[Video]) -> Vec<Example<f64>> {
        let cfg = EncoderConfig::tiny();
        videos.iter().map(|v| Example::new(v.center_clip(&cfg).unwrap(), v.mos).unwrap()).collect()
    }

    fn state(lr: f64) -> TrainState<f64> {
        let cfg = TrainConfig { learning_rate: lr, ..TrainConfig::default() };
        TrainState::init(EncoderConfig::tiny(), &cfg).unwrap()
    }

    #[test]
    fn zero_learning_rate_is_a_no_op() {
        let mut s = state(0.0);
        let before = s.params.clone();
        let batch = examples(&tiny_videos(3, 1));
        train_step(&mut s.params, &mut s.adam, &batch).unwrap();
        assert_eq!(s.params, before);
        assert_eq!(s.adam.step, 1);
    }

    #[test]
    fn duplicated_example_keeps_mean_loss() {
        let s = state(1e-3);
        let ex = examples(&tiny_videos(1, 2));
        let (one, g1) = batch_gradients(&s.params, &ex).unwrap();
        let twice = vec![ex[0].clone(), ex[0].clone()];
        let (two, g2) = batch_gradients(&s.params, &twice).unwrap();
        assert_eq!(one, two);
        for ((_, a), (_, b)) in g1.iter().zip(g2.iter()) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn small_step_descends() {
        let mut s = state(1e-5);
        let batch = examples(&tiny_videos(4, 3));
        let before = train_step(&mut s.params, &mut s.adam, &batch).unwrap();
        let (after, _) = batch_gradients(&s.params, &batch).unwrap();
        assert!(after <= before, "{after} > {before}");
    }

    #[test]
    fn empty_batch_is_rejected() {
        let s = state(1e-3);
        assert!(batch_gradients::<f64>(&s.params, &[]).is_err());
    }

    #[test]
    fn non_finite_parameter_is_named() {
        let mut s = state(1e-3);
        let id = s.params.store.find("blocks.1.mlp.fc1.weight").unwrap();
        s.params.store.get_mut(id).data_mut()[3] = f64::NAN;
        let batch = examples(&tiny_videos(1, 4));
        match train_step(&mut s.params, &mut s.adam, &batch) {
            Err(Error::NonFinite { tensor }) => assert!(tensor.contains("blocks.1.mlp.fc1.weight"), "{tensor}"),
            other => panic!("expected a non-finite error, got {other:?}"),
        }
    }

    #[test]
    fn adam_first_step_moves_by_learning_rate() {
        let mut store = ParamStore::<f64>::new();
        let id = store.register("w", Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap()).unwrap();
        let cfg = TrainConfig { learning_rate: 0.1, ..TrainConfig::default() };
        let mut adam = Adam::new(&store, &cfg);
        let mut tape = Tape::new();
        let w = tape.param(&store, id);
        let loss = tape.weighted_sum(&w, &Tensor::new(vec![3], vec![3.0, -0.5, 0.0]).unwrap()).unwrap();
        let grads = tape.backward(loss, &store).unwrap();
        adam.update(&mut store, &grads);
        let got = store.get(id).data();
        assert!((got[0] - 0.9).abs() < 1e-8);
        assert!((got[1] + 1.9).abs() < 1e-8);
        assert_eq!(got[2], 0.5);
    }

    #[test]
    fn split_partitions_deterministically() {
        let (a, b) = split_indices(10, 0.8, 7);
        assert_eq!((a.len(), b.len()), (8, 2));
        let mut all: Vec<usize> = a.iter().chain(&b).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        assert_eq!(split_indices(10, 0.8, 7), (a, b));
        assert_eq!(split_indices(8, 1.0, 0).1.len(), 0);
        assert_eq!(split_indices(3, 0.01, 0).0.len(), 1);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig { split: 0.0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { split: 1.0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { split: 1.0, eval_set: EvalSet::Train, ..TrainConfig::default() }.validate().is_ok());
        assert!(TrainConfig { batch_size: 0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { beta2: 1.0, ..TrainConfig::default() }.validate().is_err());
    }

    #[test]
    fn log_lines_roundtrip() {
        let r = EpochRecord { epoch: 3, step: 6, loss: 0.125, srocc: Some(0.5), plcc: None };
        assert_eq!(r.log_line(), "3,6,0.125,0.5,nan");
        assert_eq!(EpochRecord::parse(&r.log_line()).unwrap(), r);
        assert!(EpochRecord::parse("1,2,3").is_err());
    }

    #[test]
    fn zero_epochs_returns_initialization() {
        let cfg = TrainConfig { epochs: 0, ..TrainConfig::default() };
        let videos = tiny_videos(5, 5);
        let s = fit::<f64>(EncoderConfig::tiny(), &cfg, &videos, |_| {}).unwrap();
        assert_eq!(s, TrainState::init(EncoderConfig::tiny(), &cfg).unwrap());
    }

    #[test]
    fn lr_zero_epoch_keeps_initialization() {
        let cfg = TrainConfig { epochs: 1, learning_rate: 0.0, ..TrainConfig::default() };
        let videos = tiny_videos(5, 6);
        let s = fit::<f64>(EncoderConfig::tiny(), &cfg, &videos, |_| {}).unwrap();
        assert_eq!(s.params, TrainState::<f64>::init(EncoderConfig::tiny(), &cfg).unwrap().params);
        assert_eq!(s.history.len(), 1);
        assert_eq!(s.history[0].step, 1);
    }

    #[test]
    fn fit_is_deterministic_and_logs_every_epoch() {
        let cfg = TrainConfig { epochs: 3, learning_rate: 1e-3, batch_size: 2, ..TrainConfig::default() };
        let videos = tiny_videos(6, 7);
        let mut lines = Vec::new();
        let a = fit::<f32>(EncoderConfig::tiny(), &cfg, &videos, |r| lines.push(r.log_line())).unwrap();
        let b = fit::<f32>(EncoderConfig::tiny(), &cfg, &videos, |_| {}).unwrap();
        assert_eq!(a, b);
        assert_eq!(lines.len(), 3);
        assert_eq!(a.adam.step, 9);
        let y: QualityVector<f32> = predict(&a.params, &videos[0].center_clip(&EncoderConfig::tiny()).unwrap()).unwrap();
        assert!((y.sum() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn linear_fit_mode_fits_a_decoder() {
        let cfg = TrainConfig {
            epochs: 1,
            learning_rate: 1e-3,
            decode: DecodeMode::LinearFit,
            split: 1.0,
            eval_set: EvalSet::Train,
            ..TrainConfig::default()
        };
        let s = fit::<f64>(EncoderConfig::tiny(), &cfg, &tiny_videos(4, 8), |_| {}).unwrap();
        assert!(s.decoder.is_some());
    }

    #[test]
    fn round_summary_averages_last_epochs() {
        let mut a = state(0.0);
        let mut b = state(0.0);
        a.history.push(EpochRecord { epoch: 1, step: 1, loss: 0.1, srocc: Some(0.5), plcc: Some(0.2) });
        b.history.push(EpochRecord { epoch: 1, step: 1, loss: 0.1, srocc: Some(0.7), plcc: None });
        let s = RoundSummary::of(&[a, b]);
        assert!((s.mean_srocc.unwrap() - 0.6).abs() < 1e-15);
        assert_eq!(s.mean_plcc, None);
    }
}
