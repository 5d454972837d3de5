//! Analytic gradients of the full VR loss against central finite differences.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::encoder::{EncoderConfig, ModelParams};
use crate::error::{Error, Result};
use crate::preprocess::PatchArray;
use crate::quality::{clip_loss, encode_mos, LinearDecoder, QualityVector};
use crate::tape::{Eval, Tape};
use crate::tensor::Tensor;

/// Central-difference step.
pub const FD_STEP: f64 = 1e-4;
/// Largest accepted relative error.
pub const TOLERANCE: f64 = 1e-4;
/// Lower bound of the relative-error denominator.
pub const ERROR_FLOOR: f64 = 1e-6;
/// Half-width of the uniform noise added to every initialized tensor.
pub const PERTURBATION: f64 = 0.3;

/// `|a − n| / max(|a|, |n|, floor)`, zero when both vanish.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let diff = (analytic - numeric).abs();
    if diff == 0.0 {
        return 0.0;
    }
    diff / analytic.abs().max(numeric.abs()).max(ERROR_FLOOR)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TensorCheck {
    pub name: String,
    pub numel: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub entries: Vec<TensorCheck>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.entries.iter().map(|e| e.max_rel_error).fold(0.0, f64::max)
    }

    /// Names of the tensors at or above the tolerance.
    pub fn failures(&self) -> Vec<String> {
        self.entries
            .iter()
            .filter(|e| !(e.max_rel_error < self.tolerance))
            .map(|e| e.name.clone())
            .collect()
    }

    pub fn passed(&self) -> bool {
        self.failures().is_empty()
    }

    /// `Err(GradCheck)` listing every failing tensor.
    pub fn into_result(self) -> Result<Self> {
        let failures = self.failures();
        if failures.is_empty() {
            Ok(self)
        } else {
            Err(Error::GradCheck(failures))
        }
    }
}

/// A random problem: perturbed initial weights, random pixels and a random
/// target score, plus a fitted decoder that the loss does not use.
#[derive(Clone, Debug)]
pub struct Instance {
    pub params: ModelParams<f64>,
    pub patches: PatchArray<f64>,
    pub target: QualityVector<f64>,
    pub decoder: LinearDecoder,
}

impl Instance {
    pub fn random(cfg: EncoderConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ModelParams::<f64>::init(cfg, &mut rng)?;
        let ids: Vec<_> = params.store.ids().collect();
        for id in ids {
            for v in params.store.get_mut(id).data_mut() {
                *v += rng.random_range(-PERTURBATION..PERTURBATION);
            }
        }
        let rows = cfg.frames * cfg.patches_per_frame();
        let pixels = (0..rows * cfg.patch_len()).map(|_| rng.random_range(0.0..1.0)).collect();
        let patches = PatchArray::from_tensor(cfg.frames, cfg.grid(), cfg.patch, Tensor::new(vec![rows, cfg.patch_len()], pixels)?)?;
        let target = encode_mos(rng.random_range(0.0..5.0))?;
        let mut coeffs: Vec<f64> = (0..LinearDecoder::LEN).map(|_| rng.random_range(-1.0..1.0)).collect();
        coeffs[LinearDecoder::LEN - 1] = 0.5;
        Ok(Self {
            params,
            patches,
            target,
            decoder: LinearDecoder::from_coefficients(&coeffs)?,
        })
    }

    /// VR loss of the instance; `_decoder` only takes part to show the loss
    /// does not depend on it.
    fn loss(&self, params: &ModelParams<f64>, _decoder: &LinearDecoder) -> Result<f64> {
        let mut ev = Eval::new();
        let l = clip_loss(&mut ev, params, &self.patches, &self.target)?;
        Ok(l.data()[0])
    }
}

fn central_difference(mut f: impl FnMut(f64) -> Result<f64>, x: f64) -> Result<f64> {
    let up = f(x + FD_STEP)?;
    let down = f(x - FD_STEP)?;
    Ok((up - down) / (2.0 * FD_STEP))
}

/// Compares tape gradients with central differences for every parameter
/// tensor and for the decoder coefficients.
pub fn grad_check(cfg: EncoderConfig, seed: u64) -> Result<GradCheckReport> {
    let inst = Instance::random(cfg, seed)?;
    let mut tape = Tape::new();
    let loss = clip_loss(&mut tape, &inst.params, &inst.patches, &inst.target)?;
    let grads = tape.backward(loss, &inst.params.store)?;

    let mut entries = Vec::new();
    let mut probe = inst.params.clone();
    for (id, name, tensor) in inst.params.store.iter() {
        let analytic = grads.get(id).data();
        let (mut rel, mut abs) = (0.0f64, 0.0f64);
        for (j, &a) in analytic.iter().enumerate() {
            let orig = tensor.data()[j];
            let n = central_difference(
                |x| {
                    probe.store.get_mut(id).data_mut()[j] = x;
                    inst.loss(&probe, &inst.decoder)
                },
                orig,
            )?;
            probe.store.get_mut(id).data_mut()[j] = orig;
            rel = rel.max(relative_error(a, n));
            abs = abs.max((a - n).abs());
        }
        entries.push(TensorCheck {
            name: name.to_string(),
            numel: tensor.len(),
            max_rel_error: rel,
            max_abs_error: abs,
        });
    }

    // The decoder is fitted after training and never enters the loss, so its
    // analytic gradient is zero by construction.
    let base = inst.decoder.coefficients();
    let (mut rel, mut abs) = (0.0f64, 0.0f64);
    for j in 0..base.len() {
        let n = central_difference(
            |x| {
                let mut c = base.clone();
                c[j] = x;
                inst.loss(&inst.params, &LinearDecoder::from_coefficients(&c)?)
            },
            base[j],
        )?;
        rel = rel.max(relative_error(0.0, n));
        abs = abs.max(n.abs());
    }
    entries.push(TensorCheck {
        name: "decoder.linear".into(),
        numel: base.len(),
        max_rel_error: rel,
        max_abs_error: abs,
    });

    Ok(GradCheckReport {
        entries,
        tolerance: TOLERANCE,
    })
}
