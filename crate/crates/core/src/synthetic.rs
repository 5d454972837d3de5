//! Procedural clips with a known quality ladder.
//!
//! Every clip shows the same slowly drifting scene. Clip `k` is degraded by a
//! separable Gaussian blur and additive Gaussian noise whose strengths grow
//! linearly with `k`, and its raw score falls linearly from 100.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::config::RunConfig;
use crate::dataset::Manifest;
use crate::error::{Error, Result};
use crate::preprocess::{frame_file_name, write_ppm, Frame};
use crate::quality::MosScale;
use crate::train::EvalSet;

pub const MANIFEST_NAME: &str = "manifest.csv";

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub clips: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    /// Blur standard deviation in pixels at the last level.
    pub max_blur: f64,
    /// Noise standard deviation in 8-bit units at the last level.
    pub max_noise: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            clips: 8,
            frames: 4,
            height: 8,
            width: 8,
            max_blur: 3.0,
            max_noise: 20.0,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticClip {
    pub id: String,
    pub level: usize,
    pub blur: f64,
    pub noise: f64,
    pub raw_mos: f64,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.clips < 2 || self.frames == 0 || self.height == 0 || self.width == 0 {
            return Err(Error::Config(
                "synthetic set needs at least 2 clips and nonzero frames, height and width".into(),
            ));
        }
        if !(self.max_blur >= 0.0 && self.max_noise >= 0.0) || !(self.max_blur + self.max_noise > 0.0) {
            return Err(Error::Config("synthetic degradation strengths must be nonnegative and not both zero".into()));
        }
        Ok(())
    }

    /// The ladder: level 0 is the clean reference with raw score 100.
    pub fn ladder(&self) -> Vec<SyntheticClip> {
        let last = (self.clips - 1) as f64;
        (0..self.clips)
            .map(|k| {
                let t = k as f64 / last;
                SyntheticClip {
                    id: format!("clip_{k}"),
                    level: k,
                    blur: self.max_blur * t,
                    noise: self.max_noise * t,
                    raw_mos: 100.0 * (1.0 - k as f64 / self.clips as f64),
                }
            })
            .collect()
    }

    /// Undegraded scene at frame `t` as RGB values in [0, 255].
    pub fn scene(&self, t: usize) -> Vec<f64> {
        let (h, w) = (self.height as f64, self.width as f64);
        let mut out = Vec::with_capacity(self.height * self.width * 3);
        for r in 0..self.height {
            for c in 0..self.width {
                let x = (c as f64 + 0.5 * t as f64) / w;
                let y = r as f64 / h;
                let checker = if ((r / 2) + (c + t) / 2) % 2 == 0 { 40.0 } else { -40.0 };
                out.push(128.0 + 70.0 * (2.0 * PI * x).sin() + checker);
                out.push(128.0 + 70.0 * (2.0 * PI * (x + y)).cos());
                out.push(128.0 + 90.0 * (y - 0.5) - checker);
            }
        }
        out
    }

    /// Frames of one clip.
    pub fn render(&self, clip: &SyntheticClip) -> Vec<Frame> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(clip.level as u64);
        let noise = (clip.noise > 0.0).then(|| Normal::new(0.0, clip.noise).expect("valid std"));
        (0..self.frames)
            .map(|t| {
                let mut img = self.scene(t);
                if clip.blur > 0.0 {
                    img = gaussian_blur(&img, self.height, self.width, clip.blur);
                }
                let data = img
                    .into_iter()
                    .map(|v| {
                        let v = v + noise.map_or(0.0, |n| n.sample(&mut rng));
                        v.round().clamp(0.0, 255.0) as u8
                    })
                    .collect();
                Frame::new(self.height, self.width, data).expect("sized buffer")
            })
            .collect()
    }

    /// Writes `clip_k/frame_*.ppm` and [`MANIFEST_NAME`] under `dir` and
    /// returns the manifest path.
    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        self.validate()?;
        fs::create_dir_all(dir)?;
        let ladder = self.ladder();
        for clip in &ladder {
            let clip_dir = dir.join(&clip.id);
            fs::create_dir_all(&clip_dir)?;
            for (t, frame) in self.render(clip).iter().enumerate() {
                write_ppm(&clip_dir.join(frame_file_name(t)), frame)?;
            }
        }
        let scale = MosScale::new(0.0, 100.0)?;
        let text = Manifest::render(scale, ladder.iter().map(|c| (c.id.as_str(), c.id.as_str(), c.raw_mos)));
        let path = dir.join(MANIFEST_NAME);
        fs::write(&path, text)?;
        Ok(path)
    }
}

/// Tiny architecture and optimizer settings that memorize the default
/// synthetic set: full-batch steps, scored on the training clips.
pub fn overfit_config() -> RunConfig {
    let mut cfg = RunConfig::tiny();
    let t = &mut cfg.train;
    t.epochs = 500;
    t.batch_size = 8;
    t.learning_rate = 8e-3;
    t.split = 1.0;
    t.eval_set = EvalSet::Train;
    t.seed = 0;
    cfg
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let k: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Separable blur of an interleaved RGB image with edge clamping.
fn gaussian_blur(img: &[f64], h: usize, w: usize, sigma: f64) -> Vec<f64> {
    let k = gaussian_kernel(sigma);
    let radius = (k.len() / 2) as isize;
    let at = |i: isize, n: usize| i.clamp(0, n as isize - 1) as usize;
    let mut tmp = vec![0.0; img.len()];
    for r in 0..h {
        for c in 0..w {
            for ch in 0..3 {
                tmp[(r * w + c) * 3 + ch] = k
                    .iter()
                    .enumerate()
                    .map(|(j, kv)| kv * img[(r * w + at(c as isize + j as isize - radius, w)) * 3 + ch])
                    .sum();
            }
        }
    }
    let mut out = vec![0.0; img.len()];
    for r in 0..h {
        for c in 0..w {
            for ch in 0..3 {
                out[(r * w + c) * 3 + ch] = k
                    .iter()
                    .enumerate()
                    .map(|(j, kv)| kv * tmp[(at(r as isize + j as isize - radius, h) * w + c) * 3 + ch])
                    .sum();
            }
        }
    }
    out
}
