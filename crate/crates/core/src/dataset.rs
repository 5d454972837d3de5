//! Dataset manifests and in-memory videos.
//!
//! A manifest is a text file whose first line holds the raw score bounds
//! `mos_lo,mos_hi`, followed by one `video_id,frames_dir,raw_mos` line per
//! video. Relative frame directories are resolved against the manifest's own
//! directory. Blank lines and lines starting with `#` are ignored.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::Rng;
use rayon::prelude::*;

use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::preprocess::{patchify, CropMode, Frame, FrameStore, PatchArray, VideoClip};
use crate::quality::{scale_mos, MosScale};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub id: String,
    pub frames_dir: PathBuf,
    pub raw_mos: f64,
    /// 1-based line number in the manifest file.
    pub line: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub path: PathBuf,
    pub scale: MosScale,
    pub entries: Vec<ManifestEntry>,
}

fn parse_number(field: &str, what: &str) -> std::result::Result<f64, String> {
    let v: f64 = field.parse().map_err(|_| format!("{what} `{field}` is not a number"))?;
    if !v.is_finite() {
        return Err(format!("{what} `{field}` is not finite"));
    }
    Ok(v)
}

impl Manifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::format(path, format!("cannot read manifest: {e}")))?;
        Self::parse(&text, path)
    }

    /// Parses manifest text; `path` names the file in errors and anchors
    /// relative frame directories.
    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let fail = |line: usize, message: String| Error::Manifest {
            path: path.to_path_buf(),
            line,
            message,
        };
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        let mut lines = text
            .lines()
            .enumerate()
            .map(|(i, l)| (i + 1, l.trim()))
            .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'));

        let (hline, header) = lines.next().ok_or_else(|| fail(1, "empty manifest (expected `mos_lo,mos_hi`)".into()))?;
        let bounds: Vec<&str> = header.split(',').map(str::trim).collect();
        if bounds.len() != 2 {
            return Err(fail(hline, format!("header must be `mos_lo,mos_hi`, got `{header}`")));
        }
        let lo = parse_number(bounds[0], "mos_lo").map_err(|m| fail(hline, m))?;
        let hi = parse_number(bounds[1], "mos_hi").map_err(|m| fail(hline, m))?;
        let scale = MosScale::new(lo, hi).map_err(|e| fail(hline, e.to_string()))?;

        let mut entries = Vec::new();
        let mut seen = HashSet::new();
        for (line, text) in lines {
            let fields: Vec<&str> = text.split(',').map(str::trim).collect();
            if fields.len() != 3 {
                return Err(fail(line, format!("expected `video_id,frames_dir,raw_mos`, got `{text}`")));
            }
            let (id, dir) = (fields[0], fields[1]);
            if id.is_empty() || dir.is_empty() {
                return Err(fail(line, "video id and frames directory must be non-empty".into()));
            }
            if !seen.insert(id.to_string()) {
                return Err(fail(line, format!("duplicate video id `{id}`")));
            }
            let raw_mos = parse_number(fields[2], "raw_mos").map_err(|m| fail(line, m))?;
            if !scale.contains(raw_mos) {
                return Err(fail(line, format!("raw_mos {raw_mos} outside [{lo}, {hi}]")));
            }
            entries.push(ManifestEntry {
                id: id.to_string(),
                frames_dir: base.join(dir),
                raw_mos,
                line,
            });
        }
        if entries.is_empty() {
            return Err(fail(hline, "manifest lists no videos".into()));
        }
        Ok(Self {
            path: path.to_path_buf(),
            scale,
            entries,
        })
    }

    /// Manifest text for `(video_id, frames_dir, raw_mos)` rows.
    pub fn render<'a>(scale: MosScale, rows: impl IntoIterator<Item = (&'a str, &'a str, f64)>) -> String {
        let mut out = format!("{},{}\n", scale.lo(), scale.hi());
        for (id, dir, mos) in rows {
            writeln!(out, "{id},{dir},{mos}").expect("string write");
        }
        out
    }

    pub fn ids(&self) -> Vec<&str> {
        self.entries.iter().map(|e| e.id.as_str()).collect()
    }
}

/// The sampled, uncropped frames of one video plus its scaled score.
#[derive(Clone, Debug, PartialEq)]
pub struct Video {
    pub id: String,
    /// Score mapped to `[0, 5]`.
    pub mos: f64,
    pub indices: Vec<usize>,
    pub frames: Vec<Frame>,
}

impl Video {
    /// Reads the `frames` equal-interval samples of a frame directory.
    pub fn from_dir(id: impl Into<String>, dir: &Path, mos: f64, frames: usize) -> Result<Self> {
        let id = id.into();
        let load = || -> Result<(Vec<usize>, Vec<Frame>)> { FrameStore::open(dir)?.load_sampled(frames) };
        let (indices, frames) = load().map_err(|e| Error::Video {
            id: id.clone(),
            source: Box::new(e),
        })?;
        Ok(Self { id, mos, indices, frames })
    }

    pub fn load(entry: &ManifestEntry, scale: MosScale, frames: usize) -> Result<Self> {
        let mos = scale_mos(entry.raw_mos, scale)?;
        Self::from_dir(&entry.id, &entry.frames_dir, mos, frames)
    }

    fn clip<T: Scalar, R: Rng + ?Sized>(&self, cfg: &EncoderConfig, mode: CropMode<'_, R>) -> Result<PatchArray<T>> {
        let wrap = |e| Error::Video {
            id: self.id.clone(),
            source: Box::new(e),
        };
        if self.frames.len() != cfg.frames {
            return Err(wrap(Error::Input(format!(
                "video holds {} sampled frames, model expects {}",
                self.frames.len(),
                cfg.frames
            ))));
        }
        let clip = VideoClip::from_frames(&self.id, self.indices.clone(), &self.frames, cfg.height, cfg.width, mode)
            .map_err(wrap)?;
        patchify(&clip, cfg.patch).map_err(wrap)
    }

    /// Patches of the centered crop, used for evaluation and prediction.
    pub fn center_clip<T: Scalar>(&self, cfg: &EncoderConfig) -> Result<PatchArray<T>> {
        self.clip::<T, rand_chacha::ChaCha8Rng>(cfg, CropMode::Center)
    }

    /// Patches of a uniformly placed crop, used for training.
    pub fn random_clip<T: Scalar, R: Rng + ?Sized>(&self, cfg: &EncoderConfig, rng: &mut R) -> Result<PatchArray<T>> {
        self.clip(cfg, CropMode::Random(rng))
    }
}

/// Loads every manifest video in parallel, preserving manifest order.
/// Videos that fail to load are returned separately with their error.
pub fn load_videos(manifest: &Manifest, frames: usize) -> (Vec<Video>, Vec<(String, Error)>) {
    let results: Vec<Result<Video>> = manifest
        .entries
        .par_iter()
        .map(|e| Video::load(e, manifest.scale, frames))
        .collect();
    let mut ok = Vec::new();
    let mut failed = Vec::new();
    for (entry, r) in manifest.entries.iter().zip(results) {
        match r {
            Ok(v) => ok.push(v),
            Err(e) => failed.push((entry.id.clone(), e)),
        }
    }
    (ok, failed)
}

/// Like [`load_videos`] but fails on the first broken video.
pub fn load_all(manifest: &Manifest, frames: usize) -> Result<Vec<Video>> {
    let (videos, mut failed) = load_videos(manifest, frames);
    if failed.is_empty() {
        Ok(videos)
    } else {
        Err(failed.swap_remove(0).1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::preprocess::{frame_file_name, write_ppm};

    fn parse(text: &str) -> Result<Manifest> {
        Manifest::parse(text, Path::new("/data/set/manifest.csv"))
    }

    fn line_of(e: Error) -> usize {
        match e {
            Error::Manifest { line, .. } => line,
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn parses_and_resolves_paths() {
        let m = parse("0,100\n# comment\n\na,clips/a,40\nb, /abs/b ,100\n").unwrap();
        assert_eq!(m.scale, MosScale::new(0.0, 100.0).unwrap());
        assert_eq!(m.ids(), vec!["a", "b"]);
        assert_eq!(m.entries[0].frames_dir, PathBuf::from("/data/set/clips/a"));
        assert_eq!(m.entries[0].line, 4);
        assert_eq!(m.entries[1].frames_dir, PathBuf::from("/abs/b"));
    }

    #[test]
    fn errors_cite_line_numbers() {
        assert_eq!(line_of(parse("0,100\na,x,10\nb,y\n").unwrap_err()), 3);
        assert_eq!(line_of(parse("0,100\na,x,10\na,y,20\n").unwrap_err()), 3);
        assert_eq!(line_of(parse("0,100\na,x,101\n").unwrap_err()), 2);
        assert_eq!(line_of(parse("0,100\na,x,ten\n").unwrap_err()), 2);
        assert_eq!(line_of(parse("\n5,1\na,x,2\n").unwrap_err()), 2);
        assert_eq!(line_of(parse("0;100\n").unwrap_err()), 1);
        assert!(parse("0,100\n").is_err());
        let msg = parse("0,5\nok,x,1\nbad,y\n").unwrap_err().to_string();
        assert!(msg.contains("manifest.csv:3"), "{msg}");
    }

    #[test]
    fn render_parses_back() {
        let scale = MosScale::new(0.0, 5.0).unwrap();
        let text = Manifest::render(scale, [("v0", "f/v0", 1.25), ("v1", "f/v1", 4.0)]);
        let m = parse(&text).unwrap();
        assert_eq!(m.entries.len(), 2);
        assert_eq!(m.entries[1].raw_mos, 4.0);
    }

    #[test]
    fn loads_videos_and_reports_failures() {
        let dir = tempfile::tempdir().unwrap();
        let good = dir.path().join("good");
        std::fs::create_dir(&good).unwrap();
        for i in 0..3 {
            write_ppm(&good.join(frame_file_name(i)), &Frame::filled(10, 12, [i as u8 * 50, 0, 9])).unwrap();
        }
        std::fs::write(dir.path().join("m.csv"), "0,10\ngood,good,5\nmissing,nowhere,1\n").unwrap();
        let m = Manifest::load(dir.path().join("m.csv")).unwrap();
        let (ok, failed) = load_videos(&m, 2);
        assert_eq!(ok.len(), 1);
        assert_eq!(ok[0].mos, 2.5);
        assert_eq!(ok[0].indices, vec![0, 1]);
        assert_eq!(failed.len(), 1);
        assert_eq!(failed[0].0, "missing");
        assert!(failed[0].1.to_string().contains("missing"));
        assert!(load_all(&m, 2).is_err());

        let cfg = EncoderConfig { frames: 2, height: 8, width: 8, ..EncoderConfig::tiny() };
        let patches = ok[0].center_clip::<f64>(&cfg).unwrap();
        assert_eq!(patches.frames(), 2);
        assert_eq!(patches.vector(0, 1)[0], 50.0 / 255.0);
        let wrong = EncoderConfig { frames: 3, ..cfg };
        assert!(ok[0].center_clip::<f64>(&wrong).is_err());
    }
}
