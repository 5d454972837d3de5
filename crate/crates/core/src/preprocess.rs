//! Frame loading, equal-interval sampling, cropping and patchification.
//!
//! A video on disk is a directory of binary PPM frames (`P6`, maxval 255)
//! named `frame_00000.ppm`, `frame_00001.ppm`, ... with no gaps.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// One RGB frame, 8 bits per channel, stored row-major as `R,G,B` triples.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Frame {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl Frame {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width * 3 {
            return Err(Error::Input(format!(
                "frame {height}x{width} needs {} bytes, got {}",
                height * width * 3,
                data.len()
            )));
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, rgb: [u8; 3]) -> Self {
        let data = rgb.iter().copied().cycle().take(height * width * 3).collect();
        Self { height, width, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn pixel(&self, row: usize, col: usize) -> [u8; 3] {
        let i = (row * self.width + col) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    /// Encodes as binary PPM.
    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.data);
        out
    }

    pub fn from_ppm(bytes: &[u8]) -> std::result::Result<Self, String> {
        let mut pos = 0;
        let magic = ppm_token(bytes, &mut pos)?;
        if magic != b"P6" {
            return Err("not a binary PPM (expected P6 magic)".into());
        }
        let width = ppm_number(bytes, &mut pos, "width")?;
        let height = ppm_number(bytes, &mut pos, "height")?;
        let maxval = ppm_number(bytes, &mut pos, "maxval")?;
        if maxval != 255 {
            return Err(format!("unsupported maxval {maxval} (only 255)"));
        }
        // Exactly one whitespace byte separates the header from the raster.
        if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
            return Err("missing separator after header".into());
        }
        pos += 1;
        let need = width * height * 3;
        let raster = &bytes[pos..];
        if raster.len() != need {
            return Err(format!("raster has {} bytes, expected {need}", raster.len()));
        }
        Ok(Self {
            height,
            width,
            data: raster.to_vec(),
        })
    }
}

fn ppm_token<'a>(bytes: &'a [u8], pos: &mut usize) -> std::result::Result<&'a [u8], String> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    if start == *pos {
        return Err("truncated header".into());
    }
    Ok(&bytes[start..*pos])
}

fn ppm_number(bytes: &[u8], pos: &mut usize, what: &str) -> std::result::Result<usize, String> {
    let tok = ppm_token(bytes, pos)?;
    std::str::from_utf8(tok)
        .ok()
        .and_then(|s| s.parse().ok())
        .filter(|&n: &usize| n > 0)
        .ok_or_else(|| format!("invalid {what} `{}`", String::from_utf8_lossy(tok)))
}

pub fn read_ppm(path: &Path) -> Result<Frame> {
    let bytes = fs::read(path)?;
    Frame::from_ppm(&bytes).map_err(|m| Error::format(path, m))
}

pub fn write_ppm(path: &Path, frame: &Frame) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(&frame.to_ppm())?;
    Ok(())
}

pub fn frame_file_name(index: usize) -> String {
    format!("frame_{index:05}.ppm")
}

/// A directory of densely numbered PPM frames sharing one size.
#[derive(Clone, Debug)]
pub struct FrameStore {
    dir: PathBuf,
    count: usize,
    height: usize,
    width: usize,
}

impl FrameStore {
    /// Counts `frame_00000.ppm, frame_00001.ppm, ...` up to the first gap and
    /// reads the first frame for its dimensions.
    pub fn open(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        if !dir.is_dir() {
            return Err(Error::format(&dir, "frame directory not found"));
        }
        let mut count = 0;
        while dir.join(frame_file_name(count)).is_file() {
            count += 1;
        }
        if count == 0 {
            return Err(Error::format(&dir, "no frames (expected frame_00000.ppm)"));
        }
        let first = read_ppm(&dir.join(frame_file_name(0)))?;
        Ok(Self {
            dir,
            count,
            height: first.height,
            width: first.width,
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn load(&self, index: usize) -> Result<Frame> {
        if index >= self.count {
            return Err(Error::Input(format!("frame {index} out of range ({} frames)", self.count)));
        }
        let path = self.dir.join(frame_file_name(index));
        let frame = read_ppm(&path)?;
        if frame.height != self.height || frame.width != self.width {
            return Err(Error::format(
                path,
                format!(
                    "frame is {}x{}, store is {}x{}",
                    frame.height, frame.width, self.height, self.width
                ),
            ));
        }
        Ok(frame)
    }

    /// Loads the `frames` equal-interval samples.
    pub fn load_sampled(&self, frames: usize) -> Result<(Vec<usize>, Vec<Frame>)> {
        let indices = sample_frames(self.count, frames)?;
        let loaded = indices.iter().map(|&i| self.load(i)).collect::<Result<Vec<_>>>()?;
        Ok((indices, loaded))
    }
}

/// Equal-interval indices `⌊k·N/F⌋` for `k = 0..F`; repeats frames when `N < F`.
pub fn sample_frames(available: usize, frames: usize) -> Result<Vec<usize>> {
    if available == 0 {
        return Err(Error::Input("cannot sample from an empty frame store".into()));
    }
    if frames == 0 {
        return Err(Error::Input("frame count must be at least 1".into()));
    }
    Ok((0..frames).map(|k| k * available / frames).collect())
}

fn check_crop(height: usize, width: usize, frame: &Frame) -> Result<()> {
    if frame.height < height || frame.width < width {
        return Err(Error::Input(format!(
            "source {}x{} smaller than crop {height}x{width}",
            frame.height, frame.width
        )));
    }
    Ok(())
}

/// Offsets drawn uniformly from every valid top-left corner.
pub fn random_offsets<R: Rng + ?Sized>(
    source: &Frame,
    height: usize,
    width: usize,
    rng: &mut R,
) -> Result<(usize, usize)> {
    check_crop(height, width, source)?;
    Ok((
        rng.random_range(0..=source.height - height),
        rng.random_range(0..=source.width - width),
    ))
}

/// Offsets of the centered crop (rounded toward the top-left).
pub fn center_offsets(source: &Frame, height: usize, width: usize) -> Result<(usize, usize)> {
    check_crop(height, width, source)?;
    Ok(((source.height - height) / 2, (source.width - width) / 2))
}

/// Copies the `height×width` rectangle whose top-left corner is `offsets`.
pub fn crop(frame: &Frame, height: usize, width: usize, offsets: (usize, usize)) -> Result<Frame> {
    check_crop(height, width, frame)?;
    let (r0, c0) = offsets;
    if r0 + height > frame.height || c0 + width > frame.width {
        return Err(Error::Input(format!("crop at {offsets:?} leaves the frame")));
    }
    let mut data = Vec::with_capacity(height * width * 3);
    for r in r0..r0 + height {
        let start = (r * frame.width + c0) * 3;
        data.extend_from_slice(&frame.data[start..start + width * 3]);
    }
    Ok(Frame { height, width, data })
}

/// Random crop of one frame; returns the crop and its offsets.
pub fn crop_random<R: Rng + ?Sized>(
    frame: &Frame,
    height: usize,
    width: usize,
    rng: &mut R,
) -> Result<(Frame, (usize, usize))> {
    let offsets = random_offsets(frame, height, width, rng)?;
    Ok((crop(frame, height, width, offsets)?, offsets))
}

/// How the crop window of a clip is placed.
pub enum CropMode<'a, R: ?Sized> {
    Random(&'a mut R),
    Center,
}

/// `F` cropped frames of one video, all cut at the same offsets.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoClip {
    pub frames: Vec<Frame>,
    pub offsets: (usize, usize),
    pub source: String,
    pub indices: Vec<usize>,
}

impl VideoClip {
    /// Crops already-sampled source frames with one shared window.
    pub fn from_frames<R: Rng + ?Sized>(
        source: impl Into<String>,
        indices: Vec<usize>,
        frames: &[Frame],
        height: usize,
        width: usize,
        mode: CropMode<'_, R>,
    ) -> Result<Self> {
        let first = frames
            .first()
            .ok_or_else(|| Error::Input("clip has no frames".into()))?;
        if frames.iter().any(|f| f.height != first.height || f.width != first.width) {
            return Err(Error::Input("clip frames differ in size".into()));
        }
        let offsets = match mode {
            CropMode::Random(rng) => random_offsets(first, height, width, rng)?,
            CropMode::Center => center_offsets(first, height, width)?,
        };
        let frames = frames
            .iter()
            .map(|f| crop(f, height, width, offsets))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            frames,
            offsets,
            source: source.into(),
            indices,
        })
    }

    pub fn height(&self) -> usize {
        self.frames.first().map_or(0, |f| f.height)
    }

    pub fn width(&self) -> usize {
        self.frames.first().map_or(0, |f| f.width)
    }
}

/// Flattened patch vectors of a clip, one row per (frame, location).
///
/// Row `t·S + p` holds patch `p` of frame `t`, locations numbered row-major
/// over the patch grid. Within a row the `3P²` values run over pixels
/// row-major inside the patch with channels interleaved (`R,G,B` per pixel),
/// each scaled to `[0, 1]` by dividing by 255.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchArray<T> {
    frames: usize,
    grid: (usize, usize),
    patch: usize,
    data: Tensor<T>,
}

impl<T: Scalar> PatchArray<T> {
    /// Wraps an existing `(F·S) × 3P²` matrix.
    pub fn from_tensor(frames: usize, grid: (usize, usize), patch: usize, data: Tensor<T>) -> Result<Self> {
        let rows = frames * grid.0 * grid.1;
        let cols = 3 * patch * patch;
        if data.shape() != [rows, cols] {
            return Err(Error::shape("patch array", &[rows, cols], data.shape()));
        }
        Ok(Self {
            frames,
            grid,
            patch,
            data,
        })
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn patches_per_frame(&self) -> usize {
        self.grid.0 * self.grid.1
    }

    /// Patch grid as (rows, columns).
    pub fn grid(&self) -> (usize, usize) {
        self.grid
    }

    pub fn patch(&self) -> usize {
        self.patch
    }

    pub fn patch_len(&self) -> usize {
        3 * self.patch * self.patch
    }

    pub fn tensor(&self) -> &Tensor<T> {
        &self.data
    }

    pub fn vector(&self, patch: usize, frame: usize) -> &[T] {
        self.data.row(frame * self.patches_per_frame() + patch)
    }

    /// Reassembles the retained pixel grid of every frame.
    pub fn assemble(&self) -> Vec<Frame> {
        let p = self.patch;
        let (gh, gw) = self.grid;
        let (h, w) = (gh * p, gw * p);
        let scale = T::lit(255.0);
        (0..self.frames)
            .map(|t| {
                let mut data = vec![0u8; h * w * 3];
                for gy in 0..gh {
                    for gx in 0..gw {
                        let v = self.vector(gy * gw + gx, t);
                        for dy in 0..p {
                            for dx in 0..p {
                                for c in 0..3 {
                                    let x = (v[(dy * p + dx) * 3 + c] * scale).round();
                                    data[((gy * p + dy) * w + gx * p + dx) * 3 + c] =
                                        x.to_f64_lossy().clamp(0.0, 255.0) as u8;
                                }
                            }
                        }
                    }
                }
                Frame {
                    height: h,
                    width: w,
                    data,
                }
            })
            .collect()
    }
}

/// Cuts every frame into non-overlapping `P×P` patches.
///
/// `S = ⌊H/P⌋·⌊W/P⌋`; pixels right of or below the last full patch are
/// discarded.
pub fn patchify<T: Scalar>(clip: &VideoClip, patch: usize) -> Result<PatchArray<T>> {
    let (h, w) = (clip.height(), clip.width());
    if patch == 0 || patch > h.min(w) {
        return Err(Error::Input(format!("patch size {patch} does not fit a {h}x{w} frame")));
    }
    let grid = (h / patch, w / patch);
    let per_frame = grid.0 * grid.1;
    let len = 3 * patch * patch;
    let inv = T::one() / T::lit(255.0);
    let mut data = Vec::with_capacity(clip.frames.len() * per_frame * len);
    for frame in &clip.frames {
        for gy in 0..grid.0 {
            for gx in 0..grid.1 {
                for dy in 0..patch {
                    let start = ((gy * patch + dy) * w + gx * patch) * 3;
                    data.extend(
                        frame.data[start..start + patch * 3]
                            .iter()
                            .map(|&b| T::lit(f64::from(b)) * inv),
                    );
                }
            }
        }
    }
    let tensor = Tensor::new(vec![clip.frames.len() * per_frame, len], data)?;
    PatchArray::from_tensor(clip.frames.len(), grid, patch, tensor)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn gradient_frame(h: usize, w: usize, salt: u8) -> Frame {
        let data = (0..h * w * 3).map(|i| (i as u8).wrapping_mul(37).wrapping_add(salt)).collect();
        Frame::new(h, w, data).unwrap()
    }

    #[test]
    fn sampling_examples() {
        assert_eq!(sample_frames(8, 8).unwrap(), vec![0, 1, 2, 3, 4, 5, 6, 7]);
        assert_eq!(sample_frames(16, 8).unwrap(), vec![0, 2, 4, 6, 8, 10, 12, 14]);
        assert_eq!(sample_frames(3, 8).unwrap(), vec![0, 0, 0, 1, 1, 1, 2, 2]);
        assert!(sample_frames(0, 8).is_err());
    }

    #[test]
    fn full_size_crop_is_identity() {
        let f = gradient_frame(6, 5, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (c, off) = crop_random(&f, 6, 5, &mut rng).unwrap();
        assert_eq!(off, (0, 0));
        assert_eq!(c, f);
    }

    #[test]
    fn crop_is_seed_deterministic() {
        let f = gradient_frame(40, 30, 0);
        let a = random_offsets(&f, 8, 8, &mut ChaCha8Rng::seed_from_u64(99)).unwrap();
        let b = random_offsets(&f, 8, 8, &mut ChaCha8Rng::seed_from_u64(99)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn crop_rejects_small_source() {
        let f = gradient_frame(4, 4, 0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(crop_random(&f, 5, 4, &mut rng).is_err());
    }

    #[test]
    fn crop_copies_the_window() {
        let f = gradient_frame(5, 6, 3);
        let c = crop(&f, 2, 3, (1, 2)).unwrap();
        for r in 0..2 {
            for col in 0..3 {
                assert_eq!(c.pixel(r, col), f.pixel(r + 1, col + 2));
            }
        }
    }

    #[test]
    fn clip_shares_offsets() {
        let frames: Vec<_> = (0..3).map(|i| gradient_frame(12, 12, i)).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let clip = VideoClip::from_frames("v", vec![0, 1, 2], &frames, 8, 8, CropMode::Random(&mut rng)).unwrap();
        for (c, f) in clip.frames.iter().zip(&frames) {
            assert_eq!(c, &crop(f, 8, 8, clip.offsets).unwrap());
        }
        let center =
            VideoClip::from_frames::<ChaCha8Rng>("v", vec![0, 1, 2], &frames, 8, 8, CropMode::Center).unwrap();
        assert_eq!(center.offsets, (2, 2));
    }

    #[test]
    fn patchify_counts() {
        let clip = VideoClip {
            frames: vec![gradient_frame(224, 224, 0)],
            offsets: (0, 0),
            source: "x".into(),
            indices: vec![0],
        };
        let p = patchify::<f32>(&clip, 16).unwrap();
        assert_eq!(p.patches_per_frame(), 196);
        assert_eq!(p.patch_len(), 768);
        let small = VideoClip {
            frames: vec![gradient_frame(8, 8, 0)],
            ..clip
        };
        assert_eq!(patchify::<f32>(&small, 4).unwrap().patches_per_frame(), 4);
        assert!(patchify::<f32>(&small, 9).is_err());
    }

    #[test]
    fn constant_frame_gives_identical_patches() {
        let clip = VideoClip {
            frames: vec![Frame::filled(8, 8, [128, 128, 128]); 2],
            offsets: (0, 0),
            source: "g".into(),
            indices: vec![0, 1],
        };
        let p = patchify::<f64>(&clip, 4).unwrap();
        assert!(p.tensor().data().iter().all(|&v| v == 128.0 / 255.0));
    }

    #[test]
    fn patch_vector_layout() {
        // Pixel (r, c) of the frame carries value r*10 + c in every channel,
        // with channel offsets 0/100/200 for R/G/B.
        let (h, w) = (4, 4);
        let mut data = Vec::new();
        for r in 0..h {
            for c in 0..w {
                let v = (r * 10 + c) as u8;
                data.extend([v, v + 100, v + 200]);
            }
        }
        let clip = VideoClip {
            frames: vec![Frame::new(h, w, data).unwrap()],
            offsets: (0, 0),
            source: "l".into(),
            indices: vec![0],
        };
        let p = patchify::<f64>(&clip, 2).unwrap();
        // location 1 = grid (0, 1): pixels (0,2),(0,3),(1,2),(1,3)
        let v: Vec<u8> = p.vector(1, 0).iter().map(|x| (x * 255.0).round() as u8).collect();
        assert_eq!(v, vec![2, 102, 202, 3, 103, 203, 12, 112, 212, 13, 113, 213]);
    }

    #[test]
    fn ppm_roundtrip_and_errors() {
        let f = gradient_frame(3, 5, 9);
        assert_eq!(Frame::from_ppm(&f.to_ppm()).unwrap(), f);
        let with_comment = [b"P6\n# made by hand\n5 3\n255\n".as_slice(), f.data()].concat();
        assert_eq!(Frame::from_ppm(&with_comment).unwrap(), f);
        assert!(Frame::from_ppm(b"P3\n1 1\n255\n").is_err());
        assert!(Frame::from_ppm(b"P6\n1 1\n65535\n\0\0\0\0\0\0").is_err());
        assert!(Frame::from_ppm(b"P6\n2 2\n255\n\0\0\0").is_err());
    }

    #[test]
    fn frame_store_scans_dense_names() {
        let dir = tempfile::tempdir().unwrap();
        for i in 0..3 {
            write_ppm(&dir.path().join(frame_file_name(i)), &gradient_frame(4, 6, i as u8)).unwrap();
        }
        write_ppm(&dir.path().join(frame_file_name(5)), &gradient_frame(4, 6, 0)).unwrap();
        let store = FrameStore::open(dir.path()).unwrap();
        assert_eq!((store.count(), store.height(), store.width()), (3, 4, 6));
        assert_eq!(store.load(2).unwrap(), gradient_frame(4, 6, 2));
        let (idx, frames) = store.load_sampled(4).unwrap();
        assert_eq!(idx, vec![0, 0, 1, 2]);
        assert_eq!(frames.len(), 4);
        assert!(FrameStore::open(dir.path().join("missing")).is_err());
    }

    proptest! {
        #[test]
        fn sampling_length_and_monotone(n in 1usize..500, f in 1usize..64) {
            let idx = sample_frames(n, f).unwrap();
            prop_assert_eq!(idx.len(), f);
            prop_assert!(idx.windows(2).all(|w| w[0] <= w[1]));
            prop_assert!(idx.iter().all(|&i| i < n));
        }

        #[test]
        fn patchify_assemble_roundtrip(gh in 1usize..4, gw in 1usize..4, p in 1usize..5, extra in 0usize..3, seed in any::<u8>()) {
            let (h, w) = (gh * p + extra, gw * p + extra);
            let frames = vec![gradient_frame(h, w, seed), gradient_frame(h, w, seed.wrapping_add(1))];
            let clip = VideoClip { frames: frames.clone(), offsets: (0, 0), source: "r".into(), indices: vec![0, 1] };
            let patches = patchify::<f32>(&clip, p).unwrap();
            prop_assert_eq!(patches.patch_len(), 3 * p * p);
            let (rows, cols) = (h / p, w / p);
            prop_assert_eq!(patches.grid(), (rows, cols));
            for (out, src) in patches.assemble().iter().zip(&frames) {
                prop_assert_eq!(out, &crop(src, rows * p, cols * p, (0, 0)).unwrap());
            }
        }
    }
}
