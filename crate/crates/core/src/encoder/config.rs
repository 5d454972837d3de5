use crate::error::{Error, Result};

/// Number of quality anchors the head predicts over.
pub const ANCHORS: usize = 6;

/// Architecture hyperparameters of the encoder and its quality head.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EncoderConfig {
    /// Sampled frames per clip (`F`).
    pub frames: usize,
    /// Crop height (`H`).
    pub height: usize,
    /// Crop width (`W`).
    pub width: usize,
    /// Patch side (`P`).
    pub patch: usize,
    /// Embedding width (`D`).
    pub dim: usize,
    /// Attention heads (`A`).
    pub heads: usize,
    /// Encoding blocks (`L`).
    pub blocks: usize,
    /// Hidden width of the per-block MLP.
    pub mlp_hidden: usize,
    /// Hidden width of the quality-head MLP.
    pub head_hidden: usize,
}

impl Default for EncoderConfig {
    /// `F=8, H=W=224, P=16, D=768, A=12, L=12`, MLP hidden `4D`, head hidden `D`.
    fn default() -> Self {
        Self {
            frames: 8,
            height: 224,
            width: 224,
            patch: 16,
            dim: 768,
            heads: 12,
            blocks: 12,
            mlp_hidden: 4 * 768,
            head_hidden: 768,
        }
    }
}

impl EncoderConfig {
    /// Desk-scale configuration used for gradient verification.
    pub fn tiny() -> Self {
        Self {
            frames: 2,
            height: 8,
            width: 8,
            patch: 4,
            dim: 8,
            heads: 2,
            blocks: 2,
            mlp_hidden: 32,
            head_hidden: 8,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.frames == 0 || self.blocks == 0 || self.heads == 0 || self.dim == 0 {
            return fail("frames, blocks, heads and dim must be at least 1".into());
        }
        if self.mlp_hidden == 0 || self.head_hidden == 0 {
            return fail("MLP widths must be at least 1".into());
        }
        if self.dim % self.heads != 0 {
            return fail(format!("dim {} is not divisible by heads {}", self.dim, self.heads));
        }
        if self.patch == 0 || self.patch > self.height.min(self.width) {
            return fail(format!(
                "patch {} does not fit a {}x{} crop",
                self.patch, self.height, self.width
            ));
        }
        Ok(())
    }

    /// Patch grid (rows, columns) of one cropped frame.
    pub fn grid(&self) -> (usize, usize) {
        (self.height / self.patch, self.width / self.patch)
    }

    /// Patches per frame, `S = ⌊H/P⌋·⌊W/P⌋`.
    pub fn patches_per_frame(&self) -> usize {
        let (gh, gw) = self.grid();
        gh * gw
    }

    /// Token sequence length `S·F + 1`.
    pub fn tokens(&self) -> usize {
        self.patches_per_frame() * self.frames + 1
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn patch_len(&self) -> usize {
        3 * self.patch * self.patch
    }

    /// Closed-form number of learnable scalars.
    pub fn parameter_count(&self) -> usize {
        let d = self.dim;
        let embedding = d * self.patch_len() + self.tokens() * d + d;
        let attention = 2 * d + 4 * d * d;
        let mlp = 2 * d + 2 * d * self.mlp_hidden + self.mlp_hidden + d;
        let head = self.head_hidden * d + self.head_hidden + ANCHORS * self.head_hidden + ANCHORS;
        embedding + self.blocks * (2 * attention + mlp) + head
    }
}
