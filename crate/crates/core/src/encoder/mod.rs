mod forward;
mod weights;

pub use forward::{
    encode_image_on_tape, encode_text_on_tape, BackboneBinding, EncodeTrace, LayerIds, TowerIds,
};
pub use weights::{weight_layout, Backbone};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Shapes of the two-tower backbone: a text transformer and a patch-based
/// vision transformer projected into a shared joint space.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    /// Transformer depth, shared by both towers.
    pub layers: usize,
    /// Attention heads per layer, shared by both towers.
    pub heads: usize,
    /// Text tower width.
    pub d_t: usize,
    /// Vision tower width.
    pub d_v: usize,
    /// Joint embedding width both towers project into.
    pub d_joint: usize,
    /// Token vocabulary size.
    pub vocab: usize,
    /// Maximum text sequence length (positional table size).
    pub max_tokens: usize,
    /// Square image side length in pixels.
    pub image: usize,
    /// Square patch side length in pixels.
    pub patch: usize,
    /// Image channels.
    pub channels: usize,
}

impl EncoderConfig {
    /// Desk-scale configuration used by the benchmark pipeline.
    pub fn mini() -> Self {
        EncoderConfig {
            layers: 4,
            heads: 4,
            d_t: 64,
            d_v: 64,
            d_joint: 32,
            vocab: 64,
            max_tokens: 16,
            image: 16,
            patch: 4,
            channels: 3,
        }
    }

    /// Very small configuration for gradient checks and unit tests.
    pub fn tiny() -> Self {
        EncoderConfig {
            layers: 2,
            heads: 2,
            d_t: 8,
            d_v: 8,
            d_joint: 8,
            vocab: 24,
            max_tokens: 8,
            image: 8,
            patch: 4,
            channels: 3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("layers", self.layers),
            ("heads", self.heads),
            ("d_t", self.d_t),
            ("d_v", self.d_v),
            ("d_joint", self.d_joint),
            ("vocab", self.vocab),
            ("max_tokens", self.max_tokens),
            ("image", self.image),
            ("patch", self.patch),
            ("channels", self.channels),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::config(format!("{name} must be positive")));
            }
        }
        if !self.d_t.is_multiple_of(self.heads) || !self.d_v.is_multiple_of(self.heads) {
            return Err(Error::config(format!(
                "head count {} must divide both widths ({}, {})",
                self.heads, self.d_t, self.d_v
            )));
        }
        if !self.image.is_multiple_of(self.patch) {
            return Err(Error::config(format!(
                "patch size {} must divide image size {}",
                self.patch, self.image
            )));
        }
        Ok(())
    }

    pub fn patch_grid(&self) -> usize {
        self.image / self.patch
    }

    pub fn n_patches(&self) -> usize {
        self.patch_grid() * self.patch_grid()
    }

    /// Flattened pixels per patch.
    pub fn patch_dim(&self) -> usize {
        self.patch * self.patch * self.channels
    }

    /// Vision sequence length: class token plus one token per patch.
    pub fn vis_tokens(&self) -> usize {
        self.n_patches() + 1
    }
}

/// Token id sequence for the text tower. Non-empty by construction;
/// vocabulary and length limits are checked against a config at encode time.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TokenSeq(Vec<u32>);

impl TokenSeq {
    pub fn new(ids: Vec<u32>) -> Result<Self> {
        if ids.is_empty() {
            return Err(Error::contract("token sequence must be non-empty".to_string()));
        }
        Ok(TokenSeq(ids))
    }

    pub fn ids(&self) -> &[u32] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        false // enforced non-empty at construction
    }

    pub fn check(&self, cfg: &EncoderConfig) -> Result<()> {
        if self.0.len() > cfg.max_tokens {
            return Err(Error::contract(format!(
                "token sequence length {} exceeds max_tokens {}",
                self.0.len(),
                cfg.max_tokens
            )));
        }
        if let Some(&bad) = self.0.iter().find(|&&t| t as usize >= cfg.vocab) {
            return Err(Error::contract(format!(
                "token id {bad} outside vocabulary of size {}",
                cfg.vocab
            )));
        }
        Ok(())
    }
}

/// Flattens an `[image, image, channels]` tensor into `[n_patches,
/// patch_dim]`, patches in row-major grid order, each patch flattened as
/// (pixel row, pixel column, channel).
pub fn extract_patches(cfg: &EncoderConfig, image: &Tensor) -> Result<Tensor> {
    let want = [cfg.image, cfg.image, cfg.channels];
    if image.shape() != want {
        return Err(Error::shape(
            "extract_patches",
            format!("expected {:?}, got {:?}", want, image.shape()),
        ));
    }
    let side = cfg.image;
    let ch = cfg.channels;
    let p = cfg.patch;
    let grid = cfg.patch_grid();
    let data = image.data();
    let mut out = Vec::with_capacity(cfg.n_patches() * cfg.patch_dim());
    for py in 0..grid {
        for px in 0..grid {
            for dy in 0..p {
                let y = py * p + dy;
                let x0 = px * p;
                out.extend_from_slice(&data[(y * side + x0) * ch..(y * side + x0 + p) * ch]);
            }
        }
    }
    Tensor::new(vec![cfg.n_patches(), cfg.patch_dim()], out)
}
