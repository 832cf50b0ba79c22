//! The encoder–decoder network: segment-wise joint embedding, spatial and
//! temporal positional embeddings, a pre-LN transformer encoder over the
//! visible tokens, mask-token insertion, a transformer decoder over the full
//! token grid, and a per-token linear head predicting normalized motion.

mod checkpoint;
mod forward;
mod params;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::masking::Padding;

pub use checkpoint::{Checkpoint, CHECKPOINT_VERSION};
pub use forward::{
    add_positional, bind_params, decode_and_predict, encode_pooled, forward_batch, forward_pretrain,
    input_tokens, insert_mask_tokens, joint_embed, masked_mse_loss, masking_distribution, normalize_target, prepare_sample,
    segment_reshape, select_unmasked, transformer_stack, BatchOutput, ForwardArtifacts, PretrainSample,
};
pub use params::{init_params, param_shapes, BlockParams, ModelParams, Projection};

/// Layer-norm epsilon used throughout the network.
pub const LN_EPS: f64 = 1e-6;

/// Which representation of a sequence feeds the encoder or serves as the
/// prediction target.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stream {
    Joint,
    Motion,
}

impl Stream {
    pub fn as_str(self) -> &'static str {
        match self {
            Stream::Joint => "joint",
            Stream::Motion => "motion",
        }
    }
}

/// Network shape and the pre-training objective's knobs.
///
/// `Default` is the full-size network; [`ArchConfig::desk`] and
/// [`ArchConfig::toy`] are the reduced presets used for single-core runs and
/// gradient checks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArchConfig {
    /// Joints per frame, `V`.
    pub joints: usize,
    /// Coordinates per joint, `C_s`.
    pub channels: usize,
    /// Frames per token, `l`.
    pub segment_len: usize,
    /// Frames per input view, `T_s`.
    pub frames: usize,
    /// Encoder width, `C_e`.
    pub embed_dim: usize,
    pub encoder_depth: usize,
    pub decoder_depth: usize,
    /// Decoder width, `C_d`.
    pub decoder_dim: usize,
    pub heads: usize,
    /// Encoder MLP hidden width. The decoder keeps the same hidden/width
    /// ratio.
    pub mlp_dim: usize,
    pub mask_ratio: f64,
    /// Temporal stride of the motion target.
    pub target_stride: usize,
    pub target_padding: Padding,
    pub input_stream: Stream,
    pub target_stream: Stream,
    /// Residual-branch dropout during training.
    pub dropout: f64,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            joints: 25,
            channels: 3,
            segment_len: 4,
            frames: 120,
            embed_dim: 256,
            encoder_depth: 8,
            decoder_depth: 5,
            decoder_dim: 256,
            heads: 8,
            mlp_dim: 1024,
            mask_ratio: 0.9,
            target_stride: 1,
            target_padding: Padding::Zeros,
            input_stream: Stream::Joint,
            target_stream: Stream::Motion,
            dropout: 0.0,
        }
    }
}

impl ArchConfig {
    /// Single-core preset: 24-frame views of 15 joints, 4-frame tokens.
    pub fn desk() -> Self {
        Self {
            joints: 15,
            frames: 24,
            embed_dim: 64,
            encoder_depth: 3,
            decoder_depth: 1,
            decoder_dim: 32,
            heads: 4,
            mlp_dim: 128,
            ..Self::default()
        }
    }

    /// Smallest configuration exercising every component.
    pub fn toy() -> Self {
        Self {
            joints: 3,
            frames: 8,
            segment_len: 2,
            embed_dim: 16,
            encoder_depth: 2,
            decoder_depth: 1,
            decoder_dim: 16,
            heads: 2,
            mlp_dim: 32,
            mask_ratio: 0.5,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("joints", self.joints),
            ("channels", self.channels),
            ("segment_len", self.segment_len),
            ("frames", self.frames),
            ("embed_dim", self.embed_dim),
            ("decoder_dim", self.decoder_dim),
            ("heads", self.heads),
            ("mlp_dim", self.mlp_dim),
            ("target_stride", self.target_stride),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.frames % self.segment_len != 0 {
            return Err(Error::Config(format!(
                "frames ({}) not divisible by segment_len ({})",
                self.frames, self.segment_len
            )));
        }
        if self.embed_dim % self.heads != 0 || self.decoder_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "embed_dim ({}) and decoder_dim ({}) must be divisible by heads ({})",
                self.embed_dim, self.decoder_dim, self.heads
            )));
        }
        if !(0.0..=1.0).contains(&self.mask_ratio) {
            return Err(Error::Config(format!("mask_ratio {} outside [0, 1]", self.mask_ratio)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        // Motion streams difference at the target stride; the masking prior
        // differences at the segment length with replicate padding.
        let uses_motion = self.input_stream == Stream::Motion || self.target_stream == Stream::Motion;
        let min_frames = if self.target_padding == Padding::Replicate {
            2 * self.target_stride
        } else {
            self.target_stride + 1
        };
        if uses_motion && self.frames < min_frames {
            return Err(Error::Config(format!(
                "target_stride {} needs at least {min_frames} frames, have {}",
                self.target_stride, self.frames
            )));
        }
        Ok(())
    }

    /// Token-grid length `T_e = T_s / l`.
    pub fn segments(&self) -> usize {
        self.frames / self.segment_len
    }

    /// Tokens per sample, `T_e·V`.
    pub fn tokens(&self) -> usize {
        self.segments() * self.joints
    }

    /// Values per token, `l·C_s`.
    pub fn token_dim(&self) -> usize {
        self.segment_len * self.channels
    }

    pub fn decoder_mlp_dim(&self) -> usize {
        ((self.mlp_dim * self.decoder_dim) as f64 / self.embed_dim as f64).round().max(1.0) as usize
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_are_valid() {
        for cfg in [ArchConfig::default(), ArchConfig::desk(), ArchConfig::toy()] {
            cfg.validate().unwrap();
        }
        let d = ArchConfig::default();
        assert_eq!((d.segments(), d.tokens(), d.token_dim()), (30, 750, 12));
        assert_eq!(d.decoder_mlp_dim(), 1024);
    }

    #[test]
    fn invalid_shapes_are_config_errors() {
        let bad = [
            ArchConfig { frames: 9, ..ArchConfig::toy() },
            ArchConfig { heads: 3, ..ArchConfig::toy() },
            ArchConfig { mask_ratio: 1.5, ..ArchConfig::toy() },
            ArchConfig { joints: 0, ..ArchConfig::toy() },
            ArchConfig { dropout: 1.0, ..ArchConfig::toy() },
        ];
        for cfg in bad {
            assert!(matches!(cfg.validate(), Err(Error::Config(_))), "{cfg:?}");
        }
    }

    #[test]
    fn yaml_round_trip_and_unknown_keys() {
        let cfg = ArchConfig::desk();
        let text = serde_yaml::to_string(&cfg).unwrap();
        let back: ArchConfig = serde_yaml::from_str(&text).unwrap();
        assert_eq!(back, cfg);
        let partial: ArchConfig = serde_yaml::from_str("embed_dim: 32\ninput_stream: motion\n").unwrap();
        assert_eq!(partial.embed_dim, 32);
        assert_eq!(partial.input_stream, Stream::Motion);
        assert!(serde_yaml::from_str::<ArchConfig>("embed_dims: 32\n").is_err());
    }
}
