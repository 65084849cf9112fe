use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vocab::Vocabulary;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderKind {
    Transformer,
    Conformer,
}

/// Architecture hyperparameters. A block count of zero removes that decoder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub encoder_kind: EncoderKind,
    pub n_enc_blocks: usize,
    /// CMLM decoder depth.
    pub n_dec_blocks: usize,
    /// Auxiliary AR decoder depth.
    pub n_ar_blocks: usize,
    pub n_text_blocks: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub n_heads: usize,
    pub conv_kernel: usize,
    pub frame_dim: usize,
    pub vocab_size: usize,
    pub max_target_len: usize,
    pub dropout: f64,
    pub use_ctc_head: bool,
    pub use_length_predictor: bool,
    pub use_text_encoder: bool,
    /// AR decoder reuses the CMLM target embedding table.
    pub share_embeddings: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            encoder_kind: EncoderKind::Conformer,
            n_enc_blocks: 2,
            n_dec_blocks: 2,
            n_ar_blocks: 1,
            n_text_blocks: 2,
            d_model: 64,
            d_ff: 256,
            n_heads: 4,
            conv_kernel: 7,
            frame_dim: crate::data::DEFAULT_FRAME_DIM,
            vocab_size: 32,
            max_target_len: 16,
            // the 10-epoch desk schedule is step-limited; 0.1 (paper_scale) costs BLEU
            dropout: 0.0,
            use_ctc_head: false,
            use_length_predictor: true,
            use_text_encoder: true,
            share_embeddings: true,
        }
    }
}

impl ModelConfig {
    pub fn has_cmlm(&self) -> bool {
        self.n_dec_blocks > 0
    }

    pub fn has_ar(&self) -> bool {
        self.n_ar_blocks > 0
    }

    pub fn vocab(&self) -> Vocabulary {
        Vocabulary::with_size(self.vocab_size).expect("validated vocabulary size")
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return fail(format!("d_model {} not divisible by n_heads {}", self.d_model, self.n_heads));
        }
        if self.conv_kernel.is_multiple_of(2) {
            return fail(format!("conv_kernel {} must be odd", self.conv_kernel));
        }
        if self.vocab_size < crate::vocab::NUM_SPECIAL + 1 {
            return fail(format!("vocab_size {} too small", self.vocab_size));
        }
        if self.d_model == 0 || self.d_ff == 0 || self.frame_dim == 0 {
            return fail("d_model, d_ff and frame_dim must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.use_text_encoder && !self.has_cmlm() {
            return fail("text encoder only feeds the CMLM decoder".into());
        }
        Ok(())
    }

    /// Named architecture presets. Desk presets are scaled down to train on
    /// a CPU in minutes; `paper_scale` keeps the full-size numbers.
    pub fn preset(name: &str) -> Result<Self> {
        let base = ModelConfig::default();
        let cfg = match name {
            "ar_desk" => ModelConfig {
                n_dec_blocks: 0,
                n_ar_blocks: 2,
                use_length_predictor: false,
                use_text_encoder: false,
                ..base
            },
            "cmlm_desk" => ModelConfig {
                n_ar_blocks: 0,
                use_text_encoder: false,
                ..base
            },
            "ctc_desk" => ModelConfig {
                n_dec_blocks: 0,
                n_ar_blocks: 0,
                use_ctc_head: true,
                use_length_predictor: false,
                use_text_encoder: false,
                ..base
            },
            "ctc_cmlm_desk" => ModelConfig {
                n_ar_blocks: 0,
                use_ctc_head: true,
                use_length_predictor: false,
                use_text_encoder: false,
                ..base
            },
            "orthros_cmlm_desk" => base,
            "orthros_ctc_desk" => ModelConfig {
                n_dec_blocks: 0,
                use_ctc_head: true,
                use_length_predictor: false,
                use_text_encoder: false,
                ..base
            },
            "paper_scale" => ModelConfig {
                n_enc_blocks: 12,
                n_dec_blocks: 6,
                n_ar_blocks: 1,
                n_text_blocks: 6,
                d_model: 256,
                d_ff: 2048,
                n_heads: 4,
                conv_kernel: 15,
                max_target_len: 256,
                dropout: 0.1,
                ..base
            },
            other => return Err(Error::Config(format!("unknown preset {other:?}"))),
        };
        Ok(cfg)
    }

    /// Very small configuration with every component enabled; for tests.
    pub fn tiny() -> Self {
        ModelConfig {
            encoder_kind: EncoderKind::Conformer,
            n_enc_blocks: 1,
            n_dec_blocks: 1,
            n_ar_blocks: 1,
            n_text_blocks: 1,
            d_model: 8,
            d_ff: 12,
            n_heads: 2,
            conv_kernel: 3,
            frame_dim: 4,
            vocab_size: 10,
            max_target_len: 8,
            dropout: 0.0,
            use_ctc_head: true,
            use_length_predictor: true,
            use_text_encoder: true,
            share_embeddings: true,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        for p in [
            "ar_desk",
            "cmlm_desk",
            "ctc_desk",
            "ctc_cmlm_desk",
            "orthros_cmlm_desk",
            "orthros_ctc_desk",
            "paper_scale",
        ] {
            ModelConfig::preset(p).unwrap().validate().unwrap();
        }
        assert!(ModelConfig::preset("nope").is_err());
        let paper = ModelConfig::preset("paper_scale").unwrap();
        assert_eq!((paper.n_enc_blocks, paper.n_dec_blocks, paper.d_model, paper.d_ff), (12, 6, 256, 2048));
    }

    #[test]
    fn invalid_configs() {
        let mut c = ModelConfig::tiny();
        c.n_heads = 3;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::tiny();
        c.conv_kernel = 4;
        assert!(c.validate().is_err());
    }
}
