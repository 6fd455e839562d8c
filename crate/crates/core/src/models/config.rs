use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Variant {
    ReformerBase,
    ReformerFast,
    Transformer,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::ReformerBase, Variant::ReformerFast, Variant::Transformer];

    pub fn name(self) -> &'static str {
        match self {
            Variant::ReformerBase => "reformer-base",
            Variant::ReformerFast => "reformer-fast",
            Variant::Transformer => "transformer",
        }
    }

    pub fn is_reformer(self) -> bool {
        !matches!(self, Variant::Transformer)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown variant `{s}` (allowed: reformer-base, reformer-fast, transformer)"
                ))
            })
    }
}

/// Architecture hyper-parameters.
///
/// `layers` is the trunk depth for the reformer variants and the decoder
/// depth for the Transformer. `prenet_layers` only applies to
/// reformer-fast, `encoder_layers` only to the Transformer.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub variant: Variant,
    pub layers: usize,
    pub embed_dim: usize,
    pub ffn_mult: usize,
    pub heads: usize,
    pub dropout: f64,
    pub src_vocab: usize,
    pub tgt_vocab: usize,
    pub prenet_layers: usize,
    pub encoder_layers: usize,
}

impl ModelConfig {
    /// Full-size defaults for a variant; vocabulary sizes must still be set.
    pub fn defaults(variant: Variant) -> Self {
        let (layers, prenet_layers, encoder_layers) = match variant {
            Variant::ReformerBase => (7, 0, 0),
            Variant::ReformerFast => (5, 5, 0),
            Variant::Transformer => (6, 0, 6),
        };
        Self {
            variant,
            layers,
            embed_dim: 256,
            ffn_mult: 4,
            heads: 4,
            dropout: 0.1,
            src_vocab: 0,
            tgt_vocab: 0,
            prenet_layers,
            encoder_layers,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.layers == 0 {
            return fail("layers must be at least 1".into());
        }
        if self.embed_dim == 0 || !self.embed_dim.is_multiple_of(2) {
            return fail(format!("embed_dim must be positive and even, got {}", self.embed_dim));
        }
        if self.heads == 0 || !self.embed_dim.is_multiple_of(self.heads) {
            return fail(format!(
                "embed_dim {} is not divisible by {} heads",
                self.embed_dim, self.heads
            ));
        }
        if self.ffn_mult == 0 {
            return fail("ffn_mult must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout must lie in [0, 1), got {}", self.dropout));
        }
        if self.src_vocab <= crate::training::vocab::NUM_SPECIAL || self.tgt_vocab <= crate::training::vocab::NUM_SPECIAL {
            return fail(format!(
                "vocabularies must exceed the {} reserved ids (src {}, tgt {})",
                crate::training::vocab::NUM_SPECIAL,
                self.src_vocab,
                self.tgt_vocab
            ));
        }
        Ok(())
    }

    /// Trunk matrix parameters in units of `e²`: four attention projections
    /// per attention block plus `2w` for each FFN.
    pub fn simplified_params(&self) -> f64 {
        let (l, w) = (self.layers as f64, self.ffn_mult as f64);
        match self.variant {
            Variant::ReformerBase => 2.0 * l * (4.0 + 2.0 * w),
            Variant::ReformerFast => 2.0 * l * (4.0 + 2.0 * w),
            Variant::Transformer => self.encoder_layers as f64 * (4.0 + 2.0 * w) + l * (8.0 + 2.0 * w),
        }
    }
}
