use crate::attention::{Extent, Window};
use crate::error::{Error, Result};
use crate::tensor::Dims3;

/// How per-position cross-entropies are combined.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossReduction {
    Mean,
    Sum,
}

/// Architecture hyper-parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub layers: usize,
    pub d_model: usize,
    pub heads: usize,
    /// Visual vocabulary size `N`.
    pub vocab: usize,
    /// Text vocabulary, including the reserved `None` id 0.
    pub text_vocab: usize,
    pub encoder_extent: Extent,
    pub decoder_self_extent: Extent,
    pub decoder_cross_extent: Extent,
    /// Largest target grid; positional tables have these lengths.
    pub target_dims: Dims3,
    /// Largest condition grid (text: `1 x 1 x max_len`).
    pub cond_dims: Dims3,
    pub ffn_multiplier: usize,
    pub reduction: LossReduction,
    pub ln_eps: f64,
}

impl ModelConfig {
    /// Desk-scale configuration used by the toy training run.
    pub fn toy() -> Self {
        ModelConfig {
            layers: 2,
            d_model: 32,
            heads: 2,
            vocab: 16,
            text_vocab: 8,
            encoder_extent: Extent::text(),
            decoder_self_extent: Extent::video(),
            decoder_cross_extent: Extent::text(),
            target_dims: Dims3::new(2, 2, 2),
            cond_dims: Dims3::new(1, 1, 3),
            ffn_multiplier: 4,
            reduction: LossReduction::Mean,
            ln_eps: 1e-5,
        }
    }

    /// Smallest configuration used for gradient checks.
    pub fn tiny() -> Self {
        ModelConfig {
            layers: 1,
            d_model: 8,
            heads: 2,
            vocab: 8,
            text_vocab: 6,
            ffn_multiplier: 2,
            ..ModelConfig::toy()
        }
    }

    /// The large text-to-video configuration: 24 layers of width 1280 with 20
    /// heads, 21x21x10 visual grids over 12,288 tokens, 77 text tokens.
    /// Only used for parameter counting.
    pub fn paper_scale() -> Self {
        ModelConfig {
            layers: 24,
            d_model: 1280,
            heads: 20,
            vocab: 12_288,
            text_vocab: 49_408,
            encoder_extent: Extent::text(),
            decoder_self_extent: Extent::video(),
            decoder_cross_extent: Extent::text(),
            target_dims: Dims3::new(21, 21, 10),
            cond_dims: Dims3::new(1, 1, 77),
            ffn_multiplier: 4,
            reduction: LossReduction::Mean,
            ln_eps: 1e-5,
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "toy" => Ok(ModelConfig::toy()),
            "tiny" => Ok(ModelConfig::tiny()),
            "paper-scale" => Ok(ModelConfig::paper_scale()),
            other => Err(Error::contract(format!("unknown preset {other:?}"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 {
            return Err(Error::contract("layer count must be >= 1"));
        }
        if self.d_model == 0 || self.heads == 0 || self.d_model % self.heads != 0 {
            return Err(Error::contract(format!(
                "d_model {} must be a positive multiple of heads {}",
                self.d_model, self.heads
            )));
        }
        if self.vocab < 2 {
            return Err(Error::contract("visual vocabulary must have >= 2 tokens"));
        }
        if self.text_vocab < 2 {
            return Err(Error::contract("text vocabulary needs the None id plus at least one token"));
        }
        if self.ffn_multiplier == 0 {
            return Err(Error::contract("ffn_multiplier must be >= 1"));
        }
        self.target_dims.check_nonzero("target")?;
        self.cond_dims.check_nonzero("condition")?;
        if !(self.ln_eps > 0.0) {
            return Err(Error::contract("layer-norm epsilon must be positive"));
        }
        Ok(())
    }

    /// Fields in checkpoint order, as u32.
    pub fn to_words(&self) -> Vec<u32> {
        let ext = |e: &Extent| [e.h.to_u32(), e.w.to_u32(), e.s.to_u32()];
        let mut out = vec![
            self.layers as u32,
            self.d_model as u32,
            self.heads as u32,
            self.vocab as u32,
            self.text_vocab as u32,
        ];
        out.extend(ext(&self.encoder_extent));
        out.extend(ext(&self.decoder_self_extent));
        out.extend(ext(&self.decoder_cross_extent));
        out.extend([
            self.target_dims.h as u32,
            self.target_dims.w as u32,
            self.target_dims.s as u32,
            self.cond_dims.h as u32,
            self.cond_dims.w as u32,
            self.cond_dims.s as u32,
            self.ffn_multiplier as u32,
            match self.reduction {
                LossReduction::Mean => 0,
                LossReduction::Sum => 1,
            },
        ]);
        out
    }

    pub const WORDS: usize = 22;

    pub fn from_words(w: &[u32]) -> Result<Self> {
        if w.len() != Self::WORDS {
            return Err(Error::Format(format!("config block has {} words, expected {}", w.len(), Self::WORDS)));
        }
        let ext = |o: usize| -> Result<Extent> {
            Ok(Extent::new(Window::from_u32(w[o])?, Window::from_u32(w[o + 1])?, Window::from_u32(w[o + 2])?))
        };
        let u = |o: usize| w[o] as usize;
        let config = ModelConfig {
            layers: u(0),
            d_model: u(1),
            heads: u(2),
            vocab: u(3),
            text_vocab: u(4),
            encoder_extent: ext(5)?,
            decoder_self_extent: ext(8)?,
            decoder_cross_extent: ext(11)?,
            target_dims: Dims3::new(u(14), u(15), u(16)),
            cond_dims: Dims3::new(u(17), u(18), u(19)),
            ffn_multiplier: u(20),
            reduction: match w[21] {
                0 => LossReduction::Mean,
                1 => LossReduction::Sum,
                other => return Err(Error::Format(format!("unknown loss reduction {other}"))),
            },
            ln_eps: 1e-5,
        };
        config.validate().map_err(|e| Error::Format(format!("invalid config block: {e}")))?;
        Ok(config)
    }
}
