use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Architecture hyperparameters and path switches.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Hidden width shared by every path.
    pub d: usize,
    /// Inner width of the feed-forward sublayers.
    pub d_ff: usize,
    pub heads: usize,
    /// Convolution kernel width (odd).
    pub kernel: usize,
    pub cnn_enc_layers: usize,
    pub san_enc_layers: usize,
    pub cnn_dec_layers: usize,
    pub san_dec_layers: usize,
    pub src_vocab: usize,
    pub tgt_vocab: usize,
    pub max_len: usize,
    pub dropout: f64,
    pub enc_cnn: bool,
    pub enc_san: bool,
    pub dec_cnn: bool,
    pub dec_san: bool,
    /// One word table for source and target (requires equal vocabularies).
    #[serde(default)]
    pub share_embeddings: bool,
}

impl ModelConfig {
    /// d=64 model for the synthetic tasks: 2 CNN / 1 SAN layers per side.
    pub fn tiny(src_vocab: usize, tgt_vocab: usize) -> Self {
        ModelConfig {
            d: 64,
            d_ff: 256,
            heads: 4,
            kernel: 3,
            cnn_enc_layers: 2,
            san_enc_layers: 1,
            cnn_dec_layers: 2,
            san_dec_layers: 1,
            src_vocab,
            tgt_vocab,
            max_len: 64,
            dropout: 0.0,
            enc_cnn: true,
            enc_san: true,
            dec_cnn: true,
            dec_san: true,
            share_embeddings: false,
        }
    }

    /// Small translation setting: d=256, 4 CNN / 2 SAN layers per side,
    /// 10K joint vocabulary with a shared word table.
    pub fn iwslt() -> Self {
        ModelConfig {
            d: 256,
            d_ff: 1024,
            heads: 4,
            kernel: 3,
            cnn_enc_layers: 4,
            san_enc_layers: 2,
            cnn_dec_layers: 4,
            san_dec_layers: 2,
            src_vocab: 10_000,
            tgt_vocab: 10_000,
            max_len: 256,
            dropout: 0.1,
            share_embeddings: true,
            ..Self::tiny(0, 0)
        }
    }

    /// Deep setting: 12 CNN / 6 SAN layers per side, dropout 0.2.
    pub fn nist() -> Self {
        ModelConfig {
            cnn_enc_layers: 12,
            san_enc_layers: 6,
            cnn_dec_layers: 12,
            san_dec_layers: 6,
            src_vocab: 37_000,
            tgt_vocab: 25_000,
            dropout: 0.2,
            share_embeddings: false,
            ..Self::iwslt()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if !self.enc_cnn && !self.enc_san {
            return fail("at least one encoder path must be enabled".into());
        }
        if !self.dec_cnn && !self.dec_san {
            return fail("at least one decoder path must be enabled".into());
        }
        if self.d == 0 {
            return fail("d must be positive".into());
        }
        if self.heads == 0 || !self.d.is_multiple_of(self.heads) {
            return fail(format!("heads ({}) must divide d ({})", self.heads, self.d));
        }
        if self.kernel == 0 || self.kernel.is_multiple_of(2) {
            return fail(format!("kernel must be odd, got {}", self.kernel));
        }
        if self.src_vocab == 0 || self.tgt_vocab == 0 {
            return fail("vocabulary sizes must be positive".into());
        }
        if self.max_len == 0 {
            return fail("max_len must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout must lie in [0, 1), got {}", self.dropout));
        }
        if self.share_embeddings && self.src_vocab != self.tgt_vocab {
            return fail(format!(
                "share_embeddings needs src_vocab == tgt_vocab ({} vs {})",
                self.src_vocab, self.tgt_vocab
            ));
        }
        for (side, both, cnn, san) in [
            ("encoder", self.enc_cnn && self.enc_san, self.cnn_enc_layers, self.san_enc_layers),
            ("decoder", self.dec_cnn && self.dec_san, self.cnn_dec_layers, self.san_dec_layers),
        ] {
            if both && cnn != 2 * san {
                return fail(format!(
                    "{side} depth mismatch: {cnn} CNN layers need {} SAN layers",
                    cnn as f64 / 2.0
                ));
            }
        }
        Ok(())
    }

    pub fn enc_paths(&self) -> usize {
        self.enc_cnn as usize + self.enc_san as usize
    }

    pub fn dec_paths(&self) -> usize {
        self.dec_cnn as usize + self.dec_san as usize
    }
}

/// The nine path combinations of the ablation grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Ablation {
    M1,
    M2,
    M3,
    M4,
    M5,
    M6,
    M7,
    M8,
    M9,
}

impl Ablation {
    pub const ALL: [Ablation; 9] = [
        Ablation::M1,
        Ablation::M2,
        Ablation::M3,
        Ablation::M4,
        Ablation::M5,
        Ablation::M6,
        Ablation::M7,
        Ablation::M8,
        Ablation::M9,
    ];

    /// `(enc_cnn, enc_san, dec_cnn, dec_san)`.
    pub fn switches(self) -> (bool, bool, bool, bool) {
        use Ablation::*;
        match self {
            M1 => (true, false, true, false),
            M2 => (true, false, false, true),
            M3 => (true, false, true, true),
            M4 => (false, true, true, false),
            M5 => (false, true, false, true),
            M6 => (false, true, true, true),
            M7 => (true, true, true, false),
            M8 => (true, true, false, true),
            M9 => (true, true, true, true),
        }
    }

    pub fn apply(self, base: &ModelConfig) -> ModelConfig {
        let (enc_cnn, enc_san, dec_cnn, dec_san) = self.switches();
        ModelConfig {
            enc_cnn,
            enc_san,
            dec_cnn,
            dec_san,
            ..base.clone()
        }
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.to_string().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown ablation `{s}` (expected M1..M9)")))
    }
}

/// Switches the paths of `base` according to ablation `id` ("M1".."M9").
pub fn build_ablation(id: &str, base: &ModelConfig) -> Result<ModelConfig> {
    Ok(id.parse::<Ablation>()?.apply(base))
}
