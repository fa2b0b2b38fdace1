//! The double path encoder-decoder: CNN and SAN paths on both sides,
//! joined by four gated decoder-to-encoder attention flows.

pub mod checkpoint;
mod config;
mod count;
mod forward;
mod incremental;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use config::{build_ablation, Ablation, ModelConfig};
pub use count::count_parameters;
pub use forward::{dot_attention, gate_fuse, DecoderOutput, EncoderOutput, Flow, Trace};
pub use incremental::IncrementalState;

use crate::data::PAD;
use crate::error::Result;
use crate::nn::{init, Embedding, FeedForward, GluConv, LayerNorm, MultiHeadAttention, ParamId, ParamStore};
use crate::tensor::{Scalar, Tensor};

/// Scalar sigmoid gate over the concatenation of two `d`-wide inputs.
#[derive(Clone, Debug)]
pub(crate) struct Gate {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Gate {
    fn new<T: Scalar>(store: &mut ParamStore<T>, prefix: &str, d: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        Ok(Gate {
            weight: store.add(format!("{prefix}.weight"), init::xavier(2 * d, 1, rng))?,
            bias: store.add(format!("{prefix}.bias"), Tensor::zeros(vec![1]))?,
        })
    }
}

#[derive(Clone, Debug)]
pub(crate) struct SanEncoderLayer {
    pub self_attn: MultiHeadAttention,
    pub ln1: LayerNorm,
    pub ffn: FeedForward,
    pub ln2: LayerNorm,
}

#[derive(Clone, Debug)]
pub(crate) struct CnnDecoderLayer {
    pub conv: GluConv,
    /// Present only when both encoder paths exist.
    pub gate: Option<Gate>,
}

#[derive(Clone, Debug)]
pub(crate) struct SanDecoderLayer {
    pub self_attn: MultiHeadAttention,
    pub ln1: LayerNorm,
    pub cross_gate: Option<Gate>,
    pub ln2: LayerNorm,
    pub ffn: FeedForward,
    pub ln3: LayerNorm,
}

#[derive(Clone, Debug)]
pub(crate) struct Arch {
    pub src_embed: Embedding,
    pub tgt_embed: Embedding,
    pub enc_cnn: Vec<GluConv>,
    pub enc_san: Vec<SanEncoderLayer>,
    pub dec_cnn: Vec<CnnDecoderLayer>,
    pub dec_san: Vec<SanDecoderLayer>,
    /// Present only when both decoder paths exist.
    pub out_gate: Option<Gate>,
    pub proj_weight: ParamId,
    pub proj_bias: ParamId,
}

/// A configured network together with its parameters.
#[derive(Clone, Debug)]
pub struct Dpn<T: Scalar> {
    config: ModelConfig,
    arch: Arch,
    pub params: ParamStore<T>,
}

impl<T: Scalar> Dpn<T> {
    /// Builds and randomly initializes the network described by `config`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let c = &config;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let both_enc = c.enc_cnn && c.enc_san;

        let src_embed = Embedding::new(&mut store, "src_embed", c.src_vocab, c.max_len, c.d, Some(PAD), None, &mut rng)?;
        let shared = c.share_embeddings.then_some(src_embed.word);
        let tgt_embed = Embedding::new(&mut store, "tgt_embed", c.tgt_vocab, c.max_len, c.d, Some(PAD), shared, &mut rng)?;

        let mut enc_cnn = Vec::new();
        if c.enc_cnn {
            for l in 0..c.cnn_enc_layers {
                enc_cnn.push(GluConv::new(&mut store, &format!("encoder.cnn.{l}"), c.d, c.kernel, c.dropout, &mut rng)?);
            }
        }
        let mut enc_san = Vec::new();
        if c.enc_san {
            for l in 0..c.san_enc_layers {
                let p = format!("encoder.san.{l}");
                enc_san.push(SanEncoderLayer {
                    self_attn: MultiHeadAttention::new(&mut store, &format!("{p}.self_attn"), c.d, c.heads, &mut rng)?,
                    ln1: LayerNorm::new(&mut store, &format!("{p}.ln1"), c.d)?,
                    ffn: FeedForward::new(&mut store, &format!("{p}.ffn"), c.d, c.d_ff, &mut rng)?,
                    ln2: LayerNorm::new(&mut store, &format!("{p}.ln2"), c.d)?,
                });
            }
        }
        let mut dec_cnn = Vec::new();
        if c.dec_cnn {
            for l in 0..c.cnn_dec_layers {
                let p = format!("decoder.cnn.{l}");
                dec_cnn.push(CnnDecoderLayer {
                    conv: GluConv::new(&mut store, &format!("{p}.conv"), c.d, c.kernel, c.dropout, &mut rng)?,
                    gate: if both_enc {
                        Some(Gate::new(&mut store, &format!("{p}.gate"), c.d, &mut rng)?)
                    } else {
                        None
                    },
                });
            }
        }
        let mut dec_san = Vec::new();
        if c.dec_san {
            for l in 0..c.san_dec_layers {
                let p = format!("decoder.san.{l}");
                dec_san.push(SanDecoderLayer {
                    self_attn: MultiHeadAttention::new(&mut store, &format!("{p}.self_attn"), c.d, c.heads, &mut rng)?,
                    ln1: LayerNorm::new(&mut store, &format!("{p}.ln1"), c.d)?,
                    cross_gate: if both_enc {
                        Some(Gate::new(&mut store, &format!("{p}.cross_gate"), c.d, &mut rng)?)
                    } else {
                        None
                    },
                    ln2: LayerNorm::new(&mut store, &format!("{p}.ln2"), c.d)?,
                    ffn: FeedForward::new(&mut store, &format!("{p}.ffn"), c.d, c.d_ff, &mut rng)?,
                    ln3: LayerNorm::new(&mut store, &format!("{p}.ln3"), c.d)?,
                });
            }
        }
        let out_gate = if c.dec_cnn && c.dec_san {
            Some(Gate::new(&mut store, "output.gate", c.d, &mut rng)?)
        } else {
            None
        };
        let proj_weight = store.add("output.proj.weight", init::xavier(c.d, c.tgt_vocab, &mut rng))?;
        let proj_bias = store.add("output.proj.bias", Tensor::zeros(vec![c.tgt_vocab]))?;

        let arch = Arch {
            src_embed,
            tgt_embed,
            enc_cnn,
            enc_san,
            dec_cnn,
            dec_san,
            out_gate,
            proj_weight,
            proj_bias,
        };
        Ok(Dpn {
            config,
            arch,
            params: store,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Same network with parameters converted to another float type.
    pub fn to_dtype<U: Scalar>(&self) -> Dpn<U> {
        Dpn {
            config: self.config.clone(),
            arch: self.arch.clone(),
            params: self.params.to_dtype(),
        }
    }

    /// Number of parameter sets belonging to fusion gates (cross and output).
    pub fn fusion_gate_sets(&self) -> usize {
        self.arch.dec_cnn.iter().filter(|l| l.gate.is_some()).count()
            + self.arch.dec_san.iter().filter(|l| l.cross_gate.is_some()).count()
            + self.arch.out_gate.is_some() as usize
    }
}
