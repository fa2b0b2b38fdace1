use std::fmt;

use super::{Dpn, Gate};
use crate::error::{Error, Result};
use crate::nn::{dropout, Bound, ForwardCtx};
use crate::tensor::{Mask, Padding, Scalar, Tensor};

/// Encoder states of one path plus their transpose, reused by every
/// decoder layer that attends to them.
#[derive(Clone, Debug)]
pub(crate) struct PathStates<T: Scalar> {
    pub states: Tensor<T>,
    pub states_t: Tensor<T>,
}

impl<T: Scalar> PathStates<T> {
    fn new(states: Tensor<T>) -> Result<Self> {
        let states_t = states.transpose_last2()?;
        Ok(PathStates { states, states_t })
    }

    fn select(&self, rows: &[usize]) -> Result<Self> {
        Ok(PathStates {
            states: self.states.index_select0(rows)?,
            states_t: self.states_t.index_select0(rows)?,
        })
    }
}

/// Top-layer states of each enabled encoder path, `[batch, m, d]`.
#[derive(Clone, Debug)]
pub struct EncoderOutput<T: Scalar> {
    pub(crate) cnn: Option<PathStates<T>>,
    pub(crate) san: Option<PathStates<T>>,
    pub lengths: Vec<usize>,
    pub src_len: usize,
}

impl<T: Scalar> EncoderOutput<T> {
    pub fn cnn_states(&self) -> Result<&Tensor<T>> {
        self.cnn
            .as_ref()
            .map(|p| &p.states)
            .ok_or_else(|| Error::Contract("CNN encoder path is disabled".into()))
    }

    pub fn san_states(&self) -> Result<&Tensor<T>> {
        self.san
            .as_ref()
            .map(|p| &p.states)
            .ok_or_else(|| Error::Contract("SAN encoder path is disabled".into()))
    }

    pub fn batch(&self) -> usize {
        self.lengths.len()
    }

    /// Source attention mask for `queries` decoder positions.
    pub fn mask(&self, queries: usize) -> Mask {
        Mask::key_padding(&self.lengths, queries, self.src_len)
    }

    /// Rows of the batch in the given order, e.g. to fan a sentence out
    /// into beam hypotheses.
    pub fn select(&self, rows: &[usize]) -> Result<Self> {
        Ok(EncoderOutput {
            cnn: self.cnn.as_ref().map(|p| p.select(rows)).transpose()?,
            san: self.san.as_ref().map(|p| p.select(rows)).transpose()?,
            lengths: rows
                .iter()
                .map(|&r| self.lengths.get(r).copied().ok_or(Error::dim("encoder select", &[self.lengths.len()], &[r])))
                .collect::<Result<_>>()?,
            src_len: self.src_len,
        })
    }
}

/// Decoder-to-encoder attention flow, named decoder path first:
/// `Ca` is the CNN decoder attending to the SAN encoder.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Flow {
    Cc,
    Ca,
    Ac,
    Aa,
}

impl Flow {
    pub const ALL: [Flow; 4] = [Flow::Cc, Flow::Ca, Flow::Ac, Flow::Aa];

    pub fn name(self) -> &'static str {
        match self {
            Flow::Cc => "cc",
            Flow::Ca => "ca",
            Flow::Ac => "ac",
            Flow::Aa => "aa",
        }
    }

    pub fn parse(s: &str) -> Option<Flow> {
        Flow::ALL.into_iter().find(|f| f.name() == s)
    }

    pub fn decoder_is_cnn(self) -> bool {
        matches!(self, Flow::Cc | Flow::Ca)
    }

    pub fn encoder_is_cnn(self) -> bool {
        matches!(self, Flow::Cc | Flow::Ac)
    }
}

impl fmt::Display for Flow {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Values recorded during a forward pass for inspection.
#[derive(Clone, Debug, Default)]
pub struct Trace<T: Scalar> {
    /// Gate activations `[batch, time, 1]` keyed by parameter prefix.
    pub gates: Vec<(String, Tensor<T>)>,
    /// Attention weights `[batch, n, m]` per flow and decoder layer.
    pub attention: Vec<(Flow, usize, Tensor<T>)>,
}

impl<T: Scalar> Trace<T> {
    pub fn new() -> Self {
        Trace {
            gates: Vec::new(),
            attention: Vec::new(),
        }
    }

    /// Attention weights of `flow` at the top decoder layer of its path.
    pub fn top_attention(&self, flow: Flow) -> Option<&Tensor<T>> {
        self.attention
            .iter()
            .filter(|(f, _, _)| *f == flow)
            .max_by_key(|(_, l, _)| *l)
            .map(|(_, _, t)| t)
    }
}

pub struct DecoderOutput<T: Scalar> {
    /// Top CNN decoder state `z^c`, `[batch, n, d]`.
    pub z_cnn: Option<Tensor<T>>,
    /// Top SAN decoder state `z^a`.
    pub z_san: Option<Tensor<T>>,
    /// `[batch, n, tgt_vocab]`.
    pub log_probs: Tensor<T>,
}

/// Unscaled dot-product attention with keys equal to values.
/// Returns the context and the attention weights.
pub fn dot_attention<T: Scalar>(q: &Tensor<T>, kv: &Tensor<T>, mask: &Mask) -> Result<(Tensor<T>, Tensor<T>)> {
    dot_attention_t(q, kv, &kv.transpose_last2()?, mask)
}

fn dot_attention_t<T: Scalar>(
    q: &Tensor<T>,
    kv: &Tensor<T>,
    kv_t: &Tensor<T>,
    mask: &Mask,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let probs = q.matmul(kv_t)?.softmax_last_dim(Some(mask))?;
    Ok((probs.matmul(kv)?, probs))
}

/// `a * (1 - g) + b * g` with the scalar gate
/// `g = sigmoid([a, b] weight + bias)` per position. Returns `(blend, g)`.
pub fn gate_fuse<T: Scalar>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    if a.shape() != b.shape() {
        return Err(Error::dim("gate inputs", a.shape(), b.shape()));
    }
    let g = a.concat_last_dim(b)?.matmul(weight)?.add(bias)?.sigmoid()?;
    let keep = g.scale(-T::one())?.add_scalar(T::one())?;
    Ok((a.mul(&keep)?.add(&b.mul(&g)?)?, g))
}

impl<T: Scalar> Dpn<T> {
    /// Runs both encoder paths over `src` (row-major `[batch, m]`).
    pub fn encode(
        &self,
        p: &Bound<T>,
        src: &[usize],
        lengths: &[usize],
        ctx: &mut ForwardCtx,
    ) -> Result<EncoderOutput<T>> {
        let batch = lengths.len();
        if batch == 0 || !src.len().is_multiple_of(batch) {
            return Err(Error::dim("encoder input", &[src.len()], &[batch]));
        }
        let m = src.len() / batch;
        if let Some(&bad) = lengths.iter().find(|&&l| l > m) {
            return Err(Error::dim("source lengths", &[bad], &[m]));
        }
        let c = &self.config;
        let arch = &self.arch;
        let emb = arch.src_embed.forward(p, src, batch, 0)?;
        let emb = dropout(&emb, c.dropout, ctx)?;

        let cnn = if c.enc_cnn {
            // Zeroing padded rows keeps valid outputs independent of how
            // much padding the batch carries.
            let keep: Vec<T> = lengths
                .iter()
                .flat_map(|&l| (0..m).map(move |t| if t < l { T::one() } else { T::zero() }))
                .collect();
            let keep = Tensor::from_vec(vec![batch, m, 1], keep)?;
            let mut h = emb.mul(&keep)?;
            for layer in &arch.enc_cnn {
                h = layer.forward(p, &h, Padding::Same, c.dropout, ctx)?.mul(&keep)?;
            }
            Some(PathStates::new(h)?)
        } else {
            None
        };

        let san = if c.enc_san {
            // An empty sentence may attend everywhere here so that its
            // states exist; cross attention still rejects it.
            let self_lengths: Vec<usize> = lengths.iter().map(|&l| if l == 0 { m } else { l }).collect();
            let mask = Mask::key_padding(&self_lengths, m, m);
            let mut a = emb.clone();
            for layer in &arch.enc_san {
                let att = layer.self_attn.forward(p, &a, &a, Some(&mask))?;
                a = layer.ln1.forward(p, &a.add(&dropout(&att, c.dropout, ctx)?)?)?;
                let ff = layer.ffn.forward(p, &a)?;
                a = layer.ln2.forward(p, &a.add(&dropout(&ff, c.dropout, ctx)?)?)?;
            }
            Some(PathStates::new(a)?)
        } else {
            None
        };

        Ok(EncoderOutput {
            cnn,
            san,
            lengths: lengths.to_vec(),
            src_len: m,
        })
    }

    /// Fused encoder context for decoder queries `q` of one path.
    ///
    /// With both encoder paths the same-path context is blended with the
    /// cross-path one by `gate`; otherwise the only available context is
    /// returned as is.
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn cross_context(
        &self,
        p: &Bound<T>,
        q: &Tensor<T>,
        enc: &EncoderOutput<T>,
        mask: &Mask,
        decoder_cnn: bool,
        gate: Option<&Gate>,
        layer: usize,
        site: &str,
        trace: &mut Option<&mut Trace<T>>,
    ) -> Result<Tensor<T>> {
        let (own, other, own_flow, other_flow) = if decoder_cnn {
            (&enc.cnn, &enc.san, Flow::Cc, Flow::Ca)
        } else {
            (&enc.san, &enc.cnn, Flow::Aa, Flow::Ac)
        };
        let mut attend = |states: &Option<PathStates<T>>, flow: Flow| -> Result<Option<Tensor<T>>> {
            let Some(s) = states else { return Ok(None) };
            let (ctx, probs) = dot_attention_t(q, &s.states, &s.states_t, mask)?;
            if let Some(t) = trace.as_deref_mut() {
                t.attention.push((flow, layer, probs.detach()));
            }
            Ok(Some(ctx))
        };
        let own_ctx = attend(own, own_flow)?;
        let other_ctx = attend(other, other_flow)?;
        match (own_ctx, other_ctx, gate) {
            (Some(a), Some(b), Some(gate)) => {
                let (fused, g) = gate_fuse(&a, &b, p.get(gate.weight), p.get(gate.bias))?;
                if let Some(t) = trace.as_deref_mut() {
                    t.gates.push((site.to_string(), g.detach()));
                }
                Ok(fused)
            }
            (Some(a), None, _) | (None, Some(a), _) => Ok(a),
            _ => Err(Error::Contract("encoder paths and gates disagree".into())),
        }
    }

    /// Teacher-forced decoder over `tgt_in` (row-major `[batch, n]`).
    pub fn decode(
        &self,
        p: &Bound<T>,
        enc: &EncoderOutput<T>,
        tgt_in: &[usize],
        ctx: &mut ForwardCtx,
        mut trace: Option<&mut Trace<T>>,
    ) -> Result<DecoderOutput<T>> {
        let batch = enc.batch();
        if !tgt_in.len().is_multiple_of(batch) {
            return Err(Error::dim("decoder input", &[tgt_in.len()], &[batch]));
        }
        let n = tgt_in.len() / batch;
        let c = &self.config;
        let arch = &self.arch;
        let emb = arch.tgt_embed.forward(p, tgt_in, batch, 0)?;
        let emb = dropout(&emb, c.dropout, ctx)?;
        let src_mask = enc.mask(n);

        let z_cnn = if c.dec_cnn {
            let mut h = emb.clone();
            for (l, layer) in arch.dec_cnn.iter().enumerate() {
                let h1 = layer.conv.forward(p, &h, Padding::Causal, c.dropout, ctx)?;
                let site = format!("decoder.cnn.{l}.gate");
                let cross = self.cross_context(p, &h1, enc, &src_mask, true, layer.gate.as_ref(), l, &site, &mut trace)?;
                h = h1.add(&cross)?;
            }
            Some(h)
        } else {
            None
        };

        let z_san = if c.dec_san {
            let causal = Mask::causal(batch, n);
            let mut a = emb;
            for (l, layer) in arch.dec_san.iter().enumerate() {
                let att = layer.self_attn.forward(p, &a, &a, Some(&causal))?;
                a = layer.ln1.forward(p, &a.add(&dropout(&att, c.dropout, ctx)?)?)?;
                let site = format!("decoder.san.{l}.cross_gate");
                let cross = self.cross_context(p, &a, enc, &src_mask, false, layer.cross_gate.as_ref(), l, &site, &mut trace)?;
                a = layer.ln2.forward(p, &a.add(&dropout(&cross, c.dropout, ctx)?)?)?;
                let ff = layer.ffn.forward(p, &a)?;
                a = layer.ln3.forward(p, &a.add(&dropout(&ff, c.dropout, ctx)?)?)?;
            }
            Some(a)
        } else {
            None
        };

        let log_probs = self.output(p, z_cnn.as_ref(), z_san.as_ref(), &mut trace)?;
        Ok(DecoderOutput {
            z_cnn,
            z_san,
            log_probs,
        })
    }

    /// Output fusion of the two decoder paths and the vocabulary projection.
    pub(crate) fn output(
        &self,
        p: &Bound<T>,
        z_cnn: Option<&Tensor<T>>,
        z_san: Option<&Tensor<T>>,
        trace: &mut Option<&mut Trace<T>>,
    ) -> Result<Tensor<T>> {
        let z = match (z_cnn, z_san, &self.arch.out_gate) {
            (Some(zc), Some(za), Some(gate)) => {
                let (z, g) = gate_fuse(zc, za, p.get(gate.weight), p.get(gate.bias))?;
                if let Some(t) = trace.as_deref_mut() {
                    t.gates.push(("output.gate".into(), g.detach()));
                }
                z
            }
            (Some(z), None, _) | (None, Some(z), _) => z.clone(),
            _ => return Err(Error::Contract("no decoder path output to project".into())),
        };
        z.matmul(p.get(self.arch.proj_weight))?
            .add(p.get(self.arch.proj_bias))?
            .log_softmax_last_dim()
    }

    /// Log-probabilities `[batch, n, tgt_vocab]` for a teacher-forced batch.
    pub fn forward(
        &self,
        p: &Bound<T>,
        src: &[usize],
        src_lengths: &[usize],
        tgt_in: &[usize],
        ctx: &mut ForwardCtx,
    ) -> Result<Tensor<T>> {
        let enc = self.encode(p, src, src_lengths, ctx)?;
        Ok(self.decode(p, &enc, tgt_in, ctx, None)?.log_probs)
    }
}
