use super::{Dpn, EncoderOutput};
use crate::error::{Error, Result};
use crate::nn::Bound;
use crate::tensor::{Scalar, Tensor};

/// Decoder caches for generating one position at a time.
///
/// The CNN path keeps the last `kernel - 1` inputs of every layer; the SAN
/// path keeps all projected self-attention keys and values.
#[derive(Clone, Debug)]
pub struct IncrementalState<T: Scalar> {
    pub(crate) enc: EncoderOutput<T>,
    pub(crate) position: usize,
    cnn_windows: Vec<Tensor<T>>,
    san_kv: Vec<Option<(Tensor<T>, Tensor<T>)>>,
}

impl<T: Scalar> IncrementalState<T> {
    /// Number of positions decoded so far.
    pub fn position(&self) -> usize {
        self.position
    }

    pub fn batch(&self) -> usize {
        self.enc.batch()
    }

    pub fn encoder(&self) -> &EncoderOutput<T> {
        &self.enc
    }

    /// Keeps batch rows in the order given (beam reordering).
    pub fn reorder(&mut self, rows: &[usize]) -> Result<()> {
        self.enc = self.enc.select(rows)?;
        for w in &mut self.cnn_windows {
            *w = w.index_select0(rows)?;
        }
        for (k, v) in self.san_kv.iter_mut().flatten() {
            *k = k.index_select0(rows)?;
            *v = v.index_select0(rows)?;
        }
        Ok(())
    }
}

impl<T: Scalar> Dpn<T> {
    pub fn start_decoding(&self, enc: EncoderOutput<T>) -> IncrementalState<T> {
        let c = &self.config;
        let b = enc.batch();
        let cnn_windows = self
            .arch
            .dec_cnn
            .iter()
            .map(|_| Tensor::zeros(vec![b, c.kernel - 1, c.d]))
            .collect();
        let san_kv = self.arch.dec_san.iter().map(|_| None).collect();
        IncrementalState {
            enc,
            position: 0,
            cnn_windows,
            san_kv,
        }
    }

    /// Feeds one token per batch row and returns next-token log-probabilities
    /// `[batch, tgt_vocab]`. Dropout is never applied.
    pub fn decode_step(&self, p: &Bound<T>, state: &mut IncrementalState<T>, tokens: &[usize]) -> Result<Tensor<T>> {
        let b = state.batch();
        if tokens.len() != b {
            return Err(Error::dim("decode step tokens", &[tokens.len()], &[b]));
        }
        let c = &self.config;
        let arch = &self.arch;
        let t = state.position;
        let emb = arch.tgt_embed.forward(p, tokens, b, t)?;
        let src_mask = state.enc.mask(1);
        let mut none = None;

        let z_cnn = if c.dec_cnn {
            let mut h = emb.clone();
            for (l, layer) in arch.dec_cnn.iter().enumerate() {
                let window = if c.kernel > 1 {
                    Tensor::concat(&[&state.cnn_windows[l], &h], 1)?
                } else {
                    h.clone()
                };
                let h1 = layer.conv.step(p, &window)?;
                if c.kernel > 1 {
                    state.cnn_windows[l] = window.narrow(1, 1, c.kernel - 1)?;
                }
                let cross = self.cross_context(p, &h1, &state.enc, &src_mask, true, layer.gate.as_ref(), l, "", &mut none)?;
                h = h1.add(&cross)?;
            }
            Some(h)
        } else {
            None
        };

        let z_san = if c.dec_san {
            let mut a = emb;
            for (l, layer) in arch.dec_san.iter().enumerate() {
                let (k, v) = layer.self_attn.project_kv(p, &a)?;
                let (k, v) = match state.san_kv[l].take() {
                    Some((pk, pv)) => (Tensor::concat(&[&pk, &k], 1)?, Tensor::concat(&[&pv, &v], 1)?),
                    None => (k, v),
                };
                let att = layer.self_attn.attend(p, &a, &k, &v, None)?;
                state.san_kv[l] = Some((k, v));
                a = layer.ln1.forward(p, &a.add(&att)?)?;
                let cross = self.cross_context(p, &a, &state.enc, &src_mask, false, layer.cross_gate.as_ref(), l, "", &mut none)?;
                a = layer.ln2.forward(p, &a.add(&cross)?)?;
                let ff = layer.ffn.forward(p, &a)?;
                a = layer.ln3.forward(p, &a.add(&ff)?)?;
            }
            Some(a)
        } else {
            None
        };

        state.position += 1;
        let out = self.output(p, z_cnn.as_ref(), z_san.as_ref(), &mut none)?;
        out.reshape(vec![b, c.tgt_vocab])
    }
}
