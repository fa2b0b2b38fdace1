use super::ModelConfig;

/// Exact number of scalar parameters of the network built from `c`.
///
/// Counted pieces: word and learned position tables (the word table once
/// when shared), conv filters `r*d x 2d` with biases, bias-free `d x d`
/// attention projections (four per attention block), feed-forward blocks
/// with biases, layer norms (gain and bias), `2d + 1` per fusion gate and
/// the untied output projection with bias.
pub fn count_parameters(c: &ModelConfig) -> usize {
    let d = c.d;
    let conv = c.kernel * d * 2 * d + 2 * d;
    let attn = 4 * d * d;
    let ffn = d * c.d_ff + c.d_ff + c.d_ff * d + d;
    let norm = 2 * d;
    let gate = 2 * d + 1;
    let both_enc = c.enc_cnn && c.enc_san;

    let mut total = c.src_vocab * d + c.max_len * d;
    if !c.share_embeddings {
        total += c.tgt_vocab * d;
    }
    total += c.max_len * d;
    if c.enc_cnn {
        total += c.cnn_enc_layers * conv;
    }
    if c.enc_san {
        total += c.san_enc_layers * (attn + ffn + 2 * norm);
    }
    let cross_gate = if both_enc { gate } else { 0 };
    if c.dec_cnn {
        total += c.cnn_dec_layers * (conv + cross_gate);
    }
    if c.dec_san {
        total += c.san_dec_layers * (attn + ffn + 3 * norm + cross_gate);
    }
    if c.dec_cnn && c.dec_san {
        total += gate;
    }
    total + d * c.tgt_vocab + c.tgt_vocab
}
