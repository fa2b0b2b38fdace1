use rand::Rng;

use super::{init, Bound, ForwardCtx, ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::{conv1d, Mask, Padding, Scalar, Tensor};

/// Inverted dropout: zeroes each element with probability `p` and scales
/// survivors by `1 / (1 - p)`. Identity outside training.
pub fn dropout<T: Scalar>(x: &Tensor<T>, p: f64, ctx: &mut ForwardCtx) -> Result<Tensor<T>> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::Config(format!("dropout probability {p} not in [0, 1)")));
    }
    if !ctx.is_training() || p == 0.0 {
        return Ok(x.clone());
    }
    let keep = T::cast(1.0 / (1.0 - p));
    let rng = ctx.rng();
    let mask: Vec<T> = (0..x.numel())
        .map(|_| if rng.random::<f64>() < p { T::zero() } else { keep })
        .collect();
    x.mul(&Tensor::from_vec(x.shape().to_vec(), mask)?)
}

/// Word lookup plus learned absolute positions.
#[derive(Clone, Debug)]
pub struct Embedding {
    pub word: ParamId,
    pub position: ParamId,
    pub vocab: usize,
    pub max_len: usize,
    pub dim: usize,
}

impl Embedding {
    /// Registers `{prefix}.word` (with row `pad` zeroed) and `{prefix}.position`.
    /// When `shared_word` is given that table is reused instead.
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        vocab: usize,
        max_len: usize,
        dim: usize,
        pad: Option<usize>,
        shared_word: Option<ParamId>,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let std = if dim == 0 { 0.0 } else { (dim as f64).powf(-0.5) };
        let word = match shared_word {
            Some(id) => {
                if store.get(id).shape() != [vocab, dim] {
                    return Err(Error::dim("shared embedding", store.get(id).shape(), &[vocab, dim]));
                }
                id
            }
            None => {
                let mut table = init::normal::<T>(vec![vocab, dim], std, rng).to_vec();
                if let Some(pad) = pad.filter(|&p| p < vocab) {
                    table[pad * dim..(pad + 1) * dim].fill(T::zero());
                }
                store.add(format!("{prefix}.word"), Tensor::from_vec(vec![vocab, dim], table)?)?
            }
        };
        let position = store.add(
            format!("{prefix}.position"),
            init::normal(vec![max_len, dim], std, rng),
        )?;
        Ok(Embedding {
            word,
            position,
            vocab,
            max_len,
            dim,
        })
    }

    /// `ids` is row-major `[batch, time]`; positions start at `offset`.
    pub fn forward<T: Scalar>(
        &self,
        p: &Bound<T>,
        ids: &[usize],
        batch: usize,
        offset: usize,
    ) -> Result<Tensor<T>> {
        if batch == 0 || !ids.len().is_multiple_of(batch) {
            return Err(Error::dim("embed", &[ids.len()], &[batch]));
        }
        let time = ids.len() / batch;
        if offset + time > self.max_len {
            return Err(Error::Length {
                len: offset + time,
                max: self.max_len,
            });
        }
        let words = p.get(self.word).gather_rows(ids, &[batch, time])?;
        let pos = p.get(self.position).narrow(0, offset, time)?;
        words.add(&pos)
    }
}

/// Residual convolution block with a gated linear unit:
/// `GLU(conv1d(dropout(h))) + h`.
#[derive(Clone, Debug)]
pub struct GluConv {
    pub filter: ParamId,
    pub bias: ParamId,
    pub kernel: usize,
    pub dim: usize,
}

impl GluConv {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        dim: usize,
        kernel: usize,
        dropout: f64,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if kernel == 0 {
            return Err(Error::Config("kernel width must be positive".into()));
        }
        let fan_in = (kernel * dim).max(1) as f64;
        let std = (4.0 * (1.0 - dropout) / fan_in).sqrt();
        let filter = store.add(
            format!("{prefix}.filter"),
            init::normal(vec![kernel * dim, 2 * dim], std, rng),
        )?;
        let bias = store.add(format!("{prefix}.bias"), Tensor::zeros(vec![2 * dim]))?;
        Ok(GluConv {
            filter,
            bias,
            kernel,
            dim,
        })
    }

    pub fn forward<T: Scalar>(
        &self,
        p: &Bound<T>,
        h: &Tensor<T>,
        padding: Padding,
        drop: f64,
        ctx: &mut ForwardCtx,
    ) -> Result<Tensor<T>> {
        self.check(h)?;
        let x = dropout(h, drop, ctx)?;
        self.glu(p, &x, padding)?.add(h)
    }

    /// One output position from the last `kernel` inputs `[batch, kernel, d]`
    /// (oldest first). Matches position `kernel - 1` of a causal forward.
    pub fn step<T: Scalar>(&self, p: &Bound<T>, window: &Tensor<T>) -> Result<Tensor<T>> {
        self.check(window)?;
        let residual = window.narrow(1, self.kernel - 1, 1)?;
        self.glu(p, window, Padding::Valid)?.add(&residual)
    }

    fn check<T: Scalar>(&self, h: &Tensor<T>) -> Result<()> {
        if h.rank() != 3 || h.last_dim() != self.dim {
            return Err(Error::dim("glu conv input", h.shape(), &[self.dim]));
        }
        Ok(())
    }

    fn glu<T: Scalar>(&self, p: &Bound<T>, x: &Tensor<T>, padding: Padding) -> Result<Tensor<T>> {
        let pre = conv1d(x, p.get(self.filter), p.get(self.bias), padding)?;
        let a = pre.narrow(2, 0, self.dim)?;
        let b = pre.narrow(2, self.dim, self.dim)?;
        a.mul(&b.sigmoid()?)
    }
}

/// Multi-head scaled dot-product attention without biases.
///
/// `W^q`, `W^k`, `W^v` are `d x d`; head `i` uses columns
/// `i*d_s .. (i+1)*d_s`. Heads are concatenated and mixed by `W^o`.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub heads: usize,
    pub dim: usize,
}

impl MultiHeadAttention {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        dim: usize,
        heads: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::Config(format!("{heads} heads do not divide width {dim}")));
        }
        let mut mat = |name: &str| store.add(format!("{prefix}.{name}"), init::xavier(dim, dim, rng));
        Ok(MultiHeadAttention {
            wq: mat("wq")?,
            wk: mat("wk")?,
            wv: mat("wv")?,
            wo: mat("wo")?,
            heads,
            dim,
        })
    }

    pub fn forward<T: Scalar>(
        &self,
        p: &Bound<T>,
        q: &Tensor<T>,
        kv: &Tensor<T>,
        mask: Option<&Mask>,
    ) -> Result<Tensor<T>> {
        let (k, v) = self.project_kv(p, kv)?;
        self.attend(p, q, &k, &v, mask)
    }

    /// Projected keys and values `[batch, time, d]`, cacheable across
    /// decoding steps.
    pub fn project_kv<T: Scalar>(&self, p: &Bound<T>, kv: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        if kv.last_dim() != self.dim {
            return Err(Error::dim("attention keys", kv.shape(), &[self.dim]));
        }
        Ok((kv.matmul(p.get(self.wk))?, kv.matmul(p.get(self.wv))?))
    }

    /// Attention of raw queries against already projected keys and values.
    pub fn attend<T: Scalar>(
        &self,
        p: &Bound<T>,
        q: &Tensor<T>,
        k: &Tensor<T>,
        v: &Tensor<T>,
        mask: Option<&Mask>,
    ) -> Result<Tensor<T>> {
        if q.last_dim() != self.dim {
            return Err(Error::dim("attention queries", q.shape(), &[self.dim]));
        }
        if k.shape() != v.shape() {
            return Err(Error::dim("attention keys/values", k.shape(), v.shape()));
        }
        let ds = self.dim / self.heads;
        let q = q
            .matmul(p.get(self.wq))?
            .scale(T::cast(1.0 / (ds as f64).sqrt()))?;
        let last = q.rank() - 1;
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (qh, kh, vh) = if self.heads == 1 {
                (q.clone(), k.clone(), v.clone())
            } else {
                (
                    q.narrow(last, h * ds, ds)?,
                    k.narrow(last, h * ds, ds)?,
                    v.narrow(last, h * ds, ds)?,
                )
            };
            let scores = qh.matmul(&kh.transpose_last2()?)?;
            outs.push(scores.softmax_last_dim(mask)?.matmul(&vh)?);
        }
        let joined = if outs.len() == 1 {
            outs.pop().expect("one head")
        } else {
            Tensor::concat(&outs.iter().collect::<Vec<_>>(), last)?
        };
        joined.matmul(p.get(self.wo))
    }
}

/// Position-wise `f2(relu(f1(x)))`.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
    pub dim: usize,
}

impl FeedForward {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        dim: usize,
        hidden: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(FeedForward {
            w1: store.add(format!("{prefix}.w1"), init::xavier(dim, hidden, rng))?,
            b1: store.add(format!("{prefix}.b1"), Tensor::zeros(vec![hidden]))?,
            w2: store.add(format!("{prefix}.w2"), init::xavier(hidden, dim, rng))?,
            b2: store.add(format!("{prefix}.b2"), Tensor::zeros(vec![dim]))?,
            dim,
        })
    }

    pub fn forward<T: Scalar>(&self, p: &Bound<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        if x.last_dim() != self.dim {
            return Err(Error::dim("feed forward", x.shape(), &[self.dim]));
        }
        let hidden = x.matmul(p.get(self.w1))?.add(p.get(self.b1))?.relu()?;
        hidden.matmul(p.get(self.w2))?.add(p.get(self.b2))
    }
}

/// Standardization over the last axis followed by a learned gain and bias.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
    pub eps: f64,
    pub dim: usize,
}

impl LayerNorm {
    pub const EPS: f64 = 1e-5;

    pub fn new<T: Scalar>(store: &mut ParamStore<T>, prefix: &str, dim: usize) -> Result<Self> {
        Ok(LayerNorm {
            gain: store.add(format!("{prefix}.gain"), Tensor::full(vec![dim], T::one()))?,
            bias: store.add(format!("{prefix}.bias"), Tensor::zeros(vec![dim]))?,
            eps: Self::EPS,
            dim,
        })
    }

    pub fn forward<T: Scalar>(&self, p: &Bound<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        if x.last_dim() != self.dim {
            return Err(Error::dim("layer norm", x.shape(), &[self.dim]));
        }
        x.standardize_last_dim(T::cast(self.eps))?
            .mul(p.get(self.gain))?
            .add(p.get(self.bias))
    }
}
