//! Greedy and beam-search decoding.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::data::{BOS, EOS, PAD};
use crate::error::{Error, Result};
use crate::model::{Dpn, IncrementalState};
use crate::nn::ForwardCtx;
use crate::tensor::Scalar;

/// Something that scores next tokens one step at a time.
///
/// `start` prepares a single-row state for one source sentence; `reorder`
/// selects (and may repeat) rows, so a state can carry any number of
/// hypotheses.
pub trait DecodeModel {
    type State;

    fn vocab_size(&self) -> usize;

    /// Longest output the model can produce.
    fn max_len(&self) -> usize;

    fn start(&self, src: &[usize]) -> Result<Self::State>;

    /// Next-token log-probabilities for every row after feeding `tokens`.
    fn step(&self, state: &mut Self::State, tokens: &[usize]) -> Result<Vec<Vec<f64>>>;

    fn reorder(&self, state: &mut Self::State, rows: &[usize]) -> Result<()>;
}

impl<T: Scalar> DecodeModel for Dpn<T> {
    type State = IncrementalState<T>;

    fn vocab_size(&self) -> usize {
        self.config().tgt_vocab
    }

    fn max_len(&self) -> usize {
        self.config().max_len
    }

    fn start(&self, src: &[usize]) -> Result<Self::State> {
        let p = self.params.bind(None);
        let enc = self.encode(&p, src, &[src.len()], &mut ForwardCtx::eval())?;
        Ok(self.start_decoding(enc))
    }

    fn step(&self, state: &mut Self::State, tokens: &[usize]) -> Result<Vec<Vec<f64>>> {
        let p = self.params.bind(None);
        let lp = self.decode_step(&p, state, tokens)?;
        let v = lp.last_dim();
        Ok(lp.data().chunks(v).map(|r| r.iter().map(|x| x.as_f64()).collect()).collect())
    }

    fn reorder(&self, state: &mut Self::State, rows: &[usize]) -> Result<()> {
        state.reorder(rows)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BeamConfig {
    pub beam: usize,
    pub max_len: usize,
    /// eos is not allowed before this many tokens have been produced.
    pub min_len: usize,
    /// Final ranking uses `score / len^alpha`.
    pub alpha: f64,
}

impl Default for BeamConfig {
    fn default() -> Self {
        BeamConfig {
            beam: 5,
            max_len: 200,
            min_len: 0,
            alpha: 1.0,
        }
    }
}

/// A decoded sequence. `tokens` ends with eos iff `finished`.
#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    pub tokens: Vec<usize>,
    /// Sum of token log-probabilities.
    pub score: f64,
    pub finished: bool,
}

impl Hypothesis {
    pub fn normalized(&self, alpha: f64) -> f64 {
        if self.tokens.is_empty() {
            return self.score;
        }
        self.score / (self.tokens.len() as f64).powf(alpha)
    }

    /// Tokens without the trailing eos.
    pub fn output(&self) -> &[usize] {
        match self.tokens.split_last() {
            Some((&EOS, rest)) if self.finished => rest,
            _ => &self.tokens,
        }
    }
}

/// Better-first order: normalized score, then shorter (earlier finish),
/// then lexicographically smaller ids.
pub fn rank(a: &Hypothesis, b: &Hypothesis, alpha: f64) -> Ordering {
    b.normalized(alpha)
        .total_cmp(&a.normalized(alpha))
        .then(a.tokens.len().cmp(&b.tokens.len()))
        .then_with(|| a.tokens.cmp(&b.tokens))
}

fn allowed(token: usize, produced: usize, min_len: usize) -> bool {
    token != PAD && token != BOS && !(token == EOS && produced < min_len)
}

fn check(cfg: &BeamConfig, model_max: usize) -> Result<usize> {
    if cfg.beam == 0 {
        return Err(Error::Config("beam size must be at least 1".into()));
    }
    if cfg.max_len == 0 || cfg.min_len >= cfg.max_len {
        return Err(Error::Config(format!(
            "need 0 <= min_len < max_len, got min_len {} and max_len {}",
            cfg.min_len, cfg.max_len
        )));
    }
    Ok(cfg.max_len.min(model_max))
}

/// Argmax decoding; ties go to the smaller id.
pub fn greedy_decode<M: DecodeModel>(model: &M, src: &[usize], max_len: usize, min_len: usize) -> Result<Hypothesis> {
    let max_len = check(
        &BeamConfig {
            beam: 1,
            max_len,
            min_len,
            alpha: 1.0,
        },
        model.max_len(),
    )?;
    let mut state = model.start(src)?;
    let mut hyp = Hypothesis {
        tokens: Vec::new(),
        score: 0.0,
        finished: false,
    };
    let mut last = BOS;
    while hyp.tokens.len() < max_len {
        let lp = model.step(&mut state, &[last])?;
        let n = hyp.tokens.len();
        let best = lp[0]
            .iter()
            .enumerate()
            .filter(|&(w, x)| allowed(w, n, min_len) && *x > f64::NEG_INFINITY)
            .fold(None, |acc: Option<(usize, f64)>, (w, &x)| match acc {
                Some((_, bx)) if bx >= x => acc,
                _ => Some((w, x)),
            });
        let Some((w, x)) = best else { break };
        hyp.tokens.push(w);
        hyp.score += x;
        if w == EOS {
            hyp.finished = true;
            break;
        }
        last = w;
    }
    Ok(hyp)
}

/// Beam search for one source sentence.
///
/// Each step expands every live hypothesis by every allowed token and
/// ranks the candidates by cumulative log-probability. An eos candidate
/// ranked within the first `beam` retires to the finished set; the best
/// `beam` non-eos candidates stay live. Search ends once `beam`
/// hypotheses have finished or `max_len` tokens were produced, in which
/// case the live hypotheses are kept unterminated.
pub fn beam_search<M: DecodeModel>(model: &M, src: &[usize], cfg: &BeamConfig) -> Result<Hypothesis> {
    Ok(beam_search_all(model, src, cfg)?.swap_remove(0))
}

/// Every final hypothesis of [`beam_search`], best first.
pub fn beam_search_all<M: DecodeModel>(model: &M, src: &[usize], cfg: &BeamConfig) -> Result<Vec<Hypothesis>> {
    let max_len = check(cfg, model.max_len())?;
    let mut state = model.start(src)?;
    let mut live = vec![Hypothesis {
        tokens: Vec::new(),
        score: 0.0,
        finished: false,
    }];
    let mut last = vec![BOS];
    let mut finished: Vec<Hypothesis> = Vec::new();
    for t in 0..max_len {
        let lp = model.step(&mut state, &last)?;
        let mut cands: Vec<(usize, usize, f64)> = Vec::new();
        for (i, (h, row)) in live.iter().zip(&lp).enumerate() {
            for (w, &x) in row.iter().enumerate() {
                if allowed(w, t, cfg.min_len) && x > f64::NEG_INFINITY {
                    cands.push((i, w, h.score + x));
                }
            }
        }
        cands.sort_by(|a, b| {
            b.2.total_cmp(&a.2)
                .then_with(|| live[a.0].tokens.cmp(&live[b.0].tokens))
                .then(a.1.cmp(&b.1))
        });
        let mut rows = Vec::new();
        let mut next = Vec::new();
        for (r, &(i, w, score)) in cands.iter().enumerate() {
            let mut tokens = live[i].tokens.clone();
            tokens.push(w);
            if w == EOS {
                if r < cfg.beam {
                    finished.push(Hypothesis {
                        tokens,
                        score,
                        finished: true,
                    });
                }
            } else if next.len() < cfg.beam {
                rows.push(i);
                next.push(Hypothesis {
                    tokens,
                    score,
                    finished: false,
                });
            }
            if r + 1 >= cfg.beam && next.len() >= cfg.beam {
                break;
            }
        }
        live = next;
        if finished.len() >= cfg.beam || live.is_empty() {
            break;
        }
        model.reorder(&mut state, &rows)?;
        last = live.iter().map(|h| *h.tokens.last().expect("live hypotheses are non-empty")).collect();
    }
    if finished.len() < cfg.beam {
        finished.extend(live);
    }
    if finished.is_empty() {
        return Err(Error::Contract("model assigned zero probability to every allowed token".into()));
    }
    finished.sort_by(|a, b| rank(a, b, cfg.alpha));
    Ok(finished)
}

#[cfg(test)]
mod tests;
