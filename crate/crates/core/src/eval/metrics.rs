use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn paired<'a, S: AsRef<str>>(hyps: &'a [S], refs: &'a [S]) -> Result<Vec<(Vec<&'a str>, Vec<&'a str>)>> {
    if hyps.len() != refs.len() {
        return Err(Error::Data(format!("{} hypotheses but {} references", hyps.len(), refs.len())));
    }
    if hyps.is_empty() {
        return Err(Error::Data("no hypotheses to score".into()));
    }
    Ok(hyps
        .iter()
        .zip(refs)
        .map(|(h, r)| (h.as_ref().split_whitespace().collect(), r.as_ref().split_whitespace().collect()))
        .collect())
}

fn ngrams<'a, 'b>(toks: &'b [&'a str], n: usize) -> HashMap<&'b [&'a str], usize> {
    let mut out = HashMap::new();
    if toks.len() >= n {
        for w in toks.windows(n) {
            *out.entry(w).or_insert(0) += 1;
        }
    }
    out
}

fn overlap(h: &[&str], r: &[&str], n: usize) -> usize {
    let rc = ngrams(r, n);
    ngrams(h, n).iter().map(|(g, &c)| c.min(rc.get(g).copied().unwrap_or(0))).sum()
}

/// Corpus BLEU with its components.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Bleu {
    /// In `[0, 100]`.
    pub score: f64,
    pub precisions: Vec<f64>,
    pub brevity_penalty: f64,
    pub hyp_len: usize,
    pub ref_len: usize,
}

impl fmt::Display for Bleu {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let p: Vec<String> = self.precisions.iter().map(|p| format!("{:.1}", p * 100.0)).collect();
        write!(
            f,
            "BLEU = {:.2}, {} (BP={:.3}, ratio={:.3}, hyp_len={}, ref_len={})",
            self.score,
            p.join("/"),
            self.brevity_penalty,
            self.hyp_len as f64 / self.ref_len.max(1) as f64,
            self.hyp_len,
            self.ref_len
        )
    }
}

/// Corpus-level BLEU on whitespace-tokenized, case-sensitive text with one
/// reference per hypothesis.
pub fn bleu<S: AsRef<str>>(hyps: &[S], refs: &[S], max_n: usize) -> Result<Bleu> {
    let pairs = paired(hyps, refs)?;
    if max_n == 0 {
        return Err(Error::Config("BLEU needs max_n >= 1".into()));
    }
    let mut matches = vec![0usize; max_n];
    let mut totals = vec![0usize; max_n];
    let (mut c, mut r) = (0, 0);
    for (h, rf) in &pairs {
        c += h.len();
        r += rf.len();
        for n in 1..=max_n {
            matches[n - 1] += overlap(h, rf, n);
            totals[n - 1] += h.len().saturating_sub(n - 1);
        }
    }
    let precisions: Vec<f64> = matches
        .iter()
        .zip(&totals)
        .map(|(&m, &t)| if t == 0 { 0.0 } else { m as f64 / t as f64 })
        .collect();
    let brevity_penalty = if c == 0 {
        0.0
    } else if c < r {
        (1.0 - r as f64 / c as f64).exp()
    } else {
        1.0
    };
    let score = if precisions.contains(&0.0) {
        0.0
    } else {
        let log_mean = precisions.iter().map(|p| p.ln()).sum::<f64>() / max_n as f64;
        100.0 * brevity_penalty * log_mean.exp()
    };
    Ok(Bleu {
        score,
        precisions,
        brevity_penalty,
        hyp_len: c,
        ref_len: r,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum RougeVariant {
    #[serde(rename = "1")]
    One,
    #[serde(rename = "2")]
    Two,
    #[serde(rename = "L")]
    L,
}

impl RougeVariant {
    pub const ALL: [RougeVariant; 3] = [RougeVariant::One, RougeVariant::Two, RougeVariant::L];
}

impl fmt::Display for RougeVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RougeVariant::One => "ROUGE-1",
            RougeVariant::Two => "ROUGE-2",
            RougeVariant::L => "ROUGE-L",
        })
    }
}

impl FromStr for RougeVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim_start_matches("rouge-").trim_start_matches("ROUGE-") {
            "1" => Ok(RougeVariant::One),
            "2" => Ok(RougeVariant::Two),
            "L" | "l" => Ok(RougeVariant::L),
            _ => Err(Error::Config(format!("unknown ROUGE variant `{s}` (1|2|L)"))),
        }
    }
}

pub fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0; b.len() + 1];
    let mut cur = vec![0; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

fn f1(hits: usize, hyp: usize, rf: usize) -> f64 {
    if hits == 0 || hyp == 0 || rf == 0 {
        return 0.0;
    }
    let p = hits as f64 / hyp as f64;
    let r = hits as f64 / rf as f64;
    2.0 * p * r / (p + r)
}

/// Sentence-level ROUGE F1 of one pair.
pub fn rouge_pair(hyp: &[&str], rf: &[&str], variant: RougeVariant) -> f64 {
    match variant {
        RougeVariant::One | RougeVariant::Two => {
            let n = if variant == RougeVariant::One { 1 } else { 2 };
            let count = |t: &[&str]| t.len().saturating_sub(n - 1);
            if count(hyp) == 0 && count(rf) == 0 {
                // Too short to hold any n-gram: score exact equality.
                return if hyp == rf { 1.0 } else { 0.0 };
            }
            f1(overlap(hyp, rf, n), count(hyp), count(rf))
        }
        RougeVariant::L if hyp.is_empty() && rf.is_empty() => 1.0,
        RougeVariant::L => f1(lcs_len(hyp, rf), hyp.len(), rf.len()),
    }
}

/// ROUGE F1 averaged over sentences.
pub fn rouge<S: AsRef<str>>(hyps: &[S], refs: &[S], variant: RougeVariant) -> Result<f64> {
    let pairs = paired(hyps, refs)?;
    Ok(pairs.iter().map(|(h, r)| rouge_pair(h, r, variant)).sum::<f64>() / pairs.len() as f64)
}
