//! Vocabularies, corpora, batching inputs and synthetic tasks.

mod synthetic;

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use synthetic::{gen_synthetic, synthetic_pairs, Task};

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
pub const NUM_SPECIALS: usize = 4;
pub const SPECIALS: [&str; NUM_SPECIALS] = ["<pad>", "<s>", "</s>", "<unk>"];

/// How a line of text is split into tokens.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TokenMode {
    /// Whitespace-separated tokens.
    #[default]
    Word,
    /// Every character (spaces included) is a token.
    Char,
}

impl FromStr for TokenMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "word" => Ok(TokenMode::Word),
            "char" => Ok(TokenMode::Char),
            _ => Err(Error::Config(format!("unknown token mode `{s}` (word|char)"))),
        }
    }
}

pub fn tokenize(line: &str, mode: TokenMode) -> Vec<String> {
    match mode {
        TokenMode::Word => line.split_whitespace().map(str::to_string).collect(),
        TokenMode::Char => line.chars().map(String::from).collect(),
    }
}

pub fn detokenize<S: AsRef<str>>(tokens: &[S], mode: TokenMode) -> String {
    let parts = tokens.iter().map(AsRef::as_ref);
    match mode {
        TokenMode::Word => parts.collect::<Vec<_>>().join(" "),
        TokenMode::Char => parts.collect(),
    }
}

/// Token/id map with the four specials at ids 0..4.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "VocabRepr", into = "VocabRepr")]
pub struct Vocabulary {
    mode: TokenMode,
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

#[derive(Serialize, Deserialize)]
struct VocabRepr {
    mode: TokenMode,
    tokens: Vec<String>,
}

impl From<VocabRepr> for Vocabulary {
    fn from(r: VocabRepr) -> Self {
        Vocabulary::from_tokens(r.mode, r.tokens)
    }
}

impl From<Vocabulary> for VocabRepr {
    fn from(v: Vocabulary) -> Self {
        VocabRepr {
            mode: v.mode,
            tokens: v.tokens,
        }
    }
}

impl Vocabulary {
    /// `tokens` lists the full id order, specials first.
    fn from_tokens(mode: TokenMode, tokens: Vec<String>) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Vocabulary { mode, tokens, index }
    }

    /// Frequency-sorted vocabulary (ties lexicographic) of at most
    /// `max_size` entries, specials included.
    pub fn build<S: AsRef<str>>(lines: &[S], mode: TokenMode, max_size: usize) -> Result<Self> {
        if max_size < NUM_SPECIALS {
            return Err(Error::Config(format!(
                "vocabulary size {max_size} leaves no room for the {NUM_SPECIALS} special tokens"
            )));
        }
        let mut counts: HashMap<String, usize> = HashMap::new();
        for line in lines {
            for tok in tokenize(line.as_ref(), mode) {
                *counts.entry(tok).or_default() += 1;
            }
        }
        for s in SPECIALS {
            counts.remove(s);
        }
        if counts.is_empty() {
            return Err(Error::Data("cannot build a vocabulary from an empty corpus".into()));
        }
        let mut ranked: Vec<(String, usize)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let tokens = SPECIALS
            .iter()
            .map(|s| s.to_string())
            .chain(ranked.into_iter().map(|(t, _)| t))
            .take(max_size)
            .collect();
        Ok(Self::from_tokens(mode, tokens))
    }

    /// Vocabulary whose symbol `i` is the token `"{i}"` with id `4 + i`.
    pub fn symbols(k: usize) -> Self {
        let tokens = SPECIALS
            .iter()
            .map(|s| s.to_string())
            .chain((0..k).map(|i| i.to_string()))
            .collect();
        Self::from_tokens(TokenMode::Word, tokens)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn mode(&self) -> TokenMode {
        self.mode
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> Result<&str> {
        self.tokens
            .get(id)
            .map(String::as_str)
            .ok_or(Error::Vocabulary { id, size: self.tokens.len() })
    }

    pub fn encode(&self, line: &str) -> Vec<usize> {
        tokenize(line, self.mode).iter().map(|t| self.id(t)).collect()
    }

    /// Text of `ids` up to the first eos, skipping pad and bos.
    pub fn decode(&self, ids: &[usize]) -> Result<String> {
        let mut toks = Vec::new();
        for &id in ids {
            match id {
                EOS => break,
                PAD | BOS => continue,
                _ => toks.push(self.token(id)?),
            }
        }
        Ok(detokenize(&toks, self.mode))
    }
}

/// One training example in token ids; `tgt` ends with eos.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Pair {
    pub src: Vec<usize>,
    pub tgt: Vec<usize>,
}

impl Pair {
    /// Appends eos to `tgt`.
    pub fn new(src: Vec<usize>, mut tgt: Vec<usize>) -> Self {
        tgt.push(EOS);
        Pair { src, tgt }
    }

    /// Source plus target tokens (eos included).
    pub fn tokens(&self) -> usize {
        self.src.len() + self.tgt.len()
    }
}

/// Padded, row-major batch ready for teacher forcing.
///
/// `tgt_in` is `bos + y` and `tgt_out` is `y + eos`; positions past a
/// row's length hold pad.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub size: usize,
    pub src: Vec<usize>,
    pub src_lengths: Vec<usize>,
    pub src_len: usize,
    pub tgt_in: Vec<usize>,
    pub tgt_out: Vec<usize>,
    pub tgt_lengths: Vec<usize>,
    pub tgt_len: usize,
}

impl Batch {
    pub fn from_pairs(pairs: &[&Pair]) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let size = pairs.len();
        let src_len = pairs.iter().map(|p| p.src.len()).max().unwrap_or(0).max(1);
        let tgt_len = pairs.iter().map(|p| p.tgt.len()).max().unwrap_or(0);
        let mut src = vec![PAD; size * src_len];
        let mut tgt_in = vec![PAD; size * tgt_len];
        let mut tgt_out = vec![PAD; size * tgt_len];
        for (b, p) in pairs.iter().enumerate() {
            src[b * src_len..][..p.src.len()].copy_from_slice(&p.src);
            for (t, &y) in p.tgt.iter().enumerate() {
                tgt_out[b * tgt_len + t] = y;
                tgt_in[b * tgt_len + t] = if t == 0 { BOS } else { p.tgt[t - 1] };
            }
        }
        Ok(Batch {
            size,
            src,
            src_lengths: pairs.iter().map(|p| p.src.len()).collect(),
            src_len,
            tgt_in,
            tgt_out,
            tgt_lengths: pairs.iter().map(|p| p.tgt.len()).collect(),
            tgt_len,
        })
    }

    /// Non-pad target tokens.
    pub fn target_tokens(&self) -> usize {
        self.tgt_lengths.iter().sum()
    }

    /// Slots including padding: `size * (src_len + tgt_len)`.
    pub fn padded_tokens(&self) -> usize {
        self.size * (self.src_len + self.tgt_len)
    }
}

/// Outcome counts of [`load_parallel`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct LoadReport {
    pub kept: usize,
    pub dropped_too_long: usize,
}

impl fmt::Display for LoadReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} pairs kept, {} dropped as too long", self.kept, self.dropped_too_long)
    }
}

pub fn read_lines(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text.lines().map(str::to_string).collect())
}

/// Encodes line-aligned source/target texts. Pairs with more than
/// `max_len` tokens on either side are dropped and counted.
pub fn encode_parallel<S: AsRef<str>>(
    src_lines: &[S],
    tgt_lines: &[S],
    src_vocab: &Vocabulary,
    tgt_vocab: &Vocabulary,
    max_len: usize,
) -> Result<(Vec<Pair>, LoadReport)> {
    if src_lines.len() != tgt_lines.len() {
        let shorter = src_lines.len().min(tgt_lines.len());
        return Err(Error::Corpus(format!(
            "source has {} lines but target has {}; line {} has no counterpart",
            src_lines.len(),
            tgt_lines.len(),
            shorter + 1
        )));
    }
    let mut pairs = Vec::new();
    let mut report = LoadReport::default();
    for (s, t) in src_lines.iter().zip(tgt_lines) {
        let src = src_vocab.encode(s.as_ref());
        let tgt = tgt_vocab.encode(t.as_ref());
        if src.len() > max_len || tgt.len() > max_len {
            report.dropped_too_long += 1;
            continue;
        }
        pairs.push(Pair::new(src, tgt));
    }
    report.kept = pairs.len();
    Ok((pairs, report))
}

pub fn load_parallel(
    src_path: &Path,
    tgt_path: &Path,
    src_vocab: &Vocabulary,
    tgt_vocab: &Vocabulary,
    max_len: usize,
) -> Result<(Vec<Pair>, LoadReport)> {
    let src = read_lines(src_path)?;
    let tgt = read_lines(tgt_path)?;
    encode_parallel(&src, &tgt, src_vocab, tgt_vocab, max_len)
}
