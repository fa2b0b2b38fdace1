use std::fmt;
use std::ops::RangeInclusive;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Pair, NUM_SPECIALS};
use crate::error::{Error, Result};

/// Sequence transduction tasks over `k` abstract symbols.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Copy,
    Reverse,
    Sort,
}

impl Task {
    pub fn apply(self, src: &[usize]) -> Vec<usize> {
        let mut out = src.to_vec();
        match self {
            Task::Copy => {}
            Task::Reverse => out.reverse(),
            Task::Sort => out.sort_unstable(),
        }
        out
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Task::Copy => "copy",
            Task::Reverse => "reverse",
            Task::Sort => "sort",
        })
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "copy" => Ok(Task::Copy),
            "reverse" => Ok(Task::Reverse),
            "sort" => Ok(Task::Sort),
            _ => Err(Error::Config(format!("unknown task `{s}` (copy|reverse|sort)"))),
        }
    }
}

/// `n_pairs` random sources of symbols `0..k` with lengths drawn uniformly
/// from `lengths`, each paired with its transformed target.
pub fn gen_synthetic(
    task: Task,
    n_pairs: usize,
    k: usize,
    lengths: RangeInclusive<usize>,
    seed: u64,
) -> Result<Vec<(Vec<usize>, Vec<usize>)>> {
    if k < 2 {
        return Err(Error::Config(format!("synthetic tasks need at least 2 symbols, got {k}")));
    }
    if lengths.is_empty() {
        return Err(Error::Config(format!("empty length range {lengths:?}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n_pairs)
        .map(|_| {
            let len = rng.random_range(lengths.clone());
            let src: Vec<usize> = (0..len).map(|_| rng.random_range(0..k)).collect();
            let tgt = task.apply(&src);
            (src, tgt)
        })
        .collect())
}

/// [`gen_synthetic`] mapped to the ids of [`Vocabulary::symbols`](super::Vocabulary::symbols).
pub fn synthetic_pairs(
    task: Task,
    n_pairs: usize,
    k: usize,
    lengths: RangeInclusive<usize>,
    seed: u64,
) -> Result<Vec<Pair>> {
    let shift = |v: Vec<usize>| v.into_iter().map(|s| s + NUM_SPECIALS).collect();
    Ok(gen_synthetic(task, n_pairs, k, lengths, seed)?
        .into_iter()
        .map(|(s, t)| Pair::new(shift(s), shift(t)))
        .collect())
}
