use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::Pair;

/// Padded size of a batch: rows times the longest source plus longest target.
pub fn padded_size(pairs: &[Pair], batch: &[usize]) -> usize {
    let s = batch.iter().map(|&i| pairs[i].src.len()).max().unwrap_or(0).max(1);
    let t = batch.iter().map(|&i| pairs[i].tgt.len()).max().unwrap_or(0);
    batch.len() * (s + t)
}

/// Groups pair indices into batches of at most `max_tokens` padded tokens.
///
/// Pairs are sorted by length (ties broken by a seeded shuffle) and packed
/// greedily; the batch order is then shuffled with the same seed. A pair
/// that alone exceeds the budget becomes its own batch.
pub fn make_batches(pairs: &[Pair], max_tokens: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    order.shuffle(&mut rng);
    order.sort_by_key(|&i| (pairs[i].src.len(), pairs[i].tgt.len()));
    let mut batches = pack(pairs, &order, max_tokens);
    batches.shuffle(&mut rng);
    batches
}

/// Greedy packing of `order` without reordering.
pub fn pack(pairs: &[Pair], order: &[usize], max_tokens: usize) -> Vec<Vec<usize>> {
    let mut batches = Vec::new();
    let mut cur: Vec<usize> = Vec::new();
    let (mut s, mut t) = (1, 0);
    for &i in order {
        let (ns, nt) = (s.max(pairs[i].src.len()), t.max(pairs[i].tgt.len()));
        if !cur.is_empty() && (cur.len() + 1) * (ns + nt) > max_tokens {
            batches.push(std::mem::take(&mut cur));
            (s, t) = (1, 0);
        }
        s = s.max(pairs[i].src.len());
        t = t.max(pairs[i].tgt.len());
        cur.push(i);
        if cur.len() == 1 && s + t > max_tokens {
            log::warn!("pair {i} has {} tokens, above the batch budget of {max_tokens}", s + t);
        }
    }
    if !cur.is_empty() {
        batches.push(cur);
    }
    batches
}
