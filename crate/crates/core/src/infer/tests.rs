use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::data::UNK;
use crate::model::{Ablation, ModelConfig};

const A: usize = 4;
const B: usize = 5;
const V: usize = 6;

/// Log-probabilities computed from the source and the prefix so far.
struct PrefixModel<F> {
    f: F,
    max_len: usize,
}

impl<F: Fn(&[usize], &[usize]) -> Vec<f64>> DecodeModel for PrefixModel<F> {
    type State = (Vec<usize>, Vec<Vec<usize>>);

    fn vocab_size(&self) -> usize {
        V
    }

    fn max_len(&self) -> usize {
        self.max_len
    }

    fn start(&self, src: &[usize]) -> Result<Self::State> {
        Ok((src.to_vec(), vec![Vec::new()]))
    }

    fn step(&self, state: &mut Self::State, tokens: &[usize]) -> Result<Vec<Vec<f64>>> {
        assert_eq!(tokens.len(), state.1.len());
        let mut out = Vec::new();
        for (prefix, &t) in state.1.iter_mut().zip(tokens) {
            if t != BOS {
                prefix.push(t);
            }
            out.push((self.f)(&state.0, prefix));
        }
        Ok(out)
    }

    fn reorder(&self, state: &mut Self::State, rows: &[usize]) -> Result<()> {
        state.1 = rows.iter().map(|&r| state.1[r].clone()).collect();
        Ok(())
    }
}

/// Distribution over `(eos, a, b)`; the other ids are impossible.
fn dist(eos: f64, a: f64, b: f64) -> Vec<f64> {
    let mut lp = vec![f64::NEG_INFINITY; V];
    lp[EOS] = eos.ln();
    lp[A] = a.ln();
    lp[B] = b.ln();
    lp
}

fn toy() -> PrefixModel<impl Fn(&[usize], &[usize]) -> Vec<f64>> {
    PrefixModel {
        f: |_: &[usize], prefix: &[usize]| match prefix {
            [] => dist(0.1, 0.5, 0.4),
            [A] => dist(0.3, 0.4, 0.3),
            [B] => dist(0.9, 0.05, 0.05),
            [A, A] => dist(0.5, 0.3, 0.2),
            [A, B] => dist(0.6, 0.2, 0.2),
            _ => dist(0.4, 0.3, 0.3),
        },
        max_len: 10,
    }
}

/// Best complete sequence over every path of at most `max_len` tokens.
fn exhaustive<M: DecodeModel>(model: &M, src: &[usize], max_len: usize, min_len: usize, alpha: f64) -> Hypothesis {
    fn walk<M: DecodeModel>(
        model: &M,
        src: &[usize],
        prefix: Vec<usize>,
        score: f64,
        cfg: (usize, usize),
        out: &mut Vec<Hypothesis>,
    ) {
        let mut state = model.start(src).unwrap();
        let mut lp = model.step(&mut state, &[BOS]).unwrap();
        for &t in &prefix {
            lp = model.step(&mut state, &[t]).unwrap();
        }
        for (w, &x) in lp[0].iter().enumerate() {
            if x == f64::NEG_INFINITY || w == PAD || w == BOS || (w == EOS && prefix.len() < cfg.1) {
                continue;
            }
            let mut tokens = prefix.clone();
            tokens.push(w);
            if w == EOS {
                out.push(Hypothesis { tokens, score: score + x, finished: true });
            } else if tokens.len() == cfg.0 {
                out.push(Hypothesis { tokens, score: score + x, finished: false });
            } else {
                walk(model, src, tokens, score + x, cfg, out);
            }
        }
    }
    let mut all = Vec::new();
    walk(model, src, Vec::new(), 0.0, (max_len, min_len), &mut all);
    all.sort_by(|a, b| rank(a, b, alpha));
    all.swap_remove(0)
}

#[test]
fn toy_beam_matches_exhaustive_search() {
    let m = toy();
    let cfg = BeamConfig { beam: 2, max_len: 3, min_len: 0, alpha: 1.0 };
    let best = beam_search(&m, &[], &cfg).unwrap();
    let oracle = exhaustive(&m, &[], 3, 0, 1.0);
    assert_eq!(best, oracle);
    assert_eq!(best.tokens, vec![B, EOS]);
    assert!((best.score - (0.4f64.ln() + 0.9f64.ln())).abs() < 1e-12);
    // Greedy commits to `a` and misses it.
    let g = greedy_decode(&m, &[], 3, 0).unwrap();
    assert_eq!(g.tokens[0], A);
    assert!(g.normalized(1.0) < best.normalized(1.0));
}

#[test]
fn min_len_suppresses_early_eos() {
    let m = PrefixModel {
        f: |_: &[usize], _: &[usize]| dist(0.98, 0.01, 0.01),
        max_len: 10,
    };
    for beam in [1, 3] {
        let cfg = BeamConfig { beam, max_len: 6, min_len: 2, alpha: 1.0 };
        let h = beam_search(&m, &[], &cfg).unwrap();
        assert!(h.output().len() >= 2, "{h:?}");
        assert_eq!(h.tokens.last(), Some(&EOS));
        assert_eq!(h, exhaustive(&m, &[], 6, 2, 1.0));
    }
    assert_eq!(greedy_decode(&m, &[], 6, 0).unwrap().tokens, vec![EOS]);
    assert_eq!(greedy_decode(&m, &[], 6, 3).unwrap().tokens.len(), 4);
}

#[test]
fn config_errors() {
    let m = toy();
    let bad = |beam, max_len, min_len| beam_search(&m, &[], &BeamConfig { beam, max_len, min_len, alpha: 1.0 });
    assert!(matches!(bad(0, 3, 0), Err(Error::Config(_))));
    assert!(matches!(bad(2, 3, 3), Err(Error::Config(_))));
    assert!(matches!(bad(2, 0, 0), Err(Error::Config(_))));
}

#[test]
fn max_len_one_gives_one_token() {
    let m = toy();
    let g = greedy_decode(&m, &[], 1, 0).unwrap();
    assert_eq!(g.tokens, vec![A]);
    assert!(!g.finished);
    assert_eq!(g.output(), &[A]);
}

fn random_model(seed: u64) -> PrefixModel<impl Fn(&[usize], &[usize]) -> Vec<f64>> {
    PrefixModel {
        f: move |src: &[usize], prefix: &[usize]| {
            let key = src.iter().chain(prefix).fold(seed, |h, &t| h.wrapping_mul(31).wrapping_add(t as u64 + 1));
            let mut rng = ChaCha8Rng::seed_from_u64(key);
            let w: Vec<f64> = (0..3).map(|_| rng.random_range(0.05..1.0)).collect();
            let z: f64 = w.iter().sum();
            dist(w[0] / z, w[1] / z, w[2] / z)
        },
        max_len: 20,
    }
}

#[test]
fn beam_one_equals_greedy_on_random_toys() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for case in 0..100 {
        let src: Vec<usize> = (0..rng.random_range(1..6)).map(|_| rng.random_range(A..V)).collect();
        let m = random_model(case);
        let cfg = BeamConfig { beam: 1, max_len: 8, min_len: case as usize % 3, alpha: 1.0 };
        let b = beam_search(&m, &src, &cfg).unwrap();
        let g = greedy_decode(&m, &src, 8, cfg.min_len).unwrap();
        assert_eq!(b, g, "case {case}");
    }
}

#[test]
fn wide_beams_match_exhaustive_on_random_toys() {
    // With beam >= 3^3 every prefix survives, so the search is exact.
    for case in 0..20 {
        let m = random_model(100 + case);
        let cfg = BeamConfig { beam: 27, max_len: 3, min_len: 0, alpha: 0.7 };
        assert_eq!(beam_search(&m, &[4, 5], &cfg).unwrap(), exhaustive(&m, &[4, 5], 3, 0, 0.7));
    }
}

#[test]
fn outputs_are_well_formed() {
    for case in 0..30 {
        let m = random_model(200 + case);
        let cfg = BeamConfig { beam: 4, max_len: 6, min_len: 1, alpha: 1.0 };
        for h in beam_search_all(&m, &[4], &cfg).unwrap() {
            assert!(!h.tokens.contains(&PAD) && !h.tokens.contains(&BOS) && !h.tokens.contains(&UNK));
            let eos = h.tokens.iter().filter(|&&t| t == EOS).count();
            if h.finished {
                assert_eq!((eos, h.tokens.last()), (1, Some(&EOS)));
            } else {
                assert_eq!((eos, h.tokens.len()), (0, 6));
            }
        }
    }
}

/// Wider beams can lose (a pruned prefix can win later), but the best
/// unnormalized score kept by an exact-width search never drops below
/// the greedy one.
#[test]
fn exact_beam_never_scores_below_greedy() {
    for case in 0..30 {
        let m = random_model(300 + case);
        let exact = exhaustive(&m, &[6], 4, 0, 0.0);
        let g = greedy_decode(&m, &[6], 4, 0).unwrap();
        assert!(exact.score >= g.score - 1e-12);
        let wide = beam_search(&m, &[6], &BeamConfig { beam: 81, max_len: 4, min_len: 0, alpha: 0.0 }).unwrap();
        assert_eq!(wide, exact);
    }
}

#[test]
fn dpn_beam_one_equals_greedy_and_is_deterministic() {
    let config = ModelConfig {
        d: 8,
        d_ff: 16,
        heads: 2,
        max_len: 10,
        ..ModelConfig::tiny(9, 9)
    };
    let model = Dpn::<f64>::new(Ablation::M9.apply(&config), 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..10 {
        let src: Vec<usize> = (0..rng.random_range(1..7)).map(|_| rng.random_range(4..9)).collect();
        let g = greedy_decode(&model, &src, 8, 0).unwrap();
        assert_eq!(g, greedy_decode(&model, &src, 8, 0).unwrap());
        let b = beam_search(&model, &src, &BeamConfig { beam: 1, max_len: 8, min_len: 0, alpha: 1.0 }).unwrap();
        assert_eq!(b, g);
        let wide = beam_search(&model, &src, &BeamConfig { beam: 4, max_len: 8, min_len: 2, alpha: 1.0 }).unwrap();
        assert!(wide.tokens.len() >= 2 && wide.tokens.len() <= 8);
    }
    // Requests past the model's positional capacity are clamped.
    let long = greedy_decode(&model, &[4, 5], 50, 0).unwrap();
    assert!(long.tokens.len() <= 10);
}
