//! Parallel text corpus through training, decoding and scoring.

use std::fs;

use dpn_s2s::cli::{decode_lines, load_for_inference, train_run, RunConfig};
use dpn_s2s::eval::bleu;
use dpn_s2s::infer::BeamConfig;
use dpn_s2s::model::checkpoint::Checkpoint;
use dpn_s2s::Error;

const WORDS: [&str; 8] = ["red", "green", "blue", "big", "small", "cat", "dog", "bird"];

/// Toy "translation": every source word maps to an uppercase target word,
/// in reverse order.
fn corpus(n: usize, offset: usize) -> (String, String) {
    let (mut src, mut tgt) = (String::new(), String::new());
    for i in 0..n {
        let len = 1 + (i * 7 + offset) % 5;
        let words: Vec<&str> = (0..len).map(|j| WORDS[(i * 3 + j * 5 + offset) % WORDS.len()]).collect();
        src.push_str(&words.join(" "));
        src.push('\n');
        let upper: Vec<String> = words.iter().rev().map(|w| w.to_uppercase()).collect();
        tgt.push_str(&upper.join(" "));
        tgt.push('\n');
    }
    (src, tgt)
}

#[test]
fn corpus_files_train_and_decode() {
    let dir = tempfile::tempdir().unwrap();
    let p = |f: &str| dir.path().join(f);
    let (s, t) = corpus(400, 0);
    fs::write(p("train.src"), s).unwrap();
    fs::write(p("train.tgt"), t).unwrap();
    let (s, t) = corpus(20, 1);
    fs::write(p("valid.src"), &s).unwrap();
    fs::write(p("valid.tgt"), &t).unwrap();
    let toml = format!(
        "seed = 3\n[data]\ntrain_src = {:?}\ntrain_tgt = {:?}\nvalid_src = {:?}\nvalid_tgt = {:?}\nmax_len = 10\n\
         [train]\nmax_steps = 30\nvalidate_every = 10\n[decode]\nbeam = 2\nmax_len = 12\n",
        p("train.src"),
        p("train.tgt"),
        p("valid.src"),
        p("valid.tgt"),
    );
    let cfg_path = p("run.toml");
    fs::write(&cfg_path, toml).unwrap();

    let config = RunConfig::load(Some(&cfg_path), &[]).unwrap();
    assert_eq!(config.data.task, None, "corpus files replace the synthetic task");
    config.validate().unwrap();
    let both = RunConfig::load(Some(&cfg_path), &["data.task=copy".into()]).unwrap();
    assert!(matches!(both.validate(), Err(Error::Config(_))));
    let run = p("run");
    let outcome = train_run(&config, &run, false).unwrap();
    assert_eq!(outcome.summary.steps, 30);
    assert!(outcome.parameters > 0);

    let ck = Checkpoint::load(&run.join("checkpoints/best.ckpt")).unwrap();
    let (model, sv, tv) = load_for_inference(&ck).unwrap();
    assert_eq!(sv.len(), WORDS.len() + 4);
    assert_eq!(tv.id("CAT"), tv.encode("CAT")[0]);
    let lines: Vec<&str> = s.lines().collect();
    let cfg = BeamConfig { beam: 2, max_len: 12, ..BeamConfig::default() };
    let out = decode_lines(&model, &sv, &tv, &lines, &cfg, false).unwrap();
    assert_eq!(out.len(), lines.len());
    for (h, _) in &out {
        assert!(h.split_whitespace().all(|w| w.chars().all(|c| c.is_ascii_uppercase())), "{h}");
    }
    let hyps: Vec<&str> = out.iter().map(|(h, _)| h.as_str()).collect();
    let refs: Vec<&str> = t.lines().collect();
    let b = bleu(&hyps, &refs, 4).unwrap();
    assert!((0.0..=100.0).contains(&b.score));
}

#[test]
fn shared_embeddings_use_one_joint_vocabulary() {
    let dir = tempfile::tempdir().unwrap();
    let p = |f: &str| dir.path().join(f);
    let (s, t) = corpus(100, 0);
    fs::write(p("a"), s).unwrap();
    fs::write(p("b"), t).unwrap();
    let sets = [
        "data.task=\"\"".to_string(),
        format!("data.train_src={:?}", p("a")),
        format!("data.train_tgt={:?}", p("b")),
        "model.share_embeddings=true".to_string(),
        "train.max_steps=3".to_string(),
    ];
    // An empty string is not a task name.
    assert!(RunConfig::load(None, &sets).is_err());
    let config = RunConfig::load(None, &sets[1..]).unwrap();
    let run = p("run");
    train_run(&config, &run, false).unwrap();
    let ck = Checkpoint::load(&run.join("checkpoints/last.ckpt")).unwrap();
    let (model, sv, tv) = load_for_inference(&ck).unwrap();
    assert_eq!(sv.len(), tv.len());
    assert_eq!(sv.len(), 2 * WORDS.len() + 4);
    assert_eq!(sv.id("DOG"), tv.id("DOG"));
    assert!(model.config().share_embeddings);
}
