//! Trains a small model on sequence reversal, then decodes a few inputs
//! greedily and with wider beams.
//!
//! ```text
//! cargo run --release --example beam_search -- [steps]
//! ```

use dpn_s2s::data::{synthetic_pairs, Task, Vocabulary};
use dpn_s2s::infer::{beam_search_all, greedy_decode, BeamConfig};
use dpn_s2s::model::{Dpn, ModelConfig};
use dpn_s2s::train::{TrainConfig, Trainer};

fn main() -> dpn_s2s::Result<()> {
    let steps: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(600);
    let symbols = 12;
    let vocab = Vocabulary::symbols(symbols);
    let train = synthetic_pairs(Task::Reverse, 10_000, symbols, 2..=10, 1)?;
    let probe = synthetic_pairs(Task::Reverse, 5, symbols, 4..=10, 9)?;

    let model = Dpn::new(ModelConfig::tiny(vocab.len(), vocab.len()), 1)?;
    let config = TrainConfig {
        momentum: 0.9,
        clip: Some(0.1),
        max_tokens: 800,
        max_steps: Some(steps),
        ..TrainConfig::default()
    };
    let mut trainer = Trainer::new(model, config)?;
    trainer.run(&train, &[], &mut |_| Ok(()), None)?;
    let model = trainer.model;

    for pair in &probe {
        println!("source     {}", vocab.decode(&pair.src)?);
        let g = greedy_decode(&model, &pair.src, 30, 0)?;
        println!("  greedy   {:8.4}  {}", g.score, vocab.decode(g.output())?);
        let cfg = BeamConfig {
            beam: 4,
            max_len: 30,
            ..BeamConfig::default()
        };
        for h in beam_search_all(&model, &pair.src, &cfg)? {
            println!("  beam 4   {:8.4}  {}", h.score, vocab.decode(h.output())?);
        }
    }
    Ok(())
}
