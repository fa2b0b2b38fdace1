//! Trains the full double path model on the copy task, then prints the
//! mean attention entropy of each encoder/decoder pairing and one
//! alignment matrix as a character heat map.
//!
//! ```text
//! cargo run --release --example attention_entropy -- [steps]
//! ```

use dpn_s2s::data::{synthetic_pairs, Task, Vocabulary};
use dpn_s2s::eval::{collect_alignments, entropy_report};
use dpn_s2s::model::{Dpn, Flow, ModelConfig};
use dpn_s2s::train::{TrainConfig, Trainer};

fn main() -> dpn_s2s::Result<()> {
    let steps: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(500);
    let symbols = 20;
    let vocab = Vocabulary::symbols(symbols);
    let train = synthetic_pairs(Task::Copy, 20_000, symbols, 1..=20, 1)?;
    let probe = synthetic_pairs(Task::Copy, 50, symbols, 5..=12, 3)?;

    let model = Dpn::new(ModelConfig::tiny(vocab.len(), vocab.len()), 7)?;
    let config = TrainConfig {
        momentum: 0.9,
        clip: Some(0.1),
        max_tokens: 800,
        max_steps: Some(steps),
        ..TrainConfig::default()
    };
    let mut trainer = Trainer::new(model, config)?;
    trainer.run(&train, &[], &mut |_| Ok(()), None)?;

    let records = collect_alignments(&trainer.model, &probe, &vocab, &vocab)?;
    println!("{}", entropy_report(&records)?);

    let r = &records[0];
    let m = r.flow(Flow::Aa).expect("full model has every flow");
    println!("\nSAN decoder over SAN encoder, sentence {}:", r.id);
    let shades = [' ', '.', ':', '+', '#'];
    println!("      {}", r.src.iter().map(|s| format!("{s:>3}")).collect::<String>());
    for (i, word) in r.tgt.iter().enumerate() {
        let row: String = m.row(i).iter().map(|&w| format!("  {}", shades[((w * 4.0).round() as usize).min(4)])).collect();
        println!("{word:>5} {row}");
    }
    Ok(())
}
