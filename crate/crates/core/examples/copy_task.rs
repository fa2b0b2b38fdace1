//! Trains a small network on the synthetic copy task and reports
//! validation token accuracy.
//!
//! ```text
//! cargo run --release --example copy_task -- [ablation] [max_steps] [lr] [max_tokens] [momentum] [validate_every]
//! ```

use std::time::Instant;

use dpn_s2s::data::{synthetic_pairs, Task};
use dpn_s2s::model::{Ablation, Dpn, ModelConfig};
use dpn_s2s::train::{LogRecord, TrainConfig, Trainer};

fn main() -> dpn_s2s::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let ablation: Ablation = args.first().map(String::as_str).unwrap_or("M9").parse()?;
    let steps: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(5000);
    let lr: f64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(0.25);
    let max_tokens: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(800);
    let momentum: f64 = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(0.9);
    let validate_every: usize = args.get(5).and_then(|s| s.parse().ok()).unwrap_or(250);

    let symbols = 20;
    let train = synthetic_pairs(Task::Copy, 20_000, symbols, 1..=20, 1)?;
    let valid = synthetic_pairs(Task::Copy, 200, symbols, 1..=20, 2)?;
    let vocab = symbols + dpn_s2s::data::NUM_SPECIALS;
    let config = ablation.apply(&ModelConfig::tiny(vocab, vocab));
    let model = Dpn::new(config, 7)?;
    println!("{ablation}: {} parameters", model.params.num_scalars());

    let config = TrainConfig {
        lr,
        momentum,
        clip: Some(0.1),
        max_tokens,
        max_steps: Some(steps),
        validate_every: Some(validate_every),
        target_accuracy: Some(0.99),
        log_every: 100,
        ..TrainConfig::default()
    };
    let mut trainer = Trainer::new(model, config)?;
    let start = Instant::now();
    let summary = trainer.run(
        &train,
        &valid,
        &mut |r| {
            match r {
                LogRecord::Train { step, loss, tokens_per_sec, .. } => {
                    println!("step {step:5}  loss {loss:.4}  {tokens_per_sec:.0} tok/s")
                }
                LogRecord::Valid { step, loss, accuracy, lr, .. } => {
                    println!("valid {step:5}  loss {loss:.4}  acc {:.2}%  lr {lr}", accuracy * 100.0)
                }
            }
            Ok(())
        },
        None,
    )?;
    println!(
        "stopped ({:?}) after {} steps in {:.1}s, accuracy {:.2}%",
        summary.reason,
        summary.steps,
        start.elapsed().as_secs_f64(),
        summary.last_valid.map_or(0.0, |v| v.accuracy * 100.0)
    );
    Ok(())
}
