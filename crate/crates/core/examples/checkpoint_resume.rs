//! Shows that stopping, saving and resuming reproduces an uninterrupted
//! run exactly.
//!
//! ```text
//! cargo run --release --example checkpoint_resume
//! ```

use dpn_s2s::data::{synthetic_pairs, Task, NUM_SPECIALS};
use dpn_s2s::model::checkpoint::Checkpoint;
use dpn_s2s::model::{Dpn, ModelConfig};
use dpn_s2s::train::{LogRecord, TrainConfig, Trainer};

fn losses(trainer: &mut Trainer, pairs: &[dpn_s2s::data::Pair], until: usize) -> dpn_s2s::Result<Vec<f64>> {
    trainer.config.max_steps = Some(until);
    let mut out = Vec::new();
    trainer.run(
        pairs,
        &[],
        &mut |r| {
            if let LogRecord::Train { loss, .. } = r {
                out.push(*loss);
            }
            Ok(())
        },
        None,
    )?;
    Ok(out)
}

fn main() -> dpn_s2s::Result<()> {
    let train = synthetic_pairs(Task::Sort, 2_000, 10, 1..=12, 4)?;
    let vocab = 10 + NUM_SPECIALS;
    let config = TrainConfig {
        momentum: 0.9,
        clip: Some(0.1),
        max_tokens: 600,
        log_every: 1,
        ..TrainConfig::default()
    };
    let fresh = || Trainer::new(Dpn::new(ModelConfig::tiny(vocab, vocab), 5)?, config.clone());

    let mut straight = fresh()?;
    let full = losses(&mut straight, &train, 40)?;

    let mut first = fresh()?;
    let mut resumed = losses(&mut first, &train, 20)?;
    let dir = tempfile::tempdir().map_err(|e| dpn_s2s::Error::Contract(e.to_string()))?;
    let path = dir.path().join("half.ckpt");
    first.save(&path)?;
    let mut second = Trainer::from_checkpoint(&Checkpoint::load(&path)?, None)?;
    resumed.extend(losses(&mut second, &train, 40)?);

    for (step, (a, b)) in full.iter().zip(&resumed).enumerate() {
        println!("step {:2}  {a:.6}  {b:.6}{}", step + 1, if a == b { "" } else { "  differs" });
    }
    let same = full == resumed;
    println!("resumed run identical: {same}");
    Ok(())
}
