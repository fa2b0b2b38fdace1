//! Trains all nine path configurations on the copy task through the same
//! code path as `dpn ablate` and prints the summary table.
//!
//! ```text
//! cargo run --release --example ablation_grid -- [max_steps] [out_dir]
//! ```

use std::path::PathBuf;

use dpn_s2s::cli::{ablate, RunConfig};
use dpn_s2s::model::Ablation;

fn main() -> dpn_s2s::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let steps: usize = args.first().and_then(|s| s.parse().ok()).unwrap_or(1000);
    let out = args
        .get(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join(format!("dpn-ablation-{}", std::process::id())));
    let config = RunConfig::load(None, &[format!("train.max_steps={steps}")])?;
    print!("{}", ablate(&config, &Ablation::ALL, &out)?);
    println!("runs in {}", out.display());
    Ok(())
}
