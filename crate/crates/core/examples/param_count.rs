//! Parameter counts of the bundled configurations and every path ablation.
//!
//! ```text
//! cargo run --release --example param_count
//! ```

use dpn_s2s::model::{count_parameters, Ablation, ModelConfig};

fn main() {
    for (name, config) in [
        ("tiny", ModelConfig::tiny(24, 24)),
        ("iwslt", ModelConfig::iwslt()),
        ("nist", ModelConfig::nist()),
    ] {
        println!("{name}: {}", count_parameters(&config));
        for ab in Ablation::ALL {
            let n = count_parameters(&ab.apply(&config));
            println!("  {ab} {n:>11} ({:.2}M)", n as f64 / 1e6);
        }
    }
}
