//! Compares backpropagated gradients of a small double path model with
//! central finite differences, one parameter tensor at a time.
//!
//! ```text
//! cargo run --release --example gradient_check
//! ```

use dpn_s2s::model::{Dpn, ModelConfig};
use dpn_s2s::nn::{Bound, ForwardCtx};
use dpn_s2s::tensor::{grad_check, Tensor};

fn main() -> dpn_s2s::Result<()> {
    let config = ModelConfig {
        d: 8,
        d_ff: 16,
        heads: 2,
        cnn_enc_layers: 2,
        san_enc_layers: 1,
        cnn_dec_layers: 2,
        san_dec_layers: 1,
        max_len: 8,
        dropout: 0.0,
        ..ModelConfig::tiny(11, 11)
    };
    let model = Dpn::<f64>::new(config, 3)?;
    let names: Vec<String> = model.params.iter().map(|(n, _)| n.to_string()).collect();
    let inputs: Vec<Tensor<f64>> = model.params.ids().map(|id| model.params.get(id).clone()).collect();

    // Two sentences, the second padded.
    let src = [4, 7, 9, 5, 10, 6, 0, 0];
    let tgt_in = [1, 8, 4, 6, 1, 5, 0, 0];
    let tgt_out = [8, 4, 6, 2, 5, 2, 0, 0];
    let report = grad_check(
        |xs| {
            let p = Bound::from_values(xs.to_vec());
            let lp = model.forward(&p, &src, &[4, 2], &tgt_in, &mut ForwardCtx::eval())?;
            lp.select_last(&tgt_out)?.sum_all()
        },
        &inputs,
        1e-5,
        1e-3,
    )?;
    for (name, err) in names.iter().zip(&report.max_rel_error) {
        println!("{name:40} {err:.2e}");
    }
    println!(
        "{} tensors, max relative error {:.2e}: {}",
        names.len(),
        report.overall_max(),
        if report.passed() { "ok" } else { "FAILED" }
    );
    Ok(())
}
