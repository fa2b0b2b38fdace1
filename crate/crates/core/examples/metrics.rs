//! Corpus BLEU and sentence-averaged ROUGE on hypothesis/reference files.
//!
//! ```text
//! cargo run --release --example metrics -- [hyp.txt ref.txt]
//! ```

use dpn_s2s::data::read_lines;
use dpn_s2s::eval::{bleu, rouge, RougeVariant};

fn main() -> dpn_s2s::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let (hyps, refs) = if let [h, r] = &args[..] {
        (read_lines(h.as_ref())?, read_lines(r.as_ref())?)
    } else {
        let fixtures = concat!(env!("CARGO_MANIFEST_DIR"), "/tests/fixtures");
        (
            read_lines(format!("{fixtures}/bleu_hyp.txt").as_ref())?,
            read_lines(format!("{fixtures}/bleu_ref.txt").as_ref())?,
        )
    };
    println!("{}", bleu(&hyps, &refs, 4)?);
    for v in RougeVariant::ALL {
        println!("{v} {:.4}", rouge(&hyps, &refs, v)?);
    }
    Ok(())
}
