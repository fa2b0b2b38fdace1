//! BLEU/ROUGE scoring and attention-alignment analysis.

mod alignment;
mod metrics;

pub use alignment::{
    attention_entropy, check_row_stochastic, collect_alignments, entropy_report, format_record, parse_dump, read_dump,
    row_entropy, write_dump, AttentionRecord, EntropyReport, Matrix, ROW_TOLERANCE,
};
pub use metrics::{bleu, lcs_len, rouge, rouge_pair, Bleu, RougeVariant};
