use std::fmt;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::data::{Pair, Vocabulary};
use crate::error::{Error, Result};
use crate::model::{Dpn, Flow, Trace};
use crate::nn::ForwardCtx;
use crate::tensor::Scalar;

/// Largest deviation of a row sum from one that still counts as a distribution.
pub const ROW_TOLERANCE: f64 = 1e-4;

/// Row-major `rows x cols` matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::dim("matrix", &[data.len()], &[rows, cols]));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    /// Values as written by the dump: rounded to six decimals.
    pub fn quantized(&self) -> Self {
        let data = self.data.iter().map(|x| format!("{x:.6}").parse().expect("formatted float")).collect();
        Matrix { data, ..self.clone() }
    }
}

/// `-sum x ln x` with `0 ln 0 = 0`.
pub fn row_entropy(row: &[f64]) -> f64 {
    -row.iter().filter(|&&x| x > 0.0).map(|&x| x * x.ln()).sum::<f64>()
}

/// Fails on a negative entry or a row whose sum is off by more than `tol`.
pub fn check_row_stochastic(m: &Matrix, tol: f64) -> Result<()> {
    for i in 0..m.rows {
        let row = m.row(i);
        let sum: f64 = row.iter().sum();
        if (sum - 1.0).abs() > tol || row.iter().any(|&x| x < 0.0 || !x.is_finite()) {
            return Err(Error::Data(format!("attention row {i} is not a distribution (sum {sum})")));
        }
    }
    Ok(())
}

/// Alignments of one sentence pair: one `n x m` matrix per available flow.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionRecord {
    pub id: usize,
    pub src: Vec<String>,
    /// Predicted target tokens, one per matrix row.
    pub tgt: Vec<String>,
    pub flows: Vec<(Flow, Matrix)>,
    /// Per-row entropies for each flow, in `flows` order.
    pub entropies: Vec<Vec<f64>>,
}

impl AttentionRecord {
    /// Validates the matrices and computes row entropies.
    pub fn new(id: usize, src: Vec<String>, tgt: Vec<String>, flows: Vec<(Flow, Matrix)>) -> Result<Self> {
        let mut entropies = Vec::new();
        for (flow, m) in &flows {
            if m.rows != tgt.len() || m.cols != src.len() {
                return Err(Error::Data(format!(
                    "sentence {id}: {} alignment is {}x{} for {} target and {} source tokens",
                    flow.name(),
                    m.rows,
                    m.cols,
                    tgt.len(),
                    src.len()
                )));
            }
            check_row_stochastic(m, ROW_TOLERANCE)?;
            entropies.push((0..m.rows).map(|i| row_entropy(m.row(i))).collect());
        }
        Ok(AttentionRecord {
            id,
            src,
            tgt,
            flows,
            entropies,
        })
    }

    pub fn flow(&self, flow: Flow) -> Option<&Matrix> {
        self.flows.iter().find(|(f, _)| *f == flow).map(|(_, m)| m)
    }
}

/// Mean row entropy per flow of one record.
pub fn attention_entropy(record: &AttentionRecord) -> Result<Vec<(Flow, f64)>> {
    let mut out = Vec::new();
    for ((flow, m), ent) in record.flows.iter().zip(&record.entropies) {
        check_row_stochastic(m, ROW_TOLERANCE)?;
        if ent.is_empty() {
            continue;
        }
        out.push((*flow, ent.iter().sum::<f64>() / ent.len() as f64));
    }
    Ok(out)
}

/// Teacher-forced top-layer alignments of every pair, run one sentence
/// at a time so no padding enters the distributions.
pub fn collect_alignments<T: Scalar>(
    model: &Dpn<T>,
    pairs: &[Pair],
    src_vocab: &Vocabulary,
    tgt_vocab: &Vocabulary,
) -> Result<Vec<AttentionRecord>> {
    let p = model.params.bind(None);
    let mut out = Vec::new();
    for (id, pair) in pairs.iter().enumerate() {
        let batch = crate::data::Batch::from_pairs(&[pair])?;
        let mut ctx = ForwardCtx::eval();
        let enc = model.encode(&p, &pair.src, &[pair.src.len()], &mut ctx)?;
        let mut trace = Trace::new();
        model.decode(&p, &enc, &batch.tgt_in, &mut ctx, Some(&mut trace))?;
        let (n, m) = (pair.tgt.len(), pair.src.len());
        let flows = Flow::ALL
            .iter()
            .filter_map(|&f| trace.top_attention(f).map(|t| (f, t)))
            .map(|(f, t)| Ok((f, Matrix::new(n, m, t.to_f64_vec())?)))
            .collect::<Result<Vec<_>>>()?;
        let names = |v: &Vocabulary, ids: &[usize]| ids.iter().map(|&i| v.token(i).map(str::to_string)).collect::<Result<Vec<_>>>();
        out.push(AttentionRecord::new(id, names(src_vocab, &pair.src)?, names(tgt_vocab, &pair.tgt)?, flows)?);
    }
    Ok(out)
}

/// Text form of a record.
///
/// ```text
/// sentence <id> <m> <n>
/// src <tab-separated source tokens>
/// tgt <tab-separated target tokens>
/// flow <name>
/// <n rows of m tab-separated values, 6 decimals>
/// entropy <name> <n tab-separated row entropies, full precision>
/// ```
///
/// The `flow`/`entropy` block repeats per flow; a blank line ends the record.
pub fn format_record(r: &AttentionRecord) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "sentence {} {} {}", r.id, r.src.len(), r.tgt.len());
    let _ = writeln!(s, "src\t{}", r.src.join("\t"));
    let _ = writeln!(s, "tgt\t{}", r.tgt.join("\t"));
    for ((flow, m), ent) in r.flows.iter().zip(&r.entropies) {
        let _ = writeln!(s, "flow {}", flow.name());
        for i in 0..m.rows {
            let row: Vec<String> = m.row(i).iter().map(|x| format!("{x:.6}")).collect();
            let _ = writeln!(s, "{}", row.join("\t"));
        }
        let ent: Vec<String> = ent.iter().map(|x| format!("{x:?}")).collect();
        let _ = writeln!(s, "entropy {}\t{}", flow.name(), ent.join("\t"));
    }
    s.push('\n');
    s
}

pub fn write_dump(records: &[AttentionRecord], path: &Path) -> Result<()> {
    let text: String = records.iter().map(format_record).collect();
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn parse_err(line: usize, msg: impl fmt::Display) -> Error {
    Error::Data(format!("alignment dump line {line}: {msg}"))
}

fn tokens(line: &str, tag: &str, count: usize, at: usize) -> Result<Vec<String>> {
    let rest = line
        .strip_prefix(tag)
        .ok_or_else(|| parse_err(at, format!("expected `{tag}`")))?;
    let toks: Vec<String> = match rest.strip_prefix('\t') {
        Some(r) if count > 0 => r.split('\t').map(str::to_string).collect(),
        _ => Vec::new(),
    };
    if toks.len() != count {
        return Err(parse_err(at, format!("expected {count} tokens, found {}", toks.len())));
    }
    Ok(toks)
}

fn floats(line: &str, count: usize, at: usize) -> Result<Vec<f64>> {
    let vals: Vec<f64> = if count == 0 {
        Vec::new()
    } else {
        line.split('\t')
            .map(|x| x.parse::<f64>().map_err(|e| parse_err(at, format!("`{x}`: {e}"))))
            .collect::<Result<_>>()?
    };
    if vals.len() != count {
        return Err(parse_err(at, format!("expected {count} values, found {}", vals.len())));
    }
    Ok(vals)
}

/// Inverse of [`format_record`] over a whole dump. Matrices come back as
/// written (six decimals) and entropies exactly.
pub fn parse_dump(text: &str) -> Result<Vec<AttentionRecord>> {
    let lines: Vec<&str> = text.lines().collect();
    let mut records = Vec::new();
    let mut i = 0;
    while i < lines.len() {
        if lines[i].is_empty() {
            i += 1;
            continue;
        }
        let head: Vec<&str> = lines[i].split(' ').collect();
        let [tag, id, m, n] = head[..] else {
            return Err(parse_err(i + 1, "expected `sentence <id> <m> <n>`"));
        };
        if tag != "sentence" {
            return Err(parse_err(i + 1, "expected `sentence`"));
        }
        let num = |s: &str| s.parse::<usize>().map_err(|e| parse_err(i + 1, e));
        let (id, m, n) = (num(id)?, num(m)?, num(n)?);
        let line = |k: usize| lines.get(k).copied().ok_or_else(|| parse_err(k + 1, "unexpected end of dump"));
        let src = tokens(line(i + 1)?, "src", m, i + 2)?;
        let tgt = tokens(line(i + 2)?, "tgt", n, i + 3)?;
        i += 3;
        let mut flows = Vec::new();
        let mut entropies = Vec::new();
        while i < lines.len() && !lines[i].is_empty() {
            let name = line(i)?
                .strip_prefix("flow ")
                .ok_or_else(|| parse_err(i + 1, "expected `flow <name>`"))?;
            let flow = Flow::parse(name).ok_or_else(|| parse_err(i + 1, format!("unknown flow `{name}`")))?;
            let mut data = Vec::with_capacity(n * m);
            for r in 0..n {
                data.extend(floats(line(i + 1 + r)?, m, i + 2 + r)?);
            }
            i += 1 + n;
            let ent_line = line(i)?;
            let rest = ent_line
                .strip_prefix(&format!("entropy {}", flow.name()))
                .ok_or_else(|| parse_err(i + 1, "expected entropy line"))?;
            entropies.push(floats(rest.strip_prefix('\t').unwrap_or(""), n, i + 1)?);
            flows.push((flow, Matrix::new(n, m, data)?));
            i += 1;
        }
        for (flow, mat) in &flows {
            check_row_stochastic(mat, ROW_TOLERANCE).map_err(|e| Error::Data(format!("sentence {id}, flow {}: {e}", flow.name())))?;
        }
        records.push(AttentionRecord {
            id,
            src,
            tgt,
            flows,
            entropies,
        });
    }
    Ok(records)
}

pub fn read_dump(path: &Path) -> Result<Vec<AttentionRecord>> {
    parse_dump(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
}

/// Mean entropy per (encoder path, decoder path): rows are the CNN and
/// SAN encoder, columns the CNN and SAN decoder.
#[derive(Clone, Debug, PartialEq)]
pub struct EntropyReport {
    pub cells: [[Option<f64>; 2]; 2],
    pub sentences: usize,
}

impl EntropyReport {
    pub fn get(&self, flow: Flow) -> Option<f64> {
        self.cells[!flow.encoder_is_cnn() as usize][!flow.decoder_is_cnn() as usize]
    }
}

impl fmt::Display for EntropyReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<12}{:>14}{:>14}", "", "CNN decoder", "SAN decoder")?;
        for (label, row) in ["CNN encoder", "SAN encoder"].iter().zip(&self.cells) {
            write!(f, "{label:<12}")?;
            for cell in row {
                match cell {
                    Some(v) => write!(f, "{v:>14.3}")?,
                    None => write!(f, "{:>14}", "-")?,
                }
            }
            writeln!(f)?;
        }
        write!(f, "({} sentences)", self.sentences)
    }
}

/// Sentence-mean entropies averaged over sentences, per flow.
pub fn entropy_report(records: &[AttentionRecord]) -> Result<EntropyReport> {
    if records.is_empty() {
        return Err(Error::Data("alignment dump is empty".into()));
    }
    let mut sums = [[(0.0, 0usize); 2]; 2];
    for r in records {
        for (flow, h) in attention_entropy(r)? {
            let cell = &mut sums[!flow.encoder_is_cnn() as usize][!flow.decoder_is_cnn() as usize];
            cell.0 += h;
            cell.1 += 1;
        }
    }
    let cells = sums.map(|row| row.map(|(s, k)| (k > 0).then(|| s / k as f64)));
    Ok(EntropyReport {
        cells,
        sentences: records.len(),
    })
}
