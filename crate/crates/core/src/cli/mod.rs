//! The `dpn` command line: train, decode, evaluate, analyze, count-params
//! and ablate.
//!
//! A training run directory looks like
//!
//! ```text
//! <run>/config.toml          resolved configuration snapshot
//! <run>/train.log            one JSON record per line
//! <run>/checkpoints/last.ckpt
//! <run>/checkpoints/best.ckpt
//! <run>/outputs/valid.hyp    decoded validation sources
//! <run>/outputs/valid.ref
//! ```

mod config;

use std::ffi::OsString;
use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

pub use config::{parse_override, DataConfig, Preset, RunConfig};

use crate::data::{self, synthetic_pairs, Pair, Vocabulary};
use crate::error::{Error, Result};
use crate::eval::{self, RougeVariant};
use crate::infer::{beam_search, greedy_decode, BeamConfig};
use crate::model::checkpoint::Checkpoint;
use crate::model::{count_parameters, Ablation, Dpn};
use crate::train::{jsonl_sink, LogRecord, RunSummary, StopReason, Trainer};

#[derive(Debug, Parser)]
#[command(name = "dpn", version, about = "Double path CNN/self-attention sequence-to-sequence toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Default)]
pub struct ConfigArgs {
    /// TOML run configuration with [model], [data], [train] and [decode] sections.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Named defaults: tiny, iwslt or nist.
    #[arg(long)]
    pub preset: Option<String>,
    /// Path configuration M1..M9.
    #[arg(long)]
    pub ablation: Option<String>,
    /// Synthetic task: copy, reverse or sort.
    #[arg(long)]
    pub task: Option<String>,
    /// Parameter initialization seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Override one setting, e.g. `--set train.lr=0.1` (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

impl ConfigArgs {
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut overrides = Vec::new();
        if let Some(p) = &self.preset {
            overrides.push(format!("preset=\"{p}\""));
        }
        if let Some(a) = &self.ablation {
            overrides.push(format!("ablation=\"{}\"", a.parse::<Ablation>()?));
        }
        if let Some(t) = &self.task {
            overrides.push(format!("data.task=\"{t}\""));
        }
        if let Some(s) = self.seed {
            overrides.push(format!("seed={s}"));
        }
        overrides.extend(self.overrides.iter().cloned());
        RunConfig::load(self.config.as_deref(), &overrides)
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model into a run directory.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, default_value = "runs/default")]
        run_dir: PathBuf,
        /// Continue from <run_dir>/checkpoints/last.ckpt.
        #[arg(long)]
        resume: bool,
    },
    /// Translate one sentence per input line.
    Decode {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        /// Defaults to standard output.
        #[arg(long)]
        output: Option<PathBuf>,
        #[arg(long)]
        beam: Option<usize>,
        #[arg(long)]
        min_len: Option<usize>,
        #[arg(long)]
        max_len: Option<usize>,
        #[arg(long)]
        alpha: Option<f64>,
        /// Argmax decoding instead of beam search.
        #[arg(long)]
        greedy: bool,
        /// Also write each output's total log-probability, one per line.
        #[arg(long)]
        scores: Option<PathBuf>,
    },
    /// Score hypotheses against references.
    Evaluate {
        #[arg(long)]
        hyp: PathBuf,
        #[arg(long = "ref")]
        reference: PathBuf,
        /// bleu, rouge1, rouge2 or rougeL.
        #[arg(long, default_value = "bleu")]
        metric: String,
    },
    /// Dump alignments and the attention entropy table.
    Analyze {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Source side of the corpus to analyze.
        #[arg(long)]
        src: Option<PathBuf>,
        #[arg(long)]
        tgt: Option<PathBuf>,
        /// Without files, use this many fresh pairs of the training task.
        #[arg(long, default_value_t = 100)]
        pairs: usize,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Print the parameter count of a configuration.
    CountParams {
        #[command(flatten)]
        config: ConfigArgs,
        /// Also build the model and count its tensors.
        #[arg(long)]
        verify: bool,
    },
    /// Train every path configuration M1..M9 and tabulate the results.
    Ablate {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, default_value = "runs/ablation")]
        run_dir: PathBuf,
        /// Comma-separated subset, e.g. `M1,M9`.
        #[arg(long, value_delimiter = ',')]
        only: Vec<String>,
    },
}

/// Exit status for an error: 2 for configuration problems, 1 otherwise.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => 2,
        _ => 1,
    }
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn execute(command: Command) -> Result<()> {
    match command {
        Command::Train { config, run_dir, resume } => {
            let config = config.resolve()?;
            let outcome = train_run(&config, &run_dir, resume)?;
            println!("{outcome}");
            Ok(())
        }
        Command::Decode {
            checkpoint,
            input,
            output,
            beam,
            min_len,
            max_len,
            alpha,
            greedy,
            scores,
        } => {
            let ck = Checkpoint::load(&checkpoint)?;
            let mut cfg: BeamConfig = header_value(&ck, "decode")?.unwrap_or_default();
            cfg.beam = beam.unwrap_or(cfg.beam);
            cfg.min_len = min_len.unwrap_or(cfg.min_len);
            cfg.max_len = max_len.unwrap_or(cfg.max_len);
            cfg.alpha = alpha.unwrap_or(cfg.alpha);
            if greedy {
                cfg.beam = 1;
            }
            if cfg.beam == 0 || cfg.min_len >= cfg.max_len {
                return Err(Error::Config("need beam >= 1 and min_len < max_len".into()));
            }
            let lines = data::read_lines(&input)?;
            let (model, src_vocab, tgt_vocab) = load_for_inference(&ck)?;
            let outputs = decode_lines(&model, &src_vocab, &tgt_vocab, &lines, &cfg, greedy)?;
            let text: String = outputs.iter().map(|(s, _)| format!("{s}\n")).collect();
            match &output {
                Some(p) => fs::write(p, text).map_err(|e| Error::io(p, e))?,
                None => io::stdout().write_all(text.as_bytes()).map_err(|e| Error::io("stdout", e))?,
            }
            if let Some(p) = scores {
                let s: String = outputs.iter().map(|(_, x)| format!("{x}\n")).collect();
                fs::write(&p, s).map_err(|e| Error::io(&p, e))?;
            }
            Ok(())
        }
        Command::Evaluate { hyp, reference, metric } => {
            let line = evaluate_files(&hyp, &reference, &metric)?;
            println!("{line}");
            Ok(())
        }
        Command::Analyze {
            checkpoint,
            src,
            tgt,
            pairs,
            out_dir,
        } => {
            let report = analyze(&checkpoint, src.as_deref(), tgt.as_deref(), pairs, &out_dir)?;
            println!("{report}");
            Ok(())
        }
        Command::CountParams { config, verify } => {
            let config = config.resolve()?;
            let n = count_parameters(&config.model);
            println!("parameters: {n} ({:.2}M)", n as f64 / 1e6);
            if verify {
                let built = Dpn::<f32>::new(config.model.clone(), 0)?.params.num_scalars();
                println!("built model: {built}");
                if built != n {
                    return Err(Error::Contract(format!("closed form {n} disagrees with built model {built}")));
                }
            }
            Ok(())
        }
        Command::Ablate { config, run_dir, only } => {
            let config = config.resolve()?;
            let ids: Vec<Ablation> = if only.is_empty() {
                Ablation::ALL.to_vec()
            } else {
                only.iter().map(|s| s.parse()).collect::<Result<_>>()?
            };
            let table = ablate(&config, &ids, &run_dir)?;
            print!("{table}");
            Ok(())
        }
    }
}

fn header_value<T: serde::de::DeserializeOwned>(ck: &Checkpoint, key: &str) -> Result<Option<T>> {
    ck.header
        .get(key)
        .map(|v| serde_json::from_value(v.clone()).map_err(|e| Error::Checkpoint(format!("header `{key}`: {e}"))))
        .transpose()
}

/// Model and vocabularies stored in a checkpoint written by `train`.
pub fn load_for_inference(ck: &Checkpoint) -> Result<(Dpn<f32>, Vocabulary, Vocabulary)> {
    let src: Vocabulary = header_value(ck, "src_vocab")?.ok_or_else(|| Error::Checkpoint("no source vocabulary".into()))?;
    let tgt: Vocabulary = header_value(ck, "tgt_vocab")?.ok_or_else(|| Error::Checkpoint("no target vocabulary".into()))?;
    let model = Dpn::from_checkpoint(ck)?;
    let c = model.config();
    if c.src_vocab != src.len() || c.tgt_vocab != tgt.len() {
        return Err(Error::Checkpoint(format!(
            "vocabulary sizes {}/{} do not match the model ({}/{})",
            src.len(),
            tgt.len(),
            c.src_vocab,
            c.tgt_vocab
        )));
    }
    Ok((model, src, tgt))
}

/// Decodes each line; sources longer than the model allows are truncated.
pub fn decode_lines<S: AsRef<str>>(
    model: &Dpn<f32>,
    src_vocab: &Vocabulary,
    tgt_vocab: &Vocabulary,
    lines: &[S],
    cfg: &BeamConfig,
    greedy: bool,
) -> Result<Vec<(String, f64)>> {
    let limit = model.config().max_len;
    let mut out = Vec::with_capacity(lines.len());
    for (i, line) in lines.iter().enumerate() {
        let mut ids = src_vocab.encode(line.as_ref());
        if ids.len() > limit {
            log::warn!("line {}: {} tokens truncated to {limit}", i + 1, ids.len());
            ids.truncate(limit);
        }
        if ids.is_empty() {
            out.push((String::new(), 0.0));
            continue;
        }
        let hyp = if greedy {
            greedy_decode(model, &ids, cfg.max_len, cfg.min_len)?
        } else {
            beam_search(model, &ids, cfg)?
        };
        out.push((tgt_vocab.decode(hyp.output())?, hyp.score));
    }
    Ok(out)
}

/// Formatted score line for `evaluate`.
pub fn evaluate_files(hyp: &Path, reference: &Path, metric: &str) -> Result<String> {
    let h = data::read_lines(hyp)?;
    let r = data::read_lines(reference)?;
    if h.len() != r.len() {
        return Err(Error::Data(format!(
            "{} has {} lines but {} has {}",
            hyp.display(),
            h.len(),
            reference.display(),
            r.len()
        )));
    }
    match metric {
        "bleu" => Ok(format!("BLEU {:.2}", eval::bleu(&h, &r, 4)?.score)),
        "rouge1" | "rouge2" | "rougeL" => {
            let v: RougeVariant = metric[5..].parse()?;
            Ok(format!("{v} {:.2}", eval::rouge(&h, &r, v)?))
        }
        _ => Err(Error::Config(format!("unknown metric `{metric}` (bleu|rouge1|rouge2|rougeL)"))),
    }
}

/// Vocabularies plus training and validation pairs.
pub struct Prepared {
    pub src_vocab: Vocabulary,
    pub tgt_vocab: Vocabulary,
    pub train: Vec<Pair>,
    pub valid: Vec<Pair>,
}

pub fn prepare_data(config: &RunConfig) -> Result<Prepared> {
    let d = &config.data;
    if let Some(task) = d.task {
        let vocab = Vocabulary::symbols(d.symbols);
        let lengths = d.min_len..=d.max_len;
        return Ok(Prepared {
            train: synthetic_pairs(task, d.train_pairs, d.symbols, lengths.clone(), d.seed)?,
            valid: synthetic_pairs(task, d.valid_pairs, d.symbols, lengths, d.seed.wrapping_add(1))?,
            src_vocab: vocab.clone(),
            tgt_vocab: vocab,
        });
    }
    let (Some(src_path), Some(tgt_path)) = (&d.train_src, &d.train_tgt) else {
        return Err(Error::Config("[data] needs train_src and train_tgt".into()));
    };
    let src_lines = data::read_lines(src_path)?;
    let tgt_lines = data::read_lines(tgt_path)?;
    let (src_vocab, tgt_vocab) = if config.model.share_embeddings {
        let joint: Vec<&String> = src_lines.iter().chain(&tgt_lines).collect();
        let v = Vocabulary::build(&joint, d.mode, d.src_vocab_size.max(d.tgt_vocab_size))?;
        (v.clone(), v)
    } else {
        (
            Vocabulary::build(&src_lines, d.mode, d.src_vocab_size)?,
            Vocabulary::build(&tgt_lines, d.mode, d.tgt_vocab_size)?,
        )
    };
    let (train, report) = data::encode_parallel(&src_lines, &tgt_lines, &src_vocab, &tgt_vocab, d.max_len)?;
    log::info!("training corpus: {report}");
    let valid = match (&d.valid_src, &d.valid_tgt) {
        (Some(s), Some(t)) => {
            let (v, report) = data::load_parallel(s, t, &src_vocab, &tgt_vocab, d.max_len)?;
            log::info!("validation corpus: {report}");
            v
        }
        _ => {
            log::warn!("no validation corpus; the learning rate will not decay");
            Vec::new()
        }
    };
    Ok(Prepared {
        src_vocab,
        tgt_vocab,
        train,
        valid,
    })
}

/// Result of one training command.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub run_dir: PathBuf,
    pub parameters: usize,
    pub summary: RunSummary,
    pub seconds: f64,
    /// Corpus BLEU of the decoded validation set.
    pub valid_bleu: Option<f64>,
}

impl std::fmt::Display for TrainOutcome {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{}: {} parameters, {} steps ({:?}) in {:.1}s",
            self.run_dir.display(),
            self.parameters,
            self.summary.steps,
            self.summary.reason,
            self.seconds
        )?;
        if let Some(v) = &self.summary.last_valid {
            write!(f, ", valid loss {:.4}, token accuracy {:.2}%", v.loss, v.accuracy * 100.0)?;
        }
        if let Some(b) = self.valid_bleu {
            write!(f, ", valid BLEU {b:.2}")?;
        }
        Ok(())
    }
}

fn create_dir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

/// Trains `config` into `run_dir`. Everything is validated and loaded
/// before the directory is touched.
pub fn train_run(config: &RunConfig, run_dir: &Path, resume: bool) -> Result<TrainOutcome> {
    let ckpt_dir = run_dir.join("checkpoints");
    let last = ckpt_dir.join("last.ckpt");
    if resume && !last.exists() {
        return Err(Error::Config(format!("nothing to resume: {} does not exist", last.display())));
    }
    if !resume && run_dir.join("config.toml").exists() {
        return Err(Error::Config(format!(
            "{} already holds a run; pass --resume or choose another --run-dir",
            run_dir.display()
        )));
    }
    let prepared = prepare_data(config)?;
    let mut config = config.clone();
    config.model.src_vocab = prepared.src_vocab.len();
    config.model.tgt_vocab = prepared.tgt_vocab.len();
    config.validate()?;

    let mut trainer = if resume {
        let ck = Checkpoint::load(&last)?;
        if ck.model_config()? != config.model {
            return Err(Error::Config("model settings differ from the checkpoint being resumed".into()));
        }
        Trainer::from_checkpoint(&ck, Some(config.train.clone()))?
    } else {
        Trainer::new(Dpn::new(config.model.clone(), config.seed)?, config.train.clone())?
    };
    let to_json = |v: &Vocabulary| serde_json::to_value(v).expect("vocabulary serializes");
    trainer.header.insert("src_vocab".into(), to_json(&prepared.src_vocab));
    trainer.header.insert("tgt_vocab".into(), to_json(&prepared.tgt_vocab));
    trainer.header.insert("decode".into(), serde_json::to_value(&config.decode).expect("decode config serializes"));
    trainer.header.insert("data".into(), serde_json::to_value(&config.data).expect("data config serializes"));

    create_dir(&ckpt_dir)?;
    create_dir(&run_dir.join("outputs"))?;
    let snapshot = run_dir.join("config.toml");
    fs::write(&snapshot, config.to_toml()).map_err(|e| Error::io(&snapshot, e))?;
    let log_path = run_dir.join("train.log");
    let log_file = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&log_path)
        .map_err(|e| Error::io(&log_path, e))?;
    let mut jsonl = jsonl_sink(BufWriter::new(log_file));
    let mut sink = |r: &LogRecord| {
        match r {
            LogRecord::Train { step, loss, lr, tokens_per_sec, .. } => {
                log::info!("step {step} loss {loss:.4} lr {lr} {tokens_per_sec:.0} tok/s")
            }
            LogRecord::Valid { step, loss, accuracy, lr, .. } => {
                log::info!("valid @{step} loss {loss:.4} accuracy {:.2}% lr {lr}", accuracy * 100.0)
            }
        }
        jsonl(r)
    };

    let start = Instant::now();
    let parameters = trainer.model.params.num_scalars();
    let summary = trainer.run(&prepared.train, &prepared.valid, &mut sink, Some(&ckpt_dir))?;
    let seconds = start.elapsed().as_secs_f64();

    let valid_bleu = if prepared.valid.is_empty() {
        None
    } else {
        let best = ckpt_dir.join("best.ckpt");
        let model = if best.exists() {
            Dpn::from_checkpoint(&Checkpoint::load(&best)?)?
        } else {
            trainer.model.clone()
        };
        let cap = 500.min(prepared.valid.len());
        let detok = |v: &Vocabulary, ids: &[usize]| v.decode(ids);
        let mut hyps = Vec::with_capacity(cap);
        let mut refs = Vec::with_capacity(cap);
        for p in &prepared.valid[..cap] {
            let h = beam_search(&model, &p.src, &config.decode)?;
            hyps.push(detok(&prepared.tgt_vocab, h.output())?);
            refs.push(detok(&prepared.tgt_vocab, &p.tgt)?);
        }
        let out = run_dir.join("outputs");
        let join = |v: &[String]| v.iter().map(|s| format!("{s}\n")).collect::<String>();
        fs::write(out.join("valid.hyp"), join(&hyps)).map_err(|e| Error::io(out.join("valid.hyp"), e))?;
        fs::write(out.join("valid.ref"), join(&refs)).map_err(|e| Error::io(out.join("valid.ref"), e))?;
        Some(eval::bleu(&hyps, &refs, 4)?.score)
    };
    Ok(TrainOutcome {
        run_dir: run_dir.to_path_buf(),
        parameters,
        summary,
        seconds,
        valid_bleu,
    })
}

/// Writes `alignments.txt` and `entropy.txt` into `out_dir` and returns
/// the report.
pub fn analyze(
    checkpoint: &Path,
    src: Option<&Path>,
    tgt: Option<&Path>,
    pairs: usize,
    out_dir: &Path,
) -> Result<eval::EntropyReport> {
    let ck = Checkpoint::load(checkpoint)?;
    let (model, src_vocab, tgt_vocab) = load_for_inference(&ck)?;
    let corpus = match (src, tgt) {
        (Some(s), Some(t)) => data::load_parallel(s, t, &src_vocab, &tgt_vocab, model.config().max_len - 1)?.0,
        (None, None) => {
            let d: DataConfig = header_value(&ck, "data")?.ok_or_else(|| Error::Config("pass --src and --tgt".into()))?;
            let task = d.task.ok_or_else(|| Error::Config("the run used a corpus; pass --src and --tgt".into()))?;
            synthetic_pairs(task, pairs, d.symbols, d.min_len..=d.max_len, d.seed.wrapping_add(2))?
        }
        _ => return Err(Error::Config("--src and --tgt must be given together".into())),
    };
    let corpus: Vec<Pair> = corpus.into_iter().filter(|p| !p.src.is_empty()).collect();
    let records = eval::collect_alignments(&model, &corpus, &src_vocab, &tgt_vocab)?;
    let report = eval::entropy_report(&records)?;
    let c = model.config();
    if !(c.enc_cnn && c.enc_san && c.dec_cnn && c.dec_san) {
        log::warn!("model lacks some paths; the report covers only the available flows");
    }
    create_dir(out_dir)?;
    eval::write_dump(&records, &out_dir.join("alignments.txt"))?;
    let report_path = out_dir.join("entropy.txt");
    fs::write(&report_path, format!("{report}\n")).map_err(|e| Error::io(&report_path, e))?;
    Ok(report)
}

/// Trains each configuration in `<run_dir>/<id>` and returns a
/// tab-separated summary (also written to `<run_dir>/ablation.tsv`).
pub fn ablate(config: &RunConfig, ids: &[Ablation], run_dir: &Path) -> Result<String> {
    let mut configs = Vec::new();
    for &id in ids {
        let mut c = config.clone();
        c.ablation = Some(id);
        c.model = id.apply(&config.model);
        c.validate()?;
        configs.push((id, c));
    }
    let mut table = String::from("config\tparameters\tsteps\tstop\tvalid_loss\tvalid_accuracy\tvalid_bleu\tseconds\n");
    for (id, c) in &configs {
        let dir = run_dir.join(id.to_string());
        let o = train_run(c, &dir, false)?;
        let v = o.summary.last_valid;
        table.push_str(&format!(
            "{id}\t{}\t{}\t{}\t{}\t{}\t{}\t{:.1}\n",
            o.parameters,
            o.summary.steps,
            stop_name(o.summary.reason),
            v.map_or("-".into(), |v| format!("{:.4}", v.loss)),
            v.map_or("-".into(), |v| format!("{:.4}", v.accuracy)),
            o.valid_bleu.map_or("-".into(), |b| format!("{b:.2}")),
            o.seconds
        ));
        log::info!("{o}");
    }
    let path = run_dir.join("ablation.tsv");
    fs::write(&path, &table).map_err(|e| Error::io(&path, e))?;
    Ok(table)
}

fn stop_name(r: StopReason) -> &'static str {
    match r {
        StopReason::MaxSteps => "max_steps",
        StopReason::MaxEpochs => "max_epochs",
        StopReason::TargetAccuracy => "target_accuracy",
        StopReason::MinLr => "min_lr",
    }
}
