//! Run configuration: TOML file, preset defaults and `--set` overrides.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::data::{TokenMode, Task};
use crate::error::{Error, Result};
use crate::infer::BeamConfig;
use crate::model::{Ablation, ModelConfig};
use crate::train::TrainConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    #[default]
    Tiny,
    Iwslt,
    Nist,
}

impl Preset {
    pub fn model(self) -> ModelConfig {
        match self {
            Preset::Tiny => ModelConfig::tiny(24, 24),
            Preset::Iwslt => ModelConfig::iwslt(),
            Preset::Nist => ModelConfig::nist(),
        }
    }

    pub fn train(self) -> TrainConfig {
        match self {
            Preset::Tiny => TrainConfig {
                lr: 0.25,
                momentum: 0.9,
                clip: Some(0.1),
                max_tokens: 800,
                max_steps: Some(5000),
                validate_every: Some(250),
                target_accuracy: Some(0.99),
                log_every: 50,
                ..TrainConfig::default()
            },
            Preset::Iwslt => TrainConfig::default(),
            Preset::Nist => TrainConfig {
                lr: 0.5,
                ..TrainConfig::default()
            },
        }
    }

    pub fn data(self) -> DataConfig {
        match self {
            Preset::Tiny => DataConfig {
                task: Some(Task::Copy),
                ..DataConfig::default()
            },
            Preset::Iwslt => DataConfig {
                max_len: 175,
                src_vocab_size: 10_000,
                tgt_vocab_size: 10_000,
                ..DataConfig::default()
            },
            Preset::Nist => DataConfig {
                max_len: 175,
                src_vocab_size: 37_000,
                tgt_vocab_size: 25_000,
                ..DataConfig::default()
            },
        }
    }

    pub fn decode(self) -> BeamConfig {
        match self {
            Preset::Tiny => BeamConfig {
                beam: 5,
                max_len: 40,
                ..BeamConfig::default()
            },
            Preset::Iwslt => BeamConfig {
                beam: 5,
                ..BeamConfig::default()
            },
            Preset::Nist => BeamConfig {
                beam: 10,
                ..BeamConfig::default()
            },
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Preset::Tiny => "tiny",
            Preset::Iwslt => "iwslt",
            Preset::Nist => "nist",
        })
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tiny" => Ok(Preset::Tiny),
            "iwslt" => Ok(Preset::Iwslt),
            "nist" => Ok(Preset::Nist),
            _ => Err(Error::Config(format!("unknown preset `{s}` (tiny|iwslt|nist)"))),
        }
    }
}

/// Where the sentence pairs come from: a synthetic task or parallel files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub task: Option<Task>,
    /// Alphabet size of the synthetic task.
    pub symbols: usize,
    pub train_pairs: usize,
    pub valid_pairs: usize,
    pub min_len: usize,
    /// Longest sentence kept (tokens, before eos).
    pub max_len: usize,
    pub train_src: Option<PathBuf>,
    pub train_tgt: Option<PathBuf>,
    pub valid_src: Option<PathBuf>,
    pub valid_tgt: Option<PathBuf>,
    pub mode: TokenMode,
    /// Vocabulary sizes, specials included.
    pub src_vocab_size: usize,
    pub tgt_vocab_size: usize,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            task: None,
            symbols: 20,
            train_pairs: 20_000,
            valid_pairs: 200,
            min_len: 1,
            max_len: 20,
            train_src: None,
            train_tgt: None,
            valid_src: None,
            valid_tgt: None,
            mode: TokenMode::Word,
            src_vocab_size: 10_000,
            tgt_vocab_size: 10_000,
            seed: 1,
        }
    }
}

/// Fully resolved settings of one run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub preset: Preset,
    pub ablation: Option<Ablation>,
    /// Seed of parameter initialization.
    pub seed: u64,
    pub model: ModelConfig,
    pub data: DataConfig,
    pub train: TrainConfig,
    pub decode: BeamConfig,
}

/// Top level of a config file before presets are applied.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    preset: Option<Preset>,
    ablation: Option<Ablation>,
    seed: Option<u64>,
    #[serde(default)]
    model: Table,
    #[serde(default)]
    data: Table,
    #[serde(default)]
    train: Table,
    #[serde(default)]
    decode: Table,
}

fn config_err(e: impl fmt::Display) -> Error {
    Error::Config(e.to_string().trim().replace('\n', " "))
}

/// `base` with the keys of `table` replaced; unknown keys are rejected.
fn overlay<T: Serialize + DeserializeOwned>(section: &str, base: &T, table: &Table) -> Result<T> {
    let mut merged = match Value::try_from(base).map_err(config_err)? {
        Value::Table(t) => t,
        _ => unreachable!("config sections serialize to tables"),
    };
    for (k, v) in table {
        merged.insert(k.clone(), v.clone());
    }
    Value::Table(merged)
        .try_into()
        .map_err(|e| Error::Config(format!("[{section}] {}", e.to_string().trim().replace('\n', " "))))
}

/// Parses `section.key=value` (TOML value syntax, bare strings allowed).
pub fn parse_override(s: &str) -> Result<(Vec<String>, Value)> {
    let (key, raw) = s
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{s}` is not of the form key=value")))?;
    let path: Vec<String> = key.trim().split('.').map(str::to_string).collect();
    if path.iter().any(String::is_empty) || path.len() > 2 {
        return Err(Error::Config(format!("bad override key `{key}`")));
    }
    let raw = raw.trim();
    let value = toml::from_str::<Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()));
    Ok((path, value))
}

impl RunConfig {
    /// Resolves a config: preset defaults, then the file, then overrides.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut table = match path {
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                toml::from_str::<Table>(&text).map_err(|e| Error::Config(format!("{}: {}", p.display(), config_err(e))))?
            }
            None => Table::new(),
        };
        for o in overrides {
            let (key, value) = parse_override(o)?;
            match &key[..] {
                [k] => {
                    table.insert(k.clone(), value);
                }
                [section, k] => {
                    let entry = table.entry(section.clone()).or_insert_with(|| Value::Table(Table::new()));
                    match entry {
                        Value::Table(t) => {
                            t.insert(k.clone(), value);
                        }
                        _ => return Err(Error::Config(format!("`{section}` is not a section"))),
                    }
                }
                _ => unreachable!("override keys have one or two parts"),
            }
        }
        Self::from_table(table)
    }

    pub fn from_table(table: Table) -> Result<Self> {
        let raw: RawConfig = Value::Table(table).try_into().map_err(config_err)?;
        let preset = raw.preset.unwrap_or_default();
        let mut model = overlay("model", &preset.model(), &raw.model)?;
        if let Some(a) = raw.ablation {
            model = a.apply(&model);
        }
        let mut preset_data = preset.data();
        if (raw.data.contains_key("train_src") || raw.data.contains_key("train_tgt")) && !raw.data.contains_key("task") {
            // Corpus files replace the preset's synthetic task.
            preset_data.task = None;
        }
        let config = RunConfig {
            preset,
            ablation: raw.ablation,
            seed: raw.seed.unwrap_or(1),
            model,
            data: overlay("data", &preset_data, &raw.data)?,
            train: overlay("train", &preset.train(), &raw.train)?,
            decode: overlay("decode", &preset.decode(), &raw.decode)?,
        };
        config.validate_settings()?;
        Ok(config)
    }

    /// Full check, including that a data source is configured.
    pub fn validate(&self) -> Result<()> {
        let d = &self.data;
        let corpus = d.train_src.is_some() || d.train_tgt.is_some();
        match (d.task, corpus) {
            (Some(_), true) => return Err(Error::Config("[data] set either `task` or corpus files, not both".into())),
            (None, false) => return Err(Error::Config("[data] needs a synthetic `task` or `train_src`/`train_tgt`".into())),
            (None, true) if d.train_src.is_none() || d.train_tgt.is_none() => {
                return Err(Error::Config("[data] `train_src` and `train_tgt` must be given together".into()))
            }
            _ => {}
        }
        if d.valid_src.is_some() != d.valid_tgt.is_some() {
            return Err(Error::Config("[data] `valid_src` and `valid_tgt` must be given together".into()));
        }
        self.validate_settings()
    }

    /// Checks everything except the data source, which `count-params`
    /// does not need.
    pub fn validate_settings(&self) -> Result<()> {
        self.model.validate()?;
        let d = &self.data;
        if d.task.is_some() && (d.symbols < 2 || d.min_len == 0 || d.min_len > d.max_len) {
            return Err(Error::Config("[data] synthetic tasks need symbols >= 2 and 1 <= min_len <= max_len".into()));
        }
        if d.max_len + 1 > self.model.max_len {
            return Err(Error::Config(format!(
                "[data] max_len {} needs a model max_len of at least {}",
                d.max_len,
                d.max_len + 1
            )));
        }
        if self.decode.beam == 0 || self.decode.min_len >= self.decode.max_len {
            return Err(Error::Config("[decode] needs beam >= 1 and min_len < max_len".into()));
        }
        if self.train.max_tokens == 0 {
            return Err(Error::Config("[train] max_tokens must be positive".into()));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }
}
