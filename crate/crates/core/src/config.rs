//! Flat `section.key = value` run configuration.
//!
//! Sections are `model`, `train`, `data` and `bench`. Lines starting with
//! `#` and blank lines are ignored. A bare key (no section) is accepted when
//! exactly one section owns it.

use std::collections::BTreeSet;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::bench::BenchConfig;
use crate::corpus::{self, PackedDataset, Tokenizer};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, Variant};
use crate::trainer::TrainConfig;

pub const SECTIONS: [&str; 4] = ["model", "train", "data", "bench"];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenizerKind {
    Bytes,
    Gpt2,
}

impl TokenizerKind {
    pub fn name(self) -> &'static str {
        match self {
            TokenizerKind::Bytes => "bytes",
            TokenizerKind::Gpt2 => "gpt2",
        }
    }
}

impl FromStr for TokenizerKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "bytes" | "byte" => Ok(TokenizerKind::Bytes),
            "gpt2" | "bpe" => Ok(TokenizerKind::Gpt2),
            other => Err(Error::Config(format!(
                "unknown tokenizer {other:?} (expected bytes or gpt2)"
            ))),
        }
    }
}

/// Where text comes from and how it is tokenized.
#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub train: Option<PathBuf>,
    pub valid: Option<PathBuf>,
    pub tokenizer: TokenizerKind,
    pub vocab: Option<PathBuf>,
    pub merges: Option<PathBuf>,
    /// Directory holding `train.tok` / `valid.tok` caches.
    pub cache_dir: Option<PathBuf>,
    /// Size of the built-in synthetic corpus used when no train file is set.
    pub synthetic_bytes: usize,
    /// Fraction of the synthetic corpus held out for validation.
    pub synthetic_valid_fraction: f64,
    pub synthetic_seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            train: None,
            valid: None,
            tokenizer: TokenizerKind::Bytes,
            vocab: None,
            merges: None,
            cache_dir: None,
            synthetic_bytes: 100_000,
            synthetic_valid_fraction: 0.1,
            synthetic_seed: 1,
        }
    }
}

fn opt_path(p: &Option<PathBuf>) -> String {
    p.as_ref()
        .map(|p| p.display().to_string())
        .unwrap_or_default()
}

fn parse_path(v: &str) -> Option<PathBuf> {
    let v = v.trim();
    (!v.is_empty()).then(|| PathBuf::from(v))
}

impl DataConfig {
    pub const KEYS: &'static [&'static str] = &[
        "train",
        "valid",
        "tokenizer",
        "vocab",
        "merges",
        "cache_dir",
        "synthetic_bytes",
        "synthetic_valid_fraction",
        "synthetic_seed",
    ];

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let bad = |what: &str| Error::Config(format!("data.{key}: expected {what}, got {value:?}"));
        match key {
            "train" => self.train = parse_path(value),
            "valid" => self.valid = parse_path(value),
            "tokenizer" => self.tokenizer = value.parse()?,
            "vocab" => self.vocab = parse_path(value),
            "merges" => self.merges = parse_path(value),
            "cache_dir" => self.cache_dir = parse_path(value),
            "synthetic_bytes" => {
                self.synthetic_bytes = value.trim().parse().map_err(|_| bad("an integer"))?
            }
            "synthetic_valid_fraction" => {
                let f: f64 = value.trim().parse().map_err(|_| bad("a number"))?;
                if !(0.0 < f && f < 1.0) {
                    return Err(bad("a fraction in (0, 1)"));
                }
                self.synthetic_valid_fraction = f;
            }
            "synthetic_seed" => {
                self.synthetic_seed = value.trim().parse().map_err(|_| bad("an integer"))?
            }
            _ => return Err(Error::Config(format!("unknown data key {key:?}"))),
        }
        Ok(())
    }

    pub fn pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("train", opt_path(&self.train)),
            ("valid", opt_path(&self.valid)),
            ("tokenizer", self.tokenizer.name().into()),
            ("vocab", opt_path(&self.vocab)),
            ("merges", opt_path(&self.merges)),
            ("cache_dir", opt_path(&self.cache_dir)),
            ("synthetic_bytes", self.synthetic_bytes.to_string()),
            (
                "synthetic_valid_fraction",
                self.synthetic_valid_fraction.to_string(),
            ),
            ("synthetic_seed", self.synthetic_seed.to_string()),
        ]
    }

    pub fn tokenizer(&self) -> Result<Tokenizer> {
        match self.tokenizer {
            TokenizerKind::Bytes => Ok(corpus::byte_fallback_tokenizer()),
            TokenizerKind::Gpt2 => match (&self.vocab, &self.merges) {
                (Some(v), Some(m)) => corpus::load_bpe(v, m),
                _ => Err(Error::Config(
                    "tokenizer gpt2 needs data.vocab and data.merges".into(),
                )),
            },
        }
    }

    fn cache_path(&self, split: &str) -> Option<PathBuf> {
        self.cache_dir
            .as_ref()
            .map(|d| d.join(format!("{split}.tok")))
    }

    /// Token ids for both splits. Cached ids are used when the cache was
    /// written for the same vocabulary size.
    pub fn token_splits(&self, tok: &Tokenizer) -> Result<(Vec<u32>, Vec<u32>)> {
        if let (Some(tp), Some(vp)) = (self.cache_path("train"), self.cache_path("valid")) {
            if tp.exists() && vp.exists() {
                let (v1, train) = corpus::read_token_cache(&tp)?;
                let (v2, valid) = corpus::read_token_cache(&vp)?;
                if v1 == tok.vocab_size() && v2 == tok.vocab_size() {
                    return Ok((train, valid));
                }
            }
        }
        match (&self.train, &self.valid) {
            (Some(t), Some(v)) => Ok((
                tok.encode(&corpus::load_split(t)?),
                tok.encode(&corpus::load_split(v)?),
            )),
            (None, None) => {
                let ids = tok.encode(&corpus::synthetic_corpus(
                    self.synthetic_bytes,
                    self.synthetic_seed,
                ));
                let cut = ((ids.len() as f64) * (1.0 - self.synthetic_valid_fraction)) as usize;
                Ok((ids[..cut].to_vec(), ids[cut..].to_vec()))
            }
            _ => Err(Error::Config(
                "set both data.train and data.valid, or neither for the synthetic corpus".into(),
            )),
        }
    }

    /// Tokenize and write both caches; returns the token counts.
    pub fn prepare(&self, tok: &Tokenizer) -> Result<(usize, usize)> {
        let (Some(tp), Some(vp)) = (self.cache_path("train"), self.cache_path("valid")) else {
            return Err(Error::Config("prepare needs data.cache_dir".into()));
        };
        let dir = self.cache_dir.as_ref().expect("checked above");
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let uncached = DataConfig {
            cache_dir: None,
            ..self.clone()
        };
        let (train, valid) = uncached.token_splits(tok)?;
        corpus::write_token_cache(&tp, tok.vocab_size(), &train)?;
        corpus::write_token_cache(&vp, tok.vocab_size(), &valid)?;
        Ok((train.len(), valid.len()))
    }
}

/// Everything a command needs, plus the keys the user set explicitly.
#[derive(Debug, Clone, Default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub bench: BenchConfig,
    explicit: BTreeSet<String>,
}

/// Keys owned by one section; empty for an unknown section.
pub fn section_keys(section: &str) -> &'static [&'static str] {
    match section {
        "model" => &ModelConfig::KEYS,
        "train" => &TrainConfig::KEYS,
        "data" => DataConfig::KEYS,
        "bench" => BenchConfig::KEYS,
        _ => &[],
    }
}

impl RunConfig {
    /// Resolve a possibly bare key to `section.key`. Dashes count as
    /// underscores so command-line spellings like `d-model` work.
    pub fn resolve_key(key: &str) -> Result<String> {
        let key = key.trim().replace('-', "_");
        if let Some((section, name)) = key.split_once('.') {
            if !SECTIONS.contains(&section) {
                return Err(Error::Config(format!("unknown config section {section:?}")));
            }
            if !section_keys(section).contains(&name) {
                return Err(Error::Config(format!("unknown {section} key {name:?}")));
            }
            return Ok(key);
        }
        let owners: Vec<&str> = SECTIONS
            .iter()
            .copied()
            .filter(|s| section_keys(s).contains(&key.as_str()))
            .collect();
        match owners.as_slice() {
            [one] => Ok(format!("{one}.{key}")),
            [] => Err(Error::Config(format!("unknown config key {key:?}"))),
            many => Err(Error::Config(format!(
                "ambiguous key {key:?}: use one of {}",
                many.iter()
                    .map(|s| format!("{s}.{key}"))
                    .collect::<Vec<_>>()
                    .join(", ")
            ))),
        }
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let full = Self::resolve_key(key)?;
        let (section, name) = full.split_once('.').expect("resolved keys are dotted");
        match section {
            "model" => self.model.set(name, value)?,
            "train" => self.train.set(name, value)?,
            "data" => self.data.set(name, value)?,
            _ => self.bench.set(name, value)?,
        }
        self.explicit.insert(full);
        Ok(())
    }

    pub fn is_explicit(&self, full_key: &str) -> bool {
        self.explicit.contains(full_key)
    }

    pub fn parse_str(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    /// Apply `key = value` lines on top of the current values.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (no, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(Error::Config(format!(
                    "line {}: expected `key = value`, got {line:?}",
                    no + 1
                )));
            };
            self.set(k.trim(), v.trim())
                .map_err(|e| Error::Config(format!("line {}: {e}", no + 1)))?;
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_str(&text)
    }

    pub fn pairs(&self) -> Vec<(String, String)> {
        let mut out = Vec::new();
        let mut push = |section: &str, pairs: Vec<(&'static str, String)>| {
            out.extend(
                pairs
                    .into_iter()
                    .map(|(k, v)| (format!("{section}.{k}"), v)),
            );
        };
        push("model", self.model.pairs());
        push("train", self.train.pairs());
        push("data", self.data.pairs());
        push("bench", self.bench.pairs());
        out
    }

    /// Match the model vocabulary to the tokenizer. A vocabulary size the
    /// user set explicitly must agree; the default follows the tokenizer.
    pub fn fit_vocab(&mut self, tok: &Tokenizer) -> Result<()> {
        let v = tok.vocab_size();
        if self.model.vocab_size != v {
            if self.is_explicit("model.vocab_size") {
                return Err(Error::Config(format!(
                    "model.vocab_size = {} but the {} tokenizer has {v} ids",
                    self.model.vocab_size,
                    self.data.tokenizer.name()
                )));
            }
            self.model.vocab_size = v;
        }
        Ok(())
    }

    /// A baseline run with the stream count left at its default gets a
    /// single stream; an explicit `n_streams > 1` still fails validation.
    pub fn fit_streams(&mut self) {
        if self.model.variant == Variant::Baseline && !self.is_explicit("model.n_streams") {
            self.model.n_streams = 1;
        }
    }

    /// Keys set explicitly, as `section.key`.
    pub fn explicit_keys(&self) -> impl Iterator<Item = &str> {
        self.explicit.iter().map(String::as_str)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.bench.validate()
    }

    /// Tokenizer plus packed train and validation splits.
    pub fn load_data(&self) -> Result<(Tokenizer, PackedDataset, PackedDataset)> {
        let tok = self.data.tokenizer()?;
        let (train, valid) = self.data.token_splits(&tok)?;
        let t = self.model.max_seq_len;
        Ok((tok, corpus::pack(train, t)?, corpus::pack(valid, t)?))
    }
}

impl fmt::Display for RunConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut last = String::new();
        for (k, v) in self.pairs() {
            let section = k.split('.').next().unwrap_or("");
            if section != last {
                if !last.is_empty() {
                    writeln!(f)?;
                }
                last = section.to_string();
            }
            writeln!(f, "{k} = {v}")?;
        }
        Ok(())
    }
}
