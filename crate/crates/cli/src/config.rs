//! Flat `key = value` run configuration. File values are overridden by
//! `--set key=value` and named flags; unknown keys are rejected.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use mmt_core::trainer::TrainConfig;

use crate::CliError;

/// Every recognized key with its default. Empty means "required when used".
pub const KEYS: &[(&str, &str)] = &[
    ("batch_size", "32"),
    ("lr", "0.001"),
    ("max_epochs", "15"),
    ("patience", "3"),
    ("seeds", "11,22,33,44,55"),
    ("images_per_sentence", "5"),
    ("clip_norm", "5.0"),
    ("max_decode_len", "80"),
    ("emb_dim", "256"),
    ("enc_hidden", "256"),
    ("dec_hidden", "512"),
    ("att_dim", "512"),
    ("readout_dim", "256"),
    ("parallel_seeds", "true"),
    ("min_count", "1"),
    ("feat_rows", "auto"),
    ("feat_cols", "auto"),
    ("shuffle_seed", "0"),
    ("train_src", ""),
    ("train_tgt", ""),
    ("dev_src", ""),
    ("dev_tgt", ""),
    ("test_src", ""),
    ("test_tgt", ""),
    ("train_manifest", ""),
    ("dev_manifest", ""),
    ("test_manifest", ""),
    ("features_dir", ""),
    ("out_dir", ""),
];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Config {
    values: BTreeMap<&'static str, String>,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            values: KEYS.iter().map(|&(k, v)| (k, v.to_owned())).collect(),
        }
    }
}

fn canonical_key(key: &str) -> Option<&'static str> {
    let key = key.trim().replace('-', "_");
    KEYS.iter().map(|&(k, _)| k).find(|k| *k == key)
}

impl Config {
    pub fn parse(text: &str, origin: &str) -> Result<Self, CliError> {
        let mut cfg = Self::default();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                CliError::usage("config", format!("{origin}:{}: expected `key = value`", i + 1))
            })?;
            cfg.set(k, v.trim())
                .map_err(|e| CliError::usage("config", format!("{origin}:{}: {}", i + 1, e.message)))?;
        }
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| CliError::usage("config", format!("{}: {e}", p.display())))?;
                Self::parse(&text, &p.display().to_string())
            }
        }
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        let k = canonical_key(key).ok_or_else(|| CliError::usage("config", format!("unknown key {:?}", key.trim())))?;
        self.values.insert(k, value.to_owned());
        Ok(())
    }

    /// Applies `key=value` overrides.
    pub fn apply_overrides(&mut self, overrides: &[String]) -> Result<(), CliError> {
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| CliError::usage("config", format!("override {o:?} is not key=value")))?;
            self.set(k, v.trim())?;
        }
        Ok(())
    }

    pub fn raw(&self, key: &str) -> &str {
        self.values.get(key).map_or("", String::as_str)
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<T, CliError>
    where
        T::Err: std::fmt::Display,
    {
        let raw = self.raw(key);
        raw.parse()
            .map_err(|e| CliError::usage("config", format!("{key} = {raw:?}: {e}")))
    }

    pub fn path(&self, key: &str) -> Result<PathBuf, CliError> {
        match self.raw(key) {
            "" => Err(CliError::usage("config", format!("{key} is required"))),
            p => Ok(PathBuf::from(p)),
        }
    }

    pub fn seeds(&self) -> Result<Vec<u64>, CliError> {
        parse_list(self.raw("seeds")).map_err(|e| CliError::usage("config", format!("seeds: {e}")))
    }

    pub fn train_config(&self) -> Result<TrainConfig, CliError> {
        let cfg = TrainConfig {
            batch_size: self.get("batch_size")?,
            lr: self.get("lr")?,
            max_epochs: self.get("max_epochs")?,
            patience: self.get("patience")?,
            seeds: self.seeds()?,
            images_per_sentence: self.get("images_per_sentence")?,
            clip_norm: self.get("clip_norm")?,
            max_decode_len: self.get("max_decode_len")?,
            emb_dim: self.get("emb_dim")?,
            enc_hidden: self.get("enc_hidden")?,
            dec_hidden: self.get("dec_hidden")?,
            att_dim: self.get("att_dim")?,
            readout_dim: self.get("readout_dim")?,
            parallel_seeds: self.get("parallel_seeds")?,
        };
        cfg.validate().map_err(|e| CliError::usage("config", e.to_string()))?;
        Ok(cfg)
    }

    /// The fully resolved configuration in file syntax.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.values {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    pub fn log_resolved(&self, command: &str) {
        for (k, v) in &self.values {
            log::info!("{command}: config {k} = {v}");
        }
    }
}

/// Comma-separated values; `a..b` expands to the inclusive range.
pub fn parse_list(s: &str) -> Result<Vec<u64>, String> {
    let mut out = Vec::new();
    for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        if let Some((a, b)) = part.split_once("..") {
            let a: u64 = a.trim().parse().map_err(|e| format!("{part:?}: {e}"))?;
            let b: u64 = b.trim().parse().map_err(|e| format!("{part:?}: {e}"))?;
            if b < a {
                return Err(format!("empty range {part:?}"));
            }
            out.extend(a..=b);
        } else {
            out.push(part.parse().map_err(|e| format!("{part:?}: {e}"))?);
        }
    }
    if out.is_empty() {
        return Err("empty list".into());
    }
    Ok(out)
}
