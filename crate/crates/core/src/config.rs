//! Flat `key = value` run configuration. Later sources override earlier
//! ones: file, then each command-line `key=value` in order.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use thiserror::Error;

use crate::head::{ContextMode, TrainConfig};
use crate::ncc::NccTrainConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`, got `{text}`")]
    Syntax { line: usize, text: String },
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("bad value `{value}` for `{key}`: {reason}")]
    BadValue { key: String, value: String, reason: String },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunConfig {
    entries: BTreeMap<String, String>,
}

impl RunConfig {
    /// `#` starts a comment; blank lines are ignored.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut c = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            c.set_pair(line).map_err(|_| ConfigError::Syntax {
                line: i + 1,
                text: raw.to_string(),
            })?;
        }
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse(&text)
    }

    /// Applies one `key=value` override.
    pub fn set_pair(&mut self, pair: &str) -> Result<(), ConfigError> {
        let (k, v) = pair.split_once('=').ok_or_else(|| ConfigError::Syntax {
            line: 0,
            text: pair.to_string(),
        })?;
        let k = k.trim();
        if k.is_empty() {
            return Err(ConfigError::Syntax {
                line: 0,
                text: pair.to_string(),
            });
        }
        self.entries.insert(canonical(k).to_string(), v.trim().to_string());
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(canonical(key)).map(String::as_str)
    }

    pub fn entries(&self) -> &BTreeMap<String, String> {
        &self.entries
    }

    /// Canonical `key = value` text, sorted by key.
    pub fn to_text(&self) -> String {
        self.entries.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// Fails on keys neither config type knows.
    pub fn check_known(&self) -> Result<(), ConfigError> {
        match self.entries.keys().find(|k| !TRAIN_KEYS.contains(&k.as_str()) && !NCC_KEYS.contains(&k.as_str())) {
            Some(k) => Err(ConfigError::UnknownKey(k.clone())),
            None => Ok(()),
        }
    }

    pub fn apply_train(&self, cfg: &mut TrainConfig) -> Result<(), ConfigError> {
        for (k, v) in &self.entries {
            match k.as_str() {
                "learning_rate" => cfg.learning_rate = num(k, v)?,
                "momentum" => cfg.momentum = num(k, v)?,
                "weight_decay" => cfg.weight_decay = num(k, v)?,
                "decay_milestones" => {
                    cfg.decay_milestones = v
                        .split(',')
                        .filter(|s| !s.trim().is_empty())
                        .map(|s| fraction(k, s.trim()))
                        .collect::<Result<_, _>>()?
                }
                "decay_factor" => cfg.decay_factor = num(k, v)?,
                "epochs" => cfg.epochs = num(k, v)?,
                "total_steps" => cfg.total_steps = optional(k, v)?,
                "batch_images" => cfg.batch_images = num(k, v)?,
                "sigma" => cfg.sigma = num(k, v)?,
                "seed" => cfg.seed = num(k, v)?,
                "log_every" => cfg.log_every = num(k, v)?,
                "max_contexts" => cfg.max_contexts = optional(k, v)?,
                "workers" => cfg.workers = num(k, v)?,
                "allow_context_variant" => cfg.allow_context_variant = num(k, v)?,
                "detach_attention" => cfg.options.detach_attention = num(k, v)?,
                "renormalize" => cfg.options.renormalize = num(k, v)?,
                "mode" => {
                    cfg.options.mode = match v.as_str() {
                        "intervention" | "do" => ContextMode::Intervention,
                        "correlation" => ContextMode::Correlation,
                        _ => return Err(bad(k, v, "expected intervention or correlation")),
                    }
                }
                _ if NCC_KEYS.contains(&k.as_str()) => {}
                _ => return Err(ConfigError::UnknownKey(k.clone())),
            }
        }
        Ok(())
    }

    pub fn apply_ncc(&self, cfg: &mut NccTrainConfig) -> Result<(), ConfigError> {
        for (k, v) in &self.entries {
            match k.as_str() {
                "ncc_hidden" => cfg.hidden = num(k, v)?,
                "ncc_samples" => cfg.samples = num(k, v)?,
                "ncc_sequence_len" => cfg.sequence_len = num(k, v)?,
                "ncc_epochs" => cfg.epochs = num(k, v)?,
                "ncc_batch" => cfg.batch = num(k, v)?,
                "ncc_learning_rate" => cfg.learning_rate = num(k, v)?,
                "ncc_momentum" => cfg.momentum = num(k, v)?,
                "seed" => cfg.seed = num(k, v)?,
                _ if TRAIN_KEYS.contains(&k.as_str()) => {}
                _ => return Err(ConfigError::UnknownKey(k.clone())),
            }
        }
        Ok(())
    }
}

const TRAIN_KEYS: &[&str] = &[
    "learning_rate",
    "momentum",
    "weight_decay",
    "decay_milestones",
    "decay_factor",
    "epochs",
    "total_steps",
    "batch_images",
    "sigma",
    "seed",
    "log_every",
    "max_contexts",
    "workers",
    "allow_context_variant",
    "detach_attention",
    "renormalize",
    "mode",
];

const NCC_KEYS: &[&str] = &[
    "ncc_hidden",
    "ncc_samples",
    "ncc_sequence_len",
    "ncc_epochs",
    "ncc_batch",
    "ncc_learning_rate",
    "ncc_momentum",
];

fn canonical(key: &str) -> &str {
    match key {
        "lr" => "learning_rate",
        "wd" => "weight_decay",
        "milestones" => "decay_milestones",
        "batch" => "batch_images",
        other => other,
    }
}

fn bad(key: &str, value: &str, reason: &str) -> ConfigError {
    ConfigError::BadValue {
        key: key.to_string(),
        value: value.to_string(),
        reason: reason.to_string(),
    }
}

fn num<T: FromStr>(key: &str, value: &str) -> Result<T, ConfigError>
where
    T::Err: std::fmt::Display,
{
    value.parse().map_err(|e: T::Err| bad(key, value, &e.to_string()))
}

fn optional<T: FromStr>(key: &str, value: &str) -> Result<Option<T>, ConfigError>
where
    T::Err: std::fmt::Display,
{
    match value {
        "" | "none" => Ok(None),
        v => num(key, v).map(Some),
    }
}

/// Accepts `0.72` or `160/220`.
fn fraction(key: &str, s: &str) -> Result<f64, ConfigError> {
    match s.split_once('/') {
        Some((a, b)) => Ok(num::<f64>(key, a.trim())? / num::<f64>(key, b.trim())?),
        None => num(key, s),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_take_precedence() {
        let mut c = RunConfig::parse("# run\nlr = 0.01\nepochs=3\n\nmilestones = 160/220, 200/220\n").unwrap();
        c.set_pair("lr=0.5").unwrap();
        let mut t = TrainConfig::default();
        c.apply_train(&mut t).unwrap();
        assert_eq!(t.learning_rate, 0.5);
        assert_eq!(t.epochs, 3);
        assert_eq!(t.decay_milestones, TrainConfig::default().decay_milestones);
    }

    #[test]
    fn rejects_garbage() {
        assert!(matches!(RunConfig::parse("lr 0.1"), Err(ConfigError::Syntax { line: 1, .. })));
        let c = RunConfig::parse("colour = blue").unwrap();
        assert!(matches!(c.check_known(), Err(ConfigError::UnknownKey(_))));
        let c = RunConfig::parse("epochs = many").unwrap();
        assert!(c.apply_train(&mut TrainConfig::default()).is_err());
    }

    #[test]
    fn text_round_trip() {
        let c = RunConfig::parse("seed = 4\nmode = correlation\nmax_contexts = none\n").unwrap();
        assert_eq!(RunConfig::parse(&c.to_text()).unwrap(), c);
        let mut t = TrainConfig::default();
        c.apply_train(&mut t).unwrap();
        assert_eq!(t.options.mode, ContextMode::Correlation);
        assert_eq!(t.max_contexts, None);
        assert_eq!(t.seed, 4);
    }
}
