//! Plain-text key-value run configuration: `key = value` lines, `#`
//! comments. Unknown keys are fatal so a misspelled option can never fall
//! back to a silent default.

use std::collections::BTreeMap;
use std::path::Path;

use crate::attack::AttackConfig;
use crate::data::{PatternFamily, SynthSpec};
use crate::encoder::{ContextMode, EncoderConfig};
use crate::objectives::{AblationMask, AlphaMode, Method};
use crate::pretrain::PretrainConfig;
use crate::trainer::{Shots, TrainConfig};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {0}: expected 'key = value', got '{1}'")]
    Syntax(usize, String),
    #[error("unknown config key '{0}'")]
    UnknownKey(String),
    #[error("duplicate config key '{0}'")]
    DuplicateKey(String),
    #[error("invalid value for '{key}': {detail}")]
    BadValue { key: String, detail: String },
}

pub type Result<T> = std::result::Result<T, ConfigError>;

/// Parsed key-value pairs, consumed key by key; leftovers are errors.
pub struct KvFile {
    entries: BTreeMap<String, String>,
}

impl KvFile {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(ConfigError::Syntax(lineno + 1, raw.to_string()));
            };
            let key = key.trim().to_string();
            let value = value.trim().to_string();
            if key.is_empty() || value.is_empty() {
                return Err(ConfigError::Syntax(lineno + 1, raw.to_string()));
            }
            if entries.insert(key.clone(), value).is_some() {
                return Err(ConfigError::DuplicateKey(key));
            }
        }
        Ok(Self { entries })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    fn take(&mut self, key: &str) -> Option<String> {
        self.entries.remove(key)
    }

    fn take_parsed<T: std::str::FromStr>(&mut self, key: &str) -> Result<Option<T>> {
        match self.take(key) {
            None => Ok(None),
            Some(v) => v.parse().map(Some).map_err(|_| ConfigError::BadValue {
                key: key.to_string(),
                detail: format!("cannot parse '{v}'"),
            }),
        }
    }

    /// Every key must have been consumed; anything left is unknown.
    pub fn finish(self) -> Result<()> {
        if let Some(key) = self.entries.into_keys().next() {
            return Err(ConfigError::UnknownKey(key));
        }
        Ok(())
    }
}

macro_rules! set_if {
    ($kv:expr, $key:expr, $target:expr) => {
        if let Some(v) = $kv.take_parsed($key)? {
            $target = v;
        }
    };
}

/// Dataset generation spec from a config file, starting from defaults.
pub fn synth_spec_from_file(path: &Path) -> Result<SynthSpec> {
    let mut kv = KvFile::load(path)?;
    let mut spec = SynthSpec::default();
    set_if!(kv, "num_classes", spec.num_classes);
    set_if!(kv, "image_size", spec.image_size);
    set_if!(kv, "channels", spec.channels);
    set_if!(kv, "train_per_class", spec.train_per_class);
    set_if!(kv, "test_per_class", spec.test_per_class);
    set_if!(kv, "noise_std", spec.noise_std);
    set_if!(kv, "seed", spec.seed);
    if let Some(v) = kv.take("families") {
        let families: std::result::Result<Vec<PatternFamily>, _> =
            v.split(',').map(|s| PatternFamily::parse(s.trim())).collect();
        spec.families = families.map_err(|e| ConfigError::BadValue {
            key: "families".into(),
            detail: e.to_string(),
        })?;
    } else if spec.families.len() != spec.num_classes {
        spec.families =
            (0..spec.num_classes).map(|c| PatternFamily::ALL[c % PatternFamily::ALL.len()]).collect();
    }
    kv.finish()?;
    Ok(spec)
}

fn encoder_from_kv(kv: &mut KvFile) -> Result<EncoderConfig> {
    let mut enc = EncoderConfig::default();
    set_if!(kv, "image_size", enc.image_size);
    set_if!(kv, "patch_size", enc.patch_size);
    set_if!(kv, "channels", enc.channels);
    set_if!(kv, "embed_dim", enc.embed_dim);
    set_if!(kv, "num_layers", enc.num_layers);
    set_if!(kv, "num_heads", enc.num_heads);
    set_if!(kv, "text_vocab_size", enc.text_vocab_size);
    set_if!(kv, "text_seq_len", enc.text_seq_len);
    set_if!(kv, "prompt_depth", enc.prompt_depth);
    set_if!(kv, "prompt_len", enc.prompt_len);
    set_if!(kv, "context_len", enc.text_context_len);
    if let Some(v) = kv.take("context_mode") {
        enc.context_mode = match v.as_str() {
            "unified" => ContextMode::Unified,
            "class-specific" => ContextMode::ClassSpecific,
            other => {
                return Err(ConfigError::BadValue {
                    key: "context_mode".into(),
                    detail: format!("unknown mode '{other}'"),
                })
            }
        };
    }
    Ok(enc)
}

/// Pretraining configuration from a config file.
pub fn pretrain_from_file(path: &Path) -> Result<PretrainConfig> {
    let mut kv = KvFile::load(path)?;
    let mut cfg = PretrainConfig::default();
    cfg.encoder = encoder_from_kv(&mut kv)?;
    set_if!(kv, "epochs", cfg.epochs);
    set_if!(kv, "lr", cfg.lr);
    set_if!(kv, "momentum", cfg.momentum);
    set_if!(kv, "tau", cfg.tau);
    set_if!(kv, "seed", cfg.seed);
    kv.finish()?;
    Ok(cfg)
}

fn attack_from_kv(kv: &mut KvFile, prefix: &str, base: &mut AttackConfig) -> Result<()> {
    let key = |s: &str| format!("{prefix}{s}");
    if let Some(v) = kv.take_parsed::<f64>(&key("eps"))? {
        // Step size defaults track epsilon unless overridden.
        *base = if prefix.is_empty() { AttackConfig::train(v) } else { AttackConfig::eval(v) };
    }
    set_if!(kv, &key("attack_steps"), base.steps);
    set_if!(kv, &key("attack_step_size"), base.step_size);
    set_if!(kv, &key("random_start"), base.random_start);
    set_if!(kv, &key("init_zero"), base.init_zero);
    Ok(())
}

/// Tuning configuration from a config file.
pub fn train_from_file(path: &Path) -> Result<TrainConfig> {
    let mut kv = KvFile::load(path)?;
    let mut cfg = TrainConfig::default();
    set_if!(kv, "epochs", cfg.epochs);
    set_if!(kv, "batch_size", cfg.batch_size);
    set_if!(kv, "lr0", cfg.lr0);
    set_if!(kv, "momentum", cfg.momentum);
    set_if!(kv, "warmup_epochs", cfg.warmup_epochs);
    set_if!(kv, "seed", cfg.seed);
    set_if!(kv, "avp_border", cfg.avp_border);
    set_if!(kv, "val_robust_cap", cfg.val_robust_cap);
    if let Some(v) = kv.take("shots") {
        cfg.shots = Shots::parse(&v).ok_or_else(|| ConfigError::BadValue {
            key: "shots".into(),
            detail: format!("expected a count or 'all', got '{v}'"),
        })?;
    }
    attack_from_kv(&mut kv, "", &mut cfg.attack)?;
    set_if!(kv, "lambda", cfg.objective.lambda);
    if let Some(v) = kv.take("method") {
        cfg.objective.method = Method::parse(&v).ok_or_else(|| ConfigError::BadValue {
            key: "method".into(),
            detail: format!("unknown method '{v}'"),
        })?;
    }
    if let Some(v) = kv.take("ablation_mask") {
        cfg.objective.ablation_mask =
            AblationMask::parse(&v).ok_or_else(|| ConfigError::BadValue {
                key: "ablation_mask".into(),
                detail: format!("unknown mask '{v}'"),
            })?;
    }
    if let Some(v) = kv.take("alpha") {
        cfg.objective.alpha_mode = if v == "adaptive" {
            AlphaMode::Adaptive
        } else {
            AlphaMode::Fixed(v.parse().map_err(|_| ConfigError::BadValue {
                key: "alpha".into(),
                detail: format!("expected 'adaptive' or a number, got '{v}'"),
            })?)
        };
    }
    kv.finish()?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_values_comments_and_blank_lines() {
        let kv = KvFile::parse("# comment\n\nepochs = 5\nlr0 = 0.001 # inline\n").unwrap();
        assert_eq!(kv.entries.len(), 2);
    }

    #[test]
    fn misspelled_keys_are_fatal() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("train.cfg");
        std::fs::write(&path, "epochz = 5\n").unwrap();
        match train_from_file(&path) {
            Err(ConfigError::UnknownKey(k)) => assert_eq!(k, "epochz"),
            other => panic!("expected unknown-key error, got {other:?}"),
        }
    }

    #[test]
    fn duplicate_and_malformed_lines_are_fatal() {
        assert!(matches!(
            KvFile::parse("a = 1\na = 2\n"),
            Err(ConfigError::DuplicateKey(_))
        ));
        assert!(matches!(KvFile::parse("just some words\n"), Err(ConfigError::Syntax(1, _))));
    }

    #[test]
    fn train_config_round_trips_paper_flags() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("train.cfg");
        std::fs::write(
            &path,
            "epochs = 7\nlambda = 3.5\nmethod = apt-csc\nshots = all\neps = 0.0157\nattack_steps = 5\nalpha = 0.25\n",
        )
        .unwrap();
        let cfg = train_from_file(&path).unwrap();
        assert_eq!(cfg.epochs, 7);
        assert_eq!(cfg.objective.lambda, 3.5);
        assert_eq!(cfg.objective.method, Method::AptCsc);
        assert_eq!(cfg.shots, Shots::All);
        assert_eq!(cfg.attack.steps, 5);
        assert_eq!(cfg.attack.epsilon, 0.0157);
        assert_eq!(cfg.objective.alpha_mode, AlphaMode::Fixed(0.25));
    }

    #[test]
    fn synth_spec_families_follow_class_count() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.cfg");
        std::fs::write(&path, "num_classes = 6\nseed = 9\n").unwrap();
        let spec = synth_spec_from_file(&path).unwrap();
        assert_eq!(spec.num_classes, 6);
        assert_eq!(spec.families.len(), 6);
        assert!(spec.validate().is_ok());
    }
}
