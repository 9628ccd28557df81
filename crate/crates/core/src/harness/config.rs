//! Flat key=value experiment configuration.
//!
//! The file format is one `key = value` pair per line with `#` comments.
//! Unknown keys are errors, and every value is validated against the
//! preconditions of the module it feeds before a run starts.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synthcorpus::CorpusSpec;

/// Environment variable providing the default output root.
pub const OUT_ROOT_ENV: &str = "PVLAB_OUT_ROOT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub epochs: u64,
    /// Window length per training step (timesteps, contiguous).
    pub batch: usize,
    pub steps_per_epoch: usize,
    pub lr: f64,

    // prototype banks
    pub k: usize,
    pub tau: f64,
    pub refit_period: u64,

    // feature adapters feeding the banks
    pub embed_dim: usize,
    pub enc_hidden: usize,

    // alignment
    pub lambda_neg: f64,
    pub disc_hidden: usize,
    pub freeze_raw_estimator: bool,

    // routing
    pub s: usize,
    pub m: usize,
    pub beta: f64,
    pub lambda_util: f64,
    pub lambda_ent: f64,
    pub flip_entropy_sign: bool,
    pub expert_hidden: usize,
    pub expert_out: usize,

    // generation
    pub decoder_hidden: usize,
    pub lambda_1: f64,
    pub lambda_p: f64,
    pub lambda_t: f64,
    pub lambda_task: f64,

    // ablations
    pub disable_moe: bool,
    pub disable_pv_align: bool,
    pub disable_phoneme_guidance: bool,

    // corpus generation
    pub k_true: usize,
    pub d_p: usize,
    pub d_v: usize,
    pub sigma_p: f64,
    pub sigma_v: f64,
    pub languages: usize,
    pub utterances_per_language: usize,
    pub utterance_len: usize,
    pub unseen_languages: usize,

    // locations
    pub corpus_dir: PathBuf,
    pub out_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let root = std::env::var(OUT_ROOT_ENV).unwrap_or_else(|_| "out".to_string());
        ExperimentConfig {
            seed: 0,
            epochs: 80,
            batch: 32,
            steps_per_epoch: 75,
            lr: 0.01,
            k: 8,
            tau: 2.0,
            refit_period: 10,
            embed_dim: 8,
            enc_hidden: 24,
            lambda_neg: 0.05,
            disc_hidden: 32,
            freeze_raw_estimator: false,
            s: 2,
            m: 4,
            beta: 0.5,
            lambda_util: 0.01,
            lambda_ent: 0.001,
            flip_entropy_sign: false,
            expert_hidden: 16,
            expert_out: 16,
            decoder_hidden: 32,
            lambda_1: 1.0,
            lambda_p: 0.1,
            lambda_t: 0.5,
            lambda_task: 1.0,
            disable_moe: false,
            disable_pv_align: false,
            disable_phoneme_guidance: false,
            k_true: 8,
            d_p: 16,
            d_v: 12,
            sigma_p: 0.5,
            sigma_v: 0.5,
            languages: 5,
            utterances_per_language: 200,
            utterance_len: 50,
            unseen_languages: 1,
            corpus_dir: PathBuf::from(&root).join("corpus"),
            out_dir: PathBuf::from(&root).join("run"),
        }
    }
}

impl ExperimentConfig {
    pub fn corpus_spec(&self) -> CorpusSpec {
        CorpusSpec {
            k_true: self.k_true,
            d_p: self.d_p,
            d_v: self.d_v,
            sigma_p: self.sigma_p,
            sigma_v: self.sigma_v,
            languages: self.languages,
            utterances_per_language: self.utterances_per_language,
            utterance_len: self.utterance_len,
            unseen_languages: self.unseen_languages,
            seed: self.seed,
        }
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Parse {
            path: path.display().to_string(),
            detail: e.to_string(),
        })?;
        Self::parse_str(&text).map_err(|e| match e {
            Error::Config(detail) => Error::Parse {
                path: path.display().to_string(),
                detail,
            },
            other => other,
        })
    }

    pub fn parse_str(text: &str) -> Result<Self> {
        let mut cfg = ExperimentConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", lineno + 1)))?;
            cfg.set(key.trim(), value.trim())
                .map_err(|e| Error::Config(format!("line {}: {e}", lineno + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .parse()
                .map_err(|_| Error::Config(format!("bad value for {key}: {value:?}")))
        }
        match key {
            "seed" => self.seed = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "batch" => self.batch = parse(key, value)?,
            "steps_per_epoch" => self.steps_per_epoch = parse(key, value)?,
            "lr" => self.lr = parse(key, value)?,
            "k" => self.k = parse(key, value)?,
            "tau" => self.tau = parse(key, value)?,
            "refit_period" => self.refit_period = parse(key, value)?,
            "embed_dim" => self.embed_dim = parse(key, value)?,
            "enc_hidden" => self.enc_hidden = parse(key, value)?,
            "lambda_neg" => self.lambda_neg = parse(key, value)?,
            "disc_hidden" => self.disc_hidden = parse(key, value)?,
            "freeze_raw_estimator" => self.freeze_raw_estimator = parse(key, value)?,
            "s" => self.s = parse(key, value)?,
            "m" => self.m = parse(key, value)?,
            "beta" => self.beta = parse(key, value)?,
            "lambda_util" => self.lambda_util = parse(key, value)?,
            "lambda_ent" => self.lambda_ent = parse(key, value)?,
            "flip_entropy_sign" => self.flip_entropy_sign = parse(key, value)?,
            "expert_hidden" => self.expert_hidden = parse(key, value)?,
            "expert_out" => self.expert_out = parse(key, value)?,
            "decoder_hidden" => self.decoder_hidden = parse(key, value)?,
            "lambda_1" => self.lambda_1 = parse(key, value)?,
            "lambda_p" => self.lambda_p = parse(key, value)?,
            "lambda_t" => self.lambda_t = parse(key, value)?,
            "lambda_task" => self.lambda_task = parse(key, value)?,
            "disable_moe" => self.disable_moe = parse(key, value)?,
            "disable_pv_align" => self.disable_pv_align = parse(key, value)?,
            "disable_phoneme_guidance" => self.disable_phoneme_guidance = parse(key, value)?,
            "k_true" => self.k_true = parse(key, value)?,
            "d_p" => self.d_p = parse(key, value)?,
            "d_v" => self.d_v = parse(key, value)?,
            "sigma_p" => self.sigma_p = parse(key, value)?,
            "sigma_v" => self.sigma_v = parse(key, value)?,
            "languages" => self.languages = parse(key, value)?,
            "utterances_per_language" => self.utterances_per_language = parse(key, value)?,
            "utterance_len" => self.utterance_len = parse(key, value)?,
            "unseen_languages" => self.unseen_languages = parse(key, value)?,
            "corpus_dir" => self.corpus_dir = PathBuf::from(value),
            "out_dir" => self.out_dir = PathBuf::from(value),
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let check = |ok: bool, msg: &str| {
            if ok {
                Ok(())
            } else {
                Err(Error::Config(msg.to_string()))
            }
        };
        check(self.k >= 2, "k must be >= 2")?;
        check(self.tau > 0.0, "tau must be > 0")?;
        check(self.batch >= 2, "batch must be >= 2 (negative pairs need a derangement)")?;
        check(self.batch <= self.utterance_len, "batch cannot exceed utterance_len")?;
        check(self.s >= 1 && self.s <= self.m, "need 1 <= s <= m")?;
        check((0.0..=1.0).contains(&self.beta), "beta must lie in [0, 1]")?;
        check(self.lr > 0.0, "lr must be > 0")?;
        check(self.embed_dim >= 1, "embed_dim must be >= 1")?;
        check(self.refit_period >= 1, "refit_period must be >= 1")?;
        check(self.steps_per_epoch >= 1, "steps_per_epoch must be >= 1")?;
        for (name, v) in [
            ("lambda_neg", self.lambda_neg),
            ("lambda_util", self.lambda_util),
            ("lambda_ent", self.lambda_ent),
            ("lambda_1", self.lambda_1),
            ("lambda_p", self.lambda_p),
            ("lambda_t", self.lambda_t),
            ("lambda_task", self.lambda_task),
            ("sigma_p", self.sigma_p),
            ("sigma_v", self.sigma_v),
        ] {
            check(v >= 0.0, &format!("{name} must be >= 0"))?;
        }
        check(self.k_true >= 2, "k_true must be >= 2")?;
        check(self.utterance_len >= 2, "utterance_len must be >= 2")?;
        check(self.languages >= 1, "languages must be >= 1")?;
        check(
            self.unseen_languages < self.languages,
            "need at least one seen language",
        )?;
        check(self.utterances_per_language >= 2, "utterances_per_language must be >= 2")?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        ExperimentConfig::default().validate().unwrap();
    }

    #[test]
    fn parses_overrides_and_comments() {
        let cfg = ExperimentConfig::parse_str(
            "# comment\nseed = 7\n  s = 1 # trailing\nm=3\nbeta = 0.25\ncorpus_dir = /tmp/c\n",
        )
        .unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.s, 1);
        assert_eq!(cfg.m, 3);
        assert_eq!(cfg.beta, 0.25);
        assert_eq!(cfg.corpus_dir, PathBuf::from("/tmp/c"));
    }

    #[test]
    fn unknown_keys_fail_fast() {
        let err = ExperimentConfig::parse_str("sed = 7\n").unwrap_err().to_string();
        assert!(err.contains("unknown key"), "{err}");
    }

    #[test]
    fn bad_values_are_reported_with_line() {
        let err = ExperimentConfig::parse_str("\nseed = x\n").unwrap_err().to_string();
        assert!(err.contains("line 2"), "{err}");
    }

    #[test]
    fn module_preconditions_are_enforced() {
        assert!(ExperimentConfig::parse_str("s = 5\nm = 2\n").is_err());
        assert!(ExperimentConfig::parse_str("tau = 0\n").is_err());
        assert!(ExperimentConfig::parse_str("batch = 1\n").is_err());
        assert!(ExperimentConfig::parse_str("beta = 1.5\n").is_err());
        assert!(ExperimentConfig::parse_str("batch = 60\nutterance_len = 50\n").is_err());
    }
}
