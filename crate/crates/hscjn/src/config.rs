//! Training configuration: defaults, `key=value` config files, and the
//! derived model configuration.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use crate::corpus::ExampleMode;
use crate::error::{Error, Result};
use crate::model::{AttentionKind, ModelConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub alpha: f64,
    pub beta: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Drop probability. `--dropout 0.75` reproduces the literal
    /// large-rate reading.
    pub dropout: f64,
    pub epochs: usize,
    pub seed: u64,
    pub vocab_cap: usize,
    pub max_dialogue_tokens: usize,
    pub beam_width: usize,
    pub max_decode_len: usize,
    pub init_std: f64,
    pub grad_clip: Option<f64>,
    pub wo_me: bool,
    pub wo_pn: bool,
    pub paper_scale: bool,
    pub two_turn: bool,
    pub two_prev_source: bool,
    pub wp_negatives: bool,
    pub length_norm: bool,
    pub sentence_bleu: bool,
    pub count_unk: bool,
    pub scalar_wc_attention: bool,
    pub bidirectional: bool,
    pub no_early_stop: bool,
    pub train_path: Option<PathBuf>,
    pub valid_path: Option<PathBuf>,
    pub test_path: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub resume: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            alpha: 1.0,
            beta: 0.13,
            learning_rate: 2e-4,
            batch_size: 8,
            dropout: 0.25,
            epochs: 10,
            seed: 42,
            vocab_cap: 2000,
            max_dialogue_tokens: 300,
            beam_width: 5,
            max_decode_len: 50,
            init_std: 0.01,
            grad_clip: None,
            wo_me: false,
            wo_pn: false,
            paper_scale: false,
            two_turn: false,
            two_prev_source: false,
            wp_negatives: false,
            length_norm: false,
            sentence_bleu: false,
            count_unk: false,
            scalar_wc_attention: false,
            bidirectional: false,
            no_early_stop: false,
            train_path: None,
            valid_path: None,
            test_path: None,
            out_dir: PathBuf::from("hscjn_run"),
            resume: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) || !(0.0..=1.0).contains(&self.beta) {
            return Err(Error::Config(format!(
                "alpha {} and beta {} must lie in [0, 1]",
                self.alpha, self.beta
            )));
        }
        if self.learning_rate <= 0.0 {
            return Err(Error::Config(format!("learning_rate {} must be > 0", self.learning_rate)));
        }
        if self.batch_size == 0 || self.beam_width == 0 || self.max_decode_len == 0 {
            return Err(Error::Config(
                "batch_size, beam_width, and max_decode_len must be >= 1".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if self.max_dialogue_tokens == 0 || self.vocab_cap == 0 {
            return Err(Error::Config("vocab_cap and max_dialogue_tokens must be >= 1".into()));
        }
        if self.two_turn && self.two_prev_source {
            return Err(Error::Config("two_turn and two_prev_source are mutually exclusive".into()));
        }
        Ok(())
    }

    /// Loss weights after the ablation switches.
    pub fn effective_alpha(&self) -> f64 {
        if self.wo_pn {
            0.0
        } else {
            self.alpha
        }
    }

    pub fn effective_beta(&self) -> f64 {
        if self.wo_me {
            0.0
        } else {
            self.beta
        }
    }

    pub fn example_mode(&self) -> ExampleMode {
        if self.two_turn {
            ExampleMode::TwoTurnTarget
        } else if self.two_prev_source {
            ExampleMode::TwoPrevSource
        } else {
            ExampleMode::NextTurn
        }
    }

    pub fn model_config(&self, vocab_size: usize) -> ModelConfig {
        let mut cfg = if self.paper_scale {
            ModelConfig::paper_scale(vocab_size)
        } else {
            ModelConfig::desk(vocab_size)
        };
        cfg.dropout_rate = self.dropout;
        cfg.bidirectional_word_encoder = self.bidirectional;
        cfg.attention =
            if self.scalar_wc_attention { AttentionKind::ScalarWc } else { AttentionKind::Additive };
        cfg
    }

    /// Apply `key=value` lines (# comments, blank lines ignored).
    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut pairs: Vec<(String, String)> = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("{}:{}: expected key=value", path.display(), lineno + 1))
            })?;
            pairs.push((key.trim().to_string(), value.trim().to_string()));
        }
        for (key, value) in pairs {
            self.apply_kv(&key, &value)
                .map_err(|e| Error::Config(format!("{}: {}", path.display(), e)))?;
        }
        Ok(())
    }

    pub fn apply_kv(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        fn parse<T: std::str::FromStr>(key: &str, value: &str) -> std::result::Result<T, String> {
            value.parse().map_err(|_| format!("{key}: cannot parse {value:?}"))
        }
        match key {
            "alpha" => self.alpha = parse(key, value)?,
            "beta" => self.beta = parse(key, value)?,
            "learning_rate" | "lr" => self.learning_rate = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "dropout" => self.dropout = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "vocab_cap" => self.vocab_cap = parse(key, value)?,
            "max_dialogue_tokens" => self.max_dialogue_tokens = parse(key, value)?,
            "beam_width" => self.beam_width = parse(key, value)?,
            "max_decode_len" => self.max_decode_len = parse(key, value)?,
            "init_std" => self.init_std = parse(key, value)?,
            "grad_clip" => self.grad_clip = Some(parse(key, value)?),
            "wo_me" => self.wo_me = parse(key, value)?,
            "wo_pn" => self.wo_pn = parse(key, value)?,
            "paper_scale" => self.paper_scale = parse(key, value)?,
            "two_turn" => self.two_turn = parse(key, value)?,
            "two_prev_source" => self.two_prev_source = parse(key, value)?,
            "wp_negatives" => self.wp_negatives = parse(key, value)?,
            "length_norm" => self.length_norm = parse(key, value)?,
            "sentence_bleu" => self.sentence_bleu = parse(key, value)?,
            "count_unk" => self.count_unk = parse(key, value)?,
            "scalar_wc_attention" => self.scalar_wc_attention = parse(key, value)?,
            "bidirectional" => self.bidirectional = parse(key, value)?,
            "no_early_stop" => self.no_early_stop = parse(key, value)?,
            "train" => self.train_path = Some(PathBuf::from(value)),
            "valid" => self.valid_path = Some(PathBuf::from(value)),
            "test" => self.test_path = Some(PathBuf::from(value)),
            "out" => self.out_dir = PathBuf::from(value),
            "resume" => self.resume = Some(PathBuf::from(value)),
            _ => return Err(format!("unknown config key {key:?}")),
        }
        Ok(())
    }

    /// `HSCJN_SEED` wins over both config file and flags.
    pub fn apply_env(&mut self, env: &HashMap<String, String>) -> Result<()> {
        if let Some(seed) = env.get("HSCJN_SEED") {
            self.seed = seed
                .parse()
                .map_err(|_| Error::Config(format!("HSCJN_SEED: cannot parse {seed:?}")))?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    #[test]
    fn defaults_match_training_settings() {
        let cfg = TrainConfig::default();
        assert_eq!(cfg.alpha, 1.0);
        assert_eq!(cfg.beta, 0.13);
        assert_eq!(cfg.learning_rate, 2e-4);
        assert_eq!(cfg.batch_size, 8);
        assert_eq!(cfg.beam_width, 5);
        assert_eq!(cfg.max_dialogue_tokens, 300);
        cfg.validate().unwrap();
    }

    #[test]
    fn config_file_roundtrip_with_comments() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.conf");
        let mut f = fs::File::create(&path).unwrap();
        writeln!(f, "# desk run").unwrap();
        writeln!(f, "alpha = 0.5").unwrap();
        writeln!(f, "epochs=3").unwrap();
        writeln!(f, "wo_me=true").unwrap();
        writeln!(f, "train=/tmp/t.txt").unwrap();
        drop(f);
        let mut cfg = TrainConfig::default();
        cfg.apply_file(&path).unwrap();
        assert_eq!(cfg.alpha, 0.5);
        assert_eq!(cfg.epochs, 3);
        assert!(cfg.wo_me);
        assert_eq!(cfg.train_path, Some(PathBuf::from("/tmp/t.txt")));
        assert_eq!(cfg.effective_beta(), 0.0);
    }

    #[test]
    fn unknown_key_is_an_error() {
        let mut cfg = TrainConfig::default();
        assert!(cfg.apply_kv("no_such_key", "1").is_err());
    }

    #[test]
    fn validation_rejects_bad_weights() {
        let mut cfg = TrainConfig::default();
        cfg.alpha = 1.5;
        assert!(cfg.validate().is_err());
        cfg.alpha = 1.0;
        cfg.learning_rate = 0.0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn env_seed_override() {
        let mut cfg = TrainConfig::default();
        let env: HashMap<String, String> =
            [("HSCJN_SEED".to_string(), "777".to_string())].into_iter().collect();
        cfg.apply_env(&env).unwrap();
        assert_eq!(cfg.seed, 777);
    }

    #[test]
    fn ablation_switches_zero_weights() {
        let mut cfg = TrainConfig::default();
        cfg.wo_pn = true;
        assert_eq!(cfg.effective_alpha(), 0.0);
        assert_eq!(cfg.effective_beta(), 0.13);
    }
}
