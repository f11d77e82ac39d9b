//! Experiment configuration as flat `key = value` text.
//!
//! Blank lines and lines starting with `#` are ignored. Unknown keys are an
//! error. Relative paths under `data.*` resolve against the file's directory.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use qgen_core::corpus::Lexicon;
use qgen_core::lm::LmNormalizer;
use qgen_core::model::ModelConfig;
use qgen_core::search::SearchConfig;
use qgen_core::train::{AveragingWindow, Preset, TrainConfig};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("{path}: {err}")]
    Io { path: PathBuf, err: std::io::Error },
    #[error("{path}:{line}: {message}")]
    Parse { path: PathBuf, line: usize, message: String },
    #[error("{path}: {message}")]
    Invalid { path: PathBuf, message: String },
}

/// Model hyperparameters that do not depend on the data.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSettings {
    pub word_dim: usize,
    pub feature_dim: usize,
    pub hidden: usize,
    pub lm_hidden: usize,
    pub encoder_layers: usize,
    pub use_lm: bool,
    pub use_features: bool,
    pub lm_feeds_encoder: bool,
    pub attention_dim: usize,
    pub output_dim: usize,
    pub init_scale: f64,
    pub lm_normalizer: LmNormalizer,
}

impl Default for ModelSettings {
    fn default() -> Self {
        let m = ModelConfig::new(0, 0, 0);
        Self {
            word_dim: m.word_dim,
            feature_dim: m.feature_dim,
            hidden: m.hidden,
            lm_hidden: m.lm_hidden,
            encoder_layers: m.encoder_layers,
            use_lm: m.use_lm,
            use_features: m.use_features,
            lm_feeds_encoder: m.lm_feeds_encoder,
            attention_dim: m.attention_dim,
            output_dim: m.output_dim,
            init_scale: m.init_scale,
            lm_normalizer: m.lm_normalizer,
        }
    }
}

impl ModelSettings {
    pub fn apply_preset(&mut self, preset: Preset) {
        let mut m = self.model_config(1, 1, 1);
        preset.apply(&mut m);
        self.use_lm = m.use_lm;
        self.use_features = m.use_features;
        self.encoder_layers = m.encoder_layers;
    }

    pub fn model_config(&self, vocab_size: usize, pos_tags: usize, ner_tags: usize) -> ModelConfig {
        let mut m = ModelConfig::new(vocab_size, pos_tags, ner_tags);
        m.word_dim = self.word_dim;
        m.feature_dim = self.feature_dim;
        m.hidden = self.hidden;
        m.lm_hidden = self.lm_hidden;
        m.encoder_layers = self.encoder_layers;
        m.use_lm = self.use_lm;
        m.use_features = self.use_features;
        m.lm_feeds_encoder = self.lm_feeds_encoder;
        m.attention_dim = self.attention_dim;
        m.output_dim = self.output_dim;
        m.init_scale = self.init_scale;
        m.lm_normalizer = self.lm_normalizer;
        m
    }

    pub fn for_lexicon(&self, lex: &Lexicon) -> ModelConfig {
        self.model_config(lex.words.len(), lex.pos.len(), lex.ner.len())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataSettings {
    pub train: Option<PathBuf>,
    pub dev: Option<PathBuf>,
    pub vocab_cap: usize,
    /// Pretrained word vectors; random initialization when absent.
    pub embeddings: Option<PathBuf>,
}

impl Default for DataSettings {
    fn default() -> Self {
        Self { train: None, dev: None, vocab_cap: 20_000, embeddings: None }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ExperimentConfig {
    pub model: ModelSettings,
    pub train: TrainConfig,
    pub data: DataSettings,
    pub decode: SearchConfig,
}

fn parse<T: FromStr>(value: &str) -> Result<T, String>
where
    T::Err: std::fmt::Display,
{
    value.parse::<T>().map_err(|e| format!("invalid value `{value}`: {e}"))
}

fn parse_normalizer(value: &str) -> Result<LmNormalizer, String> {
    match value {
        "per_direction" => Ok(LmNormalizer::PerDirection),
        "pooled" => Ok(LmNormalizer::Pooled),
        _ => Err(format!("invalid value `{value}`: expected per_direction or pooled")),
    }
}

fn normalizer_name(n: LmNormalizer) -> &'static str {
    match n {
        LmNormalizer::PerDirection => "per_direction",
        LmNormalizer::Pooled => "pooled",
    }
}

fn parse_averaging(value: &str) -> Result<AveragingWindow, String> {
    match value {
        "nearest" => Ok(AveragingWindow::NearestToBest),
        "last" => Ok(AveragingWindow::Last),
        _ => Err(format!("invalid value `{value}`: expected nearest or last")),
    }
}

fn averaging_name(a: AveragingWindow) -> &'static str {
    match a {
        AveragingWindow::NearestToBest => "nearest",
        AveragingWindow::Last => "last",
    }
}

fn opt_path(value: &str) -> Option<PathBuf> {
    (!value.is_empty() && value != "none").then(|| PathBuf::from(value))
}

fn path_text(p: &Option<PathBuf>) -> String {
    p.as_ref().map_or_else(|| "none".to_string(), |p| p.display().to_string())
}

impl ExperimentConfig {
    /// Sets one key. The error message does not include the key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        let (m, t, d, s) = (&mut self.model, &mut self.train, &mut self.data, &mut self.decode);
        match key {
            "model.word_dim" => m.word_dim = parse(value)?,
            "model.feature_dim" => m.feature_dim = parse(value)?,
            "model.hidden" => m.hidden = parse(value)?,
            "model.lm_hidden" => m.lm_hidden = parse(value)?,
            "model.encoder_layers" => m.encoder_layers = parse(value)?,
            "model.use_lm" => m.use_lm = parse(value)?,
            "model.use_features" => m.use_features = parse(value)?,
            "model.lm_feeds_encoder" => m.lm_feeds_encoder = parse(value)?,
            "model.attention_dim" => m.attention_dim = parse(value)?,
            "model.output_dim" => m.output_dim = parse(value)?,
            "model.init_scale" => m.init_scale = parse(value)?,
            "model.preset" => m.apply_preset(value.parse().map_err(|e| format!("{e}"))?),
            "lm.normalizer" => m.lm_normalizer = parse_normalizer(value)?,
            "train.beta" => t.beta = parse(value)?,
            "train.learning_rate" => t.learning_rate = parse(value)?,
            "train.batch_size" => t.batch_size = parse(value)?,
            "train.max_steps" => t.max_steps = parse(value)?,
            "train.eval_interval" => t.eval_interval = parse(value)?,
            "train.seed" => t.seed = parse(value)?,
            "train.clip_norm" => t.clip_norm = if value == "none" { None } else { Some(parse(value)?) },
            "train.average_k" => t.average_k = parse(value)?,
            "train.averaging" => t.averaging = parse_averaging(value)?,
            "train.dev_max_len" => t.dev_max_len = parse(value)?,
            "data.train" => d.train = opt_path(value),
            "data.dev" => d.dev = opt_path(value),
            "data.vocab_cap" => d.vocab_cap = parse(value)?,
            "data.embeddings" => d.embeddings = opt_path(value),
            "decode.beam_size" => s.beam_size = parse(value)?,
            "decode.max_len" => s.max_len = parse(value)?,
            "decode.suppress_unk" => s.suppress_unk = parse(value)?,
            _ => return Err("unknown key".to_string()),
        }
        Ok(())
    }

    /// Every key with its current value, in file order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let (m, t, d, s) = (&self.model, &self.train, &self.data, &self.decode);
        vec![
            ("model.word_dim", m.word_dim.to_string()),
            ("model.feature_dim", m.feature_dim.to_string()),
            ("model.hidden", m.hidden.to_string()),
            ("model.lm_hidden", m.lm_hidden.to_string()),
            ("model.encoder_layers", m.encoder_layers.to_string()),
            ("model.use_lm", m.use_lm.to_string()),
            ("model.use_features", m.use_features.to_string()),
            ("model.lm_feeds_encoder", m.lm_feeds_encoder.to_string()),
            ("model.attention_dim", m.attention_dim.to_string()),
            ("model.output_dim", m.output_dim.to_string()),
            ("model.init_scale", m.init_scale.to_string()),
            ("lm.normalizer", normalizer_name(m.lm_normalizer).to_string()),
            ("train.beta", t.beta.to_string()),
            ("train.learning_rate", t.learning_rate.to_string()),
            ("train.batch_size", t.batch_size.to_string()),
            ("train.max_steps", t.max_steps.to_string()),
            ("train.eval_interval", t.eval_interval.to_string()),
            ("train.seed", t.seed.to_string()),
            ("train.clip_norm", t.clip_norm.map_or_else(|| "none".to_string(), |c| c.to_string())),
            ("train.average_k", t.average_k.to_string()),
            ("train.averaging", averaging_name(t.averaging).to_string()),
            ("train.dev_max_len", t.dev_max_len.to_string()),
            ("data.train", path_text(&d.train)),
            ("data.dev", path_text(&d.dev)),
            ("data.vocab_cap", d.vocab_cap.to_string()),
            ("data.embeddings", path_text(&d.embeddings)),
            ("decode.beam_size", s.beam_size.to_string()),
            ("decode.max_len", s.max_len.to_string()),
            ("decode.suppress_unk", s.suppress_unk.to_string()),
        ]
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.entries() {
            writeln!(out, "{k} = {v}").unwrap();
        }
        out
    }

    /// Parses `text`; `path` is used for diagnostics and to resolve data paths.
    pub fn parse(text: &str, path: &Path) -> Result<Self, ConfigError> {
        let mut cfg = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |message: String| ConfigError::Parse { path: path.to_path_buf(), line: i + 1, message };
            let (key, value) = line.split_once('=').ok_or_else(|| err("expected `key = value`".to_string()))?;
            let key = key.trim();
            cfg.set(key, value.trim()).map_err(|m| err(format!("{key}: {m}")))?;
        }
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [&mut cfg.data.train, &mut cfg.data.dev, &mut cfg.data.embeddings].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        cfg.validate().map_err(|message| ConfigError::Invalid { path: path.to_path_buf(), message })?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), String> {
        self.train.validate().map_err(|e| e.to_string())?;
        self.model.model_config(5, 1, 1).validate().map_err(|e| e.to_string())?;
        if self.decode.beam_size == 0 || self.decode.max_len == 0 {
            return Err("decode.beam_size and decode.max_len must be positive".to_string());
        }
        if self.data.vocab_cap == 0 {
            return Err("data.vocab_cap must be positive".to_string());
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path).map_err(|err| ConfigError::Io { path: path.to_path_buf(), err })?;
        Self::parse(&text, path)
    }

    pub fn train_path(&self) -> Result<&Path, String> {
        self.data.train.as_deref().ok_or_else(|| "data.train is not set".to_string())
    }
}
