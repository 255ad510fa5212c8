//! Declarative run configuration: one flat TOML file; command-line flags
//! override file values; defaults mirror the training recipe.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluation::LengthBuckets;
use crate::model::{IntentMode, ModelConfig};
use crate::sessions::{ColumnRef, LogFormat};
use crate::training::TrainOptions;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    // data paths
    pub raw_log: Option<PathBuf>,
    #[serde(default = "default_corpus_dir")]
    pub corpus_dir: PathBuf,
    #[serde(default = "default_checkpoint_dir")]
    pub checkpoint_dir: PathBuf,
    #[serde(default = "default_report_path")]
    pub report_path: PathBuf,

    // raw log format
    #[serde(default = "default_delimiter")]
    pub delimiter: String,
    #[serde(default)]
    pub has_header: bool,
    #[serde(default = "default_session_col")]
    pub session_col: ColumnRef,
    #[serde(default = "default_item_col")]
    pub item_col: ColumnRef,
    #[serde(default = "default_time_col")]
    pub time_col: ColumnRef,

    // preprocessing
    #[serde(default = "default_min_item_support")]
    pub min_item_support: usize,
    #[serde(default = "default_min_session_len")]
    pub min_session_len: usize,

    // model
    #[serde(default = "default_embedding_dim")]
    pub embedding_dim: usize,
    #[serde(default = "default_max_len")]
    pub max_len: usize,
    #[serde(default = "default_num_layers")]
    pub num_layers: usize,
    #[serde(default = "default_num_heads")]
    pub num_heads: usize,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_beta")]
    pub beta: f64,
    #[serde(default = "default_tau")]
    pub tau: f64,
    #[serde(default = "default_dropout")]
    pub dropout: f64,
    #[serde(default = "default_true")]
    pub use_position_embedding: bool,
    #[serde(default = "default_true")]
    pub use_frequency_embedding: bool,
    #[serde(default = "default_intent_mode")]
    pub intent_mode: IntentMode,

    // training
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_learning_rate")]
    pub learning_rate: f64,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_epoch_cap")]
    pub epoch_cap: usize,
    #[serde(default = "default_patience")]
    pub patience: usize,

    // evaluation
    #[serde(default = "default_cutoffs")]
    pub cutoffs: Vec<usize>,
    #[serde(default = "default_buckets")]
    pub buckets: Vec<String>,

    // sweep grids
    #[serde(default = "default_beta_grid")]
    pub beta_grid: Vec<f64>,
    #[serde(default = "default_tau_grid")]
    pub tau_grid: Vec<f64>,
    #[serde(default = "default_dropout_grid")]
    pub dropout_grid: Vec<f64>,
}

fn default_corpus_dir() -> PathBuf {
    "corpus".into()
}
fn default_checkpoint_dir() -> PathBuf {
    "checkpoints".into()
}
fn default_report_path() -> PathBuf {
    "report.json".into()
}
fn default_delimiter() -> String {
    "\t".into()
}
fn default_session_col() -> ColumnRef {
    ColumnRef::Index(0)
}
fn default_item_col() -> ColumnRef {
    ColumnRef::Index(1)
}
fn default_time_col() -> ColumnRef {
    ColumnRef::Index(2)
}
fn default_min_item_support() -> usize {
    5
}
fn default_min_session_len() -> usize {
    2
}
fn default_embedding_dim() -> usize {
    100
}
fn default_max_len() -> usize {
    50
}
fn default_num_layers() -> usize {
    1
}
fn default_num_heads() -> usize {
    2
}
fn default_alpha() -> f64 {
    1.5
}
fn default_beta() -> f64 {
    0.5
}
fn default_tau() -> f64 {
    0.07
}
fn default_dropout() -> f64 {
    0.1
}
fn default_true() -> bool {
    true
}
fn default_intent_mode() -> IntentMode {
    IntentMode::Entmax
}
fn default_seeds() -> Vec<u64> {
    vec![17, 42, 91]
}
fn default_learning_rate() -> f64 {
    0.001
}
fn default_batch_size() -> usize {
    1024
}
fn default_epoch_cap() -> usize {
    200
}
fn default_patience() -> usize {
    3
}
fn default_cutoffs() -> Vec<usize> {
    vec![5, 10, 20]
}
fn default_buckets() -> Vec<String> {
    vec![
        "1".into(),
        "2".into(),
        "3-4".into(),
        "5-6".into(),
        "7-9".into(),
        ">=10".into(),
    ]
}
fn default_beta_grid() -> Vec<f64> {
    (0..=10).map(|i| i as f64 / 10.0).collect()
}
fn default_tau_grid() -> Vec<f64> {
    vec![0.01, 0.05, 0.07, 0.1, 0.5, 1.0]
}
fn default_dropout_grid() -> Vec<f64> {
    vec![0.0, 0.1, 0.2, 0.3, 0.4, 0.5]
}

impl Default for RunConfig {
    fn default() -> Self {
        toml::from_str("").expect("empty config uses defaults")
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            embedding_dim: self.embedding_dim,
            max_len: self.max_len,
            num_layers: self.num_layers,
            num_heads: self.num_heads,
            alpha: self.alpha,
            beta: self.beta,
            tau: self.tau,
            dropout: self.dropout,
            use_position_embedding: self.use_position_embedding,
            use_frequency_embedding: self.use_frequency_embedding,
            intent_mode: self.intent_mode,
        }
    }

    pub fn log_format(&self) -> Result<LogFormat> {
        let mut chars = self.delimiter.chars();
        let delimiter = match (chars.next(), chars.next()) {
            (Some(c), None) => c,
            _ => {
                return Err(Error::Config(format!(
                    "delimiter must be a single character, got {:?}",
                    self.delimiter
                )))
            }
        };
        Ok(LogFormat {
            delimiter,
            has_header: self.has_header,
            session_col: self.session_col.clone(),
            item_col: self.item_col.clone(),
            time_col: self.time_col.clone(),
        })
    }

    pub fn train_options(&self) -> TrainOptions {
        TrainOptions {
            learning_rate: self.learning_rate,
            batch_size: self.batch_size,
            epoch_cap: self.epoch_cap,
            patience: self.patience,
            ..TrainOptions::default()
        }
    }

    pub fn length_buckets(&self) -> Result<LengthBuckets> {
        let mut out = Vec::with_capacity(self.buckets.len());
        for spec in &self.buckets {
            out.push(parse_bucket(spec)?);
        }
        if out.is_empty() {
            return Err(Error::Config("at least one length bucket required".into()));
        }
        Ok(LengthBuckets(out))
    }
}

fn parse_bucket(spec: &str) -> Result<(usize, Option<usize>)> {
    let bad = || Error::Config(format!("bad bucket spec {spec:?} (want N, N-M, or >=N)"));
    if let Some(rest) = spec.strip_prefix(">=") {
        let lo: usize = rest.trim().parse().map_err(|_| bad())?;
        return Ok((lo, None));
    }
    if let Some((lo, hi)) = spec.split_once('-') {
        let lo: usize = lo.trim().parse().map_err(|_| bad())?;
        let hi: usize = hi.trim().parse().map_err(|_| bad())?;
        if hi < lo {
            return Err(bad());
        }
        return Ok((lo, Some(hi)));
    }
    let v: usize = spec.trim().parse().map_err(|_| bad())?;
    Ok((v, Some(v)))
}
