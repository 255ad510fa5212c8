//! Model configuration, parameter tables, and checkpoint files.

mod backward;
mod forward;

pub use backward::{loss_and_grad, Gradients};
pub use forward::{
    aggregate, decode, embed_inputs, encode, forward, highway, loss, select_intents, IntentSet,
    Mode,
};

use std::fmt;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write as _};
use std::path::Path;
use std::str::FromStr;

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;
const INIT_STD: f64 = 0.02;

/// How session representations are selected before aggregation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IntentMode {
    /// dynamic selection via alpha-entmax over intent scores
    Entmax,
    /// only the mean representation
    Mean,
    /// the last k item representations
    LastK(usize),
}

impl fmt::Display for IntentMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            IntentMode::Entmax => write!(f, "entmax"),
            IntentMode::Mean => write!(f, "mean"),
            IntentMode::LastK(k) => write!(f, "last:{k}"),
        }
    }
}

impl FromStr for IntentMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "entmax" => Ok(IntentMode::Entmax),
            "mean" => Ok(IntentMode::Mean),
            other => {
                if let Some(k) = other.strip_prefix("last:") {
                    let k: usize = k
                        .parse()
                        .map_err(|_| Error::Config(format!("bad intent mode {other:?}")))?;
                    if k < 1 {
                        return Err(Error::Config("last:k requires k >= 1".into()));
                    }
                    Ok(IntentMode::LastK(k))
                } else {
                    Err(Error::Config(format!(
                        "bad intent mode {other:?} (expected entmax, mean, or last:k)"
                    )))
                }
            }
        }
    }
}

impl Serialize for IntentMode {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for IntentMode {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ModelConfig {
    pub embedding_dim: usize,
    pub max_len: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub alpha: f64,
    pub beta: f64,
    pub tau: f64,
    pub dropout: f64,
    pub use_position_embedding: bool,
    pub use_frequency_embedding: bool,
    pub intent_mode: IntentMode,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            embedding_dim: 100,
            max_len: 50,
            num_layers: 1,
            num_heads: 2,
            alpha: 1.5,
            beta: 0.5,
            tau: 0.07,
            dropout: 0.1,
            use_position_embedding: true,
            use_frequency_embedding: true,
            intent_mode: IntentMode::Entmax,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embedding_dim == 0 || self.embedding_dim % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "embedding_dim {} must be a positive multiple of num_heads {}",
                self.embedding_dim, self.num_heads
            )));
        }
        if self.tau <= 0.0 {
            return Err(Error::Config("tau must be > 0".into()));
        }
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(Error::Config("beta must be in [0, 1]".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config("dropout must be in [0, 1)".into()));
        }
        if self.alpha < 1.0 {
            return Err(Error::Config("alpha must be >= 1".into()));
        }
        if let IntentMode::LastK(k) = self.intent_mode {
            if k < 1 {
                return Err(Error::Config("last:k requires k >= 1".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionLayer {
    pub w_query: Array2<f64>,
    pub b_query: Array1<f64>,
    pub w_key: Array2<f64>,
    pub b_key: Array1<f64>,
    pub w_value: Array2<f64>,
    pub b_value: Array1<f64>,
    pub w_output: Array2<f64>,
    pub b_output: Array1<f64>,
    pub w_ff1: Array2<f64>,
    pub b_ff1: Array1<f64>,
    pub w_ff2: Array2<f64>,
    pub b_ff2: Array1<f64>,
    pub ln1_scale: Array1<f64>,
    pub ln1_offset: Array1<f64>,
    pub ln2_scale: Array1<f64>,
    pub ln2_offset: Array1<f64>,
}

/// All learnable tables. Row 0 of the position and frequency tables is
/// reserved for the mean token; item indices are 1-based into `item_table`
/// via row index - 1.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParameters {
    pub item_table: Array2<f64>,
    pub position_table: Array2<f64>,
    pub frequency_table: Array2<f64>,
    pub gate_weight: Array2<f64>,
    pub intent_weight: Array1<f64>,
    pub layers: Vec<AttentionLayer>,
}

fn randn(rows: usize, cols: usize, rng: &mut impl Rng) -> Array2<f64> {
    let normal = Normal::new(0.0, INIT_STD).unwrap();
    Array2::from_shape_fn((rows, cols), |_| normal.sample(rng))
}

impl ModelParameters {
    pub fn init(config: &ModelConfig, item_count: usize, rng: &mut impl Rng) -> ModelParameters {
        let d = config.embedding_dim;
        let normal = Normal::new(0.0, INIT_STD).unwrap();
        let layers = (0..config.num_layers)
            .map(|_| AttentionLayer {
                w_query: randn(d, d, rng),
                b_query: Array1::zeros(d),
                w_key: randn(d, d, rng),
                b_key: Array1::zeros(d),
                w_value: randn(d, d, rng),
                b_value: Array1::zeros(d),
                w_output: randn(d, d, rng),
                b_output: Array1::zeros(d),
                w_ff1: randn(d, 4 * d, rng),
                b_ff1: Array1::zeros(4 * d),
                w_ff2: randn(4 * d, d, rng),
                b_ff2: Array1::zeros(d),
                ln1_scale: Array1::ones(d),
                ln1_offset: Array1::zeros(d),
                ln2_scale: Array1::ones(d),
                ln2_offset: Array1::zeros(d),
            })
            .collect();
        ModelParameters {
            item_table: randn(item_count, d, rng),
            position_table: randn(config.max_len + 1, d, rng),
            frequency_table: randn(config.max_len + 1, d, rng),
            gate_weight: randn(d, 2 * d, rng),
            intent_weight: Array1::from_shape_fn(d, |_| normal.sample(rng)),
            layers,
        }
    }

    pub fn item_count(&self) -> usize {
        self.item_table.nrows()
    }

    pub fn zeros_like(&self) -> ModelParameters {
        let zero2 = |a: &Array2<f64>| Array2::zeros(a.raw_dim());
        let zero1 = |a: &Array1<f64>| Array1::zeros(a.raw_dim());
        ModelParameters {
            item_table: zero2(&self.item_table),
            position_table: zero2(&self.position_table),
            frequency_table: zero2(&self.frequency_table),
            gate_weight: zero2(&self.gate_weight),
            intent_weight: zero1(&self.intent_weight),
            layers: self
                .layers
                .iter()
                .map(|l| AttentionLayer {
                    w_query: zero2(&l.w_query),
                    b_query: zero1(&l.b_query),
                    w_key: zero2(&l.w_key),
                    b_key: zero1(&l.b_key),
                    w_value: zero2(&l.w_value),
                    b_value: zero1(&l.b_value),
                    w_output: zero2(&l.w_output),
                    b_output: zero1(&l.b_output),
                    w_ff1: zero2(&l.w_ff1),
                    b_ff1: zero1(&l.b_ff1),
                    w_ff2: zero2(&l.w_ff2),
                    b_ff2: zero1(&l.b_ff2),
                    ln1_scale: zero1(&l.ln1_scale),
                    ln1_offset: zero1(&l.ln1_offset),
                    ln2_scale: zero1(&l.ln2_scale),
                    ln2_offset: zero1(&l.ln2_offset),
                })
                .collect(),
        }
    }

    /// Named tensors in a stable order; the optimizer and checkpoint rely on it.
    pub fn tensors(&self) -> Vec<(String, Vec<usize>, &[f64])> {
        let mut out: Vec<(String, Vec<usize>, &[f64])> = vec![
            tensor2("item_table", &self.item_table),
            tensor2("position_table", &self.position_table),
            tensor2("frequency_table", &self.frequency_table),
            tensor2("gate_weight", &self.gate_weight),
            (
                "intent_weight".into(),
                vec![self.intent_weight.len()],
                self.intent_weight.as_slice().unwrap(),
            ),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            let p = |name: &str| format!("layer{i}.{name}");
            out.push(tensor2(&p("w_query"), &l.w_query));
            out.push(tensor1(&p("b_query"), &l.b_query));
            out.push(tensor2(&p("w_key"), &l.w_key));
            out.push(tensor1(&p("b_key"), &l.b_key));
            out.push(tensor2(&p("w_value"), &l.w_value));
            out.push(tensor1(&p("b_value"), &l.b_value));
            out.push(tensor2(&p("w_output"), &l.w_output));
            out.push(tensor1(&p("b_output"), &l.b_output));
            out.push(tensor2(&p("w_ff1"), &l.w_ff1));
            out.push(tensor1(&p("b_ff1"), &l.b_ff1));
            out.push(tensor2(&p("w_ff2"), &l.w_ff2));
            out.push(tensor1(&p("b_ff2"), &l.b_ff2));
            out.push(tensor1(&p("ln1_scale"), &l.ln1_scale));
            out.push(tensor1(&p("ln1_offset"), &l.ln1_offset));
            out.push(tensor1(&p("ln2_scale"), &l.ln2_scale));
            out.push(tensor1(&p("ln2_offset"), &l.ln2_offset));
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let mut out: Vec<(String, &mut [f64])> = vec![
            ("item_table".into(), self.item_table.as_slice_mut().unwrap()),
            (
                "position_table".into(),
                self.position_table.as_slice_mut().unwrap(),
            ),
            (
                "frequency_table".into(),
                self.frequency_table.as_slice_mut().unwrap(),
            ),
            ("gate_weight".into(), self.gate_weight.as_slice_mut().unwrap()),
            (
                "intent_weight".into(),
                self.intent_weight.as_slice_mut().unwrap(),
            ),
        ];
        for (i, l) in self.layers.iter_mut().enumerate() {
            let p = |name: &str| format!("layer{i}.{name}");
            out.push((p("w_query"), l.w_query.as_slice_mut().unwrap()));
            out.push((p("b_query"), l.b_query.as_slice_mut().unwrap()));
            out.push((p("w_key"), l.w_key.as_slice_mut().unwrap()));
            out.push((p("b_key"), l.b_key.as_slice_mut().unwrap()));
            out.push((p("w_value"), l.w_value.as_slice_mut().unwrap()));
            out.push((p("b_value"), l.b_value.as_slice_mut().unwrap()));
            out.push((p("w_output"), l.w_output.as_slice_mut().unwrap()));
            out.push((p("b_output"), l.b_output.as_slice_mut().unwrap()));
            out.push((p("w_ff1"), l.w_ff1.as_slice_mut().unwrap()));
            out.push((p("b_ff1"), l.b_ff1.as_slice_mut().unwrap()));
            out.push((p("w_ff2"), l.w_ff2.as_slice_mut().unwrap()));
            out.push((p("b_ff2"), l.b_ff2.as_slice_mut().unwrap()));
            out.push((p("ln1_scale"), l.ln1_scale.as_slice_mut().unwrap()));
            out.push((p("ln1_offset"), l.ln1_offset.as_slice_mut().unwrap()));
            out.push((p("ln2_scale"), l.ln2_scale.as_slice_mut().unwrap()));
            out.push((p("ln2_offset"), l.ln2_offset.as_slice_mut().unwrap()));
        }
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|(_, _, s)| s.len()).sum()
    }

    /// Element-wise accumulate (same shapes).
    pub fn add_assign(&mut self, other: &ModelParameters) {
        let mut mine = self.tensors_mut();
        let theirs = other.tensors();
        for ((_, dst), (_, _, src)) in mine.iter_mut().zip(theirs.iter()) {
            for (d, s) in dst.iter_mut().zip(src.iter()) {
                *d += s;
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for (_, slice) in self.tensors_mut() {
            for v in slice {
                *v *= factor;
            }
        }
    }
}

fn tensor2<'a>(name: &str, a: &'a Array2<f64>) -> (String, Vec<usize>, &'a [f64]) {
    (name.into(), a.shape().to_vec(), a.as_slice().unwrap())
}

fn tensor1<'a>(name: &str, a: &'a Array1<f64>) -> (String, Vec<usize>, &'a [f64]) {
    (name.into(), vec![a.len()], a.as_slice().unwrap())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct NamedTensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

/// Optimizer and progress state stored alongside the parameters so an
/// interrupted run can resume.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TrainingState {
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
    pub adam_step: u64,
    pub completed_epochs: usize,
    pub best_val_mrr: f64,
    pub best_epoch: usize,
    pub decrease_streak: usize,
    pub prev_val_mrr: Option<f64>,
    pub seed: u64,
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    format_version: u32,
    config: ModelConfig,
    item_count: usize,
    tensors: Vec<(String, NamedTensor)>,
    training_state: Option<TrainingState>,
}

pub fn save_checkpoint(
    path: &Path,
    config: &ModelConfig,
    params: &ModelParameters,
    training_state: Option<&TrainingState>,
) -> Result<()> {
    let tensors = params
        .tensors()
        .into_iter()
        .map(|(name, shape, data)| {
            (
                name,
                NamedTensor {
                    shape,
                    data: data.to_vec(),
                },
            )
        })
        .collect();
    let file = CheckpointFile {
        format_version: CHECKPOINT_FORMAT_VERSION,
        config: config.clone(),
        item_count: params.item_count(),
        tensors,
        training_state: training_state.cloned(),
    };
    let out = File::create(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut writer = BufWriter::new(out);
    serde_json::to_writer(&mut writer, &file).map_err(|e| Error::Artifact {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    writer.flush().map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_checkpoint(
    path: &Path,
) -> Result<(ModelConfig, ModelParameters, Option<TrainingState>)> {
    let file = File::open(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let ckpt: CheckpointFile =
        serde_json::from_reader(BufReader::new(file)).map_err(|e| Error::Artifact {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
    if ckpt.format_version != CHECKPOINT_FORMAT_VERSION {
        return Err(Error::Artifact {
            path: path.to_path_buf(),
            message: format!("unsupported checkpoint version {}", ckpt.format_version),
        });
    }
    ckpt.config.validate()?;

    // rebuild parameters through the template shapes and validate every tensor
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    use rand::SeedableRng;
    let mut params = ModelParameters::init(&ckpt.config, ckpt.item_count, &mut rng);
    {
        let expected: Vec<(String, Vec<usize>)> = params
            .tensors()
            .into_iter()
            .map(|(n, s, _)| (n, s))
            .collect();
        if expected.len() != ckpt.tensors.len() {
            return Err(Error::Artifact {
                path: path.to_path_buf(),
                message: format!(
                    "expected {} tensors, found {}",
                    expected.len(),
                    ckpt.tensors.len()
                ),
            });
        }
        let mut slots = params.tensors_mut();
        for (((exp_name, exp_shape), (name, tensor)), (_, slot)) in
            expected.iter().zip(&ckpt.tensors).zip(slots.iter_mut())
        {
            if exp_name != name || exp_shape != &tensor.shape {
                return Err(Error::Artifact {
                    path: path.to_path_buf(),
                    message: format!(
                        "tensor {name}: shape {:?} does not match config shape {exp_shape:?}",
                        tensor.shape
                    ),
                });
            }
            if tensor.data.len() != slot.len() {
                return Err(Error::Artifact {
                    path: path.to_path_buf(),
                    message: format!("tensor {name}: wrong element count"),
                });
            }
            slot.copy_from_slice(&tensor.data);
        }
    }
    Ok((ckpt.config, params, ckpt.training_state))
}
