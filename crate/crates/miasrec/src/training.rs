//! Training loop: seeded shuffling, batched adaptive-moment updates, and
//! early stopping on validation MRR@20.
//!
//! Every random draw derives from the run seed: parameter init from the seed
//! itself, the per-epoch shuffle from (seed, epoch), and per-example dropout
//! from (seed, epoch, position). Resuming from the last checkpoint therefore
//! reproduces an uninterrupted run exactly.

use std::fs::OpenOptions;
use std::io::Write as _;
use std::path::PathBuf;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluation::validation_mrr_r20;
use crate::model::{
    load_checkpoint, loss_and_grad, save_checkpoint, Mode, ModelConfig, ModelParameters,
    TrainingState,
};
use crate::sessions::{expand_prefixes, PrefixExample, SessionCorpus};

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;
const GRAD_CHUNK: usize = 128;

pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E3779B97F4A7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D049BB133111EB);
    x ^ (x >> 31)
}

fn derive_seed(seed: u64, epoch: usize, position: usize) -> u64 {
    splitmix(splitmix(seed ^ splitmix(epoch as u64)) ^ position as u64)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainOptions {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epoch_cap: usize,
    pub patience: usize,
    pub best_checkpoint: Option<PathBuf>,
    pub last_checkpoint: Option<PathBuf>,
    pub history_path: Option<PathBuf>,
    pub resume: bool,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            learning_rate: 0.001,
            batch_size: 1024,
            epoch_cap: 200,
            patience: 3,
            best_checkpoint: None,
            last_checkpoint: None,
            history_path: None,
            resume: false,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_mrr20: f64,
    pub val_r20: f64,
}

pub struct TrainOutcome {
    pub best_params: ModelParameters,
    pub best_epoch: usize,
    pub best_val_mrr: f64,
    pub history: Vec<EpochRecord>,
}

/// Stops after `patience` strict decreases of the validation metric relative
/// to the immediately preceding epoch.
#[derive(Debug, Clone)]
pub struct EarlyStopping {
    pub patience: usize,
    prev: Option<f64>,
    streak: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> EarlyStopping {
        EarlyStopping {
            patience,
            prev: None,
            streak: 0,
        }
    }

    /// Returns true when training should stop.
    pub fn observe(&mut self, value: f64) -> bool {
        if let Some(prev) = self.prev {
            if value < prev {
                self.streak += 1;
            } else {
                self.streak = 0;
            }
        }
        self.prev = Some(value);
        self.streak >= self.patience
    }

    fn restore(prev: Option<f64>, streak: usize, patience: usize) -> EarlyStopping {
        EarlyStopping {
            patience,
            prev,
            streak,
        }
    }
}

struct Adam {
    first: Vec<f64>,
    second: Vec<f64>,
    step: u64,
}

impl Adam {
    fn new(count: usize) -> Adam {
        Adam {
            first: vec![0.0; count],
            second: vec![0.0; count],
            step: 0,
        }
    }

    fn update(&mut self, params: &mut ModelParameters, grads: &ModelParameters, lr: f64) {
        self.step += 1;
        let bc1 = 1.0 - ADAM_BETA1.powi(self.step as i32);
        let bc2 = 1.0 - ADAM_BETA2.powi(self.step as i32);
        let mut offset = 0;
        let grad_tensors = grads.tensors();
        for ((_, slot), (_, _, g)) in params.tensors_mut().iter_mut().zip(grad_tensors.iter()) {
            for (i, (p, &gi)) in slot.iter_mut().zip(g.iter()).enumerate() {
                let j = offset + i;
                self.first[j] = ADAM_BETA1 * self.first[j] + (1.0 - ADAM_BETA1) * gi;
                self.second[j] = ADAM_BETA2 * self.second[j] + (1.0 - ADAM_BETA2) * gi * gi;
                let m_hat = self.first[j] / bc1;
                let v_hat = self.second[j] / bc2;
                *p -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
            }
            offset += g.len();
        }
    }
}

/// Per-epoch validation metric provider; production scoring runs the model
/// over the validation prefixes, tests can script the sequence.
pub trait ValidationScorer {
    /// Returns (MRR@20, R@20) for the epoch.
    fn score(&mut self, params: &ModelParameters, epoch: usize) -> Result<(f64, f64)>;
}

/// Scores validation prefixes with dropout off.
pub struct ConfiguredValidation {
    pub examples: Vec<PrefixExample>,
    pub config: ModelConfig,
}

impl ValidationScorer for ConfiguredValidation {
    fn score(&mut self, params: &ModelParameters, _epoch: usize) -> Result<(f64, f64)> {
        if self.examples.is_empty() {
            return Err(Error::EmptyEvaluation);
        }
        validation_mrr_r20(params, &self.config, &self.examples)
    }
}

fn append_history(path: &PathBuf, record: &EpochRecord) -> Result<()> {
    let mut file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|source| Error::Io {
            path: path.clone(),
            source,
        })?;
    let line = serde_json::to_string(record).expect("history record serializes");
    writeln!(file, "{line}").map_err(|source| Error::Io {
        path: path.clone(),
        source,
    })
}

/// Mean batch loss and summed gradients over one batch. Gradient reduction
/// runs over fixed-size chunks summed in chunk order, so it is deterministic.
fn batch_step(
    examples: &[&PrefixExample],
    positions: &[usize],
    params: &ModelParameters,
    config: &ModelConfig,
    seed: u64,
    epoch: usize,
) -> Result<(f64, ModelParameters)> {
    let chunks: Vec<Result<(f64, ModelParameters)>> = examples
        .par_chunks(GRAD_CHUNK)
        .zip(positions.par_chunks(GRAD_CHUNK))
        .map(|(chunk, pos_chunk)| {
            let mut grads = params.zeros_like();
            let mut loss_sum = 0.0;
            for (ex, &pos) in chunk.iter().zip(pos_chunk) {
                let mut rng = seeded_rng(derive_seed(seed, epoch, pos));
                let (loss, g) = loss_and_grad(ex, params, config, Mode::Train, Some(&mut rng))?;
                loss_sum += loss;
                grads.add_assign(&g);
            }
            Ok((loss_sum, grads))
        })
        .collect();

    let mut total = params.zeros_like();
    let mut loss_sum = 0.0;
    for chunk in chunks {
        let (l, g) = chunk?;
        loss_sum += l;
        total.add_assign(&g);
    }
    let count = examples.len() as f64;
    total.scale(1.0 / count);
    Ok((loss_sum / count, total))
}

pub fn train_loop<S: ValidationScorer>(
    train_examples: &[PrefixExample],
    item_count: usize,
    config: &ModelConfig,
    seed: u64,
    options: &TrainOptions,
    scorer: &mut S,
) -> Result<TrainOutcome> {
    config.validate()?;
    if train_examples.is_empty() {
        return Err(Error::EmptyCorpus);
    }

    let resume_state = if options.resume {
        match &options.last_checkpoint {
            Some(path) if path.exists() => {
                let (ckpt_config, params, state) = load_checkpoint(path)?;
                if &ckpt_config != config {
                    return Err(Error::Config(
                        "resume checkpoint config does not match the requested config".into(),
                    ));
                }
                state.map(|s| (params, s))
            }
            _ => None,
        }
    } else {
        None
    };

    let (mut params, mut adam, mut stopper, mut best, start_epoch) = match resume_state {
        Some((params, state)) => {
            if state.seed != seed {
                return Err(Error::Config(
                    "resume checkpoint was trained with a different seed".into(),
                ));
            }
            let mut adam = Adam::new(params.parameter_count());
            adam.first = state.first_moment.clone();
            adam.second = state.second_moment.clone();
            adam.step = state.adam_step;
            let stopper =
                EarlyStopping::restore(state.prev_val_mrr, state.decrease_streak, options.patience);
            let best_params = match &options.best_checkpoint {
                Some(path) if path.exists() => load_checkpoint(path)?.1,
                _ => params.clone(),
            };
            let best = (best_params, state.best_epoch, state.best_val_mrr);
            (params, adam, stopper, best, state.completed_epochs + 1)
        }
        None => {
            let mut rng = seeded_rng(seed);
            let params = ModelParameters::init(config, item_count, &mut rng);
            let adam = Adam::new(params.parameter_count());
            (
                params.clone(),
                adam,
                EarlyStopping::new(options.patience),
                (params, 0, f64::NEG_INFINITY),
                1,
            )
        }
    };

    let mut history = Vec::new();
    for epoch in start_epoch..=options.epoch_cap {
        let mut order: Vec<usize> = (0..train_examples.len()).collect();
        let mut epoch_rng = seeded_rng(splitmix(seed) ^ splitmix(epoch as u64));
        order.shuffle(&mut epoch_rng);

        let mut loss_sum = 0.0;
        for (batch_idx, batch) in order.chunks(options.batch_size).enumerate() {
            let refs: Vec<&PrefixExample> = batch.iter().map(|&i| &train_examples[i]).collect();
            let positions: Vec<usize> = batch.to_vec();
            let (batch_loss, grads) =
                batch_step(&refs, &positions, &params, config, seed, epoch)?;
            if !batch_loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    batch: batch_idx,
                });
            }
            adam.update(&mut params, &grads, options.learning_rate);
            loss_sum += batch_loss * batch.len() as f64;
        }
        let train_loss = loss_sum / train_examples.len() as f64;

        let (val_mrr20, val_r20) = scorer.score(&params, epoch)?;
        let record = EpochRecord {
            epoch,
            train_loss,
            val_mrr20,
            val_r20,
        };
        if let Some(path) = &options.history_path {
            append_history(path, &record)?;
        }
        history.push(record);

        if val_mrr20 > best.2 {
            best = (params.clone(), epoch, val_mrr20);
            if let Some(path) = &options.best_checkpoint {
                save_checkpoint(path, config, &best.0, None)?;
            }
        }
        let stop = stopper.observe(val_mrr20);

        if let Some(path) = &options.last_checkpoint {
            let state = TrainingState {
                first_moment: adam.first.clone(),
                second_moment: adam.second.clone(),
                adam_step: adam.step,
                completed_epochs: epoch,
                best_val_mrr: best.2,
                best_epoch: best.1,
                decrease_streak: stopper.streak,
                prev_val_mrr: stopper.prev,
                seed,
            };
            save_checkpoint(path, config, &params, Some(&state))?;
        }

        if stop {
            break;
        }
    }

    Ok(TrainOutcome {
        best_params: best.0,
        best_epoch: best.1,
        best_val_mrr: best.2,
        history,
    })
}

/// Train on a corpus pair with validation-MRR@20 early stopping.
pub fn train(
    train_corpus: &SessionCorpus,
    val_corpus: &SessionCorpus,
    config: &ModelConfig,
    seed: u64,
    options: &TrainOptions,
) -> Result<TrainOutcome> {
    let examples = expand_prefixes(train_corpus, config.max_len);
    let mut eval_config = config.clone();
    eval_config.dropout = 0.0;
    let mut scorer = ConfiguredValidation {
        examples: expand_prefixes(val_corpus, config.max_len),
        config: eval_config,
    };
    train_loop(
        &examples,
        train_corpus.item_count(),
        config,
        seed,
        options,
        &mut scorer,
    )
}
