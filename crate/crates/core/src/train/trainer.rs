use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::config::{toml_error, SrmConfig};
use crate::error::{Result, SrmError};
use crate::model::ModelParams;
use crate::real::Real;
use crate::rlvr::arithmetic;
use crate::rlvr::verifier::Question;
use crate::train::copy_task::{copy_task_batch, CopyTaskSpec};
use crate::train::corpus::TextCorpus;
use crate::train::loss::{masked_count, sequence_ce};
use crate::train::optim::{OptimizerConfig, OptimizerState};

fn default_symbols() -> usize {
    16
}

/// Where training batches come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataConfig {
    Copy {
        copy_len: usize,
        #[serde(default = "default_symbols")]
        symbols: usize,
    },
    Text {
        path: PathBuf,
        seq_len: usize,
    },
    /// Supervised `a+b=c` rows.
    Arithmetic {
        max_operand: u32,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    /// Run the eval hook every this many steps (and after the last); zero
    /// disables it.
    #[serde(default)]
    pub eval_every: u64,
    /// Stop as soon as an eval reaches this value.
    #[serde(default)]
    pub target_eval: Option<f64>,
}

/// A training run as read from a TOML file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: SrmConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
}

impl RunConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(s).map_err(|e| toml_error(&e, s))?;
        cfg.model.validate()?;
        if cfg.train.batch_size == 0 {
            return Err(SrmError::config("train.batch_size", "must be positive"));
        }
        Ok(cfg)
    }

    /// The model section of a run file, or a bare model config.
    pub fn model_from_toml_str(s: &str) -> Result<SrmConfig> {
        let table: toml::Table = toml::from_str(s).map_err(|e| toml_error(&e, s))?;
        if table.contains_key("model") {
            Ok(Self::from_toml_str(s)?.model)
        } else {
            SrmConfig::from_toml_str(s)
        }
    }

    pub fn data_source(&self) -> Result<DataSource> {
        match &self.data {
            DataConfig::Copy { copy_len, symbols } => {
                let spec = CopyTaskSpec::letters(*copy_len, *symbols)?;
                spec.validate(self.model.n_ctx)?;
                Ok(DataSource::Copy(spec))
            }
            DataConfig::Text { path, seq_len } => {
                if *seq_len > self.model.n_ctx {
                    return Err(SrmError::config("data.seq_len", format!("exceeds n_ctx {}", self.model.n_ctx)));
                }
                Ok(DataSource::Text {
                    corpus: TextCorpus::from_file(path)?,
                    seq_len: *seq_len,
                })
            }
            DataConfig::Arithmetic { max_operand } => {
                if arithmetic::max_row_len(*max_operand) > self.model.n_ctx {
                    return Err(SrmError::config("data.max_operand", format!("rows exceed n_ctx {}", self.model.n_ctx)));
                }
                Ok(DataSource::Arithmetic(arithmetic::arithmetic_questions(*max_operand)))
            }
        }
    }
}

pub enum DataSource {
    Copy(CopyTaskSpec),
    Text { corpus: TextCorpus, seq_len: usize },
    Arithmetic(Vec<Question>),
}

/// Token rows and the positions whose next-token prediction is scored.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainBatch {
    pub tokens: Vec<Vec<u32>>,
    pub loss_mask: Vec<Vec<bool>>,
}

/// Seed of the batch drawn at `step`, so any step can be reproduced alone.
pub fn step_seed(seed: u64, step: u64) -> u64 {
    seed ^ (step.wrapping_add(1)).wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

impl DataSource {
    pub fn batch(&self, batch: usize, seed: u64) -> Result<TrainBatch> {
        match self {
            DataSource::Copy(spec) => {
                let b = copy_task_batch(spec, batch, seed);
                Ok(TrainBatch {
                    loss_mask: b.loss_mask(),
                    tokens: b.tokens,
                })
            }
            DataSource::Text { corpus, seq_len } => {
                let (tokens, loss_mask) = corpus.sample(*seq_len, batch, seed)?;
                Ok(TrainBatch { tokens, loss_mask })
            }
            DataSource::Arithmetic(questions) => Ok(arithmetic::arithmetic_sft_batch(questions, batch, seed)),
        }
    }
}

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: u64,
    pub loss: f64,
    /// Argmax accuracy over the scored positions of the training batch.
    pub accuracy: f64,
    pub lr: f64,
    pub grad_norm: f64,
    pub lambdas: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub eval: Option<f64>,
    /// Seconds since the run started.
    pub wall_time: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatchStats {
    pub loss: f64,
    pub accuracy: f64,
}

/// Mean loss over a batch and its gradient.
pub fn batch_loss_and_grad<T: Real>(params: &ModelParams<T>, batch: &TrainBatch) -> Result<(BatchStats, ModelParams<T>)> {
    let count = masked_count(&batch.loss_mask);
    if count == 0 {
        return Err(SrmError::EmptyMask);
    }
    let scale = 1.0 / count as f64;
    let (stats, grads) = params.batch_gradient(&batch.tokens, |i, logits| {
        let (s, g) = sequence_ce(logits, &batch.tokens[i], &batch.loss_mask[i], scale)?;
        Ok(((s.loss_sum, s.correct), g))
    })?;
    let loss: f64 = stats.iter().map(|s| s.0).sum::<f64>() * scale;
    let correct: usize = stats.iter().map(|s| s.1).sum();
    Ok((
        BatchStats {
            loss,
            accuracy: correct as f64 / count as f64,
        },
        grads,
    ))
}

pub struct TrainOutcome<T> {
    pub params: ModelParams<T>,
    pub optimizer: OptimizerState<T>,
    pub records: Vec<MetricsRecord>,
}

/// Output locations of a run; both optional.
#[derive(Debug, Clone, Default)]
pub struct RunOutputs {
    pub metrics: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
}

fn write_record(w: &mut Option<BufWriter<File>>, r: &MetricsRecord) -> Result<()> {
    if let Some(w) = w.as_mut() {
        serde_json::to_writer(&mut *w, r)?;
        w.write_all(b"\n")?;
        w.flush()?;
    }
    Ok(())
}

fn save_if(path: Option<&Path>, params: &ModelParams<impl Real>) -> Result<()> {
    match path {
        Some(p) => checkpoint::save(params, p),
        None => Ok(()),
    }
}

/// Train for `cfg.steps` optimizer steps, or until an eval reaches
/// `cfg.target_eval`.
///
/// Deterministic given `cfg.seed`. A non-finite loss or update aborts the
/// run; the checkpoint then holds the last finite parameters.
pub fn train_loop<T, E>(
    mut params: ModelParams<T>,
    data: &DataSource,
    cfg: &TrainConfig,
    outputs: &RunOutputs,
    mut eval: E,
) -> Result<TrainOutcome<T>>
where
    T: Real,
    E: FnMut(u64, &ModelParams<T>) -> Result<f64>,
{
    let start = Instant::now();
    let mut opt = OptimizerState::new(&params, cfg.optimizer.clone());
    let mut log = match &outputs.metrics {
        Some(p) => Some(BufWriter::new(File::create(p)?)),
        None => None,
    };
    let ckpt = outputs.checkpoint.as_deref();
    let mut records = Vec::with_capacity(cfg.steps as usize);
    for step in 0..cfg.steps {
        let batch = data.batch(cfg.batch_size, step_seed(cfg.seed, step))?;
        let (stats, mut grads) = batch_loss_and_grad(&params, &batch)?;
        if !stats.loss.is_finite() {
            save_if(ckpt, &params)?;
            return Err(SrmError::NonFinite(format!("loss at step {step}")));
        }
        let before = params.clone();
        let st = match opt.step(&mut params, &mut grads) {
            Ok(st) => st,
            Err(e) => {
                save_if(ckpt, &params)?;
                return Err(e);
            }
        };
        if let Some(name) = params.first_non_finite() {
            save_if(ckpt, &before)?;
            return Err(SrmError::NonFinite(format!("{name} after step {step}")));
        }
        let done = step + 1;
        let eval_now = cfg.eval_every > 0 && (done % cfg.eval_every == 0 || done == cfg.steps);
        let rec = MetricsRecord {
            step: done,
            loss: stats.loss,
            accuracy: stats.accuracy,
            lr: st.lr,
            grad_norm: st.grad_norm,
            lambdas: params.lambdas().iter().map(|l| l.f64()).collect(),
            eval: if eval_now { Some(eval(done, &params)?) } else { None },
            wall_time: start.elapsed().as_secs_f64(),
        };
        write_record(&mut log, &rec)?;
        let reached = matches!((rec.eval, cfg.target_eval), (Some(e), Some(t)) if e >= t);
        records.push(rec);
        if reached {
            break;
        }
    }
    save_if(ckpt, &params)?;
    Ok(TrainOutcome {
        params,
        optimizer: opt,
        records,
    })
}
