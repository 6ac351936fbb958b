//! One GRPO update: recurrent rollouts, verification, balanced resampling,
//! then a parallel-form gradient step on the same parameters.

use serde::{Deserialize, Serialize};

use crate::error::{Result, SrmError};
use crate::model::{GenerateOptions, ModelParams};
use crate::par;
use crate::real::Real;
use crate::rlvr::objective::grpo_objective;
use crate::rlvr::passk::mean_pass_at_k;
use crate::rlvr::resample::{balanced_resample, ResampleSpec, RolloutRecord};
use crate::rlvr::verifier::{Question, Verifier};
use crate::sampling::SamplerSpec;
use crate::tensor::Matrix;
use crate::tokenizer;
use crate::train::optim::{OptimizerConfig, OptimizerState};
use crate::train::trainer::step_seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GrpoConfig {
    /// Rollouts per question `G`.
    pub group_size: usize,
    /// Training batch `b` after resampling.
    pub batch: usize,
    /// KL coefficient `β`.
    pub beta: f64,
    pub sampler: SamplerSpec,
    pub max_new: usize,
    pub stop_token: Option<u32>,
    pub seed: u64,
    pub optimizer: OptimizerConfig,
}

impl Default for GrpoConfig {
    fn default() -> Self {
        GrpoConfig {
            group_size: 8,
            batch: 16,
            beta: 0.04,
            sampler: SamplerSpec::default(),
            max_new: 4,
            stop_token: None,
            seed: 0,
            optimizer: OptimizerConfig {
                lr: 1e-4,
                weight_decay: 0.0,
                max_grad_norm: Some(0.1),
                ..OptimizerConfig::default()
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GrpoStepReport {
    pub step: u64,
    /// Mean reward over every rollout generated this step.
    pub pool_reward: f64,
    /// Good records in the resampled batch.
    pub batch_good: usize,
    pub with_replacement: bool,
    pub objective: f64,
    pub kl: f64,
    /// Rollouts whose verifier failed; they count as reward 0.
    pub verifier_errors: usize,
    /// Mean pass@1 and pass@G over the questions of this step.
    pub pass_at_1: f64,
    pub pass_at_group: f64,
}

/// Log-probabilities of `completion` after `prompt` at `temperature`, with
/// the softmax derivative terms needed to backpropagate through them.
fn completion_logprobs<T: Real>(logits: &Matrix<T>, prompt_len: usize, completion: &[u32], temperature: f64) -> (Vec<f64>, Vec<Vec<f64>>) {
    let mut lps = Vec::with_capacity(completion.len());
    let mut probs = Vec::with_capacity(completion.len());
    for (t, &tok) in completion.iter().enumerate() {
        let row: Vec<f64> = logits.row(prompt_len - 1 + t).iter().map(|v| v.f64() / temperature).collect();
        let lsm = crate::sampling::log_softmax(&row);
        lps.push(lsm[tok as usize]);
        probs.push(lsm.iter().map(|l| l.exp()).collect());
    }
    (lps, probs)
}

/// Roll out `G` completions per question, score them and return the pool.
pub fn rollouts<T: Real>(
    params: &ModelParams<T>,
    questions: &[Question],
    verifier: &dyn Verifier,
    cfg: &GrpoConfig,
    seed: u64,
) -> Result<(Vec<RolloutRecord>, usize)> {
    let prompts: Vec<Vec<u32>> = questions
        .iter()
        .flat_map(|q| {
            let mut p = vec![tokenizer::BOS];
            p.extend(tokenizer::encode(&q.prompt));
            std::iter::repeat_n(p, cfg.group_size)
        })
        .collect();
    let mut opts = GenerateOptions::new(cfg.max_new, cfg.sampler, seed);
    opts.stop_token = cfg.stop_token;
    let gens = params.generate(&prompts, &opts)?;
    let verdicts = par::map_indexed(gens.len(), |i| {
        let q = &questions[i / cfg.group_size];
        verifier.verify(q, &tokenizer::decode(&gens[i].tokens))
    });
    let mut errors = 0;
    let pool = gens
        .into_iter()
        .zip(prompts)
        .zip(verdicts)
        .enumerate()
        .map(|(i, ((g, prompt), v))| {
            let ok = v.unwrap_or_else(|_| {
                errors += 1;
                false
            });
            RolloutRecord {
                question_id: questions[i / cfg.group_size].id.clone(),
                prompt,
                tokens: g.tokens,
                logprobs: g.logprobs,
                reward: if ok { 1.0 } else { 0.0 },
                group: i / cfg.group_size,
            }
        })
        .collect();
    Ok((pool, errors))
}

/// One GRPO step. Rollouts come from the recurrent form of `params`; the
/// objective and its gradient come from the parallel form of the same
/// parameters, against frozen `reference` parameters for the KL term.
pub fn grpo_train_step<T: Real>(
    params: &mut ModelParams<T>,
    reference: &ModelParams<T>,
    optimizer: &mut OptimizerState<T>,
    questions: &[Question],
    verifier: &dyn Verifier,
    cfg: &GrpoConfig,
    step: u64,
) -> Result<GrpoStepReport> {
    if questions.is_empty() || cfg.group_size == 0 {
        return Err(SrmError::config("group_size", "need at least one question and one rollout"));
    }
    let seed = step_seed(cfg.seed, step);
    let (pool, verifier_errors) = rollouts(params, questions, verifier, cfg, seed)?;
    let pool_reward = pool.iter().map(|r| r.reward).sum::<f64>() / pool.len() as f64;
    let counts: Vec<(usize, usize)> = pool
        .chunks(cfg.group_size)
        .map(|g| (g.len(), g.iter().filter(|r| r.is_good()).count()))
        .collect();
    let pass_at_1 = mean_pass_at_k(&counts, 1)?;
    let pass_at_group = mean_pass_at_k(&counts, cfg.group_size)?;

    let spec = ResampleSpec {
        batch: cfg.batch,
        group_size: cfg.group_size,
        seed,
    };
    let batch = balanced_resample(&pool, &spec)?;
    let temperature = if cfg.sampler.is_greedy() { 1.0 } else { cfg.sampler.temperature };
    let seqs: Vec<Vec<u32>> = batch
        .records
        .iter()
        .map(|r| r.prompt.iter().chain(&r.tokens).copied().collect())
        .collect();
    let trimmed: Vec<Vec<u32>> = seqs.iter().map(|s| s[..s.len() - 1].to_vec()).collect();

    let ref_logits = reference.forward_parallel(&trimmed)?;
    let ref_lps: Vec<Vec<f64>> = batch
        .records
        .iter()
        .zip(&ref_logits)
        .map(|(r, l)| completion_logprobs(l, r.prompt.len(), &r.tokens, temperature).0)
        .collect();
    let cur_logits = params.forward_parallel(&trimmed)?;
    let cur_lps: Vec<Vec<f64>> = batch
        .records
        .iter()
        .zip(&cur_logits)
        .map(|(r, l)| completion_logprobs(l, r.prompt.len(), &r.tokens, temperature).0)
        .collect();
    let rewards: Vec<f64> = batch.records.iter().map(|r| r.reward).collect();
    let obj = grpo_objective(&rewards, &cur_lps, &ref_lps, cfg.beta)?;

    // Ascend the objective: the loss handed to the optimizer is −J.
    let (_, mut grads) = params.batch_gradient(&trimmed, |i, logits| {
        let r = &batch.records[i];
        let (_, probs) = completion_logprobs(logits, r.prompt.len(), &r.tokens, temperature);
        let mut d = Matrix::zeros(logits.rows(), logits.cols());
        for (t, (&tok, p)) in r.tokens.iter().zip(&probs).enumerate() {
            let coef = -obj.dlogprob[i][t] / temperature;
            let row = d.row_mut(r.prompt.len() - 1 + t);
            for (dv, pv) in row.iter_mut().zip(p) {
                *dv = T::of(-coef * pv);
            }
            row[tok as usize] += T::of(coef);
        }
        Ok(((), d))
    })?;
    optimizer.step(params, &mut grads)?;
    Ok(GrpoStepReport {
        step,
        pool_reward,
        batch_good: batch.good,
        with_replacement: batch.with_replacement,
        objective: obj.value,
        kl: obj.kl,
        verifier_errors,
        pass_at_1,
        pass_at_group,
    })
}

/// Fraction of `samples` rollouts per question that verify.
pub fn mean_reward<T: Real>(
    params: &ModelParams<T>,
    questions: &[Question],
    verifier: &dyn Verifier,
    cfg: &GrpoConfig,
    samples: usize,
    seed: u64,
) -> Result<f64> {
    let eval = GrpoConfig {
        group_size: samples,
        ..cfg.clone()
    };
    let (pool, _) = rollouts(params, questions, verifier, &eval, seed)?;
    Ok(pool.iter().map(|r| r.reward).sum::<f64>() / pool.len().max(1) as f64)
}
