//! Token selection from a logit row: greedy or temperature plus top-p.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SrmError};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplerSpec {
    /// Zero selects greedy decoding.
    pub temperature: f64,
    pub top_p: f64,
}

impl SamplerSpec {
    pub const GREEDY: SamplerSpec = SamplerSpec {
        temperature: 0.0,
        top_p: 1.0,
    };

    pub fn new(temperature: f64, top_p: f64) -> Result<Self> {
        if !(temperature >= 0.0 && temperature.is_finite()) {
            return Err(SrmError::config("temperature", format!("{temperature} is not a finite non-negative value")));
        }
        if !(top_p > 0.0 && top_p <= 1.0) {
            return Err(SrmError::config("top_p", format!("{top_p} is outside (0, 1]")));
        }
        Ok(SamplerSpec { temperature, top_p })
    }

    pub fn is_greedy(&self) -> bool {
        self.temperature == 0.0
    }
}

impl Default for SamplerSpec {
    /// Temperature 0.7 with top-p 0.9.
    fn default() -> Self {
        SamplerSpec {
            temperature: 0.7,
            top_p: 0.9,
        }
    }
}

/// Index of the largest logit; the lowest id wins ties.
pub fn argmax(logits: &[f64]) -> u32 {
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate().skip(1) {
        if v > logits[best] {
            best = i;
        }
    }
    best as u32
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    logits.iter().map(|v| v - lse).collect()
}

/// Softmax at `temperature`, sorted by descending probability (lower id first
/// on ties), truncated to the longest prefix whose mass does not exceed
/// `top_p` (never fewer than one token) and renormalized.
pub fn nucleus(logits: &[f64], temperature: f64, top_p: f64) -> Vec<(u32, f64)> {
    let scaled: Vec<f64> = logits.iter().map(|v| v / temperature).collect();
    let lp = log_softmax(&scaled);
    let mut order: Vec<(u32, f64)> = lp.iter().enumerate().map(|(i, l)| (i as u32, l.exp())).collect();
    order.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let mut cum = 0.0;
    let mut keep = 0;
    for (_, p) in &order {
        if keep > 0 && cum + p > top_p + 1e-12 {
            break;
        }
        cum += p;
        keep += 1;
    }
    order.truncate(keep);
    for e in &mut order {
        e.1 /= cum;
    }
    order
}

/// Draw one token and its log-probability under the distribution it was
/// drawn from. Greedy choices report the temperature-1 log-softmax.
pub fn sample<R: Rng>(logits: &[f64], spec: &SamplerSpec, rng: &mut R) -> (u32, f64) {
    if spec.is_greedy() {
        let id = argmax(logits);
        return (id, log_softmax(logits)[id as usize]);
    }
    let nuc = nucleus(logits, spec.temperature, spec.top_p);
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for &(id, p) in &nuc {
        acc += p;
        if u < acc {
            return (id, p.ln());
        }
    }
    let (id, p) = *nuc.last().expect("nucleus holds at least one token");
    (id, p.ln())
}
