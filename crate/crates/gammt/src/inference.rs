//! Autoregressive generation from a trained ensemble.
//!
//! Each step re-runs the forward pass on the current sequence and samples
//! one token from the tempered last-position conditional:
//!
//! * `RandomIndex`: draw a head, temper its conditional, sample once.
//! * `Max`: temper every head's conditional to `q_m`, sample `y_m` from
//!   each (in head order), emit the candidate whose own head assigns it
//!   the highest tempered probability (ties to the lowest head index).
//!
//! Generation stops on the eos token, after `max_new_tokens` emissions, or
//! when the sequence reaches the model's maximum input length. All draws
//! come from one seeded stream in a fixed order (head draw first, then
//! token draws), so runs are reproducible.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::error::{Error, Result};
use crate::model::{GammtParams, SelectionMechanism};

#[derive(Debug, Clone)]
pub struct GenConfig {
    pub temperature: f64,
    pub max_new_tokens: usize,
    pub seed: u64,
    pub selection: SelectionMechanism,
}

impl GenConfig {
    fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Contract(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        if self.max_new_tokens == 0 {
            return Err(Error::Contract("max_new_tokens must be >= 1".to_string()));
        }
        Ok(())
    }
}

/// Temperature-sharpen a distribution: `q_i = p_i^(1/tau) / sum_j p_j^(1/tau)`,
/// computed in log space. Zero entries stay exactly zero.
pub fn temper(p: &[f64], tau: f64) -> Result<Vec<f64>> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::Contract(format!(
            "temperature must be positive, got {tau}"
        )));
    }
    if p.is_empty() || p.iter().all(|&v| v == 0.0) {
        return Err(Error::Contract(
            "temper: distribution has no mass".to_string(),
        ));
    }
    if p.iter().any(|&v| v < 0.0 || !v.is_finite()) {
        return Err(Error::Contract(
            "temper: probabilities must be non-negative and finite".to_string(),
        ));
    }
    let logs: Vec<f64> = p.iter().map(|&v| v.ln() / tau).collect();
    let max = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut q: Vec<f64> = logs.iter().map(|&l| (l - max).exp()).collect();
    let sum: f64 = q.iter().sum();
    for v in &mut q {
        *v /= sum;
    }
    Ok(q)
}

/// Inverse-CDF categorical sample with a single uniform draw `u` in
/// `[0, 1)`. Rounding at the top of the CDF falls back to the last
/// positive-probability index.
pub fn sample_categorical(q: &[f64], u: f64) -> usize {
    let mut cum = 0.0;
    let mut last_nonzero = 0;
    for (i, &p) in q.iter().enumerate() {
        if p > 0.0 {
            last_nonzero = i;
        }
        cum += p;
        if u < cum {
            return i;
        }
    }
    last_nonzero
}

/// Generate a continuation of `prompt`; the returned sequence starts with
/// the prompt itself. `eos_id` terminates generation and is kept as the
/// final token.
pub fn generate(
    prompt: &[usize],
    params: &GammtParams,
    eos_id: usize,
    cfg: &GenConfig,
) -> Result<Vec<usize>> {
    cfg.validate()?;
    cfg.selection.validate(params.m())?;
    let max_len = params.max_len();
    if prompt.is_empty() || prompt.len() >= max_len {
        return Err(Error::BadLength {
            len: prompt.len(),
            min: 1,
            max: max_len - 1,
        });
    }
    for &id in prompt {
        if id >= params.vocab_size() {
            return Err(Error::IdOutOfRange {
                id,
                vocab: params.vocab_size(),
            });
        }
    }

    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
    let mut ids = prompt.to_vec();
    let mut emitted = 0;
    loop {
        let probs = params.forward(&ids)?;
        let last = ids.len() - 1;
        let token = match &cfg.selection {
            SelectionMechanism::RandomIndex { .. } => {
                let head = cfg
                    .selection
                    .draw_index(&mut rng)
                    .expect("RandomIndex always draws");
                let q = temper(probs[head].column(last), cfg.temperature)?;
                let u: f64 = rng.random();
                sample_categorical(&q, u)
            }
            SelectionMechanism::Max => {
                let mut best: Option<(f64, usize)> = None;
                for pm in &probs {
                    let q = temper(pm.column(last), cfg.temperature)?;
                    let u: f64 = rng.random();
                    let candidate = sample_categorical(&q, u);
                    let score = q[candidate];
                    if best.is_none_or(|(s, _)| score > s) {
                        best = Some((score, candidate));
                    }
                }
                best.expect("M >= 1").1
            }
        };
        ids.push(token);
        emitted += 1;
        if token == eos_id || emitted == cfg.max_new_tokens || ids.len() == max_len {
            return Ok(ids);
        }
    }
}
