//! Joint next-token training of all heads under the selection-based
//! negative log-likelihood, with plain SGD (one step per sequence).
//!
//! Per position `t` the loss takes `select(S, {P_m[x[t+1], t]})`; under
//! `Max` only the argmax head receives gradient from that term, under
//! `RandomIndex` only the drawn head (fresh draw per position per visit).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::autodiff::{Tape, Tensor};
use crate::decoder::ProbMatrix;
use crate::error::{Error, Result};
use crate::model::{GammtParams, SelectionMechanism};

/// Selected probabilities are floored here before the log, so a dead head
/// cannot produce an infinite loss.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub seed: u64,
    pub selection: SelectionMechanism,
    /// Optional global gradient max-norm across all heads.
    pub grad_clip: Option<f64>,
    /// Emit a log record every `log_every` steps (1-based).
    pub log_every: usize,
}

impl TrainConfig {
    fn validate(&self) -> Result<()> {
        // A zero rate is the well-defined null update; only negative or
        // non-finite rates are rejected.
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Contract(format!(
                "learning rate must be non-negative, got {}",
                self.learning_rate
            )));
        }
        if self.epochs == 0 {
            return Err(Error::Contract("epochs must be >= 1".to_string()));
        }
        if self.log_every == 0 {
            return Err(Error::Contract("log_every must be >= 1".to_string()));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0 && c.is_finite()) {
                return Err(Error::Contract(format!(
                    "grad_clip must be positive, got {c}"
                )));
            }
        }
        Ok(())
    }
}

/// One row of the training log.
#[derive(Debug, Clone, PartialEq)]
pub struct LossRecord {
    pub step: usize,
    pub epoch: usize,
    pub seq_index: usize,
    pub loss: f64,
}

impl LossRecord {
    /// CSV line matching the `step,epoch,seq_index,loss` header.
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{}",
            self.step, self.epoch, self.seq_index, self.loss
        )
    }
}

pub const LOSS_CSV_HEADER: &str = "step,epoch,seq_index,loss";

#[derive(Debug)]
pub struct TrainOutcome {
    pub params: GammtParams,
    pub history: Vec<LossRecord>,
}

/// The head chosen at one position and the probability it assigned to the
/// observed next token.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PositionPick {
    pub head: usize,
    pub value: f64,
}

/// Apply the selection mechanism at every predictable position of `x`.
/// `RandomIndex` consumes one draw per position from `rng`, in position
/// order.
pub fn choose_per_position(
    probs: &[ProbMatrix],
    x: &[usize],
    selection: &SelectionMechanism,
    rng: &mut impl Rng,
) -> Result<Vec<PositionPick>> {
    if x.len() < 2 {
        return Err(Error::Contract(format!(
            "sequence of length {} has no predictable position",
            x.len()
        )));
    }
    selection.validate(probs.len())?;
    for pm in probs {
        if pm.len() != x.len() {
            return Err(Error::ShapeMismatch {
                op: "choose_per_position",
                lhs: vec![pm.vocab_size(), pm.len()],
                rhs: vec![x.len()],
            });
        }
    }
    let vocab = probs[0].vocab_size();
    for &id in x {
        if id >= vocab {
            return Err(Error::IdOutOfRange { id, vocab });
        }
    }
    (0..x.len() - 1)
        .map(|t| {
            let values: Vec<f64> = probs.iter().map(|pm| pm.prob(x[t + 1], t)).collect();
            let draw = selection.draw_index(rng);
            let (value, head) = selection.select(&values, draw)?;
            Ok(PositionPick { head, value })
        })
        .collect()
}

fn nll(picks: &[PositionPick]) -> f64 {
    picks.iter().map(|p| -p.value.max(PROB_FLOOR).ln()).sum()
}

/// Selection-based negative log-likelihood of `x` under per-head
/// conditionals: `-sum_t log select(S, {P_m[x[t+1], t]})`, each selected
/// probability floored at [`PROB_FLOOR`].
pub fn loss_from_probs(
    probs: &[ProbMatrix],
    x: &[usize],
    selection: &SelectionMechanism,
    rng: &mut impl Rng,
) -> Result<f64> {
    Ok(nll(&choose_per_position(probs, x, selection, rng)?))
}

/// Train all heads jointly for `epochs` passes over `dataset` in order,
/// one SGD step per sequence. Deterministic given (dataset order, initial
/// parameters, seed). `on_log` fires for every step `log_every` divides.
pub fn train(
    dataset: &[Vec<usize>],
    mut params: GammtParams,
    cfg: &TrainConfig,
    mut on_log: impl FnMut(&LossRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    cfg.selection.validate(params.m())?;
    if dataset.is_empty() {
        return Err(Error::Contract("dataset is empty".to_string()));
    }
    for x in dataset {
        if x.len() < 2 || x.len() > params.max_len() {
            return Err(Error::BadLength {
                len: x.len(),
                min: 2,
                max: params.max_len(),
            });
        }
        for &id in x {
            if id >= params.vocab_size() {
                return Err(Error::IdOutOfRange {
                    id,
                    vocab: params.vocab_size(),
                });
            }
        }
    }

    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
    let mut history = Vec::with_capacity(cfg.epochs * dataset.len());
    let mut step = 0;
    for epoch in 1..=cfg.epochs {
        for (seq_index, x) in dataset.iter().enumerate() {
            step += 1;
            let loss = sgd_step(&mut params, x, cfg, &mut rng, step)?;
            let record = LossRecord {
                step,
                epoch,
                seq_index,
                loss,
            };
            if step % cfg.log_every == 0 {
                on_log(&record);
            }
            history.push(record);
        }
    }
    Ok(TrainOutcome { params, history })
}

/// One forward/backward/update over a single sequence. Heads run on
/// disjoint tapes; only positions routed to a head contribute to its loss.
fn sgd_step(
    params: &mut GammtParams,
    x: &[usize],
    cfg: &TrainConfig,
    rng: &mut ChaCha20Rng,
    step: usize,
) -> Result<f64> {
    let m = params.m();
    let abort = |head: usize, source: Error| Error::TrainingAborted {
        step,
        head,
        source: Box::new(source),
    };

    // Forward every head on its own tape.
    let mut tapes = Vec::with_capacity(m);
    let mut staged = Vec::with_capacity(m);
    let mut prob_nodes = Vec::with_capacity(m);
    let mut prob_values = Vec::with_capacity(m);
    for (h, head) in params.heads().iter().enumerate() {
        let mut tape = Tape::new();
        let s = head.stage(&mut tape);
        let node = s.probs(&mut tape, x).map_err(|e| abort(h, e))?;
        prob_values.push(ProbMatrix::from_tensor(tape.value(node)).map_err(|e| abort(h, e))?);
        tapes.push(tape);
        staged.push(s);
        prob_nodes.push(node);
    }

    let picks = choose_per_position(&prob_values, x, &cfg.selection, rng)?;
    let loss_value = nll(&picks);
    if !loss_value.is_finite() {
        return Err(abort(0, Error::NonFinite { op: "loss" }));
    }

    // Per-head backward. A head with no routed positions keeps zero grads.
    let mut head_grads: Vec<Option<Vec<Tensor>>> = vec![None; m];
    for h in 0..m {
        let tape = &mut tapes[h];
        let mut acc = None;
        for (t, pick) in picks.iter().enumerate() {
            if pick.head != h {
                continue;
            }
            // Floored terms are constants: the clamp's subgradient is zero.
            let term = if pick.value < PROB_FLOOR {
                tape.leaf(Tensor::scalar(PROB_FLOOR))
            } else {
                tape.index(prob_nodes[h], t, x[t + 1])
                    .map_err(|e| abort(h, e))?
            };
            let lp = tape.log(term).map_err(|e| abort(h, e))?;
            acc = Some(match acc {
                None => lp,
                Some(a) => tape.add(a, lp).map_err(|e| abort(h, e))?,
            });
        }
        let Some(acc) = acc else {
            continue;
        };
        let loss_node = tape.scale(acc, -1.0).map_err(|e| abort(h, e))?;
        let grads = tape.backward(loss_node).map_err(|e| abort(h, e))?;
        let tensors: Vec<Tensor> = staged[h]
            .nodes()
            .iter()
            .map(|&id| grads.get_or_zeros(id))
            .collect();
        head_grads[h] = Some(tensors);
    }

    // Optional global max-norm clip across every head's gradients.
    let mut scale = 1.0;
    if let Some(clip) = cfg.grad_clip {
        let sq: f64 = head_grads
            .iter()
            .flatten()
            .flat_map(|ts| ts.iter())
            .flat_map(|t| t.data())
            .map(|g| g * g)
            .sum();
        let norm = sq.sqrt();
        if norm > clip {
            scale = clip / norm;
        }
    }

    // Serial parameter updates after the per-head joins.
    let lr = cfg.learning_rate;
    for (h, grads) in head_grads.into_iter().enumerate() {
        let Some(grads) = grads else { continue };
        for g in &grads {
            if !g.is_finite() {
                return Err(abort(h, Error::NonFinite { op: "gradient" }));
            }
        }
        let mut slot = 0;
        params.heads_mut()[h].visit_mut(&mut |_, tensor| {
            for (p, g) in tensor.data_mut().iter_mut().zip(grads[slot].data()) {
                *p -= lr * scale * g;
            }
            slot += 1;
        });
    }
    Ok(loss_value)
}
