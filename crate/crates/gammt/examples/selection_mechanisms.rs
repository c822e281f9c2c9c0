//! How the two selection mechanisms combine per-position probabilities,
//! and how gradient routing follows the selection.
//!
//! Run with: cargo run --example selection_mechanisms

use gammt::decoder::{Activation, DecoderConfig, ProbMatrix};
use gammt::model::{GammtParams, SelectionMechanism};
use gammt::training::{choose_per_position, loss_from_probs, train, TrainConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

fn column(vocab: usize, hot: usize, p: f64) -> Vec<f64> {
    let rest = (1.0 - p) / (vocab - 1) as f64;
    (0..vocab)
        .map(|v| if v == hot { p } else { rest })
        .collect()
}

fn main() -> gammt::Result<()> {
    // Two hand-built heads over a 3-token alphabet and the sequence [0, 1, 2].
    // Head A is confident about token 1 after "0"; head B about token 2
    // after "0 1".
    let x = [0usize, 1, 2];
    let head_a = ProbMatrix::new(
        3,
        3,
        [column(3, 1, 0.8), column(3, 2, 0.2), column(3, 0, 0.4)].concat(),
    )?;
    let head_b = ProbMatrix::new(
        3,
        3,
        [column(3, 1, 0.3), column(3, 2, 0.9), column(3, 0, 0.4)].concat(),
    )?;
    let heads = [head_a, head_b];

    println!("per-position probabilities of the observed next token:");
    for t in 0..x.len() - 1 {
        println!(
            "  position {t}: head A {:.2}, head B {:.2}",
            heads[0].prob(x[t + 1], t),
            heads[1].prob(x[t + 1], t)
        );
    }

    let mut rng = ChaCha20Rng::seed_from_u64(0);
    let picks = choose_per_position(&heads, &x, &SelectionMechanism::Max, &mut rng)?;
    println!("\nmax selection picks: {picks:?}");
    let max_loss = loss_from_probs(&heads, &x, &SelectionMechanism::Max, &mut rng)?;
    println!(
        "max loss      = {max_loss:.6}  (-ln 0.8 - ln 0.9 = {:.6})",
        -(0.8f64.ln() + 0.9f64.ln())
    );

    for seed in 0..3 {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let s = SelectionMechanism::uniform_random(2);
        let loss = loss_from_probs(&heads, &x, &s, &mut rng)?;
        println!("random loss (seed {seed}) = {loss:.6}");
    }

    // Gradient routing: with one predictable position, a Max step updates
    // only the argmax head.
    let cfg = DecoderConfig {
        vocab_size: 3,
        max_len: 4,
        d_model: 8,
        d_mlp: 16,
        n_layers: 1,
        n_heads: 2,
        activation: Activation::Gelu,
    };
    let params = GammtParams::init(&[cfg.clone(), cfg], 1)?;
    let probs = params.forward(&[0, 1])?;
    let winner = if probs[0].prob(1, 0) >= probs[1].prob(1, 0) {
        0
    } else {
        1
    };
    let before = params.clone();
    let out = train(
        &[vec![0, 1]],
        params,
        &TrainConfig {
            learning_rate: 0.05,
            epochs: 1,
            seed: 0,
            selection: SelectionMechanism::Max,
            grad_clip: None,
            log_every: 1,
        },
        |_| {},
    )?;
    println!("\none max-selection SGD step on [0, 1]: argmax head is {winner}");
    for h in 0..2 {
        let changed = out.params.heads()[h] != before.heads()[h];
        println!("  head {h} parameters changed: {changed}");
    }
    Ok(())
}
