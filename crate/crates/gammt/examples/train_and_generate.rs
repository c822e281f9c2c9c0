//! Train a two-head ensemble on a toy character corpus, then generate
//! continuations under both selection mechanisms.
//!
//! Run with: cargo run --example train_and_generate

use gammt::decoder::{Activation, DecoderConfig};
use gammt::inference::{generate, GenConfig};
use gammt::model::{GammtParams, SelectionMechanism};
use gammt::tokenizer::{encode_corpus_lines, Vocabulary};
use gammt::training::{train, TrainConfig};

fn main() -> gammt::Result<()> {
    // Two alternating patterns, so no single law explains every line.
    let corpus: String = (0..40)
        .map(|i| {
            if i % 2 == 0 {
                "ababababab\n"
            } else {
                "aabbaabbaa\n"
            }
        })
        .collect();
    let vocab = Vocabulary::from_corpus(&corpus)?;
    let dataset = encode_corpus_lines(&corpus, &vocab, 16)?;
    println!(
        "corpus: {} lines, vocabulary of {} tokens (eos id {})",
        dataset.len(),
        vocab.size(),
        vocab.eos_id()
    );

    let cfg = DecoderConfig {
        vocab_size: vocab.size(),
        max_len: 16,
        d_model: 16,
        d_mlp: 64,
        n_layers: 1,
        n_heads: 2,
        activation: Activation::Gelu,
    };
    let params = GammtParams::init(&[cfg.clone(), cfg], 7)?;

    let train_cfg = TrainConfig {
        learning_rate: 0.05,
        epochs: 15,
        seed: 7,
        selection: SelectionMechanism::Max,
        grad_clip: None,
        log_every: 120,
    };
    let outcome = train(&dataset, params, &train_cfg, |r| {
        println!("step {:4}  epoch {:2}  loss {:.4}", r.step, r.epoch, r.loss);
    })?;
    let first = outcome.history.first().unwrap().loss;
    let last = outcome.history.last().unwrap().loss;
    println!("loss: {first:.4} -> {last:.4}\n");

    for (name, selection) in [
        ("max", SelectionMechanism::Max),
        ("random", SelectionMechanism::uniform_random(2)),
    ] {
        println!("selection = {name}:");
        for seed in 0..3 {
            let gen_cfg = GenConfig {
                temperature: 0.7,
                max_new_tokens: 12,
                seed,
                selection: selection.clone(),
            };
            let prompt = vocab.encode("ab")?;
            let ids = generate(&prompt, &outcome.params, vocab.eos_id(), &gen_cfg)?;
            println!("  seed {seed}: {}", vocab.decode(&ids)?);
        }
    }
    Ok(())
}
