//! From a trained ensemble to a finite set of sequence laws: enumerate the
//! selection-path measures after a prompt and verify they form a
//! rectangular set.
//!
//! Run with: cargo run --example model_bridge

use gammt::ambiguity::induced_set;
use gammt::decoder::{Activation, DecoderConfig};
use gammt::model::{GammtParams, SelectionMechanism};
use gammt::tokenizer::{encode_corpus_lines, Vocabulary};
use gammt::training::{train, TrainConfig};

fn main() -> gammt::Result<()> {
    let corpus = "abba\nbaab\nabab\nbbaa\n".repeat(5);
    let vocab = Vocabulary::from_corpus(&corpus)?;
    let dataset = encode_corpus_lines(&corpus, &vocab, 8)?;

    let cfg = DecoderConfig {
        vocab_size: vocab.size(),
        max_len: 8,
        d_model: 8,
        d_mlp: 16,
        n_layers: 1,
        n_heads: 2,
        activation: Activation::Gelu,
    };
    let params = GammtParams::init(&[cfg.clone(), cfg], 3)?;
    let trained = train(
        &dataset,
        params,
        &TrainConfig {
            learning_rate: 0.05,
            epochs: 6,
            seed: 3,
            selection: SelectionMechanism::Max,
            grad_clip: None,
            log_every: usize::MAX,
        },
        |_| {},
    )?
    .params;

    let prompt = vocab.encode("a")?;
    let horizon = 2;
    let induced = induced_set(&trained, &prompt, horizon)?;
    println!(
        "after prompt \"a\": K={} outcomes, horizon {}, {} selection-path measures",
        induced.k(),
        induced.horizon(),
        induced.measures().len()
    );

    println!("\nhead conditionals at the root (history = []):");
    for (h, pmf) in induced.conditional_set(&[]).iter().enumerate() {
        println!("  head {h}: {:?}", rounded(pmf.probs()));
    }

    println!("\npath probabilities of the first measures:");
    for (i, m) in induced.measures().iter().take(4).enumerate() {
        let paths: Vec<String> = (0..induced.k().pow(2))
            .map(|idx| {
                let path = [idx / induced.k(), idx % induced.k()];
                format!("{:.4}", m.path_probability(&path).unwrap())
            })
            .collect();
        println!("  measure {i}: [{}]", paths.join(", "));
    }

    let report = induced.check_rectangular()?;
    print!("\n{report}");
    assert!(report.is_rectangular());
    println!("the induced set is rectangular");
    Ok(())
}

fn rounded(probs: &[f64]) -> Vec<f64> {
    probs.iter().map(|p| (p * 1e4).round() / 1e4).collect()
}
