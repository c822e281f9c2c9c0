//! Check the tape's analytic gradients against central finite differences
//! on a full decoder cross-entropy.
//!
//! Run with: cargo run --example gradient_check

use gammt::autodiff::Tape;
use gammt::decoder::{Activation, DecoderConfig, DecoderParams};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

fn main() -> gammt::Result<()> {
    let cfg = DecoderConfig {
        vocab_size: 5,
        max_len: 8,
        d_model: 8,
        d_mlp: 16,
        n_layers: 1,
        n_heads: 2,
        activation: Activation::Gelu,
    };
    let mut rng = ChaCha20Rng::seed_from_u64(42);
    let params = DecoderParams::init(cfg, &mut rng)?;
    let x = [0usize, 3, 1, 4];

    // Next-token cross-entropy of the sequence, as a plain value.
    let loss_of = |p: &DecoderParams| -> f64 {
        let pm = p.probs(&x).unwrap();
        -(0..x.len() - 1)
            .map(|t| pm.prob(x[t + 1], t).ln())
            .sum::<f64>()
    };

    // The same loss on tape, then one reverse sweep.
    let mut tape = Tape::new();
    let staged = params.stage(&mut tape);
    let probs = staged.probs(&mut tape, &x)?;
    let mut acc = None;
    for t in 0..x.len() - 1 {
        let p = tape.index(probs, t, x[t + 1])?;
        let lp = tape.log(p)?;
        acc = Some(match acc {
            None => lp,
            Some(a) => tape.add(a, lp)?,
        });
    }
    let loss = tape.scale(acc.unwrap(), -1.0)?;
    let grads = tape.backward(loss)?;
    println!(
        "loss {:.6} over a tape of {} nodes",
        tape.value(loss).data()[0],
        tape.len()
    );

    let h = 1e-6;
    let mut names = Vec::new();
    params.visit(&mut |name, _| names.push(name.to_string()));
    let mut worst_rel: f64 = 0.0;
    let mut worst_abs: f64 = 0.0;
    let mut total = 0usize;
    for (slot, name) in names.iter().enumerate() {
        let analytic = grads.get_or_zeros(staged.nodes()[slot]);
        let mut max_here: f64 = 0.0;
        for e in 0..analytic.numel() {
            let eval = |delta: f64| {
                let mut p = params.clone();
                let mut k = 0;
                p.visit_mut(&mut |_, t| {
                    if k == slot {
                        t.data_mut()[e] += delta;
                    }
                    k += 1;
                });
                loss_of(&p)
            };
            let numeric = (eval(h) - eval(-h)) / (2.0 * h);
            let a = analytic.data()[e];
            let diff = (a - numeric).abs();
            worst_abs = worst_abs.max(diff);
            if diff > 1e-9 {
                let rel = diff / a.abs().max(numeric.abs());
                worst_rel = worst_rel.max(rel);
                max_here = max_here.max(rel);
            }
            total += 1;
        }
        println!(
            "{name:<26} {:>4} entries, max rel err {max_here:.2e}",
            analytic.numel()
        );
    }
    println!("\nchecked {total} parameters: max rel {worst_rel:.2e}, max abs {worst_abs:.2e}");
    Ok(())
}
