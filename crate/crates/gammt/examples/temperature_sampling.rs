//! Temperature scaling of a next-token law, and the empirical sampling
//! frequencies it produces.
//!
//! Run with: cargo run --example temperature_sampling

use gammt::inference::{sample_categorical, temper};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

fn main() -> gammt::Result<()> {
    let p = [0.05, 0.6, 0.25, 0.1];
    println!("base law: {p:?}\n");

    for tau in [2.0, 1.0, 0.5, 0.1, 1e-6] {
        let q = temper(&p, tau)?;
        let shown: Vec<String> = q.iter().map(|v| format!("{v:.4}")).collect();
        println!("tau = {tau:<8} q = [{}]", shown.join(", "));
    }

    println!("\n40,000 draws at tau = 0.5 versus the tempered law:");
    let q = temper(&p, 0.5)?;
    let mut rng = ChaCha20Rng::seed_from_u64(11);
    let n = 40_000;
    let mut counts = [0usize; 4];
    for _ in 0..n {
        counts[sample_categorical(&q, rng.random())] += 1;
    }
    for (v, &c) in counts.iter().enumerate() {
        let freq = c as f64 / n as f64;
        let se = (q[v] * (1.0 - q[v]) / n as f64).sqrt();
        println!(
            "  token {v}: expected {:.4}, observed {freq:.4} ({:+.2} standard errors)",
            q[v],
            (freq - q[v]) / se
        );
    }
    Ok(())
}
