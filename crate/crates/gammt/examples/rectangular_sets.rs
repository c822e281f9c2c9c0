//! Build the rectangular hull of per-step conditional sets, verify it, and
//! show a set that fails pasting closure.
//!
//! Run with: cargo run --example rectangular_sets

use gammt::ambiguity::{
    build_plm, check_rectangular, paste, ContinuationKernel, FinitePmf, KernelFamily, PathMeasure,
};

fn main() -> gammt::Result<()> {
    let p = FinitePmf::new(vec![0.3, 0.7])?;
    let q = FinitePmf::new(vec![0.8, 0.2])?;

    // Two plausible laws at each of two steps.
    let family = KernelFamily::iid(2, 2, vec![p.clone(), q.clone()])?;
    println!(
        "family: K={} T={}, {} laws per step",
        family.k(),
        family.horizon(),
        family.sets()[0].len()
    );
    println!("closed-form hull size: {}", family.enumeration_count()?);

    let hull = build_plm(&family)?;
    println!("distinct measures in the hull: {}", hull.len());
    for (i, m) in hull.iter().enumerate() {
        let probs: Vec<f64> = (0..4)
            .map(|idx| m.path_probability(&[idx / 2, idx % 2]).unwrap())
            .collect();
        println!(
            "  measure {i}: P(00)={:.3} P(01)={:.3} P(10)={:.3} P(11)={:.3}",
            probs[0], probs[1], probs[2], probs[3]
        );
    }

    let report = check_rectangular(&hull, &family)?;
    println!("\nhull report:\n{report}");

    // The two IID products alone are NOT rectangular: pasting p's first
    // step with q's continuation escapes the set.
    let pp = PathMeasure::iid_product(&p, 2)?;
    let qq = PathMeasure::iid_product(&q, 2)?;
    let cross = paste(&pp, &ContinuationKernel::from_measure(&qq, 1)?)?;
    println!(
        "cross paste P(0, then q-law): step-1 law {:?}, conditional after 0: {:?}",
        pp.one_step_conditional(&[])?.probs(),
        cross.one_step_conditional(&[0])?.probs()
    );
    let bad = [pp, qq];
    let report = check_rectangular(&bad, &family)?;
    println!("two-product report:\n{report}");
    assert!(!report.is_rectangular());
    Ok(())
}
