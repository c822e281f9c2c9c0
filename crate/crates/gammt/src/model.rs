//! The GAMMT ensemble: M parallel decoder heads plus the selection
//! mechanism that combines their per-position probabilities.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::decoder::{DecoderConfig, DecoderParams, ProbMatrix};
use crate::error::{Error, Result};

/// Rule for combining M per-position scalar probabilities into one.
#[derive(Debug, Clone, PartialEq)]
pub enum SelectionMechanism {
    /// Take the maximum; ties break to the lowest head index.
    Max,
    /// Draw a head index from a fixed distribution over `[0, M)`.
    RandomIndex { weights: Vec<f64> },
}

impl SelectionMechanism {
    /// `RandomIndex` with the uniform distribution over `m` heads.
    pub fn uniform_random(m: usize) -> Self {
        SelectionMechanism::RandomIndex {
            weights: vec![1.0 / m as f64; m],
        }
    }

    pub fn validate(&self, m: usize) -> Result<()> {
        if m == 0 {
            return Err(Error::Contract("ensemble must have M >= 1".to_string()));
        }
        if let SelectionMechanism::RandomIndex { weights } = self {
            if weights.len() != m {
                return Err(Error::Contract(format!(
                    "selection weights have length {}, expected {m}",
                    weights.len()
                )));
            }
            if weights.iter().any(|&w| !w.is_finite() || w < 0.0) {
                return Err(Error::Contract(
                    "selection weights must be non-negative".to_string(),
                ));
            }
            let sum: f64 = weights.iter().sum();
            if (sum - 1.0).abs() > 1e-12 {
                return Err(Error::Contract(format!(
                    "selection weights sum to {sum}, not 1"
                )));
            }
        }
        Ok(())
    }

    /// Draw a head index for `RandomIndex` (inverse CDF over the weights,
    /// one uniform draw). `Max` consumes no randomness and returns `None`.
    pub fn draw_index(&self, rng: &mut impl Rng) -> Option<usize> {
        match self {
            SelectionMechanism::Max => None,
            SelectionMechanism::RandomIndex { weights } => {
                let u: f64 = rng.random();
                let mut cum = 0.0;
                let mut last_nonzero = 0;
                for (i, &w) in weights.iter().enumerate() {
                    if w > 0.0 {
                        last_nonzero = i;
                    }
                    cum += w;
                    if u < cum {
                        return Some(i);
                    }
                }
                Some(last_nonzero)
            }
        }
    }

    /// Combine M scalars: `Max` returns the maximum (lowest index on ties);
    /// `RandomIndex` returns the value at the supplied draw.
    pub fn select(&self, values: &[f64], draw: Option<usize>) -> Result<(f64, usize)> {
        if values.is_empty() {
            return Err(Error::Contract("select: empty value list".to_string()));
        }
        match self {
            SelectionMechanism::Max => {
                let mut best = 0;
                for (i, &v) in values.iter().enumerate().skip(1) {
                    if v > values[best] {
                        best = i;
                    }
                }
                Ok((values[best], best))
            }
            SelectionMechanism::RandomIndex { .. } => {
                let u = draw.ok_or_else(|| {
                    Error::Contract("select: RandomIndex requires a drawn index".to_string())
                })?;
                if u >= values.len() {
                    return Err(Error::Contract(format!(
                        "select: drawn index {u} out of range for {} heads",
                        values.len()
                    )));
                }
                Ok((values[u], u))
            }
        }
    }
}

/// Parameters of the full ensemble: M fully disjoint decoder heads sharing
/// a vocabulary and maximum input length.
#[derive(Debug, Clone, PartialEq)]
pub struct GammtParams {
    heads: Vec<DecoderParams>,
}

impl GammtParams {
    /// Independently initialize one head per config from a single seeded
    /// stream, consumed in head order.
    pub fn init(configs: &[DecoderConfig], seed: u64) -> Result<Self> {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let heads = configs
            .iter()
            .map(|cfg| DecoderParams::init(cfg.clone(), &mut rng))
            .collect::<Result<Vec<_>>>()?;
        GammtParams::new(heads)
    }

    pub fn new(heads: Vec<DecoderParams>) -> Result<Self> {
        if heads.is_empty() {
            return Err(Error::Contract("ensemble must have M >= 1".to_string()));
        }
        let (nv, lmax) = (heads[0].cfg.vocab_size, heads[0].cfg.max_len);
        for h in &heads[1..] {
            if h.cfg.vocab_size != nv || h.cfg.max_len != lmax {
                return Err(Error::Contract(format!(
                    "heads disagree on vocab/max_len: {}x{} vs {}x{}",
                    nv, lmax, h.cfg.vocab_size, h.cfg.max_len
                )));
            }
        }
        Ok(GammtParams { heads })
    }

    pub fn m(&self) -> usize {
        self.heads.len()
    }

    pub fn heads(&self) -> &[DecoderParams] {
        &self.heads
    }

    pub fn heads_mut(&mut self) -> &mut [DecoderParams] {
        &mut self.heads
    }

    pub fn vocab_size(&self) -> usize {
        self.heads[0].cfg.vocab_size
    }

    pub fn max_len(&self) -> usize {
        self.heads[0].cfg.max_len
    }

    /// Forward pass of every head on `ids`: M column-stochastic matrices,
    /// head m's output depending only on its own parameters and `ids`.
    pub fn forward(&self, ids: &[usize]) -> Result<Vec<ProbMatrix>> {
        self.heads.iter().map(|h| h.probs(ids)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decoder::Activation;
    use proptest::prelude::*;

    fn cfg(vocab: usize) -> DecoderConfig {
        DecoderConfig {
            vocab_size: vocab,
            max_len: 8,
            d_model: 8,
            d_mlp: 16,
            n_layers: 1,
            n_heads: 2,
            activation: Activation::Gelu,
        }
    }

    #[test]
    fn single_head_matches_standalone_decoder() {
        let params = GammtParams::init(&[cfg(5)], 123).unwrap();
        let ensemble = params.forward(&[0, 2, 4]).unwrap();
        let standalone = params.heads()[0].probs(&[0, 2, 4]).unwrap();
        assert_eq!(ensemble.len(), 1);
        assert_eq!(ensemble[0], standalone);
    }

    #[test]
    fn modifying_one_head_leaves_others_bit_identical() {
        let mut params = GammtParams::init(&[cfg(5), cfg(5)], 77).unwrap();
        let before = params.forward(&[1, 3]).unwrap();
        params.heads_mut()[1]
            .unembed
            .data_mut()
            .iter_mut()
            .for_each(|v| *v += 0.5);
        let after = params.forward(&[1, 3]).unwrap();
        assert_eq!(before[0], after[0]);
        assert_ne!(before[1], after[1]);
    }

    #[test]
    fn all_columns_of_all_heads_are_stochastic() {
        let params = GammtParams::init(&[cfg(7), cfg(7), cfg(7)], 9).unwrap();
        for pm in params.forward(&[0, 1, 2, 3, 4]).unwrap() {
            for t in 0..pm.len() {
                let s: f64 = pm.column(t).iter().sum();
                assert!((s - 1.0).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn heads_may_differ_in_depth_but_not_vocab() {
        let deep = DecoderConfig {
            n_layers: 2,
            n_heads: 4,
            ..cfg(5)
        };
        assert!(GammtParams::init(&[cfg(5), deep], 1).is_ok());
        assert!(GammtParams::init(&[cfg(5), cfg(6)], 1).is_err());
    }

    #[test]
    fn max_select_picks_maximum_and_lowest_tie() {
        let s = SelectionMechanism::Max;
        assert_eq!(s.select(&[0.2, 0.7, 0.1], None).unwrap(), (0.7, 1));
        assert_eq!(s.select(&[0.5, 0.5], None).unwrap(), (0.5, 0));
    }

    #[test]
    fn singleton_degenerates_for_any_mechanism() {
        for s in [
            SelectionMechanism::Max,
            SelectionMechanism::uniform_random(1),
        ] {
            assert_eq!(s.select(&[0.4], Some(0)).unwrap(), (0.4, 0));
        }
    }

    #[test]
    fn empty_values_is_contract_violation() {
        assert!(SelectionMechanism::Max.select(&[], None).is_err());
    }

    #[test]
    fn random_index_draws_are_reproducible() {
        use rand::SeedableRng;
        let s = SelectionMechanism::uniform_random(3);
        let draw_seq = |seed: u64| -> Vec<usize> {
            let mut rng = ChaCha20Rng::seed_from_u64(seed);
            (0..32).map(|_| s.draw_index(&mut rng).unwrap()).collect()
        };
        assert_eq!(draw_seq(5), draw_seq(5));
        assert_ne!(draw_seq(5), draw_seq(6));
    }

    #[test]
    fn degenerate_weights_always_pick_that_head() {
        use rand::SeedableRng;
        let s = SelectionMechanism::RandomIndex {
            weights: vec![0.0, 1.0],
        };
        let mut rng = ChaCha20Rng::seed_from_u64(0);
        for _ in 0..64 {
            assert_eq!(s.draw_index(&mut rng), Some(1));
        }
    }

    #[test]
    fn weight_validation() {
        assert!(SelectionMechanism::RandomIndex {
            weights: vec![0.5, 0.6]
        }
        .validate(2)
        .is_err());
        assert!(SelectionMechanism::RandomIndex {
            weights: vec![0.5, 0.5]
        }
        .validate(3)
        .is_err());
        assert!(SelectionMechanism::uniform_random(4).validate(4).is_ok());
    }

    proptest! {
        #[test]
        fn max_dominates_every_component(values in proptest::collection::vec(1e-6f64..1.0, 1..6)) {
            let (v, idx) = SelectionMechanism::Max.select(&values, None).unwrap();
            prop_assert!(values.iter().all(|&x| v >= x));
            prop_assert_eq!(values[idx], v);
        }

        #[test]
        fn argmax_invariant_under_positive_scaling(
            values in proptest::collection::vec(1e-6f64..1.0, 1..6),
            c in 1e-3f64..1e3,
        ) {
            let (_, i1) = SelectionMechanism::Max.select(&values, None).unwrap();
            let scaled: Vec<f64> = values.iter().map(|v| v * c).collect();
            let (_, i2) = SelectionMechanism::Max.select(&scaled, None).unwrap();
            prop_assert_eq!(i1, i2);
        }
    }
}
