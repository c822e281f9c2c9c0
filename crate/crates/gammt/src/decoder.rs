//! One causal transformer decoder head.
//!
//! Pre-layer-norm residual blocks with a final layer norm (GPT-2 style):
//! token + learned positional embedding, `n_layers` blocks of masked
//! multi-head self-attention and a two-layer MLP, then an unembedding and
//! row-wise softmax yielding next-token conditionals.
//!
//! Matrices are stored position-major: a staged sequence is `[len, d_model]`
//! with row `t` holding position `t`'s feature vector, and probabilities are
//! `[len, vocab]` with row `t` the conditional over the next token given the
//! prefix through `t`.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{NodeId, Tape, Tensor};
use crate::error::{Error, Result};

/// Additive score mask for disallowed attention positions. Finite so no
/// NaN/Inf ever enters the tape, yet large enough that softmax underflows
/// the masked weights to exactly zero.
const MASK_OFF: f64 = -1e30;

const INIT_STD: f64 = 0.02;

/// MLP nonlinearity.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Gelu,
    Relu,
}

impl Activation {
    pub fn name(self) -> &'static str {
        match self {
            Activation::Gelu => "gelu",
            Activation::Relu => "relu",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "gelu" => Ok(Activation::Gelu),
            "relu" => Ok(Activation::Relu),
            other => Err(Error::Config(format!("unknown activation {other:?}"))),
        }
    }
}

/// Shape hyperparameters of one decoder head.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DecoderConfig {
    pub vocab_size: usize,
    pub max_len: usize,
    pub d_model: usize,
    pub d_mlp: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub activation: Activation,
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size == 0
            || self.max_len == 0
            || self.d_model == 0
            || self.d_mlp == 0
            || self.n_heads == 0
        {
            return Err(Error::Config(
                "decoder dimensions must be positive".to_string(),
            ));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

/// Layer-norm gain and bias, both `[d_model]`.
#[derive(Debug, Clone, PartialEq)]
pub struct NormParams {
    pub gain: Tensor,
    pub bias: Tensor,
}

impl NormParams {
    fn identity(d: usize) -> Self {
        NormParams {
            gain: Tensor::new(vec![d], vec![1.0; d]).expect("ones are finite"),
            bias: Tensor::zeros(vec![d]),
        }
    }
}

/// Per-attention-head projections: query/key/value `[d_model, head_dim]`
/// and an output block `[head_dim, d_model]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttnHeadParams {
    pub query: Tensor,
    pub key: Tensor,
    pub value: Tensor,
    pub output: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub attn_norm: NormParams,
    pub heads: Vec<AttnHeadParams>,
    pub mlp_norm: NormParams,
    pub mlp_in: Tensor,
    pub mlp_out: Tensor,
}

/// All learnable parameters of one decoder head.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderParams {
    pub cfg: DecoderConfig,
    /// `[vocab_size, d_model]`, row i = embedding of token i.
    pub token_embed: Tensor,
    /// `[max_len, d_model]`, row t = embedding of position t.
    pub pos_embed: Tensor,
    pub layers: Vec<LayerParams>,
    pub final_norm: NormParams,
    /// Unembedding `[d_model, vocab_size]`.
    pub unembed: Tensor,
}

fn gaussian(rng: &mut impl Rng, shape: Vec<usize>) -> Tensor {
    let normal = Normal::new(0.0, INIT_STD).expect("valid std");
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| normal.sample(rng)).collect();
    Tensor::new(shape, data).expect("gaussian draws are finite")
}

impl DecoderParams {
    /// Gaussian(0, 0.02) weights, identity layer norms.
    pub fn init(cfg: DecoderConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_model;
        let dk = cfg.head_dim();
        let layers = (0..cfg.n_layers)
            .map(|_| LayerParams {
                attn_norm: NormParams::identity(d),
                heads: (0..cfg.n_heads)
                    .map(|_| AttnHeadParams {
                        query: gaussian(rng, vec![d, dk]),
                        key: gaussian(rng, vec![d, dk]),
                        value: gaussian(rng, vec![d, dk]),
                        output: gaussian(rng, vec![dk, d]),
                    })
                    .collect(),
                mlp_norm: NormParams::identity(d),
                mlp_in: gaussian(rng, vec![d, cfg.d_mlp]),
                mlp_out: gaussian(rng, vec![cfg.d_mlp, d]),
            })
            .collect();
        Ok(DecoderParams {
            token_embed: gaussian(rng, vec![cfg.vocab_size, d]),
            pos_embed: gaussian(rng, vec![cfg.max_len, d]),
            layers,
            final_norm: NormParams::identity(d),
            unembed: gaussian(rng, vec![d, cfg.vocab_size]),
            cfg,
        })
    }

    /// All-zero parameters of the given shape (a loading target; zero
    /// layer-norm gains and all, so callers must overwrite every tensor).
    pub fn zeros(cfg: DecoderConfig) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_model;
        let dk = cfg.head_dim();
        let zero = |shape: Vec<usize>| Tensor::zeros(shape);
        let layers = (0..cfg.n_layers)
            .map(|_| LayerParams {
                attn_norm: NormParams {
                    gain: zero(vec![d]),
                    bias: zero(vec![d]),
                },
                heads: (0..cfg.n_heads)
                    .map(|_| AttnHeadParams {
                        query: zero(vec![d, dk]),
                        key: zero(vec![d, dk]),
                        value: zero(vec![d, dk]),
                        output: zero(vec![dk, d]),
                    })
                    .collect(),
                mlp_norm: NormParams {
                    gain: zero(vec![d]),
                    bias: zero(vec![d]),
                },
                mlp_in: zero(vec![d, cfg.d_mlp]),
                mlp_out: zero(vec![cfg.d_mlp, d]),
            })
            .collect();
        Ok(DecoderParams {
            token_embed: zero(vec![cfg.vocab_size, d]),
            pos_embed: zero(vec![cfg.max_len, d]),
            layers,
            final_norm: NormParams {
                gain: zero(vec![d]),
                bias: zero(vec![d]),
            },
            unembed: zero(vec![d, cfg.vocab_size]),
            cfg,
        })
    }

    /// Visit every parameter tensor with its canonical name, in a fixed
    /// order shared by staging, checkpoints, and SGD updates.
    pub fn visit(&self, f: &mut impl FnMut(&str, &Tensor)) {
        f("token_embed", &self.token_embed);
        f("pos_embed", &self.pos_embed);
        for (i, layer) in self.layers.iter().enumerate() {
            f(&format!("layer{i}.attn_norm.gain"), &layer.attn_norm.gain);
            f(&format!("layer{i}.attn_norm.bias"), &layer.attn_norm.bias);
            for (h, head) in layer.heads.iter().enumerate() {
                f(&format!("layer{i}.head{h}.query"), &head.query);
                f(&format!("layer{i}.head{h}.key"), &head.key);
                f(&format!("layer{i}.head{h}.value"), &head.value);
                f(&format!("layer{i}.head{h}.output"), &head.output);
            }
            f(&format!("layer{i}.mlp_norm.gain"), &layer.mlp_norm.gain);
            f(&format!("layer{i}.mlp_norm.bias"), &layer.mlp_norm.bias);
            f(&format!("layer{i}.mlp_in"), &layer.mlp_in);
            f(&format!("layer{i}.mlp_out"), &layer.mlp_out);
        }
        f("final_norm.gain", &self.final_norm.gain);
        f("final_norm.bias", &self.final_norm.bias);
        f("unembed", &self.unembed);
    }

    /// Mutable variant of [`Self::visit`], same order and names.
    pub fn visit_mut(&mut self, f: &mut impl FnMut(&str, &mut Tensor)) {
        f("token_embed", &mut self.token_embed);
        f("pos_embed", &mut self.pos_embed);
        for (i, layer) in self.layers.iter_mut().enumerate() {
            f(
                &format!("layer{i}.attn_norm.gain"),
                &mut layer.attn_norm.gain,
            );
            f(
                &format!("layer{i}.attn_norm.bias"),
                &mut layer.attn_norm.bias,
            );
            for (h, head) in layer.heads.iter_mut().enumerate() {
                f(&format!("layer{i}.head{h}.query"), &mut head.query);
                f(&format!("layer{i}.head{h}.key"), &mut head.key);
                f(&format!("layer{i}.head{h}.value"), &mut head.value);
                f(&format!("layer{i}.head{h}.output"), &mut head.output);
            }
            f(&format!("layer{i}.mlp_norm.gain"), &mut layer.mlp_norm.gain);
            f(&format!("layer{i}.mlp_norm.bias"), &mut layer.mlp_norm.bias);
            f(&format!("layer{i}.mlp_in"), &mut layer.mlp_in);
            f(&format!("layer{i}.mlp_out"), &mut layer.mlp_out);
        }
        f("final_norm.gain", &mut self.final_norm.gain);
        f("final_norm.bias", &mut self.final_norm.bias);
        f("unembed", &mut self.unembed);
    }

    /// Register every parameter as a tape leaf, ready to run the decoder.
    pub fn stage(&self, tape: &mut Tape) -> StagedDecoder {
        let mut nodes = Vec::new();
        self.visit(&mut |_, t| nodes.push(tape.leaf(t.clone())));
        StagedDecoder {
            cfg: self.cfg.clone(),
            nodes,
        }
    }

    /// Next-token conditionals for `ids` as plain values (fresh tape
    /// internally, nothing retained).
    pub fn probs(&self, ids: &[usize]) -> Result<ProbMatrix> {
        let mut tape = Tape::new();
        let staged = self.stage(&mut tape);
        let node = staged.probs(&mut tape, ids)?;
        ProbMatrix::from_tensor(tape.value(node))
    }
}

/// Node layout of a staged decoder. Nodes are stored flat in [`DecoderParams::visit`]
/// order; structural accessors compute offsets from the config.
pub struct StagedDecoder {
    cfg: DecoderConfig,
    nodes: Vec<NodeId>,
}

const LAYER_FIXED_SLOTS: usize = 6; // two norms (gain+bias) + mlp_in + mlp_out

impl StagedDecoder {
    pub fn cfg(&self) -> &DecoderConfig {
        &self.cfg
    }

    /// Parameter node ids in [`DecoderParams::visit`] order.
    pub fn nodes(&self) -> &[NodeId] {
        &self.nodes
    }

    fn layer_slots(&self) -> usize {
        LAYER_FIXED_SLOTS + 4 * self.cfg.n_heads
    }

    fn layer_base(&self, layer: usize) -> usize {
        2 + layer * self.layer_slots()
    }

    fn token_embed(&self) -> NodeId {
        self.nodes[0]
    }

    fn pos_embed(&self) -> NodeId {
        self.nodes[1]
    }

    fn attn_norm(&self, layer: usize) -> (NodeId, NodeId) {
        let b = self.layer_base(layer);
        (self.nodes[b], self.nodes[b + 1])
    }

    fn attn_head(&self, layer: usize, head: usize) -> (NodeId, NodeId, NodeId, NodeId) {
        let b = self.layer_base(layer) + 2 + 4 * head;
        (
            self.nodes[b],
            self.nodes[b + 1],
            self.nodes[b + 2],
            self.nodes[b + 3],
        )
    }

    fn mlp(&self, layer: usize) -> (NodeId, NodeId, NodeId, NodeId) {
        let b = self.layer_base(layer) + 2 + 4 * self.cfg.n_heads;
        (
            self.nodes[b],
            self.nodes[b + 1],
            self.nodes[b + 2],
            self.nodes[b + 3],
        )
    }

    fn final_norm(&self) -> (NodeId, NodeId) {
        let n = self.nodes.len();
        (self.nodes[n - 3], self.nodes[n - 2])
    }

    fn unembed(&self) -> NodeId {
        self.nodes[self.nodes.len() - 1]
    }

    /// Token + positional embedding of an id sequence: `[len, d_model]`,
    /// row `t` equals `token_embed[ids[t]] + pos_embed[t]`.
    pub fn embed(&self, tape: &mut Tape, ids: &[usize]) -> Result<NodeId> {
        if ids.is_empty() || ids.len() > self.cfg.max_len {
            return Err(Error::BadLength {
                len: ids.len(),
                min: 1,
                max: self.cfg.max_len,
            });
        }
        for &id in ids {
            if id >= self.cfg.vocab_size {
                return Err(Error::IdOutOfRange {
                    id,
                    vocab: self.cfg.vocab_size,
                });
            }
        }
        let tok = tape.embedding_lookup(self.token_embed(), ids)?;
        let positions: Vec<usize> = (0..ids.len()).collect();
        let pos = tape.embedding_lookup(self.pos_embed(), &positions)?;
        tape.add(tok, pos)
    }

    /// Run the decoder stack on an embedded sequence `[len, d_model]`.
    pub fn forward(&self, tape: &mut Tape, x0: NodeId) -> Result<NodeId> {
        let shape = tape.value(x0).shape().to_vec();
        if shape.len() != 2 || shape[1] != self.cfg.d_model {
            return Err(Error::ShapeMismatch {
                op: "decoder_forward",
                lhs: shape,
                rhs: vec![self.cfg.max_len, self.cfg.d_model],
            });
        }
        let len = shape[0];
        let mask = tape.leaf(causal_mask(len));
        let scale = 1.0 / (self.cfg.head_dim() as f64).sqrt();

        let mut x = x0;
        for layer in 0..self.cfg.n_layers {
            // Attention sublayer, pre-norm.
            let (gain, bias) = self.attn_norm(layer);
            let normed = tape.layer_norm(x, gain, bias)?;
            let mut attn: Option<NodeId> = None;
            for head in 0..self.cfg.n_heads {
                let (wq, wk, wv, wo) = self.attn_head(layer, head);
                let q = tape.matmul(normed, wq)?;
                let k = tape.matmul(normed, wk)?;
                let v = tape.matmul(normed, wv)?;
                let kt = tape.transpose(k)?;
                let scores = tape.matmul(q, kt)?;
                let scores = tape.scale(scores, scale)?;
                let scores = tape.add(scores, mask)?;
                let weights = tape.row_softmax(scores)?;
                let ctx = tape.matmul(weights, v)?;
                let proj = tape.matmul(ctx, wo)?;
                attn = Some(match attn {
                    None => proj,
                    Some(acc) => tape.add(acc, proj)?,
                });
            }
            x = tape.add(x, attn.expect("n_heads >= 1"))?;

            // MLP sublayer, pre-norm.
            let (gain, bias, mlp_in, mlp_out) = self.mlp(layer);
            let normed = tape.layer_norm(x, gain, bias)?;
            let hidden = tape.matmul(normed, mlp_in)?;
            let hidden = match self.cfg.activation {
                Activation::Gelu => tape.gelu(hidden)?,
                Activation::Relu => tape.relu(hidden)?,
            };
            let mlp = tape.matmul(hidden, mlp_out)?;
            x = tape.add(x, mlp)?;
        }
        let (gain, bias) = self.final_norm();
        tape.layer_norm(x, gain, bias)
    }

    /// Unembed and normalize: `[len, vocab]`, each row a distribution over
    /// the next token.
    pub fn next_token_probs(&self, tape: &mut Tape, x: NodeId) -> Result<NodeId> {
        let logits = tape.matmul(x, self.unembed())?;
        tape.row_softmax(logits)
    }

    /// Embed, run the stack, and normalize in one call.
    pub fn probs(&self, tape: &mut Tape, ids: &[usize]) -> Result<NodeId> {
        let x0 = self.embed(tape, ids)?;
        let x = self.forward(tape, x0)?;
        self.next_token_probs(tape, x)
    }
}

/// Strict causal mask: position `t` may attend to positions `<= t` only.
fn causal_mask(len: usize) -> Tensor {
    let mut data = vec![0.0; len * len];
    for i in 0..len {
        for j in (i + 1)..len {
            data[i * len + j] = MASK_OFF;
        }
    }
    Tensor::new(vec![len, len], data).expect("mask is finite")
}

/// Next-token conditionals for a sequence: semantically an
/// `[vocab, len]` column-stochastic matrix, stored position-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbMatrix {
    vocab_size: usize,
    len: usize,
    data: Vec<f64>,
}

impl ProbMatrix {
    /// Tolerance on each column's total probability.
    pub const COLUMN_SUM_TOL: f64 = 1e-12;

    pub fn new(vocab_size: usize, len: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != vocab_size * len || vocab_size == 0 || len == 0 {
            return Err(Error::ShapeMismatch {
                op: "prob_matrix",
                lhs: vec![vocab_size, len],
                rhs: vec![data.len()],
            });
        }
        let pm = ProbMatrix {
            vocab_size,
            len,
            data,
        };
        for t in 0..len {
            let col = pm.column(t);
            if col.iter().any(|&p| !(0.0..=1.0).contains(&p)) {
                return Err(Error::Contract(format!(
                    "prob_matrix: column {t} has entries outside [0, 1]"
                )));
            }
            let sum: f64 = col.iter().sum();
            if (sum - 1.0).abs() > Self::COLUMN_SUM_TOL {
                return Err(Error::Contract(format!(
                    "prob_matrix: column {t} sums to {sum}, not 1"
                )));
            }
        }
        Ok(pm)
    }

    /// Wrap a `[len, vocab]` tape value.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        if t.rank() != 2 {
            return Err(Error::Contract(format!(
                "prob_matrix: rank-2 tensor required, got {:?}",
                t.shape()
            )));
        }
        ProbMatrix::new(t.cols(), t.rows(), t.data().to_vec())
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    /// Sequence length (number of conditioning prefixes).
    pub fn len(&self) -> usize {
        self.len
    }

    /// Never empty: construction requires at least one position.
    pub fn is_empty(&self) -> bool {
        false
    }

    /// `P(token | prefix through position pos)`.
    pub fn prob(&self, token: usize, pos: usize) -> f64 {
        self.data[pos * self.vocab_size + token]
    }

    /// The distribution conditioned on the prefix through `pos` (column
    /// `pos` of the `[vocab, len]` view).
    pub fn column(&self, pos: usize) -> &[f64] {
        &self.data[pos * self.vocab_size..(pos + 1) * self.vocab_size]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn tiny_cfg() -> DecoderConfig {
        DecoderConfig {
            vocab_size: 5,
            max_len: 8,
            d_model: 8,
            d_mlp: 16,
            n_layers: 1,
            n_heads: 2,
            activation: Activation::Gelu,
        }
    }

    fn tiny_params(seed: u64) -> DecoderParams {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        DecoderParams::init(tiny_cfg(), &mut rng).unwrap()
    }

    #[test]
    fn rejects_indivisible_heads() {
        let cfg = DecoderConfig {
            n_heads: 3,
            ..tiny_cfg()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn embed_single_token_is_token_plus_position() {
        let params = tiny_params(1);
        let mut tape = Tape::new();
        let staged = params.stage(&mut tape);
        let x = staged.embed(&mut tape, &[3]).unwrap();
        let got = tape.value(x);
        assert_eq!(got.shape(), &[1, 8]);
        for j in 0..8 {
            let expect = params.token_embed.at(3, j) + params.pos_embed.at(0, j);
            assert_eq!(got.at(0, j), expect);
        }
    }

    #[test]
    fn embed_with_zero_positional_is_pure_token_embedding() {
        let mut params = tiny_params(2);
        params.pos_embed = Tensor::zeros(vec![8, 8]);
        let mut tape = Tape::new();
        let staged = params.stage(&mut tape);
        let x = staged.embed(&mut tape, &[2, 2]).unwrap();
        for t in 0..2 {
            for j in 0..8 {
                assert_eq!(tape.value(x).at(t, j), params.token_embed.at(2, j));
            }
        }
    }

    #[test]
    fn embed_repeated_token_differs_across_positions() {
        let params = tiny_params(3);
        let mut tape = Tape::new();
        let staged = params.stage(&mut tape);
        let x = staged.embed(&mut tape, &[1, 1]).unwrap();
        let (r0, r1) = (tape.value(x).row(0).to_vec(), tape.value(x).row(1));
        assert_ne!(r0, r1);
    }

    #[test]
    fn embed_rejects_overlong_and_bad_ids() {
        let params = tiny_params(4);
        let mut tape = Tape::new();
        let staged = params.stage(&mut tape);
        assert!(matches!(
            staged.embed(&mut tape, &[0; 9]),
            Err(Error::BadLength { len: 9, .. })
        ));
        assert!(matches!(
            staged.embed(&mut tape, &[7]),
            Err(Error::IdOutOfRange { id: 7, .. })
        ));
    }

    #[test]
    fn zero_layers_is_final_norm_of_embedding() {
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let cfg = DecoderConfig {
            n_layers: 0,
            ..tiny_cfg()
        };
        let params = DecoderParams::init(cfg, &mut rng).unwrap();
        let mut tape = Tape::new();
        let staged = params.stage(&mut tape);
        let x0 = staged.embed(&mut tape, &[0, 4, 2]).unwrap();
        let out = staged.forward(&mut tape, x0).unwrap();
        let (gain, bias) = staged.final_norm();
        let expect = tape.layer_norm(x0, gain, bias).unwrap();
        assert_eq!(tape.value(out), tape.value(expect));
    }

    #[test]
    fn forward_preserves_shape() {
        let params = tiny_params(6);
        let mut tape = Tape::new();
        let staged = params.stage(&mut tape);
        let x0 = staged.embed(&mut tape, &[1, 2, 3, 4]).unwrap();
        let out = staged.forward(&mut tape, x0).unwrap();
        assert_eq!(tape.value(out).shape(), &[4, 8]);
    }

    #[test]
    fn suffix_perturbation_leaves_prefix_exactly_unchanged() {
        let params = tiny_params(7);
        let a = params.probs(&[0, 1, 2, 3]).unwrap();
        let b = params.probs(&[0, 1, 2, 4]).unwrap();
        for t in 0..3 {
            for v in 0..5 {
                assert_eq!(
                    a.prob(v, t).to_bits(),
                    b.prob(v, t).to_bits(),
                    "column {t}, token {v}"
                );
            }
        }
        assert_ne!(a.column(3), b.column(3));
    }

    #[test]
    fn zero_hidden_state_gives_uniform_probs() {
        let params = tiny_params(8);
        let mut tape = Tape::new();
        let staged = params.stage(&mut tape);
        let x = tape.leaf(Tensor::zeros(vec![3, 8]));
        let probs = staged.next_token_probs(&mut tape, x).unwrap();
        for v in tape.value(probs).data() {
            assert!((v - 0.2).abs() < 1e-15);
        }
    }

    #[test]
    fn probs_columns_are_stochastic() {
        let params = tiny_params(9);
        let pm = params.probs(&[4, 0, 3, 1, 2]).unwrap();
        for t in 0..5 {
            let s: f64 = pm.column(t).iter().sum();
            assert!((s - 1.0).abs() <= ProbMatrix::COLUMN_SUM_TOL);
        }
    }

    #[test]
    fn relu_head_runs_too() {
        let mut rng = ChaCha20Rng::seed_from_u64(10);
        let cfg = DecoderConfig {
            activation: Activation::Relu,
            ..tiny_cfg()
        };
        let params = DecoderParams::init(cfg, &mut rng).unwrap();
        params.probs(&[0, 1]).unwrap();
    }

    fn collect_tensors(params: &DecoderParams) -> Vec<(String, Tensor)> {
        let mut v = Vec::new();
        params.visit(&mut |name, t| v.push((name.to_string(), t.clone())));
        v
    }

    fn with_slot(params: &DecoderParams, slot: usize, replacement: &Tensor) -> DecoderParams {
        let mut p = params.clone();
        let mut k = 0;
        p.visit_mut(&mut |_, t| {
            if k == slot {
                *t = replacement.clone();
            }
            k += 1;
        });
        p
    }

    #[test]
    fn full_stack_gradient_matches_finite_differences() {
        // Per-head cross-entropy through the whole decoder on a tiny shape;
        // h = 1e-6 central differences, absolute escape 1e-9 for entries
        // below the finite-difference noise floor.
        let params = tiny_params(11);
        let x = [0usize, 3, 1, 4];

        let loss_of = |p: &DecoderParams| -> f64 {
            let pm = p.probs(&x).unwrap();
            -(0..x.len() - 1)
                .map(|t| pm.prob(x[t + 1], t).ln())
                .sum::<f64>()
        };

        let mut tape = Tape::new();
        let staged = params.stage(&mut tape);
        let probs = staged.probs(&mut tape, &x).unwrap();
        let mut acc = None;
        for t in 0..x.len() - 1 {
            let p = tape.index(probs, t, x[t + 1]).unwrap();
            let lp = tape.log(p).unwrap();
            acc = Some(match acc {
                None => lp,
                Some(a) => tape.add(a, lp).unwrap(),
            });
        }
        let loss = tape.scale(acc.unwrap(), -1.0).unwrap();
        let grads = tape.backward(loss).unwrap();

        let h = 1e-6;
        for (slot, (name, tensor)) in collect_tensors(&params).iter().enumerate() {
            let analytic = grads.get_or_zeros(staged.nodes()[slot]);
            for e in 0..tensor.numel() {
                let mut plus = tensor.clone();
                plus.data_mut()[e] += h;
                let mut minus = tensor.clone();
                minus.data_mut()[e] -= h;
                let numeric = (loss_of(&with_slot(&params, slot, &plus))
                    - loss_of(&with_slot(&params, slot, &minus)))
                    / (2.0 * h);
                let a = analytic.data()[e];
                let diff = (a - numeric).abs();
                if diff > 1e-9 {
                    let rel = diff / a.abs().max(numeric.abs());
                    assert!(
                        rel < 1e-4,
                        "{name}[{e}]: analytic={a} numeric={numeric} rel={rel}"
                    );
                }
            }
        }
    }
}
