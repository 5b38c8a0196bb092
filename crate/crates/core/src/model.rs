//! The toy decoder-only transformer, the dense chain, and their forward passes.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{NodeId, ParamStore, Tape};
use crate::error::{Error, Result};
use crate::graph::{build_graph, Architecture, ModelDims, ModelGraph, TensorKind};
use crate::tensor::Matrix;

pub const LAYER_NORM_EPS: f64 = 1e-5;
pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToyModelConfig {
    pub blocks: usize,
    pub d: usize,
    pub h: usize,
    pub ffn_width: usize,
    pub vocab: usize,
    /// Maximum sequence length.
    pub n: usize,
    pub seed: u64,
}

impl Default for ToyModelConfig {
    fn default() -> Self {
        ToyModelConfig {
            blocks: 2,
            d: 64,
            h: 4,
            ffn_width: 128,
            vocab: 32,
            n: 18,
            seed: 0,
        }
    }
}

impl ToyModelConfig {
    pub fn dims(&self) -> ModelDims {
        ModelDims {
            n: self.n,
            d: self.d,
            h: self.h,
            ffn: self.ffn_width,
            vocab: self.vocab,
            blocks: self.blocks,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.dims().validate()?;
        if self.vocab < 4 {
            return Err(Error::config("vocab", "need at least 4 symbols (pad, bos, sep/eos and payload)"));
        }
        Ok(())
    }
}

/// Builds the graph and draws initial weights: `N(0, 0.02)` for weight
/// matrices and the embedding, zeros for biases, ones for LayerNorm gains.
pub fn build_toy_decoder(config: &ToyModelConfig) -> Result<(ModelGraph, ParamStore)> {
    config.validate()?;
    let graph = build_graph(config.dims())?;
    let params = init_params(&graph, config.seed);
    Ok((graph, params))
}

pub fn init_params(graph: &ModelGraph, seed: u64) -> ParamStore {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, INIT_STD).expect("valid std");
    let mut params = ParamStore::zeros_like(graph);
    // Draw in id order so the initialization does not depend on slot order.
    let mut by_id: Vec<usize> = (0..graph.len()).collect();
    by_id.sort_by_key(|&s| graph.tensors[s].id);
    for slot in by_id {
        let m = &mut params[slot];
        match graph.tensors[slot].kind {
            TensorKind::LinearWeight | TensorKind::TiedEmbedding => {
                for v in &mut m.data {
                    *v = normal.sample(&mut rng);
                }
            }
            TensorKind::LayerNormGain => m.data.fill(1.0),
            TensorKind::Bias | TensorKind::LayerNormBias => {}
        }
    }
    params
}

/// Token sequences of equal length `seq`, flattened row-major.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenBatch {
    pub seq: usize,
    pub inputs: Vec<usize>,
    /// Next-token target per input position; `None` where no loss is taken.
    pub labels: Vec<Option<usize>>,
}

impl TokenBatch {
    pub fn sequences(&self) -> usize {
        self.inputs.len() / self.seq
    }

    pub fn counted(&self) -> usize {
        self.labels.iter().filter(|l| l.is_some()).count()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Batch {
    Tokens(TokenBatch),
    /// Dense regression pair for the dense chain.
    Regression { x: Matrix, y: Matrix },
}

impl Batch {
    /// Rows processed per forward pass (`B * n` for token batches).
    pub fn rows(&self) -> usize {
        match self {
            Batch::Tokens(t) => t.inputs.len(),
            Batch::Regression { x, .. } => x.rows,
        }
    }
}

impl From<TokenBatch> for Batch {
    fn from(b: TokenBatch) -> Self {
        Batch::Tokens(b)
    }
}

/// Amplitude of the position table relative to unit sinusoids.
pub const POSITION_SCALE: f64 = 0.1;
/// Wavelength base of the position table.
pub const POSITION_BASE: f64 = 100.0;

/// Sinusoidal position table, `seq x d`.
pub fn positional_encoding(seq: usize, d: usize) -> Matrix {
    let mut pe = Matrix::zeros(seq, d);
    for p in 0..seq {
        for (i, v) in pe.row_mut(p).iter_mut().enumerate() {
            let freq = POSITION_BASE.powf(-((i / 2 * 2) as f64) / d as f64);
            let angle = p as f64 * freq;
            *v = POSITION_SCALE * if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    pe
}

/// Runs the forward pass, recording a tape that ends in the loss.
pub fn forward<'p>(graph: &ModelGraph, params: &'p ParamStore, batch: &Batch) -> Result<Tape<'p>> {
    Ok(forward_with_output(graph, params, batch)?.0)
}

/// Teacher-forced loss and next-token accuracy over labelled positions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluation {
    pub loss: f64,
    pub correct: usize,
    pub counted: usize,
}

impl Evaluation {
    pub fn accuracy(&self) -> f64 {
        if self.counted == 0 {
            0.0
        } else {
            self.correct as f64 / self.counted as f64
        }
    }
}

pub fn evaluate(graph: &ModelGraph, params: &ParamStore, batch: &TokenBatch) -> Result<Evaluation> {
    let b = Batch::Tokens(batch.clone());
    let (tape, logits) = forward_with_output(graph, params, &b)?;
    let z = tape.value(logits);
    let mut correct = 0;
    for (r, label) in batch.labels.iter().enumerate() {
        if let Some(t) = label {
            if argmax(z.row(r)) == *t {
                correct += 1;
            }
        }
    }
    Ok(Evaluation {
        loss: tape.loss(),
        correct,
        counted: batch.counted(),
    })
}

/// First index of the maximum.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Forward pass returning the tape and the output node (logits or prediction).
pub fn forward_with_output<'p>(
    graph: &ModelGraph,
    params: &'p ParamStore,
    batch: &Batch,
) -> Result<(Tape<'p>, NodeId)> {
    if params.len() != graph.len() {
        return Err(Error::Input(format!(
            "{} parameter tensors for a graph of {}",
            params.len(),
            graph.len()
        )));
    }
    match (&graph.arch, batch) {
        (Architecture::Decoder(dims), Batch::Tokens(tokens)) => decoder_forward(graph, dims, params, tokens),
        (Architecture::DenseChain { .. }, Batch::Regression { x, y }) => chain_forward(params, x, y),
        _ => Err(Error::Input("batch type does not match the model architecture".into())),
    }
}

fn chain_forward<'p>(params: &'p ParamStore, x: &Matrix, y: &Matrix) -> Result<(Tape<'p>, NodeId)> {
    let mut tape = Tape::new(params);
    let mut h = tape.input(x.clone());
    // Slot L-1 is the first layer.
    for slot in (0..params.len()).rev() {
        h = tape.linear(h, slot, None, slot);
    }
    tape.mean_squared(h, y)?;
    Ok((tape, h))
}

/// Slots of one transformer block.
pub(crate) struct BlockSlots {
    pub ln1_gain: usize,
    pub ln1_bias: usize,
    pub q_w: usize,
    pub q_b: usize,
    pub k_w: usize,
    pub k_b: usize,
    pub v_w: usize,
    pub v_b: usize,
    pub o_w: usize,
    pub o_b: usize,
    pub ln2_gain: usize,
    pub ln2_bias: usize,
    pub in_w: usize,
    pub in_b: usize,
    pub out_w: usize,
    pub out_b: usize,
}

pub(crate) fn block_slots(graph: &ModelGraph, l: usize) -> Result<BlockSlots> {
    let s = |suffix: &str| {
        let name = format!("blocks.{l}.{suffix}");
        graph
            .slot_of(&name)
            .ok_or_else(|| Error::Input(format!("graph has no tensor `{name}`")))
    };
    Ok(BlockSlots {
        ln1_gain: s("ln1.gain")?,
        ln1_bias: s("ln1.bias")?,
        q_w: s("attn.q.weight")?,
        q_b: s("attn.q.bias")?,
        k_w: s("attn.k.weight")?,
        k_b: s("attn.k.bias")?,
        v_w: s("attn.v.weight")?,
        v_b: s("attn.v.bias")?,
        o_w: s("attn.o.weight")?,
        o_b: s("attn.o.bias")?,
        ln2_gain: s("ln2.gain")?,
        ln2_bias: s("ln2.bias")?,
        in_w: s("ffn.in.weight")?,
        in_b: s("ffn.in.bias")?,
        out_w: s("ffn.out.weight")?,
        out_b: s("ffn.out.bias")?,
    })
}

// Bucket assignment (which slot pays for each operator's activation-gradient
// work) follows the layer attribution rules:
//   output projection dx            -> embedding
//   LayerNorm affine dx             -> that LayerNorm's gain
//   normalization + residual merge  -> next tensor deeper than the LayerNorm
//   attention core                  -> value projector weight
//   GELU                            -> first FFN bias
//   residual pass-through           -> bias closing the residual branch
fn decoder_forward<'p>(
    graph: &ModelGraph,
    dims: &ModelDims,
    params: &'p ParamStore,
    batch: &TokenBatch,
) -> Result<(Tape<'p>, NodeId)> {
    let seq = batch.seq;
    if seq == 0 || seq > dims.n {
        return Err(Error::Input(format!("sequence length {seq} outside 1..={}", dims.n)));
    }
    if batch.inputs.len() % seq != 0 || batch.labels.len() != batch.inputs.len() {
        return Err(Error::Input("token batch is not a whole number of sequences".into()));
    }
    let embedding = graph.tied_slots().first().copied().unwrap_or(0);
    let blocks = (0..dims.blocks)
        .map(|l| block_slots(graph, l))
        .collect::<Result<Vec<_>>>()?;
    let final_gain = graph.slot_of("final_ln.gain").ok_or_else(|| Error::Input("no final_ln.gain".into()))?;
    let final_bias = graph.slot_of("final_ln.bias").ok_or_else(|| Error::Input("no final_ln.bias".into()))?;

    let mut pe = positional_encoding(seq, dims.d);
    let sequences = batch.inputs.len() / seq;
    if sequences > 1 {
        let one = pe.data.clone();
        pe = Matrix::from_vec(seq * sequences, dims.d, one.repeat(sequences));
    }

    let mut tape = Tape::new(params);
    let tok = tape.embed(embedding, &batch.inputs)?;
    let mut x = tape.add_const(tok, &pe, blocks[0].ln1_gain);
    for (l, b) in blocks.iter().enumerate() {
        let norm_bucket = if l == 0 { b.ln1_gain } else { blocks[l - 1].out_b };
        let n1 = tape.normalize(x, LAYER_NORM_EPS, norm_bucket);
        let a1 = tape.affine(n1, b.ln1_gain, b.ln1_bias, b.ln1_gain);
        let q = tape.linear(a1, b.q_w, Some(b.q_b), b.q_w);
        let k = tape.linear(a1, b.k_w, Some(b.k_b), b.k_w);
        let v = tape.linear(a1, b.v_w, Some(b.v_b), b.v_w);
        let att = tape.attention(q, k, v, dims.h, seq, b.v_w);
        let o = tape.linear(att, b.o_w, Some(b.o_b), b.o_w);
        let mid = tape.add(x, o, b.o_b);
        let n2 = tape.normalize(mid, LAYER_NORM_EPS, b.o_b);
        let a2 = tape.affine(n2, b.ln2_gain, b.ln2_bias, b.ln2_gain);
        let hdn = tape.linear(a2, b.in_w, Some(b.in_b), b.in_w);
        let act = tape.gelu(hdn, b.in_b);
        let f = tape.linear(act, b.out_w, Some(b.out_b), b.out_w);
        x = tape.add(mid, f, b.out_b);
    }
    let last = blocks.last().expect("at least one block");
    let nf = tape.normalize(x, LAYER_NORM_EPS, last.out_b);
    let af = tape.affine(nf, final_gain, final_bias, final_gain);
    let logits = tape.linear_tied(af, embedding, embedding);
    tape.cross_entropy(logits, &batch.labels)?;
    Ok((tape, logits))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ToyModelConfig {
        ToyModelConfig {
            blocks: 2,
            d: 8,
            h: 2,
            ffn_width: 16,
            vocab: 11,
            n: 6,
            seed: 3,
        }
    }

    fn batch(tokens: Vec<usize>, seq: usize) -> TokenBatch {
        let labels = tokens.iter().map(|&t| Some((t + 1) % 11)).collect();
        TokenBatch {
            seq,
            inputs: tokens,
            labels,
        }
    }

    #[test]
    fn reference_config_has_35_tensors() {
        let cfg = ToyModelConfig {
            blocks: 2,
            d: 32,
            h: 2,
            ffn_width: 128,
            vocab: 256,
            n: 16,
            seed: 0,
        };
        let (graph, params) = build_toy_decoder(&cfg).unwrap();
        assert_eq!(graph.len(), 35);
        assert_eq!(params.len(), 35);
    }

    #[test]
    fn vocab_below_four_is_rejected() {
        let cfg = ToyModelConfig { vocab: 3, ..small() };
        assert!(matches!(build_toy_decoder(&cfg), Err(Error::Config { field, .. }) if field == "vocab"));
    }

    #[test]
    fn init_follows_kinds() {
        let (graph, params) = build_toy_decoder(&small()).unwrap();
        for (slot, t) in graph.tensors.iter().enumerate() {
            let m = &params[slot];
            match t.kind {
                TensorKind::LayerNormGain => assert!(m.data.iter().all(|&v| v == 1.0)),
                TensorKind::Bias | TensorKind::LayerNormBias => assert!(m.data.iter().all(|&v| v == 0.0)),
                _ => {
                    let var = m.data.iter().map(|v| v * v).sum::<f64>() / m.len() as f64;
                    assert!(var > 0.0 && var.sqrt() < 0.05, "{}: std {}", t.name, var.sqrt());
                }
            }
        }
    }

    #[test]
    fn zero_weights_give_uniform_loss() {
        let (graph, mut params) = build_toy_decoder(&small()).unwrap();
        for (slot, t) in graph.tensors.iter().enumerate() {
            // Gains too, so the tied output projection sees a zero input.
            if matches!(t.kind, TensorKind::LinearWeight | TensorKind::LayerNormGain) {
                params[slot].data.fill(0.0);
            }
        }
        let tape = forward(&graph, &params, &batch(vec![1, 2, 3, 4], 4).into()).unwrap();
        assert!((tape.loss() - 11f64.ln()).abs() < 1e-6, "loss {}", tape.loss());
    }

    #[test]
    fn forward_is_deterministic() {
        let (graph, params) = build_toy_decoder(&small()).unwrap();
        let b: Batch = batch(vec![4, 5, 6, 7, 8, 9], 6).into();
        let t1 = forward(&graph, &params, &b).unwrap();
        let t2 = forward(&graph, &params, &b).unwrap();
        assert_eq!(t1.loss().to_bits(), t2.loss().to_bits());
        assert_eq!(t1.fp_flops(), t2.fp_flops());
    }

    #[test]
    fn causal_outputs_ignore_future_tokens() {
        let (graph, params) = build_toy_decoder(&small()).unwrap();
        let a: Batch = batch(vec![4, 5, 6, 7, 8, 9], 6).into();
        let b: Batch = batch(vec![4, 5, 6, 10, 1, 2], 6).into();
        let (ta, la) = forward_with_output(&graph, &params, &a).unwrap();
        let (tb, lb) = forward_with_output(&graph, &params, &b).unwrap();
        for p in 0..3 {
            assert_eq!(ta.value(la).row(p), tb.value(lb).row(p));
        }
        assert_ne!(ta.value(la).row(3), tb.value(lb).row(3));
    }

    #[test]
    fn out_of_range_token_is_an_input_error() {
        let (graph, params) = build_toy_decoder(&small()).unwrap();
        let r = forward(&graph, &params, &batch(vec![1, 11], 2).into());
        assert!(matches!(r, Err(Error::Input(_))));
    }

    #[test]
    fn too_long_sequence_is_rejected() {
        let (graph, params) = build_toy_decoder(&small()).unwrap();
        let r = forward(&graph, &params, &batch(vec![1; 7], 7).into());
        assert!(matches!(r, Err(Error::Input(_))));
    }
}
