//! Tensor-level computing graph and selection-mask algebra.
//!
//! A [`ModelGraph`] lists every trainable tensor of a model in backpropagation
//! order. Position 1 (`bp_index == 1`) is the tensor whose gradient is reached
//! first when backpropagating from the loss; the deepest tensor has
//! `bp_index == N`. Masks, profiles and importance vectors are all indexed by
//! *slot* (`bp_index - 1`).

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// The layer-kind taxonomy used by the FLOPs attribution rules.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TensorKind {
    TiedEmbedding,
    LinearWeight,
    Bias,
    LayerNormGain,
    LayerNormBias,
}

/// Structural position of a tensor inside its host layer. The profiler uses it
/// to decide which tensor carries the backprop cost of parameter-free
/// operators (attention, activation, normalization).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TensorRole {
    Embedding,
    /// A plain dense layer of a [`Architecture::DenseChain`].
    Dense,
    AttnQuery,
    AttnKey,
    AttnValue,
    AttnOutput,
    FfnIn,
    FfnOut,
    LayerNorm,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorMeta {
    pub id: usize,
    pub name: String,
    pub kind: TensorKind,
    pub role: TensorRole,
    pub shape: Vec<usize>,
    pub bp_index: usize,
    pub segment_id: usize,
}

impl TensorMeta {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    /// Position in slot-indexed vectors.
    pub fn slot(&self) -> usize {
        self.bp_index - 1
    }
}

/// Hyperparameters of the decoder-only transformer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    /// Tokens per sequence.
    pub n: usize,
    /// Model width.
    pub d: usize,
    /// Attention heads.
    pub h: usize,
    pub ffn: usize,
    pub vocab: usize,
    pub blocks: usize,
}

impl ModelDims {
    pub fn validate(&self) -> Result<()> {
        for (field, value) in [
            ("n", self.n),
            ("d", self.d),
            ("h", self.h),
            ("ffn", self.ffn),
            ("vocab", self.vocab),
            ("blocks", self.blocks),
        ] {
            if value == 0 {
                return Err(Error::config(field, "must be at least 1"));
            }
        }
        if self.d % self.h != 0 {
            return Err(Error::config(
                "d",
                format!("width {} is not divisible by {} heads", self.d, self.h),
            ));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d / self.h
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    /// Pre-LayerNorm decoder-only transformer with tied input/output embedding.
    Decoder(ModelDims),
    /// Bias-free chain of dense layers trained with a mean squared loss.
    /// `widths[0]` is the input width and `widths[L]` the output width.
    DenseChain { widths: Vec<usize> },
}

/// Which tensors pay their own activation-gradient cost when selected.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DyConvention {
    /// The deepest selected tensor's own `t_dy` is charged.
    #[default]
    Inclusive,
    /// Only tensors strictly shallower than the deepest selected one are charged.
    Exclusive,
}

/// Boolean selection vector over slots (slot 0 is closest to the loss).
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SelectionMask(Vec<bool>);

impl SelectionMask {
    pub fn new(bits: Vec<bool>) -> Self {
        SelectionMask(bits)
    }

    pub fn empty(len: usize) -> Self {
        SelectionMask(vec![false; len])
    }

    pub fn full(len: usize) -> Self {
        SelectionMask(vec![true; len])
    }

    /// Slots `0..depth` selected.
    pub fn prefix(len: usize, depth: usize) -> Self {
        SelectionMask((0..len).map(|i| i < depth).collect())
    }

    pub fn from_slots(len: usize, slots: impl IntoIterator<Item = usize>) -> Self {
        let mut bits = vec![false; len];
        for s in slots {
            bits[s] = true;
        }
        SelectionMask(bits)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn bits(&self) -> &[bool] {
        &self.0
    }

    pub fn get(&self, slot: usize) -> bool {
        self.0[slot]
    }

    pub fn set(&mut self, slot: usize, value: bool) {
        self.0[slot] = value;
    }

    pub fn count(&self) -> usize {
        self.0.iter().filter(|&&b| b).count()
    }

    pub fn none(&self) -> bool {
        !self.0.iter().any(|&b| b)
    }

    pub fn selected(&self) -> impl Iterator<Item = usize> + '_ {
        self.0.iter().enumerate().filter(|(_, &b)| b).map(|(i, _)| i)
    }

    /// Deepest selected slot.
    pub fn deepest(&self) -> Option<usize> {
        self.0.iter().rposition(|&b| b)
    }

    /// Elementwise `self ⊆ other`.
    pub fn is_subset(&self, other: &SelectionMask) -> bool {
        self.0.iter().zip(&other.0).all(|(&a, &b)| !a || b)
    }

    /// Gradient-path indicator: which slots execute their activation-gradient
    /// work given this selection.
    pub fn sigma(&self, convention: DyConvention) -> SelectionMask {
        let n = self.0.len();
        match self.deepest() {
            None => SelectionMask::empty(n),
            Some(k) => match convention {
                DyConvention::Inclusive => SelectionMask::prefix(n, k + 1),
                DyConvention::Exclusive => SelectionMask::prefix(n, k),
            },
        }
    }

    /// Renders the mask input-to-output (deepest slot first), e.g. `0011111`.
    pub fn forward_order_string(&self) -> String {
        self.0
            .iter()
            .rev()
            .map(|&b| if b { '1' } else { '0' })
            .collect()
    }
}

impl fmt::Display for SelectionMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for &b in &self.0 {
            f.write_str(if b { "1" } else { "0" })?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelGraph {
    pub arch: Architecture,
    /// Sorted by `bp_index`.
    pub tensors: Vec<TensorMeta>,
    /// Ids of tensors whose storage serves as both input and output embedding.
    pub tied: Vec<usize>,
}

struct GraphBuilder {
    forward: Vec<(String, TensorKind, TensorRole, Vec<usize>, usize)>,
}

impl GraphBuilder {
    fn push(&mut self, name: String, kind: TensorKind, role: TensorRole, shape: Vec<usize>, segment: usize) {
        self.forward.push((name, kind, role, shape, segment));
    }
}

/// Builds the tensor graph of the toy decoder.
///
/// Backprop order is the reverse of forward execution, with two conventions:
/// the tied embedding takes the slot of its output-side use (slot 0), and the
/// value projector's weight precedes its bias so that the tensor carrying the
/// attention backprop cost is the first one of the attention group reached.
pub fn build_graph(dims: ModelDims) -> Result<ModelGraph> {
    dims.validate()?;
    let ModelDims { d, ffn, vocab, blocks, .. } = dims;
    use TensorKind::*;
    use TensorRole as R;

    // Forward execution order, excluding the tied embedding. Within a linear
    // layer the weight executes before the bias.
    let mut g = GraphBuilder { forward: Vec::new() };
    let mut seg = 1;
    for l in 0..blocks {
        let p = format!("blocks.{l}");
        g.push(format!("{p}.ln1.gain"), LayerNormGain, R::LayerNorm, vec![d], seg);
        g.push(format!("{p}.ln1.bias"), LayerNormBias, R::LayerNorm, vec![d], seg);
        seg += 1;
        for (proj, role) in [("q", R::AttnQuery), ("k", R::AttnKey)] {
            g.push(format!("{p}.attn.{proj}.weight"), LinearWeight, role, vec![d, d], seg);
            g.push(format!("{p}.attn.{proj}.bias"), Bias, role, vec![d], seg);
        }
        // Bias listed first so that reversal puts the weight ahead of it.
        g.push(format!("{p}.attn.v.bias"), Bias, R::AttnValue, vec![d], seg);
        g.push(format!("{p}.attn.v.weight"), LinearWeight, R::AttnValue, vec![d, d], seg);
        g.push(format!("{p}.attn.o.weight"), LinearWeight, R::AttnOutput, vec![d, d], seg);
        g.push(format!("{p}.attn.o.bias"), Bias, R::AttnOutput, vec![d], seg);
        seg += 1;
        g.push(format!("{p}.ln2.gain"), LayerNormGain, R::LayerNorm, vec![d], seg);
        g.push(format!("{p}.ln2.bias"), LayerNormBias, R::LayerNorm, vec![d], seg);
        seg += 1;
        g.push(format!("{p}.ffn.in.weight"), LinearWeight, R::FfnIn, vec![d, ffn], seg);
        g.push(format!("{p}.ffn.in.bias"), Bias, R::FfnIn, vec![ffn], seg);
        g.push(format!("{p}.ffn.out.weight"), LinearWeight, R::FfnOut, vec![ffn, d], seg);
        g.push(format!("{p}.ffn.out.bias"), Bias, R::FfnOut, vec![d], seg);
        seg += 1;
    }
    g.push("final_ln.gain".into(), LayerNormGain, R::LayerNorm, vec![d], seg);
    g.push("final_ln.bias".into(), LayerNormBias, R::LayerNorm, vec![d], seg);

    let mut tensors = vec![TensorMeta {
        id: 0,
        name: "embedding".into(),
        kind: TiedEmbedding,
        role: R::Embedding,
        shape: vec![vocab, d],
        bp_index: 1,
        segment_id: 0,
    }];
    let count = g.forward.len();
    for (i, (name, kind, role, shape, segment_id)) in g.forward.into_iter().enumerate() {
        tensors.push(TensorMeta {
            id: i + 1,
            name,
            kind,
            role,
            shape,
            bp_index: count - i + 1,
            segment_id,
        });
    }
    tensors.sort_by_key(|t| t.bp_index);
    let graph = ModelGraph {
        arch: Architecture::Decoder(dims),
        tensors,
        tied: vec![0],
    };
    graph.validate()?;
    Ok(graph)
}

impl ModelGraph {
    /// Graph of a bias-free dense chain; layer `i` maps `widths[i] -> widths[i+1]`.
    /// Layers are named `layer{i+1}` in input-to-output order.
    pub fn dense_chain(widths: &[usize]) -> Result<ModelGraph> {
        if widths.len() < 2 {
            return Err(Error::config("widths", "need at least one layer"));
        }
        if let Some(pos) = widths.iter().position(|&w| w == 0) {
            return Err(Error::config(format!("widths[{pos}]"), "must be at least 1"));
        }
        let layers = widths.len() - 1;
        let tensors = (0..layers)
            .rev()
            .enumerate()
            .map(|(slot, i)| TensorMeta {
                id: i,
                name: format!("layer{}", i + 1),
                kind: TensorKind::LinearWeight,
                role: TensorRole::Dense,
                shape: vec![widths[i], widths[i + 1]],
                bp_index: slot + 1,
                segment_id: i,
            })
            .collect();
        let graph = ModelGraph {
            arch: Architecture::DenseChain {
                widths: widths.to_vec(),
            },
            tensors,
            tied: Vec::new(),
        };
        graph.validate()?;
        Ok(graph)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn dims(&self) -> Option<&ModelDims> {
        match &self.arch {
            Architecture::Decoder(d) => Some(d),
            Architecture::DenseChain { .. } => None,
        }
    }

    pub fn slot_of(&self, name: &str) -> Option<usize> {
        self.tensors.iter().position(|t| t.name == name)
    }

    pub fn slot_of_id(&self, id: usize) -> Option<usize> {
        self.tensors.iter().position(|t| t.id == id)
    }

    pub fn is_tied_slot(&self, slot: usize) -> bool {
        self.tied.contains(&self.tensors[slot].id)
    }

    pub fn tied_slots(&self) -> Vec<usize> {
        (0..self.len()).filter(|&s| self.is_tied_slot(s)).collect()
    }

    /// `sigma` with the tied-embedding rule applied: training a tied tensor
    /// requires the activation gradient to reach the input embedding, so every
    /// slot's gradient-propagation work executes.
    pub fn sigma(&self, mask: &SelectionMask, convention: DyConvention) -> SelectionMask {
        if mask.selected().any(|s| self.is_tied_slot(s)) {
            SelectionMask::full(self.len())
        } else {
            mask.sigma(convention)
        }
    }

    pub fn check_mask(&self, mask: &SelectionMask) -> Result<()> {
        if mask.len() != self.len() {
            return Err(Error::Input(format!(
                "mask length {} does not match graph with {} tensors",
                mask.len(),
                self.len()
            )));
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.tensors.len();
        if n == 0 {
            return Err(Error::config("tensors", "graph has no tensors"));
        }
        let mut seen_bp = vec![false; n];
        let mut ids = std::collections::HashSet::new();
        for (slot, t) in self.tensors.iter().enumerate() {
            if t.bp_index == 0 || t.bp_index > n || seen_bp[t.bp_index - 1] {
                return Err(Error::config(
                    "bp_index",
                    format!("`{}` has bp_index {} outside a permutation of 1..={n}", t.name, t.bp_index),
                ));
            }
            seen_bp[t.bp_index - 1] = true;
            if t.bp_index != slot + 1 {
                return Err(Error::config("tensors", "tensors must be sorted by bp_index"));
            }
            if t.shape.is_empty() || t.shape.contains(&0) {
                return Err(Error::config("shape", format!("`{}` has an empty dimension", t.name)));
            }
            if !ids.insert(t.id) {
                return Err(Error::config("id", format!("duplicate tensor id {}", t.id)));
            }
        }
        for &id in &self.tied {
            let slot = self
                .slot_of_id(id)
                .ok_or_else(|| Error::config("tied", format!("unknown tensor id {id}")))?;
            if self.tensors[slot].kind != TensorKind::TiedEmbedding {
                return Err(Error::config("tied", format!("tensor {id} is not a tied embedding")));
            }
        }
        match &self.arch {
            Architecture::Decoder(dims) => {
                dims.validate()?;
                let mut present = std::collections::HashSet::new();
                for t in &self.tensors {
                    present.insert(t.kind);
                }
                for kind in [
                    TensorKind::TiedEmbedding,
                    TensorKind::LinearWeight,
                    TensorKind::Bias,
                    TensorKind::LayerNormGain,
                    TensorKind::LayerNormBias,
                ] {
                    if !present.contains(&kind) {
                        return Err(Error::config("tensors", format!("decoder graph has no {kind:?} tensor")));
                    }
                }
                for t in &self.tensors {
                    if t.kind == TensorKind::TiedEmbedding && t.shape != [dims.vocab, dims.d] {
                        return Err(Error::config("shape", "tied embedding must be vocab x d"));
                    }
                }
            }
            Architecture::DenseChain { widths } => {
                if widths.len() != n + 1 {
                    return Err(Error::config("widths", "one width per layer boundary expected"));
                }
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("graph serializes")
    }

    pub fn from_json(text: &str) -> Result<ModelGraph> {
        let graph: ModelGraph = serde_json::from_str(text).map_err(|source| Error::Json {
            context: "graph document".into(),
            source,
        })?;
        graph.validate()?;
        Ok(graph)
    }

    pub fn load(path: &Path) -> Result<ModelGraph> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_dims() -> ModelDims {
        ModelDims { n: 16, d: 32, h: 2, ffn: 128, vocab: 256, blocks: 2 }
    }

    fn mask(bits: &[u8]) -> SelectionMask {
        SelectionMask::new(bits.iter().map(|&b| b == 1).collect())
    }

    #[test]
    fn toy_graph_has_35_tensors() {
        // 1 tied embedding + 2 blocks x (4 projectors + 4 biases + 2 LN pairs
        // + 2 FFN weights + 2 FFN biases) + final LN pair.
        let per_block = 4 + 4 + 2 * 2 + 2 + 2;
        assert_eq!(per_block, 16);
        let g = build_graph(toy_dims()).unwrap();
        assert_eq!(g.len(), 1 + 2 * per_block + 2);
        assert_eq!(g.len(), 35);
        let count = |k| g.tensors.iter().filter(|t| t.kind == k).count();
        assert_eq!(count(TensorKind::TiedEmbedding), 1);
        assert_eq!(count(TensorKind::LinearWeight), 12);
        assert_eq!(count(TensorKind::Bias), 12);
        assert_eq!(count(TensorKind::LayerNormGain), 5);
        assert_eq!(count(TensorKind::LayerNormBias), 5);
    }

    #[test]
    fn toy_graph_order() {
        let g = build_graph(toy_dims()).unwrap();
        let names: Vec<_> = g.tensors.iter().take(19).map(|t| t.name.as_str()).collect();
        assert_eq!(
            names,
            [
                "embedding",
                "final_ln.bias",
                "final_ln.gain",
                "blocks.1.ffn.out.bias",
                "blocks.1.ffn.out.weight",
                "blocks.1.ffn.in.bias",
                "blocks.1.ffn.in.weight",
                "blocks.1.ln2.bias",
                "blocks.1.ln2.gain",
                "blocks.1.attn.o.bias",
                "blocks.1.attn.o.weight",
                "blocks.1.attn.v.weight",
                "blocks.1.attn.v.bias",
                "blocks.1.attn.k.bias",
                "blocks.1.attn.k.weight",
                "blocks.1.attn.q.bias",
                "blocks.1.attn.q.weight",
                "blocks.1.ln1.bias",
                "blocks.1.ln1.gain",
            ]
        );
        assert_eq!(g.tensors.last().unwrap().name, "blocks.0.ln1.gain");
        assert_eq!(g.tied_slots(), vec![0]);
    }

    #[test]
    fn invalid_dims_name_the_field() {
        let err = build_graph(ModelDims { blocks: 0, ..toy_dims() }).unwrap_err();
        assert!(matches!(err, Error::Config { ref field, .. } if field == "blocks"), "{err}");
        let err = build_graph(ModelDims { d: 33, ..toy_dims() }).unwrap_err();
        assert!(matches!(err, Error::Config { ref field, .. } if field == "d"), "{err}");
    }

    #[test]
    fn sigma_examples() {
        let m = mask(&[0, 0, 1, 0, 1, 0, 0]);
        let s = m.sigma(DyConvention::Inclusive);
        assert_eq!(s, mask(&[1, 1, 1, 1, 1, 0, 0]));
        // Printed input-to-output this is the familiar [0,0,1,1,1,1,1].
        assert_eq!(s.forward_order_string(), "0011111");
        assert_eq!(m.sigma(DyConvention::Exclusive), mask(&[1, 1, 1, 1, 0, 0, 0]));

        assert_eq!(SelectionMask::empty(7).sigma(DyConvention::Inclusive), SelectionMask::empty(7));
        let top = mask(&[1, 0, 0, 0]);
        assert_eq!(top.sigma(DyConvention::Inclusive), top);
        assert_eq!(top.sigma(DyConvention::Exclusive), SelectionMask::empty(4));
    }

    #[test]
    fn tied_selection_forces_full_depth() {
        let g = build_graph(toy_dims()).unwrap();
        let m = SelectionMask::from_slots(g.len(), [0]);
        assert_eq!(g.sigma(&m, DyConvention::Inclusive), SelectionMask::full(g.len()));
        let m = SelectionMask::from_slots(g.len(), [3]);
        assert_eq!(g.sigma(&m, DyConvention::Inclusive), SelectionMask::prefix(g.len(), 4));
    }

    #[test]
    fn json_round_trip_and_validation() {
        let g = build_graph(toy_dims()).unwrap();
        let back = ModelGraph::from_json(&g.to_json()).unwrap();
        assert_eq!(g, back);

        let mut bad = g.clone();
        bad.tensors[3].bp_index = 5;
        assert!(ModelGraph::from_json(&bad.to_json()).is_err());
        let mut bad = g.clone();
        bad.tensors[2].shape = vec![0];
        assert!(ModelGraph::from_json(&bad.to_json()).is_err());
    }

    #[test]
    fn dense_chain_graph() {
        let g = ModelGraph::dense_chain(&[3, 4, 5, 6, 2]).unwrap();
        let names: Vec<_> = g.tensors.iter().map(|t| t.name.as_str()).collect();
        assert_eq!(names, ["layer4", "layer3", "layer2", "layer1"]);
        assert_eq!(g.tensors[0].shape, vec![6, 2]);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn arb_mask() -> impl Strategy<Value = SelectionMask> {
            proptest::collection::vec(any::<bool>(), 1..40).prop_map(SelectionMask::new)
        }

        proptest! {
            #[test]
            fn sigma_is_idempotent(m in arb_mask()) {
                for c in [DyConvention::Inclusive, DyConvention::Exclusive] {
                    let s = m.sigma(c);
                    prop_assert_eq!(s.sigma(DyConvention::Inclusive).deepest(), s.deepest());
                }
            }

            #[test]
            fn sigma_is_monotone(a in arb_mask(), extra in proptest::collection::vec(any::<bool>(), 40)) {
                let b = SelectionMask::new(a.bits().iter().zip(&extra).map(|(&x, &y)| x || y).collect());
                for c in [DyConvention::Inclusive, DyConvention::Exclusive] {
                    prop_assert!(a.sigma(c).is_subset(&b.sigma(c)));
                }
            }

            #[test]
            fn sigma_depends_only_on_deepest(a in arb_mask(), seed in any::<u64>()) {
                let Some(k) = a.deepest() else { return Ok(()); };
                // Any other mask with the same deepest slot.
                let bits: Vec<bool> = (0..a.len())
                    .map(|i| i == k || (i < k && (seed >> (i % 64)) & 1 == 1))
                    .collect();
                let b = SelectionMask::new(bits);
                for c in [DyConvention::Inclusive, DyConvention::Exclusive] {
                    prop_assert_eq!(a.sigma(c), b.sigma(c));
                }
            }

            #[test]
            fn sigma_is_contiguous_prefix(m in arb_mask()) {
                let s = m.sigma(DyConvention::Inclusive);
                let ones = s.count();
                prop_assert_eq!(s, SelectionMask::prefix(m.len(), ones));
            }
        }
    }
}
