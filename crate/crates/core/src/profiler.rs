//! Analytical per-tensor FLOPs profile and the cost of a selection mask.
//!
//! Every closed form below counts exactly the scalar operations executed by
//! the kernels in [`crate::autodiff`], so a profile can be checked against a
//! [`FlopsMeter`] to the FLOP.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::FlopsMeter;
use crate::error::{Error, Result};
use crate::graph::{Architecture, DyConvention, ModelGraph, SelectionMask, TensorKind};
use crate::model::block_slots;

/// Per-batch shape used for profiling: `batch` sequences of `seq` rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchShape {
    pub batch: usize,
    pub seq: usize,
}

impl BatchShape {
    pub fn rows(&self) -> u64 {
        (self.batch * self.seq) as u64
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopsProfile {
    pub shape: BatchShape,
    /// Slot-indexed activation-gradient cost.
    pub t_dy: Vec<u64>,
    /// Slot-indexed weight-gradient cost.
    pub t_dw: Vec<u64>,
    pub t_fp: u64,
    pub t_full: u64,
    /// Slots of tied tensors; selecting one forces every `t_dy`.
    pub tied: Vec<usize>,
}

impl FlopsProfile {
    /// Builds a profile from raw vectors, deriving `t_full`.
    pub fn new(shape: BatchShape, t_dy: Vec<u64>, t_dw: Vec<u64>, t_fp: u64, tied: Vec<usize>) -> Result<Self> {
        if t_dy.len() != t_dw.len() || t_dy.is_empty() {
            return Err(Error::Profile("t_dy and t_dw must be non-empty and of equal length".into()));
        }
        if tied.iter().any(|&s| s >= t_dy.len()) {
            return Err(Error::Profile("tied slot out of range".into()));
        }
        let t_full = t_fp + t_dy.iter().sum::<u64>() + t_dw.iter().sum::<u64>();
        Ok(FlopsProfile {
            shape,
            t_dy,
            t_dw,
            t_fp,
            t_full,
            tied,
        })
    }

    pub fn len(&self) -> usize {
        self.t_dy.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t_dy.is_empty()
    }

    pub fn sigma(&self, mask: &SelectionMask, convention: DyConvention) -> SelectionMask {
        if mask.selected().any(|s| self.tied.contains(&s)) {
            SelectionMask::full(self.len())
        } else {
            mask.sigma(convention)
        }
    }

    /// Backprop cost of `mask`: selected `t_dw` plus `σ`-flagged `t_dy`.
    pub fn backprop_cost(&self, mask: &SelectionMask, convention: DyConvention) -> u64 {
        assert_eq!(mask.len(), self.len(), "mask length must match profile");
        let sigma = self.sigma(mask, convention);
        let dw: u64 = mask.selected().map(|s| self.t_dw[s]).sum();
        let dy: u64 = sigma.selected().map(|s| self.t_dy[s]).sum();
        dw + dy
    }

    /// The `t_dy` a tied tensor effectively carries once the forced full-depth
    /// propagation is folded in. Equals `t_dy` for untied tensors.
    pub fn effective_dy(&self, slot: usize) -> u64 {
        if self.tied.contains(&slot) {
            self.t_dy.iter().sum()
        } else {
            self.t_dy[slot]
        }
    }

    pub fn write_csv(&self, graph: &ModelGraph, out: impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let csv_err = |e: csv::Error| Error::Profile(format!("writing CSV: {e}"));
        w.write_record(["bp_index", "name", "kind", "shape", "t_dy", "t_dw", "t_dy_effective"])
            .map_err(csv_err)?;
        for (slot, t) in graph.tensors.iter().enumerate() {
            let shape = t.shape.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("x");
            w.write_record([
                t.bp_index.to_string(),
                t.name.clone(),
                kind_label(t.kind).to_string(),
                shape,
                self.t_dy[slot].to_string(),
                self.t_dw[slot].to_string(),
                self.effective_dy(slot).to_string(),
            ])
            .map_err(csv_err)?;
        }
        w.flush().map_err(|e| Error::Profile(format!("writing CSV: {e}")))
    }

    /// Table rows plus `t_fp` and `t_full`, as a JSON document.
    pub fn to_json(&self, graph: &ModelGraph) -> serde_json::Value {
        let rows: Vec<_> = graph
            .tensors
            .iter()
            .enumerate()
            .map(|(slot, t)| {
                serde_json::json!({
                    "bp_index": t.bp_index,
                    "name": t.name,
                    "kind": t.kind,
                    "shape": t.shape,
                    "t_dy": self.t_dy[slot],
                    "t_dw": self.t_dw[slot],
                    "t_dy_effective": self.effective_dy(slot),
                })
            })
            .collect();
        serde_json::json!({
            "batch": self.shape.batch,
            "seq": self.shape.seq,
            "t_fp": self.t_fp,
            "t_full": self.t_full,
            "tensors": rows,
        })
    }

    pub fn save(&self, graph: &ModelGraph, csv_path: &Path, json_path: &Path) -> Result<()> {
        let file = std::fs::File::create(csv_path).map_err(|e| Error::io(csv_path, e))?;
        self.write_csv(graph, std::io::BufWriter::new(file))?;
        let text = serde_json::to_string_pretty(&self.to_json(graph)).expect("profile serializes");
        std::fs::write(json_path, text + "\n").map_err(|e| Error::io(json_path, e))
    }
}

fn kind_label(kind: TensorKind) -> &'static str {
    match kind {
        TensorKind::TiedEmbedding => "tied_embedding",
        TensorKind::LinearWeight => "linear_weight",
        TensorKind::Bias => "bias",
        TensorKind::LayerNormGain => "layer_norm_gain",
        TensorKind::LayerNormBias => "layer_norm_bias",
    }
}

/// Forward cost plus per-slot backprop costs for `graph` at `shape`.
pub fn profile_flops(graph: &ModelGraph, shape: BatchShape) -> Result<FlopsProfile> {
    if shape.batch == 0 || shape.seq == 0 {
        return Err(Error::config("batch", "batch size and sequence length must be at least 1"));
    }
    match &graph.arch {
        Architecture::DenseChain { widths } => dense_chain_profile(graph, widths, shape),
        Architecture::Decoder(dims) => {
            if shape.seq > dims.n {
                return Err(Error::config("seq", format!("{} exceeds model n = {}", shape.seq, dims.n)));
            }
            decoder_profile(graph, shape)
        }
    }
}

fn dense_chain_profile(graph: &ModelGraph, widths: &[usize], shape: BatchShape) -> Result<FlopsProfile> {
    let r = shape.rows();
    let n = graph.len();
    let mut t_dy = vec![0; n];
    let mut t_dw = vec![0; n];
    let mut t_fp = 0;
    for slot in 0..n {
        let t = &graph.tensors[slot];
        if t.kind != TensorKind::LinearWeight {
            return Err(Error::Profile(format!("dense chain cannot contain {:?}", t.kind)));
        }
        let (a, b) = (t.shape[0] as u64, t.shape[1] as u64);
        t_dy[slot] = 2 * r * a * b;
        t_dw[slot] = 2 * r * a * b;
        t_fp += 2 * r * a * b;
    }
    let out = *widths.last().expect("validated chain") as u64;
    t_fp += 4 * r * out + 1;
    FlopsProfile::new(shape, t_dy, t_dw, t_fp, Vec::new())
}

fn decoder_profile(graph: &ModelGraph, shape: BatchShape) -> Result<FlopsProfile> {
    let dims = *graph.dims().expect("decoder");
    let r = shape.rows();
    let d = dims.d as u64;
    let f = dims.ffn as u64;
    let v = dims.vocab as u64;
    let dh = dims.head_dim() as u64;
    let n = shape.seq as u64;
    let pairs = shape.batch as u64 * dims.h as u64 * n * (n + 1) / 2;
    let norm_fwd = r * (5 * d + 5);
    let norm_bwd = r * (7 * d + 2);
    let resid_acc = r * d;

    let slots = graph.len();
    let mut t_dy = vec![0u64; slots];
    let mut t_dw = vec![0u64; slots];
    for (slot, t) in graph.tensors.iter().enumerate() {
        t_dw[slot] = match t.kind {
            TensorKind::TiedEmbedding => 2 * r * v * d,
            TensorKind::LinearWeight => 2 * r * (t.shape[0] * t.shape[1]) as u64,
            TensorKind::Bias => r * t.shape[0] as u64,
            TensorKind::LayerNormGain => 2 * r * d,
            TensorKind::LayerNormBias => r * d,
        };
    }

    let missing = |name: &str| Error::Profile(format!("decoder graph has no tensor `{name}`"));
    let embedding = *graph.tied_slots().first().ok_or_else(|| missing("embedding"))?;
    let final_gain = graph.slot_of("final_ln.gain").ok_or_else(|| missing("final_ln.gain"))?;
    let blocks = (0..dims.blocks)
        .map(|l| block_slots(graph, l).map_err(|e| Error::Profile(e.to_string())))
        .collect::<Result<Vec<_>>>()?;

    // Forward: positional add, blocks, final LayerNorm, logits, loss.
    let mut t_fp = r * d;
    for _ in &blocks {
        t_fp += 2 * norm_fwd + 2 * (2 * r * d);
        t_fp += 4 * (2 * r * d * d + r * d);
        t_fp += pairs * (4 * dh + 5);
        t_fp += 2 * r * d * f + r * f + 9 * r * f + 2 * r * f * d + r * d;
        t_fp += 2 * r * d;
    }
    t_fp += norm_fwd + 2 * r * d + 2 * r * d * v + r * (5 * v + 6);

    t_dy[embedding] += 2 * r * d * v;
    t_dy[final_gain] += r * d;
    for (l, b) in blocks.iter().enumerate() {
        // Normalization feeding this block's input, merged with the residual.
        let below = if l == 0 { b.ln1_gain } else { blocks[l - 1].out_b };
        t_dy[below] += norm_bwd + resid_acc;
        t_dy[b.out_w] += 2 * r * f * d;
        t_dy[b.in_b] += 18 * r * f;
        t_dy[b.in_w] += 2 * r * d * f;
        t_dy[b.ln2_gain] += r * d;
        t_dy[b.o_b] += norm_bwd + resid_acc;
        t_dy[b.o_w] += 2 * r * d * d;
        t_dy[b.v_w] += pairs * (8 * dh + 5) + 2 * r * d * d;
        t_dy[b.k_w] += 2 * r * d * d + r * d;
        t_dy[b.q_w] += 2 * r * d * d + r * d;
        t_dy[b.ln1_gain] += r * d;
    }
    // The final LayerNorm's normalization has no residual merge.
    let last = blocks.last().expect("at least one block");
    t_dy[last.out_b] += norm_bwd;

    FlopsProfile::new(shape, t_dy, t_dw, t_fp, vec![embedding])
}

/// `T_fp + Σ_{m_i} t_dw_i + Σ_{σ_i} t_dy_i`.
pub fn selective_cost(profile: &FlopsProfile, mask: &SelectionMask, convention: DyConvention) -> u64 {
    profile.t_fp + profile.backprop_cost(mask, convention)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorDelta {
    pub slot: usize,
    pub predicted_dy: u64,
    pub measured_dy: u64,
    pub predicted_dw: u64,
    pub measured_dw: u64,
}

impl TensorDelta {
    pub fn abs_delta(&self) -> u64 {
        (self.predicted_dy + self.predicted_dw).abs_diff(self.measured_dy + self.measured_dw)
    }

    pub fn rel_delta(&self) -> f64 {
        rel(self.predicted_dy + self.predicted_dw, self.measured_dy + self.measured_dw)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeterReport {
    pub tensors: Vec<TensorDelta>,
    pub predicted_backprop: u64,
    pub measured_backprop: u64,
    pub predicted_fp: u64,
    pub measured_fp: u64,
    /// Slots whose relative delta exceeds the tolerance.
    pub flagged: Vec<usize>,
}

impl MeterReport {
    pub fn rel_delta(&self) -> f64 {
        rel(self.predicted_backprop, self.measured_backprop)
    }

    pub fn exact(&self) -> bool {
        self.predicted_backprop == self.measured_backprop && self.predicted_fp == self.measured_fp
    }
}

fn rel(predicted: u64, measured: u64) -> f64 {
    let diff = predicted.abs_diff(measured) as f64;
    if diff == 0.0 {
        0.0
    } else {
        diff / predicted.max(measured) as f64
    }
}

/// Compares predicted and metered per-tensor backprop FLOPs for `mask`.
pub fn verify_against_meter(
    profile: &FlopsProfile,
    mask: &SelectionMask,
    convention: DyConvention,
    meter: &FlopsMeter,
    tolerance: f64,
) -> Result<MeterReport> {
    let n = profile.len();
    if mask.len() != n || meter.dy.len() != n || meter.dw.len() != n {
        return Err(Error::Input(format!(
            "shape mismatch: profile has {n} tensors, mask {}, meter {}",
            mask.len(),
            meter.dy.len()
        )));
    }
    let sigma = profile.sigma(mask, convention);
    let tensors: Vec<TensorDelta> = (0..n)
        .map(|slot| TensorDelta {
            slot,
            predicted_dy: if sigma.get(slot) { profile.t_dy[slot] } else { 0 },
            measured_dy: meter.dy[slot],
            predicted_dw: if mask.get(slot) { profile.t_dw[slot] } else { 0 },
            measured_dw: meter.dw[slot],
        })
        .collect();
    let flagged = tensors
        .iter()
        .filter(|t| t.rel_delta() > tolerance)
        .map(|t| t.slot)
        .collect();
    Ok(MeterReport {
        predicted_backprop: tensors.iter().map(|t| t.predicted_dy + t.predicted_dw).sum(),
        measured_backprop: meter.backprop_total(),
        predicted_fp: profile.t_fp,
        measured_fp: meter.fp_flops,
        tensors,
        flagged,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{build_graph, ModelDims};

    fn dims() -> ModelDims {
        ModelDims {
            n: 16,
            d: 32,
            h: 2,
            ffn: 128,
            vocab: 256,
            blocks: 2,
        }
    }

    fn one() -> BatchShape {
        BatchShape { batch: 1, seq: 16 }
    }

    #[test]
    fn dense_and_bias_rules() {
        let graph = build_graph(ModelDims { d: 32, ffn: 64, ..dims() }).unwrap();
        let p = profile_flops(&graph, one()).unwrap();
        let w = graph.slot_of("blocks.0.ffn.in.weight").unwrap();
        assert_eq!(p.t_dy[w], 65_536);
        assert_eq!(p.t_dw[w], 65_536);
        let b = graph.slot_of("blocks.0.ffn.in.bias").unwrap();
        assert_eq!(p.t_dw[b], 1_024);
        let bk = graph.slot_of("blocks.1.attn.k.bias").unwrap();
        assert_eq!(p.t_dy[bk], 0);
    }

    #[test]
    fn full_and_empty_masks() {
        let graph = build_graph(dims()).unwrap();
        let p = profile_flops(&graph, one()).unwrap();
        let n = graph.len();
        for conv in [DyConvention::Inclusive, DyConvention::Exclusive] {
            assert_eq!(selective_cost(&p, &SelectionMask::full(n), conv), p.t_full);
            assert_eq!(selective_cost(&p, &SelectionMask::empty(n), conv), p.t_fp);
        }
    }

    #[test]
    fn topmost_exclusive_pays_only_its_weight_gradient() {
        let graph = ModelGraph::dense_chain(&[3, 4, 5]).unwrap();
        let p = profile_flops(&graph, BatchShape { batch: 2, seq: 1 }).unwrap();
        let m = SelectionMask::from_slots(2, [0]);
        assert_eq!(selective_cost(&p, &m, DyConvention::Exclusive), p.t_fp + p.t_dw[0]);
    }

    #[test]
    fn tied_selection_pays_every_dy() {
        let graph = build_graph(dims()).unwrap();
        let p = profile_flops(&graph, one()).unwrap();
        let m = SelectionMask::from_slots(graph.len(), [0]);
        let all_dy: u64 = p.t_dy.iter().sum();
        assert_eq!(p.backprop_cost(&m, DyConvention::Inclusive), all_dy + p.t_dw[0]);
        assert_eq!(p.effective_dy(0), all_dy);
    }

    #[test]
    fn csv_has_a_row_per_tensor() {
        let graph = build_graph(dims()).unwrap();
        let p = profile_flops(&graph, one()).unwrap();
        let mut buf = Vec::new();
        p.write_csv(&graph, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 36);
        assert!(text.lines().nth(1).unwrap().starts_with("1,embedding,tied_embedding,256x32,"));
    }

    #[test]
    fn meter_shape_mismatch_is_an_error() {
        let graph = ModelGraph::dense_chain(&[3, 4, 5]).unwrap();
        let p = profile_flops(&graph, BatchShape { batch: 2, seq: 1 }).unwrap();
        let meter = FlopsMeter::new(3);
        let r = verify_against_meter(&p, &SelectionMask::empty(2), DyConvention::Inclusive, &meter, 0.01);
        assert!(r.is_err());
    }
}
