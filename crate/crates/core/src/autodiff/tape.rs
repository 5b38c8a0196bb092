use crate::error::{Error, Result};
use crate::tensor::{dot, Matrix};

use super::ParamStore;

pub type NodeId = usize;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

#[derive(Debug, Clone)]
pub(crate) enum Op {
    /// Row gather from an embedding table.
    Embed { table: usize, tokens: Vec<usize> },
    /// Adds a constant (positional encoding); gradient passes through.
    AddConst { x: NodeId },
    Linear { x: NodeId, weight: usize, bias: Option<usize> },
    /// `x · Wᵀ`, the output use of a tied embedding.
    LinearTied { x: NodeId, weight: usize },
    /// Feature normalization without affine parameters. The output node holds
    /// the normalized values.
    Normalize { x: NodeId, inv_std: Vec<f64> },
    Affine { x: NodeId, gain: usize, bias: usize },
    Gelu { x: NodeId },
    /// Causal multi-head scaled dot-product attention over `rows / seq`
    /// independent sequences.
    Attention {
        q: NodeId,
        k: NodeId,
        v: NodeId,
        heads: usize,
        seq: usize,
        /// Softmax probabilities, `[seqs][heads][seq * seq]`, zero above the diagonal.
        probs: Vec<f64>,
    },
    Add { a: NodeId, b: NodeId },
    /// Fused softmax cross-entropy. The logit gradient is produced in the
    /// forward pass and stored here.
    CrossEntropy { logits: NodeId, grad: Matrix },
    /// Fused mean squared error (mean over rows, summed over columns).
    MeanSquared { pred: NodeId, grad: Matrix },
}

impl Op {
    /// Activation inputs (nodes that receive gradient from this op).
    pub(crate) fn inputs(&self) -> Vec<NodeId> {
        match self {
            Op::Embed { .. } => vec![],
            Op::AddConst { x }
            | Op::Linear { x, .. }
            | Op::LinearTied { x, .. }
            | Op::Normalize { x, .. }
            | Op::Affine { x, .. }
            | Op::Gelu { x } => vec![*x],
            Op::Attention { q, k, v, .. } => vec![*q, *k, *v],
            Op::Add { a, b } => vec![*a, *b],
            Op::CrossEntropy { logits, .. } => vec![*logits],
            Op::MeanSquared { pred, .. } => vec![*pred],
        }
    }

    /// Parameter slots consumed by this op.
    pub(crate) fn params(&self) -> Vec<usize> {
        match self {
            Op::Embed { table, .. } => vec![*table],
            Op::Linear { weight, bias, .. } => std::iter::once(*weight).chain(*bias).collect(),
            Op::LinearTied { weight, .. } => vec![*weight],
            Op::Affine { gain, bias, .. } => vec![*gain, *bias],
            _ => vec![],
        }
    }

    pub(crate) fn is_loss(&self) -> bool {
        matches!(self, Op::CrossEntropy { .. } | Op::MeanSquared { .. })
    }
}

#[derive(Debug, Clone)]
pub(crate) struct OpRecord {
    pub op: Op,
    pub out: NodeId,
    /// Slot whose gradient-propagation bucket pays for this op's
    /// activation-gradient work.
    pub bucket: Option<usize>,
}

/// Execution-ordered record of a forward pass.
///
/// Every kernel counts its own floating-point operations (one multiply or add
/// is one FLOP, a fused multiply-add two; exp, tanh, sqrt and division one
/// each; comparisons, gathers and scatters zero).
#[derive(Debug, Clone)]
pub struct Tape<'p> {
    pub(crate) params: &'p ParamStore,
    pub(crate) nodes: Vec<Matrix>,
    pub(crate) ops: Vec<OpRecord>,
    pub(crate) loss: Option<(NodeId, f64)>,
    pub(crate) fp_flops: u64,
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Tape {
            params,
            nodes: Vec::new(),
            ops: Vec::new(),
            loss: None,
            fp_flops: 0,
        }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn value(&self, node: NodeId) -> &Matrix {
        &self.nodes[node]
    }

    pub fn loss(&self) -> f64 {
        self.loss.expect("tape has no loss").1
    }

    pub fn fp_flops(&self) -> u64 {
        self.fp_flops
    }

    pub fn op_count(&self) -> usize {
        self.ops.len()
    }

    /// A copy of this tape whose loss gradient is zero, as if the loss had
    /// been detached from the graph.
    pub fn detached(&self) -> Tape<'p> {
        let mut t = self.clone();
        for rec in &mut t.ops {
            match &mut rec.op {
                Op::CrossEntropy { grad, .. } | Op::MeanSquared { grad, .. } => grad.scale(0.0),
                _ => {}
            }
        }
        t
    }

    /// Registers a constant input (no gradient flows into it).
    pub fn input(&mut self, value: Matrix) -> NodeId {
        self.nodes.push(value);
        self.nodes.len() - 1
    }

    fn push(&mut self, op: Op, value: Matrix, bucket: Option<usize>, flops: u64) -> NodeId {
        let out = self.nodes.len();
        self.nodes.push(value);
        self.ops.push(OpRecord { op, out, bucket });
        self.fp_flops += flops;
        out
    }

    pub fn embed(&mut self, table: usize, tokens: &[usize]) -> Result<NodeId> {
        let e = &self.params[table];
        let mut out = Matrix::zeros(tokens.len(), e.cols);
        for (r, &tok) in tokens.iter().enumerate() {
            if tok >= e.rows {
                return Err(Error::Input(format!(
                    "token id {tok} out of range for vocabulary of {}",
                    e.rows
                )));
            }
            out.row_mut(r).copy_from_slice(e.row(tok));
        }
        let op = Op::Embed {
            table,
            tokens: tokens.to_vec(),
        };
        Ok(self.push(op, out, None, 0))
    }

    pub fn add_const(&mut self, x: NodeId, constant: &Matrix, bucket: usize) -> NodeId {
        let mut out = self.nodes[x].clone();
        out.add_assign(constant);
        let flops = out.len() as u64;
        self.push(Op::AddConst { x }, out, Some(bucket), flops)
    }

    pub fn linear(&mut self, x: NodeId, weight: usize, bias: Option<usize>, bucket: usize) -> NodeId {
        let input = &self.nodes[x];
        let w = &self.params[weight];
        let mut out = input.matmul(w);
        let mut flops = 2 * (input.rows * input.cols * w.cols) as u64;
        if let Some(b) = bias {
            let b = &self.params[b];
            for r in 0..out.rows {
                for (o, &bv) in out.row_mut(r).iter_mut().zip(&b.data) {
                    *o += bv;
                }
            }
            flops += out.len() as u64;
        }
        self.push(Op::Linear { x, weight, bias }, out, Some(bucket), flops)
    }

    pub fn linear_tied(&mut self, x: NodeId, weight: usize, bucket: usize) -> NodeId {
        let input = &self.nodes[x];
        let w = &self.params[weight];
        let out = input.matmul_t(w);
        let flops = 2 * (input.rows * input.cols * w.rows) as u64;
        self.push(Op::LinearTied { x, weight }, out, Some(bucket), flops)
    }

    pub fn normalize(&mut self, x: NodeId, eps: f64, bucket: usize) -> NodeId {
        let input = &self.nodes[x];
        let d = input.cols;
        let dn = d as f64;
        let mut out = Matrix::zeros(input.rows, d);
        let mut inv_std = Vec::with_capacity(input.rows);
        for r in 0..input.rows {
            let row = input.row(r);
            // d adds + 1 div
            let mean = row.iter().sum::<f64>() / dn;
            let o = out.row_mut(r);
            // d subs
            for (ov, &v) in o.iter_mut().zip(row) {
                *ov = v - mean;
            }
            // 2d + 1
            let var = o.iter().map(|c| c * c).sum::<f64>() / dn;
            // add, sqrt, div
            let inv = 1.0 / (var + eps).sqrt();
            // d muls
            for ov in o.iter_mut() {
                *ov *= inv;
            }
            inv_std.push(inv);
        }
        let flops = (input.rows * (5 * d + 5)) as u64;
        self.push(Op::Normalize { x, inv_std }, out, Some(bucket), flops)
    }

    pub fn affine(&mut self, x: NodeId, gain: usize, bias: usize, bucket: usize) -> NodeId {
        let input = &self.nodes[x];
        let g = &self.params[gain];
        let b = &self.params[bias];
        let mut out = Matrix::zeros(input.rows, input.cols);
        for r in 0..input.rows {
            for (c, o) in out.row_mut(r).iter_mut().enumerate() {
                *o = input.at(r, c) * g.data[c] + b.data[c];
            }
        }
        let flops = 2 * input.len() as u64;
        self.push(Op::Affine { x, gain, bias }, out, Some(bucket), flops)
    }

    pub fn gelu(&mut self, x: NodeId, bucket: usize) -> NodeId {
        let input = &self.nodes[x];
        let mut out = input.clone();
        for v in &mut out.data {
            let x = *v;
            let inner = GELU_C * (x + GELU_A * (x * x * x));
            *v = 0.5 * x * (1.0 + inner.tanh());
        }
        let flops = 9 * input.len() as u64;
        self.push(Op::Gelu { x }, out, Some(bucket), flops)
    }

    pub fn attention(&mut self, q: NodeId, k: NodeId, v: NodeId, heads: usize, seq: usize, bucket: usize) -> NodeId {
        let (qm, km, vm) = (&self.nodes[q], &self.nodes[k], &self.nodes[v]);
        let rows = qm.rows;
        let d = qm.cols;
        assert_eq!(rows % seq, 0, "rows must be whole sequences");
        assert_eq!(d % heads, 0, "width must split into heads");
        let dh = d / heads;
        let seqs = rows / seq;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut out = Matrix::zeros(rows, d);
        let mut probs = vec![0.0; seqs * heads * seq * seq];
        let mut flops = 0u64;
        for s in 0..seqs {
            for head in 0..heads {
                let cols = head * dh..(head + 1) * dh;
                let pbase = (s * heads + head) * seq * seq;
                for p in 0..seq {
                    let qp = &qm.row(s * seq + p)[cols.clone()];
                    let len = p + 1;
                    let prow = &mut probs[pbase + p * seq..pbase + p * seq + len];
                    let mut max = f64::NEG_INFINITY;
                    for (j, pj) in prow.iter_mut().enumerate() {
                        let kj = &km.row(s * seq + j)[cols.clone()];
                        *pj = dot(qp, kj) * scale;
                        max = max.max(*pj);
                    }
                    let mut sum = 0.0;
                    for pj in prow.iter_mut() {
                        *pj = (*pj - max).exp();
                        sum += *pj;
                    }
                    for pj in prow.iter_mut() {
                        *pj /= sum;
                    }
                    let orow = &mut out.row_mut(s * seq + p)[cols.clone()];
                    for (j, &pj) in prow.iter().enumerate() {
                        let vj = &vm.row(s * seq + j)[cols.clone()];
                        for (o, &vv) in orow.iter_mut().zip(vj) {
                            *o += pj * vv;
                        }
                    }
                    // scores 2dh+1, softmax 4, mixing 2dh per attended position
                    flops += (len * (4 * dh + 5)) as u64;
                }
            }
        }
        let op = Op::Attention {
            q,
            k,
            v,
            heads,
            seq,
            probs,
        };
        self.push(op, out, Some(bucket), flops)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId, bucket: usize) -> NodeId {
        let mut out = self.nodes[a].clone();
        out.add_assign(&self.nodes[b]);
        let flops = out.len() as u64;
        self.push(Op::Add { a, b }, out, Some(bucket), flops)
    }

    /// Mean token-level cross-entropy over rows whose target is `Some`.
    /// Every row's softmax is evaluated so the FLOPs depend only on shape.
    pub fn cross_entropy(&mut self, logits: NodeId, targets: &[Option<usize>]) -> Result<f64> {
        let z = &self.nodes[logits];
        if targets.len() != z.rows {
            return Err(Error::Input(format!(
                "{} targets for {} logit rows",
                targets.len(),
                z.rows
            )));
        }
        let v = z.cols;
        let counted = targets.iter().filter(|t| t.is_some()).count();
        let weight = if counted == 0 { 0.0 } else { 1.0 / counted as f64 };
        let mut grad = Matrix::zeros(z.rows, v);
        let mut total = 0.0;
        for (r, target) in targets.iter().enumerate() {
            if let Some(t) = *target {
                if t >= v {
                    return Err(Error::Input(format!("target id {t} out of range for vocabulary of {v}")));
                }
            }
            let row = z.row(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let g = grad.row_mut(r);
            let mut sum = 0.0;
            for (gv, &zv) in g.iter_mut().zip(row) {
                *gv = (zv - max).exp();
                sum += *gv;
            }
            let lse = sum.ln();
            let w = if target.is_some() { weight } else { 0.0 };
            for gv in g.iter_mut() {
                *gv = *gv / sum * w;
            }
            let t = target.unwrap_or(0);
            g[t] -= w;
            total += (lse + max - row[t]) * w;
        }
        // forward 3V+1 (+4 loss terms); fused gradient 2V+1
        let flops = (z.rows * (5 * v + 6)) as u64;
        let loss = total;
        let out = self.push(
            Op::CrossEntropy { logits, grad },
            Matrix::from_vec(1, 1, vec![loss]),
            None,
            flops,
        );
        self.loss = Some((out, loss));
        Ok(loss)
    }

    pub fn mean_squared(&mut self, pred: NodeId, target: &Matrix) -> Result<f64> {
        let y = &self.nodes[pred];
        if (y.rows, y.cols) != (target.rows, target.cols) {
            return Err(Error::Input("target shape does not match prediction".into()));
        }
        let scale = 2.0 / y.rows as f64;
        let mut grad = Matrix::zeros(y.rows, y.cols);
        let mut total = 0.0;
        for ((g, &yv), &tv) in grad.data.iter_mut().zip(&y.data).zip(&target.data) {
            let diff = yv - tv;
            total += diff * diff;
            *g = diff * scale;
        }
        let loss = total / y.rows as f64;
        let flops = 4 * y.len() as u64 + 1;
        let out = self.push(
            Op::MeanSquared { pred, grad },
            Matrix::from_vec(1, 1, vec![loss]),
            None,
            flops,
        );
        self.loss = Some((out, loss));
        Ok(loss)
    }
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    let x2 = x * x;
    let t = (GELU_C * (x + GELU_A * x2 * x)).tanh();
    let sech2 = 1.0 - t * t;
    let dinner = GELU_C * (1.0 + 3.0 * GELU_A * x2);
    0.5 * (1.0 + t) + 0.5 * x * sech2 * dinner
}

/// FLOPs of [`gelu_grad`] plus the multiply by the incoming gradient.
pub(crate) const GELU_BWD_FLOPS: u64 = 18;
