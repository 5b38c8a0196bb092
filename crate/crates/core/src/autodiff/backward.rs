use crate::graph::{DyConvention, ModelGraph, SelectionMask};
use crate::tensor::{dot, Matrix};

use super::tape::{gelu_grad, NodeId, Op, Tape, GELU_BWD_FLOPS};
use super::{FlopsMeter, Gradients};

/// Full backpropagation: every bucket runs and every parameter gets a gradient.
pub fn backward_full(tape: &Tape) -> (Gradients, FlopsMeter) {
    let slots = tape.params.len();
    run(tape, &vec![true; slots], &vec![true; slots])
}

/// Backpropagation restricted to the tensors in `mask`.
///
/// Weight-gradient work runs only for selected tensors. Activation-gradient
/// buckets run for the slots flagged by `graph.sigma(mask, convention)`; a
/// bucket outside that set still runs if a selected tensor cannot get its
/// gradient without it, which only happens under [`DyConvention::Exclusive`]
/// when the deepest selected tensor carries arrival work in its own bucket.
pub fn backward_selective(
    tape: &Tape,
    graph: &ModelGraph,
    mask: &SelectionMask,
    convention: DyConvention,
) -> (Gradients, FlopsMeter) {
    assert_eq!(mask.len(), tape.params.len(), "mask length must match parameter count");
    let mut execute = graph.sigma(mask, convention).bits().to_vec();
    for slot in required_buckets(tape, mask.bits()) {
        execute[slot] = true;
    }
    run(tape, mask.bits(), &execute)
}

/// Buckets whose activation-gradient work is on the path from the loss to some
/// selected tensor.
fn required_buckets(tape: &Tape, selected: &[bool]) -> Vec<usize> {
    let mut needs = vec![false; tape.nodes.len()];
    let mut buckets = Vec::new();
    for rec in &tape.ops {
        let inputs = rec.op.inputs();
        if let Some(b) = rec.bucket {
            if inputs.iter().any(|&x| needs[x]) && !buckets.contains(&b) {
                buckets.push(b);
            }
        }
        needs[rec.out] = rec.op.params().iter().any(|&p| selected[p]) || inputs.iter().any(|&x| needs[x]);
    }
    buckets
}

struct Ctx {
    grads: Vec<Option<Matrix>>,
    meter: FlopsMeter,
}

impl Ctx {
    /// Adds a gradient contribution to `node`. The first contribution is an
    /// assignment; later ones cost one add per element, charged to `bucket`.
    fn accumulate(&mut self, node: NodeId, g: Matrix, bucket: usize) {
        match &mut self.grads[node] {
            Some(existing) => {
                existing.add_assign(&g);
                self.meter.dy[bucket] += g.len() as u64;
            }
            slot @ None => *slot = Some(g),
        }
    }
}

fn run(tape: &Tape, selected: &[bool], execute: &[bool]) -> (Gradients, FlopsMeter) {
    let slots = tape.params.len();
    let mut ctx = Ctx {
        grads: vec![None; tape.nodes.len()],
        meter: FlopsMeter::new(slots),
    };
    ctx.meter.fp_flops = tape.fp_flops;
    let mut param_grads: Vec<Option<Matrix>> = vec![None; slots];
    if !selected.iter().any(|&s| s) {
        return (Gradients::new(param_grads), ctx.meter);
    }

    for rec in tape.ops.iter().rev() {
        if rec.op.is_loss() {
            match &rec.op {
                Op::CrossEntropy { logits, grad } => ctx.grads[*logits] = Some(grad.clone()),
                Op::MeanSquared { pred, grad } => ctx.grads[*pred] = Some(grad.clone()),
                _ => unreachable!(),
            }
            continue;
        }
        let Some(gout) = ctx.grads[rec.out].take() else {
            continue;
        };
        let run_dy = rec.bucket.is_some_and(|b| execute[b]);
        if let Some(b) = rec.bucket.filter(|_| run_dy) {
            ctx.meter.dy_ran[b] = true;
        }
        let params = &tape.params;
        match &rec.op {
            Op::Embed { table, tokens } => {
                if selected[*table] {
                    // Scatter into the table gradient; counted as assignment.
                    let e = &params[*table];
                    let grad = param_grads[*table].get_or_insert_with(|| Matrix::zeros(e.rows, e.cols));
                    for (r, &tok) in tokens.iter().enumerate() {
                        let dst = grad.row_mut(tok);
                        for (d, &g) in dst.iter_mut().zip(gout.row(r)) {
                            *d += g;
                        }
                    }
                }
            }
            Op::AddConst { x } => {
                if run_dy {
                    ctx.accumulate(*x, gout, rec.bucket.unwrap());
                }
            }
            Op::Linear { x, weight, bias } => {
                let input = &tape.nodes[*x];
                if selected[*weight] {
                    let dw = input.t_matmul(&gout);
                    ctx.meter.dw[*weight] += 2 * (input.rows * input.cols * gout.cols) as u64;
                    add_param_grad(&mut param_grads, &mut ctx.meter, *weight, dw);
                }
                if let Some(b) = bias.filter(|b| selected[*b]) {
                    ctx.meter.dw[b] += gout.len() as u64;
                    add_param_grad(&mut param_grads, &mut ctx.meter, b, gout.col_sum());
                }
                if run_dy {
                    let w = &params[*weight];
                    let dx = gout.matmul_t(w);
                    let bucket = rec.bucket.unwrap();
                    ctx.meter.dy[bucket] += 2 * (gout.rows * w.rows * w.cols) as u64;
                    ctx.accumulate(*x, dx, bucket);
                }
            }
            Op::LinearTied { x, weight } => {
                let input = &tape.nodes[*x];
                if selected[*weight] {
                    let dw = gout.t_matmul(input);
                    ctx.meter.dw[*weight] += 2 * (gout.rows * gout.cols * input.cols) as u64;
                    add_param_grad(&mut param_grads, &mut ctx.meter, *weight, dw);
                }
                if run_dy {
                    let w = &params[*weight];
                    let dx = gout.matmul(w);
                    let bucket = rec.bucket.unwrap();
                    ctx.meter.dy[bucket] += 2 * (gout.rows * w.rows * w.cols) as u64;
                    ctx.accumulate(*x, dx, bucket);
                }
            }
            Op::Normalize { x, inv_std } => {
                if run_dy {
                    let xhat = &tape.nodes[rec.out];
                    let d = xhat.cols;
                    let dn = d as f64;
                    let mut dx = Matrix::zeros(xhat.rows, d);
                    for r in 0..xhat.rows {
                        let g = gout.row(r);
                        let xh = xhat.row(r);
                        let m1 = g.iter().sum::<f64>() / dn;
                        let m2 = dot(g, xh) / dn;
                        let inv = inv_std[r];
                        for ((o, &gv), &xv) in dx.row_mut(r).iter_mut().zip(g).zip(xh) {
                            *o = (gv - m1 - xv * m2) * inv;
                        }
                    }
                    let bucket = rec.bucket.unwrap();
                    ctx.meter.dy[bucket] += (xhat.rows * (7 * d + 2)) as u64;
                    ctx.accumulate(*x, dx, bucket);
                }
            }
            Op::Affine { x, gain, bias } => {
                let input = &tape.nodes[*x];
                if selected[*gain] {
                    let mut dg = Matrix::zeros(1, input.cols);
                    for r in 0..input.rows {
                        for ((o, &g), &xv) in dg.data.iter_mut().zip(gout.row(r)).zip(input.row(r)) {
                            *o += g * xv;
                        }
                    }
                    ctx.meter.dw[*gain] += 2 * input.len() as u64;
                    add_param_grad(&mut param_grads, &mut ctx.meter, *gain, dg);
                }
                if selected[*bias] {
                    ctx.meter.dw[*bias] += gout.len() as u64;
                    add_param_grad(&mut param_grads, &mut ctx.meter, *bias, gout.col_sum());
                }
                if run_dy {
                    let gamma = &params[*gain];
                    let mut dx = gout;
                    for r in 0..dx.rows {
                        for (o, &gv) in dx.row_mut(r).iter_mut().zip(&gamma.data) {
                            *o *= gv;
                        }
                    }
                    let bucket = rec.bucket.unwrap();
                    ctx.meter.dy[bucket] += dx.len() as u64;
                    ctx.accumulate(*x, dx, bucket);
                }
            }
            Op::Gelu { x } => {
                if run_dy {
                    let input = &tape.nodes[*x];
                    let mut dx = gout;
                    for (o, &xv) in dx.data.iter_mut().zip(&input.data) {
                        *o *= gelu_grad(xv);
                    }
                    let bucket = rec.bucket.unwrap();
                    ctx.meter.dy[bucket] += GELU_BWD_FLOPS * dx.len() as u64;
                    ctx.accumulate(*x, dx, bucket);
                }
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                seq,
                probs,
            } => {
                if run_dy {
                    let bucket = rec.bucket.unwrap();
                    let (dq, dk, dv, flops) = attention_backward(
                        &tape.nodes[*q],
                        &tape.nodes[*k],
                        &tape.nodes[*v],
                        &gout,
                        *heads,
                        *seq,
                        probs,
                    );
                    ctx.meter.dy[bucket] += flops;
                    ctx.accumulate(*q, dq, bucket);
                    ctx.accumulate(*k, dk, bucket);
                    ctx.accumulate(*v, dv, bucket);
                }
            }
            Op::Add { a, b } => {
                if run_dy {
                    let bucket = rec.bucket.unwrap();
                    ctx.accumulate(*a, gout.clone(), bucket);
                    ctx.accumulate(*b, gout, bucket);
                }
            }
            Op::CrossEntropy { .. } | Op::MeanSquared { .. } => unreachable!(),
        }
    }
    (Gradients::new(param_grads), ctx.meter)
}

fn add_param_grad(grads: &mut [Option<Matrix>], meter: &mut FlopsMeter, slot: usize, g: Matrix) {
    match &mut grads[slot] {
        Some(existing) => {
            existing.add_assign(&g);
            meter.dw[slot] += g.len() as u64;
        }
        s @ None => *s = Some(g),
    }
}

fn attention_backward(
    qm: &Matrix,
    km: &Matrix,
    vm: &Matrix,
    dout: &Matrix,
    heads: usize,
    seq: usize,
    probs: &[f64],
) -> (Matrix, Matrix, Matrix, u64) {
    let rows = qm.rows;
    let d = qm.cols;
    let dh = d / heads;
    let seqs = rows / seq;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut dq = Matrix::zeros(rows, d);
    let mut dk = Matrix::zeros(rows, d);
    let mut dv = Matrix::zeros(rows, d);
    let mut dp = vec![0.0; seq];
    let mut flops = 0u64;
    for s in 0..seqs {
        for head in 0..heads {
            let c0 = head * dh;
            let pbase = (s * heads + head) * seq * seq;
            for p in 0..seq {
                let len = p + 1;
                let prow = &probs[pbase + p * seq..pbase + p * seq + len];
                let rp = s * seq + p;
                let dop = &dout.row(rp)[c0..c0 + dh];
                for j in 0..len {
                    let rj = s * seq + j;
                    dp[j] = dot(dop, &vm.row(rj)[c0..c0 + dh]);
                    let pj = prow[j];
                    for (o, &g) in dv.row_mut(rj)[c0..c0 + dh].iter_mut().zip(dop) {
                        *o += pj * g;
                    }
                }
                let inner = dot(prow, &dp[..len]);
                for j in 0..len {
                    let ds = prow[j] * (dp[j] - inner) * scale;
                    let rj = s * seq + j;
                    {
                        let kj = &km.row(rj)[c0..c0 + dh];
                        for (o, &kv) in dq.row_mut(rp)[c0..c0 + dh].iter_mut().zip(kj) {
                            *o += ds * kv;
                        }
                    }
                    let qp = &qm.row(rp)[c0..c0 + dh];
                    for (o, &qv) in dk.row_mut(rj)[c0..c0 + dh].iter_mut().zip(qp) {
                        *o += ds * qv;
                    }
                }
                // dP 2dh, dV 2dh, softmax 5, dQ 2dh, dK 2dh per attended position
                flops += (len * (8 * dh + 5)) as u64;
            }
        }
    }
    (dq, dk, dv, flops)
}
