//! One small scalar exercise per differentiable op, used by the gradient
//! verification suite and its fault-injection negative control.

use crate::gradcheck::{grad_check_many, GradCheckReport};
use crate::{Graph, OpKind, Result, Tensor, Var};

/// Deterministic values in (-1, 1), distinct per seed.
fn inputs(dims: &[usize], seed: u64) -> Tensor {
    let n: usize = dims.iter().product();
    let data = (0..n)
        .map(|i| (0.913 * i as f64 + 1.77 * seed as f64 + 0.31).sin() * 0.95)
        .collect();
    Tensor::new(dims.to_vec(), data).expect("exercise dims")
}

/// Central-difference check of [`exercise`] for `kind` on fixed 4×4 inputs.
pub fn check_op(kind: OpKind, h: f64, tol: f64) -> Result<GradCheckReport> {
    let i = OpKind::ALL.iter().position(|&k| k == kind).unwrap_or(0) as u64;
    let a = inputs(&[4, 4], 100 + i);
    let b = inputs(&[4, 4], 200 + i);
    grad_check_many(|g, v| exercise(kind, g, v), &[a, b], h, tol, usize::MAX)
}

/// One scalar-valued exercise per op, each with a random weighting so that
/// every output entry carries a distinct upstream gradient.
pub fn exercise(kind: OpKind, g: &mut Graph, v: &[Var]) -> Result<Var> {
    let (a, b) = (v[0], v[1]);
    let out = match kind {
        OpKind::MatMul => g.matmul(a, b)?,
        OpKind::Add => {
            let row = g.slice(b, 0, 0, 1)?;
            let s = g.add(a, b)?;
            g.add(s, row)?
        }
        OpKind::Mul => {
            let col = g.slice(a, 1, 0, 1)?;
            let m = g.mul(a, b)?;
            g.mul(m, col)?
        }
        OpKind::Scale => g.scale(a, -1.7),
        OpKind::Pow => {
            let sq = g.mul(a, a)?;
            let one = g.constant(&Tensor::scalar(0.3));
            let pos = g.add(sq, one)?;
            g.pow(pos, -0.5)?
        }
        OpKind::Transpose => g.transpose(a)?,
        OpKind::Reshape => g.reshape(a, &[a_numel(g, a), 1])?,
        OpKind::Concat => {
            let c0 = g.concat(&[a, b], 0)?;
            let c1 = g.concat(&[a, a], 1)?;
            let s0 = g.sum(c0);
            let s1 = g.mul(c1, c1)?;
            let s1 = g.sum(s1);
            let t = g.add(s0, s1)?;
            g.mul(t, t)?
        }
        OpKind::Slice => {
            let r = g.slice(a, 0, 1, 2)?;
            g.slice(r, 1, 1, 2)?
        }
        OpKind::Softmax => {
            let s = g.softmax(a);
            g.softmax_axis(s, 0)?
        }
        OpKind::LayerNorm => {
            let gamma = g.slice(b, 0, 0, 1)?;
            let beta = g.slice(b, 0, 1, 1)?;
            g.layer_norm(a, gamma, beta, 1e-5)?
        }
        OpKind::Gelu => g.gelu(a),
        OpKind::Embedding => g.embedding(a, &[2, 0, 2, 1])?,
        OpKind::CrossEntropy => g.cross_entropy(a, &[0, 2, 1, 3])?,
        OpKind::Sum => g.sum(a),
        OpKind::Mean => g.mean(a),
        OpKind::SumAxis => {
            let r = g.sum_axis(a, 0)?;
            let c = g.sum_axis(a, 1)?;
            let rr = g.mul(r, r)?;
            let cc = g.mul(c, c)?;
            let sr = g.sum(rr);
            let sc = g.sum(cc);
            g.add(sr, sc)?
        }
    };
    // Weighted sum with fixed non-uniform weights.
    let n = a_numel(g, out);
    let w: Vec<f64> = (0..n).map(|i| ((i as f64) * 0.37).sin() + 1.1).collect();
    let wv = g.constant_from(g.dims(out).to_vec(), w)?;
    let prod = g.mul(out, wv)?;
    Ok(g.sum(prod))
}

fn a_numel(g: &Graph, v: Var) -> usize {
    g.value(v).len()
}
