//! Straight-line reference implementations used as test oracles. They work
//! on plain row-major slices and share no code with the tape.

use diffcore::{ParamStore, Tensor};

pub fn param<'a>(store: &'a ParamStore, name: &str) -> &'a Tensor {
    store.get(name).unwrap_or_else(|_| panic!("missing {name}"))
}

/// `x·W (+ b)` with `W` stored `d_in × d_out`.
pub fn linear(x: &[f64], rows: usize, w: &Tensor, b: Option<&Tensor>) -> Vec<f64> {
    let (din, dout) = (w.dims()[0], w.dims()[1]);
    assert_eq!(x.len(), rows * din);
    let mut out = vec![0.0; rows * dout];
    for r in 0..rows {
        for j in 0..dout {
            let mut acc = b.map_or(0.0, |b| b.data()[j]);
            for i in 0..din {
                acc += x[r * din + i] * w.data()[i * dout + j];
            }
            out[r * dout + j] = acc;
        }
    }
    out
}

pub fn linear_named(x: &[f64], rows: usize, store: &ParamStore, prefix: &str) -> Vec<f64> {
    let bias = store.get(&format!("{prefix}.bias")).ok();
    linear(x, rows, param(store, &format!("{prefix}.weight")), bias)
}

pub fn layer_norm(x: &[f64], width: usize, gamma: &Tensor, beta: &Tensor) -> Vec<f64> {
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks(width) {
        let mean = row.iter().sum::<f64>() / width as f64;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / width as f64;
        let inv = 1.0 / (var + 1e-5).sqrt();
        for (i, v) in row.iter().enumerate() {
            out.push((v - mean) * inv * gamma.data()[i] + beta.data()[i]);
        }
    }
    out
}

pub fn gelu(v: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * v * (1.0 + (c * (v + 0.044715 * v * v * v)).tanh())
}

pub fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

/// Multi-head attention; `visible(i, j)` says whether query `i` sees key `j`.
#[allow(clippy::too_many_arguments)]
pub fn mha(
    xq: &[f64],
    lq: usize,
    xkv: &[f64],
    lk: usize,
    store: &ParamStore,
    prefix: &str,
    heads: usize,
    visible: &dyn Fn(usize, usize) -> bool,
) -> Vec<f64> {
    let q = linear_named(xq, lq, store, &format!("{prefix}.q"));
    let k = linear_named(xkv, lk, store, &format!("{prefix}.k"));
    let v = linear_named(xkv, lk, store, &format!("{prefix}.v"));
    let width = q.len() / lq;
    let hd = width / heads;
    let mut ctx = vec![0.0; lq * width];
    for h in 0..heads {
        for i in 0..lq {
            let scores: Vec<Option<f64>> = (0..lk)
                .map(|j| {
                    visible(i, j).then(|| {
                        (0..hd)
                            .map(|c| q[i * width + h * hd + c] * k[j * width + h * hd + c])
                            .sum::<f64>()
                            / (hd as f64).sqrt()
                    })
                })
                .collect();
            let max = scores.iter().flatten().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = scores.iter().flatten().map(|s| (s - max).exp()).sum();
            for (j, s) in scores.iter().enumerate() {
                if let Some(s) = s {
                    let w = (s - max).exp() / z;
                    for c in 0..hd {
                        ctx[i * width + h * hd + c] += w * v[j * width + h * hd + c];
                    }
                }
            }
        }
    }
    linear_named(&ctx, lq, store, &format!("{prefix}.o"))
}

pub fn ln_named(x: &[f64], width: usize, store: &ParamStore, prefix: &str) -> Vec<f64> {
    layer_norm(
        x,
        width,
        param(store, &format!("{prefix}.gamma")),
        param(store, &format!("{prefix}.beta")),
    )
}

pub fn ffn(x: &[f64], rows: usize, store: &ParamStore, prefix: &str) -> Vec<f64> {
    let h: Vec<f64> = linear_named(x, rows, store, &format!("{prefix}.fc1"))
        .into_iter()
        .map(gelu)
        .collect();
    linear_named(&h, rows, store, &format!("{prefix}.fc2"))
}

/// Pre-norm transformer block over one sequence.
pub fn block(
    x: &[f64],
    rows: usize,
    store: &ParamStore,
    prefix: &str,
    heads: usize,
    visible: &dyn Fn(usize, usize) -> bool,
) -> Vec<f64> {
    let width = x.len() / rows;
    let h = ln_named(x, width, store, &format!("{prefix}.ln1"));
    let a = mha(&h, rows, &h, rows, store, &format!("{prefix}.attn"), heads, visible);
    let x = add(x, &a);
    let h = ln_named(&x, width, store, &format!("{prefix}.ln2"));
    let f = ffn(&h, rows, store, &format!("{prefix}.ffn"));
    add(&x, &f)
}

pub fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Small model for fast tests.
pub fn tiny_cfg() -> crate::model::ModelConfig {
    let mut cfg = crate::model::ModelConfig::default();
    cfg.vision.width = 16;
    cfg.vision.depth = 2;
    cfg.vision.ffn_ratio = 2;
    cfg.adapter_layers = vec![1];
    cfg.adapter_width = 4;
    cfg.text.width = 16;
    cfg.text.depth = 1;
    cfg.text.ffn_ratio = 2;
    cfg.fusion.width = 16;
    cfg.fusion.depth = 2;
    cfg.fusion.ffn_ratio = 2;
    cfg.fusion.visual_width = 16;
    cfg.embed_dim = 8;
    cfg.frames = 2;
    cfg
}
