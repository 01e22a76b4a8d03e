//! Reusable layers: linear, layer norm, masked multi-head attention,
//! pre-norm transformer block and stochastic depth.
//!
//! Layers own parameter *names*, not tensors. Weights live in a
//! [`ParamStore`] and are bound onto the tape once per forward pass.

use diffcore::{Graph, ParamStore, ParamVars, Tensor, Var};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

/// Additive constant standing in for minus infinity in masked attention.
pub const MASK_NEG: f64 = -1e9;
pub const LN_EPS: f64 = 1e-5;

pub(crate) fn normal_tensor(dims: Vec<usize>, std: f64, rng: &mut impl Rng) -> Tensor {
    let n = dims.iter().product();
    let dist = Normal::new(0.0, std).expect("positive std");
    Tensor::new(dims, (0..n).map(|_| dist.sample(rng)).collect()).expect("dims")
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: String,
    pub bias: Option<String>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new(prefix: &str, d_in: usize, d_out: usize) -> Self {
        Linear {
            weight: format!("{prefix}.weight"),
            bias: Some(format!("{prefix}.bias")),
            d_in,
            d_out,
        }
    }

    pub fn without_bias(prefix: &str, d_in: usize, d_out: usize) -> Self {
        Linear {
            bias: None,
            ..Linear::new(prefix, d_in, d_out)
        }
    }

    pub fn param_names(&self) -> impl Iterator<Item = &str> {
        std::iter::once(self.weight.as_str()).chain(self.bias.as_deref())
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        let std = 1.0 / (self.d_in as f64).sqrt();
        store.insert(&self.weight, normal_tensor(vec![self.d_in, self.d_out], std, rng));
        if let Some(b) = &self.bias {
            store.insert(b, Tensor::zeros(vec![self.d_out]));
        }
    }

    pub fn init_zero(&self, store: &mut ParamStore) {
        store.insert(&self.weight, Tensor::zeros(vec![self.d_in, self.d_out]));
        if let Some(b) = &self.bias {
            store.insert(b, Tensor::zeros(vec![self.d_out]));
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &ParamVars, x: Var) -> Result<Var> {
        let xw = g.matmul(x, p.get(&self.weight)?)?;
        match &self.bias {
            Some(b) => Ok(g.add(xw, p.get(b)?)?),
            None => Ok(xw),
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: String,
    pub beta: String,
    pub width: usize,
}

impl LayerNorm {
    pub fn new(prefix: &str, width: usize) -> Self {
        LayerNorm {
            gamma: format!("{prefix}.gamma"),
            beta: format!("{prefix}.beta"),
            width,
        }
    }

    pub fn init(&self, store: &mut ParamStore) {
        store.insert(&self.gamma, Tensor::full(vec![self.width], 1.0));
        store.insert(&self.beta, Tensor::zeros(vec![self.width]));
    }

    pub fn forward(&self, g: &mut Graph, p: &ParamVars, x: Var) -> Result<Var> {
        Ok(g.layer_norm(x, p.get(&self.gamma)?, p.get(&self.beta)?, LN_EPS)?)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskKind {
    Bidirectional,
    Causal,
    Custom,
}

/// Which key positions each query may attend to.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMask {
    pub kind: MaskKind,
    /// `Lq×Lk` matrix of 0/1 for [`MaskKind::Custom`]; 1 = visible.
    pub matrix: Option<Tensor>,
}

impl AttentionMask {
    pub fn bidirectional() -> Self {
        AttentionMask {
            kind: MaskKind::Bidirectional,
            matrix: None,
        }
    }

    pub fn causal() -> Self {
        AttentionMask {
            kind: MaskKind::Causal,
            matrix: None,
        }
    }

    pub fn custom(matrix: Tensor) -> Result<Self> {
        if matrix.dims().len() != 2 || matrix.data().iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::Config("custom mask must be a 2-D 0/1 matrix".into()));
        }
        Ok(AttentionMask {
            kind: MaskKind::Custom,
            matrix: Some(matrix),
        })
    }

    /// Visibility matrix (1 = visible) for `lq` queries over `lk` keys.
    pub fn visibility(&self, lq: usize, lk: usize) -> Result<Tensor> {
        match self.kind {
            MaskKind::Bidirectional => Ok(Tensor::full(vec![lq, lk], 1.0)),
            MaskKind::Causal => {
                if lq != lk {
                    return Err(Error::Contract(format!(
                        "causal mask needs square attention, got {lq}x{lk}"
                    )));
                }
                let mut t = Tensor::zeros(vec![lq, lk]);
                for i in 0..lq {
                    for j in 0..=i {
                        t.set(&[i, j], 1.0);
                    }
                }
                Ok(t)
            }
            MaskKind::Custom => {
                let m = self.matrix.as_ref().expect("custom mask has a matrix");
                if m.dims() != [lq, lk] {
                    return Err(Error::Contract(format!(
                        "custom mask {:?} does not fit {lq}x{lk}",
                        m.dims()
                    )));
                }
                Ok(m.clone())
            }
        }
    }

    /// Additive pre-softmax bias, or `None` when nothing is masked.
    fn additive(&self, lq: usize, lk: usize) -> Result<Option<Tensor>> {
        if self.kind == MaskKind::Bidirectional {
            return Ok(None);
        }
        let vis = self.visibility(lq, lk)?;
        for r in 0..lq {
            if vis.row(r).iter().all(|&v| v == 0.0) {
                return Err(Error::Contract(format!(
                    "attention row {r} has every key masked"
                )));
            }
        }
        let data = vis
            .data()
            .iter()
            .map(|&v| if v == 0.0 { MASK_NEG } else { 0.0 })
            .collect();
        Ok(Some(Tensor::new(vec![lq, lk], data)?))
    }
}

/// Post-softmax attention weights `softmax(q·kᵀ/√d + mask)`.
pub fn attention_weights(g: &mut Graph, q: Var, k: Var, mask: &AttentionMask) -> Result<Var> {
    let (dq, dk) = (g.dims(q).to_vec(), g.dims(k).to_vec());
    if dq.len() != 2 || dk.len() != 2 || dq[1] != dk[1] {
        return Err(diffcore::TensorError::Shape {
            op: "attention",
            lhs: dq,
            rhs: dk,
        }
        .into());
    }
    let kt = g.transpose(k)?;
    let scores = g.matmul(q, kt)?;
    let scores = g.scale(scores, 1.0 / (dq[1] as f64).sqrt());
    let scores = match mask.additive(dq[0], dk[0])? {
        Some(bias) => {
            let b = g.constant(&bias);
            g.add(scores, b)?
        }
        None => scores,
    };
    Ok(g.softmax(scores))
}

/// Single-head scaled dot-product attention.
pub fn attention(g: &mut Graph, q: Var, k: Var, v: Var, mask: &AttentionMask) -> Result<Var> {
    if g.dims(k)[0] != g.dims(v)[0] {
        return Err(diffcore::TensorError::Shape {
            op: "attention",
            lhs: g.dims(k).to_vec(),
            rhs: g.dims(v).to_vec(),
        }
        .into());
    }
    let w = attention_weights(g, q, k, mask)?;
    Ok(g.matmul(w, v)?)
}

#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
    pub width: usize,
}

impl MultiHeadAttention {
    pub fn new(prefix: &str, width: usize, kv_width: usize, heads: usize) -> Result<Self> {
        if heads == 0 || width % heads != 0 {
            return Err(Error::Config(format!(
                "width {width} is not divisible by {heads} heads"
            )));
        }
        Ok(MultiHeadAttention {
            q: Linear::new(&format!("{prefix}.q"), width, width),
            // A key bias shifts every score of a row equally, which softmax cancels.
            k: Linear::without_bias(&format!("{prefix}.k"), kv_width, width),
            v: Linear::new(&format!("{prefix}.v"), kv_width, width),
            o: Linear::new(&format!("{prefix}.o"), width, width),
            heads,
            width,
        })
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        for l in [&self.q, &self.k, &self.v, &self.o] {
            l.init(store, rng);
        }
    }

    pub fn param_names(&self) -> Vec<&str> {
        [&self.q, &self.k, &self.v, &self.o]
            .into_iter()
            .flat_map(Linear::param_names)
            .collect()
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        p: &ParamVars,
        xq: Var,
        xkv: Var,
        mask: &AttentionMask,
    ) -> Result<Var> {
        let qs = Segments::single(g.dims(xq)[0]);
        let ks = Segments::single(g.dims(xkv)[0]);
        self.forward_segmented(g, p, xq, xkv, qs, ks, std::slice::from_ref(mask))
    }

    /// Attention over a stacked batch: query segment `s` sees only key
    /// segment `s`. `masks` holds one shared mask or one per segment.
    #[allow(clippy::too_many_arguments)]
    pub fn forward_segmented(
        &self,
        g: &mut Graph,
        p: &ParamVars,
        xq: Var,
        xkv: Var,
        qs: Segments,
        ks: Segments,
        masks: &[AttentionMask],
    ) -> Result<Var> {
        if qs.count != ks.count || g.dims(xq)[0] != qs.rows() || g.dims(xkv)[0] != ks.rows() {
            return Err(Error::Contract(format!(
                "segments {qs:?}/{ks:?} do not fit {} query and {} key rows",
                g.dims(xq)[0],
                g.dims(xkv)[0]
            )));
        }
        if masks.len() != 1 && masks.len() != qs.count {
            return Err(Error::Contract(format!(
                "{} masks for {} segments",
                masks.len(),
                qs.count
            )));
        }
        let q = self.q.forward(g, p, xq)?;
        let k = self.k.forward(g, p, xkv)?;
        let v = self.v.forward(g, p, xkv)?;
        let hd = self.width / self.heads;
        let mut per_head = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            if self.heads == 1 {
                per_head.push((q, k, v));
            } else {
                per_head.push((
                    g.slice(q, 1, h * hd, hd)?,
                    g.slice(k, 1, h * hd, hd)?,
                    g.slice(v, 1, h * hd, hd)?,
                ));
            }
        }
        let mut segs = Vec::with_capacity(qs.count);
        for s in 0..qs.count {
            let mask = &masks[if masks.len() == 1 { 0 } else { s }];
            let mut parts = Vec::with_capacity(self.heads);
            for &(qh, kh, vh) in &per_head {
                let (qh, kh, vh) = if qs.count == 1 {
                    (qh, kh, vh)
                } else {
                    (
                        g.slice(qh, 0, s * qs.len, qs.len)?,
                        g.slice(kh, 0, s * ks.len, ks.len)?,
                        g.slice(vh, 0, s * ks.len, ks.len)?,
                    )
                };
                parts.push(attention(g, qh, kh, vh, mask)?);
            }
            segs.push(if parts.len() == 1 { parts[0] } else { g.concat(&parts, 1)? });
        }
        let out = if segs.len() == 1 { segs[0] } else { g.concat(&segs, 0)? };
        self.o.forward(g, p, out)
    }
}

/// Row layout of a stacked batch: `count` consecutive segments of `len` rows.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Segments {
    pub count: usize,
    pub len: usize,
}

impl Segments {
    pub fn new(count: usize, len: usize) -> Self {
        Segments { count, len }
    }

    pub fn single(len: usize) -> Self {
        Segments { count: 1, len }
    }

    pub fn rows(&self) -> usize {
        self.count * self.len
    }
}

#[derive(Clone, Debug)]
pub struct FeedForward {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl FeedForward {
    pub fn new(prefix: &str, width: usize, hidden: usize) -> Self {
        FeedForward {
            fc1: Linear::new(&format!("{prefix}.fc1"), width, hidden),
            fc2: Linear::new(&format!("{prefix}.fc2"), hidden, width),
        }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        self.fc1.init(store, rng);
        self.fc2.init(store, rng);
    }

    pub fn forward(&self, g: &mut Graph, p: &ParamVars, x: Var) -> Result<Var> {
        let h = self.fc1.forward(g, p, x)?;
        let h = g.gelu(h);
        self.fc2.forward(g, p, h)
    }
}

/// Multiplier applied to one residual branch. A zero multiplier drops the
/// branch without evaluating it.
#[derive(Clone, Debug, PartialEq)]
pub enum BranchScale {
    Uniform(f64),
    PerRow(Vec<f64>),
}

impl BranchScale {
    pub const KEEP: BranchScale = BranchScale::Uniform(1.0);

    fn is_zero(&self) -> bool {
        match self {
            BranchScale::Uniform(s) => *s == 0.0,
            BranchScale::PerRow(r) => r.iter().all(|&s| s == 0.0),
        }
    }

    fn apply(&self, g: &mut Graph, h: Var) -> Result<Var> {
        match self {
            BranchScale::Uniform(s) if *s == 1.0 => Ok(h),
            BranchScale::Uniform(s) => Ok(g.scale(h, *s)),
            BranchScale::PerRow(r) if r.iter().all(|&s| s == 1.0) => Ok(h),
            BranchScale::PerRow(r) => {
                let col = g.constant_from(vec![r.len(), 1], r.clone())?;
                Ok(g.mul(h, col)?)
            }
        }
    }
}

/// Pre-norm block: `x + Attn(LN(x))`, then `+ FFN(LN(·))`.
#[derive(Clone, Debug)]
pub struct TransformerBlock {
    pub ln1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ln2: LayerNorm,
    pub ffn: FeedForward,
    pub width: usize,
}

impl TransformerBlock {
    pub fn new(prefix: &str, width: usize, heads: usize, ffn_ratio: usize) -> Result<Self> {
        Ok(TransformerBlock {
            ln1: LayerNorm::new(&format!("{prefix}.ln1"), width),
            attn: MultiHeadAttention::new(&format!("{prefix}.attn"), width, width, heads)?,
            ln2: LayerNorm::new(&format!("{prefix}.ln2"), width),
            ffn: FeedForward::new(&format!("{prefix}.ffn"), width, width * ffn_ratio),
            width,
        })
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        self.ln1.init(store);
        self.attn.init(store, rng);
        self.ln2.init(store);
        self.ffn.init(store, rng);
    }

    pub fn forward(&self, g: &mut Graph, p: &ParamVars, x: Var, mask: &AttentionMask) -> Result<Var> {
        self.forward_scaled(g, p, x, mask, [1.0, 1.0])
    }

    /// Forward pass with uniform stochastic-depth multipliers per branch.
    pub fn forward_scaled(
        &self,
        g: &mut Graph,
        p: &ParamVars,
        x: Var,
        mask: &AttentionMask,
        scales: [f64; 2],
    ) -> Result<Var> {
        let seg = Segments::single(g.dims(x)[0]);
        let scales = scales.map(BranchScale::Uniform);
        self.forward_segmented(g, p, x, seg, std::slice::from_ref(mask), &scales)
    }

    /// Forward pass over a stacked batch; self-attention stays within each
    /// segment, everything else is row-wise.
    pub fn forward_segmented(
        &self,
        g: &mut Graph,
        p: &ParamVars,
        x: Var,
        seg: Segments,
        masks: &[AttentionMask],
        scales: &[BranchScale; 2],
    ) -> Result<Var> {
        let d = g.dims(x);
        if d.len() != 2 || d[1] != self.width {
            return Err(diffcore::TensorError::Shape {
                op: "transformer_block",
                lhs: d.to_vec(),
                rhs: vec![self.width],
            }
            .into());
        }
        let x = if scales[0].is_zero() {
            x
        } else {
            let h = self.ln1.forward(g, p, x)?;
            let h = self.attn.forward_segmented(g, p, h, h, seg, seg, masks)?;
            let h = scales[0].apply(g, h)?;
            g.add(x, h)?
        };
        if scales[1].is_zero() {
            return Ok(x);
        }
        let h = self.ln2.forward(g, p, x)?;
        let h = self.ffn.forward(g, p, h)?;
        let h = scales[1].apply(g, h)?;
        Ok(g.add(x, h)?)
    }
}

/// Draws per-branch keep/drop decisions for stochastic depth.
#[derive(Debug)]
pub struct DropPath<'r, R: Rng> {
    rate: f64,
    rng: &'r mut R,
}

impl<'r, R: Rng> DropPath<'r, R> {
    pub fn new(rate: f64, rng: &'r mut R) -> Result<Self> {
        check_rate(rate)?;
        Ok(DropPath { rate, rng })
    }

    pub fn rate(&self) -> f64 {
        self.rate
    }

    /// `0` with probability `rate`, else `1/(1-rate)`.
    pub fn draw(&mut self) -> f64 {
        if self.rate == 0.0 {
            1.0
        } else if self.rng.gen::<f64>() < self.rate {
            0.0
        } else {
            1.0 / (1.0 - self.rate)
        }
    }
}

impl<R: Rng> DropPath<'_, R> {
    /// One draw per item, repeated over that item's `rows_per_item` rows.
    pub fn draw_rows(&mut self, items: usize, rows_per_item: usize) -> BranchScale {
        if self.rate == 0.0 {
            return BranchScale::KEEP;
        }
        let mut rows = Vec::with_capacity(items * rows_per_item);
        for _ in 0..items {
            let s = self.draw();
            rows.extend(std::iter::repeat(s).take(rows_per_item));
        }
        BranchScale::PerRow(rows)
    }
}

fn check_rate(rate: f64) -> Result<()> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Config(format!(
            "stochastic depth rate must be in [0, 1), got {rate}"
        )));
    }
    Ok(())
}

/// Stochastic depth on a residual branch. In training the branch is zeroed
/// with probability `rate` and otherwise scaled by `1/(1-rate)`; in eval it
/// passes through unchanged.
pub fn stochastic_depth(
    g: &mut Graph,
    branch: Var,
    rate: f64,
    training: bool,
    rng: &mut impl Rng,
) -> Result<Var> {
    check_rate(rate)?;
    if !training || rate == 0.0 {
        return Ok(branch);
    }
    let s = DropPath::new(rate, rng)?.draw();
    Ok(g.scale(branch, s))
}
