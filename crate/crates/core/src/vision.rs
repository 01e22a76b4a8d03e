//! Patch-based vision transformer with optional video adapters.
//!
//! A batch of videos is encoded as one stacked matrix with rows ordered
//! `(item, frame, token)`. Token 0 of every frame is the [CLS] token. Row-wise
//! layers see the whole batch at once; self-attention stays inside a frame.

use diffcore::{Graph, ParamStore, ParamVars, Tensor, TensorError, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{
    normal_tensor, AttentionMask, BranchScale, DropPath, LayerNorm, Linear, Segments,
    TransformerBlock,
};

#[derive(Clone, Debug, PartialEq)]
pub struct AdapterConfig {
    pub kernel: usize,
    pub heads: usize,
    /// `v + Δ` when true, `Δ` alone otherwise.
    pub residual: bool,
    /// Length of the learned temporal position table.
    pub max_frames: usize,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        AdapterConfig {
            kernel: 3,
            heads: 2,
            residual: true,
            max_frames: 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VisionConfig {
    pub image_size: usize,
    pub channels: usize,
    pub patch: usize,
    pub width: usize,
    pub depth: usize,
    pub heads: usize,
    pub ffn_ratio: usize,
    pub adapter: AdapterConfig,
}

impl Default for VisionConfig {
    fn default() -> Self {
        VisionConfig {
            image_size: 16,
            channels: 3,
            patch: 4,
            width: 32,
            depth: 4,
            heads: 2,
            ffn_ratio: 4,
            adapter: AdapterConfig::default(),
        }
    }
}

impl VisionConfig {
    pub fn grid(&self) -> usize {
        self.image_size / self.patch
    }

    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    /// Patches plus [CLS].
    pub fn tokens(&self) -> usize {
        self.num_patches() + 1
    }

    pub fn patch_dim(&self) -> usize {
        self.channels * self.patch * self.patch
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch == 0 || self.image_size % self.patch != 0 {
            return Err(Error::Config(format!(
                "image size {} is not divisible by patch {}",
                self.image_size, self.patch
            )));
        }
        if self.adapter.kernel % 2 == 0 {
            return Err(Error::Config(format!(
                "adapter kernel must be odd, got {}",
                self.adapter.kernel
            )));
        }
        Ok(())
    }
}

/// Blocks that carry an adapter, and the adapter bottleneck width.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct AdapterPlacement {
    layers: Vec<usize>,
    pub width: usize,
}

impl AdapterPlacement {
    pub fn none() -> Self {
        AdapterPlacement::default()
    }

    pub fn new(mut layers: Vec<usize>, width: usize, depth: usize) -> Result<Self> {
        layers.sort_unstable();
        layers.dedup();
        if let Some(&bad) = layers.iter().find(|&&l| l >= depth) {
            return Err(Error::Config(format!(
                "adapter layer {bad} is out of range for depth {depth}"
            )));
        }
        if !layers.is_empty() && width == 0 {
            return Err(Error::Config("adapter width must be positive".into()));
        }
        Ok(AdapterPlacement { layers, width })
    }

    /// The last `count` blocks of a `depth`-block encoder.
    pub fn last(count: usize, width: usize, depth: usize) -> Result<Self> {
        if count > depth {
            return Err(Error::Config(format!(
                "cannot place {count} adapters in {depth} blocks"
            )));
        }
        AdapterPlacement::new((depth - count..depth).collect(), width, depth)
    }

    pub fn layers(&self) -> &[usize] {
        &self.layers
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }
}

/// Cuts `[.., C, H, W]` frames into flattened patches.
///
/// Output rows are ordered by frame, then patch in row-major grid order.
/// Each row lists the patch pixels as `(channel, y, x)`.
pub fn patchify(frames: &Tensor, patch: usize) -> Result<Tensor> {
    let dims = frames.dims();
    if dims.len() < 3 {
        return Err(TensorError::Shape {
            op: "patchify",
            lhs: dims.to_vec(),
            rhs: vec![patch],
        }
        .into());
    }
    let (c, h, w) = (dims[dims.len() - 3], dims[dims.len() - 2], dims[dims.len() - 1]);
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(TensorError::Shape {
            op: "patchify",
            lhs: dims.to_vec(),
            rhs: vec![patch, patch],
        }
        .into());
    }
    let n_frames: usize = dims[..dims.len() - 3].iter().product();
    let (gh, gw) = (h / patch, w / patch);
    let pd = c * patch * patch;
    let src = frames.data();
    let mut out = Vec::with_capacity(n_frames * gh * gw * pd);
    for f in 0..n_frames {
        let base = f * c * h * w;
        for gy in 0..gh {
            for gx in 0..gw {
                for ch in 0..c {
                    for py in 0..patch {
                        let row = base + ch * h * w + (gy * patch + py) * w + gx * patch;
                        out.extend_from_slice(&src[row..row + patch]);
                    }
                }
            }
        }
    }
    Ok(Tensor::new(vec![n_frames * gh * gw, pd], out)?)
}

/// Per-layer visual features for a batch: `tokens × frames × width` per item,
/// stored as one `(batch·frames·tokens) × width` matrix, frame-major.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct VisFeat {
    pub var: Var,
    pub batch: usize,
    pub frames: usize,
    pub tokens: usize,
    pub width: usize,
}

impl VisFeat {
    pub fn rows(&self) -> usize {
        self.batch * self.frames * self.tokens
    }

    /// One segment per frame.
    pub fn frame_segments(&self) -> Segments {
        Segments::new(self.batch * self.frames, self.tokens)
    }

    /// One segment per item, spanning all its frames.
    pub fn item_segments(&self) -> Segments {
        Segments::new(self.batch, self.frames * self.tokens)
    }

    pub fn cls_rows(&self) -> Vec<usize> {
        (0..self.batch * self.frames).map(|f| f * self.tokens).collect()
    }

    pub fn patch_rows(&self) -> Vec<usize> {
        let n = self.tokens;
        (0..self.batch * self.frames)
            .flat_map(|f| (1..n).map(move |j| f * n + j))
            .collect()
    }

    fn with_var(self, var: Var) -> VisFeat {
        VisFeat { var, ..self }
    }
}

/// Depthwise `k×k` convolution over a patch grid with zero padding and stride 1.
///
/// `x` holds `F` frames of `rows·cols` patches, `F·rows·cols × c`. `kernels`
/// is `F × k·k·c`: column block `o = (dy+r)·k + (dx+r)` holds the per-channel
/// weight applied to the neighbour at offset `(dy, dx)`, with `r = k/2`.
pub fn depthwise_conv(
    g: &mut Graph,
    x: Var,
    kernels: Var,
    grid: (usize, usize),
    k: usize,
) -> Result<Var> {
    let (rows, cols) = grid;
    let np = rows * cols;
    let xd = g.dims(x).to_vec();
    let kd = g.dims(kernels).to_vec();
    if xd.len() != 2 || np == 0 || xd[0] % np != 0 {
        return Err(TensorError::Shape {
            op: "depthwise_conv",
            lhs: xd,
            rhs: vec![rows, cols],
        }
        .into());
    }
    let (frames, c) = (xd[0] / np, xd[1]);
    if kd != [frames, k * k * c] || k % 2 == 0 {
        return Err(TensorError::Shape {
            op: "depthwise_conv",
            lhs: kd,
            rhs: vec![frames, k * k * c],
        }
        .into());
    }
    let zero = g.constant(&Tensor::zeros(vec![1, c]));
    let padded = g.concat(&[x, zero], 0)?;
    let pad_row = frames * np;
    let frame_of_row: Vec<usize> = (0..frames * np).map(|r| r / np).collect();
    let r = (k / 2) as isize;
    let mut acc: Option<Var> = None;
    for o in 0..k * k {
        let dy = (o / k) as isize - r;
        let dx = (o % k) as isize - r;
        let mut src = Vec::with_capacity(frames * np);
        for f in 0..frames {
            for i in 0..rows as isize {
                for j in 0..cols as isize {
                    let (si, sj) = (i + dy, j + dx);
                    let inside = (0..rows as isize).contains(&si) && (0..cols as isize).contains(&sj);
                    src.push(if inside {
                        f * np + si as usize * cols + sj as usize
                    } else {
                        pad_row
                    });
                }
            }
        }
        let shifted = g.embedding(padded, &src)?;
        let weight = g.slice(kernels, 1, o * c, c)?;
        let weight = g.embedding(weight, &frame_of_row)?;
        let term = g.mul(shifted, weight)?;
        acc = Some(match acc {
            Some(a) => g.add(a, term)?,
            None => term,
        });
    }
    Ok(acc.expect("k >= 1"))
}

/// Temporal aggregation of the [CLS] track plus a [CLS]-driven dynamic
/// convolution over the patches of each frame.
#[derive(Clone, Debug)]
pub struct VideoAdapter {
    pub fc1: Linear,
    pub temporal_pos: String,
    pub tt: TransformerBlock,
    pub fc2: Linear,
    pub fc3: Linear,
    pub kernel_gen: Linear,
    pub fc4: Linear,
    pub width: usize,
    pub cfg: AdapterConfig,
}

impl VideoAdapter {
    pub fn new(prefix: &str, d: usize, c: usize, ffn_ratio: usize, cfg: &AdapterConfig) -> Result<Self> {
        let k2 = cfg.kernel * cfg.kernel;
        Ok(VideoAdapter {
            fc1: Linear::new(&format!("{prefix}.fc1"), d, c),
            temporal_pos: format!("{prefix}.temporal_pos"),
            tt: TransformerBlock::new(&format!("{prefix}.tt"), c, cfg.heads, ffn_ratio)?,
            fc2: Linear::new(&format!("{prefix}.fc2"), c, d),
            fc3: Linear::new(&format!("{prefix}.fc3"), d, c),
            kernel_gen: Linear::new(&format!("{prefix}.kernel_gen"), c, k2 * c),
            fc4: Linear::new(&format!("{prefix}.fc4"), c, d),
            width: c,
            cfg: cfg.clone(),
        })
    }

    /// Residual adapters start with zero FC2/FC4 and so as an exact identity.
    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        self.fc1.init(store, rng);
        store.insert(
            &self.temporal_pos,
            normal_tensor(vec![self.cfg.max_frames, self.width], 1.0 / (self.width as f64).sqrt(), rng),
        );
        self.tt.init(store, rng);
        self.fc3.init(store, rng);
        self.kernel_gen.init(store, rng);
        if self.cfg.residual {
            self.fc2.init_zero(store);
            self.fc4.init_zero(store);
        } else {
            self.fc2.init(store, rng);
            self.fc4.init(store, rng);
        }
    }

    /// `FC2(TT(FC1(v_cls)))` for `batch` items of `frames` [CLS] rows each.
    /// Returns the bottleneck TT output and the up-projected update.
    pub fn temporal_aggregate(
        &self,
        g: &mut Graph,
        p: &ParamVars,
        v_cls: Var,
        batch: usize,
        frames: usize,
    ) -> Result<(Var, Var)> {
        if frames == 0 || frames > self.cfg.max_frames {
            return Err(Error::Config(format!(
                "{frames} frames exceed the adapter's temporal table of {}",
                self.cfg.max_frames
            )));
        }
        let h = self.fc1.forward(g, p, v_cls)?;
        let pos_rows: Vec<usize> = (0..batch * frames).map(|r| r % frames).collect();
        let pos = g.embedding(p.get(&self.temporal_pos)?, &pos_rows)?;
        let h = g.add(h, pos)?;
        let tt = self.tt.forward_segmented(
            g,
            p,
            h,
            Segments::new(batch, frames),
            &[AttentionMask::bidirectional()],
            &[BranchScale::KEEP, BranchScale::KEEP],
        )?;
        let up = self.fc2.forward(g, p, tt)?;
        Ok((tt, up))
    }

    /// Kernels generated from each frame's bottleneck [CLS] feature, applied
    /// depthwise to that frame's reduced patches.
    pub fn dynamic_conv(
        &self,
        g: &mut Graph,
        p: &ParamVars,
        cls: Var,
        patches: Var,
        grid: (usize, usize),
    ) -> Result<Var> {
        let kernels = self.kernel_gen.forward(g, p, cls)?;
        depthwise_conv(g, patches, kernels, grid, self.cfg.kernel)
    }

    pub fn forward(&self, g: &mut Graph, p: &ParamVars, feat: VisFeat, grid: usize) -> Result<VisFeat> {
        let bt = feat.batch * feat.frames;
        let np = feat.tokens - 1;
        if np != grid * grid {
            return Err(TensorError::Shape {
                op: "adapter",
                lhs: vec![feat.tokens],
                rhs: vec![grid, grid],
            }
            .into());
        }
        let v_cls = g.embedding(feat.var, &feat.cls_rows())?;
        let (tt, d_cls) = self.temporal_aggregate(g, p, v_cls, feat.batch, feat.frames)?;
        let v_patch = g.embedding(feat.var, &feat.patch_rows())?;
        let reduced = self.fc3.forward(g, p, v_patch)?;
        let conv = self.dynamic_conv(g, p, tt, reduced, (grid, grid))?;
        let d_patch = self.fc4.forward(g, p, conv)?;
        let both = g.concat(&[d_cls, d_patch], 0)?;
        let order: Vec<usize> = (0..bt)
            .flat_map(|f| (0..feat.tokens).map(move |j| if j == 0 { f } else { bt + f * np + j - 1 }))
            .collect();
        let delta = g.embedding(both, &order)?;
        let out = if self.cfg.residual {
            g.add(feat.var, delta)?
        } else {
            delta
        };
        Ok(feat.with_var(out))
    }
}

/// ViT over frames, with adapters after the blocks named by the placement.
#[derive(Clone, Debug)]
pub struct VisionEncoder {
    pub prefix: String,
    pub cfg: VisionConfig,
    pub placement: AdapterPlacement,
    pub patch_embed: Linear,
    pub cls: String,
    pub pos: String,
    pub blocks: Vec<TransformerBlock>,
    pub ln_post: LayerNorm,
    pub adapters: Vec<(usize, VideoAdapter)>,
    pub proj: Linear,
}

impl VisionEncoder {
    /// Backbone parameters live under `{prefix}.backbone`, adapters under
    /// `{prefix}.adapter.{layer}`, the joint-space projection under `proj_name`.
    pub fn new(
        prefix: &str,
        proj_name: &str,
        cfg: &VisionConfig,
        placement: &AdapterPlacement,
        embed_dim: usize,
    ) -> Result<Self> {
        cfg.validate()?;
        if let Some(&bad) = placement.layers().iter().find(|&&l| l >= cfg.depth) {
            return Err(Error::Config(format!(
                "adapter layer {bad} is out of range for depth {}",
                cfg.depth
            )));
        }
        let bb = format!("{prefix}.backbone");
        let blocks = (0..cfg.depth)
            .map(|i| TransformerBlock::new(&format!("{bb}.blocks.{i}"), cfg.width, cfg.heads, cfg.ffn_ratio))
            .collect::<Result<Vec<_>>>()?;
        let adapters = placement
            .layers()
            .iter()
            .map(|&l| {
                VideoAdapter::new(
                    &format!("{prefix}.adapter.{l}"),
                    cfg.width,
                    placement.width,
                    cfg.ffn_ratio,
                    &cfg.adapter,
                )
                .map(|a| (l, a))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(VisionEncoder {
            prefix: prefix.to_string(),
            cfg: cfg.clone(),
            placement: placement.clone(),
            patch_embed: Linear::new(&format!("{bb}.patch_embed"), cfg.patch_dim(), cfg.width),
            cls: format!("{bb}.cls"),
            pos: format!("{bb}.pos"),
            blocks,
            ln_post: LayerNorm::new(&format!("{bb}.ln_post"), cfg.width),
            adapters,
            proj: Linear::new(proj_name, cfg.width, embed_dim),
        })
    }

    pub fn backbone_prefix(&self) -> String {
        format!("{}.backbone.", self.prefix)
    }

    pub fn init_backbone(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        let std = 1.0 / (self.cfg.width as f64).sqrt();
        self.patch_embed.init(store, rng);
        store.insert(&self.cls, normal_tensor(vec![1, self.cfg.width], std, rng));
        store.insert(&self.pos, normal_tensor(vec![self.cfg.tokens(), self.cfg.width], std, rng));
        for b in &self.blocks {
            b.init(store, rng);
        }
        self.ln_post.init(store);
    }

    pub fn init_adapters(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        for (_, a) in &self.adapters {
            a.init(store, rng);
        }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        self.init_backbone(store, rng);
        self.init_adapters(store, rng);
        self.proj.init(store, rng);
    }

    /// Encodes `[B, T, C, H, W]` pixels. With `drop`, every backbone block
    /// branch is dropped per item, shared across that item's frames.
    pub fn encode(
        &self,
        g: &mut Graph,
        p: &ParamVars,
        frames: &Tensor,
        mut drop: Option<&mut DropPath<'_, ChaCha8Rng>>,
    ) -> Result<VisFeat> {
        let d = frames.dims();
        let c = &self.cfg;
        if d.len() != 5 || d[2..] != [c.channels, c.image_size, c.image_size] {
            return Err(TensorError::Shape {
                op: "encode_video",
                lhs: d.to_vec(),
                rhs: vec![c.channels, c.image_size, c.image_size],
            }
            .into());
        }
        let (batch, n_frames) = (d[0], d[1]);
        let (n, np) = (c.tokens(), c.num_patches());
        let bt = batch * n_frames;

        let patches = g.constant(&patchify(frames, c.patch)?);
        let emb = self.patch_embed.forward(g, p, patches)?;
        let with_cls = g.concat(&[emb, p.get(&self.cls)?], 0)?;
        let order: Vec<usize> = (0..bt)
            .flat_map(|f| (0..n).map(move |j| if j == 0 { bt * np } else { f * np + j - 1 }))
            .collect();
        let tokens = g.embedding(with_cls, &order)?;
        let pos_rows: Vec<usize> = (0..bt * n).map(|r| r % n).collect();
        let pos = g.embedding(p.get(&self.pos)?, &pos_rows)?;
        let x = g.add(tokens, pos)?;

        let mut feat = VisFeat {
            var: x,
            batch,
            frames: n_frames,
            tokens: n,
            width: c.width,
        };
        let mask = [AttentionMask::bidirectional()];
        let mut adapters = self.adapters.iter().peekable();
        for (i, block) in self.blocks.iter().enumerate() {
            let scales = match drop.as_deref_mut() {
                Some(dp) => [dp.draw_rows(batch, n_frames * n), dp.draw_rows(batch, n_frames * n)],
                None => [BranchScale::KEEP, BranchScale::KEEP],
            };
            let out = block.forward_segmented(g, p, feat.var, feat.frame_segments(), &mask, &scales)?;
            feat = feat.with_var(out);
            if let Some((_, adapter)) = adapters.next_if(|(l, _)| *l == i) {
                feat = adapter.forward(g, p, feat, c.grid())?;
            }
        }
        let out = self.ln_post.forward(g, p, feat.var)?;
        Ok(feat.with_var(out))
    }

    /// Mean over frames of the final [CLS] features, `B × width`.
    pub fn frame_mean_cls(&self, g: &mut Graph, feat: &VisFeat) -> Result<Var> {
        let cls = g.embedding(feat.var, &feat.cls_rows())?;
        let (b, t) = (feat.batch, feat.frames);
        let mut avg = vec![0.0; b * b * t];
        for i in 0..b {
            for f in 0..t {
                avg[i * b * t + i * t + f] = 1.0 / t as f64;
            }
        }
        let avg = g.constant_from(vec![b, b * t], avg)?;
        Ok(g.matmul(avg, cls)?)
    }

    /// Features plus the L2-normalized pooled embedding, `B × embed_dim`.
    pub fn encode_video(
        &self,
        g: &mut Graph,
        p: &ParamVars,
        frames: &Tensor,
        drop: Option<&mut DropPath<'_, ChaCha8Rng>>,
    ) -> Result<(VisFeat, Var)> {
        let feat = self.encode(g, p, frames, drop)?;
        let pooled = self.frame_mean_cls(g, &feat)?;
        let pooled = self.proj.forward(g, p, pooled)?;
        let pooled = g.l2_normalize_rows(pooled)?;
        Ok((feat, pooled))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil;
    use diffcore::grad_check_params;
    use rand::SeedableRng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn uniform(dims: &[usize], seed: u64) -> Tensor {
        let mut r = rng(seed);
        let n = dims.iter().product();
        Tensor::new(dims.to_vec(), (0..n).map(|_| r.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    fn encoder(placement: &AdapterPlacement, seed: u64) -> (VisionEncoder, ParamStore) {
        let enc = VisionEncoder::new("vision", "proj.video", &VisionConfig::default(), placement, 32).unwrap();
        let mut store = ParamStore::new();
        enc.init(&mut store, &mut rng(seed));
        (enc, store)
    }

    fn last4() -> AdapterPlacement {
        AdapterPlacement::last(4, 8, 4).unwrap()
    }

    /// Gives every adapter a non-zero output path.
    fn wake_adapters(enc: &VisionEncoder, store: &mut ParamStore, seed: u64) {
        let mut r = rng(seed);
        for (_, a) in &enc.adapters {
            a.fc2.init(store, &mut r);
            a.fc4.init(store, &mut r);
        }
    }

    fn run(enc: &VisionEncoder, store: &ParamStore, frames: &Tensor) -> (Vec<f64>, Vec<f64>) {
        let mut g = Graph::new();
        let p = store.bind(&mut g, |_| false);
        let (feat, pooled) = enc.encode_video(&mut g, &p, frames, None).unwrap();
        (g.value(feat.var).to_vec(), g.value(pooled).to_vec())
    }

    #[test]
    fn token_counts() {
        assert_eq!(VisionConfig::default().tokens(), 17);
        let big = VisionConfig {
            image_size: 224,
            patch: 16,
            ..VisionConfig::default()
        };
        assert_eq!(big.tokens(), 197);
        let p = patchify(&Tensor::zeros(vec![1, 3, 224, 224]), 16).unwrap();
        assert_eq!(p.dims(), &[196, 768]);
    }

    #[test]
    fn patchify_rejects_indivisible_frames() {
        let err = patchify(&Tensor::zeros(vec![1, 3, 15, 16]), 4).unwrap_err();
        assert!(matches!(err, Error::Tensor(TensorError::Shape { .. })));
    }

    #[test]
    fn patchify_places_every_pixel() {
        let frames = uniform(&[2, 3, 8, 8], 1);
        let p = patchify(&frames, 4).unwrap();
        for f in 0..2 {
            for c in 0..3 {
                for y in 0..8 {
                    for x in 0..8 {
                        let row = f * 4 + (y / 4) * 2 + x / 4;
                        let col = c * 16 + (y % 4) * 4 + x % 4;
                        assert_eq!(p.at(&[row, col]), frames.at(&[f, c, y, x]));
                    }
                }
            }
        }
    }

    #[test]
    fn identical_frames_encode_identically() {
        let (enc, store) = encoder(&AdapterPlacement::none(), 2);
        let one = uniform(&[3, 16, 16], 3);
        let mut data = Vec::new();
        for _ in 0..4 {
            data.extend_from_slice(one.data());
        }
        let frames = Tensor::new(vec![1, 4, 3, 16, 16], data).unwrap();
        let (feat, _) = run(&enc, &store, &frames);
        let per_frame = 17 * 32;
        for t in 1..4 {
            assert_eq!(feat[..per_frame], feat[t * per_frame..(t + 1) * per_frame]);
        }
    }

    fn adapter_and_store(c: usize, max_frames: usize, seed: u64) -> (VideoAdapter, ParamStore) {
        let cfg = AdapterConfig {
            max_frames,
            ..AdapterConfig::default()
        };
        let a = VideoAdapter::new("ad", 32, c, 4, &cfg).unwrap();
        let mut store = ParamStore::new();
        a.init(&mut store, &mut rng(seed));
        (a, store)
    }

    #[test]
    fn zero_fc2_gives_zero_cls_update() {
        let (a, store) = adapter_and_store(8, 8, 4);
        let mut g = Graph::new();
        let p = store.bind(&mut g, |_| false);
        let v = g.constant(&uniform(&[8, 32], 5));
        let (_, up) = a.temporal_aggregate(&mut g, &p, v, 2, 4).unwrap();
        assert!(g.value(up).iter().all(|&x| x == 0.0));
    }

    #[test]
    fn single_frame_aggregation_is_finite_and_differentiable() {
        let (a, mut store) = adapter_and_store(8, 8, 6);
        a.fc2.init(&mut store, &mut rng(7));
        store.insert("v", uniform(&[1, 32], 8));
        let w = uniform(&[1, 32], 9);
        let names: Vec<String> = store.names().map(String::from).collect();
        let report = grad_check_params(
            &store,
            &names,
            |g: &mut Graph, p: &ParamVars| -> Result<Var> {
                let (_, up) = a.temporal_aggregate(g, p, p.get("v")?, 1, 1)?;
                assert!(g.value(up).iter().all(|x| x.is_finite()));
                let wv = g.constant(&w);
                let y = g.mul(up, wv)?;
                Ok(g.sum(y))
            },
            1e-5,
            1e-4,
            8,
        )
        .unwrap();
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn temporal_aggregation_matches_straight_line_oracle() {
        let (a, mut store) = adapter_and_store(8, 8, 10);
        a.fc2.init(&mut store, &mut rng(11));
        let v = uniform(&[4, 32], 12);
        let mut g = Graph::new();
        let p = store.bind(&mut g, |_| false);
        let vv = g.constant(&v);
        let (tt, up) = a.temporal_aggregate(&mut g, &p, vv, 1, 4).unwrap();

        let h = testutil::linear_named(v.data(), 4, &store, "ad.fc1");
        let pos = testutil::param(&store, "ad.temporal_pos");
        let h = testutil::add(&h, &pos.data()[..4 * 8]);
        let h = testutil::block(&h, 4, &store, "ad.tt", 2, &|_, _| true);
        assert!(testutil::max_diff(g.value(tt), &h) < 1e-12);
        let expect = testutil::linear_named(&h, 4, &store, "ad.fc2");
        assert!(testutil::max_diff(g.value(up), &expect) < 1e-12);
    }

    fn conv(x: &Tensor, k: &Tensor, grid: (usize, usize)) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let (xv, kv) = (g.constant(x), g.constant(k));
        let out = depthwise_conv(&mut g, xv, kv, grid, 3)?;
        Ok(g.value(out).to_vec())
    }

    #[test]
    fn centre_kernel_is_identity_and_zero_kernel_is_zero() {
        let x = uniform(&[2 * 9, 4], 13);
        let mut k = Tensor::zeros(vec![2, 36]);
        assert!(conv(&x, &k, (3, 3)).unwrap().iter().all(|&v| v == 0.0));
        for f in 0..2 {
            for c in 0..4 {
                k.set(&[f, 4 * 4 + c], 1.0);
            }
        }
        assert_eq!(conv(&x, &k, (3, 3)).unwrap(), x.data());
    }

    #[test]
    fn depthwise_conv_matches_sliding_window() {
        for (grid, seed) in [((2, 2), 14), ((3, 4), 15)] {
            let (rows, cols) = grid;
            let (frames, c) = (2, 2);
            let x = uniform(&[frames * rows * cols, c], seed);
            let k = uniform(&[frames, 9 * c], seed + 100);
            let got = conv(&x, &k, grid).unwrap();
            for f in 0..frames {
                for i in 0..rows {
                    for j in 0..cols {
                        for ch in 0..c {
                            let mut acc = 0.0;
                            for dy in -1i64..=1 {
                                for dx in -1i64..=1 {
                                    let (si, sj) = (i as i64 + dy, j as i64 + dx);
                                    if si < 0 || sj < 0 || si >= rows as i64 || sj >= cols as i64 {
                                        continue;
                                    }
                                    let src = f * rows * cols + si as usize * cols + sj as usize;
                                    let o = ((dy + 1) * 3 + dx + 1) as usize;
                                    acc += k.at(&[f, o * c + ch]) * x.at(&[src, ch]);
                                }
                            }
                            let row = f * rows * cols + i * cols + j;
                            assert!((got[row * c + ch] - acc).abs() < 1e-14);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn depthwise_conv_rejects_grid_mismatch() {
        let x = uniform(&[10, 2], 16);
        let k = uniform(&[2, 18], 17);
        assert!(matches!(
            conv(&x, &k, (2, 2)),
            Err(Error::Tensor(TensorError::Shape { .. }))
        ));
    }

    fn feat_of(x: Var) -> VisFeat {
        VisFeat {
            var: x,
            batch: 1,
            frames: 4,
            tokens: 17,
            width: 32,
        }
    }

    #[test]
    fn fresh_adapter_is_an_exact_identity_and_keeps_shape() {
        let (a, store) = adapter_and_store(8, 8, 18);
        let x = uniform(&[4 * 17, 32], 19);
        let mut g = Graph::new();
        let p = store.bind(&mut g, |_| false);
        let xv = g.constant(&x);
        let feat = feat_of(xv);
        let out = a.forward(&mut g, &p, feat, 4).unwrap();
        assert_eq!(g.dims(out.var), &[68, 32]);
        assert_eq!((out.tokens, out.frames, out.width), (17, 4, 32));
        assert_eq!(g.value(out.var), x.data());
    }

    #[test]
    fn adapter_passes_grad_check() {
        let (a, mut store) = adapter_and_store(8, 8, 20);
        a.fc2.init(&mut store, &mut rng(21));
        a.fc4.init(&mut store, &mut rng(22));
        store.insert("x", uniform(&[4 * 17, 32], 23));
        let w = uniform(&[4 * 17, 32], 24);
        let names: Vec<String> = store.names().map(String::from).collect();
        let report = grad_check_params(
            &store,
            &names,
            |g: &mut Graph, p: &ParamVars| -> Result<Var> {
                let x = p.get("x")?;
                let feat = feat_of(x);
                let out = a.forward(g, p, feat, 4)?;
                let wv = g.constant(&w);
                let y = g.mul(out.var, wv)?;
                Ok(g.sum(y))
            },
            1e-5,
            1e-4,
            6,
        )
        .unwrap();
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn batched_encoding_matches_frame_by_frame() {
        let (enc, store) = encoder(&AdapterPlacement::none(), 25);
        let frames = uniform(&[2, 4, 3, 16, 16], 26);
        let (all, _) = run(&enc, &store, &frames);
        let per_frame = 17 * 32;
        for f in 0..8 {
            let one = Tensor::new(
                vec![1, 1, 3, 16, 16],
                frames.data()[f * 768..(f + 1) * 768].to_vec(),
            )
            .unwrap();
            let (feat, _) = run(&enc, &store, &one);
            assert_eq!(feat.as_slice(), &all[f * per_frame..(f + 1) * per_frame]);
        }
    }

    #[test]
    fn fresh_adapters_leave_the_encoder_unchanged() {
        let (plain, store) = encoder(&AdapterPlacement::none(), 27);
        let (adapted, mut store_a) = encoder(&last4(), 27);
        for (name, t) in store.iter() {
            store_a.insert(name, t.clone());
        }
        let frames = uniform(&[2, 4, 3, 16, 16], 28);
        assert_eq!(run(&plain, &store, &frames), run(&adapted, &store_a, &frames));
    }

    fn reverse_frames(frames: &Tensor) -> Tensor {
        let d = frames.dims();
        let per = d[2] * d[3] * d[4];
        let mut data = Vec::with_capacity(frames.numel());
        for b in 0..d[0] {
            for t in (0..d[1]).rev() {
                let start = (b * d[1] + t) * per;
                data.extend_from_slice(&frames.data()[start..start + per]);
            }
        }
        Tensor::new(d.to_vec(), data).unwrap()
    }

    #[test]
    fn only_adapters_see_frame_order() {
        let frames = uniform(&[1, 4, 3, 16, 16], 29);
        let reversed = reverse_frames(&frames);

        let (plain, store) = encoder(&AdapterPlacement::none(), 30);
        let (_, a) = run(&plain, &store, &frames);
        let (_, b) = run(&plain, &store, &reversed);
        assert!(testutil::max_diff(&a, &b) < 1e-12);

        let (adapted, mut store) = encoder(&last4(), 30);
        wake_adapters(&adapted, &mut store, 31);
        let (_, a) = run(&adapted, &store, &frames);
        let (_, b) = run(&adapted, &store, &reversed);
        assert!(testutil::max_diff(&a, &b) > 1e-6);
    }

    #[test]
    fn pooled_embedding_has_unit_norm() {
        let (enc, mut store) = encoder(&last4(), 32);
        wake_adapters(&enc, &mut store, 33);
        let (_, pooled) = run(&enc, &store, &uniform(&[3, 4, 3, 16, 16], 34));
        for row in pooled.chunks(32) {
            let n: f64 = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn placement_validation() {
        let p = AdapterPlacement::last(4, 512, 12).unwrap();
        assert_eq!(p.layers(), &[8, 9, 10, 11]);
        assert!(AdapterPlacement::new(vec![4], 8, 4).is_err());
        assert!(AdapterPlacement::last(5, 8, 4).is_err());
        let err = VisionEncoder::new(
            "v",
            "p",
            &VisionConfig::default(),
            &AdapterPlacement::new(vec![9], 8, 12).unwrap(),
            32,
        );
        assert!(matches!(err, Err(Error::Config(_))));
    }
}
