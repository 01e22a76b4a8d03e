//! Pre-training losses (contrastive, masked LM, causal LM), their sum, and
//! the answer-only causal loss used for question answering.

use diffcore::{Graph, Var};
use rand::Rng;

use crate::data::{CLS, EOS, MASK, PAD, SEP};
use crate::error::{Error, Result};
use crate::fusion::FusionInput;
use crate::text::TokenSeq;

pub const TAU_INIT: f64 = 0.07;
pub const TAU_MIN: f64 = 1e-3;
pub const TAU_MAX: f64 = 1.0;

/// Rows of a contrastive batch must be unit-norm to this tolerance.
const UNIT_NORM_TOL: f64 = 1e-6;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum VtcDirection {
    /// Mean of video-to-text and text-to-video cross-entropies.
    #[default]
    Symmetric,
    /// Video-to-text only: each video row is a softmax over texts.
    VideoToText,
}

/// Contrastive loss over `B × d` unit-norm embeddings and a `[1]`
/// temperature. Row `i` of each side is the positive pair.
pub fn vtc_loss(g: &mut Graph, video: Var, text: Var, tau: Var, direction: VtcDirection) -> Result<Var> {
    let (vd, td) = (g.dims(video).to_vec(), g.dims(text).to_vec());
    if vd.len() != 2 || vd != td {
        return Err(Error::Contract(format!(
            "contrastive embeddings must share a B × d shape, got {vd:?} and {td:?}"
        )));
    }
    let b = vd[0];
    if b < 2 {
        return Err(Error::Contract(format!("contrastive batch of {b} has no negatives")));
    }
    for (side, var) in [("video", video), ("text", text)] {
        for (r, row) in g.value(var).chunks(vd[1]).enumerate() {
            let n = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            if (n - 1.0).abs() > UNIT_NORM_TOL {
                return Err(Error::Contract(format!("{side} embedding {r} has norm {n}")));
            }
        }
    }
    let t = g.value(tau)[0];
    if !(t > 0.0) {
        return Err(Error::Contract(format!("temperature must be positive, got {t}")));
    }
    let tt = g.transpose(text)?;
    let sim = g.matmul(video, tt)?;
    let inv_tau = g.pow(tau, -1.0)?;
    let logits = g.mul(sim, inv_tau)?;
    let targets: Vec<usize> = (0..b).collect();
    let v2t = g.cross_entropy(logits, &targets)?;
    match direction {
        VtcDirection::VideoToText => Ok(v2t),
        VtcDirection::Symmetric => {
            let lt = g.transpose(logits)?;
            let t2v = g.cross_entropy(lt, &targets)?;
            let sum = g.add(v2t, t2v)?;
            Ok(g.scale(sum, 0.5))
        }
    }
}

/// What a masked position is replaced with in the model input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Replacement {
    Mask,
    Random(usize),
    Keep,
}

/// Masked positions of one sequence with their original ids.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskingPlan {
    positions: Vec<usize>,
    originals: Vec<usize>,
    replacements: Vec<Replacement>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MaskingConfig {
    pub rate: f64,
    pub mask_share: f64,
    pub random_share: f64,
}

impl Default for MaskingConfig {
    fn default() -> Self {
        MaskingConfig {
            rate: 0.15,
            mask_share: 0.8,
            random_share: 0.1,
        }
    }
}

fn is_special(id: usize) -> bool {
    matches!(id, PAD | CLS | SEP | MASK | EOS)
}

impl MaskingPlan {
    pub fn new(ids: &[usize], positions: Vec<usize>, replacements: Vec<Replacement>) -> Result<Self> {
        if positions.len() != replacements.len() {
            return Err(Error::Contract("one replacement per masked position".into()));
        }
        if positions.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Contract("masked positions must be strictly increasing".into()));
        }
        let originals = positions
            .iter()
            .map(|&p| match ids.get(p) {
                Some(&id) if !is_special(id) => Ok(id),
                Some(&id) => Err(Error::Contract(format!("position {p} holds special token {id}"))),
                None => Err(Error::Contract(format!("position {p} outside a {}-token input", ids.len()))),
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(MaskingPlan {
            positions,
            originals,
            replacements,
        })
    }

    /// Draws `round(rate · n)` (at least one) of the `n` maskable positions,
    /// then a mask/random/keep replacement for each. Random ids come from
    /// `content_ids`.
    pub fn sample(
        ids: &[usize],
        cfg: &MaskingConfig,
        content_ids: std::ops::Range<usize>,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let candidates: Vec<usize> = (0..ids.len()).filter(|&p| !is_special(ids[p])).collect();
        if candidates.is_empty() {
            return Err(Error::Data(format!("nothing to mask in {ids:?}")));
        }
        let count = ((cfg.rate * candidates.len() as f64).round() as usize).clamp(1, candidates.len());
        let mut positions: Vec<usize> = rand::seq::index::sample(rng, candidates.len(), count)
            .into_iter()
            .map(|i| candidates[i])
            .collect();
        positions.sort_unstable();
        let replacements = positions
            .iter()
            .map(|_| {
                let u: f64 = rng.gen();
                if u < cfg.mask_share {
                    Replacement::Mask
                } else if u < cfg.mask_share + cfg.random_share {
                    Replacement::Random(rng.gen_range(content_ids.clone()))
                } else {
                    Replacement::Keep
                }
            })
            .collect();
        MaskingPlan::new(ids, positions, replacements)
    }

    pub fn positions(&self) -> &[usize] {
        &self.positions
    }

    pub fn originals(&self) -> &[usize] {
        &self.originals
    }

    pub fn replacements(&self) -> &[Replacement] {
        &self.replacements
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    /// The corrupted model input.
    pub fn apply(&self, ids: &[usize]) -> Vec<usize> {
        let mut out = ids.to_vec();
        for (&p, r) in self.positions.iter().zip(&self.replacements) {
            match *r {
                Replacement::Mask => out[p] = MASK,
                Replacement::Random(id) => out[p] = id,
                Replacement::Keep => {}
            }
        }
        out
    }
}

/// MLM input for a caption: `[CLS]` followed by the caption and its [EOS].
pub fn mlm_sequence(caption: &TokenSeq) -> Vec<usize> {
    std::iter::once(CLS).chain(caption.ids().iter().copied()).collect()
}

/// Mean cross-entropy of `(B·L) × V` logits at the listed rows.
fn scored_ce(g: &mut Graph, logits: Var, rows: &[usize], targets: &[usize]) -> Result<Var> {
    let picked = g.embedding(logits, rows)?;
    Ok(g.cross_entropy(picked, targets)?)
}

/// Mean cross-entropy over every masked position of the batch. `plans[i]`
/// indexes into item `i` of `input`.
pub fn mlm_loss(g: &mut Graph, logits: Var, input: &FusionInput, plans: &[MaskingPlan]) -> Result<Var> {
    if plans.len() != input.batch {
        return Err(Error::Contract(format!(
            "{} masking plans for {} sequences",
            plans.len(),
            input.batch
        )));
    }
    let mut rows = Vec::new();
    let mut targets = Vec::new();
    for (i, plan) in plans.iter().enumerate() {
        for (&p, &t) in plan.positions.iter().zip(&plan.originals) {
            if p >= input.lengths[i] {
                return Err(Error::Contract(format!("masked position {p} lies in padding")));
            }
            rows.push(input.row(i, p));
            targets.push(t);
        }
    }
    if rows.is_empty() {
        return Err(Error::Contract("empty masking plan".into()));
    }
    scored_ce(g, logits, &rows, &targets)
}

/// Causal LM input and targets: `[CLS] x_0 … x_{n-2}` predicts
/// `x_0 … x_{n-1}`, the last of which is [EOS].
pub fn unilm_sequence(caption: &TokenSeq) -> (Vec<usize>, Vec<usize>) {
    let ids = caption.ids();
    let input = std::iter::once(CLS).chain(ids[..ids.len() - 1].iter().copied()).collect();
    (input, ids.to_vec())
}

/// Next-token cross-entropy averaged over every target of the batch.
/// Item `i`'s target `t` is scored at row `t` of its segment.
pub fn unilm_loss(g: &mut Graph, logits: Var, input: &FusionInput, targets: &[Vec<usize>]) -> Result<Var> {
    if targets.len() != input.batch {
        return Err(Error::Contract(format!(
            "{} target lists for {} sequences",
            targets.len(),
            input.batch
        )));
    }
    let mut rows = Vec::new();
    let mut flat = Vec::new();
    for (i, tg) in targets.iter().enumerate() {
        if tg.last() != Some(&EOS) {
            return Err(Error::Data(format!("caption targets {tg:?} do not end in [EOS]")));
        }
        if tg.len() > input.lengths[i] {
            return Err(Error::Contract(format!(
                "{} targets for a {}-token input",
                tg.len(),
                input.lengths[i]
            )));
        }
        for (t, &id) in tg.iter().enumerate() {
            rows.push(input.row(i, t));
            flat.push(id);
        }
    }
    scored_ce(g, logits, &rows, &flat)
}

/// Causal QA sequence `[CLS] q [SEP] a` with the answer positions to score.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VqaPlan {
    pub input: Vec<usize>,
    /// `(row, target)`: the row whose logits predict `target`.
    pub scored: Vec<(usize, usize)>,
}

impl VqaPlan {
    /// Prompt for answer generation: `[CLS] q [SEP]`.
    pub fn prompt(question: &TokenSeq) -> Vec<usize> {
        let q = question.ids();
        std::iter::once(CLS)
            .chain(q[..q.len() - 1].iter().copied())
            .chain(std::iter::once(SEP))
            .collect()
    }

    /// Each answer token is masked with probability `rate` (at least one);
    /// masked tokens and the closing [EOS] are scored.
    pub fn sample(question: &TokenSeq, answer: &TokenSeq, rate: f64, rng: &mut impl Rng) -> Result<Self> {
        let a = &answer.ids()[..answer.len() - 1];
        if a.is_empty() {
            return Err(Error::Data("empty answer".into()));
        }
        let mut masked: Vec<bool> = a.iter().map(|_| rng.gen::<f64>() < rate).collect();
        if !masked.iter().any(|&m| m) {
            let k = rng.gen_range(0..a.len());
            masked[k] = true;
        }
        Self::with_mask(question, answer, &masked)
    }

    pub fn with_mask(question: &TokenSeq, answer: &TokenSeq, masked: &[bool]) -> Result<Self> {
        let a = &answer.ids()[..answer.len() - 1];
        if a.is_empty() {
            return Err(Error::Data("empty answer".into()));
        }
        if masked.len() != a.len() {
            return Err(Error::Contract("one mask flag per answer token".into()));
        }
        let mut input = Self::prompt(question);
        let start = input.len();
        input.extend_from_slice(a);
        // Row r predicts token r + 1.
        let mut scored: Vec<(usize, usize)> = masked
            .iter()
            .enumerate()
            .filter(|(_, &m)| m)
            .map(|(k, _)| (start + k - 1, a[k]))
            .collect();
        scored.push((input.len() - 1, EOS));
        Ok(VqaPlan { input, scored })
    }
}

/// Causal LM loss restricted to each plan's scored rows.
pub fn vqa_loss(g: &mut Graph, logits: Var, input: &FusionInput, plans: &[VqaPlan]) -> Result<Var> {
    if plans.len() != input.batch {
        return Err(Error::Contract(format!(
            "{} QA plans for {} sequences",
            plans.len(),
            input.batch
        )));
    }
    let (rows, targets): (Vec<usize>, Vec<usize>) = plans
        .iter()
        .enumerate()
        .flat_map(|(i, p)| p.scored.iter().map(move |&(r, t)| (input.row(i, r), t)))
        .unzip();
    scored_ce(g, logits, &rows, &targets)
}

/// Unweighted sum of the three pre-training losses.
pub fn total_loss(g: &mut Graph, vtc: Var, mlm: Var, unilm: Var) -> Result<Var> {
    let s = g.add(vtc, mlm)?;
    Ok(g.add(s, unilm)?)
}

/// Scalar values of each loss component.
#[derive(Clone, Copy, Debug, Default, PartialEq, serde::Serialize)]
pub struct LossParts {
    pub vtc: f64,
    pub mlm: f64,
    pub unilm: f64,
}

impl LossParts {
    pub fn total(&self) -> f64 {
        self.vtc + self.mlm + self.unilm
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Vocab, VOCAB_SIZE};
    use diffcore::Tensor;
    use proptest::prelude::{prop_assert, proptest};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn vtc_value(video: &Tensor, text: &Tensor, tau: f64, dir: VtcDirection) -> Result<f64> {
        let mut g = Graph::new();
        let v = g.constant(video);
        let t = g.constant(text);
        let tau = g.constant(&Tensor::scalar(tau));
        let l = vtc_loss(&mut g, v, t, tau, dir)?;
        Ok(g.scalar(l))
    }

    /// Straight-line contrastive loss.
    fn vtc_oracle(video: &Tensor, text: &Tensor, tau: f64, dir: VtcDirection) -> f64 {
        let b = video.dims()[0];
        let sim = |i: usize, j: usize| -> f64 { video.row(i).iter().zip(text.row(j)).map(|(a, c)| a * c).sum::<f64>() / tau };
        let ce = |f: &dyn Fn(usize, usize) -> f64| -> f64 {
            (0..b)
                .map(|i| {
                    let z: f64 = (0..b).map(|j| f(i, j).exp()).sum();
                    z.ln() - f(i, i)
                })
                .sum::<f64>()
                / b as f64
        };
        let v2t = ce(&sim);
        match dir {
            VtcDirection::VideoToText => v2t,
            VtcDirection::Symmetric => 0.5 * (v2t + ce(&|i, j| sim(j, i))),
        }
    }

    fn unit_rows(b: usize, d: usize, rng: &mut ChaCha8Rng) -> Tensor {
        let mut data: Vec<f64> = (0..b * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        for row in data.chunks_mut(d) {
            let n = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            row.iter_mut().for_each(|x| *x /= n);
        }
        Tensor::new(vec![b, d], data).unwrap()
    }

    #[test]
    fn identical_embeddings_give_ln_b() {
        let row = [0.6, 0.8, 0.0];
        let e = Tensor::new(vec![4, 3], row.repeat(4)).unwrap();
        for dir in [VtcDirection::Symmetric, VtcDirection::VideoToText] {
            let l = vtc_value(&e, &e, TAU_INIT, dir).unwrap();
            assert!((l - 4f64.ln()).abs() < 1e-9, "{l}");
        }
    }

    #[test]
    fn identity_similarity_hand_case() {
        let e = Tensor::eye(2);
        let l = vtc_value(&e, &e, 1.0, VtcDirection::Symmetric).unwrap();
        let want = -(1f64.exp() / (1f64.exp() + 1.0)).ln();
        assert!((l - want).abs() < 1e-12);
        assert!((l - 0.3133).abs() < 1e-4);
    }

    #[test]
    fn aligned_pairs_lose_less_as_temperature_drops() {
        let e = Tensor::eye(3);
        let ls: Vec<f64> = [1.0, 0.5, 0.1]
            .iter()
            .map(|&t| vtc_value(&e, &e, t, VtcDirection::Symmetric).unwrap())
            .collect();
        assert!(ls[0] > ls[1] && ls[1] > ls[2], "{ls:?}");
        assert!(ls[2] < 1e-3);
    }

    #[test]
    fn degenerate_batches_are_rejected() {
        let one = Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap();
        assert!(matches!(vtc_value(&one, &one, 0.1, VtcDirection::Symmetric), Err(Error::Contract(_))));
        let raw = Tensor::new(vec![2, 2], vec![2.0, 0.0, 0.0, 1.0]).unwrap();
        assert!(matches!(vtc_value(&raw, &raw, 0.1, VtcDirection::Symmetric), Err(Error::Contract(_))));
    }

    #[test]
    fn vtc_matches_the_oracle_and_is_rotation_and_permutation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let v = unit_rows(5, 4, &mut rng);
            let t = unit_rows(5, 4, &mut rng);
            for dir in [VtcDirection::Symmetric, VtcDirection::VideoToText] {
                let l = vtc_value(&v, &t, 0.3, dir).unwrap();
                assert!((l - vtc_oracle(&v, &t, 0.3, dir)).abs() < 1e-12);
            }
            let base = vtc_value(&v, &t, 0.3, VtcDirection::Symmetric).unwrap();
            // Rotation in the (0, 1) plane followed by one in the (2, 3) plane.
            let (c, s) = (0.3f64.cos(), 0.3f64.sin());
            let rotate = |m: &Tensor| {
                let mut out = m.clone();
                for r in 0..5 {
                    let x = m.row(r);
                    out.set(&[r, 0], c * x[0] - s * x[1]);
                    out.set(&[r, 1], s * x[0] + c * x[1]);
                    out.set(&[r, 2], c * x[2] + s * x[3]);
                    out.set(&[r, 3], -s * x[2] + c * x[3]);
                }
                out
            };
            let rotated = vtc_value(&rotate(&v), &rotate(&t), 0.3, VtcDirection::Symmetric).unwrap();
            assert!((base - rotated).abs() < 1e-12);
            let perm = [3, 0, 4, 1, 2];
            let permute = |m: &Tensor| {
                let rows: Vec<&[f64]> = perm.iter().map(|&i| m.row(i)).collect();
                Tensor::from_rows(&rows).unwrap()
            };
            let permuted = vtc_value(&permute(&v), &permute(&t), 0.3, VtcDirection::Symmetric).unwrap();
            assert!((base - permuted).abs() < 1e-12);
        }
    }

    #[test]
    fn temperature_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let v = unit_rows(3, 4, &mut rng);
        let t = unit_rows(3, 4, &mut rng);
        let report = diffcore::grad_check(
            |g, tau| {
                let vv = g.constant(&v);
                let tv = g.constant(&t);
                vtc_loss(g, vv, tv, tau, VtcDirection::Symmetric).map_err(|e| match e {
                    Error::Tensor(t) => t,
                    other => diffcore::TensorError::Contract(other.to_string()),
                })
            },
            &Tensor::scalar(0.2),
            1e-5,
            1e-6,
        )
        .unwrap();
        assert!(report.passed(), "{report:?}");
    }

    fn logits_value(
        rows: usize,
        fill: impl Fn(usize, usize) -> f64,
        f: impl FnOnce(&mut Graph, Var) -> Result<Var>,
    ) -> Result<f64> {
        let data = (0..rows * VOCAB_SIZE).map(|k| fill(k / VOCAB_SIZE, k % VOCAB_SIZE)).collect();
        let mut g = Graph::new();
        let l = g.constant(&Tensor::new(vec![rows, VOCAB_SIZE], data).unwrap());
        let out = f(&mut g, l)?;
        Ok(g.scalar(out))
    }

    fn caption() -> TokenSeq {
        Vocab::new().tokenize("a red square moving left slow")
    }

    #[test]
    fn uniform_logits_cost_ln_vocab() {
        let cap = caption();
        let seq = mlm_sequence(&cap);
        let input = FusionInput::new(std::slice::from_ref(&seq)).unwrap();
        let plan = MaskingPlan::new(&seq, vec![1, 3, 4], vec![Replacement::Mask; 3]).unwrap();
        let mlm = logits_value(seq.len(), |_, _| 0.25, |g, l| mlm_loss(g, l, &input, &[plan])).unwrap();
        assert!((mlm - 64f64.ln()).abs() < 1e-9);

        let (inp, tg) = unilm_sequence(&cap);
        let input = FusionInput::new(&[inp]).unwrap();
        let uni = logits_value(input.len, |_, _| -3.0, |g, l| unilm_loss(g, l, &input, &[tg])).unwrap();
        assert!((uni - 64f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn confident_correct_logits_cost_almost_nothing() {
        let cap = caption();
        let seq = mlm_sequence(&cap);
        let input = FusionInput::new(std::slice::from_ref(&seq)).unwrap();
        let plan = MaskingPlan::new(&seq, vec![2, 5], vec![Replacement::Mask; 2]).unwrap();
        let s2 = seq.clone();
        let mlm = logits_value(seq.len(), |r, v| if v == s2[r] { 20.0 } else { 0.0 }, |g, l| {
            mlm_loss(g, l, &input, &[plan])
        })
        .unwrap();
        assert!(mlm < 1e-3);

        let (inp, tg) = unilm_sequence(&cap);
        let input = FusionInput::new(&[inp]).unwrap();
        let t2 = tg.clone();
        let uni = logits_value(input.len, |r, v| if v == t2[r] { 20.0 } else { 0.0 }, |g, l| {
            unilm_loss(g, l, &input, &[tg])
        })
        .unwrap();
        assert!(uni < 1e-3);
    }

    fn ce_by_hand(row: &[f64], target: usize) -> f64 {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln() - row[target]
    }

    #[test]
    fn two_masked_positions_average_their_cross_entropies() {
        let seq = mlm_sequence(&caption());
        let input = FusionInput::new(std::slice::from_ref(&seq)).unwrap();
        let plan = MaskingPlan::new(&seq, vec![1, 4], vec![Replacement::Mask, Replacement::Keep]).unwrap();
        let fill = |r: usize, v: usize| ((r * 31 + v * 7) % 13) as f64 * 0.3;
        let got = logits_value(seq.len(), fill, |g, l| mlm_loss(g, l, &input, &[plan])).unwrap();
        let row = |r: usize| (0..VOCAB_SIZE).map(|v| fill(r, v)).collect::<Vec<_>>();
        let want = 0.5 * (ce_by_hand(&row(1), seq[1]) + ce_by_hand(&row(4), seq[4]));
        assert!((got - want).abs() < 1e-12);
    }

    #[test]
    fn masking_never_touches_specials() {
        let seq = mlm_sequence(&caption());
        assert!(MaskingPlan::new(&seq, vec![0], vec![Replacement::Mask]).is_err());
        assert!(MaskingPlan::new(&seq, vec![7], vec![Replacement::Mask]).is_err());
        let input = FusionInput::new(std::slice::from_ref(&seq)).unwrap();
        let empty = MaskingPlan::new(&seq, vec![], vec![]).unwrap();
        let err = logits_value(seq.len(), |_, _| 0.0, |g, l| mlm_loss(g, l, &input, &[empty])).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }

    #[test]
    fn sampled_plans_follow_the_recipe() {
        let vocab = Vocab::new();
        let seq = mlm_sequence(&caption());
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut counts = [0usize; 3];
        for _ in 0..4000 {
            let plan = MaskingPlan::sample(&seq, &MaskingConfig::default(), vocab.content_ids(), &mut rng).unwrap();
            // 15% of six content tokens rounds to one.
            assert_eq!(plan.len(), 1);
            let corrupted = plan.apply(&seq);
            for (p, r) in plan.positions().iter().zip(plan.replacements()) {
                assert!(!is_special(seq[*p]));
                match r {
                    Replacement::Mask => {
                        counts[0] += 1;
                        assert_eq!(corrupted[*p], MASK);
                    }
                    Replacement::Random(id) => {
                        counts[1] += 1;
                        assert!(vocab.content_ids().contains(id));
                    }
                    Replacement::Keep => {
                        counts[2] += 1;
                        assert_eq!(corrupted[*p], seq[*p]);
                    }
                }
            }
        }
        let share = |c: usize| c as f64 / 4000.0;
        assert!((share(counts[0]) - 0.8).abs() < 0.03, "{counts:?}");
        assert!((share(counts[1]) - 0.1).abs() < 0.02, "{counts:?}");
        assert!((share(counts[2]) - 0.1).abs() < 0.02, "{counts:?}");
    }

    #[test]
    fn unilm_requires_eos_targets() {
        let input = FusionInput::new(&[vec![1, 7, 8]]).unwrap();
        let err = logits_value(3, |_, _| 0.0, |g, l| unilm_loss(g, l, &input, &[vec![7, 8, 9]])).unwrap_err();
        assert!(matches!(err, Error::Data(_)));
    }

    #[test]
    fn earlier_positions_ignore_later_targets() {
        // Position-wise contributions: changing the target at t alters only
        // the t-th term of the sum.
        let (inp, tg) = unilm_sequence(&caption());
        let input = FusionInput::new(&[inp]).unwrap();
        let fill = |r: usize, v: usize| ((r * 5 + v * 3) % 11) as f64 * 0.2;
        let n = tg.len();
        let base = logits_value(n, fill, |g, l| unilm_loss(g, l, &input, &[tg.clone()])).unwrap() * n as f64;
        let row = |r: usize| (0..VOCAB_SIZE).map(|v| fill(r, v)).collect::<Vec<_>>();
        for t in 0..n - 1 {
            let mut edited = tg.clone();
            edited[t] = 40;
            let l = logits_value(n, fill, |g, lg| unilm_loss(g, lg, &input, &[edited])).unwrap() * n as f64;
            let delta = ce_by_hand(&row(t), 40) - ce_by_hand(&row(t), tg[t]);
            assert!((l - base - delta).abs() < 1e-10);
        }
    }

    #[test]
    fn total_is_the_plain_sum() {
        let mut g = Graph::new();
        let parts: Vec<Var> = [1.0, 2.0, 3.0].iter().map(|&x| g.constant(&Tensor::scalar(x))).collect();
        let t = total_loss(&mut g, parts[0], parts[1], parts[2]).unwrap();
        assert_eq!(g.scalar(t), 6.0);
        let z = g.constant(&Tensor::scalar(0.0));
        let t = total_loss(&mut g, parts[0], z, parts[2]).unwrap();
        assert_eq!(g.scalar(t), 4.0);
        assert_eq!(LossParts { vtc: 1.0, mlm: 2.0, unilm: 3.0 }.total(), 6.0);
    }

    fn qa() -> (TokenSeq, TokenSeq) {
        let v = Vocab::new();
        (v.tokenize("which way is the red square moving"), v.tokenize("left"))
    }

    #[test]
    fn vqa_scores_only_the_answer_and_eos() {
        let (q, a) = qa();
        let plan = VqaPlan::with_mask(&q, &a, &[true]).unwrap();
        let n = plan.input.len();
        assert_eq!(plan.input[0], CLS);
        assert_eq!(plan.input[n - 2], SEP);
        assert_eq!(plan.scored, vec![(n - 2, a.ids()[0]), (n - 1, EOS)]);
        let input = FusionInput::new(std::slice::from_ref(&plan.input)).unwrap();

        let uniform = logits_value(n, |_, _| 1.0, |g, l| vqa_loss(g, l, &input, &[plan.clone()])).unwrap();
        assert!((uniform - 64f64.ln()).abs() < 1e-9);

        let fill = |r: usize, v: usize| ((r * 3 + v) % 7) as f64 * 0.4;
        let base = logits_value(n, fill, |g, l| vqa_loss(g, l, &input, &[plan.clone()])).unwrap();
        // Perturbing question rows changes nothing.
        let bumped = logits_value(n, |r, v| if r < n - 2 { fill(r, v) + v as f64 } else { fill(r, v) }, |g, l| {
            vqa_loss(g, l, &input, &[plan.clone()])
        })
        .unwrap();
        assert_eq!(base, bumped);
        let row = |r: usize| (0..VOCAB_SIZE).map(|v| fill(r, v)).collect::<Vec<_>>();
        let want = 0.5 * (ce_by_hand(&row(n - 2), a.ids()[0]) + ce_by_hand(&row(n - 1), EOS));
        assert!((base - want).abs() < 1e-12);
    }

    #[test]
    fn vqa_sampling_masks_at_least_one_answer_token() {
        let (q, a) = qa();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..50 {
            let plan = VqaPlan::sample(&q, &a, 0.0, &mut rng).unwrap();
            assert_eq!(plan.scored.len(), 2);
        }
        let empty = TokenSeq::new(vec![EOS], 64).unwrap();
        assert!(matches!(VqaPlan::sample(&q, &empty, 0.5, &mut rng), Err(Error::Data(_))));
    }

    proptest! {
        #[test]
        fn vtc_is_nonnegative_and_matches_the_oracle(
            seed in 0u64..1000, b in 2usize..6, tau in 0.01f64..1.0,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let v = unit_rows(b, 3, &mut rng);
            let t = unit_rows(b, 3, &mut rng);
            let l = vtc_value(&v, &t, tau, VtcDirection::Symmetric).unwrap();
            prop_assert!(l >= 0.0);
            prop_assert!((l - vtc_oracle(&v, &t, tau, VtcDirection::Symmetric)).abs() < 1e-10);
        }
    }
}
