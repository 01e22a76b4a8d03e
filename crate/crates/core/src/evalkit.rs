//! Downstream evaluation: retrieval recall with dual softmax, caption
//! generation scored by BLEU@4 and exact match, and generative QA accuracy.

use std::collections::{BTreeMap, HashMap, HashSet};

use diffcore::{ParamStore, Tensor};
use serde::{Deserialize, Serialize};

use crate::config::{EvalConfig, RunConfig};
use crate::data::{Corpus, Vocab, CLS, EOS, NUM_SPECIALS};
use crate::error::{Error, Result};
use crate::model::{VisualTensors, VlabModel};
use crate::objectives::VqaPlan;
use crate::pipeline::FrameMode;

pub const RECALL_KS: [usize; 3] = [1, 5, 10];
pub const DUAL_SOFTMAX_TEMP: f64 = 100.0;

/// Query × gallery scores with one ground-truth gallery index per query.
#[derive(Clone, Debug, PartialEq)]
pub struct SimMatrix {
    queries: usize,
    gallery: usize,
    scores: Vec<f64>,
    truth: Vec<usize>,
}

impl SimMatrix {
    pub fn new(queries: usize, gallery: usize, scores: Vec<f64>, truth: Vec<usize>) -> Result<Self> {
        if queries == 0 || gallery == 0 || scores.len() != queries * gallery || truth.len() != queries {
            return Err(Error::Contract(format!(
                "similarity matrix {queries}x{gallery} with {} scores and {} truths",
                scores.len(),
                truth.len()
            )));
        }
        if let Some(&t) = truth.iter().find(|&&t| t >= gallery) {
            return Err(Error::Contract(format!("ground truth {t} outside a gallery of {gallery}")));
        }
        Ok(SimMatrix {
            queries,
            gallery,
            scores,
            truth,
        })
    }

    /// Diagonal ground truth over a square matrix.
    pub fn diagonal(n: usize, scores: Vec<f64>) -> Result<Self> {
        SimMatrix::new(n, n, scores, (0..n).collect())
    }

    /// Scores `a·bᵀ` between row embeddings, truth on the diagonal.
    pub fn from_embeddings(queries: &Tensor, gallery: &Tensor) -> Result<Self> {
        let (q, d) = (queries.dims()[0], queries.dims()[1]);
        let (g, d2) = (gallery.dims()[0], gallery.dims()[1]);
        if d != d2 || q != g {
            return Err(Error::Contract(format!(
                "paired embeddings {q}x{d} and {g}x{d2}"
            )));
        }
        let (a, b) = (queries.data(), gallery.data());
        let scores = (0..q)
            .flat_map(|i| (0..g).map(move |j| (i, j)))
            .map(|(i, j)| (0..d).map(|k| a[i * d + k] * b[j * d + k]).sum())
            .collect();
        SimMatrix::diagonal(q, scores)
    }

    pub fn queries(&self) -> usize {
        self.queries
    }

    pub fn gallery(&self) -> usize {
        self.gallery
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn truth(&self) -> &[usize] {
        &self.truth
    }

    pub fn row(&self, q: usize) -> &[f64] {
        &self.scores[q * self.gallery..(q + 1) * self.gallery]
    }

    /// Zero-based rank of the ground truth of query `q`. Higher scores rank
    /// first and ties go to the lower gallery index.
    pub fn rank_of_truth(&self, q: usize) -> usize {
        let row = self.row(q);
        let t = self.truth[q];
        let st = row[t];
        row.iter()
            .enumerate()
            .filter(|&(j, &s)| s > st || (s == st && j < t))
            .count()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Recall {
    /// `(k, R@k)` in percentage points.
    pub at: Vec<(usize, f64)>,
    pub sum: f64,
}

impl Recall {
    pub fn r(&self, k: usize) -> Option<f64> {
        self.at.iter().find(|(kk, _)| *kk == k).map(|(_, r)| *r)
    }

    pub fn to_metrics(&self) -> BTreeMap<String, f64> {
        let mut m: BTreeMap<String, f64> = self.at.iter().map(|(k, r)| (format!("R@{k}"), *r)).collect();
        m.insert("SUM".into(), self.sum);
        m
    }
}

/// Recall at each `k`, in points. A gallery smaller than the largest `k`
/// is a config error.
pub fn recall_at_k(m: &SimMatrix, ks: &[usize]) -> Result<Recall> {
    let max_k = ks.iter().copied().max().unwrap_or(0);
    if m.gallery < max_k {
        return Err(Error::Config(format!(
            "gallery of {} is smaller than R@{max_k}",
            m.gallery
        )));
    }
    if m.scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Numeric("NaN similarity score".into()));
    }
    let ranks: Vec<usize> = (0..m.queries).map(|q| m.rank_of_truth(q)).collect();
    let at: Vec<(usize, f64)> = ks
        .iter()
        .map(|&k| {
            let hits = ranks.iter().filter(|&&r| r < k).count();
            (k, 100.0 * hits as f64 / m.queries as f64)
        })
        .collect();
    let sum = at.iter().map(|(_, r)| r).sum();
    Ok(Recall { at, sum })
}

/// Recall where each `k` above the gallery size is capped at it, so small
/// evaluation splits still report three numbers. Keys keep the nominal `k`.
pub fn recall_at_k_capped(m: &SimMatrix, ks: &[usize]) -> Result<Recall> {
    let capped: Vec<usize> = ks.iter().map(|&k| k.min(m.gallery)).collect();
    let mut r = recall_at_k(m, &capped)?;
    for (slot, &k) in r.at.iter_mut().zip(ks) {
        slot.0 = k;
    }
    Ok(r)
}

fn softmax_in_place(v: &mut [f64]) {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        z += *x;
    }
    for x in v.iter_mut() {
        *x /= z;
    }
}

/// Row softmax times column softmax of `t·scores`.
pub fn dual_softmax(m: &SimMatrix, t: f64) -> SimMatrix {
    let (q, g) = (m.queries, m.gallery);
    let scaled: Vec<f64> = m.scores.iter().map(|s| s * t).collect();
    let mut rows = scaled.clone();
    for r in rows.chunks_mut(g) {
        softmax_in_place(r);
    }
    let mut cols = vec![0.0; q * g];
    for j in 0..g {
        let mut col: Vec<f64> = (0..q).map(|i| scaled[i * g + j]).collect();
        softmax_in_place(&mut col);
        for (i, c) in col.into_iter().enumerate() {
            cols[i * g + j] = c;
        }
    }
    SimMatrix {
        queries: q,
        gallery: g,
        scores: rows.iter().zip(&cols).map(|(a, b)| a * b).collect(),
        truth: m.truth.clone(),
    }
}

/// Next-token log-probabilities for a batch of prefixes of one item.
pub trait Decoder {
    fn vocab_size(&self) -> usize;
    /// Longest sequence the decoder accepts, prompt included.
    fn max_len(&self) -> usize;
    fn next_log_probs(&mut self, prefixes: &[Vec<usize>]) -> Result<Vec<Vec<f64>>>;
}

#[derive(Clone, Debug)]
struct Hyp {
    tokens: Vec<usize>,
    logp: f64,
    done: bool,
}

impl Hyp {
    fn normalized(&self) -> f64 {
        self.logp / (self.tokens.len() + usize::from(self.done)).max(1) as f64
    }
}

/// Decodes after `prompt` with greedy search (`beam == 1`) or beam search.
/// Only content tokens and [EOS] are proposed. The result excludes the
/// prompt and the [EOS] and has at most `max_len` tokens.
pub fn generate(dec: &mut impl Decoder, prompt: &[usize], max_len: usize, beam: usize) -> Result<Vec<usize>> {
    if prompt.is_empty() || beam == 0 {
        return Err(Error::Contract("generation needs a prompt and a beam of at least 1".into()));
    }
    let room = dec.max_len().saturating_sub(prompt.len());
    let budget = max_len.min(room);
    let allowed: Vec<usize> = std::iter::once(EOS).chain(NUM_SPECIALS..dec.vocab_size()).collect();
    let mut beams = vec![Hyp {
        tokens: Vec::new(),
        logp: 0.0,
        done: false,
    }];
    for step in 0..budget {
        let live: Vec<usize> = (0..beams.len()).filter(|&i| !beams[i].done).collect();
        if live.is_empty() {
            break;
        }
        let prefixes: Vec<Vec<usize>> = live
            .iter()
            .map(|&i| prompt.iter().chain(&beams[i].tokens).copied().collect())
            .collect();
        let lps = dec.next_log_probs(&prefixes)?;
        let mut cands: Vec<Hyp> = beams.iter().filter(|h| h.done).cloned().collect();
        for (&i, lp) in live.iter().zip(&lps) {
            for &tok in &allowed {
                let mut h = beams[i].clone();
                h.logp += lp[tok];
                if tok == EOS {
                    h.done = true;
                } else {
                    h.tokens.push(tok);
                }
                cands.push(h);
            }
        }
        // Stable sort keeps lower beam and token indices first on ties.
        cands.sort_by(|a, b| b.logp.total_cmp(&a.logp));
        cands.truncate(beam);
        beams = cands;
        if step + 1 == budget {
            break;
        }
    }
    let best = beams
        .iter()
        .enumerate()
        .max_by(|(i, a), (j, b)| a.normalized().total_cmp(&b.normalized()).then(j.cmp(i)))
        .map(|(_, h)| h.tokens.clone())
        .unwrap_or_default();
    Ok(best)
}

/// Corpus BLEU@4 (0 to 100) and exact-match fraction over whitespace tokens.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaptionScores {
    pub bleu4: f64,
    pub exact_match: f64,
}

fn ngrams(tokens: &[&str], n: usize) -> HashMap<Vec<String>, usize> {
    let mut out = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *out.entry(w.iter().map(|s| s.to_string()).collect()).or_insert(0) += 1;
        }
    }
    out
}

pub fn caption_metrics(hypotheses: &[String], references: &[String]) -> Result<CaptionScores> {
    if hypotheses.len() != references.len() || hypotheses.is_empty() {
        return Err(Error::Contract(format!(
            "{} hypotheses for {} references",
            hypotheses.len(),
            references.len()
        )));
    }
    let mut matched = [0usize; 4];
    let mut total = [0usize; 4];
    let (mut hyp_len, mut ref_len, mut exact) = (0usize, 0usize, 0usize);
    for (h, r) in hypotheses.iter().zip(references) {
        let ht: Vec<&str> = h.split_whitespace().collect();
        let rt: Vec<&str> = r.split_whitespace().collect();
        ref_len += rt.len();
        if ht.is_empty() {
            continue;
        }
        hyp_len += ht.len();
        if ht == rt {
            exact += 1;
        }
        for n in 1..=4 {
            let rc = ngrams(&rt, n);
            for (gram, c) in ngrams(&ht, n) {
                matched[n - 1] += c.min(rc.get(&gram).copied().unwrap_or(0));
                total[n - 1] += c;
            }
        }
    }
    let bleu4 = if hyp_len == 0 || matched.iter().any(|&m| m == 0) {
        0.0
    } else {
        let log_p: f64 = (0..4).map(|i| (matched[i] as f64 / total[i] as f64).ln()).sum::<f64>() / 4.0;
        let bp = if hyp_len > ref_len {
            1.0
        } else {
            (1.0 - ref_len as f64 / hyp_len as f64).exp()
        };
        100.0 * bp * log_p.exp()
    };
    Ok(CaptionScores {
        bleu4,
        exact_match: exact as f64 / hypotheses.len() as f64,
    })
}

/// Fraction of predictions equal to their answer after trimming.
pub fn qa_accuracy(predictions: &[String], answers: &[String]) -> Result<f64> {
    if predictions.len() != answers.len() || predictions.is_empty() {
        return Err(Error::Contract(format!(
            "{} predictions for {} answers",
            predictions.len(),
            answers.len()
        )));
    }
    let hits = predictions
        .iter()
        .zip(answers)
        .filter(|(p, a)| !p.trim().is_empty() && p.trim() == a.trim())
        .count();
    Ok(hits as f64 / answers.len() as f64)
}

/// Causal fusion decoding against one item of precomputed visual features.
pub struct ModelDecoder<'a> {
    model: &'a VlabModel,
    store: &'a ParamStore,
    visual: &'a VisualTensors,
    item: usize,
}

impl<'a> ModelDecoder<'a> {
    pub fn new(model: &'a VlabModel, store: &'a ParamStore, visual: &'a VisualTensors, item: usize) -> Result<Self> {
        if item >= visual.batch {
            return Err(Error::Contract(format!("item {item} outside a batch of {}", visual.batch)));
        }
        Ok(ModelDecoder {
            model,
            store,
            visual,
            item,
        })
    }
}

impl Decoder for ModelDecoder<'_> {
    fn vocab_size(&self) -> usize {
        self.model.cfg.fusion.vocab_size
    }

    fn max_len(&self) -> usize {
        self.model.cfg.fusion.max_len
    }

    fn next_log_probs(&mut self, prefixes: &[Vec<usize>]) -> Result<Vec<Vec<f64>>> {
        let items = vec![self.item; prefixes.len()];
        let (logits, len) = self.model.causal_logits(self.store, self.visual, &items, prefixes)?;
        let v = self.vocab_size();
        let data = logits.data();
        Ok(prefixes
            .iter()
            .enumerate()
            .map(|(b, p)| {
                let row = &data[(b * len + p.len() - 1) * v..(b * len + p.len()) * v];
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
                row.iter().map(|x| x - lse).collect()
            })
            .collect())
    }
}

/// Evaluation chunk size for visual feature extraction.
const CHUNK: usize = 16;

fn threads() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get()).min(8)
}

/// Runs `f` on every index, spread over scoped threads; results keep order.
fn par_map<T: Send>(n: usize, f: impl Fn(usize) -> Result<T> + Sync) -> Result<Vec<T>> {
    let workers = threads().min(n.max(1));
    let per = n.div_ceil(workers);
    let chunks: Vec<Result<Vec<T>>> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..workers)
            .map(|w| {
                let f = &f;
                s.spawn(move || (w * per..((w + 1) * per).min(n)).map(f).collect::<Result<Vec<T>>>())
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("evaluation worker panicked")).collect()
    });
    let mut out = Vec::with_capacity(n);
    for c in chunks {
        out.extend(c?);
    }
    Ok(out)
}

/// Items whose caption is the first occurrence of that text, so every
/// retrieval query has a single correct video.
pub fn unique_caption_ids(corpus: &Corpus, ids: &[String]) -> Result<Vec<String>> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for id in ids {
        if seen.insert(corpus.entry(id)?.caption.clone()) {
            out.push(id.clone());
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct RetrievalReport {
    pub recall: Recall,
    pub items: usize,
}

/// Text-to-video retrieval from pooled encoder embeddings only.
pub fn evaluate_retrieval(
    model: &VlabModel,
    store: &ParamStore,
    corpus: &Corpus,
    ids: &[String],
    cfg: &EvalConfig,
    capped: bool,
) -> Result<RetrievalReport> {
    let ids = unique_caption_ids(corpus, ids)?;
    if ids.len() < 2 {
        return Err(Error::Data(format!("{} distinct captions; retrieval needs 2", ids.len())));
    }
    let frames = model.cfg.frames;
    let mut video_rows = Vec::new();
    let mut text_rows = Vec::new();
    for chunk in ids.chunks(CHUNK) {
        let batch = corpus.load_batch(chunk, frames, &mut FrameMode::Eval)?;
        video_rows.extend_from_slice(model.visual_tensors(store, &batch.frames)?.embedding.data());
        text_rows.extend_from_slice(model.text_embeddings(store, &batch.captions)?.data());
    }
    let d = model.cfg.embed_dim;
    let video = Tensor::new(vec![ids.len(), d], video_rows)?;
    let text = Tensor::new(vec![ids.len(), d], text_rows)?;
    let mut sim = SimMatrix::from_embeddings(&text, &video)?;
    if cfg.dual_softmax {
        sim = dual_softmax(&sim, cfg.dual_softmax_temp);
    }
    let recall = if capped {
        recall_at_k_capped(&sim, &RECALL_KS)?
    } else {
        recall_at_k(&sim, &RECALL_KS)?
    };
    Ok(RetrievalReport {
        recall,
        items: ids.len(),
    })
}

/// One generated text per item, prompted by `prompt(item)`.
fn generate_all(
    model: &VlabModel,
    store: &ParamStore,
    corpus: &Corpus,
    ids: &[String],
    cfg: &EvalConfig,
    prompt: impl Fn(&crate::data::Batch, usize) -> Vec<usize> + Sync,
) -> Result<Vec<String>> {
    let vocab = Vocab::new();
    let frames = model.cfg.frames;
    let mut out = Vec::with_capacity(ids.len());
    for chunk in ids.chunks(CHUNK) {
        let batch = corpus.load_batch(chunk, frames, &mut FrameMode::Eval)?;
        let vis = model.visual_tensors(store, &batch.frames)?;
        let texts = par_map(chunk.len(), |i| {
            let mut dec = ModelDecoder::new(model, store, &vis, i)?;
            let toks = generate(&mut dec, &prompt(&batch, i), cfg.max_len, cfg.beam)?;
            Ok(vocab.detokenize(&toks))
        })?;
        out.extend(texts);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct CaptionReport {
    pub scores: CaptionScores,
    pub hypotheses: Vec<String>,
    pub references: Vec<String>,
}

pub fn evaluate_caption(
    model: &VlabModel,
    store: &ParamStore,
    corpus: &Corpus,
    ids: &[String],
    cfg: &EvalConfig,
) -> Result<CaptionReport> {
    let hypotheses = generate_all(model, store, corpus, ids, cfg, |_, _| vec![CLS])?;
    let references = ids
        .iter()
        .map(|id| Ok(corpus.entry(id)?.caption.clone()))
        .collect::<Result<Vec<_>>>()?;
    let scores = caption_metrics(&hypotheses, &references)?;
    Ok(CaptionReport {
        scores,
        hypotheses,
        references,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct QaReport {
    pub accuracy: f64,
    pub predictions: Vec<String>,
    pub answers: Vec<String>,
}

pub fn evaluate_qa(
    model: &VlabModel,
    store: &ParamStore,
    corpus: &Corpus,
    ids: &[String],
    cfg: &EvalConfig,
) -> Result<QaReport> {
    let predictions = generate_all(model, store, corpus, ids, cfg, |b, i| VqaPlan::prompt(&b.questions[i]))?;
    let answers = ids
        .iter()
        .map(|id| Ok(corpus.entry(id)?.answer.clone()))
        .collect::<Result<Vec<_>>>()?;
    let accuracy = qa_accuracy(&predictions, &answers)?;
    Ok(QaReport {
        accuracy,
        predictions,
        answers,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Retrieval,
    Caption,
    Qa,
}

impl Task {
    pub fn name(self) -> &'static str {
        match self {
            Task::Retrieval => "retrieval",
            Task::Caption => "caption",
            Task::Qa => "qa",
        }
    }

    pub fn from_name(s: &str) -> Result<Self> {
        match s {
            "retrieval" => Ok(Task::Retrieval),
            "caption" => Ok(Task::Caption),
            "qa" => Ok(Task::Qa),
            other => Err(Error::Config(format!("unknown task {other:?}"))),
        }
    }
}

/// The results file written by `eval`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResults {
    pub task: Task,
    pub metrics: BTreeMap<String, f64>,
    pub config_hash: String,
    pub seed: u64,
}

/// Evaluates `task` on `ids` and packages the metrics.
pub fn evaluate(
    task: Task,
    run: &RunConfig,
    model: &VlabModel,
    store: &ParamStore,
    corpus: &Corpus,
    ids: &[String],
) -> Result<EvalResults> {
    let metrics = match task {
        Task::Retrieval => {
            let r = evaluate_retrieval(model, store, corpus, ids, &run.eval, false)?;
            let mut m = r.recall.to_metrics();
            m.insert("queries".into(), r.items as f64);
            m
        }
        Task::Caption => {
            let c = evaluate_caption(model, store, corpus, ids, &run.eval)?;
            BTreeMap::from([
                ("BLEU@4".to_string(), c.scores.bleu4),
                ("EM".to_string(), c.scores.exact_match),
            ])
        }
        Task::Qa => {
            let q = evaluate_qa(model, store, corpus, ids, &run.eval)?;
            BTreeMap::from([("accuracy".to_string(), q.accuracy)])
        }
    };
    Ok(EvalResults {
        task,
        metrics,
        config_hash: run.hash(),
        seed: run.seed,
    })
}
