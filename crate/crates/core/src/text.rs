//! Causal text encoder pooled at the [EOS] position.

use diffcore::{Graph, ParamStore, ParamVars, Var};
use rand::Rng;

use crate::data::{EOS, PAD};
use crate::error::{Error, Result};
use crate::nn::{normal_tensor, AttentionMask, BranchScale, LayerNorm, Linear, Segments, TransformerBlock};

/// Token ids of one sentence, ending in exactly one [EOS], without padding.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct TokenSeq {
    ids: Vec<usize>,
}

impl TokenSeq {
    pub fn new(ids: Vec<usize>, vocab_size: usize) -> Result<Self> {
        if let Some(&bad) = ids.iter().find(|&&i| i >= vocab_size) {
            return Err(Error::Data(format!("token id {bad} outside vocabulary of {vocab_size}")));
        }
        let eos = ids.iter().filter(|&&i| i == EOS).count();
        if eos != 1 || ids.last() != Some(&EOS) {
            return Err(Error::Data(format!(
                "sequence must end in exactly one [EOS], got {ids:?}"
            )));
        }
        if ids.contains(&PAD) {
            return Err(Error::Data("unpadded sequence contains [PAD]".into()));
        }
        Ok(TokenSeq { ids })
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn eos_position(&self) -> usize {
        self.ids.len() - 1
    }

    /// Keeps at most `max` tokens, the last of which stays [EOS].
    pub fn truncated(mut self, max: usize) -> Self {
        if self.ids.len() > max && max >= 1 {
            log::warn!("truncating a {}-token sequence to {max}", self.ids.len());
            self.ids.truncate(max - 1);
            self.ids.push(EOS);
        }
        self
    }

    /// Ids right-padded with [PAD] to `len`, and the 0/1 pad mask (1 = real).
    pub fn padded(&self, len: usize) -> (Vec<usize>, Vec<f64>) {
        let mut ids = self.ids.clone();
        let mut mask = vec![1.0; ids.len()];
        ids.resize(len, PAD);
        mask.resize(len, 0.0);
        (ids, mask)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TextConfig {
    pub vocab_size: usize,
    pub max_len: usize,
    pub width: usize,
    pub depth: usize,
    pub heads: usize,
    pub ffn_ratio: usize,
}

impl Default for TextConfig {
    fn default() -> Self {
        TextConfig {
            vocab_size: crate::data::VOCAB_SIZE,
            max_len: 16,
            width: 32,
            depth: 2,
            heads: 2,
            ffn_ratio: 4,
        }
    }
}

/// Token states `(B·L) × width` for `B` sequences padded to `L`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TextStates {
    pub var: Var,
    pub batch: usize,
    pub len: usize,
}

#[derive(Clone, Debug)]
pub struct TextEncoder {
    pub cfg: TextConfig,
    pub embed: String,
    pub pos: String,
    pub blocks: Vec<TransformerBlock>,
    pub ln_final: LayerNorm,
    pub proj: Linear,
}

impl TextEncoder {
    pub fn new(prefix: &str, proj_name: &str, cfg: &TextConfig, embed_dim: usize) -> Result<Self> {
        let blocks = (0..cfg.depth)
            .map(|i| TransformerBlock::new(&format!("{prefix}.blocks.{i}"), cfg.width, cfg.heads, cfg.ffn_ratio))
            .collect::<Result<Vec<_>>>()?;
        Ok(TextEncoder {
            cfg: cfg.clone(),
            embed: format!("{prefix}.embed"),
            pos: format!("{prefix}.pos"),
            blocks,
            ln_final: LayerNorm::new(&format!("{prefix}.ln_final"), cfg.width),
            proj: Linear::new(proj_name, cfg.width, embed_dim),
        })
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        let std = 1.0 / (self.cfg.width as f64).sqrt();
        store.insert(&self.embed, normal_tensor(vec![self.cfg.vocab_size, self.cfg.width], std, rng));
        store.insert(&self.pos, normal_tensor(vec![self.cfg.max_len, self.cfg.width], std, rng));
        for b in &self.blocks {
            b.init(store, rng);
        }
        self.ln_final.init(store);
        self.proj.init(store, rng);
    }

    /// Causal encoding of a batch padded to its longest sequence.
    pub fn encode(&self, g: &mut Graph, p: &ParamVars, seqs: &[TokenSeq]) -> Result<TextStates> {
        if seqs.is_empty() {
            return Err(Error::Contract("empty text batch".into()));
        }
        let len = seqs.iter().map(TokenSeq::len).max().unwrap_or(0);
        if len > self.cfg.max_len {
            return Err(Error::Contract(format!(
                "sequence of {len} tokens exceeds max length {}",
                self.cfg.max_len
            )));
        }
        let mut ids = Vec::with_capacity(seqs.len() * len);
        for s in seqs {
            ids.extend(s.padded(len).0);
        }
        let tok = g.embedding(p.get(&self.embed)?, &ids)?;
        let pos_rows: Vec<usize> = (0..ids.len()).map(|r| r % len).collect();
        let pos = g.embedding(p.get(&self.pos)?, &pos_rows)?;
        let mut x = g.add(tok, pos)?;
        let seg = Segments::new(seqs.len(), len);
        let keep = [BranchScale::KEEP, BranchScale::KEEP];
        for b in &self.blocks {
            x = b.forward_segmented(g, p, x, seg, &[AttentionMask::causal()], &keep)?;
        }
        let x = self.ln_final.forward(g, p, x)?;
        Ok(TextStates {
            var: x,
            batch: seqs.len(),
            len,
        })
    }

    /// States plus the L2-normalized [EOS] embedding, `B × embed_dim`.
    pub fn encode_text(&self, g: &mut Graph, p: &ParamVars, seqs: &[TokenSeq]) -> Result<(TextStates, Var)> {
        let states = self.encode(g, p, seqs)?;
        let eos: Vec<usize> = seqs
            .iter()
            .enumerate()
            .map(|(i, s)| i * states.len + s.eos_position())
            .collect();
        let pooled = g.embedding(states.var, &eos)?;
        let pooled = self.proj.forward(g, p, pooled)?;
        let pooled = g.l2_normalize_rows(pooled)?;
        Ok((states, pooled))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Vocab;
    use diffcore::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn encoder(seed: u64) -> (TextEncoder, ParamStore) {
        let enc = TextEncoder::new("text", "proj.text", &TextConfig::default(), 32).unwrap();
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        enc.init(&mut store, &mut rng);
        (enc, store)
    }

    fn run(enc: &TextEncoder, store: &ParamStore, seqs: &[TokenSeq]) -> (Tensor, Tensor, usize) {
        let mut g = Graph::new();
        let p = store.bind(&mut g, |_| false);
        let (states, pooled) = enc.encode_text(&mut g, &p, seqs).unwrap();
        (g.tensor(states.var), g.tensor(pooled), states.len)
    }

    fn seq(text: &str) -> TokenSeq {
        Vocab::new().tokenize(text)
    }

    #[test]
    fn token_seq_contract() {
        assert!(TokenSeq::new(vec![7, 8, EOS], 64).is_ok());
        assert!(TokenSeq::new(vec![7, 8], 64).is_err());
        assert!(TokenSeq::new(vec![EOS, 7, EOS], 64).is_err());
        assert!(TokenSeq::new(vec![70, EOS], 64).is_err());
        let long = TokenSeq::new((6..26).chain([EOS]).collect(), 64).unwrap();
        let cut = long.truncated(16);
        assert_eq!(cut.len(), 16);
        assert_eq!(cut.ids()[15], EOS);
        assert_eq!(cut.ids()[..15], (6..21).collect::<Vec<_>>()[..]);
    }

    #[test]
    fn identical_sequences_pool_identically_with_unit_norm() {
        let (enc, store) = encoder(1);
        let s = seq("a red square moving left slow");
        let (_, pooled, _) = run(&enc, &store, &[s.clone(), s]);
        assert_eq!(pooled.row(0), pooled.row(1));
        for i in 0..2 {
            let n: f64 = pooled.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn padding_never_reaches_the_pooled_output() {
        let (enc, store) = encoder(2);
        let short = seq("a red square");
        let long = seq("what color is the circle moving up fast");
        let (_, alone, _) = run(&enc, &store, std::slice::from_ref(&short));
        let (_, padded, _) = run(&enc, &store, &[short, long]);
        assert_eq!(alone.row(0), padded.row(0));
    }

    #[test]
    fn later_tokens_never_change_earlier_states() {
        let (enc, store) = encoder(3);
        let base = seq("a red square moving left slow");
        let (states, _, len) = run(&enc, &store, std::slice::from_ref(&base));
        for k in 0..base.len() - 1 {
            let mut ids = base.ids().to_vec();
            ids[k] = if ids[k] == 10 { 11 } else { 10 };
            let edited = TokenSeq::new(ids, 64).unwrap();
            let (other, _, _) = run(&enc, &store, &[edited]);
            for pos in 0..len {
                let same = states.row(pos) == other.row(pos);
                assert_eq!(same, pos < k, "edit at {k}, position {pos}");
            }
        }
    }
}
