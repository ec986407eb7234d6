//! Mini language model: word-level vocabulary, sentence-pair tokenizer,
//! encoder stack producing contextual token embeddings, and toy masked
//! language model pretraining.

use alloc::collections::BTreeMap;
use core::cmp::Reverse;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{add_position_embeddings, AttentionMask, EncoderBlock, EncoderBlockConfig, LayerNorm};
use crate::optim::{lr_schedule, AdamW, AdamWConfig};
use crate::param::{Init, ParamId, ParamStore};
use crate::rng::{self, tag};
use crate::{Error, Graph, Real, Result, Var};

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const CLS: u32 = 2;
pub const SEP: u32 = 3;
pub const MASK: u32 = 4;
pub const SPECIALS: [&str; 5] = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"];

/// Target placeholder written into the text in place of the sentiment target.
pub const PLACEHOLDER: &str = "$T$";

/// Splits text into lowercase word tokens. Whitespace separates words and
/// every other non-alphanumeric character is a token of its own. With
/// `keep_placeholder`, `$T$` survives as one token.
pub fn split_words(text: &str, keep_placeholder: bool) -> Vec<String> {
    let mut out = Vec::new();
    let mut word = String::new();
    let mut rest = text;
    let flush = |word: &mut String, out: &mut Vec<String>| {
        if !word.is_empty() {
            out.push(core::mem::take(word));
        }
    };
    while let Some(c) = rest.chars().next() {
        if keep_placeholder && rest.starts_with(PLACEHOLDER) {
            flush(&mut word, &mut out);
            out.push(PLACEHOLDER.to_string());
            rest = &rest[PLACEHOLDER.len()..];
            continue;
        }
        if c.is_whitespace() {
            flush(&mut word, &mut out);
        } else if c.is_alphanumeric() {
            word.extend(c.to_lowercase());
        } else {
            flush(&mut word, &mut out);
            out.push(c.to_string());
        }
        rest = &rest[c.len_utf8()..];
    }
    flush(&mut word, &mut out);
    out
}

/// Dense token ids with the five specials at 0..5. A vocabulary that
/// contains [`PLACEHOLDER`] tokenizes it as a single token.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: BTreeMap<String, u32>,
}

impl Vocabulary {
    /// Rebuilds a vocabulary from its id-ordered token list.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < SPECIALS.len() || tokens[..SPECIALS.len()] != SPECIALS {
            return Err(Error::Config("vocabulary must start with the special tokens".into()));
        }
        let mut index = BTreeMap::new();
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(Error::Config(format!("duplicate vocabulary token {t:?}")));
            }
        }
        Ok(Vocabulary { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Total lookup: unknown words map to [`UNK`].
    pub fn id(&self, token: &str) -> u32 {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn keeps_placeholder(&self) -> bool {
        self.contains(PLACEHOLDER)
    }
}

/// Frequency-ranked word vocabulary, ties broken lexicographically, truncated
/// to `max_size` entries including the specials.
pub fn build_vocab<'a, I>(corpus: I, max_size: usize, keep_placeholder: bool) -> Result<Vocabulary>
where
    I: IntoIterator<Item = &'a str>,
{
    if max_size < SPECIALS.len() + 1 {
        return Err(Error::VocabTooSmall(max_size));
    }
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    let mut lines = 0;
    for line in corpus {
        lines += 1;
        for w in split_words(line, keep_placeholder) {
            *counts.entry(w).or_default() += 1;
        }
    }
    if lines == 0 {
        return Err(Error::Empty("corpus"));
    }
    let mut ranked: Vec<(String, usize)> = counts
        .into_iter()
        .filter(|(w, _)| !SPECIALS.contains(&w.as_str()))
        .collect();
    // BTreeMap iteration is already lexicographic; a stable sort by count keeps it as the tie-break.
    ranked.sort_by_key(|&(_, c)| Reverse(c));
    let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
    tokens.extend(ranked.into_iter().take(max_size - SPECIALS.len()).map(|(w, _)| w));
    Vocabulary::from_tokens(tokens)
}

/// Token ids, keep mask and segment ids of one (possibly paired) sequence,
/// padded to a fixed length.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
    pub mask: Vec<bool>,
    pub segments: Vec<u8>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Positions of target tokens (second segment, excluding its SEP).
    pub fn target_positions(&self) -> Vec<usize> {
        (0..self.len())
            .filter(|&i| self.mask[i] && self.segments[i] == 1 && self.ids[i] != SEP)
            .collect()
    }
}

/// `[CLS] text [SEP]`, plus `target [SEP]` in segment 1 when a target is
/// given. Over-long input loses text tokens first, then target tokens; the
/// closing SEPs are always kept.
pub fn tokenize(text: &str, target: Option<&str>, vocab: &Vocabulary, max_len: usize) -> TokenSequence {
    assert!(max_len >= 2, "max_len must fit [CLS] and [SEP]");
    let keep = vocab.keeps_placeholder();
    let to_ids = |s: &str| -> Vec<u32> { split_words(s, keep).iter().map(|w| vocab.id(w)).collect() };
    let mut text_ids = to_ids(text);
    let mut target_ids = match target {
        Some(t) if max_len >= 4 => Some(to_ids(t)),
        _ => None,
    };
    let specials = 2 + usize::from(target_ids.is_some());
    let avail = max_len - specials;
    let tlen = target_ids.as_ref().map_or(0, Vec::len);
    if text_ids.len() + tlen > avail {
        text_ids.truncate(avail.saturating_sub(tlen));
        if let Some(t) = target_ids.as_mut() {
            t.truncate(avail - text_ids.len());
        }
    }
    let mut ids = Vec::with_capacity(max_len);
    let mut segments = Vec::with_capacity(max_len);
    ids.push(CLS);
    ids.extend(&text_ids);
    ids.push(SEP);
    segments.resize(ids.len(), 0);
    if let Some(t) = target_ids {
        ids.extend(&t);
        ids.push(SEP);
        segments.resize(ids.len(), 1);
    }
    let real = ids.len();
    ids.resize(max_len, PAD);
    segments.resize(max_len, 0);
    let mask = (0..max_len).map(|i| i < real).collect();
    TokenSequence { ids, mask, segments }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LmConfig {
    pub vocab_size: usize,
    pub hidden_dim: usize,
    pub depth: usize,
    pub num_heads: usize,
    pub mlp_ratio: usize,
    pub max_len: usize,
}

/// Parameter handles of the language model inside a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct LanguageModel {
    pub cfg: LmConfig,
    pub token_embed: ParamId,
    pub position: ParamId,
    pub segment: ParamId,
    pub blocks: Vec<EncoderBlock>,
    pub mlm_norm: LayerNorm,
    pub mlm_bias: ParamId,
}

impl LanguageModel {
    /// Registers all LM parameters under `prefix` (e.g. `"lm"`).
    pub fn register<F: Real>(store: &mut ParamStore<F>, prefix: &str, cfg: LmConfig, init: &mut Init<'_>) -> Result<Self> {
        let block_cfg = EncoderBlockConfig {
            hidden_dim: cfg.hidden_dim,
            num_heads: cfg.num_heads,
            mlp_ratio: cfg.mlp_ratio,
        };
        block_cfg.validate()?;
        if cfg.vocab_size <= SPECIALS.len() {
            return Err(Error::VocabTooSmall(cfg.vocab_size));
        }
        let d = cfg.hidden_dim;
        let token_embed = store.add_normal(format!("{prefix}.token_embed"), &[cfg.vocab_size, d], init);
        let position = store.add_normal(format!("{prefix}.position"), &[cfg.max_len, d], init);
        let segment = store.add_normal(format!("{prefix}.segment"), &[2, d], init);
        let blocks = (0..cfg.depth)
            .map(|i| EncoderBlock::register(store, &format!("{prefix}.block{i}"), &block_cfg, init))
            .collect::<Result<Vec<_>>>()?;
        let mlm_norm = LayerNorm::register(store, &format!("{prefix}.mlm.ln"), d);
        let mlm_bias = store.add_zeros(format!("{prefix}.mlm.bias"), &[cfg.vocab_size]);
        Ok(LanguageModel {
            cfg,
            token_embed,
            position,
            segment,
            blocks,
            mlm_norm,
            mlm_bias,
        })
    }

    /// Contextual embeddings `[L, d]` for every position of `seq`.
    pub fn forward<F: Real>(&self, g: &mut Graph<F>, s: &ParamStore<F>, seq: &TokenSequence) -> Result<Var> {
        let v = self.cfg.vocab_size;
        if let Some(&bad) = seq.ids.iter().find(|&&id| id as usize >= v) {
            return Err(Error::TokenOutOfRange {
                id: bad as usize,
                size: v,
            });
        }
        let rows: Vec<usize> = seq.ids.iter().map(|&i| i as usize).collect();
        let table = g.param(s, self.token_embed);
        let x = g.select_rows(table, &rows)?;
        let x = add_position_embeddings(g, s, x, self.position)?;
        let seg_table = g.param(s, self.segment);
        let seg_rows: Vec<usize> = seq.segments.iter().map(|&i| i as usize).collect();
        let seg = g.select_rows(seg_table, &seg_rows)?;
        let mut x = g.add(x, seg)?;
        if self.blocks.is_empty() {
            return Ok(x);
        }
        let (l, d) = (seq.len(), self.cfg.hidden_dim);
        let mask = AttentionMask::from_keep(&seq.mask)?;
        x = g.reshape(x, &[1, l, d])?;
        for b in &self.blocks {
            x = b.forward(g, s, x, &mask)?;
        }
        g.reshape(x, &[l, d])
    }

    /// Vocabulary logits `[positions.len(), V]` for the given rows of the LM
    /// output; the decoder is tied to the token embedding table.
    pub fn mlm_logits<F: Real>(&self, g: &mut Graph<F>, s: &ParamStore<F>, hidden: Var, positions: &[usize]) -> Result<Var> {
        let h = g.select_rows(hidden, positions)?;
        let h = self.mlm_norm.forward(g, s, h)?;
        let table = g.param(s, self.token_embed);
        let decoder = g.transpose(table)?;
        let logits = g.matmul(h, decoder)?;
        let bias = g.param(s, self.mlm_bias);
        g.add(logits, bias)
    }
}

/// A sequence with some positions replaced by [`MASK`].
#[derive(Clone, Debug)]
pub struct MaskedSequence {
    pub input: TokenSequence,
    pub positions: Vec<usize>,
    pub targets: Vec<usize>,
}

/// Replaces each non-special, non-pad token with [`MASK`] with probability
/// `mask_prob`.
pub fn mask_tokens<R: Rng + ?Sized>(seq: &TokenSequence, mask_prob: f64, rng: &mut R) -> MaskedSequence {
    let mut input = seq.clone();
    let mut positions = Vec::new();
    let mut targets = Vec::new();
    for i in 0..seq.len() {
        let id = seq.ids[i];
        if !seq.mask[i] || (id as usize) < SPECIALS.len() && id != UNK {
            continue;
        }
        if rng.gen::<f64>() < mask_prob {
            input.ids[i] = MASK;
            positions.push(i);
            targets.push(id as usize);
        }
    }
    MaskedSequence {
        input,
        positions,
        targets,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MlmConfig {
    pub steps: usize,
    pub mask_prob: f64,
    pub batch_size: usize,
    pub peak_lr: f64,
    pub warmup_fraction: f64,
    pub seed: u64,
}

impl Default for MlmConfig {
    fn default() -> Self {
        MlmConfig {
            steps: 200,
            mask_prob: 0.15,
            batch_size: 8,
            peak_lr: 1e-3,
            warmup_fraction: 0.1,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MlmReport {
    /// Mean masked-token loss of each step; 0 when nothing was masked.
    pub step_losses: Vec<f64>,
    pub initial_loss: f64,
    /// Mean loss over the steps of the last pass through the corpus.
    pub final_epoch_loss: f64,
}

/// Trains the LM (and only the LM) to recover masked tokens. Steps whose
/// batch has no masked position record a loss of 0 and do not update.
pub fn mlm_pretrain<F: Real>(
    lm: &LanguageModel,
    store: &mut ParamStore<F>,
    corpus: &[TokenSequence],
    cfg: &MlmConfig,
) -> Result<MlmReport> {
    if corpus.is_empty() {
        return Err(Error::Empty("MLM corpus"));
    }
    let batch = cfg.batch_size.max(1).min(corpus.len());
    let steps_per_epoch = corpus.len().div_ceil(batch);
    let mut opt = AdamW::new(AdamWConfig::default());
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let epoch = step / steps_per_epoch;
        let in_epoch = step % steps_per_epoch;
        if in_epoch == 0 {
            order = (0..corpus.len()).collect();
            order.shuffle(&mut rng::stream(cfg.seed, &[tag::SHUFFLE, epoch as u64]));
        }
        let mut mask_rng = rng::stream(cfg.seed, &[tag::MLM_MASK, step as u64]);
        let members = &order[in_epoch * batch..((in_epoch + 1) * batch).min(order.len())];
        let masked: Vec<MaskedSequence> = members
            .iter()
            .map(|&i| mask_tokens(&corpus[i], cfg.mask_prob, &mut mask_rng))
            .collect();
        let total: usize = masked.iter().map(|m| m.positions.len()).sum();
        if total == 0 {
            losses.push(0.0);
            continue;
        }
        store.zero_grad();
        let mut step_loss = 0.0;
        for m in masked.iter().filter(|m| !m.positions.is_empty()) {
            let mut g = Graph::new();
            let hidden = lm.forward(&mut g, store, &m.input)?;
            let logits = lm.mlm_logits(&mut g, store, hidden, &m.positions)?;
            let ce = g.cross_entropy(logits, &m.targets)?;
            let weight = m.positions.len() as f64 / total as f64;
            let loss = g.scale(ce, weight);
            step_loss += g.value(loss).data()[0].to_f64();
            g.backward_into(loss, store)?;
        }
        losses.push(step_loss);
        let lr = lr_schedule(step, cfg.steps, cfg.peak_lr, cfg.warmup_fraction)?;
        opt.step(store, lr);
    }
    store.zero_grad();
    let last_epoch_start = losses.len().saturating_sub(steps_per_epoch);
    let tail = &losses[last_epoch_start..];
    Ok(MlmReport {
        initial_loss: losses.first().copied().unwrap_or(0.0),
        final_epoch_loss: if tail.is_empty() {
            0.0
        } else {
            tail.iter().sum::<f64>() / tail.len() as f64
        },
        step_losses: losses,
    })
}

/// Fraction of maskable positions recovered when each is masked on its own.
pub fn mlm_accuracy<F: Real>(lm: &LanguageModel, store: &ParamStore<F>, corpus: &[TokenSequence]) -> Result<f64> {
    let (mut hit, mut total) = (0usize, 0usize);
    for seq in corpus {
        for i in 0..seq.len() {
            let id = seq.ids[i];
            if !seq.mask[i] || ((id as usize) < SPECIALS.len() && id != UNK) {
                continue;
            }
            let mut input = seq.clone();
            input.ids[i] = MASK;
            let mut g = Graph::new();
            let hidden = lm.forward(&mut g, store, &input)?;
            let logits = lm.mlm_logits(&mut g, store, hidden, &[i])?;
            if argmax(g.value(logits).data()) == id as usize {
                hit += 1;
            }
            total += 1;
        }
    }
    Ok(if total == 0 { 0.0 } else { hit as f64 / total as f64 })
}

pub(crate) fn argmax<F: Real>(xs: &[F]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}
