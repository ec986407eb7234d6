//! From a manifest to tokenized train/validation/test sets.

use vault_core::data::split;
use vault_core::image::RgbImage;
use vault_core::lm::{build_vocab, tokenize, Vocabulary};
use vault_core::text::{normalize_text, EmojiTable};
use vault_core::train::PreparedExample;
use vault_core::vlm::{ModelConfig, Variant};

use crate::config::{DataConfig, RunConfig};
use crate::manifest::{load_manifest, Excluded, LoadedExample};
use crate::textfiles::load_emoji_table;
use crate::Result;

/// An example after target substitution and optional normalization.
#[derive(Clone, Debug)]
pub struct TextExample {
    pub id: String,
    pub text: String,
    pub target: Option<String>,
    pub label: usize,
    pub image: RgbImage,
}

impl TextExample {
    /// Text and target joined, as seen by a vocabulary builder.
    pub fn corpus_line(&self) -> String {
        match &self.target {
            Some(t) => format!("{} {}", self.text, t),
            None => self.text.clone(),
        }
    }
}

pub fn text_examples(loaded: Vec<LoadedExample>, emojis: Option<&EmojiTable>) -> Vec<TextExample> {
    loaded
        .into_iter()
        .map(|LoadedExample { example, image }| {
            let norm = |s: String| match emojis {
                Some(t) => normalize_text(&s, t),
                None => s,
            };
            TextExample {
                id: example.id,
                text: norm(example.text),
                target: example.target.map(norm),
                label: example.label.index(),
                image,
            }
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct Splits {
    pub train: Vec<TextExample>,
    pub val: Vec<TextExample>,
    pub test: Vec<TextExample>,
    pub excluded: Vec<Excluded>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SplitName {
    Train,
    Val,
    Test,
}

impl SplitName {
    pub fn as_str(self) -> &'static str {
        match self {
            SplitName::Train => "train",
            SplitName::Val => "val",
            SplitName::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<SplitName> {
        match s {
            "train" => Some(SplitName::Train),
            "val" => Some(SplitName::Val),
            "test" => Some(SplitName::Test),
            _ => None,
        }
    }
}

impl Splits {
    pub fn get(&self, name: SplitName) -> &[TextExample] {
        match name {
            SplitName::Train => &self.train,
            SplitName::Val => &self.val,
            SplitName::Test => &self.test,
        }
    }
}

/// Loads, normalizes and splits the configured manifest.
pub fn load_splits(cfg: &RunConfig) -> Result<Splits> {
    let manifest = load_manifest(cfg.manifest()?)?;
    let emojis = match (&cfg.data.emoji_table, cfg.data.normalize) {
        (_, false) => None,
        (Some(p), true) => Some(load_emoji_table(p)?),
        (None, true) => Some(EmojiTable::new()),
    };
    let examples = text_examples(manifest.examples, emojis.as_ref());
    let (train, val, test) = split(examples, cfg.data.split_seed)?;
    Ok(Splits {
        train,
        val,
        test,
        excluded: manifest.excluded,
    })
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabs {
    pub vlm: Vocabulary,
    pub lm: Vocabulary,
}

impl Vocabs {
    /// The VLM's own vocabulary comes from the first
    /// `ceil(vlm_vocab_fraction * |train|)` training examples; the LM's from
    /// all of them.
    pub fn build(train: &[TextExample], data: &DataConfig) -> Result<Vocabs> {
        let lines: Vec<String> = train.iter().map(TextExample::corpus_line).collect();
        let take = ((data.vlm_vocab_fraction * lines.len() as f64).ceil() as usize).clamp(1, lines.len().max(1));
        let vlm = build_vocab(lines[..take.min(lines.len())].iter().map(String::as_str), data.max_vocab, data.vlm_placeholder_token)?;
        let lm = build_vocab(lines.iter().map(String::as_str), data.max_vocab, data.lm_placeholder_token)?;
        Ok(Vocabs { vlm, lm })
    }

    /// The vocabulary that feeds the language stream of `variant`.
    pub fn for_variant(&self, variant: Variant) -> &Vocabulary {
        match variant {
            Variant::Vilt | Variant::TomVilt => &self.vlm,
            Variant::Vault | Variant::TomVault => &self.lm,
        }
    }

    /// `model` with its vocabulary sizes set to these vocabularies.
    pub fn sized(&self, model: &ModelConfig) -> ModelConfig {
        ModelConfig {
            vlm_vocab_size: self.vlm.len(),
            lm_vocab_size: self.lm.len(),
            ..model.clone()
        }
    }
}

pub fn prepare(examples: &[TextExample], vocab: &Vocabulary, max_len: usize) -> Vec<PreparedExample> {
    examples
        .iter()
        .map(|e| PreparedExample {
            id: e.id.clone(),
            tokens: tokenize(&e.text, e.target.as_deref(), vocab, max_len),
            image: e.image.clone(),
            label: e.label,
        })
        .collect()
}
