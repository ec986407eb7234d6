//! The joint vision-and-language model.
//!
//! The language stream is either a lookup table over the model's own
//! vocabulary or the output sequence of the attached [`LanguageModel`]. The
//! visual stream is either a linear projection of flattened patches or a
//! small strided convolution stack; with an attached LM the convolution
//! features are queried by the target-token embeddings through one
//! cross-attention layer. The joint encoder sees
//! `[class token][language][visual]`.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::encoder::{
    add_position_embeddings, attention, AttentionMask, AttentionOutput, AttentionParams, EncoderBlock,
    EncoderBlockConfig, LayerNorm, Linear,
};
use crate::gradcheck::{check_parameters, CheckOptions, ParamCheck};
use crate::lm::{build_vocab, tokenize, LanguageModel, LmConfig, TokenSequence};
use crate::param::{Init, ParamId, ParamStore};
use crate::rng::{self, tag};
use crate::{Error, Graph, Real, Result, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LanguageMode {
    Lookup,
    External,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VisualMode {
    PatchLinear,
    DeepConv,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Vilt,
    Vault,
    TomVilt,
    TomVault,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Vilt, Variant::Vault, Variant::TomVilt, Variant::TomVault];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Vilt => "vilt",
            Variant::Vault => "vault",
            Variant::TomVilt => "tomvilt",
            Variant::TomVault => "tomvault",
        }
    }

    pub fn parse(s: &str) -> Option<Variant> {
        Variant::ALL.into_iter().find(|v| v.name() == s)
    }

    pub fn modes(self) -> (LanguageMode, VisualMode) {
        match self {
            Variant::Vilt => (LanguageMode::Lookup, VisualMode::PatchLinear),
            Variant::Vault => (LanguageMode::External, VisualMode::PatchLinear),
            Variant::TomVilt => (LanguageMode::Lookup, VisualMode::DeepConv),
            Variant::TomVault => (LanguageMode::External, VisualMode::DeepConv),
        }
    }

    pub fn from_modes(language: LanguageMode, visual: VisualMode) -> Variant {
        Variant::ALL
            .into_iter()
            .find(|v| v.modes() == (language, visual))
            .expect("every mode pair is a variant")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub language_mode: LanguageMode,
    pub visual_mode: VisualMode,
    pub d_vlm: usize,
    pub d_lm: usize,
    pub patch_size: usize,
    pub vlm_depth: usize,
    pub lm_depth: usize,
    pub num_classes: usize,
    /// Learned `d_lm -> d_vlm` map on the LM outputs.
    pub adapter_enabled: bool,
    pub num_heads: usize,
    pub mlp_ratio: usize,
    /// Token sequence length for both tokenizers.
    pub max_text_len: usize,
    /// Side of the square (cropped) input image.
    pub image_size: usize,
    pub conv_channels: [usize; 3],
    pub vlm_vocab_size: usize,
    pub lm_vocab_size: usize,
    pub init_std: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            language_mode: LanguageMode::External,
            visual_mode: VisualMode::PatchLinear,
            d_vlm: 64,
            d_lm: 64,
            patch_size: 8,
            vlm_depth: 2,
            lm_depth: 2,
            num_classes: 3,
            adapter_enabled: false,
            num_heads: 4,
            mlp_ratio: 4,
            max_text_len: 16,
            image_size: 32,
            conv_channels: [16, 32, 64],
            vlm_vocab_size: 512,
            lm_vocab_size: 512,
            init_std: 0.02,
        }
    }
}

/// Total stride of the convolution stack.
pub const CONV_STRIDE: usize = 8;

impl ModelConfig {
    pub fn variant(&self) -> Variant {
        Variant::from_modes(self.language_mode, self.visual_mode)
    }

    pub fn with_variant(mut self, v: Variant) -> Self {
        (self.language_mode, self.visual_mode) = v.modes();
        self
    }

    pub fn has_lm(&self) -> bool {
        self.language_mode == LanguageMode::External
    }

    pub fn block_config(&self) -> EncoderBlockConfig {
        EncoderBlockConfig {
            hidden_dim: self.d_vlm,
            num_heads: self.num_heads,
            mlp_ratio: self.mlp_ratio,
        }
    }

    pub fn lm_config(&self) -> LmConfig {
        LmConfig {
            vocab_size: self.lm_vocab_size,
            hidden_dim: self.d_lm,
            depth: self.lm_depth,
            num_heads: self.num_heads,
            mlp_ratio: self.mlp_ratio,
            max_len: self.max_text_len,
        }
    }

    /// Number of visual-encoder outputs (patches or conv regions).
    pub fn visual_regions(&self) -> usize {
        let side = match self.visual_mode {
            VisualMode::PatchLinear => self.image_size / self.patch_size.max(1),
            VisualMode::DeepConv => self.image_size / CONV_STRIDE,
        };
        side * side
    }

    /// Longest visual stream the joint encoder can receive.
    pub fn max_visual_len(&self) -> usize {
        match self.variant() {
            Variant::TomVault => self.visual_regions().max(self.max_text_len),
            _ => self.visual_regions(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.block_config().validate()?;
        let divisor = match self.visual_mode {
            VisualMode::PatchLinear => self.patch_size,
            VisualMode::DeepConv => CONV_STRIDE,
        };
        if divisor == 0 || self.image_size == 0 || !self.image_size.is_multiple_of(divisor) {
            return Err(Error::IndivisibleImage {
                height: self.image_size,
                width: self.image_size,
                divisor,
            });
        }
        if self.num_classes < 2 || self.max_text_len < 2 || self.conv_channels.contains(&0) {
            return Err(Error::Config(
                "num_classes, max_text_len and conv_channels must be large enough to be usable".into(),
            ));
        }
        if self.has_lm() {
            if !self.adapter_enabled && self.d_lm != self.d_vlm {
                return Err(Error::Config(format!(
                    "d_lm {} differs from d_vlm {} and the adapter is disabled",
                    self.d_lm, self.d_vlm
                )));
            }
            EncoderBlockConfig {
                hidden_dim: self.d_lm,
                ..self.block_config()
            }
            .validate()?;
        }
        Ok(())
    }
}

/// Three stride-2, 3x3, padding-1 convolutions with GELU, then a linear map
/// of each output position to the model width.
#[derive(Clone, Debug)]
pub struct ConvStack {
    pub layers: [Linear; 3],
    pub projection: Linear,
}

/// Output side for a stride-2, 3x3, padding-1 convolution.
fn conv_out(n: usize) -> usize {
    n.div_ceil(2)
}

/// im2col gather indices for a stride-2, 3x3, padding-1 convolution over a
/// channels-last `[h, w, c]` input; each output row lists its 3x3xc window
/// in `(ky, kx, c)` order, with `None` for padding.
fn im2col_index(h: usize, w: usize, c: usize) -> Vec<Option<usize>> {
    let (ho, wo) = (conv_out(h), conv_out(w));
    let mut index = Vec::with_capacity(ho * wo * 9 * c);
    for oy in 0..ho {
        for ox in 0..wo {
            for ky in 0..3 {
                for kx in 0..3 {
                    let iy = (oy * 2 + ky).checked_sub(1).filter(|&y| y < h);
                    let ix = (ox * 2 + kx).checked_sub(1).filter(|&x| x < w);
                    for ch in 0..c {
                        index.push(match (iy, ix) {
                            (Some(y), Some(x)) => Some((y * w + x) * c + ch),
                            _ => None,
                        });
                    }
                }
            }
        }
    }
    index
}

impl ConvStack {
    pub fn register<F: Real>(store: &mut ParamStore<F>, name: &str, channels: [usize; 3], out: usize, init: &mut Init<'_>) -> Self {
        let ins = [3, channels[0], channels[1]];
        let layers = core::array::from_fn(|i| {
            Linear::register(store, &format!("{name}.conv{i}"), 9 * ins[i], channels[i], true, init)
        });
        let projection = Linear::register(store, &format!("{name}.conv_proj"), channels[2], out, true, init);
        ConvStack { layers, projection }
    }

    /// `[H, W, 3]` image to `[H/8 * W/8, d]` region features, row-major.
    pub fn forward<F: Real>(&self, g: &mut Graph<F>, s: &ParamStore<F>, image: Var) -> Result<Var> {
        let shape = g.shape(image).to_vec();
        if shape.len() != 3 || shape[2] != 3 || !shape[0].is_multiple_of(CONV_STRIDE) || !shape[1].is_multiple_of(CONV_STRIDE) {
            return Err(Error::IndivisibleImage {
                height: shape[0],
                width: shape.get(1).copied().unwrap_or(0),
                divisor: CONV_STRIDE,
            });
        }
        let (mut h, mut w) = (shape[0], shape[1]);
        let mut x = image;
        let mut c = 3;
        for layer in &self.layers {
            let cols = g.gather(x, im2col_index(h, w, c), &[conv_out(h) * conv_out(w), 9 * c])?;
            let y = layer.forward(g, s, cols)?;
            x = g.gelu(y);
            (h, w) = (conv_out(h), conv_out(w));
            c = g.shape(x)[1];
        }
        self.projection.forward(g, s, x)
    }
}

/// Flattens non-overlapping `p x p` patches of an `[H, W, 3]` image into
/// `[N, p*p*3]`, patches in row-major order and each patch flattened as
/// `(row, column, channel)`.
pub fn image_patches<F: Real>(image: &Tensor<F>, p: usize) -> Result<Tensor<F>> {
    let shape = image.shape();
    let (h, w) = (shape[0], shape.get(1).copied().unwrap_or(0));
    if shape.len() != 3 || shape[2] != 3 || p == 0 || h % p != 0 || w % p != 0 {
        return Err(Error::IndivisibleImage {
            height: h,
            width: w,
            divisor: p,
        });
    }
    let src = image.data();
    let mut data = Vec::with_capacity(src.len());
    for py in 0..h / p {
        for px in 0..w / p {
            for y in py * p..(py + 1) * p {
                let row = (y * w + px * p) * 3;
                data.extend_from_slice(&src[row..row + p * 3]);
            }
        }
    }
    Tensor::new(vec![(h / p) * (w / p), p * p * 3], data)
}

/// Linear projection of the image's patches, `[N, d]`.
pub fn patch_embed<F: Real>(g: &mut Graph<F>, s: &ParamStore<F>, projection: &Linear, image: &Tensor<F>, p: usize) -> Result<Var> {
    let patches = g.constant(image_patches(image, p)?);
    projection.forward(g, s, patches)
}

/// Attention of `queries` `[Lq, d]` over `features` `[R, d]`; the output
/// has one row per query.
pub fn cross_attention_query<F: Real>(
    g: &mut Graph<F>,
    s: &ParamStore<F>,
    p: &AttentionParams,
    queries: Var,
    features: Var,
) -> Result<AttentionOutput> {
    let (qs, fs) = (g.shape(queries).to_vec(), g.shape(features).to_vec());
    if qs.len() != 2 || fs.len() != 2 {
        return Err(Error::ShapeMismatch {
            op: "cross_attention_query",
            lhs: qs,
            rhs: fs,
        });
    }
    let q = g.reshape(queries, &[1, qs[0], qs[1]])?;
    let kv = g.reshape(features, &[1, fs[0], fs[1]])?;
    let out = attention(g, s, p, q, kv, None)?;
    Ok(AttentionOutput {
        output: g.reshape(out.output, &[qs[0], qs[1]])?,
        weights: out.weights,
    })
}

/// Parameter handles of one assembled model.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub lm: Option<LanguageModel>,
    pub word_embed: Option<ParamId>,
    pub adapter: Option<Linear>,
    pub patch_projection: Option<Linear>,
    pub conv: Option<ConvStack>,
    pub cross_attention: Option<AttentionParams>,
    pub class_token: ParamId,
    pub text_position: ParamId,
    pub image_position: ParamId,
    pub modality: ParamId,
    pub blocks: Vec<EncoderBlock>,
    pub final_norm: LayerNorm,
    pub head: Linear,
}

/// Intermediate values of one forward pass.
pub struct ForwardOutput {
    /// `[1, C]`
    pub logits: Var,
    /// Language stream entering the joint encoder, `[L, d_vlm]`.
    pub language: Var,
    /// Visual stream entering the joint encoder, `[N, d_vlm]`.
    pub visual: Var,
    /// Length of the joint encoder's input sequence.
    pub joint_len: usize,
}

impl Model {
    /// Registers the parameters of the variant described by `config`. Each
    /// component draws its initial values from its own seeded stream, so
    /// shared components start identical across variants.
    pub fn assemble<F: Real>(config: ModelConfig, seed: u64) -> Result<(Model, ParamStore<F>)> {
        config.validate()?;
        let mut store = ParamStore::new();
        let std = config.init_std;
        let d = config.d_vlm;
        let stream = |k: u64| rng::stream(seed, &[tag::INIT, k]);

        let mut r = stream(0);
        let mut init = Init { rng: &mut r, std };
        let class_token = store.add_normal("vlm.class_token", &[1, d], &mut init);
        let text_position = store.add_normal("vlm.text_position", &[config.max_text_len, d], &mut init);
        let image_position = store.add_normal("vlm.image_position", &[config.max_visual_len(), d], &mut init);
        let modality = store.add_normal("vlm.modality", &[2, d], &mut init);
        let blocks = (0..config.vlm_depth)
            .map(|i| EncoderBlock::register(&mut store, &format!("vlm.block{i}"), &config.block_config(), &mut init))
            .collect::<Result<Vec<_>>>()?;
        let final_norm = LayerNorm::register(&mut store, "vlm.final_ln", d);
        let head = Linear::register(&mut store, "vlm.head", d, config.num_classes, true, &mut init);

        let mut word_embed = None;
        let mut adapter = None;
        let mut lm = None;
        match config.language_mode {
            LanguageMode::Lookup => {
                let mut r = stream(1);
                let mut init = Init { rng: &mut r, std };
                word_embed = Some(store.add_normal("vlm.word_embed", &[config.vlm_vocab_size, d], &mut init));
            }
            LanguageMode::External => {
                let mut r = stream(2);
                let mut init = Init { rng: &mut r, std };
                lm = Some(LanguageModel::register(&mut store, "lm", config.lm_config(), &mut init)?);
                if config.adapter_enabled {
                    let mut r = stream(3);
                    let mut init = Init { rng: &mut r, std };
                    adapter = Some(Linear::register(&mut store, "vlm.adapter", config.d_lm, d, true, &mut init));
                }
            }
        }

        let mut patch_projection = None;
        let mut conv = None;
        let mut cross_attention = None;
        match config.visual_mode {
            VisualMode::PatchLinear => {
                let mut r = stream(4);
                let mut init = Init { rng: &mut r, std };
                let p = config.patch_size;
                patch_projection = Some(Linear::register(&mut store, "vlm.patch_proj", p * p * 3, d, true, &mut init));
            }
            VisualMode::DeepConv => {
                let mut r = stream(5);
                let mut init = Init { rng: &mut r, std };
                conv = Some(ConvStack::register(&mut store, "vlm.visual", config.conv_channels, d, &mut init));
                if config.has_lm() {
                    let mut r = stream(6);
                    let mut init = Init { rng: &mut r, std };
                    cross_attention = Some(AttentionParams::register(
                        &mut store,
                        "vlm.cross_attn",
                        d,
                        config.num_heads,
                        &mut init,
                    ));
                }
            }
        }

        let model = Model {
            config,
            lm,
            word_embed,
            adapter,
            patch_projection,
            conv,
            cross_attention,
            class_token,
            text_position,
            image_position,
            modality,
            blocks,
            final_norm,
            head,
        };
        Ok((model, store))
    }

    pub fn variant(&self) -> Variant {
        self.config.variant()
    }

    /// Context-free language input: rows of the model's own word table.
    pub fn language_embed_lookup<F: Real>(&self, g: &mut Graph<F>, s: &ParamStore<F>, tokens: &TokenSequence) -> Result<Var> {
        let table = self.word_embed.ok_or_else(|| Error::Config("model has no word table".into()))?;
        let size = self.config.vlm_vocab_size;
        let rows = tokens
            .ids
            .iter()
            .map(|&id| {
                if (id as usize) < size {
                    Ok(id as usize)
                } else {
                    Err(Error::TokenOutOfRange { id: id as usize, size })
                }
            })
            .collect::<Result<Vec<_>>>()?;
        let t = g.param(s, table);
        g.select_rows(t, &rows)
    }

    /// Language-model outputs `[L, d_lm]` as language input `[L, d_vlm]`.
    pub fn language_embed_external<F: Real>(&self, g: &mut Graph<F>, s: &ParamStore<F>, lm_outputs: Var) -> Result<Var> {
        match &self.adapter {
            Some(a) => a.forward(g, s, lm_outputs),
            None if g.shape(lm_outputs).last() == Some(&self.config.d_vlm) => Ok(lm_outputs),
            None => Err(Error::Config(format!(
                "LM width {:?} does not match d_vlm {} without an adapter",
                g.shape(lm_outputs).last(),
                self.config.d_vlm
            ))),
        }
    }

    /// Language stream `[L, d_vlm]` for either language mode.
    pub fn language_stream<F: Real>(&self, g: &mut Graph<F>, s: &ParamStore<F>, tokens: &TokenSequence) -> Result<Var> {
        match &self.lm {
            Some(lm) => {
                let out = lm.forward(g, s, tokens)?;
                self.language_embed_external(g, s, out)
            }
            None => self.language_embed_lookup(g, s, tokens),
        }
    }

    /// Visual stream `[N, d_vlm]`. Cross-attention queries are the language
    /// rows of the target segment, or the class token when there is none.
    pub fn visual_stream<F: Real>(
        &self,
        g: &mut Graph<F>,
        s: &ParamStore<F>,
        image: &Tensor<F>,
        language: Var,
        tokens: &TokenSequence,
    ) -> Result<Var> {
        if let Some(proj) = &self.patch_projection {
            return patch_embed(g, s, proj, image, self.config.patch_size);
        }
        let conv = self.conv.as_ref().expect("one visual encoder is always present");
        let img = g.constant(image.clone());
        let feats = conv.forward(g, s, img)?;
        let Some(cross) = &self.cross_attention else {
            return Ok(feats);
        };
        let targets = tokens.target_positions();
        let queries = if targets.is_empty() {
            g.param(s, self.class_token)
        } else {
            g.select_rows(language, &targets)?
        };
        Ok(cross_attention_query(g, s, cross, queries, feats)?.output)
    }

    /// Joint encoder over `[class][language][visual]` and the classification
    /// head on the class position. `text_keep` masks language positions.
    pub fn joint_forward<F: Real>(
        &self,
        g: &mut Graph<F>,
        s: &ParamStore<F>,
        language: Var,
        visual: Var,
        text_keep: &[bool],
    ) -> Result<Var> {
        let (l, n) = (g.shape(language)[0], g.shape(visual)[0]);
        if text_keep.len() != l {
            return Err(Error::MaskMismatch {
                mask: text_keep.len(),
                seq: l,
            });
        }
        let d = self.config.d_vlm;
        let lang = add_position_embeddings(g, s, language, self.text_position)?;
        let vis = add_position_embeddings(g, s, visual, self.image_position)?;
        let cls = g.param(s, self.class_token);
        let x = g.concat(&[cls, lang, vis], 0)?;
        let types: Vec<usize> = (0..1 + l + n).map(|i| usize::from(i > l)).collect();
        let table = g.param(s, self.modality);
        let modality = g.select_rows(table, &types)?;
        let mut x = g.add(x, modality)?;

        let mut keep = Vec::with_capacity(1 + l + n);
        keep.push(true);
        keep.extend_from_slice(text_keep);
        keep.resize(1 + l + n, true);
        let mask = AttentionMask::from_keep(&keep)?;
        x = g.reshape(x, &[1, 1 + l + n, d])?;
        for b in &self.blocks {
            x = b.forward(g, s, x, &mask)?;
        }
        let x = g.reshape(x, &[1 + l + n, d])?;
        let pooled = g.select_rows(x, &[0])?;
        let pooled = self.final_norm.forward(g, s, pooled)?;
        self.head.forward(g, s, pooled)
    }

    /// Logits for one example; `image` is `[H, W, 3]` in `[0, 1]`.
    pub fn forward<F: Real>(&self, g: &mut Graph<F>, s: &ParamStore<F>, tokens: &TokenSequence, image: &Tensor<F>) -> Result<ForwardOutput> {
        let language = self.language_stream(g, s, tokens)?;
        let visual = self.visual_stream(g, s, image, language, tokens)?;
        let joint_len = 1 + g.shape(language)[0] + g.shape(visual)[0];
        let logits = self.joint_forward(g, s, language, visual, &tokens.mask)?;
        Ok(ForwardOutput {
            logits,
            language,
            visual,
            joint_len,
        })
    }

    /// Cross-entropy of one example against `label`.
    pub fn loss<F: Real>(
        &self,
        g: &mut Graph<F>,
        s: &ParamStore<F>,
        tokens: &TokenSequence,
        image: &Tensor<F>,
        label: usize,
    ) -> Result<Var> {
        let out = self.forward(g, s, tokens, image)?;
        g.cross_entropy(out.logits, &[label])
    }

    /// Names of the parameters belonging to the language model.
    pub fn lm_parameter_names<F: Real>(&self, s: &ParamStore<F>) -> Vec<String> {
        s.names().filter(|n| n.starts_with("lm.")).map(String::from).collect()
    }
}

/// External-mode copy of a ViLT model whose LM has no blocks, zero position
/// and segment tables and the lookup table as its token table. Its language
/// stream is then the lookup embedding itself.
pub fn identity_lm_twin<F: Real>(model: &Model, store: &ParamStore<F>) -> Result<(Model, ParamStore<F>)> {
    let table = model
        .word_embed
        .filter(|_| model.variant() == Variant::Vilt)
        .ok_or_else(|| Error::Config("identity twin needs a vilt model".into()))?;
    let config = ModelConfig {
        language_mode: LanguageMode::External,
        lm_depth: 0,
        d_lm: model.config.d_vlm,
        lm_vocab_size: model.config.vlm_vocab_size,
        adapter_enabled: false,
        ..model.config.clone()
    };
    let (twin, mut twin_store) = Model::assemble::<F>(config, 0)?;
    twin_store.copy_shared_from(store)?;
    let lm = twin.lm.as_ref().expect("external mode has an LM");
    twin_store.get_mut(lm.token_embed).value = store.get(table).value.clone();
    for id in [lm.position, lm.segment] {
        let p = twin_store.get_mut(id);
        p.value = Tensor::zeros(p.value.shape());
    }
    Ok((twin, twin_store))
}

/// Seed of the tiny model used by the gradient check.
pub const GRADCHECK_SEED: u64 = 24;

impl ModelConfig {
    /// A model small enough to finite-difference every parameter in 64-bit.
    pub fn tiny(variant: Variant) -> ModelConfig {
        ModelConfig {
            d_vlm: 8,
            d_lm: 8,
            patch_size: 8,
            vlm_depth: 1,
            lm_depth: 1,
            num_heads: 2,
            mlp_ratio: 2,
            max_text_len: 8,
            image_size: 16,
            conv_channels: [2, 3, 4],
            vlm_vocab_size: 12,
            lm_vocab_size: 12,
            init_std: 0.4,
            ..ModelConfig::default()
        }
        .with_variant(variant)
    }
}

/// Finite-difference check of every parameter of `config` on one fixed
/// example with a random image.
pub fn gradcheck_model(config: &ModelConfig, seed: u64, opts: &CheckOptions) -> Result<Vec<ParamCheck>> {
    use rand::Rng;
    let vocab = build_vocab(["$T$ is happy today", "$T$ was sad"], 12, true)?;
    let tokens = tokenize("$T$ is happy", Some("today"), &vocab, config.max_text_len);
    let side = config.image_size;
    let mut r = rng::stream(seed, &[tag::INIT, 99]);
    let image = Tensor::new(vec![side, side, 3], (0..side * side * 3).map(|_| r.gen::<f64>()).collect())?;
    let (model, mut store) = Model::assemble::<f64>(config.clone(), seed)?;
    check_parameters(&mut store, |g, s| model.loss(g, s, &tokens, &image, 2), opts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lm::Vocabulary;

    fn tiny(variant: Variant) -> ModelConfig {
        ModelConfig { init_std: 0.5, ..ModelConfig::tiny(variant) }
    }


    fn vocab() -> Vocabulary {
        build_vocab(["$T$ is happy today", "$T$ was sad"], 12, true).unwrap()
    }

    fn image(seed: u64, side: usize) -> Tensor<f64> {
        use rand::Rng;
        let mut r = rng::stream(seed, &[99]);
        let data = (0..side * side * 3).map(|_| r.gen::<f64>()).collect();
        Tensor::new(vec![side, side, 3], data).unwrap()
    }

    #[test]
    fn patch_grid() {
        let img = image(0, 32);
        let p = image_patches(&img, 8).unwrap();
        assert_eq!(p.shape(), &[16, 192]);
        // Patch 5 is grid cell (1, 1); its first entry is pixel (8, 8).
        assert_eq!(p.at(&[5, 0]), img.at(&[8, 8, 0]));
        assert_eq!(p.at(&[5, 8 * 3 + 2]), img.at(&[9, 8, 2]));
        let one = image_patches(&img, 1).unwrap();
        assert_eq!(one.data(), img.data());
        assert!(matches!(
            image_patches(&image(0, 30), 8),
            Err(Error::IndivisibleImage { height: 30, width: 30, divisor: 8 })
        ));
    }

    fn naive_conv(input: &[f64], h: usize, w: usize, c: usize, weight: &Tensor<f64>, bias: &[f64]) -> Vec<f64> {
        let cout = bias.len();
        let (ho, wo) = (h.div_ceil(2), w.div_ceil(2));
        let mut out = vec![0.0; ho * wo * cout];
        for oy in 0..ho {
            for ox in 0..wo {
                for o in 0..cout {
                    let mut acc = bias[o];
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let (iy, ix) = (2 * oy as isize + ky as isize - 1, 2 * ox as isize + kx as isize - 1);
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                continue;
                            }
                            for ch in 0..c {
                                let x = input[(iy as usize * w + ix as usize) * c + ch];
                                acc += x * weight.at(&[(ky * 3 + kx) * c + ch, o]);
                            }
                        }
                    }
                    let gelu = 0.5 * acc * (1.0 + ((2.0 / core::f64::consts::PI).sqrt() * (acc + 0.044715 * acc.powi(3))).tanh());
                    out[(oy * wo + ox) * cout + o] = gelu;
                }
            }
        }
        out
    }

    #[test]
    fn conv_stack_matches_direct_convolution() {
        let (model, mut store) = Model::assemble::<f64>(tiny(Variant::TomVilt), 1).unwrap();
        let conv = model.conv.as_ref().unwrap();
        for l in &conv.layers {
            let b = store.get_mut(l.bias.unwrap());
            for (i, v) in b.value.data_mut().iter_mut().enumerate() {
                *v = 0.1 * i as f64 - 0.05;
            }
        }
        let img = image(3, 8);
        let mut g = Graph::new();
        let x = g.constant(img.clone());
        let feats = conv.forward(&mut g, &store, x).unwrap();
        assert_eq!(g.shape(feats), &[1, 8]);

        let (mut data, mut h, mut c) = (img.data().to_vec(), 8, 3);
        for l in &conv.layers {
            let w = &store.get(l.weight).value;
            let b = store.get(l.bias.unwrap()).value.data();
            data = naive_conv(&data, h, h, c, w, b);
            h = h.div_ceil(2);
            c = b.len();
        }
        let pw = &store.get(conv.projection.weight).value;
        let pb = store.get(conv.projection.bias.unwrap()).value.data();
        for (j, &got) in g.value(feats).data().iter().enumerate() {
            let want: f64 = pb[j] + (0..c).map(|k| data[k] * pw.at(&[k, j])).sum::<f64>();
            assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        }
    }

    #[test]
    fn zero_image_and_biases_give_zero_features() {
        for v in [Variant::Vilt, Variant::TomVilt] {
            let (model, mut store) = Model::assemble::<f32>(tiny(v), 0).unwrap();
            let names: Vec<String> = store.names().filter(|n| n.ends_with(".bias")).map(String::from).collect();
            for n in names {
                let id = store.id(&n).unwrap();
                store.get_mut(id).value.data_mut().fill(0.0);
            }
            let mut g = Graph::new();
            let tokens = tokenize("x", None, &vocab(), 8);
            let lang = model.language_stream(&mut g, &store, &tokens).unwrap();
            let vis = model.visual_stream(&mut g, &store, &Tensor::zeros(&[16, 16, 3]), lang, &tokens).unwrap();
            assert!(g.value(vis).data().iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn every_variant_runs_with_expected_parameters() {
        let v = vocab();
        let tokens = tokenize("$T$ is happy", Some("x"), &v, 8);
        for variant in Variant::ALL {
            let (model, store) = Model::assemble::<f32>(tiny(variant), 0).unwrap();
            let mut g = Graph::new();
            let out = model.forward(&mut g, &store, &tokens, &image(1, 16).cast()).unwrap();
            assert_eq!(g.shape(out.logits), &[1, 3]);
            let n_vis = g.shape(out.visual)[0];
            assert_eq!(out.joint_len, 1 + 8 + n_vis);
            let names: Vec<&str> = store.names().collect();
            let has = |p: &str| names.iter().any(|n| n.starts_with(p));
            assert_eq!(has("lm."), model.config.has_lm(), "{variant:?}");
            assert_eq!(has("vlm.patch_proj"), variant.modes().1 == VisualMode::PatchLinear);
            assert_eq!(has("vlm.visual.conv"), variant.modes().1 == VisualMode::DeepConv);
            assert_eq!(has("vlm.cross_attn"), variant == Variant::TomVault);
            assert_eq!(has("vlm.word_embed"), !model.config.has_lm());
            if variant == Variant::TomVault {
                assert_eq!(n_vis, 1);
            }
        }
    }

    #[test]
    fn empty_target_queries_with_class_token() {
        let (model, store) = Model::assemble::<f64>(tiny(Variant::TomVault), 4).unwrap();
        let tokens = tokenize("$T$ is happy", None, &vocab(), 8);
        let mut g = Graph::new();
        let out = model.forward(&mut g, &store, &tokens, &image(1, 16)).unwrap();
        assert_eq!(g.shape(out.visual), &[1, 8]);
    }

    #[test]
    fn single_region_cross_attention_returns_projected_value() {
        let (model, store) = Model::assemble::<f64>(tiny(Variant::TomVault), 2).unwrap();
        let p = model.cross_attention.as_ref().unwrap();
        let mut g = Graph::new();
        let q = g.constant(image(5, 2).reshape(&[3, 4]).unwrap());
        let q = g.concat(&[q, q], 1).unwrap();
        let f = g.constant(Tensor::from_f64(&[1, 8], &[0.3, -0.2, 0.1, 0.5, -0.4, 0.9, 0.0, 0.2]).unwrap());
        let out = cross_attention_query(&mut g, &store, p, q, f).unwrap();
        let v = p.value.forward(&mut g, &store, f).unwrap();
        let want = p.output.forward(&mut g, &store, v).unwrap();
        for row in g.value(out.output).rows() {
            for (a, b) in row.iter().zip(g.value(want).data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn adapter_rules() {
        let mut cfg = tiny(Variant::Vault);
        cfg.d_lm = 4;
        assert!(matches!(Model::assemble::<f32>(cfg.clone(), 0), Err(Error::Config(_))));
        cfg.adapter_enabled = true;
        let (model, store) = Model::assemble::<f32>(cfg, 0).unwrap();
        let mut g = Graph::new();
        let lang = model.language_stream(&mut g, &store, &tokenize("happy", None, &vocab(), 8)).unwrap();
        assert_eq!(g.shape(lang), &[8, 8]);

        let (model, store) = Model::assemble::<f32>(tiny(Variant::Vault), 0).unwrap();
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(&[3, 8], 0.25));
        let y = model.language_embed_external(&mut g, &store, x).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn lookup_is_context_free() {
        let (model, store) = Model::assemble::<f32>(tiny(Variant::Vilt), 0).unwrap();
        let v = vocab();
        let tokens = tokenize("happy happy", None, &v, 8);
        let mut g = Graph::new();
        let e = model.language_embed_lookup(&mut g, &store, &tokens).unwrap();
        let rows: Vec<&[f32]> = g.value(e).rows().collect();
        assert_eq!(rows[1], rows[2]);
        let table = &store.get(model.word_embed.unwrap()).value;
        let k = v.id("happy") as usize;
        assert_eq!(rows[1], &table.data()[k * 8..(k + 1) * 8]);
        let bad = TokenSequence {
            ids: vec![2, 40],
            mask: vec![true; 2],
            segments: vec![0; 2],
        };
        assert!(model.language_embed_lookup(&mut g, &store, &bad).is_err());
    }

    #[test]
    fn gradients_reach_lm_only_when_attached_and_trainable() {
        let v = vocab();
        let tokens = tokenize("$T$ is happy", Some("x"), &v, 8);
        let img = image(2, 16).cast::<f32>();
        for (variant, freeze) in [(Variant::Vault, false), (Variant::Vault, true), (Variant::TomVault, false)] {
            let (model, mut store) = Model::assemble::<f32>(tiny(variant), 0).unwrap();
            store.freeze_prefix("lm.", freeze);
            let mut g = Graph::new();
            let loss = model.loss(&mut g, &store, &tokens, &img, 1).unwrap();
            g.backward_into(loss, &mut store).unwrap();
            let lm_grad = store
                .iter()
                .filter(|p| p.name.starts_with("lm."))
                .any(|p| p.grad.as_ref().is_some_and(|t| t.data().iter().any(|&x| x != 0.0)));
            assert_eq!(lm_grad, !freeze, "{variant:?} frozen={freeze}");
        }
    }

    #[test]
    fn gradcheck_every_variant() {
        for variant in Variant::ALL {
            let report = gradcheck_model(&ModelConfig::tiny(variant), GRADCHECK_SEED, &CheckOptions::new()).unwrap();
            for c in &report {
                assert!(c.max_rel_error < 1e-5, "{variant:?} {c:?}");
            }
        }
    }

    #[test]
    fn identity_twin_is_bitwise_equal() {
        let v = vocab();
        let texts = [("$T$ is happy", Some("today")), ("$T$ was sad", None), ("today $T$", Some("is sad"))];
        let (vilt, store) = Model::assemble::<f32>(tiny(Variant::Vilt), 5).unwrap();
        let (vault, twin_store) = identity_lm_twin(&vilt, &store).unwrap();
        assert_eq!(vault.variant(), Variant::Vault);
        for (i, (text, target)) in texts.iter().enumerate() {
            let tokens = tokenize(text, *target, &v, 8);
            let img = image(i as u64, 16).cast::<f32>();
            let mut g = Graph::new();
            let a = vilt.forward(&mut g, &store, &tokens, &img).unwrap().logits;
            let mut h = Graph::new();
            let b = vault.forward(&mut h, &twin_store, &tokens, &img).unwrap().logits;
            let bits = |t: &Tensor<f32>| t.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(g.value(a)), bits(h.value(b)), "{text}");
        }
        let (vault, store) = Model::assemble::<f32>(tiny(Variant::Vault), 0).unwrap();
        assert!(identity_lm_twin(&vault, &store).is_err());
    }

    #[test]
    fn positions_added_once_per_stream() {
        let v = vocab();
        let tokens = tokenize("$T$ is happy", Some("today"), &v, 8);
        let img = image(3, 16);
        for variant in Variant::ALL {
            let (model, store) = Model::assemble::<f64>(tiny(variant), 0).unwrap();
            let mut g = Graph::new();
            model.forward(&mut g, &store, &tokens, &img).unwrap();
            let expected: &[&str] = if model.config.has_lm() {
                &["lm.position", "vlm.text_position", "vlm.image_position"]
            } else {
                &["vlm.text_position", "vlm.image_position"]
            };
            assert_eq!(g.position_log(), expected, "{variant:?}");
        }
    }
}
