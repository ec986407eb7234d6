//! Fine-tuning loop, evaluation and multi-seed runs.

use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::image::{center_crop, random_crop, RgbImage};
use crate::lm::{argmax, mlm_pretrain, LanguageModel, MlmConfig, MlmReport, TokenSequence};
use crate::metrics::{self, compute_metrics_with, AggregateMetrics, DivergenceRule, RunMetrics};
use crate::optim::{lr_schedule, AdamW, AdamWConfig};
use crate::param::{Init, ParamStore};
use crate::rng::{self, tag};
use crate::vlm::{Model, ModelConfig};
use crate::{Error, Graph, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub peak_lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub warmup_fraction: f64,
    pub weight_decay: f64,
    pub seeds: Vec<u64>,
    pub freeze_lm: bool,
    pub bias_correction: bool,
    pub divergence_window: usize,
    pub divergence_factor: f64,
    /// Also score the training split after every epoch.
    pub eval_train: bool,
    /// Pretrain the LM with masked-token prediction on the training texts.
    pub mlm_pretrain: bool,
    pub mlm: MlmConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            peak_lr: 2e-5,
            epochs: 15,
            batch_size: 16,
            warmup_fraction: 0.1,
            weight_decay: 0.0,
            seeds: alloc::vec![0, 1, 2],
            freeze_lm: false,
            bias_correction: false,
            divergence_window: 2,
            divergence_factor: 2.0,
            eval_train: false,
            mlm_pretrain: false,
            mlm: MlmConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if !(self.warmup_fraction > 0.0 && self.warmup_fraction < 1.0) {
            return bad("warmup_fraction must lie in (0, 1)");
        }
        if self.peak_lr.is_nan() || self.peak_lr <= 0.0 {
            return bad("peak_lr must be positive");
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch_size must be positive");
        }
        if self.seeds.is_empty() {
            return bad("at least one seed is required");
        }
        Ok(())
    }

    pub fn divergence_rule(&self) -> DivergenceRule {
        DivergenceRule {
            factor: self.divergence_factor,
            window: self.divergence_window,
        }
    }

    fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            weight_decay: self.weight_decay,
            bias_correction: self.bias_correction,
            ..AdamWConfig::default()
        }
    }
}

/// A tokenized example with its decoded image.
#[derive(Clone, Debug)]
pub struct PreparedExample {
    pub id: String,
    pub tokens: TokenSequence,
    pub image: RgbImage,
    pub label: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub metrics: RunMetrics,
    pub predictions: Vec<usize>,
    pub mean_loss: f64,
}

/// Scores `examples` with centre-cropped images.
pub fn evaluate(model: &Model, store: &ParamStore<f32>, examples: &[PreparedExample]) -> Result<Evaluation> {
    let side = model.config.image_size;
    let mut predictions = Vec::with_capacity(examples.len());
    let mut labels = Vec::with_capacity(examples.len());
    let mut total = 0.0;
    for ex in examples {
        let image = center_crop(&ex.image, side, side).to_tensor::<f32>();
        let mut g = Graph::new();
        let out = model.forward(&mut g, store, &ex.tokens, &image)?;
        let loss = g.cross_entropy(out.logits, &[ex.label])?;
        total += g.value(loss).data()[0] as f64;
        predictions.push(argmax(g.value(out.logits).data()));
        labels.push(ex.label);
    }
    let metrics = compute_metrics_with(&predictions, &labels, model.config.num_classes)?;
    Ok(Evaluation {
        metrics,
        predictions,
        mean_loss: total / examples.len() as f64,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val: RunMetrics,
    pub train: Option<RunMetrics>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub history: Vec<EpochRecord>,
    /// Epoch whose parameters were restored; `None` if no epoch completed
    /// before divergence.
    pub best_epoch: Option<usize>,
    pub diverged: bool,
    pub steps: usize,
    pub lm_checksum_before: u64,
    pub lm_checksum_after: u64,
}

/// Fine-tunes `store` in place and leaves it holding the parameters of the
/// epoch with the best validation `(accuracy + macro_f1) / 2`, the earliest
/// on ties. Stops early once the training loss diverges.
pub fn train(
    model: &Model,
    store: &mut ParamStore<f32>,
    train_set: &[PreparedExample],
    val_set: &[PreparedExample],
    cfg: &TrainConfig,
    seed: u64,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::Empty("training set"));
    }
    if val_set.is_empty() {
        return Err(Error::Empty("validation set"));
    }
    if cfg.freeze_lm && !model.config.has_lm() {
        return Err(Error::Config("freeze_lm requires a variant with a language model".into()));
    }
    store.freeze_prefix("lm.", cfg.freeze_lm);
    let lm_checksum_before = store.checksum("lm.");
    let side = model.config.image_size;
    let batch = cfg.batch_size.min(train_set.len());
    let steps_per_epoch = train_set.len().div_ceil(batch);
    let total_steps = steps_per_epoch * cfg.epochs;
    let mut opt = AdamW::new(cfg.adamw());
    let mut step = 0;
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut losses = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, Vec<crate::Tensor<f32>>)> = None;
    let mut diverged = false;

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut rng::stream(seed, &[tag::SHUFFLE, epoch as u64]));
        let mut epoch_loss = 0.0;
        for members in order.chunks(batch) {
            store.zero_grad();
            for &i in members {
                let ex = &train_set[i];
                let mut crop_rng = rng::stream(seed, &[tag::CROP, epoch as u64, i as u64]);
                let image = random_crop(&ex.image, side, side, &mut crop_rng).to_tensor::<f32>();
                let mut g = Graph::new();
                let loss = model.loss(&mut g, store, &ex.tokens, &image, ex.label)?;
                epoch_loss += g.value(loss).data()[0] as f64;
                let scaled = g.scale(loss, 1.0 / members.len() as f64);
                g.backward_into(scaled, store)?;
            }
            let lr = lr_schedule(step, total_steps, cfg.peak_lr, cfg.warmup_fraction)?;
            opt.step(store, lr);
            step += 1;
        }
        losses.push(epoch_loss / train_set.len() as f64);
        if metrics::detect_divergence(&losses, cfg.divergence_rule()) {
            diverged = true;
            break;
        }
        let val = evaluate(model, store, val_set)?.metrics;
        let train_metrics = if cfg.eval_train {
            Some(evaluate(model, store, train_set)?.metrics)
        } else {
            None
        };
        let score = val.selection_score();
        if best.as_ref().is_none_or(|(b, _, _)| score > *b) {
            best = Some((score, epoch, store.snapshot()));
        }
        history.push(EpochRecord {
            epoch,
            train_loss: losses[epoch],
            val,
            train: train_metrics,
        });
    }
    store.zero_grad();
    let best_epoch = best.map(|(_, epoch, values)| {
        store.restore(&values);
        epoch
    });
    Ok(TrainOutcome {
        history,
        best_epoch,
        diverged,
        steps: step,
        lm_checksum_before,
        lm_checksum_after: store.checksum("lm."),
    })
}

/// Trains a fresh LM on masked-token prediction over `corpus`. The returned
/// store holds only `lm.` parameters and can seed any model with the same
/// LM shape via [`ParamStore::copy_shared_from`].
pub fn pretrain_lm(config: &ModelConfig, corpus: &[TokenSequence], mlm: &MlmConfig, seed: u64) -> Result<(ParamStore<f32>, MlmReport)> {
    let mut store = ParamStore::new();
    let mut r = rng::stream(seed, &[tag::INIT, 2]);
    let mut init = Init {
        rng: &mut r,
        std: config.init_std,
    };
    let lm = LanguageModel::register(&mut store, "lm", config.lm_config(), &mut init)?;
    let report = mlm_pretrain(&lm, &mut store, corpus, mlm)?;
    Ok((store, report))
}

#[derive(Clone, Debug)]
pub struct SeedRun {
    pub seed: u64,
    pub outcome: TrainOutcome,
    /// Held-out metrics of the restored parameters, flagged when diverged.
    pub test: RunMetrics,
    pub store: ParamStore<f32>,
}

#[derive(Clone, Debug)]
pub struct MultiSeedReport {
    pub runs: Vec<SeedRun>,
    /// `None` when every run diverged.
    pub aggregate: Option<AggregateMetrics>,
}

/// Trains and tests one seed; `build` produces the initial model.
pub fn run_seed<B>(
    build: &B,
    seed: u64,
    train_set: &[PreparedExample],
    val_set: &[PreparedExample],
    test_set: &[PreparedExample],
    cfg: &TrainConfig,
) -> Result<SeedRun>
where
    B: Fn(u64) -> Result<(Model, ParamStore<f32>)>,
{
    let (model, mut store) = build(seed)?;
    let outcome = train(&model, &mut store, train_set, val_set, cfg, seed)?;
    let mut test = evaluate(&model, &store, test_set)?.metrics;
    test.diverged = outcome.diverged;
    Ok(SeedRun {
        seed,
        outcome,
        test,
        store,
    })
}

pub fn multi_seed<B>(
    build: B,
    train_set: &[PreparedExample],
    val_set: &[PreparedExample],
    test_set: &[PreparedExample],
    cfg: &TrainConfig,
) -> Result<MultiSeedReport>
where
    B: Fn(u64) -> Result<(Model, ParamStore<f32>)>,
{
    cfg.validate()?;
    let runs = cfg
        .seeds
        .iter()
        .map(|&seed| run_seed(&build, seed, train_set, val_set, test_set, cfg))
        .collect::<Result<Vec<_>>>()?;
    Ok(summarize(runs))
}

/// Aggregates test metrics over the non-diverged runs.
pub fn summarize(runs: Vec<SeedRun>) -> MultiSeedReport {
    let tests: Vec<RunMetrics> = runs.iter().map(|r| r.test.clone()).collect();
    MultiSeedReport {
        aggregate: metrics::aggregate(&tests).ok(),
        runs,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixture::make_synthetic_fixture;
    use crate::lm::{build_vocab, tokenize};
    use crate::vlm::Variant;

    fn setup(variant: Variant) -> (ModelConfig, Vec<PreparedExample>) {
        let fx = make_synthetic_fixture(12, 0).unwrap();
        let vocab = build_vocab(fx.iter().map(|e| e.text.as_str()), 64, true).unwrap();
        let cfg = ModelConfig {
            d_vlm: 16,
            d_lm: 16,
            num_heads: 2,
            mlp_ratio: 2,
            vlm_depth: 1,
            lm_depth: 1,
            max_text_len: 8,
            image_size: 16,
            conv_channels: [4, 4, 8],
            vlm_vocab_size: vocab.len(),
            lm_vocab_size: vocab.len(),
            ..ModelConfig::default()
        }
        .with_variant(variant);
        let data = fx
            .into_iter()
            .map(|e| PreparedExample {
                tokens: tokenize(&e.text, Some(&e.target), &vocab, 8),
                id: e.id,
                image: e.image,
                label: e.label.index(),
            })
            .collect();
        (cfg, data)
    }

    fn quick() -> TrainConfig {
        TrainConfig {
            epochs: 2,
            batch_size: 4,
            peak_lr: 1e-3,
            seeds: alloc::vec![5],
            eval_train: true,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn same_seed_same_history() {
        let (mc, data) = setup(Variant::Vault);
        let run = || {
            let (model, mut store) = Model::assemble::<f32>(mc.clone(), 1).unwrap();
            train(&model, &mut store, &data[..8], &data[8..], &quick(), 3).unwrap().history
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn frozen_lm_is_untouched_and_unfrozen_lm_moves() {
        let (mc, data) = setup(Variant::Vault);
        for freeze in [true, false] {
            let (model, mut store) = Model::assemble::<f32>(mc.clone(), 1).unwrap();
            let cfg = TrainConfig {
                freeze_lm: freeze,
                epochs: 1,
                ..quick()
            };
            let out = train(&model, &mut store, &data[..4], &data[8..], &cfg, 0).unwrap();
            assert_eq!(out.steps, 1);
            assert_eq!(out.lm_checksum_before == out.lm_checksum_after, freeze);
        }
        let (mc, _) = setup(Variant::Vilt);
        let (model, mut store) = Model::assemble::<f32>(mc, 1).unwrap();
        let cfg = TrainConfig {
            freeze_lm: true,
            ..quick()
        };
        assert!(matches!(train(&model, &mut store, &data, &data, &cfg, 0), Err(Error::Config(_))));
    }

    #[test]
    fn restores_best_epoch_and_aggregates() {
        let (mc, data) = setup(Variant::TomVilt);
        let cfg = TrainConfig {
            seeds: alloc::vec![0, 0],
            ..quick()
        };
        let report = multi_seed(|s| Model::assemble::<f32>(mc.clone(), s), &data[..8], &data[8..10], &data[10..], &cfg).unwrap();
        assert_eq!(report.runs.len(), 2);
        let agg = report.aggregate.unwrap();
        assert_eq!(agg.accuracy.std, 0.0);
        let run = &report.runs[0];
        let best = run.outcome.best_epoch.unwrap();
        let (model, _) = Model::assemble::<f32>(mc, 0).unwrap();
        let val = evaluate(&model, &run.store, &data[8..10]).unwrap().metrics;
        assert_eq!(val, run.outcome.history[best].val);
    }

    #[test]
    fn invalid_configs() {
        for cfg in [
            TrainConfig { warmup_fraction: 0.0, ..quick() },
            TrainConfig { peak_lr: 0.0, ..quick() },
            TrainConfig { seeds: alloc::vec![], ..quick() },
        ] {
            assert!(cfg.validate().is_err());
        }
    }
}
