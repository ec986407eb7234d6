//! Training, evaluation, gradient-check and ablation runs behind the CLI.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use vault_core::gradcheck::{CheckOptions, ParamCheck};
use vault_core::metrics::{AggregateMetrics, RunMetrics};
use vault_core::param::ParamStore;
use vault_core::train::{evaluate, multi_seed, pretrain_lm, MultiSeedReport, TrainConfig};
use vault_core::vlm::{gradcheck_model, Model, ModelConfig, Variant, GRADCHECK_SEED};

use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::config::RunConfig;
use crate::manifest::Excluded;
use crate::pipeline::{load_splits, prepare, SplitName, Splits, Vocabs};
use crate::textfiles::{read_vocab, write_vocab};
use crate::{Error, Result};

pub const CONFIG_FILE: &str = "config.json";
pub const VLM_VOCAB_FILE: &str = "vlm_vocab.txt";
pub const LM_VOCAB_FILE: &str = "lm_vocab.txt";
pub const RESULTS_FILE: &str = "results.jsonl";
pub const SUMMARY_FILE: &str = "summary.json";

pub fn checkpoint_name(seed: u64) -> String {
    format!("seed{seed}.vltc")
}

/// One line of `results.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRecord {
    pub config_hash: String,
    pub seed: u64,
    pub epoch: usize,
    pub split: String,
    pub accuracy: f64,
    pub macro_f1: f64,
    pub weighted_f1: f64,
    pub per_class_f1: Vec<f64>,
    pub diverged: bool,
}

impl ResultRecord {
    fn new(config_hash: &str, seed: u64, epoch: usize, split: SplitName, m: &RunMetrics) -> Self {
        ResultRecord {
            config_hash: config_hash.to_string(),
            seed,
            epoch,
            split: split.as_str().to_string(),
            accuracy: m.accuracy,
            macro_f1: m.macro_f1,
            weighted_f1: m.weighted_f1,
            per_class_f1: m.per_class_f1.clone(),
            diverged: m.diverged,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedSummary {
    pub seed: u64,
    pub best_epoch: Option<usize>,
    pub diverged: bool,
    pub steps: usize,
    pub lm_checksum_before: u64,
    pub lm_checksum_after: u64,
    pub test: RunMetrics,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub variant: String,
    pub config_hash: String,
    pub freeze_lm: bool,
    pub runs: Vec<SeedSummary>,
    /// Test metrics over the non-diverged runs; absent when all diverged.
    pub aggregate: Option<AggregateMetrics>,
    pub diverged: usize,
    pub excluded: Vec<String>,
}

pub struct VariantRun {
    /// The configuration as run: variant modes and vocabulary sizes filled in.
    pub config: RunConfig,
    pub vocabs: Vocabs,
    pub report: MultiSeedReport,
    pub records: Vec<ResultRecord>,
    pub summary: Summary,
}

impl VariantRun {
    pub fn all_diverged(&self) -> bool {
        self.report.aggregate.is_none()
    }
}

fn check_freeze(cfg: &RunConfig, variant: Variant) -> Result<()> {
    if cfg.train.freeze_lm && !matches!(variant, Variant::Vault | Variant::TomVault) {
        return Err(Error::Usage(format!("freeze_lm needs a language model, which {} does not have", variant.name())));
    }
    Ok(())
}

/// `cfg` with the variant's modes and the built vocabulary sizes.
pub fn resolve(cfg: &RunConfig, variant: Variant, vocabs: &Vocabs) -> Result<RunConfig> {
    check_freeze(cfg, variant)?;
    let mut out = cfg.clone();
    out.model = vocabs.sized(&cfg.model.clone().with_variant(variant));
    out.model.validate()?;
    Ok(out)
}

/// Trains `variant` for every configured seed on already loaded splits and
/// writes the run's files under `out_dir` when given.
pub fn train_on_splits(cfg: &RunConfig, variant: Variant, splits: &Splits, out_dir: Option<&Path>) -> Result<VariantRun> {
    let vocabs = Vocabs::build(&splits.train, &cfg.data)?;
    let config = resolve(cfg, variant, &vocabs)?;
    let model_cfg = config.model.clone();
    let vocab = vocabs.for_variant(variant);
    let max_len = model_cfg.max_text_len;
    let (train, val, test) = (
        prepare(&splits.train, vocab, max_len),
        prepare(&splits.val, vocab, max_len),
        prepare(&splits.test, vocab, max_len),
    );

    let pretrained = if model_cfg.has_lm() && config.train.mlm_pretrain {
        let corpus: Vec<_> = train.iter().map(|e| e.tokens.clone()).collect();
        Some(pretrain_lm(&model_cfg, &corpus, &config.train.mlm, config.train.mlm.seed)?.0)
    } else {
        None
    };
    let build = |seed: u64| -> vault_core::Result<(Model, ParamStore<f32>)> {
        let (model, mut store) = Model::assemble::<f32>(model_cfg.clone(), seed)?;
        if let Some(lm) = &pretrained {
            store.copy_shared_from(lm)?;
        }
        Ok((model, store))
    };
    let report = multi_seed(build, &train, &val, &test, &config.train)?;

    let hash = config.hash();
    let mut records = Vec::new();
    for run in &report.runs {
        for h in &run.outcome.history {
            if let Some(m) = &h.train {
                records.push(ResultRecord::new(&hash, run.seed, h.epoch, SplitName::Train, m));
            }
            records.push(ResultRecord::new(&hash, run.seed, h.epoch, SplitName::Val, &h.val));
        }
        let best = run.outcome.best_epoch.unwrap_or(0);
        records.push(ResultRecord::new(&hash, run.seed, best, SplitName::Test, &run.test));
    }
    let summary = Summary {
        variant: variant.name().to_string(),
        config_hash: hash,
        freeze_lm: config.train.freeze_lm,
        runs: report
            .runs
            .iter()
            .map(|r| SeedSummary {
                seed: r.seed,
                best_epoch: r.outcome.best_epoch,
                diverged: r.outcome.diverged,
                steps: r.outcome.steps,
                lm_checksum_before: r.outcome.lm_checksum_before,
                lm_checksum_after: r.outcome.lm_checksum_after,
                test: r.test.clone(),
            })
            .collect(),
        aggregate: report.aggregate.clone(),
        diverged: report.runs.iter().filter(|r| r.outcome.diverged).count(),
        excluded: splits.excluded.iter().map(|e: &Excluded| e.id.clone()).collect(),
    };
    let run = VariantRun {
        config,
        vocabs,
        report,
        records,
        summary,
    };
    if let Some(dir) = out_dir {
        write_run(dir, &run)?;
    }
    Ok(run)
}

pub fn train_variant(cfg: &RunConfig, variant: Variant, out_dir: Option<&Path>) -> Result<VariantRun> {
    check_freeze(cfg, variant)?;
    let splits = load_splits(cfg)?;
    train_on_splits(cfg, variant, &splits, out_dir)
}

fn write_file(path: PathBuf, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(&path, contents).map_err(Error::io(path))
}

fn write_run(dir: &Path, run: &VariantRun) -> Result<()> {
    fs::create_dir_all(dir).map_err(Error::io(dir))?;
    write_file(dir.join(CONFIG_FILE), run.config.to_json())?;
    write_vocab(&dir.join(VLM_VOCAB_FILE), &run.vocabs.vlm)?;
    write_vocab(&dir.join(LM_VOCAB_FILE), &run.vocabs.lm)?;
    for r in &run.report.runs {
        save_checkpoint(&dir.join(checkpoint_name(r.seed)), &r.store)?;
    }
    let mut lines = String::new();
    for rec in &run.records {
        lines.push_str(&serde_json::to_string(rec).expect("records serialize"));
        lines.push('\n');
    }
    write_file(dir.join(RESULTS_FILE), lines)?;
    write_file(dir.join(SUMMARY_FILE), serde_json::to_string_pretty(&run.summary).expect("summaries serialize"))
}

/// Scores one split with a checkpoint, reading `config.json` and the
/// vocabularies from the checkpoint's directory. `manifest` replaces the
/// configured manifest.
pub fn eval_checkpoint(checkpoint: &Path, manifest: Option<&Path>, split: SplitName) -> Result<RunMetrics> {
    let dir = checkpoint.parent().unwrap_or(Path::new(""));
    let mut cfg = RunConfig::load(&dir.join(CONFIG_FILE))?;
    if let Some(m) = manifest {
        cfg.data.manifest = Some(m.to_path_buf());
    }
    let vocabs = Vocabs {
        vlm: read_vocab(&dir.join(VLM_VOCAB_FILE))?,
        lm: read_vocab(&dir.join(LM_VOCAB_FILE))?,
    };
    let (model, mut store) = Model::assemble::<f32>(cfg.model.clone(), 0)?;
    load_checkpoint(checkpoint, &mut store)?;
    let splits = load_splits(&cfg)?;
    let examples = prepare(splits.get(split), vocabs.for_variant(model.variant()), cfg.model.max_text_len);
    if examples.is_empty() {
        return Err(Error::Usage(format!("the {} split is empty", split.as_str())));
    }
    Ok(evaluate(&model, &store, &examples)?.metrics)
}

pub const GRADCHECK_TOLERANCE: f64 = 1e-5;

pub struct VariantCheck {
    pub variant: Variant,
    pub parameter_count: usize,
    pub checks: Vec<ParamCheck>,
}

pub struct GradcheckReport {
    pub variants: Vec<VariantCheck>,
}

impl GradcheckReport {
    pub fn worst(&self) -> Option<(Variant, &ParamCheck)> {
        self.variants
            .iter()
            .flat_map(|v| v.checks.iter().map(move |c| (v.variant, c)))
            .max_by(|a, b| a.1.max_rel_error.total_cmp(&b.1.max_rel_error))
    }

    pub fn passed(&self) -> bool {
        self.variants
            .iter()
            .all(|v| v.checks.len() == v.parameter_count && v.checks.iter().all(|c| c.max_rel_error < GRADCHECK_TOLERANCE))
    }
}

/// Parameter grouping used in reports: the first two name components.
pub fn module_of(name: &str) -> &str {
    match name.match_indices('.').nth(1) {
        Some((i, _)) => &name[..i],
        None => name,
    }
}

/// Finite-difference check of every variant built from `base` (by default
/// the tiny model) in 64-bit.
pub fn gradcheck(base: Option<&ModelConfig>, corrupt_gradient: bool) -> Result<GradcheckReport> {
    let opts = CheckOptions {
        corrupt_gradient,
        ..CheckOptions::new()
    };
    let variants = Variant::ALL
        .into_iter()
        .map(|variant| {
            let config = match base {
                Some(b) => b.clone().with_variant(variant),
                None => ModelConfig::tiny(variant),
            };
            let (_, store) = Model::assemble::<f64>(config.clone(), GRADCHECK_SEED)?;
            let checks = gradcheck_model(&config, GRADCHECK_SEED, &opts)?;
            Ok(VariantCheck {
                variant,
                parameter_count: store.len(),
                checks,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(GradcheckReport { variants })
}

/// Rows of the ablation table: name, variant and whether the LM is frozen.
pub const ABLATION_ROWS: [(&str, Variant, bool); 5] = [
    ("vilt", Variant::Vilt, false),
    ("vault", Variant::Vault, false),
    ("vault-frozen", Variant::Vault, true),
    ("tomvilt", Variant::TomVilt, false),
    ("tomvault", Variant::TomVault, false),
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub variant: String,
    pub freeze_lm: bool,
    pub aggregate: Option<AggregateMetrics>,
    pub diverged: usize,
    /// Whether every run ended with the LM bytes it started with; absent for
    /// variants without an LM.
    pub lm_unchanged: Option<bool>,
}

/// Trains every ablation row on the same splits; each row's files go to
/// `out_dir/<row name>`.
pub fn ablate(cfg: &RunConfig, out_dir: Option<&Path>) -> Result<Vec<AblationRow>> {
    let splits = load_splits(cfg)?;
    ABLATION_ROWS
        .iter()
        .map(|&(name, variant, freeze_lm)| {
            let row_cfg = RunConfig {
                train: TrainConfig {
                    freeze_lm,
                    ..cfg.train.clone()
                },
                ..cfg.clone()
            };
            let dir = out_dir.map(|d| d.join(name));
            let run = train_on_splits(&row_cfg, variant, &splits, dir.as_deref())?;
            let has_lm = run.config.model.has_lm();
            Ok(AblationRow {
                name: name.to_string(),
                variant: variant.name().to_string(),
                freeze_lm,
                aggregate: run.summary.aggregate.clone(),
                diverged: run.summary.diverged,
                lm_unchanged: has_lm.then(|| run.summary.runs.iter().all(|r| r.lm_checksum_before == r.lm_checksum_after)),
            })
        })
        .collect()
}

fn pct(m: &vault_core::metrics::MeanStd) -> String {
    format!("{:.1} ± {:.1}", 100.0 * m.mean, 100.0 * m.std)
}

pub fn ablation_markdown(rows: &[AblationRow]) -> String {
    let mut out = String::from("| model | accuracy | macro-F1 | weighted-F1 | diverged |\n|---|---|---|---|---|\n");
    for r in rows {
        let cells = match &r.aggregate {
            Some(a) => [pct(&a.accuracy), pct(&a.macro_f1), pct(&a.weighted_f1)],
            None => ["all diverged".into(), "-".into(), "-".into()],
        };
        out.push_str(&format!("| {} | {} | {} | {} | {} |\n", r.name, cells[0], cells[1], cells[2], r.diverged));
    }
    out
}
