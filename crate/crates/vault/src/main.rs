use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use vault::config::RunConfig;
use vault::fixture::write_fixture;
use vault::imageio::ImageKind;
use vault::pipeline::SplitName;
use vault::run::{ablate, ablation_markdown, eval_checkpoint, gradcheck, module_of, train_variant, GRADCHECK_TOLERANCE};
use vault::{Error, Result};
use vault_core::vlm::Variant;

const EXIT_CHECK_FAILED: u8 = 1;
const EXIT_USAGE: u8 = 2;
const EXIT_ALL_DIVERGED: u8 = 3;

/// Train and evaluate image-text sentiment classifiers whose language input
/// can come from a separate language model.
#[derive(Parser)]
#[command(version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic keyword-and-colour dataset (manifest plus images).
    Fixture {
        /// Number of examples (at least 10).
        #[arg(long, default_value_t = 16)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "png", value_parser = ["png", "ppm"])]
        format: String,
    },
    /// Train one variant for every configured seed.
    Train {
        /// JSON run configuration.
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_parser = ["vilt", "vault", "tomvilt", "tomvault"])]
        variant: String,
        /// Directory for checkpoints, vocabularies and results.
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Score a checkpoint on one split of a manifest (centre crops).
    Eval {
        /// A `seed<N>.vltc` file written by `train`.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Manifest to split; defaults to the one the run was trained on.
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long, default_value = "test", value_parser = ["train", "val", "test"])]
        split: String,
    },
    /// Compare backpropagated gradients with central finite differences for
    /// every parameter of all four variants in 64-bit.
    Gradcheck {
        /// JSON run configuration whose `model` section replaces the tiny model.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Perturb one analytic gradient entry; the check must then fail.
        #[arg(long, default_value_t = false)]
        corrupt_gradient: bool,
    },
    /// Train vilt, vault, vault with a frozen LM, tomvilt and tomvault under
    /// one configuration and tabulate their test metrics.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
    },
}

fn json<T: serde::Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("reports serialize")
}

fn write(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn run(cli: Cli) -> Result<u8> {
    match cli.command {
        Command::Fixture { n, seed, out, format } => {
            let kind = ImageKind::parse(&format).expect("restricted by clap");
            let manifest = write_fixture(&out, n, seed, kind)?;
            println!("wrote {n} examples to {}", manifest.display());
        }
        Command::Train { config, variant, out_dir } => {
            let cfg = RunConfig::load(&config)?;
            let variant = Variant::parse(&variant).expect("restricted by clap");
            let run = train_variant(&cfg, variant, Some(&out_dir))?;
            println!("{}", json(&run.summary));
            if run.all_diverged() {
                eprintln!("every seed diverged");
                return Ok(EXIT_ALL_DIVERGED);
            }
        }
        Command::Eval {
            checkpoint,
            manifest,
            split,
        } => {
            let split = SplitName::parse(&split).expect("restricted by clap");
            let metrics = eval_checkpoint(&checkpoint, manifest.as_deref(), split)?;
            println!("{}", json(&metrics));
        }
        Command::Gradcheck {
            config,
            corrupt_gradient,
        } => {
            let base = config.map(|p| RunConfig::load(&p)).transpose()?.map(|c| c.model);
            let report = gradcheck(base.as_ref(), corrupt_gradient)?;
            for v in &report.variants {
                println!("{} ({}/{} parameters checked)", v.variant.name(), v.checks.len(), v.parameter_count);
                let mut modules: BTreeMap<&str, f64> = BTreeMap::new();
                for c in &v.checks {
                    let e = modules.entry(module_of(&c.name)).or_insert(0.0);
                    *e = e.max(c.max_rel_error);
                }
                for (module, err) in modules {
                    println!("  {module:<24} {err:.3e}");
                }
            }
            if let Some((variant, worst)) = report.worst() {
                println!(
                    "worst: {}/{} max relative error {:.3e} (analytic {:.6e}, numeric {:.6e})",
                    variant.name(),
                    worst.name,
                    worst.max_rel_error,
                    worst.analytic,
                    worst.numeric
                );
                if !report.passed() {
                    eprintln!(
                        "gradient check failed: {}/{} exceeds {GRADCHECK_TOLERANCE:e}",
                        variant.name(),
                        worst.name
                    );
                    return Ok(EXIT_CHECK_FAILED);
                }
            }
        }
        Command::Ablate { config, out_dir } => {
            let cfg = RunConfig::load(&config)?;
            let rows = ablate(&cfg, Some(&out_dir))?;
            let table = ablation_markdown(&rows);
            write(&out_dir.join("ablation.md"), &table)?;
            write(&out_dir.join("ablation.json"), &json(&rows))?;
            print!("{table}");
        }
    }
    Ok(0)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_USAGE)
        }
    }
}
