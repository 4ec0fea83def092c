use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use heartscreen::pipeline::{self, PipelineConfig};

/// Heart-disease screening pipeline on tabular CSV data.
#[derive(Parser)]
#[command(name = "heartscreen", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed; overrides the config file. One of the two is required.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run directory for artifacts.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Input CSV.
    #[arg(long, global = true)]
    data: Option<PathBuf>,
    /// Ensemble weight grid step.
    #[arg(long, global = true)]
    step: Option<f64>,
    /// Paired bootstrap iterations.
    #[arg(long = "bootstrap-iters", global = true)]
    bootstrap_iters: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic table (written to --data, or <out>/data/synthetic.csv).
    Synth {
        #[arg(long)]
        rows: Option<usize>,
    },
    /// Engineer features, split, fit the scaler.
    Prepare,
    /// Fit every roster model and cross-validate it.
    Train,
    /// Grid-search both boosted models and refit the best settings.
    Tune,
    /// Select members and optimize blend weights on validation.
    Ensemble,
    /// Test-set metrics, thresholds, curves and the paired bootstrap.
    Evaluate,
    /// TreeSHAP attributions for the boosted model.
    Explain,
    /// Fit the shallow surrogate tree.
    Distill,
    /// Assemble report.json from stage artifacts.
    Report,
    /// Score a CSV with the fitted ensemble.
    Score {
        input: PathBuf,
        #[arg(long, short)]
        output: PathBuf,
    },
    /// Every stage in order (synthesizes data first when none is given).
    Run,
    /// Print the effective configuration with all defaults filled in.
    Config,
}

fn load_config(c: &Common) -> Result<PipelineConfig> {
    let mut config = match (&c.config, c.seed) {
        (Some(path), _) => {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            let mut table: toml::Table = toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
            if let Some(seed) = c.seed {
                table.insert("seed".into(), toml::Value::Integer(seed as i64));
            }
            if !table.contains_key("seed") {
                bail!("no seed: set `seed` in {} or pass --seed", path.display());
            }
            PipelineConfig::from_toml(&toml::to_string(&table)?)?
        }
        (None, Some(seed)) => PipelineConfig::with_seed(seed),
        (None, None) => bail!("a seed is required: pass --seed or --config with a `seed` key"),
    };
    if let Some(out) = &c.out {
        config.out = out.clone();
    }
    if let Some(data) = &c.data {
        config.data = Some(data.clone());
    }
    if let Some(step) = c.step {
        config.ensemble.step = step;
    }
    if let Some(b) = c.bootstrap_iters {
        config.evaluation.bootstrap_iterations = b;
    }
    config.validate()?;
    Ok(config)
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let mut config = load_config(&cli.common)?;
    match cli.command {
        Command::Synth { rows } => {
            if let Some(r) = rows {
                config.synth.rows = r;
            }
            let path = config.data.clone().unwrap_or_else(|| config.out.join("data/synthetic.csv"));
            let s = pipeline::cmd_synth(&config, &path)?;
            println!("{}: {} rows, prevalence {:.4}", path.display(), s.rows, s.prevalence);
        }
        Command::Prepare => {
            let s = pipeline::cmd_prepare(&config)?;
            println!(
                "{} rows, prevalence {:.4}; train {} / validation {} / test {}",
                s.full.rows, s.full.prevalence, s.train.rows, s.validation.rows, s.test.rows
            );
        }
        Command::Train => {
            for m in pipeline::cmd_train(&config)?.models {
                println!(
                    "{:<14} validation AUC {:.4}  CV AUC {:.4} +/- {:.4}",
                    m.name, m.validation_auc, m.cv.mean_auc, m.cv.std_auc
                );
            }
        }
        Command::Tune => {
            for m in pipeline::cmd_tune(&config)?.models {
                println!(
                    "{:<14} validation AUC {:.4} -> {:.4}",
                    m.name, m.baseline_validation_auc, m.final_validation_auc
                );
            }
        }
        Command::Ensemble => {
            let s = pipeline::cmd_ensemble(&config)?;
            for (m, w) in s.spec.members.iter().zip(&s.spec.weights) {
                println!("{m:<14} weight {w:.2}");
            }
            println!(
                "validation AUC {:.4} (margin over best member {:+.4})",
                s.validation_auc, s.strategies.margin_over_best_member
            );
        }
        Command::Evaluate => {
            let s = pipeline::cmd_evaluate(&config)?;
            for m in &s.models {
                println!(
                    "{:<14} test AUC {:.4}  recall {:.4}  precision {:.4}  F1 {:.4}",
                    m.name, m.test_auc, m.at_half.recall, m.at_half.precision, m.at_half.f1
                );
            }
            let b = &s.bootstrap;
            println!(
                "{} vs {}: delta AUC {:+.4}, p = {:.4}",
                b.model_a, b.model_b, b.result.observed_delta_auc, b.result.p_value
            );
        }
        Command::Explain => {
            let s = pipeline::cmd_explain(&config)?;
            println!(
                "{} rows, max additivity error {:e}",
                s.sample_size, s.max_additivity_error
            );
            for (f, v) in s.importance.iter().take(10) {
                println!("{f:<24} {v:.4}");
            }
        }
        Command::Distill => {
            let s = pipeline::cmd_distill(&config)?;
            println!(
                "mimicry {:.4} on {} rows, {} leaves; rules in {}",
                s.mimicry_accuracy,
                s.coverage,
                s.leaves,
                config.out.join(&s.rules_path).display()
            );
        }
        Command::Report => {
            pipeline::cmd_report(&config)?;
            println!("{}", config.out.join(pipeline::stages::REPORT_PATH).display());
        }
        Command::Score { input, output } => {
            let t = pipeline::cmd_score(&config, &input, &output)?;
            println!("{} rows scored -> {}", t.rows.len(), output.display());
        }
        Command::Run => {
            let r = pipeline::run_all(&config)?;
            for m in &r.models {
                println!("{:<14} test AUC {:.4}", m.name, m.test_auc);
            }
            println!("{}", config.out.join(pipeline::stages::REPORT_PATH).display());
        }
        Command::Config => print!("{}", config.to_toml()?),
    }
    Ok(())
}
