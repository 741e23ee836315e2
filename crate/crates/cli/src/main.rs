use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::json;

use spade_core::exec::init_threads;
use spade_core::experiments::{
    head_count_sweep, run_ablation, run_bias_sampling_experiment, run_collapse_sim, CollapseConfig, ExperimentConfig,
    ExperimentSpec, Variant,
};
use spade_core::metrics::BiasReport;
use spade_core::model::{evaluate, train, EvalConfig, TrainedModel};
use spade_core::series::{categorize_magnitude, gen_mixed_magnitude_dataset, read_dataset, write_dataset, Dataset, DatasetMeta};

/// Sparsity-robust quantile forecasting: data generation, training,
/// evaluation and experiments.
#[derive(Parser)]
#[command(name = "forecast", version)]
struct Cli {
    /// Worker threads for data-parallel work (defaults to all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic mixed-magnitude dataset.
    GenData {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model on a dataset directory.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Backtest a trained model.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Report JSON of a previous evaluation to compute deltas against.
        #[arg(long)]
        baseline: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        stride: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Simulations.
    Sim {
        #[command(subcommand)]
        which: Sim,
    },
    /// Train and compare architecture variants.
    Ablate {
        /// Comma-separated variant ids, e.g. v9,v11,v19.
        #[arg(long)]
        variants: String,
        #[command(flatten)]
        study: StudyArgs,
    },
    /// Full model per encoder head count.
    SweepHeads {
        /// Comma-separated head counts.
        #[arg(long)]
        g: String,
        #[command(flatten)]
        study: StudyArgs,
    },
    /// Compare two importance-sampling cutoffs.
    BiasSampling {
        /// Two comma-separated cutoff quantiles: reference, alternative.
        #[arg(long, default_value = "0.8,0.05")]
        cutoffs: String,
        #[command(flatten)]
        study: StudyArgs,
    },
}

#[derive(Subcommand)]
enum Sim {
    /// Percentile bands of a convolutional forecaster on sparse histories.
    Collapse {
        /// Comma-separated sparsity levels in [0, 1).
        #[arg(long, default_value = "0.0,0.5,0.9")]
        sparsity: String,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        clip_nonnegative: bool,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct StudyArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Comma-separated seeds.
    #[arg(long)]
    seeds: String,
    #[arg(long)]
    out: PathBuf,
}

fn parse_list<T: FromStr>(s: &str, what: &str) -> Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    s.split(',')
        .filter(|p| !p.trim().is_empty())
        .map(|p| p.trim().parse::<T>().map_err(|e| anyhow::anyhow!("bad {what} {p:?}: {e}")))
        .collect()
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    let mut f = BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?);
    serde_json::to_writer_pretty(&mut f, value)?;
    f.write_all(b"\n")?;
    f.flush()?;
    Ok(())
}

fn load_config(path: &Option<PathBuf>) -> Result<ExperimentConfig> {
    match path {
        Some(p) => ExperimentConfig::load(p).with_context(|| format!("loading {}", p.display())),
        None => Ok(ExperimentConfig::default()),
    }
}

fn study_spec(id: &str, args: &StudyArgs) -> Result<(ExperimentSpec, ExperimentConfig)> {
    let spec = ExperimentSpec {
        id: id.into(),
        config: args.config.clone(),
        seeds: parse_list(&args.seeds, "seed")?,
        out_dir: args.out.clone(),
    };
    spec.prepare()?;
    let cfg = spec.load_config()?;
    Ok((spec, cfg))
}

fn gen_data(config: &Option<PathBuf>, seed: u64, out: &Path) -> Result<()> {
    let cfg = load_config(config)?;
    let mix = cfg.dataset.mix()?;
    let records = gen_mixed_magnitude_dataset(&mix, seed)?;
    let dataset = Dataset {
        meta: DatasetMeta {
            train_len: mix.train_len,
            window: mix.window,
            future_leads: cfg.model.horizons.window(),
        },
        records,
    };
    write_dataset(out, &dataset)?;
    let mut counts = std::collections::BTreeMap::new();
    for r in &dataset.records {
        let c = categorize_magnitude(r.trailing_sum(mix.train_len - 1, mix.window))?;
        *counts.entry(c.to_string()).or_insert(0usize) += 1;
    }
    write_json(
        &out.join("gen_summary.json"),
        &json!({ "seed": seed, "series": dataset.records.len(), "meta": dataset.meta, "categories": counts }),
    )
}

fn train_cmd(config: &Option<PathBuf>, data: &Path, seed: u64, out: &Path) -> Result<()> {
    let mut cfg = load_config(config)?;
    cfg.model.training.seed = seed;
    let dataset = read_dataset(data).with_context(|| format!("reading {}", data.display()))?;
    let trained = train(&dataset, &cfg.model)?;
    std::fs::create_dir_all(out)?;
    trained.save(&out.join("model.json"))?;
    let mut w = csv::Writer::from_path(out.join("training_log.csv"))?;
    w.write_record(["epoch", "loss"])?;
    for (e, l) in trained.log.epoch_loss.iter().enumerate() {
        w.write_record([(e + 1).to_string(), l.to_string()])?;
    }
    w.flush()?;
    write_json(
        &out.join("train_summary.json"),
        &json!({
            "seed": seed,
            "series": dataset.records.len(),
            "train_len": dataset.meta.train_len,
            "final_loss": trained.log.epoch_loss.last(),
            "config": trained.config,
        }),
    )
}

fn eval_cmd(model: &Path, data: &Path, baseline: &Option<PathBuf>, stride: usize, out: &Path) -> Result<()> {
    let trained = TrainedModel::load(model).with_context(|| format!("loading {}", model.display()))?;
    let model = trained.to_model()?;
    let dataset = read_dataset(data).with_context(|| format!("reading {}", data.display()))?;
    let cfg = EvalConfig {
        stride,
        ..EvalConfig::default()
    };
    let ev = evaluate(&model, &dataset.records, dataset.meta.train_len, &cfg)?;
    let report = match baseline {
        Some(p) => ev.report.with_baseline(&BiasReport::load_json(p).with_context(|| format!("loading {}", p.display()))?),
        None => ev.report,
    };
    std::fs::create_dir_all(out)?;
    report.save(out, "report")?;

    let qs = &model.config.quantiles;
    let hs = model.config.horizons.pairs();
    let mut w = csv::Writer::from_writer(BufWriter::new(File::create(out.join("forecasts.csv"))?));
    w.write_record(["series_id", "fcd", "category", "lead", "span", "quantile", "actual", "forecast"])?;
    for row in &ev.rows {
        for (h, hz) in hs.iter().enumerate() {
            for (qi, q) in qs.iter().enumerate() {
                w.write_record([
                    row.series_id.clone(),
                    row.fcd.to_string(),
                    row.category.to_string(),
                    hz.lead.to_string(),
                    hz.span.to_string(),
                    q.to_string(),
                    row.actuals[h].to_string(),
                    row.forecasts[h * qs.len() + qi].to_string(),
                ])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

fn collapse(sparsity: &str, seed: u64, clip: bool, out: &Path) -> Result<()> {
    let levels: Vec<f64> = parse_list(sparsity, "sparsity")?;
    let cfg = CollapseConfig {
        clip_nonnegative: clip,
        ..CollapseConfig::default()
    };
    let res = run_collapse_sim(&levels, seed, &cfg)?;
    for w in &res.warnings {
        eprintln!("warning: {w}");
    }
    res.save(out)?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        init_threads(n)?;
    }
    match cli.command {
        Command::GenData { config, seed, out } => gen_data(&config, seed, &out),
        Command::Train { config, data, seed, out } => train_cmd(&config, &data, seed, &out),
        Command::Eval {
            model,
            data,
            baseline,
            stride,
            out,
        } => eval_cmd(&model, &data, &baseline, stride, &out),
        Command::Sim {
            which:
                Sim::Collapse {
                    sparsity,
                    seed,
                    clip_nonnegative,
                    out,
                },
        } => collapse(&sparsity, seed, clip_nonnegative, &out),
        Command::Ablate { variants, study } => {
            let variants: Vec<Variant> = parse_list(&variants, "variant")?;
            let (spec, cfg) = study_spec("ablate", &study)?;
            run_ablation(&variants, &cfg.study_setup()?, &spec.seeds)?.save(&spec.out_dir)?;
            Ok(())
        }
        Command::SweepHeads { g, study } => {
            let g: Vec<usize> = parse_list(&g, "head count")?;
            let (spec, cfg) = study_spec("sweep-heads", &study)?;
            head_count_sweep(&g, &cfg.study_setup()?, &spec.seeds)?.save(&spec.out_dir)?;
            Ok(())
        }
        Command::BiasSampling { cutoffs, study } => {
            let c: Vec<f64> = parse_list(&cutoffs, "cutoff")?;
            let [a, b] = c[..] else {
                bail!("expected exactly two cutoffs, got {}", c.len());
            };
            let (spec, cfg) = study_spec("bias-sampling", &study)?;
            run_bias_sampling_experiment(&cfg.study_setup()?, [a, b], &spec.seeds)?.save(&spec.out_dir)?;
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
