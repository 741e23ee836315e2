//! Model comparison studies: architecture ablation, head-count sweep and the
//! sampling-cutoff bias study. Every run of a study shares the dataset drawn
//! for its seed, and the seed also drives model initialization and sampling.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::encoder::Gating;
use crate::error::{invalid, ForecastError, Result};
use crate::exec::{try_map_indexed, ExecMode};
use crate::metrics::{BiasReport, ReportCategory};
use crate::model::{evaluate, train_records, EvalConfig, Evaluation, ModelConfig};
use crate::series::{empirical_quantile, gen_mixed_magnitude_dataset, MixConfig, TimeSeriesRecord};
use crate::sparse_arm::{SparseArmConfig, SparseFamily};

/// Architecture variants of the ablation grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// Single head, every series through the main arm.
    V9,
    /// Single head, sparse series forced to zero.
    V11,
    /// Moment-gated multi-head encoder, no sparse arm.
    V13,
    /// Single head, truncated-normal sparse arm.
    V15,
    /// Moment-gated multi-head, truncated-normal sparse arm.
    V16,
    /// Single head, exponential sparse arm.
    V17,
    /// Moment-gated multi-head, exponential sparse arm.
    V18,
    /// Multi-head with concatenated heads, exponential sparse arm.
    V19,
}

impl Variant {
    pub const ALL: [Variant; 8] = [
        Variant::V9,
        Variant::V11,
        Variant::V13,
        Variant::V15,
        Variant::V16,
        Variant::V17,
        Variant::V18,
        Variant::V19,
    ];
    pub const BASELINE: Variant = Variant::V9;

    pub fn id(self) -> &'static str {
        match self {
            Variant::V9 => "v9",
            Variant::V11 => "v11",
            Variant::V13 => "v13",
            Variant::V15 => "v15",
            Variant::V16 => "v16",
            Variant::V17 => "v17",
            Variant::V18 => "v18",
            Variant::V19 => "v19",
        }
    }

    /// `base` with this variant's architecture. The multi-head variants keep
    /// the head count of `base` (at least 2); sparse-arm sizes come from
    /// `base.sparse` when present.
    pub fn apply(self, base: &ModelConfig) -> ModelConfig {
        let mut cfg = base.clone();
        let multi = base.encoder.heads.max(2);
        let arm = |family| {
            Some(SparseArmConfig {
                family,
                ..base.sparse.clone().unwrap_or_default()
            })
        };
        let (heads, gating, sparse) = match self {
            Variant::V9 => (1, Gating::UniformConcat, None),
            Variant::V11 => (1, Gating::UniformConcat, arm(SparseFamily::Zero)),
            Variant::V13 => (multi, Gating::MomentGated, None),
            Variant::V15 => (1, Gating::UniformConcat, arm(SparseFamily::TruncatedNormal)),
            Variant::V16 => (multi, Gating::MomentGated, arm(SparseFamily::TruncatedNormal)),
            Variant::V17 => (1, Gating::UniformConcat, arm(SparseFamily::Exponential)),
            Variant::V18 => (multi, Gating::MomentGated, arm(SparseFamily::Exponential)),
            Variant::V19 => (multi, Gating::UniformConcat, arm(SparseFamily::Exponential)),
        };
        cfg.encoder.heads = heads;
        cfg.encoder.gating = gating;
        cfg.sparse = sparse;
        cfg
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl FromStr for Variant {
    type Err = ForecastError;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.trim().to_ascii_lowercase();
        Variant::ALL
            .into_iter()
            .find(|v| v.id() == key)
            .map_or_else(|| invalid(format!("unknown variant {s:?}")), Ok)
    }
}

/// Settings shared by every study.
#[derive(Clone, Debug, PartialEq)]
pub struct StudySetup {
    pub dataset: MixConfig,
    /// Template model; the training seed is replaced per run.
    pub model: ModelConfig,
    pub eval: EvalConfig,
    /// How independent runs are scheduled. Each run is deterministic on its
    /// own, so this does not change results.
    pub exec: ExecMode,
}

fn check_seeds(seeds: &[u64]) -> Result<()> {
    if seeds.is_empty() {
        return invalid("at least one seed is required");
    }
    Ok(())
}

fn datasets(setup: &StudySetup, seeds: &[u64]) -> Result<Vec<Vec<TimeSeriesRecord>>> {
    try_map_indexed(setup.exec, seeds.len(), |i| gen_mixed_magnitude_dataset(&setup.dataset, seeds[i]))
}

/// Trains `config` (with `seed`) on `records` and scores it on the backtest
/// window.
pub fn train_and_evaluate(
    records: &[TimeSeriesRecord],
    train_len: usize,
    config: &ModelConfig,
    seed: u64,
    eval: &EvalConfig,
) -> Result<Evaluation> {
    let mut cfg = config.clone();
    cfg.training.seed = seed;
    let model = train_records(records, train_len, &cfg)?.to_model()?;
    evaluate(&model, records, train_len, eval)
}

/// Runs every `(config, seed)` pair; results are ordered config-major.
fn run_grid(setup: &StudySetup, configs: &[ModelConfig], seeds: &[u64]) -> Result<Vec<BiasReport>> {
    check_seeds(seeds)?;
    for c in configs {
        c.validate()?;
    }
    let data = datasets(setup, seeds)?;
    try_map_indexed(setup.exec, configs.len() * seeds.len(), |k| {
        let (ci, si) = (k / seeds.len(), k % seeds.len());
        train_and_evaluate(&data[si], setup.dataset.train_len, &configs[ci], seeds[si], &setup.eval).map(|e| e.report)
    })
}

fn median(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = values.flatten().collect();
    (!v.is_empty()).then(|| empirical_quantile(&v, 0.5))
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_writer(BufWriter::new(File::create(path)?));
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut f = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut f, value)?;
    f.write_all(b"\n")?;
    f.flush()?;
    Ok(())
}

/// `(category, quantile)` keys in report order, over the union of reports.
fn cells<'a>(reports: impl Iterator<Item = &'a BiasReport>) -> Vec<(ReportCategory, f64)> {
    let mut seen: BTreeMap<(ReportCategory, u64), f64> = BTreeMap::new();
    for r in reports {
        for row in &r.rows {
            seen.insert((row.category, row.quantile.to_bits()), row.quantile);
        }
    }
    seen.into_iter().map(|((c, _), q)| (c, q)).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationCell {
    pub variant: Variant,
    pub seed: u64,
    pub category: ReportCategory,
    pub quantile: f64,
    pub wql: Option<f64>,
    pub baseline_wql: Option<f64>,
    /// Change in quantile loss over the baseline, percent.
    pub delta_pct: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationSummaryRow {
    pub variant: Variant,
    pub category: ReportCategory,
    pub quantile: f64,
    pub median_wql: Option<f64>,
    pub median_baseline_wql: Option<f64>,
    /// Median over seeds of the per-seed delta.
    pub median_delta_pct: Option<f64>,
    /// Delta between the two medians.
    pub delta_of_medians_pct: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationResult {
    pub baseline: Variant,
    pub variants: Vec<Variant>,
    pub seeds: Vec<u64>,
    pub cells: Vec<AblationCell>,
    pub summary: Vec<AblationSummaryRow>,
}

impl AblationResult {
    pub fn summary_row(&self, variant: Variant, category: ReportCategory, quantile: f64) -> Option<&AblationSummaryRow> {
        self.summary
            .iter()
            .find(|r| r.variant == variant && r.category == category && (r.quantile - quantile).abs() < 1e-12)
    }

    /// Writes `ablation.csv` (per seed), `ablation_summary.csv` and
    /// `ablation_summary.json`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        write_csv(&dir.join("ablation.csv"), &self.cells)?;
        write_csv(&dir.join("ablation_summary.csv"), &self.summary)?;
        write_json(&dir.join("ablation_summary.json"), self)
    }
}

/// Trains every variant (plus the baseline if absent) on each seed's dataset
/// and reports WQL changes against the baseline of the same seed.
pub fn run_ablation(variants: &[Variant], setup: &StudySetup, seeds: &[u64]) -> Result<AblationResult> {
    if variants.is_empty() {
        return invalid("at least one variant is required");
    }
    let mut all = vec![Variant::BASELINE];
    for &v in variants {
        if !all.contains(&v) {
            all.push(v);
        }
    }
    let configs: Vec<ModelConfig> = all.iter().map(|v| v.apply(&setup.model)).collect();
    let reports = run_grid(setup, &configs, seeds)?;
    let ns = seeds.len();
    let report = |vi: usize, si: usize| &reports[vi * ns + si];

    let mut out_variants = vec![Variant::BASELINE];
    out_variants.extend(variants.iter().copied().filter(|v| *v != Variant::BASELINE));
    let keys = cells(reports.iter());
    let mut table = Vec::new();
    let mut summary = Vec::new();
    for &v in &out_variants {
        let vi = all.iter().position(|a| *a == v).expect("variant trained");
        let mut per_seed: Vec<Vec<AblationCell>> = Vec::new();
        for (si, &seed) in seeds.iter().enumerate() {
            let base = report(0, si);
            let rep = report(vi, si).clone().with_baseline(base);
            per_seed.push(
                keys.iter()
                    .filter_map(|&(category, quantile)| {
                        let row = rep.row(category, quantile)?;
                        Some(AblationCell {
                            variant: v,
                            seed,
                            category,
                            quantile,
                            wql: row.wql,
                            baseline_wql: base.row(category, quantile).and_then(|b| b.wql),
                            delta_pct: row.delta_vs_baseline_pct,
                        })
                    })
                    .collect(),
            );
        }
        for &(category, quantile) in &keys {
            let of = |f: fn(&AblationCell) -> Option<f64>| {
                median(
                    per_seed
                        .iter()
                        .flatten()
                        .filter(|c| c.category == category && c.quantile == quantile)
                        .map(f),
                )
            };
            let (m, mb) = (of(|c| c.wql), of(|c| c.baseline_wql));
            summary.push(AblationSummaryRow {
                variant: v,
                category,
                quantile,
                median_wql: m,
                median_baseline_wql: mb,
                median_delta_pct: of(|c| c.delta_pct),
                delta_of_medians_pct: m.zip(mb).and_then(|(m, b)| crate::metrics::pct_delta(m, b)),
            });
        }
        table.extend(per_seed.into_iter().flatten());
    }
    Ok(AblationResult {
        baseline: Variant::BASELINE,
        variants: out_variants,
        seeds: seeds.to_vec(),
        cells: table,
        summary,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadSweepCell {
    pub heads: usize,
    pub seed: u64,
    pub category: ReportCategory,
    pub quantile: f64,
    pub wql: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadSweepSummaryRow {
    pub heads: usize,
    pub category: ReportCategory,
    pub quantile: f64,
    pub median_wql: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadSweepResult {
    pub heads: Vec<usize>,
    pub seeds: Vec<u64>,
    pub cells: Vec<HeadSweepCell>,
    pub summary: Vec<HeadSweepSummaryRow>,
}

impl HeadSweepResult {
    /// Writes `head_sweep.csv`, `head_sweep_summary.csv` and
    /// `head_sweep_summary.json`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        write_csv(&dir.join("head_sweep.csv"), &self.cells)?;
        write_csv(&dir.join("head_sweep_summary.csv"), &self.summary)?;
        write_json(&dir.join("head_sweep_summary.json"), self)
    }
}

/// Full model (concatenated heads, exponential sparse arm) per head count.
pub fn head_count_sweep(g_values: &[usize], setup: &StudySetup, seeds: &[u64]) -> Result<HeadSweepResult> {
    if g_values.is_empty() || g_values.contains(&0) {
        return invalid("head counts must be a non-empty list of values >= 1");
    }
    let configs: Vec<ModelConfig> = g_values
        .iter()
        .map(|&g| {
            let mut c = Variant::V19.apply(&setup.model);
            c.encoder.heads = g;
            c
        })
        .collect();
    let reports = run_grid(setup, &configs, seeds)?;
    let ns = seeds.len();
    let keys = cells(reports.iter());
    let mut table = Vec::new();
    let mut summary = Vec::new();
    for (gi, &heads) in g_values.iter().enumerate() {
        for &(category, quantile) in &keys {
            let wqls: Vec<Option<f64>> = (0..ns)
                .map(|si| reports[gi * ns + si].row(category, quantile).and_then(|r| r.wql))
                .collect();
            summary.push(HeadSweepSummaryRow {
                heads,
                category,
                quantile,
                median_wql: median(wqls.iter().copied()),
            });
        }
        for (si, &seed) in seeds.iter().enumerate() {
            for &(category, quantile) in &keys {
                table.push(HeadSweepCell {
                    heads,
                    seed,
                    category,
                    quantile,
                    wql: reports[gi * ns + si].row(category, quantile).and_then(|r| r.wql),
                });
            }
        }
    }
    Ok(HeadSweepResult {
        heads: g_values.to_vec(),
        seeds: seeds.to_vec(),
        cells: table,
        summary,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BiasSide {
    Ob,
    Ub,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BiasSamplingCell {
    pub seed: u64,
    pub category: ReportCategory,
    pub quantile: f64,
    pub side: BiasSide,
    /// Bias mass of the model trained with the first cutoff.
    pub reference: f64,
    /// Bias mass of the model trained with the second cutoff.
    pub alternative: f64,
    pub delta_pct: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BiasSamplingSummaryRow {
    pub category: ReportCategory,
    pub quantile: f64,
    pub side: BiasSide,
    pub median_reference: Option<f64>,
    pub median_alternative: Option<f64>,
    pub median_delta_pct: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BiasSamplingResult {
    pub cutoffs: [f64; 2],
    pub seeds: Vec<u64>,
    pub cells: Vec<BiasSamplingCell>,
    pub summary: Vec<BiasSamplingSummaryRow>,
}

impl BiasSamplingResult {
    pub fn summary_row(&self, category: ReportCategory, quantile: f64, side: BiasSide) -> Option<&BiasSamplingSummaryRow> {
        self.summary
            .iter()
            .find(|r| r.category == category && r.side == side && (r.quantile - quantile).abs() < 1e-12)
    }

    /// Writes `bias_sampling.csv`, `bias_sampling_summary.csv` and
    /// `bias_sampling_summary.json`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        write_csv(&dir.join("bias_sampling.csv"), &self.cells)?;
        write_csv(&dir.join("bias_sampling_summary.csv"), &self.summary)?;
        write_json(&dir.join("bias_sampling_summary.json"), self)
    }
}

/// Trains the template model with each sampling cutoff and compares the
/// over- and under-bias masses of the second against the first.
pub fn run_bias_sampling_experiment(setup: &StudySetup, cutoffs: [f64; 2], seeds: &[u64]) -> Result<BiasSamplingResult> {
    let configs: Vec<ModelConfig> = cutoffs
        .iter()
        .map(|&c| {
            let mut m = setup.model.clone();
            m.training.cutoff_quantile = c;
            m
        })
        .collect();
    let reports = run_grid(setup, &configs, seeds)?;
    let ns = seeds.len();
    let keys = cells(reports.iter());
    let mut table = Vec::new();
    for (si, &seed) in seeds.iter().enumerate() {
        let (a, b) = (&reports[si], &reports[ns + si]);
        let delta = b.clone().with_baseline(a);
        for &(category, quantile) in &keys {
            let (Some(ra), Some(rb), Some(d)) = (a.row(category, quantile), b.row(category, quantile), delta.row(category, quantile))
            else {
                continue;
            };
            table.push(BiasSamplingCell {
                seed,
                category,
                quantile,
                side: BiasSide::Ob,
                reference: ra.ob,
                alternative: rb.ob,
                delta_pct: d.delta_ob_pct,
            });
            table.push(BiasSamplingCell {
                seed,
                category,
                quantile,
                side: BiasSide::Ub,
                reference: ra.ub,
                alternative: rb.ub,
                delta_pct: d.delta_ub_pct,
            });
        }
    }
    let mut summary = Vec::new();
    for &(category, quantile) in &keys {
        for side in [BiasSide::Ob, BiasSide::Ub] {
            let sel = || {
                table
                    .iter()
                    .filter(move |c| c.category == category && c.quantile == quantile && c.side == side)
            };
            summary.push(BiasSamplingSummaryRow {
                category,
                quantile,
                side,
                median_reference: median(sel().map(|c| Some(c.reference))),
                median_alternative: median(sel().map(|c| Some(c.alternative))),
                median_delta_pct: median(sel().map(|c| c.delta_pct)),
            });
        }
    }
    Ok(BiasSamplingResult {
        cutoffs,
        seeds: seeds.to_vec(),
        cells: table,
        summary,
    })
}
