//! Quantile loss, WQL, over/under-bias masses and category reports.

use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;
use std::collections::BTreeMap;
use std::f64::consts::{PI, SQRT_2};
use std::fmt;
use std::io::Write;
use std::path::Path;

use crate::error::{invalid, Result};
use crate::exec::pairwise_sum;
use crate::series::{HorizonSpec, MagnitudeCategory};

/// Pinball loss without argument checks.
#[inline]
pub fn pinball(y: f64, yhat: f64, q: f64) -> f64 {
    let d = y - yhat;
    if d > 0.0 {
        q * d
    } else {
        (q - 1.0) * d
    }
}

/// `q (y - ŷ)₊ + (1 - q)(ŷ - y)₊`.
pub fn quantile_loss(y: f64, yhat: f64, q: f64) -> Result<f64> {
    check_quantile(q)?;
    Ok(pinball(y, yhat, q))
}

pub fn check_quantile(q: f64) -> Result<()> {
    if q > 0.0 && q < 1.0 {
        Ok(())
    } else {
        invalid(format!("quantile must be in (0,1), got {q}"))
    }
}

/// Σ QL / Σ y. `Ok(None)` when Σ y is zero.
pub fn wql(actuals: &[f64], forecasts: &[f64], q: f64) -> Result<Option<f64>> {
    check_quantile(q)?;
    if actuals.len() != forecasts.len() {
        return invalid("actuals and forecasts differ in length");
    }
    let losses: Vec<f64> = actuals.iter().zip(forecasts).map(|(y, f)| pinball(*y, *f, q)).collect();
    let denom = pairwise_sum(actuals);
    Ok((denom > 0.0).then(|| pairwise_sum(&losses) / denom))
}

/// `(ob, ub)` = `(Σ (ŷ - y)₊, Σ (y - ŷ)₊)`.
pub fn bias_decomposition(actuals: &[f64], forecasts: &[f64]) -> (f64, f64) {
    let over: Vec<f64> = actuals.iter().zip(forecasts).map(|(y, f)| (f - y).max(0.0)).collect();
    let under: Vec<f64> = actuals.iter().zip(forecasts).map(|(y, f)| (y - f).max(0.0)).collect();
    (pairwise_sum(&over), pairwise_sum(&under))
}

/// Per-series, per-date, per-horizon quantile predictions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantileForecast {
    pub quantiles: Vec<f64>,
    pub horizons: HorizonSpec,
    pub rows: Vec<ForecastRow>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForecastRow {
    pub series_id: String,
    pub fcd: usize,
    /// Row-major `[horizon][quantile]`.
    pub values: Vec<f64>,
}

impl ForecastRow {
    pub fn get(&self, n_quantiles: usize, h: usize, q: usize) -> f64 {
        self.values[h * n_quantiles + q]
    }
}

impl QuantileForecast {
    /// Checks non-negativity and non-crossing.
    pub fn check_invariants(&self) -> Result<()> {
        let nq = self.quantiles.len();
        for row in &self.rows {
            if row.values.len() != nq * self.horizons.len() {
                return invalid(format!("row {} has {} values", row.series_id, row.values.len()));
            }
            for h in 0..self.horizons.len() {
                for q in 0..nq {
                    let v = row.get(nq, h, q);
                    if !(v >= 0.0) || (q > 0 && v < row.get(nq, h, q - 1)) {
                        return invalid(format!("row {} horizon {h}: quantiles cross or are negative", row.series_id));
                    }
                }
            }
        }
        Ok(())
    }
}

/// One scored (series, fcd): actuals per horizon and `[horizon][quantile]`
/// forecasts.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalRow {
    pub series_id: String,
    pub fcd: usize,
    pub category: MagnitudeCategory,
    pub actuals: Vec<f64>,
    pub forecasts: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ReportCategory {
    All,
    Magnitude(MagnitudeCategory),
}

impl fmt::Display for ReportCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ReportCategory::All => f.write_str("All"),
            ReportCategory::Magnitude(c) => c.fmt(f),
        }
    }
}

impl Serialize for ReportCategory {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for ReportCategory {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        if s == "All" {
            return Ok(ReportCategory::All);
        }
        MagnitudeCategory::from_label(&s)
            .map(ReportCategory::Magnitude)
            .ok_or_else(|| serde::de::Error::custom(format!("unknown category {s}")))
    }
}

/// Aggregated losses for one (category, quantile).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BiasRow {
    pub category: ReportCategory,
    pub quantile: f64,
    pub ql: f64,
    pub ob: f64,
    pub ub: f64,
    pub sum_y: f64,
    /// `None` when `sum_y` is zero.
    pub wql: Option<f64>,
    pub delta_vs_baseline_pct: Option<f64>,
    pub delta_ob_pct: Option<f64>,
    pub delta_ub_pct: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BiasReport {
    pub rows: Vec<BiasRow>,
}

/// Percent change of `x` over `base`; `0/0` is 0%, `x/0` undefined.
pub fn pct_delta(x: f64, base: f64) -> Option<f64> {
    if base != 0.0 {
        Some((x - base) / base.abs() * 100.0)
    } else if x == 0.0 {
        Some(0.0)
    } else {
        None
    }
}

/// Aggregates `rows` by magnitude category (plus "All") for every quantile.
pub fn report_by_category(rows: &[EvalRow], quantiles: &[f64]) -> Result<BiasReport> {
    for &q in quantiles {
        check_quantile(q)?;
    }
    let nq = quantiles.len();
    let mut groups: BTreeMap<ReportCategory, Vec<&EvalRow>> = BTreeMap::new();
    for row in rows {
        if row.forecasts.len() != row.actuals.len() * nq {
            return invalid(format!(
                "series {} fcd {}: {} forecasts for {} horizons x {nq} quantiles",
                row.series_id,
                row.fcd,
                row.forecasts.len(),
                row.actuals.len()
            ));
        }
        groups.entry(ReportCategory::All).or_default().push(row);
        groups.entry(ReportCategory::Magnitude(row.category)).or_default().push(row);
    }
    let mut out = Vec::new();
    for (cat, members) in &groups {
        let ys: Vec<f64> = members.iter().flat_map(|r| r.actuals.iter().copied()).collect();
        let sum_y = pairwise_sum(&ys);
        for (qi, &q) in quantiles.iter().enumerate() {
            let fs: Vec<f64> = members
                .iter()
                .flat_map(|r| (0..r.actuals.len()).map(move |h| r.forecasts[h * nq + qi]))
                .collect();
            let losses: Vec<f64> = ys.iter().zip(&fs).map(|(y, f)| pinball(*y, *f, q)).collect();
            let ql = pairwise_sum(&losses);
            let (ob, ub) = bias_decomposition(&ys, &fs);
            out.push(BiasRow {
                category: *cat,
                quantile: q,
                ql,
                ob,
                ub,
                sum_y,
                wql: (sum_y > 0.0).then(|| ql / sum_y),
                delta_vs_baseline_pct: None,
                delta_ob_pct: None,
                delta_ub_pct: None,
            });
        }
    }
    Ok(BiasReport { rows: out })
}

impl BiasReport {
    pub fn row(&self, category: ReportCategory, quantile: f64) -> Option<&BiasRow> {
        self.rows
            .iter()
            .find(|r| r.category == category && (r.quantile - quantile).abs() < 1e-12)
    }

    /// Fills the delta columns relative to `baseline`, matching rows by
    /// (category, quantile). Rows missing from the baseline keep `None`.
    pub fn with_baseline(mut self, baseline: &BiasReport) -> Self {
        for row in &mut self.rows {
            if let Some(b) = baseline.row(row.category, row.quantile) {
                row.delta_vs_baseline_pct = pct_delta(row.ql, b.ql);
                row.delta_ob_pct = pct_delta(row.ob, b.ob);
                row.delta_ub_pct = pct_delta(row.ub, b.ub);
            }
        }
        self
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(w);
        w.write_record([
            "category",
            "quantile",
            "ql",
            "ob",
            "ub",
            "wql",
            "delta_vs_baseline_pct",
            "sum_y",
            "delta_ob_pct",
            "delta_ub_pct",
        ])?;
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for r in &self.rows {
            w.write_record([
                r.category.to_string(),
                r.quantile.to_string(),
                r.ql.to_string(),
                r.ob.to_string(),
                r.ub.to_string(),
                opt(r.wql),
                opt(r.delta_vs_baseline_pct),
                r.sum_y.to_string(),
                opt(r.delta_ob_pct),
                opt(r.delta_ub_pct),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    /// Writes `<stem>.csv` and `<stem>.json` into `dir`.
    pub fn save(&self, dir: &Path, stem: &str) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        self.write_csv(std::fs::File::create(dir.join(format!("{stem}.csv")))?)?;
        let mut f = std::fs::File::create(dir.join(format!("{stem}.json")))?;
        serde_json::to_writer_pretty(&mut f, self)?;
        f.write_all(b"\n")?;
        Ok(())
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        Ok(serde_json::from_reader(std::fs::File::open(path)?)?)
    }
}

/// Loss used by [`loss_weight_audit`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum AuditLoss {
    Pinball { q: f64 },
    Mse,
    /// CRPS of a normal predictive centred on the forecast with scale `κ y`.
    CrpsNormal { kappa: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ScaleFn {
    Identity,
    Square,
}

impl ScaleFn {
    pub fn apply(self, y: f64) -> f64 {
        match self {
            ScaleFn::Identity => y,
            ScaleFn::Square => y * y,
        }
    }
}

/// Result of a magnitude-bias audit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FactorizedLoss {
    pub scale: ScaleFn,
    /// `f(r)`: the loss per unit of `g(y)`.
    pub relative_factor: f64,
    pub per_series_loss: Vec<f64>,
    /// Σ g(y) per series.
    pub predicted_weights: Vec<f64>,
    /// max over series of |realized share − predicted share| / predicted share.
    pub max_relative_deviation: f64,
}

fn std_normal_cdf(z: f64) -> f64 {
    0.5 * erfc(-z / SQRT_2)
}

fn std_normal_pdf(z: f64) -> f64 {
    (-0.5 * z * z).exp() / (2.0 * PI).sqrt()
}

/// CRPS of N(mu, sigma²) at y.
pub fn crps_normal(y: f64, mu: f64, sigma: f64) -> f64 {
    let z = (y - mu) / sigma;
    sigma * (z * (2.0 * std_normal_cdf(z) - 1.0) + 2.0 * std_normal_pdf(z) - 1.0 / PI.sqrt())
}

/// Forecasts every point with the same relative error `r` and checks that
/// each series' share of the total loss equals its share of Σ g(y).
pub fn loss_weight_audit(dataset: &[Vec<f64>], r: f64, loss: AuditLoss) -> Result<FactorizedLoss> {
    if dataset.is_empty() || dataset.iter().any(Vec::is_empty) {
        return invalid("audit needs non-empty series");
    }
    if r == 0.0 || !r.is_finite() {
        return invalid("relative error must be finite and non-zero");
    }
    if dataset.iter().flatten().any(|y| !(*y > 0.0 && y.is_finite())) {
        return invalid("relative error is undefined for y <= 0");
    }
    let (scale, pointwise): (ScaleFn, Box<dyn Fn(f64) -> f64>) = match loss {
        AuditLoss::Pinball { q } => {
            check_quantile(q)?;
            (ScaleFn::Identity, Box::new(move |y| pinball(y, (1.0 + r) * y, q)))
        }
        AuditLoss::Mse => (ScaleFn::Square, Box::new(move |y: f64| {
            let e = r * y;
            e * e
        })),
        AuditLoss::CrpsNormal { kappa } => {
            if !(kappa > 0.0) {
                return invalid("kappa must be positive");
            }
            (ScaleFn::Identity, Box::new(move |y| crps_normal(y, (1.0 + r) * y, kappa * y)))
        }
    };
    let per_series_loss: Vec<f64> = dataset
        .iter()
        .map(|s| pairwise_sum(&s.iter().map(|&y| pointwise(y)).collect::<Vec<_>>()))
        .collect();
    let predicted_weights: Vec<f64> = dataset
        .iter()
        .map(|s| pairwise_sum(&s.iter().map(|&y| scale.apply(y)).collect::<Vec<_>>()))
        .collect();
    let total_loss = pairwise_sum(&per_series_loss);
    let total_w = pairwise_sum(&predicted_weights);
    let max_relative_deviation = per_series_loss
        .iter()
        .zip(&predicted_weights)
        .map(|(l, w)| {
            let predicted = w / total_w;
            ((l / total_loss) - predicted).abs() / predicted
        })
        .fold(0.0, f64::max);
    Ok(FactorizedLoss {
        scale,
        relative_factor: total_loss / total_w,
        per_series_loss,
        predicted_weights,
        max_relative_deviation,
    })
}
