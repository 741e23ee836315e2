//! Time series data model, magnitude buckets, sparsity, horizons and
//! importance-sampling weights.

mod io;
mod synth;

pub use io::{read_dataset, write_dataset, write_dataset_csv, Dataset, DatasetMeta};
pub(crate) use synth::poisson_sparse_with;
pub use synth::{gen_mixed_magnitude_dataset, gen_poisson_sparse, CategorySpec, MixConfig, D1_SHARES, D2_SHARES, D3_SHARES};

use serde::{Deserialize, Serialize};
use std::fmt;

use crate::error::{invalid, Result};

/// Default trailing window (weekly grain).
pub const DEFAULT_WINDOW: usize = 52;

/// One product / series.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeSeriesRecord {
    pub id: String,
    /// Non-negative demand per period.
    pub target: Vec<f64>,
    /// `time × d_p` observed covariates.
    pub past_cov: Vec<Vec<f64>>,
    /// `time × d_f` calendar of known-future covariates. The covariate seen at
    /// forecast date `t` for span-1 lead `l` is row `t + l`.
    pub known_future: Vec<Vec<f64>>,
    pub static_cov: Vec<f64>,
    /// Period the product was first listed. May be negative (listed before
    /// the recorded history starts).
    pub first_listing: i64,
}

impl TimeSeriesRecord {
    pub fn len(&self) -> usize {
        self.target.len()
    }

    pub fn is_empty(&self) -> bool {
        self.target.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.past_cov.len() != self.target.len() {
            return invalid(format!(
                "series {}: past_cov has {} rows, target has {}",
                self.id,
                self.past_cov.len(),
                self.target.len()
            ));
        }
        if !self.known_future.is_empty() && self.known_future.len() != self.target.len() {
            return invalid(format!(
                "series {}: known_future has {} rows, target has {}",
                self.id,
                self.known_future.len(),
                self.target.len()
            ));
        }
        if let Some((t, y)) = self
            .target
            .iter()
            .enumerate()
            .find(|(_, y)| !(y.is_finite() && **y >= 0.0))
        {
            return invalid(format!("series {}: target[{t}] = {y} is not a non-negative number", self.id));
        }
        if let Some(first) = self.target.iter().position(|&y| y > 0.0) {
            if self.first_listing > first as i64 {
                return invalid(format!(
                    "series {}: first listing {} after first sale at {first}",
                    self.id, self.first_listing
                ));
            }
        }
        Ok(())
    }

    /// Sum of the target over `(fcd - window, fcd]`, truncated at the start.
    pub fn trailing_sum(&self, fcd: usize, window: usize) -> f64 {
        let end = (fcd + 1).min(self.target.len());
        let start = (fcd + 1).saturating_sub(window).min(end);
        self.target[start..end].iter().sum()
    }

    /// Known-future covariates for span-1 lead `lead` issued at `fcd`.
    pub fn future_cov(&self, fcd: usize, lead: usize) -> Option<&[f64]> {
        self.known_future.get(fcd + lead).map(Vec::as_slice)
    }

    /// Demand summed over the span starting `lead` periods after `fcd`.
    pub fn span_target(&self, fcd: usize, h: Horizon) -> Option<f64> {
        let start = fcd + h.lead;
        let end = start + h.span;
        (end <= self.target.len()).then(|| self.target[start..end].iter().sum())
    }
}

/// Velocity bucket of a trailing-window demand aggregate.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum MagnitudeCategory {
    SuperFast,
    Fast,
    Medium,
    Slow,
    SuperSlow,
    Zero,
}

impl MagnitudeCategory {
    pub const ALL: [MagnitudeCategory; 6] = [
        MagnitudeCategory::SuperFast,
        MagnitudeCategory::Fast,
        MagnitudeCategory::Medium,
        MagnitudeCategory::Slow,
        MagnitudeCategory::SuperSlow,
        MagnitudeCategory::Zero,
    ];

    pub fn label(self) -> &'static str {
        match self {
            MagnitudeCategory::SuperFast => "SuperFast",
            MagnitudeCategory::Fast => "Fast",
            MagnitudeCategory::Medium => "Medium",
            MagnitudeCategory::Slow => "Slow",
            MagnitudeCategory::SuperSlow => "SuperSlow",
            MagnitudeCategory::Zero => "Zero",
        }
    }

    pub fn from_label(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.label() == s)
    }
}

impl fmt::Display for MagnitudeCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// Buckets a trailing aggregate. Intervals are open below, closed above:
/// `{0}`, `(0,2]`, `(2,52]`, `(52,365]`, `(365,10000]`, `(10000,∞)`.
pub fn categorize_magnitude(trailing_agg: f64) -> Result<MagnitudeCategory> {
    if trailing_agg.is_nan() || trailing_agg < 0.0 {
        return invalid(format!("trailing aggregate must be >= 0, got {trailing_agg}"));
    }
    Ok(if trailing_agg == 0.0 {
        MagnitudeCategory::Zero
    } else if trailing_agg <= 2.0 {
        MagnitudeCategory::SuperSlow
    } else if trailing_agg <= 52.0 {
        MagnitudeCategory::Slow
    } else if trailing_agg <= 365.0 {
        MagnitudeCategory::Medium
    } else if trailing_agg <= 10_000.0 {
        MagnitudeCategory::Fast
    } else {
        MagnitudeCategory::SuperFast
    })
}

/// Sparse = zero demand in `(fcd - window, fcd]` and not a new product.
/// A product is new when it was listed after `fcd - window`.
pub fn is_sparse(record: &TimeSeriesRecord, fcd: usize, window: usize) -> Result<bool> {
    if window == 0 {
        return invalid("sparsity window must be >= 1");
    }
    if fcd >= record.len() {
        return invalid(format!(
            "fcd {fcd} outside history of series {} (length {})",
            record.id,
            record.len()
        ));
    }
    let established = record.first_listing <= fcd as i64 - window as i64;
    Ok(established && record.trailing_sum(fcd, window) == 0.0)
}

/// A (lead-time, span) pair.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Horizon {
    pub lead: usize,
    pub span: usize,
}

/// The horizon set and its maximal span.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "HorizonSpecRepr", into = "HorizonSpecRepr")]
pub struct HorizonSpec {
    pairs: Vec<Horizon>,
    max_span: usize,
}

#[derive(Serialize, Deserialize)]
struct HorizonSpecRepr {
    max_lead: usize,
    spans: Vec<usize>,
}

impl TryFrom<HorizonSpecRepr> for HorizonSpec {
    type Error = crate::error::ForecastError;

    fn try_from(r: HorizonSpecRepr) -> Result<Self> {
        build_horizon_grid(r.max_lead, &r.spans)
    }
}

impl From<HorizonSpec> for HorizonSpecRepr {
    fn from(h: HorizonSpec) -> Self {
        let mut spans: Vec<usize> = h.pairs.iter().map(|p| p.span).collect();
        spans.dedup();
        HorizonSpecRepr {
            max_lead: h.window(),
            spans,
        }
    }
}

impl HorizonSpec {
    pub fn new(pairs: Vec<Horizon>) -> Result<Self> {
        if pairs.is_empty() {
            return invalid("horizon set is empty");
        }
        for (i, p) in pairs.iter().enumerate() {
            if p.lead == 0 || p.span == 0 {
                return invalid(format!("horizon {p:?} must have lead >= 1 and span >= 1"));
            }
            if pairs[..i].contains(p) {
                return invalid(format!("duplicate horizon {p:?}"));
            }
        }
        if !pairs.iter().any(|p| p.span == 1) {
            return invalid("horizon set has no span-1 pairs");
        }
        let max_span = pairs.iter().map(|p| p.span).max().unwrap_or(1);
        Ok(Self { pairs, max_span })
    }

    pub fn pairs(&self) -> &[Horizon] {
        &self.pairs
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Maximal span over the set.
    pub fn max_span(&self) -> usize {
        self.max_span
    }

    /// Last period covered by any pair, i.e. `max(lead + span - 1)`.
    pub fn window(&self) -> usize {
        self.pairs.iter().map(|p| p.lead + p.span - 1).max().unwrap_or(0)
    }

    /// Span-1 pairs.
    pub fn span_one(&self) -> impl Iterator<Item = &Horizon> {
        self.pairs.iter().filter(|p| p.span == 1)
    }
}

/// All `(lead, span)` with `lead + span - 1 <= max_lead`, grouped by span in
/// the order given.
pub fn build_horizon_grid(max_lead: usize, spans: &[usize]) -> Result<HorizonSpec> {
    if max_lead == 0 {
        return invalid("max_lead must be >= 1");
    }
    if spans.is_empty() {
        return invalid("spans must be non-empty");
    }
    let mut pairs = Vec::new();
    for &span in spans {
        if span == 0 {
            return invalid("span must be >= 1");
        }
        if span > max_lead {
            continue;
        }
        for lead in 1..=(max_lead + 1 - span) {
            pairs.push(Horizon { lead, span });
        }
    }
    HorizonSpec::new(pairs)
}

/// Per-series sampling weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplingWeights {
    pub weights: Vec<f64>,
    pub cutoff_quantile: f64,
    /// Magnitude at the cutoff quantile; every weight is at least this.
    pub cutoff_magnitude: f64,
}

/// Linear-interpolation empirical quantile (the common "type 7" estimator).
pub fn empirical_quantile(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    sorted_quantile(&v, q)
}

pub(crate) fn sorted_quantile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

/// Magnitude-proportional weights above the cutoff quantile, flat below it.
///
/// `weight_i = max(magnitude_i, m*)` with `m*` the empirical
/// `cutoff_quantile` of the magnitudes. When `m*` is zero it is raised to
/// the smallest positive magnitude so that every weight stays positive; if
/// every magnitude is zero all weights are 1.
pub fn importance_weights(magnitudes: &[f64], cutoff_quantile: f64) -> Result<SamplingWeights> {
    if magnitudes.is_empty() {
        return invalid("importance weights need at least one series");
    }
    if !(cutoff_quantile > 0.0 && cutoff_quantile < 1.0) {
        return invalid(format!("cutoff quantile must be in (0,1), got {cutoff_quantile}"));
    }
    if magnitudes.iter().any(|m| !(m.is_finite() && *m >= 0.0)) {
        return invalid("magnitudes must be finite and non-negative");
    }
    let mut cutoff = empirical_quantile(magnitudes, cutoff_quantile);
    if cutoff <= 0.0 {
        cutoff = magnitudes
            .iter()
            .copied()
            .filter(|m| *m > 0.0)
            .min_by(f64::total_cmp)
            .unwrap_or(0.0);
    }
    if cutoff <= 0.0 {
        return Ok(SamplingWeights {
            weights: vec![1.0; magnitudes.len()],
            cutoff_quantile,
            cutoff_magnitude: 0.0,
        });
    }
    Ok(SamplingWeights {
        weights: magnitudes.iter().map(|m| m.max(cutoff)).collect(),
        cutoff_quantile,
        cutoff_magnitude: cutoff,
    })
}
