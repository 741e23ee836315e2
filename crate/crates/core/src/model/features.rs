use serde::{Deserialize, Serialize};

use super::ModelConfig;
use crate::autodiff::Tensor;
use crate::encoder::{history_moments, peak_filter};
use crate::error::{invalid, Result};
use crate::series::TimeSeriesRecord;

/// Covariate widths the model was built for.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputDims {
    pub past: usize,
    pub future: usize,
    pub statics: usize,
}

impl InputDims {
    pub fn of(records: &[TimeSeriesRecord]) -> Result<Self> {
        let Some(first) = records.first() else {
            return invalid("no records");
        };
        let dims = Self {
            past: first.past_cov.first().map_or(0, Vec::len),
            future: first.known_future.first().map_or(0, Vec::len),
            statics: first.static_cov.len(),
        };
        for r in records {
            r.validate()?;
            let ok = r.past_cov.iter().all(|v| v.len() == dims.past)
                && r.known_future.iter().all(|v| v.len() == dims.future)
                && (dims.future == 0 || !r.known_future.is_empty())
                && r.static_cov.len() == dims.statics;
            if !ok {
                return invalid(format!("series {} has covariate widths that differ from {}", r.id, first.id));
            }
        }
        Ok(dims)
    }
}

/// Per step: `[log1p(filtered y), observed flag, past covariates…]`.
pub(crate) fn main_input_dim(dims: &InputDims) -> usize {
    2 + dims.past
}

pub(crate) fn sparse_input_dim(dims: &InputDims) -> usize {
    2 + dims.past
}

fn observed(r: &TimeSeriesRecord, t: i64) -> bool {
    t >= 0 && t >= r.first_listing
}

/// `len` feature rows ending at `fcd`; steps before the record starts are
/// zero with the observed flag cleared.
fn history_rows(r: &TimeSeriesRecord, fcd: usize, len: usize, filtered: Option<&[f64]>) -> Vec<Vec<f64>> {
    let width = 2 + r.past_cov.first().map_or(0, Vec::len);
    let start = fcd as i64 + 1 - len as i64;
    (start..=fcd as i64)
        .map(|t| {
            if t < 0 {
                return vec![0.0; width];
            }
            let tu = t as usize;
            let y = filtered.map_or(r.target[tu], |f| f[tu]);
            let mut row = Vec::with_capacity(width);
            row.push(y.ln_1p());
            row.push(if observed(r, t) { 1.0 } else { 0.0 });
            row.extend_from_slice(&r.past_cov[tu]);
            row
        })
        .collect()
}

pub(crate) fn sparse_history(r: &TimeSeriesRecord, fcd: usize, len: usize) -> Vec<Vec<f64>> {
    history_rows(r, fcd, len, None)
}

/// Mean demand over the trailing `window` periods at `fcd`.
pub(crate) fn level(r: &TimeSeriesRecord, fcd: usize, window: usize) -> f64 {
    let lo = (fcd + 1).saturating_sub(window);
    let n = fcd + 1 - lo;
    r.target[lo..=fcd].iter().sum::<f64>() / n as f64
}

/// Dense inputs for a main-arm batch.
#[derive(Clone, Debug, PartialEq)]
pub struct MainBatch {
    /// `[batch, context, input_dim]`.
    pub x: Tensor,
    /// `[batch, 2]` history moments for the gate.
    pub moments: Tensor,
    /// `[batch, statics + 1]`: static covariates and `log1p(level)`.
    pub statics: Tensor,
    /// `[batch · |H|, future + |H|]`: span-pooled known-future covariates
    /// and a horizon one-hot.
    pub future: Tensor,
    /// `[batch · |H| · |Q|]` output scale `span · (1 + level)`.
    pub scale: Vec<f64>,
}

impl MainBatch {
    pub fn build(config: &ModelConfig, dims: &InputDims, samples: &[(&TimeSeriesRecord, usize)]) -> Result<Self> {
        let t_len = config.context;
        let hs = config.horizons.pairs();
        let (nh, nq) = (hs.len(), config.quantiles.len());
        let in_dim = main_input_dim(dims);
        let b = samples.len();
        let mut x = Vec::with_capacity(b * t_len * in_dim);
        let mut moments = Vec::with_capacity(2 * b);
        let mut statics = Vec::with_capacity(b * (dims.statics + 1));
        let mut future = Vec::with_capacity(b * nh * (dims.future + nh));
        let mut scale = Vec::with_capacity(b * nh * nq);
        for &(r, fcd) in samples {
            if fcd >= r.len() {
                return invalid(format!("fcd {fcd} beyond series {} of length {}", r.id, r.len()));
            }
            let filtered = peak_filter(&r.target[..=fcd], &config.encoder.peak_filter);
            for row in history_rows(r, fcd, t_len, Some(&filtered)) {
                if row.len() != in_dim {
                    return invalid(format!("series {}: past covariate width mismatch", r.id));
                }
                x.extend(row);
            }
            let lo = (fcd + 1).saturating_sub(t_len);
            let first = r.first_listing.max(0) as usize;
            let seen = &r.target[lo.max(first).min(fcd + 1)..=fcd];
            moments.extend(history_moments(seen));
            let lvl = level(r, fcd, config.decoder.level_window);
            if r.static_cov.len() != dims.statics {
                return invalid(format!("series {}: static covariate width mismatch", r.id));
            }
            statics.extend_from_slice(&r.static_cov);
            statics.push(lvl.ln_1p());
            for (hi, h) in hs.iter().enumerate() {
                let mut pooled = vec![0.0; dims.future];
                if dims.future > 0 {
                    for step in 0..h.span {
                        let Some(row) = r.future_cov(fcd, h.lead + step) else {
                            return invalid(format!(
                                "series {}: no known-future covariates for fcd {fcd}, lead {}",
                                r.id,
                                h.lead + step
                            ));
                        };
                        for (p, v) in pooled.iter_mut().zip(row) {
                            *p += v / h.span as f64;
                        }
                    }
                }
                future.extend(pooled);
                future.extend((0..nh).map(|k| if k == hi { 1.0 } else { 0.0 }));
                let s = h.span as f64 * (1.0 + lvl);
                scale.extend(std::iter::repeat_n(s, nq));
            }
        }
        Ok(Self {
            x: Tensor::new(vec![b, t_len, in_dim], x)?,
            moments: Tensor::new(vec![b, 2], moments)?,
            statics: Tensor::new(vec![b, dims.statics + 1], statics)?,
            future: Tensor::new(vec![b * nh, dims.future + nh], future)?,
            scale,
        })
    }
}
