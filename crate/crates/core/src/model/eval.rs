use super::{Routing, SpadeModel};
use crate::error::{invalid, Result};
use crate::exec::{try_map_indexed, ExecMode};
use crate::metrics::{report_by_category, BiasReport, EvalRow};
use crate::series::{categorize_magnitude, HorizonSpec, TimeSeriesRecord};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EvalConfig {
    /// Every `stride`-th creation date from the first backtest date.
    pub stride: usize,
    pub routing: Routing,
    pub exec: ExecMode,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            stride: 1,
            routing: Routing::Auto,
            exec: ExecMode::default(),
        }
    }
}

/// Backtest creation dates: from `train_len - 1` while every horizon still
/// has a target. Targets of these dates all lie at or after `train_len`.
pub fn evaluation_fcds(len: usize, train_len: usize, horizons: &HorizonSpec, stride: usize) -> Vec<usize> {
    let reach = horizons.window();
    if train_len == 0 || len < reach + 1 {
        return Vec::new();
    }
    let last = len - 1 - reach;
    (train_len - 1..=last).step_by(stride.max(1)).collect()
}

pub struct Evaluation {
    pub rows: Vec<EvalRow>,
    pub report: BiasReport,
}

/// Scores `model` over the backtest window of `records`.
pub fn evaluate(model: &SpadeModel, records: &[TimeSeriesRecord], train_len: usize, config: &EvalConfig) -> Result<Evaluation> {
    const CHUNK: usize = 16;
    let cfg = &model.config;
    let n_chunks = records.len().div_ceil(CHUNK);
    let parts = try_map_indexed(config.exec, n_chunks, |c| -> Result<Vec<EvalRow>> {
        let lo = c * CHUNK;
        let hi = (lo + CHUNK).min(records.len());
        let mut samples = Vec::new();
        for r in &records[lo..hi] {
            for fcd in evaluation_fcds(r.len(), train_len, &cfg.horizons, config.stride) {
                samples.push((r, fcd));
            }
        }
        let preds = model.predict(&samples, config.routing)?;
        samples
            .iter()
            .zip(preds)
            .map(|(&(r, fcd), forecasts)| {
                let actuals = cfg
                    .horizons
                    .pairs()
                    .iter()
                    .map(|h| r.span_target(fcd, *h).expect("fcd within backtest range"))
                    .collect();
                Ok(EvalRow {
                    series_id: r.id.clone(),
                    fcd,
                    category: categorize_magnitude(r.trailing_sum(fcd, cfg.routing_window))?,
                    actuals,
                    forecasts,
                })
            })
            .collect()
    })?;
    let rows: Vec<EvalRow> = parts.into_iter().flatten().collect();
    if rows.is_empty() {
        return invalid("no backtest creation dates: series are not longer than the training window plus horizon reach");
    }
    let report = report_by_category(&rows, &cfg.quantiles)?;
    Ok(Evaluation { rows, report })
}
