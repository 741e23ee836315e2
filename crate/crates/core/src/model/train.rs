use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{InputDims, MainBatch, ModelConfig, Routing, SpadeModel, TrainedModel, TrainingLog};
use crate::autodiff::{AdamConfig, AdamState, Gradients, Graph, NodeId, ParamStore};
use crate::error::{invalid, ForecastError, Result};
use crate::exec::{pairwise_sum, try_map_indexed, ExecMode};
use crate::series::{importance_weights, Dataset, TimeSeriesRecord};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingConfig {
    /// Drives initialization and sampling.
    pub seed: u64,
    #[serde(default = "defaults::lr")]
    pub lr: f64,
    #[serde(default = "defaults::batch_size")]
    pub batch_size: usize,
    #[serde(default = "defaults::epochs")]
    pub epochs: usize,
    #[serde(default = "defaults::steps_per_epoch")]
    pub steps_per_epoch: usize,
    /// Magnitude quantile below which sampling weights are flat.
    #[serde(default = "defaults::cutoff_quantile")]
    pub cutoff_quantile: f64,
    /// Samples per gradient chunk. Chunks are the unit of parallel work and
    /// are reduced in order, so results do not depend on thread count.
    #[serde(default = "defaults::chunk_size")]
    pub chunk_size: usize,
    /// Earliest training creation date; defaults to `routing_window - 1`.
    #[serde(default)]
    pub min_fcd: Option<usize>,
    #[serde(default)]
    pub exec: ExecMode,
}

mod defaults {
    pub fn lr() -> f64 {
        3e-3
    }
    pub fn batch_size() -> usize {
        128
    }
    pub fn epochs() -> usize {
        50
    }
    pub fn steps_per_epoch() -> usize {
        20
    }
    pub fn cutoff_quantile() -> f64 {
        0.8
    }
    pub fn chunk_size() -> usize {
        32
    }
}

impl TrainingConfig {
    pub fn with_seed(seed: u64) -> Self {
        Self {
            seed,
            lr: defaults::lr(),
            batch_size: defaults::batch_size(),
            epochs: defaults::epochs(),
            steps_per_epoch: defaults::steps_per_epoch(),
            cutoff_quantile: defaults::cutoff_quantile(),
            chunk_size: defaults::chunk_size(),
            min_fcd: None,
            exec: ExecMode::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return invalid("learning rate must be finite and >= 0");
        }
        if self.batch_size == 0 || self.chunk_size == 0 {
            return invalid("batch and chunk sizes must be >= 1");
        }
        if !(self.cutoff_quantile > 0.0 && self.cutoff_quantile < 1.0) {
            return invalid("cutoff quantile must be in (0, 1)");
        }
        Ok(())
    }
}

/// Inclusive range of creation dates whose targets all fall before
/// `train_len`.
pub fn training_fcd_range(config: &ModelConfig, train_len: usize) -> Result<(usize, usize)> {
    let reach = config.horizons.window();
    if train_len <= reach {
        return invalid(format!("training window {train_len} too short for horizon reach {reach}"));
    }
    let hi = train_len - 1 - reach;
    let lo = config.training.min_fcd.unwrap_or(config.routing_window - 1).min(hi);
    Ok((lo, hi))
}

fn sample_loss(
    model: &SpadeModel,
    store: &ParamStore,
    samples: &[(&TimeSeriesRecord, usize)],
    total: usize,
) -> Result<(f64, Gradients)> {
    let cfg = &model.config;
    let (mut main, mut sparse) = (Vec::new(), Vec::new());
    for &s in samples {
        if model.routes_sparse(s.0, s.1, Routing::Auto)? {
            sparse.push(s);
        } else {
            main.push(s);
        }
    }
    let mut g = Graph::new();
    let mut losses: Vec<NodeId> = Vec::with_capacity(2);
    for (subset, is_sparse) in [(&main, false), (&sparse, true)] {
        if subset.is_empty() {
            continue;
        }
        let y = if is_sparse {
            model.sparse_graph(&mut g, store, subset)?
        } else {
            let batch = MainBatch::build(cfg, &model.dims, subset)?;
            model.main_graph(&mut g, store, &batch)?
        };
        let nq = cfg.quantiles.len();
        let mut target = Vec::with_capacity(subset.len() * cfg.horizons.len() * nq);
        let mut weight = Vec::with_capacity(target.capacity());
        for &(r, fcd) in subset.iter() {
            for h in cfg.horizons.pairs() {
                let Some(y) = r.span_target(fcd, *h) else {
                    return invalid(format!("series {}: no target for fcd {fcd}, {h:?}", r.id));
                };
                for _ in 0..nq {
                    target.push(y);
                    weight.push(1.0 / (h.span as f64 * total as f64));
                }
            }
        }
        losses.push(g.pinball(y, target, cfg.quantiles.clone(), weight)?);
    }
    let root = match losses[..] {
        [a] => a,
        [a, b] => g.add(a, b)?,
        _ => unreachable!("non-empty chunk"),
    };
    Ok((g.scalar(root), g.backward(root, store)))
}

/// Fits `config` on the first `train_len` periods of `records`.
pub fn train_records(records: &[TimeSeriesRecord], train_len: usize, config: &ModelConfig) -> Result<TrainedModel> {
    if records.is_empty() {
        return invalid("cannot train on an empty dataset");
    }
    let dims = InputDims::of(records)?;
    if records.iter().any(|r| r.len() < train_len) {
        return invalid(format!("every series needs at least {train_len} periods"));
    }
    let mut model = SpadeModel::new(config, dims)?;
    let (lo, hi) = training_fcd_range(config, train_len)?;
    let tc = &config.training;

    // every (series, creation date) pair, weighted by the trailing aggregate
    // at that date
    let pool: Vec<(usize, usize)> = (0..records.len()).flat_map(|i| (lo..=hi).map(move |t| (i, t))).collect();
    let mags: Vec<f64> = pool
        .iter()
        .map(|&(i, t)| records[i].trailing_sum(t, config.routing_window))
        .collect();
    let weights = importance_weights(&mags, tc.cutoff_quantile)?;
    let picker = WeightedIndex::new(&weights.weights).map_err(|e| ForecastError::InvalidArgument(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed);
    rng.set_stream(1);

    let mut adam = AdamState::new(
        &model.store,
        AdamConfig {
            lr: tc.lr,
            ..AdamConfig::default()
        },
    );
    let mut log = TrainingLog::default();
    for epoch in 0..tc.epochs {
        let mut step_losses = Vec::with_capacity(tc.steps_per_epoch);
        for step in 0..tc.steps_per_epoch {
            let picks: Vec<(usize, usize)> = (0..tc.batch_size)
                .map(|_| pool[picker.sample(&mut rng)])
                .collect();
            let samples: Vec<(&TimeSeriesRecord, usize)> = picks.iter().map(|&(i, t)| (&records[i], t)).collect();
            let n_chunks = samples.len().div_ceil(tc.chunk_size);
            let parts = try_map_indexed(tc.exec, n_chunks, |c| {
                let lo = c * tc.chunk_size;
                let hi = (lo + tc.chunk_size).min(samples.len());
                sample_loss(&model, &model.store, &samples[lo..hi], samples.len())
            })?;
            let loss = pairwise_sum(&parts.iter().map(|p| p.0).collect::<Vec<_>>());
            let mut grads = Gradients::zeros_like(&model.store);
            for (_, g) in &parts {
                grads.add_assign(g);
            }
            if !loss.is_finite() {
                return Err(ForecastError::TrainingDivergence {
                    epoch,
                    step,
                    reason: format!("loss is {loss}"),
                });
            }
            adam.step(&mut model.store, &grads).map_err(|e| match e {
                ForecastError::TrainingDivergence { reason, .. } => ForecastError::TrainingDivergence { epoch, step, reason },
                other => other,
            })?;
            step_losses.push(loss);
        }
        let mean = if step_losses.is_empty() {
            0.0
        } else {
            pairwise_sum(&step_losses) / step_losses.len() as f64
        };
        log.epoch_loss.push(mean);
    }
    Ok(TrainedModel::from_model(&model, log))
}

/// Fits `config` on the dataset's training window.
pub fn train(dataset: &Dataset, config: &ModelConfig) -> Result<TrainedModel> {
    train_records(&dataset.records, dataset.meta.train_len, config)
}
