//! The assembled forecaster: sparsity routing, the convolutional main arm
//! with its horizon decoder, and the parametric sparse arm.

mod checkpoint;
mod decoder;
mod eval;
mod features;
mod train;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId, ParamStore};
use crate::encoder::{Encoder, EncoderConfig, Gating};
use crate::error::{invalid, Result};
use crate::exec::{try_map_indexed, ExecMode};
use crate::metrics::{check_quantile, ForecastRow, QuantileForecast};
use crate::series::{build_horizon_grid, is_sparse, HorizonSpec, TimeSeriesRecord, DEFAULT_WINDOW};
use crate::sparse_arm::{SparseArm, SparseArmConfig};

pub use checkpoint::{TrainedModel, TrainingLog, CHECKPOINT_VERSION};
pub use decoder::{Decoder, DecoderConfig};
pub use eval::{evaluate, evaluation_fcds, EvalConfig, Evaluation};
pub use features::{InputDims, MainBatch};
pub use train::{train, train_records, training_fcd_range, TrainingConfig};

/// Architecture, objective and training settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    #[serde(default)]
    pub encoder: EncoderConfig,
    #[serde(default)]
    pub decoder: DecoderConfig,
    /// `None` sends every series through the main arm.
    #[serde(default = "default_sparse")]
    pub sparse: Option<SparseArmConfig>,
    #[serde(default = "default_quantiles")]
    pub quantiles: Vec<f64>,
    #[serde(default = "default_horizons")]
    pub horizons: HorizonSpec,
    /// Main-arm history length.
    #[serde(default = "default_context")]
    pub context: usize,
    #[serde(default = "default_window")]
    pub routing_window: usize,
    pub training: TrainingConfig,
}

fn default_sparse() -> Option<SparseArmConfig> {
    Some(SparseArmConfig::default())
}

fn default_quantiles() -> Vec<f64> {
    vec![0.5, 0.9]
}

fn default_horizons() -> HorizonSpec {
    build_horizon_grid(4, &[1, 2, 4]).expect("static horizon grid")
}

fn default_context() -> usize {
    64
}

fn default_window() -> usize {
    DEFAULT_WINDOW
}

impl ModelConfig {
    /// Defaults with the given seed.
    pub fn with_seed(seed: u64) -> Self {
        Self {
            encoder: EncoderConfig::default(),
            decoder: DecoderConfig::default(),
            sparse: default_sparse(),
            quantiles: default_quantiles(),
            horizons: default_horizons(),
            context: default_context(),
            routing_window: default_window(),
            training: TrainingConfig::with_seed(seed),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.decoder.validate()?;
        if let Some(s) = &self.sparse {
            s.validate()?;
        }
        if self.quantiles.is_empty() {
            return invalid("at least one quantile is required");
        }
        for &q in &self.quantiles {
            check_quantile(q)?;
        }
        if self.quantiles.windows(2).any(|w| w[1] <= w[0]) {
            return invalid("quantiles must be strictly increasing");
        }
        if self.context == 0 || self.routing_window == 0 {
            return invalid("context and routing window must be >= 1");
        }
        self.training.validate()
    }

    /// Rows of history the featurizer needs per sample.
    pub fn history_len(&self) -> usize {
        self.context.max(self.sparse.as_ref().map_or(0, |s| s.context))
    }
}

/// Which arm each sample goes through.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Routing {
    /// Sparse series to the sparse arm when the model has one.
    #[default]
    Auto,
    /// Every series through the main arm.
    MainOnly,
}

/// Splits indices of `batch` into `(sparse, non_sparse)`.
pub fn route(batch: &[TimeSeriesRecord], fcd: usize, window: usize) -> Result<(Vec<usize>, Vec<usize>)> {
    if window == 0 {
        return invalid("routing window must be >= 1");
    }
    let mut sparse = Vec::new();
    let mut dense = Vec::new();
    for (i, r) in batch.iter().enumerate() {
        if is_sparse(r, fcd, window)? {
            sparse.push(i);
        } else {
            dense.push(i);
        }
    }
    Ok((sparse, dense))
}

/// Model skeleton plus parameters.
#[derive(Clone, Debug)]
pub struct SpadeModel {
    pub config: ModelConfig,
    pub dims: InputDims,
    pub store: ParamStore,
    encoder: Encoder,
    decoder: Decoder,
    sparse: Option<SparseArm>,
}

/// Forecast for one `(series, fcd)` sample, `[horizon][quantile]`.
pub type SampleForecast = Vec<f64>;

impl SpadeModel {
    /// Freshly initialized model; initialization is a function of the seed.
    pub fn new(config: &ModelConfig, dims: InputDims) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.training.seed);
        let mut store = ParamStore::new();
        let encoder = Encoder::new(&mut store, &mut rng, "main.encoder", &config.encoder, features::main_input_dim(&dims))?;
        let decoder = Decoder::new(&mut store, &mut rng, "main.decoder", config, &dims)?;
        let sparse = match &config.sparse {
            Some(s) => Some(SparseArm::new(&mut store, &mut rng, "sparse", s, features::sparse_input_dim(&dims))?),
            None => None,
        };
        Ok(Self {
            config: config.clone(),
            dims,
            store,
            encoder,
            decoder,
            sparse,
        })
    }

    pub fn encoder(&self) -> &Encoder {
        &self.encoder
    }

    pub fn decoder(&self) -> &Decoder {
        &self.decoder
    }

    pub fn sparse_arm(&self) -> Option<&SparseArm> {
        self.sparse.as_ref()
    }

    /// True when the sample goes to the sparse arm.
    pub fn routes_sparse(&self, record: &TimeSeriesRecord, fcd: usize, routing: Routing) -> Result<bool> {
        if routing == Routing::MainOnly || self.sparse.is_none() {
            return Ok(false);
        }
        is_sparse(record, fcd, self.config.routing_window)
    }

    /// Main-arm forecasts `[batch · |H|, |Q|]` on `g`.
    pub fn main_graph(&self, g: &mut Graph, store: &ParamStore, batch: &MainBatch) -> Result<NodeId> {
        let x = g.input(batch.x.clone());
        let moments = match self.config.encoder.gating {
            Gating::MomentGated => Some(g.input(batch.moments.clone())),
            Gating::UniformConcat => None,
        };
        let enc = self.encoder.graph(g, store, x, moments, true)?;
        self.decoder.graph(g, store, enc, batch)
    }

    /// Sparse-arm forecasts `[batch · |H|, |Q|]` on `g`.
    pub fn sparse_graph(&self, g: &mut Graph, store: &ParamStore, samples: &[(&TimeSeriesRecord, usize)]) -> Result<NodeId> {
        let arm = self.sparse.as_ref().expect("sparse arm present");
        let hists: Vec<Vec<Vec<f64>>> = samples
            .iter()
            .map(|&(r, fcd)| features::sparse_history(r, fcd, arm.config.context))
            .collect();
        let refs: Vec<&[Vec<f64>]> = hists.iter().map(Vec::as_slice).collect();
        let x = g.input(arm.patch_rows(&refs)?);
        arm.quantile_graph(g, store, x, samples.len(), &self.config.horizons, &self.config.quantiles)
    }

    /// Forecasts for arbitrary `(series, fcd)` samples, in input order.
    pub fn predict(&self, samples: &[(&TimeSeriesRecord, usize)], routing: Routing) -> Result<Vec<SampleForecast>> {
        let width = self.config.horizons.len() * self.config.quantiles.len();
        let mut sparse_idx = Vec::new();
        let mut main_idx = Vec::new();
        for (i, &(r, fcd)) in samples.iter().enumerate() {
            if self.routes_sparse(r, fcd, routing)? {
                sparse_idx.push(i);
            } else {
                main_idx.push(i);
            }
        }
        let mut out = vec![Vec::new(); samples.len()];
        let mut g = Graph::new();
        if !main_idx.is_empty() {
            let sub: Vec<_> = main_idx.iter().map(|&i| samples[i]).collect();
            let batch = MainBatch::build(&self.config, &self.dims, &sub)?;
            let y = self.main_graph(&mut g, &self.store, &batch)?;
            for (k, &i) in main_idx.iter().enumerate() {
                out[i] = g.value(y).data[k * width..(k + 1) * width].to_vec();
            }
        }
        if !sparse_idx.is_empty() {
            let sub: Vec<_> = sparse_idx.iter().map(|&i| samples[i]).collect();
            let y = self.sparse_graph(&mut g, &self.store, &sub)?;
            for (k, &i) in sparse_idx.iter().enumerate() {
                out[i] = g.value(y).data[k * width..(k + 1) * width].to_vec();
            }
        }
        Ok(out)
    }

    /// Forecast for every record at one creation date. Records are processed
    /// in chunks of `chunk` (in parallel when `exec` allows).
    pub fn forward(&self, batch: &[TimeSeriesRecord], fcd: usize, routing: Routing, exec: ExecMode) -> Result<QuantileForecast> {
        const CHUNK: usize = 64;
        let n_chunks = batch.len().div_ceil(CHUNK);
        let parts = try_map_indexed(exec, n_chunks, |c| {
            let lo = c * CHUNK;
            let hi = (lo + CHUNK).min(batch.len());
            let samples: Vec<_> = batch[lo..hi].iter().map(|r| (r, fcd)).collect();
            self.predict(&samples, routing)
        })?;
        let rows = batch
            .iter()
            .zip(parts.into_iter().flatten())
            .map(|(r, values)| ForecastRow {
                series_id: r.id.clone(),
                fcd,
                values,
            })
            .collect();
        Ok(QuantileForecast {
            quantiles: self.config.quantiles.clone(),
            horizons: self.config.horizons.clone(),
            rows,
        })
    }
}

/// Stand-alone decode helper: main-arm forecasts for samples already routed
/// as non-sparse.
pub fn decode(model: &SpadeModel, samples: &[(&TimeSeriesRecord, usize)]) -> Result<Vec<SampleForecast>> {
    model.predict(samples, Routing::MainOnly)
}


#[cfg(test)]
pub(crate) mod tests;
