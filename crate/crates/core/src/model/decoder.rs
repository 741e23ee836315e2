use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{InputDims, MainBatch, ModelConfig};
use crate::autodiff::{Activation, Graph, Mlp, NodeId, ParamStore};
use crate::error::{invalid, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecoderConfig {
    pub global_hidden: usize,
    pub local_hidden: usize,
    /// Periods averaged for the output scale.
    pub level_window: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            global_hidden: 16,
            local_hidden: 16,
            level_window: 13,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.global_hidden == 0 || self.local_hidden == 0 || self.level_window == 0 {
            return invalid("decoder sizes must be >= 1");
        }
        Ok(())
    }
}

/// Global MLP over `[encoding ‖ statics]`, then a local MLP shared across
/// horizons over `[context ‖ pooled future covariates ‖ horizon one-hot]`.
/// Quantiles are a cumulative softplus, so they never cross and are never
/// negative.
#[derive(Clone, Debug, PartialEq)]
pub struct Decoder {
    global: Mlp,
    local: Mlp,
    n_horizons: usize,
}

impl Decoder {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, prefix: &str, config: &ModelConfig, dims: &InputDims) -> Result<Self> {
        let d = &config.decoder;
        let nh = config.horizons.len();
        let global = Mlp::new(
            store,
            rng,
            &format!("{prefix}.global"),
            &[config.encoder.width + dims.statics + 1, d.global_hidden],
            Activation::Relu,
            Activation::Relu,
            false,
        )?;
        let local = Mlp::new(
            store,
            rng,
            &format!("{prefix}.local"),
            &[d.global_hidden + dims.future + nh, d.local_hidden, config.quantiles.len()],
            Activation::Relu,
            Activation::Identity,
            false,
        )?;
        Ok(Self {
            global,
            local,
            n_horizons: nh,
        })
    }

    /// `(W, b)` of the local MLP's output layer.
    pub fn output_layer(&self) -> (crate::autodiff::ParamId, crate::autodiff::ParamId) {
        self.local.layer(self.local.n_layers() - 1)
    }

    /// `[batch · |H|, |Q|]` forecasts from a `[batch, width]` encoding.
    pub fn graph(&self, g: &mut Graph, store: &ParamStore, enc: NodeId, batch: &MainBatch) -> Result<NodeId> {
        let st = g.input(batch.statics.clone());
        let gin = g.concat(&[enc, st])?;
        let ctx = self.global.forward(g, store, gin)?;
        let ctx = g.repeat_rows(ctx, self.n_horizons);
        let fut = g.input(batch.future.clone());
        let lin = g.concat(&[ctx, fut])?;
        let raw = self.local.forward(g, store, lin)?;
        let mono = g.monotone(raw);
        g.mul_const(mono, batch.scale.clone())
    }
}
