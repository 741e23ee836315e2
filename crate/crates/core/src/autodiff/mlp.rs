use rand::Rng;

use super::{glorot, Activation, Graph, NodeId, ParamId, ParamStore, Tensor};
use crate::error::{invalid, Result};

/// Feed-forward stack: hidden layers use `act`, the last layer `out_act`.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    layers: Vec<(ParamId, ParamId)>,
    pub act: Activation,
    pub out_act: Activation,
}

impl Mlp {
    /// Registers `prefix.{i}.w` / `prefix.{i}.b` for each consecutive pair in
    /// `sizes`. With `zero_last` the final layer starts at zero.
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        prefix: &str,
        sizes: &[usize],
        act: Activation,
        out_act: Activation,
        zero_last: bool,
    ) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return invalid(format!("{prefix}: layer sizes {sizes:?} must have >= 2 positive entries"));
        }
        let mut layers = Vec::with_capacity(sizes.len() - 1);
        for (i, pair) in sizes.windows(2).enumerate() {
            let (n_in, n_out) = (pair[0], pair[1]);
            let last = i + 2 == sizes.len();
            let w = if last && zero_last {
                Tensor::zeros(&[n_in, n_out])
            } else {
                glorot(rng, &[n_in, n_out], n_in, n_out)
            };
            let w = store.add(format!("{prefix}.{i}.w"), w)?;
            let b = store.add(format!("{prefix}.{i}.b"), Tensor::zeros(&[n_out]))?;
            layers.push((w, b));
        }
        Ok(Self { layers, act, out_act })
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn layer(&self, i: usize) -> (ParamId, ParamId) {
        self.layers[i]
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: NodeId) -> Result<NodeId> {
        let n = self.layers.len();
        let mut h = x;
        for (i, &(w, b)) in self.layers.iter().enumerate() {
            let (wn, bn) = (g.param(store, w), g.param(store, b));
            h = g.linear(h, wn, Some(bn))?;
            h = g.act(h, if i + 1 == n { self.out_act } else { self.act });
        }
        Ok(h)
    }
}

/// Evaluates an MLP given explicit `(W, b)` layers, outside any model.
pub fn mlp(x: &Tensor, layers: &[(Tensor, Tensor)], act: Activation, out_act: Activation) -> Result<Tensor> {
    let mut store = ParamStore::new();
    let mut ids = Vec::with_capacity(layers.len());
    for (i, (w, b)) in layers.iter().enumerate() {
        ids.push((store.add(format!("{i}.w"), w.clone())?, store.add(format!("{i}.b"), b.clone())?));
    }
    let net = Mlp {
        layers: ids,
        act,
        out_act,
    };
    let mut g = Graph::new();
    let xi = g.input(x.clone());
    let y = net.forward(&mut g, &store, xi)?;
    Ok(g.value(y).clone())
}
