//! Multi-head dilated causal convolutional encoder.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{glorot, Activation, Graph, Mlp, NodeId, ParamId, ParamStore, Tensor};
use crate::error::{invalid, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PeakFilterMode {
    #[default]
    Winsorize,
    Identity,
}

/// Caps each value at `multiple ×` the mean of the preceding `window`
/// periods. The mean is floored at `min_level` so that the first sale after
/// a quiet stretch is not clipped to zero.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PeakFilterConfig {
    pub mode: PeakFilterMode,
    pub multiple: f64,
    pub window: usize,
    pub min_level: f64,
}

impl Default for PeakFilterConfig {
    fn default() -> Self {
        Self {
            mode: PeakFilterMode::Winsorize,
            multiple: 4.0,
            window: 13,
            min_level: 1.0,
        }
    }
}

/// Winsorizes spikes. Positions with fewer than `window` predecessors are
/// passed through; the trailing mean is taken over the raw series.
pub fn peak_filter(x: &[f64], config: &PeakFilterConfig) -> Vec<f64> {
    if config.mode == PeakFilterMode::Identity || config.window == 0 {
        return x.to_vec();
    }
    let w = config.window;
    let mut out = x.to_vec();
    let mut run: f64 = x.iter().take(w).sum();
    for t in w..x.len() {
        let cap = config.multiple * (run / w as f64).max(config.min_level);
        out[t] = x[t].min(cap);
        run += x[t] - x[t - w];
    }
    out
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Gating {
    /// Concatenate head outputs and apply one linear map.
    #[default]
    UniformConcat,
    /// Weight heads by a softmax over history moments before the combine.
    MomentGated,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub heads: usize,
    pub channels: usize,
    pub kernel_width: usize,
    pub dilations: Vec<usize>,
    /// Output width of the combine layer.
    pub width: usize,
    pub gating: Gating,
    pub gate_hidden: usize,
    pub peak_filter: PeakFilterConfig,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            heads: 6,
            channels: 8,
            kernel_width: 2,
            dilations: vec![1, 2, 4, 8, 16, 32],
            width: 16,
            gating: Gating::UniformConcat,
            gate_hidden: 8,
            peak_filter: PeakFilterConfig::default(),
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 {
            return invalid("encoder needs at least one head");
        }
        if self.channels == 0 || self.width == 0 || self.kernel_width == 0 {
            return invalid("encoder channels, width and kernel width must be >= 1");
        }
        if self.dilations.is_empty() || self.dilations.contains(&0) {
            return invalid("dilation schedule must be non-empty and positive");
        }
        if self.gating == Gating::MomentGated && self.gate_hidden == 0 {
            return invalid("gate_hidden must be >= 1");
        }
        Ok(())
    }

    /// Number of past periods that can reach the last output.
    pub fn receptive_field(&self) -> usize {
        1 + (self.kernel_width - 1) * self.dilations.iter().sum::<usize>()
    }
}

/// Per-time-step encoder output.
#[derive(Clone, Debug, PartialEq)]
pub struct Encoding {
    pub time: usize,
    pub width: usize,
    /// Row-major `[time][width]`.
    pub values: Vec<f64>,
}

impl Encoding {
    pub fn at(&self, t: usize) -> &[f64] {
        &self.values[t * self.width..(t + 1) * self.width]
    }
}

#[derive(Clone, Debug, PartialEq)]
struct ConvLayer {
    w: ParamId,
    b: ParamId,
    dilation: usize,
}

/// Parameter handles of a multi-head encoder.
#[derive(Clone, Debug, PartialEq)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub input_dim: usize,
    heads: Vec<Vec<ConvLayer>>,
    combine: (ParamId, ParamId),
    gate: Option<Mlp>,
}

impl Encoder {
    /// Registers parameters under `prefix`. Heads draw from the same stream
    /// one after another, so their initial weights differ.
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, prefix: &str, config: &EncoderConfig, input_dim: usize) -> Result<Self> {
        config.validate()?;
        if input_dim == 0 {
            return invalid("encoder input dimension must be >= 1");
        }
        let (c, k) = (config.channels, config.kernel_width);
        let mut heads = Vec::with_capacity(config.heads);
        for h in 0..config.heads {
            let mut layers = Vec::with_capacity(config.dilations.len());
            for (l, &d) in config.dilations.iter().enumerate() {
                let c_in = if l == 0 { input_dim } else { c };
                let w = store.add(format!("{prefix}.head{h}.conv{l}.w"), glorot(rng, &[k, c_in, c], k * c_in, c))?;
                let b = store.add(format!("{prefix}.head{h}.conv{l}.b"), Tensor::zeros(&[c]))?;
                layers.push(ConvLayer { w, b, dilation: d });
            }
            heads.push(layers);
        }
        let gc = config.heads * c;
        let cw = store.add(format!("{prefix}.combine.w"), glorot(rng, &[gc, config.width], gc, config.width))?;
        let cb = store.add(format!("{prefix}.combine.b"), Tensor::zeros(&[config.width]))?;
        let gate = match config.gating {
            Gating::UniformConcat => None,
            Gating::MomentGated => Some(Mlp::new(
                store,
                rng,
                &format!("{prefix}.gate"),
                &[2, config.gate_hidden, config.heads],
                Activation::Tanh,
                Activation::Identity,
                true,
            )?),
        };
        Ok(Self {
            config: config.clone(),
            input_dim,
            heads,
            combine: (cw, cb),
            gate,
        })
    }

    pub fn combine_weight(&self) -> ParamId {
        self.combine.0
    }

    /// Parameter ids of head `h`, layer by layer as `(W, b)`.
    pub fn head_params(&self, h: usize) -> Vec<(ParamId, ParamId)> {
        self.heads[h].iter().map(|l| (l.w, l.b)).collect()
    }

    /// Softmax head weights from `[batch, 2]` history moments.
    pub fn gate_graph(&self, g: &mut Graph, store: &ParamStore, moments: NodeId) -> Result<Option<NodeId>> {
        match &self.gate {
            None => Ok(None),
            Some(mlp) => {
                let logits = mlp.forward(g, store, moments)?;
                Ok(Some(g.softmax(logits)))
            }
        }
    }

    fn head_graph(&self, g: &mut Graph, store: &ParamStore, x: NodeId, h: usize) -> Result<NodeId> {
        let mut cur = x;
        for (l, layer) in self.heads[h].iter().enumerate() {
            let (w, b) = (g.param(store, layer.w), g.param(store, layer.b));
            let y = g.conv(cur, w, b, layer.dilation)?;
            let y = g.act(y, Activation::Relu);
            cur = if l == 0 { y } else { g.add(y, cur)? };
        }
        Ok(cur)
    }

    /// Time steps each layer of head `h` must produce for the last output.
    fn needed_times(&self, h: usize, t_len: usize) -> Vec<Vec<usize>> {
        let layers = &self.heads[h];
        let kw = self.config.kernel_width;
        let mut needed = vec![Vec::new(); layers.len()];
        needed[layers.len() - 1] = vec![t_len - 1];
        for l in (1..layers.len()).rev() {
            let d = layers[l].dilation;
            let mut s = needed[l].clone();
            for &t in &needed[l] {
                s.extend((1..kw).filter_map(|k| t.checked_sub(k * d)));
            }
            s.sort_unstable();
            s.dedup();
            needed[l - 1] = s;
        }
        needed
    }

    /// Head `h` evaluated only at steps the final output depends on, giving
    /// `[batch, channels]`. Matches the last row of [`Self::head_graph`]
    /// exactly.
    fn head_graph_last(&self, g: &mut Graph, store: &ParamStore, x: NodeId, h: usize) -> Result<NodeId> {
        let t_len = g.value(x).shape[1];
        let needed = self.needed_times(h, t_len);
        let mut cur = x;
        let mut cur_times: Vec<usize> = (0..t_len).collect();
        for (l, layer) in self.heads[h].iter().enumerate() {
            let (w, b) = (g.param(store, layer.w), g.param(store, layer.b));
            let y = g.conv_at(cur, w, b, layer.dilation, &cur_times, &needed[l])?;
            let y = g.act(y, Activation::Relu);
            cur = if l == 0 {
                y
            } else {
                let idx = needed[l]
                    .iter()
                    .map(|t| cur_times.binary_search(t).expect("needed times are nested"))
                    .collect();
                let skip = g.gather_time(cur, idx)?;
                g.add(y, skip)?
            };
            cur_times.clone_from(&needed[l]);
        }
        g.select_time(cur, 0)
    }

    /// Encodes `[batch, time, input_dim]`. With `last_only` only the final
    /// time step is combined, giving `[batch, width]`; otherwise
    /// `[batch, time, width]`. The combine acts per time step, so both agree
    /// at the last step.
    pub fn graph(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: NodeId,
        moments: Option<NodeId>,
        last_only: bool,
    ) -> Result<NodeId> {
        let shape = g.value(x).shape.clone();
        if shape.len() != 3 || shape[2] != self.input_dim || shape[1] == 0 {
            return invalid(format!("encoder input {shape:?}, expected [batch, time >= 1, {}]", self.input_dim));
        }
        let weights = match (moments, &self.gate) {
            (Some(m), Some(_)) => self.gate_graph(g, store, m)?,
            (None, Some(_)) => return invalid("moment-gated encoder needs history moments"),
            _ => None,
        };
        let mut outs = Vec::with_capacity(self.heads.len());
        for h in 0..self.heads.len() {
            let mut e = if last_only {
                self.head_graph_last(g, store, x, h)?
            } else {
                self.head_graph(g, store, x, h)?
            };
            if let Some(wts) = weights {
                let col = g.select_col(wts, h)?;
                e = g.scale_rows(e, col)?;
            }
            outs.push(e);
        }
        let cat = if outs.len() == 1 { outs[0] } else { g.concat(&outs)? };
        let (w, b) = (g.param(store, self.combine.0), g.param(store, self.combine.1));
        g.linear(cat, w, Some(b))
    }
}

/// Mean and variance of `log1p(history)`, the gate's input.
pub fn history_moments(history: &[f64]) -> [f64; 2] {
    if history.is_empty() {
        return [0.0, 0.0];
    }
    let n = history.len() as f64;
    let logs: Vec<f64> = history.iter().map(|v| v.max(0.0).ln_1p()).collect();
    let mean = logs.iter().sum::<f64>() / n;
    let var = logs.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    [mean, var]
}

/// Runs the encoder on one `time × input_dim` history.
pub fn multi_head_encode(encoder: &Encoder, store: &ParamStore, x: &[Vec<f64>], target_history: &[f64]) -> Result<Encoding> {
    let time = x.len();
    if time == 0 {
        return invalid("empty encoder input");
    }
    if x.iter().any(|r| r.len() != encoder.input_dim) {
        return invalid(format!("encoder rows must have {} features", encoder.input_dim));
    }
    let mut g = Graph::new();
    let xi = g.input(Tensor::new(vec![1, time, encoder.input_dim], x.concat())?);
    let moments = match encoder.config.gating {
        Gating::MomentGated => Some(g.input(Tensor::new(vec![1, 2], history_moments(target_history).to_vec())?)),
        Gating::UniformConcat => None,
    };
    let e = encoder.graph(&mut g, store, xi, moments, false)?;
    Ok(Encoding {
        time,
        width: encoder.config.width,
        values: g.value(e).data.clone(),
    })
}

/// Head mixture weights for a target history; uniform until trained.
pub fn moment_gate(encoder: &Encoder, store: &ParamStore, history: &[f64]) -> Result<Vec<f64>> {
    if history.is_empty() {
        return invalid("moment gate needs a non-empty history");
    }
    let mut g = Graph::new();
    let m = g.input(Tensor::new(vec![1, 2], history_moments(history).to_vec())?);
    match encoder.gate_graph(&mut g, store, m)? {
        Some(w) => Ok(g.value(w).data.clone()),
        None => Ok(vec![1.0 / encoder.config.heads as f64; encoder.config.heads]),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small(heads: usize, gating: Gating) -> EncoderConfig {
        EncoderConfig {
            heads,
            channels: 3,
            dilations: vec![1, 2, 4],
            width: 4,
            gating,
            gate_hidden: 3,
            ..Default::default()
        }
    }

    fn series(len: usize, dim: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..len).map(|_| (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect()).collect()
    }

    #[test]
    fn peak_filter_examples() {
        let flat = vec![5.0; 30];
        assert_eq!(peak_filter(&flat, &PeakFilterConfig::default()), flat);

        let mut spiky = flat.clone();
        spiky[20] = 500.0;
        let out = peak_filter(&spiky, &PeakFilterConfig::default());
        assert_eq!(out[20], 20.0);
        assert_eq!(out[..20], spiky[..20]);
        assert_eq!(out[21..], spiky[21..]);

        let id = PeakFilterConfig {
            mode: PeakFilterMode::Identity,
            ..Default::default()
        };
        assert_eq!(peak_filter(&spiky, &id), spiky);
    }

    proptest! {
        #[test]
        fn peak_filter_only_lowers_values_above_cap(x in proptest::collection::vec(0.0f64..100.0, 0..60)) {
            let cfg = PeakFilterConfig::default();
            let out = peak_filter(&x, &cfg);
            for t in 0..x.len() {
                prop_assert!(out[t] <= x[t]);
                if t >= cfg.window {
                    let mean = x[t - cfg.window..t].iter().sum::<f64>() / cfg.window as f64;
                    let cap = cfg.multiple * mean.max(cfg.min_level);
                    if x[t] <= cap * (1.0 - 1e-12) {
                        prop_assert_eq!(out[t], x[t]);
                    }
                } else {
                    prop_assert_eq!(out[t], x[t]);
                }
            }
        }
    }

    #[test]
    fn causal_for_six_heads() {
        for gating in [Gating::UniformConcat, Gating::MomentGated] {
            let mut rng = ChaCha8Rng::seed_from_u64(3);
            let mut store = ParamStore::new();
            let enc = Encoder::new(&mut store, &mut rng, "enc", &small(6, gating), 2).unwrap();
            let x = series(12, 2, 4);
            let hist = vec![1.0, 0.0, 3.0];
            let base = multi_head_encode(&enc, &store, &x, &hist).unwrap();
            for t in 0..11 {
                let mut x2 = x.clone();
                for row in x2.iter_mut().skip(t + 1) {
                    row[0] += 10.0;
                    row[1] -= 3.0;
                }
                let e = multi_head_encode(&enc, &store, &x2, &hist).unwrap();
                for s in 0..=t {
                    assert_eq!(e.at(s), base.at(s), "time {s} saw the future of {t}");
                }
                assert_ne!(e.at(t + 1), base.at(t + 1));
            }
        }
    }

    #[test]
    fn zeroed_second_head_matches_single_head() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut s1 = ParamStore::new();
        let e1 = Encoder::new(&mut s1, &mut rng, "enc", &small(1, Gating::UniformConcat), 2).unwrap();
        let mut s2 = ParamStore::new();
        let e2 = Encoder::new(&mut s2, &mut rng, "enc", &small(2, Gating::UniformConcat), 2).unwrap();
        // copy head 0 and the combine rows of head 0; zero the rows of head 1
        for ((w1, b1), (w2, b2)) in e1.head_params(0).into_iter().zip(e2.head_params(0)) {
            *s2.get_mut(w2) = s1.get(w1).clone();
            *s2.get_mut(b2) = s1.get(b1).clone();
        }
        let c = 3;
        let width = 4;
        let cw1 = s1.get(e1.combine_weight()).clone();
        let cw2 = s2.get_mut(e2.combine_weight());
        cw2.data[..c * width].copy_from_slice(&cw1.data);
        cw2.data[c * width..].iter_mut().for_each(|v| *v = 0.0);

        let x = series(10, 2, 6);
        let a = multi_head_encode(&e1, &s1, &x, &[]).unwrap();
        let b = multi_head_encode(&e2, &s2, &x, &[]).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn head_symmetry_and_its_breaking() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut store = ParamStore::new();
        let enc = Encoder::new(&mut store, &mut rng, "enc", &small(2, Gating::UniformConcat), 2).unwrap();
        let mut g = Graph::new();
        let x = g.input(Tensor::new(vec![1, 8, 2], series(8, 2, 8).concat()).unwrap());
        let h0 = enc.head_graph(&mut g, &store, x, 0).unwrap();
        let h1 = enc.head_graph(&mut g, &store, x, 1).unwrap();
        assert_ne!(g.value(h0), g.value(h1));

        let mut tied = store.clone();
        for ((w0, b0), (w1, b1)) in enc.head_params(0).into_iter().zip(enc.head_params(1)) {
            *tied.get_mut(w1) = store.get(w0).clone();
            *tied.get_mut(b1) = store.get(b0).clone();
        }
        let mut g = Graph::new();
        let x = g.input(Tensor::new(vec![1, 8, 2], series(8, 2, 8).concat()).unwrap());
        let h0 = enc.head_graph(&mut g, &tied, x, 0).unwrap();
        let h1 = enc.head_graph(&mut g, &tied, x, 1).unwrap();
        assert_eq!(g.value(h0), g.value(h1));
    }

    #[test]
    fn gate_starts_uniform_and_sums_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut store = ParamStore::new();
        let enc = Encoder::new(&mut store, &mut rng, "enc", &small(6, Gating::MomentGated), 2).unwrap();
        let w = moment_gate(&enc, &store, &[0.0, 4.0, 9.0]).unwrap();
        assert!(w.iter().all(|v| (v - 1.0 / 6.0).abs() < 1e-15));

        for p in store.ids().collect::<Vec<_>>() {
            for v in store.get_mut(p).data.iter_mut() {
                *v = rng.random_range(-2.0..2.0);
            }
        }
        for k in 0..20 {
            let hist: Vec<f64> = (0..10).map(|i| ((i * k) % 7) as f64).collect();
            let w = moment_gate(&enc, &store, &hist).unwrap();
            assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        assert!(moment_gate(&enc, &store, &[]).is_err());
    }

    #[test]
    fn last_only_matches_full_encoding() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut store = ParamStore::new();
        let enc = Encoder::new(&mut store, &mut rng, "enc", &small(3, Gating::MomentGated), 2).unwrap();
        let x = series(9, 2, 11);
        let hist = [2.0, 5.0];
        let full = multi_head_encode(&enc, &store, &x, &hist).unwrap();
        let mut g = Graph::new();
        let xi = g.input(Tensor::new(vec![1, 9, 2], x.concat()).unwrap());
        let m = g.input(Tensor::new(vec![1, 2], history_moments(&hist).to_vec()).unwrap());
        let last = enc.graph(&mut g, &store, xi, Some(m), true).unwrap();
        assert_eq!(g.value(last).data, full.at(8));
    }

    #[test]
    fn pruned_last_step_evaluation() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let mut store = ParamStore::new();
        let enc = Encoder::new(&mut store, &mut rng, "enc", &EncoderConfig::default(), 3).unwrap();
        let needed = enc.needed_times(0, 64);
        let sizes: Vec<usize> = needed.iter().map(Vec::len).collect();
        assert_eq!(sizes, vec![32, 16, 8, 4, 2, 1]);

        for p in store.ids().collect::<Vec<_>>() {
            if store.name(p).ends_with(".b") {
                for v in store.get_mut(p).data.iter_mut() {
                    *v = rng.random_range(-0.3..0.3);
                }
            }
        }
        let x = series(64, 3, 15);
        let full = multi_head_encode(&enc, &store, &x, &[]).unwrap();
        let mut g = Graph::new();
        let xi = g.input(Tensor::new(vec![1, 64, 3], x.concat()).unwrap());
        let last = enc.graph(&mut g, &store, xi, None, true).unwrap();
        assert_eq!(g.value(last).data, full.at(63));
    }

    #[test]
    fn encoder_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for gating in [Gating::UniformConcat, Gating::MomentGated] {
            let mut store = ParamStore::new();
            let enc = Encoder::new(&mut store, &mut rng, "enc", &small(2, gating), 2).unwrap();
            // random biases keep ReLU pre-activations away from zero
            for p in store.ids().collect::<Vec<_>>() {
                if store.name(p).ends_with(".b") {
                    for v in store.get_mut(p).data.iter_mut() {
                        *v = rng.random_range(-0.5..0.5);
                    }
                }
            }
            let x = Tensor::new(vec![2, 6, 2], series(12, 2, 13).concat()).unwrap();
            let mom = Tensor::new(vec![2, 2], vec![0.5, 0.1, 1.5, 0.7]).unwrap();
            let r = grad_check(&store, 1e-6, 1e-6, |st| {
                let mut g = Graph::new();
                let xi = g.input(x.clone());
                let m = g.input(mom.clone());
                let e = enc.graph(&mut g, st, xi, Some(m), false)?;
                let last = enc.graph(&mut g, st, xi, Some(m), true)?;
                let mut terms = Vec::new();
                for node in [e, last] {
                    let t = g.act(node, Activation::Tanh);
                    let sq = g.mul(t, t)?;
                    terms.push(g.sum(sq));
                }
                let l = g.add(terms[0], terms[1])?;
                Ok((g, l))
            })
            .unwrap();
            assert!(r.max_rel_error < 1e-5, "{gating:?}: {} at {}", r.max_rel_error, r.worst_param);
        }
    }

    #[test]
    fn rejects_bad_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let enc = Encoder::new(&mut store, &mut rng, "enc", &small(1, Gating::UniformConcat), 2).unwrap();
        assert!(multi_head_encode(&enc, &store, &[], &[]).is_err());
        assert!(multi_head_encode(&enc, &store, &[vec![1.0]], &[]).is_err());
        let bad = EncoderConfig { heads: 0, ..Default::default() };
        assert!(Encoder::new(&mut store, &mut rng, "x", &bad, 2).is_err());
        assert_eq!(EncoderConfig::default().receptive_field(), 64);
    }
}
