//! Quantile arm for series routed as sparse: patch MLP producing a
//! distribution parameter, then closed-form quantiles per horizon.

use std::f64::consts::SQRT_2;

use rand::Rng;
use serde::{Deserialize, Serialize};
use statrs::function::erf::erf_inv;

use crate::autodiff::{Activation, Graph, Mlp, NodeId, ParamStore, Tensor};
use crate::error::{invalid, ForecastError, Result};
use crate::metrics::check_quantile;
use crate::series::HorizonSpec;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SparseFamily {
    #[default]
    Exponential,
    TruncatedNormal,
    /// Parameter algebra only; quantiles would need sampling.
    Gamma,
    /// Rule-based override: every quantile is zero.
    Zero,
}

impl SparseFamily {
    /// Number of network outputs.
    pub fn n_params(self) -> Result<usize> {
        match self {
            SparseFamily::Exponential => Ok(1),
            SparseFamily::TruncatedNormal => Ok(2),
            SparseFamily::Zero => Ok(0),
            SparseFamily::Gamma => Err(ForecastError::UnsupportedFamily(
                "gamma quantiles need Monte Carlo sample paths".into(),
            )),
        }
    }
}

/// Distribution parameters at the longest span `ς`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum SparseParams {
    Exponential { theta: f64 },
    TruncatedNormal { mu_s: f64, sigma_s: f64 },
    Gamma { k_total: f64, theta: f64 },
    Zero,
}

/// Non-overlapping patches of a `time × features` history, oldest first.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchEmbedding {
    pub patch_len: usize,
    pub features: usize,
    /// Each patch flattened as `[step][feature]`.
    pub patches: Vec<Vec<f64>>,
    /// Zero-padded steps at the end of the last patch.
    pub padding: usize,
}

impl PatchEmbedding {
    /// Per-patch flag: `true` when the patch contains padding.
    pub fn mask(&self) -> Vec<bool> {
        let n = self.patches.len();
        (0..n).map(|i| i + 1 == n && self.padding > 0).collect()
    }
}

pub fn patch(x: &[Vec<f64>], patch_len: usize) -> Result<PatchEmbedding> {
    if patch_len == 0 {
        return invalid("patch_len must be >= 1");
    }
    if x.is_empty() {
        return invalid("cannot patch an empty history");
    }
    let features = x[0].len();
    if x.iter().any(|r| r.len() != features) {
        return invalid("ragged history rows");
    }
    let n = x.len().div_ceil(patch_len);
    let padding = n * patch_len - x.len();
    let patches = x
        .chunks(patch_len)
        .map(|c| {
            let mut p = c.concat();
            p.resize(patch_len * features, 0.0);
            p
        })
        .collect();
    Ok(PatchEmbedding {
        patch_len,
        features,
        patches,
        padding,
    })
}

fn check_open_unit(q: f64) -> Result<()> {
    if !(q > 0.0 && q < 1.0) {
        return invalid(format!("quantile {q} outside (0, 1)"));
    }
    Ok(())
}

/// Exponential quantile with scale `(span / max_span) · theta`.
pub fn exp_icdf(q: f64, span: f64, max_span: f64, theta: f64) -> Result<f64> {
    check_open_unit(q)?;
    if !(span > 0.0 && span <= max_span) {
        return invalid(format!("span {span} outside (0, {max_span}]"));
    }
    if !(theta > 0.0) {
        return invalid(format!("exponential scale {theta} must be positive"));
    }
    Ok(-(span / max_span) * theta * (-q).ln_1p())
}

/// Standard normal quantile, `√2 · erf⁻¹(2p − 1)`.
pub fn std_normal_icdf(p: f64) -> f64 {
    SQRT_2 * erf_inv(2.0 * p - 1.0)
}

/// Quantile of one of `n_spans` equal parts of an `N(mu_s, sigma_s²)`
/// aggregate, clipped at zero.
pub fn truncnorm_icdf(q: f64, n_spans: f64, mu_s: f64, sigma_s: f64) -> Result<f64> {
    check_open_unit(q)?;
    if !(n_spans >= 1.0) {
        return invalid(format!("n_spans {n_spans} must be >= 1"));
    }
    if !(sigma_s > 0.0) {
        return invalid(format!("sigma_s {sigma_s} must be positive"));
    }
    let (mu, sigma) = truncnorm_disaggregate(mu_s, sigma_s, n_spans);
    Ok((mu + sigma * std_normal_icdf(q)).max(0.0))
}

/// Splits an aggregate normal into `n` i.i.d. parts: `(mu_s/n, sigma_s/√n)`.
pub fn truncnorm_disaggregate(mu_s: f64, sigma_s: f64, n: f64) -> (f64, f64) {
    (mu_s / n, sigma_s / n.sqrt())
}

/// Sum of independent normal parts given as `(mu, sigma²)`.
pub fn truncnorm_aggregate(parts: &[(f64, f64)]) -> (f64, f64) {
    parts.iter().fold((0.0, 0.0), |(m, v), &(mi, vi)| (m + mi, v + vi))
}

/// `Σ Gamma(k_i, θ) = Gamma(Σ k_i, θ)`.
pub fn gamma_aggregate(shapes: &[f64], theta: f64) -> Result<(f64, f64)> {
    if shapes.is_empty() {
        return invalid("no gamma shapes");
    }
    if !(theta > 0.0) || shapes.iter().any(|k| !(*k > 0.0)) {
        return invalid("gamma parameters must be positive");
    }
    Ok((shapes.iter().sum(), theta))
}

/// Shape of the span-`span` part of a `Gamma(k_total, θ)` at span `max_span`;
/// shape scales with span.
pub fn gamma_disaggregate(k_total: f64, theta: f64, span: f64, max_span: f64) -> Result<(f64, f64)> {
    if !(k_total > 0.0 && theta > 0.0) {
        return invalid("gamma parameters must be positive");
    }
    if !(span > 0.0 && span <= max_span) {
        return invalid(format!("span {span} outside (0, {max_span}]"));
    }
    Ok((k_total * span / max_span, theta))
}

/// `[horizon][quantile]` forecasts for one series. Quantiles at or below
/// the median are zero.
pub fn sparse_quantiles(params: SparseParams, horizons: &HorizonSpec, quantiles: &[f64]) -> Result<Vec<f64>> {
    for &q in quantiles {
        check_quantile(q)?;
    }
    let max_span = horizons.max_span() as f64;
    let mut out = Vec::with_capacity(horizons.len() * quantiles.len());
    for h in horizons.pairs() {
        let span = h.span as f64;
        for &q in quantiles {
            let v = if q <= 0.5 {
                0.0
            } else {
                match params {
                    SparseParams::Zero => 0.0,
                    SparseParams::Exponential { theta } => exp_icdf(q, span, max_span, theta)?,
                    SparseParams::TruncatedNormal { mu_s, sigma_s } => {
                        truncnorm_icdf(q, max_span / span, mu_s, sigma_s)?
                    }
                    SparseParams::Gamma { .. } => {
                        return Err(ForecastError::UnsupportedFamily(
                            "gamma quantiles need Monte Carlo sample paths".into(),
                        ))
                    }
                }
            };
            out.push(v);
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SparseArmConfig {
    pub family: SparseFamily,
    pub patch_len: usize,
    /// History length fed to the patcher.
    pub context: usize,
    /// Per-patch embedding width.
    pub embed: usize,
    pub hidden: usize,
}

impl Default for SparseArmConfig {
    fn default() -> Self {
        Self {
            family: SparseFamily::Exponential,
            patch_len: 13,
            context: 52,
            embed: 8,
            hidden: 16,
        }
    }
}

impl SparseArmConfig {
    pub fn validate(&self) -> Result<()> {
        self.family.n_params()?;
        if self.patch_len == 0 || self.context == 0 || self.embed == 0 || self.hidden == 0 {
            return invalid("sparse arm sizes must be >= 1");
        }
        Ok(())
    }

    pub fn n_patches(&self) -> usize {
        self.context.div_ceil(self.patch_len)
    }
}

/// Patch MLP: a shared per-patch embedding, then an MLP over the flattened
/// patches with a softplus link.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseArm {
    pub config: SparseArmConfig,
    pub features: usize,
    nets: Option<(Mlp, Mlp)>,
}

impl SparseArm {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, prefix: &str, config: &SparseArmConfig, features: usize) -> Result<Self> {
        config.validate()?;
        let k = config.family.n_params()?;
        let nets = if k == 0 {
            None
        } else {
            let embed = Mlp::new(
                store,
                rng,
                &format!("{prefix}.patch"),
                &[config.patch_len * features, config.embed],
                Activation::Identity,
                Activation::Relu,
                false,
            )?;
            let head = Mlp::new(
                store,
                rng,
                &format!("{prefix}.mlp"),
                &[config.n_patches() * config.embed, config.hidden, k],
                Activation::Relu,
                Activation::Softplus,
                false,
            )?;
            Some((embed, head))
        };
        Ok(Self {
            config: config.clone(),
            features,
            nets,
        })
    }

    /// `[batch · n_patches, patch_len · features]` patch rows for a batch of
    /// `context × features` histories.
    pub fn patch_rows(&self, histories: &[&[Vec<f64>]]) -> Result<Tensor> {
        let width = self.config.patch_len * self.features;
        let mut data = Vec::with_capacity(histories.len() * self.config.n_patches() * width);
        for h in histories {
            if h.len() != self.config.context {
                return invalid(format!("sparse arm expects {} history rows, got {}", self.config.context, h.len()));
            }
            let p = patch(h, self.config.patch_len)?;
            if p.features != self.features {
                return invalid(format!("sparse arm expects {} features, got {}", self.features, p.features));
            }
            for row in p.patches {
                data.extend(row);
            }
        }
        Tensor::new(vec![histories.len() * self.config.n_patches(), width], data)
    }

    /// Positive distribution parameters, `[batch, n_params]`.
    pub fn params_graph(&self, g: &mut Graph, store: &ParamStore, patches: NodeId) -> Result<Option<NodeId>> {
        let Some((embed, head)) = &self.nets else { return Ok(None) };
        let rows = g.value(patches).rows();
        let batch = rows / self.config.n_patches();
        let e = embed.forward(g, store, patches)?;
        let flat = g.reshape(e, vec![batch, self.config.n_patches() * self.config.embed])?;
        Ok(Some(head.forward(g, store, flat)?))
    }

    /// `[batch · |H|, |Q|]` forecasts, rows ordered series-major.
    pub fn quantile_graph(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        patches: NodeId,
        batch: usize,
        horizons: &HorizonSpec,
        quantiles: &[f64],
    ) -> Result<NodeId> {
        let (nh, nq) = (horizons.len(), quantiles.len());
        let max_span = horizons.max_span() as f64;
        let Some(p) = self.params_graph(g, store, patches)? else {
            return Ok(g.input(Tensor::zeros(&[batch * nh, nq])));
        };
        let out = match self.config.family {
            SparseFamily::Exponential => {
                let coef: Vec<f64> = horizons
                    .pairs()
                    .iter()
                    .flat_map(|h| {
                        quantiles.iter().map(move |&q| {
                            if q <= 0.5 {
                                0.0
                            } else {
                                -(h.span as f64 / max_span) * (-q).ln_1p()
                            }
                        })
                    })
                    .collect();
                g.outer(p, coef)?
            }
            SparseFamily::TruncatedNormal => {
                let mut mu_coef = Vec::with_capacity(nh * nq);
                let mut sd_coef = Vec::with_capacity(nh * nq);
                let mut mask = Vec::with_capacity(nh * nq);
                for h in horizons.pairs() {
                    let n = max_span / h.span as f64;
                    for &q in quantiles {
                        mu_coef.push(1.0 / n);
                        sd_coef.push(if q <= 0.5 { 0.0 } else { std_normal_icdf(q) / n.sqrt() });
                        mask.push(if q <= 0.5 { 0.0 } else { 1.0 });
                    }
                }
                let mu = g.select_col(p, 0)?;
                let sd = g.select_col(p, 1)?;
                let a = g.outer(mu, mu_coef)?;
                let b = g.outer(sd, sd_coef)?;
                let s = g.add(a, b)?;
                let s = g.act(s, Activation::Relu);
                let rows = g.value(s).rows();
                g.mul_const(s, mask.repeat(rows))?
            }
            SparseFamily::Gamma | SparseFamily::Zero => unreachable!("no network for {:?}", self.config.family),
        };
        g.reshape(out, vec![batch * nh, nq])
    }

    /// Parameters predicted for each history.
    pub fn predict_params(&self, store: &ParamStore, histories: &[&[Vec<f64>]]) -> Result<Vec<SparseParams>> {
        if self.nets.is_none() {
            return Ok(vec![SparseParams::Zero; histories.len()]);
        }
        let mut g = Graph::new();
        let x = g.input(self.patch_rows(histories)?);
        let p = self.params_graph(&mut g, store, x)?.expect("network present");
        let v = g.value(p);
        let k = v.last_dim();
        Ok(v.data
            .chunks(k)
            .map(|c| match self.config.family {
                SparseFamily::Exponential => SparseParams::Exponential { theta: c[0] },
                _ => SparseParams::TruncatedNormal { mu_s: c[0], sigma_s: c[1] },
            })
            .collect())
    }
}

/// Forecasts for a batch of `context × features` histories, one
/// `[horizon][quantile]` vector per history.
pub fn sparse_forecast(
    arm: &SparseArm,
    store: &ParamStore,
    histories: &[&[Vec<f64>]],
    horizons: &HorizonSpec,
    quantiles: &[f64],
) -> Result<Vec<Vec<f64>>> {
    for &q in quantiles {
        check_quantile(q)?;
    }
    arm.predict_params(store, histories)?
        .into_iter()
        .map(|p| sparse_quantiles(p, horizons, quantiles))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check;
    use crate::series::build_horizon_grid;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use statrs::function::erf::erfc;

    fn bisect(cdf: impl Fn(f64) -> f64, q: f64, mut lo: f64, mut hi: f64) -> f64 {
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if cdf(mid) < q {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }

    fn normal_cdf(x: f64, mu: f64, sigma: f64) -> f64 {
        0.5 * erfc(-(x - mu) / (sigma * SQRT_2))
    }

    #[test]
    fn patch_examples() {
        let h: Vec<Vec<f64>> = (0..52).map(|t| vec![t as f64]).collect();
        let p = patch(&h, 13).unwrap();
        assert_eq!(p.patches.len(), 4);
        assert_eq!(p.padding, 0);
        assert_eq!(p.patches[1][0], 13.0);

        let p = patch(&h, 1).unwrap();
        assert_eq!(p.patches, h);

        let p = patch(&h[..50], 13).unwrap();
        assert_eq!(p.patches.len(), 4);
        assert_eq!(p.padding, 2);
        assert_eq!(p.mask(), vec![false, false, false, true]);
        assert_eq!(&p.patches[3][11..], &[0.0, 0.0]);

        assert!(patch(&[], 13).is_err());
        assert!(patch(&h, 0).is_err());
    }

    #[test]
    fn exp_icdf_examples() {
        assert_abs_diff_eq!(exp_icdf(0.9, 4.0, 4.0, 1.0).unwrap(), 10f64.ln(), epsilon = 1e-12);
        assert_abs_diff_eq!(exp_icdf(0.9, 2.0, 4.0, 2.0).unwrap(), 10f64.ln(), epsilon = 1e-12);
        assert!(exp_icdf(1e-12, 1.0, 1.0, 1.0).unwrap() < 1e-11);
        assert!(exp_icdf(1.0, 1.0, 1.0, 1.0).is_err());
        assert!(exp_icdf(0.0, 1.0, 1.0, 1.0).is_err());
        assert!(exp_icdf(0.5, 3.0, 2.0, 1.0).is_err());
    }

    #[test]
    fn truncnorm_examples() {
        assert_abs_diff_eq!(truncnorm_icdf(0.5, 4.0, 8.0, 2.0).unwrap(), 2.0, epsilon = 1e-12);
        assert_eq!(truncnorm_icdf(0.01, 1.0, 1.0, 1.0).unwrap(), 0.0);
        let oracle = bisect(|x| normal_cdf(x, 0.0, 1.0), 0.9, -10.0, 10.0);
        assert_abs_diff_eq!(oracle, 1.281552, epsilon = 1e-6);
        assert_abs_diff_eq!(truncnorm_icdf(0.9, 1.0, 0.0, 1.0).unwrap(), oracle, epsilon = 1e-9);
        assert!(truncnorm_icdf(1.5, 1.0, 0.0, 1.0).is_err());
        assert!(truncnorm_icdf(0.5, 0.5, 0.0, 1.0).is_err());
    }

    #[test]
    fn icdfs_match_bisection() {
        for i in 0..49 {
            let q = 0.51 + 0.01 * i as f64;
            for &theta in &[0.01, 0.1, 1.0, 10.0, 100.0] {
                let h = theta * 0.5;
                let o = bisect(|x| 1.0 - (-x / h).exp(), q, 0.0, 1e4);
                assert_abs_diff_eq!(exp_icdf(q, 2.0, 4.0, theta).unwrap(), o, epsilon = 1e-9);
            }
            for &(mu_s, sigma_s, n) in &[(0.0, 1.0, 1.0), (3.0, 0.5, 2.0), (-2.0, 4.0, 4.0), (50.0, 10.0, 13.0)] {
                let (mu, sd) = (mu_s / n, sigma_s / f64::sqrt(n));
                let o = bisect(|x| normal_cdf(x, mu, sd), q, mu - 50.0 * sd, mu + 50.0 * sd).max(0.0);
                assert_abs_diff_eq!(truncnorm_icdf(q, n, mu_s, sigma_s).unwrap(), o, epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn gamma_algebra() {
        assert_eq!(gamma_aggregate(&[2.0, 3.0], 1.5).unwrap(), (5.0, 1.5));
        assert_eq!(gamma_aggregate(&[2.5], 0.3).unwrap(), (2.5, 0.3));
        assert_eq!(gamma_disaggregate(10.0, 1.0, 1.0, 5.0).unwrap(), (2.0, 1.0));
        assert!(gamma_aggregate(&[0.0], 1.0).is_err());
        assert!(gamma_aggregate(&[1.0], -1.0).is_err());
        let err = sparse_quantiles(SparseParams::Gamma { k_total: 1.0, theta: 1.0 }, &build_horizon_grid(2, &[1]).unwrap(), &[0.9]);
        assert!(matches!(err, Err(ForecastError::UnsupportedFamily(_))));
    }

    proptest! {
        #[test]
        fn truncnorm_round_trip(mu_s in -50.0f64..50.0, sigma_s in 0.01f64..20.0, n in 1usize..16) {
            let (mu, sd) = truncnorm_disaggregate(mu_s, sigma_s, n as f64);
            let parts = vec![(mu, sd * sd); n];
            let (m, v) = truncnorm_aggregate(&parts);
            prop_assert!((m - mu_s).abs() <= 1e-12 * mu_s.abs().max(1.0));
            prop_assert!((v - sigma_s * sigma_s).abs() <= 1e-12 * (sigma_s * sigma_s).max(1.0));
        }

        #[test]
        fn sparse_quantiles_contracts(theta in 1e-3f64..100.0, mu_s in 0.0f64..50.0, sigma_s in 1e-3f64..20.0) {
            let hs = build_horizon_grid(6, &[1, 2, 3, 6]).unwrap();
            let qs = [0.1, 0.5, 0.6, 0.7, 0.9, 0.99];
            for p in [SparseParams::Exponential { theta }, SparseParams::TruncatedNormal { mu_s, sigma_s }, SparseParams::Zero] {
                let v = sparse_quantiles(p, &hs, &qs).unwrap();
                for (hi, h) in hs.pairs().iter().enumerate() {
                    for qi in 0..qs.len() {
                        let x = v[hi * qs.len() + qi];
                        prop_assert!(x >= 0.0);
                        if qs[qi] <= 0.5 { prop_assert_eq!(x, 0.0); }
                        if qi > 0 { prop_assert!(x >= v[hi * qs.len() + qi - 1]); }
                        // same lead, longer span
                        for (hj, h2) in hs.pairs().iter().enumerate() {
                            if h2.lead == h.lead && h2.span > h.span {
                                prop_assert!(v[hj * qs.len() + qi] >= x);
                            }
                        }
                    }
                }
                if let SparseParams::Exponential { theta } = p {
                    for (hi, h) in hs.pairs().iter().enumerate() {
                        let per_span = v[hi * qs.len() + 4] / h.span as f64;
                        prop_assert!((per_span - theta * 10f64.ln() / 6.0).abs() <= 1e-12 * theta.max(1.0));
                    }
                }
            }
        }
    }

    fn arm(family: SparseFamily, seed: u64) -> (SparseArm, ParamStore) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let cfg = SparseArmConfig {
            family,
            patch_len: 4,
            context: 10,
            embed: 3,
            hidden: 5,
        };
        let a = SparseArm::new(&mut store, &mut rng, "sparse", &cfg, 2).unwrap();
        (a, store)
    }

    fn histories(n: usize, seed: u64) -> Vec<Vec<Vec<f64>>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| (0..10).map(|_| vec![rng.random_range(0.0..2.0), rng.random_range(-1.0..1.0)]).collect())
            .collect()
    }

    #[test]
    fn graph_matches_closed_form() {
        let hs = build_horizon_grid(4, &[1, 2, 4]).unwrap();
        let qs = [0.5, 0.7, 0.9];
        for family in [SparseFamily::Exponential, SparseFamily::TruncatedNormal, SparseFamily::Zero] {
            let (a, store) = arm(family, 1);
            let hist = histories(3, 2);
            let refs: Vec<&[Vec<f64>]> = hist.iter().map(|h| h.as_slice()).collect();
            let direct = sparse_forecast(&a, &store, &refs, &hs, &qs).unwrap();
            let mut g = Graph::new();
            let x = g.input(a.patch_rows(&refs).unwrap());
            let y = a.quantile_graph(&mut g, &store, x, 3, &hs, &qs).unwrap();
            let flat: Vec<f64> = direct.concat();
            for (u, v) in g.value(y).data.iter().zip(&flat) {
                assert_abs_diff_eq!(u, v, epsilon = 1e-12);
            }
            assert!(direct.iter().all(|r| r.iter().step_by(3).all(|&v| v == 0.0)));
        }
    }

    #[test]
    fn gamma_arm_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let cfg = SparseArmConfig {
            family: SparseFamily::Gamma,
            ..Default::default()
        };
        assert!(matches!(
            SparseArm::new(&mut store, &mut rng, "s", &cfg, 2),
            Err(ForecastError::UnsupportedFamily(_))
        ));
    }

    #[test]
    fn arm_gradients() {
        let hs = build_horizon_grid(4, &[1, 4]).unwrap();
        let qs = [0.5, 0.9];
        for family in [SparseFamily::Exponential, SparseFamily::TruncatedNormal] {
            let (a, mut store) = arm(family, 3);
            let mut rng = ChaCha8Rng::seed_from_u64(4);
            for p in store.ids().collect::<Vec<_>>() {
                if store.name(p).ends_with(".b") {
                    for v in store.get_mut(p).data.iter_mut() {
                        *v = rng.random_range(0.2..0.6);
                    }
                }
            }
            let hist = histories(2, 5);
            let refs: Vec<&[Vec<f64>]> = hist.iter().map(|h| h.as_slice()).collect();
            let x = a.patch_rows(&refs).unwrap();
            // targets far from the forecasts so no pinball kink is crossed
            let target: Vec<f64> = (0..2 * hs.len() * qs.len()).map(|i| if i % 2 == 0 { 40.0 } else { 60.0 }).collect();
            let r = grad_check(&store, 1e-6, 1e-6, |st| {
                let mut g = Graph::new();
                let xi = g.input(x.clone());
                let y = a.quantile_graph(&mut g, st, xi, 2, &hs, &qs)?;
                let l = g.pinball(y, target.clone(), qs.to_vec(), vec![1.0; target.len()])?;
                let y2 = g.mul(y, y)?;
                let s = g.sum(y2);
                let l = g.add(l, s)?;
                Ok((g, l))
            })
            .unwrap();
            assert!(r.max_rel_error < 1e-5, "{family:?}: {} at {}", r.max_rel_error, r.worst_param);
        }
    }
}
