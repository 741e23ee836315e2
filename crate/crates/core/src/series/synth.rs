//! Synthetic demand generators.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use super::{categorize_magnitude, MagnitudeCategory, TimeSeriesRecord};
use crate::error::{invalid, Result};

/// Poisson(`rate`) draws with `floor(s * length)` positions, chosen uniformly
/// without replacement, forced to zero.
pub fn gen_poisson_sparse(rate: f64, length: usize, sparsity: f64, seed: u64) -> Result<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    poisson_sparse_with(&mut rng, rate, length, sparsity)
}

pub(crate) fn poisson_sparse_with<R: Rng>(
    rng: &mut R,
    rate: f64,
    length: usize,
    sparsity: f64,
) -> Result<Vec<f64>> {
    if !(0.0..1.0).contains(&sparsity) {
        return invalid(format!("sparsity must be in [0,1), got {sparsity}"));
    }
    if length == 0 {
        return invalid("length must be >= 1");
    }
    let poisson = Poisson::new(rate).map_err(|e| crate::error::ForecastError::InvalidArgument(format!("rate {rate}: {e}")))?;
    let mut y: Vec<f64> = (0..length).map(|_| poisson.sample(rng)).collect();
    let zeros = (sparsity * length as f64).floor() as usize;
    for i in sample(rng, length, zeros) {
        y[i] = 0.0;
    }
    Ok(y)
}

/// How many series of one category to generate, and the per-period base
/// rate range they are drawn from (log-uniform).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CategorySpec {
    pub category: MagnitudeCategory,
    pub count: usize,
    pub rate_min: f64,
    pub rate_max: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MixConfig {
    pub categories: Vec<CategorySpec>,
    /// Total periods per series.
    pub length: usize,
    /// Periods `[0, train_len)` are the training window; the category of a
    /// series is decided on the trailing window ending at `train_len - 1`.
    pub train_len: usize,
    pub window: usize,
    /// Seasonal cycle length of the calendar covariates.
    pub season_period: usize,
    pub max_seasonal_amplitude: f64,
    pub promo_prob: f64,
    /// Multiplicative demand lift during a promotion is `1 + promo_lift`.
    pub promo_lift: f64,
    pub new_product_fraction: f64,
    /// Number of static covariates; the first carries the (noisy) seasonal
    /// amplitude, the rest are pure noise.
    pub static_dims: usize,
    /// Redraws allowed per series to land in the requested category.
    pub max_attempts: usize,
}

impl Default for MixConfig {
    fn default() -> Self {
        Self::from_shares(&D1_SHARES, 2000)
    }
}

/// Table-1 style shares, fastest first, as fractions.
pub const D1_SHARES: [f64; 6] = [0.0005, 0.016, 0.047, 0.173, 0.127, 0.637];
pub const D2_SHARES: [f64; 6] = [0.000007, 0.0007, 0.004, 0.037, 0.057, 0.90];
pub const D3_SHARES: [f64; 6] = [0.0018, 0.1177, 0.2932, 0.4340, 0.0571, 0.0962];

/// Per-period rate ranges matched to a 52-period window.
fn default_rates(c: MagnitudeCategory) -> (f64, f64) {
    match c {
        MagnitudeCategory::SuperFast => (220.0, 500.0),
        MagnitudeCategory::Fast => (9.0, 150.0),
        MagnitudeCategory::Medium => (1.3, 6.0),
        MagnitudeCategory::Slow => (0.08, 0.9),
        MagnitudeCategory::SuperSlow => (0.008, 0.035),
        MagnitudeCategory::Zero => (0.002, 0.03),
    }
}

impl MixConfig {
    /// Mix with the given category shares (fastest first). Counts use
    /// largest-remainder rounding so they sum to `n`.
    pub fn from_shares(shares: &[f64; 6], n: usize) -> Self {
        let total: f64 = shares.iter().sum();
        let raw: Vec<f64> = shares.iter().map(|s| s / total * n as f64).collect();
        let mut counts: Vec<usize> = raw.iter().map(|r| r.floor() as usize).collect();
        let mut rest: Vec<usize> = (0..6).collect();
        rest.sort_by(|&a, &b| (raw[b] - raw[b].floor()).total_cmp(&(raw[a] - raw[a].floor())).then(a.cmp(&b)));
        let short = n - counts.iter().sum::<usize>();
        for &i in rest.iter().take(short) {
            counts[i] += 1;
        }
        let categories = MagnitudeCategory::ALL
            .iter()
            .zip(counts)
            .filter(|(_, c)| *c > 0)
            .map(|(&category, count)| {
                let (rate_min, rate_max) = default_rates(category);
                CategorySpec {
                    category,
                    count,
                    rate_min,
                    rate_max,
                }
            })
            .collect();
        Self {
            categories,
            length: 160,
            train_len: 130,
            window: 52,
            season_period: 52,
            max_seasonal_amplitude: 0.5,
            promo_prob: 0.05,
            promo_lift: 1.0,
            new_product_fraction: 0.03,
            static_dims: 2,
            max_attempts: 200,
        }
    }

    /// A mix made of a single category.
    pub fn single(category: MagnitudeCategory, count: usize) -> Self {
        let mut cfg = Self::from_shares(&[1.0; 6], count);
        let (rate_min, rate_max) = default_rates(category);
        cfg.categories = vec![CategorySpec {
            category,
            count,
            rate_min,
            rate_max,
        }];
        cfg
    }

    pub fn total(&self) -> usize {
        self.categories.iter().map(|c| c.count).sum()
    }

    fn validate(&self) -> Result<()> {
        if self.categories.is_empty() || self.total() == 0 {
            return invalid("mix config has no series");
        }
        if self.train_len == 0 || self.train_len > self.length {
            return invalid("train_len must be in [1, length]");
        }
        if self.window == 0 || self.season_period == 0 || self.max_attempts == 0 {
            return invalid("window, season_period and max_attempts must be >= 1");
        }
        for c in &self.categories {
            let zero = c.category == MagnitudeCategory::Zero;
            if !(c.rate_min > 0.0 && c.rate_max >= c.rate_min) && !(zero && c.rate_max == 0.0) {
                return invalid(format!("bad rate range for {}", c.category));
            }
        }
        Ok(())
    }
}

/// Dataset whose series land in the configured magnitude categories at the
/// end of the training window.
///
/// Demand is Poisson with a seasonal, promotion-lifted rate. Calendar
/// covariates are `sin`/`cos` of the seasonal phase plus the promotion flag;
/// the past covariate is the promotion flag as observed. A series is redrawn
/// until its trailing aggregate lands in the requested category (the last
/// draw is kept if `max_attempts` runs out). A fraction of series are new
/// products listed inside the reference window, with zero demand before
/// listing.
pub fn gen_mixed_magnitude_dataset(config: &MixConfig, seed: u64) -> Result<Vec<TimeSeriesRecord>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, 1.0).expect("unit normal");
    let reference = config.train_len - 1;
    let mut out = Vec::with_capacity(config.total());
    for spec in &config.categories {
        for _ in 0..spec.count {
            let idx = out.len();
            let mut draw = None;
            for _ in 0..config.max_attempts {
                let rec = draw_series(config, spec, idx, &mut rng, &noise)?;
                let cat = categorize_magnitude(rec.trailing_sum(reference, config.window))?;
                let hit = cat == spec.category;
                draw = Some(rec);
                if hit {
                    break;
                }
            }
            out.push(draw.expect("max_attempts >= 1"));
        }
    }
    Ok(out)
}

fn draw_series(
    config: &MixConfig,
    spec: &CategorySpec,
    idx: usize,
    rng: &mut ChaCha8Rng,
    noise: &Normal<f64>,
) -> Result<TimeSeriesRecord> {
    let n = config.length;
    let rate = if spec.rate_max <= 0.0 {
        0.0
    } else {
        let (lo, hi) = (spec.rate_min.ln(), spec.rate_max.ln());
        (lo + (hi - lo) * rng.random::<f64>()).exp()
    };
    let amplitude = config.max_seasonal_amplitude * rng.random::<f64>();
    let phase = 2.0 * PI * rng.random::<f64>();
    let reference = (config.train_len - 1) as i64;
    let first_listing = if rng.random::<f64>() < config.new_product_fraction {
        reference - rng.random_range(0..config.window as i64)
    } else {
        -rng.random_range(1..=(3 * config.window as i64))
    };

    let mut target = Vec::with_capacity(n);
    let mut past_cov = Vec::with_capacity(n);
    let mut known_future = Vec::with_capacity(n);
    for t in 0..n {
        let angle = 2.0 * PI * t as f64 / config.season_period as f64 + phase;
        let promo = if rng.random::<f64>() < config.promo_prob { 1.0 } else { 0.0 };
        let lam = rate * (1.0 + amplitude * angle.sin()) * (1.0 + config.promo_lift * promo);
        let y = if (t as i64) < first_listing || lam <= 0.0 {
            0.0
        } else {
            Poisson::new(lam)
                .map_err(|e| crate::error::ForecastError::InvalidArgument(e.to_string()))?
                .sample(rng)
        };
        target.push(y);
        past_cov.push(vec![promo]);
        known_future.push(vec![angle.sin(), angle.cos(), promo]);
    }
    let mut static_cov = Vec::with_capacity(config.static_dims);
    if config.static_dims > 0 {
        static_cov.push(amplitude + 0.05 * noise.sample(rng));
    }
    for _ in 1..config.static_dims {
        static_cov.push(noise.sample(rng));
    }
    Ok(TimeSeriesRecord {
        id: format!("series_{idx:06}"),
        target,
        past_cov,
        known_future,
        static_cov,
        first_listing,
    })
}
