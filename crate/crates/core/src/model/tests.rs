use approx::assert_abs_diff_eq;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::autodiff::grad_check;
use crate::encoder::PeakFilterConfig;
use crate::metrics::{pinball, ReportCategory};
use crate::sparse_arm::{sparse_forecast, SparseFamily};

pub(crate) fn tiny_config(seed: u64) -> ModelConfig {
    let mut c = ModelConfig::with_seed(seed);
    c.encoder = EncoderConfig {
        heads: 2,
        channels: 3,
        dilations: vec![1, 2, 4],
        width: 4,
        gate_hidden: 3,
        peak_filter: PeakFilterConfig {
            window: 4,
            ..Default::default()
        },
        ..Default::default()
    };
    c.decoder = DecoderConfig {
        global_hidden: 5,
        local_hidden: 5,
        level_window: 4,
    };
    c.sparse = Some(SparseArmConfig {
        family: SparseFamily::Exponential,
        patch_len: 4,
        context: 8,
        embed: 3,
        hidden: 4,
    });
    c.horizons = build_horizon_grid(2, &[1, 2]).unwrap();
    c.context = 8;
    c.routing_window = 8;
    c.training.batch_size = 16;
    c.training.chunk_size = 5;
    c.training.epochs = 2;
    c.training.steps_per_epoch = 3;
    c.training.min_fcd = Some(7);
    c
}

fn record(id: &str, target: Vec<f64>, first_listing: i64, seed: u64) -> TimeSeriesRecord {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = target.len();
    TimeSeriesRecord {
        id: id.into(),
        past_cov: (0..n).map(|_| vec![rng.random_range(0.0..1.0)]).collect(),
        known_future: (0..n).map(|t| vec![(t as f64 * 0.3).sin(), rng.random_range(0.0..1.0)]).collect(),
        static_cov: vec![rng.random_range(-1.0..1.0)],
        target,
        first_listing,
    }
}

/// Ten series: active, quiet-but-old (sparse), and quiet-but-new.
pub(crate) fn mixed_records(len: usize) -> Vec<TimeSeriesRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    (0..10)
        .map(|i| {
            let target: Vec<f64> = match i % 3 {
                0 => (0..len).map(|_| rng.random_range(0..20) as f64).collect(),
                1 => (0..len).map(|t| if t < 3 && i == 4 { 1.0 } else { 0.0 }).collect(),
                _ => (0..len).map(|t| if t + 4 >= len { 2.0 } else { 0.0 }).collect(),
            };
            let first = if i % 3 == 2 { 12 } else { -5 };
            record(&format!("s{i}"), target, first, i as u64)
        })
        .collect()
}

fn model(cfg: &ModelConfig, recs: &[TimeSeriesRecord]) -> SpadeModel {
    SpadeModel::new(cfg, InputDims::of(recs).unwrap()).unwrap()
}

#[test]
fn route_matches_oracle() {
    let recs = mixed_records(30);
    let fcd = 20;
    let (sparse, dense) = route(&recs, fcd, 8).unwrap();
    let mut all: Vec<usize> = sparse.iter().chain(&dense).copied().collect();
    all.sort_unstable();
    assert_eq!(all, (0..10).collect::<Vec<_>>());
    for (i, r) in recs.iter().enumerate() {
        let oracle = r.target[fcd + 1 - 8..=fcd].iter().all(|&y| y == 0.0) && r.first_listing <= fcd as i64 - 8;
        assert_eq!(sparse.contains(&i), oracle, "series {i}");
    }
    assert!(!sparse.is_empty() && !dense.is_empty());

    let quiet: Vec<_> = (0..4).map(|i| record("q", vec![0.0; 30], -10, i)).collect();
    assert_eq!(route(&quiet, 20, 8).unwrap().0.len(), 4);
    let busy: Vec<_> = (0..4).map(|i| record("b", vec![1.0; 30], -10, i)).collect();
    assert_eq!(route(&busy, 20, 8).unwrap().1.len(), 4);
    assert!(route(&busy, 20, 0).is_err());
}

#[test]
fn zeroed_output_layer_gives_link_zero_point() {
    let recs = mixed_records(30);
    let mut m = model(&tiny_config(1), &recs);
    let (w, b) = m.decoder().output_layer();
    m.store.get_mut(w).data.fill(0.0);
    m.store.get_mut(b).data.fill(0.0);
    let samples: Vec<_> = recs.iter().map(|r| (r, 20)).collect();
    let out = decode(&m, &samples).unwrap();
    let ln2 = 2f64.ln();
    for ((r, fcd), f) in samples.iter().zip(&out) {
        let lvl = features::level(r, *fcd, 4);
        for (hi, h) in m.config.horizons.pairs().iter().enumerate() {
            for qi in 0..2 {
                let want = (qi + 1) as f64 * ln2 * h.span as f64 * (1.0 + lvl);
                assert_abs_diff_eq!(f[hi * 2 + qi], want, epsilon = 1e-12);
            }
        }
    }
}

#[test]
fn forecasts_are_non_crossing_and_non_negative() {
    let recs = mixed_records(30);
    let mut cfg = tiny_config(2);
    cfg.quantiles = vec![0.1, 0.5, 0.7, 0.9];
    let m = model(&cfg, &recs);
    for fcd in [7, 15, 27] {
        m.forward(&recs, fcd, Routing::Auto, ExecMode::Sequential)
            .unwrap()
            .check_invariants()
            .unwrap();
    }
}

#[test]
fn missing_future_covariates_are_rejected() {
    let recs = mixed_records(30);
    let m = model(&tiny_config(2), &recs);
    assert!(decode(&m, &[(&recs[0], 29)]).is_err());
}

#[test]
fn main_arm_gradients() {
    let recs = mixed_records(30);
    for gating in [Gating::UniformConcat, Gating::MomentGated] {
        let mut cfg = tiny_config(3);
        cfg.encoder.gating = gating;
        let mut m = model(&cfg, &recs);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for p in m.store.ids().collect::<Vec<_>>() {
            if m.store.name(p).ends_with(".b") {
                for v in m.store.get_mut(p).data.iter_mut() {
                    *v = rng.random_range(0.1..0.4);
                }
            }
        }
        let samples: Vec<_> = recs.iter().take(4).map(|r| (r, 20)).collect();
        let batch = MainBatch::build(&cfg, &m.dims, &samples).unwrap();
        // targets just above every forecast keep each pinball term on one
        // side without a large constant swamping the differences
        let n = samples.len() * cfg.horizons.len() * cfg.quantiles.len();
        let target: Vec<f64> = m.predict(&samples, Routing::MainOnly).unwrap().concat().iter().map(|v| v + 1.0).collect();
        let r = grad_check(&m.store, 1e-6, 1e-6, |st| {
            let mut g = Graph::new();
            let y = m.main_graph(&mut g, st, &batch)?;
            let l = g.pinball(y, target.clone(), cfg.quantiles.clone(), vec![1.0; n])?;
            Ok((g, l))
        })
        .unwrap();
        assert!(r.max_rel_error < 1e-5, "{gating:?}: {} at {}", r.max_rel_error, r.worst_param);
    }
}

#[test]
fn sparse_only_batch_equals_sparse_forecast() {
    let recs: Vec<_> = (0..5).map(|i| record(&format!("z{i}"), vec![0.0; 30], -20, i)).collect();
    let m = model(&tiny_config(5), &recs);
    let f = m.forward(&recs, 20, Routing::Auto, ExecMode::Sequential).unwrap();
    let hists: Vec<_> = recs.iter().map(|r| features::sparse_history(r, 20, 8)).collect();
    let refs: Vec<&[Vec<f64>]> = hists.iter().map(Vec::as_slice).collect();
    let direct = sparse_forecast(m.sparse_arm().unwrap(), &m.store, &refs, &m.config.horizons, &m.config.quantiles).unwrap();
    for (row, d) in f.rows.iter().zip(&direct) {
        assert_eq!(&row.values, d);
    }
}

#[test]
fn forward_is_permutation_equivariant() {
    let recs = mixed_records(30);
    let m = model(&tiny_config(6), &recs);
    let a = m.forward(&recs, 20, Routing::Auto, ExecMode::Sequential).unwrap();
    let mut rev = recs.clone();
    rev.reverse();
    let b = m.forward(&rev, 20, Routing::Auto, ExecMode::Sequential).unwrap();
    for (x, y) in a.rows.iter().zip(b.rows.iter().rev()) {
        assert_eq!(x, y);
    }
}

#[test]
fn main_only_routing_equals_model_without_sparse_arm() {
    let recs = mixed_records(30);
    let cfg = tiny_config(7);
    let with = model(&cfg, &recs);
    let mut no_sparse = cfg.clone();
    no_sparse.sparse = None;
    let without = model(&no_sparse, &recs);
    let a = with.forward(&recs, 20, Routing::MainOnly, ExecMode::Sequential).unwrap();
    let b = without.forward(&recs, 20, Routing::Auto, ExecMode::Sequential).unwrap();
    assert_eq!(a.rows, b.rows);
}

#[test]
fn zero_override_forecasts_zero_for_sparse_series() {
    let recs = mixed_records(30);
    let mut cfg = tiny_config(8);
    cfg.sparse.as_mut().unwrap().family = SparseFamily::Zero;
    let m = model(&cfg, &recs);
    let f = m.forward(&recs, 20, Routing::Auto, ExecMode::Sequential).unwrap();
    let (sparse, _) = route(&recs, 20, 8).unwrap();
    for i in sparse {
        assert!(f.rows[i].values.iter().all(|&v| v == 0.0));
    }
}

#[test]
fn zero_learning_rate_leaves_parameters_unchanged() {
    let recs = mixed_records(30);
    let mut cfg = tiny_config(9);
    cfg.training.lr = 0.0;
    let trained = train_records(&recs, 24, &cfg).unwrap();
    let fresh = model(&cfg, &recs);
    assert_eq!(trained.params, fresh.store.snapshot());
    assert_eq!(trained.log.epoch_loss.len(), 2);
}

#[test]
fn training_is_deterministic_across_exec_modes() {
    let recs = mixed_records(30);
    let mut cfg = tiny_config(10);
    cfg.training.exec = ExecMode::Sequential;
    let a = train_records(&recs, 24, &cfg).unwrap();
    let b = train_records(&recs, 24, &cfg).unwrap();
    cfg.training.exec = ExecMode::Parallel;
    let c = train_records(&recs, 24, &cfg).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.params, c.params);
    assert_ne!(a.params, model(&cfg, &recs).store.snapshot());
}

#[test]
fn non_finite_loss_is_divergence() {
    let mut recs = mixed_records(30);
    // each value is finite but a span-2 sum overflows
    recs[0].target[21] = f64::MAX;
    recs[0].target[22] = f64::MAX;
    let mut cfg = tiny_config(11);
    cfg.training.cutoff_quantile = 0.5;
    match train_records(&recs, 24, &cfg) {
        Err(crate::ForecastError::TrainingDivergence { epoch, .. }) => assert_eq!(epoch, 0),
        other => panic!("expected divergence, got {other:?}"),
    }
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let recs = mixed_records(30);
    let trained = train_records(&recs, 24, &tiny_config(12)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.json");
    trained.save(&path).unwrap();
    let loaded = TrainedModel::load(&path).unwrap();
    assert_eq!(loaded, trained);
    let a = trained.to_model().unwrap().forward(&recs, 25, Routing::Auto, ExecMode::Sequential).unwrap();
    let b = loaded.to_model().unwrap().forward(&recs, 25, Routing::Auto, ExecMode::Sequential).unwrap();
    assert_eq!(a, b);

    let mut old = trained.clone();
    old.format_version = 99;
    old.save(&path).unwrap();
    assert!(matches!(TrainedModel::load(&path), Err(crate::ForecastError::CheckpointVersion(99))));
}

#[test]
fn config_requires_seed_and_sorted_quantiles() {
    let json = serde_json::to_value(tiny_config(1)).unwrap();
    let mut no_seed = json.clone();
    no_seed["training"].as_object_mut().unwrap().remove("seed");
    assert!(serde_json::from_value::<ModelConfig>(no_seed).is_err());
    let back: ModelConfig = serde_json::from_value(json).unwrap();
    assert_eq!(back, tiny_config(1));

    let mut c = tiny_config(1);
    c.quantiles = vec![0.9, 0.5];
    assert!(c.validate().is_err());
    c.quantiles = vec![0.5, 1.0];
    assert!(c.validate().is_err());
}

#[test]
fn evaluate_matches_brute_force() {
    let recs = mixed_records(30);
    let m = model(&tiny_config(13), &recs[..2]);
    let ev = evaluate(&m, &recs[..2], 24, &EvalConfig::default()).unwrap();
    let fcds = evaluation_fcds(30, 24, &m.config.horizons, 1);
    assert_eq!(fcds, vec![23, 24, 25, 26, 27]);
    assert_eq!(ev.rows.len(), 2 * fcds.len());
    let mut ql = [0.0; 2];
    let mut sum_y = 0.0;
    for r in &recs[..2] {
        for &fcd in &fcds {
            let f = &m.predict(&[(r, fcd)], Routing::Auto).unwrap()[0];
            for (hi, h) in m.config.horizons.pairs().iter().enumerate() {
                let y: f64 = r.target[fcd + h.lead..fcd + h.lead + h.span].iter().sum();
                sum_y += y;
                for (qi, q) in [0.5, 0.9].iter().enumerate() {
                    ql[qi] += pinball(y, f[hi * 2 + qi], *q);
                }
            }
        }
    }
    for (qi, q) in [0.5, 0.9].iter().enumerate() {
        let row = ev.report.row(ReportCategory::All, *q).unwrap();
        assert_abs_diff_eq!(row.ql, ql[qi], epsilon = 1e-9 * ql[qi].max(1.0));
        assert_abs_diff_eq!(row.sum_y, sum_y, epsilon = 1e-9);
    }

    let self_delta = ev.report.clone().with_baseline(&ev.report);
    assert!(self_delta.rows.iter().all(|r| r.delta_vs_baseline_pct.is_none_or(|d| d == 0.0)));
}

#[test]
fn evaluation_covers_present_categories() {
    let recs = mixed_records(30);
    let m = model(&tiny_config(14), &recs);
    let ev = evaluate(&m, &recs, 24, &EvalConfig::default()).unwrap();
    let mut present: Vec<ReportCategory> = ev.rows.iter().map(|r| ReportCategory::Magnitude(r.category)).collect();
    present.push(ReportCategory::All);
    present.sort();
    present.dedup();
    let mut reported: Vec<ReportCategory> = ev.report.rows.iter().map(|r| r.category).collect();
    reported.dedup();
    assert_eq!(reported, present);
    let seq = evaluate(&m, &recs, 24, &EvalConfig { exec: ExecMode::Sequential, ..Default::default() }).unwrap();
    assert_eq!(seq.report, ev.report);
}
