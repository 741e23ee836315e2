use proptest::prelude::*;

use spade_core::metrics::{report_by_category, ReportCategory};
use spade_core::model::{evaluate, train, EvalConfig, ModelConfig, Routing, TrainedModel};
use spade_core::series::{
    build_horizon_grid, gen_mixed_magnitude_dataset, read_dataset, write_dataset, Dataset, DatasetMeta, MixConfig, D2_SHARES,
};
use spade_core::ExecMode;

fn small_dataset(seed: u64) -> Dataset {
    let mut mix = MixConfig::from_shares(&D2_SHARES, 30);
    mix.length = 90;
    mix.train_len = 70;
    let records = gen_mixed_magnitude_dataset(&mix, seed).unwrap();
    Dataset {
        meta: DatasetMeta {
            train_len: mix.train_len,
            window: mix.window,
            future_leads: 4,
        },
        records,
    }
}

fn small_model(seed: u64) -> ModelConfig {
    let mut cfg = ModelConfig::with_seed(seed);
    cfg.encoder.heads = 2;
    cfg.training.epochs = 2;
    cfg.training.steps_per_epoch = 2;
    cfg.training.batch_size = 16;
    cfg.training.min_fcd = Some(60);
    cfg
}

#[test]
fn csv_round_trip_then_train_and_reload() {
    let dir = tempfile::tempdir().unwrap();
    let ds = small_dataset(3);
    write_dataset(dir.path(), &ds).unwrap();
    let back = read_dataset(dir.path()).unwrap();
    assert_eq!(back.meta, ds.meta);
    assert_eq!(back.records.len(), ds.records.len());
    for (a, b) in back.records.iter().zip(&ds.records) {
        assert_eq!(a.target, b.target);
        assert_eq!(a.first_listing, b.first_listing);
        assert_eq!(a.static_cov, b.static_cov);
        // only the calendar rows that fit a written lead are recovered
        assert_eq!(&a.known_future[1..], &b.known_future[1..]);
    }

    let cfg = small_model(5);
    let trained = train(&back, &cfg).unwrap();
    let path = dir.path().join("model.json");
    trained.save(&path).unwrap();
    let reloaded = TrainedModel::load(&path).unwrap();
    assert_eq!(reloaded, trained);

    let eval = EvalConfig {
        exec: ExecMode::Sequential,
        ..EvalConfig::default()
    };
    let a = evaluate(&trained.to_model().unwrap(), &back.records, back.meta.train_len, &eval).unwrap();
    let b = evaluate(&reloaded.to_model().unwrap(), &back.records, back.meta.train_len, &eval).unwrap();
    assert_eq!(a.report, b.report);
    assert_eq!(a.report, report_by_category(&a.rows, &cfg.quantiles).unwrap());

    let all = a.report.row(ReportCategory::All, 0.9).unwrap();
    let per_cat_ql: f64 = a
        .report
        .rows
        .iter()
        .filter(|r| r.category != ReportCategory::All && r.quantile == 0.9)
        .map(|r| r.ql)
        .sum();
    assert!((all.ql - per_cat_ql).abs() <= 1e-9 * all.ql.max(1.0));
}

#[test]
fn training_is_identical_in_both_exec_modes() {
    let ds = small_dataset(8);
    let mut cfg = small_model(2);
    cfg.training.exec = ExecMode::Sequential;
    let seq = train(&ds, &cfg).unwrap();
    cfg.training.exec = ExecMode::Parallel;
    let par = train(&ds, &cfg).unwrap();
    assert_eq!(seq.params, par.params);
    assert_eq!(seq.log, par.log);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn forecasts_never_cross(seed in 0u64..500, data_seed in 0u64..500, fcd in 60usize..85, main_only in any::<bool>()) {
        let ds = small_dataset(data_seed);
        let mut cfg = small_model(seed);
        cfg.quantiles = vec![0.1, 0.5, 0.75, 0.9];
        cfg.horizons = build_horizon_grid(4, &[1, 2, 4]).unwrap();
        let model = spade_core::model::SpadeModel::new(&cfg, spade_core::model::InputDims::of(&ds.records).unwrap()).unwrap();
        let routing = if main_only { Routing::MainOnly } else { Routing::Auto };
        let f = model.forward(&ds.records, fcd, routing, ExecMode::Sequential).unwrap();
        prop_assert!(f.check_invariants().is_ok());
    }
}
