use super::*;
use crate::error::ForecastError;
use crate::metrics::{pinball, ReportCategory};
use crate::model::tests::tiny_config;
use crate::model::{train_records, Routing};
use crate::series::{gen_mixed_magnitude_dataset, is_sparse, MagnitudeCategory};
use crate::sparse_arm::SparseFamily;
use crate::encoder::Gating;

fn small_setup() -> StudySetup {
    let mut dataset = MixConfig::from_shares(&D1_SHARES, 40);
    dataset.length = 40;
    dataset.train_len = 30;
    dataset.window = 8;
    dataset.season_period = 8;
    dataset.max_attempts = 20;
    StudySetup {
        dataset,
        model: tiny_config(0),
        eval: EvalConfig::default(),
        exec: ExecMode::Parallel,
    }
}

#[test]
fn variant_ids_round_trip() {
    for v in Variant::ALL {
        assert_eq!(v.id().parse::<Variant>().unwrap(), v);
        assert_eq!(v.to_string(), v.id());
    }
    assert_eq!(" V19 ".parse::<Variant>().unwrap(), Variant::V19);
    assert!(matches!("v10".parse::<Variant>(), Err(ForecastError::InvalidArgument(_))));
}

#[test]
fn variant_configs() {
    let base = ModelConfig::with_seed(1);
    let v9 = Variant::V9.apply(&base);
    assert_eq!((v9.encoder.heads, v9.sparse.is_none()), (1, true));
    let v11 = Variant::V11.apply(&base);
    assert_eq!(v11.sparse.unwrap().family, SparseFamily::Zero);
    let v13 = Variant::V13.apply(&base);
    assert_eq!((v13.encoder.heads, v13.encoder.gating, v13.sparse.is_none()), (6, Gating::MomentGated, true));
    assert_eq!(Variant::V16.apply(&base).sparse.unwrap().family, SparseFamily::TruncatedNormal);
    let v19 = Variant::V19.apply(&base);
    assert_eq!((v19.encoder.heads, v19.encoder.gating), (6, Gating::UniformConcat));
    assert_eq!(v19.sparse.as_ref().unwrap().family, SparseFamily::Exponential);
    // nothing else changes
    let mut back = Variant::V9.apply(&v19);
    back.encoder = base.encoder.clone();
    back.sparse = base.sparse.clone();
    assert_eq!(back, base);
}

#[test]
fn zero_override_forecasts_zero_for_sparse_series() {
    let setup = small_setup();
    let records = gen_mixed_magnitude_dataset(&setup.dataset, 3).unwrap();
    let cfg = Variant::V11.apply(&setup.model);
    let model = train_records(&records, 30, &cfg).unwrap().to_model().unwrap();
    let fcd = 33;
    let samples: Vec<_> = records.iter().map(|r| (r, fcd)).collect();
    let preds = model.predict(&samples, Routing::Auto).unwrap();
    let mut sparse = 0;
    for (r, p) in records.iter().zip(&preds) {
        if is_sparse(r, fcd, cfg.routing_window).unwrap() {
            sparse += 1;
            assert!(p.iter().all(|v| *v == 0.0), "{}: {p:?}", r.id);
        }
    }
    assert!(sparse > 0);
}

#[test]
fn ablation_against_itself_and_recomputed() {
    let setup = small_setup();
    let seeds = [1, 2];
    let res = run_ablation(&[Variant::V9, Variant::V19], &setup, &seeds).unwrap();
    assert_eq!(res.variants, vec![Variant::V9, Variant::V19]);
    for c in res.cells.iter().filter(|c| c.variant == Variant::V9) {
        assert_eq!(c.delta_pct, Some(0.0));
        assert_eq!(c.wql, c.baseline_wql);
    }

    // recompute V19 WQL for seed 2 from raw per-series pinball losses
    let records = gen_mixed_magnitude_dataset(&setup.dataset, 2).unwrap();
    let eval = train_and_evaluate(&records, 30, &Variant::V19.apply(&setup.model), 2, &setup.eval).unwrap();
    let nq = setup.model.quantiles.len();
    for (qi, &q) in setup.model.quantiles.iter().enumerate() {
        let (mut ql, mut sy) = (0.0, 0.0);
        let (mut zql, mut zsy) = (0.0, 0.0);
        for row in &eval.rows {
            for (h, &y) in row.actuals.iter().enumerate() {
                let l = pinball(y, row.forecasts[h * nq + qi], q);
                ql += l;
                sy += y;
                if row.category == MagnitudeCategory::Zero {
                    zql += l;
                    zsy += y;
                }
            }
        }
        let cell = |cat| {
            res.cells
                .iter()
                .find(|c| c.variant == Variant::V19 && c.seed == 2 && c.category == cat && c.quantile == q)
                .unwrap()
        };
        let all = cell(ReportCategory::All).wql.unwrap();
        assert!((all - ql / sy).abs() <= 1e-12 * all.max(1.0), "{all} vs {}", ql / sy);
        if zsy > 0.0 {
            let z = cell(ReportCategory::Magnitude(MagnitudeCategory::Zero)).wql.unwrap();
            assert!((z - zql / zsy).abs() <= 1e-12 * z.max(1.0));
        }
    }

    // the baseline is added when not requested
    let only = run_ablation(&[Variant::V17], &setup, &[1]).unwrap();
    assert_eq!(only.variants, vec![Variant::V9, Variant::V17]);
    assert!(run_ablation(&[], &setup, &[1]).is_err());
    assert!(run_ablation(&[Variant::V9], &setup, &[]).is_err());
}

#[test]
fn ablation_is_independent_of_scheduling() {
    let mut setup = small_setup();
    let a = run_ablation(&[Variant::V19], &setup, &[4]).unwrap();
    setup.exec = ExecMode::Sequential;
    setup.model.training.exec = ExecMode::Sequential;
    assert_eq!(a, run_ablation(&[Variant::V19], &setup, &[4]).unwrap());
}

#[test]
fn head_sweep_shape_and_single_head_point() {
    let setup = small_setup();
    let res = head_count_sweep(&[1, 2], &setup, &[5]).unwrap();
    let cats: std::collections::BTreeSet<_> = res.summary.iter().map(|r| r.category).collect();
    assert_eq!(res.summary.len(), 2 * cats.len() * 2);
    let abl = run_ablation(&[Variant::V17], &setup, &[5]).unwrap();
    for row in res.summary.iter().filter(|r| r.heads == 1) {
        let v17 = abl.summary_row(Variant::V17, row.category, row.quantile).unwrap();
        assert_eq!(row.median_wql, v17.median_wql);
    }
    assert!(head_count_sweep(&[0], &setup, &[5]).is_err());
}

#[test]
fn identical_cutoffs_give_zero_deltas() {
    let setup = small_setup();
    let res = run_bias_sampling_experiment(&setup, [0.8, 0.8], &[1]).unwrap();
    let keys: std::collections::BTreeSet<_> = res.summary.iter().map(|r| (r.category, r.quantile.to_bits())).collect();
    assert_eq!(res.summary.len(), keys.len() * 2);
    for r in &res.summary {
        assert!(matches!(r.median_delta_pct, Some(d) if d == 0.0), "{r:?}");
    }
    assert!(run_bias_sampling_experiment(&setup, [0.8, 1.0], &[1]).is_err());
}

#[test]
fn study_outputs_are_reproducible() {
    let setup = small_setup();
    let dir = tempfile::tempdir().unwrap();
    for sub in ["a", "b"] {
        run_bias_sampling_experiment(&setup, [0.8, 0.3], &[1])
            .unwrap()
            .save(&dir.path().join(sub))
            .unwrap();
    }
    for f in ["bias_sampling.csv", "bias_sampling_summary.csv", "bias_sampling_summary.json"] {
        assert_eq!(
            std::fs::read(dir.path().join("a").join(f)).unwrap(),
            std::fs::read(dir.path().join("b").join(f)).unwrap()
        );
    }
}

#[test]
fn config_loads_from_toml_and_json() {
    let dir = tempfile::tempdir().unwrap();
    let toml_path = dir.path().join("exp.toml");
    std::fs::write(
        &toml_path,
        r#"
eval_stride = 2

[dataset]
preset = "d2"
series = 300

[model]
quantiles = [0.5, 0.9]

[model.encoder]
heads = 3

[model.training]
epochs = 4
"#,
    )
    .unwrap();
    let cfg = ExperimentConfig::load(&toml_path).unwrap();
    assert_eq!(cfg.eval_stride, 2);
    assert_eq!(cfg.model.encoder.heads, 3);
    assert_eq!(cfg.model.training.epochs, 4);
    assert_eq!(cfg.model.training.seed, 0);
    assert_eq!(cfg.dataset.mix().unwrap().total(), 300);

    let json_path = dir.path().join("exp.json");
    std::fs::write(&json_path, serde_json::to_string(&cfg).unwrap()).unwrap();
    assert_eq!(ExperimentConfig::load(&json_path).unwrap(), cfg);

    std::fs::write(&toml_path, "[dataset]\npreset = \"d9\"\n").unwrap();
    assert!(ExperimentConfig::load(&toml_path).is_err());
    std::fs::write(&toml_path, "[model.training]\nlr = -1.0\n").unwrap();
    assert!(ExperimentConfig::load(&toml_path).is_err());
    std::fs::write(&toml_path, "not = [valid").unwrap();
    assert!(matches!(ExperimentConfig::load(&toml_path), Err(ForecastError::Toml(_))));
}

#[test]
fn spec_requires_seeds() {
    let dir = tempfile::tempdir().unwrap();
    let spec = ExperimentSpec {
        id: "ablate".into(),
        config: None,
        seeds: vec![],
        out_dir: dir.path().join("out"),
    };
    assert!(spec.prepare().is_err());
    let spec = ExperimentSpec { seeds: vec![1], ..spec };
    spec.prepare().unwrap();
    assert!(spec.out_dir.is_dir());
    assert_eq!(spec.load_config().unwrap(), ExperimentConfig::default());
}
