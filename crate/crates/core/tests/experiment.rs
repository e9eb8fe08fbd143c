// SPDX-License-Identifier: Apache-2.0

mod common;

use common::*;
use craft_core::experiment::{
    dump_retrieval_example, prepare, read_example_csv, run_experiment_on, sweep_candidates, write_example_csv,
    ExampleDump, TimingConfig,
};
use craft_core::retrieval::DEFAULT_EPS;
use craft_core::synthetic::periodic_series;
use craft_core::{metric_mae, metric_mse, CraftModel, ExperimentConfig, MetricsReport, ModelConfig, SplitScheme};
use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn model(l: usize, h: usize, seed: u64) -> CraftModel {
    let cfg = ModelConfig {
        lookback: l,
        horizon: h,
        hidden: 8,
    };
    CraftModel::init(cfg, 0.5, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

#[test]
fn exact_match_dump_reproduces_ground_truth() {
    let series = periodic_series(&[24.0, 10.0], 600, 0.1, 1).unwrap();
    let data = prepare(&series, SplitScheme::DEFAULT_RATIOS, 48, 12).unwrap();
    let kb = data.build_kb(1, 4).unwrap();
    let memory = data.memory().unwrap();
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("ex.csv");
    let dump = dump_retrieval_example(&kb, &model(48, 12, 2), &memory[100], 1, 1, &path).unwrap();
    assert_eq!(dump.retrieved.as_deref(), Some(dump.ground_truth.as_slice()));
    assert_eq!(dump.t[0], memory[100].t_end + 1);

    let back = read_example_csv(&path).unwrap();
    assert_eq!(back.t, dump.t);
    for (a, b) in back.fused.iter().zip(&dump.fused) {
        assert!((a - b).abs() < 1e-9);
    }
    assert!(dump_retrieval_example(&kb, &model(48, 12, 2), &memory[0], 2, 1, &path).is_err());
}

#[test]
fn dump_without_reference_omits_the_column() {
    let dump = ExampleDump {
        t: vec![5, 6],
        ground_truth: vec![1.0, 2.0],
        retrieved: None,
        fused: vec![0.5, 1.5],
    };
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("ex.csv");
    write_example_csv(&dump, &path).unwrap();
    assert!(std::fs::read_to_string(&path).unwrap().starts_with("t,ground_truth,fused\n"));
    assert_eq!(read_example_csv(&path).unwrap(), dump);
}

#[test]
fn full_neighbor_sweep_matches_exhaustive_references() {
    let (c, l, h, f) = (5, 32, 8, 5);
    let series = random_series(400, c, 3);
    let data = prepare(&series, SplitScheme::DEFAULT_RATIOS, l, h).unwrap();
    let base = data.build_kb(c - 1, f).unwrap();
    let windows = data.test_windows().unwrap();
    let m = model(l, h, 4);
    let no_timing = TimingConfig {
        batches: 0,
        ..TimingConfig::default()
    };
    let rows = sweep_candidates(&base, &m, &windows, &[1, 2, c - 1], 1, 16, &no_timing).unwrap();
    assert!(rows.windows(2).all(|w| w[0].sim_evals_per_query < w[1].sim_evals_per_query));

    let retriever = craft_core::Retriever::new(&base);
    let (mut se, mut ae, mut count) = (0.0, 0.0, 0usize);
    for w in &windows {
        let refs: Vec<Vec<_>> = (0..c)
            .map(|ch| brute_force_top(&base, &retriever.query_spectrum(w.x.column(ch)), 1, DEFAULT_EPS))
            .collect();
        let out = m.forecast_with_refs(w.x, &refs).unwrap();
        se += metric_mse(out.fused.view(), w.y).unwrap() * w.y.len() as f64;
        ae += metric_mae(out.fused.view(), w.y).unwrap() * w.y.len() as f64;
        count += w.y.len();
    }
    let last = rows.last().unwrap();
    assert!((last.mse - se / count as f64).abs() < 1e-12);
    assert!((last.mae - ae / count as f64).abs() < 1e-12);

    assert!(sweep_candidates(&base, &m, &windows, &[0], 1, 16, &no_timing).is_err());
    assert!(sweep_candidates(&base, &m, &windows, &[], 1, 16, &no_timing).is_err());
    let narrow = data.build_kb(1, f).unwrap();
    assert!(sweep_candidates(&narrow, &m, &windows, &[3], 1, 16, &no_timing).is_err());
}

#[test]
fn single_horizon_report_average_equals_its_row() {
    let series = periodic_series(&[12.0, 6.0], 500, 0.1, 5).unwrap();
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = ExperimentConfig {
        name: "syn".into(),
        lookback: 36,
        horizons: vec![12],
        neighbors: 1,
        out_dir: tmp.path().to_path_buf(),
        timing: TimingConfig {
            warmup: 0,
            batches: 2,
            threads: 1,
        },
        ..ExperimentConfig::default()
    };
    cfg.train.epochs = 2;
    cfg.train.hidden = 8;
    let report = run_experiment_on(&cfg, &series).unwrap();
    assert_eq!(report.rows.len(), 1);
    assert_eq!(report.avg_mse(), report.rows[0].mse);
    assert_eq!(report.avg_mae(), report.rows[0].mae);
    assert_eq!(report.timing.len(), 1);

    let text = std::fs::read_to_string(tmp.path().join("report.kv")).unwrap();
    let parsed = MetricsReport::parse_kv(&text).unwrap();
    assert_eq!(parsed.rows, report.rows);
    let cfg_back = ExperimentConfig::load(tmp.path().join("config.kv")).unwrap();
    assert_eq!(cfg_back.to_kv(), cfg.to_kv());
    for f in ["report.txt", "timing.kv", "model_h12.crmd", "train_log_h12.txt"] {
        assert!(tmp.path().join(f).exists(), "{f}");
    }
}

#[test]
fn metrics_reject_shape_mismatch() {
    let a = Array2::<f64>::zeros((2, 3));
    let b = Array2::<f64>::zeros((3, 2));
    assert!(metric_mse(a.view(), b.view()).is_err());
    assert!(metric_mae(a.view(), b.view()).is_err());
}

#[test]
fn forecast_query_maps_back_to_dataset_units() {
    let series = periodic_series(&[12.0, 6.0], 500, 0.05, 7).unwrap();
    let data = prepare(&series, SplitScheme::DEFAULT_RATIOS, 36, 12).unwrap();
    let kb = data.build_kb(1, 4).unwrap();
    let m = model(36, 12, 8);
    let shifted = craft_core::MultivariateSeries::new(series.values.mapv(|v| 100.0 + v), series.channel_names.clone(), 0).unwrap();
    let raw = craft_core::experiment::forecast_query(&m, &kb, &data.stats, &series, 2).unwrap();
    assert_eq!(raw.predictions.values.dim(), (12, 2));
    assert_eq!(raw.predictions.start_index, 500);
    assert_eq!(raw.provenance.len(), 4);
    assert!(raw.provenance.iter().all(|p| p.rank >= 1 && p.rank <= 2));

    // identical standardization stats, query offset by 100 in raw units
    let moved_stats = craft_core::ChannelStats {
        mean: &data.stats.mean + 100.0,
        std: data.stats.std.clone(),
    };
    let moved = craft_core::experiment::forecast_query(&m, &kb, &moved_stats, &shifted, 2).unwrap();
    for (a, b) in raw.predictions.values.iter().zip(moved.predictions.values.iter()) {
        assert!((b - a - 100.0).abs() < 1e-9);
    }
    let short = series.slice_rows(0, 10);
    assert!(craft_core::experiment::forecast_query(&m, &kb, &data.stats, &short, 1).is_err());
}
