//! Pipeline behavior: loading fixtures, resampling, filtering, imputation,
//! splitting, and determinism.

use stpark_core::data::*;
use stpark_core::error::Error;

fn write_fixture(dir: &std::path::Path, name: &str, content: &str) -> std::path::PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, content).unwrap();
    path
}

fn ts(minutes: i64) -> String {
    let base = 1_609_459_200; // 2021-01-01T00:00:00Z
    chrono::DateTime::from_timestamp(base + minutes * 60, 0)
        .unwrap()
        .to_rfc3339()
}

#[test]
fn loads_complete_fixture() {
    let dir = tempfile::tempdir().unwrap();
    let mut rows = String::from("timestamp,lot_id,available\n");
    for step in 0..4 {
        for lot in ["a", "b", "c"] {
            rows.push_str(&format!("{},{},{}\n", ts(step * 15), lot, 10 + step));
        }
    }
    let path = write_fixture(dir.path(), "pa.csv", &rows);
    let frame = load_pa_csv(&path).unwrap();
    assert_eq!(frame.n_steps(), 4);
    assert_eq!(frame.n_lots(), 3);
    assert!(frame.mask.iter().all(|&m| m));
    assert_eq!(frame.duplicates, 0);
    assert_eq!(frame.value(2, 0), 12.0);
}

#[test]
fn absent_reading_becomes_mask_entry() {
    let dir = tempfile::tempdir().unwrap();
    let mut rows = String::from("timestamp,lot_id,available\n");
    for step in 0..4 {
        for lot in ["a", "b"] {
            if step == 2 && lot == "b" {
                continue; // one missing reading
            }
            rows.push_str(&format!("{},{},{}\n", ts(step * 15), lot, 5));
        }
    }
    let path = write_fixture(dir.path(), "pa.csv", &rows);
    let frame = load_pa_csv(&path).unwrap();
    let missing: Vec<bool> = frame.mask.iter().map(|&m| !m).collect();
    assert_eq!(missing.iter().filter(|&&m| m).count(), 1);
    assert!(!frame.observed(2, 1));
}

#[test]
fn five_minute_raw_data_resamples_last_per_slot() {
    let dir = tempfile::tempdir().unwrap();
    let mut rows = String::from("timestamp,lot_id,available\n");
    // six raw readings at 5-minute spacing -> two 15-minute slots
    for (i, value) in [1.0, 2.0, 3.0, 4.0, 5.0, 6.0].iter().enumerate() {
        rows.push_str(&format!("{},a,{}\n", ts(i as i64 * 5), value));
    }
    let path = write_fixture(dir.path(), "pa.csv", &rows);
    let frame = load_pa_csv(&path).unwrap();
    assert_eq!(frame.n_steps(), 2);
    // last observation in each slot wins
    assert_eq!(frame.value(0, 0), 3.0);
    assert_eq!(frame.value(1, 0), 6.0);
}

#[test]
fn malformed_row_reports_line_number() {
    let dir = tempfile::tempdir().unwrap();
    let content = format!(
        "timestamp,lot_id,available\n{},a,5\nnot-a-date,a,6\n",
        ts(0)
    );
    let path = write_fixture(dir.path(), "pa.csv", &content);
    match load_pa_csv(&path) {
        Err(Error::CsvParse { line, .. }) => assert_eq!(line, 3),
        other => panic!("expected CsvParse, got {other:?}"),
    }
}

#[test]
fn duplicate_rows_last_wins_with_count() {
    let dir = tempfile::tempdir().unwrap();
    let content = format!(
        "timestamp,lot_id,available\n{},a,5\n{},a,9\n{},a,7\n",
        ts(0),
        ts(0),
        ts(15)
    );
    let path = write_fixture(dir.path(), "pa.csv", &content);
    let frame = load_pa_csv(&path).unwrap();
    assert_eq!(frame.duplicates, 1);
    assert_eq!(frame.value(0, 0), 9.0);
}

fn frame_with_missing(rates: &[(usize, usize)], n_steps: usize) -> SeriesFrame {
    // rates: (lot index, missing count); deterministic values
    let n_lots = rates.len();
    let mut values = vec![0.0; n_steps * n_lots];
    let mut mask = vec![true; n_steps * n_lots];
    for (lot, &(_, missing)) in rates.iter().enumerate() {
        for t in 0..n_steps {
            values[t * n_lots + lot] = 40.0 + (t % 7) as f64 + lot as f64;
        }
        // spread the gaps through the training region
        for m in 0..missing {
            let t = (m * 3) % n_steps;
            mask[t * n_lots + lot] = false;
        }
    }
    SeriesFrame {
        timestamps: (0..n_steps as i64).map(|i| i * STEP_SECONDS).collect(),
        lot_ids: (0..n_lots).map(|i| format!("lot{i}")).collect(),
        values,
        mask,
        duplicates: 0,
    }
}

#[test]
fn missing_rate_boundary_drops_31_keeps_29() {
    // 100 steps: 31 missing = dropped, 29 missing = kept
    let mut frame = frame_with_missing(&[(0, 0), (1, 0), (2, 0)], 1200);
    // lot 0: 31% missing, lot 1: 29% missing
    let n_lots = 3;
    for m in 0..372 {
        frame.mask[(m * 3 % 1200) * n_lots] = false;
    }
    let mut missing0 = 0;
    for t in 0..1200 {
        if !frame.mask[t * n_lots] {
            missing0 += 1;
        }
    }
    // fill to exactly 31% / 29%
    let mut t = 0;
    while missing0 < 372 {
        if frame.mask[t * n_lots] {
            frame.mask[t * n_lots] = false;
            missing0 += 1;
        }
        t += 1;
    }
    let mut missing1 = 0;
    let mut t = 0;
    while missing1 < 348 {
        if frame.mask[t * n_lots + 1] {
            frame.mask[t * n_lots + 1] = false;
            missing1 += 1;
        }
        t += 1;
    }
    assert_eq!(frame.missing_rate(0), 0.31);
    assert_eq!(frame.missing_rate(1), 0.29);
    let kept = filter_lots(&frame, 0.30, 0.5).unwrap();
    assert!(!kept.lot_ids.contains(&"lot0".to_string()));
    assert!(kept.lot_ids.contains(&"lot1".to_string()));
    assert!(kept.lot_ids.contains(&"lot2".to_string()));
}

#[test]
fn identical_distribution_has_zero_kl_and_is_kept() {
    let frame = frame_with_missing(&[(0, 0), (1, 0)], 1200);
    // values cycle with period 7 in both periods: identical histograms
    let kept = filter_lots(&frame, 0.30, 0.5).unwrap();
    assert_eq!(kept.n_lots(), 2);
}

#[test]
fn distribution_shift_is_dropped_and_matches_hand_computed_kl() {
    let n_steps = 1200;
    // lot 0 sits at 100 through training and 0 in the test period
    let mut frame = frame_with_missing(&[(0, 0), (1, 0)], n_steps);
    let (train_end, val_end) = split_boundaries(n_steps, (10, 1, 1));
    for t in 0..n_steps {
        frame.values[t * 2] = if t < val_end { 100.0 } else { 0.0 };
    }
    let kept = filter_lots(&frame, 0.30, 0.5).unwrap();
    assert!(!kept.lot_ids.contains(&"lot0".to_string()));

    // hand-computed smoothed-histogram KL for the two-spike case:
    // train mass in the top bin, test mass in bin 0, eps = 1e-6
    let train: Vec<f64> = vec![100.0; train_end];
    let test: Vec<f64> = vec![0.0; n_steps - val_end];
    let eps = 1e-6;
    let bins = 32.0;
    let pn = train.len() as f64 + bins * eps;
    let qn = test.len() as f64 + bins * eps;
    let p_top = (train.len() as f64 + eps) / pn;
    let p_other = eps / pn;
    let q0 = (test.len() as f64 + eps) / qn;
    let q_other = eps / qn;
    let mut expected = p_top * (p_top / q_other).ln(); // bin 31
    expected += p_other * (p_other / q0).ln(); // bin 0
    expected += 30.0 * (p_other * (p_other / q_other).ln()); // empty bins
    let got = histogram_kl(&train, &test);
    assert!(
        (got - expected).abs() < 1e-9,
        "kl {got} vs hand-computed {expected}"
    );
    assert!(got > 0.5);
}

#[test]
fn filter_is_idempotent() {
    let mut frame = frame_with_missing(&[(0, 0), (1, 0), (2, 0)], 1200);
    for m in 0..400 {
        frame.mask[((m * 3) % 1200) * 3] = false;
    }
    let once = filter_lots(&frame, 0.30, 0.5).unwrap();
    let twice = filter_lots(&once, 0.30, 0.5).unwrap();
    assert_eq!(once.lot_ids, twice.lot_ids);
    assert_eq!(once.values, twice.values);
    assert_eq!(once.mask, twice.mask);
}

#[test]
fn imputation_fills_forward_then_backward() {
    let mut frame = frame_with_missing(&[(0, 0)], 3);
    frame.values = vec![5.0, 0.0, 7.0];
    frame.mask = vec![true, false, true];
    let filled = impute_missing(&frame);
    assert_eq!(filled.values, vec![5.0, 5.0, 7.0]);
    assert_eq!(filled.mask, vec![true, false, true]);

    let mut lead = frame_with_missing(&[(0, 0)], 2);
    lead.values = vec![0.0, 4.0];
    lead.mask = vec![false, true];
    let filled = impute_missing(&lead);
    assert_eq!(filled.values, vec![4.0, 4.0]);

    // no gaps: bitwise identity
    let full = frame_with_missing(&[(0, 0), (1, 0)], 10);
    let same = impute_missing(&full);
    assert_eq!(same.values, full.values);
}

fn synthetic_bundle(n_steps: usize) -> DatasetBundle {
    let (mut frame, _, lots) = synth_generate(4, 14, 3).unwrap();
    // trim to the requested step count
    frame.timestamps.truncate(n_steps);
    frame.values.truncate(n_steps * 4);
    frame.mask.truncate(n_steps * 4);
    let weather = WeatherFrame {
        timestamps: frame.timestamps.clone(),
        temperature: vec![27.0; n_steps],
        humidity: vec![75.0; n_steps],
        wind_speed: vec![3.0; n_steps],
    };
    let temporal = TemporalFeatureFrame::build(&frame.timestamps, &weather).unwrap();
    split_and_window(&frame, &temporal, &lots, 12, 12, (10, 1, 1)).unwrap()
}

#[test]
fn split_boundaries_and_window_layout() {
    assert_eq!(split_boundaries(1200, (10, 1, 1)), (1000, 1100));
    let bundle = synthetic_bundle(1200);
    assert_eq!(bundle.boundaries, (1000, 1100));
    // windows never cross their split boundary
    let t_plus_tau = 24;
    let last_train = bundle.train.window_starts.iter().max().unwrap();
    assert!(last_train + t_plus_tau <= 1000);
    assert!(bundle.val.window_starts.iter().all(|&s| s >= 1000));
    let last_val = bundle.val.window_starts.iter().max().unwrap();
    assert!(last_val + t_plus_tau <= 1100);
    assert!(bundle.test.window_starts.iter().all(|&s| s >= 1100));
    assert_eq!(bundle.train.n_windows, 1000 - 24 + 1);
    assert_eq!(bundle.val.n_windows, 100 - 24 + 1);

    // targets immediately follow inputs
    let w = 5;
    let start = bundle.train.window_starts[w];
    let lot = 2;
    let expect = bundle
        .stats
        .normalize(lot, bundle.series[(start + 12) * 4 + lot]);
    assert_eq!(bundle.train.y_window(w)[lot], expect);
}

#[test]
fn normalization_uses_training_rows_only() {
    let bundle = synthetic_bundle(1200);
    // z-scores over the training rows have mean ~0 per lot
    for lot in 0..4 {
        let mean: f64 = (0..1000)
            .map(|t| bundle.stats.normalize(lot, bundle.series[t * 4 + lot]))
            .sum::<f64>()
            / 1000.0;
        assert!(mean.abs() < 1e-9, "lot {lot} train mean {mean}");
    }
    // recomputing the stats on the validation rows gives different numbers
    for lot in 0..4 {
        let val_mean: f64 = (1000..1100)
            .map(|t| bundle.series[t * 4 + lot])
            .sum::<f64>()
            / 100.0;
        assert!(
            (val_mean - bundle.stats.lot_mean[lot]).abs() > 1e-6,
            "validation mean coincides with training mean for lot {lot}"
        );
    }
}

#[test]
fn pipeline_is_deterministic() {
    let (frame, temporal, lots) = synth_generate(5, 10, 77).unwrap();
    let weather = WeatherFrame {
        timestamps: temporal.timestamps.clone(),
        temperature: temporal.temperature.clone(),
        humidity: temporal.humidity.clone(),
        wind_speed: temporal.wind_speed.clone(),
    };
    let a = prepare_bundle(&frame, &weather, &lots, 0.3, 0.5, 12, 12).unwrap();
    let b = prepare_bundle(&frame, &weather, &lots, 0.3, 0.5, 12, 12).unwrap();
    assert_eq!(a.train.x, b.train.x);
    assert_eq!(a.test.y, b.test.y);
    assert_eq!(a.stats, b.stats);
    assert_eq!(a.f_s, b.f_s);
}

#[test]
fn csv_roundtrip_preserves_frame() {
    let (frame, temporal, lots) = synth_generate(4, 3, 21).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_csvs(dir.path(), &frame, &temporal, &lots).unwrap();
    let (frame2, weather2, lots2) = load_dataset_dir(dir.path()).unwrap();
    assert_eq!(frame.timestamps, frame2.timestamps);
    assert_eq!(frame.lot_ids, frame2.lot_ids);
    assert_eq!(frame.values, frame2.values);
    assert_eq!(lots.len(), lots2.len());
    assert_eq!(weather2.temperature.len(), frame.n_steps());
    // identical digests across a write/load cycle
    assert_eq!(frame.digest(), frame2.digest());
}

#[test]
fn temporal_features_encode_time_deterministically() {
    let (frame, temporal, _) = synth_generate(3, 2, 4).unwrap();
    // first timestamp is 2021-01-01T00:00:00Z, a Friday
    assert_eq!(temporal.slots[0], 0);
    assert_eq!(temporal.days[0], 4);
    assert_eq!(temporal.slots[5], 5);
    let stats = NormStats {
        lot_ids: frame.lot_ids.clone(),
        lot_mean: vec![0.0; 3],
        lot_std: vec![1.0; 3],
        weather_mean: [27.0, 75.0, 3.0],
        weather_std: [1.0, 1.0, 1.0],
    };
    let m = temporal.feature_matrix(&stats);
    assert_eq!(m.len(), frame.n_steps() * TEMPORAL_FEATURE_DIM);
    // slot 0: sin = 0, cos = 1
    assert!((m[0] - 0.0).abs() < 1e-12);
    assert!((m[1] - 1.0).abs() < 1e-12);
}

#[test]
fn spatial_feature_matrix_shape_and_determinism() {
    let (frame, _, lots) = synth_generate(6, 1, 8).unwrap();
    let a = spatial_features(&frame.lot_ids, &lots).unwrap();
    let b = spatial_features(&frame.lot_ids, &lots).unwrap();
    assert_eq!(a.len(), 6 * SPATIAL_FEATURE_DIM);
    assert_eq!(a, b);
    // scaled numeric block stays in [0, 1]
    for lot in 0..6 {
        for j in 0..3 {
            let v = a[lot * SPATIAL_FEATURE_DIM + j];
            assert!((0.0..=1.0).contains(&v));
        }
    }
    // same land-use category, same code block
    let (c0, c3) = (
        &a[3 + 8..3 + 16],
        &a[3 * SPATIAL_FEATURE_DIM + 3 + 8..3 * SPATIAL_FEATURE_DIM + 3 + 16],
    );
    // lots 0 and 4 share a land use (cycle of 4); lots 0 and 3 do not
    let c4 = &a[4 * SPATIAL_FEATURE_DIM + 3 + 8..4 * SPATIAL_FEATURE_DIM + 3 + 16];
    let code0 = &a[3 + 8..3 + 16];
    assert_eq!(code0, c4);
    assert_ne!(c0, c3);

    // a lot with readings but no record is an error
    let err = spatial_features(&["ghost".to_string()], &lots);
    assert!(err.is_err());
}
