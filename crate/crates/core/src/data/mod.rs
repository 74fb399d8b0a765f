//! Data pipeline: CSV ingestion at 15-minute resolution, lot filtering,
//! imputation, chronological splitting with train-only normalization, and
//! sliding-window assembly.
//!
//! CSV formats:
//! - PA: header `timestamp,lot_id,available`, ISO-8601 timestamps with
//!   timezone, one row per (slot, lot).
//! - Lots: header `lot_id,lat,lon,planning_area,land_use,road_density`.
//! - Weather: header `timestamp,temperature,humidity,wind_speed`.

mod synth;

pub use synth::{synth_generate, synth_generate_with, SynthConfig};

use std::collections::BTreeMap;

use chrono::DateTime;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Resampling interval in seconds.
pub const STEP_SECONDS: i64 = 900;
pub const SLOTS_PER_DAY: i64 = 86_400 / STEP_SECONDS;
/// Width of the temporal feature vector: sin/cos of time-of-day, sin/cos of
/// day-of-week, and three z-scored weather channels.
pub const TEMPORAL_FEATURE_DIM: usize = 7;
/// Width of the spatial feature vector: scaled lat/lon/road density plus an
/// 8-dim code per categorical feature.
pub const SPATIAL_FEATURE_DIM: usize = 3 + 2 * CATEGORY_CODE_DIM;
const CATEGORY_CODE_DIM: usize = 8;

const KL_BINS: usize = 32;
const KL_SMOOTHING: f64 = 1e-6;

// ── core frames ─────────────────────────────────────────────────────

/// Static attributes of one parking lot.
#[derive(Debug, Clone, PartialEq)]
pub struct LotRecord {
    pub lot_id: String,
    pub latitude: f64,
    pub longitude: f64,
    pub planning_area: String,
    pub land_use: String,
    pub road_density: f64,
}

impl LotRecord {
    pub fn validate(&self) -> Result<()> {
        if !(-90.0..=90.0).contains(&self.latitude) || !(-180.0..=180.0).contains(&self.longitude)
        {
            return Err(Error::Data(format!(
                "lot {}: coordinates ({}, {}) out of range",
                self.lot_id, self.latitude, self.longitude
            )));
        }
        Ok(())
    }
}

/// Aligned availability matrix on the 15-minute grid, with a missing mask.
#[derive(Debug, Clone)]
pub struct SeriesFrame {
    /// Strictly increasing, spaced exactly `STEP_SECONDS` apart.
    pub timestamps: Vec<i64>,
    pub lot_ids: Vec<String>,
    /// Row-major (n_steps, n_lots).
    pub values: Vec<f64>,
    /// True where a value was actually observed.
    pub mask: Vec<bool>,
    /// (slot, lot) collisions resolved last-wins during loading.
    pub duplicates: usize,
}

impl SeriesFrame {
    pub fn n_steps(&self) -> usize {
        self.timestamps.len()
    }

    pub fn n_lots(&self) -> usize {
        self.lot_ids.len()
    }

    pub fn value(&self, step: usize, lot: usize) -> f64 {
        self.values[step * self.n_lots() + lot]
    }

    pub fn observed(&self, step: usize, lot: usize) -> bool {
        self.mask[step * self.n_lots() + lot]
    }

    pub fn missing_rate(&self, lot: usize) -> f64 {
        let n = self.n_steps();
        if n == 0 {
            return 1.0;
        }
        let missing = (0..n).filter(|&t| !self.observed(t, lot)).count();
        missing as f64 / n as f64
    }

    pub fn validate(&self) -> Result<()> {
        if self.values.len() != self.n_steps() * self.n_lots()
            || self.mask.len() != self.values.len()
        {
            return Err(Error::Data("frame buffers disagree with dimensions".into()));
        }
        for w in self.timestamps.windows(2) {
            if w[1] - w[0] != STEP_SECONDS {
                return Err(Error::Data(format!(
                    "timestamps not on the {STEP_SECONDS}s grid: {} -> {}",
                    w[0], w[1]
                )));
            }
        }
        for (i, (&v, &m)) in self.values.iter().zip(&self.mask).enumerate() {
            if m && v < 0.0 {
                return Err(Error::Data(format!(
                    "negative availability {v} at flat index {i}"
                )));
            }
        }
        Ok(())
    }

    /// Stable content hash, for pipeline-determinism checks.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for t in &self.timestamps {
            h.update(t.to_le_bytes());
        }
        for id in &self.lot_ids {
            h.update(id.as_bytes());
            h.update([0]);
        }
        for v in &self.values {
            h.update(v.to_le_bytes());
        }
        for &m in &self.mask {
            h.update([u8::from(m)]);
        }
        hex_string(&h.finalize())
    }
}

pub(crate) fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Per-step temporal context: time-of-day slot, day-of-week, raw weather.
/// Weather is z-scored against training statistics when the feature matrix
/// is materialized.
#[derive(Debug, Clone)]
pub struct TemporalFeatureFrame {
    pub timestamps: Vec<i64>,
    pub slots: Vec<u32>,
    pub days: Vec<u32>,
    pub temperature: Vec<f64>,
    pub humidity: Vec<f64>,
    pub wind_speed: Vec<f64>,
}

impl TemporalFeatureFrame {
    /// Derives slot/day-of-week columns from timestamps and aligns raw
    /// weather series (forward/backward filled) onto the same grid.
    pub fn build(timestamps: &[i64], weather: &WeatherFrame) -> Result<TemporalFeatureFrame> {
        let aligned = weather.aligned_to(timestamps)?;
        let slots = timestamps
            .iter()
            .map(|&ts| (ts.rem_euclid(86_400) / STEP_SECONDS) as u32)
            .collect();
        // 1970-01-01 was a Thursday; day 0 here is Monday
        let days = timestamps
            .iter()
            .map(|&ts| ((ts.div_euclid(86_400) + 3).rem_euclid(7)) as u32)
            .collect();
        Ok(TemporalFeatureFrame {
            timestamps: timestamps.to_vec(),
            slots,
            days,
            temperature: aligned.0,
            humidity: aligned.1,
            wind_speed: aligned.2,
        })
    }

    /// Row-major (n_steps, TEMPORAL_FEATURE_DIM) matrix with the weather
    /// channels z-scored by the supplied statistics.
    pub fn feature_matrix(&self, stats: &NormStats) -> Vec<f64> {
        let n = self.timestamps.len();
        let mut out = Vec::with_capacity(n * TEMPORAL_FEATURE_DIM);
        let tau = std::f64::consts::TAU;
        for i in 0..n {
            let slot = self.slots[i] as f64 / SLOTS_PER_DAY as f64;
            let day = self.days[i] as f64 / 7.0;
            out.push((tau * slot).sin());
            out.push((tau * slot).cos());
            out.push((tau * day).sin());
            out.push((tau * day).cos());
            for (j, raw) in [self.temperature[i], self.humidity[i], self.wind_speed[i]]
                .into_iter()
                .enumerate()
            {
                out.push((raw - stats.weather_mean[j]) / stats.weather_std[j]);
            }
        }
        out
    }
}

/// Raw weather observations on the 15-minute grid.
#[derive(Debug, Clone)]
pub struct WeatherFrame {
    pub timestamps: Vec<i64>,
    pub temperature: Vec<f64>,
    pub humidity: Vec<f64>,
    pub wind_speed: Vec<f64>,
}

impl WeatherFrame {
    /// Projects the weather series onto `grid`, forward-filling gaps and
    /// backward-filling a leading gap.
    fn aligned_to(&self, grid: &[i64]) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
        if self.timestamps.is_empty() {
            return Err(Error::Data("weather frame is empty".into()));
        }
        let index: BTreeMap<i64, usize> = self
            .timestamps
            .iter()
            .enumerate()
            .map(|(i, &t)| (t, i))
            .collect();
        let pick = |ts: i64| -> usize {
            // latest observation at or before ts, else the first one
            index
                .range(..=ts)
                .next_back()
                .map(|(_, &i)| i)
                .unwrap_or(0)
        };
        let mut t = Vec::with_capacity(grid.len());
        let mut h = Vec::with_capacity(grid.len());
        let mut w = Vec::with_capacity(grid.len());
        for &ts in grid {
            let i = pick(ts);
            t.push(self.temperature[i]);
            h.push(self.humidity[i]);
            w.push(self.wind_speed[i]);
        }
        Ok((t, h, w))
    }
}

// ── loading ─────────────────────────────────────────────────────────

fn parse_timestamp(raw: &str, line: u64) -> Result<i64> {
    DateTime::parse_from_rfc3339(raw)
        .map(|dt| dt.timestamp())
        .map_err(|e| Error::CsvParse {
            line,
            msg: format!("bad timestamp {raw:?}: {e}"),
        })
}

fn slot_of(ts: i64) -> i64 {
    ts.div_euclid(STEP_SECONDS) * STEP_SECONDS
}

/// Loads and aligns the PA CSV. Raw rows are resampled to the 15-minute
/// grid by keeping the last observation per slot; gaps become mask entries,
/// and duplicate (slot, lot) rows resolve last-wins.
pub fn load_pa_csv(path: impl AsRef<std::path::Path>) -> Result<SeriesFrame> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path.as_ref())?;
    // (slot, lot) -> value, insertion order = file order so later rows win
    let mut cells: BTreeMap<(i64, String), f64> = BTreeMap::new();
    let mut duplicates = 0usize;
    for row in reader.records() {
        let record = row.map_err(|e| Error::CsvParse {
            line: 0,
            msg: e.to_string(),
        })?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        if record.len() != 3 {
            return Err(Error::CsvParse {
                line,
                msg: format!("expected 3 fields, got {}", record.len()),
            });
        }
        let ts = parse_timestamp(&record[0], line)?;
        let lot = record[1].trim().to_string();
        if lot.is_empty() {
            return Err(Error::CsvParse {
                line,
                msg: "empty lot_id".into(),
            });
        }
        let value: f64 = record[2].trim().parse().map_err(|e| Error::CsvParse {
            line,
            msg: format!("bad availability {:?}: {e}", &record[2]),
        })?;
        if !value.is_finite() || value < 0.0 {
            return Err(Error::CsvParse {
                line,
                msg: format!("availability must be finite and >= 0, got {value}"),
            });
        }
        if cells.insert((slot_of(ts), lot), value).is_some() {
            duplicates += 1;
        }
    }
    if cells.is_empty() {
        return Err(Error::Data("PA csv contains no rows".into()));
    }

    let mut lot_ids: Vec<String> = cells.keys().map(|(_, lot)| lot.clone()).collect();
    lot_ids.sort();
    lot_ids.dedup();
    let lot_index: BTreeMap<&str, usize> = lot_ids
        .iter()
        .enumerate()
        .map(|(i, id)| (id.as_str(), i))
        .collect();

    let first = cells.keys().map(|(s, _)| *s).min().expect("nonempty");
    let last = cells.keys().map(|(s, _)| *s).max().expect("nonempty");
    let n_steps = ((last - first) / STEP_SECONDS + 1) as usize;
    let n_lots = lot_ids.len();
    let timestamps: Vec<i64> = (0..n_steps as i64).map(|i| first + i * STEP_SECONDS).collect();

    let mut values = vec![0.0; n_steps * n_lots];
    let mut mask = vec![false; n_steps * n_lots];
    for ((slot, lot), value) in cells {
        let step = ((slot - first) / STEP_SECONDS) as usize;
        let idx = step * n_lots + lot_index[lot.as_str()];
        values[idx] = value;
        mask[idx] = true;
    }
    let frame = SeriesFrame {
        timestamps,
        lot_ids,
        values,
        mask,
        duplicates,
    };
    frame.validate()?;
    Ok(frame)
}

pub fn load_lots_csv(path: impl AsRef<std::path::Path>) -> Result<Vec<LotRecord>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path.as_ref())?;
    let mut lots = Vec::new();
    for row in reader.records() {
        let record = row.map_err(|e| Error::CsvParse {
            line: 0,
            msg: e.to_string(),
        })?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        if record.len() != 6 {
            return Err(Error::CsvParse {
                line,
                msg: format!("expected 6 fields, got {}", record.len()),
            });
        }
        let parse = |idx: usize| -> Result<f64> {
            record[idx].trim().parse().map_err(|e| Error::CsvParse {
                line,
                msg: format!("bad number {:?}: {e}", &record[idx]),
            })
        };
        let lot = LotRecord {
            lot_id: record[0].trim().to_string(),
            latitude: parse(1)?,
            longitude: parse(2)?,
            planning_area: record[3].trim().to_string(),
            land_use: record[4].trim().to_string(),
            road_density: parse(5)?,
        };
        lot.validate()?;
        lots.push(lot);
    }
    if lots.is_empty() {
        return Err(Error::Data("lots csv contains no rows".into()));
    }
    Ok(lots)
}

pub fn load_weather_csv(path: impl AsRef<std::path::Path>) -> Result<WeatherFrame> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path.as_ref())?;
    let mut rows: BTreeMap<i64, (f64, f64, f64)> = BTreeMap::new();
    for row in reader.records() {
        let record = row.map_err(|e| Error::CsvParse {
            line: 0,
            msg: e.to_string(),
        })?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        if record.len() != 4 {
            return Err(Error::CsvParse {
                line,
                msg: format!("expected 4 fields, got {}", record.len()),
            });
        }
        let ts = parse_timestamp(&record[0], line)?;
        let parse = |idx: usize| -> Result<f64> {
            record[idx].trim().parse().map_err(|e| Error::CsvParse {
                line,
                msg: format!("bad number {:?}: {e}", &record[idx]),
            })
        };
        rows.insert(slot_of(ts), (parse(1)?, parse(2)?, parse(3)?));
    }
    if rows.is_empty() {
        return Err(Error::Data("weather csv contains no rows".into()));
    }
    let timestamps: Vec<i64> = rows.keys().copied().collect();
    Ok(WeatherFrame {
        temperature: rows.values().map(|v| v.0).collect(),
        humidity: rows.values().map(|v| v.1).collect(),
        wind_speed: rows.values().map(|v| v.2).collect(),
        timestamps,
    })
}

// ── filtering and imputation ────────────────────────────────────────

/// Smoothed-histogram KL divergence between two samples, shared bins over
/// the combined range.
pub fn histogram_kl(train: &[f64], test: &[f64]) -> f64 {
    if train.is_empty() || test.is_empty() {
        return f64::INFINITY;
    }
    let lo = train
        .iter()
        .chain(test)
        .fold(f64::INFINITY, |a, &b| a.min(b));
    let hi = train
        .iter()
        .chain(test)
        .fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    if hi <= lo {
        return 0.0; // both samples constant and equal
    }
    let width = (hi - lo) / KL_BINS as f64;
    let bin = |v: f64| (((v - lo) / width) as usize).min(KL_BINS - 1);
    let mut p = vec![0.0f64; KL_BINS];
    let mut q = vec![0.0f64; KL_BINS];
    for &v in train {
        p[bin(v)] += 1.0;
    }
    for &v in test {
        q[bin(v)] += 1.0;
    }
    let pn = train.len() as f64 + KL_BINS as f64 * KL_SMOOTHING;
    let qn = test.len() as f64 + KL_BINS as f64 * KL_SMOOTHING;
    let mut kl = 0.0;
    for i in 0..KL_BINS {
        let pi = (p[i] + KL_SMOOTHING) / pn;
        let qi = (q[i] + KL_SMOOTHING) / qn;
        kl += pi * (pi / qi).ln();
    }
    kl
}

/// Chronological split boundaries for the given ratios.
pub fn split_boundaries(n_steps: usize, ratios: (usize, usize, usize)) -> (usize, usize) {
    let total = ratios.0 + ratios.1 + ratios.2;
    let train_end = n_steps * ratios.0 / total;
    let val_end = n_steps * (ratios.0 + ratios.1) / total;
    (train_end, val_end)
}

/// Drops lots whose missing rate reaches `max_missing`, then lots whose
/// train-versus-test value histograms drift past `kl_threshold` (the
/// 10:1:1 boundaries of the frame itself define the two periods).
pub fn filter_lots(frame: &SeriesFrame, max_missing: f64, kl_threshold: f64) -> Result<SeriesFrame> {
    let n = frame.n_lots();
    let (train_end, val_end) = split_boundaries(frame.n_steps(), (10, 1, 1));
    let mut keep = Vec::new();
    for lot in 0..n {
        if frame.missing_rate(lot) >= max_missing {
            continue;
        }
        let collect = |range: std::ops::Range<usize>| -> Vec<f64> {
            range
                .filter(|&t| frame.observed(t, lot))
                .map(|t| frame.value(t, lot))
                .collect()
        };
        let train_values = collect(0..train_end);
        let test_values = collect(val_end..frame.n_steps());
        if histogram_kl(&train_values, &test_values) > kl_threshold {
            continue;
        }
        keep.push(lot);
    }
    if keep.is_empty() {
        return Err(Error::Data(
            "filter_lots: every lot was filtered out".into(),
        ));
    }
    let n_steps = frame.n_steps();
    let mut values = Vec::with_capacity(n_steps * keep.len());
    let mut mask = Vec::with_capacity(n_steps * keep.len());
    for t in 0..n_steps {
        for &lot in &keep {
            values.push(frame.value(t, lot));
            mask.push(frame.observed(t, lot));
        }
    }
    Ok(SeriesFrame {
        timestamps: frame.timestamps.clone(),
        lot_ids: keep.iter().map(|&i| frame.lot_ids[i].clone()).collect(),
        values,
        mask,
        duplicates: frame.duplicates,
    })
}

/// Forward-fill per lot, then backward-fill leading gaps. The mask is
/// retained so imputed targets stay out of the loss.
pub fn impute_missing(frame: &SeriesFrame) -> SeriesFrame {
    let (n_steps, n_lots) = (frame.n_steps(), frame.n_lots());
    let mut values = frame.values.clone();
    for lot in 0..n_lots {
        let mut last: Option<f64> = None;
        for t in 0..n_steps {
            let idx = t * n_lots + lot;
            if frame.mask[idx] {
                last = Some(values[idx]);
            } else if let Some(v) = last {
                values[idx] = v;
            }
        }
        // leading gap: pull the first observation backwards
        if let Some(first_obs) = (0..n_steps).find(|&t| frame.mask[t * n_lots + lot]) {
            let v = values[first_obs * n_lots + lot];
            for t in 0..first_obs {
                values[t * n_lots + lot] = v;
            }
        }
    }
    SeriesFrame {
        timestamps: frame.timestamps.clone(),
        lot_ids: frame.lot_ids.clone(),
        values,
        mask: frame.mask.clone(),
        duplicates: frame.duplicates,
    }
}

// ── spatial feature construction ────────────────────────────────────

/// Deterministic 8-dim code for a categorical value, seeded from the
/// (table, category) pair so it is stable across runs and row order.
fn category_code(table: &str, category: &str) -> [f64; CATEGORY_CODE_DIM] {
    let mut h = Sha256::new();
    h.update(table.as_bytes());
    h.update([0x1f]);
    h.update(category.as_bytes());
    let digest = h.finalize();
    let mut out = [0.0; CATEGORY_CODE_DIM];
    for (i, slot) in out.iter_mut().enumerate() {
        let mut bytes = [0u8; 8];
        bytes.copy_from_slice(&digest[i * 4..i * 4 + 4].repeat(2));
        // map 64 uniform bits to roughly N(0,1) via a pair of uniforms
        let u = u64::from_le_bytes(bytes);
        let u1 = ((u >> 11) as f64 / (1u64 << 53) as f64).max(1e-12);
        let u2 = (u & 0x7ff) as f64 / 2048.0;
        *slot = (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos();
    }
    out
}

/// Builds the (n_lots, SPATIAL_FEATURE_DIM) matrix in frame lot order:
/// min-max scaled lat/lon/road density, then the two category codes.
pub fn spatial_features(lot_ids: &[String], lots: &[LotRecord]) -> Result<Vec<f64>> {
    let by_id: BTreeMap<&str, &LotRecord> =
        lots.iter().map(|l| (l.lot_id.as_str(), l)).collect();
    let mut selected = Vec::with_capacity(lot_ids.len());
    for id in lot_ids {
        let lot = by_id.get(id.as_str()).ok_or_else(|| {
            Error::Data(format!("lot {id} has readings but no static record"))
        })?;
        selected.push(*lot);
    }
    let min_max = |f: &dyn Fn(&LotRecord) -> f64| -> (f64, f64) {
        let lo = selected.iter().map(|l| f(l)).fold(f64::INFINITY, f64::min);
        let hi = selected
            .iter()
            .map(|l| f(l))
            .fold(f64::NEG_INFINITY, f64::max);
        (lo, if hi > lo { hi - lo } else { 1.0 })
    };
    let (lat0, lat_w) = min_max(&|l: &LotRecord| l.latitude);
    let (lon0, lon_w) = min_max(&|l: &LotRecord| l.longitude);
    let (rd0, rd_w) = min_max(&|l: &LotRecord| l.road_density);
    let mut out = Vec::with_capacity(lot_ids.len() * SPATIAL_FEATURE_DIM);
    for lot in selected {
        out.push((lot.latitude - lat0) / lat_w);
        out.push((lot.longitude - lon0) / lon_w);
        out.push((lot.road_density - rd0) / rd_w);
        out.extend(category_code("planning_area", &lot.planning_area));
        out.extend(category_code("land_use", &lot.land_use));
    }
    Ok(out)
}

// ── windowing ───────────────────────────────────────────────────────

/// Per-lot z-score statistics (train split only) plus weather statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub lot_ids: Vec<String>,
    pub lot_mean: Vec<f64>,
    pub lot_std: Vec<f64>,
    pub weather_mean: [f64; 3],
    pub weather_std: [f64; 3],
}

impl NormStats {
    pub fn denormalize(&self, lot: usize, v: f64) -> f64 {
        v * self.lot_std[lot] + self.lot_mean[lot]
    }

    pub fn normalize(&self, lot: usize, v: f64) -> f64 {
        (v - self.lot_mean[lot]) / self.lot_std[lot]
    }
}

/// Sliding windows of one chronological split. All windows stride 1 and
/// stay strictly inside the split; targets immediately follow inputs.
#[derive(Debug, Clone)]
pub struct WindowedSplit {
    pub n_windows: usize,
    pub history: usize,
    pub horizon: usize,
    pub n_lots: usize,
    /// (n_windows, history, n_lots), z-scored.
    pub x: Vec<f64>,
    /// (n_windows, history, TEMPORAL_FEATURE_DIM).
    pub f_t: Vec<f64>,
    /// (n_windows, horizon, n_lots), z-scored.
    pub y: Vec<f64>,
    /// (n_windows, horizon, n_lots); 1.0 where the target was observed.
    pub y_mask: Vec<f64>,
    /// Global step index of each window's first input row.
    pub window_starts: Vec<usize>,
}

impl WindowedSplit {
    pub fn x_window(&self, i: usize) -> &[f64] {
        let sz = self.history * self.n_lots;
        &self.x[i * sz..(i + 1) * sz]
    }

    pub fn ft_window(&self, i: usize) -> &[f64] {
        let sz = self.history * TEMPORAL_FEATURE_DIM;
        &self.f_t[i * sz..(i + 1) * sz]
    }

    pub fn y_window(&self, i: usize) -> &[f64] {
        let sz = self.horizon * self.n_lots;
        &self.y[i * sz..(i + 1) * sz]
    }

    pub fn y_mask_window(&self, i: usize) -> &[f64] {
        let sz = self.horizon * self.n_lots;
        &self.y_mask[i * sz..(i + 1) * sz]
    }
}

/// Everything the trainer and baselines need, assembled once.
#[derive(Debug, Clone)]
pub struct DatasetBundle {
    pub lot_ids: Vec<String>,
    pub timestamps: Vec<i64>,
    /// Imputed, de-normalized series (for the classical baselines).
    pub series: Vec<f64>,
    pub series_mask: Vec<bool>,
    pub stats: NormStats,
    /// (n_lots, SPATIAL_FEATURE_DIM).
    pub f_s: Vec<f64>,
    pub history: usize,
    pub horizon: usize,
    pub train: WindowedSplit,
    pub val: WindowedSplit,
    pub test: WindowedSplit,
    /// (train_end, val_end) step indices.
    pub boundaries: (usize, usize),
    pub temporal: TemporalFeatureFrame,
}

/// Chronological 10:1:1 split (configurable ratios), train-only z-score
/// statistics applied to all splits, windows built within each split.
pub fn split_and_window(
    frame: &SeriesFrame,
    temporal: &TemporalFeatureFrame,
    lots: &[LotRecord],
    history: usize,
    horizon: usize,
    ratios: (usize, usize, usize),
) -> Result<DatasetBundle> {
    frame.validate()?;
    if temporal.timestamps != frame.timestamps {
        return Err(Error::Data(
            "temporal features not aligned with the PA frame".into(),
        ));
    }
    let n_steps = frame.n_steps();
    let n_lots = frame.n_lots();
    let (train_end, val_end) = split_boundaries(n_steps, ratios);

    // per-lot stats from observed training rows only
    let mut lot_mean = vec![0.0; n_lots];
    let mut lot_std = vec![0.0; n_lots];
    for lot in 0..n_lots {
        let obs: Vec<f64> = (0..train_end)
            .filter(|&t| frame.observed(t, lot))
            .map(|t| frame.value(t, lot))
            .collect();
        if obs.is_empty() {
            return Err(Error::Data(format!(
                "lot {} has no observed training rows",
                frame.lot_ids[lot]
            )));
        }
        let mean = obs.iter().sum::<f64>() / obs.len() as f64;
        let var = obs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / obs.len() as f64;
        lot_mean[lot] = mean;
        lot_std[lot] = if var.sqrt() > 1e-8 { var.sqrt() } else { 1.0 };
    }
    let wstat = |xs: &[f64]| -> (f64, f64) {
        let xs = &xs[..train_end.max(1).min(xs.len())];
        let mean = xs.iter().sum::<f64>() / xs.len() as f64;
        let var = xs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / xs.len() as f64;
        (mean, if var.sqrt() > 1e-8 { var.sqrt() } else { 1.0 })
    };
    let (tm, ts) = wstat(&temporal.temperature);
    let (hm, hs) = wstat(&temporal.humidity);
    let (wm, ws) = wstat(&temporal.wind_speed);
    let stats = NormStats {
        lot_ids: frame.lot_ids.clone(),
        lot_mean,
        lot_std,
        weather_mean: [tm, hm, wm],
        weather_std: [ts, hs, ws],
    };

    let features = temporal.feature_matrix(&stats);
    let f_s = spatial_features(&frame.lot_ids, lots)?;

    let build = |lo: usize, hi: usize, name: &str| -> Result<WindowedSplit> {
        let span = hi.saturating_sub(lo);
        if span < history + horizon {
            return Err(Error::Data(format!(
                "{name} split has {span} steps, too short for one {history}+{horizon} window"
            )));
        }
        let n_windows = span - history - horizon + 1;
        let mut x = Vec::with_capacity(n_windows * history * n_lots);
        let mut f_t = Vec::with_capacity(n_windows * history * TEMPORAL_FEATURE_DIM);
        let mut y = Vec::with_capacity(n_windows * horizon * n_lots);
        let mut y_mask = Vec::with_capacity(n_windows * horizon * n_lots);
        let mut window_starts = Vec::with_capacity(n_windows);
        for w in 0..n_windows {
            let start = lo + w;
            window_starts.push(start);
            for t in start..start + history {
                for lot in 0..n_lots {
                    x.push(stats.normalize(lot, frame.value(t, lot)));
                }
                f_t.extend_from_slice(
                    &features[t * TEMPORAL_FEATURE_DIM..(t + 1) * TEMPORAL_FEATURE_DIM],
                );
            }
            for t in start + history..start + history + horizon {
                for lot in 0..n_lots {
                    y.push(stats.normalize(lot, frame.value(t, lot)));
                    y_mask.push(f64::from(frame.observed(t, lot)));
                }
            }
        }
        Ok(WindowedSplit {
            n_windows,
            history,
            horizon,
            n_lots,
            x,
            f_t,
            y,
            y_mask,
            window_starts,
        })
    };

    let train = build(0, train_end, "train")?;
    let val = build(train_end, val_end, "validation")?;
    let test = build(val_end, n_steps, "test")?;
    Ok(DatasetBundle {
        lot_ids: frame.lot_ids.clone(),
        timestamps: frame.timestamps.clone(),
        series: frame.values.clone(),
        series_mask: frame.mask.clone(),
        stats,
        f_s,
        history,
        horizon,
        train,
        val,
        test,
        boundaries: (train_end, val_end),
        temporal: temporal.clone(),
    })
}

/// Filter, impute, and window in one step; the standard preprocessing path.
pub fn prepare_bundle(
    frame: &SeriesFrame,
    weather: &WeatherFrame,
    lots: &[LotRecord],
    max_missing: f64,
    kl_threshold: f64,
    history: usize,
    horizon: usize,
) -> Result<DatasetBundle> {
    let filtered = filter_lots(frame, max_missing, kl_threshold)?;
    let imputed = impute_missing(&filtered);
    let temporal = TemporalFeatureFrame::build(&imputed.timestamps, weather)?;
    split_and_window(&imputed, &temporal, lots, history, horizon, (10, 1, 1))
}

/// Split manifest: boundary indices, window counts, normalization stats.
pub fn split_manifest(bundle: &DatasetBundle) -> serde_json::Value {
    serde_json::json!({
        "n_steps": bundle.timestamps.len(),
        "n_lots": bundle.lot_ids.len(),
        "boundaries": { "train_end": bundle.boundaries.0, "val_end": bundle.boundaries.1 },
        "windows": {
            "train": bundle.train.n_windows,
            "val": bundle.val.n_windows,
            "test": bundle.test.n_windows,
        },
        "history": bundle.history,
        "horizon": bundle.horizon,
        "normalization": bundle.stats,
    })
}

// ── CSV writing (synth output and fixtures) ─────────────────────────

fn format_ts(ts: i64) -> String {
    DateTime::from_timestamp(ts, 0)
        .expect("valid timestamp")
        .to_rfc3339()
}

/// Writes the three-file dataset layout used by every CLI command.
pub fn write_csvs(
    dir: impl AsRef<std::path::Path>,
    frame: &SeriesFrame,
    temporal: &TemporalFeatureFrame,
    lots: &[LotRecord],
) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;

    let mut pa = csv::Writer::from_path(dir.join("pa.csv"))?;
    pa.write_record(["timestamp", "lot_id", "available"])?;
    for (t, &ts) in frame.timestamps.iter().enumerate() {
        for (lot, id) in frame.lot_ids.iter().enumerate() {
            if frame.observed(t, lot) {
                pa.write_record([
                    format_ts(ts).as_str(),
                    id.as_str(),
                    format!("{}", frame.value(t, lot)).as_str(),
                ])?;
            }
        }
    }
    pa.flush()?;

    let mut weather = csv::Writer::from_path(dir.join("weather.csv"))?;
    weather.write_record(["timestamp", "temperature", "humidity", "wind_speed"])?;
    for (i, &ts) in temporal.timestamps.iter().enumerate() {
        weather.write_record([
            format_ts(ts).as_str(),
            format!("{}", temporal.temperature[i]).as_str(),
            format!("{}", temporal.humidity[i]).as_str(),
            format!("{}", temporal.wind_speed[i]).as_str(),
        ])?;
    }
    weather.flush()?;

    let mut lots_csv = csv::Writer::from_path(dir.join("lots.csv"))?;
    lots_csv.write_record([
        "lot_id",
        "lat",
        "lon",
        "planning_area",
        "land_use",
        "road_density",
    ])?;
    for lot in lots {
        lots_csv.write_record([
            lot.lot_id.as_str(),
            format!("{}", lot.latitude).as_str(),
            format!("{}", lot.longitude).as_str(),
            lot.planning_area.as_str(),
            lot.land_use.as_str(),
            format!("{}", lot.road_density).as_str(),
        ])?;
    }
    lots_csv.flush()?;
    Ok(())
}

/// Reads a dataset directory written by [`write_csvs`].
pub fn load_dataset_dir(
    dir: impl AsRef<std::path::Path>,
) -> Result<(SeriesFrame, WeatherFrame, Vec<LotRecord>)> {
    let dir = dir.as_ref();
    let frame = load_pa_csv(dir.join("pa.csv"))?;
    let weather = load_weather_csv(dir.join("weather.csv"))?;
    let lots = load_lots_csv(dir.join("lots.csv"))?;
    Ok((frame, weather, lots))
}
