//! Classical baselines: historical average and vector autoregression.

use std::collections::HashMap;

use crate::data::{DatasetBundle, WindowedSplit};
use crate::error::{Error, Result};

/// Historical average keyed by (lot, time-of-day slot, day-of-week), with
/// (lot, slot) and lot-wide fallbacks for unseen keys. Fit on observed
/// training rows only; predictions are on the raw scale.
#[derive(Debug, Clone)]
pub struct HaBaseline {
    n_lots: usize,
    by_slot_day: HashMap<(usize, u32, u32), f64>,
    by_slot: HashMap<(usize, u32), f64>,
    by_lot: Vec<f64>,
}

impl HaBaseline {
    /// Fits on the training portion of the bundle (steps before the first
    /// split boundary).
    pub fn fit(bundle: &DatasetBundle) -> Result<HaBaseline> {
        let n_lots = bundle.lot_ids.len();
        let train_end = bundle.boundaries.0;
        let mut sums: HashMap<(usize, u32, u32), (f64, f64)> = HashMap::new();
        let mut slot_sums: HashMap<(usize, u32), (f64, f64)> = HashMap::new();
        let mut lot_sums = vec![(0.0, 0.0); n_lots];
        for t in 0..train_end {
            let slot = bundle.temporal.slots[t];
            let day = bundle.temporal.days[t];
            for lot in 0..n_lots {
                if !bundle.series_mask[t * n_lots + lot] {
                    continue;
                }
                let v = bundle.series[t * n_lots + lot];
                let e = sums.entry((lot, slot, day)).or_insert((0.0, 0.0));
                e.0 += v;
                e.1 += 1.0;
                let s = slot_sums.entry((lot, slot)).or_insert((0.0, 0.0));
                s.0 += v;
                s.1 += 1.0;
                lot_sums[lot].0 += v;
                lot_sums[lot].1 += 1.0;
            }
        }
        if lot_sums.iter().any(|&(_, c)| c == 0.0) {
            return Err(Error::Data(
                "historical average: a lot has zero observations".into(),
            ));
        }
        Ok(HaBaseline {
            n_lots,
            by_slot_day: sums.into_iter().map(|(k, (s, c))| (k, s / c)).collect(),
            by_slot: slot_sums.into_iter().map(|(k, (s, c))| (k, s / c)).collect(),
            by_lot: lot_sums.iter().map(|&(s, c)| s / c).collect(),
        })
    }

    /// Mean for a key, walking the fallback chain.
    pub fn predict_key(&self, lot: usize, slot: u32, day: u32) -> f64 {
        if let Some(&v) = self.by_slot_day.get(&(lot, slot, day)) {
            return v;
        }
        if let Some(&v) = self.by_slot.get(&(lot, slot)) {
            return v;
        }
        self.by_lot[lot]
    }

    /// Predictions for every window of a split, shaped (n, horizon, lots).
    pub fn predict_windows(&self, bundle: &DatasetBundle, split: &WindowedSplit) -> Vec<f64> {
        let mut out = Vec::with_capacity(split.n_windows * split.horizon * self.n_lots);
        for w in 0..split.n_windows {
            let start = split.window_starts[w];
            for step in 0..split.horizon {
                let t = start + split.history + step;
                let slot = bundle.temporal.slots[t];
                let day = bundle.temporal.days[t];
                for lot in 0..self.n_lots {
                    out.push(self.predict_key(lot, slot, day));
                }
            }
        }
        out
    }
}

/// VAR(p) fit by ridge-regularized least squares:
/// `x_t = c + sum_i A_i x_{t-i}`, forecast by iteration.
#[derive(Debug, Clone)]
pub struct VarBaseline {
    pub n_series: usize,
    pub lag: usize,
    /// (1 + n*p) x n coefficient matrix, intercept row first.
    pub coeffs: Vec<f64>,
}

/// Fitting guard:的 design dimension n*p must stay tractable.
const MAX_DESIGN: usize = 2000;

impl VarBaseline {
    /// Fits on a (steps, n) series slice; `ridge` conditions the normal
    /// equations (1e-6 by default at call sites).
    pub fn fit(series: &[f64], n_series: usize, lag: usize, ridge: f64) -> Result<VarBaseline> {
        if lag == 0 || n_series == 0 {
            return Err(Error::invalid("var: lag and series count must be >= 1"));
        }
        if n_series * lag > MAX_DESIGN {
            return Err(Error::invalid(format!(
                "var: n*p = {} exceeds the {MAX_DESIGN} guard",
                n_series * lag
            )));
        }
        let steps = series.len() / n_series;
        if series.len() % n_series != 0 || steps <= lag + 1 {
            return Err(Error::invalid("var: series too short for the lag order"));
        }
        let rows = steps - lag;
        let d = 1 + n_series * lag;

        // design matrix Z (rows x d): [1, x_{t-1}, ..., x_{t-p}]
        let mut z = vec![0.0; rows * d];
        let mut y = vec![0.0; rows * n_series];
        for r in 0..rows {
            let t = r + lag;
            z[r * d] = 1.0;
            for l in 0..lag {
                let src = (t - 1 - l) * n_series;
                let dst = r * d + 1 + l * n_series;
                z[dst..dst + n_series].copy_from_slice(&series[src..src + n_series]);
            }
            y[r * n_series..(r + 1) * n_series]
                .copy_from_slice(&series[t * n_series..(t + 1) * n_series]);
        }

        // normal equations G = Z^T Z + ridge*I, rhs = Z^T Y
        let mut g = vec![0.0; d * d];
        crate::tensor::shape::gemm(d, rows, d, 1.0, &z, 1, d, &z, d, 1, 0.0, &mut g, d, 1);
        for i in 0..d {
            g[i * d + i] += ridge;
        }
        let mut rhs = vec![0.0; d * n_series];
        crate::tensor::shape::gemm(
            d, rows, n_series, 1.0, &z, 1, d, &y, n_series, 1, 0.0, &mut rhs, n_series, 1,
        );

        let coeffs = solve_cholesky(&mut g, &mut rhs, d, n_series)?;
        Ok(VarBaseline {
            n_series,
            lag,
            coeffs,
        })
    }

    /// One-step prediction from the last `lag` rows of `history`.
    fn step(&self, history: &[Vec<f64>]) -> Vec<f64> {
        let n = self.n_series;
        let d = 1 + n * self.lag;
        let mut out = vec![0.0; n];
        for j in 0..n {
            out[j] = self.coeffs[j]; // intercept row
        }
        for l in 0..self.lag {
            let row = &history[history.len() - 1 - l];
            for i in 0..n {
                let coeff_row = 1 + l * n + i;
                debug_assert!(coeff_row < d);
                let base = coeff_row * n;
                for j in 0..n {
                    out[j] += row[i] * self.coeffs[base + j];
                }
            }
        }
        out
    }

    /// Iterated multi-step forecast from the last `lag` observed rows.
    pub fn forecast(&self, recent: &[f64], horizon: usize) -> Result<Vec<f64>> {
        let n = self.n_series;
        let steps = recent.len() / n;
        if recent.len() % n != 0 || steps < self.lag {
            return Err(Error::invalid(format!(
                "var forecast: need at least {} rows of history",
                self.lag
            )));
        }
        let mut rows: Vec<Vec<f64>> = (steps - self.lag..steps)
            .map(|t| recent[t * n..(t + 1) * n].to_vec())
            .collect();
        let mut out = Vec::with_capacity(horizon * n);
        for _ in 0..horizon {
            let next = self.step(&rows);
            out.extend_from_slice(&next);
            rows.push(next);
            rows.remove(0);
        }
        Ok(out)
    }

    /// Predictions for every window of a split using the window's own
    /// (de-normalized) input steps, shaped (n, horizon, lots).
    pub fn predict_windows(
        &self,
        bundle: &DatasetBundle,
        split: &WindowedSplit,
    ) -> Result<Vec<f64>> {
        let n = self.n_series;
        let mut out = Vec::with_capacity(split.n_windows * split.horizon * n);
        for w in 0..split.n_windows {
            let start = split.window_starts[w];
            let recent = &bundle.series[start * n..(start + split.history) * n];
            out.extend(self.forecast(recent, split.horizon)?);
        }
        Ok(out)
    }
}

/// Solves G X = B for SPD G via Cholesky; B is (d x m), overwritten.
fn solve_cholesky(g: &mut [f64], b: &mut [f64], d: usize, m: usize) -> Result<Vec<f64>> {
    // factor G = L L^T in place (lower triangle)
    for i in 0..d {
        for j in 0..=i {
            let mut s = g[i * d + j];
            for k in 0..j {
                s -= g[i * d + k] * g[j * d + k];
            }
            if i == j {
                if s <= 0.0 {
                    return Err(Error::Data(
                        "var: normal equations not positive definite (rank deficiency beyond the ridge)"
                            .into(),
                    ));
                }
                g[i * d + i] = s.sqrt();
            } else {
                g[i * d + j] = s / g[j * d + j];
            }
        }
    }
    // forward substitution L Z = B
    for col in 0..m {
        for i in 0..d {
            let mut s = b[i * m + col];
            for k in 0..i {
                s -= g[i * d + k] * b[k * m + col];
            }
            b[i * m + col] = s / g[i * d + i];
        }
        // back substitution L^T X = Z
        for i in (0..d).rev() {
            let mut s = b[i * m + col];
            for k in i + 1..d {
                s -= g[k * d + i] * b[k * m + col];
            }
            b[i * m + col] = s / g[i * d + i];
        }
    }
    Ok(b.to_vec())
}
