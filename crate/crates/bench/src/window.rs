//! Fixed-width time windows over per-shot squared errors.
//!
//! Each run is cut into `floor(horizon / w)` windows `[iw, (i+1)w)`; the
//! trailing partial window is dropped. A window with no shots of its own
//! carries the most recent squared error forward, because that estimate is
//! still the current one.

use nvsense::protocols::EstimationRun;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Averaging {
    /// Mean within each run first, then across runs.
    PerRun,
    /// One mean over every sample from every run.
    Pooled,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WindowOptions {
    pub window_us: f64,
    /// Leading shots of each run that are ignored.
    pub skip_shots: usize,
    pub averaging: Averaging,
}

/// Squared errors of one run against elapsed time.
#[derive(Debug, Clone, PartialEq)]
pub struct ErrorTrace {
    pub horizon: f64,
    /// `(elapsed_us, squared_error)`, elapsed non-decreasing.
    pub points: Vec<(f64, f64)>,
}

impl ErrorTrace {
    pub fn from_run(run: &EstimationRun, skip_shots: usize) -> Self {
        Self {
            horizon: run.budget,
            points: run.squared_errors().skip(skip_shots).collect(),
        }
    }
}

/// Number of complete windows before `horizon`.
pub fn window_count(horizon: f64, window_us: f64) -> usize {
    // Tolerate representation error when the horizon is a whole multiple.
    (horizon / window_us * (1.0 + 1e-12)).floor() as usize
}

/// Per-window samples of one trace: `(sum, count)`, `None` before its first shot.
fn window_samples(trace: &ErrorTrace, window_us: f64) -> Vec<Option<(f64, usize)>> {
    let n = window_count(trace.horizon, window_us);
    let mut sums = vec![(0.0, 0usize); n];
    for &(t, e) in &trace.points {
        let i = (t / window_us).floor() as usize;
        if i < n {
            sums[i].0 += e;
            sums[i].1 += 1;
        }
    }
    let mut out = Vec::with_capacity(n);
    let mut last: Option<f64> = None;
    let mut cursor = 0;
    for (i, (sum, count)) in sums.into_iter().enumerate() {
        let end = (i + 1) as f64 * window_us;
        while cursor < trace.points.len() && trace.points[cursor].0 < end {
            last = Some(trace.points[cursor].1);
            cursor += 1;
        }
        out.push(if count > 0 {
            Some((sum, count))
        } else {
            last.map(|e| (e, 1))
        });
    }
    out
}

/// Window means of one trace.
pub fn run_windows(trace: &ErrorTrace, window_us: f64) -> Vec<Option<f64>> {
    window_samples(trace, window_us)
        .into_iter()
        .map(|s| s.map(|(sum, count)| sum / count as f64))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowedCurve {
    pub window_us: f64,
    pub centers: Vec<f64>,
    pub mean_mse: Vec<f64>,
    /// Runs contributing to each window.
    pub counts: Vec<usize>,
}

impl WindowedCurve {
    pub fn len(&self) -> usize {
        self.centers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centers.is_empty()
    }
}

/// Averages windowed squared errors across traces.
///
/// Leading windows where no trace has data yet are omitted, so the curve is
/// a consecutive run of windows.
pub fn window_mse(traces: &[ErrorTrace], window_us: f64, averaging: Averaging) -> WindowedCurve {
    let per_trace: Vec<_> = traces.iter().map(|t| window_samples(t, window_us)).collect();
    let n = per_trace.iter().map(Vec::len).max().unwrap_or(0);
    let mut curve = WindowedCurve {
        window_us,
        centers: Vec::new(),
        mean_mse: Vec::new(),
        counts: Vec::new(),
    };
    for i in 0..n {
        let mut runs = 0usize;
        let mut acc = 0.0;
        let mut samples = 0usize;
        for s in per_trace.iter().filter_map(|w| w.get(i).copied().flatten()) {
            runs += 1;
            match averaging {
                Averaging::PerRun => acc += s.0 / s.1 as f64,
                Averaging::Pooled => {
                    acc += s.0;
                    samples += s.1;
                }
            }
        }
        if runs == 0 {
            if curve.is_empty() {
                continue;
            }
            break;
        }
        curve.centers.push((i as f64 + 0.5) * window_us);
        curve.mean_mse.push(match averaging {
            Averaging::PerRun => acc / runs as f64,
            Averaging::Pooled => acc / samples as f64,
        });
        curve.counts.push(runs);
    }
    curve
}

/// Mean squared error in the last complete window of a run.
pub fn terminal_window_mse(trace: &ErrorTrace, window_us: f64) -> Option<f64> {
    run_windows(trace, window_us).last().copied().flatten()
}
