//! Moving-average exposure metric and scenario summaries.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::sim::{Mode, SimLog};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("series of {len} samples is shorter than the {window}-sample window")]
    SeriesTooShort { len: usize, window: usize },
    #[error("invalid moving-average configuration: {0}")]
    InvalidConfig(String),
    #[error("evaluation window [{0}, {1}] s has no samples with a full averaging window")]
    EmptyWindow(f64, f64),
}

/// Exposure window and evaluation interval of the moving-average metric.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaConfig {
    pub window_s: f64,
    pub dt: f64,
    /// Evaluation interval `[t1, t2]`, normally the cruise window.
    pub eval: (f64, f64),
}

impl MaConfig {
    pub const EXPOSURE_TIME_S: f64 = 0.0144;

    pub fn new(dt: f64, eval: (f64, f64)) -> Self {
        Self { window_s: Self::EXPOSURE_TIME_S, dt, eval }
    }

    /// Metric configuration matching a log's sample period and cruise window.
    pub fn for_log(log: &SimLog) -> Self {
        Self::new(log.header.dt, log.header.cruise_window)
    }

    /// Odd number of samples spanning the exposure window.
    pub fn window_samples(&self) -> Result<usize, MetricsError> {
        if !(self.dt > 0.0 && self.window_s > self.dt) {
            return Err(MetricsError::InvalidConfig(format!(
                "window {} s must exceed the sample period {} s",
                self.window_s, self.dt
            )));
        }
        let n = (self.window_s / self.dt).round() as usize;
        Ok(if n % 2 == 0 { n + 1 } else { n })
    }
}

/// Centered moving average; `values[i]` is centered on input sample
/// `offset + i`.
#[derive(Debug, Clone, PartialEq)]
pub struct MaTrace {
    pub offset: usize,
    pub values: Vec<f64>,
}

/// Centered moving average over an odd window of `window` samples. Output is
/// produced only where the full window fits.
pub fn ma_filter(e: &[f64], window: usize) -> Result<MaTrace, MetricsError> {
    if window == 0 || window % 2 == 0 {
        return Err(MetricsError::InvalidConfig(format!("window must be odd, got {window}")));
    }
    if e.len() < window {
        return Err(MetricsError::SeriesTooShort { len: e.len(), window });
    }
    let inv = 1.0 / window as f64;
    let values = e.windows(window).map(|w| w.iter().sum::<f64>() * inv).collect();
    Ok(MaTrace { offset: window / 2, values })
}

/// `max |MA(t)|` over the evaluation window for one axis of a log.
pub fn peak_ma_error(log: &SimLog, axis: usize, cfg: &MaConfig) -> Result<f64, MetricsError> {
    let e: Vec<f64> = log.records.iter().map(|r| r.e_pos[axis]).collect();
    peak_ma_of_series(&e, cfg)
}

/// Same as [`peak_ma_error`] for a raw series sampled at `cfg.dt` from t = 0.
pub fn peak_ma_of_series(e: &[f64], cfg: &MaConfig) -> Result<f64, MetricsError> {
    let trace = ma_filter(e, cfg.window_samples()?)?;
    let mut peak: Option<f64> = None;
    for (i, v) in trace.values.iter().enumerate() {
        let t = (trace.offset + i) as f64 * cfg.dt;
        if t >= cfg.eval.0 - 1e-12 && t <= cfg.eval.1 + 1e-12 {
            peak = Some(peak.unwrap_or(0.0).max(v.abs()));
        }
    }
    peak.ok_or(MetricsError::EmptyWindow(cfg.eval.0, cfg.eval.1))
}

/// Root-mean-square of the raw error inside the evaluation window.
pub fn rms_in_window(log: &SimLog, axis: usize, eval: (f64, f64)) -> f64 {
    let (sum, n) = log
        .records
        .iter()
        .filter(|r| r.t >= eval.0 && r.t <= eval.1)
        .fold((0.0, 0usize), |(s, n), r| (s + r.e_pos[axis] * r.e_pos[axis], n + 1));
    if n == 0 {
        0.0
    } else {
        (sum / n as f64).sqrt()
    }
}

/// One row of the scenario comparison report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSummary {
    pub mode: Mode,
    pub source: String,
    pub peak_ma_m: f64,
    pub rms_error_m: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reduction_vs_baseline_pct: Option<f64>,
}

/// Summarizes logs on the scan axis. Reductions are reported relative to the
/// first baseline log, and only when more than one log is given.
pub fn summarize(logs: &[(String, SimLog)]) -> Result<Vec<ScenarioSummary>, MetricsError> {
    let mut rows = Vec::with_capacity(logs.len());
    for (source, log) in logs {
        let axis = log.header.scan_axis.index();
        let cfg = MaConfig::for_log(log);
        rows.push(ScenarioSummary {
            mode: log.header.mode,
            source: source.clone(),
            peak_ma_m: peak_ma_error(log, axis, &cfg)?,
            rms_error_m: rms_in_window(log, axis, cfg.eval),
            reduction_vs_baseline_pct: None,
        });
    }
    if rows.len() > 1 {
        if let Some(base) = rows.iter().find(|r| r.mode == Mode::Baseline).map(|r| r.peak_ma_m) {
            if base > 0.0 {
                for r in &mut rows {
                    r.reduction_vs_baseline_pct = Some(100.0 * (1.0 - r.peak_ma_m / base));
                }
            }
        }
    }
    Ok(rows)
}
