//! Consecutive successes, cycle time and success rate over a bin-packing log.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::scheduler::TraceRecord;

/// One grasp attempt. `start` is PolicyActive entry; `end` is ReturnHome
/// completion for transports, or the moment the attempt was abandoned.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttemptRecord {
    pub index: u64,
    pub success: bool,
    pub start: f64,
    pub end: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub cs_streaks: Vec<u32>,
    pub cycle_times: Vec<f64>,
    pub successes: u32,
    pub attempts: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsSummary {
    pub cs_mean: f64,
    pub cs_std: f64,
    pub ct_mean: f64,
    pub ct_std: f64,
    pub sr: f64,
}

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("attempt log is empty")]
    EmptyLog,
    #[error("attempt record {tick}: {message}")]
    BadRecord { tick: u64, message: String },
}

/// Mean and population standard deviation; zeros for an empty sample.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

impl Metrics {
    pub fn from_outcomes(log: &[AttemptRecord]) -> Result<Metrics, MetricsError> {
        if log.is_empty() {
            return Err(MetricsError::EmptyLog);
        }
        let mut streaks = Vec::new();
        let mut run = 0;
        for a in log {
            if a.success {
                run += 1;
            } else if run > 0 {
                streaks.push(run);
                run = 0;
            }
        }
        if run > 0 {
            streaks.push(run);
        }
        let cycle_times: Vec<f64> = log.iter().filter(|a| a.success).map(|a| a.end - a.start).collect();
        Ok(Metrics {
            cs_streaks: streaks,
            successes: cycle_times.len() as u32,
            cycle_times,
            attempts: log.len() as u32,
        })
    }

    pub fn summary(&self) -> MetricsSummary {
        let streaks: Vec<f64> = self.cs_streaks.iter().map(|&s| s as f64).collect();
        let (cs_mean, cs_std) = mean_std(&streaks);
        let (ct_mean, ct_std) = mean_std(&self.cycle_times);
        MetricsSummary { cs_mean, cs_std, ct_mean, ct_std, sr: self.successes as f64 / self.attempts as f64 }
    }
}

/// Metrics over attempts in log order.
pub fn metrics_from_log(log: &[AttemptRecord]) -> Result<(Metrics, MetricsSummary), MetricsError> {
    let m = Metrics::from_outcomes(log)?;
    let s = m.summary();
    Ok((m, s))
}

pub const ATTEMPT_KIND: &str = "attempt";

/// Collects `attempt` records from a trace, orders them by attempt index and
/// computes metrics. Record order within the trace does not matter.
pub fn metrics_from_trace(trace: &[TraceRecord]) -> Result<(Metrics, MetricsSummary), MetricsError> {
    let mut log = trace
        .iter()
        .filter(|r| r.kind == ATTEMPT_KIND)
        .map(|r| {
            serde_json::from_value::<AttemptRecord>(r.payload.clone())
                .map_err(|e| MetricsError::BadRecord { tick: r.tick, message: e.to_string() })
        })
        .collect::<Result<Vec<_>, _>>()?;
    log.sort_by_key(|a| a.index);
    metrics_from_log(&log)
}
