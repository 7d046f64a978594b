//! Tandem automatic domain randomization.
//!
//! Every parameter interpolates linearly from its initial to its terminal
//! setting on one shared counter `n ∈ [0, n_total]`, so no row can lag behind
//! another. Ranges are always recomputed from the endpoints (never by adding
//! increments), which makes `n = n_total` land on the terminal values exactly.

use std::collections::{BTreeMap, VecDeque};
use std::fmt::Write as _;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;
use thiserror::Error;

use crate::config::{parse_toml, ConfigError};

#[derive(Debug, Error, PartialEq)]
pub enum AdrError {
    #[error("unknown ADR parameter `{0}`")]
    UnknownParameter(String),
    #[error("ADR parameter `{0}` is a uniform range, not a scalar schedule")]
    NotScalar(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AdrKind {
    Uniform,
    Scalar,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdrParameter {
    pub name: String,
    /// Human-readable row title.
    pub label: String,
    pub kind: AdrKind,
    /// `(lo, hi)`; scalar schedules store the value twice.
    pub initial: (f64, f64),
    pub terminal: (f64, f64),
}

impl AdrParameter {
    fn validate(&self) -> Result<(), ConfigError> {
        let field = format!("parameters.{}", self.name);
        let (il, ih) = self.initial;
        let (tl, th) = self.terminal;
        if ![il, ih, tl, th].iter().all(|v| v.is_finite()) {
            return Err(ConfigError::invalid(field, "non-finite endpoint"));
        }
        match self.kind {
            AdrKind::Uniform => {
                if il > ih || tl > th {
                    return Err(ConfigError::invalid(field, "range has lo > hi"));
                }
                if tl > il || th < ih {
                    return Err(ConfigError::invalid(field, "initial range must lie inside the terminal range"));
                }
            }
            AdrKind::Scalar => {
                if il == tl {
                    return Err(ConfigError::invalid(field, "scalar schedule endpoints must differ"));
                }
            }
        }
        Ok(())
    }

    /// Range at curriculum fraction `n / n_total`.
    fn range_at(&self, n: u32, n_total: u32) -> (f64, f64) {
        if n >= n_total {
            return self.terminal;
        }
        let f = n as f64 / n_total as f64;
        let lerp = |a: f64, b: f64| a + f * (b - a);
        (lerp(self.initial.0, self.terminal.0), lerp(self.initial.1, self.terminal.1))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdrGate {
    /// Mean episode success over the trailing window needed to advance.
    pub threshold: f64,
    pub window: usize,
}

impl Default for AdrGate {
    fn default() -> Self {
        AdrGate {
            threshold: 0.7,
            window: 64,
        }
    }
}

/// Curriculum position plus the immutable schedule it indexes.
#[derive(Debug, Clone, PartialEq)]
pub struct AdrState {
    pub n: u32,
    pub n_total: u32,
    params: Arc<Vec<AdrParameter>>,
}

/// Parsed schedule file.
#[derive(Debug, Clone, PartialEq)]
pub struct AdrSchedule {
    pub state: AdrState,
    pub gate: AdrGate,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScheduleFile {
    n_total: u32,
    #[serde(default)]
    gate: Option<AdrGate>,
    parameters: Vec<ParameterEntry>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ParameterEntry {
    name: String,
    label: Option<String>,
    kind: AdrKind,
    initial: Endpoint,
    terminal: Endpoint,
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum Endpoint {
    Value(f64),
    Range([f64; 2]),
}

impl AdrSchedule {
    pub fn from_text(text: &str) -> Result<AdrSchedule, ConfigError> {
        let file: ScheduleFile = parse_toml(text)?;
        if file.n_total == 0 {
            return Err(ConfigError::invalid("n_total", "must be at least 1"));
        }
        let gate = file.gate.unwrap_or_default();
        if gate.window == 0 {
            return Err(ConfigError::invalid("gate.window", "must be at least 1"));
        }
        if !(0.0..=1.0).contains(&gate.threshold) {
            return Err(ConfigError::invalid("gate.threshold", "must lie in [0, 1]"));
        }
        let mut params = Vec::with_capacity(file.parameters.len());
        for entry in file.parameters {
            let field = format!("parameters.{}", entry.name);
            let pair = |e: Endpoint| -> Result<(f64, f64), ConfigError> {
                match (entry.kind, e) {
                    (AdrKind::Uniform, Endpoint::Range([lo, hi])) => Ok((lo, hi)),
                    (AdrKind::Scalar, Endpoint::Value(v)) => Ok((v, v)),
                    (AdrKind::Uniform, Endpoint::Value(_)) => {
                        Err(ConfigError::invalid(field.clone(), "uniform rows need [lo, hi] endpoints"))
                    }
                    (AdrKind::Scalar, Endpoint::Range(_)) => {
                        Err(ConfigError::invalid(field.clone(), "scalar rows need single-value endpoints"))
                    }
                }
            };
            let param = AdrParameter {
                label: entry.label.clone().unwrap_or_else(|| entry.name.clone()),
                kind: entry.kind,
                initial: pair(entry.initial)?,
                terminal: pair(entry.terminal)?,
                name: entry.name,
            };
            param.validate()?;
            if params.iter().any(|p: &AdrParameter| p.name == param.name) {
                return Err(ConfigError::invalid(field, "duplicate parameter"));
            }
            params.push(param);
        }
        Ok(AdrSchedule {
            state: AdrState {
                n: 0,
                n_total: file.n_total,
                params: Arc::new(params),
            },
            gate,
        })
    }

    /// The shipped schedule: every row of the physics randomization table.
    pub fn reference() -> AdrSchedule {
        AdrSchedule::from_text(include_str!("../data/adr_schedule.toml")).expect("shipped ADR schedule is valid")
    }
}

impl AdrState {
    pub fn params(&self) -> &[AdrParameter] {
        &self.params
    }

    pub fn fraction(&self) -> f64 {
        self.n as f64 / self.n_total as f64
    }

    pub fn at(&self, n: u32) -> AdrState {
        AdrState {
            n: n.min(self.n_total),
            ..self.clone()
        }
    }

    pub fn terminal(&self) -> AdrState {
        self.at(self.n_total)
    }

    fn param(&self, name: &str) -> Result<&AdrParameter, AdrError> {
        self.params
            .iter()
            .find(|p| p.name == name)
            .ok_or_else(|| AdrError::UnknownParameter(name.to_string()))
    }

    pub fn current_range(&self, name: &str) -> Result<(f64, f64), AdrError> {
        Ok(self.param(name)?.range_at(self.n, self.n_total))
    }

    /// Current value of a scalar-schedule row.
    pub fn scalar(&self, name: &str) -> Result<f64, AdrError> {
        let p = self.param(name)?;
        match p.kind {
            AdrKind::Scalar => Ok(p.range_at(self.n, self.n_total).0),
            AdrKind::Uniform => Err(AdrError::NotScalar(name.to_string())),
        }
    }

    /// Moves every parameter one increment toward terminal when `recent_perf`
    /// clears the gate.
    pub fn advance(&self, recent_perf: f64, gate: &AdrGate) -> AdrState {
        if recent_perf >= gate.threshold && self.n < self.n_total {
            self.at(self.n + 1)
        } else {
            self.clone()
        }
    }

    pub fn sample(&self, seed: u64) -> AdrSample {
        self.sample_with(&mut ChaCha8Rng::seed_from_u64(seed))
    }

    /// One draw per uniform row, in schedule order; scalar rows report their
    /// current value.
    pub fn sample_with<R: Rng>(&self, rng: &mut R) -> AdrSample {
        let values = self
            .params
            .iter()
            .map(|p| {
                let (lo, hi) = p.range_at(self.n, self.n_total);
                let value = match p.kind {
                    AdrKind::Uniform => lo + rng.gen::<f64>() * (hi - lo),
                    AdrKind::Scalar => lo,
                };
                (p.name.clone(), value)
            })
            .collect();
        AdrSample { values }
    }

    /// Plain-text table of current ranges.
    pub fn dump(&self) -> String {
        let width = self.params.iter().map(|p| p.label.len()).max().unwrap_or(0);
        let mut out = format!("ADR n = {} / {} (fraction {:.3})\n", self.n, self.n_total, self.fraction());
        for p in self.params.iter() {
            let (lo, hi) = p.range_at(self.n, self.n_total);
            let setting = match p.kind {
                AdrKind::Uniform => format!("U({}, {})", fmt_num(lo), fmt_num(hi)),
                AdrKind::Scalar => fmt_num(lo),
            };
            let _ = writeln!(out, "{:<width$}  {:<24}  {}", p.label, p.name, setting);
        }
        out
    }
}

fn fmt_num(v: f64) -> String {
    let s = format!("{v:.6}");
    let s = s.trim_end_matches('0').trim_end_matches('.');
    if s == "-0" {
        "0".into()
    } else {
        s.into()
    }
}

/// Parameter values drawn for one episode.
#[derive(Debug, Clone, PartialEq)]
pub struct AdrSample {
    values: BTreeMap<String, f64>,
}

impl AdrSample {
    pub fn get(&self, name: &str) -> Result<f64, AdrError> {
        self.values
            .get(name)
            .copied()
            .ok_or_else(|| AdrError::UnknownParameter(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, f64)> {
        self.values.iter().map(|(k, v)| (k.as_str(), *v))
    }
}

/// Trailing success window feeding the gate. After an advance the window is
/// cleared, so every increment is earned by a full window at the new level.
#[derive(Debug, Clone, PartialEq)]
pub struct AdrCurriculum {
    pub state: AdrState,
    pub gate: AdrGate,
    recent: VecDeque<f64>,
}

impl AdrCurriculum {
    pub fn new(schedule: AdrSchedule) -> Self {
        AdrCurriculum {
            state: schedule.state,
            gate: schedule.gate,
            recent: VecDeque::new(),
        }
    }

    /// Records an episode score in [0, 1]; returns true if the counter advanced.
    pub fn record_episode(&mut self, score: f64) -> bool {
        self.recent.push_back(score);
        if self.recent.len() > self.gate.window {
            self.recent.pop_front();
        }
        if self.recent.len() < self.gate.window {
            return false;
        }
        let mean = self.recent.iter().sum::<f64>() / self.recent.len() as f64;
        let next = self.state.advance(mean, &self.gate);
        let advanced = next.n != self.state.n;
        if advanced {
            self.recent.clear();
        }
        self.state = next;
        advanced
    }
}
