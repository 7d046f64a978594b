//! Deterministic multi-rate scheduler on an integer microsecond clock.
//!
//! A node with rate `r` fires whenever `floor(r · t)` increments, so over a
//! duration `d` it fires exactly `floor(r · d)` times and never at `t = 0`.
//! Rates are rationals, making the firing instants exact. Nodes due at the
//! same tick fire in schedule order.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub const TICKS_PER_SECOND: u64 = 1_000_000;

/// Rate in Hz as `num / den`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rate {
    pub num: u64,
    pub den: u64,
}

impl Rate {
    pub fn hz(hz: u64) -> Rate {
        Rate { num: hz, den: 1 }
    }

    pub fn new(num: u64, den: u64) -> Result<Rate, SchedulerError> {
        if num == 0 || den == 0 {
            return Err(SchedulerError::BadRate { num, den });
        }
        Ok(Rate { num, den })
    }

    pub fn as_f64(&self) -> f64 {
        self.num as f64 / self.den as f64
    }

    /// Firings in `(0, tick]`.
    pub fn count_at(&self, tick: u64) -> u64 {
        (self.num as u128 * tick as u128 / (self.den as u128 * TICKS_PER_SECOND as u128)) as u64
    }

    /// Tick of firing number `k` (1-based): the least `t` with `count_at(t) >= k`.
    pub fn tick_of(&self, k: u64) -> u64 {
        (k as u128 * self.den as u128 * TICKS_PER_SECOND as u128).div_ceil(self.num as u128) as u64
    }
}

#[derive(Debug, Error)]
pub enum SchedulerError {
    #[error("rate {num}/{den} Hz is not positive")]
    BadRate { num: u64, den: u64 },
    #[error("schedule has no nodes")]
    Empty,
    #[error("node `{node}` failed at tick {tick}: {message}")]
    Node { node: String, tick: u64, message: String },
}

/// One trace line: what a node emitted when it fired.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub tick: u64,
    pub node: String,
    pub kind: String,
    pub payload: serde_json::Value,
}

impl TraceRecord {
    pub fn new(tick: u64, node: &str, kind: &str, payload: serde_json::Value) -> Self {
        TraceRecord { tick, node: node.to_string(), kind: kind.to_string(), payload }
    }
}

/// Sha-256 over the canonical JSON lines of a trace.
pub fn trace_hash(trace: &[TraceRecord]) -> String {
    let mut h = Sha256::new();
    for r in trace {
        h.update(serde_json::to_vec(r).expect("trace records are plain data"));
        h.update(b"\n");
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// What a node callback may emit: `(kind, payload)` records for the trace.
pub type Emitted = Vec<(String, serde_json::Value)>;

type Callback<C> = Box<dyn FnMut(&mut C, u64) -> Result<Emitted, String>>;

pub struct Node<C> {
    pub name: String,
    pub rate: Rate,
    callback: Callback<C>,
}

/// Nodes in priority order sharing a context `C`.
pub struct NodeSchedule<C> {
    nodes: Vec<Node<C>>,
    fired: Vec<u64>,
    now: u64,
}

impl<C> Default for NodeSchedule<C> {
    fn default() -> Self {
        NodeSchedule { nodes: Vec::new(), fired: Vec::new(), now: 0 }
    }
}

impl<C> NodeSchedule<C> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, rate: Rate, callback: impl FnMut(&mut C, u64) -> Result<Emitted, String> + 'static) {
        self.nodes.push(Node { name: name.to_string(), rate, callback: Box::new(callback) });
        self.fired.push(self.nodes.last().expect("just pushed").rate.count_at(self.now));
    }

    pub fn names(&self) -> Vec<&str> {
        self.nodes.iter().map(|n| n.name.as_str()).collect()
    }

    /// Firings so far, in node order.
    pub fn counts(&self) -> &[u64] {
        &self.fired
    }

    /// Current simulated time in ticks.
    pub fn now(&self) -> u64 {
        self.now
    }

    fn next_due(&self) -> Option<(u64, usize)> {
        self.nodes
            .iter()
            .enumerate()
            .map(|(i, n)| (n.rate.tick_of(self.fired[i] + 1), i))
            .min()
    }

    /// Fires every node due in `(now, until]` and advances the clock to `until`.
    pub fn run_until(&mut self, ctx: &mut C, until: u64) -> Result<Vec<TraceRecord>, SchedulerError> {
        if self.nodes.is_empty() {
            return Err(SchedulerError::Empty);
        }
        let mut trace = Vec::new();
        while let Some((tick, i)) = self.next_due().filter(|(t, _)| *t <= until) {
            self.now = tick;
            let node = &mut self.nodes[i];
            let emitted = (node.callback)(ctx, tick).map_err(|message| SchedulerError::Node {
                node: node.name.clone(),
                tick,
                message,
            })?;
            self.fired[i] += 1;
            trace.extend(emitted.into_iter().map(|(kind, payload)| TraceRecord { tick, node: node.name.clone(), kind, payload }));
        }
        self.now = until;
        Ok(trace)
    }

    /// Runs for `duration` simulated seconds from the current time.
    pub fn run_for(&mut self, ctx: &mut C, duration: f64) -> Result<Vec<TraceRecord>, SchedulerError> {
        let until = self.now + (duration * TICKS_PER_SECOND as f64).round() as u64;
        self.run_until(ctx, until)
    }
}

/// Runs a fresh schedule for `duration` seconds of simulated time.
pub fn run_scheduled<C>(schedule: &mut NodeSchedule<C>, ctx: &mut C, duration: f64) -> Result<Vec<TraceRecord>, SchedulerError> {
    schedule.run_for(ctx, duration)
}
