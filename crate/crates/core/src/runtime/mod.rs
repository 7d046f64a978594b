//! Deployment runtime: node scheduler, bin-packing supervisor, metrics and the
//! console service.

pub mod binpack;
pub mod metrics;
pub mod scheduler;
pub mod service;
pub mod state_machine;
pub mod wire;

use serde::{Deserialize, Serialize};

use crate::config::{parse_toml, require_finite, ConfigError};
pub use binpack::{run_binpack, run_binpack_in, BinPackReport, BinPackWorld};
pub use metrics::{metrics_from_log, metrics_from_trace, AttemptRecord, Metrics, MetricsSummary};
pub use scheduler::{run_scheduled, trace_hash, NodeSchedule, Rate, TraceRecord};
pub use service::{serve_console, ServiceHandle};
pub use state_machine::{state_machine_step, BinPackState, SmMode, StateMachineConfig};

/// Node rates in Hz, priority order on ties.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Rates {
    pub arm_pd: u64,
    pub hand_pd: u64,
    pub policy: u64,
    pub state_machine: u64,
    pub fabric: u64,
}

impl Rates {
    pub fn named(&self) -> [(&'static str, u64); 5] {
        [
            ("arm_pd", self.arm_pd),
            ("hand_pd", self.hand_pd),
            ("policy", self.policy),
            ("state_machine", self.state_machine),
            ("fabric", self.fabric),
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BinPackConfig {
    pub objects: u32,
    pub attempt_timeout: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServeConfig {
    pub address: String,
    pub state_rate: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RuntimeConfig {
    pub rates: Rates,
    pub state_machine: StateMachineConfig,
    pub binpack: BinPackConfig,
    pub serve: ServeConfig,
}

impl RuntimeConfig {
    pub fn from_text(text: &str) -> Result<RuntimeConfig, ConfigError> {
        let cfg: RuntimeConfig = parse_toml(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn reference() -> RuntimeConfig {
        RuntimeConfig::from_text(include_str!("../../data/runtime.toml")).expect("shipped runtime config is valid")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        for (name, hz) in self.rates.named() {
            if hz == 0 {
                return Err(ConfigError::invalid(format!("rates.{name}"), "rate must be positive"));
            }
        }
        let sm = &self.state_machine;
        require_finite("state_machine", &[sm.z_threshold, sm.arrival_tolerance, sm.deposit_duration, sm.transit_timeout, sm.open_closure])?;
        require_finite("state_machine.bin_waypoint", &sm.bin_waypoint)?;
        require_finite("state_machine.ready_position", &sm.ready_position)?;
        for (field, v) in [
            ("state_machine.arrival_tolerance", sm.arrival_tolerance),
            ("state_machine.deposit_duration", sm.deposit_duration),
            ("state_machine.transit_timeout", sm.transit_timeout),
            ("binpack.attempt_timeout", self.binpack.attempt_timeout),
        ] {
            if !(v > 0.0) {
                return Err(ConfigError::invalid(field, "must be positive"));
            }
        }
        if !(0.0..=1.0).contains(&sm.open_closure) {
            return Err(ConfigError::invalid("state_machine.open_closure", "must lie in [0, 1]"));
        }
        if self.binpack.objects == 0 {
            return Err(ConfigError::invalid("binpack.objects", "must be positive"));
        }
        if self.serve.state_rate == 0 || self.rates.fabric % self.serve.state_rate != 0 {
            return Err(ConfigError::invalid("serve.state_rate", "must divide the fabric rate"));
        }
        Ok(())
    }
}
