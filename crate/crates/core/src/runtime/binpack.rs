//! Toy bin packing: the scripted grasp policy in the kinematic simulator under
//! the bin-packing supervisor, driven by the node schedule.

use nalgebra::{Vector3, Vector6};
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::metrics::{metrics_from_log, AttemptRecord, Metrics, MetricsSummary, ATTEMPT_KIND};
use super::scheduler::{trace_hash, Emitted, NodeSchedule, Rate, SchedulerError, TraceRecord, TICKS_PER_SECOND};
use super::state_machine::{state_machine_step, BinPackState, SmMode};
use super::wire::{ControlMode, Frame, GainName, StateFrame, WireError, WireMetrics};
use super::RuntimeConfig;
use crate::action_space::PcaCoords;
use crate::adr::AdrState;
use crate::fabric::{FabricTargets, RuntimeGain};
use crate::kinematics::TOTAL_DOF;
use crate::toysim::{EpisodeMode, ObservationSet, ScriptedGrasp, ScriptedGraspConfig, ToyEnv, ToySimError};

fn seconds(tick: u64) -> f64 {
    tick as f64 / TICKS_PER_SECOND as f64
}

fn runtime_gain(name: GainName) -> RuntimeGain {
    match name {
        GainName::Damping => RuntimeGain::Damping,
        GainName::PdVelocityScale => RuntimeGain::PdVelocityScale,
    }
}

/// Everything the nodes share.
pub struct BinPackWorld {
    pub env: ToyEnv,
    pub policy: ScriptedGrasp,
    pub adr: AdrState,
    pub cfg: RuntimeConfig,
    pub sm: BinPackState,
    pub log: Vec<AttemptRecord>,
    pub control: ControlMode,
    open_pca: PcaCoords,
    obs: ObservationSet,
    policy_action: FabricTargets,
    command: FabricTargets,
    manual: Option<FabricTargets>,
    manual_fresh: bool,
    gains: Vec<(RuntimeGain, f64)>,
    predicted: Vector3<f64>,
    attempt_start: f64,
    carried: bool,
    spawned: u32,
    finished: bool,
}

impl BinPackWorld {
    pub fn new(env: ToyEnv, adr: AdrState, cfg: RuntimeConfig) -> Result<Self, ToySimError> {
        let mut env = env;
        env.set_mode(EpisodeMode::Student);
        let fc = env.fabric().config().clone();
        let policy = ScriptedGrasp::new(
            ScriptedGraspConfig::default(),
            env.model().clone(),
            env.basis().clone(),
            fc.palm_reference,
            &fc.nominal_posture,
            env.config(),
        );
        let obs = env.reset(&adr, cfg.binpack.seed)?;
        let open_pca = env.basis().coords_for_closure(cfg.state_machine.open_closure);
        let r = cfg.state_machine.ready_position();
        let home = FabricTargets { palm_pose: Vector6::new(r.x, r.y, r.z, 0.0, 0.0, 0.0), pca: open_pca };
        Ok(BinPackWorld {
            sm: BinPackState::new(cfg.state_machine.z_threshold, 0.0),
            predicted: policy.predicted_object(),
            env,
            policy,
            adr,
            cfg,
            log: Vec::new(),
            control: ControlMode::Policy,
            open_pca,
            obs,
            policy_action: home,
            command: home,
            manual: None,
            manual_fresh: false,
            gains: Vec::new(),
            attempt_start: 0.0,
            carried: false,
            spawned: 1,
            finished: false,
        })
    }

    pub fn reference(adr: AdrState) -> Self {
        BinPackWorld::new(ToyEnv::reference(EpisodeMode::Student), adr, RuntimeConfig::reference()).expect("reference schedule has every row")
    }

    pub fn finished(&self) -> bool {
        self.finished
    }

    pub fn predicted_object(&self) -> Vector3<f64> {
        self.predicted
    }

    /// Applies a console command; it takes effect on the next fabric tick.
    pub fn apply_command(&mut self, frame: &Frame) -> Result<(), WireError> {
        let reject = |message: &str, field: &str| Err(WireError { message: message.into(), field: Some(field.into()) });
        match frame {
            Frame::Target { palm, pca } => {
                if self.control != ControlMode::Manual {
                    return reject("targets are only accepted in manual mode", "type");
                }
                self.manual = Some(FabricTargets { palm_pose: Vector6::from_column_slice(palm), pca: PcaCoords::from_column_slice(pca) });
                self.manual_fresh = true;
                Ok(())
            }
            Frame::Mode { value } => {
                if *value == ControlMode::Manual && self.control == ControlMode::Policy {
                    // hold the last commanded pose until a target arrives
                    self.manual = Some(self.command);
                }
                self.control = *value;
                Ok(())
            }
            Frame::Gain { name, value } => {
                let gain = runtime_gain(*name);
                if let Err(e) = self.env.set_runtime_gain(gain, *value) {
                    return reject(&e.to_string(), "value");
                }
                self.gains.retain(|(g, _)| *g != gain);
                self.gains.push((gain, *value));
                Ok(())
            }
            _ => reject("not a command frame", "type"),
        }
    }

    fn spawn_next(&mut self, now: f64) -> Result<(), String> {
        if self.spawned >= self.cfg.binpack.objects {
            self.finished = true;
            return Ok(());
        }
        let seed = self.cfg.binpack.seed + self.spawned as u64;
        self.spawned += 1;
        self.obs = self.env.respawn_object(&self.adr, seed).map_err(|e| e.to_string())?;
        for &(g, v) in &self.gains {
            self.env.set_runtime_gain(g, v).map_err(|e| e.to_string())?;
        }
        self.policy.restart();
        self.attempt_start = now;
        self.carried = false;
        Ok(())
    }

    fn close_attempt(&mut self, success: bool, now: f64) -> Result<Emitted, String> {
        let record = AttemptRecord { index: self.log.len() as u64, success, start: self.attempt_start, end: now };
        self.log.push(record);
        self.spawn_next(now)?;
        Ok(vec![(ATTEMPT_KIND.to_string(), serde_json::to_value(record).expect("plain data"))])
    }

    fn supervising(&self) -> bool {
        !self.finished && self.control == ControlMode::Policy
    }

    pub fn policy_node(&mut self, _tick: u64) -> Result<Emitted, String> {
        if self.supervising() && self.sm.mode == SmMode::PolicyActive {
            self.policy_action = self.policy.act(&self.obs.actor_obs);
        }
        Ok(Vec::new())
    }

    pub fn state_machine_node(&mut self, tick: u64) -> Result<Emitted, String> {
        if !self.supervising() {
            return Ok(Vec::new());
        }
        let now = seconds(tick);
        let cfg = &self.cfg.state_machine;
        self.predicted = if cfg.use_predicted { self.policy.predicted_object() } else { self.env.state().object.position };
        let palm = self.env.state().palm.translation.vector;
        let before = self.sm.mode;
        let (sm, command) = state_machine_step(&self.sm, cfg, &self.predicted, &self.policy_action, &palm, &self.open_pca, now);
        self.sm = sm;
        self.command = command;
        let mut out = Vec::new();
        if self.sm.mode != before {
            out.push(("mode".to_string(), json!({ "from": before, "to": self.sm.mode })));
        }
        match (before, self.sm.mode) {
            (SmMode::LiftToBin, SmMode::Deposit) => self.carried = self.env.state().object.grasped,
            (SmMode::ReturnHome, SmMode::PolicyActive) => out.extend(self.close_attempt(self.carried, now)?),
            (SmMode::PolicyActive, SmMode::PolicyActive) if now - self.attempt_start >= self.cfg.binpack.attempt_timeout => {
                out.extend(self.close_attempt(false, now)?);
                self.sm.mode_entry_time = now;
            }
            _ => {}
        }
        Ok(out)
    }

    pub fn fabric_node(&mut self, _tick: u64) -> Result<Emitted, String> {
        let (targets, source) = match (self.control, self.manual) {
            (ControlMode::Manual, Some(m)) => (m, "manual"),
            _ if self.finished => (self.command, "idle"),
            _ if self.sm.mode == SmMode::PolicyActive => (self.command, "policy"),
            _ => (self.command, "supervisor"),
        };
        let fresh = std::mem::take(&mut self.manual_fresh) && source == "manual";
        self.obs = self.env.step_targets(&targets).map_err(|e| e.to_string())?.obs;
        let p = targets.palm_pose;
        let mut payload = json!({ "source": source, "palm": [p[0], p[1], p[2]] });
        if fresh {
            payload["new_target"] = json!(true);
        }
        Ok(vec![("command".to_string(), payload)])
    }

    /// Snapshot for the console.
    pub fn state_frame(&self) -> StateFrame {
        let s = self.env.state();
        let palm = &s.palm;
        let q = palm.rotation.quaternion();
        let t = palm.translation.vector;
        let metrics = metrics_from_log(&self.log)
            .map(|(_, m)| WireMetrics { cs_mean: m.cs_mean, ct_mean: m.ct_mean, sr: m.sr })
            .unwrap_or(WireMetrics { cs_mean: 0.0, ct_mean: 0.0, sr: 0.0 });
        let mut joints = [0.0; TOTAL_DOF];
        joints.copy_from_slice(s.robot.q.as_slice());
        StateFrame {
            tick: s.tick,
            q: joints,
            palm_pose: [t.x, t.y, t.z, q.w, q.i, q.j, q.k],
            obj_pos: s.object.position.into(),
            obj_pred: self.predicted.into(),
            grasped: s.object.grasped,
            sm_mode: self.sm.mode,
            metrics,
            adr_fraction: self.adr.fraction(),
        }
    }
}

/// The deployment graph over a bin-packing world. Both PD nodes only keep
/// time: the simulator folds joint tracking into the 60 Hz step.
pub fn binpack_schedule(cfg: &RuntimeConfig) -> NodeSchedule<BinPackWorld> {
    let mut s = NodeSchedule::new();
    let r = &cfg.rates;
    s.add("arm_pd", Rate::hz(r.arm_pd), |_, _| Ok(Vec::new()));
    s.add("hand_pd", Rate::hz(r.hand_pd), |_, _| Ok(Vec::new()));
    s.add("policy", Rate::hz(r.policy), BinPackWorld::policy_node);
    s.add("state_machine", Rate::hz(r.state_machine), BinPackWorld::state_machine_node);
    s.add("fabric", Rate::hz(r.fabric), BinPackWorld::fabric_node);
    s
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinPackReport {
    pub log: Vec<AttemptRecord>,
    pub metrics: Metrics,
    pub summary: MetricsSummary,
    pub sim_time: f64,
    pub trace_hash: String,
    #[serde(skip)]
    pub trace: Vec<TraceRecord>,
}

#[derive(Debug, thiserror::Error)]
pub enum BinPackError {
    #[error(transparent)]
    Sim(#[from] ToySimError),
    #[error(transparent)]
    Schedule(#[from] SchedulerError),
    #[error("no attempt finished within {0} s of simulated time")]
    Stalled(f64),
}

/// Runs the configured number of objects in simulated time on the reference
/// robot and environment.
pub fn run_binpack(adr: AdrState, cfg: RuntimeConfig) -> Result<BinPackReport, BinPackError> {
    run_binpack_in(ToyEnv::reference(EpisodeMode::Student), adr, cfg)
}

pub fn run_binpack_in(env: ToyEnv, adr: AdrState, cfg: RuntimeConfig) -> Result<BinPackReport, BinPackError> {
    let mut world = BinPackWorld::new(env, adr, cfg.clone())?;
    let mut schedule = binpack_schedule(&cfg);
    let sm = &cfg.state_machine;
    let per_object = cfg.binpack.attempt_timeout + 2.0 * sm.transit_timeout + sm.deposit_duration + 1.0;
    let limit = per_object * cfg.binpack.objects as f64;
    let mut trace = Vec::new();
    while !world.finished() {
        if seconds(schedule.now()) >= limit {
            return Err(BinPackError::Stalled(limit));
        }
        trace.extend(schedule.run_for(&mut world, 1.0)?);
    }
    let (metrics, summary) = metrics_from_log(&world.log).expect("a finished run has attempts");
    Ok(BinPackReport {
        log: world.log,
        metrics,
        summary,
        sim_time: seconds(schedule.now()),
        trace_hash: trace_hash(&trace),
        trace,
    })
}
