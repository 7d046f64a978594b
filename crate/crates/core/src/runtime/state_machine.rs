//! Bin-packing supervisor: hands control to fixed transport actions once the
//! object is believed to be off the table, then returns the robot home.

use nalgebra::{Vector3, Vector6};
use serde::{Deserialize, Serialize};

use crate::action_space::PcaCoords;
use crate::fabric::FabricTargets;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SmMode {
    PolicyActive,
    LiftToBin,
    Deposit,
    ReturnHome,
}

impl SmMode {
    pub fn next(self) -> SmMode {
        match self {
            SmMode::PolicyActive => SmMode::LiftToBin,
            SmMode::LiftToBin => SmMode::Deposit,
            SmMode::Deposit => SmMode::ReturnHome,
            SmMode::ReturnHome => SmMode::PolicyActive,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StateMachineConfig {
    /// Predicted object height (m, world z) that ends the policy phase.
    pub z_threshold: f64,
    /// Palm position over the bin.
    pub bin_waypoint: [f64; 3],
    /// Palm position the robot returns to between attempts.
    pub ready_position: [f64; 3],
    pub arrival_tolerance: f64,
    pub deposit_duration: f64,
    /// Longest transit before the next mode is forced.
    pub transit_timeout: f64,
    /// Hand closure for the open pose used in Deposit and ReturnHome.
    pub open_closure: f64,
    /// Trigger on the policy's predicted object position rather than the
    /// simulator's true one.
    pub use_predicted: bool,
}

impl StateMachineConfig {
    pub fn bin_waypoint(&self) -> Vector3<f64> {
        Vector3::from(self.bin_waypoint)
    }

    pub fn ready_position(&self) -> Vector3<f64> {
        Vector3::from(self.ready_position)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinPackState {
    pub mode: SmMode,
    pub mode_entry_time: f64,
    pub z_threshold: f64,
    /// Hand pose kept while carrying: the policy's last grasp coordinates.
    pub held_pca: PcaCoords,
}

impl BinPackState {
    pub fn new(z_threshold: f64, now: f64) -> Self {
        BinPackState { mode: SmMode::PolicyActive, mode_entry_time: now, z_threshold, held_pca: PcaCoords::zeros() }
    }

    fn enter(&self, mode: SmMode, now: f64) -> BinPackState {
        debug_assert_eq!(self.mode.next(), mode);
        BinPackState { mode, mode_entry_time: now, ..self.clone() }
    }
}

fn target_at(p: Vector3<f64>, pca: PcaCoords) -> FabricTargets {
    FabricTargets { palm_pose: Vector6::new(p.x, p.y, p.z, 0.0, 0.0, 0.0), pca }
}

/// One 60 Hz supervisor update. `palm` is the measured palm position, used
/// for the arrival tests; `open_pca` is the hand's open pose.
pub fn state_machine_step(
    sm: &BinPackState,
    cfg: &StateMachineConfig,
    predicted_obj: &Vector3<f64>,
    policy_action: &FabricTargets,
    palm: &Vector3<f64>,
    open_pca: &PcaCoords,
    now: f64,
) -> (BinPackState, FabricTargets) {
    let elapsed = now - sm.mode_entry_time;
    let arrived = |p: Vector3<f64>| (palm - p).norm() <= cfg.arrival_tolerance;
    let bin = cfg.bin_waypoint();
    let ready = cfg.ready_position();
    match sm.mode {
        SmMode::PolicyActive if predicted_obj.z >= sm.z_threshold => {
            let mut next = sm.enter(SmMode::LiftToBin, now);
            next.held_pca = policy_action.pca;
            let target = target_at(bin, next.held_pca);
            (next, target)
        }
        SmMode::PolicyActive => (sm.clone(), *policy_action),
        SmMode::LiftToBin if arrived(bin) || elapsed >= cfg.transit_timeout => {
            (sm.enter(SmMode::Deposit, now), target_at(bin, *open_pca))
        }
        SmMode::LiftToBin => (sm.clone(), target_at(bin, sm.held_pca)),
        SmMode::Deposit if elapsed >= cfg.deposit_duration => (sm.enter(SmMode::ReturnHome, now), target_at(ready, *open_pca)),
        SmMode::Deposit => (sm.clone(), target_at(bin, *open_pca)),
        SmMode::ReturnHome if arrived(ready) || elapsed >= cfg.transit_timeout => {
            // first policy tick happens on the next update
            (sm.enter(SmMode::PolicyActive, now), target_at(ready, *open_pca))
        }
        SmMode::ReturnHome => (sm.clone(), target_at(ready, *open_pca)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> StateMachineConfig {
        StateMachineConfig {
            z_threshold: 0.2,
            bin_waypoint: [0.35, -0.45, 0.4],
            ready_position: [0.5, 0.0, 0.35],
            arrival_tolerance: 0.03,
            deposit_duration: 0.5,
            transit_timeout: 5.0,
            open_closure: 0.15,
            use_predicted: true,
        }
    }

    #[test]
    fn full_cycle() {
        let c = cfg();
        let open = PcaCoords::from_element(-1.0);
        let policy = target_at(Vector3::new(0.5, 0.1, 0.1), PcaCoords::from_element(0.7));
        let low = Vector3::new(0.5, 0.1, 0.05);
        let high = Vector3::new(0.5, 0.1, 0.25);
        let sm = BinPackState::new(c.z_threshold, 0.0);
        let away = Vector3::new(0.0, 0.0, 1.0);

        let (sm, out) = state_machine_step(&sm, &c, &low, &policy, &away, &open, 1.0);
        assert_eq!((sm.mode, out), (SmMode::PolicyActive, policy));
        let (sm, out) = state_machine_step(&sm, &c, &high, &policy, &away, &open, 2.0);
        assert_eq!(sm.mode, SmMode::LiftToBin);
        assert_eq!(out, target_at(c.bin_waypoint(), policy.pca));
        let (sm, _) = state_machine_step(&sm, &c, &high, &policy, &away, &open, 3.0);
        assert_eq!(sm.mode, SmMode::LiftToBin);
        let (sm, out) = state_machine_step(&sm, &c, &high, &policy, &c.bin_waypoint(), &open, 3.5);
        assert_eq!((sm.mode, out.pca), (SmMode::Deposit, open));
        let (sm, _) = state_machine_step(&sm, &c, &high, &policy, &c.bin_waypoint(), &open, 3.9);
        assert_eq!(sm.mode, SmMode::Deposit);
        let (sm, out) = state_machine_step(&sm, &c, &high, &policy, &c.bin_waypoint(), &open, 4.0);
        assert_eq!(sm.mode, SmMode::ReturnHome);
        assert_eq!(out, target_at(c.ready_position(), open));
        let near = c.ready_position() + Vector3::new(0.0, 0.029, 0.0);
        let (sm, _) = state_machine_step(&sm, &c, &high, &policy, &near, &open, 4.5);
        assert_eq!((sm.mode, sm.mode_entry_time), (SmMode::PolicyActive, 4.5));
    }
}
