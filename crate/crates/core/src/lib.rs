//! Geometric-fabric arm-hand control, grasp curriculum and policy distillation.
//!
//! The crate is organised bottom-up:
//!
//! - [`kinematics`]: robot description, forward kinematics, Jacobians.
//! - [`action_space`]: 11-D policy action decoding and the PCA hand synergy map.
//! - [`fabric`]: geometric fabric resolve, limit modulation and integration.
//! - [`reward`]: the four-term grasp reward.
//! - [`adr`]: tandem automatic domain randomization.
//! - [`toysim`]: a kinematic grasping environment.
//! - [`distill`]: KL action loss, auxiliary loss, DAgger and the stereo attention mask.
//! - [`runtime`]: multi-rate scheduler, bin-packing state machine, metrics, console service.
//! - [`reference`]: published hardware results and rendering randomization, as data.

pub mod action_space;
pub mod adr;
pub mod config;
pub mod fabric;
pub mod kinematics;
pub mod reference;
pub mod reward;
pub mod toysim;
pub mod distill;
pub mod runtime;

pub use config::ConfigError;
