//! Simulation and experiment engine for electroadhesion-based button-click
//! rendering on a flat surface.
//!
//! The crate is organised bottom-up:
//!
//! * [`signal`] synthesizes the dual-carrier drive and the rectangular
//!   lateral-force command of a click stimulus.
//! * [`device`] models the electrode grid, finger contacts, fingertip
//!   mechanics and the virtual force sensor / displacement probe.
//! * [`click`] is the normal-force trigger state machine.
//! * [`subject`] provides calibrated simulated subjects.
//! * [`protocol`] runs the two-section perceptual experiment.
//! * [`analysis`] turns session records into overlap maps, percentage
//!   curves, quadratic rating fits and initial-pulse-width groups.
//! * [`session`] holds the persisted session record and its exports.

pub mod analysis;
pub mod click;
pub mod device;
pub mod protocol;
pub mod session;
pub mod signal;
pub mod subject;
