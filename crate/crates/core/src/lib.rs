//! Core model and logic for TadBot tadpole robots.
//!
//! - [`actuation`]: closed-form crank, tendon, lever and tail chain plus marker synthesis.
//! - [`signal`]: amplitude and frequency recovery from marker streams, frame motion scoring.
//! - [`device`]: the deterministic swimming/begging firmware state machine.
//! - [`protocol`]: newline-delimited JSON wire format shared by gateway, devices and cameras.
//! - [`experiment`]: randomized trials, care-event logs and per-phase summaries.

pub mod actuation;
pub mod device;
pub mod experiment;
pub mod geometry;
pub mod protocol;
pub mod signal;

pub use actuation::{ActuationConfig, MarkerFrame, MarkerStream};
pub use device::{DeviceState, Mode};
pub use protocol::WireMessage;
