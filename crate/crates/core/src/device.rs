//! TadBot firmware state machine on a virtual tick clock.
//!
//! Swimming and begging share one burst envelope: 15 s on, 10 s off, three
//! times. Only the carrier differs (8 Hz vs 16 Hz). The clock is an integer
//! tick counter so trajectories are bit-identical for identical inputs.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const SWIMMING_CARRIER_HZ: f64 = 8.0;
pub const BEGGING_CARRIER_HZ: f64 = 16.0;
pub const BURST_ON_S: f64 = 15.0;
pub const BURST_OFF_S: f64 = 10.0;
pub const BURST_REPEATS: usize = 3;
pub const SCHEDULE_SPAN_S: f64 = (BURST_ON_S + BURST_OFF_S) * BURST_REPEATS as f64;
pub const DEFAULT_TICK_S: f64 = 0.01;
pub const DEFAULT_TENSION_LIMIT_N: f64 = 2.0;

// Tolerance for comparing tick-derived times against segment boundaries.
const TIME_EPS: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DeviceError {
    #[error("tension interlock: {requested_n} N exceeds buckling limit {limit_n} N")]
    Interlock { requested_n: f64, limit_n: f64 },
    #[error("tension must be a finite non-negative force, got {0}")]
    InvalidTension(f64),
    #[error("cannot activate {0}; use stop")]
    InvalidMode(Mode),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Idle,
    Swimming,
    Begging,
}

impl Mode {
    pub fn carrier_hz(self) -> f64 {
        match self {
            Mode::Idle => 0.0,
            Mode::Swimming => SWIMMING_CARRIER_HZ,
            Mode::Begging => BEGGING_CARRIER_HZ,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Idle => "idle",
            Mode::Swimming => "swimming",
            Mode::Begging => "begging",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "idle" => Ok(Mode::Idle),
            "swimming" => Ok(Mode::Swimming),
            "begging" => Ok(Mode::Begging),
            other => Err(format!("unknown mode `{other}`")),
        }
    }
}

/// Whether the motor is driving right now.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Idle,
    On,
    Off,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Idle => "idle",
            Phase::On => "on",
            Phase::Off => "off",
        }
    }
}

impl FromStr for Phase {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "idle" => Ok(Phase::Idle),
            "on" => Ok(Phase::On),
            "off" => Ok(Phase::Off),
            other => Err(format!("unknown phase `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    /// Carrier frequency, 0 for an off segment.
    pub freq_hz: f64,
    pub duration_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BurstSchedule {
    pub segments: Vec<Segment>,
    pub started_at: f64,
}

impl BurstSchedule {
    /// Three (carrier for 15 s, silence for 10 s) cycles anchored at `started_at`.
    pub fn for_mode(mode: Mode, started_at: f64) -> Self {
        let carrier = mode.carrier_hz();
        let segments = (0..BURST_REPEATS)
            .flat_map(|_| {
                [
                    Segment { freq_hz: carrier, duration_s: BURST_ON_S },
                    Segment { freq_hz: 0.0, duration_s: BURST_OFF_S },
                ]
            })
            .collect();
        Self { segments, started_at }
    }

    pub fn span_s(&self) -> f64 {
        self.segments.iter().map(|s| s.duration_s).sum()
    }

    /// Segment active at `offset_s` into the schedule; `None` once exhausted.
    /// Segments are half-open, so a boundary belongs to the later segment.
    pub fn segment_at(&self, offset_s: f64) -> Option<&Segment> {
        let mut end = 0.0;
        for seg in &self.segments {
            end += seg.duration_s;
            if offset_s < end - TIME_EPS {
                return Some(seg);
            }
        }
        None
    }
}

/// Snapshot published in telemetry messages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TelemetrySnapshot {
    pub device: String,
    pub t_s: f64,
    pub mode: Mode,
    pub phase: Phase,
    pub freq_hz: f64,
    pub remaining_s: f64,
    pub tension_n: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeviceState {
    device_id: String,
    mode: Mode,
    schedule: Option<BurstSchedule>,
    tension_n: f64,
    tension_limit_n: f64,
    ticks: u64,
    tick_s: f64,
    setpoint_hz: f64,
}

impl DeviceState {
    pub fn new(device_id: impl Into<String>) -> Self {
        Self::with_params(device_id, DEFAULT_TICK_S, DEFAULT_TENSION_LIMIT_N)
    }

    /// `tick_s` must be positive; `tension_limit_n` is the sleeve buckling bound.
    pub fn with_params(device_id: impl Into<String>, tick_s: f64, tension_limit_n: f64) -> Self {
        assert!(tick_s > 0.0 && tick_s.is_finite(), "tick length must be positive");
        Self {
            device_id: device_id.into(),
            mode: Mode::Idle,
            schedule: None,
            tension_n: 0.0,
            tension_limit_n,
            ticks: 0,
            tick_s,
            setpoint_hz: 0.0,
        }
    }

    pub fn device_id(&self) -> &str {
        &self.device_id
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn schedule(&self) -> Option<&BurstSchedule> {
        self.schedule.as_ref()
    }

    pub fn tension_n(&self) -> f64 {
        self.tension_n
    }

    pub fn tension_limit_n(&self) -> f64 {
        self.tension_limit_n
    }

    pub fn tick_s(&self) -> f64 {
        self.tick_s
    }

    pub fn ticks(&self) -> u64 {
        self.ticks
    }

    /// Virtual time, seconds.
    pub fn clock_s(&self) -> f64 {
        self.ticks as f64 * self.tick_s
    }

    /// Setpoint produced by the most recent tick.
    pub fn setpoint_hz(&self) -> f64 {
        self.setpoint_hz
    }

    /// Starts a fresh burst schedule anchored at `now`, replacing any running one.
    pub fn activate_mode(&mut self, mode: Mode, now: f64) -> Result<(), DeviceError> {
        if mode == Mode::Idle {
            return Err(DeviceError::InvalidMode(mode));
        }
        if self.tension_n > self.tension_limit_n {
            return Err(DeviceError::Interlock {
                requested_n: self.tension_n,
                limit_n: self.tension_limit_n,
            });
        }
        self.mode = mode;
        self.schedule = Some(BurstSchedule::for_mode(mode, now));
        Ok(())
    }

    /// Activates at the current virtual time.
    pub fn activate(&mut self, mode: Mode) -> Result<(), DeviceError> {
        self.activate_mode(mode, self.clock_s())
    }

    pub fn stop(&mut self) {
        self.mode = Mode::Idle;
        self.schedule = None;
        self.setpoint_hz = 0.0;
    }

    pub fn set_tension(&mut self, tension_n: f64) -> Result<(), DeviceError> {
        if !(tension_n.is_finite() && tension_n >= 0.0) {
            return Err(DeviceError::InvalidTension(tension_n));
        }
        if tension_n > self.tension_limit_n {
            return Err(DeviceError::Interlock {
                requested_n: tension_n,
                limit_n: self.tension_limit_n,
            });
        }
        self.tension_n = tension_n;
        Ok(())
    }

    /// Advances one tick and returns the motor setpoint for the new time.
    pub fn tick(&mut self) -> f64 {
        self.ticks += 1;
        let now = self.clock_s();
        self.setpoint_hz = match &self.schedule {
            None => 0.0,
            Some(schedule) => match schedule.segment_at(now - schedule.started_at) {
                Some(seg) => seg.freq_hz,
                None => {
                    self.mode = Mode::Idle;
                    self.schedule = None;
                    0.0
                }
            },
        };
        self.setpoint_hz
    }

    /// Ticks per simulated second, rounded.
    pub fn ticks_per_second(&self) -> u64 {
        ((1.0 / self.tick_s).round() as u64).max(1)
    }

    /// True when the clock sits on a whole simulated second.
    pub fn on_second_boundary(&self) -> bool {
        self.ticks.is_multiple_of(self.ticks_per_second())
    }

    pub fn phase(&self) -> Phase {
        match &self.schedule {
            None => Phase::Idle,
            Some(s) => match s.segment_at(self.clock_s() - s.started_at) {
                Some(seg) if seg.freq_hz > 0.0 => Phase::On,
                Some(_) => Phase::Off,
                None => Phase::Idle,
            },
        }
    }

    pub fn remaining_s(&self) -> f64 {
        match &self.schedule {
            None => 0.0,
            Some(s) => (s.started_at + s.span_s() - self.clock_s()).max(0.0),
        }
    }

    pub fn telemetry(&self) -> TelemetrySnapshot {
        let phase = self.phase();
        let freq_hz = match (&self.schedule, phase) {
            (Some(s), Phase::On) => s
                .segment_at(self.clock_s() - s.started_at)
                .map_or(0.0, |seg| seg.freq_hz),
            _ => 0.0,
        };
        TelemetrySnapshot {
            device: self.device_id.clone(),
            t_s: self.clock_s(),
            mode: self.mode,
            phase,
            freq_hz,
            remaining_s: self.remaining_s(),
            tension_n: self.tension_n,
        }
    }
}
