//! Crank -> tendon -> lever -> tail actuation chain.
//!
//! The motor turns a crank whose pin pulls a tendon; the tendon rotates a lever
//! about a dowel-pin pivot and the lever swings the tail. An elastic band
//! restores the lever and a tensioner centres it, so the lever rests at zero
//! angle when the tendon sits at half its travel.
//!
//! Inertia of the silicone tail adds displacement above roughly 10 Hz without
//! a resonance peak. That is folded into a logistic dynamic gain that rises
//! from 1 (quasi-static) to `gain_max` (plateau).

use std::f64::consts::PI;
use std::io::{Read, Write};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{Line, Point};

/// Spacing of the two head markers, mm.
pub const HEAD_MARKER_SPACING_MM: f64 = 4.2;
/// Distance from the head-marker bisection point to the tail pivot, mm.
pub const HEAD_TO_PIVOT_MM: f64 = 12.0;
/// Camera frame rate used for characterization.
pub const DEFAULT_SAMPLE_RATE_HZ: f64 = 240.0;

pub const MARKER_CSV_HEADER: &str = "t_s,head_a_x,head_a_y,head_b_x,head_b_y,tail_x,tail_y,pivot_x,pivot_y";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ActuationError {
    #[error("invalid actuation config: {0}")]
    InvalidConfig(String),
    #[error("{what} = {value} is outside the valid domain ({domain})")]
    Domain {
        what: &'static str,
        value: f64,
        domain: String,
    },
    #[error("sample rate {sample_rate_hz} Hz cannot represent a {freq_hz} Hz tail (needs at least {needed} Hz)")]
    Undersampled {
        freq_hz: f64,
        sample_rate_hz: f64,
        needed: f64,
    },
    #[error("degenerate geometry: {0}")]
    Degenerate(&'static str),
    #[error("marker csv: {0}")]
    Csv(String),
}

/// Geometric and dynamic constants of the actuation chain.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ActuationConfig {
    pub crank_radius_mm: f64,
    /// Pivot to tendon attachment on the lever.
    pub tendon_moment_arm_mm: f64,
    /// Pivot to tail tip.
    pub tail_arm_mm: f64,
    pub gain_max: f64,
    pub gain_midpoint_hz: f64,
    pub gain_width_hz: f64,
    /// Sleeve buckling bound on tendon tension.
    pub buckling_tension_limit_n: f64,
}

impl Default for ActuationConfig {
    fn default() -> Self {
        Self {
            crank_radius_mm: 1.0,
            tendon_moment_arm_mm: 3.0,
            tail_arm_mm: 8.0,
            gain_max: 1.9102,
            gain_midpoint_hz: 11.5,
            gain_width_hz: 1.5,
            buckling_tension_limit_n: 2.0,
        }
    }
}

impl ActuationConfig {
    pub fn validate(&self) -> Result<(), ActuationError> {
        let bad = |msg: &str| Err(ActuationError::InvalidConfig(msg.to_owned()));
        let lengths = [self.crank_radius_mm, self.tendon_moment_arm_mm, self.tail_arm_mm];
        if lengths.iter().any(|l| !(l.is_finite() && *l > 0.0)) {
            return bad("all lengths must be finite and > 0");
        }
        if !(self.gain_max.is_finite() && self.gain_max >= 1.0) {
            return bad("gain_max must be >= 1");
        }
        if !(self.gain_width_hz.is_finite() && self.gain_width_hz > 0.0) {
            return bad("gain_width_hz must be > 0");
        }
        if !self.gain_midpoint_hz.is_finite() {
            return bad("gain_midpoint_hz must be finite");
        }
        if self.crank_radius_mm >= self.tendon_moment_arm_mm {
            return bad("crank_radius_mm must be smaller than tendon_moment_arm_mm");
        }
        if !(self.buckling_tension_limit_n.is_finite() && self.buckling_tension_limit_n >= 0.0) {
            return bad("buckling_tension_limit_n must be finite and >= 0");
        }
        Ok(())
    }

    /// Largest lever excursion either side of rest, rad.
    pub fn max_lever_angle(&self) -> f64 {
        self.crank_radius_mm / self.tendon_moment_arm_mm
    }

    /// Tail amplitude without dynamic gain, mm.
    pub fn quasi_static_amplitude(&self) -> f64 {
        self.tail_arm_mm * self.max_lever_angle().sin()
    }

    /// Logistic dynamic gain, 1 at low frequency rising to `gain_max`.
    pub fn dynamic_gain(&self, freq_hz: f64) -> f64 {
        let z = (freq_hz - self.gain_midpoint_hz) / self.gain_width_hz;
        1.0 + (self.gain_max - 1.0) / (1.0 + (-z).exp())
    }
}

/// Tendon pull for a crank angle: `r (1 - cos θ)`, in `[0, 2r]`.
pub fn tendon_displacement(config: &ActuationConfig, crank_angle_rad: f64) -> f64 {
    config.crank_radius_mm * (1.0 - crank_angle_rad.cos())
}

/// Lever angle for a tendon displacement, zero at the tensioner-centred rest `s = r`.
pub fn lever_angle(config: &ActuationConfig, tendon_disp_mm: f64) -> Result<f64, ActuationError> {
    let r = config.crank_radius_mm;
    // Allow rounding noise from `tendon_displacement` at the ends of travel.
    let slack = 1e-12 * r;
    if !(tendon_disp_mm >= -slack && tendon_disp_mm <= 2.0 * r + slack) {
        return Err(ActuationError::Domain {
            what: "tendon displacement",
            value: tendon_disp_mm,
            domain: format!("[0, {}] mm", 2.0 * r),
        });
    }
    let s = tendon_disp_mm.clamp(0.0, 2.0 * r);
    Ok((s - r) / config.tendon_moment_arm_mm)
}

/// Peak lateral tail-tip displacement at a drive frequency.
pub fn tail_amplitude(config: &ActuationConfig, freq_hz: f64) -> Result<f64, ActuationError> {
    if !(freq_hz.is_finite() && freq_hz >= 0.0) {
        return Err(ActuationError::Domain {
            what: "frequency",
            value: freq_hz,
            domain: "[0, inf) Hz".into(),
        });
    }
    Ok(config.quasi_static_amplitude() * config.dynamic_gain(freq_hz))
}

/// Signed lateral tail offset from the median line at time `t_s` while driven at `freq_hz`.
///
/// The crank starts at angle zero, so the tail sits at its full negative
/// excursion at `t = 0` and at every whole period after.
pub fn tail_lateral_offset(config: &ActuationConfig, freq_hz: f64, t_s: f64) -> f64 {
    let theta = 2.0 * PI * freq_hz * t_s;
    let s = tendon_displacement(config, theta);
    let phi = (s - config.crank_radius_mm) / config.tendon_moment_arm_mm;
    config.dynamic_gain(freq_hz) * config.tail_arm_mm * phi.sin()
}

/// Returns the line from the head-marker bisection point to the tail pivot.
pub fn median_line(head_a: Point, head_b: Point, pivot: Point) -> Result<Line, ActuationError> {
    if head_a == head_b {
        return Err(ActuationError::Degenerate("head markers coincide"));
    }
    let mid = head_a.midpoint(head_b);
    if mid == pivot {
        return Err(ActuationError::Degenerate("pivot coincides with head bisection point"));
    }
    Ok(Line { from: mid, to: pivot })
}

/// One camera sample of the three markers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MarkerFrame {
    pub t_s: f64,
    pub head_a_mm: Point,
    pub head_b_mm: Point,
    pub tail_mm: Point,
}

impl MarkerFrame {
    pub fn translate(&self, dx: f64, dy: f64) -> MarkerFrame {
        MarkerFrame {
            t_s: self.t_s,
            head_a_mm: self.head_a_mm.translate(dx, dy),
            head_b_mm: self.head_b_mm.translate(dx, dy),
            tail_mm: self.tail_mm.translate(dx, dy),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarkerStream {
    pub sample_rate_hz: f64,
    pub frames: Vec<MarkerFrame>,
    pub pivot_mm: Point,
}

impl MarkerStream {
    pub fn duration_s(&self) -> f64 {
        self.frames.len() as f64 / self.sample_rate_hz
    }

    /// Rigidly shifts every marker and the pivot.
    pub fn translate(&self, dx: f64, dy: f64) -> MarkerStream {
        MarkerStream {
            sample_rate_hz: self.sample_rate_hz,
            frames: self.frames.iter().map(|f| f.translate(dx, dy)).collect(),
            pivot_mm: self.pivot_mm.translate(dx, dy),
        }
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), ActuationError> {
        let mut w = csv::Writer::from_writer(out);
        let err = |e: csv::Error| ActuationError::Csv(e.to_string());
        w.write_record(MARKER_CSV_HEADER.split(',')).map_err(err)?;
        for f in &self.frames {
            let row = [
                f.t_s,
                f.head_a_mm.x,
                f.head_a_mm.y,
                f.head_b_mm.x,
                f.head_b_mm.y,
                f.tail_mm.x,
                f.tail_mm.y,
                self.pivot_mm.x,
                self.pivot_mm.y,
            ];
            w.write_record(row.iter().map(|v| v.to_string())).map_err(err)?;
        }
        w.flush().map_err(|e| ActuationError::Csv(e.to_string()))
    }

    /// Reads a stream written by [`MarkerStream::write_csv`]. The sample rate
    /// is not stored in the file and must be supplied.
    pub fn read_csv<R: Read>(input: R, sample_rate_hz: f64) -> Result<MarkerStream, ActuationError> {
        let mut r = csv::Reader::from_reader(input);
        let header = r.headers().map_err(|e| ActuationError::Csv(e.to_string()))?;
        if header.iter().collect::<Vec<_>>().join(",") != MARKER_CSV_HEADER {
            return Err(ActuationError::Csv(format!("unexpected header `{}`", header.iter().collect::<Vec<_>>().join(","))));
        }
        let mut frames = Vec::new();
        let mut pivot = None;
        for (i, rec) in r.records().enumerate() {
            let rec = rec.map_err(|e| ActuationError::Csv(e.to_string()))?;
            let vals = rec
                .iter()
                .map(|s| s.trim().parse::<f64>())
                .collect::<Result<Vec<_>, _>>()
                .map_err(|e| ActuationError::Csv(format!("row {}: {e}", i + 1)))?;
            if vals.len() != 9 {
                return Err(ActuationError::Csv(format!("row {}: expected 9 fields", i + 1)));
            }
            frames.push(MarkerFrame {
                t_s: vals[0],
                head_a_mm: Point::new(vals[1], vals[2]),
                head_b_mm: Point::new(vals[3], vals[4]),
                tail_mm: Point::new(vals[5], vals[6]),
            });
            pivot.get_or_insert(Point::new(vals[7], vals[8]));
        }
        Ok(MarkerStream {
            sample_rate_hz,
            frames,
            pivot_mm: pivot.unwrap_or_default(),
        })
    }
}

/// Synthesizes a camera view of the tail driven at `freq_hz`.
///
/// The head bisection point sits at the origin with the body axis along +x;
/// head markers are static and symmetric about the axis. Every marker gets
/// isotropic Gaussian positional noise whose 2-D RMS displacement is
/// `noise_std_mm` (each axis `noise_std_mm / sqrt 2`), drawn from a generator
/// seeded with `seed`.
pub fn simulate_markers(
    config: &ActuationConfig,
    freq_hz: f64,
    duration_s: f64,
    sample_rate_hz: f64,
    noise_std_mm: f64,
    seed: u64,
) -> Result<MarkerStream, ActuationError> {
    config.validate()?;
    if !(freq_hz.is_finite() && freq_hz >= 0.0) {
        return Err(ActuationError::Domain {
            what: "frequency",
            value: freq_hz,
            domain: "[0, inf) Hz".into(),
        });
    }
    if !(duration_s.is_finite() && duration_s > 0.0) {
        return Err(ActuationError::Domain {
            what: "duration",
            value: duration_s,
            domain: "(0, inf) s".into(),
        });
    }
    if !(sample_rate_hz.is_finite() && sample_rate_hz > 0.0) {
        return Err(ActuationError::Domain {
            what: "sample rate",
            value: sample_rate_hz,
            domain: "(0, inf) Hz".into(),
        });
    }
    if sample_rate_hz < 2.0 * freq_hz {
        return Err(ActuationError::Undersampled {
            freq_hz,
            sample_rate_hz,
            needed: 2.0 * freq_hz,
        });
    }
    if !(noise_std_mm.is_finite() && noise_std_mm >= 0.0) {
        return Err(ActuationError::Domain {
            what: "noise std",
            value: noise_std_mm,
            domain: "[0, inf) mm".into(),
        });
    }

    let n = (duration_s * sample_rate_hz).round() as usize;
    if n == 0 {
        return Err(ActuationError::Domain {
            what: "duration",
            value: duration_s,
            domain: "at least one frame".into(),
        });
    }
    let half = HEAD_MARKER_SPACING_MM / 2.0;
    let pivot = Point::new(HEAD_TO_PIVOT_MM, 0.0);
    let ell = config.tail_arm_mm;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, noise_std_mm / std::f64::consts::SQRT_2).expect("std validated above");
    let mut jitter = |p: Point| {
        if noise_std_mm == 0.0 {
            p
        } else {
            p.translate(noise.sample(&mut rng), noise.sample(&mut rng))
        }
    };

    let frames = (0..n)
        .map(|k| {
            let t = k as f64 / sample_rate_hz;
            let lateral = tail_lateral_offset(config, freq_hz, t);
            // Tip stays on the arc of radius `tail_arm_mm` about the pivot.
            let along = (ell * ell - lateral * lateral).max(0.0).sqrt();
            MarkerFrame {
                t_s: t,
                head_a_mm: jitter(Point::new(0.0, half)),
                head_b_mm: jitter(Point::new(0.0, -half)),
                tail_mm: jitter(Point::new(pivot.x + along, lateral)),
            }
        })
        .collect();

    Ok(MarkerStream {
        sample_rate_hz,
        frames,
        pivot_mm: pivot,
    })
}
