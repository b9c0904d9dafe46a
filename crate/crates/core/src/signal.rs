//! Amplitude and frequency recovery from marker streams, and frame-difference
//! motion scoring for the camera loop.

use std::io::Write;

use rayon::prelude::*;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::actuation::{median_line, simulate_markers, ActuationConfig, ActuationError, MarkerStream, DEFAULT_SAMPLE_RATE_HZ};

/// Motion score at or above which a camera frame pair counts as movement.
pub const DEFAULT_MOTION_THRESHOLD: f64 = 0.02;
/// Percentile of |distance to median line| reported as the amplitude.
pub const AMPLITUDE_PERCENTILE: f64 = 0.95;
pub const SWEEP_CSV_HEADER: &str = "freq_hz,amplitude_mm,estimated_freq_hz";

const MIN_WINDOW_S: f64 = 1.0;
const MIN_PERIODS: f64 = 2.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SignalError {
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("signal has no dominant non-DC frequency")]
    NoDominantFrequency,
    #[error("frame dimensions differ: {0}x{1} vs {2}x{3}")]
    DimensionMismatch(usize, usize, usize, usize),
    #[error("invalid frame: {0}")]
    InvalidFrame(String),
    #[error(transparent)]
    Actuation(#[from] ActuationError),
    #[error("at {freq_hz} Hz: {source}")]
    AtFrequency {
        freq_hz: f64,
        #[source]
        source: Box<SignalError>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AmplitudeEstimate {
    pub amplitude_mm: f64,
    /// Dominant frequency of the tail offset; 0 when `periodic` is false.
    pub freq_hz: f64,
    pub window_s: f64,
    pub n_samples: usize,
    /// False when the tail offset had no dominant frequency (motionless tail).
    pub periodic: bool,
}

/// Signed distance of the tail marker from the median line, per frame.
pub fn tail_offsets(stream: &MarkerStream) -> Result<Vec<f64>, SignalError> {
    stream
        .frames
        .iter()
        .map(|f| {
            let line = median_line(f.head_a_mm, f.head_b_mm, stream.pivot_mm)?;
            Ok(line.signed_distance(f.tail_mm))
        })
        .collect()
}

/// Linear-interpolated percentile, `q` in [0, 1]. `values` must be non-empty.
fn percentile(values: &mut [f64], q: f64) -> f64 {
    values.sort_by(|a, b| a.total_cmp(b));
    let pos = q * (values.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    values[lo] + (values[hi] - values[lo]) * (pos - lo as f64)
}

pub fn estimate_amplitude(stream: &MarkerStream) -> Result<AmplitudeEstimate, SignalError> {
    let n = stream.frames.len();
    let window_s = stream.duration_s();
    if n < 2 || window_s < MIN_WINDOW_S {
        return Err(SignalError::InsufficientData(format!(
            "window {window_s:.3} s with {n} samples; need at least {MIN_WINDOW_S} s"
        )));
    }
    let offsets = tail_offsets(stream)?;
    let mut magnitudes: Vec<f64> = offsets.iter().map(|d| d.abs()).collect();
    let amplitude_mm = percentile(&mut magnitudes, AMPLITUDE_PERCENTILE);

    let (freq_hz, periodic) = match estimate_frequency(&offsets, stream.sample_rate_hz) {
        Ok(f) => (f, true),
        Err(SignalError::NoDominantFrequency) => (0.0, false),
        Err(e) => return Err(e),
    };
    if periodic && window_s * freq_hz < MIN_PERIODS {
        return Err(SignalError::InsufficientData(format!(
            "{:.2} periods of {freq_hz:.2} Hz in {window_s:.3} s; need at least {MIN_PERIODS}",
            window_s * freq_hz
        )));
    }
    Ok(AmplitudeEstimate {
        amplitude_mm,
        freq_hz,
        window_s,
        n_samples: n,
        periodic,
    })
}

/// Dominant frequency of a uniformly sampled signal.
///
/// Takes the largest non-DC bin of the mean-removed spectrum and refines it
/// with a parabola through that bin and its two neighbours.
pub fn estimate_frequency(series: &[f64], sample_rate_hz: f64) -> Result<f64, SignalError> {
    let n = series.len();
    if n < 4 {
        return Err(SignalError::InsufficientData(format!("{n} samples; need at least 4")));
    }
    if !(sample_rate_hz.is_finite() && sample_rate_hz > 0.0) {
        return Err(SignalError::InsufficientData(format!("sample rate {sample_rate_hz}")));
    }
    let mean = series.iter().sum::<f64>() / n as f64;
    let scale = series.iter().map(|x| x.abs()).fold(0.0, f64::max);
    let spread = series.iter().map(|x| (x - mean).abs()).fold(0.0, f64::max);
    if spread <= 1e-12 * scale.max(1.0) {
        return Err(SignalError::NoDominantFrequency);
    }

    let mut buf: Vec<Complex<f64>> = series.iter().map(|&x| Complex::new(x - mean, 0.0)).collect();
    FftPlanner::new().plan_fft_forward(n).process(&mut buf);
    let mags: Vec<f64> = buf[..=n / 2].iter().map(|c| c.norm()).collect();

    let (peak, _) = mags
        .iter()
        .enumerate()
        .skip(1)
        .fold((1, f64::MIN), |best, (i, &m)| if m > best.1 { (i, m) } else { best });

    let mut bin = peak as f64;
    if peak + 1 < mags.len() {
        let (a, b, c) = (mags[peak - 1], mags[peak], mags[peak + 1]);
        let denom = a - 2.0 * b + c;
        if denom.abs() > f64::EPSILON * b {
            bin += (0.5 * (a - c) / denom).clamp(-0.5, 0.5);
        }
    }
    Ok(bin * sample_rate_hz / n as f64)
}

/// Row-major 8-bit grayscale image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayFrame {
    width: usize,
    height: usize,
    pixels: Vec<u8>,
}

impl GrayFrame {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self, SignalError> {
        if pixels.len() != width * height {
            return Err(SignalError::InvalidFrame(format!(
                "{} pixels for a {width}x{height} frame",
                pixels.len()
            )));
        }
        Ok(Self { width, height, pixels })
    }

    pub fn filled(width: usize, height: usize, value: u8) -> Self {
        Self {
            width,
            height,
            pixels: vec![value; width * height],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn set(&mut self, x: usize, y: usize, value: u8) {
        self.pixels[y * self.width + x] = value;
    }

    /// Fills the `w` x `h` block with top-left corner (`x`, `y`), clipped to the frame.
    pub fn fill_block(&mut self, x: usize, y: usize, w: usize, h: usize, value: u8) {
        for row in y..(y + h).min(self.height) {
            for col in x..(x + w).min(self.width) {
                self.pixels[row * self.width + col] = value;
            }
        }
    }
}

/// Mean absolute pixel difference scaled to [0, 1].
pub fn motion_score(prev: &GrayFrame, curr: &GrayFrame) -> Result<f64, SignalError> {
    if prev.width != curr.width || prev.height != curr.height {
        return Err(SignalError::DimensionMismatch(prev.width, prev.height, curr.width, curr.height));
    }
    if prev.pixels.is_empty() {
        return Ok(0.0);
    }
    let total: u64 = prev
        .pixels
        .iter()
        .zip(&curr.pixels)
        .map(|(&a, &b)| u64::from(a.abs_diff(b)))
        .sum();
    Ok(total as f64 / (prev.pixels.len() as f64 * 255.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub freq_hz: f64,
    pub estimate: AmplitudeEstimate,
}

/// Synthesize and analyse one stream per frequency.
///
/// Each frequency draws noise from its own generator seeded from `seed` and
/// the frequency, so results do not depend on evaluation order.
pub fn sweep_characterization(
    config: &ActuationConfig,
    freqs_hz: &[f64],
    duration_s: f64,
    noise_std_mm: f64,
    seed: u64,
) -> Result<Vec<SweepPoint>, SignalError> {
    let mut points = freqs_hz
        .par_iter()
        .map(|&f| {
            let run = || -> Result<SweepPoint, SignalError> {
                let stream = simulate_markers(
                    config,
                    f,
                    duration_s,
                    DEFAULT_SAMPLE_RATE_HZ,
                    noise_std_mm,
                    stream_seed(seed, f),
                )?;
                Ok(SweepPoint {
                    freq_hz: f,
                    estimate: estimate_amplitude(&stream)?,
                })
            };
            run().map_err(|e| SignalError::AtFrequency {
                freq_hz: f,
                source: Box::new(e),
            })
        })
        .collect::<Result<Vec<_>, _>>()?;
    points.sort_by(|a, b| a.freq_hz.total_cmp(&b.freq_hz));
    Ok(points)
}

fn stream_seed(seed: u64, freq_hz: f64) -> u64 {
    let mut z = seed ^ freq_hz.to_bits().rotate_left(17);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Frequencies `fmin, fmin + step, ...` up to and including `fmax`.
pub fn frequency_grid(fmin: f64, fmax: f64, step: f64) -> Vec<f64> {
    if !step.is_finite() || step <= 0.0 || fmin > fmax {
        return Vec::new();
    }
    let count = ((fmax - fmin) / step + 1e-9).floor() as usize + 1;
    (0..count).map(|i| fmin + i as f64 * step).collect()
}

pub fn write_sweep_csv<W: Write>(points: &[SweepPoint], mut out: W) -> std::io::Result<()> {
    writeln!(out, "{SWEEP_CSV_HEADER}")?;
    for p in points {
        writeln!(
            out,
            "{:.6},{:.6},{:.6}",
            p.freq_hz, p.estimate.amplitude_mm, p.estimate.freq_hz
        )?;
    }
    Ok(())
}
