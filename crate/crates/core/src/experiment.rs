//! Three-stimulus behavioral trials.
//!
//! A parenting pair sees a cross-fostered live tadpole, an inert TadBot and an
//! actuated TadBot, 14 days each, in a per-pair randomized order. Observed
//! care events are appended to one log file per trial and summarized per
//! phase.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use chrono::{DateTime, Days, NaiveDate, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::device::Mode;
use crate::protocol::{format_ts, parse_ts};

pub const PHASE_DAYS: u64 = 14;
pub const TRIAL_DAYS: u64 = 3 * PHASE_DAYS;
pub const CARE_CSV_HEADER: &str = "ts,trial_id,phase,kind,payload";

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("scheduling refused: a biological tadpole must be confirmed fed at least once before the trial starts")]
    FeedingNotConfirmed,
    #[error("invalid identifier `{0}`: use letters, digits, '-', '_' or '.'")]
    InvalidId(String),
    #[error("timestamp regression: event at {} precedes last logged event at {}", format_ts(.event), format_ts(.last))]
    TimestampRegression { last: DateTime<Utc>, event: DateTime<Utc> },
    #[error("event belongs to trial `{event}` but log is for `{log}`")]
    TrialMismatch { log: String, event: String },
    #[error("{path}:{line}: {reason}")]
    CorruptLine { path: PathBuf, line: usize, reason: String },
    #[error("phase index {0} out of range")]
    NoSuchPhase(usize),
    #[error("date arithmetic overflow")]
    DateOverflow,
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Stimulus {
    /// Positive control.
    LiveCrossFoster,
    /// Negative control: TadBot without an actuation assembly.
    InertTadbot,
    /// Experimental group.
    ActuatedTadbot,
}

impl Stimulus {
    pub const ALL: [Stimulus; 3] = [Stimulus::LiveCrossFoster, Stimulus::InertTadbot, Stimulus::ActuatedTadbot];

    pub fn as_str(self) -> &'static str {
        match self {
            Stimulus::LiveCrossFoster => "LIVE_CROSS_FOSTER",
            Stimulus::InertTadbot => "INERT_TADBOT",
            Stimulus::ActuatedTadbot => "ACTUATED_TADBOT",
        }
    }
}

impl fmt::Display for Stimulus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// FNV-1a, 64-bit.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| {
        (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

/// SplitMix64 generator.
#[derive(Debug, Clone)]
pub struct SplitMix64(u64);

impl SplitMix64 {
    pub fn new(state: u64) -> Self {
        Self(state)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.0 = self.0.wrapping_add(0x9e37_79b9_7f4a_7c15);
        let mut z = self.0;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }

    /// Uniform in `0..bound` by rejection, so no modulo bias.
    pub fn below(&mut self, bound: u64) -> u64 {
        let zone = u64::MAX - u64::MAX % bound;
        loop {
            let x = self.next_u64();
            if x < zone {
                return x % bound;
            }
        }
    }
}

/// Stimulus order for a pair.
///
/// The generator state is `fnv1a64(pair_id) ^ seed`; a Fisher-Yates shuffle
/// of `[LIVE_CROSS_FOSTER, INERT_TADBOT, ACTUATED_TADBOT]` draws from it.
pub fn randomize_order(pair_id: &str, seed: u64) -> [Stimulus; 3] {
    let mut rng = SplitMix64::new(fnv1a64(pair_id.as_bytes()) ^ seed);
    let mut order = Stimulus::ALL;
    for i in (1..order.len()).rev() {
        let j = rng.below(i as u64 + 1) as usize;
        order.swap(i, j);
    }
    order
}

fn check_id(id: &str) -> Result<(), ExperimentError> {
    let ok = !id.is_empty()
        && !id.starts_with('.')
        && id.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'));
    if ok {
        Ok(())
    } else {
        Err(ExperimentError::InvalidId(id.to_owned()))
    }
}

/// One stimulus exposure, half-open `[start, end)` in civil days.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhaseSpan {
    pub stimulus: Stimulus,
    pub start: NaiveDate,
    pub end: NaiveDate,
}

impl PhaseSpan {
    pub fn contains(&self, date: NaiveDate) -> bool {
        self.start <= date && date < self.end
    }

    pub fn days(&self) -> i64 {
        (self.end - self.start).num_days()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Trial {
    pub trial_id: String,
    pub pair_id: String,
    pub canister_id: String,
    pub seed: u64,
    pub phases: [PhaseSpan; 3],
}

impl Trial {
    pub fn start(&self) -> NaiveDate {
        self.phases[0].start
    }

    pub fn end(&self) -> NaiveDate {
        self.phases[2].end
    }

    /// Index and span of the phase containing `date`.
    pub fn phase_at(&self, date: NaiveDate) -> Option<(usize, &PhaseSpan)> {
        self.phases.iter().enumerate().find(|(_, p)| p.contains(date))
    }

    pub fn phase_at_time(&self, ts: DateTime<Utc>) -> Option<(usize, &PhaseSpan)> {
        self.phase_at(ts.date_naive())
    }

    /// Lengthens phase `index` by `days` and shifts the later phases, for an
    /// operator waiting on a provisioning bout.
    pub fn extend_phase(&mut self, index: usize, days: u64) -> Result<(), ExperimentError> {
        if index >= self.phases.len() {
            return Err(ExperimentError::NoSuchPhase(index));
        }
        let shift = |d: NaiveDate| d.checked_add_days(Days::new(days)).ok_or(ExperimentError::DateOverflow);
        self.phases[index].end = shift(self.phases[index].end)?;
        for p in &mut self.phases[index + 1..] {
            p.start = shift(p.start)?;
            p.end = shift(p.end)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrialRequest {
    pub pair_id: String,
    pub canister_id: String,
    pub start_date: NaiveDate,
    pub seed: u64,
    /// Operator's confirmation that the pair's biological tadpole was fed at least once.
    pub fed_confirmed: bool,
}

/// Trial id derived from pair and start date: `<pair>-<YYYYMMDD>`.
pub fn trial_id_for(pair_id: &str, start: NaiveDate) -> String {
    format!("{pair_id}-{}", start.format("%Y%m%d"))
}

pub fn schedule_trial(req: &TrialRequest) -> Result<Trial, ExperimentError> {
    check_id(&req.pair_id)?;
    check_id(&req.canister_id)?;
    if !req.fed_confirmed {
        return Err(ExperimentError::FeedingNotConfirmed);
    }
    let order = randomize_order(&req.pair_id, req.seed);
    let mut start = req.start_date;
    let mut spans = Vec::with_capacity(3);
    for stimulus in order {
        let end = start
            .checked_add_days(Days::new(PHASE_DAYS))
            .ok_or(ExperimentError::DateOverflow)?;
        spans.push(PhaseSpan { stimulus, start, end });
        start = end;
    }
    Ok(Trial {
        trial_id: trial_id_for(&req.pair_id, req.start_date),
        pair_id: req.pair_id.clone(),
        canister_id: req.canister_id.clone(),
        seed: req.seed,
        phases: spans.try_into().expect("three phases"),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum CareEventKind {
    FatherVisit,
    FatherCall,
    MotherVisit,
    EggProvision,
    TadpoleFed,
    MotionDetected,
    ModeActivated,
}

impl CareEventKind {
    pub const ALL: [CareEventKind; 7] = [
        CareEventKind::FatherVisit,
        CareEventKind::FatherCall,
        CareEventKind::MotherVisit,
        CareEventKind::EggProvision,
        CareEventKind::TadpoleFed,
        CareEventKind::MotionDetected,
        CareEventKind::ModeActivated,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            CareEventKind::FatherVisit => "FATHER_VISIT",
            CareEventKind::FatherCall => "FATHER_CALL",
            CareEventKind::MotherVisit => "MOTHER_VISIT",
            CareEventKind::EggProvision => "EGG_PROVISION",
            CareEventKind::TadpoleFed => "TADPOLE_FED",
            CareEventKind::MotionDetected => "MOTION_DETECTED",
            CareEventKind::ModeActivated => "MODE_ACTIVATED",
        }
    }
}

impl fmt::Display for CareEventKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for CareEventKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| format!("unknown care event kind `{s}`"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CareEvent {
    #[serde(with = "iso_ts")]
    pub ts: DateTime<Utc>,
    pub trial_id: String,
    pub kind: CareEventKind,
    /// Free-form annotation. MODE_ACTIVATED events carry `mode=<mode>`.
    #[serde(default)]
    pub payload: String,
}

impl CareEvent {
    pub fn new(ts: DateTime<Utc>, trial_id: impl Into<String>, kind: CareEventKind, payload: impl Into<String>) -> Self {
        Self {
            ts,
            trial_id: trial_id.into(),
            kind,
            payload: payload.into(),
        }
    }

    pub fn mode_activated(ts: DateTime<Utc>, trial_id: impl Into<String>, mode: Mode, device: &str) -> Self {
        Self::new(ts, trial_id, CareEventKind::ModeActivated, format!("mode={mode} device={device}"))
    }

    pub fn is_begging_activation(&self) -> bool {
        self.kind == CareEventKind::ModeActivated && self.payload.split_whitespace().any(|w| w == "mode=begging")
    }

    pub fn to_line(&self) -> String {
        let mut s = serde_json::to_string(self).expect("care events always serialize");
        s.push('\n');
        s
    }
}

mod iso_ts {
    use chrono::{DateTime, Utc};
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(ts: &DateTime<Utc>, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&super::format_ts(ts))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DateTime<Utc>, D::Error> {
        let raw = String::deserialize(d)?;
        super::parse_ts(&raw).map_err(serde::de::Error::custom)
    }
}

/// Conventional log file for a trial inside `dir`.
pub fn log_path(dir: &Path, trial_id: &str) -> PathBuf {
    dir.join(format!("trial-{trial_id}.log"))
}

/// Parses a log strictly, failing on the first corrupt line.
pub fn read_log(path: &Path) -> Result<Vec<CareEvent>, ExperimentError> {
    let reader = BufReader::new(File::open(path)?);
    let mut events: Vec<CareEvent> = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let corrupt = |reason: String| ExperimentError::CorruptLine {
            path: path.to_owned(),
            line: i + 1,
            reason,
        };
        if line.trim().is_empty() {
            return Err(corrupt("blank line".into()));
        }
        let event: CareEvent = serde_json::from_str(&line).map_err(|e| corrupt(e.to_string()))?;
        if let Some(last) = events.last() {
            if event.ts < last.ts {
                return Err(corrupt(format!("timestamp {} precedes {}", format_ts(&event.ts), format_ts(&last.ts))));
            }
        }
        events.push(event);
    }
    Ok(events)
}

/// Append-only care-event log for one trial, optionally backed by a file.
#[derive(Debug)]
pub struct CareLog {
    trial_id: String,
    events: Vec<CareEvent>,
    file: Option<File>,
}

impl CareLog {
    pub fn in_memory(trial_id: impl Into<String>) -> Self {
        Self {
            trial_id: trial_id.into(),
            events: Vec::new(),
            file: None,
        }
    }

    /// Opens or creates `path`, loading existing events.
    pub fn open(path: &Path, trial_id: impl Into<String>) -> Result<Self, ExperimentError> {
        let trial_id = trial_id.into();
        check_id(&trial_id)?;
        let events = if path.exists() { read_log(path)? } else { Vec::new() };
        if let Some(e) = events.iter().find(|e| e.trial_id != trial_id) {
            return Err(ExperimentError::TrialMismatch {
                log: trial_id,
                event: e.trial_id.clone(),
            });
        }
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(Self {
            trial_id,
            events,
            file: Some(file),
        })
    }

    pub fn trial_id(&self) -> &str {
        &self.trial_id
    }

    pub fn events(&self) -> &[CareEvent] {
        &self.events
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn last_ts(&self) -> Option<DateTime<Utc>> {
        self.events.last().map(|e| e.ts)
    }

    /// Appends `event`; when file-backed, the line is synced before returning.
    pub fn record_event(&mut self, event: CareEvent) -> Result<(), ExperimentError> {
        if event.trial_id != self.trial_id {
            return Err(ExperimentError::TrialMismatch {
                log: self.trial_id.clone(),
                event: event.trial_id,
            });
        }
        if let Some(last) = self.last_ts() {
            if event.ts < last {
                return Err(ExperimentError::TimestampRegression { last, event: event.ts });
            }
        }
        if let Some(file) = &mut self.file {
            file.write_all(event.to_line().as_bytes())?;
            file.sync_data()?;
        }
        self.events.push(event);
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhaseSummary {
    pub index: usize,
    pub stimulus: Stimulus,
    pub start: NaiveDate,
    pub end: NaiveDate,
    pub counts: BTreeMap<CareEventKind, u64>,
    pub begging_activations: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CareSummary {
    pub trial_id: String,
    pub phases: Vec<PhaseSummary>,
    pub unphased: BTreeMap<CareEventKind, u64>,
}

impl CareSummary {
    /// Count for a bucket; `phase` None means unphased.
    pub fn count(&self, phase: Option<usize>, kind: CareEventKind) -> u64 {
        let map = match phase {
            Some(i) => &self.phases[i].counts,
            None => &self.unphased,
        };
        map.get(&kind).copied().unwrap_or(0)
    }

    pub fn total(&self) -> u64 {
        self.phases
            .iter()
            .flat_map(|p| p.counts.values())
            .chain(self.unphased.values())
            .sum()
    }
}

fn zero_counts() -> BTreeMap<CareEventKind, u64> {
    CareEventKind::ALL.into_iter().map(|k| (k, 0)).collect()
}

/// Buckets the trial's events by phase. Events of other trials are ignored.
pub fn summarize(events: &[CareEvent], trial: &Trial) -> CareSummary {
    let mut phases: Vec<PhaseSummary> = trial
        .phases
        .iter()
        .enumerate()
        .map(|(index, p)| PhaseSummary {
            index,
            stimulus: p.stimulus,
            start: p.start,
            end: p.end,
            counts: zero_counts(),
            begging_activations: 0,
        })
        .collect();
    let mut unphased = zero_counts();
    for e in events.iter().filter(|e| e.trial_id == trial.trial_id) {
        match trial.phase_at_time(e.ts) {
            Some((i, _)) => {
                *phases[i].counts.entry(e.kind).or_default() += 1;
                if e.is_begging_activation() {
                    phases[i].begging_activations += 1;
                }
            }
            None => *unphased.entry(e.kind).or_default() += 1,
        }
    }
    CareSummary {
        trial_id: trial.trial_id.clone(),
        phases,
        unphased,
    }
}

/// Writes `ts,trial_id,phase,kind,payload`; phase is the stimulus name or `UNPHASED`.
pub fn export_csv<W: Write>(events: &[CareEvent], trial: &Trial, out: W) -> Result<(), ExperimentError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(CARE_CSV_HEADER.split(','))?;
    for e in events.iter().filter(|e| e.trial_id == trial.trial_id) {
        let phase = trial.phase_at_time(e.ts).map_or("UNPHASED", |(_, p)| p.stimulus.as_str());
        w.write_record([format_ts(&e.ts).as_str(), &e.trial_id, phase, e.kind.as_str(), &e.payload])?;
    }
    w.flush()?;
    Ok(())
}

/// What an operator asks a device to do.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RequestedAction {
    Activate(Mode),
    Stop,
    SetTension,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum GuardDecision {
    Allow,
    Deny { reason: String },
}

impl GuardDecision {
    pub fn is_allowed(&self) -> bool {
        matches!(self, GuardDecision::Allow)
    }
}

/// Activation is only meaningful while the pair is exposed to the actuated
/// TadBot. Stop is always allowed.
pub fn guard_command(trial: Option<&Trial>, now: DateTime<Utc>, requested: RequestedAction) -> GuardDecision {
    match requested {
        RequestedAction::Stop | RequestedAction::SetTension => GuardDecision::Allow,
        RequestedAction::Activate(mode) => {
            let Some(trial) = trial else {
                return GuardDecision::Deny {
                    reason: "no active trial for this device".into(),
                };
            };
            match trial.phase_at_time(now) {
                Some((_, p)) if p.stimulus == Stimulus::ActuatedTadbot => GuardDecision::Allow,
                Some((i, p)) => GuardDecision::Deny {
                    reason: format!(
                        "activate {mode} denied: trial {} is in phase {} ({})",
                        trial.trial_id,
                        i + 1,
                        p.stimulus
                    ),
                },
                None => GuardDecision::Deny {
                    reason: format!(
                        "activate {mode} denied: {} is outside trial {} ({} to {})",
                        format_ts(&now),
                        trial.trial_id,
                        trial.start(),
                        trial.end()
                    ),
                },
            }
        }
    }
}
