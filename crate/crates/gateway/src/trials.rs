//! Persistent trials and their care-event logs.
//!
//! `trials.json` in the data directory holds every scheduled trial; each trial
//! has an append-only `trial-<id>.log`. Both are reloaded on start.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use tadbot_core::experiment::{log_path, schedule_trial, CareEvent, CareLog, ExperimentError, Trial, TrialRequest};

use crate::error::ApiError;

pub const TRIALS_FILE: &str = "trials.json";

#[derive(Debug)]
pub struct TrialStore {
    dir: PathBuf,
    trials: Vec<Trial>,
    logs: HashMap<String, CareLog>,
}

impl TrialStore {
    pub fn open(dir: &Path) -> Result<Self, ExperimentError> {
        std::fs::create_dir_all(dir)?;
        let path = dir.join(TRIALS_FILE);
        let trials: Vec<Trial> = if path.exists() {
            let text = std::fs::read_to_string(&path)?;
            serde_json::from_str(&text).map_err(|e| ExperimentError::CorruptLine {
                path: path.clone(),
                line: e.line(),
                reason: e.to_string(),
            })?
        } else {
            Vec::new()
        };
        let mut logs = HashMap::new();
        for t in &trials {
            logs.insert(t.trial_id.clone(), CareLog::open(&log_path(dir, &t.trial_id), t.trial_id.clone())?);
        }
        Ok(Self {
            dir: dir.to_owned(),
            trials,
            logs,
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn trials(&self) -> &[Trial] {
        &self.trials
    }

    pub fn get(&self, trial_id: &str) -> Option<&Trial> {
        self.trials.iter().find(|t| t.trial_id == trial_id)
    }

    pub fn events(&self, trial_id: &str) -> &[CareEvent] {
        self.logs.get(trial_id).map_or(&[], |l| l.events())
    }

    pub fn create(&mut self, req: &TrialRequest) -> Result<Trial, ApiError> {
        let trial = schedule_trial(req).map_err(|e| match e {
            ExperimentError::FeedingNotConfirmed => ApiError::Unprocessable(e.to_string()),
            other => ApiError::BadRequest(other.to_string()),
        })?;
        if self.get(&trial.trial_id).is_some() {
            return Err(ApiError::Conflict(format!("trial {} already exists", trial.trial_id)));
        }
        let log = CareLog::open(&log_path(&self.dir, &trial.trial_id), trial.trial_id.clone())
            .map_err(|e| ApiError::Internal(e.to_string()))?;
        self.trials.push(trial.clone());
        if let Err(e) = self.persist() {
            self.trials.pop();
            return Err(ApiError::Internal(e.to_string()));
        }
        self.logs.insert(trial.trial_id.clone(), log);
        Ok(trial)
    }

    fn persist(&self) -> std::io::Result<()> {
        let tmp = self.dir.join(format!("{TRIALS_FILE}.tmp"));
        std::fs::write(&tmp, serde_json::to_vec_pretty(&self.trials).expect("trials serialize"))?;
        std::fs::rename(tmp, self.dir.join(TRIALS_FILE))
    }

    /// The pair's trial whose span contains `now`; otherwise the pair's most
    /// recently started trial, so a guard can explain why it is out of span.
    pub fn trial_for_pair(&self, pair_id: &str, now: DateTime<Utc>) -> Option<&Trial> {
        let date = now.date_naive();
        let mut of_pair = self.trials.iter().filter(|t| t.pair_id == pair_id);
        of_pair
            .clone()
            .filter(|t| t.start() <= date && date < t.end())
            .max_by_key(|t| t.start())
            .or_else(|| of_pair.by_ref().max_by_key(|t| t.start()))
    }

    pub fn active_trial(&self, pair_id: &str, now: DateTime<Utc>) -> Option<&Trial> {
        self.trial_for_pair(pair_id, now)
            .filter(|t| t.phase_at_time(now).is_some())
    }

    pub fn record(&mut self, event: CareEvent) -> Result<(), ExperimentError> {
        let log = self
            .logs
            .get_mut(&event.trial_id)
            .ok_or_else(|| ExperimentError::TrialMismatch {
                log: "<none>".into(),
                event: event.trial_id.clone(),
            })?;
        log.record_event(event)
    }
}
