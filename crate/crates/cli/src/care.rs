//! `summarize` and `export`: locate the trial a care log belongs to, then
//! count or list its events by phase.

use std::io::{self, Write};
use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use tadbot_core::experiment::{
    export_csv, read_log, schedule_trial, summarize as summarize_events, CareEvent, CareEventKind, CareSummary, Trial,
    TrialRequest,
};

use crate::{output, runtime, Failure, TrialSource};

const TRIALS_FILE: &str = "trials.json";

fn trial_id_from_file_name(path: &Path) -> Option<String> {
    let name = path.file_name()?.to_str()?;
    Some(name.strip_prefix("trial-")?.strip_suffix(".log")?.to_owned())
}

/// Splits `<pair>-<YYYYMMDD>` into its parts.
fn parse_trial_id(id: &str) -> Option<(&str, NaiveDate)> {
    let (pair, date) = id.rsplit_once('-')?;
    let date = NaiveDate::parse_from_str(date, "%Y%m%d").ok()?;
    (!pair.is_empty()).then_some((pair, date))
}

fn load(source: &TrialSource) -> Result<(Vec<CareEvent>, Trial), Failure> {
    if !source.log.is_file() {
        return Err(Failure::Runtime(format!("{}: no such log file", source.log.display())));
    }
    let events = read_log(&source.log).map_err(runtime)?;
    let trial_id = source
        .trial
        .clone()
        .or_else(|| trial_id_from_file_name(&source.log))
        .or_else(|| events.first().map(|e| e.trial_id.clone()))
        .ok_or_else(|| Failure::Usage("cannot tell which trial the log belongs to; pass --trial".into()))?;

    let trial = match source.seed {
        Some(seed) => {
            let (pair, start) = parse_trial_id(&trial_id)
                .ok_or_else(|| Failure::Usage(format!("trial id `{trial_id}` is not <pair>-<YYYYMMDD>")))?;
            schedule_trial(&TrialRequest {
                pair_id: pair.to_owned(),
                canister_id: "unrecorded".into(),
                start_date: start,
                seed,
                fed_confirmed: true,
            })
            .map_err(runtime)?
        }
        None => {
            let path = match &source.trials {
                Some(p) => p.clone(),
                None => source
                    .log
                    .parent()
                    .map_or_else(|| PathBuf::from(TRIALS_FILE), |d| d.join(TRIALS_FILE)),
            };
            let text = std::fs::read_to_string(&path).map_err(|e| {
                Failure::Runtime(format!(
                    "{}: {e} (pass --trials or --seed to define trial {trial_id})",
                    path.display()
                ))
            })?;
            let trials: Vec<Trial> =
                serde_json::from_str(&text).map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))?;
            trials
                .into_iter()
                .find(|t| t.trial_id == trial_id)
                .ok_or_else(|| Failure::Runtime(format!("trial {trial_id} not found in {}", path.display())))?
        }
    };
    Ok((events, trial))
}

pub fn summarize(source: &TrialSource, csv: bool) -> Result<(), Failure> {
    let (events, trial) = load(source)?;
    let summary = summarize_events(&events, &trial);
    let mut out = io::stdout().lock();
    let written = if csv {
        write_csv(&summary, &mut out)
    } else {
        write_table(&summary, &mut out)
    };
    written.and_then(|_| out.flush()).map_err(runtime)
}

pub fn export(source: &TrialSource, path: Option<&Path>) -> Result<(), Failure> {
    let (events, trial) = load(source)?;
    let mut out = output(path)?;
    export_csv(&events, &trial, &mut out).map_err(runtime)?;
    out.flush().map_err(runtime)
}

fn rows(summary: &CareSummary) -> Vec<Vec<String>> {
    let mut rows: Vec<Vec<String>> = summary
        .phases
        .iter()
        .map(|p| {
            let mut r = vec![
                (p.index + 1).to_string(),
                p.stimulus.to_string(),
                p.start.to_string(),
                p.end.to_string(),
            ];
            r.extend(CareEventKind::ALL.iter().map(|k| p.counts.get(k).copied().unwrap_or(0).to_string()));
            r.push(p.begging_activations.to_string());
            r
        })
        .collect();
    let mut unphased = vec!["-".to_owned(), "UNPHASED".to_owned(), "-".to_owned(), "-".to_owned()];
    unphased.extend(CareEventKind::ALL.iter().map(|k| summary.count(None, *k).to_string()));
    unphased.push("-".to_owned());
    rows.push(unphased);
    rows
}

fn header() -> Vec<String> {
    let mut h: Vec<String> = ["phase", "stimulus", "start", "end"].map(String::from).to_vec();
    h.extend(CareEventKind::ALL.iter().map(|k| k.as_str().to_owned()));
    h.push("BEGGING_ACTIVATIONS".to_owned());
    h
}

/// One row per phase plus an `UNPHASED` row; columns are the event kinds.
pub fn write_csv<W: Write>(summary: &CareSummary, mut out: W) -> io::Result<()> {
    writeln!(out, "{}", header().join(","))?;
    for r in rows(summary) {
        writeln!(out, "{}", r.join(","))?;
    }
    Ok(())
}

pub fn write_table<W: Write>(summary: &CareSummary, mut out: W) -> io::Result<()> {
    let header = header();
    let rows = rows(summary);
    let widths: Vec<usize> = (0..header.len())
        .map(|c| rows.iter().map(|r| r[c].len()).chain([header[c].len()]).max().unwrap_or(0))
        .collect();
    writeln!(out, "trial {}  ({} events)", summary.trial_id, summary.total())?;
    for r in std::iter::once(&header).chain(rows.iter()) {
        let line: Vec<String> = r.iter().zip(&widths).map(|(v, w)| format!("{v:<w$}")).collect();
        writeln!(out, "{}", line.join("  ").trim_end())?;
    }
    Ok(())
}
