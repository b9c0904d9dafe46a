//! Totally ordered in-memory record of everything the gateway saw in this run.
//!
//! Sequence numbers start at 1 and are gap-free. A new epoch id is minted per
//! process start so `(epoch, seq)` stays unambiguous across restarts.

use std::sync::RwLock;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use tadbot_core::experiment::CareEvent;
use tadbot_core::protocol::{encode, WireMessage};
use tokio::sync::watch;

#[derive(Debug, Clone, PartialEq)]
pub enum RecordBody {
    Wire(WireMessage),
    Care(CareEvent),
}

#[derive(Debug, Clone, PartialEq)]
pub struct EventRecord {
    pub seq: u64,
    pub received: DateTime<Utc>,
    pub body: RecordBody,
}

impl EventRecord {
    /// `wire` or `care`.
    pub fn kind(&self) -> &'static str {
        match self.body {
            RecordBody::Wire(_) => "wire",
            RecordBody::Care(_) => "care",
        }
    }

    /// The record's payload as one protocol or care-log line, without the newline.
    pub fn line(&self) -> String {
        let mut s = match &self.body {
            RecordBody::Wire(m) => String::from_utf8(encode(m).expect("stored messages are valid")).unwrap(),
            RecordBody::Care(e) => e.to_line(),
        };
        s.pop();
        s
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EventCounts {
    pub total: u64,
    pub motion: u64,
    pub telemetry: u64,
    pub commands: u64,
    pub acks: u64,
    pub care: u64,
}

#[derive(Debug)]
pub struct EventStore {
    epoch: String,
    records: RwLock<Vec<EventRecord>>,
    head: watch::Sender<u64>,
}

impl EventStore {
    pub fn new(epoch: impl Into<String>) -> Self {
        let (head, _) = watch::channel(0);
        Self {
            epoch: epoch.into(),
            records: RwLock::new(Vec::new()),
            head,
        }
    }

    pub fn epoch(&self) -> &str {
        &self.epoch
    }

    pub fn append(&self, received: DateTime<Utc>, body: RecordBody) -> EventRecord {
        let record = {
            let mut records = self.records.write().unwrap();
            let record = EventRecord {
                seq: records.len() as u64 + 1,
                received,
                body,
            };
            records.push(record.clone());
            // Publish while holding the lock so watchers never see seq out of order.
            self.head.send_replace(record.seq);
            record
        };
        record
    }

    pub fn last_seq(&self) -> u64 {
        *self.head.borrow()
    }

    /// Every record with `seq > since`, in order.
    pub fn since(&self, since: u64) -> Vec<EventRecord> {
        let records = self.records.read().unwrap();
        let from = (since as usize).min(records.len());
        records[from..].to_vec()
    }

    pub fn find(&self, pred: impl Fn(&EventRecord) -> bool) -> Option<EventRecord> {
        self.records.read().unwrap().iter().find(|r| pred(r)).cloned()
    }

    pub fn watch(&self) -> watch::Receiver<u64> {
        self.head.subscribe()
    }

    pub fn counts(&self) -> EventCounts {
        let records = self.records.read().unwrap();
        let mut c = EventCounts {
            total: records.len() as u64,
            ..Default::default()
        };
        for r in records.iter() {
            match &r.body {
                RecordBody::Wire(WireMessage::Motion(_)) => c.motion += 1,
                RecordBody::Wire(WireMessage::Telemetry(_)) => c.telemetry += 1,
                RecordBody::Wire(WireMessage::Cmd(_)) => c.commands += 1,
                RecordBody::Wire(WireMessage::Ack(_)) => c.acks += 1,
                RecordBody::Care(_) => c.care += 1,
            }
        }
        c
    }
}
