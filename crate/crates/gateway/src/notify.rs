//! Webhook notifications for motion events.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use tadbot_core::protocol::{encode, Motion, WireMessage};
use tracing::{info, warn};

#[derive(Debug, Default)]
pub struct NotifyStats {
    pub dispatched: AtomicU64,
    pub delivered: AtomicU64,
    pub failed: AtomicU64,
    pub attempts: AtomicU64,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
pub struct NotifySnapshot {
    pub dispatched: u64,
    pub delivered: u64,
    pub failed: u64,
    pub attempts: u64,
}

#[derive(Debug, Clone)]
pub struct Notifier {
    client: reqwest::Client,
    url: Option<String>,
    delays: Vec<Duration>,
    stats: Arc<NotifyStats>,
}

impl Notifier {
    /// `delays` are the waits before each retry after the first attempt.
    pub fn new(url: Option<String>, delays: Vec<Duration>) -> Self {
        Self {
            client: reqwest::Client::builder()
                .timeout(Duration::from_secs(10))
                .build()
                .expect("http client"),
            url,
            delays,
            stats: Arc::default(),
        }
    }

    pub fn enabled(&self) -> bool {
        self.url.is_some()
    }

    pub fn snapshot(&self) -> NotifySnapshot {
        NotifySnapshot {
            dispatched: self.stats.dispatched.load(Ordering::Relaxed),
            delivered: self.stats.delivered.load(Ordering::Relaxed),
            failed: self.stats.failed.load(Ordering::Relaxed),
            attempts: self.stats.attempts.load(Ordering::Relaxed),
        }
    }

    /// Posts the motion line in the background; never blocks the caller.
    pub fn dispatch(&self, motion: Motion) {
        let Some(url) = self.url.clone() else {
            return;
        };
        self.stats.dispatched.fetch_add(1, Ordering::Relaxed);
        let this = self.clone();
        tokio::spawn(async move {
            let body = encode(&WireMessage::Motion(motion.clone())).expect("validated motion");
            if this.deliver(&url, body).await {
                this.stats.delivered.fetch_add(1, Ordering::Relaxed);
            } else {
                this.stats.failed.fetch_add(1, Ordering::Relaxed);
                warn!(camera = %motion.camera, %url, "motion notification dropped after retries");
            }
        });
    }

    async fn deliver(&self, url: &str, body: Vec<u8>) -> bool {
        let mut waits = self.delays.iter();
        loop {
            self.stats.attempts.fetch_add(1, Ordering::Relaxed);
            let result = self
                .client
                .post(url)
                .header("content-type", "application/json")
                .body(body.clone())
                .send()
                .await;
            match result {
                Ok(resp) if resp.status().is_success() => {
                    info!(%url, "motion notification delivered");
                    return true;
                }
                Ok(resp) => warn!(%url, status = %resp.status(), "webhook rejected notification"),
                Err(e) => warn!(%url, error = %e, "webhook unreachable"),
            }
            match waits.next() {
                Some(d) => tokio::time::sleep(*d).await,
                None => return false,
            }
        }
    }
}
