//! Client side of the TadBot gateway.
//!
//! [`GatewayClient`] speaks the north-bound HTTP/JSON API; [`device_sim`]
//! runs a virtual TadBot that dials the gateway's device port.

pub mod device_sim;

use std::time::Duration;

use eventsource_stream::Eventsource;
use futures::{Stream, StreamExt};
use reqwest::StatusCode;
use serde::de::DeserializeOwned;
use serde::Deserialize;
use tadbot_core::experiment::{Trial, TrialRequest};
use tadbot_core::protocol::{encode, Motion, WireMessage};

pub use tadbot_gateway::api::{AckBody, TrialView, EPOCH_HEADER};
pub use tadbot_gateway::{CommandRequest, MotionReceipt, StatusSnapshot};

#[derive(Debug, thiserror::Error)]
pub enum ClientError {
    #[error("request failed: {0}")]
    Http(#[from] reqwest::Error),
    #[error("gateway answered {status}: {message}")]
    Api {
        status: StatusCode,
        message: String,
        /// Stimulus of the current phase when a command was refused.
        phase: Option<String>,
    },
    #[error("invalid request: {0}")]
    Invalid(String),
    #[error("event stream: {0}")]
    Stream(String),
}

impl ClientError {
    pub fn status(&self) -> Option<StatusCode> {
        match self {
            ClientError::Api { status, .. } => Some(*status),
            ClientError::Http(e) => e.status(),
            _ => None,
        }
    }
}

#[derive(Deserialize)]
struct ErrorBody {
    error: String,
    #[serde(default)]
    phase: Option<String>,
}

/// One server-sent event from `GET /events`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StreamEvent {
    pub seq: u64,
    /// `wire` or `care`.
    pub kind: String,
    /// The stored line: a wire-protocol message or a care-log entry.
    pub data: String,
}

/// Parameters of `GET /characterization`.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepParams {
    pub fmin: f64,
    pub fmax: f64,
    pub step: f64,
    pub noise: f64,
    pub seed: u64,
    pub duration_s: Option<f64>,
}

impl Default for SweepParams {
    fn default() -> Self {
        Self {
            fmin: 5.0,
            fmax: 28.0,
            step: 1.0,
            noise: 0.0,
            seed: 0,
            duration_s: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GatewayClient {
    base: String,
    http: reqwest::Client,
}

impl GatewayClient {
    pub fn new(base_url: impl Into<String>) -> Result<Self, ClientError> {
        let base = base_url.into().trim_end_matches('/').to_owned();
        if !(base.starts_with("http://") || base.starts_with("https://")) {
            return Err(ClientError::Invalid(format!("gateway url must be http(s): {base}")));
        }
        let http = reqwest::Client::builder()
            .connect_timeout(Duration::from_secs(5))
            .build()?;
        Ok(Self { base, http })
    }

    pub fn base_url(&self) -> &str {
        &self.base
    }

    fn url(&self, path: &str) -> String {
        format!("{}{path}", self.base)
    }

    async fn checked(resp: reqwest::Response) -> Result<reqwest::Response, ClientError> {
        let status = resp.status();
        if status.is_success() {
            return Ok(resp);
        }
        let text = resp.text().await.unwrap_or_default();
        let (message, phase) = match serde_json::from_str::<ErrorBody>(&text) {
            Ok(b) => (b.error, b.phase),
            Err(_) => (text, None),
        };
        Err(ClientError::Api { status, message, phase })
    }

    async fn json<T: DeserializeOwned>(resp: reqwest::Response) -> Result<T, ClientError> {
        Ok(Self::checked(resp).await?.json().await?)
    }

    pub async fn status(&self) -> Result<StatusSnapshot, ClientError> {
        Self::json(self.http.get(self.url("/status")).send().await?).await
    }

    pub async fn command(&self, device_id: &str, req: &CommandRequest) -> Result<AckBody, ClientError> {
        let url = self.url(&format!("/devices/{device_id}/command"));
        Self::json(self.http.post(url).json(req).send().await?).await
    }

    /// Posts a motion event; the body is the wire-protocol encoding.
    pub async fn post_motion(&self, motion: &Motion) -> Result<MotionReceipt, ClientError> {
        let body = encode(&WireMessage::Motion(motion.clone())).map_err(|e| ClientError::Invalid(e.to_string()))?;
        let url = self.url(&format!("/cameras/{}/motion", motion.camera));
        let resp = self
            .http
            .post(url)
            .header(reqwest::header::CONTENT_TYPE, "application/json")
            .body(body)
            .send()
            .await?;
        Self::json(resp).await
    }

    pub async fn trials(&self) -> Result<Vec<TrialView>, ClientError> {
        Self::json(self.http.get(self.url("/trials")).send().await?).await
    }

    pub async fn create_trial(&self, req: &TrialRequest) -> Result<Trial, ClientError> {
        Self::json(self.http.post(self.url("/trials")).json(req).send().await?).await
    }

    /// Sweep CSV computed by the gateway.
    pub async fn characterization(&self, p: &SweepParams) -> Result<String, ClientError> {
        let mut query = vec![
            ("fmin", p.fmin.to_string()),
            ("fmax", p.fmax.to_string()),
            ("step", p.step.to_string()),
            ("noise", p.noise.to_string()),
            ("seed", p.seed.to_string()),
        ];
        if let Some(d) = p.duration_s {
            query.push(("duration", d.to_string()));
        }
        let resp = self.http.get(self.url("/characterization")).query(&query).send().await?;
        Ok(Self::checked(resp).await?.text().await?)
    }

    /// Subscribes to the event stream after `since`. Returns the gateway
    /// epoch with the stream; sequence numbers only compare within one epoch.
    pub async fn events(
        &self,
        since: u64,
    ) -> Result<(String, impl Stream<Item = Result<StreamEvent, ClientError>> + Send + Unpin + 'static), ClientError> {
        let resp = self
            .http
            .get(self.url("/events"))
            .query(&[("since", since)])
            .header(reqwest::header::ACCEPT, "text/event-stream")
            .send()
            .await?;
        let resp = Self::checked(resp).await?;
        let epoch = resp
            .headers()
            .get(EPOCH_HEADER)
            .and_then(|v| v.to_str().ok())
            .unwrap_or_default()
            .to_owned();
        let stream = resp.bytes_stream().eventsource().map(|item| {
            let ev = item.map_err(|e| ClientError::Stream(e.to_string()))?;
            let seq = ev
                .id
                .parse()
                .map_err(|_| ClientError::Stream(format!("event id `{}` is not a sequence number", ev.id)))?;
            Ok(StreamEvent {
                seq,
                kind: ev.event,
                data: ev.data,
            })
        });
        Ok((epoch, Box::pin(stream)))
    }
}
