use std::time::Duration;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::{fill_mask, BackendConfig, BackendError, BackendInfo, BackendKind, ModelClient, Payload};
use crate::perturb::{FillBackend, SENTINEL_PREFIX};

#[derive(Serialize)]
struct LossRequest<'a> {
    model_id: &'a str,
    text: &'a str,
    #[serde(skip_serializing_if = "Option::is_none")]
    payload_b64: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    payload_mime: Option<&'a str>,
}

#[derive(Deserialize)]
struct LossResponse {
    loss: f64,
}

#[derive(Serialize)]
struct EmbedRequest<'a> {
    text: &'a str,
}

#[derive(Deserialize)]
struct EmbedResponse {
    embedding: Vec<f64>,
}

#[derive(Serialize)]
struct FillRequest<'a> {
    text: &'a str,
    sentinel_prefix: &'a str,
}

#[derive(Deserialize)]
struct FillResponse {
    text: String,
}

/// Blocking JSON client for the sidecar protocol.
#[derive(Clone)]
pub struct HttpClient {
    base: String,
    agent: ureq::Agent,
    retries: u32,
}

impl std::fmt::Debug for HttpClient {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("HttpClient").field("base", &self.base).finish()
    }
}

impl HttpClient {
    pub fn new(endpoint: &str, timeout: Duration, retries: u32) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build()
            .into();
        Self {
            base: endpoint.trim_end_matches('/').to_string(),
            agent,
            retries,
        }
    }

    pub fn from_config(cfg: &BackendConfig) -> Result<Self, BackendError> {
        match &cfg.kind {
            BackendKind::Http { endpoint } => Ok(Self::new(
                endpoint,
                Duration::from_secs_f64(cfg.timeout_secs),
                cfg.retries,
            )),
            BackendKind::File { .. } => Err(BackendError::Precondition(
                "HTTP client requested for a file backend".into(),
            )),
        }
    }

    fn with_retries<T>(&self, mut f: impl FnMut() -> Result<T, BackendError>) -> Result<T, BackendError> {
        let mut attempt = 0;
        loop {
            match f() {
                Err(e) if e.is_retriable() && attempt < self.retries => {
                    attempt += 1;
                    std::thread::sleep(Duration::from_millis(50 * u64::from(attempt)));
                }
                other => return other,
            }
        }
    }

    fn post<B: Serialize, R: DeserializeOwned>(&self, path: &str, body: &B) -> Result<R, BackendError> {
        let url = format!("{}{path}", self.base);
        self.with_retries(|| {
            let resp = self.agent.post(&url).send_json(body).map_err(map_err)?;
            decode(resp)
        })
    }

    fn get<R: DeserializeOwned>(&self, path: &str) -> Result<R, BackendError> {
        let url = format!("{}{path}", self.base);
        self.with_retries(|| {
            let resp = self.agent.get(&url).call().map_err(map_err)?;
            decode(resp)
        })
    }
}

fn decode<R: DeserializeOwned>(mut resp: ureq::http::Response<ureq::Body>) -> Result<R, BackendError> {
    let status = resp.status().as_u16();
    if status != 200 {
        let body = resp.body_mut().read_to_string().unwrap_or_default();
        return Err(BackendError::Http { status, body });
    }
    resp.body_mut()
        .read_json::<R>()
        .map_err(|e| BackendError::Protocol(e.to_string()))
}

fn map_err(e: ureq::Error) -> BackendError {
    match e {
        ureq::Error::Timeout(t) => BackendError::Timeout(t.to_string()),
        ureq::Error::ConnectionFailed | ureq::Error::HostNotFound => {
            BackendError::Unreachable(e.to_string())
        }
        ureq::Error::Io(io) => BackendError::Unreachable(io.to_string()),
        ureq::Error::StatusCode(status) => BackendError::Http {
            status,
            body: String::new(),
        },
        other => BackendError::Protocol(other.to_string()),
    }
}

impl ModelClient for HttpClient {
    fn info(&self) -> Result<BackendInfo, BackendError> {
        self.get("/v1/info")
    }

    fn loss(&self, model_id: &str, text: &str, payload: Option<&Payload>) -> Result<f64, BackendError> {
        let req = LossRequest {
            model_id,
            text,
            payload_b64: payload.map(Payload::base64),
            payload_mime: payload.map(|p| p.mime.as_str()),
        };
        self.post::<_, LossResponse>("/v1/loss", &req).map(|r| r.loss)
    }

    fn embed(&self, text: &str) -> Result<Vec<f64>, BackendError> {
        self.post::<_, EmbedResponse>("/v1/embed", &EmbedRequest { text })
            .map(|r| r.embedding)
    }

    fn fill(&self, masked_text: &str) -> Result<String, BackendError> {
        let req = FillRequest {
            text: masked_text,
            sentinel_prefix: SENTINEL_PREFIX,
        };
        self.post::<_, FillResponse>("/v1/fill", &req).map(|r| r.text)
    }
}

impl FillBackend for HttpClient {
    fn fill(&self, masked_text: &str) -> Result<String, BackendError> {
        fill_mask(self, masked_text)
    }
}
