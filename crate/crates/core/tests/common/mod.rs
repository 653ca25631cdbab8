//! In-process HTTP stub speaking the sidecar protocol.
#![allow(dead_code)]

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;

use base64::Engine;
use fimmia::backend::{BackendError, ModelClient, Payload};
use serde_json::{json, Value};

pub type Reply = (u16, Value);

pub struct StubServer {
    pub url: String,
    requests: Arc<AtomicUsize>,
    server: Arc<tiny_http::Server>,
    handle: Option<JoinHandle<()>>,
}

impl StubServer {
    /// Serves `handler(path, json_body)`; GET bodies are `Value::Null`.
    pub fn start(handler: impl Fn(&str, &Value) -> Reply + Send + 'static) -> Self {
        let server = Arc::new(tiny_http::Server::http("127.0.0.1:0").expect("bind"));
        let url = format!("http://{}", server.server_addr().to_ip().expect("ip"));
        let requests = Arc::new(AtomicUsize::new(0));
        let (srv, count) = (server.clone(), requests.clone());
        let handle = std::thread::spawn(move || {
            for mut req in srv.incoming_requests() {
                count.fetch_add(1, Ordering::SeqCst);
                let mut body = String::new();
                let _ = req.as_reader().read_to_string(&mut body);
                let v = serde_json::from_str(&body).unwrap_or(Value::Null);
                let (status, out) = handler(req.url(), &v);
                let resp = tiny_http::Response::from_string(out.to_string())
                    .with_status_code(status)
                    .with_header("Content-Type: application/json".parse::<tiny_http::Header>().unwrap());
                let _ = req.respond(resp);
            }
        });
        Self {
            url,
            requests,
            server,
            handle: Some(handle),
        }
    }

    /// Exposes a [`ModelClient`] over HTTP.
    pub fn serving<C: ModelClient + Send + 'static>(client: C) -> Self {
        Self::start(move |path, body| route(&client, path, body))
    }

    pub fn requests(&self) -> usize {
        self.requests.load(Ordering::SeqCst)
    }
}

impl Drop for StubServer {
    fn drop(&mut self) {
        self.server.unblock();
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}

fn reply<T: serde::Serialize>(r: Result<T, BackendError>, wrap: impl Fn(T) -> Value) -> Reply {
    match r {
        Ok(v) => (200, wrap(v)),
        Err(BackendError::Http { status, body }) => (status, json!({ "detail": body })),
        Err(e) => (500, json!({ "detail": e.to_string() })),
    }
}

pub fn route(client: &dyn ModelClient, path: &str, body: &Value) -> Reply {
    let text = body["text"].as_str().unwrap_or_default();
    match path {
        "/v1/info" => reply(client.info(), |i| serde_json::to_value(i).unwrap()),
        "/v1/loss" => {
            let payload = body["payload_b64"].as_str().map(|b| Payload {
                bytes: base64::engine::general_purpose::STANDARD.decode(b).expect("base64"),
                mime: body["payload_mime"].as_str().unwrap_or_default().to_string(),
            });
            let model = body["model_id"].as_str().unwrap_or_default();
            reply(client.loss(model, text, payload.as_ref()), |l| json!({ "loss": l }))
        }
        "/v1/embed" => reply(client.embed(text), |e| json!({ "embedding": e })),
        "/v1/fill" => reply(client.fill(text), |t| json!({ "text": t })),
        _ => (404, json!({ "detail": "no such route" })),
    }
}
