//! Synthetic model service on a local port.

use std::sync::Arc;
use std::thread::JoinHandle;

use base64::Engine;
use fimmia::backend::{BackendError, ModelClient, Payload};
use serde_json::{json, Value};

pub struct StubServer {
    pub url: String,
    server: Arc<tiny_http::Server>,
    handle: Option<JoinHandle<()>>,
}

impl StubServer {
    /// Serves `client`, letting `intercept` answer a request first.
    pub fn serving<C: ModelClient + Send + 'static>(
        client: C,
        intercept: impl Fn(&str) -> Option<(u16, Value)> + Send + 'static,
    ) -> Self {
        let server = Arc::new(tiny_http::Server::http("127.0.0.1:0").expect("bind"));
        let url = format!("http://{}", server.server_addr().to_ip().expect("ip"));
        let srv = server.clone();
        let handle = std::thread::spawn(move || {
            for mut req in srv.incoming_requests() {
                let mut body = String::new();
                let _ = req.as_reader().read_to_string(&mut body);
                let v: Value = serde_json::from_str(&body).unwrap_or(Value::Null);
                let (status, out) = intercept(req.url()).unwrap_or_else(|| route(&client, req.url(), &v));
                let resp = tiny_http::Response::from_string(out.to_string())
                    .with_status_code(status)
                    .with_header("Content-Type: application/json".parse::<tiny_http::Header>().unwrap());
                let _ = req.respond(resp);
            }
        });
        Self {
            url,
            server,
            handle: Some(handle),
        }
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

fn reply<T>(r: Result<T, BackendError>, wrap: impl Fn(T) -> Value) -> (u16, Value) {
    match r {
        Ok(v) => (200, wrap(v)),
        Err(e) => (500, json!({ "detail": e.to_string() })),
    }
}

fn route(client: &dyn ModelClient, path: &str, body: &Value) -> (u16, Value) {
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
