//! A loopback embedding service speaking the wire protocol, backed by the
//! in-process mock.

#![allow(dead_code)]

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use ctxbench::embed::wire::{EmbedImageRequest, EmbedResponse, EmbedTextRequest, ErrorResponse, InfoResponse};
use ctxbench::embed::{EmbeddingProvider, MockProvider, Modality};
use ctxbench::model::ImageRef;
use tiny_http::{Header, Response, Server};

/// Lets a test replace the service's answer. Returning `Some` short-circuits
/// normal handling with `(status, body)`.
pub type Intercept = dyn Fn(&str, u64) -> Option<(u16, String)> + Send + Sync;

pub struct Loopback {
    pub url: String,
    pub hits: Arc<AtomicU64>,
    server: Arc<Server>,
    worker: Option<JoinHandle<()>>,
}

impl Loopback {
    pub fn start(mock: MockProvider) -> Self {
        Self::with_intercept(mock, Box::new(|_, _| None))
    }

    pub fn with_intercept(mock: MockProvider, intercept: Box<Intercept>) -> Self {
        let server = Arc::new(Server::http("127.0.0.1:0").expect("bind loopback"));
        let port = server.server_addr().to_ip().expect("ip listener").port();
        let hits = Arc::new(AtomicU64::new(0));
        let worker = {
            let server = Arc::clone(&server);
            let hits = Arc::clone(&hits);
            std::thread::spawn(move || {
                while let Ok(mut request) = server.recv() {
                    let n = hits.fetch_add(1, Ordering::SeqCst) + 1;
                    let path = request.url().to_string();
                    let mut body = String::new();
                    let _ = request.as_reader().read_to_string(&mut body);
                    let (status, text) = intercept(&path, n).unwrap_or_else(|| handle(&mock, &path, &body));
                    let header = Header::from_bytes("Content-Type", "application/json").unwrap();
                    let _ = request.respond(Response::from_string(text).with_status_code(status).with_header(header));
                }
            })
        };
        Self {
            url: format!("http://127.0.0.1:{port}"),
            hits,
            server,
            worker: Some(worker),
        }
    }

    pub fn hits(&self) -> u64 {
        self.hits.load(Ordering::SeqCst)
    }
}

impl Drop for Loopback {
    fn drop(&mut self) {
        self.server.unblock();
        if let Some(w) = self.worker.take() {
            let _ = w.join();
        }
    }
}

fn error(status: u16, message: &str) -> (u16, String) {
    (status, serde_json::to_string(&ErrorResponse { error: message.into() }).unwrap())
}

fn embedded(mock: &MockProvider, values: Vec<f32>) -> (u16, String) {
    let d = mock.descriptor();
    let resp = EmbedResponse {
        dim: values.len(),
        embedding: values,
        model_id: d.model_id.clone(),
        warning: None,
    };
    (200, serde_json::to_string(&resp).unwrap())
}

fn handle(mock: &MockProvider, path: &str, body: &str) -> (u16, String) {
    let d = mock.descriptor();
    match path {
        "/v1/info" => {
            let info = InfoResponse {
                model_id: d.model_id.clone(),
                dim: d.dim,
                modalities: vec![Modality::Text, Modality::Image],
            };
            (200, serde_json::to_string(&info).unwrap())
        }
        "/v1/embed_text" => match serde_json::from_str::<EmbedTextRequest>(body) {
            Ok(req) => embedded(mock, mock.vector_for(Modality::Text, "", &req.text)),
            Err(e) => error(400, &e.to_string()),
        },
        "/v1/embed_image" => match serde_json::from_str::<EmbedImageRequest>(body) {
            Ok(req) => match STANDARD.decode(&req.image_base64) {
                Ok(bytes) => {
                    let digest = ImageRef::digest_bytes(&bytes);
                    embedded(mock, mock.vector_for(Modality::Image, &digest, &req.prompt))
                }
                Err(e) => error(400, &format!("bad base64: {e}")),
            },
            Err(e) => error(400, &e.to_string()),
        },
        _ => error(404, "no such route"),
    }
}
