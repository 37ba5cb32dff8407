//! Optional remote providers: an embedding endpoint and an instruction
//! text-generation endpoint, both JSON-over-HTTP.
//!
//! These hooks let a real language model replace the offline defaults
//! without touching any call site.  The transport is a deliberately minimal
//! HTTP/1.1 client over `TcpStream` (plain `http://` only, suitable for a
//! local sidecar); nothing in the test suite or pipeline requires network
//! access.

use std::io::{Read, Write};
use std::net::TcpStream;
use std::time::Duration;

use serde::Deserialize;

use crate::embed::EmbeddingProvider;

#[derive(Debug, thiserror::Error)]
pub enum RemoteError {
    #[error("unsupported url {0:?} (expected http://host[:port]/path)")]
    BadUrl(String),
    #[error("io error talking to endpoint: {0}")]
    Io(#[from] std::io::Error),
    #[error("endpoint returned status {0}")]
    Status(u16),
    #[error("malformed response: {0}")]
    Malformed(String),
}

/// POST a JSON body and return the response body.
pub fn http_post_json(url: &str, body: &str) -> Result<String, RemoteError> {
    let rest = url
        .strip_prefix("http://")
        .ok_or_else(|| RemoteError::BadUrl(url.to_string()))?;
    let (host_port, path) = match rest.find('/') {
        Some(i) => (&rest[..i], &rest[i..]),
        None => (rest, "/"),
    };
    let addr = if host_port.contains(':') {
        host_port.to_string()
    } else {
        format!("{host_port}:80")
    };

    let mut stream = TcpStream::connect(&addr)?;
    stream.set_read_timeout(Some(Duration::from_secs(30)))?;
    stream.set_write_timeout(Some(Duration::from_secs(30)))?;
    let request = format!(
        "POST {path} HTTP/1.1\r\nHost: {host_port}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
        body.len()
    );
    stream.write_all(request.as_bytes())?;

    let mut raw = Vec::new();
    stream.read_to_end(&mut raw)?;
    let text = String::from_utf8(raw).map_err(|e| RemoteError::Malformed(e.to_string()))?;
    let (head, response_body) = text
        .split_once("\r\n\r\n")
        .ok_or_else(|| RemoteError::Malformed("missing header terminator".into()))?;
    let status_line = head.lines().next().unwrap_or_default();
    let status: u16 = status_line
        .split_whitespace()
        .nth(1)
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| RemoteError::Malformed(format!("bad status line {status_line:?}")))?;
    if status != 200 {
        return Err(RemoteError::Status(status));
    }
    Ok(response_body.to_string())
}

/// Embedding endpoint client: POST `{"text": ...}`, expect `{"vector": [...]}`.
/// The response vector is L2-normalized locally so the provider contract
/// (unit norm) holds regardless of the endpoint.
#[derive(Clone, Debug)]
pub struct RemoteEmbedder {
    url: String,
    dim: usize,
}

impl RemoteEmbedder {
    pub fn new(url: &str, dim: usize) -> Self {
        Self {
            url: url.to_string(),
            dim,
        }
    }

    pub fn try_embed(&self, text: &str) -> Result<Vec<f64>, RemoteError> {
        #[derive(Deserialize)]
        struct Resp {
            vector: Vec<f64>,
        }
        let body = serde_json::json!({ "text": text }).to_string();
        let resp = http_post_json(&self.url, &body)?;
        let parsed: Resp =
            serde_json::from_str(&resp).map_err(|e| RemoteError::Malformed(e.to_string()))?;
        if parsed.vector.len() != self.dim {
            return Err(RemoteError::Malformed(format!(
                "expected {} dims, got {}",
                self.dim,
                parsed.vector.len()
            )));
        }
        let norm = parsed.vector.iter().map(|x| x * x).sum::<f64>().sqrt();
        if !(norm.is_finite() && norm > 0.0) {
            return Err(RemoteError::Malformed("non-normalizable vector".into()));
        }
        Ok(parsed.vector.into_iter().map(|x| x / norm).collect())
    }
}

impl EmbeddingProvider for RemoteEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    /// Infallible trait surface; callers that need graceful degradation use
    /// [`RemoteEmbedder::try_embed`] directly.
    fn embed(&self, text: &str) -> Vec<f64> {
        self.try_embed(text).expect("remote embedding endpoint")
    }
}

/// Instruction-generation endpoint client: POST a scene summary, expect
/// `{"instruction": ...}`.  Output is validated by the caller exactly like a
/// scenario-table instruction.
#[derive(Clone, Debug)]
pub struct TextGenClient {
    url: String,
}

impl TextGenClient {
    pub fn new(url: &str) -> Self {
        Self {
            url: url.to_string(),
        }
    }

    pub fn generate(
        &self,
        scene_summary: &str,
        target_category: &str,
        region_name: &str,
    ) -> Result<String, RemoteError> {
        #[derive(Deserialize)]
        struct Resp {
            instruction: String,
        }
        let body = serde_json::json!({
            "scene": scene_summary,
            "target": target_category,
            "region": region_name,
        })
        .to_string();
        let resp = http_post_json(&self.url, &body)?;
        let parsed: Resp =
            serde_json::from_str(&resp).map_err(|e| RemoteError::Malformed(e.to_string()))?;
        if parsed.instruction.trim().is_empty() {
            return Err(RemoteError::Malformed("empty instruction".into()));
        }
        Ok(parsed.instruction)
    }
}
