//! Line-delimited JSON over TCP: one request per line, one response per line.
//!
//! State is immutable after startup, so connections share it through an `Arc`
//! without locking.

use std::io::{BufRead, BufReader, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::encoder::{encode_catalog, EncodedEntity};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::retrieval::{retrieve_with, HnswIndex, Scorer, SearchOptions};
use crate::synthdata::{Catalog, UserContext};

pub const DEFAULT_MAX_REQUEST_BYTES: usize = 1 << 20;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ServeRequest {
    pub user: UserContext,
    pub domain: usize,
    pub k_top: usize,
    #[serde(default)]
    pub beam: Option<usize>,
    #[serde(default)]
    pub ef_search: Option<usize>,
    /// Adds the wall-clock latency to the response.
    #[serde(default)]
    pub timing: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ServeResponse {
    pub ids: Vec<u32>,
    pub scores: Vec<f64>,
    pub classes: Vec<String>,
    pub truncated: bool,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub latency_ms: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub kind: String,
    pub message: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorResponse {
    pub error: ErrorBody,
}

pub struct ServeState {
    pub model: Model,
    pub catalog: Catalog,
    pub index: HnswIndex,
    pub entities: Vec<EncodedEntity>,
    /// Beam used when a request names none; raised to `k_top` when smaller.
    pub default_beam: usize,
    pub max_request_bytes: usize,
}

impl ServeState {
    pub fn new(model: Model, catalog: Catalog, index: HnswIndex) -> Result<Self> {
        if index.len() != catalog.len() {
            return Err(Error::Contract(format!(
                "index covers {} entities, catalog has {}",
                index.len(),
                catalog.len()
            )));
        }
        let entities = encode_catalog(&model.config, &catalog);
        Ok(Self {
            model,
            catalog,
            index,
            entities,
            default_beam: 200,
            max_request_bytes: DEFAULT_MAX_REQUEST_BYTES,
        })
    }

    fn answer(&self, req: &ServeRequest) -> Result<ServeResponse> {
        let start = Instant::now();
        if req.k_top == 0 {
            return Err(Error::Contract("k_top must be positive".into()));
        }
        let scorer = Scorer::with_entities(&self.model, &self.entities);
        let user = scorer.encode_user(&req.user);
        let k_top = req.k_top;
        let opts = SearchOptions {
            k_top,
            beam: req.beam.unwrap_or(self.default_beam.max(k_top.min(self.index.len()))),
            max_rounds: req.ef_search,
        };
        let r = retrieve_with(&self.index, &scorer, &user, req.domain, opts)?;
        let classes = r
            .ids
            .iter()
            .map(|&id| self.catalog.get(id).map(|e| e.class.to_string()).unwrap_or_default())
            .collect();
        Ok(ServeResponse {
            ids: r.ids,
            scores: r.scores,
            classes,
            truncated: r.truncated,
            latency_ms: req.timing.then(|| start.elapsed().as_secs_f64() * 1e3),
        })
    }

    /// Response line (without newline) for one request line.
    pub fn handle_line(&self, line: &str) -> String {
        let result = serde_json::from_str::<ServeRequest>(line)
            .map_err(|e| ("bad_request", e.to_string()))
            .and_then(|req| {
                self.answer(&req).map_err(|e| {
                    let kind = match e {
                        Error::Contract(_) | Error::Config(_) | Error::Schema(_) => "invalid_request",
                        _ => "internal",
                    };
                    (kind, e.to_string())
                })
            });
        match result {
            Ok(resp) => serde_json::to_string(&resp).expect("response serializes"),
            Err((kind, message)) => error_line(kind, message),
        }
    }
}

fn error_line(kind: &str, message: String) -> String {
    serde_json::to_string(&ErrorResponse {
        error: ErrorBody {
            kind: kind.into(),
            message,
        },
    })
    .expect("error serializes")
}

/// Reads one `\n`-terminated line of at most `limit` bytes. Returns
/// `Ok(None)` at end of stream and `Err(len)` for an oversized line, which is
/// consumed up to its newline.
fn read_limited(reader: &mut impl BufRead, limit: usize) -> std::io::Result<Option<std::result::Result<Vec<u8>, usize>>> {
    let mut buf = Vec::new();
    let mut oversized = 0usize;
    loop {
        let chunk = reader.fill_buf()?;
        if chunk.is_empty() {
            return Ok(if buf.is_empty() && oversized == 0 {
                None
            } else if oversized > 0 {
                Some(Err(oversized))
            } else {
                Some(Ok(buf))
            });
        }
        let (take, done) = match chunk.iter().position(|&b| b == b'\n') {
            Some(i) => (i + 1, true),
            None => (chunk.len(), false),
        };
        if oversized > 0 || buf.len() + take > limit + 1 {
            oversized += buf.len() + take;
            buf.clear();
        } else {
            buf.extend_from_slice(&chunk[..take]);
        }
        reader.consume(take);
        if done {
            return Ok(Some(if oversized > 0 { Err(oversized) } else { Ok(buf) }));
        }
    }
}

fn handle_connection(state: &ServeState, stream: TcpStream) -> std::io::Result<()> {
    let mut writer = stream.try_clone()?;
    let mut reader = BufReader::new(stream);
    while let Some(line) = read_limited(&mut reader, state.max_request_bytes)? {
        let body = match line {
            Ok(bytes) => match std::str::from_utf8(&bytes) {
                Ok(text) if text.trim().is_empty() => continue,
                Ok(text) => state.handle_line(text.trim_end()),
                Err(e) => error_line("bad_request", format!("request is not UTF-8: {e}")),
            },
            Err(_) => error_line(
                "too_large",
                format!("request exceeds the limit of {} bytes", state.max_request_bytes),
            ),
        };
        writer.write_all(body.as_bytes())?;
        writer.write_all(b"\n")?;
        writer.flush()?;
    }
    Ok(())
}

/// Accepts connections forever, one thread each.
pub fn run(state: Arc<ServeState>, listener: TcpListener) -> Result<()> {
    for stream in listener.incoming() {
        let stream = stream?;
        let state = Arc::clone(&state);
        std::thread::spawn(move || {
            if let Err(e) = handle_connection(&state, stream) {
                log::warn!("connection closed with error: {e}");
            }
        });
    }
    Ok(())
}

/// Binds `addr` and serves in a background thread; returns the bound address.
pub fn spawn(state: Arc<ServeState>, addr: &str) -> Result<(SocketAddr, JoinHandle<()>)> {
    let listener = TcpListener::bind(addr)?;
    let local = listener.local_addr()?;
    let handle = std::thread::spawn(move || {
        if let Err(e) = run(state, listener) {
            log::error!("server stopped: {e}");
        }
    });
    Ok((local, handle))
}
