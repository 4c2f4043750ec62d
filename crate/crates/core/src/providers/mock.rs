//! A minimal in-process embedding service for tests and local dry runs.
//!
//! Speaks just enough HTTP/1.1 for one `POST /embed` per connection.

use std::io::{self, BufRead, BufReader, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Arc;
use std::thread::{self, JoinHandle};

use sha2::{Digest, Sha256};

use super::remote::{EmbedRequest, EmbedResponse};

#[derive(Debug, Clone, PartialEq)]
pub enum MockReply {
    Embedding(Vec<f64>),
    /// Embedding with a declared dim that may disagree with its length.
    Declared {
        embedding: Vec<f64>,
        dim: usize,
    },
    Status(u16, String),
}

impl MockReply {
    /// Deterministic pseudo-embedding of the prompt, values in [-1, 1).
    pub fn hashed(prompt: &str, dim: usize) -> MockReply {
        let mut out = Vec::with_capacity(dim);
        let mut block = 0u64;
        while out.len() < dim {
            let digest = Sha256::new()
                .chain_update(block.to_le_bytes())
                .chain_update(prompt.as_bytes())
                .finalize();
            for pair in digest.chunks_exact(2) {
                if out.len() == dim {
                    break;
                }
                let v = u16::from_le_bytes([pair[0], pair[1]]);
                out.push(f64::from(v) / 32768.0 - 1.0);
            }
            block += 1;
        }
        MockReply::Embedding(out)
    }
}

type Handler = dyn Fn(usize, &EmbedRequest) -> MockReply + Send + Sync;

pub struct MockEmbeddingServer {
    addr: SocketAddr,
    requests: Arc<AtomicUsize>,
    stop: Arc<AtomicBool>,
    handle: Option<JoinHandle<()>>,
}

impl MockEmbeddingServer {
    /// Starts serving on an ephemeral localhost port. `handler` receives the
    /// zero-based request number and the decoded request.
    pub fn start<F>(handler: F) -> io::Result<Self>
    where
        F: Fn(usize, &EmbedRequest) -> MockReply + Send + Sync + 'static,
    {
        let listener = TcpListener::bind("127.0.0.1:0")?;
        let addr = listener.local_addr()?;
        let requests = Arc::new(AtomicUsize::new(0));
        let stop = Arc::new(AtomicBool::new(false));
        let handler: Arc<Handler> = Arc::new(handler);
        let (req2, stop2) = (requests.clone(), stop.clone());
        let handle = thread::spawn(move || {
            for conn in listener.incoming() {
                if stop2.load(Ordering::SeqCst) {
                    break;
                }
                let Ok(stream) = conn else { continue };
                let n = req2.fetch_add(1, Ordering::SeqCst);
                let _ = serve(stream, n, handler.as_ref());
            }
        });
        Ok(MockEmbeddingServer {
            addr,
            requests,
            stop,
            handle: Some(handle),
        })
    }

    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }

    pub fn request_count(&self) -> usize {
        self.requests.load(Ordering::SeqCst)
    }
}

impl Drop for MockEmbeddingServer {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        let _ = TcpStream::connect(self.addr);
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}

fn serve(stream: TcpStream, n: usize, handler: &Handler) -> io::Result<()> {
    let mut reader = BufReader::new(stream.try_clone()?);
    let mut request_line = String::new();
    reader.read_line(&mut request_line)?;
    if request_line.is_empty() {
        return Ok(());
    }
    let mut content_length = 0usize;
    loop {
        let mut line = String::new();
        if reader.read_line(&mut line)? == 0 || line == "\r\n" || line == "\n" {
            break;
        }
        if let Some((name, value)) = line.split_once(':') {
            if name.trim().eq_ignore_ascii_case("content-length") {
                content_length = value.trim().parse().unwrap_or(0);
            }
        }
    }
    let mut body = vec![0u8; content_length];
    reader.read_exact(&mut body)?;

    let mut parts = request_line.split_whitespace();
    let (method, path) = (parts.next().unwrap_or(""), parts.next().unwrap_or(""));
    let (status, payload) = if method != "POST" || path != "/embed" {
        (404, "not found".to_string())
    } else {
        match serde_json::from_slice::<EmbedRequest>(&body) {
            Err(e) => (400, format!("bad request: {e}")),
            Ok(req) => match handler(n, &req) {
                MockReply::Embedding(v) => (200, response_json(v.len(), v)),
                MockReply::Declared { embedding, dim } => (200, response_json(dim, embedding)),
                MockReply::Status(code, msg) => (code, msg),
            },
        }
    };
    let mut w = stream;
    write!(
        w,
        "HTTP/1.1 {status} Mock\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{payload}",
        payload.len()
    )?;
    w.flush()
}

fn response_json(dim: usize, embedding: Vec<f64>) -> String {
    serde_json::to_string(&EmbedResponse {
        embedding,
        dim,
        model: "mock-embedding".into(),
    })
    .expect("response serializes")
}
