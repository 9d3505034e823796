//! Deterministic in-process chat-completion endpoint for tests and the
//! `mock-llm` CLI subcommand. Speaks just enough HTTP/1.1 for the client.

use serde::{Deserialize, Serialize};
use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;

use crate::error::{Error, Result};

/// What the mock answers with.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode", content = "values")]
pub enum MockMode {
    /// Echo back the combined preliminary forecast list found in the prompt.
    Echo,
    /// Reply with prose that contains no numeric list.
    Garbage,
    /// Always reply with this canned list.
    Fixed(Vec<f64>),
}

pub struct MockServer {
    addr: std::net::SocketAddr,
    stop: Arc<AtomicBool>,
    handle: Option<JoinHandle<()>>,
}

impl MockServer {
    /// Bind to 127.0.0.1 on the given port (0 picks a free one) and serve
    /// on a background thread until `shutdown` or drop.
    pub fn start(mode: MockMode, port: u16) -> Result<Self> {
        let listener = TcpListener::bind(("127.0.0.1", port))?;
        let addr = listener.local_addr()?;
        let stop = Arc::new(AtomicBool::new(false));
        let stop2 = Arc::clone(&stop);
        let handle = std::thread::spawn(move || {
            for stream in listener.incoming() {
                if stop2.load(Ordering::SeqCst) {
                    break;
                }
                if let Ok(stream) = stream {
                    let _ = handle_connection(stream, &mode);
                }
            }
        });
        Ok(Self { addr, stop, handle: Some(handle) })
    }

    /// Chat-completion URL clients should post to.
    pub fn url(&self) -> String {
        format!("http://{}/v1/chat/completions", self.addr)
    }

    pub fn shutdown(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        // unblock the accept loop
        let _ = TcpStream::connect(self.addr);
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}

impl Drop for MockServer {
    fn drop(&mut self) {
        self.shutdown();
    }
}

/// Run the mock in the foreground, never returning. Used by the CLI.
pub fn serve_forever(mode: MockMode, port: u16) -> Result<()> {
    let listener = TcpListener::bind(("127.0.0.1", port))?;
    eprintln!("mock endpoint listening on http://{}/v1/chat/completions", listener.local_addr()?);
    for stream in listener.incoming() {
        if let Ok(stream) = stream {
            let _ = handle_connection(stream, &mode);
        }
    }
    Ok(())
}

fn handle_connection(stream: TcpStream, mode: &MockMode) -> Result<()> {
    let mut reader = BufReader::new(stream);
    let mut content_len = 0usize;
    let mut line = String::new();
    loop {
        line.clear();
        if reader.read_line(&mut line)? == 0 {
            return Ok(());
        }
        let trimmed = line.trim_end();
        if trimmed.is_empty() {
            break;
        }
        if let Some(v) = trimmed
            .split_once(':')
            .filter(|(k, _)| k.eq_ignore_ascii_case("content-length"))
            .map(|(_, v)| v.trim())
        {
            content_len = v
                .parse()
                .map_err(|_| Error::InvalidInput("bad Content-Length header".into()))?;
        }
    }
    let mut body = vec![0u8; content_len];
    reader.read_exact(&mut body)?;

    let content = match respond(&body, mode) {
        Ok(c) => c,
        Err(e) => format!("mock error: {e}"),
    };
    let reply = serde_json::json!({
        "id": "mock-0",
        "object": "chat.completion",
        "model": "mock",
        "choices": [{
            "index": 0,
            "finish_reason": "stop",
            "message": {"role": "assistant", "content": content},
        }],
    })
    .to_string();

    let mut stream = reader.into_inner();
    write!(
        stream,
        "HTTP/1.1 200 OK\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{}",
        reply.len(),
        reply
    )?;
    stream.flush()?;
    Ok(())
}

fn respond(body: &[u8], mode: &MockMode) -> Result<String> {
    match mode {
        MockMode::Garbage => Ok("I'm sorry, I cannot produce a forecast for that request.".into()),
        MockMode::Fixed(values) => Ok(crate::calibrate::render_list(values)),
        MockMode::Echo => {
            let doc: serde_json::Value = serde_json::from_slice(body)?;
            let prompt = doc
                .get("messages")
                .and_then(|m| m.as_array())
                .and_then(|msgs| {
                    msgs.iter()
                        .rev()
                        .find(|m| m.get("role").and_then(|r| r.as_str()) == Some("user"))
                })
                .and_then(|m| m.get("content"))
                .and_then(|c| c.as_str())
                .ok_or_else(|| Error::InvalidInput("request has no user message".into()))?;
            echo_combined(prompt)
        }
    }
}

fn echo_combined(prompt: &str) -> Result<String> {
    const HEADING: &str = "## Combined preliminary forecast";
    let rest = prompt
        .split_once(HEADING)
        .map(|(_, rest)| rest)
        .ok_or_else(|| Error::InvalidInput("prompt has no combined forecast section".into()))?;
    let open = rest
        .find('[')
        .ok_or_else(|| Error::InvalidInput("combined section has no list".into()))?;
    let close = rest[open..]
        .find(']')
        .ok_or_else(|| Error::InvalidInput("combined list is unterminated".into()))?;
    Ok(rest[open..open + close + 1].to_string())
}
