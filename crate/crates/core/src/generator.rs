//! Answer generators used to verify annotations and to score end-to-end
//! runs.
//!
//! Remote generators speak a line-delimited JSON protocol: one request
//! `{"query": str, "documents": [{"title": str, "text": str}]}` per line,
//! answered by one `{"answer": str}` line.

use std::io::{BufRead, BufReader, Write};
use std::net::TcpStream;
use std::process::{Child, ChildStdin, ChildStdout, Command, Stdio};
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::corpus::Document;
use crate::error::{Error, Result};

pub trait GeneratorClient: Send + Sync {
    fn generate(&self, query: &str, documents: &[Document]) -> Result<String>;
}

#[derive(Debug, Serialize, Deserialize)]
pub struct WireDocument {
    pub title: String,
    pub text: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct GenerateRequest {
    pub query: String,
    pub documents: Vec<WireDocument>,
}

impl GenerateRequest {
    pub fn new(query: &str, documents: &[Document]) -> Self {
        Self {
            query: query.to_string(),
            documents: documents
                .iter()
                .map(|d| WireDocument {
                    title: d.title.clone(),
                    text: d.text.clone(),
                })
                .collect(),
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct GenerateResponse {
    pub answer: String,
}

fn parse_response(line: &str) -> Result<String> {
    if line.trim().is_empty() {
        return Err(Error::Generator("empty response".into()));
    }
    serde_json::from_str::<GenerateResponse>(line)
        .map(|r| r.answer)
        .map_err(|e| Error::Generator(format!("bad response `{}`: {e}", line.trim())))
}

/// In-process generator backed by a closure.
pub struct CallbackGenerator<F>(pub F);

impl<F> GeneratorClient for CallbackGenerator<F>
where
    F: Fn(&str, &[Document]) -> Result<String> + Send + Sync,
{
    fn generate(&self, query: &str, documents: &[Document]) -> Result<String> {
        (self.0)(query, documents)
    }
}

/// Answers with the concatenated document texts. Under containment
/// matching this is correct exactly when some document states the answer.
pub struct EchoGenerator;

impl GeneratorClient for EchoGenerator {
    fn generate(&self, _query: &str, documents: &[Document]) -> Result<String> {
        Ok(documents.iter().map(|d| d.text.as_str()).collect::<Vec<_>>().join(" "))
    }
}

/// TCP client; one connection per request.
pub struct TcpGenerator {
    addr: String,
    timeout: Duration,
}

impl TcpGenerator {
    pub fn new(addr: impl Into<String>) -> Self {
        Self {
            addr: addr.into(),
            timeout: Duration::from_secs(120),
        }
    }
}

impl GeneratorClient for TcpGenerator {
    fn generate(&self, query: &str, documents: &[Document]) -> Result<String> {
        let fail = |e: std::io::Error| Error::Generator(format!("{}: {e}", self.addr));
        let mut stream = TcpStream::connect(&self.addr).map_err(fail)?;
        stream.set_read_timeout(Some(self.timeout)).map_err(fail)?;
        let mut line = serde_json::to_string(&GenerateRequest::new(query, documents))?;
        line.push('\n');
        stream.write_all(line.as_bytes()).map_err(fail)?;
        stream.flush().map_err(fail)?;
        let mut reply = String::new();
        BufReader::new(stream).read_line(&mut reply).map_err(fail)?;
        parse_response(&reply)
    }
}

/// Long-running subprocess speaking the line protocol on stdin/stdout.
/// Requests are serialized.
pub struct CommandGenerator {
    io: Mutex<(Child, ChildStdin, BufReader<ChildStdout>)>,
}

impl CommandGenerator {
    pub fn spawn(command: &str) -> Result<Self> {
        let mut parts = command.split_whitespace();
        let program = parts.next().ok_or_else(|| Error::invalid("empty generator command"))?;
        let mut child = Command::new(program)
            .args(parts)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .spawn()
            .map_err(|e| Error::Generator(format!("spawn `{command}`: {e}")))?;
        let stdin = child.stdin.take().expect("piped");
        let stdout = BufReader::new(child.stdout.take().expect("piped"));
        Ok(Self {
            io: Mutex::new((child, stdin, stdout)),
        })
    }
}

impl GeneratorClient for CommandGenerator {
    fn generate(&self, query: &str, documents: &[Document]) -> Result<String> {
        let mut guard = self.io.lock().map_err(|_| Error::Generator("generator lock poisoned".into()))?;
        let (_, stdin, stdout) = &mut *guard;
        let mut line = serde_json::to_string(&GenerateRequest::new(query, documents))?;
        line.push('\n');
        let fail = |e: std::io::Error| Error::Generator(e.to_string());
        stdin.write_all(line.as_bytes()).map_err(fail)?;
        stdin.flush().map_err(fail)?;
        let mut reply = String::new();
        stdout.read_line(&mut reply).map_err(fail)?;
        parse_response(&reply)
    }
}

impl Drop for CommandGenerator {
    fn drop(&mut self) {
        if let Ok(mut guard) = self.io.lock() {
            let _ = guard.0.kill();
            let _ = guard.0.wait();
        }
    }
}

/// Builds a generator from an address: `echo`, `cmd:<program args>`, or a
/// TCP `host:port` (optionally prefixed with `tcp://`).
pub fn from_address(addr: &str) -> Result<Box<dyn GeneratorClient>> {
    if addr == "echo" {
        return Ok(Box::new(EchoGenerator));
    }
    if let Some(cmd) = addr.strip_prefix("cmd:") {
        return Ok(Box::new(CommandGenerator::spawn(cmd)?));
    }
    let hostport = addr.strip_prefix("tcp://").unwrap_or(addr);
    if !hostport.contains(':') {
        return Err(Error::invalid(format!("unrecognized generator address `{addr}`")));
    }
    Ok(Box::new(TcpGenerator::new(hostport)))
}
