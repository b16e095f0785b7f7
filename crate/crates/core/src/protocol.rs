//! Newline-delimited JSON logit protocol.
//!
//! One JSON object per line in each direction, strictly request/response:
//!
//! ```text
//! > {"op":"hello"}
//! < {"vocab_size":32000,"fingerprint":"0123456789abcdef","name":"tinyllama"}
//! > {"id":1,"op":"logits","context":[0,17,923]}
//! < {"id":1,"logits":[-3.25,...]}          or {"id":1,"error":"..."}
//! ```
//!
//! [`RemoteProvider`] is the client; [`serve`] answers requests from any
//! [`LogitProvider`], which is how the reference LM is exposed over a socket.

use std::io::{BufRead, BufReader, Write};
use std::net::{TcpListener, TcpStream};
use std::process::{Child, ChildStdin, ChildStdout, Command, Stdio};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::provider::{LogitProvider, LogitVector, ProviderDescriptor, ProviderKind};
use crate::tokenizer::{Fingerprint, TokenId, Vocabulary};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "lowercase")]
pub enum Request {
    Hello {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        id: Option<u64>,
    },
    Logits {
        id: u64,
        context: Vec<TokenId>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HelloResponse {
    pub vocab_size: u32,
    pub fingerprint: String,
    pub name: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Response {
    Logits { id: u64, logits: Vec<f64> },
    Error { id: u64, error: String },
}

/// Where a remote provider lives.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Endpoint {
    /// `host:port`
    Tcp(String),
    /// `exec:program arg...`, spoken over the child's stdin/stdout.
    Exec(Vec<String>),
}

impl Endpoint {
    pub fn parse(spec: &str) -> Result<Self> {
        if let Some(cmd) = spec.strip_prefix("exec:") {
            let argv: Vec<String> = cmd.split_whitespace().map(str::to_string).collect();
            if argv.is_empty() {
                return Err(Error::InvalidConfig("exec endpoint needs a command".into()));
            }
            Ok(Self::Exec(argv))
        } else if spec.contains(':') {
            Ok(Self::Tcp(spec.to_string()))
        } else {
            Err(Error::InvalidConfig(format!("remote address {spec:?} is not host:port or exec:CMD")))
        }
    }
}

/// Client half of the protocol. One in-flight request at a time.
pub struct RemoteProvider {
    reader: Box<dyn BufRead + Send>,
    writer: Box<dyn Write + Send>,
    child: Option<Child>,
    endpoint: Option<Endpoint>,
    descriptor: ProviderDescriptor,
    next_id: u64,
}

impl RemoteProvider {
    pub fn connect(endpoint: &Endpoint, vocab: &Vocabulary) -> Result<Self> {
        Self::connect_expecting(endpoint, vocab.fingerprint(), vocab.len())
    }

    fn connect_expecting(endpoint: &Endpoint, expected: Fingerprint, vocab_size: usize) -> Result<Self> {
        let mut provider = match endpoint {
            Endpoint::Tcp(addr) => {
                let stream = TcpStream::connect(addr).map_err(Error::Transport)?;
                stream.set_nodelay(true).map_err(Error::Transport)?;
                let reader = BufReader::new(stream.try_clone().map_err(Error::Transport)?);
                Self::handshake(Box::new(reader), Box::new(stream), None, expected, vocab_size)?
            }
            Endpoint::Exec(argv) => {
                let mut child = Command::new(&argv[0])
                    .args(&argv[1..])
                    .stdin(Stdio::piped())
                    .stdout(Stdio::piped())
                    .spawn()
                    .map_err(Error::Transport)?;
                let stdin: ChildStdin = child.stdin.take().expect("piped stdin");
                let stdout: ChildStdout = child.stdout.take().expect("piped stdout");
                Self::handshake(Box::new(BufReader::new(stdout)), Box::new(stdin), Some(child), expected, vocab_size)?
            }
        };
        provider.endpoint = Some(endpoint.clone());
        Ok(provider)
    }

    /// Runs the hello exchange over an already-open stream pair, expecting
    /// the server to advertise `expected` and `vocab_size`.
    pub fn handshake(
        reader: Box<dyn BufRead + Send>,
        writer: Box<dyn Write + Send>,
        child: Option<Child>,
        expected: Fingerprint,
        vocab_size: usize,
    ) -> Result<Self> {
        let mut this = Self {
            reader,
            writer,
            child,
            endpoint: None,
            descriptor: ProviderDescriptor {
                kind: ProviderKind::Remote,
                name: String::new(),
                vocab_size,
                fingerprint: expected,
                context_limit: usize::MAX,
            },
            next_id: 1,
        };
        this.send(&Request::Hello { id: None })?;
        let line = this.recv_line()?;
        let hello: HelloResponse =
            serde_json::from_str(&line).map_err(|e| Error::Protocol(format!("bad hello response: {e}")))?;
        let fp = Fingerprint::from_hex(&hello.fingerprint)
            .map_err(|e| Error::Protocol(format!("bad fingerprint in hello: {e}")))?;
        if fp != expected {
            return Err(Error::FingerprintMismatch { expected: expected.to_hex(), found: fp.to_hex() });
        }
        if hello.vocab_size as usize != vocab_size {
            return Err(Error::Protocol(format!("server vocab_size {} != local {vocab_size}", hello.vocab_size)));
        }
        this.descriptor.name = hello.name;
        Ok(this)
    }

    fn send(&mut self, req: &Request) -> Result<()> {
        let mut line = serde_json::to_vec(req)?;
        line.push(b'\n');
        self.writer.write_all(&line).map_err(Error::Transport)?;
        self.writer.flush().map_err(Error::Transport)
    }

    fn recv_line(&mut self) -> Result<String> {
        let mut line = String::new();
        let n = self.reader.read_line(&mut line).map_err(Error::Transport)?;
        if n == 0 {
            return Err(Error::Transport(std::io::Error::new(
                std::io::ErrorKind::UnexpectedEof,
                "server closed the connection",
            )));
        }
        Ok(line)
    }
}

impl Drop for RemoteProvider {
    fn drop(&mut self) {
        if let Some(child) = self.child.as_mut() {
            let _ = child.kill();
            let _ = child.wait();
        }
    }
}

impl LogitProvider for RemoteProvider {
    fn descriptor(&self) -> &ProviderDescriptor {
        &self.descriptor
    }

    fn next_logits(&mut self, context: &[TokenId]) -> Result<LogitVector> {
        self.descriptor.check_context(context)?;
        let id = self.next_id;
        self.next_id += 1;
        self.send(&Request::Logits { id, context: context.to_vec() })?;
        let line = self.recv_line()?;
        let resp: Response =
            serde_json::from_str(&line).map_err(|e| Error::Protocol(format!("bad logits response: {e}")))?;
        match resp {
            Response::Logits { id: got, logits } => {
                if got != id {
                    return Err(Error::Protocol(format!("response id {got} for request {id}")));
                }
                LogitVector::validated(logits, context.len(), self.descriptor.vocab_size)
            }
            Response::Error { id: got, error } => {
                if got != id {
                    return Err(Error::Protocol(format!("response id {got} for request {id}")));
                }
                Err(Error::Remote(error))
            }
        }
    }

    fn fork(&self) -> Result<Box<dyn LogitProvider>> {
        let endpoint = self
            .endpoint
            .as_ref()
            .ok_or_else(|| Error::InvalidConfig("remote provider without endpoint cannot fork".into()))?;
        let fork = Self::connect_expecting(endpoint, self.descriptor.fingerprint, self.descriptor.vocab_size)?;
        Ok(Box::new(fork))
    }
}

fn error_line(id: u64, msg: impl Into<String>) -> Response {
    Response::Error { id, error: msg.into() }
}

/// Answers requests on one connection until EOF. Malformed JSON gets an
/// error response (id 0) and closes the connection.
pub fn serve<R: BufRead, W: Write>(
    provider: &mut dyn LogitProvider,
    name: &str,
    mut reader: R,
    mut writer: W,
) -> Result<()> {
    let mut line = String::new();
    loop {
        line.clear();
        if reader.read_line(&mut line).map_err(Error::Transport)? == 0 {
            return Ok(());
        }
        if line.trim().is_empty() {
            continue;
        }
        let (out, close) = match serde_json::from_str::<Request>(&line) {
            Err(e) => (serde_json::to_vec(&error_line(0, format!("malformed request: {e}")))?, true),
            Ok(Request::Hello { .. }) => {
                let d = provider.descriptor();
                let hello = HelloResponse {
                    vocab_size: d.vocab_size as u32,
                    fingerprint: d.fingerprint.to_hex(),
                    name: name.to_string(),
                };
                (serde_json::to_vec(&hello)?, false)
            }
            Ok(Request::Logits { id, context }) => {
                let resp = match provider.next_logits(&context) {
                    Ok(l) => Response::Logits { id, logits: l.values },
                    Err(e) => error_line(id, e.to_string()),
                };
                (serde_json::to_vec(&resp)?, false)
            }
        };
        writer.write_all(&out).map_err(Error::Transport)?;
        writer.write_all(b"\n").map_err(Error::Transport)?;
        writer.flush().map_err(Error::Transport)?;
        if close {
            return Ok(());
        }
    }
}

/// Accepts connections forever, one thread and one forked provider each.
pub fn serve_tcp(listener: TcpListener, provider: &dyn LogitProvider, name: &str) -> Result<()> {
    for stream in listener.incoming() {
        let stream = stream.map_err(Error::Transport)?;
        let mut worker = provider.fork()?;
        let name = name.to_string();
        std::thread::spawn(move || {
            let peer = stream.peer_addr().ok();
            let reader = match stream.try_clone() {
                Ok(s) => BufReader::new(s),
                Err(e) => {
                    tracing::warn!(?peer, "clone failed: {e}");
                    return;
                }
            };
            if let Err(e) = serve(worker.as_mut(), &name, reader, stream) {
                tracing::warn!(?peer, "connection ended with error: {e}");
            }
        });
    }
    Ok(())
}
