//! Client for an oracle running in a child process.
//!
//! Wire format: one UTF-8 JSON object per line on the child's stdin/stdout.
//!
//! ```text
//! -> {"id": 0, "op": "hello"}
//! <- {"id": 0, "ok": true, "version": "1", "dim": 512, "embedding_dim": 128, "labels": ["A", "B"]}
//! -> {"id": 1, "op": "evaluate", "space": "Z", "latent": [0.1, ...]}
//! <- {"id": 1, "ok": true, "face": true, "label": "A", "embedding": [...]}
//! <- {"id": 2, "ok": false, "error": "..."}
//! ```
//!
//! Responses arrive in request order and echo the request id. After a
//! protocol error or timeout the connection is considered desynchronized and
//! refuses further requests.

use std::io::{BufRead, BufReader, Write};
use std::process::{Child, ChildStdin, Command, Stdio};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::model::{GroupLabel, LatentSpaceSpec, LatentVector, OracleVerdict, SpaceTag};

pub const PROTOCOL_VERSION: &str = "1";
pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(30);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HelloInfo {
    pub version: String,
    pub dim: usize,
    pub embedding_dim: Option<usize>,
    pub labels: Vec<GroupLabel>,
}

pub struct ExternalOracle {
    command: Vec<String>,
    child: Child,
    stdin: Option<ChildStdin>,
    lines: Receiver<std::io::Result<String>>,
    next_id: u64,
    timeout: Duration,
    space: LatentSpaceSpec,
    hello: HelloInfo,
    broken: Option<String>,
}

impl std::fmt::Debug for ExternalOracle {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ExternalOracle")
            .field("command", &self.command)
            .field("hello", &self.hello)
            .finish()
    }
}

impl ExternalOracle {
    /// Spawns `command` and performs the hello handshake.
    pub fn spawn(command: &[String], tag: SpaceTag, timeout: Duration) -> Result<Self> {
        let (program, args) = command
            .split_first()
            .ok_or_else(|| Error::invalid("external oracle command is empty"))?;
        let mut child = Command::new(program)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()?;
        let stdin = child.stdin.take();
        let stdout = child.stdout.take().expect("stdout is piped");
        let (tx, rx) = mpsc::channel();
        thread::spawn(move || {
            let mut reader = BufReader::new(stdout);
            loop {
                let mut line = String::new();
                match reader.read_line(&mut line) {
                    Ok(0) => break,
                    Ok(_) => {
                        if tx.send(Ok(line)).is_err() {
                            break;
                        }
                    }
                    Err(e) => {
                        let _ = tx.send(Err(e));
                        break;
                    }
                }
            }
        });

        let mut client = Self {
            command: command.to_vec(),
            child,
            stdin,
            lines: rx,
            next_id: 0,
            timeout,
            // Placeholder until the handshake reports the real dimension.
            space: LatentSpaceSpec::new(tag, 1)?,
            hello: HelloInfo {
                version: String::new(),
                dim: 1,
                embedding_dim: None,
                labels: Vec::new(),
            },
            broken: None,
        };
        let hello = client.handshake()?;
        client.space = LatentSpaceSpec::new(tag, hello.dim)?;
        client.hello = hello;
        Ok(client)
    }

    /// Per-response timeout for subsequent requests.
    pub fn set_timeout(&mut self, timeout: Duration) {
        self.timeout = timeout;
    }

    pub fn hello(&self) -> &HelloInfo {
        &self.hello
    }

    pub fn space(&self) -> LatentSpaceSpec {
        self.space
    }

    pub fn oracle_id(&self) -> String {
        let program = self
            .command
            .iter()
            .map(|s| s.rsplit('/').next().unwrap_or(s))
            .collect::<Vec<_>>()
            .join("_");
        format!("ext-{program}")
    }

    fn handshake(&mut self) -> Result<HelloInfo> {
        let (_, raw, v) = self.round_trip(json!({"op": "hello"}))?;
        let version = v
            .get("version")
            .and_then(Value::as_str)
            .ok_or_else(|| protocol("hello response lacks version", &raw))?;
        if version != PROTOCOL_VERSION {
            return Err(self.poison(protocol(
                &format!("unsupported protocol version {version:?}"),
                &raw,
            )));
        }
        let dim = v
            .get("dim")
            .and_then(Value::as_u64)
            .filter(|&d| d > 0)
            .ok_or_else(|| protocol("hello response lacks a positive dim", &raw))?;
        let embedding_dim = match v.get("embedding_dim") {
            None | Some(Value::Null) => None,
            Some(x) => Some(
                x.as_u64()
                    .ok_or_else(|| protocol("embedding_dim is not an integer", &raw))?
                    as usize,
            ),
        };
        let labels = v
            .get("labels")
            .and_then(Value::as_array)
            .ok_or_else(|| protocol("hello response lacks labels", &raw))?
            .iter()
            .map(|l| {
                l.as_str()
                    .ok_or_else(|| protocol("label is not a string", &raw))
                    .and_then(|s| GroupLabel::new(s).map_err(|e| protocol(&e.to_string(), &raw)))
            })
            .collect::<Result<Vec<_>>>()?;
        crate::model::validate_label_set(&labels).map_err(|e| protocol(&e.to_string(), &raw))?;
        Ok(HelloInfo {
            version: version.to_string(),
            dim: dim as usize,
            embedding_dim,
            labels,
        })
    }

    pub fn evaluate(&mut self, v: &LatentVector) -> Result<OracleVerdict> {
        if v.space() != self.space {
            return Err(Error::DimensionMismatch {
                expected: self.space.dim(),
                got: v.dim(),
            });
        }
        let latent: Vec<f64> = v.to_f64();
        let (_, raw, resp) = self.round_trip(json!({
            "op": "evaluate",
            "space": self.space.tag().as_str(),
            "latent": latent,
        }))?;
        decode_verdict(&resp, &raw, &self.hello).map_err(|e| self.poison(e))
    }

    fn poison(&mut self, e: Error) -> Error {
        self.broken = Some(e.to_string());
        e
    }

    /// Sends one request and returns (id, raw line, parsed ok-response).
    fn round_trip(&mut self, mut request: Value) -> Result<(u64, String, Value)> {
        let id = self.next_id;
        self.next_id += 1;
        if let Some(reason) = &self.broken {
            return Err(Error::Transport {
                id,
                message: format!("connection unusable after earlier failure: {reason}"),
            });
        }
        request["id"] = json!(id);
        let mut line = serde_json::to_string(&request).expect("request serializes");
        line.push('\n');
        let stdin = self.stdin.as_mut().ok_or_else(|| Error::Transport {
            id,
            message: "stdin closed".into(),
        })?;
        if let Err(e) = stdin.write_all(line.as_bytes()).and_then(|_| stdin.flush()) {
            let err = Error::Transport {
                id,
                message: e.to_string(),
            };
            return Err(self.poison(err));
        }
        let raw = match self.lines.recv_timeout(self.timeout) {
            Ok(Ok(raw)) => raw,
            Ok(Err(e)) => {
                let err = Error::Transport {
                    id,
                    message: e.to_string(),
                };
                return Err(self.poison(err));
            }
            Err(RecvTimeoutError::Timeout) => {
                let err = Error::Timeout {
                    id,
                    timeout: self.timeout,
                };
                return Err(self.poison(err));
            }
            Err(RecvTimeoutError::Disconnected) => {
                let err = Error::Transport {
                    id,
                    message: "oracle closed its output".into(),
                };
                return Err(self.poison(err));
            }
        };
        if !raw.ends_with('\n') {
            return Err(self.poison(protocol("response line not newline-terminated", &raw)));
        }
        let raw = raw.trim_end_matches(['\n', '\r']).to_string();
        let value: Value = match serde_json::from_str(&raw) {
            Ok(v) => v,
            Err(e) => return Err(self.poison(protocol(&format!("invalid JSON: {e}"), &raw))),
        };
        match value.get("id").and_then(Value::as_u64) {
            Some(got) if got == id => {}
            Some(got) => {
                return Err(self.poison(protocol(
                    &format!("response id {got} does not echo request id {id}"),
                    &raw,
                )))
            }
            None => return Err(self.poison(protocol("response lacks id", &raw))),
        }
        match value.get("ok").and_then(Value::as_bool) {
            Some(true) => Ok((id, raw, value)),
            Some(false) => {
                let message = value
                    .get("error")
                    .and_then(Value::as_str)
                    .unwrap_or("unspecified oracle error")
                    .to_string();
                Err(Error::Transport { id, message })
            }
            None => Err(self.poison(protocol("response lacks boolean ok", &raw))),
        }
    }
}

fn protocol(message: &str, raw: &str) -> Error {
    Error::Protocol {
        message: message.to_string(),
        raw: raw.to_string(),
    }
}

fn decode_verdict(v: &Value, raw: &str, hello: &HelloInfo) -> Result<OracleVerdict> {
    let face = v
        .get("face")
        .and_then(Value::as_bool)
        .ok_or_else(|| protocol("response lacks boolean face", raw))?;
    let label = match v.get("label") {
        None | Some(Value::Null) => None,
        Some(Value::String(s)) => {
            let l = GroupLabel::new(s.as_str()).map_err(|e| protocol(&e.to_string(), raw))?;
            if !hello.labels.contains(&l) {
                return Err(protocol(&format!("label {l} not announced in hello"), raw));
            }
            Some(l)
        }
        Some(_) => return Err(protocol("label is neither string nor null", raw)),
    };
    let embedding = match v.get("embedding") {
        None | Some(Value::Null) => None,
        Some(Value::Array(xs)) => {
            let e = xs
                .iter()
                .map(|x| x.as_f64().ok_or_else(|| protocol("embedding entry is not a number", raw)))
                .collect::<Result<Vec<f64>>>()?;
            if let Some(d) = hello.embedding_dim {
                if e.len() != d {
                    return Err(protocol(
                        &format!("embedding has {} values, hello announced {d}", e.len()),
                        raw,
                    ));
                }
            }
            Some(e)
        }
        Some(_) => return Err(protocol("embedding is neither array nor null", raw)),
    };
    OracleVerdict::new(face, label, embedding).map_err(|e| protocol(&e.to_string(), raw))
}

impl Drop for ExternalOracle {
    fn drop(&mut self) {
        // Closing stdin lets a well-behaved oracle exit on end-of-stream.
        drop(self.stdin.take());
        for _ in 0..20 {
            if let Ok(Some(_)) = self.child.try_wait() {
                return;
            }
            thread::sleep(Duration::from_millis(5));
        }
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}
