//! Classifiers living in another process or behind a TCP socket.
//!
//! The engine sends `HELLO 1` and expects `OK <class_count>`. Each query is
//! `CLASSIFY <w> <h> <ch>` followed by one line of `w·h·ch` floats in flatten
//! order; the answer is `PROBS` followed by one line of `class_count` floats.

use std::io::{self, BufRead, BufReader, Read, Write};
use std::net::{Shutdown, TcpStream};
use std::process::{Child, Command, Stdio};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::sync::Mutex;
use std::thread;
use std::time::Duration;

use super::{ClassProbs, Oracle, OracleError};
use crate::image::Image;

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(30);

struct Session {
    writer: Box<dyn Write + Send>,
    lines: Receiver<io::Result<String>>,
    child: Option<Child>,
    socket: Option<TcpStream>,
    timeout: Duration,
    broken: Option<String>,
}

impl Session {
    fn send(&mut self, text: &str) -> Result<(), OracleError> {
        self.writer
            .write_all(text.as_bytes())
            .and_then(|_| self.writer.flush())
            .map_err(|e| OracleError::Protocol(format!("write failed: {e}")))
    }

    fn recv(&mut self) -> Result<String, OracleError> {
        match self.lines.recv_timeout(self.timeout) {
            Ok(Ok(line)) => Ok(line.trim_end_matches(['\r', '\n']).to_string()),
            Ok(Err(e)) => Err(OracleError::Protocol(format!("read failed: {e}"))),
            Err(RecvTimeoutError::Timeout) => Err(OracleError::Timeout(self.timeout)),
            Err(RecvTimeoutError::Disconnected) => Err(OracleError::Protocol("oracle closed the connection".into())),
        }
    }

    fn query(&mut self, image: &Image, class_count: usize) -> Result<ClassProbs, OracleError> {
        let (w, h, ch) = image.shape();
        let floats = image.data().iter().map(|v| format!("{v:?}")).collect::<Vec<_>>().join(" ");
        self.send(&format!("CLASSIFY {w} {h} {ch}\n{floats}\n"))?;
        let tag = self.recv()?;
        if tag.trim() != "PROBS" {
            return Err(OracleError::Protocol(format!("unexpected token '{}', expected PROBS", tag.trim())));
        }
        let line = self.recv()?;
        let probs = line
            .split_whitespace()
            .map(|t| {
                t.parse::<f64>()
                    .map_err(|_| OracleError::Protocol(format!("unexpected token '{t}' in PROBS line")))
            })
            .collect::<Result<Vec<_>, _>>()?;
        if probs.len() != class_count {
            return Err(OracleError::Protocol(format!(
                "expected {class_count} probabilities, got {}",
                probs.len()
            )));
        }
        ClassProbs::new(probs)
    }
}

impl Drop for Session {
    fn drop(&mut self) {
        if let Some(socket) = &self.socket {
            let _ = socket.shutdown(Shutdown::Both);
        }
        if let Some(child) = &mut self.child {
            let _ = child.kill();
            let _ = child.wait();
        }
    }
}

/// A remote classifier. Calls are serialised: one request is in flight per
/// connection. After any protocol violation the session refuses further use.
pub struct ExternalOracle {
    session: Mutex<Session>,
    class_count: usize,
}

fn spawn_reader<R: Read + Send + 'static>(source: R) -> Receiver<io::Result<String>> {
    let (tx, rx) = mpsc::channel();
    thread::spawn(move || {
        let mut reader = BufReader::new(source);
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
    rx
}

impl ExternalOracle {
    /// Runs `command` through `sh -c` and talks to it over stdin/stdout.
    pub fn spawn(command: &str, timeout: Duration) -> Result<Self, OracleError> {
        let mut child = Command::new("sh")
            .arg("-c")
            .arg(command)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|source| OracleError::Io {
                path: command.to_string(),
                source,
            })?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = child.stdout.take().expect("piped stdout");
        Self::handshake(Session {
            writer: Box::new(stdin),
            lines: spawn_reader(stdout),
            child: Some(child),
            socket: None,
            timeout,
            broken: None,
        })
    }

    pub fn connect(addr: &str, timeout: Duration) -> Result<Self, OracleError> {
        let stream = TcpStream::connect(addr).map_err(|source| OracleError::Io {
            path: addr.to_string(),
            source,
        })?;
        let clone = || {
            stream.try_clone().map_err(|source| OracleError::Io {
                path: addr.to_string(),
                source,
            })
        };
        let (reader, socket) = (clone()?, clone()?);
        Self::handshake(Session {
            writer: Box::new(stream),
            lines: spawn_reader(reader),
            child: None,
            socket: Some(socket),
            timeout,
            broken: None,
        })
    }

    fn handshake(mut session: Session) -> Result<Self, OracleError> {
        session.send("HELLO 1\n")?;
        let reply = session.recv()?;
        let fields: Vec<&str> = reply.split_whitespace().collect();
        let class_count = match fields.as_slice() {
            ["OK", n] => n
                .parse::<usize>()
                .ok()
                .filter(|&n| n > 0)
                .ok_or_else(|| OracleError::Protocol(format!("invalid class count '{n}' in handshake")))?,
            _ => {
                return Err(OracleError::Protocol(format!(
                    "unexpected handshake reply '{reply}', expected 'OK <class_count>'"
                )))
            }
        };
        Ok(ExternalOracle {
            session: Mutex::new(session),
            class_count,
        })
    }
}

impl Oracle for ExternalOracle {
    fn class_count(&self) -> usize {
        self.class_count
    }

    fn classify(&self, image: &Image) -> Result<ClassProbs, OracleError> {
        let mut session = self.session.lock().unwrap_or_else(|p| p.into_inner());
        if let Some(reason) = &session.broken {
            return Err(OracleError::SessionBroken(reason.clone()));
        }
        let result = session.query(image, self.class_count);
        if let Err(e) = &result {
            session.broken = Some(e.to_string());
        }
        result
    }
}

/// Deliberate protocol violations for exercising client-side validation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ServeFault {
    /// Scales every probability so the vector sums to about 1.1.
    BadSum,
    /// Appends one extra probability.
    WrongCount,
    /// Replies with an unknown tag instead of `PROBS`.
    BadToken,
}

/// Answers the wire protocol on `input`/`output` using `oracle` until the input
/// ends. Malformed requests end the session with an error.
pub fn serve(
    oracle: &dyn Oracle,
    fault: Option<ServeFault>,
    input: impl BufRead,
    mut output: impl Write,
) -> io::Result<()> {
    let bad = |msg: String| io::Error::new(io::ErrorKind::InvalidData, msg);
    let mut lines = input.lines();
    while let Some(line) = lines.next() {
        let line = line?;
        let fields: Vec<&str> = line.split_whitespace().collect();
        match fields.as_slice() {
            [] => continue,
            ["HELLO", "1"] => writeln!(output, "OK {}", oracle.class_count())?,
            ["CLASSIFY", w, h, ch] => {
                let dims = [w, h, ch].map(|s| s.parse::<usize>());
                let [Ok(w), Ok(h), Ok(ch)] = dims else {
                    return Err(bad(format!("bad CLASSIFY header '{line}'")));
                };
                let data_line = lines.next().ok_or_else(|| bad("missing pixel line".into()))??;
                let data = data_line
                    .split_whitespace()
                    .map(|t| t.parse::<f64>().map_err(|_| bad(format!("bad pixel value '{t}'"))))
                    .collect::<Result<Vec<_>, _>>()?;
                let image = Image::new(w, h, ch, data).map_err(|e| bad(e.to_string()))?;
                let probs = oracle.classify(&image).map_err(|e| bad(e.to_string()))?;
                let mut values = probs.probs().to_vec();
                match fault {
                    Some(ServeFault::BadSum) => values.iter_mut().for_each(|p| *p *= 1.1),
                    Some(ServeFault::WrongCount) => values.push(0.0),
                    _ => {}
                }
                let tag = if fault == Some(ServeFault::BadToken) { "PROBZ" } else { "PROBS" };
                let joined = values.iter().map(|v| format!("{v:?}")).collect::<Vec<_>>().join(" ");
                writeln!(output, "{tag}\n{joined}")?;
            }
            _ => return Err(bad(format!("unexpected request '{line}'"))),
        }
        output.flush()?;
    }
    Ok(())
}
