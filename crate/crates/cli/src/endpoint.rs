//! Line-delimited JSON query protocol between `verify --endpoint` and `serve`.
//!
//! Each request is one line `{"tokens": [..], "position": p, "sentinels": [..]}`
//! and each reply is one line `{"logits": [..]}` or `{"error": ".."}`. Logits
//! travel in the same hex-plus-decimal float encoding as the key file, so the
//! verifier sees bit-identical values to an in-process query.

use std::cell::RefCell;
use std::io::{BufRead, BufReader, Write};
use std::process::{Child, ChildStdin, ChildStdout, Command, Stdio};

use anyhow::{anyhow, bail, Context};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use submark::key::{decode_floats, encode_floats};
use submark::nalgebra::DVector;
use submark::verify_black::LogitQuery;
use submark::Error;

#[derive(Serialize, Deserialize)]
struct Request {
    tokens: Vec<usize>,
    position: usize,
    sentinels: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum Reply {
    Logits(Vec<f64>),
    Error(String),
}

/// Answers requests from `input` with `query` until end of input.
pub fn serve(query: &dyn LogitQuery, input: impl BufRead, mut output: impl Write) -> anyhow::Result<()> {
    for line in input.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let reply = match serde_json::from_str::<Request>(&line) {
            Ok(req) => match query.sentinel_logits(&req.tokens, req.position, &req.sentinels) {
                Ok(l) => Reply::Logits(l.as_slice().to_vec()),
                Err(e) => Reply::Error(e.to_string()),
            },
            Err(e) => Reply::Error(format!("bad request: {e}")),
        };
        let v = encode_floats(serde_json::to_value(&reply)?);
        writeln!(output, "{}", serde_json::to_string(&v)?)?;
        output.flush()?;
    }
    Ok(())
}

struct Pipe {
    child: Child,
    stdin: ChildStdin,
    stdout: BufReader<ChildStdout>,
}

/// A query interface backed by an external process speaking the protocol.
pub struct Endpoint {
    pipe: RefCell<Pipe>,
}

impl Endpoint {
    /// Spawns `command`, split on whitespace without a shell.
    pub fn spawn(command: &str) -> anyhow::Result<Self> {
        let mut parts = command.split_whitespace();
        let program = parts.next().ok_or_else(|| anyhow!("empty endpoint command"))?;
        let mut child = Command::new(program)
            .args(parts)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .with_context(|| format!("starting endpoint {program:?}"))?;
        let stdin = child.stdin.take().ok_or_else(|| anyhow!("endpoint stdin unavailable"))?;
        let stdout = BufReader::new(child.stdout.take().ok_or_else(|| anyhow!("endpoint stdout unavailable"))?);
        Ok(Self { pipe: RefCell::new(Pipe { child, stdin, stdout }) })
    }

    fn exchange(&self, req: &Request) -> anyhow::Result<Vec<f64>> {
        let mut pipe = self.pipe.borrow_mut();
        writeln!(pipe.stdin, "{}", serde_json::to_string(req)?)?;
        pipe.stdin.flush()?;
        let mut line = String::new();
        if pipe.stdout.read_line(&mut line)? == 0 {
            bail!("endpoint closed its output");
        }
        let v: Value = serde_json::from_str(&line)?;
        match serde_json::from_value(decode_floats(v)?)? {
            Reply::Logits(l) => Ok(l),
            Reply::Error(e) => bail!("endpoint error: {e}"),
        }
    }
}

impl LogitQuery for Endpoint {
    fn sentinel_logits(&self, tokens: &[usize], position: usize, sentinels: &[usize]) -> submark::Result<DVector<f64>> {
        let req = Request { tokens: tokens.to_vec(), position, sentinels: sentinels.to_vec() };
        let logits = self.exchange(&req).map_err(|e| Error::InvalidArgument(format!("{e:#}")))?;
        if logits.len() != sentinels.len() {
            return Err(Error::DimensionMismatch(format!("endpoint returned {} logits for {} sentinels", logits.len(), sentinels.len())));
        }
        Ok(DVector::from_vec(logits))
    }
}

impl Drop for Endpoint {
    fn drop(&mut self) {
        let pipe = self.pipe.get_mut();
        let _ = pipe.child.kill();
        let _ = pipe.child.wait();
    }
}
