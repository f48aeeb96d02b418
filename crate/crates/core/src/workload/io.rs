//! Trace file format.
//!
//! Line 1 is a JSON header `{format_version, spec, batch_size, seed,
//! num_steps, checksum}`. Every following line is one [`TraceStep`] as a JSON
//! object with fields in declaration order. Reals are written with 17
//! significant digits so that reading back is bit-exact. `checksum` is the
//! SHA-256 of the body bytes (everything after the header line).

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{ModelSpec, Trace, TraceStep};
use crate::error::{Error, Result};

pub const TRACE_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    spec: ModelSpec,
    batch_size: usize,
    seed: u64,
    num_steps: usize,
    checksum: String,
}

fn write_reals(out: &mut String, values: &[f64]) {
    out.push('[');
    for (i, v) in values.iter().enumerate() {
        if i > 0 {
            out.push(',');
        }
        write!(out, "{v:.16e}").unwrap();
    }
    out.push(']');
}

fn encode_step(out: &mut String, step: &TraceStep) {
    write!(out, "{{\"layer\":{},\"hidden\":", step.layer).unwrap();
    write_reals(out, &step.hidden);
    out.push_str(",\"gate_weights\":");
    write_reals(out, &step.gate_weights);
    out.push_str(",\"active_experts\":");
    out.push_str(&serde_json::to_string(&step.active_experts).unwrap());
    out.push_str(",\"tokens_per_expert\":");
    out.push_str(&serde_json::to_string(&step.tokens_per_expert).unwrap());
    out.push_str("}\n");
}

pub(crate) fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().fold(String::with_capacity(64), |mut s, b| {
        write!(s, "{b:02x}").unwrap();
        s
    })
}

fn encode_body(trace: &Trace) -> String {
    let mut body = String::new();
    for step in &trace.steps {
        encode_step(&mut body, step);
    }
    body
}

/// SHA-256 of the serialised body; identifies the trace contents.
pub fn trace_checksum(trace: &Trace) -> String {
    sha256_hex(encode_body(trace).as_bytes())
}

pub fn write_trace(trace: &Trace, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let body = encode_body(trace);
    let header = Header {
        format_version: TRACE_FORMAT_VERSION,
        spec: trace.spec.clone(),
        batch_size: trace.batch_size,
        seed: trace.seed,
        num_steps: trace.steps.len(),
        checksum: sha256_hex(body.as_bytes()),
    };
    let mut text = serde_json::to_string(&header)?;
    text.push('\n');
    text.push_str(&body);
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_trace(path: impl AsRef<Path>) -> Result<Trace> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let (header_line, body) = match text.find('\n') {
        Some(i) => (&text[..i], &text[i + 1..]),
        None => (text.as_str(), ""),
    };
    let raw: serde_json::Value =
        serde_json::from_str(header_line).map_err(|e| Error::format(path, format!("header: {e}")))?;
    let found = raw
        .get("format_version")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| Error::format(path, "header lacks format_version"))?;
    if found != u64::from(TRACE_FORMAT_VERSION) {
        return Err(Error::VersionMismatch {
            found: found as u32,
            expected: TRACE_FORMAT_VERSION,
        });
    }
    let header: Header = serde_json::from_value(raw).map_err(|e| Error::format(path, format!("header: {e}")))?;
    let actual = sha256_hex(body.as_bytes());
    if actual != header.checksum {
        return Err(Error::ChecksumMismatch {
            expected: header.checksum,
            actual,
        });
    }
    let steps = body
        .lines()
        .enumerate()
        .map(|(i, line)| {
            serde_json::from_str::<TraceStep>(line).map_err(|e| Error::format(path, format!("line {}: {e}", i + 2)))
        })
        .collect::<Result<Vec<_>>>()?;
    if steps.len() != header.num_steps {
        return Err(Error::format(
            path,
            format!("header announces {} steps, body has {}", header.num_steps, steps.len()),
        ));
    }
    Ok(Trace {
        spec: header.spec,
        batch_size: header.batch_size,
        steps,
        seed: header.seed,
    })
}
