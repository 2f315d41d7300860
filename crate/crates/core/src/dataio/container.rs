//! The `.fbch` container.
//!
//! ```text
//! offset 0   5 bytes   ASCII magic "FBCH1"
//! offset 5   8 bytes   u64 LE, length L of the JSON header
//! offset 13  L bytes   UTF-8 JSON header (object with "magic", "section", "dtype", ...)
//! offset 13+L          payload: little-endian IEEE-754 values, f32 or f64 per "dtype"
//! ```
//!
//! Each section (`dataset`, `mesmerm`, `params`) defines its own header keys
//! and payload order; this module only frames bytes.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 5] = b"FBCH1";
const PREAMBLE: usize = 13;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    fn width(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

/// A decoded container: the JSON header plus the payload widened to f64.
#[derive(Debug, Clone)]
pub struct Container {
    pub section: String,
    pub dtype: Dtype,
    pub header: Value,
    pub payload: Vec<f64>,
    /// Byte offset of the first payload value, for error reporting.
    pub payload_offset: u64,
}

impl Container {
    /// Offset of payload element `index`, in bytes from the start of the file.
    pub fn offset_of(&self, index: usize) -> u64 {
        self.payload_offset + (index * self.dtype.width()) as u64
    }
}

pub fn encode(section: &str, dtype: Dtype, header: &Value, payload: &[f64]) -> Result<Vec<u8>> {
    let mut header = header.clone();
    let obj = header
        .as_object_mut()
        .ok_or_else(|| Error::invalid("container header must be a JSON object"))?;
    obj.insert("magic".into(), Value::from("FBCH1"));
    obj.insert("section".into(), Value::from(section));
    obj.insert("dtype".into(), serde_json::to_value(dtype).expect("dtype serializes"));
    obj.insert("n_values".into(), Value::from(payload.len() as u64));
    let json = serde_json::to_vec(&header).map_err(|e| Error::invalid(e.to_string()))?;

    let mut out = Vec::with_capacity(PREAMBLE + json.len() + payload.len() * dtype.width());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    match dtype {
        Dtype::F32 => payload
            .iter()
            .for_each(|v| out.extend_from_slice(&(*v as f32).to_le_bytes())),
        Dtype::F64 => payload
            .iter()
            .for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
    }
    Ok(out)
}

pub fn write(path: &Path, section: &str, dtype: Dtype, header: &Value, payload: &[f64]) -> Result<()> {
    let bytes = encode(section, dtype, header, payload)?;
    let mut w = BufWriter::new(fs::File::create(path)?);
    w.write_all(&bytes)?;
    w.flush()?;
    Ok(())
}

pub fn decode(bytes: &[u8]) -> Result<Container> {
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::format(0, "missing FBCH1 magic"));
    }
    if bytes.len() < PREAMBLE {
        return Err(Error::format(bytes.len() as u64, "truncated header length"));
    }
    let len = u64::from_le_bytes(bytes[5..13].try_into().unwrap()) as usize;
    let end = PREAMBLE
        .checked_add(len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| Error::format(bytes.len() as u64, "header runs past end of file"))?;
    let header: Value = serde_json::from_slice(&bytes[PREAMBLE..end])
        .map_err(|e| Error::format(PREAMBLE as u64 + e.column() as u64, format!("malformed header: {e}")))?;
    if header.get("magic").and_then(Value::as_str) != Some("FBCH1") {
        return Err(Error::format(PREAMBLE as u64, "header magic is not FBCH1"));
    }
    let section = header
        .get("section")
        .and_then(Value::as_str)
        .ok_or_else(|| Error::format(PREAMBLE as u64, "header has no section"))?
        .to_string();
    let dtype: Dtype = header
        .get("dtype")
        .cloned()
        .and_then(|v| serde_json::from_value(v).ok())
        .ok_or_else(|| Error::format(PREAMBLE as u64, "header has no valid dtype"))?;
    let n_values = header
        .get("n_values")
        .and_then(Value::as_u64)
        .ok_or_else(|| Error::format(PREAMBLE as u64, "header has no n_values"))? as usize;

    let body = &bytes[end..];
    let width = dtype.width();
    let expected = n_values * width;
    if body.len() < expected {
        let complete = body.len() / width;
        return Err(Error::format(
            (end + complete * width) as u64,
            format!("truncated payload: {complete} of {n_values} values"),
        ));
    }
    if body.len() > expected {
        return Err(Error::format(
            (end + expected) as u64,
            format!("{} trailing bytes after payload", body.len() - expected),
        ));
    }
    let payload = match dtype {
        Dtype::F32 => body
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect(),
        Dtype::F64 => body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect(),
    };
    Ok(Container {
        section,
        dtype,
        header,
        payload,
        payload_offset: end as u64,
    })
}

pub fn read(path: &Path) -> Result<Container> {
    decode(&fs::read(path)?)
}

/// Reads a container and checks its section name.
pub fn read_section(path: &Path, section: &str) -> Result<Container> {
    let c = read(path)?;
    if c.section != section {
        return Err(Error::format(
            PREAMBLE as u64,
            format!("expected section `{section}`, found `{}`", c.section),
        ));
    }
    Ok(c)
}

/// Sequential reader over a container payload with bounds-checked offsets.
pub(crate) struct PayloadCursor<'a> {
    container: &'a Container,
    pos: usize,
}

impl<'a> PayloadCursor<'a> {
    pub fn new(container: &'a Container) -> Self {
        PayloadCursor { container, pos: 0 }
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [f64]> {
        let end = self.pos + n;
        if end > self.container.payload.len() {
            return Err(Error::format(
                self.container.offset_of(self.container.payload.len()),
                format!("dimension mismatch: need {end} values, payload has {}", self.container.payload.len()),
            ));
        }
        let s = &self.container.payload[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    pub fn finish(self) -> Result<()> {
        if self.pos != self.container.payload.len() {
            return Err(Error::format(
                self.container.offset_of(self.pos),
                format!(
                    "dimension mismatch: header accounts for {} values, payload has {}",
                    self.pos,
                    self.container.payload.len()
                ),
            ));
        }
        Ok(())
    }
}

/// Deserializes one header key, reporting a format error on failure.
pub(crate) fn header_field<T: serde::de::DeserializeOwned>(c: &Container, key: &str) -> Result<T> {
    let v = c
        .header
        .get(key)
        .ok_or_else(|| Error::format(PREAMBLE as u64, format!("header missing `{key}`")))?;
    serde_json::from_value(v.clone())
        .map_err(|e| Error::format(PREAMBLE as u64, format!("header field `{key}`: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn wrong_magic() {
        let mut bytes = encode("dataset", Dtype::F32, &json!({}), &[1.0]).unwrap();
        bytes[0] = b'X';
        match decode(&bytes) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 0),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn truncated_payload_reports_offset() {
        let bytes = encode("dataset", Dtype::F32, &json!({}), &[1.0, 2.0, 3.0]).unwrap();
        let cut = &bytes[..bytes.len() - 5];
        match decode(cut) {
            Err(Error::Format { offset, msg }) => {
                assert_eq!(offset as usize, bytes.len() - 12 + 4);
                assert!(msg.contains("truncated"));
            }
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn malformed_header() {
        let mut bytes = encode("dataset", Dtype::F64, &json!({"a": 1}), &[]).unwrap();
        bytes[13] = b'#';
        assert!(matches!(decode(&bytes), Err(Error::Format { .. })));
    }

    #[test]
    fn f64_payload_exact() {
        let vals = [std::f64::consts::PI, -1e-300, 7.0];
        let c = decode(&encode("params", Dtype::F64, &json!({}), &vals).unwrap()).unwrap();
        assert_eq!(c.payload, vals);
        assert_eq!(c.section, "params");
    }
}
