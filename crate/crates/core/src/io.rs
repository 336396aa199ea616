//! Binary artifact framing: one line of JSON header, a `\n`, then a raw
//! little-endian payload.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};

pub fn write_framed(path: &Path, header: &impl Serialize, payload: &[u8]) -> Result<()> {
    let mut bytes = serde_json::to_vec(header)?;
    bytes.push(b'\n');
    bytes.extend_from_slice(payload);
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Splits a framed file into its parsed header and raw payload.
pub fn read_framed<H: DeserializeOwned>(path: &Path) -> Result<(H, Vec<u8>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    split_framed(&bytes)
}

pub fn split_framed<H: DeserializeOwned>(bytes: &[u8]) -> Result<(H, Vec<u8>)> {
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::MalformedHeader("no header terminator".into()))?;
    let header =
        serde_json::from_slice(&bytes[..nl]).map_err(|e| Error::MalformedHeader(e.to_string()))?;
    Ok((header, bytes[nl + 1..].to_vec()))
}

pub fn push_f64s(out: &mut Vec<u8>, values: &[f64]) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

/// Reads little-endian `f64`s from the front of `bytes`, advancing it.
pub fn take_f64s(bytes: &mut &[u8], count: usize) -> Result<Vec<f64>> {
    let need = count * 8;
    if bytes.len() < need {
        return Err(Error::Truncated {
            expected: need,
            found: bytes.len(),
        });
    }
    let (head, rest) = bytes.split_at(need);
    *bytes = rest;
    Ok(head
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect())
}

pub fn take_u8s<'a>(bytes: &mut &'a [u8], count: usize) -> Result<&'a [u8]> {
    if bytes.len() < count {
        return Err(Error::Truncated {
            expected: count,
            found: bytes.len(),
        });
    }
    let (head, rest) = bytes.split_at(count);
    *bytes = rest;
    Ok(head)
}

pub fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

/// Finishes an in-memory CSV writer.
pub fn csv_string(w: csv::Writer<Vec<u8>>) -> String {
    let bytes = w.into_inner().expect("flushing into a Vec cannot fail");
    String::from_utf8(bytes).expect("csv fields are utf-8")
}
