//! Versioned JSON envelopes for saved models and reports.

use std::io::{Read, Write};

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;

use crate::error::{FlarsError, Result};

pub const FORMAT_VERSION: u32 = 1;

/// Writes `{"format": kind, "version": 1, "payload": value}`.
pub fn save_json<T: Serialize, W: Write>(kind: &str, value: &T, w: W) -> Result<()> {
    let doc = serde_json::json!({
        "format": kind,
        "version": FORMAT_VERSION,
        "payload": value,
    });
    serde_json::to_writer_pretty(w, &doc)?;
    Ok(())
}

/// Reads an envelope written by [`save_json`], rejecting other formats and
/// versions.
pub fn load_json<T: DeserializeOwned, R: Read>(kind: &str, r: R) -> Result<T> {
    let mut doc: Value = serde_json::from_reader(r)?;
    let format = doc.get("format").and_then(Value::as_str).unwrap_or("");
    if format != kind {
        return Err(FlarsError::SchemaMismatch(format!(
            "expected format `{kind}`, found `{format}`"
        )));
    }
    match doc.get("version").and_then(Value::as_u64) {
        Some(v) if v == FORMAT_VERSION as u64 => {}
        other => {
            return Err(FlarsError::SchemaMismatch(format!(
                "unsupported version {other:?} (this build reads version {FORMAT_VERSION})"
            )))
        }
    }
    let payload = doc
        .get_mut("payload")
        .map(Value::take)
        .ok_or_else(|| FlarsError::SchemaMismatch("missing payload".into()))?;
    serde_json::from_value(payload).map_err(|e| FlarsError::SchemaMismatch(e.to_string()))
}
