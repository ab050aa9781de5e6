//! Deterministic JSON / JSON Lines helpers. Objects are always emitted with
//! keys in sorted order so identical data produces identical bytes.

use std::io::{self, BufRead, Write};

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;

/// Serializes through `serde_json::Value`, whose maps are key-sorted.
pub fn to_sorted_value<T: Serialize>(value: &T) -> Value {
    serde_json::to_value(value).expect("value is serializable")
}

pub fn value_to_string(value: &Value) -> String {
    serde_json::to_string(value).expect("value is serializable")
}

pub fn to_sorted_string<T: Serialize>(value: &T) -> String {
    value_to_string(&to_sorted_value(value))
}

pub fn to_sorted_string_pretty<T: Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(&to_sorted_value(value)).expect("value is serializable")
}

/// One sorted-key JSON document per line, each line newline-terminated.
pub fn write_jsonl<T: Serialize, W: Write>(mut out: W, items: &[T]) -> io::Result<()> {
    for item in items {
        out.write_all(to_sorted_string(item).as_bytes())?;
        out.write_all(b"\n")?;
    }
    out.flush()
}

pub fn to_jsonl_string<T: Serialize>(items: &[T]) -> String {
    let mut buf = Vec::new();
    write_jsonl(&mut buf, items).expect("writing to memory");
    String::from_utf8(buf).expect("JSON is UTF-8")
}

#[derive(Debug, thiserror::Error)]
pub enum JsonlError {
    #[error("line {line}: {source}")]
    Parse {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Reads JSON Lines, skipping blank lines. Errors carry the 1-based line number.
pub fn read_jsonl<T: DeserializeOwned, R: BufRead>(reader: R) -> Result<Vec<T>, JsonlError> {
    let mut items = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let item = serde_json::from_str(&line).map_err(|source| JsonlError::Parse {
            line: idx + 1,
            source,
        })?;
        items.push(item);
    }
    Ok(items)
}

pub fn from_jsonl_str<T: DeserializeOwned>(text: &str) -> Result<Vec<T>, JsonlError> {
    read_jsonl(text.as_bytes())
}
