//! JSON-lines files whose first line echoes the producing configuration:
//!
//! ```text
//! {"header":{...}}
//! {record}
//! {record}
//! ```

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::corpus::{numbered_lines, write_file};
use crate::error::{Error, Result};

#[derive(Serialize, Deserialize)]
struct HeaderLine {
    header: serde_json::Value,
}

pub fn render<T: Serialize>(header: &serde_json::Value, records: &[T]) -> String {
    let mut out = serde_json::to_string(&HeaderLine {
        header: header.clone(),
    })
    .expect("header serializes");
    out.push('\n');
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("record serializes"));
        out.push('\n');
    }
    out
}

pub fn write<T: Serialize>(path: &Path, header: &serde_json::Value, records: &[T]) -> Result<()> {
    write_file(path, render(header, records).as_bytes())
}

/// Returns the header (`null` when the file has none) and the records.
pub fn parse<T: DeserializeOwned>(text: &str, origin: &Path) -> Result<(serde_json::Value, Vec<T>)> {
    let mut header = serde_json::Value::Null;
    let mut records = Vec::new();
    for (i, (lineno, line)) in numbered_lines(text).enumerate() {
        if i == 0 {
            if let Ok(h) = serde_json::from_str::<HeaderLine>(line) {
                header = h.header;
                continue;
            }
        }
        let rec = serde_json::from_str(line).map_err(|e| Error::Record {
            path: origin.to_path_buf(),
            line: lineno,
            message: e.to_string(),
        })?;
        records.push(rec);
    }
    Ok((header, records))
}

pub fn read<T: DeserializeOwned>(path: &Path) -> Result<(serde_json::Value, Vec<T>)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse(&text, path)
}
