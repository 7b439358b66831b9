//! File formats and provenance.
//!
//! JSON outputs carry a top-level `provenance` field, JSONL outputs start with
//! a `{"provenance": ...}` header line, and CSV outputs start with a `#`
//! comment line. Readers skip these headers, so every file written here can
//! feed a later stage.

use std::fs;
use std::io::{ErrorKind, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::config::PipelineConfig;
use crate::error::{CliError, CliResult};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub tool_version: String,
    pub config_hash: String,
    pub seed: u64,
}

impl Provenance {
    pub fn of(config: &PipelineConfig) -> Self {
        Self {
            tool_version: TOOL_VERSION.into(),
            config_hash: config.hash(),
            seed: config.seed,
        }
    }

    pub fn csv_comment(&self) -> String {
        format!(
            "# tool_version={} config_hash={} seed={}",
            self.tool_version, self.config_hash, self.seed
        )
    }
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(format!("{}: {e}", path.display()))
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        }
    }
    fs::write(path, text).map_err(|e| io_err(path, e))
}

fn read_text(path: &Path) -> CliResult<String> {
    fs::read_to_string(path).map_err(|e| io_err(path, e))
}

/// Serializes `value` as an object with `provenance` added.
pub fn with_provenance<T: Serialize>(value: &T, prov: &Provenance) -> CliResult<Value> {
    let mut v = serde_json::to_value(value).map_err(|e| CliError::Runtime(e.to_string()))?;
    match v.as_object_mut() {
        Some(map) => {
            map.insert("provenance".into(), serde_json::to_value(prov).expect("provenance serializes"));
            Ok(v)
        }
        None => Err(CliError::Runtime("only JSON objects can carry provenance".into())),
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T, prov: &Provenance) -> CliResult<()> {
    let v = with_provenance(value, prov)?;
    let mut text = serde_json::to_string_pretty(&v).expect("value serializes");
    text.push('\n');
    write_text(path, &text)
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> CliResult<T> {
    serde_json::from_str(&read_text(path)?).map_err(|e| io_err(path, e))
}

/// Header line plus one compact record per line. Extra header fields go next
/// to `provenance`.
pub fn write_jsonl<T: Serialize>(
    path: &Path,
    records: &[T],
    prov: &Provenance,
    header_extra: Option<Value>,
) -> CliResult<()> {
    let mut header = serde_json::Map::new();
    header.insert("provenance".into(), serde_json::to_value(prov).expect("provenance serializes"));
    if let Some(Value::Object(extra)) = header_extra {
        header.extend(extra);
    }
    let mut text = serde_json::to_string(&Value::Object(header)).expect("header serializes");
    text.push('\n');
    for r in records {
        text.push_str(&serde_json::to_string(r).map_err(|e| io_err(path, e))?);
        text.push('\n');
    }
    write_text(path, &text)
}

fn is_header(v: &Value) -> bool {
    v.as_object().is_some_and(|m| m.contains_key("provenance"))
}

/// Records of a JSONL file; blank lines and provenance headers are skipped.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> CliResult<Vec<T>> {
    let text = read_text(path)?;
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let v: Value = serde_json::from_str(line).map_err(|e| io_err(path, format!("line {}: {e}", n + 1)))?;
        if is_header(&v) {
            continue;
        }
        out.push(serde_json::from_value(v).map_err(|e| io_err(path, format!("line {}: {e}", n + 1)))?);
    }
    Ok(out)
}

/// The provenance header of a JSONL file, if present.
pub fn read_jsonl_header(path: &Path) -> CliResult<Option<Value>> {
    let text = read_text(path)?;
    let first = text.lines().find(|l| !l.trim().is_empty());
    match first {
        Some(line) => {
            let v: Value = serde_json::from_str(line).map_err(|e| io_err(path, e))?;
            Ok(is_header(&v).then_some(v))
        }
        None => Ok(None),
    }
}

pub fn write_csv(path: &Path, columns: &[&str], rows: &[Vec<String>], prov: &Provenance) -> CliResult<()> {
    let mut text = prov.csv_comment();
    text.push('\n');
    text.push_str(&columns.join(","));
    text.push('\n');
    for r in rows {
        text.push_str(&r.join(","));
        text.push('\n');
    }
    write_text(path, &text)
}

/// Optional float as a CSV cell; absent values are empty.
pub fn csv_cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Writes to standard output; a closed pipe is not an error.
pub fn print_json<T: Serialize>(value: &T, prov: &Provenance) -> CliResult<()> {
    let v = with_provenance(value, prov)?;
    let text = serde_json::to_string_pretty(&v).expect("value serializes");
    match writeln!(std::io::stdout().lock(), "{text}") {
        Err(e) if e.kind() != ErrorKind::BrokenPipe => Err(CliError::Runtime(format!("stdout: {e}"))),
        _ => Ok(()),
    }
}
