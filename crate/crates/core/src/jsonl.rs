//! Line-delimited JSON logs: one serialized record per line. Used for
//! training metrics, latency measurements, routing traces, and search
//! history, so runs can be inspected and analyzed after the fact.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::Serialize;

use crate::tensor::{Result, TensorError};

/// Buffered writer that appends one JSON object per line.
pub struct JsonlWriter {
    w: BufWriter<File>,
}

impl JsonlWriter {
    /// Creates (truncating) the file at `path`.
    pub fn create(path: &Path) -> Result<JsonlWriter> {
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                std::fs::create_dir_all(dir)?;
            }
        }
        Ok(JsonlWriter { w: BufWriter::new(File::create(path)?) })
    }

    /// Opens the file at `path` for appending, creating it if missing.
    pub fn append(path: &Path) -> Result<JsonlWriter> {
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                std::fs::create_dir_all(dir)?;
            }
        }
        let f = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(JsonlWriter { w: BufWriter::new(f) })
    }

    pub fn write(&mut self, value: &impl Serialize) -> Result<()> {
        let line = serde_json::to_string(value)
            .map_err(|e| TensorError::Format(format!("jsonl encode: {e}")))?;
        self.w.write_all(line.as_bytes())?;
        self.w.write_all(b"\n")?;
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        self.w.flush()?;
        Ok(())
    }
}

impl Drop for JsonlWriter {
    fn drop(&mut self) {
        let _ = self.w.flush();
    }
}

/// Reads every line of a JSONL file as a `serde_json::Value`.
pub fn read_values(path: &Path) -> Result<Vec<serde_json::Value>> {
    let f = File::open(path)?;
    let mut out = Vec::new();
    for (lineno, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let v = serde_json::from_str(&line).map_err(|e| {
            TensorError::Format(format!("{}:{}: bad jsonl line: {e}", path.display(), lineno + 1))
        })?;
        out.push(v);
    }
    Ok(out)
}
