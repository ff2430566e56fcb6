//! Metrics emission: line-delimited JSON, one object per epoch.
//!
//! Wall-clock timings go to a separate `timings.jsonl` so that `metrics.jsonl`
//! is byte-identical across reruns of the same seeded configuration.

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{de::DeserializeOwned, Deserialize, Serialize};

use crate::error::{Error, Result};

/// One epoch of training: loss components on the train split and top-1
/// accuracy on the held-out split named by `split`.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub split: String,
    pub loss_total: f64,
    pub loss_label: f64,
    pub loss_cosub: f64,
    pub top1: f64,
}

/// Wall-clock seconds for one epoch (deliberately kept out of the metrics
/// file; see module docs).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TimingRecord {
    pub epoch: usize,
    pub seconds: f64,
}

/// Streaming JSONL writer that flushes after every record, so partial runs
/// leave complete lines behind.
pub struct JsonlWriter {
    path: String,
    writer: BufWriter<std::fs::File>,
}

impl JsonlWriter {
    pub fn create(path: &Path) -> Result<Self> {
        let file =
            std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        Ok(JsonlWriter { path: path.display().to_string(), writer: BufWriter::new(file) })
    }

    pub fn write<T: Serialize>(&mut self, record: &T) -> Result<()> {
        let line = serde_json::to_string(record)?;
        self.writer
            .write_all(line.as_bytes())
            .and_then(|_| self.writer.write_all(b"\n"))
            .and_then(|_| self.writer.flush())
            .map_err(|e| Error::io(self.path.clone(), e))
    }
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let reader = BufReader::new(file);
    let mut out = Vec::new();
    for line in reader.lines() {
        let line = line.map_err(|e| Error::io(path.display().to_string(), e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}
