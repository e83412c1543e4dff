//! Append-only JSONL event log.
//!
//! Each line is an object with `seq` (strictly increasing), `frame`
//! (non-decreasing), `kind`, and kind-specific fields. Lines are flushed as
//! they are written so an aborted run keeps everything logged so far.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde_json::{Map, Value};

use crate::error::{contract_err, Error, Result};

#[derive(Debug, Default)]
pub struct MetricsLog {
    records: Vec<Value>,
    writer: Option<BufWriter<File>>,
    seq: u64,
    last_frame: u64,
}

impl MetricsLog {
    pub fn in_memory() -> Self {
        Self::default()
    }

    pub fn create(path: &Path) -> Result<Self> {
        Ok(Self {
            writer: Some(BufWriter::new(File::create(path)?)),
            ..Self::default()
        })
    }

    pub fn records(&self) -> &[Value] {
        &self.records
    }

    pub fn into_records(self) -> Vec<Value> {
        self.records
    }

    pub fn emit(&mut self, frame: u64, kind: &str, fields: Value) -> Result<()> {
        if frame < self.last_frame {
            return contract_err(format!("metrics frame went back from {} to {frame}", self.last_frame));
        }
        let mut obj = Map::new();
        obj.insert("seq".into(), self.seq.into());
        obj.insert("frame".into(), frame.into());
        obj.insert("kind".into(), kind.into());
        match fields {
            Value::Object(m) => {
                for (k, v) in m {
                    if obj.contains_key(&k) {
                        return contract_err(format!("metrics field `{k}` is reserved"));
                    }
                    obj.insert(k, v);
                }
            }
            Value::Null => {}
            other => return contract_err(format!("metrics fields must be an object, got {other}")),
        }
        let line = Value::Object(obj);
        if let Some(w) = &mut self.writer {
            serde_json::to_writer(&mut *w, &line)?;
            w.write_all(b"\n")?;
            w.flush()?;
        }
        self.records.push(line);
        self.seq += 1;
        self.last_frame = frame;
        Ok(())
    }
}

/// Reads a JSONL metrics file back into records.
pub fn read_metrics(path: &Path) -> Result<Vec<Value>> {
    let f = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in f.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| Error::Format(format!("{}:{}: {e}", path.display(), i + 1)))?,
        );
    }
    Ok(out)
}

/// Records of one kind.
pub fn of_kind<'a>(records: &'a [Value], kind: &'a str) -> impl Iterator<Item = &'a Value> + 'a {
    records.iter().filter(move |r| r["kind"] == kind)
}
