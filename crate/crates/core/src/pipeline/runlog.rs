//! JSON-lines run log.

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde_json::{json, Value};

use crate::error::{Error, Result};

/// Appends one JSON object per line; a disabled log drops everything.
#[derive(Debug)]
pub struct RunLog {
    path: Option<PathBuf>,
    writer: Option<BufWriter<File>>,
}

impl RunLog {
    pub fn open(path: &Path) -> Result<Self> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        Ok(Self {
            path: Some(path.to_path_buf()),
            writer: Some(BufWriter::new(file)),
        })
    }

    pub fn disabled() -> Self {
        Self {
            path: None,
            writer: None,
        }
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    pub fn record(&mut self, event: Value) -> Result<()> {
        let (Some(w), Some(p)) = (self.writer.as_mut(), self.path.as_ref()) else {
            return Ok(());
        };
        serde_json::to_writer(&mut *w, &event).map_err(|e| Error::io(p, e.into()))?;
        w.write_all(b"\n").map_err(|e| Error::io(p, e))?;
        w.flush().map_err(|e| Error::io(p, e))
    }

    /// One training step.
    pub fn iteration(
        &mut self,
        stage: &str,
        fold: Option<usize>,
        iteration: usize,
        loss: f64,
        lr: f64,
        terms: &[(&str, f64)],
    ) -> Result<()> {
        let mut e = json!({"event": "iteration", "stage": stage, "iteration": iteration, "loss": loss, "lr": lr});
        if let Some(f) = fold {
            e["fold"] = json!(f);
        }
        for (k, v) in terms {
            e[*k] = json!(v);
        }
        self.record(e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lines_are_json_objects() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("log.jsonl");
        let mut log = RunLog::open(&p).unwrap();
        log.iteration("ssl", None, 0, 1.5, 0.1, &[("on_diagonal", 1.0)]).unwrap();
        log.iteration("finetune", Some(2), 1, 0.5, 0.1, &[]).unwrap();
        let lines: Vec<Value> = std::fs::read_to_string(&p)
            .unwrap()
            .lines()
            .map(|l| serde_json::from_str(l).unwrap())
            .collect();
        assert_eq!(lines.len(), 2);
        assert_eq!(lines[0]["on_diagonal"], 1.0);
        assert_eq!(lines[1]["fold"], 2);
        RunLog::disabled().record(json!({})).unwrap();
    }
}
