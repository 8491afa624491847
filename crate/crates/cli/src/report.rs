use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use tcgan::imageio::write_atomic;

use crate::error::CliError;

/// Summary of one command, written as `<task>_report.json` next to its outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskReport {
    pub task: String,
    pub software: String,
    pub inputs: BTreeMap<String, String>,
    pub outputs: Vec<String>,
    pub metrics: BTreeMap<String, f64>,
    /// Absent in deterministic mode.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub duration_secs: Option<f64>,
}

impl TaskReport {
    pub fn new(task: &str) -> Self {
        TaskReport {
            task: task.to_string(),
            software: tcgan::training::SOFTWARE.to_string(),
            inputs: BTreeMap::new(),
            outputs: Vec::new(),
            metrics: BTreeMap::new(),
            duration_secs: None,
        }
    }

    pub fn input(&mut self, key: &str, value: impl ToString) -> &mut Self {
        self.inputs.insert(key.to_string(), value.to_string());
        self
    }

    pub fn output(&mut self, path: &Path) -> &mut Self {
        self.outputs.push(path.display().to_string());
        self
    }

    pub fn metric(&mut self, key: &str, value: f64) -> &mut Self {
        self.metrics.insert(key.to_string(), value);
        self
    }

    pub fn timed(&mut self, started: Instant, record: bool) -> &mut Self {
        self.duration_secs = record.then(|| started.elapsed().as_secs_f64());
        self
    }

    pub fn path_in(&self, dir: &Path) -> PathBuf {
        dir.join(format!("{}_report.json", self.task))
    }

    /// Writes the report atomically into `dir` and returns its path.
    pub fn write(&self, dir: &Path) -> Result<PathBuf, CliError> {
        let path = self.path_in(dir);
        let mut text = serde_json::to_string_pretty(self).map_err(tcgan::Error::from)?;
        text.push('\n');
        write_atomic(&path, text.as_bytes())?;
        Ok(path)
    }
}
