//! Machine-readable metrics: one JSON object per line, one file per run.
//!
//! Every record printed to stdout is also in the file — scripts may scrape
//! either. Records carry no timestamps; reruns of the same invocation
//! produce byte-identical files.

use std::fmt::Write as _;
use std::fs::File;
use std::io::Write as _;
use std::path::Path;

use xattnlab_core::rng::Fnv64;

use crate::CliError;

/// Deterministic run identity: a hash of the subcommand, its inputs, and
/// the resolved configuration. Reruns share it; any changed input moves it.
pub fn run_id(parts: &[&str]) -> String {
    let mut h = Fnv64::new();
    for p in parts {
        h.update(p.as_bytes());
        h.update(b"\n");
    }
    format!("{:016x}", h.finish())
}

pub struct MetricsWriter {
    file: File,
    run_id: String,
}

impl MetricsWriter {
    pub fn create(out_dir: &Path, run_id: String) -> Result<Self, CliError> {
        let path = out_dir.join("metrics.jsonl");
        let file = File::create(&path)
            .map_err(|e| CliError::Usage(format!("cannot create {}: {e}", path.display())))?;
        Ok(MetricsWriter { file, run_id })
    }

    /// Switch identity mid-file (used by sweeps: one run id per row).
    pub fn set_run_id(&mut self, run_id: String) {
        self.run_id = run_id;
    }

    pub fn run_id(&self) -> &str {
        &self.run_id
    }

    /// Write one record and echo it to stdout.
    pub fn emit(&mut self, step: Option<usize>, metric: &str, value: f64) -> Result<(), CliError> {
        if !value.is_finite() {
            return Err(CliError::Usage(format!(
                "metric {metric} has non-finite value {value}"
            )));
        }
        let mut obj = serde_json::Map::new();
        obj.insert("run_id".into(), serde_json::Value::String(self.run_id.clone()));
        if let Some(s) = step {
            obj.insert("step".into(), serde_json::Value::from(s));
        }
        obj.insert("metric".into(), serde_json::Value::String(metric.into()));
        obj.insert(
            "value".into(),
            serde_json::Value::from(value),
        );
        let mut line = String::new();
        write!(line, "{}", serde_json::Value::Object(obj)).expect("string write");
        println!("{line}");
        line.push('\n');
        self.file
            .write_all(line.as_bytes())
            .map_err(|e| CliError::Usage(format!("cannot write metrics: {e}")))
    }
}
