use std::fs::File;
use std::path::Path;

/// One row per update.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub iteration: u64,
    pub env_steps: u64,
    pub task: String,
    /// Mean return of the episodes finished during this update's collection
    /// (the previous value when none finished).
    pub mean_ep_reward: f64,
    pub pg_loss: f64,
    pub vf_loss: f64,
    pub kl_self_mean: f64,
    pub beta: f64,
    pub wall_ms: u64,
    /// Per-depth self-KL; empty for single-network agents.
    pub kl_depth: Vec<f64>,
}

pub fn metrics_header(n_depths: usize) -> Vec<String> {
    let mut h: Vec<String> = [
        "iteration",
        "env_steps",
        "task",
        "mean_ep_reward",
        "pg_loss",
        "vf_loss",
        "kl_self_mean",
        "beta",
        "wall_ms",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    h.extend((1..=n_depths).map(|k| format!("kl_depth_{k}")));
    h
}

/// Shortest decimal that parses back to the same `f64`.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}

impl MetricsRow {
    pub fn record(&self) -> Vec<String> {
        let mut r = vec![
            self.iteration.to_string(),
            self.env_steps.to_string(),
            self.task.clone(),
            fmt_f64(self.mean_ep_reward),
            fmt_f64(self.pg_loss),
            fmt_f64(self.vf_loss),
            fmt_f64(self.kl_self_mean),
            fmt_f64(self.beta),
            self.wall_ms.to_string(),
        ];
        r.extend(self.kl_depth.iter().map(|&k| fmt_f64(k)));
        r
    }
}

/// Diagnostic row written when an update or the run fails.
#[derive(Clone, Debug, PartialEq)]
pub struct ErrorRow {
    pub iteration: u64,
    pub env_steps: u64,
    pub kind: String,
    pub message: String,
}

pub const ERRORS_HEADER: [&str; 4] = ["iteration", "env_steps", "kind", "message"];

/// Append-only CSV sink, flushed after every row so that a failing run
/// leaves a readable prefix behind.
pub struct CsvSink {
    writer: Option<csv::Writer<File>>,
}

impl CsvSink {
    pub fn disabled() -> Self {
        Self { writer: None }
    }

    pub fn create(path: &Path, header: &[String]) -> std::io::Result<Self> {
        let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_path(path)?;
        w.write_record(header)?;
        w.flush()?;
        Ok(Self { writer: Some(w) })
    }

    pub fn write(&mut self, record: &[String]) -> std::io::Result<()> {
        if let Some(w) = &mut self.writer {
            w.write_record(record)?;
            w.flush()?;
        }
        Ok(())
    }
}

/// Writes a whole table at once.
pub fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> std::io::Result<()> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_path(path)?;
    w.write_record(header)?;
    for r in rows {
        w.write_record(r)?;
    }
    w.flush()
}
