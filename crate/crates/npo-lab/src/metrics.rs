//! Structured metrics streams.
//!
//! A run appends one self-describing JSON record per line: a step record per
//! training step plus event records for controller actions. serde_json
//! prints f64 values with the shortest representation that round-trips
//! bit-exactly, so replay verification can diff streams field by field.
//! Within a plain run steps are strictly increasing; a rollback event marks
//! the one place the step counter legitimately rewinds.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::controller::RollbackCandidate;
use crate::error::{NpoError, Result};

/// Per-step training metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StepRecord {
    pub step: u64,
    /// Mean on-policy pass rate over the batch (before any slot injection).
    pub reward_mean: f64,
    pub reward_ema: f64,
    /// Mean per-token sampling entropy over the batch, in nats.
    pub entropy_mean: f64,
    /// Groups whose last slot was replaced by a guide trajectory.
    pub groups_replaced: u32,
    pub gradient_norm: f64,
    pub pool_size: u64,
}

/// Controller and trainer lifecycle events.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Event {
    /// Stage-1 trigger: stagnation plus entropy decline persisted.
    Warning { alert: u32 },
    /// Stage-2 trigger: one confirmation rollout over pooled prompts.
    Confirm {
        p_hat: f64,
        probed: usize,
        candidates: Vec<RollbackCandidate>,
    },
    /// Rollback decision: replay from `target_step` with guidance.
    Rollback { delta_star: u64, target_step: u64 },
    /// Confirmation declined a rollback (gate failed or no candidate).
    Declined { p_hat: f64, reason: String },
    /// A retro segment caught back up with the trigger step.
    Resume { resume_step: u64 },
    /// Trigger disarmed until the given step.
    CooldownStart { until: u64 },
    /// A guidance cache was built (entries out of prompts attempted).
    CacheBuilt {
        guide_step: u64,
        entries: usize,
        prompts: usize,
    },
    /// Training aborted on a non-finite loss or gradient.
    Abort { message: String },
}

/// One record carrying a controller event, stamped with the emitting step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EventRecord {
    pub step: u64,
    pub event: Event,
}

/// A line in the metrics stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MetricsRecord {
    Event(EventRecord),
    Step(StepRecord),
}

impl MetricsRecord {
    pub fn step(&self) -> u64 {
        match self {
            MetricsRecord::Event(e) => e.step,
            MetricsRecord::Step(s) => s.step,
        }
    }

    pub fn as_step(&self) -> Option<&StepRecord> {
        match self {
            MetricsRecord::Step(s) => Some(s),
            MetricsRecord::Event(_) => None,
        }
    }

    pub fn as_event(&self) -> Option<&EventRecord> {
        match self {
            MetricsRecord::Event(e) => Some(e),
            MetricsRecord::Step(_) => None,
        }
    }
}

/// Append-only metrics writer. Each record is flushed as one line so tail
/// readers and crash dumps always see whole records.
pub struct MetricsWriter {
    out: BufWriter<fs::File>,
    path: PathBuf,
}

impl MetricsWriter {
    pub fn create(path: impl Into<PathBuf>) -> Result<Self> {
        let path = path.into();
        let file = fs::File::create(&path).map_err(|e| NpoError::io(&path, e))?;
        Ok(MetricsWriter {
            out: BufWriter::new(file),
            path,
        })
    }

    pub fn write(&mut self, record: &MetricsRecord) -> Result<()> {
        let line = serde_json::to_string(record)
            .map_err(|e| NpoError::Contract(format!("metrics serialization failed: {e}")))?;
        self.out
            .write_all(line.as_bytes())
            .and_then(|_| self.out.write_all(b"\n"))
            .and_then(|_| self.out.flush())
            .map_err(|e| NpoError::io(&self.path, e))
    }

    pub fn write_step(&mut self, record: StepRecord) -> Result<()> {
        self.write(&MetricsRecord::Step(record))
    }

    pub fn write_event(&mut self, step: u64, event: Event) -> Result<()> {
        self.write(&MetricsRecord::Event(EventRecord { step, event }))
    }
}

/// Parse a full metrics stream; errors carry the offending line number.
pub fn parse_stream(text: &str) -> Result<Vec<MetricsRecord>> {
    let mut records = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record: MetricsRecord = serde_json::from_str(line).map_err(|e| NpoError::Parse {
            line: lineno + 1,
            msg: format!("{e}"),
        })?;
        records.push(record);
    }
    Ok(records)
}

/// Read and parse a metrics file.
pub fn read_stream(path: &Path) -> Result<Vec<MetricsRecord>> {
    let text = fs::read_to_string(path).map_err(|e| NpoError::io(path, e))?;
    parse_stream(&text)
}
