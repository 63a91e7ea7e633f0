//! JSON-lines run logs: a header, one line per accepted step, and an end line.
//!
//! Wall-clock timings sit under each step's `timing` key so that two runs can
//! be compared with [`without_timing`].

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::calculus::TransformationRecord;
use crate::engine::{RunResult, RunSink, StopReason};
use crate::error::{KmrError, Result};
use crate::meters::MeterReading;

pub const LOG_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LogLine {
    Header { format_version: u32, seed: u64, config: serde_json::Value, initial: MeterReading },
    Step(TransformationRecord),
    End(EndLine),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutcomeTag {
    Success,
    Failure,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EndLine {
    pub outcome: OutcomeTag,
    pub stop: StopReason,
    pub steps: usize,
    pub final_meters: MeterReading,
}

/// Streams a run to `writer`, flushing after every line.
pub struct JsonlSink<W: Write> {
    writer: W,
    seed: u64,
    config: serde_json::Value,
}

impl<W: Write> JsonlSink<W> {
    pub fn new(writer: W, seed: u64, config: serde_json::Value) -> Self {
        Self { writer, seed, config }
    }

    pub fn into_inner(self) -> W {
        self.writer
    }

    fn emit(&mut self, line: &LogLine) -> Result<()> {
        serde_json::to_writer(&mut self.writer, line)?;
        self.writer.write_all(b"\n")?;
        self.writer.flush()?;
        Ok(())
    }
}

impl<W: Write> RunSink for JsonlSink<W> {
    fn on_start(&mut self, initial: &MeterReading) -> Result<()> {
        let header = LogLine::Header {
            format_version: LOG_VERSION,
            seed: self.seed,
            config: self.config.clone(),
            initial: initial.clone(),
        };
        self.emit(&header)
    }

    fn on_step(&mut self, record: &TransformationRecord) -> Result<()> {
        self.emit(&LogLine::Step(record.clone()))
    }

    fn on_finish(&mut self, result: &RunResult) -> Result<()> {
        let outcome = if result.outcome.is_success() { OutcomeTag::Success } else { OutcomeTag::Failure };
        self.emit(&LogLine::End(EndLine {
            outcome,
            stop: result.stop_reason.clone(),
            steps: result.log.len(),
            final_meters: result.final_reading.clone(),
        }))
    }
}

/// A decoded run log. `end` is `None` for a run that was interrupted.
#[derive(Clone, Debug, PartialEq)]
pub struct RunLog {
    pub seed: u64,
    pub config: serde_json::Value,
    pub initial: MeterReading,
    pub steps: Vec<TransformationRecord>,
    pub end: Option<EndLine>,
}

fn format(msg: impl Into<String>) -> KmrError {
    KmrError::Format(msg.into())
}

/// Parses and checks a run log: header first, steps numbered `1, 2, …`, and
/// nothing after the end line.
pub fn parse_run_log(text: &str) -> Result<RunLog> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let decode = |(n, l): (usize, &str)| -> Result<LogLine> {
        serde_json::from_str(l).map_err(|e| format(format!("line {}: {e}", n + 1)))
    };
    let (seed, config, initial) = match lines.next().map(decode).transpose()? {
        Some(LogLine::Header { format_version: LOG_VERSION, seed, config, initial }) => (seed, config, initial),
        Some(LogLine::Header { format_version, .. }) => {
            return Err(format(format!("unsupported run log version {format_version}")))
        }
        Some(_) => return Err(format("run log must start with a header line")),
        None => return Err(format("empty run log")),
    };
    let mut log = RunLog { seed, config, initial, steps: Vec::new(), end: None };
    for entry in lines {
        let n = entry.0 + 1;
        if log.end.is_some() {
            return Err(format(format!("line {n}: content after the end line")));
        }
        match decode(entry)? {
            LogLine::Header { .. } => return Err(format(format!("line {n}: second header"))),
            LogLine::Step(r) => {
                if r.step != log.steps.len() + 1 {
                    return Err(format(format!("line {n}: step {} out of sequence", r.step)));
                }
                log.steps.push(r);
            }
            LogLine::End(e) => {
                if e.steps != log.steps.len() {
                    return Err(format(format!("line {n}: end reports {} steps, log has {}", e.steps, log.steps.len())));
                }
                log.end = Some(e);
            }
        }
    }
    Ok(log)
}

/// Every line of a log as JSON with step timings removed.
pub fn without_timing(text: &str) -> Result<Vec<serde_json::Value>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let mut v: serde_json::Value = serde_json::from_str(l)?;
            if let Some(obj) = v.as_object_mut() {
                obj.remove("timing");
            }
            Ok(v)
        })
        .collect()
}
