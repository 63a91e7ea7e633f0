//! Cost/quality trajectory as CSV: the initial model, then one row per step.

use std::io::Write;

use serde::Serialize;

use crate::error::Result;
use crate::harness::runlog::RunLog;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ReportRow {
    pub iteration: usize,
    pub cost: f64,
    pub quality: f64,
    /// Empty for the initial row.
    pub knob: String,
    pub value: Option<f64>,
}

pub fn report_rows(log: &RunLog) -> Vec<ReportRow> {
    let initial = ReportRow {
        iteration: 0,
        cost: log.initial.cost,
        quality: log.initial.quality,
        knob: String::new(),
        value: None,
    };
    std::iter::once(initial)
        .chain(log.steps.iter().map(|s| ReportRow {
            iteration: s.step,
            cost: s.post_meters.cost,
            quality: s.post_meters.quality,
            knob: s.knob_id.clone(),
            value: Some(s.value),
        }))
        .collect()
}

pub fn write_report<W: Write>(log: &RunLog, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for row in report_rows(log) {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}
