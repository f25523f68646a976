//! Per-step training records and CSV output.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::Result;

pub const METRICS_HEADER: &str = "tick,step,module,loss,lambda,lr,wall_ms";

#[derive(Clone, Debug, PartialEq)]
pub struct MetricRecord {
    pub tick: u64,
    pub step: usize,
    pub module: usize,
    pub loss: f64,
    pub lambda: f64,
    pub lr: f64,
    pub wall_ms: f64,
}

impl MetricRecord {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{:.3}",
            self.tick, self.step, self.module, self.loss, self.lambda, self.lr, self.wall_ms
        )
    }
}

pub trait MetricSink {
    fn record(&mut self, rec: &MetricRecord) -> Result<()>;
}

/// Discards everything.
#[derive(Clone, Copy, Debug, Default)]
pub struct NullSink;

impl MetricSink for NullSink {
    fn record(&mut self, _: &MetricRecord) -> Result<()> {
        Ok(())
    }
}

impl MetricSink for Vec<MetricRecord> {
    fn record(&mut self, rec: &MetricRecord) -> Result<()> {
        self.push(rec.clone());
        Ok(())
    }
}

/// Writes one CSV row per record and flushes after each row.
pub struct CsvSink<W: Write> {
    out: W,
    rows: usize,
}

impl<W: Write> CsvSink<W> {
    pub fn new(mut out: W) -> Result<Self> {
        writeln!(out, "{METRICS_HEADER}")?;
        out.flush()?;
        Ok(Self { out, rows: 0 })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn into_inner(self) -> W {
        self.out
    }
}

impl CsvSink<BufWriter<File>> {
    pub fn create(path: &Path) -> Result<Self> {
        Self::new(BufWriter::new(File::create(path)?))
    }
}

impl<W: Write> MetricSink for CsvSink<W> {
    fn record(&mut self, rec: &MetricRecord) -> Result<()> {
        writeln!(self.out, "{}", rec.csv_row())?;
        self.out.flush()?;
        self.rows += 1;
        Ok(())
    }
}

/// Forwards to two sinks.
pub struct Tee<'a>(pub &'a mut dyn MetricSink, pub &'a mut dyn MetricSink);

impl MetricSink for Tee<'_> {
    fn record(&mut self, rec: &MetricRecord) -> Result<()> {
        self.0.record(rec)?;
        self.1.record(rec)
    }
}
