use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::Result;
use crate::mcem::IterationMetrics;

/// CSV stream with one row per training iteration.
///
/// With `fixed_clock` the wall-clock column is written as 0, which makes the
/// file byte-for-byte reproducible.
pub struct MetricsWriter {
    out: BufWriter<File>,
    fixed_clock: bool,
}

impl MetricsWriter {
    pub fn create(path: &Path, fixed_clock: bool) -> Result<Self> {
        let mut out = BufWriter::new(File::create(path)?);
        writeln!(out, "{}", IterationMetrics::CSV_HEADER)?;
        Ok(MetricsWriter { out, fixed_clock })
    }

    pub fn write(&mut self, m: &IterationMetrics) -> Result<()> {
        let mut row = *m;
        if self.fixed_clock {
            row.seconds = 0.0;
        }
        writeln!(self.out, "{}", row.csv_row())?;
        self.out.flush()?;
        Ok(())
    }
}
