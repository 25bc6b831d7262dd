//! Newline-delimited JSON training log.

use std::io::Write;
use std::time::Instant;

use serde::Serialize;
use taml_core::metalearn::IterationRecord;

#[derive(Serialize)]
struct Line<'a> {
    seed: u64,
    #[serde(flatten)]
    record: &'a IterationRecord,
    wall_time_s: f64,
}

pub struct TrainingLog<W: Write> {
    out: W,
    start: Instant,
    seed: u64,
    error: Option<std::io::Error>,
}

impl<W: Write> TrainingLog<W> {
    pub fn new(out: W, seed: u64) -> Self {
        Self {
            out,
            start: Instant::now(),
            seed,
            error: None,
        }
    }

    /// Appends one record; the first write error is kept for [`TrainingLog::finish`].
    pub fn record(&mut self, r: &IterationRecord) {
        if self.error.is_some() {
            return;
        }
        let line = Line {
            seed: self.seed,
            record: r,
            wall_time_s: self.start.elapsed().as_secs_f64(),
        };
        let text = serde_json::to_string(&line).expect("log record serializes");
        if let Err(e) = writeln!(self.out, "{text}") {
            self.error = Some(e);
        }
    }

    pub fn finish(mut self) -> std::io::Result<W> {
        if let Some(e) = self.error.take() {
            return Err(e);
        }
        self.out.flush()?;
        Ok(self.out)
    }
}
