//! JSON-lines metrics log, one object per optimizer step.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use aim_core::train::StepRecord;
use serde::{Deserialize, Serialize};

use crate::Result;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogLine {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub eval_acc: Option<f64>,
}

impl From<&StepRecord> for LogLine {
    fn from(r: &StepRecord) -> Self {
        LogLine {
            step: r.step,
            lr: r.lr,
            loss: r.loss,
            eval_acc: r.eval_acc,
        }
    }
}

pub struct MetricsWriter<W: Write> {
    out: W,
}

impl MetricsWriter<BufWriter<File>> {
    pub fn create(path: &Path) -> Result<Self> {
        Ok(MetricsWriter::new(BufWriter::new(File::create(path)?)))
    }
}

impl<W: Write> MetricsWriter<W> {
    pub fn new(out: W) -> Self {
        MetricsWriter { out }
    }

    pub fn write(&mut self, record: &StepRecord) -> Result<()> {
        serde_json::to_writer(&mut self.out, &LogLine::from(record))?;
        self.out.write_all(b"\n")?;
        Ok(())
    }

    pub fn finish(mut self) -> Result<W> {
        self.out.flush()?;
        Ok(self.out)
    }
}

pub fn read_log(text: &str) -> Result<Vec<LogLine>> {
    text.lines().map(|l| Ok(serde_json::from_str(l)?)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lines_roundtrip_and_omit_missing_eval() {
        let mut w = MetricsWriter::new(Vec::new());
        w.write(&StepRecord { step: 0, lr: 0.0, loss: 0.5, eval_acc: None }).unwrap();
        w.write(&StepRecord { step: 1, lr: 1e-3, loss: 0.25, eval_acc: Some(0.75) }).unwrap();
        let text = String::from_utf8(w.finish().unwrap()).unwrap();
        let first = text.lines().next().unwrap();
        assert_eq!(first, r#"{"step":0,"lr":0.0,"loss":0.5}"#);
        let lines = read_log(&text).unwrap();
        assert_eq!(lines[1].eval_acc, Some(0.75));
    }
}
