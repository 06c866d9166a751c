//! JSON-lines metrics stream.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Per-term losses of one episode, or their mean over a logging interval.
/// JSON has no NaN or infinity; those are written as `null` and read back
/// as NaN.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    #[serde(deserialize_with = "nullable")]
    pub l_con: f64,
    #[serde(deserialize_with = "nullable")]
    pub l_meta: f64,
    #[serde(deserialize_with = "nullable")]
    pub l_super: f64,
    #[serde(deserialize_with = "nullable")]
    pub l_m: f64,
    #[serde(deserialize_with = "nullable")]
    pub l_s: f64,
    #[serde(deserialize_with = "nullable")]
    pub total: f64,
}

fn nullable<'de, D: serde::Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
    Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NAN))
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        [self.l_con, self.l_meta, self.l_super, self.l_m, self.l_s, self.total].iter().all(|v| v.is_finite())
    }

    fn add(&mut self, o: &Self) {
        self.l_con += o.l_con;
        self.l_meta += o.l_meta;
        self.l_super += o.l_super;
        self.l_m += o.l_m;
        self.l_s += o.l_s;
        self.total += o.total;
    }

    fn scaled(mut self, s: f64) -> Self {
        for v in [&mut self.l_con, &mut self.l_meta, &mut self.l_super, &mut self.l_m, &mut self.l_s, &mut self.total] {
            *v *= s;
        }
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub stage: String,
    /// Index of the last episode covered by this record.
    pub episode: usize,
    #[serde(flatten)]
    pub losses: LossBreakdown,
    pub eval_accuracy: Option<f64>,
    /// Seconds since the stage started; absent when wall-clock logging is off.
    pub wall_time: Option<f64>,
    /// Set on the record written when training aborts.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub error: Option<String>,
}

/// Writes one JSON object per line. Without a path records are dropped.
/// Episode indices must not decrease within a stage.
pub struct MetricsSink {
    out: Option<BufWriter<File>>,
    last: Option<(String, usize)>,
}

impl MetricsSink {
    pub fn disabled() -> Self {
        Self { out: None, last: None }
    }

    pub fn create(path: impl AsRef<Path>) -> Result<Self> {
        Ok(Self { out: Some(BufWriter::new(File::create(path)?)), last: None })
    }

    /// Opens for appending, so several stages can share one stream.
    pub fn append(path: impl AsRef<Path>) -> Result<Self> {
        let f = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
        Ok(Self { out: Some(BufWriter::new(f)), last: None })
    }

    pub fn write(&mut self, rec: &MetricsRecord) -> Result<()> {
        if let Some((stage, e)) = &self.last {
            if *stage == rec.stage && rec.episode < *e {
                return Err(Error::Usage(format!("{stage} metrics episode {} after {e}", rec.episode)));
            }
        }
        self.last = Some((rec.stage.clone(), rec.episode));
        if let Some(out) = &mut self.out {
            let line = serde_json::to_string(rec).map_err(|e| Error::Data(e.to_string()))?;
            writeln!(out, "{line}")?;
        }
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        if let Some(out) = &mut self.out {
            out.flush()?;
        }
        Ok(())
    }
}

/// Averages per-episode losses over fixed logging intervals.
#[derive(Debug, Default)]
pub(crate) struct IntervalMean {
    sum: LossBreakdown,
    count: usize,
}

impl IntervalMean {
    pub(crate) fn push(&mut self, l: &LossBreakdown) {
        self.sum.add(l);
        self.count += 1;
    }

    pub(crate) fn take(&mut self) -> Option<LossBreakdown> {
        if self.count == 0 {
            return None;
        }
        let m = self.sum.scaled(1.0 / self.count as f64);
        *self = Self::default();
        Some(m)
    }
}

/// Reads a metrics file back, one record per non-empty line.
pub fn read_metrics(path: impl AsRef<Path>) -> Result<Vec<MetricsRecord>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| Error::Data(format!("metrics line {}: {e}", i + 1))))
        .collect()
}
