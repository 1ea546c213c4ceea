//! Per-step run records and the sinks that persist them. The CSV rendering
//! is the interface to external plotting tools, so its column order and
//! number formatting are fixed: integers print bare, floats print with nine
//! significant digits in scientific notation, independent of locale.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{Lemma1Record, SparsityReport};
use crate::optim::TrainCheckpoint;

/// Column order of the CSV rendering; `StepRow` fields match it one to one.
pub const CSV_HEADER: &str =
    "step,epoch,loss,train_acc,val_acc,sparsity_reg,sparsity_all,lambda,eps,f,alpha,frob_norm";

/// One logged training step. Step 0 is the initialization row; training
/// steps count from 1. Dense baselines log zeros for lambda, eps, f, and
/// alpha. The lambda column holds the weight used by this step's prox; the
/// f and alpha columns hold the controller knobs in force when the step ran,
/// before any damping the step itself triggered.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRow {
    pub step: u64,
    pub epoch: u64,
    pub loss: f64,
    pub train_acc: f64,
    pub val_acc: f64,
    pub sparsity_reg: f64,
    pub sparsity_all: f64,
    pub lambda: f64,
    pub eps: f64,
    pub f: u64,
    pub alpha: f64,
    pub frob_norm: f64,
}

impl StepRow {
    pub fn to_csv_line(&self) -> String {
        format!(
            "{},{},{:.8e},{:.8e},{:.8e},{:.8e},{:.8e},{:.8e},{:.8e},{},{:.8e},{:.8e}",
            self.step,
            self.epoch,
            self.loss,
            self.train_acc,
            self.val_acc,
            self.sparsity_reg,
            self.sparsity_all,
            self.lambda,
            self.eps,
            self.f,
            self.alpha,
            self.frob_norm
        )
    }

    pub fn from_csv_line(line: &str) -> Result<StepRow> {
        let cols: Vec<&str> = line.trim_end().split(',').collect();
        if cols.len() != 12 {
            return Err(Error::Serialization(format!(
                "expected 12 CSV columns, got {} in {line:?}",
                cols.len()
            )));
        }
        let int = |s: &str| -> Result<u64> {
            s.parse::<u64>().map_err(|e| Error::Serialization(format!("bad integer {s:?}: {e}")))
        };
        let real = |s: &str| -> Result<f64> {
            s.parse::<f64>().map_err(|e| Error::Serialization(format!("bad float {s:?}: {e}")))
        };
        Ok(StepRow {
            step: int(cols[0])?,
            epoch: int(cols[1])?,
            loss: real(cols[2])?,
            train_acc: real(cols[3])?,
            val_acc: real(cols[4])?,
            sparsity_reg: real(cols[5])?,
            sparsity_all: real(cols[6])?,
            lambda: real(cols[7])?,
            eps: real(cols[8])?,
            f: int(cols[9])?,
            alpha: real(cols[10])?,
            frob_norm: real(cols[11])?,
        })
    }
}

/// Receives rows as the run produces them. The run also keeps every row in
/// memory, so sinks are for streaming side channels (files, pipes).
pub trait LogSink {
    fn record(&mut self, row: &StepRow) -> Result<()>;
    fn finish(&mut self) -> Result<()> {
        Ok(())
    }
}

/// Streams rows as CSV, header first.
pub struct CsvSink<W: Write> {
    w: W,
    wrote_header: bool,
}

impl<W: Write> CsvSink<W> {
    pub fn new(w: W) -> Self {
        CsvSink { w, wrote_header: false }
    }

    pub fn into_inner(self) -> W {
        self.w
    }
}

impl<W: Write> LogSink for CsvSink<W> {
    fn record(&mut self, row: &StepRow) -> Result<()> {
        if !self.wrote_header {
            writeln!(self.w, "{CSV_HEADER}")?;
            self.wrote_header = true;
        }
        writeln!(self.w, "{}", row.to_csv_line())?;
        Ok(())
    }

    fn finish(&mut self) -> Result<()> {
        self.w.flush()?;
        Ok(())
    }
}

/// Streams rows as one JSON object per line.
pub struct JsonLinesSink<W: Write> {
    w: W,
}

impl<W: Write> JsonLinesSink<W> {
    pub fn new(w: W) -> Self {
        JsonLinesSink { w }
    }

    pub fn into_inner(self) -> W {
        self.w
    }
}

impl<W: Write> LogSink for JsonLinesSink<W> {
    fn record(&mut self, row: &StepRow) -> Result<()> {
        let line = serde_json::to_string(row).map_err(|e| Error::Serialization(e.to_string()))?;
        writeln!(self.w, "{line}")?;
        Ok(())
    }

    fn finish(&mut self) -> Result<()> {
        self.w.flush()?;
        Ok(())
    }
}

/// End-of-run roll-up. `reached_target` and `steps_to_tolerance` are absent
/// when the run has no sparsity target; `violations_lemma1` is absent when
/// the descent monitor was not active (it only runs for full-batch LinBreg
/// on the quadratic model, where the smoothness constant is exact).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub reached_target: Option<bool>,
    pub steps_to_tolerance: Option<u64>,
    pub final_loss: f64,
    pub final_train_acc: f64,
    pub final_val_acc: f64,
    pub best_val_acc: f64,
    pub final_sparsity_reg: f64,
    pub final_sparsity_all: f64,
    pub lambda_final: f64,
    pub final_tau: f64,
    pub violations_lemma1: Option<u64>,
}

/// Everything one run produced.
#[derive(Debug, Clone)]
pub struct RunLog {
    pub rows: Vec<StepRow>,
    /// Layer-by-layer sparsity at each epoch boundary.
    pub epoch_reports: Vec<SparsityReport>,
    /// Descent-inequality records when the monitor was active; empty otherwise.
    pub lemma1: Vec<Lemma1Record>,
    pub summary: RunSummary,
    /// Final parameters plus whatever optimizer state the run carried.
    pub checkpoint: TrainCheckpoint,
}

impl RunLog {
    pub fn write_csv<W: Write>(&self, w: &mut W) -> Result<()> {
        writeln!(w, "{CSV_HEADER}")?;
        for row in &self.rows {
            writeln!(w, "{}", row.to_csv_line())?;
        }
        Ok(())
    }

    pub fn csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to a Vec cannot fail");
        String::from_utf8(buf).expect("CSV output is ASCII")
    }

    /// Log well-formedness: rows strictly increasing in step, all finite.
    pub fn check_rows(&self) -> Result<()> {
        let mut prev: Option<u64> = None;
        for row in &self.rows {
            if let Some(p) = prev {
                if row.step <= p {
                    return Err(Error::InvalidConfig(format!(
                        "log rows not strictly increasing at step {}",
                        row.step
                    )));
                }
            }
            prev = Some(row.step);
            for (label, v) in [
                ("loss", row.loss),
                ("train_acc", row.train_acc),
                ("val_acc", row.val_acc),
                ("sparsity_reg", row.sparsity_reg),
                ("sparsity_all", row.sparsity_all),
                ("lambda", row.lambda),
                ("eps", row.eps),
                ("alpha", row.alpha),
                ("frob_norm", row.frob_norm),
            ] {
                if !v.is_finite() {
                    return Err(Error::NonFinite(label));
                }
            }
        }
        Ok(())
    }
}
