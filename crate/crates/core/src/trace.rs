//! Per-iteration fit records, shared by every solver.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::factor::ObjectiveBreakdown;

/// One iteration of an alternating solver.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterRecord {
    pub iter: usize,
    /// Value of the algorithm's true objective after the iteration.
    pub objective: f64,
    /// Term-by-term breakdown (RFA-LCF only).
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub terms: Option<ObjectiveBreakdown>,
    /// Trace-form surrogate before and after the block updates, evaluated
    /// with the reweighting diagonals that were frozen for this iteration.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub surrogate_start: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub surrogate_end: Option<f64>,
    /// Frobenius distance between consecutive representation matrices.
    pub divergence: f64,
    pub wall_secs: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FitTrace {
    pub algorithm: String,
    pub records: Vec<IterRecord>,
    pub converged: bool,
    pub iterations_run: usize,
    pub warnings: Vec<String>,
}

impl FitTrace {
    pub fn new(algorithm: impl Into<String>) -> Self {
        Self {
            algorithm: algorithm.into(),
            ..Default::default()
        }
    }

    pub fn warn(&mut self, msg: impl Into<String>) {
        let msg = msg.into();
        log::debug!("{}: {}", self.algorithm, msg);
        self.warnings.push(msg);
    }

    pub fn last_divergence(&self) -> Option<f64> {
        self.records.last().map(|r| r.divergence)
    }

    pub fn objectives(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.objective).collect()
    }

    /// Writes one JSON object per iteration, each tagged with the algorithm.
    pub fn write_jsonl<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        #[derive(Serialize)]
        struct Line<'a> {
            algorithm: &'a str,
            #[serde(flatten)]
            record: &'a IterRecord,
        }
        for record in &self.records {
            let line = Line {
                algorithm: &self.algorithm,
                record,
            };
            serde_json::to_writer(&mut out, &line)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }
}
