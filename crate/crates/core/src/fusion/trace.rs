use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Everything the head computed for one utterance.
#[derive(Debug, Clone, PartialEq)]
pub struct GateTrace {
    pub conv_id: String,
    pub index: usize,
    /// Max softmax probability of the video-only classifier.
    pub c: f64,
    /// Gate value applied in the complement (equals `c` unless fixed).
    pub gate: f64,
    pub delta: Vec<f64>,
    pub h_v: Vec<f64>,
    pub h_v_star: Vec<f64>,
    pub text_ref: Vec<f64>,
    pub audio_ref: Vec<f64>,
    pub aux_logits: Vec<f64>,
    pub logits: Vec<f64>,
    /// Logits with the complement fully open, i.e. the externally
    /// complemented predictor.
    pub logits_open_gate: Vec<f64>,
    pub prediction: usize,
    pub visual_prediction: usize,
    pub label: Option<usize>,
    pub corrupted: bool,
}

impl GateTrace {
    pub fn record(&self) -> TraceRecord {
        TraceRecord {
            conv_id: self.conv_id.clone(),
            index: self.index,
            c: self.c,
            logits: self.logits.clone(),
            prediction: self.prediction,
            label: self.label,
            corrupted: self.corrupted,
            aux_logits: self.aux_logits.clone(),
            visual_prediction: self.visual_prediction,
            logits_open_gate: self.logits_open_gate.clone(),
        }
    }
}

/// One exported JSONL line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub conv_id: String,
    pub index: usize,
    pub c: f64,
    pub logits: Vec<f64>,
    pub prediction: usize,
    pub label: Option<usize>,
    pub corrupted: bool,
    pub aux_logits: Vec<f64>,
    pub visual_prediction: usize,
    pub logits_open_gate: Vec<f64>,
}

pub fn write_traces<W: Write>(mut w: W, traces: &[GateTrace]) -> Result<()> {
    for t in traces {
        let line = serde_json::to_string(&t.record()).expect("trace serializes");
        writeln!(w, "{line}")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_traces<R: BufRead>(r: R) -> Result<Vec<TraceRecord>> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: TraceRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}
