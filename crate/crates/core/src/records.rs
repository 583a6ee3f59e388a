//! Serialized record types for the streaming outputs: training metrics,
//! gradient-angle logs, dataset manifests, run summaries, and histograms.
//! All outputs are deterministic for a given (config, seed): no timestamps,
//! no environment-dependent fields.

use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Result;

/// One training metrics record (JSON Lines).
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct MetricsRecord {
    pub run_id: String,
    pub stage: u32,
    pub epoch: usize,
    pub step: usize,
    pub exit_layer: usize,
    pub loss_ce: f64,
    pub loss_contrastive: Option<f64>,
    pub lambda_prime: Option<f64>,
    pub lr: f64,
    pub train_acc: Option<f64>,
    pub eval_acc: Option<f64>,
}

/// One gradient-angle record (JSON Lines), written per optimization step
/// while angle tracking is active. `cos_gamma`/`gamma_deg` are null when the
/// contrastive gradient vanished (degenerate batch: no gate applied).
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct AngleRecord {
    pub step: usize,
    pub stage: u32,
    pub exit_layer: usize,
    pub cos_gamma: Option<f64>,
    pub gamma_deg: Option<f64>,
    pub gated: bool,
    pub lambda_prime: f64,
    pub loss_ce: f64,
    pub loss_acl: f64,
}

/// Dataset manifest written next to generated TSV files.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct DatasetManifest {
    pub name: String,
    pub k: usize,
    pub n_train: usize,
    pub n_eval: usize,
    pub vocab_size: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ExitScore {
    pub exit_layer: usize,
    pub score: f64,
}

/// Final summary of one training run.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct RunSummary {
    pub run_id: String,
    pub seed: u64,
    pub per_exit_scores: Vec<ExitScore>,
    pub cross_layer_avg: f64,
    /// Steps on which the angle gate was evaluated, and how many fired.
    pub gate_steps: usize,
    pub gated_steps: usize,
    pub gated_fraction: Option<f64>,
}

/// Fixed-width histogram over [0, 180] degrees plus summary statistics.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct HistogramSummary {
    pub bins: Vec<u64>,
    pub bin_width_deg: f64,
    pub mean_deg: f64,
    pub std_deg: f64,
    pub fraction_gated: f64,
    pub n_records: usize,
    pub n_with_angle: usize,
}

/// Append-only JSON Lines writer.
pub struct JsonlWriter {
    out: BufWriter<std::fs::File>,
}

impl JsonlWriter {
    pub fn create(path: &Path) -> Result<JsonlWriter> {
        Ok(JsonlWriter {
            out: BufWriter::new(std::fs::File::create(path)?),
        })
    }

    pub fn write<T: Serialize>(&mut self, record: &T) -> Result<()> {
        let line = serde_json::to_string(record)
            .map_err(|e| crate::Error::Format(format!("jsonl encode: {e}")))?;
        self.out.write_all(line.as_bytes())?;
        self.out.write_all(b"\n")?;
        Ok(())
    }

    pub fn finish(mut self) -> Result<()> {
        self.out.flush()?;
        Ok(())
    }
}

/// Read every record of a JSON Lines file.
pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.is_empty())
        .map(|l| {
            serde_json::from_str(l).map_err(|e| crate::Error::Format(format!("jsonl decode: {e}")))
        })
        .collect()
}

pub fn write_json_pretty<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| crate::Error::Format(format!("json encode: {e}")))?;
    std::fs::write(path, text + "\n")?;
    Ok(())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| crate::Error::Format(format!("json decode: {e}")))
}
