//! Early-exit inference over a trained multi-exit model.
//!
//! Three policies: fixed layer, entropy threshold (exit at the first layer
//! whose prediction entropy falls below the threshold), and patience (exit
//! once t consecutive exits agree on the argmax class). Computation is
//! genuinely truncated: a sample that exits at layer m never runs layers
//! beyond m, so the flops accounting reflects real work.

use std::fmt::Write as _;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{make_batches, Dataset, TokenBatch, Vocab};
use crate::error::{Error, Result};
use crate::losses::{entropy_host, softmax_host};
use crate::model::{count_flops, MultiExitModel, Scope};
use crate::tensor::Tape;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ExitPolicy {
    Fixed(usize),
    Entropy(f64),
    Patience(usize),
}

impl ExitPolicy {
    pub fn validate(&self, n_layers: usize) -> Result<()> {
        match *self {
            ExitPolicy::Fixed(m) if m == 0 || m > n_layers => Err(Error::Validation(format!(
                "fixed exit layer {m} out of range 1..={n_layers}"
            ))),
            ExitPolicy::Entropy(t) if t <= 0.0 => Err(Error::Validation(format!(
                "entropy threshold must be positive, got {t}"
            ))),
            ExitPolicy::Patience(t) if t == 0 || t > n_layers => Err(Error::Validation(format!(
                "patience {t} out of range 1..={n_layers}"
            ))),
            _ => Ok(()),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Prediction {
    pub logits: Vec<f64>,
    pub probs: Vec<f64>,
    pub exit_layer: usize,
}

impl Prediction {
    pub fn argmax(&self) -> usize {
        argmax(&self.probs)
    }
}

/// Ties break toward the lower class index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TraceSample {
    pub sample_id: usize,
    pub exit_layer: usize,
    pub predicted: usize,
    pub correct: bool,
    pub entropy_at_exit: f64,
}

#[derive(Clone, Debug)]
pub struct ExitTrace {
    pub samples: Vec<TraceSample>,
    pub accuracy: f64,
    pub avg_exit_layer: f64,
    /// mean_i flops(exit layer of sample i) / flops(full depth)
    pub flops_ratio: f64,
}

/// Run exit `m` on a batch, executing encoder layers 1..m only.
pub fn predict_fixed(
    model: &MultiExitModel,
    batch: &TokenBatch,
    m: usize,
) -> Result<Vec<Prediction>> {
    ExitPolicy::Fixed(m).validate(model.cfg.n_layers)?;
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, Scope::BackboneAndExit(m), None)?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let states = model.encode_upto(&mut tape, &bound, batch, m, false, &mut rng)?;
    let (_, logits) = model.exit_forward(&mut tape, &bound, m, &states[m - 1], batch)?;
    let k = model.cfg.n_classes;
    Ok((0..batch.n)
        .map(|i| {
            let row = logits.data()[i * k..(i + 1) * k].to_vec();
            let probs = softmax_host(&row);
            Prediction {
                logits: row,
                probs,
                exit_layer: m,
            }
        })
        .collect())
}

/// Accuracy of exit `m` over a dataset.
pub fn evaluate_fixed(
    model: &MultiExitModel,
    ds: &Dataset,
    vocab: &Vocab,
    m: usize,
    batch_size: usize,
) -> Result<f64> {
    let batches = make_batches(ds, vocab, batch_size, model.cfg.max_seq_len, 0, false)?;
    let mut correct = 0usize;
    for b in &batches {
        for (pred, &label) in predict_fixed(model, b, m)?.iter().zip(&b.labels) {
            if pred.argmax() == label {
                correct += 1;
            }
        }
    }
    Ok(correct as f64 / ds.len() as f64)
}

/// Adaptive early-exit inference under an entropy or patience policy
/// (fixed policies are delegated to `predict_fixed`). Samples that have
/// exited are removed from the batch before the next layer runs.
pub fn predict_adaptive(
    model: &MultiExitModel,
    ds: &Dataset,
    vocab: &Vocab,
    policy: ExitPolicy,
    batch_size: usize,
) -> Result<ExitTrace> {
    policy.validate(model.cfg.n_layers)?;
    let n_layers = model.cfg.n_layers;
    let k = model.cfg.n_classes;
    let d = model.cfg.d_model;
    let batches = make_batches(ds, vocab, batch_size, model.cfg.max_seq_len, 0, false)?;

    let mut samples: Vec<TraceSample> = Vec::with_capacity(ds.len());
    for batch in &batches {
        if let ExitPolicy::Fixed(m) = policy {
            for (i, pred) in predict_fixed(model, batch, m)?.iter().enumerate() {
                let e = entropy_host(&pred.probs);
                samples.push(TraceSample {
                    sample_id: batch.sample_idx[i],
                    exit_layer: m,
                    predicted: pred.argmax(),
                    correct: pred.argmax() == batch.labels[i],
                    entropy_at_exit: e,
                });
            }
            continue;
        }

        // Embed everything once, then carry activations of still-active
        // rows between per-layer tapes.
        let l = batch.l;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut x: Vec<f64> = {
            let mut tape = Tape::new();
            let bound = model.bind(&mut tape, Scope::Backbone, None)?;
            model.embed(&mut tape, &bound, batch, false, &mut rng)?.to_vec()
        };
        // active row bookkeeping
        let mut active: Vec<usize> = (0..batch.n).collect(); // positions into batch
        let mut run_len = vec![0usize; batch.n];
        let mut last_pred = vec![usize::MAX; batch.n];

        for m in 1..=n_layers {
            if active.is_empty() {
                break;
            }
            let na = active.len();
            let sub_ids: Vec<usize> = active
                .iter()
                .flat_map(|&r| batch.ids[r * l..(r + 1) * l].to_vec())
                .collect();
            let sub_batch = TokenBatch {
                ids: sub_ids,
                n: na,
                l,
                labels: active.iter().map(|&r| batch.labels[r]).collect(),
                sample_idx: active.iter().map(|&r| batch.sample_idx[r]).collect(),
            };
            let mut tape = Tape::new();
            let bound = model.bind(&mut tape, Scope::BackboneAndExit(m), None)?;
            let xt = tape.constant(x.clone(), vec![na, l, d])?;
            let mask = model.attn_mask_for(&mut tape, &sub_batch, model.cfg.n_heads)?;
            let next = model.apply_layer(&mut tape, &bound, &xt, m - 1, &mask, false, &mut rng)?;
            let (_, logits) = model.exit_forward(&mut tape, &bound, m, &next, &sub_batch)?;

            let mut still_active = Vec::new();
            let mut next_x = Vec::new();
            for (pos, &row) in active.iter().enumerate() {
                let lrow = &logits.data()[pos * k..(pos + 1) * k];
                let probs = softmax_host(lrow);
                let pred = argmax(&probs);
                let entropy = entropy_host(&probs);
                let exit_now = if m == n_layers {
                    true
                } else {
                    match policy {
                        ExitPolicy::Entropy(thr) => entropy < thr,
                        ExitPolicy::Patience(t) => {
                            let r = if pred == last_pred[row] { run_len[row] + 1 } else { 1 };
                            run_len[row] = r;
                            last_pred[row] = pred;
                            r >= t
                        }
                        ExitPolicy::Fixed(_) => unreachable!(),
                    }
                };
                if exit_now {
                    samples.push(TraceSample {
                        sample_id: batch.sample_idx[row],
                        exit_layer: m,
                        predicted: pred,
                        correct: pred == batch.labels[row],
                        entropy_at_exit: entropy,
                    });
                } else {
                    still_active.push(row);
                    next_x.extend_from_slice(&next.data()[pos * l * d..(pos + 1) * l * d]);
                }
            }
            active = still_active;
            x = next_x;
        }
    }

    samples.sort_by_key(|s| s.sample_id);
    let n = samples.len() as f64;
    let accuracy = samples.iter().filter(|s| s.correct).count() as f64 / n;
    let avg_exit_layer = samples.iter().map(|s| s.exit_layer as f64).sum::<f64>() / n;
    let full = count_flops(&model.cfg, n_layers)?.total() as f64;
    let flops_ratio = samples
        .iter()
        .map(|s| count_flops(&model.cfg, s.exit_layer).map(|f| f.total() as f64))
        .sum::<Result<f64>>()?
        / n
        / full;
    Ok(ExitTrace {
        samples,
        accuracy,
        avg_exit_layer,
        flops_ratio,
    })
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct LayerScore {
    pub exit_layer: usize,
    pub score: f64,
    pub n_samples: usize,
}

/// Accuracy of every exit 1..=M on a dataset.
pub fn layer_score_curve(
    model: &MultiExitModel,
    ds: &Dataset,
    vocab: &Vocab,
    batch_size: usize,
) -> Result<Vec<LayerScore>> {
    (1..=model.cfg.n_layers)
        .map(|m| {
            Ok(LayerScore {
                exit_layer: m,
                score: evaluate_fixed(model, ds, vocab, m, batch_size)?,
                n_samples: ds.len(),
            })
        })
        .collect()
}

pub fn write_curve_csv(scores: &[LayerScore], path: &Path) -> Result<()> {
    let mut out = String::from("exit_layer,score,n_samples\n");
    for s in scores {
        writeln!(out, "{},{},{}", s.exit_layer, s.score, s.n_samples).expect("string write");
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn write_trace_jsonl(trace: &ExitTrace, path: &Path) -> Result<()> {
    let mut w = crate::records::JsonlWriter::create(path)?;
    for s in &trace.samples {
        w.write(s)?;
    }
    w.finish()
}

#[cfg(test)]
mod tests;
