//! Scalar training objectives: cross-entropy, supervised contrastive (SCL),
//! label-embedding augmented contrastive (ACL-Embed), cross-layer
//! contrastive distillation (ACL-CL), InfoNCE, soft-target distillation, and
//! the lambda-weighted combination.
//!
//! All contrastive losses share one core: representations are l2-normalized
//! internally, similarities are divided by the temperature, denominators sum
//! over every other batch entry (self excluded), and an anchor whose class
//! has no other member contributes zero. The result is a plain sum over
//! valid anchors; any 1/N scaling is absorbed into lambda.

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor};

/// Entries of a contrastive batch: a stacked representation matrix plus
/// per-row metadata. Rows flagged `stop_gradient` must have been built as
/// constants on the tape (they shape the loss value and denominators but
/// receive no gradient).
pub struct ContrastiveBatch {
    pub reps: Tensor,
    pub labels: Vec<usize>,
    pub is_anchor: Vec<bool>,
    pub stop_gradient: Vec<bool>,
    pub temperature: f64,
}

impl ContrastiveBatch {
    pub fn new(
        reps: Tensor,
        labels: Vec<usize>,
        is_anchor: Vec<bool>,
        stop_gradient: Vec<bool>,
        temperature: f64,
    ) -> Result<ContrastiveBatch> {
        if reps.shape().len() != 2 {
            return Err(Error::Shape(format!(
                "contrastive reps must be [batch, dim], got {:?}",
                reps.shape()
            )));
        }
        let b = reps.shape()[0];
        if labels.len() != b || is_anchor.len() != b || stop_gradient.len() != b {
            return Err(Error::Shape(
                "contrastive metadata length mismatch".to_string(),
            ));
        }
        if temperature <= 0.0 {
            return Err(Error::Validation(format!(
                "temperature must be positive, got {temperature}"
            )));
        }
        Ok(ContrastiveBatch {
            reps,
            labels,
            is_anchor,
            stop_gradient,
            temperature,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// A contrastive loss value plus batch diagnostics.
pub struct ContrastiveOutput {
    pub loss: Tensor,
    pub n_valid_anchors: usize,
    /// Set when no anchor had a positive: the loss is exactly zero and the
    /// gradient vanishes, which callers may want to log.
    pub degenerate: bool,
}

/// Supervised contrastive core on an explicit batch. For each valid anchor
/// i (anchor flag set, at least one other entry of the same class):
///
///   -1/|P(i)| * sum_{j in P(i)} log( exp(z_i.z_j / tau)
///                                    / sum_{k != i} exp(z_i.z_k / tau) )
///
/// summed over anchors, with z = l2-normalized rows.
pub fn contrastive_loss(tape: &mut Tape, batch: &ContrastiveBatch) -> Result<ContrastiveOutput> {
    let b = batch.len();
    if b < 2 {
        return Err(Error::Validation(format!(
            "contrastive batch needs at least 2 entries, got {b}"
        )));
    }
    let z = tape.l2_normalize(&batch.reps)?;
    let zt = tape.transpose2(&z)?;
    let sims = tape.matmul(&z, &zt)?;
    let sims = tape.mul_scalar(&sims, 1.0 / batch.temperature)?;

    // Constant masks: positive-pair weights and the off-diagonal indicator.
    let mut wpos = vec![0.0; b * b];
    let mut valid = vec![0.0; b];
    let mut offdiag = vec![1.0; b * b];
    let mut n_valid = 0usize;
    for i in 0..b {
        offdiag[i * b + i] = 0.0;
        if !batch.is_anchor[i] {
            continue;
        }
        let positives: Vec<usize> = (0..b)
            .filter(|&j| j != i && batch.labels[j] == batch.labels[i])
            .collect();
        if positives.is_empty() {
            continue;
        }
        n_valid += 1;
        valid[i] = 1.0;
        let w = 1.0 / positives.len() as f64;
        for j in positives {
            wpos[i * b + j] = w;
        }
    }

    let offdiag = tape.constant(offdiag, vec![b, b])?;
    let wpos = tape.constant(wpos, vec![b, b])?;
    let valid = tape.constant(valid, vec![b])?;

    let expd = tape.exp(&sims)?;
    let expd = tape.mul(&expd, &offdiag)?;
    let denom = tape.sum_last(&expd)?;
    let log_denom = tape.log(&denom)?;
    let anchored_denom = tape.mul(&log_denom, &valid)?;
    let denom_term = tape.sum(&anchored_denom)?;
    let pos_scores = tape.mul(&sims, &wpos)?;
    let pos_term = tape.sum(&pos_scores)?;
    let loss = tape.sub(&denom_term, &pos_term)?;

    Ok(ContrastiveOutput {
        loss,
        n_valid_anchors: n_valid,
        degenerate: n_valid == 0,
    })
}

/// Mean over the batch of -log softmax(logits)[label].
pub fn ce_loss(tape: &mut Tape, logits: &Tensor, labels: &[usize]) -> Result<Tensor> {
    if logits.shape().len() != 2 {
        return Err(Error::Shape(format!(
            "ce_loss logits must be [n, k], got {:?}",
            logits.shape()
        )));
    }
    let (n, k) = (logits.shape()[0], logits.shape()[1]);
    if labels.len() != n {
        return Err(Error::Shape(format!(
            "ce_loss: {n} rows but {} labels",
            labels.len()
        )));
    }
    let mut onehot = vec![0.0; n * k];
    for (i, &y) in labels.iter().enumerate() {
        if y >= k {
            return Err(Error::Validation(format!(
                "label {y} out of range for {k} classes"
            )));
        }
        onehot[i * k + y] = 1.0;
    }
    let onehot = tape.constant(onehot, vec![n, k])?;
    let logp = tape.log_softmax(logits)?;
    let picked = tape.mul(&logp, &onehot)?;
    let total = tape.sum(&picked)?;
    tape.mul_scalar(&total, -1.0 / n as f64)
}

/// SCL over sample representations only.
pub fn scl_loss(
    tape: &mut Tape,
    reps: &Tensor,
    labels: &[usize],
    temperature: f64,
) -> Result<ContrastiveOutput> {
    let n = reps.shape().first().copied().unwrap_or(0);
    if n < 2 {
        return Err(Error::Validation(format!(
            "scl_loss needs at least 2 samples, got {n}"
        )));
    }
    let batch = ContrastiveBatch::new(
        reps.clone(),
        labels.to_vec(),
        vec![true; n],
        vec![false; n],
        temperature,
    )?;
    contrastive_loss(tape, &batch)
}

/// SCL over the batch augmented with the K label embeddings, which act both
/// as anchors and as contrast terms. `label_embeds` is [K, d] (typically a
/// transposed classifier matrix, so gradients flow into the classifier);
/// `embed_labels[k]` is the class carried by row k and must be unique.
pub fn acl_embed_loss(
    tape: &mut Tape,
    sample_reps: &Tensor,
    sample_labels: &[usize],
    label_embeds: &Tensor,
    embed_labels: &[usize],
    temperature: f64,
) -> Result<ContrastiveOutput> {
    if sample_reps.shape().len() != 2 || label_embeds.shape().len() != 2 {
        return Err(Error::Shape("acl_embed_loss expects 2-D inputs".into()));
    }
    if sample_reps.shape()[1] != label_embeds.shape()[1] {
        return Err(Error::Shape(format!(
            "representation width {} != label embedding width {}",
            sample_reps.shape()[1],
            label_embeds.shape()[1]
        )));
    }
    let k = label_embeds.shape()[0];
    if embed_labels.len() != k {
        return Err(Error::Shape("one label per label embedding required".into()));
    }
    let mut seen = vec![false; embed_labels.iter().max().map(|&m| m + 1).unwrap_or(0)];
    for &l in embed_labels {
        if std::mem::replace(&mut seen[l], true) {
            return Err(Error::Validation(format!(
                "duplicate label {l} among label embeddings"
            )));
        }
    }
    let n = sample_reps.shape()[0];
    let reps = if n == 0 {
        label_embeds.clone()
    } else {
        tape.concat(&[sample_reps, label_embeds], 0)?
    };
    let mut labels = sample_labels.to_vec();
    labels.extend_from_slice(embed_labels);
    let total = n + k;
    let batch = ContrastiveBatch::new(
        reps,
        labels,
        vec![true; total],
        vec![false; total],
        temperature,
    )?;
    contrastive_loss(tape, &batch)
}

/// Cross-layer contrastive distillation: SCL over the 2N+2K batch of
/// student samples, student label embeddings, teacher samples, and teacher
/// label embeddings. Teacher rows must be tape constants (stop-gradient);
/// teacher sample i carries the same label as student sample i.
#[allow(clippy::too_many_arguments)]
pub fn acl_cl_loss(
    tape: &mut Tape,
    student_reps: &Tensor,
    labels: &[usize],
    student_label_embeds: &Tensor,
    teacher_reps: &Tensor,
    teacher_label_embeds: &Tensor,
    n_classes: usize,
    temperature: f64,
) -> Result<ContrastiveOutput> {
    let d = student_reps.shape().get(1).copied().unwrap_or(0);
    for (name, t) in [
        ("student label embeddings", student_label_embeds),
        ("teacher representations", teacher_reps),
        ("teacher label embeddings", teacher_label_embeds),
    ] {
        if t.shape().len() != 2 || t.shape()[1] != d {
            return Err(Error::Shape(format!(
                "{name} width {:?} incompatible with student width {d}",
                t.shape()
            )));
        }
    }
    if teacher_reps.requires_grad() || teacher_label_embeds.requires_grad() {
        return Err(Error::Validation(
            "teacher entries must be stop-gradient constants".into(),
        ));
    }
    let n = student_reps.shape()[0];
    if teacher_reps.shape()[0] != n {
        return Err(Error::Shape(format!(
            "teacher has {} samples, student has {n}",
            teacher_reps.shape()[0]
        )));
    }
    if student_label_embeds.shape()[0] != n_classes || teacher_label_embeds.shape()[0] != n_classes {
        return Err(Error::Shape("label embedding count != n_classes".into()));
    }
    let reps = tape.concat(
        &[student_reps, student_label_embeds, teacher_reps, teacher_label_embeds],
        0,
    )?;
    let class_labels: Vec<usize> = (0..n_classes).collect();
    let mut all_labels = labels.to_vec();
    all_labels.extend_from_slice(&class_labels);
    all_labels.extend_from_slice(labels);
    all_labels.extend_from_slice(&class_labels);
    let total = 2 * n + 2 * n_classes;
    let mut stop = vec![false; total];
    for s in stop.iter_mut().skip(n + n_classes) {
        *s = true;
    }
    let batch = ContrastiveBatch::new(reps, all_labels, vec![true; total], stop, temperature)?;
    contrastive_loss(tape, &batch)
}

/// InfoNCE over N (anchor, positive) pairs: for anchor i the positive is
/// its paired row and the contrast set is every other row of the combined
/// 2N batch (self excluded); mean over the N anchors.
pub fn info_nce_loss(
    tape: &mut Tape,
    anchors: &Tensor,
    positives: &Tensor,
    temperature: f64,
) -> Result<Tensor> {
    if anchors.shape().len() != 2 || positives.shape() != anchors.shape() {
        return Err(Error::Shape(format!(
            "info_nce_loss: anchors {:?} vs positives {:?}",
            anchors.shape(),
            positives.shape()
        )));
    }
    let n = anchors.shape()[0];
    if n < 2 {
        return Err(Error::Validation(format!(
            "info_nce_loss needs at least 2 pairs, got {n}"
        )));
    }
    if temperature <= 0.0 {
        return Err(Error::Validation("temperature must be positive".into()));
    }
    let b = 2 * n;
    let reps = tape.concat(&[anchors, positives], 0)?;
    let z = tape.l2_normalize(&reps)?;
    let zt = tape.transpose2(&z)?;
    let sims = tape.matmul(&z, &zt)?;
    let sims = tape.mul_scalar(&sims, 1.0 / temperature)?;

    let mut offdiag = vec![1.0; b * b];
    let mut wnum = vec![0.0; b * b];
    let mut anchor_ind = vec![0.0; b];
    for i in 0..b {
        offdiag[i * b + i] = 0.0;
    }
    for i in 0..n {
        wnum[i * b + (n + i)] = 1.0;
        anchor_ind[i] = 1.0;
    }
    let offdiag = tape.constant(offdiag, vec![b, b])?;
    let wnum = tape.constant(wnum, vec![b, b])?;
    let anchor_ind = tape.constant(anchor_ind, vec![b])?;

    let expd = tape.exp(&sims)?;
    let expd = tape.mul(&expd, &offdiag)?;
    let denom = tape.sum_last(&expd)?;
    let log_denom = tape.log(&denom)?;
    let anchored = tape.mul(&log_denom, &anchor_ind)?;
    let denom_term = tape.sum(&anchored)?;
    let num_scores = tape.mul(&sims, &wnum)?;
    let num_term = tape.sum(&num_scores)?;
    let diff = tape.sub(&denom_term, &num_term)?;
    tape.mul_scalar(&diff, 1.0 / n as f64)
}

/// Soft-target distillation: mean over the batch of the cross-entropy
/// between teacher probabilities at temperature T and the student's
/// temperature-scaled log-probabilities. `teacher_probs` must already be
/// softmax(teacher_logits / T) and is treated as constant.
pub fn kd_loss(
    tape: &mut Tape,
    student_logits: &Tensor,
    teacher_probs: &Tensor,
    temperature: f64,
) -> Result<Tensor> {
    if student_logits.shape() != teacher_probs.shape() || student_logits.shape().len() != 2 {
        return Err(Error::Shape(format!(
            "kd_loss: student {:?} vs teacher {:?}",
            student_logits.shape(),
            teacher_probs.shape()
        )));
    }
    if temperature <= 0.0 {
        return Err(Error::Validation("kd temperature must be positive".into()));
    }
    let n = student_logits.shape()[0];
    let scaled = tape.mul_scalar(student_logits, 1.0 / temperature)?;
    let logp = tape.log_softmax(&scaled)?;
    let weighted = tape.mul(&logp, teacher_probs)?;
    let total = tape.sum(&weighted)?;
    tape.mul_scalar(&total, -1.0 / n as f64)
}

/// The scalar losses of one step together with the effective mixing weight.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBundle {
    pub ce: f64,
    pub contrastive: f64,
    pub combined: f64,
    pub lambda_used: f64,
}

/// combined = (1 - lambda') * ce + lambda' * contrastive, with the
/// lambda' = 0 and lambda' = 1 endpoints returning the inputs untouched so
/// collapse contracts hold bit-for-bit.
pub fn combine(ce: f64, contrastive: f64, lambda_prime: f64) -> Result<LossBundle> {
    if !(0.0..=1.0).contains(&lambda_prime) {
        return Err(Error::Validation(format!(
            "lambda' {lambda_prime} outside [0, 1]"
        )));
    }
    let combined = if lambda_prime == 0.0 {
        ce
    } else if lambda_prime == 1.0 {
        contrastive
    } else {
        (1.0 - lambda_prime) * ce + lambda_prime * contrastive
    };
    Ok(LossBundle {
        ce,
        contrastive,
        combined,
        lambda_used: lambda_prime,
    })
}

/// Softmax of a single row, host-side.
pub fn softmax_host(row: &[f64]) -> Vec<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|&x| (x - max).exp()).collect();
    let denom: f64 = exps.iter().sum();
    exps.iter().map(|&e| e / denom).collect()
}

/// Natural-log entropy of a probability vector (0 log 0 := 0).
pub fn entropy_host(probs: &[f64]) -> f64 {
    -probs
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| p * p.ln())
        .sum::<f64>()
}

#[cfg(test)]
mod tests;
