//! The training regimes and the multi-seed experiment driver.

use std::fmt::Write as _;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{stage1_scope, AdamW, LinearSchedule, Objective, Regime, RegimeConfig};
use crate::data::{make_batches, tokenize, Dataset, TokenBatch, Vocab, CLS_ID, PAD_ID};
use crate::error::{Error, Result};
use crate::gradalign::{gated_step_grads, GatedStep};
use crate::infer;
use crate::losses;
use crate::mix_seed;
use crate::model::{save_checkpoint, ModelConfig, MultiExitModel, Scope};
use crate::records::{
    AngleRecord, ExitScore, JsonlWriter, MetricsRecord, RunSummary,
};
use crate::tensor::{Tape, Tensor};

const EVAL_BATCH: usize = 64;

struct Writers {
    metrics: JsonlWriter,
    angles: Option<JsonlWriter>,
}

#[derive(Default)]
struct GateStats {
    gate_steps: usize,
    gated_steps: usize,
}

struct StepOut {
    gs: GatedStep,
    /// Pure cross-entropy value (the base objective may add distillation).
    ce: f64,
    correct: usize,
    has_contrastive: bool,
}

fn divergence_ctx(e: Error, stage: u32, epoch: usize, step: usize) -> Error {
    match e {
        Error::NonFinite(m) | Error::Divergence(m) => Error::Divergence(format!(
            "stage {stage} epoch {epoch} step {step}: {m}"
        )),
        other => other,
    }
}

fn count_correct(logits: &Tensor, labels: &[usize]) -> usize {
    let k = logits.shape()[1];
    labels
        .iter()
        .enumerate()
        .filter(|(i, &y)| infer::argmax(&logits.data()[i * k..(i + 1) * k]) == y)
        .count()
}

fn n_batches(n: usize, batch_size: usize) -> usize {
    n.div_ceil(batch_size)
}

/// One optimizer step of stage-1-style training (backbone + final exit).
fn stage1_step(
    model: &MultiExitModel,
    batch: &TokenBatch,
    objective: Objective,
    cfg: &RegimeConfig,
    rng: &mut ChaCha8Rng,
) -> Result<StepOut> {
    let m_last = model.cfg.n_layers;
    let scope = stage1_scope(m_last);
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, scope, Some(scope))?;
    let states = model.encode(&mut tape, &bound, batch, true, rng)?;
    let (h_e, logits) = model.exit_forward(&mut tape, &bound, m_last, &states[m_last - 1], batch)?;
    // The base objective is always recorded before the contrastive branch so
    // its backward sweep is unaffected by the branch's presence.
    let base = losses::ce_loss(&mut tape, &logits, &batch.labels)?;
    let contrastive: Option<Tensor> = match objective {
        Objective::Ce => None,
        Objective::CeScl => {
            if batch.n >= 2 {
                Some(losses::scl_loss(&mut tape, &h_e, &batch.labels, cfg.tau)?.loss)
            } else {
                None
            }
        }
        Objective::AclEmbed => {
            let le = model.label_embedding_tensor(&mut tape, &bound, m_last)?;
            let embed_labels: Vec<usize> = (0..model.cfg.n_classes).collect();
            Some(
                losses::acl_embed_loss(&mut tape, &h_e, &batch.labels, &le, &embed_labels, cfg.tau)?
                    .loss,
            )
        }
        Objective::AclCl => {
            return Err(Error::Validation(
                "acl_cl is not a stage-1 objective".into(),
            ))
        }
    };
    let correct = count_correct(&logits, &batch.labels);
    let ce = base.scalar()?;
    let has_contrastive = contrastive.is_some();
    let gs = gated_step_grads(
        &model.params,
        &mut tape,
        &bound,
        &base,
        contrastive.as_ref(),
        cfg.lambda,
        cfg.gamma_thres,
        scope,
        cfg.use_acl_grad,
    )?;
    Ok(StepOut {
        gs,
        ce,
        correct,
        has_contrastive,
    })
}

/// One joint step: sum of every exit's cross-entropy, all parameters.
fn jt_step(
    model: &MultiExitModel,
    batch: &TokenBatch,
    cfg: &RegimeConfig,
    rng: &mut ChaCha8Rng,
) -> Result<StepOut> {
    let m_last = model.cfg.n_layers;
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, Scope::All, Some(Scope::All))?;
    let states = model.encode(&mut tape, &bound, batch, true, rng)?;
    let mut total: Option<Tensor> = None;
    let mut correct = 0usize;
    for m in 1..=m_last {
        let (_, logits) = model.exit_forward(&mut tape, &bound, m, &states[m - 1], batch)?;
        let ce_m = losses::ce_loss(&mut tape, &logits, &batch.labels)?;
        total = Some(match total {
            None => ce_m,
            Some(t) => tape.add(&t, &ce_m)?,
         });
        if m == m_last {
            correct = count_correct(&logits, &batch.labels);
        }
    }
    let base = total.expect("n_layers >= 1");
    let ce = base.scalar()?;
    let gs = gated_step_grads(
        &model.params,
        &mut tape,
        &bound,
        &base,
        None,
        cfg.lambda,
        cfg.gamma_thres,
        Scope::All,
        false,
    )?;
    Ok(StepOut {
        gs,
        ce,
        correct,
        has_contrastive: false,
    })
}

#[allow(clippy::too_many_arguments)]
fn log_step(
    writers: &mut Writers,
    gate: &mut GateStats,
    run_id: &str,
    stage: u32,
    epoch: usize,
    step: usize,
    exit_layer: usize,
    lr: f64,
    out: &StepOut,
) -> Result<()> {
    writers.metrics.write(&MetricsRecord {
        run_id: run_id.to_string(),
        stage,
        epoch,
        step,
        exit_layer,
        loss_ce: out.ce,
        loss_contrastive: out.has_contrastive.then_some(out.gs.bundle.contrastive),
        lambda_prime: out.has_contrastive.then_some(out.gs.bundle.lambda_used),
        lr,
        train_acc: None,
        eval_acc: None,
    })?;
    if out.has_contrastive {
        if let Some(w) = writers.angles.as_mut() {
            w.write(&AngleRecord {
                step,
                stage,
                exit_layer,
                cos_gamma: out.gs.report.cos_gamma,
                gamma_deg: out.gs.report.gamma_deg,
                gated: out.gs.report.gated,
                lambda_prime: out.gs.report.lambda_prime,
                loss_ce: out.gs.bundle.ce,
                loss_acl: out.gs.bundle.contrastive,
            })?;
            gate.gate_steps += 1;
            if out.gs.report.gated {
                gate.gated_steps += 1;
            }
        }
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn log_epoch(
    writers: &mut Writers,
    run_id: &str,
    stage: u32,
    epoch: usize,
    step: usize,
    exit_layer: usize,
    mean_ce: f64,
    mean_contrastive: Option<f64>,
    lr: f64,
    train_acc: f64,
    eval_acc: f64,
) -> Result<()> {
    writers.metrics.write(&MetricsRecord {
        run_id: run_id.to_string(),
        stage,
        epoch,
        step,
        exit_layer,
        loss_ce: mean_ce,
        loss_contrastive: mean_contrastive,
        lambda_prime: None,
        lr,
        train_acc: Some(train_acc),
        eval_acc: Some(eval_acc),
    })
}

/// Stage-1-style epoch loop, shared by single-exit training, the first
/// stage of two-stage training, and the odd epochs of alternating training.
#[allow(clippy::too_many_arguments)]
fn run_stage1(
    model: &mut MultiExitModel,
    train_ds: &Dataset,
    eval_ds: &Dataset,
    vocab: &Vocab,
    cfg: &RegimeConfig,
    objective: Objective,
    epochs: usize,
    writers: &mut Writers,
    gate: &mut GateStats,
    run_id: &str,
) -> Result<()> {
    let stage = 1u32;
    let m_last = model.cfg.n_layers;
    let steps_per_epoch = n_batches(train_ds.len(), cfg.batch_size);
    let sched = LinearSchedule::new(cfg.peak_lr, epochs * steps_per_epoch, cfg.warmup_frac)?;
    let mut opt = AdamW::new(&model.params, cfg.weight_decay);
    let mut step = 0usize;
    for epoch in 1..=epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(
            cfg.seed,
            &format!("dropout.e{epoch}"),
        ));
        let batches = make_batches(
            train_ds,
            vocab,
            cfg.batch_size,
            model.cfg.max_seq_len,
            mix_seed(cfg.seed, &format!("shuffle.e{epoch}")),
            true,
        )?;
        let (mut correct, mut seen) = (0usize, 0usize);
        let (mut ce_sum, mut co_sum, mut co_n) = (0.0f64, 0.0f64, 0usize);
        let mut last_lr = 0.0;
        for batch in &batches {
            let lr = sched.lr_at(step);
            last_lr = lr;
            let out = stage1_step(model, batch, objective, cfg, &mut rng)
                .map_err(|e| divergence_ctx(e, stage, epoch, step))?;
            opt.step(&mut model.params, &out.gs.final_grads, lr)
                .map_err(|e| divergence_ctx(e, stage, epoch, step))?;
            correct += out.correct;
            seen += batch.n;
            ce_sum += out.ce;
            if out.has_contrastive {
                co_sum += out.gs.bundle.contrastive;
                co_n += 1;
            }
            log_step(writers, gate, run_id, stage, epoch, step, m_last, lr, &out)?;
            step += 1;
        }
        let eval_acc = infer::evaluate_fixed(model, eval_ds, vocab, m_last, EVAL_BATCH)?;
        log_epoch(
            writers,
            run_id,
            stage,
            epoch,
            step,
            m_last,
            ce_sum / batches.len() as f64,
            (co_n > 0).then(|| co_sum / co_n as f64),
            last_lr,
            correct as f64 / seen as f64,
            eval_acc,
        )?;
    }
    Ok(())
}

/// Frozen-backbone activations and teacher outputs, cached per sample once
/// per stage-2 run. The backbone runs in eval mode (deterministic) and
/// padding cannot leak into valid positions, so per-sample rows are exact
/// regardless of the batch they were computed in.
struct Stage2Cache {
    /// h_rows[m-1][sample] = flattened `len x d_model` hidden state H^(m).
    h_rows: Vec<Vec<Vec<f64>>>,
    lens: Vec<usize>,
    labels: Vec<usize>,
    teacher_he: Vec<Vec<f64>>,
    teacher_probs: Vec<Vec<f64>>,
    teacher_le: Vec<f64>,
    le_width: usize,
}

fn build_stage2_cache(
    model: &MultiExitModel,
    ds: &Dataset,
    vocab: &Vocab,
    upto: usize,
    with_teacher: bool,
    kd_temperature: f64,
) -> Result<Stage2Cache> {
    let m_last = model.cfg.n_layers;
    let d = model.cfg.d_model;
    let k = model.cfg.n_classes;
    let mut cache = Stage2Cache {
        h_rows: vec![vec![Vec::new(); ds.len()]; upto],
        lens: vec![0; ds.len()],
        labels: ds.records.iter().map(|r| r.label).collect(),
        teacher_he: vec![Vec::new(); ds.len()],
        teacher_probs: vec![Vec::new(); ds.len()],
        teacher_le: Vec::new(),
        le_width: 0,
    };
    let batches = make_batches(ds, vocab, EVAL_BATCH, model.cfg.max_seq_len, 0, false)?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for batch in &batches {
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape, Scope::BackboneAndExit(m_last), None)?;
        let depth = if with_teacher { m_last } else { upto };
        let states = model.encode_upto(&mut tape, &bound, batch, depth, false, &mut rng)?;
        let lens: Vec<usize> = batch
            .sample_idx
            .iter()
            .map(|&i| tokenize(&ds.records[i].text, vocab, model.cfg.max_seq_len).len())
            .collect();
        for (layer, state) in states.iter().take(upto).enumerate() {
            for (pos, &sample) in batch.sample_idx.iter().enumerate() {
                let li = lens[pos];
                let start = pos * batch.l * d;
                cache.h_rows[layer][sample] = state.data()[start..start + li * d].to_vec();
            }
        }
        for (pos, &sample) in batch.sample_idx.iter().enumerate() {
            cache.lens[sample] = lens[pos];
        }
        if with_teacher {
            let (h_e, logits) =
                model.exit_forward(&mut tape, &bound, m_last, &states[m_last - 1], batch)?;
            let de = h_e.shape()[1];
            for (pos, &sample) in batch.sample_idx.iter().enumerate() {
                cache.teacher_he[sample] = h_e.data()[pos * de..(pos + 1) * de].to_vec();
                let row = &logits.data()[pos * k..(pos + 1) * k];
                let scaled: Vec<f64> = row.iter().map(|v| v / kd_temperature).collect();
                cache.teacher_probs[sample] = losses::softmax_host(&scaled);
            }
        }
    }
    if with_teacher {
        let le = model.label_embeddings(m_last)?;
        cache.le_width = le[0].len();
        cache.teacher_le = le.into_iter().flatten().collect();
    }
    Ok(cache)
}

/// Assemble a zero-padded hidden-state batch plus a marker token batch
/// (only validity matters) from the cache.
fn assemble_cached_batch(
    cache: &Stage2Cache,
    layer: usize,
    sample_idx: &[usize],
    d: usize,
) -> (Vec<f64>, TokenBatch) {
    let n = sample_idx.len();
    let l = sample_idx.iter().map(|&i| cache.lens[i]).max().unwrap_or(1);
    let mut h = vec![0.0; n * l * d];
    let mut ids = vec![PAD_ID; n * l];
    let mut labels = Vec::with_capacity(n);
    for (pos, &sample) in sample_idx.iter().enumerate() {
        let li = cache.lens[sample];
        h[pos * l * d..pos * l * d + li * d].copy_from_slice(&cache.h_rows[layer - 1][sample]);
        for slot in ids.iter_mut().skip(pos * l).take(li) {
            *slot = CLS_ID;
        }
        labels.push(cache.labels[sample]);
    }
    (
        h,
        TokenBatch {
            ids,
            n,
            l,
            labels,
            sample_idx: sample_idx.to_vec(),
        },
    )
}

fn stage2_step(
    model: &MultiExitModel,
    cache: &Stage2Cache,
    sample_idx: &[usize],
    m: usize,
    cfg: &RegimeConfig,
) -> Result<StepOut> {
    let d = model.cfg.d_model;
    let k = model.cfg.n_classes;
    let (h, marker) = assemble_cached_batch(cache, m, sample_idx, d);
    let n = marker.n;
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, Scope::Exit(m), Some(Scope::Exit(m)))?;
    let h_t = tape.constant(h, vec![n, marker.l, d])?;
    let (h_e, logits) = model.exit_forward(&mut tape, &bound, m, &h_t, &marker)?;
    let ce_t = losses::ce_loss(&mut tape, &logits, &marker.labels)?;
    let ce = ce_t.scalar()?;
    let base = if cfg.kd {
        let probs: Vec<f64> = sample_idx
            .iter()
            .flat_map(|&i| cache.teacher_probs[i].clone())
            .collect();
        let tp = tape.constant(probs, vec![n, k])?;
        let kd = losses::kd_loss(&mut tape, &logits, &tp, cfg.kd_temperature)?;
        let kd = tape.mul_scalar(&kd, cfg.kd_weight)?;
        tape.add(&ce_t, &kd)?
    } else {
        ce_t
    };
    let contrastive: Option<Tensor> = match cfg.objective {
        Objective::Ce => None,
        Objective::CeScl => {
            if n >= 2 {
                Some(losses::scl_loss(&mut tape, &h_e, &marker.labels, cfg.tau)?.loss)
            } else {
                None
            }
        }
        Objective::AclEmbed => {
            let le = model.label_embedding_tensor(&mut tape, &bound, m)?;
            let embed_labels: Vec<usize> = (0..k).collect();
            Some(
                losses::acl_embed_loss(&mut tape, &h_e, &marker.labels, &le, &embed_labels, cfg.tau)?
                    .loss,
            )
        }
        Objective::AclCl => {
            let le = model.label_embedding_tensor(&mut tape, &bound, m)?;
            let t_he: Vec<f64> = sample_idx
                .iter()
                .flat_map(|&i| cache.teacher_he[i].clone())
                .collect();
            let de = cache.le_width;
            let t_he = tape.constant(t_he, vec![n, de])?;
            let t_le = tape.constant(cache.teacher_le.clone(), vec![k, de])?;
            Some(
                losses::acl_cl_loss(&mut tape, &h_e, &marker.labels, &le, &t_he, &t_le, k, cfg.tau)?
                    .loss,
            )
        }
    };
    let correct = count_correct(&logits, &marker.labels);
    let has_contrastive = contrastive.is_some();
    let gs = gated_step_grads(
        &model.params,
        &mut tape,
        &bound,
        &base,
        contrastive.as_ref(),
        cfg.lambda,
        cfg.gamma_thres,
        Scope::Exit(m),
        cfg.use_acl_grad,
    )?;
    Ok(StepOut {
        gs,
        ce,
        correct,
        has_contrastive,
    })
}

/// Exit-m accuracy over an eval-set cache.
fn eval_exit_cached(
    model: &MultiExitModel,
    cache: &Stage2Cache,
    m: usize,
) -> Result<f64> {
    let d = model.cfg.d_model;
    let k = model.cfg.n_classes;
    let n_total = cache.lens.len();
    let mut correct = 0usize;
    let mut start = 0usize;
    while start < n_total {
        let idx: Vec<usize> = (start..(start + EVAL_BATCH).min(n_total)).collect();
        let (h, marker) = assemble_cached_batch(cache, m, &idx, d);
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape, Scope::Exit(m), None)?;
        let h_t = tape.constant(h, vec![marker.n, marker.l, d])?;
        let (_, logits) = model.exit_forward(&mut tape, &bound, m, &h_t, &marker)?;
        for (pos, &y) in marker.labels.iter().enumerate() {
            if infer::argmax(&logits.data()[pos * k..(pos + 1) * k]) == y {
                correct += 1;
            }
        }
        start += EVAL_BATCH;
    }
    Ok(correct as f64 / n_total as f64)
}

/// Stage 2 of two-stage training: backbone and final exit frozen, each
/// intermediate exit trained independently (in layer order, with a fresh
/// optimizer per exit).
fn run_stage2(
    model: &mut MultiExitModel,
    train_ds: &Dataset,
    eval_ds: &Dataset,
    vocab: &Vocab,
    cfg: &RegimeConfig,
    writers: &mut Writers,
    gate: &mut GateStats,
    run_id: &str,
) -> Result<()> {
    let stage = 2u32;
    let m_last = model.cfg.n_layers;
    if m_last == 1 {
        return Ok(());
    }
    let with_teacher = cfg.kd || cfg.objective == Objective::AclCl;
    let train_cache = build_stage2_cache(
        model,
        train_ds,
        vocab,
        m_last - 1,
        with_teacher,
        cfg.kd_temperature,
    )?;
    let eval_cache = build_stage2_cache(model, eval_ds, vocab, m_last - 1, false, cfg.kd_temperature)?;
    let steps_per_epoch = n_batches(train_ds.len(), cfg.batch_size);

    for m in 1..m_last {
        let sched =
            LinearSchedule::new(cfg.peak_lr, cfg.epochs_stage2 * steps_per_epoch, cfg.warmup_frac)?;
        let mut opt = AdamW::new(&model.params, cfg.weight_decay);
        let mut step = 0usize;
        for epoch in 1..=cfg.epochs_stage2 {
            let batches = make_batches(
                train_ds,
                vocab,
                cfg.batch_size,
                model.cfg.max_seq_len,
                mix_seed(cfg.seed, &format!("shuffle.s{stage}.m{m}.e{epoch}")),
                true,
            )?;
            let (mut correct, mut seen) = (0usize, 0usize);
            let (mut ce_sum, mut co_sum, mut co_n) = (0.0f64, 0.0f64, 0usize);
            let mut last_lr = 0.0;
            for batch in &batches {
                let lr = sched.lr_at(step);
                last_lr = lr;
                let out = stage2_step(model, &train_cache, &batch.sample_idx, m, cfg)
                    .map_err(|e| divergence_ctx(e, stage, epoch, step))?;
                opt.step(&mut model.params, &out.gs.final_grads, lr)
                    .map_err(|e| divergence_ctx(e, stage, epoch, step))?;
                correct += out.correct;
                seen += batch.n;
                ce_sum += out.ce;
                if out.has_contrastive {
                    co_sum += out.gs.bundle.contrastive;
                    co_n += 1;
                }
                log_step(writers, gate, run_id, stage, epoch, step, m, lr, &out)?;
                step += 1;
            }
            let eval_acc = eval_exit_cached(model, &eval_cache, m)?;
            log_epoch(
                writers,
                run_id,
                stage,
                epoch,
                step,
                m,
                ce_sum / batches.len().max(1) as f64,
                (co_n > 0).then(|| co_sum / co_n as f64),
                last_lr,
                correct as f64 / seen.max(1) as f64,
                eval_acc,
            )?;
        }
    }
    Ok(())
}

/// Joint training: one stage minimizing the sum of every exit's
/// cross-entropy over all parameters.
fn run_jt(
    model: &mut MultiExitModel,
    train_ds: &Dataset,
    eval_ds: &Dataset,
    vocab: &Vocab,
    cfg: &RegimeConfig,
    writers: &mut Writers,
    gate: &mut GateStats,
    run_id: &str,
) -> Result<()> {
    let stage = 0u32;
    let m_last = model.cfg.n_layers;
    let steps_per_epoch = n_batches(train_ds.len(), cfg.batch_size);
    let sched = LinearSchedule::new(
        cfg.peak_lr,
        cfg.epochs_stage1 * steps_per_epoch,
        cfg.warmup_frac,
    )?;
    let mut opt = AdamW::new(&model.params, cfg.weight_decay);
    let mut step = 0usize;
    for epoch in 1..=cfg.epochs_stage1 {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(
            cfg.seed,
            &format!("dropout.e{epoch}"),
        ));
        let batches = make_batches(
            train_ds,
            vocab,
            cfg.batch_size,
            model.cfg.max_seq_len,
            mix_seed(cfg.seed, &format!("shuffle.e{epoch}")),
            true,
        )?;
        let (mut correct, mut seen) = (0usize, 0usize);
        let mut ce_sum = 0.0f64;
        let mut last_lr = 0.0;
        for batch in &batches {
            let lr = sched.lr_at(step);
            last_lr = lr;
            let out = jt_step(model, batch, cfg, &mut rng)
                .map_err(|e| divergence_ctx(e, stage, epoch, step))?;
            opt.step(&mut model.params, &out.gs.final_grads, lr)
                .map_err(|e| divergence_ctx(e, stage, epoch, step))?;
            correct += out.correct;
            seen += batch.n;
            ce_sum += out.ce;
            log_step(writers, gate, run_id, stage, epoch, step, 0, lr, &out)?;
            step += 1;
        }
        // one eval record per exit
        let train_acc = correct as f64 / seen as f64;
        for m in 1..=m_last {
            let eval_acc = infer::evaluate_fixed(model, eval_ds, vocab, m, EVAL_BATCH)?;
            log_epoch(
                writers,
                run_id,
                stage,
                epoch,
                step,
                m,
                ce_sum / batches.len() as f64,
                None,
                last_lr,
                train_acc,
                eval_acc,
            )?;
        }
    }
    Ok(())
}

/// Alternating training: odd epochs optimize the final exit's
/// cross-entropy over backbone + final exit; even epochs optimize the sum
/// of all exits' cross-entropies over all parameters. One optimizer and one
/// schedule span the whole run.
fn run_alt(
    model: &mut MultiExitModel,
    train_ds: &Dataset,
    eval_ds: &Dataset,
    vocab: &Vocab,
    cfg: &RegimeConfig,
    writers: &mut Writers,
    gate: &mut GateStats,
    run_id: &str,
) -> Result<()> {
    let m_last = model.cfg.n_layers;
    let steps_per_epoch = n_batches(train_ds.len(), cfg.batch_size);
    let sched = LinearSchedule::new(
        cfg.peak_lr,
        cfg.epochs_stage1 * steps_per_epoch,
        cfg.warmup_frac,
    )?;
    let mut opt = AdamW::new(&model.params, cfg.weight_decay);
    let mut step = 0usize;
    for epoch in 1..=cfg.epochs_stage1 {
        let odd = epoch % 2 == 1;
        let stage = if odd { 1u32 } else { 0u32 };
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(
            cfg.seed,
            &format!("dropout.e{epoch}"),
        ));
        let batches = make_batches(
            train_ds,
            vocab,
            cfg.batch_size,
            model.cfg.max_seq_len,
            mix_seed(cfg.seed, &format!("shuffle.e{epoch}")),
            true,
        )?;
        let (mut correct, mut seen) = (0usize, 0usize);
        let mut ce_sum = 0.0f64;
        let mut last_lr = 0.0;
        for batch in &batches {
            let lr = sched.lr_at(step);
            last_lr = lr;
            let out = if odd {
                stage1_step(model, batch, Objective::Ce, cfg, &mut rng)
            } else {
                jt_step(model, batch, cfg, &mut rng)
            }
            .map_err(|e| divergence_ctx(e, stage, epoch, step))?;
            opt.step(&mut model.params, &out.gs.final_grads, lr)
                .map_err(|e| divergence_ctx(e, stage, epoch, step))?;
            correct += out.correct;
            seen += batch.n;
            ce_sum += out.ce;
            log_step(
                writers,
                gate,
                run_id,
                stage,
                epoch,
                step,
                if odd { m_last } else { 0 },
                lr,
                &out,
            )?;
            step += 1;
        }
        let eval_acc = infer::evaluate_fixed(model, eval_ds, vocab, m_last, EVAL_BATCH)?;
        log_epoch(
            writers,
            run_id,
            stage,
            epoch,
            step,
            if odd { m_last } else { 0 },
            ce_sum / batches.len() as f64,
            None,
            last_lr,
            correct as f64 / seen as f64,
            eval_acc,
        )?;
    }
    Ok(())
}

/// Train a model under the configured regime, writing metrics (and, when
/// the angle gate is active, angle records) plus checkpoints into
/// `out_dir`. Returns the final per-exit evaluation summary.
pub fn train_run(
    model: &mut MultiExitModel,
    train_ds: &Dataset,
    eval_ds: &Dataset,
    vocab: &Vocab,
    cfg: &RegimeConfig,
    out_dir: &Path,
) -> Result<RunSummary> {
    cfg.validate()?;
    if train_ds.is_empty() || eval_ds.is_empty() {
        return Err(Error::Validation("empty dataset".into()));
    }
    std::fs::create_dir_all(out_dir)?;
    let run_id = cfg.run_id();
    let angle_active = cfg.use_acl_grad
        && (cfg.stage1_objective() != Objective::Ce
            || (cfg.regime == Regime::TwoStage && cfg.objective != Objective::Ce));
    let mut writers = Writers {
        metrics: JsonlWriter::create(&out_dir.join("metrics.jsonl"))?,
        angles: if angle_active {
            Some(JsonlWriter::create(&out_dir.join("angles.jsonl"))?)
        } else {
            None
        },
    };
    let mut gate = GateStats::default();

    match cfg.regime {
        Regime::SingleExit => {
            run_stage1(
                model,
                train_ds,
                eval_ds,
                vocab,
                cfg,
                cfg.stage1_objective(),
                cfg.epochs_stage1,
                &mut writers,
                &mut gate,
                &run_id,
            )?;
        }
        Regime::TwoStage => {
            run_stage1(
                model,
                train_ds,
                eval_ds,
                vocab,
                cfg,
                cfg.stage1_objective(),
                cfg.epochs_stage1,
                &mut writers,
                &mut gate,
                &run_id,
            )?;
            save_checkpoint(model, &out_dir.join("checkpoint_stage1.mxac"))?;
            run_stage2(
                model, train_ds, eval_ds, vocab, cfg, &mut writers, &mut gate, &run_id,
            )?;
        }
        Regime::Jt => {
            run_jt(
                model, train_ds, eval_ds, vocab, cfg, &mut writers, &mut gate, &run_id,
            )?;
        }
        Regime::Alt => {
            run_alt(
                model, train_ds, eval_ds, vocab, cfg, &mut writers, &mut gate, &run_id,
            )?;
        }
    }

    let mut per_exit_scores = Vec::new();
    for m in 1..=model.cfg.n_layers {
        per_exit_scores.push(ExitScore {
            exit_layer: m,
            score: infer::evaluate_fixed(model, eval_ds, vocab, m, EVAL_BATCH)?,
        });
    }
    let cross_layer_avg =
        per_exit_scores.iter().map(|s| s.score).sum::<f64>() / per_exit_scores.len() as f64;

    save_checkpoint(model, &out_dir.join("checkpoint.mxac"))?;
    let summary = RunSummary {
        run_id,
        seed: cfg.seed,
        per_exit_scores,
        cross_layer_avg,
        gate_steps: gate.gate_steps,
        gated_steps: gate.gated_steps,
        gated_fraction: (gate.gate_steps > 0)
            .then(|| gate.gated_steps as f64 / gate.gate_steps as f64),
    };
    crate::records::write_json_pretty(&summary, &out_dir.join("summary.json"))?;
    writers.metrics.finish()?;
    if let Some(w) = writers.angles {
        w.finish()?;
    }
    Ok(summary)
}

/// A multi-seed experiment over one regime configuration.
#[derive(Clone, Debug)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub regime: RegimeConfig,
    pub seeds: Vec<u64>,
}

#[derive(Clone, Debug)]
pub struct SeedResult {
    pub seed: u64,
    pub summary: RunSummary,
}

#[derive(Clone, Debug)]
pub struct ExperimentResult {
    pub per_seed: Vec<SeedResult>,
    pub mean_cross_layer: f64,
    pub std_cross_layer: f64,
}

/// Run the regime once per seed, writing per-seed artifacts under
/// `out_dir/seed-N/` and the aggregate score table (columns seed,
/// exit_layer, score) at `out_dir/scores.csv`.
pub fn run_experiment(
    exp: &ExperimentConfig,
    train_ds: &Dataset,
    eval_ds: &Dataset,
    vocab: &Vocab,
    out_dir: &Path,
) -> Result<ExperimentResult> {
    if exp.seeds.is_empty() {
        return Err(Error::Validation("experiment needs at least one seed".into()));
    }
    std::fs::create_dir_all(out_dir)?;
    let mut per_seed = Vec::new();
    for &seed in &exp.seeds {
        let mut regime = exp.regime.clone();
        regime.seed = seed;
        let mut model = MultiExitModel::new(exp.model.clone(), seed)?;
        let dir = out_dir.join(format!("seed-{seed}"));
        let summary = train_run(&mut model, train_ds, eval_ds, vocab, &regime, &dir)?;
        per_seed.push(SeedResult { seed, summary });
    }

    let mut csv = String::from("seed,exit_layer,score\n");
    for r in &per_seed {
        for s in &r.summary.per_exit_scores {
            writeln!(csv, "{},{},{}", r.seed, s.exit_layer, s.score).expect("string write");
        }
    }
    std::fs::write(out_dir.join("scores.csv"), csv)?;

    let xs: Vec<f64> = per_seed.iter().map(|r| r.summary.cross_layer_avg).collect();
    let mean = xs.iter().sum::<f64>() / xs.len() as f64;
    let std = (xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / xs.len() as f64).sqrt();
    let result = ExperimentResult {
        per_seed,
        mean_cross_layer: mean,
        std_cross_layer: std,
    };
    Ok(result)
}

/// The component-ablation ladder: the full configuration stripped one
/// mechanism at a time down to plain two-stage training with soft targets.
pub fn ablation_ladder(base: &ExperimentConfig) -> Vec<(String, ExperimentConfig)> {
    let mk = |name: &str, f: &dyn Fn(&mut RegimeConfig)| {
        let mut e = base.clone();
        e.regime.regime = Regime::TwoStage;
        f(&mut e.regime);
        (name.to_string(), e)
    };
    vec![
        mk("acl_full", &|r| {
            r.objective = Objective::AclCl;
            r.stage1_objective = None;
            r.use_acl_grad = true;
            r.kd = false;
        }),
        mk("no_acl_cl", &|r| {
            r.objective = Objective::AclEmbed;
            r.stage1_objective = None;
            r.use_acl_grad = true;
            r.kd = true;
        }),
        mk("no_acl_grad", &|r| {
            r.objective = Objective::AclEmbed;
            r.stage1_objective = None;
            r.use_acl_grad = false;
            r.kd = true;
        }),
        mk("ce_scl", &|r| {
            r.objective = Objective::CeScl;
            r.stage1_objective = None;
            r.use_acl_grad = false;
            r.kd = true;
        }),
        mk("2st", &|r| {
            r.objective = Objective::Ce;
            r.stage1_objective = None;
            r.use_acl_grad = false;
            r.kd = true;
        }),
    ]
}
