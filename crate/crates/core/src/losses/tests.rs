use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::tensor::{grad_check, Tape};

// ---------------------------------------------------------------------
// Independent oracles: direct nested-loop transcriptions of the loss
// definitions, kept free of the tape implementation.
// ---------------------------------------------------------------------

fn normalize_rows(reps: &[Vec<f64>]) -> Vec<Vec<f64>> {
    reps.iter()
        .map(|r| {
            let n = r.iter().map(|v| v * v).sum::<f64>().sqrt();
            r.iter().map(|v| v / n).collect()
        })
        .collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Supervised contrastive oracle. `include_self` switches the denominator
/// between the literal sum over all k and the standard self-excluded sum.
fn scl_oracle(
    reps: &[Vec<f64>],
    labels: &[usize],
    anchors: &[bool],
    tau: f64,
    include_self: bool,
) -> f64 {
    let z = normalize_rows(reps);
    let b = z.len();
    let mut total = 0.0;
    for i in 0..b {
        if !anchors[i] {
            continue;
        }
        let positives: Vec<usize> = (0..b)
            .filter(|&j| j != i && labels[j] == labels[i])
            .collect();
        if positives.is_empty() {
            continue;
        }
        let mut denom = 0.0;
        for k in 0..b {
            if k != i || include_self {
                denom += (dot(&z[i], &z[k]) / tau).exp();
            }
        }
        let mut inner = 0.0;
        for &j in &positives {
            let s = (dot(&z[i], &z[j]) / tau).exp() / denom;
            inner += s.ln();
        }
        total += -inner / positives.len() as f64;
    }
    total
}

/// InfoNCE oracle over the combined 2N batch.
fn info_nce_oracle(anchors: &[Vec<f64>], positives: &[Vec<f64>], tau: f64) -> f64 {
    let n = anchors.len();
    let mut all: Vec<Vec<f64>> = anchors.to_vec();
    all.extend(positives.iter().cloned());
    let z = normalize_rows(&all);
    let mut total = 0.0;
    for i in 0..n {
        let num = (dot(&z[i], &z[n + i]) / tau).exp();
        let mut denom = 0.0;
        for (a, za) in z.iter().enumerate() {
            if a != i {
                denom += (dot(&z[i], za) / tau).exp();
            }
        }
        total += -(num / denom).ln();
    }
    total / n as f64
}

fn rand_rows(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| (0..d).map(|_| rng.gen::<f64>() * 2.0 - 1.0 + 0.05).collect())
        .collect()
}

fn flat(rows: &[Vec<f64>]) -> Vec<f64> {
    rows.iter().flatten().copied().collect()
}

fn tensor_from(tape: &mut Tape, rows: &[Vec<f64>], grad: bool) -> Tensor {
    let d = rows[0].len();
    tape.leaf(flat(rows), vec![rows.len(), d], grad).unwrap()
}

// ---------------------------------------------------------------------
// Cross-entropy
// ---------------------------------------------------------------------

#[test]
fn ce_of_uniform_logits_is_log_k() {
    let mut t = Tape::new();
    let logits = t.constant(vec![0.5; 2 * 3], vec![2, 3]).unwrap();
    let loss = ce_loss(&mut t, &logits, &[0, 2]).unwrap();
    assert!((loss.scalar().unwrap() - 3.0f64.ln()).abs() < 1e-12);
}

#[test]
fn ce_saturated_case() {
    let mut t = Tape::new();
    let logits = t.constant(vec![10.0, -10.0], vec![1, 2]).unwrap();
    let loss = ce_loss(&mut t, &logits, &[0]).unwrap();
    let expected = (1.0 + (-20.0f64).exp()).ln();
    assert!((loss.scalar().unwrap() - expected).abs() < 1e-15);
    assert!(loss.scalar().unwrap() < 1e-8);
}

#[test]
fn ce_matches_per_row_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let rows = rand_rows(&mut rng, 4, 3);
    let labels = [0usize, 2, 1, 1];
    let mut t = Tape::new();
    let logits = tensor_from(&mut t, &rows, false);
    let loss = ce_loss(&mut t, &logits, &labels).unwrap().scalar().unwrap();
    let mut oracle = 0.0;
    for (row, &y) in rows.iter().zip(&labels) {
        let p = softmax_host(row);
        oracle += -p[y].ln();
    }
    oracle /= rows.len() as f64;
    assert!((loss - oracle).abs() <= 1e-12, "{loss} vs {oracle}");
}

#[test]
fn ce_rejects_out_of_range_label() {
    let mut t = Tape::new();
    let logits = t.constant(vec![0.0; 3], vec![1, 3]).unwrap();
    assert!(matches!(
        ce_loss(&mut t, &logits, &[3]),
        Err(Error::Validation(_))
    ));
}

// ---------------------------------------------------------------------
// SCL
// ---------------------------------------------------------------------

#[test]
fn scl_of_three_identical_same_class_vectors_is_3_ln_2() {
    let rows = vec![vec![0.2, -0.4, 0.9]; 3];
    let mut t = Tape::new();
    let reps = tensor_from(&mut t, &rows, false);
    let out = scl_loss(&mut t, &reps, &[1, 1, 1], 0.5).unwrap();
    let expected = 3.0 * 2.0f64.ln();
    assert!((out.loss.scalar().unwrap() - expected).abs() < 1e-12);
    assert_eq!(out.n_valid_anchors, 3);
}

#[test]
fn scl_with_only_singleton_classes_is_zero_with_flag() {
    let rows = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
    let mut t = Tape::new();
    let reps = tensor_from(&mut t, &rows, false);
    let out = scl_loss(&mut t, &reps, &[0, 1], 0.5).unwrap();
    assert_eq!(out.loss.scalar().unwrap(), 0.0);
    assert!(out.degenerate);
    assert_eq!(out.n_valid_anchors, 0);
}

#[test]
fn scl_rejects_fewer_than_two_samples() {
    let mut t = Tape::new();
    let reps = t.constant(vec![1.0, 0.0], vec![1, 2]).unwrap();
    assert!(scl_loss(&mut t, &reps, &[0], 0.5).is_err());
}

#[test]
fn scl_matches_nested_loop_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let rows = rand_rows(&mut rng, 6, 4);
    let labels: Vec<usize> = (0..6).map(|_| rng.gen_range(0..2)).collect();
    let mut t = Tape::new();
    let reps = tensor_from(&mut t, &rows, false);
    let got = scl_loss(&mut t, &reps, &labels, 0.5)
        .unwrap()
        .loss
        .scalar()
        .unwrap();
    let want = scl_oracle(&rows, &labels, &vec![true; 6], 0.5, false);
    assert!((got - want).abs() <= 1e-12, "{got} vs {want}");
}

// ---------------------------------------------------------------------
// ACL-Embed
// ---------------------------------------------------------------------

#[test]
fn acl_embed_with_labels_only_and_distinct_classes_is_zero() {
    let mut t = Tape::new();
    let samples = t.constant(vec![], vec![0, 2]).unwrap();
    let embeds = t
        .constant(vec![1.0, 0.0, 0.0, 1.0], vec![2, 2])
        .unwrap();
    let out = acl_embed_loss(&mut t, &samples, &[], &embeds, &[0, 1], 0.5).unwrap();
    assert_eq!(out.loss.scalar().unwrap(), 0.0);
    assert!(out.degenerate);
}

#[test]
fn acl_embed_two_samples_plus_own_label_embedding_matches_oracle() {
    let rows = vec![vec![0.3, 0.8, -0.1], vec![0.2, 0.7, 0.05]];
    let embed = vec![vec![0.25, 0.75, 0.0]];
    let mut t = Tape::new();
    let samples = tensor_from(&mut t, &rows, false);
    let embeds = tensor_from(&mut t, &embed, false);
    let out = acl_embed_loss(&mut t, &samples, &[0, 0], &embeds, &[0], 0.5).unwrap();
    let mut aug = rows.clone();
    aug.extend(embed);
    let want = scl_oracle(&aug, &[0, 0, 0], &[true; 3], 0.5, false);
    assert!((out.loss.scalar().unwrap() - want).abs() <= 1e-12);
    assert_eq!(out.n_valid_anchors, 3);
}

#[test]
fn acl_embed_equals_scl_on_hand_concatenated_batch() {
    let mut rng = ChaCha8Rng::seed_from_u64(43);
    let rows = rand_rows(&mut rng, 6, 5);
    let embeds = rand_rows(&mut rng, 2, 5);
    let labels: Vec<usize> = (0..6).map(|_| rng.gen_range(0..2)).collect();

    let mut t1 = Tape::new();
    let s = tensor_from(&mut t1, &rows, false);
    let e = tensor_from(&mut t1, &embeds, false);
    let got = acl_embed_loss(&mut t1, &s, &labels, &e, &[0, 1], 0.5)
        .unwrap()
        .loss
        .scalar()
        .unwrap();

    let mut aug = rows.clone();
    aug.extend(embeds.clone());
    let mut aug_labels = labels.clone();
    aug_labels.extend_from_slice(&[0, 1]);
    let mut t2 = Tape::new();
    let all = tensor_from(&mut t2, &aug, false);
    let want = scl_loss(&mut t2, &all, &aug_labels, 0.5)
        .unwrap()
        .loss
        .scalar()
        .unwrap();
    assert!((got - want).abs() <= 1e-12);
}

#[test]
fn acl_embed_rejects_duplicate_embed_labels() {
    let mut t = Tape::new();
    let samples = t.constant(vec![1.0, 0.0], vec![1, 2]).unwrap();
    let embeds = t
        .constant(vec![1.0, 0.0, 0.0, 1.0], vec![2, 2])
        .unwrap();
    assert!(matches!(
        acl_embed_loss(&mut t, &samples, &[0], &embeds, &[1, 1], 0.5),
        Err(Error::Validation(_))
    ));
}

// ---------------------------------------------------------------------
// ACL-CL
// ---------------------------------------------------------------------

#[test]
fn acl_cl_matches_oracle_on_minimal_batch() {
    let mut rng = ChaCha8Rng::seed_from_u64(44);
    let student = rand_rows(&mut rng, 1, 3);
    let s_embeds = rand_rows(&mut rng, 2, 3);
    let teacher = rand_rows(&mut rng, 1, 3);
    let t_embeds = rand_rows(&mut rng, 2, 3);
    let labels = [1usize];

    let mut t = Tape::new();
    let s = tensor_from(&mut t, &student, false);
    let se = tensor_from(&mut t, &s_embeds, false);
    let tr = tensor_from(&mut t, &teacher, false);
    let te = tensor_from(&mut t, &t_embeds, false);
    let got = acl_cl_loss(&mut t, &s, &labels, &se, &tr, &te, 2, 0.5)
        .unwrap()
        .loss
        .scalar()
        .unwrap();

    let mut all = student.clone();
    all.extend(s_embeds);
    all.extend(teacher);
    all.extend(t_embeds);
    let all_labels = [1usize, 0, 1, 1, 0, 1];
    let want = scl_oracle(&all, &all_labels, &[true; 6], 0.5, false);
    assert!((got - want).abs() <= 1e-12, "{got} vs {want}");
}

#[test]
fn acl_cl_gradients_flow_only_into_student_entries() {
    let mut rng = ChaCha8Rng::seed_from_u64(45);
    let student = rand_rows(&mut rng, 3, 4);
    let s_embeds = rand_rows(&mut rng, 2, 4);
    let teacher = rand_rows(&mut rng, 3, 4);
    let t_embeds = rand_rows(&mut rng, 2, 4);
    let labels = [0usize, 1, 0];

    let run = |teacher_rows: &[Vec<f64>]| {
        let mut t = Tape::new();
        let s = tensor_from(&mut t, &student, true);
        let se = tensor_from(&mut t, &s_embeds, true);
        let tr = tensor_from(&mut t, teacher_rows, false);
        let te = tensor_from(&mut t, &t_embeds, false);
        let out = acl_cl_loss(&mut t, &s, &labels, &se, &tr, &te, 2, 0.5).unwrap();
        t.backward(&out.loss).unwrap();
        let val = out.loss.scalar().unwrap();
        let gs = t.grad(&s).unwrap().to_vec();
        let gtr = t.grad(&tr).map(<[f64]>::to_vec);
        (val, gs, gtr)
    };
    let (v1, g1, gt1) = run(&teacher);
    assert!(gt1.is_none(), "teacher must not receive gradient");
    let mut bumped = teacher.clone();
    bumped[0][0] += 0.2;
    let (v2, g2, _) = run(&bumped);
    assert!((v1 - v2).abs() > 1e-9, "teacher rows must shape the value");
    assert_ne!(g1, g2, "teacher rows shape the student gradient");
}

#[test]
fn acl_cl_rejects_trainable_teacher() {
    let mut rng = ChaCha8Rng::seed_from_u64(46);
    let rows = rand_rows(&mut rng, 2, 3);
    let embeds = rand_rows(&mut rng, 2, 3);
    let mut t = Tape::new();
    let s = tensor_from(&mut t, &rows, true);
    let se = tensor_from(&mut t, &embeds, true);
    let tr = tensor_from(&mut t, &rows, true); // wrongly trainable
    let te = tensor_from(&mut t, &embeds, false);
    assert!(acl_cl_loss(&mut t, &s, &[0, 1], &se, &tr, &te, 2, 0.5).is_err());
}

#[test]
fn acl_cl_gradient_matches_finite_differences_with_duplicated_teacher() {
    // student == teacher at the evaluation point; differentiate w.r.t. the
    // student rows only.
    let mut rng = ChaCha8Rng::seed_from_u64(47);
    let student = rand_rows(&mut rng, 2, 3);
    let s_embeds = rand_rows(&mut rng, 2, 3);
    let labels = [0usize, 1];
    let teacher_flat = flat(&student);
    let t_embeds_flat = flat(&s_embeds);

    let f = |t: &mut Tape, x: &Tensor| {
        let s = t.slice(x, 0, 0, 6)?;
        let s = t.reshape(&s, &[2, 3])?;
        let se = t.slice(x, 0, 6, 6)?;
        let se = t.reshape(&se, &[2, 3])?;
        let tr = t.constant(teacher_flat.clone(), vec![2, 3])?;
        let te = t.constant(t_embeds_flat.clone(), vec![2, 3])?;
        Ok(acl_cl_loss(t, &s, &labels, &se, &tr, &te, 2, 0.5)?.loss)
    };
    let mut point = flat(&student);
    point.extend(flat(&s_embeds));
    let rep = grad_check(f, &point, 1e-5, 1e-6).unwrap();
    assert!(rep.pass, "max rel err {}", rep.max_rel_err);
}

// ---------------------------------------------------------------------
// InfoNCE
// ---------------------------------------------------------------------

#[test]
fn info_nce_with_four_identical_vectors_is_ln_3() {
    // 2 anchors + 2 positives, all identical: numerator exp(1/tau), each
    // denominator sums the 3 other identical entries, so every term is
    // log 3. Enumerated by hand and cross-checked with the oracle.
    let rows = vec![vec![0.4, -0.3]; 2];
    let mut t = Tape::new();
    let a = tensor_from(&mut t, &rows, false);
    let p = tensor_from(&mut t, &rows, false);
    let got = info_nce_loss(&mut t, &a, &p, 0.5).unwrap().scalar().unwrap();
    let want = 3.0f64.ln();
    assert!((got - want).abs() < 1e-12, "{got} vs {want}");
    assert!((info_nce_oracle(&rows, &rows, 0.5) - want).abs() < 1e-12);
}

#[test]
fn info_nce_grows_as_temperature_shrinks_on_orthogonal_pairs() {
    let anchors = vec![vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0]];
    let positives = vec![vec![0.0, 0.0, 1.0], vec![0.0, 0.0, -1.0]];
    let mut last = f64::NEG_INFINITY;
    for tau in [2.0, 1.0, 0.5, 0.25] {
        let mut t = Tape::new();
        let a = tensor_from(&mut t, &anchors, false);
        let p = tensor_from(&mut t, &positives, false);
        let v = info_nce_loss(&mut t, &a, &p, tau).unwrap().scalar().unwrap();
        assert!(v >= last, "loss must grow as tau shrinks: {v} < {last}");
        last = v;
    }
}

#[test]
fn info_nce_matches_nested_loop_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(48);
    let anchors = rand_rows(&mut rng, 5, 3);
    let positives = rand_rows(&mut rng, 5, 3);
    let mut t = Tape::new();
    let a = tensor_from(&mut t, &anchors, false);
    let p = tensor_from(&mut t, &positives, false);
    let got = info_nce_loss(&mut t, &a, &p, 0.5).unwrap().scalar().unwrap();
    let want = info_nce_oracle(&anchors, &positives, 0.5);
    assert!((got - want).abs() <= 1e-12, "{got} vs {want}");
}

// ---------------------------------------------------------------------
// combine
// ---------------------------------------------------------------------

#[test]
fn combine_endpoints_are_exact() {
    let b = combine(1.2345, 9.8765, 0.0).unwrap();
    assert_eq!(b.combined.to_bits(), 1.2345f64.to_bits());
    let b = combine(1.2345, 9.8765, 1.0).unwrap();
    assert_eq!(b.combined.to_bits(), 9.8765f64.to_bits());
}

#[test]
fn combine_small_lambda_example() {
    let b = combine(1.0, 2.0, 0.02).unwrap();
    assert!((b.combined - 1.02).abs() < 1e-15);
    assert_eq!(b.combined, (1.0 - 0.02) * 1.0 + 0.02 * 2.0);
}

#[test]
fn combine_rejects_out_of_range_lambda() {
    assert!(combine(1.0, 1.0, -0.1).is_err());
    assert!(combine(1.0, 1.0, 1.1).is_err());
}

// ---------------------------------------------------------------------
// Shared invariants
// ---------------------------------------------------------------------

/// 100 random instances per loss against the oracles, to 1e-12.
#[test]
fn oracle_equivalence_on_100_random_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(50);
    for trial in 0..100 {
        let n = rng.gen_range(2..=8);
        let k = rng.gen_range(2..=4);
        let d = rng.gen_range(2..=6);
        let rows = rand_rows(&mut rng, n, d);
        let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..k)).collect();
        let tau = [0.1, 0.5, 1.0, 2.0][rng.gen_range(0..4)];

        // scl
        let mut t = Tape::new();
        let reps = tensor_from(&mut t, &rows, false);
        let got = scl_loss(&mut t, &reps, &labels, tau)
            .unwrap()
            .loss
            .scalar()
            .unwrap();
        let want = scl_oracle(&rows, &labels, &vec![true; n], tau, false);
        assert!((got - want).abs() <= 1e-12, "scl trial {trial}: {got} vs {want}");

        // acl_embed
        let embeds = rand_rows(&mut rng, k, d);
        let embed_labels: Vec<usize> = (0..k).collect();
        let mut t = Tape::new();
        let s = tensor_from(&mut t, &rows, false);
        let e = tensor_from(&mut t, &embeds, false);
        let got = acl_embed_loss(&mut t, &s, &labels, &e, &embed_labels, tau)
            .unwrap()
            .loss
            .scalar()
            .unwrap();
        let mut aug = rows.clone();
        aug.extend(embeds.clone());
        let mut aug_labels = labels.clone();
        aug_labels.extend_from_slice(&embed_labels);
        let want = scl_oracle(&aug, &aug_labels, &vec![true; n + k], tau, false);
        assert!(
            (got - want).abs() <= 1e-12,
            "acl_embed trial {trial}: {got} vs {want}"
        );

        // acl_cl
        let teacher = rand_rows(&mut rng, n, d);
        let t_embeds = rand_rows(&mut rng, k, d);
        let mut t = Tape::new();
        let s = tensor_from(&mut t, &rows, false);
        let se = tensor_from(&mut t, &embeds, false);
        let tr = tensor_from(&mut t, &teacher, false);
        let te = tensor_from(&mut t, &t_embeds, false);
        let got = acl_cl_loss(&mut t, &s, &labels, &se, &tr, &te, k, tau)
            .unwrap()
            .loss
            .scalar()
            .unwrap();
        let mut all = rows.clone();
        all.extend(embeds.clone());
        all.extend(teacher.clone());
        all.extend(t_embeds.clone());
        let mut all_labels = labels.clone();
        all_labels.extend_from_slice(&embed_labels);
        all_labels.extend_from_slice(&labels);
        all_labels.extend_from_slice(&embed_labels);
        let want = scl_oracle(&all, &all_labels, &vec![true; 2 * (n + k)], tau, false);
        assert!(
            (got - want).abs() <= 1e-12,
            "acl_cl trial {trial}: {got} vs {want}"
        );

        // info_nce
        let positives = rand_rows(&mut rng, n, d);
        let mut t = Tape::new();
        let a = tensor_from(&mut t, &rows, false);
        let p = tensor_from(&mut t, &positives, false);
        let got = info_nce_loss(&mut t, &a, &p, tau).unwrap().scalar().unwrap();
        let want = info_nce_oracle(&rows, &positives, tau);
        assert!(
            (got - want).abs() <= 1e-12,
            "info_nce trial {trial}: {got} vs {want}"
        );
    }
}

#[test]
fn contrastive_losses_are_scale_invariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(51);
    let rows = rand_rows(&mut rng, 5, 4);
    let labels = [0usize, 1, 0, 1, 0];
    let embeds = rand_rows(&mut rng, 2, 4);
    let base = {
        let mut t = Tape::new();
        let s = tensor_from(&mut t, &rows, false);
        let e = tensor_from(&mut t, &embeds, false);
        acl_embed_loss(&mut t, &s, &labels, &e, &[0, 1], 0.5)
            .unwrap()
            .loss
            .scalar()
            .unwrap()
    };
    for c in [1e-3, 7.0, 1e3] {
        let scaled_rows: Vec<Vec<f64>> = rows
            .iter()
            .map(|r| r.iter().map(|v| v * c).collect())
            .collect();
        let scaled_embeds: Vec<Vec<f64>> = embeds
            .iter()
            .map(|r| r.iter().map(|v| v * c).collect())
            .collect();
        let mut t = Tape::new();
        let s = tensor_from(&mut t, &scaled_rows, false);
        let e = tensor_from(&mut t, &scaled_embeds, false);
        let v = acl_embed_loss(&mut t, &s, &labels, &e, &[0, 1], 0.5)
            .unwrap()
            .loss
            .scalar()
            .unwrap();
        assert!((v - base).abs() <= 1e-10, "scale {c}: {v} vs {base}");
    }
}

#[test]
fn contrastive_losses_are_permutation_invariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(52);
    let rows = rand_rows(&mut rng, 6, 4);
    let labels = [0usize, 1, 2, 0, 1, 2];
    let base = {
        let mut t = Tape::new();
        let reps = tensor_from(&mut t, &rows, false);
        scl_loss(&mut t, &reps, &labels, 0.5)
            .unwrap()
            .loss
            .scalar()
            .unwrap()
    };
    let perm = [3usize, 0, 5, 2, 4, 1];
    let shuffled: Vec<Vec<f64>> = perm.iter().map(|&i| rows[i].clone()).collect();
    let shuffled_labels: Vec<usize> = perm.iter().map(|&i| labels[i]).collect();
    let mut t = Tape::new();
    let reps = tensor_from(&mut t, &shuffled, false);
    let v = scl_loss(&mut t, &reps, &shuffled_labels, 0.5)
        .unwrap()
        .loss
        .scalar()
        .unwrap();
    assert!((v - base).abs() <= 1e-12);
}

#[test]
fn loss_is_nonincreasing_as_temperature_decreases_on_separable_batch() {
    // Same-class vectors identical, cross-class orthogonal.
    let rows = vec![
        vec![1.0, 0.0],
        vec![1.0, 0.0],
        vec![1.0, 0.0],
        vec![0.0, 1.0],
        vec![0.0, 1.0],
        vec![0.0, 1.0],
    ];
    let labels = [0usize, 0, 0, 1, 1, 1];
    let mut last = f64::INFINITY;
    for tau in [2.0, 1.0, 0.5, 0.1] {
        let mut t = Tape::new();
        let reps = tensor_from(&mut t, &rows, false);
        let v = scl_loss(&mut t, &reps, &labels, tau)
            .unwrap()
            .loss
            .scalar()
            .unwrap();
        assert!(v <= last + 1e-12, "tau {tau}: {v} > {last}");
        last = v;
    }
}

#[test]
fn every_loss_gradient_passes_finite_difference_check() {
    let mut rng = ChaCha8Rng::seed_from_u64(53);
    let labels = [0usize, 1, 0, 1];

    // ce
    let rep = grad_check(
        |t, x| {
            let logits = t.reshape(x, &[4, 3])?;
            ce_loss(t, &logits, &[0, 2, 1, 1])
        },
        &flat(&rand_rows(&mut rng, 4, 3)),
        1e-5,
        1e-4,
    )
    .unwrap();
    assert!(rep.pass, "ce: {}", rep.max_rel_err);

    // scl w.r.t. representations
    let rep = grad_check(
        |t, x| {
            let reps = t.reshape(x, &[4, 3])?;
            Ok(scl_loss(t, &reps, &labels, 0.5)?.loss)
        },
        &flat(&rand_rows(&mut rng, 4, 3)),
        1e-5,
        1e-4,
    )
    .unwrap();
    assert!(rep.pass, "scl: {}", rep.max_rel_err);

    // acl_embed w.r.t. samples and label embeddings jointly
    let rep = grad_check(
        |t, x| {
            let s = t.slice(x, 0, 0, 12)?;
            let s = t.reshape(&s, &[4, 3])?;
            let e = t.slice(x, 0, 12, 6)?;
            let e = t.reshape(&e, &[2, 3])?;
            Ok(acl_embed_loss(t, &s, &labels, &e, &[0, 1], 0.5)?.loss)
        },
        &flat(&rand_rows(&mut rng, 6, 3)),
        1e-5,
        1e-4,
    )
    .unwrap();
    assert!(rep.pass, "acl_embed: {}", rep.max_rel_err);

    // info_nce w.r.t. anchors and positives jointly
    let rep = grad_check(
        |t, x| {
            let a = t.slice(x, 0, 0, 9)?;
            let a = t.reshape(&a, &[3, 3])?;
            let p = t.slice(x, 0, 9, 9)?;
            let p = t.reshape(&p, &[3, 3])?;
            info_nce_loss(t, &a, &p, 0.5)
        },
        &flat(&rand_rows(&mut rng, 6, 3)),
        1e-5,
        1e-4,
    )
    .unwrap();
    assert!(rep.pass, "info_nce: {}", rep.max_rel_err);

    // kd w.r.t. student logits
    let teacher_rows = rand_rows(&mut rng, 4, 3);
    let teacher_probs: Vec<f64> = teacher_rows
        .iter()
        .flat_map(|r| softmax_host(&r.iter().map(|v| v / 2.0).collect::<Vec<_>>()))
        .collect();
    let rep = grad_check(
        |t, x| {
            let s = t.reshape(x, &[4, 3])?;
            let tp = t.constant(teacher_probs.clone(), vec![4, 3])?;
            kd_loss(t, &s, &tp, 2.0)
        },
        &flat(&rand_rows(&mut rng, 4, 3)),
        1e-5,
        1e-4,
    )
    .unwrap();
    assert!(rep.pass, "kd: {}", rep.max_rel_err);
}

#[test]
fn self_inclusion_variant_is_co_monotone_with_exclusion() {
    // Two clusters whose separation varies; both denominator conventions
    // must rank the fixtures identically.
    let fixture = |sep: f64| -> Vec<Vec<f64>> {
        vec![
            vec![1.0, 0.0],
            vec![1.0, 0.1],
            vec![sep.cos(), sep.sin()],
            vec![sep.cos(), sep.sin() + 0.1],
        ]
    };
    let labels = [0usize, 0, 1, 1];
    let seps = [0.3, 0.8, 1.3, std::f64::consts::FRAC_PI_2];
    let excl: Vec<f64> = seps
        .iter()
        .map(|&s| scl_oracle(&fixture(s), &labels, &[true; 4], 0.5, false))
        .collect();
    let incl: Vec<f64> = seps
        .iter()
        .map(|&s| scl_oracle(&fixture(s), &labels, &[true; 4], 0.5, true))
        .collect();
    for w in excl.windows(2) {
        assert!(w[1] < w[0], "exclusion variant must fall with separation");
    }
    for w in incl.windows(2) {
        assert!(w[1] < w[0], "inclusion variant must fall with separation");
    }
}

#[test]
fn non_anchor_entries_contribute_to_denominators_only() {
    let mut rng = ChaCha8Rng::seed_from_u64(54);
    let rows = rand_rows(&mut rng, 4, 3);
    let labels = vec![0usize, 0, 1, 1];
    let mut t = Tape::new();
    let reps = tensor_from(&mut t, &rows, false);
    let batch = ContrastiveBatch::new(
        reps,
        labels.clone(),
        vec![true, true, false, false],
        vec![false; 4],
        0.5,
    )
    .unwrap();
    let got = contrastive_loss(&mut t, &batch)
        .unwrap()
        .loss
        .scalar()
        .unwrap();
    let want = scl_oracle(&rows, &labels, &[true, true, false, false], 0.5, false);
    assert!((got - want).abs() <= 1e-12);
}

#[test]
fn kd_at_matching_logits_has_entropy_value_and_zero_gradient() {
    let logits_rows = vec![vec![0.7, -0.2, 0.1], vec![1.4, 0.3, -0.9]];
    let temp = 2.0;
    let teacher_probs: Vec<f64> = logits_rows
        .iter()
        .flat_map(|r| softmax_host(&r.iter().map(|v| v / temp).collect::<Vec<_>>()))
        .collect();
    let mut t = Tape::new();
    let student = tensor_from(&mut t, &logits_rows, true);
    let tp = t.constant(teacher_probs.clone(), vec![2, 3]).unwrap();
    let loss = kd_loss(&mut t, &student, &tp, temp).unwrap();
    let expected: f64 = teacher_probs
        .chunks(3)
        .map(|q| entropy_host(q))
        .sum::<f64>()
        / 2.0;
    assert!((loss.scalar().unwrap() - expected).abs() < 1e-12);
    t.backward(&loss).unwrap();
    for &g in t.grad(&student).unwrap() {
        assert!(g.abs() <= 1e-14, "kd gradient at fixed point: {g}");
    }
}
