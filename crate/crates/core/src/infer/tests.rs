use super::*;
use crate::data::{generate_synthetic, Difficulty, SynthSpec};
use crate::model::{ModelConfig, MultiExitModel};

fn fixture() -> (crate::data::SynthData, Vocab, MultiExitModel) {
    let spec = SynthSpec {
        k: 3,
        n_train: 30,
        n_eval: 30,
        vocab_size: 40,
        signal_tokens_per_class: 3,
        seq_len: 6,
        noise_rate: 0.2,
        difficulty: Difficulty::Separable,
        overlap_rate: 0.3,
        seed: 17,
    };
    let data = generate_synthetic(&spec).unwrap();
    let vocab = Vocab::build(&data.train);
    let cfg = ModelConfig {
        vocab_size: vocab.len(),
        d_model: 16,
        n_layers: 4,
        n_heads: 2,
        d_ff: 32,
        d_e: 8,
        exit_heads: 2,
        n_classes: 3,
        max_seq_len: 12,
        dropout_rate: 0.1,
        exit_kind: crate::model::ExitKind::Mha,
    };
    let model = MultiExitModel::new(cfg, 23).unwrap();
    (data, vocab, model)
}

#[test]
fn fixed_exit_at_full_depth_equals_full_forward() {
    use crate::model::Scope;
    use crate::tensor::Tape;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    let (data, vocab, model) = fixture();
    let batches = make_batches(&data.eval, &vocab, 8, model.cfg.max_seq_len, 0, false).unwrap();
    let m = model.cfg.n_layers;
    for batch in &batches {
        let preds = predict_fixed(&model, batch, m).unwrap();
        // independent full pass
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape, Scope::All, None).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let states = model.encode(&mut tape, &bound, batch, false, &mut rng).unwrap();
        let (_, logits) = model
            .exit_forward(&mut tape, &bound, m, &states[m - 1], batch)
            .unwrap();
        let k = model.cfg.n_classes;
        for (i, p) in preds.iter().enumerate() {
            for (a, b) in p.logits.iter().zip(&logits.data()[i * k..(i + 1) * k]) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }
}

#[test]
fn prediction_probabilities_lie_on_the_simplex() {
    let (data, vocab, model) = fixture();
    let batches = make_batches(&data.eval, &vocab, 8, model.cfg.max_seq_len, 0, false).unwrap();
    for m in 1..=model.cfg.n_layers {
        for p in predict_fixed(&model, &batches[0], m).unwrap() {
            assert!(p.probs.iter().all(|&v| v >= 0.0));
            assert!((p.probs.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
        }
    }
}

#[test]
fn huge_entropy_threshold_exits_everything_at_layer_one() {
    let (data, vocab, model) = fixture();
    let trace =
        predict_adaptive(&model, &data.eval, &vocab, ExitPolicy::Entropy(1e9), 8).unwrap();
    assert!(trace.samples.iter().all(|s| s.exit_layer == 1));
    assert_eq!(trace.avg_exit_layer, 1.0);
}

#[test]
fn vanishing_entropy_threshold_exits_everything_at_full_depth() {
    let (data, vocab, model) = fixture();
    let trace =
        predict_adaptive(&model, &data.eval, &vocab, ExitPolicy::Entropy(1e-300), 8).unwrap();
    assert!(trace
        .samples
        .iter()
        .all(|s| s.exit_layer == model.cfg.n_layers));
}

#[test]
fn patience_one_exits_at_layer_one() {
    let (data, vocab, model) = fixture();
    let trace = predict_adaptive(&model, &data.eval, &vocab, ExitPolicy::Patience(1), 8).unwrap();
    assert!(trace.samples.iter().all(|s| s.exit_layer == 1));
}

#[test]
fn patience_exit_layer_is_at_least_the_patience_unless_forced() {
    let (data, vocab, model) = fixture();
    let m_last = model.cfg.n_layers;
    for t in 1..=m_last {
        let trace =
            predict_adaptive(&model, &data.eval, &vocab, ExitPolicy::Patience(t), 8).unwrap();
        for s in &trace.samples {
            assert!(
                s.exit_layer >= t || s.exit_layer == m_last,
                "patience {t}: sample exited at {}",
                s.exit_layer
            );
        }
    }
}

#[test]
fn average_exit_layer_is_monotone_in_patience_and_entropy_threshold() {
    let (data, vocab, model) = fixture();
    let mut last = 0.0;
    for t in 1..=model.cfg.n_layers {
        let trace =
            predict_adaptive(&model, &data.eval, &vocab, ExitPolicy::Patience(t), 8).unwrap();
        assert!(
            trace.avg_exit_layer >= last - 1e-12,
            "patience {t}: {} < {last}",
            trace.avg_exit_layer
        );
        last = trace.avg_exit_layer;
    }
    let mut last = f64::INFINITY;
    for thr in [1e-6, 0.05, 0.3, 0.8, 1.0986, 10.0] {
        let trace =
            predict_adaptive(&model, &data.eval, &vocab, ExitPolicy::Entropy(thr), 8).unwrap();
        assert!(
            trace.avg_exit_layer <= last + 1e-12,
            "threshold {thr}: {} > {last}",
            trace.avg_exit_layer
        );
        last = trace.avg_exit_layer;
    }
}

#[test]
fn flops_ratio_is_recomputable_from_the_trace() {
    let (data, vocab, model) = fixture();
    let trace = predict_adaptive(&model, &data.eval, &vocab, ExitPolicy::Entropy(1.05), 8).unwrap();
    let full = count_flops(&model.cfg, model.cfg.n_layers).unwrap().total() as f64;
    let recomputed = trace
        .samples
        .iter()
        .map(|s| count_flops(&model.cfg, s.exit_layer).unwrap().total() as f64)
        .sum::<f64>()
        / trace.samples.len() as f64
        / full;
    assert!((trace.flops_ratio - recomputed).abs() <= 1e-12);
    assert!(trace.flops_ratio > 0.0 && trace.flops_ratio <= 1.0);
}

#[test]
fn layer_score_curve_has_one_row_per_exit() {
    let (data, vocab, model) = fixture();
    let curve = layer_score_curve(&model, &data.eval, &vocab, 8).unwrap();
    assert_eq!(curve.len(), 4);
    for (i, row) in curve.iter().enumerate() {
        assert_eq!(row.exit_layer, i + 1);
        assert_eq!(row.n_samples, data.eval.len());
    }
    // Untrained model: scores hover around chance (reported, not asserted).
    println!(
        "untrained layer scores (chance = {:.3}): {:?}",
        1.0 / model.cfg.n_classes as f64,
        curve.iter().map(|r| r.score).collect::<Vec<_>>()
    );
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("curve.csv");
    write_curve_csv(&curve, &path).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert_eq!(text.lines().count(), 5);
    assert!(text.starts_with("exit_layer,score,n_samples"));
}

#[test]
fn adaptive_trace_covers_every_sample_once() {
    let (data, vocab, model) = fixture();
    let trace = predict_adaptive(&model, &data.eval, &vocab, ExitPolicy::Entropy(1.0), 7).unwrap();
    let ids: Vec<usize> = trace.samples.iter().map(|s| s.sample_id).collect();
    assert_eq!(ids, (0..data.eval.len()).collect::<Vec<_>>());
}

#[test]
fn policies_validate_their_parameters() {
    let (_, _, model) = fixture();
    assert!(ExitPolicy::Fixed(0).validate(model.cfg.n_layers).is_err());
    assert!(ExitPolicy::Fixed(5).validate(model.cfg.n_layers).is_err());
    assert!(ExitPolicy::Entropy(0.0).validate(model.cfg.n_layers).is_err());
    assert!(ExitPolicy::Patience(0).validate(model.cfg.n_layers).is_err());
    assert!(ExitPolicy::Patience(5).validate(model.cfg.n_layers).is_err());
}
