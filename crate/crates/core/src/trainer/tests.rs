use super::*;
use crate::synth::{build_splits, generate_dataset, SynthConfig};

fn small_split(seed: u64) -> DatasetSplit {
    let universe = generate_dataset(SynthConfig {
        train_identities: 12,
        test_identities: 4,
        samples_per_identity: 16,
        seed,
        ..SynthConfig::default()
    })
    .unwrap();
    build_splits(&universe, 0.001).unwrap()
}

fn quick(loss: LossKind) -> TrainConfig {
    TrainConfig {
        batch_size: 16,
        epochs: 4,
        warmup_epochs: 1,
        seed: 5,
        ..TrainConfig::desk().with_loss(loss)
    }
}

#[test]
fn schedule_landmarks() {
    let cfg = TrainConfig::default();
    let w = 3.0 / 20.0;
    assert_eq!(lr_schedule(w, &cfg), cfg.lr0);
    assert!(lr_schedule(1.0, &cfg).abs() < 1e-12);
    assert!((lr_schedule(w + (1.0 - w) / 2.0, &cfg) - cfg.lr0 / 2.0).abs() < 1e-12);
    assert_eq!(lr_schedule(0.0, &cfg), 0.0);
    let below = lr_schedule(w - 1e-12, &cfg);
    let above = lr_schedule(w + 1e-12, &cfg);
    assert!((below - cfg.lr0).abs() < 1e-9 && (above - cfg.lr0).abs() < 1e-9);
}

#[test]
fn config_validation() {
    let ok = TrainConfig::default();
    assert!(ok.validate().is_ok());
    let bad = [
        TrainConfig {
            warmup_epochs: 20,
            ..ok.clone()
        },
        TrainConfig {
            batch_size: 1,
            ..ok.clone()
        },
        TrainConfig {
            momentum: 1.0,
            ..ok.clone()
        },
        TrainConfig {
            lr0: 0.0,
            ..ok.clone()
        },
        TrainConfig {
            weight_decay: -1.0,
            ..ok.clone()
        },
        TrainConfig {
            scale: ScaleSpec::Unified {
                epsilon: 0.0,
                m: 0.25,
            },
            ..ok.clone()
        },
    ];
    for cfg in bad {
        assert!(cfg.validate().is_err(), "{cfg:?}");
    }
}

#[test]
fn sampler_defaults_follow_loss() {
    assert_eq!(TrainConfig::default().sampler_kind(), SamplerKind::Uniform);
    assert_eq!(
        TrainConfig::default().with_loss(LossKind::SnPair).sampler_kind(),
        SamplerKind::PositivePair
    );
    assert_eq!(
        TrainConfig::default().with_loss(LossKind::MixFace).sampler_kind(),
        SamplerKind::PositivePair
    );
    assert_eq!(
        "positive-pair".parse::<SamplerKind>().unwrap(),
        SamplerKind::PositivePair
    );
}

#[test]
fn expected_negative_counts() {
    assert_eq!(expected_negatives(SamplerKind::PositivePair, 8, 10), 28.0 - 4.0);
    assert!((expected_negatives(SamplerKind::Uniform, 8, 4) - 28.0 * 0.75).abs() < 1e-12);
    assert_eq!(
        expected_negatives(SamplerKind::PositivePair, 512, 370),
        130816.0 - 256.0
    );
}

#[test]
fn positive_pair_composition() {
    let split = small_split(1);
    let set = train_set(&split, TrainId::T2).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let idx = sample_batch(&set, SamplerKind::PositivePair, 8, &mut rng).unwrap();
    assert_eq!(idx.len(), 8);
    let labels: Vec<usize> = idx.iter().map(|&i| set.labels[i]).collect();
    let mut distinct = labels.clone();
    distinct.sort_unstable();
    distinct.dedup();
    assert_eq!(distinct.len(), 4);
    for pair in labels.chunks(2) {
        assert_eq!(pair[0], pair[1]);
    }
    assert_ne!(idx[0], idx[1]);
}

#[test]
fn positive_pair_needs_two_per_identity() {
    let set = LabeledSet::new(Array2::zeros((3, 2)), vec![0, 0, 1], 2).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert!(matches!(
        sample_batch(&set, SamplerKind::PositivePair, 2, &mut rng),
        Err(Error::InsufficientSamples(_))
    ));
    let set = LabeledSet::new(Array2::zeros((4, 2)), vec![0, 0, 1, 1], 2).unwrap();
    assert!(matches!(
        sample_batch(&set, SamplerKind::PositivePair, 6, &mut rng),
        Err(Error::InsufficientSamples(_))
    ));
}

#[test]
fn batches_repeat_under_a_seed() {
    let split = small_split(2);
    let set = train_set(&split, TrainId::T3).unwrap();
    let draw = || {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        (0..5)
            .map(|_| sample_batch(&set, SamplerKind::Uniform, 16, &mut rng).unwrap())
            .collect::<Vec<_>>()
    };
    assert_eq!(draw(), draw());
}

#[test]
fn one_identity_uniform_batch_has_no_negatives() {
    let x = Array2::from_shape_fn((6, 4), |(i, j)| ((i * 4 + j) as f64).sin());
    let set = LabeledSet::new(x, vec![0; 6], 1).unwrap();
    let cfg = TrainConfig {
        batch_size: 4,
        epochs: 1,
        warmup_epochs: 0,
        sampler: Some(SamplerKind::Uniform),
        ..TrainConfig::desk().with_loss(LossKind::SnPair)
    };
    assert!(matches!(fit(&set, &[], &cfg), Err(Error::NoNegatives)));
}

#[test]
fn plain_sgd_step_is_lr_times_gradient() {
    let cfg = TrainConfig {
        momentum: 0.0,
        weight_decay: 0.0,
        hidden_dim: 6,
        embedding_dim: 4,
        ..TrainConfig::desk()
    };
    let mut state = TrainState::new(5, 3, MarginConfig::default(), &cfg).unwrap();
    let x = Array2::from_shape_vec((1, 5), vec![0.3, -0.2, 0.8, 0.1, -0.5]).unwrap();
    let (_, g, gw) = state.gradients(x.view(), &[2]).unwrap();
    let before = state.clone();
    let lr = 0.05;
    state.step(x.view(), &[2], lr).unwrap();

    let mut after = state.encoder.clone();
    let mut prev = before.encoder.clone();
    for ((a, p), g) in after
        .params_mut()
        .into_iter()
        .zip(prev.params_mut())
        .zip(g.slices())
    {
        for ((a, p), g) in a.iter().zip(p.iter()).zip(g) {
            assert!((a - (p - lr * g)).abs() < 1e-15);
        }
    }
    let expected = before.weights.unwrap().weights() - &(gw.unwrap() * lr);
    let expected = normalize_rows(expected.view()).unwrap();
    let got = state.weights.unwrap();
    for (a, b) in got.weights().iter().zip(expected.iter()) {
        assert!((a - b).abs() < 1e-15);
    }
}

#[test]
fn class_weights_stay_unit_rows() {
    let split = small_split(3);
    let out = train(&split, TrainId::T2, &quick(LossKind::ArcFace)).unwrap();
    for row in out.model.weights.unwrap().weights().outer_iter() {
        assert!((row.dot(&row) - 1.0).abs() < 1e-12);
    }
}

#[test]
fn chained_gradient_matches_central_difference() {
    use crate::gradients::central_difference_error;
    let cfg = TrainConfig {
        hidden_dim: 7,
        embedding_dim: 4,
        ..TrainConfig::desk()
    };
    let x = Array2::from_shape_fn((6, 5), |(i, j)| ((3 * i + 7 * j) as f64 * 0.37).sin());
    let labels = [0, 0, 1, 1, 2, 2];
    for loss in [LossKind::ArcFace, LossKind::SnPair, LossKind::MixFace] {
        let cfg = cfg.clone().with_loss(loss);
        let margin = MarginConfig::new(4.0, 4.0, 0.25).unwrap();
        let state = TrainState::new(5, 3, margin, &cfg).unwrap();
        let (_, g, _) = state.gradients(x.view(), &labels).unwrap();
        let analytic: Vec<f64> = g.slices().concat();
        let mut enc = state.encoder.clone();
        let theta: Vec<f64> = enc.params_mut().iter().flat_map(|s| s.iter().copied()).collect();
        let f = |p: &[f64]| -> Result<f64> {
            let mut s = state.clone();
            let mut off = 0;
            for slot in s.encoder.params_mut() {
                slot.copy_from_slice(&p[off..off + slot.len()]);
                off += slot.len();
            }
            Ok(s.gradients(x.view(), &labels)?.0)
        };
        let err = central_difference_error(f, &theta, &analytic, 1e-6).unwrap();
        assert!(err < 1e-5, "{loss}: {err}");
    }
}

#[test]
fn smoke_epoch_logs_every_q_set() {
    let split = small_split(4);
    let cfg = TrainConfig {
        epochs: 1,
        warmup_epochs: 0,
        ..quick(LossKind::ArcFace)
    };
    let out = train(&split, TrainId::T1, &cfg).unwrap();
    assert_eq!(out.log.epochs.len(), 1);
    let rec = out.log.last().unwrap();
    assert_eq!(
        rec.accuracy.keys().cloned().collect::<Vec<_>>(),
        ["q1", "q2", "q3", "q4"]
    );
    assert!(rec.accuracy.values().all(|a| (0.5..=1.0).contains(a)));
    assert_eq!(out.log.header.train_id.as_deref(), Some("T1"));

    let text = out.log.to_jsonl().unwrap();
    let lines: Vec<serde_json::Value> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 2);
    assert_eq!(lines[0]["note"], PROTOCOL_NOTE);
    for key in ["epoch", "lr", "mean_loss", "q1", "q2", "q3", "q4", "wall_ms"] {
        assert!(lines[1].get(key).is_some(), "missing {key}");
    }
}

#[test]
fn same_seed_same_run() {
    let split = small_split(5);
    let cfg = quick(LossKind::MixFace);
    let a = train(&split, TrainId::T2, &cfg).unwrap();
    let b = train(&split, TrainId::T2, &cfg).unwrap();
    assert_eq!(a.model, b.model);
    assert_eq!(a.log.last().unwrap().mean_loss, b.log.last().unwrap().mean_loss);
}

#[test]
fn arcface_loss_falls_on_t1() {
    let split = small_split(6);
    let cfg = TrainConfig {
        epochs: 10,
        warmup_epochs: 1,
        ..quick(LossKind::ArcFace)
    };
    let log = train(&split, TrainId::T1, &cfg).unwrap().log;
    let first = log.epochs.first().unwrap().mean_loss;
    let last = log.last().unwrap().mean_loss;
    assert!(last < first, "{first} -> {last}");
}

#[test]
fn unified_scale_uses_train_classes_and_sampler_negatives() {
    let split = small_split(7);
    let cfg = TrainConfig {
        epochs: 1,
        warmup_epochs: 0,
        scale: ScaleSpec::Unified {
            epsilon: 1e-22,
            m: 0.25,
        },
        ..quick(LossKind::MixFace)
    };
    let out = train(&split, TrainId::T1, &cfg).unwrap();
    let h = &out.log.header;
    let negatives = 16.0 * 15.0 / 2.0 - 8.0;
    assert_eq!(h.expected_negatives, negatives);
    let direct = derive_unified_scale(1e-22, 12, negatives as usize, 0.25).unwrap();
    assert_eq!((h.s1, h.s2, h.epsilon), (direct.s1, direct.s2, Some(1e-22)));
    assert_eq!(h.classes, 12);
}

#[test]
fn runaway_learning_rate_reports_step() {
    let split = small_split(8);
    let cfg = TrainConfig {
        lr0: 1e300,
        warmup_epochs: 0,
        ..quick(LossKind::Softmax)
    };
    match train(&split, TrainId::T3, &cfg) {
        Err(Error::NonFiniteLoss { step }) => assert!(step < 100),
        other => panic!(
            "expected NonFiniteLoss, got {:?}",
            other.map(|o| o.log.epochs.len())
        ),
    }
}

#[test]
fn checkpoint_round_trip() {
    let split = small_split(9);
    let dir = tempfile::tempdir().unwrap();
    for loss in [LossKind::ArcFace, LossKind::SnPair] {
        let cfg = TrainConfig {
            epochs: 1,
            warmup_epochs: 0,
            ..quick(loss)
        };
        let model = train(&split, TrainId::T1, &cfg).unwrap().model;
        let path = dir.path().join(format!("{loss}.ckpt"));
        save_checkpoint(&path, &model).unwrap();
        assert_eq!(load_checkpoint(&path).unwrap(), model);
    }
    let bad = dir.path().join("bad.ckpt");
    std::fs::write(&bad, b"{}\n").unwrap();
    assert!(matches!(load_checkpoint(&bad), Err(Error::Format { .. })));
    assert!(matches!(
        load_checkpoint(&dir.path().join("none")),
        Err(Error::Io { .. })
    ));
}
