use super::*;
use crate::nn::testutil::{tiny_dataset, tiny_net, tiny_net_plain};
use crate::nn::Mode;
use crate::report::run_report_csv;

fn cfg(epochs: usize, lr: f64, seed: u64) -> TrainConfig {
    TrainConfig {
        base_lr: lr,
        quantizer_lr_ratio: 0.01,
        momentum: 0.9,
        weight_decay: 1e-4,
        epochs,
        lr_decay_epochs: vec![],
        lr_decay_factor: 0.1,
        batch_size: 8,
        mode: TrainMode::Joint,
        bit_schedule: vec![],
        seed,
        gamma_trainable: true,
        gamma_init: 1.0,
        distill_freeze_weights: false,
    }
}

#[test]
fn lr_schedule_counts_decay_epochs() {
    let mut c = cfg(10, 0.05, 0);
    c.lr_decay_epochs = vec![3, 7];
    assert_eq!(c.lr_at(0), 0.05);
    assert_eq!(c.lr_at(2), 0.05);
    assert!((c.lr_at(3) - 0.005).abs() < 1e-12);
    assert!((c.lr_at(6) - 0.005).abs() < 1e-12);
    assert!((c.lr_at(7) - 0.0005).abs() < 1e-12);
    assert!((c.lr_at(9) - 0.0005).abs() < 1e-12);
}

#[test]
fn schedule_must_strictly_decrease() {
    assert!(validate_schedule(&[(4, 4), (3, 3), (2, 2)]).is_ok());
    assert!(validate_schedule(&[(4, 4)]).is_ok());
    assert!(validate_schedule(&[(4, 4), (4, 4)]).is_err());
    assert!(validate_schedule(&[(3, 3), (4, 4)]).is_err());
    assert!(validate_schedule(&[(4, 4), (3, 5)]).is_err());
}

#[test]
fn init_quantizers_sets_interval_rules() {
    let mut net = tiny_net(1, Some((3, 3)));
    let data = tiny_dataset(2, 32);
    init_quantizers(&mut net, &calibration_batch(&data, 32)).unwrap();
    for name in net.quantized_layer_names() {
        let w = net.params.get(&format!("{name}.weight"));
        let m = w.max_abs();
        assert!((net.params.scalar(&format!("{name}.wq.c")) - m / 2.0).abs() < 1e-12);
        assert!((net.params.scalar(&format!("{name}.wq.d")) - m / 2.0).abs() < 1e-12);
        // activation interval spans [0, p99]
        let c = net.params.scalar(&format!("{name}.aq.c"));
        let d = net.params.scalar(&format!("{name}.aq.d"));
        assert!((c - d).abs() < 1e-12);
        assert!(c > 0.0);
    }
}

#[test]
fn init_rejects_all_zero_weights() {
    let mut net = tiny_net(3, Some((3, 3)));
    *net.params.get_mut("c2.weight") = Tensor::zeros(&[3, 2, 3, 3]);
    let data = tiny_dataset(4, 16);
    assert!(matches!(
        init_quantizers(&mut net, &calibration_batch(&data, 16)),
        Err(QilError::DegenerateInit(_))
    ));
}

#[test]
fn initial_pruning_matches_threshold_count() {
    // with freshly initialized intervals (gamma reset to 1), the measured
    // pruning ratio equals the fraction of weights below the closed-form
    // threshold
    let mut net = tiny_net(5, Some((4, 4)));
    let data = tiny_dataset(6, 32);
    init_quantizers(&mut net, &calibration_batch(&data, 32)).unwrap();
    for (name, measured) in weight_pruning(&net) {
        let spec = net.weight_quant_spec(&name).unwrap();
        let p = net.interval_params(&name, true);
        let (prune_thr, _) = crate::quantizer::thresholds(&p, &spec);
        let w = net.params.get(&format!("{name}.weight"));
        let below = w.data().iter().filter(|v| v.abs() < prune_thr).count();
        let expect = below as f64 / w.len() as f64;
        assert!(
            (measured - expect).abs() < 1e-12,
            "{name}: measured {measured} vs counted {expect}"
        );
    }
}

#[test]
fn zero_gradients_leave_only_weight_decay() {
    let mut net = tiny_net(7, Some((3, 3)));
    let before = net.clone();
    let cfg = cfg(1, 0.1, 0);
    let mut sgd = Sgd::new();
    let mut grads = GradStore::new();
    for (name, p) in net.params.iter() {
        if p.class.is_trainable() {
            grads.insert(name.clone(), Tensor::zeros(p.value.shape()));
        }
    }
    sgd.step(&mut net, &grads, &cfg, 0.1);
    for (name, p) in net.params.iter() {
        let old = before.params.get(name);
        match p.class {
            ParamClass::Weight => {
                for (a, b) in p.value.data().iter().zip(old.data()) {
                    let want = b - 0.1 * cfg.weight_decay * b;
                    assert!((a - want).abs() < 1e-15, "{name} decay mismatch");
                }
            }
            _ => assert_eq!(&p.value, old, "{name} must be unchanged"),
        }
    }
}

#[test]
fn quantizer_scalars_move_100x_less() {
    let mut net = tiny_net(8, Some((3, 3)));
    let before = net.clone();
    let mut config = cfg(1, 0.1, 0);
    config.weight_decay = 0.0;
    let mut sgd = Sgd::new();
    let mut grads = GradStore::new();
    for (name, p) in net.params.iter() {
        if p.class.is_trainable() {
            grads.insert(name.clone(), Tensor::filled(p.value.shape(), 1.0));
        }
    }
    sgd.step(&mut net, &grads, &config, 0.1);
    let w_delta = before.params.get("f2.weight").data()[0] - net.params.get("f2.weight").data()[0];
    let q_delta = before.params.scalar("c2.wq.c") - net.params.scalar("c2.wq.c");
    assert!((w_delta - 0.1).abs() < 1e-12);
    assert!((q_delta - 0.001).abs() < 1e-12);
    assert!((w_delta / q_delta - 100.0).abs() < 1e-9);
}

#[test]
fn quantizer_only_freezes_model_parameters() {
    let mut net = tiny_net(9, Some((3, 3)));
    let data = tiny_dataset(10, 24);
    init_quantizers(&mut net, &calibration_batch(&data, 24)).unwrap();
    let before = net.clone();
    let mut config = cfg(2, 0.05, 1);
    config.mode = TrainMode::QuantizerOnly;
    train(&mut net, &data, &data, &config, None).unwrap();
    let mut quant_moved = false;
    for (name, p) in net.params.iter() {
        let old = before.params.get(name);
        if p.class.is_quantizer() {
            quant_moved |= &p.value != old;
        } else if p.class == ParamClass::BnStat {
            // running stats may track
        } else {
            assert_eq!(&p.value, old, "{name} must stay frozen");
        }
    }
    assert!(quant_moved, "quantizer params should have moved");
}

#[test]
fn radius_clamp_holds_after_steps() {
    let mut net = tiny_net(11, Some((2, 2)));
    let mut config = cfg(1, 5.0, 0); // absurd lr to slam the params
    config.quantizer_lr_ratio = 10.0;
    let mut sgd = Sgd::new();
    let mut grads = GradStore::new();
    grads.insert("c2.wq.d".into(), Tensor::scalar(100.0));
    grads.insert("c2.wq.gamma".into(), Tensor::scalar(100.0));
    sgd.step(&mut net, &grads, &config, 5.0);
    assert!(net.params.scalar("c2.wq.d") >= crate::quantizer::MIN_RADIUS);
    let g = net.params.scalar("c2.wq.gamma");
    assert!((crate::quantizer::GAMMA_RANGE.0..=crate::quantizer::GAMMA_RANGE.1).contains(&g));
}

#[test]
fn training_decreases_loss_on_small_dataset() {
    let mut net = tiny_net_plain(12);
    let data = tiny_dataset(13, 2);
    let config = cfg(1, 0.005, 2);
    let (x, labels) = data.batch_range(0, 2);
    let (logits, _) = net.forward(&x, Mode::Eval).unwrap();
    let (loss0, _) = crate::nn::softmax_cross_entropy(&logits, &labels).unwrap();
    train(&mut net, &data, &data, &config, None).unwrap();
    let (logits1, _) = net.forward(&x, Mode::Eval).unwrap();
    let (loss1, _) = crate::nn::softmax_cross_entropy(&logits1, &labels).unwrap();
    assert!(loss1 < loss0, "loss {loss0} -> {loss1}");
}

#[test]
fn distill_with_identical_teacher_and_zero_lr_gives_zero_loss() {
    // batch-norm-free so the student's train-mode forward equals the
    // teacher's eval-mode forward exactly
    let mut student = tiny_net_plain(14);
    let teacher = student.clone();
    let data = tiny_dataset(15, 12);
    let mut config = cfg(2, 0.0, 3);
    config.mode = TrainMode::Distill;
    config.momentum = 0.0;
    let report = train(&mut student, &data, &data, &config, Some(&teacher)).unwrap();
    for r in &report.records {
        assert!(r.train_loss < 1e-20, "distill loss {}", r.train_loss);
        assert_eq!(r.train_accuracy, 1.0); // argmax agreement with teacher
    }
}

#[test]
fn distill_requires_teacher() {
    let mut net = tiny_net(16, Some((4, 4)));
    let data = tiny_dataset(17, 8);
    let mut config = cfg(1, 0.01, 0);
    config.mode = TrainMode::Distill;
    assert!(matches!(
        train(&mut net, &data, &data, &config, None),
        Err(QilError::InvalidConfig(_))
    ));
}

#[test]
fn empty_dataset_is_rejected() {
    let mut net = tiny_net(18, None);
    let empty = crate::data::DatasetHandle {
        images: Tensor::zeros(&[0, 1, 14, 14]),
        labels: vec![],
        split: "empty".into(),
        classes: None,
    };
    let config = cfg(1, 0.01, 0);
    assert!(matches!(
        train(&mut net, &empty, &empty, &config, None),
        Err(QilError::Data(_))
    ));
}

#[test]
fn report_has_one_record_per_epoch() {
    let mut net = tiny_net(19, Some((3, 3)));
    let data = tiny_dataset(20, 16);
    init_quantizers(&mut net, &calibration_batch(&data, 16)).unwrap();
    let config = cfg(3, 0.01, 4);
    let report = train(&mut net, &data, &data, &config, None).unwrap();
    assert_eq!(report.records.len(), 3);
    for (i, r) in report.records.iter().enumerate() {
        assert_eq!(r.epoch, i);
        assert!(r.prune_weights.iter().all(|(_, v)| (0.0..=1.0).contains(v)));
        assert!(r.prune_acts.iter().all(|(_, v)| (0.0..=1.0).contains(v)));
    }
}

#[test]
fn progressive_single_stage_equals_direct_finetune() {
    let fp = tiny_net(21, Some((4, 4)));
    let data = tiny_dataset(22, 24);
    let mut config = cfg(2, 0.01, 5);
    config.bit_schedule = vec![(4, 4)];
    let (nets, reports) = progressive_train(&fp, &data, &data, &config).unwrap();
    assert_eq!(nets.len(), 1);
    assert_eq!(reports.len(), 1);

    // direct: same init + same training by hand
    let mut direct = fp.clone();
    direct.set_bits(4, 4).unwrap();
    direct.quant_active = true;
    init_quantizers(&mut direct, &calibration_batch(&data, 256)).unwrap();
    let direct_report = train(&mut direct, &data, &data, &config, None).unwrap();
    for (name, p) in nets[0].params.iter() {
        assert_eq!(direct.params.get(name), &p.value, "param {name}");
    }
    assert_eq!(
        run_report_csv(&direct_report),
        run_report_csv(&reports[0])
    );
}

#[test]
fn progressive_stages_chain_parameters() {
    let fp = tiny_net(23, Some((4, 4)));
    let data = tiny_dataset(24, 24);
    let mut config = cfg(1, 0.01, 6);
    config.bit_schedule = vec![(4, 4), (3, 3), (2, 2)];
    let (nets, reports) = progressive_train(&fp, &data, &data, &config).unwrap();
    assert_eq!(nets.len(), 3);
    assert_eq!(reports.len(), 3);
    // bit widths follow the schedule
    for (net, &(nx, nw)) in nets.iter().zip(&config.bit_schedule) {
        let w = net.weight_quant_spec("c2").unwrap();
        let a = net.act_quant_spec("c2").unwrap();
        assert_eq!((a.bit_width, w.bit_width), (nx, nw));
    }
    // stage k resumes from stage k-1: re-running stage 2 by hand from
    // nets[0] reproduces nets[1] exactly
    let mut replay = nets[0].clone();
    replay.set_bits(3, 3).unwrap();
    let rep = train(&mut replay, &data, &data, &config, None).unwrap();
    for (name, p) in nets[1].params.iter() {
        assert_eq!(replay.params.get(name), &p.value, "param {name}");
    }
    assert_eq!(run_report_csv(&rep), run_report_csv(&reports[1]));
}

#[test]
fn progressive_rejects_empty_or_increasing_schedule() {
    let fp = tiny_net(25, Some((4, 4)));
    let data = tiny_dataset(26, 8);
    let mut config = cfg(1, 0.01, 7);
    config.bit_schedule = vec![];
    assert!(progressive_train(&fp, &data, &data, &config).is_err());
    config.bit_schedule = vec![(3, 3), (4, 4)];
    assert!(progressive_train(&fp, &data, &data, &config).is_err());
}

#[test]
fn identical_seed_identical_report() {
    let data = tiny_dataset(27, 32);
    let run = || {
        let mut net = tiny_net(28, Some((3, 3)));
        init_quantizers(&mut net, &calibration_batch(&data, 32)).unwrap();
        let config = cfg(2, 0.02, 9);
        train(&mut net, &data, &data, &config, None).unwrap()
    };
    let a = run();
    let b = run();
    assert_eq!(run_report_csv(&a), run_report_csv(&b));
}
