use std::path::Path;

use super::*;
use crate::config::{Digest, RunConfig};
use crate::data::{generate_dataset, Dataset, NoiseStd, SyntheticSpec};
use crate::encoders::{ClipModel, InputShape, ModelConfig, MAX_LOGIT_SCALE};
use crate::losses::{KdTerm, KdWeights};

fn schedule() -> Schedule {
    Schedule::new(10, 110, 1e-3).unwrap()
}

#[test]
fn schedule_boundaries() {
    let s = schedule();
    assert_eq!(cosine_warmup_lr(0, &s).unwrap(), 0.0);
    assert_eq!(cosine_warmup_lr(5, &s).unwrap(), 5e-4);
    assert_eq!(cosine_warmup_lr(10, &s).unwrap(), 1e-3);
    assert_eq!(cosine_warmup_lr(110, &s).unwrap(), 0.0);
    assert!((cosine_warmup_lr(60, &s).unwrap() - 5e-4).abs() < 1e-18);
    let err = cosine_warmup_lr(111, &s).unwrap_err();
    assert!(err.is_config(), "{err}");
    assert!(Schedule::new(5, 4, 1.0).is_err());
    let flat = Schedule::new(0, 4, 2.0).unwrap();
    assert_eq!(cosine_warmup_lr(0, &flat).unwrap(), 2.0);
    assert_eq!(cosine_warmup_lr(4, &flat).unwrap(), 0.0);
}

#[test]
fn schedule_is_monotone_in_each_phase() {
    let s = schedule();
    let lr: Vec<f64> = (0..=110).map(|t| cosine_warmup_lr(t, &s).unwrap()).collect();
    assert!(lr[..=10].windows(2).all(|w| w[0] < w[1]));
    assert!(lr[10..].windows(2).all(|w| w[0] > w[1]));
}

fn scalar_state(wd: f64) -> OptimState<f64> {
    let cfg = OptimConfig {
        lr: 0.1,
        weight_decay: wd,
        beta1: 0.9,
        beta2: 0.999,
        eps: 1e-8,
        warmup_steps: 0,
        batch_size: 2,
    };
    OptimState {
        step: 0,
        m: vec![Matrix::zeros(1, 1)],
        v: vec![Matrix::zeros(1, 1)],
        beta1: cfg.beta1,
        beta2: cfg.beta2,
        eps: cfg.eps,
        weight_decay: cfg.weight_decay,
        base_lr: cfg.lr,
    }
}

fn one(x: f64) -> Matrix<f64> {
    Matrix::from_vec(1, 1, vec![x]).unwrap()
}

#[test]
fn adam_scalar_matches_hand_evaluation() {
    // Step 1: m = 0.05, v = 0.00025, bias-corrected to 0.5 and 0.25.
    let mut st = scalar_state(0.0);
    let mut p = one(1.0);
    st.update(vec![&mut p], &[&one(0.5)], &[true], 0.1).unwrap();
    let expect = 1.0 - 0.1 * 0.5 / (0.5 + 1e-8);
    assert!((p[(0, 0)] - expect).abs() < 1e-15);
    assert_eq!(st.step, 1);

    // Step 2 with g = -1: m = 0.045 - 0.1 = -0.055, v = 0.00024975 + 0.001.
    let m = 0.9 * 0.05 - 0.1;
    let v = 0.999 * 0.00025 + 0.001 * 1.0;
    let m_hat = m / (1.0 - 0.9f64.powi(2));
    let v_hat = v / (1.0 - 0.999f64.powi(2));
    let expect2 = expect - 0.1 * m_hat / (v_hat.sqrt() + 1e-8);
    st.update(vec![&mut p], &[&one(-1.0)], &[true], 0.1).unwrap();
    assert!((p[(0, 0)] - expect2).abs() < 1e-15);
}

#[test]
fn weight_decay_is_decoupled() {
    let mut st = scalar_state(0.5);
    let mut p = one(2.0);
    st.update(vec![&mut p], &[&one(0.5)], &[true], 0.1).unwrap();
    let expect = 2.0 * (1.0 - 0.1 * 0.5) - 0.1 * 0.5 / (0.5 + 1e-8);
    assert!((p[(0, 0)] - expect).abs() < 1e-15);

    let mut st = scalar_state(0.5);
    let mut p = one(2.0);
    st.update(vec![&mut p], &[&one(0.0)], &[false], 0.1).unwrap();
    assert_eq!(p[(0, 0)], 2.0);
}

#[test]
fn zero_gradient_without_decay_leaves_parameters() {
    let (_, data, cfg) = tiny();
    let mut model = ClipModel::<f64>::new(&cfg.teacher, data.image_shape, data.text_shape, 1);
    let before = model.clone();
    let optim = OptimConfig {
        weight_decay: 0.0,
        ..OptimConfig::default()
    };
    let mut st = OptimState::new(&optim, &model);
    let zero = model.zeros_like();
    adamw_step(&mut model, &zero, &mut st, 1e-3).unwrap();
    assert_eq!(model, before);
    assert_eq!(st.step, 1);
}

#[test]
fn adam_rejects_mismatched_shapes() {
    let mut st = scalar_state(0.0);
    let mut p = one(1.0);
    let g = Matrix::<f64>::zeros(1, 2);
    assert!(st.update(vec![&mut p], &[&g], &[true], 0.1).is_err());
    assert!(st.update(vec![], &[], &[], 0.1).is_err());
    assert_eq!(st.step, 0);
}

#[test]
fn decay_mask_skips_biases_and_temperature() {
    assert!(decays("image.embed_w"));
    assert!(decays("text.block1.w"));
    assert!(decays("projection"));
    assert!(decays("fusion_image"));
    assert!(!decays("image.head_b"));
    assert!(!decays("text.block0.b"));
    assert!(!decays("logit_scale"));
}

#[test]
fn temperature_is_clamped_after_the_step() {
    let (_, data, cfg) = tiny();
    let mut model = ClipModel::<f64>::new(&cfg.teacher, data.image_shape, data.text_shape, 1);
    model.logit_scale[(0, 0)] = MAX_LOGIT_SCALE.ln() - 1e-6;
    let mut st = OptimState::new(&OptimConfig::default(), &model);
    let mut g = model.zeros_like();
    g.logit_scale[(0, 0)] = -1.0;
    adamw_step(&mut model, &g, &mut st, 0.1).unwrap();
    assert_eq!(model.logit_scale[(0, 0)], MAX_LOGIT_SCALE.ln());
}

fn tiny_spec() -> SyntheticSpec {
    SyntheticSpec {
        latent_dim: 4,
        classes: 4,
        patches: 4,
        patch_dim: 2,
        tokens: 3,
        token_dim: 2,
        noise_std: NoiseStd::default(),
        train_size: 64,
        val_size: 16,
        test_size: 16,
        pretrain_size: 256,
        seed: 5,
    }
}

fn tiny() -> (SyntheticSpec, Dataset<f64>, RunConfig) {
    let spec = tiny_spec();
    let data = generate_dataset(&spec).unwrap();
    let cfg = RunConfig {
        seed: 3,
        data: spec.clone(),
        teacher: ModelConfig {
            width: 8,
            blocks: 1,
            embed_dim: 6,
            init_tau: 0.1,
        },
        student: ModelConfig {
            width: 6,
            blocks: 1,
            embed_dim: 4,
            init_tau: 0.1,
        },
        optim: OptimConfig {
            warmup_steps: 2,
            batch_size: 16,
            ..OptimConfig::default()
        },
        teacher_steps: 6,
        student_steps: 6,
        eval_interval: 2,
        posneg_subset: 8,
        ..RunConfig::default()
    };
    cfg.validate().unwrap();
    (spec, data, cfg)
}

fn teacher_for(spec: &SyntheticSpec, data: &Dataset<f64>, cfg: &RunConfig) -> ClipModel<f64> {
    train_teacher(spec, data, &cfg.teacher, &TrainSettings::teacher(cfg)).unwrap().model
}

#[test]
fn zero_steps_return_the_initialisation() {
    let (spec, data, mut cfg) = tiny();
    cfg.teacher_steps = 0;
    let out = train_teacher(&spec, &data, &cfg.teacher, &TrainSettings::teacher(&cfg)).unwrap();
    assert_eq!(out.model, ClipModel::new(&cfg.teacher, data.image_shape, data.text_shape, cfg.seed));
    assert!(out.metrics.is_empty());
    assert_eq!(out.optim.step, 0);
}

#[test]
fn teacher_training_is_deterministic_and_logs_each_interval() {
    let (spec, data, cfg) = tiny();
    let s = TrainSettings::teacher(&cfg);
    let a = train_teacher(&spec, &data, &cfg.teacher, &s).unwrap();
    let b = train_teacher(&spec, &data, &cfg.teacher, &s).unwrap();
    let d = cfg.digest();
    assert_eq!(metrics_csv(&a.metrics, &d, cfg.seed), metrics_csv(&b.metrics, &d, cfg.seed));
    assert_eq!(
        encode_checkpoint(&a.model, Some(&a.optim), &d),
        encode_checkpoint(&b.model, Some(&b.optim), &d)
    );
    assert_eq!(a.metrics.iter().map(|r| r.step).collect::<Vec<_>>(), vec![2, 4, 6]);
    assert!(a.metrics.iter().all(|r| r.terms.iter().all(Option::is_none)));
    assert_ne!(a.model, ClipModel::new(&cfg.teacher, data.image_shape, data.text_shape, cfg.seed));
}

#[test]
fn teacher_can_pretrain_on_the_training_split() {
    let (mut spec, data, cfg) = tiny();
    let streamed = teacher_for(&spec, &data, &cfg);
    spec.pretrain_size = 0;
    let local = teacher_for(&spec, &data, &cfg);
    assert_ne!(streamed, local);
}

#[test]
fn metrics_csv_layout() {
    let row = MetricsRow {
        step: 2,
        lr: 0.5,
        task: 1.25,
        terms: [None, Some(0.5), None, None, Some(2.0), None],
        total: 3.0,
        tau: 0.07,
        posneg_gap: 0.25,
    };
    let csv = metrics_csv(&[row], &Digest::default(), 9);
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], format!("# digest={} seed=9", "0".repeat(64)));
    assert_eq!(lines[1], METRICS_HEADER);
    assert_eq!(lines[2], "2,0.5,1.25,,0.5,,,2,,3,0.07,0.25");
}

#[test]
fn divergence_reports_the_last_finite_step() {
    let (mut spec, mut data, cfg) = tiny();
    spec.pretrain_size = 0;
    data.train.images[(0, 0)] = f64::NAN;
    let s = TrainSettings::teacher(&cfg);
    let err = train_teacher(&spec, &data, &cfg.teacher, &s).unwrap_err();
    match err {
        Error::Divergence { step, last_finite_step } => {
            assert_eq!(last_finite_step, step.checked_sub(1));
        }
        other => panic!("unexpected {other}"),
    }
}

#[test]
fn all_zero_weights_follow_the_baseline_trajectory() {
    let (spec, data, cfg) = tiny();
    let teacher = teacher_for(&spec, &data, &cfg);
    let frozen = teacher.clone();
    let s = TrainSettings::student(&cfg);
    let base = distill(&teacher, &data, &cfg.student, &KdWeights::default(), &s).unwrap();
    let mut zero = KdWeights::with(&KdTerm::ALL);
    for t in KdTerm::ALL {
        zero.set_weight(t, 0.0);
    }
    let kd = distill(&teacher, &data, &cfg.student, &zero, &s).unwrap();
    assert_eq!(base.metrics.len(), kd.metrics.len());
    for (a, b) in base.metrics.iter().zip(&kd.metrics) {
        assert_eq!((a.step, a.lr, a.task, a.tau, a.posneg_gap), (b.step, b.lr, b.task, b.tau, b.posneg_gap));
        assert_eq!(a.task, b.total);
        assert!(b.terms.iter().all(Option::is_some));
    }
    assert_eq!(base.model.image, kd.model.image);
    assert_eq!(base.model.text, kd.model.text);
    assert_eq!(base.model.projection, kd.model.projection);
    assert_eq!(teacher, frozen);
}

#[test]
fn unified_run_logs_its_three_terms() {
    let (spec, data, cfg) = tiny();
    let teacher = teacher_for(&spec, &data, &cfg);
    let out = distill(&teacher, &data, &cfg.student, &KdWeights::unified(), &TrainSettings::student(&cfg)).unwrap();
    let last = out.metrics.last().unwrap();
    for t in [KdTerm::Crd, KdTerm::Fd, KdTerm::Icl] {
        assert!(last.term(t).unwrap().is_finite(), "{t}");
    }
    for t in [KdTerm::Mfd, KdTerm::Gd, KdTerm::Afd] {
        assert!(last.term(t).is_none());
    }
    assert!(out.model.projection.is_some());
}

#[test]
fn every_term_trains_without_error() {
    let (spec, data, cfg) = tiny();
    let teacher = teacher_for(&spec, &data, &cfg);
    for t in KdTerm::ALL {
        let out = distill(&teacher, &data, &cfg.student, &KdWeights::with(&[t]), &TrainSettings::student(&cfg)).unwrap();
        assert!(out.model.is_finite(), "{t}");
        assert_eq!(out.model.fusion_image.is_some(), t == KdTerm::Afd);
    }
}

#[test]
fn checkpoint_round_trip_is_byte_exact() {
    let (spec, data, cfg) = tiny();
    let out = train_teacher(&spec, &data, &cfg.teacher, &TrainSettings::teacher(&cfg)).unwrap();
    let d = cfg.digest();
    let bytes = encode_checkpoint(&out.model, Some(&out.optim), &d);
    assert_eq!(&bytes[..4], b"CKPT");

    let mut model = ClipModel::new(&cfg.teacher, data.image_shape, data.text_shape, 99);
    let mut optim = OptimState::new(&cfg.optim, &model);
    let got = decode_checkpoint(Path::new("t.ckpt"), &bytes, &mut model, Some(&mut optim)).unwrap();
    assert_eq!(got, d);
    assert_eq!(model, out.model);
    assert_eq!(optim, out.optim);
    assert_eq!(encode_checkpoint(&model, Some(&optim), &d), bytes);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    save_checkpoint(&path, &out.model, None, &d).unwrap();
    let mut again = model.zeros_like();
    load_checkpoint(&path, &mut again, None).unwrap();
    assert_eq!(again, out.model);
    let err = load_checkpoint(&path, &mut again, Some(&mut optim)).unwrap_err();
    assert!(err.to_string().contains("no optimizer state"), "{err}");

    let f32_model: ClipModel<f32> = ClipModel::new(&cfg.teacher, data.image_shape, data.text_shape, 1);
    let bytes32 = encode_checkpoint(&f32_model, None, &d);
    let mut back32 = f32_model.zeros_like();
    decode_checkpoint(Path::new("x"), &bytes32, &mut back32, None).unwrap();
    assert_eq!(back32, f32_model);
    let mut as64 = out.model.clone();
    let err = decode_checkpoint(Path::new("x"), &bytes32, &mut as64, None).unwrap_err();
    assert!(err.to_string().contains("byte 5"), "{err}");
}

#[test]
fn wrong_architecture_names_the_tensor() {
    let (_, data, cfg) = tiny();
    let model = ClipModel::<f64>::new(&cfg.teacher, data.image_shape, data.text_shape, 1);
    let bytes = encode_checkpoint(&model, None, &Digest::default());
    let wide = ModelConfig {
        width: 10,
        ..cfg.teacher.clone()
    };
    let mut other = ClipModel::<f64>::new(&wide, data.image_shape, data.text_shape, 1);
    let err = decode_checkpoint(Path::new("x"), &bytes, &mut other, None).unwrap_err();
    match &err {
        Error::TensorShape { name, expected, found } => {
            assert_eq!(name, "image.embed_w");
            assert_eq!(expected, &vec![8, 10]);
            assert_eq!(found, &vec![8, 8]);
        }
        e => panic!("unexpected {e}"),
    }
    let shape = InputShape { positions: 5, in_dim: 2 };
    let mut other = ClipModel::<f64>::new(&cfg.teacher, shape, data.text_shape, 1).with_projection(3, 1);
    assert!(decode_checkpoint(Path::new("x"), &bytes, &mut other, None).is_err());
}

#[test]
fn corrupt_checkpoints_report_offsets() {
    let (_, data, cfg) = tiny();
    let model = ClipModel::<f64>::new(&cfg.teacher, data.image_shape, data.text_shape, 1);
    let bytes = encode_checkpoint(&model, None, &Digest::default());
    let p = Path::new("c.ckpt");
    let mut fresh = model.zeros_like();
    let load = |b: &[u8], m: &mut ClipModel<f64>| decode_checkpoint(p, b, m, None).unwrap_err().to_string();

    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(load(&bad, &mut fresh).contains("byte 0"));
    let mut bad = bytes.clone();
    bad[4] = 9;
    assert!(load(&bad, &mut fresh).contains("version"));
    let err = load(&bytes[..100], &mut fresh);
    assert!(err.contains("truncated") && err.contains("byte"), "{err}");
    let mut bad = bytes.clone();
    let mid = bytes.len() / 2;
    bad[mid] ^= 0x40;
    let err = load(&bad, &mut fresh);
    assert!(err.contains("byte"), "{err}");
    let mut bad = bytes.clone();
    bad.push(0);
    assert!(load(&bad, &mut fresh).contains("trailing"));
    assert_eq!(fresh, model.zeros_like(), "failed loads leave the model untouched");
}

#[test]
fn every_single_byte_flip_is_reported_as_corruption() {
    let (_, data, cfg) = tiny();
    let model = ClipModel::<f64>::new(&cfg.teacher, data.image_shape, data.text_shape, 1);
    let optim = OptimState::new(&cfg.optim, &model);
    let bytes = encode_checkpoint(&model, Some(&optim), &Digest::default());
    for i in 0..bytes.len() {
        let mut bad = bytes.clone();
        bad[i] ^= 0x10;
        let mut m = model.zeros_like();
        let mut o = OptimState::new(&cfg.optim, &m);
        match decode_checkpoint(Path::new("f.ckpt"), &bad, &mut m, Some(&mut o)) {
            Err(Error::Format { .. }) => {}
            other => panic!("flip at byte {i}: {other:?}"),
        }
        assert_eq!(m, model.zeros_like());
    }
}

#[test]
fn resume_reproduces_the_uninterrupted_run() {
    let (spec, data, cfg) = tiny();
    let teacher = teacher_for(&spec, &data, &cfg);
    let w = KdWeights::with(&[KdTerm::Fd, KdTerm::Mfd, KdTerm::Icl]);
    let s = TrainSettings::student(&cfg);
    let full = distill(&teacher, &data, &cfg.student, &w, &s).unwrap();

    let part = distill(
        &teacher,
        &data,
        &cfg.student,
        &w,
        &TrainSettings {
            stop_after: Some(3),
            ..s.clone()
        },
    )
    .unwrap();
    assert_eq!(part.optim.step, 3);
    let d = cfg.digest();
    let bytes = encode_checkpoint(&part.model, Some(&part.optim), &d);
    let mut model = init_student(&cfg.student, &teacher, &w, 1234).unwrap();
    let mut optim = OptimState::new(&cfg.optim, &model);
    decode_checkpoint(Path::new("r"), &bytes, &mut model, Some(&mut optim)).unwrap();
    let rest = resume_distill(&teacher, model, optim, &data, &w, &s).unwrap();

    let mut joined = part.metrics.clone();
    joined.extend(rest.metrics.clone());
    assert_eq!(metrics_csv(&joined, &d, 3), metrics_csv(&full.metrics, &d, 3));
    assert_eq!(
        encode_checkpoint(&rest.model, Some(&rest.optim), &d),
        encode_checkpoint(&full.model, Some(&full.optim), &d)
    );

    let tpart = train_teacher(
        &spec,
        &data,
        &cfg.teacher,
        &TrainSettings {
            stop_after: Some(4),
            ..TrainSettings::teacher(&cfg)
        },
    )
    .unwrap();
    let trest = resume_teacher(&spec, tpart.model, tpart.optim, &data, &TrainSettings::teacher(&cfg)).unwrap();
    assert_eq!(trest.model, teacher);
}
