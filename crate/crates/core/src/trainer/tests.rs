use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::selector::ParamStore;

fn rand_image(rng: &mut ChaCha8Rng, h: usize, w: usize, lo: f32, hi: f32) -> Tensor {
    Tensor::image_from_fn(h, w, 3, |_, _, _| rng.gen_range(lo..hi))
}

fn tiny_config() -> TrainConfig {
    TrainConfig {
        epochs: 2,
        warmup_epochs: 1,
        batch_size: 3,
        batch_pp_rand: 2,
        batch_pp_mt: 1,
        input_size: 8,
        learning_rate: 1e-3,
        model: ModelConfig {
            k: 2,
            selector_size: 8,
        },
        ..TrainConfig::default()
    }
}

fn tiny_data(seed: u64) -> TrainingSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    TrainingSet {
        raws: (0..3)
            .map(|_| rand_image(&mut rng, 10, 12, 0.05, 0.6))
            .collect(),
        pseudo_rgbs: (0..3)
            .map(|_| rand_image(&mut rng, 10, 12, 0.1, 0.9))
            .collect(),
        rgbs: (0..2)
            .map(|_| rand_image(&mut rng, 12, 10, 0.1, 0.9))
            .collect(),
    }
}

fn scalar(tape: &mut Tape, v: f32) -> Var {
    tape.param(Tensor::scalar(v))
}

#[test]
fn loss_terms_one_pixel() {
    let mut tape = Tape::new();
    let px = |tape: &mut Tape, v: f32| tape.constant(Tensor::full(vec![1, 1, 3], v));
    let x = px(&mut tape, 0.5);
    let y = px(&mut tape, 0.25);
    let reversed = px(&mut tape, 0.16);
    let rendered = px(&mut tape, 0.4);
    let e = 1.0 / 2.2;
    let (loss, rev, fwd) = bi_loss_terms(&mut tape, x, y, reversed, rendered, e).unwrap();
    let expect_rev = libm::powf(0.25, e) - libm::powf(0.16, e);
    assert!((tape.value(rev).data()[0] - expect_rev).abs() < 1e-6);
    assert!((tape.value(fwd).data()[0] - 0.1).abs() < 1e-6);
    assert!((tape.value(loss).data()[0] - (expect_rev + 0.1)).abs() < 1e-6);
}

#[test]
fn identity_model_has_zero_loss_on_identical_images() {
    let mut model = Model::init(
        ModelConfig {
            k: 2,
            selector_size: 8,
        },
        3,
    )
    .unwrap();
    model.set_identity_dictionaries().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let y = rand_image(&mut rng, 8, 8, 0.05, 0.9);
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, false);
    let bl = bi_loss(&mut tape, &bound, &y, &y, &y, 1.0 / 2.2).unwrap();
    assert!(tape.value(bl.loss).data()[0] < 1e-5);
}

#[test]
fn bi_loss_rejects_mismatched_pair() {
    let model = Model::init(
        ModelConfig {
            k: 2,
            selector_size: 8,
        },
        3,
    )
    .unwrap();
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, false);
    let x = Tensor::full(vec![8, 8, 3], 0.5);
    let y = Tensor::full(vec![8, 6, 3], 0.5);
    assert!(bi_loss(&mut tape, &bound, &x, &y, &y, 0.5).is_err());
}

#[test]
fn total_loss_weighting_and_gating() {
    let mut tape = Tape::new();
    let r = [scalar(&mut tape, 1.0), scalar(&mut tape, 1.0)];
    let m = [scalar(&mut tape, 1.0)];
    let on = total_loss(&mut tape, &r, &m, 0.3, true).unwrap();
    assert!((tape.value(on).data()[0] - 1.3).abs() < 1e-6);
    let off = total_loss(&mut tape, &r, &m, 0.3, false).unwrap();
    assert!((tape.value(off).data()[0] - 1.0).abs() < 1e-6);
    let zero_alpha = total_loss(&mut tape, &r, &m, 0.0, true).unwrap();
    assert!((tape.value(zero_alpha).data()[0] - 1.0).abs() < 1e-6);
    assert!(total_loss(&mut tape, &[], &m, 0.3, true).is_err());
}

#[test]
fn warmup_blocks_mt_gradients() {
    let mut tape = Tape::new();
    let r = scalar(&mut tape, 2.0);
    let m = scalar(&mut tape, 5.0);
    let loss = total_loss(&mut tape, &[r], &[m], 0.3, false).unwrap();
    let g = tape.backward(loss).unwrap();
    assert!(g.raw(m).is_none_or(|d| d.iter().all(|&v| v == 0.0)));
    assert_eq!(g.raw(r).unwrap()[0], 1.0);

    let cfg = TrainConfig {
        warmup_epochs: 15,
        ..TrainConfig::default()
    };
    assert!(!cfg.pp_mt_active(14));
    assert!(cfg.pp_mt_active(15));
}

#[test]
fn learning_rate_schedule() {
    let cfg = TrainConfig::default();
    assert_eq!(cfg.lr_at(0), 1e-4);
    assert_eq!(cfg.lr_at(249), 1e-4);
    assert!((cfg.lr_at(250) - 1e-5).abs() < 1e-12);
    assert!((cfg.lr_at(799) - 1e-6).abs() < 1e-12);
}

#[test]
fn config_validation() {
    assert!(TrainConfig::default().validate().is_ok());
    let bad_split = TrainConfig {
        batch_pp_mt: 4,
        ..TrainConfig::default()
    };
    assert!(bad_split.validate().is_err());
    let bad_decay = TrainConfig {
        ema_decay: 1.0,
        ..TrainConfig::default()
    };
    assert!(bad_decay.validate().is_err());
}

fn store(values: &[f32]) -> ParamStore {
    let mut s = ParamStore::new();
    s.insert("w", Tensor::from_vec(values.to_vec())).unwrap();
    s
}

#[test]
fn adam_zero_gradient_is_noop() {
    let mut p = store(&[0.3, -1.2]);
    let before = p.clone();
    let mut adam = Adam::new(&p);
    adam.step(&mut p, &[vec![0.0, 0.0]], 1e-4).unwrap();
    assert_eq!(p, before);
}

#[test]
fn adam_first_step_moves_by_learning_rate() {
    let mut p = store(&[1.0]);
    let mut adam = Adam::new(&p);
    adam.step(&mut p, &[vec![1.0]], 1e-4).unwrap();
    let d = p.get("w").unwrap().data()[0] - 1.0;
    assert!((d + 1e-4).abs() < 1e-7, "{d}");
}

#[test]
fn adam_decreases_quadratic() {
    let mut p = store(&[1.0]);
    let mut adam = Adam::new(&p);
    for _ in 0..100 {
        let w = p.get("w").unwrap().data()[0];
        adam.step(&mut p, &[vec![2.0 * w]], 1e-2).unwrap();
    }
    let w = p.get("w").unwrap().data()[0];
    assert!(w * w < 1.0);
}

#[test]
fn adam_rates_apply_per_tensor() {
    let mut p = store(&[1.0]);
    p.insert("v", Tensor::from_vec(vec![1.0])).unwrap();
    let mut adam = Adam::new(&p);
    adam.step_with_rates(&mut p, &[vec![1.0], vec![1.0]], &[1e-4, 1e-3])
        .unwrap();
    assert!((p.get("w").unwrap().data()[0] - (1.0 - 1e-4)).abs() < 1e-7);
    assert!((p.get("v").unwrap().data()[0] - (1.0 - 1e-3)).abs() < 1e-7);
    assert!(adam
        .step_with_rates(&mut p, &[vec![1.0], vec![1.0]], &[1e-4])
        .is_err());
}

#[test]
fn dictionary_scale_only_speeds_up_dictionaries() {
    let data = tiny_data(0);
    let run = |scale: f32| {
        let mut t = Trainer::new(TrainConfig {
            dictionary_lr_scale: scale,
            ..tiny_config()
        })
        .unwrap();
        let before = t.student.params.clone();
        t.train_step(&data, &[0]).unwrap();
        let moved = |prefix: &str| -> f32 {
            before
                .iter()
                .zip(t.student.params.iter())
                .filter(|((n, _), _)| n.starts_with(prefix))
                .flat_map(|((_, a), (_, b))| {
                    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs())
                })
                .fold(0.0, f32::max)
        };
        (moved("dict."), moved("enc."))
    };
    let (dict1, enc1) = run(1.0);
    let (dict10, enc10) = run(10.0);
    assert!((dict10 / dict1 - 10.0).abs() < 0.1, "{dict1} {dict10}");
    assert_eq!(enc1, enc10);
}

#[test]
fn adam_rejects_non_finite_gradient() {
    let mut p = store(&[1.0]);
    let mut adam = Adam::new(&p);
    let err = adam.step(&mut p, &[vec![f32::NAN]], 1e-4).unwrap_err();
    assert_eq!(err, Error::NonFiniteGradient("w".into()));
    assert_eq!(p.get("w").unwrap().data()[0], 1.0);
}

#[test]
fn ema_examples() {
    let mut t = store(&[0.0]);
    ema_update(&mut t, &store(&[1.0]), 0.999).unwrap();
    assert!((t.get("w").unwrap().data()[0] - 0.001).abs() < 1e-7);
    ema_update(&mut t, &store(&[1.0]), 0.999).unwrap();
    assert!((t.get("w").unwrap().data()[0] - 0.001999).abs() < 1e-7);

    let mut t = store(&[0.7]);
    ema_update(&mut t, &store(&[-0.2]), 0.0).unwrap();
    assert_eq!(t.get("w").unwrap().data()[0], -0.2);

    assert!(ema_update(&mut t, &store(&[1.0]), 1.0).is_err());
    assert!(ema_update(&mut t, &store(&[1.0, 2.0]), 0.5).is_err());
}

#[test]
fn ema_matches_closed_form_recurrence() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let decay = 0.9f64;
    let mut t = store(&[0.25]);
    let mut oracle = 0.25f64;
    for _ in 0..50 {
        let s: f32 = rng.gen_range(-1.0..1.0);
        ema_update(&mut t, &store(&[s]), decay as f32).unwrap();
        oracle = decay * oracle + (1.0 - decay) * s as f64;
    }
    assert!((t.get("w").unwrap().data()[0] as f64 - oracle).abs() < 1e-5);
}

proptest! {
    #[test]
    fn ema_stays_between_teacher_and_student(
        a in -10.0f32..10.0, b in -10.0f32..10.0, decay in 0.0f32..0.9999,
    ) {
        let mut t = store(&[a]);
        ema_update(&mut t, &store(&[b]), decay).unwrap();
        let v = t.get("w").unwrap().data()[0];
        prop_assert!(v >= a.min(b) - 1e-5 && v <= a.max(b) + 1e-5);
    }
}

#[test]
fn normalize_raw_levels() {
    let raw = Tensor::from_vec(vec![64.0, 1023.0, 0.0, 2000.0, 543.5]);
    let n = normalize_raw(&raw, 64.0, 1023.0).unwrap();
    assert_eq!(n.data()[0], 0.0);
    assert_eq!(n.data()[1], 1.0);
    assert_eq!(n.data()[2], 0.0);
    assert_eq!(n.data()[3], 1.0);
    assert!((n.data()[4] - 0.5).abs() < 1e-6);
    assert!(normalize_raw(&raw, 64.0, 64.0).is_err());
    assert!(normalize_raw(&raw, 100.0, 64.0).is_err());
}

#[test]
fn augmentation_identity_and_rotations() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = rand_image(&mut rng, 4, 6, 0.0, 1.0);
    assert_eq!(Augmentation::default().apply(&x).unwrap(), x);
    let quarter = Augmentation {
        quarter_turns: 1,
        ..Augmentation::default()
    };
    let half = Augmentation {
        quarter_turns: 2,
        ..Augmentation::default()
    };
    let twice = quarter.apply(&quarter.apply(&x).unwrap()).unwrap();
    assert_eq!(twice, half.apply(&x).unwrap());
    let full = Augmentation {
        quarter_turns: 4,
        ..Augmentation::default()
    };
    assert_eq!(full.apply(&x).unwrap(), x);
}

#[test]
fn augment_shares_geometry() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = rand_image(&mut rng, 6, 6, 0.0, 1.0);
    for seed in 0..8 {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let out = augment(&[&x, &x], 6, &mut r).unwrap();
        assert_eq!(out[0], out[1]);
        assert_eq!(out[0].shape(), &[6, 6, 3]);
    }
}

fn gradient_model() -> Model {
    let mut model = Model::init(
        ModelConfig {
            k: 5,
            selector_size: 8,
        },
        11,
    )
    .unwrap();
    // Nonzero last DTM layers so every DTM tensor receives gradient.
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let names: Vec<String> = model
        .params
        .names()
        .iter()
        .filter(|n| n.starts_with("dict.tm.") && (n.contains(".l3.") || n.ends_with(".b")))
        .cloned()
        .collect();
    for n in names {
        for v in model.params.get_mut(&n).unwrap().data_mut() {
            *v = rng.gen_range(-0.05..0.05);
        }
    }
    model
}

fn gradient_images() -> (Tensor, Tensor, Tensor) {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    (
        rand_image(&mut rng, 8, 8, 0.2, 0.7),
        rand_image(&mut rng, 8, 8, 0.05, 0.4),
        rand_image(&mut rng, 8, 8, 0.05, 0.4),
    )
}

#[test]
fn every_tensor_receives_gradient() {
    let model = gradient_model();
    let (x, y, r) = gradient_images();
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, true);
    let bl = bi_loss(&mut tape, &bound, &x, &y, &r, 1.0 / 2.2).unwrap();
    let g = tape.backward(bl.loss).unwrap();
    for (name, &v) in model.params.names().iter().zip(bound.vars()) {
        let d = g.raw(v).unwrap_or(&[]);
        assert!(d.iter().all(|v| v.is_finite()), "{name}");
        assert!(d.iter().any(|&v| v != 0.0), "no gradient for {name}");
    }
}

#[test]
fn loss_gradients_match_finite_differences() {
    let model = gradient_model();
    let (x, y, r) = gradient_images();
    let settings = GradCheckSettings {
        step: LOSS_CHECK_STEP,
        rel_tol: 1e-2,
        probes_per_tensor: 4,
        ..GradCheckSettings::default()
    };
    let report = check_loss_gradients(&model, &x, &y, &r, 1.0 / 2.2, settings).unwrap();
    let worst =
        report
            .rel_errors
            .iter()
            .zip(model.params.names())
            .fold(
                (0.0f32, ""),
                |acc, (&e, n)| if e > acc.0 { (e, n.as_str()) } else { acc },
            );
    assert!(report.passed(), "worst {worst:?}");
}

#[test]
fn training_is_deterministic() {
    let data = tiny_data(21);
    let run = || {
        let mut t = Trainer::new(tiny_config()).unwrap();
        let mut losses = Vec::new();
        for _ in 0..2 {
            losses.extend(
                t.run_epoch(&data)
                    .unwrap()
                    .into_iter()
                    .map(|m| m.loss_total),
            );
        }
        (
            losses,
            t.student.params.checksum(),
            t.teacher.params.checksum(),
        )
    };
    assert_eq!(run(), run());
}

#[test]
fn step_updates_student_and_teacher() {
    let data = tiny_data(22);
    let mut t = Trainer::new(tiny_config()).unwrap();
    let initial = t.student.params.checksum();
    assert_eq!(initial, t.teacher.params.checksum());
    let steps = t.run_epoch(&data).unwrap();
    assert_eq!(steps.len(), 2);
    assert_eq!(t.epoch, 1);
    assert_eq!(t.step, 2);
    assert!(steps
        .iter()
        .all(|m| m.loss_pp_mt == 0.0 && m.loss_total.is_finite()));
    let (s, te) = (t.student.params.checksum(), t.teacher.params.checksum());
    assert_ne!(s, initial);
    assert_ne!(te, initial);
    assert_ne!(s, te);
    // Past warmup the PP_MT term is active.
    let steps = t.run_epoch(&data).unwrap();
    assert!(steps.iter().all(|m| m.loss_pp_mt > 0.0));
    for m in steps {
        let expect = m.loss_pp_rand + 0.3 * m.loss_pp_mt;
        assert!((m.loss_total - expect).abs() < 1e-6);
    }
}

#[test]
fn resume_at_epoch_boundary_matches_uninterrupted_run() {
    let data = tiny_data(23);
    let mut full = Trainer::new(tiny_config()).unwrap();
    full.run_epoch(&data).unwrap();
    let snapshot = (
        full.student.clone(),
        full.teacher.clone(),
        full.adam.clone(),
        full.epoch,
        full.step,
    );
    let a = full.run_epoch(&data).unwrap();
    let mut resumed = Trainer::from_parts(
        tiny_config(),
        snapshot.0,
        snapshot.1,
        Some(snapshot.2),
        snapshot.3,
        snapshot.4,
    );
    let b = resumed.run_epoch(&data).unwrap();
    assert_eq!(a, b);
    assert_eq!(full.student.params, resumed.student.params);
}

#[test]
fn training_set_validation() {
    assert_eq!(
        TrainingSet::default().validate(),
        Err(Error::EmptyDataset("raw"))
    );
    let mut d = tiny_data(1);
    d.pseudo_rgbs.pop();
    assert!(d.validate().is_err());
}
