use protokd::data::{generate, Dataset, GeneratorConfig, InputView};
use protokd::losses::combine;
use protokd::model::{init_params, ModelConfig};
use protokd::trainer::{distill_student, train_supervised, train_teacher, TrainConfig};
use protokd::Error;

fn small_data(seed: u64) -> Dataset {
    generate(&GeneratorConfig {
        height: 12,
        width: 12,
        radius_min: 2.0,
        radius_max: 4.0,
        train: 8,
        val: 2,
        test: 2,
        seed,
        ..GeneratorConfig::default()
    })
    .unwrap()
}

fn quick(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        ..TrainConfig::default()
    }
}

fn model(seed: u64) -> ModelConfig {
    ModelConfig {
        seed,
        ..ModelConfig::default()
    }
}

#[test]
fn zero_epochs_returns_initial_params() {
    let ds = small_data(1);
    let m = model(3);
    let out = train_teacher(&ds, &m, &quick(0)).unwrap();
    let init = init_params(&m.segnet(3, 3)).unwrap();
    assert!(out.params.bit_eq(&init));
    assert!(out.log.epochs.is_empty() && out.log.best_epoch.is_none());
}

#[test]
fn runs_are_reproducible() {
    let ds = small_data(2);
    let cfg = quick(3);
    let a = train_teacher(&ds, &model(5), &cfg).unwrap();
    let b = train_teacher(&ds, &model(5), &cfg).unwrap();
    assert!(a.params.bit_eq(&b.params) && a.final_params.bit_eq(&b.final_params));
    assert_eq!(a.log.without_timing(), b.log.without_timing());

    let c = train_teacher(
        &ds,
        &model(5),
        &TrainConfig {
            shuffle_seed: 9,
            ..cfg
        },
    )
    .unwrap();
    assert!(!a.final_params.bit_eq(&c.final_params));
}

#[test]
fn student_run_properties() {
    let ds = small_data(3);
    let teacher = train_teacher(&ds, &model(1), &quick(4)).unwrap().params;
    let before = teacher.clone();
    let cfg = quick(4);
    let out = distill_student(&ds, &teacher, 0, &model(2), &cfg).unwrap();
    assert!(teacher.bit_eq(&before), "teacher must stay frozen");
    assert_eq!(out.params.config().in_channels, 1);

    for s in &out.log.steps {
        let want = combine(s.l_seg, s.l_kd, s.l_proto, &cfg.weights);
        assert!(
            (s.l_total - want).abs() <= 1e-12 * want.abs().max(1.0),
            "step {}",
            s.step
        );
        assert!(s.l_kd > 0.0 && s.l_proto > 0.0);
    }
}

#[test]
fn masked_terms_are_exactly_zero() {
    let ds = small_data(4);
    let teacher = train_teacher(&ds, &model(1), &quick(2)).unwrap().params;
    for (kd, proto) in [(false, false), (true, false), (false, true)] {
        let cfg = quick(3).with_ablation(kd, proto);
        let out = distill_student(&ds, &teacher, 1, &model(2), &cfg).unwrap();
        for s in &out.log.steps {
            assert_eq!(s.l_kd == 0.0, !kd);
            assert_eq!(s.l_proto == 0.0, !proto);
        }
    }
}

#[test]
fn no_distillation_equals_supervised_training() {
    let ds = small_data(5);
    let teacher = train_teacher(&ds, &model(1), &quick(2)).unwrap().params;
    let cfg = quick(3).with_ablation(false, false);
    let a = distill_student(&ds, &teacher, 2, &model(7), &cfg).unwrap();
    let b = train_supervised(&ds, InputView::Modality(2), &model(7), &cfg, "student").unwrap();
    assert!(a.final_params.bit_eq(&b.final_params));
    assert_eq!(a.log.without_timing(), b.log.without_timing());
}

#[test]
fn identical_student_and_teacher_have_zero_distillation() {
    let ds = generate(&GeneratorConfig {
        height: 10,
        width: 10,
        modalities: 1,
        visibility: vec![vec![0.0, 0.6, 0.9]],
        train: 6,
        val: 1,
        test: 1,
        ..GeneratorConfig::default()
    })
    .unwrap();
    let m = model(11);
    let teacher = init_params(&m.segnet(1, 3)).unwrap();
    // a step this small cannot move any parameter, so the student stays a copy
    let cfg = TrainConfig {
        lr: 1e-300,
        ..quick(2)
    };
    let out = distill_student(&ds, &teacher, 0, &m, &cfg).unwrap();
    assert!(!out.log.steps.is_empty());
    for s in &out.log.steps {
        assert_eq!(s.l_kd, 0.0);
        assert_eq!(s.l_proto, 0.0);
    }
}

/// Both trend properties on the default benchmark and schedule, five seeds.
#[test]
fn default_runs_lower_their_losses() {
    let ds = generate(&GeneratorConfig::default()).unwrap();
    let cfg = TrainConfig::default();
    let (mut first, mut last) = (0.0, 0.0);
    for seed in 0..5 {
        let teacher = train_teacher(
            &ds,
            &model(seed),
            &TrainConfig {
                shuffle_seed: seed,
                ..cfg.clone()
            },
        )
        .unwrap();
        let e = &teacher.log.epochs;
        assert!(e.last().unwrap().l_seg < e[0].l_seg, "teacher seed {seed}");

        let student = TrainConfig {
            shuffle_seed: 100 + seed,
            ..cfg.clone()
        };
        let out = distill_student(&ds, &teacher.params, 0, &model(100 + seed), &student).unwrap();
        first += out.log.epochs[0].l_proto;
        last += out.log.last().unwrap().l_proto;
    }
    assert!(last < first, "proto loss {first} -> {last}");
}

#[test]
fn invalid_requests() {
    let ds = small_data(6);
    let teacher = train_teacher(&ds, &model(1), &quick(1)).unwrap().params;
    assert!(matches!(
        distill_student(&ds, &teacher, 3, &model(2), &quick(1)),
        Err(Error::ModalityOutOfRange { index: 3, .. })
    ));
    let one = generate(&GeneratorConfig {
        modalities: 1,
        visibility: vec![vec![0.0, 0.6, 0.9]],
        train: 2,
        val: 1,
        test: 1,
        ..GeneratorConfig::default()
    })
    .unwrap();
    assert!(matches!(
        train_teacher(&one, &model(1), &quick(1)),
        Err(Error::Config(_))
    ));
    assert!(matches!(
        distill_student(&one, &teacher, 0, &model(2), &quick(1)),
        Err(Error::Incompatible(_))
    ));
}
