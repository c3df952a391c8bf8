//! End-to-end training checks on tiny phantom splits.

use cotrain_seg::losses::rampup_weight;
use cotrain_seg::phantom::{generate_split, DatasetSplit, PhantomConfig};
use cotrain_seg::segnet::ModelParams;
use cotrain_seg::trainer::{
    cotrain, generate_pseudo_dataset, pretrain_individual, Mode, PseudoDataset, TeacherSource,
    TrainConfig,
};

fn tiny() -> (DatasetSplit, PseudoDataset, TrainConfig) {
    let phantoms = PhantomConfig {
        organs: 2,
        height: 16,
        width: 16,
        train_per_organ: 6,
        validation: 2,
        test: 2,
        ..PhantomConfig::default()
    };
    let split = generate_split(5, &phantoms).unwrap();
    let cfg = TrainConfig {
        epochs: 2,
        batch_size: 4,
        base_channels: 4,
        seed: 5,
        ema_alpha: 0.9,
        ..TrainConfig::default()
    };
    let models: Vec<ModelParams> = pretrain_individual(
        &split,
        &TrainConfig {
            epochs: 1,
            ..cfg.clone()
        },
    )
    .unwrap()
    .into_iter()
    .map(|m| m.params)
    .collect();
    let pseudo = generate_pseudo_dataset(&models, &split).unwrap();
    (split, pseudo, cfg)
}

#[test]
fn fused_labels_keep_ground_truth() {
    let (split, pseudo, _) = tiny();
    for (k, part) in split.train.iter().enumerate() {
        let organ = (k + 1) as u8;
        for (s, fused) in part.iter().zip(&pseudo.fused[k]) {
            for (&t, &f) in s.mask.labels().iter().zip(fused.labels()) {
                assert!(t != organ || f == organ);
                assert!(t == organ || f != organ);
            }
        }
    }
}

#[test]
fn zero_soft_weight_reproduces_self_training_for_the_first_network() {
    let (split, pseudo, cfg) = tiny();
    let single = cotrain(
        &split,
        &pseudo,
        &TrainConfig {
            mode: Mode::SelfTraining,
            ..cfg.clone()
        },
    )
    .unwrap();
    let pair = cotrain(
        &split,
        &pseudo,
        &TrainConfig {
            mode: Mode::CtWaRm,
            lambda_soft: 0.0,
            ..cfg
        },
    )
    .unwrap();
    assert_eq!(single.log.iterations.len(), pair.log.iterations.len());
    for (a, b) in single.log.iterations.iter().zip(&pair.log.iterations) {
        assert_eq!(a.losses[0].focal, b.losses[0].focal);
        assert_eq!(a.losses[0].dice, b.losses[0].dice);
    }
    assert_eq!(single.nets[0].student, pair.nets[0].student);
    assert_eq!(pair.nets.len(), 2);
}

#[test]
fn cross_modes_never_teach_themselves() {
    let (split, pseudo, cfg) = tiny();
    for mode in [Mode::Ct, Mode::CtWa, Mode::CtWaRm] {
        let out = cotrain(
            &split,
            &pseudo,
            &TrainConfig {
                mode,
                epochs: 1,
                ..cfg.clone()
            },
        )
        .unwrap();
        assert!(!out.log.iterations.is_empty());
        for r in &out.log.iterations {
            for (net, src) in r.teachers.iter().enumerate() {
                match src {
                    TeacherSource::OtherStudent(j) | TeacherSource::OtherAverage(j) => {
                        assert_ne!(*j, net, "{mode} iteration {}", r.iteration)
                    }
                    other => panic!("{mode} uses {other:?}"),
                }
            }
        }
    }
}

#[test]
fn rampup_rises_monotonically_over_a_run() {
    let (split, pseudo, cfg) = tiny();
    let out = cotrain(
        &split,
        &pseudo,
        &TrainConfig {
            mode: Mode::CtWa,
            ..cfg
        },
    )
    .unwrap();
    let its = &out.log.iterations;
    assert_eq!(its[0].iteration, 0);
    assert_eq!(its[0].rampup, (-5f64).exp());
    assert!(its.windows(2).all(|w| w[0].rampup <= w[1].rampup));
    // 6 iterations, ramp-up length ceil(0.3·6) = 2
    assert_eq!(its.len(), 6);
    assert_eq!(its[1].rampup, rampup_weight(1, 2));
    assert!(its[2..].iter().all(|r| r.rampup == 1.0));
}

#[test]
fn training_is_deterministic() {
    let (split, pseudo, cfg) = tiny();
    let a = cotrain(&split, &pseudo, &cfg).unwrap();
    let b = cotrain(&split, &pseudo, &cfg).unwrap();
    assert_eq!(a.nets, b.nets);
    assert_eq!(a.log, b.log);
}

#[test]
fn individual_mode_is_not_cotrained() {
    let (split, pseudo, cfg) = tiny();
    assert!(cotrain(
        &split,
        &pseudo,
        &TrainConfig {
            mode: Mode::Individual,
            ..cfg
        }
    )
    .is_err());
}
