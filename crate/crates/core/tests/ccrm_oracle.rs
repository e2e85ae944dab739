mod common;

use cfcml::ccrm::{
    compute_prototypes, loss_crossmodal_proto_anchor, loss_sample_anchor, loss_unimodal_proto_anchor,
    ccrm_losses, ContrastConfig,
};
use cfcml::params::ParamStore;
use cfcml::{CfcmlError, Matrix};
use common::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Instance {
    z: Vec<Vec<Vector>>,
    labels: Vec<usize>,
    n_classes: usize,
}

fn instance(rng: &mut ChaCha8Rng) -> Instance {
    let b = rng.random_range(1..=5);
    let m = rng.random_range(1..=4);
    let n_classes = rng.random_range(1..=4);
    let d = rng.random_range(2..=8);
    let labels = (0..b).map(|_| rng.random_range(0..n_classes)).collect();
    let z = (0..b).map(|_| (0..m).map(|_| random_vec(d, rng)).collect()).collect();
    Instance { z, labels, n_classes }
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() < 1e-6
}

#[test]
fn hundred_random_instances_match_nested_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let cfg = ContrastConfig {
        tau: 0.3,
        ..Default::default()
    };
    let mut with_losses = 0;
    for case in 0..100 {
        let inst = instance(&mut rng);
        let m = inst.z[0].len();
        let oracle = oracle_prototypes(&inst.z, &inst.labels, inst.n_classes);
        let stacked = stack(&inst.z);
        let bank = compute_prototypes(&stacked, &inst.labels, m, inst.n_classes).unwrap();
        for l in 0..inst.n_classes {
            match &oracle.cp[l] {
                None => assert!(bank.cp(l).is_none()),
                Some(cp) => {
                    for (a, b) in bank.cp(l).unwrap().iter().zip(cp) {
                        assert!(close(*a, *b), "case {case}: cp");
                    }
                    for j in 0..m {
                        let up = oracle.up[l][j].as_ref().unwrap();
                        for (a, b) in bank.up(l, j).unwrap().iter().zip(up) {
                            assert!(close(*a, *b), "case {case}: up");
                        }
                    }
                }
            }
        }
        let checks = [
            (
                oracle_sample_loss(&inst.z, &inst.labels, &oracle, cfg.tau),
                loss_sample_anchor(&stacked, &inst.labels, &bank, &cfg),
            ),
            (oracle_unimodal_loss(&oracle, cfg.tau), loss_unimodal_proto_anchor(&bank, &cfg)),
            (oracle_crossmodal_loss(&oracle, cfg.tau), loss_crossmodal_proto_anchor(&bank, &cfg)),
        ];
        for (k, (expected, got)) in checks.into_iter().enumerate() {
            match expected {
                Some(e) => {
                    let g = got.unwrap();
                    assert!(close(e, g), "case {case} loss {k}: {e} vs {g}");
                    assert!(g >= 0.0 && g.is_finite());
                    with_losses += 1;
                }
                None => assert!(matches!(got, Err(CfcmlError::DegenerateBatch(_))), "case {case} loss {k}"),
            }
        }
    }
    assert!(with_losses > 150, "too few non-degenerate instances: {with_losses}");
}

#[test]
fn crossmodal_prototype_is_mean_of_unimodal() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..50 {
        let inst = instance(&mut rng);
        let m = inst.z[0].len();
        let bank = compute_prototypes(&stack(&inst.z), &inst.labels, m, inst.n_classes).unwrap();
        for l in (0..inst.n_classes).filter(|&l| bank.present[l]) {
            for (c, &v) in bank.cp(l).unwrap().iter().enumerate() {
                let mean: f64 = (0..m).map(|j| bank.up(l, j).unwrap()[c]).sum::<f64>() / m as f64;
                assert!((mean - v).abs() < 1e-6);
            }
        }
    }
}

#[test]
fn two_sample_class_prototypes() {
    // Two class-0 samples with M = 2 and features a_j, b_j.
    let a = [vec![1.0, 2.0], vec![3.0, 0.0]];
    let b = [vec![-1.0, 0.0], vec![1.0, 4.0]];
    let z = Matrix::from_rows(&[&a[0], &a[1], &b[0], &b[1]]).unwrap();
    let bank = compute_prototypes(&z, &[0, 0], 2, 1).unwrap();
    assert_eq!(bank.up(0, 0).unwrap(), &[0.0, 1.0]);
    assert_eq!(bank.up(0, 1).unwrap(), &[2.0, 2.0]);
    assert_eq!(bank.cp(0).unwrap(), &[1.0, 1.5]);
}

#[test]
fn single_modality_collapses_unimodal_onto_crossmodal() {
    let z = Matrix::from_rows(&[[1.0, 0.2], [0.1, 1.0], [0.9, 0.0]]).unwrap();
    let bank = compute_prototypes(&z, &[0, 1, 0], 1, 2).unwrap();
    assert_eq!(bank.up, bank.cp);
    let cfg = ContrastConfig {
        tau: 0.5,
        ..Default::default()
    };
    // Positive at cos 1; the single negative is the other class prototype.
    let c = cosine(bank.up.row(0), bank.up.row(1));
    let expected = |c: f64| -((2f64).exp() / ((2f64).exp() + (c / 0.5).exp())).ln();
    let got = loss_unimodal_proto_anchor(&bank, &cfg).unwrap();
    assert!((got - expected(c)).abs() < 1e-9);
}

#[test]
fn literal_tau_placement_cancels_temperature() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let z: Vec<Vec<Vector>> = (0..4).map(|_| (0..2).map(|_| random_vec(3, &mut rng)).collect()).collect();
    let labels = [0, 1, 0, 1];
    let bank = compute_prototypes(&stack(&z), &labels, 2, 2).unwrap();
    let at = |tau| {
        let cfg = ContrastConfig {
            tau,
            tau_outside_exp: true,
            ..Default::default()
        };
        loss_crossmodal_proto_anchor(&bank, &cfg).unwrap()
    };
    assert!((at(0.07) - at(1.0)).abs() < 1e-12);
    let oracle = oracle_prototypes(&z, &labels, 2);
    assert!((at(1.0) - oracle_crossmodal_loss(&oracle, 1.0).unwrap()).abs() < 1e-9);
}

#[test]
fn same_modality_negatives_flag_restricts_the_set() {
    let z = Matrix::from_rows(&[[1.0, 0.0], [0.0, 1.0], [-1.0, 0.3], [0.4, -1.0]]).unwrap();
    let bank = compute_prototypes(&z, &[0, 1], 2, 2).unwrap();
    let base = ContrastConfig {
        tau: 1.0,
        ..Default::default()
    };
    let strict = ContrastConfig {
        up_negatives_same_modality_only: true,
        ..base
    };
    // Anchor up^0_0 = [1,0]: positive cp^0, negative up^1_0 only.
    let mut expected = 0.0;
    for (l, j) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
        let a = bank.up(l, j).unwrap();
        let p = (cosine(a, bank.cp(l).unwrap())).exp();
        let n = (cosine(a, bank.up(1 - l, j).unwrap())).exp();
        expected += -(p / (p + n)).ln() / 4.0;
    }
    let got = loss_unimodal_proto_anchor(&bank, &strict).unwrap();
    assert!((got - expected).abs() < 1e-12);
    assert!((loss_unimodal_proto_anchor(&bank, &base).unwrap() - got).abs() > 1e-6);
}

#[test]
fn own_modality_positive_flag() {
    let z = Matrix::from_rows(&[[1.0, 0.0], [0.0, 1.0], [-1.0, 0.3], [0.4, -1.0]]).unwrap();
    let labels = [0, 1];
    let bank = compute_prototypes(&z, &labels, 2, 2).unwrap();
    let cfg = ContrastConfig {
        tau: 1.0,
        sample_positives_own_modality: true,
        ..Default::default()
    };
    let mut expected = 0.0;
    for i in 0..2 {
        for j in 0..2 {
            let a = z.row(i * 2 + j);
            let y = labels[i];
            let p = cosine(a, bank.up(y, j).unwrap()).exp() + cosine(a, bank.cp(y).unwrap()).exp();
            let n = cosine(a, z.row((1 - i) * 2 + j)).exp();
            expected += -(p / (p + n)).ln() / 4.0;
        }
    }
    let got = loss_sample_anchor(&z, &labels, &bank, &cfg).unwrap();
    assert!((got - expected).abs() < 1e-12);
}

fn loss_values(z: &Matrix, labels: &[usize], m: usize, nc: usize, cfg: &ContrastConfig) -> [f64; 3] {
    let bank = compute_prototypes(z, labels, m, nc).unwrap();
    [
        loss_sample_anchor(z, labels, &bank, cfg).unwrap(),
        loss_unimodal_proto_anchor(&bank, cfg).unwrap(),
        loss_crossmodal_proto_anchor(&bank, cfg).unwrap(),
    ]
}

proptest! {
    #[test]
    fn losses_are_scale_invariant(seed in any::<u64>(), lambda in 0.01f64..100.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let z = random_matrix(8, 4, &mut rng);
        let labels = [0, 1, 2, 1];
        let cfg = ContrastConfig::default();
        let a = loss_values(&z, &labels, 2, 3, &cfg);
        let b = loss_values(&z.scale(lambda), &labels, 2, 3, &cfg);
        for k in 0..3 {
            prop_assert!(a[k] >= 0.0 && a[k].is_finite());
            prop_assert!((a[k] - b[k]).abs() < 1e-8);
        }
    }
}

#[test]
fn loss_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut store = ParamStore::new();
    let id = store.register("z", random_matrix(9, 4, &mut rng));
    let labels = [0, 1, 2];
    let cfg = ContrastConfig {
        tau: 0.2,
        ..Default::default()
    };
    for which in 0..3 {
        let report = check_param_gradients(&mut store, 1e-4, 1e-8, |g, p| {
            let l = ccrm_losses(g, p[id], &labels, 3, 3, &cfg).unwrap();
            [l.sam, l.up, l.cp][which]
        });
        assert!(report.max() < 1e-3, "loss {which}: {:?}", report.worst());
    }
}

#[test]
fn stop_grad_keeps_values_and_cuts_prototype_paths() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let z = random_matrix(6, 4, &mut rng);
    let labels = [0, 1, 1];
    let run = |stop: bool| {
        let cfg = ContrastConfig {
            stop_grad_prototypes: stop,
            ..Default::default()
        };
        let mut g = cfcml::Graph::new();
        let v = g.variable(z.clone());
        let l = ccrm_losses(&mut g, v, &labels, 2, 2, &cfg).unwrap();
        let grads = g.backward(l.cp);
        (g.value(l.sam).item(), grads.get(v).cloned())
    };
    let (free_val, free_grad) = run(false);
    let (stop_val, stop_grad) = run(true);
    assert_eq!(free_val, stop_val);
    // The crossmodal loss only sees features through prototypes.
    assert!(free_grad.unwrap().data().iter().any(|x| x.abs() > 0.0));
    assert!(stop_grad.is_none_or(|g| g.data().iter().all(|x| *x == 0.0)));
}
