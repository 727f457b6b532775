mod common;

use common::*;
use gridtopo::actions::{build_full_space, is_legal, Action, ActionSpace};
use gridtopo::env::{EnvConfig, Environment};
use gridtopo::imitation::{
    generate_dataset, label_state, pretrain, weighted_mse, weighted_mse_grad, Dataset, ImitationConfig, ImitationSample, Rollout,
};
use gridtopo::Error;

fn rows(n: usize) -> Vec<(f64, f64, f64)> {
    (0..n).map(|t| (80.0 + 60.0 * ((t as f64) / 4.0).sin(), 10.0, 30.0)).collect()
}

#[test]
fn labels_match_direct_simulation() {
    let grid = fixture_grid();
    let space = build_full_space(&grid);
    let chronic = fixture_chronic(&rows(12), vec![]);
    let (data, skipped) = generate_dataset(&grid, &[chronic.clone()], &dc(), &space, 8, Rollout::DoNothing);
    assert!(skipped.is_empty());
    assert_eq!(data.samples.len(), 8);
    let mut env = Environment::new(grid.clone(), chronic, dc()).unwrap();
    for sample in &data.samples {
        assert_eq!(sample.state, env.observe());
        for (i, a) in space.iter().enumerate() {
            let expected = if is_legal(&env, a).legal { env.simulate(a).unwrap().reward } else { -1.0 };
            assert_eq!(sample.labels[i], expected, "t = {}, action {i}", env.t());
        }
        env.step(&Action::DoNothing).unwrap();
    }
}

#[test]
fn illegal_actions_are_labelled_minus_one() {
    let env = fixture_env(&rows(3));
    let space = ActionSpace::new(vec![Action::DoNothing, Action::LineSwitch(3)]).unwrap();
    let labels = label_state(&env, &space);
    assert!(labels[0] > 0.0);
    assert_eq!(labels[1], -1.0);
}

#[test]
fn greedy_dataset_is_deterministic_and_round_trips() {
    let grid = fixture_grid();
    let space = build_full_space(&grid);
    let scenarios = vec![fixture_chronic(&rows(10), vec![]), fixture_chronic(&rows(7), vec![])];
    let (a, _) = generate_dataset(&grid, &scenarios, &dc(), &space, 100, Rollout::Greedy);
    let (b, _) = generate_dataset(&grid, &scenarios, &dc(), &space, 100, Rollout::Greedy);
    assert_eq!(a.to_bytes(), b.to_bytes());
    assert_eq!(a.samples.len(), 9 + 6);
    assert_eq!(a.manifest_hash, space.to_manifest(&grid).hash());
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.bin");
    a.save(&path).unwrap();
    assert_eq!(Dataset::load(&path).unwrap(), a);
    let mut bytes = a.to_bytes();
    bytes.pop();
    assert!(matches!(Dataset::from_bytes(&bytes), Err(Error::Incompatible(_))));
    let mut out = Vec::new();
    a.export_sample_csv(0, &mut out).unwrap();
    let text = String::from_utf8(out).unwrap();
    assert_eq!(text.lines().count(), 1 + a.state_dim + a.n_actions);
    assert!(a.export_sample_csv(999, Vec::new()).is_err());
}

#[test]
fn label_state_is_read_only() {
    let grid = ieee14();
    let env = Environment::new(grid.clone(), synthetic(&grid, 2), EnvConfig::default()).unwrap();
    let before = env.state().clone();
    let labels = label_state(&env, &ieee14_small_space(30));
    assert_eq!(labels.len(), 30);
    assert_eq!(env.state(), &before);
    assert!(labels.iter().all(|&l| (-1.0..=1.0).contains(&l)));
}

#[test]
fn weighted_mse_properties() {
    let label = [0.9, 0.1, 0.5, -1.0, 0.3];
    assert_eq!(weighted_mse(&label, &label, 2, 0.7, 0.3).unwrap(), 0.0);
    // top two by label are positions 0 and 2
    let mut pred = label;
    pred[1] += 1.0;
    assert_eq!(weighted_mse(&pred, &label, 2, 1.0, 0.0).unwrap(), 0.0);
    assert!((weighted_mse(&pred, &label, 2, 0.0, 1.0).unwrap() - 1.0 / 3.0).abs() < 1e-15);
    let mut pred = label;
    pred[2] -= 1.0;
    assert!((weighted_mse(&pred, &label, 2, 0.7, 0.3).unwrap() - 0.7 / 2.0).abs() < 1e-15);
    assert!(matches!(weighted_mse(&pred, &label, 0, 0.7, 0.3), Err(Error::Config(_))));
    assert!(matches!(weighted_mse(&pred, &label, 5, 0.7, 0.3), Err(Error::Config(_))));
    assert!(matches!(weighted_mse(&pred, &label, 2, 0.7, 0.7), Err(Error::Config(_))));
    assert!(matches!(weighted_mse(&pred[..4], &label, 2, 0.7, 0.3), Err(Error::Shape(_))));
}

#[test]
fn weighted_mse_gradient_matches_differences() {
    let label = [0.2, -0.4, 0.8, 0.1, 0.0, -1.0];
    let pred = [0.5, 0.3, -0.2, 0.9, 0.05, -0.7];
    let g = weighted_mse_grad(&pred, &label, 2, 0.7, 0.3).unwrap();
    let h = 1e-6;
    for i in 0..pred.len() {
        let (mut up, mut down) = (pred, pred);
        up[i] += h;
        down[i] -= h;
        let fd = (weighted_mse(&up, &label, 2, 0.7, 0.3).unwrap() - weighted_mse(&down, &label, 2, 0.7, 0.3).unwrap()) / (2.0 * h);
        assert!((fd - g[i]).abs() < 1e-8);
    }
}

fn ieee14_dataset(steps: usize) -> (Dataset, usize) {
    let grid = ieee14();
    let space = ieee14_small_space(40);
    let scenarios: Vec<_> = (0..2).map(|s| synthetic(&grid, s)).collect();
    let (data, _) = generate_dataset(&grid, &scenarios, &EnvConfig::default(), &space, steps, Rollout::Greedy);
    (data, space.len())
}

#[test]
fn ten_samples_are_memorized() {
    let (mut data, n_actions) = ieee14_dataset(5);
    data.samples.truncate(10);
    assert_eq!(data.samples.len(), 10);
    let grid = ieee14();
    let mut net = small_net(&grid, n_actions, 3);
    net.calibrate_input_stats(data.states().view());
    let cfg = ImitationConfig {
        epochs: 1500,
        batch_size: 10,
        val_fraction: 0.0,
        lr: 1e-3,
        ..Default::default()
    };
    let report = pretrain(&mut net, &data, &cfg).unwrap();
    let best = report.history.iter().map(|e| e.train).fold(f64::INFINITY, f64::min);
    assert!(best < 1e-3, "best training loss {best}");
    assert!(report.history.iter().all(|e| e.validation.is_none()));
}

#[test]
fn pretraining_reduces_validation_loss() {
    let (data, n_actions) = ieee14_dataset(60);
    let grid = ieee14();
    let mut net = small_net(&grid, n_actions, 5);
    net.calibrate_input_stats(data.states().view());
    let cfg = ImitationConfig {
        epochs: 10,
        ..Default::default()
    };
    let report = pretrain(&mut net, &data, &cfg).unwrap();
    let v = |e: usize| report.history[e - 1].validation.unwrap();
    assert!(v(10) < v(1), "epoch 1 {} vs epoch 10 {}", v(1), v(10));
    let mut again = small_net(&grid, n_actions, 5);
    again.calibrate_input_stats(data.states().view());
    pretrain(&mut again, &data, &cfg).unwrap();
    assert_eq!(again, net);
}

#[test]
fn pretrain_rejects_mismatched_inputs() {
    let grid = ieee14();
    let mut net = small_net(&grid, 5, 0);
    let empty = Dataset {
        state_dim: 3,
        n_actions: 5,
        manifest_hash: [0; 32],
        samples: vec![],
    };
    assert!(pretrain(&mut net, &empty, &ImitationConfig::default()).is_err());
    let wrong = Dataset {
        samples: vec![ImitationSample {
            state: vec![0.0; 3],
            labels: vec![0.0; 5],
        }],
        ..empty
    };
    assert!(matches!(pretrain(&mut net, &wrong, &ImitationConfig::default()), Err(Error::Incompatible(_))));
}
