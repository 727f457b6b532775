mod common;

use std::sync::Arc;

use common::*;
use gridtopo::actions::{
    build_full_space, count_unfiltered_node_splits, enumerate_node_actions, is_legal, reduce_space, IllegalReason, sample_states, Action,
    ActionManifest, ActionSpace, NodeSplit,
};
use gridtopo::chronics::{generate_synthetic, SyntheticConfig};
use gridtopo::env::{EnvConfig, Environment};
use gridtopo::grid::GridModel;
use gridtopo::Error;

fn is_combo(a: &Action) -> bool {
    matches!(a, Action::Combo { .. })
}

#[test]
fn full_space_counts() {
    let grid = GridModel::ieee14();
    assert_eq!(count_unfiltered_node_splits(&grid), 156);
    assert_eq!(enumerate_node_actions(&grid).len(), 137);
    let full = build_full_space(&grid);
    assert_eq!(full.len(), 2628);
    assert_eq!(full.get(0), Some(&Action::DoNothing));
    assert_eq!(full.count_where(|a| matches!(a, Action::NodeSplit(_))), 136);
    assert_eq!(full.count_where(|a| matches!(a, Action::LineSwitch(_))), 19);
    assert_eq!(full.count_where(is_combo), 2628 - 1 - 136 - 19);
}

#[test]
fn reduced_space_keeps_singles_and_budget() {
    let grid = ieee14();
    let full = build_full_space(&grid);
    let chronic = Arc::new(generate_synthetic(&grid, &SyntheticConfig::default()).unwrap());
    let states = sample_states(&grid, &[chronic], &EnvConfig::default(), 144, 20).unwrap();
    assert_eq!(states.len(), 2);
    let reduced = reduce_space(&full, &states, 76).unwrap();
    assert_eq!(reduced.len(), 232);
    assert_eq!(reduced.count_where(is_combo), 76);
    for a in full.iter().filter(|a| !is_combo(a)) {
        assert!(reduced.index_of(a).is_some());
    }
    assert_eq!(reduce_space(&full, &states, 76).unwrap(), reduced);
    assert_eq!(reduce_space(&full, &states, 0).unwrap().len(), 156);
    assert!(matches!(reduce_space(&full, &states, 5000), Err(Error::Config(_))));
    assert!(reduce_space(&full, &[], 3).is_err());
}

#[test]
fn manifest_round_trip_preserves_indices_and_hash() {
    let grid = GridModel::ieee14();
    let full = build_full_space(&grid);
    let manifest = full.to_manifest(&grid);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("actions.json");
    manifest.save(&path).unwrap();
    let back = ActionManifest::load(&path).unwrap();
    assert_eq!(back.hash(), manifest.hash());
    let space = ActionSpace::from_manifest(&grid, &back).unwrap();
    assert_eq!(space, full);
    for (i, a) in full.iter().enumerate() {
        assert_eq!(space.index_of(a), Some(i));
    }
}

#[test]
fn corrupted_manifests_are_rejected() {
    let grid = GridModel::ieee14();
    let full = build_full_space(&grid);
    let good = full.to_manifest(&grid);

    let mut bad_line = good.clone();
    bad_line.actions[full.len() - 1].line = Some("line_99_100".into());
    assert!(matches!(ActionSpace::from_manifest(&grid, &bad_line), Err(Error::CorruptedAction(_))));

    let mut bad_width = good.clone();
    bad_width.actions[1].assignment.as_mut().unwrap().push(1);
    assert!(matches!(ActionSpace::from_manifest(&grid, &bad_width), Err(Error::CorruptedAction(_))));

    let mut bad_kind = good.clone();
    bad_kind.actions[1].line = Some(grid.lines()[0].id.clone());
    assert!(matches!(ActionSpace::from_manifest(&grid, &bad_kind), Err(Error::CorruptedAction(_))));

    let mut reordered = good.clone();
    reordered.actions.swap(1, 2);
    assert_ne!(reordered.hash(), good.hash());

    assert!(ActionSpace::new(vec![Action::LineSwitch(0)]).is_err());
    assert!(ActionSpace::new(vec![Action::DoNothing, Action::LineSwitch(0), Action::LineSwitch(0)]).is_err());
}

#[test]
fn every_node_action_keeps_both_bars_fed_by_lines() {
    let grid = GridModel::ieee14();
    for a in enumerate_node_actions(&grid) {
        let Action::NodeSplit(NodeSplit { sub, assignment }) = a else { panic!("not a split") };
        assert!(assignment.contains(&1) && assignment.contains(&2));
        for bar in [1, 2] {
            let has_line = grid.slots(sub).iter().zip(&assignment).any(|(s, &b)| b == bar && s.line().is_some());
            assert!(has_line, "sub {sub}: bar {bar} has no line");
        }
    }
}

#[test]
fn combo_legality_needs_both_parts() {
    let mut env = fixture_env(&[(50.0, 10.0, 0.0); 6]);
    // line b and L2 on bar 2 of sub 2, still fed from sub 1
    let split = NodeSplit {
        sub: 1,
        assignment: vec![1, 2, 1, 1, 2],
    };
    let combo = Action::Combo { node: split.clone(), line: 1 };
    assert!(is_legal(&env, &Action::NodeSplit(split.clone())).legal);
    assert_eq!(is_legal(&env, &combo).reason, Some(IllegalReason::Islanding));
    env.step(&Action::LineSwitch(0)).unwrap();
    let combo = Action::Combo { node: split, line: 0 };
    assert_eq!(is_legal(&env, &combo).reason, Some(IllegalReason::LineCooldown));
}

#[test]
fn default_day_survives_do_nothing_in_dc() {
    let grid = ieee14();
    let chronic = Arc::new(generate_synthetic(&grid, &SyntheticConfig::default()).unwrap());
    let mut env = Environment::new(grid, chronic, dc()).unwrap();
    while !env.is_done() {
        env.step(&Action::DoNothing).unwrap();
    }
    assert!(env.game_over().is_none());
    assert_eq!(env.state().steps, 287);
}
