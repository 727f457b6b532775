use gridtopo::actions::{enumerate_node_actions, Action, NodeSplit};
use gridtopo::grid::{apply_action, connectivity_check, electrical_nodes, GridModel, Slot, TopologyState, COOLDOWN_STEPS};
use proptest::prelude::*;

/// Occupied bus-bars counted straight from the assignment vectors.
fn occupied_bars(grid: &GridModel, topo: &TopologyState) -> Vec<(usize, u8)> {
    let mut out = Vec::new();
    for s in 0..grid.n_subs() {
        for bar in [1u8, 2] {
            let used = grid.slots(s).iter().zip(&topo.bus_assignment[s]).any(|(slot, &b)| {
                b == bar && slot.line().is_none_or(|l| topo.line_in_service[l])
            });
            if used {
                out.push((s, bar));
            }
        }
    }
    out
}

fn find(parent: &mut [usize], x: usize) -> usize {
    let mut r = x;
    while parent[r] != r {
        r = parent[r];
    }
    let mut y = x;
    while parent[y] != r {
        let next = parent[y];
        parent[y] = r;
        y = next;
    }
    r
}

/// Union-find component count over occupied bars joined by in-service lines.
fn union_find_components(grid: &GridModel, topo: &TopologyState) -> usize {
    let bars = occupied_bars(grid, topo);
    let pos = |k: (usize, u8)| bars.iter().position(|&b| b == k).unwrap();
    let mut parent: Vec<usize> = (0..bars.len()).collect();
    for l in 0..grid.n_lines() {
        if !topo.line_in_service[l] {
            continue;
        }
        let [(a, sa), (b, sb)] = grid.line_ends(l);
        let x = pos((a, topo.bus_assignment[a][sa]));
        let y = pos((b, topo.bus_assignment[b][sb]));
        let (rx, ry) = (find(&mut parent, x), find(&mut parent, y));
        parent[rx] = ry;
    }
    (0..bars.len()).filter(|&i| find(&mut parent, i) == i).count()
}

fn random_topology(grid: &GridModel) -> impl Strategy<Value = TopologyState> {
    let slots: Vec<usize> = (0..grid.n_subs()).map(|s| grid.slots(s).len()).collect();
    let n_lines = grid.n_lines();
    let grid = grid.clone();
    (
        slots
            .into_iter()
            .map(|k| prop::collection::vec(1u8..=2, k))
            .collect::<Vec<_>>(),
        prop::collection::vec(prop::bool::weighted(0.85), n_lines),
    )
        .prop_map(move |(bus_assignment, line_in_service)| TopologyState {
            bus_assignment,
            line_in_service,
            ..TopologyState::default_for(&grid)
        })
}

#[test]
fn ieee14_shape() {
    let grid = GridModel::ieee14();
    assert_eq!(grid.n_subs(), 14);
    assert_eq!(grid.n_lines(), 20);
    assert_eq!(grid.n_gens(), 5);
    assert_eq!(grid.n_loads(), 11);
    assert_eq!(grid.n_slots_total(), 56);
    let default = TopologyState::default_for(&grid);
    assert_eq!(electrical_nodes(&grid, &default).len(), 14);
    assert_eq!(connectivity_check(&grid, &default).component_count, 1);
}

#[test]
fn slot_order_puts_lines_first() {
    let grid = GridModel::ieee14();
    for s in 0..grid.n_subs() {
        let slots = grid.slots(s);
        let first_non_line = slots.iter().position(|x| x.line().is_none()).unwrap_or(slots.len());
        assert!(slots[first_non_line..].iter().all(|x| x.line().is_none()));
        let gens_then_loads = slots[first_non_line..]
            .windows(2)
            .all(|w| !matches!((w[0], w[1]), (Slot::Load(_), Slot::Generator(_))));
        assert!(gens_then_loads);
    }
}

#[test]
fn splitting_sub_4_adds_one_node() {
    let grid = GridModel::ieee14();
    let sub = grid.sub_by_id(4).unwrap();
    let topo = TopologyState::default_for(&grid);
    for a in enumerate_node_actions(&grid).into_iter().filter(|a| a.touched_sub() == Some(sub)) {
        let next = apply_action(&grid, &topo, &a).unwrap();
        assert_eq!(electrical_nodes(&grid, &next).len(), 15);
        assert_eq!(next.sub_cooldown[sub], COOLDOWN_STEPS);
    }
}

#[test]
fn bar_holding_only_an_open_line_yields_no_node() {
    let grid = GridModel::ieee14();
    let sub = grid.sub_by_id(4).unwrap();
    let mut topo = TopologyState::default_for(&grid);
    let l = grid.slots(sub)[0].line().expect("first slot is a line");
    topo.line_in_service[l] = false;
    topo.bus_assignment[sub][0] = 2;
    assert_eq!(electrical_nodes(&grid, &topo).len(), 14);
}

#[test]
fn cutting_a_leaf_feeder_makes_two_components() {
    let grid = GridModel::ieee14();
    let l = grid.line_by_id("line_7_8").unwrap();
    let next = apply_action(&grid, &TopologyState::default_for(&grid), &Action::LineSwitch(l)).unwrap();
    assert_eq!(connectivity_check(&grid, &next).component_count, 2);
    assert_eq!(next.line_cooldown[l], COOLDOWN_STEPS);
}

#[test]
fn do_nothing_is_identity_and_switch_is_involution() {
    let grid = GridModel::ieee14();
    let t0 = TopologyState::default_for(&grid);
    assert_eq!(apply_action(&grid, &t0, &Action::DoNothing).unwrap(), t0);
    let mut t1 = apply_action(&grid, &t0, &Action::LineSwitch(3)).unwrap();
    for _ in 0..COOLDOWN_STEPS {
        t1.tick();
    }
    let t2 = apply_action(&grid, &t1, &Action::LineSwitch(3)).unwrap();
    assert_eq!(t2.line_in_service, t0.line_in_service);
}

#[test]
fn unknown_ids_are_structural_errors() {
    let grid = GridModel::ieee14();
    let t0 = TopologyState::default_for(&grid);
    assert!(apply_action(&grid, &t0, &Action::LineSwitch(99)).is_err());
    let bad = Action::NodeSplit(NodeSplit {
        sub: 3,
        assignment: vec![1, 2],
    });
    assert!(apply_action(&grid, &t0, &bad).is_err());
}

#[test]
fn invalid_grids_are_rejected() {
    let spec = GridModel::ieee14().spec().clone();
    let mut a = spec.clone();
    a.lines[0].x = 0.0;
    assert!(GridModel::from_spec(a).is_err());
    let mut b = spec.clone();
    b.lines[1].thermal_limit = 0.0;
    assert!(GridModel::from_spec(b).is_err());
    let mut c = spec.clone();
    c.loads[0].sub = 99;
    assert!(GridModel::from_spec(c).is_err());
    let mut d = spec.clone();
    d.generators[1].id = d.generators[0].id.clone();
    assert!(GridModel::from_spec(d).is_err());
    let mut e = spec;
    e.slack_sub = 42;
    assert!(GridModel::from_spec(e).is_err());
}

#[test]
fn json_round_trip() {
    let grid = GridModel::ieee14();
    let again = GridModel::from_json(&grid.to_json()).unwrap();
    assert_eq!(again.spec(), grid.spec());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn nodes_and_components_match_oracles(topo in random_topology(&GridModel::ieee14())) {
        let grid = GridModel::ieee14();
        let nodes = electrical_nodes(&grid, &topo);
        let bars = occupied_bars(&grid, &topo);
        prop_assert_eq!(nodes.len(), bars.len());
        let keys: Vec<(usize, u8)> = (0..nodes.len()).map(|n| nodes.key(n)).collect();
        prop_assert_eq!(&keys, &bars);
        prop_assert_eq!(electrical_nodes(&grid, &topo), nodes);

        let conn = connectivity_check(&grid, &topo);
        prop_assert_eq!(conn.component_count, union_find_components(&grid, &topo));
        prop_assert_eq!(conn.component.len(), keys.len());
        prop_assert!(conn.component.iter().all(|&c| c < conn.component_count));
        for c in 0..conn.component_count {
            prop_assert!(conn.component.contains(&c));
        }
    }

    #[test]
    fn action_then_inverse_restores(sub in 0usize..14, line in 0usize..20, pick in any::<prop::sample::Index>()) {
        let grid = GridModel::ieee14();
        let t0 = TopologyState::default_for(&grid);
        let node_actions: Vec<Action> = enumerate_node_actions(&grid).into_iter().filter(|a| a.touched_sub() == Some(sub)).collect();
        prop_assume!(!node_actions.is_empty());
        let Action::NodeSplit(split) = pick.get(&node_actions).clone() else { unreachable!() };
        let combo = Action::Combo { node: split.clone(), line };
        let mut t1 = apply_action(&grid, &t0, &combo).unwrap();
        for _ in 0..COOLDOWN_STEPS {
            t1.tick();
        }
        let undo = Action::Combo {
            node: NodeSplit { sub, assignment: t0.bus_assignment[sub].clone() },
            line,
        };
        let t2 = apply_action(&grid, &t1, &undo).unwrap();
        prop_assert_eq!(&t2.bus_assignment, &t0.bus_assignment);
        prop_assert_eq!(&t2.line_in_service, &t0.line_in_service);
    }
}
