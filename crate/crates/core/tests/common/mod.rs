#![allow(dead_code)]

use std::sync::Arc;

use chrono::{Duration, NaiveDate};
use gridtopo::chronics::{Chronic, Maintenance};
use gridtopo::env::{EnvConfig, Environment};
use gridtopo::grid::GridModel;
use gridtopo::powerflow::{FlowMode, Injections};

/// Voltages of the bundled 14-bus model at its textbook operating point
/// (loads nominal, gen_2 at 40 MW, condensers at 0), solved offline with an
/// independent nonlinear solver. `(vm p.u., va rad)` per substation.
pub const IEEE14_REFERENCE: [(f64, f64); 14] = [
    (1.06, 0.0),
    (1.045, -0.0865075585013979),
    (1.01, -0.2204844168917646),
    (1.0260926984133814, -0.18091993696733336),
    (1.0325979487861965, -0.15614982611340297),
    (1.07, -0.2596941404673655),
    (1.0448119747522404, -0.2347521990958617),
    (1.09, -0.23475219909586173),
    (1.0276308935654503, -0.26301900439906517),
    (1.0275433529250517, -0.26735186739638966),
    (1.0449433165091533, -0.26552460562188906),
    (1.0530173102591336, -0.2743601158261605),
    (1.0462341058606506, -0.27468450443302284),
    (1.017433253028353, -0.2861291232897452),
];

pub fn ieee14() -> Arc<GridModel> {
    Arc::new(GridModel::ieee14())
}

pub fn ieee14_base_injections(grid: &GridModel) -> Injections {
    Injections {
        load_p: grid.loads().iter().map(|l| l.p_nominal).collect(),
        load_q: grid.loads().iter().map(|l| l.q_nominal).collect(),
        gen_p: grid.generators().iter().map(|g| if g.id == "gen_2" { 40.0 } else { 0.0 }).collect(),
        gen_v: grid.generators().iter().map(|g| g.v_setpoint.unwrap()).collect(),
    }
}

/// Four substations with kV chosen so that DC ratings in MW equal the
/// ampere figures.
///
/// ```text
///   sub 1 (slack g1) ==a,b== sub 2 (load L2) --c-- sub 3 (g3a, g3b)
///                              |
///                              d
///                              |
///                            sub 4 (load L4)
/// ```
/// `a` has half the reactance of `b`, so it carries two thirds of the
/// transfer from sub 1.
pub fn fixture_grid() -> Arc<GridModel> {
    let kv = 1000.0 / 3f64.sqrt();
    let json = format!(
        r#"{{
  "name": "fixture",
  "base_mva": 100.0,
  "slack_sub": 1,
  "substations": [
    {{"id": 1, "name": "s1", "base_kv": {kv}}},
    {{"id": 2, "name": "s2", "base_kv": {kv}}},
    {{"id": 3, "name": "s3", "base_kv": {kv}}},
    {{"id": 4, "name": "s4", "base_kv": {kv}}}
  ],
  "lines": [
    {{"id": "a", "from_sub": 1, "to_sub": 2, "r": 0.0, "x": 0.1, "b": 0.0, "thermal_limit": 100.0}},
    {{"id": "b", "from_sub": 1, "to_sub": 2, "r": 0.0, "x": 0.2, "b": 0.0, "thermal_limit": 300.0}},
    {{"id": "c", "from_sub": 2, "to_sub": 3, "r": 0.0, "x": 0.1, "b": 0.0, "thermal_limit": 100.0}},
    {{"id": "d", "from_sub": 2, "to_sub": 4, "r": 0.0, "x": 0.1, "b": 0.0, "thermal_limit": 500.0}}
  ],
  "generators": [
    {{"id": "g1", "sub": 1, "p_max": 1000.0, "v_setpoint": 1.0}},
    {{"id": "g3a", "sub": 3, "p_max": 200.0, "v_setpoint": 1.0}},
    {{"id": "g3b", "sub": 3, "p_max": 200.0, "v_setpoint": 1.0}}
  ],
  "loads": [
    {{"id": "L2", "sub": 2, "p_nominal": 100.0, "q_nominal": 0.0}},
    {{"id": "L4", "sub": 4, "p_nominal": 10.0, "q_nominal": 0.0}}
  ]
}}"#
    );
    Arc::new(GridModel::from_json(&json).unwrap())
}

/// One row per step: `(L2 MW, L4 MW, output of each sub-3 generator MW)`.
pub fn fixture_chronic(rows: &[(f64, f64, f64)], maintenance: Vec<Maintenance>) -> Arc<Chronic> {
    let start = NaiveDate::from_ymd_opt(2019, 1, 7).unwrap().and_hms_opt(0, 0, 0).unwrap();
    Arc::new(Chronic {
        load_p: rows.iter().map(|r| vec![r.0, r.1]).collect(),
        load_q: rows.iter().map(|_| vec![0.0, 0.0]).collect(),
        gen_p: rows.iter().map(|r| vec![0.0, r.2, r.2]).collect(),
        gen_v: rows.iter().map(|_| vec![1.0; 3]).collect(),
        maintenance,
        timestamps: (0..rows.len()).map(|t| start + Duration::minutes(5 * t as i64)).collect(),
    })
}

pub fn dc() -> EnvConfig {
    EnvConfig {
        mode: FlowMode::Dc,
        ..EnvConfig::default()
    }
}

pub fn fixture_env(rows: &[(f64, f64, f64)]) -> Environment {
    Environment::new(fixture_grid(), fixture_chronic(rows, vec![]), dc()).unwrap()
}

/// First `n` actions of the full 14-bus space: do-nothing and node splits.
pub fn ieee14_small_space(n: usize) -> gridtopo::actions::ActionSpace {
    let full = gridtopo::actions::build_full_space(&GridModel::ieee14());
    gridtopo::actions::ActionSpace::new(full.actions()[..n].to_vec()).unwrap()
}

pub fn synthetic(grid: &GridModel, seed: u64) -> Arc<Chronic> {
    let cfg = gridtopo::chronics::SyntheticConfig {
        seed,
        load_scale: 1.1,
        ..Default::default()
    };
    Arc::new(gridtopo::chronics::generate_synthetic(grid, &cfg).unwrap())
}

/// Small randomly initialized network sized for `grid` and `n_actions`.
pub fn small_net(grid: &GridModel, n_actions: usize, seed: u64) -> gridtopo::nn::Network {
    let cfg = gridtopo::nn::NetConfig {
        input_dim: gridtopo::env::observation_len(grid),
        trunk: vec![32],
        head_hidden: 16,
        n_actions,
        seed,
        init: Default::default(),
    };
    gridtopo::nn::Network::new(cfg).unwrap()
}
