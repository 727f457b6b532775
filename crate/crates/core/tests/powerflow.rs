mod common;

use std::time::Instant;

use common::*;
use gridtopo::grid::{GridModel, GridSpec, TopologyState};
use gridtopo::powerflow::{
    build_case, line_loading, max_mismatch, solve_ac, solve_dc, AcOptions, FlowMode, Injections, SolveStatus, Start,
};
use num_complex::Complex64;

fn base_case(grid: &GridModel) -> gridtopo::powerflow::PowerFlowCase {
    build_case(grid, &TopologyState::default_for(grid), &ieee14_base_injections(grid)).unwrap()
}

#[test]
fn ieee14_matches_reference_solution() {
    let grid = GridModel::ieee14();
    let case = base_case(&grid);
    let sol = solve_ac(&case, AcOptions::default(), Start::Flat);
    assert_eq!(sol.status, SolveStatus::Converged);
    assert!(sol.iterations <= 10, "{} iterations", sol.iterations);
    assert!(sol.max_mismatch <= 1e-8);
    for (k, &(vm, va)) in IEEE14_REFERENCE.iter().enumerate() {
        assert_eq!(sol.keys[k], (k, 1));
        assert!((sol.vm[k] - vm).abs() < 1e-4, "vm at {k}: {} vs {vm}", sol.vm[k]);
        assert!((sol.va[k] - va).abs() < 1e-4, "va at {k}: {} vs {va}", sol.va[k]);
    }
}

#[test]
fn ieee14_solve_is_fast() {
    let grid = GridModel::ieee14();
    let case = base_case(&grid);
    let n = 50;
    let t0 = Instant::now();
    for _ in 0..n {
        assert!(solve_ac(&case, AcOptions::default(), Start::Flat).converged);
    }
    let per = t0.elapsed().as_secs_f64() * 1e3 / n as f64;
    assert!(per < 10.0, "{per:.3} ms per solve");
}

/// Loadings recomputed from the reference voltages with the pi model.
#[test]
fn ieee14_loadings_match_reference_recomputation() {
    let grid = GridModel::ieee14();
    let sol = solve_ac(&base_case(&grid), AcOptions::default(), Start::Flat);
    let rho = line_loading(&sol, &grid);
    let v: Vec<Complex64> = IEEE14_REFERENCE.iter().map(|&(m, a)| Complex64::from_polar(m, a)).collect();
    for (l, line) in grid.lines().iter().enumerate() {
        let (i, j) = (line.from_sub - 1, line.to_sub - 1);
        let y = Complex64::new(1.0, 0.0) / Complex64::new(line.r, line.x);
        let sh = Complex64::new(0.0, line.b / 2.0);
        let i_or = (v[i] - v[j]) * y + v[i] * sh;
        let i_ex = (v[j] - v[i]) * y + v[j] * sh;
        let amps = i_or.norm().max(i_ex.norm()) * grid.base_current_amps(i);
        let expected = amps / line.thermal_limit;
        assert!((rho[l] - expected).abs() < 1e-6, "{}: {} vs {expected}", line.id, rho[l]);
    }
}

#[test]
fn residual_is_self_consistent_and_balanced() {
    let grid = GridModel::ieee14();
    let case = base_case(&grid);
    let sol = solve_ac(&case, AcOptions::default(), Start::Flat);
    assert!((max_mismatch(&case, &sol.vm, &sol.va) - sol.max_mismatch).abs() < 1e-12);
    let injected: f64 = sol.node_p.iter().sum::<f64>() * case.base_mva;
    let losses: f64 = (0..grid.n_lines()).map(|l| sol.p_or[l] + sol.p_ex[l]).sum();
    assert!(losses > 0.0);
    assert!((injected - losses).abs() / case.base_mva < 1e-6);
}

#[test]
fn warm_and_flat_start_agree() {
    let grid = GridModel::ieee14();
    let case = base_case(&grid);
    let flat = solve_ac(&case, AcOptions::default(), Start::Flat);
    let mut inj = ieee14_base_injections(&grid);
    for p in &mut inj.load_p {
        *p *= 1.05;
    }
    let case2 = build_case(&grid, &TopologyState::default_for(&grid), &inj).unwrap();
    let cold = solve_ac(&case2, AcOptions::default(), Start::Flat);
    let warm = solve_ac(&case2, AcOptions::default(), Start::Warm(&flat));
    assert!(warm.converged && cold.converged);
    assert!(warm.iterations <= cold.iterations);
    for k in 0..case2.len() {
        assert!((warm.vm[k] - cold.vm[k]).abs() < 1e-8);
        assert!((warm.va[k] - cold.va[k]).abs() < 1e-8);
    }
}

#[test]
fn dc_matches_ac_on_lossless_light_case() {
    let mut spec: GridSpec = GridModel::ieee14().spec().clone();
    for l in &mut spec.lines {
        l.r = 0.0;
        l.b = 0.0;
    }
    let grid = GridModel::from_spec(spec).unwrap();
    let mut inj = Injections::zeros(&grid);
    for (k, load) in grid.loads().iter().enumerate() {
        inj.load_p[k] = 0.1 * load.p_nominal;
    }
    inj.gen_p[1] = 4.0;
    let case = build_case(&grid, &TopologyState::default_for(&grid), &inj).unwrap();
    let ac = solve_ac(&case, AcOptions::default(), Start::Flat);
    let dc = solve_dc(&case);
    assert!(ac.converged && dc.converged);
    assert_eq!(dc.mode, FlowMode::Dc);
    for k in 0..case.len() {
        assert!((ac.va[k] - dc.va[k]).abs() < 1e-2);
        assert_eq!(dc.vm[k], 1.0);
    }
    for l in 0..grid.n_lines() {
        assert!((dc.p_or[l] + dc.p_ex[l]).abs() < 1e-12);
    }
    let balance: f64 = dc.node_p.iter().sum();
    assert!(balance.abs() < 1e-12);
}

#[test]
fn per_unit_injection_and_zero_case() {
    let grid = fixture_grid();
    let mut inj = Injections::zeros(&grid);
    let case = build_case(&grid, &TopologyState::default_for(&grid), &inj).unwrap();
    assert!(case.nodes.iter().all(|n| n.p == 0.0 && n.q == 0.0));
    let dc = solve_dc(&case);
    assert!(dc.va.iter().all(|&a| a == 0.0));
    assert!(dc.p_or.iter().all(|&p| p == 0.0));
    inj.load_p[0] = 100.0;
    let case = build_case(&grid, &TopologyState::default_for(&grid), &inj).unwrap();
    let node = case.nodes.iter().find(|n| n.key == (1, 1)).unwrap();
    assert_eq!(node.p, -1.0);
}

/// Direct per-substation summation of a synthetic row.
#[test]
fn injections_match_per_node_summation() {
    let grid = GridModel::ieee14();
    let chronic = gridtopo::chronics::generate_synthetic(&grid, &Default::default()).unwrap();
    let inj = chronic.injections_at(100).unwrap();
    let case = build_case(&grid, &TopologyState::default_for(&grid), &inj).unwrap();
    let mut p = vec![0.0; grid.n_subs()];
    let mut q = vec![0.0; grid.n_subs()];
    for (k, load) in grid.loads().iter().enumerate() {
        p[grid.sub_by_id(load.sub).unwrap()] -= inj.load_p[k];
        q[grid.sub_by_id(load.sub).unwrap()] -= inj.load_q[k];
    }
    for (k, g) in grid.generators().iter().enumerate() {
        p[grid.sub_by_id(g.sub).unwrap()] += inj.gen_p[k];
    }
    for node in &case.nodes {
        let s = node.key.0;
        assert!((node.p * grid.base_mva() - p[s]).abs() < 1e-9);
        if node.kind == gridtopo::powerflow::NodeKind::Pq {
            assert!((node.q * grid.base_mva() - q[s]).abs() < 1e-9);
        }
    }
}

#[test]
fn out_of_service_lines_report_zero() {
    let grid = GridModel::ieee14();
    let mut topo = TopologyState::default_for(&grid);
    let l = grid.line_by_id("line_4_5").unwrap();
    topo.line_in_service[l] = false;
    let case = build_case(&grid, &topo, &ieee14_base_injections(&grid)).unwrap();
    for sol in [solve_ac(&case, AcOptions::default(), Start::Flat), solve_dc(&case)] {
        assert!(sol.converged);
        assert_eq!(line_loading(&sol, &grid)[l], 0.0);
        assert_eq!((sol.p_or[l], sol.q_or[l], sol.i_or[l]), (0.0, 0.0, 0.0));
    }
}
