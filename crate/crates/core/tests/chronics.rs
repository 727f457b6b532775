use std::fs;

use gridtopo::chronics::{
    generate_synthetic, load_chronic, load_scenario_set, read_manifest, write_manifest, ForecastNoise, SyntheticConfig, LOADS_P,
    MAINTENANCE,
};
use gridtopo::grid::GridModel;
use gridtopo::Error;

fn stressed(seed: u64) -> SyntheticConfig {
    SyntheticConfig {
        seed,
        maintenance_per_day: 2.0,
        ..Default::default()
    }
}

#[test]
fn write_then_load_is_bit_identical() {
    let grid = GridModel::ieee14();
    let chronic = generate_synthetic(&grid, &stressed(5)).unwrap();
    assert!(!chronic.maintenance.is_empty());
    let dir = tempfile::tempdir().unwrap();
    chronic.write(&grid, dir.path()).unwrap();
    assert_eq!(load_chronic(dir.path(), &grid).unwrap(), chronic);
}

#[test]
fn columns_are_matched_by_id() {
    let grid = GridModel::ieee14();
    let chronic = generate_synthetic(&grid, &SyntheticConfig::default()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    chronic.write(&grid, dir.path()).unwrap();
    let path = dir.path().join(LOADS_P);
    let mut rdr = csv::Reader::from_path(&path).unwrap();
    let header: Vec<String> = rdr.headers().unwrap().iter().rev().map(String::from).collect();
    let rows: Vec<Vec<String>> = rdr.records().map(|r| r.unwrap().iter().rev().map(String::from).collect()).collect();
    let mut w = csv::Writer::from_path(&path).unwrap();
    w.write_record(&header).unwrap();
    for r in rows {
        w.write_record(&r).unwrap();
    }
    w.flush().unwrap();
    assert_eq!(load_chronic(dir.path(), &grid).unwrap(), chronic);
}

#[test]
fn malformed_files_are_reported() {
    let grid = GridModel::ieee14();
    let chronic = generate_synthetic(&grid, &SyntheticConfig::default()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    chronic.write(&grid, dir.path()).unwrap();
    let path = dir.path().join(LOADS_P);
    let text = fs::read_to_string(&path).unwrap();

    let mut lines: Vec<String> = text.lines().map(String::from).collect();
    lines[1] = lines[1].replacen(|c: char| c.is_ascii_digit(), "x", 1);
    fs::write(&path, lines.join("\n")).unwrap();
    assert!(matches!(load_chronic(dir.path(), &grid), Err(Error::Chronic { row: 1, .. })));

    let renamed = text.replacen("load_", "bogus_", 1);
    fs::write(&path, renamed).unwrap();
    assert!(matches!(load_chronic(dir.path(), &grid), Err(Error::Chronic { row: 0, .. })));

    fs::write(&path, &text).unwrap();
    fs::write(dir.path().join(MAINTENANCE), "line_id,start_step,duration_steps\nline_1_2,280,20\n").unwrap();
    assert!(matches!(load_chronic(dir.path(), &grid), Err(Error::InvalidChronic(_))));
}

#[test]
fn invalid_values_fail_validation() {
    let grid = GridModel::ieee14();
    let base = generate_synthetic(&grid, &SyntheticConfig::default()).unwrap();
    let mut a = base.clone();
    a.load_p[3][0] = -1.0;
    assert!(a.validate(&grid).is_err());
    let mut b = base.clone();
    b.gen_p[3][0] = grid.generators()[0].p_max * 2.0;
    assert!(b.validate(&grid).is_err());
    let mut c = base.clone();
    c.gen_v.pop();
    assert!(c.validate(&grid).is_err());
    let mut d = base;
    d.load_q[0][0] = f64::NAN;
    assert!(d.validate(&grid).is_err());
}

#[test]
fn synthetic_days_and_timestamps() {
    let grid = GridModel::ieee14();
    let c = generate_synthetic(&grid, &SyntheticConfig { days: 2, ..Default::default() }).unwrap();
    assert_eq!(c.len(), 576);
    for w in c.timestamps.windows(2) {
        assert_eq!((w[1] - w[0]).num_minutes(), 5);
    }
    let total_load: f64 = c.load_p[100].iter().sum();
    let total_gen: f64 = c.gen_p[100].iter().sum();
    assert!(total_gen > total_load);
    assert!(generate_synthetic(&grid, &SyntheticConfig { days: 0, ..Default::default() }).is_err());
    assert!(generate_synthetic(&grid, &SyntheticConfig { start_date: "someday".into(), ..Default::default() }).is_err());
}

/// Forecast errors over many steps: zero mean, the configured spread, and
/// the same draw every time a step is requested.
#[test]
fn forecast_noise_statistics() {
    let grid = GridModel::ieee14();
    let c = generate_synthetic(&grid, &SyntheticConfig::default()).unwrap();
    let noise = ForecastNoise { sigma: 2.0, seed: 3 };
    let mut errs = Vec::new();
    for t in 0..c.len() {
        let f = c.forecast_at(t, &noise).unwrap();
        assert_eq!(f, c.forecast_at(t, &noise).unwrap());
        assert_eq!(f.gen_p, c.gen_p[t]);
        errs.extend(f.load_p.iter().zip(&c.load_p[t]).map(|(a, b)| a - b));
    }
    let n = errs.len() as f64;
    let mean = errs.iter().sum::<f64>() / n;
    let sd = (errs.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    assert!(mean.abs() < 4.0 * 2.0 / n.sqrt(), "mean {mean}");
    assert!((sd - 2.0).abs() < 0.1, "sd {sd}");
}

#[test]
fn manifest_lists_scenarios_in_order() {
    let grid = GridModel::ieee14();
    let dir = tempfile::tempdir().unwrap();
    let names: Vec<String> = ["b", "a"].iter().map(|s| s.to_string()).collect();
    for (i, n) in names.iter().enumerate() {
        generate_synthetic(&grid, &stressed(i as u64)).unwrap().write(&grid, dir.path().join(n)).unwrap();
    }
    let path = write_manifest(dir.path(), &names).unwrap();
    let dirs = read_manifest(&path).unwrap();
    assert_eq!(dirs, vec![dir.path().join("b"), dir.path().join("a")]);
    let set = load_scenario_set(dir.path(), &grid).unwrap();
    assert_eq!(set.iter().map(|(id, _)| id.as_str()).collect::<Vec<_>>(), ["b", "a"]);
    fs::remove_file(path).unwrap();
    assert_eq!(read_manifest(dir.path()).unwrap(), vec![dir.path().join("a"), dir.path().join("b")]);
}
