//! Time-series scenarios: CSV layout, validation, synthetic generation and
//! per-step / forecast views.
//!
//! A scenario directory holds `loads_p.csv`, `loads_q.csv`, `prods_p.csv`,
//! `prods_v.csv`, `maintenance.csv` and `timestamps.csv`. The four injection
//! files carry a header row of element ids and one row per 5-minute step.

use std::fs;
use std::path::{Path, PathBuf};

use chrono::{Duration, NaiveDate, NaiveDateTime};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::grid::{connectivity_check, GridModel, TopologyState};
use crate::powerflow::Injections;
use crate::{Error, Result};

pub const STEP_MINUTES: i64 = 5;
pub const STEPS_PER_DAY: usize = 288;
pub const TIMESTAMP_FORMAT: &str = "%Y-%m-%d %H:%M";

pub const LOADS_P: &str = "loads_p.csv";
pub const LOADS_Q: &str = "loads_q.csv";
pub const PRODS_P: &str = "prods_p.csv";
pub const PRODS_V: &str = "prods_v.csv";
pub const MAINTENANCE: &str = "maintenance.csv";
pub const TIMESTAMPS: &str = "timestamps.csv";
pub const MANIFEST: &str = "scenarios.txt";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Maintenance {
    pub line: usize,
    pub start: usize,
    pub duration: usize,
}

impl Maintenance {
    pub fn active(&self, t: usize) -> bool {
        t >= self.start && t < self.start + self.duration
    }

    pub fn end(&self) -> usize {
        self.start + self.duration
    }
}

/// One scenario, with columns already in grid element order.
#[derive(Debug, Clone, PartialEq)]
pub struct Chronic {
    /// `[t][load]` MW.
    pub load_p: Vec<Vec<f64>>,
    /// `[t][load]` MVAr.
    pub load_q: Vec<Vec<f64>>,
    /// `[t][generator]` MW.
    pub gen_p: Vec<Vec<f64>>,
    /// `[t][generator]` p.u.
    pub gen_v: Vec<Vec<f64>>,
    pub maintenance: Vec<Maintenance>,
    pub timestamps: Vec<NaiveDateTime>,
}

/// Additive Gaussian error on load forecasts, reproducible per step.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ForecastNoise {
    /// Standard deviation in MW / MVAr.
    pub sigma: f64,
    pub seed: u64,
}

impl Chronic {
    pub fn len(&self) -> usize {
        self.timestamps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timestamps.is_empty()
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t >= self.len() {
            return Err(Error::StepOutOfRange { t, len: self.len() });
        }
        Ok(())
    }

    /// Realized injections at step `t`.
    pub fn injections_at(&self, t: usize) -> Result<Injections> {
        self.check_t(t)?;
        Ok(Injections {
            load_p: self.load_p[t].clone(),
            load_q: self.load_q[t].clone(),
            gen_p: self.gen_p[t].clone(),
            gen_v: self.gen_v[t].clone(),
        })
    }

    /// Injections a lookahead simulation assumes for step `t`.
    pub fn forecast_at(&self, t: usize, noise: &ForecastNoise) -> Result<Injections> {
        let mut inj = self.injections_at(t)?;
        if noise.sigma > 0.0 {
            let mut rng = ChaCha8Rng::seed_from_u64(noise.seed ^ (t as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
            let normal = Normal::new(0.0, noise.sigma).map_err(|e| Error::Config(e.to_string()))?;
            for v in inj.load_p.iter_mut().chain(inj.load_q.iter_mut()) {
                *v += normal.sample(&mut rng);
            }
        }
        Ok(inj)
    }

    pub fn in_maintenance(&self, line: usize, t: usize) -> bool {
        self.maintenance.iter().any(|m| m.line == line && m.active(t))
    }

    pub fn validate(&self, grid: &GridModel) -> Result<()> {
        let n = self.len();
        let bad = |m: String| Err(Error::InvalidChronic(m));
        if n == 0 {
            return bad("chronic has no time steps".into());
        }
        for (name, series, width) in [
            ("loads_p", &self.load_p, grid.n_loads()),
            ("loads_q", &self.load_q, grid.n_loads()),
            ("prods_p", &self.gen_p, grid.n_gens()),
            ("prods_v", &self.gen_v, grid.n_gens()),
        ] {
            if series.len() != n {
                return bad(format!("{name} has {} rows, expected {n}", series.len()));
            }
            if let Some(t) = series.iter().position(|row| row.len() != width) {
                return bad(format!("{name} row {t} has wrong width"));
            }
            if series.iter().flatten().any(|v| !v.is_finite()) {
                return bad(format!("{name} holds a non-finite value"));
            }
        }
        for (t, row) in self.load_p.iter().enumerate() {
            if row.iter().any(|&p| p < 0.0) {
                return bad(format!("negative load at step {t}"));
            }
        }
        for (t, row) in self.gen_p.iter().enumerate() {
            for (g, &p) in row.iter().enumerate() {
                let pmax = grid.generators()[g].p_max;
                if p < 0.0 || p > pmax * (1.0 + 1e-9) {
                    return bad(format!("generator {} at step {t} outside [0, {pmax}]", grid.generators()[g].id));
                }
            }
        }
        for (i, m) in self.maintenance.iter().enumerate() {
            if m.line >= grid.n_lines() {
                return bad(format!("maintenance event {i} references unknown line"));
            }
            if m.duration == 0 || m.end() > n {
                return bad(format!("maintenance event {i} outside [0, {n})"));
            }
            for other in &self.maintenance[..i] {
                if other.line == m.line && other.start < m.end() && m.start < other.end() {
                    return bad(format!("overlapping maintenance on line {}", grid.lines()[m.line].id));
                }
            }
        }
        Ok(())
    }

    /// Write the scenario directory. Values are printed in shortest
    /// round-trip form so reading back reproduces every bit.
    pub fn write(&self, grid: &GridModel, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let load_ids: Vec<&str> = grid.loads().iter().map(|l| l.id.as_str()).collect();
        let gen_ids: Vec<&str> = grid.generators().iter().map(|g| g.id.as_str()).collect();
        write_matrix(&dir.join(LOADS_P), &load_ids, &self.load_p)?;
        write_matrix(&dir.join(LOADS_Q), &load_ids, &self.load_q)?;
        write_matrix(&dir.join(PRODS_P), &gen_ids, &self.gen_p)?;
        write_matrix(&dir.join(PRODS_V), &gen_ids, &self.gen_v)?;

        let path = dir.join(MAINTENANCE);
        let mut w = csv::Writer::from_path(&path)?;
        w.write_record(["line_id", "start_step", "duration_steps"])?;
        for m in &self.maintenance {
            w.write_record([grid.lines()[m.line].id.clone(), m.start.to_string(), m.duration.to_string()])?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;

        let path = dir.join(TIMESTAMPS);
        let mut w = csv::Writer::from_path(&path)?;
        w.write_record(["timestamp"])?;
        for ts in &self.timestamps {
            w.write_record([ts.format(TIMESTAMP_FORMAT).to_string()])?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
        Ok(())
    }
}

fn write_matrix(path: &Path, header: &[&str], rows: &[Vec<f64>]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(header)?;
    for row in rows {
        w.write_record(row.iter().map(|v| v.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

fn chronic_err(path: &Path, row: usize, message: impl Into<String>) -> Error {
    Error::Chronic {
        file: path.to_path_buf(),
        row,
        message: message.into(),
    }
}

fn read_records(path: &Path) -> Result<(Vec<String>, Vec<csv::StringRecord>)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(text.as_bytes());
    let header: Vec<String> = reader.headers()?.iter().map(|h| h.trim().to_string()).collect();
    let mut rows = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        rows.push(rec.map_err(|e| chronic_err(path, i + 1, e.to_string()))?);
    }
    Ok((header, rows))
}

/// Read one injection file and reorder its columns into grid element order.
fn read_matrix(path: &Path, lookup: impl Fn(&str) -> Option<usize>, width: usize) -> Result<Vec<Vec<f64>>> {
    let (header, rows) = read_records(path)?;
    let mut column_of = vec![None; width];
    let mut target = Vec::with_capacity(header.len());
    for name in &header {
        let idx = lookup(name).ok_or_else(|| chronic_err(path, 0, format!("unknown element id {name:?}")))?;
        if column_of[idx].is_some() {
            return Err(chronic_err(path, 0, format!("duplicate column {name:?}")));
        }
        column_of[idx] = Some(target.len());
        target.push(idx);
    }
    if let Some(missing) = column_of.iter().position(Option::is_none) {
        return Err(chronic_err(path, 0, format!("missing column for element {missing}")));
    }
    let mut out = Vec::with_capacity(rows.len());
    for (r, rec) in rows.iter().enumerate() {
        if rec.len() != header.len() {
            return Err(chronic_err(path, r + 1, format!("expected {} cells, found {}", header.len(), rec.len())));
        }
        let mut row = vec![0.0; width];
        for (cell, &idx) in rec.iter().zip(&target) {
            row[idx] = cell
                .trim()
                .parse::<f64>()
                .map_err(|_| chronic_err(path, r + 1, format!("non-numeric cell {cell:?}")))?;
        }
        out.push(row);
    }
    Ok(out)
}

/// Load and validate a scenario directory against a grid.
pub fn load_chronic(dir: impl AsRef<Path>, grid: &GridModel) -> Result<Chronic> {
    let dir = dir.as_ref();
    let load_p = read_matrix(&dir.join(LOADS_P), |s| grid.load_by_id(s), grid.n_loads())?;
    let load_q = read_matrix(&dir.join(LOADS_Q), |s| grid.load_by_id(s), grid.n_loads())?;
    let gen_p = read_matrix(&dir.join(PRODS_P), |s| grid.gen_by_id(s), grid.n_gens())?;
    let gen_v = read_matrix(&dir.join(PRODS_V), |s| grid.gen_by_id(s), grid.n_gens())?;

    let path = dir.join(TIMESTAMPS);
    let (_, rows) = read_records(&path)?;
    let mut timestamps = Vec::with_capacity(rows.len());
    for (r, rec) in rows.iter().enumerate() {
        let cell = rec.get(0).unwrap_or("").trim();
        let ts = NaiveDateTime::parse_from_str(cell, TIMESTAMP_FORMAT)
            .map_err(|_| chronic_err(&path, r + 1, format!("bad timestamp {cell:?}")))?;
        timestamps.push(ts);
    }

    let n = timestamps.len();
    for (name, len) in [
        (LOADS_P, load_p.len()),
        (LOADS_Q, load_q.len()),
        (PRODS_P, gen_p.len()),
        (PRODS_V, gen_v.len()),
    ] {
        if len != n {
            return Err(chronic_err(
                &dir.join(name),
                len.min(n) + 1,
                format!("length mismatch: {len} rows against {n} timestamps"),
            ));
        }
    }

    let path = dir.join(MAINTENANCE);
    let mut maintenance = Vec::new();
    if path.exists() && fs::metadata(&path).map_err(|e| Error::io(&path, e))?.len() > 0 {
        let (_, rows) = read_records(&path)?;
        for (r, rec) in rows.iter().enumerate() {
            if rec.len() != 3 {
                return Err(chronic_err(&path, r + 1, "expected line_id,start_step,duration_steps"));
            }
            let line = grid
                .line_by_id(rec[0].trim())
                .ok_or_else(|| chronic_err(&path, r + 1, format!("unknown line id {:?}", &rec[0])))?;
            let num = |s: &str| {
                s.trim()
                    .parse::<usize>()
                    .map_err(|_| chronic_err(&path, r + 1, format!("non-numeric cell {s:?}")))
            };
            maintenance.push(Maintenance {
                line,
                start: num(&rec[1])?,
                duration: num(&rec[2])?,
            });
        }
    }
    let chronic = Chronic {
        load_p,
        load_q,
        gen_p,
        gen_v,
        maintenance,
        timestamps,
    };
    chronic.validate(grid)?;
    Ok(chronic)
}

/// Parameters of the synthetic scenario generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    pub days: usize,
    pub seed: u64,
    /// First timestamp's calendar date, `YYYY-MM-DD`.
    pub start_date: String,
    /// Multiplier on every load's nominal demand.
    pub load_scale: f64,
    /// Half-width of the per-scenario uniform scale jitter.
    pub scale_jitter: f64,
    /// Relative amplitude of the daily sinusoid.
    pub daily_amplitude: f64,
    /// Hour of the daily peak.
    pub peak_hour: f64,
    /// Half-width, in hours, of each load's random peak shift.
    pub phase_jitter_hours: f64,
    /// Bound of the relative uniform noise added each step.
    pub noise: f64,
    /// Generation margin over load, covering losses.
    pub loss_margin: f64,
    /// Relative jitter applied to each generator's dispatch weight per scenario.
    pub dispatch_jitter: f64,
    pub power_factor: f64,
    /// Expected maintenance events per day.
    pub maintenance_per_day: f64,
    pub maintenance_min_steps: usize,
    pub maintenance_max_steps: usize,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            days: 1,
            seed: 0,
            start_date: "2019-01-07".into(),
            load_scale: 1.0,
            scale_jitter: 0.05,
            daily_amplitude: 0.15,
            peak_hour: 18.0,
            phase_jitter_hours: 1.0,
            noise: 0.02,
            loss_margin: 0.03,
            dispatch_jitter: 0.2,
            power_factor: 0.95,
            maintenance_per_day: 0.0,
            maintenance_min_steps: 12,
            maintenance_max_steps: 36,
        }
    }
}

/// Generate a reproducible scenario: sinusoidal daily loads with bounded
/// noise, generation dispatched in proportion to `p_max`, optional
/// maintenance outages on lines whose removal keeps the grid connected.
pub fn generate_synthetic(grid: &GridModel, config: &SyntheticConfig) -> Result<Chronic> {
    if config.days == 0 {
        return Err(Error::Config("days must be at least 1".into()));
    }
    if !(config.power_factor > 0.0 && config.power_factor <= 1.0) {
        return Err(Error::Config("power_factor must be in (0, 1]".into()));
    }
    if config.maintenance_min_steps == 0 || config.maintenance_min_steps > config.maintenance_max_steps {
        return Err(Error::Config("invalid maintenance duration range".into()));
    }
    let start_day = NaiveDate::parse_from_str(&config.start_date, "%Y-%m-%d")
        .map_err(|_| Error::Config(format!("bad start_date {:?}", config.start_date)))?;
    let start = start_day.and_hms_opt(0, 0, 0).expect("midnight exists");
    let n = config.days * STEPS_PER_DAY;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    let scale = config.load_scale * (1.0 + config.scale_jitter * (2.0 * rng.random::<f64>() - 1.0));
    let shifts: Vec<f64> = (0..grid.n_loads())
        .map(|_| config.phase_jitter_hours * (2.0 * rng.random::<f64>() - 1.0))
        .collect();
    let weights: Vec<f64> = grid
        .generators()
        .iter()
        .map(|g| g.p_max * (1.0 + config.dispatch_jitter * (2.0 * rng.random::<f64>() - 1.0)).max(0.0))
        .collect();
    let weight_sum: f64 = weights.iter().sum();
    let capacity: f64 = grid.generators().iter().map(|g| g.p_max).sum();
    let tan_phi = config.power_factor.acos().tan();

    let mut load_p = Vec::with_capacity(n);
    let mut load_q = Vec::with_capacity(n);
    let mut gen_p = Vec::with_capacity(n);
    let mut gen_v = Vec::with_capacity(n);
    let mut timestamps = Vec::with_capacity(n);
    let v_set: Vec<f64> = grid.generators().iter().map(|g| g.v_setpoint.unwrap_or(1.0)).collect();
    for t in 0..n {
        let hour = (t % STEPS_PER_DAY) as f64 * STEP_MINUTES as f64 / 60.0;
        let p: Vec<f64> = grid
            .loads()
            .iter()
            .zip(&shifts)
            .map(|(load, shift)| {
                let phase = 2.0 * std::f64::consts::PI * (hour - config.peak_hour - shift) / 24.0;
                let noise = config.noise * (2.0 * rng.random::<f64>() - 1.0);
                (load.p_nominal * scale * (1.0 + config.daily_amplitude * phase.cos() + noise)).max(0.0)
            })
            .collect();
        let total = p.iter().sum::<f64>() * (1.0 + config.loss_margin);
        if total > capacity || (total > 0.0 && weight_sum <= 0.0) {
            return Err(Error::Infeasible(format!(
                "step {t}: demand {total:.1} MW exceeds generation capacity {capacity:.1} MW"
            )));
        }
        let mut g: Vec<f64> = weights
            .iter()
            .map(|w| if weight_sum > 0.0 { total * w / weight_sum } else { 0.0 })
            .collect();
        redistribute_overflow(&mut g, grid);
        load_q.push(p.iter().map(|x| x * tan_phi).collect());
        load_p.push(p);
        gen_p.push(g);
        gen_v.push(v_set.clone());
        timestamps.push(start + Duration::minutes(STEP_MINUTES * t as i64));
    }

    let maintenance = draw_maintenance(grid, config, n, &mut rng);
    let chronic = Chronic {
        load_p,
        load_q,
        gen_p,
        gen_v,
        maintenance,
        timestamps,
    };
    chronic.validate(grid)?;
    Ok(chronic)
}

/// Clip dispatch at `p_max` and hand the excess to units with headroom.
fn redistribute_overflow(dispatch: &mut [f64], grid: &GridModel) {
    for _ in 0..dispatch.len() {
        let mut excess = 0.0;
        for (g, p) in dispatch.iter_mut().enumerate() {
            let pmax = grid.generators()[g].p_max;
            if *p > pmax {
                excess += *p - pmax;
                *p = pmax;
            }
        }
        if excess <= 0.0 {
            return;
        }
        let headroom: f64 = dispatch
            .iter()
            .enumerate()
            .map(|(g, p)| grid.generators()[g].p_max - p)
            .sum();
        for (g, p) in dispatch.iter_mut().enumerate() {
            let room = grid.generators()[g].p_max - *p;
            *p += excess * room / headroom;
        }
    }
}

fn draw_maintenance(grid: &GridModel, config: &SyntheticConfig, n: usize, rng: &mut ChaCha8Rng) -> Vec<Maintenance> {
    let base = TopologyState::default_for(grid);
    let eligible: Vec<usize> = (0..grid.n_lines())
        .filter(|&l| {
            let mut t = base.clone();
            t.line_in_service[l] = false;
            connectivity_check(grid, &t).is_connected()
        })
        .collect();
    let expected = config.maintenance_per_day * config.days as f64;
    let mut count = expected.floor() as usize;
    if rng.random::<f64>() < expected.fract() {
        count += 1;
    }
    let mut events: Vec<Maintenance> = Vec::new();
    let mut attempts = 0;
    while events.len() < count && !eligible.is_empty() && attempts < 100 * (count + 1) {
        attempts += 1;
        let line = eligible[rng.random_range(0..eligible.len())];
        let duration = rng.random_range(config.maintenance_min_steps..=config.maintenance_max_steps);
        if duration >= n {
            continue;
        }
        let start = rng.random_range(1..n - duration);
        let overlaps = events.iter().any(|e| e.start < start + duration && start < e.end());
        if !overlaps {
            events.push(Maintenance { line, start, duration });
        }
    }
    events.sort_by_key(|e| (e.start, e.line));
    events
}

/// Write a manifest listing scenario directories relative to `root`.
pub fn write_manifest(root: impl AsRef<Path>, names: &[String]) -> Result<PathBuf> {
    let path = root.as_ref().join(MANIFEST);
    let mut text = names.join("\n");
    text.push('\n');
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

/// Resolve a manifest file, or a directory containing one, into scenario
/// directories. A directory without a manifest lists its subdirectories.
pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let path = path.as_ref();
    let (file, root) = if path.is_dir() {
        (path.join(MANIFEST), path.to_path_buf())
    } else {
        (path.to_path_buf(), path.parent().map(Path::to_path_buf).unwrap_or_default())
    };
    if file.exists() {
        let text = fs::read_to_string(&file).map_err(|e| Error::io(&file, e))?;
        return Ok(text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .map(|l| root.join(l))
            .collect());
    }
    let mut dirs: Vec<PathBuf> = fs::read_dir(&root)
        .map_err(|e| Error::io(&root, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join(LOADS_P).exists())
        .collect();
    dirs.sort();
    Ok(dirs)
}

/// Load every scenario named by a manifest (see [`read_manifest`]), keyed by
/// directory name.
pub fn load_scenario_set(path: impl AsRef<Path>, grid: &GridModel) -> Result<Vec<(String, Chronic)>> {
    read_manifest(path)?
        .into_iter()
        .map(|dir| {
            let id = dir.file_name().map_or_else(|| dir.display().to_string(), |n| n.to_string_lossy().into_owned());
            load_chronic(&dir, grid).map(|c| (id, c))
        })
        .collect()
}
