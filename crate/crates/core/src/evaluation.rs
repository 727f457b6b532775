//! Early-warning policy, batch evaluation and reports.

use std::fmt::Write as _;
use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::actions::{Action, ActionSpace};
use crate::chronics::Chronic;
use crate::env::{EnvConfig, Environment, GameOverCause};
use crate::grid::GridModel;
use crate::nn::Network;
use crate::training::{greedy_select, guided_select, SelectionKey};
use crate::{Error, Result};

/// Threshold grid swept by `sweep`.
pub const LAMBDA_GRID: [f64; 6] = [0.85, 0.875, 0.90, 0.925, 0.95, 0.975];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EWConfig {
    pub lambda: f64,
    pub guided_width: usize,
    pub key: SelectionKey,
}

impl Default for EWConfig {
    fn default() -> Self {
        EWConfig {
            lambda: 0.885,
            guided_width: 10,
            key: SelectionKey::Reward,
        }
    }
}

/// True when the do-nothing forecast has some line above `lambda`, or when
/// it predicts a game over.
pub fn warning_flag(env: &Environment, lambda: f64) -> bool {
    match env.simulate(&Action::DoNothing) {
        Ok(r) => r.info.game_over.is_some() || r.info.rho.iter().any(|&rho| rho > lambda),
        Err(_) => true,
    }
}

/// Do nothing on quiet steps; otherwise simulate the best candidates.
pub fn ew_policy(net: &Network, env: &Environment, obs: &[f64], space: &ActionSpace, cfg: &EWConfig) -> Result<usize> {
    if !warning_flag(env, cfg.lambda) {
        return Ok(0);
    }
    Ok(guided_select(net, env, obs, space, cfg.guided_width, cfg.key)?.action)
}

#[derive(Debug, Clone)]
pub enum Agent {
    DoNothing,
    /// Exhaustive one-step search every step.
    Greedy,
    /// Guided selection every step.
    Guided { net: Arc<Network>, width: usize },
    EarlyWarning { net: Arc<Network>, config: EWConfig },
}

impl Agent {
    pub fn name(&self) -> String {
        match self {
            Agent::DoNothing => "do-nothing".into(),
            Agent::Greedy => "greedy".into(),
            Agent::Guided { width, .. } => format!("guided (N_g={width})"),
            Agent::EarlyWarning { config, .. } => format!("EW lambda={}", config.lambda),
        }
    }

    pub fn decide(&self, env: &Environment, obs: &[f64], space: &ActionSpace) -> Result<usize> {
        match self {
            Agent::DoNothing => Ok(0),
            Agent::Greedy => Ok(greedy_select(env, space, SelectionKey::Reward).action),
            Agent::Guided { net, width } => Ok(guided_select(net, env, obs, space, *width, SelectionKey::Reward)?.action),
            Agent::EarlyWarning { net, config } => ew_policy(net, env, obs, space, config),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioResult {
    pub scenario_id: String,
    pub steps: usize,
    pub chronic_score: f64,
    pub game_over: bool,
    pub cause: Option<GameOverCause>,
    pub mean_decision_ms: f64,
    /// Present when the scenario could not be run.
    pub error: Option<String>,
    #[serde(skip)]
    pub decision_ms: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvaluationReport {
    pub agent: String,
    pub rows: Vec<ScenarioResult>,
}

fn median(v: &mut [f64]) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        (v[m - 1] + v[m]) / 2.0
    }
}

impl EvaluationReport {
    pub fn total_score(&self) -> f64 {
        self.rows.iter().map(|r| r.chronic_score).sum()
    }

    pub fn game_overs(&self) -> usize {
        self.rows.iter().filter(|r| r.game_over).count()
    }

    pub fn mean_score_all(&self) -> f64 {
        if self.rows.is_empty() {
            return 0.0;
        }
        self.total_score() / self.rows.len() as f64
    }

    pub fn mean_score_alive(&self) -> f64 {
        let alive: Vec<f64> = self.rows.iter().filter(|r| !r.game_over).map(|r| r.chronic_score).collect();
        if alive.is_empty() {
            0.0
        } else {
            alive.iter().sum::<f64>() / alive.len() as f64
        }
    }

    pub fn mean_decision_ms(&self) -> f64 {
        let all: Vec<f64> = self.rows.iter().flat_map(|r| r.decision_ms.iter().copied()).collect();
        if all.is_empty() {
            0.0
        } else {
            all.iter().sum::<f64>() / all.len() as f64
        }
    }

    pub fn median_decision_ms(&self) -> f64 {
        let mut all: Vec<f64> = self.rows.iter().flat_map(|r| r.decision_ms.iter().copied()).collect();
        median(&mut all)
    }

    /// CSV rows; `with_latency = false` drops the wall-clock column so two
    /// runs can be compared byte for byte.
    pub fn to_csv(&self, with_latency: bool) -> String {
        let mut out = String::from("scenario_id,steps,chronic_score,game_over,cause");
        out.push_str(if with_latency { ",mean_decision_ms\n" } else { "\n" });
        for r in &self.rows {
            let _ = write!(
                out,
                "{},{},{},{},{}",
                r.scenario_id,
                r.steps,
                r.chronic_score,
                r.game_over,
                r.cause.map_or(r.error.as_deref().map_or("", |_| "error"), |c| c.as_str())
            );
            if with_latency {
                let _ = write!(out, ",{:.3}", r.mean_decision_ms);
            }
            out.push('\n');
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv(true)).map_err(|e| Error::io(path, e))
    }

    /// One aligned table row per report.
    pub fn table(reports: &[EvaluationReport]) -> String {
        let header = ["Agent", "Game Over", "Mean Score All", "Mean Score w/o Dead", "Total Score", "Median ms"];
        let rows: Vec<[String; 6]> = reports
            .iter()
            .map(|r| {
                [
                    r.agent.clone(),
                    format!("{}/{}", r.game_overs(), r.rows.len()),
                    format!("{:.2}", r.mean_score_all()),
                    format!("{:.2}", r.mean_score_alive()),
                    format!("{:.2}", r.total_score()),
                    format!("{:.2}", r.median_decision_ms()),
                ]
            })
            .collect();
        let mut widths: Vec<usize> = header.iter().map(|h| h.len()).collect();
        for row in &rows {
            for (w, c) in widths.iter_mut().zip(row) {
                *w = (*w).max(c.len());
            }
        }
        let mut out = String::new();
        let line = |cells: Vec<&str>, out: &mut String| {
            let parts: Vec<String> = cells
                .iter()
                .zip(&widths)
                .enumerate()
                .map(|(i, (c, w))| if i == 0 { format!("{c:<w$}") } else { format!("{c:>w$}") })
                .collect();
            out.push_str(parts.join("  ").trim_end());
            out.push('\n');
        };
        line(header.to_vec(), &mut out);
        let rule: Vec<String> = widths.iter().map(|w| "-".repeat(*w)).collect();
        line(rule.iter().map(String::as_str).collect(), &mut out);
        for row in &rows {
            line(row.iter().map(String::as_str).collect(), &mut out);
        }
        out
    }
}

/// Run one scenario to completion or game over.
pub fn run_scenario(
    grid: &Arc<GridModel>,
    id: &str,
    chronic: &Arc<Chronic>,
    env_config: &EnvConfig,
    space: &ActionSpace,
    agent: &Agent,
) -> ScenarioResult {
    let mut row = ScenarioResult {
        scenario_id: id.to_string(),
        steps: 0,
        chronic_score: 0.0,
        game_over: false,
        cause: None,
        mean_decision_ms: 0.0,
        error: None,
        decision_ms: Vec::new(),
    };
    let run = |row: &mut ScenarioResult| -> Result<()> {
        let mut env = Environment::new(grid.clone(), chronic.clone(), env_config.clone())?;
        let mut obs = env.observe();
        while !env.is_done() {
            let t0 = Instant::now();
            let action = agent.decide(&env, &obs, space)?;
            row.decision_ms.push(t0.elapsed().as_secs_f64() * 1e3);
            obs = env.step(&space.actions()[action])?.observation;
            row.steps += 1;
        }
        row.cause = env.game_over();
        row.game_over = row.cause.is_some();
        row.chronic_score = env.chronic_score();
        Ok(())
    };
    if let Err(e) = run(&mut row) {
        row.error = Some(e.to_string());
        row.game_over = true;
        row.chronic_score = 0.0;
    }
    if !row.decision_ms.is_empty() {
        row.mean_decision_ms = row.decision_ms.iter().sum::<f64>() / row.decision_ms.len() as f64;
    }
    row
}

/// Evaluate an agent on every scenario, in parallel.
pub fn evaluate(
    grid: &Arc<GridModel>,
    scenarios: &[(String, Arc<Chronic>)],
    env_config: &EnvConfig,
    space: &ActionSpace,
    agent: &Agent,
) -> EvaluationReport {
    let rows = scenarios
        .par_iter()
        .map(|(id, c)| run_scenario(grid, id, c, env_config, space, agent))
        .collect();
    EvaluationReport {
        agent: agent.name(),
        rows,
    }
}

/// Early-warning evaluation at each threshold of `lambdas`.
pub fn sweep(
    grid: &Arc<GridModel>,
    scenarios: &[(String, Arc<Chronic>)],
    env_config: &EnvConfig,
    space: &ActionSpace,
    net: Arc<Network>,
    base: &EWConfig,
    lambdas: &[f64],
) -> Vec<EvaluationReport> {
    lambdas
        .iter()
        .map(|&lambda| {
            let agent = Agent::EarlyWarning {
                net: net.clone(),
                config: EWConfig { lambda, ..base.clone() },
            };
            evaluate(grid, scenarios, env_config, space, &agent)
        })
        .collect()
}
