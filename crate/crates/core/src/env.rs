//! The grid-operation environment: step and lookahead semantics, operating
//! rules, rewards and scores.
//!
//! One `step` runs, in order: the legality check (illegal actions are
//! downgraded to do-nothing), the action and timer bookkeeping, scheduled
//! maintenance, the power flow at the next step's injections, the overload
//! rules with a single re-solve after trips, the hard constraints, and
//! finally reward and score.

use std::io::Write;
use std::sync::Arc;

use chrono::{Datelike, Timelike};
use serde::{Deserialize, Serialize};

use crate::actions::{is_legal, Action, Legality};
use crate::chronics::{Chronic, ForecastNoise};
use crate::grid::{apply_action, connectivity, electrical_nodes, separation, GridModel, TopologyState};
use crate::powerflow::{build_case, line_loading, solve, AcOptions, FlowMode, Injections, PowerFlowSolution, Start};
use crate::{Error, Result};

/// Loading at or above which a line trips immediately.
pub const INSTANT_TRIP_RHO: f64 = 1.5;
/// Consecutive overloaded steps tolerated below the instant-trip level.
pub const OVERLOAD_GRACE_STEPS: u32 = 2;
/// Steps a tripped line stays locked out.
pub const RECOVERY_STEPS: u32 = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EnvConfig {
    pub mode: FlowMode,
    pub tol: f64,
    pub max_iter: usize,
    pub forecast: ForecastNoise,
    /// Out-of-service lines count as fully free capacity in the score
    /// (literal per-line formula). When false they contribute nothing.
    pub score_disconnected_lines: bool,
    /// Optional cap on steps per episode.
    pub horizon: Option<usize>,
}

impl Default for EnvConfig {
    fn default() -> Self {
        let pf = AcOptions::default();
        EnvConfig {
            mode: FlowMode::Ac,
            tol: pf.tol,
            max_iter: pf.max_iter,
            forecast: ForecastNoise::default(),
            score_disconnected_lines: true,
            horizon: None,
        }
    }
}

impl EnvConfig {
    pub fn ac_options(&self) -> AcOptions {
        AcOptions {
            tol: self.tol,
            max_iter: self.max_iter,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GameOverCause {
    /// Power flow failed to converge.
    Divergence,
    /// Some load is no longer connected to the slack generator.
    UnservedLoad,
    /// More than one generator disconnected.
    PlantsTripped,
    /// An energized part of the grid separated from the rest.
    Island,
}

impl GameOverCause {
    pub fn as_str(self) -> &'static str {
        match self {
            GameOverCause::Divergence => "divergence",
            GameOverCause::UnservedLoad => "unserved_load",
            GameOverCause::PlantsTripped => "plants_tripped",
            GameOverCause::Island => "island",
        }
    }
}

/// Mutable part of the environment.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvState {
    pub topology: TopologyState,
    /// Cursor into the chronic.
    pub t: usize,
    pub solution: Option<PowerFlowSolution>,
    pub rho: Vec<f64>,
    pub game_over: Option<GameOverCause>,
    pub tripped_plants: usize,
    pub steps: usize,
    pub reward_sum: f64,
    pub score_sum: f64,
    pub done: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepInfo {
    /// Cursor after the step.
    pub t: usize,
    pub step_score: f64,
    pub tripped_lines: Vec<usize>,
    pub game_over: Option<GameOverCause>,
    pub legality: Legality,
    /// True for lookahead results.
    pub predicted: bool,
    /// Loading per line after the step.
    pub rho: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    pub observation: Vec<f64>,
    pub reward: f64,
    pub done: bool,
    pub info: StepInfo,
}

impl StepResult {
    pub fn max_rho(&self) -> f64 {
        self.info.rho.iter().copied().fold(0.0, f64::max)
    }
}

/// Per-line ATC proxy: `sum(max(0, 1 - rho^2))`.
pub fn step_score(rho: &[f64]) -> f64 {
    rho.iter().map(|r| (1.0 - r * r).max(0.0)).sum()
}

/// `-1` on game over, else the mean per-line score.
pub fn reward(rho: &[f64], game_over: bool) -> f64 {
    if game_over || rho.is_empty() {
        -1.0
    } else {
        step_score(rho) / rho.len() as f64
    }
}

/// Zero when the chronic ended in game over, else the sum of step scores.
pub fn chronic_score(step_scores: &[f64], game_over: bool) -> f64 {
    if game_over {
        0.0
    } else {
        step_scores.iter().sum()
    }
}

pub fn total_score(chronic_scores: &[f64]) -> f64 {
    chronic_scores.iter().sum()
}

/// Named sections of the flattened observation.
pub fn observation_layout(grid: &GridModel) -> Vec<(&'static str, usize)> {
    let (g, d, l, s) = (grid.n_gens(), grid.n_loads(), grid.n_lines(), grid.n_subs());
    vec![
        ("gen_p", g),
        ("gen_v", g),
        ("load_p", d),
        ("load_q", d),
        ("line_status", l),
        ("p_or", l),
        ("q_or", l),
        ("i_or", l),
        ("p_ex", l),
        ("q_ex", l),
        ("i_ex", l),
        ("rho", l),
        ("thermal_limit", l),
        ("bus_assignment", grid.n_slots_total()),
        ("line_cooldown", l),
        ("sub_cooldown", s),
        ("recovery_timer", l),
        ("overload_grace", l),
        ("calendar", 8),
    ]
}

pub fn observation_len(grid: &GridModel) -> usize {
    observation_layout(grid).iter().map(|(_, n)| n).sum()
}

#[derive(Debug, Clone)]
pub struct Environment {
    grid: Arc<GridModel>,
    chronic: Arc<Chronic>,
    config: EnvConfig,
    state: EnvState,
}

impl Environment {
    /// Create an environment positioned at step 0 of `chronic`.
    pub fn new(grid: Arc<GridModel>, chronic: Arc<Chronic>, config: EnvConfig) -> Result<Self> {
        let state = Self::initial_state(&grid, &chronic, &config)?;
        Ok(Environment {
            grid,
            chronic,
            config,
            state,
        })
    }

    fn initial_state(grid: &GridModel, chronic: &Chronic, config: &EnvConfig) -> Result<EnvState> {
        chronic.validate(grid)?;
        let mut topology = TopologyState::default_for(grid);
        for m in chronic.maintenance.iter().filter(|m| m.active(0)) {
            topology.line_in_service[m.line] = false;
        }
        let inj = chronic.injections_at(0)?;
        let nodes = electrical_nodes(grid, &topology);
        let sep = separation(grid, &nodes, &connectivity(&nodes));
        if !sep.unserved_loads.is_empty() || sep.islands > 0 || sep.disconnected_gens.len() > 1 {
            return Err(Error::UnusableScenario("initial topology is not intact".into()));
        }
        let case = build_case(grid, &topology, &inj)?;
        let solution = solve(&case, config.mode, config.ac_options(), Start::Flat);
        if !solution.converged {
            return Err(Error::UnusableScenario("power flow diverges at step 0".into()));
        }
        let rho = line_loading(&solution, grid);
        Ok(EnvState {
            topology,
            t: 0,
            solution: Some(solution),
            rho,
            game_over: None,
            tripped_plants: sep.disconnected_gens.len(),
            steps: 0,
            reward_sum: 0.0,
            score_sum: 0.0,
            done: chronic.len() <= 1,
        })
    }

    /// Restart on a (possibly different) chronic.
    pub fn reset(&mut self, chronic: Arc<Chronic>) -> Result<Vec<f64>> {
        self.state = Self::initial_state(&self.grid, &chronic, &self.config)?;
        self.chronic = chronic;
        Ok(self.observe())
    }

    pub fn grid(&self) -> &GridModel {
        &self.grid
    }

    pub fn grid_arc(&self) -> &Arc<GridModel> {
        &self.grid
    }

    pub fn chronic(&self) -> &Chronic {
        &self.chronic
    }

    pub fn chronic_arc(&self) -> &Arc<Chronic> {
        &self.chronic
    }

    pub fn config(&self) -> &EnvConfig {
        &self.config
    }

    pub fn state(&self) -> &EnvState {
        &self.state
    }

    pub fn topology(&self) -> &TopologyState {
        &self.state.topology
    }

    /// Replace the switching state, e.g. to build rule fixtures.
    pub fn set_topology(&mut self, topology: TopologyState) {
        self.state.topology = topology;
    }

    pub fn t(&self) -> usize {
        self.state.t
    }

    pub fn rho(&self) -> &[f64] {
        &self.state.rho
    }

    pub fn is_done(&self) -> bool {
        self.state.done
    }

    pub fn game_over(&self) -> Option<GameOverCause> {
        self.state.game_over
    }

    pub fn in_maintenance(&self, line: usize) -> bool {
        self.chronic.in_maintenance(line, self.state.t)
    }

    /// Sum of step scores, zeroed if the episode ended in game over.
    pub fn chronic_score(&self) -> f64 {
        if self.state.game_over.is_some() {
            0.0
        } else {
            self.state.score_sum
        }
    }

    /// Number of steps this episode can still take.
    pub fn remaining_steps(&self) -> usize {
        let by_chronic = self.chronic.len().saturating_sub(1 + self.state.t);
        match self.config.horizon {
            Some(h) => by_chronic.min(h.saturating_sub(self.state.steps)),
            None => by_chronic,
        }
    }

    /// Execute one step on the realized injections.
    pub fn step(&mut self, action: &Action) -> Result<StepResult> {
        if self.state.done {
            return Err(Error::EpisodeFinished);
        }
        let inj = self.chronic.injections_at(self.state.t + 1)?;
        let (state, result) = self.transition(action, inj, false)?;
        self.state = state;
        Ok(result)
    }

    /// Run the full step pipeline on a copy, using forecast injections.
    pub fn simulate(&self, action: &Action) -> Result<StepResult> {
        if self.state.done {
            return Err(Error::EpisodeFinished);
        }
        let inj = self.chronic.forecast_at(self.state.t + 1, &self.config.forecast)?;
        Ok(self.transition(action, inj, true)?.1)
    }

    fn transition(&self, action: &Action, inj: Injections, predicted: bool) -> Result<(EnvState, StepResult)> {
        let grid = &*self.grid;
        let legality = is_legal(self, action);
        let executed = if legality.legal { action } else { &Action::DoNothing };

        let mut s = self.state.clone();
        let mut topology = s.topology.clone();
        topology.tick();
        topology = apply_action(grid, &topology, executed)?;
        let next_t = s.t + 1;
        for m in &self.chronic.maintenance {
            if m.start == next_t {
                topology.line_in_service[m.line] = false;
                topology.overload_grace[m.line] = 0;
            } else if m.end() == next_t && topology.recovery_timer[m.line] == 0 {
                topology.line_in_service[m.line] = true;
            }
        }
        s.t = next_t;
        s.steps += 1;

        let mut tripped = Vec::new();
        let mut outcome = self.solve_topology(&topology, &inj, s.solution.as_ref());
        if let Ok((solution, rho, _)) = &outcome {
            for (l, &r) in rho.iter().enumerate() {
                if !topology.line_in_service[l] {
                    topology.overload_grace[l] = 0;
                    continue;
                }
                if r >= INSTANT_TRIP_RHO {
                    tripped.push(l);
                } else if r >= 1.0 {
                    topology.overload_grace[l] += 1;
                    if topology.overload_grace[l] > OVERLOAD_GRACE_STEPS {
                        tripped.push(l);
                    }
                } else {
                    topology.overload_grace[l] = 0;
                }
            }
            if !tripped.is_empty() {
                for &l in &tripped {
                    topology.line_in_service[l] = false;
                    topology.recovery_timer[l] = RECOVERY_STEPS;
                    topology.overload_grace[l] = 0;
                }
                let warm = solution.clone();
                outcome = self.solve_topology(&topology, &inj, Some(&warm));
            }
        }
        s.topology = topology;

        let (reward, step_score) = match outcome {
            Ok((solution, rho, plants)) => {
                let scored: Vec<f64> = if self.config.score_disconnected_lines {
                    rho.clone()
                } else {
                    rho.iter()
                        .enumerate()
                        .map(|(l, &r)| if s.topology.line_in_service[l] { r } else { 1.0 })
                        .collect()
                };
                s.tripped_plants = plants;
                s.solution = Some(solution);
                s.rho = rho;
                let score = step_score(&scored);
                (score / grid.n_lines() as f64, score)
            }
            Err(cause) => {
                s.game_over = Some(cause);
                (-1.0, 0.0)
            }
        };
        s.reward_sum += reward;
        s.score_sum += step_score;
        let horizon_hit = self.config.horizon.is_some_and(|h| s.steps >= h);
        s.done = s.game_over.is_some() || s.t + 1 >= self.chronic.len() || horizon_hit;

        let info = StepInfo {
            t: s.t,
            step_score,
            tripped_lines: tripped,
            game_over: s.game_over,
            legality,
            predicted,
            rho: s.rho.clone(),
        };
        let observation = build_observation(grid, &self.chronic, &s, &inj);
        let done = s.done;
        Ok((
            s,
            StepResult {
                observation,
                reward,
                done,
                info,
            },
        ))
    }

    /// Hard-constraint check followed by a power flow. Returns the solution,
    /// loadings and the number of disconnected plants, or the game-over cause.
    fn solve_topology(
        &self,
        topology: &TopologyState,
        inj: &Injections,
        warm: Option<&PowerFlowSolution>,
    ) -> std::result::Result<(PowerFlowSolution, Vec<f64>, usize), GameOverCause> {
        let grid = &*self.grid;
        let nodes = electrical_nodes(grid, topology);
        let sep = separation(grid, &nodes, &connectivity(&nodes));
        if !sep.unserved_loads.is_empty() {
            return Err(GameOverCause::UnservedLoad);
        }
        if sep.disconnected_gens.len() > 1 {
            return Err(GameOverCause::PlantsTripped);
        }
        if sep.islands > 0 {
            return Err(GameOverCause::Island);
        }
        let case = build_case(grid, topology, inj).map_err(|_| GameOverCause::Divergence)?;
        let start = warm.map_or(Start::Flat, Start::Warm);
        let solution = solve(&case, self.config.mode, self.config.ac_options(), start);
        if !solution.converged {
            return Err(GameOverCause::Divergence);
        }
        let rho = line_loading(&solution, grid);
        Ok((solution, rho, sep.disconnected_gens.len()))
    }

    /// Observation of the current state.
    pub fn observe(&self) -> Vec<f64> {
        let inj = self
            .chronic
            .injections_at(self.state.t)
            .unwrap_or_else(|_| Injections::zeros(&self.grid));
        build_observation(&self.grid, &self.chronic, &self.state, &inj)
    }
}

fn build_observation(grid: &GridModel, chronic: &Chronic, s: &EnvState, inj: &Injections) -> Vec<f64> {
    let nl = grid.n_lines();
    let mut obs = Vec::with_capacity(observation_len(grid));
    obs.extend(&inj.gen_p);
    obs.extend(&inj.gen_v);
    obs.extend(&inj.load_p);
    obs.extend(&inj.load_q);
    obs.extend(s.topology.line_in_service.iter().map(|&b| if b { 1.0 } else { 0.0 }));
    let zeros = vec![0.0; nl];
    let sol = s.solution.as_ref();
    for field in [
        sol.map(|x| &x.p_or),
        sol.map(|x| &x.q_or),
        sol.map(|x| &x.i_or),
        sol.map(|x| &x.p_ex),
        sol.map(|x| &x.q_ex),
        sol.map(|x| &x.i_ex),
    ] {
        obs.extend(field.unwrap_or(&zeros));
    }
    obs.extend(&s.rho);
    obs.extend(grid.lines().iter().map(|l| l.thermal_limit));
    obs.extend(s.topology.bus_assignment.iter().flatten().map(|&b| f64::from(b)));
    obs.extend(s.topology.line_cooldown.iter().map(|&v| f64::from(v)));
    obs.extend(s.topology.sub_cooldown.iter().map(|&v| f64::from(v)));
    obs.extend(s.topology.recovery_timer.iter().map(|&v| f64::from(v)));
    obs.extend(s.topology.overload_grace.iter().map(|&v| f64::from(v)));
    let ts = chronic.timestamps[s.t.min(chronic.len() - 1)];
    let tau = std::f64::consts::TAU;
    for (value, period) in [
        (f64::from(ts.month0()), 12.0),
        (f64::from(ts.weekday().num_days_from_monday()), 7.0),
        (f64::from(ts.hour()), 24.0),
        (f64::from(ts.minute()), 60.0),
    ] {
        obs.push((tau * value / period).sin());
        obs.push((tau * value / period).cos());
    }
    for v in &mut obs {
        if !v.is_finite() {
            *v = 0.0;
        }
    }
    obs
}

/// One line of an episode log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub t: usize,
    pub action: usize,
    pub reward: f64,
    pub step_score: f64,
    pub trips: Vec<usize>,
    pub game_over: Option<GameOverCause>,
}

/// Newline-delimited JSON episode log.
pub struct EpisodeLog<W: Write> {
    out: W,
}

impl<W: Write> EpisodeLog<W> {
    pub fn new(out: W) -> Self {
        EpisodeLog { out }
    }

    pub fn record(&mut self, action: usize, result: &StepResult) -> std::io::Result<()> {
        let rec = EpisodeRecord {
            t: result.info.t,
            action,
            reward: result.reward,
            step_score: result.info.step_score,
            trips: result.info.tripped_lines.clone(),
            game_over: result.info.game_over,
        };
        serde_json::to_writer(&mut self.out, &rec)?;
        self.out.write_all(b"\n")
    }

    pub fn into_inner(self) -> W {
        self.out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn score_identities() {
        assert_eq!(step_score(&[0.0; 20]), 20.0);
        assert_eq!(step_score(&[0.5; 20]), 15.0);
        let mut rho = vec![0.0; 20];
        rho[3] = 2.0;
        assert_eq!(step_score(&rho), 19.0);
        assert_eq!(reward(&[0.0; 20], false), 1.0);
        assert_eq!(reward(&[0.5; 20], false), 0.75);
        assert_eq!(reward(&[0.5; 20], true), -1.0);
        assert_eq!(chronic_score(&[10.0, 12.0], true), 0.0);
        assert_eq!(chronic_score(&[10.0, 12.0], false), 22.0);
        assert_eq!(total_score(&[1.0, 2.5]), 3.5);
    }

    #[test]
    fn layout_length_for_ieee14() {
        let grid = GridModel::ieee14();
        let expected = 2 * 5 + 2 * 11 + 20 * 9 + 56 + 20 + 14 + 20 + 20 + 8;
        assert_eq!(observation_len(&grid), expected);
    }
}
