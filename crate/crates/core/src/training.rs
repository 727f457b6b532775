//! Deep Q-learning with guided exploration: the top-N_g actions by Q are
//! simulated and the best predicted one is executed.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::actions::{is_legal, ActionSpace};
use crate::chronics::Chronic;
use crate::env::{EnvConfig, Environment, GameOverCause, StepResult};
use crate::grid::GridModel;
use crate::nn::{Adam, Network};
use crate::replay::{Experience, PrioritizedBuffer, ReplayConfig};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetMode {
    /// `r + gamma * max_a' Q(s', a'; target)`.
    #[default]
    Literal,
    /// Action chosen by the main network, evaluated by the target network.
    Ddqn,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Exploration {
    #[default]
    Guided,
    EpsilonGreedy,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionKey {
    #[default]
    Reward,
    StepScore,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub episodes: usize,
    pub horizon: usize,
    pub guided_width: usize,
    pub batch_size: usize,
    pub update_every: usize,
    pub target_copy_every: usize,
    pub gamma: f64,
    pub lr: f64,
    pub target_mode: TargetMode,
    pub exploration: Exploration,
    pub eps_start: f64,
    pub eps_end: f64,
    /// Fraction of episodes over which epsilon is annealed.
    pub eps_fraction: f64,
    pub replay: ReplayConfig,
    pub seed: u64,
    /// Write a checkpoint every this many episodes (0 disables).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            episodes: 10_000,
            horizon: 288,
            guided_width: 10,
            batch_size: 32,
            update_every: 4,
            target_copy_every: 1000,
            gamma: 0.95,
            lr: 1e-4,
            target_mode: TargetMode::Literal,
            exploration: Exploration::Guided,
            eps_start: 1.0,
            eps_end: 0.05,
            eps_fraction: 0.5,
            replay: ReplayConfig::default(),
            seed: 0,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.guided_width == 0 || self.update_every == 0 || self.target_copy_every == 0 || self.batch_size == 0 {
            return Err(Error::Config("widths and periods must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::Config(format!("gamma {} outside [0, 1]", self.gamma)));
        }
        Ok(())
    }

    /// Epsilon after `episode` episodes.
    pub fn epsilon(&self, episode: usize) -> f64 {
        let span = (self.episodes as f64 * self.eps_fraction).max(1.0);
        let p = (episode as f64 / span).min(1.0);
        self.eps_start + (self.eps_end - self.eps_start) * p
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Guided {
    pub action: usize,
    pub predicted: Option<StepResult>,
}

/// Ordering key for a predicted outcome: survivors first, then outcomes
/// with every line below its limit, then the value.
pub fn selection_value(result: &StepResult, key: SelectionKey) -> (bool, bool, f64) {
    let alive = result.info.game_over.is_none();
    let secure = alive && result.info.rho.iter().all(|&r| r < 1.0);
    let v = match key {
        SelectionKey::Reward => result.reward,
        SelectionKey::StepScore => result.info.step_score,
    };
    (alive, secure, v)
}

fn better(a: (bool, bool, f64), b: (bool, bool, f64)) -> bool {
    (a.0, a.1) > (b.0, b.1) || (a.0, a.1) == (b.0, b.1) && a.2 > b.2
}

/// Indices of the `n` largest entries, ties to the lower index.
pub fn top_n(q: &[f64], n: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..q.len()).collect();
    idx.sort_by(|&a, &b| q[b].total_cmp(&q[a]).then(a.cmp(&b)));
    idx.truncate(n);
    idx
}

/// Position in `outcomes` of the best predicted outcome under the tiered
/// key; ties go to the earlier entry.
pub fn best_outcome<'a>(outcomes: impl IntoIterator<Item = Option<&'a StepResult>>, key: SelectionKey) -> Option<usize> {
    let mut best: Option<(usize, (bool, bool, f64))> = None;
    for (i, r) in outcomes.into_iter().enumerate() {
        let Some(r) = r else { continue };
        let v = selection_value(r, key);
        if best.is_none_or(|(_, b)| better(v, b)) {
            best = Some((i, v));
        }
    }
    best.map(|(i, _)| i)
}

/// Simulate the legal actions among `candidates` and pick the best predicted
/// outcome; ties go to the lower action index. Falls back to do-nothing.
pub fn select_among(env: &Environment, space: &ActionSpace, candidates: &[usize], key: SelectionKey) -> Guided {
    let mut sorted = candidates.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    let mut sims: Vec<Option<StepResult>> = sorted
        .par_iter()
        .map(|&i| {
            let a = &space.actions()[i];
            if !is_legal(env, a).legal {
                return None;
            }
            env.simulate(a).ok()
        })
        .collect();
    match best_outcome(sims.iter().map(Option::as_ref), key) {
        Some(k) => Guided {
            action: sorted[k],
            predicted: sims[k].take(),
        },
        None => Guided {
            action: 0,
            predicted: None,
        },
    }
}

/// Take the `n_g` highest-Q actions and return the best simulated one.
pub fn guided_select(
    net: &Network,
    env: &Environment,
    observation: &[f64],
    space: &ActionSpace,
    n_g: usize,
    key: SelectionKey,
) -> Result<Guided> {
    let q = net.q_single(observation)?;
    Ok(select_among(env, space, &top_n(&q, n_g.max(1)), key))
}

/// Exhaustive one-step search over every action.
pub fn greedy_select(env: &Environment, space: &ActionSpace, key: SelectionKey) -> Guided {
    let all: Vec<usize> = (0..space.len()).collect();
    select_among(env, space, &all, key)
}

/// Bootstrapped targets for a batch of transitions.
pub fn td_targets(
    rewards: &[f64],
    dones: &[bool],
    next_states: &Array2<f64>,
    target: &Network,
    main: &Network,
    gamma: f64,
    mode: TargetMode,
) -> Result<Vec<f64>> {
    let q_t = target.q_values(next_states.view())?;
    let q_m = match mode {
        TargetMode::Literal => None,
        TargetMode::Ddqn => Some(main.q_values(next_states.view())?),
    };
    Ok((0..rewards.len())
        .map(|i| {
            if dones[i] {
                return rewards[i];
            }
            let row = q_t.row(i);
            let bootstrap = match &q_m {
                None => row.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                Some(m) => {
                    let r = m.row(i);
                    let a = top_n(&r.to_vec(), 1)[0];
                    row[a]
                }
            };
            rewards[i] + gamma * bootstrap
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeStats {
    pub episode: usize,
    pub scenario: usize,
    pub steps: usize,
    pub reward_sum: f64,
    pub score_sum: f64,
    pub cause: Option<GameOverCause>,
    /// Reached the episode horizon without game over.
    pub completed: bool,
    pub ms: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub net: Network,
    pub stats: Vec<EpisodeStats>,
    pub optimizer_steps: usize,
    pub buffer_len: usize,
    pub skipped: Vec<(usize, String)>,
}

impl TrainOutcome {
    /// Index of the first episode that survived its whole horizon.
    pub fn first_full_survival(&self) -> Option<usize> {
        self.stats.iter().find(|s| s.completed).map(|s| s.episode)
    }
}

/// Where checkpoints and the stats file go.
#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub dir: PathBuf,
    pub manifest_hash: [u8; 32],
}

pub fn write_stats_csv(path: &Path, stats: &[EpisodeStats]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["episode", "steps", "reward_sum", "score_sum", "cause", "ms"])?;
    for s in stats {
        w.write_record([
            s.episode.to_string(),
            s.steps.to_string(),
            s.reward_sum.to_string(),
            s.score_sum.to_string(),
            s.cause.map_or("", |c| c.as_str()).to_string(),
            format!("{:.3}", s.ms),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn checkpoint(net: &Network, out: &TrainOutput, name: &str) -> Result<()> {
    let path = out.dir.join(name);
    net.save(&path, &out.manifest_hash)
        .map_err(|e| Error::Config(format!("writing checkpoint {}: {e}", path.display())))
}

/// Run the training loop for `config.episodes` episodes over `scenarios`.
pub fn train(
    grid: &Arc<GridModel>,
    scenarios: &[Arc<Chronic>],
    env_config: &EnvConfig,
    space: &ActionSpace,
    net: Network,
    config: &TrainConfig,
    output: Option<&TrainOutput>,
) -> Result<TrainOutcome> {
    config.validate()?;
    if net.n_actions() != space.len() {
        return Err(Error::Incompatible(format!(
            "network has {} outputs, action space has {}",
            net.n_actions(),
            space.len()
        )));
    }
    if let Some(out) = output {
        fs::create_dir_all(&out.dir).map_err(|e| Error::io(&out.dir, e))?;
    }
    let mut net = net;
    let mut target = net.clone();
    let mut opt = Adam::new(net.param_count(), config.lr);
    let mut buffer = PrioritizedBuffer::new(ReplayConfig {
        seed: config.replay.seed ^ config.seed,
        ..config.replay.clone()
    })?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let env_config = EnvConfig {
        horizon: Some(config.horizon),
        ..env_config.clone()
    };

    let mut order: Vec<usize> = (0..scenarios.len()).collect();
    let mut stats = Vec::with_capacity(config.episodes);
    let mut skipped = Vec::new();
    let (mut env_steps, mut updates) = (0usize, 0usize);

    for episode in 0..config.episodes {
        if scenarios.is_empty() {
            break;
        }
        if episode % scenarios.len() == 0 {
            order.shuffle(&mut rng);
        }
        let scenario = order[episode % scenarios.len()];
        let started = Instant::now();
        let mut env = match Environment::new(grid.clone(), scenarios[scenario].clone(), env_config.clone()) {
            Ok(env) => env,
            Err(e) => {
                skipped.push((scenario, e.to_string()));
                continue;
            }
        };
        buffer.anneal_beta(episode as f64 / config.episodes.max(1) as f64);
        let eps = config.epsilon(episode);
        let mut obs = env.observe();
        let target_steps = env.remaining_steps();
        let (mut reward_sum, mut score_sum, mut steps) = (0.0, 0.0, 0usize);
        while !env.is_done() {
            let action = match config.exploration {
                Exploration::Guided => {
                    guided_select(&net, &env, &obs, space, config.guided_width, SelectionKey::Reward)?.action
                }
                Exploration::EpsilonGreedy => {
                    if rng.random::<f64>() < eps {
                        rng.random_range(0..space.len())
                    } else {
                        top_n(&net.q_single(&obs)?, 1)[0]
                    }
                }
            };
            let result = env.step(&space.actions()[action])?;
            steps += 1;
            env_steps += 1;
            reward_sum += result.reward;
            score_sum += result.info.step_score;
            buffer.push(
                Experience {
                    state: obs,
                    action,
                    reward: result.reward,
                    next_state: result.observation.clone(),
                    done: result.info.game_over.is_some(),
                },
                None,
            );
            obs = result.observation;

            if env_steps % config.update_every == 0 && buffer.len() >= config.batch_size {
                let sample = buffer.sample(config.batch_size)?;
                let states = Network::rows(&sample.experiences.iter().map(|e| e.state.clone()).collect::<Vec<_>>());
                let next = Network::rows(&sample.experiences.iter().map(|e| e.next_state.clone()).collect::<Vec<_>>());
                let rewards: Vec<f64> = sample.experiences.iter().map(|e| e.reward).collect();
                let dones: Vec<bool> = sample.experiences.iter().map(|e| e.done).collect();
                let actions: Vec<usize> = sample.experiences.iter().map(|e| e.action).collect();
                let indices = sample.indices.clone();
                let weights = sample.weights.clone();
                let y = td_targets(&rewards, &dones, &next, &target, &net, config.gamma, config.target_mode)?;
                let (_, grad, fwd) = net.td_loss_grad(states.view(), &actions, &y, &weights)?;
                let td: Vec<f64> = (0..y.len()).map(|i| y[i] - fwd.q[(i, actions[i])]).collect();
                opt.step(&mut net.theta, &grad);
                net.update_running_stats(&fwd);
                buffer.update_priorities(&indices, &td);
                updates += 1;
                if updates % config.target_copy_every == 0 {
                    net.copy_weights_to(&mut target)?;
                }
            }
        }
        let cause = env.game_over();
        stats.push(EpisodeStats {
            episode,
            scenario,
            steps,
            reward_sum,
            score_sum,
            cause,
            completed: cause.is_none() && steps == target_steps,
            ms: started.elapsed().as_secs_f64() * 1e3,
        });
        if let Some(out) = output {
            if config.checkpoint_every > 0 && (episode + 1) % config.checkpoint_every == 0 {
                checkpoint(&net, out, &format!("checkpoint_{:06}.bin", episode + 1))?;
            }
        }
    }
    if let Some(out) = output {
        checkpoint(&net, out, "final.bin")?;
        write_stats_csv(&out.dir.join("train_stats.csv"), &stats)?;
    }
    Ok(TrainOutcome {
        net,
        stats,
        optimizer_steps: updates,
        buffer_len: buffer.len(),
        skipped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn top_n_ties_by_index() {
        assert_eq!(top_n(&[1.0, 3.0, 3.0, 2.0], 3), vec![1, 2, 3]);
        assert_eq!(top_n(&[0.0; 4], 2), vec![0, 1]);
    }

    #[test]
    fn epsilon_schedule() {
        let c = TrainConfig {
            episodes: 100,
            ..TrainConfig::default()
        };
        assert_eq!(c.epsilon(0), 1.0);
        assert!((c.epsilon(25) - 0.525).abs() < 1e-12);
        assert!((c.epsilon(50) - 0.05).abs() < 1e-12);
        assert!((c.epsilon(99) - 0.05).abs() < 1e-12);
    }

    #[test]
    fn config_guards() {
        let mut c = TrainConfig::default();
        c.gamma = 1.5;
        assert!(c.validate().is_err());
        c.gamma = 0.9;
        c.guided_width = 0;
        assert!(c.validate().is_err());
    }
}
