//! Supervised pretraining data from exhaustive one-step simulation, the
//! top-weighted MSE loss and the pretraining loop.

use std::fs;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::actions::{is_legal, ActionSpace};
use crate::chronics::Chronic;
use crate::env::{EnvConfig, Environment, StepResult};
use crate::grid::GridModel;
use crate::nn::{Adam, Mode, Network};
use crate::training::{best_outcome, SelectionKey};
use crate::{Error, Result};

const MAGIC: &[u8; 4] = b"GTDS";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Rollout {
    /// Execute the best simulated action (same ordering as greedy selection).
    #[default]
    Greedy,
    DoNothing,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ImitationConfig {
    pub top_n: usize,
    pub alpha: f64,
    pub beta: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub val_fraction: f64,
    pub seed: u64,
    pub steps_per_scenario: usize,
    pub rollout: Rollout,
}

impl Default for ImitationConfig {
    fn default() -> Self {
        ImitationConfig {
            top_n: 10,
            alpha: 0.7,
            beta: 0.3,
            epochs: 100,
            batch_size: 32,
            lr: 1e-3,
            val_fraction: 0.1,
            seed: 0,
            steps_per_scenario: 1000,
            rollout: Rollout::Greedy,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImitationSample {
    pub state: Vec<f64>,
    pub labels: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub state_dim: usize,
    pub n_actions: usize,
    pub manifest_hash: [u8; 32],
    pub samples: Vec<ImitationSample>,
}

/// Simulated outcome of every action; `None` for illegal actions and
/// failed simulations.
pub fn simulate_all(env: &Environment, space: &ActionSpace) -> Vec<Option<StepResult>> {
    space
        .actions()
        .par_iter()
        .map(|a| if is_legal(env, a).legal { env.simulate(a).ok() } else { None })
        .collect()
}

/// Simulated one-step reward of every action; illegal actions get -1.
pub fn label_state(env: &Environment, space: &ActionSpace) -> Vec<f64> {
    labels_of(&simulate_all(env, space))
}

fn labels_of(outcomes: &[Option<StepResult>]) -> Vec<f64> {
    outcomes.iter().map(|r| r.as_ref().map_or(-1.0, |r| r.reward)).collect()
}

/// Index of the largest label, ties to the lowest index.
pub fn best_label(labels: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in labels.iter().enumerate() {
        if v > labels[best] {
            best = i;
        }
    }
    best
}

/// A scenario that could not be used.
#[derive(Debug, Clone, PartialEq)]
pub struct Skipped {
    pub scenario: usize,
    pub reason: String,
}

/// Roll each scenario forward and label every visited state.
pub fn generate_dataset(
    grid: &Arc<GridModel>,
    scenarios: &[Arc<Chronic>],
    env_config: &EnvConfig,
    space: &ActionSpace,
    steps_per_scenario: usize,
    rollout: Rollout,
) -> (Dataset, Vec<Skipped>) {
    let per: Vec<std::result::Result<Vec<ImitationSample>, Skipped>> = scenarios
        .par_iter()
        .enumerate()
        .map(|(k, chronic)| {
            let mut env = Environment::new(grid.clone(), chronic.clone(), env_config.clone()).map_err(|e| Skipped {
                scenario: k,
                reason: e.to_string(),
            })?;
            let mut obs = env.observe();
            let mut out = Vec::new();
            while out.len() < steps_per_scenario && !env.is_done() {
                let outcomes = simulate_all(&env, space);
                let labels = labels_of(&outcomes);
                let action = match rollout {
                    Rollout::Greedy => best_outcome(outcomes.iter().map(Option::as_ref), SelectionKey::Reward).unwrap_or(0),
                    Rollout::DoNothing => 0,
                };
                out.push(ImitationSample {
                    state: obs.clone(),
                    labels,
                });
                let step = env.step(&space.actions()[action]).map_err(|e| Skipped {
                    scenario: k,
                    reason: e.to_string(),
                })?;
                obs = step.observation;
            }
            Ok(out)
        })
        .collect();
    let mut samples = Vec::new();
    let mut skipped = Vec::new();
    for r in per {
        match r {
            Ok(s) => samples.extend(s),
            Err(s) => skipped.push(s),
        }
    }
    let state_dim = crate::env::observation_len(grid);
    (
        Dataset {
            state_dim,
            n_actions: space.len(),
            manifest_hash: space.to_manifest(grid).hash(),
            samples,
        },
        skipped,
    )
}

fn check_weights(len: usize, n: usize, alpha: f64, beta: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&alpha) || !(0.0..=1.0).contains(&beta) || ((alpha + beta) - 1.0).abs() > 1e-12 {
        return Err(Error::Config(format!("alpha {alpha} and beta {beta} must lie in [0, 1] and sum to 1")));
    }
    if n == 0 || n >= len {
        return Err(Error::Config(format!("top-N {n} must lie in [1, {len})")));
    }
    Ok(())
}

/// Positions sorted by label descending, ties by index.
fn label_order(label: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..label.len()).collect();
    order.sort_by(|&a, &b| label[b].total_cmp(&label[a]).then(a.cmp(&b)));
    order
}

/// `alpha * mean over the top-N labels + beta * mean over the rest` of the squared error.
pub fn weighted_mse(pred: &[f64], label: &[f64], n: usize, alpha: f64, beta: f64) -> Result<f64> {
    if pred.len() != label.len() {
        return Err(Error::Shape(format!("prediction length {} != label length {}", pred.len(), label.len())));
    }
    check_weights(label.len(), n, alpha, beta)?;
    let order = label_order(label);
    let sq = |i: usize| (pred[i] - label[i]).powi(2);
    let top: f64 = order[..n].iter().map(|&i| sq(i)).sum();
    let rest: f64 = order[n..].iter().map(|&i| sq(i)).sum();
    Ok(alpha * top / n as f64 + beta * rest / (label.len() - n) as f64)
}

/// Gradient of [`weighted_mse`] with respect to `pred`.
pub fn weighted_mse_grad(pred: &[f64], label: &[f64], n: usize, alpha: f64, beta: f64) -> Result<Vec<f64>> {
    if pred.len() != label.len() {
        return Err(Error::Shape(format!("prediction length {} != label length {}", pred.len(), label.len())));
    }
    check_weights(label.len(), n, alpha, beta)?;
    let order = label_order(label);
    let mut g = vec![0.0; pred.len()];
    let (wt, wr) = (2.0 * alpha / n as f64, 2.0 * beta / (label.len() - n) as f64);
    for (rank, &i) in order.iter().enumerate() {
        let w = if rank < n { wt } else { wr };
        g[i] = w * (pred[i] - label[i]);
    }
    Ok(g)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub train: f64,
    pub validation: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainReport {
    pub history: Vec<EpochLoss>,
    pub best_epoch: usize,
}

fn mean_loss(net: &Network, samples: &[&ImitationSample], cfg: &ImitationConfig) -> Result<f64> {
    if samples.is_empty() {
        return Ok(f64::NAN);
    }
    let mut total = 0.0;
    for chunk in samples.chunks(256) {
        let x = Network::rows(&chunk.iter().map(|s| s.state.clone()).collect::<Vec<_>>());
        let q = net.forward(x.view(), Mode::Infer)?.q;
        for (row, s) in q.rows().into_iter().zip(chunk) {
            total += weighted_mse(&row.to_vec(), &s.labels, cfg.top_n, cfg.alpha, cfg.beta)?;
        }
    }
    Ok(total / samples.len() as f64)
}

/// Adam on the weighted MSE. Leaves `net` at the epoch with the lowest
/// validation loss (training loss when there is no validation split).
pub fn pretrain(net: &mut Network, dataset: &Dataset, cfg: &ImitationConfig) -> Result<PretrainReport> {
    if dataset.samples.is_empty() {
        return Err(Error::Config("empty dataset".into()));
    }
    if dataset.n_actions != net.n_actions() || dataset.state_dim != net.config().input_dim {
        return Err(Error::Incompatible("dataset shape does not match the network".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut idx: Vec<usize> = (0..dataset.samples.len()).collect();
    idx.shuffle(&mut rng);
    let n_val = (dataset.samples.len() as f64 * cfg.val_fraction).round() as usize;
    let n_val = n_val.min(dataset.samples.len() - 1);
    let val: Vec<&ImitationSample> = idx[..n_val].iter().map(|&i| &dataset.samples[i]).collect();
    let mut train: Vec<&ImitationSample> = idx[n_val..].iter().map(|&i| &dataset.samples[i]).collect();

    let mut opt = Adam::new(net.param_count(), cfg.lr);
    let bsz = cfg.batch_size.max(1);
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best = (f64::INFINITY, 0, net.clone());
    for epoch in 1..=cfg.epochs {
        train.shuffle(&mut rng);
        for batch in train.chunks(bsz) {
            let x: Array2<f64> = Network::rows(&batch.iter().map(|s| s.state.clone()).collect::<Vec<_>>());
            let fwd = net.forward(x.view(), Mode::Train)?;
            let mut dq = Array2::zeros(fwd.q.raw_dim());
            for (i, s) in batch.iter().enumerate() {
                let g = weighted_mse_grad(&fwd.q.row(i).to_vec(), &s.labels, cfg.top_n, cfg.alpha, cfg.beta)?;
                for (a, v) in g.into_iter().enumerate() {
                    dq[(i, a)] = v / batch.len() as f64;
                }
            }
            let grad = net.backward(&fwd, dq.view());
            opt.step(&mut net.theta, &grad);
            net.update_running_stats(&fwd);
        }
        let train_loss = mean_loss(net, &train, cfg)?;
        let val_loss = (!val.is_empty()).then(|| mean_loss(net, &val, cfg)).transpose()?;
        let key = val_loss.unwrap_or(train_loss);
        if key < best.0 {
            best = (key, epoch, net.clone());
        }
        history.push(EpochLoss {
            epoch,
            train: train_loss,
            validation: val_loss,
        });
    }
    let best_epoch = best.1;
    if cfg.epochs > 0 {
        *net = best.2;
    }
    Ok(PretrainReport { history, best_epoch })
}

impl Dataset {
    pub fn states(&self) -> Array2<f64> {
        Network::rows(&self.samples.iter().map(|s| s.state.clone()).collect::<Vec<_>>())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(64 + self.samples.len() * 8 * (self.state_dim + self.n_actions));
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.samples.len() as u64).to_le_bytes());
        out.extend_from_slice(&(self.state_dim as u64).to_le_bytes());
        out.extend_from_slice(&(self.n_actions as u64).to_le_bytes());
        out.extend_from_slice(&self.manifest_hash);
        for s in &self.samples {
            for v in s.state.iter().chain(&s.labels) {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Dataset> {
        let bad = |m: &str| Error::Incompatible(format!("dataset file: {m}"));
        if bytes.len() < 60 || &bytes[..4] != MAGIC {
            return Err(bad("missing header"));
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
        let u64_at = |o: usize| u64::from_le_bytes(bytes[o..o + 8].try_into().unwrap()) as usize;
        if u32_at(4) != FORMAT_VERSION {
            return Err(bad("unsupported version"));
        }
        let (count, state_dim, n_actions) = (u64_at(8), u64_at(16), u64_at(24));
        let manifest_hash: [u8; 32] = bytes[32..64].try_into().unwrap();
        let width = state_dim + n_actions;
        let body = &bytes[64..];
        if body.len() != count * width * 8 {
            return Err(bad("size does not match header"));
        }
        let vals: Vec<f64> = body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let samples = vals
            .chunks_exact(width.max(1))
            .take(count)
            .map(|row| ImitationSample {
                state: row[..state_dim].to_vec(),
                labels: row[state_dim..].to_vec(),
            })
            .collect();
        Ok(Dataset {
            state_dim,
            n_actions,
            manifest_hash,
            samples,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Dataset> {
        Dataset::from_bytes(&fs::read(path).map_err(|e| Error::io(path, e))?)
    }

    /// Write one sample as `section,index,value` rows.
    pub fn export_sample_csv<W: Write>(&self, index: usize, out: W) -> Result<()> {
        let s = self.samples.get(index).ok_or_else(|| {
            Error::Config(format!("sample {index} out of range (dataset has {})", self.samples.len()))
        })?;
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["section", "index", "value"])?;
        for (section, values) in [("state", &s.state), ("label", &s.labels)] {
            for (i, v) in values.iter().enumerate() {
                w.write_record([section, &i.to_string(), &v.to_string()])?;
            }
        }
        w.flush().map_err(|e| Error::io(Path::new("<csv>"), e))?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn weighted_mse_hand_example() {
        // Labels sort to positions 1, 3 | 0, 2.
        let label = [0.1, 0.9, -0.5, 0.4];
        let pred = [0.0, 1.0, 0.0, 0.0];
        let top = (0.01 + 0.16) / 2.0;
        let rest = (0.01 + 0.25) / 2.0;
        let got = weighted_mse(&pred, &label, 2, 0.7, 0.3).unwrap();
        assert!((got - (0.7 * top + 0.3 * rest)).abs() < 1e-15);
        let plain = (0.01 + 0.01 + 0.25 + 0.16) / 4.0;
        assert!((weighted_mse(&pred, &label, 2, 0.5, 0.5).unwrap() - plain).abs() < 1e-15);
    }

    #[test]
    fn weighted_mse_guards() {
        assert!(weighted_mse(&[0.0; 3], &[0.0; 4], 1, 0.5, 0.5).is_err());
        assert!(weighted_mse(&[0.0; 4], &[0.0; 4], 4, 0.5, 0.5).is_err());
        assert!(weighted_mse(&[0.0; 4], &[0.0; 4], 1, 0.6, 0.6).is_err());
        assert_eq!(weighted_mse(&[0.3; 4], &[0.3; 4], 1, 0.7, 0.3).unwrap(), 0.0);
    }

    #[test]
    fn alpha_one_ignores_rest() {
        let label = [1.0, 0.0, 0.0];
        let a = weighted_mse(&[1.0, 5.0, -5.0], &label, 1, 1.0, 0.0).unwrap();
        assert_eq!(a, 0.0);
    }

    #[test]
    fn gradient_matches_difference() {
        let label = [0.2, -0.1, 0.7, 0.3, 0.0];
        let pred = [0.1, 0.4, 0.5, -0.2, 0.9];
        let g = weighted_mse_grad(&pred, &label, 2, 0.7, 0.3).unwrap();
        for i in 0..5 {
            let mut p = pred;
            p[i] += 1e-6;
            let up = weighted_mse(&p, &label, 2, 0.7, 0.3).unwrap();
            p[i] -= 2e-6;
            let dn = weighted_mse(&p, &label, 2, 0.7, 0.3).unwrap();
            assert!((g[i] - (up - dn) / 2e-6).abs() < 1e-8);
        }
    }

    #[test]
    fn dataset_round_trip() {
        let d = Dataset {
            state_dim: 2,
            n_actions: 3,
            manifest_hash: [7; 32],
            samples: vec![ImitationSample {
                state: vec![1.5, -2.0],
                labels: vec![0.1, -1.0, 0.3],
            }],
        };
        assert_eq!(Dataset::from_bytes(&d.to_bytes()).unwrap(), d);
        let mut csv = Vec::new();
        d.export_sample_csv(0, &mut csv).unwrap();
        assert!(String::from_utf8(csv).unwrap().starts_with("section,index,value\nstate,0,1.5\n"));
        assert!(d.export_sample_csv(1, Vec::new()).is_err());
    }
}
