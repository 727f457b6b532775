use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};

use gridtopo::actions::{build_full_space, reduce_space, sample_states, ActionManifest, ActionSpace};
use gridtopo::chronics::{generate_synthetic, load_scenario_set, write_manifest, Chronic};
use gridtopo::config::RunConfig;
use gridtopo::env::{observation_layout, observation_len};
use gridtopo::evaluation::{evaluate, sweep, Agent, EWConfig, EvaluationReport, LAMBDA_GRID};
use gridtopo::grid::GridModel;
use gridtopo::imitation::{generate_dataset, pretrain, Dataset, Rollout};
use gridtopo::nn::Network;
use gridtopo::powerflow::FlowMode;
use gridtopo::training::{train, Exploration, TrainOutput};

#[derive(Parser, Debug)]
#[command(name = "gridtopo", version, about = "Topology control agents for power grids")]
struct Cli {
    /// Grid model JSON (defaults to the bundled IEEE 14-bus model).
    #[arg(long, global = true)]
    grid: Option<PathBuf>,
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Power-flow mode, overriding the config.
    #[arg(long, global = true, value_enum)]
    mode: Option<ModeArg>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ModeArg {
    Ac,
    Dc,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate synthetic scenarios plus a manifest.
    GenChronics {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 20)]
        count: usize,
        /// Seed of the first scenario; later ones use consecutive seeds.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        days: Option<usize>,
        #[arg(long)]
        load_scale: Option<f64>,
    },
    /// Build the reduced action space and write its manifest.
    BuildActions {
        #[arg(long)]
        scenarios: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        budget: Option<usize>,
    },
    /// Label visited states with simulated one-step rewards.
    GenImitation {
        #[arg(long)]
        scenarios: PathBuf,
        #[arg(long)]
        actions: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long, value_enum)]
        rollout: Option<RolloutArg>,
    },
    /// Supervised pretraining on an imitation dataset.
    Pretrain {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        actions: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Deep Q-learning.
    Train {
        #[arg(long)]
        scenarios: PathBuf,
        #[arg(long)]
        actions: PathBuf,
        /// Initial weights, e.g. from `pretrain`.
        #[arg(long, required_unless_present = "cold_start")]
        weights: Option<PathBuf>,
        /// Start from freshly initialized weights instead.
        #[arg(long, conflicts_with = "weights")]
        cold_start: bool,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        episodes: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_enum)]
        exploration: Option<ExplorationArg>,
    },
    /// Run an agent on a scenario set.
    Evaluate {
        #[arg(long, value_enum)]
        agent: AgentArg,
        #[command(flatten)]
        common: EvalArgs,
        #[arg(long)]
        lambda: Option<f64>,
    },
    /// Early-warning evaluation over a grid of thresholds.
    Sweep {
        #[command(flatten)]
        common: EvalArgs,
        /// Thresholds (defaults to the standard grid).
        #[arg(long, value_delimiter = ',')]
        lambdas: Vec<f64>,
    },
    /// Print the observation layout, an action manifest, or weight metadata.
    Inspect {
        #[arg(long)]
        weights: Option<PathBuf>,
        #[arg(long)]
        actions: Option<PathBuf>,
        #[arg(long)]
        layout: bool,
    },
    /// Write one dataset sample as CSV.
    ExportSample {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, default_value_t = 0)]
        index: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    scenarios: PathBuf,
    #[arg(long)]
    actions: PathBuf,
    #[arg(long)]
    weights: Option<PathBuf>,
    /// Guided width N_g.
    #[arg(long)]
    width: Option<usize>,
    /// CSV report path (sweep: a directory).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum RolloutArg {
    Greedy,
    DoNothing,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ExplorationArg {
    Guided,
    EpsilonGreedy,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum AgentArg {
    DoNothing,
    Greedy,
    Guided,
    Ew,
}

struct Ctx {
    grid: Arc<GridModel>,
    cfg: RunConfig,
}

impl Ctx {
    fn scenarios(&self, path: &Path) -> anyhow::Result<Vec<(String, Arc<Chronic>)>> {
        let set = load_scenario_set(path, &self.grid).with_context(|| format!("loading scenarios from {}", path.display()))?;
        if set.is_empty() {
            bail!("no scenarios found in {}", path.display());
        }
        Ok(set.into_iter().map(|(id, c)| (id, Arc::new(c))).collect())
    }

    fn space(&self, path: &Path) -> anyhow::Result<(ActionSpace, [u8; 32])> {
        let manifest = ActionManifest::load(path)?;
        let space = ActionSpace::from_manifest(&self.grid, &manifest)?;
        Ok((space, manifest.hash()))
    }

    fn weights(&self, path: &Path, hash: &[u8; 32]) -> anyhow::Result<Network> {
        let (net, _) = Network::load(path, Some(hash)).with_context(|| format!("loading weights {}", path.display()))?;
        Ok(net)
    }
}

fn create_parent(path: &Path) -> anyhow::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let grid = match &cli.grid {
        Some(p) => GridModel::load(p)?,
        None => GridModel::ieee14(),
    };
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(m) = cli.mode {
        cfg.env.mode = match m {
            ModeArg::Ac => FlowMode::Ac,
            ModeArg::Dc => FlowMode::Dc,
        };
    }
    let ctx = Ctx {
        grid: Arc::new(grid),
        cfg,
    };
    let grid = &ctx.grid;
    let cfg = &ctx.cfg;

    match cli.command {
        Command::GenChronics {
            out,
            count,
            seed,
            days,
            load_scale,
        } => {
            let mut syn = cfg.synthetic.clone();
            syn.days = days.unwrap_or(syn.days);
            syn.load_scale = load_scale.unwrap_or(syn.load_scale);
            let first = seed.unwrap_or(syn.seed);
            fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            let mut names = Vec::with_capacity(count);
            for k in 0..count as u64 {
                let c = generate_synthetic(grid, &gridtopo::chronics::SyntheticConfig { seed: first + k, ..syn.clone() })?;
                let name = format!("scenario_{:04}", first + k);
                c.write(grid, out.join(&name))?;
                names.push(name);
            }
            let manifest = write_manifest(&out, &names)?;
            println!("wrote {count} scenarios; manifest {}", manifest.display());
        }
        Command::BuildActions { scenarios, out, budget } => {
            let set = ctx.scenarios(&scenarios)?;
            let chronics: Vec<Arc<Chronic>> = set.into_iter().map(|(_, c)| c).collect();
            let states = sample_states(grid, &chronics, &cfg.env, cfg.actions.state_stride, cfg.actions.state_offset)?;
            let full = build_full_space(grid);
            let space = reduce_space(&full, &states, budget.unwrap_or(cfg.actions.budget))?;
            let manifest = space.to_manifest(grid);
            create_parent(&out)?;
            manifest.save(&out)?;
            println!(
                "full space {}, reduced {} from {} states; hash {}",
                full.len(),
                space.len(),
                states.len(),
                manifest.hash_hex()
            );
        }
        Command::GenImitation {
            scenarios,
            actions,
            out,
            steps,
            rollout,
        } => {
            let set = ctx.scenarios(&scenarios)?;
            let (space, _) = ctx.space(&actions)?;
            let chronics: Vec<Arc<Chronic>> = set.into_iter().map(|(_, c)| c).collect();
            let rollout = match rollout {
                Some(RolloutArg::DoNothing) => Rollout::DoNothing,
                Some(RolloutArg::Greedy) => Rollout::Greedy,
                None => cfg.imitation.rollout,
            };
            let (dataset, skipped) = generate_dataset(
                grid,
                &chronics,
                &cfg.env,
                &space,
                steps.unwrap_or(cfg.imitation.steps_per_scenario),
                rollout,
            );
            for s in &skipped {
                eprintln!("skipped scenario {}: {}", s.scenario, s.reason);
            }
            create_parent(&out)?;
            dataset.save(&out)?;
            println!("{} samples, {} actions", dataset.samples.len(), dataset.n_actions);
        }
        Command::Pretrain {
            dataset,
            actions,
            out,
            epochs,
            seed,
        } => {
            let data = Dataset::load(&dataset)?;
            let (space, hash) = ctx.space(&actions)?;
            if data.manifest_hash != hash {
                bail!("dataset was built for a different action space");
            }
            let mut imit = cfg.imitation.clone();
            imit.epochs = epochs.unwrap_or(imit.epochs);
            imit.seed = seed.unwrap_or(imit.seed);
            let mut net = Network::new(cfg.net.build(observation_len(grid), space.len()))?;
            net.calibrate_input_stats(data.states().view());
            let report = pretrain(&mut net, &data, &imit)?;
            for e in &report.history {
                match e.validation {
                    Some(v) => println!("epoch {:>4}  train {:.6}  validation {:.6}", e.epoch, e.train, v),
                    None => println!("epoch {:>4}  train {:.6}", e.epoch, e.train),
                }
            }
            create_parent(&out)?;
            net.save(&out, &hash)?;
            println!("kept epoch {}; wrote {}", report.best_epoch, out.display());
        }
        Command::Train {
            scenarios,
            actions,
            weights,
            cold_start: _,
            out,
            episodes,
            seed,
            exploration,
        } => {
            let set = ctx.scenarios(&scenarios)?;
            let (space, hash) = ctx.space(&actions)?;
            let chronics: Vec<Arc<Chronic>> = set.into_iter().map(|(_, c)| c).collect();
            let mut tc = cfg.train.clone();
            tc.episodes = episodes.unwrap_or(tc.episodes);
            tc.seed = seed.unwrap_or(tc.seed);
            if let Some(e) = exploration {
                tc.exploration = match e {
                    ExplorationArg::Guided => Exploration::Guided,
                    ExplorationArg::EpsilonGreedy => Exploration::EpsilonGreedy,
                };
            }
            let net = match &weights {
                Some(p) => ctx.weights(p, &hash)?,
                None => Network::new(cfg.net.build(observation_len(grid), space.len()))?,
            };
            let output = TrainOutput {
                dir: out.clone(),
                manifest_hash: hash,
            };
            let outcome = train(grid, &chronics, &cfg.env, &space, net, &tc, Some(&output))?;
            let completed = outcome.stats.iter().filter(|s| s.completed).count();
            println!(
                "{} episodes, {} full-horizon, {} optimizer steps; first full survival {}",
                outcome.stats.len(),
                completed,
                outcome.optimizer_steps,
                outcome.first_full_survival().map_or("never".into(), |e| e.to_string())
            );
        }
        Command::Evaluate { agent, common, lambda } => {
            let set = ctx.scenarios(&common.scenarios)?;
            let (space, hash) = ctx.space(&common.actions)?;
            let width = common.width.unwrap_or(cfg.ew.guided_width);
            let load_net = || -> anyhow::Result<Arc<Network>> {
                let p = common.weights.as_ref().context("--weights is required for this agent")?;
                Ok(Arc::new(ctx.weights(p, &hash)?))
            };
            let agent = match agent {
                AgentArg::DoNothing => Agent::DoNothing,
                AgentArg::Greedy => Agent::Greedy,
                AgentArg::Guided => Agent::Guided { net: load_net()?, width },
                AgentArg::Ew => Agent::EarlyWarning {
                    net: load_net()?,
                    config: EWConfig {
                        lambda: lambda.unwrap_or(cfg.ew.lambda),
                        guided_width: width,
                        ..cfg.ew.clone()
                    },
                },
            };
            if let Agent::EarlyWarning { config, .. } = &agent {
                if !(config.lambda > 0.0) {
                    bail!("lambda must be positive");
                }
            }
            let report = evaluate(grid, &set, &cfg.env, &space, &agent);
            let out = common.out.unwrap_or_else(|| PathBuf::from("report.csv"));
            create_parent(&out)?;
            report.write_csv(&out)?;
            for r in report.rows.iter().filter(|r| r.error.is_some()) {
                eprintln!("{}: {}", r.scenario_id, r.error.as_deref().unwrap_or_default());
            }
            print!("{}", EvaluationReport::table(std::slice::from_ref(&report)));
            println!("report: {}", out.display());
        }
        Command::Sweep { common, lambdas } => {
            let set = ctx.scenarios(&common.scenarios)?;
            let (space, hash) = ctx.space(&common.actions)?;
            let p = common.weights.as_ref().context("--weights is required")?;
            let net = Arc::new(ctx.weights(p, &hash)?);
            let lambdas = if lambdas.is_empty() { LAMBDA_GRID.to_vec() } else { lambdas };
            if lambdas.iter().any(|&l| !(l > 0.0)) {
                bail!("lambda must be positive");
            }
            let base = EWConfig {
                guided_width: common.width.unwrap_or(cfg.ew.guided_width),
                ..cfg.ew.clone()
            };
            let reports = sweep(grid, &set, &cfg.env, &space, net, &base, &lambdas);
            if let Some(dir) = &common.out {
                fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
                for (r, l) in reports.iter().zip(&lambdas) {
                    r.write_csv(&dir.join(format!("ew_{l}.csv")))?;
                }
            }
            print!("{}", EvaluationReport::table(&reports));
        }
        Command::Inspect { weights, actions, layout } => {
            if weights.is_none() && actions.is_none() && !layout {
                bail!("nothing to inspect; pass --weights, --actions or --layout");
            }
            if layout {
                let mut offset = 0;
                for (name, len) in observation_layout(grid) {
                    println!("{name:<14} {offset:>4}..{:<4}", offset + len);
                    offset += len;
                }
                println!("total {offset}");
            }
            if let Some(p) = actions {
                let manifest = ActionManifest::load(&p)?;
                let space = ActionSpace::from_manifest(grid, &manifest)?;
                println!("actions {}  hash {}", space.len(), manifest.hash_hex());
                for (i, a) in space.iter().enumerate() {
                    println!("{i:>5}  {}", a.describe(grid));
                }
            }
            if let Some(p) = weights {
                let (net, hash) = Network::load(&p, None)?;
                println!("config {}", serde_json::to_string(net.config())?);
                println!("manifest hash {}", hex::encode(hash));
                println!("parameters {}", net.param_count());
            }
        }
        Command::ExportSample { dataset, index, out } => {
            let data = Dataset::load(&dataset)?;
            match out {
                Some(p) => {
                    create_parent(&p)?;
                    let f = fs::File::create(&p).with_context(|| format!("creating {}", p.display()))?;
                    data.export_sample_csv(index, f)?;
                }
                None => {
                    let stdout = std::io::stdout();
                    let mut lock = stdout.lock();
                    data.export_sample_csv(index, &mut lock)?;
                    lock.flush()?;
                }
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
