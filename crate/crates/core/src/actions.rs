//! Discrete topology actions: enumeration, reduction, indexing and legality.

use std::collections::HashMap;
use std::path::Path;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::chronics::Chronic;
use crate::env::{EnvConfig, Environment};
use crate::grid::{apply_action, connectivity_check, GridModel, TopologyState};
use crate::{Error, Result};

/// New bus-bar assignment for every slot of one substation.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeSplit {
    /// Substation position in the grid.
    pub sub: usize,
    pub assignment: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Action {
    DoNothing,
    /// Toggle a line's service status.
    LineSwitch(usize),
    /// Reassign a substation's elements; all ones rejoins the substation.
    NodeSplit(NodeSplit),
    Combo { node: NodeSplit, line: usize },
}

impl Action {
    pub fn touched_line(&self) -> Option<usize> {
        match self {
            Action::LineSwitch(l) | Action::Combo { line: l, .. } => Some(*l),
            _ => None,
        }
    }

    pub fn touched_sub(&self) -> Option<usize> {
        match self {
            Action::NodeSplit(n) | Action::Combo { node: n, .. } => Some(n.sub),
            _ => None,
        }
    }

    pub fn node_part(&self) -> Option<&NodeSplit> {
        match self {
            Action::NodeSplit(n) | Action::Combo { node: n, .. } => Some(n),
            _ => None,
        }
    }

    pub fn describe(&self, grid: &GridModel) -> String {
        let node = |n: &NodeSplit| {
            let bars: String = n.assignment.iter().map(|b| char::from(b'0' + b)).collect();
            format!("sub {} -> {bars}", grid.substations()[n.sub].id)
        };
        match self {
            Action::DoNothing => "do nothing".into(),
            Action::LineSwitch(l) => format!("switch {}", grid.lines()[*l].id),
            Action::NodeSplit(n) => node(n),
            Action::Combo { node: n, line } => format!("{} + switch {}", node(n), grid.lines()[*line].id),
        }
    }
}

/// Every nontrivial split of every substation, slot 0 pinned to bus-bar 1,
/// keeping only splits where each occupied bus-bar carries a line endpoint.
pub fn enumerate_node_actions(grid: &GridModel) -> Vec<Action> {
    let mut out = Vec::new();
    for sub in 0..grid.n_subs() {
        let slots = grid.slots(sub);
        let k = slots.len();
        if k < 2 {
            continue;
        }
        for mask in 1u64..(1u64 << (k - 1)) {
            let assignment: Vec<u8> = (0..k)
                .map(|i| if i > 0 && mask >> (i - 1) & 1 == 1 { 2 } else { 1 })
                .collect();
            let bar_has_line = |bar: u8| {
                slots
                    .iter()
                    .zip(&assignment)
                    .any(|(s, &b)| b == bar && s.line().is_some())
            };
            if bar_has_line(1) && bar_has_line(2) {
                out.push(Action::NodeSplit(NodeSplit { sub, assignment }));
            }
        }
    }
    out
}

/// Count of splits before the line-endpoint filter: `sum(2^(k-1) - 1)`.
pub fn count_unfiltered_node_splits(grid: &GridModel) -> usize {
    (0..grid.n_subs())
        .map(|s| grid.slots(s).len())
        .filter(|&k| k >= 1)
        .map(|k| (1usize << (k - 1)) - 1)
        .sum()
}

/// Ordered action list with an index bijection. Index 0 is always do-nothing.
#[derive(Debug, Clone, PartialEq)]
pub struct ActionSpace {
    actions: Vec<Action>,
    index: HashMap<Action, usize>,
}

impl ActionSpace {
    pub fn new(actions: Vec<Action>) -> Result<Self> {
        if actions.first() != Some(&Action::DoNothing) {
            return Err(Error::Config("action space must start with do-nothing".into()));
        }
        let mut index = HashMap::with_capacity(actions.len());
        for (i, a) in actions.iter().enumerate() {
            if index.insert(a.clone(), i).is_some() {
                return Err(Error::Config(format!("duplicate action at index {i}")));
            }
        }
        Ok(ActionSpace { actions, index })
    }

    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn get(&self, i: usize) -> Option<&Action> {
        self.actions.get(i)
    }

    pub fn index_of(&self, a: &Action) -> Option<usize> {
        self.index.get(a).copied()
    }

    pub fn actions(&self) -> &[Action] {
        &self.actions
    }

    pub fn iter(&self) -> impl Iterator<Item = &Action> {
        self.actions.iter()
    }

    pub fn count_where(&self, pred: impl Fn(&Action) -> bool) -> usize {
        self.actions.iter().filter(|a| pred(a)).count()
    }

    pub fn to_manifest(&self, grid: &GridModel) -> ActionManifest {
        let entries = self
            .actions
            .iter()
            .map(|a| {
                let node = a.node_part();
                ManifestEntry {
                    kind: match a {
                        Action::DoNothing => ActionKind::DoNothing,
                        Action::LineSwitch(_) => ActionKind::LineSwitch,
                        Action::NodeSplit(_) => ActionKind::NodeSplit,
                        Action::Combo { .. } => ActionKind::Combo,
                    },
                    substation: node.map(|n| grid.substations()[n.sub].id),
                    assignment: node.map(|n| n.assignment.clone()),
                    line: a.touched_line().map(|l| grid.lines()[l].id.clone()),
                }
            })
            .collect();
        ActionManifest {
            grid: grid.name().to_string(),
            actions: entries,
        }
    }

    pub fn from_manifest(grid: &GridModel, manifest: &ActionManifest) -> Result<Self> {
        let corrupt = |i: usize, m: &str| Error::CorruptedAction(format!("manifest entry {i}: {m}"));
        let mut actions = Vec::with_capacity(manifest.actions.len());
        for (i, e) in manifest.actions.iter().enumerate() {
            let node = match (e.substation, &e.assignment) {
                (Some(id), Some(assignment)) => {
                    let sub = grid.sub_by_id(id).ok_or_else(|| corrupt(i, "unknown substation"))?;
                    if assignment.len() != grid.slots(sub).len() || assignment.iter().any(|&b| b != 1 && b != 2) {
                        return Err(corrupt(i, "assignment does not fit the substation"));
                    }
                    Some(NodeSplit {
                        sub,
                        assignment: assignment.clone(),
                    })
                }
                _ => None,
            };
            let line = match &e.line {
                Some(id) => Some(grid.line_by_id(id).ok_or_else(|| corrupt(i, "unknown line"))?),
                None => None,
            };
            let action = match (e.kind, node, line) {
                (ActionKind::DoNothing, None, None) => Action::DoNothing,
                (ActionKind::LineSwitch, None, Some(l)) => Action::LineSwitch(l),
                (ActionKind::NodeSplit, Some(n), None) => Action::NodeSplit(n),
                (ActionKind::Combo, Some(node), Some(line)) => Action::Combo { node, line },
                _ => return Err(corrupt(i, "fields do not match the action type")),
            };
            actions.push(action);
        }
        Self::new(actions)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionKind {
    DoNothing,
    LineSwitch,
    NodeSplit,
    Combo,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    #[serde(rename = "type")]
    pub kind: ActionKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub substation: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub assignment: Option<Vec<u8>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub line: Option<String>,
}

/// Ordered, human-readable record of an action space. Networks and datasets
/// store the manifest's hash to stay index-compatible.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActionManifest {
    pub grid: String,
    pub actions: Vec<ManifestEntry>,
}

impl ActionManifest {
    /// SHA-256 of the compact JSON encoding.
    pub fn hash(&self) -> [u8; 32] {
        let bytes = serde_json::to_vec(self).expect("manifest serializes");
        Sha256::digest(&bytes).into()
    }

    pub fn hash_hex(&self) -> String {
        hex::encode(self.hash())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

fn keeps_default_grid_connected(grid: &GridModel, base: &TopologyState, action: &Action) -> bool {
    apply_action(grid, base, action)
        .map(|t| connectivity_check(grid, &t).is_connected())
        .unwrap_or(false)
}

/// All (node | none) x (line | none) combinations that keep the default
/// topology connected. Order: do-nothing, node actions, line actions, combos.
pub fn build_full_space(grid: &GridModel) -> ActionSpace {
    let base = TopologyState::default_for(grid);
    let nodes: Vec<NodeSplit> = enumerate_node_actions(grid)
        .into_iter()
        .filter_map(|a| match a {
            Action::NodeSplit(n) => Some(n),
            _ => None,
        })
        .collect();
    let mut actions = vec![Action::DoNothing];
    let ok = |a: &Action| keeps_default_grid_connected(grid, &base, a);
    actions.extend(nodes.iter().cloned().map(Action::NodeSplit).filter(ok));
    actions.extend((0..grid.n_lines()).map(Action::LineSwitch).filter(ok));
    for node in &nodes {
        for line in 0..grid.n_lines() {
            let a = Action::Combo {
                node: node.clone(),
                line,
            };
            if ok(&a) {
                actions.push(a);
            }
        }
    }
    ActionSpace::new(actions).expect("enumeration yields distinct actions")
}

/// Environments visited by do-nothing rollouts, one every `stride` steps
/// starting at `offset`. Used to rank combined actions.
pub fn sample_states(
    grid: &Arc<GridModel>,
    scenarios: &[Arc<Chronic>],
    config: &EnvConfig,
    stride: usize,
    offset: usize,
) -> Result<Vec<Environment>> {
    let stride = stride.max(1);
    let mut states = Vec::new();
    for chronic in scenarios {
        let mut env = Environment::new(grid.clone(), chronic.clone(), config.clone())?;
        while !env.is_done() {
            if env.t() % stride == offset % stride {
                states.push(env.clone());
            }
            env.step(&Action::DoNothing)?;
        }
    }
    Ok(states)
}

/// Keep do-nothing, every single node and line action, and the `budget`
/// combos with the best mean simulated one-step reward over `states`.
/// Ties go to the lower index of the full space.
pub fn reduce_space(full: &ActionSpace, states: &[Environment], budget: usize) -> Result<ActionSpace> {
    let combos: Vec<usize> = (0..full.len())
        .filter(|&i| matches!(full.actions[i], Action::Combo { .. }))
        .collect();
    if budget > combos.len() {
        return Err(Error::Config(format!(
            "budget {budget} exceeds the {} available combined actions",
            combos.len()
        )));
    }
    let mut actions: Vec<Action> = full
        .actions
        .iter()
        .filter(|a| !matches!(a, Action::Combo { .. }))
        .cloned()
        .collect();
    if budget > 0 {
        if states.is_empty() {
            return Err(Error::Config("ranking combined actions needs at least one state".into()));
        }
        let scores: Vec<f64> = combos
            .par_iter()
            .map(|&i| {
                let a = &full.actions[i];
                states
                    .iter()
                    .map(|env| {
                        if is_legal(env, a).legal {
                            env.simulate(a).map(|r| r.reward).unwrap_or(-1.0)
                        } else {
                            -1.0
                        }
                    })
                    .sum::<f64>()
                    / states.len() as f64
            })
            .collect();
        let mut order: Vec<usize> = (0..combos.len()).collect();
        order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(combos[a].cmp(&combos[b])));
        actions.extend(order[..budget].iter().map(|&k| full.actions[combos[k]].clone()));
    }
    ActionSpace::new(actions)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IllegalReason {
    LineCooldown,
    SubstationCooldown,
    LineRecovering,
    LineMaintenance,
    Islanding,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Legality {
    pub legal: bool,
    pub reason: Option<IllegalReason>,
}

impl Legality {
    const LEGAL: Legality = Legality {
        legal: true,
        reason: None,
    };

    fn illegal(reason: IllegalReason) -> Self {
        Legality {
            legal: false,
            reason: Some(reason),
        }
    }
}

/// Check the operating rules in order: cooldowns, recovery of a tripped
/// line, maintenance, then whether the action would cut part of the grid off.
pub fn is_legal(env: &Environment, action: &Action) -> Legality {
    if matches!(action, Action::DoNothing) {
        return Legality::LEGAL;
    }
    let grid = env.grid();
    let topo = env.topology();
    let line = action.touched_line();
    let sub = action.touched_sub();
    if line.is_some_and(|l| l >= grid.n_lines()) || sub.is_some_and(|s| s >= grid.n_subs()) {
        return Legality::illegal(IllegalReason::Islanding);
    }
    if line.is_some_and(|l| topo.line_cooldown[l] > 0) {
        return Legality::illegal(IllegalReason::LineCooldown);
    }
    if sub.is_some_and(|s| topo.sub_cooldown[s] > 0) {
        return Legality::illegal(IllegalReason::SubstationCooldown);
    }
    if line.is_some_and(|l| !topo.line_in_service[l] && topo.recovery_timer[l] > 0) {
        return Legality::illegal(IllegalReason::LineRecovering);
    }
    if line.is_some_and(|l| env.in_maintenance(l)) {
        return Legality::illegal(IllegalReason::LineMaintenance);
    }
    let before = connectivity_check(grid, topo).component_count;
    match apply_action(grid, topo, action) {
        Ok(next) if connectivity_check(grid, &next).component_count <= before => Legality::LEGAL,
        _ => Legality::illegal(IllegalReason::Islanding),
    }
}
