//! Static grid description, switching state and electrical-node derivation.
//!
//! Every substation owns two bus-bars. The elements attached to a substation
//! (line endpoints, generators, loads) occupy *slots* in a frozen order: line
//! endpoints by line index (origin before extremity), then generators, then
//! loads. A substation's bus assignment is one entry in `{1, 2}` per slot.

use std::collections::{HashMap, HashSet, VecDeque};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::actions::{Action, NodeSplit};
use crate::{Error, Result};

/// Cooldown, in steps, applied to every line or substation touched by an action.
pub const COOLDOWN_STEPS: u32 = 3;

/// Shipped IEEE 14-bus model.
pub const IEEE14_JSON: &str = include_str!("../data/ieee14.json");

fn default_base_kv() -> f64 {
    138.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Substation {
    pub id: usize,
    pub name: String,
    /// Nominal voltage used to convert per-unit currents to amperes.
    #[serde(default = "default_base_kv")]
    pub base_kv: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Line {
    pub id: String,
    pub from_sub: usize,
    pub to_sub: usize,
    /// Series resistance (p.u.).
    pub r: f64,
    /// Series reactance (p.u.).
    pub x: f64,
    /// Total line charging susceptance (p.u.).
    pub b: f64,
    /// Ampere rating at the origin end's nominal voltage.
    pub thermal_limit: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Generator {
    pub id: String,
    pub sub: usize,
    pub p_max: f64,
    /// Default terminal voltage setpoint (p.u.) used by the synthetic generator.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub v_setpoint: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Load {
    pub id: String,
    pub sub: usize,
    /// Nominal active demand (MW) used by the synthetic generator.
    #[serde(default)]
    pub p_nominal: f64,
    /// Nominal reactive demand (MVAr).
    #[serde(default)]
    pub q_nominal: f64,
}

/// Serialized form of a grid description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    #[serde(default)]
    pub name: String,
    pub substations: Vec<Substation>,
    pub lines: Vec<Line>,
    pub generators: Vec<Generator>,
    pub loads: Vec<Load>,
    pub slack_sub: usize,
    pub base_mva: f64,
}

/// One element attached to a substation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Slot {
    LineOrigin(usize),
    LineExtremity(usize),
    Generator(usize),
    Load(usize),
}

impl Slot {
    pub fn line(self) -> Option<usize> {
        match self {
            Slot::LineOrigin(l) | Slot::LineExtremity(l) => Some(l),
            _ => None,
        }
    }
}

/// Validated grid model. Substations, lines, generators and loads are
/// addressed by their position in the source arrays.
#[derive(Debug, Clone)]
pub struct GridModel {
    spec: GridSpec,
    slots: Vec<Vec<Slot>>,
    line_ends: Vec<[(usize, usize); 2]>,
    gen_pos: Vec<(usize, usize)>,
    load_pos: Vec<(usize, usize)>,
    slack: usize,
}

impl GridModel {
    pub fn from_spec(spec: GridSpec) -> Result<Self> {
        let bad = |m: String| Err(Error::InvalidGrid(m));
        if !(spec.base_mva > 0.0) {
            return bad(format!("base_mva must be positive, got {}", spec.base_mva));
        }
        let mut sub_index = HashMap::new();
        for (i, s) in spec.substations.iter().enumerate() {
            if sub_index.insert(s.id, i).is_some() {
                return bad(format!("duplicate substation id {}", s.id));
            }
            if !(s.base_kv > 0.0) {
                return bad(format!("substation {} has non-positive base_kv", s.id));
            }
        }
        let lookup = |id: usize, what: &str| {
            sub_index
                .get(&id)
                .copied()
                .ok_or_else(|| Error::InvalidGrid(format!("{what} references unknown substation {id}")))
        };
        unique_ids(spec.lines.iter().map(|l| l.id.as_str()), "line")?;
        unique_ids(spec.generators.iter().map(|g| g.id.as_str()), "generator")?;
        unique_ids(spec.loads.iter().map(|l| l.id.as_str()), "load")?;

        let mut slots = vec![Vec::new(); spec.substations.len()];
        let mut line_ends = Vec::with_capacity(spec.lines.len());
        let mut line_slots: Vec<[usize; 2]> = Vec::new();
        for (i, l) in spec.lines.iter().enumerate() {
            let a = lookup(l.from_sub, &format!("line {}", l.id))?;
            let b = lookup(l.to_sub, &format!("line {}", l.id))?;
            if a == b {
                return bad(format!("line {} starts and ends at the same substation", l.id));
            }
            if l.x == 0.0 || !l.x.is_finite() {
                return bad(format!("line {} has zero reactance", l.id));
            }
            if !(l.thermal_limit > 0.0) {
                return bad(format!("line {} has non-positive thermal limit", l.id));
            }
            slots[a].push(Slot::LineOrigin(i));
            slots[b].push(Slot::LineExtremity(i));
            line_slots.push([a, b]);
        }
        let mut gen_subs = Vec::new();
        for g in &spec.generators {
            let s = lookup(g.sub, &format!("generator {}", g.id))?;
            if g.p_max < 0.0 {
                return bad(format!("generator {} has negative p_max", g.id));
            }
            gen_subs.push(s);
        }
        let mut load_subs = Vec::new();
        for l in &spec.loads {
            load_subs.push(lookup(l.sub, &format!("load {}", l.id))?);
        }
        for (i, &s) in gen_subs.iter().enumerate() {
            slots[s].push(Slot::Generator(i));
        }
        for (i, &s) in load_subs.iter().enumerate() {
            slots[s].push(Slot::Load(i));
        }
        let position = |sub: usize, slot: Slot| slots[sub].iter().position(|&x| x == slot).unwrap();
        for (i, [a, b]) in line_slots.iter().copied().enumerate() {
            line_ends.push([
                (a, position(a, Slot::LineOrigin(i))),
                (b, position(b, Slot::LineExtremity(i))),
            ]);
        }
        let gen_pos = gen_subs
            .iter()
            .enumerate()
            .map(|(i, &s)| (s, position(s, Slot::Generator(i))))
            .collect();
        let load_pos = load_subs
            .iter()
            .enumerate()
            .map(|(i, &s)| (s, position(s, Slot::Load(i))))
            .collect();
        let slack = lookup(spec.slack_sub, "slack_sub")?;
        if !gen_subs.contains(&slack) {
            return bad(format!("slack substation {} hosts no generator", spec.slack_sub));
        }
        Ok(GridModel {
            spec,
            slots,
            line_ends,
            gen_pos,
            load_pos,
            slack,
        })
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Self::from_spec(serde_json::from_str(text)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn ieee14() -> Self {
        Self::from_json(IEEE14_JSON).expect("shipped IEEE 14-bus model is valid")
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.spec).expect("grid spec serializes")
    }

    pub fn spec(&self) -> &GridSpec {
        &self.spec
    }

    pub fn name(&self) -> &str {
        &self.spec.name
    }

    pub fn base_mva(&self) -> f64 {
        self.spec.base_mva
    }

    pub fn substations(&self) -> &[Substation] {
        &self.spec.substations
    }

    pub fn lines(&self) -> &[Line] {
        &self.spec.lines
    }

    pub fn generators(&self) -> &[Generator] {
        &self.spec.generators
    }

    pub fn loads(&self) -> &[Load] {
        &self.spec.loads
    }

    pub fn n_subs(&self) -> usize {
        self.spec.substations.len()
    }

    pub fn n_lines(&self) -> usize {
        self.spec.lines.len()
    }

    pub fn n_gens(&self) -> usize {
        self.spec.generators.len()
    }

    pub fn n_loads(&self) -> usize {
        self.spec.loads.len()
    }

    /// Position of the slack substation.
    pub fn slack_sub(&self) -> usize {
        self.slack
    }

    /// Ordered element slots of a substation.
    pub fn slots(&self, sub: usize) -> &[Slot] {
        &self.slots[sub]
    }

    pub fn n_slots_total(&self) -> usize {
        self.slots.iter().map(Vec::len).sum()
    }

    /// `(substation, slot)` of a line's origin and extremity.
    pub fn line_ends(&self, line: usize) -> [(usize, usize); 2] {
        self.line_ends[line]
    }

    pub fn gen_slot(&self, gen: usize) -> (usize, usize) {
        self.gen_pos[gen]
    }

    pub fn load_slot(&self, load: usize) -> (usize, usize) {
        self.load_pos[load]
    }

    pub fn sub_by_id(&self, id: usize) -> Option<usize> {
        self.spec.substations.iter().position(|s| s.id == id)
    }

    pub fn line_by_id(&self, id: &str) -> Option<usize> {
        self.spec.lines.iter().position(|l| l.id == id)
    }

    pub fn gen_by_id(&self, id: &str) -> Option<usize> {
        self.spec.generators.iter().position(|g| g.id == id)
    }

    pub fn load_by_id(&self, id: &str) -> Option<usize> {
        self.spec.loads.iter().position(|l| l.id == id)
    }

    /// Base current in amperes at a substation's nominal voltage.
    pub fn base_current_amps(&self, sub: usize) -> f64 {
        self.spec.base_mva * 1e3 / (3f64.sqrt() * self.spec.substations[sub].base_kv)
    }

    /// Thermal limit expressed in MW at nominal voltage (used in DC mode).
    pub fn thermal_limit_mw(&self, line: usize) -> f64 {
        let l = &self.spec.lines[line];
        let kv = self.spec.substations[self.line_ends[line][0].0].base_kv;
        3f64.sqrt() * kv * l.thermal_limit / 1e3
    }
}

fn unique_ids<'a>(ids: impl Iterator<Item = &'a str>, kind: &str) -> Result<()> {
    let mut seen = HashSet::new();
    for id in ids {
        if !seen.insert(id) {
            return Err(Error::InvalidGrid(format!("duplicate {kind} id {id}")));
        }
    }
    Ok(())
}

/// Mutable switching state together with the rule timers.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TopologyState {
    /// Per substation, one bus-bar index (1 or 2) per slot.
    pub bus_assignment: Vec<Vec<u8>>,
    pub line_in_service: Vec<bool>,
    /// Steps before a tripped line may be reconnected.
    pub recovery_timer: Vec<u32>,
    pub line_cooldown: Vec<u32>,
    pub sub_cooldown: Vec<u32>,
    /// Consecutive steps each line has spent overloaded below the instant-trip level.
    pub overload_grace: Vec<u32>,
}

impl TopologyState {
    /// Every element on bus-bar 1, every line in service, all timers zero.
    pub fn default_for(grid: &GridModel) -> Self {
        TopologyState {
            bus_assignment: (0..grid.n_subs()).map(|s| vec![1; grid.slots(s).len()]).collect(),
            line_in_service: vec![true; grid.n_lines()],
            recovery_timer: vec![0; grid.n_lines()],
            line_cooldown: vec![0; grid.n_lines()],
            sub_cooldown: vec![0; grid.n_subs()],
            overload_grace: vec![0; grid.n_lines()],
        }
    }

    pub fn line_bus(&self, grid: &GridModel, line: usize) -> [u8; 2] {
        let [(a, sa), (b, sb)] = grid.line_ends(line);
        [self.bus_assignment[a][sa], self.bus_assignment[b][sb]]
    }

    /// Structural invariants: bus-bar indices in {1, 2}, a recovering line is
    /// out of service, vector shapes match the grid.
    pub fn check(&self, grid: &GridModel) -> Result<()> {
        let bad = |m: &str| Err(Error::CorruptedAction(m.to_string()));
        if self.bus_assignment.len() != grid.n_subs()
            || self.line_in_service.len() != grid.n_lines()
            || self.recovery_timer.len() != grid.n_lines()
            || self.line_cooldown.len() != grid.n_lines()
            || self.sub_cooldown.len() != grid.n_subs()
            || self.overload_grace.len() != grid.n_lines()
        {
            return bad("topology shape does not match grid");
        }
        for (s, v) in self.bus_assignment.iter().enumerate() {
            if v.len() != grid.slots(s).len() || v.iter().any(|&b| b != 1 && b != 2) {
                return bad("bus assignment entries must be 1 or 2");
            }
        }
        for l in 0..grid.n_lines() {
            if self.recovery_timer[l] > 0 && self.line_in_service[l] {
                return bad("recovering line marked in service");
            }
        }
        Ok(())
    }

    /// Decrement every positive rule timer by one step.
    pub fn tick(&mut self) {
        for t in self
            .recovery_timer
            .iter_mut()
            .chain(self.line_cooldown.iter_mut())
            .chain(self.sub_cooldown.iter_mut())
        {
            *t = t.saturating_sub(1);
        }
    }
}

/// Apply a (legal) action and arm cooldowns on everything it touches.
pub fn apply_action(grid: &GridModel, topology: &TopologyState, action: &Action) -> Result<TopologyState> {
    let mut next = topology.clone();
    let (node, line) = match action {
        Action::DoNothing => (None, None),
        Action::LineSwitch(l) => (None, Some(*l)),
        Action::NodeSplit(n) => (Some(n), None),
        Action::Combo { node, line } => (Some(node), Some(*line)),
    };
    if let Some(NodeSplit { sub, assignment }) = node {
        let sub = *sub;
        if sub >= grid.n_subs() {
            return Err(Error::CorruptedAction(format!("unknown substation position {sub}")));
        }
        if assignment.len() != grid.slots(sub).len() || assignment.iter().any(|&b| b != 1 && b != 2) {
            return Err(Error::CorruptedAction(format!(
                "assignment for substation {} must have {} entries in {{1, 2}}",
                grid.substations()[sub].id,
                grid.slots(sub).len()
            )));
        }
        next.bus_assignment[sub].clone_from(assignment);
        next.sub_cooldown[sub] = COOLDOWN_STEPS;
    }
    if let Some(l) = line {
        if l >= grid.n_lines() {
            return Err(Error::CorruptedAction(format!("unknown line position {l}")));
        }
        next.line_in_service[l] = !next.line_in_service[l];
        next.line_cooldown[l] = COOLDOWN_STEPS;
        next.overload_grace[l] = 0;
    }
    Ok(next)
}

/// One occupied bus-bar.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ElectricalNode {
    pub sub: usize,
    pub bar: u8,
    pub lines: Vec<usize>,
    pub generators: Vec<usize>,
    pub loads: Vec<usize>,
}

/// Electrical nodes plus the element-to-node attachment maps.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NodeMap {
    pub nodes: Vec<ElectricalNode>,
    /// Node index at each end of every in-service line.
    pub line_nodes: Vec<Option<[usize; 2]>>,
    pub gen_node: Vec<usize>,
    pub load_node: Vec<usize>,
}

impl NodeMap {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn key(&self, node: usize) -> (usize, u8) {
        (self.nodes[node].sub, self.nodes[node].bar)
    }
}

/// Materialize one node per occupied bus-bar, ordered by (substation, bar).
/// Out-of-service line endpoints occupy nothing.
pub fn electrical_nodes(grid: &GridModel, topology: &TopologyState) -> NodeMap {
    let mut index: HashMap<(usize, u8), usize> = HashMap::new();
    let mut nodes: Vec<ElectricalNode> = Vec::new();
    for sub in 0..grid.n_subs() {
        for bar in [1u8, 2] {
            let occupied = grid.slots(sub).iter().zip(&topology.bus_assignment[sub]).any(|(slot, &b)| {
                b == bar
                    && match slot.line() {
                        Some(l) => topology.line_in_service[l],
                        None => true,
                    }
            });
            if occupied {
                index.insert((sub, bar), nodes.len());
                nodes.push(ElectricalNode {
                    sub,
                    bar,
                    lines: Vec::new(),
                    generators: Vec::new(),
                    loads: Vec::new(),
                });
            }
        }
    }
    let mut line_nodes = vec![None; grid.n_lines()];
    for (l, slot) in line_nodes.iter_mut().enumerate() {
        if !topology.line_in_service[l] {
            continue;
        }
        let [(a, sa), (b, sb)] = grid.line_ends(l);
        let na = index[&(a, topology.bus_assignment[a][sa])];
        let nb = index[&(b, topology.bus_assignment[b][sb])];
        nodes[na].lines.push(l);
        nodes[nb].lines.push(l);
        *slot = Some([na, nb]);
    }
    let gen_node = (0..grid.n_gens())
        .map(|g| {
            let (s, k) = grid.gen_slot(g);
            let n = index[&(s, topology.bus_assignment[s][k])];
            nodes[n].generators.push(g);
            n
        })
        .collect();
    let load_node = (0..grid.n_loads())
        .map(|d| {
            let (s, k) = grid.load_slot(d);
            let n = index[&(s, topology.bus_assignment[s][k])];
            nodes[n].loads.push(d);
            n
        })
        .collect();
    NodeMap {
        nodes,
        line_nodes,
        gen_node,
        load_node,
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Connectivity {
    pub component_count: usize,
    /// Component id of every electrical node, numbered in order of first appearance.
    pub component: Vec<usize>,
}

impl Connectivity {
    pub fn is_connected(&self) -> bool {
        self.component_count == 1
    }
}

/// Connected components of the node graph whose edges are in-service lines.
pub fn connectivity(nodes: &NodeMap) -> Connectivity {
    let n = nodes.len();
    let mut adjacency = vec![Vec::new(); n];
    for [a, b] in nodes.line_nodes.iter().flatten().copied() {
        adjacency[a].push(b);
        adjacency[b].push(a);
    }
    let mut component = vec![usize::MAX; n];
    let mut count = 0;
    let mut queue = VecDeque::new();
    for start in 0..n {
        if component[start] != usize::MAX {
            continue;
        }
        component[start] = count;
        queue.push_back(start);
        while let Some(u) = queue.pop_front() {
            for &v in &adjacency[u] {
                if component[v] == usize::MAX {
                    component[v] = count;
                    queue.push_back(v);
                }
            }
        }
        count += 1;
    }
    Connectivity {
        component_count: count,
        component,
    }
}

pub fn connectivity_check(grid: &GridModel, topology: &TopologyState) -> Connectivity {
    connectivity(&electrical_nodes(grid, topology))
}

/// What is cut off from the component holding the slack generator.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Separation {
    /// Node index of the slack generator.
    pub slack_node: usize,
    /// Nodes in the slack generator's component.
    pub main: Vec<usize>,
    /// Loads outside the main component.
    pub unserved_loads: Vec<usize>,
    /// Generators outside the main component.
    pub disconnected_gens: Vec<usize>,
    /// Outside components that carry energized lines or more than a lone plant.
    pub islands: usize,
}

impl Separation {
    pub fn is_intact(&self) -> bool {
        self.unserved_loads.is_empty() && self.disconnected_gens.is_empty() && self.islands == 0
    }
}

/// Classify everything outside the slack generator's component. A lone
/// generator sitting on a bus-bar with no in-service line is a disconnected
/// plant; any other outside component is an island.
pub fn separation(grid: &GridModel, nodes: &NodeMap, conn: &Connectivity) -> Separation {
    let slack_gen = (0..grid.n_gens())
        .find(|&g| grid.gen_slot(g).0 == grid.slack_sub())
        .expect("validated grid has a slack generator");
    let slack_node = nodes.gen_node[slack_gen];
    let main_comp = conn.component[slack_node];
    let main = (0..nodes.len()).filter(|&n| conn.component[n] == main_comp).collect();
    let unserved_loads = (0..grid.n_loads())
        .filter(|&d| conn.component[nodes.load_node[d]] != main_comp)
        .collect();
    let disconnected_gens = (0..grid.n_gens())
        .filter(|&g| conn.component[nodes.gen_node[g]] != main_comp)
        .collect();
    let mut islands = 0;
    for comp in (0..conn.component_count).filter(|&c| c != main_comp) {
        let members: Vec<usize> = (0..nodes.len()).filter(|&n| conn.component[n] == comp).collect();
        let lone_plant = members.len() == 1 && {
            let node = &nodes.nodes[members[0]];
            node.lines.is_empty() && node.loads.is_empty()
        };
        if !lone_plant {
            islands += 1;
        }
    }
    Separation {
        slack_node,
        main,
        unserved_loads,
        disconnected_gens,
        islands,
    }
}
