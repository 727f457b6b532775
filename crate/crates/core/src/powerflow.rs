//! AC (Newton-Raphson, polar) and DC power flow over electrical nodes.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::grid::{connectivity, electrical_nodes, separation, GridModel, TopologyState};
use crate::{Error, Result};

/// Per-element operating point for one time step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Injections {
    /// MW per load.
    pub load_p: Vec<f64>,
    /// MVAr per load.
    pub load_q: Vec<f64>,
    /// Scheduled MW per generator.
    pub gen_p: Vec<f64>,
    /// Terminal voltage setpoint (p.u.) per generator.
    pub gen_v: Vec<f64>,
}

impl Injections {
    pub fn zeros(grid: &GridModel) -> Self {
        Injections {
            load_p: vec![0.0; grid.n_loads()],
            load_q: vec![0.0; grid.n_loads()],
            gen_p: vec![0.0; grid.n_gens()],
            gen_v: vec![1.0; grid.n_gens()],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FlowMode {
    Ac,
    Dc,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NodeKind {
    Slack,
    Pv,
    Pq,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CaseNode {
    /// (substation position, bus-bar).
    pub key: (usize, u8),
    pub kind: NodeKind,
    /// Net active injection (p.u.).
    pub p: f64,
    /// Net reactive injection (p.u.); only binding on PQ nodes.
    pub q: f64,
    /// Voltage magnitude setpoint for slack and PV nodes.
    pub v_set: f64,
    /// Base current of the node's substation, in amperes.
    pub base_amps: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CaseBranch {
    pub line: usize,
    pub from: usize,
    pub to: usize,
    pub r: f64,
    pub x: f64,
    pub b: f64,
}

impl CaseBranch {
    fn series(&self) -> Complex64 {
        Complex64::new(1.0, 0.0) / Complex64::new(self.r, self.x)
    }
}

#[derive(Debug, Clone)]
pub struct PowerFlowCase {
    pub nodes: Vec<CaseNode>,
    pub branches: Vec<CaseBranch>,
    pub ybus: DMatrix<Complex64>,
    pub slack: usize,
    pub base_mva: f64,
    pub n_lines: usize,
}

impl PowerFlowCase {
    /// Assemble a case directly from nodes and branches.
    pub fn new(nodes: Vec<CaseNode>, branches: Vec<CaseBranch>, base_mva: f64, n_lines: usize) -> Result<Self> {
        let slacks: Vec<usize> = (0..nodes.len()).filter(|&i| nodes[i].kind == NodeKind::Slack).collect();
        if slacks.len() != 1 {
            return Err(Error::InvalidGrid(format!("case needs exactly one slack node, found {}", slacks.len())));
        }
        let n = nodes.len();
        let mut ybus = DMatrix::from_element(n, n, Complex64::new(0.0, 0.0));
        for br in &branches {
            let y = br.series();
            let half = Complex64::new(0.0, br.b / 2.0);
            ybus[(br.from, br.from)] += y + half;
            ybus[(br.to, br.to)] += y + half;
            ybus[(br.from, br.to)] -= y;
            ybus[(br.to, br.from)] -= y;
        }
        Ok(PowerFlowCase {
            slack: slacks[0],
            nodes,
            branches,
            ybus,
            base_mva,
            n_lines,
        })
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }
}

/// Build the case over the component that holds the slack generator.
/// Elements cut off from that component are left out; callers decide
/// whether that is acceptable.
pub fn build_case(grid: &GridModel, topology: &TopologyState, inj: &Injections) -> Result<PowerFlowCase> {
    let nodes = electrical_nodes(grid, topology);
    let conn = connectivity(&nodes);
    let sep = separation(grid, &nodes, &conn);
    let base = grid.base_mva();
    let mut position = vec![usize::MAX; nodes.len()];
    for (i, &n) in sep.main.iter().enumerate() {
        position[n] = i;
    }
    let mut case_nodes = Vec::with_capacity(sep.main.len());
    for &n in &sep.main {
        let node = &nodes.nodes[n];
        let mut p = 0.0;
        let mut q = 0.0;
        for &d in &node.loads {
            p -= inj.load_p[d];
            q -= inj.load_q[d];
        }
        for &g in &node.generators {
            p += inj.gen_p[g];
        }
        let kind = if n == sep.slack_node {
            NodeKind::Slack
        } else if node.generators.is_empty() {
            NodeKind::Pq
        } else {
            NodeKind::Pv
        };
        let v_set = match node.generators.first() {
            Some(&g) => {
                let v = inj.gen_v[g];
                if !(v.is_finite() && v > 0.0) {
                    return Err(Error::MissingSetpoint(grid.generators()[g].id.clone()));
                }
                v
            }
            None => 1.0,
        };
        case_nodes.push(CaseNode {
            key: (node.sub, node.bar),
            kind,
            p: p / base,
            q: q / base,
            v_set,
            base_amps: grid.base_current_amps(node.sub),
        });
    }
    let mut branches = Vec::new();
    for (l, ends) in nodes.line_nodes.iter().enumerate() {
        if let Some([a, b]) = ends {
            if position[*a] == usize::MAX {
                continue;
            }
            let line = &grid.lines()[l];
            branches.push(CaseBranch {
                line: l,
                from: position[*a],
                to: position[*b],
                r: line.r,
                x: line.x,
                b: line.b,
            });
        }
    }
    PowerFlowCase::new(case_nodes, branches, base, grid.n_lines())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SolveStatus {
    Converged,
    /// Iteration budget exhausted or the iterate blew up.
    Diverged,
    SingularJacobian,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowerFlowSolution {
    pub mode: FlowMode,
    /// Node keys in case order, used to warm-start later solves.
    pub keys: Vec<(usize, u8)>,
    pub vm: Vec<f64>,
    pub va: Vec<f64>,
    /// Per grid line, MW / MVAr / A at origin and extremity. Zero when out of service.
    pub p_or: Vec<f64>,
    pub q_or: Vec<f64>,
    pub i_or: Vec<f64>,
    pub p_ex: Vec<f64>,
    pub q_ex: Vec<f64>,
    pub i_ex: Vec<f64>,
    /// Net injection computed at the solution voltages (p.u.), case order.
    pub node_p: Vec<f64>,
    pub node_q: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
    pub max_mismatch: f64,
    pub status: SolveStatus,
}

#[derive(Debug, Clone, Copy)]
pub enum Start<'a> {
    Flat,
    Warm(&'a PowerFlowSolution),
}

#[derive(Debug, Clone, Copy)]
pub struct AcOptions {
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for AcOptions {
    fn default() -> Self {
        AcOptions {
            tol: 1e-8,
            max_iter: 20,
        }
    }
}

/// Dense LU solve; `None` when the matrix is singular.
pub fn solve_linear(a: DMatrix<f64>, b: &DVector<f64>) -> Option<DVector<f64>> {
    let lu = a.lu();
    let x = lu.solve(b)?;
    x.iter().all(|v| v.is_finite()).then_some(x)
}

fn complex_voltages(vm: &[f64], va: &[f64]) -> Vec<Complex64> {
    vm.iter().zip(va).map(|(&m, &a)| Complex64::from_polar(m, a)).collect()
}

/// Complex power injected at each node, `S = V · conj(Y V)`.
pub fn power_injections(case: &PowerFlowCase, vm: &[f64], va: &[f64]) -> Vec<Complex64> {
    let v = complex_voltages(vm, va);
    let ibus = &case.ybus * DVector::from_column_slice(&v);
    v.iter().zip(ibus.iter()).map(|(vi, ii)| vi * ii.conj()).collect()
}

/// Largest absolute mismatch over the equations the Newton solve enforces:
/// P at every non-slack node and Q at every PQ node.
pub fn max_mismatch(case: &PowerFlowCase, vm: &[f64], va: &[f64]) -> f64 {
    let s = power_injections(case, vm, va);
    let mut worst = 0f64;
    for (node, si) in case.nodes.iter().zip(&s) {
        if node.kind != NodeKind::Slack {
            worst = worst.max((si.re - node.p).abs());
        }
        if node.kind == NodeKind::Pq {
            worst = worst.max((si.im - node.q).abs());
        }
    }
    worst
}

fn initial_point(case: &PowerFlowCase, start: Start<'_>) -> (Vec<f64>, Vec<f64>) {
    let mut vm: Vec<f64> = case
        .nodes
        .iter()
        .map(|n| if n.kind == NodeKind::Pq { 1.0 } else { n.v_set })
        .collect();
    let mut va = vec![0.0; case.len()];
    if let Start::Warm(prev) = start {
        if prev.mode == FlowMode::Ac && prev.converged {
            let slack_key = case.nodes[case.slack].key;
            let offset = prev.keys.iter().position(|&k| k == slack_key).map(|i| prev.va[i]);
            if let Some(offset) = offset {
                for (i, node) in case.nodes.iter().enumerate() {
                    if let Some(j) = prev.keys.iter().position(|&k| k == node.key) {
                        va[i] = prev.va[j] - offset;
                        if node.kind == NodeKind::Pq {
                            vm[i] = prev.vm[j];
                        }
                    }
                }
            }
        }
    }
    (vm, va)
}

/// Newton-Raphson on the polar power mismatch equations.
pub fn solve_ac(case: &PowerFlowCase, options: AcOptions, start: Start<'_>) -> PowerFlowSolution {
    let n = case.len();
    let (mut vm, mut va) = initial_point(case, start);
    let pvpq: Vec<usize> = (0..n).filter(|&i| case.nodes[i].kind != NodeKind::Slack).collect();
    let pq: Vec<usize> = (0..n).filter(|&i| case.nodes[i].kind == NodeKind::Pq).collect();
    let (npvpq, npq) = (pvpq.len(), pq.len());
    let dim = npvpq + npq;

    let mut iterations = 0;
    let status;
    let mut mismatch;
    loop {
        let v = complex_voltages(&vm, &va);
        let ibus: Vec<Complex64> = (&case.ybus * DVector::from_column_slice(&v)).iter().copied().collect();
        let s: Vec<Complex64> = v.iter().zip(&ibus).map(|(vi, ii)| vi * ii.conj()).collect();
        let mut f = DVector::zeros(dim);
        for (k, &i) in pvpq.iter().enumerate() {
            f[k] = s[i].re - case.nodes[i].p;
        }
        for (k, &i) in pq.iter().enumerate() {
            f[npvpq + k] = s[i].im - case.nodes[i].q;
        }
        mismatch = f.iter().fold(0f64, |m, x| m.max(x.abs()));
        if !mismatch.is_finite() {
            status = SolveStatus::Diverged;
            break;
        }
        if mismatch <= options.tol {
            status = SolveStatus::Converged;
            break;
        }
        if iterations >= options.max_iter {
            status = SolveStatus::Diverged;
            break;
        }
        // dS/dVa = j diag(V) conj(diag(I) - Y diag(V)),
        // dS/dVm = diag(V) conj(Y diag(V/|V|)) + conj(diag(I)) diag(V/|V|)
        let vnorm: Vec<Complex64> = v.iter().map(|x| x / x.norm()).collect();
        let j = Complex64::new(0.0, 1.0);
        let ds_dva = |r: usize, c: usize| {
            let y = case.ybus[(r, c)];
            let inner = if r == c { ibus[r] - y * v[c] } else { -y * v[c] };
            j * v[r] * inner.conj()
        };
        let ds_dvm = |r: usize, c: usize| {
            let y = case.ybus[(r, c)];
            let mut val = v[r] * (y * vnorm[c]).conj();
            if r == c {
                val += ibus[r].conj() * vnorm[r];
            }
            val
        };
        let mut jac = DMatrix::zeros(dim, dim);
        for (a, &r) in pvpq.iter().enumerate() {
            for (b, &c) in pvpq.iter().enumerate() {
                jac[(a, b)] = ds_dva(r, c).re;
            }
            for (b, &c) in pq.iter().enumerate() {
                jac[(a, npvpq + b)] = ds_dvm(r, c).re;
            }
        }
        for (a, &r) in pq.iter().enumerate() {
            for (b, &c) in pvpq.iter().enumerate() {
                jac[(npvpq + a, b)] = ds_dva(r, c).im;
            }
            for (b, &c) in pq.iter().enumerate() {
                jac[(npvpq + a, npvpq + b)] = ds_dvm(r, c).im;
            }
        }
        let Some(dx) = solve_linear(jac, &f) else {
            status = SolveStatus::SingularJacobian;
            break;
        };
        for (k, &i) in pvpq.iter().enumerate() {
            va[i] -= dx[k];
        }
        for (k, &i) in pq.iter().enumerate() {
            vm[i] -= dx[npvpq + k];
        }
        iterations += 1;
    }
    finish(case, FlowMode::Ac, vm, va, iterations, mismatch, status)
}

/// Linearized flow: unit magnitudes, lossless lines, susceptance `1/x`.
pub fn solve_dc(case: &PowerFlowCase) -> PowerFlowSolution {
    let n = case.len();
    let others: Vec<usize> = (0..n).filter(|&i| i != case.slack).collect();
    let mut index = vec![usize::MAX; n];
    for (k, &i) in others.iter().enumerate() {
        index[i] = k;
    }
    let m = others.len();
    let mut bmat = DMatrix::zeros(m, m);
    for br in &case.branches {
        let y = 1.0 / br.x;
        let (a, b) = (index[br.from], index[br.to]);
        if a != usize::MAX {
            bmat[(a, a)] += y;
        }
        if b != usize::MAX {
            bmat[(b, b)] += y;
        }
        if a != usize::MAX && b != usize::MAX {
            bmat[(a, b)] -= y;
            bmat[(b, a)] -= y;
        }
    }
    let p = DVector::from_iterator(m, others.iter().map(|&i| case.nodes[i].p));
    let vm = vec![1.0; n];
    let mut va = vec![0.0; n];
    let status = if m == 0 {
        SolveStatus::Converged
    } else {
        match solve_linear(bmat, &p) {
            Some(theta) => {
                for (k, &i) in others.iter().enumerate() {
                    va[i] = theta[k];
                }
                SolveStatus::Converged
            }
            None => SolveStatus::SingularJacobian,
        }
    };
    finish(case, FlowMode::Dc, vm, va, 0, 0.0, status)
}

fn finish(
    case: &PowerFlowCase,
    mode: FlowMode,
    vm: Vec<f64>,
    va: Vec<f64>,
    iterations: usize,
    mismatch: f64,
    status: SolveStatus,
) -> PowerFlowSolution {
    let nl = case.n_lines;
    let mut sol = PowerFlowSolution {
        mode,
        keys: case.nodes.iter().map(|n| n.key).collect(),
        vm,
        va,
        p_or: vec![0.0; nl],
        q_or: vec![0.0; nl],
        i_or: vec![0.0; nl],
        p_ex: vec![0.0; nl],
        q_ex: vec![0.0; nl],
        i_ex: vec![0.0; nl],
        node_p: vec![0.0; case.len()],
        node_q: vec![0.0; case.len()],
        converged: status == SolveStatus::Converged,
        iterations,
        max_mismatch: if mode == FlowMode::Dc { 0.0 } else { mismatch },
        status,
    };
    if status == SolveStatus::SingularJacobian {
        return sol;
    }
    let base = case.base_mva;
    match mode {
        FlowMode::Ac => {
            let v = complex_voltages(&sol.vm, &sol.va);
            for br in &case.branches {
                let y = br.series();
                let half = Complex64::new(0.0, br.b / 2.0);
                let (vf, vt) = (v[br.from], v[br.to]);
                let i_f = y * (vf - vt) + half * vf;
                let i_t = y * (vt - vf) + half * vt;
                let s_f = vf * i_f.conj();
                let s_t = vt * i_t.conj();
                let l = br.line;
                sol.p_or[l] = s_f.re * base;
                sol.q_or[l] = s_f.im * base;
                sol.p_ex[l] = s_t.re * base;
                sol.q_ex[l] = s_t.im * base;
                sol.i_or[l] = i_f.norm() * case.nodes[br.from].base_amps;
                sol.i_ex[l] = i_t.norm() * case.nodes[br.to].base_amps;
            }
            let s = power_injections(case, &sol.vm, &sol.va);
            sol.node_p = s.iter().map(|x| x.re).collect();
            sol.node_q = s.iter().map(|x| x.im).collect();
        }
        FlowMode::Dc => {
            for br in &case.branches {
                let flow = (sol.va[br.from] - sol.va[br.to]) / br.x;
                let l = br.line;
                sol.p_or[l] = flow * base;
                sol.p_ex[l] = -flow * base;
                sol.i_or[l] = flow.abs() * case.nodes[br.from].base_amps;
                sol.i_ex[l] = flow.abs() * case.nodes[br.to].base_amps;
            }
            for (i, node) in case.nodes.iter().enumerate() {
                sol.node_p[i] = node.p;
            }
            let total: f64 = sol.node_p.iter().enumerate().filter(|&(i, _)| i != case.slack).map(|(_, p)| p).sum();
            sol.node_p[case.slack] = -total;
        }
    }
    sol
}

/// Loading ratio per grid line: worse end current over the ampere rating in
/// AC mode, `|P|` over the MW rating in DC mode. Out-of-service lines are 0.
pub fn line_loading(solution: &PowerFlowSolution, grid: &GridModel) -> Vec<f64> {
    (0..grid.n_lines())
        .map(|l| match solution.mode {
            FlowMode::Ac => solution.i_or[l].max(solution.i_ex[l]) / grid.lines()[l].thermal_limit,
            FlowMode::Dc => solution.p_or[l].abs() / grid.thermal_limit_mw(l),
        })
        .collect()
}

/// Solve in the requested mode.
pub fn solve(case: &PowerFlowCase, mode: FlowMode, options: AcOptions, start: Start<'_>) -> PowerFlowSolution {
    match mode {
        FlowMode::Ac => solve_ac(case, options, start),
        FlowMode::Dc => solve_dc(case),
    }
}
