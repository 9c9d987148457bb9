//! Multiphase feeder model and nonlinear AC power flow.
//!
//! The network is described by the slack-eliminated admittance blocks
//! `[Y_L0, Y_LL]`, the phase-to-phase incidence matrix `H` of the delta
//! connections and the slack phasors `v0`. With `i = Y_L0 v0 + Y_LL v`,
//! the power-flow equations read
//!
//! ```text
//! diag(Hᵀ conj(iΔ)) v + sY = diag(v) conj(i)
//! sΔ = diag(H v) conj(iΔ)
//! ```
//!
//! Phases of non-slack nodes are flattened node-major, phase-minor in the
//! order the nodes appear in the feeder document.

use std::collections::{HashMap, HashSet};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::cx::Cx;
use crate::{Error, Result};

pub const SLACK_NODE: u32 = 0;
pub const DEFAULT_PF_TOL: f64 = 1e-10;
pub const DEFAULT_PF_MAX_ITER: usize = 200;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    A,
    B,
    C,
}

impl Phase {
    pub const ALL: [Phase; 3] = [Phase::A, Phase::B, Phase::C];

    pub fn as_char(self) -> char {
        match self {
            Phase::A => 'a',
            Phase::B => 'b',
            Phase::C => 'c',
        }
    }

    fn slack_slot(self) -> usize {
        self as usize
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Connection {
    Wye,
    Delta,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PhaseIndex {
    pub node: u32,
    pub phase: Phase,
    pub flat: usize,
}

/// Feeder description document. All electrical quantities are per-unit.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FeederSpec {
    pub slack: [Cx; 3],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub base: Option<BaseValues>,
    pub nodes: Vec<NodeSpec>,
    pub lines: Vec<LineSpec>,
    #[serde(default)]
    pub loads: Vec<LoadSpec>,
}

/// Informational per-unit bases.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BaseValues {
    pub power_va: f64,
    pub voltage_v: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct NodeSpec {
    pub id: u32,
    pub phases: Vec<Phase>,
}

/// A line segment. `z` is the per-phase series impedance matrix over
/// `phases` (defaults to the phases of the downstream node).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LineSpec {
    pub from: u32,
    pub to: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub phases: Option<Vec<Phase>>,
    pub z: Vec<Vec<Cx>>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LoadSpec {
    pub node: u32,
    pub connection: Connection,
    pub phases: Vec<Phase>,
}

impl FeederSpec {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WyeLoad {
    pub node: u32,
    pub phase: Phase,
    pub flat: usize,
}

/// One row of `H`: a load connected from phase `from` to phase `to`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DeltaBranch {
    pub node: u32,
    pub from: Phase,
    pub to: Phase,
    pub plus: usize,
    pub minus: usize,
}

/// Immutable electrical model of a feeder.
#[derive(Clone, Debug)]
pub struct NetworkModel {
    phases: Vec<PhaseIndex>,
    lookup: HashMap<(u32, Phase), usize>,
    node_order: Vec<u32>,
    y_ll: DMatrix<Complex64>,
    y_l0: DMatrix<Complex64>,
    v0: DVector<Complex64>,
    wye: Vec<WyeLoad>,
    delta: Vec<DeltaBranch>,
    w: DVector<Complex64>,
    // Y_LL⁻¹ restricted to wye-loaded columns, and Y_LL⁻¹ Hᵀ. Factored once
    // here; every linearization only rescales their columns.
    z_wye: DMatrix<Complex64>,
    z_delta: DMatrix<Complex64>,
}

/// Net complex power injections, in wye-load and delta-branch order.
#[derive(Clone, Debug, PartialEq)]
pub struct ComplexInjection {
    pub s_y: DVector<Complex64>,
    pub s_delta: DVector<Complex64>,
}

impl ComplexInjection {
    pub fn zeros(net: &NetworkModel) -> Self {
        ComplexInjection {
            s_y: DVector::zeros(net.n_wye()),
            s_delta: DVector::zeros(net.n_delta()),
        }
    }

    /// Decodes a real state vector `[Re sY; Im sY; Re sΔ; Im sΔ]`.
    pub fn from_state(net: &NetworkModel, u: &DVector<f64>) -> Result<Self> {
        let (ny, nd) = (net.n_wye(), net.n_delta());
        check_dim(2 * ny + 2 * nd, u.len())?;
        let s_y = DVector::from_fn(ny, |j, _| Complex64::new(u[j], u[ny + j]));
        let off = 2 * ny;
        let s_delta = DVector::from_fn(nd, |r, _| Complex64::new(u[off + r], u[off + nd + r]));
        Ok(ComplexInjection { s_y, s_delta })
    }

    pub fn to_state(&self) -> DVector<f64> {
        let (ny, nd) = (self.s_y.len(), self.s_delta.len());
        let mut u = DVector::zeros(2 * ny + 2 * nd);
        for j in 0..ny {
            u[j] = self.s_y[j].re;
            u[ny + j] = self.s_y[j].im;
        }
        for r in 0..nd {
            u[2 * ny + r] = self.s_delta[r].re;
            u[2 * ny + nd + r] = self.s_delta[r].im;
        }
        u
    }
}

#[derive(Clone, Debug)]
pub struct PowerFlowSolution {
    pub v: DVector<Complex64>,
    pub iterations: usize,
    pub residual: f64,
}

pub(crate) fn check_dim(expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::DimensionMismatch { expected, got })
    }
}

fn sorted_unique(phases: &[Phase], what: &str) -> Result<Vec<Phase>> {
    let mut out = phases.to_vec();
    out.sort();
    out.dedup();
    if out.len() != phases.len() || out.is_empty() {
        return Err(Error::InvalidFeeder(format!("{what}: empty or repeated phase list")));
    }
    Ok(out)
}

struct UnionFind(Vec<usize>);

impl UnionFind {
    fn find(&mut self, mut x: usize) -> usize {
        while self.0[x] != x {
            self.0[x] = self.0[self.0[x]];
            x = self.0[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        self.0[ra] = rb;
    }
}

/// Assembles the admittance blocks, the delta incidence and the zero-load
/// voltage `w` from a feeder description.
pub fn build_network(spec: &FeederSpec) -> Result<NetworkModel> {
    let mut phases = Vec::new();
    let mut lookup = HashMap::new();
    let mut node_order = Vec::new();
    let mut node_phases: HashMap<u32, Vec<Phase>> = HashMap::new();
    node_phases.insert(SLACK_NODE, Phase::ALL.to_vec());

    let mut seen = HashSet::new();
    for node in &spec.nodes {
        if !seen.insert(node.id) {
            return Err(Error::DuplicateNode(node.id));
        }
        let ph = sorted_unique(&node.phases, &format!("node {}", node.id))?;
        if node.id == SLACK_NODE {
            if ph != Phase::ALL {
                return Err(Error::InvalidFeeder("slack node must be three-phase".into()));
            }
            continue;
        }
        for &p in &ph {
            lookup.insert((node.id, p), phases.len());
            phases.push(PhaseIndex {
                node: node.id,
                phase: p,
                flat: phases.len(),
            });
        }
        node_order.push(node.id);
        node_phases.insert(node.id, ph);
    }
    let n = phases.len();
    if n == 0 {
        return Err(Error::InvalidFeeder("no non-slack nodes".into()));
    }

    // Full admittance over [slack a,b,c | flat phases].
    let full_index = |node: u32, p: Phase| -> Option<usize> {
        if node == SLACK_NODE {
            Some(p.slack_slot())
        } else {
            lookup.get(&(node, p)).map(|f| 3 + f)
        }
    };
    let mut y = DMatrix::<Complex64>::zeros(3 + n, 3 + n);
    let mut uf = UnionFind((0..3 + n).collect());
    for line in &spec.lines {
        for id in [line.from, line.to] {
            if !node_phases.contains_key(&id) {
                return Err(Error::UnknownNode(id));
            }
        }
        let default_node = if line.to == SLACK_NODE { line.from } else { line.to };
        let lp = match &line.phases {
            Some(p) => sorted_unique(p, &format!("line {}-{}", line.from, line.to))?,
            None => node_phases[&default_node].clone(),
        };
        let k = lp.len();
        if line.z.len() != k || line.z.iter().any(|row| row.len() != k) {
            return Err(Error::InvalidFeeder(format!(
                "line {}-{}: impedance matrix must be {k}x{k}",
                line.from, line.to
            )));
        }
        let z = DMatrix::from_fn(k, k, |r, c| Complex64::from(line.z[r][c]));
        let yl = z
            .try_inverse()
            .ok_or_else(|| Error::InvalidFeeder(format!("line {}-{}: singular impedance", line.from, line.to)))?;
        let mut fi = Vec::with_capacity(k);
        let mut ti = Vec::with_capacity(k);
        for &p in &lp {
            fi.push(full_index(line.from, p).ok_or(Error::MissingPhase {
                node: line.from,
                phase: p.as_char(),
            })?);
            ti.push(full_index(line.to, p).ok_or(Error::MissingPhase {
                node: line.to,
                phase: p.as_char(),
            })?);
        }
        for r in 0..k {
            uf.union(fi[r], ti[r]);
            for c in 0..k {
                let val = yl[(r, c)];
                y[(fi[r], fi[c])] += val;
                y[(ti[r], ti[c])] += val;
                y[(fi[r], ti[c])] -= val;
                y[(ti[r], fi[c])] -= val;
            }
        }
    }
    let slack_roots: HashSet<usize> = (0..3).map(|s| uf.find(s)).collect();
    for ph in &phases {
        if !slack_roots.contains(&uf.find(3 + ph.flat)) {
            return Err(Error::Disconnected(format!(
                "phase {} of node {} is not reachable from the slack bus",
                ph.phase.as_char(),
                ph.node
            )));
        }
    }

    let y_ll = y.view((3, 3), (n, n)).into_owned();
    let y_l0 = y.view((3, 0), (n, 3)).into_owned();
    let v0 = DVector::from_iterator(3, spec.slack.iter().map(|&c| Complex64::from(c)));

    let z_full = y_ll.clone().lu().try_inverse().ok_or(Error::SingularAdmittance)?;
    if z_full.iter().any(|c| !c.re.is_finite() || !c.im.is_finite()) {
        return Err(Error::SingularAdmittance);
    }

    // Loads.
    let mut wye = Vec::new();
    let mut delta_nodes = Vec::new();
    let mut wye_seen = HashSet::new();
    for load in &spec.loads {
        if load.node == SLACK_NODE {
            return Err(Error::InvalidFeeder("loads at the slack bus are not modeled".into()));
        }
        let available = node_phases.get(&load.node).ok_or(Error::UnknownNode(load.node))?;
        let lp = sorted_unique(&load.phases, &format!("load at node {}", load.node))?;
        for &p in &lp {
            if !available.contains(&p) {
                return Err(Error::MissingPhase {
                    node: load.node,
                    phase: p.as_char(),
                });
            }
        }
        match load.connection {
            Connection::Wye => {
                for &p in &lp {
                    if !wye_seen.insert((load.node, p)) {
                        return Err(Error::InvalidFeeder(format!(
                            "duplicate wye load on node {} phase {}",
                            load.node,
                            p.as_char()
                        )));
                    }
                    wye.push(WyeLoad {
                        node: load.node,
                        phase: p,
                        flat: lookup[&(load.node, p)],
                    });
                }
            }
            Connection::Delta => {
                if lp != Phase::ALL {
                    return Err(Error::InvalidFeeder(format!(
                        "delta load at node {} must span three phases",
                        load.node
                    )));
                }
                if delta_nodes.contains(&load.node) {
                    return Err(Error::InvalidFeeder(format!(
                        "duplicate delta load on node {}",
                        load.node
                    )));
                }
                delta_nodes.push(load.node);
            }
        }
    }
    wye.sort_by_key(|l| l.flat);
    let position = |id: u32| node_order.iter().position(|&n| n == id).unwrap_or(usize::MAX);
    delta_nodes.sort_by_key(|&id| position(id));
    let mut delta = Vec::new();
    for node in delta_nodes {
        for (from, to) in [(Phase::A, Phase::B), (Phase::B, Phase::C), (Phase::C, Phase::A)] {
            delta.push(DeltaBranch {
                node,
                from,
                to,
                plus: lookup[&(node, from)],
                minus: lookup[&(node, to)],
            });
        }
    }

    let w = -(&z_full * (&y_l0 * &v0));
    let z_wye = DMatrix::from_fn(n, wye.len(), |r, c| z_full[(r, wye[c].flat)]);
    let z_delta = DMatrix::from_fn(n, delta.len(), |r, c| {
        z_full[(r, delta[c].plus)] - z_full[(r, delta[c].minus)]
    });

    Ok(NetworkModel {
        phases,
        lookup,
        node_order,
        y_ll,
        y_l0,
        v0,
        wye,
        delta,
        w,
        z_wye,
        z_delta,
    })
}

impl NetworkModel {
    pub fn from_json(text: &str) -> Result<Self> {
        build_network(&FeederSpec::from_json(text)?)
    }

    pub fn n_phases(&self) -> usize {
        self.phases.len()
    }

    pub fn n_wye(&self) -> usize {
        self.wye.len()
    }

    pub fn n_delta(&self) -> usize {
        self.delta.len()
    }

    /// Length of the real load-state vector `u`.
    pub fn state_dim(&self) -> usize {
        2 * (self.wye.len() + self.delta.len())
    }

    pub fn phases(&self) -> &[PhaseIndex] {
        &self.phases
    }

    /// Non-slack node ids in flattening order.
    pub fn nodes(&self) -> &[u32] {
        &self.node_order
    }

    pub fn flat_index(&self, node: u32, phase: Phase) -> Option<usize> {
        self.lookup.get(&(node, phase)).copied()
    }

    pub fn node_flat_indices(&self, node: u32) -> Vec<usize> {
        self.phases.iter().filter(|p| p.node == node).map(|p| p.flat).collect()
    }

    pub fn has_node(&self, node: u32) -> bool {
        self.node_order.contains(&node)
    }

    pub fn wye_loads(&self) -> &[WyeLoad] {
        &self.wye
    }

    pub fn delta_branches(&self) -> &[DeltaBranch] {
        &self.delta
    }

    pub fn y_ll(&self) -> &DMatrix<Complex64> {
        &self.y_ll
    }

    pub fn y_l0(&self) -> &DMatrix<Complex64> {
        &self.y_l0
    }

    pub fn v0(&self) -> &DVector<Complex64> {
        &self.v0
    }

    /// Zero-load voltage profile.
    pub fn w(&self) -> &DVector<Complex64> {
        &self.w
    }

    pub(crate) fn z_wye(&self) -> &DMatrix<Complex64> {
        &self.z_wye
    }

    pub(crate) fn z_delta(&self) -> &DMatrix<Complex64> {
        &self.z_delta
    }

    /// Dense copy of the incidence matrix `H` (delta rows × phases).
    pub fn h_matrix(&self) -> DMatrix<f64> {
        let mut h = DMatrix::zeros(self.delta.len(), self.phases.len());
        for (r, b) in self.delta.iter().enumerate() {
            h[(r, b.plus)] = 1.0;
            h[(r, b.minus)] = -1.0;
        }
        h
    }

    pub fn apply_h(&self, v: &DVector<Complex64>) -> DVector<Complex64> {
        DVector::from_iterator(self.delta.len(), self.delta.iter().map(|b| v[b.plus] - v[b.minus]))
    }

    /// Checks that `v` is nonzero wherever a load divides by it.
    pub fn check_loaded_voltages(&self, v: &DVector<Complex64>, floor: f64) -> Result<()> {
        for l in &self.wye {
            if !(v[l.flat].norm() > floor) {
                return Err(Error::ZeroVoltage { index: l.flat });
            }
        }
        for (r, b) in self.delta.iter().enumerate() {
            if !((v[b.plus] - v[b.minus]).norm() > floor) {
                return Err(Error::ZeroVoltage { index: r });
            }
        }
        Ok(())
    }

    /// Complex voltage from its rectangular form `[Re v; Im v]`.
    pub fn decode_voltage(&self, z: &DVector<f64>) -> Result<DVector<Complex64>> {
        let n = self.phases.len();
        check_dim(2 * n, z.len())?;
        Ok(DVector::from_fn(n, |i, _| Complex64::new(z[i], z[n + i])))
    }

    pub fn encode_voltage(v: &DVector<Complex64>) -> DVector<f64> {
        let n = v.len();
        DVector::from_fn(2 * n, |i, _| if i < n { v[i].re } else { v[i - n].im })
    }
}

/// Elementwise defect of the power-balance equation with the net and
/// delta currents eliminated. Zero iff `(v, inj)` solves the AC equations.
pub fn pf_residual(net: &NetworkModel, v: &DVector<Complex64>, inj: &ComplexInjection) -> Result<DVector<Complex64>> {
    let n = net.n_phases();
    check_dim(n, v.len())?;
    check_dim(net.n_wye(), inj.s_y.len())?;
    check_dim(net.n_delta(), inj.s_delta.len())?;
    net.check_loaded_voltages(v, 0.0)?;

    let i = &net.y_l0 * &net.v0 + &net.y_ll * v;
    let mut rhs = DVector::<Complex64>::zeros(n);
    for (j, l) in net.wye.iter().enumerate() {
        rhs[l.flat] += inj.s_y[j];
    }
    // Hᵀ conj(iΔ), with conj(iΔ) = sΔ / (H v).
    let mut ht = DVector::<Complex64>::zeros(n);
    for (r, b) in net.delta.iter().enumerate() {
        let c = inj.s_delta[r] / (v[b.plus] - v[b.minus]);
        ht[b.plus] += c;
        ht[b.minus] -= c;
    }
    Ok(DVector::from_fn(n, |k, _| ht[k] * v[k] + rhs[k] - v[k] * i[k].conj()))
}

pub fn max_abs(r: &DVector<Complex64>) -> f64 {
    r.iter().fold(0.0, |acc: f64, c| acc.max(c.norm()))
}

/// Fixed-point power flow
/// `v ← w + Y_LL⁻¹ [conj(sY)/conj(v) + Hᵀ conj(sΔ)/conj(H v)]`,
/// stopping once the max-norm of [`pf_residual`] is at most `tol`.
pub fn solve_power_flow(
    net: &NetworkModel,
    inj: &ComplexInjection,
    v_init: &DVector<Complex64>,
    tol: f64,
    max_iter: usize,
) -> Result<PowerFlowSolution> {
    if !(tol > 0.0) {
        return Err(Error::InvalidConfig(format!(
            "power-flow tolerance must be positive, got {tol}"
        )));
    }
    check_dim(net.n_phases(), v_init.len())?;
    check_dim(net.n_wye(), inj.s_y.len())?;
    check_dim(net.n_delta(), inj.s_delta.len())?;

    let mut v = v_init.clone();
    let mut a = DVector::<Complex64>::zeros(net.n_wye());
    let mut b = DVector::<Complex64>::zeros(net.n_delta());
    let mut residual = f64::INFINITY;
    for iteration in 1..=max_iter {
        net.check_loaded_voltages(&v, 0.0)?;
        for (j, l) in net.wye.iter().enumerate() {
            a[j] = inj.s_y[j].conj() / v[l.flat].conj();
        }
        for (r, br) in net.delta.iter().enumerate() {
            b[r] = inj.s_delta[r].conj() / (v[br.plus] - v[br.minus]).conj();
        }
        v = &net.w + &net.z_wye * &a + &net.z_delta * &b;
        if v.iter().any(|c| !c.re.is_finite() || !c.im.is_finite()) {
            return Err(Error::PowerFlowNonConvergence {
                iterations: iteration,
                residual: f64::INFINITY,
            });
        }
        residual = max_abs(&pf_residual(net, &v, inj)?);
        if residual <= tol {
            return Ok(PowerFlowSolution {
                v,
                iterations: iteration,
                residual,
            });
        }
    }
    Err(Error::PowerFlowNonConvergence {
        iterations: max_iter,
        residual,
    })
}
