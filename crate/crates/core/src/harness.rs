//! Scenario runner: simulate a feeder, stream measurements through the
//! estimator, and score it against the batch optimum and the ground truth.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::cost::{time_grad, CostSnapshot, CostWeights};
use crate::fopc::{batch_solve_newton, certify, ConvergenceCertificate, FopcConfig, FopcEstimator, BATCH_TOL};
use crate::linmodel::linearize;
use crate::netmodel::NetworkModel;
use crate::sensing::{
    build_selection, simulate_stream, window_deviation, LoadProfile, OutlierSpec, SelectionSets, StreamConfig,
    SyntheticProfile, WindowDeviation,
};
use crate::{Error, Result};

pub const FEEDER4: &str = include_str!("../feeders/feeder4.json");
pub const FEEDER12: &str = include_str!("../feeders/feeder12.json");

const BATCH_MAX_ITER: usize = 500;
const CYCLE_REPS: usize = 2000;
const CYCLE_BATCHES: usize = 7;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ProfileSpec {
    Synthetic(SyntheticProfile),
    Csv {
        path: PathBuf,
        #[serde(default = "default_pf")]
        power_factor: f64,
    },
}

fn default_pf() -> f64 {
    0.95
}

impl Default for ProfileSpec {
    fn default() -> Self {
        ProfileSpec::Synthetic(SyntheticProfile::default())
    }
}

/// Metered sets default to every load connection.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScenarioSelection {
    pub pmu_nodes: Vec<u32>,
    pub metered_wye: Option<Vec<u32>>,
    pub metered_delta: Option<Vec<u32>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScenarioFopc {
    #[serde(rename = "P")]
    pub p: usize,
    #[serde(rename = "C")]
    pub c: usize,
    /// `None` picks `1/L` of the zero-load model.
    pub alpha: Option<f64>,
    pub beta: Option<f64>,
    pub gamma: f64,
}

impl Default for ScenarioFopc {
    fn default() -> Self {
        let d = FopcConfig::default();
        ScenarioFopc {
            p: d.p,
            c: d.c,
            alpha: None,
            beta: None,
            gamma: d.gamma,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScenarioSensing {
    pub sigma_v: f64,
    pub sigma_u: f64,
    /// Averaging window of the load meters, seconds.
    pub window: f64,
    /// Sampling period, seconds.
    pub h: f64,
    pub outliers: Option<OutlierSpec>,
}

impl Default for ScenarioSensing {
    fn default() -> Self {
        ScenarioSensing {
            sigma_v: 1e-5,
            sigma_u: 0.0,
            window: 600.0,
            h: 6.0,
            outliers: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Scenario {
    /// Feeder JSON path, or `builtin:feeder4` / `builtin:feeder12`.
    pub feeder: String,
    pub profile: ProfileSpec,
    pub selection: ScenarioSelection,
    pub fopc: ScenarioFopc,
    pub cost: CostWeights,
    pub sensing: ScenarioSensing,
    pub steps: usize,
    pub seed: u64,
    /// Replace the estimate by the batch optimum after every step.
    pub oracle: bool,
    pub batch_tol: f64,
}

impl Default for Scenario {
    fn default() -> Self {
        Scenario {
            feeder: "builtin:feeder12".into(),
            profile: ProfileSpec::default(),
            selection: ScenarioSelection {
                pmu_nodes: vec![3, 5, 11],
                ..Default::default()
            },
            fopc: ScenarioFopc::default(),
            cost: CostWeights::default(),
            sensing: ScenarioSensing::default(),
            steps: 600,
            seed: 1,
            oracle: false,
            batch_tol: BATCH_TOL,
        }
    }
}

impl Scenario {
    pub fn from_value(v: Value) -> Result<Self> {
        Ok(serde_json::from_value(v)?)
    }

    /// Reads a scenario file; relative feeder and profile paths are taken
    /// relative to the file.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut s: Scenario = serde_json::from_str(&fs::read_to_string(path)?)?;
        let base = path.parent().unwrap_or(Path::new(""));
        if !s.feeder.starts_with("builtin:") && Path::new(&s.feeder).is_relative() {
            s.feeder = base.join(&s.feeder).to_string_lossy().into_owned();
        }
        if let ProfileSpec::Csv { path: p, .. } = &mut s.profile {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(s)
    }

    pub fn to_value(&self) -> Value {
        serde_json::to_value(self).expect("scenario serializes")
    }

    /// Applies a JSON merge patch.
    pub fn with_overrides(&self, patch: &Value) -> Result<Self> {
        let mut v = self.to_value();
        merge(&mut v, patch);
        Self::from_value(v)
    }

    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(serde_json::to_vec(self).expect("scenario serializes")))
    }

    pub fn network(&self) -> Result<NetworkModel> {
        let text = match self.feeder.as_str() {
            "builtin:feeder4" => FEEDER4.to_string(),
            "builtin:feeder12" => FEEDER12.to_string(),
            other if other.starts_with("builtin:") => {
                return Err(Error::InvalidConfig(format!("unknown builtin feeder {other}")))
            }
            path => fs::read_to_string(path)?,
        };
        NetworkModel::from_json(&text)
    }

    /// Gap between window-averaged and instantaneous loads for this
    /// scenario's profile. Independent of meter noise and outliers.
    pub fn meter_deviation(&self) -> Result<WindowDeviation> {
        let net = self.network()?;
        window_deviation(&self.profile(&net)?, self.sensing.window)
    }

    fn validate(&self) -> Result<()> {
        if self.steps < 1 {
            return Err(Error::InvalidConfig("horizon must be at least one step".into()));
        }
        if !(self.batch_tol > 0.0) {
            return Err(Error::InvalidConfig("batch_tol must be positive".into()));
        }
        self.cost.validate()
    }

    fn profile(&self, net: &NetworkModel) -> Result<LoadProfile> {
        let h = self.sensing.h;
        match &self.profile {
            ProfileSpec::Synthetic(g) => Ok(g.generate(net.n_wye(), net.n_delta(), h, self.steps, self.seed)),
            ProfileSpec::Csv { path, power_factor } => {
                let p = LoadProfile::from_csv(File::open(path)?, h, net.n_wye(), *power_factor)?;
                if p.n_channels() != net.n_wye() + net.n_delta() {
                    return Err(Error::InvalidConfig(format!(
                        "profile has {} channels, feeder has {} loads",
                        p.n_channels(),
                        net.n_wye() + net.n_delta()
                    )));
                }
                Ok(p)
            }
        }
    }

    fn selection_sets(&self, net: &NetworkModel) -> SelectionSets {
        let all = SelectionSets::all_loads_metered(net, self.selection.pmu_nodes.iter().copied());
        SelectionSets {
            pmu_nodes: all.pmu_nodes,
            metered_wye: match &self.selection.metered_wye {
                Some(v) => v.iter().copied().collect(),
                None => all.metered_wye,
            },
            metered_delta: match &self.selection.metered_delta {
                Some(v) => v.iter().copied().collect(),
                None => all.metered_delta,
            },
        }
    }
}

/// RFC 7396 style merge; `null` deletes.
pub fn merge(target: &mut Value, patch: &Value) {
    match (target, patch) {
        (Value::Object(t), Value::Object(p)) => {
            for (k, v) in p {
                if v.is_null() {
                    t.remove(k);
                } else {
                    merge(t.entry(k.clone()).or_insert(Value::Null), v);
                }
            }
        }
        (t, p) => *t = p.clone(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CertSummary {
    #[serde(rename = "rho_P")]
    pub rho_p: f64,
    #[serde(rename = "rho_C")]
    pub rho_c: f64,
    pub tau0: f64,
    pub valid: bool,
}

impl From<&ConvergenceCertificate> for CertSummary {
    fn from(c: &ConvergenceCertificate) -> Self {
        CertSummary {
            rho_p: c.rho_p,
            rho_c: c.rho_c,
            tau0: c.tau0,
            valid: c.valid,
        }
    }
}

/// One line of the run log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub k: u64,
    pub t: f64,
    pub tracking_err: f64,
    /// `‖û − u*‖`, not normalized.
    pub tracking_abs: f64,
    pub u_err: f64,
    pub v_err: f64,
    /// RMS of the rectangular voltage error, per-unit.
    pub v_rmse: f64,
    pub pred_ms: f64,
    pub corr_ms: f64,
    pub fallback: bool,
    pub cert: CertSummary,
}

impl StepRecord {
    pub fn step_ms(&self) -> f64 {
        self.pred_ms + self.corr_ms
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SteadyState {
    pub tracking: f64,
    pub u_err: f64,
    pub v_err: f64,
    pub v_rmse: f64,
    pub step_ms_mean: f64,
    pub step_ms_median: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub scenario_hash: String,
    pub steps: usize,
    pub alpha: f64,
    pub beta: f64,
    /// Certificate at the first step.
    pub certificate: ConvergenceCertificate,
    pub worst_tau0: f64,
    pub invalid_steps: usize,
    pub fallbacks: usize,
    /// `max_k ‖time_grad‖ / h` over the run.
    pub c0_estimate: f64,
    /// Gap between metered (window-averaged) and true injections.
    pub meter_deviation: WindowDeviation,
    /// Per-step predict+correct cost replayed in a tight loop on the final
    /// state, milliseconds; steadier than the in-run timings.
    pub cycle_ms: Option<f64>,
    pub steady_state: SteadyState,
}

#[derive(Clone, Debug)]
pub struct RunOutput {
    pub scenario: Scenario,
    pub records: Vec<StepRecord>,
    pub summary: RunSummary,
    /// Estimator in its final state.
    pub estimator: FopcEstimator,
}

fn rel(err: f64, norm: f64) -> f64 {
    if norm > 0.0 {
        err / norm
    } else {
        err
    }
}

fn median(mut xs: Vec<f64>) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

/// Means over the final half of the horizon.
pub fn steady_state(records: &[StepRecord]) -> SteadyState {
    let tail = &records[records.len() / 2..];
    let n = tail.len().max(1) as f64;
    let mean = |f: fn(&StepRecord) -> f64| tail.iter().map(f).sum::<f64>() / n;
    SteadyState {
        tracking: mean(|r| r.tracking_err),
        u_err: mean(|r| r.u_err),
        v_err: mean(|r| r.v_err),
        v_rmse: mean(|r| r.v_rmse),
        step_ms_mean: mean(StepRecord::step_ms),
        step_ms_median: median(tail.iter().map(StepRecord::step_ms).collect()),
    }
}

pub fn run_scenario(s: &Scenario) -> Result<RunOutput> {
    s.validate()?;
    let net = s.network()?;
    let sets = s.selection_sets(&net);
    let selection = build_selection(&net, &sets)?;
    let profile = s.profile(&net)?;
    let stream_cfg = StreamConfig {
        sigma_v: s.sensing.sigma_v,
        sigma_u: s.sensing.sigma_u,
        window: s.sensing.window,
        h: s.sensing.h,
        seed: s.seed.wrapping_add(0x9e37_79b9),
        steps: s.steps,
        outliers: s.sensing.outliers.clone(),
    };
    let stream = simulate_stream(&net, &profile, &selection, &stream_cfg)?;
    let meter_deviation = window_deviation(&profile, s.sensing.window)?;

    let zero_load = linearize(&net, net.w())?;
    let first = CostSnapshot::from_frame(&zero_load, &selection, &stream.frames[0], &s.cost, None)?;
    let auto = 1.0 / first.bounds().l;
    let cfg = FopcConfig {
        p: s.fopc.p,
        c: s.fopc.c,
        alpha: s.fopc.alpha.unwrap_or(auto),
        beta: s.fopc.beta.unwrap_or(auto),
        gamma: s.fopc.gamma,
        h: s.sensing.h,
    };
    let initial_cert = certify(&cfg, &first.bounds_measured());
    if !initial_cert.valid {
        log::warn!(
            "convergence certificate invalid at start: tau0 = {:.4}",
            initial_cert.tau0
        );
    }

    let mut est = FopcEstimator::new(net, selection, cfg.clone(), s.cost.clone())?;
    let mut records = Vec::with_capacity(s.steps);
    let mut u_star = DVector::zeros(est.network().state_dim());
    let mut prev_snap: Option<CostSnapshot> = None;
    let mut c0: f64 = 0.0;
    for (frame, truth) in stream.frames.iter().zip(&stream.truth) {
        let report = est.step(frame)?;
        let snap = est.snapshot().expect("snapshot after step").clone();
        u_star = batch_solve_newton(&snap, &u_star, s.batch_tol, BATCH_MAX_ITER)?.u;
        if s.oracle {
            est.override_estimate(u_star.clone())?;
        }
        let st = est.state();
        if prev_snap.is_some() {
            c0 = c0.max(time_grad(&snap, prev_snap.as_ref(), &st.u_hat)?.norm() / cfg.h);
        }
        let dz = (&st.z_hat - &truth.z).norm();
        records.push(StepRecord {
            k: frame.k,
            t: frame.t,
            tracking_err: rel((&st.u_hat - &u_star).norm(), u_star.norm()),
            tracking_abs: (&st.u_hat - &u_star).norm(),
            u_err: rel((&st.u_hat - &truth.u).norm(), truth.u.norm()),
            v_err: rel(dz, truth.z.norm()),
            v_rmse: dz / (truth.z.len() as f64).sqrt(),
            pred_ms: report.pred_ms,
            corr_ms: report.corr_ms,
            fallback: report.fallback,
            cert: CertSummary::from(&report.cert),
        });
        prev_snap = Some(snap);
    }

    let summary = RunSummary {
        scenario_hash: s.hash(),
        steps: s.steps,
        alpha: cfg.alpha,
        beta: cfg.beta,
        certificate: initial_cert,
        worst_tau0: records.iter().map(|r| r.cert.tau0).fold(f64::NEG_INFINITY, f64::max),
        invalid_steps: records.iter().filter(|r| !r.cert.valid).count(),
        fallbacks: records.iter().filter(|r| r.fallback).count(),
        c0_estimate: c0,
        meter_deviation,
        cycle_ms: est.cycle_cost_ms(CYCLE_REPS, CYCLE_BATCHES)?,
        steady_state: steady_state(&records),
    };
    Ok(RunOutput {
        scenario: s.clone(),
        records,
        summary,
        estimator: est,
    })
}

pub fn write_errors_csv<W: Write>(records: &[StepRecord], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["k", "t", "tracking", "u_err", "v_err"])?;
    for r in records {
        w.write_record([
            r.k.to_string(),
            r.t.to_string(),
            r.tracking_err.to_string(),
            r.u_err.to_string(),
            r.v_err.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Writes `errors.csv`, `run.jsonl`, `summary.json` and `scenario.json`.
pub fn write_artifacts(run: &RunOutput, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    write_errors_csv(&run.records, File::create(dir.join("errors.csv"))?)?;
    let mut log = BufWriter::new(File::create(dir.join("run.jsonl"))?);
    for r in &run.records {
        serde_json::to_writer(&mut log, r)?;
        log.write_all(b"\n")?;
    }
    log.flush()?;
    fs::write(dir.join("summary.json"), serde_json::to_string_pretty(&run.summary)?)?;
    fs::write(dir.join("scenario.json"), serde_json::to_string_pretty(&run.scenario)?)?;
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CompareMode {
    #[serde(rename = "fixed_C")]
    FixedC,
    FixedTime,
    PmuSweep,
}

impl std::str::FromStr for CompareMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fixed_C" | "fixed_c" => Ok(CompareMode::FixedC),
            "fixed_time" => Ok(CompareMode::FixedTime),
            "pmu_sweep" => Ok(CompareMode::PmuSweep),
            _ => Err(Error::InvalidConfig(format!("unknown compare mode {s}"))),
        }
    }
}

/// Relative per-step cost tolerance for the fixed-time comparison.
pub const COST_MATCH: f64 = 0.2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompareRow {
    pub overrides: Value,
    #[serde(rename = "P")]
    pub p: usize,
    #[serde(rename = "C")]
    pub c: usize,
    pub pmu_count: usize,
    pub steady_state: SteadyState,
    pub tau0: f64,
    pub valid: bool,
    /// Replayed per-step cost, milliseconds.
    pub cycle_ms: f64,
    /// Per-step cost within the tolerance of the first variant.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cost_matched: Option<bool>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompareTable {
    pub mode: CompareMode,
    pub rows: Vec<CompareRow>,
    /// Absent for a single variant.
    pub verdict: Option<Verdict>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub claim: String,
    pub holds: bool,
}

fn non_increasing(
    rows: &[&CompareRow],
    key: impl Fn(&CompareRow) -> usize,
    metric: impl Fn(&CompareRow) -> f64,
) -> bool {
    let mut sorted: Vec<_> = rows.to_vec();
    sorted.sort_by_key(|r| key(r));
    sorted.windows(2).all(|w| metric(w[1]) <= metric(w[0]))
}

/// Cost of one predict/correct cycle per estimator in milliseconds, timed
/// in interleaved rounds and keeping the fastest round.
fn interleaved_cycle_ms(estimators: &[FopcEstimator]) -> Result<Vec<Option<f64>>> {
    let mut best = vec![None::<f64>; estimators.len()];
    for _ in 0..CYCLE_BATCHES {
        for (b, est) in best.iter_mut().zip(estimators) {
            if let Some(t) = est.cycle_cost_ms(CYCLE_REPS, 1)? {
                *b = Some(b.map_or(t, |x| x.min(t)));
            }
        }
    }
    Ok(best)
}

/// Runs every variant (base plus overrides) in turn.
pub fn compare(mode: CompareMode, base: &Scenario, variants: &[Value]) -> Result<CompareTable> {
    if variants.is_empty() {
        return Err(Error::InvalidConfig("compare needs at least one variant".into()));
    }
    let mut rows = Vec::with_capacity(variants.len());
    let mut estimators = Vec::with_capacity(variants.len());
    for patch in variants {
        let s = base.with_overrides(patch)?;
        let run = run_scenario(&s)?;
        rows.push(CompareRow {
            overrides: patch.clone(),
            p: s.fopc.p,
            c: s.fopc.c,
            pmu_count: s.selection.pmu_nodes.len(),
            steady_state: run.summary.steady_state.clone(),
            tau0: run.summary.certificate.tau0,
            valid: run.summary.certificate.valid,
            cycle_ms: run.summary.steady_state.step_ms_mean,
            cost_matched: None,
        });
        estimators.push(run.estimator);
    }
    for (r, t) in rows.iter_mut().zip(interleaved_cycle_ms(&estimators)?) {
        if let Some(t) = t {
            r.cycle_ms = t;
        }
    }
    if mode == CompareMode::FixedTime {
        let reference = rows[0].cycle_ms;
        for r in &mut rows {
            r.cost_matched = Some((r.cycle_ms - reference).abs() <= COST_MATCH * reference);
        }
    }
    let verdict = (rows.len() > 1).then(|| {
        let all: Vec<&CompareRow> = rows.iter().collect();
        match mode {
            CompareMode::FixedC => Verdict {
                claim: "steady-state tracking error non-increasing in P".into(),
                holds: non_increasing(&all, |r| r.p, |r| r.steady_state.tracking),
            },
            CompareMode::PmuSweep => Verdict {
                claim: "steady-state voltage error non-increasing in PMU count".into(),
                holds: non_increasing(&all, |r| r.pmu_count, |r| r.steady_state.v_err),
            },
            CompareMode::FixedTime => {
                let matched: Vec<&CompareRow> = rows.iter().filter(|r| r.cost_matched == Some(true)).collect();
                Verdict {
                    claim: "at matched per-step cost, steady-state tracking error non-increasing in P".into(),
                    holds: matched.len() == rows.len()
                        && non_increasing(&matched, |r| r.p, |r| r.steady_state.tracking),
                }
            }
        }
    });
    Ok(CompareTable { mode, rows, verdict })
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn small() -> Scenario {
        Scenario {
            feeder: "builtin:feeder4".into(),
            selection: ScenarioSelection {
                pmu_nodes: vec![2],
                ..Default::default()
            },
            steps: 30,
            sensing: ScenarioSensing {
                window: 60.0,
                ..Default::default()
            },
            ..Default::default()
        }
    }

    #[test]
    fn merge_patch() {
        let mut v = json!({"a": {"b": 1, "c": 2}, "d": 3});
        merge(&mut v, &json!({"a": {"b": 5, "c": null}, "e": [1]}));
        assert_eq!(v, json!({"a": {"b": 5}, "d": 3, "e": [1]}));
    }

    #[test]
    fn overrides_round_trip() {
        let s = small()
            .with_overrides(&json!({"fopc": {"P": 8, "C": 3}, "steps": 5}))
            .unwrap();
        assert_eq!((s.fopc.p, s.fopc.c, s.steps), (8, 3, 5));
        assert_eq!(Scenario::from_value(s.to_value()).unwrap(), s);
        assert_ne!(s.hash(), small().hash());
    }

    #[test]
    fn invalid_scenarios() {
        assert!(run_scenario(&Scenario { steps: 0, ..small() }).is_err());
        assert!(run_scenario(&Scenario {
            feeder: "builtin:nope".into(),
            ..small()
        })
        .is_err());
        assert!(compare(CompareMode::FixedC, &small(), &[]).is_err());
    }

    #[test]
    fn oracle_mode_zero_tracking() {
        let run = run_scenario(&Scenario {
            oracle: true,
            ..small()
        })
        .unwrap();
        assert!(run.records.iter().all(|r| r.tracking_err == 0.0));
    }

    #[test]
    fn single_variant_has_no_verdict() {
        let t = compare(CompareMode::FixedC, &small(), &[json!({})]).unwrap();
        assert_eq!(t.rows.len(), 1);
        assert!(t.verdict.is_none());
    }

    #[test]
    fn compare_mode_names() {
        assert_eq!("fixed_C".parse::<CompareMode>().unwrap(), CompareMode::FixedC);
        assert_eq!(serde_json::to_value(CompareMode::FixedC).unwrap(), json!("fixed_C"));
        assert!("nope".parse::<CompareMode>().is_err());
    }
}
