//! Measurement streams: fast noisy-but-accurate PMU phasors at selected
//! nodes and slow, window-averaged load powers at metered connections.

use std::collections::BTreeSet;
use std::io::{BufRead, Write};

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::netmodel::{solve_power_flow, ComplexInjection, NetworkModel, DEFAULT_PF_MAX_ITER, DEFAULT_PF_TOL};
use crate::{Error, Result};

/// Which nodes carry PMUs and which load connections are metered.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SelectionSets {
    #[serde(default)]
    pub pmu_nodes: BTreeSet<u32>,
    #[serde(default)]
    pub metered_wye: BTreeSet<u32>,
    #[serde(default)]
    pub metered_delta: BTreeSet<u32>,
}

impl SelectionSets {
    /// PMUs at `pmu_nodes`, every load connection metered.
    pub fn all_loads_metered(net: &NetworkModel, pmu_nodes: impl IntoIterator<Item = u32>) -> Self {
        SelectionSets {
            pmu_nodes: pmu_nodes.into_iter().collect(),
            metered_wye: net.wye_loads().iter().map(|l| l.node).collect(),
            metered_delta: net.delta_branches().iter().map(|b| b.node).collect(),
        }
    }
}

/// Row-selection operator with exactly one unit entry per row.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RowSelection {
    pub rows: Vec<usize>,
    pub ncols: usize,
}

impl RowSelection {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn apply(&self, x: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(self.rows.len(), self.rows.iter().map(|&r| x[r]))
    }

    pub fn to_matrix(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.rows.len(), self.ncols);
        for (i, &r) in self.rows.iter().enumerate() {
            m[(i, r)] = 1.0;
        }
        m
    }
}

/// The operators `J_v`, `J^Y`, `J^Δ`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Selection {
    pub j_v: RowSelection,
    pub j_y: RowSelection,
    pub j_delta: RowSelection,
}

pub fn build_selection(net: &NetworkModel, sets: &SelectionSets) -> Result<Selection> {
    let n = net.n_phases();
    let mut pmu_phases = Vec::new();
    for &node in &sets.pmu_nodes {
        if !net.has_node(node) {
            return Err(Error::UnknownNode(node));
        }
        pmu_phases.extend(net.node_flat_indices(node));
    }
    pmu_phases.sort_unstable();
    let mut v_rows = pmu_phases.clone();
    v_rows.extend(pmu_phases.iter().map(|&i| n + i));

    let ny = net.n_wye();
    for &node in &sets.metered_wye {
        if !net.has_node(node) {
            return Err(Error::UnknownNode(node));
        }
        if !net.wye_loads().iter().any(|l| l.node == node) {
            return Err(Error::WrongConnection {
                node,
                connection: "wye",
            });
        }
    }
    let wye: Vec<usize> = (0..ny)
        .filter(|&j| sets.metered_wye.contains(&net.wye_loads()[j].node))
        .collect();
    let mut y_rows = wye.clone();
    y_rows.extend(wye.iter().map(|&j| ny + j));

    let nd = net.n_delta();
    for &node in &sets.metered_delta {
        if !net.has_node(node) {
            return Err(Error::UnknownNode(node));
        }
        if !net.delta_branches().iter().any(|b| b.node == node) {
            return Err(Error::WrongConnection {
                node,
                connection: "delta",
            });
        }
    }
    let delta: Vec<usize> = (0..nd)
        .filter(|&r| sets.metered_delta.contains(&net.delta_branches()[r].node))
        .collect();
    let mut d_rows = delta.clone();
    d_rows.extend(delta.iter().map(|&r| nd + r));

    Ok(Selection {
        j_v: RowSelection {
            rows: v_rows,
            ncols: 2 * n,
        },
        j_y: RowSelection {
            rows: y_rows,
            ncols: 2 * ny,
        },
        j_delta: RowSelection {
            rows: d_rows,
            ncols: 2 * nd,
        },
    })
}

/// Per-channel active/reactive injection series at a fixed resolution.
/// Channels are the wye loads followed by the delta branches.
#[derive(Clone, Debug, PartialEq)]
pub struct LoadProfile {
    pub resolution: f64,
    pub n_wye: usize,
    pub p: Vec<Vec<f64>>,
    pub q: Vec<Vec<f64>>,
}

pub fn reactive_from_pf(p: f64, power_factor: f64) -> f64 {
    p * power_factor.acos().tan()
}

impl LoadProfile {
    pub fn n_channels(&self) -> usize {
        self.p.len()
    }

    pub fn len(&self) -> usize {
        self.p.first().map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// State vector `[pY; qY; pΔ; qΔ]` at sample `k`.
    pub fn state_at(&self, k: usize) -> DVector<f64> {
        let (ny, nd) = (self.n_wye, self.n_channels() - self.n_wye);
        let mut u = DVector::zeros(2 * (ny + nd));
        for c in 0..ny {
            u[c] = self.p[c][k];
            u[ny + c] = self.q[c][k];
        }
        for r in 0..nd {
            u[2 * ny + r] = self.p[ny + r][k];
            u[2 * ny + nd + r] = self.q[ny + r][k];
        }
        u
    }

    /// Reads active-power injections from CSV (first column time, one column
    /// per channel); reactive power follows from a constant power factor.
    pub fn from_csv<R: std::io::Read>(reader: R, resolution: f64, n_wye: usize, power_factor: f64) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(reader);
        let mut p: Vec<Vec<f64>> = Vec::new();
        for record in rdr.records() {
            let record = record?;
            let values: Vec<f64> = record
                .iter()
                .skip(1)
                .map(|f| f.trim().parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::InvalidConfig(format!("profile csv: {e}")))?;
            if p.is_empty() {
                p = vec![Vec::new(); values.len()];
            }
            if values.len() != p.len() {
                return Err(Error::InvalidConfig("profile csv: ragged rows".into()));
            }
            for (c, v) in values.into_iter().enumerate() {
                p[c].push(v);
            }
        }
        let q = p
            .iter()
            .map(|s| s.iter().map(|&x| reactive_from_pf(x, power_factor)).collect())
            .collect();
        Ok(LoadProfile {
            resolution,
            n_wye,
            p,
            q,
        })
    }
}

/// Seeded synthetic load trajectories: a per-channel base consumption
/// modulated by slow sinusoids plus exponentially correlated noise.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticProfile {
    /// Mean consumption per channel, per-unit.
    pub mean_load: f64,
    /// Relative spread of per-channel means (uniform in `1 ± spread`).
    pub spread: f64,
    /// Relative amplitude of the sinusoidal swing.
    pub amplitude: f64,
    /// Periods of the sinusoidal components, seconds.
    pub periods: Vec<f64>,
    /// Relative standard deviation of the correlated noise.
    pub noise: f64,
    /// Correlation time of the noise, seconds.
    pub noise_corr_time: f64,
    pub power_factor: f64,
}

impl Default for SyntheticProfile {
    fn default() -> Self {
        SyntheticProfile {
            mean_load: 0.03,
            spread: 0.5,
            amplitude: 0.3,
            periods: vec![14400.0, 3600.0],
            noise: 0.02,
            noise_corr_time: 60.0,
            power_factor: 0.95,
        }
    }
}

impl SyntheticProfile {
    pub fn generate(&self, n_wye: usize, n_delta: usize, resolution: f64, samples: usize, seed: u64) -> LoadProfile {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let channels = n_wye + n_delta;
        let decay = (-resolution / self.noise_corr_time.max(f64::MIN_POSITIVE)).exp();
        let innovation = (1.0 - decay * decay).sqrt();
        let mut p = Vec::with_capacity(channels);
        for _ in 0..channels {
            let base = self.mean_load * (1.0 + self.spread * (2.0 * rng.random::<f64>() - 1.0));
            let phases: Vec<f64> = self
                .periods
                .iter()
                .map(|_| std::f64::consts::TAU * rng.random::<f64>())
                .collect();
            let mut x: f64 = rng.sample(StandardNormal);
            let mut series = Vec::with_capacity(samples);
            for k in 0..samples {
                let t = k as f64 * resolution;
                let swing: f64 = self
                    .periods
                    .iter()
                    .zip(&phases)
                    .enumerate()
                    .map(|(j, (&period, &phi))| (std::f64::consts::TAU * t / period + phi).sin() / (j + 1) as f64)
                    .sum();
                // Loads consume: injections are negative.
                series.push(-base * (1.0 + self.amplitude * swing + self.noise * x));
                let e: f64 = rng.sample(StandardNormal);
                x = decay * x + innovation * e;
            }
            p.push(series);
        }
        let q = p
            .iter()
            .map(|s: &Vec<f64>| s.iter().map(|&v| reactive_from_pf(v, self.power_factor)).collect())
            .collect();
        LoadProfile {
            resolution,
            n_wye,
            p,
            q,
        }
    }
}

fn window_samples(window: f64, resolution: f64) -> Result<usize> {
    let ratio = window / resolution;
    let n = ratio.round();
    if !(n >= 1.0) || (ratio - n).abs() > 1e-9 * ratio.max(1.0) {
        return Err(Error::WindowNotMultiple { window, resolution });
    }
    Ok(n as usize)
}

/// Replaces every sample by the mean of its (aligned) averaging window.
pub fn downsample_average(profile: &LoadProfile, window: f64) -> Result<LoadProfile> {
    let n = window_samples(window, profile.resolution)?;
    let avg = |series: &Vec<f64>| -> Vec<f64> {
        let mut out = Vec::with_capacity(series.len());
        for chunk in series.chunks(n) {
            let mean = chunk.iter().sum::<f64>() / chunk.len() as f64;
            out.extend(std::iter::repeat_n(mean, chunk.len()));
        }
        out
    };
    Ok(LoadProfile {
        resolution: profile.resolution,
        n_wye: profile.n_wye,
        p: profile.p.iter().map(avg).collect(),
        q: profile.q.iter().map(avg).collect(),
    })
}

/// Size of the gap between window-averaged and instantaneous injections,
/// over every channel and sample.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WindowDeviation {
    pub rms: f64,
    /// 95th percentile of the absolute gap.
    pub p95: f64,
}

pub fn window_deviation(profile: &LoadProfile, window: f64) -> Result<WindowDeviation> {
    let avg = downsample_average(profile, window)?;
    let mut gaps: Vec<f64> = avg
        .p
        .iter()
        .chain(&avg.q)
        .zip(profile.p.iter().chain(&profile.q))
        .flat_map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y).abs()))
        .collect();
    if gaps.is_empty() {
        return Ok(WindowDeviation { rms: 0.0, p95: 0.0 });
    }
    let rms = (gaps.iter().map(|g| g * g).sum::<f64>() / gaps.len() as f64).sqrt();
    gaps.sort_by(f64::total_cmp);
    let idx = ((0.95 * gaps.len() as f64).ceil() as usize).clamp(1, gaps.len()) - 1;
    Ok(WindowDeviation { rms, p95: gaps[idx] })
}

/// One time step of observations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeasurementFrame {
    pub k: u64,
    pub t: f64,
    pub y_v: Vec<f64>,
    #[serde(rename = "y_uY")]
    pub y_uy: Vec<f64>,
    #[serde(rename = "y_uD")]
    pub y_ud: Vec<f64>,
}

/// Sporadic gross errors on the power measurements: each metered reading
/// is hit with probability `fraction` by `±magnitude`. A reading covers one
/// averaging window, so the error persists for the whole window.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OutlierSpec {
    pub fraction: f64,
    pub magnitude: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StreamConfig {
    pub sigma_v: f64,
    /// Meter noise, drawn once per averaging window.
    #[serde(default)]
    pub sigma_u: f64,
    pub window: f64,
    pub h: f64,
    pub seed: u64,
    pub steps: usize,
    #[serde(default)]
    pub outliers: Option<OutlierSpec>,
}

#[derive(Clone, Debug)]
pub struct GroundTruth {
    pub u: DVector<f64>,
    pub v: DVector<Complex64>,
    pub z: DVector<f64>,
}

#[derive(Clone, Debug)]
pub struct SimulatedStream {
    pub frames: Vec<MeasurementFrame>,
    pub truth: Vec<GroundTruth>,
}

/// Simulates ground truth by AC power flow at the true loads and derives
/// the measurement frames from it.
pub fn simulate_stream(
    net: &NetworkModel,
    profile: &LoadProfile,
    selection: &Selection,
    cfg: &StreamConfig,
) -> Result<SimulatedStream> {
    if !(cfg.h > 0.0) || (profile.resolution - cfg.h).abs() > 1e-12 * cfg.h {
        return Err(Error::InvalidConfig(format!(
            "profile resolution {} does not match sampling period {}",
            profile.resolution, cfg.h
        )));
    }
    if profile.len() < cfg.steps {
        return Err(Error::InvalidConfig(format!(
            "profile covers {} samples, {} steps requested",
            profile.len(),
            cfg.steps
        )));
    }
    if profile.n_channels() != net.n_wye() + net.n_delta() || profile.n_wye != net.n_wye() {
        return Err(Error::InvalidConfig(
            "profile channels do not match the network loads".into(),
        ));
    }
    if cfg.sigma_v < 0.0 || cfg.sigma_u < 0.0 {
        return Err(Error::InvalidConfig("noise levels must be non-negative".into()));
    }
    let averaged = downsample_average(profile, cfg.window)?;
    let (ny, nd) = (net.n_wye(), net.n_delta());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut frames = Vec::with_capacity(cfg.steps);
    let mut truth = Vec::with_capacity(cfg.steps);
    let per_window = window_samples(cfg.window, cfg.h)?;
    let mut corruption = vec![0.0; selection.j_y.len() + selection.j_delta.len()];
    let mut v = net.w().clone();
    for k in 0..cfg.steps {
        let u = profile.state_at(k);
        let inj = ComplexInjection::from_state(net, &u)?;
        v = solve_power_flow(net, &inj, &v, DEFAULT_PF_TOL, DEFAULT_PF_MAX_ITER)?.v;
        let z = NetworkModel::encode_voltage(&v);

        let mut y_v = selection.j_v.apply(&z);
        for y in y_v.iter_mut() {
            let e: f64 = rng.sample(StandardNormal);
            *y += cfg.sigma_v * e;
        }
        if k % per_window == 0 {
            for e in corruption.iter_mut() {
                *e = 0.0;
                if cfg.sigma_u > 0.0 {
                    let n: f64 = rng.sample(StandardNormal);
                    *e += cfg.sigma_u * n;
                }
                if let Some(out) = &cfg.outliers {
                    if rng.random::<f64>() < out.fraction {
                        *e += if rng.random::<bool>() {
                            out.magnitude
                        } else {
                            -out.magnitude
                        };
                    }
                }
            }
        }
        let u_avg = averaged.state_at(k);
        let mut y_uy = selection.j_y.apply(&u_avg.rows(0, 2 * ny).into_owned());
        let mut y_ud = selection.j_delta.apply(&u_avg.rows(2 * ny, 2 * nd).into_owned());
        for (y, e) in y_uy.iter_mut().chain(y_ud.iter_mut()).zip(&corruption) {
            *y += e;
        }
        frames.push(MeasurementFrame {
            k: k as u64,
            t: k as f64 * cfg.h,
            y_v: y_v.iter().copied().collect(),
            y_uy: y_uy.iter().copied().collect(),
            y_ud: y_ud.iter().copied().collect(),
        });
        truth.push(GroundTruth { u, v: v.clone(), z });
    }
    Ok(SimulatedStream { frames, truth })
}

/// Writes frames as JSON lines.
pub fn write_stream<W: Write>(frames: &[MeasurementFrame], mut out: W) -> Result<()> {
    for f in frames {
        serde_json::to_writer(&mut out, f)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// Parses a JSON-lines stream, enforcing strictly increasing `k`.
pub fn read_stream<R: BufRead>(input: R) -> Result<Vec<MeasurementFrame>> {
    let mut frames: Vec<MeasurementFrame> = Vec::new();
    for line in input.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let frame: MeasurementFrame = serde_json::from_str(&line)?;
        if let Some(prev) = frames.last() {
            if frame.k <= prev.k {
                return Err(Error::OutOfOrder {
                    prev: prev.k,
                    got: frame.k,
                });
            }
        }
        frames.push(frame);
    }
    Ok(frames)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn feeder4() -> NetworkModel {
        NetworkModel::from_json(include_str!("../feeders/feeder4.json")).unwrap()
    }

    fn config(sigma_v: f64, window: f64, steps: usize) -> StreamConfig {
        StreamConfig {
            sigma_v,
            sigma_u: 0.0,
            window,
            h: 6.0,
            seed: 11,
            steps,
            outliers: None,
        }
    }

    #[test]
    fn full_pmu_selection_is_identity() {
        let net = feeder4();
        let sets = SelectionSets::all_loads_metered(&net, net.nodes().to_vec());
        let sel = build_selection(&net, &sets).unwrap();
        assert_eq!(
            sel.j_v.to_matrix(),
            DMatrix::identity(2 * net.n_phases(), 2 * net.n_phases())
        );
    }

    #[test]
    fn empty_pmu_selection_has_no_rows() {
        let net = feeder4();
        let sel = build_selection(&net, &SelectionSets::all_loads_metered(&net, [])).unwrap();
        assert!(sel.j_v.is_empty());
        assert_eq!(sel.j_y.len(), 2 * net.n_wye());
    }

    #[test]
    fn three_phase_node_selects_six_rows() {
        let net = feeder4();
        let sel = build_selection(&net, &SelectionSets::all_loads_metered(&net, [2])).unwrap();
        assert_eq!(sel.j_v.len(), 6);
        let n = net.n_phases();
        assert_eq!(sel.j_v.rows, vec![3, 4, 5, n + 3, n + 4, n + 5]);
        let m = sel.j_v.to_matrix();
        for r in 0..m.nrows() {
            assert_eq!(m.row(r).sum(), 1.0);
        }
    }

    #[test]
    fn selection_errors() {
        let net = feeder4();
        let mut sets = SelectionSets::default();
        sets.pmu_nodes.insert(99);
        assert!(matches!(build_selection(&net, &sets), Err(Error::UnknownNode(99))));
        let mut sets = SelectionSets::default();
        sets.metered_wye.insert(3); // node 3 carries a delta load
        assert!(matches!(
            build_selection(&net, &sets),
            Err(Error::WrongConnection { node: 3, .. })
        ));
    }

    fn single_channel(values: &[f64], resolution: f64) -> LoadProfile {
        LoadProfile {
            resolution,
            n_wye: 1,
            p: vec![values.to_vec()],
            q: vec![values.to_vec()],
        }
    }

    #[test]
    fn downsampling_examples() {
        let avg = downsample_average(&single_channel(&[1.0, 2.0, 3.0], 1.0), 3.0).unwrap();
        assert_eq!(avg.p[0], vec![2.0, 2.0, 2.0]);
        let prof = single_channel(&[1.0, 5.0, -2.0, 0.5], 6.0);
        assert_eq!(downsample_average(&prof, 6.0).unwrap(), prof);
        let flat = single_channel(&[0.25; 7], 6.0);
        assert_eq!(downsample_average(&flat, 18.0).unwrap(), flat);
        assert!(matches!(
            downsample_average(&prof, 10.0),
            Err(Error::WindowNotMultiple { .. })
        ));
    }

    #[test]
    fn window_deviation_of_a_ramp() {
        // [1, 2, 3] averages to 2 everywhere: gaps −1, 0, 1 on both p and q
        let dev = window_deviation(&single_channel(&[1.0, 2.0, 3.0], 1.0), 3.0).unwrap();
        assert!((dev.rms - (2.0f64 / 3.0).sqrt()).abs() < 1e-15);
        assert_eq!(dev.p95, 1.0);
        let flat = window_deviation(&single_channel(&[0.5; 4], 1.0), 2.0).unwrap();
        assert_eq!((flat.rms, flat.p95), (0.0, 0.0));
    }

    #[test]
    fn constant_power_factor() {
        let net = feeder4();
        let prof = SyntheticProfile::default().generate(net.n_wye(), net.n_delta(), 6.0, 50, 3);
        for (ps, qs) in prof.p.iter().zip(&prof.q) {
            for (&p, &q) in ps.iter().zip(qs) {
                assert!((q - p * 0.95f64.acos().tan()).abs() < 1e-15);
                assert!(p < 0.0);
            }
        }
    }

    #[test]
    fn noiseless_stream_equals_truth() {
        let net = feeder4();
        let sel = build_selection(&net, &SelectionSets::all_loads_metered(&net, [1, 4])).unwrap();
        let prof = SyntheticProfile::default().generate(net.n_wye(), net.n_delta(), 6.0, 20, 5);
        let s = simulate_stream(&net, &prof, &sel, &config(0.0, 6.0, 20)).unwrap();
        let ny = net.n_wye();
        for (f, t) in s.frames.iter().zip(&s.truth) {
            assert_eq!(f.y_v, sel.j_v.apply(&t.z).iter().copied().collect::<Vec<_>>());
            let uy = t.u.rows(0, 2 * ny).into_owned();
            assert_eq!(f.y_uy, sel.j_y.apply(&uy).iter().copied().collect::<Vec<_>>());
        }
    }

    #[test]
    fn ten_minute_window_holds_power_for_100_frames() {
        let net = feeder4();
        let sel = build_selection(&net, &SelectionSets::all_loads_metered(&net, [2])).unwrap();
        let prof = SyntheticProfile::default().generate(net.n_wye(), net.n_delta(), 6.0, 200, 5);
        let s = simulate_stream(&net, &prof, &sel, &config(1e-5, 600.0, 200)).unwrap();
        for block in s.frames.chunks(100) {
            assert!(block.iter().all(|f| f.y_uy == block[0].y_uy && f.y_ud == block[0].y_ud));
        }
        assert_ne!(s.frames[0].y_uy, s.frames[100].y_uy);
        // window mean of the truth
        let mean0: f64 = s.truth[..100].iter().map(|t| t.u[0]).sum::<f64>() / 100.0;
        assert!((s.frames[0].y_uy[0] - mean0).abs() < 1e-12);
    }

    #[test]
    fn stream_is_deterministic_and_round_trips() {
        let net = feeder4();
        let sel = build_selection(&net, &SelectionSets::all_loads_metered(&net, [2, 4])).unwrap();
        let prof = SyntheticProfile::default().generate(net.n_wye(), net.n_delta(), 6.0, 30, 5);
        let cfg = config(1e-5, 60.0, 30);
        let mut a = Vec::new();
        let mut b = Vec::new();
        write_stream(&simulate_stream(&net, &prof, &sel, &cfg).unwrap().frames, &mut a).unwrap();
        write_stream(&simulate_stream(&net, &prof, &sel, &cfg).unwrap().frames, &mut b).unwrap();
        assert_eq!(a, b);
        let parsed = read_stream(a.as_slice()).unwrap();
        let mut again = Vec::new();
        write_stream(&parsed, &mut again).unwrap();
        assert_eq!(a, again);
    }

    #[test]
    fn out_of_order_stream_rejected() {
        let text = "{\"k\":1,\"t\":6.0,\"y_v\":[],\"y_uY\":[],\"y_uD\":[]}\n{\"k\":1,\"t\":6.0,\"y_v\":[],\"y_uY\":[],\"y_uD\":[]}\n";
        assert!(matches!(
            read_stream(text.as_bytes()),
            Err(Error::OutOfOrder { prev: 1, got: 1 })
        ));
    }

    #[test]
    fn csv_profile() {
        let text = "t,l1,l2\n0,-0.1,-0.2\n6,-0.3,-0.4\n";
        let prof = LoadProfile::from_csv(text.as_bytes(), 6.0, 1, 0.95).unwrap();
        assert_eq!(prof.p, vec![vec![-0.1, -0.3], vec![-0.2, -0.4]]);
        assert_eq!(prof.state_at(1).len(), 4);
    }
}
