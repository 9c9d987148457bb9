//! First-order prediction-correction tracking of the time-varying
//! estimation problem, its convergence certificate, and a batch solver for
//! the instantaneous optimum.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::cost::{voltage_operator, ConvexityBounds, CostSnapshot, CostWeights};
use crate::linmodel::{linearize, LinearPowerFlowModel};
use crate::netmodel::{check_dim, NetworkModel};
use crate::sensing::{MeasurementFrame, Selection};
use crate::{Error, Result};

/// Loaded-phase magnitude below which a predicted voltage is degenerate.
pub const DEGENERATE_VOLTAGE: f64 = 1e-6;
pub const BATCH_TOL: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FopcConfig {
    #[serde(rename = "P")]
    pub p: usize,
    #[serde(rename = "C")]
    pub c: usize,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    /// Sampling period in seconds.
    pub h: f64,
}

impl Default for FopcConfig {
    fn default() -> Self {
        FopcConfig {
            p: 5,
            c: 5,
            alpha: 1e-4,
            beta: 1e-4,
            gamma: 0.9,
            h: 6.0,
        }
    }
}

impl FopcConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.c < 1 {
            return bad("C must be at least 1");
        }
        if !(self.alpha > 0.0) || !(self.beta > 0.0) {
            return bad("stepsizes must be positive");
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return bad("gamma must lie in [0, 1]");
        }
        if !(self.h > 0.0) {
            return bad("h must be positive");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceCertificate {
    pub rho_p: f64,
    pub rho_c: f64,
    pub tau0: f64,
    pub valid: bool,
    /// Smallest C giving `τ0 < 1` at `γ = 0`; absent when `ρ_C ≥ 1`.
    pub min_c: Option<u64>,
    pub nu: f64,
    pub l: f64,
    /// `τ0` recomputed with the measured strong-convexity constant.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tau0_measured: Option<f64>,
}

pub fn contraction(step: f64, nu: f64, l: f64) -> f64 {
    (1.0 - step * nu).abs().max((1.0 - step * l).abs())
}

pub fn tau0(rho_p: f64, rho_c: f64, p: usize, c: usize, gamma: f64, l_over_nu: f64) -> f64 {
    let rp = rho_p.powi(p as i32);
    rho_c.powi(c as i32) * (rp + (rp + 1.0) * (1.0 - gamma + gamma * 2.0 * l_over_nu))
}

pub fn min_correction_steps(rho_p: f64, rho_c: f64, p: usize) -> Option<u64> {
    if !(rho_c < 1.0) {
        return None;
    }
    let c = (-(2.0 * rho_p.powi(p as i32) + 1.0).ln() / rho_c.ln()).ceil();
    Some((c.max(1.0)) as u64)
}

pub fn certify(cfg: &FopcConfig, b: &ConvexityBounds) -> ConvergenceCertificate {
    let rho_p = contraction(cfg.alpha, b.nu, b.l);
    let rho_c = contraction(cfg.beta, b.nu, b.l);
    let t = tau0(rho_p, rho_c, cfg.p, cfg.c, cfg.gamma, b.l / b.nu);
    let tau0_measured = b.nu_measured.map(|nu| {
        let (rp, rc) = (contraction(cfg.alpha, nu, b.l), contraction(cfg.beta, nu, b.l));
        tau0(rp, rc, cfg.p, cfg.c, cfg.gamma, b.l / nu)
    });
    ConvergenceCertificate {
        rho_p,
        rho_c,
        tau0: t,
        valid: cfg.alpha < 2.0 / b.l && cfg.beta < 2.0 / b.l && t < 1.0,
        min_c: min_correction_steps(rho_p, rho_c, cfg.p),
        nu: b.nu,
        l: b.l,
        tau0_measured,
    }
}

/// P frozen-Hessian steps from `u_hat` on the model of `snap_prev`, drifted
/// by the change from `snap_prev2`.
pub fn predict(
    u_hat: &DVector<f64>,
    snap_prev: &CostSnapshot,
    snap_prev2: Option<&CostSnapshot>,
    cfg: &FopcConfig,
) -> Result<DVector<f64>> {
    if cfg.p == 0 {
        check_dim(snap_prev.dim(), u_hat.len())?;
        return Ok(u_hat.clone());
    }
    let hess = snap_prev.frozen_hessian(u_hat)?;
    let grad = snap_prev.gradient(u_hat)?;
    // γ∇f + time_grad, sharing the gradient of the newer snapshot
    let mut lin = &grad * cfg.gamma;
    if let Some(older) = snap_prev2 {
        check_dim(snap_prev.dim(), older.dim())?;
        let mut g2 = DVector::zeros(grad.len());
        older.gradient_into(u_hat, &mut g2);
        lin += grad;
        lin -= g2;
    }

    let mut u = u_hat.clone();
    let mut d = DVector::zeros(u.len());
    let mut hd = DVector::zeros(u.len());
    for _ in 0..cfg.p {
        d.copy_from(&u);
        d -= u_hat;
        hess.apply_into(&d, &mut hd);
        hd += &lin;
        u.axpy(-cfg.alpha, &hd, 1.0);
    }
    Ok(u)
}

/// C gradient steps on the current snapshot.
pub fn correct(u_pred: &DVector<f64>, snap: &CostSnapshot, cfg: &FopcConfig) -> Result<DVector<f64>> {
    check_dim(snap.dim(), u_pred.len())?;
    let mut u = u_pred.clone();
    let mut g = DVector::zeros(u.len());
    for _ in 0..cfg.c {
        snap.gradient_into(&u, &mut g);
        u.axpy(-cfg.beta, &g, 1.0);
    }
    Ok(u)
}

#[derive(Clone, Debug)]
pub struct RefreshedModel {
    pub model: LinearPowerFlowModel,
    pub g_v: DMatrix<f64>,
    pub m_v: DVector<f64>,
    /// True when the predicted voltage was degenerate and the previous
    /// anchor was kept.
    pub fallback: bool,
}

/// Relinearizes at the predicted voltage.
pub fn refresh_model(
    net: &NetworkModel,
    selection: &Selection,
    z_pred: &DVector<f64>,
    prev: Option<&LinearPowerFlowModel>,
) -> Result<RefreshedModel> {
    let v = net.decode_voltage(z_pred)?;
    let (model, fallback) = match net.check_loaded_voltages(&v, DEGENERATE_VOLTAGE) {
        Ok(()) => (linearize(net, &v)?, false),
        Err(Error::ZeroVoltage { index }) => {
            log::warn!("degenerate predicted voltage at loaded index {index}, keeping previous anchor");
            match prev {
                Some(m) => (m.clone(), true),
                None => (linearize(net, net.w())?, true),
            }
        }
        Err(e) => return Err(e),
    };
    let (g_v, m_v) = voltage_operator(&model, &selection.j_v);
    Ok(RefreshedModel {
        model,
        g_v,
        m_v,
        fallback,
    })
}

#[derive(Clone, Debug)]
pub struct FopcState {
    /// Index of the last processed frame.
    pub k: Option<u64>,
    pub u_hat: DVector<f64>,
    pub z_hat: DVector<f64>,
    pub u_pred: DVector<f64>,
    pub z_pred: DVector<f64>,
    pub snap_prev: Option<CostSnapshot>,
    pub snap_prev2: Option<CostSnapshot>,
    pub model: Option<LinearPowerFlowModel>,
}

impl FopcState {
    pub fn initial(net: &NetworkModel) -> Self {
        let n = net.state_dim();
        let m = NetworkModel::encode_voltage(net.w());
        FopcState {
            k: None,
            u_hat: DVector::zeros(n),
            z_hat: m.clone(),
            u_pred: DVector::zeros(n),
            z_pred: m,
            snap_prev: None,
            snap_prev2: None,
            model: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StepReport {
    pub k: u64,
    pub fallback: bool,
    pub pred_ms: f64,
    pub corr_ms: f64,
    pub cert: ConvergenceCertificate,
}

/// Streaming estimator running one prediction-correction cycle per frame.
#[derive(Clone, Debug)]
pub struct FopcEstimator {
    net: NetworkModel,
    selection: Selection,
    cfg: FopcConfig,
    weights: CostWeights,
    state: FopcState,
}

impl FopcEstimator {
    pub fn new(net: NetworkModel, selection: Selection, cfg: FopcConfig, weights: CostWeights) -> Result<Self> {
        cfg.validate()?;
        weights.validate()?;
        check_dim(net.state_dim(), selection.j_y.ncols + selection.j_delta.ncols)?;
        check_dim(2 * net.n_phases(), selection.j_v.ncols)?;
        let state = FopcState::initial(&net);
        Ok(FopcEstimator {
            net,
            selection,
            cfg,
            weights,
            state,
        })
    }

    pub fn state(&self) -> &FopcState {
        &self.state
    }

    pub fn config(&self) -> &FopcConfig {
        &self.cfg
    }

    pub fn network(&self) -> &NetworkModel {
        &self.net
    }

    pub fn selection(&self) -> &Selection {
        &self.selection
    }

    pub fn weights(&self) -> &CostWeights {
        &self.weights
    }

    /// Snapshot of the most recent frame.
    pub fn snapshot(&self) -> Option<&CostSnapshot> {
        self.state.snap_prev.as_ref()
    }

    /// Replaces the estimate (and its voltage readout) after a step.
    pub fn override_estimate(&mut self, u: DVector<f64>) -> Result<()> {
        check_dim(self.net.state_dim(), u.len())?;
        if let Some(model) = &self.state.model {
            self.state.z_hat = model.evaluate(&u)?;
        }
        self.state.u_hat = u;
        Ok(())
    }

    /// Wall time of one predict/correct cycle replayed on the current state,
    /// in milliseconds: the fastest of `batches` means over `reps` cycles.
    /// `None` before two frames have been processed.
    pub fn cycle_cost_ms(&self, reps: usize, batches: usize) -> Result<Option<f64>> {
        let st = &self.state;
        let (Some(snap), Some(model)) = (&st.snap_prev, &st.model) else {
            return Ok(None);
        };
        let mut best = f64::INFINITY;
        for _ in 0..batches.max(1) {
            let t = Instant::now();
            for _ in 0..reps.max(1) {
                let u = predict(&st.u_hat, snap, st.snap_prev2.as_ref(), &self.cfg)?;
                let z = model.evaluate(&u)?;
                let u = correct(&u, snap, &self.cfg)?;
                let zh = model.evaluate(&u)?;
                std::hint::black_box((z, zh));
            }
            best = best.min(t.elapsed().as_secs_f64() * 1e3 / reps.max(1) as f64);
        }
        Ok(Some(best))
    }

    pub fn step(&mut self, frame: &MeasurementFrame) -> Result<StepReport> {
        if let Some(prev) = self.state.k {
            if frame.k != prev + 1 {
                return Err(Error::OutOfOrder { prev, got: frame.k });
            }
        }
        let st = &mut self.state;

        let t0 = Instant::now();
        let (u_pred, z_pred) = match (&st.snap_prev, &st.model) {
            (Some(snap), Some(model)) => {
                let u = predict(&st.u_hat, snap, st.snap_prev2.as_ref(), &self.cfg)?;
                let z = model.evaluate(&u)?;
                (u, z)
            }
            _ => (
                DVector::zeros(self.net.state_dim()),
                NetworkModel::encode_voltage(self.net.w()),
            ),
        };
        let pred_ms = t0.elapsed().as_secs_f64() * 1e3;

        let refreshed = refresh_model(&self.net, &self.selection, &z_pred, st.model.as_ref())?;
        let snap = CostSnapshot::with_operator(
            refreshed.g_v,
            refreshed.m_v,
            &self.selection,
            frame,
            &self.weights,
            None,
        )?;

        let t1 = Instant::now();
        let u_hat = correct(&u_pred, &snap, &self.cfg)?;
        let z_hat = refreshed.model.evaluate(&u_hat)?;
        let corr_ms = t1.elapsed().as_secs_f64() * 1e3;

        let cert = certify(&self.cfg, &snap.bounds());
        if !cert.valid {
            log::debug!("k={}: convergence certificate invalid (tau0={:.4})", frame.k, cert.tau0);
        }

        st.k = Some(frame.k);
        st.u_pred = u_pred;
        st.z_pred = z_pred;
        st.u_hat = u_hat;
        st.z_hat = z_hat;
        st.snap_prev2 = st.snap_prev.take();
        st.snap_prev = Some(snap);
        st.model = Some(refreshed.model);
        Ok(StepReport {
            k: frame.k,
            fallback: refreshed.fallback,
            pred_ms,
            corr_ms,
            cert,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchSolution {
    pub u: DVector<f64>,
    pub iterations: usize,
    pub grad_norm: f64,
}

fn converged(g: &DVector<f64>, u: &DVector<f64>, tol: f64) -> bool {
    g.norm() <= tol * (1.0 + u.norm())
}

fn check_tol(tol: f64) -> Result<()> {
    if tol > 0.0 {
        Ok(())
    } else {
        Err(Error::InvalidConfig(format!(
            "batch tolerance must be positive, got {tol}"
        )))
    }
}

/// Gradient descent with stepsize `1/L` to `‖∇f‖ ≤ tol (1 + ‖u‖)`.
pub fn batch_solve(snap: &CostSnapshot, u_init: &DVector<f64>, tol: f64, max_iter: usize) -> Result<BatchSolution> {
    check_tol(tol)?;
    let step = 1.0 / snap.bounds().l;
    let mut u = u_init.clone();
    let mut g = snap.gradient(&u)?;
    for it in 0..=max_iter {
        if converged(&g, &u, tol) {
            return Ok(BatchSolution {
                grad_norm: g.norm(),
                u,
                iterations: it,
            });
        }
        if it == max_iter {
            break;
        }
        u.axpy(-step, &g, 1.0);
        snap.gradient_into(&u, &mut g);
    }
    Err(Error::BatchNonConvergence {
        iterations: max_iter,
        grad_norm: g.norm(),
    })
}

/// Newton's method on the piecewise-quadratic cost with Armijo
/// backtracking; same stopping rule as [`batch_solve`].
pub fn batch_solve_newton(
    snap: &CostSnapshot,
    u_init: &DVector<f64>,
    tol: f64,
    max_iter: usize,
) -> Result<BatchSolution> {
    check_tol(tol)?;
    let mut u = u_init.clone();
    let mut f = snap.value(&u)?;
    for it in 0..=max_iter {
        let g = snap.gradient(&u)?;
        if converged(&g, &u, tol) {
            return Ok(BatchSolution {
                grad_norm: g.norm(),
                u,
                iterations: it,
            });
        }
        if it == max_iter {
            return Err(Error::BatchNonConvergence {
                iterations: max_iter,
                grad_norm: g.norm(),
            });
        }
        let chol = snap
            .hessian(&u)?
            .cholesky()
            .ok_or_else(|| Error::InvalidConfig("Hessian is not positive definite".into()))?;
        let dir = -chol.solve(&g);
        let slope = g.dot(&dir);
        let mut t = 1.0;
        loop {
            let cand = &u + &dir * t;
            let fc = snap.value(&cand)?;
            if fc <= f + 1e-4 * t * slope || t < 1e-12 {
                u = cand;
                f = fc;
                break;
            }
            t *= 0.5;
        }
    }
    unreachable!()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cost::tests::random_snapshot;
    use crate::sensing::RowSelection;

    fn scalar_snapshot(c: f64, a: f64) -> CostSnapshot {
        // f(u) = ½(u − c)² through the ridge term alone
        let j = RowSelection { rows: vec![], ncols: 1 };
        let j0 = RowSelection { rows: vec![], ncols: 0 };
        CostSnapshot::new(
            DMatrix::zeros(0, 1),
            DVector::zeros(0),
            DVector::zeros(0),
            &j,
            DVector::zeros(0),
            &j0,
            DVector::zeros(0),
            &CostWeights {
                w_v: 1.0,
                delta: 1.0,
                reg_a: a,
            },
            Some(DVector::from_element(1, c)),
        )
        .unwrap()
    }

    fn cfg(p: usize, c: usize, alpha: f64, beta: f64, gamma: f64) -> FopcConfig {
        FopcConfig {
            p,
            c,
            alpha,
            beta,
            gamma,
            h: 1.0,
        }
    }

    #[test]
    fn certificate_arithmetic() {
        assert_eq!(min_correction_steps(0.8, 0.8, 4), Some(3));
        let t3 = tau0(0.8, 0.8, 4, 3, 0.0, 10.0);
        assert!((t3 - 0.512 * (2.0 * 0.4096 + 1.0)).abs() < 1e-12);
        assert!((t3 - 0.9314).abs() < 1e-4);
        assert!(tau0(0.8, 0.8, 4, 2, 0.0, 10.0) > 1.0);
        for gamma in [0.0, 0.5, 1.0] {
            assert!(tau0(0.8, 0.3, 2, 0, gamma, 1.0) >= 1.0);
        }
        assert_eq!(min_correction_steps(0.5, 1.0, 1), None);
    }

    #[test]
    fn certify_flags_large_steps() {
        let b = ConvexityBounds {
            nu: 1.0,
            l: 10.0,
            nu_measured: Some(2.0),
            converged: true,
        };
        let ok = certify(&cfg(0, 40, 0.1, 0.1, 0.0), &b);
        assert!((ok.rho_c - 0.9).abs() < 1e-15 && ok.valid);
        assert!(ok.tau0_measured.unwrap() < ok.tau0);
        let bad = certify(&cfg(0, 40, 0.25, 0.1, 0.0), &b);
        assert!(!bad.valid);
    }

    #[test]
    fn config_invariants() {
        assert!(cfg(0, 0, 0.1, 0.1, 0.5).validate().is_err());
        assert!(cfg(0, 1, 0.1, 0.1, 1.5).validate().is_err());
        assert!(cfg(0, 1, 0.0, 0.1, 0.5).validate().is_err());
        assert!(FopcConfig::default().validate().is_ok());
    }

    #[test]
    fn scalar_newton_prediction_and_exact_correction() {
        let snap = scalar_snapshot(3.0, 1.0);
        let u0 = DVector::zeros(1);
        let up = predict(&u0, &snap, Some(&snap), &cfg(1, 1, 1.0, 1.0, 1.0)).unwrap();
        assert!((up[0] - 3.0).abs() < 1e-15);
        let uc = correct(&u0, &snap, &cfg(0, 1, 1.0, 1.0, 1.0)).unwrap();
        assert!((uc[0] - 3.0).abs() < 1e-15);
    }

    #[test]
    fn prediction_identities() {
        let snap = random_snapshot(
            7,
            5,
            2,
            3,
            &CostWeights {
                w_v: 2.0,
                delta: 0.3,
                reg_a: 1.0,
            },
        );
        let u = DVector::from_fn(snap.dim(), |i, _| 0.05 * i as f64);
        assert_eq!(predict(&u, &snap, None, &cfg(0, 1, 0.01, 0.01, 0.9)).unwrap(), u);
        let rigid = predict(&u, &snap, Some(&snap), &cfg(7, 1, 0.01, 0.01, 0.0)).unwrap();
        assert!((rigid - &u).amax() == 0.0);
    }

    #[test]
    fn prediction_matches_explicit_recursion() {
        let w = CostWeights {
            w_v: 3.0,
            delta: 0.2,
            reg_a: 0.7,
        };
        let older = random_snapshot(21, 5, 2, 3, &w);
        let newer = random_snapshot(22, 5, 2, 3, &w);
        let u_hat = DVector::from_fn(newer.dim(), |i, _| 0.1 * (i as f64).sin());
        let c = cfg(4, 1, 0.05, 0.05, 0.6);
        let h = newer.hessian(&u_hat).unwrap();
        let lin =
            newer.gradient(&u_hat).unwrap() * c.gamma + crate::cost::time_grad(&newer, Some(&older), &u_hat).unwrap();
        let mut u = u_hat.clone();
        for _ in 0..c.p {
            u = &u - (&h * (&u - &u_hat) + &lin) * c.alpha;
        }
        let got = predict(&u_hat, &newer, Some(&older), &c).unwrap();
        assert!((got - u).amax() < 1e-13);
    }

    #[test]
    fn correction_descends() {
        let snap = random_snapshot(
            11,
            6,
            3,
            3,
            &CostWeights {
                w_v: 5.0,
                delta: 0.2,
                reg_a: 0.3,
            },
        );
        let beta = 1.0 / snap.bounds().l;
        let mut u = DVector::from_element(snap.dim(), 1.0);
        let mut f = snap.value(&u).unwrap();
        for _ in 0..50 {
            u = correct(&u, &snap, &cfg(0, 1, beta, beta, 0.0)).unwrap();
            let next = snap.value(&u).unwrap();
            assert!(next <= f + 1e-15);
            f = next;
        }
    }

    #[test]
    fn batch_quadratic_matches_normal_equations() {
        let w = CostWeights {
            w_v: 2.0,
            delta: f64::INFINITY,
            reg_a: 0.5,
        };
        let snap = random_snapshot(3, 6, 2, 2, &w);
        // with δ = ∞ the Hessian is constant and the optimum solves H u = −∇f(0) + H·0
        let h = snap.hessian(&DVector::zeros(snap.dim())).unwrap();
        let g0 = snap.gradient(&DVector::zeros(snap.dim())).unwrap();
        let exact = h.lu().solve(&(-g0)).unwrap();
        let gd = batch_solve(&snap, &DVector::zeros(snap.dim()), 1e-12, 1_000_000).unwrap();
        assert!((&gd.u - &exact).amax() < 1e-8);
        let nt = batch_solve_newton(&snap, &DVector::zeros(snap.dim()), 1e-12, 50).unwrap();
        assert!((&nt.u - &exact).amax() < 1e-10);
        let again = batch_solve(&snap, &gd.u, 1e-9, 10).unwrap();
        assert_eq!(again.iterations, 0);
        assert!(batch_solve(&snap, &DVector::zeros(snap.dim()), 0.0, 10).is_err());
        assert!(matches!(
            batch_solve(&snap, &DVector::zeros(snap.dim()), 1e-12, 2),
            Err(Error::BatchNonConvergence { .. })
        ));
    }

    #[test]
    fn newton_and_gradient_descent_agree_with_active_huber() {
        let snap = random_snapshot(
            5,
            4,
            2,
            3,
            &CostWeights {
                w_v: 1.0,
                delta: 0.05,
                reg_a: 0.4,
            },
        );
        let z = DVector::zeros(snap.dim());
        let gd = batch_solve(&snap, &z, 1e-10, 1_000_000).unwrap();
        let nt = batch_solve_newton(&snap, &z, 1e-10, 100).unwrap();
        assert!((gd.u - nt.u).amax() < 1e-8);
    }
}
