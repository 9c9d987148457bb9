//! The per-step estimation objective
//!
//! ```text
//! f(u) = (w_v/2)‖y_v − G_v u − m_v‖² + Σ H_δ(y_uY − J^Y u^Y) + Σ H_δ(y_uΔ − J^Δ u^Δ)
//!        + (a/2)‖u − u_prior‖²
//! ```
//!
//! with exact value/gradient/Hessian oracles and the curvature bounds
//! `(ν, L)` that drive stepsize selection.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::linmodel::LinearPowerFlowModel;
use crate::netmodel::check_dim;
use crate::sensing::{MeasurementFrame, RowSelection, Selection};
use crate::{Error, Result};

pub const POWER_ITER_TOL: f64 = 1e-6;
pub const POWER_ITER_MAX: usize = 1000;

/// Huber loss: quadratic on `[−δ, δ]`, linear outside.
pub fn huber(eps: f64, delta: f64) -> f64 {
    if eps < -delta {
        -delta * eps - delta * delta / 2.0
    } else if eps > delta {
        delta * eps - delta * delta / 2.0
    } else {
        eps * eps / 2.0
    }
}

pub fn huber_grad(eps: f64, delta: f64) -> f64 {
    if eps < -delta {
        -delta
    } else if eps > delta {
        delta
    } else {
        eps
    }
}

/// Second derivative; taken as 1 on the boundary `|ε| = δ`.
pub fn huber_curv(eps: f64, delta: f64) -> f64 {
    if eps.abs() <= delta {
        1.0
    } else {
        0.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostWeights {
    /// Weight of the PMU voltage term.
    pub w_v: f64,
    /// Huber threshold on power residuals, per-unit.
    pub delta: f64,
    /// Ridge weight of the regularizer.
    pub reg_a: f64,
}

impl Default for CostWeights {
    fn default() -> Self {
        CostWeights {
            w_v: 1e3,
            delta: 8e-4,
            reg_a: 1.0,
        }
    }
}

impl CostWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.w_v > 0.0) || !(self.delta > 0.0) || !(self.reg_a > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "cost weights must be positive (w_v={}, delta={}, reg_a={})",
                self.w_v, self.delta, self.reg_a
            )));
        }
        Ok(())
    }
}

/// `J_v [M_Y, M_Δ]` and `J_v m`.
pub fn voltage_operator(model: &LinearPowerFlowModel, j_v: &RowSelection) -> (DMatrix<f64>, DVector<f64>) {
    let ny = model.m_y.ncols();
    let nd = model.m_delta.ncols();
    let mut g = DMatrix::zeros(j_v.len(), ny + nd);
    for (i, &r) in j_v.rows.iter().enumerate() {
        for c in 0..ny {
            g[(i, c)] = model.m_y[(r, c)];
        }
        for c in 0..nd {
            g[(i, ny + c)] = model.m_delta[(r, c)];
        }
    }
    (g, j_v.apply(&model.m))
}

/// Frozen time-`k` objective.
#[derive(Clone, Debug)]
pub struct CostSnapshot {
    g_v: DMatrix<f64>,
    // w_v G_vᵀ G_v, formed once per snapshot.
    gram: DMatrix<f64>,
    y_v: DVector<f64>,
    m_v: DVector<f64>,
    rows_y: Vec<usize>,
    y_uy: DVector<f64>,
    rows_d: Vec<usize>,
    y_ud: DVector<f64>,
    w_v: f64,
    delta: f64,
    a: f64,
    u_prior: DVector<f64>,
}

/// Strong-convexity and smoothness constants.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvexityBounds {
    pub nu: f64,
    pub l: f64,
    /// `a + w_v λ_min(G_vᵀ G_v)` from a dense eigensolve, when requested.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nu_measured: Option<f64>,
    /// False when power iteration hit its cap; `l` then uses a norm bound.
    pub converged: bool,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PowerIteration {
    pub value: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Largest eigenvalue of a symmetric positive semidefinite matrix, as the
/// converged Rayleigh quotient plus its residual norm. Without convergence
/// the infinity norm (an upper bound) is returned.
pub fn power_iteration(a: &DMatrix<f64>, tol: f64, max_iter: usize) -> PowerIteration {
    let n = a.nrows();
    if n == 0 {
        return PowerIteration {
            value: 0.0,
            iterations: 0,
            converged: true,
        };
    }
    let mut x = DVector::from_fn(n, |i, _| 1.0 + 0.1 * ((i + 1) as f64).sin());
    x /= x.norm();
    let mut y = DVector::zeros(n);
    let mut lambda = 0.0;
    for it in 1..=max_iter {
        y.gemv(1.0, a, &x, 0.0);
        let next = x.dot(&y);
        let norm = y.norm();
        if norm == 0.0 {
            return PowerIteration {
                value: 0.0,
                iterations: it,
                converged: true,
            };
        }
        if (next - lambda).abs() <= tol * next.abs() {
            // some eigenvalue lies within ‖Ax − ρx‖ of the Rayleigh quotient ρ
            let residual = (&y - &x * next).norm();
            return PowerIteration {
                value: next + residual,
                iterations: it,
                converged: true,
            };
        }
        x.copy_from(&y);
        x /= norm;
        lambda = next;
    }
    let inf_norm = (0..n)
        .map(|r| a.row(r).iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max);
    PowerIteration {
        value: inf_norm,
        iterations: max_iter,
        converged: false,
    }
}

impl CostSnapshot {
    /// Builds a snapshot from explicit operators. `j_y` and `j_delta`
    /// select from the wye and delta blocks of `u` respectively.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        g_v: DMatrix<f64>,
        y_v: DVector<f64>,
        m_v: DVector<f64>,
        j_y: &RowSelection,
        y_uy: DVector<f64>,
        j_delta: &RowSelection,
        y_ud: DVector<f64>,
        weights: &CostWeights,
        u_prior: Option<DVector<f64>>,
    ) -> Result<Self> {
        weights.validate()?;
        let n = g_v.ncols();
        check_dim(n, j_y.ncols + j_delta.ncols)?;
        check_dim(g_v.nrows(), y_v.len())?;
        check_dim(g_v.nrows(), m_v.len())?;
        check_dim(j_y.len(), y_uy.len())?;
        check_dim(j_delta.len(), y_ud.len())?;
        let u_prior = match u_prior {
            Some(p) => {
                check_dim(n, p.len())?;
                p
            }
            None => DVector::zeros(n),
        };
        let gram = g_v.tr_mul(&g_v) * weights.w_v;
        Ok(CostSnapshot {
            g_v,
            gram,
            y_v,
            m_v,
            rows_y: j_y.rows.clone(),
            y_uy,
            rows_d: j_delta.rows.iter().map(|&r| r + j_y.ncols).collect(),
            y_ud,
            w_v: weights.w_v,
            delta: weights.delta,
            a: weights.reg_a,
            u_prior,
        })
    }

    /// Snapshot for one measurement frame under a given linear model.
    pub fn from_frame(
        model: &LinearPowerFlowModel,
        selection: &Selection,
        frame: &MeasurementFrame,
        weights: &CostWeights,
        u_prior: Option<DVector<f64>>,
    ) -> Result<Self> {
        let (g_v, m_v) = voltage_operator(model, &selection.j_v);
        Self::with_operator(g_v, m_v, selection, frame, weights, u_prior)
    }

    pub fn with_operator(
        g_v: DMatrix<f64>,
        m_v: DVector<f64>,
        selection: &Selection,
        frame: &MeasurementFrame,
        weights: &CostWeights,
        u_prior: Option<DVector<f64>>,
    ) -> Result<Self> {
        Self::new(
            g_v,
            DVector::from_column_slice(&frame.y_v),
            m_v,
            &selection.j_y,
            DVector::from_column_slice(&frame.y_uy),
            &selection.j_delta,
            DVector::from_column_slice(&frame.y_ud),
            weights,
            u_prior,
        )
    }

    pub fn dim(&self) -> usize {
        self.g_v.ncols()
    }

    pub fn g_v(&self) -> &DMatrix<f64> {
        &self.g_v
    }

    pub fn y_v(&self) -> &DVector<f64> {
        &self.y_v
    }

    pub fn w_v(&self) -> f64 {
        self.w_v
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    pub fn reg_a(&self) -> f64 {
        self.a
    }

    pub fn m_v(&self) -> &DVector<f64> {
        &self.m_v
    }

    pub fn u_prior(&self) -> &DVector<f64> {
        &self.u_prior
    }

    /// Metered `(u-index, measurement)` pairs, wye first.
    pub fn metered(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.rows_y
            .iter()
            .copied()
            .zip(self.y_uy.iter().copied())
            .chain(self.rows_d.iter().copied().zip(self.y_ud.iter().copied()))
    }

    fn check(&self, u: &DVector<f64>) -> Result<()> {
        check_dim(self.dim(), u.len())
    }

    fn voltage_residual(&self, u: &DVector<f64>) -> DVector<f64> {
        let mut r = &self.y_v - &self.m_v;
        r.gemv(-1.0, &self.g_v, u, 1.0);
        r
    }

    pub fn value(&self, u: &DVector<f64>) -> Result<f64> {
        self.check(u)?;
        let rv = self.voltage_residual(u);
        let huber_sum: f64 = self.metered().map(|(i, y)| huber(y - u[i], self.delta)).sum();
        let reg = (u - &self.u_prior).norm_squared();
        Ok(0.5 * self.w_v * rv.norm_squared() + huber_sum + 0.5 * self.a * reg)
    }

    pub fn gradient(&self, u: &DVector<f64>) -> Result<DVector<f64>> {
        self.check(u)?;
        let mut g = DVector::zeros(self.dim());
        self.gradient_into(u, &mut g);
        Ok(g)
    }

    /// Gradient into a preallocated buffer; `u` must have the right length.
    pub(crate) fn gradient_into(&self, u: &DVector<f64>, out: &mut DVector<f64>) {
        let rv = self.voltage_residual(u);
        out.copy_from(u);
        *out -= &self.u_prior;
        *out *= self.a;
        out.gemv_tr(-self.w_v, &self.g_v, &rv, 1.0);
        for (i, y) in self.metered() {
            out[i] -= huber_grad(y - u[i], self.delta);
        }
    }

    /// Diagonal Huber curvature plus the ridge weight, at `u`.
    pub(crate) fn diagonal_curvature(&self, u: &DVector<f64>) -> DVector<f64> {
        let mut d = DVector::from_element(self.dim(), self.a);
        for (i, y) in self.metered() {
            d[i] += huber_curv(y - u[i], self.delta);
        }
        d
    }

    pub fn hessian(&self, u: &DVector<f64>) -> Result<DMatrix<f64>> {
        self.check(u)?;
        let mut h = self.gram.clone();
        for (i, d) in self.diagonal_curvature(u).iter().enumerate() {
            h[(i, i)] += d;
        }
        Ok(h)
    }

    /// The Hessian at `u`, frozen for repeated products.
    pub fn frozen_hessian(&self, u: &DVector<f64>) -> Result<FrozenHessian<'_>> {
        self.check(u)?;
        Ok(FrozenHessian {
            gram: &self.gram,
            diag: self.diagonal_curvature(u),
        })
    }

    /// Conservative bounds: `ν = a`, `L = a + w_v λ_max(G_vᵀG_v) + 1`.
    pub fn bounds(&self) -> ConvexityBounds {
        let pi = power_iteration(&self.gram, POWER_ITER_TOL, POWER_ITER_MAX);
        ConvexityBounds {
            nu: self.a,
            l: self.a + pi.value + 1.0,
            nu_measured: None,
            converged: pi.converged,
        }
    }

    /// As [`bounds`](Self::bounds), additionally reporting
    /// `a + w_v λ_min(G_vᵀG_v)` from a dense symmetric eigensolve.
    pub fn bounds_measured(&self) -> ConvexityBounds {
        let mut b = self.bounds();
        let lmin = if self.dim() == 0 {
            0.0
        } else {
            SymmetricEigen::new(self.gram.clone()).eigenvalues.min().max(0.0)
        };
        b.nu_measured = Some(self.a + lmin);
        b
    }
}

/// Hessian-vector products with a Hessian evaluated once.
#[derive(Clone, Debug)]
pub struct FrozenHessian<'a> {
    gram: &'a DMatrix<f64>,
    diag: DVector<f64>,
}

impl FrozenHessian<'_> {
    /// `out = H d`.
    pub fn apply_into(&self, d: &DVector<f64>, out: &mut DVector<f64>) {
        out.gemv(1.0, self.gram, d, 0.0);
        out.zip_zip_apply(d, &self.diag, |o, x, c| *o += c * x);
    }
}

/// Backward-difference surrogate of `h ∇_t ∇_u f`: the change of the
/// gradient between consecutive snapshots at a fixed point. Zero when there
/// is no predecessor.
pub fn time_grad(snap_k: &CostSnapshot, snap_km1: Option<&CostSnapshot>, u: &DVector<f64>) -> Result<DVector<f64>> {
    match snap_km1 {
        None => {
            snap_k.check(u)?;
            Ok(DVector::zeros(u.len()))
        }
        Some(prev) => {
            check_dim(snap_k.dim(), prev.dim())?;
            Ok(snap_k.gradient(u)? - prev.gradient(u)?)
        }
    }
}
