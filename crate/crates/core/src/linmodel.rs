//! Fixed-point linearization of the power-flow equations,
//! `z̃ = M_Y u^Y + M_Δ u^Δ + m`, anchored at a voltage profile.
//!
//! With `A = Y_LL⁻¹ diag(conj(v̂))⁻¹` (wye-loaded columns only) and
//! `B = Y_LL⁻¹ Hᵀ diag(conj(H v̂))⁻¹`,
//!
//! ```text
//! M_Y = [Re A   Im A]     M_Δ = [Re B   Im B]     m = [Re w]
//!       [Im A  −Re A]           [Im B  −Re B]         [Im w]
//! ```
//!
//! The model is exact at zero load and at any anchor that solves the AC
//! equations for the injections being evaluated.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use serde_json::{json, Value};

use crate::cx::Cx;
use crate::netmodel::{check_dim, NetworkModel};
use crate::Result;

#[derive(Clone, Debug, PartialEq)]
pub struct LinearPowerFlowModel {
    pub m_y: DMatrix<f64>,
    pub m_delta: DMatrix<f64>,
    pub m: DVector<f64>,
    pub anchor_v: DVector<Complex64>,
}

fn stack_blocks(c: &DMatrix<Complex64>) -> DMatrix<f64> {
    let (n, k) = c.shape();
    DMatrix::from_fn(2 * n, 2 * k, |r, col| {
        let (i, j) = (r % n, col % k);
        match (r < n, col < k) {
            (true, true) => c[(i, j)].re,
            (true, false) => c[(i, j)].im,
            (false, true) => c[(i, j)].im,
            (false, false) => -c[(i, j)].re,
        }
    })
}

/// Builds the linear model around `anchor_v`.
pub fn linearize(net: &NetworkModel, anchor_v: &DVector<Complex64>) -> Result<LinearPowerFlowModel> {
    check_dim(net.n_phases(), anchor_v.len())?;
    net.check_loaded_voltages(anchor_v, 0.0)?;

    let mut a = net.z_wye().clone();
    for (j, l) in net.wye_loads().iter().enumerate() {
        let s = anchor_v[l.flat].conj().inv();
        a.column_mut(j).iter_mut().for_each(|x| *x *= s);
    }
    let mut b = net.z_delta().clone();
    for (r, br) in net.delta_branches().iter().enumerate() {
        let s = (anchor_v[br.plus] - anchor_v[br.minus]).conj().inv();
        b.column_mut(r).iter_mut().for_each(|x| *x *= s);
    }
    Ok(LinearPowerFlowModel {
        m_y: stack_blocks(&a),
        m_delta: stack_blocks(&b),
        m: NetworkModel::encode_voltage(net.w()),
        anchor_v: anchor_v.clone(),
    })
}

impl LinearPowerFlowModel {
    pub fn n_wye_states(&self) -> usize {
        self.m_y.ncols()
    }

    pub fn state_dim(&self) -> usize {
        self.m_y.ncols() + self.m_delta.ncols()
    }

    /// `[M_Y, M_Δ]`.
    pub fn m_matrix(&self) -> DMatrix<f64> {
        let (rows, ny, nd) = (self.m.len(), self.m_y.ncols(), self.m_delta.ncols());
        let mut out = DMatrix::zeros(rows, ny + nd);
        out.columns_mut(0, ny).copy_from(&self.m_y);
        out.columns_mut(ny, nd).copy_from(&self.m_delta);
        out
    }

    /// Rectangular voltage `[Re v; Im v]` predicted for the state `u`.
    pub fn evaluate(&self, u: &DVector<f64>) -> Result<DVector<f64>> {
        check_dim(self.state_dim(), u.len())?;
        let ny = self.m_y.ncols();
        let mut z = self.m.clone();
        z.gemv(1.0, &self.m_y, &u.rows(0, ny), 1.0);
        z.gemv(1.0, &self.m_delta, &u.rows(ny, self.m_delta.ncols()), 1.0);
        Ok(z)
    }

    pub fn to_json(&self) -> Value {
        let mat = |m: &DMatrix<f64>| -> Vec<Vec<f64>> {
            (0..m.nrows()).map(|r| m.row(r).iter().copied().collect()).collect()
        };
        json!({
            "m_y": mat(&self.m_y),
            "m_delta": mat(&self.m_delta),
            "m": self.m.iter().copied().collect::<Vec<_>>(),
            "anchor_v": self.anchor_v.iter().map(|&c| Cx::from(c)).collect::<Vec<_>>(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netmodel::tests::two_bus;
    use crate::netmodel::{build_network, solve_power_flow, ComplexInjection};
    use crate::Error;

    fn feeder4() -> NetworkModel {
        NetworkModel::from_json(include_str!("../feeders/feeder4.json")).unwrap()
    }

    #[test]
    fn two_bus_sensitivities() {
        let net = build_network(&two_bus(10.0)).unwrap();
        let model = linearize(&net, net.w()).unwrap();
        let expected = DMatrix::from_row_slice(2, 2, &[0.1, 0.0, 0.0, -0.1]);
        assert!((&model.m_y - expected).amax() < 1e-12);
        let z = model.evaluate(&DVector::from_row_slice(&[0.1, 0.0])).unwrap();
        assert!((z[0] - 1.01).abs() < 1e-12 && z[1].abs() < 1e-12);
    }

    #[test]
    fn offset_is_zero_load_voltage() {
        let net = feeder4();
        let anchor = net.w().map(|c| c * Complex64::from_polar(0.97, 0.01));
        let model = linearize(&net, &anchor).unwrap();
        assert_eq!(model.m, NetworkModel::encode_voltage(net.w()));
        assert_eq!(model.evaluate(&DVector::zeros(net.state_dim())).unwrap(), model.m);
    }

    #[test]
    fn zero_anchor_rejected() {
        let net = feeder4();
        let mut anchor = net.w().clone();
        anchor[net.wye_loads()[0].flat] = Complex64::new(0.0, 0.0);
        assert!(matches!(linearize(&net, &anchor), Err(Error::ZeroVoltage { .. })));
    }

    #[test]
    fn dimension_mismatch() {
        let net = feeder4();
        let model = linearize(&net, net.w()).unwrap();
        assert!(model.evaluate(&DVector::zeros(3)).is_err());
    }

    #[test]
    fn exact_at_solved_anchor() {
        let net = feeder4();
        let u = DVector::from_fn(net.state_dim(), |i, _| -0.02 - 0.003 * (i % 5) as f64);
        let inj = ComplexInjection::from_state(&net, &u).unwrap();
        let sol = solve_power_flow(&net, &inj, net.w(), 1e-12, 200).unwrap();
        let model = linearize(&net, &sol.v).unwrap();
        let z = model.evaluate(&u).unwrap();
        assert!((z - NetworkModel::encode_voltage(&sol.v)).amax() < 1e-8);
    }

    #[test]
    fn json_dump_uses_complex_objects() {
        let net = build_network(&two_bus(10.0)).unwrap();
        let v = linearize(&net, net.w()).unwrap().to_json();
        assert!((v["anchor_v"][0]["re"].as_f64().unwrap() - 1.0).abs() < 1e-12);
        assert!((v["m_y"][1][1].as_f64().unwrap() + 0.1).abs() < 1e-12);
    }
}
