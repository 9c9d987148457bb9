use approx::assert_relative_eq;
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ddse::cost::{CostSnapshot, CostWeights};
use ddse::fopc::{batch_solve_newton, correct, predict, FopcConfig};
use ddse::sensing::RowSelection;

struct Problem {
    g: DMatrix<f64>,
    y_v: DVector<f64>,
    m_v: DVector<f64>,
    j_y: RowSelection,
    y_uy: DVector<f64>,
    j_d: RowSelection,
    y_ud: DVector<f64>,
    prior: DVector<f64>,
    weights: CostWeights,
}

impl Problem {
    fn random(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (m, ny, nd) = (rng.random_range(1..9), rng.random_range(1..5), rng.random_range(0..3));
        let n = 2 * ny + 2 * nd;
        let j_y = RowSelection {
            rows: (0..2 * ny).filter(|_| rng.random_bool(0.7)).collect(),
            ncols: 2 * ny,
        };
        let j_d = RowSelection {
            rows: (0..2 * nd).filter(|_| rng.random_bool(0.7)).collect(),
            ncols: 2 * nd,
        };
        Problem {
            g: DMatrix::from_fn(m, n, |_, _| rng.random_range(-1.0..1.0)),
            y_v: DVector::from_fn(m, |_, _| rng.random_range(0.9..1.1)),
            m_v: DVector::from_fn(m, |_, _| rng.random_range(0.9..1.1)),
            y_uy: DVector::from_fn(j_y.len(), |_, _| rng.random_range(-1.0..1.0)),
            y_ud: DVector::from_fn(j_d.len(), |_, _| rng.random_range(-1.0..1.0)),
            prior: DVector::from_fn(n, |_, _| rng.random_range(-0.1..0.1)),
            weights: CostWeights {
                w_v: rng.random_range(0.1..10.0),
                delta: rng.random_range(0.05..1.0),
                reg_a: rng.random_range(0.05..2.0),
            },
            j_y,
            j_d,
        }
    }

    fn snapshot(&self) -> CostSnapshot {
        CostSnapshot::new(
            self.g.clone(),
            self.y_v.clone(),
            self.m_v.clone(),
            &self.j_y,
            self.y_uy.clone(),
            &self.j_d,
            self.y_ud.clone(),
            &self.weights,
            Some(self.prior.clone()),
        )
        .unwrap()
    }

    /// Same problem with every measurement and the prior moved along `s`.
    fn shifted(&self, s: &DVector<f64>) -> Self {
        let ny = self.j_y.ncols;
        Problem {
            y_v: &self.y_v + &self.g * s,
            y_uy: DVector::from_iterator(
                self.j_y.len(),
                self.j_y.rows.iter().zip(&self.y_uy).map(|(&r, y)| y + s[r]),
            ),
            y_ud: DVector::from_iterator(
                self.j_d.len(),
                self.j_d.rows.iter().zip(&self.y_ud).map(|(&r, y)| y + s[ny + r]),
            ),
            prior: &self.prior + s,
            g: self.g.clone(),
            m_v: self.m_v.clone(),
            j_y: self.j_y.clone(),
            j_d: self.j_d.clone(),
            weights: self.weights.clone(),
        }
    }
}

fn huber_loop(e: f64, d: f64) -> f64 {
    if e.abs() <= d {
        e * e / 2.0
    } else {
        d * e.abs() - d * d / 2.0
    }
}

/// The objective written out term by term.
fn brute_force_value(p: &Problem, u: &DVector<f64>) -> f64 {
    let mut f = 0.0;
    for i in 0..p.g.nrows() {
        let mut r = p.y_v[i] - p.m_v[i];
        for j in 0..p.g.ncols() {
            r -= p.g[(i, j)] * u[j];
        }
        f += p.weights.w_v / 2.0 * r * r;
    }
    for (i, &row) in p.j_y.rows.iter().enumerate() {
        f += huber_loop(p.y_uy[i] - u[row], p.weights.delta);
    }
    for (i, &row) in p.j_d.rows.iter().enumerate() {
        f += huber_loop(p.y_ud[i] - u[p.j_y.ncols + row], p.weights.delta);
    }
    for j in 0..u.len() {
        f += p.weights.reg_a / 2.0 * (u[j] - p.prior[j]).powi(2);
    }
    f
}

fn point(n: usize, seed: u64) -> DVector<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    DVector::from_fn(n, |_, _| rng.random_range(-2.0..2.0))
}

#[test]
fn value_matches_brute_force() {
    for seed in 0..200 {
        let p = Problem::random(seed);
        let snap = p.snapshot();
        let u = point(snap.dim(), seed + 1000);
        let expected = brute_force_value(&p, &u);
        let got = snap.value(&u).unwrap();
        assert!(
            (got - expected).abs() <= 1e-13 * expected.max(1.0),
            "seed {seed}: {got} vs {expected}"
        );
    }
}

#[test]
fn minimizer_moves_with_consistent_shift() {
    for seed in 0..20 {
        let p = Problem::random(seed);
        let s = point(p.prior.len(), seed + 77) * 0.3;
        let (a, b) = (p.snapshot(), p.shifted(&s).snapshot());
        let u0 = DVector::zeros(a.dim());
        let ua = batch_solve_newton(&a, &u0, 1e-12, 200).unwrap().u;
        let ub = batch_solve_newton(&b, &u0, 1e-12, 200).unwrap().u;
        assert_relative_eq!(ub, &ua + &s, epsilon = 1e-9);

        let cfg = FopcConfig {
            p: 3,
            c: 4,
            alpha: 0.5 / a.bounds().l,
            beta: 0.5 / a.bounds().l,
            ..Default::default()
        };
        let u_hat = point(a.dim(), seed + 5);
        let pa = predict(&u_hat, &a, Some(&a), &cfg).unwrap();
        let pb = predict(&(&u_hat + &s), &b, Some(&b), &cfg).unwrap();
        assert_relative_eq!(pb, &pa + &s, epsilon = 1e-12);
        let ca = correct(&pa, &a, &cfg).unwrap();
        let cb = correct(&pb, &b, &cfg).unwrap();
        assert_relative_eq!(cb, &ca + &s, epsilon = 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn convex_along_segments(seed in 0u64..10_000, theta in 0.0f64..1.0) {
        let snap = Problem::random(seed).snapshot();
        let (x, y) = (point(snap.dim(), seed ^ 1), point(snap.dim(), seed ^ 2));
        let mid = &x * theta + &y * (1.0 - theta);
        let lhs = snap.value(&mid).unwrap();
        let rhs = theta * snap.value(&x).unwrap() + (1.0 - theta) * snap.value(&y).unwrap();
        prop_assert!(lhs <= rhs + 1e-10 * rhs.abs().max(1.0));
    }

    #[test]
    fn gradient_is_strongly_monotone_and_lipschitz(seed in 0u64..10_000) {
        let snap = Problem::random(seed).snapshot();
        let b = snap.bounds();
        let (x, y) = (point(snap.dim(), seed ^ 3), point(snap.dim(), seed ^ 4));
        let dg = snap.gradient(&x).unwrap() - snap.gradient(&y).unwrap();
        let dx = &x - &y;
        prop_assert!(dg.dot(&dx) >= b.nu * dx.norm_squared() * (1.0 - 1e-10));
        prop_assert!(dg.norm() <= b.l * dx.norm() * (1.0 + 1e-10));
    }

    #[test]
    fn hessian_spectrum_within_bounds(seed in 0u64..10_000) {
        let snap = Problem::random(seed).snapshot();
        let b = snap.bounds();
        let u = point(snap.dim(), seed ^ 5);
        let eig = SymmetricEigen::new(snap.hessian(&u).unwrap()).eigenvalues;
        prop_assert!(eig.min() >= b.nu - 1e-10);
        prop_assert!(eig.max() <= b.l + 1e-9, "lmax {} L {}", eig.max(), b.l);
        let measured = snap.bounds_measured().nu_measured.unwrap();
        prop_assert!(measured >= b.nu - 1e-10);
    }
}
