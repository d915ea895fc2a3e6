//! Multi-term Caputo derivatives discretized with the L1 scheme.
//!
//! Multiplying the discrete equation at level `n` by `s` gives the pressure row
//! `C beta^n + s(...) = s F^n + C sum_k c_k beta^{n-k} + b_n C beta^0`, where the
//! history weights combine both orders with the factors
//! `gamma_1 s_2 / (gamma_1 s_2 + gamma_2 s_1)` and `gamma_2 s_1 / (...)`.

use nalgebra::DVector;

use crate::error::{Error, Result};
use crate::fem::{BlockVector, ForwardSystem, Loads, SaddleSolver};

fn check_order(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha < 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!(
            "fractional order must lie in (0, 1), got {alpha}"
        )))
    }
}

/// L1 weights `(n + 1 - k)^{1-a} - (n - k)^{1-a}` for `k = 1..=n`.
pub fn l1_weights(alpha: f64, n: usize) -> Result<Vec<f64>> {
    check_order(alpha)?;
    if n == 0 {
        return Err(Error::InvalidArgument("step index must be at least 1".into()));
    }
    let p = 1.0 - alpha;
    Ok((1..=n)
        .map(|k| ((n + 1 - k) as f64).powf(p) - ((n - k) as f64).powf(p))
        .collect())
}

/// Orders and multipliers of `gamma_1 D^{a_1} u + gamma_2 D^{a_2} u`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MultiTermOrders {
    pub alpha: [f64; 2],
    pub gamma: [f64; 2],
}

impl MultiTermOrders {
    /// Multipliers may be zero (single-term limit) but not both.
    pub fn new(alpha: [f64; 2], gamma: [f64; 2]) -> Result<Self> {
        check_order(alpha[0])?;
        check_order(alpha[1])?;
        if gamma.iter().any(|g| !(*g >= 0.0 && g.is_finite())) || gamma[0] + gamma[1] <= 0.0 {
            return Err(Error::InvalidArgument(format!(
                "multipliers must be nonnegative with a positive sum, got {gamma:?}"
            )));
        }
        Ok(MultiTermOrders { alpha, gamma })
    }
}

/// Precomputed coefficients of the multi-term L1 time march.
#[derive(Debug, Clone)]
pub struct MultiTermScheme {
    pub orders: MultiTermOrders,
    pub dt: f64,
    pub steps: usize,
    /// `s_i = dt^{a_i} Gamma(2 - a_i)`.
    pub s_terms: [f64; 2],
    pub s: f64,
    b: Vec<f64>,
    c: Vec<f64>,
}

impl MultiTermScheme {
    pub fn new(orders: MultiTermOrders, dt: f64, steps: usize) -> Result<Self> {
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(Error::InvalidArgument(format!("time step must be positive, got {dt}")));
        }
        if steps == 0 {
            return Err(Error::InvalidArgument("need at least one time step".into()));
        }
        let [a1, a2] = orders.alpha;
        let [g1, g2] = orders.gamma;
        let s1 = dt.powf(a1) * libm::tgamma(2.0 - a1);
        let s2 = dt.powf(a2) * libm::tgamma(2.0 - a2);
        let denom = g1 * s2 + g2 * s1;
        let s = s1 * s2 / denom;
        // s_{i+1} with s_3 = s_1 pairs order 1 with s_2 and order 2 with s_1.
        let factor = [g1 * s2 / denom, g2 * s1 / denom];
        let (p1, p2) = (1.0 - a1, 1.0 - a2);

        let b = (1..=steps)
            .map(|n| {
                let n = n as f64;
                factor[0] * (n.powf(p1) - (n - 1.0).powf(p1))
                    + factor[1] * (n.powf(p2) - (n - 1.0).powf(p2))
            })
            .collect();
        let bracket = |k: f64, p: f64| 2.0 * k.powf(p) - (k + 1.0).powf(p) - (k - 1.0).powf(p);
        let c = (1..steps)
            .map(|k| {
                let k = k as f64;
                factor[0] * bracket(k, p1) + factor[1] * bracket(k, p2)
            })
            .collect();
        Ok(MultiTermScheme {
            orders,
            dt,
            steps,
            s_terms: [s1, s2],
            s,
            b,
            c,
        })
    }

    /// `b_n` for `n = 1..=steps`.
    pub fn b(&self, n: usize) -> f64 {
        self.b[n - 1]
    }

    /// `c_k` for `k = 1..steps`.
    pub fn c(&self, k: usize) -> f64 {
        self.c[k - 1]
    }

    pub fn times(&self) -> Vec<f64> {
        (1..=self.steps).map(|n| n as f64 * self.dt).collect()
    }
}

/// Solution levels `n = 1..=M`, stored at index `n - 1`.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub velocity: Vec<DVector<f64>>,
    pub pressure: Vec<DVector<f64>>,
}

/// March the block system through all time levels of `scheme`.
pub fn march(
    system: &ForwardSystem,
    scheme: &MultiTermScheme,
    loads: &Loads,
    beta0: &DVector<f64>,
) -> Result<Trajectory> {
    if loads.steps() != scheme.steps {
        return Err(Error::Dimension {
            what: "load columns",
            expected: scheme.steps,
            found: loads.steps(),
        });
    }
    crate::error::check_len("initial pressure", system.n_pressure(), beta0.len())?;
    crate::error::check_len("source load rows", system.n_pressure(), loads.f.nrows())?;
    crate::error::check_len("boundary load rows", system.n_velocity(), loads.g.nrows())?;

    let s = scheme.s;
    let mass = &system.c + &system.d * s;
    let solver = SaddleSolver::new(system, s, &mass)?;
    let c_beta0 = system.c.component_mul(beta0);

    let mut velocity = Vec::with_capacity(scheme.steps);
    let mut pressure: Vec<DVector<f64>> = Vec::with_capacity(scheme.steps);
    for n in 1..=scheme.steps {
        let mut hist = DVector::zeros(system.n_pressure());
        for k in 1..n {
            hist.axpy(scheme.c(k), &pressure[n - k - 1], 1.0);
        }
        let mut rhs_p = system.c.component_mul(&hist);
        rhs_p.axpy(s, &loads.f.column(n - 1), 1.0);
        rhs_p.axpy(scheme.b(n), &c_beta0, 1.0);
        let x = solver.solve(&BlockVector {
            velocity: loads.g.column(n - 1).into_owned(),
            pressure: rhs_p,
        })?;
        velocity.push(x.velocity);
        pressure.push(x.pressure);
    }
    Ok(Trajectory { velocity, pressure })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fem::{assemble_loads, assemble_mixed, to_dense};
    use crate::mesh::{CellField, RectGrid};
    use proptest::prelude::*;

    fn scheme(a: [f64; 2], g: [f64; 2], dt: f64, m: usize) -> MultiTermScheme {
        MultiTermScheme::new(MultiTermOrders::new(a, g).unwrap(), dt, m).unwrap()
    }

    #[test]
    fn l1_weight_values() {
        for alpha in [0.1, 0.5, 0.9] {
            let w = l1_weights(alpha, 7).unwrap();
            assert!((w[6] - 1.0).abs() < 1e-15);
            assert!(w.windows(2).all(|p| p[0] < p[1] && p[0] > 0.0));
        }
        let w = l1_weights(0.5, 2).unwrap();
        assert!((w[0] - (2f64.sqrt() - 1.0)).abs() < 1e-15);
        let w = l1_weights(1.0 - 1e-9, 5).unwrap();
        assert!(w[..4].iter().all(|v| v.abs() < 1e-8));
        assert!(l1_weights(0.0, 3).is_err());
        assert!(l1_weights(1.0, 3).is_err());
        assert!(l1_weights(0.5, 0).is_err());
    }

    #[test]
    fn single_term_limit() {
        let sc = scheme([0.4, 0.7], [2.0, 0.0], 0.05, 10);
        assert!((sc.s - sc.s_terms[0] / 2.0).abs() < 1e-15);
        let w = l1_weights(0.4, 10).unwrap();
        // b_n reduces to the first-step weight of the single-order scheme
        for n in 1..=10 {
            assert!((sc.b(n) - w[10 - n]).abs() < 1e-14);
        }
    }

    #[test]
    fn degenerate_orders_rejected() {
        assert!(MultiTermOrders::new([0.0, 0.5], [1.0, 1.0]).is_err());
        assert!(MultiTermOrders::new([0.3, 1.2], [1.0, 1.0]).is_err());
        assert!(MultiTermOrders::new([0.3, 0.5], [0.0, 0.0]).is_err());
        assert!(MultiTermOrders::new([0.3, 0.5], [-1.0, 1.0]).is_err());
        let o = MultiTermOrders::new([0.3, 0.5], [1.0, 1.0]).unwrap();
        assert!(MultiTermScheme::new(o, 0.0, 3).is_err());
        assert!(MultiTermScheme::new(o, 0.1, 0).is_err());
    }

    #[test]
    fn history_weights_positive() {
        // 2k^p - (k+1)^p - (k-1)^p > 0 for concave k^p.
        let sc = scheme([0.3, 0.6], [0.2, 0.8], 0.02, 50);
        assert!((1..50).all(|k| sc.c(k) > 0.0));
    }

    proptest! {
        #[test]
        fn coefficient_identities(a1 in 0.01f64..0.99, a2 in 0.01f64..0.99,
                                  g1 in 0.01f64..5.0, g2 in 0.01f64..5.0,
                                  dt in 1e-3f64..0.5, m in 1usize..40) {
            let sc = scheme([a1, a2], [g1, g2], dt, m);
            let [s1, s2] = sc.s_terms;
            prop_assert!(sc.s > 0.0 && s1 > 0.0 && s2 > 0.0);
            prop_assert!(((g1 / s1 + g2 / s2) * sc.s - 1.0).abs() < 1e-12);
            prop_assert!((sc.b(1) - 1.0).abs() < 1e-14);
            // partial sums telescope: sum_k c_k + b_n = 1
            for n in 1..=m {
                let total: f64 = (1..n).map(|k| sc.c(k)).sum::<f64>() + sc.b(n);
                prop_assert!((total - 1.0).abs() < 1e-12);
            }
        }
    }

    /// Scalar relaxation `g1 D^a1 u + g2 D^a2 u + lambda u = f(t)` integrated by
    /// direct L1 history sums, written without the b/c coefficient algebra.
    fn scalar_l1(alpha: [f64; 2], gamma: [f64; 2], lambda: f64, f: impl Fn(f64) -> f64, dt: f64, m: usize) -> Vec<f64> {
        let mut u = vec![0.0];
        let st: Vec<f64> = (0..2).map(|i| dt.powf(alpha[i]) * libm::tgamma(2.0 - alpha[i])).collect();
        for n in 1..=m {
            let mut lhs = lambda;
            let mut rhs = f(n as f64 * dt);
            for i in 0..2 {
                let p = 1.0 - alpha[i];
                let w = |k: usize| ((n + 1 - k) as f64).powf(p) - ((n - k) as f64).powf(p);
                let coef = gamma[i] / st[i];
                lhs += coef * w(n);
                rhs += coef * w(n) * u[n - 1];
                for k in 1..n {
                    rhs -= coef * (u[k] - u[k - 1]) * w(k);
                }
            }
            u.push(rhs / lhs);
        }
        u
    }

    fn lumped_setup(q: f64) -> (RectGrid, ForwardSystem, f64) {
        let g = RectGrid::unit(1, 1).unwrap();
        let sys = assemble_mixed(&g, &CellField::constant(&g, 1.3), &CellField::constant(&g, q)).unwrap();
        // Effective relaxation rate with g = 0: (D + B^T A^{-1} B) / C.
        let a = to_dense(&sys.a);
        let b = to_dense(&sys.b);
        let btainvb = (b.transpose() * a.lu().solve(&b).unwrap())[(0, 0)];
        let lambda = (sys.d[0] + btainvb) / sys.c[0];
        (g, sys, lambda)
    }

    #[test]
    fn lumped_march_matches_scalar_integrator() {
        let (g, sys, lambda) = lumped_setup(0.7);
        let (alpha, gamma, dt, m) = ([0.3, 0.6], [0.2, 0.8], 0.02, 50);
        let sc = scheme(alpha, gamma, dt, m);
        let src = |t: f64| 10.0 + 3.0 * t;
        let loads = assemble_loads(&g, |_, _, t| src(t), |_, _, _| 0.0, &sc.times());
        let traj = march(&sys, &sc, &loads, &DVector::zeros(1)).unwrap();
        let oracle = scalar_l1(alpha, gamma, lambda, src, dt, m);
        for n in 1..=m {
            assert!((traj.pressure[n - 1][0] - oracle[n]).abs() < 1e-8, "n={n}");
        }
    }

    #[test]
    fn equal_orders_reduce_to_single_order() {
        let (g, sys, lambda) = lumped_setup(1.0);
        let alpha = 0.45;
        let (dt, m) = (0.05, 20);
        let sc = scheme([alpha, alpha], [0.3, 0.7], dt, m);
        let single = scheme([alpha, alpha], [1.0, 0.0], dt, m);
        assert!((sc.s - single.s).abs() < 1e-15);
        for n in 1..m {
            assert!((sc.c(n) - single.c(n)).abs() < 1e-14);
        }
        let loads = assemble_loads(&g, |_, _, _| 1.0, |_, _, _| 0.0, &sc.times());
        let traj = march(&sys, &sc, &loads, &DVector::zeros(1)).unwrap();
        let oracle = scalar_l1([alpha, alpha], [1.0, 0.0], lambda, |_| 1.0, dt, m);
        for n in 1..=m {
            assert!((traj.pressure[n - 1][0] - oracle[n]).abs() < 1e-8);
        }
    }

    #[test]
    fn zero_data_zero_trajectory() {
        let g = RectGrid::unit(3, 3).unwrap();
        let sys = assemble_mixed(&g, &CellField::constant(&g, 1.0), &CellField::constant(&g, 1.0)).unwrap();
        let sc = scheme([0.3, 0.6], [0.2, 0.8], 0.1, 10);
        let loads = assemble_loads(&g, |_, _, _| 0.0, |_, _, _| 0.0, &sc.times());
        let traj = march(&sys, &sc, &loads, &DVector::zeros(9)).unwrap();
        assert!(traj.pressure.iter().chain(traj.velocity.iter()).all(|v| v.iter().all(|x| *x == 0.0)));
    }

    #[test]
    fn load_length_mismatch_rejected() {
        let g = RectGrid::unit(2, 2).unwrap();
        let sys = assemble_mixed(&g, &CellField::constant(&g, 1.0), &CellField::constant(&g, 1.0)).unwrap();
        let sc = scheme([0.3, 0.6], [0.2, 0.8], 0.1, 10);
        let loads = assemble_loads(&g, |_, _, _| 1.0, |_, _, _| 0.0, &[0.1, 0.2]);
        assert!(march(&sys, &sc, &loads, &DVector::zeros(4)).is_err());
    }

    #[test]
    fn temporal_self_convergence() {
        let g = RectGrid::unit(4, 4).unwrap();
        let sys = assemble_mixed(
            &g,
            &CellField::from_fn(&g, |x, y| 1.0 + x + y),
            &CellField::constant(&g, 1.0),
        )
        .unwrap();
        let (alpha, gamma, t_end) = ([0.3, 0.6], [0.2, 0.8], 1.0);
        // Forcing of a smooth-in-time solution u ~ t^2 profile.
        let c = |a: f64| 2.0 / libm::tgamma(3.0 - a);
        let src = move |x: f64, y: f64, t: f64| {
            (1.0 + x * y) * (gamma[0] * c(alpha[0]) * t.powf(2.0 - alpha[0])
                + gamma[1] * c(alpha[1]) * t.powf(2.0 - alpha[1])
                + t * t)
        };
        let terminal = |m: usize| {
            let sc = scheme(alpha, gamma, t_end / m as f64, m);
            let loads = assemble_loads(&g, src, |_, _, _| 0.0, &sc.times());
            march(&sys, &sc, &loads, &DVector::zeros(16)).unwrap().pressure[m - 1].clone()
        };
        let reference = terminal(1280);
        let errs: Vec<f64> = [10, 20, 40, 80].iter().map(|&m| (terminal(m) - &reference).norm()).collect();
        for w in errs.windows(2) {
            let order = (w[0] / w[1]).log2();
            assert!(order >= 1.0, "observed order {order}, errors {errs:?}");
        }
    }
}
