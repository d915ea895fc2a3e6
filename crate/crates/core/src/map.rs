//! MAP estimation: finite-difference sensitivities, augmented Tikhonov for the
//! hierarchical Gaussian prior and iterative reweighting for the Laplace prior.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::model::ForwardMap;

/// Finite-difference scheme for sensitivity columns.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Difference {
    #[default]
    Forward,
    Central,
}

/// Linearization `H_bar` of a forward map at `point`.
#[derive(Debug, Clone)]
pub struct Sensitivity {
    pub matrix: DMatrix<f64>,
    pub point: DVector<f64>,
    pub step: f64,
    /// `H(point)`.
    pub value: DVector<f64>,
}

/// Difference-quotient sensitivity; columns are evaluated in parallel.
///
/// `value` may pass a known `H(v)` to save one forward evaluation.
pub fn sensitivity<M: ForwardMap + ?Sized>(
    map: &M,
    v: &DVector<f64>,
    step: f64,
    scheme: Difference,
    value: Option<DVector<f64>>,
) -> Result<Sensitivity> {
    check_len("parameters", map.n_params(), v.len())?;
    if !(step > 0.0 && step.is_finite()) {
        return Err(Error::InvalidArgument(format!("difference step must be positive, got {step}")));
    }
    let value = match value {
        Some(h) => h,
        None => map.evaluate(v)?,
    };
    let probe = |j: usize, delta: f64| -> Result<DVector<f64>> {
        let mut w = v.clone();
        w[j] += delta;
        map.evaluate(&w).map_err(|e| Error::SensitivityColumn {
            column: j,
            source: Box::new(e),
        })
    };
    let cols: Vec<DVector<f64>> = (0..v.len())
        .into_par_iter()
        .map(|j| match scheme {
            Difference::Forward => Ok((probe(j, step)? - &value) / step),
            Difference::Central => Ok((probe(j, step)? - probe(j, -step)?) / (2.0 * step)),
        })
        .collect::<Result<_>>()?;
    let matrix = if cols.is_empty() {
        DMatrix::zeros(value.len(), 0)
    } else {
        DMatrix::from_columns(&cols)
    };
    if matrix.iter().any(|x| !x.is_finite()) {
        return Err(Error::Singular("sensitivity has non-finite entries".into()));
    }
    Ok(Sensitivity {
        matrix,
        point: v.clone(),
        step,
        value,
    })
}

/// One row of the iteration trace.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub iter: usize,
    /// `||H(v_k) - d||^2`.
    pub misfit: f64,
    pub lambda: f64,
    pub step_norm: f64,
}

#[derive(Debug, Clone)]
pub struct MapResult {
    pub v: DVector<f64>,
    /// Final hyperparameter (Gaussian) or the fixed Laplace rate.
    pub lambda: f64,
    /// Regularization weight used in the last solve.
    pub mu: f64,
    pub trace: Vec<TraceRow>,
    pub converged: bool,
    /// `H(v)`.
    pub predicted: DVector<f64>,
}

/// Settings of the augmented Tikhonov iteration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TikhonovSettings {
    pub sigma: f64,
    /// Gamma hyperprior shape and rate.
    pub a: f64,
    pub b: f64,
    pub mu0: f64,
    pub max_iter: usize,
    pub tol: f64,
    pub step: f64,
    pub difference: Difference,
}

impl Default for TikhonovSettings {
    fn default() -> Self {
        TikhonovSettings {
            sigma: 0.01,
            a: 1.0,
            b: 1e-4,
            mu0: 1e-3,
            max_iter: 20,
            tol: 1e-6,
            step: 0.5,
            difference: Difference::Forward,
        }
    }
}

fn solve_normal(h: &DMatrix<f64>, shift: &DVector<f64>, rhs: &DVector<f64>) -> Result<DVector<f64>> {
    let mut n = h.transpose() * h;
    for i in 0..n.nrows() {
        n[(i, i)] += shift[i];
    }
    n.cholesky()
        .map(|c| c.solve(rhs))
        .ok_or_else(|| Error::Singular("regularized normal equations".into()))
}

/// Halvings tried before a Gauss-Newton direction is abandoned.
const MAX_HALVINGS: usize = 10;

/// First of `v + h, v + h/2, ...` that does not increase `objective`; failed
/// forward evaluations count as increases.
fn backtrack<M, J>(map: &M, v: &DVector<f64>, h: &DVector<f64>, current: f64, objective: J) -> Option<(DVector<f64>, DVector<f64>, f64)>
where
    M: ForwardMap + ?Sized,
    J: Fn(&DVector<f64>, &DVector<f64>) -> f64,
{
    let mut t = 1.0;
    for _ in 0..=MAX_HALVINGS {
        let w = v + h * t;
        if let Ok(p) = map.evaluate(&w) {
            if objective(&w, &p) <= current + 1e-12 * current.abs() {
                return Some((w, p, t));
            }
        }
        t *= 0.5;
    }
    None
}

/// Alternate damped Gauss-Newton steps with the Gamma-hyperprior update of `lambda`.
pub fn augmented_tikhonov<M: ForwardMap + ?Sized>(
    map: &M,
    data: &DVector<f64>,
    settings: &TikhonovSettings,
    v0: &DVector<f64>,
) -> Result<MapResult> {
    check_len("data", map.n_obs(), data.len())?;
    let s = settings;
    if !(s.sigma > 0.0 && s.mu0 > 0.0 && s.a > 0.0 && s.b >= 0.0) {
        return Err(Error::InvalidArgument(format!("invalid Tikhonov settings {s:?}")));
    }
    let l = v0.len() as f64;
    let mut v = v0.clone();
    let mut mu = s.mu0;
    let mut lambda = mu / (s.sigma * s.sigma);
    let mut predicted = map.evaluate(&v)?;
    let mut trace = Vec::new();
    let mut converged = false;
    for iter in 1..=s.max_iter.max(1) {
        let sens = sensitivity(map, &v, s.step, s.difference, Some(predicted.clone()))?;
        let hbar = &sens.matrix;
        let rhs = hbar.transpose() * (data - &predicted);
        let h = solve_normal(hbar, &DVector::from_element(v.len(), mu), &rhs)?;
        let objective = |w: &DVector<f64>, p: &DVector<f64>| (p - data).norm_squared() + mu * w.norm_squared();
        let current = objective(&v, &predicted);
        let Some((next, next_pred, t)) = backtrack(map, &v, &h, current, objective) else {
            break;
        };
        v = next;
        predicted = next_pred;
        lambda = (l / 2.0 + s.a - 1.0) / (0.5 * v.norm_squared() + s.b);
        if !(lambda > 0.0 && lambda.is_finite()) {
            return Err(Error::Singular(format!("hyperparameter update gave {lambda}")));
        }
        mu = lambda * s.sigma * s.sigma;
        let step_norm = t * h.norm();
        trace.push(TraceRow {
            iter,
            misfit: (&predicted - data).norm_squared(),
            lambda,
            step_norm,
        });
        if step_norm < s.tol {
            converged = true;
            break;
        }
    }
    Ok(MapResult {
        v,
        lambda,
        mu,
        trace,
        converged,
        predicted,
    })
}

/// Settings of the iteratively reweighted Laplace-prior MAP solver.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IrlsSettings {
    pub sigma: f64,
    pub mu: f64,
    pub eps: f64,
    pub max_iter: usize,
    pub tol: f64,
    pub step: f64,
    pub difference: Difference,
}

impl Default for IrlsSettings {
    fn default() -> Self {
        IrlsSettings {
            sigma: 0.01,
            mu: 0.005,
            eps: 1e-6,
            max_iter: 20,
            tol: 1e-6,
            step: 0.5,
            difference: Difference::Forward,
        }
    }
}

/// Diagonal of `W(v) = diag((v_i^2 + eps)^{-1/2})`.
pub fn irls_weights(v: &DVector<f64>, eps: f64) -> DVector<f64> {
    v.map(|x| 1.0 / (x * x + eps).sqrt())
}

/// `v^T W(v) v`, the smoothed `||v||_1`.
pub fn smoothed_l1(v: &DVector<f64>, eps: f64) -> f64 {
    v.iter().map(|x| x * x / (x * x + eps).sqrt()).sum()
}

/// Reweighted Gauss-Newton iteration for the Laplace-prior MAP point.
pub fn irls<M: ForwardMap + ?Sized>(
    map: &M,
    data: &DVector<f64>,
    settings: &IrlsSettings,
    v0: &DVector<f64>,
) -> Result<MapResult> {
    check_len("data", map.n_obs(), data.len())?;
    let s = settings;
    if !(s.sigma > 0.0 && s.mu > 0.0 && s.eps > 0.0) {
        return Err(Error::InvalidArgument(format!("invalid reweighting settings {s:?}")));
    }
    let lambda = s.mu / (2.0 * s.sigma * s.sigma);
    let mut v = v0.clone();
    let mut predicted = map.evaluate(&v)?;
    let mut trace = Vec::new();
    let mut converged = false;
    for iter in 1..=s.max_iter.max(1) {
        let sens = sensitivity(map, &v, s.step, s.difference, Some(predicted.clone()))?;
        let hbar = &sens.matrix;
        let w = irls_weights(&v, s.eps);
        let rhs = hbar.transpose() * (data - &predicted + hbar * &v);
        let target = solve_normal(hbar, &(w * s.mu), &rhs)?;
        // smoothed objective whose stationarity condition is the reweighted system
        let objective = |u: &DVector<f64>, p: &DVector<f64>| {
            0.5 * (p - data).norm_squared() + s.mu * u.iter().map(|x| (x * x + s.eps).sqrt()).sum::<f64>()
        };
        let current = objective(&v, &predicted);
        let Some((next, next_pred, t)) = backtrack(map, &v, &(&target - &v), current, objective) else {
            break;
        };
        let step_norm = t * (&target - &v).norm();
        v = next;
        predicted = next_pred;
        trace.push(TraceRow {
            iter,
            misfit: (&predicted - data).norm_squared(),
            lambda,
            step_norm,
        });
        if step_norm < s.tol {
            converged = true;
            break;
        }
    }
    Ok(MapResult {
        v,
        lambda,
        mu: s.mu,
        trace,
        converged,
        predicted,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{FnMap, LinearMap};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rows: usize, cols: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DMatrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn sensitivity_examples() {
        let m = random_matrix(6, 3, 1);
        let lin = LinearMap::new(m.clone());
        let v = DVector::from_vec(vec![0.3, -2.0, 5.0]);
        for scheme in [Difference::Forward, Difference::Central] {
            let s = sensitivity(&lin, &v, 0.5, scheme, None).unwrap();
            assert!((s.matrix - &m).amax() < 1e-12);
        }
        let constant = FnMap::new(2, 3, |_| Ok(DVector::from_element(3, 4.0)));
        let s = sensitivity(&constant, &DVector::zeros(2), 0.5, Difference::Forward, None).unwrap();
        assert_eq!(s.matrix, DMatrix::zeros(3, 2));
        let square = FnMap::new(1, 1, |v: &DVector<f64>| Ok(v.map(|x| x * x)));
        let s = sensitivity(&square, &DVector::from_element(1, 1.0), 0.5, Difference::Forward, None).unwrap();
        assert!((s.matrix[(0, 0)] - 2.5).abs() < 1e-15);
    }

    #[test]
    fn sensitivity_failure_names_column() {
        let map = FnMap::new(3, 1, |v: &DVector<f64>| {
            if v[2] > 0.1 {
                Err(Error::Singular("blow-up".into()))
            } else {
                Ok(DVector::from_element(1, v.sum()))
            }
        });
        match sensitivity(&map, &DVector::zeros(3), 0.5, Difference::Forward, None) {
            Err(Error::SensitivityColumn { column, .. }) => assert_eq!(column, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn lambda_update_arithmetic() {
        // l = 2, a = 1, b = 0.5: one step of size 1 along the first axis.
        let lin = LinearMap::new(DMatrix::identity(2, 2));
        let d = DVector::from_vec(vec![1.0, 0.0]);
        let settings = TikhonovSettings {
            sigma: 1.0,
            a: 1.0,
            b: 0.5,
            mu0: 1e-14,
            max_iter: 1,
            ..Default::default()
        };
        let r = augmented_tikhonov(&lin, &d, &settings, &DVector::zeros(2)).unwrap();
        assert!((r.v.norm_squared() - 1.0).abs() < 1e-12);
        assert!((r.lambda - 1.0).abs() < 1e-12);
    }

    #[test]
    fn one_step_equals_closed_form_tikhonov() {
        let m = random_matrix(12, 5, 7);
        let d = DVector::from_fn(12, |i, _| (i as f64 * 0.7).sin());
        let mu = 0.3;
        let settings = TikhonovSettings {
            sigma: 0.1,
            mu0: mu,
            max_iter: 1,
            ..Default::default()
        };
        let r = augmented_tikhonov(&LinearMap::new(m.clone()), &d, &settings, &DVector::zeros(5)).unwrap();
        let oracle = (m.transpose() * &m + DMatrix::identity(5, 5) * mu)
            .lu()
            .solve(&(m.transpose() * &d))
            .unwrap();
        assert!((r.v - oracle).amax() < 1e-10);
    }

    #[test]
    fn exact_data_terminates_immediately() {
        let m = random_matrix(4, 2, 3);
        let v0 = DVector::from_vec(vec![0.5, -0.5]);
        let d = &m * &v0;
        let r = augmented_tikhonov(&LinearMap::new(m), &d, &TikhonovSettings::default(), &v0).unwrap();
        assert_eq!(r.trace.len(), 1);
        assert!(r.trace[0].step_norm < 1e-12 && r.converged);
    }

    #[test]
    fn misfit_nonincreasing_for_linear_map_at_fixed_mu() {
        let m = random_matrix(15, 4, 11);
        let d = DVector::from_fn(15, |i, _| 1.0 + 0.1 * i as f64);
        // b huge and a tuned so lambda stays put: iterate with a tiny hyperprior influence.
        let settings = TikhonovSettings {
            sigma: 0.1,
            a: 1.0,
            b: 1e12,
            mu0: 1e-3,
            max_iter: 8,
            tol: 0.0,
            ..Default::default()
        };
        let r = augmented_tikhonov(&LinearMap::new(m), &d, &settings, &DVector::zeros(4)).unwrap();
        for w in r.trace.windows(2) {
            assert!(w[1].misfit <= w[0].misfit * (1.0 + 1e-12));
        }
        assert!(r.trace.iter().all(|t| t.lambda > 0.0));
    }

    #[test]
    fn irls_fixed_point_on_linear_problem() {
        let m = random_matrix(20, 6, 5);
        let truth = DVector::from_vec(vec![1.0, 0.0, -2.0, 0.0, 0.5, 0.0]);
        let d = &m * &truth;
        let settings = IrlsSettings {
            sigma: 0.05,
            mu: 0.05,
            eps: 1e-6,
            max_iter: 500,
            tol: 1e-13,
            ..Default::default()
        };
        let r = irls(&LinearMap::new(m.clone()), &d, &settings, &DVector::from_element(6, 0.1)).unwrap();
        let w = irls_weights(&r.v, settings.eps);
        let lhs = (m.transpose() * &m + DMatrix::from_diagonal(&(w * settings.mu))) * &r.v;
        let residual = (lhs - m.transpose() * &d).norm();
        assert!(residual < 1e-8, "residual {residual}");
        assert!((r.lambda - 0.05 / (2.0 * 0.05 * 0.05)).abs() < 1e-12);
    }

    #[test]
    fn irls_zero_data_stays_zero() {
        let m = random_matrix(5, 3, 9);
        let r = irls(&LinearMap::new(m), &DVector::zeros(5), &IrlsSettings::default(), &DVector::zeros(3)).unwrap();
        assert!(r.v.iter().all(|x| *x == 0.0));
    }

    #[test]
    fn smoothed_penalty_exact_without_smoothing() {
        let v = DVector::from_vec(vec![1.5, -0.25, 3.0]);
        assert!((smoothed_l1(&v, 0.0) - v.lp_norm(1)).abs() < 1e-14);
    }

    proptest! {
        #[test]
        fn smoothed_penalty_within_bound(v in proptest::collection::vec(-5.0f64..5.0, 1..40),
                                         eps in 1e-10f64..1e-2) {
            let v = DVector::from_vec(v);
            let gap = (smoothed_l1(&v, eps) - v.lp_norm(1)).abs();
            prop_assert!(gap <= v.len() as f64 * eps.sqrt());
        }
    }
}
