//! Implicit sampling around the MAP point with tempered importance weights,
//! plus the pCN and linearized-MAP baselines.
//!
//! Samples are `theta = theta_MAP + L^T xi` with `Hess^{-1} = L^T L`, so the
//! quadratic surrogate is `F_hat = phi_F + xi^T xi / 2`. Weights are
//! `exp((F_hat - F) / scale)`, normalized after shifting the exponent by its
//! maximum.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::fields::Objective;
use crate::model::ForwardMap;

fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

fn check_square(what: &'static str, m: &DMatrix<f64>, n: usize) -> Result<()> {
    check_len(what, n, m.nrows())?;
    check_len(what, n, m.ncols())
}

/// `Hess^{-1} = C - C H^T (H C H^T + Gamma)^{-1} H C` for a Gaussian prior.
pub fn hessian_gaussian(hbar: &DMatrix<f64>, prior_cov: &DMatrix<f64>, noise_cov: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let (n, l) = hbar.shape();
    check_square("prior covariance", prior_cov, l)?;
    check_square("noise covariance", noise_cov, n)?;
    let hc = hbar * prior_cov;
    let inner = &hc * hbar.transpose() + noise_cov;
    let solved = symmetrize(&inner)
        .cholesky()
        .ok_or_else(|| Error::Singular("H C H^T + Gamma is not positive definite".into()))?
        .solve(&hc);
    Ok(symmetrize(&(prior_cov - hc.transpose() * solved)))
}

/// `Hess = H^T Gamma^{-1} H + 2 lambda W` and its inverse for a Laplace prior.
pub fn hessian_laplace(
    hbar: &DMatrix<f64>,
    noise_cov: &DMatrix<f64>,
    lambda: f64,
    w: &DVector<f64>,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let (n, l) = hbar.shape();
    check_square("noise covariance", noise_cov, n)?;
    check_len("reweighting diagonal", l, w.len())?;
    if let Some(i) = w.iter().position(|x| !(*x > 0.0)) {
        return Err(Error::InvalidArgument(format!("reweighting diagonal entry {i} is not positive")));
    }
    if !(lambda >= 0.0) {
        return Err(Error::InvalidArgument(format!("Laplace rate must be nonnegative, got {lambda}")));
    }
    let gi_h = noise_cov
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Singular("noise covariance".into()))?
        .solve(hbar);
    let mut hess = hbar.transpose() * gi_h;
    for i in 0..l {
        hess[(i, i)] += 2.0 * lambda * w[i];
    }
    let hess = symmetrize(&hess);
    let eig = hess.clone().symmetric_eigen();
    let top = eig.eigenvalues.amax();
    if eig.eigenvalues.iter().any(|v| !(*v > 1e-12 * top)) || top == 0.0 {
        return Err(Error::Singular("Laplace Hessian is not positive definite".into()));
    }
    let inv = &eig.eigenvectors * DMatrix::from_diagonal(&eig.eigenvalues.map(|v| 1.0 / v)) * eig.eigenvectors.transpose();
    Ok((hess, symmetrize(&inv)))
}

/// Gaussian surrogate of the posterior at the MAP point.
#[derive(Debug, Clone)]
pub struct PosteriorSurrogate {
    pub theta_map: DVector<f64>,
    /// `F(theta_MAP)`.
    pub phi: f64,
    pub hess_inv: DMatrix<f64>,
    /// Upper factor with `L^T L = Hess^{-1}`.
    pub factor: DMatrix<f64>,
}

impl PosteriorSurrogate {
    /// Symmetrize `hess_inv`, clip eigenvalues below `1e-12 lambda_max` and factor.
    pub fn new(theta_map: DVector<f64>, phi: f64, hess_inv: &DMatrix<f64>) -> Result<Self> {
        let l = theta_map.len();
        check_square("inverse Hessian", hess_inv, l)?;
        let eig = symmetrize(hess_inv).symmetric_eigen();
        let top = eig.eigenvalues.max();
        if !(top > 0.0) {
            return Err(Error::Singular("inverse Hessian has no positive eigenvalue".into()));
        }
        let floor = 1e-12 * top;
        let clipped = eig.eigenvalues.map(|v| v.max(floor));
        let hess_inv = symmetrize(&(&eig.eigenvectors * DMatrix::from_diagonal(&clipped) * eig.eigenvectors.transpose()));
        let factor = match hess_inv.clone().cholesky() {
            Some(c) => c.l().transpose(),
            None => DMatrix::from_diagonal(&clipped.map(f64::sqrt)) * eig.eigenvectors.transpose(),
        };
        Ok(PosteriorSurrogate {
            theta_map,
            phi,
            hess_inv,
            factor,
        })
    }

    pub fn dim(&self) -> usize {
        self.theta_map.len()
    }

    /// `theta_MAP + L^T xi`.
    pub fn map_sample(&self, xi: &DVector<f64>) -> DVector<f64> {
        &self.theta_map + self.factor.transpose() * xi
    }

    /// `F_hat` at the sample generated by `xi`.
    pub fn fhat(&self, xi: &DVector<f64>) -> f64 {
        self.phi + 0.5 * xi.norm_squared()
    }
}

/// Standard normal vector for sample `index`, independent of evaluation order.
pub fn standard_normals(seed: u64, index: u64, dim: usize) -> DVector<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    DVector::from_iterator(dim, (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)))
}

/// Proposal draws before weighting.
#[derive(Debug, Clone)]
pub struct RawEnsemble {
    pub theta: Vec<DVector<f64>>,
    pub fhat: Vec<f64>,
}

pub fn draw_samples(surrogate: &PosteriorSurrogate, n: usize, seed: u64) -> Result<RawEnsemble> {
    if n == 0 {
        return Err(Error::InvalidArgument("sample count must be at least 1".into()));
    }
    let (theta, fhat) = (0..n)
        .map(|i| {
            let xi = standard_normals(seed, i as u64, surrogate.dim());
            (surrogate.map_sample(&xi), surrogate.fhat(&xi))
        })
        .unzip();
    Ok(RawEnsemble { theta, fhat })
}

/// `F` at every sample, evaluated in parallel; failed evaluations give NaN.
pub fn evaluate_objective<M: ForwardMap + ?Sized>(map: &M, objective: &Objective, theta: &[DVector<f64>]) -> Vec<f64> {
    theta
        .par_iter()
        .map(|t| objective.evaluate(map, t).unwrap_or(f64::NAN))
        .collect()
}

/// Normalized weights with the indices whose `F` was not finite.
#[derive(Debug, Clone, PartialEq)]
pub struct Weights {
    pub weights: Vec<f64>,
    pub flagged: Vec<usize>,
}

pub fn tempered_weights(fhat: &[f64], f: &[f64], scale: f64) -> Result<Weights> {
    check_len("objective values", fhat.len(), f.len())?;
    if !(scale >= 1.0) {
        return Err(Error::InvalidArgument(format!("scale parameter must be at least 1, got {scale}")));
    }
    let expo: Vec<f64> = fhat.iter().zip(f).map(|(a, b)| (a - b) / scale).collect();
    let flagged: Vec<usize> = (0..expo.len()).filter(|&i| !expo[i].is_finite()).collect();
    let top = expo
        .iter()
        .filter(|x| x.is_finite())
        .fold(f64::NEG_INFINITY, |m, &x| m.max(x));
    if !top.is_finite() {
        return Err(Error::InvalidArgument("no sample has a finite objective value".into()));
    }
    let raw: Vec<f64> = expo
        .iter()
        .map(|&x| if x.is_finite() { (x - top).exp() } else { 0.0 })
        .collect();
    let total: f64 = raw.iter().sum();
    Ok(Weights {
        weights: raw.iter().map(|w| w / total).collect(),
        flagged,
    })
}

/// `1 / sum w_i^2` for normalized weights.
pub fn ess(weights: &[f64]) -> f64 {
    1.0 / weights.iter().map(|w| w * w).sum::<f64>()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScaleSearch {
    /// Unit increments from 1.
    #[default]
    Increment,
    /// Bisection on `[1, 1 + max_iter]` for the smallest real scale reaching the target.
    Bisection,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScaleSelection {
    pub scale: f64,
    pub ess: f64,
    /// False when the target was not reached within the iteration budget.
    pub reached: bool,
    pub iterations: usize,
}

/// Choose the scale parameter so that the ESS reaches `target`.
pub fn select_theta(fhat: &[f64], f: &[f64], target: f64, max_iter: usize, search: ScaleSearch) -> Result<ScaleSelection> {
    if !(target >= 1.0 && target <= fhat.len() as f64) {
        return Err(Error::InvalidArgument(format!(
            "ESS target {target} outside 1..={}",
            fhat.len()
        )));
    }
    let ess_at = |t: f64| tempered_weights(fhat, f, t).map(|w| ess(&w.weights));
    // equal weights can land a few ulps under N
    let target = target * (1.0 - 1e-12);
    match search {
        ScaleSearch::Increment => {
            let mut scale = 1.0;
            let mut e = ess_at(scale)?;
            let mut iterations = 0;
            while e < target && iterations < max_iter {
                scale += 1.0;
                e = ess_at(scale)?;
                iterations += 1;
            }
            Ok(ScaleSelection {
                scale,
                ess: e,
                reached: e >= target,
                iterations,
            })
        }
        ScaleSearch::Bisection => {
            let e1 = ess_at(1.0)?;
            if e1 >= target {
                return Ok(ScaleSelection {
                    scale: 1.0,
                    ess: e1,
                    reached: true,
                    iterations: 0,
                });
            }
            let mut hi = 1.0 + max_iter as f64;
            let ehi = ess_at(hi)?;
            if ehi < target {
                return Ok(ScaleSelection {
                    scale: hi,
                    ess: ehi,
                    reached: false,
                    iterations: 1,
                });
            }
            let mut lo = 1.0;
            let mut iterations = 1;
            while hi - lo > 1e-6 * hi && iterations < 200 {
                let mid = 0.5 * (lo + hi);
                if ess_at(mid)? >= target {
                    hi = mid;
                } else {
                    lo = mid;
                }
                iterations += 1;
            }
            Ok(ScaleSelection {
                scale: hi,
                ess: ess_at(hi)?,
                reached: true,
                iterations,
            })
        }
    }
}

/// Stochastic universal sampling: indices of the copied samples, in order.
pub fn sus_resample(weights: &[f64], seed: u64) -> Vec<usize> {
    let n = weights.len();
    if n == 0 {
        return Vec::new();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let u: f64 = rng.random_range(0.0..1.0 / n as f64);
    let mut out = Vec::with_capacity(n);
    let mut cum = weights[0];
    let mut j = 0;
    for i in 0..n {
        let pointer = u + i as f64 / n as f64;
        while pointer >= cum && j + 1 < n {
            j += 1;
            cum += weights[j];
        }
        out.push(j);
    }
    out
}

/// How the scale parameter of the weights is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "mode")]
pub enum ScaleChoice {
    Fixed { scale: f64 },
    Auto { target: f64, max_iter: usize, #[serde(default)] search: ScaleSearch },
}

/// Weighted posterior ensemble.
#[derive(Debug, Clone)]
pub struct SampleEnsemble {
    pub theta: Vec<DVector<f64>>,
    pub f: Vec<f64>,
    pub fhat: Vec<f64>,
    pub weights: Vec<f64>,
    pub scale: f64,
    pub ess: f64,
    pub flagged: Vec<usize>,
    /// Whether an automatic scale search reached its ESS target.
    pub scale_reached: bool,
}

impl SampleEnsemble {
    pub fn len(&self) -> usize {
        self.theta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.theta.is_empty()
    }

    pub fn weighted_mean(&self) -> DVector<f64> {
        let mut m = DVector::zeros(self.theta.first().map_or(0, |t| t.len()));
        for (t, w) in self.theta.iter().zip(&self.weights) {
            m.axpy(*w, t, 1.0);
        }
        m
    }

    /// Equally weighted copies selected by stochastic universal sampling.
    pub fn resample(&self, seed: u64) -> Vec<DVector<f64>> {
        sus_resample(&self.weights, seed)
            .into_iter()
            .map(|i| self.theta[i].clone())
            .collect()
    }
}

/// Draw, evaluate and weight an implicit-sampling ensemble.
pub fn implicit_sampling<M: ForwardMap + ?Sized>(
    surrogate: &PosteriorSurrogate,
    map: &M,
    objective: &Objective,
    n: usize,
    seed: u64,
    scale: ScaleChoice,
) -> Result<SampleEnsemble> {
    let raw = draw_samples(surrogate, n, seed)?;
    let f = evaluate_objective(map, objective, &raw.theta);
    weigh(raw, f, scale)
}

/// Weight a drawn ensemble whose objective values are already known.
pub fn weigh(raw: RawEnsemble, f: Vec<f64>, scale: ScaleChoice) -> Result<SampleEnsemble> {
    let (scale, reached) = match scale {
        ScaleChoice::Fixed { scale } => (scale, true),
        ScaleChoice::Auto { target, max_iter, search } => {
            let sel = select_theta(&raw.fhat, &f, target, max_iter, search)?;
            (sel.scale, sel.reached)
        }
    };
    let w = tempered_weights(&raw.fhat, &f, scale)?;
    Ok(SampleEnsemble {
        ess: ess(&w.weights),
        theta: raw.theta,
        f,
        fhat: raw.fhat,
        weights: w.weights,
        scale,
        flagged: w.flagged,
        scale_reached: reached,
    })
}

/// Gaussian approximation `N(theta_MAP, Hess^{-1})` with uniform weights.
pub fn lmap_samples(surrogate: &PosteriorSurrogate, n: usize, seed: u64) -> Result<SampleEnsemble> {
    let raw = draw_samples(surrogate, n, seed)?;
    let w = 1.0 / n as f64;
    Ok(SampleEnsemble {
        f: raw.fhat.clone(),
        theta: raw.theta,
        fhat: raw.fhat,
        weights: vec![w; n],
        scale: 1.0,
        ess: n as f64,
        flagged: Vec::new(),
        scale_reached: true,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PcnSettings {
    pub beta: f64,
    pub steps: usize,
    pub seed: u64,
}

impl Default for PcnSettings {
    fn default() -> Self {
        PcnSettings {
            beta: 0.05,
            steps: 10_000,
            seed: 0,
        }
    }
}

/// Markov chain states after each step.
#[derive(Debug, Clone)]
pub struct Chain {
    pub states: Vec<DVector<f64>>,
    pub accepted: Vec<bool>,
    pub acceptance_rate: f64,
}

/// Preconditioned Crank-Nicolson chain for a `N(0, L L^T)` prior.
///
/// `misfit` is the data term only; a non-finite value rejects the proposal.
pub fn pcn_mcmc<P>(misfit: P, prior_factor: &DMatrix<f64>, v0: &DVector<f64>, settings: &PcnSettings) -> Result<Chain>
where
    P: Fn(&DVector<f64>) -> Result<f64>,
{
    let l = v0.len();
    check_square("prior factor", prior_factor, l)?;
    let beta = settings.beta;
    if !(0.0..1.0).contains(&beta) {
        return Err(Error::InvalidArgument(format!("pCN step must lie in [0, 1), got {beta}")));
    }
    let shrink = (1.0 - beta * beta).sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(settings.seed);
    let mut v = v0.clone();
    let mut phi = misfit(&v)?;
    let mut states = Vec::with_capacity(settings.steps);
    let mut accepted = Vec::with_capacity(settings.steps);
    for _ in 0..settings.steps {
        let xi = DVector::from_iterator(l, (0..l).map(|_| rng.sample::<f64, _>(StandardNormal)));
        let proposal = &v * shrink + prior_factor * xi * beta;
        let phi_new = misfit(&proposal).unwrap_or(f64::INFINITY);
        let u: f64 = rng.random();
        let ok = phi_new.is_finite() && u < (phi - phi_new).exp().min(1.0);
        if ok {
            v = proposal;
            phi = phi_new;
        }
        states.push(v.clone());
        accepted.push(ok);
    }
    let acceptance_rate = accepted.iter().filter(|a| **a).count() as f64 / accepted.len().max(1) as f64;
    Ok(Chain {
        states,
        accepted,
        acceptance_rate,
    })
}
