//! Chain and ensemble diagnostics: autocorrelation, IACT-based ESS, Gaussian-fit
//! KL divergence, moments, weight tables and interval bands.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{check_len, Error, Result};

fn check_series(series: &[DVector<f64>], max_lag: usize) -> Result<usize> {
    if series.len() <= max_lag {
        return Err(Error::InvalidArgument(format!(
            "series of length {} is too short for lag {max_lag}",
            series.len()
        )));
    }
    let dim = series[0].len();
    for s in series {
        check_len("series element", dim, s.len())?;
    }
    Ok(dim)
}

fn mean_of(series: &[DVector<f64>], dim: usize) -> DVector<f64> {
    series.iter().fold(DVector::zeros(dim), |acc, s| acc + s) / series.len() as f64
}

/// `rho_k = sum_t (M_t - mu)^T (M_{t+k} - mu) / sum_t |M_t - mu|^2` for `k = 0..=max_lag`.
pub fn acf(series: &[DVector<f64>], max_lag: usize) -> Result<Vec<f64>> {
    let dim = check_series(series, max_lag)?;
    let mu = mean_of(series, dim);
    let centered: Vec<DVector<f64>> = series.iter().map(|s| s - &mu).collect();
    let var: f64 = centered.iter().map(|c| c.norm_squared()).sum();
    if !(var > 0.0) {
        return Err(Error::ZeroVariance("series"));
    }
    Ok((0..=max_lag)
        .map(|k| {
            let cov: f64 = centered[..centered.len() - k]
                .iter()
                .zip(&centered[k..])
                .map(|(a, b)| a.dot(b))
                .sum();
            cov / var
        })
        .collect())
}

/// Integrated autocorrelation time of a scalar ACF, truncated at the first
/// nonpositive pair sum `rho_{2m} + rho_{2m+1}`.
pub fn iact_from_acf(rho: &[f64]) -> f64 {
    let mut tau = -1.0;
    for pair in rho.chunks_exact(2) {
        let g = pair[0] + pair[1];
        if g <= 0.0 {
            break;
        }
        tau += 2.0 * g;
    }
    // a first pair sum <= 0 means the chain is anticorrelated at lag 1
    tau.max(f64::EPSILON)
}

/// Averaged integrated autocorrelation time over coordinates and `N_s / rho_bar`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChainEss {
    pub iact: f64,
    pub ess: f64,
}

pub fn iact_ess(chain: &[DVector<f64>], max_lag: usize) -> Result<ChainEss> {
    let dim = check_series(chain, max_lag)?;
    let mut total = 0.0;
    for d in 0..dim {
        let coord: Vec<DVector<f64>> = chain.iter().map(|s| DVector::from_element(1, s[d])).collect();
        total += iact_from_acf(&acf(&coord, max_lag)?);
    }
    let iact = total / dim as f64;
    Ok(ChainEss {
        iact,
        ess: chain.len() as f64 / iact,
    })
}

/// Weighted sample mean and covariance.
#[derive(Debug, Clone)]
pub struct GaussianFit {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

fn uniform(n: usize) -> Vec<f64> {
    vec![1.0 / n as f64; n]
}

/// Moment fit with normalized weights; the covariance uses the
/// reliability-weight correction `1 / (1 - sum w^2)`.
pub fn fit_gaussian(samples: &[DVector<f64>], weights: Option<&[f64]>) -> Result<GaussianFit> {
    let dim = check_series(samples, 1)?;
    let w = weights.map_or_else(|| uniform(samples.len()), <[f64]>::to_vec);
    check_len("weights", samples.len(), w.len())?;
    let mut mean = DVector::zeros(dim);
    for (s, wi) in samples.iter().zip(&w) {
        mean.axpy(*wi, s, 1.0);
    }
    let mut cov = DMatrix::zeros(dim, dim);
    for (s, wi) in samples.iter().zip(&w) {
        let d = s - &mean;
        cov.ger(*wi, &d, &d, 1.0);
    }
    let sw2: f64 = w.iter().map(|x| x * x).sum();
    if sw2 < 1.0 {
        cov /= 1.0 - sw2;
    }
    Ok(GaussianFit { mean, cov })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KlEstimate {
    pub value: f64,
    /// True when a fitted covariance needed a diagonal shift to be invertible.
    pub regularized: bool,
}

fn regularize(cov: &DMatrix<f64>) -> (DMatrix<f64>, bool) {
    let eig = cov.clone().symmetric_eigen();
    let top = eig.eigenvalues.max();
    if eig.eigenvalues.min() > 1e-12 * top && top > 0.0 {
        return (cov.clone(), false);
    }
    let n = cov.nrows();
    let shift = 1e-10 * (cov.trace() / n as f64).max(f64::MIN_POSITIVE);
    (cov + DMatrix::identity(n, n) * shift, true)
}

/// `KL(N_a || N_b)` between two moment fits.
pub fn gaussian_kl_fits(a: &GaussianFit, b: &GaussianFit) -> Result<KlEstimate> {
    let d = a.mean.len();
    check_len("fit dimension", d, b.mean.len())?;
    if a.mean == b.mean && a.cov == b.cov {
        return Ok(KlEstimate {
            value: 0.0,
            regularized: false,
        });
    }
    let (ca, ra) = regularize(&a.cov);
    let (cb, rb) = regularize(&b.cov);
    let chol_a = ca.cholesky().ok_or_else(|| Error::Singular("first covariance fit".into()))?;
    let chol_b = cb.cholesky().ok_or_else(|| Error::Singular("second covariance fit".into()))?;
    let logdet = |l: &DMatrix<f64>| 2.0 * l.diagonal().iter().map(|x| x.ln()).sum::<f64>();
    let dm = &b.mean - &a.mean;
    let trace = chol_b.solve(&(chol_a.l() * chol_a.l().transpose())).trace();
    let quad = dm.dot(&chol_b.solve(&dm));
    let value: f64 = 0.5 * (trace + quad - d as f64 + logdet(&chol_b.l()) - logdet(&chol_a.l()));
    Ok(KlEstimate {
        value: value.max(0.0),
        regularized: ra || rb,
    })
}

/// Gaussian-fit `KL(A || B)` between two equally weighted sample sets.
pub fn gaussian_kl(a: &[DVector<f64>], b: &[DVector<f64>]) -> Result<KlEstimate> {
    let dim = a.first().map_or(0, |s| s.len());
    for (name, set) in [("first sample set", a), ("second sample set", b)] {
        if set.len() < dim + 2 {
            return Err(Error::InvalidArgument(format!("{name} needs at least {} samples", dim + 2)));
        }
    }
    gaussian_kl_fits(&fit_gaussian(a, None)?, &fit_gaussian(b, None)?)
}

/// Per-coordinate summary statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub skewness: Vec<f64>,
    /// Excess kurtosis, zero for a Gaussian.
    pub kurtosis: Vec<f64>,
}

/// Moments from central sums; with `weights` the sums are weighted.
///
/// The standard deviation uses the unbiased variance for equal weights and the
/// reliability-weight correction otherwise. Skewness and kurtosis use the
/// plain moment ratios.
pub fn moments(samples: &[DVector<f64>], weights: Option<&[f64]>) -> Result<Moments> {
    if samples.len() < 4 {
        return Err(Error::InvalidArgument("moments need at least 4 samples".into()));
    }
    let dim = check_series(samples, 0)?;
    let w = weights.map_or_else(|| uniform(samples.len()), <[f64]>::to_vec);
    check_len("weights", samples.len(), w.len())?;
    let sw2: f64 = w.iter().map(|x| x * x).sum();
    let mut out = Moments {
        mean: Vec::with_capacity(dim),
        std: Vec::with_capacity(dim),
        skewness: Vec::with_capacity(dim),
        kurtosis: Vec::with_capacity(dim),
    };
    for d in 0..dim {
        let mu: f64 = samples.iter().zip(&w).map(|(s, wi)| wi * s[d]).sum();
        let central = |p: i32| -> f64 { samples.iter().zip(&w).map(|(s, wi)| wi * (s[d] - mu).powi(p)).sum() };
        let (m2, m3, m4) = (central(2), central(3), central(4));
        if !(m2 > 0.0) {
            return Err(Error::ZeroVariance("sample coordinate"));
        }
        out.mean.push(mu);
        out.std.push((m2 / (1.0 - sw2)).sqrt());
        out.skewness.push(m3 / m2.powf(1.5));
        out.kurtosis.push(m4 / (m2 * m2) - 3.0);
    }
    Ok(out)
}

/// Weighted Pearson correlation between coordinates `i` and `j`.
pub fn correlation(samples: &[DVector<f64>], weights: Option<&[f64]>, i: usize, j: usize) -> Result<f64> {
    let fit = fit_gaussian(samples, weights)?;
    let dim = fit.mean.len();
    if i >= dim || j >= dim {
        return Err(Error::InvalidArgument(format!("coordinate out of range for dimension {dim}")));
    }
    let denom = (fit.cov[(i, i)] * fit.cov[(j, j)]).sqrt();
    if !(denom > 0.0) {
        return Err(Error::ZeroVariance("sample coordinate"));
    }
    Ok(fit.cov[(i, j)] / denom)
}

/// Lower bucket edges of the weight table; the last bucket is `[1e-1, 1]`.
pub const WEIGHT_BUCKETS: [f64; 7] = [0.0, 1e-6, 1e-5, 1e-4, 1e-3, 1e-2, 1e-1];

pub fn weight_histogram(weights: &[f64]) -> [usize; 7] {
    let mut counts = [0; 7];
    for &w in weights {
        let b = WEIGHT_BUCKETS.iter().rposition(|&lo| w >= lo).unwrap_or(0);
        counts[b] += 1;
    }
    counts
}

/// Linear-interpolation percentile (R type 7) of sorted data, `p` in `[0, 1]`.
pub fn percentile_sorted(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Pointwise credible and prediction bands.
#[derive(Debug, Clone, PartialEq)]
pub struct IntervalBand {
    pub credible_lower: Vec<f64>,
    pub credible_upper: Vec<f64>,
    pub prediction_lower: Vec<f64>,
    pub prediction_upper: Vec<f64>,
}

/// Bands from model realizations at the probe locations.
///
/// Prediction percentiles use one `N(0, sigma^2)` draw per realization and
/// location, then widen to cover the credible band.
pub fn intervals(realizations: &[DVector<f64>], sigma: f64, level: f64, seed: u64) -> Result<IntervalBand> {
    if realizations.len() < 100 {
        return Err(Error::InvalidArgument("intervals need at least 100 realizations".into()));
    }
    if !(0.0 < level && level < 1.0) || !(sigma >= 0.0) {
        return Err(Error::InvalidArgument(format!("bad level {level} or noise {sigma}")));
    }
    let n = check_series(realizations, 0)?;
    let (lo_p, hi_p) = ((1.0 - level) / 2.0, (1.0 + level) / 2.0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise: Vec<Vec<f64>> = realizations
        .iter()
        .map(|_| (0..n).map(|_| sigma * rng.sample::<f64, _>(StandardNormal)).collect())
        .collect();
    let mut band = IntervalBand {
        credible_lower: Vec::with_capacity(n),
        credible_upper: Vec::with_capacity(n),
        prediction_lower: Vec::with_capacity(n),
        prediction_upper: Vec::with_capacity(n),
    };
    for j in 0..n {
        let mut clean: Vec<f64> = realizations.iter().map(|r| r[j]).collect();
        let mut noisy: Vec<f64> = clean.iter().zip(&noise).map(|(v, e)| v + e[j]).collect();
        clean.sort_by(f64::total_cmp);
        noisy.sort_by(f64::total_cmp);
        let (cl, cu) = (percentile_sorted(&clean, lo_p), percentile_sorted(&clean, hi_p));
        band.credible_lower.push(cl);
        band.credible_upper.push(cu);
        band.prediction_lower.push(percentile_sorted(&noisy, lo_p).min(cl));
        band.prediction_upper.push(percentile_sorted(&noisy, hi_p).max(cu));
    }
    Ok(band)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn normals(n: usize, dim: usize, seed: u64) -> Vec<DVector<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| DVector::from_iterator(dim, (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal))))
            .collect()
    }

    fn ar1(n: usize, phi: f64, seed: u64) -> Vec<DVector<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = (1.0 - phi * phi).sqrt();
        let mut x: f64 = rng.sample(StandardNormal);
        (0..n)
            .map(|_| {
                let e: f64 = rng.sample(StandardNormal);
                x = phi * x + scale * e;
                DVector::from_element(1, x)
            })
            .collect()
    }

    #[test]
    fn acf_examples() {
        let iid = normals(10_000, 2, 1);
        let rho = acf(&iid, 20).unwrap();
        assert_eq!(rho[0], 1.0);
        assert!(rho[1..].iter().all(|r| r.abs() < 0.05));
        let rho = acf(&ar1(100_000, 0.8, 2), 10).unwrap();
        for (k, r) in rho.iter().enumerate() {
            assert!((r - 0.8f64.powi(k as i32)).abs() < 0.05, "lag {k}: {r}");
        }
        assert!(matches!(acf(&vec![DVector::from_element(2, 3.0); 10], 2), Err(Error::ZeroVariance(_))));
        assert!(acf(&iid[..5], 5).is_err());
    }

    #[test]
    fn iact_examples() {
        let iid = iact_ess(&normals(20_000, 3, 3), 200).unwrap();
        assert!((iid.iact - 1.0).abs() < 0.1 && (iid.ess / 20_000.0 - 1.0).abs() < 0.1);
        let ar = iact_ess(&ar1(200_000, 0.8, 4), 500).unwrap();
        assert!((ar.iact - 9.0).abs() < 0.9, "{}", ar.iact);
        assert!(iact_ess(&vec![DVector::from_element(1, 1.0); 50], 5).is_err());
    }

    #[test]
    fn kl_examples() {
        let a = normals(500, 2, 5);
        assert_eq!(gaussian_kl(&a, &a).unwrap().value, 0.0);
        let n = 200_000;
        let x = normals(n, 1, 6);
        let y: Vec<_> = normals(n, 1, 7).into_iter().map(|v| v.add_scalar(1.0)).collect();
        assert!((gaussian_kl(&x, &y).unwrap().value - 0.5).abs() < 0.02);
        let wide: Vec<_> = normals(n, 1, 8).into_iter().map(|v| v * 3.0).collect();
        let ab = gaussian_kl(&x, &wide).unwrap().value;
        let ba = gaussian_kl(&wide, &x).unwrap().value;
        // closed forms for N(0,1) vs N(0,9)
        assert!((ab - 0.5 * (1.0 / 9.0 - 1.0 + 9f64.ln())).abs() < 0.02);
        assert!((ba - 0.5 * (9.0 - 1.0 - 9f64.ln())).abs() < 0.05);
        let flat: Vec<_> = (0..10).map(|i| DVector::from_vec(vec![i as f64, 0.0])).collect();
        let est = gaussian_kl(&flat, &a).unwrap();
        assert!(est.regularized && est.value.is_finite());
        assert!(gaussian_kl(&a[..3], &a).is_err());
    }

    #[test]
    fn moment_examples() {
        let pm: Vec<_> = [-1.0, 1.0, -1.0, 1.0].iter().map(|v| DVector::from_element(1, *v)).collect();
        let m = moments(&pm, None).unwrap();
        assert_eq!(m.skewness[0], 0.0);
        assert_eq!(m.kurtosis[0], -2.0);
        let m = moments(&normals(100_000, 2, 9), None).unwrap();
        for d in 0..2 {
            assert!(m.skewness[d].abs() < 0.05 && m.kurtosis[d].abs() < 0.05);
            assert!((m.std[d] - 1.0).abs() < 0.01);
        }
        // exponential(1): skewness 2, excess kurtosis 6
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let e: Vec<_> = (0..400_000)
            .map(|_| DVector::from_element(1, -(1.0 - rng.random::<f64>()).ln()))
            .collect();
        let m = moments(&e, None).unwrap();
        assert!((m.skewness[0] - 2.0).abs() < 0.1 && (m.kurtosis[0] - 6.0).abs() < 0.6);
        assert!(moments(&pm[..3], None).is_err());
        // weights equivalent to duplication
        let s: Vec<_> = [0.0, 1.0, 5.0, 2.0].iter().map(|v| DVector::from_element(1, *v)).collect();
        let dup: Vec<_> = [0.0, 0.0, 1.0, 5.0, 2.0, 2.0].iter().map(|v| DVector::from_element(1, *v)).collect();
        let w = [2.0 / 6.0, 1.0 / 6.0, 1.0 / 6.0, 2.0 / 6.0];
        let (a, b) = (moments(&s, Some(&w)).unwrap(), moments(&dup, None).unwrap());
        assert!((a.mean[0] - b.mean[0]).abs() < 1e-14 && (a.skewness[0] - b.skewness[0]).abs() < 1e-12);
    }

    #[test]
    fn correlation_sign() {
        let base = normals(5000, 2, 11);
        let anti: Vec<_> = base.iter().map(|v| DVector::from_vec(vec![v[0], -v[0] + 0.1 * v[1]])).collect();
        assert!(correlation(&anti, None, 0, 1).unwrap() < -0.99);
    }

    #[test]
    fn histogram_examples() {
        assert_eq!(weight_histogram(&[1.0 / 5000.0; 5000]), [0, 0, 0, 5000, 0, 0, 0]);
        let mut one_hot = vec![0.0; 100];
        one_hot[7] = 1.0;
        assert_eq!(weight_histogram(&one_hot), [99, 0, 0, 0, 0, 0, 1]);
        assert_eq!(weight_histogram(&[1e-6, 1e-1, 9.9e-2]), [0, 1, 0, 0, 0, 1, 1]);
    }

    #[test]
    fn interval_examples() {
        let same = vec![DVector::from_vec(vec![1.0, -2.0]); 200];
        let b = intervals(&same, 0.0, 0.95, 1).unwrap();
        assert_eq!(b.credible_lower, b.credible_upper);
        assert_eq!(b.prediction_lower, b.credible_lower);
        let b = intervals(&vec![DVector::from_element(1, 0.5); 100_000], 0.1, 0.95, 2).unwrap();
        assert!((b.prediction_upper[0] - (0.5 + 0.196)).abs() < 0.005);
        assert!((b.prediction_lower[0] - (0.5 - 0.196)).abs() < 0.005);
        assert!(intervals(&same[..50], 0.1, 0.95, 1).is_err());
    }

    #[test]
    fn prediction_band_coverage() {
        // y = m + noise with m ~ N(0, 0.2^2) per location
        let sigma = 0.1;
        let post: Vec<_> = normals(2000, 5, 12).into_iter().map(|v| v * 0.2).collect();
        let band = intervals(&post, sigma, 0.95, 13).unwrap();
        let fresh = normals(4000, 5, 14);
        let noise = normals(4000, 5, 15);
        let mut hit = 0;
        for (m, e) in fresh.iter().zip(&noise) {
            for j in 0..5 {
                let y = 0.2 * m[j] + sigma * e[j];
                hit += usize::from(band.prediction_lower[j] <= y && y <= band.prediction_upper[j]);
            }
        }
        assert!(hit as f64 / 20_000.0 >= 0.9);
    }

    #[test]
    fn percentile_type7() {
        let s = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(percentile_sorted(&s, 0.0), 1.0);
        assert_eq!(percentile_sorted(&s, 1.0), 4.0);
        assert!((percentile_sorted(&s, 0.5) - 2.5).abs() < 1e-15);
        assert!((percentile_sorted(&s, 0.25) - 1.75).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn histogram_is_exhaustive(w in proptest::collection::vec(0.0f64..=1.0, 1..200)) {
            prop_assert_eq!(weight_histogram(&w).iter().sum::<usize>(), w.len());
        }

        #[test]
        fn kl_nonnegative(seed_a in 0u64..500, seed_b in 500u64..1000, shift in -2.0f64..2.0) {
            let a = normals(40, 2, seed_a);
            let b: Vec<_> = normals(40, 2, seed_b).into_iter().map(|v| v.add_scalar(shift)).collect();
            prop_assert!(gaussian_kl(&a, &b).unwrap().value >= 0.0);
        }

        #[test]
        fn prediction_contains_credible(seed in 0u64..200, sigma in 0.0f64..1.0) {
            let r = normals(120, 3, seed);
            let b = intervals(&r, sigma, 0.95, seed).unwrap();
            for j in 0..3 {
                prop_assert!(b.prediction_lower[j] <= b.credible_lower[j]);
                prop_assert!(b.prediction_upper[j] >= b.credible_upper[j]);
                prop_assert!(b.credible_lower[j] <= b.credible_upper[j]);
            }
        }
    }
}
