//! Parametrizations of the unknown inputs and the negative log posterior.

use std::io::{BufRead, BufWriter, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::mesh::{CellField, RectGrid};

/// Separable squared-exponential covariance
/// `rho^2 exp(-(dx)^2 / (2 l1^2) - (dy)^2 / (2 l2^2))`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CovarianceSpec {
    pub rho: f64,
    pub l1: f64,
    pub l2: f64,
}

impl CovarianceSpec {
    pub fn new(rho: f64, l1: f64, l2: f64) -> Result<Self> {
        let spec = CovarianceSpec { rho, l1, l2 };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("rho", self.rho), ("l1", self.l1), ("l2", self.l2)] {
            if !(v > 0.0) {
                return Err(Error::InvalidArgument(format!("covariance {name} must be positive, got {v}")));
            }
        }
        Ok(())
    }

    pub fn eval(&self, p: [f64; 2], q: [f64; 2]) -> f64 {
        let dx = p[0] - q[0];
        let dy = p[1] - q[1];
        self.rho
            * self.rho
            * (-dx * dx / (2.0 * self.l1 * self.l1) - dy * dy / (2.0 * self.l2 * self.l2)).exp()
    }
}

/// Eigenpairs of a 1-D correlation matrix on equispaced points, descending.
fn axis_eigen(n: usize, h: f64, origin: f64, l: f64) -> (Vec<f64>, DMatrix<f64>) {
    let pts: Vec<f64> = (0..n).map(|i| origin + (i as f64 + 0.5) * h).collect();
    let m = DMatrix::from_fn(n, n, |a, b| {
        let d = pts[a] - pts[b];
        (-d * d / (2.0 * l * l)).exp()
    });
    let eig = m.symmetric_eigen();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let values = order.iter().map(|&a| eig.eigenvalues[a]).collect();
    let vectors = DMatrix::from_columns(
        &order.iter().map(|&a| eig.eigenvectors.column(a).into_owned()).collect::<Vec<_>>(),
    );
    (values, vectors)
}

/// All eigenvalues of the covariance matrix sampled at cell centers, descending.
///
/// The matrix is `rho^2 (C_y kron C_x)` in cell ordering, so its spectrum is
/// the set of pairwise products of the two axis spectra.
pub fn kl_spectrum(cov: &CovarianceSpec, grid: &RectGrid) -> Result<Vec<f64>> {
    cov.validate()?;
    let d = grid.domain();
    let (lx, _) = axis_eigen(grid.nx(), grid.hx(), d.x0, cov.l1);
    let (ly, _) = axis_eigen(grid.ny(), grid.hy(), d.y0, cov.l2);
    let r2 = cov.rho * cov.rho;
    let mut all: Vec<f64> = ly.iter().flat_map(|b| lx.iter().map(move |a| r2 * a * b)).collect();
    all.sort_by(|a, b| b.total_cmp(a));
    Ok(all)
}

/// Truncated Karhunen-Loeve basis of a log-field on cell centers.
#[derive(Debug, Clone)]
pub struct KLBasis {
    /// Cells x `l`; column `j` is `sqrt(lambda_j) zeta_j`.
    pub phi: DMatrix<f64>,
    pub eigenvalues: Vec<f64>,
    /// Mean log-field `kappa`, one value per cell.
    pub mean: DVector<f64>,
}

impl KLBasis {
    pub fn len(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn is_empty(&self) -> bool {
        self.eigenvalues.is_empty()
    }

    pub fn n_cells(&self) -> usize {
        self.phi.nrows()
    }

    /// Replace the mean log-field.
    pub fn with_mean(mut self, mean: DVector<f64>) -> Result<Self> {
        check_len("KL mean field", self.n_cells(), mean.len())?;
        self.mean = mean;
        Ok(self)
    }

    /// `Phi v + kappa`.
    pub fn log_field(&self, v: &DVector<f64>) -> Result<DVector<f64>> {
        check_len("KL coefficients", self.len(), v.len())?;
        Ok(&self.phi * v + &self.mean)
    }

    /// `exp(Phi v + kappa)` as a cell field.
    pub fn field(&self, v: &DVector<f64>) -> Result<CellField> {
        Ok(CellField::new(self.log_field(v)?.iter().map(|x| x.exp()).collect()))
    }

    /// Coefficients of the projection of `log field - kappa` onto the basis.
    pub fn coefficients(&self, field: &CellField) -> Result<DVector<f64>> {
        check_len("field", self.n_cells(), field.len())?;
        field.check_positive("field")?;
        let r = DVector::from_iterator(self.n_cells(), field.values().iter().map(|x| x.ln())) - &self.mean;
        let proj = self.phi.transpose() * r;
        Ok(DVector::from_iterator(
            self.len(),
            proj.iter().zip(&self.eigenvalues).map(|(p, l)| p / l),
        ))
    }

    /// Write a header, an eigenvalue row, then one `cell,mean,phi...` row per cell.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let io = |source| Error::Io {
            path: path.display().to_string(),
            source,
        };
        let mut w = BufWriter::new(std::fs::File::create(path).map_err(io)?);
        let cols: Vec<String> = (1..=self.len()).map(|j| format!("phi_{j}")).collect();
        writeln!(w, "row,mean,{}", cols.join(",")).map_err(io)?;
        let ev: Vec<String> = self.eigenvalues.iter().map(|v| format!("{v:e}")).collect();
        writeln!(w, "eigenvalue,,{}", ev.join(",")).map_err(io)?;
        for c in 0..self.n_cells() {
            let row: Vec<String> = self.phi.row(c).iter().map(|v| format!("{v:e}")).collect();
            writeln!(w, "{c},{:e},{}", self.mean[c], row.join(",")).map_err(io)?;
        }
        w.flush().map_err(io)
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let io = |source| Error::Io {
            path: path.display().to_string(),
            source,
        };
        let bad = |what: &str| Error::Config(format!("{}: {what}", path.display()));
        let reader = std::io::BufReader::new(std::fs::File::open(path).map_err(io)?);
        let mut lines = reader.lines().skip(1);
        let parse = |s: &str| s.trim().parse::<f64>().map_err(|_| bad("malformed number"));
        let ev_line = lines.next().ok_or_else(|| bad("missing eigenvalue row"))?.map_err(io)?;
        let eigenvalues = ev_line
            .split(',')
            .skip(2)
            .map(parse)
            .collect::<Result<Vec<f64>>>()?;
        let l = eigenvalues.len();
        let mut mean = Vec::new();
        let mut phi = Vec::new();
        for line in lines {
            let line = line.map_err(io)?;
            if line.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != l + 2 {
                return Err(bad("row length differs from the eigenvalue count"));
            }
            mean.push(parse(f[1])?);
            for v in &f[2..] {
                phi.push(parse(v)?);
            }
        }
        Ok(KLBasis {
            phi: DMatrix::from_row_slice(mean.len(), l, &phi),
            eigenvalues,
            mean: DVector::from_vec(mean),
        })
    }
}

/// Leading `l` KL modes of `cov` on the cell centers of `grid`, zero mean.
pub fn kl_decompose(cov: &CovarianceSpec, grid: &RectGrid, l: usize) -> Result<KLBasis> {
    cov.validate()?;
    let m = grid.n_cells();
    if l == 0 || l > m {
        return Err(Error::InvalidArgument(format!("truncation {l} outside 1..={m}")));
    }
    let d = grid.domain();
    let (lx, ux) = axis_eigen(grid.nx(), grid.hx(), d.x0, cov.l1);
    let (ly, uy) = axis_eigen(grid.ny(), grid.hy(), d.y0, cov.l2);
    let r2 = cov.rho * cov.rho;
    let mut pairs: Vec<(f64, usize, usize)> = Vec::with_capacity(lx.len() * ly.len());
    for (b, vy) in ly.iter().enumerate() {
        for (a, vx) in lx.iter().enumerate() {
            pairs.push((r2 * vx * vy, a, b));
        }
    }
    pairs.sort_by(|p, q| q.0.total_cmp(&p.0));
    let lead = pairs[0].0;
    if !(pairs[l - 1].0 > 1e-12 * lead) {
        return Err(Error::InvalidArgument(format!(
            "truncation {l} exceeds the numerical rank of the covariance"
        )));
    }
    let mut phi = DMatrix::zeros(m, l);
    let mut eigenvalues = Vec::with_capacity(l);
    for (col, &(lambda, a, b)) in pairs[..l].iter().enumerate() {
        let scale = lambda.sqrt();
        for j in 0..grid.ny() {
            for i in 0..grid.nx() {
                phi[(grid.cell_index(i, j), col)] = scale * ux[(i, a)] * uy[(j, b)];
            }
        }
        eigenvalues.push(lambda);
    }
    Ok(KLBasis {
        phi,
        eigenvalues,
        mean: DVector::zeros(m),
    })
}

/// `h(x) = 1/2 + arctan(x) / pi`, a bijection onto `(0, 1)`.
pub fn bounded_transform(x: f64) -> f64 {
    0.5 + x.atan() / std::f64::consts::PI
}

/// Inverse of [`bounded_transform`], defined on the open interval `(0, 1)`.
pub fn bounded_inverse(y: f64) -> Result<f64> {
    if y > 0.0 && y < 1.0 {
        Ok((std::f64::consts::PI * (y - 0.5)).tan())
    } else {
        Err(Error::InvalidArgument(format!("{y} is outside the open interval (0, 1)")))
    }
}

/// Prior family with its hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "lowercase")]
pub enum PriorSpec {
    /// `N(0, lambda^{-1} I)` with `lambda ~ Gamma(a, b)`.
    Gaussian {
        #[serde(default = "default_gamma_a")]
        a: f64,
        #[serde(default = "default_gamma_b")]
        b: f64,
    },
    /// Density proportional to `exp(-lambda ||v||_1)`.
    Laplace { lambda: f64 },
}

fn default_gamma_a() -> f64 {
    1.0
}

fn default_gamma_b() -> f64 {
    1e-4
}

impl Default for PriorSpec {
    fn default() -> Self {
        PriorSpec::Gaussian {
            a: default_gamma_a(),
            b: default_gamma_b(),
        }
    }
}

impl PriorSpec {
    pub fn validate(&self) -> Result<()> {
        match *self {
            PriorSpec::Gaussian { a, b } if a > 0.0 && b >= 0.0 => Ok(()),
            PriorSpec::Laplace { lambda } if lambda > 0.0 => Ok(()),
            other => Err(Error::InvalidArgument(format!("invalid prior hyperparameters {other:?}"))),
        }
    }
}

/// Penalty term of the objective with its weight fixed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Penalty {
    /// `(lambda / 2) ||v||^2`.
    Gaussian { lambda: f64 },
    /// `lambda ||v||_1`.
    Laplace { lambda: f64 },
}

impl Penalty {
    pub fn value(&self, v: &DVector<f64>) -> f64 {
        match *self {
            Penalty::Gaussian { lambda } => 0.5 * lambda * v.norm_squared(),
            Penalty::Laplace { lambda } => lambda * v.lp_norm(1),
        }
    }
}

/// `F(v) = ||H(v) - d||^2 / (2 sigma^2) + penalty(v)`, constants dropped.
#[derive(Debug, Clone)]
pub struct Objective {
    pub data: DVector<f64>,
    pub sigma: f64,
    pub penalty: Penalty,
}

impl Objective {
    pub fn new(data: DVector<f64>, sigma: f64, penalty: Penalty) -> Result<Self> {
        if !(sigma > 0.0) {
            return Err(Error::InvalidArgument(format!("noise level must be positive, got {sigma}")));
        }
        Ok(Objective { data, sigma, penalty })
    }

    /// `||h - d||^2 / (2 sigma^2)` for predicted observations `h`.
    pub fn misfit(&self, predicted: &DVector<f64>) -> Result<f64> {
        check_len("predicted observations", self.data.len(), predicted.len())?;
        Ok((predicted - &self.data).norm_squared() / (2.0 * self.sigma * self.sigma))
    }

    pub fn value(&self, v: &DVector<f64>, predicted: &DVector<f64>) -> Result<f64> {
        Ok(self.misfit(predicted)? + self.penalty.value(v))
    }

    /// Evaluate `F` through a parameter-to-observation map.
    pub fn evaluate<M: crate::model::ForwardMap + ?Sized>(&self, map: &M, v: &DVector<f64>) -> Result<f64> {
        let h = map.evaluate(v)?;
        self.value(v, &h)
    }
}
