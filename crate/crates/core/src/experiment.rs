//! Experiment configuration and the stages shared by the command line and the
//! scaled reproduction tests: synthetic data, MAP, implicit sampling, LMAP and
//! pCN.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diagnostics::{fit_gaussian, gaussian_kl_fits, KlEstimate};
use crate::error::{Error, Result};
use crate::fem::Probe;
use crate::fields::{bounded_inverse, bounded_transform, kl_decompose, CovarianceSpec, KLBasis, Objective, Penalty, PriorSpec};
use crate::gmsfem::{build_offline, CoarseGrid, OfflineBasis, TrainingMerge};
use crate::map::{augmented_tikhonov, irls, irls_weights, sensitivity, Difference, IrlsSettings, MapResult, TikhonovSettings};
use crate::mesh::{CellField, RectGrid, Side};
use crate::model::{side_probes, Affine, Discretization, ForwardMap, FractionalForward, ModelSpec, ParamBlock};
use crate::sampling::{
    hessian_gaussian, hessian_laplace, implicit_sampling, lmap_samples, pcn_mcmc, Chain, PcnSettings, PosteriorSurrogate,
    SampleEnsemble, ScaleChoice,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    /// Fine cells per direction on the unit square.
    pub fine: [usize; 2],
    /// Coarse cells per direction; omit to invert with the fine solver.
    #[serde(default)]
    pub coarse: Option<[usize; 2]>,
    /// Multiscale basis functions per coarse edge.
    #[serde(default = "default_basis")]
    pub basis: usize,
    #[serde(default)]
    pub merge: TrainingMerge,
    /// Prior draws used to train the basis when the diffusion field is unknown.
    #[serde(default = "default_training")]
    pub training: usize,
}

fn default_basis() -> usize {
    6
}

fn default_training() -> usize {
    12
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimeConfig {
    pub dt: f64,
    pub t_end: f64,
}

impl TimeConfig {
    pub fn steps(&self) -> Result<usize> {
        let n = (self.t_end / self.dt).round();
        if !(self.dt > 0.0) || n < 1.0 || (n * self.dt - self.t_end).abs() > 1e-9 * self.t_end {
            return Err(Error::Config(format!(
                "final time {} is not a positive multiple of the step {}",
                self.t_end, self.dt
            )));
        }
        Ok(n as usize)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub gamma: [f64; 2],
    pub source: Affine,
    pub boundary: Affine,
}

/// A cell field given by value, file or KL realization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum FieldSpec {
    Constant {
        value: f64,
    },
    /// One value per cell in cell-index order; the last comma-separated column
    /// of each line is read and a non-numeric first line is skipped.
    File {
        path: PathBuf,
    },
    /// `exp(Phi v + mean)` with `v` given or drawn from `N(0, I)` with the truth seed.
    Kl {
        #[serde(flatten)]
        covariance: CovarianceSpec,
        terms: usize,
        #[serde(default)]
        mean: f64,
        #[serde(default)]
        coefficients: Option<Vec<f64>>,
    },
}

impl Default for FieldSpec {
    fn default() -> Self {
        FieldSpec::Constant { value: 1.0 }
    }
}

impl FieldSpec {
    pub fn realize(&self, grid: &RectGrid, seed: u64, base: &Path) -> Result<CellField> {
        let field = match self {
            FieldSpec::Constant { value } => CellField::constant(grid, *value),
            FieldSpec::File { path } => read_field(&base.join(path), grid.n_cells())?,
            FieldSpec::Kl {
                covariance,
                terms,
                mean,
                coefficients,
            } => {
                let kl = kl_decompose(covariance, grid, *terms)?.with_mean(DVector::from_element(grid.n_cells(), *mean))?;
                let v = match coefficients {
                    Some(c) => DVector::from_column_slice(c),
                    None => standard_normal_vector(*terms, seed),
                };
                kl.field(&v)?
            }
        };
        field.check_positive("configured field")?;
        Ok(field)
    }
}

fn read_field(path: &Path, n: usize) -> Result<CellField> {
    let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut values = Vec::with_capacity(n);
    for (i, line) in text.lines().enumerate() {
        let cell = line.rsplit(',').next().unwrap_or("").trim();
        if cell.is_empty() {
            continue;
        }
        match cell.parse::<f64>() {
            Ok(v) => values.push(v),
            Err(_) if i == 0 => {}
            Err(_) => return Err(Error::Config(format!("{}: line {} is not a number", path.display(), i + 1))),
        }
    }
    if values.len() != n {
        return Err(Error::Config(format!(
            "{} holds {} values for {n} cells",
            path.display(),
            values.len()
        )));
    }
    Ok(CellField::new(values))
}

fn standard_normal_vector(n: usize, seed: u64) -> DVector<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    DVector::from_iterator(n, (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TruthConfig {
    pub alpha: [f64; 2],
    #[serde(default)]
    pub diffusion: FieldSpec,
    #[serde(default)]
    pub reaction: FieldSpec,
}

/// KL parametrization of an unknown log-field.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KlUnknown {
    #[serde(flatten)]
    pub covariance: CovarianceSpec,
    pub terms: usize,
    #[serde(default)]
    pub mean: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UnknownsConfig {
    #[serde(default)]
    pub orders: bool,
    #[serde(default)]
    pub diffusion: Option<KlUnknown>,
    #[serde(default)]
    pub reaction: Option<KlUnknown>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObservationConfig {
    pub sides: Vec<Side>,
    pub times: Vec<f64>,
    #[serde(default = "default_sigma")]
    pub sigma: f64,
    /// Observation file (one value per line); synthesized when absent.
    #[serde(default)]
    pub data: Option<PathBuf>,
}

fn default_sigma() -> f64 {
    0.01
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MapConfig {
    pub initial_orders: [f64; 2],
    /// Initial regularization weight of the Gaussian-prior iteration.
    pub mu0: f64,
    /// Smoothing of the Laplace-prior reweighting.
    pub eps: f64,
    pub max_iter: usize,
    pub tol: f64,
    pub step: f64,
    pub difference: Difference,
}

impl Default for MapConfig {
    fn default() -> Self {
        let t = TikhonovSettings::default();
        MapConfig {
            initial_orders: [0.5, 0.5],
            mu0: t.mu0,
            eps: IrlsSettings::default().eps,
            max_iter: t.max_iter,
            tol: t.tol,
            step: t.step,
            difference: t.difference,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplingConfig {
    pub samples: usize,
    pub scale: ScaleChoice,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        SamplingConfig {
            samples: 1000,
            scale: ScaleChoice::Fixed { scale: 1.0 },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct McmcConfig {
    pub beta: f64,
    pub steps: usize,
    pub burn_in: usize,
    pub max_lag: usize,
}

impl Default for McmcConfig {
    fn default() -> Self {
        McmcConfig {
            beta: 0.05,
            steps: 10_000,
            burn_in: 1000,
            max_lag: 500,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiagnoseConfig {
    /// Resampled members pushed through the model for interval bands.
    pub interval_samples: usize,
    pub level: f64,
    /// Basis counts of the KL-versus-basis sweep; empty skips the sweep.
    pub kl_basis: Vec<usize>,
}

impl Default for DiagnoseConfig {
    fn default() -> Self {
        DiagnoseConfig {
            interval_samples: 200,
            level: 0.95,
            kl_basis: Vec::new(),
        }
    }
}

/// Every random stream used by the pipelines.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Seeds {
    pub truth: u64,
    pub noise: u64,
    pub training: u64,
    pub sampling: u64,
    pub resample: u64,
    pub mcmc: u64,
    pub intervals: u64,
}

impl Default for Seeds {
    fn default() -> Self {
        Seeds::derived(0)
    }
}

impl Seeds {
    /// Distinct seeds derived from one master seed.
    pub fn derived(master: u64) -> Self {
        let s = |k: u64| master.wrapping_mul(1000).wrapping_add(k);
        Seeds {
            truth: s(1),
            noise: s(2),
            training: s(3),
            sampling: s(4),
            resample: s(5),
            mcmc: s(6),
            intervals: s(7),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub name: String,
    pub grid: GridConfig,
    pub time: TimeConfig,
    pub model: ModelConfig,
    pub truth: TruthConfig,
    #[serde(default)]
    pub unknowns: UnknownsConfig,
    pub observations: ObservationConfig,
    #[serde(default)]
    pub prior: PriorSpec,
    #[serde(default)]
    pub map: MapConfig,
    #[serde(default)]
    pub sampling: SamplingConfig,
    #[serde(default)]
    pub mcmc: McmcConfig,
    #[serde(default)]
    pub diagnose: DiagnoseConfig,
    #[serde(default)]
    pub seeds: Seeds,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let [nx, ny] = self.grid.fine;
        if nx == 0 || ny == 0 {
            return Err(Error::Config("fine grid must have cells".into()));
        }
        if let Some([cx, cy]) = self.grid.coarse {
            if cx == 0 || cy == 0 || nx % cx != 0 || ny % cy != 0 {
                return Err(Error::Config(format!(
                    "coarse grid {cx}x{cy} does not divide fine grid {nx}x{ny}"
                )));
            }
        }
        self.time.steps()?;
        if self.unknowns == UnknownsConfig::default() {
            return Err(Error::Config("no unknowns selected".into()));
        }
        if self.observations.sides.is_empty() || self.observations.times.is_empty() {
            return Err(Error::Config("observation sides and times must be nonempty".into()));
        }
        if !(self.observations.sigma > 0.0) {
            return Err(Error::Config("noise level must be positive".into()));
        }
        if self.sampling.samples == 0 {
            return Err(Error::Config("sample count must be positive".into()));
        }
        self.prior.validate()
    }

    /// Copy with the fine solver used for inversion.
    pub fn fine_variant(&self) -> Self {
        let mut c = self.clone();
        c.grid.coarse = None;
        c
    }

    pub fn with_basis(&self, l_b: usize) -> Self {
        let mut c = self.clone();
        c.grid.basis = l_b;
        c
    }
}

/// Synthetic observations with their noise-free values.
#[derive(Debug, Clone)]
pub struct Synthetic {
    pub clean: DVector<f64>,
    pub data: DVector<f64>,
}

/// A configured inversion: truth, parametrization and forward map.
pub struct Experiment {
    pub config: ExperimentConfig,
    pub grid: RectGrid,
    pub steps: usize,
    pub probes: Vec<Probe>,
    pub truth_diffusion: CellField,
    pub truth_reaction: CellField,
    pub diffusion_kl: Option<Arc<KLBasis>>,
    pub reaction_kl: Option<Arc<KLBasis>>,
    pub basis: Option<Arc<OfflineBasis>>,
    /// Forward map of the inversion (fine or multiscale).
    pub model: FractionalForward,
    base: PathBuf,
}

fn kl_basis(u: &KlUnknown, grid: &RectGrid) -> Result<Arc<KLBasis>> {
    let kl = kl_decompose(&u.covariance, grid, u.terms)?.with_mean(DVector::from_element(grid.n_cells(), u.mean))?;
    Ok(Arc::new(kl))
}

impl Experiment {
    /// Build the experiment; `basis` reuses a stored offline basis.
    pub fn new(config: ExperimentConfig, base: &Path, basis: Option<Arc<OfflineBasis>>) -> Result<Self> {
        config.validate()?;
        let grid = RectGrid::unit(config.grid.fine[0], config.grid.fine[1])?;
        let steps = config.time.steps()?;
        let probes = side_probes(&grid, &config.observations.sides, &config.observations.times, config.time.dt, steps)?;
        let truth_diffusion = config.truth.diffusion.realize(&grid, config.seeds.truth, base)?;
        let truth_reaction = config
            .truth
            .reaction
            .realize(&grid, config.seeds.truth.wrapping_add(1), base)?;
        let diffusion_kl = config.unknowns.diffusion.map(|u| kl_basis(&u, &grid)).transpose()?;
        let reaction_kl = config.unknowns.reaction.map(|u| kl_basis(&u, &grid)).transpose()?;

        let basis = match (config.grid.coarse, basis) {
            (None, _) => None,
            (Some(_), Some(b)) => Some(b),
            (Some([cx, cy]), None) => {
                let coarse = CoarseGrid::new(&grid, cx, cy)?;
                let training = match &diffusion_kl {
                    Some(kl) => (0..config.grid.training.max(1))
                        .map(|r| kl.field(&standard_normal_vector(kl.len(), config.seeds.training.wrapping_add(r as u64))))
                        .collect::<Result<Vec<_>>>()?,
                    None => vec![truth_diffusion.clone()],
                };
                Some(Arc::new(build_offline(&coarse, &training, config.grid.basis, config.grid.merge)?))
            }
        };

        let mut blocks = Vec::new();
        if config.unknowns.orders {
            blocks.push(ParamBlock::Orders);
        }
        if let Some(kl) = &diffusion_kl {
            blocks.push(ParamBlock::Diffusion(kl.clone()));
        }
        if let Some(kl) = &reaction_kl {
            blocks.push(ParamBlock::Reaction(kl.clone()));
        }
        let spec = ModelSpec {
            grid: grid.clone(),
            gamma: config.model.gamma,
            alpha: config.truth.alpha,
            dt: config.time.dt,
            steps,
            source: config.model.source,
            boundary: config.model.boundary,
            diffusion: truth_diffusion.clone(),
            reaction: truth_reaction.clone(),
        };
        let discretization = match &basis {
            Some(b) => Discretization::Multiscale(b.clone()),
            None => Discretization::Fine,
        };
        let model = FractionalForward::new(spec, blocks, probes.clone(), discretization)?;
        Ok(Experiment {
            config,
            grid,
            steps,
            probes,
            truth_diffusion,
            truth_reaction,
            diffusion_kl,
            reaction_kl,
            basis,
            model,
            base: base.to_path_buf(),
        })
    }

    pub fn base_dir(&self) -> &Path {
        &self.base
    }

    pub fn n_params(&self) -> usize {
        self.model.n_params()
    }

    /// Parameter names in vector order.
    pub fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for b in &self.model.blocks {
            match b {
                ParamBlock::Orders => names.extend(["alpha1".to_string(), "alpha2".to_string()]),
                ParamBlock::Diffusion(kl) => names.extend((1..=kl.len()).map(|j| format!("k{j}"))),
                ParamBlock::Reaction(kl) => names.extend((1..=kl.len()).map(|j| format!("q{j}"))),
            }
        }
        names
    }

    /// Parameters in reporting units: orders in `(0, 1)`, KL coefficients as is.
    pub fn physical(&self, v: &DVector<f64>) -> DVector<f64> {
        let mut out = v.clone();
        if self.config.unknowns.orders {
            out[0] = bounded_transform(v[0]);
            out[1] = bounded_transform(v[1]);
        }
        out
    }

    /// The truth expressed in parameter coordinates (KL fields by projection).
    pub fn truth_params(&self) -> Result<DVector<f64>> {
        let mut parts = Vec::new();
        for b in &self.model.blocks {
            match b {
                ParamBlock::Orders => {
                    parts.push(bounded_inverse(self.config.truth.alpha[0])?);
                    parts.push(bounded_inverse(self.config.truth.alpha[1])?);
                }
                ParamBlock::Diffusion(kl) => parts.extend(kl.coefficients(&self.truth_diffusion)?.iter()),
                ParamBlock::Reaction(kl) => parts.extend(kl.coefficients(&self.truth_reaction)?.iter()),
            }
        }
        Ok(DVector::from_vec(parts))
    }

    /// MAP starting point: configured orders and zero KL coefficients.
    pub fn initial_point(&self) -> Result<DVector<f64>> {
        let mut v = DVector::zeros(self.n_params());
        if self.config.unknowns.orders {
            v[0] = bounded_inverse(self.config.map.initial_orders[0])?;
            v[1] = bounded_inverse(self.config.map.initial_orders[1])?;
        }
        Ok(v)
    }

    /// Forward map of the truth with no unknowns, on the fine grid or on the
    /// multiscale space when one is configured and `multiscale` is set.
    pub fn truth_forward(&self, multiscale: bool) -> Result<FractionalForward> {
        let mut spec = self.model.spec.clone();
        spec.diffusion = self.truth_diffusion.clone();
        spec.reaction = self.truth_reaction.clone();
        spec.alpha = self.config.truth.alpha;
        let discretization = match (&self.basis, multiscale) {
            (Some(b), true) => Discretization::Multiscale(b.clone()),
            _ => Discretization::Fine,
        };
        FractionalForward::new(spec, Vec::new(), self.probes.clone(), discretization)
    }

    /// Coarse partition of the multiscale solver, if configured.
    pub fn coarse_grid(&self) -> Result<Option<CoarseGrid>> {
        self.config
            .grid
            .coarse
            .map(|[cx, cy]| CoarseGrid::new(&self.grid, cx, cy))
            .transpose()
    }

    /// Fine-grid observations of the truth plus `N(0, sigma^2)` noise.
    pub fn synthesize(&self) -> Result<Synthetic> {
        let truth = self.truth_forward(false)?;
        let clean = truth.evaluate(&DVector::zeros(0))?;
        let sigma = self.config.observations.sigma;
        let noise = standard_normal_vector(clean.len(), self.config.seeds.noise);
        let data = &clean + noise * sigma;
        Ok(Synthetic { clean, data })
    }

    /// Configured observation file, or synthetic data.
    pub fn observations(&self) -> Result<DVector<f64>> {
        match &self.config.observations.data {
            Some(path) => {
                let values = read_field(&self.base.join(path), self.probes.len())?;
                Ok(DVector::from_column_slice(values.values()))
            }
            None => Ok(self.synthesize()?.data),
        }
    }

    fn laplace_rate(&self) -> Option<f64> {
        match self.config.prior {
            PriorSpec::Laplace { lambda } => Some(lambda),
            PriorSpec::Gaussian { .. } => None,
        }
    }

    pub fn run_map(&self, data: &DVector<f64>) -> Result<MapResult> {
        let m = &self.config.map;
        let sigma = self.config.observations.sigma;
        let v0 = self.initial_point()?;
        match self.config.prior {
            PriorSpec::Gaussian { a, b } => {
                let settings = TikhonovSettings {
                    sigma,
                    a,
                    b,
                    mu0: m.mu0,
                    max_iter: m.max_iter,
                    tol: m.tol,
                    step: m.step,
                    difference: m.difference,
                };
                augmented_tikhonov(&self.model, data, &settings, &v0)
            }
            PriorSpec::Laplace { lambda } => {
                let settings = IrlsSettings {
                    sigma,
                    mu: 2.0 * sigma * sigma * lambda,
                    eps: m.eps,
                    max_iter: m.max_iter,
                    tol: m.tol,
                    step: m.step,
                    difference: m.difference,
                };
                irls(&self.model, data, &settings, &v0)
            }
        }
    }

    /// Posterior objective with the prior weight taken from the MAP stage.
    pub fn objective(&self, data: &DVector<f64>, map_lambda: f64) -> Result<Objective> {
        let penalty = match self.laplace_rate() {
            Some(lambda) => Penalty::Laplace { lambda },
            None => Penalty::Gaussian { lambda: map_lambda },
        };
        Objective::new(data.clone(), self.config.observations.sigma, penalty)
    }

    /// Quadratic surrogate at the MAP point from a fresh sensitivity matrix.
    pub fn surrogate(&self, objective: &Objective, v_map: &DVector<f64>) -> Result<PosteriorSurrogate> {
        let predicted = self.model.evaluate(v_map)?;
        let sens = sensitivity(&self.model, v_map, self.config.map.step, self.config.map.difference, Some(predicted.clone()))?;
        let n = self.model.n_obs();
        let l = self.n_params();
        let sigma2 = objective.sigma * objective.sigma;
        let noise = DMatrix::identity(n, n) * sigma2;
        let hess_inv = match objective.penalty {
            Penalty::Gaussian { lambda } => hessian_gaussian(&sens.matrix, &(DMatrix::identity(l, l) / lambda), &noise)?,
            Penalty::Laplace { lambda } => {
                hessian_laplace(&sens.matrix, &noise, lambda, &irls_weights(v_map, self.config.map.eps))?.1
            }
        };
        PosteriorSurrogate::new(v_map.clone(), objective.value(v_map, &predicted)?, &hess_inv)
    }

    pub fn implicit(&self, surrogate: &PosteriorSurrogate, objective: &Objective, scale: ScaleChoice) -> Result<SampleEnsemble> {
        implicit_sampling(
            surrogate,
            &self.model,
            objective,
            self.config.sampling.samples,
            self.config.seeds.sampling,
            scale,
        )
    }

    pub fn lmap(&self, surrogate: &PosteriorSurrogate) -> Result<SampleEnsemble> {
        lmap_samples(surrogate, self.config.sampling.samples, self.config.seeds.sampling)
    }

    /// pCN chain from `start` with a Gaussian reference measure.
    ///
    /// For the Laplace prior the reference is `N(0, 2 lambda^{-2} I)` and the
    /// prior-to-reference density ratio is folded into the potential.
    pub fn mcmc(&self, objective: &Objective, start: &DVector<f64>) -> Result<Chain> {
        let l = self.n_params();
        let (variance, laplace) = match objective.penalty {
            Penalty::Gaussian { lambda } => (1.0 / lambda, None),
            Penalty::Laplace { lambda } => (2.0 / (lambda * lambda), Some(lambda)),
        };
        let factor = DMatrix::identity(l, l) * variance.sqrt();
        let potential = |v: &DVector<f64>| -> Result<f64> {
            let misfit = objective.misfit(&self.model.evaluate(v)?)?;
            Ok(match laplace {
                Some(lambda) => misfit + lambda * v.lp_norm(1) - v.norm_squared() / (2.0 * variance),
                None => misfit,
            })
        };
        let settings = PcnSettings {
            beta: self.config.mcmc.beta,
            steps: self.config.mcmc.steps,
            seed: self.config.seeds.mcmc,
        };
        pcn_mcmc(potential, &factor, start, &settings)
    }

    /// Model observations at each parameter vector, in parallel.
    pub fn predictions(&self, thetas: &[DVector<f64>]) -> Result<Vec<DVector<f64>>> {
        thetas.par_iter().map(|t| self.model.evaluate(t)).collect()
    }
}

/// MAP, surrogate and weighted ensemble of one inversion.
pub struct Inversion {
    pub map: MapResult,
    pub objective: Objective,
    pub surrogate: PosteriorSurrogate,
    pub ensemble: SampleEnsemble,
}

/// Run MAP and implicit sampling with the configured scale choice.
pub fn invert(exp: &Experiment, data: &DVector<f64>) -> Result<Inversion> {
    let map = exp.run_map(data)?;
    let objective = exp.objective(data, map.lambda)?;
    let surrogate = exp.surrogate(&objective, &map.v)?;
    let ensemble = exp.implicit(&surrogate, &objective, exp.config.sampling.scale)?;
    Ok(Inversion {
        map,
        objective,
        surrogate,
        ensemble,
    })
}

/// One row of the KL-versus-basis sweep.
#[derive(Debug, Clone, Copy)]
pub struct KlPoint {
    pub basis: usize,
    pub kl: KlEstimate,
}

/// Gaussian-fit `KL(multiscale || fine)` of weighted ensembles for each basis
/// count, all inversions sharing the data and sampling seeds.
pub fn kl_sweep(config: &ExperimentConfig, base: &Path, data: &DVector<f64>, levels: &[usize]) -> Result<Vec<KlPoint>> {
    let reference = invert(&Experiment::new(config.fine_variant(), base, None)?, data)?.ensemble;
    let ref_fit = fit_gaussian(&reference.theta, Some(&reference.weights))?;
    levels
        .iter()
        .map(|&l_b| {
            let exp = Experiment::new(config.with_basis(l_b), base, None)?;
            let ens = invert(&exp, data)?.ensemble;
            let fit = fit_gaussian(&ens.theta, Some(&ens.weights))?;
            Ok(KlPoint {
                basis: l_b,
                kl: gaussian_kl_fits(&fit, &ref_fit)?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    const SMALL: &str = r#"
        name = "small"
        [grid]
        fine = [8, 8]
        coarse = [2, 2]
        basis = 3
        [time]
        dt = 0.1
        t_end = 1.0
        [model]
        gamma = [0.2, 0.8]
        source = { c = 10.0 }
        boundary = { c = 1.0 }
        [truth]
        alpha = [0.3, 0.6]
        diffusion = { kind = "kl", rho = 1.0, l1 = 0.2, l2 = 0.2, terms = 6 }
        [unknowns]
        orders = true
        [observations]
        sides = ["left", "right"]
        times = [0.4, 1.0]
        sigma = 0.01
        [sampling]
        samples = 50
    "#;

    fn small() -> ExperimentConfig {
        ExperimentConfig::from_toml(SMALL).unwrap()
    }

    #[test]
    fn config_parses_and_round_trips() {
        let cfg = small();
        assert_eq!(cfg.time.steps().unwrap(), 10);
        assert_eq!(cfg.prior, PriorSpec::default());
        let again = ExperimentConfig::from_toml(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(again, cfg);
    }

    #[test]
    fn config_rejections() {
        let bad_coarse = SMALL.replace("coarse = [2, 2]", "coarse = [3, 3]");
        assert!(matches!(ExperimentConfig::from_toml(&bad_coarse), Err(Error::Config(_))));
        let bad_time = SMALL.replace("t_end = 1.0", "t_end = 1.05");
        assert!(ExperimentConfig::from_toml(&bad_time).is_err());
        let typo = SMALL.replace("samples = 50", "sample = 50");
        assert!(ExperimentConfig::from_toml(&typo).is_err());
        let none = SMALL.replace("orders = true", "orders = false");
        assert!(ExperimentConfig::from_toml(&none).is_err());
    }

    #[test]
    fn noise_free_data_is_reproducible() {
        let mut cfg = small();
        let exp = Experiment::new(cfg.clone(), Path::new("."), None).unwrap();
        let a = exp.synthesize().unwrap();
        let b = exp.synthesize().unwrap();
        assert_eq!(a.data, b.data);
        assert_eq!(a.clean.len(), 8 * 2 * 2);
        cfg.seeds.noise += 1;
        let c = Experiment::new(cfg, Path::new("."), None).unwrap().synthesize().unwrap();
        assert_eq!(a.clean, c.clean);
        assert_ne!(a.data, c.data);
    }

    #[test]
    fn noise_statistics() {
        // sigma estimated from 10^4 draws of the noise stream
        let e = standard_normal_vector(10_000, 77) * 0.01;
        let std = (e.norm_squared() / e.len() as f64).sqrt();
        assert!((std / 0.01 - 1.0).abs() < 0.05);
    }

    #[test]
    fn truth_round_trips_through_parametrization() {
        let mut cfg = small();
        cfg.unknowns.diffusion = Some(KlUnknown {
            covariance: CovarianceSpec::new(1.0, 0.2, 0.2).unwrap(),
            terms: 6,
            mean: 0.0,
        });
        cfg.grid.coarse = None;
        let exp = Experiment::new(cfg, Path::new("."), None).unwrap();
        let v = exp.truth_params().unwrap();
        let decoded = exp.model.decode(&v).unwrap();
        assert!((decoded.alpha[0] - 0.3).abs() < 1e-12 && (decoded.alpha[1] - 0.6).abs() < 1e-12);
        for c in 0..exp.grid.n_cells() {
            assert!((decoded.diffusion[c] / exp.truth_diffusion[c] - 1.0).abs() < 1e-10);
        }
        let h = exp.model.evaluate(&v).unwrap();
        let clean = exp.synthesize().unwrap().clean;
        assert!((h - clean).amax() < 1e-10);
        assert_eq!(exp.param_names()[2], "k1");
    }

    #[test]
    fn file_fields_are_read() {
        let dir = std::env::temp_dir().join(format!("fracbayes-field-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let grid = RectGrid::unit(2, 2).unwrap();
        std::fs::write(dir.join("k.csv"), "cell,value\n0,1.5\n1,2\n2,3\n3,4\n").unwrap();
        let f = FieldSpec::File { path: "k.csv".into() }.realize(&grid, 0, &dir).unwrap();
        assert_eq!(f.values(), &[1.5, 2.0, 3.0, 4.0]);
        std::fs::write(dir.join("short.csv"), "1\n2\n").unwrap();
        assert!(FieldSpec::File { path: "short.csv".into() }.realize(&grid, 0, &dir).is_err());
        std::fs::remove_dir_all(dir).unwrap();
    }
}
