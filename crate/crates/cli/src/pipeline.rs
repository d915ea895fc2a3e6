//! The stages behind each subcommand.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use fracbayes_core::diagnostics::{
    acf, gaussian_kl_fits, fit_gaussian, iact_ess, intervals, moments, correlation, weight_histogram, WEIGHT_BUCKETS,
};
use fracbayes_core::experiment::{kl_sweep, Experiment, ExperimentConfig};
use fracbayes_core::fem::Probe;
use fracbayes_core::gmsfem::OfflineBasis;
use fracbayes_core::mesh::Side;
use fracbayes_core::sampling::{sus_resample, PosteriorSurrogate, SampleEnsemble};
use fracbayes_core::fields::Objective;
use nalgebra::DVector;

use crate::error::{Failure, StageResult};
use crate::output::{num, parse_f64, read_summary, read_table, summary_value, OutputDir};

pub const DATA: &str = "data.csv";
pub const BASIS: &str = "basis.csv";
pub const MAP: &str = "map.csv";
pub const MAP_SUMMARY: &str = "map_summary.csv";
pub const ENSEMBLE: &str = "ensemble.csv";
pub const LMAP: &str = "lmap.csv";
pub const CHAIN: &str = "chain.csv";

/// Everything a stage needs: the effective configuration and the output directory.
pub struct Context {
    pub config: ExperimentConfig,
    /// Directory that relative paths in the configuration are resolved against.
    pub base: PathBuf,
    pub out: OutputDir,
}

fn side_name(side: Option<Side>) -> &'static str {
    match side {
        Some(Side::Left) => "left",
        Some(Side::Right) => "right",
        Some(Side::Bottom) => "bottom",
        Some(Side::Top) => "top",
        None => "interior",
    }
}

fn strings(names: &[&str]) -> Vec<String> {
    names.iter().map(|s| s.to_string()).collect()
}

fn param_header(lead: &[&str], l: usize) -> Vec<String> {
    let mut h = strings(lead);
    h.extend((1..=l).map(|j| format!("v_{j}")));
    h
}

fn summary_rows(pairs: Vec<(&str, String)>) -> Vec<Vec<String>> {
    pairs.into_iter().map(|(k, v)| vec![k.to_string(), v]).collect()
}

fn probe_columns(exp: &Experiment, index: usize, p: &Probe) -> Vec<String> {
    let e = exp.grid.edge(p.edge);
    vec![
        index.to_string(),
        p.edge.to_string(),
        side_name(e.boundary).to_string(),
        num(e.midpoint[0]),
        num(e.midpoint[1]),
        p.step.to_string(),
        num(p.step as f64 * exp.config.time.dt),
    ]
}

const PROBE_HEADER: [&str; 7] = ["probe", "edge", "side", "x", "y", "step", "time"];

impl Context {
    /// Build the experiment, reusing a stored offline basis when one exists.
    pub fn experiment(&mut self, stage: &str) -> StageResult<Experiment> {
        let Some(_) = self.config.grid.coarse else {
            return Ok(Experiment::new(self.config.clone(), &self.base, None)?);
        };
        if let Some(path) = self.out.optional(BASIS, "map")? {
            let grid = fracbayes_core::mesh::RectGrid::unit(self.config.grid.fine[0], self.config.grid.fine[1])?;
            let [cx, cy] = self.config.grid.coarse.expect("checked above");
            let coarse = fracbayes_core::gmsfem::CoarseGrid::new(&grid, cx, cy)?;
            let basis = OfflineBasis::read_csv(&path, &coarse)?;
            return Ok(Experiment::new(self.config.clone(), &self.base, Some(Arc::new(basis)))?);
        }
        let exp = Experiment::new(self.config.clone(), &self.base, None)?;
        if let (Some(basis), Some(coarse)) = (&exp.basis, exp.coarse_grid()?) {
            basis.write_csv(&self.out.path(BASIS), &coarse)?;
            self.out.record_file(BASIS, stage, basis.r_off.nnz())?;
        }
        Ok(exp)
    }

    fn write_data(&mut self, exp: &Experiment, stage: &str) -> StageResult<DVector<f64>> {
        let syn = exp.synthesize()?;
        let mut header = strings(&PROBE_HEADER);
        header.extend(strings(&["clean", "observed"]));
        let rows = exp.probes.iter().enumerate().map(|(i, p)| {
            let mut r = probe_columns(exp, i, p);
            r.push(num(syn.clean[i]));
            r.push(num(syn.data[i]));
            r
        });
        self.out.write_table(DATA, stage, &header, rows.collect::<Vec<_>>())?;
        Ok(syn.data)
    }

    /// Observations from the configured file, a stored `data.csv`, or freshly synthesized.
    fn observations(&mut self, exp: &Experiment, stage: &str) -> StageResult<DVector<f64>> {
        if self.config.observations.data.is_some() {
            return Ok(exp.observations()?);
        }
        match self.out.optional(DATA, "synth")? {
            Some(path) => {
                let (header, rows) = read_table(&path)?;
                let col = header.iter().position(|h| h == "observed").ok_or_else(|| Failure::Malformed {
                    path: path.clone(),
                    reason: "no `observed` column".into(),
                })?;
                let values = rows.iter().map(|r| parse_f64(&path, r.get(col))).collect::<StageResult<Vec<_>>>()?;
                if values.len() != exp.probes.len() {
                    return Err(Failure::Malformed {
                        path,
                        reason: format!("{} observations for {} probes", values.len(), exp.probes.len()),
                    });
                }
                Ok(DVector::from_vec(values))
            }
            None => self.write_data(exp, stage),
        }
    }

    /// MAP point and prior weight written by the `map` stage.
    fn load_map(&self, exp: &Experiment) -> StageResult<(DVector<f64>, f64)> {
        let path = self.out.require(MAP, "map")?;
        let (header, rows) = read_table(&path)?;
        let col = header.iter().position(|h| h == "value").ok_or_else(|| Failure::Malformed {
            path: path.clone(),
            reason: "no `value` column".into(),
        })?;
        let v = rows.iter().map(|r| parse_f64(&path, r.get(col))).collect::<StageResult<Vec<_>>>()?;
        if v.len() != exp.n_params() {
            return Err(Failure::Malformed {
                path,
                reason: format!("{} parameters, the model has {}", v.len(), exp.n_params()),
            });
        }
        let spath = self.out.require(MAP_SUMMARY, "map")?;
        let lambda = summary_value(&spath, &read_summary(&spath)?, "lambda")?;
        Ok((DVector::from_vec(v), lambda))
    }

    fn posterior(&mut self, exp: &Experiment, stage: &str) -> StageResult<(Objective, PosteriorSurrogate)> {
        let (v, lambda) = self.load_map(exp)?;
        let data = self.observations(exp, stage)?;
        let objective = exp.objective(&data, lambda)?;
        let surrogate = exp.surrogate(&objective, &v)?;
        Ok((objective, surrogate))
    }
}

pub fn synth(ctx: &mut Context) -> StageResult<()> {
    let exp = ctx.experiment("synth")?;
    ctx.write_data(&exp, "synth")?;
    Ok(())
}

pub fn forward(ctx: &mut Context) -> StageResult<()> {
    let exp = ctx.experiment("forward")?;
    let none = DVector::zeros(0);
    let fine = exp.truth_forward(false)?.fine_trajectory(&none)?;
    let multi = match &exp.basis {
        Some(_) => Some(exp.truth_forward(true)?.fine_trajectory(&none)?),
        None => None,
    };
    let grid = &exp.grid;
    let dt = ctx.config.time.dt;

    let mut header = strings(&["step", "time", "cell", "x", "y", "pressure_fine"]);
    if multi.is_some() {
        header.push("pressure_multiscale".into());
    }
    let mut rows = Vec::with_capacity(fine.pressure.len() * grid.n_cells());
    for (n, p) in fine.pressure.iter().enumerate() {
        for c in 0..grid.n_cells() {
            let [x, y] = grid.cell_center(c);
            let mut r = vec![(n + 1).to_string(), num((n + 1) as f64 * dt), c.to_string(), num(x), num(y), num(p[c])];
            if let Some(m) = &multi {
                r.push(num(m.pressure[n][c]));
            }
            rows.push(r);
        }
    }
    ctx.out.write_table("trajectory.csv", "forward", &header, rows)?;

    let flux_fine = fracbayes_core::fem::extract_boundary_flux(grid, &fine.velocity, &exp.probes)?;
    let flux_multi = multi
        .as_ref()
        .map(|m| fracbayes_core::fem::extract_boundary_flux(grid, &m.velocity, &exp.probes))
        .transpose()?;
    let mut header = strings(&PROBE_HEADER);
    header.push("flux_fine".into());
    if flux_multi.is_some() {
        header.push("flux_multiscale".into());
    }
    let rows: Vec<_> = exp
        .probes
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let mut r = probe_columns(&exp, i, p);
            r.push(num(flux_fine[i]));
            if let Some(m) = &flux_multi {
                r.push(num(m[i]));
            }
            r
        })
        .collect();
    ctx.out.write_table("flux.csv", "forward", &header, rows)?;

    for (name, field) in [("diffusion.csv", &exp.truth_diffusion), ("reaction.csv", &exp.truth_reaction)] {
        let rows: Vec<_> = (0..grid.n_cells())
            .map(|c| {
                let [x, y] = grid.cell_center(c);
                vec![num(x), num(y), num(field[c])]
            })
            .collect();
        ctx.out.write_table(name, "forward", &strings(&["x", "y", "value"]), rows)?;
    }

    let mut summary = vec![("probes", exp.probes.len().to_string()), ("steps", exp.steps.to_string())];
    if let Some(m) = &flux_multi {
        summary.push(("flux_relative_error", num((m - &flux_fine).norm() / flux_fine.norm())));
        summary.push(("basis_functions", exp.basis.as_ref().map_or(0, |b| b.n_velocity()).to_string()));
    }
    ctx.out.write_table("forward_summary.csv", "forward", &strings(&["key", "value"]), summary_rows(summary))?;
    Ok(())
}

pub fn map(ctx: &mut Context) -> StageResult<()> {
    let exp = ctx.experiment("map")?;
    let data = ctx.observations(&exp, "map")?;
    let result = exp.run_map(&data)?;
    let truth = exp.truth_params()?;
    let physical = exp.physical(&result.v);
    let truth_physical = exp.physical(&truth);
    let rows: Vec<_> = exp
        .param_names()
        .into_iter()
        .enumerate()
        .map(|(j, name)| vec![name, num(result.v[j]), num(physical[j]), num(truth_physical[j])])
        .collect();
    ctx.out.write_table(MAP, "map", &strings(&["param", "value", "physical", "truth"]), rows)?;

    let rows: Vec<_> = result
        .trace
        .iter()
        .map(|t| vec![t.iter.to_string(), num(t.misfit), num(t.lambda), num(t.step_norm)])
        .collect();
    ctx.out
        .write_table("map_trace.csv", "map", &strings(&["iter", "misfit", "lambda", "step_norm"]), rows)?;

    let sigma = ctx.config.observations.sigma;
    let residual = (&result.predicted - &data).norm_squared();
    let n = data.len() as f64;
    let summary = vec![
        ("iterations", result.trace.len().to_string()),
        ("converged", result.converged.to_string()),
        ("lambda", num(result.lambda)),
        ("mu", num(result.mu)),
        ("residual_sq", num(residual)),
        ("noise_level_sq", num(n * sigma * sigma)),
        ("observations", data.len().to_string()),
    ];
    ctx.out.write_table(MAP_SUMMARY, "map", &strings(&["key", "value"]), summary_rows(summary))?;
    Ok(())
}

fn ensemble_rows(ens: &SampleEnsemble) -> Vec<Vec<String>> {
    (0..ens.len())
        .map(|i| {
            let mut r = vec![i.to_string(), num(ens.weights[i]), num(ens.f[i]), num(ens.fhat[i])];
            r.extend(ens.theta[i].iter().map(|x| num(*x)));
            r
        })
        .collect()
}

fn histogram_rows(weights: &[f64]) -> Vec<Vec<String>> {
    let counts = weight_histogram(weights);
    (0..WEIGHT_BUCKETS.len())
        .map(|b| {
            let upper = WEIGHT_BUCKETS.get(b + 1).copied().unwrap_or(1.0);
            vec![num(WEIGHT_BUCKETS[b]), num(upper), counts[b].to_string()]
        })
        .collect()
}

pub fn implicit(ctx: &mut Context) -> StageResult<()> {
    ctx.out.require(MAP, "map")?;
    let exp = ctx.experiment("implicit")?;
    let (objective, surrogate) = ctx.posterior(&exp, "implicit")?;
    let ens = exp.implicit(&surrogate, &objective, ctx.config.sampling.scale)?;
    let l = exp.n_params();
    ctx.out
        .write_table(ENSEMBLE, "implicit", &param_header(&["sample_id", "weight", "F", "Fhat"], l), ensemble_rows(&ens))?;

    let indices = sus_resample(&ens.weights, ctx.config.seeds.resample);
    let rows: Vec<_> = indices
        .iter()
        .enumerate()
        .map(|(k, &i)| {
            let mut r = vec![k.to_string(), i.to_string()];
            r.extend(ens.theta[i].iter().map(|x| num(*x)));
            r
        })
        .collect();
    ctx.out
        .write_table("resampled.csv", "implicit", &param_header(&["sample_id", "source"], l), rows)?;
    ctx.out.write_table(
        "weights_histogram.csv",
        "implicit",
        &strings(&["lower", "upper", "count"]),
        histogram_rows(&ens.weights),
    )?;

    let mean = exp.physical(&ens.weighted_mean());
    let summary = vec![
        ("samples", ens.len().to_string()),
        ("scale", num(ens.scale)),
        ("scale_reached", ens.scale_reached.to_string()),
        ("ess", num(ens.ess)),
        ("flagged", ens.flagged.len().to_string()),
        ("weight_sum", num(ens.weights.iter().sum())),
        ("max_weight", num(ens.weights.iter().copied().fold(0.0, f64::max))),
    ];
    let mut rows = summary_rows(summary);
    rows.extend(exp.param_names().into_iter().zip(mean.iter()).map(|(n, v)| vec![format!("mean_{n}"), num(*v)]));
    ctx.out.write_table("implicit_summary.csv", "implicit", &strings(&["key", "value"]), rows)?;
    Ok(())
}

pub fn lmap(ctx: &mut Context) -> StageResult<()> {
    ctx.out.require(MAP, "map")?;
    let exp = ctx.experiment("lmap")?;
    let (_, surrogate) = ctx.posterior(&exp, "lmap")?;
    let ens = exp.lmap(&surrogate)?;
    let rows: Vec<_> = (0..ens.len())
        .map(|i| {
            let mut r = vec![i.to_string(), num(ens.weights[i]), num(ens.fhat[i])];
            r.extend(ens.theta[i].iter().map(|x| num(*x)));
            r
        })
        .collect();
    ctx.out
        .write_table(LMAP, "lmap", &param_header(&["sample_id", "weight", "Fhat"], exp.n_params()), rows)?;
    Ok(())
}

pub fn mcmc(ctx: &mut Context) -> StageResult<()> {
    ctx.out.require(MAP, "map")?;
    let exp = ctx.experiment("mcmc")?;
    let (v, lambda) = ctx.load_map(&exp)?;
    let data = ctx.observations(&exp, "mcmc")?;
    let objective = exp.objective(&data, lambda)?;
    let chain = exp.mcmc(&objective, &v)?;
    let rows: Vec<_> = chain
        .states
        .iter()
        .zip(&chain.accepted)
        .enumerate()
        .map(|(s, (state, ok))| {
            let mut r = vec![(s + 1).to_string(), u8::from(*ok).to_string()];
            r.extend(state.iter().map(|x| num(*x)));
            r
        })
        .collect();
    ctx.out
        .write_table(CHAIN, "mcmc", &param_header(&["step", "accepted"], exp.n_params()), rows)?;

    let m = &ctx.config.mcmc;
    let kept = chain.states.get(m.burn_in..).unwrap_or(&[]);
    let mut summary = vec![
        ("steps", chain.states.len().to_string()),
        ("burn_in", m.burn_in.to_string()),
        ("acceptance_rate", num(chain.acceptance_rate)),
    ];
    match iact_ess(kept, m.max_lag.min(kept.len().saturating_sub(1))) {
        Ok(e) => {
            summary.push(("iact", num(e.iact)));
            summary.push(("ess", num(e.ess)));
        }
        Err(e) => summary.push(("ess_error", e.to_string())),
    }
    ctx.out.write_table("mcmc_summary.csv", "mcmc", &strings(&["key", "value"]), summary_rows(summary))?;
    Ok(())
}

/// Samples and weights from an ensemble-like table with `v_*` columns.
fn read_samples(path: &Path, weight_col: Option<&str>) -> StageResult<(Vec<DVector<f64>>, Option<Vec<f64>>)> {
    let (header, rows) = read_table(path)?;
    let vcols: Vec<usize> = header.iter().enumerate().filter(|(_, h)| h.starts_with("v_")).map(|(i, _)| i).collect();
    let wcol = weight_col.and_then(|w| header.iter().position(|h| h == w));
    let mut samples = Vec::with_capacity(rows.len());
    let mut weights = Vec::with_capacity(rows.len());
    for r in &rows {
        let v = vcols.iter().map(|&c| parse_f64(path, r.get(c))).collect::<StageResult<Vec<_>>>()?;
        samples.push(DVector::from_vec(v));
        if let Some(c) = wcol {
            weights.push(parse_f64(path, r.get(c))?);
        }
    }
    Ok((samples, wcol.map(|_| weights)))
}

pub fn diagnose(ctx: &mut Context) -> StageResult<()> {
    ctx.out.require(ENSEMBLE, "implicit")?;
    let exp = ctx.experiment("diagnose")?;
    let names = exp.param_names();
    let ens_path = ctx.out.require(ENSEMBLE, "implicit")?;
    let (theta, weights) = read_samples(&ens_path, Some("weight"))?;
    let weights = weights.unwrap_or_default();
    let physical: Vec<_> = theta.iter().map(|v| exp.physical(v)).collect();

    let mut methods: Vec<(&str, Vec<DVector<f64>>, Option<Vec<f64>>)> = vec![("implicit", physical, Some(weights.clone()))];
    if let Some(path) = ctx.out.optional(LMAP, "lmap")? {
        let (s, _) = read_samples(&path, None)?;
        methods.push(("lmap", s.iter().map(|v| exp.physical(v)).collect(), None));
    }
    let mut chain = None;
    if let Some(path) = ctx.out.optional(CHAIN, "mcmc")? {
        let (s, _) = read_samples(&path, None)?;
        let kept: Vec<_> = s.get(ctx.config.mcmc.burn_in..).unwrap_or(&[]).to_vec();
        if kept.len() >= 4 {
            methods.push(("mcmc", kept.iter().map(|v| exp.physical(v)).collect(), None));
        }
        chain = Some(kept);
    }

    let mut moment_rows = Vec::new();
    let mut corr_rows = Vec::new();
    for (method, samples, w) in &methods {
        let m = moments(samples, w.as_deref())?;
        for (j, name) in names.iter().enumerate() {
            moment_rows.push(vec![
                method.to_string(),
                name.clone(),
                num(m.mean[j]),
                num(m.std[j]),
                num(m.skewness[j]),
                num(m.kurtosis[j]),
            ]);
        }
        for i in 0..names.len() {
            for j in i + 1..names.len() {
                let c = correlation(samples, w.as_deref(), i, j).map_or(f64::NAN, |c| c);
                corr_rows.push(vec![method.to_string(), names[i].clone(), names[j].clone(), num(c)]);
            }
        }
    }
    ctx.out.write_table(
        "moments.csv",
        "diagnose",
        &strings(&["method", "param", "mean", "std", "skewness", "excess_kurtosis"]),
        moment_rows,
    )?;
    ctx.out.write_table(
        "correlation.csv",
        "diagnose",
        &strings(&["method", "param_i", "param_j", "correlation"]),
        corr_rows,
    )?;
    ctx.out.write_table(
        "weight_table.csv",
        "diagnose",
        &strings(&["lower", "upper", "count"]),
        histogram_rows(&weights),
    )?;

    let mut summary = vec![("implicit_ess", num(fracbayes_core::sampling::ess(&weights)))];
    if let Some(kept) = &chain {
        let lag = ctx.config.mcmc.max_lag.min(kept.len().saturating_sub(2));
        if lag >= 1 {
            let rho = acf(kept, lag)?;
            let rows: Vec<_> = rho.iter().enumerate().map(|(k, r)| vec![k.to_string(), num(*r)]).collect();
            ctx.out.write_table("acf.csv", "diagnose", &strings(&["lag", "acf"]), rows)?;
            let e = iact_ess(kept, lag)?;
            summary.push(("mcmc_iact", num(e.iact)));
            summary.push(("mcmc_ess", num(e.ess)));
        }
    }

    // Credible and prediction bands from a systematic resample of the ensemble.
    let m = ctx.config.diagnose.interval_samples;
    let picks = sus_resample(&weights, ctx.config.seeds.resample);
    let realizations: Vec<_> = (0..m).map(|k| theta[picks[k * picks.len() / m]].clone()).collect();
    let predictions = exp.predictions(&realizations)?;
    let band = intervals(&predictions, ctx.config.observations.sigma, ctx.config.diagnose.level, ctx.config.seeds.intervals)?;
    let data = ctx.observations(&exp, "diagnose")?;
    let mut header = strings(&PROBE_HEADER);
    header.extend(strings(&["observed", "credible_lower", "credible_upper", "prediction_lower", "prediction_upper"]));
    let rows: Vec<_> = exp
        .probes
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let mut r = probe_columns(&exp, i, p);
            r.extend([
                num(data[i]),
                num(band.credible_lower[i]),
                num(band.credible_upper[i]),
                num(band.prediction_lower[i]),
                num(band.prediction_upper[i]),
            ]);
            r
        })
        .collect();
    ctx.out.write_table("intervals.csv", "diagnose", &header, rows)?;

    if !ctx.config.diagnose.kl_basis.is_empty() {
        let points = kl_sweep(&ctx.config, &ctx.base, &data, &ctx.config.diagnose.kl_basis)?;
        let rows: Vec<_> = points
            .iter()
            .map(|p| vec![p.basis.to_string(), num(p.kl.value), p.kl.regularized.to_string()])
            .collect();
        ctx.out
            .write_table("kl_basis.csv", "diagnose", &strings(&["basis", "kl", "regularized"]), rows)?;
    }
    if let Some((_, lsamples, _)) = methods.iter().find(|(m, _, _)| *m == "lmap") {
        let kl = gaussian_kl_fits(
            &fit_gaussian(lsamples, None)?,
            &fit_gaussian(&methods[0].1, Some(&weights))?,
        )?;
        summary.push(("kl_lmap_implicit", num(kl.value)));
    }
    ctx.out.write_table("diagnose_summary.csv", "diagnose", &strings(&["key", "value"]), summary_rows(summary))?;
    Ok(())
}

