//! Parameter-to-observation maps.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::caputo::{march, MultiTermOrders, MultiTermScheme, Trajectory};
use crate::error::{check_len, Error, Result};
use crate::fem::{assemble_loads, assemble_mixed, ForwardSystem, Loads, Probe};
use crate::fields::{bounded_transform, KLBasis};
use crate::gmsfem::{project_coarse, project_loads, OfflineBasis};
use crate::mesh::{CellField, RectGrid, Side};

/// A map `H: R^l -> R^n` from parameters to predicted observations.
pub trait ForwardMap: Sync {
    fn n_params(&self) -> usize;
    fn n_obs(&self) -> usize;
    fn evaluate(&self, v: &DVector<f64>) -> Result<DVector<f64>>;
}

impl<T: ForwardMap + ?Sized> ForwardMap for &T {
    fn n_params(&self) -> usize {
        (**self).n_params()
    }
    fn n_obs(&self) -> usize {
        (**self).n_obs()
    }
    fn evaluate(&self, v: &DVector<f64>) -> Result<DVector<f64>> {
        (**self).evaluate(v)
    }
}

/// Affine map `M v + offset`.
#[derive(Debug, Clone)]
pub struct LinearMap {
    pub matrix: DMatrix<f64>,
    pub offset: DVector<f64>,
}

impl LinearMap {
    pub fn new(matrix: DMatrix<f64>) -> Self {
        let offset = DVector::zeros(matrix.nrows());
        LinearMap { matrix, offset }
    }
}

impl ForwardMap for LinearMap {
    fn n_params(&self) -> usize {
        self.matrix.ncols()
    }
    fn n_obs(&self) -> usize {
        self.matrix.nrows()
    }
    fn evaluate(&self, v: &DVector<f64>) -> Result<DVector<f64>> {
        check_len("parameters", self.n_params(), v.len())?;
        Ok(&self.matrix * v + &self.offset)
    }
}

/// Wraps a closure as a forward map.
pub struct FnMap<F> {
    n_params: usize,
    n_obs: usize,
    f: F,
}

impl<F> FnMap<F>
where
    F: Fn(&DVector<f64>) -> Result<DVector<f64>> + Sync,
{
    pub fn new(n_params: usize, n_obs: usize, f: F) -> Self {
        FnMap { n_params, n_obs, f }
    }
}

impl<F> ForwardMap for FnMap<F>
where
    F: Fn(&DVector<f64>) -> Result<DVector<f64>> + Sync,
{
    fn n_params(&self) -> usize {
        self.n_params
    }
    fn n_obs(&self) -> usize {
        self.n_obs
    }
    fn evaluate(&self, v: &DVector<f64>) -> Result<DVector<f64>> {
        check_len("parameters", self.n_params, v.len())?;
        let h = (self.f)(v)?;
        check_len("forward output", self.n_obs, h.len())?;
        Ok(h)
    }
}

/// `c + x X + y Y + t T`, used for sources and boundary data.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Affine {
    #[serde(default)]
    pub c: f64,
    #[serde(default)]
    pub x: f64,
    #[serde(default)]
    pub y: f64,
    #[serde(default)]
    pub t: f64,
}

impl Affine {
    pub fn constant(c: f64) -> Self {
        Affine {
            c,
            ..Default::default()
        }
    }

    pub fn eval(&self, x: f64, y: f64, t: f64) -> f64 {
        self.c + self.x * x + self.y * y + self.t * t
    }
}

/// Unknown blocks of the parameter vector, in order.
#[derive(Debug, Clone)]
pub enum ParamBlock {
    /// Two unbounded coordinates mapped to `(alpha_1, alpha_2)` by the bounded transform.
    Orders,
    /// KL coefficients of the log diffusion field.
    Diffusion(Arc<KLBasis>),
    /// KL coefficients of the log reaction field.
    Reaction(Arc<KLBasis>),
}

impl ParamBlock {
    pub fn len(&self) -> usize {
        match self {
            ParamBlock::Orders => 2,
            ParamBlock::Diffusion(kl) | ParamBlock::Reaction(kl) => kl.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn name(&self) -> &'static str {
        match self {
            ParamBlock::Orders => "orders",
            ParamBlock::Diffusion(_) => "diffusion",
            ParamBlock::Reaction(_) => "reaction",
        }
    }
}

/// Spatial discretization used inside the forward map.
#[derive(Debug, Clone)]
pub enum Discretization {
    Fine,
    Multiscale(Arc<OfflineBasis>),
}

/// Physical inputs of the fractional diffusion model.
#[derive(Debug, Clone)]
pub struct ModelSpec {
    pub grid: RectGrid,
    pub gamma: [f64; 2],
    /// Orders used when they are not part of the parameter vector.
    pub alpha: [f64; 2],
    pub dt: f64,
    pub steps: usize,
    pub source: Affine,
    pub boundary: Affine,
    /// Diffusion field used when not parametrized.
    pub diffusion: CellField,
    /// Reaction field used when not parametrized.
    pub reaction: CellField,
}

impl ModelSpec {
    pub fn times(&self) -> Vec<f64> {
        (1..=self.steps).map(|n| n as f64 * self.dt).collect()
    }

    pub fn loads(&self) -> Loads {
        let (f, g) = (self.source, self.boundary);
        assemble_loads(
            &self.grid,
            move |x, y, t| f.eval(x, y, t),
            move |x, y, t| g.eval(x, y, t),
            &self.times(),
        )
    }
}

/// Probes on all fine edges of `sides` at each of `times` (time-major order).
pub fn side_probes(grid: &RectGrid, sides: &[Side], times: &[f64], dt: f64, steps: usize) -> Result<Vec<Probe>> {
    let mut probes = Vec::new();
    for &t in times {
        let step = (t / dt).round();
        if (step * dt - t).abs() > 1e-9 * t.abs().max(1.0) || step < 1.0 || step as usize > steps {
            return Err(Error::InvalidArgument(format!(
                "observation time {t} is not a time level of the march"
            )));
        }
        for &side in sides {
            for e in grid.side_edges(side) {
                probes.push(Probe {
                    edge: e,
                    step: step as usize,
                });
            }
        }
    }
    Ok(probes)
}

/// Boundary-flux observations of the multi-term fractional model.
#[derive(Debug, Clone)]
pub struct FractionalForward {
    pub spec: ModelSpec,
    pub blocks: Vec<ParamBlock>,
    pub probes: Vec<Probe>,
    pub discretization: Discretization,
    loads: Loads,
    fixed_system: Option<ForwardSystem>,
}

/// Physical quantities decoded from a parameter vector.
#[derive(Debug, Clone)]
pub struct DecodedParams {
    pub alpha: [f64; 2],
    pub diffusion: CellField,
    pub reaction: CellField,
}

impl FractionalForward {
    pub fn new(
        spec: ModelSpec,
        blocks: Vec<ParamBlock>,
        probes: Vec<Probe>,
        discretization: Discretization,
    ) -> Result<Self> {
        let n = spec.grid.n_cells();
        check_len("diffusion field", n, spec.diffusion.len())?;
        check_len("reaction field", n, spec.reaction.len())?;
        for b in &blocks {
            if let ParamBlock::Diffusion(kl) | ParamBlock::Reaction(kl) = b {
                check_len("KL basis rows", n, kl.n_cells())?;
            }
        }
        for p in &probes {
            crate::fem::validate_probe(&spec.grid, spec.steps, p)?;
        }
        MultiTermOrders::new(spec.alpha, spec.gamma)?;
        let fine_loads = spec.loads();
        let loads = match &discretization {
            Discretization::Fine => fine_loads,
            Discretization::Multiscale(basis) => project_loads(basis, &fine_loads)?,
        };
        let mut model = FractionalForward {
            spec,
            blocks,
            probes,
            discretization,
            loads,
            fixed_system: None,
        };
        if !model
            .blocks
            .iter()
            .any(|b| matches!(b, ParamBlock::Diffusion(_) | ParamBlock::Reaction(_)))
        {
            model.fixed_system = Some(model.system(&model.spec.diffusion, &model.spec.reaction)?);
        }
        Ok(model)
    }

    pub fn decode(&self, v: &DVector<f64>) -> Result<DecodedParams> {
        check_len("parameters", self.n_params(), v.len())?;
        let mut out = DecodedParams {
            alpha: self.spec.alpha,
            diffusion: self.spec.diffusion.clone(),
            reaction: self.spec.reaction.clone(),
        };
        let mut offset = 0;
        for b in &self.blocks {
            let part = v.rows(offset, b.len()).into_owned();
            match b {
                ParamBlock::Orders => out.alpha = [bounded_transform(part[0]), bounded_transform(part[1])],
                ParamBlock::Diffusion(kl) => out.diffusion = kl.field(&part)?,
                ParamBlock::Reaction(kl) => out.reaction = kl.field(&part)?,
            }
            offset += b.len();
        }
        Ok(out)
    }

    fn system(&self, k: &CellField, q: &CellField) -> Result<ForwardSystem> {
        let fine = assemble_mixed(&self.spec.grid, k, q)?;
        match &self.discretization {
            Discretization::Fine => Ok(fine),
            Discretization::Multiscale(basis) => project_coarse(basis, &fine),
        }
    }

    /// Velocity and pressure on the fine grid at each time level.
    pub fn fine_trajectory(&self, v: &DVector<f64>) -> Result<Trajectory> {
        let p = self.decode(v)?;
        let owned;
        let system = match &self.fixed_system {
            Some(s) => s,
            None => {
                owned = self.system(&p.diffusion, &p.reaction)?;
                &owned
            }
        };
        let scheme = MultiTermScheme::new(
            MultiTermOrders::new(p.alpha, self.spec.gamma)?,
            self.spec.dt,
            self.spec.steps,
        )?;
        let traj = march(system, &scheme, &self.loads, &DVector::zeros(system.n_pressure()))?;
        Ok(match &self.discretization {
            Discretization::Fine => traj,
            Discretization::Multiscale(basis) => {
                let g_t = basis.g_off.transpose();
                Trajectory {
                    velocity: traj.velocity.iter().map(|s| &basis.r_off * s).collect(),
                    pressure: traj.pressure.iter().map(|s| &g_t * s).collect(),
                }
            }
        })
    }

    /// Velocity trajectory on the fine edges at each time level.
    pub fn fine_velocities(&self, v: &DVector<f64>) -> Result<Vec<DVector<f64>>> {
        Ok(self.fine_trajectory(v)?.velocity)
    }
}

impl ForwardMap for FractionalForward {
    fn n_params(&self) -> usize {
        self.blocks.iter().map(ParamBlock::len).sum()
    }

    fn n_obs(&self) -> usize {
        self.probes.len()
    }

    fn evaluate(&self, v: &DVector<f64>) -> Result<DVector<f64>> {
        let vel = self.fine_velocities(v)?;
        crate::fem::extract_boundary_flux(&self.spec.grid, &vel, &self.probes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fields::{bounded_inverse, kl_decompose, CovarianceSpec};
    use crate::gmsfem::{build_offline, CoarseGrid, TrainingMerge};

    fn spec(n: usize) -> ModelSpec {
        let grid = RectGrid::unit(n, n).unwrap();
        ModelSpec {
            diffusion: CellField::from_fn(&grid, |x, y| 1.0 + 3.0 * x * y),
            reaction: CellField::constant(&grid, 1.0),
            grid,
            gamma: [0.2, 0.8],
            alpha: [0.3, 0.6],
            dt: 0.1,
            steps: 10,
            source: Affine::constant(10.0),
            boundary: Affine::constant(1.0),
        }
    }

    #[test]
    fn probes_follow_sides_and_times() {
        let s = spec(4);
        let p = side_probes(&s.grid, &[Side::Left, Side::Right], &[0.4, 1.0], s.dt, s.steps).unwrap();
        assert_eq!(p.len(), 16);
        assert_eq!(p[0].step, 4);
        assert_eq!(p[15].step, 10);
        assert!(side_probes(&s.grid, &[Side::Left], &[0.45], s.dt, s.steps).is_err());
        assert!(side_probes(&s.grid, &[Side::Left], &[1.1], s.dt, s.steps).is_err());
    }

    #[test]
    fn orders_block_matches_direct_model() {
        let s = spec(4);
        let probes = side_probes(&s.grid, &Side::ALL, &[0.5, 1.0], s.dt, s.steps).unwrap();
        let model = FractionalForward::new(s.clone(), vec![ParamBlock::Orders], probes.clone(), Discretization::Fine).unwrap();
        let v = DVector::from_vec(vec![bounded_inverse(0.3).unwrap(), bounded_inverse(0.6).unwrap()]);
        let h = model.evaluate(&v).unwrap();
        let direct = FractionalForward::new(s, vec![], probes, Discretization::Fine).unwrap();
        let h0 = direct.evaluate(&DVector::zeros(0)).unwrap();
        assert!((h - h0).amax() < 1e-12);
        assert!(model.evaluate(&DVector::zeros(3)).is_err());
    }

    #[test]
    fn diffusion_block_decodes_kl_field() {
        let s = spec(6);
        let kl = Arc::new(kl_decompose(&CovarianceSpec::new(0.5, 0.3, 0.3).unwrap(), &s.grid, 4).unwrap());
        let probes = side_probes(&s.grid, &[Side::Bottom], &[1.0], s.dt, s.steps).unwrap();
        let model = FractionalForward::new(
            s,
            vec![ParamBlock::Orders, ParamBlock::Diffusion(kl.clone())],
            probes,
            Discretization::Fine,
        )
        .unwrap();
        assert_eq!(model.n_params(), 6);
        let v = DVector::from_vec(vec![0.0, 0.0, 0.5, -0.5, 0.1, 0.0]);
        let p = model.decode(&v).unwrap();
        assert_eq!(p.alpha, [0.5, 0.5]);
        let expect = kl.field(&v.rows(2, 4).into_owned()).unwrap();
        assert_eq!(p.diffusion.values(), expect.values());
        assert!(model.evaluate(&v).unwrap().iter().all(|x| x.is_finite()));
    }

    #[test]
    fn multiscale_map_approximates_fine_map() {
        let s = spec(12);
        let cg = CoarseGrid::new(&s.grid, 3, 3).unwrap();
        let basis = Arc::new(build_offline(&cg, &[s.diffusion.clone()], 4, TrainingMerge::Union).unwrap());
        let probes = side_probes(&s.grid, &[Side::Left, Side::Right], &[0.4, 1.0], s.dt, s.steps).unwrap();
        let fine = FractionalForward::new(s.clone(), vec![ParamBlock::Orders], probes.clone(), Discretization::Fine).unwrap();
        let ms = FractionalForward::new(s, vec![ParamBlock::Orders], probes, Discretization::Multiscale(basis)).unwrap();
        let v = DVector::from_vec(vec![-0.5, 0.2]);
        let (hf, hm) = (fine.evaluate(&v).unwrap(), ms.evaluate(&v).unwrap());
        assert!((&hf - &hm).norm() < 0.05 * hf.norm(), "{}", (&hf - &hm).norm() / hf.norm());
    }

    #[test]
    fn affine_eval() {
        let g = Affine { c: 1.0, x: -1.0, ..Default::default() };
        assert_eq!(g.eval(0.25, 3.0, 9.0), 0.75);
    }
}
