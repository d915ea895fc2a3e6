//! Lowest-order mixed finite elements on rectangles.
//!
//! Velocity unknowns are normal components on edges (one per edge, measured
//! along the edge's normal from [`RectGrid`]); pressure is piecewise constant.
//! For a time-coupling scalar `s` the discrete block system reads
//!
//! ```text
//! [  A     B    ] [sigma]   [ G          ]
//! [ -s B^T C+sD ] [beta ] = [ sF + hist  ]
//! ```
//!
//! with `A_ij = int k^{-1} psi_i . psi_j`, `B_ic = -int_c div psi_i`,
//! `C = diag(|c|)` and `D = diag(q_c |c|)`.

mod saddle;

pub use saddle::{solve_saddle, solve_stationary, BlockVector, SaddleSolver};

use nalgebra::{DMatrix, DVector};
use nalgebra_sparse::{CooMatrix, CsrMatrix};

use crate::error::{check_len, Error, Result};
use crate::mesh::{CellField, EdgeKind, RectGrid};

/// Assembled block operators of the mixed discretization.
///
/// The same type holds fine-grid systems and their multiscale projections;
/// `C` and `D` are diagonal in both cases.
#[derive(Debug, Clone)]
pub struct ForwardSystem {
    pub a: CsrMatrix<f64>,
    pub b: CsrMatrix<f64>,
    pub c: DVector<f64>,
    pub d: DVector<f64>,
}

impl ForwardSystem {
    pub fn n_velocity(&self) -> usize {
        self.a.nrows()
    }

    pub fn n_pressure(&self) -> usize {
        self.c.len()
    }

    /// Block product with the time-coupled operator for scalar `s`.
    pub fn apply(&self, s: f64, x: &BlockVector) -> BlockVector {
        let velocity = &self.a * &x.velocity + &self.b * &x.pressure;
        let bt_sigma = self.b.transpose() * &x.velocity;
        let pressure = DVector::from_iterator(
            self.n_pressure(),
            (0..self.n_pressure())
                .map(|i| -s * bt_sigma[i] + (self.c[i] + s * self.d[i]) * x.pressure[i]),
        );
        BlockVector { velocity, pressure }
    }
}

/// Mass entries of the x- (or y-) directed edge functions on one cell, per unit
/// `k^{-1}`: diagonal `|K|/3`, parallel pair `|K|/6` (times orientation signs).
fn local_mass(area: f64) -> (f64, f64) {
    (area / 3.0, area / 6.0)
}

fn axis_sign(grid: &RectGrid, e: usize) -> f64 {
    let edge = grid.edge(e);
    match edge.kind {
        EdgeKind::Vertical => edge.normal[0],
        EdgeKind::Horizontal => edge.normal[1],
    }
}

/// Assemble `A`, `B`, `C`, `D` for cell-wise diffusion `k` and reaction `q`.
pub fn assemble_mixed(grid: &RectGrid, k: &CellField, q: &CellField) -> Result<ForwardSystem> {
    check_len("diffusion field", grid.n_cells(), k.len())?;
    check_len("reaction field", grid.n_cells(), q.len())?;
    k.check_positive("diffusion")?;
    if let Some(cell) = q.values().iter().position(|v| !v.is_finite()) {
        return Err(Error::NonPositiveField {
            field: "reaction",
            cell,
            value: q[cell],
        });
    }

    let ne = grid.n_edges();
    let nc = grid.n_cells();
    let area = grid.cell_area();
    let (diag, off) = local_mass(area);

    let mut a = CooMatrix::new(ne, ne);
    let mut b = CooMatrix::new(ne, nc);
    for cell in 0..nc {
        let kinv = 1.0 / k[cell];
        let [l, r, bo, t] = grid.cell_edges(cell);
        for (p, m) in [(l, r), (bo, t)] {
            let sp = axis_sign(grid, p);
            let sm = axis_sign(grid, m);
            a.push(p, p, kinv * diag);
            a.push(m, m, kinv * diag);
            a.push(p, m, kinv * off * sp * sm);
            a.push(m, p, kinv * off * sp * sm);
        }
        for e in [l, r, bo, t] {
            let edge = grid.edge(e);
            b.push(e, cell, -edge.outward_sign(cell) * edge.length);
        }
    }

    Ok(ForwardSystem {
        a: CsrMatrix::from(&a),
        b: CsrMatrix::from(&b),
        c: DVector::from_element(nc, area),
        d: DVector::from_iterator(nc, q.values().iter().map(|qc| qc * area)),
    })
}

/// Source and boundary load columns for the time levels `t_1..t_M`.
#[derive(Debug, Clone)]
pub struct Loads {
    /// `F(:, n)`: one row per pressure unknown.
    pub f: DMatrix<f64>,
    /// `G(:, n)`: one row per velocity unknown.
    pub g: DMatrix<f64>,
    pub times: Vec<f64>,
}

impl Loads {
    pub fn steps(&self) -> usize {
        self.times.len()
    }

    /// Load columns for time level `n` (1-based).
    pub fn column(&self, n: usize) -> Result<(DVector<f64>, DVector<f64>)> {
        if n == 0 || n > self.steps() {
            return Err(Error::InvalidArgument(format!(
                "time index {n} outside 1..={}",
                self.steps()
            )));
        }
        Ok((self.f.column(n - 1).into_owned(), self.g.column(n - 1).into_owned()))
    }
}

/// Assemble `F(:, n) = int_c f(., t_n)` and `G(:, n) = -int_{dOmega} g(., t_n) psi . n`.
///
/// `f` is sampled at cell centers and `g` at boundary edge midpoints.
pub fn assemble_loads<S, B>(grid: &RectGrid, source: S, boundary: B, times: &[f64]) -> Loads
where
    S: Fn(f64, f64, f64) -> f64,
    B: Fn(f64, f64, f64) -> f64,
{
    let area = grid.cell_area();
    let mut f = DMatrix::zeros(grid.n_cells(), times.len());
    let mut g = DMatrix::zeros(grid.n_edges(), times.len());
    for (n, &t) in times.iter().enumerate() {
        for c in 0..grid.n_cells() {
            let [x, y] = grid.cell_center(c);
            f[(c, n)] = source(x, y, t) * area;
        }
        for (e, edge) in grid.edges().iter().enumerate() {
            if edge.is_boundary() {
                let [x, y] = edge.midpoint;
                // Boundary normals are outward, so psi_e . n = 1 on its own edge.
                g[(e, n)] = -boundary(x, y, t) * edge.length;
            }
        }
    }
    Loads {
        f,
        g,
        times: times.to_vec(),
    }
}

/// A flux observation: boundary edge and 1-based time level.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Probe {
    pub edge: usize,
    pub step: usize,
}

/// Read the normal flux degree of freedom at each probe.
///
/// `velocities[n - 1]` holds the velocity solution at time level `n`.
pub fn extract_boundary_flux(
    grid: &RectGrid,
    velocities: &[DVector<f64>],
    probes: &[Probe],
) -> Result<DVector<f64>> {
    let mut out = DVector::zeros(probes.len());
    for (p, probe) in probes.iter().enumerate() {
        validate_probe(grid, velocities.len(), probe)?;
        let v = &velocities[probe.step - 1];
        check_len("velocity vector", grid.n_edges(), v.len())?;
        out[p] = v[probe.edge];
    }
    Ok(out)
}

pub(crate) fn validate_probe(grid: &RectGrid, steps: usize, probe: &Probe) -> Result<()> {
    if probe.edge >= grid.n_edges() {
        return Err(Error::InvalidArgument(format!(
            "probe edge {} out of range",
            probe.edge
        )));
    }
    if !grid.edge(probe.edge).is_boundary() {
        return Err(Error::InvalidArgument(format!(
            "probe edge {} is an interior edge",
            probe.edge
        )));
    }
    if probe.step == 0 || probe.step > steps {
        return Err(Error::InvalidArgument(format!(
            "probe time index {} outside 1..={steps}",
            probe.step
        )));
    }
    Ok(())
}

/// Dense copy of a sparse matrix.
pub(crate) fn to_dense(m: &CsrMatrix<f64>) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(m.nrows(), m.ncols());
    for (i, j, v) in m.triplet_iter() {
        out[(i, j)] += *v;
    }
    out
}
