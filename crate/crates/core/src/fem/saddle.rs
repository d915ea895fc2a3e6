//! Direct solves of the mixed block system.
//!
//! When the pressure block `M = C + sD` is positive the pressure is eliminated
//! and the velocity Schur complement `A + s B M^{-1} B^T` (SPD, banded on the
//! fine grid) is factored once. Otherwise the pressure Schur complement
//! `s B^T A^{-1} B + M` is formed densely, which is only intended for small
//! stationary problems.

use nalgebra::{DMatrix, DVector};
use nalgebra_sparse::factorization::CscCholesky;
use nalgebra_sparse::{CscMatrix, CsrMatrix};

use super::{to_dense, ForwardSystem};
use crate::error::{check_len, Error, Result};

/// Systems at or below this velocity dimension are factored densely.
const DENSE_LIMIT: usize = 600;

/// Velocity and pressure parts of a block vector.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockVector {
    pub velocity: DVector<f64>,
    pub pressure: DVector<f64>,
}

impl BlockVector {
    pub fn zeros(n_velocity: usize, n_pressure: usize) -> Self {
        BlockVector {
            velocity: DVector::zeros(n_velocity),
            pressure: DVector::zeros(n_pressure),
        }
    }
}

enum SpdFactor {
    Dense(nalgebra::Cholesky<f64, nalgebra::Dyn>),
    Sparse(CscCholesky<f64>),
}

impl SpdFactor {
    fn new(m: &CsrMatrix<f64>, what: &str) -> Result<Self> {
        if m.nrows() <= DENSE_LIMIT {
            to_dense(m)
                .cholesky()
                .map(SpdFactor::Dense)
                .ok_or_else(|| Error::Singular(format!("{what} is not positive definite")))
        } else {
            CscCholesky::factor(&CscMatrix::from(m))
                .map(SpdFactor::Sparse)
                .map_err(|e| Error::Singular(format!("{what}: {e:?}")))
        }
    }

    fn solve(&self, rhs: &DVector<f64>) -> DVector<f64> {
        match self {
            SpdFactor::Dense(c) => c.solve(rhs),
            SpdFactor::Sparse(c) => c.solve(rhs).column(0).into_owned(),
        }
    }

    fn solve_matrix(&self, rhs: &DMatrix<f64>) -> DMatrix<f64> {
        match self {
            SpdFactor::Dense(c) => c.solve(rhs),
            SpdFactor::Sparse(c) => c.solve(rhs),
        }
    }
}

enum Elimination {
    Pressure {
        schur: SpdFactor,
        mass_inv: DVector<f64>,
    },
    Velocity {
        a: SpdFactor,
        schur: nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>,
    },
}

/// Factorization of `[A B; -s B^T M]` reusable across right-hand sides.
pub struct SaddleSolver {
    s: f64,
    b: CsrMatrix<f64>,
    bt: CsrMatrix<f64>,
    elimination: Elimination,
}

impl SaddleSolver {
    /// Factor the block operator with pressure block `mass` (a diagonal).
    pub fn new(system: &ForwardSystem, s: f64, mass: &DVector<f64>) -> Result<Self> {
        if !(s > 0.0 && s.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "time coupling s must be positive, got {s}"
            )));
        }
        check_len("pressure block", system.n_pressure(), mass.len())?;
        let b = system.b.clone();
        let bt = b.transpose();

        let elimination = if mass.iter().all(|m| *m > 0.0) {
            let mass_inv = mass.map(|m| 1.0 / m);
            let mut scaled = bt.clone();
            for (row, mut lane) in scaled.row_iter_mut().enumerate() {
                let f = s * mass_inv[row];
                lane.values_mut().iter_mut().for_each(|v| *v *= f);
            }
            let schur = &system.a + &(&b * &scaled);
            Elimination::Pressure {
                schur: SpdFactor::new(&schur, "velocity Schur complement")?,
                mass_inv,
            }
        } else {
            if mass.iter().any(|m| *m < 0.0) {
                return Err(Error::InvalidArgument(
                    "pressure block has negative entries".into(),
                ));
            }
            let a = SpdFactor::new(&system.a, "velocity mass matrix")?;
            let ainv_b = a.solve_matrix(&to_dense(&b));
            let mut p = to_dense(&bt) * ainv_b * s;
            for i in 0..mass.len() {
                p[(i, i)] += mass[i];
            }
            let scale = p.diagonal().amax().max(f64::MIN_POSITIVE);
            let lu = p.lu();
            let min_pivot = lu
                .u()
                .diagonal()
                .iter()
                .fold(f64::INFINITY, |acc, v| acc.min(v.abs()));
            if !(min_pivot > 1e-12 * scale) {
                return Err(Error::Singular(
                    "pressure Schur complement is singular (incompatible pure-Neumann setup?)"
                        .into(),
                ));
            }
            Elimination::Velocity { a, schur: lu }
        };
        Ok(SaddleSolver {
            s,
            b,
            bt,
            elimination,
        })
    }

    pub fn solve(&self, rhs: &BlockVector) -> Result<BlockVector> {
        check_len("velocity right-hand side", self.b.nrows(), rhs.velocity.len())?;
        check_len("pressure right-hand side", self.b.ncols(), rhs.pressure.len())?;
        let s = self.s;
        match &self.elimination {
            Elimination::Pressure { schur, mass_inv } => {
                let mp = rhs.pressure.component_mul(mass_inv);
                let r = &rhs.velocity - &self.b * &mp;
                let velocity = schur.solve(&r);
                let btv = &self.bt * &velocity;
                let pressure = (&rhs.pressure + btv * s).component_mul(mass_inv);
                Ok(BlockVector { velocity, pressure })
            }
            Elimination::Velocity { a, schur } => {
                let ainv_rv = a.solve(&rhs.velocity);
                let r = &rhs.pressure + (&self.bt * &ainv_rv) * s;
                let pressure = schur
                    .solve(&r)
                    .ok_or_else(|| Error::Singular("pressure Schur complement".into()))?;
                let velocity = a.solve(&(&rhs.velocity - &self.b * &pressure));
                Ok(BlockVector { velocity, pressure })
            }
        }
    }
}

/// Solve the time-coupled system with pressure block `C + sD`.
pub fn solve_saddle(system: &ForwardSystem, s: f64, rhs: &BlockVector) -> Result<BlockVector> {
    let mass = &system.c + &system.d * s;
    SaddleSolver::new(system, s, &mass)?.solve(rhs)
}

/// Solve the stationary system `[A B; -B^T D]`.
pub fn solve_stationary(system: &ForwardSystem, rhs: &BlockVector) -> Result<BlockVector> {
    SaddleSolver::new(system, 1.0, &system.d)?.solve(rhs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fem::assemble_mixed;
    use crate::mesh::{CellField, RectGrid};

    fn dense_block(system: &ForwardSystem, s: f64, mass: &DVector<f64>) -> DMatrix<f64> {
        let (nv, np) = (system.n_velocity(), system.n_pressure());
        let mut m = DMatrix::zeros(nv + np, nv + np);
        m.view_mut((0, 0), (nv, nv)).copy_from(&to_dense(&system.a));
        let b = to_dense(&system.b);
        m.view_mut((0, nv), (nv, np)).copy_from(&b);
        m.view_mut((nv, 0), (np, nv)).copy_from(&(b.transpose() * -s));
        for i in 0..np {
            m[(nv + i, nv + i)] = mass[i];
        }
        m
    }

    fn stack(x: &BlockVector) -> DVector<f64> {
        DVector::from_iterator(
            x.velocity.len() + x.pressure.len(),
            x.velocity.iter().chain(x.pressure.iter()).copied(),
        )
    }

    fn rhs_for(system: &ForwardSystem, seed: u64) -> BlockVector {
        let mut state = seed;
        let mut next = || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((state >> 11) as f64 / (1u64 << 53) as f64) - 0.5
        };
        BlockVector {
            velocity: DVector::from_fn(system.n_velocity(), |_, _| next()),
            pressure: DVector::from_fn(system.n_pressure(), |_, _| next()),
        }
    }

    #[test]
    fn zero_rhs_zero_solution() {
        let g = RectGrid::unit(3, 3).unwrap();
        let sys = assemble_mixed(&g, &CellField::constant(&g, 1.0), &CellField::constant(&g, 1.0)).unwrap();
        let x = solve_saddle(&sys, 0.3, &BlockVector::zeros(g.n_edges(), g.n_cells())).unwrap();
        assert!(x.velocity.iter().chain(x.pressure.iter()).all(|v| *v == 0.0));
    }

    #[test]
    fn dense_lu_oracle_on_small_grids() {
        for (nx, ny) in [(1, 1), (2, 2), (3, 4), (4, 4)] {
            let g = RectGrid::unit(nx, ny).unwrap();
            let k = CellField::from_fn(&g, |x, y| (1.5 * x - y).exp());
            let q = CellField::constant(&g, 1.0);
            let sys = assemble_mixed(&g, &k, &q).unwrap();
            for s in [0.05, 1.0] {
                let rhs = rhs_for(&sys, (nx * 10 + ny) as u64);
                let x = solve_saddle(&sys, s, &rhs).unwrap();
                let mass = &sys.c + &sys.d * s;
                let oracle = dense_block(&sys, s, &mass).lu().solve(&stack(&rhs)).unwrap();
                let err = (stack(&x) - &oracle).amax() / oracle.amax();
                assert!(err < 1e-10, "{nx}x{ny} s={s}: {err}");
            }
        }
    }

    #[test]
    fn injected_solution_is_recovered() {
        let g = RectGrid::unit(30, 25).unwrap();
        let k = CellField::from_fn(&g, |x, y| 1.0 + 10.0 * (x * y).sin().powi(2));
        let q = CellField::from_fn(&g, |x, _| x);
        let sys = assemble_mixed(&g, &k, &q).unwrap();
        let truth = rhs_for(&sys, 7);
        let s = 0.02;
        let rhs = sys.apply(s, &truth);
        let x = solve_saddle(&sys, s, &rhs).unwrap();
        assert!((&x.velocity - &truth.velocity).amax() < 1e-8);
        assert!((&x.pressure - &truth.pressure).amax() < 1e-8);
    }

    #[test]
    fn stationary_flux_conservation() {
        // g = 0, q = 0: the sum of outward boundary fluxes equals the source integral.
        let g = RectGrid::unit(4, 4).unwrap();
        let sys = assemble_mixed(
            &g,
            &CellField::from_fn(&g, |x, y| 1.0 + x * y),
            &CellField::constant(&g, 0.0),
        )
        .unwrap();
        let source = CellField::from_fn(&g, |x, y| (6.0 * x).sin() + y - 0.5);
        let f = DVector::from_iterator(g.n_cells(), source.values().iter().map(|v| v * g.cell_area()));
        let rhs = BlockVector {
            velocity: DVector::zeros(g.n_edges()),
            pressure: f.clone(),
        };
        let x = solve_stationary(&sys, &rhs).unwrap();
        let total: f64 = g
            .boundary_edges()
            .into_iter()
            .map(|e| x.velocity[e] * g.edge(e).length)
            .sum();
        assert!((total - f.sum()).abs() < 1e-10, "{total} vs {}", f.sum());
    }

    #[test]
    fn pure_neumann_reported_singular() {
        // Stationary with q = 0 and no divergence coupling: pressure is undetermined.
        let g = RectGrid::unit(2, 1).unwrap();
        let mut sys = assemble_mixed(&g, &CellField::constant(&g, 1.0), &CellField::constant(&g, 0.0)).unwrap();
        sys.b = CsrMatrix::zeros(g.n_edges(), g.n_cells());
        let rhs = BlockVector::zeros(g.n_edges(), g.n_cells());
        assert!(matches!(solve_stationary(&sys, &rhs), Err(Error::Singular(_))));
    }

    #[test]
    fn nonpositive_s_rejected() {
        let g = RectGrid::unit(2, 2).unwrap();
        let sys = assemble_mixed(&g, &CellField::constant(&g, 1.0), &CellField::constant(&g, 1.0)).unwrap();
        let rhs = BlockVector::zeros(g.n_edges(), g.n_cells());
        assert!(solve_saddle(&sys, 0.0, &rhs).is_err());
        assert!(solve_saddle(&sys, -1.0, &rhs).is_err());
    }
}
