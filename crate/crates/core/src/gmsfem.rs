//! Mixed generalized multiscale reduction of the velocity space.
//!
//! For every coarse edge `E_i` and every fine edge `e_j` on it a snapshot
//! velocity is computed on the coarse neighborhood `omega_i`: unit normal flux on
//! `e_j`, zero flux on the rest of `E_i` and on `domega_i`, and constant
//! divergence inside each coarse cell. Because the flux on `E_i` is prescribed,
//! the neighborhood problem splits into independent Neumann problems on its one
//! or two coarse cells, each of which is factored once and reused for all edges.
//!
//! A per-edge generalized eigenproblem then selects the `L_b` snapshot
//! combinations with the smallest edge energy relative to the neighborhood
//! energy. Coarse pressures are piecewise constant on coarse cells.

use std::collections::HashMap;
use std::io::{BufRead, BufWriter, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use nalgebra_sparse::{CooMatrix, CsrMatrix};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::fem::{assemble_mixed, BlockVector, ForwardSystem, Loads};
use crate::mesh::{CellField, EdgeKind, RectGrid};

/// Coarse partition whose cells are unions of `rx x ry` fine cells.
#[derive(Debug, Clone)]
pub struct CoarseGrid {
    fine: RectGrid,
    coarse: RectGrid,
    rx: usize,
    ry: usize,
    edge_fine: Vec<Vec<usize>>,
}

impl CoarseGrid {
    pub fn new(fine: &RectGrid, nx: usize, ny: usize) -> Result<Self> {
        let coarse = RectGrid::new(nx, ny, fine.domain())?;
        if fine.nx() % nx != 0 || fine.ny() % ny != 0 {
            return Err(Error::InvalidArgument(format!(
                "coarse grid {nx} x {ny} does not conform to fine grid {} x {}",
                fine.nx(),
                fine.ny()
            )));
        }
        let rx = fine.nx() / nx;
        let ry = fine.ny() / ny;
        let edge_fine = coarse
            .edges()
            .iter()
            .map(|edge| match edge.kind {
                EdgeKind::Horizontal => (0..rx)
                    .map(|t| fine.horizontal_edge(edge.i * rx + t, edge.j * ry))
                    .collect(),
                EdgeKind::Vertical => (0..ry)
                    .map(|t| fine.vertical_edge(edge.i * rx, edge.j * ry + t))
                    .collect(),
            })
            .collect();
        Ok(CoarseGrid {
            fine: fine.clone(),
            coarse,
            rx,
            ry,
            edge_fine,
        })
    }

    pub fn fine(&self) -> &RectGrid {
        &self.fine
    }

    pub fn coarse(&self) -> &RectGrid {
        &self.coarse
    }

    /// Number of coarse edges `N_e`.
    pub fn n_edges(&self) -> usize {
        self.coarse.n_edges()
    }

    pub fn n_cells(&self) -> usize {
        self.coarse.n_cells()
    }

    pub fn ratio(&self) -> (usize, usize) {
        (self.rx, self.ry)
    }

    /// Fine edges tiling coarse edge `i`, ordered along it.
    pub fn fine_edges(&self, i: usize) -> &[usize] {
        &self.edge_fine[i]
    }

    /// Coarse cells of the neighborhood `omega_i`.
    pub fn neighborhood(&self, i: usize) -> Vec<usize> {
        self.coarse.edge(i).adjacent_cells().collect()
    }

    pub fn coarse_cell_of(&self, fine_cell: usize) -> usize {
        let (i, j) = self.fine.cell_ij(fine_cell);
        self.coarse.cell_index(i / self.rx, j / self.ry)
    }

    pub fn fine_cells(&self, coarse_cell: usize) -> Vec<usize> {
        let (ci, cj) = self.coarse.cell_ij(coarse_cell);
        let mut out = Vec::with_capacity(self.rx * self.ry);
        for j in cj * self.ry..(cj + 1) * self.ry {
            for i in ci * self.rx..(ci + 1) * self.rx {
                out.push(self.fine.cell_index(i, j));
            }
        }
        out
    }

    /// Fine edges strictly inside a coarse cell.
    pub fn interior_fine_edges(&self, coarse_cell: usize) -> Vec<usize> {
        let (ci, cj) = self.coarse.cell_ij(coarse_cell);
        let (i0, j0) = (ci * self.rx, cj * self.ry);
        let mut out = Vec::new();
        for j in j0..j0 + self.ry {
            for i in i0 + 1..i0 + self.rx {
                out.push(self.fine.vertical_edge(i, j));
            }
        }
        for j in j0 + 1..j0 + self.ry {
            for i in i0..i0 + self.rx {
                out.push(self.fine.horizontal_edge(i, j));
            }
        }
        out.sort_unstable();
        out
    }

    /// Coarse-to-fine pressure restriction: `G_off[K, c] = 1` when `c` lies in `K`.
    pub fn pressure_restriction(&self) -> CsrMatrix<f64> {
        let mut g = CooMatrix::new(self.n_cells(), self.fine.n_cells());
        for c in 0..self.fine.n_cells() {
            g.push(self.coarse_cell_of(c), c, 1.0);
        }
        CsrMatrix::from(&g)
    }
}

/// Dense block of `m` with the given rows and a column map (`usize::MAX` = drop).
fn gather(m: &CsrMatrix<f64>, rows: &[usize], col_map: &[usize], ncols: usize) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(rows.len(), ncols);
    for (r, &row) in rows.iter().enumerate() {
        let row = m.row(row);
        for (&c, &v) in row.col_indices().iter().zip(row.values()) {
            let lc = col_map[c];
            if lc != usize::MAX {
                out[(r, lc)] += v;
            }
        }
    }
    out
}

fn index_map(ids: &[usize], n: usize) -> Vec<usize> {
    let mut map = vec![usize::MAX; n];
    for (l, &g) in ids.iter().enumerate() {
        map[g] = l;
    }
    map
}

/// Factored Neumann problem on one coarse cell with all boundary fluxes given.
struct CellProblem {
    interior: Vec<usize>,
    cells: Vec<usize>,
    area: f64,
    /// Per boundary edge: `A[interior, e]`, `B[e, cells]` and the outward flux of a unit DoF.
    coupling: HashMap<usize, (DVector<f64>, DVector<f64>, f64)>,
    lu: nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>,
}

impl CellProblem {
    fn new(cg: &CoarseGrid, fine: &ForwardSystem, kc: usize) -> Result<Self> {
        let grid = cg.fine();
        let interior = cg.interior_fine_edges(kc);
        let cells = cg.fine_cells(kc);
        let (ni, nc) = (interior.len(), cells.len());
        let edge_map = index_map(&interior, grid.n_edges());
        let cell_map = index_map(&cells, grid.n_cells());

        let n = ni + nc + 1;
        let mut m = DMatrix::zeros(n, n);
        m.view_mut((0, 0), (ni, ni))
            .copy_from(&gather(&fine.a, &interior, &edge_map, ni));
        let b_i = gather(&fine.b, &interior, &cell_map, nc);
        m.view_mut((0, ni), (ni, nc)).copy_from(&b_i);
        m.view_mut((ni, 0), (nc, ni)).copy_from(&b_i.transpose());
        for (l, &c) in cells.iter().enumerate() {
            let w = fine.c[c];
            m[(ni + l, n - 1)] = w;
            m[(n - 1, ni + l)] = w;
        }
        let lu = m.lu();
        if !lu.is_invertible() {
            return Err(Error::Singular(format!("local snapshot system on coarse cell {kc}")));
        }

        let area: f64 = cells.iter().map(|&c| fine.c[c]).sum();
        let cell_set: Vec<usize> = cells.clone();
        let (ci, cj) = cg.coarse().cell_ij(kc);
        let (rx, ry) = cg.ratio();
        let mut boundary = Vec::new();
        for t in 0..rx {
            boundary.push(grid.horizontal_edge(ci * rx + t, cj * ry));
            boundary.push(grid.horizontal_edge(ci * rx + t, (cj + 1) * ry));
        }
        for t in 0..ry {
            boundary.push(grid.vertical_edge(ci * rx, cj * ry + t));
            boundary.push(grid.vertical_edge((ci + 1) * rx, cj * ry + t));
        }
        let mut coupling = HashMap::with_capacity(boundary.len());
        for &e in &boundary {
            let a_col = gather(&fine.a, &interior, &index_map(&[e], grid.n_edges()), 1);
            let b_row = gather(&fine.b, &[e], &cell_map, nc).transpose();
            let edge = grid.edge(e);
            let inner = edge
                .adjacent_cells()
                .find(|c| cell_set.contains(c))
                .expect("boundary edge of a coarse cell touches it");
            coupling.insert(
                e,
                (
                    a_col.column(0).into_owned(),
                    b_row.column(0).into_owned(),
                    edge.outward_sign(inner) * edge.length,
                ),
            );
        }
        Ok(CellProblem {
            interior,
            cells,
            area,
            coupling,
            lu,
        })
    }

    /// Interior velocities for unit flux (along the fine edge normal) on `edge`.
    fn solve_unit(&self, edge: usize, fine: &ForwardSystem) -> DVector<f64> {
        let (ni, nc) = (self.interior.len(), self.cells.len());
        let (a_col, b_row, outward_flux) = &self.coupling[&edge];
        // Compatibility: the constant divergence integrates to the outward flux.
        let alpha = outward_flux / self.area;
        let mut rhs = DVector::zeros(ni + nc + 1);
        for r in 0..ni {
            rhs[r] = -a_col[r];
        }
        for (l, &c) in self.cells.iter().enumerate() {
            rhs[ni + l] = -alpha * fine.c[c] - b_row[l];
        }
        let x = self.lu.solve(&rhs).expect("factor checked invertible");
        x.rows(0, ni).into_owned()
    }
}

/// Snapshot velocities of one coarse edge on its neighborhood.
#[derive(Debug, Clone)]
pub struct EdgeSnapshots {
    /// Fine edges carrying nonzero snapshot values: the fine edges of `E_i`
    /// followed by the interior fine edges of each neighborhood cell.
    pub support: Vec<usize>,
    /// One column per snapshot (several realizations may be pooled side by side).
    pub psi: DMatrix<f64>,
}

/// Snapshot spaces of all coarse edges.
#[derive(Debug, Clone)]
pub struct SnapshotSpace {
    pub edges: Vec<EdgeSnapshots>,
}

impl SnapshotSpace {
    /// Total number of snapshot columns `M_snap`.
    pub fn len(&self) -> usize {
        self.edges.iter().map(|e| e.psi.ncols()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Fine-grid velocity vector of snapshot `j` on coarse edge `i`.
    pub fn fine_vector(&self, n_fine_edges: usize, i: usize, j: usize) -> DVector<f64> {
        let es = &self.edges[i];
        let mut v = DVector::zeros(n_fine_edges);
        for (r, &e) in es.support.iter().enumerate() {
            v[e] = es.psi[(r, j)];
        }
        v
    }

    /// Concatenate the snapshot columns of several spaces built on one coarse grid.
    pub fn pool(spaces: &[SnapshotSpace]) -> Result<SnapshotSpace> {
        let first = spaces
            .first()
            .ok_or_else(|| Error::InvalidArgument("no snapshot spaces to pool".into()))?;
        let mut edges = Vec::with_capacity(first.edges.len());
        for i in 0..first.edges.len() {
            let support = first.edges[i].support.clone();
            let cols: Vec<_> = spaces
                .iter()
                .map(|s| {
                    check_len("pooled snapshot edges", first.edges.len(), s.edges.len())?;
                    if s.edges[i].support != support {
                        return Err(Error::InvalidArgument("snapshot supports differ".into()));
                    }
                    Ok(s.edges[i].psi.columns(0, s.edges[i].psi.ncols()))
                })
                .collect::<Result<_>>()?;
            edges.push(EdgeSnapshots {
                support,
                psi: DMatrix::from_columns(
                    &cols
                        .iter()
                        .flat_map(|c| c.column_iter().map(|v| v.into_owned()))
                        .collect::<Vec<_>>(),
                ),
            });
        }
        Ok(SnapshotSpace { edges })
    }
}

fn zero_reaction(grid: &RectGrid) -> CellField {
    CellField::constant(grid, 0.0)
}

/// Solve all local snapshot problems for diffusion field `k`.
pub fn build_snapshots(coarse: &CoarseGrid, k: &CellField) -> Result<SnapshotSpace> {
    let grid = coarse.fine();
    let fine = assemble_mixed(grid, k, &zero_reaction(grid))?;
    let problems: Vec<CellProblem> = (0..coarse.n_cells())
        .into_par_iter()
        .map(|kc| CellProblem::new(coarse, &fine, kc))
        .collect::<Result<_>>()?;

    let edges = (0..coarse.n_edges())
        .into_par_iter()
        .map(|i| {
            let on_edge = coarse.fine_edges(i);
            let hood = coarse.neighborhood(i);
            let mut support = on_edge.to_vec();
            for &kc in &hood {
                support.extend_from_slice(&problems[kc].interior);
            }
            let mut psi = DMatrix::zeros(support.len(), on_edge.len());
            for (j, &e) in on_edge.iter().enumerate() {
                psi[(j, j)] = 1.0;
                let mut offset = on_edge.len();
                for &kc in &hood {
                    let p = &problems[kc];
                    let v = p.solve_unit(e, &fine);
                    psi.view_mut((offset, j), (v.len(), 1)).copy_from(&v);
                    offset += v.len();
                }
            }
            EdgeSnapshots { support, psi }
        })
        .collect();
    Ok(SnapshotSpace { edges })
}

/// How snapshot spaces from several diffusion realizations are merged.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainingMerge {
    /// Pool all snapshots per edge and reduce once with realization-averaged forms.
    #[default]
    Union,
    /// Reduce each realization separately and place the bases side by side.
    Concatenate,
}

/// Reduced velocity basis and pressure restriction.
#[derive(Debug, Clone)]
pub struct OfflineBasis {
    /// Fine edges x `M_t`, columns grouped by coarse edge.
    pub r_off: CsrMatrix<f64>,
    /// Coarse cells x fine cells.
    pub g_off: CsrMatrix<f64>,
    /// Kept eigenvalues per coarse edge, ascending within each realization block.
    pub eigenvalues: Vec<Vec<f64>>,
    /// Coarse edges whose snapshot form needed a diagonal shift.
    pub regularized: Vec<usize>,
}

impl OfflineBasis {
    /// Trivial basis reproducing the fine system.
    pub fn identity(grid: &RectGrid) -> Self {
        OfflineBasis {
            r_off: CsrMatrix::identity(grid.n_edges()),
            g_off: CsrMatrix::identity(grid.n_cells()),
            eigenvalues: Vec::new(),
            regularized: Vec::new(),
        }
    }

    /// Basis spanning the whole snapshot space, one column per snapshot.
    pub fn from_snapshots(coarse: &CoarseGrid, snapshots: &SnapshotSpace) -> Self {
        let mut r = CooMatrix::new(coarse.fine().n_edges(), snapshots.len());
        let mut col = 0;
        for es in &snapshots.edges {
            for j in 0..es.psi.ncols() {
                for (row, &e) in es.support.iter().enumerate() {
                    if es.psi[(row, j)] != 0.0 {
                        r.push(e, col, es.psi[(row, j)]);
                    }
                }
                col += 1;
            }
        }
        OfflineBasis {
            r_off: CsrMatrix::from(&r),
            g_off: coarse.pressure_restriction(),
            eigenvalues: Vec::new(),
            regularized: Vec::new(),
        }
    }

    /// Number of velocity basis functions `M_t`.
    pub fn n_velocity(&self) -> usize {
        self.r_off.ncols()
    }

    pub fn n_pressure(&self) -> usize {
        self.g_off.nrows()
    }

    /// Write `coarse_edge,mode,eigenvalue,fine_edge,value` rows.
    pub fn write_csv(&self, path: &Path, coarse: &CoarseGrid) -> Result<()> {
        let io = |source| Error::Io {
            path: path.display().to_string(),
            source,
        };
        let per_edge = self.n_velocity() / coarse.n_edges().max(1);
        let file = std::fs::File::create(path).map_err(io)?;
        let mut w = BufWriter::new(file);
        writeln!(w, "coarse_edge,mode,eigenvalue,fine_edge,value").map_err(io)?;
        let rt = self.r_off.transpose();
        for (col, row) in rt.row_iter().enumerate() {
            let (i, l) = (col / per_edge, col % per_edge);
            let lambda = self.eigenvalues.get(i).and_then(|v| v.get(l)).copied().unwrap_or(f64::NAN);
            for (&e, &v) in row.col_indices().iter().zip(row.values()) {
                writeln!(w, "{i},{l},{lambda:e},{e},{v:e}").map_err(io)?;
            }
        }
        w.flush().map_err(io)
    }

    /// Reload a basis written by [`OfflineBasis::write_csv`] for the same grids.
    pub fn read_csv(path: &Path, coarse: &CoarseGrid) -> Result<Self> {
        let io = |source| Error::Io {
            path: path.display().to_string(),
            source,
        };
        let bad = |line: usize| Error::Config(format!("{}: malformed basis row {line}", path.display()));
        let file = std::fs::File::open(path).map_err(io)?;
        let mut entries = Vec::new();
        let mut per_edge = 0;
        let mut eigenvalues = vec![Vec::new(); coarse.n_edges()];
        for (n, line) in std::io::BufReader::new(file).lines().enumerate().skip(1) {
            let line = line.map_err(io)?;
            if line.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 5 {
                return Err(bad(n + 1));
            }
            let i: usize = f[0].parse().map_err(|_| bad(n + 1))?;
            let l: usize = f[1].parse().map_err(|_| bad(n + 1))?;
            let lambda: f64 = f[2].parse().map_err(|_| bad(n + 1))?;
            let e: usize = f[3].parse().map_err(|_| bad(n + 1))?;
            let v: f64 = f[4].parse().map_err(|_| bad(n + 1))?;
            if i >= coarse.n_edges() || e >= coarse.fine().n_edges() {
                return Err(bad(n + 1));
            }
            per_edge = per_edge.max(l + 1);
            let ev = &mut eigenvalues[i];
            if ev.len() <= l {
                ev.resize(l + 1, f64::NAN);
            }
            ev[l] = lambda;
            entries.push((i, l, e, v));
        }
        let mut r = CooMatrix::new(coarse.fine().n_edges(), coarse.n_edges() * per_edge);
        for (i, l, e, v) in entries {
            r.push(e, i * per_edge + l, v);
        }
        Ok(OfflineBasis {
            r_off: CsrMatrix::from(&r),
            g_off: coarse.pressure_restriction(),
            eigenvalues,
            regularized: Vec::new(),
        })
    }
}

/// Per-edge forms of the spectral problem on the snapshot coefficients.
struct EdgeForms {
    a: DMatrix<f64>,
    s: DMatrix<f64>,
}

fn edge_forms(
    coarse: &CoarseGrid,
    fine: &ForwardSystem,
    kinv: &[f64],
    i: usize,
    es: &EdgeSnapshots,
) -> EdgeForms {
    let grid = coarse.fine();
    let n_on = coarse.fine_edges(i).len();
    let psi_on = es.psi.rows(0, n_on);
    // Edge energy: |e| times k^{-1} averaged over the fine cells next to e.
    let weights = DVector::from_iterator(
        n_on,
        coarse.fine_edges(i).iter().map(|&e| {
            let edge = grid.edge(e);
            let (sum, cnt) = edge
                .adjacent_cells()
                .fold((0.0, 0.0), |(s, n), c| (s + kinv[c], n + 1.0));
            edge.length * sum / cnt
        }),
    );
    let a = psi_on.transpose() * DMatrix::from_diagonal(&weights) * psi_on;

    let edge_map = index_map(&es.support, grid.n_edges());
    let a_sup = gather(&fine.a, &es.support, &edge_map, es.support.len());
    let cells: Vec<usize> = coarse
        .neighborhood(i)
        .into_iter()
        .flat_map(|kc| coarse.fine_cells(kc))
        .collect();
    let b_sup = gather(&fine.b, &es.support, &index_map(&cells, grid.n_cells()), cells.len());
    let div = b_sup.transpose() * &es.psi;
    let inv_area = DVector::from_iterator(cells.len(), cells.iter().map(|&c| 1.0 / fine.c[c]));
    let s = es.psi.transpose() * a_sup * &es.psi
        + div.transpose() * DMatrix::from_diagonal(&inv_area) * &div;
    EdgeForms { a, s }
}

struct EdgeReduction {
    eigenvalues: Vec<f64>,
    coefficients: DMatrix<f64>,
    regularized: bool,
}

/// Smallest `l_b` eigenpairs of `a z = lambda s z` with `z^T s z = 1`, skipping
/// modes that carry no flux across the edge.
fn reduce_edge(forms: &EdgeForms, l_b: usize) -> Result<EdgeReduction> {
    let n = forms.s.nrows();
    let sym = |m: &DMatrix<f64>| (m + m.transpose()) * 0.5;
    let mut s = sym(&forms.s);
    let mut regularized = false;
    let chol = match s.clone().cholesky() {
        Some(c) if c.l().diagonal().min() > 1e-7 * c.l().diagonal().max() => c,
        _ => {
            regularized = true;
            let shift = 1e-12 * s.trace() / n as f64;
            for d in 0..n {
                s[(d, d)] += shift;
            }
            s.cholesky()
                .ok_or_else(|| Error::Singular("snapshot energy form".into()))?
        }
    };
    let l = chol.l();
    let linv_a = l
        .solve_lower_triangular(&sym(&forms.a))
        .ok_or_else(|| Error::Singular("snapshot energy factor".into()))?;
    let reduced = l
        .solve_lower_triangular(&linv_a.transpose())
        .ok_or_else(|| Error::Singular("snapshot energy factor".into()))?;
    let eig = sym(&reduced).symmetric_eigen();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&p, &q| eig.eigenvalues[p].total_cmp(&eig.eigenvalues[q]));
    let top = eig.eigenvalues.max().max(0.0);
    let kept: Vec<usize> = order
        .into_iter()
        .filter(|&p| eig.eigenvalues[p] > 1e-9 * top)
        .take(l_b)
        .collect();
    if kept.len() < l_b {
        return Err(Error::InvalidArgument(format!(
            "only {} flux-carrying modes available, {l_b} requested",
            kept.len()
        )));
    }
    let lt = l.transpose();
    let mut coefficients = DMatrix::zeros(n, l_b);
    for (c, &p) in kept.iter().enumerate() {
        let z = lt
            .solve_upper_triangular(&eig.eigenvectors.column(p).into_owned())
            .ok_or_else(|| Error::Singular("snapshot energy factor".into()))?;
        coefficients.set_column(c, &z);
    }
    Ok(EdgeReduction {
        eigenvalues: kept.iter().map(|&p| eig.eigenvalues[p].max(0.0)).collect(),
        coefficients,
        regularized,
    })
}

/// Reduce a snapshot space to `l_b` functions per coarse edge, with the
/// spectral forms weighted by `k`.
pub fn spectral_reduce(
    coarse: &CoarseGrid,
    snapshots: &SnapshotSpace,
    k: &CellField,
    l_b: usize,
) -> Result<OfflineBasis> {
    let (cols, eigenvalues, regularized) = reduce_columns(coarse, snapshots, k, l_b)?;
    Ok(assemble_basis(coarse, &[cols], vec![eigenvalues], regularized, l_b))
}

type EdgeColumns = Vec<(Vec<usize>, DMatrix<f64>)>;

fn reduce_columns(
    coarse: &CoarseGrid,
    snapshots: &SnapshotSpace,
    k: &CellField,
    l_b: usize,
) -> Result<(EdgeColumns, Vec<Vec<f64>>, Vec<usize>)> {
    let grid = coarse.fine();
    check_len("snapshot edges", coarse.n_edges(), snapshots.edges.len())?;
    let min_j = (0..coarse.n_edges()).map(|i| coarse.fine_edges(i).len()).min().unwrap_or(0);
    if l_b == 0 || l_b > min_j {
        return Err(Error::InvalidArgument(format!(
            "basis count {l_b} outside 1..={min_j}"
        )));
    }
    let fine = assemble_mixed(grid, k, &zero_reaction(grid))?;
    let kinv: Vec<f64> = k.values().iter().map(|v| 1.0 / v).collect();
    let reduced: Vec<(Vec<usize>, DMatrix<f64>, Vec<f64>, bool)> = snapshots
        .edges
        .par_iter()
        .enumerate()
        .map(|(i, es)| {
            let forms = edge_forms(coarse, &fine, &kinv, i, es);
            let red = reduce_edge(&forms, l_b).map_err(|e| match e {
                Error::InvalidArgument(m) => Error::InvalidArgument(format!("coarse edge {i}: {m}")),
                other => other,
            })?;
            Ok((es.support.clone(), &es.psi * red.coefficients, red.eigenvalues, red.regularized))
        })
        .collect::<Result<_>>()?;
    let mut cols = Vec::with_capacity(reduced.len());
    let mut eigenvalues = Vec::with_capacity(reduced.len());
    let mut regularized = Vec::new();
    for (i, (support, basis, ev, reg)) in reduced.into_iter().enumerate() {
        cols.push((support, basis));
        eigenvalues.push(ev);
        if reg {
            regularized.push(i);
        }
    }
    Ok((cols, eigenvalues, regularized))
}

fn assemble_basis(
    coarse: &CoarseGrid,
    blocks: &[EdgeColumns],
    eigen_blocks: Vec<Vec<Vec<f64>>>,
    mut regularized: Vec<usize>,
    l_b: usize,
) -> OfflineBasis {
    let per_edge = l_b * blocks.len();
    let mut r = CooMatrix::new(coarse.fine().n_edges(), coarse.n_edges() * per_edge);
    for (b, block) in blocks.iter().enumerate() {
        for (i, (support, basis)) in block.iter().enumerate() {
            for l in 0..l_b {
                let col = i * per_edge + b * l_b + l;
                for (row, &e) in support.iter().enumerate() {
                    let v = basis[(row, l)];
                    if v != 0.0 {
                        r.push(e, col, v);
                    }
                }
            }
        }
    }
    let eigenvalues = (0..coarse.n_edges())
        .map(|i| eigen_blocks.iter().flat_map(|blk| blk[i].iter().copied()).collect())
        .collect();
    regularized.sort_unstable();
    regularized.dedup();
    OfflineBasis {
        r_off: CsrMatrix::from(&r),
        g_off: coarse.pressure_restriction(),
        eigenvalues,
        regularized,
    }
}

/// Offline basis trained on one or more diffusion realizations.
pub fn build_offline(
    coarse: &CoarseGrid,
    realizations: &[CellField],
    l_b: usize,
    merge: TrainingMerge,
) -> Result<OfflineBasis> {
    if realizations.is_empty() {
        return Err(Error::InvalidArgument("no training realizations".into()));
    }
    if realizations.len() == 1 {
        let snaps = build_snapshots(coarse, &realizations[0])?;
        return spectral_reduce(coarse, &snaps, &realizations[0], l_b);
    }
    match merge {
        TrainingMerge::Union => {
            let spaces: Vec<SnapshotSpace> = realizations
                .iter()
                .map(|k| build_snapshots(coarse, k))
                .collect::<Result<_>>()?;
            let pooled = SnapshotSpace::pool(&spaces)?;
            // Forms are linear in k^{-1}, so averaging them means a harmonic-mean field.
            let n = coarse.fine().n_cells();
            for k in realizations {
                check_len("training realization", n, k.len())?;
                k.check_positive("diffusion")?;
            }
            let mean = CellField::new(
                (0..n)
                    .map(|c| {
                        let s: f64 = realizations.iter().map(|k| 1.0 / k[c]).sum();
                        realizations.len() as f64 / s
                    })
                    .collect(),
            );
            spectral_reduce(coarse, &pooled, &mean, l_b)
        }
        TrainingMerge::Concatenate => {
            let mut blocks = Vec::with_capacity(realizations.len());
            let mut eigen_blocks = Vec::with_capacity(realizations.len());
            let mut regularized = Vec::new();
            for k in realizations {
                let snaps = build_snapshots(coarse, k)?;
                let (cols, ev, reg) = reduce_columns(coarse, &snaps, k, l_b)?;
                blocks.push(cols);
                eigen_blocks.push(ev);
                regularized.extend(reg);
            }
            Ok(assemble_basis(coarse, &blocks, eigen_blocks, regularized, l_b))
        }
    }
}

/// Galerkin projection of a fine system onto the offline basis.
pub fn project_coarse(basis: &OfflineBasis, fine: &ForwardSystem) -> Result<ForwardSystem> {
    check_len("basis rows vs fine velocity", fine.n_velocity(), basis.r_off.nrows())?;
    check_len("restriction columns vs fine pressure", fine.n_pressure(), basis.g_off.ncols())?;
    let rt = basis.r_off.transpose();
    let gt = basis.g_off.transpose();
    let a = &(&rt * &fine.a) * &basis.r_off;
    let b = &(&rt * &fine.b) * &gt;
    Ok(ForwardSystem {
        a,
        b,
        c: restrict_diagonal(&basis.g_off, &fine.c),
        d: restrict_diagonal(&basis.g_off, &fine.d),
    })
}

/// Diagonal of `G diag(v) G^T` for a restriction with disjoint rows.
fn restrict_diagonal(g: &CsrMatrix<f64>, v: &DVector<f64>) -> DVector<f64> {
    DVector::from_iterator(
        g.nrows(),
        g.row_iter().map(|row| {
            row.col_indices()
                .iter()
                .zip(row.values())
                .map(|(&c, &w)| w * w * v[c])
                .sum()
        }),
    )
}

/// Project fine load columns: `G = R_off^T G_f`, `F = G_off F_f`.
pub fn project_loads(basis: &OfflineBasis, loads: &Loads) -> Result<Loads> {
    check_len("boundary load rows", basis.r_off.nrows(), loads.g.nrows())?;
    check_len("source load rows", basis.g_off.ncols(), loads.f.nrows())?;
    Ok(Loads {
        f: &basis.g_off * &loads.f,
        g: &basis.r_off.transpose() * &loads.g,
        times: loads.times.clone(),
    })
}

/// Fine-scale velocity and pressure of a coarse solution.
pub fn prolongate(basis: &OfflineBasis, coarse: &BlockVector) -> Result<BlockVector> {
    check_len("coarse velocity", basis.n_velocity(), coarse.velocity.len())?;
    check_len("coarse pressure", basis.n_pressure(), coarse.pressure.len())?;
    Ok(BlockVector {
        velocity: &basis.r_off * &coarse.velocity,
        pressure: &basis.g_off.transpose() * &coarse.pressure,
    })
}
