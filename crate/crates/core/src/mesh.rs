//! Structured rectangular grids with cell and edge indexing.
//!
//! Edges are numbered row by row so that every edge of a cell lies within
//! `2 * nx + 1` indices of every other edge of that cell: for cell row `j`
//! the horizontal edges on the line `y = y_j` come first, followed by the
//! `nx + 1` vertical edges crossing that row. The last block holds the
//! horizontal edges on the top boundary. This keeps the velocity operators
//! banded without a reordering pass.

use crate::error::{Error, Result};

/// Axis-aligned rectangle `[x0, x1] x [y0, y1]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rect {
    pub x0: f64,
    pub x1: f64,
    pub y0: f64,
    pub y1: f64,
}

impl Rect {
    pub const UNIT: Rect = Rect {
        x0: 0.0,
        x1: 1.0,
        y0: 0.0,
        y1: 1.0,
    };

    pub fn width(&self) -> f64 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> f64 {
        self.y1 - self.y0
    }
}

impl Default for Rect {
    fn default() -> Self {
        Rect::UNIT
    }
}

/// One of the four sides of the rectangular domain.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Left,
    Right,
    Bottom,
    Top,
}

impl Side {
    pub const ALL: [Side; 4] = [Side::Left, Side::Right, Side::Bottom, Side::Top];
}

/// Orientation of an edge. Vertical edges carry x-directed flux.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EdgeKind {
    Vertical,
    Horizontal,
}

#[derive(Debug, Clone)]
pub struct Edge {
    pub kind: EdgeKind,
    /// Lattice position: for vertical edges `i in 0..=nx`, `j in 0..ny`;
    /// for horizontal edges `i in 0..nx`, `j in 0..=ny`.
    pub i: usize,
    pub j: usize,
    /// Adjacent cells on the negative and positive side of the edge line.
    pub cells: [Option<usize>; 2],
    pub boundary: Option<Side>,
    /// Unit normal; outward on the boundary, along `+x` or `+y` inside.
    pub normal: [f64; 2],
    pub length: f64,
    pub midpoint: [f64; 2],
}

impl Edge {
    pub fn is_boundary(&self) -> bool {
        self.boundary.is_some()
    }

    /// The adjacent cells that exist (one on the boundary, two inside).
    pub fn adjacent_cells(&self) -> impl Iterator<Item = usize> + '_ {
        self.cells.iter().flatten().copied()
    }

    /// `+1` if the edge normal points out of `cell`, `-1` if it points in.
    ///
    /// Panics if `cell` is not adjacent to the edge.
    pub fn outward_sign(&self, cell: usize) -> f64 {
        let along = match self.kind {
            EdgeKind::Vertical => self.normal[0],
            EdgeKind::Horizontal => self.normal[1],
        };
        // The normal along +axis points out of the negative-side cell.
        if self.cells[0] == Some(cell) {
            along
        } else if self.cells[1] == Some(cell) {
            -along
        } else {
            panic!("cell {cell} is not adjacent to edge ({}, {})", self.i, self.j)
        }
    }
}

/// Uniform `nx x ny` partition of a rectangle.
#[derive(Debug, Clone)]
pub struct RectGrid {
    nx: usize,
    ny: usize,
    domain: Rect,
    hx: f64,
    hy: f64,
    edges: Vec<Edge>,
}

impl RectGrid {
    pub fn new(nx: usize, ny: usize, domain: Rect) -> Result<Self> {
        if nx == 0 || ny == 0 {
            return Err(Error::InvalidArgument(format!(
                "grid needs at least one cell per axis, got {nx} x {ny}"
            )));
        }
        if !(domain.width() > 0.0 && domain.height() > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "degenerate domain {domain:?}"
            )));
        }
        let hx = domain.width() / nx as f64;
        let hy = domain.height() / ny as f64;
        let mut grid = RectGrid {
            nx,
            ny,
            domain,
            hx,
            hy,
            edges: Vec::with_capacity(nx * (ny + 1) + (nx + 1) * ny),
        };
        for j in 0..=ny {
            for i in 0..nx {
                grid.edges.push(grid.make_horizontal(i, j));
            }
            if j < ny {
                for i in 0..=nx {
                    grid.edges.push(grid.make_vertical(i, j));
                }
            }
        }
        Ok(grid)
    }

    pub fn unit(nx: usize, ny: usize) -> Result<Self> {
        Self::new(nx, ny, Rect::UNIT)
    }

    fn make_vertical(&self, i: usize, j: usize) -> Edge {
        let left = (i > 0).then(|| self.cell_index(i - 1, j));
        let right = (i < self.nx).then(|| self.cell_index(i, j));
        let boundary = if i == 0 {
            Some(Side::Left)
        } else if i == self.nx {
            Some(Side::Right)
        } else {
            None
        };
        let nxv = if i == 0 { -1.0 } else { 1.0 };
        Edge {
            kind: EdgeKind::Vertical,
            i,
            j,
            cells: [left, right],
            boundary,
            normal: [nxv, 0.0],
            length: self.hy,
            midpoint: [
                self.domain.x0 + i as f64 * self.hx,
                self.domain.y0 + (j as f64 + 0.5) * self.hy,
            ],
        }
    }

    fn make_horizontal(&self, i: usize, j: usize) -> Edge {
        let below = (j > 0).then(|| self.cell_index(i, j - 1));
        let above = (j < self.ny).then(|| self.cell_index(i, j));
        let boundary = if j == 0 {
            Some(Side::Bottom)
        } else if j == self.ny {
            Some(Side::Top)
        } else {
            None
        };
        let nyv = if j == 0 { -1.0 } else { 1.0 };
        Edge {
            kind: EdgeKind::Horizontal,
            i,
            j,
            cells: [below, above],
            boundary,
            normal: [0.0, nyv],
            length: self.hx,
            midpoint: [
                self.domain.x0 + (i as f64 + 0.5) * self.hx,
                self.domain.y0 + j as f64 * self.hy,
            ],
        }
    }

    pub fn nx(&self) -> usize {
        self.nx
    }

    pub fn ny(&self) -> usize {
        self.ny
    }

    pub fn domain(&self) -> Rect {
        self.domain
    }

    pub fn hx(&self) -> f64 {
        self.hx
    }

    pub fn hy(&self) -> f64 {
        self.hy
    }

    pub fn n_cells(&self) -> usize {
        self.nx * self.ny
    }

    pub fn n_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn cell_area(&self) -> f64 {
        self.hx * self.hy
    }

    /// Row-major cell index (`i` along x).
    pub fn cell_index(&self, i: usize, j: usize) -> usize {
        debug_assert!(i < self.nx && j < self.ny);
        j * self.nx + i
    }

    pub fn cell_ij(&self, cell: usize) -> (usize, usize) {
        (cell % self.nx, cell / self.nx)
    }

    pub fn cell_center(&self, cell: usize) -> [f64; 2] {
        let (i, j) = self.cell_ij(cell);
        [
            self.domain.x0 + (i as f64 + 0.5) * self.hx,
            self.domain.y0 + (j as f64 + 0.5) * self.hy,
        ]
    }

    pub fn horizontal_edge(&self, i: usize, j: usize) -> usize {
        debug_assert!(i < self.nx && j <= self.ny);
        j * (2 * self.nx + 1) + i
    }

    pub fn vertical_edge(&self, i: usize, j: usize) -> usize {
        debug_assert!(i <= self.nx && j < self.ny);
        j * (2 * self.nx + 1) + self.nx + i
    }

    pub fn edge(&self, e: usize) -> &Edge {
        &self.edges[e]
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    /// Edges of a cell as `[left, right, bottom, top]`.
    pub fn cell_edges(&self, cell: usize) -> [usize; 4] {
        let (i, j) = self.cell_ij(cell);
        [
            self.vertical_edge(i, j),
            self.vertical_edge(i + 1, j),
            self.horizontal_edge(i, j),
            self.horizontal_edge(i, j + 1),
        ]
    }

    /// Boundary edges of one side, ordered by increasing coordinate along it.
    pub fn side_edges(&self, side: Side) -> Vec<usize> {
        match side {
            Side::Left => (0..self.ny).map(|j| self.vertical_edge(0, j)).collect(),
            Side::Right => (0..self.ny)
                .map(|j| self.vertical_edge(self.nx, j))
                .collect(),
            Side::Bottom => (0..self.nx).map(|i| self.horizontal_edge(i, 0)).collect(),
            Side::Top => (0..self.nx)
                .map(|i| self.horizontal_edge(i, self.ny))
                .collect(),
        }
    }

    pub fn boundary_edges(&self) -> Vec<usize> {
        Side::ALL
            .iter()
            .flat_map(|&s| self.side_edges(s))
            .collect()
    }
}

/// Piecewise-constant field, one value per cell in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct CellField(Vec<f64>);

impl CellField {
    pub fn new(values: Vec<f64>) -> Self {
        CellField(values)
    }

    pub fn constant(grid: &RectGrid, value: f64) -> Self {
        CellField(vec![value; grid.n_cells()])
    }

    /// Sample `f` at cell centers.
    pub fn from_fn(grid: &RectGrid, f: impl Fn(f64, f64) -> f64) -> Self {
        CellField(
            (0..grid.n_cells())
                .map(|c| {
                    let [x, y] = grid.cell_center(c);
                    f(x, y)
                })
                .collect(),
        )
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    /// Fail with the first cell whose value is not strictly positive.
    pub fn check_positive(&self, field: &'static str) -> Result<()> {
        match self.0.iter().position(|v| !(*v > 0.0)) {
            Some(cell) => Err(Error::NonPositiveField {
                field,
                cell,
                value: self.0[cell],
            }),
            None => Ok(()),
        }
    }

    pub fn scaled(&self, factor: f64) -> Self {
        CellField(self.0.iter().map(|v| v * factor).collect())
    }
}

impl std::ops::Index<usize> for CellField {
    type Output = f64;

    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counts_follow_formula() {
        for (nx, ny, cells, edges) in [(2, 2, 4, 12), (1, 1, 1, 4), (80, 80, 6400, 12960), (3, 5, 15, 38)] {
            let g = RectGrid::unit(nx, ny).unwrap();
            assert_eq!(g.n_cells(), cells);
            assert_eq!(g.n_edges(), edges);
        }
    }

    #[test]
    fn single_cell_is_all_boundary() {
        let g = RectGrid::unit(1, 1).unwrap();
        assert!(g.edges().iter().all(Edge::is_boundary));
        assert_eq!(g.boundary_edges().len(), 4);
    }

    #[test]
    fn zero_cells_rejected() {
        assert!(RectGrid::unit(0, 3).is_err());
        assert!(RectGrid::unit(3, 0).is_err());
    }

    #[test]
    fn adjacency_and_normals() {
        let g = RectGrid::unit(4, 3).unwrap();
        for (e, edge) in g.edges().iter().enumerate() {
            let n = edge.adjacent_cells().count();
            assert_eq!(n, if edge.is_boundary() { 1 } else { 2 }, "edge {e}");
            let norm = (edge.normal[0].powi(2) + edge.normal[1].powi(2)).sqrt();
            assert!((norm - 1.0).abs() < 1e-15);
            if let Some(side) = edge.boundary {
                let c = edge.adjacent_cells().next().unwrap();
                assert_eq!(edge.outward_sign(c), 1.0, "boundary normal must point out ({side:?})");
                let center = g.cell_center(c);
                let d = [edge.midpoint[0] - center[0], edge.midpoint[1] - center[1]];
                assert!(d[0] * edge.normal[0] + d[1] * edge.normal[1] > 0.0);
            }
        }
        for c in 0..g.n_cells() {
            for e in g.cell_edges(c) {
                assert!(g.edge(e).adjacent_cells().any(|x| x == c));
            }
        }
    }

    #[test]
    fn cell_edges_are_banded() {
        let g = RectGrid::unit(7, 4).unwrap();
        for c in 0..g.n_cells() {
            let es = g.cell_edges(c);
            let lo = es.iter().min().unwrap();
            let hi = es.iter().max().unwrap();
            assert!(hi - lo <= 2 * g.nx() + 1);
        }
    }
}
