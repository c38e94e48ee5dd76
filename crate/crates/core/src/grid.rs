//! Structured cell-centered grids over a rectangular domain.
//!
//! Fields are stored as flat vectors in x1-fastest order: node `(i, j)` with
//! `i` along x1 and `j` along x2 maps to index `j * nx + i`. All quadrature
//! uses the midpoint rule with one node per cell.

use ndarray::Array1;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A point in the spatial domain.
pub type Point = [f64; 2];

/// Scalar field sampled at the grid nodes.
pub type Field = Array1<f64>;

/// Uniform cell-centered grid on `[0, lx] x [0, ly]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StructuredGrid {
    nx: usize,
    ny: usize,
    lx: f64,
    ly: f64,
}

impl StructuredGrid {
    pub fn new(nx: usize, ny: usize, lx: f64, ly: f64) -> Result<Self> {
        if nx < 2 || ny < 2 {
            return Err(Error::InvalidArgument(format!(
                "grid must have at least 2 cells per direction, got {nx}x{ny}"
            )));
        }
        if !(lx > 0.0 && ly > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "domain extents must be positive, got {lx} x {ly}"
            )));
        }
        Ok(Self { nx, ny, lx, ly })
    }

    pub fn nx(&self) -> usize {
        self.nx
    }

    pub fn ny(&self) -> usize {
        self.ny
    }

    pub fn lx(&self) -> f64 {
        self.lx
    }

    pub fn ly(&self) -> f64 {
        self.ly
    }

    /// Total number of nodes (cells).
    pub fn len(&self) -> usize {
        self.nx * self.ny
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Cell width along x1.
    pub fn hx(&self) -> f64 {
        self.lx / self.nx as f64
    }

    /// Cell width along x2.
    pub fn hy(&self) -> f64 {
        self.ly / self.ny as f64
    }

    /// Quadrature weight of every node (uniform grid: the cell area).
    pub fn weight(&self) -> f64 {
        self.hx() * self.hy()
    }

    /// Coordinates of node `idx`.
    pub fn node(&self, idx: usize) -> Point {
        let i = idx % self.nx;
        let j = idx / self.nx;
        [
            (i as f64 + 0.5) * self.hx(),
            (j as f64 + 0.5) * self.hy(),
        ]
    }

    /// All node coordinates in storage order.
    pub fn nodes(&self) -> Vec<Point> {
        (0..self.len()).map(|idx| self.node(idx)).collect()
    }

    /// Flat index of cell `(i, j)`.
    pub fn index(&self, i: usize, j: usize) -> usize {
        debug_assert!(i < self.nx && j < self.ny);
        j * self.nx + i
    }

    /// True if the point lies inside or on the boundary of the domain.
    pub fn contains(&self, p: Point) -> bool {
        p[0] >= 0.0 && p[0] <= self.lx && p[1] >= 0.0 && p[1] <= self.ly
    }

    /// L2 norm of a field under the grid quadrature: sqrt(sum w * f^2).
    pub fn field_l2_norm(&self, field: &Field) -> f64 {
        debug_assert_eq!(field.len(), self.len());
        let w = self.weight();
        (field.iter().map(|v| w * v * v).sum::<f64>()).sqrt()
    }

    /// Bilinear interpolation of a node field at an arbitrary point.
    ///
    /// Outside the band of cell centers the value is clamped to the edge
    /// cells, consistent with the piecewise treatment of the discretization.
    pub fn interpolate(&self, field: &Field, p: Point) -> f64 {
        debug_assert_eq!(field.len(), self.len());
        let (i0, i1, tx) = self.bracket(p[0], self.hx(), self.nx);
        let (j0, j1, ty) = self.bracket(p[1], self.hy(), self.ny);
        let f00 = field[self.index(i0, j0)];
        let f10 = field[self.index(i1, j0)];
        let f01 = field[self.index(i0, j1)];
        let f11 = field[self.index(i1, j1)];
        let fy0 = f00 + tx * (f10 - f00);
        let fy1 = f01 + tx * (f11 - f01);
        fy0 + ty * (fy1 - fy0)
    }

    /// Nearest-cell bracketing along one axis for cell-centered data.
    fn bracket(&self, x: f64, h: f64, n: usize) -> (usize, usize, f64) {
        let s = x / h - 0.5;
        if s <= 0.0 {
            return (0, 0, 0.0);
        }
        if s >= (n - 1) as f64 {
            return (n - 1, n - 1, 0.0);
        }
        let i0 = s.floor() as usize;
        (i0, i0 + 1, s - i0 as f64)
    }

    /// Flat index of the node nearest to the point.
    pub fn nearest_node(&self, p: Point) -> usize {
        let clamp = |s: f64, n: usize| -> usize {
            let i = (s).floor() as isize;
            i.clamp(0, n as isize - 1) as usize
        };
        let i = clamp(p[0] / self.hx(), self.nx);
        let j = clamp(p[1] / self.hy(), self.ny);
        self.index(i, j)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::Array1;

    #[test]
    fn weights_sum_to_domain_area() {
        let grid = StructuredGrid::new(7, 5, 2.0, 1.0).unwrap();
        let total = grid.weight() * grid.len() as f64;
        assert_abs_diff_eq!(total, 2.0, epsilon = 1e-12 * 2.0);
    }

    #[test]
    fn rejects_degenerate_grids() {
        assert!(StructuredGrid::new(1, 5, 1.0, 1.0).is_err());
        assert!(StructuredGrid::new(4, 4, 0.0, 1.0).is_err());
    }

    #[test]
    fn l2_norm_matches_direct_sum() {
        let grid = StructuredGrid::new(12, 7, 2.0, 1.0).unwrap();
        let field = Array1::from_iter((0..grid.len()).map(|i| (i as f64 * 0.37).sin()));
        let w = grid.weight();
        let direct: f64 = field.iter().map(|v| w * v * v).sum::<f64>().sqrt();
        assert_abs_diff_eq!(grid.field_l2_norm(&field), direct, epsilon = 1e-12);
    }

    #[test]
    fn constant_field_norm() {
        let grid = StructuredGrid::new(20, 10, 2.0, 1.0).unwrap();
        let field = Array1::from_elem(grid.len(), 3.0);
        assert_abs_diff_eq!(grid.field_l2_norm(&field), 3.0 * 2.0f64.sqrt(), epsilon = 1e-10);
    }

    #[test]
    fn interpolation_reproduces_linear_fields() {
        let grid = StructuredGrid::new(16, 9, 2.0, 1.0).unwrap();
        let field = Array1::from_iter((0..grid.len()).map(|idx| {
            let p = grid.node(idx);
            1.5 * p[0] - 0.7 * p[1] + 0.25
        }));
        // Strictly inside the band of cell centers, bilinear is exact for affine fields.
        for &p in &[[0.31, 0.47], [1.02, 0.5], [1.77, 0.84]] {
            let exact = 1.5 * p[0] - 0.7 * p[1] + 0.25;
            assert_abs_diff_eq!(grid.interpolate(&field, p), exact, epsilon = 1e-12);
        }
    }

    #[test]
    fn interpolation_at_node_returns_node_value() {
        let grid = StructuredGrid::new(8, 6, 2.0, 1.0).unwrap();
        let field = Array1::from_iter((0..grid.len()).map(|i| (i as f64).cos()));
        for idx in [0, 5, 17, grid.len() - 1] {
            let p = grid.node(idx);
            assert_abs_diff_eq!(grid.interpolate(&field, p), field[idx], epsilon = 1e-13);
        }
    }
}
