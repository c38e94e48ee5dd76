//! Karhunen-Loeve expansions: discretization of the covariance eigenvalue
//! problem on the grid by the Nystrom method (midpoint quadrature on cell
//! centers, symmetrized weighted eigenproblem), variance-based truncation,
//! and evaluation of truncated expansions.

use ndarray::{Array1, Array2, Axis};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::grid::{Field, Point, StructuredGrid};
use crate::linalg::{sym_eigen_desc, sym_eigen_top_k, sym_eigenvalues_desc};

/// Mean field plus weighted-orthonormal eigenpairs of a covariance operator
/// sampled on the grid.
#[derive(Debug, Clone)]
pub struct KLBasis {
    grid: StructuredGrid,
    mean: Field,
    /// Nonnegative, sorted non-increasing.
    eigenvalues: Array1<f64>,
    /// One eigenfunction per column, orthonormal under the grid quadrature.
    eigenfunctions: Array2<f64>,
}

impl KLBasis {
    pub fn grid(&self) -> &StructuredGrid {
        &self.grid
    }

    pub fn mean(&self) -> &Field {
        &self.mean
    }

    pub fn eigenvalues(&self) -> &Array1<f64> {
        &self.eigenvalues
    }

    /// Eigenfunctions as columns of an `(nodes, d)` matrix.
    pub fn eigenfunctions(&self) -> &Array2<f64> {
        &self.eigenfunctions
    }

    /// Retained stochastic dimension.
    pub fn dim(&self) -> usize {
        self.eigenvalues.len()
    }

    /// Replaces the mean field.
    pub fn with_mean(mut self, mean: Field) -> Self {
        assert_eq!(mean.len(), self.grid.len());
        self.mean = mean;
        self
    }

    /// Keeps the leading `d` eigenpairs.
    pub fn truncated(&self, d: usize) -> Result<Self> {
        if d == 0 || d > self.dim() {
            return Err(Error::InvalidArgument(format!(
                "truncation dimension {d} outside 1..={}",
                self.dim()
            )));
        }
        Ok(Self {
            grid: self.grid.clone(),
            mean: self.mean.clone(),
            eigenvalues: self.eigenvalues.slice(ndarray::s![..d]).to_owned(),
            eigenfunctions: self.eigenfunctions.slice(ndarray::s![.., ..d]).to_owned(),
        })
    }

    /// Realization of the expansion: `mean + sum_i sqrt(lambda_i) phi_i xi_i`.
    pub fn evaluate(&self, xi: &[f64]) -> Result<Field> {
        if xi.len() != self.dim() {
            return Err(Error::DimensionMismatch { expected: self.dim(), got: xi.len() });
        }
        let scaled = Array1::from_iter(
            self.eigenvalues.iter().zip(xi).map(|(l, x)| l.sqrt() * x),
        );
        Ok(&self.mean + &self.eigenfunctions.dot(&scaled))
    }

    /// Covariance implied by the retained eigenpairs on all node pairs:
    /// `sum_i lambda_i phi_i(x) phi_i(x')`.
    pub fn covariance(&self) -> Array2<f64> {
        let mut scaled = self.eigenfunctions.clone();
        for (k, mut col) in scaled.axis_iter_mut(Axis(1)).enumerate() {
            col *= self.eigenvalues[k];
        }
        scaled.dot(&self.eigenfunctions.t())
    }

    /// Pointwise variance implied by the retained eigenpairs.
    pub fn variance_field(&self) -> Field {
        let mut var = Array1::zeros(self.grid.len());
        for (k, col) in self.eigenfunctions.axis_iter(Axis(1)).enumerate() {
            let l = self.eigenvalues[k];
            for (v, phi) in var.iter_mut().zip(col) {
                *v += l * phi * phi;
            }
        }
        var
    }

    /// Eigenfunction values at arbitrary points (bilinear interpolation from
    /// cell centers), as a `(d, points)` matrix.
    pub fn eigenfunctions_at_points(&self, points: &[Point]) -> Array2<f64> {
        let d = self.dim();
        let mut out = Array2::zeros((d, points.len()));
        for k in 0..d {
            let col = self.eigenfunctions.column(k).to_owned();
            for (j, &p) in points.iter().enumerate() {
                out[(k, j)] = self.grid.interpolate(&col, p);
            }
        }
        out
    }
}

/// Assembles the kernel matrix over the grid nodes.
pub fn kernel_matrix<F>(grid: &StructuredGrid, cov: F) -> Array2<f64>
where
    F: Fn(Point, Point) -> f64 + Sync,
{
    let nodes = grid.nodes();
    let n = nodes.len();
    let mut c = Array2::zeros((n, n));
    c.axis_iter_mut(Axis(0))
        .into_par_iter()
        .enumerate()
        .for_each(|(i, mut row)| {
            for (j, v) in row.iter_mut().enumerate() {
                *v = cov(nodes[i], nodes[j]);
            }
        });
    c
}

/// Exact trace of the covariance operator under the grid quadrature:
/// `sum_i w_i C(x_i, x_i)`.
pub fn weighted_trace(grid: &StructuredGrid, c: &Array2<f64>) -> f64 {
    let w = grid.weight();
    (0..c.nrows()).map(|i| w * c[(i, i)]).sum()
}

fn check_symmetry(c: &Array2<f64>) -> Result<()> {
    let n = c.nrows();
    let scale = c.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(f64::MIN_POSITIVE);
    let mut worst = 0.0f64;
    for i in 0..n {
        for j in (i + 1)..n {
            worst = worst.max((c[(i, j)] - c[(j, i)]).abs());
        }
    }
    if worst > 1e-8 * scale {
        return Err(Error::NonSymmetricCovariance { asymmetry: worst / scale });
    }
    Ok(())
}

/// Converts eigenpairs of the weighted matrix `W^1/2 C W^1/2` back to
/// quadrature-orthonormal eigenfunctions, clipping roundoff-negative
/// eigenvalues to zero.
fn build_basis(
    grid: &StructuredGrid,
    values: Array1<f64>,
    weighted_vectors: Array2<f64>,
) -> Result<KLBasis> {
    let lambda1 = values.iter().cloned().fold(0.0f64, f64::max);
    let mut eigenvalues = values;
    for v in eigenvalues.iter_mut() {
        if *v < 0.0 {
            if *v < -1e-10 * lambda1 {
                return Err(Error::NotPositiveSemiDefinite { eigenvalue: *v });
            }
            *v = 0.0;
        }
    }
    let inv_sqrt_w = 1.0 / grid.weight().sqrt();
    let eigenfunctions = weighted_vectors * inv_sqrt_w;
    Ok(KLBasis {
        grid: grid.clone(),
        mean: Array1::zeros(grid.len()),
        eigenvalues,
        eigenfunctions,
    })
}

/// Leading `d_max` eigenpairs of the integral operator whose kernel is the
/// given covariance matrix sampled on the grid nodes (zero-mean basis).
pub fn solve_covariance_eigenproblem(
    grid: &StructuredGrid,
    c: &Array2<f64>,
    d_max: usize,
) -> Result<KLBasis> {
    let n = grid.len();
    if c.nrows() != n || c.ncols() != n {
        return Err(Error::DimensionMismatch { expected: n, got: c.nrows() });
    }
    if d_max == 0 || d_max > n {
        return Err(Error::InvalidArgument(format!("d_max {d_max} outside 1..={n}")));
    }
    check_symmetry(c)?;
    // Uniform midpoint weights: W^1/2 C W^1/2 = w C.
    let weighted = c * grid.weight();
    let (values, vectors) = if d_max == n {
        sym_eigen_desc(&weighted)?
    } else {
        sym_eigen_top_k(&weighted, d_max)?
    };
    let values = values.slice(ndarray::s![..d_max]).to_owned();
    let vectors = vectors.slice(ndarray::s![.., ..d_max]).to_owned();
    build_basis(grid, values, vectors)
}

/// As [`solve_covariance_eigenproblem`] but assembling the kernel matrix
/// from a covariance function first.
pub fn solve_kernel_eigenproblem<F>(
    grid: &StructuredGrid,
    cov: F,
    d_max: usize,
) -> Result<KLBasis>
where
    F: Fn(Point, Point) -> f64 + Sync,
{
    let c = kernel_matrix(grid, cov);
    solve_covariance_eigenproblem(grid, &c, d_max)
}

/// All eigenvalues (descending) of the discretized covariance operator.
pub fn covariance_spectrum(grid: &StructuredGrid, c: &Array2<f64>) -> Result<Array1<f64>> {
    check_symmetry(c)?;
    let weighted = c * grid.weight();
    let mut values = sym_eigenvalues_desc(&weighted)?;
    let lambda1 = values.iter().cloned().fold(0.0f64, f64::max);
    for v in values.iter_mut() {
        if *v < 0.0 && *v >= -1e-10 * lambda1 {
            *v = 0.0;
        }
    }
    Ok(values)
}

/// Eigenproblem for a separable kernel `cov(x, x') = kx(x1, x1') * ky(x2, x2')`:
/// the weighted matrix is a Kronecker product of the two 1-D Nystrom
/// matrices, so its eigenpairs are products of the 1-D eigenpairs. This is
/// the same discretized operator as [`solve_kernel_eigenproblem`], solved
/// through its tensor structure.
pub fn solve_separable_kernel_eigenproblem<FX, FY>(
    grid: &StructuredGrid,
    kx: FX,
    ky: FY,
    d_max: usize,
) -> Result<KLBasis>
where
    FX: Fn(f64, f64) -> f64,
    FY: Fn(f64, f64) -> f64,
{
    let n = grid.len();
    if d_max == 0 || d_max > n {
        return Err(Error::InvalidArgument(format!("d_max {d_max} outside 1..={n}")));
    }
    let (nx, ny) = (grid.nx(), grid.ny());
    let xs: Vec<f64> = (0..nx).map(|i| (i as f64 + 0.5) * grid.hx()).collect();
    let ys: Vec<f64> = (0..ny).map(|j| (j as f64 + 0.5) * grid.hy()).collect();

    let solve_1d = |coords: &[f64], h: f64, k: &dyn Fn(f64, f64) -> f64| -> Result<(Array1<f64>, Array2<f64>)> {
        let m = coords.len();
        let mut c = Array2::zeros((m, m));
        for i in 0..m {
            for j in 0..m {
                c[(i, j)] = h * k(coords[i], coords[j]);
            }
        }
        sym_eigen_desc(&c)
    };
    let (vx, qx) = solve_1d(&xs, grid.hx(), &kx)?;
    let (vy, qy) = solve_1d(&ys, grid.hy(), &ky)?;

    // Product eigenvalues, sorted descending; ties broken by index for
    // reproducibility.
    let mut products: Vec<(f64, usize, usize)> = Vec::with_capacity(nx * ny);
    for ix in 0..nx {
        for iy in 0..ny {
            products.push((vx[ix] * vy[iy], ix, iy));
        }
    }
    products.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    products.truncate(d_max);

    let mut values = Array1::zeros(d_max);
    let mut vectors = Array2::zeros((n, d_max));
    for (k, &(lambda, ix, iy)) in products.iter().enumerate() {
        values[k] = lambda;
        for j in 0..ny {
            for i in 0..nx {
                vectors[(grid.index(i, j), k)] = qx[(i, ix)] * qy[(j, iy)];
            }
        }
    }
    build_basis(grid, values, vectors)
}

/// Unconditional basis of the squared-exponential prior, via the separable
/// tensor factorization.
pub fn unconditional_basis(
    grid: &StructuredGrid,
    theta: &crate::kernel_gp::KernelHyperparams,
    d_max: usize,
) -> Result<KLBasis> {
    theta.validate()?;
    let s2 = theta.variance();
    let l1 = theta.l1;
    let l2 = theta.l2;
    solve_separable_kernel_eigenproblem(
        grid,
        move |a, b| {
            let d = (a - b) / l1;
            s2 * (-d * d).exp()
        },
        move |a, b| {
            let d = (a - b) / l2;
            (-d * d).exp()
        },
        d_max,
    )
}

/// Smallest `d` with `sum_{i<=d} lambda_i >= fraction * sum_all lambda_i`.
pub fn truncate_by_variance(eigenvalues: &[f64], fraction: f64) -> Result<usize> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::InvalidArgument(format!("fraction {fraction} outside (0, 1]")));
    }
    let total: f64 = eigenvalues.iter().sum();
    if total <= 0.0 {
        return Err(Error::ZeroSpectrum);
    }
    count_for_fraction(eigenvalues, total, fraction)
        .ok_or_else(|| Error::InvalidArgument("spectrum does not reach the requested fraction".into()))
}

/// Smallest prefix of a (possibly partial) descending spectrum reaching
/// `fraction * total`; `None` if the prefix never reaches it.
pub(crate) fn count_for_fraction(values: &[f64], total: f64, fraction: f64) -> Option<usize> {
    let target = fraction * total;
    let mut acc = 0.0;
    for (i, v) in values.iter().enumerate() {
        acc += v;
        if acc >= target - 1e-12 * total.abs() {
            return Some(i + 1);
        }
    }
    None
}
