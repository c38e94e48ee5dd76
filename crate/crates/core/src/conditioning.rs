//! Finite-dimensional conditional models of the log-coefficient, built two
//! ways: condition the field on the data first and truncate the expansion of
//! the conditional covariance (approach 1), or truncate the unconditional
//! expansion first and condition its coefficient vector on the data, which
//! reduces the stochastic dimension by the number of noise-free observations
//! (approach 2).

use ndarray::{Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Field, StructuredGrid};
use crate::kernel_gp::{gp_posterior, KernelHyperparams, ObservationSet};
use crate::kl::{
    count_for_fraction, solve_covariance_eigenproblem, unconditional_basis, weighted_trace,
    KLBasis,
};
use crate::linalg::{cholesky_with_jitter, sym_eigen_desc};
use crate::uq::{FieldModel, MomentField};

/// Which construction produced a conditional model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Provenance {
    /// Condition, then truncate.
    #[serde(rename = "approach-1")]
    Approach1,
    /// Truncate, then condition (rank-reduced).
    #[serde(rename = "approach-2")]
    Approach2,
}

/// Truncation policy for the retained expansion.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Truncation {
    /// Keep exactly this many modes.
    Count(usize),
    /// Keep the smallest number of modes reaching this fraction of the
    /// total variance.
    VarianceFraction(f64),
}

/// Conditional model in scaled-mode form: a realization is
/// `mean + modes * zeta` with `zeta ~ N(0, I_r)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionalKLModel {
    grid: StructuredGrid,
    mean: Field,
    /// `(nodes, r)`; column k is the k-th scaled mode.
    modes: Array2<f64>,
    provenance: Provenance,
}

impl ConditionalKLModel {
    pub fn grid(&self) -> &StructuredGrid {
        &self.grid
    }

    pub fn mean(&self) -> &Field {
        &self.mean
    }

    pub fn modes(&self) -> &Array2<f64> {
        &self.modes
    }

    /// Stochastic dimension of the model.
    pub fn r(&self) -> usize {
        self.modes.ncols()
    }

    pub fn provenance(&self) -> Provenance {
        self.provenance
    }

    /// Pointwise implied variance `sum_k modes_k(x)^2`.
    pub fn variance_field(&self) -> Field {
        let mut var = Array1::zeros(self.grid.len());
        for col in self.modes.axis_iter(Axis(1)) {
            for (v, m) in var.iter_mut().zip(col) {
                *v += m * m;
            }
        }
        var
    }

    /// Closed-form mean and standard deviation of the linear-Gaussian model.
    pub fn implied_moment_field(&self) -> MomentField {
        MomentField {
            mean: self.mean.clone(),
            std: self.variance_field().mapv(f64::sqrt),
        }
    }

    /// Implied covariance on all node pairs, `sum_k modes_k modes_k^T`.
    pub fn implied_covariance(&self) -> Array2<f64> {
        self.modes.dot(&self.modes.t())
    }

    /// Eigenvalues of the covariance operator induced by the model (the
    /// spectrum of the weighted mode Gram matrix). For approach-1 models
    /// these are the retained conditional eigenvalues; approach-2 modes are
    /// not orthogonal, so the induced spectrum comes from re-diagonalizing.
    pub fn induced_eigenvalues(&self) -> Result<Array1<f64>> {
        let w = self.grid.weight();
        let gram = self.modes.t().dot(&self.modes) * w;
        let (vals, _) = sym_eigen_desc(&gram)?;
        Ok(vals.mapv(|v| v.max(0.0)))
    }

    /// Keeps the `r` leading modes (modes are stored in decreasing-variance
    /// order by both constructions).
    pub fn truncated(&self, r: usize) -> Result<Self> {
        if r == 0 || r > self.r() {
            return Err(Error::InvalidArgument(format!(
                "truncation dimension {r} outside 1..={}",
                self.r()
            )));
        }
        Ok(Self {
            grid: self.grid.clone(),
            mean: self.mean.clone(),
            modes: self.modes.slice(ndarray::s![.., ..r]).to_owned(),
            provenance: self.provenance,
        })
    }

    /// Assembles a model directly from its parts (mean, scaled modes).
    pub fn from_parts(
        grid: StructuredGrid,
        mean: Field,
        modes: Array2<f64>,
        provenance: Provenance,
    ) -> Result<Self> {
        if mean.len() != grid.len() || modes.nrows() != grid.len() {
            return Err(Error::DimensionMismatch { expected: grid.len(), got: mean.len() });
        }
        if modes.ncols() == 0 {
            return Err(Error::FullyDetermined);
        }
        Ok(Self { grid, mean, modes, provenance })
    }
}

impl FieldModel for ConditionalKLModel {
    fn stochastic_dim(&self) -> usize {
        self.r()
    }

    fn grid(&self) -> &StructuredGrid {
        &self.grid
    }

    fn realize(&self, coeffs: &[f64]) -> Result<Field> {
        if coeffs.len() != self.r() {
            return Err(Error::DimensionMismatch { expected: self.r(), got: coeffs.len() });
        }
        let zeta = ndarray::ArrayView1::from(coeffs);
        Ok(&self.mean + &self.modes.dot(&zeta))
    }
}

/// Approach 1: GP regression on all grid nodes, then the eigenexpansion of
/// the conditional covariance truncated per the policy. Mode k is
/// `sqrt(lambda_k^c) phi_k^c`.
pub fn condition_then_truncate(
    obs: &ObservationSet,
    theta: &KernelHyperparams,
    grid: &StructuredGrid,
    truncation: Truncation,
) -> Result<ConditionalKLModel> {
    let nodes = grid.nodes();
    let post = gp_posterior(obs, theta, &nodes)?;

    let basis = match truncation {
        Truncation::Count(d_c) => {
            if d_c == 0 {
                return Err(Error::InvalidArgument("d_c must be at least 1".into()));
            }
            let basis = solve_covariance_eigenproblem(grid, &post.cov, d_c.min(grid.len()))?;
            basis.truncated(d_c.min(grid.len()))?
        }
        Truncation::VarianceFraction(fraction) => {
            if !(fraction > 0.0 && fraction <= 1.0) {
                return Err(Error::InvalidArgument(format!(
                    "fraction {fraction} outside (0, 1]"
                )));
            }
            let trace = weighted_trace(grid, &post.cov);
            if trace <= 0.0 {
                return Err(Error::ZeroSpectrum);
            }
            // Solve for a growing number of leading pairs until the retained
            // variance reaches the target.
            let n = grid.len();
            let mut k = 128.min(n);
            loop {
                let basis = solve_covariance_eigenproblem(grid, &post.cov, k)?;
                if let Some(d_c) =
                    count_for_fraction(basis.eigenvalues().as_slice().unwrap(), trace, fraction)
                {
                    break basis.truncated(d_c)?;
                }
                if k == n {
                    // The clipped spectrum cannot reach the target; keep
                    // everything.
                    break basis;
                }
                k = (k * 4).min(n);
            }
        }
    };

    let mut modes = basis.eigenfunctions().clone();
    for (k, mut col) in modes.axis_iter_mut(Axis(1)).enumerate() {
        col *= basis.eigenvalues()[k].sqrt();
    }
    ConditionalKLModel::from_parts(grid.clone(), post.mean, modes, Provenance::Approach1)
}

/// The coefficient vector of a truncated expansion conditioned on the
/// observations: posterior mean, posterior covariance, and its numerical
/// rank.
#[derive(Debug, Clone)]
pub struct ConditionedVariables {
    pub mu_d: Array1<f64>,
    pub m_d: Array2<f64>,
    /// Count of eigenvalues of `m_d` above `1e-8 * lambda_max`.
    pub rank: usize,
}

/// Conditions the coefficients of a truncated basis on the observations:
/// with `B = Lambda^1/2 Phi(X)` and `A = B^T B + sigma_eps^2 I`,
/// `mu = B A^-1 y` and `M = I - B A^-1 B^T`. Eigenfunction values at
/// off-grid locations are interpolated bilinearly from the cell centers.
pub fn condition_xi(
    obs: &ObservationSet,
    theta: &KernelHyperparams,
    basis: &KLBasis,
) -> Result<ConditionedVariables> {
    let d = basis.dim();
    let phi_x = basis.eigenfunctions_at_points(obs.locations()); // (d, N_s)
    let sqrt_lambda = basis.eigenvalues().mapv(f64::sqrt);
    let mut b = phi_x;
    for (k, mut row) in b.axis_iter_mut(Axis(0)).enumerate() {
        row *= sqrt_lambda[k];
    }

    // Truncated measurement covariance C_s^d = B^T B.
    let mut a = b.t().dot(&b);
    let noise = theta.sigma_eps * theta.sigma_eps;
    for i in 0..obs.len() {
        a[(i, i)] += noise;
    }
    let (chol, _) = cholesky_with_jitter(&a, theta.variance())?;

    let y = obs.values_array();
    let mu_d = b.dot(&chol.solve_vec(&y)?);

    let ainv_bt = chol.solve_mat(&b.t().to_owned())?;
    let mut m_d = Array2::eye(d);
    let update = b.dot(&ainv_bt);
    m_d -= &update;
    for i in 0..d {
        for j in (i + 1)..d {
            let s = 0.5 * (m_d[(i, j)] + m_d[(j, i)]);
            m_d[(i, j)] = s;
            m_d[(j, i)] = s;
        }
    }

    let (vals, _) = sym_eigen_desc(&m_d)?;
    let rank = numerical_rank(&vals);
    Ok(ConditionedVariables { mu_d, m_d, rank })
}

fn numerical_rank(desc_vals: &Array1<f64>) -> usize {
    let lambda_max = desc_vals.iter().cloned().fold(0.0f64, f64::max);
    // M has unit natural scale (it is I minus a PSD form bounded by I, so
    // its nonzero eigenvalues are O(1) for any direction the data leaves
    // free). A spectrum entirely below 1e-6 means every coefficient is
    // pinned by the data up to factorization jitter.
    if lambda_max <= 1e-6 {
        return 0;
    }
    desc_vals.iter().filter(|v| **v > 1e-8 * lambda_max).count()
}

/// Approach 2: truncate the unconditional expansion to `d` terms, condition
/// the coefficients, and rewrite the model in the `r` directions the data
/// leaves undetermined. With the symmetric eigendecomposition
/// `M^d = Q D Q^T`, the scaled modes are the columns of
/// `Phi^T Lambda^1/2 Q_r D_r^1/2`, so the implied covariance is exactly
/// `Phi^T Lambda^1/2 M^d Lambda^1/2 Phi` up to the dropped near-zero
/// eigenvalues; the mean is `Phi^T Lambda^1/2 mu^d`.
pub fn truncate_then_condition(
    obs: &ObservationSet,
    theta: &KernelHyperparams,
    grid: &StructuredGrid,
    d: usize,
) -> Result<ConditionalKLModel> {
    let basis = unconditional_basis(grid, theta, d)?;
    truncate_then_condition_with_basis(obs, theta, &basis)
}

/// As [`truncate_then_condition`], reusing an already-solved unconditional
/// basis (must be truncated to the desired `d`).
pub fn truncate_then_condition_with_basis(
    obs: &ObservationSet,
    theta: &KernelHyperparams,
    basis: &KLBasis,
) -> Result<ConditionalKLModel> {
    let grid = basis.grid().clone();
    let cv = condition_xi(obs, theta, basis)?;
    let (vals, q) = sym_eigen_desc(&cv.m_d)?;
    let r = numerical_rank(&vals);
    if r == 0 {
        return Err(Error::FullyDetermined);
    }

    // T = Phi Lambda^1/2, (nodes, d).
    let sqrt_lambda = basis.eigenvalues().mapv(f64::sqrt);
    let mut t = basis.eigenfunctions().clone();
    for (k, mut col) in t.axis_iter_mut(Axis(1)).enumerate() {
        col *= sqrt_lambda[k];
    }

    let mean = t.dot(&cv.mu_d);

    // Q_r D_r^1/2, (d, r).
    let mut qd = q.slice(ndarray::s![.., ..r]).to_owned();
    for (k, mut col) in qd.axis_iter_mut(Axis(1)).enumerate() {
        col *= vals[k].max(0.0).sqrt();
    }
    let modes = t.dot(&qd);
    ConditionalKLModel::from_parts(grid, mean, modes, Provenance::Approach2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Point;
    use approx::assert_abs_diff_eq;
    use ndarray::Array1;

    fn theta065() -> KernelHyperparams {
        KernelHyperparams::new(0.65, 0.15, 0.2, 0.0).unwrap()
    }

    fn random_obs(n: usize, seed: u64, lx: f64, ly: f64) -> ObservationSet {
        use rand::Rng;
        let mut rng = crate::rng::stream_rng(seed, 0);
        let locations: Vec<Point> =
            (0..n).map(|_| [rng.gen_range(0.0..lx), rng.gen_range(0.0..ly)]).collect();
        let values: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        ObservationSet::new(locations, values, lx, ly).unwrap()
    }

    #[test]
    fn huge_noise_recovers_the_unconditional_model() {
        let grid = StructuredGrid::new(16, 8, 2.0, 1.0).unwrap();
        let mut theta = theta065();
        theta.sigma_eps = 1e6 * theta.sigma;
        let obs = random_obs(5, 3, 2.0, 1.0);
        let model =
            condition_then_truncate(&obs, &theta, &grid, Truncation::Count(grid.len())).unwrap();
        let var = model.variance_field();
        for (i, v) in var.iter().enumerate() {
            assert!(
                (v - theta.variance()).abs() <= 1e-3 * theta.variance(),
                "variance {v} at node {i}"
            );
        }
        for m in model.mean().iter() {
            assert!(m.abs() < 1e-3);
        }
    }

    #[test]
    fn full_rank_conditioning_interpolates_at_observed_nodes() {
        let grid = StructuredGrid::new(12, 6, 2.0, 1.0).unwrap();
        let theta = theta065();
        // Observations exactly at node coordinates.
        let idx = [5usize, 30, 55];
        let locations: Vec<Point> = idx.iter().map(|&i| grid.node(i)).collect();
        let obs = ObservationSet::new(locations, vec![0.4, -0.2, 0.9], 2.0, 1.0).unwrap();
        let model =
            condition_then_truncate(&obs, &theta, &grid, Truncation::Count(grid.len())).unwrap();
        let var = model.variance_field();
        for &i in &idx {
            assert!(var[i] <= 1e-8 * theta.variance(), "variance {} at observed node", var[i]);
        }
    }

    #[test]
    fn conditioning_reduces_variance_and_trace() {
        let grid = StructuredGrid::new(16, 8, 2.0, 1.0).unwrap();
        let theta = theta065();
        let obs = random_obs(8, 11, 2.0, 1.0);
        let model =
            condition_then_truncate(&obs, &theta, &grid, Truncation::VarianceFraction(0.99))
                .unwrap();
        let var = model.variance_field();
        let mean_var = var.sum() / var.len() as f64;
        assert!(mean_var < theta.variance());
        // Trace ordering against the unconditional operator.
        let c = crate::kl::kernel_matrix(&grid, |a, b| theta.eval(a, b));
        let uncond_trace = weighted_trace(&grid, &c);
        let cond_trace = var.sum() * grid.weight();
        assert!(cond_trace <= uncond_trace);
    }

    #[test]
    fn conditioned_variables_match_expected_ranks() {
        let grid = StructuredGrid::new(24, 12, 2.0, 1.0).unwrap();
        let theta = theta065();
        // d = 3, one observation: rank 2.
        let basis3 = unconditional_basis(&grid, &theta, 3).unwrap();
        let obs1 = random_obs(1, 5, 2.0, 1.0);
        let cv = condition_xi(&obs1, &theta, &basis3).unwrap();
        assert_eq!(cv.rank, 2);

        // d = 12, five observations: rank 7.
        let basis12 = unconditional_basis(&grid, &theta, 12).unwrap();
        let obs5 = random_obs(5, 6, 2.0, 1.0);
        let cv = condition_xi(&obs5, &theta, &basis12).unwrap();
        assert_eq!(cv.rank, 7);
    }

    #[test]
    fn rank_law_holds_in_general_position() {
        let grid = StructuredGrid::new(40, 20, 2.0, 1.0).unwrap();
        let theta = theta065();
        for (d, n_s) in [(6usize, 2usize), (12, 5), (20, 8), (60, 40)] {
            let basis = unconditional_basis(&grid, &theta, d).unwrap();
            let obs = random_obs(n_s, 1000 + d as u64, 2.0, 1.0);
            let cv = condition_xi(&obs, &theta, &basis).unwrap();
            assert_eq!(cv.rank, d - n_s, "rank law failed for d={d}, N_s={n_s}");
        }
    }

    #[test]
    fn conditioning_covariance_ignores_observed_values() {
        let grid = StructuredGrid::new(16, 8, 2.0, 1.0).unwrap();
        let theta = theta065();
        let basis = unconditional_basis(&grid, &theta, 8).unwrap();
        let obs = random_obs(3, 21, 2.0, 1.0);
        let zeros = ObservationSet::new(obs.locations().to_vec(), vec![0.0; 3], 2.0, 1.0).unwrap();
        let cv = condition_xi(&obs, &theta, &basis).unwrap();
        let cv0 = condition_xi(&zeros, &theta, &basis).unwrap();
        for v in cv0.mu_d.iter() {
            assert_abs_diff_eq!(*v, 0.0, epsilon = 1e-14);
        }
        for (a, b) in cv.m_d.iter().zip(cv0.m_d.iter()) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn m_matrix_eigenvalues_lie_in_unit_interval() {
        let grid = StructuredGrid::new(20, 10, 2.0, 1.0).unwrap();
        let theta = theta065();
        let basis = unconditional_basis(&grid, &theta, 15).unwrap();
        let obs = random_obs(6, 9, 2.0, 1.0);
        let cv = condition_xi(&obs, &theta, &basis).unwrap();
        let (vals, _) = sym_eigen_desc(&cv.m_d).unwrap();
        for v in vals.iter() {
            assert!(*v >= -1e-10 && *v <= 1.0 + 1e-10, "eigenvalue {v}");
        }
    }

    #[test]
    fn approach2_covariance_matches_matrix_product_oracle() {
        let grid = StructuredGrid::new(16, 8, 2.0, 1.0).unwrap();
        let theta = theta065();
        let d = 10;
        let basis = unconditional_basis(&grid, &theta, d).unwrap();
        let obs = random_obs(4, 17, 2.0, 1.0);
        let model = truncate_then_condition_with_basis(&obs, &theta, &basis).unwrap();
        assert_eq!(model.r(), d - 4);

        // Oracle: Phi^T Lambda^1/2 M^d Lambda^1/2 Phi assembled explicitly.
        let cv = condition_xi(&obs, &theta, &basis).unwrap();
        let sqrt_lambda = basis.eigenvalues().mapv(f64::sqrt);
        let mut t = basis.eigenfunctions().clone();
        for (k, mut col) in t.axis_iter_mut(Axis(1)).enumerate() {
            col *= sqrt_lambda[k];
        }
        let oracle = t.dot(&cv.m_d).dot(&t.t());
        let implied = model.implied_covariance();
        let num: f64 = (&implied - &oracle).iter().map(|v| v * v).sum::<f64>().sqrt();
        let den: f64 = oracle.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(num / den < 1e-8, "relative Frobenius error {}", num / den);

        // Mean oracle: Phi^T Lambda^1/2 mu^d.
        let mean_oracle = t.dot(&cv.mu_d);
        for (a, b) in model.mean().iter().zip(mean_oracle.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn weak_conditioning_keeps_variance_away_from_the_observation() {
        // One observation in a corner; the truncation captures the kernel
        // well (99.95% of the trace), so conditioning is a rank-one update
        // whose reach is a few correlation lengths.
        let grid = StructuredGrid::new(40, 20, 2.0, 1.0).unwrap();
        let theta = KernelHyperparams::new(0.65, 0.45, 0.45, 0.0).unwrap();
        let d = 40;
        let basis = unconditional_basis(&grid, &theta, d).unwrap();
        let obs = ObservationSet::new(vec![[1.95, 0.95]], vec![0.7], 2.0, 1.0).unwrap();
        let model = truncate_then_condition_with_basis(&obs, &theta, &basis).unwrap();
        assert_eq!(model.r(), d - 1);

        let var_cond = model.variance_field();
        let var_uncond = basis.variance_field();
        for idx in 0..grid.len() {
            let p = grid.node(idx);
            let dist = ((p[0] - 1.95).powi(2) + (p[1] - 0.95).powi(2)).sqrt();
            if dist > 3.0 * theta.l1 {
                assert!(
                    (var_cond[idx] - var_uncond[idx]).abs() <= 1e-5 * theta.variance(),
                    "node {idx} at distance {dist}: {} vs {}",
                    var_cond[idx],
                    var_uncond[idx]
                );
            }
        }
    }

    #[test]
    fn approaches_disagree_at_equal_dimension() {
        let grid = StructuredGrid::new(16, 8, 2.0, 1.0).unwrap();
        let theta = theta065();
        let obs = random_obs(6, 23, 2.0, 1.0);
        let a2 = truncate_then_condition(&obs, &theta, &grid, 12).unwrap();
        let r = a2.r();
        let a1 = condition_then_truncate(&obs, &theta, &grid, Truncation::Count(r)).unwrap();
        let diff = &a1.implied_covariance() - &a2.implied_covariance();
        let dist: f64 = diff.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(
            dist > 1e-6 * theta.variance(),
            "constructions coincide unexpectedly: Frobenius distance {dist}"
        );
    }

    #[test]
    fn implied_moment_field_shapes() {
        let grid = StructuredGrid::new(6, 4, 2.0, 1.0).unwrap();
        // Single mode: std = |mode|.
        let mode = Array1::from_iter((0..24).map(|i| ((i as f64) * 0.3).sin()));
        let modes = mode.clone().insert_axis(Axis(1));
        let model = ConditionalKLModel::from_parts(
            grid.clone(),
            Array1::zeros(24),
            modes,
            Provenance::Approach1,
        )
        .unwrap();
        let mf = model.implied_moment_field();
        for (s, m) in mf.std.iter().zip(mode.iter()) {
            assert_abs_diff_eq!(*s, m.abs(), epsilon = 1e-14);
        }

        // Tiny single mode stays positive where the mode is nonzero.
        let tiny = ConditionalKLModel::from_parts(
            grid.clone(),
            Array1::zeros(24),
            Array1::from_elem(24, 1e-8).insert_axis(Axis(1)),
            Provenance::Approach2,
        )
        .unwrap();
        for s in tiny.implied_moment_field().std.iter() {
            assert!(*s > 0.0);
        }

        // Zero modes are rejected.
        assert!(ConditionalKLModel::from_parts(
            grid,
            Array1::zeros(24),
            Array2::zeros((24, 0)),
            Provenance::Approach1
        )
        .is_err());
    }

    #[test]
    fn approach1_full_rank_std_matches_posterior_diagonal() {
        let grid = StructuredGrid::new(10, 5, 2.0, 1.0).unwrap();
        let theta = theta065();
        let obs = random_obs(4, 29, 2.0, 1.0);
        let model =
            condition_then_truncate(&obs, &theta, &grid, Truncation::Count(grid.len())).unwrap();
        let post = gp_posterior(&obs, &theta, &grid.nodes()).unwrap();
        let var = model.variance_field();
        for i in 0..grid.len() {
            assert!(
                (var[i] - post.cov[(i, i)].max(0.0)).abs() <= 1e-8,
                "node {i}: {} vs {}",
                var[i],
                post.cov[(i, i)]
            );
        }
    }

    #[test]
    fn fully_determined_model_is_an_error() {
        let grid = StructuredGrid::new(10, 5, 2.0, 1.0).unwrap();
        let theta = theta065();
        let d = 3;
        let obs = random_obs(5, 41, 2.0, 1.0);
        // d <= N_s with exact observations: no stochastic dimension left.
        let res = truncate_then_condition(&obs, &theta, &grid, d);
        assert!(matches!(res, Err(Error::FullyDetermined)));
    }
}
