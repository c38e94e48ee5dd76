//! Squared-exponential Gaussian-process prior: covariance evaluation,
//! type-II maximum-likelihood hyperparameter estimation, and GP regression
//! for the conditional mean and covariance of the log-coefficient.

use ndarray::{Array1, Array2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Point;
use crate::linalg::{cholesky_with_jitter, Cholesky};

/// Hyperparameters of the squared-exponential prior plus the observation
/// noise level.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelHyperparams {
    /// Prior standard deviation of the log-coefficient.
    pub sigma: f64,
    /// Correlation length along x1.
    pub l1: f64,
    /// Correlation length along x2.
    pub l2: f64,
    /// Observation-noise standard deviation.
    pub sigma_eps: f64,
}

impl KernelHyperparams {
    pub fn new(sigma: f64, l1: f64, l2: f64, sigma_eps: f64) -> Result<Self> {
        let theta = Self { sigma, l1, l2, sigma_eps };
        theta.validate()?;
        Ok(theta)
    }

    /// Interprets `l1`, `l2` as standard Gaussian lengthscales
    /// (`exp(-d^2 / (2 l^2))`) and stores the equivalent direct parameters
    /// of [`eval`](Self::eval), i.e. `l * sqrt(2)`.
    pub fn with_gaussian_lengthscales(
        sigma: f64,
        l1: f64,
        l2: f64,
        sigma_eps: f64,
    ) -> Result<Self> {
        let s = std::f64::consts::SQRT_2;
        Self::new(sigma, l1 * s, l2 * s, sigma_eps)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0) || !(self.l1 > 0.0) || !(self.l2 > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "sigma, l1, l2 must be positive, got ({}, {}, {})",
                self.sigma, self.l1, self.l2
            )));
        }
        if !(self.sigma_eps >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "sigma_eps must be nonnegative, got {}",
                self.sigma_eps
            )));
        }
        Ok(())
    }

    /// Covariance between two points:
    /// `sigma^2 * exp(-(dx1/l1)^2 - (dx2/l2)^2)`.
    pub fn eval(&self, x: Point, x_prime: Point) -> f64 {
        let d1 = (x[0] - x_prime[0]) / self.l1;
        let d2 = (x[1] - x_prime[1]) / self.l2;
        self.sigma * self.sigma * (-d1 * d1 - d2 * d2).exp()
    }

    /// Prior variance `sigma^2`.
    pub fn variance(&self) -> f64 {
        self.sigma * self.sigma
    }
}

/// Cross-covariance matrix between two point lists; entry `(i, j)` is
/// `theta.eval(a[i], b[j])`.
pub fn cov_matrix(a: &[Point], b: &[Point], theta: &KernelHyperparams) -> Result<Array2<f64>> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::EmptyPoints);
    }
    let mut out = Array2::zeros((a.len(), b.len()));
    // Rows are independent, so the parallel fill is schedule-invariant.
    out.axis_iter_mut(ndarray::Axis(0))
        .into_par_iter()
        .enumerate()
        .for_each(|(i, mut row)| {
            for (j, v) in row.iter_mut().enumerate() {
                *v = theta.eval(a[i], b[j]);
            }
        });
    Ok(out)
}

/// Point observations of the log-coefficient inside a rectangular domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservationSet {
    locations: Vec<Point>,
    values: Vec<f64>,
    lx: f64,
    ly: f64,
}

impl ObservationSet {
    pub fn new(locations: Vec<Point>, values: Vec<f64>, lx: f64, ly: f64) -> Result<Self> {
        if locations.is_empty() {
            return Err(Error::InvalidObservations("no observations".into()));
        }
        if locations.len() != values.len() {
            return Err(Error::InvalidObservations(format!(
                "{} locations but {} values",
                locations.len(),
                values.len()
            )));
        }
        for (k, p) in locations.iter().enumerate() {
            if !(p[0] >= 0.0 && p[0] <= lx && p[1] >= 0.0 && p[1] <= ly) {
                return Err(Error::InvalidObservations(format!(
                    "location {k} = ({}, {}) outside [0, {lx}] x [0, {ly}]",
                    p[0], p[1]
                )));
            }
        }
        for i in 0..locations.len() {
            for j in (i + 1)..locations.len() {
                if locations[i] == locations[j] {
                    return Err(Error::InvalidObservations(format!(
                        "locations {i} and {j} coincide at ({}, {})",
                        locations[i][0], locations[i][1]
                    )));
                }
            }
        }
        Ok(Self { locations, values, lx, ly })
    }

    pub fn len(&self) -> usize {
        self.locations.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn locations(&self) -> &[Point] {
        &self.locations
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_array(&self) -> Array1<f64> {
        Array1::from_vec(self.values.clone())
    }

    pub fn domain(&self) -> (f64, f64) {
        (self.lx, self.ly)
    }

    /// Returns a new set extended by one observation.
    pub fn extended(&self, location: Point, value: f64) -> Result<Self> {
        let mut locations = self.locations.clone();
        let mut values = self.values.clone();
        locations.push(location);
        values.push(value);
        Self::new(locations, values, self.lx, self.ly)
    }
}

/// Factorization of the observation covariance `C_s + sigma_eps^2 I`,
/// shared by the likelihood and the posterior.
struct ObservationSolve {
    chol: Cholesky,
}

fn observation_solve(obs: &ObservationSet, theta: &KernelHyperparams) -> Result<ObservationSolve> {
    let mut a = cov_matrix(obs.locations(), obs.locations(), theta)?;
    let noise = theta.sigma_eps * theta.sigma_eps;
    for i in 0..obs.len() {
        a[(i, i)] += noise;
    }
    let (chol, _jitter) = cholesky_with_jitter(&a, theta.variance())?;
    Ok(ObservationSolve { chol })
}

/// Log-marginal likelihood of the observations under the prior, computed
/// through a Cholesky factorization (never an explicit inverse):
/// `-1/2 y^T A^-1 y - 1/2 ln|A| - N/2 ln(2 pi)` with `A = C_s + sigma_eps^2 I`.
pub fn log_marginal_likelihood(obs: &ObservationSet, theta: &KernelHyperparams) -> Result<f64> {
    theta.validate()?;
    let solve = observation_solve(obs, theta)?;
    let y = obs.values_array();
    let alpha = solve.chol.solve_vec(&y)?;
    let quad = y.dot(&alpha);
    let n = obs.len() as f64;
    Ok(-0.5 * quad - 0.5 * solve.chol.log_det() - 0.5 * n * (2.0 * std::f64::consts::PI).ln())
}

/// GP posterior over a list of query points.
#[derive(Debug, Clone)]
pub struct GpPosterior {
    /// Posterior mean at each query point.
    pub mean: Array1<f64>,
    /// Posterior covariance between query points.
    pub cov: Array2<f64>,
}

/// Conditional mean and covariance of the log-coefficient at the query
/// points, by GP regression on the observations.
pub fn gp_posterior(
    obs: &ObservationSet,
    theta: &KernelHyperparams,
    query: &[Point],
) -> Result<GpPosterior> {
    theta.validate()?;
    if query.is_empty() {
        return Err(Error::EmptyPoints);
    }
    let solve = observation_solve(obs, theta)?;
    let y = obs.values_array();
    let alpha = solve.chol.solve_vec(&y)?;

    let c_qx = cov_matrix(query, obs.locations(), theta)?;
    let mean = c_qx.dot(&alpha);

    // A^-1 C(X, q), reusing the symmetric cross-covariance.
    let c_xq = c_qx.t().to_owned();
    let ainv_cxq = solve.chol.solve_mat(&c_xq)?;

    let mut cov = cov_matrix(query, query, theta)?;
    let update = c_qx.dot(&ainv_cxq);
    cov -= &update;
    // Symmetrize away the roundoff from the two matrix products.
    for i in 0..cov.nrows() {
        for j in (i + 1)..cov.ncols() {
            let s = 0.5 * (cov[(i, j)] + cov[(j, i)]);
            cov[(i, j)] = s;
            cov[(j, i)] = s;
        }
    }
    Ok(GpPosterior { mean, cov })
}

/// Posterior variance only, evaluated pointwise (no query-pair covariance).
pub fn posterior_variance(
    obs: &ObservationSet,
    theta: &KernelHyperparams,
    points: &[Point],
) -> Result<Array1<f64>> {
    theta.validate()?;
    if points.is_empty() {
        return Err(Error::EmptyPoints);
    }
    let solve = observation_solve(obs, theta)?;
    let c_qx = cov_matrix(points, obs.locations(), theta)?;
    let ainv_cxq = solve.chol.solve_mat(&c_qx.t().to_owned())?;
    let prior = theta.variance();
    let var = Array1::from_iter(
        (0..points.len()).map(|i| prior - c_qx.row(i).dot(&ainv_cxq.column(i))),
    );
    Ok(var)
}

/// Posterior mean at the given points.
pub fn posterior_mean(
    obs: &ObservationSet,
    theta: &KernelHyperparams,
    points: &[Point],
) -> Result<Array1<f64>> {
    theta.validate()?;
    let solve = observation_solve(obs, theta)?;
    let alpha = solve.chol.solve_vec(&obs.values_array())?;
    let c_qx = cov_matrix(points, obs.locations(), theta)?;
    Ok(c_qx.dot(&alpha))
}

/// Outcome of the multi-start likelihood maximization.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct FitResult {
    pub params: KernelHyperparams,
    /// Log-marginal likelihood achieved by `params`.
    pub lml: f64,
    /// False when no start improved beyond numerical noise, in which case
    /// `params` is the best initial guess.
    pub improved: bool,
}

const LOG_EPS_FLOOR: f64 = 1e-8;

fn theta_to_log(theta: &KernelHyperparams) -> [f64; 4] {
    [
        theta.sigma.ln(),
        theta.l1.ln(),
        theta.l2.ln(),
        (theta.sigma_eps + LOG_EPS_FLOOR).ln(),
    ]
}

fn log_to_theta(t: &[f64; 4]) -> KernelHyperparams {
    KernelHyperparams {
        sigma: t[0].exp(),
        l1: t[1].exp(),
        l2: t[2].exp(),
        sigma_eps: (t[3].exp() - LOG_EPS_FLOOR).max(0.0),
    }
}

/// Maximizes the log-marginal likelihood over `log(sigma)`, `log(l1)`,
/// `log(l2)`, `log(sigma_eps + eps0)` by Nelder-Mead from every supplied
/// start, returning the best result found.
pub fn fit_hyperparameters(obs: &ObservationSet, inits: &[KernelHyperparams]) -> Result<FitResult> {
    if inits.is_empty() {
        return Err(Error::InvalidArgument("at least one initial guess required".into()));
    }
    if obs.len() < 3 {
        return Err(Error::InvalidObservations(format!(
            "hyperparameter fitting needs at least 3 observations, got {}",
            obs.len()
        )));
    }
    for init in inits {
        init.validate()?;
    }

    let objective = |t: &[f64; 4]| -> f64 {
        let theta = log_to_theta(t);
        match log_marginal_likelihood(obs, &theta) {
            Ok(lml) if lml.is_finite() => -lml,
            _ => f64::INFINITY,
        }
    };

    let mut best_init_lml = f64::NEG_INFINITY;
    for init in inits {
        if let Ok(lml) = log_marginal_likelihood(obs, init) {
            best_init_lml = best_init_lml.max(lml);
        }
    }
    if !best_init_lml.is_finite() {
        return Err(Error::IllConditioned { max_jitter: 1e-6 });
    }

    let mut best: Option<([f64; 4], f64)> = None;
    for init in inits {
        let t0 = theta_to_log(init);
        let (t_opt, f_opt) = nelder_mead(&objective, t0, 0.25, 400, 1e-12);
        if best.as_ref().map_or(true, |(_, f)| f_opt < *f) {
            best = Some((t_opt, f_opt));
        }
    }
    let (t_best, f_best) = best.expect("at least one start");
    let lml_best = -f_best;

    let noise_floor = 1e-9 * (1.0 + best_init_lml.abs());
    if lml_best > best_init_lml + noise_floor {
        Ok(FitResult { params: log_to_theta(&t_best), lml: lml_best, improved: true })
    } else {
        // Fall back to the best initial guess unchanged.
        let mut best_init = inits[0];
        let mut best_lml = f64::NEG_INFINITY;
        for init in inits {
            if let Ok(lml) = log_marginal_likelihood(obs, init) {
                if lml > best_lml {
                    best_lml = lml;
                    best_init = *init;
                }
            }
        }
        Ok(FitResult { params: best_init, lml: best_lml, improved: false })
    }
}

/// Data-scaled starting points for the likelihood maximization, drawn
/// log-uniformly over `[0.1, 10]` times the scale heuristics.
pub fn default_multistarts(obs: &ObservationSet, n: usize, seed: u64) -> Vec<KernelHyperparams> {
    use rand::Rng;
    let (lx, ly) = obs.domain();
    let y = obs.values();
    let mean = y.iter().sum::<f64>() / y.len() as f64;
    let var = y.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (y.len().max(2) - 1) as f64;
    let sigma0 = var.sqrt().max(1e-3);
    let (l10, l20) = (lx / 4.0, ly / 4.0);

    let mut rng = crate::rng::stream_rng(seed, 0);
    let mut starts = Vec::with_capacity(n);
    for _ in 0..n {
        let scale = |rng: &mut rand_chacha::ChaCha8Rng| 10f64.powf(rng.gen_range(-1.0..1.0));
        starts.push(KernelHyperparams {
            sigma: sigma0 * scale(&mut rng),
            l1: l10 * scale(&mut rng),
            l2: l20 * scale(&mut rng),
            sigma_eps: sigma0 * 10f64.powf(rng.gen_range(-4.0..-0.5)),
        });
    }
    starts
}

/// Nelder-Mead minimization in 4 dimensions. Deterministic for a given start.
fn nelder_mead<F: Fn(&[f64; 4]) -> f64>(
    f: &F,
    x0: [f64; 4],
    step: f64,
    max_iter: usize,
    ftol: f64,
) -> ([f64; 4], f64) {
    const N: usize = 4;
    let (alpha, gamma, rho, sigma) = (1.0, 2.0, 0.5, 0.5);

    let mut simplex: Vec<([f64; 4], f64)> = Vec::with_capacity(N + 1);
    simplex.push((x0, f(&x0)));
    for i in 0..N {
        let mut x = x0;
        x[i] += step;
        simplex.push((x, f(&x)));
    }

    for _ in 0..max_iter {
        simplex.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap_or(std::cmp::Ordering::Equal));
        let spread = simplex[N].1 - simplex[0].1;
        if spread.abs() < ftol * (1.0 + simplex[0].1.abs()) {
            break;
        }

        let mut centroid = [0.0; N];
        for (x, _) in simplex.iter().take(N) {
            for d in 0..N {
                centroid[d] += x[d] / N as f64;
            }
        }

        let worst = simplex[N];
        let mut reflected = [0.0; N];
        for d in 0..N {
            reflected[d] = centroid[d] + alpha * (centroid[d] - worst.0[d]);
        }
        let f_r = f(&reflected);

        if f_r < simplex[0].1 {
            let mut expanded = [0.0; N];
            for d in 0..N {
                expanded[d] = centroid[d] + gamma * (centroid[d] - worst.0[d]);
            }
            let f_e = f(&expanded);
            simplex[N] = if f_e < f_r { (expanded, f_e) } else { (reflected, f_r) };
        } else if f_r < simplex[N - 1].1 {
            simplex[N] = (reflected, f_r);
        } else {
            let mut contracted = [0.0; N];
            for d in 0..N {
                contracted[d] = centroid[d] + rho * (worst.0[d] - centroid[d]);
            }
            let f_c = f(&contracted);
            if f_c < worst.1 {
                simplex[N] = (contracted, f_c);
            } else {
                let best = simplex[0].0;
                for v in simplex.iter_mut().skip(1) {
                    for d in 0..N {
                        v.0[d] = best[d] + sigma * (v.0[d] - best[d]);
                    }
                    v.1 = f(&v.0);
                }
            }
        }
    }
    simplex.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap_or(std::cmp::Ordering::Equal));
    simplex[0]
}
