//! Forward propagation of a Gaussian field model through the diffusion
//! solve: Monte Carlo moment estimation with reproducible per-realization
//! substreams, and Smolyak sparse-grid collocation built from probabilists'
//! Gauss-Hermite rules with linear growth.

use ndarray::{Array1, Array2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Field, StructuredGrid};
use crate::kl::KLBasis;
use crate::linalg::sym_eigen_desc;
use crate::pde::{solve_diffusion, DiffusionProblem};

/// Pointwise mean and standard deviation of a field on the grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentField {
    pub mean: Field,
    pub std: Field,
}

/// A Gaussian field model that can be realized from iid standard-normal
/// coefficients.
pub trait FieldModel: Sync {
    /// Number of coefficients a realization consumes.
    fn stochastic_dim(&self) -> usize;

    fn grid(&self) -> &StructuredGrid;

    /// Field realization for the given coefficient vector.
    fn realize(&self, coeffs: &[f64]) -> Result<Field>;
}

impl FieldModel for KLBasis {
    fn stochastic_dim(&self) -> usize {
        self.dim()
    }

    fn grid(&self) -> &StructuredGrid {
        KLBasis::grid(self)
    }

    fn realize(&self, coeffs: &[f64]) -> Result<Field> {
        self.evaluate(coeffs)
    }
}

/// Probabilists' Gauss-Hermite rule with `n` points: integrates polynomials
/// of degree up to `2n - 1` exactly against the standard normal weight.
///
/// Built by the Golub-Welsch procedure on the Jacobi matrix of the
/// probabilists' Hermite recurrence (zero diagonal, off-diagonal sqrt(k)).
/// Nodes are symmetrized so shared abscissae (in particular 0) are exact
/// across rule sizes.
pub fn gauss_hermite(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 1);
    if n == 1 {
        return (vec![0.0], vec![1.0]);
    }
    let mut jacobi = Array2::zeros((n, n));
    for k in 1..n {
        let b = (k as f64).sqrt();
        jacobi[(k - 1, k)] = b;
        jacobi[(k, k - 1)] = b;
    }
    let (values, vectors) = sym_eigen_desc(&jacobi).expect("tridiagonal eigensolve");
    // Ascending nodes; weight_i = (first eigenvector component)^2.
    let mut pairs: Vec<(f64, f64)> = (0..n)
        .map(|k| (values[n - 1 - k], vectors[(0, n - 1 - k)].powi(2)))
        .collect();
    pairs.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());

    // Enforce exact +/- symmetry of the rule.
    let mut nodes: Vec<f64> = pairs.iter().map(|p| p.0).collect();
    let mut weights: Vec<f64> = pairs.iter().map(|p| p.1).collect();
    for i in 0..n / 2 {
        let j = n - 1 - i;
        let x = 0.5 * (nodes[j] - nodes[i]);
        nodes[i] = -x;
        nodes[j] = x;
        let w = 0.5 * (weights[i] + weights[j]);
        weights[i] = w;
        weights[j] = w;
    }
    if n % 2 == 1 {
        nodes[n / 2] = 0.0;
    }
    (nodes, weights)
}

/// Smolyak sparse quadrature rule in `dim` dimensions for a standard normal
/// measure; weights carry the signed combination coefficients.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SparseGridRule {
    pub dim: usize,
    pub level: usize,
    pub nodes: Vec<Vec<f64>>,
    pub weights: Vec<f64>,
}

impl SparseGridRule {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Quadrature of a scalar function over the rule.
    pub fn integrate<F: Fn(&[f64]) -> f64>(&self, f: F) -> f64 {
        self.nodes.iter().zip(&self.weights).map(|(x, w)| w * f(x)).sum()
    }
}

fn binomial(n: usize, k: usize) -> f64 {
    if k > n {
        return 0.0;
    }
    let k = k.min(n - k);
    let mut acc = 1.0f64;
    for i in 0..k {
        acc = acc * (n - i) as f64 / (i + 1) as f64;
    }
    acc
}

/// Sparse-grid Gauss-Hermite rule: Smolyak combination of 1-D rules with
/// linear growth (the 1-D rule at level `i` has `i` points), with duplicate
/// nodes merged (coordinate tolerance 1e-12) and weights summed.
pub fn smolyak_grid(dim: usize, level: usize) -> Result<SparseGridRule> {
    if dim == 0 || level == 0 {
        return Err(Error::InvalidArgument("dimension and level must be at least 1".into()));
    }
    // 1-D rules for levels 1..=level.
    let rules: Vec<(Vec<f64>, Vec<f64>)> = (1..=level).map(gauss_hermite).collect();

    // Multi-indices i with i_k >= 1 and |i| <= dim + level - 1, enumerated
    // through their excess over the all-ones index. The combination
    // coefficient for excess m is (-1)^(level-1-m) * C(dim-1, level-1-m);
    // indices whose coefficient vanishes are skipped.
    let mut raw: Vec<(Vec<f64>, f64)> = Vec::new();
    let mut active: Vec<(usize, usize)> = Vec::new(); // (dimension, excess)

    fn visit(
        dim: usize,
        level: usize,
        next_dim: usize,
        budget: usize,
        active: &mut Vec<(usize, usize)>,
        rules: &[(Vec<f64>, Vec<f64>)],
        raw: &mut Vec<(Vec<f64>, f64)>,
    ) {
        let m: usize = active.iter().map(|(_, e)| e).sum();
        let k = level - 1 - m;
        let coeff_mag = binomial(dim - 1, k);
        if coeff_mag != 0.0 {
            let coeff = if k % 2 == 0 { coeff_mag } else { -coeff_mag };
            // Tensor over the active dimensions (inactive ones contribute
            // the single node 0 with weight 1).
            let mut points: Vec<(Vec<f64>, f64)> = vec![(vec![0.0; dim], coeff)];
            for &(d, excess) in active.iter() {
                let (nodes, weights) = &rules[excess]; // 1-D level = excess + 1
                let mut next = Vec::with_capacity(points.len() * nodes.len());
                for (p, w) in &points {
                    for (x, wx) in nodes.iter().zip(weights) {
                        let mut q = p.clone();
                        q[d] = *x;
                        next.push((q, w * wx));
                    }
                }
                points = next;
            }
            raw.extend(points);
        }
        if budget == 0 {
            return;
        }
        for d in next_dim..dim {
            for e in 1..=budget {
                active.push((d, e));
                visit(dim, level, d + 1, budget - e, active, rules, raw);
                active.pop();
            }
        }
    }
    visit(dim, level, 0, level - 1, &mut active, &rules, &mut raw);

    // Merge duplicates: sort lexicographically, then sweep.
    raw.sort_by(|a, b| {
        for (x, y) in a.0.iter().zip(&b.0) {
            match x.total_cmp(y) {
                std::cmp::Ordering::Equal => continue,
                o => return o,
            }
        }
        std::cmp::Ordering::Equal
    });
    let tol = 1e-12;
    let mut nodes: Vec<Vec<f64>> = Vec::new();
    let mut weights: Vec<f64> = Vec::new();
    for (p, w) in raw {
        if let (Some(last), Some(lw)) = (nodes.last(), weights.last_mut()) {
            if last.iter().zip(&p).all(|(a, b)| (a - b).abs() <= tol) {
                *lw += w;
                continue;
            }
        }
        nodes.push(p);
        weights.push(w);
    }
    Ok(SparseGridRule { dim, level, nodes, weights })
}

/// Streaming moment accumulator (Welford update, Chan merge): avoids the
/// sum-of-squares cancellation, keeps the spread of a constant ensemble at
/// exactly zero, and merges deterministically in a fixed order.
struct MomentAccumulator {
    count: usize,
    mean: Field,
    m2: Field,
}

impl MomentAccumulator {
    fn new(len: usize) -> Self {
        Self { count: 0, mean: Array1::zeros(len), m2: Array1::zeros(len) }
    }

    fn push(&mut self, field: &Field) {
        self.count += 1;
        let n = self.count as f64;
        for ((m, q), v) in self.mean.iter_mut().zip(self.m2.iter_mut()).zip(field) {
            let delta = v - *m;
            *m += delta / n;
            *q += delta * (v - *m);
        }
    }

    fn merge(&mut self, other: &MomentAccumulator) {
        if other.count == 0 {
            return;
        }
        if self.count == 0 {
            self.count = other.count;
            self.mean.assign(&other.mean);
            self.m2.assign(&other.m2);
            return;
        }
        let (na, nb) = (self.count as f64, other.count as f64);
        let n = na + nb;
        for ((ma, qa), (mb, qb)) in self
            .mean
            .iter_mut()
            .zip(self.m2.iter_mut())
            .zip(other.mean.iter().zip(other.m2.iter()))
        {
            let delta = mb - *ma;
            *ma += delta * nb / n;
            *qa += qb + delta * delta * na * nb / n;
        }
        self.count += other.count;
    }

    /// Sample mean and (n-1)-denominator standard deviation.
    fn finish(&self) -> MomentField {
        let n = self.count as f64;
        let std = self.m2.mapv(|q| (q / (n - 1.0)).max(0.0).sqrt());
        MomentField { mean: self.mean.clone(), std }
    }
}

const MC_CHUNK: usize = 64;

fn mc_chunk_accumulate<M: FieldModel>(
    model: &M,
    problem: &DiffusionProblem,
    seed: u64,
    range: std::ops::Range<usize>,
) -> Result<(MomentAccumulator, MomentAccumulator)> {
    let len = model.grid().len();
    let dim = model.stochastic_dim();
    let mut acc_g = MomentAccumulator::new(len);
    let mut acc_u = MomentAccumulator::new(len);
    for i in range {
        let xi = crate::rng::standard_normal_vec(seed, i as u64, dim);
        let g = model
            .realize(&xi)
            .map_err(|e| e.with_context(format!("realization {i}")))?;
        let k = g.mapv(f64::exp);
        let u = solve_diffusion(problem, &k)
            .map_err(|e| e.with_context(format!("realization {i}")))?;
        acc_g.push(&g);
        acc_u.push(&u.values);
    }
    Ok((acc_g, acc_u))
}

/// Monte Carlo estimate of the mean and standard deviation of the field
/// model and of the corresponding diffusion solution with `k = exp(g)`.
///
/// Realization `i` draws from substream `(seed, i)`, and partial sums are
/// combined over fixed chunk boundaries in index order, so results are
/// bitwise identical for a given `(seed, n)` regardless of thread count.
pub fn monte_carlo_moments<M: FieldModel>(
    model: &M,
    problem: &DiffusionProblem,
    n: usize,
    seed: u64,
) -> Result<(MomentField, MomentField)> {
    if n < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 samples, got {n}")));
    }
    if model.grid() != problem.grid() {
        return Err(Error::InvalidArgument("model and problem grids differ".into()));
    }
    let n_chunks = n.div_ceil(MC_CHUNK);
    let partials: Vec<Result<(MomentAccumulator, MomentAccumulator)>> = (0..n_chunks)
        .into_par_iter()
        .map(|c| {
            let lo = c * MC_CHUNK;
            let hi = ((c + 1) * MC_CHUNK).min(n);
            mc_chunk_accumulate(model, problem, seed, lo..hi)
        })
        .collect();

    let len = model.grid().len();
    let mut acc_g = MomentAccumulator::new(len);
    let mut acc_u = MomentAccumulator::new(len);
    for partial in partials {
        let (g, u) = partial?;
        acc_g.merge(&g);
        acc_u.merge(&u);
    }
    Ok((acc_g.finish(), acc_u.finish()))
}

/// L2 norms of the running MC estimators at the requested sample counts.
/// Checkpoint `n` reproduces `monte_carlo_moments(model, problem, n, seed)`
/// exactly (same substreams).
#[derive(Debug, Clone, Serialize)]
pub struct ConvergenceRow {
    pub n: usize,
    pub norm_mean_g: f64,
    pub norm_std_g: f64,
    pub norm_mean_u: f64,
    pub norm_std_u: f64,
}

pub fn monte_carlo_convergence<M: FieldModel>(
    model: &M,
    problem: &DiffusionProblem,
    checkpoints: &[usize],
    seed: u64,
) -> Result<Vec<ConvergenceRow>> {
    let mut sorted = checkpoints.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    if sorted.first().copied().unwrap_or(0) < 2 {
        return Err(Error::InvalidArgument("checkpoints must be at least 2".into()));
    }
    let len = model.grid().len();
    let grid = model.grid().clone();
    let n_max = *sorted.last().unwrap();

    // Partial sums for every complete chunk below the last checkpoint; each
    // checkpoint is then reassembled with exactly the chunk decomposition
    // monte_carlo_moments(n) uses, so the rows reproduce the standalone
    // estimates bitwise.
    let n_full = n_max / MC_CHUNK;
    let full: Vec<Result<(MomentAccumulator, MomentAccumulator)>> = (0..n_full)
        .into_par_iter()
        .map(|c| mc_chunk_accumulate(model, problem, seed, c * MC_CHUNK..(c + 1) * MC_CHUNK))
        .collect();
    let mut full_partials = Vec::with_capacity(n_full);
    for partial in full {
        full_partials.push(partial?);
    }

    let mut rows = Vec::with_capacity(sorted.len());
    for &target in &sorted {
        let complete = target / MC_CHUNK;
        let mut acc_g = MomentAccumulator::new(len);
        let mut acc_u = MomentAccumulator::new(len);
        for (g, u) in full_partials.iter().take(complete) {
            acc_g.merge(g);
            acc_u.merge(u);
        }
        if target % MC_CHUNK != 0 {
            let (g, u) = mc_chunk_accumulate(model, problem, seed, complete * MC_CHUNK..target)?;
            acc_g.merge(&g);
            acc_u.merge(&u);
        }
        let mg = acc_g.finish();
        let mu = acc_u.finish();
        rows.push(ConvergenceRow {
            n: target,
            norm_mean_g: grid.field_l2_norm(&mg.mean),
            norm_std_g: grid.field_l2_norm(&mg.std),
            norm_mean_u: grid.field_l2_norm(&mu.mean),
            norm_std_u: grid.field_l2_norm(&mu.std),
        });
    }
    Ok(rows)
}

/// Sparse-grid collocation moments of `g` and `u`.
#[derive(Debug, Clone)]
pub struct CollocationMoments {
    pub g: MomentField,
    pub u: MomentField,
    /// Number of grid entries where a negative quadrature variance was
    /// clipped to zero (signed Smolyak weights make small negatives
    /// possible).
    pub negative_variance_clips: usize,
}

/// Weighted accumulator for the signed collocation sums.
struct WeightedAccumulator {
    sum: Field,
    sum_sq: Field,
}

impl WeightedAccumulator {
    fn new(len: usize) -> Self {
        Self { sum: Array1::zeros(len), sum_sq: Array1::zeros(len) }
    }

    fn push(&mut self, field: &Field, w: f64) {
        for ((s, q), v) in self.sum.iter_mut().zip(self.sum_sq.iter_mut()).zip(field) {
            *s += w * v;
            *q += w * v * v;
        }
    }

    fn merge(&mut self, other: &WeightedAccumulator) {
        self.sum += &other.sum;
        self.sum_sq += &other.sum_sq;
    }

    fn finish(&self) -> (MomentField, usize) {
        let mut clips = 0usize;
        let std = Array1::from_iter(self.sum.iter().zip(&self.sum_sq).map(|(s, q)| {
            let var = q - s * s;
            if var < 0.0 {
                clips += 1;
                0.0
            } else {
                var.sqrt()
            }
        }));
        (MomentField { mean: self.sum.clone(), std }, clips)
    }
}

/// Evaluates the model and solves the diffusion problem at every quadrature
/// node; mean `= sum w_j u_j`, variance `= sum w_j u_j^2 - mean^2` clipped
/// at zero. Deterministic: node order is fixed by the rule.
pub fn collocation_moments<M: FieldModel>(
    model: &M,
    problem: &DiffusionProblem,
    rule: &SparseGridRule,
) -> Result<CollocationMoments> {
    if rule.dim != model.stochastic_dim() {
        return Err(Error::DimensionMismatch {
            expected: model.stochastic_dim(),
            got: rule.dim,
        });
    }
    if model.grid() != problem.grid() {
        return Err(Error::InvalidArgument("model and problem grids differ".into()));
    }
    let len = model.grid().len();
    let n_nodes = rule.len();
    let n_chunks = n_nodes.div_ceil(MC_CHUNK);
    let partials: Vec<Result<(WeightedAccumulator, WeightedAccumulator)>> = (0..n_chunks)
        .into_par_iter()
        .map(|c| {
            let lo = c * MC_CHUNK;
            let hi = ((c + 1) * MC_CHUNK).min(n_nodes);
            let mut acc_g = WeightedAccumulator::new(len);
            let mut acc_u = WeightedAccumulator::new(len);
            for j in lo..hi {
                let g = model
                    .realize(&rule.nodes[j])
                    .map_err(|e| e.with_context(format!("quadrature node {j}")))?;
                let k = g.mapv(f64::exp);
                let u = solve_diffusion(problem, &k)
                    .map_err(|e| e.with_context(format!("quadrature node {j}")))?;
                acc_g.push(&g, rule.weights[j]);
                acc_u.push(&u.values, rule.weights[j]);
            }
            Ok((acc_g, acc_u))
        })
        .collect();

    let mut acc_g = WeightedAccumulator::new(len);
    let mut acc_u = WeightedAccumulator::new(len);
    for partial in partials {
        let (g, u) = partial?;
        acc_g.merge(&g);
        acc_u.merge(&u);
    }
    let (g, clips_g) = acc_g.finish();
    let (u, clips_u) = acc_u.finish();
    Ok(CollocationMoments { g, u, negative_variance_clips: clips_g + clips_u })
}
