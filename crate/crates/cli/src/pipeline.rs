//! Deterministic construction of the experiment objects from a config.
//! Every stage rebuilds what it needs from the master seed, so commands can
//! run independently and still agree bit for bit.

use anyhow::{Context, Result};
use condkl::conditioning::{condition_then_truncate, truncate_then_condition_with_basis};
use condkl::kernel_gp::{gp_posterior, KernelHyperparams, ObservationSet};
use condkl::kl::{covariance_spectrum, truncate_by_variance, unconditional_basis, weighted_trace};
use condkl::rng::{derive_seed, standard_normal_vec, uniform_points};
use condkl::{
    ConditionalKLModel, DiffusionProblem, Field, KLBasis, Point, StructuredGrid, Truncation,
};

use crate::config::ExperimentConfig;

// Substream tags reserved per stage.
const TAG_REFERENCE: u64 = 1;
const TAG_OBS_LOCATIONS: u64 = 2;
const TAG_OBS_NOISE: u64 = 3;
const TAG_PROPAGATION: u64 = 4;
const TAG_CAMPAIGN: u64 = 6;

pub struct Pipeline {
    pub config: ExperimentConfig,
    pub grid: StructuredGrid,
    pub theta: KernelHyperparams,
}

impl Pipeline {
    pub fn new(config: ExperimentConfig) -> Result<Self> {
        let grid = StructuredGrid::new(
            config.grid.nx,
            config.grid.ny,
            config.domain.lx,
            config.domain.ly,
        )?;
        let theta = match config.kernel.lengthscale.as_str() {
            "gaussian" => KernelHyperparams::with_gaussian_lengthscales(
                config.kernel.sigma,
                config.kernel.l1,
                config.kernel.l2,
                config.kernel.sigma_eps,
            )?,
            _ => KernelHyperparams::new(
                config.kernel.sigma,
                config.kernel.l1,
                config.kernel.l2,
                config.kernel.sigma_eps,
            )?,
        };
        Ok(Self { config, grid, theta })
    }

    pub fn seed(&self) -> u64 {
        self.config.seed
    }

    pub fn propagation_seed(&self) -> u64 {
        derive_seed(self.config.seed, TAG_PROPAGATION)
    }

    pub fn campaign_seed(&self) -> u64 {
        derive_seed(self.config.seed, TAG_CAMPAIGN)
    }

    /// Unconditional basis at the reference dimension: the configured
    /// `reference.d_max`, or the retained-variance count.
    pub fn reference_basis(&self) -> Result<KLBasis> {
        let d = match self.config.reference.d_max {
            Some(d) => d,
            None => self.unconditional_dimension()?,
        };
        Ok(unconditional_basis(&self.grid, &self.theta, d)?)
    }

    /// Retained-variance count for the unconditional spectrum; the total
    /// variance is the exact operator trace `sigma^2 |D|`.
    pub fn unconditional_dimension(&self) -> Result<usize> {
        let probe = unconditional_basis(&self.grid, &self.theta, self.grid.len().min(512))?;
        let total = self.theta.variance() * self.grid.lx() * self.grid.ly();
        let mut acc = 0.0;
        for (i, v) in probe.eigenvalues().iter().enumerate() {
            acc += v;
            if acc >= self.config.model.fraction * total - 1e-12 * total {
                return Ok(i + 1);
            }
        }
        anyhow::bail!(
            "retained-variance rule did not converge within {} modes",
            probe.dim()
        )
    }

    /// Synthetic reference field drawn from the unconditional basis.
    pub fn reference_field(&self) -> Result<(KLBasis, Field)> {
        let basis = self.reference_basis()?;
        let xi = standard_normal_vec(derive_seed(self.seed(), TAG_REFERENCE), 0, basis.dim());
        let g_ref = basis.evaluate(&xi)?;
        Ok((basis, g_ref))
    }

    /// Observation set sampled from the reference field at random locations
    /// (bilinear readout plus optional noise).
    pub fn observations(&self, g_ref: &Field) -> Result<ObservationSet> {
        let n = self.config.observations.count;
        let locations: Vec<Point> = uniform_points(
            derive_seed(self.seed(), TAG_OBS_LOCATIONS),
            0,
            n,
            self.grid.lx(),
            self.grid.ly(),
        );
        let mut values: Vec<f64> =
            locations.iter().map(|&p| self.grid.interpolate(g_ref, p)).collect();
        if self.config.observations.noise_std > 0.0 {
            let noise = standard_normal_vec(derive_seed(self.seed(), TAG_OBS_NOISE), 0, n);
            for (v, e) in values.iter_mut().zip(noise) {
                *v += self.config.observations.noise_std * e;
            }
        }
        Ok(ObservationSet::new(
            locations,
            values,
            self.grid.lx(),
            self.grid.ly(),
        )?)
    }

    pub fn problem(&self) -> DiffusionProblem {
        DiffusionProblem::unit_drop(self.grid.clone())
    }

    /// Conditional spectrum (descending) and its operator trace.
    pub fn conditional_spectrum(&self, obs: &ObservationSet) -> Result<(Vec<f64>, f64)> {
        let post = gp_posterior(obs, &self.theta, &self.grid.nodes())?;
        let trace = weighted_trace(&self.grid, &post.cov);
        let spectrum = covariance_spectrum(&self.grid, &post.cov)?;
        Ok((spectrum.to_vec(), trace))
    }

    /// Retained-variance count of the conditional spectrum.
    pub fn conditional_dimension(&self, obs: &ObservationSet) -> Result<usize> {
        let (spectrum, _) = self.conditional_spectrum(obs)?;
        Ok(truncate_by_variance(&spectrum, self.config.model.fraction)?)
    }

    /// Approach-1 model at the configured truncation (fraction unless an
    /// explicit `model.r` overrides it).
    pub fn approach1_model(&self, obs: &ObservationSet) -> Result<ConditionalKLModel> {
        let truncation = match self.config.model.r {
            Some(r) => Truncation::Count(r),
            None => Truncation::VarianceFraction(self.config.model.fraction),
        };
        condition_then_truncate(obs, &self.theta, &self.grid, truncation)
            .context("approach-1 conditioning")
    }

    /// Approach-2 model at the configured unconditional dimension (the
    /// retained-variance count unless `model.d` overrides it).
    pub fn approach2_model(
        &self,
        obs: &ObservationSet,
    ) -> Result<(usize, ConditionalKLModel)> {
        let d = match self.config.model.d {
            Some(d) => d,
            None => self.unconditional_dimension()?,
        };
        let basis = unconditional_basis(&self.grid, &self.theta, d)?;
        let model = truncate_then_condition_with_basis(obs, &self.theta, &basis)
            .context("approach-2 conditioning")?;
        Ok((d, model))
    }
}
