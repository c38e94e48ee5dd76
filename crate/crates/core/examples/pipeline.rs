//! Small end-to-end run: synthesize a reference log-coefficient, condition
//! on a handful of observations both ways, propagate through the diffusion
//! solve, and pick the next observation location with both policies.

use condkl::active::{acquire_method1_integrated, acquire_method2, candidate_nodes, Method};
use condkl::conditioning::{condition_then_truncate, truncate_then_condition};
use condkl::kernel_gp::{KernelHyperparams, ObservationSet};
use condkl::kl::unconditional_basis;
use condkl::rng::{standard_normal_vec, uniform_points};
use condkl::uq::{collocation_moments, monte_carlo_moments, smolyak_grid};
use condkl::{DiffusionProblem, StructuredGrid, Truncation};

fn main() -> condkl::Result<()> {
    let grid = StructuredGrid::new(40, 20, 2.0, 1.0)?;
    let theta = KernelHyperparams::with_gaussian_lengthscales(0.65, 0.15, 0.2, 0.0)?;

    // Reference field and observations.
    let basis = unconditional_basis(&grid, &theta, 60)?;
    let xi = standard_normal_vec(7, 0, 60);
    let g_ref = basis.evaluate(&xi)?;
    let locations = uniform_points(7, 1, 15, grid.lx(), grid.ly());
    let values: Vec<f64> = locations.iter().map(|&p| grid.interpolate(&g_ref, p)).collect();
    let obs = ObservationSet::new(locations, values, grid.lx(), grid.ly())?;

    // Two conditional constructions.
    let a1 = condition_then_truncate(&obs, &theta, &grid, Truncation::VarianceFraction(0.99))?;
    let a2 = truncate_then_condition(&obs, &theta, &grid, 40)?;
    println!("approach 1: {} modes; approach 2: {} modes (40 - 15 = 25)", a1.r(), a2.r());

    // Forward propagation.
    let problem = DiffusionProblem::unit_drop(grid.clone());
    let (_, u_mc) = monte_carlo_moments(&a1, &problem, 2000, 11)?;
    println!("MC:          |mean u| = {:.5}, |std u| = {:.5}",
        grid.field_l2_norm(&u_mc.mean), grid.field_l2_norm(&u_mc.std));
    let rule = smolyak_grid(a2.r(), 3)?;
    let colloc = collocation_moments(&a2, &problem, &rule)?;
    println!("collocation: |mean u| = {:.5}, |std u| = {:.5}  ({} nodes)",
        grid.field_l2_norm(&colloc.u.mean), grid.field_l2_norm(&colloc.u.std), rule.len());

    // Where to measure next?
    let candidates = candidate_nodes(&grid, &obs);
    let pick1 = acquire_method1_integrated(&obs, &theta, &grid, &candidates)?;
    let pick2 = acquire_method2(&theta, &a1, &problem, 200, 13, &candidates)?;
    assert_eq!(pick1.method, Method::CoefficientVariance);
    println!("next observation: coefficient policy ({:.3}, {:.3}), solution policy ({:.3}, {:.3})",
        pick1.chosen[0], pick1.chosen[1], pick2.chosen[0], pick2.chosen[1]);
    Ok(())
}
