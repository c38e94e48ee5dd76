//! Implementations of the experiment subcommands. Each stage rebuilds its
//! inputs deterministically from the config and writes CSV/JSON artifacts
//! into the locked output directory.

use std::time::Instant;

use anyhow::{Context, Result};
use condkl::active::{run_campaign, CampaignConfig, Method};
use condkl::kernel_gp::{default_multistarts, fit_hyperparameters, log_marginal_likelihood};
use condkl::uq::{collocation_moments, monte_carlo_convergence, monte_carlo_moments, smolyak_grid};
use condkl::{Campaign, ConditionalKLModel, MomentField, StructuredGrid};
use serde::Serialize;

use crate::output::{fmt_f64, OutDir};
use crate::pipeline::Pipeline;

/// Wall-clock figures: nondeterministic by nature, so they live in their own
/// file that determinism comparisons must skip.
#[derive(Serialize, Default)]
pub struct Timings {
    pub stages: Vec<(String, f64)>,
}

impl Timings {
    fn push(&mut self, stage: &str, start: Instant) {
        self.stages.push((stage.to_string(), start.elapsed().as_secs_f64()));
    }
}

pub fn cmd_synth(pipeline: &Pipeline, out: &OutDir) -> Result<()> {
    let mut timings = Timings::default();
    let start = Instant::now();

    let (basis, g_ref) = pipeline.reference_field()?;
    let k_ref = g_ref.mapv(f64::exp);
    let obs = pipeline.observations(&g_ref)?;
    timings.push("synth", start);

    out.write_field("g_ref.csv", &pipeline.grid, &g_ref)?;
    out.write_field("k_ref.csv", &pipeline.grid, &k_ref)?;
    write_observations(out, "observations.csv", &obs)?;

    #[derive(Serialize)]
    struct Summary<'a> {
        config: &'a crate::config::ExperimentConfig,
        reference_dimension: usize,
        observation_count: usize,
        empirical_std_g: f64,
    }
    let mean = g_ref.sum() / g_ref.len() as f64;
    let var = g_ref.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>()
        / (g_ref.len() as f64 - 1.0);
    out.write_json(
        "synth.json",
        &Summary {
            config: &pipeline.config,
            reference_dimension: basis.dim(),
            observation_count: obs.len(),
            empirical_std_g: var.sqrt(),
        },
    )?;
    out.write_json_nondeterministic("timings.json", &timings)
}

pub fn cmd_fit(pipeline: &Pipeline, out: &OutDir) -> Result<()> {
    let mut timings = Timings::default();
    let start = Instant::now();

    let (_, g_ref) = pipeline.reference_field()?;
    let obs = pipeline.observations(&g_ref)?;
    let mut starts = vec![pipeline.theta];
    starts.extend(default_multistarts(
        &obs,
        pipeline.config.kernel.fit_starts,
        condkl::rng::derive_seed(pipeline.seed(), 10),
    ));
    let fit = fit_hyperparameters(&obs, &starts)?;
    let lml_config = log_marginal_likelihood(&obs, &pipeline.theta)?;
    timings.push("fit", start);

    #[derive(Serialize)]
    struct Summary<'a> {
        config: &'a crate::config::ExperimentConfig,
        fitted: condkl::FitResult,
        lml_at_configured_kernel: f64,
        starts: usize,
    }
    out.write_json(
        "fitted.json",
        &Summary {
            config: &pipeline.config,
            fitted: fit,
            lml_at_configured_kernel: lml_config,
            starts: starts.len(),
        },
    )?;
    out.write_json_nondeterministic("timings.json", &timings)
}

fn write_observations(
    out: &OutDir,
    name: &str,
    obs: &condkl::ObservationSet,
) -> Result<()> {
    let rows: Vec<Vec<String>> = obs
        .locations()
        .iter()
        .zip(obs.values())
        .map(|(p, v)| vec![fmt_f64(p[0]), fmt_f64(p[1]), fmt_f64(*v)])
        .collect();
    out.write_csv(name, "x1,x2,value", &rows)
}

fn write_model(
    out: &OutDir,
    name: &str,
    grid: &StructuredGrid,
    model: &ConditionalKLModel,
) -> Result<()> {
    let r = model.r();
    let mut header = String::from("x1,x2,mean");
    for k in 1..=r {
        header.push_str(&format!(",mode_{k}"));
    }
    let rows: Vec<Vec<String>> = (0..grid.len())
        .map(|idx| {
            let p = grid.node(idx);
            let mut row = Vec::with_capacity(r + 3);
            row.push(fmt_f64(p[0]));
            row.push(fmt_f64(p[1]));
            row.push(fmt_f64(model.mean()[idx]));
            for k in 0..r {
                row.push(fmt_f64(model.modes()[(idx, k)]));
            }
            row
        })
        .collect();
    out.write_csv(name, &header, &rows)
}

#[derive(Serialize)]
struct ModelInfo {
    provenance: condkl::Provenance,
    r: usize,
    norm_std_g: f64,
}

fn model_info(grid: &StructuredGrid, model: &ConditionalKLModel) -> ModelInfo {
    let moments = model.implied_moment_field();
    ModelInfo {
        provenance: model.provenance(),
        r: model.r(),
        norm_std_g: grid.field_l2_norm(&moments.std),
    }
}

pub fn cmd_condition(pipeline: &Pipeline, out: &OutDir) -> Result<()> {
    let mut timings = Timings::default();
    let start = Instant::now();

    let (_, g_ref) = pipeline.reference_field()?;
    let obs = pipeline.observations(&g_ref)?;
    let approach = pipeline.config.model.approach.as_str();

    let mut info_1 = None;
    let mut info_2 = None;
    let mut d_used = None;
    if approach == "approach-1" || approach == "both" {
        let model = pipeline.approach1_model(&obs)?;
        write_model(out, "model_approach1.csv", &pipeline.grid, &model)?;
        out.write_moments(
            "g_moments_approach1.csv",
            &pipeline.grid,
            &model.implied_moment_field(),
        )?;
        info_1 = Some(model_info(&pipeline.grid, &model));
    }
    if approach == "approach-2" || approach == "both" {
        let (d, model) = pipeline.approach2_model(&obs)?;
        write_model(out, "model_approach2.csv", &pipeline.grid, &model)?;
        out.write_moments(
            "g_moments_approach2.csv",
            &pipeline.grid,
            &model.implied_moment_field(),
        )?;
        d_used = Some(d);
        info_2 = Some(model_info(&pipeline.grid, &model));
    }
    timings.push("condition", start);

    #[derive(Serialize)]
    struct Summary<'a> {
        config: &'a crate::config::ExperimentConfig,
        approach1: Option<ModelInfo>,
        approach2: Option<ModelInfo>,
        unconditional_dimension: Option<usize>,
    }
    out.write_json(
        "condition.json",
        &Summary {
            config: &pipeline.config,
            approach1: info_1,
            approach2: info_2,
            unconditional_dimension: d_used,
        },
    )?;
    out.write_json_nondeterministic("timings.json", &timings)
}

fn select_model(pipeline: &Pipeline, obs: &condkl::ObservationSet) -> Result<ConditionalKLModel> {
    match pipeline.config.model.approach.as_str() {
        "approach-2" => Ok(pipeline.approach2_model(obs)?.1),
        _ => pipeline.approach1_model(obs),
    }
}

pub fn cmd_propagate(pipeline: &Pipeline, out: &OutDir) -> Result<()> {
    let mut timings = Timings::default();
    let start = Instant::now();

    let (_, g_ref) = pipeline.reference_field()?;
    let obs = pipeline.observations(&g_ref)?;
    let model = select_model(pipeline, &obs)?;
    let problem = pipeline.problem();
    let grid = &pipeline.grid;
    timings.push("model", start);

    let start = Instant::now();
    let (g_moments, u_moments, nodes_solved): (MomentField, MomentField, usize);
    let mut negative_variance_clips = 0usize;
    match pipeline.config.propagation.method.as_str() {
        "collocation" => {
            let rule = smolyak_grid(model.r(), pipeline.config.propagation.level)?;
            let n_nodes = rule.len();
            let result = collocation_moments(&model, &problem, &rule)?;
            negative_variance_clips = result.negative_variance_clips;
            g_moments = result.g;
            u_moments = result.u;
            nodes_solved = n_nodes;
        }
        _ => {
            let n = pipeline.config.propagation.samples;
            let checkpoints = pipeline
                .config
                .propagation
                .convergence_checkpoints
                .clone()
                .unwrap_or_else(|| doubling_checkpoints(n));
            let rows = monte_carlo_convergence(
                &model,
                &problem,
                &checkpoints,
                pipeline.propagation_seed(),
            )?;
            let table: Vec<Vec<String>> = rows
                .iter()
                .map(|r| {
                    vec![
                        r.n.to_string(),
                        fmt_f64(r.norm_mean_g),
                        fmt_f64(r.norm_std_g),
                        fmt_f64(r.norm_mean_u),
                        fmt_f64(r.norm_std_u),
                    ]
                })
                .collect();
            out.write_csv(
                "mc_convergence.csv",
                "n,norm_mean_g,norm_std_g,norm_mean_u,norm_std_u",
                &table,
            )?;
            let (g, u) = monte_carlo_moments(&model, &problem, n, pipeline.propagation_seed())?;
            g_moments = g;
            u_moments = u;
            nodes_solved = n;
        }
    }
    timings.push("propagate", start);

    out.write_moments("g_moments.csv", grid, &g_moments)?;
    out.write_moments("u_moments.csv", grid, &u_moments)?;

    #[derive(Serialize)]
    struct Summary<'a> {
        config: &'a crate::config::ExperimentConfig,
        model: ModelInfo,
        nodes_solved: usize,
        negative_variance_clips: usize,
        norm_mean_g: f64,
        norm_std_g: f64,
        norm_mean_u: f64,
        norm_std_u: f64,
    }
    out.write_json(
        "propagate.json",
        &Summary {
            config: &pipeline.config,
            model: model_info(grid, &model),
            nodes_solved,
            negative_variance_clips,
            norm_mean_g: grid.field_l2_norm(&g_moments.mean),
            norm_std_g: grid.field_l2_norm(&g_moments.std),
            norm_mean_u: grid.field_l2_norm(&u_moments.mean),
            norm_std_u: grid.field_l2_norm(&u_moments.std),
        },
    )?;
    out.write_json_nondeterministic("timings.json", &timings)
}

fn doubling_checkpoints(n: usize) -> Vec<usize> {
    let mut v = Vec::new();
    let mut c = (n / 16).max(2);
    while c < n {
        v.push(c);
        c *= 2;
    }
    v.push(n);
    v
}

pub fn cmd_compare(pipeline: &Pipeline, out: &OutDir) -> Result<()> {
    let mut timings = Timings::default();
    let start = Instant::now();

    let (_, g_ref) = pipeline.reference_field()?;
    let obs = pipeline.observations(&g_ref)?;
    let grid = &pipeline.grid;

    // Reference: approach 1 at the retained-variance fraction.
    let reference = pipeline.approach1_model(&obs)?;
    let ref_moments = reference.implied_moment_field();
    let d_c = pipeline.conditional_dimension(&obs)?;

    // Approach 2 fixes the comparison dimension r.
    let (d, model_2) = pipeline.approach2_model(&obs)?;
    let r = model_2.r();
    let model_1 = condkl::conditioning::condition_then_truncate(
        &obs,
        &pipeline.theta,
        grid,
        condkl::Truncation::Count(r),
    )?;
    timings.push("models", start);

    let start = Instant::now();
    let m1 = model_1.implied_moment_field();
    let m2 = model_2.implied_moment_field();
    let err = |m: &MomentField| -> (f64, f64) {
        let mean_diff = &m.mean - &ref_moments.mean;
        let std_diff = &m.std - &ref_moments.std;
        (grid.field_l2_norm(&mean_diff), grid.field_l2_norm(&std_diff))
    };
    let (err_mean_1, err_std_1) = err(&m1);
    let (err_mean_2, err_std_2) = err(&m2);

    let std_err_field_1 = (&m1.std - &ref_moments.std).mapv(f64::abs);
    let std_err_field_2 = (&m2.std - &ref_moments.std).mapv(f64::abs);
    out.write_field("std_error_approach1.csv", grid, &std_err_field_1)?;
    out.write_field("std_error_approach2.csv", grid, &std_err_field_2)?;

    // Spectra for the eigenvalue-decay comparison.
    let eig_1 = model_1.induced_eigenvalues()?;
    let eig_2 = model_2.induced_eigenvalues()?;
    let eig_ref = reference.induced_eigenvalues()?;
    let rows: Vec<Vec<String>> = (0..r)
        .map(|k| {
            vec![
                (k + 1).to_string(),
                fmt_f64(eig_ref.get(k).copied().unwrap_or(0.0)),
                fmt_f64(eig_1[k]),
                fmt_f64(eig_2[k]),
            ]
        })
        .collect();
    out.write_csv("eigenvalues.csv", "index,reference,approach1,approach2", &rows)?;
    timings.push("compare", start);

    #[derive(Serialize)]
    struct Summary<'a> {
        config: &'a crate::config::ExperimentConfig,
        unconditional_dimension: usize,
        conditional_dimension: usize,
        reference_dimension: usize,
        r: usize,
        err_mean_approach1: f64,
        err_std_approach1: f64,
        err_mean_approach2: f64,
        err_std_approach2: f64,
        approach1_more_accurate: bool,
    }
    out.write_json(
        "compare.json",
        &Summary {
            config: &pipeline.config,
            unconditional_dimension: d,
            conditional_dimension: d_c,
            reference_dimension: reference.r(),
            r,
            err_mean_approach1: err_mean_1,
            err_std_approach1: err_std_1,
            err_mean_approach2: err_mean_2,
            err_std_approach2: err_std_2,
            approach1_more_accurate: err_std_1 < err_std_2,
        },
    )?;
    out.write_json_nondeterministic("timings.json", &timings)
}

fn write_campaign(out: &OutDir, name: &str, campaign: &Campaign) -> Result<()> {
    let mut rows: Vec<Vec<String>> = vec![vec![
        "0".to_string(),
        String::new(),
        String::new(),
        fmt_f64(campaign.initial_norm_std_g),
        fmt_f64(campaign.initial_norm_std_u),
    ]];
    for (i, step) in campaign.steps.iter().enumerate() {
        rows.push(vec![
            (i + 1).to_string(),
            fmt_f64(step.location[0]),
            fmt_f64(step.location[1]),
            fmt_f64(step.norm_std_g),
            fmt_f64(step.norm_std_u),
        ]);
    }
    out.write_csv(name, "step,x1,x2,norm_g,norm_u", &rows)
}

pub fn cmd_learn(pipeline: &Pipeline, out: &OutDir) -> Result<()> {
    let mut timings = Timings::default();
    let al = &pipeline.config.active_learning;
    let (_, g_ref) = pipeline.reference_field()?;
    let obs = pipeline.observations(&g_ref)?;
    let problem = pipeline.problem();
    let config = CampaignConfig {
        truncation_fraction: pipeline.config.model.fraction,
        mc_samples: al.mc_samples,
        ensemble_size: al.ensemble,
        noise_std: al.noise_std,
    };

    let methods: Vec<Method> = match al.method {
        1 => vec![Method::CoefficientVariance],
        2 => vec![Method::SolutionVariance],
        _ => vec![Method::CoefficientVariance, Method::SolutionVariance],
    };

    #[derive(Serialize)]
    struct CampaignInfo {
        method: Method,
        initial_norm_std_g: f64,
        initial_norm_std_u: f64,
        final_norm_std_g: f64,
        final_norm_std_u: f64,
        steps: usize,
        aborted: Option<String>,
    }
    let mut infos = Vec::new();
    for method in methods {
        let start = Instant::now();
        let campaign = run_campaign(
            &g_ref,
            &obs,
            &pipeline.theta,
            &problem,
            method,
            al.n_additional,
            &config,
            pipeline.campaign_seed(),
        )?;
        let tag = match method {
            Method::CoefficientVariance => "method1",
            Method::SolutionVariance => "method2",
        };
        write_campaign(out, &format!("campaign_{tag}.csv"), &campaign)?;
        if al.dump_criteria {
            for (i, step) in campaign.steps.iter().enumerate() {
                out.write_field(
                    &format!("criterion_{tag}_step{}.csv", i + 1),
                    &pipeline.grid,
                    &step.criterion,
                )?;
            }
        }
        timings.push(&format!("learn_{tag}"), start);
        infos.push(CampaignInfo {
            method,
            initial_norm_std_g: campaign.initial_norm_std_g,
            initial_norm_std_u: campaign.initial_norm_std_u,
            final_norm_std_g: campaign.steps.last().map_or(f64::NAN, |s| s.norm_std_g),
            final_norm_std_u: campaign.steps.last().map_or(f64::NAN, |s| s.norm_std_u),
            steps: campaign.steps.len(),
            aborted: campaign.aborted.clone(),
        });
        if let Some(reason) = &campaign.aborted {
            anyhow::bail!("campaign aborted: {reason}");
        }
    }

    #[derive(Serialize)]
    struct Summary<'a> {
        config: &'a crate::config::ExperimentConfig,
        campaigns: Vec<CampaignInfo>,
    }
    out.write_json("learn.json", &Summary { config: &pipeline.config, campaigns: infos })?;
    out.write_json_nondeterministic("timings.json", &timings)
}

impl OutDir {
    /// Files that change run to run (wall-clock timings) bypass the sibling
    /// metadata and are excluded from determinism comparisons.
    pub fn write_json_nondeterministic<T: Serialize>(&self, name: &str, value: &T) -> Result<()> {
        let text = serde_json::to_string_pretty(value).context("serialize JSON")?;
        std::fs::write(self.path().join(name), text + "\n")
            .with_context(|| format!("cannot write {name}"))?;
        Ok(())
    }
}
