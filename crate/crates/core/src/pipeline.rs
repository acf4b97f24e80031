//! Experiment orchestration shared by the CLI and the C bindings:
//! each function is one pipeline step operating on an [`ExperimentConfig`]
//! and the configured output directory, with every artifact recorded in
//! the manifest.

use std::path::{Path, PathBuf};

use crate::analysis::{
    escape_probability_analytic, escape_probability_bvp, escape_probability_monte_carlo,
    p_bifurcation_diagnostic, steady_state_density, DensityShape, EscapeProblem,
};
use crate::config::ExperimentConfig;
use crate::io::{
    heatmap_svg, line_plot_svg, read_moments_csv, write_curves_csv, write_moments_csv,
    write_samples_csv, write_table_csv, write_text, Checkpoint, CheckpointMeta, Manifest,
};
use crate::sim::SimConfig;
use crate::train::{
    adaptive_train, robustness_experiment, run_with_baseline, surrogate_model, MomentDataset,
    TrainMode, TrainOutcome,
};
use crate::{Error, Result};

fn out_dir(cfg: &ExperimentConfig) -> PathBuf {
    PathBuf::from(&cfg.output_dir)
}

fn node_rel_path(node: usize) -> String {
    format!("moments/node_{node:05}.csv")
}

/// Simulate every node ensemble and write moment tables + manifest.
pub fn simulate(cfg: &ExperimentConfig) -> Result<()> {
    let dir = out_dir(cfg);
    std::fs::create_dir_all(dir.join("moments"))?;
    let model = cfg.system.build();
    let data = MomentDataset::simulate(&model, &cfg.grid, &cfg.sim, &cfg.ut, 0.0)?;

    let mut manifest = Manifest::load_or_default(&dir)?;
    manifest.nodes.clear();
    for (node, nd) in data.nodes.iter().enumerate() {
        let rel = node_rel_path(node);
        write_moments_csv(&dir.join(&rel), &nd.moments)?;
        manifest.nodes.push(crate::io::NodeEntry {
            node_index: node,
            coords: cfg.grid.coords(node),
            path: rel.clone(),
        });
        manifest.upsert(&dir, &rel)?;
    }
    let cfg_rel = "config_echo.json";
    cfg.save(&dir.join(cfg_rel))?;
    manifest.upsert(&dir, cfg_rel)?;
    manifest.save(&dir)?;
    println!(
        "simulated {} nodes x {} trajectories x {} steps -> {}",
        cfg.grid.total(),
        cfg.sim.ensemble_size,
        cfg.sim.steps,
        dir.join("moments").display()
    );
    Ok(())
}

/// Read the per-node moment tables listed in the manifest.
pub fn load_dataset(cfg: &ExperimentConfig) -> Result<MomentDataset> {
    let dir = out_dir(cfg);
    let manifest_path = Manifest::path_in(&dir);
    if !manifest_path.exists() {
        return Err(Error::Config(format!(
            "no data manifest at {}; run `sdeid simulate` first",
            manifest_path.display()
        )));
    }
    let manifest: Manifest = crate::io::read_json(&manifest_path)?;
    if manifest.nodes.len() != cfg.grid.total() {
        return Err(Error::Config(format!(
            "manifest lists {} nodes but the grid has {}",
            manifest.nodes.len(),
            cfg.grid.total()
        )));
    }
    let mut series = Vec::with_capacity(manifest.nodes.len());
    for entry in &manifest.nodes {
        series.push(read_moments_csv(&dir.join(&entry.path))?);
    }
    let model = cfg.system.build();
    MomentDataset::from_moments(cfg.grid.clone(), series, model.noise_dim(), cfg.sim.dt, cfg.ut)
}

fn write_outcome(
    cfg: &ExperimentConfig,
    manifest: &mut Manifest,
    outcome: &TrainOutcome,
    label: &str,
) -> Result<()> {
    let dir = out_dir(cfg);
    let report_rel = format!("report_{label}.json");
    crate::io::write_json(&dir.join(&report_rel), &outcome.report)?;
    manifest.upsert(&dir, &report_rel)?;

    let curves_rel = format!("curves_{label}.csv");
    write_curves_csv(&dir.join(&curves_rel), &outcome.report)?;
    manifest.upsert(&dir, &curves_rel)?;

    let ckpt_rel = format!("weights_{label}.json");
    let ckpt = Checkpoint::new(
        outcome.drift.clone(),
        outcome.diffusion.clone(),
        outcome.report.seed,
        CheckpointMeta {
            system: cfg.system.name().into(),
            mode: outcome.report.mode,
            rounds: outcome.report.rounds.len(),
            final_samples: outcome.report.final_samples,
            final_metrics: outcome.report.final_metrics(),
        },
    );
    ckpt.save(&dir.join(&ckpt_rel))?;
    manifest.upsert(&dir, &ckpt_rel)?;

    if outcome.report.mode != TrainMode::Agf {
        let samples_rel = format!("samples_{label}.csv");
        write_samples_csv(&dir.join(&samples_rel), &cfg.grid, &outcome.report.sample_details)?;
        manifest.upsert(&dir, &samples_rel)?;
    }
    Ok(())
}

/// Train surrogates from the on-disk moments (runs the AGF baseline
/// first when the config pins no stop threshold and an RBMS mode is asked).
pub fn train(cfg: &ExperimentConfig, mode: TrainMode) -> Result<()> {
    let data = load_dataset(cfg)?;
    let truth = cfg.system.build();
    let dir = out_dir(cfg);
    let mut manifest = Manifest::load_or_default(&dir)?;

    match (mode, cfg.train.stop_threshold) {
        (TrainMode::Agf, _) => {
            let outcome = adaptive_train(&data, &truth, &cfg.train, TrainMode::Agf, cfg.seed)?;
            print_summary(&outcome);
            write_outcome(cfg, &mut manifest, &outcome, "agf")?;
        }
        (_, Some(_)) => {
            let outcome = adaptive_train(&data, &truth, &cfg.train, mode, cfg.seed)?;
            print_summary(&outcome);
            write_outcome(cfg, &mut manifest, &outcome, &mode.to_string())?;
        }
        (_, None) => {
            let (agf, rbms) = run_with_baseline(&data, &truth, &cfg.train, mode, cfg.seed)?;
            print_summary(&agf);
            print_summary(&rbms);
            write_outcome(cfg, &mut manifest, &agf, "agf")?;
            write_outcome(cfg, &mut manifest, &rbms, &mode.to_string())?;
        }
    }
    manifest.save(&dir)?;
    Ok(())
}

fn print_summary(outcome: &TrainOutcome) {
    let r = outcome.report.rounds.last().expect("at least one round");
    println!(
        "{}: {} rounds, {} samples, rmse {:.4e}, rrmse {:.4e}, max sigma err {:.4e} ({})",
        outcome.report.mode,
        outcome.report.rounds.len(),
        outcome.report.final_samples,
        r.rmse,
        r.rrmse,
        r.max_sigma_error,
        outcome.report.stop_reason
    );
}

/// Escape-probability and density artifacts for a trained checkpoint.
pub fn analyze(cfg: &ExperimentConfig, checkpoint: &Path) -> Result<()> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let truth = cfg.system.build();
    let surrogate = surrogate_model(&ckpt.drift, &ckpt.diffusion);
    let dir = out_dir(cfg);
    std::fs::create_dir_all(&dir)?;
    let mut manifest = Manifest::load_or_default(&dir)?;

    if let Some(spec) = &cfg.analysis.escape {
        let gamma1 = spec
            .gamma1
            .or_else(|| cfg.system.default_gamma1())
            .ok_or_else(|| Error::Config("no gamma1 given and no unstable equilibrium found".into()))?;
        let queries: Vec<f64> = (1..=spec.n_query)
            .map(|i| gamma1 + i as f64 * (spec.gamma2 - gamma1) / (spec.n_query + 1) as f64)
            .collect();

        let true_problem = EscapeProblem::new(truth.clone(), gamma1, spec.gamma2, queries.clone())?;
        let analytic_true = escape_probability_analytic(&true_problem, 8 * spec.bvp_mesh)?;
        let bvp_true = escape_probability_bvp(&true_problem, spec.bvp_mesh)?;
        let mc = escape_probability_monte_carlo(
            &true_problem,
            spec.mc_trajectories,
            spec.max_time,
            spec.dt,
            cfg.seed,
        )?;
        let surr_problem = EscapeProblem::new(surrogate.clone(), gamma1, spec.gamma2, queries.clone())?;
        let analytic_surr = escape_probability_analytic(&surr_problem, 8 * spec.bvp_mesh)?;

        let rows: Vec<Vec<f64>> = (0..queries.len())
            .map(|i| {
                vec![
                    queries[i],
                    analytic_true[i],
                    bvp_true[i],
                    mc.estimates[i],
                    mc.std_errors[i],
                    analytic_surr[i],
                ]
            })
            .collect();
        write_table_csv(
            &dir.join("escape.csv"),
            &["x", "analytic_true", "bvp_true", "mc_true", "mc_se", "analytic_surrogate"],
            &rows,
        )?;
        manifest.upsert(&dir, "escape.csv")?;

        let svg = line_plot_svg(
            &[
                ("analytic (true)", &queries, &analytic_true),
                ("monte carlo (true)", &queries, &mc.estimates),
                ("analytic (surrogate)", &queries, &analytic_surr),
            ],
            "first-escape probability",
        );
        write_text(&dir.join("escape.svg"), &svg)?;
        manifest.upsert(&dir, "escape.svg")?;

        let sup_mc = analytic_true
            .iter()
            .zip(mc.estimates.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        let sup_surr = analytic_true
            .iter()
            .zip(analytic_surr.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        println!("escape: sup|analytic - mc| = {sup_mc:.4}, sup|true - surrogate| = {sup_surr:.4}");
    }

    if let Some(spec) = &cfg.analysis.density {
        for (label, model) in [("true", &truth), ("surrogate", &surrogate)] {
            let density = steady_state_density(
                model,
                &spec.x0,
                spec.burn_in,
                spec.total_time,
                spec.bounds.clone(),
                spec.shape.clone(),
                spec.n_traj,
                spec.dt,
                cfg.seed,
            )?;
            let rel = format!("density_{label}.csv");
            let rows: Vec<Vec<f64>> = (0..density.total_cells())
                .map(|i| {
                    let mut row = density.cell_center(i);
                    row.push(density.density[i]);
                    row
                })
                .collect();
            let headers: Vec<String> = (1..=density.dim())
                .map(|d| format!("x{d}_center"))
                .chain(["density".to_string()])
                .collect();
            let header_refs: Vec<&str> = headers.iter().map(String::as_str).collect();
            write_table_csv(&dir.join(&rel), &header_refs, &rows)?;
            manifest.upsert(&dir, &rel)?;

            let svg_rel = format!("density_{label}.svg");
            let svg = heatmap_svg(
                &density.density,
                &density.shape,
                &density.bounds,
                &format!("steady-state density ({label})"),
            );
            write_text(&dir.join(&svg_rel), &svg)?;
            manifest.upsert(&dir, &svg_rel)?;

            let diag = p_bifurcation_diagnostic(&density, spec.threshold_cells)?;
            println!(
                "density ({label}): r* = {:.3}, classified as {:?}",
                diag.r_star, diag.shape
            );
        }
    }

    if !cfg.analysis.d_sweep.is_empty() {
        let spec = cfg.analysis.density.as_ref().ok_or_else(|| {
            Error::Config("d_sweep requires a density spec".into())
        })?;
        let mut rows = Vec::new();
        for &d in &cfg.analysis.d_sweep {
            let sys_d = cfg.system.with_noise_intensity(d);
            let truth_d = sys_d.build();
            // surrogate at this noise level: reuse the checkpoint when the
            // level matches, otherwise train an all-grid surrogate on
            // freshly simulated data
            let surr_d = if (d - cfg.system.noise_intensity()).abs() < 1e-12 {
                surrogate.clone()
            } else {
                let sim = SimConfig {
                    seed: crate::derive_seed(cfg.sim.seed, 0x77, d.to_bits()),
                    ..cfg.sim
                };
                let data = MomentDataset::simulate(&truth_d, &cfg.grid, &sim, &cfg.ut, 0.0)?;
                let outcome = adaptive_train(&data, &truth_d, &cfg.train, TrainMode::Agf, cfg.seed)?;
                surrogate_model(&outcome.drift, &outcome.diffusion)
            };
            let mut entry = vec![d];
            for model in [&truth_d, &surr_d] {
                let density = steady_state_density(
                    model,
                    &spec.x0,
                    spec.burn_in,
                    spec.total_time,
                    spec.bounds.clone(),
                    spec.shape.clone(),
                    spec.n_traj,
                    spec.dt,
                    cfg.seed,
                )?;
                let diag = p_bifurcation_diagnostic(&density, spec.threshold_cells)?;
                entry.push(diag.r_star);
                entry.push(if diag.shape == DensityShape::Ring { 1.0 } else { 0.0 });
            }
            rows.push(entry);
        }
        write_table_csv(
            &dir.join("p_bifurcation_sweep.csv"),
            &["d", "r_star_true", "ring_true", "r_star_surrogate", "ring_surrogate"],
            &rows,
        )?;
        manifest.upsert(&dir, "p_bifurcation_sweep.csv")?;
        println!("p-bifurcation sweep over {} noise levels written", rows.len());
    }

    manifest.save(&dir)?;
    Ok(())
}

/// Initial-perturbation protocol: paired AGF / RBMS-II runs on noisy data.
pub fn robustness(cfg: &ExperimentConfig) -> Result<()> {
    let truth = cfg.system.build();
    let dir = out_dir(cfg);
    std::fs::create_dir_all(&dir)?;
    let mut manifest = Manifest::load_or_default(&dir)?;

    let report = robustness_experiment(
        &truth,
        &cfg.grid,
        &cfg.sim,
        &cfg.ut,
        &cfg.train,
        cfg.robustness.perturbation_std,
        cfg.robustness.repetitions,
        cfg.seed,
    )?;

    crate::io::write_json(&dir.join("robustness.json"), &report)?;
    manifest.upsert(&dir, "robustness.json")?;

    let mut rep_rows = Vec::new();
    for (i, rep) in report.reps.iter().enumerate() {
        rep_rows.push(vec![
            i as f64,
            0.0,
            rep.agf.rmse,
            rep.agf.rrmse,
            rep.agf.max_sigma_error,
            rep.agf_samples as f64,
        ]);
        rep_rows.push(vec![
            i as f64,
            1.0,
            rep.rbms.rmse,
            rep.rbms.rrmse,
            rep.rbms.max_sigma_error,
            rep.rbms_samples as f64,
        ]);
    }
    write_table_csv(
        &dir.join("robustness_reps.csv"),
        &["rep", "is_rbms", "rmse", "rrmse", "max_sigma_err", "samples"],
        &rep_rows,
    )?;
    manifest.upsert(&dir, "robustness_reps.csv")?;

    let mut band_rows = Vec::new();
    for (mi, _name) in ["rmse", "rrmse", "max_sigma_err"].iter().enumerate() {
        for (is_rbms, agf) in [(0.0, true), (1.0, false)] {
            let (mean, std) = report.band(agf, mi);
            band_rows.push(vec![mi as f64, is_rbms, mean, std]);
        }
    }
    write_table_csv(
        &dir.join("robustness_bands.csv"),
        &["metric_index", "is_rbms", "mean", "std"],
        &band_rows,
    )?;
    manifest.upsert(&dir, "robustness_bands.csv")?;
    manifest.save(&dir)?;

    for rep in &report.reps {
        println!(
            "seed {}: agf rmse {:.4e} vs rbms rmse {:.4e} ({} samples), sigma-inflation x{:.1} vs mu x{:.3}",
            rep.seed,
            rep.agf.rmse,
            rep.rbms.rmse,
            rep.rbms_samples,
            rep.mean_rel_sigma_change,
            rep.mean_rel_mu_change,
        );
    }
    Ok(())
}

/// Verify the manifest hashes and print a summary of what is on disk.
pub fn report(cfg: &ExperimentConfig) -> Result<()> {
    let dir = out_dir(cfg);
    let manifest_path = Manifest::path_in(&dir);
    if !manifest_path.exists() {
        return Err(Error::Config(format!("no manifest at {}", manifest_path.display())));
    }
    let manifest: Manifest = crate::io::read_json(&manifest_path)?;
    let bad = manifest.verify(&dir)?;
    println!(
        "manifest: {} files, {} nodes, {} hash mismatches",
        manifest.files.len(),
        manifest.nodes.len(),
        bad.len()
    );
    for b in &bad {
        println!("  MISMATCH {b}");
    }
    for label in ["agf", "rbms1", "rbms2"] {
        let p = dir.join(format!("report_{label}.json"));
        if p.exists() {
            let report: crate::train::TrainReport = crate::io::read_json(&p)?;
            if let Some(m) = report.final_metrics() {
                println!(
                    "{label}: {} samples, rmse {:.4e}, rrmse {:.4e}, max sigma err {:.4e}",
                    report.final_samples, m.rmse, m.rrmse, m.max_sigma_error
                );
            }
        }
    }
    if !bad.is_empty() {
        return Err(Error::Config("manifest hash verification failed".into()));
    }
    Ok(())
}
