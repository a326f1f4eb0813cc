use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use tapwb_core::inverse::{fit_parameters, DataObjective};
use tapwb_core::reference::{irreversible_adsorption_curve, TransportParams};
use tapwb_core::sensitivity::{adjoint_gradient, fd_gradient, fixed_parameters, hessian as fd_hessian, time_resolved_sensitivity};
use tapwb_core::workbench::{add_noise, fmt_out, load_experimental, load_input, shared_time_grid, write_table};
use tapwb_core::{
    presets, Error, ExperimentDefinition, ExperimentalCurves, FitOptions, FitProblem, ForwardModel, OutputTree, ParameterId,
    ParameterSet, Result, SolverConfig,
};

use crate::{BenchArgs, DataArgs, FitArgs, HessianArgs, ReferenceArgs, RunArgs, SensArgs, SensType, SynthArgs};

struct Run {
    def: ExperimentDefinition,
    base: PathBuf,
    output: PathBuf,
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

/// Relative folders named in an input file are taken relative to that file.
fn load(args: &RunArgs) -> Result<Run> {
    let mut def = load_input(&args.input)?;
    if let Some(t) = args.time {
        if !(t > 0.0) {
            return Err(Error::Input(format!("--time must be positive, got {t}")));
        }
        def.simulation_time = t;
    }
    if let Some(n) = args.pulses {
        if n == 0 {
            return Err(Error::Input("--pulses must be at least 1".into()));
        }
        def.pulse_count = n;
    }
    if let Some(n) = args.steps {
        def.time_steps = n;
    }
    let base = args
        .input
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_default();
    let output = match &args.output {
        Some(p) => p.clone(),
        None => resolve(&base, &def.output_folder),
    };
    Ok(Run { def, base, output })
}

fn model(run: &Run, args: &RunArgs) -> Result<ForwardModel> {
    let config = run.def.solver_config(args.scheme.into());
    run.def.forward_model(config)
}

fn data(run: &Run, args: &DataArgs, model: &ForwardModel) -> Result<ExperimentalCurves> {
    let folder = match (&args.data, &run.def.data_folder) {
        (Some(p), _) => p.clone(),
        (None, Some(p)) => resolve(&run.base, p),
        (None, None) => {
            return Err(Error::Input(
                "no experimental data: set 'Experimental Data Folder' or pass --data".into(),
            ))
        }
    };
    let gases = model.mechanism().gas_names();
    let curves = load_experimental(&folder, &gases)?;
    if !shared_time_grid(&curves) {
        log::info!("experimental curves use different time grids; each is interpolated separately");
    }
    match args.noise {
        Some(sigma) => add_noise(&curves, sigma, args.seed),
        None => Ok(curves),
    }
}

fn free_parameters(model: &ForwardModel) -> Result<ParameterSet> {
    let params = ParameterSet::free(model.mechanism(), model.reactor().temperature)?;
    if params.is_empty() {
        return Err(Error::Input("every rate constant is fixed; nothing to differentiate".into()));
    }
    Ok(params)
}

pub fn simulate(args: &RunArgs) -> Result<()> {
    let run = load(args)?;
    let tree = OutputTree::create(&run.output, Some(&args.input))?;
    let model = model(&run, args)?;
    let result = model.simulate(&model.base_rate_constants()?)?;
    tree.write_flux(&result, args.pulse)?;
    tree.write_thin(&result)?;
    // a missing data folder only costs the overlay
    let observed = match run.def.data_folder {
        Some(_) => match data(&run, &DataArgs { data: None, noise: None, seed: 0 }, &model) {
            Ok(d) => Some(d),
            Err(e) => {
                log::warn!("plots without experimental overlay: {e}");
                None
            }
        },
        None => None,
    };
    tree.write_plots(&result, observed.as_ref(), args.pulse)?;

    println!(
        "{} cells ({} in the catalyst zone), {} steps of {:e} s",
        model.mesh().n_cells(),
        model.mesh().catalyst_cells(),
        model.n_steps(),
        model.dt()
    );
    for g in &result.mass_balance.gases {
        println!(
            "{:>8}  injected {:.6e} nmol  outflow {:.6e} nmol  in reactor {:.6e} nmol",
            g.name, g.injected, g.outflow, g.in_domain
        );
    }
    println!("max relative mass-balance defect {:.3e}", result.mass_balance.max_relative_defect());
    if result.halvings > 0 {
        println!("{} step halvings were needed to keep concentrations non-negative", result.halvings);
    }
    println!("output written to {}", tree.root.display());
    Ok(())
}

pub fn synthesize(args: &SynthArgs) -> Result<()> {
    let run = load(&args.run)?;
    let folder = match (&args.run.output, &run.def.data_folder) {
        (Some(p), _) => p.clone(),
        (None, Some(p)) => resolve(&run.base, p),
        (None, None) => return Err(Error::Input("pass --output or set 'Experimental Data Folder'".into())),
    };
    let model = model(&run, &args.run)?;
    let result = model.simulate(&model.base_rate_constants()?)?;
    let mut curves = ExperimentalCurves::from_flux(&result.times, &result.gas_names, &result.outlet_flux);
    if let Some(sigma) = args.noise {
        curves = add_noise(&curves, sigma, args.seed)?;
    }
    std::fs::create_dir_all(&folder).map_err(|e| Error::Io { path: folder.clone(), source: e })?;
    OutputTree::write_experimental(&folder, &curves)?;
    println!("wrote {} curves to {}", curves.curves.len(), folder.display());
    Ok(())
}

pub fn fit(args: &FitArgs) -> Result<()> {
    let run = load(&args.run)?;
    let tree = OutputTree::create(&run.output, Some(&args.run.input))?;
    let model = model(&run, &args.run)?;
    let observed = data(&run, &args.data, &model)?;
    let params = free_parameters(&model)?;
    let has_delta_g = run.def.thermo.as_ref().is_some_and(|t| t.delta_g_gas.is_some());
    let alpha = args.alpha.unwrap_or(if has_delta_g { 1.0 } else { 0.0 });
    if !(alpha >= 0.0) {
        return Err(Error::Input(format!("--alpha must be non-negative, got {alpha}")));
    }
    if alpha > 0.0 && run.def.thermo.is_none() {
        return Err(Error::Input("--alpha needs a \"Thermodynamic Consistency\" section".into()));
    }
    let thermo = run.def.thermo_constraint(alpha)?;
    let problem = FitProblem::new(&model, &params, &observed, thermo)?;
    let options = FitOptions {
        max_iterations: args.max_iterations,
        lower_bound: args.lower_bound,
        log_scale: args.log_scale,
        ..FitOptions::default()
    };
    let x0: Vec<f64> = params.values().iter().map(|v| v.max(args.lower_bound)).collect();
    let report = fit_parameters(&problem, &x0, &options)?;

    let result = model.simulate(&params.rate_constants(&report.final_values))?;
    let fixed = fixed_parameters(model.mechanism(), model.reactor().temperature)?;
    tree.write_fit(&report, &model.times(), &result.gas_names, &fixed)?;
    tree.write_flux(&result, args.run.pulse)?;
    tree.write_plots(&result, Some(&observed), args.run.pulse)?;

    let first = report.initial();
    let last = report.last();
    println!(
        "{} after {} iterations ({}): J {:.4e} -> {:.4e}",
        if report.converged { "converged" } else { "stopped" },
        report.iterations.len() - 1,
        report.stop_reason,
        first.objective.total,
        last.objective.total
    );
    if alpha > 0.0 {
        println!("J_data {:.4e}, J_thermo {:.4e} (alpha {alpha})", last.objective.data, last.objective.thermo);
        if let (Some(sum), Some(t)) = (problem.free_energy_sum(&report.final_values)?, &run.def.thermo) {
            if let Some(g) = t.delta_g_gas {
                println!("sum of step free energies {:.4} kJ/mol, target {:.4} kJ/mol", sum / 1000.0, g / 1000.0);
            }
        }
    }
    println!("{:>6} {:>14} {:>16}  flags", "param", "value", "units");
    for i in 0..report.labels.len() {
        let mut flags = Vec::new();
        if report.at_bound[i] {
            flags.push("at bound");
        }
        if report.undetermined[i] {
            flags.push("undetermined");
        }
        println!("{:>6} {:>14.6e} {:>16}  {}", report.labels[i], report.final_values[i], report.units[i], flags.join(", "));
    }
    println!("{} forward solves, {} gradients, {:.2?}", report.forward_solves, report.gradient_evaluations, report.elapsed);
    println!("output written to {}", tree.root.display());
    if !report.converged {
        log::warn!("fit stopped before meeting its tolerances: {}", report.stop_reason);
    }
    Ok(())
}

pub fn sensitivity(args: &SensArgs) -> Result<()> {
    let run = load(&args.run)?;
    let tree = OutputTree::create(&run.output, Some(&args.run.input))?;
    let model = model(&run, &args.run)?;
    let params = free_parameters(&model)?;
    let values = params.values();
    match args.sens_type {
        SensType::Total => {
            let observed = data(&run, &args.data, &model)?;
            let objective = DataObjective::new(&model, &observed)?;
            let g = adjoint_gradient(&model, &params, &values, &objective)?;
            let fd = match args.fd {
                Some(rel) => Some(fd_gradient(&model, &params, &values, &objective, rel)?),
                None => None,
            };
            tree.write_gradient(&params.labels(), params.units(), g.value, &g.gradient, fd.as_deref())?;
            println!("J_data {:.6e}  (adjoint in {:.2?})", g.value, g.elapsed);
            for (i, l) in params.labels().iter().enumerate() {
                match &fd {
                    Some(fd) => println!("{l:>6} {:+.6e}  fd {:+.6e}", g.gradient[i], fd[i]),
                    None => println!("{l:>6} {:+.6e}", g.gradient[i]),
                }
            }
        }
        SensType::Transient => {
            let s = time_resolved_sensitivity(&model, &params, &values)?;
            tree.write_time_sensitivity(&s)?;
            println!(
                "{} parameters x {} gases x {} times in {:.2?}",
                s.labels.len(),
                s.gas_names.len(),
                s.times.len(),
                s.elapsed
            );
        }
    }
    println!("output written to {}", tree.root.display());
    Ok(())
}

pub fn hessian(args: &HessianArgs) -> Result<()> {
    let run = load(&args.run)?;
    let tree = OutputTree::create(&run.output, Some(&args.run.input))?;
    let model = model(&run, &args.run)?;
    let params = free_parameters(&model)?;
    let observed = data(&run, &args.data, &model)?;
    let objective = DataObjective::new(&model, &observed)?;
    let h = fd_hessian(&model, &params, &params.values(), &objective, args.rel_step)?;
    tree.write_hessian(&params.labels(), &h)?;
    println!(
        "{} gradient evaluations in {:.2?}, symmetry defect {:.3e}",
        h.gradient_evaluations, h.elapsed, h.symmetry_defect
    );
    println!("output written to {}", tree.root.display());
    Ok(())
}

pub fn reference(args: &ReferenceArgs) -> Result<()> {
    let tree = OutputTree::create(&args.output, None)?;
    let p = TransportParams {
        diffusivity: args.diffusivity,
        void_fraction: args.void,
        length: args.length,
    };
    p.validate()?;
    const SITES: f64 = 1e6;
    let config = SolverConfig {
        total_time: args.time,
        n_steps: args.steps,
        ..SolverConfig::default()
    };
    println!("{:>8} {:>14} {:>14}", "ka", "Linf/peak", "integral");
    for &ka in &args.ka {
        if !(ka >= 0.0) {
            return Err(Error::Input(format!("adsorption number must be non-negative, got {ka}")));
        }
        let k = ka * p.diffusivity / (SITES * p.length * p.length);
        let model = presets::adsorption_model(p.length, p.void_fraction, p.diffusivity, k, SITES, args.mesh, config.clone())?;
        let result = model.simulate(&model.base_rate_constants()?)?;
        let exact = irreversible_adsorption_curve(&result.times, &p, ka)?;
        let sim = &result.outlet_flux[0];
        let peak = exact.iter().copied().fold(0.0, f64::max);
        let err = sim.iter().zip(&exact).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        let integral: f64 = sim.iter().sum::<f64>() * model.dt();
        tree.write_reference(&format!("reference_ka_{ka}"), &result.times, sim, &exact)?;
        println!("{ka:>8} {:>14.4e} {:>14.6}", err / peak, integral);
    }
    println!("output written to {}", tree.root.display());
    Ok(())
}

fn best_of<T>(repeats: usize, mut f: impl FnMut() -> Result<T>) -> Result<Duration> {
    let mut best = Duration::MAX;
    for _ in 0..repeats.max(1) {
        let t0 = Instant::now();
        f()?;
        best = best.min(t0.elapsed());
    }
    Ok(best)
}

/// Gradient-cost scaling on the CO oxidation problem and the mesh economy of
/// catalyst-zone refinement.
pub fn benchmark(args: &BenchArgs) -> Result<()> {
    let tree = OutputTree::create(&args.output, None)?;
    let config = SolverConfig {
        scheme: args.scheme.into(),
        ..presets::co_oxidation_config()
    };
    let truth = presets::co_oxidation_model(presets::co_oxidation_true()?, config.clone())?;
    let r = truth.simulate(&truth.base_rate_constants()?)?;
    let observed = ExperimentalCurves::from_flux(&r.times, &r.gas_names, &r.outlet_flux);
    let start = [1.48, 3.25e-5, 4.70e-3, 1.0e-10, 10.4, 6.10e-3, 25.0, 5.28e-3];
    let model = presets::co_oxidation_model(presets::co_oxidation(start)?, config)?;
    let objective = DataObjective::new(&model, &observed)?;
    let k = model.base_rate_constants()?;
    let forward = best_of(args.repeats, || model.flux_history(&k))?;

    let mut rows = Vec::new();
    println!("{:>3} {:>12} {:>12} {:>12} {:>10} {:>10}", "n", "forward s", "adjoint s", "fd s", "adj/fwd", "fd/fwd");
    for n in 1..=8 {
        let ids: Vec<ParameterId> = presets::CO_OXIDATION_LABELS[..n]
            .iter()
            .map(|l| ParameterId::parse(l))
            .collect::<Result<_>>()?;
        let params = ParameterSet::new(model.mechanism(), model.reactor().temperature, ids)?;
        let values = params.values();
        let adjoint = best_of(args.repeats, || adjoint_gradient(&model, &params, &values, &objective))?;
        let fd = best_of(args.repeats, || fd_gradient(&model, &params, &values, &objective, 1.0 / 5000.0))?;
        let f = forward.as_secs_f64();
        println!(
            "{n:>3} {f:>12.4e} {:>12.4e} {:>12.4e} {:>10.2} {:>10.2}",
            adjoint.as_secs_f64(),
            fd.as_secs_f64(),
            adjoint.as_secs_f64() / f,
            fd.as_secs_f64() / f
        );
        rows.push(vec![
            n.to_string(),
            fmt_out(f),
            fmt_out(adjoint.as_secs_f64()),
            fmt_out(fd.as_secs_f64()),
        ]);
    }
    write_rows(
        &tree.root.join("gradient_scaling.csv"),
        &["free parameters", "forward (s)", "adjoint gradient (s)", "fd gradient (s)"],
        rows,
    )?;

    let economy = mesh_economy(args.repeats)?;
    println!(
        "refined mesh: {} cells ({} catalyst) in {:.4e} s; uniform mesh: {} cells in {:.4e} s; Linf after peak {:.3e} of peak",
        economy.refined_cells,
        economy.refined_catalyst_cells,
        economy.refined_time,
        economy.uniform_cells,
        economy.uniform_time,
        economy.error_after_peak
    );
    write_rows(
        &tree.root.join("mesh_economy.csv"),
        &["mesh", "cells", "catalyst cells", "wall time (s)", "Linf after peak (fraction of peak)"],
        vec![
            vec![
                "base 200 density 4".into(),
                economy.refined_cells.to_string(),
                economy.refined_catalyst_cells.to_string(),
                fmt_out(economy.refined_time),
                fmt_out(economy.error_after_peak),
            ],
            vec![
                "uniform 2500".into(),
                economy.uniform_cells.to_string(),
                economy.uniform_catalyst_cells.to_string(),
                fmt_out(economy.uniform_time),
                fmt_out(0.0),
            ],
        ],
    )?;
    println!("output written to {}", tree.root.display());
    Ok(())
}

struct MeshEconomy {
    refined_cells: usize,
    refined_catalyst_cells: usize,
    refined_time: f64,
    uniform_cells: usize,
    uniform_catalyst_cells: usize,
    uniform_time: f64,
    error_after_peak: f64,
}

/// Inert pulse through a 6 cm bed whose catalyst zone is 2 % of the length.
fn mesh_economy(repeats: usize) -> Result<MeshEconomy> {
    let reactor = tapwb_core::reactor::ReactorSpec {
        zone_lengths: [2.94, 0.12, 2.94],
        ..presets::uniform_reactor(6.0, 0.4, 13.5, 40.0, 0.02)
    };
    let config = SolverConfig {
        total_time: 3.0,
        n_steps: 2000,
        ..SolverConfig::default()
    };
    let refined = presets::inert_model(reactor.clone(), 200, 4, 1.0, config.clone())?;
    let uniform = presets::inert_model(reactor, 2500, 0, 1.0, config)?;
    let k = refined.base_rate_constants()?;
    let mut fr = Vec::new();
    let mut fu = Vec::new();
    let refined_time = best_of(repeats, || refined.flux_history(&k).map(|f| fr = f))?;
    let uniform_time = best_of(repeats, || uniform.flux_history(&k).map(|f| fu = f))?;
    let (a, b) = (&fr[0], &fu[0]);
    let ipeak = (0..b.len()).max_by(|&i, &j| b[i].total_cmp(&b[j])).unwrap_or(0);
    let peak = b[ipeak];
    let err = (ipeak..b.len()).map(|i| (a[i] - b[i]).abs()).fold(0.0, f64::max);
    Ok(MeshEconomy {
        refined_cells: refined.mesh().n_cells(),
        refined_catalyst_cells: refined.mesh().catalyst_cells(),
        refined_time: refined_time.as_secs_f64(),
        uniform_cells: uniform.mesh().n_cells(),
        uniform_catalyst_cells: uniform.mesh().catalyst_cells(),
        uniform_time: uniform_time.as_secs_f64(),
        error_after_peak: err / peak,
    })
}

fn write_rows(path: &Path, header: &[&str], rows: Vec<Vec<String>>) -> Result<()> {
    let header: Vec<String> = header.iter().map(|h| h.to_string()).collect();
    write_table(path, &header, rows)
}
