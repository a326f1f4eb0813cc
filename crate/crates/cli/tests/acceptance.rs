//! End-to-end checks of the workbench against analytical curves, synthetic
//! inverse problems and its own benchmark output. Each check prints one
//! `criterion N: PASS|FAIL` line. They run one at a time so that timings are
//! not distorted by each other.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::Mutex;
use std::time::Instant;

use tapwb_core::constants::GAS_CONSTANT;
use tapwb_core::inverse::{fit_parameters, DataObjective, FitOptions, FitProblem};
use tapwb_core::reference::{diffusion_curve, irreversible_adsorption_curve, TransportParams};
use tapwb_core::sensitivity::{adjoint_gradient, fd_gradient, time_resolved_sensitivity, ParameterSet};
use tapwb_core::workbench::{add_noise, load_input, render_input, save_input};
use tapwb_core::{presets, ExperimentalCurves, ForwardModel, Scheme, SolverConfig};

static SERIAL: Mutex<()> = Mutex::new(());

fn serial() -> std::sync::MutexGuard<'static, ()> {
    SERIAL.lock().unwrap_or_else(|e| e.into_inner())
}

fn report(n: &str, pass: bool, detail: String) {
    println!("criterion {n}: {} {detail}", if pass { "PASS" } else { "FAIL" });
}

fn inputs() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../inputs")
}

const LENGTH: f64 = 6.0;
const VOID: f64 = 0.4;
const DIFFUSIVITY: f64 = 13.5;
const SITES: f64 = 1e6;

fn transport() -> TransportParams {
    TransportParams { diffusivity: DIFFUSIVITY, void_fraction: VOID, length: LENGTH }
}

fn reference_config() -> SolverConfig {
    SolverConfig { total_time: 3.0, n_steps: 2000, ..SolverConfig::default() }
}

fn linf(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn peak(a: &[f64]) -> f64 {
    a.iter().copied().fold(0.0, f64::max)
}

fn trapezoid(t: &[f64], f: &[f64]) -> f64 {
    t.windows(2).zip(f.windows(2)).map(|(t, f)| 0.5 * (t[1] - t[0]) * (f[0] + f[1])).sum()
}

#[test]
fn criterion_1_inert_pulse_matches_the_diffusion_series() {
    let _g = serial();
    let t0 = Instant::now();
    let reactor = presets::uniform_reactor(LENGTH, VOID, DIFFUSIVITY, 40.0, 1.0);
    let model = presets::inert_model(reactor, 200, 0, 1.0, reference_config()).unwrap();
    let r = model.simulate(&model.base_rate_constants().unwrap()).unwrap();
    let elapsed = t0.elapsed().as_secs_f64();
    let exact = diffusion_curve(&r.times, &transport()).unwrap();
    let err = linf(&r.outlet_flux[0], &exact) / peak(&exact);
    let integral = trapezoid(&r.times, &r.outlet_flux[0]);
    let pass = model.mesh().n_cells() == 200 && err < 1e-2 && (integral - 1.0).abs() < 5e-3 && elapsed < 30.0;
    report(
        "1",
        pass,
        format!("Linf/peak {err:.3e} (< 1e-2), integral {integral:.6} (1 +- 5e-3), {elapsed:.2} s (< 30 s)"),
    );
    assert!(pass);
}

#[test]
fn criterion_2_irreversible_adsorption_matches_its_series() {
    let _g = serial();
    let p = transport();
    let mut worst = 0.0f64;
    let mut lines = Vec::new();
    for ka in [0.5, 2.0, 8.0] {
        let k = ka * DIFFUSIVITY / (SITES * LENGTH * LENGTH);
        let model = presets::adsorption_model(LENGTH, VOID, DIFFUSIVITY, k, SITES, 200, reference_config()).unwrap();
        let r = model.simulate(&model.base_rate_constants().unwrap()).unwrap();
        let exact = irreversible_adsorption_curve(&r.times, &p, ka).unwrap();
        let err = linf(&r.outlet_flux[0], &exact) / peak(&exact);
        worst = worst.max(err);
        lines.push(format!("ka {ka}: {err:.3e}"));
    }
    // ka = 0 must reduce to the inert case on both sides
    let none = presets::adsorption_model(LENGTH, VOID, DIFFUSIVITY, 0.0, SITES, 200, reference_config()).unwrap();
    let inert = presets::inert_model(presets::uniform_reactor(LENGTH, VOID, DIFFUSIVITY, 40.0, 1.0), 200, 0, 1.0, reference_config()).unwrap();
    let a = none.simulate(&none.base_rate_constants().unwrap()).unwrap();
    let b = inert.simulate(&inert.base_rate_constants().unwrap()).unwrap();
    let same_sim = a.outlet_flux[0] == b.outlet_flux[0];
    let same_series = irreversible_adsorption_curve(&a.times, &p, 0.0).unwrap() == diffusion_curve(&a.times, &p).unwrap();
    let pass = worst < 1e-2 && same_sim && same_series;
    report(
        "2",
        pass,
        format!("Linf/peak {} (< 1e-2); ka 0 identical to inert: simulation {same_sim}, series {same_series}", lines.join(", ")),
    );
    assert!(pass);
}

fn co_problem(start: [f64; 8], scheme: Scheme) -> (ForwardModel, ExperimentalCurves) {
    let config = SolverConfig { scheme, ..presets::co_oxidation_config() };
    let truth = presets::co_oxidation_model(presets::co_oxidation_true().unwrap(), config.clone()).unwrap();
    let r = truth.simulate(&truth.base_rate_constants().unwrap()).unwrap();
    let data = ExperimentalCurves::from_flux(&r.times, &r.gas_names, &r.outlet_flux);
    (presets::co_oxidation_model(presets::co_oxidation(start).unwrap(), config).unwrap(), data)
}

const CONVERGED: [f64; 8] = [1.48, 3.25e-5, 4.70e-3, 1.0e-10, 10.4, 6.10e-3, 25.0, 5.28e-3];

#[test]
fn criterion_3_adjoint_gradient_against_differences() {
    let _g = serial();
    let (model, data) = co_problem(CONVERGED, Scheme::SemiImplicit);
    let params = ParameterSet::free(model.mechanism(), 400.0).unwrap();
    let labels = params.labels();
    let obj = DataObjective::new(&model, &data).unwrap();

    let x = params.values();
    let ad = adjoint_gradient(&model, &params, &x, &obj).unwrap();
    let fd = fd_gradient(&model, &params, &x, &obj, 1.0 / 5000.0).unwrap();
    // forward-mode oracle: chain the flux sensitivities with dJ/dF
    let s = time_resolved_sensitivity(&model, &params, &x).unwrap();
    let flux = model.flux_history(&params.rate_constants(&x)).unwrap();
    let mut tangent = vec![0.0; params.len()];
    for (g, c) in data.curves.iter().enumerate() {
        for n in 0..s.times.len() {
            for (p, t) in tangent.iter_mut().enumerate() {
                *t += (flux[g][n] - c.flux[n]) * s.values[g][n][p];
            }
        }
    }
    let scale = ad.gradient.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let mut bad = Vec::new();
    for i in 0..x.len() {
        let rel = (ad.gradient[i] - fd[i]).abs() / ad.gradient[i].abs();
        println!(
            "  {:>3} adjoint {:+.4e}  fd {:+.4e}  tangent {:+.4e}  rel {rel:.2e}",
            labels[i], ad.gradient[i], fd[i], tangent[i]
        );
        if ad.gradient[i].abs() > 1e-6 * scale && !(rel <= 1e-2) {
            bad.push(labels[i].clone());
        }
    }
    let converged_ok = bad.is_empty();

    let x0 = vec![1e-10; 8];
    let ad0 = adjoint_gradient(&model, &params, &x0, &obj).unwrap();
    let fd0 = fd_gradient(&model, &params, &x0, &obj, 1.0 / 5000.0).unwrap();
    for i in 0..x0.len() {
        println!("  {:>3} at 1e-10: adjoint {:+.4e}  fd {:+.4e}", labels[i], ad0.gradient[i], fd0[i]);
    }
    let initial_ok = [0, 2].iter().all(|&i| ad0.gradient[i] != 0.0 && fd0[i] == 0.0);

    let pass = converged_ok && initial_ok;
    report(
        "3",
        pass,
        format!(
            "converged point: mismatch beyond 1e-2 in {bad:?}; all-1e-10 point: adjoint 1f {:+.3e} 2f {:+.3e}, fd 1f {:+.3e} 2f {:+.3e} (fd must be 0)",
            ad0.gradient[0], ad0.gradient[2], fd0[0], fd0[2]
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_4_noiseless_fit_recovers_the_forward_constants() {
    let _g = serial();
    let (model, data) = co_problem([1e-10; 8], Scheme::Implicit);
    let params = ParameterSet::free(model.mechanism(), 400.0).unwrap();
    let problem = FitProblem::new(&model, &params, &data, None).unwrap();
    let options = FitOptions { keep_flux_snapshots: false, ..FitOptions::default() };
    let rep = fit_parameters(&problem, &[1e-10; 8], &options).unwrap();
    let ratio = rep.last().objective.data / rep.initial().objective.data;
    let k = &rep.final_values;
    let truth = presets::CO_OXIDATION_TRUE;
    let errors: Vec<f64> = [0, 2, 4, 6].iter().map(|&i| (k[i] - truth[i]).abs() / truth[i]).collect();
    let reverse_ok = [3, 7].iter().all(|&i| rep.undetermined[i] && k[i] <= 1e-2);
    let elapsed = rep.elapsed.as_secs_f64();
    let pass = ratio <= 1e-4 && errors.iter().all(|e| *e <= 0.25) && reverse_ok && elapsed < 1800.0;
    report(
        "4",
        pass,
        format!(
            "J ratio {ratio:.3e} (<= 1e-4); 1f 2f 3f 4f errors {:?} (<= 0.25); 2b {:.3e} 4b {:.3e} undetermined {}/{}; {} iterations, {elapsed:.0} s",
            errors.iter().map(|e| format!("{e:.2e}")).collect::<Vec<_>>(),
            k[3],
            k[7],
            rep.undetermined[3],
            rep.undetermined[7],
            rep.iterations.len() - 1
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_4_noisy_fit_reduction() {
    let _g = serial();
    let (model, clean) = co_problem([1e-10; 8], Scheme::Implicit);
    let data = add_noise(&clean, 0.02, 1).unwrap();
    let params = ParameterSet::free(model.mechanism(), 400.0).unwrap();
    let problem = FitProblem::new(&model, &params, &data, None).unwrap();
    let options = FitOptions { keep_flux_snapshots: false, ..FitOptions::default() };
    let rep = fit_parameters(&problem, &[1e-10; 8], &options).unwrap();
    let ratio = rep.last().objective.data / rep.initial().objective.data;
    let at_truth = problem.evaluate(&presets::CO_OXIDATION_TRUE.map(|v| v.max(1e-12))).unwrap().data;
    let floor = at_truth / rep.initial().objective.data;
    let pass = ratio <= 1e-2;
    report(
        "4 (2% noise)",
        pass,
        format!(
            "J ratio {ratio:.3e} (<= 1e-2); J at the true constants is {at_truth:.4e}, a ratio of {floor:.3e}; {} iterations",
            rep.iterations.len() - 1
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_5_free_energy_penalty() {
    let _g = serial();
    let truth = load_input(&inputs().join("serial/truth.csv")).unwrap();
    let fit = load_input(&inputs().join("serial/fit.csv")).unwrap();
    // overall free energy from the true rate-constant ratios
    let t = truth.reactor.temperature;
    let kt = truth.mechanism().unwrap().rate_constants(t).unwrap();
    let dg: f64 = (0..3).map(|i| -GAS_CONSTANT * t * (kt.forward[i] / kt.reverse[i]).ln()).sum();
    let file_dg = fit.thermo.as_ref().unwrap().delta_g_gas.unwrap();

    let tm = truth.forward_model(truth.solver_config(Scheme::SemiImplicit)).unwrap();
    let r = tm.simulate(&tm.base_rate_constants().unwrap()).unwrap();
    let data = add_noise(&ExperimentalCurves::from_flux(&r.times, &r.gas_names, &r.outlet_flux), 0.02, 1).unwrap();
    let model = fit.forward_model(fit.solver_config(Scheme::SemiImplicit)).unwrap();
    let params = ParameterSet::free(model.mechanism(), t).unwrap();
    let run = |alpha: f64| {
        let problem = FitProblem::new(&model, &params, &data, fit.thermo_constraint(alpha).unwrap()).unwrap();
        let options = FitOptions { keep_flux_snapshots: false, ..FitOptions::default() };
        let rep = fit_parameters(&problem, &[1.0; 6], &options).unwrap();
        let k = params.rate_constants(&rep.final_values);
        let sum: f64 = (0..3).map(|i| -GAS_CONSTANT * t * (k.forward[i] / k.reverse[i]).ln()).sum();
        (rep.last().objective.data, (dg - sum).abs() / 1000.0)
    };
    let (j0, gap0) = run(0.0);
    let (j1, gap1) = run(1.0);
    let pass = (file_dg - dg).abs() < 0.01 && gap1 < 1.0 && j1 <= 2.0 * j0;
    report(
        "5",
        pass,
        format!("gap {gap1:.3e} kJ/mol (< 1; unconstrained {gap0:.1}); J_data {j1:.5e} vs unconstrained {j0:.5e} (<= 2x)"),
    );
    assert!(pass);
}

#[test]
fn criterion_6_refined_mesh_economy() {
    let _g = serial();
    let reactor = tapwb_core::reactor::ReactorSpec {
        zone_lengths: [2.94, 0.12, 2.94],
        ..presets::uniform_reactor(LENGTH, VOID, DIFFUSIVITY, 40.0, 0.02)
    };
    let refined = presets::inert_model(reactor.clone(), 200, 4, 1.0, reference_config()).unwrap();
    let uniform = presets::inert_model(reactor, 2500, 0, 1.0, reference_config()).unwrap();
    let k = refined.base_rate_constants().unwrap();
    let time = |m: &ForwardModel| {
        let mut best = f64::INFINITY;
        let mut flux = Vec::new();
        for _ in 0..3 {
            let t0 = Instant::now();
            flux = m.flux_history(&k).unwrap();
            best = best.min(t0.elapsed().as_secs_f64());
        }
        (best, flux)
    };
    let (tr, fr) = time(&refined);
    let (tu, fu) = time(&uniform);
    let top = (0..fu[0].len()).max_by(|&i, &j| fu[0][i].total_cmp(&fu[0][j])).unwrap();
    let err = linf(&fr[0][top..], &fu[0][top..]) / fu[0][top];
    let cells = (refined.mesh().n_cells(), refined.mesh().catalyst_cells());
    let pass = cells == (264, 64) && err < 1e-2 && tr < tu;
    report(
        "6",
        pass,
        format!(
            "{} cells with {} in the catalyst zone (264/64); Linf after peak {err:.3e} (< 1e-2); {tr:.4} s vs uniform {} cells {tu:.4} s",
            cells.0,
            cells.1,
            uniform.mesh().n_cells()
        ),
    );
    assert!(pass);
}

fn read_table(path: &Path) -> Vec<Vec<f64>> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(|c| c.parse().unwrap()).collect())
        .collect()
}

#[test]
fn criterion_7_gradient_cost_scaling() {
    let _g = serial();
    let dir = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_tapwb"))
        .args(["benchmark", "--output", "bench", "--repeats", "3"])
        .env("TAPWB_THREADS", "1")
        .current_dir(dir.path())
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    print!("{}", String::from_utf8_lossy(&out.stdout));
    let rows = read_table(&dir.path().join("bench/gradient_scaling.csv"));
    assert_eq!(rows.len(), 8);
    let forward = rows[0][1];
    let adjoint: Vec<f64> = rows.iter().map(|r| r[2] / forward).collect();
    let fd: Vec<f64> = rows.iter().map(|r| r[3] / (2.0 * r[0] * forward)).collect();
    let adjoint_ok = adjoint.iter().all(|a| *a <= 5.0);
    let flat = adjoint[7] <= 2.0 * adjoint[0];
    let linear = fd.iter().all(|f| (0.5..=2.0).contains(f));
    let pass = adjoint_ok && flat && linear;
    report(
        "7",
        pass,
        format!(
            "adjoint/forward {:?} (<= 5, n = 8 within 2x of n = 1); fd/(2n forward) {:?} (0.5..2)",
            adjoint.iter().map(|v| format!("{v:.2}")).collect::<Vec<_>>(),
            fd.iter().map(|v| format!("{v:.2}")).collect::<Vec<_>>()
        ),
    );
    assert!(pass);
}

fn tree_bytes(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

#[test]
fn criterion_8_determinism_and_round_trip() {
    let _g = serial();
    let dir = tempfile::tempdir().unwrap();
    let shrink = |name: &str| {
        let text = fs::read_to_string(inputs().join("serial").join(name))
            .unwrap()
            .replace("Mesh Size,200", "Mesh Size,60")
            .replace("Catalyst Mesh Density,4", "Catalyst Mesh Density,1")
            .replace("Time Steps,1000", "Time Steps,300");
        fs::write(dir.path().join(name), text).unwrap();
    };
    shrink("truth.csv");
    shrink("fit.csv");
    let run = |args: &[&str]| {
        let out = Command::new(env!("CARGO_BIN_EXE_tapwb")).args(args).current_dir(dir.path()).output().unwrap();
        assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    };
    let mut identical = true;
    let mut copies = true;
    for tag in ["a", "b"] {
        run(&["synthesize", "--input", "truth.csv", "--noise", "0.02", "--seed", "5", "--output", &format!("data_{tag}")]);
    }
    identical &= tree_bytes(&dir.path().join("data_a")) == tree_bytes(&dir.path().join("data_b"));
    fs::rename(dir.path().join("data_a"), dir.path().join("data")).unwrap();
    let commands: [(&str, &[&str]); 4] = [
        ("sim", &["simulate", "--input", "truth.csv"]),
        ("fit", &["fit", "--input", "fit.csv"]),
        ("sens", &["sensitivity", "--input", "truth.csv", "--sens-type", "transient"]),
        ("hess", &["hessian", "--input", "fit.csv"]),
    ];
    for (name, args) in commands {
        for tag in ["a", "b"] {
            let mut a = args.to_vec();
            let out = format!("{name}_{tag}");
            a.extend(["--output", out.as_str()]);
            run(&a);
        }
        let (a, b) = (tree_bytes(&dir.path().join(format!("{name}_a"))), tree_bytes(&dir.path().join(format!("{name}_b"))));
        identical &= a == b;
        let input = args[2];
        copies &= a.get(Path::new(input)) == Some(&fs::read(dir.path().join(input)).unwrap());
    }

    let mut lossless = true;
    for name in ["table1.csv", "co_oxidation/truth.csv", "co_oxidation/fit.csv", "serial/fit.csv"] {
        let def = load_input(&inputs().join(name)).unwrap();
        let path = dir.path().join("round_trip.csv");
        save_input(&def, &path).unwrap();
        let back = load_input(&path).unwrap();
        lossless &= back == def && render_input(&back) == fs::read_to_string(&path).unwrap();
    }
    let pass = identical && copies && lossless;
    report(
        "8",
        pass,
        format!("repeated runs byte-identical {identical}; input copy in every tree {copies}; load/save lossless {lossless}"),
    );
    assert!(pass);
}
