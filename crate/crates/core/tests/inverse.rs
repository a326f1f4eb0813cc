mod common;

use common::*;
use proptest::prelude::*;
use tapwb_core::constants::GAS_CONSTANT;
use tapwb_core::inverse::*;
use tapwb_core::mechanism::parse_thermo_combo;
use tapwb_core::sensitivity::{central_difference, FluxObjective, ParameterSet};
use tapwb_core::*;

fn adsorption(kf: f64, kb: f64) -> ForwardModel {
    let (kf, kb) = (format!("{kf:e}"), format!("{kb:e}"));
    let m = mech(&[("A + * <-> A*", &[kf.as_str(), kb.as_str()])], &[("A", 40.0), ("Ar", 40.0)]);
    let schedule = PulseSchedule::single(vec![gas("A", 1.0), gas("Ar", 1.0)], 1.0);
    let surface = InitialSurface(vec![("A*".into(), 0.0), ("*".into(), 100.0)]);
    ForwardModel::with_mesh_config(m, presets::uniform_reactor(6.0, 0.4, 13.5, 40.0, 0.2), 60, 1, schedule, &surface, config(1.0, 300))
        .unwrap()
}

fn synthetic(model: &ForwardModel) -> ExperimentalCurves {
    let r = model.simulate(&model.base_rate_constants().unwrap()).unwrap();
    ExperimentalCurves::from_flux(&r.times, &r.gas_names, &r.outlet_flux)
}

fn single(gas: &str, t: f64, u: f64) -> ExperimentalCurves {
    ExperimentalCurves {
        curves: vec![ObservedCurve { gas: gas.into(), times: vec![t], flux: vec![u] }],
        noise_sigma: None,
    }
}

fn combo_r1(delta_g: f64, alpha: f64) -> ThermoConstraint {
    ThermoConstraint {
        delta_g_gas: delta_g,
        combo: parse_thermo_combo("r1", Some(1)).unwrap(),
        alpha,
        temperature: 400.0,
    }
}

#[test]
fn data_misfit_is_half_the_squared_residual() {
    let model = adsorption(0.3, 0.1);
    let n = model.times().len();
    let flux = vec![vec![3.0; n], vec![0.0; n]];
    let j = j_data(&model, &flux, &single("A", 0.25, 1.0)).unwrap();
    assert_eq!(j, 2.0);

    let data = synthetic(&model);
    let r = model.simulate(&model.base_rate_constants().unwrap()).unwrap();
    // t/dt round-off gives weights of order 1e-16 on the neighbouring step
    assert!(j_data(&model, &r.outlet_flux, &data).unwrap() < 1e-28);
}

#[test]
fn observations_between_steps_are_interpolated() {
    let model = adsorption(0.3, 0.1);
    let t = model.times();
    let line: Vec<f64> = t.iter().map(|v| 2.0 + 5.0 * v).collect();
    let flux = vec![line, vec![0.0; t.len()]];
    let off_grid: Vec<f64> = t.windows(2).map(|w| 0.3 * w[0] + 0.7 * w[1]).collect();
    let data = ExperimentalCurves {
        curves: vec![ObservedCurve {
            gas: "A".into(),
            flux: off_grid.iter().map(|v| 2.0 + 5.0 * v).collect(),
            times: off_grid,
        }],
        noise_sigma: None,
    };
    assert!(j_data(&model, &flux, &data).unwrap() < 1e-24);
}

#[test]
fn observation_outside_the_window_is_rejected() {
    let model = adsorption(0.3, 0.1);
    let e = DataObjective::new(&model, &single("A", 1.5, 1.0)).unwrap_err();
    assert!(matches!(e, Error::Objective(_)), "{e}");
    assert!(e.to_string().contains("1.5"));
    assert!(DataObjective::new(&model, &single("B", 0.5, 1.0)).is_err());
}

#[test]
fn zero_alpha_leaves_only_the_data_term() {
    let model = adsorption(0.3, 0.1);
    let data = synthetic(&adsorption(0.5, 0.1));
    let params = ParameterSet::free(model.mechanism(), 400.0).unwrap();
    let x = params.values();
    let plain = FitProblem::new(&model, &params, &data, None).unwrap().evaluate(&x).unwrap();
    let zero = FitProblem::new(&model, &params, &data, Some(combo_r1(-5000.0, 0.0))).unwrap().evaluate(&x).unwrap();
    assert_eq!(plain.total, plain.data);
    assert_eq!(zero, plain);
}

#[test]
fn combined_gradient_matches_differences() {
    let model = adsorption(0.3, 0.1);
    let data = synthetic(&adsorption(0.5, 0.1));
    let params = ParameterSet::free(model.mechanism(), 400.0).unwrap();
    let problem = FitProblem::new(&model, &params, &data, Some(combo_r1(-5000.0, 0.7))).unwrap();
    let x = params.values();
    let (parts, g, _) = problem.gradient(&x).unwrap();
    assert!(parts.thermo > 0.0 && parts.data > 0.0);
    let fd = central_difference(|v| Ok(problem.evaluate(v)?.total), &x, 1e-3).unwrap();
    for (a, b) in g.iter().zip(&fd) {
        assert!((a - b).abs() < 1e-4 * a.abs(), "{a:e} vs {b:e}");
    }
}

#[test]
fn fit_started_at_the_truth_stops_at_once() {
    let model = adsorption(0.5, 0.1);
    let data = synthetic(&model);
    let params = ParameterSet::free(model.mechanism(), 400.0).unwrap();
    let problem = FitProblem::new(&model, &params, &data, None).unwrap();
    let report = fit_parameters(&problem, &params.values(), &FitOptions::default()).unwrap();
    assert!(report.converged, "{}", report.stop_reason);
    assert!(report.iterations.len() <= 3);
    assert!(report.last().objective.total < 1e-28);
}

#[test]
fn fit_recovers_adsorption_constants() {
    let data = synthetic(&adsorption(0.5, 0.1));
    let model = adsorption(0.1, 0.3);
    let params = ParameterSet::free(model.mechanism(), 400.0).unwrap();
    let problem = FitProblem::new(&model, &params, &data, None).unwrap();
    let report = fit_parameters(&problem, &params.values(), &FitOptions::default()).unwrap();
    for w in report.iterations.windows(2) {
        assert!(w[1].objective.total <= w[0].objective.total);
    }
    let k = &report.final_values;
    assert!((k[0] - 0.5).abs() < 1e-3 * 0.5 && (k[1] - 0.1).abs() < 1e-3 * 0.1, "{k:?}");
    assert!(report.last().objective.total < 1e-8 * report.initial().objective.total);
    assert!(report.at_bound.iter().all(|b| !b));
}

#[test]
fn penalty_weight_pulls_the_free_energy_towards_the_target() {
    let data = synthetic(&adsorption(0.5, 0.1));
    // target corresponds to kf/kb = 20 rather than the data's 5
    let target = -GAS_CONSTANT * 400.0 * 20f64.ln();
    let model = adsorption(0.3, 0.3);
    let params = ParameterSet::free(model.mechanism(), 400.0).unwrap();
    let gap = |alpha: f64| {
        let problem = FitProblem::new(&model, &params, &data, Some(combo_r1(target, alpha))).unwrap();
        let report = fit_parameters(&problem, &params.values(), &FitOptions::default()).unwrap();
        (problem.free_energy_sum(&report.final_values).unwrap().unwrap() - target).abs()
    };
    let (loose, tight) = (gap(0.0), gap(1e3));
    assert!(tight < 0.1 * loose, "{tight} vs {loose}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn misfit_scales_with_the_square_of_the_flux(c in 0.01f64..100.0, u in -5.0f64..5.0, v in -5.0f64..5.0) {
        let model = adsorption(0.3, 0.1);
        let n = model.times().len();
        let flux = vec![vec![u; n], vec![0.0; n]];
        let scaled = vec![vec![c * u; n], vec![0.0; n]];
        let j = j_data(&model, &flux, &single("A", 0.5, v)).unwrap();
        let js = j_data(&model, &scaled, &single("A", 0.5, c * v)).unwrap();
        prop_assert!((js - c * c * j).abs() <= 1e-12 * js.abs().max(1e-300));
    }

    #[test]
    fn penalty_depends_only_on_the_summed_free_energy(
        k in proptest::collection::vec(1e-3f64..1e3, 4),
        f in 0.1f64..10.0,
    ) {
        let c = ThermoConstraint {
            delta_g_gas: -3000.0,
            combo: parse_thermo_combo("r1 + r2", Some(2)).unwrap(),
            alpha: 1.0,
            temperature: 400.0,
        };
        let rev = [true, true];
        let mut a = RateConstants::zeros(2);
        a.forward = vec![k[0], k[1]];
        a.reverse = vec![k[2], k[3]];
        // move free energy from step 1 to step 2
        let mut b = a.clone();
        b.forward[0] *= f;
        b.reverse[1] *= f;
        let (ja, _) = j_thermo(&a, &c, &rev).unwrap();
        let (jb, _) = j_thermo(&b, &c, &rev).unwrap();
        prop_assert!((ja - jb).abs() <= 1e-9 * ja.max(1.0));
    }
}

#[test]
fn objective_gradient_is_zero_at_the_data() {
    let model = adsorption(0.3, 0.1);
    let data = synthetic(&model);
    let obj = DataObjective::new(&model, &data).unwrap();
    let r = model.simulate(&model.base_rate_constants().unwrap()).unwrap();
    let mut g = vec![vec![1.0; r.times.len()]; 2];
    assert!(obj.evaluate(&r.outlet_flux, Some(&mut g)).unwrap() < 1e-28);
    assert!(g.iter().flatten().all(|v| v.abs() < 1e-14));
}
