#![allow(dead_code)]

use tapwb_core::*;

pub fn gas(name: &str, intensity: f64) -> GasPulse {
    GasPulse { gas: name.into(), intensity, time: 0.0 }
}

pub fn mech(lines: &[(&str, &[&str])], gases: &[(&str, f64)]) -> Mechanism {
    let lines: Vec<(String, Vec<String>)> = lines
        .iter()
        .map(|(l, c)| (l.to_string(), c.iter().map(|s| s.to_string()).collect()))
        .collect();
    let gases: Vec<(String, f64)> = gases.iter().map(|(n, m)| (n.to_string(), *m)).collect();
    Mechanism::parse(&lines, &gases).unwrap()
}

pub fn config(total_time: f64, n_steps: usize) -> SolverConfig {
    SolverConfig { total_time, n_steps, ..SolverConfig::default() }
}

/// CO oxidation forward model with every step reversible, and data generated
/// at the true constants.
pub fn co_problem(start: [f64; 8], scheme: Scheme) -> (ForwardModel, ExperimentalCurves) {
    let cfg = SolverConfig { scheme, ..presets::co_oxidation_config() };
    let truth = presets::co_oxidation_model(presets::co_oxidation_true().unwrap(), cfg.clone()).unwrap();
    let r = truth.simulate(&truth.base_rate_constants().unwrap()).unwrap();
    let data = ExperimentalCurves::from_flux(&r.times, &r.gas_names, &r.outlet_flux);
    let model = presets::co_oxidation_model(presets::co_oxidation(start).unwrap(), cfg).unwrap();
    (model, data)
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn peak(a: &[f64]) -> f64 {
    a.iter().copied().fold(0.0, f64::max)
}
