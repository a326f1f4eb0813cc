//! Shared fixtures for the solver benchmarks.

use tapwb_core::inverse::DataObjective;
use tapwb_core::sensitivity::ParameterSet;
use tapwb_core::{presets, ExperimentalCurves, ForwardModel, Result, Scheme, SolverConfig};

/// Rate constants near the fitted optimum of the CO oxidation problem.
pub const NEAR_OPTIMUM: [f64; 8] = [1.48, 3.25e-5, 4.70e-3, 1.0e-10, 10.4, 6.10e-3, 25.0, 5.28e-3];

pub struct CoProblem {
    pub model: ForwardModel,
    pub params: ParameterSet,
    pub objective: DataObjective,
}

/// CO oxidation against noiseless data from the true constants, with every
/// constant free.
pub fn co_problem(scheme: Scheme) -> Result<CoProblem> {
    let config = SolverConfig { scheme, ..presets::co_oxidation_config() };
    let truth = presets::co_oxidation_model(presets::co_oxidation_true()?, config.clone())?;
    let r = truth.simulate(&truth.base_rate_constants()?)?;
    let data = ExperimentalCurves::from_flux(&r.times, &r.gas_names, &r.outlet_flux);
    let model = presets::co_oxidation_model(presets::co_oxidation(NEAR_OPTIMUM)?, config)?;
    let params = ParameterSet::free(model.mechanism(), model.reactor().temperature)?;
    let objective = DataObjective::new(&model, &data)?;
    Ok(CoProblem { model, params, objective })
}
