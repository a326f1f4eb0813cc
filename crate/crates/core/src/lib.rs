//! Simulation, adjoint sensitivities and kinetic fitting for temporal
//! analysis of products (TAP) pulse-response reactors.

pub mod constants;
pub mod error;
pub mod forward;
pub mod inverse;
pub mod linalg;
pub mod mechanism;
pub mod presets;
pub mod reactor;
pub mod reference;
pub mod sensitivity;
pub mod workbench;

pub use error::{Error, Result};
pub use forward::{
    DiscreteOperators, ForwardModel, GasPulse, InitialSurface, MassBalance, PulseSchedule, Scheme,
    SimulationResult, SolverConfig, State,
};
pub use mechanism::{
    ElementaryStep, Mechanism, RateConstants, RateForm, RateParam, Species, SpeciesKind, ThermoCombo,
};
pub use reactor::{build_mesh, Mesh, ReactorSpec, Zone};
pub use inverse::{ExperimentalCurves, FitOptions, FitProblem, FitReport, ObservedCurve, ThermoConstraint};
pub use sensitivity::{FluxObjective, ParameterId, ParameterSet};
pub use workbench::{ExperimentDefinition, OutputTree};
