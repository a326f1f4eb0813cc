//! Ready-made reactors, mechanisms and schedules used by tests, benchmarks and
//! the CLI self-checks.

use crate::error::Result;
use crate::forward::{ForwardModel, GasPulse, InitialSurface, PulseSchedule, SolverConfig};
use crate::mechanism::Mechanism;
use crate::reactor::ReactorSpec;

/// The three-zone example reactor: 3.0/0.1/2.9 cm, void 0.4, radius 1 cm,
/// 400 K, reference diffusivity 13.5 cm²/s for mass 40 at 385.6 K.
pub fn example_reactor() -> ReactorSpec {
    ReactorSpec {
        zone_lengths: [3.0, 0.1, 2.9],
        zone_voids: [0.4; 3],
        radius: 1.0,
        temperature: 400.0,
        ref_diffusion_inert: 13.5,
        ref_diffusion_catalyst: 13.5,
        ref_temperature: 385.6,
        ref_mass: 40.0,
    }
}

/// Homogeneous reactor of length `length` whose gas of mass `mass` diffuses
/// with exactly `diffusivity`. The catalyst zone is a thin slice at the centre
/// when `catalyst_fraction` is small, or the whole bed when it is 1.
pub fn uniform_reactor(length: f64, void: f64, diffusivity: f64, mass: f64, catalyst_fraction: f64) -> ReactorSpec {
    let cat = length * catalyst_fraction;
    let inert = 0.5 * (length - cat);
    ReactorSpec {
        zone_lengths: [inert, cat, inert],
        zone_voids: [void; 3],
        radius: 1.0,
        temperature: 400.0,
        ref_diffusion_inert: diffusivity,
        ref_diffusion_catalyst: diffusivity,
        ref_temperature: 400.0,
        ref_mass: mass,
    }
}

pub const CO_OXIDATION_GASES: [(&str, f64); 3] = [("CO", 28.0), ("O2", 32.0), ("CO2", 44.0)];

/// Parameter labels of the four-step CO oxidation mechanism, in
/// (forward, reverse) order per step.
pub const CO_OXIDATION_LABELS: [&str; 8] = ["1f", "1b", "2f", "2b", "3f", "3b", "4f", "4b"];

/// Rate constants used to generate synthetic CO oxidation data.
pub const CO_OXIDATION_TRUE: [f64; 8] = [1.5, 0.15, 5.0e-3, 0.0, 10.5, 1.5e-2, 20.2, 0.0];

fn gases() -> Vec<(String, f64)> {
    CO_OXIDATION_GASES.iter().map(|(n, m)| (n.to_string(), *m)).collect()
}

const CO_OXIDATION_STEPS: [&str; 4] = [
    "CO + * <-> CO*",
    "O2 + 2* <-> 2O*",
    "CO* + O* <-> CO2 + 2*",
    "CO + O* <-> CO2 + *",
];

/// Four-step CO oxidation with every step reversible and the given
/// constants in [`CO_OXIDATION_LABELS`] order.
pub fn co_oxidation(k: [f64; 8]) -> Result<Mechanism> {
    let lines: Vec<(String, Vec<String>)> = CO_OXIDATION_STEPS
        .iter()
        .enumerate()
        .map(|(i, s)| (s.to_string(), vec![format!("{:e}", k[2 * i]), format!("{:e}", k[2 * i + 1])]))
        .collect();
    Mechanism::parse(&lines, &gases())
}

/// CO oxidation as used for synthetic data: steps 2 and 4 irreversible.
pub fn co_oxidation_true() -> Result<Mechanism> {
    let k = CO_OXIDATION_TRUE;
    let lines: Vec<(String, Vec<String>)> = vec![
        ("CO + * <-> CO*".into(), vec![format!("{:e}", k[0]), format!("{:e}", k[1])]),
        ("O2 + 2* -> 2O*".into(), vec![format!("{:e}", k[2]), "--".into()]),
        ("CO* + O* <-> CO2 + 2*".into(), vec![format!("{:e}", k[4]), format!("{:e}", k[5])]),
        ("CO + O* -> CO2 + *".into(), vec![format!("{:e}", k[6]), "--".into()]),
    ];
    Mechanism::parse(&lines, &gases())
}

/// 5 nmol of CO and O2 at t = 0; CO2 only as product.
pub fn co_oxidation_schedule(window: f64) -> PulseSchedule {
    PulseSchedule::single(
        vec![
            GasPulse { gas: "CO".into(), intensity: 5.0, time: 0.0 },
            GasPulse { gas: "O2".into(), intensity: 5.0, time: 0.0 },
            GasPulse { gas: "CO2".into(), intensity: 0.0, time: 0.0 },
        ],
        window,
    )
}

pub fn co_oxidation_surface() -> InitialSurface {
    InitialSurface(vec![("CO*".into(), 0.0), ("O*".into(), 0.0), ("*".into(), 12.0)])
}

pub fn co_oxidation_config() -> SolverConfig {
    SolverConfig {
        total_time: 1.0,
        n_steps: 1000,
        ..SolverConfig::default()
    }
}

/// Forward model of the CO oxidation problem on the example reactor.
pub fn co_oxidation_model(mech: Mechanism, config: SolverConfig) -> Result<ForwardModel> {
    let schedule = co_oxidation_schedule(config.total_time);
    ForwardModel::with_mesh_config(
        mech,
        example_reactor(),
        200,
        4,
        schedule,
        &co_oxidation_surface(),
        config,
    )
}

/// Single inert gas `Ar` (mass 40) pulsed at t = 0 with `intensity` nmol.
pub fn inert_model(reactor: ReactorSpec, base: usize, density: u32, intensity: f64, config: SolverConfig) -> Result<ForwardModel> {
    let mech = Mechanism::parse::<&str>(&[], &[("Ar".into(), 40.0)])?;
    let schedule = PulseSchedule::single(
        vec![GasPulse { gas: "Ar".into(), intensity, time: 0.0 }],
        config.total_time,
    );
    ForwardModel::with_mesh_config(mech, reactor, base, density, schedule, &InitialSurface::default(), config)
}

/// Irreversible adsorption `A + * -> A*` with rate constant `k` on a
/// catalyst bed spanning the whole reactor with `sites` nmol/cm³.
pub fn adsorption_model(length: f64, void: f64, diffusivity: f64, k: f64, sites: f64, base: usize, config: SolverConfig) -> Result<ForwardModel> {
    let mech = Mechanism::parse(
        &[("A + * -> A*".to_string(), vec![format!("{k:e}"), "--".to_string()])],
        &[("A".into(), 40.0)],
    )?;
    let reactor = uniform_reactor(length, void, diffusivity, 40.0, 1.0);
    let schedule = PulseSchedule::single(
        vec![GasPulse { gas: "A".into(), intensity: 1.0, time: 0.0 }],
        config.total_time,
    );
    let surface = InitialSurface(vec![("A*".into(), 0.0), ("*".into(), sites)]);
    ForwardModel::with_mesh_config(mech, reactor, base, 0, schedule, &surface, config)
}
