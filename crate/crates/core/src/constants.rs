//! Physical constants (CODATA 2018 exact values where defined).

/// Molar gas constant, J/(mol·K).
pub const GAS_CONSTANT: f64 = 8.314_462_618;

/// Boltzmann constant, J/K.
pub const BOLTZMANN: f64 = 1.380_649e-23;

/// Planck constant, J·s.
pub const PLANCK: f64 = 6.626_070_15e-34;

/// kJ/mol to J/mol.
pub const KJ: f64 = 1000.0;
