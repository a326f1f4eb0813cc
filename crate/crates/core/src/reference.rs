//! Closed-form exit-flux curves of a uniform one-zone reactor.
//!
//! With `τ = t·D/(ε·L²)` the normalised outlet flux of an inert pulse is
//!
//! ```text
//! F/N = D/(ε L²) · π Σ_{n≥0} (−1)^n (2n+1) exp(−(n+½)² π² τ)
//! ```
//!
//! which converges slowly for small τ; there the equivalent image-source
//! series `Σ (−1)^n (2n+1) exp(−(2n+1)²/(4τ)) / (√π τ^{3/2})` is used.
//! First-order irreversible adsorption on a uniform site density multiplies
//! the dimensionless curve by `exp(−k′τ)`.

use std::f64::consts::PI;

use crate::error::{Error, Result};

/// Transport data of the equivalent one-zone reactor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TransportParams {
    /// cm²/s
    pub diffusivity: f64,
    pub void_fraction: f64,
    /// cm
    pub length: f64,
}

impl TransportParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.diffusivity > 0.0 && self.length > 0.0)
            || !(self.void_fraction > 0.0 && self.void_fraction <= 1.0)
        {
            return Err(Error::Input(format!("invalid transport parameters {self:?}")));
        }
        Ok(())
    }

    /// `D/(ε L²)`, 1/s.
    pub fn rate(&self) -> f64 {
        self.diffusivity / (self.void_fraction * self.length * self.length)
    }

    pub fn dimensionless_time(&self, t: f64) -> f64 {
        t * self.rate()
    }
}

/// Series truncation controls.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SeriesConfig {
    /// Stop once a term falls below `tolerance` times the running sum.
    pub tolerance: f64,
    pub max_terms: usize,
    /// Below this τ the image-source series is used.
    pub switch_tau: f64,
}

impl Default for SeriesConfig {
    fn default() -> Self {
        SeriesConfig {
            tolerance: 1e-15,
            max_terms: 100_000,
            switch_tau: 0.3,
        }
    }
}

/// Dimensionless inert exit flux `F/N · εL²/D` at dimensionless time `tau`.
pub fn standard_curve(tau: f64, cfg: &SeriesConfig) -> f64 {
    if !(tau > 0.0) {
        return 0.0;
    }
    if tau < cfg.switch_tau {
        image_series(tau, cfg)
    } else {
        spectral_series(tau, cfg)
    }
}

/// Eigenfunction expansion; accurate for moderate and large τ.
pub fn spectral_series(tau: f64, cfg: &SeriesConfig) -> f64 {
    let mut sum = 0.0;
    for n in 0..cfg.max_terms {
        let a = (n as f64 + 0.5) * PI;
        let term = (2 * n + 1) as f64 * (-a * a * tau).exp();
        let signed = if n % 2 == 0 { term } else { -term };
        sum += signed;
        if term <= cfg.tolerance * sum.abs() || term == 0.0 {
            break;
        }
    }
    PI * sum
}

/// Image-source expansion; accurate for small τ.
pub fn image_series(tau: f64, cfg: &SeriesConfig) -> f64 {
    let pre = 1.0 / (PI.sqrt() * tau.powf(1.5));
    let mut sum = 0.0;
    for n in 0..cfg.max_terms {
        let m = (2 * n + 1) as f64;
        let term = m * (-m * m / (4.0 * tau)).exp();
        let signed = if n % 2 == 0 { term } else { -term };
        sum += signed;
        if term <= cfg.tolerance * sum.abs() || term == 0.0 {
            break;
        }
    }
    pre * sum
}

/// Normalised inert exit flux `F/N` (1/s) at the given times.
pub fn diffusion_curve(times: &[f64], p: &TransportParams) -> Result<Vec<f64>> {
    p.validate()?;
    let cfg = SeriesConfig::default();
    Ok(times
        .iter()
        .map(|&t| p.rate() * standard_curve(p.dimensionless_time(t), &cfg))
        .collect())
}

/// Dimensionless adsorption number `k′ = k·S·L²/D` for the reaction
/// `A + * -> A*` with rate constant `k` (cm³/(nmol·s)) on a site density `S`
/// (nmol/cm³ of reactor volume) that stays effectively constant.
pub fn adsorption_number(k: f64, site_density: f64, p: &TransportParams) -> f64 {
    k * site_density * p.length * p.length / p.diffusivity
}

/// Normalised exit flux (1/s) with first-order irreversible adsorption of
/// dimensionless strength `ka` over the whole reactor.
pub fn irreversible_adsorption_curve(times: &[f64], p: &TransportParams, ka: f64) -> Result<Vec<f64>> {
    if !(ka >= 0.0) || !ka.is_finite() {
        return Err(Error::Input(format!("adsorption number must be non-negative, got {ka}")));
    }
    p.validate()?;
    let cfg = SeriesConfig::default();
    Ok(times
        .iter()
        .map(|&t| {
            let tau = p.dimensionless_time(t);
            p.rate() * standard_curve(tau, &cfg) * (-ka * tau).exp()
        })
        .collect())
}

/// Fraction of an irreversibly adsorbing pulse that leaves the reactor:
/// `1/cosh(√k′)`.
pub fn adsorption_conversion_complement(ka: f64) -> f64 {
    1.0 / ka.sqrt().cosh()
}
