//! Objectives and bound-constrained kinetic fitting.

use std::time::{Duration, Instant};

use crate::constants::{GAS_CONSTANT, KJ};
use crate::error::{Error, Result};
use crate::forward::ForwardModel;
use crate::mechanism::{RateConstants, ThermoCombo};
use crate::sensitivity::{adjoint_gradient, FluxObjective, ParameterSet};

/// Measured outlet flux of one gas.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservedCurve {
    pub gas: String,
    /// s, strictly increasing
    pub times: Vec<f64>,
    /// nmol/s
    pub flux: Vec<f64>,
}

impl ObservedCurve {
    pub fn validate(&self) -> Result<()> {
        if self.times.len() != self.flux.len() {
            return Err(Error::Input(format!(
                "{}: {} times but {} flux values",
                self.gas,
                self.times.len(),
                self.flux.len()
            )));
        }
        for (i, w) in self.times.windows(2).enumerate() {
            if !(w[1] > w[0]) {
                return Err(Error::Input(format!("{}: time is not increasing at row {}", self.gas, i + 1)));
            }
        }
        if let Some(i) = self.flux.iter().chain(&self.times).position(|v| !v.is_finite()) {
            return Err(Error::Input(format!("{}: non-finite value at entry {i}", self.gas)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ExperimentalCurves {
    pub curves: Vec<ObservedCurve>,
    /// Standard deviation of added noise, when known.
    pub noise_sigma: Option<f64>,
}

impl ExperimentalCurves {
    /// Sample a simulated flux history at every time step.
    pub fn from_flux(times: &[f64], gas_names: &[String], flux: &[Vec<f64>]) -> Self {
        ExperimentalCurves {
            curves: gas_names
                .iter()
                .zip(flux)
                .map(|(g, f)| ObservedCurve {
                    gas: g.clone(),
                    times: times.to_vec(),
                    flux: f.clone(),
                })
                .collect(),
            noise_sigma: None,
        }
    }

    pub fn get(&self, gas: &str) -> Option<&ObservedCurve> {
        self.curves.iter().find(|c| c.gas == gas)
    }
}

/// Linear-interpolation weights of an observation time on the step grid.
#[derive(Debug, Clone, Copy)]
struct Sample {
    index: usize,
    weight: f64,
}

/// J_data = Σ ½ (F(t_obs) − u_obs)² with F linearly interpolated in time.
#[derive(Debug, Clone)]
pub struct DataObjective {
    /// Per model gas: (samples, observed values).
    terms: Vec<Option<(Vec<Sample>, Vec<f64>)>>,
}

impl DataObjective {
    pub fn new(model: &ForwardModel, data: &ExperimentalCurves) -> Result<Self> {
        let names = model.mechanism().gas_names();
        let dt = model.dt();
        let n_t = model.n_steps();
        let t_end = n_t as f64 * dt;
        for c in &data.curves {
            c.validate()?;
            if !names.contains(&c.gas.as_str()) {
                return Err(Error::Objective(format!("observed gas '{}' is not in the model", c.gas)));
            }
        }
        let terms = names
            .iter()
            .map(|g| {
                data.get(g)
                    .map(|c| -> Result<_> {
                        let samples = c
                            .times
                            .iter()
                            .map(|&t| {
                                if t < 0.0 || t > t_end * (1.0 + 1e-12) {
                                    return Err(Error::Objective(format!(
                                        "{g}: observation at {t} s lies outside the simulated window [0, {t_end}] s"
                                    )));
                                }
                                let x = (t / dt).min(n_t as f64);
                                let index = (x.floor() as usize).min(n_t.saturating_sub(1));
                                Ok(Sample { index, weight: x - index as f64 })
                            })
                            .collect::<Result<Vec<_>>>()?;
                        Ok((samples, c.flux.clone()))
                    })
                    .transpose()
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(DataObjective { terms })
    }
}

impl FluxObjective for DataObjective {
    fn evaluate(&self, flux: &[Vec<f64>], mut grad: Option<&mut [Vec<f64>]>) -> Result<f64> {
        if let Some(g) = grad.as_deref_mut() {
            g.iter_mut().for_each(|row| row.fill(0.0));
        }
        let mut j = 0.0;
        for (g, term) in self.terms.iter().enumerate() {
            let Some((samples, obs)) = term else { continue };
            let f = &flux[g];
            for (s, u) in samples.iter().zip(obs) {
                let sim = f[s.index] * (1.0 - s.weight) + f[s.index + 1] * s.weight;
                let r = sim - u;
                j += 0.5 * r * r;
                if let Some(gr) = grad.as_deref_mut() {
                    gr[g][s.index] += r * (1.0 - s.weight);
                    gr[g][s.index + 1] += r * s.weight;
                }
            }
        }
        Ok(j)
    }
}

/// J_data of a simulated flux history against observations.
pub fn j_data(model: &ForwardModel, flux: &[Vec<f64>], data: &ExperimentalCurves) -> Result<f64> {
    DataObjective::new(model, data)?.evaluate(flux, None)
}

/// Penalty tying elementary free energies to the overall reaction.
#[derive(Debug, Clone, PartialEq)]
pub struct ThermoConstraint {
    /// Overall gas-phase reaction free energy, J/mol.
    pub delta_g_gas: f64,
    pub combo: ThermoCombo,
    pub alpha: f64,
    /// K
    pub temperature: f64,
}

impl ThermoConstraint {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0) || !self.alpha.is_finite() {
            return Err(Error::Objective(format!("alpha must be non-negative, got {}", self.alpha)));
        }
        if self.alpha > 0.0 && self.combo.terms.is_empty() {
            return Err(Error::Objective("thermodynamic combination is empty".into()));
        }
        Ok(())
    }
}

/// Reaction free energy of each combo step, J/mol.
pub fn step_free_energies(k: &RateConstants, c: &ThermoConstraint, reversible: &[bool]) -> Result<Vec<f64>> {
    c.combo
        .terms
        .iter()
        .map(|&(s, _)| {
            if !reversible.get(s).copied().unwrap_or(false) {
                return Err(Error::Objective(format!(
                    "step r{} is irreversible; the thermodynamic constraint does not apply",
                    s + 1
                )));
            }
            let (kf, kb) = (k.forward[s], k.reverse[s]);
            if !(kf > 0.0 && kb > 0.0) {
                return Err(Error::Objective(format!(
                    "step r{} needs positive rate constants for the thermodynamic constraint",
                    s + 1
                )));
            }
            Ok(-GAS_CONSTANT * c.temperature * (kf / kb).ln())
        })
        .collect()
}

/// J_thermo = ((ΔG_gas − Σ c_i ΔG_i) / 1000)² in (kJ/mol)², with its
/// gradient with respect to all rate constants.
pub fn j_thermo(k: &RateConstants, c: &ThermoConstraint, reversible: &[bool]) -> Result<(f64, RateConstants)> {
    let dg = step_free_energies(k, c, reversible)?;
    let sum: f64 = c.combo.terms.iter().zip(&dg).map(|((_, ci), g)| ci * g).sum();
    let resid = (c.delta_g_gas - sum) / KJ;
    let mut grad = RateConstants::zeros(k.n_steps());
    let rt = GAS_CONSTANT * c.temperature;
    for &(s, ci) in &c.combo.terms {
        grad.forward[s] += 2.0 * resid / KJ * ci * rt / k.forward[s];
        grad.reverse[s] -= 2.0 * resid / KJ * ci * rt / k.reverse[s];
    }
    Ok((resid * resid, grad))
}

/// Model, free parameters, data and optional thermodynamic penalty.
pub struct FitProblem<'a> {
    pub model: &'a ForwardModel,
    pub params: &'a ParameterSet,
    pub data: DataObjective,
    pub thermo: Option<ThermoConstraint>,
}

/// Objective value split into its parts.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectiveParts {
    pub data: f64,
    pub thermo: f64,
    pub total: f64,
}

impl<'a> FitProblem<'a> {
    pub fn new(model: &'a ForwardModel, params: &'a ParameterSet, data: &ExperimentalCurves, thermo: Option<ThermoConstraint>) -> Result<Self> {
        if let Some(t) = &thermo {
            t.validate()?;
        }
        Ok(FitProblem {
            model,
            params,
            data: DataObjective::new(model, data)?,
            thermo,
        })
    }

    fn reversible(&self) -> Vec<bool> {
        self.model.mechanism().steps().iter().map(|s| s.reversible).collect()
    }

    fn thermo_part(&self, k: &RateConstants) -> Result<Option<(f64, RateConstants)>> {
        match &self.thermo {
            Some(t) if t.alpha > 0.0 => {
                let (v, g) = j_thermo(k, t, &self.reversible())?;
                Ok(Some((t.alpha * v, g)))
            }
            _ => Ok(None),
        }
    }

    /// J = J_data + α·J_thermo.
    pub fn evaluate(&self, values: &[f64]) -> Result<ObjectiveParts> {
        let k = self.params.rate_constants(values);
        let flux = self.model.flux_history(&k)?;
        let data = self.data.evaluate(&flux, None)?;
        let thermo = self.thermo_part(&k)?.map_or(0.0, |t| t.0);
        Ok(ObjectiveParts { data, thermo, total: data + thermo })
    }

    /// Objective parts, gradient with respect to the free parameters and the
    /// flux history.
    pub fn gradient(&self, values: &[f64]) -> Result<(ObjectiveParts, Vec<f64>, Vec<Vec<f64>>)> {
        let g = adjoint_gradient(self.model, self.params, values, &self.data)?;
        let k = self.params.rate_constants(values);
        let mut grad = g.gradient;
        let mut thermo = 0.0;
        if let Some((v, gk)) = self.thermo_part(&k)? {
            thermo = v;
            let alpha = self.thermo.as_ref().map_or(0.0, |t| t.alpha);
            for (a, b) in grad.iter_mut().zip(self.params.project(&gk)) {
                *a += alpha * b;
            }
        }
        Ok((
            ObjectiveParts { data: g.value, thermo, total: g.value + thermo },
            grad,
            g.flux,
        ))
    }

    /// Σ c_i ΔG_i (J/mol) at `values`, when a constraint is present.
    pub fn free_energy_sum(&self, values: &[f64]) -> Result<Option<f64>> {
        let Some(t) = &self.thermo else { return Ok(None) };
        let k = self.params.rate_constants(values);
        let dg = step_free_energies(&k, t, &self.reversible())?;
        Ok(Some(t.combo.terms.iter().zip(&dg).map(|((_, c), g)| c * g).sum()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitOptions {
    pub max_iterations: usize,
    /// Stop when the ∞-norm of the projected gradient (in the optimisation
    /// variables) falls below this.
    pub gtol: f64,
    /// Stop when the relative decrease of J in an iteration is below this.
    pub ftol: f64,
    pub lower_bound: f64,
    pub upper_bound: Option<f64>,
    /// L-BFGS memory.
    pub memory: usize,
    /// Length of a steepest-descent step taken without curvature memory:
    /// Euclidean length in k, or the largest change in decades on the log
    /// scale.
    pub initial_step: f64,
    /// Optimise log10 k instead of k.
    pub log_scale: bool,
    /// Relative J change below which a one-decade perturbation marks a
    /// parameter as undetermined.
    pub undetermined_threshold: f64,
    pub keep_flux_snapshots: bool,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            max_iterations: 300,
            gtol: 1e-8,
            ftol: 1e-12,
            lower_bound: 1e-12,
            upper_bound: None,
            memory: 10,
            initial_step: 1.0,
            log_scale: false,
            undetermined_threshold: 1e-6,
            keep_flux_snapshots: true,
        }
    }
}

#[derive(Debug, Clone)]
pub struct FitIterate {
    pub iteration: usize,
    pub values: Vec<f64>,
    pub objective: ObjectiveParts,
    pub gradient_norm: f64,
    pub flux: Option<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone)]
pub struct FitReport {
    pub labels: Vec<String>,
    pub units: Vec<String>,
    pub iterations: Vec<FitIterate>,
    pub converged: bool,
    pub stop_reason: String,
    pub final_values: Vec<f64>,
    pub at_bound: Vec<bool>,
    pub undetermined: Vec<bool>,
    pub forward_solves: usize,
    pub gradient_evaluations: usize,
    pub elapsed: Duration,
}

impl FitReport {
    pub fn initial(&self) -> &FitIterate {
        &self.iterations[0]
    }

    pub fn last(&self) -> &FitIterate {
        self.iterations.last().expect("report holds the initial iterate")
    }
}

struct Space {
    log: bool,
    lo: f64,
    hi: f64,
}

impl Space {
    fn z_to_k(&self, z: f64) -> f64 {
        if self.log {
            10f64.powf(z)
        } else {
            z
        }
    }

    fn k_to_z(&self, k: f64) -> f64 {
        if self.log {
            k.log10()
        } else {
            k
        }
    }

    /// dJ/dz from dJ/dk.
    fn chain(&self, k: f64, g: f64) -> f64 {
        if self.log {
            g * k * std::f64::consts::LN_10
        } else {
            g
        }
    }

    fn clamp(&self, z: f64) -> f64 {
        z.clamp(self.lo, self.hi)
    }
}

fn projected_gradient(z: &[f64], g: &[f64], space: &Space) -> Vec<f64> {
    z.iter()
        .zip(g)
        .map(|(&zi, &gi)| {
            let at_lo = zi <= space.lo + 1e-12 * (1.0 + space.lo.abs());
            let at_hi = zi >= space.hi - 1e-12 * (1.0 + space.hi.abs());
            if (at_lo && gi > 0.0) || (at_hi && gi < 0.0) {
                0.0
            } else {
                gi
            }
        })
        .collect()
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0f64, |m, x| m.max(x.abs()))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// L-BFGS two-loop recursion restricted to the `free` coordinates.
fn lbfgs_direction(g: &[f64], free: &[bool], mem: &[(Vec<f64>, Vec<f64>)]) -> Vec<f64> {
    let mask = |v: &[f64]| -> Vec<f64> { v.iter().zip(free).map(|(x, &f)| if f { *x } else { 0.0 }).collect() };
    let mut q = mask(g);
    let mut alphas = Vec::with_capacity(mem.len());
    for (s, y) in mem.iter().rev() {
        let (s, y) = (mask(s), mask(y));
        let sy = dot(&s, &y);
        if sy <= 0.0 {
            alphas.push(0.0);
            continue;
        }
        let a = dot(&s, &q) / sy;
        for (qi, yi) in q.iter_mut().zip(&y) {
            *qi -= a * yi;
        }
        alphas.push(a);
    }
    if let Some((s, y)) = mem.last() {
        let (s, y) = (mask(s), mask(y));
        let (sy, yy) = (dot(&s, &y), dot(&y, &y));
        if sy > 0.0 && yy > 0.0 {
            let gamma = sy / yy;
            q.iter_mut().for_each(|v| *v *= gamma);
        }
    }
    for ((s, y), a) in mem.iter().zip(alphas.iter().rev()) {
        let (s, y) = (mask(s), mask(y));
        let sy = dot(&s, &y);
        if sy <= 0.0 {
            continue;
        }
        let b = dot(&y, &q) / sy;
        for (qi, si) in q.iter_mut().zip(&s) {
            *qi += (a - b) * si;
        }
    }
    q.iter().map(|v| -v).collect()
}

/// Fit the free parameters by projected L-BFGS with adjoint gradients.
pub fn fit_parameters(problem: &FitProblem, x0: &[f64], options: &FitOptions) -> Result<FitReport> {
    let start = Instant::now();
    let n = problem.params.len();
    if x0.len() != n {
        return Err(Error::Optimizer(format!("{} initial values for {n} parameters", x0.len())));
    }
    if !(options.lower_bound > 0.0) && options.log_scale {
        return Err(Error::Optimizer("log-scale fitting needs a positive lower bound".into()));
    }
    let space = Space {
        log: options.log_scale,
        lo: if options.log_scale { options.lower_bound.log10() } else { options.lower_bound },
        hi: options.upper_bound.map_or(f64::INFINITY, |u| if options.log_scale { u.log10() } else { u }),
    };
    if space.hi <= space.lo {
        return Err(Error::Optimizer("upper bound must exceed the lower bound".into()));
    }

    let mut forward_solves = 0usize;
    let mut gradient_evaluations = 0usize;
    let to_k = |z: &[f64]| -> Vec<f64> { z.iter().map(|&v| space.z_to_k(v)).collect() };
    let eval_grad = |z: &[f64], count: &mut usize| -> Result<(ObjectiveParts, Vec<f64>, Vec<Vec<f64>>)> {
        *count += 1;
        let k = to_k(z);
        let (parts, gk, flux) = problem.gradient(&k)?;
        let gz = k.iter().zip(&gk).map(|(&ki, &gi)| space.chain(ki, gi)).collect();
        Ok((parts, gz, flux))
    };

    let mut z: Vec<f64> = x0.iter().map(|&k| space.clamp(space.k_to_z(k.max(options.lower_bound)))).collect();
    let (mut f, mut g, flux) = eval_grad(&z, &mut gradient_evaluations)?;
    let f_initial = f.total;
    let mut iterations = vec![FitIterate {
        iteration: 0,
        values: to_k(&z),
        objective: f,
        gradient_norm: inf_norm(&projected_gradient(&z, &g, &space)),
        flux: options.keep_flux_snapshots.then_some(flux),
    }];
    let mut memory: Vec<(Vec<f64>, Vec<f64>)> = Vec::new();
    let mut converged = false;
    let mut stop_reason = String::from("iteration limit reached");

    for iter in 1..=options.max_iterations {
        let pg = projected_gradient(&z, &g, &space);
        let pg_norm = inf_norm(&pg);
        if pg_norm <= options.gtol {
            converged = true;
            stop_reason = format!("projected gradient {pg_norm:e} below tolerance");
            break;
        }
        let free: Vec<bool> = pg.iter().zip(&g).map(|(p, gi)| *p != 0.0 || *gi == 0.0).collect();
        let mut d = lbfgs_direction(&g, &free, &memory);
        if dot(&d, &pg) >= 0.0 {
            memory.clear();
            d = pg.iter().map(|v| -v).collect();
        }
        let len = if space.log { inf_norm(&d) } else { dot(&d, &d).sqrt() };
        if memory.is_empty() || (space.log && len > options.initial_step) {
            let s = options.initial_step / len;
            d.iter_mut().for_each(|v| *v *= s);
        }

        let mut alpha = 1.0;
        let mut accepted = None;
        for _ in 0..40 {
            let zt: Vec<f64> = z.iter().zip(&d).map(|(zi, di)| space.clamp(zi + alpha * di)).collect();
            let step: Vec<f64> = zt.iter().zip(&z).map(|(a, b)| a - b).collect();
            if inf_norm(&step) == 0.0 {
                break;
            }
            forward_solves += 1;
            match problem.evaluate(&to_k(&zt)) {
                Ok(ft) if ft.total.is_finite() && ft.total <= f.total + 1e-4 * dot(&g, &step) => {
                    accepted = Some(zt);
                    break;
                }
                Ok(_) => {}
                Err(e) if e.is_solver_failure() => {
                    log::debug!("forward failure during line search: {e}");
                }
                Err(e) => return Err(e),
            }
            alpha *= 0.5;
        }
        let Some(zn) = accepted else {
            if !memory.is_empty() {
                memory.clear();
                continue;
            }
            stop_reason = "line search could not reduce the objective".into();
            converged = false;
            break;
        };
        let (fn_, gn, flux) = match eval_grad(&zn, &mut gradient_evaluations) {
            Ok(v) => v,
            Err(e) if e.is_solver_failure() => {
                stop_reason = format!("solver failure at accepted point: {e}");
                break;
            }
            Err(e) => return Err(e),
        };
        let s: Vec<f64> = zn.iter().zip(&z).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = gn.iter().zip(&g).map(|(a, b)| a - b).collect();
        if dot(&s, &y) > 1e-12 * (dot(&s, &s) * dot(&y, &y)).sqrt() {
            memory.push((s, y));
            if memory.len() > options.memory {
                memory.remove(0);
            }
        }
        let decrease = f.total - fn_.total;
        z = zn;
        f = fn_;
        g = gn;
        let gnorm = inf_norm(&projected_gradient(&z, &g, &space));
        log::info!("iteration {iter}: J = {:e}, |pg| = {gnorm:e}", f.total);
        iterations.push(FitIterate {
            iteration: iter,
            values: to_k(&z),
            objective: f,
            gradient_norm: gnorm,
            flux: options.keep_flux_snapshots.then_some(flux),
        });
        if decrease <= options.ftol * f.total.abs().max(f_initial.abs() * 1e-300) {
            converged = true;
            stop_reason = format!("relative decrease {:e} below tolerance", decrease / f.total.abs().max(1e-300));
            break;
        }
    }

    let final_values = to_k(&z);
    let at_bound: Vec<bool> = z
        .iter()
        .map(|&zi| zi <= space.lo + 1e-6 || zi >= space.hi - 1e-6)
        .collect();
    let undetermined = undetermined_flags(problem, &z, &space, f.total, f_initial, options, &at_bound, &mut forward_solves)?;
    Ok(FitReport {
        labels: problem.params.labels(),
        units: problem.params.units().to_vec(),
        iterations,
        converged,
        stop_reason,
        final_values,
        at_bound,
        undetermined,
        forward_solves,
        gradient_evaluations,
        elapsed: start.elapsed(),
    })
}

/// A parameter is undetermined when it sits on a bound or when moving it a
/// decade either way changes J by less than the threshold (relative to the
/// initial J).
#[allow(clippy::too_many_arguments)]
fn undetermined_flags(
    problem: &FitProblem,
    z: &[f64],
    space: &Space,
    f: f64,
    f_initial: f64,
    options: &FitOptions,
    at_bound: &[bool],
    forward_solves: &mut usize,
) -> Result<Vec<bool>> {
    let mut flags = Vec::with_capacity(z.len());
    for i in 0..z.len() {
        if at_bound[i] {
            flags.push(true);
            continue;
        }
        let mut change = 0.0f64;
        for delta in [-1.0, 1.0] {
            let mut zt = z.to_vec();
            zt[i] = if space.log {
                space.clamp(z[i] + delta)
            } else {
                space.clamp(z[i] * 10f64.powf(delta))
            };
            *forward_solves += 1;
            let k: Vec<f64> = zt.iter().map(|&v| space.z_to_k(v)).collect();
            match problem.evaluate(&k) {
                Ok(p) => change = change.max((p.total - f).abs()),
                Err(e) if e.is_solver_failure() => change = f64::INFINITY,
                Err(e) => return Err(e),
            }
        }
        flags.push(change < options.undetermined_threshold * f_initial.abs());
    }
    Ok(flags)
}
