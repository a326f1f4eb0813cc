//! Derivatives of flux objectives with respect to rate constants.
//!
//! Gradients come from a discrete adjoint sweep over the recorded time steps,
//! so they are exact for the discretised model. Time-resolved flux
//! sensitivities use forward (tangent) mode, one pass per parameter.
//! Central differences serve as an independent check.

use std::time::{Duration, Instant};

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::forward::{ForwardModel, State};
use crate::mechanism::{Mechanism, RateConstants};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Direction {
    Forward,
    Reverse,
}

/// One free rate constant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParameterId {
    /// 0-based step index.
    pub step: usize,
    pub direction: Direction,
}

impl ParameterId {
    /// "1f", "3b", ...
    pub fn label(&self) -> String {
        let d = match self.direction {
            Direction::Forward => 'f',
            Direction::Reverse => 'b',
        };
        format!("{}{d}", self.step + 1)
    }

    pub fn parse(label: &str) -> Result<Self> {
        let bad = || Error::Input(format!("'{label}' is not a parameter label like 1f or 2b"));
        let label = label.trim();
        let (num, dir) = label.split_at(label.len().checked_sub(1).ok_or_else(bad)?);
        let direction = match dir {
            "f" => Direction::Forward,
            "b" => Direction::Reverse,
            _ => return Err(bad()),
        };
        let step: usize = num.parse().map_err(|_| bad())?;
        if step == 0 {
            return Err(bad());
        }
        Ok(ParameterId { step: step - 1, direction })
    }
}

/// Units of a rate constant whose rate law has total order `order`.
pub fn rate_units(order: u32) -> String {
    match order {
        0 => "nmol/(cm3 s)".into(),
        1 => "1/s".into(),
        2 => "cm3/(nmol s)".into(),
        n => format!("cm{}/(nmol{} s)", 3 * (n - 1), n - 1),
    }
}

/// Ordered free parameters on top of a base set of rate constants.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterSet {
    ids: Vec<ParameterId>,
    base: RateConstants,
    units: Vec<String>,
}

impl ParameterSet {
    /// Every rate constant not marked fixed; reverse constants only for
    /// reversible steps.
    pub fn free(mech: &Mechanism, temperature: f64) -> Result<Self> {
        let mut ids = Vec::new();
        for (s, step) in mech.steps().iter().enumerate() {
            if !step.forward.fixed {
                ids.push(ParameterId { step: s, direction: Direction::Forward });
            }
            if let Some(rev) = &step.reverse {
                if !rev.fixed {
                    ids.push(ParameterId { step: s, direction: Direction::Reverse });
                }
            }
        }
        ParameterSet::new(mech, temperature, ids)
    }

    /// An explicit selection; fixed or absent constants are rejected.
    pub fn new(mech: &Mechanism, temperature: f64, ids: Vec<ParameterId>) -> Result<Self> {
        let base = mech.rate_constants(temperature)?;
        let mut units = Vec::with_capacity(ids.len());
        for (i, id) in ids.iter().enumerate() {
            let step = mech.steps().get(id.step).ok_or_else(|| {
                Error::Sensitivity(format!("parameter {} refers to a nonexistent step", id.label()))
            })?;
            let (param, side) = match id.direction {
                Direction::Forward => (Some(&step.forward), &step.reactants),
                Direction::Reverse => (step.reverse.as_ref(), &step.products),
            };
            let param = param.ok_or_else(|| {
                Error::Sensitivity(format!("step {} is irreversible; {} does not exist", id.step + 1, id.label()))
            })?;
            if param.fixed {
                return Err(Error::Sensitivity(format!("parameter {} is marked fixed", id.label())));
            }
            if ids[..i].contains(id) {
                return Err(Error::Sensitivity(format!("parameter {} selected twice", id.label())));
            }
            units.push(rate_units(side.iter().map(|t| t.coeff).sum()));
        }
        Ok(ParameterSet { ids, base, units })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[ParameterId] {
        &self.ids
    }

    pub fn labels(&self) -> Vec<String> {
        self.ids.iter().map(|p| p.label()).collect()
    }

    pub fn units(&self) -> &[String] {
        &self.units
    }

    pub fn base(&self) -> &RateConstants {
        &self.base
    }

    /// Current values of the free parameters in the base set.
    pub fn values(&self) -> Vec<f64> {
        self.ids.iter().map(|id| self.get(&self.base, id)).collect()
    }

    fn get(&self, k: &RateConstants, id: &ParameterId) -> f64 {
        match id.direction {
            Direction::Forward => k.forward[id.step],
            Direction::Reverse => k.reverse[id.step],
        }
    }

    /// Base constants with the free entries replaced by `values`.
    pub fn rate_constants(&self, values: &[f64]) -> RateConstants {
        assert_eq!(values.len(), self.ids.len(), "parameter vector length");
        let mut k = self.base.clone();
        for (id, &v) in self.ids.iter().zip(values) {
            match id.direction {
                Direction::Forward => k.forward[id.step] = v,
                Direction::Reverse => k.reverse[id.step] = v,
            }
        }
        k
    }

    /// Free-parameter components of a full rate-constant cotangent.
    pub fn project(&self, k_bar: &RateConstants) -> Vec<f64> {
        self.ids.iter().map(|id| self.get(k_bar, id)).collect()
    }

    /// Unit tangent along parameter `p`.
    pub fn unit(&self, p: usize) -> RateConstants {
        let mut dk = RateConstants::zeros(self.base.n_steps());
        let id = self.ids[p];
        match id.direction {
            Direction::Forward => dk.forward[id.step] = 1.0,
            Direction::Reverse => dk.reverse[id.step] = 1.0,
        }
        dk
    }
}

/// Rate constants marked fixed, as (label, value, units).
pub fn fixed_parameters(mech: &Mechanism, temperature: f64) -> Result<Vec<(String, f64, String)>> {
    let k = mech.rate_constants(temperature)?;
    let mut out = Vec::new();
    for (s, step) in mech.steps().iter().enumerate() {
        let order = |side: &[crate::mechanism::StoichTerm]| rate_units(side.iter().map(|t| t.coeff).sum());
        if step.forward.fixed {
            let id = ParameterId { step: s, direction: Direction::Forward };
            out.push((id.label(), k.forward[s], order(&step.reactants)));
        }
        if step.reverse.as_ref().is_some_and(|r| r.fixed) {
            let id = ParameterId { step: s, direction: Direction::Reverse };
            out.push((id.label(), k.reverse[s], order(&step.products)));
        }
    }
    Ok(out)
}

/// A scalar function of the outlet-flux history `flux[gas][time index]`.
pub trait FluxObjective: Sync {
    /// Objective value; when `grad` is given, also ∂J/∂flux with the same
    /// shape as `flux` (entries are overwritten).
    fn evaluate(&self, flux: &[Vec<f64>], grad: Option<&mut [Vec<f64>]>) -> Result<f64>;
}

#[derive(Debug, Clone)]
pub struct GradientResult {
    pub value: f64,
    pub gradient: Vec<f64>,
    pub flux: Vec<Vec<f64>>,
    pub elapsed: Duration,
}

/// Objective value at `values` (one forward solve).
pub fn objective_value(model: &ForwardModel, params: &ParameterSet, values: &[f64], objective: &dyn FluxObjective) -> Result<f64> {
    let flux = model.flux_history(&params.rate_constants(values))?;
    objective.evaluate(&flux, None)
}

fn add_flux_seed(model: &ForwardModel, lam: &mut State, seed: &[Vec<f64>], n: usize) {
    let ops = model.operators();
    let nn = ops.n_nodes;
    for (g, s) in seed.iter().enumerate() {
        lam.gas[g * nn + nn - 1] += s[n] * ops.outlet_coeff[g];
    }
}

/// Gradient of `objective` by one forward solve and one adjoint sweep.
pub fn adjoint_gradient(model: &ForwardModel, params: &ParameterSet, values: &[f64], objective: &dyn FluxObjective) -> Result<GradientResult> {
    let start = Instant::now();
    let k = params.rate_constants(values);
    let (flux, tape) = model.record(&k)?;
    let mut seed: Vec<Vec<f64>> = flux.iter().map(|f| vec![0.0; f.len()]).collect();
    let value = objective.evaluate(&flux, Some(&mut seed))?;
    let n_t = model.n_steps();

    let mut k_bar = RateConstants::zeros(k.n_steps());
    let mut lam = model.zero_state();
    add_flux_seed(model, &mut lam, &seed, n_t);
    let segments = model.tape_segments(&tape);
    for (si, &(n0, n1)) in segments.iter().enumerate().rev() {
        let (steps, end) = model.segment_tapes(&k, &tape, si, (n0, n1))?;
        for n in (n0..n1).rev() {
            let next = if n + 1 < n1 { &steps[n + 1 - n0].substeps[0].start } else { &end };
            lam = model.step_vjp(&k, n, &steps[n - n0], next, lam, &mut k_bar)?;
            add_flux_seed(model, &mut lam, &seed, n);
        }
    }
    let gradient = params.project(&k_bar);
    if gradient.iter().any(|g| !g.is_finite()) {
        return Err(Error::Sensitivity("adjoint gradient is not finite".into()));
    }
    let elapsed = start.elapsed();
    log::debug!("adjoint gradient of {} parameters in {elapsed:?}", params.len());
    Ok(GradientResult { value, gradient, flux, elapsed })
}

/// Perturbation used for parameter value `v` at relative step `rel`.
pub fn fd_step(v: f64, rel: f64) -> f64 {
    (v.abs() * rel).max(1e-14)
}

/// Central differences of an arbitrary function, evaluated in parallel.
pub fn central_difference<F>(f: F, x: &[f64], rel_step: f64) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> Result<f64> + Sync,
{
    let evals: Vec<Result<f64>> = (0..2 * x.len())
        .into_par_iter()
        .map(|j| {
            let (i, sign) = (j / 2, if j % 2 == 0 { 1.0 } else { -1.0 });
            let mut xp = x.to_vec();
            xp[i] += sign * fd_step(x[i], rel_step);
            f(&xp)
        })
        .collect();
    let evals = evals.into_iter().collect::<Result<Vec<_>>>()?;
    Ok((0..x.len())
        .map(|i| (evals[2 * i] - evals[2 * i + 1]) / (2.0 * fd_step(x[i], rel_step)))
        .collect())
}

/// Central-difference gradient with `h = rel_step·k_i` (2n forward solves).
pub fn fd_gradient(model: &ForwardModel, params: &ParameterSet, values: &[f64], objective: &dyn FluxObjective, rel_step: f64) -> Result<Vec<f64>> {
    central_difference(|v| objective_value(model, params, v, objective), values, rel_step)
}

/// `values[gas][time][parameter]` = ∂F_gas(t)/∂k_parameter.
#[derive(Debug, Clone)]
pub struct TimeSensitivity {
    pub times: Vec<f64>,
    pub gas_names: Vec<String>,
    pub labels: Vec<String>,
    pub values: Vec<Vec<Vec<f64>>>,
    pub elapsed: Duration,
}

/// Time-resolved outlet-flux sensitivities by tangent propagation.
pub fn time_resolved_sensitivity(model: &ForwardModel, params: &ParameterSet, values: &[f64]) -> Result<TimeSensitivity> {
    let start = Instant::now();
    let k = params.rate_constants(values);
    let (_, tape) = model.record(&k)?;
    let n_t = model.n_steps();
    let n_gas = model.mechanism().n_gas();
    let ops = model.operators();
    let nn = ops.n_nodes;
    let np = params.len();
    let units: Vec<RateConstants> = (0..np).map(|p| params.unit(p)).collect();

    // per parameter: tangent state and dF[gas][time]
    let mut lanes: Vec<(State, Vec<Vec<f64>>)> = (0..np)
        .map(|_| (model.zero_state(), vec![vec![0.0; n_t + 1]; n_gas]))
        .collect();
    let segments = model.tape_segments(&tape);
    for (si, &(n0, n1)) in segments.iter().enumerate() {
        let (steps, end) = model.segment_tapes(&k, &tape, si, (n0, n1))?;
        lanes
            .par_iter_mut()
            .zip(&units)
            .try_for_each(|((dy, out), dk)| -> Result<()> {
                for n in n0..n1 {
                    for g in 0..n_gas {
                        out[g][n] = ops.outlet_coeff[g] * dy.gas[g * nn + nn - 1];
                    }
                    let next = if n + 1 < n1 { &steps[n + 1 - n0].substeps[0].start } else { &end };
                    let taken = std::mem::replace(dy, State { gas: Vec::new(), surface: Vec::new() });
                    *dy = model.step_jvp(&k, n, &steps[n - n0], next, taken, Some(dk))?;
                }
                Ok(())
            })?;
    }
    let mut values_out = vec![vec![vec![0.0; np]; n_t + 1]; n_gas];
    for (p, (dy, out)) in lanes.iter().enumerate() {
        for g in 0..n_gas {
            for n in 0..n_t {
                values_out[g][n][p] = out[g][n];
            }
            values_out[g][n_t][p] = ops.outlet_coeff[g] * dy.gas[g * nn + nn - 1];
        }
    }
    Ok(TimeSensitivity {
        times: model.times(),
        gas_names: model.mechanism().gas_names().iter().map(|s| s.to_string()).collect(),
        labels: params.labels(),
        values: values_out,
        elapsed: start.elapsed(),
    })
}

#[derive(Debug, Clone)]
pub struct HessianResult {
    pub matrix: Vec<Vec<f64>>,
    /// max |H − Hᵀ| / max |H|
    pub symmetry_defect: f64,
    pub gradient_evaluations: usize,
    pub elapsed: Duration,
}

/// Hessian by central differences of adjoint gradients of an arbitrary
/// gradient function, columns in parallel.
pub fn hessian_of<G>(gradient: G, x: &[f64], rel_step: f64) -> Result<HessianResult>
where
    G: Fn(&[f64]) -> Result<Vec<f64>> + Sync,
{
    let start = Instant::now();
    let n = x.len();
    let cols: Vec<Result<Vec<f64>>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let h = fd_step(x[i], rel_step);
            let mut xp = x.to_vec();
            xp[i] += h;
            let gp = gradient(&xp)?;
            xp[i] = x[i] - h;
            let gm = gradient(&xp)?;
            Ok(gp.iter().zip(&gm).map(|(a, b)| (a - b) / (2.0 * h)).collect())
        })
        .collect();
    let cols = cols.into_iter().collect::<Result<Vec<_>>>()?;
    let matrix: Vec<Vec<f64>> = (0..n).map(|r| (0..n).map(|c| cols[c][r]).collect()).collect();
    let scale = matrix.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs()));
    let mut asym = 0.0f64;
    for r in 0..n {
        for c in 0..n {
            asym = asym.max((matrix[r][c] - matrix[c][r]).abs());
        }
    }
    let symmetry_defect = if scale > 0.0 { asym / scale } else { 0.0 };
    let elapsed = start.elapsed();
    log::info!("hessian of {n} parameters: {} gradient evaluations in {elapsed:?}", 2 * n);
    Ok(HessianResult {
        matrix,
        symmetry_defect,
        gradient_evaluations: 2 * n,
        elapsed,
    })
}

/// Hessian of a flux objective (h = rel_step·k_i, typically 1/5000).
pub fn hessian(model: &ForwardModel, params: &ParameterSet, values: &[f64], objective: &dyn FluxObjective, rel_step: f64) -> Result<HessianResult> {
    hessian_of(
        |v| adjoint_gradient(model, params, v, objective).map(|g| g.gradient),
        values,
        rel_step,
    )
}
