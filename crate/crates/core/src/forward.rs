//! Pulse-response forward model.
//!
//! Gas transport is discretised with linear finite elements on the refined
//! mesh (lumped, void-weighted mass matrix; diffusivity-weighted stiffness).
//! The inlet carries a natural zero-flux condition and the outlet node is held
//! at zero concentration. Surface species exist on catalyst nodes only.
//!
//! Two schemes are available:
//!
//! * `SemiImplicit`: Crank–Nicolson diffusion with explicit Euler reaction
//!   terms. The first few steps after every injection use backward Euler to
//!   damp the high-frequency content of the delta pulse.
//! * `Implicit`: backward Euler on the fully coupled system, solved by Newton
//!   iteration with a block-tridiagonal linear solver.
//!
//! A substep that yields significantly negative concentrations (or a Newton
//! failure) is retried as two half steps, recursively.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::{solve_tridiagonal, BlockTridiagonal};
use crate::mechanism::{Mechanism, RateConstants};
use crate::reactor::{build_mesh, DiffusionTable, Mesh, ReactorSpec, Zone};

/// One gas injection per pulse.
#[derive(Debug, Clone, PartialEq)]
pub struct GasPulse {
    pub gas: String,
    /// nmol; zero for species that are only produced.
    pub intensity: f64,
    /// Injection time within each pulse window (s).
    pub time: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PulseSchedule {
    pub pulses: Vec<GasPulse>,
    pub pulse_count: usize,
    /// Time between consecutive pulses of the same gas (s).
    pub spacing: f64,
}

impl PulseSchedule {
    pub fn single(pulses: Vec<GasPulse>, window: f64) -> Self {
        PulseSchedule {
            pulses,
            pulse_count: 1,
            spacing: window,
        }
    }
}

/// Initial surface concentrations inside the catalyst zone (nmol/cm³).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct InitialSurface(pub Vec<(String, f64)>);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scheme {
    SemiImplicit,
    Implicit,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolverConfig {
    /// Total simulated time (s).
    pub total_time: f64,
    /// Number of macro time steps over `total_time`.
    pub n_steps: usize,
    pub scheme: Scheme,
    /// Relative Newton step tolerance (implicit scheme).
    pub newton_tol: f64,
    pub max_newton_iterations: usize,
    pub max_halvings: u32,
    /// Backward-Euler steps taken after each injection (semi-implicit scheme).
    pub startup_steps: usize,
    /// Relative negativity that triggers a substep halving.
    pub positivity_tol: f64,
    /// Number of catalyst-field snapshots kept in a [`SimulationResult`].
    pub thin_snapshots: usize,
    /// Largest number of state values the adjoint may hold in memory before
    /// switching to checkpointing with recomputation.
    pub checkpoint_budget: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            total_time: 1.0,
            n_steps: 1000,
            scheme: Scheme::SemiImplicit,
            newton_tol: 1e-10,
            max_newton_iterations: 25,
            max_halvings: 12,
            startup_steps: 4,
            positivity_tol: 1e-9,
            thin_snapshots: 100,
            checkpoint_budget: 20_000_000,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.total_time > 0.0) || !self.total_time.is_finite() {
            return Err(Error::Solver(format!(
                "total time must be positive, got {}",
                self.total_time
            )));
        }
        if self.n_steps < 10 {
            return Err(Error::Solver(format!(
                "at least 10 time steps required, got {}",
                self.n_steps
            )));
        }
        if !(self.newton_tol > 0.0) || !(self.positivity_tol > 0.0) {
            return Err(Error::Solver("tolerances must be positive".into()));
        }
        Ok(())
    }
}

/// Discrete transport operators on the unknown nodes `0..n_nodes` (the outlet
/// node carries the Dirichlet condition and is eliminated).
#[derive(Debug, Clone)]
pub struct DiscreteOperators {
    pub n_nodes: usize,
    /// Lumped void-weighted control volumes, cm³.
    pub mass: Vec<f64>,
    /// Per gas: stiffness diagonal (cm³/s).
    pub stiff_diag: Vec<Vec<f64>>,
    /// Per gas: symmetric off-diagonal, length `n_nodes - 1`.
    pub stiff_off: Vec<Vec<f64>>,
    /// Unknown-node indices inside the catalyst zone.
    pub catalyst_nodes: Vec<usize>,
    /// Lumped catalyst volume of each catalyst node (cm³, not void-weighted).
    pub catalyst_volume: Vec<f64>,
    /// Per gas: `A·D/w` of the last cell, so that flux = coeff · C_{N-1}.
    pub outlet_coeff: Vec<f64>,
    /// Node coordinates of the unknown nodes (cm).
    pub x: Vec<f64>,
}

impl DiscreteOperators {
    /// Assemble lumped mass, stiffness and catalyst volumes.
    pub fn assemble(
        mech: &Mechanism,
        reactor: &ReactorSpec,
        mesh: &Mesh,
        diffusion: &DiffusionTable,
    ) -> Result<Self> {
        let n_cells = mesh.n_cells();
        for c in 0..n_cells {
            let w = mesh.width(c);
            if !(w > 0.0) || !w.is_finite() {
                return Err(Error::DegenerateCell { cell: c, width: w });
            }
        }
        let area = reactor.area();
        let n_nodes = n_cells;
        let n_gas = mech.n_gas();
        let mut mass = vec![0.0; n_nodes];
        let mut cat_vol = vec![0.0; n_nodes + 1];
        let mut stiff_diag = vec![vec![0.0; n_nodes]; n_gas];
        let mut stiff_off = vec![vec![0.0; n_nodes.saturating_sub(1)]; n_gas];
        for c in 0..n_cells {
            let w = mesh.width(c);
            let zone = mesh.cell_zones[c];
            let eps = reactor.void(zone);
            let half = 0.5 * area * w;
            mass[c] += eps * half;
            if c + 1 < n_nodes {
                mass[c + 1] += eps * half;
            }
            if zone == Zone::Catalyst {
                cat_vol[c] += half;
                cat_vol[c + 1] += half;
            }
            for g in 0..n_gas {
                let kc = area * diffusion.get(g, zone) / w;
                stiff_diag[g][c] += kc;
                if c + 1 < n_nodes {
                    stiff_diag[g][c + 1] += kc;
                    stiff_off[g][c] = -kc;
                }
            }
        }
        let last = n_cells - 1;
        let outlet_coeff = (0..n_gas)
            .map(|g| area * diffusion.get(g, mesh.cell_zones[last]) / mesh.width(last))
            .collect();
        let catalyst_nodes: Vec<usize> = (0..n_nodes).filter(|&i| cat_vol[i] > 0.0).collect();
        let catalyst_volume = catalyst_nodes.iter().map(|&i| cat_vol[i]).collect();
        Ok(DiscreteOperators {
            n_nodes,
            mass,
            stiff_diag,
            stiff_off,
            catalyst_nodes,
            catalyst_volume,
            outlet_coeff,
            x: mesh.nodes[..n_nodes].to_vec(),
        })
    }

    fn apply_stiffness(&self, g: usize, c: &[f64], out: &mut [f64]) {
        let d = &self.stiff_diag[g];
        let o = &self.stiff_off[g];
        let n = self.n_nodes;
        for i in 0..n {
            let mut v = d[i] * c[i];
            if i > 0 {
                v += o[i - 1] * c[i - 1];
            }
            if i + 1 < n {
                v += o[i] * c[i + 1];
            }
            out[i] = v;
        }
    }
}

/// Gas concentrations on unknown nodes and surface concentrations on
/// catalyst nodes, both nmol/cm³.
#[derive(Debug, Clone, PartialEq)]
pub struct State {
    /// Gas-major: `gas[g * n_nodes + i]`.
    pub gas: Vec<f64>,
    /// Species-major: `surface[s * n_catalyst + c]`.
    pub surface: Vec<f64>,
}

impl State {
    pub fn zeros(n_gas: usize, n_nodes: usize, n_surf: usize, n_cat: usize) -> Self {
        State {
            gas: vec![0.0; n_gas * n_nodes],
            surface: vec![0.0; n_surf * n_cat],
        }
    }

    pub fn len(&self) -> usize {
        self.gas.len() + self.surface.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_finite(&self) -> bool {
        self.gas.iter().chain(&self.surface).all(|v| v.is_finite())
    }

    pub(crate) fn axpy(&mut self, a: f64, other: &State) {
        for (x, y) in self.gas.iter_mut().zip(&other.gas) {
            *x += a * y;
        }
        for (x, y) in self.surface.iter_mut().zip(&other.surface) {
            *x += a * y;
        }
    }
}

/// Deposit `amount` nmol of gas `gas` into the inlet control volume.
pub fn inject_pulse(state: &mut State, ops: &DiscreteOperators, gas: usize, amount: f64) {
    if amount != 0.0 {
        state.gas[gas * ops.n_nodes] += amount / ops.mass[0];
    }
}

/// Outlet molar flow of every gas (nmol/s) from the last interior node.
pub fn outlet_flux(state: &State, ops: &DiscreteOperators) -> Vec<f64> {
    let n = ops.n_nodes;
    ops.outlet_coeff
        .iter()
        .enumerate()
        .map(|(g, coeff)| coeff * state.gas[g * n + n - 1])
        .collect()
}

/// A substep as recorded for the reverse sweep.
#[derive(Debug, Clone)]
pub(crate) struct Substep {
    pub dt: f64,
    /// 0.5 for Crank–Nicolson, 1.0 for backward Euler diffusion.
    pub theta: f64,
    pub start: State,
}

/// All substeps of one macro step.
#[derive(Debug, Clone, Default)]
pub(crate) struct StepTape {
    pub substeps: Vec<Substep>,
}

/// Outlet flux history plus catalyst snapshots and bookkeeping.
#[derive(Debug, Clone)]
pub struct SimulationResult {
    pub times: Vec<f64>,
    pub gas_names: Vec<String>,
    /// `outlet_flux[gas][time]`, nmol/s.
    pub outlet_flux: Vec<Vec<f64>>,
    /// Time-index range of each pulse window.
    pub pulse_ranges: Vec<std::ops::Range<usize>>,
    pub catalyst: CatalystFields,
    pub mass_balance: MassBalance,
    pub halvings: u64,
    /// Injected amount per gas per pulse (nmol), for normalisation.
    pub injected: Vec<f64>,
}

impl SimulationResult {
    pub fn gas_index(&self, name: &str) -> Option<usize> {
        self.gas_names.iter().position(|g| g == name)
    }

    /// Flux samples of one pulse with times relative to the pulse window start.
    pub fn pulse_curve(&self, gas: usize, pulse: usize) -> (Vec<f64>, Vec<f64>) {
        let range = self.pulse_ranges[pulse].clone();
        let t0 = self.times[range.start];
        let t = self.times[range.clone()].iter().map(|t| t - t0).collect();
        let f = self.outlet_flux[gas][range].to_vec();
        (t, f)
    }
}

/// Catalyst-zone concentrations at selected times ("thin" data).
#[derive(Debug, Clone, Default)]
pub struct CatalystFields {
    pub x: Vec<f64>,
    pub times: Vec<f64>,
    pub species: Vec<String>,
    /// `values[species][snapshot][node]`
    pub values: Vec<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GasBalance {
    pub name: String,
    pub injected: f64,
    pub in_domain: f64,
    pub outflow: f64,
}

/// Balance of one conserved combination of species (a left null vector of
/// the stoichiometry matrix).
#[derive(Debug, Clone, PartialEq)]
pub struct MoietyBalance {
    pub weights: Vec<f64>,
    pub initial: f64,
    pub injected: f64,
    pub held: f64,
    pub outflow: f64,
    pub relative_defect: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MassBalance {
    pub gases: Vec<GasBalance>,
    pub moieties: Vec<MoietyBalance>,
}

impl MassBalance {
    pub fn max_relative_defect(&self) -> f64 {
        self.moieties
            .iter()
            .map(|m| m.relative_defect)
            .fold(0.0, f64::max)
    }
}

/// Everything needed to integrate one experiment.
#[derive(Debug, Clone)]
pub struct ForwardModel {
    mech: Mechanism,
    reactor: ReactorSpec,
    mesh: Mesh,
    schedule: PulseSchedule,
    config: SolverConfig,
    ops: DiscreteOperators,
    surface0: Vec<f64>,
    injections: BTreeMap<usize, Vec<(usize, f64)>>,
    startup: Vec<bool>,
    dt: f64,
}

/// Result of a successful substep attempt.
struct Advanced {
    state: State,
    efflux: Vec<f64>,
}

impl ForwardModel {
    pub fn new(
        mech: Mechanism,
        reactor: ReactorSpec,
        mesh: Mesh,
        schedule: PulseSchedule,
        surface0: &InitialSurface,
        config: SolverConfig,
    ) -> Result<Self> {
        for w in reactor.validate()? {
            log::warn!("{w}");
        }
        config.validate()?;
        let diffusion = reactor.diffusion_table(&mech);
        let ops = DiscreteOperators::assemble(&mech, &reactor, &mesh, &diffusion)?;

        let mut surf = vec![0.0; mech.n_surface()];
        for (name, value) in &surface0.0 {
            let idx = mech.species_index(name).filter(|&i| i >= mech.n_gas()).ok_or_else(|| {
                Error::Solver(format!("initial composition names unknown surface species '{name}'"))
            })?;
            if !(*value >= 0.0) || !value.is_finite() {
                return Err(Error::Solver(format!(
                    "initial composition of '{name}' must be non-negative, got {value}"
                )));
            }
            surf[idx - mech.n_gas()] = *value;
        }

        let dt = config.total_time / config.n_steps as f64;
        if schedule.pulse_count == 0 {
            return Err(Error::Solver("pulse count must be at least 1".into()));
        }
        let mut injections: BTreeMap<usize, Vec<(usize, f64)>> = BTreeMap::new();
        for p in &schedule.pulses {
            let g = mech
                .species_index(&p.gas)
                .filter(|&i| i < mech.n_gas())
                .ok_or_else(|| Error::Solver(format!("pulse names unknown gas '{}'", p.gas)))?;
            if !(p.intensity >= 0.0) || !(p.time >= 0.0) {
                return Err(Error::Solver(format!(
                    "pulse of '{}' needs non-negative intensity and time",
                    p.gas
                )));
            }
            if p.intensity == 0.0 {
                continue;
            }
            for k in 0..schedule.pulse_count {
                let t = p.time + k as f64 * schedule.spacing;
                if t >= config.total_time {
                    return Err(Error::Solver(format!(
                        "pulse {} of '{}' at {t} s lies beyond the simulated time {} s",
                        k + 1,
                        p.gas,
                        config.total_time
                    )));
                }
                let n = (t / dt).round() as usize;
                injections.entry(n).or_default().push((g, p.intensity));
            }
        }
        let mut startup = vec![false; config.n_steps];
        if config.scheme == Scheme::SemiImplicit {
            for &n in injections.keys() {
                for s in startup.iter_mut().skip(n).take(config.startup_steps) {
                    *s = true;
                }
            }
        }

        Ok(ForwardModel {
            mech,
            reactor,
            mesh,
            schedule,
            config,
            ops,
            surface0: surf,
            injections,
            startup,
            dt,
        })
    }

    /// Convenience constructor building the mesh from its configuration.
    pub fn with_mesh_config(
        mech: Mechanism,
        reactor: ReactorSpec,
        base_size: usize,
        catalyst_density: u32,
        schedule: PulseSchedule,
        surface0: &InitialSurface,
        config: SolverConfig,
    ) -> Result<Self> {
        let mesh = build_mesh(&reactor, base_size, catalyst_density)?;
        ForwardModel::new(mech, reactor, mesh, schedule, surface0, config)
    }

    pub fn mechanism(&self) -> &Mechanism {
        &self.mech
    }

    pub fn reactor(&self) -> &ReactorSpec {
        &self.reactor
    }

    pub fn mesh(&self) -> &Mesh {
        &self.mesh
    }

    pub fn operators(&self) -> &DiscreteOperators {
        &self.ops
    }

    pub fn config(&self) -> &SolverConfig {
        &self.config
    }

    pub fn schedule(&self) -> &PulseSchedule {
        &self.schedule
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn n_steps(&self) -> usize {
        self.config.n_steps
    }

    pub fn times(&self) -> Vec<f64> {
        (0..=self.config.n_steps).map(|n| n as f64 * self.dt).collect()
    }

    pub fn n_dof(&self) -> usize {
        self.mech.n_gas() * self.ops.n_nodes + self.mech.n_surface() * self.ops.catalyst_nodes.len()
    }

    /// Rate constants of the mechanism as written, at the reactor temperature.
    pub fn base_rate_constants(&self) -> Result<RateConstants> {
        self.mech.rate_constants(self.reactor.temperature)
    }

    /// State at t = 0 including injections scheduled at the first step.
    pub fn initial_state(&self) -> State {
        let n_cat = self.ops.catalyst_nodes.len();
        let mut s = State::zeros(self.mech.n_gas(), self.ops.n_nodes, self.mech.n_surface(), n_cat);
        for (sp, &u) in self.surface0.iter().enumerate() {
            s.surface[sp * n_cat..(sp + 1) * n_cat].fill(u);
        }
        self.inject(0, &mut s);
        s
    }

    pub(crate) fn inject(&self, n: usize, state: &mut State) {
        if let Some(list) = self.injections.get(&n) {
            for &(g, amount) in list {
                inject_pulse(state, &self.ops, g, amount);
            }
        }
    }

    /// Undo the injections of step `n` (used to recover the end state of the
    /// previous step during the reverse sweep).
    pub(crate) fn uninject(&self, n: usize, state: &mut State) {
        if let Some(list) = self.injections.get(&n) {
            for &(g, amount) in list {
                inject_pulse(state, &self.ops, g, -amount);
            }
        }
    }

    pub(crate) fn theta_for(&self, n: usize) -> f64 {
        match self.config.scheme {
            Scheme::Implicit => 1.0,
            Scheme::SemiImplicit if self.startup[n] => 1.0,
            Scheme::SemiImplicit => 0.5,
        }
    }

    pub(crate) fn flux_at(&self, state: &State, out: &mut [f64]) {
        let n = self.ops.n_nodes;
        for (g, o) in out.iter_mut().enumerate() {
            *o = self.ops.outlet_coeff[g] * state.gas[g * n + n - 1];
        }
    }

    fn local_conc(&self, state: &State, c: usize, out: &mut [f64]) {
        let n = self.ops.n_nodes;
        let n_cat = self.ops.catalyst_nodes.len();
        let node = self.ops.catalyst_nodes[c];
        let n_gas = self.mech.n_gas();
        for g in 0..n_gas {
            out[g] = state.gas[g * n + node];
        }
        for s in 0..self.mech.n_surface() {
            out[n_gas + s] = state.surface[s * n_cat + c];
        }
    }

    fn positivity_ok(&self, before: &State, after: &State) -> bool {
        let tol = self.config.positivity_tol;
        let check = |a: &[f64], b: &[f64]| -> bool {
            let scale = a
                .iter()
                .chain(b)
                .fold(0.0f64, |m, v| m.max(v.abs()))
                .max(f64::MIN_POSITIVE);
            b.iter().all(|&v| v >= -tol * scale)
        };
        let n = self.ops.n_nodes;
        let n_cat = self.ops.catalyst_nodes.len();
        (0..self.mech.n_gas()).all(|g| {
            check(&before.gas[g * n..(g + 1) * n], &after.gas[g * n..(g + 1) * n])
        }) && (0..self.mech.n_surface()).all(|s| {
            check(
                &before.surface[s * n_cat..(s + 1) * n_cat],
                &after.surface[s * n_cat..(s + 1) * n_cat],
            )
        })
    }

    // -----------------------------------------------------------------------
    // Semi-implicit substep
    // -----------------------------------------------------------------------

    fn explicit_substep(&self, k: &RateConstants, y: &State, dt: f64, theta: f64) -> Result<Option<Advanced>> {
        let n = self.ops.n_nodes;
        let n_gas = self.mech.n_gas();
        let n_sp = self.mech.n_species();
        let n_cat = self.ops.catalyst_nodes.len();
        let mut out = y.clone();

        // reaction sources, explicit in the current state
        let mut gas_src = vec![0.0; n_gas * n];
        let mut conc = vec![0.0; n_sp];
        let mut rates = vec![0.0; self.mech.n_steps()];
        let mut prod = vec![0.0; n_sp];
        for (c, &node) in self.ops.catalyst_nodes.iter().enumerate() {
            self.local_conc(y, c, &mut conc);
            self.mech.local_rates(&conc, k, &mut rates, &mut prod);
            let vol = self.ops.catalyst_volume[c];
            for g in 0..n_gas {
                gas_src[g * n + node] = vol * prod[g];
            }
            for s in 0..self.mech.n_surface() {
                out.surface[s * n_cat + c] += dt * prod[n_gas + s];
            }
        }

        let mut kc = vec![0.0; n];
        let mut diag = vec![0.0; n];
        let mut off = vec![0.0; n.saturating_sub(1)];
        let mut scratch = vec![0.0; n];
        let mut efflux = vec![0.0; n_gas];
        for g in 0..n_gas {
            let cg = &y.gas[g * n..(g + 1) * n];
            self.ops.apply_stiffness(g, cg, &mut kc);
            let rhs = &mut out.gas[g * n..(g + 1) * n];
            for i in 0..n {
                let m = self.ops.mass[i] / dt;
                rhs[i] = m * cg[i] - (1.0 - theta) * kc[i] + gas_src[g * n + i];
                diag[i] = m + theta * self.ops.stiff_diag[g][i];
            }
            for (o, s) in off.iter_mut().zip(&self.ops.stiff_off[g]) {
                *o = theta * s;
            }
            solve_tridiagonal(&off, &diag, &off, rhs, &mut scratch)
                .map_err(|row| Error::Solver(format!("singular transport matrix at node {row}")))?;
            efflux[g] = dt
                * self.ops.outlet_coeff[g]
                * (theta * rhs[n - 1] + (1.0 - theta) * cg[n - 1]);
        }

        if !out.is_finite() || !self.positivity_ok(y, &out) {
            return Ok(None);
        }
        Ok(Some(Advanced { state: out, efflux }))
    }

    // -----------------------------------------------------------------------
    // Implicit substep
    // -----------------------------------------------------------------------

    fn block_size(&self, node_cat: Option<usize>) -> usize {
        self.mech.n_gas() + if node_cat.is_some() { self.mech.n_surface() } else { 0 }
    }

    fn catalyst_lookup(&self) -> Vec<Option<usize>> {
        let mut map = vec![None; self.ops.n_nodes];
        for (c, &node) in self.ops.catalyst_nodes.iter().enumerate() {
            map[node] = Some(c);
        }
        map
    }

    /// Jacobian of the backward-Euler residual at `y1`.
    pub(crate) fn implicit_jacobian(&self, k: &RateConstants, y1: &State, dt: f64) -> BlockTridiagonal {
        let n = self.ops.n_nodes;
        let n_gas = self.mech.n_gas();
        let n_sp = self.mech.n_species();
        let cat = self.catalyst_lookup();
        let mut conc = vec![0.0; n_sp];
        let mut jac = vec![vec![0.0; n_sp]; n_sp];
        let mut diag = Vec::with_capacity(n);
        for i in 0..n {
            let b = self.block_size(cat[i]);
            let mut d = DMatrix::zeros(b, b);
            for g in 0..n_gas {
                d[(g, g)] = self.ops.mass[i] / dt + self.ops.stiff_diag[g][i];
            }
            if let Some(c) = cat[i] {
                self.local_conc(y1, c, &mut conc);
                self.mech.local_jacobian(&conc, k, &mut jac);
                let vol = self.ops.catalyst_volume[c];
                for r in 0..n_sp {
                    let w = if r < n_gas { vol } else { 1.0 };
                    for col in 0..n_sp {
                        d[(r, col)] -= w * jac[r][col];
                    }
                    if r >= n_gas {
                        d[(r, r)] += 1.0 / dt;
                    }
                }
            }
            diag.push(d);
        }
        let mut lower = Vec::with_capacity(n.saturating_sub(1));
        let mut upper = Vec::with_capacity(n.saturating_sub(1));
        for i in 0..n.saturating_sub(1) {
            let (bi, bj) = (self.block_size(cat[i]), self.block_size(cat[i + 1]));
            let mut u = DMatrix::zeros(bi, bj);
            let mut l = DMatrix::zeros(bj, bi);
            for g in 0..n_gas {
                u[(g, g)] = self.ops.stiff_off[g][i];
                l[(g, g)] = self.ops.stiff_off[g][i];
            }
            upper.push(u);
            lower.push(l);
        }
        BlockTridiagonal { diag, lower, upper }
    }

    pub(crate) fn to_blocks(&self, s: &State) -> Vec<DVector<f64>> {
        let n = self.ops.n_nodes;
        let n_gas = self.mech.n_gas();
        let n_cat = self.ops.catalyst_nodes.len();
        let cat = self.catalyst_lookup();
        (0..n)
            .map(|i| {
                let b = self.block_size(cat[i]);
                let mut v = DVector::zeros(b);
                for g in 0..n_gas {
                    v[g] = s.gas[g * n + i];
                }
                if let Some(c) = cat[i] {
                    for sp in 0..self.mech.n_surface() {
                        v[n_gas + sp] = s.surface[sp * n_cat + c];
                    }
                }
                v
            })
            .collect()
    }

    pub(crate) fn state_from_blocks(&self, blocks: &[DVector<f64>]) -> State {
        let n = self.ops.n_nodes;
        let n_gas = self.mech.n_gas();
        let n_cat = self.ops.catalyst_nodes.len();
        let mut s = State::zeros(n_gas, n, self.mech.n_surface(), n_cat);
        let cat = self.catalyst_lookup();
        for (i, v) in blocks.iter().enumerate() {
            for g in 0..n_gas {
                s.gas[g * n + i] = v[g];
            }
            if let Some(c) = cat[i] {
                for sp in 0..self.mech.n_surface() {
                    s.surface[sp * n_cat + c] = v[n_gas + sp];
                }
            }
        }
        s
    }

    fn implicit_residual(&self, k: &RateConstants, y0: &State, y1: &State, dt: f64) -> State {
        let n = self.ops.n_nodes;
        let n_gas = self.mech.n_gas();
        let n_sp = self.mech.n_species();
        let n_cat = self.ops.catalyst_nodes.len();
        let mut r = State::zeros(n_gas, n, self.mech.n_surface(), n_cat);
        let mut kc = vec![0.0; n];
        for g in 0..n_gas {
            let c1 = &y1.gas[g * n..(g + 1) * n];
            let c0 = &y0.gas[g * n..(g + 1) * n];
            self.ops.apply_stiffness(g, c1, &mut kc);
            for i in 0..n {
                r.gas[g * n + i] = self.ops.mass[i] * (c1[i] - c0[i]) / dt + kc[i];
            }
        }
        let mut conc = vec![0.0; n_sp];
        let mut rates = vec![0.0; self.mech.n_steps()];
        let mut prod = vec![0.0; n_sp];
        for (c, &node) in self.ops.catalyst_nodes.iter().enumerate() {
            self.local_conc(y1, c, &mut conc);
            self.mech.local_rates(&conc, k, &mut rates, &mut prod);
            let vol = self.ops.catalyst_volume[c];
            for g in 0..n_gas {
                r.gas[g * n + node] -= vol * prod[g];
            }
            for s in 0..self.mech.n_surface() {
                let idx = s * n_cat + c;
                r.surface[idx] = (y1.surface[idx] - y0.surface[idx]) / dt - prod[n_gas + s];
            }
        }
        r
    }

    fn implicit_substep(&self, k: &RateConstants, y: &State, dt: f64) -> Result<Option<Advanced>> {
        let mut y1 = y.clone();
        let scale = |s: &State| s.gas.iter().chain(&s.surface).fold(0.0f64, |m, v| m.max(v.abs()));
        let mut converged = false;
        for _ in 0..self.config.max_newton_iterations {
            let res = self.implicit_residual(k, y, &y1, dt);
            let jac = self.implicit_jacobian(k, &y1, dt);
            let delta = match jac.solve(&self.to_blocks(&res)) {
                Ok(d) => self.state_from_blocks(&d),
                Err(_) => return Ok(None),
            };
            y1.axpy(-1.0, &delta);
            if !y1.is_finite() {
                return Ok(None);
            }
            let step = scale(&delta);
            if step <= self.config.newton_tol * scale(&y1).max(f64::MIN_POSITIVE) {
                converged = true;
                break;
            }
        }
        if !converged || !self.positivity_ok(y, &y1) {
            return Ok(None);
        }
        let n = self.ops.n_nodes;
        let efflux = (0..self.mech.n_gas())
            .map(|g| dt * self.ops.outlet_coeff[g] * y1.gas[g * n + n - 1])
            .collect();
        Ok(Some(Advanced { state: y1, efflux }))
    }

    fn try_substep(&self, k: &RateConstants, y: &State, dt: f64, theta: f64) -> Result<Option<Advanced>> {
        match self.config.scheme {
            Scheme::SemiImplicit => self.explicit_substep(k, y, dt, theta),
            Scheme::Implicit => self.implicit_substep(k, y, dt),
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn advance(
        &self,
        k: &RateConstants,
        y: &State,
        t: f64,
        dt: f64,
        theta: f64,
        depth: u32,
        tape: &mut Option<&mut StepTape>,
        efflux: &mut [f64],
        halvings: &mut u64,
    ) -> Result<State> {
        if let Some(adv) = self.try_substep(k, y, dt, theta)? {
            if let Some(tape) = tape.as_deref_mut() {
                tape.substeps.push(Substep {
                    dt,
                    theta,
                    start: y.clone(),
                });
            }
            for (e, a) in efflux.iter_mut().zip(&adv.efflux) {
                *e += a;
            }
            return Ok(adv.state);
        }
        if depth >= self.config.max_halvings {
            return Err(Error::SubstepLimit {
                time: t,
                halvings: depth,
                detail: match self.config.scheme {
                    Scheme::SemiImplicit => "negative concentrations persist; try the implicit scheme or more time steps".into(),
                    Scheme::Implicit => "Newton iteration keeps failing".into(),
                },
            });
        }
        *halvings += 1;
        let half = 0.5 * dt;
        let mid = self.advance(k, y, t, half, theta, depth + 1, tape, efflux, halvings)?;
        self.advance(k, &mid, t + half, half, theta, depth + 1, tape, efflux, halvings)
    }

    /// Advance `state` by one macro step of length `dt` with the configured
    /// scheme (Crank–Nicolson diffusion for the semi-implicit scheme).
    pub fn step(&self, state: &State, dt: f64, k: &RateConstants) -> Result<State> {
        if !(dt > 0.0) || !state.is_finite() {
            return Err(Error::Solver("step needs dt > 0 and a finite state".into()));
        }
        let theta = match self.config.scheme {
            Scheme::SemiImplicit => 0.5,
            Scheme::Implicit => 1.0,
        };
        let mut efflux = vec![0.0; self.mech.n_gas()];
        let mut halvings = 0;
        self.advance(k, state, 0.0, dt, theta, 0, &mut None, &mut efflux, &mut halvings)
    }

    /// Integrate macro steps `n0..n1` from `state` (the post-injection state at
    /// `n0`). `on_state` sees every macro state in `n0..n1`; the returned state
    /// is the post-injection state at `n1`.
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn run_segment(
        &self,
        k: &RateConstants,
        n0: usize,
        mut state: State,
        n1: usize,
        mut tapes: Option<&mut Vec<StepTape>>,
        efflux: &mut [f64],
        halvings: &mut u64,
        on_state: &mut dyn FnMut(usize, &State),
    ) -> Result<State> {
        for n in n0..n1 {
            on_state(n, &state);
            let theta = self.theta_for(n);
            let t = n as f64 * self.dt;
            let mut tape = StepTape::default();
            let mut slot = tapes.as_ref().map(|_| &mut tape);
            state = self.advance(k, &state, t, self.dt, theta, 0, &mut slot, efflux, halvings)?;
            if let Some(list) = tapes.as_deref_mut() {
                list.push(tape);
            }
            self.inject(n + 1, &mut state);
        }
        Ok(state)
    }

    /// Outlet flux history `[gas][time]` without any other bookkeeping.
    pub fn flux_history(&self, k: &RateConstants) -> Result<Vec<Vec<f64>>> {
        let n_gas = self.mech.n_gas();
        let n_t = self.config.n_steps;
        let mut flux = vec![vec![0.0; n_t + 1]; n_gas];
        let mut efflux = vec![0.0; n_gas];
        let mut halvings = 0;
        let mut buf = vec![0.0; n_gas];
        let mut record = |n: usize, s: &State| {
            self.flux_at(s, &mut buf);
            for g in 0..n_gas {
                flux[g][n] = buf[g];
            }
        };
        let last = self.run_segment(k, 0, self.initial_state(), n_t, None, &mut efflux, &mut halvings, &mut record)?;
        record(n_t, &last);
        Ok(flux)
    }

    /// Full simulation with catalyst snapshots and a mass-balance report.
    pub fn simulate(&self, k: &RateConstants) -> Result<SimulationResult> {
        let n_gas = self.mech.n_gas();
        let n_t = self.config.n_steps;
        let n = self.ops.n_nodes;
        let n_cat = self.ops.catalyst_nodes.len();
        let n_sp = self.mech.n_species();
        let stride = (n_t / self.config.thin_snapshots.max(1)).max(1);

        let mut flux = vec![vec![0.0; n_t + 1]; n_gas];
        let mut catalyst = CatalystFields {
            x: self.ops.catalyst_nodes.iter().map(|&i| self.ops.x[i]).collect(),
            times: Vec::new(),
            species: self.mech.species().iter().map(|s| s.name.clone()).collect(),
            values: vec![Vec::new(); n_sp],
        };
        let mut efflux = vec![0.0; n_gas];
        let mut halvings = 0;
        let mut buf = vec![0.0; n_gas];
        let dt = self.dt;
        let mut record = |idx: usize, s: &State| {
            self.flux_at(s, &mut buf);
            for g in 0..n_gas {
                flux[g][idx] = buf[g];
            }
            if idx.is_multiple_of(stride) || idx == n_t {
                catalyst.times.push(idx as f64 * dt);
                for g in 0..n_gas {
                    let row = self.ops.catalyst_nodes.iter().map(|&i| s.gas[g * n + i]).collect();
                    catalyst.values[g].push(row);
                }
                for sp in 0..self.mech.n_surface() {
                    catalyst.values[n_gas + sp].push(s.surface[sp * n_cat..(sp + 1) * n_cat].to_vec());
                }
            }
        };
        let initial = self.initial_state();
        let last = self.run_segment(k, 0, initial, n_t, None, &mut efflux, &mut halvings, &mut record)?;
        record(n_t, &last);

        let injected_total: Vec<f64> = (0..n_gas)
            .map(|g| {
                self.injections
                    .values()
                    .flatten()
                    .filter(|(gg, _)| *gg == g)
                    .map(|(_, a)| a)
                    .sum()
            })
            .collect();
        let mass_balance = self.mass_balance(&last, &efflux, &injected_total);

        let window = (self.schedule.spacing / dt).round().max(1.0) as usize;
        let pulse_ranges = (0..self.schedule.pulse_count)
            .map(|p| {
                let start = (p * window).min(n_t);
                let end = if p + 1 == self.schedule.pulse_count {
                    n_t + 1
                } else {
                    ((p + 1) * window).min(n_t + 1)
                };
                start..end
            })
            .collect();
        let per_pulse = (0..n_gas)
            .map(|g| {
                self.schedule
                    .pulses
                    .iter()
                    .filter(|p| self.mech.species_index(&p.gas) == Some(g))
                    .map(|p| p.intensity)
                    .sum()
            })
            .collect();

        Ok(SimulationResult {
            times: self.times(),
            gas_names: self.mech.gas_names().iter().map(|s| s.to_string()).collect(),
            outlet_flux: flux,
            pulse_ranges,
            catalyst,
            mass_balance,
            halvings,
            injected: per_pulse,
        })
    }

    fn mass_balance(&self, last: &State, efflux: &[f64], injected: &[f64]) -> MassBalance {
        let n = self.ops.n_nodes;
        let n_gas = self.mech.n_gas();
        let n_cat = self.ops.catalyst_nodes.len();
        let gas_amount: Vec<f64> = (0..n_gas)
            .map(|g| (0..n).map(|i| self.ops.mass[i] * last.gas[g * n + i]).sum())
            .collect();
        let surf_amount = |s: &State, sp: usize| -> f64 {
            (0..n_cat)
                .map(|c| self.ops.catalyst_volume[c] * s.surface[sp * n_cat + c])
                .sum()
        };
        let initial_surface: Vec<f64> = self
            .surface0
            .iter()
            .map(|u| u * self.ops.catalyst_volume.iter().sum::<f64>())
            .collect();
        let final_surface: Vec<f64> = (0..self.mech.n_surface()).map(|sp| surf_amount(last, sp)).collect();

        let gases = (0..n_gas)
            .map(|g| GasBalance {
                name: self.mech.species()[g].name.clone(),
                injected: injected[g],
                in_domain: gas_amount[g],
                outflow: efflux[g],
            })
            .collect();

        let moieties = conserved_moieties(&self.mech)
            .into_iter()
            .map(|w| {
                let initial: f64 = (0..self.mech.n_surface()).map(|s| w[n_gas + s] * initial_surface[s]).sum();
                let inj: f64 = (0..n_gas).map(|g| w[g] * injected[g]).sum();
                let held: f64 = (0..n_gas).map(|g| w[g] * gas_amount[g]).sum::<f64>()
                    + (0..self.mech.n_surface()).map(|s| w[n_gas + s] * final_surface[s]).sum::<f64>();
                let out: f64 = (0..n_gas).map(|g| w[g] * efflux[g]).sum();
                let reference = (initial.abs() + inj.abs()).max(f64::MIN_POSITIVE);
                let defect = ((initial + inj) - (held + out)).abs() / reference;
                MoietyBalance {
                    weights: w,
                    initial,
                    injected: inj,
                    held,
                    outflow: out,
                    relative_defect: if initial == 0.0 && inj == 0.0 { 0.0 } else { defect },
                }
            })
            .collect();
        MassBalance { gases, moieties }
    }
}

/// Basis of the left null space of the stoichiometry matrix: species weight
/// vectors whose weighted total is invariant under every step.
pub fn conserved_moieties(mech: &Mechanism) -> Vec<Vec<f64>> {
    let s = mech.stoichiometry();
    let n_sp = mech.n_species();
    let n_steps = mech.n_steps();
    // rows = steps, columns = species  (S^T)
    let mut a: Vec<Vec<f64>> = (0..n_steps)
        .map(|m| (0..n_sp).map(|i| s[i][m] as f64).collect())
        .collect();
    let mut pivots = Vec::new();
    let mut row = 0;
    for col in 0..n_sp {
        if row >= n_steps {
            break;
        }
        let best = (row..n_steps).max_by(|&x, &y| a[x][col].abs().total_cmp(&a[y][col].abs()));
        let Some(p) = best else { break };
        if a[p][col].abs() < 1e-12 {
            continue;
        }
        a.swap(row, p);
        let pv = a[row][col];
        for v in a[row].iter_mut() {
            *v /= pv;
        }
        for r in 0..n_steps {
            if r != row && a[r][col] != 0.0 {
                let f = a[r][col];
                for c in 0..n_sp {
                    a[r][c] -= f * a[row][c];
                }
            }
        }
        pivots.push(col);
        row += 1;
    }
    (0..n_sp)
        .filter(|c| !pivots.contains(c))
        .map(|free| {
            let mut v = vec![0.0; n_sp];
            v[free] = 1.0;
            for (r, &pc) in pivots.iter().enumerate() {
                v[pc] = -a[r][free];
            }
            v
        })
        .collect()
}

/// Forward states kept for a reverse or tangent sweep.
#[derive(Debug, Clone)]
pub(crate) enum Tape {
    /// Every substep of every macro step, plus the final state.
    Full { steps: Vec<StepTape>, last: State },
    /// Post-injection states every `stride` macro steps; segments in between
    /// are recomputed on demand.
    Checkpointed { stride: usize, states: Vec<State>, last: State },
}

impl ForwardModel {
    /// Forward pass that records the outlet-flux history and a tape.
    pub(crate) fn record(&self, k: &RateConstants) -> Result<(Vec<Vec<f64>>, Tape)> {
        let n_gas = self.mech.n_gas();
        let n_t = self.config.n_steps;
        let mut flux = vec![vec![0.0; n_t + 1]; n_gas];
        let mut efflux = vec![0.0; n_gas];
        let mut halvings = 0;
        let mut buf = vec![0.0; n_gas];
        let mut on_state = |n: usize, s: &State| {
            self.flux_at(s, &mut buf);
            for g in 0..n_gas {
                flux[g][n] = buf[g];
            }
        };
        let full = n_t.saturating_mul(self.n_dof()) <= self.config.checkpoint_budget;
        let tape = if full {
            let mut steps = Vec::with_capacity(n_t);
            let last = self.run_segment(k, 0, self.initial_state(), n_t, Some(&mut steps), &mut efflux, &mut halvings, &mut on_state)?;
            on_state(n_t, &last);
            Tape::Full { steps, last }
        } else {
            let by_memory = (self.config.checkpoint_budget / self.n_dof().max(1)).max(1);
            let stride = ((n_t as f64).sqrt().ceil() as usize).clamp(1, by_memory);
            log::info!("adjoint tape exceeds memory budget; checkpointing every {stride} steps");
            let mut states = Vec::new();
            let mut state = self.initial_state();
            let mut n0 = 0;
            while n0 < n_t {
                let n1 = (n0 + stride).min(n_t);
                states.push(state.clone());
                state = self.run_segment(k, n0, state, n1, None, &mut efflux, &mut halvings, &mut on_state)?;
                n0 = n1;
            }
            on_state(n_t, &state);
            Tape::Checkpointed { stride, states, last: state }
        };
        Ok((flux, tape))
    }

    /// Macro-step ranges of the tape, in forward order.
    pub(crate) fn tape_segments(&self, tape: &Tape) -> Vec<(usize, usize)> {
        let n_t = self.config.n_steps;
        match tape {
            Tape::Full { .. } => vec![(0, n_t)],
            Tape::Checkpointed { stride, .. } => (0..n_t)
                .step_by(*stride)
                .map(|n0| (n0, (n0 + stride).min(n_t)))
                .collect(),
        }
    }

    /// Substep tapes of segment `seg` and the post-injection state at its end.
    pub(crate) fn segment_tapes<'a>(
        &self,
        k: &RateConstants,
        tape: &'a Tape,
        seg: usize,
        (n0, n1): (usize, usize),
    ) -> Result<(std::borrow::Cow<'a, [StepTape]>, State)> {
        match tape {
            Tape::Full { steps, last } => Ok((std::borrow::Cow::Borrowed(&steps[n0..n1]), last.clone())),
            Tape::Checkpointed { states, last, .. } => {
                let mut steps = Vec::with_capacity(n1 - n0);
                let mut efflux = vec![0.0; self.mech.n_gas()];
                let mut halvings = 0;
                let end = self.run_segment(k, n0, states[seg].clone(), n1, Some(&mut steps), &mut efflux, &mut halvings, &mut |_, _| {})?;
                let end = if n1 == self.config.n_steps { last.clone() } else { end };
                Ok((std::borrow::Cow::Owned(steps), end))
            }
        }
    }

    /// Reverse product through one semi-implicit substep.
    pub(crate) fn explicit_vjp(&self, k: &RateConstants, sub: &Substep, lam: &State, k_bar: &mut RateConstants) -> State {
        let n = self.ops.n_nodes;
        let n_gas = self.mech.n_gas();
        let n_sp = self.mech.n_species();
        let n_cat = self.ops.catalyst_nodes.len();
        let (dt, theta) = (sub.dt, sub.theta);
        let mut out = State {
            gas: vec![0.0; lam.gas.len()],
            surface: lam.surface.clone(),
        };
        let mut mu = vec![0.0; n * n_gas];
        let mut diag = vec![0.0; n];
        let mut off = vec![0.0; n.saturating_sub(1)];
        let mut scratch = vec![0.0; n];
        let mut kmu = vec![0.0; n];
        for g in 0..n_gas {
            let m = &mut mu[g * n..(g + 1) * n];
            m.copy_from_slice(&lam.gas[g * n..(g + 1) * n]);
            for i in 0..n {
                diag[i] = self.ops.mass[i] / dt + theta * self.ops.stiff_diag[g][i];
            }
            for (o, s) in off.iter_mut().zip(&self.ops.stiff_off[g]) {
                *o = theta * s;
            }
            // the transport matrix is symmetric and was solvable going forward
            let _ = solve_tridiagonal(&off, &diag, &off, m, &mut scratch);
            self.ops.apply_stiffness(g, m, &mut kmu);
            for i in 0..n {
                out.gas[g * n + i] = self.ops.mass[i] / dt * m[i] - (1.0 - theta) * kmu[i];
            }
        }
        let mut conc = vec![0.0; n_sp];
        let mut prod_bar = vec![0.0; n_sp];
        let mut conc_bar = vec![0.0; n_sp];
        for (c, &node) in self.ops.catalyst_nodes.iter().enumerate() {
            let vol = self.ops.catalyst_volume[c];
            for g in 0..n_gas {
                prod_bar[g] = vol * mu[g * n + node];
            }
            for s in 0..self.mech.n_surface() {
                prod_bar[n_gas + s] = dt * lam.surface[s * n_cat + c];
            }
            self.local_conc(&sub.start, c, &mut conc);
            conc_bar.iter_mut().for_each(|v| *v = 0.0);
            self.mech.local_vjp(&conc, k, &prod_bar, &mut conc_bar, k_bar);
            for g in 0..n_gas {
                out.gas[g * n + node] += conc_bar[g];
            }
            for s in 0..self.mech.n_surface() {
                out.surface[s * n_cat + c] += conc_bar[n_gas + s];
            }
        }
        out
    }

    /// Tangent of one semi-implicit substep for state tangent `dy` and
    /// rate-constant tangent `dk`.
    pub(crate) fn explicit_jvp(&self, k: &RateConstants, sub: &Substep, dy: &State, dk: Option<&RateConstants>) -> State {
        let n = self.ops.n_nodes;
        let n_gas = self.mech.n_gas();
        let n_sp = self.mech.n_species();
        let n_cat = self.ops.catalyst_nodes.len();
        let (dt, theta) = (sub.dt, sub.theta);
        let mut out = dy.clone();
        let mut src = vec![0.0; n * n_gas];
        let mut conc = vec![0.0; n_sp];
        let mut dconc = vec![0.0; n_sp];
        let mut dprod = vec![0.0; n_sp];
        for (c, &node) in self.ops.catalyst_nodes.iter().enumerate() {
            self.local_conc(&sub.start, c, &mut conc);
            self.local_conc(dy, c, &mut dconc);
            self.mech.local_jvp(&conc, k, &dconc, dk, &mut dprod);
            let vol = self.ops.catalyst_volume[c];
            for g in 0..n_gas {
                src[g * n + node] = vol * dprod[g];
            }
            for s in 0..self.mech.n_surface() {
                out.surface[s * n_cat + c] += dt * dprod[n_gas + s];
            }
        }
        let mut kc = vec![0.0; n];
        let mut diag = vec![0.0; n];
        let mut off = vec![0.0; n.saturating_sub(1)];
        let mut scratch = vec![0.0; n];
        for g in 0..n_gas {
            let dc = &dy.gas[g * n..(g + 1) * n];
            self.ops.apply_stiffness(g, dc, &mut kc);
            let rhs = &mut out.gas[g * n..(g + 1) * n];
            for i in 0..n {
                let m = self.ops.mass[i] / dt;
                rhs[i] = m * dc[i] - (1.0 - theta) * kc[i] + src[g * n + i];
                diag[i] = m + theta * self.ops.stiff_diag[g][i];
            }
            for (o, s) in off.iter_mut().zip(&self.ops.stiff_off[g]) {
                *o = theta * s;
            }
            let _ = solve_tridiagonal(&off, &diag, &off, rhs, &mut scratch);
        }
        out
    }

    /// Reverse product through one backward-Euler substep ending at `end`.
    pub(crate) fn implicit_vjp(&self, k: &RateConstants, sub: &Substep, end: &State, lam: &State, k_bar: &mut RateConstants) -> Result<State> {
        let n = self.ops.n_nodes;
        let n_gas = self.mech.n_gas();
        let n_sp = self.mech.n_species();
        let n_cat = self.ops.catalyst_nodes.len();
        let dt = sub.dt;
        let jt = self.implicit_jacobian(k, end, dt).transpose();
        let mu = jt
            .solve(&self.to_blocks(lam))
            .map_err(|row| Error::Sensitivity(format!("singular adjoint system at block {row}")))?;
        let mu = self.state_from_blocks(&mu);
        let mut out = mu.clone();
        for g in 0..n_gas {
            for i in 0..n {
                out.gas[g * n + i] *= self.ops.mass[i] / dt;
            }
        }
        for v in out.surface.iter_mut() {
            *v /= dt;
        }
        let mut conc = vec![0.0; n_sp];
        let mut prod_bar = vec![0.0; n_sp];
        let mut sink = vec![0.0; n_sp];
        for (c, &node) in self.ops.catalyst_nodes.iter().enumerate() {
            let vol = self.ops.catalyst_volume[c];
            for g in 0..n_gas {
                prod_bar[g] = vol * mu.gas[g * n + node];
            }
            for s in 0..self.mech.n_surface() {
                prod_bar[n_gas + s] = mu.surface[s * n_cat + c];
            }
            self.local_conc(end, c, &mut conc);
            self.mech.local_vjp(&conc, k, &prod_bar, &mut sink, k_bar);
        }
        Ok(out)
    }

    /// Tangent of one backward-Euler substep ending at `end`.
    pub(crate) fn implicit_jvp(&self, k: &RateConstants, sub: &Substep, end: &State, dy: &State, dk: Option<&RateConstants>) -> Result<State> {
        let n = self.ops.n_nodes;
        let n_gas = self.mech.n_gas();
        let n_sp = self.mech.n_species();
        let n_cat = self.ops.catalyst_nodes.len();
        let dt = sub.dt;
        let mut rhs = dy.clone();
        for g in 0..n_gas {
            for i in 0..n {
                rhs.gas[g * n + i] *= self.ops.mass[i] / dt;
            }
        }
        for v in rhs.surface.iter_mut() {
            *v /= dt;
        }
        if dk.is_some() {
            let zero = vec![0.0; n_sp];
            let mut conc = vec![0.0; n_sp];
            let mut dprod = vec![0.0; n_sp];
            for (c, &node) in self.ops.catalyst_nodes.iter().enumerate() {
                self.local_conc(end, c, &mut conc);
                self.mech.local_jvp(&conc, k, &zero, dk, &mut dprod);
                let vol = self.ops.catalyst_volume[c];
                for g in 0..n_gas {
                    rhs.gas[g * n + node] += vol * dprod[g];
                }
                for s in 0..self.mech.n_surface() {
                    rhs.surface[s * n_cat + c] += dprod[n_gas + s];
                }
            }
        }
        let jac = self.implicit_jacobian(k, end, dt);
        let x = jac
            .solve(&self.to_blocks(&rhs))
            .map_err(|row| Error::Sensitivity(format!("singular tangent system at block {row}")))?;
        Ok(self.state_from_blocks(&x))
    }

    /// Reverse product through all substeps of macro step `n`. `next` is the
    /// post-injection state at `n + 1` (only used by the implicit scheme).
    pub(crate) fn step_vjp(
        &self,
        k: &RateConstants,
        n: usize,
        step: &StepTape,
        next: &State,
        mut lam: State,
        k_bar: &mut RateConstants,
    ) -> Result<State> {
        let subs = &step.substeps;
        for j in (0..subs.len()).rev() {
            lam = match self.config.scheme {
                Scheme::SemiImplicit => self.explicit_vjp(k, &subs[j], &lam, k_bar),
                Scheme::Implicit => {
                    let end = if j + 1 < subs.len() {
                        subs[j + 1].start.clone()
                    } else {
                        let mut e = next.clone();
                        self.uninject(n + 1, &mut e);
                        e
                    };
                    self.implicit_vjp(k, &subs[j], &end, &lam, k_bar)?
                }
            };
        }
        Ok(lam)
    }

    /// Tangent through all substeps of macro step `n`.
    pub(crate) fn step_jvp(
        &self,
        k: &RateConstants,
        n: usize,
        step: &StepTape,
        next: &State,
        mut dy: State,
        dk: Option<&RateConstants>,
    ) -> Result<State> {
        let subs = &step.substeps;
        for j in 0..subs.len() {
            dy = match self.config.scheme {
                Scheme::SemiImplicit => self.explicit_jvp(k, &subs[j], &dy, dk),
                Scheme::Implicit => {
                    let end = if j + 1 < subs.len() {
                        subs[j + 1].start.clone()
                    } else {
                        let mut e = next.clone();
                        self.uninject(n + 1, &mut e);
                        e
                    };
                    self.implicit_jvp(k, &subs[j], &end, &dy, dk)?
                }
            };
        }
        Ok(dy)
    }

    pub(crate) fn zero_state(&self) -> State {
        State::zeros(
            self.mech.n_gas(),
            self.ops.n_nodes,
            self.mech.n_surface(),
            self.ops.catalyst_nodes.len(),
        )
    }
}
