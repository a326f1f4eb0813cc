//! Elementary-step parsing and mass-action rate laws.
//!
//! Reactions are written as plain text, e.g. `CO + * <-> CO*` or
//! `O2 + 2* -> 2O*`. A bare `*` is a free site, a token ending in `*` is an
//! adsorbate, anything else is a gas. Each step carries a forward and
//! (when reversible) a reverse [`RateParam`]:
//!
//! ```text
//! 1.5        direct rate constant
//! 1e13$85    pre-exponential $ activation enthalpy (kJ/mol)
//! 1@70       transmission prefactor @ activation free energy (kJ/mol)
//! 0.2!       trailing "!" keeps the value fixed during fitting
//! ```
//!
//! Rates follow mass action with stoichiometric exponents:
//!
//! ```text
//! r_m = k⁺_m Π_{j∈F_m} c_j^{s_jm} − k⁻_m Π_{l∈B_m} c_l^{s_lm}
//! R_i = Σ_m S_im r_m
//! ```

use std::collections::HashMap;
use std::fmt;

use crate::constants::{BOLTZMANN, GAS_CONSTANT, KJ, PLANCK};
use crate::error::{Error, Result};

/// Concentrations above `-NEGATIVE_CLAMP` are treated as zero by the rate laws.
pub const NEGATIVE_CLAMP: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SpeciesKind {
    Gas,
    InertGas,
    Adsorbate,
    Site,
}

impl SpeciesKind {
    pub fn is_gas(self) -> bool {
        matches!(self, SpeciesKind::Gas | SpeciesKind::InertGas)
    }

    pub fn is_surface(self) -> bool {
        !self.is_gas()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Species {
    pub name: String,
    pub kind: SpeciesKind,
    /// Molar mass in amu; only gases carry one.
    pub mass: Option<f64>,
    /// Ordinal within its kind.
    pub index: usize,
}

/// Classify a species token by its surface marker.
pub fn token_kind(token: &str) -> SpeciesKind {
    if token == "*" {
        SpeciesKind::Site
    } else if token.ends_with('*') {
        SpeciesKind::Adsorbate
    } else {
        SpeciesKind::Gas
    }
}

fn is_valid_species_token(token: &str) -> bool {
    if token == "*" {
        return true;
    }
    let body = token.strip_suffix('*').unwrap_or(token);
    let mut chars = body.chars();
    match chars.next() {
        Some(c) if c.is_ascii_alphabetic() => {}
        _ => return false,
    }
    chars.all(|c| c.is_ascii_alphanumeric() || c == '_')
}

// ---------------------------------------------------------------------------
// Rate parameters
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RateForm {
    /// Rate constant given directly.
    Direct { k: f64 },
    /// `A·exp(−Ea/RT)`, `Ea` in kJ/mol.
    Arrhenius { prefactor: f64, activation_energy: f64 },
    /// `A·(k_B T/h)·exp(−G‡/RT)`, `G‡` in kJ/mol.
    FreeEnergy {
        prefactor: f64,
        activation_free_energy: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RateParam {
    pub form: RateForm,
    pub fixed: bool,
}

fn parse_number(text: &str, what: &str) -> Result<f64> {
    let text = text.trim();
    let value: f64 = text
        .parse()
        .map_err(|_| Error::Mechanism(format!("{what}: '{text}' is not a number")))?;
    if !value.is_finite() {
        return Err(Error::Mechanism(format!("{what}: '{text}' is not finite")));
    }
    Ok(value)
}

fn parse_nonnegative(text: &str, what: &str) -> Result<f64> {
    let value = parse_number(text, what)?;
    if value < 0.0 {
        return Err(Error::Mechanism(format!(
            "{what}: negative value '{}'",
            text.trim()
        )));
    }
    Ok(value)
}

impl RateParam {
    pub fn direct(k: f64) -> Self {
        RateParam {
            form: RateForm::Direct { k },
            fixed: false,
        }
    }

    pub fn fixed(mut self) -> Self {
        self.fixed = true;
        self
    }

    /// Parse one rate cell (`x`, `x$y`, `x@y`, any of them with a trailing `!`).
    pub fn parse(cell: &str) -> Result<Self> {
        let cell = cell.trim();
        if cell.is_empty() {
            return Err(Error::Mechanism("empty rate cell".into()));
        }
        let (body, fixed) = match cell.strip_suffix('!') {
            Some(body) => (body.trim_end(), true),
            None => (cell, false),
        };
        let form = if let Some((a, e)) = body.split_once('$') {
            let prefactor = parse_nonnegative(a, "pre-exponential")?;
            if prefactor == 0.0 {
                return Err(Error::Mechanism(format!(
                    "pre-exponential must be positive in '{cell}'"
                )));
            }
            RateForm::Arrhenius {
                prefactor,
                activation_energy: parse_number(e, "activation enthalpy")?,
            }
        } else if let Some((a, g)) = body.split_once('@') {
            let prefactor = parse_nonnegative(a, "transmission prefactor")?;
            if prefactor == 0.0 {
                return Err(Error::Mechanism(format!(
                    "prefactor must be positive in '{cell}'"
                )));
            }
            RateForm::FreeEnergy {
                prefactor,
                activation_free_energy: parse_number(g, "activation free energy")?,
            }
        } else {
            RateForm::Direct {
                k: parse_nonnegative(body, "rate constant")?,
            }
        };
        Ok(RateParam { form, fixed })
    }

    /// Rate constant at temperature `t` (kelvin).
    pub fn evaluate(&self, t: f64) -> Result<f64> {
        if !(t > 0.0) {
            return Err(Error::Mechanism(format!(
                "temperature must be positive, got {t}"
            )));
        }
        let rt = GAS_CONSTANT * t;
        let k = match self.form {
            RateForm::Direct { k } => k,
            RateForm::Arrhenius {
                prefactor,
                activation_energy,
            } => prefactor * (-activation_energy * KJ / rt).exp(),
            RateForm::FreeEnergy {
                prefactor,
                activation_free_energy,
            } => prefactor * BOLTZMANN * t / PLANCK * (-activation_free_energy * KJ / rt).exp(),
        };
        if !k.is_finite() || k < 0.0 {
            return Err(Error::Mechanism(format!(
                "rate constant for '{self}' at {t} K is not finite"
            )));
        }
        Ok(k)
    }

    /// Express rate constant `k` at temperature `t` in this parameter's form,
    /// keeping the prefactor and solving for the energy.
    pub fn with_rate_constant(&self, k: f64, t: f64) -> RateParam {
        let rt = GAS_CONSTANT * t;
        let form = match self.form {
            RateForm::Direct { .. } => RateForm::Direct { k },
            RateForm::Arrhenius { prefactor, .. } => RateForm::Arrhenius {
                prefactor,
                activation_energy: -rt * (k / prefactor).ln() / KJ,
            },
            RateForm::FreeEnergy { prefactor, .. } => RateForm::FreeEnergy {
                prefactor,
                activation_free_energy: -rt * (k * PLANCK / (prefactor * BOLTZMANN * t)).ln() / KJ,
            },
        };
        RateParam {
            form,
            fixed: self.fixed,
        }
    }
}

impl fmt::Display for RateParam {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.form {
            RateForm::Direct { k } => write!(f, "{k:e}")?,
            RateForm::Arrhenius {
                prefactor,
                activation_energy,
            } => write!(f, "{prefactor:e}${activation_energy:e}")?,
            RateForm::FreeEnergy {
                prefactor,
                activation_free_energy,
            } => write!(f, "{prefactor:e}@{activation_free_energy:e}")?,
        }
        if self.fixed {
            f.write_str("!")?;
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Elementary steps
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct StoichTerm {
    pub species: String,
    pub coeff: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ElementaryStep {
    /// Zero-based position in the mechanism.
    pub index: usize,
    pub reactants: Vec<StoichTerm>,
    pub products: Vec<StoichTerm>,
    pub reversible: bool,
    pub forward: RateParam,
    pub reverse: Option<RateParam>,
}

fn parse_side(side: &str, line: &str) -> Result<Vec<StoichTerm>> {
    let mut terms: Vec<StoichTerm> = Vec::new();
    for raw in side.split('+') {
        let raw = raw.trim();
        if raw.is_empty() {
            return Err(Error::Mechanism(format!("empty species term in '{line}'")));
        }
        let digits = raw.chars().take_while(|c| c.is_ascii_digit()).count();
        let (coeff, token) = raw.split_at(digits);
        let token = token.trim();
        let coeff = if coeff.is_empty() {
            1
        } else {
            coeff
                .parse::<u32>()
                .map_err(|_| Error::Mechanism(format!("bad coefficient '{coeff}' in '{line}'")))?
        };
        if coeff == 0 {
            return Err(Error::Mechanism(format!("zero coefficient in '{line}'")));
        }
        if !is_valid_species_token(token) {
            return Err(Error::Mechanism(format!(
                "invalid species token '{token}' in '{line}'"
            )));
        }
        match terms.iter_mut().find(|t| t.species == token) {
            Some(t) => t.coeff += coeff,
            None => terms.push(StoichTerm {
                species: token.to_string(),
                coeff,
            }),
        }
    }
    Ok(terms)
}

fn site_count(terms: &[StoichTerm]) -> u32 {
    terms
        .iter()
        .filter(|t| token_kind(&t.species).is_surface())
        .map(|t| t.coeff)
        .sum()
}

fn is_absent_cell(cell: Option<&str>) -> bool {
    match cell.map(str::trim) {
        None | Some("") | Some("--") | Some("-") => true,
        Some(_) => false,
    }
}

/// Parse a reaction line and its rate cells into an elementary step.
pub fn parse_reaction<S: AsRef<str>>(
    index: usize,
    line: &str,
    rate_cells: &[S],
) -> Result<ElementaryStep> {
    let line = line.trim();
    let (lhs, rhs, reversible) = if line.matches("<->").count() == 1 {
        let (l, r) = line.split_once("<->").unwrap();
        (l, r, true)
    } else if !line.contains("<->") && line.matches("->").count() == 1 && !line.contains("<-") {
        let (l, r) = line.split_once("->").unwrap();
        (l, r, false)
    } else {
        return Err(Error::Mechanism(format!(
            "expected exactly one '->' or '<->' in '{line}'"
        )));
    };
    if lhs.contains(['<', '>']) || rhs.contains(['<', '>']) {
        return Err(Error::Mechanism(format!("malformed arrow in '{line}'")));
    }
    let reactants = parse_side(lhs, line)?;
    let products = parse_side(rhs, line)?;

    if site_count(&reactants) != site_count(&products) {
        return Err(Error::Mechanism(format!(
            "site balance violated in '{line}' ({} vs {})",
            site_count(&reactants),
            site_count(&products)
        )));
    }
    for side in [&reactants, &products] {
        let surface = side
            .iter()
            .filter(|t| token_kind(&t.species).is_surface())
            .count();
        if surface > 2 {
            return Err(Error::Mechanism(format!(
                "more than two surface species on one side of '{line}'"
            )));
        }
    }

    let first = rate_cells.first().map(|c| c.as_ref());
    if is_absent_cell(first) {
        return Err(Error::Mechanism(format!("missing forward rate for '{line}'")));
    }
    let forward = RateParam::parse(first.unwrap())?;
    let second = rate_cells.get(1).map(|c| c.as_ref());
    let reverse = if reversible {
        if is_absent_cell(second) {
            return Err(Error::Mechanism(format!(
                "reversible step '{line}' needs a reverse rate"
            )));
        }
        Some(RateParam::parse(second.unwrap())?)
    } else {
        if !is_absent_cell(second) {
            return Err(Error::Mechanism(format!(
                "irreversible step '{line}' has a reverse rate"
            )));
        }
        None
    };

    Ok(ElementaryStep {
        index,
        reactants,
        products,
        reversible,
        forward,
        reverse,
    })
}

fn fmt_side(f: &mut fmt::Formatter<'_>, terms: &[StoichTerm]) -> fmt::Result {
    for (i, t) in terms.iter().enumerate() {
        if i > 0 {
            f.write_str(" + ")?;
        }
        if t.coeff > 1 {
            write!(f, "{}", t.coeff)?;
        }
        f.write_str(&t.species)?;
    }
    Ok(())
}

impl fmt::Display for ElementaryStep {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt_side(f, &self.reactants)?;
        f.write_str(if self.reversible { " <-> " } else { " -> " })?;
        fmt_side(f, &self.products)
    }
}

impl ElementaryStep {
    /// Rate cells as they would appear in an input file.
    pub fn rate_cells(&self) -> Vec<String> {
        let mut cells = vec![self.forward.to_string()];
        if let Some(rev) = &self.reverse {
            cells.push(rev.to_string());
        }
        cells
    }
}

// ---------------------------------------------------------------------------
// Thermodynamic combination
// ---------------------------------------------------------------------------

/// Weighted set of steps whose free energies must add up to the overall
/// gas-phase reaction free energy.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ThermoCombo {
    /// (zero-based step index, coefficient)
    pub terms: Vec<(usize, f64)>,
}

/// Parse `r1 + (0.5)*r2 + r3`. Step references are one-based in the text.
/// When `n_steps` is given, references beyond it are rejected.
pub fn parse_thermo_combo(line: &str, n_steps: Option<usize>) -> Result<ThermoCombo> {
    let mut terms: Vec<(usize, f64)> = Vec::new();
    for raw in line.split('+') {
        let raw = raw.trim();
        if raw.is_empty() {
            return Err(Error::Mechanism(format!("empty term in '{line}'")));
        }
        let (coeff, reference) = match raw.rsplit_once('*') {
            Some((c, r)) => {
                let c = c.trim();
                let c = c
                    .strip_prefix('(')
                    .and_then(|c| c.strip_suffix(')'))
                    .unwrap_or(c);
                (parse_number(c, "combination coefficient")?, r.trim())
            }
            None => (1.0, raw),
        };
        let number = reference
            .strip_prefix('r')
            .ok_or_else(|| Error::Mechanism(format!("expected 'rN' in '{raw}'")))?;
        let step: usize = number
            .parse()
            .map_err(|_| Error::Mechanism(format!("bad step reference '{reference}'")))?;
        if step == 0 {
            return Err(Error::Mechanism(format!(
                "step references start at r1 ('{reference}')"
            )));
        }
        if let Some(n) = n_steps {
            if step > n {
                return Err(Error::Mechanism(format!(
                    "'{reference}' refers to a nonexistent step (mechanism has {n})"
                )));
            }
        }
        match terms.iter_mut().find(|(s, _)| *s == step - 1) {
            Some((_, c)) => *c += coeff,
            None => terms.push((step - 1, coeff)),
        }
    }
    Ok(ThermoCombo { terms })
}

impl fmt::Display for ThermoCombo {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, (step, c)) in self.terms.iter().enumerate() {
            if i > 0 {
                f.write_str(" + ")?;
            }
            if *c == 1.0 {
                write!(f, "r{}", step + 1)?;
            } else {
                write!(f, "({c})*r{}", step + 1)?;
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Mechanism
// ---------------------------------------------------------------------------

/// Evaluated rate constants, one pair per step. Irreversible steps carry a
/// zero reverse constant.
#[derive(Debug, Clone, PartialEq)]
pub struct RateConstants {
    pub forward: Vec<f64>,
    pub reverse: Vec<f64>,
}

impl RateConstants {
    pub fn zeros(n_steps: usize) -> Self {
        RateConstants {
            forward: vec![0.0; n_steps],
            reverse: vec![0.0; n_steps],
        }
    }

    pub fn n_steps(&self) -> usize {
        self.forward.len()
    }
}

#[derive(Debug, Clone)]
struct CompiledStep {
    forward: Vec<(usize, u32)>,
    backward: Vec<(usize, u32)>,
    /// Nonzero column of the stoichiometry matrix.
    net: Vec<(usize, f64)>,
}

/// Species registry, steps and stoichiometry. Immutable once built.
#[derive(Debug, Clone)]
pub struct Mechanism {
    species: Vec<Species>,
    steps: Vec<ElementaryStep>,
    compiled: Vec<CompiledStep>,
    n_gas: usize,
    thermo_combo: Option<ThermoCombo>,
}

impl Mechanism {
    /// Build a mechanism from parsed steps. `gases` lists every gas with its
    /// mass (amu) in feed order; gases absent from all steps become inert.
    pub fn new(steps: Vec<ElementaryStep>, gases: &[(String, f64)]) -> Result<Self> {
        if steps.is_empty() && gases.is_empty() {
            return Err(Error::Mechanism("mechanism has neither steps nor gases".into()));
        }
        let mut species: Vec<Species> = Vec::new();
        let mut seen: HashMap<&str, usize> = HashMap::new();

        let mut in_steps: Vec<&str> = Vec::new();
        for step in &steps {
            for t in step.reactants.iter().chain(&step.products) {
                if !in_steps.contains(&t.species.as_str()) {
                    in_steps.push(&t.species);
                }
            }
        }

        for (name, mass) in gases {
            if token_kind(name) != SpeciesKind::Gas || !is_valid_species_token(name) {
                return Err(Error::Mechanism(format!("'{name}' is not a valid gas name")));
            }
            if !(*mass > 0.0) || !mass.is_finite() {
                return Err(Error::Mechanism(format!(
                    "gas '{name}' needs a positive mass, got {mass}"
                )));
            }
            if seen.contains_key(name.as_str()) {
                return Err(Error::Mechanism(format!("gas '{name}' listed twice")));
            }
            let kind = if in_steps.contains(&name.as_str()) {
                SpeciesKind::Gas
            } else {
                log::warn!("gas '{name}' takes part in no step; treated as inert");
                SpeciesKind::InertGas
            };
            seen.insert(name, species.len());
            species.push(Species {
                name: name.clone(),
                kind,
                mass: Some(*mass),
                index: species.len(),
            });
        }
        let n_gas = species.len();

        for name in &in_steps {
            let kind = token_kind(name);
            if kind == SpeciesKind::Gas {
                if !seen.contains_key(name) {
                    return Err(Error::Mechanism(format!(
                        "gas '{name}' appears in the mechanism but has no feed entry"
                    )));
                }
                continue;
            }
            if kind == SpeciesKind::Adsorbate && !seen.contains_key(name) {
                seen.insert(name, species.len());
                species.push(Species {
                    name: name.to_string(),
                    kind,
                    mass: None,
                    index: species.len() - n_gas,
                });
            }
        }
        if in_steps.contains(&"*") {
            seen.insert("*", species.len());
            species.push(Species {
                name: "*".into(),
                kind: SpeciesKind::Site,
                mass: None,
                index: 0,
            });
        }

        let compiled = steps
            .iter()
            .map(|step| {
                let lookup = |terms: &[StoichTerm]| -> Vec<(usize, u32)> {
                    terms.iter().map(|t| (seen[t.species.as_str()], t.coeff)).collect()
                };
                let forward = lookup(&step.reactants);
                let backward = lookup(&step.products);
                let mut net: Vec<(usize, f64)> = Vec::new();
                for &(i, s) in &forward {
                    net.push((i, -(s as f64)));
                }
                for &(i, s) in &backward {
                    match net.iter_mut().find(|(j, _)| *j == i) {
                        Some((_, v)) => *v += s as f64,
                        None => net.push((i, s as f64)),
                    }
                }
                net.retain(|&(_, v)| v != 0.0);
                CompiledStep {
                    forward,
                    backward,
                    net,
                }
            })
            .collect();

        let steps = steps
            .into_iter()
            .enumerate()
            .map(|(i, mut s)| {
                s.index = i;
                s
            })
            .collect();

        Ok(Mechanism {
            species,
            steps,
            compiled,
            n_gas,
            thermo_combo: None,
        })
    }

    /// Parse reaction lines (with their rate cells) and build the mechanism.
    pub fn parse<S: AsRef<str>>(lines: &[(S, Vec<S>)], gases: &[(String, f64)]) -> Result<Self> {
        let steps = lines
            .iter()
            .enumerate()
            .map(|(i, (line, cells))| parse_reaction(i, line.as_ref(), cells))
            .collect::<Result<Vec<_>>>()?;
        Mechanism::new(steps, gases)
    }

    pub fn with_thermo_combo(mut self, combo: ThermoCombo) -> Result<Self> {
        if let Some(&(s, _)) = combo.terms.iter().find(|(s, _)| *s >= self.steps.len()) {
            return Err(Error::Mechanism(format!(
                "thermodynamic combination refers to nonexistent step r{}",
                s + 1
            )));
        }
        self.thermo_combo = Some(combo);
        Ok(self)
    }

    pub fn thermo_combo(&self) -> Option<&ThermoCombo> {
        self.thermo_combo.as_ref()
    }

    pub fn species(&self) -> &[Species] {
        &self.species
    }

    pub fn steps(&self) -> &[ElementaryStep] {
        &self.steps
    }

    pub fn n_species(&self) -> usize {
        self.species.len()
    }

    /// Number of gases (reactive and inert). Gases occupy species indices
    /// `0..n_gas()`.
    pub fn n_gas(&self) -> usize {
        self.n_gas
    }

    /// Surface species occupy indices `n_gas()..n_species()`.
    pub fn n_surface(&self) -> usize {
        self.species.len() - self.n_gas
    }

    pub fn n_steps(&self) -> usize {
        self.steps.len()
    }

    pub fn species_index(&self, name: &str) -> Option<usize> {
        self.species.iter().position(|s| s.name == name)
    }

    pub fn gas_names(&self) -> Vec<&str> {
        self.species[..self.n_gas].iter().map(|s| s.name.as_str()).collect()
    }

    pub fn surface_names(&self) -> Vec<&str> {
        self.species[self.n_gas..].iter().map(|s| s.name.as_str()).collect()
    }

    /// Dense stoichiometry matrix, `n_species × n_steps`.
    pub fn stoichiometry(&self) -> Vec<Vec<i32>> {
        let mut s = vec![vec![0i32; self.n_steps()]; self.n_species()];
        for (m, step) in self.compiled.iter().enumerate() {
            for &(i, v) in &step.net {
                s[i][m] = v as i32;
            }
        }
        s
    }

    /// Evaluate every step's rate parameters at temperature `t`.
    pub fn rate_constants(&self, t: f64) -> Result<RateConstants> {
        let mut k = RateConstants::zeros(self.n_steps());
        for (m, step) in self.steps.iter().enumerate() {
            k.forward[m] = step.forward.evaluate(t)?;
            if let Some(rev) = &step.reverse {
                k.reverse[m] = rev.evaluate(t)?;
            }
        }
        Ok(k)
    }

    /// Net rate per step and species production, checking dimensions and
    /// rejecting concentrations below `-NEGATIVE_CLAMP`.
    pub fn rate_vector(
        &self,
        gas: &[f64],
        surface: &[f64],
        k: &RateConstants,
    ) -> Result<(Vec<f64>, Vec<f64>)> {
        if gas.len() != self.n_gas || surface.len() != self.n_surface() {
            return Err(Error::Mechanism(format!(
                "state has {} gas and {} surface entries, mechanism expects {} and {}",
                gas.len(),
                surface.len(),
                self.n_gas,
                self.n_surface()
            )));
        }
        if k.n_steps() != self.n_steps() {
            return Err(Error::Mechanism(format!(
                "{} rate-constant pairs for {} steps",
                k.n_steps(),
                self.n_steps()
            )));
        }
        let conc: Vec<f64> = gas.iter().chain(surface).copied().collect();
        if let Some((i, c)) = conc.iter().enumerate().find(|(_, &c)| c < -NEGATIVE_CLAMP) {
            return Err(Error::Mechanism(format!(
                "negative concentration {c:e} for '{}'",
                self.species[i].name
            )));
        }
        let mut rates = vec![0.0; self.n_steps()];
        let mut production = vec![0.0; self.n_species()];
        self.local_rates(&conc, k, &mut rates, &mut production);
        Ok((rates, production))
    }

    /// Hot-path rate evaluation on a local concentration vector (gases then
    /// surface species). Negative entries are clamped to zero.
    pub(crate) fn local_rates(
        &self,
        conc: &[f64],
        k: &RateConstants,
        rates: &mut [f64],
        production: &mut [f64],
    ) {
        production.iter_mut().for_each(|p| *p = 0.0);
        for (m, step) in self.compiled.iter().enumerate() {
            let r = k.forward[m] * monomial(&step.forward, conc)
                - k.reverse[m] * monomial(&step.backward, conc);
            rates[m] = r;
            for &(i, s) in &step.net {
                production[i] += s * r;
            }
        }
    }

    /// Reverse-mode product through the local rate law: given the cotangent
    /// `prod_bar` of the species production vector, accumulate into the
    /// concentration cotangent and the rate-constant cotangents.
    pub(crate) fn local_vjp(
        &self,
        conc: &[f64],
        k: &RateConstants,
        prod_bar: &[f64],
        conc_bar: &mut [f64],
        k_bar: &mut RateConstants,
    ) {
        for (m, step) in self.compiled.iter().enumerate() {
            let r_bar: f64 = step.net.iter().map(|&(i, s)| s * prod_bar[i]).sum();
            if r_bar == 0.0 {
                continue;
            }
            let pf = monomial(&step.forward, conc);
            let pb = monomial(&step.backward, conc);
            k_bar.forward[m] += r_bar * pf;
            k_bar.reverse[m] -= r_bar * pb;
            if k.forward[m] != 0.0 {
                monomial_grad(&step.forward, conc, k.forward[m] * r_bar, conc_bar);
            }
            if k.reverse[m] != 0.0 {
                monomial_grad(&step.backward, conc, -k.reverse[m] * r_bar, conc_bar);
            }
        }
    }

    /// Forward-mode product: directional derivative of the production vector
    /// for a concentration tangent `dconc` and rate-constant tangent `dk`.
    pub(crate) fn local_jvp(
        &self,
        conc: &[f64],
        k: &RateConstants,
        dconc: &[f64],
        dk: Option<&RateConstants>,
        dprod: &mut [f64],
    ) {
        dprod.iter_mut().for_each(|p| *p = 0.0);
        for (m, step) in self.compiled.iter().enumerate() {
            let mut dr = k.forward[m] * monomial_dir(&step.forward, conc, dconc)
                - k.reverse[m] * monomial_dir(&step.backward, conc, dconc);
            if let Some(dk) = dk {
                if dk.forward[m] != 0.0 {
                    dr += dk.forward[m] * monomial(&step.forward, conc);
                }
                if dk.reverse[m] != 0.0 {
                    dr -= dk.reverse[m] * monomial(&step.backward, conc);
                }
            }
            if dr != 0.0 {
                for &(i, s) in &step.net {
                    dprod[i] += s * dr;
                }
            }
        }
    }

    /// Dense Jacobian of the production vector with respect to the local
    /// concentrations, `jac[i][j] = ∂R_i/∂c_j`.
    pub(crate) fn local_jacobian(&self, conc: &[f64], k: &RateConstants, jac: &mut [Vec<f64>]) {
        let n = self.n_species();
        for row in jac.iter_mut() {
            row.iter_mut().for_each(|v| *v = 0.0);
        }
        let mut dr = vec![0.0; n];
        for (m, step) in self.compiled.iter().enumerate() {
            dr.iter_mut().for_each(|v| *v = 0.0);
            if k.forward[m] != 0.0 {
                monomial_grad(&step.forward, conc, k.forward[m], &mut dr);
            }
            if k.reverse[m] != 0.0 {
                monomial_grad(&step.backward, conc, -k.reverse[m], &mut dr);
            }
            for &(i, s) in &step.net {
                for j in 0..n {
                    jac[i][j] += s * dr[j];
                }
            }
        }
    }
}

#[inline]
fn clamp(c: f64) -> f64 {
    if c > 0.0 {
        c
    } else {
        0.0
    }
}

#[inline]
fn monomial(terms: &[(usize, u32)], conc: &[f64]) -> f64 {
    terms
        .iter()
        .map(|&(i, s)| clamp(conc[i]).powi(s as i32))
        .product()
}

/// Accumulate `scale · ∂(Π c^s)/∂c` into `out`.
fn monomial_grad(terms: &[(usize, u32)], conc: &[f64], scale: f64, out: &mut [f64]) {
    for (a, &(i, s)) in terms.iter().enumerate() {
        if conc[i] <= 0.0 {
            // clamped region: zero derivative unless s == 1 at exactly zero,
            // which the clamp treats as flat as well
            if !(conc[i] == 0.0 && s == 1) {
                continue;
            }
        }
        let mut d = s as f64 * clamp(conc[i]).powi(s as i32 - 1);
        for (b, &(j, t)) in terms.iter().enumerate() {
            if a != b {
                d *= clamp(conc[j]).powi(t as i32);
            }
        }
        out[i] += scale * d;
    }
}

fn monomial_dir(terms: &[(usize, u32)], conc: &[f64], dconc: &[f64]) -> f64 {
    let mut g = 0.0;
    for (a, &(i, s)) in terms.iter().enumerate() {
        if dconc[i] == 0.0 || conc[i] < 0.0 || (conc[i] == 0.0 && s > 1) {
            continue;
        }
        let mut d = s as f64 * clamp(conc[i]).powi(s as i32 - 1);
        for (b, &(j, t)) in terms.iter().enumerate() {
            if a != b {
                d *= clamp(conc[j]).powi(t as i32);
            }
        }
        g += d * dconc[i];
    }
    g
}
