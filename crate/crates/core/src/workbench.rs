//! Input files, experimental data and the output tree.
//!
//! The input file is a CSV workbook with four sections, each introduced by a
//! header row whose first cell is `Reactor Setup`, `Feed and Surface
//! Composition`, `Elementary Reactions` or `Thermodynamic Consistency`.
//! Sections may appear in any order and blank rows are ignored. Every CSV
//! written here has a header row with units, and numbers are printed in
//! shortest round-trip exponent form so identical runs give identical bytes.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::forward::{
    ForwardModel, GasPulse, InitialSurface, PulseSchedule, Scheme, SimulationResult, SolverConfig,
};
use crate::inverse::{ExperimentalCurves, FitReport, ObservedCurve, ThermoConstraint};
use crate::mechanism::{parse_reaction, parse_thermo_combo, token_kind, ElementaryStep, Mechanism, SpeciesKind, ThermoCombo};
use crate::reactor::ReactorSpec;
use crate::sensitivity::{HessianResult, TimeSensitivity};

const REACTOR: &str = "Reactor Setup";
const FEED: &str = "Feed and Surface Composition";
const REACTIONS: &str = "Elementary Reactions";
const THERMO: &str = "Thermodynamic Consistency";
const DELTA_G: &str = "Delta G gas (J/mol)";

/// One gas of the feed table.
#[derive(Debug, Clone, PartialEq)]
pub struct FeedGas {
    pub name: String,
    /// nmol per pulse
    pub intensity: f64,
    /// s after the start of each pulse window
    pub time: f64,
    /// amu
    pub mass: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ThermoSection {
    pub combo: ThermoCombo,
    /// J/mol
    pub delta_g_gas: Option<f64>,
}

/// Everything an input file describes.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentDefinition {
    pub reactor: ReactorSpec,
    pub mesh_size: usize,
    pub catalyst_density: u32,
    pub output_folder: PathBuf,
    pub data_folder: Option<PathBuf>,
    /// Length of each pulse window (s).
    pub simulation_time: f64,
    /// Time steps per pulse window.
    pub time_steps: usize,
    pub pulse_count: usize,
    pub feed: Vec<FeedGas>,
    pub initial_surface: InitialSurface,
    pub steps: Vec<ElementaryStep>,
    pub thermo: Option<ThermoSection>,
}

impl ExperimentDefinition {
    pub fn gases(&self) -> Vec<(String, f64)> {
        self.feed.iter().map(|g| (g.name.clone(), g.mass)).collect()
    }

    pub fn mechanism(&self) -> Result<Mechanism> {
        let mech = Mechanism::new(self.steps.clone(), &self.gases())?;
        match &self.thermo {
            Some(t) => mech.with_thermo_combo(t.combo.clone()),
            None => Ok(mech),
        }
    }

    pub fn schedule(&self) -> PulseSchedule {
        PulseSchedule {
            pulses: self
                .feed
                .iter()
                .map(|g| GasPulse {
                    gas: g.name.clone(),
                    intensity: g.intensity,
                    time: g.time,
                })
                .collect(),
            pulse_count: self.pulse_count,
            spacing: self.simulation_time,
        }
    }

    pub fn solver_config(&self, scheme: Scheme) -> SolverConfig {
        SolverConfig {
            total_time: self.simulation_time * self.pulse_count as f64,
            n_steps: self.time_steps * self.pulse_count,
            scheme,
            ..SolverConfig::default()
        }
    }

    pub fn forward_model(&self, config: SolverConfig) -> Result<ForwardModel> {
        ForwardModel::with_mesh_config(
            self.mechanism()?,
            self.reactor.clone(),
            self.mesh_size,
            self.catalyst_density,
            self.schedule(),
            &self.initial_surface,
            config,
        )
    }

    /// The thermodynamic penalty at weight `alpha`, if the file defines one.
    pub fn thermo_constraint(&self, alpha: f64) -> Result<Option<ThermoConstraint>> {
        let Some(t) = &self.thermo else { return Ok(None) };
        if alpha == 0.0 {
            return Ok(None);
        }
        let delta_g_gas = t.delta_g_gas.ok_or_else(|| {
            Error::Input(format!("a thermodynamic weight needs the '{DELTA_G}' row"))
        })?;
        let c = ThermoConstraint {
            delta_g_gas,
            combo: t.combo.clone(),
            alpha,
            temperature: self.reactor.temperature,
        };
        c.validate()?;
        Ok(Some(c))
    }
}

fn fmt_num(v: f64) -> String {
    let a = v.abs();
    if v == 0.0 || (1e-3..1e6).contains(&a) {
        format!("{v}")
    } else {
        format!("{v:e}")
    }
}

fn parse_f64(cell: &str, what: &str, row: usize) -> Result<f64> {
    cell.trim()
        .parse::<f64>()
        .ok()
        .filter(|v| v.is_finite())
        .ok_or_else(|| Error::Input(format!("row {row}: '{cell}' is not a number ({what})")))
}

fn parse_count(cell: &str, what: &str, row: usize) -> Result<usize> {
    let v = parse_f64(cell, what, row)?;
    if v < 0.0 || v.fract() != 0.0 {
        return Err(Error::Input(format!("row {row}: {what} must be a whole number, got '{cell}'")));
    }
    Ok(v as usize)
}

fn suggestion(name: &str, candidates: &[&str]) -> String {
    candidates
        .iter()
        .map(|c| (strsim::levenshtein(name, c), *c))
        .filter(|(d, _)| *d <= 2)
        .min()
        .map(|(_, c)| format!(" (did you mean '{c}'?)"))
        .unwrap_or_default()
}

struct Row {
    number: usize,
    cells: Vec<String>,
}

impl Row {
    fn key(&self) -> &str {
        self.cells.first().map(String::as_str).unwrap_or("")
    }

    fn values(&self) -> Vec<&str> {
        let mut v: Vec<&str> = self.cells.iter().skip(1).map(String::as_str).collect();
        while v.last().is_some_and(|c| c.is_empty()) {
            v.pop();
        }
        v
    }

    fn single(&self) -> Result<&str> {
        self.values()
            .first()
            .copied()
            .ok_or_else(|| Error::Input(format!("row {}: '{}' has no value", self.number, self.key())))
    }
}

/// Read and validate an input file.
pub fn load_input(path: &Path) -> Result<ExperimentDefinition> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_input(&text)
}

/// Parse input-file text.
pub fn parse_input(text: &str) -> Result<ExperimentDefinition> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(text.as_bytes());
    let mut sections: Vec<(&str, Vec<Row>)> = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| Error::Input(format!("row {}: {e}", i + 1)))?;
        let cells: Vec<String> = rec.iter().map(|c| c.trim().to_string()).collect();
        if cells.iter().all(|c| c.is_empty()) {
            continue;
        }
        let row = Row { number: i + 1, cells };
        if let Some(h) = [REACTOR, FEED, REACTIONS, THERMO].into_iter().find(|h| row.key() == *h) {
            if sections.iter().any(|(s, _)| *s == h) {
                return Err(Error::Input(format!("row {}: section '{h}' appears twice", row.number)));
            }
            sections.push((h, Vec::new()));
            continue;
        }
        match sections.last_mut() {
            Some((_, rows)) => rows.push(row),
            None => {
                return Err(Error::Input(format!(
                    "row {}: '{}' appears before any section header",
                    row.number,
                    row.key()
                )))
            }
        }
    }
    let take = |name: &str| sections.iter().find(|(s, _)| *s == name).map(|(_, r)| r);
    let missing = |name: &str| Error::Input(format!("missing \"{name}\" section"));

    let reactor_rows = take(REACTOR).ok_or_else(|| missing(REACTOR))?;
    let feed_rows = take(FEED).ok_or_else(|| missing(FEED))?;
    let reaction_rows = take(REACTIONS).ok_or_else(|| missing(REACTIONS))?;

    let mut def = parse_reactor(reactor_rows)?;
    let (feed, surface) = parse_feed(feed_rows)?;
    def.feed = feed;
    def.initial_surface = surface;

    let mut steps = Vec::new();
    for row in reaction_rows {
        let cells = row.values();
        let step = parse_reaction(steps.len(), row.key(), &cells)
            .map_err(|e| Error::Input(format!("row {}: {e}", row.number)))?;
        steps.push(step);
    }
    def.steps = steps;

    if let Some(rows) = take(THERMO) {
        let mut combo = None;
        let mut delta_g = None;
        for row in rows {
            if row.key() == DELTA_G {
                delta_g = Some(parse_f64(row.single()?, DELTA_G, row.number)?);
            } else if combo.is_none() {
                combo = Some(
                    parse_thermo_combo(row.key(), Some(def.steps.len()))
                        .map_err(|e| Error::Input(format!("row {}: {e}", row.number)))?,
                );
            } else {
                return Err(Error::Input(format!(
                    "row {}: unexpected '{}' in \"{THERMO}\"",
                    row.number,
                    row.key()
                )));
            }
        }
        if let Some(combo) = combo {
            def.thermo = Some(ThermoSection { combo, delta_g_gas: delta_g });
        } else if delta_g.is_some() {
            return Err(Error::Input(format!("\"{THERMO}\" has '{DELTA_G}' but no combination line")));
        }
    }

    validate_references(&def)?;
    def.reactor.validate()?;
    Ok(def)
}

fn parse_reactor(rows: &[Row]) -> Result<ExperimentDefinition> {
    let keys = [
        "Zone Length",
        "Zone Void",
        "Reactor Radius",
        "Reactor Temperature",
        "Mesh Size",
        "Catalyst Mesh Density",
        "Output Folder",
        "Experimental Data Folder",
        "Reference Diffusion Inert",
        "Reference Diffusion Catalyst",
        "Reference Temperature",
        "Reference Mass",
        "Simulation Time",
        "Time Steps",
        "Pulse Number",
    ];
    let mut found: Vec<(&str, &Row)> = Vec::new();
    for row in rows {
        let key = keys.iter().find(|k| **k == row.key()).ok_or_else(|| {
            Error::Input(format!(
                "row {}: unknown key '{}' in \"{REACTOR}\"{}",
                row.number,
                row.key(),
                suggestion(row.key(), &keys)
            ))
        })?;
        if found.iter().any(|(k, _)| k == key) {
            return Err(Error::Input(format!("row {}: '{key}' given twice", row.number)));
        }
        found.push((key, row));
    }
    let get = |k: &str| found.iter().find(|(key, _)| *key == k).map(|(_, r)| *r);
    let need = |k: &str| get(k).ok_or_else(|| Error::Input(format!("\"{REACTOR}\" is missing '{k}'")));
    let number = |k: &str| -> Result<f64> {
        let r = need(k)?;
        parse_f64(r.single()?, k, r.number)
    };
    let triple = |k: &str| -> Result<[f64; 3]> {
        let r = need(k)?;
        let v = r.values();
        if v.len() != 3 {
            return Err(Error::Input(format!("row {}: '{k}' needs three zone values", r.number)));
        }
        Ok([
            parse_f64(v[0], k, r.number)?,
            parse_f64(v[1], k, r.number)?,
            parse_f64(v[2], k, r.number)?,
        ])
    };
    let count = |k: &str, default: usize| -> Result<usize> {
        match get(k) {
            Some(r) => parse_count(r.single()?, k, r.number),
            None => Ok(default),
        }
    };
    let reactor = ReactorSpec {
        zone_lengths: triple("Zone Length")?,
        zone_voids: triple("Zone Void")?,
        radius: number("Reactor Radius")?,
        temperature: number("Reactor Temperature")?,
        ref_diffusion_inert: number("Reference Diffusion Inert")?,
        ref_diffusion_catalyst: number("Reference Diffusion Catalyst")?,
        ref_temperature: number("Reference Temperature")?,
        ref_mass: number("Reference Mass")?,
    };
    let mesh_row = need("Mesh Size")?;
    let mesh_size = parse_count(mesh_row.single()?, "Mesh Size", mesh_row.number)?;
    let dens_row = need("Catalyst Mesh Density")?;
    let catalyst_density = parse_count(dens_row.single()?, "Catalyst Mesh Density", dens_row.number)? as u32;
    let output_folder = match get("Output Folder") {
        Some(r) => PathBuf::from(r.single()?),
        None => PathBuf::from("results"),
    };
    let data_folder = match get("Experimental Data Folder") {
        Some(r) => match r.values().first() {
            Some(v) if !v.is_empty() && !v.eq_ignore_ascii_case("none") => Some(PathBuf::from(v)),
            _ => None,
        },
        None => None,
    };
    let simulation_time = match get("Simulation Time") {
        Some(r) => parse_f64(r.single()?, "Simulation Time", r.number)?,
        None => 1.0,
    };
    if !(simulation_time > 0.0) {
        return Err(Error::Input("Simulation Time must be positive".into()));
    }
    let time_steps = count("Time Steps", 1000)?;
    let pulse_count = count("Pulse Number", 1)?;
    if pulse_count == 0 || time_steps < 10 {
        return Err(Error::Input("Pulse Number must be at least 1 and Time Steps at least 10".into()));
    }
    Ok(ExperimentDefinition {
        reactor,
        mesh_size,
        catalyst_density,
        output_folder,
        data_folder,
        simulation_time,
        time_steps,
        pulse_count,
        feed: Vec::new(),
        initial_surface: InitialSurface::default(),
        steps: Vec::new(),
        thermo: None,
    })
}

fn parse_feed(rows: &[Row]) -> Result<(Vec<FeedGas>, InitialSurface)> {
    let mut gas_names: Option<(usize, Vec<String>)> = None;
    let mut surf_names: Option<(usize, Vec<String>)> = None;
    let mut current_is_gas = true;
    let mut intensity: Option<Vec<f64>> = None;
    let mut times: Option<Vec<f64>> = None;
    let mut masses: Option<Vec<f64>> = None;
    let mut initial: Option<Vec<f64>> = None;
    for row in rows {
        let values = row.values();
        if row.key().is_empty() {
            let names: Vec<String> = values.iter().map(|s| s.to_string()).collect();
            if names.is_empty() || names.iter().any(|n| n.is_empty()) {
                return Err(Error::Input(format!("row {}: empty species name", row.number)));
            }
            let surface = names.iter().all(|n| token_kind(n).is_surface());
            let gas = names.iter().all(|n| token_kind(n) == SpeciesKind::Gas);
            if !surface && !gas {
                return Err(Error::Input(format!(
                    "row {}: a name row must list only gases or only surface species",
                    row.number
                )));
            }
            let slot = if gas { &mut gas_names } else { &mut surf_names };
            if slot.is_some() {
                return Err(Error::Input(format!("row {}: species listed twice", row.number)));
            }
            *slot = Some((row.number, names));
            current_is_gas = gas;
            continue;
        }
        let parse_row = |len: usize| -> Result<Vec<f64>> {
            if values.len() != len {
                return Err(Error::Input(format!(
                    "row {}: '{}' has {} values for {len} species",
                    row.number,
                    row.key(),
                    values.len()
                )));
            }
            values.iter().map(|v| parse_f64(v, row.key(), row.number)).collect()
        };
        let (slot, names) = match (row.key(), current_is_gas) {
            ("Intensity", true) => (&mut intensity, &gas_names),
            ("Time", true) => (&mut times, &gas_names),
            ("Mass", true) => (&mut masses, &gas_names),
            ("Initial Composition", false) => (&mut initial, &surf_names),
            (k, _) => {
                return Err(Error::Input(format!(
                    "row {}: unexpected '{k}' in \"{FEED}\"{}",
                    row.number,
                    suggestion(k, &["Intensity", "Time", "Mass", "Initial Composition"])
                )))
            }
        };
        let Some((_, names)) = names else {
            return Err(Error::Input(format!("row {}: '{}' precedes its species row", row.number, row.key())));
        };
        if slot.is_some() {
            return Err(Error::Input(format!("row {}: '{}' given twice", row.number, row.key())));
        }
        *slot = Some(parse_row(names.len())?);
    }
    let (_, gas_names) = gas_names.ok_or_else(|| Error::Input(format!("\"{FEED}\" lists no gases")))?;
    let n = gas_names.len();
    let intensity = intensity.ok_or_else(|| Error::Input("feed is missing 'Intensity'".into()))?;
    let times = times.unwrap_or_else(|| vec![0.0; n]);
    let masses = masses.ok_or_else(|| Error::Input("feed is missing 'Mass'".into()))?;
    let feed = (0..n)
        .map(|i| FeedGas {
            name: gas_names[i].clone(),
            intensity: intensity[i],
            time: times[i],
            mass: masses[i],
        })
        .collect();
    let surface = match (surf_names, initial) {
        (Some((_, names)), Some(values)) => InitialSurface(names.into_iter().zip(values).collect()),
        (Some((row, _)), None) => {
            return Err(Error::Input(format!("row {row}: surface species without 'Initial Composition'")))
        }
        _ => InitialSurface::default(),
    };
    Ok((feed, surface))
}

fn validate_references(def: &ExperimentDefinition) -> Result<()> {
    if def.steps.is_empty() {
        return Err(Error::Input(format!("\"{REACTIONS}\" lists no reactions")));
    }
    let feed: Vec<&str> = def.feed.iter().map(|g| g.name.as_str()).collect();
    let surf: Vec<&str> = def.initial_surface.0.iter().map(|(n, _)| n.as_str()).collect();
    let mut in_steps: Vec<&str> = Vec::new();
    for step in &def.steps {
        for t in step.reactants.iter().chain(&step.products) {
            if !in_steps.contains(&t.species.as_str()) {
                in_steps.push(&t.species);
            }
        }
    }
    for name in &in_steps {
        let (list, table) = if token_kind(name) == SpeciesKind::Gas {
            (&feed, "feed table")
        } else {
            (&surf, "initial composition")
        };
        if !list.contains(name) {
            return Err(Error::Input(format!(
                "'{name}' appears in the reactions but not in the {table}{}",
                suggestion(name, list)
            )));
        }
    }
    for name in &surf {
        if !in_steps.contains(name) {
            return Err(Error::Input(format!(
                "surface species '{name}' takes part in no reaction{}",
                suggestion(name, &in_steps)
            )));
        }
    }
    Ok(())
}

/// Render a definition as input-file text; `parse_input` reads it back
/// unchanged.
pub fn render_input(def: &ExperimentDefinition) -> String {
    let mut w = csv::WriterBuilder::new().flexible(true).from_writer(Vec::new());
    let mut row = |cells: Vec<String>| {
        w.write_record(&cells).expect("in-memory write");
    };
    let r = &def.reactor;
    row(vec![REACTOR.into(), "Zone 1".into(), "Zone 2".into(), "Zone 3".into()]);
    row(std::iter::once("Zone Length".to_string()).chain(r.zone_lengths.iter().map(|v| fmt_num(*v))).collect());
    row(std::iter::once("Zone Void".to_string()).chain(r.zone_voids.iter().map(|v| fmt_num(*v))).collect());
    row(vec!["Reactor Radius".into(), fmt_num(r.radius)]);
    row(vec!["Reactor Temperature".into(), fmt_num(r.temperature)]);
    row(vec!["Mesh Size".into(), def.mesh_size.to_string()]);
    row(vec!["Catalyst Mesh Density".into(), def.catalyst_density.to_string()]);
    row(vec!["Output Folder".into(), def.output_folder.display().to_string()]);
    row(vec![
        "Experimental Data Folder".into(),
        def.data_folder.as_ref().map_or("none".into(), |p| p.display().to_string()),
    ]);
    row(vec!["Reference Diffusion Inert".into(), fmt_num(r.ref_diffusion_inert)]);
    row(vec!["Reference Diffusion Catalyst".into(), fmt_num(r.ref_diffusion_catalyst)]);
    row(vec!["Reference Temperature".into(), fmt_num(r.ref_temperature)]);
    row(vec!["Reference Mass".into(), fmt_num(r.ref_mass)]);
    row(vec!["Simulation Time".into(), fmt_num(def.simulation_time)]);
    row(vec!["Time Steps".into(), def.time_steps.to_string()]);
    row(vec!["Pulse Number".into(), def.pulse_count.to_string()]);
    row(vec![String::new()]);

    row(vec![FEED.into()]);
    row(std::iter::once(String::new()).chain(def.feed.iter().map(|g| g.name.clone())).collect());
    row(std::iter::once("Intensity".to_string()).chain(def.feed.iter().map(|g| fmt_num(g.intensity))).collect());
    row(std::iter::once("Time".to_string()).chain(def.feed.iter().map(|g| fmt_num(g.time))).collect());
    row(std::iter::once("Mass".to_string()).chain(def.feed.iter().map(|g| fmt_num(g.mass))).collect());
    if !def.initial_surface.0.is_empty() {
        row(vec![String::new()]);
        row(std::iter::once(String::new()).chain(def.initial_surface.0.iter().map(|(n, _)| n.clone())).collect());
        row(std::iter::once("Initial Composition".to_string())
            .chain(def.initial_surface.0.iter().map(|(_, v)| fmt_num(*v)))
            .collect());
    }
    row(vec![String::new()]);

    row(vec![REACTIONS.into()]);
    for step in &def.steps {
        row(std::iter::once(step.to_string()).chain(step.rate_cells()).collect());
    }
    if let Some(t) = &def.thermo {
        row(vec![String::new()]);
        row(vec![THERMO.into()]);
        row(vec![t.combo.to_string()]);
        if let Some(g) = t.delta_g_gas {
            row(vec![DELTA_G.into(), fmt_num(g)]);
        }
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("csv output is UTF-8")
}

pub fn save_input(def: &ExperimentDefinition, path: &Path) -> Result<()> {
    fs::write(path, render_input(def)).map_err(|e| Error::io(path, e))
}

// ---------------------------------------------------------------------------
// Experimental data
// ---------------------------------------------------------------------------

/// Load `<folder>/<gas>.csv` (columns time in s, flux in nmol/s; header row
/// optional) for every listed gas.
pub fn load_experimental(folder: &Path, gases: &[&str]) -> Result<ExperimentalCurves> {
    let mut curves = Vec::new();
    for gas in gases {
        let path = folder.join(format!("{gas}.csv"));
        if !path.exists() {
            return Err(Error::Input(format!("expected experimental data file {}", path.display())));
        }
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(false)
            .flexible(true)
            .from_path(&path)
            .map_err(|e| Error::csv(&path, e))?;
        let (mut times, mut flux) = (Vec::new(), Vec::new());
        for (i, rec) in reader.records().enumerate() {
            let rec = rec.map_err(|e| Error::csv(&path, e))?;
            if rec.iter().all(|c| c.trim().is_empty()) {
                continue;
            }
            let t = rec.get(0).unwrap_or("").trim();
            let f = rec.get(1).unwrap_or("").trim();
            match (t.parse::<f64>(), f.parse::<f64>()) {
                (Ok(t), Ok(f)) => {
                    times.push(t);
                    flux.push(f);
                }
                _ if i == 0 => continue,
                _ => {
                    return Err(Error::Input(format!(
                        "{}: row {} is not a (time, flux) pair",
                        path.display(),
                        i + 1
                    )))
                }
            }
        }
        let curve = ObservedCurve { gas: gas.to_string(), times, flux };
        curve.validate().map_err(|e| Error::Input(format!("{}: {e}", path.display())))?;
        curves.push(curve);
    }
    Ok(ExperimentalCurves { curves, noise_sigma: None })
}

/// True when every curve shares one time grid.
pub fn shared_time_grid(data: &ExperimentalCurves) -> bool {
    data.curves.windows(2).all(|w| w[0].times == w[1].times)
}

/// Add seeded Gaussian noise with standard deviation `relative · peak` per gas.
pub fn add_noise(data: &ExperimentalCurves, relative: f64, seed: u64) -> Result<ExperimentalCurves> {
    if !(relative >= 0.0) || !relative.is_finite() {
        return Err(Error::Input(format!("noise level must be non-negative, got {relative}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = data.clone();
    for c in &mut out.curves {
        let peak = c.flux.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let sigma = relative * peak;
        if sigma > 0.0 {
            let normal = Normal::new(0.0, sigma).map_err(|e| Error::Input(e.to_string()))?;
            for v in &mut c.flux {
                *v += normal.sample(&mut rng);
            }
        }
    }
    out.noise_sigma = Some(relative);
    Ok(out)
}

// ---------------------------------------------------------------------------
// Output tree
// ---------------------------------------------------------------------------

/// Fixed-format float for output files.
pub fn fmt_out(v: f64) -> String {
    format!("{v:e}")
}

/// Write a CSV table, creating parent folders.
pub fn write_table(path: &Path, header: &[String], rows: impl IntoIterator<Item = Vec<String>>) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::csv(path, e))?;
    w.write_record(header).map_err(|e| Error::csv(path, e))?;
    for r in rows {
        w.write_record(&r).map_err(|e| Error::csv(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Root of a run's output. The input file is copied in on creation.
#[derive(Debug, Clone)]
pub struct OutputTree {
    pub root: PathBuf,
}

impl OutputTree {
    pub fn create(root: &Path, input: Option<&Path>) -> Result<Self> {
        fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
        if let Some(input) = input {
            let name = input.file_name().ok_or_else(|| Error::Input(format!("{} is not a file", input.display())))?;
            let dest = root.join(name);
            fs::copy(input, &dest).map_err(|e| Error::io(&dest, e))?;
        }
        Ok(OutputTree { root: root.to_path_buf() })
    }

    pub fn dir(&self, name: &str) -> Result<PathBuf> {
        let d = self.root.join(name);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
        Ok(d)
    }

    /// `flux_data/pulse_<p>/<gas>.csv` for the selected pulses (1-based;
    /// all when `None`) plus the mass balance.
    pub fn write_flux(&self, result: &SimulationResult, pulse: Option<usize>) -> Result<()> {
        let dir = self.dir("flux_data")?;
        for p in selected_pulses(result, pulse)? {
            for (g, gas) in result.gas_names.iter().enumerate() {
                let (t, f) = result.pulse_curve(g, p);
                write_table(
                    &dir.join(format!("pulse_{}", p + 1)).join(format!("{gas}.csv")),
                    &["time (s)".into(), "flux (nmol/s)".into()],
                    t.iter().zip(&f).map(|(t, f)| vec![fmt_out(*t), fmt_out(*f)]),
                )?;
            }
        }
        let mb = &result.mass_balance;
        write_table(
            &dir.join("mass_balance.csv"),
            &["gas".into(), "injected (nmol)".into(), "in reactor (nmol)".into(), "outflow (nmol)".into()],
            mb.gases.iter().map(|g| vec![g.name.clone(), fmt_out(g.injected), fmt_out(g.in_domain), fmt_out(g.outflow)]),
        )
    }

    /// `thin_data/<species>.csv` in long format.
    pub fn write_thin(&self, result: &SimulationResult) -> Result<()> {
        let dir = self.dir("thin_data")?;
        let c = &result.catalyst;
        for (s, name) in c.species.iter().enumerate() {
            let mut rows = Vec::new();
            for (j, t) in c.times.iter().enumerate() {
                for (i, x) in c.x.iter().enumerate() {
                    rows.push(vec![fmt_out(*x), fmt_out(*t), fmt_out(c.values[s][j][i])]);
                }
            }
            write_table(
                &dir.join(format!("{}.csv", file_stem(name))),
                &["x (cm)".into(), "time (s)".into(), "concentration (nmol/cm3)".into()],
                rows,
            )?;
        }
        Ok(())
    }

    /// `sensitivity/gradient.csv`; `fd` adds a finite-difference column.
    pub fn write_gradient(&self, labels: &[String], units: &[String], value: f64, gradient: &[f64], fd: Option<&[f64]>) -> Result<()> {
        let dir = self.dir("sensitivity")?;
        let mut header = vec!["param".to_string(), "units".into(), "dJ/dk adjoint ((nmol/s)2 per unit)".into()];
        if fd.is_some() {
            header.push("dJ/dk finite difference ((nmol/s)2 per unit)".into());
        }
        write_table(
            &dir.join("gradient.csv"),
            &header,
            (0..labels.len()).map(|i| {
                let mut row = vec![labels[i].clone(), units[i].clone(), fmt_out(gradient[i])];
                if let Some(fd) = fd {
                    row.push(fmt_out(fd[i]));
                }
                row
            }),
        )?;
        write_table(
            &dir.join("objective.csv"),
            &["quantity".into(), "value".into()],
            vec![vec!["J_data ((nmol/s)2)".into(), fmt_out(value)]],
        )
    }

    pub fn write_time_sensitivity(&self, s: &TimeSensitivity) -> Result<()> {
        let dir = self.dir("sensitivity")?;
        for (g, gas) in s.gas_names.iter().enumerate() {
            let header: Vec<String> = std::iter::once("time (s)".to_string())
                .chain(s.labels.iter().map(|l| format!("dF/d{l} (nmol/s per unit)")))
                .collect();
            write_table(
                &dir.join(format!("time_sensitivity_{gas}.csv")),
                &header,
                s.times.iter().enumerate().map(|(n, t)| {
                    std::iter::once(fmt_out(*t)).chain(s.values[g][n].iter().map(|v| fmt_out(*v))).collect()
                }),
            )?;
        }
        Ok(())
    }

    pub fn write_hessian(&self, labels: &[String], h: &HessianResult) -> Result<()> {
        let dir = self.dir("uncertainty_quantification")?;
        let header: Vec<String> = std::iter::once("parameter".to_string()).chain(labels.iter().cloned()).collect();
        write_table(
            &dir.join("hessian.csv"),
            &header,
            labels.iter().zip(&h.matrix).map(|(l, row)| {
                std::iter::once(l.clone()).chain(row.iter().map(|v| fmt_out(*v))).collect()
            }),
        )?;
        write_table(
            &dir.join("hessian_info.csv"),
            &["quantity".into(), "value".into()],
            vec![
                vec!["symmetry defect (-)".into(), fmt_out(h.symmetry_defect)],
                vec!["gradient evaluations (-)".into(), h.gradient_evaluations.to_string()],
            ],
        )
    }

    /// Iterate history, final parameters and per-iterate flux curves.
    /// `fixed` lists the constants held fixed, as (label, value, units).
    pub fn write_fit(&self, report: &FitReport, times: &[f64], gas_names: &[String], fixed: &[(String, f64, String)]) -> Result<()> {
        let dir = self.dir("fitting")?;
        let header: Vec<String> = ["iteration", "J (nmol/s)2", "J_data (nmol/s)2", "J_thermo (kJ/mol)2", "projected gradient norm"]
            .iter()
            .map(|s| s.to_string())
            .chain(report.labels.iter().zip(&report.units).map(|(l, u)| format!("{l} ({u})")))
            .collect();
        write_table(
            &dir.join("iterations.csv"),
            &header,
            report.iterations.iter().map(|it| {
                vec![
                    it.iteration.to_string(),
                    fmt_out(it.objective.total),
                    fmt_out(it.objective.data),
                    fmt_out(it.objective.thermo),
                    fmt_out(it.gradient_norm),
                ]
                .into_iter()
                .chain(it.values.iter().map(|v| fmt_out(*v)))
                .collect()
            }),
        )?;
        write_table(
            &dir.join("final_params.csv"),
            &["param".into(), "value".into(), "units".into(), "fixed".into(), "at_bound".into(), "undetermined".into()],
            (0..report.labels.len())
                .map(|i| {
                    vec![
                        report.labels[i].clone(),
                        fmt_out(report.final_values[i]),
                        report.units[i].clone(),
                        "false".into(),
                        report.at_bound[i].to_string(),
                        report.undetermined[i].to_string(),
                    ]
                })
                .chain(fixed.iter().map(|(l, v, u)| {
                    vec![l.clone(), fmt_out(*v), u.clone(), "true".into(), "false".into(), "false".into()]
                })),
        )?;
        let snaps: Vec<(usize, &Vec<Vec<f64>>)> = report
            .iterations
            .iter()
            .filter_map(|it| it.flux.as_ref().map(|f| (it.iteration, f)))
            .collect();
        if snaps.is_empty() {
            return Ok(());
        }
        for (g, gas) in gas_names.iter().enumerate() {
            let header: Vec<String> = std::iter::once("time (s)".to_string())
                .chain(snaps.iter().map(|(i, _)| format!("iteration {i} (nmol/s)")))
                .collect();
            write_table(
                &dir.join(format!("flux_{gas}.csv")),
                &header,
                times.iter().enumerate().map(|(n, t)| {
                    std::iter::once(fmt_out(*t)).chain(snaps.iter().map(|(_, f)| fmt_out(f[g][n]))).collect()
                }),
            )?;
        }
        Ok(())
    }

    /// Write observed curves as `<folder>/<gas>.csv`, readable by
    /// [`load_experimental`].
    pub fn write_experimental(folder: &Path, data: &ExperimentalCurves) -> Result<()> {
        for c in &data.curves {
            write_table(
                &folder.join(format!("{}.csv", c.gas)),
                &["time (s)".into(), "flux (nmol/s)".into()],
                c.times.iter().zip(&c.flux).map(|(t, f)| vec![fmt_out(*t), fmt_out(*f)]),
            )?;
        }
        Ok(())
    }

    /// Plot data: per pulse one CSV with simulated (and observed) columns per
    /// gas, and one SVG per gas.
    pub fn write_plots(&self, result: &SimulationResult, data: Option<&ExperimentalCurves>, pulse: Option<usize>) -> Result<()> {
        let dir = self.dir("plots")?;
        for p in selected_pulses(result, pulse)? {
            let range = result.pulse_ranges[p].clone();
            let t0 = result.times[range.start];
            let times: Vec<f64> = result.times[range.clone()].to_vec();
            let mut header = vec!["time (s)".to_string()];
            let mut columns: Vec<Vec<f64>> = Vec::new();
            for (g, gas) in result.gas_names.iter().enumerate() {
                let sim = result.outlet_flux[g][range.clone()].to_vec();
                header.push(format!("{gas} simulated (nmol/s)"));
                columns.push(sim.clone());
                let mut series = vec![Series { name: "simulated".into(), x: times.iter().map(|t| t - t0).collect(), y: sim }];
                if let Some(obs) = data.and_then(|d| d.get(gas)) {
                    let interp: Vec<f64> = times.iter().map(|&t| interpolate(&obs.times, &obs.flux, t)).collect();
                    header.push(format!("{gas} experimental (nmol/s)"));
                    columns.push(interp.clone());
                    series.push(Series { name: "experimental".into(), x: series[0].x.clone(), y: interp });
                }
                let svg = line_chart(&format!("{gas}, pulse {}", p + 1), "time (s)", "flux (nmol/s)", &series);
                let path = dir.join(format!("pulse_{}_{gas}.svg", p + 1));
                fs::write(&path, svg).map_err(|e| Error::io(&path, e))?;
            }
            write_table(
                &dir.join(format!("pulse_{}.csv", p + 1)),
                &header,
                times.iter().enumerate().map(|(n, t)| {
                    std::iter::once(fmt_out(t - t0)).chain(columns.iter().map(|c| fmt_out(c[n]))).collect()
                }),
            )?;
        }
        Ok(())
    }

    /// Overlay of a simulated and an analytical normalised curve.
    pub fn write_reference(&self, name: &str, times: &[f64], simulated: &[f64], analytical: &[f64]) -> Result<()> {
        let dir = self.dir("plots")?;
        write_table(
            &dir.join(format!("{name}.csv")),
            &["time (s)".into(), "simulated F/N (1/s)".into(), "analytical F/N (1/s)".into()],
            (0..times.len()).map(|i| vec![fmt_out(times[i]), fmt_out(simulated[i]), fmt_out(analytical[i])]),
        )?;
        let svg = line_chart(
            name,
            "time (s)",
            "F/N (1/s)",
            &[
                Series { name: "simulated".into(), x: times.to_vec(), y: simulated.to_vec() },
                Series { name: "analytical".into(), x: times.to_vec(), y: analytical.to_vec() },
            ],
        );
        let path = dir.join(format!("{name}.svg"));
        fs::write(&path, svg).map_err(|e| Error::io(&path, e))
    }
}

fn selected_pulses(result: &SimulationResult, pulse: Option<usize>) -> Result<Vec<usize>> {
    let n = result.pulse_ranges.len();
    match pulse {
        None => Ok((0..n).collect()),
        Some(p) if p >= 1 && p <= n => Ok(vec![p - 1]),
        Some(p) => Err(Error::Input(format!("pulse {p} does not exist (run has {n} pulses)"))),
    }
}

fn file_stem(species: &str) -> String {
    species.replace('*', "_s")
}

fn interpolate(x: &[f64], y: &[f64], t: f64) -> f64 {
    if x.is_empty() {
        return f64::NAN;
    }
    if t <= x[0] {
        return y[0];
    }
    match x.iter().position(|&v| v >= t) {
        Some(i) => {
            let w = (t - x[i - 1]) / (x[i] - x[i - 1]);
            y[i - 1] * (1.0 - w) + y[i] * w
        }
        None => *y.last().unwrap(),
    }
}

pub struct Series {
    pub name: String,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
}

/// Minimal static SVG line chart.
pub fn line_chart(title: &str, xlabel: &str, ylabel: &str, series: &[Series]) -> String {
    const W: f64 = 640.0;
    const H: f64 = 400.0;
    const M: f64 = 60.0;
    const COLORS: [&str; 4] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd"];
    let finite = |v: &&f64| v.is_finite();
    let xmin = series.iter().flat_map(|s| s.x.iter().filter(finite)).fold(f64::INFINITY, |a, &b| a.min(b));
    let xmax = series.iter().flat_map(|s| s.x.iter().filter(finite)).fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let ymin = series.iter().flat_map(|s| s.y.iter().filter(finite)).fold(0.0f64, |a, &b| a.min(b));
    let ymax = series.iter().flat_map(|s| s.y.iter().filter(finite)).fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let (xmin, xmax) = if xmax > xmin { (xmin, xmax) } else { (0.0, 1.0) };
    let (ymin, ymax) = if ymax > ymin { (ymin, ymax) } else { (0.0, 1.0) };
    let px = |x: f64| M + (x - xmin) / (xmax - xmin) * (W - 2.0 * M);
    let py = |y: f64| H - M - (y - ymin) / (ymax - ymin) * (H - 2.0 * M);

    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#);
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="24" text-anchor="middle" font-family="sans-serif" font-size="16">{}</text>"#, W / 2.0, escape(title));
    let _ = writeln!(
        s,
        r#"<path d="M{M} {} L{M} {} L{} {}" stroke="black" fill="none"/>"#,
        M,
        H - M,
        W - M,
        H - M
    );
    for i in 0..=4 {
        let fx = xmin + (xmax - xmin) * i as f64 / 4.0;
        let fy = ymin + (ymax - ymin) * i as f64 / 4.0;
        let _ = writeln!(s, r#"<text x="{:.1}" y="{}" text-anchor="middle" font-family="sans-serif" font-size="11">{}</text>"#, px(fx), H - M + 16.0, tick(fx));
        let _ = writeln!(s, r#"<text x="{}" y="{:.1}" text-anchor="end" font-family="sans-serif" font-size="11">{}</text>"#, M - 6.0, py(fy) + 4.0, tick(fy));
    }
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle" font-family="sans-serif" font-size="13">{}</text>"#, W / 2.0, H - 14.0, escape(xlabel));
    let _ = writeln!(
        s,
        r#"<text x="16" y="{}" text-anchor="middle" font-family="sans-serif" font-size="13" transform="rotate(-90 16 {})">{}</text>"#,
        H / 2.0,
        H / 2.0,
        escape(ylabel)
    );
    for (k, ser) in series.iter().enumerate() {
        let color = COLORS[k % COLORS.len()];
        let mut pts = String::new();
        for (x, y) in ser.x.iter().zip(&ser.y) {
            if x.is_finite() && y.is_finite() {
                let _ = write!(pts, "{:.2},{:.2} ", px(*x), py(*y));
            }
        }
        let _ = writeln!(s, r#"<polyline points="{}" stroke="{color}" stroke-width="1.5" fill="none"/>"#, pts.trim_end());
        let ly = M + 16.0 * k as f64;
        let _ = writeln!(s, r#"<line x1="{}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="2"/>"#, W - M - 110.0, W - M - 90.0);
        let _ = writeln!(s, r#"<text x="{}" y="{}" font-family="sans-serif" font-size="12">{}</text>"#, W - M - 84.0, ly + 4.0, escape(&ser.name));
    }
    s.push_str("</svg>\n");
    s
}

fn tick(v: f64) -> String {
    if v == 0.0 || (1e-2..1e4).contains(&v.abs()) {
        format!("{}", (v * 1000.0).round() / 1000.0)
    } else {
        format!("{v:.2e}")
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

#[cfg(test)]
mod tests {
    use super::*;

    const EXAMPLE: &str = "\
Reactor Setup,Zone 1,Zone 2,Zone 3
Zone Length,3.0,0.1,2.9
Zone Void,0.4,0.4,0.4
Reactor Radius,1,,
Reactor Temperature,400,,
Mesh Size,200,,
Catalyst Mesh Density,4,,
Output Folder,results,,
Experimental Data Folder,../data,,
Reference Diffusion Inert,13.5,,
Reference Diffusion Catalyst,13.5,,
Reference Temperature,385.6,,
Reference Mass,40,,
,,,
Feed and Surface Composition,,,
,CO,O2,CO2
Intensity,5,5,5
Time,0,0,0
Mass,28,32,44
,,,
,CO*,O*,*
Initial Composition,0,12,12
,,,
Elementary Reactions,,,
CO + * <-> CO*,1e-10,1e-10,
O2 + 2* <-> 2O*,1e-10,1e-10,
CO* + O* <-> CO2 + 2*,1e-10,1e-10,
,,,
Thermodynamic Consistency,,,
r1 + (0.5)*r2 + r3,,,
";

    #[test]
    fn example_file_loads() {
        let def = parse_input(EXAMPLE).unwrap();
        assert_eq!(def.reactor.zone_lengths, [3.0, 0.1, 2.9]);
        assert_eq!(def.reactor.zone_voids, [0.4; 3]);
        assert_eq!(def.feed.len(), 3);
        assert!(def.feed.iter().all(|g| g.intensity == 5.0));
        assert_eq!(def.initial_surface.0[1], ("O*".to_string(), 12.0));
        assert_eq!(def.initial_surface.0[2], ("*".to_string(), 12.0));
        assert_eq!(def.steps.len(), 3);
        assert!(def.steps.iter().all(|s| s.reversible));
        assert_eq!(def.data_folder, Some(PathBuf::from("../data")));
        let mech = def.mechanism().unwrap();
        assert_eq!(mech.thermo_combo().unwrap().terms, vec![(0, 1.0), (1, 0.5), (2, 1.0)]);
    }

    #[test]
    fn reactor_section_alone_is_rejected() {
        let text: String = EXAMPLE.lines().take(13).collect::<Vec<_>>().join("\n");
        let err = parse_input(&text).unwrap_err().to_string();
        assert!(err.contains("missing"), "{err}");
        let only_reactions_missing = EXAMPLE.split("Elementary Reactions").next().unwrap();
        let err = parse_input(only_reactions_missing).unwrap_err().to_string();
        assert!(err.contains("Elementary Reactions"), "{err}");
    }

    #[test]
    fn unknown_key_is_reported_with_row() {
        let text = EXAMPLE.replace("Reactor Radius", "Reactor Radios");
        let err = parse_input(&text).unwrap_err().to_string();
        assert!(err.contains("row 4") && err.contains("Reactor Radios") && err.contains("Reactor Radius"), "{err}");
    }

    #[test]
    fn non_numeric_cell_is_rejected() {
        let text = EXAMPLE.replace("Mesh Size,200", "Mesh Size,lots");
        assert!(parse_input(&text).unwrap_err().to_string().contains("lots"));
    }

    #[test]
    fn species_mismatch_suggests_a_name() {
        let text = EXAMPLE.replace(",CO*,O*,*", ",CO*,O2*,*");
        let err = parse_input(&text).unwrap_err().to_string();
        assert!(err.contains("O*"), "{err}");
    }

    #[test]
    fn sections_in_any_order() {
        let (head, tail) = EXAMPLE.split_at(EXAMPLE.find("Feed and Surface").unwrap());
        let reordered = format!("{tail}\n{head}");
        assert_eq!(parse_input(&reordered).unwrap(), parse_input(EXAMPLE).unwrap());
    }

    #[test]
    fn render_round_trips() {
        let mut def = parse_input(EXAMPLE).unwrap();
        def.thermo.as_mut().unwrap().delta_g_gas = Some(-2.57e5);
        def.simulation_time = 0.75;
        let again = parse_input(&render_input(&def)).unwrap();
        assert_eq!(again, def);
    }

    #[test]
    fn noise_is_seeded() {
        let data = ExperimentalCurves {
            curves: vec![ObservedCurve { gas: "A".into(), times: vec![0.0, 1.0, 2.0], flux: vec![0.0, 2.0, 1.0] }],
            noise_sigma: None,
        };
        let a = add_noise(&data, 0.02, 7).unwrap();
        let b = add_noise(&data, 0.02, 7).unwrap();
        let c = add_noise(&data, 0.02, 8).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_ne!(a.curves[0].flux, data.curves[0].flux);
    }

    #[test]
    fn svg_has_one_polyline_per_series() {
        let s = line_chart(
            "t",
            "x",
            "y",
            &[
                Series { name: "a".into(), x: vec![0.0, 1.0], y: vec![0.0, 1.0] },
                Series { name: "b".into(), x: vec![0.0, 1.0], y: vec![1.0, 0.0] },
            ],
        );
        assert_eq!(s.matches("<polyline").count(), 2);
    }
}
