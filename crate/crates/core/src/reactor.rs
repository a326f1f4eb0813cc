//! Three-zone reactor geometry, Knudsen diffusivities and the catalyst-refined
//! spatial mesh.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::mechanism::Mechanism;

/// Geometry and transport reference data of a TAP micro-reactor.
#[derive(Debug, Clone, PartialEq)]
pub struct ReactorSpec {
    /// Inert, catalyst and inert zone lengths (cm).
    pub zone_lengths: [f64; 3],
    /// Void fraction of each zone.
    pub zone_voids: [f64; 3],
    /// cm
    pub radius: f64,
    /// K
    pub temperature: f64,
    /// cm²/s
    pub ref_diffusion_inert: f64,
    /// cm²/s
    pub ref_diffusion_catalyst: f64,
    /// K
    pub ref_temperature: f64,
    /// amu
    pub ref_mass: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Zone {
    Inlet,
    Catalyst,
    Outlet,
}

impl Zone {
    pub fn ordinal(self) -> usize {
        match self {
            Zone::Inlet => 0,
            Zone::Catalyst => 1,
            Zone::Outlet => 2,
        }
    }
}

impl ReactorSpec {
    /// Check the geometric invariants; returns advisory warnings.
    ///
    /// Either inert zone may have zero length (a fully packed reactor), the
    /// catalyst zone may not.
    pub fn validate(&self) -> Result<Vec<String>> {
        let [l1, l2, l3] = self.zone_lengths;
        if !(l1 >= 0.0 && l3 >= 0.0 && l2 > 0.0) || !self.length().is_finite() {
            return Err(Error::Reactor(format!(
                "zone lengths must be non-negative with a positive catalyst zone, got {:?}",
                self.zone_lengths
            )));
        }
        for (z, eps) in self.zone_voids.iter().enumerate() {
            if !(*eps > 0.0 && *eps < 1.0) {
                return Err(Error::Reactor(format!(
                    "void fraction of zone {} must lie in (0, 1), got {eps}",
                    z + 1
                )));
            }
        }
        for (what, v) in [
            ("radius", self.radius),
            ("temperature", self.temperature),
            ("reference diffusion (inert)", self.ref_diffusion_inert),
            ("reference diffusion (catalyst)", self.ref_diffusion_catalyst),
            ("reference temperature", self.ref_temperature),
            ("reference mass", self.ref_mass),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Reactor(format!("{what} must be positive, got {v}")));
            }
        }
        let mut warnings = Vec::new();
        if self.length() < 3.5 * self.radius {
            let msg = format!(
                "reactor length {} cm is below 3.5 radii ({} cm); the 1D model may be inaccurate",
                self.length(),
                3.5 * self.radius
            );
            warnings.push(msg);
        }
        Ok(warnings)
    }

    pub fn length(&self) -> f64 {
        self.zone_lengths.iter().sum()
    }

    /// Cross-sectional area πR² (cm²).
    pub fn area(&self) -> f64 {
        PI * self.radius * self.radius
    }

    /// Catalyst zone `[L1, L1 + L2]` (cm).
    pub fn catalyst_bounds(&self) -> (f64, f64) {
        let l1 = self.zone_lengths[0];
        (l1, l1 + self.zone_lengths[1])
    }

    pub fn void(&self, zone: Zone) -> f64 {
        self.zone_voids[zone.ordinal()]
    }

    /// Knudsen diffusivities of every gas in `mech`, per zone.
    pub fn diffusion_table(&self, mech: &Mechanism) -> DiffusionTable {
        let values = mech.species()[..mech.n_gas()]
            .iter()
            .map(|s| {
                let m = s.mass.expect("gases carry a mass");
                let inert = knudsen_diffusion(
                    self.ref_diffusion_inert,
                    self.ref_mass,
                    self.ref_temperature,
                    m,
                    self.temperature,
                );
                let cat = knudsen_diffusion(
                    self.ref_diffusion_catalyst,
                    self.ref_mass,
                    self.ref_temperature,
                    m,
                    self.temperature,
                );
                [inert, cat, inert]
            })
            .collect();
        DiffusionTable { values }
    }
}

/// Knudsen scaling `D = D_ref·sqrt(m_ref·T / (m·T_ref))`.
pub fn knudsen_diffusion(d_ref: f64, m_ref: f64, t_ref: f64, m_gas: f64, t: f64) -> f64 {
    d_ref * ((m_ref * t) / (m_gas * t_ref)).sqrt()
}

/// `values[gas][zone]`, cm²/s.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionTable {
    pub values: Vec<[f64; 3]>,
}

impl DiffusionTable {
    pub fn get(&self, gas: usize, zone: Zone) -> f64 {
        self.values[gas][zone.ordinal()]
    }
}

/// Spatial mesh: uniform in the inert zones, bisected `catalyst_density`
/// times inside the catalyst zone.
#[derive(Debug, Clone, PartialEq)]
pub struct Mesh {
    pub nodes: Vec<f64>,
    pub base_size: usize,
    pub catalyst_density: u32,
    pub cell_zones: Vec<Zone>,
    pub node_zones: Vec<Zone>,
    /// Catalyst zone (cm).
    pub catalyst_bounds: (f64, f64),
}

impl Mesh {
    pub fn n_cells(&self) -> usize {
        self.nodes.len() - 1
    }

    pub fn width(&self, cell: usize) -> f64 {
        self.nodes[cell + 1] - self.nodes[cell]
    }

    pub fn catalyst_cells(&self) -> usize {
        self.cell_zones.iter().filter(|z| **z == Zone::Catalyst).count()
    }

    pub fn length(&self) -> f64 {
        *self.nodes.last().unwrap()
    }
}

/// Build the refined mesh for `spec`.
///
/// `base_size` cells cover the two inert zones at (nearly) uniform spacing
/// `h`; the catalyst zone gets `max(1, round(L2/h))` cells of its own, each
/// bisected `catalyst_density` times, so every zone boundary is a node. With
/// no inert length the base cells cover the catalyst zone instead.
pub fn build_mesh(spec: &ReactorSpec, base_size: usize, catalyst_density: u32) -> Result<Mesh> {
    if base_size < 10 {
        return Err(Error::Reactor(format!(
            "mesh size must be at least 10, got {base_size}"
        )));
    }
    if catalyst_density > 20 {
        return Err(Error::Reactor(format!(
            "catalyst mesh density {catalyst_density} is unreasonably large"
        )));
    }
    let [l1, l2, l3] = spec.zone_lengths;
    let inert = l1 + l3;
    let (n1, n2, n3) = if inert > 0.0 {
        let h = inert / base_size as f64;
        let mut n1 = (base_size as f64 * l1 / inert).round() as usize;
        if l1 > 0.0 {
            n1 = n1.max(1);
        }
        if l3 > 0.0 {
            n1 = n1.min(base_size - 1);
        }
        let n2 = ((l2 / h).round() as usize).max(1);
        (n1, n2, base_size - n1)
    } else {
        (0, base_size, 0)
    };
    let per_cell = 1usize << catalyst_density;
    let n_cat = n2 * per_cell;

    let mut nodes = Vec::with_capacity(n1 + n_cat + n3 + 1);
    let mut cell_zones = Vec::with_capacity(n1 + n_cat + n3);
    let mut push_zone = |start: f64, len: f64, n: usize, zone: Zone, nodes: &mut Vec<f64>| {
        for c in 0..n {
            nodes.push(start + len * c as f64 / n as f64);
            cell_zones.push(zone);
        }
    };
    push_zone(0.0, l1, n1, Zone::Inlet, &mut nodes);
    push_zone(l1, l2, n_cat, Zone::Catalyst, &mut nodes);
    push_zone(l1 + l2, l3, n3, Zone::Outlet, &mut nodes);
    nodes.push(spec.length());

    let node_zones = (0..nodes.len())
        .map(|i| {
            let left = i.checked_sub(1).map(|c| cell_zones[c]);
            let right = cell_zones.get(i).copied();
            if left == Some(Zone::Catalyst) || right == Some(Zone::Catalyst) {
                Zone::Catalyst
            } else {
                left.or(right).unwrap()
            }
        })
        .collect();

    let mesh = Mesh {
        nodes,
        base_size,
        catalyst_density,
        cell_zones,
        node_zones,
        catalyst_bounds: (l1, l1 + l2),
    };
    if let Some(c) = (0..mesh.n_cells()).find(|&c| !(mesh.width(c) > 0.0)) {
        return Err(Error::DegenerateCell { cell: c, width: mesh.width(c) });
    }
    Ok(mesh)
}
