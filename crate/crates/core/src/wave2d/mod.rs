//! Desk-scale 2-D acoustic wave modelling.
//!
//! The constant-density acoustic equation `(1/c²) u_tt - ∇²u = q` is stepped
//! with second-order leapfrog in time and an even-order central stencil in
//! space. Gradients with respect to velocity are the exact discrete adjoint of
//! the stepper, so dot tests close to round-off.

mod mask;
mod phantom;
mod problem;
mod solver;
mod source;
pub mod stencil;

use serde::{Deserialize, Serialize};

pub use mask::{apply_gradient_mask, circle_mask};
pub use phantom::{make_phantom, smooth_field, PhantomConfig};
pub use problem::{as_forward_problem, DeskConfig, WaveProblem};
pub use solver::{adjoint_state_gradient, linearized_forward, misfit_and_gradient, solve_forward};
pub use source::{tone_burst, ToneBurst};

use crate::error::{Error, Result};

pub const MIN_VELOCITY: f64 = 1300.0;
pub const MAX_VELOCITY: f64 = 3200.0;
pub const WATER_VELOCITY: f64 = 1500.0;

/// Gridded acoustic velocity in m/s, row-major with `iy` fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct VelocityModel {
    pub nx: usize,
    pub ny: usize,
    pub dx: f64,
    pub values: Vec<f64>,
}

impl VelocityModel {
    pub fn new(nx: usize, ny: usize, dx: f64, values: Vec<f64>) -> Result<Self> {
        if nx < 16 || ny < 16 {
            return Err(Error::Config(format!("grid {nx}x{ny} is smaller than 16x16")));
        }
        if !(dx > 0.0) {
            return Err(Error::Config("grid spacing must be positive".into()));
        }
        if values.len() != nx * ny {
            return Err(Error::shape("VelocityModel values", nx * ny, values.len()));
        }
        if let Some(v) = values
            .iter()
            .find(|v| !(MIN_VELOCITY..=MAX_VELOCITY).contains(*v))
        {
            return Err(Error::Config(format!(
                "velocity {v} outside [{MIN_VELOCITY}, {MAX_VELOCITY}] m/s"
            )));
        }
        Ok(Self { nx, ny, dx, values })
    }

    pub fn homogeneous(nx: usize, ny: usize, dx: f64, c: f64) -> Result<Self> {
        Self::new(nx, ny, dx, vec![c; nx * ny])
    }

    pub fn max_velocity(&self) -> f64 {
        self.values.iter().cloned().fold(f64::MIN, f64::max)
    }
}

/// Ring of transducers recorded for `record_time` seconds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AcquisitionGeometry {
    pub sources: Vec<(f64, f64)>,
    pub receivers: Vec<(f64, f64)>,
    pub record_time: f64,
    pub ring_center: (f64, f64),
    pub ring_radius: f64,
}

impl AcquisitionGeometry {
    /// Sources and receivers evenly spaced on one circle around the grid
    /// centre; receivers are offset by half a spacing from angle zero.
    pub fn ring(nx: usize, ny: usize, dx: f64, n_sources: usize, n_receivers: usize, radius: f64, record_time: f64) -> Result<Self> {
        let center = ((nx - 1) as f64 * dx / 2.0, (ny - 1) as f64 * dx / 2.0);
        let on_ring = |k: usize, n: usize, offset: f64| {
            let a = 2.0 * std::f64::consts::PI * (k as f64 + offset) / n as f64;
            (center.0 + radius * a.cos(), center.1 + radius * a.sin())
        };
        let geom = Self {
            sources: (0..n_sources).map(|k| on_ring(k, n_sources, 0.0)).collect(),
            receivers: (0..n_receivers).map(|k| on_ring(k, n_receivers, 0.5)).collect(),
            record_time,
            ring_center: center,
            ring_radius: radius,
        };
        geom.validate(nx, ny, dx)?;
        Ok(geom)
    }

    pub fn validate(&self, nx: usize, ny: usize, dx: f64) -> Result<()> {
        if self.sources.is_empty() || self.receivers.is_empty() {
            return Err(Error::Config("geometry needs at least one source and one receiver".into()));
        }
        if !(self.record_time > 0.0) {
            return Err(Error::Config("record time must be positive".into()));
        }
        for &p in self.sources.iter().chain(&self.receivers) {
            cell_of(p, nx, ny, dx)?;
        }
        Ok(())
    }

    pub fn n_sources(&self) -> usize {
        self.sources.len()
    }

    pub fn n_receivers(&self) -> usize {
        self.receivers.len()
    }
}

/// Nearest grid cell `(ix, iy)` of a physical position.
pub(crate) fn cell_of(p: (f64, f64), nx: usize, ny: usize, dx: f64) -> Result<(usize, usize)> {
    let ix = (p.0 / dx).round();
    let iy = (p.1 / dx).round();
    if ix < 0.0 || iy < 0.0 || ix >= nx as f64 || iy >= ny as f64 {
        return Err(Error::Config(format!("position ({}, {}) lies outside the grid", p.0, p.1)));
    }
    Ok((ix as usize, iy as usize))
}

/// Pressure traces, laid out `source × time × receiver`.
#[derive(Debug, Clone, PartialEq)]
pub struct ShotRecord {
    pub n_sources: usize,
    pub nt: usize,
    pub n_receivers: usize,
    pub dt: f64,
    pub traces: Vec<f64>,
}

impl ShotRecord {
    pub fn zeros(n_sources: usize, nt: usize, n_receivers: usize, dt: f64) -> Self {
        Self {
            n_sources,
            nt,
            n_receivers,
            dt,
            traces: vec![0.0; n_sources * nt * n_receivers],
        }
    }

    pub fn trace(&self, source: usize, receiver: usize) -> Vec<f64> {
        (0..self.nt)
            .map(|t| self.traces[(source * self.nt + t) * self.n_receivers + receiver])
            .collect()
    }

    pub fn shot(&self, source: usize) -> &[f64] {
        let len = self.nt * self.n_receivers;
        &self.traces[source * len..(source + 1) * len]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SimulationRole {
    Observation,
    Inversion,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationConfig {
    pub stencil_order: usize,
    pub dt: f64,
    /// Width of the exponential sponge in cells; zero disables damping.
    pub boundary: usize,
    pub role: SimulationRole,
}

/// `0.7 dx / (c_max √2)`.
pub fn cfl_limit(dx: f64, c_max: f64) -> f64 {
    0.7 * dx / (c_max * std::f64::consts::SQRT_2)
}

impl SimulationConfig {
    /// Largest stable time step for this stencil: the CFL bound, further
    /// reduced when the leapfrog limit of a wide stencil is tighter.
    pub fn max_dt(stencil_order: usize, dx: f64, c_max: f64) -> Result<f64> {
        let w = stencil::second_derivative_weights(stencil_order)?;
        let leapfrog = 0.95 * 2.0 * dx / (c_max * (2.0 * stencil::nyquist_symbol(&w)).sqrt());
        Ok(cfl_limit(dx, c_max).min(leapfrog))
    }

    pub fn validate(&self, dx: f64, c_max: f64) -> Result<()> {
        let limit = Self::max_dt(self.stencil_order, dx, c_max)?;
        if !(self.dt > 0.0) || self.dt > limit * (1.0 + 1e-12) {
            return Err(Error::Config(format!(
                "dt = {:e} s violates the stability bound {limit:e} s (order {}, c_max {c_max})",
                self.dt, self.stencil_order
            )));
        }
        Ok(())
    }

    pub fn steps(&self, record_time: f64) -> usize {
        (record_time / self.dt).ceil() as usize
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn velocity_bounds_enforced() {
        assert!(VelocityModel::homogeneous(32, 32, 1e-3, 1200.0).is_err());
        assert!(VelocityModel::homogeneous(8, 32, 1e-3, 1500.0).is_err());
        assert!(VelocityModel::homogeneous(16, 16, 1e-3, 3200.0).is_ok());
    }

    #[test]
    fn ring_geometry_inside_grid() {
        let g = AcquisitionGeometry::ring(64, 64, 2e-3, 4, 32, 42e-3, 8e-5).unwrap();
        assert_eq!(g.n_sources(), 4);
        assert_eq!(g.n_receivers(), 32);
        assert!(AcquisitionGeometry::ring(64, 64, 2e-3, 4, 32, 80e-3, 8e-5).is_err());
    }

    #[test]
    fn wide_stencils_tighten_the_bound() {
        let c = cfl_limit(2e-3, 3200.0);
        assert_eq!(SimulationConfig::max_dt(4, 2e-3, 3200.0).unwrap(), c);
        assert_eq!(SimulationConfig::max_dt(8, 2e-3, 3200.0).unwrap(), c);
        assert!(SimulationConfig::max_dt(16, 2e-3, 3200.0).unwrap() < c);
    }
}
