use serde::{Deserialize, Serialize};

use super::{
    adjoint_state_gradient, circle_mask, linearized_forward, misfit_and_gradient, solve_forward, tone_burst,
    AcquisitionGeometry, ShotRecord, SimulationConfig, SimulationRole, ToneBurst, VelocityModel, MAX_VELOCITY,
    MIN_VELOCITY, WATER_VELOCITY,
};
use crate::error::{Error, Result};
use crate::operators::{norm2, ForwardProblem, SolveCounter};
use crate::random::{normal_vec, SeededRng};

/// Ultrasound ring imaging as a [`ForwardProblem`].
///
/// Observations are simulated with a finer stencil and a finer time step than
/// the inversion-side operator and then decimated to the inversion sampling,
/// so synthetic data never come from the operator being inverted.
#[derive(Debug)]
pub struct WaveProblem {
    name: String,
    pub nx: usize,
    pub ny: usize,
    pub dx: f64,
    pub geom: AcquisitionGeometry,
    pub obs_cfg: SimulationConfig,
    pub inv_cfg: SimulationConfig,
    obs_wavelet: Vec<f64>,
    inv_wavelet: Vec<f64>,
    ratio: usize,
    mask: Vec<f64>,
    snr_db: f64,
    noise_std: f64,
    counter: SolveCounter,
}

/// Builds the problem and checks that `obs_cfg` is strictly finer than
/// `inv_cfg`: higher stencil order and a time step that divides the
/// inversion step an integer number of times.
pub fn as_forward_problem(
    (nx, ny, dx): (usize, usize, f64),
    geom: AcquisitionGeometry,
    burst: ToneBurst,
    obs_cfg: SimulationConfig,
    inv_cfg: SimulationConfig,
) -> Result<WaveProblem> {
    if obs_cfg.role != SimulationRole::Observation || inv_cfg.role != SimulationRole::Inversion {
        return Err(Error::Config("observation and inversion configs have the wrong roles".into()));
    }
    if obs_cfg.stencil_order <= inv_cfg.stencil_order || obs_cfg.dt >= inv_cfg.dt {
        return Err(Error::Config(format!(
            "observation config (order {}, dt {:e}) must be strictly finer than inversion config (order {}, dt {:e})",
            obs_cfg.stencil_order, obs_cfg.dt, inv_cfg.stencil_order, inv_cfg.dt
        )));
    }
    let r = inv_cfg.dt / obs_cfg.dt;
    let ratio = r.round() as usize;
    if (r - ratio as f64).abs() > 1e-9 * r {
        return Err(Error::Config(format!("time-step ratio {r} is not an integer")));
    }
    obs_cfg.validate(dx, MAX_VELOCITY)?;
    inv_cfg.validate(dx, MAX_VELOCITY)?;
    geom.validate(nx, ny, dx)?;
    // grid checks
    VelocityModel::homogeneous(nx, ny, dx, WATER_VELOCITY)?;

    let nt = inv_cfg.steps(geom.record_time);
    let inv_wavelet = tone_burst(burst.center_freq, burst.cycles, inv_cfg.dt, nt)?;
    let obs_wavelet = tone_burst(burst.center_freq, burst.cycles, obs_cfg.dt, nt * ratio)?;
    let mut problem = WaveProblem {
        name: format!("wave{nx}x{ny}"),
        nx,
        ny,
        dx,
        geom,
        obs_cfg,
        inv_cfg,
        obs_wavelet,
        inv_wavelet,
        ratio,
        mask: vec![1.0; nx * ny],
        snr_db: 35.0,
        noise_std: 0.0,
        counter: SolveCounter::default(),
    };
    problem.calibrate_noise(&vec![WATER_VELOCITY; nx * ny])?;
    Ok(problem)
}

impl WaveProblem {
    pub fn nt(&self) -> usize {
        self.inv_wavelet.len()
    }

    pub fn snr_db(&self) -> f64 {
        self.snr_db
    }

    pub fn mask(&self) -> &[f64] {
        &self.mask
    }

    pub fn with_mask(mut self, mask: Vec<f64>) -> Result<Self> {
        crate::error::check_len("mask", self.nx * self.ny, mask.len())?;
        self.mask = mask;
        Ok(self)
    }

    pub fn with_snr_db(mut self, snr_db: f64) -> Result<Self> {
        if !snr_db.is_finite() {
            return Err(Error::Config("SNR must be finite".into()));
        }
        let old = self.snr_db;
        self.snr_db = snr_db;
        self.noise_std *= 10f64.powf((old - snr_db) / 20.0);
        Ok(self)
    }

    /// Sets the nominal per-sample noise level to the one implied by the SNR
    /// on observations of `reference`.
    pub fn calibrate_noise(&mut self, reference: &[f64]) -> Result<()> {
        let clean = self.observe_kernel(reference)?;
        self.noise_std = norm2(&clean) * 10f64.powf(-self.snr_db / 20.0) / (clean.len() as f64).sqrt();
        Ok(())
    }

    fn model(&self, x: &[f64]) -> Result<VelocityModel> {
        VelocityModel::new(self.nx, self.ny, self.dx, x.to_vec())
    }

    fn record(&self, traces: Vec<f64>) -> ShotRecord {
        ShotRecord {
            n_sources: self.geom.n_sources(),
            nt: self.nt(),
            n_receivers: self.geom.n_receivers(),
            dt: self.inv_cfg.dt,
            traces,
        }
    }

    /// Inversion-side clean data, as a shot record.
    pub fn shots(&self, x: &[f64]) -> Result<ShotRecord> {
        solve_forward(&self.model(x)?, &self.geom, &self.inv_wavelet, &self.inv_cfg)
    }
}

/// Desk-scale defaults, overridable from configuration files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DeskConfig {
    pub nx: usize,
    pub ny: usize,
    pub dx: f64,
    pub n_sources: usize,
    pub n_receivers: usize,
    pub ring_radius_cells: f64,
    pub center_freq: f64,
    pub cycles: u32,
    pub obs_order: usize,
    pub inv_order: usize,
    pub dt_ratio: usize,
    pub boundary: usize,
    pub snr_db: f64,
    pub mask_fraction: f64,
    /// Record length as a multiple of the travel time across the ring in water.
    pub record_factor: f64,
}

impl Default for DeskConfig {
    fn default() -> Self {
        Self {
            nx: 64,
            ny: 64,
            dx: 2e-3,
            n_sources: 4,
            n_receivers: 32,
            ring_radius_cells: 21.0,
            center_freq: 100e3,
            cycles: 3,
            obs_order: 8,
            inv_order: 4,
            dt_ratio: 2,
            boundary: 10,
            snr_db: 35.0,
            mask_fraction: 0.3,
            record_factor: 1.5,
        }
    }
}

impl DeskConfig {
    pub fn build(&self) -> Result<WaveProblem> {
        let inv_dt = SimulationConfig::max_dt(self.inv_order, self.dx, MAX_VELOCITY)?;
        if self.dt_ratio < 1 {
            return Err(Error::Config("dt_ratio must be at least 1".into()));
        }
        let radius = self.ring_radius_cells * self.dx;
        let record_time = self.record_factor * 2.0 * radius / WATER_VELOCITY;
        let geom = AcquisitionGeometry::ring(self.nx, self.ny, self.dx, self.n_sources, self.n_receivers, radius, record_time)?;
        let obs = SimulationConfig {
            stencil_order: self.obs_order,
            dt: inv_dt / self.dt_ratio as f64,
            boundary: self.boundary,
            role: SimulationRole::Observation,
        };
        let inv = SimulationConfig {
            stencil_order: self.inv_order,
            dt: inv_dt,
            boundary: self.boundary,
            role: SimulationRole::Inversion,
        };
        let burst = ToneBurst {
            center_freq: self.center_freq,
            cycles: self.cycles,
        };
        let mask = circle_mask(self.nx, self.ny, self.mask_fraction * self.nx.min(self.ny) as f64);
        as_forward_problem((self.nx, self.ny, self.dx), geom, burst, obs, inv)?
            .with_snr_db(self.snr_db)?
            .with_mask(mask)
    }
}

impl ForwardProblem for WaveProblem {
    fn name(&self) -> &str {
        &self.name
    }

    fn dim_x(&self) -> usize {
        self.nx * self.ny
    }

    fn dim_y(&self) -> usize {
        self.geom.n_sources() * self.nt() * self.geom.n_receivers()
    }

    fn noise_std(&self) -> f64 {
        self.noise_std
    }

    fn counter(&self) -> &SolveCounter {
        &self.counter
    }

    fn forward_kernel(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.shots(x)?.traces)
    }

    fn observe_kernel(&self, x: &[f64]) -> Result<Vec<f64>> {
        let fine = solve_forward(&self.model(x)?, &self.geom, &self.obs_wavelet, &self.obs_cfg)?;
        let (ns, nr, nt) = (fine.n_sources, fine.n_receivers, self.nt());
        let mut out = Vec::with_capacity(ns * nt * nr);
        for s in 0..ns {
            for k in 0..nt {
                let t = (k + 1) * self.ratio - 1;
                let start = (s * fine.nt + t) * nr;
                out.extend_from_slice(&fine.traces[start..start + nr]);
            }
        }
        Ok(out)
    }

    fn jacobian_kernel(&self, x0: &[f64], dx: &[f64]) -> Result<Vec<f64>> {
        Ok(linearized_forward(&self.model(x0)?, &self.geom, &self.inv_wavelet, &self.inv_cfg, dx)?.traces)
    }

    fn adjoint_kernel(&self, x0: &[f64], r: &[f64]) -> Result<Vec<f64>> {
        let residual = self.record(r.to_vec());
        adjoint_state_gradient(&self.model(x0)?, &self.geom, &self.inv_wavelet, &self.inv_cfg, &residual)
    }

    fn misfit_gradient_kernel(&self, x0: &[f64], y: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let observed = self.record(y.to_vec());
        let (r, g) = misfit_and_gradient(&self.model(x0)?, &self.geom, &self.inv_wavelet, &self.inv_cfg, &observed)?;
        Ok((r.traces, g))
    }

    /// White noise rescaled so the record has exactly the configured SNR.
    fn add_noise(&self, data: &mut [f64], rng: &mut SeededRng) {
        let noise = normal_vec(rng, data.len());
        let signal = norm2(data);
        let scale = if signal > 0.0 {
            signal * 10f64.powf(-self.snr_db / 20.0) / norm2(&noise)
        } else {
            self.noise_std
        };
        for (d, n) in data.iter_mut().zip(&noise) {
            *d += scale * n;
        }
    }

    fn condition_gradient(&self, g: &mut [f64]) {
        for (v, m) in g.iter_mut().zip(&self.mask) {
            *v *= m;
        }
    }

    fn project(&self, x: &mut [f64]) {
        for v in x.iter_mut() {
            *v = v.clamp(MIN_VELOCITY, MAX_VELOCITY);
        }
    }
}
