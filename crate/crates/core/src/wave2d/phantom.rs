//! Synthetic head phantoms: water, an elliptical skull ring and a smooth
//! brain-like interior.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{VelocityModel, WATER_VELOCITY};
use crate::error::Result;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomConfig {
    pub nx: usize,
    pub ny: usize,
    pub dx: f64,
    pub skull_velocity: (f64, f64),
    pub interior_velocity: (f64, f64),
    /// Outer semi-axes as fractions of `min(nx, ny)`.
    pub semi_axis_fraction: (f64, f64),
    /// Ring thickness in cells.
    pub thickness_cells: (f64, f64),
    pub center_jitter_cells: f64,
    /// Largest integer wavenumber present in the smooth fields.
    pub cutoff: usize,
}

impl PhantomConfig {
    pub fn desk(nx: usize, ny: usize, dx: f64) -> Self {
        Self {
            nx,
            ny,
            dx,
            skull_velocity: (2400.0, 3000.0),
            interior_velocity: (1400.0, 1600.0),
            semi_axis_fraction: (0.20, 0.25),
            thickness_cells: (2.0, 3.5),
            center_jitter_cells: 2.0,
            cutoff: 4,
        }
    }
}

/// Random field on an `nx × ny` grid built from cosine modes with integer
/// wavenumbers `|k| ≤ cutoff`, scaled to a maximum magnitude of one. Its
/// discrete Fourier transform vanishes outside the cutoff disc.
pub fn smooth_field<R: Rng + ?Sized>(rng: &mut R, nx: usize, ny: usize, cutoff: usize) -> Vec<f64> {
    let two_pi = 2.0 * std::f64::consts::PI;
    let c = cutoff as i64;
    let mut modes = Vec::new();
    for kx in 0..=c {
        for ky in -c..=c {
            if kx * kx + ky * ky > c * c || (kx == 0 && ky <= 0) {
                continue;
            }
            let k = ((kx * kx + ky * ky) as f64).sqrt();
            let amp = rng.sample::<f64, _>(StandardNormal) / (1.0 + k);
            let phase = rng.random::<f64>() * two_pi;
            modes.push((kx as f64, ky as f64, amp, phase));
        }
    }
    let mut f = vec![0.0; nx * ny];
    for ix in 0..nx {
        for iy in 0..ny {
            let (px, py) = (ix as f64 / nx as f64, iy as f64 / ny as f64);
            f[ix * ny + iy] = modes
                .iter()
                .map(|&(kx, ky, a, p)| a * (two_pi * (kx * px + ky * py) + p).cos())
                .sum();
        }
    }
    let peak = f.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak > 0.0 {
        f.iter_mut().for_each(|v| *v /= peak);
    }
    f
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, (lo, hi): (f64, f64)) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}

pub fn make_phantom<R: Rng + ?Sized>(rng: &mut R, cfg: &PhantomConfig) -> Result<VelocityModel> {
    let (nx, ny) = (cfg.nx, cfg.ny);
    let size = nx.min(ny) as f64;
    let a = uniform(rng, cfg.semi_axis_fraction) * size;
    let b = uniform(rng, cfg.semi_axis_fraction) * size;
    let t = uniform(rng, cfg.thickness_cells);
    let theta = rng.random::<f64>() * std::f64::consts::PI;
    let j = cfg.center_jitter_cells;
    let cx = (nx - 1) as f64 / 2.0 + uniform(rng, (-j, j));
    let cy = (ny - 1) as f64 / 2.0 + uniform(rng, (-j, j));
    let brain = smooth_field(rng, nx, ny, cfg.cutoff);
    let bone = smooth_field(rng, nx, ny, cfg.cutoff);

    let (sin, cos) = theta.sin_cos();
    let inside = |dx: f64, dy: f64, a: f64, b: f64| {
        let u = (dx * cos + dy * sin) / a;
        let v = (-dx * sin + dy * cos) / b;
        u * u + v * v <= 1.0
    };
    let (blo, bhi) = cfg.interior_velocity;
    let (slo, shi) = cfg.skull_velocity;
    let mut values = vec![WATER_VELOCITY; nx * ny];
    for ix in 0..nx {
        for iy in 0..ny {
            let (dx, dy) = (ix as f64 - cx, iy as f64 - cy);
            let i = ix * ny + iy;
            if inside(dx, dy, a - t, b - t) {
                values[i] = 0.5 * (blo + bhi) + 0.5 * (bhi - blo) * brain[i];
            } else if inside(dx, dy, a, b) {
                values[i] = 0.5 * (slo + shi) + 0.5 * (shi - slo) * bone[i];
            }
        }
    }
    VelocityModel::new(nx, ny, cfg.dx, values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::random::seeded;

    #[test]
    fn values_bounded_over_many_seeds() {
        let cfg = PhantomConfig::desk(32, 32, 2e-3);
        for seed in 0..1000 {
            let m = make_phantom(&mut seeded(seed), &cfg).unwrap();
            assert!(m.values.iter().all(|v| (1300.0..=3200.0).contains(v)));
            assert!(m.values.iter().any(|&v| v >= 2400.0), "seed {seed} has no skull");
        }
    }

    #[test]
    fn seeds_change_geometry() {
        let cfg = PhantomConfig::desk(64, 64, 2e-3);
        let a = make_phantom(&mut seeded(1), &cfg).unwrap();
        let b = make_phantom(&mut seeded(2), &cfg).unwrap();
        let ring = |m: &VelocityModel| m.values.iter().map(|&v| v >= 2400.0).collect::<Vec<_>>();
        assert_ne!(ring(&a), ring(&b));
        assert_eq!(a, make_phantom(&mut seeded(1), &cfg).unwrap());
    }

    #[test]
    fn smooth_field_is_band_limited() {
        let (nx, ny, cutoff) = (24usize, 20usize, 3usize);
        let f = smooth_field(&mut seeded(9), nx, ny, cutoff);
        let two_pi = 2.0 * std::f64::consts::PI;
        let (mut inside, mut outside) = (0.0, 0.0);
        for kx in 0..nx {
            for ky in 0..ny {
                let (mut re, mut im) = (0.0, 0.0);
                for ix in 0..nx {
                    for iy in 0..ny {
                        let ph = two_pi * (kx as f64 * ix as f64 / nx as f64 + ky as f64 * iy as f64 / ny as f64);
                        re += f[ix * ny + iy] * ph.cos();
                        im -= f[ix * ny + iy] * ph.sin();
                    }
                }
                let p = re * re + im * im;
                let wx = kx.min(nx - kx) as f64;
                let wy = ky.min(ny - ky) as f64;
                if (wx * wx + wy * wy).sqrt() <= cutoff as f64 {
                    inside += p;
                } else {
                    outside += p;
                }
            }
        }
        assert!(inside > 0.0);
        assert!(outside <= 1e-20 * inside, "leak {outside:e} vs {inside:e}");
    }

    #[test]
    fn smooth_field_peak_is_one() {
        let f = smooth_field(&mut seeded(3), 32, 32, 4);
        let peak = f.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!((peak - 1.0).abs() < 1e-15);
    }
}
