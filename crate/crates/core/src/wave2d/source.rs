use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Transducer signature: a `cycles`-cycle burst at `center_freq` Hz.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ToneBurst {
    pub center_freq: f64,
    pub cycles: u32,
}

impl ToneBurst {
    pub fn duration(&self) -> f64 {
        self.cycles as f64 / self.center_freq
    }

    pub fn sample(&self, dt: f64, nt: usize) -> Result<Vec<f64>> {
        tone_burst(self.center_freq, self.cycles, dt, nt)
    }
}

/// Hann-windowed sinusoid spanning `cycles / center_freq` seconds, sampled at
/// `t = n dt` and zero-padded to `nt` samples. The carrier phase is aligned so
/// that its crest coincides with the window centre.
pub fn tone_burst(center_freq: f64, cycles: u32, dt: f64, nt: usize) -> Result<Vec<f64>> {
    if cycles == 0 {
        return Err(Error::Config("tone burst needs at least one cycle".into()));
    }
    if !(center_freq > 0.0 && dt > 0.0) {
        return Err(Error::Config("tone burst frequency and dt must be positive".into()));
    }
    if center_freq * dt >= 0.5 {
        return Err(Error::Config(format!(
            "tone burst at {center_freq} Hz is above Nyquist for dt = {dt:e} s"
        )));
    }
    let duration = cycles as f64 / center_freq;
    let center = 0.5 * duration;
    let two_pi = 2.0 * std::f64::consts::PI;
    Ok((0..nt)
        .map(|n| {
            let t = n as f64 * dt;
            if t > duration {
                return 0.0;
            }
            let envelope = 0.5 * (1.0 - (two_pi * t / duration).cos());
            envelope * (two_pi * center_freq * (t - center)).cos()
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn three_cycles_at_400khz_last_7_5_us() {
        let dt = 2.5e-8;
        let w = tone_burst(400e3, 3, dt, 1000).unwrap();
        let last = w.iter().rposition(|v| v.abs() > 0.0).unwrap();
        let support = last as f64 * dt;
        assert!((support - 7.5e-6).abs() <= dt * (1.0 + 1e-9), "support {support}");
    }

    #[test]
    fn support_endpoints_vanish() {
        let f = 100e3;
        let dt = (3.0 / f) / 300.0;
        let w = tone_burst(f, 3, dt, 400).unwrap();
        let peak = w.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(w[0].abs() <= 1e-6 * peak);
        assert!(w[300].abs() <= 1e-6 * peak);
    }

    #[test]
    fn peak_is_unit_at_window_centre() {
        let f = 100e3;
        let dt = 1.3e-7;
        let w = tone_burst(f, 3, dt, 400).unwrap();
        let (imax, vmax) = w
            .iter()
            .enumerate()
            .fold((0, 0.0f64), |(bi, bv), (i, &v)| if v.abs() > bv { (i, v.abs()) } else { (bi, bv) });
        let centre = 1.5e-5 / dt;
        assert!((imax as f64 - centre).abs() <= 0.5 + 1e-9);
        // closed form at that sample
        let t = imax as f64 * dt;
        let two_pi = 2.0 * std::f64::consts::PI;
        let closed = 0.5 * (1.0 - (two_pi * t / 3e-5).cos()) * (two_pi * f * (t - 1.5e-5)).cos();
        assert!((vmax - closed.abs()).abs() < 1e-15);
        assert!(vmax > 0.99 && vmax <= 1.0);
        // exact sampling of the centre gives exactly one
        let w = tone_burst(f, 3, 1e-7, 400).unwrap();
        assert!((w[150] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn nyquist_violation_rejected() {
        assert!(tone_burst(100e3, 3, 5e-6, 10).is_err());
        assert!(tone_burst(100e3, 0, 1e-7, 10).is_err());
    }
}
