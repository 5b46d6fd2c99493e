//! Posterior statistics, image quality and uncertainty calibration.

use nalgebra::DMatrix;
use ndarray::{ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::operators::{sample_gaussian, GaussianDensity};
use crate::random::seeded;

/// Posterior samples of one observation, one row per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleSet {
    pub samples: ndarray::Array2<f64>,
    pub condition_id: String,
}

impl SampleSet {
    pub fn new(samples: ndarray::Array2<f64>, condition_id: impl Into<String>) -> Result<Self> {
        if samples.nrows() == 0 || samples.ncols() == 0 {
            return Err(Error::Degenerate("a sample set needs at least one non-empty sample".into()));
        }
        Ok(Self {
            samples,
            condition_id: condition_id.into(),
        })
    }

    pub fn mean(&self) -> Vec<f64> {
        posterior_mean(self.samples.view()).expect("non-empty by construction")
    }

    pub fn std(&self) -> Result<Vec<f64>> {
        posterior_std(self.samples.view())
    }
}

pub fn posterior_mean(samples: ArrayView2<f64>) -> Result<Vec<f64>> {
    samples
        .mean_axis(Axis(0))
        .map(|m| m.to_vec())
        .ok_or_else(|| Error::Degenerate("posterior mean of zero samples".into()))
}

/// Pointwise population standard deviation (divisor `S`).
pub fn posterior_std(samples: ArrayView2<f64>) -> Result<Vec<f64>> {
    if samples.nrows() < 2 {
        return Err(Error::Degenerate(format!("posterior std needs at least 2 samples, got {}", samples.nrows())));
    }
    Ok(samples.std_axis(Axis(0), 0.0).to_vec())
}

pub fn rmse(a: &[f64], b: &[f64]) -> Result<f64> {
    check_len("rmse", a.len(), b.len())?;
    if a.is_empty() {
        return Err(Error::Degenerate("rmse of empty vectors".into()));
    }
    let se: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok((se / a.len() as f64).sqrt())
}

/// `20 log10(max_val / rmse)`; identical inputs give `+∞`.
pub fn psnr(a: &[f64], b: &[f64], max_val: f64) -> Result<f64> {
    let e = rmse(a, b)?;
    if e == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(20.0 * (max_val / e).log10())
}

pub const SSIM_WINDOW: usize = 8;

/// Mean structural similarity over all 8×8 windows (stride 1, uniform
/// weights, `C1 = (0.01 L)²`, `C2 = (0.03 L)²` with `L = max_val`).
pub fn ssim(a: ArrayView2<f64>, b: ArrayView2<f64>, max_val: f64) -> Result<f64> {
    check_len("ssim rows", a.nrows(), b.nrows())?;
    check_len("ssim cols", a.ncols(), b.ncols())?;
    let w = SSIM_WINDOW;
    if a.nrows() < w || a.ncols() < w {
        return Err(Error::Degenerate(format!("ssim needs images of at least {w}x{w}")));
    }
    let c1 = (0.01 * max_val).powi(2);
    let c2 = (0.03 * max_val).powi(2);
    let area = (w * w) as f64;
    let mut total = 0.0;
    let mut windows = 0usize;
    for i in 0..=a.nrows() - w {
        for j in 0..=a.ncols() - w {
            let pa = a.slice(ndarray::s![i..i + w, j..j + w]);
            let pb = b.slice(ndarray::s![i..i + w, j..j + w]);
            let ma = pa.sum() / area;
            let mb = pb.sum() / area;
            let mut va = 0.0;
            let mut vb = 0.0;
            let mut cov = 0.0;
            for (x, y) in pa.iter().zip(pb.iter()) {
                va += (x - ma) * (x - ma);
                vb += (y - mb) * (y - mb);
                cov += (x - ma) * (y - mb);
            }
            va /= area;
            vb /= area;
            cov /= area;
            total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            windows += 1;
        }
    }
    Ok(total / windows as f64)
}

/// How the per-bin error axis is reported.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ErrorScale {
    /// Root of the mean squared error: same units as the predicted std.
    #[default]
    Root,
    /// Mean squared error as is.
    Squared,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub bin_edges: Vec<f64>,
    /// Mean predicted std per bin (NaN for empty bins).
    pub uq_per_bin: Vec<f64>,
    /// Realized error per bin (NaN for empty bins).
    pub err_per_bin: Vec<f64>,
    pub counts: Vec<usize>,
    pub empty_bins: Vec<usize>,
    pub error_scale: ErrorScale,
    pub uce: f64,
}

impl CalibrationReport {
    pub fn bin_width(&self) -> f64 {
        self.bin_edges[1] - self.bin_edges[0]
    }
}

/// Bins pixels by predicted std into `k` equal-width bins over
/// `[0, max σ]` and compares mean std with realized error in each bin.
pub fn calibration_curve(std: &[f64], mean: &[f64], truth: &[f64], k: usize, scale: ErrorScale) -> Result<CalibrationReport> {
    check_len("calibration mean", std.len(), mean.len())?;
    check_len("calibration truth", std.len(), truth.len())?;
    if k < 2 {
        return Err(Error::Config(format!("need at least 2 bins, got {k}")));
    }
    if std.iter().any(|s| !(*s >= 0.0) || !s.is_finite()) {
        return Err(Error::Degenerate("predicted std must be finite and non-negative".into()));
    }
    let top = std.iter().cloned().fold(0.0, f64::max);
    if top == 0.0 {
        return Err(Error::Degenerate("predicted std is zero everywhere".into()));
    }
    let width = top / k as f64;
    let bin_edges: Vec<f64> = (0..=k).map(|i| if i == k { top } else { i as f64 * width }).collect();
    let mut counts = vec![0usize; k];
    let mut uq = vec![0.0; k];
    let mut se = vec![0.0; k];
    for ((s, m), t) in std.iter().zip(mean).zip(truth) {
        let b = ((s / width) as usize).min(k - 1);
        counts[b] += 1;
        uq[b] += s;
        se[b] += (t - m) * (t - m);
    }
    let mut empty_bins = Vec::new();
    let mut uq_per_bin = Vec::with_capacity(k);
    let mut err_per_bin = Vec::with_capacity(k);
    for b in 0..k {
        if counts[b] == 0 {
            empty_bins.push(b);
            uq_per_bin.push(f64::NAN);
            err_per_bin.push(f64::NAN);
            continue;
        }
        let c = counts[b] as f64;
        uq_per_bin.push(uq[b] / c);
        let mse = se[b] / c;
        err_per_bin.push(match scale {
            ErrorScale::Root => mse.sqrt(),
            ErrorScale::Squared => mse,
        });
    }
    let mut report = CalibrationReport {
        bin_edges,
        uq_per_bin,
        err_per_bin,
        counts,
        empty_bins,
        error_scale: scale,
        uce: 0.0,
    };
    report.uce = uce(&report)?;
    Ok(report)
}

/// Mean over populated bins of `|UQ(B_k) − Error(B_k)|`.
pub fn uce(report: &CalibrationReport) -> Result<f64> {
    let gaps: Vec<f64> = report
        .counts
        .iter()
        .enumerate()
        .filter(|(_, &c)| c > 0)
        .map(|(b, _)| (report.uq_per_bin[b] - report.err_per_bin[b]).abs())
        .collect();
    if gaps.is_empty() {
        return Err(Error::Degenerate("no populated calibration bins".into()));
    }
    Ok(gaps.iter().sum::<f64>() / gaps.len() as f64)
}

/// Metric of the posterior mean of the first `c` samples for each `c` in
/// `counts`. Prefixes of one sample matrix make the sets nested.
pub fn sample_count_convergence<M>(samples: ArrayView2<f64>, truth: &[f64], counts: &[usize], metric: M) -> Result<Vec<(usize, f64)>>
where
    M: Fn(&[f64], &[f64]) -> Result<f64>,
{
    if counts.is_empty() || counts[0] == 0 || counts.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Config("sample counts must be positive and strictly ascending".into()));
    }
    let last = *counts.last().expect("non-empty");
    if last > samples.nrows() {
        return Err(Error::Config(format!("largest count {last} exceeds the {} available samples", samples.nrows())));
    }
    counts
        .iter()
        .map(|&c| {
            let m = posterior_mean(samples.slice(ndarray::s![..c, ..]))?;
            Ok((c, metric(&m, truth)?))
        })
        .collect()
}

/// Unbiased (divisor `S − 1`) sample covariance.
pub fn empirical_covariance(samples: ArrayView2<f64>) -> Result<DMatrix<f64>> {
    let s = samples.nrows();
    if s < 2 {
        return Err(Error::Degenerate(format!("covariance needs at least 2 samples, got {s}")));
    }
    let mean = samples.mean_axis(Axis(0)).expect("non-empty");
    let centred = &samples - &mean;
    let c = centred.t().dot(&centred) / (s - 1) as f64;
    let d = c.nrows();
    Ok(DMatrix::from_fn(d, d, |i, j| if i <= j { c[[i, j]] } else { c[[j, i]] }))
}

/// `‖Σ̂ − Σ‖_F / ‖Σ‖_F`. A zero reference covariance has no relative scale;
/// the function then returns 1.
pub fn covariance_frobenius_error(samples: ArrayView2<f64>, oracle: &GaussianDensity) -> Result<f64> {
    check_len("covariance_frobenius_error width", oracle.dim(), samples.ncols())?;
    let est = empirical_covariance(samples)?;
    let reference = oracle.cov.norm();
    if reference == 0.0 {
        return Ok(1.0);
    }
    Ok((est - &oracle.cov).norm() / reference)
}

/// 95th percentile of the covariance error of `sample_count` exact draws
/// from the oracle, over `resamplings` seeded repetitions.
pub fn covariance_noise_floor(oracle: &GaussianDensity, sample_count: usize, resamplings: usize, seed: u64) -> Result<f64> {
    if resamplings == 0 {
        return Err(Error::Config("need at least one resampling".into()));
    }
    let mut rng = seeded(seed);
    let mut errs = Vec::with_capacity(resamplings);
    for _ in 0..resamplings {
        let draws = sample_gaussian(oracle, sample_count, &mut rng)?;
        let flat: Vec<f64> = draws.into_iter().flatten().collect();
        let m = ndarray::Array2::from_shape_vec((sample_count, oracle.dim()), flat).expect("shape");
        errs.push(covariance_frobenius_error(m.view(), oracle)?);
    }
    errs.sort_by(f64::total_cmp);
    let idx = ((0.95 * resamplings as f64).ceil() as usize).clamp(1, resamplings) - 1;
    Ok(errs[idx])
}
