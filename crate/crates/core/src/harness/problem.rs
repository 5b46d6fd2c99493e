use ndarray::Array2;
use rayon::prelude::*;

use super::config::{ProblemConfig, ProblemKind};
use crate::error::Result;
use crate::operators::{sample_gaussian, ForwardProblem, LinearGaussianProblem};
use crate::random::{derive_seed, seeded};
use crate::wave2d::{make_phantom, PhantomConfig, WaveProblem};

/// A configured forward problem together with its prior.
#[derive(Debug)]
pub enum Problem {
    Stylized(LinearGaussianProblem),
    Wave { problem: WaveProblem, phantom: PhantomConfig },
}

impl Problem {
    pub fn build(cfg: &ProblemConfig) -> Result<Self> {
        Ok(match cfg.kind {
            ProblemKind::Stylized => {
                let s = cfg.stylized_section();
                Problem::Stylized(LinearGaussianProblem::stylized(s.n, s.m, s.noise_std, s.instance_seed)?)
            }
            ProblemKind::Wave2d => Problem::Wave {
                problem: cfg.wave_section().build()?,
                phantom: cfg.phantom_section(),
            },
        })
    }

    pub fn forward(&self) -> &dyn ForwardProblem {
        match self {
            Problem::Stylized(p) => p,
            Problem::Wave { problem, .. } => problem,
        }
    }

    pub fn linear(&self) -> Option<&LinearGaussianProblem> {
        match self {
            Problem::Stylized(p) => Some(p),
            Problem::Wave { .. } => None,
        }
    }

    /// Rows × columns used when a parameter vector is drawn as an image.
    pub fn image_shape(&self) -> (usize, usize) {
        match self {
            Problem::Stylized(p) => (1, p.dim_x()),
            Problem::Wave { problem, .. } => (problem.nx, problem.ny),
        }
    }

    /// Components scored by calibration: all of them for the stylized
    /// problem, the gradient-mask support for the wave problem.
    pub fn region_of_interest(&self) -> Vec<bool> {
        match self {
            Problem::Stylized(p) => vec![true; p.dim_x()],
            Problem::Wave { problem, .. } => problem.mask().iter().map(|&m| m > 0.0).collect(),
        }
    }

    /// `count` prior draws, one per row. Phantom `i` depends only on
    /// `(seed, i)`.
    pub fn sample_prior(&self, count: usize, seed: u64) -> Result<Array2<f64>> {
        let dim = self.forward().dim_x();
        let rows: Vec<Vec<f64>> = match self {
            Problem::Stylized(p) => sample_gaussian(&p.prior, count, &mut seeded(seed))?,
            Problem::Wave { phantom, .. } => (0..count)
                .into_par_iter()
                .map(|i| make_phantom(&mut seeded(derive_seed(seed, i as u64)), phantom).map(|m| m.values))
                .collect::<Result<_>>()?,
        };
        Ok(Array2::from_shape_vec((count, dim), rows.into_iter().flatten().collect()).expect("rows have the problem width"))
    }
}
