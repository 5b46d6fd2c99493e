//! Score-based summary statistics and the paired datasets built from them.
//!
//! The summary of an observation `y` at a fiducial point `x0` is the
//! gradient of the data misfit, `ȳ = ∇F^T[x0](F(x0) − y)`, optionally
//! post-processed by the problem (masking for the wave problem).

use ndarray::{Array2, ArrayView2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::operators::{ForwardProblem, Observation};

pub const STD_FLOOR: f64 = 1e-8;

/// Training pairs `(x⁽ⁿ⁾, ȳ_j⁽ⁿ⁾)` for one refinement iteration `j`.
#[derive(Debug, Clone, PartialEq)]
pub struct PairedDataset {
    pub iteration: usize,
    pub x: Array2<f64>,
    pub fiducials: Array2<f64>,
    pub summaries: Array2<f64>,
}

impl PairedDataset {
    pub fn len(&self) -> usize {
        self.x.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.x.nrows() == 0
    }
}

/// `∇F^T[x0](F(x0) − y)`: one forward and one adjoint solve.
pub fn compute_summary<P: ForwardProblem + ?Sized>(problem: &P, x0: &[f64], y: &Observation) -> Result<Vec<f64>> {
    let (_, mut g) = problem.misfit_gradient(x0, &y.data)?;
    problem.condition_gradient(&mut g);
    Ok(g)
}

/// Summaries of `ys[n]` at `fiducials[n]`, computed in parallel and kept in
/// input order.
pub fn build_dataset<P: ForwardProblem + ?Sized>(
    problem: &P,
    xs: ArrayView2<f64>,
    ys: &[Observation],
    fiducials: ArrayView2<f64>,
    iteration: usize,
) -> Result<PairedDataset> {
    let n = xs.nrows();
    check_len("build_dataset observations", n, ys.len())?;
    check_len("build_dataset fiducials", n, fiducials.nrows())?;
    check_len("build_dataset x width", problem.dim_x(), xs.ncols())?;
    check_len("build_dataset fiducial width", problem.dim_x(), fiducials.ncols())?;
    let rows: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| compute_summary(problem, &fiducials.row(i).to_vec(), &ys[i]))
        .collect::<Result<_>>()?;
    let mut summaries = Array2::zeros((n, problem.dim_x()));
    for (mut dst, src) in summaries.rows_mut().into_iter().zip(&rows) {
        dst.assign(&ndarray::ArrayView1::from(src.as_slice()));
    }
    Ok(PairedDataset {
        iteration,
        x: xs.to_owned(),
        fiducials: fiducials.to_owned(),
        summaries,
    })
}

/// Per-component location and scale of a set of summaries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl SummaryStats {
    /// Mean and population standard deviation per column, the latter floored
    /// at [`STD_FLOOR`].
    pub fn fit(summaries: ArrayView2<f64>) -> Result<Self> {
        if summaries.nrows() < 2 {
            return Err(Error::Degenerate(format!("need at least 2 summaries, got {}", summaries.nrows())));
        }
        let mean = summaries.mean_axis(Axis(0)).expect("non-empty");
        let std = summaries.std_axis(Axis(0), 0.0).mapv(|s| s.max(STD_FLOOR));
        Ok(Self {
            mean: mean.to_vec(),
            std: std.to_vec(),
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn apply(&self, summaries: ArrayView2<f64>) -> Result<Array2<f64>> {
        check_len("SummaryStats width", self.dim(), summaries.ncols())?;
        let mut out = summaries.to_owned();
        for mut row in out.rows_mut() {
            for ((v, m), s) in row.iter_mut().zip(&self.mean).zip(&self.std) {
                *v = (*v - m) / s;
            }
        }
        Ok(out)
    }

    pub fn apply_one(&self, summary: &[f64]) -> Result<Vec<f64>> {
        check_len("SummaryStats width", self.dim(), summary.len())?;
        Ok(summary.iter().zip(&self.mean).zip(&self.std).map(|((v, m), s)| (v - m) / s).collect())
    }

    pub fn invert(&self, standardized: ArrayView2<f64>) -> Result<Array2<f64>> {
        check_len("SummaryStats width", self.dim(), standardized.ncols())?;
        let mut out = standardized.to_owned();
        for mut row in out.rows_mut() {
            for ((v, m), s) in row.iter_mut().zip(&self.mean).zip(&self.std) {
                *v = *v * s + m;
            }
        }
        Ok(out)
    }
}

/// Standardizes summaries with statistics fitted on the dataset itself.
pub fn standardize(dataset: &PairedDataset) -> Result<(PairedDataset, SummaryStats)> {
    let stats = SummaryStats::fit(dataset.summaries.view())?;
    let summaries = stats.apply(dataset.summaries.view())?;
    Ok((PairedDataset { summaries, ..dataset.clone() }, stats))
}
