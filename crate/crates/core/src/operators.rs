//! Forward operators and the linear-Gaussian reference problem.
//!
//! [`ForwardProblem`] is the abstraction every inference routine works
//! against: a forward map `F`, the action of its Jacobian and of the adjoint
//! Jacobian at a linearization point, and an additive noise model. Every
//! evaluation is tallied in forward-equivalent solves so that offline and
//! online costs can be audited exactly.

use std::sync::atomic::{AtomicU64, Ordering};

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::random::{normal_vec, seeded, SeededRng};

/// Running tally of forward-equivalent operator evaluations.
#[derive(Debug, Default)]
pub struct SolveCounter(AtomicU64);

impl SolveCounter {
    pub fn add(&self, n: u64) {
        self.0.fetch_add(n, Ordering::Relaxed);
    }

    pub fn get(&self) -> u64 {
        self.0.load(Ordering::Relaxed)
    }
}

/// One noisy realization `y = F(x) + ε`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub data: Vec<f64>,
    pub problem_id: String,
    pub rng_seed: u64,
}

/// A forward problem `y = F(x) + ε` with additive noise.
///
/// Implementors provide uncounted kernels; callers go through the provided
/// methods, which validate shapes and charge the solve counter:
///
/// | call                        | forward-equivalents |
/// |-----------------------------|---------------------|
/// | `apply_forward`             | 1                   |
/// | `simulate_observation`      | 1                   |
/// | `jacobian_apply`            | `linearized_cost()` |
/// | `adjoint_jacobian_apply`    | `linearized_cost()` |
/// | `misfit_gradient`           | 2                   |
/// | `batched_misfit_gradient`   | 2 per call          |
pub trait ForwardProblem: Send + Sync {
    fn name(&self) -> &str;
    fn dim_x(&self) -> usize;
    fn dim_y(&self) -> usize;
    fn noise_std(&self) -> f64;
    fn counter(&self) -> &SolveCounter;

    /// Noiseless forward map used on the inversion side.
    fn forward_kernel(&self, x: &[f64]) -> Result<Vec<f64>>;

    /// Noiseless forward map used to synthesize observations. Problems that
    /// guard against the inverse crime override this with a finer model.
    fn observe_kernel(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.forward_kernel(x)
    }

    fn jacobian_kernel(&self, x0: &[f64], dx: &[f64]) -> Result<Vec<f64>>;
    fn adjoint_kernel(&self, x0: &[f64], r: &[f64]) -> Result<Vec<f64>>;

    /// Returns `(F(x0) - y, ∇F^T[x0](F(x0) - y))`.
    fn misfit_gradient_kernel(&self, x0: &[f64], y: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let mut r = self.forward_kernel(x0)?;
        for (ri, yi) in r.iter_mut().zip(y) {
            *ri -= yi;
        }
        let g = self.adjoint_kernel(x0, &r)?;
        Ok((r, g))
    }

    /// Cost of a standalone Jacobian or adjoint-Jacobian action.
    fn linearized_cost(&self) -> u64 {
        1
    }

    /// Adds a noise realization to clean data in place.
    fn add_noise(&self, data: &mut [f64], rng: &mut SeededRng) {
        let s = self.noise_std();
        for d in data.iter_mut() {
            *d += s * rng.sample::<f64, _>(StandardNormal);
        }
    }

    /// Post-processing applied to score summaries (e.g. masking).
    fn condition_gradient(&self, _g: &mut [f64]) {}

    /// Maps a parameter vector back into the admissible set.
    fn project(&self, _x: &mut [f64]) {}

    fn solves(&self) -> u64 {
        self.counter().get()
    }

    fn apply_forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_len("apply_forward x", self.dim_x(), x.len())?;
        self.counter().add(1);
        self.forward_kernel(x)
    }

    fn simulate_observation(&self, x: &[f64], seed: u64) -> Result<Observation> {
        check_len("simulate_observation x", self.dim_x(), x.len())?;
        self.counter().add(1);
        let mut data = self.observe_kernel(x)?;
        let mut rng = seeded(seed);
        self.add_noise(&mut data, &mut rng);
        Ok(Observation {
            data,
            problem_id: self.name().to_string(),
            rng_seed: seed,
        })
    }

    fn jacobian_apply(&self, x0: &[f64], dx: &[f64]) -> Result<Vec<f64>> {
        check_len("jacobian_apply x0", self.dim_x(), x0.len())?;
        check_len("jacobian_apply dx", self.dim_x(), dx.len())?;
        self.counter().add(self.linearized_cost());
        self.jacobian_kernel(x0, dx)
    }

    fn adjoint_jacobian_apply(&self, x0: &[f64], r: &[f64]) -> Result<Vec<f64>> {
        check_len("adjoint_jacobian_apply x0", self.dim_x(), x0.len())?;
        check_len("adjoint_jacobian_apply r", self.dim_y(), r.len())?;
        self.counter().add(self.linearized_cost());
        self.adjoint_kernel(x0, r)
    }

    fn misfit_gradient(&self, x0: &[f64], y: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        check_len("misfit_gradient x0", self.dim_x(), x0.len())?;
        check_len("misfit_gradient y", self.dim_y(), y.len())?;
        self.counter().add(2);
        self.misfit_gradient_kernel(x0, y)
    }

    /// Misfit gradients at several points against one observation, charged as
    /// a single gradient (one outer iteration of a batched optimizer).
    fn batched_misfit_gradient(&self, xs: &[Vec<f64>], y: &[f64]) -> Result<Vec<(Vec<f64>, Vec<f64>)>> {
        check_len("batched_misfit_gradient y", self.dim_y(), y.len())?;
        for x in xs {
            check_len("batched_misfit_gradient x", self.dim_x(), x.len())?;
        }
        self.counter().add(2);
        xs.iter().map(|x| self.misfit_gradient_kernel(x, y)).collect()
    }
}

/// Multivariate normal density given by its mean and covariance.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianDensity {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl GaussianDensity {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        let n = mean.len();
        if cov.nrows() != n || cov.ncols() != n {
            return Err(Error::shape("GaussianDensity cov", n, cov.nrows()));
        }
        let scale = cov.amax().max(f64::MIN_POSITIVE);
        if (&cov - cov.transpose()).amax() > 1e-12 * scale {
            return Err(Error::Factorization("covariance is not symmetric".into()));
        }
        let trace = cov.trace();
        let min_eig = cov.clone().symmetric_eigenvalues().min();
        if min_eig < -1e-10 * trace.abs() {
            return Err(Error::Factorization(format!(
                "covariance has negative eigenvalue {min_eig:e}"
            )));
        }
        Ok(Self { mean, cov })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Lower-triangular factor `L` with `L L^T ≈ cov`.
    pub fn factor(&self) -> Result<DMatrix<f64>> {
        cholesky_with_jitter(&self.cov)
    }
}

/// Cholesky factor; on failure adds `1e-10 * trace / n` to the diagonal and
/// retries once. A zero matrix factors to zero.
pub fn cholesky_with_jitter(cov: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = cov.nrows();
    if cov.iter().all(|&v| v == 0.0) {
        return Ok(DMatrix::zeros(n, n));
    }
    if let Some(ch) = cov.clone().cholesky() {
        return Ok(ch.l());
    }
    let jitter = 1e-10 * cov.trace().abs() / n as f64;
    let mut bumped = cov.clone();
    for i in 0..n {
        bumped[(i, i)] += jitter;
    }
    bumped
        .cholesky()
        .map(|ch| ch.l())
        .ok_or_else(|| Error::Factorization(format!("cholesky failed after jitter {jitter:e}")))
}

/// Draws `count` samples from `g`.
pub fn sample_gaussian<R: Rng + ?Sized>(g: &GaussianDensity, count: usize, rng: &mut R) -> Result<Vec<Vec<f64>>> {
    let l = g.factor()?;
    let n = g.dim();
    Ok((0..count)
        .map(|_| {
            let z = DVector::from_vec(normal_vec(rng, n));
            (&g.mean + &l * z).as_slice().to_vec()
        })
        .collect())
}

/// `y = A x + ε`, `x ~ N(μ_p, Σ_p)`, `ε ~ N(0, σ² I)`.
#[derive(Debug)]
pub struct LinearGaussianProblem {
    name: String,
    pub a: DMatrix<f64>,
    pub prior: GaussianDensity,
    pub noise_std: f64,
    counter: SolveCounter,
}

impl LinearGaussianProblem {
    pub fn new(name: impl Into<String>, a: DMatrix<f64>, prior: GaussianDensity, noise_std: f64) -> Result<Self> {
        if a.nrows() == 0 || a.ncols() == 0 {
            return Err(Error::Config("operator must be at least 1x1".into()));
        }
        check_len("LinearGaussianProblem prior", a.ncols(), prior.dim())?;
        if !(noise_std > 0.0) {
            return Err(Error::Config(format!("noise_std must be positive, got {noise_std}")));
        }
        prior.factor()?;
        Ok(Self {
            name: name.into(),
            a,
            prior,
            noise_std,
            counter: SolveCounter::default(),
        })
    }

    /// Seeded stand-in for the unspecified stylized instance: `A_ij ~ N(0, 1/m)`,
    /// `Σ_p = Q Λ Q^T` with `Λ` log-uniform in `[0.1, 1]`, `μ_p ~ N(0, I)`.
    pub fn stylized(n: usize, m: usize, noise_std: f64, seed: u64) -> Result<Self> {
        let mut rng = seeded(seed);
        let scale = 1.0 / (m as f64).sqrt();
        let a = DMatrix::from_fn(m, n, |_, _| scale * rng.sample::<f64, _>(StandardNormal));
        let g = DMatrix::from_fn(n, n, |_, _| rng.sample::<f64, _>(StandardNormal));
        let q = g.qr().q();
        let lambda = DVector::from_fn(n, |_, _| 10f64.powf(-rng.random::<f64>()));
        let mut cov = &q * DMatrix::from_diagonal(&lambda) * q.transpose();
        cov = (&cov + cov.transpose()) * 0.5;
        let mean = DVector::from_vec(normal_vec(&mut rng, n));
        let prior = GaussianDensity::new(mean, cov)?;
        Self::new(format!("stylized-n{n}-m{m}-s{seed}"), a, prior, noise_std)
    }
}

impl ForwardProblem for LinearGaussianProblem {
    fn name(&self) -> &str {
        &self.name
    }

    fn dim_x(&self) -> usize {
        self.a.ncols()
    }

    fn dim_y(&self) -> usize {
        self.a.nrows()
    }

    fn noise_std(&self) -> f64 {
        self.noise_std
    }

    fn counter(&self) -> &SolveCounter {
        &self.counter
    }

    fn forward_kernel(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok((&self.a * DVector::from_column_slice(x)).as_slice().to_vec())
    }

    fn jacobian_kernel(&self, _x0: &[f64], dx: &[f64]) -> Result<Vec<f64>> {
        self.forward_kernel(dx)
    }

    fn adjoint_kernel(&self, _x0: &[f64], r: &[f64]) -> Result<Vec<f64>> {
        Ok((self.a.tr_mul(&DVector::from_column_slice(r))).as_slice().to_vec())
    }
}

/// Conjugate posterior `N(μ_post, Σ_post)` with
/// `Σ_post = (A^T A / σ² + Σ_p^{-1})^{-1}` and
/// `μ_post = Σ_post (A^T y / σ² + Σ_p^{-1} μ_p)`.
pub fn analytic_posterior(problem: &LinearGaussianProblem, y: &Observation) -> Result<GaussianDensity> {
    check_len("analytic_posterior y", problem.dim_y(), y.data.len())?;
    let n = problem.dim_x();
    let s2 = problem.noise_std * problem.noise_std;
    let prior_chol = problem
        .prior
        .cov
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Factorization("prior covariance is not positive definite".into()))?;
    let prior_prec = prior_chol.inverse();
    let precision = problem.a.tr_mul(&problem.a) / s2 + &prior_prec;
    let post_chol = precision
        .cholesky()
        .ok_or_else(|| Error::Factorization("posterior precision is not positive definite".into()))?;
    let mut cov = post_chol.inverse();
    cov = (&cov + cov.transpose()) * 0.5;
    let rhs = problem.a.tr_mul(&DVector::from_column_slice(&y.data)) / s2 + &prior_prec * &problem.prior.mean;
    let mean = post_chol.solve(&rhs);
    debug_assert_eq!(mean.len(), n);
    Ok(GaussianDensity { mean, cov })
}

/// Maximum-likelihood estimate: the minimum-norm least-squares solution of
/// `A x = y` through the SVD pseudo-inverse.
pub fn analytic_ml_estimate(problem: &LinearGaussianProblem, y: &[f64]) -> Result<Vec<f64>> {
    check_len("analytic_ml_estimate y", problem.dim_y(), y.len())?;
    let svd = problem.a.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let tol = smax * f64::EPSILON * problem.dim_y().max(problem.dim_x()) as f64;
    let x = svd
        .solve(&DVector::from_column_slice(y), tol)
        .map_err(|e| Error::Factorization(e.to_string()))?;
    Ok(x.as_slice().to_vec())
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::random::seeded;

    fn identity_problem(n: usize, sigma: f64) -> LinearGaussianProblem {
        let prior = GaussianDensity::new(DVector::zeros(n), DMatrix::identity(n, n)).unwrap();
        LinearGaussianProblem::new("id", DMatrix::identity(n, n), prior, sigma).unwrap()
    }

    fn random_problem(m: usize, n: usize, seed: u64) -> LinearGaussianProblem {
        let mut rng = seeded(seed);
        let a = DMatrix::from_fn(m, n, |_, _| rng.sample::<f64, _>(StandardNormal));
        let g = DMatrix::from_fn(n, n, |_, _| rng.sample::<f64, _>(StandardNormal));
        let cov = &g * g.transpose() / n as f64 + DMatrix::identity(n, n) * 0.2;
        let cov = (&cov + cov.transpose()) * 0.5;
        let mean = DVector::from_vec(normal_vec(&mut rng, n));
        LinearGaussianProblem::new("rand", a, GaussianDensity::new(mean, cov).unwrap(), 0.7).unwrap()
    }

    fn obs(data: Vec<f64>) -> Observation {
        Observation {
            data,
            problem_id: "t".into(),
            rng_seed: 0,
        }
    }

    #[test]
    fn identity_and_zero_operators() {
        let p = identity_problem(3, 1.0);
        assert_eq!(p.apply_forward(&[1.0, 2.0, 3.0]).unwrap(), vec![1.0, 2.0, 3.0]);
        let prior = GaussianDensity::new(DVector::zeros(2), DMatrix::identity(2, 2)).unwrap();
        let z = LinearGaussianProblem::new("zero", DMatrix::zeros(3, 2), prior, 1.0).unwrap();
        assert_eq!(z.apply_forward(&[4.0, -1.0]).unwrap(), vec![0.0; 3]);
    }

    #[test]
    fn forward_matches_elementwise_sums() {
        let p = random_problem(4, 2, 11);
        let x = [0.3, -1.7];
        let got = p.apply_forward(&x).unwrap();
        for i in 0..4 {
            let mut acc = 0.0;
            for j in 0..2 {
                acc += p.a[(i, j)] * x[j];
            }
            assert!((got[i] - acc).abs() < 1e-15);
        }
    }

    #[test]
    fn shape_errors() {
        let p = identity_problem(3, 1.0);
        assert!(matches!(p.apply_forward(&[1.0]), Err(Error::Shape { .. })));
        assert!(p.adjoint_jacobian_apply(&[0.0; 3], &[1.0; 2]).is_err());
        assert!(p.simulate_observation(&[0.0; 4], 1).is_err());
    }

    #[test]
    fn tiny_noise_reproduces_forward() {
        let p = identity_problem(3, 1e-30);
        let x = [1.0, -2.0, 0.5];
        let y = p.simulate_observation(&x, 3).unwrap();
        for (a, b) in y.data.iter().zip(&x) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn unit_noise_has_unit_std() {
        let n = 100_000;
        let prior = GaussianDensity::new(DVector::zeros(1), DMatrix::identity(1, 1)).unwrap();
        let p = LinearGaussianProblem::new("wide", DMatrix::zeros(n, 1), prior, 1.0).unwrap();
        let y = p.simulate_observation(&[0.0], 5).unwrap();
        let mean = y.data.iter().sum::<f64>() / n as f64;
        let sd = (y.data.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
        assert!((sd - 1.0).abs() < 0.02, "sd {sd}");
    }

    #[test]
    fn seeds_replay_and_differ() {
        let p = identity_problem(4, 1.0);
        let x = [0.0; 4];
        assert_eq!(p.simulate_observation(&x, 9).unwrap(), p.simulate_observation(&x, 9).unwrap());
        assert_ne!(p.simulate_observation(&x, 9).unwrap().data, p.simulate_observation(&x, 10).unwrap().data);
    }

    #[test]
    fn adjoint_examples() {
        let p = identity_problem(2, 1.0);
        assert_eq!(p.adjoint_jacobian_apply(&[0.0, 0.0], &[5.0, -5.0]).unwrap(), vec![5.0, -5.0]);
        assert_eq!(p.adjoint_jacobian_apply(&[3.0, 1.0], &[0.0, 0.0]).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn dot_test_linear() {
        let p = random_problem(7, 5, 3);
        let mut rng = seeded(99);
        for _ in 0..100 {
            let x0 = normal_vec(&mut rng, 5);
            let u = normal_vec(&mut rng, 5);
            let v = normal_vec(&mut rng, 7);
            let ju = p.jacobian_apply(&x0, &u).unwrap();
            let jtv = p.adjoint_jacobian_apply(&x0, &v).unwrap();
            let lhs = dot(&ju, &v);
            let rhs = dot(&u, &jtv);
            assert!((lhs - rhs).abs() <= 1e-10 * norm2(&ju) * norm2(&v));
        }
    }

    #[test]
    fn conjugate_symmetric_case() {
        let p = identity_problem(3, 1.0);
        let y = obs(vec![2.0, -4.0, 1.0]);
        let post = analytic_posterior(&p, &y).unwrap();
        for i in 0..3 {
            assert!((post.mean[i] - y.data[i] / 2.0).abs() < 1e-14);
            for j in 0..3 {
                let want = if i == j { 0.5 } else { 0.0 };
                assert!((post.cov[(i, j)] - want).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn uninformative_likelihood_returns_prior() {
        let mut p = random_problem(5, 3, 4);
        p.noise_std = 1e15;
        let post = analytic_posterior(&p, &obs(vec![1.0; 5])).unwrap();
        let rel = |a: f64, b: f64| (a - b).abs() / b.abs().max(1e-300);
        for i in 0..3 {
            assert!(rel(post.mean[i], p.prior.mean[i]) < 1e-10);
            for j in 0..3 {
                assert!((post.cov[(i, j)] - p.prior.cov[(i, j)]).abs() < 1e-10 * p.prior.cov.amax());
            }
        }
    }

    #[test]
    fn noiseless_square_limit_inverts_operator() {
        let mut p = random_problem(4, 4, 8);
        p.noise_std = 1e-30;
        let y = vec![0.4, -1.0, 2.0, 0.1];
        let post = analytic_posterior(&p, &obs(y.clone())).unwrap();
        let direct = p.a.clone().lu().solve(&DVector::from_vec(y)).unwrap();
        for i in 0..4 {
            assert!((post.mean[i] - direct[i]).abs() <= 1e-8 * direct.amax());
        }
    }

    #[test]
    fn posterior_contracts_prior() {
        let p = random_problem(5, 3, 21);
        let post = analytic_posterior(&p, &obs(vec![0.3; 5])).unwrap();
        let diff = &p.prior.cov - &post.cov;
        assert!(diff.symmetric_eigenvalues().min() >= -1e-10);
    }

    #[test]
    fn posterior_matches_importance_sampling() {
        // Self-normalized importance sampling with the prior as proposal.
        let p = random_problem(5, 3, 17);
        let x_true = [0.2, -0.4, 0.9];
        let y = p.simulate_observation(&x_true, 1).unwrap();
        let post = analytic_posterior(&p, &y).unwrap();
        let mut rng = seeded(2024);
        let draws = sample_gaussian(&p.prior, 1_000_000, &mut rng).unwrap();
        let s2 = p.noise_std * p.noise_std;
        let logw: Vec<f64> = draws
            .iter()
            .map(|x| {
                let f = p.forward_kernel(x).unwrap();
                -0.5 * f.iter().zip(&y.data).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / s2
            })
            .collect();
        let lmax = logw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let w: Vec<f64> = logw.iter().map(|l| (l - lmax).exp()).collect();
        let wsum: f64 = w.iter().sum();
        for k in 0..3 {
            let m: f64 = draws.iter().zip(&w).map(|(x, wi)| x[k] * wi).sum::<f64>() / wsum;
            let sd = post.cov[(k, k)].sqrt();
            // three significant figures relative to the posterior scale
            assert!((m - post.mean[k]).abs() < 5e-3 * sd.max(post.mean[k].abs()), "component {k}: {m} vs {}", post.mean[k]);
        }
    }

    #[test]
    fn ml_estimate_examples() {
        let p = identity_problem(2, 1.0);
        assert_eq!(p.dim_x(), 2);
        let x = analytic_ml_estimate(&p, &[3.0, -1.0]).unwrap();
        assert!((x[0] - 3.0).abs() < 1e-14 && (x[1] + 1.0).abs() < 1e-14);
        assert_eq!(analytic_ml_estimate(&p, &[0.0, 0.0]).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn ml_estimate_matches_normal_equations() {
        let p = random_problem(6, 2, 5);
        let y = [1.0, 0.5, -0.3, 2.0, 0.0, -1.1];
        let x = analytic_ml_estimate(&p, &y).unwrap();
        // normal equations by hand: 2x2 Gaussian elimination
        let mut ata = [[0.0; 2]; 2];
        let mut aty = [0.0; 2];
        for i in 0..6 {
            for j in 0..2 {
                aty[j] += p.a[(i, j)] * y[i];
                for k in 0..2 {
                    ata[j][k] += p.a[(i, j)] * p.a[(i, k)];
                }
            }
        }
        let f = ata[1][0] / ata[0][0];
        let x1 = (aty[1] - f * aty[0]) / (ata[1][1] - f * ata[0][1]);
        let x0 = (aty[0] - ata[0][1] * x1) / ata[0][0];
        assert!((x[0] - x0).abs() < 1e-10 && (x[1] - x1).abs() < 1e-10);
    }

    #[test]
    fn ml_estimate_underdetermined_is_min_norm() {
        let prior = GaussianDensity::new(DVector::zeros(2), DMatrix::identity(2, 2)).unwrap();
        let p = LinearGaussianProblem::new("u", DMatrix::from_row_slice(1, 2, &[1.0, 1.0]), prior, 1.0).unwrap();
        let x = analytic_ml_estimate(&p, &[2.0]).unwrap();
        assert!((x[0] - 1.0).abs() < 1e-12 && (x[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn gaussian_sampler_examples() {
        let g = GaussianDensity::new(DVector::from_vec(vec![1.0, 2.0]), DMatrix::zeros(2, 2)).unwrap();
        let mut rng = seeded(1);
        for s in sample_gaussian(&g, 10, &mut rng).unwrap() {
            assert_eq!(s, vec![1.0, 2.0]);
        }

        let g = GaussianDensity::new(DVector::zeros(4), DMatrix::identity(4, 4)).unwrap();
        let draws = sample_gaussian(&g, 100_000, &mut seeded(2)).unwrap();
        let mut cov = DMatrix::<f64>::zeros(4, 4);
        for d in &draws {
            let v = DVector::from_column_slice(d);
            cov += &v * v.transpose();
        }
        cov /= draws.len() as f64;
        assert!((cov - DMatrix::identity(4, 4)).norm() < 0.05);

        let a = sample_gaussian(&g, 3, &mut seeded(7)).unwrap();
        let b = sample_gaussian(&g, 3, &mut seeded(7)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn non_spd_prior_rejected() {
        let cov = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(GaussianDensity::new(DVector::zeros(2), cov).is_err());
    }

    #[test]
    fn stylized_instance_is_valid_and_seeded() {
        let p = LinearGaussianProblem::stylized(16, 80, 0.5, 3).unwrap();
        let q = LinearGaussianProblem::stylized(16, 80, 0.5, 3).unwrap();
        assert_eq!(p.a, q.a);
        let eig = p.prior.cov.clone().symmetric_eigenvalues();
        assert!(eig.min() > 0.099 && eig.max() < 1.001);
    }

    #[test]
    fn counters_charge_documented_costs() {
        let p = identity_problem(2, 1.0);
        p.apply_forward(&[0.0, 0.0]).unwrap();
        assert_eq!(p.solves(), 1);
        p.misfit_gradient(&[0.0, 0.0], &[1.0, 1.0]).unwrap();
        assert_eq!(p.solves(), 3);
        p.batched_misfit_gradient(&[vec![0.0; 2], vec![1.0; 2], vec![2.0; 2]], &[1.0, 1.0]).unwrap();
        assert_eq!(p.solves(), 5);
    }
}
