//! Observation-specific refinement of a pretrained amortized flow, and a
//! plain gradient-descent baseline.
//!
//! A latent flow `g_φ` reshapes the latent space of the pretrained
//! conditional flow `f` so that `h(z) = f⁻¹(g_φ(z); ȳ)` fits one
//! observation. The data term is coupled to `h` through slack variables
//! `x_{1:N_p}`, which lets the expensive misfit gradients be evaluated once
//! per outer iteration while many cheap inner steps update `φ` and the slack.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::aspire::{AspireModel, CostLedger, IterationModel};
use crate::error::{check_len, Error, Result};
use crate::flow::{init_flow, Adam, ConditionalFlow, FlowArch};
use crate::operators::{dot, ForwardProblem, Observation};
use crate::random::{derive_seed, seeded};
use crate::summary::compute_summary;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WeakConfig {
    /// Number of slack variables `N_p`.
    pub n_p: usize,
    /// Slack factor; `None` takes the standard error of the mean of the
    /// initial slack samples (per-component spread over `√N_p`).
    pub gamma: Option<f64>,
    /// Outer iterations `L`.
    pub outer: usize,
    /// Inner iterations per outer iteration.
    pub inner: usize,
    pub inner_learning_rate: f64,
    /// Data-noise std of the misfit term; `None` uses the problem's.
    pub sigma: Option<f64>,
    /// Pretrained stage whose flow is refined (0-based).
    pub stage: usize,
    pub n_couplings: usize,
    pub hidden: usize,
    /// Latent-flow round trips are checked every this many outer iterations.
    pub check_every: usize,
    /// Draw new latent points (and re-seat the slack on them) at the start
    /// of every outer iteration instead of keeping one fixed set.
    pub refresh_latent: bool,
    pub seed: u64,
}

impl Default for WeakConfig {
    fn default() -> Self {
        Self {
            n_p: 16,
            gamma: None,
            outer: 400,
            inner: 20,
            inner_learning_rate: 1e-3,
            sigma: None,
            stage: 0,
            n_couplings: 4,
            hidden: 64,
            check_every: 10,
            refresh_latent: true,
            seed: 0,
        }
    }
}

impl WeakConfig {
    /// Validates the configuration and returns advisory warnings.
    pub fn validate(&self) -> Result<Vec<String>> {
        if self.n_p == 0 || self.outer == 0 || self.inner == 0 || self.check_every == 0 {
            return Err(Error::Config("n_p, outer, inner and check_every must be positive".into()));
        }
        if !(self.inner_learning_rate > 0.0) {
            return Err(Error::Config("inner learning rate must be positive".into()));
        }
        for (name, v) in [("gamma", self.gamma), ("sigma", self.sigma)] {
            if let Some(v) = v {
                if !(v > 0.0) || !v.is_finite() {
                    return Err(Error::Config(format!("{name} must be positive, got {v}")));
                }
            }
        }
        let mut warnings = Vec::new();
        if self.inner < 2 {
            warnings.push(format!(
                "{} inner step(s) per outer iteration: the cheap inner loop no longer dominates the work",
                self.inner
            ));
        }
        Ok(warnings)
    }
}

/// Unconditional invertible map acting on latent vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentFlow {
    pub flow: ConditionalFlow,
}

impl LatentFlow {
    pub fn new(dim: usize, n_couplings: usize, hidden: usize, seed: u64) -> Result<Self> {
        let arch = FlowArch {
            n_couplings,
            hidden,
            ..FlowArch::new(dim, 0)
        };
        Ok(Self {
            flow: init_flow(arch, &mut seeded(seed))?,
        })
    }

    fn empty(rows: usize) -> Array2<f64> {
        Array2::zeros((rows, 0))
    }

    /// `(g(z), log|det ∂g/∂z|)` per row.
    pub fn apply(&self, z: ArrayView2<f64>) -> Result<(Array2<f64>, Array1<f64>)> {
        self.flow.forward_batch(z, Self::empty(z.nrows()).view())
    }

    pub fn invert(&self, w: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.flow.inverse_batch(w, Self::empty(w.nrows()).view())
    }

    /// Largest absolute error of `g⁻¹(g(z)) − z`.
    pub fn round_trip_error(&self, z: ArrayView2<f64>) -> Result<f64> {
        let (w, _) = self.apply(z)?;
        let back = self.invert(w.view())?;
        Ok((&back - &z).iter().fold(0.0, |m, v| m.max(v.abs())))
    }
}

/// The pretrained conditional map with its condition fixed to one
/// observation: `h(w) = x`.
#[derive(Debug, Clone)]
pub struct PretrainedPosterior<'a> {
    pub stage: &'a IterationModel,
    pub condition: Vec<f64>,
    pub fiducial: Vec<f64>,
}

impl PretrainedPosterior<'_> {
    fn cond_rows(&self, rows: usize) -> Array2<f64> {
        Array1::from(self.condition.clone())
            .broadcast((rows, self.condition.len()))
            .expect("broadcast")
            .to_owned()
    }

    pub fn to_parameters(&self, w: ArrayView2<f64>) -> Result<Array2<f64>> {
        let t = self.stage.flow.inverse_batch(w, self.cond_rows(w.nrows()).view())?;
        self.stage.to_parameters(t.view(), &self.fiducial)
    }
}

/// Per-term values of the refinement objectives, averaged over samples.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveTerms {
    pub data: f64,
    pub coupling: f64,
    pub latent: f64,
    pub logdet: f64,
}

impl ObjectiveTerms {
    pub fn total(&self) -> f64 {
        self.data + self.coupling + self.latent - self.logdet
    }
}

fn data_terms<P: ForwardProblem + ?Sized>(problem: &P, x: ArrayView2<f64>, y: &[f64], sigma: f64) -> Result<f64> {
    let mut total = 0.0;
    for row in x.rows() {
        let f = problem.apply_forward(&row.to_vec())?;
        total += f.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / (2.0 * sigma * sigma);
    }
    Ok(total / x.nrows() as f64)
}

/// Strong objective on a batch of latent draws: the data term is evaluated
/// at `h(g(z))` directly.
pub fn strong_objective<P: ForwardProblem + ?Sized>(
    problem: &P,
    prior: &PretrainedPosterior,
    g: &LatentFlow,
    z: ArrayView2<f64>,
    y: &[f64],
    sigma: f64,
) -> Result<ObjectiveTerms> {
    let (w, ld) = g.apply(z)?;
    let x = prior.to_parameters(w.view())?;
    let b = z.nrows() as f64;
    Ok(ObjectiveTerms {
        data: data_terms(problem, x.view(), y, sigma)?,
        coupling: 0.0,
        latent: w.rows().into_iter().map(|r| 0.5 * r.dot(&r)).sum::<f64>() / b,
        logdet: ld.sum() / b,
    })
}

/// Weak objective with explicit slack variables.
pub fn weak_objective<P: ForwardProblem + ?Sized>(
    problem: &P,
    prior: &PretrainedPosterior,
    g: &LatentFlow,
    z: ArrayView2<f64>,
    slack: ArrayView2<f64>,
    y: &[f64],
    sigma: f64,
    gamma: f64,
) -> Result<ObjectiveTerms> {
    check_len("weak_objective slack rows", z.nrows(), slack.nrows())?;
    let (w, ld) = g.apply(z)?;
    let h = prior.to_parameters(w.view())?;
    let b = z.nrows() as f64;
    let diff = &slack - &h;
    Ok(ObjectiveTerms {
        data: data_terms(problem, slack, y, sigma)?,
        coupling: diff.iter().map(|v| v * v).sum::<f64>() / (2.0 * gamma * gamma * b),
        latent: w.rows().into_iter().map(|r| 0.5 * r.dot(&r)).sum::<f64>() / b,
        logdet: ld.sum() / b,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct NonamortizedResult {
    pub latent: LatentFlow,
    pub slack: Array2<f64>,
    pub z: Array2<f64>,
    pub gamma: f64,
    pub sigma: f64,
    /// Summary at the pretrained stage's fiducial.
    pub condition: Vec<f64>,
    pub fiducial: Vec<f64>,
    /// Weak objective (without the data term's constant) after each outer iteration.
    pub history: Vec<f64>,
    pub warnings: Vec<String>,
}

impl NonamortizedResult {
    /// Draws `h(g(z))` for fresh latent samples.
    pub fn sample(&self, model: &AspireModel, stage: usize, count: usize, seed: u64) -> Result<Array2<f64>> {
        if count == 0 {
            return Err(Error::Config("sample count must be at least 1".into()));
        }
        let prior = PretrainedPosterior {
            stage: &model.iterations[stage],
            condition: self.condition.clone(),
            fiducial: self.fiducial.clone(),
        };
        let mut rng = seeded(seed);
        let z = Array2::from_shape_simple_fn((count, model.dim_x()), || rng.sample::<f64, _>(StandardNormal));
        let (w, _) = self.latent.apply(z.view())?;
        prior.to_parameters(w.view())
    }
}

/// Runs the pretrained chain up to `stage`, returning the standardized
/// condition and fiducial that stage sees for `y`.
fn pretrained_condition<P: ForwardProblem + ?Sized>(
    model: &AspireModel,
    problem: &P,
    y: &Observation,
    stage: usize,
    seed: u64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut xj = model.x0.clone();
    for (j, st) in model.iterations.iter().enumerate().take(stage + 1) {
        let s = compute_summary(problem, &xj, y)?;
        if j == stage {
            let s2 = ArrayView2::from_shape((1, s.len()), &s).expect("row view");
            let f2 = ArrayView2::from_shape((1, xj.len()), &xj).expect("row view");
            let c = st.condition(s2, f2)?;
            return Ok((c.row(0).to_vec(), xj));
        }
        let x = st.sample(&s, &xj, model.config.s_train.max(1), derive_seed(seed, j as u64))?;
        xj = x.mean_axis(Axis(0)).expect("non-empty").to_vec();
        problem.project(&mut xj);
    }
    unreachable!("stage index checked by caller")
}

/// Latent-space refinement under the weak formulation.
pub fn refine_nonamortized<P: ForwardProblem + ?Sized>(
    model: &AspireModel,
    problem: &P,
    y: &Observation,
    cfg: &WeakConfig,
) -> Result<(NonamortizedResult, CostLedger)> {
    let warnings = cfg.validate()?;
    if cfg.stage >= model.j() {
        return Err(Error::Config(format!("stage {} out of range for a {}-iteration model", cfg.stage, model.j())));
    }
    check_len("refine_nonamortized width", model.dim_x(), problem.dim_x())?;
    check_len("refine_nonamortized observation", problem.dim_y(), y.data.len())?;
    let before = problem.solves();
    let n = model.dim_x();
    let np = cfg.n_p;
    let sigma = cfg.sigma.unwrap_or_else(|| problem.noise_std());
    let stage = &model.iterations[cfg.stage];
    let (condition, fiducial) = pretrained_condition(model, problem, y, cfg.stage, cfg.seed)?;
    let prior = PretrainedPosterior {
        stage,
        condition: condition.clone(),
        fiducial: fiducial.clone(),
    };
    let cond_rows = prior.cond_rows(np);
    let scale = Array1::from(stage.target_stats.std.clone());

    let mut rng = seeded(derive_seed(cfg.seed, 1));
    let mut z = Array2::from_shape_simple_fn((np, n), || rng.sample::<f64, _>(StandardNormal));
    let mut g = LatentFlow::new(n, cfg.n_couplings, cfg.hidden, derive_seed(cfg.seed, 2))?;
    let mut slack = prior.to_parameters(g.apply(z.view())?.0.view())?.as_standard_layout().into_owned();
    let gamma = match cfg.gamma {
        Some(v) => v,
        None => {
            let mean = slack.mean_axis(Axis(0)).expect("non-empty");
            let spread = (&slack - &mean).iter().map(|v| v * v).sum::<f64>() / (np * n) as f64;
            if !(spread > 0.0) {
                return Err(Error::Degenerate("initial slack samples have no spread; set gamma explicitly".into()));
            }
            (spread / np as f64).sqrt()
        }
    };

    let mut adam_phi = Adam::new(g.flow.param_count(), cfg.inner_learning_rate);
    let mut adam_x = Adam::new(np * n, cfg.inner_learning_rate);
    let inv_b = 1.0 / np as f64;
    let inv_g2 = 1.0 / (gamma * gamma);
    let mut history = Vec::with_capacity(cfg.outer);
    for outer in 0..cfg.outer {
        let abort = |what: &str, inner: usize| Error::Numerical(format!("outer iteration {outer}, inner iteration {inner}: {what}"));
        if cfg.refresh_latent && outer > 0 {
            z = Array2::from_shape_simple_fn((np, n), || rng.sample::<f64, _>(StandardNormal));
            slack = prior.to_parameters(g.apply(z.view())?.0.view())?.as_standard_layout().into_owned();
            adam_x = Adam::new(np * n, cfg.inner_learning_rate);
        }
        let points: Vec<Vec<f64>> = slack.rows().into_iter().map(|r| r.to_vec()).collect();
        let grads = problem.batched_misfit_gradient(&points, &y.data)?;
        let mut gdata = Array2::<f64>::zeros((np, n));
        for (mut row, (_, gr)) in gdata.rows_mut().into_iter().zip(&grads) {
            for (d, v) in row.iter_mut().zip(gr) {
                *d = v * inv_b / (sigma * sigma);
            }
        }
        let anchor = slack.clone();
        let mut objective = f64::NAN;
        for inner in 0..cfg.inner {
            let fail = |e: Error| abort(&e.to_string(), inner);
            let tape_g = g.flow.forward_tape(z.view(), LatentFlow::empty(np).view()).map_err(fail)?;
            let tape_f = stage.flow.inverse_tape(tape_g.out.view(), cond_rows.view()).map_err(fail)?;
            let h = stage.to_parameters(tape_f.out.view(), &fiducial)?;
            let diff = &slack - &h;
            // The Gaussian and log-determinant terms are averaged over fresh
            // draws; on the fixed slack draws alone the flow can inflate its
            // volume between them at no cost.
            let fresh = Array2::from_shape_simple_fn((np, n), || rng.sample::<f64, _>(StandardNormal));
            let tape_r = g.flow.forward_tape(fresh.view(), LatentFlow::empty(np).view()).map_err(fail)?;
            let latent: f64 = tape_r.out.iter().map(|v| v * v).sum::<f64>() * 0.5 * inv_b;
            let coupling = diff.iter().map(|v| v * v).sum::<f64>() * 0.5 * inv_g2 * inv_b;
            let linear: f64 = gdata.iter().zip((&slack - &anchor).iter()).map(|(a, b)| a * b).sum();
            objective = linear + coupling + latent - tape_r.logdet.sum() * inv_b;
            if !objective.is_finite() {
                return Err(abort("objective is not finite", inner));
            }
            // ∂/∂h of the coupling term, mapped back through the target scaling.
            let gt = &diff * &scale * (-inv_g2 * inv_b);
            let gw = stage.flow.inverse_backward(&tape_f, gt);
            let mut grads_phi = g.flow.backward(&tape_g, gw, &Array1::zeros(np)).params;
            let reg = g.flow.backward(&tape_r, &tape_r.out * inv_b, &Array1::from_elem(np, -inv_b)).params;
            for (a, b) in grads_phi.iter_mut().zip(&reg) {
                *a += b;
            }
            let gx = &gdata + &(&diff * (inv_g2 * inv_b));
            adam_phi.step(g.flow.params_mut(), &grads_phi);
            adam_x.step(slack.as_slice_mut().expect("standard layout"), gx.as_standard_layout().as_slice().expect("standard layout"));
        }
        history.push(objective);
        if (outer + 1) % cfg.check_every == 0 {
            let err = g.round_trip_error(z.view())?;
            if err > 1e-6 {
                return Err(Error::Numerical(format!("latent flow round trip error {err:e} at outer iteration {outer}")));
            }
        }
    }
    let ledger = CostLedger {
        offline_solves: 0,
        online_solves: problem.solves() - before,
        n: 0,
        j: cfg.stage as u64 + 1,
        l: cfg.outer as u64,
    };
    Ok((
        NonamortizedResult {
            latent: g,
            slack,
            z,
            gamma,
            sigma,
            condition,
            fiducial,
            history,
            warnings,
        },
        ledger,
    ))
}

/// Step length rule of [`fwi_baseline`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", content = "value", rename_all = "kebab-case")]
pub enum StepRule {
    Fixed(f64),
    /// Exact minimizer of the linearized misfit along the gradient,
    /// `‖g‖² / ‖J g‖²` (one extra Jacobian action per step).
    ExactLinearized,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FwiResult {
    pub x: Vec<f64>,
    /// `½‖F(x) − y‖²` at the start of each step and at the end.
    pub misfit: Vec<f64>,
}

/// Gradient descent on `½‖F(x) − y‖²` with the problem's gradient
/// conditioning (masking) and projection applied every step.
pub fn fwi_baseline<P: ForwardProblem + ?Sized>(problem: &P, y: &Observation, x0: &[f64], steps: usize, rule: StepRule) -> Result<FwiResult> {
    check_len("fwi_baseline x0", problem.dim_x(), x0.len())?;
    if let StepRule::Fixed(a) = rule {
        if !(a > 0.0) {
            return Err(Error::Config(format!("step size must be positive, got {a}")));
        }
    }
    let mut x = x0.to_vec();
    let mut misfit = Vec::with_capacity(steps + 1);
    for _ in 0..steps {
        let (r, mut g) = problem.misfit_gradient(&x, &y.data)?;
        misfit.push(0.5 * dot(&r, &r));
        problem.condition_gradient(&mut g);
        let gg = dot(&g, &g);
        if gg == 0.0 {
            continue;
        }
        let alpha = match rule {
            StepRule::Fixed(a) => a,
            StepRule::ExactLinearized => {
                let jg = problem.jacobian_apply(&x, &g)?;
                gg / dot(&jg, &jg)
            }
        };
        for (xi, gi) in x.iter_mut().zip(&g) {
            *xi -= alpha * gi;
        }
        problem.project(&mut x);
    }
    let r = problem.apply_forward(&x)?;
    misfit.push(0.5 * r.iter().zip(&y.data).map(|(a, b)| (a - b) * (a - b)).sum::<f64>());
    Ok(FwiResult { x, misfit })
}
