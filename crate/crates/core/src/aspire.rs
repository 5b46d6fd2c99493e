//! Iteratively refined amortized inference.
//!
//! Offline, `J` conditional flows are trained in sequence. Flow `j` learns
//! `p(x | ȳ_j)` where `ȳ_j` is the score summary at the fiducial `x_j`; the
//! next fiducial of every training pair is the mean of a few samples from
//! flow `j`. Online, the same chain runs for one observation at a cost of
//! two solves per iteration.

use ndarray::{concatenate, Array1, Array2, ArrayView2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::flow::{init_flow, train, ConditionalFlow, FlowArch, FlowData, TrainConfig, TrainHistory};
use crate::operators::{analytic_ml_estimate, norm2, ForwardProblem, LinearGaussianProblem, Observation};
use crate::random::{derive_seed, permutation, seeded};
use crate::summary::{build_dataset, compute_summary, SummaryStats, STD_FLOOR};

const TAG_SPLIT: u64 = 1;
const TAG_SIMULATE: u64 = 2;
const TAG_INIT: u64 = 100;
const TAG_TRAIN: u64 = 200;
const TAG_FIDUCIAL: u64 = 300;

/// Target scales below this fraction of the mean scale are raised to it, so
/// components that barely vary in the training set cannot blow up the
/// standardized targets of unseen samples.

/// Starting point `x_0` shared by every observation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", content = "value", rename_all = "kebab-case")]
pub enum FiducialInit {
    Zeros,
    /// Empirical mean of the prior samples used for training.
    PriorMean,
    Constant(f64),
}

impl FiducialInit {
    pub fn resolve(&self, prior_samples: ArrayView2<f64>) -> Result<Vec<f64>> {
        let d = prior_samples.ncols();
        Ok(match self {
            FiducialInit::Zeros => vec![0.0; d],
            FiducialInit::Constant(v) => vec![*v; d],
            FiducialInit::PriorMean => prior_samples
                .mean_axis(Axis(0))
                .ok_or_else(|| Error::Degenerate("prior mean of an empty sample set".into()))?
                .to_vec(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AspireConfig {
    /// Number of refinement iterations `J`.
    pub iterations: usize,
    /// Posterior samples averaged per fiducial update during training.
    pub s_train: usize,
    pub validation_fraction: f64,
    pub fiducial_init: FiducialInit,
    pub n_couplings: usize,
    pub hidden: usize,
    pub embed: usize,
    pub train: TrainConfig,
    /// Start flow `j` from the weights of flow `j − 1`.
    pub warm_start: bool,
    /// Learning rate of warm-started iteration `j` is scaled by this factor
    /// to the power `j`.
    pub warm_lr_factor: f64,
    /// Append the standardized fiducial to the flow condition.
    pub condition_on_fiducial: bool,
    /// Learn `x − x_j` instead of `x`.
    pub residual_target: bool,
    /// Per-component target spreads are raised to at least this fraction of
    /// their average. Large values approach a single global scale.
    pub target_floor: f64,
    pub seed: u64,
}

impl Default for AspireConfig {
    fn default() -> Self {
        Self {
            iterations: 3,
            s_train: 64,
            validation_fraction: 0.1,
            fiducial_init: FiducialInit::PriorMean,
            n_couplings: 4,
            hidden: 64,
            embed: 128,
            train: TrainConfig::default(),
            warm_start: false,
            warm_lr_factor: 1.0,
            condition_on_fiducial: true,
            residual_target: true,
            target_floor: 0.05,
            seed: 0,
        }
    }
}

impl AspireConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::Config("at least one refinement iteration is required".into()));
        }
        if self.s_train == 0 {
            return Err(Error::Config("s_train must be at least 1".into()));
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return Err(Error::Config(format!("validation fraction {} must lie in (0, 1)", self.validation_fraction)));
        }
        if !(self.target_floor >= 0.0 && self.target_floor.is_finite()) {
            return Err(Error::Config(format!("target_floor {} must be finite and non-negative", self.target_floor)));
        }
        if !(self.warm_lr_factor > 0.0 && self.warm_lr_factor <= 1.0) {
            return Err(Error::Config(format!("warm_lr_factor {} must lie in (0, 1]", self.warm_lr_factor)));
        }
        self.train.validate()
    }

    fn arch(&self, dim_x: usize) -> FlowArch {
        let dim_cond = if self.condition_on_fiducial { 2 * dim_x } else { dim_x };
        FlowArch {
            n_couplings: self.n_couplings,
            hidden: self.hidden,
            embed: self.embed,
            ..FlowArch::new(dim_x, dim_cond)
        }
    }
}

/// Forward-equivalent solve counts of a run.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostLedger {
    pub offline_solves: u64,
    pub online_solves: u64,
    pub n: u64,
    pub j: u64,
    pub l: u64,
}

/// One trained refinement stage.
#[derive(Debug, Clone, PartialEq)]
pub struct IterationModel {
    pub flow: ConditionalFlow,
    pub summary_stats: SummaryStats,
    pub fiducial_stats: Option<SummaryStats>,
    /// Location and scale of the flow target.
    pub target_stats: SummaryStats,
    pub residual_target: bool,
    pub history: TrainHistory,
}

impl IterationModel {
    /// Standardized conditions for summaries `s` computed at fiducials `f`.
    pub fn condition(&self, s: ArrayView2<f64>, f: ArrayView2<f64>) -> Result<Array2<f64>> {
        let cs = self.summary_stats.apply(s)?;
        match &self.fiducial_stats {
            None => Ok(cs),
            Some(fs) => Ok(concatenate![Axis(1), cs, fs.apply(f)?]),
        }
    }

    /// Flow targets for parameters `x` at fiducials `f`.
    pub fn target(&self, x: ArrayView2<f64>, f: ArrayView2<f64>) -> Result<Array2<f64>> {
        if self.residual_target {
            self.target_stats.apply((&x - &f).view())
        } else {
            self.target_stats.apply(x)
        }
    }

    /// Parameter-space samples from flow outputs for one fiducial.
    pub fn to_parameters(&self, t: ArrayView2<f64>, fiducial: &[f64]) -> Result<Array2<f64>> {
        let mut x = self.target_stats.invert(t)?;
        if self.residual_target {
            x += &Array1::from(fiducial.to_vec());
        }
        Ok(x)
    }

    /// `count` posterior samples given the raw summary at `fiducial`.
    pub fn sample(&self, summary: &[f64], fiducial: &[f64], count: usize, seed: u64) -> Result<Array2<f64>> {
        let s = ArrayView2::from_shape((1, summary.len()), summary).expect("row view");
        let f = ArrayView2::from_shape((1, fiducial.len()), fiducial).expect("row view");
        let cond = self.condition(s, f)?;
        let t = self.flow.sample_posterior(&cond.row(0).to_vec(), count, &mut seeded(seed))?;
        self.to_parameters(t.view(), fiducial)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AspireModel {
    pub problem_id: String,
    pub fiducial_init: FiducialInit,
    /// Resolved `x_0`.
    pub x0: Vec<f64>,
    pub config: AspireConfig,
    pub iterations: Vec<IterationModel>,
}

impl AspireModel {
    pub fn j(&self) -> usize {
        self.iterations.len()
    }

    pub fn dim_x(&self) -> usize {
        self.x0.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InferenceResult {
    /// Samples of iteration `j = 1..J`, one row per sample.
    pub samples: Vec<Array2<f64>>,
    /// `x_0 ..= x_J`.
    pub fiducials: Vec<Vec<f64>>,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

fn fit_target(t: ArrayView2<f64>, fraction: f64) -> Result<SummaryStats> {
    let mut stats = SummaryStats::fit(t)?;
    let avg = stats.std.iter().sum::<f64>() / stats.std.len() as f64;
    let floor = (fraction * avg).max(STD_FLOOR);
    for s in &mut stats.std {
        *s = s.max(floor);
    }
    Ok(stats)
}

/// Noise seed of training pair `n` for a run seeded with `seed`.
pub fn observation_seed(seed: u64, n: usize) -> u64 {
    derive_seed(derive_seed(seed, TAG_SIMULATE), n as u64)
}

/// Simulates one noisy observation per prior sample, in parallel.
pub fn simulate_observations<P: ForwardProblem + ?Sized>(problem: &P, x: ArrayView2<f64>, seed: u64) -> Result<Vec<Observation>> {
    check_len("simulate_observations width", problem.dim_x(), x.ncols())?;
    (0..x.nrows())
        .into_par_iter()
        .map(|n| problem.simulate_observation(&x.row(n).to_vec(), observation_seed(seed, n)))
        .collect()
}

/// Offline training, one refinement iteration per [`AspireTrainer::step`].
///
/// All fields are public so that a run can be persisted after any completed
/// iteration and rebuilt later.
#[derive(Debug, Clone)]
pub struct AspireTrainer {
    pub config: AspireConfig,
    pub problem_id: String,
    pub x: Array2<f64>,
    pub observations: Vec<Observation>,
    pub x0: Vec<f64>,
    pub train_rows: Vec<usize>,
    pub val_rows: Vec<usize>,
    /// Current fiducial of every pair.
    pub fiducials: Array2<f64>,
    pub iterations: Vec<IterationModel>,
    pub offline_solves: u64,
}

impl AspireTrainer {
    /// Starts from already simulated observations; `simulation_solves` is
    /// the cost already spent producing them.
    pub fn new(config: AspireConfig, problem_id: &str, x: Array2<f64>, observations: Vec<Observation>, simulation_solves: u64) -> Result<Self> {
        config.validate()?;
        let n = x.nrows();
        check_len("AspireTrainer observations", n, observations.len())?;
        if n < 2 {
            return Err(Error::Degenerate(format!("need at least 2 training pairs, got {n}")));
        }
        let x0 = config.fiducial_init.resolve(x.view())?;
        let order = permutation(&mut seeded(derive_seed(config.seed, TAG_SPLIT)), n);
        let n_val = ((n as f64 * config.validation_fraction).round() as usize).clamp(1, n - 1);
        let val_rows = order[..n_val].to_vec();
        let train_rows = order[n_val..].to_vec();
        let fiducials = Array1::from(x0.clone()).broadcast((n, x0.len())).expect("broadcast").to_owned();
        Ok(Self {
            config,
            problem_id: problem_id.to_string(),
            x,
            observations,
            x0,
            train_rows,
            val_rows,
            fiducials,
            iterations: Vec::new(),
            offline_solves: simulation_solves,
        })
    }

    pub fn is_done(&self) -> bool {
        self.iterations.len() >= self.config.iterations
    }

    /// Trains the next flow and moves every fiducial to its posterior mean.
    pub fn step<P: ForwardProblem + ?Sized>(&mut self, problem: &P) -> Result<&IterationModel> {
        let j = self.iterations.len();
        if self.is_done() {
            return Err(Error::Config(format!("all {} iterations are already trained", self.config.iterations)));
        }
        check_len("AspireTrainer problem width", problem.dim_x(), self.x.ncols())?;
        let wrap = |e: Error| Error::Numerical(format!("iteration {}: {e}", j + 1));

        let before = problem.solves();
        let data = build_dataset(problem, self.x.view(), &self.observations, self.fiducials.view(), j)?;
        self.offline_solves += problem.solves() - before;

        let cfg = &self.config;
        let tr = &self.train_rows;
        let summary_stats = SummaryStats::fit(data.summaries.select(Axis(0), tr).view())?;
        let fiducial_stats = if cfg.condition_on_fiducial {
            Some(SummaryStats::fit(data.fiducials.select(Axis(0), tr).view())?)
        } else {
            None
        };
        let raw_target = if cfg.residual_target { &data.x - &data.fiducials } else { data.x.clone() };
        let target_stats = fit_target(raw_target.select(Axis(0), tr).view(), cfg.target_floor)?;
        let mut stage = IterationModel {
            flow: init_flow(cfg.arch(self.x.ncols()), &mut seeded(derive_seed(cfg.seed, TAG_INIT + j as u64)))?,
            summary_stats,
            fiducial_stats,
            target_stats,
            residual_target: cfg.residual_target,
            history: TrainHistory {
                initial_validation: f64::NAN,
                epochs: Vec::new(),
                best_epoch: None,
                stopped_early: false,
            },
        };
        if cfg.warm_start {
            if let Some(prev) = self.iterations.last() {
                stage.flow = prev.flow.clone();
            }
        }

        let cond = stage.condition(data.summaries.view(), data.fiducials.view())?;
        let target = stage.target(data.x.view(), data.fiducials.view())?;
        let all = FlowData::new(target, cond)?;
        let warm = cfg.warm_start && j > 0;
        let train_cfg = TrainConfig {
            seed: derive_seed(cfg.seed, TAG_TRAIN + j as u64),
            learning_rate: if warm { cfg.train.learning_rate * cfg.warm_lr_factor.powi(j as i32) } else { cfg.train.learning_rate },
            ..cfg.train.clone()
        };
        let (flow, history) = train(stage.flow, &all.select(&self.train_rows), &all.select(&self.val_rows), &train_cfg).map_err(wrap)?;
        stage.flow = flow;
        stage.history = history;

        let seed = derive_seed(cfg.seed, TAG_FIDUCIAL + j as u64);
        let s_train = cfg.s_train;
        let rows: Vec<Vec<f64>> = (0..self.x.nrows())
            .into_par_iter()
            .map(|n| {
                let f = data.fiducials.row(n).to_vec();
                let t = stage.flow.sample_posterior(&all.cond.row(n).to_vec(), s_train, &mut seeded(derive_seed(seed, n as u64)))?;
                let mut m = stage.to_parameters(t.view(), &f)?.mean_axis(Axis(0)).expect("non-empty").to_vec();
                problem.project(&mut m);
                Ok(m)
            })
            .collect::<Result<_>>()
            .map_err(wrap)?;
        for (mut dst, src) in self.fiducials.rows_mut().into_iter().zip(&rows) {
            dst.assign(&ndarray::ArrayView1::from(src.as_slice()));
        }
        self.iterations.push(stage);
        Ok(self.iterations.last().expect("just pushed"))
    }

    pub fn ledger(&self) -> CostLedger {
        CostLedger {
            offline_solves: self.offline_solves,
            online_solves: 0,
            n: self.x.nrows() as u64,
            j: self.iterations.len() as u64,
            l: 0,
        }
    }

    pub fn into_model(self) -> Result<(AspireModel, CostLedger)> {
        if !self.is_done() {
            return Err(Error::Config(format!(
                "training stopped after {} of {} iterations",
                self.iterations.len(),
                self.config.iterations
            )));
        }
        let ledger = self.ledger();
        Ok((
            AspireModel {
                problem_id: self.problem_id,
                fiducial_init: self.config.fiducial_init.clone(),
                x0: self.x0,
                config: self.config,
                iterations: self.iterations,
            },
            ledger,
        ))
    }
}

/// Simulates observations for `prior_samples` and runs every iteration.
pub fn train_aspire<P: ForwardProblem + ?Sized>(problem: &P, prior_samples: ArrayView2<f64>, config: &AspireConfig) -> Result<(AspireModel, CostLedger)> {
    config.validate()?;
    let before = problem.solves();
    let observations = simulate_observations(problem, prior_samples, config.seed)?;
    let spent = problem.solves() - before;
    let mut trainer = AspireTrainer::new(config.clone(), problem.name(), prior_samples.to_owned(), observations, spent)?;
    while !trainer.is_done() {
        trainer.step(problem)?;
    }
    trainer.into_model()
}

/// Runs the refinement chain for one observation.
///
/// The returned ledger is the change of the problem's solve counter, so it
/// also counts solves made concurrently by other callers on the same problem.
pub fn infer<P: ForwardProblem + ?Sized>(
    model: &AspireModel,
    problem: &P,
    y: &Observation,
    sample_count: usize,
    seed: u64,
) -> Result<(InferenceResult, CostLedger)> {
    if sample_count == 0 {
        return Err(Error::Config("sample count must be at least 1".into()));
    }
    check_len("infer model width", model.dim_x(), problem.dim_x())?;
    check_len("infer observation", problem.dim_y(), y.data.len())?;
    let before = problem.solves();
    let mut fiducials = vec![model.x0.clone()];
    let mut samples = Vec::with_capacity(model.j());
    for stage in &model.iterations {
        let xj = fiducials.last().expect("x0");
        let s = compute_summary(problem, xj, y)?;
        let x = stage.sample(&s, xj, sample_count, seed)?;
        let mut next = x.mean_axis(Axis(0)).expect("non-empty").to_vec();
        problem.project(&mut next);
        fiducials.push(next);
        samples.push(x);
    }
    let last = samples.last().ok_or_else(|| Error::Degenerate("model has no iterations".into()))?;
    let mean = last.mean_axis(Axis(0)).expect("non-empty").to_vec();
    let std = last.std_axis(Axis(0), 0.0).to_vec();
    let ledger = CostLedger {
        offline_solves: 0,
        online_solves: problem.solves() - before,
        n: 0,
        j: model.j() as u64,
        l: 0,
    };
    Ok((InferenceResult { samples, fiducials, mean, std }, ledger))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Lemma1Row {
    pub dist_x1: f64,
    pub dist_x0: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Lemma1Report {
    pub rows: Vec<Lemma1Row>,
    /// Share of observations with `‖x_1 − x_ML‖ < ‖x_0 − x_ML‖`.
    pub fraction: f64,
}

/// Compares the first refined fiducial with `x_0` in distance to the
/// maximum-likelihood estimate of each observation.
pub fn lemma1_check(
    problem: &LinearGaussianProblem,
    model: &AspireModel,
    observations: &[Observation],
    sample_count: usize,
    seed: u64,
) -> Result<Lemma1Report> {
    if observations.is_empty() {
        return Err(Error::Degenerate("no test observations".into()));
    }
    let stage = model.iterations.first().ok_or_else(|| Error::Degenerate("model has no iterations".into()))?;
    let mut rows = Vec::with_capacity(observations.len());
    for (i, y) in observations.iter().enumerate() {
        let ml = analytic_ml_estimate(problem, &y.data)?;
        let s = compute_summary(problem, &model.x0, y)?;
        let x = stage.sample(&s, &model.x0, sample_count, derive_seed(seed, i as u64))?;
        let x1 = x.mean_axis(Axis(0)).expect("non-empty");
        let d = |v: &[f64]| norm2(&v.iter().zip(&ml).map(|(a, b)| a - b).collect::<Vec<_>>());
        rows.push(Lemma1Row {
            dist_x1: d(x1.as_slice().expect("contiguous")),
            dist_x0: d(&model.x0),
        });
    }
    let better = rows.iter().filter(|r| r.dist_x1 < r.dist_x0).count();
    let fraction = better as f64 / rows.len() as f64;
    Ok(Lemma1Report { rows, fraction })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Aspire,
    Nonamortized,
    Meanfield,
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "aspire" => Ok(Method::Aspire),
            "nonamortized" => Ok(Method::Nonamortized),
            "meanfield" => Ok(Method::Meanfield),
            other => Err(Error::Config(format!("unknown method '{other}' (expected aspire, nonamortized or meanfield)"))),
        }
    }
}

/// `(offline, online)` forward-equivalent solves of each method.
pub fn cost_formula(method: Method, n: u64, j: u64, l: u64) -> (u64, u64) {
    match method {
        Method::Aspire => (n + 2 * n * j, 2 * j),
        Method::Nonamortized => (n + 2 * n * j, 2 * j + 2 * l),
        Method::Meanfield => (0, 2 * l),
    }
}

/// Total cost of `a` (offline plus one online run) divided by that of `b`:
/// the number of test cases `b` could serve for the price of setting up `a`.
pub fn break_even(a: (u64, u64), b: (u64, u64)) -> Result<f64> {
    let tb = b.0 + b.1;
    if tb == 0 {
        return Err(Error::Degenerate("reference method has zero cost".into()));
    }
    Ok((a.0 + a.1) as f64 / tb as f64)
}
