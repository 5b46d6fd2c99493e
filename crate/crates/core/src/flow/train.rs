use std::time::Instant;

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::ConditionalFlow;
use crate::error::{check_len, Error, Result};
use crate::random::{permutation, seeded};

/// Paired parameters and conditions, one sample per row.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowData {
    pub x: Array2<f64>,
    pub cond: Array2<f64>,
}

impl FlowData {
    pub fn new(x: Array2<f64>, cond: Array2<f64>) -> Result<Self> {
        check_len("FlowData rows", x.nrows(), cond.nrows())?;
        Ok(Self { x, cond })
    }

    pub fn len(&self) -> usize {
        self.x.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.x.nrows() == 0
    }

    pub fn select(&self, rows: &[usize]) -> Self {
        Self {
            x: self.x.select(Axis(0), rows),
            cond: self.cond.select(Axis(0), rows),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub target_noise_std: f64,
    /// Epochs without validation improvement before stopping; 0 disables.
    pub patience: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 8e-4,
            batch_size: 8,
            max_epochs: 100,
            target_noise_std: 0.01,
            patience: 10,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config(format!("learning rate {} must be non-negative", self.learning_rate)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if !(self.target_noise_std >= 0.0) {
            return Err(Error::Config("target noise std must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_objective: f64,
    pub validation_objective: f64,
    pub wall_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    /// Validation objective of the weights handed to `train`.
    pub initial_validation: f64,
    pub epochs: Vec<EpochRecord>,
    /// Epoch whose weights were returned; `None` if no epoch beat the start.
    pub best_epoch: Option<usize>,
    pub stopped_early: bool,
}

impl TrainHistory {
    pub fn best_validation(&self) -> f64 {
        match self.best_epoch {
            Some(e) => self.epochs[e].validation_objective,
            None => self.initial_validation,
        }
    }
}

/// First-order moment-matching optimizer with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(n: usize, learning_rate: f64) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for ((p, g), (m, v)) in params.iter_mut().zip(grad).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            *p -= self.learning_rate * (*m / c1) / ((*v / c2).sqrt() + self.eps);
        }
    }
}

const CHUNK: usize = 256;

fn per_sample_terms(flow: &ConditionalFlow, x: ArrayView2<f64>, cond: ArrayView2<f64>) -> Result<Array1<f64>> {
    let (z, logdet) = flow.forward_batch(x, cond)?;
    Ok(z.map_axis(Axis(1), |r| 0.5 * r.dot(&r)) - logdet)
}

/// Mean over rows of `½‖f(x; c)‖² − log|det J|`.
pub fn nll_objective(flow: &ConditionalFlow, data: &FlowData) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Degenerate("objective of an empty batch".into()));
    }
    let mut total = 0.0;
    for start in (0..data.len()).step_by(CHUNK) {
        let end = (start + CHUNK).min(data.len());
        let terms = per_sample_terms(flow, data.x.slice(s![start..end, ..]), data.cond.slice(s![start..end, ..]))?;
        if let Some(i) = terms.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!("objective is not finite at sample {}", start + i)));
        }
        total += terms.sum();
    }
    Ok(total / data.len() as f64)
}

/// Objective value and its gradient with respect to every weight.
pub fn objective_gradient(flow: &ConditionalFlow, x: ArrayView2<f64>, cond: ArrayView2<f64>) -> Result<(f64, Vec<f64>)> {
    let b = x.nrows();
    if b == 0 {
        return Err(Error::Degenerate("gradient of an empty batch".into()));
    }
    let tape = flow.forward_tape(x, cond)?;
    let terms = tape.out.map_axis(Axis(1), |r| 0.5 * r.dot(&r)) - &tape.logdet;
    if let Some(i) = terms.iter().position(|v| !v.is_finite()) {
        return Err(Error::Numerical(format!("objective is not finite at sample {i}")));
    }
    let inv = 1.0 / b as f64;
    let gz = &tape.out * inv;
    let glog = Array1::from_elem(b, -inv);
    let grads = flow.backward(&tape, gz, &glog);
    Ok((terms.sum() * inv, grads.params))
}

/// Maximum-likelihood training with Adam, per-epoch target noise and early
/// stopping on the validation objective. Returns the best weights seen.
pub fn train(mut flow: ConditionalFlow, train_set: &FlowData, val_set: &FlowData, cfg: &TrainConfig) -> Result<(ConditionalFlow, TrainHistory)> {
    cfg.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::Degenerate("training and validation sets must be non-empty".into()));
    }
    let mut rng = seeded(cfg.seed);
    let mut adam = Adam::new(flow.param_count(), cfg.learning_rate);
    let initial_validation = nll_objective(&flow, val_set)?;
    let mut best = (initial_validation, None, flow.params().to_vec());
    let mut history = TrainHistory {
        initial_validation,
        epochs: Vec::new(),
        best_epoch: None,
        stopped_early: false,
    };
    let n = train_set.len();
    let clock = Instant::now();
    for epoch in 0..cfg.max_epochs {
        let order = permutation(&mut rng, n);
        let mut total = 0.0;
        for (bi, rows) in order.chunks(cfg.batch_size).enumerate() {
            let mut x = train_set.x.select(Axis(0), rows);
            if cfg.target_noise_std > 0.0 {
                x.mapv_inplace(|v| v + cfg.target_noise_std * rng.sample::<f64, _>(StandardNormal));
            }
            let cond = train_set.cond.select(Axis(0), rows);
            let (obj, grad) = objective_gradient(&flow, x.view(), cond.view())
                .map_err(|e| Error::Numerical(format!("epoch {epoch}, batch {bi}: {e}")))?;
            total += obj * rows.len() as f64;
            adam.step(flow.params_mut(), &grad);
        }
        let validation = nll_objective(&flow, val_set).map_err(|e| Error::Numerical(format!("epoch {epoch}, validation: {e}")))?;
        history.epochs.push(EpochRecord {
            epoch,
            train_objective: total / n as f64,
            validation_objective: validation,
            wall_seconds: clock.elapsed().as_secs_f64(),
        });
        if validation < best.0 {
            best = (validation, Some(epoch), flow.params().to_vec());
        }
        let since = epoch as i64 - best.1.map_or(-1, |e| e as i64);
        if cfg.patience > 0 && since >= cfg.patience as i64 {
            history.stopped_early = epoch + 1 < cfg.max_epochs;
            break;
        }
    }
    history.best_epoch = best.1;
    flow.params_mut().copy_from_slice(&best.2);
    Ok((flow, history))
}
