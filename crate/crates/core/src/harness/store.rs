//! Run directories.
//!
//! ```text
//! dataset/      manifest.toml  x.aspr  y.aspr
//! model/        manifest.toml  state.toml  x0.aspr  fiducials-NN.aspr
//!               iteration-01/  stage.toml  flow.aspr  history.csv
//! inference/    manifest.toml  fiducials.aspr
//!               iteration-01/  samples.aspr  mean.aspr  std.aspr  (+ views)
//! ```
//!
//! A model directory is written after every completed iteration; `state.toml`
//! is replaced last, so it always names iterations whose files are complete.

use std::path::{Path, PathBuf};

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, SeedConfig};
use super::container::TensorContainer;
use super::{emit, read_toml, write_atomic, write_toml};
use crate::aspire::{observation_seed, AspireModel, AspireTrainer, CostLedger, IterationModel};
use crate::error::{Error, Result};
use crate::flow::{ConditionalFlow, FlowDescriptor, TrainHistory};
use crate::operators::Observation;
use crate::summary::SummaryStats;

pub const MANIFEST: &str = "manifest.toml";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ArtifactKind {
    Dataset,
    TestSet,
    Model,
    Inference,
    Evaluation,
    Calibration,
}

/// Everything needed to regenerate a run directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub kind: ArtifactKind,
    pub crate_version: String,
    pub config_hash: String,
    pub problem_id: String,
    pub seeds: SeedConfig,
    pub ledger: CostLedger,
    /// Data files of the directory, relative to it.
    pub files: Vec<String>,
    /// Source directories this run was derived from.
    #[serde(default)]
    pub inputs: Vec<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sample_count: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub observation_index: Option<usize>,
    pub config: ExperimentConfig,
}

impl Manifest {
    pub fn new(kind: ArtifactKind, config: &ExperimentConfig, problem_id: &str, ledger: CostLedger) -> Self {
        Self {
            kind,
            crate_version: env!("CARGO_PKG_VERSION").to_string(),
            config_hash: config.hash(),
            problem_id: problem_id.to_string(),
            seeds: config.seeds,
            ledger,
            files: Vec::new(),
            inputs: Vec::new(),
            sample_count: None,
            observation_index: None,
            config: config.clone(),
        }
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        write_toml(&dir.join(MANIFEST), self)
    }

    pub fn read(dir: &Path) -> Result<Self> {
        read_toml(&dir.join(MANIFEST))
    }

    /// Reads the manifest and checks its kind.
    pub fn expect(dir: &Path, kinds: &[ArtifactKind]) -> Result<Self> {
        let m = Self::read(dir)?;
        if !kinds.contains(&m.kind) {
            return Err(Error::format(dir.join(MANIFEST), format!("expected one of {kinds:?}, found {:?}", m.kind)));
        }
        Ok(m)
    }
}

/// Prior draws with their simulated observations.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub x: Array2<f64>,
    pub observations: Vec<Observation>,
}

impl Dataset {
    pub fn write(&self, dir: &Path) -> Result<()> {
        TensorContainer::matrix(self.x.view()).write(&dir.join("x.aspr"))?;
        let width = self.observations.first().map_or(0, |o| o.data.len());
        let rows: Vec<Vec<f64>> = self.observations.iter().map(|o| o.data.clone()).collect();
        TensorContainer::rows(&rows, width)?.write(&dir.join("y.aspr"))
    }

    /// Loads `x` and `y`; the observations get back the noise seeds they were
    /// simulated with.
    pub fn read(dir: &Path, manifest: &Manifest) -> Result<Self> {
        let x = TensorContainer::read(&dir.join("x.aspr"))?.into_matrix()?;
        let y = TensorContainer::read(&dir.join("y.aspr"))?.into_rows()?;
        if y.len() != x.nrows() {
            return Err(Error::format(dir, format!("{} parameter rows but {} observations", x.nrows(), y.len())));
        }
        let seed = match manifest.kind {
            ArtifactKind::TestSet => manifest.seeds.test,
            _ => manifest.seeds.data,
        };
        let observations = y
            .into_iter()
            .enumerate()
            .map(|(n, data)| Observation {
                data,
                problem_id: manifest.problem_id.clone(),
                rng_seed: observation_seed(seed, n),
            })
            .collect();
        Ok(Self { x, observations })
    }
}

/// Persisted part of one trained iteration apart from the flow weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StageRecord {
    descriptor: FlowDescriptor,
    residual_target: bool,
    summary_stats: SummaryStats,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    fiducial_stats: Option<SummaryStats>,
    target_stats: SummaryStats,
    history: TrainHistory,
}

fn stage_dir(dir: &Path, j: usize) -> PathBuf {
    dir.join(format!("iteration-{:02}", j + 1))
}

pub fn write_stage(dir: &Path, j: usize, stage: &IterationModel) -> Result<()> {
    let sd = stage_dir(dir, j);
    TensorContainer::vector(stage.flow.params().to_vec()).write(&sd.join("flow.aspr"))?;
    write_atomic(&sd.join("history.csv"), emit::history_csv(&stage.history).as_bytes())?;
    write_toml(
        &sd.join("stage.toml"),
        &StageRecord {
            descriptor: stage.flow.descriptor(),
            residual_target: stage.residual_target,
            summary_stats: stage.summary_stats.clone(),
            fiducial_stats: stage.fiducial_stats.clone(),
            target_stats: stage.target_stats.clone(),
            history: stage.history.clone(),
        },
    )
}

pub fn read_stage(dir: &Path, j: usize) -> Result<IterationModel> {
    let sd = stage_dir(dir, j);
    let rec: StageRecord = read_toml(&sd.join("stage.toml"))?;
    let params = TensorContainer::read(&sd.join("flow.aspr"))?;
    if params.shape.len() != 1 {
        return Err(Error::format(sd.join("flow.aspr"), "flow weights must be a vector"));
    }
    Ok(IterationModel {
        flow: ConditionalFlow::from_parts(rec.descriptor, params.data)?,
        summary_stats: rec.summary_stats,
        fiducial_stats: rec.fiducial_stats,
        target_stats: rec.target_stats,
        residual_target: rec.residual_target,
        history: rec.history,
    })
}

/// Trainer bookkeeping that is not recoverable from the dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainerState {
    pub config_hash: String,
    pub problem_id: String,
    pub completed: usize,
    pub offline_solves: u64,
    pub train_rows: Vec<usize>,
    pub val_rows: Vec<usize>,
}

/// Training-set fiducials after `completed` iterations.
fn fiducials_path(dir: &Path, completed: usize) -> PathBuf {
    dir.join(format!("fiducials-{completed:02}.aspr"))
}

/// Persists everything [`AspireTrainer`] holds beyond the dataset, after the
/// latest completed iteration.
pub fn write_trainer(dir: &Path, trainer: &AspireTrainer, config_hash: &str) -> Result<()> {
    let j = trainer.iterations.len();
    if j > 0 {
        write_stage(dir, j - 1, &trainer.iterations[j - 1])?;
    }
    TensorContainer::vector(trainer.x0.clone()).write(&dir.join("x0.aspr"))?;
    TensorContainer::matrix(trainer.fiducials.view()).write(&fiducials_path(dir, j))?;
    write_toml(
        &dir.join("state.toml"),
        &TrainerState {
            config_hash: config_hash.to_string(),
            problem_id: trainer.problem_id.clone(),
            completed: j,
            offline_solves: trainer.offline_solves,
            train_rows: trainer.train_rows.clone(),
            val_rows: trainer.val_rows.clone(),
        },
    )
}

pub fn read_trainer_state(dir: &Path) -> Result<Option<TrainerState>> {
    let path = dir.join("state.toml");
    if !path.exists() {
        return Ok(None);
    }
    read_toml(&path).map(Some)
}

/// Rebuilds a trainer from its directory and the dataset it was trained on.
pub fn read_trainer(dir: &Path, config: &ExperimentConfig, data: Dataset) -> Result<AspireTrainer> {
    let state = read_trainer_state(dir)?.ok_or_else(|| Error::format(dir.join("state.toml"), "missing trainer state"))?;
    if state.config_hash != config.hash() {
        return Err(Error::Config(format!(
            "{} was trained with config {} but this run uses {}",
            dir.display(),
            state.config_hash,
            config.hash()
        )));
    }
    let iterations = (0..state.completed).map(|j| read_stage(dir, j)).collect::<Result<Vec<_>>>()?;
    let path = fiducials_path(dir, state.completed);
    let fiducials = TensorContainer::read(&path)?.into_matrix()?;
    if fiducials.dim() != data.x.dim() {
        return Err(Error::format(path, format!("shape {:?} does not match the dataset {:?}", fiducials.dim(), data.x.dim())));
    }
    Ok(AspireTrainer {
        config: config.aspire_config(),
        problem_id: state.problem_id,
        x: data.x,
        observations: data.observations,
        x0: TensorContainer::read(&dir.join("x0.aspr"))?.data,
        train_rows: state.train_rows,
        val_rows: state.val_rows,
        fiducials,
        iterations,
        offline_solves: state.offline_solves,
    })
}

/// Loads a finished model and its manifest.
pub fn read_model(dir: &Path) -> Result<(AspireModel, Manifest)> {
    let manifest = Manifest::expect(dir, &[ArtifactKind::Model])?;
    let state = read_trainer_state(dir)?.ok_or_else(|| Error::format(dir.join("state.toml"), "missing trainer state"))?;
    let config = manifest.config.aspire_config();
    if state.completed != config.iterations {
        return Err(Error::format(dir, format!("{} of {} iterations trained", state.completed, config.iterations)));
    }
    let iterations = (0..state.completed).map(|j| read_stage(dir, j)).collect::<Result<Vec<_>>>()?;
    let model = AspireModel {
        problem_id: state.problem_id,
        fiducial_init: config.fiducial_init.clone(),
        x0: TensorContainer::read(&dir.join("x0.aspr"))?.data,
        config,
        iterations,
    };
    Ok((model, manifest))
}

/// Writes per-iteration samples, means and stds plus the fiducial chain.
pub fn write_inference(dir: &Path, samples: &[Array2<f64>], fiducials: &[Vec<f64>]) -> Result<Vec<String>> {
    let width = fiducials.first().map_or(0, Vec::len);
    TensorContainer::rows(fiducials, width)?.write(&dir.join("fiducials.aspr"))?;
    let mut files = vec!["fiducials.aspr".to_string()];
    for (j, s) in samples.iter().enumerate() {
        let sd = stage_dir(dir, j);
        let mean = crate::metrics::posterior_mean(s.view())?;
        let std = crate::metrics::posterior_std(s.view()).unwrap_or_else(|_| vec![0.0; s.ncols()]);
        TensorContainer::matrix(s.view()).write(&sd.join("samples.aspr"))?;
        TensorContainer::vector(mean).write(&sd.join("mean.aspr"))?;
        TensorContainer::vector(std).write(&sd.join("std.aspr"))?;
        let name = sd.file_name().expect("named").to_string_lossy().into_owned();
        for f in ["samples.aspr", "mean.aspr", "std.aspr"] {
            files.push(format!("{name}/{f}"));
        }
    }
    Ok(files)
}

/// Renders PGM and CSV views of every `mean.aspr` / `std.aspr` pair under
/// an inference directory.
pub fn emit_inference_views(dir: &Path, iterations: usize, (rows, cols): (usize, usize)) -> Result<()> {
    for j in 0..iterations {
        let sd = stage_dir(dir, j);
        for name in ["mean", "std"] {
            let v = TensorContainer::read(&sd.join(format!("{name}.aspr")))?.data;
            write_atomic(&sd.join(format!("{name}.pgm")), &emit::pgm16(&v, rows, cols)?)?;
            write_atomic(&sd.join(format!("{name}.csv")), emit::csv_grid(&v, rows, cols)?.as_bytes())?;
        }
    }
    Ok(())
}

/// `(observations, iterations, dim)` statistics as a rank-3 container.
pub fn stack3(values: &[Vec<Vec<f64>>]) -> Result<TensorContainer> {
    let t = values.len();
    let j = values.first().map_or(0, Vec::len);
    let d = values.first().and_then(|v| v.first()).map_or(0, Vec::len);
    let data: Vec<f64> = values.iter().flatten().flatten().copied().collect();
    TensorContainer::new(vec![t, j, d], data)
}

pub fn unstack3(c: TensorContainer, origin: &Path) -> Result<Vec<Vec<Vec<f64>>>> {
    let [t, j, d] = c.shape[..] else {
        return Err(Error::format(origin, format!("expected rank 3, got shape {:?}", c.shape)));
    };
    let mut it = c.data.chunks_exact(d.max(1));
    Ok((0..t)
        .map(|_| (0..j).map(|_| if d == 0 { Vec::new() } else { it.next().expect("sized").to_vec() }).collect())
        .collect())
}

pub fn matrix_rows(a: ArrayView2<f64>) -> Vec<Vec<f64>> {
    a.rows().into_iter().map(|r| r.to_vec()).collect()
}
