//! The experiment steps behind each command-line subcommand.

use std::path::{Path, PathBuf};

use rayon::prelude::*;

use super::config::ExperimentConfig;
use super::container::TensorContainer;
use super::problem::Problem;
use super::store::{self, ArtifactKind, Dataset, Manifest};
use super::{emit, write_atomic};
use crate::aspire::{infer, simulate_observations, AspireModel, AspireTrainer, CostLedger};
use crate::error::{Error, Result};
use crate::metrics::{calibration_curve, posterior_mean, posterior_std, rmse, CalibrationReport};
use crate::operators::Observation;
use crate::random::derive_seed;

const TAG_PRIOR: u64 = 11;

/// Draws prior samples and simulates their observations: the training set
/// (`N = data.n`, seeded by `seeds.data`) or, with `test`, the test set
/// (`data.test_observations`, seeded by `seeds.test`).
pub fn generate_data(cfg: &ExperimentConfig, problem: &Problem, out: &Path, test: bool) -> Result<Manifest> {
    let (count, seed, kind) = if test {
        (cfg.data.test_observations, cfg.seeds.test, ArtifactKind::TestSet)
    } else {
        (cfg.data.n, cfg.seeds.data, ArtifactKind::Dataset)
    };
    if count == 0 {
        return Err(Error::Config("nothing to generate: the requested set is empty".into()));
    }
    let fwd = problem.forward();
    let x = problem.sample_prior(count, derive_seed(seed, TAG_PRIOR))?;
    let before = fwd.solves();
    let observations = simulate_observations(fwd, x.view(), seed)?;
    let ledger = CostLedger {
        offline_solves: fwd.solves() - before,
        n: count as u64,
        ..CostLedger::default()
    };
    Dataset { x, observations }.write(out)?;
    let mut m = Manifest::new(kind, cfg, fwd.name(), ledger);
    m.files = vec!["x.aspr".into(), "y.aspr".into()];
    m.write(out)?;
    Ok(m)
}

fn load_set(dir: &Path, kind: ArtifactKind, problem: &Problem) -> Result<(Dataset, Manifest)> {
    let m = Manifest::expect(dir, &[kind])?;
    if m.problem_id != problem.forward().name() {
        return Err(Error::Config(format!(
            "{} holds data for {} but the configured problem is {}",
            dir.display(),
            m.problem_id,
            problem.forward().name()
        )));
    }
    Ok((Dataset::read(dir, &m)?, m))
}

pub fn load_dataset(dir: &Path, problem: &Problem) -> Result<(Dataset, Manifest)> {
    load_set(dir, ArtifactKind::Dataset, problem)
}

pub fn load_test_set(dir: &Path, problem: &Problem) -> Result<(Dataset, Manifest)> {
    load_set(dir, ArtifactKind::TestSet, problem)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TrainOutcome {
    pub completed: usize,
    pub done: bool,
    pub ledger: CostLedger,
}

/// Trains (or, with `resume`, continues training) a model into `out`,
/// persisting after every iteration. `stop_after` bounds the number of
/// iterations run by this call.
pub fn train(
    cfg: &ExperimentConfig,
    problem: &Problem,
    data_dir: &Path,
    out: &Path,
    resume: bool,
    stop_after: Option<usize>,
) -> Result<TrainOutcome> {
    let (data, data_manifest) = load_dataset(data_dir, problem)?;
    let hash = cfg.hash();
    let fwd = problem.forward();
    let mut trainer = match (store::read_trainer_state(out)?, resume) {
        (Some(_), true) => store::read_trainer(out, cfg, data)?,
        (Some(_), false) => {
            return Err(Error::Config(format!("{} already holds a model; pass --resume to continue it", out.display())));
        }
        (None, _) => {
            let t = AspireTrainer::new(cfg.aspire_config(), fwd.name(), data.x, data.observations, data_manifest.ledger.offline_solves)?;
            store::write_trainer(out, &t, &hash)?;
            t
        }
    };
    let mut ran = 0;
    while !trainer.is_done() && stop_after.is_none_or(|k| ran < k) {
        trainer.step(fwd)?;
        store::write_trainer(out, &trainer, &hash)?;
        ran += 1;
    }
    let ledger = trainer.ledger();
    let done = trainer.is_done();
    if done {
        let mut m = Manifest::new(ArtifactKind::Model, cfg, fwd.name(), ledger);
        m.inputs = vec![data_dir.to_path_buf()];
        m.files = std::iter::once("state.toml".to_string())
            .chain(std::iter::once("x0.aspr".into()))
            .chain(std::iter::once(format!("fiducials-{:02}.aspr", trainer.iterations.len())))
            .chain((1..=trainer.iterations.len()).flat_map(|j| {
                ["stage.toml", "flow.aspr", "history.csv"].map(|f| format!("iteration-{j:02}/{f}"))
            }))
            .collect();
        m.write(out)?;
    }
    Ok(TrainOutcome {
        completed: trainer.iterations.len(),
        done,
        ledger,
    })
}

/// A trained model with the problem it was trained on.
pub struct LoadedModel {
    pub model: AspireModel,
    pub manifest: Manifest,
    pub problem: Problem,
}

pub fn load_model(dir: &Path) -> Result<LoadedModel> {
    let (model, manifest) = store::read_model(dir)?;
    let problem = Problem::build(&manifest.config.problem)?;
    if problem.forward().name() != model.problem_id {
        return Err(Error::Config(format!("model was trained on {} but its config builds {}", model.problem_id, problem.forward().name())));
    }
    Ok(LoadedModel { model, manifest, problem })
}

/// Reads a single observation from a container (a vector or a `1 × m`
/// matrix).
pub fn read_observation(path: &Path, problem: &Problem) -> Result<Observation> {
    let c = TensorContainer::read(path)?;
    let ok = matches!(c.shape[..], [_] | [1, _]);
    if !ok {
        return Err(Error::format(path, format!("an observation must be a vector, got shape {:?}", c.shape)));
    }
    let fwd = problem.forward();
    if c.data.len() != fwd.dim_y() {
        return Err(Error::format(path, format!("observation has {} values, the problem expects {}", c.data.len(), fwd.dim_y())));
    }
    Ok(Observation {
        data: c.data,
        problem_id: fwd.name().to_string(),
        rng_seed: 0,
    })
}

/// Posterior samples of every iteration for one observation, written with
/// their PGM/CSV views.
pub fn infer_to_dir(loaded: &LoadedModel, model_dir: &Path, y: &Observation, samples: usize, out: &Path) -> Result<Manifest> {
    let cfg = &loaded.manifest.config;
    let fwd = loaded.problem.forward();
    let (r, ledger) = infer(&loaded.model, fwd, y, samples, cfg.seeds.infer)?;
    let files = store::write_inference(out, &r.samples, &r.fiducials)?;
    store::emit_inference_views(out, r.samples.len(), loaded.problem.image_shape())?;
    let mut m = Manifest::new(ArtifactKind::Inference, cfg, fwd.name(), ledger);
    m.inputs = vec![model_dir.to_path_buf()];
    m.files = files;
    m.sample_count = Some(samples);
    m.write(out)?;
    Ok(m)
}

/// Per-observation, per-iteration posterior means and stds.
pub struct PosteriorStats {
    pub means: Vec<Vec<Vec<f64>>>,
    pub stds: Vec<Vec<Vec<f64>>>,
    pub ledger: CostLedger,
}

/// Runs inference on every test observation in parallel. Observation `t`
/// uses latent seed `derive_seed(seeds.infer, t)`, so the result does not
/// depend on the thread count.
pub fn posterior_stats(loaded: &LoadedModel, test: &Dataset, samples: usize) -> Result<PosteriorStats> {
    let fwd = loaded.problem.forward();
    let seed = loaded.manifest.config.seeds.infer;
    let before = fwd.solves();
    let per: Vec<(Vec<Vec<f64>>, Vec<Vec<f64>>)> = test
        .observations
        .par_iter()
        .enumerate()
        .map(|(t, y)| {
            let (r, _) = infer(&loaded.model, fwd, y, samples, derive_seed(seed, t as u64))?;
            let mut means = Vec::with_capacity(r.samples.len());
            let mut stds = Vec::with_capacity(r.samples.len());
            for s in &r.samples {
                means.push(posterior_mean(s.view())?);
                stds.push(if s.nrows() > 1 { posterior_std(s.view())? } else { vec![0.0; s.ncols()] });
            }
            Ok((means, stds))
        })
        .collect::<Result<_>>()?;
    let (means, stds) = per.into_iter().unzip();
    Ok(PosteriorStats {
        means,
        stds,
        ledger: CostLedger {
            online_solves: fwd.solves() - before,
            j: loaded.model.j() as u64,
            ..CostLedger::default()
        },
    })
}

fn write_stats(out: &Path, stats: &PosteriorStats) -> Result<()> {
    store::stack3(&stats.means)?.write(&out.join("means.aspr"))?;
    store::stack3(&stats.stds)?.write(&out.join("stds.aspr"))
}

fn read_stats(out: &Path) -> Result<(Vec<Vec<Vec<f64>>>, Vec<Vec<Vec<f64>>>)> {
    let m = out.join("means.aspr");
    let s = out.join("stds.aspr");
    Ok((store::unstack3(TensorContainer::read(&m)?, &m)?, store::unstack3(TensorContainer::read(&s)?, &s)?))
}

/// RMSE of every posterior mean against its truth: `[observation][iteration]`.
pub fn rmse_table(means: &[Vec<Vec<f64>>], truth: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    means
        .iter()
        .zip(truth)
        .map(|(per_j, t)| per_j.iter().map(|m| rmse(m, t)).collect())
        .collect()
}

/// Writes `metrics.csv` and `rmse.svg` from the stored means and the test
/// set's truths.
pub fn emit_evaluation_views(out: &Path, test_dir: &Path, problem: &Problem) -> Result<()> {
    let (test, _) = load_test_set(test_dir, problem)?;
    let (means, stds) = read_stats(out)?;
    let truth = store::matrix_rows(test.x.view());
    let table = rmse_table(&means, &truth)?;
    let mut csv = String::from("observation,iteration,rmse,mean_std\n");
    for (t, row) in table.iter().enumerate() {
        for (j, e) in row.iter().enumerate() {
            let s = &stds[t][j];
            csv.push_str(&format!("{},{},{},{}\n", t, j + 1, e, s.iter().sum::<f64>() / s.len().max(1) as f64));
        }
    }
    write_atomic(&out.join("metrics.csv"), csv.as_bytes())?;
    let j = table.first().map_or(0, Vec::len);
    let groups: Vec<Vec<f64>> = (0..j).map(|k| table.iter().map(|r| r[k]).collect()).collect();
    let labels: Vec<String> = (1..=j).map(|k| format!("ASPIRE {k}")).collect();
    write_atomic(&out.join("rmse.svg"), emit::boxplot_svg("posterior-mean RMSE per iteration", &labels, &groups).as_bytes())
}

pub fn evaluate(model_dir: &Path, test_dir: &Path, out: &Path, samples: usize) -> Result<Manifest> {
    let loaded = load_model(model_dir)?;
    let (test, _) = load_test_set(test_dir, &loaded.problem)?;
    let stats = posterior_stats(&loaded, &test, samples)?;
    write_stats(out, &stats)?;
    emit_evaluation_views(out, test_dir, &loaded.problem)?;
    let mut m = Manifest::new(ArtifactKind::Evaluation, &loaded.manifest.config, loaded.problem.forward().name(), stats.ledger);
    m.inputs = vec![model_dir.to_path_buf(), test_dir.to_path_buf()];
    m.files = vec!["means.aspr".into(), "stds.aspr".into()];
    m.sample_count = Some(samples);
    m.write(out)?;
    Ok(m)
}

/// One report per iteration, pooling the region of interest of every test
/// observation.
pub fn calibration_reports(
    means: &[Vec<Vec<f64>>],
    stds: &[Vec<Vec<f64>>],
    truth: &[Vec<f64>],
    roi: &[bool],
    cfg: &ExperimentConfig,
) -> Result<Vec<CalibrationReport>> {
    let j = means.first().map_or(0, Vec::len);
    (0..j)
        .map(|k| {
            let (mut s, mut m, mut t) = (Vec::new(), Vec::new(), Vec::new());
            for obs in 0..means.len() {
                for (i, &keep) in roi.iter().enumerate() {
                    if keep {
                        s.push(stds[obs][k][i]);
                        m.push(means[obs][k][i]);
                        t.push(truth[obs][i]);
                    }
                }
            }
            calibration_curve(&s, &m, &t, cfg.metrics.bins, cfg.metrics.error_scale)
        })
        .collect()
}

/// Writes `calibration.csv`, `uce.csv` and `calibration.svg` from the
/// stored statistics.
pub fn emit_calibration_views(out: &Path, test_dir: &Path, problem: &Problem, cfg: &ExperimentConfig) -> Result<Vec<CalibrationReport>> {
    let (test, _) = load_test_set(test_dir, problem)?;
    let (means, stds) = read_stats(out)?;
    let truth = store::matrix_rows(test.x.view());
    let reports = calibration_reports(&means, &stds, &truth, &problem.region_of_interest(), cfg)?;
    write_atomic(&out.join("calibration.csv"), emit::calibration_csv(&reports).as_bytes())?;
    let mut uce = String::from("iteration,uce,empty_bins\n");
    for (j, r) in reports.iter().enumerate() {
        uce.push_str(&format!("{},{},{}\n", j + 1, r.uce, r.empty_bins.len()));
    }
    write_atomic(&out.join("uce.csv"), uce.as_bytes())?;
    write_atomic(&out.join("calibration.svg"), emit::calibration_svg("calibration per iteration", &reports).as_bytes())?;
    Ok(reports)
}

pub fn calibrate(model_dir: &Path, test_dir: &Path, out: &Path, samples: usize, bins: usize) -> Result<(Manifest, Vec<CalibrationReport>)> {
    let loaded = load_model(model_dir)?;
    let mut cfg = loaded.manifest.config.clone();
    cfg.metrics.bins = bins;
    cfg.validate()?;
    let (test, _) = load_test_set(test_dir, &loaded.problem)?;
    let stats = posterior_stats(&loaded, &test, samples)?;
    write_stats(out, &stats)?;
    let reports = emit_calibration_views(out, test_dir, &loaded.problem, &cfg)?;
    let mut m = Manifest::new(ArtifactKind::Calibration, &cfg, loaded.problem.forward().name(), stats.ledger);
    m.inputs = vec![model_dir.to_path_buf(), test_dir.to_path_buf()];
    m.files = vec!["means.aspr".into(), "stds.aspr".into()];
    m.sample_count = Some(samples);
    m.write(out)?;
    Ok((m, reports))
}

/// Directory for one subcommand's output under the configured root.
pub fn default_out(cfg: &ExperimentConfig, name: &str) -> PathBuf {
    cfg.output.dir.join(name)
}
