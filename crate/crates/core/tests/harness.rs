use std::fs;
use std::path::Path;

use aspire_core::aspire::FiducialInit;
use aspire_core::harness::config::aspire_defaults;
use aspire_core::harness::run::{self, calibration_reports, emit_calibration_views, emit_evaluation_views, load_model};
use aspire_core::harness::store::{self, read_trainer_state};
use aspire_core::harness::{ExperimentConfig, Problem, ProblemConfig, ProblemKind, StylizedConfig, TensorContainer};
use aspire_core::metrics::{calibration_curve, rmse, uce};
use aspire_core::wave2d::{DeskConfig, WATER_VELOCITY};
use aspire_core::Error;

fn small_config() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::new(ProblemConfig::stylized(StylizedConfig {
        n: 4,
        m: 12,
        ..StylizedConfig::default()
    }));
    cfg.data.n = 48;
    cfg.data.test_observations = 4;
    cfg.aspire.iterations = 2;
    cfg.aspire.s_train = 8;
    cfg.aspire.hidden = 8;
    cfg.aspire.embed = 8;
    cfg.aspire.train.max_epochs = 3;
    cfg.metrics.samples = 24;
    cfg.metrics.bins = 4;
    cfg
}

fn files_of(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().display().to_string(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

/// Trains `small_config` end to end and returns (data, test, model) dirs.
fn trained(root: &Path) -> (ExperimentConfig, std::path::PathBuf, std::path::PathBuf, std::path::PathBuf) {
    let cfg = small_config();
    let problem = Problem::build(&cfg.problem).unwrap();
    let (data, test, model) = (root.join("data"), root.join("test"), root.join("model"));
    run::generate_data(&cfg, &problem, &data, false).unwrap();
    run::generate_data(&cfg, &problem, &test, true).unwrap();
    let r = run::train(&cfg, &problem, &data, &model, false, None).unwrap();
    assert!(r.done);
    (cfg, data, test, model)
}

#[test]
fn config_round_trips_through_toml() {
    for problem in [ProblemConfig::stylized(StylizedConfig::default()), ProblemConfig::wave2d(DeskConfig::default())] {
        let cfg = ExperimentConfig::new(problem);
        let back = ExperimentConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
    }
}

#[test]
fn unknown_keys_are_rejected() {
    let base = "schema_version = 1\n[problem]\nkind = \"stylized\"\n";
    for extra in ["[aspire]\nbogus = 1\n", "[aspire.train]\nlr = 0.1\n", "[surprise]\nx = 1\n", "[data]\nN = 3\n", "[problem.stylized]\nsize = 3\n"] {
        let err = ExperimentConfig::from_toml(&format!("{base}{extra}")).unwrap_err();
        assert!(matches!(err, Error::Config(_)), "{extra}: {err}");
    }
    assert!(ExperimentConfig::from_toml(base).is_ok());
}

#[test]
fn schema_version_and_seed_placement_are_checked() {
    let wrong = "schema_version = 2\n[problem]\nkind = \"stylized\"\n";
    assert!(matches!(ExperimentConfig::from_toml(wrong), Err(Error::Config(_))));
    let seeded = "schema_version = 1\n[problem]\nkind = \"stylized\"\n[aspire]\nseed = 5\n";
    assert!(matches!(ExperimentConfig::from_toml(seeded), Err(Error::Config(_))));
    let mixed = "schema_version = 1\n[problem]\nkind = \"stylized\"\n[problem.wave2d]\nnx = 32\n";
    assert!(matches!(ExperimentConfig::from_toml(mixed), Err(Error::Config(_))));
}

#[test]
fn wave_defaults_survive_partial_overrides() {
    let text = "schema_version = 1\n[problem]\nkind = \"wave2d\"\n[aspire.train]\nmax_epochs = 3\n";
    let cfg = ExperimentConfig::from_toml(text).unwrap();
    let preset = aspire_defaults(ProblemKind::Wave2d);
    assert_eq!(cfg.aspire.train.max_epochs, 3);
    assert_eq!(cfg.aspire.train.target_noise_std, preset.train.target_noise_std);
    assert_eq!(cfg.aspire.fiducial_init, FiducialInit::Constant(WATER_VELOCITY));
    assert_eq!(cfg.aspire.target_floor, preset.target_floor);

    let replaced = "schema_version = 1\n[problem]\nkind = \"wave2d\"\n[aspire.fiducial_init]\nrule = \"zeros\"\n";
    assert_eq!(ExperimentConfig::from_toml(replaced).unwrap().aspire.fiducial_init, FiducialInit::Zeros);
}

#[test]
fn two_pair_smoke_run_counts_one_solve_per_pair() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config();
    cfg.data.n = 2;
    let problem = Problem::build(&cfg.problem).unwrap();
    let m = run::generate_data(&cfg, &problem, dir.path(), false).unwrap();
    assert_eq!(m.ledger.offline_solves, 2);
    let (set, _) = run::load_dataset(dir.path(), &problem).unwrap();
    assert_eq!(set.x.nrows(), 2);
    assert_eq!(set.observations.len(), 2);
}

#[test]
fn generating_twice_is_byte_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let cfg = small_config();
    let problem = Problem::build(&cfg.problem).unwrap();
    run::generate_data(&cfg, &problem, a.path(), false).unwrap();
    run::generate_data(&cfg, &problem, b.path(), false).unwrap();
    assert_eq!(files_of(a.path()), files_of(b.path()));
}

#[test]
fn wave_data_generation_is_deterministic_and_in_range() {
    let mut desk = DeskConfig::default();
    desk.nx = 24;
    desk.ny = 24;
    desk.n_receivers = 8;
    desk.ring_radius_cells = 9.0;
    let mut cfg = ExperimentConfig::new(ProblemConfig::wave2d(desk));
    cfg.data.n = 2;
    let problem = Problem::build(&cfg.problem).unwrap();
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    run::generate_data(&cfg, &problem, a.path(), false).unwrap();
    run::generate_data(&cfg, &problem, b.path(), false).unwrap();
    assert_eq!(files_of(a.path()), files_of(b.path()));
    let (set, _) = run::load_dataset(a.path(), &problem).unwrap();
    assert!(set.x.iter().all(|v| (1300.0..=3200.0).contains(v)));
}

#[test]
fn interrupted_training_resumes_to_the_same_model() {
    let root = tempfile::tempdir().unwrap();
    let (cfg, data, _, model) = trained(root.path());
    let problem = Problem::build(&cfg.problem).unwrap();

    let resumed = root.path().join("resumed");
    let first = run::train(&cfg, &problem, &data, &resumed, false, Some(1)).unwrap();
    assert_eq!((first.completed, first.done), (1, false));
    assert_eq!(read_trainer_state(&resumed).unwrap().unwrap().completed, 1);
    assert!(matches!(run::train(&cfg, &problem, &data, &resumed, false, None), Err(Error::Config(_))));
    assert!(load_model(&resumed).is_err());

    let second = run::train(&cfg, &problem, &data, &resumed, true, None).unwrap();
    assert_eq!((second.completed, second.done), (2, true));
    // Histories carry wall-clock times; everything else must match bit for bit.
    let timeless = |dir: &Path| {
        files_of(dir)
            .into_iter()
            .filter(|(name, _)| !name.ends_with("history.csv") && !name.ends_with("stage.toml"))
            .collect::<Vec<_>>()
    };
    assert_eq!(timeless(&model), timeless(&resumed));
    let (a, b) = (load_model(&model).unwrap().model, load_model(&resumed).unwrap().model);
    for (x, y) in a.iterations.iter().zip(&b.iterations) {
        assert_eq!(x.flow, y.flow);
        assert_eq!(x.target_stats, y.target_stats);
        let objectives = |h: &aspire_core::flow::TrainHistory| {
            h.epochs.iter().map(|e| (e.train_objective, e.validation_objective)).collect::<Vec<_>>()
        };
        assert_eq!(objectives(&x.history), objectives(&y.history));
    }
}

#[test]
fn resuming_with_a_different_config_is_refused() {
    let root = tempfile::tempdir().unwrap();
    let mut cfg = small_config();
    let problem = Problem::build(&cfg.problem).unwrap();
    let data = root.path().join("data");
    let model = root.path().join("model");
    run::generate_data(&cfg, &problem, &data, false).unwrap();
    run::train(&cfg, &problem, &data, &model, false, Some(1)).unwrap();
    cfg.aspire.train.max_epochs += 1;
    assert!(matches!(run::train(&cfg, &problem, &data, &model, true, None), Err(Error::Config(_))));
}

#[test]
fn history_csv_has_one_row_per_epoch() {
    let root = tempfile::tempdir().unwrap();
    let (_, _, _, model) = trained(root.path());
    let loaded = load_model(&model).unwrap();
    for (j, stage) in loaded.model.iterations.iter().enumerate() {
        let csv = fs::read_to_string(model.join(format!("iteration-{:02}/history.csv", j + 1))).unwrap();
        assert_eq!(csv.lines().count() - 1, stage.history.epochs.len());
    }
}

#[test]
fn inference_writes_one_output_per_iteration_and_costs_two_per_iteration() {
    let root = tempfile::tempdir().unwrap();
    let (_, _, test, model) = trained(root.path());
    let loaded = load_model(&model).unwrap();
    let (set, _) = run::load_test_set(&test, &loaded.problem).unwrap();
    let out = root.path().join("inference");
    let m = run::infer_to_dir(&loaded, &model, &set.observations[0], 16, &out).unwrap();
    let j = loaded.model.j();
    assert_eq!(m.ledger.online_solves, 2 * j as u64);
    let dirs = fs::read_dir(&out).unwrap().filter(|e| e.as_ref().unwrap().path().is_dir()).count();
    assert_eq!(dirs, j);
    let samples = TensorContainer::read(&out.join("iteration-02/samples.aspr")).unwrap();
    assert_eq!(samples.shape, vec![16, loaded.problem.forward().dim_x()]);

    let before = files_of(&out);
    for k in 1..=j {
        for f in ["mean.pgm", "mean.csv", "std.pgm", "std.csv"] {
            fs::remove_file(out.join(format!("iteration-{k:02}/{f}"))).unwrap();
        }
    }
    store::emit_inference_views(&out, j, loaded.problem.image_shape()).unwrap();
    assert_eq!(files_of(&out), before);
}

#[test]
fn evaluation_views_are_reproducible_and_recomputable() {
    let root = tempfile::tempdir().unwrap();
    let (cfg, _, test, model) = trained(root.path());
    let out = root.path().join("evaluation");
    run::evaluate(&model, &test, &out, 24).unwrap();
    let before = files_of(&out);
    fs::remove_file(out.join("metrics.csv")).unwrap();
    fs::remove_file(out.join("rmse.svg")).unwrap();
    let problem = Problem::build(&cfg.problem).unwrap();
    emit_evaluation_views(&out, &test, &problem).unwrap();
    assert_eq!(files_of(&out), before);

    let means = store::unstack3(TensorContainer::read(&out.join("means.aspr")).unwrap(), &out).unwrap();
    let (set, _) = run::load_test_set(&test, &problem).unwrap();
    let csv = fs::read_to_string(out.join("metrics.csv")).unwrap();
    let rows: Vec<Vec<&str>> = csv.lines().skip(1).map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), cfg.data.test_observations * cfg.aspire.iterations);
    for r in rows {
        let (t, j): (usize, usize) = (r[0].parse().unwrap(), r[1].parse().unwrap());
        let truth = set.x.row(t).to_vec();
        let expect = rmse(&means[t][j - 1], &truth).unwrap();
        assert_eq!(r[2].parse::<f64>().unwrap(), expect);
    }
}

#[test]
fn single_observation_test_set_gives_one_row_per_iteration() {
    let root = tempfile::tempdir().unwrap();
    let (mut cfg, _, _, model) = trained(root.path());
    cfg.data.test_observations = 1;
    let problem = Problem::build(&cfg.problem).unwrap();
    let test = root.path().join("one");
    run::generate_data(&cfg, &problem, &test, true).unwrap();
    let out = root.path().join("evaluation");
    run::evaluate(&model, &test, &out, 8).unwrap();
    let csv = fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert_eq!(csv.lines().count() - 1, cfg.aspire.iterations);
}

#[test]
fn calibration_uce_matches_a_direct_recomputation() {
    let root = tempfile::tempdir().unwrap();
    let (cfg, _, test, model) = trained(root.path());
    let out = root.path().join("calibration");
    let (_, reports) = run::calibrate(&model, &test, &out, 24, 5).unwrap();
    assert_eq!(reports.len(), cfg.aspire.iterations);

    let problem = Problem::build(&cfg.problem).unwrap();
    let (set, _) = run::load_test_set(&test, &problem).unwrap();
    let means = store::unstack3(TensorContainer::read(&out.join("means.aspr")).unwrap(), &out).unwrap();
    let stds = store::unstack3(TensorContainer::read(&out.join("stds.aspr")).unwrap(), &out).unwrap();
    let uce_csv = fs::read_to_string(out.join("uce.csv")).unwrap();
    for (j, line) in uce_csv.lines().skip(1).enumerate() {
        let (mut s, mut m, mut t) = (Vec::new(), Vec::new(), Vec::new());
        for obs in 0..means.len() {
            s.extend(&stds[obs][j]);
            m.extend(&means[obs][j]);
            t.extend(set.x.row(obs).iter());
        }
        let direct = calibration_curve(&s, &m, &t, 5, cfg.metrics.error_scale).unwrap();
        let stored: f64 = line.split(',').nth(1).unwrap().parse().unwrap();
        assert_eq!(stored, direct.uce);
        assert!((uce(&direct).unwrap() - stored).abs() < 1e-12);
    }

    let before = files_of(&out);
    for f in ["calibration.csv", "uce.csv", "calibration.svg"] {
        fs::remove_file(out.join(f)).unwrap();
    }
    let mut with_bins = cfg.clone();
    with_bins.metrics.bins = 5;
    emit_calibration_views(&out, &test, &problem, &with_bins).unwrap();
    assert_eq!(files_of(&out), before);

    let truth: Vec<Vec<f64>> = set.x.rows().into_iter().map(|r| r.to_vec()).collect();
    let again = calibration_reports(&means, &stds, &truth, &problem.region_of_interest(), &with_bins).unwrap();
    for (a, r) in again.iter().zip(&reports) {
        assert_eq!((a.uce, &a.counts), (r.uce, &r.counts));
    }
}

#[test]
fn damaged_containers_are_reported_as_format_errors() {
    let root = tempfile::tempdir().unwrap();
    let (_, _, _, model) = trained(root.path());
    let flow = model.join("iteration-01/flow.aspr");
    let mut bytes = fs::read(&flow).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x10;
    fs::write(&flow, bytes).unwrap();
    let err = load_model(&model).err().unwrap();
    assert!(matches!(err, Error::Format { .. }), "{err}");
    assert_eq!(err.exit_code(), 4);
}
