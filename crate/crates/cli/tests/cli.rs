use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = r#"schema_version = 1

[problem]
kind = "stylized"

[problem.stylized]
n = 4
m = 12

[data]
n = 40
test_observations = 3

[aspire]
iterations = 2
s_train = 8
hidden = 8
embed = 8

[aspire.train]
max_epochs = 2

[metrics]
samples = 16
"#;

fn aspire(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_aspire"))
        .current_dir(dir)
        .env_remove("ASPIRE_SEED")
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) -> String {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("small.toml"), SMALL).unwrap();
    dir
}

#[test]
fn cost_reproduces_the_break_even_counts() {
    let dir = tempfile::tempdir().unwrap();
    let text = ok(&aspire(dir.path(), &["cost", "--method", "aspire", "--N", "1000", "--J", "4"]));
    assert!(text.contains("9000"), "{text}");
    assert!(text.contains("break-even vs meanfield: 15.01"), "{text}");
    assert!(text.contains("break-even vs nonamortized: 2.37"), "{text}");

    let custom = ok(&aspire(dir.path(), &["cost", "--method", "aspire", "--N", "10", "--J", "1", "--versus", "meanfield:0:0:5"]));
    assert!(custom.contains("break-even vs meanfield: 3.20"), "{custom}");
    assert!(!custom.contains("nonamortized"));
}

#[test]
fn zero_iterations_are_rejected_with_a_config_exit_code() {
    let dir = tempfile::tempdir().unwrap();
    let out = aspire(dir.path(), &["cost", "--method", "aspire", "--N", "1000", "--J", "0"]);
    assert_eq!(out.status.code(), Some(2));
    let bad = aspire(dir.path(), &["cost", "--method", "gradient", "--N", "1", "--J", "1"]);
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn config_errors_and_missing_files_map_to_their_exit_codes() {
    let dir = setup();
    fs::write(dir.path().join("bad.toml"), format!("{SMALL}\n[extra]\nkey = 1\n")).unwrap();
    assert_eq!(aspire(dir.path(), &["generate-data", "--config", "bad.toml"]).status.code(), Some(2));
    assert_eq!(aspire(dir.path(), &["generate-data", "--config", "absent.toml"]).status.code(), Some(4));
    assert_eq!(aspire(dir.path(), &["evaluate", "--model", "nowhere", "--test", "nowhere"]).status.code(), Some(4));
}

#[test]
fn printed_default_configs_load_back() {
    let dir = tempfile::tempdir().unwrap();
    for problem in ["stylized", "wave2d"] {
        let text = ok(&aspire(dir.path(), &["config", "--problem", problem]));
        let path = dir.path().join(format!("{problem}.toml"));
        fs::write(&path, text).unwrap();
        let out = aspire(dir.path(), &["train", "--config", path.to_str().unwrap(), "--data", "missing"]);
        // The config parses; only the data directory is absent.
        assert_eq!(out.status.code(), Some(4), "{}", String::from_utf8_lossy(&out.stderr));
    }
}

#[test]
fn seed_variable_overrides_the_configured_seeds() {
    let dir = setup();
    let run = |seed: Option<&str>, out: &str| {
        let mut c = Command::new(env!("CARGO_BIN_EXE_aspire"));
        c.current_dir(dir.path()).env_remove("ASPIRE_SEED");
        if let Some(s) = seed {
            c.env("ASPIRE_SEED", s);
        }
        c.args(["generate-data", "--config", "small.toml", "--out", out]).output().unwrap()
    };
    ok(&run(None, "plain"));
    ok(&run(Some("99"), "a"));
    ok(&run(Some("99"), "b"));
    let x = |d: &str| fs::read(dir.path().join(d).join("x.aspr")).unwrap();
    assert_eq!(x("a"), x("b"));
    assert_ne!(x("a"), x("plain"));
    assert_eq!(run(Some("not-a-number"), "c").status.code(), Some(2));
}

#[test]
fn full_pipeline_with_interruption_and_resume() {
    let dir = setup();
    let d = dir.path();
    let gen = ok(&aspire(d, &["--jobs", "1", "generate-data", "--config", "small.toml"]));
    assert!(gen.contains("40 pairs"), "{gen}");
    ok(&aspire(d, &["generate-data", "--config", "small.toml", "--test"]));

    let partial = ok(&aspire(d, &["train", "--config", "small.toml", "--data", "runs/data", "--stop-after", "1"]));
    assert!(partial.contains("1 of 2"), "{partial}");
    assert_eq!(aspire(d, &["train", "--config", "small.toml", "--data", "runs/data"]).status.code(), Some(2));
    assert_eq!(aspire(d, &["infer", "--model", "runs/model", "--data", "runs/test", "--index", "0"]).status.code(), Some(4));
    let done = ok(&aspire(d, &["train", "--config", "small.toml", "--data", "runs/data", "--resume"]));
    assert!(done.contains("2 of 2") && done.contains("complete"), "{done}");

    let inf = ok(&aspire(d, &["infer", "--model", "runs/model", "--data", "runs/test", "--index", "2", "--samples", "8"]));
    assert!(inf.contains("(4 online solves)"), "{inf}");
    for j in 1..=2 {
        for f in ["samples.aspr", "mean.pgm", "mean.csv", "std.pgm", "std.csv"] {
            assert!(d.join(format!("runs/inference/iteration-{j:02}/{f}")).is_file(), "{f}");
        }
    }
    let out_of_range = aspire(d, &["infer", "--model", "runs/model", "--data", "runs/test", "--index", "3"]);
    assert_eq!(out_of_range.status.code(), Some(2));

    // A single observation passed as a container file.
    let y = d.join("runs/test/y.aspr");
    let rows = aspire_core::harness::TensorContainer::read(&y).unwrap().into_rows().unwrap();
    aspire_core::harness::TensorContainer::vector(rows[1].clone()).write(&d.join("y1.aspr")).unwrap();
    ok(&aspire(d, &["infer", "--model", "runs/model", "--observation", "y1.aspr", "--samples", "8", "--out", "single"]));
    assert!(d.join("single/iteration-02/mean.csv").is_file());

    ok(&aspire(d, &["evaluate", "--model", "runs/model", "--test", "runs/test"]));
    let metrics = fs::read_to_string(d.join("runs/evaluation/metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 1 + 3 * 2);
    assert!(d.join("runs/evaluation/rmse.svg").is_file());

    let cal = ok(&aspire(d, &["calibrate", "--model", "runs/model", "--test", "runs/test", "--bins", "4"]));
    assert_eq!(cal.lines().filter(|l| l.starts_with("ASPIRE")).count(), 2, "{cal}");
    let table = fs::read_to_string(d.join("runs/calibration/calibration.csv")).unwrap();
    assert_eq!(table.lines().count(), 1 + 2 * 4);
    assert_eq!(aspire(d, &["calibrate", "--model", "runs/model", "--test", "runs/test", "--bins", "0"]).status.code(), Some(2));

    let flow = d.join("runs/model/iteration-01/flow.aspr");
    let mut bytes = fs::read(&flow).unwrap();
    let last = bytes.len() - 8;
    bytes[last] ^= 1;
    fs::write(&flow, bytes).unwrap();
    assert_eq!(aspire(d, &["evaluate", "--model", "runs/model", "--test", "runs/test"]).status.code(), Some(4));
}
