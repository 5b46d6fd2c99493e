use std::path::{Path, PathBuf};
use std::process::ExitCode;

use aspire_core::aspire::{break_even, cost_formula, Method};
use aspire_core::harness::run;
use aspire_core::harness::store::Dataset;
use aspire_core::harness::{ArtifactKind, ExperimentConfig, Manifest, ProblemConfig, StylizedConfig};
use aspire_core::wave2d::DeskConfig;
use aspire_core::{Error, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "aspire", version, about = "Amortized posterior inference with iteratively refined score summaries")]
struct Cli {
    /// Worker threads for parallel stages (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print a complete default configuration for a problem.
    Config {
        #[arg(long, value_enum, default_value = "stylized")]
        problem: ProblemArg,
    },
    /// Draw prior samples and simulate their observations.
    GenerateData {
        #[command(flatten)]
        config: ConfigArg,
        /// Generate the held-out test set instead of the training set.
        #[arg(long)]
        test: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the sequence of conditional flows.
    Train {
        #[command(flatten)]
        config: ConfigArg,
        /// Training set written by `generate-data`.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Continue an interrupted run in `--out`.
        #[arg(long)]
        resume: bool,
        #[arg(long, hide = true)]
        stop_after: Option<usize>,
    },
    /// Sample the posterior of one observation.
    Infer {
        #[arg(long)]
        model: PathBuf,
        /// Observation container (a vector of data values).
        #[arg(long, conflicts_with_all = ["data", "index"], required_unless_present = "data")]
        observation: Option<PathBuf>,
        /// Take the observation from a generated data set instead.
        #[arg(long, requires = "index")]
        data: Option<PathBuf>,
        #[arg(long)]
        index: Option<usize>,
        #[arg(long, default_value_t = 512)]
        samples: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Posterior-mean RMSE of every iteration over a test set.
    Evaluate {
        #[command(flatten)]
        target: TestArgs,
    },
    /// Calibration curves and UCE of every iteration over a test set.
    Calibrate {
        #[command(flatten)]
        target: TestArgs,
        #[arg(long, default_value_t = 10)]
        bins: usize,
    },
    /// Forward-equivalent solve counts and break-even ratios.
    Cost {
        #[arg(long)]
        method: Method,
        #[arg(long = "N", default_value_t = 0)]
        n: u64,
        #[arg(long = "J", default_value_t = 0)]
        j: u64,
        #[arg(long = "L", default_value_t = 0)]
        l: u64,
        /// Methods to compare against, as `method:N:J:L`. Without this flag
        /// ASPIRE is compared with meanfield:0:0:300 and nonamortized:1000:1:400.
        #[arg(long, value_parser = parse_versus)]
        versus: Vec<(Method, u64, u64, u64)>,
    },
}

#[derive(Args)]
struct ConfigArg {
    /// Experiment configuration (TOML). `ASPIRE_SEED` overrides its seeds.
    #[arg(long)]
    config: PathBuf,
}

#[derive(Args)]
struct TestArgs {
    #[arg(long)]
    model: PathBuf,
    /// Test set written by `generate-data --test`.
    #[arg(long)]
    test: PathBuf,
    /// Posterior samples per observation (default: `metrics.samples`).
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ProblemArg {
    Stylized,
    Wave2d,
}

fn parse_versus(s: &str) -> std::result::Result<(Method, u64, u64, u64), String> {
    let parts: Vec<&str> = s.split(':').collect();
    let [m, n, j, l] = parts[..] else {
        return Err(format!("expected method:N:J:L, got {s:?}"));
    };
    let num = |v: &str| v.parse::<u64>().map_err(|_| format!("{v:?} is not a count"));
    Ok((m.parse().map_err(|e: Error| e.to_string())?, num(n)?, num(j)?, num(l)?))
}

fn load_config(arg: &ConfigArg) -> Result<ExperimentConfig> {
    let cfg = ExperimentConfig::load(&arg.config)?.with_env_seed()?;
    cfg.validate()?;
    Ok(cfg)
}

fn model_out(model: &Path, name: &str) -> Result<PathBuf> {
    let m = Manifest::read(model)?;
    Ok(run::default_out(&m.config, name))
}

fn method_name(m: Method) -> &'static str {
    match m {
        Method::Aspire => "aspire",
        Method::Nonamortized => "nonamortized",
        Method::Meanfield => "meanfield",
    }
}

fn cost_table(method: Method, n: u64, j: u64, l: u64, versus: &[(Method, u64, u64, u64)]) -> Result<String> {
    if matches!(method, Method::Aspire | Method::Nonamortized) && j == 0 {
        return Err(Error::Config("--J must be at least 1".into()));
    }
    let versus: Vec<_> = match (versus.is_empty(), method) {
        (true, Method::Aspire) => vec![(Method::Meanfield, 0, 0, 300), (Method::Nonamortized, 1000, 1, 400)],
        _ => versus.to_vec(),
    };
    if versus.iter().any(|v| v.0 == Method::Nonamortized && v.2 == 0) {
        return Err(Error::Config("nonamortized comparisons need J >= 1".into()));
    }
    let mut out = format!("{:<14}{:>8}{:>6}{:>6}{:>10}{:>8}{:>10}\n", "method", "N", "J", "L", "offline", "online", "total");
    let row = |m: Method, n: u64, j: u64, l: u64| {
        let (off, on) = cost_formula(m, n, j, l);
        format!("{:<14}{:>8}{:>6}{:>6}{:>10}{:>8}{:>10}\n", method_name(m), n, j, l, off, on, off + on)
    };
    out.push_str(&row(method, n, j, l));
    for &(m, vn, vj, vl) in &versus {
        out.push_str(&row(m, vn, vj, vl));
    }
    let own = cost_formula(method, n, j, l);
    for &(m, vn, vj, vl) in &versus {
        let ratio = break_even(own, cost_formula(m, vn, vj, vl))?;
        out.push_str(&format!("break-even vs {}: {ratio:.2} test cases\n", method_name(m)));
    }
    Ok(out)
}

fn execute(cli: Cli) -> Result<()> {
    if let Some(jobs) = cli.jobs {
        if jobs == 0 {
            return Err(Error::Config("--jobs must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global()
            .map_err(|e| Error::Config(format!("cannot size the thread pool: {e}")))?;
    }
    match cli.command {
        Command::Config { problem } => {
            let p = match problem {
                ProblemArg::Stylized => ProblemConfig::stylized(StylizedConfig::default()),
                ProblemArg::Wave2d => ProblemConfig::wave2d(DeskConfig::default()),
            };
            print!("{}", ExperimentConfig::new(p).to_toml());
        }
        Command::GenerateData { config, test, out } => {
            let cfg = load_config(&config)?;
            let problem = aspire_core::harness::Problem::build(&cfg.problem)?;
            let out = out.unwrap_or_else(|| run::default_out(&cfg, if test { "test" } else { "data" }));
            let m = run::generate_data(&cfg, &problem, &out, test)?;
            println!("wrote {} pairs to {} ({} forward solves)", m.ledger.n, out.display(), m.ledger.offline_solves);
        }
        Command::Train { config, data, out, resume, stop_after } => {
            let cfg = load_config(&config)?;
            let problem = aspire_core::harness::Problem::build(&cfg.problem)?;
            let out = out.unwrap_or_else(|| run::default_out(&cfg, "model"));
            let r = run::train(&cfg, &problem, &data, &out, resume, stop_after)?;
            let state = if r.done { "complete" } else { "incomplete, rerun with --resume" };
            println!(
                "{} of {} iterations in {} ({state}); offline solves {}",
                r.completed, cfg.aspire.iterations, out.display(), r.ledger.offline_solves
            );
        }
        Command::Infer { model, observation, data, index, samples, out } => {
            if samples == 0 {
                return Err(Error::Config("--samples must be positive".into()));
            }
            let loaded = run::load_model(&model)?;
            let y = match (observation, data, index) {
                (Some(path), _, _) => run::read_observation(&path, &loaded.problem)?,
                (None, Some(dir), Some(i)) => {
                    let m = Manifest::expect(&dir, &[ArtifactKind::Dataset, ArtifactKind::TestSet])?;
                    if m.problem_id != loaded.model.problem_id {
                        return Err(Error::Config(format!("{} holds {} data, the model expects {}", dir.display(), m.problem_id, loaded.model.problem_id)));
                    }
                    let set = Dataset::read(&dir, &m)?;
                    let len = set.observations.len();
                    set.observations
                        .into_iter()
                        .nth(i)
                        .ok_or_else(|| Error::Config(format!("--index {i} is out of range for {len} observations")))?
                }
                _ => return Err(Error::Config("pass --observation or --data with --index".into())),
            };
            let out = match out {
                Some(o) => o,
                None => model_out(&model, "inference")?,
            };
            let m = run::infer_to_dir(&loaded, &model, &y, samples, &out)?;
            println!("{} samples per iteration in {} ({} online solves)", samples, out.display(), m.ledger.online_solves);
        }
        Command::Evaluate { target } => {
            let samples = resolve_samples(&target)?;
            let out = match target.out {
                Some(o) => o,
                None => model_out(&target.model, "evaluation")?,
            };
            run::evaluate(&target.model, &target.test, &out, samples)?;
            println!("metrics in {}", out.join("metrics.csv").display());
        }
        Command::Calibrate { target, bins } => {
            let samples = resolve_samples(&target)?;
            let out = match target.out {
                Some(o) => o,
                None => model_out(&target.model, "calibration")?,
            };
            let (_, reports) = run::calibrate(&target.model, &target.test, &out, samples, bins)?;
            for (j, r) in reports.iter().enumerate() {
                println!("ASPIRE {}: UCE {:.6}", j + 1, r.uce);
            }
        }
        Command::Cost { method, n, j, l, versus } => print!("{}", cost_table(method, n, j, l, &versus)?),
    }
    Ok(())
}

fn resolve_samples(t: &TestArgs) -> Result<usize> {
    let s = match t.samples {
        Some(s) => s,
        None => Manifest::read(&t.model)?.config.metrics.samples,
    };
    if s == 0 {
        return Err(Error::Config("--samples must be positive".into()));
    }
    Ok(s)
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
