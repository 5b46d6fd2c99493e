use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::aspire::{AspireConfig, FiducialInit};
use crate::error::{Error, Result};
use crate::metrics::ErrorScale;
use crate::nonamortized::WeakConfig;
use crate::random::derive_seed;
use crate::wave2d::{DeskConfig, PhantomConfig, WATER_VELOCITY};

pub const SCHEMA_VERSION: u32 = 1;

/// Environment variable that replaces every seed in `[seeds]`.
pub const SEED_ENV: &str = "ASPIRE_SEED";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProblemKind {
    Stylized,
    Wave2d,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StylizedConfig {
    pub n: usize,
    pub m: usize,
    pub noise_std: f64,
    /// Seed of the random operator and prior.
    pub instance_seed: u64,
}

impl Default for StylizedConfig {
    fn default() -> Self {
        Self {
            n: 16,
            m: 80,
            noise_std: 0.5,
            instance_seed: 7,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemConfig {
    pub kind: ProblemKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stylized: Option<StylizedConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wave2d: Option<DeskConfig>,
    /// Phantom prior of the wave problem; defaults to the desk phantoms on
    /// the configured grid.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub phantom: Option<PhantomConfig>,
}

/// Starting values of `[aspire]` for a problem kind; keys given in a file
/// override them one by one.
///
/// Both kinds warm-start each flow from the previous one at half the
/// previous learning rate. Wave models also start every fiducial in water
/// and standardize the target with one shared scale. Per-pixel scales break
/// down on phantoms: a pixel that is skull in a single training draw gets a
/// tiny spread and turns a validation skull into a huge outlier.
pub fn aspire_defaults(kind: ProblemKind) -> AspireConfig {
    let base = AspireConfig {
        warm_start: true,
        warm_lr_factor: 0.5,
        ..AspireConfig::default()
    };
    match kind {
        ProblemKind::Stylized => base,
        ProblemKind::Wave2d => AspireConfig {
            fiducial_init: FiducialInit::Constant(WATER_VELOCITY),
            target_floor: 5.0,
            train: crate::flow::TrainConfig {
                target_noise_std: 0.1,
                max_epochs: 20,
                ..base.train.clone()
            },
            ..base
        },
    }
}

/// Overlays `over` on `base`. Only `train` is merged key by key; any other
/// value, including the tagged `fiducial_init` table, is replaced whole.
fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) if k == "train" => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

impl ProblemConfig {
    pub fn stylized(cfg: StylizedConfig) -> Self {
        Self {
            kind: ProblemKind::Stylized,
            stylized: Some(cfg),
            wave2d: None,
            phantom: None,
        }
    }

    pub fn wave2d(cfg: DeskConfig) -> Self {
        Self {
            kind: ProblemKind::Wave2d,
            stylized: None,
            wave2d: Some(cfg),
            phantom: None,
        }
    }

    pub fn stylized_section(&self) -> StylizedConfig {
        self.stylized.clone().unwrap_or_default()
    }

    pub fn wave_section(&self) -> DeskConfig {
        self.wave2d.clone().unwrap_or_default()
    }

    pub fn phantom_section(&self) -> PhantomConfig {
        let desk = self.wave_section();
        self.phantom.clone().unwrap_or_else(|| PhantomConfig::desk(desk.nx, desk.ny, desk.dx))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Training pairs `N`.
    pub n: usize,
    pub test_observations: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            n: 1000,
            test_observations: 50,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricsConfig {
    pub bins: usize,
    pub samples: usize,
    pub error_scale: ErrorScale,
    pub convergence_counts: Vec<usize>,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self {
            bins: 10,
            samples: 512,
            error_scale: ErrorScale::Root,
            convergence_counts: vec![32, 64, 128, 256, 512, 1024],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SeedConfig {
    /// Prior draws and noise of the training set.
    pub data: u64,
    /// Truths and noise of the test set.
    pub test: u64,
    /// Split, initialization, shuffling and fiducial sampling.
    pub train: u64,
    /// Latent draws at inference and in refinement.
    pub infer: u64,
}

impl Default for SeedConfig {
    fn default() -> Self {
        Self {
            data: 1,
            test: 2,
            train: 3,
            infer: 4,
        }
    }
}

impl SeedConfig {
    pub fn from_master(master: u64) -> Self {
        Self {
            data: derive_seed(master, 1),
            test: derive_seed(master, 2),
            train: derive_seed(master, 3),
            infer: derive_seed(master, 4),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    pub dir: PathBuf,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self { dir: PathBuf::from("runs") }
    }
}

/// One experiment, as read from a TOML file.
///
/// ```toml
/// schema_version = 1
///
/// [problem]
/// kind = "stylized"
///
/// [problem.stylized]
/// n = 16
/// m = 80
///
/// [data]
/// n = 1000
///
/// [aspire]
/// iterations = 3
/// ```
///
/// Seeds live in `[seeds]` only; the `seed` fields of `[aspire]`,
/// `[aspire.train]` and `[nonamortized]` must stay at zero and are filled in
/// from `[seeds]` when the run starts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub problem: ProblemConfig,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub aspire: AspireConfig,
    #[serde(default)]
    pub nonamortized: WeakConfig,
    #[serde(default)]
    pub metrics: MetricsConfig,
    #[serde(default)]
    pub seeds: SeedConfig,
    #[serde(default)]
    pub output: OutputConfig,
}

impl ExperimentConfig {
    pub fn new(problem: ProblemConfig) -> Self {
        let aspire = aspire_defaults(problem.kind);
        Self {
            schema_version: SCHEMA_VERSION,
            problem,
            data: DataConfig::default(),
            aspire,
            nonamortized: WeakConfig::default(),
            metrics: MetricsConfig::default(),
            seeds: SeedConfig::default(),
            output: OutputConfig::default(),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let bad = |e: &dyn std::fmt::Display| Error::Config(e.to_string());
        let mut table: toml::Table = toml::from_str(text).map_err(|e| bad(&e))?;
        let problem: ProblemConfig = table
            .get("problem")
            .cloned()
            .ok_or_else(|| Error::Config("missing [problem] section".into()))?
            .try_into()
            .map_err(|e| bad(&e))?;
        let mut aspire = toml::Table::try_from(aspire_defaults(problem.kind)).map_err(|e| bad(&e))?;
        match table.remove("aspire") {
            Some(toml::Value::Table(t)) => merge(&mut aspire, t),
            Some(_) => return Err(Error::Config("aspire must be a table".into())),
            None => {}
        }
        table.insert("aspire".into(), toml::Value::Table(aspire));
        let cfg: Self = table.try_into().map_err(|e| bad(&e))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration is always representable")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    /// Applies `ASPIRE_SEED` if it is set in the environment.
    pub fn with_env_seed(mut self) -> Result<Self> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            let master = v
                .trim()
                .parse::<u64>()
                .map_err(|_| Error::Config(format!("{SEED_ENV}={v:?} is not an unsigned integer")))?;
            self.seeds = SeedConfig::from_master(master);
        }
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        let p = &self.problem;
        match p.kind {
            ProblemKind::Stylized if p.wave2d.is_some() || p.phantom.is_some() => {
                return Err(Error::Config("[problem.wave2d] and [problem.phantom] need kind = \"wave2d\"".into()));
            }
            ProblemKind::Wave2d if p.stylized.is_some() => {
                return Err(Error::Config("[problem.stylized] needs kind = \"stylized\"".into()));
            }
            _ => {}
        }
        if self.data.n < 2 {
            return Err(Error::Config(format!("data.n must be at least 2, got {}", self.data.n)));
        }
        if self.aspire.seed != 0 || self.aspire.train.seed != 0 || self.nonamortized.seed != 0 {
            return Err(Error::Config("seeds are set in [seeds]; leave aspire.seed, aspire.train.seed and nonamortized.seed at 0".into()));
        }
        self.aspire.validate()?;
        self.nonamortized.validate()?;
        if self.metrics.bins == 0 || self.metrics.samples == 0 {
            return Err(Error::Config("metrics.bins and metrics.samples must be positive".into()));
        }
        if self.metrics.convergence_counts.windows(2).any(|w| w[0] >= w[1]) || self.metrics.convergence_counts.first() == Some(&0) {
            return Err(Error::Config("metrics.convergence_counts must be positive and strictly ascending".into()));
        }
        Ok(())
    }

    /// `[aspire]` with the training seed filled in.
    pub fn aspire_config(&self) -> AspireConfig {
        AspireConfig {
            seed: self.seeds.train,
            ..self.aspire.clone()
        }
    }

    pub fn weak_config(&self) -> WeakConfig {
        WeakConfig {
            seed: self.seeds.infer,
            ..self.nonamortized.clone()
        }
    }

    /// CRC-32 of the canonical TOML rendering, as hex.
    pub fn hash(&self) -> String {
        format!("{:08x}", crc32fast::hash(self.to_toml().as_bytes()))
    }
}
