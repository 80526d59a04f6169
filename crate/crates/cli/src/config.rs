//! Experiment configuration files.

use std::env;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use lifted_core::network::{Activation, Architecture};
use lifted_core::objectives::ObjectiveSpec;
use lifted_core::trainer::TrainConfig;

/// Environment variable overriding the MNIST directory.
pub const DATA_DIR_ENV: &str = "LIFTED_DATA_DIR";

/// `<workspace>/data/mnist`.
pub fn default_data_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    /// IDX files in MNIST layout.
    Mnist,
    /// Gaussian class clusters generated from `synthetic`.
    Synthetic,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub num_classes: usize,
    pub dim: usize,
    pub n_pool: usize,
    pub n_test: usize,
    pub spread: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            num_classes: 4,
            dim: 16,
            n_pool: 600,
            n_test: 200,
            spread: 0.3,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub source: DataSource,
    /// MNIST directory; falls back to `LIFTED_DATA_DIR`, then the workspace
    /// `data/mnist`.
    pub dir: Option<PathBuf>,
    pub n_train: usize,
    pub n_val: usize,
    /// Seed of the train/validation subset; `None` uses the run seed.
    pub subset_seed: Option<u64>,
    pub target_scale: f64,
    pub synthetic: SyntheticConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            source: DataSource::Mnist,
            dir: None,
            n_train: 5000,
            n_val: 10000,
            subset_seed: None,
            target_scale: 1.0,
            synthetic: SyntheticConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArchConfig {
    pub hidden: Vec<usize>,
    pub hidden_activation: Activation,
    pub output_activation: Activation,
    pub bias: bool,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            hidden: vec![256, 256],
            hidden_activation: Activation::Relu,
            output_activation: Activation::Linear,
            bias: true,
        }
    }
}

impl ArchConfig {
    pub fn build(&self, input: usize, output: usize) -> lifted_core::Result<Architecture> {
        let mut dims = vec![input];
        dims.extend(&self.hidden);
        dims.push(output);
        Architecture::mlp(&dims, self.hidden_activation, self.output_activation, self.bias)
    }
}

/// One column of an experiment: an objective, optionally with its own
/// epoch budget.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub name: String,
    #[serde(default)]
    pub objective: ObjectiveSpec,
    pub epochs: Option<usize>,
    pub pretrain_epochs: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TraceConfig {
    /// Parameters to trace; fresh initialization from the first seed if unset.
    pub checkpoint: Option<PathBuf>,
    /// Which run's objective to trace; the first run if unset.
    pub run: Option<String>,
    /// Overrides the run's sweep count.
    pub sweeps: Option<usize>,
}

impl Default for TraceConfig {
    fn default() -> Self {
        Self {
            checkpoint: None,
            run: None,
            sweeps: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub output_dir: PathBuf,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_true")]
    pub save_checkpoints: bool,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub arch: ArchConfig,
    /// Shared training settings; `seed` is replaced by each entry of `seeds`.
    #[serde(default)]
    pub train: TrainConfig,
    pub runs: Vec<RunConfig>,
    #[serde(default)]
    pub trace: TraceConfig,
}

fn default_seeds() -> Vec<u64> {
    vec![0, 1, 2]
}

fn default_true() -> bool {
    true
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    pub fn parse(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    /// Directory holding the MNIST files, checked for existence.
    pub fn data_dir(&self) -> Result<PathBuf> {
        let (dir, field) = match (&self.data.dir, env::var_os(DATA_DIR_ENV)) {
            (Some(d), _) => (d.clone(), "data.dir".to_string()),
            (None, Some(e)) => (PathBuf::from(e), format!("{DATA_DIR_ENV} (data.dir unset)")),
            (None, None) => (default_data_dir(), format!("data.dir (unset, default {})", default_data_dir().display())),
        };
        if !dir.is_dir() {
            bail!("{field}: dataset directory {} does not exist", dir.display());
        }
        Ok(dir)
    }

    pub fn train_config(&self, run: &RunConfig, seed: u64) -> TrainConfig {
        let mut tc = self.train.clone();
        tc.seed = seed;
        if let Some(e) = run.epochs {
            tc.epochs = e;
        }
        if let Some(p) = run.pretrain_epochs {
            tc.pretrain_epochs = p;
        }
        tc
    }

    /// Checks everything that can be checked without loading data.
    pub fn validate(&self) -> Result<()> {
        if self.name.trim().is_empty() {
            bail!("name: must not be empty");
        }
        if self.seeds.is_empty() {
            bail!("seeds: at least one seed is required");
        }
        if self.runs.is_empty() {
            bail!("runs: at least one run is required");
        }
        let mut names = std::collections::HashSet::new();
        for run in &self.runs {
            if run.name.is_empty() || run.name.contains(['/', '\\']) {
                bail!("runs.name: `{}` is not a valid directory name", run.name);
            }
            if !names.insert(&run.name) {
                bail!("runs.name: duplicate run `{}`", run.name);
            }
        }
        if self.data.n_train == 0 {
            bail!("data.n_train: must be positive");
        }
        if self.data.n_val == 0 {
            bail!("data.n_val: must be positive");
        }
        if !(self.data.target_scale > 0.0 && self.data.target_scale.is_finite()) {
            bail!("data.target_scale: must be positive");
        }
        let (input, output) = match self.data.source {
            DataSource::Mnist => {
                self.data_dir()?;
                (784, 10)
            }
            DataSource::Synthetic => {
                let s = &self.data.synthetic;
                if s.num_classes < 2 || s.dim == 0 {
                    bail!("data.synthetic: need at least 2 classes and a positive dimension");
                }
                if self.data.n_train + self.data.n_val > s.n_pool {
                    bail!(
                        "data.synthetic.n_pool: {} samples cannot hold n_train + n_val = {}",
                        s.n_pool,
                        self.data.n_train + self.data.n_val
                    );
                }
                (s.dim, s.num_classes)
            }
        };
        let arch = self.arch.build(input, output).context("arch")?;
        for run in &self.runs {
            run.objective
                .validate(&arch)
                .with_context(|| format!("runs.{}.objective", run.name))?;
            self.train_config(run, self.seeds[0])
                .validate()
                .with_context(|| format!("train (run {})", run.name))?;
        }
        if let Some(r) = &self.trace.run {
            if !self.runs.iter().any(|x| &x.name == r) {
                bail!("trace.run: no run named `{r}`");
            }
        }
        Ok(())
    }

    /// Config with every default and the dataset location filled in.
    pub fn resolved(&self) -> Result<Self> {
        let mut r = self.clone();
        if r.data.source == DataSource::Mnist {
            r.data.dir = Some(self.data_dir()?);
        }
        Ok(r)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }
}
