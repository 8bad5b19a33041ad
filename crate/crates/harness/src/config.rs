//! Experiment configuration files.
//!
//! A config file holds a master seed and a list of experiments:
//!
//! ```toml
//! schema = 1
//! seed = 0
//!
//! [[experiments]]
//! id = "fig2"
//! kind = "single"
//! functions = ["square"]
//! hidden = [1000]
//! alphas = { low = 1.0, high = 512.0, count = 8 }
//! seeds = 4
//!
//! [experiments.train]
//! epochs = 20000
//! lr_decay_every = 4000
//! ```

use std::collections::BTreeSet;
use std::path::Path;

use resource_lab::allocometer::{MatchingStrategy, ProbeConfig, DEFAULT_PAIR_DISTANCE_CAP};
use resource_lab::netcore::NetworkShape;
use resource_lab::tasks::{self, TaskKind, TaskSpec};
use resource_lab::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, IoContext, Result};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub schema: u32,
    #[serde(default)]
    pub seed: u64,
    pub experiments: Vec<ExperimentConfig>,
}

impl ConfigFile {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: ConfigFile = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).at(path)?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema != SCHEMA_VERSION {
            return Err(HarnessError::Config(format!(
                "unsupported schema {} (expected {SCHEMA_VERSION})",
                self.schema
            )));
        }
        if self.experiments.is_empty() {
            return Err(HarnessError::Config("no experiments defined".into()));
        }
        let mut ids = BTreeSet::new();
        for e in &self.experiments {
            if !ids.insert(e.id.as_str()) {
                return Err(HarnessError::Config(format!("duplicate experiment id `{}`", e.id)));
            }
            e.validate()?;
        }
        Ok(())
    }

    pub fn experiment(&self, id: &str) -> Result<&ExperimentConfig> {
        self.experiments
            .iter()
            .find(|e| e.id == id)
            .ok_or_else(|| HarnessError::Config(format!("no experiment `{id}` in config")))
    }

    /// Experiments named in `ids`, or all of them when `ids` is empty.
    pub fn select(&self, ids: &[String]) -> Result<Vec<&ExperimentConfig>> {
        if ids.is_empty() {
            Ok(self.experiments.iter().collect())
        } else {
            ids.iter().map(|id| self.experiment(id)).collect()
        }
    }
}

/// α values, either listed or log-spaced between two endpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum AlphaGrid {
    Values(Vec<f64>),
    LogSpaced(LogSpaced),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LogSpaced {
    pub low: f64,
    pub high: f64,
    pub count: usize,
}

impl AlphaGrid {
    pub fn values(&self) -> Vec<f64> {
        match self {
            AlphaGrid::Values(v) => v.clone(),
            AlphaGrid::LogSpaced(g) => log_spaced(g.low, g.high, g.count),
        }
    }
}

pub fn log_spaced(low: f64, high: f64, count: usize) -> Vec<f64> {
    match count {
        0 => Vec::new(),
        1 => vec![low],
        _ => {
            let ratio = (high / low).ln();
            (0..count)
                .map(|i| {
                    if i == count - 1 {
                        high
                    } else {
                        low * (ratio * i as f64 / (count - 1) as f64).exp()
                    }
                })
                .collect()
        }
    }
}

/// Optimizer and schedule settings shared by every cell of an experiment.
/// α, β and the seed come from the cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSettings {
    pub lambda1: f64,
    pub lambda2: f64,
    pub epochs: u64,
    pub batch_size: usize,
    pub lr_initial: f64,
    pub lr_decay_factor: f64,
    pub lr_decay_every: u64,
    pub eval_samples: usize,
}

impl Default for TrainSettings {
    fn default() -> Self {
        let d = TrainConfig::default();
        Self {
            lambda1: d.lambda1,
            lambda2: d.lambda2,
            epochs: d.epochs,
            batch_size: d.batch_size,
            lr_initial: d.lr_initial,
            lr_decay_factor: d.lr_decay_factor,
            lr_decay_every: d.lr_decay_every,
            eval_samples: d.eval_samples,
        }
    }
}

impl TrainSettings {
    pub fn to_train_config(&self, alpha: f64, beta: Option<f64>, seed: u64) -> TrainConfig {
        TrainConfig {
            alpha,
            lambda1: self.lambda1,
            lambda2: self.lambda2,
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr_initial: self.lr_initial,
            lr_decay_factor: self.lr_decay_factor,
            lr_decay_every: self.lr_decay_every,
            seed,
            beta,
            eval_samples: self.eval_samples,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PairingSettings {
    pub distance_cap: f64,
    pub strategy: MatchingStrategy,
    pub grid_points: usize,
}

impl Default for PairingSettings {
    fn default() -> Self {
        Self {
            distance_cap: DEFAULT_PAIR_DISTANCE_CAP,
            strategy: MatchingStrategy::Greedy,
            grid_points: 512,
        }
    }
}

/// Abscissa window for loss-vs-N fits.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase", deny_unknown_fields)]
pub enum FitWindow {
    #[default]
    All,
    Range {
        x_min: f64,
        x_max: f64,
    },
    /// Two fits split at the geometric mean of the smallest and largest N.
    Split,
}

impl std::str::FromStr for FitWindow {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all" => Ok(FitWindow::All),
            "split" => Ok(FitWindow::Split),
            other => {
                let bad = || HarnessError::Usage(format!("window must be all, split or MIN:MAX, got `{other}`"));
                let (lo, hi) = other.split_once(':').ok_or_else(bad)?;
                Ok(FitWindow::Range {
                    x_min: lo.trim().parse().map_err(|_| bad())?,
                    x_max: hi.trim().parse().map_err(|_| bad())?,
                })
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub id: String,
    /// Name of the scatter CSV this experiment contributes to. Defaults by
    /// task kind: fig2c, fig3d, fig4c.
    #[serde(default)]
    pub figure: Option<String>,
    pub kind: TaskKind,
    #[serde(default)]
    pub functions: Vec<String>,
    #[serde(default)]
    pub input_range: Option<[f64; 2]>,
    pub hidden: Vec<usize>,
    pub alphas: AlphaGrid,
    #[serde(default)]
    pub betas: Option<Vec<f64>>,
    pub seeds: u32,
    #[serde(default)]
    pub train: TrainSettings,
    #[serde(default)]
    pub probe: ProbeConfig,
    #[serde(default)]
    pub redundancy: bool,
    #[serde(default)]
    pub pairing: Option<PairingSettings>,
    #[serde(default)]
    pub target_correlation: bool,
    #[serde(default)]
    pub fit: FitWindow,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(HarnessError::Config(format!("experiment `{}`: {m}", self.id)));
        if self.id.is_empty()
            || !self
                .id
                .chars()
                .all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-')
        {
            return bad("id must be non-empty and use only [A-Za-z0-9_-]".into());
        }
        let alphas = self.alphas.values();
        if alphas.is_empty() || alphas.iter().any(|a| !(a.is_finite() && *a > 0.0)) {
            return bad("alpha grid must be non-empty and positive".into());
        }
        if self.seeds == 0 {
            return bad("seeds must be >= 1".into());
        }
        match (self.kind, &self.betas) {
            (TaskKind::Parallel, Some(b)) if !b.is_empty() => {}
            (TaskKind::Parallel, _) => return bad("parallel experiments need a non-empty beta grid".into()),
            (_, Some(_)) => return bad("beta grid given for a non-parallel experiment".into()),
            _ => {}
        }
        if let Some(p) = &self.pairing {
            if self.kind != TaskKind::Single || self.hidden.len() != 1 {
                return bad("pairing analysis needs a single task with one hidden layer".into());
            }
            if p.grid_points < 3 {
                return bad("pairing grid needs at least 3 points".into());
            }
        }
        if self.target_correlation && self.kind != TaskKind::Series {
            return bad("target correlation is defined for series experiments".into());
        }
        self.probe.validate()?;
        for beta in self.beta_values() {
            let task = self.task(beta)?;
            self.shape(&task)?;
            self.train.to_train_config(alphas[0], beta, 0).validate_for(&task)?;
        }
        Ok(())
    }

    pub fn figure_name(&self) -> String {
        self.figure.clone().unwrap_or_else(|| {
            match self.kind {
                TaskKind::Single => "fig2c",
                TaskKind::Parallel => "fig3d",
                TaskKind::Series => "fig4c",
            }
            .to_string()
        })
    }

    pub fn alpha_values(&self) -> Vec<f64> {
        self.alphas.values()
    }

    /// β values, or a single `None` for non-parallel experiments.
    pub fn beta_values(&self) -> Vec<Option<f64>> {
        match &self.betas {
            Some(b) => b.iter().map(|&v| Some(v)).collect(),
            None => vec![None],
        }
    }

    pub fn task(&self, beta: Option<f64>) -> Result<TaskSpec> {
        let f = |i: usize, default: &str| self.functions.get(i).cloned().unwrap_or_else(|| default.to_string());
        let spec = match self.kind {
            TaskKind::Single => {
                if self.functions.len() > 1 {
                    return Err(HarnessError::Config("single tasks take one function".into()));
                }
                tasks::make_single_task(&f(0, "square"))?
            }
            TaskKind::Parallel => {
                if self.functions.len() > 2 {
                    return Err(HarnessError::Config("parallel tasks take two functions".into()));
                }
                let beta = beta.ok_or_else(|| HarnessError::Config("parallel task without beta".into()))?;
                tasks::make_parallel_task(&f(0, "square"), &f(1, "square"), beta)?
            }
            TaskKind::Series => {
                if !self.functions.is_empty() {
                    return Err(HarnessError::Config(
                        "series tasks have a fixed target; drop `functions`".into(),
                    ));
                }
                tasks::make_series_task()?
            }
        };
        Ok(match self.input_range {
            Some([lo, hi]) => spec.with_range(lo, hi)?,
            None => spec,
        })
    }

    pub fn shape(&self, task: &TaskSpec) -> Result<NetworkShape> {
        Ok(NetworkShape::new(
            task.input_dim(),
            self.hidden.clone(),
            task.output_dim(),
        )?)
    }

    pub fn cell_count(&self) -> usize {
        self.alpha_values().len() * self.beta_values().len() * self.seeds as usize
    }
}
