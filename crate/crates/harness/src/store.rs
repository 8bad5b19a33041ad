//! On-disk result store: one JSON document per run, a weight dump per
//! completed run, and `index.csv` listing every cell.
//!
//! ```text
//! <root>/index.csv
//! <root>/runs/<experiment>/<cell>.json
//! <root>/weights/<experiment>/<cell>.json
//! ```

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use resource_lab::allocometer::{DroppedPair, MatchedPair, ParallelAttribution, RedundancyReport};
use resource_lab::trainer::TrainRecordDocument;
use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, IoContext, Result};

pub const RESULT_VERSION: u32 = 1;
const INDEX_FILE: &str = "index.csv";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CellKey {
    pub alpha: f64,
    pub beta: Option<f64>,
    pub seed: u32,
}

impl CellKey {
    pub fn slug(&self) -> String {
        match self.beta {
            Some(b) => format!("a{}_b{}_s{}", self.alpha, b, self.seed),
            None => format!("a{}_s{}", self.alpha, self.seed),
        }
    }

    /// Emission order: α, then β (absent first), then seed.
    pub fn order(&self, other: &Self) -> Ordering {
        self.alpha
            .total_cmp(&other.alpha)
            .then_with(|| match (self.beta, other.beta) {
                (None, None) => Ordering::Equal,
                (None, Some(_)) => Ordering::Less,
                (Some(_), None) => Ordering::Greater,
                (Some(a), Some(b)) => a.total_cmp(&b),
            })
            .then(self.seed.cmp(&other.seed))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AllocationSummary {
    pub probe_samples: usize,
    pub threshold: f64,
    pub total_allocated: usize,
    pub per_layer_live: Vec<usize>,
    pub weight_allocated: usize,
    pub parallel: Option<ParallelAttribution>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairingSummary {
    pub pairs: Vec<MatchedPair>,
    pub unmatched: usize,
    pub used: Vec<(usize, usize)>,
    pub dropped: Vec<DroppedPair>,
    pub fraction_abs_corr_above_0_9: f64,
    pub mean_abs_corr: f64,
    pub correlation: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerCorrelation {
    pub layer: usize,
    /// Live neurons with correlation above 0.9 / below −0.9.
    pub positive: usize,
    pub negative: usize,
    pub max_abs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub initial_task_loss: f64,
    pub final_task_loss: f64,
    /// Per-output MSE on the probe inputs.
    pub per_output_mse: Vec<f64>,
    pub allocation: AllocationSummary,
    pub redundancy: Option<RedundancyReport>,
    pub pairing: Option<PairingSummary>,
    pub target_correlation: Option<Vec<LayerCorrelation>>,
    pub train: TrainRecordDocument,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "lowercase")]
pub enum Outcome {
    Completed(Box<RunMetrics>),
    Failed { message: String },
}

impl Outcome {
    pub fn status(&self) -> &'static str {
        match self {
            Outcome::Completed(_) => "completed",
            Outcome::Failed { .. } => "failed",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub version: u32,
    pub experiment: String,
    pub key: CellKey,
    pub cell_seed: u64,
    pub config_hash: String,
    pub outcome: Outcome,
    pub wall_time_secs: f64,
}

impl RunResult {
    pub fn metrics(&self) -> Option<&RunMetrics> {
        match &self.outcome {
            Outcome::Completed(m) => Some(m),
            Outcome::Failed { .. } => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub experiment: String,
    pub alpha: f64,
    pub beta: Option<f64>,
    pub seed: u32,
    pub config_hash: String,
    pub status: String,
    pub path: String,
}

impl IndexEntry {
    pub fn key(&self) -> CellKey {
        CellKey {
            alpha: self.alpha,
            beta: self.beta,
            seed: self.seed,
        }
    }
}

/// Store rooted at a directory. Writes go through a single owner; each
/// write rewrites the index atomically.
#[derive(Debug)]
pub struct ResultStore {
    root: PathBuf,
    index: BTreeMap<(String, String), IndexEntry>,
}

impl ResultStore {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        fs::create_dir_all(&root).at(&root)?;
        let mut index = BTreeMap::new();
        let path = root.join(INDEX_FILE);
        if path.exists() {
            let mut reader = csv::Reader::from_path(&path)?;
            for row in reader.deserialize() {
                let e: IndexEntry = row?;
                index.insert((e.experiment.clone(), e.key().slug()), e);
            }
        }
        Ok(Self { root, index })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }

    pub fn experiments(&self) -> Vec<String> {
        let mut ids: Vec<String> = self.index.keys().map(|(e, _)| e.clone()).collect();
        ids.dedup();
        ids
    }

    pub fn lookup(&self, experiment: &str, key: &CellKey) -> Option<&IndexEntry> {
        self.index.get(&(experiment.to_string(), key.slug()))
    }

    /// Any entry, in any experiment, with this config hash.
    pub fn find_hash(&self, hash: &str) -> Option<&IndexEntry> {
        self.index.values().find(|e| e.config_hash == hash)
    }

    pub fn load(&self, entry: &IndexEntry) -> Result<RunResult> {
        let path = self.root.join(&entry.path);
        let text = fs::read_to_string(&path).at(&path)?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn load_weights(&self, reference: &str) -> Result<resource_lab::NetworkParams> {
        let path = self.root.join(reference);
        let text = fs::read_to_string(&path).at(&path)?;
        Ok(resource_lab::NetworkParams::from_json(&text)?)
    }

    pub fn weights_path(experiment: &str, key: &CellKey) -> String {
        format!("weights/{experiment}/{}.json", key.slug())
    }

    /// Writes a run document (and its weight dump, if given) and records
    /// it in the index, replacing any earlier entry for the same cell.
    pub fn write(&mut self, result: &RunResult, weights_json: Option<&str>) -> Result<()> {
        let rel = format!("runs/{}/{}.json", result.experiment, result.key.slug());
        if let Some(w) = weights_json {
            let wrel = Self::weights_path(&result.experiment, &result.key);
            write_atomic(&self.root.join(&wrel), w.as_bytes())?;
        }
        write_atomic(&self.root.join(&rel), serde_json::to_string_pretty(result)?.as_bytes())?;
        let entry = IndexEntry {
            experiment: result.experiment.clone(),
            alpha: result.key.alpha,
            beta: result.key.beta,
            seed: result.key.seed,
            config_hash: result.config_hash.clone(),
            status: result.outcome.status().to_string(),
            path: rel,
        };
        self.index.insert((entry.experiment.clone(), result.key.slug()), entry);
        self.write_index()
    }

    fn write_index(&self) -> Result<()> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut entries: Vec<&IndexEntry> = self.index.values().collect();
        entries.sort_by(|a, b| a.experiment.cmp(&b.experiment).then(a.key().order(&b.key())));
        for e in entries {
            w.serialize(e)?;
        }
        let bytes = w.into_inner().map_err(|e| HarnessError::Usage(e.to_string()))?;
        write_atomic(&self.root.join(INDEX_FILE), &bytes)
    }

    pub fn entries(&self, experiment: &str) -> Vec<&IndexEntry> {
        let mut v: Vec<&IndexEntry> = self.index.values().filter(|e| e.experiment == experiment).collect();
        v.sort_by(|a, b| a.key().order(&b.key()));
        v
    }

    /// All runs of an experiment, sorted by cell key.
    pub fn results(&self, experiment: &str) -> Result<Vec<RunResult>> {
        self.entries(experiment).into_iter().map(|e| self.load(e)).collect()
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).at(dir)?;
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).at(&tmp)?;
    fs::rename(&tmp, path).at(path)
}
