//! Cell planning, per-cell training and analysis, and the parallel sweep.

use std::sync::mpsc;
use std::time::Instant;

use rayon::prelude::*;
use resource_lab::allocometer::{self, ProbeConfig};
use resource_lab::netcore::{self, NetworkShape};
use resource_lab::tasks::{self, TaskKind, TaskSpec};
use resource_lab::{trainer, NetworkParams, TrainConfig};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::{ExperimentConfig, PairingSettings};
use crate::error::{HarnessError, Result};
use crate::store::{
    AllocationSummary, CellKey, LayerCorrelation, Outcome, PairingSummary, ResultStore, RunMetrics, RunResult,
    RESULT_VERSION,
};

/// Cell seed from the master seed and the cell key (not the experiment id,
/// so identical cells in different experiments train identically).
pub fn cell_seed(master_seed: u64, key: &CellKey) -> u64 {
    let mut h = Sha256::new();
    h.update(b"resource-lab/cell/v1");
    h.update(master_seed.to_le_bytes());
    h.update(key.alpha.to_bits().to_le_bytes());
    h.update(key.beta.map_or(u64::MAX, f64::to_bits).to_le_bytes());
    h.update(key.seed.to_le_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
}

/// Everything that determines a cell's result.
#[derive(Debug, Clone, Serialize)]
pub struct CellSpec {
    pub version: u32,
    pub task: TaskSpec,
    pub shape: NetworkShape,
    pub train: TrainConfig,
    pub probe: ProbeConfig,
    pub redundancy: bool,
    pub pairing: Option<PairingSettings>,
    pub target_correlation: bool,
}

impl CellSpec {
    pub fn hash(&self) -> Result<String> {
        let json = serde_json::to_vec(self)?;
        Ok(hex::encode(Sha256::digest(&json)))
    }
}

#[derive(Debug, Clone)]
pub struct CellPlan {
    pub experiment: String,
    pub key: CellKey,
    pub spec: CellSpec,
    pub hash: String,
}

pub fn plan_cell(exp: &ExperimentConfig, master_seed: u64, key: CellKey) -> Result<CellPlan> {
    let task = exp.task(key.beta)?;
    let shape = exp.shape(&task)?;
    let spec = CellSpec {
        version: RESULT_VERSION,
        train: exp
            .train
            .to_train_config(key.alpha, key.beta, cell_seed(master_seed, &key)),
        task,
        shape,
        probe: exp.probe.clone(),
        redundancy: exp.redundancy,
        pairing: exp.pairing.clone(),
        target_correlation: exp.target_correlation,
    };
    spec.train.validate_for(&spec.task)?;
    let hash = spec.hash()?;
    Ok(CellPlan {
        experiment: exp.id.clone(),
        key,
        spec,
        hash,
    })
}

/// Every (α, β, seed) cell of an experiment.
pub fn plan(exp: &ExperimentConfig, master_seed: u64) -> Result<Vec<CellPlan>> {
    exp.validate()?;
    let mut cells = Vec::with_capacity(exp.cell_count());
    for alpha in exp.alpha_values() {
        for beta in exp.beta_values() {
            for seed in 0..exp.seeds {
                cells.push(plan_cell(exp, master_seed, CellKey { alpha, beta, seed })?);
            }
        }
    }
    Ok(cells)
}

pub struct Analysis {
    pub per_output_mse: Vec<f64>,
    pub allocation: AllocationSummary,
    pub redundancy: Option<resource_lab::allocometer::RedundancyReport>,
    pub pairing: Option<PairingSummary>,
    pub target_correlation: Option<Vec<LayerCorrelation>>,
}

impl Analysis {
    pub fn apply(self, metrics: &mut RunMetrics) {
        metrics.per_output_mse = self.per_output_mse;
        metrics.allocation = self.allocation;
        metrics.redundancy = self.redundancy;
        metrics.pairing = self.pairing;
        metrics.target_correlation = self.target_correlation;
    }
}

/// Runs the allocometer suite requested by `spec` on trained parameters.
pub fn analyze_params(spec: &CellSpec, params: &NetworkParams) -> Result<Analysis> {
    let task = &spec.task;
    let inputs = spec.probe.inputs(task);
    let outputs = netcore::forward(params, inputs.view())?;
    let targets = task.evaluate(inputs.view())?;
    let per_output_mse = tasks::per_output_mse(outputs.view(), targets.view())?;

    let report = allocometer::detect_allocated_on(
        params,
        inputs.view(),
        spec.probe.variance_threshold,
        spec.probe.weight_threshold,
    )?;
    let parallel = match task.kind {
        TaskKind::Parallel => Some(allocometer::attribute_parallel(params, spec.probe.weight_threshold)?),
        _ => None,
    };
    let redundancy = if spec.redundancy {
        Some(allocometer::redundancy_on(
            params,
            inputs.view(),
            spec.probe.variance_threshold,
            spec.probe.corr_threshold,
        )?)
    } else {
        None
    };
    let pairing = match &spec.pairing {
        Some(p) => {
            let live: Vec<usize> = report
                .live_mask(0)
                .iter()
                .enumerate()
                .filter_map(|(j, &l)| l.then_some(j))
                .collect();
            let pairing = allocometer::match_symmetric_pairs(params, &live, p.distance_cap, p.strategy)?;
            let (lo, hi) = (task.input_low[0], task.input_high[0]);
            let grid = allocometer::uniform_grid(lo, hi, p.grid_points);
            let target = task.targets[0];
            let errors =
                allocometer::regressor_errors_and_correlation(params, &pairing, &grid, &|x| (target.eval)(&[x]))?;
            let n = errors.correlation.len();
            let mean_abs = if n < 2 {
                0.0
            } else {
                let mut s = 0.0;
                for i in 0..n {
                    for j in 0..n {
                        if i != j {
                            s += errors.correlation[i][j].abs();
                        }
                    }
                }
                s / (n * (n - 1)) as f64
            };
            Some(PairingSummary {
                unmatched: pairing.unmatched.len(),
                pairs: pairing.pairs,
                used: errors.pairs.clone(),
                fraction_abs_corr_above_0_9: errors.fraction_above(0.9),
                mean_abs_corr: mean_abs,
                dropped: errors.dropped.clone(),
                correlation: errors.correlation,
            })
        }
        None => None,
    };
    let target_correlation = if spec.target_correlation {
        let g = tasks::intermediate_target_g(inputs.view())?;
        let corr = allocometer::correlate_with_target(params, inputs.view(), &g)?;
        let layers = params.shape().hidden_layers();
        Some(
            (0..layers)
                .map(|l| {
                    // Pruned neurons can still track g with a tiny amplitude; count live ones only.
                    let live = report.live_mask(l);
                    let of_layer = corr
                        .iter()
                        .filter(|c| c.layer == l && !c.degenerate && live[c.neuron]);
                    let mut lc = LayerCorrelation {
                        layer: l,
                        positive: 0,
                        negative: 0,
                        max_abs: 0.0,
                    };
                    for c in of_layer {
                        if c.correlation > 0.9 {
                            lc.positive += 1;
                        } else if c.correlation < -0.9 {
                            lc.negative += 1;
                        }
                        lc.max_abs = lc.max_abs.max(c.correlation.abs());
                    }
                    lc
                })
                .collect(),
        )
    } else {
        None
    };
    Ok(Analysis {
        per_output_mse,
        allocation: AllocationSummary {
            probe_samples: report.probe_samples,
            threshold: report.threshold,
            total_allocated: report.total_allocated,
            per_layer_live: report.per_layer_live,
            weight_allocated: report.weight_allocated,
            parallel,
        },
        redundancy,
        pairing,
        target_correlation,
    })
}

/// Trains and analyzes one cell. Returns the run document and the weight
/// dump for completed runs.
pub fn run_cell(plan: &CellPlan) -> (RunResult, Option<String>) {
    let start = Instant::now();
    let outcome = (|| -> Result<(RunMetrics, String)> {
        let record = trainer::train(&plan.spec.task, &plan.spec.shape, &plan.spec.train)?;
        let analysis = analyze_params(&plan.spec, &record.final_params)?;
        let weights_ref = ResultStore::weights_path(&plan.experiment, &plan.key);
        let metrics = RunMetrics {
            initial_task_loss: record.initial_task_loss(),
            final_task_loss: record.final_task_loss(),
            per_output_mse: analysis.per_output_mse,
            allocation: analysis.allocation,
            redundancy: analysis.redundancy,
            pairing: analysis.pairing,
            target_correlation: analysis.target_correlation,
            train: record.to_document(&weights_ref),
        };
        Ok((metrics, record.final_params.to_json()?))
    })();
    let (outcome, weights) = match outcome {
        Ok((m, w)) => (Outcome::Completed(Box::new(m)), Some(w)),
        Err(e) => (Outcome::Failed { message: e.to_string() }, None),
    };
    (
        RunResult {
            version: RESULT_VERSION,
            experiment: plan.experiment.clone(),
            key: plan.key,
            cell_seed: plan.spec.train.seed,
            config_hash: plan.hash.clone(),
            outcome,
            wall_time_secs: start.elapsed().as_secs_f64(),
        },
        weights,
    )
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SweepSummary {
    pub planned: usize,
    pub executed: usize,
    pub skipped: usize,
    pub reused: usize,
    pub failed: usize,
}

/// Runs every cell of `exp` not already in the store with the same config
/// hash. A cell stored under another experiment with the same hash is
/// copied instead of retrained. `force` retrains everything.
pub fn run_sweep(
    store: &mut ResultStore,
    exp: &ExperimentConfig,
    master_seed: u64,
    workers: usize,
    force: bool,
) -> Result<SweepSummary> {
    run_cells(store, plan(exp, master_seed)?, workers, force)
}

/// Executes planned cells on a pool of `workers` threads. Results are
/// written by the calling thread as they arrive.
pub fn run_cells(store: &mut ResultStore, cells: Vec<CellPlan>, workers: usize, force: bool) -> Result<SweepSummary> {
    let mut summary = SweepSummary {
        planned: cells.len(),
        ..Default::default()
    };
    let mut todo = Vec::new();
    for cell in cells {
        if !force {
            if store
                .lookup(&cell.experiment, &cell.key)
                .is_some_and(|e| e.config_hash == cell.hash)
            {
                summary.skipped += 1;
                continue;
            }
            if let Some(other) = store.find_hash(&cell.hash).cloned() {
                let mut copy = store.load(&other)?;
                copy.experiment = cell.experiment.clone();
                copy.key = cell.key;
                store.write(&copy, None)?;
                summary.reused += 1;
                continue;
            }
        }
        todo.push(cell);
    }
    if todo.is_empty() {
        return Ok(summary);
    }

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| HarnessError::Config(format!("worker pool: {e}")))?;
    let (tx, rx) = mpsc::channel();
    let mut first_error = None;
    std::thread::scope(|s| {
        let todo = &todo;
        s.spawn(move || {
            pool.install(|| {
                todo.par_iter().for_each_with(tx, |tx, cell| {
                    let _ = tx.send(run_cell(cell));
                })
            })
        });
        for (result, weights) in rx {
            if matches!(result.outcome, Outcome::Failed { .. }) {
                summary.failed += 1;
            }
            summary.executed += 1;
            if let Err(e) = store.write(&result, weights.as_deref()) {
                first_error.get_or_insert(e);
            }
        }
    });
    match first_error {
        Some(e) => Err(e),
        None => Ok(summary),
    }
}

/// Re-analyzes a stored run from its weight dump with the experiment's
/// current probe settings.
pub fn reanalyze(store: &ResultStore, exp: &ExperimentConfig, result: &RunResult) -> Result<Analysis> {
    let metrics = result
        .metrics()
        .ok_or_else(|| HarnessError::NoResults(format!("completed run at {}", result.key.slug())))?;
    let params = store.load_weights(&metrics.train.weights)?;
    let task = exp.task(result.key.beta)?;
    let spec = CellSpec {
        version: RESULT_VERSION,
        shape: exp.shape(&task)?,
        task,
        train: metrics.train.config.clone(),
        probe: exp.probe.clone(),
        redundancy: exp.redundancy,
        pairing: exp.pairing.clone(),
        target_correlation: exp.target_correlation,
    };
    analyze_params(&spec, &params)
}

/// Recomputes the analysis of a stored run from its weights and writes the
/// refreshed metrics back. Training data in the record is left untouched.
pub fn refresh_analysis(store: &mut ResultStore, exp: &ExperimentConfig, result: &RunResult) -> Result<RunResult> {
    let analysis = reanalyze(store, exp, result)?;
    let mut updated = result.clone();
    if let Outcome::Completed(m) = &mut updated.outcome {
        analysis.apply(m);
    }
    store.write(&updated, None)?;
    Ok(updated)
}
