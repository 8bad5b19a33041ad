//! Aggregation across seeds, loss-vs-N fits and the CSV bundle.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use resource_lab::resource_model::{self, GrowthReport, ScalingFit};
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, FitWindow};
use crate::error::{HarnessError, IoContext, Result};
use crate::store::{CellKey, ResultStore, RunResult};

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    })
}

fn mean_std(values: &[f64]) -> Option<(f64, f64)> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let m = values.iter().sum::<f64>() / n;
    Some((m, (values.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n).sqrt()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellAggregate {
    pub alpha: f64,
    pub beta: Option<f64>,
    pub completed: usize,
    pub failed: usize,
    pub median_loss: Option<f64>,
    pub median_n: Option<f64>,
    pub loss_range: Option<(f64, f64)>,
    pub n_range: Option<(f64, f64)>,
    pub median_per_layer: Vec<f64>,
    /// Parallel runs: mean and std of per-seed `N₁/N₂` over seeds with
    /// `N₂ > 0`.
    pub ratio_mean: Option<f64>,
    pub ratio_std: Option<f64>,
    pub mean_n1: Option<f64>,
    pub mean_n2: Option<f64>,
    pub superposed_total: usize,
    pub median_redundancy_fraction: Option<f64>,
}

/// Per-(α, β) summaries across seeds.
pub fn aggregate(store: &ResultStore, experiment: &str) -> Result<Vec<CellAggregate>> {
    let runs = store.results(experiment)?;
    if runs.is_empty() {
        return Err(HarnessError::NoResults(format!("experiment `{experiment}`")));
    }
    aggregate_runs(&runs)
}

type CellGroup<'a> = ((f64, Option<f64>), Vec<&'a RunResult>);

pub fn aggregate_runs(runs: &[RunResult]) -> Result<Vec<CellAggregate>> {
    let mut groups: Vec<CellGroup> = Vec::new();
    for r in runs {
        let k = (r.key.alpha, r.key.beta);
        match groups.iter_mut().find(|(g, _)| *g == k) {
            Some((_, v)) => v.push(r),
            None => groups.push((k, vec![r])),
        }
    }
    groups.sort_by(|a, b| {
        let ka = CellKey {
            alpha: a.0 .0,
            beta: a.0 .1,
            seed: 0,
        };
        let kb = CellKey {
            alpha: b.0 .0,
            beta: b.0 .1,
            seed: 0,
        };
        ka.order(&kb)
    });
    let mut out = Vec::with_capacity(groups.len());
    for ((alpha, beta), members) in groups {
        let done: Vec<_> = members.iter().filter_map(|r| r.metrics()).collect();
        let losses: Vec<f64> = done.iter().map(|m| m.final_task_loss).collect();
        let ns: Vec<f64> = done.iter().map(|m| m.allocation.total_allocated as f64).collect();
        let range = |v: &[f64]| {
            (!v.is_empty()).then(|| {
                (
                    v.iter().copied().fold(f64::INFINITY, f64::min),
                    v.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                )
            })
        };
        let layers = done.first().map_or(0, |m| m.allocation.per_layer_live.len());
        let median_per_layer = (0..layers)
            .map(|l| {
                let v: Vec<f64> = done.iter().map(|m| m.allocation.per_layer_live[l] as f64).collect();
                median(&v).unwrap_or(0.0)
            })
            .collect();
        let attributions: Vec<_> = done.iter().filter_map(|m| m.allocation.parallel).collect();
        let ratios: Vec<f64> = attributions.iter().filter_map(|a| a.ratio()).collect();
        let n1: Vec<f64> = attributions.iter().map(|a| a.task1 as f64).collect();
        let n2: Vec<f64> = attributions.iter().map(|a| a.task2 as f64).collect();
        let redundancy: Vec<f64> = done
            .iter()
            .filter_map(|m| m.redundancy.as_ref())
            .map(|r| r.fraction_nonzero)
            .collect();
        out.push(CellAggregate {
            alpha,
            beta,
            completed: done.len(),
            failed: members.len() - done.len(),
            median_loss: median(&losses),
            median_n: median(&ns),
            loss_range: range(&losses),
            n_range: range(&ns),
            median_per_layer,
            ratio_mean: mean_std(&ratios).map(|p| p.0),
            ratio_std: mean_std(&ratios).map(|p| p.1),
            mean_n1: mean_std(&n1).map(|p| p.0),
            mean_n2: mean_std(&n2).map(|p| p.0),
            superposed_total: attributions.iter().map(|a| a.superposed).sum(),
            median_redundancy_fraction: median(&redundancy),
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScatterRow {
    pub experiment: String,
    pub alpha: f64,
    pub beta: Option<f64>,
    pub seed: u32,
    #[serde(rename = "N_allocated")]
    pub n_allocated: usize,
    pub task_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitRow {
    pub experiment: String,
    pub window: String,
    pub exponent: f64,
    pub coefficient: f64,
    pub r2: f64,
    pub x_min: f64,
    pub x_max: f64,
    pub count: usize,
}

impl FitRow {
    fn new(experiment: &str, window: &str, f: &ScalingFit) -> Self {
        Self {
            experiment: experiment.to_string(),
            window: window.to_string(),
            exponent: f.exponent,
            coefficient: f.coefficient(),
            r2: f.r_squared,
            x_min: f.x_min,
            x_max: f.x_max,
            count: f.count,
        }
    }
}

pub fn scatter(runs: &[RunResult]) -> Vec<ScatterRow> {
    runs.iter()
        .filter_map(|r| {
            r.metrics().map(|m| ScatterRow {
                experiment: r.experiment.clone(),
                alpha: r.key.alpha,
                beta: r.key.beta,
                seed: r.key.seed,
                n_allocated: m.allocation.total_allocated,
                task_loss: m.final_task_loss,
            })
        })
        .collect()
}

/// Geometric midpoint of the N range, where split windows divide.
pub fn split_point(points: &[(f64, f64)]) -> Option<f64> {
    let lo = points.iter().map(|p| p.0).fold(f64::INFINITY, f64::min);
    let hi = points.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max);
    (lo.is_finite() && hi.is_finite()).then(|| (lo * hi).sqrt())
}

/// Fits loss against allocated N over per-seed points. Points with N = 0
/// or zero loss cannot enter a log-log fit and are left out.
pub fn fit_points(experiment: &str, rows: &[ScatterRow], window: &FitWindow) -> Result<Vec<FitRow>> {
    let points: Vec<(f64, f64)> = rows
        .iter()
        .filter(|r| r.n_allocated > 0 && r.task_loss > 0.0)
        .map(|r| (r.n_allocated as f64, r.task_loss))
        .collect();
    if points.len() < 3 {
        return Err(HarnessError::NoResults(format!(
            "experiment `{experiment}` has {} usable points (need 3)",
            points.len()
        )));
    }
    Ok(match window {
        FitWindow::All => vec![FitRow::new(experiment, "all", &resource_model::fit_power_law(&points)?)],
        FitWindow::Range { x_min, x_max } => vec![FitRow::new(
            experiment,
            &format!("{x_min}:{x_max}"),
            &resource_model::fit_power_law_window(&points, *x_min, *x_max)?,
        )],
        FitWindow::Split => {
            let mid = split_point(&points).expect("non-empty");
            vec![
                FitRow::new(
                    experiment,
                    "lower",
                    &resource_model::fit_power_law_window(&points, 0.0, mid)?,
                ),
                FitRow::new(
                    experiment,
                    "upper",
                    &resource_model::fit_power_law_window(&points, mid, f64::INFINITY)?,
                ),
            ]
        }
    })
}

pub fn emit_fit(store: &ResultStore, experiment: &str, window: &FitWindow) -> Result<(Vec<FitRow>, Vec<ScatterRow>)> {
    let runs = store.results(experiment)?;
    if runs.is_empty() {
        return Err(HarnessError::NoResults(format!("experiment `{experiment}`")));
    }
    let rows = scatter(&runs);
    Ok((fit_points(experiment, &rows, window)?, rows))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatioRow {
    pub alpha: f64,
    pub beta: Option<f64>,
    pub seed: u32,
    #[serde(rename = "N1")]
    pub n1: usize,
    #[serde(rename = "N2")]
    pub n2: usize,
    pub ratio: Option<f64>,
    pub superposed: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MseRatioRow {
    pub alpha: f64,
    pub beta: Option<f64>,
    pub seed: u32,
    pub mse1: f64,
    pub mse2: f64,
    pub mse_ratio: f64,
    pub n_ratio: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerRow {
    pub experiment: String,
    pub alpha: f64,
    pub seed: u32,
    pub layer: usize,
    pub live: usize,
    pub redundancy_fraction: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairingRow {
    pub experiment: String,
    pub alpha: f64,
    pub seed: u32,
    pub pairs: usize,
    pub used: usize,
    pub dropped: usize,
    pub frac_abs_corr_gt_0_9: f64,
    pub mean_abs_corr: f64,
}

pub fn ratio_rows(runs: &[RunResult]) -> Vec<RatioRow> {
    runs.iter()
        .filter_map(|r| {
            let a = r.metrics()?.allocation.parallel?;
            Some(RatioRow {
                alpha: r.key.alpha,
                beta: r.key.beta,
                seed: r.key.seed,
                n1: a.task1,
                n2: a.task2,
                ratio: a.ratio(),
                superposed: a.superposed,
            })
        })
        .collect()
}

fn mse_rows(runs: &[RunResult]) -> Vec<MseRatioRow> {
    runs.iter()
        .filter_map(|r| {
            let m = r.metrics()?;
            let a = m.allocation.parallel?;
            let (mse1, mse2) = (*m.per_output_mse.first()?, *m.per_output_mse.get(1)?);
            Some(MseRatioRow {
                alpha: r.key.alpha,
                beta: r.key.beta,
                seed: r.key.seed,
                mse1,
                mse2,
                mse_ratio: mse1 / mse2,
                n_ratio: a.ratio(),
            })
        })
        .collect()
}

fn layer_rows(runs: &[RunResult]) -> Vec<LayerRow> {
    let mut out = Vec::new();
    for r in runs {
        let Some(m) = r.metrics() else { continue };
        for (l, &live) in m.allocation.per_layer_live.iter().enumerate() {
            out.push(LayerRow {
                experiment: r.experiment.clone(),
                alpha: r.key.alpha,
                seed: r.key.seed,
                layer: l,
                live,
                redundancy_fraction: m.redundancy.as_ref().map(|x| x.per_layer_fraction[l]),
            });
        }
    }
    out
}

fn pairing_rows(runs: &[RunResult]) -> Vec<PairingRow> {
    runs.iter()
        .filter_map(|r| {
            let p = r.metrics()?.pairing.as_ref()?;
            Some(PairingRow {
                experiment: r.experiment.clone(),
                alpha: r.key.alpha,
                seed: r.key.seed,
                pairs: p.pairs.len(),
                used: p.used.len(),
                dropped: p.dropped.len(),
                frac_abs_corr_gt_0_9: p.fraction_abs_corr_above_0_9,
                mean_abs_corr: p.mean_abs_corr,
            })
        })
        .collect()
}

/// Ratio stability across α for one β: per-α mean `N₁` and `N₂` fed to the
/// homogeneous-growth check.
pub fn growth_check(aggregates: &[CellAggregate], beta: f64, bound: f64) -> Result<GrowthReport> {
    let series: Vec<(f64, Vec<f64>)> = aggregates
        .iter()
        .filter(|a| a.beta == Some(beta))
        .filter_map(|a| Some((a.alpha, vec![a.mean_n1?, a.mean_n2?])))
        .collect();
    Ok(resource_model::homogeneous_growth_check(&series, bound)?)
}

fn dedup_by_cell<T>(rows: &mut Vec<T>, key: impl Fn(&T) -> (f64, Option<f64>, u32)) {
    let mut seen: Vec<CellKey> = Vec::new();
    rows.retain(|r| {
        let (alpha, beta, seed) = key(r);
        let k = CellKey { alpha, beta, seed };
        let fresh = !seen.iter().any(|s| s.order(&k).is_eq());
        if fresh {
            seen.push(k);
        }
        fresh
    });
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).at(dir)?;
    }
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().at(path)?;
    Ok(())
}

pub fn read_csv<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSummary {
    pub experiment: String,
    pub runs: usize,
    pub failed: usize,
    pub fits: Vec<FitRow>,
    pub aggregates: Vec<CellAggregate>,
    pub fit_error: Option<String>,
}

/// Writes the CSV bundle for the given experiments into `out`:
/// one scatter CSV per figure name, `fits.csv`, and the parallel, series
/// and pairing tables when the runs carry that data. Files are only written
/// when they have rows.
pub fn write_report(
    store: &ResultStore,
    experiments: &[&ExperimentConfig],
    out: &Path,
) -> Result<Vec<ExperimentSummary>> {
    let mut scatter_files: BTreeMap<String, Vec<ScatterRow>> = BTreeMap::new();
    let mut fits = Vec::new();
    let mut ratios = Vec::new();
    let mut mses = Vec::new();
    let mut layers = Vec::new();
    let mut pairings = Vec::new();
    let mut summaries = Vec::new();
    let mut any = false;
    for exp in experiments {
        let runs = store.results(&exp.id)?;
        if runs.is_empty() {
            continue;
        }
        any = true;
        let rows = scatter(&runs);
        let (exp_fits, fit_error) = match fit_points(&exp.id, &rows, &exp.fit) {
            Ok(f) => (f, None),
            Err(e) => (Vec::new(), Some(e.to_string())),
        };
        fits.extend(exp_fits.iter().cloned());
        scatter_files.entry(exp.figure_name()).or_default().extend(rows);
        ratios.extend(ratio_rows(&runs));
        mses.extend(mse_rows(&runs));
        if exp.kind == resource_lab::TaskKind::Series {
            layers.extend(layer_rows(&runs));
        }
        pairings.extend(pairing_rows(&runs));
        summaries.push(ExperimentSummary {
            experiment: exp.id.clone(),
            runs: runs.len(),
            failed: runs.iter().filter(|r| r.metrics().is_none()).count(),
            fits: exp_fits,
            aggregates: aggregate_runs(&runs)?,
            fit_error,
        });
    }
    if !any {
        return Err(HarnessError::NoResults("the selected experiments".into()));
    }
    for (name, rows) in &scatter_files {
        write_csv(&out.join(format!("{name}.csv")), rows)?;
    }
    write_csv(&out.join("fits.csv"), &fits)?;
    if !ratios.is_empty() {
        // Overlapping experiments share cells; keep one row per cell key.
        dedup_by_cell(&mut ratios, |r| (r.alpha, r.beta, r.seed));
        dedup_by_cell(&mut mses, |r| (r.alpha, r.beta, r.seed));
        write_csv(&out.join("fig3b.csv"), &ratios)?;
        write_csv(&out.join("fig3c.csv"), &mses)?;
    }
    if !layers.is_empty() {
        write_csv(&out.join("figD3.csv"), &layers)?;
    }
    if !pairings.is_empty() {
        write_csv(&out.join("figB6.csv"), &pairings)?;
    }
    let summary_path = out.join("summary.json");
    fs::write(&summary_path, serde_json::to_string_pretty(&summaries)?).at(&summary_path)?;
    Ok(summaries)
}
