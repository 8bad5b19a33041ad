//! Measurements on trained networks: which neurons are allocated, which
//! subtask they serve, how redundant they are, what they correlate with, and
//! how mirrored first-layer pairs behave as x² regressors.

use ndarray::{Array2, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::netcore::{self, silu, ActivationTrace, NetworkParams};
use crate::tasks::{self, TaskKind, TaskSpec};

pub const DEFAULT_PROBE_SAMPLES: usize = 10_000;
pub const MIN_PROBE_SAMPLES: usize = 1000;
pub const DEFAULT_VARIANCE_THRESHOLD: f64 = 1e-3;
pub const DEFAULT_WEIGHT_THRESHOLD: f64 = 1e-3;
pub const DEFAULT_CORR_THRESHOLD: f64 = 0.75;
pub const DEFAULT_PAIR_DISTANCE_CAP: f64 = 0.2;

/// Activation variance at or below this is treated as constant.
const DEGENERATE_VARIANCE: f64 = 1e-20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    pub samples: usize,
    pub seed: u64,
    /// A neuron is live when its activation variance exceeds this.
    pub variance_threshold: f64,
    /// First-layer weight magnitude counted as nonzero.
    pub weight_threshold: f64,
    pub corr_threshold: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            samples: DEFAULT_PROBE_SAMPLES,
            seed: 0x5eed,
            variance_threshold: DEFAULT_VARIANCE_THRESHOLD,
            weight_threshold: DEFAULT_WEIGHT_THRESHOLD,
            corr_threshold: DEFAULT_CORR_THRESHOLD,
        }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.samples < MIN_PROBE_SAMPLES {
            return Err(Error::InvalidValue(format!(
                "probe sample count {} below {MIN_PROBE_SAMPLES}",
                self.samples
            )));
        }
        if !(self.variance_threshold > 0.0 && self.weight_threshold > 0.0) {
            return Err(Error::InvalidValue("thresholds must be > 0".into()));
        }
        if !(self.corr_threshold > 0.0 && self.corr_threshold < 1.0) {
            return Err(Error::InvalidValue("correlation threshold must lie in (0, 1)".into()));
        }
        Ok(())
    }

    pub fn inputs(&self, task: &TaskSpec) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        tasks::sample_inputs(task, self.samples, &mut rng)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeuronStats {
    pub layer: usize,
    pub neuron: usize,
    pub variance: f64,
    /// Incoming weights, recorded for first-layer neurons only.
    pub incoming: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParallelAttribution {
    pub task1: usize,
    pub task2: usize,
    pub superposed: usize,
    pub dead: usize,
}

impl ParallelAttribution {
    /// `N₁/N₂`, undefined when no neuron serves the second task.
    pub fn ratio(&self) -> Option<f64> {
        (self.task2 > 0).then(|| self.task1 as f64 / self.task2 as f64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AllocationReport {
    pub probe_samples: usize,
    pub threshold: f64,
    /// Live neurons summed over all hidden layers.
    pub total_allocated: usize,
    pub per_layer_live: Vec<usize>,
    /// First-layer neurons with any incoming weight above the weight
    /// threshold: the weight-based count, reported next to the variance one.
    pub weight_allocated: usize,
    pub parallel: Option<ParallelAttribution>,
    pub neurons: Vec<NeuronStats>,
}

impl AllocationReport {
    pub fn live_mask(&self, layer: usize) -> Vec<bool> {
        self.neurons
            .iter()
            .filter(|n| n.layer == layer)
            .map(|n| n.variance > self.threshold)
            .collect()
    }
}

/// Population variance of each column.
pub fn column_variances(a: ArrayView2<f64>) -> Vec<f64> {
    let m = a.nrows() as f64;
    a.columns()
        .into_iter()
        .map(|c| {
            let mean = c.sum() / m;
            c.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m
        })
        .collect()
}

pub fn neuron_stats(params: &NetworkParams, trace: &ActivationTrace) -> Vec<NeuronStats> {
    let first = &params.layers()[0];
    let mut out = Vec::new();
    for (l, acts) in trace.layers.iter().enumerate() {
        for (j, variance) in column_variances(acts.view()).into_iter().enumerate() {
            out.push(NeuronStats {
                layer: l,
                neuron: j,
                variance,
                incoming: (l == 0).then(|| first.incoming(j)),
            });
        }
    }
    out
}

/// Allocation counts on a caller-supplied probe set.
pub fn detect_allocated_on(
    params: &NetworkParams,
    inputs: ArrayView2<f64>,
    threshold: f64,
    weight_threshold: f64,
) -> Result<AllocationReport> {
    if !(threshold > 0.0) {
        return Err(Error::InvalidValue("variance threshold must be > 0".into()));
    }
    let (_, trace) = netcore::forward_with_trace(params, inputs)?;
    let neurons = neuron_stats(params, &trace);
    let mut per_layer_live = vec![0; trace.layers.len()];
    for n in &neurons {
        if n.variance > threshold {
            per_layer_live[n.layer] += 1;
        }
    }
    let first = &params.layers()[0].weights;
    let weight_allocated = first
        .columns()
        .into_iter()
        .filter(|c| c.iter().any(|w| w.abs() > weight_threshold))
        .count();
    Ok(AllocationReport {
        probe_samples: inputs.nrows(),
        threshold,
        total_allocated: per_layer_live.iter().sum(),
        per_layer_live,
        weight_allocated,
        parallel: None,
        neurons,
    })
}

/// Samples `probe.samples` inputs from the task distribution and marks a
/// neuron live iff its activation variance exceeds `probe.variance_threshold`.
/// Parallel tasks also get the first-layer weight attribution.
pub fn detect_allocated(params: &NetworkParams, task: &TaskSpec, probe: &ProbeConfig) -> Result<AllocationReport> {
    probe.validate()?;
    let inputs = probe.inputs(task);
    let mut report = detect_allocated_on(params, inputs.view(), probe.variance_threshold, probe.weight_threshold)?;
    if task.kind == TaskKind::Parallel {
        report.parallel = Some(attribute_parallel(params, probe.weight_threshold)?);
    }
    Ok(report)
}

/// Classifies each first-layer neuron of a 2-input network by which input
/// weights exceed `weight_threshold` in magnitude.
pub fn attribute_parallel(params: &NetworkParams, weight_threshold: f64) -> Result<ParallelAttribution> {
    check_dim("parallel attribution input_dim", 2, params.shape().input_dim)?;
    if !(weight_threshold > 0.0) {
        return Err(Error::InvalidValue("weight threshold must be > 0".into()));
    }
    let w = &params.layers()[0].weights;
    let mut a = ParallelAttribution {
        task1: 0,
        task2: 0,
        superposed: 0,
        dead: 0,
    };
    for j in 0..w.ncols() {
        let first = w[[0, j]].abs() > weight_threshold;
        let second = w[[1, j]].abs() > weight_threshold;
        match (first, second) {
            (true, false) => a.task1 += 1,
            (false, true) => a.task2 += 1,
            (true, true) => a.superposed += 1,
            (false, false) => a.dead += 1,
        }
    }
    Ok(a)
}

/// Pearson correlation matrix of the given columns. Degenerate columns
/// (constant) are reported as `None`.
fn correlation_matrix(cols: &[Vec<f64>]) -> Vec<Vec<Option<f64>>> {
    let centered: Vec<Option<(Vec<f64>, f64)>> = cols
        .iter()
        .map(|c| {
            let m = c.len() as f64;
            let mean = c.iter().sum::<f64>() / m;
            let d: Vec<f64> = c.iter().map(|v| v - mean).collect();
            let ss: f64 = d.iter().map(|v| v * v).sum();
            (ss / m > DEGENERATE_VARIANCE).then(|| (d, ss.sqrt()))
        })
        .collect();
    let n = cols.len();
    let mut out = vec![vec![None; n]; n];
    for i in 0..n {
        let Some((di, ni)) = &centered[i] else { continue };
        out[i][i] = Some(1.0);
        for j in (i + 1)..n {
            let Some((dj, nj)) = &centered[j] else { continue };
            let dot: f64 = di.iter().zip(dj).map(|(a, b)| a * b).sum();
            let r = (dot / (ni * nj)).clamp(-1.0, 1.0);
            out[i][j] = Some(r);
            out[j][i] = Some(r);
        }
    }
    out
}

/// Pearson correlation of two equally long series; `None` when either is
/// constant.
pub fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let m = correlation_matrix(&[a.to_vec(), b.to_vec()]);
    m[0][1]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RedundancyReport {
    pub corr_threshold: f64,
    pub variance_threshold: f64,
    /// `counts[layer][neuron]`: other live neurons of the same layer whose
    /// activation correlation exceeds the threshold. Zero for non-live
    /// neurons.
    pub counts: Vec<Vec<usize>>,
    pub live: usize,
    /// Fraction of live neurons with at least one redundant partner.
    pub fraction_nonzero: f64,
    pub per_layer_fraction: Vec<f64>,
}

/// Per layer, per neuron: indices of its redundant partners.
pub type PartnerLists = Vec<Vec<Vec<usize>>>;

/// `partners[layer][neuron]`: other live neurons of the same layer whose
/// activation correlation with `neuron` exceeds `corr_threshold`.
pub fn redundant_partners_on(
    params: &NetworkParams,
    inputs: ArrayView2<f64>,
    variance_threshold: f64,
    corr_threshold: f64,
) -> Result<(PartnerLists, Vec<Vec<bool>>)> {
    if !(corr_threshold > 0.0 && corr_threshold < 1.0) {
        return Err(Error::InvalidValue("correlation threshold must lie in (0, 1)".into()));
    }
    let (_, trace) = netcore::forward_with_trace(params, inputs)?;
    let mut partners = Vec::with_capacity(trace.layers.len());
    let mut live_masks = Vec::with_capacity(trace.layers.len());
    for acts in &trace.layers {
        let variances = column_variances(acts.view());
        let live: Vec<usize> = (0..acts.ncols())
            .filter(|&j| variances[j] > variance_threshold)
            .collect();
        let cols: Vec<Vec<f64>> = live.iter().map(|&j| acts.column(j).to_vec()).collect();
        let corr = correlation_matrix(&cols);
        let mut layer = vec![Vec::new(); acts.ncols()];
        for (a, &i) in live.iter().enumerate() {
            layer[i] = (0..live.len())
                .filter(|&b| b != a && corr[a][b].is_some_and(|r| r > corr_threshold))
                .map(|b| live[b])
                .collect();
        }
        let mut mask = vec![false; acts.ncols()];
        live.iter().for_each(|&j| mask[j] = true);
        partners.push(layer);
        live_masks.push(mask);
    }
    Ok((partners, live_masks))
}

pub fn redundancy_on(
    params: &NetworkParams,
    inputs: ArrayView2<f64>,
    variance_threshold: f64,
    corr_threshold: f64,
) -> Result<RedundancyReport> {
    let (partners, live_masks) = redundant_partners_on(params, inputs, variance_threshold, corr_threshold)?;
    let mut counts = Vec::with_capacity(partners.len());
    let mut per_layer_fraction = Vec::with_capacity(partners.len());
    let (mut live_total, mut nonzero_total) = (0usize, 0usize);
    for (layer, mask) in partners.iter().zip(&live_masks) {
        let live = mask.iter().filter(|&&m| m).count();
        let nonzero = layer.iter().filter(|p| !p.is_empty()).count();
        per_layer_fraction.push(if live == 0 { 0.0 } else { nonzero as f64 / live as f64 });
        live_total += live;
        nonzero_total += nonzero;
        counts.push(layer.iter().map(Vec::len).collect());
    }
    Ok(RedundancyReport {
        corr_threshold,
        variance_threshold,
        counts,
        live: live_total,
        fraction_nonzero: if live_total == 0 {
            0.0
        } else {
            nonzero_total as f64 / live_total as f64
        },
        per_layer_fraction,
    })
}

pub fn redundancy(params: &NetworkParams, task: &TaskSpec, probe: &ProbeConfig) -> Result<RedundancyReport> {
    probe.validate()?;
    let inputs = probe.inputs(task);
    redundancy_on(params, inputs.view(), probe.variance_threshold, probe.corr_threshold)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TargetCorrelation {
    pub layer: usize,
    pub neuron: usize,
    /// 0 when the neuron is degenerate.
    pub correlation: f64,
    pub degenerate: bool,
}

/// Correlation of every hidden activation column with a reference series.
pub fn correlate_trace_with_target(trace: &ActivationTrace, reference: &[f64]) -> Result<Vec<TargetCorrelation>> {
    let mut out = Vec::new();
    for (l, acts) in trace.layers.iter().enumerate() {
        check_dim("reference length", acts.nrows(), reference.len())?;
        for j in 0..acts.ncols() {
            let r = pearson(&acts.column(j).to_vec(), reference);
            out.push(TargetCorrelation {
                layer: l,
                neuron: j,
                correlation: r.unwrap_or(0.0),
                degenerate: r.is_none(),
            });
        }
    }
    Ok(out)
}

/// Per-neuron correlation of hidden activations with `reference`, evaluated
/// on `inputs` (for the series task, `reference` is typically g(x)).
pub fn correlate_with_target(
    params: &NetworkParams,
    inputs: ArrayView2<f64>,
    reference: &[f64],
) -> Result<Vec<TargetCorrelation>> {
    check_dim("reference length", inputs.nrows(), reference.len())?;
    let (_, trace) = netcore::forward_with_trace(params, inputs)?;
    correlate_trace_with_target(&trace, reference)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MatchingStrategy {
    /// Accept cheapest pairs first, ties broken by ascending neuron index.
    #[default]
    Greedy,
    /// Minimum-cost assignment between positive- and negative-weight neurons.
    Optimal,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchedPair {
    pub first: usize,
    pub second: usize,
    pub cost: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressorPairing {
    pub pairs: Vec<MatchedPair>,
    pub unmatched: Vec<usize>,
    pub distance_cap: f64,
}

/// Distance between `(w_i, b_i)` and the mirror `(−w_j, b_j)`, relative to
/// the mean magnitude of the two neurons. Infinite for same-sign weights.
pub fn mirror_cost(wi: f64, bi: f64, wj: f64, bj: f64) -> f64 {
    if !(wi * wj < 0.0) {
        return f64::INFINITY;
    }
    let num = (wi + wj).hypot(bi - bj);
    let scale = 0.5 * (wi.hypot(bi) + wj.hypot(bj));
    if scale == 0.0 {
        f64::INFINITY
    } else {
        num / scale
    }
}

/// First-layer neurons with an incoming weight above `weight_threshold`.
pub fn weighted_first_layer(params: &NetworkParams, weight_threshold: f64) -> Vec<usize> {
    let w = &params.layers()[0].weights;
    (0..w.ncols())
        .filter(|&j| w.column(j).iter().any(|v| v.abs() > weight_threshold))
        .collect()
}

/// Pairs mirrored first-layer neurons (same bias, opposite weight) among
/// `candidates`. Only pairs with cost ≤ `distance_cap` are accepted.
pub fn match_symmetric_pairs(
    params: &NetworkParams,
    candidates: &[usize],
    distance_cap: f64,
    strategy: MatchingStrategy,
) -> Result<RegressorPairing> {
    check_dim("pairing input_dim", 1, params.shape().input_dim)?;
    let first = &params.layers()[0];
    let width = first.fan_out();
    let mut cands: Vec<usize> = candidates.to_vec();
    cands.sort_unstable();
    cands.dedup();
    if let Some(&bad) = cands.iter().find(|&&j| j >= width) {
        return Err(Error::InvalidValue(format!("neuron index {bad} out of range")));
    }
    let wb = |j: usize| (first.weights[[0, j]], first.biases[j]);
    let cost = |i: usize, j: usize| {
        let ((wi, bi), (wj, bj)) = (wb(i), wb(j));
        mirror_cost(wi, bi, wj, bj)
    };

    let mut pairs = Vec::new();
    match strategy {
        MatchingStrategy::Greedy => {
            let mut edges = Vec::new();
            for (a, &i) in cands.iter().enumerate() {
                for &j in &cands[a + 1..] {
                    let c = cost(i, j);
                    if c <= distance_cap {
                        edges.push((c, i, j));
                    }
                }
            }
            edges.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)).then(x.2.cmp(&y.2)));
            let mut used = vec![false; width];
            for (c, i, j) in edges {
                if !used[i] && !used[j] {
                    used[i] = true;
                    used[j] = true;
                    pairs.push(MatchedPair {
                        first: i,
                        second: j,
                        cost: c,
                    });
                }
            }
        }
        MatchingStrategy::Optimal => {
            let pos: Vec<usize> = cands.iter().copied().filter(|&j| wb(j).0 > 0.0).collect();
            let neg: Vec<usize> = cands.iter().copied().filter(|&j| wb(j).0 < 0.0).collect();
            let n = pos.len().max(neg.len());
            // Accepting a pair gains (cap − cost); dummy rows/columns mean
            // "unmatched" at zero gain.
            let mut m = vec![vec![0.0; n]; n];
            for (a, &i) in pos.iter().enumerate() {
                for (b, &j) in neg.iter().enumerate() {
                    let c = cost(i, j);
                    m[a][b] = if c <= distance_cap { c - distance_cap } else { 0.0 };
                }
            }
            for (a, b) in hungarian(&m).into_iter().enumerate() {
                if a < pos.len() && b < neg.len() {
                    let (i, j) = (pos[a], neg[b]);
                    let c = cost(i, j);
                    if c <= distance_cap {
                        let (first, second) = if i < j { (i, j) } else { (j, i) };
                        pairs.push(MatchedPair { first, second, cost: c });
                    }
                }
            }
            pairs.sort_by(|x, y| x.cost.total_cmp(&y.cost).then(x.first.cmp(&y.first)));
        }
    }
    let mut matched = vec![false; width];
    for p in &pairs {
        matched[p.first] = true;
        matched[p.second] = true;
    }
    let unmatched = cands.into_iter().filter(|&j| !matched[j]).collect();
    Ok(RegressorPairing {
        pairs,
        unmatched,
        distance_cap,
    })
}

/// Minimum-cost perfect assignment on a square matrix (Kuhn–Munkres with
/// potentials). Returns the column assigned to each row.
fn hungarian(cost: &[Vec<f64>]) -> Vec<usize> {
    let n = cost.len();
    if n == 0 {
        return Vec::new();
    }
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0; n];
    for j in 1..=n {
        if p[j] > 0 {
            assignment[p[j] - 1] = j - 1;
        }
    }
    assignment
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DroppedPair {
    pub pair: (usize, usize),
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorCorrelation {
    pub grid: Vec<f64>,
    pub pairs: Vec<(usize, usize)>,
    /// Least-squares `(scale, offset)` mapping each pair output onto the target.
    pub fits: Vec<(f64, f64)>,
    /// `errors[k][g]`: fitted output of pair `k` minus the target at grid point `g`.
    pub errors: Vec<Vec<f64>>,
    pub correlation: Vec<Vec<f64>>,
    pub dropped: Vec<DroppedPair>,
}

impl ErrorCorrelation {
    /// Fraction of off-diagonal entries with `|corr| > level`.
    pub fn fraction_above(&self, level: f64) -> f64 {
        let n = self.correlation.len();
        if n < 2 {
            return 0.0;
        }
        let mut hits = 0;
        for i in 0..n {
            for j in 0..n {
                if i != j && self.correlation[i][j].abs() > level {
                    hits += 1;
                }
            }
        }
        hits as f64 / (n * (n - 1)) as f64
    }
}

/// `count` evenly spaced points on `[low, high]`.
pub fn uniform_grid(low: f64, high: f64, count: usize) -> Vec<f64> {
    match count {
        0 => Vec::new(),
        1 => vec![0.5 * (low + high)],
        _ => (0..count)
            .map(|i| low + (high - low) * i as f64 / (count - 1) as f64)
            .collect(),
    }
}

/// Each matched pair contributes `v_i·silu(w_i x + b_i) + v_j·silu(w_j x + b_j)`
/// to the output. That contribution is mapped onto `target` by an affine
/// least-squares fit over `grid`; the residual is the pair's error function.
/// Pairs with a constant contribution or a perfect fit are dropped.
pub fn regressor_errors_and_correlation(
    params: &NetworkParams,
    pairing: &RegressorPairing,
    grid: &[f64],
    target: &dyn Fn(f64) -> f64,
) -> Result<ErrorCorrelation> {
    let shape = params.shape();
    check_dim("regressor input_dim", 1, shape.input_dim)?;
    check_dim("regressor output_dim", 1, shape.output_dim)?;
    check_dim("regressor hidden layers", 1, shape.hidden_layers())?;
    if grid.len() < 3 {
        return Err(Error::InsufficientData("grid needs at least 3 points".into()));
    }
    let first = &params.layers()[0];
    let readout = &params.output_layer().weights;
    let y: Vec<f64> = grid.iter().map(|&x| target(x)).collect();
    let m = grid.len() as f64;
    let y_mean = y.iter().sum::<f64>() / m;

    let mut out = ErrorCorrelation {
        grid: grid.to_vec(),
        pairs: Vec::new(),
        fits: Vec::new(),
        errors: Vec::new(),
        correlation: Vec::new(),
        dropped: Vec::new(),
    };
    for p in &pairing.pairs {
        let (i, j) = (p.first, p.second);
        let h: Vec<f64> = grid
            .iter()
            .map(|&x| {
                readout[[i, 0]] * silu(first.weights[[0, i]] * x + first.biases[i])
                    + readout[[j, 0]] * silu(first.weights[[0, j]] * x + first.biases[j])
            })
            .collect();
        let h_mean = h.iter().sum::<f64>() / m;
        let var_h = h.iter().map(|v| (v - h_mean) * (v - h_mean)).sum::<f64>() / m;
        if !(var_h > DEGENERATE_VARIANCE) {
            out.dropped.push(DroppedPair {
                pair: (i, j),
                reason: "pair output is constant on the grid".into(),
            });
            continue;
        }
        let cov = h.iter().zip(&y).map(|(a, b)| (a - h_mean) * (b - y_mean)).sum::<f64>() / m;
        let scale = cov / var_h;
        let offset = y_mean - scale * h_mean;
        let e: Vec<f64> = h.iter().zip(&y).map(|(a, b)| scale * a + offset - b).collect();
        let e_mean = e.iter().sum::<f64>() / m;
        if !(e.iter().map(|v| (v - e_mean) * (v - e_mean)).sum::<f64>() / m > DEGENERATE_VARIANCE) {
            out.dropped.push(DroppedPair {
                pair: (i, j),
                reason: "error function is constant on the grid".into(),
            });
            continue;
        }
        out.pairs.push((i, j));
        out.fits.push((scale, offset));
        out.errors.push(e);
    }
    out.correlation = correlation_matrix(&out.errors)
        .into_iter()
        .map(|row| row.into_iter().map(|r| r.unwrap_or(0.0)).collect())
        .collect();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netcore::{Layer, NetworkShape};
    use ndarray::{array, Array1};
    use rand::Rng;

    fn single_input_net(w: &[f64], b: &[f64], v: &[f64]) -> NetworkParams {
        let n = w.len();
        NetworkParams::from_layers(
            NetworkShape::new(1, vec![n], 1).unwrap(),
            vec![
                Layer {
                    weights: Array2::from_shape_vec((1, n), w.to_vec()).unwrap(),
                    biases: Array1::from(b.to_vec()),
                },
                Layer {
                    weights: Array2::from_shape_vec((n, 1), v.to_vec()).unwrap(),
                    biases: array![0.0],
                },
            ],
        )
        .unwrap()
    }

    #[test]
    fn probe_config_validation() {
        assert!(ProbeConfig::default().validate().is_ok());
        assert!(ProbeConfig {
            samples: 999,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(ProbeConfig {
            variance_threshold: 0.0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(ProbeConfig {
            corr_threshold: 1.0,
            ..Default::default()
        }
        .validate()
        .is_err());
    }

    #[test]
    fn zero_incoming_weights_not_allocated() {
        let p = single_input_net(&[0.0, 2.0, 0.0], &[0.7, 0.0, -1.0], &[1.0, 1.0, 1.0]);
        let task = tasks::make_single_task("square").unwrap();
        let r = detect_allocated(&p, &task, &ProbeConfig::default()).unwrap();
        assert_eq!(r.per_layer_live, vec![1]);
        assert_eq!(r.total_allocated, 1);
        assert_eq!(r.weight_allocated, 1);
        assert!(r.neurons[0].variance < 1e-20);
        assert_eq!(r.live_mask(0), vec![false, true, false]);
    }

    #[test]
    fn hand_built_deep_net_counts_by_design() {
        // layer 1: k = 3 neurons wired to the input, 2 zeroed
        // layer 2: 2 neurons reading live layer-1 neurons, 2 with zero rows
        let shape = NetworkShape::new(1, vec![5, 4], 1).unwrap();
        let mut p = NetworkParams::zeros(&shape).unwrap();
        {
            let l = p.layers_mut();
            l[0].weights = array![[1.5, -2.0, 0.0, 1.0, 0.0]];
            l[0].biases = array![0.1, 0.2, 0.3, -0.4, 0.5];
            l[1].weights[[0, 1]] = 1.0;
            l[1].weights[[1, 1]] = 0.5;
            l[1].weights[[3, 2]] = -2.0;
            l[1].weights[[2, 3]] = 3.0; // reads a dead neuron: constant
        }
        let task = tasks::make_single_task("square").unwrap();
        let r = detect_allocated(&p, &task, &ProbeConfig::default()).unwrap();
        assert_eq!(r.per_layer_live, vec![3, 2]);
        assert_eq!(r.total_allocated, 5);
    }

    #[test]
    fn threshold_sweep_is_monotone() {
        let shape = NetworkShape::new(1, vec![200], 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let p = NetworkParams::init_uniform(&shape, &mut rng).unwrap();
        let task = tasks::make_single_task("square").unwrap();
        let mut prev = usize::MAX;
        for t in [1e-3, 3e-3, 1e-2, 3e-2, 1e-1] {
            let n = detect_allocated(
                &p,
                &task,
                &ProbeConfig {
                    variance_threshold: t,
                    ..Default::default()
                },
            )
            .unwrap()
            .total_allocated;
            assert!(n <= prev);
            prev = n;
        }
    }

    #[test]
    fn attribution_examples() {
        let shape = NetworkShape::new(2, vec![4], 2).unwrap();
        let mut p = NetworkParams::zeros(&shape).unwrap();
        p.layers_mut()[0].weights = array![[0.5, 0.5, 0.0, 0.0], [0.0, 0.5, -0.3, 0.0005]];
        let a = attribute_parallel(&p, 1e-3).unwrap();
        assert_eq!(
            a,
            ParallelAttribution {
                task1: 1,
                task2: 1,
                superposed: 1,
                dead: 1
            }
        );
        assert_eq!(a.ratio(), Some(1.0));
        let single = single_input_net(&[1.0], &[0.0], &[1.0]);
        assert!(attribute_parallel(&single, 1e-3).is_err());
    }

    #[test]
    fn duplicate_neurons_are_mutually_redundant() {
        let p = single_input_net(&[1.0, 1.0, -0.5], &[0.2, 0.2, 0.9], &[1.0, 1.0, 1.0]);
        let task = tasks::make_single_task("square").unwrap();
        let r = redundancy(&p, &task, &ProbeConfig::default()).unwrap();
        assert!(r.counts[0][0] >= 1 && r.counts[0][1] >= 1);
        assert!(r.counts[0].iter().all(|&c| c <= 2));
    }

    #[test]
    fn random_high_dimensional_net_has_little_redundancy() {
        let shape = NetworkShape::new(64, vec![32], 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let mut p = NetworkParams::init_uniform(&shape, &mut rng).unwrap();
        // widen the first layer so every neuron clears the liveness bar
        p.layers_mut()[0].weights.mapv_inplace(|w| 8.0 * w);
        let inputs = Array2::from_shape_fn((4000, 64), |_| rng.random_range(-1.0..1.0));
        let r = redundancy_on(&p, inputs.view(), 1e-3, 0.75).unwrap();
        assert_eq!(r.live, 32);
        assert!(r.fraction_nonzero <= 0.1, "fraction {}", r.fraction_nonzero);
    }

    #[test]
    fn pearson_handles_degenerate_series() {
        assert!((pearson(&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0]).unwrap() - 1.0).abs() < 1e-15);
        assert!((pearson(&[1.0, 2.0, 3.0], &[6.0, 4.0, 2.0]).unwrap() + 1.0).abs() < 1e-15);
        assert_eq!(pearson(&[1.0, 1.0, 1.0], &[6.0, 4.0, 2.0]), None);
    }

    #[test]
    fn target_correlation_signs() {
        let task = tasks::make_series_task().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = tasks::sample_inputs(&task, 2000, &mut rng);
        let g = tasks::intermediate_target_g(x.view()).unwrap();
        let mut cols = Array2::zeros((2000, 3));
        for (m, gv) in g.iter().enumerate() {
            cols[[m, 0]] = *gv;
            cols[[m, 1]] = -*gv;
            cols[[m, 2]] = 0.25;
        }
        let trace = ActivationTrace { layers: vec![cols] };
        let c = correlate_trace_with_target(&trace, &g).unwrap();
        assert!((c[0].correlation - 1.0).abs() < 1e-12);
        assert!((c[1].correlation + 1.0).abs() < 1e-12);
        assert!(c[2].degenerate && c[2].correlation == 0.0);
        let shape = NetworkShape::new(4, vec![3], 1).unwrap();
        let p = NetworkParams::init_uniform(&shape, &mut rng).unwrap();
        assert!(correlate_with_target(&p, x.view(), &g[..10]).is_err());
        assert_eq!(correlate_with_target(&p, x.view(), &g).unwrap().len(), 3);
    }

    #[test]
    fn pairing_examples() {
        let exact = single_input_net(&[1.0, -1.0], &[0.5, 0.5], &[1.0, 1.0]);
        let r = match_symmetric_pairs(&exact, &[0, 1], 0.2, MatchingStrategy::Greedy).unwrap();
        assert_eq!(r.pairs.len(), 1);
        assert_eq!(r.pairs[0].cost, 0.0);
        assert!(r.unmatched.is_empty());

        let near = single_input_net(&[1.0, -1.05], &[0.5, 0.52], &[1.0, 1.0]);
        let r = match_symmetric_pairs(&near, &[0, 1], 0.2, MatchingStrategy::Greedy).unwrap();
        let expected = (0.05f64 * 0.05 + 0.02 * 0.02).sqrt()
            / (0.5 * ((1.0f64 + 0.25).sqrt() + (1.05f64 * 1.05 + 0.52 * 0.52).sqrt()));
        assert_eq!(r.pairs.len(), 1);
        assert!((r.pairs[0].cost - expected).abs() < 1e-15);
        assert!(r.pairs[0].cost > 0.0);

        let same = single_input_net(&[1.0, 1.0], &[0.5, 0.5], &[1.0, 1.0]);
        let r = match_symmetric_pairs(&same, &[0, 1], 0.2, MatchingStrategy::Greedy).unwrap();
        assert!(r.pairs.is_empty());
        assert_eq!(r.unmatched, vec![0, 1]);
    }

    #[test]
    fn greedy_tie_break_and_optimal_agree_on_easy_cases() {
        // 0 mirrors both 1 and 2 equally; greedy takes the lower index.
        let p = single_input_net(&[1.0, -1.0, -1.0, 2.0, -2.1], &[0.1, 0.1, 0.1, -0.3, -0.3], &[1.0; 5]);
        let all: Vec<usize> = (0..5).collect();
        let g = match_symmetric_pairs(&p, &all, 0.2, MatchingStrategy::Greedy).unwrap();
        let pairs: Vec<(usize, usize)> = g.pairs.iter().map(|q| (q.first, q.second)).collect();
        assert_eq!(pairs, vec![(0, 1), (3, 4)]);
        assert_eq!(g.unmatched, vec![2]);
        let o = match_symmetric_pairs(&p, &all, 0.2, MatchingStrategy::Optimal).unwrap();
        assert_eq!(o.pairs.len(), 2);
        let total = |r: &RegressorPairing| r.pairs.iter().map(|q| q.cost).sum::<f64>();
        assert!(total(&o) <= total(&g) + 1e-15);
    }

    #[test]
    fn optimal_matching_beats_greedy_when_greedy_is_myopic() {
        // greedy grabs (0,1) first and strands 2 and 3
        let p = single_input_net(&[1.0, -1.0, 1.1, -0.9], &[0.0, 0.0, 0.0, 0.0], &[1.0; 4]);
        let all = [0, 1, 2, 3];
        let cap = 0.15;
        let g = match_symmetric_pairs(&p, &all, cap, MatchingStrategy::Greedy).unwrap();
        let o = match_symmetric_pairs(&p, &all, cap, MatchingStrategy::Optimal).unwrap();
        assert!(o.pairs.len() >= g.pairs.len());
        for r in [&g, &o] {
            assert!(r.pairs.iter().all(|q| q.cost <= cap));
        }
    }

    #[test]
    fn hungarian_small_matrix() {
        let m = vec![vec![4.0, 1.0, 3.0], vec![2.0, 0.0, 5.0], vec![3.0, 2.0, 2.0]];
        let a = hungarian(&m);
        let total: f64 = a.iter().enumerate().map(|(i, &j)| m[i][j]).sum();
        assert_eq!(total, 5.0);
    }

    #[test]
    fn identical_pairs_have_unit_error_correlation() {
        let p = single_input_net(&[1.0, -1.0, 1.0, -1.0], &[0.5, 0.5, 0.5, 0.5], &[1.0; 4]);
        let pairing = RegressorPairing {
            pairs: vec![
                MatchedPair {
                    first: 0,
                    second: 1,
                    cost: 0.0,
                },
                MatchedPair {
                    first: 2,
                    second: 3,
                    cost: 0.0,
                },
            ],
            unmatched: vec![],
            distance_cap: 0.2,
        };
        let e = regressor_errors_and_correlation(&p, &pairing, &uniform_grid(-1.0, 1.0, 512), &|x| x * x).unwrap();
        assert_eq!(e.errors.len(), 2);
        assert!((e.correlation[0][1] - 1.0).abs() < 1e-12);
        assert_eq!(e.correlation[0][0], 1.0);
    }

    #[test]
    fn odd_and_even_error_modes_are_uncorrelated() {
        // pair A is an exact mirror (even error), pair B has unequal readout
        // weights, which adds an odd component that dominates its error.
        let p = single_input_net(&[1.0, -1.0, 0.8, -0.8], &[0.5, 0.5, -0.2, -0.2], &[1.0, 1.0, 1.0, 0.6]);
        let pairing = RegressorPairing {
            pairs: vec![
                MatchedPair {
                    first: 0,
                    second: 1,
                    cost: 0.0,
                },
                MatchedPair {
                    first: 2,
                    second: 3,
                    cost: 0.0,
                },
            ],
            unmatched: vec![],
            distance_cap: 0.2,
        };
        let e = regressor_errors_and_correlation(&p, &pairing, &uniform_grid(-1.0, 1.0, 512), &|x| x * x).unwrap();
        assert!(e.correlation[0][1].abs() < 0.3, "corr {}", e.correlation[0][1]);
    }

    #[test]
    fn dead_pair_is_dropped() {
        let p = single_input_net(&[0.0, 0.0, 1.0, -1.0], &[0.5, 0.5, 0.5, 0.5], &[1.0; 4]);
        let pairing = RegressorPairing {
            pairs: vec![
                MatchedPair {
                    first: 0,
                    second: 1,
                    cost: 0.0,
                },
                MatchedPair {
                    first: 2,
                    second: 3,
                    cost: 0.0,
                },
            ],
            unmatched: vec![],
            distance_cap: 0.2,
        };
        let e = regressor_errors_and_correlation(&p, &pairing, &uniform_grid(-1.0, 1.0, 64), &|x| x * x).unwrap();
        assert_eq!(e.pairs, vec![(2, 3)]);
        assert_eq!(e.dropped.len(), 1);
    }

    #[test]
    fn grid_endpoints() {
        let g = uniform_grid(-1.0, 1.0, 512);
        assert_eq!(g.len(), 512);
        assert_eq!((g[0], g[511]), (-1.0, 1.0));
    }
}
