//! Analytic side: power-law fits, optimal neuron allocation under a budget,
//! composite-loss predictors, the ensembling law and its Monte Carlo check,
//! the series-loss decomposition, and the parameter-count exponent.

use ndarray::ArrayView2;
use num_rational::Ratio;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::tasks::TargetFunction;

pub const DEFAULT_NEURON_COST: f64 = 2.0;
pub const DEFAULT_GROWTH_CV_BOUND: f64 = 0.25;
pub const SEPARABLE_RATIO: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScalingFit {
    pub exponent: f64,
    pub log_coefficient: f64,
    pub r_squared: f64,
    pub x_min: f64,
    pub x_max: f64,
    pub count: usize,
}

impl ScalingFit {
    pub fn coefficient(&self) -> f64 {
        self.log_coefficient.exp()
    }

    pub fn predict(&self, x: f64) -> f64 {
        self.coefficient() * x.powf(self.exponent)
    }
}

/// Ordinary least squares of `ln y` on `ln x`.
pub fn fit_power_law(points: &[(f64, f64)]) -> Result<ScalingFit> {
    if points.len() < 3 {
        return Err(Error::InsufficientData(format!(
            "power-law fit needs at least 3 points, got {}",
            points.len()
        )));
    }
    if let Some(&(x, y)) = points
        .iter()
        .find(|(x, y)| !(*x > 0.0 && *y > 0.0 && x.is_finite() && y.is_finite()))
    {
        return Err(Error::InvalidValue(format!(
            "power-law fit needs positive finite points, got ({x}, {y})"
        )));
    }
    let n = points.len() as f64;
    let lx: Vec<f64> = points.iter().map(|p| p.0.ln()).collect();
    let ly: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxx: f64 = lx.iter().map(|x| (x - mx) * (x - mx)).sum();
    if sxx == 0.0 {
        return Err(Error::InsufficientData("all abscissae are equal".into()));
    }
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_tot: f64 = ly.iter().map(|y| (y - my) * (y - my)).sum();
    let ss_res: f64 = lx
        .iter()
        .zip(&ly)
        .map(|(x, y)| {
            let r = y - (intercept + slope * x);
            r * r
        })
        .sum();
    let r_squared = if ss_tot == 0.0 {
        1.0
    } else {
        (1.0 - ss_res / ss_tot).clamp(0.0, 1.0)
    };
    Ok(ScalingFit {
        exponent: slope,
        log_coefficient: intercept,
        r_squared,
        x_min: points.iter().map(|p| p.0).fold(f64::INFINITY, f64::min),
        x_max: points.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max),
        count: points.len(),
    })
}

/// Fit restricted to points with `x_min ≤ x ≤ x_max`.
pub fn fit_power_law_window(points: &[(f64, f64)], x_min: f64, x_max: f64) -> Result<ScalingFit> {
    let kept: Vec<(f64, f64)> = points
        .iter()
        .copied()
        .filter(|p| p.0 >= x_min && p.0 <= x_max)
        .collect();
    fit_power_law(&kept)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AllocationProblem {
    /// `aᵢ`: loss of subtask `i` is `aᵢ/nᵢ`.
    pub importance: Vec<f64>,
    /// `cᵢ`: budget consumed per neuron given to subtask `i`.
    pub costs: Vec<f64>,
    pub budget: f64,
}

impl AllocationProblem {
    pub fn new(importance: Vec<f64>, costs: Vec<f64>, budget: f64) -> Result<Self> {
        let p = Self {
            importance,
            costs,
            budget,
        };
        p.validate()?;
        Ok(p)
    }

    /// Every subtask neuron costs [`DEFAULT_NEURON_COST`].
    pub fn with_default_costs(importance: Vec<f64>, budget: f64) -> Result<Self> {
        let costs = vec![DEFAULT_NEURON_COST; importance.len()];
        Self::new(importance, costs, budget)
    }

    pub fn validate(&self) -> Result<()> {
        if self.importance.is_empty() {
            return Err(Error::InvalidValue("allocation problem has no subtasks".into()));
        }
        check_dim("allocation costs", self.importance.len(), self.costs.len())?;
        let positive = |v: f64| v > 0.0 && v.is_finite();
        if !self.importance.iter().chain(&self.costs).all(|&v| positive(v)) || !positive(self.budget) {
            return Err(Error::InvalidValue(
                "importances, costs and budget must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn loss(&self, allocations: &[f64]) -> f64 {
        self.importance.iter().zip(allocations).map(|(a, n)| a / n).sum()
    }

    pub fn spent(&self, allocations: &[f64]) -> f64 {
        self.costs.iter().zip(allocations).map(|(c, n)| c * n).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AllocationSolution {
    pub allocations: Vec<f64>,
    pub loss: f64,
}

/// Stationary point of `Σ aᵢ/nᵢ` subject to `Σ cᵢnᵢ = N`:
/// `nᵢ = √(aᵢ/cᵢ)·N / Σⱼ √(aⱼcⱼ)`.
pub fn solve_allocation(problem: &AllocationProblem) -> Result<AllocationSolution> {
    problem.validate()?;
    let denom: f64 = problem
        .importance
        .iter()
        .zip(&problem.costs)
        .map(|(a, c)| (a * c).sqrt())
        .sum();
    let allocations: Vec<f64> = problem
        .importance
        .iter()
        .zip(&problem.costs)
        .map(|(a, c)| (a / c).sqrt() * problem.budget / denom)
        .collect();
    Ok(AllocationSolution {
        loss: problem.loss(&allocations),
        allocations,
    })
}

pub const MAX_BRUTEFORCE_SUBTASKS: usize = 3;
pub const MIN_BRUTEFORCE_STEPS: usize = 1000;

/// Exhaustive search over budget shares `k/steps` (the last subtask takes
/// the remainder).
pub fn solve_allocation_bruteforce(problem: &AllocationProblem, grid_steps: usize) -> Result<AllocationSolution> {
    problem.validate()?;
    let k = problem.importance.len();
    if !(2..=MAX_BRUTEFORCE_SUBTASKS).contains(&k) {
        return Err(Error::InvalidValue(format!(
            "brute-force allocation supports 2 or 3 subtasks, got {k}"
        )));
    }
    if grid_steps < MIN_BRUTEFORCE_STEPS {
        return Err(Error::InvalidValue(format!(
            "grid_steps must be at least {MIN_BRUTEFORCE_STEPS}"
        )));
    }
    let (n_budget, c, s) = (problem.budget, &problem.costs, grid_steps as f64);
    let mut best: Option<(f64, Vec<f64>)> = None;
    let mut consider = |alloc: Vec<f64>| {
        let loss = problem.loss(&alloc);
        if best.as_ref().is_none_or(|(b, _)| loss < *b) {
            best = Some((loss, alloc));
        }
    };
    if k == 2 {
        for i in 1..grid_steps {
            let t = i as f64 / s;
            consider(vec![t * n_budget / c[0], (1.0 - t) * n_budget / c[1]]);
        }
    } else {
        for i in 1..grid_steps {
            for j in 1..(grid_steps - i) {
                let (t1, t2) = (i as f64 / s, j as f64 / s);
                consider(vec![
                    t1 * n_budget / c[0],
                    t2 * n_budget / c[1],
                    (1.0 - t1 - t2) * n_budget / c[2],
                ]);
            }
        }
    }
    let (loss, allocations) = best.expect("grid has interior points");
    Ok(AllocationSolution { allocations, loss })
}

/// Best integer allocation among the floor/ceil neighbours of the continuous
/// optimum that stays within budget with every `nᵢ ≥ 1`.
pub fn round_allocation(problem: &AllocationProblem, solution: &AllocationSolution) -> Result<Vec<u64>> {
    problem.validate()?;
    check_dim(
        "rounding allocations",
        problem.importance.len(),
        solution.allocations.len(),
    )?;
    let k = solution.allocations.len();
    if k > 20 {
        return Err(Error::InvalidValue(
            "rounding search supports at most 20 subtasks".into(),
        ));
    }
    let mut best: Option<(f64, Vec<u64>)> = None;
    for mask in 0u32..(1 << k) {
        let cand: Vec<u64> = solution
            .allocations
            .iter()
            .enumerate()
            .map(|(i, &n)| {
                let v = if mask & (1 << i) != 0 { n.ceil() } else { n.floor() };
                v.max(1.0) as u64
            })
            .collect();
        let as_f: Vec<f64> = cand.iter().map(|&v| v as f64).collect();
        if problem.spent(&as_f) > problem.budget * (1.0 + 1e-12) {
            continue;
        }
        let loss = problem.loss(&as_f);
        if best.as_ref().is_none_or(|(b, _)| loss < *b) {
            best = Some((loss, cand));
        }
    }
    best.map(|(_, v)| v)
        .ok_or_else(|| Error::InsufficientData("budget cannot give every subtask one neuron".into()))
}

fn check_allocations(allocations: &[f64]) -> Result<()> {
    if allocations.iter().any(|&n| !(n > 0.0)) {
        return Err(Error::InvalidValue("allocations must be positive".into()));
    }
    Ok(())
}

/// `Σ βᵢ·kᵢ/Nᵢ`.
pub fn predict_parallel_loss(betas: &[f64], allocations: &[f64], unit_coefficients: &[f64]) -> Result<f64> {
    check_dim("parallel allocations", betas.len(), allocations.len())?;
    check_dim("parallel coefficients", betas.len(), unit_coefficients.len())?;
    if (betas.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidValue("subtask weights must sum to 1".into()));
    }
    check_allocations(allocations)?;
    Ok(betas
        .iter()
        .zip(allocations)
        .zip(unit_coefficients)
        .map(|((b, n), k)| b * k / n)
        .sum())
}

/// `A/N_g + B/N_f`.
pub fn predict_series_loss(coefficients: (f64, f64), allocations: (f64, f64)) -> Result<f64> {
    check_allocations(&[allocations.0, allocations.1])?;
    Ok(coefficients.0 / allocations.0 + coefficients.1 / allocations.1)
}

/// Least-squares `(A, B)` from measured `(N_g, N_f, loss)` triples.
pub fn fit_series_coefficients(triples: &[(f64, f64, f64)]) -> Result<(f64, f64)> {
    if triples.len() < 2 {
        return Err(Error::InsufficientData("need at least 2 triples".into()));
    }
    let (mut s11, mut s12, mut s22, mut t1, mut t2) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for &(ng, nf, l) in triples {
        check_allocations(&[ng, nf])?;
        let (u, v) = (1.0 / ng, 1.0 / nf);
        s11 += u * u;
        s12 += u * v;
        s22 += v * v;
        t1 += u * l;
        t2 += v * l;
    }
    let det = s11 * s22 - s12 * s12;
    if det.abs() <= 1e-12 * s11 * s22 {
        return Err(Error::InsufficientData(
            "allocations are collinear; A and B are not identifiable".into(),
        ));
    }
    Ok(((t1 * s22 - t2 * s12) / det, (s11 * t2 - s12 * t1) / det))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatioSeries {
    pub numerator: usize,
    pub denominator: usize,
    /// One entry per scale; `None` where a count was zero.
    pub values: Vec<Option<f64>>,
    pub mean: Option<f64>,
    /// Population coefficient of variation over the defined values.
    pub cv: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GrowthReport {
    pub scales: Vec<f64>,
    pub ratios: Vec<RatioSeries>,
    pub bound: f64,
    pub pass: bool,
}

/// Checks that every pairwise ratio `Nᵢ/Nⱼ` stays constant across scales.
pub fn homogeneous_growth_check(series: &[(f64, Vec<f64>)], bound: f64) -> Result<GrowthReport> {
    if series.len() < 3 {
        return Err(Error::InsufficientData("growth check needs at least 3 scales".into()));
    }
    let k = series[0].1.len();
    if k < 2 {
        return Err(Error::InsufficientData("growth check needs at least 2 subtasks".into()));
    }
    for (_, counts) in series {
        check_dim("growth check subtasks", k, counts.len())?;
    }
    let mut ratios = Vec::new();
    for i in 0..k {
        for j in (i + 1)..k {
            let values: Vec<Option<f64>> = series
                .iter()
                .map(|(_, c)| (c[i] > 0.0 && c[j] > 0.0).then(|| c[i] / c[j]))
                .collect();
            let defined: Vec<f64> = values.iter().flatten().copied().collect();
            let (mean, cv) = if defined.len() >= 2 {
                let m = defined.iter().sum::<f64>() / defined.len() as f64;
                let var = defined.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / defined.len() as f64;
                (Some(m), Some(var.sqrt() / m))
            } else {
                (defined.first().copied(), None)
            };
            ratios.push(RatioSeries {
                numerator: i,
                denominator: j,
                values,
                mean,
                cv,
            });
        }
    }
    let pass = ratios.iter().all(|r| r.cv.is_some_and(|cv| cv <= bound));
    Ok(GrowthReport {
        scales: series.iter().map(|s| s.0).collect(),
        ratios,
        bound,
        pass,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnsembleSpec {
    pub n: usize,
    pub error_variance: f64,
    pub correlation: f64,
}

impl EnsembleSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || !(self.error_variance > 0.0) {
            return Err(Error::InvalidValue(
                "ensemble needs n ≥ 1 and positive error variance".into(),
            ));
        }
        let lower = if self.n > 1 { -1.0 / (self.n - 1) as f64 } else { -1.0 };
        if !(self.correlation >= lower && self.correlation <= 1.0) {
            return Err(Error::InvalidValue(format!(
                "correlation {} outside [{lower}, 1] for n = {}",
                self.correlation, self.n
            )));
        }
        Ok(())
    }
}

/// Variance of `Σ wᵢeᵢ` for equicorrelated errors:
/// `ê²·(Σwᵢ² + ρ·Σ_{i≠j} wᵢwⱼ)`. Weights default to `1/n`.
pub fn ensemble_mse(spec: &EnsembleSpec, weights: Option<&[f64]>) -> Result<f64> {
    spec.validate()?;
    match weights {
        None => {
            let n = spec.n as f64;
            Ok(spec.error_variance * (1.0 + spec.correlation * (n - 1.0)) / n)
        }
        Some(w) => {
            check_dim("ensemble weights", spec.n, w.len())?;
            let sum: f64 = w.iter().sum();
            let sq: f64 = w.iter().map(|v| v * v).sum();
            Ok(spec.error_variance * (sq + spec.correlation * (sum * sum - sq)))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleOracleResult {
    pub correlation: f64,
    pub samples: usize,
    /// `(n, empirical MSE of the equal-weight average)`.
    pub points: Vec<(usize, f64)>,
    pub fit: ScalingFit,
}

/// Monte Carlo check of the ensembling law. For each `n`, draws `n`
/// centred unit-variance error series with pairwise correlation `ρ`
/// (`eᵢ = √ρ·z₀ + √(1−ρ)·zᵢ`), averages them and measures the MSE.
pub fn ensemble_empirical_oracle<R: Rng + ?Sized>(
    n_values: &[usize],
    samples: usize,
    correlation: f64,
    rng: &mut R,
) -> Result<EnsembleOracleResult> {
    if n_values.len() < 3 || n_values.contains(&0) {
        return Err(Error::InvalidValue("need at least 3 ensemble sizes, all ≥ 1".into()));
    }
    if samples < 2 {
        return Err(Error::InsufficientData("need at least 2 samples".into()));
    }
    if !(0.0..=1.0).contains(&correlation) {
        return Err(Error::InvalidValue("oracle correlation must lie in [0, 1]".into()));
    }
    let (shared, own) = (correlation.sqrt(), (1.0 - correlation).sqrt());
    let mut points = Vec::with_capacity(n_values.len());
    for &n in n_values {
        let z0: Vec<f64> = (0..samples).map(|_| rng.sample(StandardNormal)).collect();
        let mut avg = vec![0.0; samples];
        for _ in 0..n {
            let mut e: Vec<f64> = z0
                .iter()
                .map(|&z| shared * z + own * rng.sample::<f64, _>(StandardNormal))
                .collect();
            let mean = e.iter().sum::<f64>() / samples as f64;
            e.iter_mut().for_each(|v| *v -= mean);
            for (a, v) in avg.iter_mut().zip(&e) {
                *a += v / n as f64;
            }
        }
        let mse = avg.iter().map(|v| v * v).sum::<f64>() / samples as f64;
        points.push((n, mse));
    }
    let fit = fit_power_law(&points.iter().map(|&(n, m)| (n as f64, m)).collect::<Vec<_>>())?;
    Ok(EnsembleOracleResult {
        correlation,
        samples,
        points,
        fit,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeparabilityReport {
    /// Mean of `(f(g) − f(ĝ))²`.
    pub term_g: f64,
    /// Mean of `(f(ĝ) − f̂(ĝ))²`.
    pub term_f: f64,
    /// `2·mean[(f(g) − f(ĝ))(f(ĝ) − f̂(ĝ))]`.
    pub cross_term: f64,
    pub ratio: f64,
    /// Directly computed mean of `(f(g) − f̂(ĝ))²`.
    pub total: f64,
}

impl SeparabilityReport {
    pub fn separable(&self) -> bool {
        self.ratio < SEPARABLE_RATIO
    }
}

/// Splits the composite error of `f̂∘ĝ` against `f∘g` into an inner term,
/// an outer term and their cross term over the rows of `inputs`.
pub fn separability_decomposition(
    f: &TargetFunction,
    g: &TargetFunction,
    g_hat: &dyn Fn(&[f64]) -> f64,
    f_hat: &dyn Fn(f64) -> f64,
    inputs: ArrayView2<f64>,
) -> Result<SeparabilityReport> {
    check_dim("outer function arity", 1, f.arity)?;
    check_dim("inner function arity", g.arity, inputs.ncols())?;
    if inputs.nrows() == 0 {
        return Err(Error::InsufficientData("no probe inputs".into()));
    }
    let (mut sa, mut sb, mut sab, mut st) = (0.0, 0.0, 0.0, 0.0);
    for row in inputs.rows() {
        let x = row.to_vec();
        let gv = (g.eval)(&x);
        let gh = g_hat(&x);
        let fg = (f.eval)(&[gv]);
        let fgh = (f.eval)(&[gh]);
        let fhat = f_hat(gh);
        if ![gv, gh, fg, fgh, fhat].iter().all(|v| v.is_finite()) {
            return Err(Error::NonFiniteEvaluation {
                context: "separability decomposition",
                input: x,
            });
        }
        let a = fg - fgh;
        let b = fgh - fhat;
        sa += a * a;
        sb += b * b;
        sab += a * b;
        st += (fg - fhat) * (fg - fhat);
    }
    let m = inputs.nrows() as f64;
    let (term_g, term_f, cross_term) = (sa / m, sb / m, 2.0 * sab / m);
    let denom = term_g + term_f;
    Ok(SeparabilityReport {
        term_g,
        term_f,
        cross_term,
        ratio: if denom > 0.0 { cross_term.abs() / denom } else { 0.0 },
        total: st / m,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScalingMode {
    /// Depth grows with width, so `N_p ∝ N_width³`.
    WidthAndDepth,
    /// Depth fixed, so `N_p ∝ N_width²`.
    WidthOnly,
}

impl std::str::FromStr for ScalingMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "width_and_depth" => Ok(Self::WidthAndDepth),
            "width_only" => Ok(Self::WidthOnly),
            other => Err(Error::InvalidValue(format!("unknown scaling mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParameterExponent {
    pub mode: ScalingMode,
    /// `k` in `N_p ∝ N_width^k`.
    pub params_per_width: Ratio<i64>,
    /// Loss exponent in allocated neurons.
    pub neuron_exponent: Ratio<i64>,
    /// Loss exponent in parameter count.
    pub exponent: Ratio<i64>,
    pub derivation: Vec<String>,
}

pub fn parameter_count_exponent(mode: ScalingMode) -> ParameterExponent {
    let k = match mode {
        ScalingMode::WidthAndDepth => Ratio::from_integer(3),
        ScalingMode::WidthOnly => Ratio::from_integer(2),
    };
    let neuron_exponent = Ratio::from_integer(-1);
    let exponent = neuron_exponent / k;
    let derivation = vec![
        "N ∝ N_width".to_string(),
        format!("N_p ∝ N_width^{k}"),
        format!("loss ∝ N^{neuron_exponent}"),
        format!("loss ∝ N_p^({neuron_exponent}/{k}) = N_p^({exponent})"),
    ];
    ParameterExponent {
        mode,
        params_per_width: k,
        neuron_exponent,
        exponent,
        derivation,
    }
}

pub fn ratio_to_f64(r: Ratio<i64>) -> f64 {
    *r.numer() as f64 / *r.denom() as f64
}

/// Absolute gap between predicted and observed exponent magnitudes.
pub fn compare_exponent(predicted: Ratio<i64>, observed: f64) -> f64 {
    (ratio_to_f64(predicted).abs() - observed.abs()).abs()
}
