//! Target-function registry, input samplers and task losses.
//!
//! A task owns one or more target functions. Each target reads its own
//! contiguous block of input coordinates and produces one output column, so a
//! parallel task over two scalar targets has a 2-D input and a 2-D output.

use std::f64::consts::PI;
use std::fmt;

use ndarray::{Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{check_dim, Error, Result};

#[derive(Clone, Copy)]
pub struct TargetFunction {
    pub id: &'static str,
    pub arity: usize,
    pub eval: fn(&[f64]) -> f64,
}

impl TargetFunction {
    pub fn eval(&self, x: &[f64]) -> f64 {
        (self.eval)(x)
    }
}

impl fmt::Debug for TargetFunction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "TargetFunction({}/{})", self.id, self.arity)
    }
}

impl PartialEq for TargetFunction {
    fn eq(&self, other: &Self) -> bool {
        self.id == other.id
    }
}

impl Serialize for TargetFunction {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.id)
    }
}

impl<'de> Deserialize<'de> for TargetFunction {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let id = String::deserialize(d)?;
        lookup(&id).map_err(serde::de::Error::custom)
    }
}

/// (x₁−x₂)² + (x₃−x₄)²
pub fn squared_differences(x: &[f64]) -> f64 {
    let a = x[0] - x[1];
    let b = x[2] - x[3];
    a * a + b * b
}

fn composite_distance(x: &[f64]) -> f64 {
    squared_differences(x).sqrt()
}

// The sweep set beyond `square` is our own choice of smooth and non-smooth
// scalar targets.
static REGISTRY: &[TargetFunction] = &[
    TargetFunction {
        id: "square",
        arity: 1,
        eval: |x| x[0] * x[0],
    },
    TargetFunction {
        id: "cube",
        arity: 1,
        eval: |x| x[0] * x[0] * x[0],
    },
    TargetFunction {
        id: "abs",
        arity: 1,
        eval: |x| x[0].abs(),
    },
    TargetFunction {
        id: "sin_pi",
        arity: 1,
        eval: |x| (PI * x[0]).sin(),
    },
    TargetFunction {
        id: "sin2_pi",
        arity: 1,
        eval: |x| {
            let s = (PI * x[0]).sin();
            s * s
        },
    },
    TargetFunction {
        id: "expm1",
        arity: 1,
        eval: |x| x[0].exp_m1(),
    },
    TargetFunction {
        id: "tanh2",
        arity: 1,
        eval: |x| (2.0 * x[0]).tanh(),
    },
    TargetFunction {
        id: "sqrt",
        arity: 1,
        eval: |x| x[0].sqrt(),
    },
    TargetFunction {
        id: "sq_diff",
        arity: 4,
        eval: squared_differences,
    },
    TargetFunction {
        id: "sqrt_sq_diff",
        arity: 4,
        eval: composite_distance,
    },
];

/// Targets swept when checking the single-task exponent across functions.
pub const SWEEP_FUNCTIONS: &[&str] = &["square", "cube", "abs", "sin_pi", "sin2_pi", "expm1", "tanh2"];

pub fn registry() -> &'static [TargetFunction] {
    REGISTRY
}

pub fn lookup(id: &str) -> Result<TargetFunction> {
    REGISTRY
        .iter()
        .find(|f| f.id == id)
        .copied()
        .ok_or_else(|| Error::UnknownFunction(id.to_string()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Single,
    Parallel,
    Series,
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TaskKind::Single => "single",
            TaskKind::Parallel => "parallel",
            TaskKind::Series => "series",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub targets: Vec<TargetFunction>,
    pub input_low: Vec<f64>,
    pub input_high: Vec<f64>,
    pub beta: Option<f64>,
}

pub const DEFAULT_LOW: f64 = -1.0;
pub const DEFAULT_HIGH: f64 = 1.0;

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        let dim = self.input_dim();
        check_dim("input_low length", dim, self.input_low.len())?;
        check_dim("input_high length", dim, self.input_high.len())?;
        for (lo, hi) in self.input_low.iter().zip(&self.input_high) {
            if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                return Err(Error::InvalidConfig(format!("bad input bounds [{lo}, {hi}]")));
            }
        }
        match self.kind {
            TaskKind::Single | TaskKind::Series => {
                check_dim("target count", 1, self.targets.len())?;
                if self.beta.is_some() {
                    return Err(Error::InvalidConfig(format!("beta given for a {} task", self.kind)));
                }
            }
            TaskKind::Parallel => {
                check_dim("target count", 2, self.targets.len())?;
                match self.beta {
                    Some(b) if (0.0..=1.0).contains(&b) => {}
                    Some(b) => return Err(Error::InvalidConfig(format!("beta {b} outside [0, 1]"))),
                    None => return Err(Error::InvalidConfig("parallel task requires beta".into())),
                }
            }
        }
        if self.kind == TaskKind::Single && self.targets[0].arity != 1 {
            return Err(Error::InvalidConfig("single tasks take a scalar target".into()));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.targets.iter().map(|t| t.arity).sum()
    }

    pub fn output_dim(&self) -> usize {
        self.targets.len()
    }

    /// Loss weight of each output column: `[1]`, or `[β, 1−β]` for parallel
    /// tasks.
    pub fn output_weights(&self) -> Vec<f64> {
        match (self.kind, self.beta) {
            (TaskKind::Parallel, Some(b)) => vec![b, 1.0 - b],
            _ => vec![1.0; self.targets.len()],
        }
    }

    pub fn with_range(mut self, low: f64, high: f64) -> Result<Self> {
        let dim = self.input_dim();
        self.input_low = vec![low; dim];
        self.input_high = vec![high; dim];
        self.validate()?;
        Ok(self)
    }

    /// Exact target values for a sample-major input matrix.
    pub fn evaluate(&self, inputs: ArrayView2<f64>) -> Result<Array2<f64>> {
        check_dim("task input columns", self.input_dim(), inputs.ncols())?;
        let mut out = Array2::zeros((inputs.nrows(), self.output_dim()));
        for (m, row) in inputs.axis_iter(Axis(0)).enumerate() {
            let mut offset = 0;
            for (k, t) in self.targets.iter().enumerate() {
                let x: Vec<f64> = row.iter().skip(offset).take(t.arity).copied().collect();
                out[[m, k]] = t.eval(&x);
                offset += t.arity;
            }
        }
        Ok(out)
    }
}

fn task(kind: TaskKind, targets: Vec<TargetFunction>, beta: Option<f64>) -> Result<TaskSpec> {
    let dim: usize = targets.iter().map(|t| t.arity).sum();
    let spec = TaskSpec {
        kind,
        targets,
        input_low: vec![DEFAULT_LOW; dim],
        input_high: vec![DEFAULT_HIGH; dim],
        beta,
    };
    spec.validate()?;
    Ok(spec)
}

pub fn make_single_task(fn_id: &str) -> Result<TaskSpec> {
    task(TaskKind::Single, vec![lookup(fn_id)?], None)
}

pub fn make_parallel_task(first: &str, second: &str, beta: f64) -> Result<TaskSpec> {
    task(TaskKind::Parallel, vec![lookup(first)?, lookup(second)?], Some(beta))
}

/// `F(x) = sqrt((x₁−x₂)² + (x₃−x₄)²)` on `U[-1,1]⁴`.
pub fn make_series_task() -> Result<TaskSpec> {
    task(TaskKind::Series, vec![lookup("sqrt_sq_diff")?], None)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub inputs: Array2<f64>,
    pub targets: Array2<f64>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.inputs.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Uniform inputs in `[low, high)` per coordinate.
pub fn sample_inputs<R: Rng + ?Sized>(task: &TaskSpec, n: usize, rng: &mut R) -> Array2<f64> {
    let dim = task.input_dim();
    let mut inputs = Array2::zeros((n, dim));
    for mut row in inputs.axis_iter_mut(Axis(0)) {
        for (d, x) in row.iter_mut().enumerate() {
            let (lo, hi) = (task.input_low[d], task.input_high[d]);
            let u: f64 = rng.random();
            *x = (lo + (hi - lo) * u).min(hi);
        }
    }
    inputs
}

pub fn sample_batch<R: Rng + ?Sized>(task: &TaskSpec, n: usize, rng: &mut R) -> Result<Batch> {
    if n == 0 {
        return Err(Error::InvalidValue("batch size must be >= 1".into()));
    }
    let inputs = sample_inputs(task, n, rng);
    let targets = task.evaluate(inputs.view())?;
    Ok(Batch { inputs, targets })
}

/// Mean squared error of each output column.
pub fn per_output_mse(predictions: ArrayView2<f64>, targets: ArrayView2<f64>) -> Result<Vec<f64>> {
    check_dim("prediction rows", targets.nrows(), predictions.nrows())?;
    check_dim("prediction columns", targets.ncols(), predictions.ncols())?;
    let m = predictions.nrows() as f64;
    Ok((0..targets.ncols())
        .map(|k| {
            predictions
                .column(k)
                .iter()
                .zip(targets.column(k))
                .map(|(p, t)| (p - t) * (p - t))
                .sum::<f64>()
                / m
        })
        .collect())
}

/// Plain MSE for single/series tasks, `β·MSE₁ + (1−β)·MSE₂` for parallel ones.
pub fn task_loss(task: &TaskSpec, predictions: ArrayView2<f64>, batch: &Batch) -> Result<f64> {
    check_dim("prediction columns", task.output_dim(), predictions.ncols())?;
    let mse = per_output_mse(predictions, batch.targets.view())?;
    Ok(task.output_weights().iter().zip(&mse).map(|(w, e)| w * e).sum())
}

/// `∂ task_loss / ∂ predictions`.
pub fn task_loss_gradient(task: &TaskSpec, predictions: ArrayView2<f64>, batch: &Batch) -> Result<Array2<f64>> {
    check_dim("prediction columns", task.output_dim(), predictions.ncols())?;
    check_dim("prediction rows", batch.len(), predictions.nrows())?;
    let weights = task.output_weights();
    let scale = 2.0 / predictions.nrows() as f64;
    let mut grad = &predictions - &batch.targets;
    for (k, mut col) in grad.axis_iter_mut(Axis(1)).enumerate() {
        col *= scale * weights[k];
    }
    Ok(grad)
}

/// g(x) = (x₁−x₂)² + (x₃−x₄)², row by row.
pub fn intermediate_target_g(inputs: ArrayView2<f64>) -> Result<Vec<f64>> {
    check_dim("g input columns", 4, inputs.ncols())?;
    Ok(inputs
        .axis_iter(Axis(0))
        .map(|row| squared_differences(row.as_slice().unwrap_or(&row.to_vec())))
        .collect())
}
