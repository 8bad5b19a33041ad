//! Dense SiLU networks: parameters, forward evaluation, activation traces and
//! reverse-mode gradients.
//!
//! Every network is a stack of affine layers. Hidden layers apply SiLU, the
//! output layer is purely affine. Batches are sample-major: row `m` of an input
//! matrix is sample `m`, and each layer's weight matrix has shape
//! `(fan_in, fan_out)` so that a layer computes `Z = X·W + b`.

use ndarray::{Array1, Array2, ArrayView2, Zip};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};

/// Logistic sigmoid. For very negative `x` the exponential overflows to
/// infinity and the result is an exact 0, never NaN.
#[inline]
pub fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[inline]
pub fn silu(x: f64) -> f64 {
    x * logistic(x)
}

/// d/dx silu(x) = s + x·s·(1 − s) with s = logistic(x).
#[inline]
pub fn silu_derivative(x: f64) -> f64 {
    let s = logistic(x);
    s + x * s * (1.0 - s)
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct NetworkShape {
    pub input_dim: usize,
    pub hidden_widths: Vec<usize>,
    pub output_dim: usize,
}

impl NetworkShape {
    pub fn new(input_dim: usize, hidden_widths: Vec<usize>, output_dim: usize) -> Result<Self> {
        let shape = Self {
            input_dim,
            hidden_widths,
            output_dim,
        };
        shape.validate()?;
        Ok(shape)
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden_widths.is_empty() {
            return Err(Error::InvalidShape("at least one hidden layer is required".into()));
        }
        if self.input_dim == 0 || self.output_dim == 0 || self.hidden_widths.contains(&0) {
            return Err(Error::InvalidShape(format!("all dimensions must be >= 1: {self:?}")));
        }
        Ok(())
    }

    /// `(fan_in, fan_out)` of every affine layer, output layer last.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden_widths.len() + 1);
        let mut fan_in = self.input_dim;
        for &w in &self.hidden_widths {
            dims.push((fan_in, w));
            fan_in = w;
        }
        dims.push((fan_in, self.output_dim));
        dims
    }

    pub fn hidden_layers(&self) -> usize {
        self.hidden_widths.len()
    }

    /// Network width (widest hidden layer).
    pub fn width(&self) -> usize {
        self.hidden_widths.iter().copied().max().unwrap_or(0)
    }

    /// Number of hidden layers.
    pub fn depth(&self) -> usize {
        self.hidden_widths.len()
    }
}

/// Exact number of weights plus biases, `Σ (fan_in·fan_out + fan_out)`.
pub fn count_parameters(shape: &NetworkShape) -> usize {
    shape
        .layer_dims()
        .iter()
        .map(|&(fan_in, fan_out)| fan_in * fan_out + fan_out)
        .sum()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    /// `(fan_in, fan_out)`.
    pub weights: Array2<f64>,
    pub biases: Array1<f64>,
}

impl Layer {
    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self {
            weights: Array2::zeros((fan_in, fan_out)),
            biases: Array1::zeros(fan_out),
        }
    }

    pub fn fan_in(&self) -> usize {
        self.weights.nrows()
    }

    pub fn fan_out(&self) -> usize {
        self.weights.ncols()
    }

    /// Incoming weights of neuron `j`.
    pub fn incoming(&self, j: usize) -> Vec<f64> {
        self.weights.column(j).to_vec()
    }
}

/// All weights and biases of one network.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkParams {
    shape: NetworkShape,
    layers: Vec<Layer>,
}

impl NetworkParams {
    pub fn zeros(shape: &NetworkShape) -> Result<Self> {
        shape.validate()?;
        let layers = shape
            .layer_dims()
            .into_iter()
            .map(|(i, o)| Layer::zeros(i, o))
            .collect();
        Ok(Self {
            shape: shape.clone(),
            layers,
        })
    }

    /// Per-layer uniform init in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]` for both
    /// weights and biases. Draw order: layer by layer, weights row-major, then
    /// biases.
    pub fn init_uniform<R: Rng + ?Sized>(shape: &NetworkShape, rng: &mut R) -> Result<Self> {
        let mut params = Self::zeros(shape)?;
        for layer in &mut params.layers {
            let bound = 1.0 / (layer.fan_in() as f64).sqrt();
            for w in layer.weights.iter_mut() {
                *w = rng.random_range(-bound..=bound);
            }
            for b in layer.biases.iter_mut() {
                *b = rng.random_range(-bound..=bound);
            }
        }
        Ok(params)
    }

    pub fn from_layers(shape: NetworkShape, layers: Vec<Layer>) -> Result<Self> {
        shape.validate()?;
        let dims = shape.layer_dims();
        check_dim("layer count", dims.len(), layers.len())?;
        for (layer, &(fan_in, fan_out)) in layers.iter().zip(&dims) {
            check_dim("layer fan_in", fan_in, layer.fan_in())?;
            check_dim("layer fan_out", fan_out, layer.fan_out())?;
            check_dim("bias length", fan_out, layer.biases.len())?;
        }
        let params = Self { shape, layers };
        if !params.all_finite() {
            return Err(Error::InvalidValue("parameters must be finite".into()));
        }
        Ok(params)
    }

    pub fn shape(&self) -> &NetworkShape {
        &self.shape
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn output_layer(&self) -> &Layer {
        self.layers.last().expect("validated shape has an output layer")
    }

    pub fn all_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.iter().all(|v| v.is_finite()) && l.biases.iter().all(|v| v.is_finite()))
    }

    /// Σ|w| over weights only (biases excluded).
    pub fn weight_l1(&self) -> f64 {
        self.layers
            .iter()
            .map(|l| l.weights.iter().map(|w| w.abs()).sum::<f64>())
            .sum()
    }

    /// Σw² over weights only (biases excluded).
    pub fn weight_l2_sq(&self) -> f64 {
        self.layers
            .iter()
            .map(|l| l.weights.iter().map(|w| w * w).sum::<f64>())
            .sum()
    }

    pub fn parameter_count(&self) -> usize {
        count_parameters(&self.shape)
    }

    /// Flattened copy of every parameter, in the same order as
    /// [`NetworkParams::init_uniform`] draws them.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.parameter_count());
        for l in &self.layers {
            out.extend(l.weights.iter());
            out.extend(l.biases.iter());
        }
        out
    }

    pub fn from_flat(shape: &NetworkShape, flat: &[f64]) -> Result<Self> {
        let mut params = Self::zeros(shape)?;
        check_dim("flat parameter vector", params.parameter_count(), flat.len())?;
        let mut it = flat.iter().copied();
        for l in &mut params.layers {
            for w in l.weights.iter_mut() {
                *w = it.next().unwrap();
            }
            for b in l.biases.iter_mut() {
                *b = it.next().unwrap();
            }
        }
        Ok(params)
    }

    fn check_input(&self, inputs: &ArrayView2<f64>) -> Result<()> {
        check_dim("input columns", self.shape.input_dim, inputs.ncols())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&WeightDump::from(self))?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let dump: WeightDump = serde_json::from_str(text)?;
        dump.into_params()
    }
}

/// Hidden-layer post-activations for one batch: `layers[l]` has one row per
/// sample and one column per neuron of hidden layer `l`.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationTrace {
    pub layers: Vec<Array2<f64>>,
}

/// Intermediate values kept for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// Post-activations of each hidden layer.
    pub activations: Vec<Array2<f64>>,
    /// SiLU derivative at each hidden pre-activation.
    derivatives: Vec<Array2<f64>>,
    pub outputs: Array2<f64>,
}

/// Dense kernels over row-major slices. Hidden widths here are small or have
/// a tiny contraction dimension, where straight loops beat a general GEMM.
mod kernels {
    /// Output widths below this use the transposed (dot-product) layout.
    const NARROW: usize = 8;

    #[inline]
    pub fn dot(a: &[f64], b: &[f64]) -> f64 {
        let mut acc = [0.0f64; 4];
        let ca = a.chunks_exact(4);
        let cb = b.chunks_exact(4);
        let (ra, rb) = (ca.remainder(), cb.remainder());
        for (x, y) in ca.zip(cb) {
            acc[0] += x[0] * y[0];
            acc[1] += x[1] * y[1];
            acc[2] += x[2] * y[2];
            acc[3] += x[3] * y[3];
        }
        let mut tail = 0.0;
        for (x, y) in ra.iter().zip(rb) {
            tail += x * y;
        }
        (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
    }

    #[inline]
    pub fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
        for (yi, xi) in y.iter_mut().zip(x) {
            *yi += a * xi;
        }
    }

    /// `(k, o)` row-major to `(o, k)` row-major.
    pub fn transpose(w: &[f64], k: usize, o: usize) -> Vec<f64> {
        let mut t = vec![0.0; k * o];
        for i in 0..k {
            for j in 0..o {
                t[j * k + i] = w[i * o + j];
            }
        }
        t
    }

    /// `out (m, o) = x (m, k) · w (k, o) + b`.
    pub fn affine(x: &[f64], m: usize, k: usize, w: &[f64], b: &[f64], out: &mut [f64]) {
        let o = b.len();
        if o >= NARROW {
            for r in 0..m {
                let row = &mut out[r * o..(r + 1) * o];
                row.copy_from_slice(b);
                for (kk, &a) in x[r * k..(r + 1) * k].iter().enumerate() {
                    axpy(row, a, &w[kk * o..(kk + 1) * o]);
                }
            }
        } else {
            let wt = transpose(w, k, o);
            for r in 0..m {
                let xr = &x[r * k..(r + 1) * k];
                for j in 0..o {
                    out[r * o + j] = b[j] + dot(xr, &wt[j * k..(j + 1) * k]);
                }
            }
        }
    }

    /// `dw (k, o) = xᵀ · delta`, `db = Σ_rows delta`.
    pub fn weight_grads(x: &[f64], m: usize, k: usize, delta: &[f64], o: usize, dw: &mut [f64], db: &mut [f64]) {
        for r in 0..m {
            axpy(db, 1.0, &delta[r * o..(r + 1) * o]);
        }
        if o >= NARROW {
            for r in 0..m {
                let dr = &delta[r * o..(r + 1) * o];
                for (kk, &a) in x[r * k..(r + 1) * k].iter().enumerate() {
                    axpy(&mut dw[kk * o..(kk + 1) * o], a, dr);
                }
            }
        } else {
            let mut dwt = vec![0.0; o * k];
            for r in 0..m {
                let xr = &x[r * k..(r + 1) * k];
                for j in 0..o {
                    axpy(&mut dwt[j * k..(j + 1) * k], delta[r * o + j], xr);
                }
            }
            for kk in 0..k {
                for j in 0..o {
                    dw[kk * o + j] = dwt[j * k + kk];
                }
            }
        }
    }

    /// `dx (m, k) = delta (m, o) · wᵀ`.
    pub fn input_grads(delta: &[f64], m: usize, o: usize, w: &[f64], k: usize, dx: &mut [f64]) {
        if o >= NARROW {
            for r in 0..m {
                let dr = &delta[r * o..(r + 1) * o];
                for kk in 0..k {
                    dx[r * k + kk] = dot(dr, &w[kk * o..(kk + 1) * o]);
                }
            }
        } else {
            let wt = transpose(w, k, o);
            for r in 0..m {
                let row = &mut dx[r * k..(r + 1) * k];
                for j in 0..o {
                    axpy(row, delta[r * o + j], &wt[j * k..(j + 1) * k]);
                }
            }
        }
    }
}

fn std_slice(a: &Array2<f64>) -> std::borrow::Cow<'_, [f64]> {
    match a.as_slice() {
        Some(s) => std::borrow::Cow::Borrowed(s),
        None => std::borrow::Cow::Owned(a.iter().copied().collect()),
    }
}

fn affine(input: ArrayView2<f64>, layer: &Layer) -> Array2<f64> {
    let (m, k) = input.dim();
    let o = layer.fan_out();
    let x: std::borrow::Cow<'_, [f64]> = match input.as_slice() {
        Some(s) => std::borrow::Cow::Borrowed(s),
        None => std::borrow::Cow::Owned(input.iter().copied().collect()),
    };
    let w = std_slice(&layer.weights);
    let b = layer.biases.to_vec();
    let mut out = Array2::zeros((m, o));
    kernels::affine(&x, m, k, &w, &b, out.as_slice_mut().expect("fresh array is contiguous"));
    out
}

fn activate(z: &mut Array2<f64>) {
    z.mapv_inplace(silu);
}

/// Applies SiLU to `z` in place and returns the derivative at each entry.
fn activate_with_derivative(z: &mut Array2<f64>) -> Array2<f64> {
    let mut d = Array2::zeros(z.raw_dim());
    Zip::from(z).and(&mut d).for_each(|z, d| {
        let s = logistic(*z);
        let a = *z * s;
        *d = s + a * (1.0 - s);
        *z = a;
    });
    d
}

fn run_hidden(params: &NetworkParams, inputs: ArrayView2<f64>, keep: bool) -> (Array2<f64>, Vec<Array2<f64>>) {
    let hidden = &params.layers[..params.layers.len() - 1];
    let mut kept = Vec::new();
    let mut current: Option<Array2<f64>> = None;
    for layer in hidden {
        let mut z = match &current {
            Some(a) => affine(a.view(), layer),
            None => affine(inputs, layer),
        };
        activate(&mut z);
        if keep {
            kept.push(z.clone());
        }
        current = Some(z);
    }
    let last = current.expect("at least one hidden layer");
    let out = affine(last.view(), params.output_layer());
    (out, kept)
}

/// Network outputs for a sample-major batch.
pub fn forward(params: &NetworkParams, inputs: ArrayView2<f64>) -> Result<Array2<f64>> {
    params.check_input(&inputs)?;
    Ok(run_hidden(params, inputs, false).0)
}

/// Outputs plus every hidden post-activation. Outputs are computed by the
/// same arithmetic as [`forward`] and are bit-identical to it.
pub fn forward_with_trace(params: &NetworkParams, inputs: ArrayView2<f64>) -> Result<(Array2<f64>, ActivationTrace)> {
    params.check_input(&inputs)?;
    let (out, layers) = run_hidden(params, inputs, true);
    Ok((out, ActivationTrace { layers }))
}

pub fn forward_cached(params: &NetworkParams, inputs: ArrayView2<f64>) -> Result<ForwardCache> {
    params.check_input(&inputs)?;
    let hidden = &params.layers[..params.layers.len() - 1];
    let mut activations: Vec<Array2<f64>> = Vec::with_capacity(hidden.len());
    let mut derivatives = Vec::with_capacity(hidden.len());
    for layer in hidden {
        let mut z = match activations.last() {
            Some(a) => affine(a.view(), layer),
            None => affine(inputs, layer),
        };
        derivatives.push(activate_with_derivative(&mut z));
        activations.push(z);
    }
    let outputs = affine(activations.last().unwrap().view(), params.output_layer());
    Ok(ForwardCache {
        activations,
        derivatives,
        outputs,
    })
}

/// Reverse pass from `∂objective/∂outputs`. The returned value has the same
/// layout as `params` and holds the gradient of every weight and bias.
pub fn backward(
    params: &NetworkParams,
    inputs: ArrayView2<f64>,
    cache: &ForwardCache,
    output_grad: ArrayView2<f64>,
) -> Result<NetworkParams> {
    check_dim("output gradient rows", cache.outputs.nrows(), output_grad.nrows())?;
    check_dim("output gradient columns", params.shape.output_dim, output_grad.ncols())?;
    let n_layers = params.layers.len();
    let m = output_grad.nrows();
    let mut grads: Vec<Layer> = Vec::with_capacity(n_layers);
    let mut delta = output_grad.as_standard_layout().into_owned();
    for idx in (0..n_layers).rev() {
        let layer = &params.layers[idx];
        let (k, o) = (layer.fan_in(), layer.fan_out());
        let layer_input = if idx == 0 {
            inputs
        } else {
            cache.activations[idx - 1].view()
        };
        let x = layer_input.as_standard_layout();
        let d = delta.as_slice().expect("standard layout");
        let mut g = Layer::zeros(k, o);
        kernels::weight_grads(
            x.as_slice().expect("standard layout"),
            m,
            k,
            d,
            o,
            g.weights.as_slice_mut().expect("fresh array is contiguous"),
            g.biases.as_slice_mut().expect("fresh array is contiguous"),
        );
        if idx > 0 {
            let mut upstream = Array2::zeros((m, k));
            kernels::input_grads(d, m, o, &std_slice(&layer.weights), k, upstream.as_slice_mut().unwrap());
            upstream *= &cache.derivatives[idx - 1];
            delta = upstream;
        }
        grads.push(g);
    }
    grads.reverse();
    Ok(NetworkParams {
        shape: params.shape.clone(),
        layers: grads,
    })
}

/// Exact gradients of an objective with respect to every parameter, given
/// the objective's gradient with respect to the network outputs.
pub fn gradients(
    params: &NetworkParams,
    inputs: ArrayView2<f64>,
    output_grad: ArrayView2<f64>,
) -> Result<NetworkParams> {
    let cache = forward_cached(params, inputs)?;
    backward(params, inputs, &cache, output_grad)
}

pub const WEIGHT_DUMP_VERSION: u32 = 1;

/// Serialized form of [`NetworkParams`]. Weight matrices are stored
/// row-major with `fan_in` rows and `fan_out` columns.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeightDump {
    pub version: u32,
    pub shape: NetworkShape,
    pub layers: Vec<LayerDump>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerDump {
    pub fan_in: usize,
    pub fan_out: usize,
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
}

impl From<&NetworkParams> for WeightDump {
    fn from(params: &NetworkParams) -> Self {
        let layers = params
            .layers
            .iter()
            .map(|l| LayerDump {
                fan_in: l.fan_in(),
                fan_out: l.fan_out(),
                weights: l.weights.iter().copied().collect(),
                biases: l.biases.to_vec(),
            })
            .collect();
        Self {
            version: WEIGHT_DUMP_VERSION,
            shape: params.shape.clone(),
            layers,
        }
    }
}

impl WeightDump {
    pub fn into_params(self) -> Result<NetworkParams> {
        if self.version != WEIGHT_DUMP_VERSION {
            return Err(Error::InvalidValue(format!(
                "unsupported weight dump version {}",
                self.version
            )));
        }
        let layers = self
            .layers
            .into_iter()
            .map(|l| {
                check_dim("dumped weight count", l.fan_in * l.fan_out, l.weights.len())?;
                let weights = Array2::from_shape_vec((l.fan_in, l.fan_out), l.weights)
                    .map_err(|e| Error::InvalidValue(e.to_string()))?;
                Ok(Layer {
                    weights,
                    biases: Array1::from(l.biases),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        NetworkParams::from_layers(self.shape, layers)
    }
}
