//! Dense feature maps with hand-written reverse-mode differentiation.
//!
//! A [`FeatureMap`] is a chain of [`DenseLayer`]s, each computing
//! `activation(x Wᵀ + b)` on a batch-major input (rows are examples).
//! [`FeatureMap::forward`] records a [`Tape`]; [`FeatureMap::backward`]
//! consumes it and returns the exact gradients of `⟨upstream, φ(x)⟩` with
//! respect to every weight, bias and input coordinate.

use std::sync::atomic::{AtomicU64, Ordering};

use ndarray::{Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;

/// Negative-side slope of [`Activation::LeakyRelu`].
pub const LEAKY_RELU_SLOPE: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Linear,
    Relu,
    LeakyRelu,
    Tanh,
}

impl Activation {
    #[inline]
    pub fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Linear => v,
            Activation::Relu => {
                if v > 0.0 {
                    v
                } else {
                    0.0
                }
            }
            Activation::LeakyRelu => {
                if v > 0.0 {
                    v
                } else {
                    LEAKY_RELU_SLOPE * v
                }
            }
            Activation::Tanh => v.tanh(),
        }
    }

    /// Derivative given the pre-activation and the activation output.
    /// The relu family uses the left derivative at 0.
    #[inline]
    fn derivative(self, pre: f64, post: f64) -> f64 {
        match self {
            Activation::Linear => 1.0,
            Activation::Relu => {
                if pre > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::LeakyRelu => {
                if pre > 0.0 {
                    1.0
                } else {
                    LEAKY_RELU_SLOPE
                }
            }
            Activation::Tanh => 1.0 - post * post,
        }
    }

    fn is_relu_family(self) -> bool {
        matches!(self, Activation::Relu | Activation::LeakyRelu)
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Linear => "linear",
            Activation::Relu => "relu",
            Activation::LeakyRelu => "leaky_relu",
            Activation::Tanh => "tanh",
        }
    }
}

impl std::str::FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" | "identity" => Ok(Activation::Linear),
            "relu" => Ok(Activation::Relu),
            "leaky_relu" | "leaky-relu" => Ok(Activation::LeakyRelu),
            "tanh" => Ok(Activation::Tanh),
            other => Err(Error::Invalid(format!("unknown activation `{other}`"))),
        }
    }
}

/// One affine layer followed by a pointwise activation.
///
/// `weights` has shape `(out_dim, in_dim)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    weights: Array2<f64>,
    bias: Option<Array1<f64>>,
    activation: Activation,
}

impl DenseLayer {
    pub fn new(
        weights: Array2<f64>,
        bias: Option<Array1<f64>>,
        activation: Activation,
    ) -> Result<Self> {
        if weights.nrows() == 0 || weights.ncols() == 0 {
            return Err(Error::Invalid("layer with a zero dimension".into()));
        }
        if weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::NonFinite("layer weights".into()));
        }
        if let Some(b) = &bias {
            if b.len() != weights.nrows() {
                return Err(Error::dim("layer bias", weights.nrows(), b.len()));
            }
            if b.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("layer bias".into()));
            }
        }
        Ok(Self {
            weights,
            bias,
            activation,
        })
    }

    pub fn in_dim(&self) -> usize {
        self.weights.ncols()
    }

    pub fn out_dim(&self) -> usize {
        self.weights.nrows()
    }

    pub fn weights(&self) -> &Array2<f64> {
        &self.weights
    }

    pub fn bias(&self) -> Option<&Array1<f64>> {
        self.bias.as_ref()
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub(crate) fn params_mut(&mut self) -> (&mut Array2<f64>, Option<&mut Array1<f64>>) {
        (&mut self.weights, self.bias.as_mut())
    }

    pub fn num_params(&self) -> usize {
        self.weights.len() + self.bias.as_ref().map_or(0, |b| b.len())
    }

    /// Returns `(pre_activation, output)`.
    pub fn forward(&self, x: ArrayView2<'_, f64>) -> (Array2<f64>, Array2<f64>) {
        let mut pre = x.dot(&self.weights.t());
        if let Some(b) = &self.bias {
            pre += b;
        }
        let act = self.activation;
        let post = pre.mapv(|v| act.apply(v));
        (pre, post)
    }

    /// Pulls `upstream` (gradient w.r.t. this layer's output) back through
    /// the layer. Parameter gradients are skipped when `want_params` is false.
    pub fn backward(
        &self,
        input: ArrayView2<'_, f64>,
        pre: ArrayView2<'_, f64>,
        post: ArrayView2<'_, f64>,
        upstream: ArrayView2<'_, f64>,
        want_params: bool,
    ) -> (Option<LayerGrads>, Array2<f64>) {
        let act = self.activation;
        let mut delta = upstream.to_owned();
        if act != Activation::Linear {
            ndarray::Zip::from(&mut delta)
                .and(pre)
                .and(post)
                .for_each(|d, &p, &q| *d *= act.derivative(p, q));
        }
        let grads = want_params.then(|| LayerGrads {
            weights: delta.t().dot(&input),
            bias: self.bias.as_ref().map(|_| delta.sum_axis(Axis(0))),
        });
        let input_grad = delta.dot(&self.weights);
        (grads, input_grad)
    }
}

/// Gradient of a scalar with respect to one layer's parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrads {
    pub weights: Array2<f64>,
    pub bias: Option<Array1<f64>>,
}

/// Per-layer parameter gradients, mirroring the shapes of a [`FeatureMap`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<LayerGrads>,
}

impl Gradients {
    pub fn zeros_like(map: &FeatureMap) -> Self {
        Self {
            layers: map
                .layers
                .iter()
                .map(|l| LayerGrads {
                    weights: Array2::zeros(l.weights.raw_dim()),
                    bias: l.bias.as_ref().map(|b| Array1::zeros(b.len())),
                })
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weights += &b.weights;
            if let (Some(x), Some(y)) = (a.bias.as_mut(), b.bias.as_ref()) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for g in &mut self.layers {
            g.weights *= factor;
            if let Some(b) = g.bias.as_mut() {
                *b *= factor;
            }
        }
    }

    /// Flattens in layer order: weights row-major, then bias.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for g in &self.layers {
            out.extend(g.weights.iter());
            if let Some(b) = &g.bias {
                out.extend(b.iter());
            }
        }
        out
    }
}

/// Activations recorded by one forward pass.
#[derive(Debug, Clone)]
pub struct Tape {
    inputs: Vec<Array2<f64>>,
    pre: Vec<Array2<f64>>,
    output: Array2<f64>,
    version: u64,
}

impl Tape {
    /// Number of recorded layers.
    pub fn depth(&self) -> usize {
        self.inputs.len()
    }

    pub fn batch_size(&self) -> usize {
        self.output.nrows()
    }

    pub fn output(&self) -> &Array2<f64> {
        &self.output
    }

    pub fn input(&self) -> &Array2<f64> {
        &self.inputs[0]
    }
}

static NEXT_VERSION: AtomicU64 = AtomicU64::new(1);

fn fresh_version() -> u64 {
    NEXT_VERSION.fetch_add(1, Ordering::Relaxed)
}

/// The parameterized map `φ: ℝ^d → ℝ^k`.
#[derive(Debug, Clone)]
pub struct FeatureMap {
    layers: Vec<DenseLayer>,
    // changes whenever the parameters may have; tapes remember it
    version: u64,
}

impl PartialEq for FeatureMap {
    fn eq(&self, other: &Self) -> bool {
        self.layers == other.layers
    }
}

impl FeatureMap {
    pub fn new(layers: Vec<DenseLayer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Invalid("feature map needs at least one layer".into()));
        }
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[0].out_dim() != pair[1].in_dim() {
                return Err(Error::dim(
                    format!("layer {} input", i + 1),
                    pair[0].out_dim(),
                    pair[1].in_dim(),
                ));
            }
        }
        Ok(Self {
            layers,
            version: fresh_version(),
        })
    }

    /// Random initialization: zero-mean normal weights with standard deviation
    /// `√(2/in_dim)` for the relu family and `√(1/in_dim)` otherwise, zero
    /// biases. Every layer gets `activation`; see
    /// [`FeatureMap::with_output_activation`] to change the last one.
    pub fn init_params(
        dims: &[usize],
        activation: Activation,
        seed: u64,
        with_bias: bool,
    ) -> Result<Self> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(Error::Invalid(format!(
                "layer sizes must have at least two positive entries, got {dims:?}"
            )));
        }
        let mut rng = Rng::new(seed);
        let gain = if activation.is_relu_family() { 2.0 } else { 1.0 };
        let layers = dims
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let std = (gain / fan_in as f64).sqrt();
                let weights = Array2::from_shape_simple_fn((fan_out, fan_in), || std * rng.normal());
                let bias = with_bias.then(|| Array1::zeros(fan_out));
                DenseLayer::new(weights, bias, activation)
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(layers)
    }

    pub fn with_output_activation(mut self, activation: Activation) -> Self {
        self.version = fresh_version();
        if let Some(last) = self.layers.last_mut() {
            last.activation = activation;
        }
        self
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim()
    }

    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }

    pub(crate) fn layers_mut(&mut self) -> &mut [DenseLayer] {
        self.version = fresh_version();
        &mut self.layers
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(DenseLayer::num_params).sum()
    }

    fn check_input(&self, x: &ArrayView2<'_, f64>) -> Result<()> {
        if x.ncols() != self.input_dim() {
            return Err(Error::dim("layer 0 input", self.input_dim(), x.ncols()));
        }
        Ok(())
    }

    /// Evaluates the map without recording a tape.
    pub fn eval(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        self.check_input(&x)?;
        let mut h = x.to_owned();
        for layer in &self.layers {
            h = layer.forward(h.view()).1;
        }
        Ok(h)
    }

    pub fn forward(&self, x: ArrayView2<'_, f64>) -> Result<(Array2<f64>, Tape)> {
        self.check_input(&x)?;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut h = x.to_owned();
        for layer in &self.layers {
            let (p, out) = layer.forward(h.view());
            inputs.push(h);
            pre.push(p);
            h = out;
        }
        let tape = Tape {
            inputs,
            pre,
            output: h.clone(),
            version: self.version,
        };
        Ok((h, tape))
    }

    /// Gradients of `Σ_rows ⟨upstream_row, φ(x_row)⟩`.
    pub fn backward(&self, tape: &Tape, upstream: ArrayView2<'_, f64>) -> Result<(Gradients, Array2<f64>)> {
        let (grads, input_grads) = self.backward_impl(tape, upstream, true)?;
        Ok((grads.expect("parameter gradients requested"), input_grads))
    }

    /// Like [`FeatureMap::backward`] but only the input gradients.
    pub fn backward_input(&self, tape: &Tape, upstream: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        Ok(self.backward_impl(tape, upstream, false)?.1)
    }

    fn backward_impl(
        &self,
        tape: &Tape,
        upstream: ArrayView2<'_, f64>,
        want_params: bool,
    ) -> Result<(Option<Gradients>, Array2<f64>)> {
        if tape.depth() != self.layers.len() || tape.version != self.version {
            return Err(Error::StaleTape(
                "tape was recorded with different parameters or architecture".into(),
            ));
        }
        if upstream.nrows() != tape.batch_size() {
            return Err(Error::dim("upstream rows", tape.batch_size(), upstream.nrows()));
        }
        if upstream.ncols() != self.output_dim() {
            return Err(Error::dim("upstream columns", self.output_dim(), upstream.ncols()));
        }
        let mut layer_grads = Vec::with_capacity(self.layers.len());
        let mut delta = upstream.to_owned();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let post = if i + 1 < self.layers.len() {
                tape.inputs[i + 1].view()
            } else {
                tape.output.view()
            };
            let (g, input_grad) = layer.backward(
                tape.inputs[i].view(),
                tape.pre[i].view(),
                post,
                delta.view(),
                want_params,
            );
            if let Some(g) = g {
                layer_grads.push(g);
            }
            delta = input_grad;
        }
        let grads = want_params.then(|| {
            layer_grads.reverse();
            Gradients {
                layers: layer_grads,
            }
        });
        Ok((grads, delta))
    }

    /// Max relative error between analytic gradients and central differences
    /// for `f(θ, x) = Σ_j φ_j(x)`, over every parameter and input coordinate.
    /// Relative error is `|analytic − numeric| / max(1, |analytic|)`.
    pub fn grad_check(&self, x: &[f64], step: f64) -> Result<f64> {
        if !(step > 0.0) {
            return Err(Error::Invalid(format!("step must be positive, got {step}")));
        }
        if x.len() != self.input_dim() {
            return Err(Error::dim("grad_check input", self.input_dim(), x.len()));
        }
        let row = Array2::from_shape_vec((1, x.len()), x.to_vec()).expect("row shape");
        let (_, tape) = self.forward(row.view())?;
        let ones = Array2::ones((1, self.output_dim()));
        let (grads, input_grads) = self.backward(&tape, ones.view())?;

        let objective = |map: &FeatureMap, input: &Array2<f64>| -> Result<f64> {
            let v = map.eval(input.view())?.sum();
            if v.is_finite() {
                Ok(v)
            } else {
                Err(Error::NonFinite("grad_check objective".into()))
            }
        };
        let rel = |analytic: f64, numeric: f64| (analytic - numeric).abs() / analytic.abs().max(1.0);

        let mut worst: f64 = 0.0;
        let mut probe = self.clone();
        probe.version = fresh_version();
        for (li, g) in grads.layers.iter().enumerate() {
            let (rows, cols) = g.weights.dim();
            for r in 0..rows {
                for c in 0..cols {
                    let orig = self.layers[li].weights[[r, c]];
                    probe.layers[li].weights[[r, c]] = orig + step;
                    let up = objective(&probe, &row)?;
                    probe.layers[li].weights[[r, c]] = orig - step;
                    let down = objective(&probe, &row)?;
                    probe.layers[li].weights[[r, c]] = orig;
                    worst = worst.max(rel(g.weights[[r, c]], (up - down) / (2.0 * step)));
                }
            }
            if let Some(gb) = &g.bias {
                for r in 0..gb.len() {
                    let orig = self.layers[li].bias.as_ref().expect("bias")[r];
                    probe.layers[li].bias.as_mut().expect("bias")[r] = orig + step;
                    let up = objective(&probe, &row)?;
                    probe.layers[li].bias.as_mut().expect("bias")[r] = orig - step;
                    let down = objective(&probe, &row)?;
                    probe.layers[li].bias.as_mut().expect("bias")[r] = orig;
                    worst = worst.max(rel(gb[r], (up - down) / (2.0 * step)));
                }
            }
        }
        let mut shifted = row.clone();
        for c in 0..x.len() {
            shifted[[0, c]] = x[c] + step;
            let up = objective(self, &shifted)?;
            shifted[[0, c]] = x[c] - step;
            let down = objective(self, &shifted)?;
            shifted[[0, c]] = x[c];
            worst = worst.max(rel(input_grads[[0, c]], (up - down) / (2.0 * step)));
        }
        if !worst.is_finite() {
            return Err(Error::NonFinite("grad_check".into()));
        }
        Ok(worst)
    }
}

/// A differentiable map that a Morse model can be built on.
///
/// Implemented by the trainable [`FeatureMap`] and by fixed maps such as
/// [`NormMap`].
pub trait FeatureFn {
    fn input_dim(&self) -> usize;
    fn output_dim(&self) -> usize;
    fn eval_batch(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>>;
    /// Row-wise vector-Jacobian product `upstream_rowᵀ ∂φ/∂x` at each row of `x`.
    fn input_vjp(&self, x: ArrayView2<'_, f64>, upstream: ArrayView2<'_, f64>) -> Result<Array2<f64>>;

    /// Jacobian `∂φ/∂x` at a single point, shape `(output_dim, input_dim)`.
    fn jacobian(&self, x: &[f64]) -> Result<Array2<f64>> {
        let k = self.output_dim();
        let rows = Array2::from_shape_fn((k, x.len()), |(_, c)| x[c]);
        let upstream = Array2::eye(k);
        self.input_vjp(rows.view(), upstream.view())
    }

    /// `φ(x)` at one point and the pullback of `upstream(φ(x))` to `x`.
    fn value_and_vjp(
        &self,
        x: &[f64],
        upstream: &dyn Fn(&[f64]) -> Result<Vec<f64>>,
    ) -> Result<(Vec<f64>, Vec<f64>)> {
        let row = ArrayView2::from_shape((1, x.len()), x).map_err(|_| Error::dim("point", self.input_dim(), x.len()))?;
        let z = self.eval_batch(row)?.into_raw_vec_and_offset().0;
        let g = upstream(&z)?;
        let g = ArrayView2::from_shape((1, g.len()), &g).map_err(|_| Error::dim("upstream", self.output_dim(), g.len()))?;
        let gx = self.input_vjp(row, g)?.into_raw_vec_and_offset().0;
        Ok((z, gx))
    }
}

impl FeatureFn for FeatureMap {
    fn input_dim(&self) -> usize {
        FeatureMap::input_dim(self)
    }

    fn output_dim(&self) -> usize {
        FeatureMap::output_dim(self)
    }

    fn eval_batch(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        self.eval(x)
    }

    fn input_vjp(&self, x: ArrayView2<'_, f64>, upstream: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        let (_, tape) = self.forward(x)?;
        self.backward_input(&tape, upstream)
    }

    fn value_and_vjp(
        &self,
        x: &[f64],
        upstream: &dyn Fn(&[f64]) -> Result<Vec<f64>>,
    ) -> Result<(Vec<f64>, Vec<f64>)> {
        let row = ArrayView2::from_shape((1, x.len()), x).map_err(|_| Error::dim("point", self.input_dim(), x.len()))?;
        let (out, tape) = self.forward(row)?;
        let z = out.into_raw_vec_and_offset().0;
        let g = upstream(&z)?;
        let g = ArrayView2::from_shape((1, g.len()), &g).map_err(|_| Error::dim("upstream", self.output_dim(), g.len()))?;
        let gx = self.backward_input(&tape, g)?.into_raw_vec_and_offset().0;
        Ok((z, gx))
    }
}

/// `φ(x) = ‖x‖`, whose level set `φ = r` is the sphere of radius `r`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NormMap {
    pub dim: usize,
}

impl FeatureFn for NormMap {
    fn input_dim(&self) -> usize {
        self.dim
    }

    fn output_dim(&self) -> usize {
        1
    }

    fn eval_batch(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        if x.ncols() != self.dim {
            return Err(Error::dim("norm map input", self.dim, x.ncols()));
        }
        let norms = x.map_axis(Axis(1), |r| r.dot(&r).sqrt());
        Ok(norms.insert_axis(Axis(1)))
    }

    fn input_vjp(&self, x: ArrayView2<'_, f64>, upstream: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        if x.ncols() != self.dim {
            return Err(Error::dim("norm map input", self.dim, x.ncols()));
        }
        let mut out = x.to_owned();
        for (mut row, u) in out.rows_mut().into_iter().zip(upstream.column(0)) {
            let norm = row.dot(&row).sqrt();
            // zero is a valid subgradient at the origin
            let scale = if norm > 0.0 { u / norm } else { 0.0 };
            row *= scale;
        }
        Ok(out)
    }
}
