//! Fitting Morse networks.
//!
//! The unsupervised loss is
//!
//! ```text
//! L(θ) = (1/n) Σ_{x ∈ batch} −log K(φ(x), a) + w · (1/m) Σ_{x' ∈ negatives} K(φ(x'), a)
//! ```
//!
//! with negatives drawn uniformly from a box. The supervised loss replaces
//! `a` by `scale · onehot(y)` and draws negative labels uniformly. Both are
//! minimized with Adam.

use std::io::Write;
use std::path::Path;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{Activation, FeatureMap, Gradients};
use crate::data::{Dataset, SampleBox};
use crate::error::{Error, Result};
use crate::kernels::KernelSpec;
use crate::model::{Metadata, ModelEnsemble, MorseModel, Target};
use crate::rng::{splitmix64, Rng};

/// Loss above which training is considered diverged.
pub const DIVERGENCE_LIMIT: f64 = 1e6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamParams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// How long to train: full passes over the data, or a fixed number of
/// optimizer steps (passes repeat as needed).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    Epochs(usize),
    Steps(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub schedule: Schedule,
    pub seed: u64,
    /// Box for uniform negatives; `[-5, 5]^d` when absent.
    pub reg_box: Option<SampleBox>,
    /// Negatives per batch; the batch size when absent.
    pub reg_count: Option<usize>,
    pub reg_weight: f64,
    pub adam: AdamParams,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            batch_size: 1000,
            schedule: Schedule::Epochs(1),
            seed: 0,
            reg_box: None,
            reg_count: None,
            reg_weight: 1.0,
            adam: AdamParams::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, input_dim: usize) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Invalid(format!("learning rate must be positive, got {}", self.learning_rate)));
        }
        if self.batch_size == 0 {
            return Err(Error::Invalid("batch size must be positive".into()));
        }
        match self.schedule {
            Schedule::Epochs(0) | Schedule::Steps(0) => {
                return Err(Error::Invalid("training needs at least one epoch or step".into()))
            }
            _ => {}
        }
        if !(self.reg_weight >= 0.0 && self.reg_weight.is_finite()) {
            return Err(Error::Invalid(format!("reg weight must be non-negative, got {}", self.reg_weight)));
        }
        if self.reg_count == Some(0) && self.reg_weight > 0.0 {
            return Err(Error::Invalid("reg_count is 0 but reg_weight is positive".into()));
        }
        if let Some(b) = &self.reg_box {
            SampleBox::new(b.low.clone(), b.high.clone())?;
            if b.dim() != input_dim {
                return Err(Error::dim("regularizer box", input_dim, b.dim()));
            }
        }
        Ok(())
    }

    /// The regularizer box, defaulting to `[-5, 5]^d`.
    pub fn resolved_box(&self, input_dim: usize) -> Result<SampleBox> {
        match &self.reg_box {
            Some(b) => Ok(b.clone()),
            None => SampleBox::cube(input_dim, -5.0, 5.0),
        }
    }
}

/// Layer sizes after the input (the last entry is the output dimension `k`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub layers: Vec<usize>,
    pub activation: Activation,
    /// Activation of the output layer; `activation` when absent.
    pub output_activation: Option<Activation>,
    pub bias: bool,
}

impl Architecture {
    pub fn new(layers: Vec<usize>, activation: Activation) -> Self {
        Self {
            layers,
            activation,
            output_activation: None,
            bias: true,
        }
    }

    pub fn with_output_activation(mut self, activation: Activation) -> Self {
        self.output_activation = Some(activation);
        self
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().copied().unwrap_or(0)
    }

    pub fn build(&self, input_dim: usize, seed: u64) -> Result<FeatureMap> {
        let mut dims = vec![input_dim];
        dims.extend(&self.layers);
        let map = FeatureMap::init_params(&dims, self.activation, seed, self.bias)?;
        Ok(match self.output_activation {
            Some(act) => map.with_output_activation(act),
            None => map,
        })
    }
}

/// Everything needed to build an untrained model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub arch: Architecture,
    pub kernel: KernelSpec,
    /// Unsupervised target `a` (a single value is broadcast to every output),
    /// or the one-hot scale for supervised models.
    pub a: Vec<f64>,
}

impl ModelSpec {
    pub fn new(arch: Architecture, kernel: KernelSpec, a: f64) -> Self {
        Self { arch, kernel, a: vec![a] }
    }

    fn target_point(&self) -> Result<Vec<f64>> {
        let k = self.arch.output_dim();
        match self.a.len() {
            1 => Ok(vec![self.a[0]; k]),
            n if n == k => Ok(self.a.clone()),
            n => Err(Error::dim("target a", k, n)),
        }
    }

    pub fn build_unsupervised(&self, input_dim: usize, seed: u64) -> Result<MorseModel> {
        let map = self.arch.build(input_dim, seed)?;
        MorseModel::unsupervised(map, self.kernel.clone(), self.target_point()?)
    }

    pub fn build_supervised(&self, input_dim: usize, num_classes: usize, seed: u64) -> Result<MorseModel> {
        if self.a.len() != 1 {
            return Err(Error::Invalid("supervised models take a single target scale a".into()));
        }
        let map = self.arch.build(input_dim, seed)?;
        MorseModel::supervised(map, self.kernel.clone(), num_classes, self.a[0])
    }
}

/// One row of the loss trace.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub loss: f64,
    pub data_term: f64,
    pub reg_term: f64,
}

/// Writes `step,loss,data_term,reg_term`.
pub fn write_loss_csv(trace: &[LossRecord], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::from("step,loss,data_term,reg_term\n");
    for r in trace {
        out.push_str(&format!("{},{:?},{:?},{:?}\n", r.step, r.loss, r.data_term, r.reg_term));
    }
    std::fs::File::create(path)
        .and_then(|mut f| f.write_all(out.as_bytes()))
        .map_err(|e| Error::io(path, e))
}

/// A loss value split into its two terms, with exact parameter gradients.
#[derive(Debug, Clone)]
pub struct LossValue {
    pub loss: f64,
    pub data_term: f64,
    /// Already multiplied by the regularizer weight.
    pub reg_term: f64,
    pub grads: Gradients,
}

/// Mean energy over `x` against per-row targets, plus its gradient.
fn data_term(map: &FeatureMap, kernel: &KernelSpec, x: ArrayView2<'_, f64>, targets: &[&[f64]]) -> Result<(f64, Gradients)> {
    let (z, tape) = map.forward(x)?;
    let n = x.nrows() as f64;
    let mut upstream = Array2::zeros(z.raw_dim());
    let mut total = 0.0;
    for (i, row) in z.rows().into_iter().enumerate() {
        let row = row.as_slice().expect("contiguous");
        total += kernel.energy(row, targets[i])?;
        for (u, g) in upstream.row_mut(i).iter_mut().zip(kernel.energy_grad_z(row, targets[i])?) {
            *u = g / n;
        }
    }
    let (grads, _) = map.backward(&tape, upstream.view())?;
    Ok((total / n, grads))
}

/// `weight ·` mean kernel value over `x`, plus its gradient.
fn reg_term(
    map: &FeatureMap,
    kernel: &KernelSpec,
    x: ArrayView2<'_, f64>,
    targets: &[&[f64]],
    weight: f64,
) -> Result<(f64, Gradients)> {
    let (z, tape) = map.forward(x)?;
    let n = x.nrows() as f64;
    let mut upstream = Array2::zeros(z.raw_dim());
    let mut total = 0.0;
    for (i, row) in z.rows().into_iter().enumerate() {
        let row = row.as_slice().expect("contiguous");
        total += kernel.value(row, targets[i])?;
        for (u, g) in upstream.row_mut(i).iter_mut().zip(kernel.grad_z(row, targets[i])?) {
            *u = weight * g / n;
        }
    }
    let (grads, _) = map.backward(&tape, upstream.view())?;
    Ok((weight * total / n, grads))
}

fn combine(
    map: &FeatureMap,
    kernel: &KernelSpec,
    batch: ArrayView2<'_, f64>,
    batch_targets: &[&[f64]],
    negatives: ArrayView2<'_, f64>,
    negative_targets: &[&[f64]],
    reg_weight: f64,
) -> Result<LossValue> {
    if batch.nrows() == 0 {
        return Err(Error::Invalid("empty batch".into()));
    }
    let (data, mut grads) = data_term(map, kernel, batch, batch_targets)?;
    let mut reg = 0.0;
    if reg_weight > 0.0 {
        if negatives.nrows() == 0 {
            return Err(Error::Invalid("regularizer weight is positive but no negatives were given".into()));
        }
        let (r, g) = reg_term(map, kernel, negatives, negative_targets, reg_weight)?;
        reg = r;
        grads.add_assign(&g);
    }
    Ok(LossValue {
        loss: data + reg,
        data_term: data,
        reg_term: reg,
        grads,
    })
}

/// Unsupervised loss on `batch` with uniform `negatives`.
pub fn unsupervised_loss(
    model: &MorseModel,
    batch: ArrayView2<'_, f64>,
    negatives: ArrayView2<'_, f64>,
    reg_weight: f64,
) -> Result<LossValue> {
    let a = match model.target() {
        Target::Point(a) => a.as_slice(),
        Target::OneHot { .. } => return Err(Error::Unsupported("unsupervised loss on a supervised model".into())),
    };
    let batch_targets = vec![a; batch.nrows()];
    let negative_targets = vec![a; negatives.nrows()];
    combine(model.map(), model.kernel(), batch, &batch_targets, negatives, &negative_targets, reg_weight)
}

/// Supervised joint loss with targets `scale · onehot(y)`.
pub fn supervised_loss(
    model: &MorseModel,
    batch: ArrayView2<'_, f64>,
    labels: &[usize],
    negatives: ArrayView2<'_, f64>,
    negative_labels: &[usize],
    reg_weight: f64,
) -> Result<LossValue> {
    let c = model
        .num_classes()
        .ok_or_else(|| Error::Unsupported("supervised loss on an unsupervised model".into()))?;
    if labels.len() != batch.nrows() {
        return Err(Error::dim("batch labels", batch.nrows(), labels.len()));
    }
    if negative_labels.len() != negatives.nrows() {
        return Err(Error::dim("negative labels", negatives.nrows(), negative_labels.len()));
    }
    let targets = (0..c).map(|y| model.class_target(y)).collect::<Result<Vec<_>>>()?;
    let lookup = |ys: &[usize]| -> Result<Vec<&[f64]>> {
        ys.iter()
            .map(|&y| {
                targets
                    .get(y)
                    .map(Vec::as_slice)
                    .ok_or(Error::LabelOutOfRange { label: y, num_classes: c })
            })
            .collect()
    };
    combine(
        model.map(),
        model.kernel(),
        batch,
        &lookup(labels)?,
        negatives,
        &lookup(negative_labels)?,
        reg_weight,
    )
}

/// Adam moment estimates for every parameter of a [`FeatureMap`].
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    first: Gradients,
    second: Gradients,
    step: u64,
}

impl OptimizerState {
    pub fn new(map: &FeatureMap) -> Self {
        Self {
            first: Gradients::zeros_like(map),
            second: Gradients::zeros_like(map),
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One bias-corrected Adam update of `map` in place.
    pub fn adam_step(&mut self, map: &mut FeatureMap, grads: &Gradients, lr: f64, adam: AdamParams) -> Result<()> {
        if grads.layers.len() != map.layers().len() {
            return Err(Error::dim("gradient layers", map.layers().len(), grads.layers.len()));
        }
        for (i, (g, layer)) in grads.layers.iter().zip(map.layers()).enumerate() {
            if g.weights.raw_dim() != layer.weights().raw_dim() {
                return Err(Error::Invalid(format!("layer {i} weight gradient has the wrong shape")));
            }
            if g.bias.as_ref().map(|b| b.len()) != layer.bias().map(|b| b.len()) {
                return Err(Error::Invalid(format!("layer {i} bias gradient has the wrong shape")));
            }
            if g.weights.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("gradient of layer {i} weights")));
            }
            if g.bias.as_ref().is_some_and(|b| b.iter().any(|v| !v.is_finite())) {
                return Err(Error::NonFinite(format!("gradient of layer {i} bias")));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - adam.beta1.powi(t);
        let c2 = 1.0 - adam.beta2.powi(t);
        let update = |p: &mut f64, g: f64, m: &mut f64, v: &mut f64| {
            *m = adam.beta1 * *m + (1.0 - adam.beta1) * g;
            *v = adam.beta2 * *v + (1.0 - adam.beta2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= lr * m_hat / (v_hat.sqrt() + adam.eps);
        };
        for (li, layer) in map.layers_mut().iter_mut().enumerate() {
            let (w, b) = layer.params_mut();
            let g = &grads.layers[li];
            let (m, v) = (&mut self.first.layers[li], &mut self.second.layers[li]);
            ndarray::Zip::from(w)
                .and(&g.weights)
                .and(&mut m.weights)
                .and(&mut v.weights)
                .for_each(|p, &g, m, v| update(p, g, m, v));
            if let (Some(b), Some(gb), Some(mb), Some(vb)) = (b, g.bias.as_ref(), m.bias.as_mut(), v.bias.as_mut()) {
                ndarray::Zip::from(b)
                    .and(gb)
                    .and(mb)
                    .and(vb)
                    .for_each(|p, &g, m, v| update(p, g, m, v));
            }
        }
        Ok(())
    }
}

/// A fitted model with its per-step loss trace.
#[derive(Debug, Clone)]
pub struct TrainOutcome<M> {
    pub model: M,
    pub trace: Vec<LossRecord>,
}

/// Seed used for member `label` of a separately trained ensemble.
pub fn member_seed(seed: u64, label: usize) -> u64 {
    splitmix64(seed ^ splitmix64(label as u64 + 1))
}

fn config_hash(parts: &impl Serialize) -> String {
    let json = serde_json::to_vec(parts).expect("config serializes");
    let digest = Sha256::digest(&json);
    digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
}

fn metadata(seed: u64, procedure: &str, spec: &ModelSpec, config: &TrainConfig) -> Metadata {
    Metadata {
        seed: Some(seed),
        created: format!("morse-net {} {procedure}", env!("CARGO_PKG_VERSION")),
        config_hash: Some(config_hash(&(spec, config))),
    }
}

/// Batch iteration shared by both training procedures: shuffles each pass,
/// keeps the last partial batch, and calls `step` with the batch indices.
pub(crate) fn run_schedule(
    n: usize,
    batch_size: usize,
    schedule: Schedule,
    rng: &mut Rng,
    mut step: impl FnMut(&[usize], usize, &mut Rng) -> Result<LossRecord>,
) -> Result<Vec<LossRecord>> {
    let batch_size = batch_size.min(n);
    let batches_per_epoch = n.div_ceil(batch_size);
    let total_steps = match schedule {
        Schedule::Epochs(e) => e * batches_per_epoch,
        Schedule::Steps(s) => s,
    };
    let mut trace = Vec::with_capacity(total_steps);
    let mut order: Vec<usize> = (0..n).collect();
    let mut done = 0;
    while done < total_steps {
        rng.shuffle(&mut order);
        for chunk in order.chunks(batch_size) {
            if done == total_steps {
                break;
            }
            let record = step(chunk, done, rng)?;
            let diverged = !record.loss.is_finite() || record.loss > DIVERGENCE_LIMIT;
            trace.push(record);
            if diverged {
                return Err(Error::Diverged {
                    step: done,
                    loss: record.loss,
                    trace,
                });
            }
            done += 1;
        }
    }
    Ok(trace)
}

/// Fits an unsupervised model from scratch.
pub fn train_unsupervised(data: &Dataset, spec: &ModelSpec, config: &TrainConfig) -> Result<TrainOutcome<MorseModel>> {
    let model = spec.build_unsupervised(data.dim(), Rng::derive(config.seed, 0).next_u64())?;
    let mut outcome = fit_unsupervised(model, data, config)?;
    outcome.model = outcome.model.with_metadata(metadata(config.seed, "train_unsupervised", spec, config));
    Ok(outcome)
}

/// Continues fitting an existing unsupervised model.
pub fn fit_unsupervised(mut model: MorseModel, data: &Dataset, config: &TrainConfig) -> Result<TrainOutcome<MorseModel>> {
    if data.is_empty() {
        return Err(Error::Invalid("training data is empty".into()));
    }
    if model.is_supervised() {
        return Err(Error::Unsupported("fit_unsupervised on a supervised model".into()));
    }
    if data.dim() != model.input_dim() {
        return Err(Error::dim("training data", model.input_dim(), data.dim()));
    }
    config.validate(data.dim())?;
    let bounds = config.resolved_box(data.dim())?;
    let mut optimizer = OptimizerState::new(model.map());
    let mut rng = Rng::derive(config.seed, 1);
    let trace = run_schedule(data.len(), config.batch_size, config.schedule, &mut rng, |idx, step, rng| {
        let batch = data.features.select(ndarray::Axis(0), idx);
        let negatives = if config.reg_weight > 0.0 {
            bounds.sample(config.reg_count.unwrap_or(idx.len()), rng)
        } else {
            Array2::zeros((0, data.dim()))
        };
        let value = unsupervised_loss(&model, batch.view(), negatives.view(), config.reg_weight)?;
        let record = LossRecord {
            step,
            loss: value.loss,
            data_term: value.data_term,
            reg_term: value.reg_term,
        };
        if record.loss.is_finite() && record.loss <= DIVERGENCE_LIMIT {
            optimizer.adam_step(model.map_mut(), &value.grads, config.learning_rate, config.adam)?;
        }
        Ok(record)
    })?;
    Ok(TrainOutcome { model, trace })
}

fn require_labels(data: &Dataset) -> Result<(&[usize], usize)> {
    let labels = data
        .labels
        .as_deref()
        .ok_or_else(|| Error::Invalid("supervised training needs labels".into()))?;
    let c = data.num_classes().unwrap_or(0);
    Ok((labels, c))
}

/// Fits the shared supervised model `μ(x, y) = K(φ(x), scale · onehot(y))`.
pub fn train_supervised(data: &Dataset, spec: &ModelSpec, config: &TrainConfig) -> Result<TrainOutcome<MorseModel>> {
    if data.is_empty() {
        return Err(Error::Invalid("training data is empty".into()));
    }
    let (labels, c) = require_labels(data)?;
    let distinct = {
        let mut seen = vec![false; c];
        labels.iter().for_each(|&y| seen[y] = true);
        seen.iter().filter(|&&s| s).count()
    };
    if distinct < 2 {
        return Err(Error::Invalid("supervised training needs at least two distinct labels".into()));
    }
    if spec.arch.output_dim() != c {
        return Err(Error::dim("supervised output dimension (one per class)", c, spec.arch.output_dim()));
    }
    config.validate(data.dim())?;
    let mut model = spec.build_supervised(data.dim(), c, Rng::derive(config.seed, 0).next_u64())?;
    let bounds = config.resolved_box(data.dim())?;
    let mut optimizer = OptimizerState::new(model.map());
    let mut rng = Rng::derive(config.seed, 1);
    let trace = run_schedule(data.len(), config.batch_size, config.schedule, &mut rng, |idx, step, rng| {
        let batch = data.features.select(ndarray::Axis(0), idx);
        let batch_labels: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
        let (negatives, negative_labels) = if config.reg_weight > 0.0 {
            let m = config.reg_count.unwrap_or(idx.len());
            let x = bounds.sample(m, rng);
            let y = (0..m).map(|_| rng.below(c)).collect();
            (x, y)
        } else {
            (Array2::zeros((0, data.dim())), Vec::new())
        };
        let value = supervised_loss(
            &model,
            batch.view(),
            &batch_labels,
            negatives.view(),
            &negative_labels,
            config.reg_weight,
        )?;
        let record = LossRecord {
            step,
            loss: value.loss,
            data_term: value.data_term,
            reg_term: value.reg_term,
        };
        if record.loss.is_finite() && record.loss <= DIVERGENCE_LIMIT {
            optimizer.adam_step(model.map_mut(), &value.grads, config.learning_rate, config.adam)?;
        }
        Ok(record)
    })?;
    let model = model.with_metadata(metadata(config.seed, "train_supervised", spec, config));
    Ok(TrainOutcome { model, trace })
}

/// Fits one unsupervised model per label on that label's rows only.
///
/// `specs` holds either one spec shared by every class or one per class.
/// Member `i` is seeded with [`member_seed`]`(config.seed, i)`.
pub fn train_separate(
    data: &Dataset,
    specs: &[ModelSpec],
    config: &TrainConfig,
) -> Result<TrainOutcome<ModelEnsemble>> {
    let (_, c) = require_labels(data)?;
    if c == 0 {
        return Err(Error::Invalid("training data is empty".into()));
    }
    if specs.len() != 1 && specs.len() != c {
        return Err(Error::dim("per-class model specs", c, specs.len()));
    }
    let mut members = Vec::with_capacity(c);
    let mut trace = Vec::new();
    for label in 0..c {
        let subset = data.subset_with_label(label)?;
        if subset.is_empty() {
            return Err(Error::Invalid(format!("class {label} has no examples")));
        }
        let spec = &specs[label.min(specs.len() - 1)];
        let member_config = TrainConfig {
            seed: member_seed(config.seed, label),
            ..config.clone()
        };
        let outcome = train_unsupervised(&subset, spec, &member_config)?;
        trace.extend(outcome.trace);
        members.push(outcome.model);
    }
    Ok(TrainOutcome {
        model: ModelEnsemble::new(members)?,
        trace,
    })
}
