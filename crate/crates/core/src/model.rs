//! The Morse network: `μ(x) = K(φ(x), a)` and everything derived from it.

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::autodiff::{FeatureFn, FeatureMap};
use crate::error::{Error, Result};
use crate::kernels::{KernelSpec, KERNEL_FLOOR};

/// Where the kernel is anchored in feature space.
#[derive(Debug, Clone, PartialEq)]
pub enum Target {
    /// Unsupervised target `a ∈ ℝ^k`.
    Point(Vec<f64>),
    /// Supervised targets `scale · onehot(y)` for `y < num_classes`.
    OneHot { num_classes: usize, scale: f64 },
}

/// Free-form creation record stored with a model.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Metadata {
    pub seed: Option<u64>,
    pub created: String,
    pub config_hash: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MorseModel<F = FeatureMap> {
    map: F,
    kernel: KernelSpec,
    target: Target,
    metadata: Metadata,
}

impl<F: FeatureFn> MorseModel<F> {
    pub fn new(map: F, kernel: KernelSpec, target: Target) -> Result<Self> {
        kernel.validate()?;
        let k = map.output_dim();
        match &target {
            Target::Point(a) => {
                if a.len() != k {
                    return Err(Error::dim("target a", k, a.len()));
                }
                if a.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite("target a".into()));
                }
            }
            Target::OneHot { num_classes, scale } => {
                if *num_classes < 2 {
                    return Err(Error::Invalid("supervised models need at least two classes".into()));
                }
                if *num_classes != k {
                    return Err(Error::dim("supervised output (one unit per class)", *num_classes, k));
                }
                if !(*scale > 0.0 && scale.is_finite()) {
                    return Err(Error::Invalid(format!("target scale must be positive, got {scale}")));
                }
            }
        }
        if let Some(dim) = kernel.expected_dim() {
            if dim != k {
                return Err(Error::dim("kernel blocks vs feature dimension", k, dim));
            }
        }
        Ok(Self {
            map,
            kernel,
            target,
            metadata: Metadata::default(),
        })
    }

    pub fn unsupervised(map: F, kernel: KernelSpec, a: Vec<f64>) -> Result<Self> {
        Self::new(map, kernel, Target::Point(a))
    }

    pub fn supervised(map: F, kernel: KernelSpec, num_classes: usize, scale: f64) -> Result<Self> {
        Self::new(map, kernel, Target::OneHot { num_classes, scale })
    }

    /// Swaps the kernel, keeping the feature map and target.
    pub fn with_kernel(self, kernel: KernelSpec) -> Result<Self> {
        let metadata = self.metadata;
        Ok(Self::new(self.map, kernel, self.target)?.with_metadata(metadata))
    }

    pub fn with_metadata(mut self, metadata: Metadata) -> Self {
        self.metadata = metadata;
        self
    }

    pub fn map(&self) -> &F {
        &self.map
    }

    pub(crate) fn map_mut(&mut self) -> &mut F {
        &mut self.map
    }

    pub fn kernel(&self) -> &KernelSpec {
        &self.kernel
    }

    pub fn target(&self) -> &Target {
        &self.target
    }

    pub fn metadata(&self) -> &Metadata {
        &self.metadata
    }

    pub fn input_dim(&self) -> usize {
        self.map.input_dim()
    }

    pub fn is_supervised(&self) -> bool {
        matches!(self.target, Target::OneHot { .. })
    }

    pub fn num_classes(&self) -> Option<usize> {
        match self.target {
            Target::OneHot { num_classes, .. } => Some(num_classes),
            Target::Point(_) => None,
        }
    }

    fn point_target(&self) -> Result<&[f64]> {
        match &self.target {
            Target::Point(a) => Ok(a),
            Target::OneHot { .. } => Err(Error::Unsupported(
                "supervised model: use joint_density / marginal_density".into(),
            )),
        }
    }

    /// `scale · onehot(label)`.
    pub fn class_target(&self, label: usize) -> Result<Vec<f64>> {
        match self.target {
            Target::OneHot { num_classes, scale } => {
                if label >= num_classes {
                    return Err(Error::LabelOutOfRange { label, num_classes });
                }
                let mut t = vec![0.0; num_classes];
                t[label] = scale;
                Ok(t)
            }
            Target::Point(_) => Err(Error::Unsupported("unsupervised model has no class targets".into())),
        }
    }

    pub fn features(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.input_dim() {
            return Err(Error::dim("model input", self.input_dim(), x.len()));
        }
        let row = ArrayView2::from_shape((1, x.len()), x).expect("row view");
        Ok(self.map.eval_batch(row)?.into_raw_vec_and_offset().0)
    }

    pub fn features_batch(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        if x.ncols() != self.input_dim() {
            return Err(Error::dim("model input", self.input_dim(), x.ncols()));
        }
        self.map.eval_batch(x)
    }

    /// `μ(x) = K(φ(x), a)`.
    pub fn density(&self, x: &[f64]) -> Result<f64> {
        let a = self.point_target()?;
        self.kernel.value(&self.features(x)?, a)
    }

    pub fn density_batch(&self, x: ArrayView2<'_, f64>) -> Result<Vec<f64>> {
        let a = self.point_target()?;
        let z = self.features_batch(x)?;
        z.rows()
            .into_iter()
            .map(|row| self.kernel.value(row.as_slice().expect("contiguous"), a))
            .collect()
    }

    /// `V(x) = −log max(μ(x), 1e−12)`.
    pub fn potential(&self, x: &[f64]) -> Result<f64> {
        let a = self.point_target()?;
        self.kernel.neg_log(&self.features(x)?, a)
    }

    /// Unclamped `−log K(φ(x), a)`; agrees with [`MorseModel::potential`]
    /// below the clamp and keeps growing beyond it.
    pub fn energy(&self, x: &[f64]) -> Result<f64> {
        let a = self.point_target()?;
        self.kernel.energy(&self.features(x)?, a)
    }

    /// `∇_x` of the unclamped energy.
    pub fn energy_grad(&self, x: &[f64]) -> Result<Vec<f64>> {
        let a = self.point_target()?;
        if x.len() != self.input_dim() {
            return Err(Error::dim("model input", self.input_dim(), x.len()));
        }
        let (_, out) = self.map.value_and_vjp(x, &|z| self.kernel.energy_grad_z(z, a))?;
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("potential gradient".into()));
        }
        Ok(out)
    }

    /// `s(x) = 1 − μ(x)`.
    pub fn ood_score(&self, x: &[f64]) -> Result<f64> {
        Ok(1.0 - self.density(x)?)
    }

    /// `T(x) = 1 / max(μ(x), 1e−12)`.
    pub fn temperature(&self, x: &[f64]) -> Result<f64> {
        Ok(1.0 / self.density(x)?.max(KERNEL_FLOOR))
    }

    /// `μ(x, y) = K(φ(x), scale · onehot(y))`.
    pub fn joint_density(&self, x: &[f64], label: usize) -> Result<f64> {
        let target = self.class_target(label)?;
        self.kernel.value(&self.features(x)?, &target)
    }

    /// Joint densities for every label at once.
    pub fn joint_densities(&self, x: &[f64]) -> Result<Vec<f64>> {
        let c = self.num_classes().ok_or_else(|| Error::Unsupported("unsupervised model".into()))?;
        let z = self.features(x)?;
        (0..c).map(|y| self.kernel.value(&z, &self.class_target(y)?)).collect()
    }

    /// Unclamped per-label energies `V_y(x) = −log μ(x, y)`.
    pub fn class_energies(&self, x: &[f64]) -> Result<Vec<f64>> {
        let c = self.num_classes().ok_or_else(|| Error::Unsupported("unsupervised model".into()))?;
        let z = self.features(x)?;
        (0..c).map(|y| self.kernel.energy(&z, &self.class_target(y)?)).collect()
    }

    /// `μ(x) = Σ_y μ(x, y)`; may exceed 1.
    pub fn marginal_density(&self, x: &[f64]) -> Result<f64> {
        Ok(self.joint_densities(x)?.iter().sum())
    }

    /// `1 − min(μ(x), 1)` with the marginal density.
    pub fn marginal_score(&self, x: &[f64]) -> Result<f64> {
        Ok(1.0 - self.marginal_density(x)?.min(1.0))
    }

    /// `μ(y | x)`: softmax of `−V_y(x)`.
    pub fn conditional(&self, x: &[f64]) -> Result<Vec<f64>> {
        let energies = self.class_energies(x)?;
        Ok(softmax_neg(&energies))
    }
}

/// Softmax of `−energies`, shifted for stability.
pub fn softmax_neg(energies: &[f64]) -> Vec<f64> {
    let min = energies.iter().copied().fold(f64::INFINITY, f64::min);
    let exps: Vec<f64> = energies.iter().map(|e| (min - e).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// One unsupervised model per label, fitted in isolation.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelEnsemble<F = FeatureMap> {
    members: Vec<MorseModel<F>>,
}

impl<F: FeatureFn> ModelEnsemble<F> {
    pub fn new(members: Vec<MorseModel<F>>) -> Result<Self> {
        let first = members
            .first()
            .ok_or_else(|| Error::Invalid("ensemble must have at least one member".into()))?;
        let d = first.input_dim();
        for (i, m) in members.iter().enumerate() {
            if m.input_dim() != d {
                return Err(Error::dim(format!("ensemble member {i} input"), d, m.input_dim()));
            }
            if m.is_supervised() {
                return Err(Error::Invalid(format!("ensemble member {i} is supervised")));
            }
        }
        Ok(Self { members })
    }

    pub fn members(&self) -> &[MorseModel<F>] {
        &self.members
    }

    pub fn input_dim(&self) -> usize {
        self.members[0].input_dim()
    }

    /// `μ(x) = (1/C) Σ_i μ(x | i)`.
    pub fn density(&self, x: &[f64]) -> Result<f64> {
        let mut total = 0.0;
        for m in &self.members {
            total += m.density(x)?;
        }
        Ok(total / self.members.len() as f64)
    }

    pub fn ood_score(&self, x: &[f64]) -> Result<f64> {
        Ok(1.0 - self.density(x)?)
    }

    pub fn energies(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.members.iter().map(|m| m.energy(x)).collect()
    }

    /// Label with the smallest `V_i(x)`; ties go to the lowest index.
    pub fn classify(&self, x: &[f64]) -> Result<usize> {
        Ok(argmin(&self.energies(x)?))
    }
}

/// Index of the smallest value, first one on ties.
pub fn argmin(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v < values[best] {
            best = i;
        }
    }
    best
}

/// Anything that assigns a density to input rows.
///
/// Unsupervised models report `μ`, supervised models the marginal `Σ_y μ(x, y)`,
/// ensembles the member average.
pub trait DensityModel {
    fn input_dim(&self) -> usize;
    fn density_rows(&self, x: ArrayView2<'_, f64>) -> Result<Vec<f64>>;
}

impl<F: FeatureFn> DensityModel for MorseModel<F> {
    fn input_dim(&self) -> usize {
        MorseModel::input_dim(self)
    }

    fn density_rows(&self, x: ArrayView2<'_, f64>) -> Result<Vec<f64>> {
        match &self.target {
            Target::Point(_) => self.density_batch(x),
            Target::OneHot { num_classes, .. } => {
                let z = self.features_batch(x)?;
                let targets = (0..*num_classes)
                    .map(|y| self.class_target(y))
                    .collect::<Result<Vec<_>>>()?;
                z.rows()
                    .into_iter()
                    .map(|row| {
                        let row = row.as_slice().expect("contiguous");
                        targets.iter().map(|t| self.kernel.value(row, t)).sum()
                    })
                    .collect()
            }
        }
    }
}

impl<F: FeatureFn> DensityModel for ModelEnsemble<F> {
    fn input_dim(&self) -> usize {
        ModelEnsemble::input_dim(self)
    }

    fn density_rows(&self, x: ArrayView2<'_, f64>) -> Result<Vec<f64>> {
        let mut total = vec![0.0; x.nrows()];
        for m in &self.members {
            for (t, v) in total.iter_mut().zip(m.density_batch(x)?) {
                *t += v;
            }
        }
        let c = self.members.len() as f64;
        Ok(total.into_iter().map(|t| t / c).collect())
    }
}
