//! Morse kernels.
//!
//! A Morse kernel takes values in `[0, 1]` and equals 1 exactly on the
//! diagonal `z = a`. All radial kinds here are written as a profile of the
//! squared distance `t = ‖z − a‖²`, which gives closed forms for the value,
//! the energy `−log K`, their gradients and the curvature at the diagonal.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Floor applied to kernel values before taking logs or reciprocals.
pub const KERNEL_FLOOR: f64 = 1e-12;

/// `−ln(KERNEL_FLOOR)`, the largest potential ever reported.
pub fn potential_ceiling() -> f64 {
    -KERNEL_FLOOR.ln()
}

#[derive(Debug, Clone, PartialEq)]
pub enum KernelSpec {
    /// `exp(−λ‖z−a‖²)`
    Gaussian { lambda: f64 },
    /// `exp(−λ‖z−a‖)`
    Laplace { lambda: f64 },
    /// `1 / (1 + λ‖z−a‖²)`
    Cauchy { lambda: f64 },
    /// `(1 + ‖z−a‖²/ν)^(−(m+ν)/2)`
    StudentT { nu: f64, m: usize },
    /// `1 / √(1 + λ‖z−a‖²)`
    InvSqrt { lambda: f64 },
    /// `Σ α_i K_i(z_i, a_i)` over consecutive blocks of `z`.
    Mixture(Vec<MixtureComponent>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct MixtureComponent {
    pub weight: f64,
    pub width: usize,
    pub kernel: KernelSpec,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelKind {
    Gaussian,
    Laplace,
    Cauchy,
    StudentT,
    InvSqrt,
    Mixture,
}

impl std::str::FromStr for KernelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.replace('-', "_").as_str() {
            "gaussian" => KernelKind::Gaussian,
            "laplace" => KernelKind::Laplace,
            "cauchy" => KernelKind::Cauchy,
            "student_t" => KernelKind::StudentT,
            "inv_sqrt" => KernelKind::InvSqrt,
            "mixture" => KernelKind::Mixture,
            other => return Err(Error::Invalid(format!("unknown kernel kind `{other}`"))),
        })
    }
}

impl KernelSpec {
    pub fn gaussian(lambda: f64) -> Self {
        KernelSpec::Gaussian { lambda }
    }

    pub fn cauchy(lambda: f64) -> Self {
        KernelSpec::Cauchy { lambda }
    }

    pub fn kind(&self) -> KernelKind {
        match self {
            KernelSpec::Gaussian { .. } => KernelKind::Gaussian,
            KernelSpec::Laplace { .. } => KernelKind::Laplace,
            KernelSpec::Cauchy { .. } => KernelKind::Cauchy,
            KernelSpec::StudentT { .. } => KernelKind::StudentT,
            KernelSpec::InvSqrt { .. } => KernelKind::InvSqrt,
            KernelSpec::Mixture(_) => KernelKind::Mixture,
        }
    }

    /// Builds a non-mixture kernel from its kind and scalar parameters.
    pub fn from_parts(kind: KernelKind, lambda: Option<f64>, nu: Option<f64>, m: Option<usize>) -> Result<Self> {
        let need_lambda = || lambda.ok_or_else(|| Error::Invalid(format!("{kind:?} kernel requires lambda")));
        let spec = match kind {
            KernelKind::Gaussian => KernelSpec::Gaussian { lambda: need_lambda()? },
            KernelKind::Laplace => KernelSpec::Laplace { lambda: need_lambda()? },
            KernelKind::Cauchy => KernelSpec::Cauchy { lambda: need_lambda()? },
            KernelKind::InvSqrt => KernelSpec::InvSqrt { lambda: need_lambda()? },
            KernelKind::StudentT => KernelSpec::StudentT {
                nu: nu.ok_or_else(|| Error::Invalid("student_t kernel requires nu".into()))?,
                m: m.ok_or_else(|| Error::Invalid("student_t kernel requires m".into()))?,
            },
            KernelKind::Mixture => {
                return Err(Error::Invalid("mixture kernels are built from components".into()))
            }
        };
        spec.validate()?;
        Ok(spec)
    }

    /// The same kernel with bandwidth parameter `lambda`.
    pub fn with_lambda(&self, lambda: f64) -> Result<Self> {
        let spec = match self {
            KernelSpec::Gaussian { .. } => KernelSpec::Gaussian { lambda },
            KernelSpec::Laplace { .. } => KernelSpec::Laplace { lambda },
            KernelSpec::Cauchy { .. } => KernelSpec::Cauchy { lambda },
            KernelSpec::InvSqrt { .. } => KernelSpec::InvSqrt { lambda },
            other => return Err(Error::Unsupported(format!("{:?} kernel has no lambda", other.kind()))),
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        self.validate_at_depth(0)
    }

    fn validate_at_depth(&self, depth: usize) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::Invalid(format!("kernel {name} must be positive, got {v}")))
            }
        };
        match self {
            KernelSpec::Gaussian { lambda }
            | KernelSpec::Laplace { lambda }
            | KernelSpec::Cauchy { lambda }
            | KernelSpec::InvSqrt { lambda } => positive("lambda", *lambda),
            KernelSpec::StudentT { nu, m } => {
                positive("nu", *nu)?;
                if *m == 0 {
                    return Err(Error::Invalid("student_t ambient dimension m must be positive".into()));
                }
                Ok(())
            }
            KernelSpec::Mixture(components) => {
                if depth > 0 {
                    return Err(Error::Invalid("nested mixture kernels are not allowed".into()));
                }
                if components.is_empty() {
                    return Err(Error::Invalid("mixture needs at least one component".into()));
                }
                let mut total = 0.0;
                for c in components {
                    positive("mixture weight", c.weight)?;
                    if c.width == 0 {
                        return Err(Error::Invalid("mixture block width must be positive".into()));
                    }
                    c.kernel.validate_at_depth(depth + 1)?;
                    total += c.weight;
                }
                if (total - 1.0).abs() > 1e-9 {
                    return Err(Error::Invalid(format!("mixture weights sum to {total}, expected 1")));
                }
                Ok(())
            }
        }
    }

    /// The `Z` dimension the kernel is pinned to, if any (mixtures only).
    pub fn expected_dim(&self) -> Option<usize> {
        match self {
            KernelSpec::Mixture(components) => Some(components.iter().map(|c| c.width).sum()),
            _ => None,
        }
    }

    fn check_dims(&self, z: &[f64], a: &[f64]) -> Result<()> {
        if z.len() != a.len() {
            return Err(Error::dim("kernel arguments", a.len(), z.len()));
        }
        if let Some(k) = self.expected_dim() {
            if z.len() != k {
                return Err(Error::dim("mixture kernel blocks", k, z.len()));
            }
        }
        if z.is_empty() {
            return Err(Error::Invalid("kernel arguments are empty".into()));
        }
        Ok(())
    }

    /// `K(z, a)`.
    pub fn value(&self, z: &[f64], a: &[f64]) -> Result<f64> {
        self.check_dims(z, a)?;
        Ok(self.value_unchecked(z, a))
    }

    fn value_unchecked(&self, z: &[f64], a: &[f64]) -> f64 {
        let t = sq_dist(z, a);
        match *self {
            KernelSpec::Gaussian { lambda } => (-lambda * t).exp(),
            KernelSpec::Laplace { lambda } => (-lambda * t.sqrt()).exp(),
            KernelSpec::Cauchy { lambda } => 1.0 / (1.0 + lambda * t),
            KernelSpec::InvSqrt { lambda } => 1.0 / (1.0 + lambda * t).sqrt(),
            KernelSpec::StudentT { nu, m } => (1.0 + t / nu).powf(-(m as f64 + nu) / 2.0),
            // 1 − Σ α_i (1 − K_i) is exactly 1 on the diagonal even when the
            // weights only sum to 1 up to rounding
            KernelSpec::Mixture(ref components) => (1.0 - mixture_deficit(components, z, a)).max(0.0),
        }
    }

    /// Unclamped energy `−log K(z, a)`, computed in closed form so it stays
    /// finite and accurate where `K` itself underflows.
    pub fn energy(&self, z: &[f64], a: &[f64]) -> Result<f64> {
        self.check_dims(z, a)?;
        Ok(self.energy_unchecked(z, a))
    }

    fn energy_unchecked(&self, z: &[f64], a: &[f64]) -> f64 {
        let t = sq_dist(z, a);
        match *self {
            KernelSpec::Gaussian { lambda } => lambda * t,
            KernelSpec::Laplace { lambda } => lambda * t.sqrt(),
            KernelSpec::Cauchy { lambda } => (lambda * t).ln_1p(),
            KernelSpec::InvSqrt { lambda } => 0.5 * (lambda * t).ln_1p(),
            KernelSpec::StudentT { nu, m } => 0.5 * (m as f64 + nu) * (t / nu).ln_1p(),
            KernelSpec::Mixture(ref components) => {
                let deficit = mixture_deficit(components, z, a);
                if deficit < 0.5 {
                    return -(-deficit).ln_1p();
                }
                // −log Σ α_i e^{−E_i}, via log-sum-exp
                let logs: Vec<f64> = blocks(components, z, a)
                    .map(|(c, zb, ab)| c.weight.ln() - c.kernel.energy_unchecked(zb, ab))
                    .collect();
                -log_sum_exp(&logs)
            }
        }
    }

    /// `−log max(K, 1e−12)`: the potential reported by scoring.
    pub fn neg_log(&self, z: &[f64], a: &[f64]) -> Result<f64> {
        Ok(self.energy(z, a)?.min(potential_ceiling()))
    }

    /// Analytic gradient of `K(·, a)` at `z`.
    pub fn grad_z(&self, z: &[f64], a: &[f64]) -> Result<Vec<f64>> {
        self.check_dims(z, a)?;
        let k = self.value_unchecked(z, a);
        let mut g = self.energy_grad_unchecked(z, a)?;
        match self {
            KernelSpec::Mixture(components) => {
                // ∇K = Σ α_i ∇K_i blockwise, with ∇K_i = −K_i ∇E_i
                let mut offset = 0;
                for (c, zb, ab) in blocks(components, z, a) {
                    let ki = c.kernel.value_unchecked(zb, ab);
                    let gi = c.kernel.energy_grad_unchecked(zb, ab)?;
                    for (j, v) in gi.into_iter().enumerate() {
                        g[offset + j] = -c.weight * ki * v;
                    }
                    offset += c.width;
                }
            }
            _ => g.iter_mut().for_each(|v| *v *= -k),
        }
        Ok(g)
    }

    /// Analytic gradient of the unclamped energy `−log K(·, a)` at `z`.
    pub fn energy_grad_z(&self, z: &[f64], a: &[f64]) -> Result<Vec<f64>> {
        self.check_dims(z, a)?;
        self.energy_grad_unchecked(z, a)
    }

    fn energy_grad_unchecked(&self, z: &[f64], a: &[f64]) -> Result<Vec<f64>> {
        let t = sq_dist(z, a);
        // radial kinds: ∇E = 2 E'(t) (z − a)
        let radial = |dedt: f64| -> Vec<f64> { z.iter().zip(a).map(|(zi, ai)| 2.0 * dedt * (zi - ai)).collect() };
        Ok(match *self {
            KernelSpec::Gaussian { lambda } => radial(lambda),
            KernelSpec::Cauchy { lambda } => radial(lambda / (1.0 + lambda * t)),
            KernelSpec::InvSqrt { lambda } => radial(0.5 * lambda / (1.0 + lambda * t)),
            KernelSpec::StudentT { nu, m } => radial(0.5 * (m as f64 + nu) / (nu * (1.0 + t / nu))),
            KernelSpec::Laplace { lambda } => {
                if t == 0.0 {
                    return Err(Error::NotDifferentiable(
                        "(laplace kernel at z = a)".into(),
                    ));
                }
                let d = t.sqrt();
                z.iter().zip(a).map(|(zi, ai)| lambda * (zi - ai) / d).collect()
            }
            KernelSpec::Mixture(ref components) => {
                // ∇E = Σ w_i ∇E_i blockwise, w_i = α_i K_i / Σ α_j K_j
                let logs: Vec<f64> = blocks(components, z, a)
                    .map(|(c, zb, ab)| c.weight.ln() - c.kernel.energy_unchecked(zb, ab))
                    .collect();
                let lse = log_sum_exp(&logs);
                let mut out = Vec::with_capacity(z.len());
                for ((c, zb, ab), l) in blocks(components, z, a).zip(&logs) {
                    let w = (l - lse).exp();
                    out.extend(c.kernel.energy_grad_unchecked(zb, ab)?.into_iter().map(|v| w * v));
                }
                out
            }
        })
    }

    /// Second derivative of `K(·, a)` at `a` along a unit direction.
    /// For mixtures this returns `Σ α_i s_i`.
    pub fn diag_curvature(&self) -> Result<f64> {
        Ok(match *self {
            KernelSpec::Gaussian { lambda } | KernelSpec::Cauchy { lambda } => -2.0 * lambda,
            KernelSpec::InvSqrt { lambda } => -lambda,
            KernelSpec::StudentT { nu, m } => -(m as f64 + nu) / nu,
            KernelSpec::Laplace { .. } => {
                return Err(Error::Unsupported(
                    "laplace kernel has no curvature at the diagonal".into(),
                ))
            }
            KernelSpec::Mixture(ref components) => {
                let mut total = 0.0;
                for c in components {
                    total += c.weight * c.kernel.diag_curvature()?;
                }
                total
            }
        })
    }

    /// Whether `K(·, a)` is twice differentiable at the diagonal.
    pub fn smooth_at_diagonal(&self) -> bool {
        match self {
            KernelSpec::Laplace { .. } => false,
            KernelSpec::Mixture(components) => components.iter().all(|c| c.kernel.smooth_at_diagonal()),
            _ => true,
        }
    }
}

fn mixture_deficit(components: &[MixtureComponent], z: &[f64], a: &[f64]) -> f64 {
    blocks(components, z, a)
        .map(|(c, zb, ab)| c.weight * (1.0 - c.kernel.value_unchecked(zb, ab)))
        .sum()
}

fn sq_dist(z: &[f64], a: &[f64]) -> f64 {
    z.iter().zip(a).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

fn blocks<'a>(
    components: &'a [MixtureComponent],
    z: &'a [f64],
    a: &'a [f64],
) -> impl Iterator<Item = (&'a MixtureComponent, &'a [f64], &'a [f64])> + 'a {
    let mut offset = 0;
    components.iter().map(move |c| {
        let range = offset..offset + c.width;
        offset += c.width;
        (c, &z[range.clone()], &a[range])
    })
}

/// Serialized form of a [`KernelSpec`]: `{kind, lambda, nu, m, components}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelRecord {
    pub kind: KernelKind,
    #[serde(default)]
    pub lambda: Option<f64>,
    #[serde(default)]
    pub nu: Option<f64>,
    #[serde(default)]
    pub m: Option<usize>,
    #[serde(default)]
    pub components: Option<Vec<ComponentRecord>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ComponentRecord {
    pub weight: f64,
    pub width: usize,
    pub kernel: KernelRecord,
}

impl From<&KernelSpec> for KernelRecord {
    fn from(spec: &KernelSpec) -> Self {
        let mut rec = KernelRecord {
            kind: spec.kind(),
            lambda: None,
            nu: None,
            m: None,
            components: None,
        };
        match spec {
            KernelSpec::Gaussian { lambda }
            | KernelSpec::Laplace { lambda }
            | KernelSpec::Cauchy { lambda }
            | KernelSpec::InvSqrt { lambda } => rec.lambda = Some(*lambda),
            KernelSpec::StudentT { nu, m } => {
                rec.nu = Some(*nu);
                rec.m = Some(*m);
            }
            KernelSpec::Mixture(components) => {
                rec.components = Some(
                    components
                        .iter()
                        .map(|c| ComponentRecord {
                            weight: c.weight,
                            width: c.width,
                            kernel: KernelRecord::from(&c.kernel),
                        })
                        .collect(),
                )
            }
        }
        rec
    }
}

impl TryFrom<KernelRecord> for KernelSpec {
    type Error = Error;

    fn try_from(rec: KernelRecord) -> Result<Self> {
        let spec = match rec.kind {
            KernelKind::Mixture => {
                let components = rec
                    .components
                    .ok_or_else(|| Error::Invalid("mixture kernel requires components".into()))?
                    .into_iter()
                    .map(|c| {
                        Ok(MixtureComponent {
                            weight: c.weight,
                            width: c.width,
                            kernel: KernelSpec::try_from(c.kernel)?,
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                KernelSpec::Mixture(components)
            }
            kind => KernelSpec::from_parts(kind, rec.lambda, rec.nu, rec.m)?,
        };
        spec.validate()?;
        Ok(spec)
    }
}

impl Serialize for KernelSpec {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        KernelRecord::from(self).serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for KernelSpec {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let rec = KernelRecord::deserialize(deserializer)?;
        KernelSpec::try_from(rec).map_err(serde::de::Error::custom)
    }
}
