//! Numerical check of the Morse-Bott property of the potential.
//!
//! On the mode set `M = {x : φ(x) = a}` the potential `V = −log K(φ(x), a)`
//! vanishes together with its gradient, and its Hessian is
//! `−∂²K(a, a) · Jᵀ J` (for scalar curvature), which is positive on the
//! normal space of `M` and zero exactly on its tangent space. This module
//! estimates the Hessian by central differences, diagonalizes it with cyclic
//! Jacobi rotations and checks both halves of that statement.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::autodiff::FeatureFn;
use crate::error::{Error, Result};
use crate::model::{MorseModel, Target};

fn finite(v: f64, what: &str) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite(what.into()))
    }
}

/// Central-difference gradient.
pub fn fd_gradient(f: impl Fn(&[f64]) -> f64, x: &[f64], eps: f64) -> Result<Vec<f64>> {
    if !(eps > 0.0) {
        return Err(Error::Invalid(format!("eps must be positive, got {eps}")));
    }
    let mut p = x.to_vec();
    (0..x.len())
        .map(|i| {
            p[i] = x[i] + eps;
            let up = finite(f(&p), "fd_gradient evaluation")?;
            p[i] = x[i] - eps;
            let down = finite(f(&p), "fd_gradient evaluation")?;
            p[i] = x[i];
            Ok((up - down) / (2.0 * eps))
        })
        .collect()
}

/// Central second differences, symmetrized.
pub fn fd_hessian(f: impl Fn(&[f64]) -> f64, x: &[f64], eps: f64) -> Result<Array2<f64>> {
    if !(eps > 0.0) {
        return Err(Error::Invalid(format!("eps must be positive, got {eps}")));
    }
    let d = x.len();
    let eval = |p: &[f64]| finite(f(p), "fd_hessian evaluation");
    let center = eval(x)?;
    let mut h = Array2::zeros((d, d));
    let mut p = x.to_vec();
    for i in 0..d {
        p[i] = x[i] + eps;
        let up = eval(&p)?;
        p[i] = x[i] - eps;
        let down = eval(&p)?;
        p[i] = x[i];
        h[[i, i]] = (up - 2.0 * center + down) / (eps * eps);
        for j in 0..i {
            let mut corner = |si: f64, sj: f64| {
                p[i] = x[i] + si * eps;
                p[j] = x[j] + sj * eps;
                let v = eval(&p);
                p[i] = x[i];
                p[j] = x[j];
                v
            };
            let v = (corner(1.0, 1.0)? - corner(1.0, -1.0)? - corner(-1.0, 1.0)? + corner(-1.0, -1.0)?) / (4.0 * eps * eps);
            h[[i, j]] = v;
            h[[j, i]] = v;
        }
    }
    Ok(h)
}

/// Symmetric eigendecomposition by cyclic Jacobi rotations.
///
/// Returns eigenvalues in descending order and the matching unit
/// eigenvectors as the columns of the second value.
pub fn jacobi_eigen(h: &Array2<f64>) -> Result<(Vec<f64>, Array2<f64>)> {
    let n = h.nrows();
    if h.ncols() != n {
        return Err(Error::dim("jacobi_eigen columns", n, h.ncols()));
    }
    let scale = h.iter().fold(1.0f64, |m, v| m.max(v.abs()));
    for i in 0..n {
        for j in 0..i {
            if (h[[i, j]] - h[[j, i]]).abs() > 1e-8 * scale {
                return Err(Error::Invalid(format!(
                    "matrix is not symmetric: H[{i},{j}] = {} vs H[{j},{i}] = {}",
                    h[[i, j]],
                    h[[j, i]]
                )));
            }
        }
    }
    let mut a = h.clone();
    let mut v = Array2::<f64>::eye(n);
    let off_norm = |a: &Array2<f64>| {
        let mut s = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    s += a[[i, j]] * a[[i, j]];
                }
            }
        }
        s.sqrt()
    };
    // absolute target, relaxed to rounding level for matrices with large entries
    let target = 1e-12f64.max(1e-15 * scale * n as f64);
    for _sweep in 0..100 {
        if off_norm(&a) < target {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[[p, q]];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[[q, q]] - a[[p, p]]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[[k, p]];
                    let akq = a[[k, q]];
                    a[[k, p]] = c * akp - s * akq;
                    a[[k, q]] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[[p, k]];
                    let aqk = a[[q, k]];
                    a[[p, k]] = c * apk - s * aqk;
                    a[[q, k]] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let vkp = v[[k, p]];
                    let vkq = v[[k, q]];
                    v[[k, p]] = c * vkp - s * vkq;
                    v[[k, q]] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[[j, j]].total_cmp(&a[[i, i]]));
    let values = order.iter().map(|&i| a[[i, i]]).collect();
    let vectors = Array2::from_shape_fn((n, n), |(r, c)| v[[r, order[c]]]);
    Ok((values, vectors))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MorseBottTolerances {
    /// Maximum `‖φ(x) − a‖` for `x` to count as a mode point.
    pub on_mode: f64,
    /// Eigenvalues with `|λ| ≤ zero_relative · λ_max` count as zero.
    pub zero_relative: f64,
    /// Maximum `|⟨v, ∇φ_j / ‖∇φ_j‖⟩|` over null eigenvectors `v`.
    pub tangency: f64,
    /// Finite-difference step for the Hessian.
    pub eps: f64,
}

impl Default for MorseBottTolerances {
    fn default() -> Self {
        Self {
            on_mode: 1e-3,
            zero_relative: 1e-2,
            tangency: 1e-3,
            eps: 1e-4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Verdict {
    Pass,
    Fail,
    /// The Jacobian of `φ` is rank deficient, so the mode set need not be a
    /// submanifold of codimension `k` at this point.
    Inconclusive,
}

impl std::fmt::Display for Verdict {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Verdict::Pass => "PASS",
            Verdict::Fail => "FAIL",
            Verdict::Inconclusive => "INCONCLUSIVE",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HessianReport {
    pub point: Vec<f64>,
    pub residual: f64,
    pub hessian: Vec<Vec<f64>>,
    /// Descending.
    pub eigenvalues: Vec<f64>,
    /// One eigenvector per entry of `eigenvalues`.
    pub eigenvectors: Vec<Vec<f64>>,
    pub expected_curved: usize,
    pub near_zero_count: usize,
    pub positive_count: usize,
    pub tangency_error: f64,
    pub verdict: Verdict,
}

/// Checks the Morse-Bott condition of `V` at a point of the mode set.
///
/// PASS requires exactly `k` eigenvalues above the zero threshold, `d − k`
/// within it, and every near-zero eigenvector orthogonal to each row of the
/// Jacobian `∇φ(x)` (so it lies in the tangent space of the mode set).
pub fn morse_bott_check<F: FeatureFn>(
    model: &MorseModel<F>,
    x: &[f64],
    tol: &MorseBottTolerances,
) -> Result<HessianReport> {
    let a = match model.target() {
        Target::Point(a) => a.clone(),
        Target::OneHot { .. } => {
            return Err(Error::Unsupported("Morse-Bott check needs an unsupervised model".into()))
        }
    };
    if !model.kernel().smooth_at_diagonal() {
        return Err(Error::Unsupported(format!(
            "{:?} kernel is not twice differentiable at the diagonal",
            model.kernel().kind()
        )));
    }
    let z = model.features(x)?;
    let residual = z.iter().zip(&a).map(|(p, q)| (p - q) * (p - q)).sum::<f64>().sqrt();
    if !(residual < tol.on_mode) {
        return Err(Error::OffMode {
            residual,
            tolerance: tol.on_mode,
        });
    }

    let d = x.len();
    let k = model.map().output_dim();
    let hessian = fd_hessian(|p| model.energy(p).unwrap_or(f64::NAN), x, tol.eps)?;
    let (eigenvalues, vectors) = jacobi_eigen(&hessian)?;

    let jac = model.map().jacobian(x)?;
    let rank_ok = k <= d && {
        let gram = jac.dot(&jac.t());
        let (g, _) = jacobi_eigen(&gram)?;
        let largest = g[0];
        largest > 0.0 && g[k - 1] > 1e-10 * largest
    };

    let largest = eigenvalues.first().copied().unwrap_or(0.0).max(0.0);
    let threshold = tol.zero_relative * largest;
    let positive_count = eigenvalues.iter().filter(|&&l| l > threshold).count();
    let near_zero: Vec<usize> = (0..d).filter(|&i| eigenvalues[i].abs() <= threshold).collect();

    let mut tangency_error: f64 = 0.0;
    for &i in &near_zero {
        let v = vectors.column(i);
        for row in jac.rows() {
            let norm = row.dot(&row).sqrt();
            if norm > 0.0 {
                tangency_error = tangency_error.max((v.dot(&row) / norm).abs());
            }
        }
    }

    let verdict = if !rank_ok {
        Verdict::Inconclusive
    } else if positive_count == k && near_zero.len() == d - k && tangency_error <= tol.tangency {
        Verdict::Pass
    } else {
        Verdict::Fail
    };

    Ok(HessianReport {
        point: x.to_vec(),
        residual,
        hessian: hessian.rows().into_iter().map(|r| r.to_vec()).collect(),
        eigenvalues,
        eigenvectors: (0..d).map(|c| vectors.column(c).to_vec()).collect(),
        expected_curved: k,
        near_zero_count: near_zero.len(),
        positive_count,
        tangency_error,
        verdict,
    })
}
