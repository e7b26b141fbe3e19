//! Sampling by gradient descent on the potential: `x ← x − h ∇V(x)`.
//!
//! The flow follows the unclamped energy `−log K(φ(x), a)`, which coincides
//! with the potential wherever the potential is below its clamp, so points
//! far outside the data still receive a usable gradient.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::FeatureFn;
use crate::data::SampleBox;
use crate::error::{Error, Result};
use crate::model::MorseModel;
use crate::rng::Rng;

/// `‖∇V‖` below which a flow is reported as converged.
pub const CONVERGENCE_THRESHOLD: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlowConfig {
    pub step_size: f64,
    pub steps: usize,
    pub trace: bool,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self {
            step_size: 1e-3,
            steps: 1000,
            trace: false,
        }
    }
}

impl FlowConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return Err(Error::Invalid(format!("step size must be positive, got {}", self.step_size)));
        }
        if self.steps == 0 {
            return Err(Error::Invalid("flow needs at least one step".into()));
        }
        Ok(())
    }
}

/// One point of a traced trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryPoint {
    pub x: Vec<f64>,
    pub potential: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlowResult {
    pub start: Vec<f64>,
    pub point: Vec<f64>,
    pub density: f64,
    pub potential: f64,
    pub initial_potential: f64,
    /// `steps + 1` points when traced.
    pub trajectory: Option<Vec<TrajectoryPoint>>,
    pub grad_norm: f64,
    pub converged: bool,
}

/// `x − h ∇V(x)`.
pub fn flow_step<F: FeatureFn>(model: &MorseModel<F>, x: &[f64], step_size: f64) -> Result<Vec<f64>> {
    let grad = checked_grad(model, x)?;
    Ok(x.iter().zip(&grad).map(|(xi, gi)| xi - step_size * gi).collect())
}

fn checked_grad<F: FeatureFn>(model: &MorseModel<F>, x: &[f64]) -> Result<Vec<f64>> {
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("flow position".into()));
    }
    model.energy_grad(x)
}

pub fn run_flow<F: FeatureFn>(model: &MorseModel<F>, x0: &[f64], config: &FlowConfig) -> Result<FlowResult> {
    config.validate()?;
    let initial_potential = model.potential(x0)?;
    let mut x = x0.to_vec();
    let mut trajectory = config.trace.then(|| {
        let mut t = Vec::with_capacity(config.steps + 1);
        t.push(TrajectoryPoint {
            x: x.clone(),
            potential: initial_potential,
        });
        t
    });
    for step in 0..config.steps {
        x = flow_step(model, &x, config.step_size).map_err(|e| Error::Invalid(format!("flow step {step}: {e}")))?;
        if let Some(t) = trajectory.as_mut() {
            t.push(TrajectoryPoint {
                x: x.clone(),
                potential: model.potential(&x)?,
            });
        }
    }
    let grad_norm = match model.energy_grad(&x) {
        Ok(g) => g.iter().map(|v| v * v).sum::<f64>().sqrt(),
        // non-differentiable exactly at a mode (laplace): nothing left to descend
        Err(Error::NotDifferentiable(_)) => 0.0,
        Err(e) => return Err(e),
    };
    Ok(FlowResult {
        start: x0.to_vec(),
        density: model.density(&x)?,
        potential: model.potential(&x)?,
        initial_potential,
        point: x,
        trajectory,
        grad_norm,
        converged: grad_norm < CONVERGENCE_THRESHOLD,
    })
}

/// Flows from `count` starts drawn uniformly from `bounds`.
pub fn sample_from_box<F: FeatureFn>(
    model: &MorseModel<F>,
    bounds: &SampleBox,
    count: usize,
    seed: u64,
    config: &FlowConfig,
) -> Result<Vec<FlowResult>> {
    if bounds.dim() != model.input_dim() {
        return Err(Error::dim("sampling box", model.input_dim(), bounds.dim()));
    }
    let mut rng = Rng::new(seed);
    let starts = bounds.sample(count, &mut rng);
    starts
        .rows()
        .into_iter()
        .map(|row| run_flow(model, row.as_slice().expect("contiguous"), config))
        .collect()
}

/// Writes `step,x_0..x_{d-1},V` rows for every traced flow, flows separated by
/// a `flow` column.
pub fn write_trajectories_csv(results: &[FlowResult], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let d = results.first().map_or(0, |r| r.point.len());
    let mut out = String::from("flow,step");
    for j in 0..d {
        out.push_str(&format!(",x_{j}"));
    }
    out.push_str(",V\n");
    for (f, r) in results.iter().enumerate() {
        let fallback;
        let points = match &r.trajectory {
            Some(t) => t.as_slice(),
            None => {
                fallback = [
                    TrajectoryPoint { x: r.start.clone(), potential: r.initial_potential },
                    TrajectoryPoint { x: r.point.clone(), potential: r.potential },
                ];
                &fallback[..]
            }
        };
        let last = points.len() - 1;
        for (i, p) in points.iter().enumerate() {
            // untraced flows report only the start and the final step
            let step = if r.trajectory.is_some() || i == 0 { i } else { last.max(1) };
            out.push_str(&format!("{f},{step}"));
            for v in &p.x {
                out.push_str(&format!(",{v:?}"));
            }
            out.push_str(&format!(",{:?}\n", p.potential));
        }
    }
    std::fs::File::create(path)
        .and_then(|mut f| f.write_all(out.as_bytes()))
        .map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{Activation, DenseLayer, FeatureMap};
    use crate::kernels::KernelSpec;
    use ndarray::{Array1, Array2};

    fn quadratic(dim: usize, kernel: KernelSpec) -> MorseModel {
        let map = FeatureMap::new(vec![DenseLayer::new(Array2::eye(dim), Some(Array1::zeros(dim)), Activation::Linear).unwrap()])
            .unwrap();
        MorseModel::unsupervised(map, kernel, vec![0.0; dim]).unwrap()
    }

    #[test]
    fn quadratic_step_contracts() {
        let m = quadratic(2, KernelSpec::gaussian(0.5));
        let h = 0.01;
        let x = flow_step(&m, &[1.0, -2.0], h).unwrap();
        assert!((x[0] - (1.0 - h)).abs() < 1e-15);
        assert!((x[1] + 2.0 * (1.0 - h)).abs() < 1e-15);
        assert_eq!(flow_step(&m, &[0.0, 0.0], h).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn laplace_at_mode_errors() {
        let m = quadratic(1, KernelSpec::Laplace { lambda: 1.0 });
        assert!(matches!(flow_step(&m, &[0.0], 0.1), Err(Error::NotDifferentiable(_))));
    }

    #[test]
    fn closed_form_flow() {
        let m = quadratic(1, KernelSpec::gaussian(0.5));
        let r = run_flow(&m, &[2.0], &FlowConfig::default()).unwrap();
        let expected = 2.0 * 0.999f64.powi(1000);
        assert!((r.point[0] - expected).abs() < 1e-9);
        assert!((expected - 0.735).abs() < 1e-3);
    }

    #[test]
    fn trace_does_not_change_result() {
        let m = quadratic(2, KernelSpec::cauchy(1.0));
        let plain = run_flow(&m, &[0.3, 0.4], &FlowConfig { steps: 50, ..Default::default() }).unwrap();
        let traced = run_flow(&m, &[0.3, 0.4], &FlowConfig { steps: 50, trace: true, ..Default::default() }).unwrap();
        assert_eq!(plain.point, traced.point);
        let t = traced.trajectory.unwrap();
        assert_eq!(t.len(), 51);
        assert!(t.windows(2).all(|w| w[1].potential < w[0].potential));
    }

    #[test]
    fn one_step_flow_equals_flow_step() {
        let m = quadratic(1, KernelSpec::gaussian(2.0));
        let r = run_flow(&m, &[1.5], &FlowConfig { steps: 1, step_size: 0.1, trace: false }).unwrap();
        assert_eq!(r.point, flow_step(&m, &[1.5], 0.1).unwrap());
        assert!(FlowConfig { steps: 0, ..Default::default() }.validate().is_err());
        assert!(FlowConfig { step_size: 0.0, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn flow_from_mode_stays() {
        let m = quadratic(2, KernelSpec::gaussian(0.5));
        let r = run_flow(&m, &[0.0, 0.0], &FlowConfig::default()).unwrap();
        assert_eq!(r.point, vec![0.0, 0.0]);
        assert!(r.converged);
    }
}
