use approx::assert_relative_eq;
use ndarray::Array2;
use proptest::prelude::*;

use morse_net::autodiff::{Activation, NormMap};
use morse_net::data::{gen_two_moons, SampleBox};
use morse_net::error::Error;
use morse_net::eval::{auroc, auroc_pairwise, Origin, ScoreSet};
use morse_net::geometry::{jacobi_eigen, morse_bott_check, MorseBottTolerances};
use morse_net::kernels::KernelSpec;
use morse_net::model::MorseModel;
use morse_net::rng::Rng;
use morse_net::sampler::{run_flow, FlowConfig};
use morse_net::training::{unsupervised_loss, Architecture, ModelSpec};

fn scores() -> impl Strategy<Value = Vec<f64>> {
    proptest::collection::vec(prop_oneof![0.0..1.0f64, (0u8..5).prop_map(|k| k as f64 / 4.0)], 1..40)
}

fn sets(ind: Vec<f64>, ood: Vec<f64>) -> (ScoreSet, ScoreSet) {
    (ScoreSet::new(ind, Origin::Ind).unwrap(), ScoreSet::new(ood, Origin::Ood).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn auroc_swapping_roles_complements(ind in scores(), ood in scores()) {
        let (a, b) = sets(ind.clone(), ood.clone());
        let (c, d) = sets(ood, ind);
        let sum = auroc(&a, &b).unwrap() + auroc(&c, &d).unwrap();
        prop_assert!((sum - 1.0).abs() < 1e-12);
    }

    #[test]
    fn auroc_ignores_monotone_transforms(ind in scores(), ood in scores()) {
        let (a, b) = sets(ind.clone(), ood.clone());
        let f = |v: &Vec<f64>| v.iter().map(|x| (3.0 * x).exp() - 7.0).collect::<Vec<_>>();
        let (c, d) = sets(f(&ind), f(&ood));
        prop_assert_eq!(auroc(&a, &b).unwrap(), auroc(&c, &d).unwrap());
        let value = auroc_pairwise(&ind, &ood).unwrap();
        prop_assert!((0.0..=1.0).contains(&value));
    }

    #[test]
    fn jacobi_reconstructs_symmetric_matrices(n in 1usize..7, seed in any::<u64>()) {
        let mut rng = Rng::new(seed);
        let b = Array2::from_shape_simple_fn((n, n), || rng.normal());
        let h = &b + &b.t();
        let (values, vectors) = jacobi_eigen(&h).unwrap();
        prop_assert!(values.windows(2).all(|w| w[0] >= w[1]));
        let rebuilt = vectors.dot(&Array2::from_diag(&ndarray::Array1::from(values))).dot(&vectors.t());
        let gram = vectors.t().dot(&vectors);
        for i in 0..n {
            for j in 0..n {
                prop_assert!((rebuilt[[i, j]] - h[[i, j]]).abs() < 1e-9);
                let eye = if i == j { 1.0 } else { 0.0 };
                prop_assert!((gram[[i, j]] - eye).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn box_samples_stay_inside(seed in any::<u64>(), lo in -10.0..0.0f64, width in 0.01..10.0f64) {
        let bounds = SampleBox::new(vec![lo, 2.0 * lo], vec![lo + width, 2.0 * lo + width]).unwrap();
        let draws = bounds.sample(200, &mut Rng::new(seed));
        prop_assert!(draws.rows().into_iter().all(|r| bounds.contains(r.as_slice().unwrap())));
    }

    #[test]
    fn kernel_energy_is_negative_log_value(z in -3.0..3.0f64, a in -3.0..3.0f64, lambda in 0.1..3.0f64) {
        for kernel in [KernelSpec::gaussian(lambda), KernelSpec::cauchy(lambda), KernelSpec::Laplace { lambda }] {
            let v = kernel.value(&[z], &[a]).unwrap();
            let e = kernel.energy(&[z], &[a]).unwrap();
            prop_assert!((e + v.ln()).abs() < 1e-12 * e.abs().max(1.0));
        }
    }
}

fn sphere() -> MorseModel<NormMap> {
    MorseModel::unsupervised(NormMap { dim: 3 }, KernelSpec::gaussian(0.5), vec![1.0]).unwrap()
}

#[test]
fn points_off_the_sphere_are_rejected() {
    let model = sphere();
    let mut rng = Rng::new(12);
    let tol = MorseBottTolerances::default();
    for _ in 0..20 {
        let g: Vec<f64> = (0..3).map(|_| rng.normal()).collect();
        let n = g.iter().map(|v| v * v).sum::<f64>().sqrt();
        let r = rng.uniform_in(1.01, 3.0);
        let x: Vec<f64> = g.iter().map(|v| r * v / n).collect();
        assert!(matches!(morse_bott_check(&model, &x, &tol), Err(Error::OffMode { .. })));
    }
}

#[test]
fn flow_never_raises_the_potential_of_a_quadratic() {
    let config = FlowConfig {
        steps: 500,
        trace: true,
        ..FlowConfig::default()
    };
    let result = run_flow(&sphere(), &[1.5, -0.5, 0.8], &config).unwrap();
    let trajectory = result.trajectory.unwrap();
    assert!(trajectory.windows(2).all(|w| w[1].potential <= w[0].potential));
    let norm = result.point.iter().map(|v| v * v).sum::<f64>().sqrt();
    assert!(norm < 1.5 && norm > 1.0);
}

#[test]
fn loss_is_invariant_to_batch_order() {
    let data = gen_two_moons(24, 0.1, 3).unwrap();
    let model = ModelSpec::new(Architecture::new(vec![8, 1], Activation::Tanh), KernelSpec::gaussian(0.5), 2.0)
        .build_unsupervised(2, 5)
        .unwrap();
    let negatives = SampleBox::cube(2, -5.0, 5.0).unwrap().sample(24, &mut Rng::new(1));
    let mut order: Vec<usize> = (0..data.len()).collect();
    Rng::new(9).shuffle(&mut order);
    let shuffled = data.select(&order);
    let a = unsupervised_loss(&model, data.view(), negatives.view(), 1.0).unwrap();
    let b = unsupervised_loss(&model, shuffled.view(), negatives.view(), 1.0).unwrap();
    assert_relative_eq!(a.loss, b.loss, max_relative = 1e-12);
    for (x, y) in a.grads.flatten().iter().zip(b.grads.flatten()) {
        assert_relative_eq!(*x, y, epsilon = 1e-12, max_relative = 1e-10);
    }
}
