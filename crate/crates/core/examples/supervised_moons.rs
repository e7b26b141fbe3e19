//! One shared network with a class-per-dimension output versus one network per class.

use morse_net::autodiff::Activation;
use morse_net::data::gen_two_moons;
use morse_net::kernels::KernelSpec;
use morse_net::training::{train_separate, train_supervised, Architecture, ModelSpec, Schedule, TrainConfig};

fn main() -> morse_net::Result<()> {
    let data = gen_two_moons(200, 0.05, 0)?;
    let labels = data.labels.clone().expect("two moons is labeled");
    let config = TrainConfig {
        batch_size: 200,
        schedule: Schedule::Steps(300),
        seed: 1,
        ..TrainConfig::default()
    };
    let arch = |out| Architecture::new(vec![256, 256, out], Activation::Relu).with_output_activation(Activation::Linear);

    let shared = train_supervised(&data, &ModelSpec::new(arch(2), KernelSpec::gaussian(0.5), 2.0), &config)?.model;
    let separate = train_separate(&data, &[ModelSpec::new(arch(1), KernelSpec::gaussian(0.5), 2.0)], &config)?.model;

    let mut shared_hits = 0;
    let mut separate_hits = 0;
    for i in 0..data.len() {
        let x = data.row(i);
        let p = shared.conditional(x)?;
        shared_hits += usize::from(p[labels[i]] > 0.5);
        separate_hits += usize::from(separate.classify(x)? == labels[i]);
    }
    println!("shared model:      {shared_hits}/{} points classified correctly", data.len());
    println!("separate networks: {separate_hits}/{} points classified correctly", data.len());
    for x in [[0.0, 1.0], [1.0, -0.5], [0.5, 0.25], [4.0, 4.0]] {
        println!(
            "{x:?}: joint densities {:?}, marginal {:.3}",
            shared.joint_densities(&x)?.iter().map(|v| (v * 1e3).round() / 1e3).collect::<Vec<_>>(),
            shared.marginal_density(&x)?
        );
    }
    Ok(())
}
