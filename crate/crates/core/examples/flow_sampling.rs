//! Gradient flow of the potential carries far-away points onto the learned modes.

use morse_net::autodiff::Activation;
use morse_net::data::{gen_two_moons, SampleBox};
use morse_net::kernels::KernelSpec;
use morse_net::sampler::{sample_from_box, FlowConfig};
use morse_net::training::{train_unsupervised, Architecture, ModelSpec, Schedule, TrainConfig};

fn main() -> morse_net::Result<()> {
    let data = gen_two_moons(200, 0.0, 0)?;
    let arch = Architecture::new(vec![256, 256, 1], Activation::Relu).with_output_activation(Activation::Linear);
    let spec = ModelSpec::new(arch, KernelSpec::gaussian(0.5), 2.0);
    let config = TrainConfig {
        batch_size: 200,
        schedule: Schedule::Steps(300),
        seed: 1,
        ..TrainConfig::default()
    };
    let model = train_unsupervised(&data, &spec, &config)?.model;

    let flows = sample_from_box(&model, &SampleBox::cube(2, -3.0, 3.0)?, 8, 7, &FlowConfig::default())?;
    println!("{:>18} {:>18} {:>8} {:>8}", "start", "end", "V0", "V");
    for f in &flows {
        let fmt = |p: &[f64]| format!("({:.2}, {:.2})", p[0], p[1]);
        println!("{:>18} {:>18} {:>8.3} {:>8.3}", fmt(&f.start), fmt(&f.point), f.initial_potential, f.potential);
    }
    Ok(())
}
