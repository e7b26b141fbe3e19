//! Fits an unsupervised Morse network to two moons and prints a coarse density map.

use morse_net::autodiff::Activation;
use morse_net::data::gen_two_moons;
use morse_net::kernels::KernelSpec;
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
    let fit = train_unsupervised(&data, &spec, &config)?;
    let last = fit.trace.last().expect("at least one step");
    println!("final loss {:.4} (data {:.4}, negatives {:.4})", last.loss, last.data_term, last.reg_term);

    let shades = [' ', '.', ':', '+', '#'];
    for row in 0..16 {
        let y = 2.0 - 4.0 * row as f64 / 15.0;
        let line: String = (0..48)
            .map(|col| {
                let x = -2.0 + 5.0 * col as f64 / 47.0;
                let mu = fit.model.density(&[x, y]).unwrap_or(0.0);
                shades[((mu * 4.999) as usize).min(4)]
            })
            .collect();
        println!("{line}");
    }
    for corner in [[3.0, 3.0], [-3.0, -3.0]] {
        println!("s{corner:?} = {:.3}", fit.model.ood_score(&corner)?);
    }
    Ok(())
}
