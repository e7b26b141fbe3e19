//! Reverse-mode gradients of a small network checked against central differences.

use morse_net::autodiff::Activation;
use morse_net::training::Architecture;

fn main() -> morse_net::Result<()> {
    for (i, act) in [Activation::Tanh, Activation::LeakyRelu, Activation::Relu].into_iter().enumerate() {
        let map = Architecture::new(vec![16, 16, 2], act).build(3, i as u64)?;
        let err = map.grad_check(&[0.3, -0.7, 1.1], 1e-6)?;
        println!("{:<10} {} params, max relative error {err:.2e}", act.name(), map.num_params());
    }
    Ok(())
}
