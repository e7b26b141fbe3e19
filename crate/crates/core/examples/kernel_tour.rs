//! Value, energy and gradient of each kernel at increasing distance from the target.

use morse_net::kernels::{KernelSpec, MixtureComponent};

fn main() -> morse_net::Result<()> {
    let mixture = KernelSpec::Mixture(vec![
        MixtureComponent { weight: 0.5, width: 1, kernel: KernelSpec::gaussian(1.0) },
        MixtureComponent { weight: 0.5, width: 1, kernel: KernelSpec::cauchy(1.0) },
    ]);
    let kernels = [
        ("gaussian", KernelSpec::gaussian(1.0)),
        ("laplace", KernelSpec::Laplace { lambda: 1.0 }),
        ("cauchy", KernelSpec::cauchy(1.0)),
        ("student_t", KernelSpec::StudentT { nu: 3.0, m: 2 }),
        ("inv_sqrt", KernelSpec::InvSqrt { lambda: 1.0 }),
        ("mixture", mixture),
    ];
    let a = [0.0, 0.0];
    println!("{:<10} {:>8} {:>10} {:>10} {:>12}", "kernel", "|z-a|", "K", "V", "dK/dz0");
    for (name, k) in &kernels {
        for r in [0.5, 1.0, 2.0, 4.0] {
            let z = [r, 0.0];
            println!(
                "{name:<10} {r:>8.1} {:>10.4e} {:>10.4} {:>12.4e}",
                k.value(&z, &a)?,
                k.energy(&z, &a)?,
                k.grad_z(&z, &a)?[0]
            );
        }
    }
    Ok(())
}
