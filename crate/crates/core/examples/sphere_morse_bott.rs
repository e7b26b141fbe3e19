//! The norm map with a gaussian kernel has the unit sphere as its mode set;
//! the Hessian there has one curved direction and two flat tangent ones.

use morse_net::autodiff::NormMap;
use morse_net::geometry::{morse_bott_check, MorseBottTolerances};
use morse_net::kernels::KernelSpec;
use morse_net::model::MorseModel;

fn main() -> morse_net::Result<()> {
    let model = MorseModel::unsupervised(NormMap { dim: 3 }, KernelSpec::gaussian(0.5), vec![1.0])?;
    let tol = MorseBottTolerances::default();
    let s = 0.5f64.sqrt();
    for x in [[0.0, 0.0, 1.0], [s, s, 0.0], [0.6, 0.0, 0.8]] {
        let r = morse_bott_check(&model, &x, &tol)?;
        println!(
            "{x:?}: eigenvalues {:?}, tangency {:.1e}, {}",
            r.eigenvalues.iter().map(|v| (v * 1e6).round() / 1e6).collect::<Vec<_>>(),
            r.tangency_error,
            r.verdict
        );
    }
    match morse_bott_check(&model, &[0.0, 0.0, 1.5], &tol) {
        Err(e) => println!("[0, 0, 1.5]: {e}"),
        Ok(r) => println!("[0, 0, 1.5]: unexpectedly checked, {}", r.verdict),
    }
    Ok(())
}
