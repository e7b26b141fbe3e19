//! Saves a model as JSON, loads it back and scores a dataset with both copies.

use morse_net::autodiff::Activation;
use morse_net::data::gen_two_moons;
use morse_net::eval::score_dataset;
use morse_net::kernels::KernelSpec;
use morse_net::persist::{load_model, save_model};
use morse_net::training::{Architecture, ModelSpec};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let model = ModelSpec::new(Architecture::new(vec![8, 1], Activation::Tanh), KernelSpec::cauchy(1.0), 2.0)
        .build_unsupervised(2, 3)?;
    let dir = std::env::temp_dir().join("morse-net-example");
    std::fs::create_dir_all(&dir)?;
    let path = dir.join("model.json");
    save_model(&model, &path)?;
    let back = load_model(&path)?;
    let text = std::fs::read_to_string(&path)?;
    println!("{}", text.lines().take(12).collect::<Vec<_>>().join("\n"));

    let data = gen_two_moons(50, 0.1, 2)?;
    let same = score_dataset(&model, &data)? == score_dataset(&back, &data)?;
    println!("...\nreloaded model scores identically: {same}");
    Ok(())
}
