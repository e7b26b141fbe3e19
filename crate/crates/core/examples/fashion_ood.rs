//! FashionMNIST as in-distribution, MNIST as out-of-distribution.
//!
//! Needs the IDX files from `python3 scripts/fetch_ood_data.py` in `data/`
//! (or the directory given as the first argument).

use std::path::PathBuf;

use morse_net::autodiff::Activation;
use morse_net::data::read_idx;
use morse_net::eval::{auroc_report, score_dataset, Origin, ScoreSet};
use morse_net::kernels::KernelSpec;
use morse_net::training::{train_unsupervised, Architecture, ModelSpec, Schedule, TrainConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("data"));
    let train = read_idx(dir.join("fashion-train-images-idx3-ubyte"), None)?;
    let held_out = read_idx(dir.join("fashion-test-images-idx3-ubyte"), None)?;
    let mnist = read_idx(dir.join("mnist-test-images-idx3-ubyte"), None)?;
    let epochs = std::env::var("EPOCHS").ok().and_then(|v| v.parse().ok()).unwrap_or(24);

    let spec = ModelSpec::new(
        Architecture::new(vec![500, 500, 500, 500, 500, 1], Activation::Relu),
        KernelSpec::gaussian(1.0),
        10.0,
    );
    let config = TrainConfig { batch_size: 1000, schedule: Schedule::Epochs(epochs), seed: 1, ..TrainConfig::default() };
    let fit = train_unsupervised(&train, &spec, &config)?;
    println!("{} steps over {} images, final loss {:.4}", fit.trace.len(), train.len(), fit.trace.last().map_or(f64::NAN, |r| r.loss));

    let s = |d| -> morse_net::Result<Vec<f64>> { Ok(score_dataset(&fit.model, d)?.into_iter().map(|r| r.s).collect()) };
    let report = auroc_report(&ScoreSet::new(s(&held_out)?, Origin::Ind)?, &ScoreSet::new(s(&mnist)?, Origin::Ood)?)?;
    println!("AUROC {:.4} ({} FashionMNIST vs {} MNIST)", report.auroc, report.n_ind, report.n_ood);
    Ok(())
}
