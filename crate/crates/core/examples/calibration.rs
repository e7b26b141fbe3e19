//! A plain classifier stays confident far from its data; dividing its logits by
//! the Morse temperature `1/μ` pulls the far-field prediction back to uniform.

use ndarray::Array2;

use morse_net::autodiff::Activation;
use morse_net::data::gen_two_moons;
use morse_net::eval::{scale_logits, softmax, train_classifier, ClassifierArch, ClassifierConfig};
use morse_net::kernels::KernelSpec;
use morse_net::training::{train_unsupervised, Architecture, ModelSpec, Schedule, TrainConfig};

fn main() -> morse_net::Result<()> {
    let data = gen_two_moons(200, 0.2, 0)?;
    let arch = ClassifierArch { width: 64, blocks: 3, ..ClassifierArch::default() };
    let classifier = train_classifier(
        &data,
        &arch,
        &ClassifierConfig { learning_rate: 1e-3, schedule: Schedule::Epochs(60), seed: 1, ..ClassifierConfig::default() },
    )?
    .model;
    println!("classifier training accuracy {:.3}", classifier.accuracy(&data)?);

    let spec = ModelSpec::new(
        Architecture::new(vec![256, 256, 1], Activation::Relu).with_output_activation(Activation::Linear),
        KernelSpec::gaussian(0.5),
        2.0,
    );
    let config = TrainConfig { batch_size: 200, schedule: Schedule::Steps(300), seed: 1, ..TrainConfig::default() };
    let morse = train_unsupervised(&data, &spec, &config)?.model;

    for probe in [[0.5, 0.25], [1.5, -0.4], [4.0, -4.0]] {
        let x = Array2::from_shape_vec((1, 2), probe.to_vec()).expect("one row");
        let logits = classifier.logits(x.view())?.row(0).to_vec();
        let raw = softmax(&logits);
        print!("{probe:?}: raw max {:.3}", raw.iter().cloned().fold(0.0, f64::max));
        for lambda in [0.5, 5.0, 50.0] {
            let m = morse.clone().with_kernel(KernelSpec::gaussian(lambda))?;
            let p = softmax(&scale_logits(&logits, &m, &probe)?);
            print!(", λ={lambda} {:.3}", p.iter().cloned().fold(0.0, f64::max));
        }
        println!();
    }
    Ok(())
}
