use ndarray::Array2;
use proptest::prelude::*;

use morse_net::autodiff::Activation;
use morse_net::data::{decode_idx_images, decode_idx_labels, read_csv, read_idx, write_csv, Dataset};
use morse_net::error::Error;
use morse_net::kernels::KernelSpec;
use morse_net::model::ModelEnsemble;
use morse_net::persist::{load_any, model_from_json, model_to_json, save_ensemble, SavedModel};
use morse_net::training::{Architecture, ModelSpec};

fn finite() -> impl Strategy<Value = f64> {
    prop_oneof![
        -1e3..1e3f64,
        any::<f64>().prop_filter("finite", |v| v.is_finite()),
        Just(0.0),
        Just(-0.0),
        Just(f64::MIN_POSITIVE),
        Just(5e-324),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn csv_round_trip_is_bit_exact(
        rows in 1usize..20,
        cols in 1usize..5,
        values in proptest::collection::vec(finite(), 100),
        labeled in any::<bool>(),
    ) {
        let data: Vec<f64> = values.iter().cycle().take(rows * cols).copied().collect();
        let features = Array2::from_shape_vec((rows, cols), data).unwrap();
        let labels = labeled.then(|| (0..rows).map(|i| i % 3).collect());
        let dataset = Dataset::new(features, labels, "test").unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        write_csv(&dataset, &path).unwrap();
        let back = read_csv(&path).unwrap();
        prop_assert_eq!(back.rejected_rows, 0);
        for (a, b) in back.dataset.features.iter().zip(dataset.features.iter()) {
            prop_assert_eq!(a.to_bits(), b.to_bits());
        }
        prop_assert_eq!(back.dataset.labels, dataset.labels);
    }

    #[test]
    fn model_json_round_trip(seed in 0u64..1000, width in 1usize..6, tanh in any::<bool>()) {
        let act = if tanh { Activation::Tanh } else { Activation::Relu };
        let model = ModelSpec::new(Architecture::new(vec![width, 2], act), KernelSpec::cauchy(0.7), 1.5)
            .build_unsupervised(3, seed)
            .unwrap();
        let text = model_to_json(&model);
        let back = model_from_json(&text).unwrap();
        prop_assert_eq!(&back, &model);
        prop_assert_eq!(model_to_json(&back), text);
    }
}

/// Hand-assembled IDX bytes, decoded without the crate's encoder.
#[test]
fn idx_fixture_matches_manual_decoding() {
    let pixels: [[u8; 6]; 2] = [[0, 51, 102, 153, 204, 255], [255, 0, 255, 0, 1, 2]];
    let mut images = vec![0, 0, 8, 3, 0, 0, 0, 2, 0, 0, 0, 2, 0, 0, 0, 3];
    images.extend(pixels.iter().flatten());
    let labels = [0u8, 0, 8, 1, 0, 0, 0, 2, 7, 3];

    let decoded = decode_idx_images(&images).unwrap();
    assert_eq!(decoded.dim(), (2, 6));
    for (r, row) in pixels.iter().enumerate() {
        for (c, &p) in row.iter().enumerate() {
            assert_eq!(decoded[[r, c]], p as f64 / 255.0);
        }
    }
    assert_eq!(decode_idx_labels(&labels).unwrap(), vec![7, 3]);

    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("img"), &images).unwrap();
    std::fs::write(dir.path().join("lbl"), labels).unwrap();
    let ds = read_idx(dir.path().join("img"), Some(&dir.path().join("lbl"))).unwrap();
    assert_eq!(ds.labels, Some(vec![7, 3]));
}

#[test]
fn idx_rejects_bad_magic_and_truncation() {
    let mut bytes = vec![0, 0, 8, 2, 0, 0, 0, 1, 0, 0, 0, 1, 0, 0, 0, 1, 9];
    assert!(matches!(decode_idx_images(&bytes), Err(Error::IdxMagic(0x0802))));
    bytes[3] = 3;
    bytes.pop();
    assert!(matches!(decode_idx_images(&bytes), Err(Error::Format(_))));
}

#[test]
fn csv_drops_non_finite_rows_and_locates_bad_cells() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.csv");
    std::fs::write(&path, "x0,x1,label\n1,2,0\nNaN,3,1\n4,inf,1\n5,6,1\n").unwrap();
    let import = read_csv(&path).unwrap();
    assert_eq!(import.rejected_rows, 2);
    assert_eq!(import.dataset.labels, Some(vec![0, 1]));

    std::fs::write(&path, "x0,x1\n1,2\n3,abc\n").unwrap();
    let msg = read_csv(&path).unwrap_err().to_string();
    assert!(msg.contains("row 3") && msg.contains("x1"), "{msg}");
}

#[test]
fn load_any_distinguishes_ensembles() {
    let spec = ModelSpec::new(Architecture::new(vec![3, 1], Activation::Tanh), KernelSpec::gaussian(1.0), 1.0);
    let members = vec![spec.build_unsupervised(2, 1).unwrap(), spec.build_unsupervised(2, 2).unwrap()];
    let ensemble = ModelEnsemble::new(members).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("e.json");
    save_ensemble(&ensemble, &path).unwrap();
    assert_eq!(load_any(&path).unwrap(), SavedModel::Ensemble(ensemble));
}
