use std::path::PathBuf;

use gsedit::attention::AlignmentConfig;
use gsedit::denoiser::{load_checkpoint, Denoiser};
use gsedit::diffusion::{Condition, LatentCode};
use gsedit::pipeline::{PatchCodec, StyleClassifier};
use gsedit::Tensor;

fn asset() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("assets/toy-denoiser")
}

#[test]
fn validation_error_passes_the_gate() {
    let text = std::fs::read_to_string(asset().join("manifest.toml")).unwrap();
    let m: toml::Table = toml::from_str(&text).unwrap();
    let val = m["validation_mse"].as_float().unwrap();
    let base = m["baseline_mse"].as_float().unwrap();
    assert!(val <= 0.5, "validation eps-MSE {val}");
    assert!(val < base, "validation {val} not below baseline {base}");
}

#[test]
fn loads_and_predicts() {
    let model = load_checkpoint(asset()).unwrap();
    let codec = PatchCodec::read(asset().join("codec.toml")).unwrap();
    StyleClassifier::read(asset().join("classifier.toml")).unwrap();
    let shape = codec.latent_shape(64, 64);
    let z: Vec<LatentCode> = (0..2)
        .map(|v| {
            let data = (0..shape.iter().product::<usize>())
                .map(|i| ((i * 7 + v) % 13) as f32 / 6.0 - 1.0)
                .collect();
            LatentCode::new(Tensor::new(shape.to_vec(), data).unwrap(), 10, v)
        })
        .collect();
    let depth = vec![Tensor::full(&shape[1..], 0.5); 2];
    let align = AlignmentConfig::new(0.6, vec![0]).unwrap();
    let eps = model.predict(&z, 500, Condition(2), &depth, &align).unwrap();
    assert_eq!(eps.len(), 2);
    assert!(eps.iter().all(|e| e.shape() == shape && e.is_finite()));
}
