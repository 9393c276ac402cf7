use mose::model::{padded_side, ModelConfig};
use mose::numerics::{Rng, Tensor};
use mose::Model32;

#[test]
fn padded_side_is_next_double_window_multiple() {
    assert_eq!(padded_side(120, 8), 128);
    assert_eq!(padded_side(16, 8), 16);
    assert_eq!(padded_side(17, 8), 32);
    assert_eq!(padded_side(1, 8), 16);
    assert_eq!(padded_side(64, 8), 64);
}

#[test]
fn output_is_exactly_scale_times_input() {
    let mut rng = Rng::new(21);
    for r in [2, 3, 4] {
        let mut cfg = ModelConfig::toy();
        cfg.scale = r;
        let model = Model32::new(cfg, 1).unwrap();
        for (h, w) in [(1, 1), (5, 9), (16, 16), (33, 41)] {
            let x: Tensor<f32> = rng.uniform_tensor(&[2, 4, h, w], 0.0, 1.0);
            let out = model.forward(&x).unwrap();
            assert_eq!(out.sr.shape(), [2, 4, r * h, r * w]);
            assert!(out.sr.is_finite());
        }
    }
}

#[test]
fn features_live_on_the_padded_grid() {
    let model = Model32::new(ModelConfig::toy(), 2).unwrap();
    let x: Tensor<f32> = Rng::new(3).uniform_tensor(&[1, 4, 20, 16], 0.0, 1.0);
    assert_eq!(model.extract_features(&x).unwrap().shape(), [1, 16, 32, 16]);
}

#[test]
fn wrong_band_count_is_a_shape_error() {
    let model = Model32::new(ModelConfig::toy(), 2).unwrap();
    let x: Tensor<f32> = Tensor::zeros(&[1, 3, 16, 16]);
    assert!(matches!(model.forward(&x), Err(mose::MoseError::Shape(_))));
}
