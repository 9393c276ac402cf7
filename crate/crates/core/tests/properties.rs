use mose::data::RasterImage;
use mose::layers::{depth_to_space, space_to_depth};
use mose::losses::{ssim_per_channel, SsimParams};
use mose::metrics::{bicubic_resize, ncc_metric};
use mose::moe::{importance_loss, topk_softmax};
use mose::numerics::Tensor;
use num_rational::Ratio;
use proptest::prelude::*;

fn raster() -> impl Strategy<Value = RasterImage> {
    (1usize..4, 1usize..12, 1usize..12).prop_flat_map(|(s, h, w)| {
        (
            prop::collection::vec(0.0f32..=1.0, s * h * w),
            prop::collection::vec((-1e4f32..1e4, 1e-3f32..1e4), s),
        )
            .prop_map(move |(px, st)| {
                let stats = st.into_iter().map(|(lo, d)| (lo, lo + d)).collect();
                RasterImage::new(s, h, w, px, stats).unwrap()
            })
    })
}

fn plane(side: usize) -> impl Strategy<Value = Tensor<f64>> {
    prop::collection::vec(0.0f64..1.0, side * side).prop_map(move |v| Tensor::from_vec(&[side, side], v).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn msr_roundtrip_is_bitwise(img in raster()) {
        let back = RasterImage::decode(&img.encode()).unwrap();
        prop_assert_eq!(
            back.pixels.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            img.pixels.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
        prop_assert_eq!(back, img);
    }

    #[test]
    fn depth_to_space_inverts_space_to_depth(r in 1usize..4, c in 1usize..3, h in 1usize..5, w in 1usize..5,
                                            seed in any::<u64>()) {
        let mut rng = mose::numerics::Rng::new(seed);
        let x: Tensor<f64> = rng.uniform_tensor(&[2, c, h * r, w * r], -1.0, 1.0);
        let packed = space_to_depth(&x, r).unwrap();
        prop_assert_eq!(packed.shape(), &[2, c * r * r, h, w][..]);
        prop_assert_eq!(depth_to_space(&packed, r).unwrap(), x);
    }

    #[test]
    fn topk_weights_are_a_distribution(logits in prop::collection::vec(-30.0f64..30.0, 2..10), k in 1usize..10,
                                      c in 0.1f64..10.0) {
        let k = k.min(logits.len());
        let (idx, w) = topk_softmax(&logits, k);
        prop_assert_eq!(idx.len(), k);
        prop_assert!(w.iter().all(|&v| v > 0.0));
        prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let mut sorted = idx.clone();
        sorted.sort_unstable();
        sorted.dedup();
        prop_assert_eq!(sorted.len(), k);
        for &i in &idx {
            for j in 0..logits.len() {
                if !idx.contains(&j) {
                    prop_assert!(logits[i] >= logits[j]);
                }
            }
        }
        let scaled: Vec<f64> = logits.iter().map(|v| v * c).collect();
        prop_assert_eq!(topk_softmax(&scaled, k).0, idx);
    }

    #[test]
    fn importance_loss_is_nonnegative_and_order_free(mut imp in prop::collection::vec(0.01f64..5.0, 2..9)) {
        let l = importance_loss(&imp).unwrap();
        prop_assert!(l >= 0.0);
        imp.reverse();
        prop_assert!((importance_loss(&imp).unwrap() - l).abs() < 1e-12);
    }

    #[test]
    fn ssim_is_bounded_and_symmetric(a in plane(14), b in plane(14)) {
        let p = SsimParams::default();
        let ab = ssim_per_channel(&a, &b, &p).unwrap();
        let ba = ssim_per_channel(&b, &a, &p).unwrap();
        prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&ab));
        prop_assert!((ab - ba).abs() < 1e-12);
    }

    #[test]
    fn ncc_is_bounded(a in plane(9), b in plane(9)) {
        let a = a.reshape(&[1, 9, 9]).unwrap();
        let b = b.reshape(&[1, 9, 9]).unwrap();
        let v = ncc_metric(&a, &b).unwrap();
        prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&v));
    }

    #[test]
    fn bicubic_keeps_constants(v in 0.0f64..1.0, h in 2usize..9, w in 2usize..9, up in prop::bool::ANY) {
        let x = Tensor::full(&[2, h * 2, w * 2], v);
        let scale = if up { Ratio::new(2, 1) } else { Ratio::new(1, 2) };
        let y = bicubic_resize(&x, scale).unwrap();
        prop_assert!(y.data().iter().all(|&u| (u - v).abs() < 1e-12));
    }
}

#[test]
fn four_band_64_square_file_size() {
    let img = RasterImage::new(4, 64, 64, vec![0.5; 4 * 64 * 64], vec![(0.0, 1.0); 4]).unwrap();
    assert_eq!(img.encode().len(), 20 + 4 * 8 + 4 * 64 * 64 * 4);
    assert_eq!(img.encode().len(), 65_588);
}
