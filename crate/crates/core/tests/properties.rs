use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rdunet::data::{augment, extract_patches, gen_phantom, inference_starts, training_starts, AugmentConfig, PATCH_SLICES};
use rdunet::engine::{overlap_counts, predict_sliding, PatchModel};
use rdunet::eval::{dice_slice, dilate_disk, threshold_mask, BinaryMask};
use rdunet::Tensor;

fn mask(h: usize, w: usize) -> impl Strategy<Value = Vec<u8>> {
    prop::collection::vec(prop::bool::weighted(0.05).prop_map(u8::from), h * w)
}

struct Echo;

impl PatchModel for Echo {
    fn predict_patch(&self, x: &Tensor<f32>) -> rdunet::Result<Tensor<f32>> {
        Ok(x.clone())
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn dilation_is_extensive_and_monotone(a in mask(20, 24), b in mask(20, 24)) {
        let da = dilate_disk(&a, 20, 24);
        prop_assert!(a.iter().zip(&da).all(|(x, y)| x <= y));
        let union: Vec<u8> = a.iter().zip(&b).map(|(x, y)| x | y).collect();
        let du = dilate_disk(&union, 20, 24);
        prop_assert!(da.iter().zip(&du).all(|(x, y)| x <= y));
        // dilation distributes over union
        let db = dilate_disk(&b, 20, 24);
        let joined: Vec<u8> = da.iter().zip(&db).map(|(x, y)| x | y).collect();
        prop_assert_eq!(du, joined);
    }

    #[test]
    fn thresholds_nest(values in prop::collection::vec(0.0f32..1.0, 2 * 4 * 4), lo in 0.05f64..0.5, gap in 0.0f64..0.45) {
        let prob = Tensor::from_vec([2, 4, 4], values).unwrap();
        let a = threshold_mask(&prob, lo).unwrap();
        let b = threshold_mask(&prob, lo + gap).unwrap();
        prop_assert!(a.data().iter().zip(b.data()).all(|(x, y)| y <= x));
    }

    #[test]
    fn dice_is_symmetric_and_bounded(a in mask(6, 6), b in mask(6, 6)) {
        let ab = dice_slice(&a, &b).unwrap();
        prop_assert!((0.0..=1.0).contains(&ab));
        if a.contains(&1) && b.contains(&1) {
            prop_assert_eq!(ab, dice_slice(&b, &a).unwrap());
        }
        prop_assert_eq!(dice_slice(&a, &a).unwrap(), 1.0);
    }

    #[test]
    fn windows_cover_every_slice(d in 8usize..60) {
        let counts = overlap_counts(d);
        prop_assert_eq!(counts.iter().sum::<usize>(), PATCH_SLICES * inference_starts(d).len());
        prop_assert!(counts.iter().all(|&c| (1..=PATCH_SLICES).contains(&c)));
        let starts = training_starts(d);
        prop_assert_eq!(*starts.last().unwrap(), d - PATCH_SLICES);
        prop_assert!(starts.windows(2).all(|w| w[1] > w[0] && w[1] - w[0] <= PATCH_SLICES));
    }

    #[test]
    fn averaging_an_identity_model_returns_the_input(d in 1usize..20, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let img = Tensor::from_fn([d, 8, 8], |_| rand::Rng::random::<f32>(&mut rng));
        let out = predict_sliding(&Echo, &img).unwrap();
        prop_assert!(out.max_abs_diff(&img) < 1e-6);
    }

    #[test]
    fn augmentation_keeps_masks_binary_and_is_seeded(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pair = gen_phantom(&mut rng, "p", [8, 24, 24], 1..=2).unwrap();
        let patch = &extract_patches(&pair, true).unwrap()[0];
        let cfg = AugmentConfig::default();
        let a = augment(patch, &cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let b = augment(patch, &cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        prop_assert_eq!(&a, &b);
        prop_assert!(a.mask.data().iter().all(|&v| v == 0.0 || v == 1.0));
        prop_assert_eq!(a.image.shape(), patch.image.shape());
        prop_assert!(BinaryMask::from_tensor(&a.mask).is_ok());
    }
}
