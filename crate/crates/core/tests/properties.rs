use detcam::data::{decode_ppm, encode_ppm, load_dataset};
use detcam::gradcam::cam_grid;
use detcam::rng::shuffle_permutation;
use detcam::tensor::{bilinear_resize, elementwise, ElementwiseOp};
use detcam::weights::{decode, encode, Record, FLAG_BUFFER, FLAG_TRAINABLE};
use detcam::{DetRng, Tensor};
use proptest::prelude::*;

fn image(h: usize, w: usize, bytes: &[u8]) -> Tensor {
    Tensor::new([h, w, 3], bytes.iter().map(|&b| b as f32).collect()).unwrap()
}

fn sized_bytes() -> impl Strategy<Value = (usize, usize, Vec<u8>)> {
    (1usize..7, 1usize..7).prop_flat_map(|(h, w)| (Just(h), Just(w), proptest::collection::vec(any::<u8>(), h * w * 3)))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn ppm_round_trip((h, w, bytes) in sized_bytes()) {
        let t = image(h, w, &bytes);
        let enc = encode_ppm(&t).unwrap();
        prop_assert_eq!(decode_ppm(&enc).unwrap(), t);
    }

    #[test]
    fn weight_stream_round_trip_and_tamper_detection(
        values in proptest::collection::vec(-1e3f32..1e3, 1..40),
        split in 0usize..40,
        flip in any::<usize>(),
        bit in 0u8..8,
    ) {
        let split = split.min(values.len());
        let mut records = vec![Record {
            id: "a/kernel".into(),
            flags: FLAG_TRAINABLE,
            tensor: Tensor::new([values.len()], values.clone()).unwrap(),
        }];
        if split > 0 {
            records.push(Record {
                id: "b/moving_mean".into(),
                flags: FLAG_BUFFER,
                tensor: Tensor::new([split], values[..split].to_vec()).unwrap(),
            });
        }
        let bytes = encode(&records);
        prop_assert_eq!(&decode(&bytes).unwrap(), &records);
        prop_assert_eq!(encode(&decode(&bytes).unwrap()), bytes.clone());
        let mut bad = bytes.clone();
        let i = flip % bad.len();
        bad[i] ^= 1 << bit;
        prop_assert!(decode(&bad).is_err(), "flip at byte {} accepted", i);
    }

    #[test]
    fn shuffles_are_permutations(seed in any::<u64>(), n in 1usize..300) {
        let mut p = shuffle_permutation(&mut DetRng::new(seed, "p"), n);
        let again = shuffle_permutation(&mut DetRng::new(seed, "p"), n);
        prop_assert_eq!(&p, &again);
        p.sort_unstable();
        prop_assert_eq!(p, (0..n).collect::<Vec<_>>());
    }

    #[test]
    fn rng_replays_from_any_position(seed in any::<u64>(), skip in 0u64..50) {
        let mut a = DetRng::new(seed, "replay");
        for _ in 0..skip {
            a.next_u64();
        }
        let mut b = DetRng::at(seed, "replay", a.counter());
        for _ in 0..5 {
            prop_assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn row_major_flat_index(n in 1usize..3, h in 1usize..4, w in 1usize..4, c in 1usize..4, pick in any::<usize>()) {
        let total = n * h * w * c;
        let flat = pick % total;
        let mut data = vec![0f32; total];
        data[flat] = 1.0;
        let t = Tensor::new([n, h, w, c], data).unwrap();
        let (ni, rest) = (flat / (h * w * c), flat % (h * w * c));
        let (hi, rest) = (rest / (w * c), rest % (w * c));
        let (wi, ci) = (rest / c, rest % c);
        prop_assert_eq!(((ni * h + hi) * w + wi) * c + ci, flat);
        prop_assert_eq!(t.at(&[ni, hi, wi, ci]), 1.0);
    }

    #[test]
    fn resize_and_elementwise_ignore_threads(
        (h, w, bytes) in sized_bytes(),
        oh in 1usize..12,
        ow in 1usize..12,
    ) {
        let t = image(h, w, &bytes);
        let go = |threads| {
            rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap().install(|| {
                let r = bilinear_resize(&t, oh, ow).unwrap();
                let s = elementwise(ElementwiseOp::Mul, &r, Some(&r)).unwrap();
                let e = elementwise(ElementwiseOp::Exp, &s.map(|v| -v / 65025.0), None).unwrap();
                (r, s, e)
            })
        };
        let one = go(1);
        prop_assert_eq!(&one, &go(3));
        prop_assert_eq!(&one, &go(8));
    }

    #[test]
    fn cam_grid_is_scale_covariant(
        acts in proptest::collection::vec(0f32..5.0, 12),
        grads in proptest::collection::vec(-1f32..1.0, 12),
        c in 1e-2f32..1e2,
    ) {
        let a = Tensor::new([2, 3, 2], acts).unwrap();
        let g = Tensor::new([2, 3, 2], grads).unwrap();
        let base = cam_grid(&a, &g).unwrap();
        let scaled = cam_grid(&a.map(|v| v * c), &g).unwrap();
        prop_assert!(base.max_abs_diff(&scaled).unwrap() <= 1e-6);
        prop_assert!(base.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn any_pixel_change_changes_the_digest(
        (h, w, bytes) in sized_bytes(),
        which in any::<usize>(),
        delta in 1u8..=255,
    ) {
        let dir = tempfile::tempdir().unwrap();
        for class in ["a", "b"] {
            std::fs::create_dir(dir.path().join(class)).unwrap();
            std::fs::write(dir.path().join(class).join("x.ppm"), encode_ppm(&image(h, w, &bytes)).unwrap()).unwrap();
        }
        let before = load_dataset(dir.path(), 4).unwrap();
        prop_assert_eq!(&before.digest, &load_dataset(dir.path(), 4).unwrap().digest);
        let mut changed = bytes.clone();
        let i = which % changed.len();
        changed[i] = changed[i].wrapping_add(delta);
        std::fs::write(dir.path().join("b").join("x.ppm"), encode_ppm(&image(h, w, &changed)).unwrap()).unwrap();
        prop_assert_ne!(before.digest, load_dataset(dir.path(), 4).unwrap().digest);
    }
}
