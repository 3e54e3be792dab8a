use logonet_core::attention::{apply_hybrid, AttentionMode, ChannelAttention, SpatialAttention};
use logonet_core::retrieval::{rank, Gallery};
use logonet_core::training::{triplet_loss, AugmentConfig, AugmentParams};
use logonet_core::{Tape, Tensor};
use proptest::prelude::*;

fn values(n: usize, lo: f32, hi: f32) -> impl Strategy<Value = Vec<f32>> {
    prop::collection::vec(lo..hi, n)
}

/// Small integer-valued coordinates so exact ties actually occur.
fn gallery_strategy() -> impl Strategy<Value = (usize, usize, Vec<f32>, Vec<f32>)> {
    (1usize..30, 1usize..6).prop_flat_map(|(g, d)| {
        let coord = (-3i8..=3).prop_map(f32::from);
        (
            Just(g),
            Just(d),
            prop::collection::vec(coord.clone(), g * d),
            prop::collection::vec(coord, d),
        )
    })
}

proptest! {
    #[test]
    fn ranking_is_a_sorted_permutation_with_stable_ties((g, d, rows, query) in gallery_strategy()) {
        let ids: Vec<String> = (0..g).map(|i| format!("id{i:03}")).collect();
        let gallery = Gallery::new(ids.clone(), Tensor::new(vec![g, d], rows).unwrap(), "p").unwrap();
        let r = rank(&gallery, &query).unwrap();
        let mut seen: Vec<&str> = r.entries.iter().map(|(id, _)| id.as_str()).collect();
        for w in r.entries.windows(2) {
            prop_assert!(w[0].1 <= w[1].1);
            if w[0].1 == w[1].1 {
                prop_assert!(w[0].0 < w[1].0, "tie out of gallery order");
            }
        }
        seen.sort();
        prop_assert_eq!(seen, ids.iter().map(String::as_str).collect::<Vec<_>>());
    }

    #[test]
    fn hybrid_attention_keeps_shape_and_scales_within_bounds(
        (n, c, h, w, x, params) in (1usize..3, 1usize..4, 1usize..6, 1usize..6).prop_flat_map(|(n, half, h, w)| {
            let c = half * 2;
            (Just(n), Just(c), Just(h), Just(w), values(n * c * h * w, -3.0, 3.0), values(2 * half * c + half + c + 19, -1.0, 1.0))
        })
    ) {
        let hidden = c / 2;
        let mut it = params.into_iter();
        let mut take = |k: usize, shape: Vec<usize>| Tensor::new(shape, it.by_ref().take(k).collect()).unwrap();
        let ca = ChannelAttention { w1: take(hidden * c, vec![hidden, c]), b1: take(hidden, vec![hidden]), w2: take(c * hidden, vec![c, hidden]), b2: take(c, vec![c]) };
        let sa = SpatialAttention { weight: take(18, vec![1, 2, 3, 3]), bias: take(1, vec![1]) };
        let mut tape = Tape::<f32>::new();
        let f = tape.constant(Tensor::new(vec![n, c, h, w], x.clone()).unwrap());
        let (ca, sa) = (ca.bind(&mut tape), sa.bind(&mut tape));
        for mode in [AttentionMode::None, AttentionMode::ChannelOnly, AttentionMode::SpatialOnly, AttentionMode::Both] {
            let out = apply_hybrid(&mut tape, f, &ca, &sa, mode).unwrap();
            prop_assert_eq!(tape.shape(out), &[n, c, h, w][..]);
            // masks lie in (0, 1), so every output shrinks its input toward zero
            for (&o, &i) in tape.value(out).data().iter().zip(&x) {
                prop_assert!(o.abs() <= i.abs() && o * i >= 0.0);
            }
        }
    }

    #[test]
    fn triplet_loss_is_a_nonnegative_hinge(
        rows in 1usize..5,
        data in values(3 * 4 * 5, -2.0, 2.0),
        margin in 0.0f64..1.0,
    ) {
        let part = |k: usize| Tensor::from_f64(&[rows, 5], &data[k * 20..k * 20 + rows * 5].iter().map(|&v| v as f64).collect::<Vec<_>>()).unwrap();
        let (a, p, n) = (part(0), part(1), part(2));
        let dist = |x: &Tensor<f64>, y: &Tensor<f64>, r: usize| (0..5).map(|j| (x.data()[r * 5 + j] - y.data()[r * 5 + j]).powi(2)).sum::<f64>().sqrt();
        let want = (0..rows).map(|r| (margin + dist(&a, &p, r) - dist(&a, &n, r)).max(0.0)).sum::<f64>() / rows as f64;
        let mut tape = Tape::<f64>::new();
        let (av, pv, nv) = (tape.constant(a), tape.constant(p), tape.constant(n));
        let l = triplet_loss(&mut tape, av, pv, nv, margin).unwrap();
        let got = tape.value(l).item().unwrap();
        prop_assert!(got >= 0.0);
        prop_assert!((got - want).abs() < 1e-9);
    }

    #[test]
    fn augmentation_keeps_shape_and_value_range(
        size in 8usize..24,
        crop in 0.5f64..=1.0,
        flip in any::<bool>(),
        seed in any::<u64>(),
    ) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f32> = (0..size * size).map(|_| rng.random_range(0.0f32..1.0)).collect();
        let (lo, hi) = data.iter().fold((f32::MAX, f32::MIN), |(l, h), &v| (l.min(v), h.max(v)));
        let image = Tensor::new(vec![1, size, size], data).unwrap();
        let cfg = AugmentConfig { crop_fraction: crop, hflip_prob: if flip { 1.0 } else { 0.0 } };
        let params = AugmentParams::draw(size, &cfg, &mut rng);
        prop_assert!(params.crop_x + params.side <= size && params.crop_y + params.side <= size);
        prop_assert_eq!(params.flip, flip);
        let out = params.apply(&image).unwrap();
        prop_assert_eq!(out.shape(), image.shape());
        // bilinear resampling never leaves the input's value range
        prop_assert!(out.data().iter().all(|&v| v >= lo - 1e-6 && v <= hi + 1e-6));
    }
}
