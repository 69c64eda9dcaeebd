use proptest::prelude::*;
use texrect_core::checkpoint::{Checkpoint, NamedTensor};
use texrect_core::codec::quantize;
use texrect_core::config::{Preset, RunConfig};
use texrect_core::dataset::{Manifest, Record, Split};
use texrect_core::degrade::{degrade, regenerate, DegradeConfig, TransformRecord};
use texrect_core::diffusion::make_schedule;
use texrect_core::geometry::{control_lattice, warp_image, Homography, TpsWarp, Transform};
use texrect_core::mask::{free_form_mask, Mask, MaskParams};
use texrect_core::metrics::{ssim, GramExtractor};
use texrect_core::nn::{mask_batch, Builder};
use texrect_core::rng::stream;
use texrect_core::transformer::{LatentTransformer, TransformerConfig};
use texrect_tensor::{Ctx, ParamStore, Tape, Tensor};

fn image(size: usize) -> impl Strategy<Value = Tensor<f32>> {
    prop::collection::vec(0.0f32..=1.0, 3 * size * size).prop_map(move |d| Tensor::new([3, size, size], d).unwrap())
}

fn pair(size: usize) -> impl Strategy<Value = (Tensor<f32>, Tensor<f32>)> {
    (image(size), image(size))
}

fn permute_channels(t: &Tensor<f32>, p: [usize; 3]) -> Tensor<f32> {
    let hw = t.numel() / 3;
    Tensor::from_fn(t.shape(), |i| t.data()[p[i / hw] * hw + i % hw])
}

fn bool_mask(size: usize) -> impl Strategy<Value = Mask> {
    prop::collection::vec(prop::bool::weighted(0.3), size * size).prop_map(move |v| {
        let mut d: Vec<u8> = v.into_iter().map(u8::from).collect();
        d[0] = 1;
        Mask::from_data(size, size, d).unwrap()
    })
}

fn micro_transformer() -> (LatentTransformer, ParamStore<f32>) {
    let mut store = ParamStore::new();
    let mut rng = stream(0, 0);
    let cfg = TransformerConfig { divisor: 16, ..TransformerConfig::default() };
    let lt = LatentTransformer::new(&mut Builder::new(&mut store, &mut rng), "lt", cfg).unwrap();
    (lt, store)
}

fn layer_masks(mask: &Mask) -> Vec<Tensor<f32>> {
    let (lt, store) = micro_transformer();
    let s = mask.height();
    let tape = Tape::new();
    let ctx = Ctx::inference(&tape, &store);
    let x = Tensor::zeros([1, 3, s, s]);
    lt.forward(&ctx, &x, &mask_batch(&[mask])).unwrap().masks
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn ssim_is_symmetric_and_channel_order_free((a, b) in pair(16), p in Just([2usize, 0, 1]).prop_union(Just([1, 2, 0]))) {
        let ab = ssim(&a, &b).unwrap();
        prop_assert_eq!(ab, ssim(&b, &a).unwrap());
        prop_assert!((-1.0..=1.0).contains(&ab));
        let pp = ssim(&permute_channels(&a, p), &permute_channels(&b, p)).unwrap();
        prop_assert!((pp - ab).abs() < 1e-12, "{} vs {}", pp, ab);
        prop_assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn gram_distance_is_a_symmetric_premetric((a, b) in pair(16), seed in 0u64..4) {
        let g = GramExtractor::new(seed);
        let ab = g.distance(&a, &b).unwrap();
        prop_assert!(ab >= 0.0);
        prop_assert_eq!(ab, g.distance(&b, &a).unwrap());
        prop_assert_eq!(g.distance(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn quantization_is_idempotent(book in prop::collection::vec(-2.0f64..2.0, 4 * 3), z in prop::collection::vec(-3.0f64..3.0, 2 * 3 * 2 * 2)) {
        let book = Tensor::new([4, 3], book).unwrap();
        let z = Tensor::new([2, 3, 2, 2], z).unwrap();
        let (i1, q1) = quantize(&book, &z);
        let (i2, q2) = quantize(&book, &q1);
        prop_assert_eq!(i1, i2);
        prop_assert_eq!(q1.data(), q2.data());
    }

    #[test]
    fn schedules_are_monotone(t in 2usize..400, lo in 1e-5f64..0.05, span in 0.0f64..0.5) {
        let s = make_schedule(t, lo, (lo + span).min(0.9)).unwrap();
        for i in 1..=t {
            prop_assert!(s.beta[i] > 0.0 && s.beta[i] < 1.0);
            prop_assert!(s.alpha_bar[i] < s.alpha_bar[i - 1]);
            prop_assert!(s.alpha_bar[i].sqrt() > 0.0 && s.alpha_bar[i].sqrt() < 1.0);
            if i > 1 {
                prop_assert!(s.beta[i] >= s.beta[i - 1]);
            }
        }
    }

    #[test]
    fn tps_hits_its_control_points(d in prop::collection::vec(-0.15f64..0.15, 32)) {
        let src = control_lattice(4);
        let dst: Vec<_> = src.iter().enumerate().map(|(i, &(x, y))| (x + d[2 * i], y + d[2 * i + 1])).collect();
        let tps = TpsWarp::fit(src.clone(), dst.clone()).unwrap();
        for (s, t) in src.iter().zip(&dst) {
            let p = tps.apply(*s);
            prop_assert!((p.0 - t.0).abs() < 1e-6 && (p.1 - t.1).abs() < 1e-6);
        }
        let id = TpsWarp::fit(src.clone(), src.clone()).unwrap();
        prop_assert!((id.apply((0.37, 0.81)).0 - 0.37).abs() < 1e-9);
    }

    #[test]
    fn homography_fits_and_inverts(d in prop::collection::vec(-0.2f64..0.2, 8)) {
        let src = [(0.0, 0.0), (1.0, 0.0), (1.0, 1.0), (0.0, 1.0)];
        let mut dst = src;
        for (i, p) in dst.iter_mut().enumerate() {
            p.0 += d[2 * i];
            p.1 += d[2 * i + 1];
        }
        let h = Homography::from_correspondences(&src, &dst).unwrap();
        let inv = h.inverse().unwrap();
        for (s, t) in src.iter().zip(&dst) {
            let p = h.apply(*s);
            prop_assert!((p.0 - t.0).abs() < 1e-9 && (p.1 - t.1).abs() < 1e-9);
            let q = inv.apply(p);
            prop_assert!((q.0 - s.0).abs() < 1e-9 && (q.1 - s.1).abs() < 1e-9);
        }
    }

    #[test]
    fn identity_warps_are_fixed_points(img in image(12), m in bool_mask(12)) {
        for t in [Transform::Homography(Homography::identity()), Transform::Tps(TpsWarp::identity(control_lattice(3)))] {
            // occluded pixels come back zeroed, everything else untouched
            let (out, valid) = warp_image(&img, &t, Some(&m)).unwrap();
            let expect = m.apply(&img).unwrap();
            prop_assert_eq!(out.data(), expect.data());
            prop_assert_eq!(valid.data(), m.data());
        }
    }

    #[test]
    fn mask_intersection_is_binary_and_a_subset(a in bool_mask(10), b in bool_mask(10)) {
        let c = a.intersect(&b).unwrap();
        for i in 0..100 {
            let v = c.data()[i];
            prop_assert!(v <= 1);
            prop_assert_eq!(v == 1, a.data()[i] == 1 && b.data()[i] == 1);
        }
        let bytes = {
            let dir = tempfile::tempdir().unwrap();
            let p = dir.path().join("m.png");
            c.save(&p).unwrap();
            std::fs::read(&p).unwrap()
        };
        prop_assert_eq!(Mask::decode_png(&bytes).unwrap(), c);
    }

    #[test]
    fn free_form_masks_are_binary_with_some_valid_pixels(seed in any::<u64>(), side in 16usize..48) {
        let m = free_form_mask(side, side, &MaskParams::default(), &mut stream(seed, 0)).unwrap().mask;
        prop_assert!(m.data().iter().all(|&v| v <= 1));
        prop_assert!(m.valid_count() > 0);
    }

    #[test]
    fn config_text_round_trips(seed in any::<u64>(), size in prop::sample::select(vec![32usize, 64, 128]),
                               lr in 1e-7f64..1e-2, steps in 1usize..100_000, p in 0.0f64..1.0) {
        let mut c = RunConfig::preset(Preset::Desk);
        c.seed = seed;
        c.size = size;
        c.train.lr = lr;
        c.train.steps = steps;
        c.diffusion.p_uncond = p;
        let back = RunConfig::parse(&c.to_text()).unwrap();
        prop_assert_eq!(back.fingerprint(), c.fingerprint());
        prop_assert_eq!(back, c);
    }

    #[test]
    fn manifest_text_round_trips(recs in prop::collection::vec(
        (0usize..3, "[a-z0-9-]{1,12}", "[A-Za-z0-9_. -]{1,16}", any::<u64>(), 0.0f64..1.0, 0.0f64..1.0, any::<bool>(), any::<bool>()),
        0..12,
    )) {
        let records: Vec<Record> = recs
            .into_iter()
            .enumerate()
            .map(|(i, (sp, id, src, seed, h, t, ha, ta))| Record {
                split: Split::ALL[sp],
                id: format!("{id}{i}"),
                source: format!("{}x", src.trim()),
                transform: TransformRecord { seed, s_hmg: h, s_tps: t, hmg_applied: ha, tps_applied: ta },
            })
            .collect();
        let m = Manifest { fingerprint: "ab12".into(), size: 64, records, skipped: vec![("bad.png".into(), "too small".into())] };
        prop_assert_eq!(Manifest::parse(&m.to_text()).unwrap(), m);
    }

    #[test]
    fn checkpoints_round_trip_bit_exactly(vals in prop::collection::vec(any::<u32>(), 1..64), split in 1usize..8) {
        let n = vals.len();
        let a = split.min(n);
        let data: Vec<f32> = vals.iter().map(|&b| f32::from_bits(b)).collect();
        let ck = Checkpoint {
            fingerprint: "f".into(),
            config: "run.seed = 1\n".into(),
            meta: vec![("stage".into(), "codec".into())],
            params: vec![
                NamedTensor { name: "a".into(), value: Tensor::new([a], data[..a].to_vec()).unwrap() },
                NamedTensor { name: "b".into(), value: Tensor::new([n - a], data[a..].to_vec()).unwrap() },
            ],
            optim: None,
            rng: None,
        };
        let back = Checkpoint::decode(&ck.encode()).unwrap();
        let bits = |c: &Checkpoint| c.params.iter().flat_map(|p| p.value.data().iter().map(|v| v.to_bits())).collect::<Vec<_>>();
        prop_assert_eq!(bits(&back), vals);
        prop_assert_eq!(back.encode(), ck.encode());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn degraded_samples_regenerate_from_their_record(seed in any::<u64>()) {
        let planar = Tensor::from_fn([3, 32, 32], |i| ((i * 17 % 29) as f32) / 28.0);
        let cfg = DegradeConfig::default();
        let s = degrade(&planar, "src", &cfg, seed).unwrap();
        let r = regenerate(&planar, "src", &cfg, &s.record).unwrap();
        prop_assert_eq!(s.degraded.data(), r.degraded.data());
        prop_assert_eq!(&s.mask, &r.mask);
        prop_assert!(s.mask.valid_fraction() >= 0.05);
        let hw = 32 * 32;
        for (i, v) in s.degraded.data().iter().enumerate() {
            if s.mask.data()[i % hw] == 0 {
                prop_assert_eq!(*v, 0.0);
            }
        }
    }

    #[test]
    fn layer_masks_grow_monotonically(m in bool_mask(32).prop_map(|m| {
        // sparsify so growth is visible
        let d = m.data().iter().enumerate().map(|(i, &v)| if i % 7 == 0 { v } else { 0 }).collect();
        Mask::from_data(32, 32, d).unwrap()
    })) {
        let layers = TransformerConfig::default().layers();
        let masks = layer_masks(&m);
        let mut prev: Vec<f32> = m.data().iter().map(|&v| v as f32).collect();
        let mut side = 32;
        let mut frac = m.valid_fraction();
        for (mk, &(_, stride)) in masks.iter().zip(&layers) {
            let out_side = mk.shape()[2];
            prop_assert_eq!(out_side, side / stride);
            for y in 0..out_side {
                for x in 0..out_side {
                    let v = mk.data()[y * out_side + x];
                    prop_assert!(v == 0.0 || v == 1.0);
                    prop_assert!(v >= prev[(y * stride) * side + x * stride]);
                }
            }
            let f = mk.data().iter().sum::<f32>() as f64 / (out_side * out_side) as f64;
            prop_assert!(f >= frac);
            frac = f;
            prev = mk.data().to_vec();
            side = out_side;
        }
    }

    #[test]
    fn centred_quarter_squares_saturate_the_last_mask(size in prop::sample::select(vec![32usize, 64]), extra in 0usize..8) {
        let side = size / 4 + extra;
        let lo = (size - side) / 2;
        let mut m = Mask::zeros(size, size);
        for y in lo..lo + side {
            for x in lo..lo + side {
                m.set(y, x, true);
            }
        }
        let last = layer_masks(&m).pop().unwrap();
        prop_assert!(last.data().iter().all(|&v| v == 1.0));
    }
}
