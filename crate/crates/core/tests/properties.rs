use prnufuse_core::camsim::derive_seed;
use prnufuse_core::imaging::{
    decode_pnm, encode_pnm, BinaryMask, BlockRef, GrayImage, Image, RgbImage,
};
use prnufuse_core::localize::{aggregate, confusion, opening, roc_auc, window_grid, Aggregation};
use prnufuse_core::nnet::{softmax, LayerSpec, NetModel, Tensor};
use prnufuse_core::prnu::{estimate_fingerprint, pearson, FingerprintOptions};
use prnufuse_core::wavelet::{dwt2, idwt2, wiener_shrink, NoiseResidual};
use proptest::prelude::*;

fn rms(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x * x, n + 1));
    (s / n as f64).sqrt()
}

fn gray(max_side: usize) -> impl Strategy<Value = GrayImage> {
    (1..=max_side, 1..=max_side).prop_flat_map(|(w, h)| {
        prop::collection::vec(0u8..=255, w * h).prop_map(move |d| {
            GrayImage::new(w, h, d.into_iter().map(f64::from).collect()).unwrap()
        })
    })
}

fn rgb(max_side: usize) -> impl Strategy<Value = RgbImage> {
    (1..=max_side, 1..=max_side).prop_flat_map(|(w, h)| {
        prop::collection::vec(0u8..=255, w * h * 3)
            .prop_map(move |d| RgbImage::new(w, h, d.into_iter().map(f64::from).collect()).unwrap())
    })
}

fn mask(side: usize) -> impl Strategy<Value = BinaryMask> {
    prop::collection::vec(prop::bool::weighted(0.5), side * side).prop_map(move |d| {
        BinaryMask::new(side, side, d.into_iter().map(u8::from).collect()).unwrap()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn pnm_roundtrip_is_exact(g in gray(20), c in rgb(20)) {
        for img in [Image::Gray(g), Image::Rgb(c)] {
            let back = decode_pnm(&encode_pnm(&img)).unwrap();
            prop_assert_eq!(back, img);
        }
    }

    #[test]
    fn crop_only_reuses_source_values(img in gray(24), r in 0usize..24, c in 0usize..24, size in 1usize..12) {
        prop_assume!(r + size <= img.height() && c + size <= img.width());
        let crop = img.crop(&BlockRef::new(r, c, 0, size)).unwrap();
        let mut pool: Vec<u64> = img.data().iter().map(|v| v.to_bits()).collect();
        pool.sort_unstable();
        for v in crop.data() {
            let i = pool.binary_search(&v.to_bits());
            prop_assert!(i.is_ok());
            pool.remove(i.unwrap());
        }
    }

    #[test]
    fn luma_is_monotone_per_channel(px in prop::array::uniform3(0.0f64..250.0), ch in 0usize..3, bump in 0.0f64..5.0) {
        let a = RgbImage::new(1, 1, px.to_vec()).unwrap();
        let mut up = px;
        up[ch] += bump;
        let b = RgbImage::new(1, 1, up.to_vec()).unwrap();
        prop_assert!(b.to_gray().data()[0] >= a.to_gray().data()[0]);
    }

    #[test]
    fn wavelet_reconstructs_any_aligned_size(wk in 1usize..4, hk in 1usize..4, seed in any::<u64>()) {
        let (w, h) = (16 * wk, 16 * hk);
        let mut state = seed | 1;
        let img = GrayImage::from_fn(w, h, |_, _| {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            (state % 2560) as f64 / 10.0
        });
        let pyr = dwt2(&img, 4).unwrap();
        prop_assert_eq!(pyr.coefficient_count(), w * h);
        let back = idwt2(&pyr);
        let err = rms(img.data().iter().zip(&back).map(|(a, b)| a - b));
        prop_assert!(err < 1e-9 * rms(img.data().iter().copied()).max(1e-300));
    }

    #[test]
    fn shrinkage_never_grows_a_coefficient(img in gray(40), sigma0 in 0.5f64..20.0) {
        prop_assume!(img.width() >= 16 && img.height() >= 16);
        let w = img.width() / 16 * 16;
        let h = img.height() / 16 * 16;
        let img = img.crop(&BlockRef::new(0, 0, 0, w.min(h))).unwrap();
        let pyr = dwt2(&img, 4).unwrap();
        let out = wiener_shrink(&pyr, sigma0);
        for (a, b) in pyr.details.iter().zip(&out.details) {
            for (x, y) in [(&a.hl, &b.hl), (&a.lh, &b.lh), (&a.hh, &b.hh)] {
                for (u, v) in x.data.iter().zip(&y.data) {
                    prop_assert!(v.abs() <= u.abs());
                }
            }
        }
        prop_assert_eq!(&out.ll, &pyr.ll);
    }

    #[test]
    fn correlation_is_symmetric_and_affine_invariant(
        a in prop::collection::vec(-10.0f64..10.0, 8..64),
        scale in 0.01f64..100.0,
        shift in -50.0f64..50.0,
    ) {
        let b: Vec<f64> = a.iter().enumerate().map(|(i, v)| v * v - (i as f64).sin()).collect();
        let ab = pearson(&a, &b);
        prop_assume!(!ab.degenerate);
        prop_assert!(ab.rho.abs() <= 1.0 + 1e-12);
        prop_assert!((ab.rho - pearson(&b, &a).rho).abs() < 1e-12);
        let moved: Vec<f64> = a.iter().map(|v| v * scale + shift).collect();
        prop_assert!((pearson(&moved, &b).rho - ab.rho).abs() < 1e-9);
    }

    #[test]
    fn replicated_pairs_leave_the_fingerprint_unchanged(
        img in prop::collection::vec(1.0f64..255.0, 36),
        res in prop::collection::vec(-5.0f64..5.0, 36),
        k in 2usize..6,
    ) {
        let g = GrayImage::new(6, 6, img).unwrap();
        let n = NoiseResidual::new(6, 6, res).unwrap();
        let one = estimate_fingerprint(std::slice::from_ref(&g), std::slice::from_ref(&n), "d", FingerprintOptions::raw()).unwrap();
        let many = estimate_fingerprint(&vec![g; k], &vec![n; k], "d", FingerprintOptions::raw()).unwrap();
        for (a, b) in one.data().iter().zip(many.data()) {
            prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1e-12));
        }
        prop_assert_eq!(many.num_images(), k);
    }

    #[test]
    fn softmax_ignores_a_common_offset(x in prop::collection::vec(-30.0f64..30.0, 2..8), c in -100.0f64..100.0) {
        let p = softmax(&x);
        let shifted: Vec<f64> = x.iter().map(|v| v + c).collect();
        for (a, b) in p.iter().zip(softmax(&shifted)) {
            prop_assert!((a - b).abs() < 1e-12);
        }
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn network_bytes_roundtrip_and_inference_agrees(seed in any::<u64>(), input in prop::collection::vec(-1.0f64..1.0, 2 * 8 * 8)) {
        let layers = vec![
            LayerSpec::Conv3x3 { in_channels: 2, out_channels: 3, stride: 1 },
            LayerSpec::Relu,
            LayerSpec::MaxPool2,
            LayerSpec::Fc { inputs: 3 * 4 * 4, outputs: 2 },
            LayerSpec::Softmax,
        ];
        let net = NetModel::new(vec![2, 8, 8], layers, seed).unwrap();
        let back = NetModel::from_bytes(&net.to_bytes()).unwrap();
        let x = Tensor::new(vec![2, 8, 8], input).unwrap();
        prop_assert_eq!(net.forward(&x).unwrap(), back.forward(&x).unwrap());
        prop_assert_eq!(net.to_bytes(), back.to_bytes());
    }

    #[test]
    fn opening_is_idempotent(m in mask(24), radius in 1usize..4) {
        let once = opening(&m, radius);
        prop_assert_eq!(opening(&once, radius), once.clone());
        // Opening is anti-extensive.
        for (o, v) in once.data().iter().zip(m.data()) {
            prop_assert!(o <= v);
        }
    }

    #[test]
    fn confusion_ignores_pixel_order(pred in mask(12), truth in mask(12), seed in any::<u64>()) {
        let c = confusion(&pred, &truth).unwrap();
        prop_assert_eq!(c.total(), 144);
        let mut perm: Vec<usize> = (0..144).collect();
        let mut s = seed | 1;
        for i in (1..perm.len()).rev() {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            perm.swap(i, (s >> 33) as usize % (i + 1));
        }
        let shuffle = |m: &BinaryMask| {
            BinaryMask::new(12, 12, perm.iter().map(|&i| m.data()[i]).collect()).unwrap()
        };
        prop_assert_eq!(confusion(&shuffle(&pred), &shuffle(&truth)).unwrap(), c);
    }

    #[test]
    fn mean_map_stays_between_covering_windows(scores in prop::collection::vec(0.0f64..1.0, 25), stride in 4usize..9) {
        let (side, window) = (40, 16);
        let blocks = window_grid(side, side, window, stride);
        let windows: Vec<(BlockRef, f64)> = blocks.iter().zip(scores.iter().cycle()).map(|(b, s)| (*b, *s)).collect();
        let map = aggregate(side, side, &windows, Aggregation::Mean, stride).unwrap();
        for r in 0..side {
            for c in 0..side {
                let cover: Vec<f64> = windows
                    .iter()
                    .filter(|(b, _)| (b.row..b.row + window).contains(&r) && (b.col..b.col + window).contains(&c))
                    .map(|w| w.1)
                    .collect();
                if cover.is_empty() {
                    continue;
                }
                let v = map.data()[r * side + c];
                let lo = cover.iter().copied().fold(f64::INFINITY, f64::min);
                let hi = cover.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                prop_assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
            }
        }
    }

    #[test]
    fn auc_matches_pair_counting(pts in prop::collection::vec((0u8..12, any::<bool>()), 2..200)) {
        let scores: Vec<(f64, bool)> = pts.iter().map(|&(s, l)| (f64::from(s), l)).collect();
        let pos: Vec<f64> = scores.iter().filter(|p| p.1).map(|p| p.0).collect();
        let neg: Vec<f64> = scores.iter().filter(|p| !p.1).map(|p| p.0).collect();
        prop_assume!(!pos.is_empty() && !neg.is_empty());
        let mut wins = 0.0;
        for p in &pos {
            for n in &neg {
                wins += if p > n { 1.0 } else if p == n { 0.5 } else { 0.0 };
            }
        }
        let want = wins / (pos.len() * neg.len()) as f64;
        prop_assert!((roc_auc(&scores).unwrap() - want).abs() <= 1e-12);
    }

    #[test]
    fn derived_seeds_are_pure(seed in any::<u64>(), idx in any::<u64>()) {
        prop_assert_eq!(derive_seed(seed, "stage", idx), derive_seed(seed, "stage", idx));
        prop_assert_ne!(derive_seed(seed, "stage", idx), derive_seed(seed, "other", idx));
    }
}
