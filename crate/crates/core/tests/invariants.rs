//! Property tests for the structural invariants of units, layers, nets and
//! metrics.

use coda_core::data::{parse_idx_images, parse_idx_labels, write_idx, LabeledImageSet};
use coda_core::dau::{DauParams, RescaleKind};
use coda_core::decomposition::{effective_row, AttributionMethod, SpatialContributionMap};
use coda_core::metrics::{localisation_score, pixel_removal_curve, GridTask, RemovalOrder};
use coda_core::net::{six_channel, CodaConvLayer, CodaNet, EncodingKind, LayerSpec, NetConfig};
use coda_core::{Real, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn kind_strategy() -> impl Strategy<Value = RescaleKind> {
    prop_oneof![Just(RescaleKind::L2), Just(RescaleKind::Sq), Just(RescaleKind::Wb)]
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn small_net(kind: RescaleKind, encoding: EncodingKind, seed: u64) -> CodaNet {
    let mut cfg = NetConfig::default_for(1, 9, 9, 3, kind);
    cfg.encoding = encoding;
    cfg.embed_channels = 3;
    cfg.layers = vec![
        LayerSpec { kernel: 3, stride: 1, padding: 0, rank: 3, out_channels: 4 },
        LayerSpec { kernel: 3, stride: 1, padding: 1, rank: 3, out_channels: 3 },
    ];
    let mut net = CodaNet::new(cfg, seed).unwrap();
    let mut r = rng(seed);
    let calib: Vec<Tensor> = (0..4).map(|_| Tensor::uniform(&[1, 9, 9], 1.0, &mut r)).collect();
    net.calibrate(&calib).unwrap();
    net
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn unit_output_and_weight_are_bounded(
        kind in kind_strategy(),
        d in 2usize..24,
        r_frac in 0.0f64..1.0,
        log_scale in -4.0f64..4.0,
        seed in any::<u64>(),
    ) {
        let r = 1 + ((d - 1) as f64 * r_frac) as usize;
        let mut g = rng(seed);
        let s = 10f64.powf(log_scale) as Real;
        let a = Tensor::randn(&[d, r], &mut g).scaled(s);
        let b = Tensor::randn(&[r, d], &mut g);
        let bias = kind.allows_bias().then(|| Tensor::randn(&[d], &mut g));
        let unit = DauParams::new(a, b, bias, kind).unwrap();
        let x = Tensor::randn(&[d], &mut g).scaled(1.0 / s);
        let out = unit.output(x.data()).unwrap();
        let w = unit.weight(x.data()).unwrap();
        prop_assert!(out.abs() <= x.norm() * (1.0 + 1e-9));
        prop_assert!(w.iter().map(|v| v * v).sum::<Real>().sqrt() <= 1.0 + 1e-9);
        let linear: Real = w.iter().zip(x.data()).map(|(w, x)| w * x).sum();
        prop_assert!((linear - out).abs() <= 1e-9 * x.norm().max(1.0));
    }

    #[test]
    fn unit_weight_ignores_input_scale(
        kind in prop_oneof![Just(RescaleKind::L2), Just(RescaleKind::Wb)],
        d in 2usize..16,
        c in 0.01f64..100.0,
        seed in any::<u64>(),
    ) {
        // Without bias the L2 and WB weights depend only on the direction of x,
        // so the unit is positively homogeneous.
        let mut g = rng(seed);
        let unit = DauParams::init(d, (d / 2).max(1), kind, &mut g).unwrap();
        let unit = DauParams::new(unit.a().clone(), unit.b().clone(), None, kind).unwrap();
        let x = Tensor::randn(&[d], &mut g);
        let w1 = unit.weight(x.data()).unwrap();
        let w2 = unit.weight(x.scaled(c as Real).data()).unwrap();
        for (a, b) in w1.iter().zip(&w2) {
            prop_assert!((a - b).abs() <= 1e-9);
        }
        let o1 = unit.output(x.data()).unwrap();
        let o2 = unit.output(x.scaled(c as Real).data()).unwrap();
        prop_assert!((o2 - c as Real * o1).abs() <= 1e-9 * (1.0 + o2.abs()));
    }

    #[test]
    fn six_channel_pairs_sum_to_one(c in 1usize..4, h in 1usize..6, w in 1usize..6, seed in any::<u64>()) {
        let mut g = rng(seed);
        let x = Tensor::uniform(&[1, c, h, w], 1.0, &mut g).map(|v| v.abs());
        let e = six_channel(&x).unwrap();
        prop_assert_eq!(e.shape(), &[1, 2 * c, h, w][..]);
        for ch in 0..c {
            for y in 0..h {
                for xx in 0..w {
                    prop_assert_eq!(e.at(&[0, ch, y, xx]) + e.at(&[0, ch + c, y, xx]), 1.0);
                }
            }
        }
    }

    #[test]
    fn layer_output_norm_is_bounded_by_patch_overlap(
        kind in kind_strategy(),
        cin in 1usize..4,
        k in 1usize..5,
        kernel in 1usize..4,
        stride in 1usize..3,
        padding in 0usize..2,
        seed in any::<u64>(),
    ) {
        let mut g = rng(seed);
        let layer = CodaConvLayer::init(cin, k, (kernel, kernel), stride, padding, 2, kind, false, &mut g).unwrap();
        let x = Tensor::randn(&[cin, 7, 7], &mut g);
        let y = layer.forward(&x).unwrap();
        let overlap = kernel.div_ceil(stride).pow(2);
        let bound = ((k * overlap) as Real).sqrt() * x.norm();
        prop_assert!(y.norm() <= bound * (1.0 + 1e-9));
    }

    #[test]
    fn logits_are_temperature_equivariant(
        kind in kind_strategy(),
        embed in any::<bool>(),
        t in 0.1f64..1000.0,
        seed in 0u64..1000,
    ) {
        let encoding = if embed { EncodingKind::Embed } else { EncodingKind::Six };
        let mut net = small_net(kind, encoding, seed);
        let x = Tensor::uniform(&[1, 1, 9, 9], 1.0, &mut rng(seed + 1)).map(|v| v.abs());
        let b0 = net.output_bias();
        let scaled = |net: &CodaNet| -> Vec<Real> {
            let l = net.logits(&x).unwrap();
            l.data().iter().zip(&b0).map(|(v, b)| (v - b) * net.temperature()).collect()
        };
        let before = scaled(&net);
        net.set_temperature(t as Real).unwrap();
        let after = scaled(&net);
        for (a, b) in before.iter().zip(&after) {
            prop_assert!((a - b).abs() <= 1e-9 * (1.0 + a.abs()));
        }
    }

    #[test]
    fn contributions_reconstruct_the_logit(
        kind in kind_strategy(),
        embed in any::<bool>(),
        class in 0usize..3,
        depth in 0usize..2,
        seed in 0u64..1000,
    ) {
        let encoding = if embed { EncodingKind::Embed } else { EncodingKind::Six };
        let net = small_net(kind, encoding, seed);
        let x = Tensor::uniform(&[1, 9, 9], 1.0, &mut rng(seed + 2)).map(|v| v.abs());
        let dec = effective_row(&net, &x, class, depth).unwrap();
        prop_assert!(dec.relative_error() <= 1e-5);
        let map = dec.spatial().unwrap();
        prop_assert!((map.sum() - dec.contribution_sum()).abs() <= 1e-9 * (1.0 + dec.contribution_sum().abs()));
    }

    #[test]
    fn localisation_is_a_share_and_scale_invariant(
        n in 1usize..4,
        c in 0.001f64..1000.0,
        seed in any::<u64>(),
    ) {
        let mut g = rng(seed);
        let tile = 3;
        let side = n * tile;
        let blank = Tensor::zeros(&[1, tile, tile]);
        let tiles: Vec<(usize, usize)> = (0..n * n).map(|i| (i, i)).collect();
        let grid = GridTask::from_images(n, &vec![&blank; n * n], tiles).unwrap();
        let values: Vec<Real> = Tensor::randn(&[side * side], &mut g).into_data();
        let map = SpatialContributionMap::new(side, side, values.clone()).unwrap();
        let scaled = SpatialContributionMap::new(side, side, values.iter().map(|v| v * c as Real).collect()).unwrap();
        for class in 0..n * n {
            let s = localisation_score(&map, &grid, class).unwrap();
            prop_assert!((0.0..=1.0).contains(&s));
            let s2 = localisation_score(&scaled, &grid, class).unwrap();
            prop_assert!((s - s2).abs() <= 1e-12);
        }
    }

    #[test]
    fn idx_round_trip(count in 1usize..6, h in 1usize..6, w in 1usize..6, seed in any::<u64>()) {
        let mut g = rng(seed);
        let images: Vec<Tensor> = (0..count)
            .map(|_| Tensor::uniform(&[1, h, w], 1.0, &mut g).map(|v| (v.abs() * 255.0).round() / 255.0))
            .collect();
        let labels: Vec<usize> = (0..count).map(|i| i % 10).collect();
        let set = LabeledImageSet::new(images, labels, 10, "prop").unwrap();
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = (dir.path().join("i.idx"), dir.path().join("l.idx"));
        write_idx(&set, &ip, &lp).unwrap();
        let back = parse_idx_images(&std::fs::read(&ip).unwrap()).unwrap();
        let back_labels = parse_idx_labels(&std::fs::read(&lp).unwrap()).unwrap();
        prop_assert_eq!(back, set.images);
        prop_assert_eq!(back_labels, set.labels);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn serialization_round_trip_preserves_logits(kind in kind_strategy(), embed in any::<bool>(), seed in 0u64..1000) {
        let encoding = if embed { EncodingKind::Embed } else { EncodingKind::Six };
        let net = small_net(kind, encoding, seed);
        let back = CodaNet::from_bytes(&net.to_bytes()).unwrap();
        let x = Tensor::uniform(&[2, 1, 9, 9], 1.0, &mut rng(seed)).map(|v| v.abs());
        prop_assert_eq!(net.logits(&x).unwrap(), back.logits(&x).unwrap());
        prop_assert_eq!(back.config, net.config);
    }

    #[test]
    fn removal_curve_starts_at_unmodified_confidence(kind in kind_strategy(), seed in 0u64..1000) {
        let net = small_net(kind, EncodingKind::Six, seed);
        let mut g = rng(seed);
        let images: Vec<Tensor> = (0..3).map(|_| Tensor::uniform(&[1, 9, 9], 1.0, &mut g).map(|v| v.abs())).collect();
        let targets = vec![0, 1, 2];
        let curve = pixel_removal_curve(&net, &images, &targets, AttributionMethod::Inherent, RemovalOrder::LeastFirst, &[0.0, 1.0], seed)
            .unwrap();
        let sigmoid = |v: Real| 1.0 / (1.0 + (-v).exp());
        let fresh: Real = images
            .iter()
            .zip(&targets)
            .map(|(x, &t)| sigmoid(net.logits(x).unwrap().at(&[0, t])))
            .sum::<Real>()
            / 3.0;
        prop_assert!((curve.mean_confidence[0] - fresh).abs() <= 1e-12);
    }
}
