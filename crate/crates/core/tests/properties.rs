use fasternam::blocks::{pconv_metered, PConvSpec};
use fasternam::init::seeded_rng;
use fasternam::metrics::{evaluate, iou, match_detections, BBox, Detection, GroundTruth};
use fasternam::nam::{nam_channel, nam_spatial, nam_weights, NamChannelParams, NamSpatialParams};
use fasternam::ops::{batchnorm, conv2d, conv2d_metered, BNParams, ConvSpec, FlopCounter};
use fasternam::{Shape, Tensor4};
use proptest::prelude::*;

#[test]
fn pconv_cost_is_square_of_partial_ratio() {
    let mut rng = seeded_rng(1);
    for k in [1, 3, 5] {
        for c in 1..=64 {
            let x = Tensor4::random_uniform(Shape::new(1, c, 1, 1), -1.0, 1.0, &mut rng);
            let full = ConvSpec::same(c, c, k);
            let mut full_count = FlopCounter::new();
            conv2d_metered(
                &x,
                &Tensor4::zeros(full.kernel_shape()),
                &vec![0.0; c],
                &full,
                &mut full_count,
            )
            .unwrap();
            for c_p in 1..=c {
                let spec = PConvSpec::new(c, c_p, k).unwrap();
                let mut count = FlopCounter::new();
                pconv_metered(&x, &Tensor4::zeros(spec.weight_shape()), &spec, &mut count).unwrap();
                // Compare count * c^2 == full * c_p^2 in integers.
                assert_eq!(
                    count.count * (c * c) as u64,
                    full_count.count * (c_p * c_p) as u64
                );
            }
        }
    }
}

fn tensor(shape: Shape, seed: u64) -> Tensor4 {
    Tensor4::random_uniform(shape, -2.0, 2.0, &mut seeded_rng(seed))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn conv_is_linear_in_input(seed in 0u64..10_000, a in -3.0f64..3.0, b in -3.0f64..3.0,
                               c_in in 1usize..4, c_out in 1usize..4, k in 1usize..4, s in 1usize..3) {
        let spec = ConvSpec::new(c_in, c_out, k, s, k / 2);
        let shape = Shape::new(2, c_in, 5, 6);
        let x = tensor(shape, seed);
        let y = tensor(shape, seed + 1);
        let w = tensor(spec.kernel_shape(), seed + 2);
        let zero = vec![0.0; c_out];
        let lhs = conv2d(&x.scale(a).add(&y.scale(b)).unwrap(), &w, &zero, &spec).unwrap();
        let rhs = conv2d(&x, &w, &zero, &spec).unwrap().scale(a)
            .add(&conv2d(&y, &w, &zero, &spec).unwrap().scale(b)).unwrap();
        prop_assert!(lhs.max_abs_diff(&rhs) < 1e-10);
    }

    #[test]
    fn batchnorm_training_output_has_unit_moments(seed in 0u64..10_000, n in 2usize..5, c in 1usize..4) {
        let x = tensor(Shape::new(n, c, 3, 4), seed).map(|v| 5.0 * v + 3.0);
        let mut p = BNParams::identity(c);
        p.eps = 1e-12;
        let (y, _) = batchnorm(&x, &p, true).unwrap();
        let m = (n * 12) as f64;
        for ch in 0..c {
            let vals: Vec<f64> = (0..n).flat_map(|i| y.plane(i, ch).to_vec()).collect();
            let mean = vals.iter().sum::<f64>() / m;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / m;
            prop_assert!(mean.abs() < 1e-9);
            prop_assert!((var - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn nam_weights_are_scale_invariant(g in prop::collection::vec(-5.0f64..5.0, 1..32), k in 0.01f64..100.0) {
        prop_assume!(g.iter().any(|v| v.abs() > 1e-6));
        let w = nam_weights(&g).unwrap();
        prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        let scaled: Vec<f64> = g.iter().map(|v| v * k).collect();
        for (a, b) in w.iter().zip(nam_weights(&scaled).unwrap()) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn nam_gates_are_bounded(seed in 0u64..10_000, n in 1usize..4, c in 1usize..5, h in 1usize..5, w in 1usize..5) {
        let x = tensor(Shape::new(n, c, h, w), seed);
        let mut cp = NamChannelParams::new(c);
        let mut sp = NamSpatialParams::new(h, w);
        let mut rng = seeded_rng(seed ^ 0xff);
        use rand::Rng;
        cp.bn.gamma.iter_mut().for_each(|g| *g = rng.random_range(0.1..2.0));
        sp.bn.gamma.iter_mut().for_each(|g| *g = rng.random_range(0.1..2.0));
        for training in [true, false] {
            for out in [nam_channel(&x, &cp, training).unwrap(), nam_spatial(&x, &sp, training).unwrap()] {
                prop_assert_eq!(out.shape(), x.shape());
                for (o, i) in out.data().iter().zip(x.data()) {
                    prop_assert!(o.abs() <= i.abs());
                }
            }
        }
    }
}

fn arb_box() -> impl Strategy<Value = BBox> {
    (0.0f64..20.0, 0.0f64..20.0, 0.5f64..10.0, 0.5f64..10.0)
        .prop_map(|(x, y, w, h)| BBox::new(x, y, x + w, y + h).unwrap())
}

fn arb_scene() -> impl Strategy<Value = (Vec<Detection>, Vec<GroundTruth>)> {
    let gt = (0u32..2, 0u32..2, arb_box());
    let det = (0u32..2, 0u32..2, arb_box(), 0.0f64..1.0);
    (
        prop::collection::vec(gt, 1..6),
        prop::collection::vec(det, 0..8),
    )
        .prop_map(|(g, d)| {
            (
                d.into_iter()
                    .map(|(img, cat, b, conf)| {
                        Detection::new(format!("i{img}"), cat, b, conf).unwrap()
                    })
                    .collect(),
                g.into_iter()
                    .map(|(img, cat, b)| GroundTruth::new(format!("i{img}"), cat, b))
                    .collect(),
            )
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn iou_symmetric_bounded_translation_invariant(a in arb_box(), b in arb_box(), dx in -50.0f64..50.0, dy in -50.0f64..50.0) {
        let v = iou(&a, &b);
        prop_assert!((0.0..=1.0).contains(&v));
        prop_assert!((v - iou(&b, &a)).abs() < 1e-9);
        prop_assert!((v - iou(&a.translate(dx, dy), &b.translate(dx, dy))).abs() < 1e-9);
    }

    #[test]
    fn evaluate_ignores_detection_order((dets, gts) in arb_scene(), seed in 0u64..1000) {
        let mut confs: Vec<f64> = dets.iter().map(|d| d.confidence).collect();
        confs.sort_by(f64::total_cmp);
        confs.dedup();
        prop_assume!(confs.len() == dets.len());
        let base = evaluate(&dets, &gts, &[0.5, 0.75]).unwrap();
        let mut shuffled = dets.clone();
        use rand::seq::SliceRandom;
        shuffled.shuffle(&mut seeded_rng(seed));
        prop_assert_eq!(base, evaluate(&shuffled, &gts, &[0.5, 0.75]).unwrap());
    }

    #[test]
    fn all_scores_in_unit_interval_and_map_is_mean((dets, gts) in arb_scene()) {
        let r = evaluate(&dets, &gts, &fasternam::metrics::RANGE_THRESHOLDS).unwrap();
        for aps in r.per_category_ap.values() {
            prop_assert!(aps.iter().all(|a| (0.0..=1.0).contains(a)));
        }
        let n = r.per_category_ap.len() as f64;
        let mean50 = r.per_category_ap.values().map(|a| a[0]).sum::<f64>() / n;
        prop_assert_eq!(r.map50, mean50);
        prop_assert!((0.0..=1.0).contains(&r.map50) && (0.0..=1.0).contains(&r.map5095));
    }

    #[test]
    fn duplicate_of_matched_gt_never_raises_ap((dets, gts) in arb_scene(), pick in 0usize..8) {
        prop_assume!(!dets.is_empty());
        let before = evaluate(&dets, &gts, &[0.5]).unwrap();
        // Duplicate a detection that matched, with lower confidence than all others.
        let cat_dets: Vec<Detection> = dets.iter().filter(|d| d.category == dets[pick % dets.len()].category).cloned().collect();
        let cat_gts: Vec<GroundTruth> = gts.iter().filter(|g| g.category == cat_dets[0].category).cloned().collect();
        let m = match_detections(&cat_dets, &cat_gts, 0.5).unwrap();
        let Some(pos) = m.labels.iter().position(|&l| l) else { return Ok(()) };
        let gt = &cat_gts[m.matched_gt[pos].unwrap()];
        let mut more = dets.clone();
        more.push(Detection::new(gt.image_id.clone(), gt.category, gt.bbox, 0.0).unwrap());
        let after = evaluate(&more, &gts, &[0.5]).unwrap();
        for (cat, aps) in &after.per_category_ap {
            prop_assert!(aps[0] <= before.per_category_ap[cat][0] + 1e-15);
        }
    }

    #[test]
    fn lower_threshold_never_loses_true_positives((dets, gts) in arb_scene(), t in 0.05f64..1.0, dt in 0.0f64..0.5) {
        let lo = (t - dt).max(0.01);
        for cat in 0..2 {
            let d: Vec<_> = dets.iter().filter(|x| x.category == cat).cloned().collect();
            let g: Vec<_> = gts.iter().filter(|x| x.category == cat).cloned().collect();
            let hi_tp = match_detections(&d, &g, t).unwrap().true_positives();
            let lo_tp = match_detections(&d, &g, lo).unwrap().true_positives();
            prop_assert!(lo_tp >= hi_tp, "t={} lo={} {} < {}", t, lo, lo_tp, hi_tp);
        }
    }
}
