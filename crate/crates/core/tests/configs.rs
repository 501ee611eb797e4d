use std::path::PathBuf;

use fasternam::blocks::FasterNetSpec;
use fasternam::complexity::{analyze_graph, layer_cost};
use fasternam::graph::{parse_model_config, FeatureShape, GraphSpec, LayerSpec};
use fasternam::init::seeded_rng;
use fasternam::model::build_model;
use fasternam::ops::ConvSpec;
use fasternam::{Shape, Tensor4};

const BUNDLED: [&str; 5] = [
    "yolov5s-like.cfg",
    "fasternet-head-like.cfg",
    "nam-neck-like.cfg",
    "improved-like.cfg",
    "demo-fasternet-nam.cfg",
];

fn config(name: &str) -> GraphSpec {
    let path: PathBuf = [env!("CARGO_MANIFEST_DIR"), "..", "..", "configs", name]
        .iter()
        .collect();
    parse_model_config(&std::fs::read_to_string(&path).unwrap()).unwrap()
}

#[test]
fn bundled_configs_round_trip() {
    for name in BUNDLED {
        let g = config(name);
        let again = parse_model_config(&g.to_config()).unwrap();
        assert_eq!(g, again, "{name}");
        assert_eq!(again.to_config(), g.to_config());
    }
}

fn assert_model_shapes_match(g: &GraphSpec) {
    let report = analyze_graph(g, g.input_shape).unwrap();
    let mut model = build_model(g, 3).unwrap();
    let i = g.input_shape;
    let x = Tensor4::random_uniform(Shape::new(1, i.c, i.h, i.w), 0.0, 1.0, &mut seeded_rng(4));
    let (y, profile) = model.forward_profiled(&x, false).unwrap();
    for (row, p) in report.rows.iter().zip(&profile) {
        let s = p.out_shape;
        assert_eq!(
            FeatureShape::new(s.c, s.h, s.w),
            row.out_shape,
            "{}",
            row.layer_id
        );
        assert_eq!(p.flops, row.flops, "{}", row.layer_id);
    }
    let out = report.rows.last().unwrap().out_shape;
    assert_eq!(y.shape(), Shape::new(1, out.c, out.h, out.w));
}

#[test]
fn executed_shapes_follow_static_propagation() {
    assert_model_shapes_match(&config("demo-fasternet-nam.cfg"));
    // The full-size detectors are executed at a reduced resolution; their
    // layers carry no resolution-dependent attributes.
    for name in ["yolov5s-like.cfg", "fasternet-head-like.cfg"] {
        let mut g = config(name);
        g.input_shape = FeatureShape::new(3, 64, 64);
        g.validate().unwrap();
        assert_model_shapes_match(&g);
    }
}

#[test]
fn fasternet_block_is_cheaper_than_conv_block_at_half_ratio_or_less() {
    for c in [4, 8, 16, 32, 64, 128] {
        for cp in 1..=c / 2 {
            for k in [3, 5] {
                let x = FeatureShape::new(c, 20, 20);
                let conv = ConvSpec::same(c, c, k);
                let conv_params: u64 =
                    [LayerSpec::Conv(conv), LayerSpec::Bn { c }, LayerSpec::Relu]
                        .iter()
                        .map(|l| layer_cost(l, x, x).0)
                        .sum();
                let fnet = LayerSpec::FasterNet(FasterNetSpec::new(c, cp, k, 1).unwrap());
                assert!(
                    layer_cost(&fnet, x, x).0 < conv_params,
                    "c={c} cp={cp} k={k}"
                );
            }
        }
    }
}
