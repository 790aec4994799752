use nnchip_core::graph::{CompGraph, ConvGeom, OpKind, Stage};
use nnchip_core::hardware::HardwareSpec;
use nnchip_core::tensor::Tensor;
use nnchip_core::tuning::{expansion_error, transform, TuneConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rng: &mut ChaCha8Rng, shape: &[usize], a: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-a..a)).collect()).unwrap()
}

fn dense_graph(rng: &mut ChaCha8Rng, widths: &[usize]) -> CompGraph {
    let mut g = CompGraph::new(Stage::Source);
    let mut x = g.add(OpKind::Input { shape: vec![widths[0]] }, &[]).unwrap();
    for (i, w) in widths.windows(2).enumerate() {
        let a = (3.0 / w[0] as f64).sqrt();
        x = g.add(OpKind::Dense { weight: random(rng, &[w[1], w[0]], a) }, &[x]).unwrap();
        x = g.add(OpKind::BiasAdd { bias: random(rng, &[w[1]], 0.5) }, &[x]).unwrap();
        if i + 2 < widths.len() {
            x = g.add(OpKind::Relu, &[x]).unwrap();
        }
    }
    g.set_outputs(&[x]).unwrap();
    g
}

fn untuned() -> TuneConfig {
    TuneConfig {
        free: false,
        value_range: false,
        rounding: false,
        train_samples: 64,
        eval_samples: 16,
        calib_samples: 64,
        ..TuneConfig::default()
    }
}

fn spec16() -> HardwareSpec {
    HardwareSpec {
        io_bits: 16,
        weight_bits: 16,
        ..HardwareSpec::tianji_ann()
    }
}

/// Core-ops reading only ingress or constant vertices, and the rest.
fn split_layers(g: &CompGraph) -> (usize, usize) {
    let base: Vec<bool> = g
        .vertices
        .iter()
        .map(|v| matches!(v.kind, OpKind::Ingress { .. } | OpKind::Const { .. }))
        .collect();
    let mut compute = 0;
    let mut reduce = 0;
    for v in &g.vertices {
        if let OpKind::CoreOp(_) = v.kind {
            if v.inputs.iter().all(|&p| base[p]) {
                compute += 1;
            } else {
                reduce += 1;
            }
        }
    }
    (compute, reduce)
}

#[test]
fn wide_dense_tiles_into_six_blocks() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let g = dense_graph(&mut rng, &[500, 300]);
    let x = random(&mut rng, &[64, 500], 1.0);
    let t = transform(&g, &spec16(), &untuned(), &[x]).unwrap();
    assert!(t.violations.is_empty(), "{:?}", t.violations);
    let (compute, reduce) = split_layers(&t.graph);
    assert_eq!(compute, 6);
    assert!(reduce > 0);
    // Reduce ops read compute ops only: a single level.
    for v in &t.graph.vertices {
        if let OpKind::CoreOp(_) = v.kind {
            for &p in &v.inputs {
                assert!(!matches!(t.graph.vertices[p].kind, OpKind::CoreOp(_)) || {
                    let q = &t.graph.vertices[p];
                    q.inputs.iter().all(|&r| !matches!(t.graph.vertices[r].kind, OpKind::CoreOp(_)))
                });
            }
        }
    }
}

#[test]
fn small_dense_is_one_core_op() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let g = dense_graph(&mut rng, &[10, 10]);
    let x = random(&mut rng, &[64, 10], 1.0);
    let t = transform(&g, &spec16(), &untuned(), &[x]).unwrap();
    assert_eq!(split_layers(&t.graph), (1, 0));
    assert_eq!(t.report.core_ops, 1);
}

#[test]
fn conv_that_fits_is_one_shared_group() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let geom = ConvGeom {
        in_h: 10,
        in_w: 10,
        in_c: 16,
        k_h: 3,
        k_w: 3,
        stride: 1,
        pad: 0,
        out_c: 32,
    };
    let mut g = CompGraph::new(Stage::Source);
    let x = g.add(OpKind::Input { shape: vec![10, 10, 16] }, &[]).unwrap();
    let c = g
        .add(OpKind::Conv2d { geom, weight: random(&mut rng, &[32, 144], 0.1) }, &[x])
        .unwrap();
    g.set_outputs(&[c]).unwrap();
    let data = random(&mut rng, &[32, 1600], 1.0);
    let t = transform(&g, &spec16(), &untuned(), &[data]).unwrap();
    assert_eq!(t.report.core_ops, 1);
    assert_eq!(t.report.logical_core_ops, 64);
}

#[test]
fn float_expansion_is_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for (widths, m) in [(vec![500, 300], 1), (vec![20, 30, 5], 2), (vec![300, 40, 10], 3)] {
        let g = dense_graph(&mut rng, &widths);
        let x = random(&mut rng, &[32, widths[0]], 1.0);
        let cfg = TuneConfig {
            reencode_factor: m,
            ..untuned()
        };
        let err = expansion_error(&g, &spec16(), &cfg, &[x]).unwrap();
        assert!(err <= 1e-6, "{widths:?} m={m}: {err}");
    }
}

#[test]
fn mlp_parts_expand_to_expected_counts() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let g = dense_graph(&mut rng, &[784, 100, 10]);
    let x = random(&mut rng, &[64, 784], 1.0).map(|v| v.abs());
    let t = transform(&g, &HardwareSpec::tianji_ann(), &untuned(), &[x]).unwrap();
    assert!(t.violations.is_empty(), "{:?}", t.violations);
    let counts: Vec<usize> = t.report.parts.iter().map(|p| p.core_ops).collect();
    // 784 inputs: four 196-slot compute blocks and four reduce ops of 25 units
    // (8 partial words each beside the bias lines); then one op for 100 → 10.
    assert_eq!(counts, [8, 1]);
}
