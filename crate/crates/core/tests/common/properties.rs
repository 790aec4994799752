//! Cross-module invariants checked against independent oracles.
//!
//! Each property is a function returning the first counterexample, so the
//! same checks back both the property tests and the acceptance report.
#![allow(dead_code)]

use std::sync::Arc;

use nnchip_core::autodiff::{ScalarFn, Tape, Taps, Var};
use nnchip_core::codec::{em_fit, Codebook, CodecFamily, CodecKind, DYNAMIC_RANGE};
use nnchip_core::exec;
use nnchip_core::graph::{CompGraph, CoreOp, OpKind, PoolGeom, Stage};
use nnchip_core::hardware::{encode_batch, simulate, HardwareSpec, MeshSpec, SimOptions};
use nnchip_core::mapping::{map_to_mesh, placement, CommGraph, MapConfig, MeshCost};
use nnchip_core::math;
use nnchip_core::models::{build, Arch};
use nnchip_core::reform::lower_maxpool;
use nnchip_core::tensor::Tensor;
use nnchip_core::tuning::{expansion_error, Autoencoder, Range, TuneConfig};
use proptest::prelude::*;
use proptest::test_runner::{Config, TestCaseError, TestRunner};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tensor(shape: &[usize], data: Vec<f64>) -> Tensor {
    Tensor::new(shape.to_vec(), data).unwrap()
}

fn check<S: Strategy>(cases: u32, strategy: S, test: impl Fn(S::Value) -> Result<(), TestCaseError>) -> Result<(), String> {
    TestRunner::new(Config::with_cases(cases))
        .run(&strategy, test)
        .map_err(|e| e.to_string())
}

// --- gradients -------------------------------------------------------------

/// A small network touching every differentiable tape op.
fn net(tape: &mut Tape, x: &Tensor, w: &Tensor, b: &Tensor, k: &Tensor) -> (Var, [Var; 4]) {
    let xv = tape.leaf(x.clone());
    let wv = tape.leaf(w.clone());
    let bv = tape.leaf(b.clone());
    let kv = tape.leaf(k.clone());
    let h = tape.dense(xv, wv).unwrap();
    let h = tape.bias_add(h, bv).unwrap();
    let h = tape.pointwise(h, ScalarFn::Tanh);
    // Overlapping windows of two over the four hidden units, one zero tap.
    let taps = Arc::new(Taps::new(3, 2, vec![0, 1, 1, 2, 3, Taps::ZERO]));
    let l = tape.local(h, kv, taps).unwrap();
    let s = tape.pointwise(l, ScalarFn::Sigmoid);
    let c = tape.concat(&[s, h]).unwrap();
    let c = tape.scale(c, 1.5);
    let t = tape.leaf(Tensor::full(&[x.rows(), 10], 0.2));
    let m = tape.mse(c, t).unwrap();
    let logits = tape.columns(c, &[0, 2, 4]).unwrap();
    let ce = tape.softmax_ce(logits, &vec![1; x.rows()]).unwrap();
    let loss = tape.add(m, ce).unwrap();
    (loss, [xv, wv, bv, kv])
}

pub fn gradients_match_finite_differences() -> Result<(), String> {
    check(48, (any::<u64>(),), |(seed,)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut r = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.random_range(-1.0..1.0)).collect() };
            let mut params = [
                tensor(&[2, 3], r(6)),
                tensor(&[4, 3], r(12)),
                tensor(&[4], r(4)),
                tensor(&[2, 2], r(4)),
            ];
            let eval = |p: &[Tensor; 4]| {
                let mut tape = Tape::new();
                let (loss, _) = net(&mut tape, &p[0], &p[1], &p[2], &p[3]);
                tape.value(loss).data()[0]
            };
            let mut tape = Tape::new();
            let (loss, vars) = net(&mut tape, &params[0], &params[1], &params[2], &params[3]);
            let grads = tape.backward(&[(loss, Tensor::scalar(1.0))]).unwrap();
            for (pi, v) in vars.iter().enumerate() {
                let g = grads.get(*v).unwrap().data().to_vec();
                for i in 0..g.len() {
                    let h = 1e-6;
                    let orig = params[pi].data()[i];
                    params[pi].data_mut()[i] = orig + h;
                    let up = eval(&params);
                    params[pi].data_mut()[i] = orig - h;
                    let down = eval(&params);
                    params[pi].data_mut()[i] = orig;
                    let num = (up - down) / (2.0 * h);
                    let rel = (g[i] - num).abs() / (g[i].abs() + num.abs()).max(1e-3);
                    prop_assert!(rel <= 1e-4, "param {pi}[{i}]: analytic {} numeric {num}", g[i]);
                }
            }
        Ok(())
    })
}

// --- max tree ---------------------------------------------------------------

pub fn lowered_max_pool_is_exact() -> Result<(), String> {
    check(64, (2usize..4, 1usize..3, prop::collection::vec(0u32..4096, 36 * 2)), |(k, c, vals)| {
            let size = 6;
            let geom = PoolGeom { in_h: size, in_w: size, c, k, stride: k };
            let mut g = CompGraph::new(Stage::Source);
            let x = g.add(OpKind::Input { shape: vec![size, size, c] }, &[]).unwrap();
            let p = g.add(OpKind::MaxPool { geom }, &[x]).unwrap();
            g.set_outputs(&[p]).unwrap();
            let (lowered, _) = lower_maxpool(&g).unwrap();
            // Dyadic rationals: every max block is computed without rounding.
            let data: Vec<f64> = vals[..size * size * c].iter().map(|&v| v as f64 / 64.0).collect();
            let input = tensor(&[1, size * size * c], data);
            let want = exec::predict(&g, &[input.clone()], 16).unwrap();
            let got = exec::predict(&lowered, &[input], 16).unwrap();
            prop_assert_eq!(want[0].data(), got[0].data());
        Ok(())
    })
}

// --- autoencoder ------------------------------------------------------------

pub fn autoencoder_grid_points_round_trip() -> Result<(), String> {
    check(256, (1u32..9, 1usize..5, 0.01f64..100.0, 0u64..10_000), |(bits, m, hi, j)| {
            let a = Autoencoder::new(bits, m, Range { lo: 0.0, hi });
            let steps = (math::io_max(bits) as u64) * m as u64;
            let j = j % (steps + 1);
            let x = j as f64 * hi / steps as f64;
            let back = a.decode(&a.encode(x));
            prop_assert!((back - x).abs() <= 1e-9 * hi, "x {x} decoded {back}");
            // Off-grid values stay within half a step; negatives decode to 0.
            let step = hi / steps as f64;
            let y = (x + 0.37 * step).min(hi);
            prop_assert!((a.decode(&a.encode(y)) - y).abs() <= 0.5 * step + 1e-9 * hi);
            prop_assert_eq!(a.decode(&a.encode(-x - 0.1)), 0.0);
        Ok(())
    })
}

// --- EM ---------------------------------------------------------------------

fn kind_of(i: u8) -> CodecKind {
    CodecKind::ALL[i as usize % 3]
}

pub fn em_objective_never_increases() -> Result<(), String> {
    check(1000, (0u8..3, 1u32..6, prop::collection::vec(-4.0f64..4.0, 1..40)), |(kind, bits, weights)| {
            let fit = em_fit(CodecFamily::new(kind_of(kind), bits).unwrap(), &weights).unwrap();
            for w in fit.history.windows(2) {
                prop_assert!(w[1] <= w[0] * (1.0 + 1e-12) + 1e-15, "history {:?}", fit.history);
            }
            let j = fit.codebook.residual(&weights);
            prop_assert!((j - fit.j).abs() <= 1e-9 * (1.0 + j));
        Ok(())
    })
}

pub fn dynamic_em_finds_the_best_exponent() -> Result<(), String> {
    check(300, (1u32..5, prop::collection::vec(-8.0f64..8.0, 1..=6)), |(bits, weights)| {
            let fit = em_fit(CodecFamily::new(CodecKind::DynamicFixedPoint, bits).unwrap(), &weights).unwrap();
            let brute = (DYNAMIC_RANGE.0..=DYNAMIC_RANGE.1)
                .map(|p| Codebook::dynamic(bits, p).unwrap().residual(&weights))
                .fold(f64::INFINITY, f64::min);
            prop_assert!(fit.j <= brute * (1.0 + 1e-12) + 1e-15, "em {} brute {brute}", fit.j);
        Ok(())
    })
}

// --- simulator against the quantized forward --------------------------------

/// Ingress → core-op → core-op (+ bias lines) → egress, with random codebook
/// weights.
fn random_core_graph(rng: &mut ChaCha8Rng, bits: u32, kind: CodecKind) -> CompGraph {
    let fam = CodecFamily::new(kind, 3).unwrap();
    let book = em_fit(fam, &(0..32).map(|_| rng.random_range(-2.0..2.0)).collect::<Vec<_>>())
        .unwrap()
        .codebook;
    let mut pick = |n: usize| -> Vec<f64> { (0..n).map(|_| book.values()[rng.random_range(0..book.len())]).collect() };
    let mut g = CompGraph::new(Stage::CoreOps);
    let x = g.add(OpKind::Ingress { width: 6, lo: -1.0, hi: 1.0, bits }, &[]).unwrap();
    let top = math::io_max(bits);
    let c = g.add(OpKind::Const { values: vec![1, 2.min(top), 4.min(top)] }, &[]).unwrap();
    let op1 = CoreOp {
        taps: Arc::new(Taps::new(2, 3, vec![0, 1, 2, 3, 4, 5])),
        weight: tensor(&[4, 3], pick(12)),
        codebook: book.clone(),
    };
    let h = g.add(OpKind::CoreOp(op1), &[x]).unwrap();
    // 8 words of h, then the three lines.
    let op2 = CoreOp {
        taps: Arc::new(Taps::new(1, 11, (0..11).collect())),
        weight: tensor(&[5, 11], pick(55)),
        codebook: book.clone(),
    };
    let y = g.add(OpKind::CoreOp(op2), &[h, c]).unwrap();
    let e = g
        .add(
            OpKind::Egress {
                weight: tensor(&[2, 5], (0..10).map(|i| 0.1 * i as f64 - 0.3).collect()),
                offset: tensor(&[2], vec![0.5, -0.25]),
            },
            &[y],
        )
        .unwrap();
    g.set_outputs(&[e]).unwrap();
    g
}

pub fn simulator_matches_quantized_forward() -> Result<(), String> {
    check(64, (any::<u64>(), 1u32..9, 0u8..3), |(seed, bits, kind)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let g = random_core_graph(&mut rng, bits, kind_of(kind));
            let spec = HardwareSpec { io_bits: bits, weight_bits: 3, encoding: kind_of(kind), ..HardwareSpec::tianji_ann() };
            let batch = 5;
            let x = tensor(&[batch, 6], (0..batch * 6).map(|_| rng.random_range(-1.5..1.5)).collect());
            let words = encode_batch(&g, &[x.clone()]).unwrap();
            let sim = simulate(&g, &spec, &words, batch, &SimOptions { keep_values: true }).unwrap();
            let f = exec::forward(&g, &[x]).unwrap();
            for v in 0..g.len() {
                let want: Vec<u32> = f.value(v).unwrap().data().iter().map(|&w| w as u32).collect();
                if matches!(g.vertices[v].kind, OpKind::CoreOp(_)) {
                    prop_assert_eq!(sim.values[v].as_ref().unwrap(), &want);
                }
            }
            prop_assert_eq!(sim.outputs[0].data(), f.value(g.outputs[0]).unwrap().data());
        Ok(())
    })
}

// --- placement ----------------------------------------------------------------

fn random_comm(rng: &mut ChaCha8Rng, n: usize, density: f64) -> CommGraph {
    let mut edges = Vec::new();
    for a in 0..n {
        for b in a + 1..n {
            if rng.random_bool(density) {
                edges.push((a, b, rng.random_range(1..64) as f64));
            }
        }
    }
    CommGraph::from_edges(n, &edges).unwrap()
}

fn brute_force(cg: &CommGraph, mc: &MeshCost) -> f64 {
    fn rec(cg: &CommGraph, mc: &MeshCost, cells: &mut Vec<usize>, used: &mut [bool], best: &mut f64) {
        if cells.len() == cg.len() {
            *best = best.min(placement(cg, mc, cells.clone()).total);
            return;
        }
        for c in 0..used.len() {
            if !used[c] {
                used[c] = true;
                cells.push(c);
                rec(cg, mc, cells, used, best);
                cells.pop();
                used[c] = false;
            }
        }
    }
    let mut best = f64::INFINITY;
    rec(cg, mc, &mut Vec::new(), &mut vec![false; mc.cells()], &mut best);
    best
}

pub fn small_placements_are_near_optimal() -> Result<(), String> {
    check(48, (any::<u64>(), 2usize..=6), |(seed, n)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let cg = random_comm(&mut rng, n, 0.6);
            let mesh = MeshSpec { rows: 2, cols: 3, cores_per_chip: 3, intra_cost: 1.0, inter_cost: 10.0 };
            let mc = MeshCost::new(&mesh).unwrap();
            let p = map_to_mesh(&cg, &mesh, &MapConfig { seed, ..MapConfig::default() }).unwrap();
            let best = brute_force(&cg, &mc);
            prop_assert!(p.total <= 1.1 * best + 1e-9, "kl {} optimum {best}", p.total);
            // Cost is the sum of per-edge costs.
            let sum: f64 = p.edge_costs.iter().sum();
            prop_assert!((sum - p.total).abs() <= 1e-9 * (1.0 + p.total));
            let mut cells = p.cells.clone();
            cells.sort_unstable();
            cells.dedup();
            prop_assert_eq!(cells.len(), n);
        Ok(())
    })
}

pub fn placements_beat_random() -> Result<(), String> {
    check(48, (any::<u64>(), 8usize..=32), |(seed, n)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let cg = random_comm(&mut rng, n, 0.25);
            let mesh = MeshSpec { rows: 4, cols: 8, cores_per_chip: 8, intra_cost: 1.0, inter_cost: 10.0 };
            let mc = MeshCost::new(&mesh).unwrap();
            let p = map_to_mesh(&cg, &mesh, &MapConfig { seed, ..MapConfig::default() }).unwrap();
            let mut cells: Vec<usize> = (0..mc.cells()).collect();
            let trials = 1000;
            let mut sum = 0.0;
            for _ in 0..trials {
                cells.shuffle(&mut rng);
                sum += placement(&cg, &mc, cells[..n].to_vec()).total;
            }
            prop_assert!(p.total <= sum / trials as f64, "kl {} random mean {}", p.total, sum / trials as f64);
        Ok(())
    })
}

// --- serialization ----------------------------------------------------------

fn round_trip<T: serde::Serialize + serde::de::DeserializeOwned + PartialEq + std::fmt::Debug>(v: &T) {
    let s = serde_json::to_string(v).unwrap();
    let back: T = serde_json::from_str(&s).unwrap();
    assert_eq!(&back, v);
}

pub fn values_survive_json() -> Result<(), String> {
    check(32, (any::<u64>(), 1u32..9, 0u8..3), |(seed, bits, kind)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let g = random_core_graph(&mut rng, bits, kind_of(kind));
            round_trip(&g);
            let src = build(&Arch::parse("mlp:12-7-3").unwrap(), seed).unwrap();
            round_trip(&src);
            round_trip(&HardwareSpec { io_bits: bits, ..HardwareSpec::prime() });
            round_trip(&TuneConfig { seed, lr: rng.random(), ..TuneConfig::default() });
            let cg = random_comm(&mut rng, 6, 0.5);
            round_trip(&cg);
            let mesh = MeshSpec { rows: 2, cols: 3, cores_per_chip: 3, intra_cost: 1.0, inter_cost: 10.0 };
            round_trip(&map_to_mesh(&cg, &mesh, &MapConfig::default()).unwrap());
        Ok(())
    })
}

// --- float expansion --------------------------------------------------------

fn dense_chain(rng: &mut ChaCha8Rng, widths: &[usize]) -> CompGraph {
    let mut g = CompGraph::new(Stage::Source);
    let mut x = g.add(OpKind::Input { shape: vec![widths[0]] }, &[]).unwrap();
    for (i, w) in widths.windows(2).enumerate() {
        let a = (3.0 / w[0] as f64).sqrt();
        let weight = tensor(&[w[1], w[0]], (0..w[0] * w[1]).map(|_| rng.random_range(-a..a)).collect());
        x = g.add(OpKind::Dense { weight }, &[x]).unwrap();
        let bias = tensor(&[w[1]], (0..w[1]).map(|_| rng.random_range(-0.5..0.5)).collect());
        x = g.add(OpKind::BiasAdd { bias }, &[x]).unwrap();
        if i + 2 < widths.len() {
            x = g.add(OpKind::Relu, &[x]).unwrap();
        }
    }
    g.set_outputs(&[x]).unwrap();
    g
}

/// Tiled, re-encoded and fused float graphs reproduce the source outputs.
pub fn float_expansion_is_exact() -> Result<(), String> {
    check(12, (any::<u64>(), prop::collection::vec(2usize..400, 2..4), 1usize..4), |(seed, widths, m)| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = dense_chain(&mut rng, &widths);
        let x = tensor(&[16, widths[0]], (0..16 * widths[0]).map(|_| rng.random_range(-1.0..1.0)).collect());
        let cfg = TuneConfig {
            reencode_factor: m,
            free: false,
            value_range: false,
            rounding: false,
            train_samples: 16,
            eval_samples: 0,
            calib_samples: 16,
            ..TuneConfig::default()
        };
        let spec = HardwareSpec { io_bits: 16, weight_bits: 16, ..HardwareSpec::tianji_ann() };
        let err = expansion_error(&g, &spec, &cfg, &[x]).unwrap();
        prop_assert!(err <= 1e-6, "{widths:?} m={m}: {err}");
        Ok(())
    })
}

/// Every property by acceptance label.
pub fn suite() -> Vec<(&'static str, fn() -> Result<(), String>)> {
    vec![
        ("a gradients", gradients_match_finite_differences),
        ("b float expansion", float_expansion_is_exact),
        ("c max tree", lowered_max_pool_is_exact),
        ("d autoencoder grid", autoencoder_grid_points_round_trip),
        ("e EM monotone", em_objective_never_increases),
        ("f EM brute force", dynamic_em_finds_the_best_exponent),
        ("g simulator", simulator_matches_quantized_forward),
        ("h placement optimum", small_placements_are_near_optimal),
        ("h placement vs random", placements_beat_random),
        ("i serialization", values_survive_json),
    ]
}
