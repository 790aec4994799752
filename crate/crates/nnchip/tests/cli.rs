use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use nnchip::idx::Dataset;
use nnchip::report::{EvalReport, PlacementRow, PlacementSummary, SweepRow, TuningRow};
use nnchip::{pipeline, Error};
use nnchip_core::Tensor;

fn data_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist")
}

/// Run config for a small, quick model.
fn write_config(dir: &Path) -> PathBuf {
    let tuning = dir.join("tuning.json");
    fs::write(
        &tuning,
        r#"{"iters_per_phase": 30, "train_samples": 512, "eval_samples": 256, "calib_samples": 512, "cache_dir": null}"#,
    )
    .unwrap();
    let cfg = serde_json::json!({
        "model": "mlp:784-32-10",
        "data_dir": data_dir(),
        "hardware": "tianji-ann",
        "tuning": tuning,
        "out": dir.join("out"),
        "seed": 3,
        "train": { "epochs": 1 }
    });
    let path = dir.join("run.json");
    fs::write(&path, cfg.to_string()).unwrap();
    path
}

fn nnchip(config: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nnchip"))
        .arg("--config")
        .arg(config)
        .args(args)
        .output()
        .unwrap()
}

fn ok(o: &Output) -> String {
    let text = String::from_utf8_lossy(&o.stdout).into_owned();
    assert!(o.status.success(), "stdout {text}\nstderr {}", String::from_utf8_lossy(&o.stderr));
    text
}

fn rows<T: for<'de> serde::Deserialize<'de>>(p: &Path) -> Vec<T> {
    nnchip::report::read_rows(p).unwrap()
}

fn header(p: &Path) -> String {
    fs::read_to_string(p).unwrap().lines().next().unwrap().to_string()
}

#[test]
fn train_compile_evaluate_map_sweep_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let out = dir.path().join("out");

    ok(&nnchip(&cfg, &["train"]));
    let first = fs::read(out.join("baseline.nng.bin")).unwrap();
    // Same seed, same bits.
    ok(&nnchip(&cfg, &["train"]));
    assert_eq!(first, fs::read(out.join("baseline.nng.bin")).unwrap());
    assert_eq!(header(&out.join("train.csv")), "epoch,loss");

    ok(&nnchip(&cfg, &["compile", "--io-bits", "4", "--scale", "128x128"]));
    assert!(out.join("compiled.nng.json").is_file());
    assert_eq!(header(&out.join("tuning.csv")), "part,phase,epoch,loss");
    let tuning: Vec<TuningRow> = rows(&out.join("tuning.csv"));
    assert!(tuning.iter().any(|r| r.phase == "summary"));
    let hw: nnchip_core::HardwareSpec = nnchip::report::read_json(&out.join("hardware.json")).unwrap();
    assert_eq!((hw.io_bits, hw.scale_m, hw.scale_n), (4, 128, 128));

    ok(&nnchip(&cfg, &["evaluate"]));
    let e: EvalReport = nnchip::report::read_json(&out.join("eval.json")).unwrap();
    assert_eq!(e.drop, e.baseline_accuracy - e.accuracy);
    assert!(e.accuracy > 80.0, "{e:?}");
    assert_eq!(header(&out.join("eval.csv")), "axis,value,accuracy,drop,core_ops,wall_clock_s,error");
    // Reports are re-derivable: evaluating again gives the same file.
    let before = fs::read(out.join("eval.json")).unwrap();
    ok(&nnchip(&cfg, &["evaluate"]));
    assert_eq!(before, fs::read(out.join("eval.json")).unwrap());

    // The float baseline through the same command loses nothing.
    ok(&nnchip(&cfg, &["evaluate", "--graph", out.join("baseline").to_str().unwrap()]));
    let e: EvalReport = nnchip::report::read_json(&out.join("eval.json")).unwrap();
    assert_eq!((e.drop, e.core_ops), (0.0, 0));

    ok(&nnchip(&cfg, &["map"]));
    assert_eq!(header(&out.join("placement.csv")), "node_id,row,col,chip_id");
    let placed: Vec<PlacementRow> = rows(&out.join("placement.csv"));
    let s: PlacementSummary = nnchip::report::read_json(&out.join("placement.json")).unwrap();
    assert_eq!(placed.len(), s.nodes);
    assert!(s.total > 0.0 && (s.total - s.intra - s.inter).abs() < 1e-9 * s.total);
    let mut cells: Vec<_> = placed.iter().map(|r| (r.row, r.col)).collect();
    cells.sort();
    cells.dedup();
    assert_eq!(cells.len(), placed.len());
    let csv = fs::read(out.join("placement.csv")).unwrap();
    ok(&nnchip(&cfg, &["map"]));
    assert_eq!(csv, fs::read(out.join("placement.csv")).unwrap());

    let text = ok(&nnchip(&cfg, &["sweep", "io_bits", "2", "6"]));
    assert!(text.contains("io_bits=2"), "{text}");
    let sweep: Vec<SweepRow> = rows(&out.join("sweep_io_bits.csv"));
    assert_eq!(sweep.len(), 2);
    assert!(sweep.iter().all(|r| r.error.is_empty() && r.core_ops > 0));

    let text = ok(&nnchip(&cfg, &["report"]));
    for key in ["baseline", "compile", "evaluate", "placement", "sweep"] {
        assert!(text.contains(key), "{text}");
    }

    // A 1x1 mesh cannot hold the compiled graph.
    let mut hw: serde_json::Value = nnchip::report::read_json(&out.join("hardware.json")).unwrap();
    hw["mesh"]["rows"] = 1.into();
    hw["mesh"]["cols"] = 1.into();
    hw["mesh"]["cores_per_chip"] = 1.into();
    fs::write(out.join("hardware.json"), hw.to_string()).unwrap();
    let o = nnchip(&cfg, &["map"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("do not fit"));
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());

    // Missing config file and unknown flags are configuration errors.
    assert_eq!(nnchip(&dir.path().join("nope.json"), &["report"]).status.code(), Some(2));
    assert_eq!(nnchip(&cfg, &["train", "--frobnicate"]).status.code(), Some(2));
    assert_eq!(nnchip(&cfg, &["compile", "--scale", "12"]).status.code(), Some(2));
    assert_eq!(nnchip(&cfg, &["compile", "--encoding", "ternary"]).status.code(), Some(2));
    // No baseline yet.
    assert_eq!(nnchip(&cfg, &["compile"]).status.code(), Some(2));
    assert_eq!(nnchip(&cfg, &["sweep", "colour", "1"]).status.code(), Some(2));

    // An untrained network fails the accuracy floor.
    let o = nnchip(&cfg, &["train", "--epochs", "0"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("sanity floor"));
}

#[test]
fn empty_test_set_is_an_error() {
    let g = nnchip_core::models::build(&nnchip_core::models::Arch::parse("mlp:4-2").unwrap(), 1).unwrap();
    let empty = Dataset {
        images: Tensor::zeros(&[0, 4]),
        labels: Vec::new(),
    };
    assert!(matches!(pipeline::evaluate_graph(&g, None, &empty), Err(Error::EmptyTestSet)));
}

#[test]
fn flags_parse() {
    use nnchip::config::{parse_encoding, parse_granularity, parse_scale};
    assert_eq!(parse_scale("256x128"), Ok((256, 128)));
    assert!(parse_scale("0x4").is_err() && parse_scale("16").is_err());
    assert_eq!(parse_granularity("all"), Ok(0));
    assert_eq!(parse_granularity("2"), Ok(2));
    assert_eq!(parse_encoding("sharing"), Ok(nnchip_core::CodecKind::WeightSharing));
}
