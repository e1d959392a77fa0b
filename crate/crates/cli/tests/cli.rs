use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use segunify::augment::ImageBuffer;
use segunify::catalog::{Manifest, SampleRecord, Split};
use segunify::label_space::{parse_mapping_rows, space_from_rows, table_from_rows, unified_space_from_rows};
use segunify::tta::{argmax_mask, fixture_name, rescale_logits, tta_requests, StubMode, StubPredictor, TtaConfig};
use segunify::{fsutil, project_mask, MaskImage};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_segunify"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn segunify")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const TOY: &str = "source_id,source_name,target_id,target_name\n\
0,void,0,void\n1,road,12,road\n2,lane,12,road\n3,car,40,car\n4,sky,7,sky\n";

const BIJECTIVE: &str = "source_id,source_name,target_id,target_name\n\
0,void,0,void\n1,a,20,a\n2,b,21,b\n3,c,5,c\n";

fn write(path: &Path, text: &str) {
    fsutil::write_atomic(path, text.as_bytes()).unwrap();
}

fn toy_masks(dir: &Path, n: u32, classes: u8) {
    for i in 0..n {
        let data = (0..40u32).map(|p| ((p * 3 + i) % classes as u32) as u8).collect();
        MaskImage::new(8, 5, data, "x")
            .unwrap()
            .write_png(&dir.join(format!("m{i:03}.png")))
            .unwrap();
    }
}

#[test]
fn validate_mapping_reports_counts() {
    let dir = tempfile::tempdir().unwrap();
    let toy = dir.path().join("toy.csv");
    write(&toy, TOY);
    let o = run(&["validate-mapping", s(&toy)]);
    assert_eq!(code(&o), 0);
    assert_eq!(stdout(&o), "toy: 4 -> 3\n");

    let ident = dir.path().join("ident.csv");
    write(&ident, "source_id,source_name,target_id,target_name\n0,a,0,a\n1,b,1,b\n2,c,2,c\n");
    let o = run(&["validate-mapping", s(&ident)]);
    assert_eq!((code(&o), stdout(&o).as_str()), (0, "ident: 3 -> 3\n"));
}

#[test]
fn validate_mapping_corrupt_csv_exits_2_with_line() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.csv");
    write(&bad, "source_id,source_name,target_id,target_name\n0,void,0,void\n1,road,x,road\n");
    let o = run(&["validate-mapping", s(&bad)]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains(":3:"));
}

#[test]
fn strict_catalog_mismatch_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    let coco = dir.path().join("coco.csv");
    write(&coco, TOY);
    assert_eq!(code(&run(&["validate-mapping", s(&coco)])), 0);
    let o = run(&["--strict", "validate-mapping", s(&coco)]);
    assert_eq!(code(&o), 1);
    assert_eq!(stdout(&o), "COCO: 4 -> 3\n");
}

#[test]
fn remap_matches_library_and_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let map = dir.path().join("toy.csv");
    write(&map, TOY);
    let input = dir.path().join("in");
    toy_masks(&input, 100, 5);
    let out = dir.path().join("out");
    let o = run(&["remap", "--input", s(&input), "--output", s(&out), "--mapping", s(&map)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(stdout(&o), "100 files\n");

    let rows = parse_mapping_rows("toy", TOY).unwrap();
    let table = table_from_rows(
        &rows,
        &space_from_rows("toy", &rows, false).unwrap(),
        &unified_space_from_rows("unified", &rows).unwrap(),
    )
    .unwrap();
    let lut = table.build_lut();
    for i in [0, 17, 42, 99] {
        let name = format!("m{i:03}.png");
        let src = MaskImage::read_png(&input.join(&name), "toy").unwrap();
        let got = MaskImage::read_png(&out.join(&name), "unified").unwrap();
        assert_eq!(got, project_mask(&src, &lut).unwrap());
    }

    // Bijective mapping: there and back is byte-identical.
    let bij = dir.path().join("bij.csv");
    write(&bij, BIJECTIVE);
    let small = dir.path().join("small");
    toy_masks(&small, 10, 4);
    let there = dir.path().join("there");
    let back = dir.path().join("back");
    let a = run(&["remap", "--input", s(&small), "--output", s(&there), "--mapping", s(&bij)]);
    let b = run(&[
        "remap", "--input", s(&there), "--output", s(&back), "--mapping", s(&bij),
        "--direction", "to-dataset", "--policy", "strict",
    ]);
    assert_eq!((code(&a), code(&b)), (0, 0), "{}", String::from_utf8_lossy(&b.stderr));
    for i in 0..10 {
        let name = format!("m{i:03}.png");
        assert_eq!(
            std::fs::read(small.join(&name)).unwrap(),
            std::fs::read(back.join(&name)).unwrap()
        );
    }
}

#[test]
fn remap_empty_dir_and_invalid_pixel() {
    let dir = tempfile::tempdir().unwrap();
    let map = dir.path().join("toy.csv");
    write(&map, TOY);
    let empty = dir.path().join("empty");
    std::fs::create_dir_all(&empty).unwrap();
    let o = run(&["remap", "--input", s(&empty), "--output", s(&dir.path().join("o")), "--mapping", s(&map)]);
    assert_eq!((code(&o), stdout(&o).as_str()), (0, "0 files\n"));

    let bad = dir.path().join("bad");
    MaskImage::new(2, 1, vec![1, 9], "x").unwrap().write_png(&bad.join("oops.png")).unwrap();
    let o = run(&["remap", "--input", s(&bad), "--output", s(&dir.path().join("o2")), "--mapping", s(&map)]);
    assert_eq!(code(&o), 3);
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("oops.png") && err.contains("(1, 0)"), "{err}");
}

#[test]
fn plan_is_deterministic_and_dumps_batches() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.json");
    let b = dir.path().join("b.json");
    let c = dir.path().join("c.json");
    let args = |p: &Path, seed: &str| {
        run(&["plan", "--seed", seed, "--total-iters", "40", "--batch-size", "4", "--out", s(p)])
    };
    assert_eq!(code(&args(&a, "7")), 0);
    assert_eq!(code(&args(&b, "7")), 0);
    assert_eq!(code(&args(&c, "8")), 0);
    let (a, b, c) = (std::fs::read(a).unwrap(), std::fs::read(b).unwrap(), std::fs::read(c).unwrap());
    assert_eq!(a, b);
    assert_ne!(a, c);
    let plan: serde_json::Value = serde_json::from_slice(&a).unwrap();
    for key in ["seed", "total_iters", "batch_size", "phases", "repeat_factors", "training_meta"] {
        assert!(plan.get(key).is_some(), "plan lacks {key}");
    }
    assert_eq!(plan["repeat_factors"]["Cityscapes"], 40);

    let o = run(&["plan", "--total-iters", "40", "--batch-size", "4", "--dump-batches", "3"]);
    let lines: Vec<serde_json::Value> = stdout(&o).lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 3);
    assert_eq!(lines[2]["iter"], 2);
    assert_eq!(lines[0]["items"].as_array().unwrap().len(), 4);
}

#[test]
fn config_file_sits_between_flags_and_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    write(&cfg, r#"{"seed": 7, "total_iters": 40, "batch_size": 4}"#);
    let from_cfg = run(&["--config", s(&cfg), "plan"]);
    let from_flags = run(&["plan", "--seed", "7", "--total-iters", "40", "--batch-size", "4"]);
    assert_eq!(stdout(&from_cfg), stdout(&from_flags));
    let overridden = run(&["--config", s(&cfg), "--seed", "9", "plan"]);
    let plan: serde_json::Value = serde_json::from_str(&stdout(&overridden)).unwrap();
    assert_eq!(plan["seed"], 9);
    assert_eq!(plan["total_iters"], 40);

    write(&cfg, r#"{"sede": 7}"#);
    assert_eq!(code(&run(&["--config", s(&cfg), "plan"])), 2);
}

/// A small dataset with PNG images, a catalog naming it, and a manifest.
struct Toy {
    _dir: tempfile::TempDir,
    root: PathBuf,
    catalog: PathBuf,
    manifest: PathBuf,
    mapping: PathBuf,
}

fn toy_dataset(n: u32) -> Toy {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("toyset");
    for i in 0..n {
        let img = ImageBuffer::new(
            32,
            16,
            (0..32 * 16 * 3).map(|p| ((p as u32 * 7 + i) % 251) as u8).collect(),
        )
        .unwrap();
        fsutil::write_atomic(&root.join(format!("images/train/f{i}.png")), &img.encode_png()).unwrap();
        let data = (0..32 * 16u32).map(|p| (((p % 32) / 4 + (p / 32) / 4 + i) % 5) as u8).collect();
        MaskImage::new(32, 16, data, "Toy")
            .unwrap()
            .write_png(&root.join(format!("masks/train/f{i}.png")))
            .unwrap();
    }
    let catalog = dir.path().join("catalog.json");
    write(
        &catalog,
        &serde_json::json!({"datasets": [{
            "name": "Toy", "scene": "driving", "train_count": n, "val_count": 0,
            "original_classes": 5, "projected_classes": 4, "mapping_file": "toy.csv",
            "image_dir": "images/{split}", "mask_dir": "masks/{split}",
            "image_suffix": ".png", "mask_suffix": ".png"
        }]})
        .to_string(),
    );
    let mapping = dir.path().join("toy.csv");
    write(&mapping, BIJECTIVE_5);
    let manifest = dir.path().join("manifest.jsonl");
    let o = run(&[
        "--catalog", s(&catalog), "manifest", "--source", &format!("Toy={}", s(&root)),
        "--probe-dims", "--out", s(&manifest),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    Toy {
        _dir: dir,
        root,
        catalog,
        manifest,
        mapping,
    }
}

const BIJECTIVE_5: &str = "source_id,source_name,target_id,target_name\n\
0,void,0,void\n1,road,30,road\n2,car,31,car\n3,sky,2,sky\n4,tree,90,tree\n";

#[test]
fn manifest_stats_and_strict_verification() {
    let t = toy_dataset(3);
    let m = Manifest::load(&t.manifest).unwrap();
    assert_eq!(m.len(), 3);
    assert!(m.records().iter().all(|r| r.split == Split::Train && r.width == Some(32)));

    // The catalog expects 3 train images; claim 4 to trigger a warning.
    let text = std::fs::read_to_string(&t.catalog).unwrap().replace("\"train_count\":3", "\"train_count\":4");
    write(&t.catalog, &text);
    let src = format!("Toy={}", s(&t.root));
    let lenient = run(&["--catalog", s(&t.catalog), "manifest", "--source", &src, "--probe-dims"]);
    let strict = run(&["--catalog", s(&t.catalog), "--strict", "manifest", "--source", &src]);
    assert_eq!((code(&lenient), code(&strict)), (0, 1));
    assert_eq!(stdout(&lenient), std::fs::read_to_string(&t.manifest).unwrap());

    let o = run(&[
        "--catalog", s(&t.catalog), "--mapping-dir", s(t.mapping.parent().unwrap()),
        "stats", "--manifest", s(&t.manifest), "--histogram",
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["datasets"]["Toy"]["counts"]["train"], 3);
    let hist = v["datasets"]["Toy"]["histogram"].as_object().unwrap();
    let total: u64 = hist.values().map(|x| x.as_u64().unwrap()).sum();
    let void = (0..3)
        .map(|i| {
            MaskImage::read_png(&t.root.join(format!("masks/train/f{i}.png")), "Toy")
                .unwrap()
                .data()
                .iter()
                .filter(|&&v| v == 0)
                .count() as u64
        })
        .sum::<u64>();
    assert_eq!(total + void, 3 * 32 * 16);
}

#[test]
fn evaluate_pred_equal_gt_scores_one() {
    let t = toy_dataset(3);
    let pred = t.root.join("pred");
    // Predictions in unified ids: remap the ground truth.
    let o = run(&[
        "remap", "--input", s(&t.root.join("masks/train")), "--output", s(&pred),
        "--mapping", s(&t.mapping),
    ]);
    assert_eq!(code(&o), 0);
    let report = t.root.join("report.json");
    let o = run(&[
        "evaluate", "--pred", s(&pred), "--gt", s(&t.manifest), "--mapping", s(&t.mapping),
        "--out", s(&report),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let r: serde_json::Value = serde_json::from_slice(&std::fs::read(&report).unwrap()).unwrap();
    let keys: Vec<&str> = r.as_object().unwrap().keys().map(String::as_str).collect();
    assert_eq!(keys, ["dataset", "classes", "per_class_iou", "miou", "pixel_total"]);
    assert_eq!(r["miou"], 1.0);
    assert_eq!(r["classes"], 4);
    assert_eq!(r["per_class_iou"]["car"], 1.0);

    // Dataset-space masks read as unified predictions back-project wrongly.
    let o = run(&[
        "evaluate", "--pred", s(&t.root.join("masks/train")), "--gt", s(&t.manifest),
        "--mapping", s(&t.mapping),
    ]);
    let r: serde_json::Value = serde_json::from_str(stdout(&o).trim()).unwrap();
    assert!(r["miou"].as_f64().unwrap() < 0.5);

    // Unified diagnostics on the same predictions also score 1.0.
    let o = run(&[
        "evaluate", "--pred", s(&pred), "--gt", s(&t.manifest), "--mapping", s(&t.mapping), "--unified",
    ]);
    let r: serde_json::Value = serde_json::from_str(stdout(&o).trim()).unwrap();
    assert_eq!(r["miou"], 1.0);

    // A missing prediction is a warning, or an error under --strict.
    std::fs::remove_file(pred.join("f1.png")).unwrap();
    let args = [
        "evaluate", "--pred", s(&pred), "--gt", s(&t.manifest), "--mapping", s(&t.mapping),
    ];
    assert_eq!(code(&run(&args)), 0);
    let mut strict = vec!["--strict"];
    strict.extend_from_slice(&args);
    assert_eq!(code(&run(&strict)), 3);
}

#[test]
fn tta_degenerate_equals_direct_argmax() {
    let t = toy_dataset(1);
    let img = t.root.join("images/train/f0.png");
    let out = t.root.join("tta");
    let o = run(&[
        "tta", "--image", s(&img), "--stub", "checkerboard", "--classes", "4", "--ratios", "1.0",
        "--no-flip", "--out", s(&out),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let cfg = TtaConfig {
        ratios: vec![1.0],
        flip: false,
        ..TtaConfig::default()
    };
    let stub = StubPredictor {
        classes: 4,
        mode: StubMode::Checkerboard,
    };
    let req = &tta_requests(&img, 32, 16, &cfg)[0];
    let direct = argmax_mask(&rescale_logits(&stub.logits(req).unwrap(), 32, 16), "unified").unwrap();
    assert_eq!(MaskImage::read_png(&out.join("f0.png"), "unified").unwrap(), direct);
}

#[test]
fn tta_gt_leak_via_fixtures_then_evaluate() {
    let t = toy_dataset(2);
    let manifest = Manifest::load(&t.manifest).unwrap();
    let cfg = TtaConfig {
        base_scale: (128, 64),
        ..TtaConfig::default()
    };
    let rows = parse_mapping_rows("toy", BIJECTIVE_5).unwrap();
    let table = table_from_rows(
        &rows,
        &space_from_rows("Toy", &rows, false).unwrap(),
        &unified_space_from_rows("unified", &rows).unwrap(),
    )
    .unwrap();
    let lut = table.build_lut();
    let leaked: HashMap<PathBuf, MaskImage> = manifest
        .records()
        .iter()
        .map(|r: &SampleRecord| {
            let gt = MaskImage::read_png(&r.mask_path, "Toy").unwrap();
            (r.image_path.clone(), lut.project(&gt).unwrap())
        })
        .collect();
    let stub = StubPredictor {
        classes: 256,
        mode: StubMode::GtLeak(leaked),
    };
    let fixtures = t.root.join("fixtures");
    for r in manifest.records() {
        for req in tta_requests(&r.image_path, 32, 16, &cfg) {
            stub.logits(&req).unwrap().write_sglt(&fixtures.join(fixture_name(&req))).unwrap();
        }
    }
    let pred = t.root.join("pred");
    let o = run(&[
        "tta", "--manifest", s(&t.manifest), "--fixtures", s(&fixtures), "--base-scale", "128x64",
        "--out", s(&pred),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(stdout(&o), "2 images\n");
    let o = run(&["evaluate", "--pred", s(&pred), "--gt", s(&t.manifest), "--mapping", s(&t.mapping)]);
    let r: serde_json::Value = serde_json::from_str(stdout(&o).trim()).unwrap();
    assert_eq!(r["miou"], 1.0);
}

#[test]
fn tta_through_predictor_process() {
    let t = toy_dataset(1);
    let work = t.root.join("work");
    let cmd = format!(
        "{} stub-predictor --stub gt-leak --classes 256 --manifest {} --mapping {} --workdir {}",
        env!("CARGO_BIN_EXE_segunify"),
        s(&t.manifest),
        s(&t.mapping),
        s(&work)
    );
    let pred = t.root.join("pred");
    let o = run(&[
        "tta", "--manifest", s(&t.manifest), "--predictor-cmd", &cmd, "--base-scale", "128x64",
        "--out", s(&pred),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(std::fs::read_dir(&work).unwrap().count(), 12);
    let o = run(&["evaluate", "--pred", s(&pred), "--gt", s(&t.manifest), "--mapping", s(&t.mapping)]);
    let r: serde_json::Value = serde_json::from_str(stdout(&o).trim()).unwrap();
    assert_eq!(r["miou"], 1.0);
}

#[test]
fn predictor_failures_exit_4() {
    let t = toy_dataset(1);
    let pred = t.root.join("pred");
    // The predictor exits immediately without replying.
    let o = run(&["tta", "--manifest", s(&t.manifest), "--predictor-cmd", "true", "--out", s(&pred)]);
    assert_eq!(code(&o), 4, "{}", String::from_utf8_lossy(&o.stderr));
    // Missing fixtures are also a predictor failure.
    let o = run(&[
        "tta", "--manifest", s(&t.manifest), "--fixtures", s(&t.root.join("nowhere")), "--out", s(&pred),
    ]);
    assert_eq!(code(&o), 4, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn stub_predictor_answers_errors_inline() {
    use std::io::Write;
    let dir = tempfile::tempdir().unwrap();
    let mut child = bin()
        .args(["stub-predictor", "--stub", "constant", "--classes", "3", "--workdir", s(dir.path())])
        .stdin(std::process::Stdio::piped())
        .stdout(std::process::Stdio::piped())
        .spawn()
        .unwrap();
    let mut stdin = child.stdin.take().unwrap();
    writeln!(stdin, "not json").unwrap();
    writeln!(stdin, r#"{{"id": 5, "image_path": "a.png", "scale": [4, 2], "flip": false}}"#).unwrap();
    drop(stdin);
    let out = child.wait_with_output().unwrap();
    let lines: Vec<serde_json::Value> = stdout(&out).lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert!(lines[0]["error"].is_string());
    assert_eq!(lines[1]["id"], 5);
    let l = segunify::logits::LogitMap::read_sglt(Path::new(lines[1]["logit_path"].as_str().unwrap())).unwrap();
    assert_eq!(l.shape(), (4, 2, 3));
}

#[test]
fn augment_writes_pairs_and_replayable_log() {
    let t = toy_dataset(2);
    let out_a = t.root.join("aug_a");
    let out_b = t.root.join("aug_b");
    let cfg = t.root.join("cfg.json");
    write(&cfg, r#"{"augment": {"crop": [24, 24]}}"#);
    for out in [&out_a, &out_b] {
        let o = run(&[
            "--config", s(&cfg), "--seed", "3", "augment", "--manifest", s(&t.manifest), "--n", "5",
            "--out", s(out),
        ]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    }
    for name in ["000000.png", "000004_mask.png", "draws.json"] {
        assert_eq!(
            std::fs::read(out_a.join(name)).unwrap(),
            std::fs::read(out_b.join(name)).unwrap()
        );
    }
    let log: serde_json::Value = serde_json::from_slice(&std::fs::read(out_a.join("draws.json")).unwrap()).unwrap();
    let cfg: segunify::augment::AugConfig = serde_json::from_value(log["config"].clone()).unwrap();
    assert_eq!(cfg.crop, (24, 24));
    let sample = &log["samples"][3];
    let draws: segunify::augment::AugDraws = serde_json::from_value(sample["draws"].clone()).unwrap();
    let img = ImageBuffer::load(Path::new(sample["image"].as_str().unwrap())).unwrap();
    let mask = MaskImage::read_png(Path::new(sample["mask"].as_str().unwrap()), "Toy").unwrap();
    let (ri, rm) = segunify::augment::apply_pipeline(&img, &mask, &cfg, &draws).unwrap();
    assert_eq!(ri.encode_png(), std::fs::read(out_a.join("000003.png")).unwrap());
    assert_eq!(rm, MaskImage::read_png(&out_a.join("000003_mask.png"), "Toy").unwrap());
}
