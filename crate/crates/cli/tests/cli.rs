use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn cbln(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cbln"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

const SMALL: [&str; 6] = [
    "--set",
    "data.train_count=6",
    "--set",
    "data.test_count=24",
    "--set",
    "data.t=12",
];

fn generate(dir: &Path, seed: &str) {
    let mut args = vec!["generate", "--seed", seed, "--out", dir.to_str().unwrap()];
    args.extend(SMALL);
    let o = cbln(&args);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let o = cbln(&["generate", "--bogus"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("Usage"));
    assert_eq!(cbln(&[]).status.code(), Some(2));
}

#[test]
fn runtime_failures_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let o = cbln(&["generate", "--out", out, "--set", "model.nonexistent=3"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("nonexistent"));
    let missing = dir.path().join("missing.json");
    let o = cbln(&["eval", "--out", out, "--data", missing.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn generate_is_byte_identical_across_runs() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    generate(a.path(), "7");
    generate(b.path(), "7");
    for f in ["train.json", "train.f32", "test.json", "test.f32"] {
        assert_eq!(
            fs::read(a.path().join(f)).unwrap(),
            fs::read(b.path().join(f)).unwrap(),
            "{f}"
        );
    }
    let c = tempfile::tempdir().unwrap();
    generate(c.path(), "8");
    assert_ne!(
        fs::read(a.path().join("train.f32")).unwrap(),
        fs::read(c.path().join("train.f32")).unwrap()
    );
}

#[test]
fn gradcheck_passes_on_toy_config() {
    let dir = tempfile::tempdir().unwrap();
    let o = cbln(&["gradcheck", "--out", dir.path().to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    for module in [
        "tensor-core",
        "video-encoder",
        "query-encoder",
        "mmsa",
        "mcbl",
        "loss",
    ] {
        let line = text
            .lines()
            .find(|l| l.starts_with(module))
            .unwrap_or_else(|| panic!("{text}"));
        assert!(line.contains("max rel err") && line.contains(" < 1e-4"), "{line}");
    }
}

#[test]
fn untrained_eval_is_near_chance() {
    let dir = tempfile::tempdir().unwrap();
    generate(dir.path(), "0");
    let data = dir.path().join("test.json");
    let mut args = vec![
        "eval",
        "--out",
        dir.path().to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
    ];
    args.extend(SMALL);
    let o = cbln(&args);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let report: serde_json::Value =
        serde_json::from_slice(&fs::read(dir.path().join("report.json")).unwrap()).unwrap();
    let r1 = report
        .as_array()
        .unwrap()
        .iter()
        .find(|m| m["metric"] == "R@1,IoU=0.7")
        .unwrap()["value"]
        .as_f64()
        .unwrap();
    // 78 valid cells on a 12-frame map; a handful lie within IoU 0.7 of any gt.
    assert!(r1 <= 30.0, "{r1}");
    assert!(stdout(&o).contains("R@5,IoU=0.5: "));
}

#[test]
fn train_score_and_eval_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    generate(dir.path(), "0");
    let train = dir.path().join("train.json");
    let mut args = vec![
        "train",
        "--out",
        out,
        "--data",
        train.to_str().unwrap(),
        "--set",
        "train.epochs=2",
    ];
    args.extend(SMALL);
    let o = cbln(&args);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(dir.path().join("loss.csv")).unwrap();
    assert!(csv.starts_with("step,loss\n1,"));
    assert_eq!(csv.lines().count(), 1 + 2);

    let ckpt = dir.path().join("model.ckpt");
    let map = dir.path().join("map.csv");
    let o = cbln(&[
        "score",
        "--out",
        out,
        "--data",
        train.to_str().unwrap(),
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--index",
        "1",
        "--dump-map",
        map.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("best segment ("));
    let rows: Vec<String> = fs::read_to_string(&map)
        .unwrap()
        .lines()
        .map(str::to_owned)
        .collect();
    assert_eq!(rows.len(), 12);
    assert!(rows.iter().all(|r| r.split(',').count() == 12));

    let o = cbln(&[
        "eval",
        "--out",
        out,
        "--data",
        train.to_str().unwrap(),
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--n",
        "1",
        "--iou",
        "0.5",
    ]);
    assert!(o.status.success());
    assert_eq!(
        stdout(&o).lines().next().unwrap().split(':').next(),
        Some("R@1,IoU=0.5")
    );
}
