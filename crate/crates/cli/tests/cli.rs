use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn amhnet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_amhnet"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = amhnet(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn assert_one_line_error(out: &Output) {
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert_eq!(err.lines().count(), 1, "stderr: {err:?}");
    assert!(err.starts_with("error: "), "stderr: {err:?}");
}

const TINY_DATA: &str = "train=3\ntest=2\nheight=32\nwidth=32\nseed=4\n";
const TINY_MODEL: &str = "front_channels=3,3,3,3\nbranch_channels=3\nfused_channels=3\nlr=0.001\naccumulate=2\n";

fn dataset(dir: &Path) {
    fs::write(dir.join("data.kv"), TINY_DATA).unwrap();
    fs::write(dir.join("model.kv"), TINY_MODEL).unwrap();
    ok(&["generate", "--config", p(&dir.join("data.kv")), "--out", p(&dir.join("data"))]);
}

#[test]
fn generate_writes_manifests_and_images() {
    let dir = tempfile::tempdir().unwrap();
    dataset(dir.path());
    let data = dir.path().join("data");
    let train = fs::read_to_string(data.join("train.tsv")).unwrap();
    assert_eq!(train.lines().count(), 3);
    assert_eq!(fs::read_to_string(data.join("test.tsv")).unwrap().lines().count(), 2);
    assert!(data.join("train_0000.pgm").is_file());
    assert!(data.join("test_0001_gt.pgm").is_file());
}

#[test]
fn train_infer_eval_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    dataset(dir.path());
    let d = dir.path();
    let ckpt = d.join("flag.ckpt");
    let log = d.join("metrics.jsonl");
    let (cfg, manifest) = (d.join("model.kv"), d.join("data/train.tsv"));
    let args = [
        "train",
        "--config",
        p(&cfg),
        "--manifest",
        p(&manifest),
        "--out",
        p(&ckpt),
        "--iters",
        "4",
        "--seed",
        "9",
        "--log",
        p(&log),
    ];
    ok(&args);
    let lines: Vec<String> = fs::read_to_string(&log).unwrap().lines().map(String::from).collect();
    assert_eq!(lines.len(), 4);
    let first: serde_json::Value = serde_json::from_str(&lines[0]).unwrap();
    assert!(first["loss"].as_f64().unwrap() > 0.0);

    let maps = d.join("maps");
    let img = d.join("data/test_0000.pgm");
    let printed = ok(&["infer", "--checkpoint", p(&ckpt), "--image", p(&img), "--out", p(&maps)]);
    // three level-1 heads, the level-2 head, and the fused map
    assert_eq!(printed.lines().count(), 5);
    for name in ["head_1", "head_2", "head_3", "head_4", "fused"] {
        assert!(maps.join(format!("{name}.pgm")).is_file(), "{name}");
    }

    let preds = d.join("preds");
    ok(&[
        "infer",
        "--checkpoint",
        p(&ckpt),
        "--manifest",
        p(&d.join("data/test.tsv")),
        "--out",
        p(&preds),
    ]);
    let json = d.join("eval.json");
    let table = ok(&["eval", "--pred", p(&preds), "--gt", p(&d.join("data")), "--json", p(&json)]);
    assert!(table.starts_with("images 2\n"), "{table}");
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&json).unwrap()).unwrap();
    assert_eq!(v["curve"]["points"].as_array().unwrap().len(), 99);
}

#[test]
fn baseline_infer_writes_one_head_plus_fused() {
    let dir = tempfile::tempdir().unwrap();
    dataset(dir.path());
    let d = dir.path();
    let ckpt = d.join("base.ckpt");
    ok(&[
        "train",
        "--config",
        p(&d.join("model.kv")),
        "--manifest",
        p(&d.join("data/train.tsv")),
        "--out",
        p(&ckpt),
        "--iters",
        "2",
        "--variant",
        "baseline",
    ]);
    let maps = d.join("maps");
    let img = d.join("data/test_0000.pgm");
    ok(&["infer", "--checkpoint", p(&ckpt), "--image", p(&img), "--out", p(&maps)]);
    let n = fs::read_dir(&maps).unwrap().count();
    assert_eq!(n, 2);
}

#[test]
fn training_is_deterministic_given_seed() {
    let dir = tempfile::tempdir().unwrap();
    dataset(dir.path());
    let d = dir.path();
    let run = |name: &str, seed: &str| {
        let out = d.join(name);
        ok(&[
            "train",
            "--config",
            p(&d.join("model.kv")),
            "--manifest",
            p(&d.join("data/train.tsv")),
            "--out",
            p(&out),
            "--iters",
            "4",
            "--seed",
            seed,
            "--variant",
            "plag",
            "--sign",
            "minus",
        ]);
        fs::read(out).unwrap()
    };
    let a = run("a.ckpt", "5");
    assert_eq!(a, run("b.ckpt", "5"));
    assert_ne!(a, run("c.ckpt", "6"));
}

#[test]
fn eval_of_ground_truth_against_itself_is_perfect() {
    let dir = tempfile::tempdir().unwrap();
    dataset(dir.path());
    let d = dir.path();
    let gts = d.join("gt_only");
    fs::create_dir(&gts).unwrap();
    for i in 0..2 {
        let name = format!("test_{i:04}_gt.pgm");
        fs::copy(d.join("data").join(&name), gts.join(&name)).unwrap();
    }
    let table = ok(&["eval", "--pred", p(&gts), "--gt", p(&gts)]);
    assert!(table.contains("ODS 1.0000"), "{table}");
    assert!(table.contains("OIS 1.0000"), "{table}");
}

#[test]
fn verify_single_suite_prints_table() {
    let out = ok(&["verify", "conv", "--instances", "5", "--seed", "2"]);
    let row = out.lines().nth(1).unwrap();
    assert!(row.starts_with("conv"), "{out}");
    assert!(row.ends_with("PASS"), "{out}");
}

#[test]
fn errors_are_single_lines_with_nonzero_exit() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.ckpt");
    let img = dir.path().join("nope.pgm");
    assert_one_line_error(&amhnet(&[
        "infer",
        "--checkpoint",
        p(&missing),
        "--image",
        p(&img),
        "--out",
        p(dir.path()),
    ]));
    assert_one_line_error(&amhnet(&["verify", "no_such_suite"]));
    assert_one_line_error(&amhnet(&["train", "--variant", "huge"]));
    assert_one_line_error(&amhnet(&["eval", "--pred", "/nonexistent", "--gt", "/nonexistent"]));

    let bad = dir.path().join("bad.kv");
    fs::write(&bad, "colour=blue\n").unwrap();
    let out = amhnet(&[
        "train",
        "--config",
        p(&bad),
        "--manifest",
        p(&dir.path().join("m.tsv")),
        "--out",
        p(&missing),
    ]);
    assert_one_line_error(&out);
    assert!(String::from_utf8_lossy(&out.stderr).contains("colour"));

    let garbage = dir.path().join("garbage.pgm");
    fs::write(&garbage, b"P6\n1 1\n255\nx").unwrap();
    let ckdir = tempfile::tempdir().unwrap();
    let out = amhnet(&["eval", "--pred", p(dir.path()), "--gt", p(ckdir.path())]);
    assert_one_line_error(&out);
}
