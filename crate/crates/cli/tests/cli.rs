use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use trnet::data::{encode_idx_images, encode_idx_labels};
use trnet::io::{save_trt, Checkpoint};
use trnet::ring::gaussian_ring;

fn root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn trnet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_trnet"))
        .args(args)
        .env_remove("TRNET_SEED")
        .output()
        .expect("spawn trnet")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn spec(name: &str) -> String {
    root().join("specs").join(name).to_string_lossy().into_owned()
}

fn totals_line(text: &str) -> String {
    text.lines()
        .find(|l| l.starts_with("total"))
        .expect("totals line")
        .to_string()
}

#[test]
fn analyze_symbolic_totals() {
    let out = trnet(&["analyze", &spec("lenet300.json"), "--symbolic"]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    assert!(totals_line(&stdout(&out)).contains("91 r^2"));

    let out = trnet(&["analyze", &spec("resnet32.json"), "--symbolic"]);
    assert_eq!(out.status.code(), Some(0));
    assert!(totals_line(&stdout(&out)).contains("908 r^2"));
}

#[test]
fn analyze_machine_forms_agree() {
    let json = trnet(&["analyze", &spec("lenet5.json"), "--json", "--rank", "3"]);
    let v: Value = serde_json::from_slice(&json.stdout).unwrap();
    assert_eq!(v["total"]["params_r2"], 130);
    assert_eq!(v["total"]["params_tr"], 130 * 9);

    let csv = stdout(&trnet(&["analyze", &spec("lenet5.json"), "--csv", "--rank", "3"]));
    let header: Vec<&str> = csv.lines().next().unwrap().split(',').collect();
    let col = header.iter().position(|&h| h == "params_r2").expect("params_r2 column");
    let total = csv.lines().find(|l| l.starts_with("total,")).unwrap();
    assert_eq!(total.split(',').nth(col), Some("130"));
}

#[test]
fn analyze_empty_layers_is_zero() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("empty.json");
    fs::write(&path, r#"{"name": "empty", "layers": []}"#).unwrap();
    let out = trnet(&["analyze", path.to_str().unwrap(), "--json"]);
    assert_eq!(out.status.code(), Some(0));
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["total"]["params_uncompressed"], 0);
    assert_eq!(v["total"]["params_r2"], 0);
}

#[test]
fn schema_errors_exit_2_with_pointer() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    fs::write(
        &path,
        r#"{"name": "x", "layers": [{"name": "a", "kind": "fc", "in_shape": [4, 4], "out_shape": [2, -1]}]}"#,
    )
    .unwrap();
    let out = trnet(&["analyze", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("/layers/0/out_shape/1"), "{}", stderr(&out));

    let out = trnet(&["analyze", dir.path().join("missing.json").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    let out = trnet(&["verify", "--suite", "bogus"]);
    assert_eq!(out.status.code(), Some(2));
    let out = trnet(&["plan", "--dims", "2,2,2,2,2,2,2,2,2,2,2,2,2", "--all"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn plan_examples() {
    let out = trnet(&["plan", "--dims", "2,2,2,2", "--rank", "3", "--all"]);
    assert_eq!(out.status.code(), Some(0));
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["plans"].as_array().unwrap().len(), 5);
    assert_eq!(v["best"]["tree"], "((0,1),(2,3))");
    let min = v["plans"]
        .as_array()
        .unwrap()
        .iter()
        .map(|p| p["flops_2x"].as_u64().unwrap())
        .min();
    assert_eq!(v["best"]["flops_2x"].as_u64(), min);

    let v: Value = serde_json::from_slice(&trnet(&["plan", "--dims", "4,7"]).stdout).unwrap();
    assert_eq!(v["plans"].as_array().unwrap().len(), 1);

    let out = trnet(&["plan", "--dims", "2,2,2,2,2,2,2,2", "--check-theorem1"]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["theorem1"]["plans_checked"], 429);
    assert_eq!(v["theorem1"]["pass"], true);
    assert!(stderr(&out).contains("429 plans inside bounds"));
}

#[test]
fn decompose_recovers_planted_ring() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("x.trt");
    let ring_out = dir.path().join("ring.trm");
    let x = gaussian_ring(&[3, 4, 3, 2], 2, 0.7, 11).unwrap().construct().unwrap();
    save_trt(&input, &x).unwrap();
    let args = [
        "decompose",
        input.to_str().unwrap(),
        "--rank",
        "2",
        "--sweeps",
        "500",
        "--restarts",
        "10",
        "--target-fit",
        "1e-9",
        "--max-fit",
        "1e-6",
        "--out",
        ring_out.to_str().unwrap(),
    ];
    let out = trnet(&args);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(v["fit_error"].as_f64().unwrap() <= 1e-6);
    let history: Vec<f64> = v["history"]
        .as_array()
        .unwrap()
        .iter()
        .map(|h| h.as_f64().unwrap())
        .collect();
    assert!(history.windows(2).all(|w| w[1] <= w[0]));

    let ck = Checkpoint::load(&ring_out).unwrap();
    for i in 0..4 {
        assert_eq!(ck.get(&format!("core{i}")).unwrap().shape()[0], 2);
    }
    assert_eq!(trnet(&args).stdout, out.stdout, "decompose is deterministic");
}

#[test]
fn decompose_max_fit_failure_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("x.trt");
    let x = gaussian_ring(&[4, 4, 4], 3, 1.0, 5).unwrap().construct().unwrap();
    save_trt(&input, &x).unwrap();
    let out = trnet(&["decompose", input.to_str().unwrap(), "--rank", "1", "--max-fit", "1e-8"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn verify_single_suite_prints_checks() {
    let out = trnet(&["verify", "--suite", "construct"]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let text = stdout(&out);
    assert!(text.lines().all(|l| l.starts_with("[construct] PASS")), "{text}");

    let out = trnet(&["verify", "--suite", "fc-equiv", "--json"]);
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v[0]["suite"], "fc-equiv");
    assert!(v[0]["checks"][0]["observed"].as_f64().unwrap() <= 1e-10);
}

fn blob_config(dir: &Path, epochs: usize, optimizer: &str) -> PathBuf {
    let path = dir.join("train.json");
    let text = format!(
        r#"{{
  "arch": {{"name": "tiny", "layers": [
    {{"name": "fc1", "kind": "fc", "in_shape": [4, 4], "out_shape": [2, 4], "bias": true}},
    {{"name": "fc2", "kind": "fc", "in_shape": [2, 4], "out_shape": [3], "bias": true}}
  ]}},
  "rank": 2,
  "optimizer": {optimizer},
  "batch_size": 16,
  "epochs": {epochs},
  "seed": 3,
  "dataset": {{"kind": "blobs", "classes": 3, "per_class": 40, "test_per_class": 20, "separation": 5.0}}
}}"#
    );
    fs::write(&path, text).unwrap();
    path
}

fn train_run(config: &Path, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec![
        "--no-timestamps",
        "train",
        "--config",
        config.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ];
    args.extend_from_slice(extra);
    trnet(&args)
}

#[test]
fn train_outputs_are_byte_identical_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    let config = blob_config(dir.path(), 5, r#"{"kind": "adam", "lr": 0.01}"#);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let o = train_run(&config, out, &[]);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    }
    for file in ["log.csv", "model.trm", "model.json", "config.echo.json"] {
        assert_eq!(
            fs::read(a.join(file)).unwrap(),
            fs::read(b.join(file)).unwrap(),
            "{file}"
        );
    }
    let log = fs::read_to_string(a.join("log.csv")).unwrap();
    assert_eq!(log.lines().next(), Some("epoch,train_err,test_err,loss,wall_time"));
    assert_eq!(log.lines().count(), 1 + 6);
    assert!(log.lines().skip(1).all(|l| l.ends_with(",0")));
    let ck = Checkpoint::load(a.join("model.trm")).unwrap();
    assert!(ck.get("fc1.core0").is_some());
    assert!(ck.get("fc2.bias").is_some());
}

#[test]
fn seed_flag_overrides_config_seed() {
    let dir = tempfile::tempdir().unwrap();
    let config = blob_config(dir.path(), 1, r#"{"kind": "adam", "lr": 0.01}"#);
    let (a, b, c) = (dir.path().join("a"), dir.path().join("b"), dir.path().join("c"));
    train_run(&config, &a, &[]);
    let o = trnet(&[
        "--seed",
        "99",
        "--no-timestamps",
        "train",
        "--config",
        config.to_str().unwrap(),
        "--out",
        b.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0));
    let o = Command::new(env!("CARGO_BIN_EXE_trnet"))
        .args([
            "--no-timestamps",
            "train",
            "--config",
            config.to_str().unwrap(),
            "--out",
            c.to_str().unwrap(),
        ])
        .env("TRNET_SEED", "99")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(0));
    let model = |d: &Path| fs::read(d.join("model.trm")).unwrap();
    assert_ne!(model(&a), model(&b));
    assert_eq!(model(&b), model(&c));
    let echo: Value = serde_json::from_slice(&fs::read(b.join("config.echo.json")).unwrap()).unwrap();
    assert_eq!(echo["seed"], 99);
}

#[test]
fn train_config_schema_error_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let config = blob_config(dir.path(), 1, r#"{"kind": "adam", "lr": 0.01}"#);
    let text = fs::read_to_string(&config)
        .unwrap()
        .replace(r#""batch_size": 16"#, r#""batch_size": 0"#);
    fs::write(&config, text).unwrap();
    let o = train_run(&config, &dir.path().join("o"), &[]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("/batch_size"), "{}", stderr(&o));
}

#[test]
fn diverging_training_exits_1_and_keeps_finite_model() {
    let dir = tempfile::tempdir().unwrap();
    let config = blob_config(dir.path(), 20, r#"{"kind": "sgd", "lr": 1e12}"#);
    let out = dir.path().join("o");
    let o = train_run(&config, &out, &[]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
    assert!(stderr(&o).contains("aborted"));
    let ck = Checkpoint::load(out.join("model.trm")).unwrap();
    let core = ck.get("fc1.core0").unwrap();
    assert!(core.data().iter().all(|v| v.is_finite()));
}

#[test]
fn mnist_training_reads_idx_directory() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("mnist");
    fs::create_dir(&data).unwrap();
    let (n, side) = (20usize, 28usize);
    let pixels: Vec<u8> = (0..n * side * side).map(|i| ((i * 37) % 256) as u8).collect();
    let labels: Vec<u8> = (0..n).map(|i| (i % 10) as u8).collect();
    let images = encode_idx_images(side, side, &pixels);
    let labels = encode_idx_labels(&labels);
    for prefix in ["train", "t10k"] {
        fs::write(data.join(format!("{prefix}-images-idx3-ubyte")), &images).unwrap();
        fs::write(data.join(format!("{prefix}-labels-idx1-ubyte")), &labels).unwrap();
    }
    let config = dir.path().join("mnist.json");
    let arch = spec("lenet300.json");
    fs::write(
        &config,
        format!(r#"{{"arch": {arch:?}, "rank": 2, "epochs": 1, "batch_size": 10, "dataset": {{"kind": "mnist"}}}}"#),
    )
    .unwrap();
    let out = dir.path().join("o");
    let o = train_run(&config, &out, &[]);
    assert_eq!(o.status.code(), Some(2), "missing --data-dir is a usage error");
    let o = train_run(&config, &out, &["--data-dir", data.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert_eq!(fs::read_to_string(out.join("log.csv")).unwrap().lines().count(), 3);
}
