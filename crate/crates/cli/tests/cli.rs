use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;
use std::process::{Command, Output, Stdio};

use latode::checkpoint::Checkpoint;
use latode::model::ModelParams;
use latode::training::TrainConfig;
use serde_json::Value;

fn latode(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_latode")).args(args).output().unwrap()
}

fn ok(out: &Output) {
    assert!(out.status.success(), "exit {:?}\n{}", out.status.code(), String::from_utf8_lossy(&out.stderr));
}

const SMALL_MODEL: [&str; 14] = [
    "--set", "latent_dim=3",
    "--set", "encoder_hidden=6",
    "--set", "noise_dim=1",
    "--set", "dynamics_hidden=[8]",
    "--set", "decoder_hidden=[8]",
    "--set", "classifier_hidden=[4]",
    "--set", "batch_size=4",
];

fn gen_icu(dir: &Path) {
    ok(&latode(&[
        "gen-data",
        "--set", "kind=icu",
        "--set", "icu.n_patients=20",
        "--set", "icu.seed=3",
        "--out-dir", dir.to_str().unwrap(),
    ]));
}

fn train_small(data: &Path, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["train", "--data", data.to_str().unwrap(), "--out-dir", out.to_str().unwrap(), "--set", "epochs=2"];
    args.extend(SMALL_MODEL);
    args.extend(extra);
    latode(&args)
}

#[test]
fn gen_data_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    gen_icu(&a);
    gen_icu(&b);
    for f in ["train.json", "test.json", "manifest.json"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{}", f);
    }
    let m: Value = serde_json::from_slice(&std::fs::read(a.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(m["seed"], 3);
    assert_eq!(m["command"], "gen-data");
    assert_eq!(m["config"]["icu"]["n_patients"], 20);
    assert_eq!(m["artifacts"].as_array().unwrap().len(), 3);
    assert_eq!(m["version"], env!("CARGO_PKG_VERSION"));
    let test: Value = serde_json::from_slice(&std::fs::read(a.join("test.json")).unwrap()).unwrap();
    assert_eq!(test.as_array().unwrap().len(), 4);
}

#[test]
fn zero_learning_rate_checkpoint_equals_initialization() {
    let tmp = tempfile::tempdir().unwrap();
    gen_icu(&tmp.path().join("data"));
    let out = tmp.path().join("run");
    ok(&train_small(&tmp.path().join("data/train.json"), &out, &["--set", "learning_rate=0", "--set", "seed=11"]));
    let ck = Checkpoint::load(out.join("model.ckpt")).unwrap();
    let cfg = TrainConfig {
        latent_dim: 3,
        encoder_hidden: 6,
        noise_dim: 1,
        dynamics_hidden: vec![8],
        decoder_hidden: vec![8],
        classifier_hidden: vec![4],
        ..TrainConfig::default()
    };
    assert_eq!(ck.params, ModelParams::init(&cfg.architecture(4), cfg.obs_noise, 11));
    let log = std::fs::read_to_string(out.join("train_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 2);
    let m: Value = serde_json::from_slice(&std::fs::read(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(m["seed"], 11);
    assert_eq!(m["config"]["learning_rate"], 0.0);
    assert_eq!(m["inputs"].as_array().unwrap().len(), 1);
    assert_eq!(ck.metadata["config_hash"], m["config_hash"].as_str().unwrap());
}

#[test]
fn eval_and_predict_write_documents() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    gen_icu(&data);
    let run = tmp.path().join("run");
    ok(&train_small(&data.join("train.json"), &run, &[]));
    let ck = run.join("model.ckpt");
    let ev = tmp.path().join("eval");
    ok(&latode(&[
        "eval",
        "--checkpoint", ck.to_str().unwrap(),
        "--data", data.join("test.json").to_str().unwrap(),
        "--baseline-train", data.join("train.json").to_str().unwrap(),
        "--out-dir", ev.to_str().unwrap(),
    ]));
    let m: Value = serde_json::from_slice(&std::fs::read(ev.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(m["schema_version"], 1);
    assert_eq!(m["per_fraction"].as_array().unwrap().len(), 5);
    assert!(m["accuracy"].is_number());
    assert!(m["baseline_auc"].is_number() || m["baseline_auc"].is_null());
    assert!(ev.join("manifest.json").exists());

    let test: Value = serde_json::from_slice(&std::fs::read(data.join("test.json")).unwrap()).unwrap();
    let id = test[0]["id"].as_str().unwrap();
    let pr = tmp.path().join("predict");
    ok(&latode(&[
        "predict",
        "--checkpoint", ck.to_str().unwrap(),
        "--data", data.join("test.json").to_str().unwrap(),
        "--series-id", id,
        "--set", "members=3",
        "--set", "knots_per_window=8",
        "--fraction", "0.6",
        "--seed", "5",
        "--out-dir", pr.to_str().unwrap(),
    ]));
    let doc: Value = serde_json::from_slice(&std::fs::read(pr.join("ensemble.json")).unwrap()).unwrap();
    assert_eq!(doc["series_id"], id);
    assert_eq!(doc["members"].as_array().unwrap().len(), 3);
    assert_eq!(doc["seed"], 5);

    let missing = latode(&[
        "predict",
        "--checkpoint", ck.to_str().unwrap(),
        "--data", data.join("test.json").to_str().unwrap(),
        "--series-id", "nobody",
        "--out-dir", pr.to_str().unwrap(),
    ]);
    assert_eq!(missing.status.code(), Some(1));
}

#[test]
fn exit_codes() {
    assert_eq!(latode(&["--help"]).status.code(), Some(0));
    assert_eq!(latode(&["train", "--bogus"]).status.code(), Some(1));
    assert_eq!(latode(&[]).status.code(), Some(1));
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("x");
    let o = out.to_str().unwrap();
    // configuration problems
    assert_eq!(latode(&["gen-data", "--set", "kind=weather", "--out-dir", o]).status.code(), Some(1));
    assert_eq!(latode(&["gen-data", "--set", "icu.n_patients=0", "--out-dir", o]).status.code(), Some(1));
    let bad = latode(&["gen-data", "--set", "test_share=2.0", "--out-dir", o]);
    assert_eq!(bad.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&bad.stderr).contains("test_share"));
    // runtime problems
    let missing = tmp.path().join("missing.json");
    assert_eq!(train_small(&missing, &out, &[]).status.code(), Some(2));
    gen_icu(&tmp.path().join("data"));
    let r = train_small(&tmp.path().join("data/train.json"), &out, &["--set", "learning_rate=-1.0"]);
    assert_eq!(r.status.code(), Some(1));
    std::fs::write(tmp.path().join("junk.ckpt"), b"not a checkpoint").unwrap();
    let e = latode(&[
        "eval",
        "--checkpoint", tmp.path().join("junk.ckpt").to_str().unwrap(),
        "--data", tmp.path().join("data/test.json").to_str().unwrap(),
        "--out-dir", o,
    ]);
    assert_eq!(e.status.code(), Some(1));
}

#[test]
fn serve_answers_health_over_http() {
    let tmp = tempfile::tempdir().unwrap();
    gen_icu(&tmp.path().join("data"));
    let run = tmp.path().join("run");
    ok(&train_small(&tmp.path().join("data/train.json"), &run, &["--set", "epochs=1"]));
    let mut child = Command::new(env!("CARGO_BIN_EXE_latode"))
        .args(["serve", "--checkpoint", run.join("model.ckpt").to_str().unwrap(), "--port", "0"])
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    let mut lines = BufReader::new(child.stderr.take().unwrap()).lines();
    let addr = loop {
        let line = lines.next().expect("server exited").unwrap();
        if let Some(i) = line.find("http://") {
            break line[i + 7..].trim().to_string();
        }
    };
    let mut s = std::net::TcpStream::connect(&addr).unwrap();
    s.write_all(b"GET /health HTTP/1.1\r\nHost: x\r\nConnection: close\r\n\r\n").unwrap();
    let mut resp = String::new();
    s.read_to_string(&mut resp).unwrap();
    child.kill().unwrap();
    let _ = child.wait();
    assert!(resp.starts_with("HTTP/1.1 200"), "{}", resp);
    let body: Value = serde_json::from_str(resp.split_once("\r\n\r\n").unwrap().1).unwrap();
    assert_eq!(body["status"], "ready");
    let file_hash = latode::checkpoint::sha256_hex(&std::fs::read(run.join("model.ckpt")).unwrap());
    assert_eq!(body["checkpoint_hash"], file_hash);
}
