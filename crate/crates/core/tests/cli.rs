use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};
use std::time::{Duration, Instant};

use sha2::{Digest, Sha256};
use transfusion::data::{self, SplitName};
use transfusion::eval::compute_metrics;
use transfusion::train::{load_checkpoint, predict_subset};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_transfusion"))
}

fn run(args: &[&str]) -> Output {
    bin()
        .args(args)
        .env("SOURCE_DATE_EPOCH", "0")
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Hash of every file under `dir`, keyed by relative path.
fn dir_checksum(dir: &Path) -> String {
    fn walk(dir: &Path, root: &Path, out: &mut Vec<(PathBuf, Vec<u8>)>) {
        for e in fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                walk(&p, root, out);
            } else {
                out.push((p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    let mut files = Vec::new();
    walk(dir, dir, &mut files);
    files.sort();
    let mut h = Sha256::new();
    for (name, bytes) in files {
        h.update(name.to_string_lossy().as_bytes());
        h.update(&bytes);
    }
    hex::encode(h.finalize())
}

fn synth_tiny(dir: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["--config", "tiny", "--seed", "7", "--out", s(dir), "synth"];
    args.extend_from_slice(extra);
    run(&args)
}

#[test]
fn synth_counts_and_reproducibility() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    let out = synth_tiny(&a, &["--counts", "2", "--per-count", "1"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(data::load(&a).unwrap().len(), 3);
    assert!(a.join("run_config.json").exists());

    fs::remove_dir_all(&a).unwrap();
    synth_tiny(&a, &[]);
    fs::rename(&a, &b).unwrap();
    synth_tiny(&a, &[]);
    let (ha, hb) = (dir_checksum(&a), dir_checksum(&b));
    assert_eq!(ha, hb);
    assert_eq!(data::load(&a).unwrap().len(), 16);
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("o");
    assert_eq!(code(&run(&["--precision", "f32", "--out", s(&out), "gradcheck"])), 2);
    assert_eq!(code(&run(&["--config", "nope", "gradcheck"])), 2);
    assert_eq!(code(&run(&["synth", "--noise-std", "-1"])), 2);
    assert_eq!(
        code(&run(&[
            "train",
            "--data",
            s(&tmp.path().join("missing")),
            "--out",
            s(&out)
        ])),
        3
    );
    let bad = tmp.path().join("bad.json");
    fs::write(&bad, "{\"model\": {\"d_model\": 7, \"n_heads\": 2}}").unwrap();
    assert_eq!(code(&run(&["--config", s(&bad), "--out", s(&out), "gradcheck"])), 2);

    let help = run(&["--help"]);
    assert_eq!(code(&help), 0);
    let text = String::from_utf8_lossy(&help.stdout);
    for c in ["0  success", "2  invalid", "3  I/O", "4  numerical", "5  check"] {
        assert!(text.contains(c), "help lacks {c:?}");
    }
}

#[test]
fn non_finite_input_exits_4() {
    let tmp = tempfile::tempdir().unwrap();
    let ds_dir = tmp.path().join("ds");
    synth_tiny(&ds_dir, &[]);
    let mut ds = data::load(&ds_dir).unwrap();
    for sample in &mut ds.samples {
        sample.csi.sequence.data_mut()[0] = f64::NAN;
    }
    fs::remove_dir_all(&ds_dir).unwrap();
    data::save(&ds, &ds_dir).unwrap();
    let out = run(&[
        "--config",
        "tiny",
        "--out",
        s(&tmp.path().join("t")),
        "train",
        "--data",
        s(&ds_dir),
        "--epochs",
        "2",
    ]);
    assert_eq!(code(&out), 4, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn train_eval_and_ablate() {
    let tmp = tempfile::tempdir().unwrap();
    let ds_dir = tmp.path().join("ds");
    synth_tiny(&ds_dir, &[]);
    let run_dir = tmp.path().join("run");
    let train = |dir: &Path| {
        run(&[
            "--config",
            "tiny",
            "--out",
            s(dir),
            "train",
            "--data",
            s(&ds_dir),
            "--epochs",
            "3",
        ])
    };
    let out = train(&run_dir);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["best.tfck", "epoch_log.csv", "run_config.json", "test_metrics.json"] {
        assert!(run_dir.join(f).exists(), "{f} missing");
    }
    let log = fs::read_to_string(run_dir.join("epoch_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 4);

    let again = tmp.path().join("again");
    train(&again);
    assert_eq!(
        fs::read(run_dir.join("best.tfck")).unwrap(),
        fs::read(again.join("best.tfck")).unwrap()
    );
    assert_eq!(log, fs::read_to_string(again.join("epoch_log.csv")).unwrap());

    let ckpt = run_dir.join("best.tfck");
    let eval_dir = tmp.path().join("eval");
    let out = run(&[
        "--out",
        s(&eval_dir),
        "eval",
        "--checkpoint",
        s(&ckpt),
        "--data",
        s(&ds_dir),
        "--split",
        "test",
        "--json",
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    for k in ["mae", "mse", "mape", "r2"] {
        assert!(v.get(k).is_some(), "missing {k}");
    }
    let ds = data::load(&ds_dir).unwrap();
    let test = ds.subset(SplitName::Test).unwrap();
    assert_eq!(v["m"].as_u64().unwrap() as usize, test.len());
    let (model, _) = load_checkpoint(&ckpt).unwrap();
    let want = compute_metrics(&predict_subset(&model, &test, 32).unwrap(), &test.ys).unwrap();
    assert_eq!(v["mae"].as_f64().unwrap(), want.mae);

    let out = run(&[
        "--config",
        "tiny",
        "--out",
        s(&tmp.path().join("wifi")),
        "train",
        "--data",
        s(&ds_dir),
        "--epochs",
        "1",
        "--streams",
        "wifi_only",
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let (m, _) = load_checkpoint(&tmp.path().join("wifi/best.tfck")).unwrap();
    assert!(m.params().names().iter().all(|n| !n.starts_with("vision")));

    let abl = tmp.path().join("abl");
    let out = run(&[
        "--config",
        "tiny",
        "--out",
        s(&abl),
        "ablate",
        "--data",
        s(&ds_dir),
        "--epochs",
        "2",
        "--json",
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["rows"].as_array().unwrap().len(), 5);
    let csv = fs::read_to_string(abl.join("ablation.csv")).unwrap();
    assert_eq!(csv.lines().count(), 6);
}

#[test]
fn hampel_and_gradcheck() {
    let tmp = tempfile::tempdir().unwrap();
    let input = tmp.path().join("x.tftn");
    let x = transfusion::tensor::Tensor::from_vec(vec![1.0, 1.0, 1.0, 100.0, 1.0, 1.0, 1.0]).unwrap();
    transfusion::tensor::write_tensor(&input, &x, transfusion::tensor::DType::F64).unwrap();
    let out_dir = tmp.path().join("h");
    let out = run(&[
        "--out",
        s(&out_dir),
        "hampel",
        "--input",
        s(&input),
        "--half-width",
        "3",
        "--json",
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let filtered = transfusion::tensor::read_tensor(&out_dir.join("hampel_filtered.tftn")).unwrap();
    assert_eq!(filtered.data(), &[1.0; 7]);
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["outliers"], 1);

    let out = run(&[
        "--config",
        "tiny",
        "--out",
        s(&tmp.path().join("g")),
        "gradcheck",
        "--seeds",
        "1",
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).contains("0 failed"));
}

#[test]
fn killed_training_leaves_valid_best_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let ds_dir = tmp.path().join("ds");
    synth_tiny(&ds_dir, &["--per-count", "20"]);
    let run_dir = tmp.path().join("run");
    let mut child = bin()
        .args([
            "--config",
            "tiny",
            "--out",
            s(&run_dir),
            "train",
            "--data",
            s(&ds_dir),
            "--epochs",
            "100000",
        ])
        .stdout(Stdio::null())
        .stderr(Stdio::null())
        .spawn()
        .unwrap();
    let ckpt = run_dir.join("best.tfck");
    let log_path = run_dir.join("epoch_log.csv");
    let start = Instant::now();
    while fs::read_to_string(&log_path).map_or(0, |l| l.lines().count()) < 6 {
        assert!(start.elapsed() < Duration::from_secs(120), "training never progressed");
        assert!(child.try_wait().unwrap().is_none(), "training exited early");
        std::thread::sleep(Duration::from_millis(20));
    }
    child.kill().unwrap();
    child.wait().unwrap();

    let (model, adam) = load_checkpoint(&ckpt).expect("checkpoint survives the kill");
    assert!(adam.is_some());
    let ds = data::load(&ds_dir).unwrap();
    let val = ds.subset(SplitName::Val).unwrap();
    let preds = predict_subset(&model, &val, 32).unwrap();
    assert!(preds.iter().all(|p| p.is_finite()));
    let mae = preds.iter().zip(&val.ys).map(|(p, y)| (p - y).abs()).sum::<f64>() / val.len() as f64;

    // The checkpoint is saved before its log line, so it is either the last
    // logged best or a newer, better one.
    let bests: Vec<f64> = fs::read_to_string(&log_path)
        .unwrap()
        .lines()
        .skip(1)
        .filter_map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            (f.len() == 5 && f[4] == "true").then(|| f[2].parse().unwrap())
        })
        .collect();
    let last = *bests.last().unwrap();
    assert!(
        (mae - last).abs() <= 1e-12 || mae < last,
        "checkpoint MAE {mae}, logged best {last}"
    );
}
