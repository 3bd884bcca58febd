use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn port(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_port"))
        .args(args)
        .output()
        .expect("spawn port")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stdout_json(out: &Output) -> Value {
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).expect("json on stdout")
}

#[test]
fn bad_input_exits_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.jsonl");
    let out = port(&[
        "stats",
        "--annotations",
        s(&missing),
        "--out",
        s(dir.path()),
    ]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.starts_with("error[input]:"), "{err}");
    assert_eq!(err.trim_end().lines().count(), 1);

    let out = port(&["gen-data", "--out", s(dir.path()), "--set", "bogus=1"]);
    assert_eq!(out.status.code(), Some(2));

    let bad = dir.path().join("bad.jsonl");
    std::fs::write(
        &bad,
        r#"{"video_id":"v","duration_s":10,"start_s":8,"end_s":2,"query":"x"}"#,
    )
    .unwrap();
    let out = port(&["stats", "--annotations", s(&bad), "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn generate_train_eval_predict() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let run = dir.path().join("run");
    let dims = ["--set", "video_dim=8", "--set", "query_dim=6"];
    let mut args = vec![
        "gen-data",
        "--out",
        s(&data),
        "--set",
        "num_samples=40",
        "--set",
        "raw_len_min=10",
        "--set",
        "raw_len_max=40",
    ];
    args.extend(dims);
    let gen = stdout_json(&port(&args));
    assert_eq!(gen["samples"], 40);

    let mut args = vec![
        "train",
        "--data",
        s(&data),
        "--out",
        s(&run),
        "--set",
        "len=16",
        "--set",
        "d=16",
    ];
    args.extend(["--set", "epochs=2", "--set", "batch_size=8"]);
    args.extend(dims);
    let summary = stdout_json(&port(&args));
    assert_eq!(
        (summary["train"].as_u64(), summary["val"].as_u64()),
        (Some(32), Some(8))
    );
    for f in [
        "config.json",
        "train_log.jsonl",
        "epochs.jsonl",
        "best.ckpt",
        "last.ckpt",
        "last.ckpt.json",
    ] {
        assert!(run.join(f).exists(), "{f} missing");
    }
    let epochs = std::fs::read_to_string(run.join("epochs.jsonl")).unwrap();
    assert_eq!(epochs.lines().count(), 2);

    let metrics = dir.path().join("m.json");
    let ckpt = run.join("last.ckpt");
    let out = port(&[
        "eval",
        "--checkpoint",
        s(&ckpt),
        "--data",
        s(&data),
        "--out",
        s(&metrics),
        "--split",
        "val",
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let table = String::from_utf8(out.stdout).unwrap();
    assert!(
        table.starts_with("| Method | IoU=0.3 | IoU=0.5 | IoU=0.7 | mIoU |"),
        "{table}"
    );
    let m: Value = serde_json::from_str(&std::fs::read_to_string(&metrics).unwrap()).unwrap();
    assert_eq!(m["n"], 8);

    let feature = std::fs::read_dir(&data)
        .unwrap()
        .map(|e| e.unwrap().path())
        .find(|p| p.extension().is_some_and(|x| x == "pft"))
        .unwrap();
    let p = stdout_json(&port(&[
        "predict",
        "--checkpoint",
        s(&ckpt),
        "--video-features",
        s(&feature),
        "--query",
        "a person opens the door",
        "--duration-s",
        "30",
    ]));
    let (st, en) = (p["start_s"].as_f64().unwrap(), p["end_s"].as_f64().unwrap());
    assert!(0.0 <= st && st <= en && en <= 30.0, "{p}");

    let out = port(&[
        "predict",
        "--checkpoint",
        s(&ckpt),
        "--video-features",
        s(&feature),
        "--query",
        "q",
        "--duration-s",
        "-1",
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn help_lists_config_keys() {
    let out = port(&["--help"]);
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("lambda_align = "), "{text}");
}
