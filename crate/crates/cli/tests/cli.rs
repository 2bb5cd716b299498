use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures").join(name)
}

fn vidscope(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vidscope"))
        .args(args)
        .env_remove("RUST_LOG")
        .output()
        .expect("binary runs")
}

fn text(bytes: &[u8]) -> String {
    String::from_utf8_lossy(bytes).into_owned()
}

fn build(dir: &Path) -> PathBuf {
    let out = dir.join("bundle");
    let manifest = fixture("kitchen").join("manifest.json");
    let o = vidscope(&["--mock", "build", "--manifest", manifest.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "build failed: {}", text(&o.stderr));
    assert!(text(&o.stdout).contains("6 segments"), "{}", text(&o.stdout));
    out
}

#[test]
fn build_validate_ask_and_dump_trace() {
    let dir = tempfile::tempdir().unwrap();
    let bundle = build(dir.path());
    let b = bundle.to_str().unwrap();

    let o = vidscope(&["validate", "--index", b]);
    assert!(o.status.success(), "{}", text(&o.stderr));
    assert!(text(&o.stdout).starts_with("ok: kitchen"));

    let trace = dir.path().join("trace.jsonl");
    let o = vidscope(&[
        "--mock",
        "ask",
        "--index",
        b,
        "--question",
        "Who chases the frisbee?\n(A) a cat\n(B) brown dog\n(C) Maya",
        "--trace",
        trace.to_str().unwrap(),
        "--max-steps",
        "4",
    ]);
    assert!(o.status.success(), "{}", text(&o.stderr));
    assert_eq!(text(&o.stdout).trim(), "B");
    let lines = fs::read_to_string(&trace).unwrap();
    assert!(lines.lines().last().unwrap().contains("\"step_count\":2"), "{lines}");

    let o = vidscope(&["dump-trace", trace.to_str().unwrap()]);
    assert!(o.status.success());
    assert!(text(&o.stdout).contains("Step 1: clip_caption_search_wtime_tool"), "{}", text(&o.stdout));
}

#[test]
fn eval_writes_report_files() {
    let dir = tempfile::tempdir().unwrap();
    let bundle = build(dir.path());
    let out = dir.path().join("eval");
    let qa = fixture("kitchen").join("qa.jsonl");
    let o = vidscope(&[
        "--mock",
        "eval",
        "--qa",
        qa.to_str().unwrap(),
        "--index",
        bundle.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--workers",
        "2",
    ]);
    assert!(o.status.success(), "{}", text(&o.stderr));
    assert!(text(&o.stdout).starts_with("|  | ER | EU | KIR | TG | Rea | Sum | Overall |"));
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["overall"]["total"], 4);
    assert_eq!(fs::read_to_string(out.join("records.jsonl")).unwrap().lines().count(), 4);
    assert_eq!(fs::read_dir(out.join("traces")).unwrap().count(), 4);
}

#[test]
fn corrupt_bundle_exits_4() {
    let dir = tempfile::tempdir().unwrap();
    let bundle = build(dir.path());
    let seg = bundle.join("segments.jsonl");
    let mut bytes = fs::read(&seg).unwrap();
    bytes[10] ^= 0x01;
    fs::write(&seg, bytes).unwrap();
    for args in [vec!["validate", "--index"], vec!["--mock", "ask", "--question", "q", "--index"]] {
        let mut args = args;
        args.push(bundle.to_str().unwrap());
        let o = vidscope(&args);
        assert_eq!(o.status.code(), Some(4), "{args:?}: {}", text(&o.stderr));
    }
    let o = vidscope(&["validate", "--index", dir.path().join("missing").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(4));
}

#[test]
fn input_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    // Manifest pointing at a transcript that does not exist.
    let manifest = dir.path().join("manifest.json");
    fs::write(
        &manifest,
        r#"{"video_id": "v", "duration_s": 60, "transcript_path": "nope.jsonl", "frames_dir": "frames"}"#,
    )
    .unwrap();
    let o = vidscope(&["--mock", "build", "--manifest", manifest.to_str().unwrap(), "--out", dir.path().join("b").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2), "{}", text(&o.stderr));
    assert!(text(&o.stderr).contains("parse error"), "{}", text(&o.stderr));

    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "[query]\nunknown = 1\n").unwrap();
    let o = vidscope(&["--config", bad.to_str().unwrap(), "validate", "--index", "x"]);
    assert_eq!(o.status.code(), Some(2));

    let trace = dir.path().join("t.jsonl");
    fs::write(&trace, "{\"record\":\"step\"}\n").unwrap();
    assert_eq!(vidscope(&["dump-trace", trace.to_str().unwrap()]).status.code(), Some(2));
}

#[test]
fn unreachable_backend_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let bundle = build(dir.path());
    let config = dir.path().join("vidscope.toml");
    // Dimensions match the mock build; nothing listens on port 9.
    fs::write(
        &config,
        r#"
[http]
max_attempts = 1
timeout_s = 2

[backends.reasoner]
base_url = "http://127.0.0.1:9/v1"
model = "planner"

[backends.text_embed]
base_url = "http://127.0.0.1:9/v1"
model = "embed"
dimension = 64

[backends.visual_embed]
base_url = "http://127.0.0.1:9/v1"
model = "embed"
dimension = 32
"#,
    )
    .unwrap();
    let o = vidscope(&["--config", config.to_str().unwrap(), "ask", "--index", bundle.to_str().unwrap(), "--question", "q"]);
    assert_eq!(o.status.code(), Some(3), "{}", text(&o.stderr));
}
