use std::process::{Command, Output};

fn moca(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_moca"))
        .args(args)
        .env_remove("MOCA_SEED")
        .output()
        .expect("run moca")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn help_exits_zero() {
    let o = moca(&["--help"]);
    assert_eq!(o.status.code(), Some(0));
    let text = String::from_utf8_lossy(&o.stdout);
    for sub in [
        "curate",
        "mask",
        "lso",
        "retrieve",
        "train",
        "predict",
        "gate-sweep",
        "attn-dump",
        "gradcheck",
    ] {
        assert!(text.contains(sub), "{sub} missing from help");
    }
}

#[test]
fn unknown_subcommand_is_usage_error() {
    let o = moca(&["frobnicate"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o)
        .lines()
        .last()
        .unwrap()
        .starts_with("error code=1 kind=usage"));
}

#[test]
fn missing_file_is_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o.jsonl");
    let o = moca(&[
        "lso",
        "--in",
        "/nonexistent/records.jsonl",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("kind=data"));
}

#[test]
fn bad_seed_variable_is_usage_error() {
    let o = Command::new(env!("CARGO_BIN_EXE_moca"))
        .args(["gradcheck", "--dims", "3,4", "--layers", "1"])
        .env("MOCA_SEED", "seven")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn gradcheck_reports_and_passes() {
    let o = moca(&[
        "gradcheck",
        "--dims",
        "3,4",
        "--heads",
        "1",
        "--layers",
        "1",
        "--seed",
        "2",
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(String::from_utf8_lossy(&o.stdout).starts_with("max_rel_err="));
}

#[test]
fn retrieve_writes_header_and_respects_budget() {
    let dir = tempfile::tempdir().unwrap();
    let lesson = dir.path().join("l.txt");
    let question = dir.path().join("q.txt");
    std::fs::write(
        &lesson,
        "Roots take water. Leaves make sugar. Stems carry water up.",
    )
    .unwrap();
    std::fs::write(&question, "Where does water go?").unwrap();
    let o = moca(&[
        "retrieve",
        "--lesson",
        lesson.to_str().unwrap(),
        "--question",
        question.to_str().unwrap(),
        "--budget",
        "5",
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let text = String::from_utf8_lossy(&o.stdout);
    let (head, body) = text.split_once('\n').unwrap();
    assert!(head.starts_with("# moca ") && head.contains("seed=0") && head.contains("config="));
    let v: serde_json::Value = serde_json::from_str(body).unwrap();
    let tokens: u64 = v["sentences"]
        .as_array()
        .unwrap()
        .iter()
        .map(|s| s["tokens"].as_u64().unwrap())
        .sum();
    assert!(tokens <= 5);
}

#[test]
fn seed_variable_changes_header() {
    let dir = tempfile::tempdir().unwrap();
    let lesson = dir.path().join("l.txt");
    std::fs::write(&lesson, "One sentence.").unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_moca"))
        .args([
            "retrieve",
            "--lesson",
            lesson.to_str().unwrap(),
            "--question",
            lesson.to_str().unwrap(),
        ])
        .env("MOCA_SEED", "99")
        .output()
        .unwrap();
    assert!(String::from_utf8_lossy(&o.stdout).starts_with("# moca 0.1.0 seed=99 "));
}
