use std::collections::BTreeMap;
use std::path::Path;
use std::process::{Command, Output};

fn appmarket(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_appmarket"))
        .args(args)
        .current_dir(cwd)
        .env("RUST_LOG", "error")
        .output()
        .expect("binary runs")
}

fn read_dir(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let path = e.unwrap().path();
            (path.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&path).unwrap())
        })
        .collect()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

const BUNDLE: [&str; 11] = [
    "catalog.json",
    "config.conf",
    "correlated_events.json",
    "correlation_runs.json",
    "correlations.csv",
    "events.csv",
    "metrics.csv",
    "metrics_daily.csv",
    "rejects.jsonl",
    "summaries.json",
    "summary_requests.json",
];

#[test]
fn empty_dataset_writes_every_report() {
    let tmp = tempfile::tempdir().unwrap();
    std::fs::write(tmp.path().join("empty.jsonl"), "").unwrap();
    let out = appmarket(&["--out", "rep", "run", "empty.jsonl"], tmp.path());
    assert!(out.status.success(), "{}", stderr(&out));
    let files = read_dir(&tmp.path().join("rep"));
    assert_eq!(files.keys().map(String::as_str).collect::<Vec<_>>(), BUNDLE);
    assert_eq!(files["events.csv"], b"app_id,metric,t0,w,e,a,sigma,k,baseline_n,warmup\n");
    assert_eq!(files["correlated_events.json"], b"[]\n");
    assert!(files["rejects.jsonl"].is_empty());
}

#[test]
fn runs_are_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    assert!(appmarket(&["--out", "data", "--seed", "3", "synth"], dir).status.success());
    for rep in ["a", "b"] {
        let out = appmarket(
            &["--config", "data/synth.conf", "--out", "rep", "--set", "summarizer=mock", "run", "data/reviews.jsonl"],
            dir,
        );
        assert!(out.status.success(), "{}", stderr(&out));
        std::fs::rename(dir.join("rep"), dir.join(rep)).unwrap();
    }
    let (a, b) = (read_dir(&dir.join("a")), read_dir(&dir.join("b")));
    assert_eq!(a.len(), BUNDLE.len());
    let differing: Vec<&String> = a.keys().filter(|k| a[*k] != b[*k]).collect();
    assert!(differing.is_empty(), "{differing:?}");
    let summaries = String::from_utf8(a["summaries.json"].clone()).unwrap();
    assert!(summaries.contains("[mock "), "{summaries}");
}

#[test]
fn correlated_events_rebuild_from_saved_tables() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    assert!(appmarket(&["--out", "data", "--seed", "5", "synth"], dir).status.success());
    let run = appmarket(&["--config", "data/synth.conf", "--out", "rep", "run", "data/reviews.jsonl"], dir);
    assert!(run.status.success(), "{}", stderr(&run));
    let ce = appmarket(&["--out", "again", "ce", "--from", "rep"], dir);
    assert!(ce.status.success(), "{}", stderr(&ce));
    for file in ["correlated_events.json", "correlation_runs.json"] {
        let same = std::fs::read(dir.join("rep").join(file)).unwrap() == std::fs::read(dir.join("again").join(file)).unwrap();
        assert!(same, "{file}");
    }
}

#[test]
fn staged_commands_write_their_tables() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    assert!(appmarket(&["--out", "data", "--seed", "1", "synth", "--preset", "null"], dir).status.success());
    let conf = ["--config", "data/synth.conf"];
    for (cmd, expected) in [
        ("metrics", &["metrics.csv", "metrics_daily.csv", "rejects.jsonl"][..]),
        ("detect", &["events.csv", "metrics.csv", "metrics_daily.csv", "rejects.jsonl"][..]),
        ("correlate", &["correlations.csv", "events.csv", "metrics.csv", "metrics_daily.csv", "rejects.jsonl"][..]),
        ("summarize-prep", &["summary_requests.json"][..]),
    ] {
        let out_dir = format!("out-{cmd}");
        let mut args = conf.to_vec();
        args.extend(["--out", &out_dir, cmd, "data/reviews.jsonl"]);
        let out = appmarket(&args, dir);
        assert!(out.status.success(), "{cmd}: {}", stderr(&out));
        let files = read_dir(&dir.join(&out_dir));
        assert_eq!(files.keys().map(String::as_str).collect::<Vec<_>>(), expected, "{cmd}");
    }
    let metrics = String::from_utf8(std::fs::read(dir.join("out-metrics/metrics.csv")).unwrap()).unwrap();
    // 10 apps, 3 metrics, 52 windows, plus the header
    assert_eq!(metrics.lines().count(), 10 * 3 * 52 + 1);
}

#[test]
fn config_violations_exit_with_code_two() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    std::fs::write(dir.join("empty.jsonl"), "").unwrap();
    let out = appmarket(&["--set", "h=1.5", "--set", "k=-2", "run", "empty.jsonl"], dir);
    assert_eq!(out.status.code(), Some(2));
    let err = stderr(&out);
    assert!(err.contains("h out of (0,1]") && err.contains("k must be positive"), "{err}");

    std::fs::write(dir.join("bad.conf"), "w_e = 7\nmystery = 1\n").unwrap();
    let out = appmarket(&["--config", "bad.conf", "run", "empty.jsonl"], dir);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("unknown key `mystery`"));

    let out = appmarket(&["--config", "missing.conf", "run", "empty.jsonl"], dir);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn unreadable_datasets_exit_with_code_three() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    assert_eq!(appmarket(&["run", "nope.jsonl"], dir).status.code(), Some(3));
    std::fs::write(dir.join("binary.jsonl"), [0xff, 0xfe, b'\n']).unwrap();
    assert_eq!(appmarket(&["run", "binary.jsonl"], dir).status.code(), Some(3));
}

#[test]
fn bad_records_are_rejected_not_fatal() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let lines = [
        r#"{"review_id":"1","app_id":"a","timestamp":"2022-06-10T10:00:00Z","rating":5,"body":"Great.","source":"play"}"#,
        r#"not json"#,
        r#"{"review_id":"2","app_id":"a","timestamp":"2022-06-10","rating":5,"body":"x","source":"play"}"#,
        r#"{"review_id":"3","app_id":"a","timestamp":"2022-06-10T10:00:00Z","rating":9,"body":"x","source":"play"}"#,
        r#"{"review_id":"4","app_id":"a","timestamp":"2022-06-10T10:00:00Z","rating":2,"source":"play"}"#,
    ];
    std::fs::write(dir.join("mixed.jsonl"), lines.join("\n")).unwrap();
    let out = appmarket(&["--out", "rep", "ingest-check", "mixed.jsonl"], dir);
    assert!(out.status.success(), "{}", stderr(&out));
    let rejects = std::fs::read_to_string(dir.join("rep/rejects.jsonl")).unwrap();
    let codes: Vec<serde_json::Value> = rejects.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    let pairs: Vec<(u64, &str)> =
        codes.iter().map(|v| (v["line_no"].as_u64().unwrap(), v["reason"].as_str().unwrap())).collect();
    assert_eq!(
        pairs,
        [(2, "malformed_record"), (3, "bad_timestamp"), (4, "rating_out_of_range"), (5, "missing_field:body")]
    );
    assert!(String::from_utf8_lossy(&out.stdout).starts_with("1 reviews accepted, 4 rejected"));
}

#[test]
fn csv_inputs_and_custom_scales() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let csv = "review_id,app_id,timestamp,rating,body,source\n\
               1,a,2022-06-10T10:00:00Z,10,\"Great, fast.\",imdb\n\
               2,a,2022-06-11T10:00:00+02:00,0,Awful,imdb\n";
    std::fs::write(dir.join("reviews.csv"), csv).unwrap();
    let out = appmarket(&["--set", "scale.imdb=0-10", "--out", "rep", "ingest-check", "reviews.csv"], dir);
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(String::from_utf8_lossy(&out.stdout).starts_with("2 reviews accepted, 0 rejected"));
    let out = appmarket(&["--out", "rep2", "ingest-check", "reviews.csv"], dir);
    assert!(String::from_utf8_lossy(&out.stdout).starts_with("0 reviews accepted, 2 rejected"));
}

#[test]
fn command_summarizer_receives_the_prompt() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    assert!(appmarket(&["--out", "data", "--seed", "2", "synth"], dir).status.success());
    let out = appmarket(
        &[
            "--config",
            "data/synth.conf",
            "--out",
            "rep",
            "--set",
            "summarizer=command",
            "--set",
            "summarizer_command=grep -c '^- '",
            "summarize-prep",
            "data/reviews.jsonl",
        ],
        dir,
    );
    assert!(out.status.success(), "{}", stderr(&out));
    let summaries: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.join("rep/summaries.json")).unwrap()).unwrap();
    let summaries = summaries.as_array().unwrap();
    assert!(!summaries.is_empty());
    for s in summaries {
        assert_eq!(s["summary_text"].as_str().unwrap(), s["n_sampled"].to_string());
    }
}
