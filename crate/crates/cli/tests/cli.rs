use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures")
}

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_captionret"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr_json(o: &Output) -> serde_json::Value {
    let err = String::from_utf8_lossy(&o.stderr);
    serde_json::from_str(err.trim()).unwrap_or_else(|_| panic!("stderr is not JSON: {err}"))
}

fn record(id: &str, text: &str) -> String {
    let captions: Vec<String> = (1..=5)
        .map(|v| format!(r#"{{"variant_id":{v},"kind":"other","text":"{text} view {v}."}}"#))
        .collect();
    format!(
        r#"{{"image_id":"{id}","dataset":"rsicd","split":"train","captions":[{}]}}"#,
        captions.join(",")
    )
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn ingest_reports_kept_dropped_and_duplicates() {
    let dir = tempfile::tempdir().unwrap();
    let valid = dir.path().join("valid.jsonl");
    fs::write(
        &valid,
        [record("a", "a road"), record("b", "two cars")].join("\n"),
    )
    .unwrap();
    let out = dir.path().join("out");
    let o = run(&["--output-dir", s(&out), "ingest", "--input", s(&valid)]);
    assert!(o.status.success());
    assert!(stdout(&o).starts_with("2 kept, 0 dropped, 0 duplicates removed"));

    let messy = dir.path().join("messy.jsonl");
    fs::write(
        &messy,
        [
            record("a", "a road"),
            "{not json".into(),
            record("c", "a road"),
        ]
        .join("\n"),
    )
    .unwrap();
    let o = run(&["--output-dir", s(&out), "ingest", "--input", s(&messy)]);
    assert_eq!(o.status.code(), Some(0));
    assert!(
        stdout(&o).starts_with("1 kept, 1 dropped, 1 duplicates removed"),
        "{}",
        stdout(&o)
    );
    let diag: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("diagnostics.json")).unwrap()).unwrap();
    assert_eq!(diag["diagnostics"][0]["line"], 2);
    assert_eq!(diag["diagnostics"][0]["kind"], "malformed");

    let o = run(&[
        "--output-dir",
        s(&out),
        "--strict",
        "ingest",
        "--input",
        s(&messy),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(stderr_json(&o)["error"], "malformed_record");

    let o = run(&[
        "--output-dir",
        s(&out),
        "ingest",
        "--input",
        s(&dir.path().join("nope.jsonl")),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(stderr_json(&o)["error"], "missing_file");
}

#[test]
fn stats_follow_the_five_caption_rule() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("c.jsonl");
    let records: Vec<String> = (0..4).map(|i| record(&format!("i{i}"), "a road")).collect();
    fs::write(&corpus, records.join("\n")).unwrap();
    let o = run(&["--corpus", s(&corpus), "stats"]);
    assert!(o.status.success());
    let text = stdout(&o);
    let labels: Vec<&str> = text.lines().map(|l| l.split(':').next().unwrap()).collect();
    assert_eq!(
        labels,
        [
            "Total Images",
            "Total Caption Sets",
            "Caption Sets per Image",
            "Vocabulary Size",
            "Avg. Relations per Image",
            "Avg. Entities per Image",
            "Total Caption Sentences",
            "Avg. Sentences per Caption",
            "Avg. Caption Length (words)",
        ]
    );
    assert!(text.contains("Total Caption Sets:          20"));
    assert!(text.contains("Caption Sets per Image:      5.00"));

    let empty = dir.path().join("empty.jsonl");
    fs::write(&empty, "").unwrap();
    let o = run(&["--corpus", s(&empty), "stats", "--json"]);
    assert!(o.status.success());
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert!(v
        .as_object()
        .unwrap()
        .values()
        .all(|x| x.as_f64() == Some(0.0)));

    let o = run(&["--corpus", s(&dir.path().join("missing.jsonl")), "stats"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn fixture_pipeline_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = fixtures().join("run.toml");
    let base = ["--config", s(&cfg), "--output-dir", s(dir.path())];
    let with = |extra: &[&str]| run(&[&base[..], extra].concat());

    assert!(with(&["index"]).status.success());
    let index_bytes = fs::read(dir.path().join("index.trsi")).unwrap();

    let o = with(&[
        "query",
        "--mode",
        "t2i",
        "--text",
        "boats moored at the piers",
        "-k",
        "5",
    ]);
    assert!(o.status.success());
    let lines: Vec<String> = stdout(&o).lines().map(str::to_owned).collect();
    assert_eq!(lines.len(), 5);
    assert!(lines[0].starts_with("1\tharbor_02\t"));

    let img = fixtures().join("images/forest_03.png");
    let o = with(&[
        "query",
        "--mode",
        "i2t",
        "--image",
        s(&img),
        "-k",
        "3",
        "--json",
    ]);
    assert!(o.status.success());
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(
        v["generated_query_text"],
        "Dense green forest covering rolling hills."
    );
    assert_eq!(v["results"]["hits"][0]["image_id"], "forest_03");

    let o = with(&["eval", "--direction", "both"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("eval_report.json")).unwrap())
            .unwrap();
    assert_eq!(report["mean_recall"], 100.0);
    assert_eq!(report["query_count"], 16);
    assert_eq!(report["fingerprint"]["backend_id"], "local-hash-v1");
    assert!(report["fingerprint"]["corpus_hash"].is_string());
    assert_eq!(
        fs::read_to_string(dir.path().join("eval_trace.jsonl"))
            .unwrap()
            .lines()
            .count(),
        16
    );
    assert!(stdout(&o).contains("100.00"));

    // reruns reproduce every artifact
    let first = fs::read(dir.path().join("eval_report.json")).unwrap();
    let trace = fs::read(dir.path().join("eval_trace.jsonl")).unwrap();
    assert!(with(&["index"]).status.success());
    assert!(with(&["eval", "--permits", "4"]).status.success());
    assert_eq!(
        fs::read(dir.path().join("index.trsi")).unwrap(),
        index_bytes
    );
    assert_eq!(
        fs::read(dir.path().join("eval_report.json")).unwrap(),
        first
    );
    assert_eq!(
        fs::read(dir.path().join("eval_trace.jsonl")).unwrap(),
        trace
    );

    let o = with(&["eval", "--direction", "t2i"]);
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("eval_report.json")).unwrap())
            .unwrap();
    assert!(o.status.success());
    assert_eq!(report["query_count"], 8);
    assert_eq!(report["directions"].as_array().unwrap().len(), 1);

    // a different dimension no longer matches the stored index
    let o = with(&["--dim", "64", "query", "--mode", "t2i", "--text", "harbor"]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(stderr_json(&o)["error"], "backend_mismatch");
}

#[test]
fn missing_prerequisites_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    let gt = fixtures().join("ground_truth.jsonl");
    let o = run(&["--output-dir", s(out), "eval", "--ground-truth", s(&gt)]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(stderr_json(&o)["error"], "missing_file");

    let o = run(&["--output-dir", s(out), "index"]);
    assert_eq!(o.status.code(), Some(2));

    let corpus = fixtures().join("corpus.jsonl");
    assert!(
        run(&["--corpus", s(&corpus), "--output-dir", s(out), "index"])
            .status
            .success()
    );
    let o = run(&["--output-dir", s(out), "eval", "--ground-truth", s(&gt)]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(stderr_json(&o)["error"], "missing_captioner");

    let img = fixtures().join("images/nope.png");
    let captions = fixtures().join("captions.json");
    let o = run(&[
        "--output-dir",
        s(out),
        "--captions",
        s(&captions),
        "query",
        "--mode",
        "i2t",
        "--image",
        s(&img),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(stderr_json(&o)["error"], "missing_file");

    let o = run(&["--output-dir", s(out), "query", "--mode", "t2i"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn unreachable_service_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    // bind then drop to get a port nobody listens on
    let port = std::net::TcpListener::bind("127.0.0.1:0")
        .unwrap()
        .local_addr()
        .unwrap()
        .port();
    let cfg = dir.path().join("remote.toml");
    fs::write(
        &cfg,
        format!(
            "corpus = \"{}\"\n[backend]\nkind = \"remote\"\n[backend.remote]\n\
             base_url = \"http://127.0.0.1:{port}/v1\"\nmodel_name = \"m\"\ndim = 8\n\
             max_retries = 1\nbackoff_base = 0.0\napi_key_env = \"CAPTIONRET_CLI_TEST_KEY\"\ntimeout = 5\n",
            s(&fixtures().join("corpus.jsonl"))
        ),
    )
    .unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_captionret"))
        .args(["--config", s(&cfg), "--output-dir", s(dir.path()), "index"])
        .env("CAPTIONRET_CLI_TEST_KEY", "sk-cli-secret")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(3));
    let err = stderr_json(&o);
    assert_eq!(err["error"], "backend");
    assert!(!err.to_string().contains("sk-cli-secret"));

    // no credential at all is also a backend (auth) failure
    let o = Command::new(env!("CARGO_BIN_EXE_captionret"))
        .args(["--config", s(&cfg), "--output-dir", s(dir.path()), "index"])
        .env_remove("CAPTIONRET_CLI_TEST_KEY")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr_json(&o)["message"]
        .as_str()
        .unwrap()
        .contains("CAPTIONRET_CLI_TEST_KEY"));
}
