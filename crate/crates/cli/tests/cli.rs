use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures").join(name)
}

fn core_fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/fixtures").join(name)
}

fn lawluo(args: &[&str], data_dir: &Path) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_lawluo"));
    for (k, _) in std::env::vars() {
        if k.starts_with("LAWLUO_") {
            cmd.env_remove(k);
        }
    }
    cmd.env("LAWLUO_DATA_DIR", data_dir).args(args).output().unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn stdout_json(out: &Output) -> Value {
    serde_json::from_slice(&out.stdout)
        .unwrap_or_else(|e| panic!("{e}: {}", String::from_utf8_lossy(&out.stdout)))
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn consult_script(data_dir: &Path) -> Output {
    let script = fixture("divorce.txt");
    lawluo(
        &[
            "consult",
            "--backend",
            "mock",
            "--seed",
            "7",
            "--date",
            "2024-06-01",
            "--script",
            script.to_str().unwrap(),
        ],
        data_dir,
    )
}

#[test]
fn scripted_consult_matches_golden_transcript() {
    let dir = tempfile::tempdir().unwrap();
    let out = consult_script(dir.path());
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let got = stdout_json(&out);

    let golden = fixture("divorce.golden.json");
    if std::env::var_os("LAWLUO_BLESS").is_some() {
        std::fs::write(&golden, serde_json::to_string_pretty(&got).unwrap() + "\n").unwrap();
    }
    let want: Value = serde_json::from_str(&std::fs::read_to_string(&golden).unwrap()).unwrap();
    assert_eq!(got, want);

    assert_eq!(got["report"]["report_number"], "LL-000001");
    assert_eq!(got["report"]["consultation_date"], "2024-06-01");
    assert_eq!(got["transcript"].as_array().unwrap().len(), 8);
    assert_eq!(got["clarifications"][0]["verified"]["root_query"], "Can I keep the apartment?");
    // The session id is reported for humans only.
    assert!(stderr(&out).starts_with("session "));
    assert!(!String::from_utf8_lossy(&out.stdout).contains("session_id"));
}

#[test]
fn scripted_consult_is_deterministic() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let (x, y) = (consult_script(a.path()), consult_script(b.path()));
    assert_eq!(code(&x), 0);
    assert_eq!(x.stdout, y.stdout);
}

#[test]
fn ablation_flags_reach_the_session() {
    let dir = tempfile::tempdir().unwrap();
    let script = fixture("divorce.txt");
    let script = script.to_str().unwrap();
    // Without clarification the script's marks line has nothing to answer.
    let out = lawluo(&["consult", "--no-tolc", "--date", "2024-06-01", "--script", script], dir.path());
    assert_eq!(code(&out), 1, "{}", stderr(&out));

    let plain = dir.path().join("plain.txt");
    std::fs::write(&plain, "I was dismissed without notice after six years. What can I claim?\n").unwrap();
    let out = lawluo(
        &[
            "consult",
            "--no-receptionist",
            "--no-boss",
            "--no-role-enhancement",
            "--tolc-trigger",
            "never",
            "--candidates",
            "1",
            "--script",
            plain.to_str().unwrap(),
        ],
        dir.path(),
    );
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let v = stdout_json(&out);
    assert_eq!(
        v["config"],
        serde_json::json!({
            "receptionist_enabled": false,
            "role_enhancement_enabled": false,
            "tolc_enabled": true,
            "boss_enabled": false,
            "tolc_trigger": {"mode": "never"},
            "n_candidates": 1
        })
    );
    assert!(v["review"].is_null());
    assert_eq!(v["domain"]["id"], 16);

    let out = lawluo(&["consult", "--tolc-trigger", "sometimes"], dir.path());
    assert_eq!(code(&out), 1);
}

#[test]
fn interactive_consult_reads_stdin() {
    use std::io::Write;
    use std::process::Stdio;
    let dir = tempfile::tempdir().unwrap();
    let mut child = Command::new(env!("CARGO_BIN_EXE_lawluo"))
        .env("LAWLUO_DATA_DIR", dir.path())
        .args(["consult", "--date", "2024-06-01", "--tolc-trigger", "always"])
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    // One message, then a y to the first question, a junk answer, n, and
    // enter for the rest; /close ends the session.
    let mut input = String::from("Can I keep the apartment?\ny\nmaybe\nn\n");
    input.push_str(&"\n".repeat(12));
    input.push_str("/close\n");
    child.stdin.take().unwrap().write_all(input.as_bytes()).unwrap();
    let out = child.wait_with_output().unwrap();
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let v = stdout_json(&out);
    let verified = &v["clarifications"][0]["verified"];
    assert_eq!(verified["affirmed"].as_array().unwrap().len(), 1);
    assert_eq!(verified["negated"].as_array().unwrap().len(), 1);
    assert!(stderr(&out).contains("please answer y or n"));
}

#[test]
fn help_for_every_subcommand() {
    let dir = tempfile::tempdir().unwrap();
    let cases: &[(&[&str], &[&str])] = &[
        (&["--help"], &["serve", "consult", "ingest", "train", "eval", "data"]),
        (&["serve", "--help"], &["--listen", "--backend", "--data-dir"]),
        (
            &["consult", "--help"],
            &[
                "--script",
                "--seed",
                "--date",
                "--backend",
                "--initial-state",
                "--no-receptionist",
                "--no-role-enhancement",
                "--no-tolc",
                "--no-boss",
                "--tolc-trigger",
                "--candidates",
            ],
        ),
        (&["ingest", "--help"], &["--cases", "--backend"]),
        (&["train", "--help"], &["receptionist", "rm"]),
        (&["train", "receptionist", "--help"], &["--corpus", "--epochs", "--seed", "--tau"]),
        (&["train", "rm", "--help"], &["--labels", "--epochs", "--lr"]),
        (&["eval", "--help"], &["pairwise", "turns"]),
        (&["eval", "pairwise", "--help"], &["--input", "--judge", "--results", "--seed"]),
        (&["eval", "turns", "--help"], &["--transcript", "--judge"]),
        (&["data", "--help"], &["validate", "stats"]),
        (&["data", "validate", "--help"], &["PATHS"]),
        (&["data", "stats", "--help"], &["--manifest"]),
    ];
    for (args, flags) in cases {
        let out = lawluo(args, dir.path());
        assert_eq!(code(&out), 0, "{args:?}");
        let text = String::from_utf8_lossy(&out.stdout);
        for f in *flags {
            assert!(text.contains(f), "{args:?} help lacks {f}");
        }
    }
}

#[test]
fn usage_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    for args in [
        &["frobnicate"][..],
        &[],
        &["consult", "--seed", "x"],
        &["data", "validate"],
        &["data", "stats"],
        &["train", "rm"],
    ] {
        let out = lawluo(args, dir.path());
        assert_eq!(code(&out), 1, "{args:?}: {}", stderr(&out));
        assert!(!stderr(&out).is_empty());
    }
    // A live backend with no endpoint configured.
    let out = lawluo(&["consult", "--backend", "wire"], dir.path());
    assert_eq!(code(&out), 1, "{}", stderr(&out));
    assert!(stderr(&out).contains("LAWLUO_"));
}

#[test]
fn missing_file_is_a_runtime_failure() {
    let dir = tempfile::tempdir().unwrap();
    let out = lawluo(&["data", "stats", "missing.jsonl"], dir.path());
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("IoError"), "{}", stderr(&out));
    assert!(out.stdout.is_empty());
}

#[test]
fn data_validate_and_stats() {
    let dir = tempfile::tempdir().unwrap();
    let ok = fixture("dialogues_ok.jsonl");
    let bad = fixture("dialogues_bad.jsonl");

    let out = lawluo(&["data", "validate", ok.to_str().unwrap()], dir.path());
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let v = stdout_json(&out);
    assert_eq!((v["passed"].as_u64(), v["failed"].as_u64()), (Some(3), Some(0)));

    let out = lawluo(&["data", "validate", ok.to_str().unwrap(), bad.to_str().unwrap()], dir.path());
    assert_eq!(code(&out), 2);
    let lines: Vec<Value> = String::from_utf8_lossy(&out.stdout)
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 2);
    assert_eq!(lines[1]["failed"], 2);
    let bad_lines: Vec<u64> = lines[1]["lines"]
        .as_array()
        .unwrap()
        .iter()
        .filter(|l| l["ok"] == false)
        .map(|l| l["line"].as_u64().unwrap())
        .collect();
    assert_eq!(bad_lines, vec![2, 3]);

    let out = lawluo(&["data", "stats", ok.to_str().unwrap()], dir.path());
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let v = stdout_json(&out);
    assert_eq!(v["stats"]["total"], 3);
    assert_eq!(v["stats"]["max_turns"], 4);
    assert_eq!(v["reference_mismatches"].as_array().unwrap().len(), 6);
    assert!(v["category_mismatches"].is_null());

    let out = lawluo(&["data", "stats", bad.to_str().unwrap()], dir.path());
    assert_eq!(code(&out), 1, "{}", stderr(&out));

    let manifest = dir.path().join("manifest.json");
    std::fs::write(
        &manifest,
        serde_json::json!({"files": {ok.to_str().unwrap(): "single_turn"}}).to_string(),
    )
    .unwrap();
    let out = lawluo(&["data", "stats", "--manifest", manifest.to_str().unwrap()], dir.path());
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let v = stdout_json(&out);
    let mismatches: Vec<String> = serde_json::from_value(v["category_mismatches"].clone()).unwrap();
    assert_eq!(mismatches.len(), 2);
    assert!(mismatches[0].ends_with(":2"));
}

#[test]
fn eval_pairwise_summaries() {
    let dir = tempfile::tempdir().unwrap();
    let judged = fixture("judged.jsonl");
    let out = lawluo(&["eval", "pairwise", "--input", judged.to_str().unwrap(), "--judge", "mock"], dir.path());
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let v = stdout_json(&out);
    assert_eq!(v["n"], 25);
    assert_eq!(v["wins"], 18);
    assert_eq!(v["win_rate"].as_f64(), Some(18.0 / 25.0));

    let pairs = fixture("pairs.jsonl");
    let results = dir.path().join("results.jsonl");
    let args = [
        "eval",
        "pairwise",
        "--input",
        pairs.to_str().unwrap(),
        "--judge",
        "mock",
        "--seed",
        "3",
        "--results",
        results.to_str().unwrap(),
    ];
    let out = lawluo(&args, dir.path());
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let v = stdout_json(&out);
    assert_eq!(v["n"], 2);
    let rate = v["win_rate"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&rate));
    let written: Vec<Value> = std::fs::read_to_string(&results)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(written.len(), 2);
    assert_eq!(written[0]["judge_tag"], "mock");
    let wins = written.iter().filter(|r| r["winner"] == "A").count();
    assert_eq!(v["wins"].as_u64(), Some(wins as u64));
    // Same seed, same verdicts.
    assert_eq!(lawluo(&args, dir.path()).stdout, out.stdout);

    let broken = dir.path().join("broken.jsonl");
    std::fs::write(&broken, "{\"question\": \"q\"}\n").unwrap();
    let out = lawluo(&["eval", "pairwise", "--input", broken.to_str().unwrap()], dir.path());
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("ParseError"));
}

#[test]
fn eval_turns_scores_each_lawyer_reply() {
    let dir = tempfile::tempdir().unwrap();
    let out = consult_script(dir.path());
    let lawyer_turns: Vec<u64> = stdout_json(&out)["transcript"]
        .as_array()
        .unwrap()
        .iter()
        .filter(|t| t["speaker"] == "lawyer" || t["speaker"] == "Lawyer")
        .map(|t| t["index"].as_u64().unwrap())
        .collect();
    assert_eq!(lawyer_turns.len(), 4);
    let transcript = dir.path().join("consult.json");
    std::fs::write(&transcript, &out.stdout).unwrap();
    let out = lawluo(&["eval", "turns", "--transcript", transcript.to_str().unwrap()], dir.path());
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let v = stdout_json(&out);
    let scores = v["scores"].as_array().unwrap();
    let indices: Vec<u64> = scores.iter().map(|s| s["turn_index"].as_u64().unwrap()).collect();
    assert_eq!(indices, lawyer_turns);
    let mean = scores.iter().map(|s| s["score"].as_f64().unwrap()).sum::<f64>() / 4.0;
    assert_eq!(v["mean"].as_f64(), Some(mean));
}

#[test]
fn trained_artifacts_are_picked_up() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path();

    let cases = core_fixture("cases/sample_cases.jsonl");
    let out = lawluo(&["ingest", "--cases", cases.to_str().unwrap()], data);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let v = stdout_json(&out);
    assert!(v["cases"].as_u64().unwrap() > 0);
    assert!(data.join("cases/cases.jsonl").is_file());
    assert!(data.join("cases/index.json").is_file());

    let corpus = core_fixture("questions.jsonl");
    let out = lawluo(&["train", "receptionist", "--corpus", corpus.to_str().unwrap(), "--epochs", "5"], data);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let v = stdout_json(&out);
    assert!(v["final_loss"].as_f64().unwrap() <= v["initial_loss"].as_f64().unwrap());
    assert!(data.join("models/receptionist.json").is_file());

    let labels = core_fixture("rm_labels.jsonl");
    let out = lawluo(&["train", "rm", "--labels", labels.to_str().unwrap(), "--epochs", "20"], data);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let v = stdout_json(&out);
    assert!(v["final_loss"].as_f64().unwrap() < v["initial_loss"].as_f64().unwrap());
    assert!(data.join("models/reward_model.json").is_file());

    let out = consult_script(data);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert_eq!(stdout_json(&out)["report"]["report_number"], "LL-000001");
    // The second consultation in the same data directory gets the next number.
    let out = consult_script(data);
    assert_eq!(stdout_json(&out)["report"]["report_number"], "LL-000002");

    let corrupt = data.join("models/reward_model.json");
    std::fs::write(&corrupt, "{").unwrap();
    let out = consult_script(data);
    assert_eq!(code(&out), 2);
}
