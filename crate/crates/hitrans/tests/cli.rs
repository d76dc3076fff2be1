//! Black-box tests of the `hitrans` binary: every subcommand, the layered
//! configuration flags, and the JSON error channel.

use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_hitrans"))
}

fn run_in(dir: &Path, args: &[&str]) -> Output {
    bin().current_dir(dir).args(args).output().expect("binary launches")
}

fn stdout_of(out: &Output) -> String {
    String::from_utf8(out.stdout.clone()).expect("stdout is UTF-8")
}

fn stderr_of(out: &Output) -> String {
    String::from_utf8(out.stderr.clone()).expect("stderr is UTF-8")
}

fn expect_success(out: &Output, what: &str) {
    assert!(
        out.status.success(),
        "{what} failed with status {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        stdout_of(out),
        stderr_of(out)
    );
}

/// Asserts the failure contract: nonzero exit and exactly one JSON object
/// line on stderr carrying `error` and `message`. Returns the error kind.
fn expect_error(out: &Output, what: &str) -> String {
    assert!(!out.status.success(), "{what} unexpectedly succeeded");
    let stderr = stderr_of(out);
    let lines: Vec<&str> = stderr.lines().collect();
    assert_eq!(lines.len(), 1, "{what}: stderr should be one line, got {stderr:?}");
    let parsed: Value = serde_json::from_str(lines[0])
        .unwrap_or_else(|e| panic!("{what}: stderr is not JSON ({e}): {stderr:?}"));
    assert!(
        parsed.get("message").is_some_and(Value::is_string),
        "{what}: missing message in {parsed}"
    );
    parsed["error"].as_str().unwrap_or_else(|| panic!("{what}: missing kind in {parsed}")).to_string()
}

/// `--set` overrides pointing the data paths at the synthesized overfit
/// corpus inside the working directory.
fn overfit_sets() -> Vec<&'static str> {
    vec![
        "--set",
        "data.train=data/overfit/train.jsonl",
        "--set",
        "data.val=data/overfit/val.jsonl",
        "--set",
        "data.test=data/overfit/test.jsonl",
    ]
}

fn synth_and_vocab(dir: &Path) {
    expect_success(&run_in(dir, &["synth", "--out", "data"]), "synth");
    let mut args = vec!["build-vocab"];
    args.extend(overfit_sets());
    expect_success(&run_in(dir, &args), "build-vocab");
}

#[test]
fn pipeline_synth_vocab_train_eval_predict() {
    let dir = tempfile::tempdir().unwrap();
    let dir = dir.path();

    // Synthesis writes both corpora, all three splits each.
    expect_success(&run_in(dir, &["synth", "--out", "data"]), "synth");
    for corpus in ["overfit", "parity"] {
        for split in ["train", "val", "test"] {
            let path = dir.join("data").join(corpus).join(format!("{split}.jsonl"));
            assert!(path.is_file(), "missing {}", path.display());
        }
    }

    // Vocabulary lands at the configured path and reports its size.
    let mut args = vec!["build-vocab"];
    args.extend(overfit_sets());
    let out = run_in(dir, &args);
    expect_success(&out, "build-vocab");
    let summary: Value = serde_json::from_str(stdout_of(&out).trim()).unwrap();
    assert!(summary["vocab_size"].as_u64().unwrap() > 4);
    assert!(dir.join("vocab.txt").is_file());

    // Stats renders a table over all three splits.
    let mut args = vec!["stats"];
    args.extend(overfit_sets());
    let out = run_in(dir, &args);
    expect_success(&out, "stats");
    let table = stdout_of(&out);
    for needle in ["train", "val", "test", "dialogs"] {
        assert!(table.contains(needle), "stats output lacks {needle:?}: {table}");
    }

    // Training emits one JSON log line per epoch plus a summary, and saves
    // a checkpoint.
    let mut args = vec!["train", "--out", "model.ckpt", "--set", "train.epochs=3"];
    args.extend(overfit_sets());
    let out = run_in(dir, &args);
    expect_success(&out, "train");
    let stdout = stdout_of(&out);
    let lines: Vec<Value> =
        stdout.lines().map(|l| serde_json::from_str(l).expect("train line is JSON")).collect();
    assert_eq!(lines.len(), 4, "3 epoch lines and a summary: {stdout}");
    for (i, entry) in lines[..3].iter().enumerate() {
        assert_eq!(entry["epoch"].as_u64(), Some(i as u64 + 1));
        assert!(entry["mean_train_loss"].as_f64().unwrap().is_finite());
        assert!(entry["val_macro_f1"].as_f64().is_some());
    }
    assert!(lines[3]["best_epoch"].as_u64().is_some());
    assert_eq!(lines[3]["checkpoint"].as_str(), Some("model.ckpt"));
    assert!(dir.join("model.ckpt").is_file());

    // Evaluation prints the full scorecard.
    let mut args = vec!["eval", "--checkpoint", "model.ckpt", "--split", "val"];
    args.extend(overfit_sets());
    let out = run_in(dir, &args);
    expect_success(&out, "eval");
    let report: Value = serde_json::from_str(stdout_of(&out).trim()).unwrap();
    for key in ["labels", "per_class", "confusion", "macro_f1", "wa", "uwa", "evaluated"] {
        assert!(report.get(key).is_some(), "eval report lacks {key}");
    }
    assert_eq!(report["labels"].as_array().unwrap().len(), 4);

    // The thread cap must not change the scores.
    let capped = bin()
        .current_dir(dir)
        .env("HITRANS_THREADS", "2")
        .args(["eval", "--checkpoint", "model.ckpt", "--split", "val"])
        .args(overfit_sets())
        .output()
        .unwrap();
    expect_success(&capped, "eval with HITRANS_THREADS");
    assert_eq!(stdout_of(&out), stdout_of(&capped));

    // A bad thread cap is rejected through the error channel.
    let bad_threads = bin()
        .current_dir(dir)
        .env("HITRANS_THREADS", "zero")
        .args(["eval", "--checkpoint", "model.ckpt"])
        .args(overfit_sets())
        .output()
        .unwrap();
    assert_eq!(expect_error(&bad_threads, "eval with bad HITRANS_THREADS"), "config");

    // Prediction relabels every utterance, preserving order and texts.
    let mut args = vec![
        "predict",
        "--checkpoint",
        "model.ckpt",
        "--split",
        "test",
        "--out",
        "preds.jsonl",
    ];
    args.extend(overfit_sets());
    expect_success(&run_in(dir, &args), "predict");
    let input = std::fs::read_to_string(dir.join("data/overfit/test.jsonl")).unwrap();
    let output = std::fs::read_to_string(dir.join("preds.jsonl")).unwrap();
    let in_lines: Vec<Value> =
        input.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    let out_lines: Vec<Value> =
        output.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(in_lines.len(), out_lines.len());
    let label_names = ["anger", "joy", "sadness", "neutral"];
    for (a, b) in in_lines.iter().zip(&out_lines) {
        let us_in = a["utterances"].as_array().unwrap();
        let us_out = b["utterances"].as_array().unwrap();
        assert_eq!(us_in.len(), us_out.len());
        for (u_in, u_out) in us_in.iter().zip(us_out) {
            assert_eq!(u_in["text"], u_out["text"]);
            assert_eq!(u_in["speaker"], u_out["speaker"]);
            let label = u_out["label"].as_str().expect("every utterance is labeled");
            assert!(label_names.contains(&label), "unknown label {label}");
        }
    }

    // Without --out the same JSON-lines go to stdout.
    let mut args = vec!["predict", "--checkpoint", "model.ckpt", "--split", "test"];
    args.extend(overfit_sets());
    let streamed = run_in(dir, &args);
    expect_success(&streamed, "predict to stdout");
    assert_eq!(stdout_of(&streamed), output);
}

#[test]
fn gradcheck_exit_codes_follow_the_threshold() {
    let dir = tempfile::tempdir().unwrap();
    let dir = dir.path();

    let out = run_in(dir, &["gradcheck"]);
    expect_success(&out, "gradcheck at defaults");
    let report: Value = serde_json::from_str(stdout_of(&out).trim()).unwrap();
    assert_eq!(report["pass"].as_bool(), Some(true));
    assert!(report["max_rel_err"].as_f64().unwrap() < 1e-5);

    let aware = run_in(dir, &["gradcheck", "--variant", "speaker"]);
    expect_success(&aware, "gradcheck for the speaker variant");

    // A step coarse enough to straddle max-pool decision boundaries must
    // fail the check and the exit code.
    let coarse = run_in(
        dir,
        &["gradcheck", "--variant", "speaker", "--set", "gradcheck.eps=0.0003"],
    );
    assert_eq!(coarse.status.code(), Some(1));
    let report: Value = serde_json::from_str(stdout_of(&coarse).trim()).unwrap();
    assert_eq!(report["pass"].as_bool(), Some(false));
    assert!(report["max_rel_err"].as_f64().unwrap() >= 1e-5);
    // A failed check is a result, not an error: stderr stays quiet.
    assert!(stderr_of(&coarse).is_empty());

    // Step sizes outside the supported window are refused up front.
    let out_of_range = run_in(dir, &["gradcheck", "--set", "gradcheck.eps=1.0"]);
    assert_eq!(expect_error(&out_of_range, "out-of-range eps"), "config");
}

#[test]
fn seed_flag_reseeds_synthesis() {
    let dir = tempfile::tempdir().unwrap();
    let dir = dir.path();
    expect_success(&run_in(dir, &["synth", "--seed", "5", "--out", "a"]), "synth a");
    expect_success(&run_in(dir, &["synth", "--seed", "5", "--out", "b"]), "synth b");
    expect_success(&run_in(dir, &["synth", "--seed", "6", "--out", "c"]), "synth c");
    let read = |name: &str| {
        std::fs::read_to_string(dir.join(name).join("overfit/train.jsonl")).unwrap()
    };
    assert_eq!(read("a"), read("b"), "same seed, same corpus");
    assert_ne!(read("a"), read("c"), "different seed, different corpus");
}

#[test]
fn config_errors_use_the_json_channel() {
    let dir = tempfile::tempdir().unwrap();
    let dir = dir.path();

    let unknown_preset = run_in(dir, &["stats", "--preset", "nope"]);
    assert_eq!(expect_error(&unknown_preset, "unknown preset"), "config");

    let bad_type = run_in(dir, &["stats", "--set", "train.epochs=banana"]);
    let kind = expect_error(&bad_type, "bad value type");
    assert!(kind == "config" || kind == "parse", "got kind {kind}");

    let unknown_key = run_in(dir, &["stats", "--set", "train.eproches=3"]);
    let kind = expect_error(&unknown_key, "unknown key");
    assert!(kind == "config" || kind == "parse", "got kind {kind}");

    let missing_ckpt = run_in(dir, &["eval", "--checkpoint", "missing.ckpt"]);
    let kind = expect_error(&missing_ckpt, "missing checkpoint");
    assert!(kind == "checkpoint" || kind == "io", "got kind {kind}");
}

#[test]
fn incompatible_artifacts_are_refused() {
    let dir = tempfile::tempdir().unwrap();
    let dir = dir.path();
    synth_and_vocab(dir);

    let mut args = vec!["train", "--out", "model.ckpt", "--set", "train.epochs=1"];
    args.extend(overfit_sets());
    expect_success(&run_in(dir, &args), "train");

    // A vocabulary other than the one the checkpoint was trained with.
    let other = vec![
        "build-vocab",
        "--set",
        "data.train=data/parity/train.jsonl",
        "--out",
        "other-vocab.txt",
    ];
    expect_success(&run_in(dir, &other), "second vocabulary");
    let mut args = vec![
        "eval",
        "--checkpoint",
        "model.ckpt",
        "--set",
        "vocab.path=other-vocab.txt",
    ];
    args.extend(overfit_sets());
    let kind = expect_error(&run_in(dir, &args), "eval with foreign vocabulary");
    assert_eq!(kind, "incompatible");

    // A label set other than the one baked into the checkpoint.
    let mut args = vec![
        "eval",
        "--checkpoint",
        "model.ckpt",
        "--set",
        "data.labels=emorynlp7",
        "--set",
        "model.n_classes=7",
    ];
    args.extend(overfit_sets());
    let kind = expect_error(&run_in(dir, &args), "eval with foreign labels");
    assert_eq!(kind, "incompatible");
}
