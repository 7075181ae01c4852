//! End-to-end tests spawning the phonlu binary.

use std::fs;
use std::path::Path;
use std::process::Output;

fn phonlu(dir: &Path, args: &[&str]) -> Output {
    std::process::Command::new(env!("CARGO_BIN_EXE_phonlu"))
        .current_dir(dir)
        .env_remove("PHONLU_CACHE_DIR")
        .args(args)
        .output()
        .expect("binary spawns")
}

fn phonlu_env(dir: &Path, args: &[&str], key: &str, value: &str) -> Output {
    std::process::Command::new(env!("CARGO_BIN_EXE_phonlu"))
        .current_dir(dir)
        .env(key, value)
        .args(args)
        .output()
        .expect("binary spawns")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("no signal")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn assert_ok(out: &Output) {
    assert_eq!(code(out), 0, "stderr: {}", stderr(out));
}

const FILLERS: [&str; 8] = ["a", "e", "i", "o", "u", "m", "n", "s"];

fn utterance_json(id: &str, intent: &str, marker: &str, i: usize) -> serde_json::Value {
    let mut phones: Vec<String> = (0..5)
        .map(|j| FILLERS[(i + 3 * j) % FILLERS.len()].to_string())
        .collect();
    phones.insert(i % 6, marker.to_string());
    serde_json::json!({"id": id, "phones": phones, "intent": intent, "language": "xx"})
}

/// Two intents separated by a marker phone, deterministic filler pattern.
fn write_corpus(path: &Path, n_per_class: usize) {
    let mut lines = String::new();
    for i in 0..n_per_class {
        for (intent, marker) in [("left", "q"), ("right", "z")] {
            let row = utterance_json(&format!("{intent}{i}"), intent, marker, i);
            lines.push_str(&row.to_string());
            lines.push('\n');
        }
    }
    fs::write(path, lines).unwrap();
}

fn write_class(path: &Path, intent: &str, marker: &str, n: usize) {
    let mut lines = String::new();
    for i in 0..n {
        let row = utterance_json(&format!("{intent}{i}"), intent, marker, i);
        lines.push_str(&row.to_string());
        lines.push('\n');
    }
    fs::write(path, lines).unwrap();
}

fn write_cnn_cfg(path: &Path) {
    fs::write(
        path,
        "embed_dim = 8\nkernel_sizes = 3\nconv_filters = 8\nlstm_hidden = 8\nuse_attention = true\n",
    )
    .unwrap();
}

const FAST: [&str; 8] = [
    "--learning-rate", "0.02",
    "--batch-size", "8",
    "--max-epochs", "10",
    "--patience", "10",
];

fn train_fast(dir: &Path, out: &str) -> Output {
    let mut args = vec![
        "train", "--data", "data.jsonl", "--family", "cnn-lstm", "--config", "cnn.cfg",
        "--seed", "1", "--out", out,
    ];
    args.extend(FAST);
    phonlu(dir, &args)
}

#[test]
fn usage_errors_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let no_args = phonlu(dir.path(), &[]);
    assert_eq!(code(&no_args), 1);

    let unknown = phonlu(dir.path(), &["frobnicate"]);
    assert_eq!(code(&unknown), 1);
    assert!(stderr(&unknown).contains("Usage"));

    let missing_flag = phonlu(dir.path(), &["eval", "--model", "m.ckpt"]);
    assert_eq!(code(&missing_flag), 1);

    let neither_input = phonlu(dir.path(), &["transcribe", "--out", "o"]);
    assert_eq!(code(&neither_input), 1);

    let help = phonlu(dir.path(), &["--help"]);
    assert_eq!(code(&help), 0);
    assert!(stdout(&help).contains("Usage"));
}

#[test]
fn train_then_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    write_corpus(&dir.path().join("data.jsonl"), 15);
    write_cnn_cfg(&dir.path().join("cnn.cfg"));

    let train = train_fast(dir.path(), "run");
    assert_ok(&train);
    let metrics: serde_json::Value = serde_json::from_str(&stdout(&train)).unwrap();
    assert!(metrics["accuracy"].as_f64().unwrap() > 0.5);

    let out = dir.path().join("run");
    for artifact in ["manifest.json", "model.ckpt", "metrics.json", "val_metrics.json", "epochs.jsonl"] {
        assert!(out.join(artifact).is_file(), "{artifact} missing");
    }

    let eval = phonlu(
        dir.path(),
        &["eval", "--model", "run/model.ckpt", "--data", "data.jsonl", "--out", "ev"],
    );
    assert_ok(&eval);
    let eval_metrics: serde_json::Value = serde_json::from_str(&stdout(&eval)).unwrap();
    assert!(eval_metrics["accuracy"].as_f64().unwrap() > 0.8);
    assert!(dir.path().join("ev/manifest.json").is_file());
    assert!(dir.path().join("ev/metrics.json").is_file());
}

#[test]
fn rerunning_with_same_seed_reproduces_metrics() {
    let dir = tempfile::tempdir().unwrap();
    write_corpus(&dir.path().join("data.jsonl"), 12);
    write_cnn_cfg(&dir.path().join("cnn.cfg"));

    assert_ok(&train_fast(dir.path(), "r1"));
    assert_ok(&train_fast(dir.path(), "r2"));
    assert_eq!(
        fs::read(dir.path().join("r1/metrics.json")).unwrap(),
        fs::read(dir.path().join("r2/metrics.json")).unwrap()
    );

    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("r1/manifest.json")).unwrap())
            .unwrap();
    assert_eq!(manifest["seed"], 1);
    assert!(manifest["command"].as_str().unwrap().contains("train"));
    assert!(manifest["finished_at"].is_string());
}

#[test]
fn flags_override_config_file() {
    let dir = tempfile::tempdir().unwrap();
    write_corpus(&dir.path().join("data.jsonl"), 12);
    fs::write(
        dir.path().join("cnn.cfg"),
        "embed_dim = 8\nkernel_sizes = 3\nconv_filters = 8\nlstm_hidden = 8\nmax_epochs = 5\n",
    )
    .unwrap();

    let out = phonlu(
        dir.path(),
        &[
            "train", "--data", "data.jsonl", "--family", "cnn-lstm", "--config", "cnn.cfg",
            "--learning-rate", "0.02", "--batch-size", "8", "--max-epochs", "2",
            "--patience", "2", "--out", "run",
        ],
    );
    assert_ok(&out);
    let epochs = fs::read_to_string(dir.path().join("run/epochs.jsonl")).unwrap();
    assert_eq!(epochs.lines().count(), 2, "flag --max-epochs 2 must beat the file's 5");
}

#[test]
fn unknown_config_key_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    write_corpus(&dir.path().join("data.jsonl"), 12);
    fs::write(dir.path().join("bad.cfg"), "embedd_dim = 8\n").unwrap();
    let out = phonlu(
        dir.path(),
        &["train", "--data", "data.jsonl", "--config", "bad.cfg", "--out", "run"],
    );
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("embedd_dim"));
}

#[test]
fn missing_data_file_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = phonlu(dir.path(), &["vocab", "--data", "nope.jsonl", "--out", "run"]);
    assert_eq!(code(&out), 2);
}

#[test]
fn divergent_training_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    write_corpus(&dir.path().join("data.jsonl"), 12);
    write_cnn_cfg(&dir.path().join("cnn.cfg"));
    let out = phonlu(
        dir.path(),
        &[
            "train", "--data", "data.jsonl", "--family", "cnn-lstm", "--config", "cnn.cfg",
            "--learning-rate", "1e200", "--batch-size", "8", "--max-epochs", "3",
            "--patience", "3", "--out", "run",
        ],
    );
    assert_eq!(code(&out), 3);
    assert!(stderr(&out).contains("diverged"));
}

#[test]
fn cross_validation_reports_folds() {
    let dir = tempfile::tempdir().unwrap();
    write_corpus(&dir.path().join("data.jsonl"), 12);
    write_cnn_cfg(&dir.path().join("cnn.cfg"));
    let mut args = vec![
        "train", "--data", "data.jsonl", "--family", "cnn-lstm", "--config", "cnn.cfg",
        "--cv-folds", "2", "--seed", "1", "--out", "run",
    ];
    args.extend(FAST);
    let out = phonlu(dir.path(), &args);
    assert_ok(&out);
    let text = stdout(&out);
    assert!(text.contains("fold 0"));
    assert!(text.contains("fold 1"));
    assert!(text.contains("mean accuracy"));
    let cv: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("run/cv.json")).unwrap()).unwrap();
    assert_eq!(cv["fold_accuracies"].as_array().unwrap().len(), 2);
}

#[test]
fn vocab_counts_distinct_phones() {
    let dir = tempfile::tempdir().unwrap();
    write_corpus(&dir.path().join("data.jsonl"), 10);
    let out = phonlu(dir.path(), &["vocab", "--data", "data.jsonl", "--out", "run"]);
    assert_ok(&out);
    let vocab: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("run/vocab.json")).unwrap())
            .unwrap();
    // 8 fillers + 2 markers.
    assert_eq!(vocab["num_phones"], 10);
    assert_eq!(vocab["size"], 14);
    assert!(stdout(&out).contains("10 phones"));
}

#[test]
fn pretrain_then_warm_start_train() {
    let dir = tempfile::tempdir().unwrap();
    write_corpus(&dir.path().join("data.jsonl"), 15);
    fs::write(
        dir.path().join("tf.cfg"),
        "embed_dim = 8\nnum_heads = 2\nnum_layers = 1\nff_hidden = 16\nmax_seq_len = 16\n",
    )
    .unwrap();

    let pre = phonlu(
        dir.path(),
        &[
            "pretrain", "--data", "data.jsonl", "--config", "tf.cfg",
            "--learning-rate", "0.003", "--batch-size", "8", "--max-epochs", "2",
            "--patience", "2", "--out", "pre",
        ],
    );
    assert_ok(&pre);
    assert!(stdout(&pre).contains("held-out masked-prediction loss"));
    assert!(dir.path().join("pre/encoder.ckpt").is_file());
    assert!(dir.path().join("pre/epochs.jsonl").is_file());

    let warm = phonlu(
        dir.path(),
        &[
            "train", "--data", "data.jsonl", "--family", "transformer", "--config", "tf.cfg",
            "--init", "pre/encoder.ckpt", "--learning-rate", "0.005", "--batch-size", "8",
            "--max-epochs", "3", "--patience", "3", "--seed", "1", "--out", "warm",
        ],
    );
    assert_ok(&warm);
    assert!(dir.path().join("warm/model.ckpt").is_file());
}

#[test]
fn transcribe_single_file_honors_env_cache() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("stub.sh"), "cat \"$1\"\n").unwrap();
    fs::write(dir.path().join("a.wav"), "p a t a k\n").unwrap();
    let cache = dir.path().join("envcache");

    let out = phonlu_env(
        dir.path(),
        &[
            "transcribe", "--audio", "a.wav", "--command-template", "sh stub.sh {input}",
            "--out", "run",
        ],
        "PHONLU_CACHE_DIR",
        cache.to_str().unwrap(),
    );
    assert_ok(&out);
    assert_eq!(stdout(&out).trim(), "p a t a k");
    assert_eq!(
        fs::read_to_string(dir.path().join("run/transcript.txt")).unwrap(),
        "p a t a k\n"
    );
    let cached = fs::read_dir(&cache).unwrap().count();
    assert_eq!(cached, 1, "raw output must land in PHONLU_CACHE_DIR");
}

#[test]
fn transcribe_corpus_writes_jsonl_and_sidecar() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("stub.sh"), "cat \"$1\"\n").unwrap();
    fs::write(dir.path().join("a.wav"), "p a t").unwrap();
    fs::write(dir.path().join("b.wav"), "m n o").unwrap();
    fs::write(
        dir.path().join("man.csv"),
        "path,id,intent,language,speaker\na.wav,u1,play,si,\nmissing.wav,u2,stop,si,\nb.wav,u3,stop,si,spk\n",
    )
    .unwrap();

    let out = phonlu(
        dir.path(),
        &[
            "transcribe", "--manifest", "man.csv", "--command-template", "sh stub.sh {input}",
            "--out", "run",
        ],
    );
    assert_ok(&out);
    assert!(stdout(&out).contains("transcribed 2 of 3"));
    let records = fs::read_to_string(dir.path().join("run/transcripts.jsonl")).unwrap();
    assert_eq!(records.lines().count(), 2);
    let first: serde_json::Value = serde_json::from_str(records.lines().next().unwrap()).unwrap();
    assert_eq!(first["id"], "u1");
    assert_eq!(first["phones"], serde_json::json!(["p", "a", "t"]));
    let sidecar = fs::read_to_string(dir.path().join("run/transcripts.jsonl.errors")).unwrap();
    assert_eq!(sidecar.lines().count(), 1);
    assert!(sidecar.contains("u2"));
}

#[test]
fn lusid_chain_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    write_class(&dir.path().join("ca.jsonl"), "aa", "q", 12);
    write_class(&dir.path().join("cb.jsonl"), "bb", "z", 12);
    write_cnn_cfg(&dir.path().join("cnn.cfg"));

    let mut args = vec![
        "lusid-train", "--class-a", "ca.jsonl", "--class-b", "cb.jsonl",
        "--config", "cnn.cfg", "--seed", "1", "--out", "lt",
    ];
    args.extend(FAST);
    let train = phonlu(dir.path(), &args);
    assert_ok(&train);
    assert!(stdout(&train).contains("train accuracy"));

    let locate = phonlu(
        dir.path(),
        &["lusid-locate", "--model", "lt/model.ckpt", "--data", "cb.jsonl", "--out", "ll"],
    );
    assert_ok(&locate);
    let peaks = fs::read_to_string(dir.path().join("ll/peaks.csv")).unwrap();
    assert_eq!(peaks.lines().count(), 13);
    assert!(peaks.starts_with("id,peak\n"));

    let tune = phonlu(
        dir.path(),
        &[
            "lusid-tune", "--model", "lt/model.ckpt", "--base", "cb.jsonl",
            "--prototype", "q", "--label", "aa", "--l-max", "1", "--r-max", "1", "--out", "tu",
        ],
    );
    assert_ok(&tune);
    assert!(stdout(&tune).contains("best window"));
    let grid = fs::read_to_string(dir.path().join("tu/tune.csv")).unwrap();
    assert!(grid.starts_with("l,r,accuracy\n"));
    assert_eq!(grid.lines().count(), 5);

    let splice = phonlu(
        dir.path(),
        &[
            "lusid-splice", "--model", "lt/model.ckpt", "--base", "cb.jsonl",
            "--prototype", "q", "--label", "aa", "--l", "0", "--r", "0", "--out", "sp",
        ],
    );
    assert_ok(&splice);
    assert!(stdout(&splice).contains("verified fraction"));
    assert!(dir.path().join("sp/report.json").is_file());

    let verify = phonlu(
        dir.path(),
        &[
            "lusid-verify", "--model", "lt/model.ckpt", "--data", "sp/generated.jsonl",
            "--target", "aa", "--out", "ve",
        ],
    );
    assert_ok(&verify);
    let line = stdout(&verify);
    let fraction: f64 = line.trim().rsplit(' ').next().unwrap().parse().unwrap();
    assert!((0.0..=1.0).contains(&fraction), "line was {line:?}");

    let bad_label = phonlu(
        dir.path(),
        &[
            "lusid-verify", "--model", "lt/model.ckpt", "--data", "sp/generated.jsonl",
            "--target", "nope", "--out", "ve2",
        ],
    );
    assert_eq!(code(&bad_label), 2);
}

#[test]
fn curve_emits_schema_stable_csv() {
    let dir = tempfile::tempdir().unwrap();
    write_corpus(&dir.path().join("data.jsonl"), 15);
    write_cnn_cfg(&dir.path().join("cnn.cfg"));
    let out = phonlu(
        dir.path(),
        &[
            "curve", "--data", "data.jsonl", "--step", "9", "--family", "cnn-lstm",
            "--config", "cnn.cfg", "--learning-rate", "0.02", "--batch-size", "8",
            "--max-epochs", "5", "--patience", "5", "--seed", "1", "--out", "run",
        ],
    );
    assert_ok(&out);
    let csv = fs::read_to_string(dir.path().join("run/curve.csv")).unwrap();
    assert!(csv.starts_with("subset_size,accuracy,macro_f1\n"));
    assert_eq!(csv.lines().next().unwrap(), stdout(&out).lines().next().unwrap());
}

#[test]
fn grid_needs_space_for_cnn_and_writes_leaderboard() {
    let dir = tempfile::tempdir().unwrap();
    write_corpus(&dir.path().join("data.jsonl"), 12);

    let missing = phonlu(
        dir.path(),
        &["grid", "--data", "data.jsonl", "--family", "cnn-lstm", "--out", "run"],
    );
    assert_eq!(code(&missing), 2);

    fs::write(
        dir.path().join("space.cfg"),
        "embed_dim = 8\nconv_filters = 8\nlstm_hidden = 4,8\n",
    )
    .unwrap();
    let out = phonlu(
        dir.path(),
        &[
            "grid", "--data", "data.jsonl", "--family", "cnn-lstm", "--space", "space.cfg",
            "--learning-rate", "0.02", "--batch-size", "8", "--max-epochs", "3",
            "--patience", "3", "--seed", "1", "--out", "run",
        ],
    );
    assert_ok(&out);
    let board = fs::read_to_string(dir.path().join("run/leaderboard.csv")).unwrap();
    assert!(board.starts_with("order,conv_filters,embed_dim,lstm_hidden,val_accuracy,num_params\n"));
    assert_eq!(board.lines().count(), 3);
    assert!(dir.path().join("run/best_config.json").is_file());
    assert!(stdout(&out).contains("best of 2"));
}

#[test]
fn plot_attention_writes_csv_and_svg() {
    let dir = tempfile::tempdir().unwrap();
    write_class(&dir.path().join("ca.jsonl"), "aa", "q", 10);
    write_class(&dir.path().join("cb.jsonl"), "bb", "z", 10);
    write_cnn_cfg(&dir.path().join("cnn.cfg"));
    let mut args = vec![
        "lusid-train", "--class-a", "ca.jsonl", "--class-b", "cb.jsonl",
        "--config", "cnn.cfg", "--seed", "1", "--out", "lt",
    ];
    args.extend(FAST);
    assert_ok(&phonlu(dir.path(), &args));

    let out = phonlu(
        dir.path(),
        &[
            "plot-attention", "--model", "lt/model.ckpt", "--phones", "a e q o u",
            "--out", "run",
        ],
    );
    assert_ok(&out);
    let csv = fs::read_to_string(dir.path().join("run/attention.csv")).unwrap();
    assert_eq!(csv.lines().count(), 6);
    assert!(csv.starts_with("token,score\n"));
    let svg = fs::read_to_string(dir.path().join("run/attention.svg")).unwrap();
    assert_eq!(svg.matches("class=\"bar\"").count(), 5);
    assert!(stdout(&out).contains("peak at"));
}

#[test]
fn every_run_directory_gets_exactly_one_manifest() {
    let dir = tempfile::tempdir().unwrap();
    write_corpus(&dir.path().join("data.jsonl"), 10);
    assert_ok(&phonlu(dir.path(), &["vocab", "--data", "data.jsonl", "--out", "run"]));
    assert_ok(&phonlu(dir.path(), &["vocab", "--data", "data.jsonl", "--out", "run"]));
    let manifests = fs::read_dir(dir.path().join("run"))
        .unwrap()
        .filter(|e| {
            e.as_ref()
                .unwrap()
                .file_name()
                .to_string_lossy()
                .contains("manifest")
        })
        .count();
    assert_eq!(manifests, 1);
}
