//! End-to-end tests that drive the compiled binary: preprocess determinism,
//! train/evaluate round trip, resume equivalence, and exit codes.

use std::path::Path;
use std::process::Command;

use rand::{Rng as _, SeedableRng as _};
use rand_chacha::ChaCha8Rng;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_miasrec"))
}

/// A log that comfortably survives the support-5 / length-2 filter.
fn write_fixture_log(path: &Path) {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut text = String::new();
    for s in 0..60u32 {
        let len = rng.gen_range(2..7);
        for e in 0..len {
            let item = rng.gen_range(0..12);
            text.push_str(&format!("s{s}\ti{item}\t{}\n", s as i64 * 100 + e));
        }
    }
    std::fs::write(path, text).unwrap();
}

fn write_config(path: &Path, root: &Path) {
    let text = format!(
        r#"
raw_log = "{root}/log.tsv"
corpus_dir = "{root}/corpus"
checkpoint_dir = "{root}/ckpt"
report_path = "{root}/report.json"
embedding_dim = 8
max_len = 10
batch_size = 64
epoch_cap = 2
dropout = 0.0
seeds = [7]
"#,
        root = root.display()
    );
    std::fs::write(path, text).unwrap();
}

#[test]
fn preprocess_is_deterministic_and_splits_8_1_1() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    write_fixture_log(&root.join("log.tsv"));
    let config = root.join("run.toml");
    write_config(&config, root);

    let out = bin()
        .args(["--config", config.to_str().unwrap(), "preprocess"])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("# Sessions"), "stats line missing: {stdout}");

    let read = |name: &str| std::fs::read(root.join("corpus").join(name)).unwrap();
    let (a_train, a_val, a_test) = (read("train.json"), read("val.json"), read("test.json"));

    // session counts follow the 8:1:1 chronological split
    let parse = |bytes: &[u8]| -> serde_json::Value { serde_json::from_slice(bytes).unwrap() };
    let count = |v: &serde_json::Value| v["sessions"].as_array().unwrap().len();
    let (n_train, n_val, n_test) = (
        count(&parse(&a_train)),
        count(&parse(&a_val)),
        count(&parse(&a_test)),
    );
    let total = n_train + n_val + n_test;
    assert_eq!(n_train, total * 8 / 10);
    assert_eq!(n_train + n_val, total * 9 / 10);

    // each corpus artifact carries the run-config echo
    assert!(parse(&a_train)["config_echo"].is_object());
    assert!(parse(&a_test)["config_echo"]["min_item_support"].is_number());

    // rerunning produces byte-identical artifacts
    let out = bin()
        .args(["--config", config.to_str().unwrap(), "preprocess"])
        .output()
        .unwrap();
    assert!(out.status.success());
    assert_eq!(a_train, read("train.json"));
    assert_eq!(a_val, read("val.json"));
    assert_eq!(a_test, read("test.json"));
}

#[test]
fn train_evaluate_round_trip_produces_report() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    write_fixture_log(&root.join("log.tsv"));
    let config = root.join("run.toml");
    write_config(&config, root);

    for cmd in ["preprocess", "train", "evaluate"] {
        let out = bin()
            .args(["--config", config.to_str().unwrap(), cmd])
            .output()
            .unwrap();
        assert!(
            out.status.success(),
            "{cmd} failed: {}",
            String::from_utf8_lossy(&out.stderr)
        );
    }

    assert!(root.join("ckpt/best_seed7.json").exists());
    assert!(root.join("ckpt/last_seed7.json").exists());
    assert!(root.join("ckpt/history_seed7.jsonl").exists());

    let report: serde_json::Value =
        serde_json::from_slice(&std::fs::read(root.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["format_version"], 1);
    assert_eq!(report["cutoffs"].as_array().unwrap().len(), 3);
    assert_eq!(report["overall"].as_array().unwrap().len(), 3);
    assert_eq!(report["buckets"].as_array().unwrap().len(), 6);
    assert_eq!(report["seeds"].as_array().unwrap().len(), 1);
    assert!(report["corpus_fingerprint"].is_string());
    assert!(report["config_echo"].is_object());
    // the per-seed report sits next to the aggregate
    assert!(root.join("report.seed7.json").exists());

    // history is one JSON record per epoch
    let history = std::fs::read_to_string(root.join("ckpt/history_seed7.jsonl")).unwrap();
    let epochs: Vec<serde_json::Value> = history
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert!(!epochs.is_empty() && epochs.len() <= 2);
    assert_eq!(epochs[0]["epoch"], 1);
}

#[test]
fn resume_matches_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    write_fixture_log(&root.join("log.tsv"));

    let straight = root.join("straight.toml");
    let resumed = root.join("resumed.toml");
    let base = |ckpt: &str, cap: usize| {
        format!(
            r#"
raw_log = "{root}/log.tsv"
corpus_dir = "{root}/corpus"
checkpoint_dir = "{root}/{ckpt}"
embedding_dim = 8
max_len = 10
batch_size = 64
epoch_cap = {cap}
dropout = 0.1
seeds = [7]
"#,
            root = root.display()
        )
    };
    std::fs::write(&straight, base("ckpt_a", 3)).unwrap();

    let run = |config: &Path, extra: &[&str]| {
        let mut args = vec!["--config", config.to_str().unwrap(), "train"];
        args.extend_from_slice(extra);
        let out = bin().args(&args).output().unwrap();
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    };

    let out = bin()
        .args(["--config", straight.to_str().unwrap(), "preprocess"])
        .output()
        .unwrap();
    assert!(out.status.success());

    // one uninterrupted 3-epoch run
    run(&straight, &[]);

    // the same 3 epochs as 1 + resume(3)
    std::fs::write(&resumed, base("ckpt_b", 1)).unwrap();
    run(&resumed, &[]);
    std::fs::write(&resumed, base("ckpt_b", 3)).unwrap();
    run(&resumed, &["--resume"]);

    let a = std::fs::read(root.join("ckpt_a/last_seed7.json")).unwrap();
    let b = std::fs::read(root.join("ckpt_b/last_seed7.json")).unwrap();
    assert_eq!(a, b, "resumed run must reproduce the uninterrupted run exactly");
}

#[test]
fn exit_codes_distinguish_config_and_data_errors() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();

    // preprocess without raw_log: configuration error -> exit 1
    let out = bin()
        .current_dir(root)
        .args(["preprocess"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));

    // raw_log pointing nowhere: data error -> exit 2
    let config = root.join("run.toml");
    std::fs::write(&config, format!("raw_log = \"{}/missing.tsv\"\n", root.display())).unwrap();
    let out = bin()
        .current_dir(root)
        .args(["--config", config.to_str().unwrap(), "preprocess"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));

    // unknown key in the config file -> exit 1
    std::fs::write(&config, "definitely_not_a_key = true\n").unwrap();
    let out = bin()
        .current_dir(root)
        .args(["--config", config.to_str().unwrap(), "preprocess"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
}
