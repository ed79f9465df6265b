use std::path::Path;
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_formation-lab"))
}

fn only_run(root: &Path) -> std::path::PathBuf {
    let mut dirs: Vec<_> = std::fs::read_dir(root).unwrap().map(|e| e.unwrap().path()).collect();
    assert_eq!(dirs.len(), 1, "{dirs:?}");
    dirs.pop().unwrap()
}

#[test]
fn gradcheck_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let ok = bin()
        .args(["gradcheck", "--out"])
        .arg(dir.path().join("a"))
        .output()
        .unwrap();
    assert!(ok.status.success(), "{}", String::from_utf8_lossy(&ok.stderr));
    let text = String::from_utf8_lossy(&ok.stdout);
    assert_eq!(text.matches("[PASS]").count(), 4, "{text}");

    let bad = bin()
        .args(["gradcheck", "--gradcheck.inject_bug", "--out"])
        .arg(dir.path().join("b"))
        .output()
        .unwrap();
    assert!(!bad.status.success());
    assert!(String::from_utf8_lossy(&bad.stdout).contains("[FAIL]"));
}

#[test]
fn train_with_config_file_and_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    std::fs::write(
        &cfg,
        "seed = 3\n[net]\nmessage_width = 8\nhidden_width = 8\nheads = 2\n[env]\nepisode_length = 10\n[train]\nepisodes = 3\nepochs = 1\n",
    )
    .unwrap();
    let out = bin()
        .args(["train", "--config"])
        .arg(&cfg)
        .args(["--n", "7", "--obs-radius", "2", "--mode", "no-comm", "--out"])
        .arg(dir.path().join("runs"))
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let run = only_run(&dir.path().join("runs"));
    for f in ["config.json", "metrics.csv", "checkpoint.bin", "log.txt"] {
        assert!(run.join(f).exists(), "{f}");
    }
    let saved: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(run.join("config.json")).unwrap()).unwrap();
    assert_eq!(saved["env"]["n_active"], 7);
    assert_eq!(saved["env"]["delta_obs"], 2.0);
    assert_eq!(saved["train"]["mode"], "no-comm");
    let log = std::fs::read_to_string(run.join("log.txt")).unwrap();
    assert!(log.contains("no-comm: max |message| over training = 0"), "{log}");
    assert_eq!(std::fs::read_to_string(run.join("metrics.csv")).unwrap().lines().count(), 4);
}

#[test]
fn bad_input_fails_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let unknown = bin().args(["train", "--no_such_key", "1"]).current_dir(dir.path()).output().unwrap();
    assert!(!unknown.status.success());
    assert!(String::from_utf8_lossy(&unknown.stderr).contains("unknown configuration key"));

    let missing = bin()
        .args(["eval-adaptive", "--checkpoint", "nope.bin", "--out"])
        .arg(dir.path().join("runs"))
        .output()
        .unwrap();
    assert!(!missing.status.success());
}
