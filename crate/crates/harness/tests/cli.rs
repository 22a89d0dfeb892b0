use std::path::Path;
use std::process::{Command, Output};

fn tdaf(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tdaf")).args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn field(line: &str, key: &str) -> String {
    line.split_whitespace()
        .find_map(|kv| kv.strip_prefix(&format!("{key}=")))
        .unwrap_or_else(|| panic!("no {key} in {line}"))
        .to_string()
}

#[test]
fn unknown_subcommand_and_flag_print_usage() {
    for args in [&["frobnicate"][..], &["params", "--colour", "red"][..]] {
        let o = tdaf(args);
        assert!(!o.status.success());
        assert!(String::from_utf8_lossy(&o.stderr).contains("Usage"));
    }
}

#[test]
fn config_errors_cite_lines() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    std::fs::write(&cfg, "model.flows = 3\noptim.lr = 0.1\noptim.nesterov = true\n").unwrap();
    let o = tdaf(&["params", "--config", cfg.to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("line 3"));
}

#[test]
fn params_matches_hand_counts() {
    // tiny ResNet, three 32-channel stages, 4 classes:
    //   stage 1: 3·32·9 + 64 + 32·32·9 + 64 + (3·32 + 32) = 10336
    //   stages 2, 3: 2·(9216 + 64) + (1024 + 32) = 19616 each
    //   head: 32·4 + 4 = 132  → baseline 49700
    // one ANAR-3 per stage junction (two of them), c = 32:
    //   trans 1×1 32→4 + affine 8 = 136, deconv 4×4 4→1 + affine 2 = 66, out 1×1 1→1 + bias = 2
    let o = tdaf(&["params"]);
    assert!(o.status.success());
    let line = stdout(&o);
    assert_eq!(line.lines().count(), 1);
    assert_eq!(field(&line, "baseline_total"), "49700");
    assert_eq!(field(&line, "attention"), "408");
    assert_eq!(field(&line, "total"), "50108");
    assert_eq!(field(&line, "overhead_pct"), format!("{:.3}", 100.0 * 408.0 / 49700.0));
}

#[test]
fn gradcheck_exits_zero_when_all_blocks_pass() {
    let o = tdaf(&["gradcheck"]);
    let line = stdout(&o);
    assert!(o.status.success(), "{line}");
    assert_eq!(field(&line, "failing"), "0");
}

fn metrics(dir: &Path) -> Vec<u8> {
    std::fs::read(dir.join("metrics.csv")).unwrap()
}

#[test]
fn train_eval_export_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let o = tdaf(&["gen-data", "--seed", "3", "--out", data.to_str().unwrap(), "--train", "96", "--test", "48"]);
    assert!(o.status.success());
    assert_eq!(field(&stdout(&o), "train"), "96");
    let cfg = dir.path().join("run.cfg");
    std::fs::write(
        &cfg,
        format!(
            "train.epochs = 1\ndata.dir = {}\ndata.train_samples = 96\ndata.test_samples = 48\n",
            data.display()
        ),
    )
    .unwrap();
    let cfg = cfg.to_str().unwrap();
    let runs: Vec<_> = ["a", "b"].iter().map(|n| dir.path().join(n)).collect();
    for r in &runs {
        let o = tdaf(&["train", "--config", cfg, "--seed", "7", "--out", r.to_str().unwrap()]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        assert_eq!(field(&stdout(&o), "seed"), "7");
    }
    assert_eq!(metrics(&runs[0]), metrics(&runs[1]));
    let best = tdaf(&["train", "--config", cfg, "--seed", "7", "--out", runs[0].to_str().unwrap()]);
    let logged = field(&stdout(&best), "best_test_acc");

    let ckpt = runs[0].join("best.ckpt");
    let o = tdaf(&["eval", "--config", cfg, "--checkpoint", ckpt.to_str().unwrap()]);
    assert!(o.status.success());
    assert_eq!(field(&stdout(&o), "accuracy"), logged);

    let attn = dir.path().join("attn");
    let o = tdaf(&["export-attn", "--config", cfg, "--checkpoint", ckpt.to_str().unwrap(), "--out", attn.to_str().unwrap()]);
    assert!(o.status.success());
    assert_eq!(field(&stdout(&o), "files"), "3");
    assert!(attn.join("attn_f3_s1.pgm").exists());
}
