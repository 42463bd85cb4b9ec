use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = "\
n_layers = 2
d_model = 16
n_heads = 2
ffn_dim = 32
max_positions = 128
context = 32
batch_size = 4
max_steps = 5
k = 2
transfer_layers = 1,2
n_seq = 2
n_splits = 3
seq_len = 40
min_split = 16
eval_steps = 2
max_tokens = 16
bench_cache_lengths = 0,16
bench_widths = 1,4
bench_trials = 2
";

fn htd(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_htd"))
        .args(["--config", dir.join("tiny.cfg").to_str().unwrap(), "--out", dir.to_str().unwrap()])
        .args(args)
        .env("HTD_LOG", "warn")
        .env_remove("HTD_CONFIG")
        .env_remove("HTD_OUT")
        .output()
        .unwrap()
}

fn ok(out: Output) -> String {
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(out.status.success(), "exit {:?}: {stderr}", out.status.code());
    String::from_utf8(out.stdout).unwrap()
}

fn setup(extra: &str) -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("tiny.cfg"), format!("{TINY}{extra}")).unwrap();
    fs::write(dir.path().join("prompts.txt"), "The quick brown fox\nOnce upon a time\n").unwrap();
    dir
}

#[test]
fn unknown_key_is_reported() {
    let dir = setup("widht = 3\n");
    let out = htd(dir.path(), &["pretrain"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("widht"));

    let dir = setup("");
    let out = Command::new(env!("CARGO_BIN_EXE_htd"))
        .args([
            "--config",
            dir.path().join("tiny.cfg").to_str().unwrap(),
            "--out",
            dir.path().to_str().unwrap(),
            "pretrain",
        ])
        .env("HTD_WIDHT", "3")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).to_lowercase().contains("widht"));
}

#[test]
fn usage_errors_and_help() {
    let dir = setup("");
    assert_eq!(htd(dir.path(), &["train", "--method", "nope"]).status.code(), Some(1));
    assert_eq!(htd(dir.path(), &["--help"]).status.code(), Some(0));
    // Nothing trained yet: the missing base is an artifact error.
    assert_eq!(
        htd(dir.path(), &["generate", "--prompt", "hi", "--mode", "autoregressive"])
            .status
            .code(),
        Some(2)
    );
}

#[test]
fn empty_bench_prints_an_empty_table() {
    let dir = setup("");
    fs::write(dir.path().join("empty.txt"), "").unwrap();
    let out = ok(htd(
        dir.path(),
        &["bench", "--prompt-file", dir.path().join("empty.txt").to_str().unwrap()],
    ));
    assert!(out.contains("mode"));
    assert!(dir.path().join("bench.txt").is_file());
}

#[test]
fn pipeline_is_lossless_and_reproducible() {
    let dir = setup("prompt_file = prompts.txt\n");
    let d = dir.path();
    ok(htd(d, &["pretrain"]));
    assert!(d.join("base.htc").is_file() && d.join("base.htc.config").is_file());
    ok(htd(d, &["train", "--method", "transfer"]));
    ok(htd(d, &["train", "--method", "medusa"]));
    ok(htd(d, &["train", "--method", "early_exit"]));

    let prompts = d.join("prompts.txt");
    let prompts = prompts.to_str().unwrap();
    ok(htd(d, &["generate", "--prompt-file", prompts, "--mode", "autoregressive"]));
    ok(htd(d, &["generate", "--prompt-file", prompts, "--mode", "transfer_tree"]));
    let text = |mode: &str| {
        let s = fs::read_to_string(d.join(format!("generate_{mode}.txt"))).unwrap();
        s.lines().next().unwrap_or("").to_string()
    };
    assert_eq!(text("autoregressive"), text("transfer_tree"));

    // The config stored beside an output regenerates it exactly.
    let first = fs::read_to_string(d.join("generate_transfer_tree.txt")).unwrap();
    let stored = d.join("generate_transfer_tree.txt.config");
    let again = Command::new(env!("CARGO_BIN_EXE_htd"))
        .args([
            "--config",
            stored.to_str().unwrap(),
            "--out",
            d.to_str().unwrap(),
            "generate",
            "--mode",
            "transfer_tree",
        ])
        .env("HTD_LOG", "warn")
        .output()
        .unwrap();
    ok(again);
    let second = fs::read_to_string(d.join("generate_transfer_tree.txt")).unwrap();
    assert_eq!(first.lines().next(), second.lines().next());

    let table = ok(htd(d, &["bench", "--prompt-file", prompts]));
    for mode in ["autoregressive", "transfer_tree", "transfer_two_pass", "medusa_tree"] {
        assert!(table.contains(mode), "{table}");
    }
    for which in ["accuracy", "cosine", "microbench", "ablation"] {
        ok(htd(d, &["analyze", "--which", which]));
        assert!(d.join(format!("{which}.csv")).is_file());
    }

    // A base trained with another seed no longer matches the drafters.
    ok(htd(d, &["--seed", "9", "pretrain"]));
    let out = htd(d, &["generate", "--prompt", "hi", "--mode", "transfer_tree"]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
}
