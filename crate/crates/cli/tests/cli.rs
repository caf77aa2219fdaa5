use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
seed = 3

[data.synthetic]
n_clusters = 12
paraphrases_per_cluster = 5
vocab_size = 160

[stage1]
max_len = 10
d_z = 6
emb_dim = 8
enc_hidden = 6
enc_layers = 1
dec_hidden = 8
batch_size = 8
max_epochs = 1

[stage2]
batch_size = 4
k = 5
validation_interval = 0.5
max_epochs = 1

[qbs]
bilstm_hidden = 4
bag_size = 3

[qbf]
d_model = 8
heads = 2
layers = 1

[matcher]
layers = 1
heads = 2
"#;

fn qbprf(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_qbprf"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = qbprf(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn end_to_end_with_shared_run_directory() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.toml");
    fs::write(&cfg, TINY).unwrap();
    let run = dir.path().join("run");
    let common = ["--config", p(&cfg), "--out", p(&run)];

    ok(&[&["gen-synthetic"][..], &common].concat());
    assert!(run.join("data/queries.jsonl").exists());
    assert!(run.join("reports/data.tsv").exists());

    ok(&[&["train-stage1", "--data", p(&run)][..], &common].concat());
    let stage1 = run.join("checkpoints/stage1.json");
    assert!(stage1.exists() && run.join("checkpoints/stage1.bin").exists());

    ok(&[&["build-index", "--data", p(&run), "--stage1", p(&stage1)][..], &common].concat());
    let index = run.join("checkpoints/index.json");
    assert!(index.exists());

    let stdout = ok(&[
        &["train-stage2", "--data", p(&run), "--stage1", p(&stage1), "--index", p(&index), "--lambda1", "0.25"][..],
        &common,
    ]
    .concat());
    assert!(stdout.contains("MRR"), "{stdout}");
    let echo = fs::read_to_string(run.join("config.echo")).unwrap();
    assert!(echo.contains("lambda1 = 0.25"), "{echo}");
    let log = fs::read_to_string(run.join("logs/metrics.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 2);
    assert!(log.lines().all(|l| l.contains("\"valid_mrr\"")));

    let ckpt = run.join("checkpoints/stage2.json");
    ok(&[&["evaluate", "--checkpoint", p(&ckpt), "--data", p(&run)][..], &common].concat());
    let tsv = fs::read_to_string(run.join("reports/metrics.tsv")).unwrap();
    assert!(tsv.starts_with("model\t"), "{tsv}");

    ok(&[&["sweep-topk", "--checkpoint", p(&ckpt), "--data", p(&run), "--k", "1,5"][..], &common].concat());
    let sweep = fs::read_to_string(run.join("reports/sweep_topk.tsv")).unwrap();
    assert_eq!(sweep.lines().count(), 3, "{sweep}");

    ok(&[
        &["ablate", "--data", p(&run), "--stage1", p(&stage1), "--index", p(&index), "--modes", "no_qbs,baseline"][..],
        &common,
    ]
    .concat());
    let table = fs::read_to_string(run.join("reports/ablation.tsv")).unwrap();
    assert!(table.contains("no_qbs") && table.contains("baseline"), "{table}");
    assert!(run.join("checkpoints/stage2_baseline.json").exists());
}

#[test]
fn overrides_reach_the_config_echo() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o");
    ok(&[
        "gen-synthetic",
        "--out",
        p(&out),
        "--n-clusters",
        "10",
        "--paraphrases-per-cluster=4",
        "--seed",
        "21",
    ]);
    let echo = fs::read_to_string(out.join("config.echo")).unwrap();
    assert!(echo.contains("n_clusters = 10") && echo.contains("seed = 21"), "{echo}");
    let bags = fs::read_to_string(out.join("data/bags.jsonl")).unwrap();
    assert_eq!(bags.lines().count(), 10);
}

#[test]
fn user_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o");

    let r = qbprf(&["gen-synthetic", "--out", p(&out), "--lamda1", "0.5"]);
    assert_eq!(r.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&r.stderr).contains("--lamda1"));

    let r = qbprf(&["gen-synthetic", "--out", p(&out), "--n-clusters", "many"]);
    assert_eq!(r.status.code(), Some(1));

    let missing = dir.path().join("nope.json");
    let r = qbprf(&["evaluate", "--out", p(&out), "--checkpoint", p(&missing), "--data", p(dir.path())]);
    assert_eq!(r.status.code(), Some(1));
    let err = String::from_utf8_lossy(&r.stderr);
    assert!(err.contains("--data") || err.contains("--checkpoint"), "{err}");

    let r = qbprf(&["train-stage1", "--out", p(&out)]);
    assert_eq!(r.status.code(), Some(1));

    let r = qbprf(&["gen-synthetic", "--out", p(&out), "--preset", "huge"]);
    assert_eq!(r.status.code(), Some(1));
}

#[test]
fn corrupt_checkpoint_exits_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.toml");
    fs::write(&cfg, TINY).unwrap();
    let run = dir.path().join("run");
    ok(&["gen-synthetic", "--config", p(&cfg), "--out", p(&run)]);
    let bad = dir.path().join("bad.json");
    fs::write(&bad, "{\"format_version\": 1, \"kind\": \"stage1\"").unwrap();
    let r = qbprf(&["build-index", "--config", p(&cfg), "--out", p(&run), "--data", p(&run), "--stage1", p(&bad)]);
    assert_eq!(r.status.code(), Some(2), "{}", String::from_utf8_lossy(&r.stderr));
    assert!(String::from_utf8_lossy(&r.stderr).contains("--stage1"));
}

#[test]
fn help_lists_every_subcommand() {
    let out = ok(&["--help"]);
    for cmd in [
        "prepare-data",
        "gen-synthetic",
        "train-stage1",
        "build-index",
        "train-stage2",
        "evaluate",
        "ablate",
        "sweep-topk",
    ] {
        assert!(out.contains(cmd), "{cmd} missing from help");
    }
}
