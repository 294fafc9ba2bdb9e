use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn dpformer(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dpformer"))
        .current_dir(dir)
        .env_remove("DPFORMER_OUTPUT_DIR")
        .args(args)
        .output()
        .unwrap()
}

fn ok(o: &Output) {
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
}

const TINY: [&str; 10] = [
    "--set",
    "epochs=2",
    "--set",
    "data.users=60",
    "--set",
    "data.items=30",
    "--set",
    "model.model_dim=8",
    "--set",
    "batch_size=16",
];

#[test]
fn train_eval_and_dump_attention() {
    let tmp = tempfile::tempdir().unwrap();
    let run = tmp.path().join("run");
    let mut args = vec![
        "train",
        "--output-dir",
        run.to_str().unwrap(),
        "--set",
        "re_attention=true",
    ];
    args.extend(TINY);
    ok(&dpformer(tmp.path(), &args));
    for f in [
        "config.txt",
        "train_log.csv",
        "metrics.csv",
        "privacy.txt",
        "checkpoint/params.bin",
    ] {
        assert!(run.join(f).exists(), "{f}");
    }
    let metrics = fs::read_to_string(run.join("metrics.csv")).unwrap();
    assert_eq!(
        metrics.lines().next().unwrap(),
        "epoch,ndcg_at_10,hit_at_10,loss,epsilon_spent"
    );
    // default delta = 1/N sits on the warning threshold
    assert!(fs::read_to_string(run.join("privacy.txt")).unwrap().contains("warning"));

    ok(&dpformer(tmp.path(), &["eval", "--run", run.to_str().unwrap()]));
    let eval = fs::read_to_string(run.join("eval.csv")).unwrap();
    let last_metrics = metrics.lines().last().unwrap().split(',').nth(1).unwrap().to_string();
    let eval_ndcg = eval.lines().nth(1).unwrap().split(',').next().unwrap().to_string();
    assert_eq!(eval_ndcg, last_metrics);

    ok(&dpformer(
        tmp.path(),
        &["dump-attention", "--run", run.to_str().unwrap(), "--samples", "2"],
    ));
    let raw = fs::read_to_string(run.join("attention_raw.csv")).unwrap();
    let corrected = fs::read_to_string(run.join("attention_corrected.csv")).unwrap();
    assert!(raw.starts_with("sample,layer,head,row,col0"));
    assert_eq!(raw.lines().count(), corrected.lines().count());
}

#[test]
fn output_dir_comes_from_the_environment() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("env-out");
    let o = Command::new(env!("CARGO_BIN_EXE_dpformer"))
        .current_dir(tmp.path())
        .env("DPFORMER_OUTPUT_DIR", &out)
        .args(["analyze-gumbel", "--vectors", "2", "--draws", "2000"])
        .output()
        .unwrap();
    ok(&o);
    assert!(out.join("gumbel.csv").exists());
}

#[test]
fn analysis_commands_write_reports() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path().to_str().unwrap();
    ok(&dpformer(
        tmp.path(),
        &["--output-dir", d, "analyze-moments", "--draws", "20000"],
    ));
    let m = fs::read_to_string(tmp.path().join("moments.csv")).unwrap();
    assert_eq!(
        m.lines().next().unwrap(),
        "input_variance,activation,analytic,sampled_1e6"
    );
    assert!(m.lines().count() > 3);
    ok(&dpformer(
        tmp.path(),
        &["--output-dir", d, "analyze-distraction", "--draws", "2000"],
    ));
    assert!(tmp.path().join("distraction.csv").exists());
    ok(&dpformer(
        tmp.path(),
        &[
            "--output-dir",
            d,
            "bench-clip",
            "--batch",
            "1,4",
            "--vocab",
            "300",
            "--dim",
            "16",
        ],
    ));
    let b = fs::read_to_string(tmp.path().join("bench_clip.csv")).unwrap();
    assert_eq!(b.lines().next().unwrap(), "method,B,L,M,d,peak_bytes,wall_ms");
    assert_eq!(b.lines().count(), 1 + 6);
}

#[test]
fn generated_data_trains_from_both_formats() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path().to_str().unwrap();
    ok(&dpformer(
        tmp.path(),
        &["--output-dir", d, "gen-data", "--users", "60", "--items", "20"],
    ));
    ok(&dpformer(
        tmp.path(),
        &[
            "--output-dir",
            d,
            "gen-data",
            "--users",
            "60",
            "--items",
            "20",
            "--format",
            "cache",
        ],
    ));
    for (src, name) in [
        ("data=log:interactions.tsv", "from-log"),
        ("data=cache:dataset", "from-cache"),
    ] {
        let out = tmp.path().join(name);
        let o = dpformer(
            tmp.path(),
            &[
                "train",
                "--output-dir",
                out.to_str().unwrap(),
                "--set",
                src,
                "--set",
                "min_count=1",
                "--set",
                "epochs=1",
            ],
        );
        ok(&o);
    }
}

#[test]
fn bad_configuration_fails() {
    let tmp = tempfile::tempdir().unwrap();
    let o = dpformer(tmp.path(), &["train", "--set", "no_such_key=1"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("no_such_key"));
    fs::write(tmp.path().join("bad.cfg"), "epochs = many\n").unwrap();
    assert!(!dpformer(tmp.path(), &["train", "--config", "bad.cfg"]).status.success());
    assert!(!dpformer(tmp.path(), &["train", "--set", "clip_norm=inf"])
        .status
        .success());
}
