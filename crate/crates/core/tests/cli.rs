use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn mitr(args: &[&str]) -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_mitr"));
    c.args(args).env_remove("MITR_SEED");
    c
}

fn run(args: &[&str]) -> Output {
    mitr(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Small synthetic corpus plus a short training config.
fn fixture() -> (TempDir, PathBuf, PathBuf, PathBuf) {
    let dir = TempDir::new().unwrap();
    let o = run(&[
        "synth",
        "--out-dir",
        p(dir.path()),
        "--images",
        "6",
        "--seed",
        "3",
    ]);
    assert_eq!(
        o.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
    let cfg = dir.path().join("tiny.cfg");
    fs::write(
        &cfg,
        "# tiny\nd_model = 8\nn_heads = 2\nn_layers = 1\nd_ffn = 16\nbatch_size = 3\nmax_steps = 4\nseed = 11\n",
    )
    .unwrap();
    let data = dir.path().join("narratives.jsonl");
    let feats = dir.path().join("features.bin");
    (dir, data, feats, cfg)
}

fn checksum(o: &Output) -> String {
    assert_eq!(
        o.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
    stdout(o)
        .lines()
        .find_map(|l| l.strip_prefix("checksum ").map(str::to_owned))
        .expect("checksum line")
}

fn train(
    dir: &TempDir,
    data: &Path,
    feats: &Path,
    cfg: &Path,
    extra: &[&str],
    env_seed: Option<&str>,
) -> Output {
    let out = dir.path().join("model.ckpt");
    let mut args = vec![
        "train",
        "--data",
        p(data),
        "--features",
        p(feats),
        "--config",
        p(cfg),
        "--out",
        p(&out),
    ];
    args.extend_from_slice(extra);
    let mut c = mitr(&args);
    if let Some(s) = env_seed {
        c.env("MITR_SEED", s);
    }
    c.output().unwrap()
}

#[test]
fn lbm_of_identical_files_is_zero() {
    let dir = TempDir::new().unwrap();
    let f = dir.path().join("t.jsonl");
    fs::write(
        &f,
        "{\"image_id\":\"a\",\"boxes\":[[0.1,0.1,0.5,0.5,0.16],[0.0,0.0,1.0,1.0,1.0]]}\n\
         {\"image_id\":\"b\",\"boxes\":[[0.2,0.3,0.4,0.9,0.12]]}\n",
    )
    .unwrap();
    let o = run(&["lbm", "--gt", p(&f), "--pred", p(&f)]);
    assert_eq!(o.status.code(), Some(0));
    let out = stdout(&o);
    assert!(
        out.lines()
            .last()
            .unwrap()
            .starts_with("mean\t0.0000\t0.0000"),
        "{out}"
    );

    let o = run(&["lbm", "--gt", p(&f), "--pred", p(&f), "--k", "2", "--json"]);
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["mean"]["k2"], 0.0);
    assert_eq!(v["pairs"].as_array().unwrap().len(), 2);
}

#[test]
fn exit_codes() {
    assert_eq!(run(&["lbm", "--bogus"]).status.code(), Some(1));
    assert_eq!(run(&[]).status.code(), Some(1));
    assert_eq!(run(&["--help"]).status.code(), Some(0));
    let o = run(&["lbm", "--gt", "/nonexistent/a", "--pred", "/nonexistent/b"]);
    assert_eq!(o.status.code(), Some(2));

    let dir = TempDir::new().unwrap();
    let f = dir.path().join("bad.jsonl");
    fs::write(
        &f,
        "{\"image_id\":\"a\",\"boxes\":[[0.5,0.5,0.1,0.1,0.16]]}\n",
    )
    .unwrap();
    assert_eq!(
        run(&["lbm", "--gt", p(&f), "--pred", p(&f)]).status.code(),
        Some(2)
    );
}

#[test]
fn selftest_passes() {
    let o = run(&["selftest"]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    assert!(stdout(&o).contains("4/4 checks passed"));
}

#[test]
fn eval_captions_of_identical_text() {
    let dir = TempDir::new().unwrap();
    let cand = dir.path().join("c.jsonl");
    let refs = dir.path().join("r.jsonl");
    fs::write(
        &cand,
        "{\"image_id\":\"a\",\"caption\":\"a red ball on the grass\"}\n\
         {\"image_id\":\"b\",\"caption\":\"two dogs run in the park\"}\n",
    )
    .unwrap();
    fs::write(
        &refs,
        "{\"image_id\":\"a\",\"captions\":[\"a red ball on the grass\"]}\n\
         {\"image_id\":\"b\",\"captions\":[\"two dogs run in the park\"]}\n",
    )
    .unwrap();
    let o = run(&["eval-captions", "--cand", p(&cand), "--ref", p(&refs)]);
    assert_eq!(o.status.code(), Some(0));
    let out = stdout(&o);
    assert!(out.contains("BLEU-1  1.0000"), "{out}");
    assert!(out.contains("BLEU-4  1.0000"), "{out}");
    assert!(out.contains("ROUGE-L 1.0000"), "{out}");
}

#[test]
fn training_is_seeded() {
    let (dir, data, feats, cfg) = fixture();
    let a = checksum(&train(&dir, &data, &feats, &cfg, &[], None));
    let b = checksum(&train(&dir, &data, &feats, &cfg, &[], None));
    assert_eq!(a, b);

    let env = checksum(&train(&dir, &data, &feats, &cfg, &[], Some("5")));
    assert_ne!(env, a);
    let flag = checksum(&train(&dir, &data, &feats, &cfg, &["--seed", "5"], None));
    assert_eq!(flag, env);
    let both = checksum(&train(
        &dir,
        &data,
        &feats,
        &cfg,
        &["--seed", "11"],
        Some("5"),
    ));
    assert_eq!(both, a);
}

#[test]
fn bad_configs() {
    let (dir, data, feats, cfg) = fixture();
    let unknown = dir.path().join("unknown.cfg");
    fs::write(&unknown, "warp_factor = 9\n").unwrap();
    assert_eq!(
        train(&dir, &data, &feats, &unknown, &[], None)
            .status
            .code(),
        Some(1)
    );

    let o = train(&dir, &data, &feats, &cfg, &["--lr", "1e300"], None);
    assert_eq!(
        o.status.code(),
        Some(3),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
}

#[test]
fn generate_writes_one_line_per_record() {
    let (dir, data, feats, cfg) = fixture();
    assert_eq!(
        train(&dir, &data, &feats, &cfg, &[], None).status.code(),
        Some(0)
    );
    let ckpt = dir.path().join("model.ckpt");
    for task in ["caption", "trace", "joint"] {
        let out = dir.path().join(format!("{task}.jsonl"));
        let o = run(&[
            "generate",
            "--task",
            task,
            "--ckpt",
            p(&ckpt),
            "--data",
            p(&data),
            "--features",
            p(&feats),
            "--beam",
            "2",
            "--out",
            p(&out),
        ]);
        assert_eq!(
            o.status.code(),
            Some(0),
            "{}",
            String::from_utf8_lossy(&o.stderr)
        );
        let text = fs::read_to_string(&out).unwrap();
        assert_eq!(text.lines().count(), 6, "{task}");
        for line in text.lines() {
            let v: serde_json::Value = serde_json::from_str(line).unwrap();
            assert!(v["image_id"].is_string());
        }
    }
}

#[test]
fn encode_trace_output_scores_zero_against_itself() {
    let (dir, data, _, _) = fixture();
    let out = dir.path().join("traces.jsonl");
    let o = run(&["encode-trace", "--in", p(&data), "--out", p(&out)]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(fs::read_to_string(&out).unwrap().lines().count(), 6);
    let o = run(&["lbm", "--gt", p(&out), "--pred", p(&out)]);
    assert!(stdout(&o).contains("mean\t0.0000\t0.0000"));
}
