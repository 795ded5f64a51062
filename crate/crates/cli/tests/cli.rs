use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn capit(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_capit"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn tiny_config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/tiny.toml")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn synth(out: &Path, extra: &[&str]) -> Output {
    let cfg = tiny_config();
    let mut args = vec!["synth", "--config", s(&cfg), "--out", s(out)];
    args.extend_from_slice(extra);
    capit(&args)
}

#[test]
fn help_and_version_succeed() {
    assert_eq!(code(&capit(&["--help"])), 0);
    assert_eq!(code(&capit(&["--version"])), 0);
    assert_eq!(code(&capit(&["train", "--help"])), 0);
}

#[test]
fn usage_errors_exit_with_one() {
    assert_eq!(code(&capit(&[])), 1);
    assert_eq!(code(&capit(&["synth", "--bogus"])), 1);
    assert_eq!(code(&capit(&["pair", "--source", "a.csv"])), 1);
    assert_eq!(code(&capit(&["frobnicate"])), 1);
}

#[test]
fn bad_configuration_exits_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "[train]\nlearning_rate = 0.1\n").unwrap();
    let o = capit(&[
        "synth",
        "--config",
        s(&cfg),
        "--out",
        s(&dir.path().join("d")),
    ]);
    assert_eq!(code(&o), 1, "{}", String::from_utf8_lossy(&o.stderr));

    std::fs::write(&cfg, "[train]\nlr = -1.0\n").unwrap();
    assert_eq!(
        code(&capit(&[
            "synth",
            "--config",
            s(&cfg),
            "--out",
            s(&dir.path().join("d"))
        ])),
        1
    );

    let o = capit(&[
        "ablate",
        "--preset",
        "row9",
        "--data",
        s(dir.path()),
        "--out",
        s(&dir.path().join("a")),
    ]);
    assert_eq!(code(&o), 1);
}

#[test]
fn missing_inputs_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope");
    let o = capit(&[
        "train",
        "--config",
        s(&tiny_config()),
        "--data",
        s(&missing),
        "--out",
        s(&dir.path().join("r")),
    ]);
    assert_eq!(code(&o), 2);
    let o = capit(&[
        "translate",
        "--checkpoint",
        s(&missing),
        "--in",
        s(dir.path()),
        "--out",
        s(&dir.path().join("t")),
    ]);
    assert_eq!(code(&o), 2);
}

#[test]
fn numeric_abort_exits_with_three() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    assert_eq!(code(&synth(&data, &[])), 0);
    let cfg = dir.path().join("explode.toml");
    let text = std::fs::read_to_string(tiny_config())
        .unwrap()
        .replace("[train]", "[train]\nlr = 1e300");
    std::fs::write(&cfg, text).unwrap();
    let run = dir.path().join("run");
    let o = capit(&[
        "train",
        "--config",
        s(&cfg),
        "--data",
        s(&data),
        "--out",
        s(&run),
    ]);
    assert_eq!(code(&o), 3, "{}", String::from_utf8_lossy(&o.stderr));
    let manifest = std::fs::read_to_string(run.join("manifest")).unwrap();
    assert!(
        manifest.contains("numeric abort at epoch 0, batch 0"),
        "{manifest}"
    );
}

#[test]
fn full_pipeline_runs_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let data = root.join("data");
    let o = synth(&data, &[]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stdout).contains("dataset_hash = "));

    let pairs = root.join("pairs.txt");
    let o = capit(&[
        "pair",
        "--source",
        s(&data.join("poses/adverse.csv")),
        "--target",
        s(&data.join("poses/benign.csv")),
        "--max-dist",
        "5",
        "--out",
        s(&pairs),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(pairs.is_file());

    let run = root.join("run");
    let o = capit(&[
        "train",
        "--config",
        s(&tiny_config()),
        "--data",
        s(&data),
        "--out",
        s(&run),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(
        stdout.contains("train.lr = "),
        "config echo missing: {stdout}"
    );
    assert!(run.join("manifest").is_file());
    assert!(run.join("config.resolved").is_file());

    let pred = root.join("pred");
    let o = capit(&[
        "translate",
        "--checkpoint",
        s(&run),
        "--in",
        s(&data),
        "--out",
        s(&pred),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let n_pred = std::fs::read_dir(&pred).unwrap().count();
    assert_eq!(n_pred, 12);

    let report = root.join("metrics.txt");
    let o = capit(&[
        "eval",
        "--pred",
        s(&pred),
        "--data",
        s(&data),
        "--report",
        s(&report),
        "--config",
        s(&tiny_config()),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let text = std::fs::read_to_string(&report).unwrap();
    for block in ["[fid]", "[masked_psnr]", "[loc_err]"] {
        assert!(text.contains(block), "{text}");
    }

    let ablate = root.join("ablate");
    let o = capit(&[
        "ablate",
        "--preset",
        "row1",
        "--data",
        s(&data),
        "--out",
        s(&ablate),
        "--config",
        s(&tiny_config()),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let table = std::fs::read_to_string(ablate.join("report.csv")).unwrap();
    assert!(table.lines().any(|l| l.starts_with("row1,")), "{table}");
}

fn tree(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((
                    p.strip_prefix(dir).unwrap().to_path_buf(),
                    std::fs::read(&p).unwrap(),
                ));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn synth_and_train_are_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert_eq!(code(&synth(&a, &["--seed", "9"])), 0);
    assert_eq!(code(&synth(&b, &["--seed", "9"])), 0);
    assert_eq!(tree(&a), tree(&b));
    let c = dir.path().join("c");
    assert_eq!(code(&synth(&c, &["--seed", "10"])), 0);
    assert_ne!(tree(&a), tree(&c));

    let runs: Vec<String> = ["r1", "r2"]
        .iter()
        .map(|r| {
            let out = dir.path().join(r);
            let o = capit(&[
                "train",
                "--config",
                s(&tiny_config()),
                "--data",
                s(&a),
                "--out",
                s(&out),
                "--seed",
                "9",
            ]);
            assert_eq!(code(&o), 0);
            std::fs::read_to_string(out.join("manifest")).unwrap()
        })
        .collect();
    assert_eq!(runs[0], runs[1]);
    assert!(runs[0].contains("seed = 9"));
}
