use std::path::Path;
use std::process::{Command, Output};

fn rand25d(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rand25d"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = rand25d(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const SMALL_SPEC: &str = "radius=1,1.5\ndistractor_radius=1,1.5\nforeground_budget=0.1\n";

/// Phantoms small enough to train on in a test.
fn small_dataset(dir: &Path, n: &str) -> std::path::PathBuf {
    let spec = dir.join("spec.txt");
    std::fs::write(&spec, SMALL_SPEC).unwrap();
    let data = dir.join("data");
    ok(&[
        "phantom",
        "--n",
        n,
        "--dims",
        "8x8x6",
        "--seed",
        "3",
        "--spec-file",
        s(&spec),
        "--out-dir",
        s(&data),
    ]);
    data.join("index.txt")
}

const TINY: [&str; 10] = [
    "--set",
    "p=2",
    "--set",
    "m=4",
    "--set",
    "unet_depth=2",
    "--set",
    "unet_base=2",
    "--set",
    "max_epochs=2",
];

#[test]
fn phantom_writes_pairs_and_index_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for d in [&a, &b] {
        let out = ok(&[
            "phantom",
            "--n",
            "4",
            "--dims",
            "16x24x20",
            "--seed",
            "7",
            "--out-dir",
            s(d),
        ]);
        assert!(out.starts_with("# command=phantom\n"));
        assert!(out.contains("# dims=16x24x20\n"));
    }
    let mut names: Vec<String> = std::fs::read_dir(&a)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    names.sort();
    assert_eq!(names.len(), 9);
    assert_eq!(names[0], "index.txt");
    assert_eq!(names[1], "phantom_000_mask.vol");
    assert_eq!(names[8], "phantom_003_scan.vol");
    for n in &names {
        assert_eq!(
            std::fs::read(a.join(n)).unwrap(),
            std::fs::read(b.join(n)).unwrap(),
            "{n}"
        );
    }
    let index = std::fs::read_to_string(a.join("index.txt")).unwrap();
    assert!(index.starts_with("version=1\npair=phantom_000_scan.vol phantom_000_mask.vol\n"));
}

#[test]
fn usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    let out = rand25d(&[
        "phantom",
        "--n",
        "1",
        "--dims",
        "0x4x4",
        "--out-dir",
        s(dir.path()),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("dims"));
    let out = rand25d(&[
        "project",
        "--in",
        "x.vol",
        "--angles",
        "181",
        "--out-dir",
        s(dir.path()),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("[0, 180)"));
    let out = rand25d(&[
        "project",
        "--in",
        "x.vol",
        "--angles",
        "1x",
        "--out-dir",
        s(dir.path()),
    ]);
    assert_eq!(out.status.code(), Some(2));
    let out = rand25d(&["eval", "--bogus"]);
    assert_eq!(out.status.code(), Some(2));
    let out = rand25d(&[
        "train",
        "--data",
        "none.txt",
        "--out",
        s(dir.path()),
        "--set",
        "nokey=1",
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn project_writes_one_image_per_angle() {
    let dir = tempfile::tempdir().unwrap();
    let index = small_dataset(dir.path(), "1");
    let scan = index.parent().unwrap().join("phantom_000_scan.vol");
    let out_dir = dir.path().join("fig");
    let out = ok(&[
        "project",
        "--in",
        s(&scan),
        "--angles",
        "0,36,72,108,144",
        "--mode",
        "mip",
        "--out-dir",
        s(&out_dir),
    ]);
    assert!(out.contains("# mode=mip\n"));
    for a in ["0", "36", "72", "108", "144"] {
        let bytes = std::fs::read(out_dir.join(format!("mip_{a}.pgm"))).unwrap();
        assert!(bytes.starts_with(b"P5\n6 8\n255\n"), "{a}");
    }
}

#[test]
fn sum_projection_of_constant_volume() {
    let dir = tempfile::tempdir().unwrap();
    let ones = rand25d_core::geometry::Volume::filled([4, 3, 2], 1.0f32);
    let path = dir.path().join("ones.vol");
    rand25d::volume_io::save_volume(&path, &ones, rand25d::volume_io::VolumeKind::Scan).unwrap();
    let img = rand25d_core::geometry::sum_project(&ones, 0.0);
    assert!(img.data().iter().all(|&v| v == 4.0));
    ok(&[
        "project",
        "--in",
        s(&path),
        "--angles",
        "0",
        "--mode",
        "sum",
        "--out-dir",
        s(dir.path()),
    ]);
    let bytes = std::fs::read(dir.path().join("sum_0.pgm")).unwrap();
    assert_eq!(bytes, b"P5\n2 3\n255\n\0\0\0\0\0\0");
}

#[test]
fn end_to_end_train_predict_eval() {
    let dir = tempfile::tempdir().unwrap();
    let index = small_dataset(dir.path(), "3");
    let run = dir.path().join("run");
    let mut args = vec![
        "train",
        "--data",
        s(&index),
        "--seed",
        "4",
        "--out",
        s(&run),
    ];
    args.extend(TINY);
    let out = ok(&args);
    assert!(out.contains("# seed=4\n# max_epochs=2\n"));
    let log = std::fs::read_to_string(run.join("train.log")).unwrap();
    let lines: Vec<&str> = log.lines().collect();
    assert_eq!(lines.len(), 2);
    assert!(
        lines[0].starts_with("epoch=1 c=0.99 lr=0.001 train_loss="),
        "{}",
        lines[0]
    );
    assert!(lines[1].starts_with("epoch=2 c=0.9801 lr="), "{}", lines[1]);
    assert!(run.join("best.ckpt").exists() && run.join("last.ckpt").exists());

    let data = index.parent().unwrap();
    let pred = dir.path().join("pred");
    ok(&[
        "predict",
        "--checkpoint",
        s(&run.join("best.ckpt")),
        "--in",
        s(&data.join("phantom_000_scan.vol")),
        "--out",
        s(&pred),
    ]);
    let (prob, kind) = rand25d::volume_io::load_volume(&pred.join("prob.vol")).unwrap();
    assert_eq!(kind, rand25d::volume_io::VolumeKind::Prob);
    assert_eq!(prob.dims(), [8, 8, 6]);
    let truth = data.join("phantom_000_mask.vol");
    let record = ok(&[
        "eval",
        "--pred",
        s(&pred.join("prob.vol")),
        "--truth",
        s(&truth),
    ]);
    assert!(record.contains("\ntp="), "{record}");
    let perfect = ok(&["eval", "--pred", s(&truth), "--truth", s(&truth)]);
    assert!(perfect.ends_with("dc=1.000000\n"), "{perfect}");
}

#[test]
fn resume_matches_uninterrupted_training() {
    let dir = tempfile::tempdir().unwrap();
    let index = small_dataset(dir.path(), "3");
    let (full, part) = (dir.path().join("full"), dir.path().join("part"));
    let mut args = vec!["train", "--data", s(&index), "--out", s(&full)];
    args.extend(TINY);
    ok(&args);

    let mut args = vec!["train", "--data", s(&index), "--out", s(&part)];
    args.extend(&TINY[..8]);
    args.extend(["--set", "max_epochs=1"]);
    ok(&args);
    let first = part.join("last.ckpt");
    let saved = dir.path().join("after1.ckpt");
    std::fs::copy(&first, &saved).unwrap();
    let mut args = vec![
        "train",
        "--data",
        s(&index),
        "--out",
        s(&part),
        "--resume",
        s(&saved),
    ];
    args.extend(TINY);
    ok(&args);
    for f in ["last.ckpt", "best.ckpt", "train.log"] {
        assert_eq!(
            std::fs::read(full.join(f)).unwrap(),
            std::fs::read(part.join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn compare_emits_table() {
    let dir = tempfile::tempdir().unwrap();
    let index = small_dataset(dir.path(), "4");
    let mut args = vec!["compare", "--data", s(&index), "--folds", "2"];
    args.extend(TINY);
    let out = ok(&args);
    let table: Vec<&str> = out
        .lines()
        .filter(|l| !l.starts_with('#') && !l.starts_with("fold="))
        .collect();
    assert_eq!(table.len(), 3, "{out}");
    let header: Vec<&str> = table[0].split_whitespace().collect();
    assert_eq!(
        header,
        ["model", "ma_mean", "ma_std", "iu_mean", "iu_std", "dc_mean", "dc_std"]
    );
    assert!(table[1].starts_with("random-2.5D"));
    assert!(table[2].starts_with("slice-by-slice"));
    for row in &table[1..] {
        let vals: Vec<f64> = row
            .split_whitespace()
            .skip(1)
            .map(|v| v.parse().unwrap())
            .collect();
        assert_eq!(vals.len(), 6);
        assert!(vals.iter().all(|v| (0.0..=1.0).contains(v)));
    }
    assert_eq!(out.lines().filter(|l| l.starts_with("fold=")).count(), 4);
}

#[test]
fn config_errors_name_the_line() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    std::fs::write(&cfg, "# run\np=4\nlr=fast\n").unwrap();
    let out = rand25d(&[
        "train",
        "--data",
        "none.txt",
        "--config",
        s(&cfg),
        "--out",
        s(dir.path()),
    ]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("run.cfg:3:"), "{err}");
}

#[test]
fn missing_files_fail_with_diagnostic() {
    let dir = tempfile::tempdir().unwrap();
    let out = rand25d(&["eval", "--pred", "missing.vol", "--truth", "missing.vol"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing.vol"));
    let out = rand25d(&[
        "train",
        "--data",
        s(&dir.path().join("none.txt")),
        "--out",
        s(dir.path()),
    ]);
    assert_eq!(out.status.code(), Some(1));
}
