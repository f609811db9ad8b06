//! The `thinsec` binary: output placement, the full workflow and exit codes.

use std::path::Path;
use std::process::{Command, Output};

fn thinsec(out_root: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_thinsec"))
        .args(args)
        .env("THINSEC_OUT", out_root)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn ok(o: Output) -> Output {
    assert_eq!(code(&o), 0, "stderr: {}", String::from_utf8_lossy(&o.stderr));
    o
}

#[test]
fn synth_writes_under_output_root() {
    let root = tempfile::tempdir().unwrap();
    ok(thinsec(root.path(), &["synth", "--out", "data", "--n-groups", "2", "--size", "16", "--n-grains", "4"]));
    let groups: Vec<_> = std::fs::read_dir(root.path().join("data")).unwrap().collect();
    assert_eq!(groups.len(), 2);
    let g = groups[0].as_ref().unwrap().path();
    for f in ["angle_0.png", "angle_6.png", "edge.png", "semantic.png"] {
        assert!(g.join(f).is_file(), "{f} missing");
    }
}

#[test]
fn edge_only_synth_has_no_semantic_masks() {
    let root = tempfile::tempdir().unwrap();
    ok(thinsec(root.path(), &["synth", "--out", "data", "--n-groups", "1", "--size", "16", "--edge-only"]));
    let g = std::fs::read_dir(root.path().join("data")).unwrap().next().unwrap().unwrap().path();
    assert!(g.join("edge.png").is_file());
    assert!(!g.join("semantic.png").exists());
    let data = root.path().join("data");
    let o = thinsec(root.path(), &["eval", "--oracle", "--data", data.to_str().unwrap()]);
    assert!(stdout(&ok(o)).contains("100.0"));
}

#[test]
fn entropy_grid_and_png() {
    let root = tempfile::tempdir().unwrap();
    ok(thinsec(root.path(), &["synth", "--out", "data", "--n-groups", "1", "--size", "16"]));
    let g = std::fs::read_dir(root.path().join("data")).unwrap().next().unwrap().unwrap().path();
    let img = g.join("angle_0.png");
    ok(thinsec(root.path(), &["entropy", "--in", img.to_str().unwrap(), "--out", "h.grid", "--png", "h.png"]));
    let grid = thinsec_core::grid::read_grid(&root.path().join("h.grid")).unwrap();
    assert_eq!(grid.dim(), (16, 16));
    assert!(grid.iter().all(|v| v.is_finite() && *v >= 0.0));
    assert!(root.path().join("h.png").is_file());

    let bad_tau = thinsec(root.path(), &["entropy", "--in", img.to_str().unwrap(), "--out", "x.grid", "--tau", "9"]);
    assert_eq!(code(&bad_tau), 1);
    let missing = thinsec(root.path(), &["entropy", "--in", "/nonexistent/a.png", "--out", "x.grid"]);
    assert_eq!(code(&missing), 2);
}

#[test]
fn validation_errors_exit_with_one() {
    let root = tempfile::tempdir().unwrap();
    let r = root.path();
    assert_eq!(code(&thinsec(r, &["synth", "--out", "d", "--size", "8"])), 1);
    assert_eq!(code(&thinsec(r, &["synth", "--out", "d", "--n-groups", "0"])), 1);
    assert_eq!(code(&thinsec(r, &["frobnicate"])), 1);
    assert_eq!(code(&thinsec(r, &["train", "--stage", "3"])), 1);

    ok(thinsec(r, &["synth", "--out", "d", "--n-groups", "1", "--size", "32", "--n-grains", "5"]));
    let data = r.join("d");
    let data = data.to_str().unwrap();
    assert_eq!(code(&thinsec(r, &["train", "--stage", "1", "--data", data, "--set", "no_such_key=1"])), 1);
    assert_eq!(code(&thinsec(r, &["train", "--stage", "1", "--data", data, "--set", "lr"])), 1);
    // Two ablations at once are not a known row.
    let combo = ["train", "--stage", "2", "--data", data, "--no-merge", "--no-refine", "--set", "image_size=32"];
    assert_eq!(code(&thinsec(r, &combo)), 1);
    assert_eq!(code(&thinsec(r, &["eval", "--data", data])), 1);
    assert_eq!(code(&thinsec(r, &["--help"])), 0);
}

#[test]
fn runtime_errors_exit_with_two() {
    let root = tempfile::tempdir().unwrap();
    let r = root.path();
    ok(thinsec(r, &["synth", "--out", "d", "--n-groups", "1", "--size", "16"]));
    let junk = r.join("junk.ckpt");
    std::fs::write(&junk, b"not a checkpoint").unwrap();
    let data = r.join("d");
    let o = thinsec(r, &["eval", "--checkpoint", junk.to_str().unwrap(), "--data", data.to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    let o = thinsec(r, &["prompts", "--checkpoint", "/nonexistent.ckpt", "--data", data.to_str().unwrap(), "--out", "p"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn two_stage_workflow() {
    let root = tempfile::tempdir().unwrap();
    let r = root.path();
    let p = |rel: &str| r.join(rel).to_str().unwrap().to_string();
    ok(thinsec(r, &["synth", "--out", "data", "--n-groups", "3", "--size", "32", "--n-grains", "6"]));
    let small = ["--set", "image_size=32", "--set", "epochs=1", "--set", "batch_size=2"];

    let mut args = vec!["train", "--stage", "1", "--split", "all"];
    let data = p("data");
    args.extend(["--data", &data, "--out", "teacher"]);
    args.extend(small);
    let o = ok(thinsec(r, &args));
    assert_eq!(stdout(&o).trim(), p("teacher/stage1.ckpt"));
    assert!(r.join("teacher/train.log").is_file());

    let teacher = p("teacher/stage1.ckpt");
    ok(thinsec(r, &["prompts", "--checkpoint", &teacher, "--data", &data, "--out", "prompts"]));
    let prompts = p("prompts");
    let mut args = vec!["train", "--stage", "2", "--split", "all", "--data", &data, "--out", "student"];
    args.extend(["--teacher", &teacher, "--prompts", &prompts]);
    args.extend(small);
    ok(thinsec(r, &args));

    let student = p("student/stage2.ckpt");
    let o = ok(thinsec(
        r,
        &["eval", "--checkpoint", &student, "--data", &data, "--prompts", &prompts, "--metrics", "both", "--report", "report.kv"],
    ));
    assert!(stdout(&o).contains("Semantic"));
    let kv = std::fs::read_to_string(r.join("report.kv")).unwrap();
    assert!(kv.contains("edge.F1 = ") && kv.contains("semantic.mIoU = "), "{kv}");

    // A stage-1 checkpoint cannot produce semantic metrics.
    let o = thinsec(r, &["eval", "--checkpoint", &teacher, "--data", &data, "--metrics", "semantic"]);
    assert_ne!(code(&o), 0);

    let group = std::fs::read_dir(r.join("data")).unwrap().next().unwrap().unwrap().path();
    let o = ok(thinsec(r, &["predict", "--checkpoint", &student, "--group", group.to_str().unwrap(), "--teacher", &teacher, "--out", "pred"]));
    let text = stdout(&o);
    let written: Vec<&str> = text.lines().collect();
    assert_eq!(written.len(), 4);
    assert!(written.iter().all(|f| Path::new(f).starts_with(r.join("pred")) && Path::new(f).is_file()));
}
