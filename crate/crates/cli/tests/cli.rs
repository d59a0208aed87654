use std::path::Path;
use std::process::{Command, Output};

fn fewview(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fewview"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let o = fewview(args);
    assert!(
        o.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&o.stderr)
    );
    o
}

fn p(x: &Path) -> &str {
    x.to_str().unwrap()
}

fn make_scene(dir: &Path) {
    ok(&[
        "make-scene",
        "--out-dir",
        p(dir),
        "--resolution",
        "16",
        "--n-test",
        "2",
        "--seed",
        "3",
    ]);
}

fn error_line(o: &Output) -> String {
    let err = String::from_utf8_lossy(&o.stderr).to_string();
    assert_eq!(err.lines().count(), 1, "stderr: {err}");
    err
}

#[test]
fn usage_errors_exit_2_with_one_line() {
    let o = fewview(&["train", "--no-such-flag"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(error_line(&o).starts_with("error kind=usage msg="));

    let o = fewview(&["frobnicate"]);
    assert_eq!(o.status.code(), Some(2));

    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("o");
    let o = fewview(&["train", "--data", "/definitely/missing", "--out-dir", p(&out)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(error_line(&o).contains("/definitely/missing"));

    let o = fewview(&["make-scene", "--config", "/missing.toml", "--out-dir", p(&out)]);
    assert_eq!(o.status.code(), Some(2));

    assert_eq!(fewview(&["--help"]).status.code(), Some(0));
}

#[test]
fn make_scene_writes_a_hashed_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    make_scene(&data);
    let m: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(data.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(m["seed"], 3);
    assert_eq!(m["config"]["dataset"]["resolution"], 16);
    let arts = m["artifacts"].as_object().unwrap();
    assert_eq!(arts.len(), 1 + 2 + 3 + 2);
    assert_eq!(arts["train/r_0.png"].as_str().unwrap().len(), 64);
    assert!(data.join("transforms_test.json").exists());
}

#[test]
fn eval_of_the_truth_against_itself_is_perfect() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    make_scene(&data);
    let ev = tmp.path().join("ev");
    ok(&["eval", "--data", p(&data), "--renders", p(&data), "--out-dir", p(&ev)]);
    let text = std::fs::read_to_string(ev.join("metrics.txt")).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 3);
    assert_eq!(lines[0], "0 99.0000 1.000000");
    assert!(lines[2].starts_with("mean 99.0000±0.0000 1.000000±"));
}

#[test]
fn training_is_reproducible_and_resumable() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    make_scene(&data);
    let run = |name: &str, extra: &[&str]| {
        let out = tmp.path().join(name);
        let mut args = vec![
            "train", "--data", p(&data), "--preset", "quick", "--variant", "full", "--iterations", "12", "--seed",
            "5", "--out-dir", p(&out),
        ];
        args.extend_from_slice(extra);
        ok(&args);
        out
    };
    let a = run("a", &[]);
    let b = run("b", &[]);
    let log_a = std::fs::read_to_string(a.join("loss.csv")).unwrap();
    assert_eq!(log_a, std::fs::read_to_string(b.join("loss.csv")).unwrap());
    assert_eq!(log_a.lines().count(), 13);
    assert!(log_a.starts_with("step,lr,mse_c,mse_f,mi_f,dist_f,offset_f,ppc_rgb_f,ppc_d_f,smooth_f,total\n"));

    let ckpt = a.join("ckpt_000006.bin");
    let r = run("r", &["--resume", p(&ckpt)]);
    let tail: Vec<&str> = log_a.lines().skip(7).collect();
    let log_r = std::fs::read_to_string(r.join("loss.csv")).unwrap();
    let resumed: Vec<&str> = log_r.lines().skip(1).collect();
    assert_eq!(resumed, tail);
    assert_eq!(
        std::fs::read(a.join("final.bin")).unwrap(),
        std::fs::read(r.join("final.bin")).unwrap()
    );

    let ev = tmp.path().join("ev");
    ok(&["eval", "--data", p(&data), "--checkpoint", p(&a.join("final.bin")), "--out-dir", p(&ev)]);
    assert_eq!(std::fs::read_to_string(ev.join("metrics.txt")).unwrap().lines().count(), 3);

    let dg = tmp.path().join("dg");
    ok(&["diagnose", "--data", p(&data), "--checkpoint", p(&a.join("final.bin")), "--rays", "3", "--out-dir", p(&dg)]);
    assert_eq!(std::fs::read_to_string(dg.join("spread.csv")).unwrap().lines().count(), 7);

    let ren = tmp.path().join("ren");
    ok(&[
        "render", "--data", p(&data), "--checkpoint", p(&a.join("final.bin")), "--pose", "4,0.5,0.9", "--out-dir",
        p(&ren),
    ]);
    assert!(ren.join("test/r_1.png").exists() && ren.join("poses/r_0.png").exists());
}

#[test]
fn bad_pose_is_a_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    make_scene(&data);
    let o = fewview(&[
        "render", "--data", p(&data), "--checkpoint", p(&data.join("scene.toml")), "--pose", "4,0.5", "--out-dir",
        p(&tmp.path().join("r")),
    ]);
    assert_eq!(o.status.code(), Some(2));
    error_line(&o);
}
