use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY_SCENE: &str = r#"
background = [0.0, 0.0, 0.0]

[[primitive]]
shape = "sphere"
center = [0.0, 0.0, 0.0]
radius = 0.5
albedo = [0.5, 0.4, 0.3]
r0 = 0.04
exponent = 8.0

[[light]]
kind = "point"
position = [2.0, 2.0, 2.0]
intensity = [12.0, 12.0, 12.0]

[cameras]
count = 3
resolution = 16
placement = "ring"
radius = 3.0
fov_degrees = 30.0
height = 0.5
"#;

fn probegrid(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_probegrid"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn synth_tiny(dir: &Path) -> String {
    let scene = dir.join("scene.toml");
    fs::write(&scene, TINY_SCENE).unwrap();
    let data = dir.join("data");
    let o = probegrid(&[
        "synth",
        "--scene",
        scene.to_str().unwrap(),
        "--out",
        data.to_str().unwrap(),
        "--gt-points",
        "200",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    data.to_str().unwrap().to_owned()
}

#[test]
fn help_and_version_exit_zero() {
    assert!(probegrid(&["--help"]).status.success());
    assert!(probegrid(&["--version"]).status.success());
    assert!(probegrid(&["train", "--help"]).status.success());
}

#[test]
fn usage_errors_exit_two() {
    let o = probegrid(&["render", "--checkpoint", "x.ckpt"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).starts_with("error[usage]:"), "{}", stderr(&o));
    let o = probegrid(&["nonsense"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn missing_checkpoint_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("m.ply");
    let o = probegrid(&["mesh", "--checkpoint", "/nonexistent/a.ckpt", "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).starts_with("error[io]:"), "{}", stderr(&o));
}

#[test]
fn corrupted_checkpoint_is_a_framing_error() {
    let dir = tempfile::tempdir().unwrap();
    let ck = dir.path().join("bad.ckpt");
    fs::write(&ck, b"PGCKPT\0\0garbage").unwrap();
    let out = dir.path().join("m.ply");
    let o = probegrid(&["mesh", "--checkpoint", ck.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).starts_with("error[framing]:"), "{}", stderr(&o));
}

#[test]
fn synth_writes_dataset_layout() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth_tiny(dir.path());
    let data = Path::new(&data);
    let cams = fs::read_to_string(data.join("cameras.txt")).unwrap();
    assert_eq!(cams.lines().filter(|l| !l.trim().is_empty()).count(), 3);
    for id in 0..3 {
        assert!(data.join(format!("images/{id}.png")).is_file());
        assert!(data.join(format!("masks/{id}.png")).is_file());
    }
    assert!(data.join("points_gt.ply").is_file());
}

#[test]
fn eval_of_ground_truth_images_is_saturated() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth_tiny(dir.path());
    let preds = Path::new(&data).join("images");
    let o = probegrid(&["eval", "--data", &data, "--predictions", preds.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = String::from_utf8(o.stdout).unwrap();
    let psnr: f64 = text
        .lines()
        .find_map(|l| l.strip_prefix("psnr "))
        .expect("psnr line")
        .trim()
        .parse()
        .unwrap();
    assert!(psnr > 60.0, "identical images gave psnr {psnr}");
    assert_eq!(text.lines().filter(|l| l.starts_with("psnr_view ")).count(), 3);
}

#[test]
fn eval_with_missing_prediction_fails() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth_tiny(dir.path());
    let empty = dir.path().join("empty");
    fs::create_dir(&empty).unwrap();
    let o = probegrid(&["eval", "--data", &data, "--predictions", empty.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).starts_with("error["), "{}", stderr(&o));
}
