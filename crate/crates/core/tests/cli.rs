use std::path::Path;
use std::process::{Command, Output};

fn gsedit(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gsedit"))
        .args(args)
        .env_remove("GSEDIT_THREADS")
        .output()
        .unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = gsedit(args);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn small_dataset(dir: &Path) {
    ok(&[
        "gen-data",
        "--scenes",
        "3",
        "--views",
        "4",
        "--size",
        "32",
        "--seed",
        "5",
        "--out",
        dir.to_str().unwrap(),
    ]);
}

fn write_job(dir: &Path, extra: &str) -> String {
    let text = format!(
        "scene = \"scene_000/scene.json\"\ncameras = [\"scene_000/camera_00.json\", \"scene_000/camera_01.json\", \"scene_000/camera_02.json\"]\n\
         codec = \"codec.toml\"\nclassifier = \"classifier.toml\"\nsource_condition = 1\ntarget_condition = 2\n\
         ddim_steps = 8\noptimize_steps = 5\nnum_references = 2\n{extra}"
    );
    let p = dir.join("job.toml");
    std::fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

#[test]
fn gen_data_writes_manifest_and_readable_views() {
    let d = tempfile::tempdir().unwrap();
    small_dataset(d.path());
    let manifest = std::fs::read_to_string(d.path().join("manifest.toml")).unwrap();
    assert!(manifest.contains("scene_002/image_03.gten"));
    let img = gsedit::Tensor::read_gten(d.path().join("scene_001/image_00.gten")).unwrap();
    assert_eq!(img.shape(), &[32, 32, 3]);
}

#[test]
fn edit_eval_and_render_outputs() {
    let d = tempfile::tempdir().unwrap();
    small_dataset(d.path());
    let job = write_job(d.path(), "");
    let out = d.path().join("edit");
    let report = ok(&["--threads", "1", "edit", "--job", &job, "--out", out.to_str().unwrap()]);
    assert!(report.contains("target_class_rate = "), "{report}");
    assert!(report.contains("rerender_reprojection_error = "));
    for f in [
        "original_02.png",
        "depth_00.png",
        "edited_01.png",
        "edited_01.gten",
        "rerender_02.png",
        "scene.json",
        "report.txt",
    ] {
        assert!(out.join(f).exists(), "missing {f}");
    }
    let eval = ok(&["eval", "--job", &job, "--edited", out.to_str().unwrap()]);
    for line in eval.lines() {
        assert!(report.contains(line), "eval line {line} not in edit report");
    }
    let r = d.path().join("render");
    let cam = d.path().join("scene_000/camera_00.json");
    ok(&[
        "render",
        "--scene",
        out.join("scene.json").to_str().unwrap(),
        "--cameras",
        cam.to_str().unwrap(),
        "--out",
        r.to_str().unwrap(),
    ]);
    let a = gsedit::Tensor::read_gten(r.join("image_00.gten")).unwrap();
    let b = gsedit::image::read_png(out.join("rerender_00.png")).unwrap();
    assert!(a.max_abs_diff(&b).unwrap() <= 0.5 / 255.0 + 1e-6);
}

#[test]
fn ablation_reports_every_arm_with_shared_inputs() {
    let d = tempfile::tempdir().unwrap();
    small_dataset(d.path());
    let job = write_job(d.path(), "");
    let out = d.path().join("ablate");
    let text = ok(&["ablate", "--job", &job, "--out", out.to_str().unwrap()]);
    let hashes: Vec<&str> = text
        .lines()
        .filter(|l| l.contains(".input_hash = "))
        .map(|l| l.split(" = ").nth(1).unwrap())
        .collect();
    assert_eq!(hashes.len(), 4);
    assert!(hashes.iter().all(|h| *h == hashes[0]));
    for arm in ["identity", "random_noise", "inverted", "inverted_align"] {
        assert!(text.contains(&format!("{arm}.dispersion = ")), "{arm}");
    }
    assert!(text.contains("verdict_alignment = ") && text.contains("verdict_inversion = "));
    assert!(out.join("grid.png").exists());
}

#[test]
fn reconstruct_reports_psnr() {
    let d = tempfile::tempdir().unwrap();
    small_dataset(d.path());
    let out = d.path().join("rec");
    let text = ok(&[
        "reconstruct",
        "--scene",
        d.path().join("scene_000/scene.json").to_str().unwrap(),
        "--views",
        "6",
        "--steps",
        "10",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(
        text.contains("train_views = 4") && text.contains("heldout_views = 2"),
        "{text}"
    );
    assert!(out.join("initial.json").exists() && out.join("scene.json").exists());
}

#[test]
fn missing_input_is_io_error_without_partial_output() {
    let d = tempfile::tempdir().unwrap();
    small_dataset(d.path());
    let job = write_job(d.path(), "");
    std::fs::remove_file(d.path().join("scene_000/scene.json")).unwrap();
    for cmd in ["edit", "ablate"] {
        let out = d.path().join(cmd);
        let r = gsedit(&[cmd, "--job", &job, "--out", out.to_str().unwrap()]);
        assert_eq!(r.status.code(), Some(3), "{cmd}");
        assert!(String::from_utf8_lossy(&r.stderr).starts_with("error: "));
        assert!(!out.exists(), "{cmd} left output behind");
    }
    let out = d.path().join("rendered");
    let r = gsedit(&[
        "render",
        "--scene",
        "nope.json",
        "--cameras",
        "nope.json",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(r.status.code(), Some(3));
    assert!(!out.exists());
}

#[test]
fn invalid_arguments_exit_with_two() {
    let d = tempfile::tempdir().unwrap();
    small_dataset(d.path());
    let bad_lambda = write_job(d.path(), "lambda = 1.5\n");
    assert_eq!(
        gsedit(&["edit", "--job", &bad_lambda, "--out", "x"]).status.code(),
        Some(2)
    );
    let unknown = write_job(d.path(), "target_condition_typo = 1\n");
    assert_eq!(
        gsedit(&["edit", "--job", &unknown, "--out", "x"]).status.code(),
        Some(2)
    );
    assert_eq!(gsedit(&["edit", "--out", "x"]).status.code(), Some(2));
    assert_eq!(
        gsedit(&["--threads", "0", "gen-data", "--out", "x"]).status.code(),
        Some(2)
    );
    assert_eq!(
        gsedit(&[
            "gen-data",
            "--scenes",
            "0",
            "--out",
            d.path().join("empty").to_str().unwrap()
        ])
        .status
        .code(),
        Some(2)
    );
    assert!(!d.path().join("empty").exists());
}
