//! Drives the installed binary end to end on a micro dataset: generation,
//! training, resuming, rendering, evaluation, and the mode comparison.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use mirrorfield::img::Image;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_mirrorfield"))
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "command failed\nstdout:\n{}\nstderr:\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

/// Config small enough that a train step takes milliseconds.
fn micro_config(dir: &Path) -> PathBuf {
    let path = dir.join("micro.toml");
    fs::write(
        &path,
        r#"
[data]
scenes = 1
views_per_scene = 4
image_size = 16
num_primitives = 1
focal = 15.0
test_min_delta_deg = 60.0
max_test_views = 2

[model]
image_size = 16
encoder_channels = [2, 2, 2, 2]
latent_dim = 8
hypernet_width = 8
field_width = 8
field_depth = 2
position_frequencies = 2
direction_frequencies = 1

[train]
objects_per_batch = 1
rays_per_object = 16
samples_per_ray = 4
total_steps = 4
warmup_steps = 2
peak_lr = 1e-3
checkpoint_interval = 2
log_interval = 1
seed = 9

[render]
samples_per_ray = 4
"#,
    )
    .unwrap();
    path
}

fn make_data(config: &Path, out: &Path) {
    let output = bin()
        .args(["make-data", "--out-dir"])
        .arg(out)
        .arg("--config")
        .arg(config)
        .output()
        .unwrap();
    ok(&output);
}

#[test]
fn make_data_is_deterministic_and_counts_match() {
    let dir = tempfile::tempdir().unwrap();
    let config = micro_config(dir.path());
    let out = dir.path().join("data");
    let output = bin()
        .args(["make-data", "--scenes", "2", "--views", "3", "--out-dir"])
        .arg(&out)
        .arg("--config")
        .arg(&config)
        .output()
        .unwrap();
    let stdout = ok(&output);
    assert!(stdout.contains("2 scenes x 3 views"), "{stdout}");
    assert!(stdout.contains("effective config:"), "{stdout}");

    let mut pngs = Vec::new();
    for scene in 0..2 {
        for view in 0..3 {
            let p = out.join(format!("scenes/scene_{scene:03}/views/{view}.png"));
            assert!(p.exists(), "missing {}", p.display());
            pngs.push(fs::read(&p).unwrap());
        }
    }

    let again = dir.path().join("data2");
    let output = bin()
        .args(["make-data", "--scenes", "2", "--views", "3", "--out-dir"])
        .arg(&again)
        .arg("--config")
        .arg(&config)
        .output()
        .unwrap();
    ok(&output);
    assert_eq!(
        fs::read(out.join("manifest.json")).unwrap(),
        fs::read(again.join("manifest.json")).unwrap()
    );
    for (scene, view, old) in
        (0..2).flat_map(|s| (0..3).map(move |v| (s, v))).zip(pngs).map(|((s, v), p)| (s, v, p))
    {
        let p = again.join(format!("scenes/scene_{scene:03}/views/{view}.png"));
        assert_eq!(fs::read(&p).unwrap(), old, "view {view} of scene {scene} changed");
    }
}

#[test]
fn unwritable_output_fails_with_a_message() {
    let dir = tempfile::tempdir().unwrap();
    let blocker = dir.path().join("file.txt");
    fs::write(&blocker, "x").unwrap();
    let out = bin()
        .args(["make-data", "--out-dir"])
        .arg(blocker.join("nested"))
        .output()
        .unwrap();
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("error"), "{stderr}");
}

#[test]
fn train_render_eval_and_resume_work_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let config = micro_config(dir.path());
    let data = dir.path().join("data");
    make_data(&config, &data);

    // Train 4 steps in one go.
    let run_a = dir.path().join("run_a");
    let output = bin()
        .args(["train", "--data-dir"])
        .arg(&data)
        .arg("--out-dir")
        .arg(&run_a)
        .arg("--config")
        .arg(&config)
        .output()
        .unwrap();
    let stdout = ok(&output);
    assert!(stdout.contains("trained 4 steps"), "{stdout}");
    let ckpt_a = run_a.join("checkpoint.bin");
    assert!(ckpt_a.exists());
    let log = fs::read_to_string(run_a.join("train_log.csv")).unwrap();
    assert!(log.starts_with("step,lr,loss\n"), "{log}");
    assert_eq!(log.lines().count(), 5, "header plus four rows: {log}");

    // Train 2 steps, then resume to 4; the checkpoint must match run A.
    let run_b = dir.path().join("run_b");
    let output = bin()
        .args(["train", "--steps", "2", "--data-dir"])
        .arg(&data)
        .arg("--out-dir")
        .arg(&run_b)
        .arg("--config")
        .arg(&config)
        .output()
        .unwrap();
    ok(&output);
    let output = bin()
        .args(["train", "--data-dir"])
        .arg(&data)
        .arg("--out-dir")
        .arg(&run_b)
        .arg("--resume")
        .arg(run_b.join("checkpoint.bin"))
        .arg("--config")
        .arg(&config)
        .output()
        .unwrap();
    ok(&output);
    assert_eq!(
        fs::read(&ckpt_a).unwrap(),
        fs::read(run_b.join("checkpoint.bin")).unwrap(),
        "resumed checkpoint diverged from the uninterrupted run"
    );

    // Render dataset views and a spiral.
    let frames = dir.path().join("frames");
    let output = bin()
        .args(["render", "--checkpoint"])
        .arg(&ckpt_a)
        .arg("--data-dir")
        .arg(&data)
        .arg("--out-dir")
        .arg(&frames)
        .args(["--views", "0,1", "--config"])
        .arg(&config)
        .output()
        .unwrap();
    ok(&output);
    for name in ["view_000.png", "view_001.png"] {
        let img = Image::load_png(&frames.join(name)).unwrap();
        assert_eq!((img.width, img.height), (16, 16));
    }
    let output = bin()
        .args(["render", "--checkpoint"])
        .arg(&ckpt_a)
        .arg("--data-dir")
        .arg(&data)
        .arg("--out-dir")
        .arg(&frames)
        .args(["--spiral", "3", "--config"])
        .arg(&config)
        .output()
        .unwrap();
    ok(&output);
    assert_eq!(frames.read_dir().unwrap().count(), 5, "two views plus three frames");

    // Evaluate twice; reports must be byte-identical and carry the summary.
    let report = dir.path().join("report.csv");
    let eval = |path: &Path| -> String {
        let output = bin()
            .args(["eval", "--checkpoint"])
            .arg(&ckpt_a)
            .arg("--data-dir")
            .arg(&data)
            .arg("--report")
            .arg(path)
            .arg("--config")
            .arg(&config)
            .output()
            .unwrap();
        ok(&output)
    };
    let stdout = eval(&report);
    let summary = stdout.lines().last().unwrap();
    assert!(
        summary.starts_with("PSNR ") && summary.contains(" dB  SSIM 0."),
        "bad summary line: {summary}"
    );
    let report2 = dir.path().join("report2.csv");
    eval(&report2);
    assert_eq!(fs::read(&report).unwrap(), fs::read(&report2).unwrap());
    let text = fs::read_to_string(&report).unwrap();
    assert!(text.starts_with("scene,view,pose_delta_deg,psnr_db,ssim\n"), "{text}");
    assert!(text.contains("# config:"), "report should embed its provenance: {text}");

    // Unknown scene and bad split fail cleanly.
    let output = bin()
        .args(["render", "--checkpoint"])
        .arg(&ckpt_a)
        .arg("--data-dir")
        .arg(&data)
        .arg("--out-dir")
        .arg(&frames)
        .args(["--views", "0", "--scene", "scene_999"])
        .output()
        .unwrap();
    assert!(!output.status.success());
    assert!(String::from_utf8_lossy(&output.stderr).contains("scene_999"));
}

#[test]
fn config_come_from_the_environment_when_unflagged() {
    let dir = tempfile::tempdir().unwrap();
    let config = micro_config(dir.path());
    let data = dir.path().join("data");
    let output = bin()
        .args(["make-data", "--out-dir"])
        .arg(&data)
        .env("MIRRORFIELD_CONFIG", &config)
        .output()
        .unwrap();
    let stdout = ok(&output);
    assert!(stdout.contains("1 scenes x 4 views"), "{stdout}");
    assert!(stdout.contains("image_size = 16"), "effective config not echoed: {stdout}");

    let output = bin()
        .args(["make-data", "--out-dir"])
        .arg(dir.path().join("data2"))
        .env("MIRRORFIELD_CONFIG", dir.path().join("missing.toml"))
        .output()
        .unwrap();
    assert!(!output.status.success(), "missing env config should fail loudly");
}

#[test]
fn ablate_emits_the_four_row_comparison() {
    let dir = tempfile::tempdir().unwrap();
    let config = micro_config(dir.path());
    let data = dir.path().join("data");
    make_data(&config, &data);

    let out = dir.path().join("ablation");
    let output = bin()
        .args(["ablate", "--steps", "2", "--data-dir"])
        .arg(&data)
        .arg("--out-dir")
        .arg(&out)
        .arg("--config")
        .arg(&config)
        .output()
        .unwrap();
    let stdout = ok(&output);
    for row in ["(a)  global_only", "(b)  global_local", "(c)  full", "(d)  no_hypernet"] {
        assert!(stdout.contains(row), "missing {row} in:\n{stdout}");
    }

    let csv = fs::read_to_string(out.join("ablation.csv")).unwrap();
    let lines: Vec<&str> = csv.trim_end().lines().collect();
    assert_eq!(lines[0], "row,mode,psnr_db,ssim,delta_pct");
    assert_eq!(lines.len(), 5);
    assert!(lines[1].starts_with("a,global_only,"));
    let base_delta: f64 = lines[1].split(',').nth(4).unwrap().parse().unwrap();
    assert_eq!(base_delta, 0.0, "row (a) is its own baseline");
    for mode in ["global_only", "global_local", "full", "no_hypernet"] {
        assert!(out.join(mode).join("checkpoint.bin").exists(), "missing {mode} checkpoint");
        assert!(out.join(mode).join("eval_report.csv").exists(), "missing {mode} report");
    }
}
