//! Command-line entry point: dataset generation, training, rendering,
//! evaluation, and the four-way mode comparison. One config file drives
//! every command; flags override it and the effective config is printed.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use nalgebra::Vector3;

use crate::checkpoint::{load_checkpoint, Checkpoint};
use crate::config::{load_config, AppConfig};
use crate::geometry::{look_at_extrinsics, CameraExtrinsics, CameraIntrinsics};
use crate::metrics::{evaluate, MetricsReport, Split};
use crate::model::AblationMode;
use crate::renderer::{render_image, ReferenceView};
use crate::synthdata::{load_dataset, make_dataset, Dataset, SceneData};
use crate::trainer::train;

pub const CONFIG_ENV: &str = "MIRRORFIELD_CONFIG";

#[derive(Parser)]
#[command(name = "mirrorfield", version, about = "Single-view novel view synthesis")]
pub struct Cli {
    /// TOML config file; the MIRRORFIELD_CONFIG env var is consulted when
    /// this flag is absent, and built-in defaults apply when both are.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand)]
pub enum Command {
    /// Generate a synthetic multi-view dataset.
    MakeData(MakeDataArgs),
    /// Optimize a model on a dataset.
    Train(TrainArgs),
    /// Render chosen or spiral poses from a checkpoint.
    Render(RenderArgs),
    /// Score a checkpoint over a dataset split.
    Eval(EvalArgs),
    /// Train and score all four conditioning modes on shared data.
    Ablate(AblateArgs),
}

#[derive(Args)]
pub struct MakeDataArgs {
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long)]
    pub scenes: Option<usize>,
    #[arg(long)]
    pub views: Option<usize>,
    #[arg(long)]
    pub size: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data_dir: PathBuf,
    #[arg(long)]
    pub out_dir: PathBuf,
    /// One of: global_only, global_local, full, no_hypernet.
    #[arg(long)]
    pub ablation: Option<String>,
    #[arg(long)]
    pub steps: Option<u64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Continue from an existing checkpoint.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Args)]
pub struct RenderArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data_dir: PathBuf,
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Scene id; the dataset's first scene when omitted.
    #[arg(long)]
    pub scene: Option<String>,
    #[arg(long)]
    pub reference_view: Option<usize>,
    /// Dataset view ids to render, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub views: Vec<usize>,
    /// Render this many frames on a turntable spiral instead of dataset views.
    #[arg(long)]
    pub spiral: Option<usize>,
    /// Full azimuth revolutions the spiral makes.
    #[arg(long, default_value_t = 2.0)]
    pub turns: f64,
}

#[derive(Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data_dir: PathBuf,
    /// train or test.
    #[arg(long)]
    pub split: Option<String>,
    #[arg(long, default_value = "eval_report.csv")]
    pub report: PathBuf,
}

#[derive(Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub data_dir: PathBuf,
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long)]
    pub steps: Option<u64>,
    #[arg(long)]
    pub seed: Option<u64>,
}

pub fn run(cli: Cli) -> anyhow::Result<()> {
    let config = resolve_config(cli.config.as_deref())?;
    match cli.command {
        Command::MakeData(args) => cmd_make_data(config, args),
        Command::Train(args) => cmd_train(config, args),
        Command::Render(args) => cmd_render(config, args),
        Command::Eval(args) => cmd_eval(config, args),
        Command::Ablate(args) => cmd_ablate(config, args),
    }
}

fn resolve_config(flag: Option<&Path>) -> anyhow::Result<AppConfig> {
    let path = flag
        .map(PathBuf::from)
        .or_else(|| std::env::var_os(CONFIG_ENV).map(PathBuf::from));
    match path {
        Some(p) => load_config(&p),
        None => Ok(AppConfig::default()),
    }
}

fn print_effective(config: &AppConfig) {
    println!("effective config:");
    for line in config.to_toml().lines() {
        println!("  {line}");
    }
}

fn cmd_make_data(mut config: AppConfig, args: MakeDataArgs) -> anyhow::Result<()> {
    if let Some(v) = args.scenes {
        config.data.scenes = v;
    }
    if let Some(v) = args.views {
        config.data.views_per_scene = v;
    }
    if let Some(v) = args.size {
        config.data.image_size = v;
    }
    let seed = args.seed.unwrap_or(config.train.seed);
    print_effective(&config);
    let manifest = make_dataset(&args.out_dir, &config.data, seed)?;
    println!(
        "wrote {} scenes x {} views to {}",
        manifest.scenes.len(),
        config.data.views_per_scene,
        args.out_dir.join("manifest.json").display()
    );
    Ok(())
}

fn cmd_train(mut config: AppConfig, args: TrainArgs) -> anyhow::Result<()> {
    if let Some(mode) = &args.ablation {
        config.model.ablation = AblationMode::from_str(mode)?;
    }
    if let Some(v) = args.steps {
        config.train.total_steps = v;
    }
    if let Some(v) = args.seed {
        config.train.seed = v;
    }
    print_effective(&config);
    let dataset = load_dataset(&args.data_dir)?;
    let echo = config.echo_json();
    let report = train::<f32>(
        &dataset,
        config.model,
        &config.train,
        &config.render,
        &args.out_dir,
        args.resume.as_deref(),
        Some(&echo),
    )?;
    println!("trained {} steps, final batch loss {}", report.steps_run, report.final_loss);
    println!("checkpoint: {}", report.checkpoint_path.display());
    println!("log: {}", report.log_path.display());
    Ok(())
}

/// Turntable cameras: azimuth sweeps `turns` revolutions while elevation
/// ramps across the band, eye orbiting the origin at `distance`.
pub fn spiral_poses(
    frames: usize,
    turns: f64,
    distance: f64,
    elevation_deg: [f64; 2],
    intr: CameraIntrinsics,
) -> Vec<(CameraIntrinsics, CameraExtrinsics)> {
    (0..frames)
        .map(|i| {
            let t = i as f64 / frames.max(1) as f64;
            let ramp = if frames > 1 { i as f64 / (frames - 1) as f64 } else { 0.0 };
            let az = (360.0 * turns * t).to_radians();
            let el = (elevation_deg[0] + ramp * (elevation_deg[1] - elevation_deg[0])).to_radians();
            let eye = distance * Vector3::new(el.cos() * az.sin(), el.sin(), el.cos() * az.cos());
            let extr = look_at_extrinsics(eye, Vector3::zeros(), Vector3::new(0.0, 1.0, 0.0))
                .expect("spiral cameras never look along the up axis");
            (intr, extr)
        })
        .collect()
}

fn find_scene<'a>(dataset: &'a Dataset, wanted: Option<&str>) -> anyhow::Result<&'a SceneData> {
    match wanted {
        None => dataset.scenes.first().context("dataset has no scenes"),
        Some(id) => dataset.scenes.iter().find(|s| s.id == id).with_context(|| {
            let known: Vec<&str> = dataset.scenes.iter().map(|s| s.id.as_str()).collect();
            format!("no scene named {id}; dataset has {}", known.join(", "))
        }),
    }
}

fn cmd_render(config: AppConfig, args: RenderArgs) -> anyhow::Result<()> {
    anyhow::ensure!(
        !(args.spiral.is_some() && !args.views.is_empty()),
        "choose either --views or --spiral, not both"
    );
    anyhow::ensure!(
        args.spiral.is_some() || !args.views.is_empty(),
        "nothing to render: pass --views or --spiral"
    );
    print_effective(&config);
    let ck: Checkpoint<f32> = load_checkpoint(&args.checkpoint)?;
    let dataset = load_dataset(&args.data_dir)?;
    let scene = find_scene(&dataset, args.scene.as_deref())?;
    let reference_view = args.reference_view.unwrap_or(config.eval.reference_view);
    anyhow::ensure!(
        reference_view < scene.views.len(),
        "scene {} has no view {reference_view}",
        scene.id
    );
    let reference = ReferenceView::from_scene(scene, reference_view)?;
    fs::create_dir_all(&args.out_dir)
        .with_context(|| format!("creating {}", args.out_dir.display()))?;

    let poses: Vec<(String, CameraIntrinsics, CameraExtrinsics)> = match args.spiral {
        Some(frames) => spiral_poses(
            frames,
            args.turns,
            dataset.config.distance,
            dataset.config.elevation_deg,
            reference.intrinsics,
        )
        .into_iter()
        .enumerate()
        .map(|(i, (intr, extr))| (format!("frame_{i:03}.png"), intr, extr))
        .collect(),
        None => args
            .views
            .iter()
            .map(|&v| {
                anyhow::ensure!(v < scene.views.len(), "scene {} has no view {v}", scene.id);
                let rec = &scene.views[v];
                Ok((format!("view_{v:03}.png"), rec.intrinsics, rec.extrinsics))
            })
            .collect::<anyhow::Result<Vec<_>>>()?,
    };
    for (name, intr, extr) in &poses {
        let img = render_image(&ck.model, &reference, intr, extr, &config.render, config.eval.seed)?;
        img.save_png(&args.out_dir.join(name))?;
    }
    println!("rendered {} poses of {} into {}", poses.len(), scene.id, args.out_dir.display());
    Ok(())
}

fn parse_split(s: &str) -> anyhow::Result<Split> {
    match s {
        "train" => Ok(Split::Train),
        "test" => Ok(Split::Test),
        other => anyhow::bail!("unknown split {other:?} (expected train or test)"),
    }
}

/// The report file is the CSV plus the effective config as trailing comment
/// lines, so a report always carries its provenance.
fn write_report(path: &Path, report: &MetricsReport, config: &AppConfig) -> anyhow::Result<()> {
    let mut text = report.to_csv();
    text.push_str("# config:\n");
    for line in config.to_toml().lines() {
        let _ = writeln!(text, "# {line}");
    }
    fs::write(path, text).with_context(|| format!("writing report {}", path.display()))
}

fn cmd_eval(config: AppConfig, args: EvalArgs) -> anyhow::Result<()> {
    print_effective(&config);
    let split = match &args.split {
        Some(s) => parse_split(s)?,
        None => config.eval.split,
    };
    let ck: Checkpoint<f32> = load_checkpoint(&args.checkpoint)?;
    let dataset = load_dataset(&args.data_dir)?;
    let report = evaluate(
        &ck.model,
        &dataset,
        split,
        config.eval.reference_view,
        &config.render,
        config.eval.seed,
    )?;
    write_report(&args.report, &report, &config)?;
    print!("{}", report.to_table());
    println!("report: {}", args.report.display());
    println!("{}", report.summary_line());
    Ok(())
}

const MODE_ROWS: [(char, AblationMode); 4] = [
    ('a', AblationMode::GlobalOnly),
    ('b', AblationMode::GlobalLocal),
    ('c', AblationMode::Full),
    ('d', AblationMode::NoHypernet),
];

fn cmd_ablate(mut config: AppConfig, args: AblateArgs) -> anyhow::Result<()> {
    if let Some(v) = args.steps {
        config.train.total_steps = v;
    }
    if let Some(v) = args.seed {
        config.train.seed = v;
    }
    print_effective(&config);
    let dataset = load_dataset(&args.data_dir)?;
    fs::create_dir_all(&args.out_dir)
        .with_context(|| format!("creating {}", args.out_dir.display()))?;

    let mut scores = Vec::new();
    for (label, mode) in MODE_ROWS {
        let mut mode_config = config.clone();
        mode_config.model.ablation = mode;
        let run_dir = args.out_dir.join(mode.name());
        println!("== training {} into {}", mode.name(), run_dir.display());
        let echo = mode_config.echo_json();
        let report = train::<f32>(
            &dataset,
            mode_config.model,
            &mode_config.train,
            &mode_config.render,
            &run_dir,
            None,
            Some(&echo),
        )?;
        let ck: Checkpoint<f32> = load_checkpoint(&report.checkpoint_path)?;
        let metrics = evaluate(
            &ck.model,
            &dataset,
            config.eval.split,
            config.eval.reference_view,
            &config.render,
            config.eval.seed,
        )?;
        write_report(&run_dir.join("eval_report.csv"), &metrics, &mode_config)?;
        scores.push((label, mode, metrics.mean_psnr_db, metrics.mean_ssim));
    }

    let base = scores[0].2;
    let mut table = String::new();
    let mut csv = String::from("row,mode,psnr_db,ssim,delta_pct\n");
    writeln!(table, "{:<4} {:<13} {:>8} {:>7} {:>9}", "row", "mode", "psnr_db", "ssim", "delta_pct")
        .unwrap();
    for (label, mode, psnr, ssim) in &scores {
        let delta = (psnr - base) / base * 100.0;
        writeln!(table, "({label})  {:<13} {psnr:>8.2} {ssim:>7.4} {delta:>+9.2}", mode.name())
            .unwrap();
        writeln!(csv, "{label},{},{psnr},{ssim},{delta}", mode.name()).unwrap();
    }
    fs::write(args.out_dir.join("ablation.csv"), &csv)?;
    print!("{table}");
    println!("comparison: {}", args.out_dir.join("ablation.csv").display());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spiral_covers_the_requested_sweep() {
        let intr = CameraIntrinsics::new(20.0, 20.0, 7.5, 7.5, 16, 16).unwrap();
        let poses = spiral_poses(8, 2.0, 2.7, [10.0, 35.0], intr);
        assert_eq!(poses.len(), 8);
        for (_, extr) in &poses {
            let c = extr.camera_center();
            assert!((c.norm() - 2.7).abs() < 1e-9, "eye stays on the orbit sphere");
        }
        // Elevation ramps across the band: first frame low, last frame high.
        let first = poses.first().unwrap().1.camera_center();
        let last = poses.last().unwrap().1.camera_center();
        let el = |c: Vector3<f64>| (c.y / c.norm()).asin().to_degrees();
        assert!((el(first) - 10.0).abs() < 1e-9);
        assert!((el(last) - 35.0).abs() < 1e-9);
        // Two turns in eight frames: consecutive azimuths step by 90 degrees.
        let az = |c: Vector3<f64>| c.x.atan2(c.z).to_degrees().rem_euclid(360.0);
        let step = (az(poses[1].1.camera_center()) - az(poses[0].1.camera_center())).rem_euclid(360.0);
        assert!((step - 90.0).abs() < 1e-9, "step {step}");
    }

    #[test]
    fn flags_parse_into_the_right_commands() {
        let cli = Cli::try_parse_from([
            "mirrorfield",
            "train",
            "--data-dir",
            "d",
            "--out-dir",
            "o",
            "--ablation",
            "global_local",
            "--steps",
            "12",
        ])
        .unwrap();
        match cli.command {
            Command::Train(t) => {
                assert_eq!(t.ablation.as_deref(), Some("global_local"));
                assert_eq!(t.steps, Some(12));
            }
            _ => panic!("parsed the wrong command"),
        }

        let cli = Cli::try_parse_from([
            "mirrorfield",
            "render",
            "--checkpoint",
            "c.bin",
            "--data-dir",
            "d",
            "--out-dir",
            "o",
            "--views",
            "1,4,6",
        ])
        .unwrap();
        match cli.command {
            Command::Render(r) => assert_eq!(r.views, vec![1, 4, 6]),
            _ => panic!("parsed the wrong command"),
        }

        assert!(Cli::try_parse_from(["mirrorfield", "train", "--bogus"]).is_err());
    }

    #[test]
    fn split_names_parse() {
        assert_eq!(parse_split("train").unwrap(), Split::Train);
        assert_eq!(parse_split("test").unwrap(), Split::Test);
        assert!(parse_split("validation").is_err());
    }
}
