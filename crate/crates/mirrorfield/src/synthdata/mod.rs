//! Procedurally generated mirror-symmetric scenes, camera rigs on a viewing
//! sphere, and the on-disk dataset the trainer and evaluator consume.
//!
//! Scenes are unions of simple primitives placed in pairs across the x=0
//! plane, so ground truth symmetry is true by construction rather than
//! approximately learned from data. A perturbation knob breaks the pairing
//! on demand for robustness experiments.

pub mod oracle;

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use anyhow::Context;
use nalgebra::{Matrix3, Matrix4, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::geometry::{
    look_at_extrinsics, pose_delta_deg, CameraExtrinsics, CameraIntrinsics, GeometryError,
    SymmetryTransform,
};
use crate::img::Image;
use crate::seeds::{derive_seed, tag};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Shape {
    Sphere { radius: f64 },
    Box3 { half_extents: Vector3<f64> },
    /// Capsule along the y axis, so its mirror image is again a capsule.
    Capsule { half_length: f64, radius: f64 },
}

impl Shape {
    pub fn bounding_radius(&self) -> f64 {
        match *self {
            Shape::Sphere { radius } => radius,
            Shape::Box3 { half_extents } => half_extents.norm(),
            Shape::Capsule { half_length, radius } => half_length + radius,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Primitive {
    pub shape: Shape,
    pub center: Vector3<f64>,
    pub albedo: [f64; 3],
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    pub primitives: Vec<Primitive>,
    pub symmetry: SymmetryTransform,
}

#[derive(Clone, Copy, Debug)]
pub struct SceneGenConfig {
    /// Number of sampled primitives; each one also contributes its mirror
    /// image, so the scene holds twice this many.
    pub num_primitives: usize,
    /// Amplitude of per-primitive center and albedo noise. Zero keeps the
    /// scene exactly symmetric.
    pub perturbation: f64,
}

fn sample_primitive(rng: &mut ChaCha8Rng) -> Primitive {
    loop {
        // Sizes are chosen so a few primitives fill a good fraction of the
        // frame; scenes whose objects shrink to a handful of pixels leave the
        // photometric loss dominated by background and barely trainable.
        let shape = match rng.gen_range(0..3u32) {
            0 => Shape::Sphere { radius: rng.gen_range(0.18..0.40) },
            1 => Shape::Box3 {
                half_extents: Vector3::new(
                    rng.gen_range(0.14..0.34),
                    rng.gen_range(0.14..0.34),
                    rng.gen_range(0.14..0.34),
                ),
            },
            _ => Shape::Capsule {
                half_length: rng.gen_range(0.16..0.34),
                radius: rng.gen_range(0.10..0.22),
            },
        };
        let sign = if rng.gen::<bool>() { 1.0 } else { -1.0 };
        let center = Vector3::new(
            sign * rng.gen_range(0.08..0.50),
            rng.gen_range(-0.30..0.30),
            rng.gen_range(-0.30..0.30),
        );
        let albedo = [
            rng.gen_range(0.1..1.0),
            rng.gen_range(0.1..1.0),
            rng.gen_range(0.1..1.0),
        ];
        // stay inside the unit ball, clear of the mirror plane, and bright
        // enough to register against any background
        if center.norm() + shape.bounding_radius() <= 0.95
            && albedo.iter().cloned().fold(0.0, f64::max) >= 0.6
        {
            return Primitive { shape, center, albedo };
        }
    }
}

fn perturb(p: &mut Primitive, amount: f64, rng: &mut ChaCha8Rng) {
    for i in 0..3 {
        p.center[i] += amount * rng.gen_range(-0.25..0.25);
    }
    for c in p.albedo.iter_mut() {
        *c = (*c + amount * rng.gen_range(-0.5..0.5)).clamp(0.05, 1.0);
    }
}

/// Samples primitives, adds the mirror image of each across x=0, then applies
/// perturbation noise to every primitive. The mirrored partner's x coordinate
/// is an exact negation, so at zero perturbation the scene is invariant under
/// its symmetry down to the last bit.
pub fn generate_scene(seed: u64, cfg: &SceneGenConfig) -> SceneSpec {
    assert!(cfg.num_primitives >= 1, "scene needs at least one primitive");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut primitives = Vec::with_capacity(cfg.num_primitives * 2);
    for _ in 0..cfg.num_primitives {
        let base = sample_primitive(&mut rng);
        let twin = Primitive {
            shape: base.shape,
            center: Vector3::new(-base.center.x, base.center.y, base.center.z),
            albedo: base.albedo,
        };
        primitives.push(base);
        primitives.push(twin);
    }
    if cfg.perturbation > 0.0 {
        for p in primitives.iter_mut() {
            perturb(p, cfg.perturbation, &mut rng);
        }
    }
    SceneSpec { primitives, symmetry: SymmetryTransform::canonical() }
}

/// Generation parameters for one dataset. Serialized into the manifest so a
/// loaded dataset knows how it was produced.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub scenes: usize,
    pub views_per_scene: usize,
    pub image_size: usize,
    pub num_primitives: usize,
    pub perturbation: f64,
    pub focal: f64,
    pub distance: f64,
    pub near: f64,
    pub far: f64,
    pub elevation_deg: [f64; 2],
    pub background: [f64; 3],
    /// Held-out views' forward axes must differ from view 0's by at least
    /// this angle.
    pub test_min_delta_deg: f64,
    pub max_test_views: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            scenes: 1,
            views_per_scene: 24,
            image_size: 64,
            num_primitives: 3,
            perturbation: 0.0,
            focal: 58.0,
            distance: 2.7,
            near: 1.2,
            far: 4.2,
            elevation_deg: [10.0, 35.0],
            background: [1.0, 1.0, 1.0],
            test_min_delta_deg: 90.0,
            max_test_views: 4,
        }
    }
}

/// Cameras on a sphere around the origin: evenly spaced azimuths, seeded
/// elevations inside the configured band.
pub fn camera_rig(seed: u64, cfg: &DatasetConfig) -> Vec<(CameraIntrinsics, CameraExtrinsics)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = (cfg.image_size as f64 - 1.0) / 2.0;
    let intr = CameraIntrinsics::new(cfg.focal, cfg.focal, c, c, cfg.image_size, cfg.image_size)
        .expect("rig intrinsics are valid by construction");
    (0..cfg.views_per_scene)
        .map(|i| {
            let az = (360.0 * i as f64 / cfg.views_per_scene as f64).to_radians();
            let el = rng.gen_range(cfg.elevation_deg[0]..=cfg.elevation_deg[1]).to_radians();
            let eye =
                cfg.distance * Vector3::new(el.cos() * az.sin(), el.sin(), el.cos() * az.cos());
            let extr = look_at_extrinsics(eye, Vector3::zeros(), Vector3::new(0.0, 1.0, 0.0))
                .expect("rig camera never looks along the up axis");
            (intr, extr)
        })
        .collect()
}

/// Angular span of camera azimuths: 360 minus the largest gap between
/// neighboring azimuths (wraparound included).
pub fn azimuth_coverage_deg(cameras: &[(CameraIntrinsics, CameraExtrinsics)]) -> f64 {
    if cameras.len() < 2 {
        return 0.0;
    }
    let mut az: Vec<f64> = cameras
        .iter()
        .map(|(_, e)| {
            let c = e.camera_center();
            c.x.atan2(c.z).to_degrees().rem_euclid(360.0)
        })
        .collect();
    az.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut largest_gap = 360.0 - az[az.len() - 1] + az[0];
    for w in az.windows(2) {
        largest_gap = largest_gap.max(w[1] - w[0]);
    }
    360.0 - largest_gap
}

/// Partition views into train and held-out sets. Held-out candidates are the
/// views whose forward axis differs from view 0's by at least `min_delta_deg`;
/// up to `max_test` of them are kept, spread evenly across the sorted angle
/// range so both moderate and extreme pose differences are represented.
pub fn split_views(
    cameras: &[(CameraIntrinsics, CameraExtrinsics)],
    min_delta_deg: f64,
    max_test: usize,
) -> (Vec<usize>, Vec<usize>) {
    let reference = &cameras[0].1;
    let mut qualifying: Vec<(usize, f64)> = cameras
        .iter()
        .enumerate()
        .skip(1)
        .map(|(i, (_, e))| (i, pose_delta_deg(reference, e)))
        .filter(|&(_, d)| d >= min_delta_deg)
        .collect();
    qualifying.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap());
    let k = max_test.min(qualifying.len());
    let mut test: Vec<usize> = (0..k)
        .map(|j| {
            let pos = if k <= 1 { qualifying.len() - 1 } else { j * (qualifying.len() - 1) / (k - 1) };
            qualifying[pos].0
        })
        .collect();
    test.sort_unstable();
    test.dedup();
    let train = (0..cameras.len()).filter(|i| !test.contains(i)).collect();
    (train, test)
}

/// One camera as stored in `cameras.json`. Rotation is row-major.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct CameraRecord {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    #[serde(rename = "R")]
    pub r: [f64; 9],
    pub t: [f64; 3],
}

impl CameraRecord {
    pub fn from_camera(intr: &CameraIntrinsics, extr: &CameraExtrinsics) -> Self {
        let m = &extr.rotation;
        CameraRecord {
            fx: intr.fx,
            fy: intr.fy,
            cx: intr.cx,
            cy: intr.cy,
            width: intr.width,
            height: intr.height,
            r: [
                m[(0, 0)], m[(0, 1)], m[(0, 2)],
                m[(1, 0)], m[(1, 1)], m[(1, 2)],
                m[(2, 0)], m[(2, 1)], m[(2, 2)],
            ],
            t: [extr.translation.x, extr.translation.y, extr.translation.z],
        }
    }

    pub fn to_camera(&self) -> Result<(CameraIntrinsics, CameraExtrinsics), GeometryError> {
        let intr = CameraIntrinsics::new(self.fx, self.fy, self.cx, self.cy, self.width, self.height)?;
        let extr = CameraExtrinsics::new(Matrix3::from_row_slice(&self.r), Vector3::from(self.t))?;
        Ok((intr, extr))
    }
}

#[derive(Serialize, Deserialize)]
enum ShapeIo {
    #[serde(rename = "sphere")]
    Sphere { radius: f64 },
    #[serde(rename = "box")]
    Box { half_extents: [f64; 3] },
    #[serde(rename = "capsule")]
    Capsule { half_length: f64, radius: f64 },
}

#[derive(Serialize, Deserialize)]
struct PrimitiveIo {
    shape: ShapeIo,
    center: [f64; 3],
    albedo: [f64; 3],
}

#[derive(Serialize, Deserialize)]
struct SceneSpecIo {
    primitives: Vec<PrimitiveIo>,
    /// Row-major 4x4 world-space reflection.
    symmetry: [f64; 16],
}

impl SceneSpec {
    pub fn to_json(&self) -> String {
        let primitives = self
            .primitives
            .iter()
            .map(|p| PrimitiveIo {
                shape: match p.shape {
                    Shape::Sphere { radius } => ShapeIo::Sphere { radius },
                    Shape::Box3 { half_extents } => {
                        ShapeIo::Box { half_extents: [half_extents.x, half_extents.y, half_extents.z] }
                    }
                    Shape::Capsule { half_length, radius } => ShapeIo::Capsule { half_length, radius },
                },
                center: [p.center.x, p.center.y, p.center.z],
                albedo: p.albedo,
            })
            .collect();
        let mut symmetry = [0.0; 16];
        for i in 0..4 {
            for j in 0..4 {
                symmetry[i * 4 + j] = self.symmetry.matrix()[(i, j)];
            }
        }
        serde_json::to_string_pretty(&SceneSpecIo { primitives, symmetry })
            .expect("scene serialization cannot fail")
    }

    pub fn from_json(text: &str) -> anyhow::Result<SceneSpec> {
        let io: SceneSpecIo = serde_json::from_str(text)?;
        let primitives = io
            .primitives
            .into_iter()
            .map(|p| Primitive {
                shape: match p.shape {
                    ShapeIo::Sphere { radius } => Shape::Sphere { radius },
                    ShapeIo::Box { half_extents } => {
                        Shape::Box3 { half_extents: Vector3::from(half_extents) }
                    }
                    ShapeIo::Capsule { half_length, radius } => Shape::Capsule { half_length, radius },
                },
                center: Vector3::from(p.center),
                albedo: p.albedo,
            })
            .collect();
        let symmetry = SymmetryTransform::from_matrix(Matrix4::from_row_slice(&io.symmetry))
            .context("scene symmetry matrix is not a valid reflection")?;
        Ok(SceneSpec { primitives, symmetry })
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct SceneEntry {
    pub id: String,
    pub train_views: Vec<usize>,
    pub test_views: Vec<usize>,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct Manifest {
    pub image_size: usize,
    pub seed: u64,
    pub config: DatasetConfig,
    pub scenes: Vec<SceneEntry>,
}

/// Generates scenes, renders every view with the analytic oracle, and writes
/// the dataset tree: `manifest.json` at the root, then per scene
/// `scenes/<id>/{scene.json, cameras.json, views/<k>.png}`.
pub fn make_dataset(out_dir: &Path, cfg: &DatasetConfig, seed: u64) -> anyhow::Result<Manifest> {
    fs::create_dir_all(out_dir)
        .with_context(|| format!("creating dataset dir {}", out_dir.display()))?;
    let mut entries = Vec::with_capacity(cfg.scenes);
    for s in 0..cfg.scenes {
        let id = format!("scene_{s:03}");
        let scene_dir = out_dir.join("scenes").join(&id);
        fs::create_dir_all(scene_dir.join("views"))?;

        let scene_seed = derive_seed(seed, &[tag::SCENE, s as u64]);
        let rig_seed = derive_seed(seed, &[tag::RIG, s as u64]);
        let scene = generate_scene(
            scene_seed,
            &SceneGenConfig { num_primitives: cfg.num_primitives, perturbation: cfg.perturbation },
        );
        let cameras = camera_rig(rig_seed, cfg);
        let (train_views, test_views) = split_views(&cameras, cfg.test_min_delta_deg, cfg.max_test_views);

        fs::write(scene_dir.join("scene.json"), scene.to_json())?;
        let records: Vec<CameraRecord> =
            cameras.iter().map(|(i, e)| CameraRecord::from_camera(i, e)).collect();
        fs::write(scene_dir.join("cameras.json"), serde_json::to_string_pretty(&records)?)?;
        for (k, (intr, extr)) in cameras.iter().enumerate() {
            let img = oracle::oracle_render(&scene, intr, extr, cfg.background);
            img.save_png(&scene_dir.join("views").join(format!("{k}.png")))
                .with_context(|| format!("writing view {k} of {id}"))?;
        }
        entries.push(SceneEntry { id, train_views, test_views });
    }
    let manifest = Manifest { image_size: cfg.image_size, seed, config: cfg.clone(), scenes: entries };
    fs::write(out_dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}

/// One posed view. The image is decoded from disk on first access.
#[derive(Debug)]
pub struct ViewRecord {
    pub view_id: usize,
    pub intrinsics: CameraIntrinsics,
    pub extrinsics: CameraExtrinsics,
    path: PathBuf,
    image: OnceLock<Image>,
}

impl ViewRecord {
    pub fn image(&self) -> anyhow::Result<&Image> {
        if self.image.get().is_none() {
            let img = Image::load_png(&self.path)
                .with_context(|| format!("loading {}", self.path.display()))?;
            let _ = self.image.set(img);
        }
        Ok(self.image.get().expect("image populated above"))
    }
}

#[derive(Debug)]
pub struct SceneData {
    pub id: String,
    pub spec: SceneSpec,
    pub views: Vec<ViewRecord>,
    pub train_views: Vec<usize>,
    pub test_views: Vec<usize>,
}

#[derive(Debug)]
pub struct Dataset {
    pub seed: u64,
    pub image_size: usize,
    pub config: DatasetConfig,
    pub scenes: Vec<SceneData>,
}

pub fn load_dataset(dir: &Path) -> anyhow::Result<Dataset> {
    let manifest_path = dir.join("manifest.json");
    let manifest: Manifest = serde_json::from_str(
        &fs::read_to_string(&manifest_path)
            .with_context(|| format!("reading {}", manifest_path.display()))?,
    )
    .with_context(|| format!("parsing {}", manifest_path.display()))?;

    let mut scenes = Vec::with_capacity(manifest.scenes.len());
    for entry in &manifest.scenes {
        let scene_dir = dir.join("scenes").join(&entry.id);
        let spec = SceneSpec::from_json(
            &fs::read_to_string(scene_dir.join("scene.json"))
                .with_context(|| format!("reading scene.json for {}", entry.id))?,
        )
        .with_context(|| format!("parsing scene.json for {}", entry.id))?;
        let records: Vec<CameraRecord> = serde_json::from_str(
            &fs::read_to_string(scene_dir.join("cameras.json"))
                .with_context(|| format!("reading cameras.json for {}", entry.id))?,
        )
        .with_context(|| format!("parsing cameras.json for {}", entry.id))?;
        let views = records
            .iter()
            .enumerate()
            .map(|(k, rec)| {
                let (intrinsics, extrinsics) = rec
                    .to_camera()
                    .with_context(|| format!("camera {k} of {} fails validation", entry.id))?;
                Ok(ViewRecord {
                    view_id: k,
                    intrinsics,
                    extrinsics,
                    path: scene_dir.join("views").join(format!("{k}.png")),
                    image: OnceLock::new(),
                })
            })
            .collect::<anyhow::Result<Vec<_>>>()?;
        for list in [&entry.train_views, &entry.test_views] {
            for &v in list {
                anyhow::ensure!(v < views.len(), "split references missing view {v} in {}", entry.id);
            }
        }
        scenes.push(SceneData {
            id: entry.id.clone(),
            spec,
            views,
            train_views: entry.train_views.clone(),
            test_views: entry.test_views.clone(),
        });
    }
    Ok(Dataset {
        seed: manifest.seed,
        image_size: manifest.image_size,
        config: manifest.config,
        scenes,
    })
}
