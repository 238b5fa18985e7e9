//! Volume rendering of rays through the conditioned field, in two flavours:
//! a differentiable path that builds onto a caller's tape for training, and a
//! chunked forward-only path for producing images. A scalar reference
//! implementation of the compositing rule serves as the oracle for both.

use std::rc::Rc;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diff::{Scalar, Tape, Tensor, Var};
use crate::field::field_forward_tape;
use crate::geometry::{
    camera_ray, mirror_point, project, sample_along_ray, CameraExtrinsics, CameraIntrinsics,
    GeometryError, Ray, SampleJitter, SymmetryTransform,
};
use crate::img::Image;
use crate::model::{Model, ModelError};
use crate::params::BoundParams;
use crate::seeds::{derive_seed, tag};
use crate::synthdata::SceneData;
use crate::{encoder, field, hypernet};

/// Optical depth per sample is capped here before exponentiation; densities
/// large enough to hit the cap are already fully opaque.
pub const MAX_OPTICAL_DEPTH: f64 = 80.0;

/// Rows of field queries evaluated per forward chunk in the image path.
const CHUNK_ROWS: usize = 16_384;

/// Coordinate far enough off any grid that sampling reads zero; stands in
/// for projections behind the camera.
const OFF_GRID: [f64; 2] = [-1e9, -1e9];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RenderConfig {
    pub near: f64,
    pub far: f64,
    pub samples_per_ray: usize,
    /// Jitter sample positions inside their bins (training); image rendering
    /// normally keeps bin midpoints.
    pub stratified: bool,
    pub background: [f64; 3],
}

impl Default for RenderConfig {
    fn default() -> Self {
        RenderConfig {
            near: 1.2,
            far: 4.2,
            samples_per_ray: 64,
            stratified: false,
            background: [1.0, 1.0, 1.0],
        }
    }
}

impl RenderConfig {
    pub fn validate(&self) -> Result<(), RenderError> {
        if !(self.near > 0.0 && self.far > self.near) {
            return Err(RenderError::BadConfig(format!(
                "near {} / far {} must satisfy 0 < near < far",
                self.near, self.far
            )));
        }
        if self.samples_per_ray == 0 {
            return Err(RenderError::BadConfig("samples_per_ray must be at least 1".into()));
        }
        if self.background.iter().any(|c| !(0.0..=1.0).contains(c)) {
            return Err(RenderError::BadConfig("background must lie in [0,1]".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum RenderError {
    #[error("colors ({colors}), densities ({densities}) and deltas ({deltas}) must match")]
    LengthMismatch { colors: usize, densities: usize, deltas: usize },
    #[error("invalid render config: {0}")]
    BadConfig(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// Everything the renderer needs to know about the conditioning view.
#[derive(Clone, Copy, Debug)]
pub struct ReferenceView<'a> {
    pub image: &'a Image,
    pub intrinsics: CameraIntrinsics,
    pub extrinsics: CameraExtrinsics,
    pub symmetry: SymmetryTransform,
}

impl<'a> ReferenceView<'a> {
    pub fn from_scene(scene: &'a SceneData, view: usize) -> anyhow::Result<Self> {
        let rec = &scene.views[view];
        Ok(ReferenceView {
            image: rec.image()?,
            intrinsics: rec.intrinsics,
            extrinsics: rec.extrinsics,
            symmetry: scene.spec.symmetry,
        })
    }
}

// Scalar reference route, used directly for single rays and as the oracle
// for the batched tape route.

#[derive(Clone, Debug, PartialEq)]
pub struct CompositeOut {
    pub pixel: [f64; 3],
    pub weights: Vec<f64>,
    pub transmittance_end: f64,
}

/// Front-to-back alpha compositing of one ray. Weight k is the transmittance
/// into sample k times its own opacity; whatever survives the ray is filled
/// with the background color.
pub fn composite(
    colors: &[[f64; 3]],
    densities: &[f64],
    deltas: &[f64],
    background: [f64; 3],
) -> Result<CompositeOut, RenderError> {
    if colors.len() != densities.len() || colors.len() != deltas.len() {
        return Err(RenderError::LengthMismatch {
            colors: colors.len(),
            densities: densities.len(),
            deltas: deltas.len(),
        });
    }
    let mut transmittance = 1.0;
    let mut pixel = [0.0; 3];
    let mut weights = Vec::with_capacity(colors.len());
    for ((c, &sigma), &delta) in colors.iter().zip(densities).zip(deltas) {
        debug_assert!(sigma >= 0.0 && delta > 0.0);
        let depth = (sigma * delta).min(MAX_OPTICAL_DEPTH);
        let pass = (-depth).exp();
        let weight = transmittance * (1.0 - pass);
        for (p, cv) in pixel.iter_mut().zip(c) {
            *p += weight * cv;
        }
        weights.push(weight);
        transmittance *= pass;
    }
    for (p, bv) in pixel.iter_mut().zip(&background) {
        *p += transmittance * bv;
    }
    Ok(CompositeOut { pixel, weights, transmittance_end: transmittance })
}

// Batched tape route.

/// Per-batch render outputs still on the tape: pixels [B, 3], weights [B, K],
/// end transmittance [B, 1].
#[derive(Clone, Copy, Debug)]
pub struct RayBatchVars {
    pub pixels: Var,
    pub weights: Var,
    pub transmittance_end: Var,
}

/// Batched compositing: density [B*K, 1] and color [B*K, 3] in ray-major
/// sample order, deltas per sample. Every output row depends only on its own
/// ray's samples, so batching cannot change any value.
pub fn composite_on_tape<T: Scalar>(
    tape: &Tape<T>,
    density: Var,
    color: Var,
    deltas: &[f64],
    background: [f64; 3],
    rays: usize,
    samples: usize,
) -> RayBatchVars {
    assert_eq!(deltas.len(), rays * samples);
    let delta_c = tape.constant(Tensor::from_real_slice(&[rays * samples, 1], deltas));
    let depth = tape.clamp_max(tape.mul(density, delta_c), T::from_real(MAX_OPTICAL_DEPTH));
    let depth = tape.reshape(depth, &[rays, samples]);
    let into = tape.exp(tape.neg(tape.cumsum_exclusive(depth)));
    let ones = tape.constant(Tensor::from_vec(&[rays, samples], vec![T::one(); rays * samples]));
    let alpha = tape.sub(ones, tape.exp(tape.neg(depth)));
    let weights = tape.mul(into, alpha);
    let fg = tape.weighted_sum_k(weights, color, samples);
    let ones_col = tape.constant(Tensor::from_vec(&[samples, 1], vec![T::one(); samples]));
    let t_end = tape.exp(tape.neg(tape.matmul(depth, ones_col)));
    let bg = tape.constant(Tensor::from_real_slice(&[1, 3], &background));
    let pixels = tape.add(fg, tape.matmul(t_end, bg));
    RayBatchVars { pixels, weights, transmittance_end: t_end }
}

/// One reference view wired through encoder and weight generator on a tape,
/// ready to answer ray batches.
#[derive(Clone, Copy, Debug)]
pub struct Conditioning {
    pub theta: Var,
    pub features: Var,
    pub intrinsics: CameraIntrinsics,
    pub extrinsics: CameraExtrinsics,
    pub symmetry: SymmetryTransform,
}

pub fn image_tensor<T: Scalar>(image: &Image) -> Tensor<T> {
    let mut data = Vec::with_capacity(image.width * image.height * 3);
    for y in 0..image.height {
        for x in 0..image.width {
            data.extend(image.get(x, y).map(T::from_real));
        }
    }
    Tensor::from_vec(&[image.height, image.width, 3], data)
}

pub fn condition_on_tape<T: Scalar>(
    tape: &Tape<T>,
    model: &Model<T>,
    params: &BoundParams,
    reference: &ReferenceView,
) -> Result<Conditioning, RenderError> {
    let encoded = encoder::encode(tape, params, &model.config, &image_tensor(reference.image))?;
    let theta = if model.config.ablation.uses_hypernet() {
        model.hypernet_calls.set(model.hypernet_calls.get() + 1);
        hypernet::generate_field_params_tape(
            tape,
            params,
            &model.config,
            &model.config.field_layout(),
            encoded.latent,
        )?
    } else {
        params.var("theta")
    };
    Ok(Conditioning {
        theta,
        features: encoded.features,
        intrinsics: reference.intrinsics,
        extrinsics: reference.extrinsics,
        symmetry: reference.symmetry,
    })
}

/// Renders a ray batch against an existing conditioning, extending its tape.
/// Ray i jitters its samples from stream seed + (RAY, i) when stratified.
pub fn render_rays_on_tape<T: Scalar>(
    tape: &Tape<T>,
    model: &Model<T>,
    cond: &Conditioning,
    rays: &[Ray],
    cfg: &RenderConfig,
    seed: u64,
) -> Result<RayBatchVars, RenderError> {
    cfg.validate()?;
    ray_batch_forward(tape, model, cond, rays, cfg, seed, 0)
}

fn ray_batch_forward<T: Scalar>(
    tape: &Tape<T>,
    model: &Model<T>,
    cond: &Conditioning,
    rays: &[Ray],
    cfg: &RenderConfig,
    seed: u64,
    first_ray_index: u64,
) -> Result<RayBatchVars, RenderError> {
    assert!(!rays.is_empty());
    let k = cfg.samples_per_ray;
    let b = rays.len();
    let pos_spec = model.config.position_spec();
    let dir_spec = model.config.direction_spec();
    let gamma_width = pos_spec.encoded_dim(3) + dir_spec.encoded_dim(3);
    let mode = model.config.ablation;
    let want_features = mode.uses_local_features() || mode.uses_symmetric_features();

    let reproject = |p: &Vector3<f64>| match project(p, &cond.intrinsics, &cond.extrinsics) {
        Ok(hit) => hit.uv,
        Err(_) => OFF_GRID,
    };

    let mut gamma = Vec::with_capacity(b * k * gamma_width);
    let mut deltas = Vec::with_capacity(b * k);
    let mut local_coords = Vec::with_capacity(if want_features { b * k } else { 0 });
    let mut mirror_coords = Vec::with_capacity(if mode.uses_symmetric_features() { b * k } else { 0 });
    for (i, ray) in rays.iter().enumerate() {
        let jitter = if cfg.stratified {
            SampleJitter::Seeded(derive_seed(seed, &[tag::RAY, first_ray_index + i as u64]))
        } else {
            SampleJitter::Midpoint
        };
        let samples = sample_along_ray(ray, cfg.near, cfg.far, k, jitter)?;
        let dir_enc = field::positional_encode(ray.direction.as_slice(), &dir_spec);
        for (point, delta) in samples.points.iter().zip(&samples.deltas) {
            gamma.extend(field::positional_encode(point.as_slice(), &pos_spec));
            gamma.extend_from_slice(&dir_enc);
            deltas.push(*delta);
            if want_features {
                local_coords.push(reproject(point));
            }
            if mode.uses_symmetric_features() {
                mirror_coords.push(reproject(&mirror_point(point, &cond.symmetry)));
            }
        }
    }

    let mut columns =
        vec![tape.constant(Tensor::from_real_slice(&[b * k, gamma_width], &gamma))];
    if mode.uses_local_features() {
        columns.push(tape.bilinear_sample(cond.features, Rc::new(local_coords)));
        model.feature_reads.set(model.feature_reads.get() + (b * k) as u64);
    }
    if mode.uses_symmetric_features() {
        columns.push(tape.bilinear_sample(cond.features, Rc::new(mirror_coords)));
        model.feature_reads.set(model.feature_reads.get() + (b * k) as u64);
    }
    let inputs = if columns.len() == 1 { columns[0] } else { tape.concat_cols(&columns) };
    let (density, color) =
        field_forward_tape(tape, cond.theta, &model.config.field_layout(), inputs)?;
    Ok(composite_on_tape(tape, density, color, &deltas, cfg.background, b, k))
}

/// Forward-only ray rendering: conditions on the reference once, then runs
/// the exact training kernels chunk by chunk without gradient bookkeeping.
pub fn render_rays<T: Scalar>(
    model: &Model<T>,
    reference: &ReferenceView,
    rays: &[Ray],
    cfg: &RenderConfig,
    seed: u64,
) -> Result<Vec<[f64; 3]>, RenderError> {
    cfg.validate()?;
    if rays.is_empty() {
        return Ok(Vec::new());
    }
    let (theta, features) = {
        let tape: Tape<T> = Tape::new();
        let params = BoundParams::bind_const(&tape, &model.params);
        let cond = condition_on_tape(&tape, model, &params, reference)?;
        (tape.value(cond.theta).as_ref().clone(), tape.value(cond.features).as_ref().clone())
    };
    let chunk = (CHUNK_ROWS / cfg.samples_per_ray).max(1);
    let mut out = Vec::with_capacity(rays.len());
    for (ci, slice) in rays.chunks(chunk).enumerate() {
        let tape: Tape<T> = Tape::new();
        let cond = Conditioning {
            theta: tape.constant(theta.clone()),
            features: tape.constant(features.clone()),
            intrinsics: reference.intrinsics,
            extrinsics: reference.extrinsics,
            symmetry: reference.symmetry,
        };
        let batch =
            ray_batch_forward(&tape, model, &cond, slice, cfg, seed, (ci * chunk) as u64)?;
        let values = tape.value(batch.pixels).to_real_vec();
        out.extend(values.chunks_exact(3).map(|p| [p[0], p[1], p[2]]));
    }
    Ok(out)
}

/// Renders every pixel of the target camera, row-major, clamped to [0, 1].
pub fn render_image<T: Scalar>(
    model: &Model<T>,
    reference: &ReferenceView,
    intr: &CameraIntrinsics,
    extr: &CameraExtrinsics,
    cfg: &RenderConfig,
    seed: u64,
) -> Result<Image, RenderError> {
    let mut rays = Vec::with_capacity(intr.width * intr.height);
    for y in 0..intr.height {
        for x in 0..intr.width {
            rays.push(camera_ray([x as f64, y as f64], intr, extr));
        }
    }
    let pixels = render_rays(model, reference, &rays, cfg, seed)?;
    let mut image = Image::new(intr.width, intr.height);
    for (i, p) in pixels.iter().enumerate() {
        image.set(i % intr.width, i / intr.width, p.map(|c| c.clamp(0.0, 1.0)));
    }
    Ok(image)
}
