//! Optimization loop: batch assembly over the dataset, the summed
//! squared-error objective, the warmup/decay learning-rate schedule, and the
//! checkpointed training driver.

use std::fs::{self, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};

use anyhow::Context;
use indexmap::map::Entry;
use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use crate::diff::{Scalar, Tape, Tensor, Var};
use crate::geometry::{camera_ray, Ray};
use crate::model::{Model, ModelConfig, ModelError};
use crate::optim::{AdamW, AdamWConfig};
use crate::params::BoundParams;
use crate::renderer::{
    condition_on_tape, render_rays_on_tape, ReferenceView, RenderConfig, RenderError,
};
use crate::seeds::{derive_seed, tag};
use crate::synthdata::Dataset;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub objects_per_batch: usize,
    pub rays_per_object: usize,
    pub samples_per_ray: usize,
    pub peak_lr: f64,
    pub warmup_steps: u64,
    pub decay_rate: f64,
    pub total_steps: u64,
    pub seed: u64,
    pub optimizer: AdamWConfig,
    pub checkpoint_interval: u64,
    pub log_interval: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            objects_per_batch: 4,
            rays_per_object: 256,
            samples_per_ray: 64,
            peak_lr: 1e-4,
            warmup_steps: 2000,
            decay_rate: 0.999904,
            total_steps: 50_000,
            seed: 0,
            optimizer: AdamWConfig::default(),
            checkpoint_interval: 1000,
            log_interval: 50,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |msg: &str| Err(TrainError::BadConfig(msg.to_string()));
        if self.objects_per_batch == 0 || self.rays_per_object == 0 || self.samples_per_ray == 0 {
            return bad("batch sizes must be nonzero");
        }
        if !(self.peak_lr.is_finite() && self.peak_lr > 0.0) {
            return bad("peak_lr must be positive and finite");
        }
        if !(self.decay_rate > 0.0 && self.decay_rate <= 1.0) {
            return bad("decay_rate must lie in (0, 1]");
        }
        if self.checkpoint_interval == 0 || self.log_interval == 0 {
            return bad("intervals must be nonzero");
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("got {predicted} predictions for {target} targets")]
    LengthMismatch { predicted: usize, target: usize },
    #[error("loss became non-finite ({loss}) at step {step}; aborting before the update corrupts the weights")]
    NonFiniteLoss { step: u64, loss: f64 },
    #[error("bad training config: {0}")]
    BadConfig(String),
    #[error(transparent)]
    Render(#[from] RenderError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Sum of squared color errors over all rays and channels. No averaging, so
/// the value scales with the batch.
pub fn loss(predicted: &[[f64; 3]], target: &[[f64; 3]]) -> Result<f64, TrainError> {
    if predicted.len() != target.len() {
        return Err(TrainError::LengthMismatch {
            predicted: predicted.len(),
            target: target.len(),
        });
    }
    let mut total = 0.0;
    for (p, t) in predicted.iter().zip(target) {
        for c in 0..3 {
            let d = p[c] - t[c];
            total += d * d;
        }
    }
    Ok(total)
}

/// Linear ramp from zero across the warmup, then geometric decay from the
/// peak. Both branches give exactly the peak at the warmup boundary.
pub fn lr_schedule(step: u64, cfg: &TrainConfig) -> f64 {
    if step < cfg.warmup_steps {
        cfg.peak_lr * step as f64 / cfg.warmup_steps as f64
    } else {
        cfg.peak_lr * cfg.decay_rate.powf((step - cfg.warmup_steps) as f64)
    }
}

/// One object's slice of a step: rays through a target view's pixels, the
/// colors they should reproduce, and the reference view that conditions them.
pub struct ObjectBatch<'a> {
    pub reference: ReferenceView<'a>,
    pub rays: Vec<Ray>,
    pub targets: Vec<[f64; 3]>,
}

pub struct TrainBatch<'a> {
    pub objects: Vec<ObjectBatch<'a>>,
}

/// Draws the batch for one step: per slot a scene (without replacement when
/// there are enough), a reference view, a target view distinct from it when
/// possible, and uniform pixels of the target. Keyed only by seed and step
/// index, so a resumed run draws the same batches as an uninterrupted one.
pub fn sample_batch<'a>(
    dataset: &'a Dataset,
    cfg: &TrainConfig,
    step: u64,
) -> anyhow::Result<TrainBatch<'a>> {
    anyhow::ensure!(!dataset.scenes.is_empty(), "dataset has no scenes");
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[tag::STEP, step]));
    let n = dataset.scenes.len();
    let scene_ids: Vec<usize> = if n >= cfg.objects_per_batch {
        rand::seq::index::sample(&mut rng, n, cfg.objects_per_batch).into_vec()
    } else {
        (0..cfg.objects_per_batch).map(|_| rng.gen_range(0..n)).collect()
    };
    let mut objects = Vec::with_capacity(scene_ids.len());
    for si in scene_ids {
        let scene = &dataset.scenes[si];
        anyhow::ensure!(!scene.train_views.is_empty(), "scene {} has no training views", scene.id);
        let reference_view = scene.train_views[rng.gen_range(0..scene.train_views.len())];
        let pool: Vec<usize> =
            scene.train_views.iter().copied().filter(|&v| v != reference_view).collect();
        let target_view =
            if pool.is_empty() { reference_view } else { pool[rng.gen_range(0..pool.len())] };
        let reference = ReferenceView::from_scene(scene, reference_view)?;
        let record = &scene.views[target_view];
        let image = record.image()?;
        let mut rays = Vec::with_capacity(cfg.rays_per_object);
        let mut targets = Vec::with_capacity(cfg.rays_per_object);
        for _ in 0..cfg.rays_per_object {
            let x = rng.gen_range(0..image.width);
            let y = rng.gen_range(0..image.height);
            rays.push(camera_ray([x as f64, y as f64], &record.intrinsics, &record.extrinsics));
            targets.push(image.get(x, y));
        }
        objects.push(ObjectBatch { reference, rays, targets });
    }
    Ok(TrainBatch { objects })
}

/// Training always renders stratified, with the sample count the training
/// section chose; everything else comes from the render section.
pub fn training_render_config(train: &TrainConfig, render: &RenderConfig) -> RenderConfig {
    RenderConfig { samples_per_ray: train.samples_per_ray, stratified: true, ..render.clone() }
}

/// Forward pass for one object on an existing tape: condition on the
/// reference view, render the rays, sum squared error against the targets.
pub fn object_loss_on_tape<T: Scalar>(
    tape: &Tape<T>,
    model: &Model<T>,
    bound: &BoundParams,
    object: &ObjectBatch,
    render: &RenderConfig,
    jitter_seed: u64,
) -> Result<Var, RenderError> {
    let cond = condition_on_tape(tape, model, bound, &object.reference)?;
    let out = render_rays_on_tape(tape, model, &cond, &object.rays, render, jitter_seed)?;
    let flat: Vec<f64> = object.targets.iter().flat_map(|c| c.iter().copied()).collect();
    let targets = tape.constant(Tensor::from_real_slice(&[object.rays.len(), 3], &flat));
    let diff = tape.sub(out.pixels, targets);
    Ok(tape.sum_all(tape.mul(diff, diff)))
}

pub struct TrainState<T: Scalar> {
    pub model: Model<T>,
    pub optimizer: AdamW<T>,
    pub step: u64,
}

impl<T: Scalar> TrainState<T> {
    pub fn new(model_cfg: ModelConfig, train: &TrainConfig) -> Result<Self, ModelError> {
        let model = Model::init(model_cfg, train.seed)?;
        let optimizer = AdamW::new(train.optimizer, &model.params);
        Ok(TrainState { model, optimizer, step: 0 })
    }

    pub fn from_checkpoint(ck: Checkpoint<T>) -> Self {
        TrainState { model: ck.model, optimizer: ck.optimizer, step: ck.step }
    }
}

/// The per-object jitter stream for a step. Keyed by step and slot, never by
/// history, which keeps resumed trajectories identical.
pub fn step_jitter_seed(cfg: &TrainConfig, step: u64, object: u64) -> u64 {
    derive_seed(cfg.seed, &[tag::STEP, step, tag::OBJECT, object])
}

/// One optimizer update over a sampled batch. Each object runs
/// forward/backward on its own tape; gradients accumulate by parameter name
/// and apply in a single step at the scheduled rate. A non-finite loss aborts
/// before the optimizer touches the weights.
pub fn train_step<T: Scalar>(
    state: &mut TrainState<T>,
    batch: &TrainBatch,
    train: &TrainConfig,
    render: &RenderConfig,
) -> Result<f64, TrainError> {
    let render = training_render_config(train, render);
    let mut total = 0.0;
    let mut accum: IndexMap<String, Tensor<T>> = IndexMap::new();
    for (oi, object) in batch.objects.iter().enumerate() {
        let tape: Tape<T> = Tape::new();
        let bound = BoundParams::bind(&tape, &state.model.params);
        let seed = step_jitter_seed(train, state.step, oi as u64);
        let loss_var = object_loss_on_tape(&tape, &state.model, &bound, object, &render, seed)?;
        total += tape.value(loss_var).item().to_real();
        let grads = tape.backward(loss_var);
        for (name, g) in bound.grads_by_name(&grads, &state.model.params) {
            match accum.entry(name) {
                Entry::Occupied(mut e) => e.get_mut().add_in_place(&g),
                Entry::Vacant(e) => {
                    e.insert(g);
                }
            }
        }
    }
    if !total.is_finite() {
        return Err(TrainError::NonFiniteLoss { step: state.step, loss: total });
    }
    let lr = lr_schedule(state.step, train);
    state.optimizer.step(&mut state.model.params, &accum, lr);
    state.step += 1;
    Ok(total)
}

pub struct TrainReport {
    pub steps_run: u64,
    pub final_loss: f64,
    pub checkpoint_path: PathBuf,
    pub log_path: PathBuf,
}

/// Runs (or resumes) the loop until `total_steps`, appending `step,lr,loss`
/// rows to train_log.csv and rewriting checkpoint.bin in `out_dir` on every
/// checkpoint interval and at the end.
pub fn train<T: Scalar>(
    dataset: &Dataset,
    model_cfg: ModelConfig,
    train_cfg: &TrainConfig,
    render_cfg: &RenderConfig,
    out_dir: &Path,
    resume: Option<&Path>,
    config_echo: Option<&serde_json::Value>,
) -> anyhow::Result<TrainReport> {
    train_cfg.validate()?;
    model_cfg.validate()?;
    fs::create_dir_all(out_dir)
        .with_context(|| format!("creating output dir {}", out_dir.display()))?;
    let checkpoint_path = out_dir.join("checkpoint.bin");
    let log_path = out_dir.join("train_log.csv");

    let mut state = match resume {
        Some(path) => {
            let ck: Checkpoint<T> = load_checkpoint(path)
                .with_context(|| format!("resuming from {}", path.display()))?;
            anyhow::ensure!(
                ck.model.config == model_cfg,
                "checkpoint was trained with a different model config"
            );
            TrainState::from_checkpoint(ck)
        }
        None => TrainState::new(model_cfg, train_cfg)?,
    };

    let fresh_log = !(resume.is_some() && log_path.exists());
    let mut log = OpenOptions::new()
        .create(true)
        .append(true)
        .truncate(false)
        .open(&log_path)
        .with_context(|| format!("opening {}", log_path.display()))?;
    if fresh_log {
        log.set_len(0)?;
        writeln!(log, "step,lr,loss")?;
    }

    let mut last_loss = f64::NAN;
    let mut saved_at = None;
    while state.step < train_cfg.total_steps {
        let step = state.step;
        let batch = sample_batch(dataset, train_cfg, step)?;
        let lr = lr_schedule(step, train_cfg);
        let loss = train_step(&mut state, &batch, train_cfg, render_cfg)
            .with_context(|| format!("training step {step}"))?;
        last_loss = loss;
        if step % train_cfg.log_interval == 0 || state.step == train_cfg.total_steps {
            writeln!(log, "{step},{lr},{loss}")?;
        }
        if state.step % train_cfg.checkpoint_interval == 0 {
            save_checkpoint(
                &checkpoint_path,
                &state.model,
                &state.optimizer,
                train_cfg,
                state.step,
                config_echo,
            )?;
            saved_at = Some(state.step);
        }
    }
    if saved_at != Some(state.step) {
        save_checkpoint(
            &checkpoint_path,
            &state.model,
            &state.optimizer,
            train_cfg,
            state.step,
            config_echo,
        )?;
    }
    log.flush()?;
    Ok(TrainReport { steps_run: state.step, final_loss: last_loss, checkpoint_path, log_path })
}
