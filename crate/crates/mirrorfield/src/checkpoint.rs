//! Self-describing binary checkpoints. A JSON header names every array and
//! snapshots the configs; raw little-endian payloads follow in header order,
//! so a file written on one machine reloads bit-exactly on any other.

use std::fs;
use std::mem::size_of;
use std::path::Path;

use anyhow::{bail, ensure, Context};
use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::diff::{Scalar, Tensor};
use crate::model::{Model, ModelConfig};
use crate::optim::{AdamW, AdamWConfig};
use crate::params::ParamSet;
use crate::trainer::TrainConfig;

const MAGIC: &[u8; 8] = b"MFLDCKPT";
const VERSION: u32 = 1;

fn dtype_name<T: Scalar>() -> &'static str {
    match size_of::<T>() {
        4 => "f32",
        8 => "f64",
        other => panic!("unexpected scalar width {other}"),
    }
}

#[derive(Serialize, Deserialize)]
struct ArrayInfo {
    name: String,
    role: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    version: u32,
    dtype: String,
    step: u64,
    optimizer_steps: u64,
    optimizer: AdamWConfig,
    model: ModelConfig,
    train: TrainConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    config_echo: Option<serde_json::Value>,
    arrays: Vec<ArrayInfo>,
}

/// Everything needed to continue a run or render from it.
pub struct Checkpoint<T: Scalar> {
    pub step: u64,
    pub model: Model<T>,
    pub optimizer: AdamW<T>,
    pub train: TrainConfig,
    pub config_echo: Option<serde_json::Value>,
}

fn write_tensor<T: Scalar>(out: &mut Vec<u8>, t: &Tensor<T>) {
    // to_real is exact for both scalar widths, so the stored bits round-trip.
    if size_of::<T>() == 4 {
        for v in t.data() {
            out.extend_from_slice(&(v.to_real() as f32).to_le_bytes());
        }
    } else {
        for v in t.data() {
            out.extend_from_slice(&v.to_real().to_le_bytes());
        }
    }
}

fn read_tensor<T: Scalar>(
    bytes: &[u8],
    pos: &mut usize,
    shape: &[usize],
) -> anyhow::Result<Tensor<T>> {
    let n: usize = shape.iter().product();
    let need = n.checked_mul(size_of::<T>()).context("array size overflows")?;
    ensure!(bytes.len() - *pos >= need, "checkpoint payload is truncated");
    let chunk = &bytes[*pos..*pos + need];
    let mut data = Vec::with_capacity(n);
    if size_of::<T>() == 4 {
        for c in chunk.chunks_exact(4) {
            data.push(T::from_real(f32::from_le_bytes(c.try_into().unwrap()) as f64));
        }
    } else {
        for c in chunk.chunks_exact(8) {
            data.push(T::from_real(f64::from_le_bytes(c.try_into().unwrap())));
        }
    }
    *pos += need;
    Ok(Tensor::from_vec(shape, data))
}

pub fn save_checkpoint<T: Scalar>(
    path: &Path,
    model: &Model<T>,
    optimizer: &AdamW<T>,
    train: &TrainConfig,
    step: u64,
    config_echo: Option<&serde_json::Value>,
) -> anyhow::Result<()> {
    let mut arrays = Vec::new();
    let mut payload = Vec::new();
    for (name, t) in model.params.iter() {
        arrays.push(ArrayInfo { name: name.to_string(), role: "param".into(), shape: t.shape().to_vec() });
        write_tensor(&mut payload, t);
    }
    for (name, t) in &optimizer.m {
        arrays.push(ArrayInfo { name: name.clone(), role: "adam_m".into(), shape: t.shape().to_vec() });
        write_tensor(&mut payload, t);
    }
    for (name, t) in &optimizer.v {
        arrays.push(ArrayInfo { name: name.clone(), role: "adam_v".into(), shape: t.shape().to_vec() });
        write_tensor(&mut payload, t);
    }
    let header = Header {
        version: VERSION,
        dtype: dtype_name::<T>().to_string(),
        step,
        optimizer_steps: optimizer.step_count,
        optimizer: optimizer.cfg,
        model: model.config.clone(),
        train: train.clone(),
        config_echo: config_echo.cloned(),
        arrays,
    };
    let header_bytes = serde_json::to_vec(&header).context("encoding checkpoint header")?;
    let mut out = Vec::with_capacity(12 + header_bytes.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header_bytes.len() as u32).to_le_bytes());
    out.extend_from_slice(&header_bytes);
    out.extend_from_slice(&payload);
    // Write then rename so an interrupted save never leaves a torn file.
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, &out).with_context(|| format!("writing {}", tmp.display()))?;
    fs::rename(&tmp, path).with_context(|| format!("moving checkpoint to {}", path.display()))?;
    Ok(())
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> anyhow::Result<Checkpoint<T>> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    ensure!(
        bytes.len() >= 12 && &bytes[..8] == MAGIC,
        "{} is not a checkpoint file",
        path.display()
    );
    let hlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    ensure!(bytes.len() - 12 >= hlen, "checkpoint header is truncated");
    let header: Header =
        serde_json::from_slice(&bytes[12..12 + hlen]).context("parsing checkpoint header")?;
    ensure!(header.version == VERSION, "unsupported checkpoint version {}", header.version);
    ensure!(
        header.dtype == dtype_name::<T>(),
        "checkpoint holds {} values but {} was requested",
        header.dtype,
        dtype_name::<T>()
    );

    let mut pos = 12 + hlen;
    let mut params = ParamSet::new();
    let mut m = IndexMap::new();
    let mut v = IndexMap::new();
    for info in &header.arrays {
        let t: Tensor<T> = read_tensor(&bytes, &mut pos, &info.shape)
            .with_context(|| format!("reading array {}", info.name))?;
        match info.role.as_str() {
            "param" => params.insert(&info.name, t),
            "adam_m" => {
                m.insert(info.name.clone(), t);
            }
            "adam_v" => {
                v.insert(info.name.clone(), t);
            }
            other => bail!("unknown array role {other:?} in checkpoint"),
        }
    }
    ensure!(pos == bytes.len(), "checkpoint has {} trailing bytes", bytes.len() - pos);

    let model = Model::from_parts(header.model.clone(), params);
    for (name, t) in model.params.iter() {
        for (moments, label) in [(&m, "first"), (&v, "second")] {
            let mt = moments
                .get(name)
                .with_context(|| format!("checkpoint is missing {label}-moment state for {name}"))?;
            ensure!(mt.shape() == t.shape(), "{label}-moment shape mismatch for {name}");
        }
    }
    let optimizer =
        AdamW { cfg: header.optimizer, step_count: header.optimizer_steps, m, v };
    Ok(Checkpoint {
        step: header.step,
        model,
        optimizer,
        train: header.train,
        config_echo: header.config_echo,
    })
}
