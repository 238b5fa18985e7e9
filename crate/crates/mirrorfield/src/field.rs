//! The radiance field: sinusoidal input encodings plus an MLP whose weights
//! arrive as one flat vector, so generated and directly trained weights run
//! through the same code.

use std::f64::consts::PI;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::diff::{gemm_nn, sigmoid_stable, softplus_stable, Scalar, Tape, Tensor, Var};
use crate::model::ModelError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PositionalEncodingSpec {
    pub num_frequencies: usize,
    pub include_input: bool,
}

impl PositionalEncodingSpec {
    pub fn encoded_dim(&self, input_dim: usize) -> usize {
        let base = if self.include_input { input_dim } else { 0 };
        base + 2 * input_dim * self.num_frequencies
    }
}

fn band_freq(j: usize) -> f64 {
    (2.0f64).powi(j as i32) * PI
}

/// Optionally the raw vector, then per band j the full sin block followed by
/// the full cos block at frequency 2^j * pi.
pub fn positional_encode(v: &[f64], spec: &PositionalEncodingSpec) -> Vec<f64> {
    let mut out = Vec::with_capacity(spec.encoded_dim(v.len()));
    if spec.include_input {
        out.extend_from_slice(v);
    }
    for j in 0..spec.num_frequencies {
        let freq = band_freq(j);
        out.extend(v.iter().map(|&x| (x * freq).sin()));
        out.extend(v.iter().map(|&x| (x * freq).cos()));
    }
    out
}

/// Row-wise tape counterpart of `positional_encode`: [B, D] -> [B, encoded].
pub fn positional_encode_tape<T: Scalar>(
    tape: &Tape<T>,
    v: Var,
    spec: &PositionalEncodingSpec,
) -> Var {
    assert!(spec.encoded_dim(1) > 0, "encoding must keep at least one channel");
    let mut parts = Vec::with_capacity(1 + 2 * spec.num_frequencies);
    if spec.include_input {
        parts.push(v);
    }
    for j in 0..spec.num_frequencies {
        let scaled = tape.scale(v, T::from_real(band_freq(j)));
        parts.push(tape.sin(scaled));
        parts.push(tape.cos(scaled));
    }
    if parts.len() == 1 {
        parts[0]
    } else {
        tape.concat_cols(&parts)
    }
}

/// Shape of a flat weight vector: (fan_in, fan_out) per linear layer, stored
/// row-major weights followed by biases, trunk layers first. Layers past the
/// trunk are heads that all read the final trunk activation.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FieldLayout {
    layers: Vec<(usize, usize)>,
    trunk_layers: usize,
}

impl FieldLayout {
    pub fn new(layers: Vec<(usize, usize)>, trunk_layers: usize) -> Result<Self, ModelError> {
        if layers.is_empty() || trunk_layers == 0 || trunk_layers > layers.len() {
            return Err(ModelError::BadLayout(format!(
                "{} layers with trunk {trunk_layers}",
                layers.len()
            )));
        }
        if layers.iter().any(|&(fi, fo)| fi == 0 || fo == 0) {
            return Err(ModelError::BadLayout("zero-width layer".into()));
        }
        for j in 0..trunk_layers - 1 {
            if layers[j + 1].0 != layers[j].1 {
                return Err(ModelError::BadLayout(format!(
                    "trunk layer {} consumes {} values but layer {} produces {}",
                    j + 1,
                    layers[j + 1].0,
                    j,
                    layers[j].1
                )));
            }
        }
        let trunk_out = layers[trunk_layers - 1].1;
        for (h, &(fi, _)) in layers.iter().enumerate().skip(trunk_layers) {
            if fi != trunk_out {
                return Err(ModelError::BadLayout(format!(
                    "head {h} consumes {fi} values but the trunk produces {trunk_out}"
                )));
            }
        }
        Ok(FieldLayout { layers, trunk_layers })
    }

    pub fn layers(&self) -> &[(usize, usize)] {
        &self.layers
    }

    pub fn trunk_layers(&self) -> usize {
        self.trunk_layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].0
    }

    /// Flat length: sum of (fan_in + 1) * fan_out over all layers.
    pub fn total_len(&self) -> usize {
        self.layers.iter().map(|&(fi, fo)| (fi + 1) * fo).sum()
    }

    /// Offset of a layer's weights in the flat vector; its bias follows at
    /// offset + fan_in * fan_out.
    pub fn offset_of(&self, layer: usize) -> usize {
        self.layers[..layer].iter().map(|&(fi, fo)| (fi + 1) * fo).sum()
    }
}

/// Fresh fields start as a soft solid: carving empty space away has healthy
/// softplus gradients everywhere, while growing density back from an empty
/// field does not (the activation is flat there). Against a bright background
/// an empty start is a local optimum that renders background everywhere and
/// never recovers.
pub const DENSITY_BIAS_INIT: f64 = 1.0;

/// Standard radiance shape: `depth` hidden trunk layers of `width`, then a
/// scalar density head and a 3-channel color head off the trunk output.
pub fn radiance_layout(input_dim: usize, width: usize, depth: usize) -> FieldLayout {
    assert!(input_dim > 0 && width > 0 && depth > 0);
    let mut layers = vec![(input_dim, width)];
    layers.extend(std::iter::repeat((width, width)).take(depth - 1));
    layers.push((width, 1));
    layers.push((width, 3));
    FieldLayout::new(layers, depth).expect("radiance layout is well formed")
}

/// A flat weight vector paired with its layout.
#[derive(Clone, Debug)]
pub struct FieldParams<T> {
    pub values: Tensor<T>,
    pub layout: FieldLayout,
}

impl<T: Scalar> FieldParams<T> {
    pub fn new(values: Tensor<T>, layout: FieldLayout) -> Result<Self, ModelError> {
        if values.len() != layout.total_len() {
            return Err(ModelError::ThetaLen { got: values.len(), want: layout.total_len() });
        }
        Ok(FieldParams { values, layout })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RadianceSample {
    pub color: [f64; 3],
    pub density: f64,
}

fn check_radiance_heads(layout: &FieldLayout) -> Result<(), ModelError> {
    let t = layout.trunk_layers();
    let ok = layout.layers().len() == t + 2
        && layout.layers()[t].1 == 1
        && layout.layers()[t + 1].1 == 3;
    if ok {
        Ok(())
    } else {
        Err(ModelError::BadLayout(
            "radiance evaluation needs a scalar density head then a 3-channel color head".into(),
        ))
    }
}

fn check_forward_shapes<T: Scalar>(
    theta: &[usize],
    inputs: &[usize],
    layout: &FieldLayout,
) -> Result<(), ModelError> {
    check_radiance_heads(layout)?;
    let l = layout.total_len();
    if theta != [1, l] {
        return Err(ModelError::ThetaLen { got: theta.iter().product(), want: l });
    }
    if inputs.len() != 2 || inputs[1] != layout.input_dim() {
        return Err(ModelError::InputDim {
            got: *inputs.last().unwrap_or(&0),
            want: layout.input_dim(),
        });
    }
    Ok(())
}

/// Batched field evaluation on the tape. theta is a [1, l] row, inputs are
/// [B, input_dim]; returns ([B, 1] density, [B, 3] color), both after their
/// range maps. Differentiable w.r.t. theta and inputs.
pub fn field_forward_tape<T: Scalar>(
    tape: &Tape<T>,
    theta: Var,
    layout: &FieldLayout,
    inputs: Var,
) -> Result<(Var, Var), ModelError> {
    check_forward_shapes::<T>(&tape.shape(theta), &tape.shape(inputs), layout)?;
    let mut offset = 0;
    let mut linears = Vec::with_capacity(layout.layers().len());
    for &(fan_in, fan_out) in layout.layers() {
        let w = tape.reshape(tape.slice_cols(theta, offset, fan_in * fan_out), &[fan_in, fan_out]);
        offset += fan_in * fan_out;
        let b = tape.slice_cols(theta, offset, fan_out);
        offset += fan_out;
        linears.push((w, b));
    }
    let mut h = inputs;
    for &(w, b) in &linears[..layout.trunk_layers()] {
        h = tape.softplus(tape.add_row(tape.matmul(h, w), b));
    }
    let (dw, db) = linears[layout.trunk_layers()];
    let density = tape.softplus(tape.add_row(tape.matmul(h, dw), db));
    let (cw, cb) = linears[layout.trunk_layers() + 1];
    let color = tape.sigmoid(tape.add_row(tape.matmul(h, cw), cb));
    Ok((density, color))
}

/// Tape-free twin of `field_forward_tape`, same arithmetic step for step.
pub fn field_forward<T: Scalar>(
    theta: &Tensor<T>,
    layout: &FieldLayout,
    inputs: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>), ModelError> {
    check_forward_shapes::<T>(theta.shape(), inputs.shape(), layout)?;
    let mut offset = 0;
    let mut linears = Vec::with_capacity(layout.layers().len());
    for &(fan_in, fan_out) in layout.layers() {
        let w = Tensor::from_vec(
            &[fan_in, fan_out],
            theta.data()[offset..offset + fan_in * fan_out].to_vec(),
        );
        offset += fan_in * fan_out;
        let b = theta.data()[offset..offset + fan_out].to_vec();
        offset += fan_out;
        linears.push((w, b));
    }
    let linear = |h: &Tensor<T>, w: &Tensor<T>, b: &[T]| {
        let mut out = gemm_nn(h, w);
        let n = b.len();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v = *v + b[i % n];
        }
        out
    };
    let mut h = inputs.clone();
    for (w, b) in &linears[..layout.trunk_layers()] {
        h = linear(&h, w, b).map(softplus_stable);
    }
    let (dw, db) = &linears[layout.trunk_layers()];
    let density = linear(&h, dw, db).map(softplus_stable);
    let (cw, cb) = &linears[layout.trunk_layers() + 1];
    let color = linear(&h, cw, cb).map(sigmoid_stable);
    Ok((density, color))
}

/// Single-point evaluation: encodes the position and view direction, appends
/// the conditioning features, and runs the MLP.
pub fn query_field(
    theta: &FieldParams<f64>,
    pos_spec: &PositionalEncodingSpec,
    dir_spec: &PositionalEncodingSpec,
    x: &Vector3<f64>,
    d: &Vector3<f64>,
    local: &[f64],
    symmetric: &[f64],
) -> Result<RadianceSample, ModelError> {
    debug_assert!((d.norm() - 1.0).abs() < 1e-6, "view direction must be unit length");
    let mut row = positional_encode(x.as_slice(), pos_spec);
    row.extend(positional_encode(d.as_slice(), dir_spec));
    row.extend_from_slice(local);
    row.extend_from_slice(symmetric);
    if row.len() != theta.layout.input_dim() {
        return Err(ModelError::InputDim { got: row.len(), want: theta.layout.input_dim() });
    }
    let inputs = Tensor::from_vec(&[1, row.len()], row);
    let (density, color) = field_forward(&theta.values, &theta.layout, &inputs)?;
    Ok(RadianceSample {
        color: [color.data()[0], color.data()[1], color.data()[2]],
        density: density.item(),
    })
}
