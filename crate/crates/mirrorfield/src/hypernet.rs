//! Weight generator: a small MLP that maps a reference view's latent code to
//! the radiance field's entire flat weight vector, one linear head per field
//! layer off a shared trunk.

use rand_chacha::ChaCha8Rng;

use crate::diff::{Scalar, Tape, Tensor, Var};
use crate::field::{FieldLayout, FieldParams, DENSITY_BIAS_INIT};
use crate::model::{ModelConfig, ModelError};
use crate::params::{uniform, uniform_fan_in, BoundParams, ParamSet};

pub fn init_params<T: Scalar>(
    params: &mut ParamSet<T>,
    cfg: &ModelConfig,
    layout: &FieldLayout,
    rng: &mut ChaCha8Rng,
) {
    let k = cfg.latent_dim;
    let w = cfg.hypernet_width;
    params.insert("hyper.trunk0.weight", uniform_fan_in::<T>(&[k, w], k, rng));
    params.insert("hyper.trunk0.bias", uniform_fan_in::<T>(&[w], k, rng));
    params.insert("hyper.trunk1.weight", uniform_fan_in::<T>(&[w, w], w, rng));
    params.insert("hyper.trunk1.bias", uniform_fan_in::<T>(&[w], w, rng));
    for (j, &(fan_in, fan_out)) in layout.layers().iter().enumerate() {
        let len = (fan_in + 1) * fan_out;
        // Biases carry a plain fan-in init of the target layer; the matrix is
        // damped further so freshly generated fields start close to that
        // baseline instead of saturating.
        let bound = 0.1 / ((w as f64) * fan_in as f64).sqrt();
        params.insert(format!("hyper.head{j}.weight"), uniform::<T>(&[w, len], bound, rng));
        let mut bias = uniform_fan_in::<T>(&[len], fan_in, rng);
        if j == layout.trunk_layers() {
            // Density head: its generated bias is the last slot (weights
            // precede the bias in the flat segment).
            let last = bias.data_mut().last_mut().unwrap();
            *last = *last + T::from_real(DENSITY_BIAS_INIT);
        }
        params.insert(format!("hyper.head{j}.bias"), bias);
    }
}

/// z: [1, k] -> flat field weights [1, l], trunk-layer weights first, each
/// layer as row-major matrix then bias. Differentiable w.r.t. z and all
/// generator parameters.
pub fn generate_field_params_tape<T: Scalar>(
    tape: &Tape<T>,
    params: &BoundParams,
    cfg: &ModelConfig,
    layout: &FieldLayout,
    z: Var,
) -> Result<Var, ModelError> {
    let zs = tape.shape(z);
    if zs != [1, cfg.latent_dim] {
        return Err(ModelError::LatentDim {
            got: zs.iter().product(),
            want: cfg.latent_dim,
        });
    }
    let mut h = z;
    for t in 0..2 {
        let w = params.var(&format!("hyper.trunk{t}.weight"));
        let b = params.var(&format!("hyper.trunk{t}.bias"));
        h = tape.softplus(tape.add_row(tape.matmul(h, w), b));
    }
    let heads: Vec<Var> = (0..layout.layers().len())
        .map(|j| {
            let w = params.var(&format!("hyper.head{j}.weight"));
            let b = params.var(&format!("hyper.head{j}.bias"));
            tape.add_row(tape.matmul(h, w), b)
        })
        .collect();
    Ok(if heads.len() == 1 { heads[0] } else { tape.concat_cols(&heads) })
}

/// Tape-free wrapper: same forward pass on a scratch tape, packaged with its
/// layout.
pub fn generate_field_params<T: Scalar>(
    z: &Tensor<T>,
    params: &ParamSet<T>,
    cfg: &ModelConfig,
    layout: &FieldLayout,
) -> Result<FieldParams<T>, ModelError> {
    let tape: Tape<T> = Tape::new();
    let bound = BoundParams::bind_const(&tape, params);
    let zv = tape.constant(z.clone());
    let theta = generate_field_params_tape(&tape, &bound, cfg, layout, zv)?;
    FieldParams::new(tape.value(theta).as_ref().clone(), layout.clone())
}
