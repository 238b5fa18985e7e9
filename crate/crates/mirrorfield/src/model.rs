//! Model configuration and the parameter container tying the encoder,
//! weight generator, and radiance field together.

use std::cell::Cell;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diff::{Scalar, Tensor};
use crate::field::{radiance_layout, FieldLayout, PositionalEncodingSpec, DENSITY_BIAS_INIT};
use crate::params::{uniform_fan_in, ParamSet};
use crate::seeds::{derive_seed, tag};
use crate::{encoder, hypernet};

/// Which conditioning inputs reach the field. Each variant drops one piece
/// of the full pipeline so their contributions can be measured in isolation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationMode {
    /// Latent code only; the feature volume is never read.
    GlobalOnly,
    /// Latent code plus the feature at the point's own reprojection.
    GlobalLocal,
    /// Latent code plus local and mirrored features.
    Full,
    /// Full conditioning inputs, but the field weights are ordinary trained
    /// parameters instead of generated ones.
    NoHypernet,
}

impl AblationMode {
    pub fn uses_local_features(self) -> bool {
        !matches!(self, AblationMode::GlobalOnly)
    }

    pub fn uses_symmetric_features(self) -> bool {
        matches!(self, AblationMode::Full | AblationMode::NoHypernet)
    }

    pub fn uses_hypernet(self) -> bool {
        !matches!(self, AblationMode::NoHypernet)
    }

    pub fn name(self) -> &'static str {
        match self {
            AblationMode::GlobalOnly => "global_only",
            AblationMode::GlobalLocal => "global_local",
            AblationMode::Full => "full",
            AblationMode::NoHypernet => "no_hypernet",
        }
    }
}

impl std::str::FromStr for AblationMode {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, ModelError> {
        match s {
            "global_only" => Ok(AblationMode::GlobalOnly),
            "global_local" => Ok(AblationMode::GlobalLocal),
            "full" => Ok(AblationMode::Full),
            "no_hypernet" => Ok(AblationMode::NoHypernet),
            _ => Err(ModelError::BadConfig(format!(
                "unknown ablation mode {s:?}; expected global_only, global_local, full, or no_hypernet"
            ))),
        }
    }
}

impl std::fmt::Display for AblationMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Reference images are square with this side length.
    pub image_size: usize,
    /// Output channels of the four stride-2 encoder blocks.
    pub encoder_channels: [usize; 4],
    /// Width of the global latent code.
    pub latent_dim: usize,
    /// Hidden width of the weight-generator trunk.
    pub hypernet_width: usize,
    /// Hidden width of the radiance field.
    pub field_width: usize,
    /// Number of hidden layers in the radiance field trunk.
    pub field_depth: usize,
    /// Frequency bands for sample positions.
    pub position_frequencies: usize,
    /// Frequency bands for view directions.
    pub direction_frequencies: usize,
    /// Whether raw coordinates ride along with their sinusoids.
    pub include_input: bool,
    pub ablation: AblationMode,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            image_size: 64,
            encoder_channels: [8, 16, 16, 24],
            latent_dim: 128,
            hypernet_width: 256,
            field_width: 128,
            field_depth: 4,
            position_frequencies: 6,
            direction_frequencies: 4,
            include_input: true,
            ablation: AblationMode::Full,
        }
    }
}

impl ModelConfig {
    /// Channels of the stacked multi-scale feature volume.
    pub fn feature_channels(&self) -> usize {
        self.encoder_channels.iter().sum()
    }

    pub fn position_spec(&self) -> PositionalEncodingSpec {
        PositionalEncodingSpec {
            num_frequencies: self.position_frequencies,
            include_input: self.include_input,
        }
    }

    pub fn direction_spec(&self) -> PositionalEncodingSpec {
        PositionalEncodingSpec {
            num_frequencies: self.direction_frequencies,
            include_input: self.include_input,
        }
    }

    /// Width of the field's first layer: encoded position, encoded direction,
    /// then as many feature slots as the ablation keeps.
    pub fn field_input_dim(&self) -> usize {
        let n = self.feature_channels();
        let slots = match self.ablation {
            AblationMode::GlobalOnly => 0,
            AblationMode::GlobalLocal => 1,
            AblationMode::Full | AblationMode::NoHypernet => 2,
        };
        self.position_spec().encoded_dim(3) + self.direction_spec().encoded_dim(3) + slots * n
    }

    pub fn field_layout(&self) -> FieldLayout {
        radiance_layout(self.field_input_dim(), self.field_width, self.field_depth)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.image_size < 16 || self.image_size % 16 != 0 {
            return Err(ModelError::BadConfig(format!(
                "image_size {} must be a multiple of 16 (four halvings)",
                self.image_size
            )));
        }
        if self.encoder_channels.iter().any(|&c| c == 0) {
            return Err(ModelError::BadConfig("encoder channels must be nonzero".into()));
        }
        let positive = [
            ("latent_dim", self.latent_dim),
            ("hypernet_width", self.hypernet_width),
            ("field_width", self.field_width),
            ("field_depth", self.field_depth),
            ("position_frequencies", self.position_frequencies),
            ("direction_frequencies", self.direction_frequencies),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(ModelError::BadConfig(format!("{name} must be nonzero")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("reference image is {got_h}x{got_w}x{got_c}, expected {want}x{want}x3")]
    ImageSize { got_h: usize, got_w: usize, got_c: usize, want: usize },
    #[error("latent code has width {got}, expected {want}")]
    LatentDim { got: usize, want: usize },
    #[error("field input has width {got}, layout expects {want}")]
    InputDim { got: usize, want: usize },
    #[error("flat weight vector has length {got}, layout expects {want}")]
    ThetaLen { got: usize, want: usize },
    #[error("invalid field layout: {0}")]
    BadLayout(String),
    #[error("invalid model config: {0}")]
    BadConfig(String),
}

/// Parameters plus the config that shaped them. The counters observe how the
/// conditioning inputs are actually used: ablations that claim to skip a path
/// must leave its counter untouched.
#[derive(Debug)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub params: ParamSet<T>,
    /// Point-feature reads issued against encoder feature volumes.
    pub feature_reads: Cell<u64>,
    /// Invocations of the field-weight generator.
    pub hypernet_calls: Cell<u64>,
}

impl<T: Scalar> Model<T> {
    /// Seeded construction. All draws come from one stream in a fixed module
    /// order, so equal seeds give bitwise-equal parameters.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[tag::INIT]));
        let mut params = ParamSet::new();
        encoder::init_params(&mut params, &config, &mut rng);
        let layout = config.field_layout();
        if config.ablation.uses_hypernet() {
            hypernet::init_params(&mut params, &config, &layout, &mut rng);
        } else {
            // Directly trained field weights, flattened the same way the
            // generator would emit them and scaled per target layer.
            let mut theta: Vec<T> = Vec::with_capacity(layout.total_len());
            for (j, &(fan_in, fan_out)) in layout.layers().iter().enumerate() {
                let w: Tensor<T> = uniform_fan_in(&[fan_in * fan_out], fan_in, &mut rng);
                theta.extend_from_slice(w.data());
                let mut b: Tensor<T> = uniform_fan_in(&[fan_out], fan_in, &mut rng);
                if j == layout.trunk_layers() {
                    let last = b.data_mut().last_mut().unwrap();
                    *last = *last + T::from_real(DENSITY_BIAS_INIT);
                }
                theta.extend_from_slice(b.data());
            }
            params.insert("theta", Tensor::from_vec(&[1, layout.total_len()], theta));
        }
        Ok(Model::from_parts(config, params))
    }

    /// Wraps already-built parameters (checkpoint restore).
    pub fn from_parts(config: ModelConfig, params: ParamSet<T>) -> Self {
        Model {
            config,
            params,
            feature_reads: Cell::new(0),
            hypernet_calls: Cell::new(0),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn input_width_tracks_the_ablation() {
        let mut cfg = ModelConfig::default();
        // 3 + 2*3*6 = 39 position channels, 3 + 2*3*4 = 27 direction channels
        assert_eq!(cfg.field_input_dim(), 39 + 27 + 2 * 64);
        cfg.ablation = AblationMode::GlobalOnly;
        assert_eq!(cfg.field_input_dim(), 66);
        cfg.ablation = AblationMode::GlobalLocal;
        assert_eq!(cfg.field_input_dim(), 130);
        cfg.ablation = AblationMode::NoHypernet;
        assert_eq!(cfg.field_input_dim(), 194);
    }

    #[test]
    fn init_is_deterministic_and_mode_dependent() {
        let cfg = ModelConfig::default();
        let a: Model<f32> = Model::init(cfg, 7).unwrap();
        let b: Model<f32> = Model::init(cfg, 7).unwrap();
        assert_eq!(a.params.len(), b.params.len());
        for ((na, ta), (nb, tb)) in a.params.iter().zip(b.params.iter()) {
            assert_eq!(na, nb);
            assert_eq!(ta.data(), tb.data(), "parameter {na} differs across runs");
        }
        let c: Model<f32> = Model::init(cfg, 8).unwrap();
        let same = a
            .params
            .iter()
            .zip(c.params.iter())
            .all(|((_, ta), (_, tc))| ta.data() == tc.data());
        assert!(!same, "different seeds must give different draws");
    }

    #[test]
    fn direct_field_weights_replace_the_generator() {
        let cfg = ModelConfig { ablation: AblationMode::NoHypernet, ..ModelConfig::default() };
        let m: Model<f64> = Model::init(cfg, 1).unwrap();
        assert!(m.params.contains("theta"));
        assert!(!m.params.contains("hyper.trunk0.weight"));
        assert_eq!(m.params.get("theta").shape(), &[1, cfg.field_layout().total_len()]);

        let full: Model<f64> = Model::init(ModelConfig::default(), 1).unwrap();
        assert!(full.params.contains("hyper.trunk0.weight"));
        assert!(!full.params.contains("theta"));
    }

    #[test]
    fn bad_configs_are_rejected() {
        let mut cfg = ModelConfig { image_size: 60, ..ModelConfig::default() };
        assert!(Model::<f32>::init(cfg, 0).is_err());
        cfg.image_size = 64;
        cfg.field_depth = 0;
        assert!(Model::<f32>::init(cfg, 0).is_err());
    }

    #[test]
    fn mode_names_round_trip() {
        for mode in [
            AblationMode::GlobalOnly,
            AblationMode::GlobalLocal,
            AblationMode::Full,
            AblationMode::NoHypernet,
        ] {
            let parsed: AblationMode = mode.name().parse().unwrap();
            assert_eq!(parsed, mode);
        }
        assert!("fancy".parse::<AblationMode>().is_err());
    }
}
