//! The localization network: backbone, heads, parameters.

pub mod backbone;
pub mod heads;
mod params;

pub use backbone::{
    build_pyramid, embed, transformer_block, window_mask, windowed_msa, BackboneConfig, Level,
    Pyramid,
};
pub use heads::{
    classify, generate_points, generate_points_for, regress, run_heads, HeadConfig, HeadOutput,
    LevelHead, LevelPoints, LevelValues, PointSet,
};
pub use params::{Bound, Init, ParamSpec, ParamStore, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

use serde::{Deserialize, Serialize};

use crate::data::FeatureSequence;
use crate::error::{Result, TslError};
use crate::tensor::{Tape, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Width of the fused input features (visual + audio).
    pub input_dim: usize,
    pub num_classes: usize,
    pub backbone: BackboneConfig,
    pub head: HeadConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            input_dim: 1408 + 256,
            num_classes: crate::data::DEFAULT_NUM_CLASSES,
            backbone: BackboneConfig::default(),
            head: HeadConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn desk(input_dim: usize, num_classes: usize) -> Self {
        ModelConfig {
            input_dim,
            num_classes,
            backbone: BackboneConfig::desk(),
            head: HeadConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.num_classes == 0 {
            return Err(TslError::Config(
                "input_dim and num_classes must be positive".into(),
            ));
        }
        self.backbone.validate()?;
        self.head.validate()
    }

    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let mut specs = self.backbone.param_specs(self.input_dim);
        specs.extend(
            self.head
                .param_specs(self.backbone.d_model, self.num_classes),
        );
        specs
    }
}

/// Everything one forward pass leaves on the tape.
pub struct Forward<'a> {
    pub params: Bound<'a>,
    pub pyramid: Pyramid,
    pub heads: HeadOutput,
    pub points: PointSet,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Localizer {
    config: ModelConfig,
    params: ParamStore,
}

impl Localizer {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let params = ParamStore::initialize(&config.param_specs(), seed);
        Ok(Localizer { config, params })
    }

    /// Wraps existing parameters after checking names and shapes.
    pub fn from_params(config: ModelConfig, params: ParamStore) -> Result<Self> {
        config.validate()?;
        let reference = ParamStore::initialize(&config.param_specs(), 0);
        reference.check_compatible(&params)?;
        Ok(Localizer { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Forward pass on a `T × input_dim` tensor with a validity mask.
    pub fn forward_tensor<'a>(
        &'a self,
        tape: &mut Tape,
        input: Tensor,
        mask: &[bool],
        trainable: bool,
    ) -> Result<Forward<'a>> {
        if input.rank() != 2 || input.cols() != self.config.input_dim {
            return Err(TslError::Config(format!(
                "input has shape {:?}, model expects width {}",
                input.shape(),
                self.config.input_dim
            )));
        }
        let params = self.params.bind(tape, trainable);
        let x = tape.constant(input);
        let eps = self.config.backbone.ln_eps;
        let pyramid = build_pyramid(tape, &params, &self.config.backbone, x, mask)?;
        let heads = run_heads(tape, &params, &pyramid, &self.config.head, eps)?;
        let points = generate_points(&pyramid, self.config.head.range_base);
        Ok(Forward {
            params,
            pyramid,
            heads,
            points,
        })
    }

    pub fn forward<'a>(
        &'a self,
        tape: &mut Tape,
        fused: &FeatureSequence,
        trainable: bool,
    ) -> Result<Forward<'a>> {
        if fused.dim() != self.config.input_dim {
            return Err(TslError::Config(format!(
                "{}: feature width {} does not match model input_dim {}",
                fused.video_id(),
                fused.dim(),
                self.config.input_dim
            )));
        }
        let mask = vec![true; fused.len()];
        self.forward_tensor(tape, fused.to_tensor(), &mask, trainable)
    }
}
