use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::model::ModelDims;
use crate::mog::SamplingMode;
use crate::synth::SceneSpec;

pub const PATCH: usize = 4;
pub const HEADS: usize = 4;
pub const TEXT_BLOCKS: usize = 2;
pub const IMAGE_BLOCKS: usize = 2;
pub const DECODER_BLOCKS: usize = 5;
pub const MLP_RATIO: usize = 2;

/// Everything that defines a training run.
///
/// JSON keys match the field names below; `K`, `N`, `L` and `C` are upper
/// case. Missing keys take the defaults, unknown keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    #[serde(rename = "K")]
    pub k: usize,
    #[serde(rename = "N")]
    pub n: usize,
    #[serde(rename = "L")]
    pub l: usize,
    pub d: usize,
    #[serde(rename = "C")]
    pub classes: usize,
    pub steps: u64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weights: LossWeights,
    pub sampling_mode: SamplingMode,
    pub seed: u64,
    pub eval_every: u64,
    pub heldout_scenes: usize,
    pub scene: SceneSpec,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            k: 3,
            n: 15,
            l: 8,
            d: 64,
            classes: 6,
            steps: 2000,
            batch_size: 8,
            learning_rate: 1e-3,
            weights: LossWeights::default(),
            sampling_mode: SamplingMode::Stratified,
            seed: 0,
            eval_every: 500,
            heldout_scenes: 500,
            scene: SceneSpec::default(),
        }
    }
}

fn require(ok: bool, what: &str) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(Error::Constraint(what.to_string()))
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        require(self.k >= 1, "K >= 1")?;
        require(self.n >= 1, "N >= 1")?;
        require(self.l >= 1, "L >= 1")?;
        require(self.d >= HEADS && self.d % HEADS == 0, "d divisible by 4 attention heads")?;
        require(self.classes >= 2, "C >= 2")?;
        require(self.batch_size >= 1, "batch_size >= 1")?;
        require(self.learning_rate >= 0.0 && self.learning_rate.is_finite(), "learning_rate >= 0")?;
        require(self.eval_every >= 1, "eval_every >= 1")?;
        require(self.heldout_scenes >= 1, "heldout_scenes >= 1")?;
        self.weights.validate()?;
        if self.sampling_mode == SamplingMode::Stratified {
            require(self.n % self.k == 0, "N divisible by K in stratified mode")?;
        }
        let spec = self.scene_spec();
        spec.validate()?;
        require(
            spec.height % PATCH == 0 && spec.width % PATCH == 0,
            "scene height and width divisible by patch size 4",
        )?;
        Ok(())
    }

    /// Scene spec with the class count taken from `C`.
    pub fn scene_spec(&self) -> SceneSpec {
        SceneSpec {
            classes: self.classes,
            ..self.scene.clone()
        }
    }

    pub fn model_dims(&self) -> ModelDims {
        ModelDims {
            k: self.k,
            l: self.l,
            d: self.d,
            classes: self.classes,
            height: self.scene.height,
            width: self.scene.width,
            channels: self.scene.channels,
            patch: PATCH,
            heads: HEADS,
            text_blocks: TEXT_BLOCKS,
            image_blocks: IMAGE_BLOCKS,
            decoder_blocks: DECODER_BLOCKS,
            mlp_ratio: MLP_RATIO,
        }
    }

    /// Parse and validate a JSON document.
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: TrainConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}
