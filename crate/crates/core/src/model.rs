//! Encoder + head composition and fine-tuning regimes.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::backbone::{self, build_encoder, is_encoder_param, set_backbone_trainable, EncoderConfig};
use crate::error::{Error, Result};
use crate::heads::{build_head, head_forward, HeadConfig};
use crate::lora::{inject_lora, lora_param_count, BlockSelector, DEFAULT_RANK};
use crate::params::ParamSet;
use crate::rng::derive_seed;
use crate::tensor::{DType, Tensor};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum Regime {
    /// Every encoder and head tensor is trained.
    Full,
    /// Only the head is trained on frozen features.
    ClsOnly,
    /// Head plus low-rank adapters on the selected blocks.
    Lora { selector: BlockSelector, rank: usize },
}

impl Regime {
    pub fn lora(selector: BlockSelector) -> Self {
        Regime::Lora {
            selector,
            rank: DEFAULT_RANK,
        }
    }

    pub fn label(&self) -> String {
        match self {
            Regime::Full => "full".into(),
            Regime::ClsOnly => "clsonly".into(),
            Regime::Lora { selector, rank } => format!("lora-{}-r{rank}", selector.label()),
        }
    }
}

/// Whether samples enter the model as raw volumes or as cached encoder features.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InputMode {
    Features,
    Volumes,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub encoder: EncoderConfig,
    pub head: HeadConfig,
    pub regime: Regime,
    pub mode: InputMode,
    pub dtype: DType,
}

impl ModelSpec {
    /// Frozen-feature model with the given head.
    pub fn features(head: HeadConfig) -> Self {
        Self {
            encoder: EncoderConfig::default(),
            head,
            regime: Regime::ClsOnly,
            mode: InputMode::Features,
            dtype: DType::F32,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.head.validate()?;
        if self.head.in_channels != self.encoder.embed_dim {
            return Err(Error::config(format!(
                "head in_channels {} != encoder embed_dim {}",
                self.head.in_channels, self.encoder.embed_dim
            )));
        }
        if self.mode == InputMode::Features && self.regime != Regime::ClsOnly {
            return Err(Error::config(format!(
                "regime {} trains the encoder and needs volume inputs",
                self.regime.label()
            )));
        }
        if let Regime::Lora { selector, rank } = &self.regime {
            crate::lora::validate_rank(*rank, self.encoder.embed_dim)?;
            selector.blocks(self.encoder.depth)?;
        }
        Ok(())
    }

    /// Shape of one input sample (without batch axis).
    pub fn sample_shape(&self) -> Vec<usize> {
        let g = backbone::GRID;
        match self.mode {
            InputMode::Features => vec![self.encoder.embed_dim, g, g, g],
            InputMode::Volumes => {
                let s = self.encoder.input_size;
                vec![1, s, s, s]
            }
        }
    }

    /// Closed-form trainable parameter count.
    pub fn trainable_count(&self) -> Result<usize> {
        let head = self.head.param_count();
        Ok(match &self.regime {
            Regime::ClsOnly => head,
            Regime::Full => self.encoder.param_count() + head,
            Regime::Lora { selector, rank } => {
                lora_param_count(selector.blocks(self.encoder.depth)?.len(), *rank, self.encoder.embed_dim) + head
            }
        })
    }

    /// Analytic forward FLOPs per sample, encoder included.
    pub fn flops_per_sample(&self) -> u64 {
        self.encoder.flops_per_sample() + self.head.flops_per_sample()
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    pub spec: ModelSpec,
    pub params: ParamSet,
}

impl Model {
    /// Builds the model; all randomness derives from `seed` and the encoder seed.
    pub fn build(spec: &ModelSpec, seed: u64) -> Result<Model> {
        spec.validate()?;
        let mut params = ParamSet::new();
        if spec.mode == InputMode::Volumes {
            let enc = build_encoder(&spec.encoder, spec.dtype)?;
            params = enc.params;
            match &spec.regime {
                Regime::Full => set_backbone_trainable(&mut params, true),
                Regime::ClsOnly => {}
                Regime::Lora { selector, rank } => {
                    inject_lora(&mut params, &spec.encoder, selector, *rank, derive_seed(seed, "lora", 0, 0))?
                }
            }
        }
        for (name, p) in build_head(&spec.head, derive_seed(seed, "head", 0, 0), spec.dtype)?.iter() {
            params.insert(name, p.tensor.clone(), p.trainable)?;
        }
        Ok(Model {
            spec: spec.clone(),
            params,
        })
    }

    /// Logits for a batch of inputs.
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let z = match self.spec.mode {
            InputMode::Features => x,
            InputMode::Volumes => backbone::forward(tape, &self.params, &self.spec.encoder, x)?,
        };
        head_forward(tape, &self.params, &self.spec.head, z)
    }

    /// Inference-only logits.
    pub fn logits(&self, batch: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let x = tape.leaf(batch.clone(), false);
        let y = self.forward(&mut tape, x)?;
        Ok(tape.value(y).clone())
    }

    /// The tensors this regime trains, in model order.
    pub fn extract_trainable(&self) -> ParamSet {
        self.params.trainable()
    }

    pub fn load_trainable(&mut self, values: &ParamSet) -> Result<()> {
        let current = self.params.trainable();
        if !current.same_structure(values) {
            return Err(Error::config("trainable set does not match the model structure"));
        }
        self.params.assign(values)
    }

    /// Toggles the backbone tensors (adapters and head untouched).
    pub fn set_encoder_trainable(&mut self, flag: bool) {
        set_backbone_trainable(&mut self.params, flag);
    }

    /// Encoder tensors only.
    pub fn encoder_params(&self) -> ParamSet {
        let mut out = ParamSet::new();
        for (name, p) in self.params.iter().filter(|(n, _)| is_encoder_param(n)) {
            out.insert(name, p.tensor.clone(), p.trainable).expect("unique names");
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::heads::HeadKind;

    #[test]
    fn features_mode_rejects_encoder_training() {
        let mut spec = ModelSpec::features(HeadConfig::new(HeadKind::Linear));
        spec.regime = Regime::Full;
        assert!(spec.validate().is_err());
    }

    #[test]
    fn closed_form_trainable_counts() {
        let mut spec = ModelSpec::features(HeadConfig::new(HeadKind::ConvS));
        spec.mode = InputMode::Volumes;
        spec.regime = Regime::lora(BlockSelector::All);
        assert_eq!(spec.trainable_count().unwrap(), 294_912 + 1_714_530);
        spec.regime = Regime::lora(BlockSelector::First6);
        assert_eq!(spec.trainable_count().unwrap(), 147_456 + 1_714_530);
        spec.regime = Regime::Full;
        assert_eq!(spec.trainable_count().unwrap(), 23_064_192 + 1_714_530);
    }

    #[test]
    fn linear_features_model_builds() {
        let m = Model::build(&ModelSpec::features(HeadConfig::new(HeadKind::Linear)), 3).unwrap();
        assert_eq!(m.extract_trainable().numel(), 770);
    }
}
