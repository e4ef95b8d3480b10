//! Two-stage supervised fine-tuning of a small vision-language model.
//!
//! The model ([`ToyVlm`]) pairs a frozen linear patch encoder with the
//! prior-conditioned token modulation from [`crate::tlm`] and a linear
//! language head carrying a low-rank adapter. Its parameters are split into
//! four named groups, and the two training stages each update exactly one of
//! them:
//!
//! * stage 1 ([`stage1_train`]) fits the modulation MLP (`theta_ae`) on
//!   caption-style samples, teaching the model to route information from the
//!   anchored prior vectors into the token stream;
//! * stage 2 ([`stage2_train`]) fits the low-rank head adapter
//!   (`theta_lora`) on instruction/answer samples, adapting the frozen head
//!   to new prompts without disturbing what stage 1 learned.
//!
//! Every other group stays byte-identical through training; this is checked
//! after every epoch and violations surface as
//! [`SftError::FrozenGroupMutated`].

mod checkpoint;
mod model;
mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use model::{nll_loss, ForwardCache, ModelConfig, NamedTensor, ParamPartition, ToyVlm};
pub use train::{
    answer_accuracy, predict_answers, stage1_train, stage2_train, token_saliency, TrainReport,
};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geo::{AnchorFeatureSet, GeoError};
use crate::tensor::{Matrix, TensorError};
use crate::tlm::TlmError;

/// Errors from model construction, training, and checkpoint IO.
#[derive(Debug, Error)]
pub enum SftError {
    #[error("{context}: expected {expected} rows/cols, found {found}")]
    ShapeMismatch {
        context: &'static str,
        expected: String,
        found: String,
    },
    #[error("token {token} at position {index} is outside the vocabulary (size {vocab})")]
    BadToken {
        index: usize,
        token: u32,
        vocab: usize,
    },
    #[error("loss mask selects no positions")]
    EmptyMask,
    #[error("loss mask has {mask_len} entries for {text_len} tokens")]
    MaskLengthMismatch { mask_len: usize, text_len: usize },
    #[error("training set is empty")]
    EmptyDataset,
    #[error("config requests stage {expected} but stage {found} was invoked")]
    WrongStage { expected: u8, found: u8 },
    #[error("frozen parameter group {group} changed during training")]
    FrozenGroupMutated { group: &'static str },
    #[error("checkpoint is corrupt: {reason}")]
    CorruptCheckpoint { reason: String },
    #[error("config mismatch: {reason}")]
    ConfigMismatch { reason: String },
    #[error(transparent)]
    Tlm(#[from] TlmError),
    #[error(transparent)]
    Geo(#[from] GeoError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("io failure: {0}")]
    Io(#[from] std::io::Error),
}

/// The four disjoint parameter groups of [`ToyVlm`].
///
/// The `name` strings are stable identifiers: they appear in checkpoints and
/// in error messages, and each training stage is defined by which single
/// group it updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    /// Patch encoder (`theta_v`): frozen from initialization onward.
    Visual,
    /// Prior-modulation MLP (`theta_ae`): trained in stage 1.
    PriorMlp,
    /// Token embedding and language head (`theta_llm`): always frozen.
    Language,
    /// Low-rank head adapter (`theta_lora`): trained in stage 2.
    Adapter,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 4] = [
        ParamGroup::Visual,
        ParamGroup::PriorMlp,
        ParamGroup::Language,
        ParamGroup::Adapter,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ParamGroup::Visual => "theta_v",
            ParamGroup::PriorMlp => "theta_ae",
            ParamGroup::Language => "theta_llm",
            ParamGroup::Adapter => "theta_lora",
        }
    }

    /// The single group a stage updates.
    pub fn trained_in(stage: u8) -> Option<ParamGroup> {
        match stage {
            1 => Some(ParamGroup::PriorMlp),
            2 => Some(ParamGroup::Adapter),
            _ => None,
        }
    }
}

/// One training sample: an image, its anchored prior features, and a token
/// sequence with a per-position loss mask.
///
/// The model is teacher-forced: position `t` predicts `text[t]` from
/// `text[t-1]` (position 0 conditions on the BOS token). `loss_mask[t]`
/// decides whether position `t` contributes to the loss, so caption samples
/// mask everything in and instruction samples mask only the answer tokens.
#[derive(Debug, Clone)]
pub struct TripletSample {
    image: Matrix,
    features: AnchorFeatureSet,
    text: Vec<u32>,
    loss_mask: Vec<bool>,
}

impl TripletSample {
    pub fn new(
        image: Matrix,
        features: AnchorFeatureSet,
        text: Vec<u32>,
        loss_mask: Vec<bool>,
    ) -> Result<Self, SftError> {
        if loss_mask.len() != text.len() {
            return Err(SftError::MaskLengthMismatch {
                mask_len: loss_mask.len(),
                text_len: text.len(),
            });
        }
        if !loss_mask.iter().any(|&m| m) {
            return Err(SftError::EmptyMask);
        }
        Ok(TripletSample { image, features, text, loss_mask })
    }

    /// Caption sample: every position is supervised.
    pub fn caption(
        image: Matrix,
        features: AnchorFeatureSet,
        description: Vec<u32>,
    ) -> Result<Self, SftError> {
        let mask = vec![true; description.len()];
        TripletSample::new(image, features, description, mask)
    }

    /// Instruction sample: only the answer tokens are supervised.
    pub fn instruction(
        image: Matrix,
        features: AnchorFeatureSet,
        instruction: Vec<u32>,
        answer: Vec<u32>,
    ) -> Result<Self, SftError> {
        let mut text = instruction.clone();
        text.extend_from_slice(&answer);
        let mut mask = vec![false; instruction.len()];
        mask.extend(std::iter::repeat_n(true, answer.len()));
        TripletSample::new(image, features, text, mask)
    }

    pub fn image(&self) -> &Matrix {
        &self.image
    }

    pub fn features(&self) -> &AnchorFeatureSet {
        &self.features
    }

    pub fn text(&self) -> &[u32] {
        &self.text
    }

    pub fn loss_mask(&self) -> &[bool] {
        &self.loss_mask
    }
}

fn default_stage1_joint_lora() -> bool {
    false
}

/// Configuration for one training stage.
///
/// `epochs`, `learning_rate`, `lora_rank`, and `lora_alpha` may be omitted
/// in config files; [`TrainConfig::resolve`] fills stage-appropriate
/// defaults (stage 1: 30 epochs at 1e-4; stage 2: 5 epochs at 1e-5) and the
/// adapter shape defaults from [`ModelConfig`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// 1 trains the modulation MLP, 2 trains the head adapter.
    pub stage: u8,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epochs: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub learning_rate: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lora_rank: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lora_alpha: Option<f64>,
    /// Seeds both fresh-model initialization and the per-epoch shuffle.
    pub seed: u64,
    /// Off-by-default variant: stage 1 also updates the head adapter.
    #[serde(default = "default_stage1_joint_lora")]
    pub stage1_joint_lora: bool,
    /// Model architecture; persisted inside checkpoints.
    #[serde(default)]
    pub model: ModelConfig,
}

impl TrainConfig {
    pub fn stage1(seed: u64) -> Self {
        TrainConfig {
            stage: 1,
            epochs: None,
            learning_rate: None,
            lora_rank: None,
            lora_alpha: None,
            seed,
            stage1_joint_lora: false,
            model: ModelConfig::default(),
        }
    }

    pub fn stage2(seed: u64) -> Self {
        TrainConfig { stage: 2, ..TrainConfig::stage1(seed) }
    }

    /// Effective epoch count (stage defaults: 30 for stage 1, 5 for stage 2).
    pub fn effective_epochs(&self) -> usize {
        self.epochs.unwrap_or(match self.stage {
            1 => 30,
            _ => 5,
        })
    }

    /// Effective learning rate (stage defaults: 1e-4 for stage 1, 1e-5 for
    /// stage 2).
    pub fn effective_learning_rate(&self) -> f64 {
        self.learning_rate.unwrap_or(match self.stage {
            1 => 1e-4,
            _ => 1e-5,
        })
    }

    /// Fold the adapter overrides into the model config and validate the
    /// stage number.
    pub fn resolve(&self) -> Result<(ModelConfig, usize, f64), SftError> {
        if self.stage != 1 && self.stage != 2 {
            return Err(SftError::WrongStage { expected: 1, found: self.stage });
        }
        let mut model = self.model.clone();
        if let Some(r) = self.lora_rank {
            model.lora_rank = r;
        }
        if let Some(a) = self.lora_alpha {
            model.lora_alpha = a;
        }
        Ok((model, self.effective_epochs(), self.effective_learning_rate()))
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn from_json_str(s: &str) -> Result<Self, SftError> {
        serde_json::from_str(s).map_err(|e| SftError::ConfigMismatch { reason: e.to_string() })
    }

    pub fn load_json(path: &std::path::Path) -> Result<Self, SftError> {
        Self::from_json_str(&std::fs::read_to_string(path)?)
    }
}


#[cfg(test)]
mod tests {
    use super::*;
    use crate::geo::SpatioTemporalBox;

    fn tiny_features() -> AnchorFeatureSet {
        let bbox = SpatioTemporalBox::new(0.0, 0.0, 1.0, 1.0, 2020).unwrap();
        crate::geo::AnchorFeatureSet {
            bbox,
            n_lon: 2,
            n_lat: 2,
            records: vec![],
        }
    }

    #[test]
    fn masks_must_cover_text_and_select_something() {
        let img = Matrix::zeros(4, 4);
        let err = TripletSample::new(img.clone(), tiny_features(), vec![1, 2], vec![true]);
        assert!(matches!(err, Err(SftError::MaskLengthMismatch { .. })));
        let err = TripletSample::new(img.clone(), tiny_features(), vec![1, 2], vec![false, false]);
        assert!(matches!(err, Err(SftError::EmptyMask)));

        let s = TripletSample::instruction(img, tiny_features(), vec![2], vec![9]).unwrap();
        assert_eq!(s.text(), &[2, 9]);
        assert_eq!(s.loss_mask(), &[false, true]);
    }

    #[test]
    fn config_defaults_depend_on_stage() {
        let c1 = TrainConfig::stage1(7);
        assert_eq!(c1.effective_epochs(), 30);
        assert_eq!(c1.effective_learning_rate(), 1e-4);
        let c2 = TrainConfig::stage2(7);
        assert_eq!(c2.effective_epochs(), 5);
        assert_eq!(c2.effective_learning_rate(), 1e-5);

        // A sparse JSON file resolves against the same defaults.
        let parsed = TrainConfig::from_json_str(r#"{"stage": 1, "seed": 3}"#).unwrap();
        let (model, epochs, lr) = parsed.resolve().unwrap();
        assert_eq!(epochs, 30);
        assert_eq!(lr, 1e-4);
        assert_eq!(model, ModelConfig::default());

        // Adapter overrides land in the model config.
        let parsed = TrainConfig::from_json_str(
            r#"{"stage": 2, "seed": 3, "lora_rank": 2, "lora_alpha": 4.0}"#,
        )
        .unwrap();
        let (model, _, _) = parsed.resolve().unwrap();
        assert_eq!(model.lora_rank, 2);
        assert_eq!(model.lora_alpha, 4.0);

        let bad = TrainConfig { stage: 3, ..TrainConfig::stage1(0) };
        assert!(matches!(bad.resolve(), Err(SftError::WrongStage { .. })));
    }

    #[test]
    fn group_names_are_stable() {
        let names: Vec<&str> = ParamGroup::ALL.iter().map(|g| g.name()).collect();
        assert_eq!(names, ["theta_v", "theta_ae", "theta_llm", "theta_lora"]);
        assert_eq!(ParamGroup::trained_in(1), Some(ParamGroup::PriorMlp));
        assert_eq!(ParamGroup::trained_in(2), Some(ParamGroup::Adapter));
        assert_eq!(ParamGroup::trained_in(0), None);
    }
}
