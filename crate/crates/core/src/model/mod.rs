// SPDX-License-Identifier: MIT OR Apache-2.0

//! Decoder-only transformer in f64 with a hand-written backward pass,
//! pre-training, reward modelling and rejection-sampling fine-tuning.

pub mod checkpoint;
mod finetune;
mod hooks;
mod params;
mod provenance;
mod reward;
mod train;
mod transformer;

pub use finetune::{finetune, FinetuneSettings, FLAT_REWARD_WARNING};
pub use hooks::{reciprocal_rank, ActivationTrace, ForwardPass, Hooks, LanguageModel, ModelShape};
pub use params::{BlockOffsets, ModelConfig, ModelParams, ParamLayout, TensorSpec};
pub use provenance::{Regime, StageRecord, TrainingProvenance};
pub use reward::{synthesize_preferences, train_reward_model, PreferencePair, Preferred, RewardFit, RewardModel};
pub use train::{batch_gradient, mean_loss, pretrain, train_examples, Adam, Example, OptimizerSettings};
pub use transformer::next_token_targets;
