//! Toy frozen decoder LM with gated cross-attention adapters, vocabulary,
//! prompt assembly, text-only pretraining and checkpoints.

pub mod checkpoint;
pub mod model;
pub mod pretrain;
pub mod prompt;
pub mod vocab;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointHeader};
pub use model::{lm_loss, FusionLm, GatedCrossBlock, LmConfig, LM_GROUP};
pub use pretrain::{load_text_lm, perplexity, pretrain_text_lm, save_text_lm, PretrainConfig, PretrainReport};
pub use prompt::{assemble_prompt, prompt_text, training_sequence, Prompt, INSTRUCTION};
pub use vocab::TextVocab;
