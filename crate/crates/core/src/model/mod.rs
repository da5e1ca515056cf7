//! A tiny conditional generator standing in for a vision-language model.

pub mod checkpoint;
pub mod generate;
pub mod params;
pub mod train;
pub mod vocab;

pub use checkpoint::Checkpoint;
pub use generate::{
    anchor_embedding, annotate, generate_caption, generate_qa, next_token_distribution, teacher_forced_probs,
    AnchorEmbedding, Conditioning, DecodeMode, GenerationRequest, QaPair,
};
pub use params::{ModelDims, ParamGrads, ToyModelParams};
pub use train::{train_step, ContrastiveGroup, Objective, SequenceExample, TrainBatch, TrainOptions};
pub use vocab::Vocab;
