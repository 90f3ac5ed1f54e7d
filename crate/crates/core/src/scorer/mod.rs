//! The learned scoring function.
//!
//! Inputs are assembled as question tokens, a separator, context tokens, a
//! separator, and then every response token followed by its probability
//! tokens (one per active stream). A compact encoder (mean pooling, or one
//! self-attention layer) feeds a small feed-forward head whose sigmoid output
//! is the confidence score. Training minimizes binary cross-entropy with
//! hand-derived gradients.

mod input;
mod model;
mod train;

pub use input::{
    build_input, calibration_from_generations, group_generations, tokenize_text,
    CalibrationExample, InputItem, ScorerInputSequence, Vocabulary, MAX_RESPONSES_PER_QUESTION,
    MIN_MAX_LEN, PAD, SEP, UNK,
};
pub use model::{
    default_method_name, EncodedExample, ModelConfig, Params, ScorerModel, Variant,
    CHECKPOINT_VERSION, LOSS_EPSILON,
};
pub use train::{
    encode_dataset, score_dataset, train, EpochLog, Optimizer, TrainConfig, TrainingLog,
};
