//! Controllable product-copywriting pipeline.
//!
//! End to end: unsupervised aspect extraction (collapsed-Gibbs LDA with a
//! coherence sweep), phrase-vocabulary mining and phrase-first tokenization,
//! masked-LM pretraining with substitute-word weak labeling, a prefix-LM
//! generator with control codes and prompt layouts, knowledge-based
//! post-processing, and BLEU/ROUGE/aspect evaluation.
//!
//! Model math is generic over [`num::Scalar`]; the concrete aliases below fix
//! the two precisions in use: f32 for training and checkpoints, f64 for
//! gradient verification.

pub mod checkpoint;
pub mod corpus;
pub mod phrase;
pub mod pipeline;
pub mod text;
pub mod tokenizer;
pub mod error;
pub mod generator;
pub mod labeler;
pub mod lda;
pub mod metrics;
pub mod model;
pub mod num;
pub mod postprocess;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
