//! Conversational machine comprehension: a shared-weight micro-transformer
//! encodes a paragraph once per question and history turn, BiGRUs combine
//! the encodings, and span and answer-type heads pick the answer.

pub mod checkpoint;
pub mod data;
pub mod decoding;
pub mod diagnostics;
pub mod encoder;
pub mod error;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod pipeline;
pub mod synthetic;
pub mod tokenizer;
pub mod training;

pub use checkpoint::{Checkpoint, CheckpointMeta};
pub use data::{Corpus, Dialogue, HistoryFlags, HistoryMode, PredictionStore, Turn};
pub use decoding::{DecodedAnswer, CANNOTANSWER};
pub use encoder::{EncoderConfig, ForwardMode};
pub use error::{Error, Result};
pub use metrics::{EvalRecord, EvalReport, PredictionLine};
pub use model::{AnswerType, CmcConfig, CmcModel, DatasetMode, DialogueContext, ModelConfig};
pub use numerics::{Graph, ParamStore, Tensor};
pub use pipeline::{DialogueState, EvalOptions, Prediction, Predictor, PreparedParagraph};
pub use tokenizer::{PackingConfig, Vocabulary};
pub use training::{TrainConfig, TrainRun, Trainer};
