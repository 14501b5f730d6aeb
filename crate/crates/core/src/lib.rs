//! Core building blocks for generative limit-order-book modeling: the
//! matching engine, LOBSTER ingestion and preprocessing, the 22-token message
//! encoding, error-corrected message replay and evaluation statistics.

pub mod dataset_io;
pub mod lob;
pub mod lobster;
pub mod message;
pub mod metrics;
pub mod model_api;
pub mod pipeline;
pub mod replay;
pub mod synth;
pub mod tokenizer;

pub use message::{EventType, Message, RawMessage, Reference, Side};
