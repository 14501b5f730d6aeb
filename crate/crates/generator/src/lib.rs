//! Autoregressive message generation against a level-3 simulator, plus the
//! perplexity harness and the generated-vs-realized evaluation protocol.

pub mod context;
pub mod perplexity;
pub mod protocol;
pub mod sample;
pub mod stream;
pub mod stubs;
