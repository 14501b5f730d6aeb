//! What the sampler and the perplexity harness need from a model.

use crate::lob::VolumeImage;
use crate::tokenizer::EncodedMessage;

/// A model of the next-token distribution at the single `MSK` position of
/// the last message in a window of `n` messages and `n` book states.
///
/// Evaluation is split so that work depending only on the first `n - 1`
/// messages and the book states can be reused across the 17 queries made
/// while one message is filled in.
pub trait ConditionalTokenModel: Sync {
    type Prefix: Send;

    /// Messages per window, `n`.
    fn window(&self) -> usize;

    /// `history` holds the `n - 1` complete messages before the target,
    /// `books[i]` the state message `i` of the window acts upon.
    fn prepare(&self, history: &[EncodedMessage], books: &[VolumeImage]) -> Self::Prefix;

    /// Unnormalized log-probabilities over the vocabulary for the `MSK`
    /// token of `last`.
    fn logits(&self, prefix: &Self::Prefix, last: &EncodedMessage) -> Vec<f32>;
}
