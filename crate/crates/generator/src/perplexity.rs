//! Scoring recorded messages under a model.

use std::ops::Range;

use lobgen_core::lob::VolumeImage;
use lobgen_core::metrics::{nll_from_logits, perplexity_report, PerplexityReport, TokenScore};
use lobgen_core::model_api::ConditionalTokenModel;
use lobgen_core::tokenizer::{EncodedMessage, MASKABLE_POSITIONS};
use rayon::prelude::*;

/// NLL of each maskable token of `target` given the history and books,
/// with the training mask at each position.
pub fn score_message<M: ConditionalTokenModel>(
    model: &M,
    history: &[EncodedMessage],
    books: &[VolumeImage],
    target: &EncodedMessage,
) -> Vec<TokenScore> {
    let prefix = model.prepare(history, books);
    MASKABLE_POSITIONS
        .iter()
        .enumerate()
        .map(|(slot, &pos)| {
            let logits = model.logits(&prefix, &target.masked_at(pos));
            TokenScore {
                slot,
                nll: nll_from_logits(&logits, target.0[pos] as usize),
            }
        })
        .collect()
}

/// A recorded stream and the message indices to score in it. Each target
/// `i` is conditioned on messages `i - n + 1..i` and books `i - n + 1..=i`.
pub struct ScoredSequence<'a> {
    pub messages: &'a [EncodedMessage],
    pub books: &'a [VolumeImage],
    pub targets: Range<usize>,
}

pub fn score_sequence<M: ConditionalTokenModel>(model: &M, seq: &ScoredSequence<'_>) -> Vec<TokenScore> {
    let n = model.window();
    assert!(seq.targets.start + 1 >= n, "targets need {} messages of history", n - 1);
    seq.targets
        .clone()
        .flat_map(|i| {
            score_message(
                model,
                &seq.messages[i + 1 - n..i],
                &seq.books[i + 1 - n..=i],
                &seq.messages[i],
            )
        })
        .collect()
}

/// Scores all sequences in parallel; results are gathered in input order.
pub fn perplexity<M: ConditionalTokenModel>(model: &M, sequences: &[ScoredSequence<'_>]) -> PerplexityReport {
    let scores: Vec<Vec<TokenScore>> = sequences.par_iter().map(|s| score_sequence(model, s)).collect();
    perplexity_report(&scores)
}
