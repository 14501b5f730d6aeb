//! Rolling model inputs synchronized with a simulator.

use std::collections::VecDeque;

use lobgen_core::lob::{BookError, VolumeImage};
use lobgen_core::pipeline::DayDataset;
use lobgen_core::replay::{CorrectionOutcome, Simulator};
use lobgen_core::tokenizer::{self, EncodedMessage, TokenError};
use lobgen_core::Message;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ContextError {
    #[error("window of {n} messages from index {start} exceeds the {available} available")]
    Insufficient { start: usize, n: usize, available: usize },
    #[error("window must hold at least one message")]
    EmptyWindow,
    #[error("initial snapshot: {0}")]
    Book(#[from] BookError),
    #[error("initial snapshot has no mid")]
    NoMid,
    #[error(transparent)]
    Token(#[from] TokenError),
}

/// One processed message.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    /// The message as it entered the window: the corrected message when it
    /// applied, the original when it was discarded.
    pub message: Message,
    pub encoded: EncodedMessage,
    pub outcome: CorrectionOutcome,
    /// State the message acted upon.
    pub book: VolumeImage,
    /// Mid in ticks after the message.
    pub mid_after: Option<f64>,
}

/// The last `n` messages, the `n` book states they acted upon, the state
/// the next message will act upon, and the simulator behind them.
#[derive(Debug, Clone)]
pub struct GenerationContext {
    pub sim: Simulator,
    pub messages: VecDeque<Message>,
    pub encoded: VecDeque<EncodedMessage>,
    pub books: VecDeque<VolumeImage>,
    pub current: VolumeImage,
    pub last_time_ns: u64,
    pub width: usize,
    pub n: usize,
}

impl GenerationContext {
    /// Replays `ds` from its initial snapshot through message
    /// `start + n - 1` and keeps messages `start..start + n` as the window.
    pub fn from_dataset(ds: &DayDataset, start: usize, n: usize) -> Result<Self, ContextError> {
        if n == 0 {
            return Err(ContextError::EmptyWindow);
        }
        if start + n > ds.len() {
            return Err(ContextError::Insufficient {
                start,
                n,
                available: ds.len(),
            });
        }
        let mut sim = Simulator::from_snapshot(1, &ds.initial_snapshot)?;
        let mut prev_anchor = sim.anchor().ok_or(ContextError::NoMid)?;
        let mut books = VecDeque::with_capacity(n + 1);
        for (i, msg) in ds.messages[..start + n].iter().enumerate() {
            if i >= start {
                let image = sim.volume_image(prev_anchor, ds.book_width)?;
                prev_anchor = image.anchor_tick;
                books.push_back(image);
            } else {
                prev_anchor = sim.anchor().expect("mid persists once defined");
            }
            sim.correct_and_apply(msg);
        }
        let current = sim.volume_image(prev_anchor, ds.book_width)?;
        let window = &ds.messages[start..start + n];
        let encoded = window.iter().map(tokenizer::encode).collect::<Result<_, _>>()?;
        Ok(GenerationContext {
            sim,
            messages: window.iter().copied().collect(),
            encoded,
            books,
            current,
            last_time_ns: window[n - 1].time_ns,
            width: ds.book_width,
            n,
        })
    }

    /// Model inputs for the next message: the last `n - 1` messages and
    /// the `n` states from the oldest of them to the current one.
    pub fn model_inputs(&self) -> (Vec<EncodedMessage>, Vec<VolumeImage>) {
        let history = self.encoded.iter().skip(1).copied().collect();
        let books = self.books.iter().skip(1).chain(std::iter::once(&self.current)).cloned().collect();
        (history, books)
    }

    pub fn mid_ticks(&self) -> Option<f64> {
        self.sim.book().mid_price().map(|m| m.ticks())
    }

    /// Corrects and applies `msg`, then slides the window.
    pub fn apply(&mut self, msg: &Message) -> StepRecord {
        let (outcome, _) = self.sim.correct_and_apply(msg);
        let (entered, encoded) = match outcome.applied.map(|m| (m, tokenizer::encode(&m))) {
            Some((m, Ok(e))) => (m, e),
            _ => (*msg, tokenizer::encode(msg).expect("window messages are valid")),
        };
        let acted_on = self.current.clone();
        self.current = self
            .sim
            .volume_image(acted_on.anchor_tick, self.width)
            .expect("width fixed at construction");

        self.messages.pop_front();
        self.messages.push_back(entered);
        self.encoded.pop_front();
        self.encoded.push_back(encoded);
        self.books.pop_front();
        self.books.push_back(acted_on.clone());
        self.last_time_ns = self.last_time_ns.max(entered.time_ns);
        StepRecord {
            message: entered,
            encoded,
            outcome,
            book: acted_on,
            mid_after: self.mid_ticks(),
        }
    }

    pub fn window_is_consistent(&self) -> bool {
        self.messages.len() == self.n && self.encoded.len() == self.n && self.books.len() == self.n
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use lobgen_core::pipeline::{filter_messages, preprocess_day};
    use lobgen_core::synth::{generate_day, SynthConfig};

    pub(crate) fn synthetic_dataset(seed: u64, messages: usize) -> DayDataset {
        let day = generate_day(&SynthConfig {
            seed,
            messages,
            ..Default::default()
        });
        let (m, b) = filter_messages(&day.messages, &day.books);
        preprocess_day("SYN", "2024-01-02", &m, &b, 200).unwrap()
    }

    #[test]
    fn window_books_match_the_dataset() {
        let ds = synthetic_dataset(5, 600);
        let ctx = GenerationContext::from_dataset(&ds, 100, 16).unwrap();
        assert!(ctx.window_is_consistent());
        for (i, b) in ctx.books.iter().enumerate() {
            assert_eq!(b, &ds.books[100 + i]);
        }
        assert_eq!(ctx.current, ds.books[116]);
        assert_eq!(ctx.last_time_ns, ds.messages[115].time_ns);
    }

    #[test]
    fn applying_recorded_messages_reproduces_stored_images() {
        let ds = synthetic_dataset(6, 800);
        let mut ctx = GenerationContext::from_dataset(&ds, 0, 8).unwrap();
        for i in 8..ds.len() - 1 {
            let rec = ctx.apply(&ds.messages[i]);
            assert_eq!(rec.book, ds.books[i]);
            assert_eq!(ctx.current, ds.books[i + 1]);
            assert!(ctx.window_is_consistent());
        }
    }
}
