//! Reference models with known output distributions.

use std::collections::HashMap;
use std::hash::{DefaultHasher, Hash, Hasher};

use lobgen_core::lob::VolumeImage;
use lobgen_core::model_api::ConditionalTokenModel;
use lobgen_core::tokenizer::{EncodedMessage, MSK, VOCAB_SIZE};

fn masked_position(last: &EncodedMessage) -> usize {
    last.tokens().iter().position(|&t| t == MSK).expect("query message holds MSK")
}

fn one_hot(token: u32) -> Vec<f32> {
    let mut l = vec![f32::NEG_INFINITY; VOCAB_SIZE];
    l[token as usize] = 0.0;
    l
}

/// Equal logits for every token.
#[derive(Debug, Clone)]
pub struct UniformModel {
    pub n: usize,
}

impl ConditionalTokenModel for UniformModel {
    type Prefix = ();

    fn window(&self) -> usize {
        self.n
    }

    fn prepare(&self, _: &[EncodedMessage], _: &[VolumeImage]) {}

    fn logits(&self, _: &(), _: &EncodedMessage) -> Vec<f32> {
        vec![0.0; VOCAB_SIZE]
    }
}

/// Probability one on the token `message` holds at the queried position.
#[derive(Debug, Clone)]
pub struct DeltaModel {
    pub n: usize,
    pub message: EncodedMessage,
}

impl ConditionalTokenModel for DeltaModel {
    type Prefix = ();

    fn window(&self) -> usize {
        self.n
    }

    fn prepare(&self, _: &[EncodedMessage], _: &[VolumeImage]) {}

    fn logits(&self, _: &(), last: &EncodedMessage) -> Vec<f32> {
        one_hot(self.message.0[masked_position(last)])
    }
}

/// Knows the true continuation of every window of the streams it was
/// built from, keyed by the preceding `n - 1` messages.
#[derive(Debug, Clone)]
pub struct OracleModel {
    pub n: usize,
    next: HashMap<u64, EncodedMessage>,
}

fn history_key(history: &[EncodedMessage]) -> u64 {
    let mut h = DefaultHasher::new();
    history.hash(&mut h);
    h.finish()
}

impl OracleModel {
    pub fn new(n: usize, streams: &[Vec<EncodedMessage>]) -> Self {
        let mut next = HashMap::new();
        for s in streams {
            for end in n - 1..s.len() {
                next.insert(history_key(&s[end + 1 - n..end]), s[end]);
            }
        }
        OracleModel { n, next }
    }
}

impl ConditionalTokenModel for OracleModel {
    type Prefix = Option<EncodedMessage>;

    fn window(&self) -> usize {
        self.n
    }

    fn prepare(&self, history: &[EncodedMessage], _: &[VolumeImage]) -> Option<EncodedMessage> {
        self.next.get(&history_key(history)).copied()
    }

    fn logits(&self, truth: &Option<EncodedMessage>, last: &EncodedMessage) -> Vec<f32> {
        match truth {
            Some(m) => one_hot(m.0[masked_position(last)]),
            None => vec![0.0; VOCAB_SIZE],
        }
    }
}
