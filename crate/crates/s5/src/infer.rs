//! Sampling-time wrapper: discretization is done once and the first `n - 1`
//! messages of a window are evaluated once per generated message.

use lobgen_core::lob::VolumeImage;
use lobgen_core::model_api::ConditionalTokenModel;
use lobgen_core::tokenizer::EncodedMessage;

use crate::model::{PrefixCache, Prepared, S5Model};

pub struct CachedModel {
    pub model: S5Model<f32>,
    prep: Prepared<f32>,
}

impl CachedModel {
    pub fn new(model: S5Model<f32>) -> Self {
        let prep = model.prepare();
        CachedModel { model, prep }
    }
}

impl ConditionalTokenModel for CachedModel {
    type Prefix = PrefixCache<f32>;

    fn window(&self) -> usize {
        self.model.cfg.n_messages
    }

    fn prepare(&self, history: &[EncodedMessage], books: &[VolumeImage]) -> PrefixCache<f32> {
        let cfg = &self.model.cfg;
        assert_eq!(history.len() + 1, cfg.n_messages, "history length");
        assert_eq!(books.len(), cfg.n_messages, "book window length");
        let tokens: Vec<u32> = history.iter().flat_map(|m| m.tokens().iter().copied()).collect();
        let mut feats = Vec::with_capacity(books.len() * cfg.book_features());
        for b in books {
            assert_eq!(b.width(), cfg.p, "volume image width");
            feats.extend(b.features());
        }
        self.model.prefix_cache(&self.prep, &tokens, &feats)
    }

    fn logits(&self, prefix: &PrefixCache<f32>, last: &EncodedMessage) -> Vec<f32> {
        self.model.logits_with_prefix(&self.prep, prefix, last.tokens())
    }
}
