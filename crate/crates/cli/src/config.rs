//! Run configuration: one flat TOML file, overridden by command-line flags.

use std::path::{Path, PathBuf};

use anyhow::Context;
use lobgen_generator::protocol::{stream_seed, EvalProtocol};
use lobgen_s5::model::ModelConfig;
use lobgen_s5::train::{AdamConfig, TrainConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Relative data directories are resolved against this when set.
pub const DATA_ROOT_ENV: &str = "LOBGEN_DATA_ROOT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub raw_dir: PathBuf,
    pub dataset_dir: PathBuf,
    pub checkpoint_dir: PathBuf,
    pub report_dir: PathBuf,

    pub symbol: String,
    pub dates: Vec<String>,
    pub levels: usize,
    pub book_width: usize,

    pub n_messages: usize,
    pub hidden: usize,
    pub state: usize,
    pub layers_msg: usize,
    pub layers_book: usize,
    pub layers_joint: usize,
    pub seq_len: usize,

    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub clip_norm: f32,
    /// 0 means no limit.
    pub max_steps: u64,
    pub max_val_windows: usize,
    pub log_every: u64,
    /// Share of a single day held out for validation when only one day is
    /// available; otherwise the last day is held out.
    pub val_fraction: f64,

    pub eval_sequences: usize,
    pub eval_context: usize,
    pub eval_steps: usize,
    pub band_coverage: f64,
    pub generate_sequences: usize,
    pub generate_steps: usize,

    pub seed: u64,
    /// Worker threads, 0 for one per core.
    pub workers: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let m = ModelConfig::desk();
        let t = TrainConfig::default();
        let e = EvalProtocol::default();
        RunConfig {
            raw_dir: "data/raw".into(),
            dataset_dir: "data/datasets".into(),
            checkpoint_dir: "runs/checkpoints".into(),
            report_dir: "runs/reports".into(),
            symbol: "SYN".into(),
            dates: Vec::new(),
            levels: 10,
            book_width: m.p,
            n_messages: m.n_messages,
            hidden: m.h,
            state: m.m,
            layers_msg: m.layers_msg,
            layers_book: m.layers_book,
            layers_joint: m.layers_joint,
            seq_len: m.l,
            epochs: t.epochs,
            batch_size: t.batch_size,
            lr: t.adam.lr,
            clip_norm: t.adam.clip_norm,
            max_steps: 0,
            max_val_windows: t.max_val_windows,
            log_every: t.log_every,
            val_fraction: 0.1,
            eval_sequences: e.sequences,
            eval_context: e.context,
            eval_steps: e.steps,
            band_coverage: e.coverage,
            generate_sequences: 10,
            generate_steps: 100,
            seed: 0,
            workers: 0,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("parsing {}", path.display()))
    }

    pub fn parse(text: &str) -> anyhow::Result<Self> {
        Ok(toml::from_str(text)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// First 16 hex digits of the SHA-256 of the serialized config.
    pub fn hash(&self) -> String {
        hex::encode(&Sha256::digest(self.to_toml().as_bytes())[..8])
    }

    pub fn stamp(&self) -> String {
        format!("lobgen {} config {}", env!("CARGO_PKG_VERSION"), self.hash())
    }

    /// Resolves relative raw and dataset directories against `root`.
    pub fn with_data_root(mut self, root: Option<&Path>) -> Self {
        if let Some(root) = root {
            for d in [&mut self.raw_dir, &mut self.dataset_dir] {
                if d.is_relative() {
                    *d = root.join(&*d);
                }
            }
        }
        self
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            n_messages: self.n_messages,
            vocab_size: lobgen_core::tokenizer::VOCAB_SIZE,
            h: self.hidden,
            m: self.state,
            layers_msg: self.layers_msg,
            layers_book: self.layers_book,
            layers_joint: self.layers_joint,
            l: self.seq_len,
            p: self.book_width,
            seed: stream_seed(self.seed, "init", 0),
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            adam: AdamConfig {
                lr: self.lr,
                clip_norm: self.clip_norm,
                ..AdamConfig::default()
            },
            seed: stream_seed(self.seed, "train", 0),
            max_val_windows: self.max_val_windows,
            max_steps: (self.max_steps > 0).then_some(self.max_steps),
            log_every: self.log_every,
        }
    }

    pub fn eval_protocol(&self) -> EvalProtocol {
        EvalProtocol {
            sequences: self.eval_sequences,
            context: self.eval_context,
            steps: self.eval_steps,
            coverage: self.band_coverage,
            seed: stream_seed(self.seed, "eval", 0),
            ..EvalProtocol::default()
        }
    }

    pub fn generate_protocol(&self) -> EvalProtocol {
        EvalProtocol {
            sequences: self.generate_sequences,
            context: self.n_messages,
            steps: self.generate_steps,
            seed: stream_seed(self.seed, "generate", 0),
            ..EvalProtocol::default()
        }
    }
}
