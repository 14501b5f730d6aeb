//! Window sampling, Adam and the epoch loop.

use std::time::Instant;

use lobgen_core::pipeline::DayDataset;
use lobgen_core::tokenizer::{self, Token, HID, MASKABLE_POSITIONS, MSK, TOKENS_PER_MESSAGE};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{Example, S5Model};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("need {needed} messages from index {start}, day has {available}")]
    InsufficientData { start: usize, needed: usize, available: usize },
    #[error("book width {found} does not match model width {expected}")]
    BookWidth { expected: usize, found: usize },
    #[error("message {index} cannot be tokenized: {source}")]
    Token {
        index: usize,
        source: tokenizer::TokenError,
    },
    #[error("non-finite training loss {loss} at step {step}")]
    NonFinite { step: u64, loss: f32 },
    #[error("no training windows")]
    NoWindows,
    #[error("{0}")]
    Output(String),
}

/// A day flattened into model inputs: `22` tokens and `P + 1` features per
/// message.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainDay {
    pub name: String,
    pub tokens: Vec<Token>,
    pub features: Vec<f32>,
    pub width: usize,
}

impl TrainDay {
    pub fn from_dataset(ds: &DayDataset) -> Result<Self, TrainError> {
        let mut tokens = Vec::with_capacity(ds.len() * TOKENS_PER_MESSAGE);
        for (index, m) in ds.messages.iter().enumerate() {
            let enc = tokenizer::encode(m).map_err(|source| TrainError::Token { index, source })?;
            tokens.extend_from_slice(enc.tokens());
        }
        let width = ds.book_width + 1;
        let mut features = Vec::with_capacity(ds.len() * width);
        for b in &ds.books {
            features.extend(b.features());
        }
        Ok(TrainDay {
            name: format!("{}_{}", ds.symbol, ds.date),
            tokens,
            features,
            width,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len() / TOKENS_PER_MESSAGE
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Splits off messages `at..` as a separate day.
    pub fn split_at(&self, at: usize) -> (TrainDay, TrainDay) {
        let at = at.min(self.len());
        let head = TrainDay {
            name: self.name.clone(),
            tokens: self.tokens[..at * TOKENS_PER_MESSAGE].to_vec(),
            features: self.features[..at * self.width].to_vec(),
            width: self.width,
        };
        let tail = TrainDay {
            name: format!("{}+{at}", self.name),
            tokens: self.tokens[at * TOKENS_PER_MESSAGE..].to_vec(),
            features: self.features[at * self.width..].to_vec(),
            width: self.width,
        };
        (head, tail)
    }
}

/// Window of `n` messages from `start` with the last message masked at
/// `position`.
pub fn make_example(day: &TrainDay, start: usize, n: usize, position: usize) -> Result<Example, TrainError> {
    if start + n > day.len() || n == 0 {
        return Err(TrainError::InsufficientData {
            start,
            needed: n,
            available: day.len(),
        });
    }
    let mut tokens = day.tokens[start * TOKENS_PER_MESSAGE..(start + n) * TOKENS_PER_MESSAGE].to_vec();
    let base = (n - 1) * TOKENS_PER_MESSAGE;
    let target = tokens[base + position];
    tokens[base + position] = MSK;
    for t in &mut tokens[base + position + 1..] {
        *t = HID;
    }
    Ok(Example {
        tokens,
        books: day.features[start * day.width..(start + n) * day.width].to_vec(),
        target,
        position,
    })
}

/// Training window with a uniformly drawn maskable position.
pub fn make_batch(day: &TrainDay, start: usize, n: usize, rng: &mut impl Rng) -> Result<Example, TrainError> {
    let position = MASKABLE_POSITIONS[rng.random_range(0..MASKABLE_POSITIONS.len())];
    make_example(day, start, n, position)
}

/// Non-overlapping window starts for one epoch: each day skips a random
/// `0..n` messages at its start, then all `(day, start)` pairs are shuffled.
pub fn epoch_windows(days: &[TrainDay], n: usize, rng: &mut impl Rng) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for (d, day) in days.iter().enumerate() {
        let mut start = rng.random_range(0..n);
        while start + n <= day.len() {
            out.push((d, start));
            start += n;
        }
    }
    out.shuffle(rng);
    out
}

/// Unmasked window of `n` messages.
#[derive(Debug, Clone, PartialEq)]
pub struct Window {
    pub tokens: Vec<Token>,
    pub books: Vec<f32>,
}

/// Fixed validation windows: stride `n` from the start of every day.
pub fn validation_set(days: &[TrainDay], n: usize, max_windows: usize) -> Vec<Window> {
    let mut out = Vec::new();
    for day in days {
        let mut start = 0;
        while start + n <= day.len() && out.len() < max_windows {
            out.push(Window {
                tokens: day.tokens[start * TOKENS_PER_MESSAGE..(start + n) * TOKENS_PER_MESSAGE].to_vec(),
                books: day.features[start * day.width..(start + n) * day.width].to_vec(),
            });
            start += n;
        }
    }
    out
}

/// Mean cross-entropy over every maskable position of the last message of
/// each window.
pub fn window_loss(model: &S5Model<f32>, windows: &[Window]) -> f32 {
    let prep = model.prepare();
    let t0 = model.cfg.seq_len() - TOKENS_PER_MESSAGE;
    let sums: Vec<f64> = windows
        .par_iter()
        .map(|w| {
            let cache = model.prefix_cache(&prep, &w.tokens[..t0], &w.books);
            let mut sum = 0.0f64;
            for &pos in MASKABLE_POSITIONS.iter() {
                let mut last = w.tokens[t0..].to_vec();
                last[pos] = MSK;
                last[pos + 1..].iter_mut().for_each(|t| *t = HID);
                let logits = model.logits_with_prefix(&prep, &cache, &last);
                let max = logits.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v)) as f64;
                let lse = max + logits.iter().map(|&v| (v as f64 - max).exp()).sum::<f64>().ln();
                sum += lse - logits[w.tokens[t0 + pos] as usize] as f64;
            }
            sum
        })
        .collect();
    (sums.iter().sum::<f64>() / (windows.len() * MASKABLE_POSITIONS.len()).max(1) as f64) as f32
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    /// Global gradient-norm clip; `0` disables clipping.
    pub clip_norm: f32,
    /// Upper bound applied to every `Re(lambda)` after each step.
    pub max_lambda_re: f32,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: 1.0,
            max_lambda_re: -1e-4,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Adam {
    pub cfg: AdamConfig,
    m: Vec<f32>,
    v: Vec<f32>,
    t: u64,
}

impl Adam {
    pub fn new(cfg: AdamConfig, n_params: usize) -> Self {
        Adam {
            cfg,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            t: 0,
        }
    }

    /// Clips `grad` in place and updates `params`. Returns the pre-clip
    /// gradient norm.
    pub fn step(&mut self, params: &mut [f32], grad: &mut [f32]) -> f32 {
        let norm = grad.iter().map(|&g| (g as f64) * (g as f64)).sum::<f64>().sqrt() as f32;
        if self.cfg.clip_norm > 0.0 && norm > self.cfg.clip_norm {
            let s = self.cfg.clip_norm / norm;
            grad.iter_mut().for_each(|g| *g *= s);
        }
        self.t += 1;
        let c = &self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = c.beta1 * self.m[i] + (1.0 - c.beta1) * g;
            self.v[i] = c.beta2 * self.v[i] + (1.0 - c.beta2) * g * g;
            let mh = self.m[i] / bc1;
            let vh = self.v[i] / bc2;
            params[i] -= c.lr * mh / (vh.sqrt() + c.eps);
        }
        norm
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub seed: u64,
    pub max_val_windows: usize,
    /// Stop after this many optimizer steps.
    pub max_steps: Option<u64>,
    /// Training loss is logged every this many steps.
    pub log_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 3,
            batch_size: 16,
            adam: AdamConfig::default(),
            seed: 0,
            max_val_windows: 256,
            max_steps: None,
            log_every: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: u64,
    pub split: String,
    pub loss: f32,
    pub tokens_per_sec: f32,
}

pub struct Trainer {
    pub model: S5Model<f32>,
    pub adam: Adam,
    pub step: u64,
    pub cfg: TrainConfig,
    rng: ChaCha8Rng,
}

impl Trainer {
    pub fn new(model: S5Model<f32>, cfg: TrainConfig) -> Self {
        let adam = Adam::new(cfg.adam.clone(), model.param_count());
        let rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7261_696e);
        Trainer {
            model,
            adam,
            step: 0,
            cfg,
            rng,
        }
    }

    /// One optimizer step on `batch`; returns the batch loss before the
    /// update.
    pub fn step(&mut self, batch: &[Example]) -> Result<f32, TrainError> {
        let (loss, mut grad) = self.model.loss_and_grad(batch);
        if !loss.is_finite() {
            return Err(TrainError::NonFinite { step: self.step, loss });
        }
        self.adam.step(&mut self.model.params, &mut grad);
        self.model.clamp_stability(self.cfg.adam.max_lambda_re);
        self.step += 1;
        Ok(loss)
    }

    pub fn done(&self) -> bool {
        self.cfg.max_steps.is_some_and(|m| self.step >= m)
    }

    /// One pass over freshly sampled windows. Returns the mean training
    /// loss.
    pub fn epoch(&mut self, days: &[TrainDay], log: &mut impl FnMut(LogRow)) -> Result<f32, TrainError> {
        let n = self.model.cfg.n_messages;
        let windows = epoch_windows(days, n, &mut self.rng);
        if windows.is_empty() {
            return Err(TrainError::NoWindows);
        }
        let mut total = 0.0f64;
        let mut batches = 0usize;
        let mut since = (Instant::now(), 0usize, 0.0f64, 0usize);
        for chunk in windows.chunks(self.cfg.batch_size) {
            if self.done() {
                break;
            }
            let batch = chunk
                .iter()
                .map(|&(d, s)| make_batch(&days[d], s, n, &mut self.rng))
                .collect::<Result<Vec<_>, _>>()?;
            let loss = self.step(&batch)?;
            total += loss as f64;
            batches += 1;
            since.1 += batch.len() * n * TOKENS_PER_MESSAGE;
            since.2 += loss as f64;
            since.3 += 1;
            if self.cfg.log_every > 0 && self.step % self.cfg.log_every == 0 {
                let secs = since.0.elapsed().as_secs_f64().max(1e-9);
                log(LogRow {
                    step: self.step,
                    split: "train".into(),
                    loss: (since.2 / since.3 as f64) as f32,
                    tokens_per_sec: (since.1 as f64 / secs) as f32,
                });
                since = (Instant::now(), 0, 0.0, 0);
            }
        }
        Ok((total / batches.max(1) as f64) as f32)
    }

    pub fn validate(&self, val: &[Window], log: &mut impl FnMut(LogRow)) -> f32 {
        let t = Instant::now();
        let loss = window_loss(&self.model, val);
        let tokens = val.len() * self.model.cfg.n_messages * TOKENS_PER_MESSAGE;
        log(LogRow {
            step: self.step,
            split: "val".into(),
            loss,
            tokens_per_sec: (tokens as f64 / t.elapsed().as_secs_f64().max(1e-9)) as f32,
        });
        loss
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: S5Model<f32>,
    pub steps: u64,
    pub initial_val_loss: f32,
    /// Validation loss after each epoch.
    pub val_losses: Vec<f32>,
    pub train_losses: Vec<f32>,
}

/// Full loop: validation at initialization and after every epoch.
/// `on_epoch` sees the trainer after each epoch, e.g. to write a
/// checkpoint.
pub fn train(
    model: S5Model<f32>,
    cfg: TrainConfig,
    train_days: &[TrainDay],
    val_days: &[TrainDay],
    mut log: impl FnMut(LogRow),
    mut on_epoch: impl FnMut(usize, &Trainer) -> Result<(), TrainError>,
) -> Result<TrainOutcome, TrainError> {
    let n = model.cfg.n_messages;
    let expected = model.cfg.book_features();
    if let Some(d) = train_days.iter().chain(val_days).find(|d| d.width != expected) {
        return Err(TrainError::BookWidth {
            expected,
            found: d.width,
        });
    }
    let val = validation_set(val_days, n, cfg.max_val_windows);
    let epochs = cfg.epochs;
    let mut trainer = Trainer::new(model, cfg);
    let initial_val_loss = if val.is_empty() { f32::NAN } else { trainer.validate(&val, &mut log) };
    let mut val_losses = Vec::new();
    let mut train_losses = Vec::new();
    for e in 0..epochs {
        if trainer.done() {
            break;
        }
        train_losses.push(trainer.epoch(train_days, &mut log)?);
        if !val.is_empty() {
            val_losses.push(trainer.validate(&val, &mut log));
        }
        on_epoch(e, &trainer)?;
    }
    Ok(TrainOutcome {
        steps: trainer.step,
        model: trainer.model,
        initial_val_loss,
        val_losses,
        train_losses,
    })
}

pub fn log_csv_header() -> &'static str {
    "step,split,loss,tokens_per_sec"
}

pub fn log_csv_row(r: &LogRow) -> String {
    format!("{},{},{:.6},{:.1}", r.step, r.split, r.loss, r.tokens_per_sec)
}

#[cfg(test)]
mod tests {
    use super::*;
    use lobgen_core::tokenizer::{POS_TIME, TOKENS_PER_MESSAGE};

    fn day(len: usize) -> TrainDay {
        TrainDay {
            name: "t".into(),
            tokens: (0..len * TOKENS_PER_MESSAGE).map(|i| 3 + i as u32).collect(),
            features: (0..len * 3).map(|i| i as f32).collect(),
            width: 3,
        }
    }

    #[test]
    fn masking_hides_the_right_of_the_target() {
        let d = day(5);
        let ex = make_example(&d, 1, 3, 0).unwrap();
        let last = &ex.tokens[2 * TOKENS_PER_MESSAGE..];
        assert_eq!(last[0], MSK);
        assert!(last[1..].iter().all(|&t| t == HID));
        assert_eq!(ex.target, d.tokens[3 * TOKENS_PER_MESSAGE]);
        assert_eq!(ex.books, (3..12).map(|i| i as f32).collect::<Vec<_>>());
        let ex = make_example(&d, 0, 2, 21).unwrap();
        assert!(!ex.tokens.contains(&HID));
        assert_eq!(ex.tokens[2 * TOKENS_PER_MESSAGE - 1], MSK);
    }

    #[test]
    fn arrival_time_positions_are_never_masked() {
        let d = day(4);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..10_000 {
            let ex = make_batch(&d, 0, 4, &mut rng).unwrap();
            assert!(!(POS_TIME..POS_TIME + 5).contains(&ex.position));
        }
    }

    #[test]
    fn window_loss_averages_every_position() {
        use crate::model::ModelConfig;
        let cfg = ModelConfig::tiny();
        let model = S5Model::<f32>::init(cfg.clone());
        let d = TrainDay {
            name: "t".into(),
            tokens: (0..4 * TOKENS_PER_MESSAGE).map(|i| 3 + (i * 37 % 500) as u32).collect(),
            features: (0..4 * cfg.book_features()).map(|i| (i % 5) as f32).collect(),
            width: cfg.book_features(),
        };
        let val = validation_set(&[d.clone()], 2, 10);
        assert_eq!(val.len(), 2);
        let examples: Vec<Example> = (0..2)
            .flat_map(|w| MASKABLE_POSITIONS.iter().map(move |&p| (w, p)))
            .map(|(w, p)| make_example(&d, 2 * w, 2, p).unwrap())
            .collect();
        let want = model.loss(&examples);
        assert!((window_loss(&model, &val) - want).abs() < 1e-4 * want.abs());
    }

    #[test]
    fn short_days_are_rejected() {
        assert!(matches!(make_example(&day(3), 1, 3, 0), Err(TrainError::InsufficientData { .. })));
    }

    #[test]
    fn epoch_windows_do_not_overlap() {
        let days = vec![day(50), day(23)];
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut w = epoch_windows(&days, 8, &mut rng);
        w.sort();
        for pair in w.windows(2) {
            if pair[0].0 == pair[1].0 {
                assert_eq!(pair[1].1 - pair[0].1, 8);
            }
        }
        assert!(w.iter().all(|&(d, s)| s + 8 <= days[d].len()));
    }

    #[test]
    fn adam_clips_and_moves_against_the_gradient() {
        let mut adam = Adam::new(AdamConfig::default(), 2);
        let mut p = vec![1.0, -1.0];
        let mut g = vec![30.0, -40.0];
        let norm = adam.step(&mut p, &mut g);
        assert!((norm - 50.0).abs() < 1e-4);
        assert!((g[0] - 0.6).abs() < 1e-6 && (g[1] + 0.8).abs() < 1e-6);
        assert!((p[0] - (1.0 - 1e-3)).abs() < 1e-6);
        assert!((p[1] - (-1.0 + 1e-3)).abs() < 1e-6);
    }
}
