//! Synthetic LOBSTER days.
//!
//! A stochastic order flow is run against a ground-truth level-3 book and
//! written out in LOBSTER's message/orderbook layout. Used as a stand-in for
//! licensed data in tests, fixtures and the desk-scale corpus.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Geometric};
use serde::{Deserialize, Serialize};

use crate::dataset_io::{write_atomic, IoError};
use crate::lob::{L2Snapshot, OrderBookL3, OrderKey};
use crate::lobster::{file_names, write_messages, write_orderbook, LOBSTER_TICK};
use crate::message::{RawMessage, Side};
use crate::pipeline::MARKET_OPEN_NS;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub seed: u64,
    /// Rows inside trading hours; a few pre-open rows come on top.
    pub messages: usize,
    pub levels: usize,
    /// Starting mid in ticks ($0.01).
    pub start_price_ticks: i64,
    pub pre_open_messages: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            seed: 0,
            messages: 10_000,
            levels: 10,
            start_price_ticks: 10_000,
            pre_open_messages: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SynthDay {
    pub messages: Vec<RawMessage>,
    /// Top-of-book levels after each message, prices in ticks.
    pub books: Vec<L2Snapshot>,
}

struct Flow {
    rng: ChaCha8Rng,
    book: OrderBookL3,
    live: Vec<u64>,
    slot: HashMap<u64, usize>,
    keys: HashMap<u64, OrderKey>,
    remaining: HashMap<u64, u64>,
    by_seq: HashMap<u64, u64>,
    next_id: u64,
    time_ns: u64,
    levels: usize,
    messages: Vec<RawMessage>,
    books: Vec<L2Snapshot>,
}

impl Flow {
    fn add_live(&mut self, id: u64, key: OrderKey, size: u64) {
        self.slot.insert(id, self.live.len());
        self.live.push(id);
        self.keys.insert(id, key);
        self.remaining.insert(id, size);
        self.by_seq.insert(key.entry_seq, id);
    }

    fn drop_live(&mut self, id: u64) {
        if let Some(i) = self.slot.remove(&id) {
            self.live.swap_remove(i);
            if let Some(&moved) = self.live.get(i) {
                self.slot.insert(moved, i);
            }
        }
        if let Some(key) = self.keys.remove(&id) {
            self.by_seq.remove(&key.entry_seq);
        }
        self.remaining.remove(&id);
    }

    fn lot_size(&mut self) -> u64 {
        if self.rng.random_bool(0.1) {
            self.rng.random_range(1..100)
        } else {
            let lots = Geometric::new(0.45).unwrap().sample(&mut self.rng) + 1;
            100 * lots.min(60)
        }
    }

    fn advance_clock(&mut self) {
        let mean_ns = if self.rng.random_bool(0.7) { 2e6 } else { 2e8 };
        let dt = Exp::new(1.0 / mean_ns).unwrap().sample(&mut self.rng);
        self.time_ns += dt as u64;
    }

    fn record(&mut self, msg: RawMessage) {
        self.messages.push(msg);
        self.books.push(self.book.export_l2(self.levels, msg.time_ns));
    }

    fn side_depth(&self, side: Side) -> usize {
        self.book.orders().filter(|o| o.key.side == side).take(40).count()
    }

    fn limit_price(&mut self, side: Side) -> i64 {
        let (bid, ask) = match (self.book.best_bid(), self.book.best_ask()) {
            (Some((b, _)), Some((a, _))) => (b, a),
            (Some((b, _)), None) => (b, b + 2),
            (None, Some((a, _))) => (a - 2, a),
            (None, None) => unreachable!("book is seeded on both sides"),
        };
        let inside = ask - bid > 1 && self.rng.random_bool(0.15);
        let depth = Geometric::new(0.25).unwrap().sample(&mut self.rng) as i64;
        match (side, inside) {
            (Side::Buy, true) => bid + 1,
            (Side::Sell, true) => ask - 1,
            (Side::Buy, false) => bid - depth.min(50),
            (Side::Sell, false) => ask + depth.min(50),
        }
    }

    fn submit(&mut self, side: Side, price: i64, size: u64, emit: bool) {
        let id = self.next_id;
        self.next_id += 1;
        let out = self.book.apply_limit(side, price, size, self.time_ns);
        debug_assert!(out.trades.is_empty(), "synthetic limits never cross");
        if let Some(key) = out.resting {
            self.add_live(id, key, size);
        }
        if emit {
            self.record(RawMessage {
                time_ns: self.time_ns,
                event_type: 1,
                order_id: id,
                size,
                price: price * LOBSTER_TICK,
                direction: side,
            });
        }
    }

    fn cancel(&mut self) {
        let Some(&id) = self.live.choose(&mut self.rng) else {
            return;
        };
        let key = self.keys[&id];
        let left = self.remaining[&id];
        let partial = left > 1 && self.rng.random_bool(0.3);
        let (ty, amount) = if partial {
            (2, self.rng.random_range(1..left))
        } else {
            (3, left)
        };
        self.book.apply_cancel(&key, amount).expect("live order");
        if amount == left {
            self.drop_live(id);
        } else {
            self.remaining.insert(id, left - amount);
        }
        self.record(RawMessage {
            time_ns: self.time_ns,
            event_type: ty,
            order_id: id,
            size: amount,
            price: key.price * LOBSTER_TICK,
            direction: key.side,
        });
    }

    /// A marketable order, logged as one execution row per maker.
    fn market(&mut self, aggressor: Side) {
        let standing = aggressor.opposite();
        let mut size = self.lot_size();
        // never sweep a side empty
        while size > 0 && self.side_depth(standing) > 3 {
            let front = *self.book.best_order(standing).expect("side has depth");
            let trade = self
                .book
                .apply_execution(standing, size, self.time_ns)
                .expect("side has depth");
            size -= trade.size;
            let id = self.by_seq[&front.key.entry_seq];
            if trade.size == front.remaining_size {
                self.drop_live(id);
            } else {
                self.remaining.insert(id, front.remaining_size - trade.size);
            }
            self.record(RawMessage {
                time_ns: self.time_ns,
                event_type: 4,
                order_id: id,
                size: trade.size,
                price: trade.price * LOBSTER_TICK,
                direction: standing,
            });
        }
    }

    fn hidden_execution(&mut self) {
        let mid = self.book.mid_price().expect("two-sided").anchor_tick();
        let size = self.lot_size();
        let side = if self.rng.random_bool(0.5) { Side::Buy } else { Side::Sell };
        self.record(RawMessage {
            time_ns: self.time_ns,
            event_type: 5,
            order_id: 0,
            size,
            price: mid * LOBSTER_TICK,
            direction: side,
        });
    }

    fn step(&mut self) {
        self.advance_clock();
        let side = if self.rng.random_bool(0.5) { Side::Buy } else { Side::Sell };
        for thin in [Side::Buy, Side::Sell] {
            if self.side_depth(thin) < 20 {
                let price = self.limit_price(thin);
                let size = self.lot_size();
                self.submit(thin, price, size, true);
                return;
            }
        }
        let u: f64 = self.rng.random();
        if u < 0.5 {
            let price = self.limit_price(side);
            let size = self.lot_size();
            self.submit(side, price, size, true);
        } else if u < 0.85 {
            self.cancel();
        } else if u < 0.98 {
            self.market(side);
        } else {
            self.hidden_execution();
        }
    }
}

/// Generates one day. The book starts with resting orders that have no
/// messages, as if submitted before the recorded data begins.
pub fn generate_day(cfg: &SynthConfig) -> SynthDay {
    let mut flow = Flow {
        rng: ChaCha8Rng::seed_from_u64(cfg.seed),
        book: OrderBookL3::new(1),
        live: Vec::new(),
        slot: HashMap::new(),
        keys: HashMap::new(),
        remaining: HashMap::new(),
        by_seq: HashMap::new(),
        next_id: 1,
        time_ns: MARKET_OPEN_NS - 2_000_000_000,
        levels: cfg.levels,
        messages: Vec::new(),
        books: Vec::new(),
    };
    let mid = cfg.start_price_ticks;
    for d in 1..=15 {
        for _ in 0..3 {
            let a = flow.lot_size();
            flow.submit(Side::Sell, mid + d, a, false);
            let b = flow.lot_size();
            flow.submit(Side::Buy, mid - d, b, false);
        }
    }
    let target = cfg.pre_open_messages;
    while flow.messages.len() < target {
        flow.step();
    }
    flow.time_ns = flow.time_ns.max(MARKET_OPEN_NS);
    while flow.messages.len() < target + cfg.messages {
        flow.step();
    }
    flow.messages.truncate(target + cfg.messages);
    flow.books.truncate(target + cfg.messages);
    SynthDay {
        messages: flow.messages,
        books: flow.books,
    }
}

/// Writes the day as a LOBSTER CSV pair and returns the two paths.
pub fn write_day(dir: &Path, symbol: &str, date: &str, day: &SynthDay, levels: usize) -> Result<(PathBuf, PathBuf), IoError> {
    let (msg_name, book_name) = file_names(symbol, date, levels);
    let msg_path = dir.join(msg_name);
    let book_path = dir.join(book_name);
    write_atomic(&msg_path, write_messages(&day.messages).as_bytes())?;
    write_atomic(&book_path, write_orderbook(&day.books, LOBSTER_TICK).as_bytes())?;
    Ok((msg_path, book_path))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lobster::parse_lobster;

    fn small() -> SynthConfig {
        SynthConfig {
            seed: 7,
            messages: 3000,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn deterministic_and_well_formed() {
        let a = generate_day(&small());
        let b = generate_day(&small());
        assert_eq!(a, b);
        assert_eq!(a.messages.len(), 3005);
        assert_eq!(a.books.len(), a.messages.len());
        assert!(a.messages.windows(2).all(|w| w[0].time_ns <= w[1].time_ns));
        assert!(a.books.iter().all(|s| s.validate().is_ok() && s.is_two_sided()));
        let types: Vec<u8> = a.messages.iter().map(|m| m.event_type).collect();
        for t in 1..=5 {
            assert!(types.contains(&t), "type {t} missing");
        }
        assert!(a.messages[..5].iter().all(|m| m.time_ns < MARKET_OPEN_NS));
    }

    #[test]
    fn csv_round_trip() {
        let day = generate_day(&small());
        let dir = tempfile::tempdir().unwrap();
        let (m, b) = write_day(dir.path(), "SYN", "2024-01-02", &day, 10).unwrap();
        let (msgs, books) = parse_lobster(
            std::fs::File::open(m).unwrap(),
            std::fs::File::open(b).unwrap(),
            10,
        )
        .unwrap();
        assert_eq!(msgs, day.messages);
        assert_eq!(books, day.books);
    }
}
