//! Deliberately simple list-based order book used as a test oracle for the
//! tree-based engine. Every operation is a linear scan.

#![allow(dead_code)]

use lobgen_core::lob::{L2Level, L2Snapshot, OrderBookL3};
use lobgen_core::Side;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone)]
pub struct NaiveOrder {
    pub side: Side,
    pub price: i64,
    pub seq: u64,
    pub size: u64,
}

#[derive(Debug, Default)]
pub struct NaiveBook {
    pub orders: Vec<NaiveOrder>,
    next_seq: u64,
}

impl NaiveBook {
    fn better(side: Side, a: &NaiveOrder, b: &NaiveOrder) -> bool {
        let price_better = match side {
            Side::Buy => a.price > b.price,
            Side::Sell => a.price < b.price,
        };
        price_better || (a.price == b.price && a.seq < b.seq)
    }

    /// Index of the highest-priority order on `side`.
    pub fn front(&self, side: Side) -> Option<usize> {
        let mut best: Option<usize> = None;
        for (i, o) in self.orders.iter().enumerate() {
            if o.side != side {
                continue;
            }
            if best.map_or(true, |b| Self::better(side, o, &self.orders[b])) {
                best = Some(i);
            }
        }
        best
    }

    fn take(&mut self, i: usize, size: u64) -> u64 {
        let fill = size.min(self.orders[i].size);
        self.orders[i].size -= fill;
        if self.orders[i].size == 0 {
            self.orders.remove(i);
        }
        fill
    }

    /// Returns the sequence number given to the remainder, if it rests.
    pub fn limit(&mut self, side: Side, price: i64, mut size: u64) -> Option<u64> {
        let contra = side.opposite();
        while size > 0 {
            let Some(i) = self.front(contra) else { break };
            let crosses = match side {
                Side::Buy => price >= self.orders[i].price,
                Side::Sell => price <= self.orders[i].price,
            };
            if !crosses {
                break;
            }
            size -= self.take(i, size);
        }
        if size == 0 {
            return None;
        }
        let seq = self.next_seq;
        self.next_seq += 1;
        self.orders.push(NaiveOrder { side, price, seq, size });
        Some(seq)
    }

    pub fn cancel(&mut self, seq: u64, reduce_by: u64) -> u64 {
        let i = self.orders.iter().position(|o| o.seq == seq).expect("live order");
        self.take(i, reduce_by)
    }

    pub fn execute(&mut self, side: Side, size: u64) -> Option<u64> {
        let i = self.front(side)?;
        Some(self.take(i, size))
    }

    pub fn l2(&self, levels: usize, time_ns: u64) -> L2Snapshot {
        let mut snap = L2Snapshot::empty(levels, time_ns);
        for (side, out) in [(Side::Sell, &mut snap.asks), (Side::Buy, &mut snap.bids)] {
            let mut prices: Vec<i64> = self.orders.iter().filter(|o| o.side == side).map(|o| o.price).collect();
            prices.sort_unstable();
            prices.dedup();
            if side == Side::Buy {
                prices.reverse();
            }
            for (slot, p) in out.iter_mut().zip(prices) {
                let volume = self.orders.iter().filter(|o| o.side == side && o.price == p).map(|o| o.size).sum();
                *slot = L2Level { price: p, volume };
            }
        }
        snap
    }
}

/// Drives both books with the same random message stream and returns the
/// index of the first message after which their 10-level snapshots differ.
pub fn first_divergence(messages: usize, seed: u64) -> Option<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut fast = OrderBookL3::new(1);
    let mut slow = NaiveBook::default();
    for i in 0..messages {
        let side = if rng.random_bool(0.5) { Side::Buy } else { Side::Sell };
        let u: f64 = rng.random();
        let t = i as u64;
        if u < 0.55 || fast.order_count() == 0 {
            let price = 1000 + rng.random_range(-12..=12);
            let size = rng.random_range(1..=300);
            let out = fast.apply_limit(side, price, size, t);
            let seq = slow.limit(side, price, size);
            if out.resting.map(|k| k.entry_seq) != seq {
                return Some(i);
            }
        } else if u < 0.85 {
            let pick = rng.random_range(0..fast.order_count());
            let key = fast.orders().nth(pick).expect("in range").key;
            let reduce = rng.random_range(1..=400);
            let a = fast.apply_cancel(&key, reduce).expect("live order");
            let b = slow.cancel(key.entry_seq, reduce);
            if a != b {
                return Some(i);
            }
        } else {
            let size = rng.random_range(1..=500);
            let a = fast.apply_execution(side, size, t).ok().map(|tr| tr.size);
            let b = slow.execute(side, size);
            if a != b {
                return Some(i);
            }
        }
        if fast.export_l2(10, t) != slow.l2(10, t) {
            return Some(i);
        }
    }
    None
}
