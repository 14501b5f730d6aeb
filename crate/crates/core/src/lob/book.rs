use std::collections::{BTreeMap, VecDeque};

use serde::{Deserialize, Serialize};

use super::snapshot::{L2Level, L2Snapshot, SnapshotError, VolumeImage};
use crate::message::Side;

/// Identity and priority of a resting order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct OrderKey {
    pub side: Side,
    /// Absolute price in ticks.
    pub price: i64,
    /// Unique, strictly increasing with insertion order.
    pub entry_seq: u64,
    pub entry_time_ns: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RestingOrder {
    pub key: OrderKey,
    pub remaining_size: u64,
    /// Size at submission; referential messages identify orders by it.
    pub original_size: u64,
    /// Synthesized from an L2 level at initialization.
    pub is_init_volume: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Trade {
    pub price: i64,
    pub size: u64,
    pub maker: OrderKey,
    pub time_ns: u64,
}

/// Result of [`OrderBookL3::apply_limit`].
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct LimitOutcome {
    /// Executions in the order they happened.
    pub trades: Vec<Trade>,
    /// Key of the unfilled remainder, if any rests in the book.
    pub resting: Option<OrderKey>,
}

/// Mid price held at half-tick resolution as `best_bid + best_ask` ticks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Mid(pub i64);

impl Mid {
    pub fn from_quotes(bid: i64, ask: i64) -> Self {
        Mid(bid + ask)
    }

    /// Mid rounded down to a whole tick.
    pub fn anchor_tick(self) -> i64 {
        self.0.div_euclid(2)
    }

    pub fn ticks(self) -> f64 {
        self.0 as f64 / 2.0
    }

    pub fn price_units(self, tick_size: i64) -> f64 {
        self.ticks() * tick_size as f64
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum BookError {
    #[error("order {0:?} is not in the book")]
    OrderNotFound(OrderKey),
    #[error("no resting orders on the {0:?} side")]
    EmptySide(Side),
    #[error("mid price has never been defined")]
    UndefinedMid,
    #[error("invalid snapshot: {0}")]
    Snapshot(#[from] SnapshotError),
    #[error("volume image width must be even and at least 2, got {0}")]
    InvalidWidth(usize),
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
struct PriceLevel {
    orders: VecDeque<RestingOrder>,
    volume: u64,
}

/// Level-3 book with price-time priority.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OrderBookL3 {
    bids: BTreeMap<i64, PriceLevel>,
    asks: BTreeMap<i64, PriceLevel>,
    tick_size: i64,
    next_seq: u64,
    last_trade: Option<Trade>,
    last_mid: Option<Mid>,
}

impl OrderBookL3 {
    /// `tick_size` is in price units per tick (100 for LOBSTER's $0.01).
    pub fn new(tick_size: i64) -> Self {
        assert!(tick_size >= 1, "tick size must be positive");
        OrderBookL3 {
            bids: BTreeMap::new(),
            asks: BTreeMap::new(),
            tick_size,
            next_seq: 0,
            last_trade: None,
            last_mid: None,
        }
    }

    /// Builds a book holding one synthetic order per populated snapshot
    /// level. Sequence numbers go to the asks first, then the bids, each
    /// from best to worst.
    pub fn from_snapshot(tick_size: i64, snap: &L2Snapshot) -> Result<Self, BookError> {
        snap.validate()?;
        let mut book = OrderBookL3::new(tick_size);
        for (side, levels) in [(Side::Sell, &snap.asks), (Side::Buy, &snap.bids)] {
            for level in levels.iter().filter(|l| !l.is_empty()) {
                book.insert(side, level.price, level.volume, 0, true);
            }
        }
        book.refresh_mid();
        Ok(book)
    }

    pub fn tick_size(&self) -> i64 {
        self.tick_size
    }

    pub fn next_seq(&self) -> u64 {
        self.next_seq
    }

    pub fn last_trade(&self) -> Option<&Trade> {
        self.last_trade.as_ref()
    }

    fn side_map(&self, side: Side) -> &BTreeMap<i64, PriceLevel> {
        match side {
            Side::Buy => &self.bids,
            Side::Sell => &self.asks,
        }
    }

    fn side_map_mut(&mut self, side: Side) -> &mut BTreeMap<i64, PriceLevel> {
        match side {
            Side::Buy => &mut self.bids,
            Side::Sell => &mut self.asks,
        }
    }

    /// Best price and its aggregate volume.
    pub fn best(&self, side: Side) -> Option<(i64, u64)> {
        let entry = match side {
            Side::Buy => self.bids.iter().next_back(),
            Side::Sell => self.asks.iter().next(),
        };
        entry.map(|(&p, lvl)| (p, lvl.volume))
    }

    pub fn best_bid(&self) -> Option<(i64, u64)> {
        self.best(Side::Buy)
    }

    pub fn best_ask(&self) -> Option<(i64, u64)> {
        self.best(Side::Sell)
    }

    /// Highest-priority order on a side.
    pub fn best_order(&self, side: Side) -> Option<&RestingOrder> {
        let level = match side {
            Side::Buy => self.bids.values().next_back(),
            Side::Sell => self.asks.values().next(),
        };
        level.and_then(|l| l.orders.front())
    }

    /// Current mid, or the most recent one when a side is empty.
    pub fn mid_price(&self) -> Option<Mid> {
        self.last_mid
    }

    pub fn volume_at(&self, side: Side, price: i64) -> u64 {
        self.side_map(side).get(&price).map_or(0, |l| l.volume)
    }

    /// Orders at one price level in priority order.
    pub fn level_orders(&self, side: Side, price: i64) -> impl Iterator<Item = &RestingOrder> {
        self.side_map(side)
            .get(&price)
            .into_iter()
            .flat_map(|l| l.orders.iter())
    }

    /// Every resting order: bids best to worst, then asks best to worst.
    pub fn orders(&self) -> impl Iterator<Item = &RestingOrder> {
        self.bids
            .values()
            .rev()
            .chain(self.asks.values())
            .flat_map(|l| l.orders.iter())
    }

    pub fn order_count(&self) -> usize {
        self.bids
            .values()
            .chain(self.asks.values())
            .map(|l| l.orders.len())
            .sum()
    }

    pub fn is_crossed(&self) -> bool {
        matches!((self.best_bid(), self.best_ask()), (Some((b, _)), Some((a, _))) if b >= a)
    }

    fn refresh_mid(&mut self) {
        if let (Some((b, _)), Some((a, _))) = (self.best_bid(), self.best_ask()) {
            self.last_mid = Some(Mid::from_quotes(b, a));
        }
    }

    fn insert(
        &mut self,
        side: Side,
        price: i64,
        size: u64,
        time_ns: u64,
        is_init_volume: bool,
    ) -> OrderKey {
        let key = OrderKey {
            side,
            price,
            entry_seq: self.next_seq,
            entry_time_ns: time_ns,
        };
        self.next_seq += 1;
        let level = self.side_map_mut(side).entry(price).or_default();
        level.volume += size;
        level.orders.push_back(RestingOrder {
            key,
            remaining_size: size,
            original_size: size,
            is_init_volume,
        });
        key
    }

    /// Executes `size` against the front order of the best level on `side`,
    /// never touching a second order.
    fn fill_front(&mut self, side: Side, size: u64, time_ns: u64) -> Option<Trade> {
        let map = self.side_map_mut(side);
        let mut entry = match side {
            Side::Buy => map.last_entry()?,
            Side::Sell => map.first_entry()?,
        };
        let price = *entry.key();
        let level = entry.get_mut();
        let front = level.orders.front_mut()?;
        let fill = size.min(front.remaining_size);
        front.remaining_size -= fill;
        level.volume -= fill;
        let maker = front.key;
        if front.remaining_size == 0 {
            level.orders.pop_front();
        }
        if level.orders.is_empty() {
            entry.remove();
        }
        let trade = Trade {
            price,
            size: fill,
            maker,
            time_ns,
        };
        self.last_trade = Some(trade);
        Some(trade)
    }

    /// Matches an incoming limit order by price-time priority; any unfilled
    /// remainder rests at `price`.
    pub fn apply_limit(&mut self, side: Side, price: i64, size: u64, time_ns: u64) -> LimitOutcome {
        let mut remaining = size;
        let mut trades = Vec::new();
        let contra = side.opposite();
        while remaining > 0 {
            let crosses = match (side, self.best(contra)) {
                (Side::Buy, Some((ask, _))) => price >= ask,
                (Side::Sell, Some((bid, _))) => price <= bid,
                (_, None) => false,
            };
            if !crosses {
                break;
            }
            let trade = self
                .fill_front(contra, remaining, time_ns)
                .expect("crossing side has a front order");
            remaining -= trade.size;
            trades.push(trade);
        }
        let resting = (remaining > 0).then(|| self.insert(side, price, remaining, time_ns, false));
        self.refresh_mid();
        LimitOutcome { trades, resting }
    }

    /// Reduces an order by `min(reduce_by, remaining)`, removing it at zero.
    /// Returns the size actually removed.
    pub fn apply_cancel(&mut self, key: &OrderKey, reduce_by: u64) -> Result<u64, BookError> {
        let map = self.side_map_mut(key.side);
        let level = map
            .get_mut(&key.price)
            .ok_or(BookError::OrderNotFound(*key))?;
        let idx = level
            .orders
            .iter()
            .position(|o| o.key.entry_seq == key.entry_seq)
            .ok_or(BookError::OrderNotFound(*key))?;
        let order = &mut level.orders[idx];
        let removed = reduce_by.min(order.remaining_size);
        order.remaining_size -= removed;
        level.volume -= removed;
        if order.remaining_size == 0 {
            level.orders.remove(idx);
        }
        if level.orders.is_empty() {
            map.remove(&key.price);
        }
        self.refresh_mid();
        Ok(removed)
    }

    /// Executes against the single best-priority order on `side`, clipped to
    /// that order's remaining size.
    pub fn apply_execution(&mut self, side: Side, size: u64, time_ns: u64) -> Result<Trade, BookError> {
        let trade = self
            .fill_front(side, size, time_ns)
            .ok_or(BookError::EmptySide(side))?;
        self.refresh_mid();
        Ok(trade)
    }

    pub fn export_l2(&self, levels: usize, time_ns: u64) -> L2Snapshot {
        assert!(levels >= 1);
        let mut snap = L2Snapshot::empty(levels, time_ns);
        for (slot, (&price, lvl)) in snap.asks.iter_mut().zip(self.asks.iter()) {
            *slot = L2Level {
                price,
                volume: lvl.volume,
            };
        }
        for (slot, (&price, lvl)) in snap.bids.iter_mut().zip(self.bids.iter().rev()) {
            *slot = L2Level {
                price,
                volume: lvl.volume,
            };
        }
        snap
    }

    /// Signed volumes on the `width` ticks around the floored mid.
    pub fn export_volume_image(
        &self,
        prev_mid_ticks: i64,
        width: usize,
    ) -> Result<VolumeImage, BookError> {
        if width < 2 || width % 2 != 0 {
            return Err(BookError::InvalidWidth(width));
        }
        let anchor = self
            .mid_price()
            .ok_or(BookError::UndefinedMid)?
            .anchor_tick();
        let lo = anchor - (width / 2) as i64;
        let hi = lo + width as i64;
        let mut vols = vec![0i64; width];
        for (&price, lvl) in self.bids.range(lo..hi) {
            vols[(price - lo) as usize] += lvl.volume as i64;
        }
        for (&price, lvl) in self.asks.range(lo..hi) {
            vols[(price - lo) as usize] -= lvl.volume as i64;
        }
        Ok(VolumeImage {
            mid_change_ticks: anchor - prev_mid_ticks,
            anchor_tick: anchor,
            vols,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn level(price: i64, volume: u64) -> L2Level {
        L2Level { price, volume }
    }

    #[test]
    fn new_book_is_empty() {
        let book = OrderBookL3::new(100);
        assert_eq!(book.best_bid(), None);
        assert_eq!(book.best_ask(), None);
        assert_eq!(book.mid_price(), None);
        assert_eq!(book.next_seq(), 0);
    }

    #[test]
    fn init_single_ask_level() {
        let mut snap = L2Snapshot::empty(10, 0);
        snap.asks[0] = level(10001, 300);
        let book = OrderBookL3::from_snapshot(100, &snap).unwrap();
        let orders: Vec<_> = book.orders().collect();
        assert_eq!(orders.len(), 1);
        assert_eq!(orders[0].remaining_size, 300);
        assert!(orders[0].is_init_volume);
        assert_eq!(orders[0].key.entry_time_ns, 0);
    }

    #[test]
    fn init_sequence_is_asks_then_bids_best_first() {
        let mut snap = L2Snapshot::empty(2, 0);
        snap.asks[0] = level(101, 1);
        snap.asks[1] = level(102, 1);
        snap.bids[0] = level(99, 1);
        snap.bids[1] = level(98, 1);
        let book = OrderBookL3::from_snapshot(100, &snap).unwrap();
        let seq = |side, price| book.level_orders(side, price).next().unwrap().key.entry_seq;
        assert_eq!(seq(Side::Sell, 101), 0);
        assert_eq!(seq(Side::Sell, 102), 1);
        assert_eq!(seq(Side::Buy, 99), 2);
        assert_eq!(seq(Side::Buy, 98), 3);
    }

    #[test]
    fn empty_snapshot_gives_empty_book() {
        let book = OrderBookL3::from_snapshot(100, &L2Snapshot::empty(10, 0)).unwrap();
        assert_eq!(book.order_count(), 0);
    }

    #[test]
    fn crossed_snapshot_rejected() {
        let mut snap = L2Snapshot::empty(1, 0);
        snap.asks[0] = level(100, 1);
        snap.bids[0] = level(101, 1);
        assert!(matches!(
            OrderBookL3::from_snapshot(100, &snap),
            Err(BookError::Snapshot(SnapshotError::Crossed { .. }))
        ));
    }

    #[test]
    fn full_snapshot_round_trips() {
        let mut snap = L2Snapshot::empty(10, 77);
        for i in 0..10 {
            snap.asks[i] = level(1001 + 2 * i as i64, 10 + i as u64);
            snap.bids[i] = level(999 - i as i64, 20 + i as u64);
        }
        let book = OrderBookL3::from_snapshot(100, &snap).unwrap();
        assert_eq!(book.order_count(), 20);
        assert_eq!(book.export_l2(10, 77), snap);
    }

    #[test]
    fn partial_fill_at_maker_price() {
        let mut book = OrderBookL3::new(100);
        book.apply_limit(Side::Sell, 100, 50, 1);
        let out = book.apply_limit(Side::Buy, 101, 30, 2);
        assert_eq!(out.trades.len(), 1);
        assert_eq!((out.trades[0].price, out.trades[0].size), (100, 30));
        assert_eq!(out.resting, None);
        assert_eq!(book.best_ask(), Some((100, 20)));
    }

    #[test]
    fn fifo_within_level() {
        let mut book = OrderBookL3::new(100);
        book.apply_limit(Side::Sell, 100, 10, 1);
        let second = book.apply_limit(Side::Sell, 100, 20, 2).resting.unwrap();
        let out = book.apply_limit(Side::Buy, 100, 15, 3);
        let fills: Vec<_> = out.trades.iter().map(|t| (t.price, t.size)).collect();
        assert_eq!(fills, vec![(100, 10), (100, 5)]);
        let rest: Vec<_> = book.level_orders(Side::Sell, 100).collect();
        assert_eq!(rest.len(), 1);
        assert_eq!(rest[0].key, second);
        assert_eq!(rest[0].remaining_size, 15);
    }

    #[test]
    fn non_crossing_limit_rests() {
        let mut book = OrderBookL3::new(100);
        book.apply_limit(Side::Sell, 100, 10, 1);
        let out = book.apply_limit(Side::Buy, 99, 10, 2);
        assert!(out.trades.is_empty());
        assert!(out.resting.is_some());
        assert_eq!(book.best_bid(), Some((99, 10)));
    }

    #[test]
    fn limit_sweeps_levels_then_rests() {
        let mut book = OrderBookL3::new(100);
        book.apply_limit(Side::Sell, 100, 10, 1);
        book.apply_limit(Side::Sell, 101, 10, 1);
        let out = book.apply_limit(Side::Buy, 101, 25, 2);
        assert_eq!(out.trades.len(), 2);
        assert_eq!(book.best_bid(), Some((101, 5)));
        assert_eq!(book.best_ask(), None);
        assert!(!book.is_crossed());
    }

    #[test]
    fn cancel_keeps_queue_position() {
        let mut book = OrderBookL3::new(100);
        let first = book.apply_limit(Side::Buy, 99, 100, 1).resting.unwrap();
        book.apply_limit(Side::Buy, 99, 5, 2);
        assert_eq!(book.apply_cancel(&first, 40), Ok(40));
        let lvl: Vec<_> = book.level_orders(Side::Buy, 99).collect();
        assert_eq!(lvl[0].key, first);
        assert_eq!(lvl[0].remaining_size, 60);
        assert_eq!(lvl[0].original_size, 100);
    }

    #[test]
    fn cancel_full_and_over_size_removes() {
        let mut book = OrderBookL3::new(100);
        let a = book.apply_limit(Side::Buy, 99, 100, 1).resting.unwrap();
        let b = book.apply_limit(Side::Buy, 98, 100, 1).resting.unwrap();
        assert_eq!(book.apply_cancel(&a, 100), Ok(100));
        assert_eq!(book.apply_cancel(&b, 150), Ok(100));
        assert_eq!(book.order_count(), 0);
        assert_eq!(book.apply_cancel(&a, 1), Err(BookError::OrderNotFound(a)));
    }

    #[test]
    fn execution_touches_single_order() {
        let mut book = OrderBookL3::new(100);
        book.apply_limit(Side::Sell, 100, 10, 1);
        book.apply_limit(Side::Sell, 100, 20, 2);
        let t = book.apply_execution(Side::Sell, 25, 3).unwrap();
        assert_eq!((t.price, t.size), (100, 10));
        assert_eq!(book.best_ask(), Some((100, 20)));
        assert_eq!(book.level_orders(Side::Sell, 100).count(), 1);
    }

    #[test]
    fn execution_on_bid() {
        let mut book = OrderBookL3::new(100);
        book.apply_limit(Side::Buy, 99, 50, 1);
        let t = book.apply_execution(Side::Buy, 5, 2).unwrap();
        assert_eq!((t.price, t.size), (99, 5));
        assert_eq!(book.best_bid(), Some((99, 45)));
        assert_eq!(book.last_trade().map(|t| t.size), Some(5));
    }

    #[test]
    fn execution_on_empty_side() {
        let mut book = OrderBookL3::new(100);
        assert_eq!(
            book.apply_execution(Side::Sell, 1, 0),
            Err(BookError::EmptySide(Side::Sell))
        );
    }

    #[test]
    fn export_empty_book_is_all_sentinels() {
        let book = OrderBookL3::new(100);
        assert_eq!(book.export_l2(10, 5), L2Snapshot::empty(10, 5));
    }

    #[test]
    fn export_truncates_deep_levels() {
        let mut book = OrderBookL3::new(100);
        for i in 0..12 {
            book.apply_limit(Side::Buy, 1000 - i, 1 + i as u64, 0);
        }
        let snap = book.export_l2(10, 0);
        assert_eq!(snap.bids.len(), 10);
        assert_eq!(snap.bids[0], level(1000, 1));
        assert_eq!(snap.bids[9], level(991, 10));
        assert!(snap.bids.iter().all(|l| l.price > 989));
    }

    #[test]
    fn mid_price_rules() {
        let mut book = OrderBookL3::new(100);
        book.apply_limit(Side::Buy, 100, 1, 0);
        let ask = book.apply_limit(Side::Sell, 102, 1, 0).resting.unwrap();
        assert_eq!(book.mid_price().unwrap().ticks(), 101.0);
        book.apply_cancel(&ask, 1).unwrap();
        // fallback to the last two-sided mid
        assert_eq!(book.mid_price().unwrap().ticks(), 101.0);
        book.apply_limit(Side::Sell, 101, 1, 0);
        let mid = book.mid_price().unwrap();
        assert_eq!(mid.ticks(), 100.5);
        assert_eq!(mid.anchor_tick(), 100);
    }

    #[test]
    fn volume_image_placement() {
        let mut book = OrderBookL3::new(100);
        book.apply_limit(Side::Buy, 998, 30, 0);
        book.apply_limit(Side::Sell, 1002, 20, 0);
        let img = book.export_volume_image(1000, 8).unwrap();
        assert_eq!(img.anchor_tick, 1000);
        assert_eq!(img.vols, vec![0, 0, 30, 0, 0, 0, -20, 0]);
        assert_eq!(img.mid_change_ticks, 0);
    }

    #[test]
    fn volume_image_mid_change_and_window() {
        let mut book = OrderBookL3::new(100);
        book.apply_limit(Side::Buy, 900, 30, 0);
        book.apply_limit(Side::Sell, 1100, 20, 0);
        let img = book.export_volume_image(1000, 8).unwrap();
        assert_eq!(img.vols, vec![0; 8]);
        book.apply_limit(Side::Buy, 902, 1, 0);
        let next = book.export_volume_image(img.anchor_tick, 8).unwrap();
        assert_eq!(next.mid_change_ticks, 1);
    }

    #[test]
    fn volume_image_errors() {
        let book = OrderBookL3::new(100);
        assert_eq!(
            book.export_volume_image(0, 8),
            Err(BookError::UndefinedMid)
        );
        assert_eq!(book.export_volume_image(0, 7), Err(BookError::InvalidWidth(7)));
    }
}
