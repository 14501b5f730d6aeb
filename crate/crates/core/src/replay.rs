//! Applying stationarized messages to a level-3 book.
//!
//! Messages carry no order ids, so referential messages are matched to
//! resting orders by attributes. The same path serves data replay (where
//! references resolve by construction) and generated messages (where the
//! reference may be hallucinated and has to be corrected or discarded).

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::lob::{BookError, L2Snapshot, OrderBookL3, RestingOrder, Trade, VolumeImage};
use crate::message::{clip_price_ticks, EventType, Message, Reference};

/// How a message was applied to the simulator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum CorrectionAction {
    /// New limit order, no reference needed.
    NewOrder,
    /// Reference matched a live order on direction, price, size and time.
    ExactMatch,
    /// Matched after dropping the time field from the search.
    MatchIgnoringTime,
    /// Removed liquidity from the synthetic initialization order at the
    /// referenced price level.
    InitVolumeCancel,
    /// Execution against the highest-priority order on the given side.
    BestOrderExecution,
    /// Nothing to apply against; the book is unchanged.
    Discarded,
}

impl CorrectionAction {
    pub const ALL: [CorrectionAction; 6] = [
        CorrectionAction::NewOrder,
        CorrectionAction::ExactMatch,
        CorrectionAction::MatchIgnoringTime,
        CorrectionAction::InitVolumeCancel,
        CorrectionAction::BestOrderExecution,
        CorrectionAction::Discarded,
    ];

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Self::ALL.get(code as usize).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            CorrectionAction::NewOrder => "new_order",
            CorrectionAction::ExactMatch => "exact_match",
            CorrectionAction::MatchIgnoringTime => "match_ignoring_time",
            CorrectionAction::InitVolumeCancel => "init_volume_cancel",
            CorrectionAction::BestOrderExecution => "best_order_execution",
            CorrectionAction::Discarded => "discarded",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorrectionOutcome {
    pub action: CorrectionAction,
    /// The requested size exceeded what the targeted order had left.
    pub size_clipped: bool,
    pub original: Message,
    /// The message as actually applied, with corrected fields.
    pub applied: Option<Message>,
}

impl CorrectionOutcome {
    /// One byte: action code in the low bits, 0x80 when the size was clipped.
    pub fn to_byte(&self) -> u8 {
        self.action.code() | if self.size_clipped { 0x80 } else { 0 }
    }
}

/// Level-3 simulator: the book plus the tick-relative submission price of
/// each order, needed to rebuild reference fields.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Simulator {
    book: OrderBookL3,
    origin_price: HashMap<u64, i32>,
}

impl Simulator {
    pub fn from_snapshot(tick_size: i64, snap: &L2Snapshot) -> Result<Self, BookError> {
        Ok(Simulator {
            book: OrderBookL3::from_snapshot(tick_size, snap)?,
            origin_price: HashMap::new(),
        })
    }

    pub fn book(&self) -> &OrderBookL3 {
        &self.book
    }

    /// Floored mid tick that message prices are relative to.
    pub fn anchor(&self) -> Option<i64> {
        self.book.mid_price().map(|m| m.anchor_tick())
    }

    pub fn volume_image(&self, prev_anchor: i64, width: usize) -> Result<VolumeImage, BookError> {
        self.book.export_volume_image(prev_anchor, width)
    }

    fn reference_of(&self, order: &RestingOrder, anchor: i64, fallback_size: u32) -> Reference {
        if order.is_init_volume {
            Reference {
                price_ticks: clip_price_ticks(order.key.price - anchor),
                size: fallback_size,
                time_ns: 0,
            }
        } else {
            Reference {
                price_ticks: self
                    .origin_price
                    .get(&order.key.entry_seq)
                    .copied()
                    .unwrap_or_else(|| clip_price_ticks(order.key.price - anchor)),
                size: order.original_size.min(u32::MAX as u64) as u32,
                time_ns: order.key.entry_time_ns,
            }
        }
    }

    /// Applies `msg`, repairing its reference when needed. Never fails: an
    /// unusable message comes back as [`CorrectionAction::Discarded`] with
    /// the book untouched.
    pub fn correct_and_apply(&mut self, msg: &Message) -> (CorrectionOutcome, Vec<Trade>) {
        let discarded = CorrectionOutcome {
            action: CorrectionAction::Discarded,
            size_clipped: false,
            original: *msg,
            applied: None,
        };
        let Some(anchor) = self.anchor() else {
            return (discarded, Vec::new());
        };
        match msg.event_type {
            EventType::Limit => {
                let price = anchor + msg.price_ticks as i64;
                let out = self
                    .book
                    .apply_limit(msg.direction, price, msg.size as u64, msg.time_ns);
                if let Some(key) = out.resting {
                    self.origin_price.insert(key.entry_seq, msg.price_ticks);
                }
                let outcome = CorrectionOutcome {
                    action: CorrectionAction::NewOrder,
                    size_clipped: false,
                    original: *msg,
                    applied: Some(*msg),
                };
                (outcome, out.trades)
            }
            EventType::Cancel | EventType::Delete => match self.cancel(msg, anchor) {
                Some(outcome) => (outcome, Vec::new()),
                None => (discarded, Vec::new()),
            },
            EventType::Execute => {
                let Some(order) = self.book.best_order(msg.direction).copied() else {
                    return (discarded, Vec::new());
                };
                let trade = self
                    .book
                    .apply_execution(msg.direction, msg.size as u64, msg.time_ns)
                    .expect("side has a best order");
                let filled = trade.size as u32;
                let applied = Message {
                    price_ticks: clip_price_ticks(order.key.price - anchor),
                    size: filled,
                    reference: Some(self.reference_of(&order, anchor, filled)),
                    ..*msg
                };
                let outcome = CorrectionOutcome {
                    action: CorrectionAction::BestOrderExecution,
                    size_clipped: msg.size as u64 > order.remaining_size,
                    original: *msg,
                    applied: Some(applied),
                };
                (outcome, vec![trade])
            }
        }
    }

    fn cancel(&mut self, msg: &Message, anchor: i64) -> Option<CorrectionOutcome> {
        let reference = msg.reference?;
        let price = anchor + msg.price_ticks as i64;
        let live = || {
            self.book
                .level_orders(msg.direction, price)
                .filter(|o| !o.is_init_volume && o.original_size == reference.size as u64)
        };
        // identical candidates resolve to the latest arrival
        let exact = live()
            .filter(|o| o.key.entry_time_ns == reference.time_ns)
            .max_by_key(|o| o.key.entry_seq)
            .copied();
        let (action, target) = match exact {
            Some(o) => (CorrectionAction::ExactMatch, o),
            None => match live().max_by_key(|o| o.key.entry_seq).copied() {
                Some(o) => (CorrectionAction::MatchIgnoringTime, o),
                None => {
                    let init = self
                        .book
                        .level_orders(msg.direction, price)
                        .find(|o| o.is_init_volume)
                        .copied()?;
                    (CorrectionAction::InitVolumeCancel, init)
                }
            },
        };
        let requested = msg.size as u64;
        let reduce_by = match (msg.event_type, target.is_init_volume) {
            (EventType::Delete, false) => target.remaining_size,
            _ => requested,
        };
        let removed = self
            .book
            .apply_cancel(&target.key, reduce_by)
            .expect("target order is live");
        let applied_size = removed as u32;
        let applied_ref = match action {
            CorrectionAction::ExactMatch => reference,
            _ => self.reference_of(&target, anchor, applied_size),
        };
        Some(CorrectionOutcome {
            action,
            size_clipped: requested > target.remaining_size,
            original: *msg,
            applied: Some(Message {
                size: applied_size,
                reference: Some(applied_ref),
                ..*msg
            }),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lob::L2Level;
    use crate::message::Side;

    fn snapshot() -> L2Snapshot {
        let mut s = L2Snapshot::empty(10, 0);
        s.asks[0] = L2Level { price: 1001, volume: 500 };
        s.bids[0] = L2Level { price: 999, volume: 400 };
        s
    }

    fn limit(side: Side, price_ticks: i32, size: u32, time_ns: u64) -> Message {
        Message {
            event_type: EventType::Limit,
            direction: side,
            price_ticks,
            size,
            dt_ns: 0,
            time_ns,
            reference: None,
        }
    }

    fn referential(ty: EventType, side: Side, price_ticks: i32, size: u32, r: Reference) -> Message {
        Message {
            event_type: ty,
            direction: side,
            price_ticks,
            size,
            dt_ns: 0,
            time_ns: 50,
            reference: Some(r),
        }
    }

    #[test]
    fn delete_exact_match_removes_order() {
        let mut sim = Simulator::from_snapshot(100, &snapshot()).unwrap();
        sim.correct_and_apply(&limit(Side::Buy, -2, 30, 10));
        let del = referential(
            EventType::Delete,
            Side::Buy,
            -2,
            30,
            Reference { price_ticks: -2, size: 30, time_ns: 10 },
        );
        let (out, _) = sim.correct_and_apply(&del);
        assert_eq!(out.action, CorrectionAction::ExactMatch);
        assert_eq!(sim.book().volume_at(Side::Buy, 998), 0);
    }

    #[test]
    fn wrong_time_falls_back_to_attribute_match() {
        let mut sim = Simulator::from_snapshot(100, &snapshot()).unwrap();
        sim.correct_and_apply(&limit(Side::Buy, -2, 30, 10));
        let del = referential(
            EventType::Delete,
            Side::Buy,
            -2,
            30,
            Reference { price_ticks: -2, size: 30, time_ns: 11 },
        );
        let (out, _) = sim.correct_and_apply(&del);
        assert_eq!(out.action, CorrectionAction::MatchIgnoringTime);
        assert_eq!(out.applied.unwrap().reference.unwrap().time_ns, 10);
        assert_eq!(sim.book().volume_at(Side::Buy, 998), 0);
    }

    #[test]
    fn cancel_against_init_volume() {
        let mut sim = Simulator::from_snapshot(100, &snapshot()).unwrap();
        let c = referential(
            EventType::Cancel,
            Side::Sell,
            1,
            100,
            Reference { price_ticks: 1, size: 100, time_ns: 0 },
        );
        let (out, _) = sim.correct_and_apply(&c);
        assert_eq!(out.action, CorrectionAction::InitVolumeCancel);
        assert_eq!(sim.book().volume_at(Side::Sell, 1001), 400);
    }

    #[test]
    fn unmatched_cancel_is_discarded() {
        let mut sim = Simulator::from_snapshot(100, &snapshot()).unwrap();
        let before = sim.clone();
        let c = referential(
            EventType::Cancel,
            Side::Sell,
            7,
            100,
            Reference { price_ticks: 7, size: 100, time_ns: 3 },
        );
        let (out, trades) = sim.correct_and_apply(&c);
        assert_eq!(out.action, CorrectionAction::Discarded);
        assert!(out.applied.is_none() && trades.is_empty());
        assert_eq!(sim, before);
    }

    #[test]
    fn identical_orders_pick_latest() {
        let mut sim = Simulator::from_snapshot(100, &snapshot()).unwrap();
        sim.correct_and_apply(&limit(Side::Buy, -2, 30, 10));
        sim.correct_and_apply(&limit(Side::Buy, -2, 30, 10));
        let c = referential(
            EventType::Cancel,
            Side::Buy,
            -2,
            10,
            Reference { price_ticks: -2, size: 30, time_ns: 10 },
        );
        sim.correct_and_apply(&c);
        let sizes: Vec<_> = sim.book().level_orders(Side::Buy, 998).map(|o| o.remaining_size).collect();
        assert_eq!(sizes, vec![30, 20]);
    }

    #[test]
    fn execution_clips_to_best_order() {
        let mut sim = Simulator::from_snapshot(100, &snapshot()).unwrap();
        let e = referential(
            EventType::Execute,
            Side::Sell,
            5,
            900,
            Reference { price_ticks: 5, size: 900, time_ns: 1 },
        );
        let (out, trades) = sim.correct_and_apply(&e);
        assert_eq!(out.action, CorrectionAction::BestOrderExecution);
        assert!(out.size_clipped);
        assert_eq!(trades.len(), 1);
        assert_eq!(trades[0].size, 500);
        let applied = out.applied.unwrap();
        assert_eq!(applied.price_ticks, 1);
        assert_eq!(applied.size, 500);
        assert_eq!(out.to_byte(), 0x80 | CorrectionAction::BestOrderExecution.code());
    }

    #[test]
    fn execution_on_empty_side_discarded() {
        let mut s = L2Snapshot::empty(10, 0);
        s.asks[0] = L2Level { price: 1001, volume: 5 };
        s.bids[0] = L2Level { price: 999, volume: 5 };
        let mut sim = Simulator::from_snapshot(100, &s).unwrap();
        let e = |size| referential(
            EventType::Execute,
            Side::Sell,
            1,
            size,
            Reference { price_ticks: 1, size: 5, time_ns: 0 },
        );
        assert_eq!(sim.correct_and_apply(&e(5)).0.action, CorrectionAction::BestOrderExecution);
        assert_eq!(sim.correct_and_apply(&e(5)).0.action, CorrectionAction::Discarded);
    }

    #[test]
    fn crossing_limit_trades() {
        let mut sim = Simulator::from_snapshot(100, &snapshot()).unwrap();
        let (out, trades) = sim.correct_and_apply(&limit(Side::Buy, 3, 600, 5));
        assert_eq!(out.action, CorrectionAction::NewOrder);
        assert_eq!(trades.iter().map(|t| t.size).sum::<u64>(), 500);
        assert!(!sim.book().is_crossed());
        assert_eq!(sim.book().best_bid(), Some((1003, 100)));
    }
}
