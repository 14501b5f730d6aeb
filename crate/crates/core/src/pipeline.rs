//! Raw LOBSTER rows to stationarized messages and aligned volume images.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::lob::{BookError, L2Snapshot, VolumeImage};
use crate::lobster::LOBSTER_TICK;
use crate::message::{
    clip_price_ticks, clip_size, EventType, Message, RawMessage, Reference, MAX_DT_NS, MAX_PRICE_TICKS,
    MAX_SIZE, MAX_TIME_NS,
};
use crate::replay::{CorrectionAction, Simulator};

/// 09:30:00 as nanoseconds after midnight.
pub const MARKET_OPEN_NS: u64 = 34_200 * 1_000_000_000;
/// 16:00:00 as nanoseconds after midnight.
pub const MARKET_CLOSE_NS: u64 = 57_600 * 1_000_000_000;
/// Default width of the volume image in ticks.
pub const DEFAULT_BOOK_WIDTH: usize = 200;

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("book is never two-sided before the first message")]
    NoMid,
    #[error("no messages to preprocess")]
    Empty,
    #[error("{messages} messages but {books} book rows")]
    Misaligned { messages: usize, books: usize },
    #[error(transparent)]
    Book(#[from] BookError),
}

/// Keeps types 1-4 inside regular trading hours, preserving alignment.
pub fn filter_messages(msgs: &[RawMessage], books: &[L2Snapshot]) -> (Vec<RawMessage>, Vec<L2Snapshot>) {
    msgs.iter()
        .zip(books)
        .filter(|(m, _)| {
            (1..=4).contains(&m.event_type) && (MARKET_OPEN_NS..MARKET_CLOSE_NS).contains(&m.time_ns)
        })
        .map(|(m, b)| (*m, b.clone()))
        .unzip()
}

/// A new limit order as remembered for later reference resolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OrderOrigin {
    pub price_ticks: i32,
    pub size: u64,
    pub time_ns: u64,
}

/// Reference triple for `msg`, or `None` for a new limit order.
/// `own_price_ticks` is the message's own price relative to the current mid,
/// used when the order was submitted before the data starts.
pub fn resolve_reference(
    msg: &RawMessage,
    own_price_ticks: i32,
    history: &HashMap<u64, OrderOrigin>,
) -> Option<Reference> {
    if msg.event_type == 1 {
        return None;
    }
    Some(match history.get(&msg.order_id) {
        Some(o) => Reference {
            price_ticks: o.price_ticks,
            size: clip_size(o.size),
            time_ns: o.time_ns,
        },
        None => Reference {
            price_ticks: own_price_ticks,
            size: clip_size(msg.size),
            time_ns: 0,
        },
    })
}

/// How often each field hit its truncation bound.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClipStats {
    pub price: u64,
    pub size: u64,
    pub dt: u64,
    pub reference: u64,
    /// Referential messages whose order id was not seen earlier in the data.
    pub unresolved_references: u64,
}

impl ClipStats {
    pub fn clipped_messages(&self) -> u64 {
        self.price + self.size + self.dt + self.reference
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DayDataset {
    pub symbol: String,
    pub date: String,
    pub book_width: usize,
    pub initial_snapshot: L2Snapshot,
    pub messages: Vec<Message>,
    /// `books[i]` is the book state message `i` acts upon.
    pub books: Vec<VolumeImage>,
    pub clip_stats: ClipStats,
    /// Replay outcome counts, indexed by [`CorrectionAction::code`].
    pub replay_actions: [u64; 6],
}

impl DayDataset {
    pub fn len(&self) -> usize {
        self.messages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.messages.is_empty()
    }
}

/// Stationarizes one day of filtered, aligned rows.
///
/// The first two-sided orderbook row seeds the book; the messages after it
/// are replayed through [`Simulator`] so that every price is taken relative
/// to the replayed mid and every volume image is the replayed state.
pub fn preprocess_day(
    symbol: &str,
    date: &str,
    msgs: &[RawMessage],
    books: &[L2Snapshot],
    book_width: usize,
) -> Result<DayDataset, PipelineError> {
    if msgs.len() != books.len() {
        return Err(PipelineError::Misaligned {
            messages: msgs.len(),
            books: books.len(),
        });
    }
    if msgs.is_empty() {
        return Err(PipelineError::Empty);
    }
    let start = books.iter().position(|b| b.is_two_sided()).ok_or(PipelineError::NoMid)?;
    if start + 1 >= msgs.len() {
        return Err(PipelineError::NoMid);
    }
    let initial_snapshot = books[start].clone();
    let mut sim = Simulator::from_snapshot(1, &initial_snapshot)?;

    let rows = &msgs[start + 1..];
    let mut history: HashMap<u64, OrderOrigin> = HashMap::new();
    let mut messages = Vec::with_capacity(rows.len());
    let mut images = Vec::with_capacity(rows.len());
    let mut stats = ClipStats::default();
    let mut actions = [0u64; 6];
    let mut prev_anchor = sim.anchor().expect("seeded from a two-sided book");
    let mut prev_time: Option<u64> = None;

    for raw in rows {
        let anchor = sim.anchor().expect("mid persists once defined");
        let image = sim.volume_image(prev_anchor, book_width)?;
        prev_anchor = anchor;

        let rel = raw.price.div_euclid(LOBSTER_TICK) - anchor;
        let price_ticks = clip_price_ticks(rel);
        stats.price += u64::from(price_ticks as i64 != rel);
        let size = clip_size(raw.size).max(1);
        stats.size += u64::from(raw.size > MAX_SIZE as u64);
        let dt = prev_time.map_or(0, |t| raw.time_ns.saturating_sub(t));
        stats.dt += u64::from(dt > MAX_DT_NS);
        prev_time = Some(raw.time_ns);

        let event_type = EventType::from_code(raw.event_type as i64).expect("filtered to types 1-4");
        let reference = resolve_reference(raw, price_ticks, &history);
        if let Some(r) = &reference {
            if !history.contains_key(&raw.order_id) {
                stats.unresolved_references += 1;
            }
            let orig = history.get(&raw.order_id).map_or(raw.size, |o| o.size);
            stats.reference += u64::from(orig > MAX_SIZE as u64 || r.price_ticks.abs() == MAX_PRICE_TICKS);
        } else {
            // a reused id overwrites: the latest submission wins
            history.insert(
                raw.order_id,
                OrderOrigin {
                    price_ticks,
                    size: raw.size,
                    time_ns: raw.time_ns.min(MAX_TIME_NS),
                },
            );
        }

        let msg = Message {
            event_type,
            direction: raw.direction,
            price_ticks,
            size,
            dt_ns: dt.min(MAX_DT_NS),
            time_ns: raw.time_ns.min(MAX_TIME_NS),
            reference,
        };
        let (outcome, _) = sim.correct_and_apply(&msg);
        actions[outcome.action.code() as usize] += 1;
        messages.push(msg);
        images.push(image);
    }

    Ok(DayDataset {
        symbol: symbol.to_string(),
        date: date.to_string(),
        book_width,
        initial_snapshot,
        messages,
        books: images,
        clip_stats: stats,
        replay_actions: actions,
    })
}

/// Result of re-deriving a dataset's volume images from its messages.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReplayCheck {
    pub checked: usize,
    pub first_mismatch: Option<usize>,
}

impl ReplayCheck {
    pub fn passed(&self) -> bool {
        self.first_mismatch.is_none()
    }
}

/// Replays the stored messages from the initial snapshot and compares each
/// intermediate volume image with the stored one.
pub fn replay_check(ds: &DayDataset) -> Result<ReplayCheck, PipelineError> {
    let mut sim = Simulator::from_snapshot(1, &ds.initial_snapshot)?;
    let mut prev_anchor = sim.anchor().ok_or(PipelineError::NoMid)?;
    for (i, (msg, stored)) in ds.messages.iter().zip(&ds.books).enumerate() {
        let image = sim.volume_image(prev_anchor, ds.book_width)?;
        if &image != stored {
            return Ok(ReplayCheck {
                checked: i,
                first_mismatch: Some(i),
            });
        }
        prev_anchor = image.anchor_tick;
        sim.correct_and_apply(msg);
    }
    Ok(ReplayCheck {
        checked: ds.messages.len(),
        first_mismatch: None,
    })
}

/// Share of replayed messages that applied as something other than what
/// the data said, for diagnostics.
pub fn replay_correction_rate(ds: &DayDataset) -> f64 {
    let total: u64 = ds.replay_actions.iter().sum();
    if total == 0 {
        return 0.0;
    }
    let corrected = ds.replay_actions[CorrectionAction::MatchIgnoringTime.code() as usize]
        + ds.replay_actions[CorrectionAction::Discarded.code() as usize];
    corrected as f64 / total as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lob::L2Level;
    use crate::message::Side;

    fn raw(time_s: u64, ty: u8, id: u64, size: u64, price: i64, dir: Side) -> RawMessage {
        RawMessage {
            time_ns: time_s * 1_000_000_000,
            event_type: ty,
            order_id: id,
            size,
            price,
            direction: dir,
        }
    }

    fn book(bid: i64, ask: i64) -> L2Snapshot {
        let mut s = L2Snapshot::empty(10, 0);
        s.asks[0] = L2Level { price: ask, volume: 100 };
        s.bids[0] = L2Level { price: bid, volume: 100 };
        s
    }

    #[test]
    fn filter_bounds() {
        let msgs = vec![
            raw(34_200, 1, 1, 1, 1_000_000, Side::Buy),
            raw(57_600, 1, 2, 1, 1_000_000, Side::Buy),
            raw(40_000, 5, 3, 1, 1_000_000, Side::Buy),
            raw(34_199, 1, 4, 1, 1_000_000, Side::Buy),
            raw(40_000, 4, 5, 1, 1_000_000, Side::Buy),
        ];
        let books = vec![book(10000, 10001); 5];
        let (m, b) = filter_messages(&msgs, &books);
        assert_eq!(m.iter().map(|m| m.order_id).collect::<Vec<_>>(), vec![1, 5]);
        assert_eq!(b.len(), 2);
    }

    #[test]
    fn price_relative_to_floored_mid() {
        // mid 100.005 dollars, floored to 100.00
        let msgs = vec![
            raw(34_300, 1, 1, 100, 1_000_100, Side::Sell),
            raw(34_301, 1, 2, 25_000, 999_800, Side::Buy),
        ];
        let books = vec![book(10000, 10001), book(10000, 10001)];
        let ds = preprocess_day("X", "d", &msgs, &books, 20).unwrap();
        assert_eq!(ds.messages.len(), 1);
        let m = ds.messages[0];
        assert_eq!(m.price_ticks, -2);
        assert_eq!(m.size, 9999);
        assert_eq!(m.dt_ns, 0);
        assert_eq!(ds.clip_stats.size, 1);
    }

    #[test]
    fn references_resolve_through_history() {
        let msgs = vec![
            raw(34_300, 1, 1, 100, 1_000_100, Side::Sell),
            raw(34_301, 1, 7, 30, 999_800, Side::Buy),
            raw(34_302, 1, 8, 40, 1_000_300, Side::Sell),
            raw(34_303, 3, 7, 30, 999_800, Side::Buy),
            raw(34_304, 2, 99, 50, 1_000_100, Side::Sell),
        ];
        let books = vec![book(10000, 10001); 5];
        let ds = preprocess_day("X", "d", &msgs, &books, 20).unwrap();
        let del = ds.messages[2];
        assert_eq!(
            del.reference,
            Some(Reference { price_ticks: -2, size: 30, time_ns: 34_301_000_000_000 })
        );
        assert_eq!(del.dt_ns, 1_000_000_000);
        // order from before the data: own price, own size, time zero
        let cancel = ds.messages[3];
        assert_eq!(cancel.reference, Some(Reference { price_ticks: 1, size: 50, time_ns: 0 }));
        assert_eq!(ds.clip_stats.unresolved_references, 1);
        assert!(ds.messages.iter().all(|m| m.validate().is_ok()));
        assert!(replay_check(&ds).unwrap().passed());
    }

    #[test]
    fn resolve_reference_latest_duplicate_wins() {
        let mut history = HashMap::new();
        let first = OrderOrigin { price_ticks: 3, size: 10, time_ns: 5 };
        let second = OrderOrigin { price_ticks: 4, size: 10, time_ns: 5 };
        history.insert(1, first);
        history.insert(1, second);
        let m = raw(34_400, 3, 1, 10, 0, Side::Buy);
        assert_eq!(resolve_reference(&m, 0, &history).unwrap().price_ticks, 4);
        let limit = raw(34_400, 1, 1, 10, 0, Side::Buy);
        assert_eq!(resolve_reference(&limit, 0, &history), None);
    }

    #[test]
    fn no_mid_rejected() {
        let mut one_sided = L2Snapshot::empty(10, 0);
        one_sided.bids[0] = L2Level { price: 100, volume: 1 };
        let msgs = vec![raw(34_300, 1, 1, 1, 10_000, Side::Buy); 3];
        let err = preprocess_day("X", "d", &msgs, &vec![one_sided; 3], 20).unwrap_err();
        assert!(matches!(err, PipelineError::NoMid));
    }
}
