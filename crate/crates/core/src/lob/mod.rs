//! Deterministic level-3 limit order book.
//!
//! Prices are integer ticks throughout; conversion from LOBSTER price units
//! happens at ingestion. Half-tick mids are kept exactly as `bid + ask`.

mod book;
mod snapshot;

pub use book::{BookError, LimitOutcome, Mid, OrderBookL3, OrderKey, RestingOrder, Trade};
pub use snapshot::{
    L2Level, L2Snapshot, SnapshotError, VolumeImage, EMPTY_ASK_TICKS, EMPTY_BID_TICKS,
};
