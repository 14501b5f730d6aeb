use serde::{Deserialize, Serialize};

/// Price used for missing ask levels (LOBSTER's dummy ask price in ticks).
pub const EMPTY_ASK_TICKS: i64 = 99_999_999;
/// Price used for missing bid levels.
pub const EMPTY_BID_TICKS: i64 = -99_999_999;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct L2Level {
    pub price: i64,
    pub volume: u64,
}

impl L2Level {
    pub fn empty_ask() -> Self {
        L2Level {
            price: EMPTY_ASK_TICKS,
            volume: 0,
        }
    }

    pub fn empty_bid() -> Self {
        L2Level {
            price: EMPTY_BID_TICKS,
            volume: 0,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.volume == 0
    }
}

/// Aggregate volume at the best `l` price levels per side, prices in ticks.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct L2Snapshot {
    pub time_ns: u64,
    /// Best ask first.
    pub asks: Vec<L2Level>,
    /// Best bid first.
    pub bids: Vec<L2Level>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum SnapshotError {
    #[error("snapshot has {asks} ask and {bids} bid levels")]
    UnevenDepth { asks: usize, bids: usize },
    #[error("{side} levels are not strictly ordered at level {level}")]
    Unordered { side: &'static str, level: usize },
    #[error("populated {side} level {level} follows an empty level")]
    GapBeforeLevel { side: &'static str, level: usize },
    #[error("crossed snapshot: best bid {bid} >= best ask {ask}")]
    Crossed { bid: i64, ask: i64 },
}

impl L2Snapshot {
    /// A snapshot of `levels` sentinel entries per side.
    pub fn empty(levels: usize, time_ns: u64) -> Self {
        L2Snapshot {
            time_ns,
            asks: vec![L2Level::empty_ask(); levels],
            bids: vec![L2Level::empty_bid(); levels],
        }
    }

    pub fn depth(&self) -> usize {
        self.asks.len()
    }

    pub fn best_ask(&self) -> Option<L2Level> {
        self.asks.first().copied().filter(|l| !l.is_empty())
    }

    pub fn best_bid(&self) -> Option<L2Level> {
        self.bids.first().copied().filter(|l| !l.is_empty())
    }

    pub fn is_two_sided(&self) -> bool {
        self.best_ask().is_some() && self.best_bid().is_some()
    }

    /// Checks level ordering, sentinel placement and that the book is not
    /// crossed.
    pub fn validate(&self) -> Result<(), SnapshotError> {
        if self.asks.len() != self.bids.len() {
            return Err(SnapshotError::UnevenDepth {
                asks: self.asks.len(),
                bids: self.bids.len(),
            });
        }
        check_side(&self.asks, "ask", |prev, next| next > prev)?;
        check_side(&self.bids, "bid", |prev, next| next < prev)?;
        if let (Some(b), Some(a)) = (self.best_bid(), self.best_ask()) {
            if b.price >= a.price {
                return Err(SnapshotError::Crossed {
                    bid: b.price,
                    ask: a.price,
                });
            }
        }
        Ok(())
    }
}

fn check_side(
    levels: &[L2Level],
    side: &'static str,
    ordered: impl Fn(i64, i64) -> bool,
) -> Result<(), SnapshotError> {
    let mut prev: Option<i64> = None;
    let mut seen_empty = false;
    for (i, level) in levels.iter().enumerate() {
        if level.is_empty() {
            seen_empty = true;
            continue;
        }
        if seen_empty {
            return Err(SnapshotError::GapBeforeLevel { side, level: i });
        }
        if let Some(p) = prev {
            if !ordered(p, level.price) {
                return Err(SnapshotError::Unordered { side, level: i });
            }
        }
        prev = Some(level.price);
    }
    Ok(())
}

/// Signed resting volume on a fixed tick window around the mid, plus the
/// change of the mid anchor since the previous observation.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct VolumeImage {
    pub mid_change_ticks: i64,
    /// Floored mid tick the window is centered on.
    pub anchor_tick: i64,
    /// Bid volume positive, ask volume negative; entry `i` holds the tick
    /// `anchor_tick - P/2 + i`.
    pub vols: Vec<i64>,
}

impl VolumeImage {
    pub fn width(&self) -> usize {
        self.vols.len()
    }

    /// Model input features: the mid change followed by the volumes, both
    /// compressed with a signed `ln(1 + |x|)`.
    pub fn features(&self) -> Vec<f32> {
        let mut out = Vec::with_capacity(self.vols.len() + 1);
        out.push(signed_log1p(self.mid_change_ticks));
        out.extend(self.vols.iter().map(|&v| signed_log1p(v)));
        out
    }
}

fn signed_log1p(x: i64) -> f32 {
    let mag = (x.unsigned_abs() as f64).ln_1p() as f32;
    if x < 0 {
        -mag
    } else {
        mag
    }
}
