//! Message types shared by the book engine, the preprocessing pipeline and
//! the tokenizer.

use serde::{Deserialize, Serialize};

/// Largest representable tick distance from the mid anchor.
pub const MAX_PRICE_TICKS: i32 = 999;
/// Largest representable order size.
pub const MAX_SIZE: u32 = 9999;
/// Inter-arrival times are stored with 12 decimal digits.
pub const MAX_DT_NS: u64 = 999_999_999_999;
/// Arrival times are stored with 15 decimal digits.
pub const MAX_TIME_NS: u64 = 999_999_999_999_999;

/// Order direction. Bids are buy orders, asks are sell orders.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Side {
    Buy,
    Sell,
}

impl Side {
    pub fn opposite(self) -> Side {
        match self {
            Side::Buy => Side::Sell,
            Side::Sell => Side::Buy,
        }
    }

    /// LOBSTER direction code: +1 buy, -1 sell.
    pub fn lobster_code(self) -> i8 {
        match self {
            Side::Buy => 1,
            Side::Sell => -1,
        }
    }

    pub fn from_lobster_code(code: i64) -> Option<Side> {
        match code {
            1 => Some(Side::Buy),
            -1 => Some(Side::Sell),
            _ => None,
        }
    }
}

/// The four visible LOBSTER event types that are modeled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum EventType {
    /// New limit order (type 1).
    Limit,
    /// Partial cancellation (type 2).
    Cancel,
    /// Full deletion (type 3).
    Delete,
    /// Execution of a visible order (type 4).
    Execute,
}

impl EventType {
    pub const ALL: [EventType; 4] = [
        EventType::Limit,
        EventType::Cancel,
        EventType::Delete,
        EventType::Execute,
    ];

    pub fn code(self) -> u8 {
        match self {
            EventType::Limit => 1,
            EventType::Cancel => 2,
            EventType::Delete => 3,
            EventType::Execute => 4,
        }
    }

    pub fn from_code(code: i64) -> Option<EventType> {
        match code {
            1 => Some(EventType::Limit),
            2 => Some(EventType::Cancel),
            3 => Some(EventType::Delete),
            4 => Some(EventType::Execute),
            _ => None,
        }
    }

    /// Every type except new limit orders removes liquidity from an existing
    /// order and therefore carries a reference.
    pub fn is_referential(self) -> bool {
        !matches!(self, EventType::Limit)
    }
}

/// One row of a LOBSTER message file.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawMessage {
    /// Nanoseconds after midnight.
    pub time_ns: u64,
    /// LOBSTER event type, 1..=7.
    pub event_type: u8,
    pub order_id: u64,
    pub size: u64,
    /// Dollars times 10,000.
    pub price: i64,
    pub direction: Side,
}

/// Original price/size/time of the limit order a referential message acts
/// upon.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Reference {
    pub price_ticks: i32,
    pub size: u32,
    pub time_ns: u64,
}

/// Stationarized message: type, direction, price, size, inter-arrival time,
/// arrival time, then the reference fields (absent for new limit orders).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Message {
    pub event_type: EventType,
    pub direction: Side,
    /// Ticks relative to the floored mid price prevailing before the message.
    pub price_ticks: i32,
    pub size: u32,
    pub dt_ns: u64,
    pub time_ns: u64,
    pub reference: Option<Reference>,
}

/// Violation of a [`Message`] field invariant.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum FieldError {
    #[error("{field} = {value} is outside [{lo}, {hi}]")]
    OutOfRange {
        field: &'static str,
        value: i64,
        lo: i64,
        hi: i64,
    },
    #[error("reference fields must be present exactly for referential messages ({0:?})")]
    ReferenceMismatch(EventType),
}

fn check_range(field: &'static str, value: i64, lo: i64, hi: i64) -> Result<(), FieldError> {
    if value < lo || value > hi {
        Err(FieldError::OutOfRange {
            field,
            value,
            lo,
            hi,
        })
    } else {
        Ok(())
    }
}

impl Message {
    /// Checks every field range and the reference/NA pairing.
    pub fn validate(&self) -> Result<(), FieldError> {
        let p = MAX_PRICE_TICKS as i64;
        check_range("price", self.price_ticks as i64, -p, p)?;
        check_range("size", self.size as i64, 1, MAX_SIZE as i64)?;
        check_range("dt", self.dt_ns as i64, 0, MAX_DT_NS as i64)?;
        check_range("time", self.time_ns as i64, 0, MAX_TIME_NS as i64)?;
        match (self.event_type.is_referential(), &self.reference) {
            (true, Some(r)) => {
                check_range("ref_price", r.price_ticks as i64, -p, p)?;
                check_range("ref_size", r.size as i64, 1, MAX_SIZE as i64)?;
                check_range("ref_time", r.time_ns as i64, 0, MAX_TIME_NS as i64)?;
                Ok(())
            }
            (false, None) => Ok(()),
            _ => Err(FieldError::ReferenceMismatch(self.event_type)),
        }
    }
}

pub fn clip_price_ticks(ticks: i64) -> i32 {
    ticks.clamp(-(MAX_PRICE_TICKS as i64), MAX_PRICE_TICKS as i64) as i32
}

pub fn clip_size(size: u64) -> u32 {
    size.min(MAX_SIZE as u64) as u32
}

#[cfg(test)]
mod tests {
    use super::*;

    fn limit() -> Message {
        Message {
            event_type: EventType::Limit,
            direction: Side::Buy,
            price_ticks: -2,
            size: 100,
            dt_ns: 0,
            time_ns: 34_200_000_000_001,
            reference: None,
        }
    }

    #[test]
    fn limit_without_reference_is_valid() {
        assert_eq!(limit().validate(), Ok(()));
    }

    #[test]
    fn reference_pairing_is_enforced() {
        let mut m = limit();
        m.reference = Some(Reference {
            price_ticks: 0,
            size: 1,
            time_ns: 0,
        });
        assert!(matches!(m.validate(), Err(FieldError::ReferenceMismatch(_))));
        m.event_type = EventType::Delete;
        assert_eq!(m.validate(), Ok(()));
        m.reference = None;
        assert!(m.validate().is_err());
    }

    #[test]
    fn zero_size_rejected() {
        let mut m = limit();
        m.size = 0;
        assert!(m.validate().is_err());
    }
}
