//! Fixed 12011-token message vocabulary and the 22-token message encoding.
//!
//! Layout of token ids (contiguous, non-overlapping):
//!
//! | range          | ids             | values           |
//! |----------------|-----------------|------------------|
//! | NA             | 0               |                  |
//! | MSK            | 1               |                  |
//! | HID            | 2               |                  |
//! | event type     | 3..=6           | types 1..=4      |
//! | direction      | 7..=8           | buy, sell        |
//! | price sign     | 9..=10          | +, -             |
//! | price magnitude| 11..=1010       | 0..=999 ticks    |
//! | size           | 1011..=11010    | 0..=9999         |
//! | time group     | 11011..=12010   | 000..=999        |
//!
//! Message positions: 0 type, 1 direction, 2-3 price, 4 size, 5-8 dt,
//! 9-13 arrival time, 14-15 reference price, 16 reference size, 17-21
//! reference time. Time fields are zero-padded and split into big-endian
//! groups of three digits.

use std::fmt;
use std::ops::RangeInclusive;

use sha2::{Digest, Sha256};

use crate::message::{EventType, FieldError, Message, Reference, Side, MAX_TIME_NS};

pub type Token = u32;

pub const VOCAB_SIZE: usize = 12011;
pub const TOKENS_PER_MESSAGE: usize = 22;

pub const NA: Token = 0;
pub const MSK: Token = 1;
pub const HID: Token = 2;
const TYPE_BASE: Token = 3;
const DIR_BASE: Token = 7;
const SIGN_BASE: Token = 9;
const MAG_BASE: Token = 11;
const SIZE_BASE: Token = 1011;
const TIME_BASE: Token = 11011;

/// Token ranges by field name, in id order.
pub const VOCABULARY: [(&str, RangeInclusive<Token>); 9] = [
    ("NA", NA..=NA),
    ("MSK", MSK..=MSK),
    ("HID", HID..=HID),
    ("event_type", TYPE_BASE..=TYPE_BASE + 3),
    ("direction", DIR_BASE..=DIR_BASE + 1),
    ("price_sign", SIGN_BASE..=SIGN_BASE + 1),
    ("price_magnitude", MAG_BASE..=MAG_BASE + 999),
    ("size", SIZE_BASE..=SIZE_BASE + 9999),
    ("time_group", TIME_BASE..=TIME_BASE + 999),
];

pub const POS_TYPE: usize = 0;
pub const POS_DIRECTION: usize = 1;
pub const POS_PRICE_SIGN: usize = 2;
pub const POS_PRICE_MAG: usize = 3;
pub const POS_SIZE: usize = 4;
pub const POS_DT: usize = 5;
pub const POS_TIME: usize = 9;
pub const POS_REF_PRICE_SIGN: usize = 14;
pub const POS_REF_PRICE_MAG: usize = 15;
pub const POS_REF_SIZE: usize = 16;
pub const POS_REF_TIME: usize = 17;

const DT_GROUPS: usize = 4;
const TIME_GROUPS: usize = 5;

/// Positions that are prediction targets: everything except the arrival
/// time, which is derived from the sampled inter-arrival time.
pub const MASKABLE_POSITIONS: [usize; 17] = [0, 1, 2, 3, 4, 5, 6, 7, 8, 14, 15, 16, 17, 18, 19, 20, 21];

/// Column labels for the maskable positions, in position order.
pub const MASKABLE_POSITION_NAMES: [&str; 17] = [
    "type",
    "direction",
    "price_sign",
    "price_magnitude",
    "size",
    "dt_0",
    "dt_1",
    "dt_2",
    "dt_3",
    "ref_price_sign",
    "ref_price_magnitude",
    "ref_size",
    "ref_time_0",
    "ref_time_1",
    "ref_time_2",
    "ref_time_3",
    "ref_time_4",
];

pub fn maskable_positions() -> &'static [usize; 17] {
    &MASKABLE_POSITIONS
}

/// Field kind occupying each message position.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FieldKind {
    EventType,
    Direction,
    PriceSign,
    PriceMagnitude,
    Size,
    TimeGroup,
}

impl FieldKind {
    pub fn at(position: usize) -> FieldKind {
        match position {
            POS_TYPE => FieldKind::EventType,
            POS_DIRECTION => FieldKind::Direction,
            POS_PRICE_SIGN | POS_REF_PRICE_SIGN => FieldKind::PriceSign,
            POS_PRICE_MAG | POS_REF_PRICE_MAG => FieldKind::PriceMagnitude,
            POS_SIZE | POS_REF_SIZE => FieldKind::Size,
            5..=13 | 17..=21 => FieldKind::TimeGroup,
            _ => panic!("message position {position} out of range"),
        }
    }

    pub fn range(self) -> RangeInclusive<Token> {
        match self {
            FieldKind::EventType => TYPE_BASE..=TYPE_BASE + 3,
            FieldKind::Direction => DIR_BASE..=DIR_BASE + 1,
            FieldKind::PriceSign => SIGN_BASE..=SIGN_BASE + 1,
            FieldKind::PriceMagnitude => MAG_BASE..=MAG_BASE + 999,
            FieldKind::Size => SIZE_BASE..=SIZE_BASE + 9999,
            FieldKind::TimeGroup => TIME_BASE..=TIME_BASE + 999,
        }
    }
}

/// Exactly 22 token ids.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct EncodedMessage(pub [Token; TOKENS_PER_MESSAGE]);

impl EncodedMessage {
    pub fn tokens(&self) -> &[Token; TOKENS_PER_MESSAGE] {
        &self.0
    }

    /// Copy with MSK at `position` and HID on every later position.
    pub fn masked_at(&self, position: usize) -> EncodedMessage {
        let mut out = *self;
        out.0[position] = MSK;
        for t in &mut out.0[position + 1..] {
            *t = HID;
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum TokenError {
    #[error("field out of range: {0}")]
    FieldOutOfRange(FieldError),
    #[error("token {token} is not valid at position {position}")]
    Syntax { position: usize, token: Token },
    #[error("reference fields are partially NA")]
    PartialReference,
    #[error("decoded message is invalid: {0}")]
    InvalidMessage(FieldError),
}

fn time_groups<const N: usize>(value: u64) -> [Token; N] {
    let mut groups = [0; N];
    let mut v = value;
    for g in groups.iter_mut().rev() {
        *g = TIME_BASE + (v % 1000) as Token;
        v /= 1000;
    }
    groups
}

/// Tokens for the arrival-time positions 9..=13.
pub fn encode_time(time_ns: u64) -> [Token; TIME_GROUPS] {
    time_groups::<TIME_GROUPS>(time_ns.min(MAX_TIME_NS))
}

fn encode_price(ticks: i32) -> [Token; 2] {
    let sign = if ticks < 0 { SIGN_BASE + 1 } else { SIGN_BASE };
    [sign, MAG_BASE + ticks.unsigned_abs()]
}

pub fn encode(msg: &Message) -> Result<EncodedMessage, TokenError> {
    msg.validate().map_err(TokenError::FieldOutOfRange)?;
    let mut t = [NA; TOKENS_PER_MESSAGE];
    t[POS_TYPE] = TYPE_BASE + (msg.event_type.code() as Token - 1);
    t[POS_DIRECTION] = match msg.direction {
        Side::Buy => DIR_BASE,
        Side::Sell => DIR_BASE + 1,
    };
    t[POS_PRICE_SIGN..=POS_PRICE_MAG].copy_from_slice(&encode_price(msg.price_ticks));
    t[POS_SIZE] = SIZE_BASE + msg.size;
    t[POS_DT..POS_DT + DT_GROUPS].copy_from_slice(&time_groups::<DT_GROUPS>(msg.dt_ns));
    t[POS_TIME..POS_TIME + TIME_GROUPS].copy_from_slice(&encode_time(msg.time_ns));
    if let Some(r) = &msg.reference {
        t[POS_REF_PRICE_SIGN..=POS_REF_PRICE_MAG].copy_from_slice(&encode_price(r.price_ticks));
        t[POS_REF_SIZE] = SIZE_BASE + r.size;
        t[POS_REF_TIME..].copy_from_slice(&time_groups::<TIME_GROUPS>(r.time_ns));
    }
    Ok(EncodedMessage(t))
}

fn field_value(tokens: &[Token], position: usize) -> Result<u32, TokenError> {
    let token = tokens[position];
    let range = FieldKind::at(position).range();
    if range.contains(&token) {
        Ok(token - range.start())
    } else {
        Err(TokenError::Syntax { position, token })
    }
}

fn decode_price(tokens: &[Token], pos: usize) -> Result<i32, TokenError> {
    let negative = field_value(tokens, pos)? == 1;
    let mag = field_value(tokens, pos + 1)? as i32;
    Ok(if negative { -mag } else { mag })
}

fn decode_groups(tokens: &[Token], start: usize, n: usize) -> Result<u64, TokenError> {
    (start..start + n).try_fold(0u64, |acc, p| Ok(acc * 1000 + field_value(tokens, p)? as u64))
}

/// Inter-arrival time held in positions 5..=8.
pub fn decode_dt(tokens: &[Token]) -> Result<u64, TokenError> {
    decode_groups(tokens, POS_DT, DT_GROUPS)
}

/// Inverse of [`encode`]. Rejects tokens outside their position's range,
/// partially NA references and messages violating field invariants.
pub fn decode(enc: &EncodedMessage) -> Result<Message, TokenError> {
    let t = &enc.0;
    let event_type = EventType::from_code(field_value(t, POS_TYPE)? as i64 + 1)
        .expect("type range has four values");
    let direction = if field_value(t, POS_DIRECTION)? == 0 {
        Side::Buy
    } else {
        Side::Sell
    };
    let price_ticks = decode_price(t, POS_PRICE_SIGN)?;
    let size = field_value(t, POS_SIZE)?;
    let dt_ns = decode_groups(t, POS_DT, DT_GROUPS)?;
    let time_ns = decode_groups(t, POS_TIME, TIME_GROUPS)?;
    let na_count = t[POS_REF_PRICE_SIGN..].iter().filter(|&&x| x == NA).count();
    let reference = match na_count {
        0 => Some(Reference {
            price_ticks: decode_price(t, POS_REF_PRICE_SIGN)?,
            size: field_value(t, POS_REF_SIZE)?,
            time_ns: decode_groups(t, POS_REF_TIME, TIME_GROUPS)?,
        }),
        n if n == TOKENS_PER_MESSAGE - POS_REF_PRICE_SIGN => None,
        _ => return Err(TokenError::PartialReference),
    };
    let msg = Message {
        event_type,
        direction,
        price_ticks,
        size,
        dt_ns,
        time_ns,
        reference,
    };
    msg.validate().map_err(TokenError::InvalidMessage)?;
    Ok(msg)
}

/// Set of allowed token ids, stored as disjoint inclusive ranges.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FieldMask {
    pub position: usize,
    ranges: Vec<RangeInclusive<Token>>,
}

impl FieldMask {
    fn new(position: usize, ranges: Vec<RangeInclusive<Token>>) -> Self {
        debug_assert!(ranges.iter().any(|r| !r.is_empty()));
        FieldMask { position, ranges }
    }

    pub fn contains(&self, token: Token) -> bool {
        self.ranges.iter().any(|r| r.contains(&token))
    }

    pub fn len(&self) -> usize {
        self.ranges
            .iter()
            .map(|r| (r.end() + 1).saturating_sub(*r.start()) as usize)
            .sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn ranges(&self) -> &[RangeInclusive<Token>] {
        &self.ranges
    }

    pub fn iter(&self) -> impl Iterator<Item = Token> + '_ {
        self.ranges.iter().flat_map(|r| r.clone())
    }
}

fn is_limit_type(token: Token) -> bool {
    token == TYPE_BASE
}

/// Tokens syntactically valid at `position` given the tokens already fixed
/// to its left. Reference positions also admit NA when the message is a new
/// limit order, and admit only NA once the reference has started with NA.
pub fn validity_mask(prefix: &[Token], position: usize) -> FieldMask {
    let range = FieldKind::at(position).range();
    if position < POS_REF_PRICE_SIGN {
        return FieldMask::new(position, vec![range]);
    }
    if position > POS_REF_PRICE_SIGN && prefix[POS_REF_PRICE_SIGN] == NA {
        return FieldMask::new(position, vec![NA..=NA]);
    }
    if position == POS_REF_PRICE_SIGN && is_limit_type(prefix[POS_TYPE]) {
        return FieldMask::new(position, vec![NA..=NA, range]);
    }
    FieldMask::new(position, vec![range])
}

/// [`validity_mask`] narrowed to completions that decode into a valid
/// message: sizes are positive, negative prices have a nonzero magnitude,
/// and references are NA exactly for new limit orders.
pub fn generation_mask(prefix: &[Token], position: usize) -> FieldMask {
    let limit = position > POS_TYPE && is_limit_type(prefix[POS_TYPE]);
    match position {
        p if p >= POS_REF_PRICE_SIGN && limit => FieldMask::new(position, vec![NA..=NA]),
        POS_SIZE | POS_REF_SIZE => FieldMask::new(position, vec![SIZE_BASE + 1..=SIZE_BASE + 9999]),
        POS_PRICE_MAG | POS_REF_PRICE_MAG if prefix[position - 1] == SIGN_BASE + 1 => {
            FieldMask::new(position, vec![MAG_BASE + 1..=MAG_BASE + 999])
        }
        _ => validity_mask(prefix, position),
    }
}

/// Text manifest of the vocabulary ranges: `name lo hi` per line.
pub fn vocabulary_manifest() -> String {
    let mut out = format!("# lob message vocabulary, {VOCAB_SIZE} tokens, {TOKENS_PER_MESSAGE} per message\n");
    for (name, range) in VOCABULARY.iter() {
        out.push_str(&format!("{name} {} {}\n", range.start(), range.end()));
    }
    out
}

/// Hex SHA-256 of [`vocabulary_manifest`].
pub fn manifest_hash() -> String {
    hex::encode(Sha256::digest(vocabulary_manifest().as_bytes()))
}

impl fmt::Display for EncodedMessage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(|t| t.to_string()).collect();
        write!(f, "[{}]", parts.join(" "))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::message::{MAX_DT_NS, MAX_PRICE_TICKS, MAX_SIZE};
    use proptest::prelude::*;

    fn msg(event_type: EventType) -> Message {
        Message {
            event_type,
            direction: Side::Sell,
            price_ticks: -2,
            size: 100,
            dt_ns: 0,
            time_ns: 34_200_000_000_001,
            reference: event_type.is_referential().then_some(Reference {
                price_ticks: 3,
                size: 250,
                time_ns: 34_100_000_000_000,
            }),
        }
    }

    #[test]
    fn vocabulary_partitions_ids() {
        let mut next = 0;
        for (_, r) in VOCABULARY.iter() {
            assert_eq!(*r.start(), next);
            next = r.end() + 1;
        }
        assert_eq!(next as usize, VOCAB_SIZE);
        assert_eq!(1 + 1 + 1 + 4 + 2 + 2 + 1000 + 10000 + 1000, VOCAB_SIZE);
    }

    #[test]
    fn zero_dt_encodes_identical_groups() {
        let e = encode(&msg(EventType::Limit)).unwrap();
        let dt = &e.0[POS_DT..POS_DT + 4];
        assert!(dt.iter().all(|&t| t == TIME_BASE));
    }

    #[test]
    fn negative_price_pair() {
        let e = encode(&msg(EventType::Limit)).unwrap();
        assert_eq!(e.0[POS_PRICE_SIGN], SIGN_BASE + 1);
        assert_eq!(e.0[POS_PRICE_MAG], MAG_BASE + 2);
    }

    #[test]
    fn time_digit_groups() {
        let e = encode(&msg(EventType::Limit)).unwrap();
        let groups: Vec<u32> = e.0[POS_TIME..POS_TIME + 5].iter().map(|t| t - TIME_BASE).collect();
        assert_eq!(groups, vec![34, 200, 0, 0, 1]);
    }

    #[test]
    fn limit_reference_is_na() {
        let e = encode(&msg(EventType::Limit)).unwrap();
        assert!(e.0[14..].iter().all(|&t| t == NA));
    }

    #[test]
    fn encode_rejects_out_of_range() {
        let mut m = msg(EventType::Limit);
        m.price_ticks = 1000;
        assert!(matches!(encode(&m), Err(TokenError::FieldOutOfRange(_))));
    }

    #[test]
    fn decode_rejects_wrong_field() {
        let mut e = encode(&msg(EventType::Cancel)).unwrap();
        e.0[POS_DIRECTION] = TYPE_BASE;
        assert_eq!(
            decode(&e),
            Err(TokenError::Syntax {
                position: 1,
                token: TYPE_BASE
            })
        );
    }

    #[test]
    fn decode_rejects_partial_na() {
        let mut e = encode(&msg(EventType::Delete)).unwrap();
        e.0[POS_REF_PRICE_SIGN] = NA;
        assert_eq!(decode(&e), Err(TokenError::PartialReference));
    }

    #[test]
    fn decode_rejects_zero_size() {
        let mut e = encode(&msg(EventType::Limit)).unwrap();
        e.0[POS_SIZE] = SIZE_BASE;
        assert!(matches!(decode(&e), Err(TokenError::InvalidMessage(_))));
    }

    #[test]
    fn masks_by_position() {
        let e = encode(&msg(EventType::Limit)).unwrap();
        let m0 = validity_mask(&e.0, 0);
        assert_eq!(m0.len(), 4);
        assert!(m0.iter().all(|t| (3..=6).contains(&t)));
        assert_eq!(validity_mask(&e.0, 4).len(), 10000);
        let m14 = validity_mask(&e.0, 14);
        assert!(m14.contains(NA));
        assert_eq!(m14.len(), 3);
        let m15 = validity_mask(&e.0, 15);
        assert_eq!(m15.iter().collect::<Vec<_>>(), vec![NA]);

        let c = encode(&msg(EventType::Cancel)).unwrap();
        assert!(!validity_mask(&c.0, 14).contains(NA));
        assert!(!validity_mask(&c.0, 20).contains(NA));
    }

    #[test]
    fn maskable_position_set() {
        let p = maskable_positions();
        assert!(!p.contains(&9));
        assert!(p.contains(&17));
        assert_eq!(p.len(), 22 - 5);
    }

    #[test]
    fn masked_at_hides_right_context() {
        let e = encode(&msg(EventType::Limit)).unwrap();
        let m = e.masked_at(0);
        assert_eq!(m.0[0], MSK);
        assert!(m.0[1..].iter().all(|&t| t == HID));
        let m = e.masked_at(21);
        assert_eq!(m.0[21], MSK);
        assert_eq!(&m.0[..21], &e.0[..21]);
    }

    #[test]
    fn manifest_lists_ranges() {
        let text = vocabulary_manifest();
        assert!(text.contains("size 1011 11010"));
        assert!(text.contains("time_group 11011 12010"));
        assert_eq!(manifest_hash().len(), 64);
    }

    pub(crate) fn arb_message() -> impl Strategy<Value = Message> {
        let p = MAX_PRICE_TICKS;
        (
            0usize..4,
            any::<bool>(),
            -p..=p,
            1..=MAX_SIZE,
            0..=MAX_DT_NS,
            0..=MAX_TIME_NS,
            (-p..=p, 1..=MAX_SIZE, 0..=MAX_TIME_NS),
        )
            .prop_map(|(ty, buy, price, size, dt, time, (rp, rs, rt))| {
                let event_type = EventType::ALL[ty];
                Message {
                    event_type,
                    direction: if buy { Side::Buy } else { Side::Sell },
                    price_ticks: price,
                    size,
                    dt_ns: dt,
                    time_ns: time,
                    reference: event_type.is_referential().then_some(Reference {
                        price_ticks: rp,
                        size: rs,
                        time_ns: rt,
                    }),
                }
            })
    }

    proptest! {
        #[test]
        fn round_trip(m in arb_message()) {
            let e = encode(&m).unwrap();
            prop_assert_eq!(decode(&e).unwrap(), m);
        }

        #[test]
        fn masks_admit_encoded_token(m in arb_message(), pos in 0usize..22) {
            let e = encode(&m).unwrap();
            prop_assert!(validity_mask(&e.0, pos).contains(e.0[pos]));
            prop_assert!(generation_mask(&e.0, pos).contains(e.0[pos]));
        }

        #[test]
        fn tokens_stay_in_field_ranges(m in arb_message()) {
            let e = encode(&m).unwrap();
            for (pos, &tok) in e.0.iter().enumerate() {
                prop_assert!((tok as usize) < VOCAB_SIZE);
                let in_range = FieldKind::at(pos).range().contains(&tok);
                prop_assert!(in_range || (pos >= 14 && tok == NA));
            }
        }
    }
}
