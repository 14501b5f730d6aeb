//! Reader and writer for LOBSTER message/orderbook CSV pairs.
//!
//! Message rows: `time,type,order_id,size,price,direction` with time in
//! decimal seconds after midnight and prices in dollars times 10,000.
//! Orderbook rows interleave `ask_price,ask_size,bid_price,bid_size` per
//! level; row `i` is the book after message `i`.

use std::io::Read;
use std::path::{Path, PathBuf};

use crate::lob::{L2Level, L2Snapshot};
use crate::message::{RawMessage, Side};

/// LOBSTER price units per $0.01 tick.
pub const LOBSTER_TICK: i64 = 100;
/// Price LOBSTER writes for missing ask levels.
pub const LOBSTER_EMPTY_ASK: i64 = 9_999_999_999;
/// Price LOBSTER writes for missing bid levels.
pub const LOBSTER_EMPTY_BID: i64 = -9_999_999_999;

#[derive(Debug, thiserror::Error)]
pub enum LobsterError {
    #[error("{file} row {row}: {reason}")]
    MalformedRow {
        file: &'static str,
        row: usize,
        reason: String,
    },
    #[error("message file has {messages} rows but orderbook file has {books}")]
    MisalignedFiles { messages: usize, books: usize },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

/// `<SYM>_<date>_34200000_57600000_{message,orderbook}_<levels>.csv`
pub fn file_names(symbol: &str, date: &str, levels: usize) -> (String, String) {
    let stem = format!("{symbol}_{date}_34200000_57600000");
    (
        format!("{stem}_message_{levels}.csv"),
        format!("{stem}_orderbook_{levels}.csv"),
    )
}

/// Parses decimal seconds into integer nanoseconds without going through a
/// float. Digits beyond nanosecond precision are truncated.
pub fn parse_time_ns(field: &str) -> Option<u64> {
    let (secs, frac) = field.split_once('.').unwrap_or((field, ""));
    if secs.is_empty() || !secs.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    if !frac.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    let secs: u64 = secs.parse().ok()?;
    let mut nanos: u64 = 0;
    for i in 0..9 {
        let digit = frac.as_bytes().get(i).map_or(0, |b| (b - b'0') as u64);
        nanos = nanos * 10 + digit;
    }
    secs.checked_mul(1_000_000_000)?.checked_add(nanos)
}

pub fn format_time_ns(time_ns: u64) -> String {
    format!("{}.{:09}", time_ns / 1_000_000_000, time_ns % 1_000_000_000)
}

fn reader(input: impl Read) -> csv::Reader<impl Read> {
    csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(input)
}

fn malformed(file: &'static str, row: usize, reason: impl Into<String>) -> LobsterError {
    LobsterError::MalformedRow {
        file,
        row,
        reason: reason.into(),
    }
}

fn int_field(record: &csv::StringRecord, col: usize, file: &'static str, row: usize) -> Result<i64, LobsterError> {
    let raw = &record[col];
    raw.parse::<i64>()
        .or_else(|_| {
            // some exports write integral columns as floats
            raw.parse::<f64>()
                .ok()
                .filter(|f| f.fract() == 0.0 && f.is_finite())
                .map(|f| f as i64)
                .ok_or(())
        })
        .map_err(|_| malformed(file, row, format!("column {} is not an integer: {raw:?}", col + 1)))
}

pub fn parse_messages(input: impl Read) -> Result<Vec<RawMessage>, LobsterError> {
    let mut out = Vec::new();
    for (i, rec) in reader(input).records().enumerate() {
        let row = i + 1;
        let rec = rec.map_err(|e| malformed("message", row, e.to_string()))?;
        if rec.len() < 6 {
            return Err(malformed("message", row, format!("expected 6 columns, found {}", rec.len())));
        }
        let time_ns = parse_time_ns(&rec[0])
            .ok_or_else(|| malformed("message", row, format!("bad timestamp {:?}", &rec[0])))?;
        let event_type = int_field(&rec, 1, "message", row)?;
        let order_id = int_field(&rec, 2, "message", row)?;
        let size = int_field(&rec, 3, "message", row)?;
        let price = int_field(&rec, 4, "message", row)?;
        let direction = Side::from_lobster_code(int_field(&rec, 5, "message", row)?)
            .ok_or_else(|| malformed("message", row, "direction must be 1 or -1"))?;
        if !(1..=7).contains(&event_type) || order_id < 0 || size < 0 {
            return Err(malformed("message", row, "type, id or size out of range"));
        }
        out.push(RawMessage {
            time_ns,
            event_type: event_type as u8,
            order_id: order_id as u64,
            size: size as u64,
            price,
            direction,
        });
    }
    Ok(out)
}

fn to_level(price: i64, size: i64, empty: L2Level, tick: i64) -> L2Level {
    if size <= 0 || price == LOBSTER_EMPTY_ASK || price == LOBSTER_EMPTY_BID {
        empty
    } else {
        L2Level {
            price: price.div_euclid(tick),
            volume: size as u64,
        }
    }
}

/// Orderbook rows as tick-priced snapshots; timestamps are filled in from
/// the aligned message rows by [`parse_lobster`].
pub fn parse_orderbook(input: impl Read, levels: usize, tick: i64) -> Result<Vec<L2Snapshot>, LobsterError> {
    let mut out = Vec::new();
    for (i, rec) in reader(input).records().enumerate() {
        let row = i + 1;
        let rec = rec.map_err(|e| malformed("orderbook", row, e.to_string()))?;
        if rec.len() != 4 * levels {
            return Err(malformed(
                "orderbook",
                row,
                format!("expected {} columns, found {}", 4 * levels, rec.len()),
            ));
        }
        let mut snap = L2Snapshot::empty(levels, 0);
        for l in 0..levels {
            let base = 4 * l;
            let ap = int_field(&rec, base, "orderbook", row)?;
            let av = int_field(&rec, base + 1, "orderbook", row)?;
            let bp = int_field(&rec, base + 2, "orderbook", row)?;
            let bv = int_field(&rec, base + 3, "orderbook", row)?;
            snap.asks[l] = to_level(ap, av, L2Level::empty_ask(), tick);
            snap.bids[l] = to_level(bp, bv, L2Level::empty_bid(), tick);
        }
        out.push(snap);
    }
    Ok(out)
}

/// Parses a row-aligned message/orderbook pair.
pub fn parse_lobster(
    message_csv: impl Read,
    orderbook_csv: impl Read,
    levels: usize,
) -> Result<(Vec<RawMessage>, Vec<L2Snapshot>), LobsterError> {
    let messages = parse_messages(message_csv)?;
    let mut books = parse_orderbook(orderbook_csv, levels, LOBSTER_TICK)?;
    if messages.len() != books.len() {
        return Err(LobsterError::MisalignedFiles {
            messages: messages.len(),
            books: books.len(),
        });
    }
    for (snap, msg) in books.iter_mut().zip(&messages) {
        snap.time_ns = msg.time_ns;
    }
    Ok((messages, books))
}

/// Opens `<dir>/<SYM>_<date>_..._{message,orderbook}_<levels>.csv` and parses
/// the pair.
pub fn read_day(
    dir: &Path,
    symbol: &str,
    date: &str,
    levels: usize,
) -> Result<(Vec<RawMessage>, Vec<L2Snapshot>), LobsterError> {
    let (msg_name, book_name) = file_names(symbol, date, levels);
    let open = |name: &str| {
        let path = dir.join(name);
        std::fs::File::open(&path).map_err(|source| LobsterError::Io { path, source })
    };
    let msg_file = open(&msg_name)?;
    let book_file = open(&book_name)?;
    parse_lobster(
        std::io::BufReader::new(msg_file),
        std::io::BufReader::new(book_file),
        levels,
    )
}

pub fn write_messages(messages: &[RawMessage]) -> String {
    let mut out = String::new();
    for m in messages {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            format_time_ns(m.time_ns),
            m.event_type,
            m.order_id,
            m.size,
            m.price,
            m.direction.lobster_code()
        ));
    }
    out
}

pub fn write_orderbook(books: &[L2Snapshot], tick: i64) -> String {
    let mut out = String::new();
    for snap in books {
        let mut cols = Vec::with_capacity(4 * snap.depth());
        for (a, b) in snap.asks.iter().zip(&snap.bids) {
            if a.is_empty() {
                cols.push(LOBSTER_EMPTY_ASK.to_string());
                cols.push("0".into());
            } else {
                cols.push((a.price * tick).to_string());
                cols.push(a.volume.to_string());
            }
            if b.is_empty() {
                cols.push(LOBSTER_EMPTY_BID.to_string());
                cols.push("0".into());
            } else {
                cols.push((b.price * tick).to_string());
                cols.push(b.volume.to_string());
            }
        }
        out.push_str(&cols.join(","));
        out.push('\n');
    }
    out
}
