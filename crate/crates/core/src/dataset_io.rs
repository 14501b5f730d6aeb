//! On-disk formats.
//!
//! Day dataset: `<stem>.bin` plus `<stem>.json`. The binary file is
//!
//! ```text
//! magic  b"LOBGDS01"
//! n      u64 LE   messages
//! width  u64 LE   volume image width P
//! 9 message columns, n x i64 LE each, in field order:
//!   event_type, direction (+1/-1), price_ticks, size, dt_ns, time_ns,
//!   ref_price_ticks, ref_size, ref_time_ns   (NA stored as i64::MIN)
//! 2 + P book columns, n x i64 LE each:
//!   mid_change_ticks, anchor_tick, vol[0] .. vol[P-1]
//! ```
//!
//! The sidecar holds symbol, date, P, counts, the initial snapshot and the
//! preprocessing statistics.
//!
//! Token stream: magic `b"LOBGTOK1"`, u64 LE token count, then u32 LE tokens.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::lob::{L2Snapshot, VolumeImage};
use crate::message::{EventType, Message, Reference, Side};
use crate::pipeline::{ClipStats, DayDataset};
use crate::tokenizer::{self, Token};

const DATASET_MAGIC: &[u8; 8] = b"LOBGDS01";
const TOKENS_MAGIC: &[u8; 8] = b"LOBGTOK1";
const NA: i64 = i64::MIN;

pub const MESSAGE_COLUMNS: [&str; 9] = [
    "event_type",
    "direction",
    "price_ticks",
    "size",
    "dt_ns",
    "time_ns",
    "ref_price_ticks",
    "ref_size",
    "ref_time_ns",
];

#[derive(Debug, thiserror::Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{path}: {reason}")]
    Format { path: PathBuf, reason: String },
    #[error("{path}: {source}")]
    Json { path: PathBuf, source: serde_json::Error },
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> IoError + '_ {
    move |source| IoError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn format_err(path: &Path, reason: impl Into<String>) -> IoError {
    IoError::Format {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

/// Writes through a temporary file in the target directory and renames it
/// into place, so readers never see a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), IoError> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut builder = tempfile::Builder::new();
    #[cfg(unix)]
    {
        use std::os::unix::fs::PermissionsExt;
        builder.permissions(fs::Permissions::from_mode(0o644));
    }
    let mut tmp = builder.tempfile_in(dir).map_err(io_err(dir))?;
    tmp.write_all(bytes).map_err(io_err(path))?;
    tmp.as_file().sync_all().map_err(io_err(path))?;
    tmp.persist(path).map_err(|e| IoError::Io {
        path: path.to_path_buf(),
        source: e.error,
    })?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), IoError> {
    let mut text = serde_json::to_string_pretty(value).map_err(|source| IoError::Json {
        path: path.to_path_buf(),
        source,
    })?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, IoError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|source| IoError::Json {
        path: path.to_path_buf(),
        source,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSidecar {
    pub symbol: String,
    pub date: String,
    pub book_width: usize,
    pub messages: usize,
    pub message_columns: Vec<String>,
    pub initial_snapshot: L2Snapshot,
    pub clip_stats: ClipStats,
    pub replay_actions: [u64; 6],
}

pub fn dataset_paths(dir: &Path, symbol: &str, date: &str) -> (PathBuf, PathBuf) {
    let stem = format!("{symbol}_{date}");
    (dir.join(format!("{stem}.bin")), dir.join(format!("{stem}.json")))
}

fn message_columns(m: &Message) -> [i64; 9] {
    let (rp, rs, rt) = match m.reference {
        Some(r) => (r.price_ticks as i64, r.size as i64, r.time_ns as i64),
        None => (NA, NA, NA),
    };
    [
        m.event_type.code() as i64,
        m.direction.lobster_code() as i64,
        m.price_ticks as i64,
        m.size as i64,
        m.dt_ns as i64,
        m.time_ns as i64,
        rp,
        rs,
        rt,
    ]
}

pub fn encode_dataset(ds: &DayDataset) -> Vec<u8> {
    let n = ds.messages.len();
    let p = ds.book_width;
    let mut out = Vec::with_capacity(24 + 8 * n * (11 + p));
    out.extend_from_slice(DATASET_MAGIC);
    out.extend_from_slice(&(n as u64).to_le_bytes());
    out.extend_from_slice(&(p as u64).to_le_bytes());
    let rows: Vec<[i64; 9]> = ds.messages.iter().map(message_columns).collect();
    for c in 0..9 {
        for r in &rows {
            out.extend_from_slice(&r[c].to_le_bytes());
        }
    }
    for b in &ds.books {
        out.extend_from_slice(&b.mid_change_ticks.to_le_bytes());
    }
    for b in &ds.books {
        out.extend_from_slice(&b.anchor_tick.to_le_bytes());
    }
    for c in 0..p {
        for b in &ds.books {
            out.extend_from_slice(&b.vols[c].to_le_bytes());
        }
    }
    out
}

pub fn write_dataset(dir: &Path, ds: &DayDataset) -> Result<(PathBuf, PathBuf), IoError> {
    let (bin, json) = dataset_paths(dir, &ds.symbol, &ds.date);
    write_atomic(&bin, &encode_dataset(ds))?;
    let sidecar = DatasetSidecar {
        symbol: ds.symbol.clone(),
        date: ds.date.clone(),
        book_width: ds.book_width,
        messages: ds.messages.len(),
        message_columns: MESSAGE_COLUMNS.iter().map(|s| s.to_string()).collect(),
        initial_snapshot: ds.initial_snapshot.clone(),
        clip_stats: ds.clip_stats.clone(),
        replay_actions: ds.replay_actions,
    };
    write_json(&json, &sidecar)?;
    Ok((bin, json))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn take<const N: usize>(&mut self) -> Option<[u8; N]> {
        let s = self.bytes.get(self.pos..self.pos + N)?;
        self.pos += N;
        s.try_into().ok()
    }

    fn i64(&mut self) -> Option<i64> {
        self.take::<8>().map(i64::from_le_bytes)
    }
}

fn decode_message(path: &Path, row: usize, c: [i64; 9]) -> Result<Message, IoError> {
    let bad = |what: &str| format_err(path, format!("row {row}: bad {what}"));
    let event_type = EventType::from_code(c[0]).ok_or_else(|| bad("event type"))?;
    let direction = Side::from_lobster_code(c[1]).ok_or_else(|| bad("direction"))?;
    let reference = if c[6] == NA {
        None
    } else {
        Some(Reference {
            price_ticks: i32::try_from(c[6]).map_err(|_| bad("ref price"))?,
            size: u32::try_from(c[7]).map_err(|_| bad("ref size"))?,
            time_ns: u64::try_from(c[8]).map_err(|_| bad("ref time"))?,
        })
    };
    let msg = Message {
        event_type,
        direction,
        price_ticks: i32::try_from(c[2]).map_err(|_| bad("price"))?,
        size: u32::try_from(c[3]).map_err(|_| bad("size"))?,
        dt_ns: u64::try_from(c[4]).map_err(|_| bad("dt"))?,
        time_ns: u64::try_from(c[5]).map_err(|_| bad("time"))?,
        reference,
    };
    msg.validate().map_err(|e| format_err(path, format!("row {row}: {e}")))?;
    Ok(msg)
}

pub fn read_dataset(bin: &Path, json: &Path) -> Result<DayDataset, IoError> {
    let sidecar: DatasetSidecar = read_json(json)?;
    let bytes = fs::read(bin).map_err(io_err(bin))?;
    let truncated = || format_err(bin, "truncated file");
    let mut cur = Cursor { bytes: &bytes, pos: 0 };
    if cur.take::<8>().as_ref() != Some(DATASET_MAGIC) {
        return Err(format_err(bin, "not a dataset file"));
    }
    let n = cur.take::<8>().map(u64::from_le_bytes).ok_or_else(truncated)? as usize;
    let p = cur.take::<8>().map(u64::from_le_bytes).ok_or_else(truncated)? as usize;
    if n != sidecar.messages || p != sidecar.book_width {
        return Err(format_err(bin, "header disagrees with sidecar"));
    }
    if bytes.len() != 24 + 8 * n * (11 + p) {
        return Err(truncated());
    }
    let mut cols = vec![[0i64; 9]; n];
    for c in 0..9 {
        for row in cols.iter_mut() {
            row[c] = cur.i64().ok_or_else(truncated)?;
        }
    }
    let messages = cols
        .into_iter()
        .enumerate()
        .map(|(i, c)| decode_message(bin, i, c))
        .collect::<Result<Vec<_>, _>>()?;
    let mut books: Vec<VolumeImage> = (0..n)
        .map(|_| VolumeImage {
            mid_change_ticks: 0,
            anchor_tick: 0,
            vols: vec![0; p],
        })
        .collect();
    for b in books.iter_mut() {
        b.mid_change_ticks = cur.i64().ok_or_else(truncated)?;
    }
    for b in books.iter_mut() {
        b.anchor_tick = cur.i64().ok_or_else(truncated)?;
    }
    for c in 0..p {
        for b in books.iter_mut() {
            b.vols[c] = cur.i64().ok_or_else(truncated)?;
        }
    }
    Ok(DayDataset {
        symbol: sidecar.symbol,
        date: sidecar.date,
        book_width: p,
        initial_snapshot: sidecar.initial_snapshot,
        messages,
        books,
        clip_stats: sidecar.clip_stats,
        replay_actions: sidecar.replay_actions,
    })
}

/// Lists `(bin, json)` dataset pairs in `dir`, sorted by file name.
pub fn list_datasets(dir: &Path) -> Result<Vec<(PathBuf, PathBuf)>, IoError> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(io_err(dir))? {
        let path = entry.map_err(io_err(dir))?.path();
        if path.extension().is_some_and(|e| e == "bin") {
            let json = path.with_extension("json");
            if json.exists() {
                out.push((path, json));
            }
        }
    }
    out.sort();
    Ok(out)
}

pub fn encode_token_stream(tokens: &[Token]) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 4 * tokens.len());
    out.extend_from_slice(TOKENS_MAGIC);
    out.extend_from_slice(&(tokens.len() as u64).to_le_bytes());
    for t in tokens {
        out.extend_from_slice(&t.to_le_bytes());
    }
    out
}

pub fn decode_token_stream(path: &Path, bytes: &[u8]) -> Result<Vec<Token>, IoError> {
    if bytes.get(..8) != Some(TOKENS_MAGIC.as_slice()) {
        return Err(format_err(path, "not a token stream"));
    }
    let n = u64::from_le_bytes(bytes[8..16].try_into().map_err(|_| format_err(path, "truncated"))?) as usize;
    let body = &bytes[16..];
    if body.len() != 4 * n {
        return Err(format_err(path, "token count disagrees with file size"));
    }
    Ok(body
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().expect("chunk of 4")))
        .collect())
}

/// Encodes every message of `ds` back to back.
pub fn dataset_tokens(ds: &DayDataset) -> Result<Vec<Token>, tokenizer::TokenError> {
    let mut out = Vec::with_capacity(ds.messages.len() * tokenizer::TOKENS_PER_MESSAGE);
    for m in &ds.messages {
        out.extend_from_slice(tokenizer::encode(m)?.tokens());
    }
    Ok(out)
}

pub fn write_token_stream(path: &Path, tokens: &[Token]) -> Result<(), IoError> {
    write_atomic(path, &encode_token_stream(tokens))
}

pub fn read_token_stream(path: &Path) -> Result<Vec<Token>, IoError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    decode_token_stream(path, &bytes)
}

/// Messages as CSV with a header row; NA reference fields are written as
/// `NA`.
pub fn messages_csv(messages: &[Message]) -> String {
    let mut out = MESSAGE_COLUMNS.join(",");
    out.push('\n');
    for m in messages {
        let cols = message_columns(m);
        let fields: Vec<String> = cols
            .iter()
            .map(|&v| if v == NA { "NA".to_string() } else { v.to_string() })
            .collect();
        out.push_str(&fields.join(","));
        out.push('\n');
    }
    out
}
