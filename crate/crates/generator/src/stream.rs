//! Generated streams on disk: the dataset layout plus one correction byte
//! per message.

use std::path::{Path, PathBuf};

use lobgen_core::dataset_io::{messages_csv, write_atomic, write_dataset, IoError};
use lobgen_core::lob::L2Snapshot;
use lobgen_core::pipeline::{ClipStats, DayDataset};

use crate::context::StepRecord;

/// Packs generated records as a dataset. `initial` is the book at the
/// start of generation.
pub fn records_dataset(name: &str, initial: L2Snapshot, width: usize, records: &[StepRecord]) -> DayDataset {
    let mut actions = [0u64; 6];
    for r in records {
        actions[r.outcome.action.code() as usize] += 1;
    }
    DayDataset {
        symbol: name.to_string(),
        date: "generated".to_string(),
        book_width: width,
        initial_snapshot: initial,
        messages: records.iter().map(|r| r.message).collect(),
        books: records.iter().map(|r| r.book.clone()).collect(),
        clip_stats: ClipStats::default(),
        replay_actions: actions,
    }
}

pub fn outcome_bytes(records: &[StepRecord]) -> Vec<u8> {
    records.iter().map(|r| r.outcome.to_byte()).collect()
}

/// Messages with the correction outcome appended to each row.
pub fn records_csv(records: &[StepRecord]) -> String {
    let messages: Vec<_> = records.iter().map(|r| r.message).collect();
    let base = messages_csv(&messages);
    let mut lines = base.lines();
    let mut out = format!("{},correction\n", lines.next().unwrap_or_default());
    for (line, r) in lines.zip(records) {
        out.push_str(&format!("{line},{}\n", r.outcome.action.name()));
    }
    out
}

/// Writes `<name>_generated.bin/.json`, `.outcomes` and `.csv` into `dir`.
pub fn write_stream(
    dir: &Path,
    name: &str,
    initial: L2Snapshot,
    width: usize,
    records: &[StepRecord],
) -> Result<Vec<PathBuf>, IoError> {
    let ds = records_dataset(name, initial, width, records);
    let (bin, json) = write_dataset(dir, &ds)?;
    let outcomes = dir.join(format!("{name}_generated.outcomes"));
    write_atomic(&outcomes, &outcome_bytes(records))?;
    let csv = dir.join(format!("{name}_generated.csv"));
    write_atomic(&csv, records_csv(records).as_bytes())?;
    Ok(vec![bin, json, outcomes, csv])
}
