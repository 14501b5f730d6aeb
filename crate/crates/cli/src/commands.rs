//! Subcommand implementations. Each takes the effective config and an
//! output directory and returns a summary for the caller to print.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use lobgen_core::dataset_io::{
    dataset_paths, dataset_tokens, list_datasets, read_dataset, write_atomic, write_dataset, write_token_stream,
};
use lobgen_core::lobster::{file_names, read_day};
use lobgen_core::pipeline::{filter_messages, preprocess_day, replay_check, DayDataset, ReplayCheck};
use lobgen_core::synth::{generate_day, write_day, SynthConfig};
use lobgen_generator::context::GenerationContext;
use lobgen_generator::protocol::{run_protocol, sample_sequences, stream_seed, EvalReport};
use lobgen_generator::sample::generate;
use lobgen_generator::stream::write_stream;
use lobgen_s5::checkpoint;
use lobgen_s5::infer::CachedModel;
use lobgen_s5::model::S5Model;
use lobgen_s5::train::{log_csv_header, log_csv_row, train, TrainDay, TrainError};
use rand::SeedableRng;
use rayon::prelude::*;
use serde::Serialize;

use crate::config::RunConfig;

#[derive(Debug, Serialize)]
struct RunManifest<'a> {
    command: &'a str,
    version: &'a str,
    config_hash: String,
    inputs: Vec<String>,
    outputs: Vec<String>,
}

/// Writes the effective config and a manifest of inputs and outputs.
pub fn write_run_files(cfg: &RunConfig, out: &Path, command: &str, inputs: &[PathBuf], outputs: &[PathBuf]) -> anyhow::Result<()> {
    write_atomic(&out.join("run_config.toml"), cfg.to_toml().as_bytes())?;
    let names = |ps: &[PathBuf]| ps.iter().map(|p| p.display().to_string()).collect();
    let manifest = RunManifest {
        command,
        version: env!("CARGO_PKG_VERSION"),
        config_hash: cfg.hash(),
        inputs: names(inputs),
        outputs: names(outputs),
    };
    write_atomic(&out.join("run_manifest.json"), serde_json::to_string_pretty(&manifest)?.as_bytes())?;
    Ok(())
}

/// Synthetic fixture dates, one per day.
pub fn synthetic_dates(days: usize) -> Vec<String> {
    (0..days).map(|d| format!("2024-01-{:02}", d + 2)).collect()
}

/// Writes synthetic LOBSTER-format days into `out`.
pub fn cmd_synth(cfg: &RunConfig, out: &Path, days: usize, messages: usize) -> anyhow::Result<Vec<PathBuf>> {
    let dates = if cfg.dates.is_empty() { synthetic_dates(days) } else { cfg.dates.clone() };
    let mut files = Vec::new();
    for (i, date) in dates.iter().enumerate() {
        let day = generate_day(&SynthConfig {
            seed: stream_seed(cfg.seed, "synth", i as u64),
            messages,
            levels: cfg.levels,
            ..SynthConfig::default()
        });
        let (m, b) = write_day(out, &cfg.symbol, date, &day, cfg.levels)?;
        println!("{date}: {} rows", day.messages.len());
        files.extend([m, b]);
    }
    Ok(files)
}

#[derive(Debug, Clone, Serialize)]
pub struct DaySummary {
    pub date: String,
    pub raw_rows: usize,
    pub messages: usize,
    pub clipped_share: f64,
    pub unresolved_references: u64,
}

/// Dates to process: the configured list, or every LOBSTER message file
/// for the symbol found in `raw_dir`.
fn ingest_dates(cfg: &RunConfig) -> anyhow::Result<Vec<String>> {
    if !cfg.dates.is_empty() {
        return Ok(cfg.dates.clone());
    }
    let prefix = format!("{}_", cfg.symbol);
    let suffix = format!("_message_{}.csv", cfg.levels);
    let mut dates = Vec::new();
    for e in fs::read_dir(&cfg.raw_dir).with_context(|| format!("reading {}", cfg.raw_dir.display()))? {
        let name = e?.file_name().to_string_lossy().into_owned();
        if let Some(rest) = name.strip_prefix(&prefix).filter(|_| name.ends_with(&suffix)) {
            if let Some(date) = rest.split('_').next() {
                dates.push(date.to_string());
            }
        }
    }
    dates.sort();
    dates.dedup();
    if dates.is_empty() {
        bail!("no {} message files in {}", cfg.symbol, cfg.raw_dir.display());
    }
    Ok(dates)
}

/// Parses, filters, stationarizes and persists each configured day.
pub fn cmd_ingest(cfg: &RunConfig, out: &Path) -> anyhow::Result<Vec<DaySummary>> {
    let dates = ingest_dates(cfg)?;
    let mut summaries = Vec::new();
    let mut manifest = String::from("symbol,date,raw_rows,messages,clipped_share,unresolved_references\n");
    let mut outputs = Vec::new();
    for date in &dates {
        let (raw, books) = read_day(&cfg.raw_dir, &cfg.symbol, date, cfg.levels)
            .with_context(|| format!("{} {date}: {:?}", cfg.symbol, file_names(&cfg.symbol, date, cfg.levels)))?;
        let (msgs, snaps) = filter_messages(&raw, &books);
        if msgs.is_empty() {
            eprintln!("warning: {} {date} has no in-session messages, skipped", cfg.symbol);
            continue;
        }
        let ds = preprocess_day(&cfg.symbol, date, &msgs, &snaps, cfg.book_width)
            .with_context(|| format!("{} {date}", cfg.symbol))?;
        let (bin, json) = write_dataset(out, &ds)?;
        outputs.extend([bin, json]);
        let s = DaySummary {
            date: date.clone(),
            raw_rows: raw.len(),
            messages: ds.len(),
            clipped_share: ds.clip_stats.clipped_messages() as f64 / ds.len().max(1) as f64,
            unresolved_references: ds.clip_stats.unresolved_references,
        };
        println!(
            "{} {date}: {} rows, {} messages, clipped {:.4}%",
            cfg.symbol,
            s.raw_rows,
            s.messages,
            100.0 * s.clipped_share
        );
        manifest.push_str(&format!(
            "{},{},{},{},{:.6},{}\n",
            cfg.symbol, s.date, s.raw_rows, s.messages, s.clipped_share, s.unresolved_references
        ));
        summaries.push(s);
    }
    let manifest_path = out.join("manifest.csv");
    write_atomic(&manifest_path, manifest.as_bytes())?;
    outputs.push(manifest_path);
    write_run_files(cfg, out, "ingest", &[cfg.raw_dir.clone()], &outputs)?;
    Ok(summaries)
}

/// Dataset pairs in `dataset_dir`, restricted to the configured dates when
/// any are given.
pub fn dataset_files(cfg: &RunConfig) -> anyhow::Result<Vec<(PathBuf, PathBuf)>> {
    if cfg.dates.is_empty() {
        return Ok(list_datasets(&cfg.dataset_dir)?);
    }
    Ok(cfg
        .dates
        .iter()
        .map(|d| dataset_paths(&cfg.dataset_dir, &cfg.symbol, d))
        .collect())
}

pub fn load_datasets(cfg: &RunConfig) -> anyhow::Result<(Vec<DayDataset>, Vec<PathBuf>)> {
    let files = dataset_files(cfg)?;
    if files.is_empty() {
        bail!("no datasets in {}", cfg.dataset_dir.display());
    }
    let days = files
        .iter()
        .map(|(b, j)| read_dataset(b, j))
        .collect::<Result<Vec<_>, _>>()?;
    Ok((days, files.into_iter().map(|(b, _)| b).collect()))
}

/// Writes each dataset's token stream next to it (or into `out`).
pub fn cmd_encode(cfg: &RunConfig, out: &Path) -> anyhow::Result<Vec<PathBuf>> {
    let (days, inputs) = load_datasets(cfg)?;
    let mut outputs = Vec::new();
    for ds in &days {
        let tokens = dataset_tokens(ds)?;
        let path = out.join(format!("{}_{}.tok", ds.symbol, ds.date));
        write_token_stream(&path, &tokens)?;
        println!("{} {}: {} tokens", ds.symbol, ds.date, tokens.len());
        outputs.push(path);
    }
    write_run_files(cfg, out, "encode", &inputs, &outputs)?;
    Ok(outputs)
}

/// Holds out the last day, or the tail of a single day.
pub fn split_days(mut days: Vec<TrainDay>, val_fraction: f64) -> (Vec<TrainDay>, Vec<TrainDay>) {
    if days.len() >= 2 {
        let val = days.pop().expect("two or more days");
        return (days, vec![val]);
    }
    let day = days.pop().expect("one day");
    let cut = ((day.len() as f64) * (1.0 - val_fraction)).round() as usize;
    let (train, val) = day.split_at(cut);
    (vec![train], vec![val])
}

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub checkpoint: PathBuf,
    pub steps: u64,
    pub initial_val_loss: f32,
    pub val_losses: Vec<f32>,
    pub train_losses: Vec<f32>,
}

pub fn cmd_train(cfg: &RunConfig, out: &Path) -> anyhow::Result<TrainSummary> {
    let (days, inputs) = load_datasets(cfg)?;
    let train_days = days.iter().map(TrainDay::from_dataset).collect::<Result<Vec<_>, _>>()?;
    let (train_days, val_days) = split_days(train_days, cfg.val_fraction);
    let model = S5Model::<f32>::init(cfg.model_config());
    println!("model parameters: {}", model.param_count());
    fs::create_dir_all(out)?;
    let log_path = out.join("train_log.csv");
    let mut log_file = OpenOptions::new().create(true).append(true).open(&log_path)?;
    if log_file.metadata()?.len() == 0 {
        writeln!(log_file, "{}", log_csv_header())?;
    }
    let mut outputs = vec![log_path.clone()];
    let mut epoch_files = Vec::new();
    let outcome = train(
        model,
        cfg.train_config(),
        &train_days,
        &val_days,
        |row| {
            println!("step {:>6} {:5} loss {:.4} ({:.0} tok/s)", row.step, row.split, row.loss, row.tokens_per_sec);
            // the log is diagnostic; a failed append does not stop training
            let _ = writeln!(log_file, "{}", log_csv_row(&row));
        },
        |epoch, trainer| {
            let path = out.join(format!("epoch_{}.ckpt", epoch + 1));
            checkpoint::save(&path, &trainer.model, trainer.step)
                .map_err(|e| TrainError::Output(e.to_string()))?;
            epoch_files.push(path);
            Ok(())
        },
    )?;
    let final_path = out.join("final.ckpt");
    checkpoint::save(&final_path, &outcome.model, outcome.steps)?;
    outputs.extend(epoch_files);
    outputs.push(final_path.clone());
    write_run_files(cfg, out, "train", &inputs, &outputs)?;
    Ok(TrainSummary {
        checkpoint: final_path,
        steps: outcome.steps,
        initial_val_loss: outcome.initial_val_loss,
        val_losses: outcome.val_losses,
        train_losses: outcome.train_losses,
    })
}

fn load_model(cfg: &RunConfig, ckpt: &Path) -> anyhow::Result<CachedModel> {
    let (model, header) = checkpoint::load(ckpt).with_context(|| format!("loading {}", ckpt.display()))?;
    if header.config.p != cfg.book_width {
        bail!("checkpoint book width {} differs from config {}", header.config.p, cfg.book_width);
    }
    Ok(CachedModel::new(model))
}

#[derive(Debug, Clone)]
pub struct GenerateSummary {
    pub files: Vec<PathBuf>,
    pub messages: Vec<usize>,
}

/// Generates `generate_sequences` continuations from random real windows.
pub fn cmd_generate(cfg: &RunConfig, ckpt: &Path, out: &Path) -> anyhow::Result<GenerateSummary> {
    let model = load_model(cfg, ckpt)?;
    let (days, mut inputs) = load_datasets(cfg)?;
    let proto = cfg.generate_protocol();
    let specs = sample_sequences(&days, &proto)?;
    let n = model.model.cfg.n_messages;
    let results = specs
        .par_iter()
        .enumerate()
        .map(|(i, spec)| -> anyhow::Result<(Vec<PathBuf>, usize)> {
            let day = &days[spec.day];
            let mut ctx = GenerationContext::from_dataset(day, spec.start, n)?;
            let initial = ctx.sim.book().export_l2(cfg.levels, ctx.last_time_ns);
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(stream_seed(proto.seed, "generate", i as u64));
            let records = generate(&model, &mut ctx, proto.steps, &mut rng);
            let files = write_stream(&out.join("generated"), &format!("seq{i:04}"), initial, day.book_width, &records)?;
            Ok((files, records.len()))
        })
        .collect::<anyhow::Result<Vec<_>>>()?;
    let mut files = Vec::new();
    let mut messages = Vec::new();
    for (f, m) in results {
        files.extend(f);
        messages.push(m);
    }
    println!("{} sequences, {} messages each", messages.len(), proto.steps);
    inputs.push(ckpt.to_path_buf());
    write_run_files(cfg, out, "generate", &inputs, &files)?;
    Ok(GenerateSummary { files, messages })
}

/// Prefixes each report with a comment line naming version and config.
pub fn stamped(stamp: &str, body: &str) -> String {
    format!("# {stamp}\n{body}")
}

pub fn cmd_eval(cfg: &RunConfig, ckpt: &Path, out: &Path) -> anyhow::Result<EvalReport> {
    let model = load_model(cfg, ckpt)?;
    let (days, mut inputs) = load_datasets(cfg)?;
    let (report, _) = run_protocol(&model, &days, &cfg.eval_protocol())?;
    let stamp = cfg.stamp();
    let mut outputs = Vec::new();
    for (name, body) in report.files() {
        let path = out.join(name);
        write_atomic(&path, stamped(&stamp, &body).as_bytes())?;
        outputs.push(path);
    }
    print!("{}", report.summary());
    inputs.push(ckpt.to_path_buf());
    write_run_files(cfg, out, "eval", &inputs, &outputs)?;
    Ok(report)
}

#[derive(Debug, Clone)]
pub struct ReplayResult {
    pub dataset: PathBuf,
    pub check: ReplayCheck,
    pub empty: bool,
}

impl ReplayResult {
    pub fn passed(&self) -> bool {
        self.check.passed()
    }
}

/// Replays each dataset and compares its stored volume images.
pub fn cmd_replay_check(files: &[(PathBuf, PathBuf)]) -> anyhow::Result<Vec<ReplayResult>> {
    let mut out = Vec::new();
    for (bin, json) in files {
        let ds = read_dataset(bin, json)?;
        let check = replay_check(&ds)?;
        let empty = ds.is_empty();
        if empty {
            eprintln!("warning: {} is empty", bin.display());
        }
        match check.first_mismatch {
            None => println!("PASS {} ({} messages)", bin.display(), check.checked),
            Some(i) => println!("FAIL {} (first divergence at message {i})", bin.display()),
        }
        out.push(ReplayResult {
            dataset: bin.clone(),
            check,
            empty,
        });
    }
    Ok(out)
}
