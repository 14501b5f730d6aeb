//! Generated-vs-realized evaluation: sample test sequences, generate
//! continuations, score the realized continuations, and compare returns,
//! event mix and inter-arrival times.

use lobgen_core::metrics::{
    bands_csv, event_type_frequencies, interarrival_ecdf, return_bands, return_correlation, CorrelationReport,
    EventFrequencies, InterarrivalReport, MetricsError, PerplexityReport, ReturnBand, ReturnSeries, TokenScore,
};
use lobgen_core::metrics::perplexity_report;
use lobgen_core::model_api::ConditionalTokenModel;
use lobgen_core::pipeline::DayDataset;
use lobgen_core::replay::CorrectionAction;
use lobgen_core::tokenizer::{self, EncodedMessage, TokenError};
use lobgen_core::{EventType, Message};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::context::{ContextError, GenerationContext, StepRecord};
use crate::perplexity::{score_sequence, ScoredSequence};
use crate::sample::generate;

#[derive(Debug, Error)]
pub enum ProtocolError {
    #[error("context of {context} messages is shorter than the model window {n}")]
    ContextTooShort { context: usize, n: usize },
    #[error("no day holds {needed} messages")]
    NoEligibleDay { needed: usize },
    #[error(transparent)]
    Context(#[from] ContextError),
    #[error(transparent)]
    Token(#[from] TokenError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalProtocol {
    pub sequences: usize,
    /// Real messages before the generation point; the model sees the last
    /// `n` of them.
    pub context: usize,
    /// Messages generated, and realized messages compared, per sequence.
    pub steps: usize,
    /// Central coverage of the return bands.
    pub coverage: f64,
    pub pp_grid: usize,
    pub hist_bins: usize,
    pub seed: u64,
}

impl Default for EvalProtocol {
    fn default() -> Self {
        EvalProtocol {
            sequences: 1000,
            context: 500,
            steps: 100,
            coverage: 0.95,
            pp_grid: 200,
            hist_bins: 40,
            seed: 0,
        }
    }
}

/// Independent stream for `(stage, index)` derived from the base seed.
pub fn stream_seed(seed: u64, stage: &str, index: u64) -> u64 {
    // FNV-1a over the stage name, mixed with the seed and index
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in stage.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    let mut x = h ^ seed.rotate_left(17) ^ index.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    // splitmix64 finalizer
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SequenceSpec {
    pub day: usize,
    /// First context message; generation starts at `start + context`.
    pub start: usize,
}

/// Uniform over every admissible start in every day.
pub fn sample_sequences(days: &[DayDataset], proto: &EvalProtocol) -> Result<Vec<SequenceSpec>, ProtocolError> {
    let needed = proto.context + proto.steps;
    let counts: Vec<usize> = days.iter().map(|d| (d.len() + 1).saturating_sub(needed)).collect();
    let total: usize = counts.iter().sum();
    if total == 0 {
        return Err(ProtocolError::NoEligibleDay { needed });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(proto.seed, "sequences", 0));
    Ok((0..proto.sequences)
        .map(|_| {
            let mut k = rng.random_range(0..total);
            let mut day = 0;
            while k >= counts[day] {
                k -= counts[day];
                day += 1;
            }
            SequenceSpec { day, start: k }
        })
        .collect())
}

#[derive(Debug, Clone)]
pub struct SequenceOutcome {
    pub spec: SequenceSpec,
    pub generated: Vec<StepRecord>,
    pub realized: Vec<Message>,
    /// Mid at the generation point followed by the mid after each message.
    pub generated_mids: Vec<Option<f64>>,
    pub realized_mids: Vec<Option<f64>>,
    pub scores: Vec<TokenScore>,
}

pub fn encode_day(day: &DayDataset) -> Result<Vec<EncodedMessage>, TokenError> {
    day.messages.iter().map(tokenizer::encode).collect()
}

pub fn run_sequence<M: ConditionalTokenModel>(
    model: &M,
    day: &DayDataset,
    encoded: &[EncodedMessage],
    spec: SequenceSpec,
    index: u64,
    proto: &EvalProtocol,
) -> Result<SequenceOutcome, ProtocolError> {
    let n = model.window();
    if proto.context < n {
        return Err(ProtocolError::ContextTooShort {
            context: proto.context,
            n,
        });
    }
    let t = spec.start + proto.context;
    let mut ctx = GenerationContext::from_dataset(day, t - n, n)?;
    let mid0 = ctx.mid_ticks();

    let mut real_ctx = ctx.clone();
    let realized: Vec<Message> = day.messages[t..t + proto.steps].to_vec();
    let mut realized_mids = vec![mid0];
    for m in &realized {
        realized_mids.push(real_ctx.apply(m).mid_after);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(proto.seed, "generate", index));
    let generated = generate(model, &mut ctx, proto.steps, &mut rng);
    let mut generated_mids = vec![mid0];
    generated_mids.extend(generated.iter().map(|r| r.mid_after));

    let scores = score_sequence(
        model,
        &ScoredSequence {
            messages: encoded,
            books: &day.books,
            targets: t..t + proto.steps,
        },
    );
    Ok(SequenceOutcome {
        spec,
        generated,
        realized,
        generated_mids,
        realized_mids,
        scores,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrectionSummary {
    /// Indexed by [`CorrectionAction::code`].
    pub counts: [u64; 6],
    pub size_clipped: u64,
    /// Generated cancels, deletes and executions.
    pub referential: u64,
    pub discarded_share: f64,
}

impl CorrectionSummary {
    pub fn from_records<'a>(records: impl IntoIterator<Item = &'a StepRecord>) -> Self {
        let mut counts = [0u64; 6];
        let mut size_clipped = 0;
        let mut referential = 0;
        let mut total = 0u64;
        for r in records {
            total += 1;
            counts[r.outcome.action.code() as usize] += 1;
            size_clipped += u64::from(r.outcome.size_clipped);
            referential += u64::from(r.outcome.original.event_type != EventType::Limit);
        }
        CorrectionSummary {
            counts,
            size_clipped,
            referential,
            discarded_share: counts[CorrectionAction::Discarded.code() as usize] as f64 / total.max(1) as f64,
        }
    }

    /// Outcomes other than a plain new order.
    pub fn referential_outcomes(&self) -> u64 {
        self.counts[1..].iter().sum()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("action,count\n");
        for a in CorrectionAction::ALL {
            out.push_str(&format!("{},{}\n", a.name(), self.counts[a.code() as usize]));
        }
        out.push_str(&format!("size_clipped,{}\nreferential_messages,{}\n", self.size_clipped, self.referential));
        out
    }
}

#[derive(Debug, Clone)]
pub struct EvalReport {
    pub protocol: EvalProtocol,
    pub specs: Vec<SequenceSpec>,
    pub perplexity: PerplexityReport,
    pub correlation: CorrelationReport,
    pub generated_bands: Vec<ReturnBand>,
    pub realized_bands: Vec<ReturnBand>,
    pub events: EventFrequencies,
    pub interarrival: InterarrivalReport,
    pub corrections: CorrectionSummary,
}

/// Aggregates per-sequence outcomes in their given order.
pub fn aggregate(proto: &EvalProtocol, outcomes: &[SequenceOutcome]) -> Result<EvalReport, ProtocolError> {
    let scores: Vec<Vec<TokenScore>> = outcomes.iter().map(|o| o.scores.clone()).collect();
    let gen_paths: Vec<_> = outcomes.iter().map(|o| o.generated_mids.clone()).collect();
    let real_paths: Vec<_> = outcomes.iter().map(|o| o.realized_mids.clone()).collect();
    let gen_returns = ReturnSeries::from_paths(&gen_paths)?;
    let real_returns = ReturnSeries::from_paths(&real_paths)?;
    let gen_msgs: Vec<&Message> = outcomes.iter().flat_map(|o| o.generated.iter().map(|r| &r.message)).collect();
    let real_msgs: Vec<&Message> = outcomes.iter().flat_map(|o| o.realized.iter()).collect();
    let types = |ms: &[&Message]| ms.iter().map(|m| m.event_type).collect::<Vec<_>>();
    let dts = |ms: &[&Message]| ms.iter().map(|m| m.dt_ns).collect::<Vec<_>>();
    Ok(EvalReport {
        protocol: proto.clone(),
        specs: outcomes.iter().map(|o| o.spec).collect(),
        perplexity: perplexity_report(&scores),
        correlation: return_correlation(&gen_returns, &real_returns)?,
        generated_bands: return_bands(&gen_returns, proto.coverage),
        realized_bands: return_bands(&real_returns, proto.coverage),
        events: event_type_frequencies(&types(&gen_msgs), &types(&real_msgs)),
        interarrival: interarrival_ecdf(&dts(&gen_msgs), &dts(&real_msgs), proto.pp_grid, proto.hist_bins),
        corrections: CorrectionSummary::from_records(outcomes.iter().flat_map(|o| &o.generated)),
    })
}

/// Runs the whole protocol. Sequences run in parallel with per-sequence
/// random streams, so results do not depend on the thread count.
pub fn run_protocol<M: ConditionalTokenModel>(
    model: &M,
    days: &[DayDataset],
    proto: &EvalProtocol,
) -> Result<(EvalReport, Vec<SequenceOutcome>), ProtocolError> {
    let specs = sample_sequences(days, proto)?;
    let encoded = days.iter().map(encode_day).collect::<Result<Vec<_>, _>>()?;
    let outcomes = specs
        .par_iter()
        .enumerate()
        .map(|(i, &spec)| run_sequence(model, &days[spec.day], &encoded[spec.day], spec, i as u64, proto))
        .collect::<Result<Vec<_>, _>>()?;
    Ok((aggregate(proto, &outcomes)?, outcomes))
}

impl EvalReport {
    /// Report files as `(name, contents)`.
    pub fn files(&self) -> Vec<(&'static str, String)> {
        let mut specs = String::from("sequence,day,start\n");
        for (i, s) in self.specs.iter().enumerate() {
            specs.push_str(&format!("{i},{},{}\n", s.day, s.start));
        }
        vec![
            ("perplexity_per_position.csv", self.perplexity.per_position_csv()),
            ("perplexity_per_sequence.csv", self.perplexity.per_sequence_csv()),
            ("return_bands.csv", bands_csv(&self.generated_bands, &self.realized_bands)),
            ("return_correlation.csv", self.correlation.to_csv()),
            ("event_frequencies.csv", self.events.to_csv()),
            ("interarrival_pp.csv", self.interarrival.pp_csv()),
            ("interarrival_hist.csv", self.interarrival.histogram_csv()),
            ("corrections.csv", self.corrections.to_csv()),
            ("sequences.csv", specs),
            ("summary.txt", self.summary()),
        ]
    }

    pub fn summary(&self) -> String {
        let p = &self.perplexity;
        let last = self.correlation.horizons.last();
        let fmt = |v: Option<f64>| v.map_or("NA".to_string(), |x| format!("{x:.4}"));
        let mut out = format!(
            "sequences {} (context {}, generated {})\n\
             perplexity {:.4} (std err {:.4} over tokens, {:.4} over sequences; {} tokens)\n",
            self.specs.len(),
            self.protocol.context,
            self.protocol.steps,
            p.overall,
            p.std_err_tokens,
            p.std_err_sequences,
            p.tokens,
        );
        if let Some(h) = last {
            out.push_str(&format!(
                "return correlation at {} messages: rho {} (one-sided p {})\n",
                h.horizon,
                fmt(h.rho),
                fmt(h.p_value)
            ));
        }
        out.push_str(&format!(
            "event mix generated {:.3}/{:.3}/{:.3}, realized {:.3}/{:.3}/{:.3} (limit/cancel+delete/execution)\n",
            self.events.generated[0],
            self.events.generated[1],
            self.events.generated[2],
            self.events.realized[0],
            self.events.realized[1],
            self.events.realized[2],
        ));
        out.push_str(&format!(
            "inter-arrival mean generated {:.0} ns, realized {:.0} ns; median generated {:.0} ns, realized {:.0} ns\n",
            self.interarrival.generated_mean,
            self.interarrival.realized_mean,
            self.interarrival.generated_median,
            self.interarrival.realized_median,
        ));
        out.push_str(&format!(
            "discarded generated messages {:.4}\n",
            self.corrections.discarded_share
        ));
        out
    }
}
