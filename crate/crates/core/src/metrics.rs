//! Evaluation statistics: perplexity, mid-price returns, return
//! correlation, event-type frequencies and inter-arrival distributions.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::message::EventType;
use crate::tokenizer::{MASKABLE_POSITIONS, MASKABLE_POSITION_NAMES};

pub const N_SLOTS: usize = MASKABLE_POSITIONS.len();

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MetricsError {
    #[error("mid price undefined at the start of the horizon")]
    UndefinedMid,
    #[error("need at least 3 paired observations, got {0}")]
    TooFewObservations(usize),
    #[error("series have different lengths: {0} vs {1}")]
    LengthMismatch(usize, usize),
}

/// Negative log-probability of `target` under `softmax(logits)`, computed
/// in 64-bit with the maximum subtracted.
pub fn nll_from_logits(logits: &[f32], target: usize) -> f64 {
    let max = logits.iter().fold(f32::NEG_INFINITY, |m, &x| m.max(x)) as f64;
    let sum: f64 = logits.iter().map(|&x| (x as f64 - max).exp()).sum();
    max + sum.ln() - logits[target] as f64
}

/// Slot in `0..17` of a maskable message position.
pub fn position_slot(position: usize) -> Option<usize> {
    MASKABLE_POSITIONS.iter().position(|&p| p == position)
}

/// One scored target token.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TokenScore {
    /// Index into [`MASKABLE_POSITIONS`].
    pub slot: usize,
    pub nll: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerplexityReport {
    pub overall: f64,
    pub mean_nll: f64,
    pub tokens: usize,
    /// Standard error of the overall perplexity, from the per-token NLL
    /// spread.
    pub std_err_tokens: f64,
    /// Standard error of the overall perplexity, from the spread of
    /// per-sequence mean NLLs.
    pub std_err_sequences: f64,
    pub per_sequence: Vec<f64>,
    pub per_position: [f64; N_SLOTS],
    pub per_position_tokens: [usize; N_SLOTS],
}

fn mean_and_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Aggregates scored targets, one inner list per evaluated sequence.
/// Empty sequences are skipped.
pub fn perplexity_report(sequences: &[Vec<TokenScore>]) -> PerplexityReport {
    let all: Vec<f64> = sequences.iter().flatten().map(|s| s.nll).collect();
    let seq_means: Vec<f64> = sequences
        .iter()
        .filter(|s| !s.is_empty())
        .map(|s| s.iter().map(|t| t.nll).sum::<f64>() / s.len() as f64)
        .collect();
    let mut sums = [0.0f64; N_SLOTS];
    let mut counts = [0usize; N_SLOTS];
    for t in sequences.iter().flatten() {
        sums[t.slot] += t.nll;
        counts[t.slot] += 1;
    }
    let mut per_position = [f64::NAN; N_SLOTS];
    for i in 0..N_SLOTS {
        if counts[i] > 0 {
            per_position[i] = (sums[i] / counts[i] as f64).exp();
        }
    }
    if all.is_empty() {
        return PerplexityReport {
            overall: f64::NAN,
            mean_nll: f64::NAN,
            tokens: 0,
            std_err_tokens: f64::NAN,
            std_err_sequences: f64::NAN,
            per_sequence: Vec::new(),
            per_position,
            per_position_tokens: counts,
        };
    }
    let (mean_nll, se_tok) = mean_and_se(&all);
    let (_, se_seq) = mean_and_se(&seq_means);
    let overall = mean_nll.exp();
    PerplexityReport {
        overall,
        mean_nll,
        tokens: all.len(),
        // delta method: d exp(m) = exp(m) dm
        std_err_tokens: overall * se_tok,
        std_err_sequences: overall * se_seq,
        per_sequence: seq_means.iter().map(|m| m.exp()).collect(),
        per_position,
        per_position_tokens: counts,
    }
}

impl PerplexityReport {
    /// Header plus one row of the 17 per-position perplexities.
    pub fn per_position_csv(&self) -> String {
        let mut out = MASKABLE_POSITION_NAMES.join(",");
        out.push('\n');
        let row: Vec<String> = self.per_position.iter().map(|p| format!("{p:.6}")).collect();
        out.push_str(&row.join(","));
        out.push('\n');
        out
    }

    pub fn per_sequence_csv(&self) -> String {
        let mut out = String::from("sequence,perplexity\n");
        for (i, p) in self.per_sequence.iter().enumerate() {
            out.push_str(&format!("{i},{p:.6}\n"));
        }
        out
    }
}

/// Mid-price returns per sequence: `returns[i][s - 1]` is the return of
/// sequence `i` over `s` messages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReturnSeries {
    pub horizons: usize,
    pub returns: Vec<Vec<f64>>,
}

/// `(p_{t+s} - p_t) / p_t` for `s = 1..mids.len()-1`. `mids[0]` is the mid
/// at `t`; an undefined later mid falls back to the last defined one.
pub fn mid_returns(mids: &[Option<f64>]) -> Result<Vec<f64>, MetricsError> {
    let p0 = mids.first().copied().flatten().ok_or(MetricsError::UndefinedMid)?;
    let mut last = p0;
    Ok(mids[1..]
        .iter()
        .map(|m| {
            if let Some(p) = m {
                last = *p;
            }
            (last - p0) / p0
        })
        .collect())
}

impl ReturnSeries {
    pub fn from_paths(paths: &[Vec<Option<f64>>]) -> Result<Self, MetricsError> {
        let returns = paths.iter().map(|p| mid_returns(p)).collect::<Result<Vec<_>, _>>()?;
        let horizons = returns.iter().map(Vec::len).min().unwrap_or(0);
        Ok(ReturnSeries { horizons, returns })
    }

    /// Returns of all sequences at horizon `s` (1-based).
    pub fn at(&self, s: usize) -> Vec<f64> {
        self.returns.iter().map(|r| r[s - 1]).collect()
    }
}

/// Pearson correlation, `None` when either series has zero variance.
pub fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    assert_eq!(x.len(), y.len());
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (da, db) = (a - mx, b - my);
        sxy += da * db;
        sxx += da * da;
        syy += db * db;
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// One-sided p-value of H1: rho > 0 from `n` pairs.
pub fn correlation_p_value(rho: f64, n: usize) -> f64 {
    let df = (n - 2) as f64;
    if rho >= 1.0 {
        return 0.0;
    }
    if rho <= -1.0 {
        return 1.0;
    }
    let t = rho * (df / (1.0 - rho * rho)).sqrt();
    StudentsT::new(0.0, 1.0, df).expect("df > 0").sf(t)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HorizonCorrelation {
    pub horizon: usize,
    pub n: usize,
    /// `None` when either series is constant at this horizon.
    pub rho: Option<f64>,
    pub t: Option<f64>,
    pub p_value: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationReport {
    pub horizons: Vec<HorizonCorrelation>,
}

pub fn return_correlation(gen: &ReturnSeries, real: &ReturnSeries) -> Result<CorrelationReport, MetricsError> {
    if gen.returns.len() != real.returns.len() {
        return Err(MetricsError::LengthMismatch(gen.returns.len(), real.returns.len()));
    }
    let n = gen.returns.len();
    if n < 3 {
        return Err(MetricsError::TooFewObservations(n));
    }
    let horizons = gen.horizons.min(real.horizons);
    let rows = (1..=horizons)
        .map(|s| {
            let rho = pearson(&gen.at(s), &real.at(s));
            let t = rho.map(|r| r * ((n - 2) as f64 / (1.0 - r * r)).sqrt());
            HorizonCorrelation {
                horizon: s,
                n,
                rho,
                t,
                p_value: rho.map(|r| correlation_p_value(r, n)),
            }
        })
        .collect();
    Ok(CorrelationReport { horizons: rows })
}

impl CorrelationReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("horizon,n,rho,t,p_value\n");
        let f = |v: Option<f64>| v.map_or("NA".to_string(), |x| format!("{x:.10}"));
        for h in &self.horizons {
            out.push_str(&format!("{},{},{},{},{}\n", h.horizon, h.n, f(h.rho), f(h.t), f(h.p_value)));
        }
        out
    }
}

/// Linear-interpolation quantile of sorted data.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty());
    let h = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Pointwise per-horizon summary of a return distribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReturnBand {
    pub horizon: usize,
    pub mean: f64,
    pub median: f64,
    pub lower: f64,
    pub upper: f64,
}

/// Per-horizon mean, median and central `coverage` interval.
pub fn return_bands(series: &ReturnSeries, coverage: f64) -> Vec<ReturnBand> {
    let tail = (1.0 - coverage) / 2.0;
    (1..=series.horizons)
        .filter(|_| !series.returns.is_empty())
        .map(|s| {
            let mut v = series.at(s);
            v.sort_by(f64::total_cmp);
            ReturnBand {
                horizon: s,
                mean: v.iter().sum::<f64>() / v.len() as f64,
                median: quantile_sorted(&v, 0.5),
                lower: quantile_sorted(&v, tail),
                upper: quantile_sorted(&v, 1.0 - tail),
            }
        })
        .collect()
}

pub fn bands_csv(generated: &[ReturnBand], realized: &[ReturnBand]) -> String {
    let mut out = String::from("source,horizon,mean,median,lower_q025,upper_q975\n");
    for (name, bands) in [("generated", generated), ("realized", realized)] {
        for b in bands {
            out.push_str(&format!(
                "{name},{},{:.10e},{:.10e},{:.10e},{:.10e}\n",
                b.horizon, b.mean, b.median, b.lower, b.upper
            ));
        }
    }
    out
}

pub const EVENT_CLASSES: [&str; 3] = ["limit", "cancel_or_delete", "execution"];

pub fn event_class(t: EventType) -> usize {
    match t {
        EventType::Limit => 0,
        EventType::Cancel | EventType::Delete => 1,
        EventType::Execute => 2,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventFrequencies {
    pub generated_counts: [usize; 3],
    pub realized_counts: [usize; 3],
    pub generated: [f64; 3],
    pub realized: [f64; 3],
}

fn class_histogram(types: &[EventType]) -> ([usize; 3], [f64; 3]) {
    let mut counts = [0usize; 3];
    for &t in types {
        counts[event_class(t)] += 1;
    }
    let total = types.len().max(1) as f64;
    (counts, counts.map(|c| c as f64 / total))
}

pub fn event_type_frequencies(generated: &[EventType], realized: &[EventType]) -> EventFrequencies {
    let (generated_counts, generated) = class_histogram(generated);
    let (realized_counts, realized) = class_histogram(realized);
    EventFrequencies {
        generated_counts,
        realized_counts,
        generated,
        realized,
    }
}

impl EventFrequencies {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("class,generated_count,generated_freq,realized_count,realized_freq\n");
        for i in 0..3 {
            out.push_str(&format!(
                "{},{},{:.10},{},{:.10}\n",
                EVENT_CLASSES[i], self.generated_counts[i], self.generated[i], self.realized_counts[i], self.realized[i]
            ));
        }
        out
    }
}

/// Fraction of `sorted` that is `<= x`.
pub fn ecdf(sorted: &[u64], x: u64) -> f64 {
    sorted.partition_point(|&v| v <= x) as f64 / sorted.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PpPoint {
    pub x: u64,
    /// Generated ECDF.
    pub f_gen: f64,
    /// Realized ECDF.
    pub f_real: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterarrivalReport {
    pub pp: Vec<PpPoint>,
    /// Bin edges in ns: `[0, 1)` holds zeros, then log-spaced bins.
    pub bin_edges: Vec<f64>,
    pub generated_hist: Vec<usize>,
    pub realized_hist: Vec<usize>,
    pub generated_mean: f64,
    pub generated_median: f64,
    pub realized_mean: f64,
    pub realized_median: f64,
}

fn histogram(values: &[u64], edges: &[f64]) -> Vec<usize> {
    let nbins = edges.len() - 1;
    let mut counts = vec![0usize; nbins];
    for &v in values {
        let x = v as f64;
        let i = edges.partition_point(|&e| e <= x).saturating_sub(1);
        counts[i.min(nbins - 1)] += 1;
    }
    counts
}

fn mean_median(values: &[u64]) -> (f64, f64) {
    let mut sorted: Vec<f64> = values.iter().map(|&v| v as f64).collect();
    sorted.sort_by(f64::total_cmp);
    (sorted.iter().sum::<f64>() / sorted.len() as f64, quantile_sorted(&sorted, 0.5))
}

/// P-P pairs `(F_g(x), F_r(x))` over up to `grid` points of the merged
/// support, plus log-binned histograms. Inputs must be non-empty.
pub fn interarrival_ecdf(generated: &[u64], realized: &[u64], grid: usize, bins: usize) -> InterarrivalReport {
    assert!(!generated.is_empty() && !realized.is_empty() && grid >= 2 && bins >= 2);
    let mut g = generated.to_vec();
    g.sort_unstable();
    let mut r = realized.to_vec();
    r.sort_unstable();
    let mut support: Vec<u64> = g.iter().chain(&r).copied().collect();
    support.sort_unstable();
    support.dedup();
    let xs: Vec<u64> = if support.len() <= grid {
        support
    } else {
        (0..grid)
            .map(|i| support[i * (support.len() - 1) / (grid - 1)])
            .collect()
    };
    let pp = xs
        .iter()
        .map(|&x| PpPoint {
            x,
            f_gen: ecdf(&g, x),
            f_real: ecdf(&r, x),
        })
        .collect();

    let max = (*g.last().unwrap()).max(*r.last().unwrap()) as f64 + 1.0;
    let top = max.log10().max(1e-9);
    let mut edges = vec![0.0];
    for i in 0..bins {
        edges.push(10f64.powf(top * i as f64 / (bins - 1) as f64));
    }
    // include the maximum in the last bin
    *edges.last_mut().unwrap() = max;
    let (gm, gmed) = mean_median(&g);
    let (rm, rmed) = mean_median(&r);
    InterarrivalReport {
        pp,
        generated_hist: histogram(&g, &edges),
        realized_hist: histogram(&r, &edges),
        bin_edges: edges,
        generated_mean: gm,
        generated_median: gmed,
        realized_mean: rm,
        realized_median: rmed,
    }
}

impl InterarrivalReport {
    pub fn pp_csv(&self) -> String {
        let mut out = String::from("dt_ns,f_generated,f_realized\n");
        for p in &self.pp {
            out.push_str(&format!("{},{:.10},{:.10}\n", p.x, p.f_gen, p.f_real));
        }
        out
    }

    pub fn histogram_csv(&self) -> String {
        let mut out = String::from("bin_lo_ns,bin_hi_ns,generated,realized\n");
        for i in 0..self.generated_hist.len() {
            out.push_str(&format!(
                "{},{},{},{}\n",
                self.bin_edges[i],
                self.bin_edges[i + 1],
                self.generated_hist[i],
                self.realized_hist[i]
            ));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn uniform_and_oracle_nll() {
        let uniform = vec![0.0f32; 12011];
        assert!((nll_from_logits(&uniform, 5) - (12011f64).ln()).abs() < 1e-12);
        let mut peaked = vec![-1e4f32; 10];
        peaked[3] = 0.0;
        assert_eq!(nll_from_logits(&peaked, 3), 0.0);
    }

    #[test]
    fn report_basics() {
        let seqs = vec![
            vec![TokenScore { slot: 0, nll: 1.0 }, TokenScore { slot: 1, nll: 3.0 }],
            vec![TokenScore { slot: 0, nll: 2.0 }],
        ];
        let r = perplexity_report(&seqs);
        assert!((r.overall - 2f64.exp()).abs() < 1e-12);
        assert_eq!(r.per_sequence.len(), 2);
        assert!((r.per_position[0] - 1.5f64.exp()).abs() < 1e-12);
        assert!(r.per_position[2].is_nan());
        assert_eq!(r.per_position_csv().lines().next().unwrap().split(',').count(), 17);
    }

    proptest! {
        #[test]
        fn sequence_decomposition(seqs in prop::collection::vec(prop::collection::vec(0.0f64..12.0, 1..40), 1..20)) {
            let scored: Vec<Vec<TokenScore>> = seqs.iter()
                .map(|s| s.iter().map(|&nll| TokenScore { slot: 0, nll }).collect())
                .collect();
            let r = perplexity_report(&scored);
            let total: usize = seqs.iter().map(Vec::len).sum();
            let log_geo: f64 = r.per_sequence.iter().zip(&seqs)
                .map(|(p, s)| s.len() as f64 * p.ln()).sum::<f64>() / total as f64;
            prop_assert!((log_geo.exp() - r.overall).abs() <= 1e-9 * r.overall);
        }

        #[test]
        fn logit_shift_invariance(logits in prop::collection::vec(-20.0f32..20.0, 2..64), shift in -50.0f32..50.0, t in 0usize..64) {
            let t = t % logits.len();
            let shifted: Vec<f32> = logits.iter().map(|x| x + shift).collect();
            let a = nll_from_logits(&logits, t);
            let b = nll_from_logits(&shifted, t);
            prop_assert!((a - b).abs() < 1e-4);
        }

        #[test]
        fn pearson_matches_brute_force(pairs in prop::collection::vec((-1e3f64..1e3, -1e3f64..1e3), 3..200)) {
            let (x, y): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
            let n = x.len() as f64;
            let ex = x.iter().sum::<f64>() / n;
            let ey = y.iter().sum::<f64>() / n;
            let cov = x.iter().zip(&y).map(|(a, b)| (a - ex) * (b - ey)).sum::<f64>() / n;
            let vx = x.iter().map(|a| (a - ex).powi(2)).sum::<f64>() / n;
            let vy = y.iter().map(|b| (b - ey).powi(2)).sum::<f64>() / n;
            if let Some(rho) = pearson(&x, &y) {
                prop_assert!((rho - cov / (vx * vy).sqrt()).abs() < 1e-12);
                prop_assert!((-1.0..=1.0).contains(&rho));
            }
        }
    }

    #[test]
    fn returns_with_fallback() {
        let r = mid_returns(&[Some(100.0), Some(101.0), None, Some(100.0)]).unwrap();
        assert_eq!(r, vec![0.01, 0.01, 0.0]);
        assert_eq!(mid_returns(&[Some(5.0), Some(5.0)]).unwrap(), vec![0.0]);
        assert_eq!(mid_returns(&[None, Some(1.0)]), Err(MetricsError::UndefinedMid));
    }

    #[test]
    fn student_t_tail_closed_forms() {
        // df = 1 is Cauchy, df = 2 has sf = (1 - t / sqrt(t^2 + 2)) / 2
        for &t in &[-3.0, -0.5, 0.0, 0.7, 2.0, 10.0] {
            let cauchy = 0.5 - f64::atan(t) / std::f64::consts::PI;
            let rho1 = t / (1.0 + t * t).sqrt();
            assert!((correlation_p_value(rho1, 3) - cauchy).abs() < 1e-10);
            let df2 = 0.5 * (1.0 - t / (t * t + 2.0).sqrt());
            let rho2 = t / (2.0 + t * t).sqrt();
            assert!((correlation_p_value(rho2, 4) - df2).abs() < 1e-10);
        }
    }

    #[test]
    fn correlation_extremes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x: Vec<Vec<f64>> = (0..50).map(|_| vec![rng.random::<f64>()]).collect();
        let neg: Vec<Vec<f64>> = x.iter().map(|v| vec![-v[0]]).collect();
        let s = |r: Vec<Vec<f64>>| ReturnSeries { horizons: 1, returns: r };
        let same = return_correlation(&s(x.clone()), &s(x.clone())).unwrap();
        assert!((same.horizons[0].rho.unwrap() - 1.0).abs() < 1e-12);
        assert!(same.horizons[0].p_value.unwrap() < 1e-12);
        let opp = return_correlation(&s(x.clone()), &s(neg)).unwrap();
        assert!((opp.horizons[0].rho.unwrap() + 1.0).abs() < 1e-12);
        assert!(opp.horizons[0].p_value.unwrap() > 1.0 - 1e-12);
        let flat = s(vec![vec![0.0]; 50]);
        assert_eq!(return_correlation(&s(x), &flat).unwrap().horizons[0].rho, None);
    }

    #[test]
    fn bands_are_pointwise() {
        let series = ReturnSeries {
            horizons: 2,
            returns: (0..=100).map(|i| vec![i as f64, 0.0]).collect(),
        };
        let b = return_bands(&series, 0.95);
        assert_eq!(b[0].median, 50.0);
        assert!((b[0].lower - 2.5).abs() < 1e-12 && (b[0].upper - 97.5).abs() < 1e-12);
        assert_eq!(b[1].upper, 0.0);
    }

    #[test]
    fn event_frequencies() {
        use EventType::*;
        let mixed = [Limit, Limit, Cancel, Execute];
        let f = event_type_frequencies(&mixed, &[Limit, Limit]);
        assert_eq!(f.generated, [0.5, 0.25, 0.25]);
        assert_eq!(f.realized, [1.0, 0.0, 0.0]);
        let g = event_type_frequencies(&mixed, &mixed);
        assert_eq!(g.generated, g.realized);
        assert_eq!(event_class(Delete), 1);
    }

    #[test]
    fn pp_identical_on_diagonal() {
        let xs: Vec<u64> = (0..500).map(|i| i * i).collect();
        let rep = interarrival_ecdf(&xs, &xs, 64, 20);
        assert!(rep.pp.iter().all(|p| p.f_gen == p.f_real));
        assert_eq!(rep.generated_hist.iter().sum::<usize>(), 500);
        assert_eq!(rep.generated_hist, rep.realized_hist);
    }

    #[test]
    fn pp_shifted_uniform_offsets() {
        // gen uniform on 100..200, real uniform on 0..200: for x in [100, 200),
        // F_g(x) = (x - 99) / 100 and F_r(x) = (x + 1) / 200
        let gen: Vec<u64> = (100..200).collect();
        let real: Vec<u64> = (0..200).collect();
        let rep = interarrival_ecdf(&gen, &real, 1000, 10);
        for p in &rep.pp {
            let x = p.x as f64;
            let fg = ((x - 99.0) / 100.0).clamp(0.0, 1.0);
            let fr = (x + 1.0) / 200.0;
            assert!((p.f_gen - fg).abs() < 1e-12 && (p.f_real - fr).abs() < 1e-12);
        }
        // gen stochastically larger: F_g <= F_r, so real-on-gen sits above
        // the diagonal
        assert!(rep.pp.iter().all(|p| p.f_real >= p.f_gen));
        assert_eq!(rep.generated_mean, 149.5);
        assert_eq!(rep.realized_median, 99.5);
    }

    #[test]
    fn monte_carlo_null_correlation() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let trials = 400;
        let mut inside = 0;
        for _ in 0..trials {
            let x: Vec<f64> = (0..1000).map(|_| rng.random()).collect();
            let y: Vec<f64> = (0..1000).map(|_| rng.random()).collect();
            inside += usize::from(pearson(&x, &y).unwrap().abs() < 0.08);
        }
        assert!(inside as f64 / trials as f64 >= 0.95);
    }
}
