//! Speed/quality benchmark harness comparing decode regimes.
//!
//! Decodes a dataset under the sequential baseline and under the pipelined
//! decoder at one or more delay values, scores every example, groups
//! results by target-subsequence count, and derives step-count and
//! wall-clock speedups.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use pipedec_core::data::{split_ids_on_separator, Example};
use pipedec_core::decode::{
    pipelined_decode, pipelined_decode_with, sequential_greedy, sequential_greedy_with,
    DecodeError, ScriptedSequential, ScriptedStepper,
};
use pipedec_core::model::vocab::SEP_ID;
use pipedec_core::model::{Model, Vocab};
use pipedec_core::scalar::Scalar;
use pipedec_core::schedule::{completion_steps, PipelineSchedule, ScheduleError};
use pipedec_core::Regime;

use crate::metrics;

#[derive(Debug, thiserror::Error)]
pub enum BenchError {
    #[error("missing checkpoint: {0}")]
    MissingCheckpoint(String),
    #[error("{0}")]
    Contract(String),
    #[error(transparent)]
    Decode(#[from] DecodeError),
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, BenchError>;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchConfig {
    pub time_max: usize,
    pub sub_max: usize,
    /// Cap on sequential generation length.
    pub seq_max_len: usize,
    pub workers: usize,
    /// Groups smaller than this are left out of grouped reporting.
    pub min_group_size: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            time_max: 50,
            sub_max: 20,
            seq_max_len: 64,
            workers: std::thread::available_parallelism()
                .map(|n| n.get())
                .unwrap_or(1),
            min_group_size: 10,
        }
    }
}

/// Models under comparison. The pipelined list pairs each delay value with
/// the model trained for it.
pub struct RegimeModels<'a, T: Scalar> {
    pub sequential: Option<&'a Model<T>>,
    pub pipelined: Vec<(usize, &'a Model<T>)>,
}

/// Per-example scores for one decode run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExampleScore {
    pub group_n: usize,
    pub em_f1: f64,
    pub pm_f1: f64,
    pub f1_at_5: f64,
    pub f1_at_m: f64,
    pub rouge_1: f64,
    pub rouge_2: f64,
    pub rouge_l: f64,
    pub steps: usize,
    pub wall_micros: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RegimeRun {
    pub regime: Regime,
    /// Delay for pipelined runs; 0 for the sequential baseline.
    pub delay: usize,
    pub scores: Vec<ExampleScore>,
    pub throughput_eps: f64,
    pub peak_rss_kb: u64,
}

/// Mean metrics over a slice of scores.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Aggregate {
    pub examples: usize,
    pub em_f1: f64,
    pub pm_f1: f64,
    pub f1_at_5: f64,
    pub f1_at_m: f64,
    pub rouge_1: f64,
    pub rouge_2: f64,
    pub rouge_l: f64,
    pub mean_steps: f64,
    pub mean_wall_micros: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricReport {
    pub runs: Vec<RegimeRun>,
    pub min_group_size: usize,
    /// Formula note for the partial-match and cutoff metrics.
    pub metric_notes: String,
}

pub fn aggregate(scores: &[ExampleScore]) -> Aggregate {
    let n = scores.len().max(1) as f64;
    let sum = |f: fn(&ExampleScore) -> f64| scores.iter().map(f).sum::<f64>() / n;
    Aggregate {
        examples: scores.len(),
        em_f1: sum(|s| s.em_f1),
        pm_f1: sum(|s| s.pm_f1),
        f1_at_5: sum(|s| s.f1_at_5),
        f1_at_m: sum(|s| s.f1_at_m),
        rouge_1: sum(|s| s.rouge_1),
        rouge_2: sum(|s| s.rouge_2),
        rouge_l: sum(|s| s.rouge_l),
        mean_steps: sum(|s| s.steps as f64),
        mean_wall_micros: sum(|s| s.wall_micros as f64),
    }
}

impl MetricReport {
    pub fn run(&self, regime: Regime, delay: usize) -> Option<&RegimeRun> {
        self.runs
            .iter()
            .find(|r| r.regime == regime && r.delay == delay)
    }

    /// Groups (by target subsequence count) meeting the size threshold,
    /// ascending.
    pub fn groups(&self) -> Vec<usize> {
        let mut counts = std::collections::BTreeMap::<usize, usize>::new();
        if let Some(run) = self.runs.first() {
            for s in &run.scores {
                *counts.entry(s.group_n).or_default() += 1;
            }
        }
        counts
            .into_iter()
            .filter(|(_, c)| *c >= self.min_group_size)
            .map(|(n, _)| n)
            .collect()
    }

    pub fn group_scores<'a>(&self, run: &'a RegimeRun, n: usize) -> Vec<&'a ExampleScore> {
        run.scores.iter().filter(|s| s.group_n == n).collect()
    }

    /// Step-count speedup of `run` relative to the sequential baseline over
    /// the same examples (optionally restricted to one group).
    pub fn speedup_steps(&self, run: &RegimeRun, group: Option<usize>) -> Option<f64> {
        let seq = self.run(Regime::Sequential, 0)?;
        let mean = |r: &RegimeRun| -> f64 {
            let picked: Vec<f64> = r
                .scores
                .iter()
                .filter(|s| group.is_none_or(|g| s.group_n == g))
                .map(|s| s.steps as f64)
                .collect();
            picked.iter().sum::<f64>() / picked.len().max(1) as f64
        };
        let denom = mean(run);
        if denom == 0.0 {
            return None;
        }
        Some(mean(seq) / denom)
    }
}

fn score_strings(
    predicted: &[String],
    gold: &[String],
    steps: usize,
    wall_micros: u64,
) -> ExampleScore {
    let pred_text = predicted.join(" ");
    let gold_text = gold.join(" ");
    ExampleScore {
        group_n: gold.len(),
        em_f1: metrics::em_f1(predicted, gold).f1,
        pm_f1: metrics::pm_f1(predicted, gold).f1,
        f1_at_5: metrics::f1_at_k(predicted, gold, 5).f1,
        f1_at_m: metrics::f1_at_m(predicted, gold).f1,
        rouge_1: metrics::rouge_n(&pred_text, &gold_text, 1).f1,
        rouge_2: metrics::rouge_n(&pred_text, &gold_text, 2).f1,
        rouge_l: metrics::rouge_l(&pred_text, &gold_text).f1,
        steps,
        wall_micros,
    }
}

fn subseq_strings(vocab: &Vocab, subseqs: &[Vec<u32>]) -> Vec<String> {
    subseqs
        .iter()
        .map(|s| vocab.decode(s).join(" "))
        .collect()
}

fn peak_rss_kb() -> u64 {
    std::fs::read_to_string("/proc/self/status")
        .ok()
        .and_then(|s| {
            s.lines()
                .find(|l| l.starts_with("VmHWM:"))
                .and_then(|l| l.split_whitespace().nth(1))
                .and_then(|v| v.parse().ok())
        })
        .unwrap_or(0)
}

/// Decode and score the dataset under every configured regime.
pub fn run_benchmark<T: Scalar>(
    models: &RegimeModels<'_, T>,
    examples: &[Example],
    vocab: &Vocab,
    cfg: &BenchConfig,
) -> Result<MetricReport> {
    if models.sequential.is_none() && models.pipelined.is_empty() {
        return Err(BenchError::MissingCheckpoint(
            "no regime model supplied".into(),
        ));
    }
    if examples.is_empty() {
        return Err(BenchError::Contract("empty evaluation dataset".into()));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers.max(1))
        .build()
        .map_err(|e| BenchError::Contract(e.to_string()))?;

    let gold: Vec<Vec<String>> = examples
        .iter()
        .map(|ex| ex.target.iter().map(|s| s.join(" ")).collect())
        .collect();
    let inputs: Vec<Vec<u32>> = examples.iter().map(|ex| vocab.encode(&ex.input)).collect();

    let mut runs = Vec::new();

    if let Some(model) = models.sequential {
        let started = Instant::now();
        let scores: Vec<ExampleScore> = pool.install(|| {
            inputs
                .par_iter()
                .zip(&gold)
                .map(|(input, gold)| {
                    let t0 = Instant::now();
                    let result = sequential_greedy(model, input, cfg.seq_max_len)?;
                    let wall = t0.elapsed().as_micros() as u64;
                    let subseqs = split_ids_on_separator(&result.tokens, SEP_ID);
                    let predicted = subseq_strings(vocab, &subseqs);
                    Ok(score_strings(&predicted, gold, result.steps, wall))
                })
                .collect::<Result<Vec<_>>>()
        })?;
        let elapsed = started.elapsed().as_secs_f64();
        runs.push(RegimeRun {
            regime: Regime::Sequential,
            delay: 0,
            scores,
            throughput_eps: examples.len() as f64 / elapsed.max(1e-9),
            peak_rss_kb: peak_rss_kb(),
        });
    }

    for &(delay, model) in &models.pipelined {
        let schedule = PipelineSchedule {
            delay,
            time_max: cfg.time_max,
            sub_max: cfg.sub_max,
        };
        let started = Instant::now();
        let scores: Vec<ExampleScore> = pool.install(|| {
            inputs
                .par_iter()
                .zip(&gold)
                .map(|(input, gold)| {
                    let t0 = Instant::now();
                    let result = pipelined_decode(model, input, &schedule)?;
                    let wall = t0.elapsed().as_micros() as u64;
                    let predicted = subseq_strings(vocab, &result.subsequences);
                    Ok(score_strings(&predicted, gold, result.steps, wall))
                })
                .collect::<Result<Vec<_>>>()
        })?;
        let elapsed = started.elapsed().as_secs_f64();
        runs.push(RegimeRun {
            regime: Regime::Pipelined,
            delay,
            scores,
            throughput_eps: examples.len() as f64 / elapsed.max(1e-9),
            peak_rss_kb: peak_rss_kb(),
        });
    }

    Ok(MetricReport {
        runs,
        min_group_size: cfg.min_group_size,
        metric_notes: "pm=max-LCSubstring-share; f1_at_5 pads short prediction lists".into(),
    })
}

/// Step counts for token-forced decoding of one target: the sequential
/// stream emits every token then the end marker, while the pipelined loop
/// runs the real decode machinery against a scripted model.
pub fn forced_decode_steps(
    target_subseqs: &[Vec<u32>],
    delay: usize,
    vocab_size: usize,
) -> Result<(usize, usize)> {
    let mut flat: Vec<u32> = Vec::new();
    for (i, s) in target_subseqs.iter().enumerate() {
        if i > 0 {
            flat.push(SEP_ID);
        }
        flat.extend_from_slice(s);
    }
    let seq = sequential_greedy_with(
        ScriptedSequential::new(flat, vocab_size),
        usize::MAX >> 1,
    )?;
    let schedule = PipelineSchedule {
        delay,
        time_max: usize::MAX >> 1,
        sub_max: usize::MAX >> 1,
    };
    let pip = pipelined_decode_with(
        ScriptedStepper::new(target_subseqs.to_vec(), vocab_size),
        &schedule,
    )?;
    Ok((seq.steps, pip.steps))
}

/// Closed-form check value for forced decoding: the sequential step count
/// over the pipelined completion step count.
pub fn analytic_forced_speedup(lengths: &[usize], delay: usize) -> Result<f64> {
    let total: usize = lengths.iter().sum();
    let seq = total + lengths.len();
    let pip = completion_steps(lengths, delay)?;
    Ok(seq as f64 / pip as f64)
}
