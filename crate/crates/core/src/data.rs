//! Synthetic tasks, word-level tokenization, and dataset persistence.
//!
//! Two generators cover the phrase- and sentence-level regimes:
//! - span-copy: the input hides a few marked spans among distractor words;
//!   the target is exactly those spans, in input order.
//! - sentence-copy: the input is a run of period-terminated sentences, some
//!   tagged with a keep marker; the target is the tagged sentences.

use std::io::{BufRead, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::model::vocab::{Vocab, RESERVED_TOKENS};

pub const SPAN_OPEN_PREFIX: &str = "[s";
pub const SPAN_CLOSE: &str = "[/s]";
pub const KEEP_MARKER: &str = "[keep]";
pub const PERIOD: &str = ".";

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {message}")]
    Ingest { line: usize, message: String },
    #[error("invalid generator spec: {0}")]
    Spec(String),
}

pub type Result<T> = std::result::Result<T, DataError>;

/// One task instance: an input token stream and its target subsequences.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub input: Vec<String>,
    pub target: Vec<Vec<String>>,
    pub task: String,
}

impl Example {
    fn validate(&self) -> std::result::Result<(), String> {
        if self.input.is_empty() {
            return Err("input is empty".into());
        }
        if self.target.is_empty() {
            return Err("target has no subsequences".into());
        }
        if self.target.iter().any(|s| s.is_empty()) {
            return Err("target contains an empty subsequence".into());
        }
        Ok(())
    }
}

/// Id-level rendering of an [`Example`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedExample {
    pub input_ids: Vec<u32>,
    pub target_subseqs: Vec<Vec<u32>>,
}

pub fn encode_examples(examples: &[Example], vocab: &Vocab) -> Vec<EncodedExample> {
    examples
        .iter()
        .map(|ex| EncodedExample {
            input_ids: vocab.encode(&ex.input),
            target_subseqs: ex.target.iter().map(|s| vocab.encode(s)).collect(),
        })
        .collect()
}

/// Deterministic generator settings. Generation is a pure function of this
/// struct.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub seed: u64,
    pub example_count: usize,
    /// Number of distinct content words.
    pub vocab_size: usize,
    pub span_count: (usize, usize),
    pub span_len: (usize, usize),
    /// Total input length budget (content plus markers plus distractors).
    pub context_len: (usize, usize),
    /// Fraction of the leftover budget actually filled with distractors.
    pub distractor_rate: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            seed: 0,
            example_count: 1000,
            vocab_size: 100,
            span_count: (2, 6),
            span_len: (2, 4),
            context_len: (24, 40),
            distractor_rate: 0.8,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let ranges_ok = self.span_count.0 >= 1
            && self.span_count.0 <= self.span_count.1
            && self.span_len.0 >= 1
            && self.span_len.0 <= self.span_len.1
            && self.context_len.0 >= 1
            && self.context_len.0 <= self.context_len.1
            && self.vocab_size >= 1
            && self.example_count >= 1
            && (0.0..=1.0).contains(&self.distractor_rate);
        if !ranges_ok {
            return Err(DataError::Spec(format!("bad ranges: {self:?}")));
        }
        // Every span plus its two markers must fit the largest context.
        let worst = self.span_count.1 * (self.span_len.1 + 2);
        if worst > self.context_len.1 {
            return Err(DataError::Spec(format!(
                "span budget {worst} exceeds context capacity {}",
                self.context_len.1
            )));
        }
        Ok(())
    }

    fn word(&self, idx: usize) -> String {
        format!("w{idx:03}")
    }
}

fn sample_range(rng: &mut ChaCha8Rng, range: (usize, usize)) -> usize {
    if range.0 == range.1 {
        range.0
    } else {
        rng.gen_range(range.0..=range.1)
    }
}

/// Spans hidden among distractors. Each span `k` is wrapped in an indexed
/// open marker (`[s1]`, `[s2]`, ...) and a shared close marker; targets are
/// the spans in input order.
///
/// Span tokens are distinct within an example and never reused as
/// distractors, so every span token occurs exactly once in the input.
pub fn gen_span_copy(spec: &SyntheticSpec) -> Result<Vec<Example>> {
    spec.validate()?;
    if spec.span_count.1 * spec.span_len.1 > spec.vocab_size {
        return Err(DataError::Spec(format!(
            "span tokens per example can reach {} but the content vocab has only {} words",
            spec.span_count.1 * spec.span_len.1,
            spec.vocab_size
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut out = Vec::with_capacity(spec.example_count);
    let mut pool: Vec<usize> = (0..spec.vocab_size).collect();
    for _ in 0..spec.example_count {
        let n = sample_range(&mut rng, spec.span_count);
        let lens: Vec<usize> = (0..n).map(|_| sample_range(&mut rng, spec.span_len)).collect();
        let span_total: usize = lens.iter().sum();

        // Partial shuffle: the first span_total pool entries become the
        // span words for this example.
        for i in 0..span_total {
            let j = rng.gen_range(i..pool.len());
            pool.swap(i, j);
        }
        let mut next = 0usize;
        let spans: Vec<Vec<String>> = lens
            .iter()
            .map(|&len| {
                let words = pool[next..next + len].iter().map(|&w| spec.word(w)).collect();
                next += len;
                words
            })
            .collect();
        let distractor_pool = &pool[span_total..];

        let used: usize = spans.iter().map(|s| s.len() + 2).sum();
        let total = sample_range(&mut rng, spec.context_len).max(used);
        let budget = ((total - used) as f64 * spec.distractor_rate).round() as usize;

        // Distribute distractors over the n+1 gaps around the spans.
        let mut gaps = vec![0usize; n + 1];
        for _ in 0..budget {
            let g = rng.gen_range(0..gaps.len());
            gaps[g] += 1;
        }
        let mut input = Vec::with_capacity(used + budget);
        let mut push_distractors = |input: &mut Vec<String>, count: usize, rng: &mut ChaCha8Rng| {
            for _ in 0..count {
                let w = distractor_pool[rng.gen_range(0..distractor_pool.len())];
                input.push(spec.word(w));
            }
        };
        for (k, span) in spans.iter().enumerate() {
            push_distractors(&mut input, gaps[k], &mut rng);
            input.push(format!("{SPAN_OPEN_PREFIX}{}]", k + 1));
            input.extend(span.iter().cloned());
            input.push(SPAN_CLOSE.to_string());
        }
        push_distractors(&mut input, gaps[n], &mut rng);
        out.push(Example {
            input,
            target: spans,
            task: "span_copy".into(),
        });
    }
    Ok(out)
}

/// Sentence-level variant: period-terminated sentences of 8-15 words, a
/// subset tagged with a keep marker; the target is the tagged sentences
/// (marker and period stripped), in input order.
pub fn gen_sentence_copy(spec: &SyntheticSpec) -> Result<Vec<Example>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed.wrapping_add(0x5e17e9ce));
    let mut out = Vec::with_capacity(spec.example_count);
    for _ in 0..spec.example_count {
        let keep_count = sample_range(&mut rng, spec.span_count);
        let extra = rng.gen_range(1..=3usize);
        let mut kept_flags = vec![true; keep_count];
        kept_flags.extend(std::iter::repeat(false).take(extra));
        // Deterministic shuffle of which sentences are tagged.
        for i in (1..kept_flags.len()).rev() {
            let j = rng.gen_range(0..=i);
            kept_flags.swap(i, j);
        }
        let mut input = Vec::new();
        let mut target = Vec::new();
        for kept in kept_flags {
            let len = rng.gen_range(8..=15usize);
            let words: Vec<String> = (0..len)
                .map(|_| spec.word(rng.gen_range(0..spec.vocab_size)))
                .collect();
            if kept {
                input.push(KEEP_MARKER.to_string());
                target.push(words.clone());
            }
            input.extend(words);
            input.push(PERIOD.to_string());
        }
        out.push(Example {
            input,
            target,
            task: "sentence_copy".into(),
        });
    }
    Ok(out)
}

/// Maximal runs between separators; empty runs vanish.
pub fn split_on_separator(tokens: &[String], separator: &str) -> Vec<Vec<String>> {
    tokens
        .split(|t| t == separator)
        .filter(|run| !run.is_empty())
        .map(|run| run.to_vec())
        .collect()
}

/// Id-level counterpart of [`split_on_separator`].
pub fn split_ids_on_separator(ids: &[u32], sep_id: u32) -> Vec<Vec<u32>> {
    ids.split(|&t| t == sep_id)
        .filter(|run| !run.is_empty())
        .map(|run| run.to_vec())
        .collect()
}

pub fn save_jsonl(examples: &[Example], path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for ex in examples {
        serde_json::to_writer(&mut f, ex).map_err(|e| DataError::Ingest {
            line: 0,
            message: e.to_string(),
        })?;
        writeln!(f)?;
    }
    Ok(())
}

pub fn load_jsonl(path: &Path) -> Result<Vec<Example>> {
    let f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in f.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let ex: Example = serde_json::from_str(&line).map_err(|e| DataError::Ingest {
            line: i + 1,
            message: e.to_string(),
        })?;
        ex.validate().map_err(|message| DataError::Ingest {
            line: i + 1,
            message,
        })?;
        out.push(ex);
    }
    Ok(out)
}

/// Reserved tokens first, then corpus tokens by descending frequency with
/// lexical tiebreak; tokens below `min_count` fall back to the unknown id.
pub fn build_vocab(examples: &[Example], min_count: usize) -> Vocab {
    let mut counts = std::collections::HashMap::<&str, usize>::new();
    for ex in examples {
        for t in ex.input.iter().chain(ex.target.iter().flatten()) {
            *counts.entry(t.as_str()).or_default() += 1;
        }
    }
    let mut ranked: Vec<(&str, usize)> = counts
        .into_iter()
        .filter(|(t, c)| *c >= min_count.max(1) && !RESERVED_TOKENS.contains(t))
        .collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    Vocab::with_tokens(ranked.into_iter().map(|(t, _)| t.to_string()))
}
