//! Greedy decoding: the pipelined parallel loop with an incremental
//! key/value cache, and the sequential left-to-right baseline.
//!
//! The decode loop is generic over a [`DecodeStepper`], which turns newly
//! placed tokens into next-token logits. [`IncrementalSession`] is the real
//! model-backed stepper; [`ScriptedStepper`] forces a fixed target and is
//! used to account steps independently of any weights.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::model::vocab::{BOS_ID, EOS_ID, PAD_ID, SEP_ID, UNK_ID};
use crate::model::{Model, ModelError};
use crate::scalar::Scalar;
use crate::schedule::{
    build_self_attention_mask, manhattan_distance, timestep_of, GridPosition, PipelineSchedule,
    ScheduleError,
};
use crate::tensor::{kernels, Tensor, TensorError};

#[derive(Debug, thiserror::Error)]
pub enum DecodeError {
    #[error("cache desynchronized: {0}")]
    CacheDesync(String),
    #[error("{0}")]
    Contract(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
}

pub type Result<T> = std::result::Result<T, DecodeError>;

/// A token placed on the grid, about to be fed to the decoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PackedToken {
    pub position: GridPosition,
    pub token: u32,
}

/// Produces next-token logits for newly placed tokens. Implementations
/// must return one logits row per fed token, aligned with the input.
pub trait DecodeStepper<T: Scalar> {
    fn step(&mut self, new_tokens: &[PackedToken]) -> Result<Vec<Vec<T>>>;
    fn vocab_size(&self) -> usize;
}

/// Greedy pick with deterministic tie-breaking: the lowest token id among
/// maxima wins.
pub fn greedy_pick<T: Scalar>(row: &[T]) -> u32 {
    let mut best = 0usize;
    for (i, &x) in row.iter().enumerate().skip(1) {
        if x > row[best] {
            best = i;
        }
    }
    best as u32
}

// ---------------------------------------------------------------------------
// Incremental model-backed stepper
// ---------------------------------------------------------------------------

struct LayerKv<T> {
    k: Vec<T>,
    v: Vec<T>,
}

/// Model-backed decode session with per-layer self-attention key/value
/// cache and precomputed cross-attention keys/values.
pub struct IncrementalSession<'m, T: Scalar> {
    model: &'m Model<T>,
    delay: usize,
    enc_len: usize,
    /// Per decoder layer: cross-attention K and V over encoder positions.
    cross_kv: Vec<LayerKv<T>>,
    /// Per decoder layer: self-attention K and V over fed positions.
    self_kv: Vec<LayerKv<T>>,
    positions: Vec<GridPosition>,
}

impl<'m, T: Scalar> IncrementalSession<'m, T> {
    pub fn new(model: &'m Model<T>, input_ids: &[u32], delay: usize) -> Result<Self> {
        let enc = model.encode(input_ids)?;
        Self::with_encoded(model, &enc.hidden, delay)
    }

    /// Start a session from precomputed encoder states.
    pub fn with_encoded(model: &'m Model<T>, enc_hidden: &Tensor<T>, delay: usize) -> Result<Self> {
        if delay < 1 {
            return Err(DecodeError::Contract("delay must be >= 1".into()));
        }
        let d = model.config.model_dim;
        let enc_len = enc_hidden.shape()[0];
        let mut cross_kv = Vec::with_capacity(model.config.num_layers);
        for layer in model.dec_layer_refs() {
            let k = kernels::matmul(
                enc_hidden.data(),
                model.param_data(layer.cross_attn.wk),
                enc_len,
                d,
                d,
            );
            let v = kernels::matmul(
                enc_hidden.data(),
                model.param_data(layer.cross_attn.wv),
                enc_len,
                d,
                d,
            );
            cross_kv.push(LayerKv { k, v });
        }
        let self_kv = (0..model.config.num_layers)
            .map(|_| LayerKv {
                k: Vec::new(),
                v: Vec::new(),
            })
            .collect();
        Ok(IncrementalSession {
            model,
            delay,
            enc_len,
            cross_kv,
            self_kv,
            positions: Vec::new(),
        })
    }

    pub fn cached_len(&self) -> usize {
        self.positions.len()
    }

    fn validate_feed(&self, new_tokens: &[PackedToken]) -> Result<()> {
        if new_tokens.is_empty() {
            return Err(DecodeError::Contract("empty step".into()));
        }
        let mut prev = self
            .positions
            .last()
            .map(|p| (timestep_of(*p, self.delay), p.subseq));
        for pt in new_tokens {
            let key = (timestep_of(pt.position, self.delay), pt.position.subseq);
            if let Some(pk) = prev {
                if key <= pk {
                    return Err(DecodeError::CacheDesync(format!(
                        "feed {:?} does not extend the packed order after {pk:?}",
                        pt.position
                    )));
                }
            }
            prev = Some(key);
            if pt.token as usize >= self.model.config.vocab_size {
                return Err(DecodeError::Model(ModelError::OutOfVocab {
                    id: pt.token,
                    vocab_size: self.model.config.vocab_size,
                }));
            }
        }
        Ok(())
    }

    fn rmsnorm_rows(&self, x: &[T], weight: &[T], rows: usize, d: usize) -> Vec<T> {
        let mut out = vec![T::zero(); rows * d];
        for r in 0..rows {
            kernels::rmsnorm_row(
                &x[r * d..(r + 1) * d],
                weight,
                T::from_f64(1e-6),
                &mut out[r * d..(r + 1) * d],
            );
        }
        out
    }
}

impl<T: Scalar> DecodeStepper<T> for IncrementalSession<'_, T> {
    /// Feed the frontier tokens for one time-step and return their
    /// next-token logits. Keys/values for the fed positions are appended to
    /// the cache, so each call costs one decoder pass over the new rows.
    fn step(&mut self, new_tokens: &[PackedToken]) -> Result<Vec<Vec<T>>> {
        self.validate_feed(new_tokens)?;
        let cfg = &self.model.config;
        let (d, heads, head_dim) = (cfg.model_dim, cfg.num_heads, cfg.head_dim());
        let scale = T::from_f64(1.0 / (head_dim as f64).sqrt());
        let r = new_tokens.len();
        let slots = self.model.slots();
        let emb = self.model.param_data(slots.token_embedding);
        let bias_table = self.model.param_data(slots.dec_bias_table);

        let mut x = vec![T::zero(); r * d];
        for (row, pt) in new_tokens.iter().enumerate() {
            let id = pt.token as usize;
            x[row * d..(row + 1) * d].copy_from_slice(&emb[id * d..(id + 1) * d]);
        }
        for pt in new_tokens {
            self.positions.push(pt.position);
        }
        let total = self.positions.len();
        let old = total - r;

        let mut scores = vec![T::zero(); total.max(self.enc_len)];
        let mut probs = vec![T::zero(); total.max(self.enc_len)];

        for (layer_idx, layer) in self.model.dec_layer_refs().iter().enumerate() {
            // Self-attention over the grid cache.
            let xn = self.rmsnorm_rows(&x, self.model.param_data(layer.self_attn.norm), r, d);
            let q = kernels::matmul(&xn, self.model.param_data(layer.self_attn.wq), r, d, d);
            let k_new = kernels::matmul(&xn, self.model.param_data(layer.self_attn.wk), r, d, d);
            let v_new = kernels::matmul(&xn, self.model.param_data(layer.self_attn.wv), r, d, d);
            self.self_kv[layer_idx].k.extend_from_slice(&k_new);
            self.self_kv[layer_idx].v.extend_from_slice(&v_new);
            let cache = &self.self_kv[layer_idx];
            debug_assert_eq!(cache.k.len(), total * d);

            let mut ctx = vec![T::zero(); r * d];
            for qr in 0..r {
                let qpos = self.positions[old + qr];
                let qts = timestep_of(qpos, self.delay);
                // Permitted keys and their bias buckets, shared by heads.
                let mut allowed: Vec<(usize, u32)> = Vec::with_capacity(total);
                for (kr, kpos) in self.positions.iter().enumerate() {
                    if kpos.subseq <= qpos.subseq && timestep_of(*kpos, self.delay) <= qts {
                        let bucket = crate::model::relative_bucket(
                            manhattan_distance(qpos, *kpos, self.delay),
                            cfg.num_relative_buckets,
                            cfg.max_relative_distance,
                        );
                        allowed.push((kr, bucket));
                    }
                }
                for h in 0..heads {
                    let qh = &q[qr * d + h * head_dim..qr * d + (h + 1) * head_dim];
                    let mut max = T::neg_infinity();
                    for (si, &(kr, bucket)) in allowed.iter().enumerate() {
                        let kh = &cache.k[kr * d + h * head_dim..kr * d + (h + 1) * head_dim];
                        let s =
                            kernels::dot(qh, kh) * scale + bias_table[bucket as usize * heads + h];
                        scores[si] = s;
                        if s > max {
                            max = s;
                        }
                    }
                    let mut sum = T::zero();
                    for p in probs.iter_mut().take(allowed.len()) {
                        *p = T::zero();
                    }
                    for si in 0..allowed.len() {
                        let e = (scores[si] - max).exp();
                        probs[si] = e;
                        sum = sum + e;
                    }
                    let inv = T::one() / sum;
                    let out = &mut ctx[qr * d + h * head_dim..qr * d + (h + 1) * head_dim];
                    for (si, &(kr, _)) in allowed.iter().enumerate() {
                        let p = probs[si] * inv;
                        let vh = &cache.v[kr * d + h * head_dim..kr * d + (h + 1) * head_dim];
                        kernels::axpy(p, vh, out);
                    }
                }
            }
            kernels::matmul_acc(
                &ctx,
                self.model.param_data(layer.self_attn.wo),
                &mut x,
                r,
                d,
                d,
            );

            // Cross-attention over encoder positions (all permitted).
            let xn = self.rmsnorm_rows(&x, self.model.param_data(layer.cross_attn.norm), r, d);
            let q2 = kernels::matmul(&xn, self.model.param_data(layer.cross_attn.wq), r, d, d);
            let cross = &self.cross_kv[layer_idx];
            let mut ctx2 = vec![T::zero(); r * d];
            for qr in 0..r {
                for h in 0..heads {
                    let qh = &q2[qr * d + h * head_dim..qr * d + (h + 1) * head_dim];
                    let mut max = T::neg_infinity();
                    for kr in 0..self.enc_len {
                        let kh = &cross.k[kr * d + h * head_dim..kr * d + (h + 1) * head_dim];
                        let s = kernels::dot(qh, kh) * scale;
                        scores[kr] = s;
                        if s > max {
                            max = s;
                        }
                    }
                    let mut sum = T::zero();
                    for kr in 0..self.enc_len {
                        let e = (scores[kr] - max).exp();
                        probs[kr] = e;
                        sum = sum + e;
                    }
                    let inv = T::one() / sum;
                    let out = &mut ctx2[qr * d + h * head_dim..qr * d + (h + 1) * head_dim];
                    for kr in 0..self.enc_len {
                        let p = probs[kr] * inv;
                        let vh = &cross.v[kr * d + h * head_dim..kr * d + (h + 1) * head_dim];
                        kernels::axpy(p, vh, out);
                    }
                }
            }
            kernels::matmul_acc(
                &ctx2,
                self.model.param_data(layer.cross_attn.wo),
                &mut x,
                r,
                d,
                d,
            );

            // Feed-forward.
            let xn = self.rmsnorm_rows(&x, self.model.param_data(layer.ffn.norm), r, d);
            let ffd = cfg.feedforward_dim;
            let mut h1 = kernels::matmul(&xn, self.model.param_data(layer.ffn.w1), r, d, ffd);
            for v in &mut h1 {
                if *v < T::zero() {
                    *v = T::zero();
                }
            }
            kernels::matmul_acc(&h1, self.model.param_data(layer.ffn.w2), &mut x, r, ffd, d);
        }

        let xn = self.rmsnorm_rows(&x, self.model.param_data(slots.dec_final_norm), r, d);
        let vocab = cfg.vocab_size;
        let logits = kernels::matmul(&xn, self.model.param_data(slots.output_head), r, d, vocab);
        Ok(logits.chunks(vocab).map(|c| c.to_vec()).collect())
    }

    fn vocab_size(&self) -> usize {
        self.model.config.vocab_size
    }
}

// ---------------------------------------------------------------------------
// Oracle stepper: full recomputation each step
// ---------------------------------------------------------------------------

/// Recomputes the whole packed prefix with the non-incremental decoder at
/// every step. Slow; exists to cross-check the incremental cache.
pub struct FullForwardStepper<'m, T: Scalar> {
    model: &'m Model<T>,
    enc: crate::model::EncoderOutput<T>,
    delay: usize,
    tokens: Vec<u32>,
    positions: Vec<GridPosition>,
}

impl<'m, T: Scalar> FullForwardStepper<'m, T> {
    pub fn new(model: &'m Model<T>, input_ids: &[u32], delay: usize) -> Result<Self> {
        let enc = model.encode(input_ids)?;
        Ok(FullForwardStepper {
            model,
            enc,
            delay,
            tokens: Vec::new(),
            positions: Vec::new(),
        })
    }
}

impl<T: Scalar> DecodeStepper<T> for FullForwardStepper<'_, T> {
    fn step(&mut self, new_tokens: &[PackedToken]) -> Result<Vec<Vec<T>>> {
        for pt in new_tokens {
            self.tokens.push(pt.token);
            self.positions.push(pt.position);
        }
        let mask = build_self_attention_mask(&self.positions, self.delay)?;
        let logits = self.model.decoder_forward(
            &self.enc,
            &self.tokens,
            &self.positions,
            &mask,
            self.delay,
        )?;
        let vocab = self.model.config.vocab_size;
        let start = self.tokens.len() - new_tokens.len();
        Ok((start..self.tokens.len())
            .map(|row| logits.data()[row * vocab..(row + 1) * vocab].to_vec())
            .collect())
    }

    fn vocab_size(&self) -> usize {
        self.model.config.vocab_size
    }
}

// ---------------------------------------------------------------------------
// Scripted steppers (forced tokens)
// ---------------------------------------------------------------------------

/// Emits a fixed set of subsequences with certainty: subsequence `i` yields
/// its scripted tokens then the end token; any subsequence beyond the
/// script ends immediately.
pub struct ScriptedStepper {
    subsequences: Vec<Vec<u32>>,
    vocab_size: usize,
}

impl ScriptedStepper {
    pub fn new(subsequences: Vec<Vec<u32>>, vocab_size: usize) -> Self {
        ScriptedStepper {
            subsequences,
            vocab_size,
        }
    }

    fn one_hot(&self, token: u32) -> Vec<f32> {
        let mut row = vec![0.0f32; self.vocab_size];
        row[token as usize] = 10.0;
        row
    }
}

impl DecodeStepper<f32> for ScriptedStepper {
    fn step(&mut self, new_tokens: &[PackedToken]) -> Result<Vec<Vec<f32>>> {
        Ok(new_tokens
            .iter()
            .map(|pt| {
                let i = pt.position.subseq - 1;
                let j = pt.position.offset; // fed offset j predicts offset j+1
                let next = match self.subsequences.get(i) {
                    Some(content) if j < content.len() => content[j],
                    _ => EOS_ID,
                };
                self.one_hot(next)
            })
            .collect())
    }

    fn vocab_size(&self) -> usize {
        self.vocab_size
    }
}

/// Sequential counterpart: emits one fixed flat token stream then ends.
pub struct ScriptedSequential {
    flat: Vec<u32>,
    vocab_size: usize,
}

impl ScriptedSequential {
    pub fn new(flat: Vec<u32>, vocab_size: usize) -> Self {
        ScriptedSequential { flat, vocab_size }
    }
}

impl DecodeStepper<f32> for ScriptedSequential {
    fn step(&mut self, new_tokens: &[PackedToken]) -> Result<Vec<Vec<f32>>> {
        Ok(new_tokens
            .iter()
            .map(|pt| {
                let j = pt.position.offset;
                let next = self.flat.get(j).copied().unwrap_or(EOS_ID);
                let mut row = vec![0.0f32; self.vocab_size];
                row[next as usize] = 10.0;
                row
            })
            .collect())
    }

    fn vocab_size(&self) -> usize {
        self.vocab_size
    }
}

// ---------------------------------------------------------------------------
// Decode loops
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    /// Every open subsequence ended with the end token.
    AllComplete,
    /// The step cap was reached with incomplete subsequences.
    TimeMax,
    /// Completed, but the subsequence cap suppressed at least one
    /// establishment along the way.
    SubMaxAssisted,
}

/// Per-step record of the decode trace.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepTrace {
    pub step: usize,
    /// All tokens appended this step, end tokens included.
    pub tokens_emitted: usize,
    /// Content tokens only.
    pub content_tokens: usize,
    /// Subsequences in flight after establishment.
    pub active_subseqs: usize,
    /// Cumulative wall-clock since decode start, microseconds.
    pub cumulative_micros: u64,
}

#[derive(Debug, Clone)]
pub struct Subsequence {
    /// Framed tokens so far, starting with the start token.
    pub tokens: Vec<u32>,
    pub complete: bool,
}

/// Mutable state of one pipelined decode.
pub struct DecodeState<S> {
    pub stepper: S,
    pub subsequences: Vec<Subsequence>,
    pub step: usize,
    pub trace: Vec<StepTrace>,
}

#[derive(Debug, Clone)]
pub struct DecodeResult {
    /// Content subsequences with framing removed; empty streams dropped.
    pub subsequences: Vec<Vec<u32>>,
    /// Framed streams as generated (start token kept, end token kept).
    pub framed: Vec<Vec<u32>>,
    pub steps: usize,
    pub emitted_tokens: usize,
    pub termination: Termination,
    pub trace: Vec<StepTrace>,
}

fn is_reserved(id: u32) -> bool {
    matches!(id, PAD_ID | BOS_ID | EOS_ID | SEP_ID | UNK_ID)
}

/// Run the pipelined greedy loop over any stepper.
///
/// Every `delay` steps a new subsequence opens (until `sub_max`); each step
/// the stepper scores the frontier of every open subsequence in parallel
/// and the argmax token is appended; the loop ends when all current
/// subsequences have ended, or at `time_max`.
pub fn pipelined_decode_with<T: Scalar, S: DecodeStepper<T>>(
    stepper: S,
    schedule: &PipelineSchedule,
) -> Result<DecodeResult> {
    schedule.validate()?;
    let started = Instant::now();
    let mut state = DecodeState {
        stepper,
        subsequences: Vec::new(),
        step: 0,
        trace: Vec::new(),
    };
    let mut pending: Vec<PackedToken> = Vec::new();
    let mut emitted_total = 0usize;
    let mut denied_establishment = false;
    let mut termination = Termination::TimeMax;

    for t in 1..=schedule.time_max {
        state.step = t;
        if (t - 1) % schedule.delay == 0 {
            if state.subsequences.len() < schedule.sub_max {
                state.subsequences.push(Subsequence {
                    tokens: vec![BOS_ID],
                    complete: false,
                });
                pending.push(PackedToken {
                    position: GridPosition::new(state.subsequences.len(), 0),
                    token: BOS_ID,
                });
            } else {
                denied_establishment = true;
            }
        }
        // Canonical order within the step: all pending tokens share a
        // timestep, so subsequence index orders them.
        pending.sort_by_key(|pt| (timestep_of(pt.position, schedule.delay), pt.position.subseq));
        let logits = state.stepper.step(&pending)?;
        if logits.len() != pending.len() {
            return Err(DecodeError::Contract(format!(
                "stepper returned {} rows for {} fed tokens",
                logits.len(),
                pending.len()
            )));
        }

        let mut next_pending = Vec::new();
        let mut emitted = 0usize;
        let mut content = 0usize;
        for (row, fed) in logits.iter().zip(&pending) {
            let s = fed.position.subseq;
            let sub = &mut state.subsequences[s - 1];
            if sub.complete {
                continue;
            }
            let token = greedy_pick(row);
            let offset = sub.tokens.len();
            sub.tokens.push(token);
            emitted += 1;
            if token == EOS_ID {
                sub.complete = true;
            } else {
                content += 1;
            }
            // The new token becomes a key next step even when it ends the
            // subsequence mid-decode.
            next_pending.push(PackedToken {
                position: GridPosition::new(s, offset),
                token,
            });
        }
        emitted_total += emitted;
        state.trace.push(StepTrace {
            step: t,
            tokens_emitted: emitted,
            content_tokens: content,
            active_subseqs: state.subsequences.len(),
            cumulative_micros: started.elapsed().as_micros() as u64,
        });
        if state.subsequences.iter().all(|s| s.complete) {
            termination = if denied_establishment {
                Termination::SubMaxAssisted
            } else {
                Termination::AllComplete
            };
            break;
        }
        pending = next_pending;
    }

    let framed: Vec<Vec<u32>> = state
        .subsequences
        .iter()
        .map(|s| s.tokens.clone())
        .collect();
    let subsequences: Vec<Vec<u32>> = framed
        .iter()
        .map(|tokens| {
            tokens
                .iter()
                .copied()
                .filter(|&t| !is_reserved(t))
                .collect::<Vec<u32>>()
        })
        .filter(|c: &Vec<u32>| !c.is_empty())
        .collect();
    Ok(DecodeResult {
        subsequences,
        framed,
        steps: state.step,
        emitted_tokens: emitted_total,
        termination,
        trace: state.trace,
    })
}

/// Pipelined greedy decoding with the incremental model session.
pub fn pipelined_decode<T: Scalar>(
    model: &Model<T>,
    input_ids: &[u32],
    schedule: &PipelineSchedule,
) -> Result<DecodeResult> {
    let session = IncrementalSession::new(model, input_ids, schedule.delay)?;
    pipelined_decode_with(session, schedule)
}

#[derive(Debug, Clone)]
pub struct SequentialResult {
    /// Emitted tokens with framing stripped (separators kept).
    pub tokens: Vec<u32>,
    /// Raw emissions including the final end token, when one was produced.
    pub raw: Vec<u32>,
    /// One step per emitted token.
    pub steps: usize,
}

/// Standard greedy generation over a single stream with the causal mask.
pub fn sequential_greedy_with<T: Scalar, S: DecodeStepper<T>>(
    mut stepper: S,
    max_len: usize,
) -> Result<SequentialResult> {
    if max_len < 1 {
        return Err(DecodeError::Contract("max_len must be >= 1".into()));
    }
    let mut raw = Vec::new();
    let mut last = PackedToken {
        position: GridPosition::new(1, 0),
        token: BOS_ID,
    };
    for j in 1..=max_len {
        let rows = stepper.step(std::slice::from_ref(&last))?;
        let token = greedy_pick(&rows[0]);
        raw.push(token);
        if token == EOS_ID {
            break;
        }
        last = PackedToken {
            position: GridPosition::new(1, j),
            token,
        };
    }
    let steps = raw.len();
    let tokens = raw
        .iter()
        .copied()
        .filter(|&t| t != EOS_ID && t != BOS_ID && t != PAD_ID)
        .collect();
    Ok(SequentialResult { tokens, raw, steps })
}

/// Sequential greedy decoding with the incremental model session.
pub fn sequential_greedy<T: Scalar>(
    model: &Model<T>,
    input_ids: &[u32],
    max_len: usize,
) -> Result<SequentialResult> {
    let session = IncrementalSession::new(model, input_ids, 1)?;
    sequential_greedy_with(session, max_len)
}

/// Line-delimited trace export.
pub fn write_trace_jsonl<W: std::io::Write>(trace: &[StepTrace], mut w: W) -> std::io::Result<()> {
    for t in trace {
        serde_json::to_writer(&mut w, t)?;
        writeln!(w)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::schedule::completion_steps;

    const A: u32 = 5;
    const B: u32 = 6;
    const C: u32 = 7;
    const D: u32 = 8;
    const E: u32 = 9;

    fn schedule(delay: usize) -> PipelineSchedule {
        PipelineSchedule::with_delay(delay)
    }

    #[test]
    fn scripted_two_stream_decode_takes_four_steps() {
        let stepper = ScriptedStepper::new(vec![vec![A, B, C], vec![D, E]], 12);
        let result = pipelined_decode_with(stepper, &schedule(1)).unwrap();
        assert_eq!(result.subsequences, vec![vec![A, B, C], vec![D, E]]);
        assert_eq!(result.steps, 4);
        assert_eq!(result.termination, Termination::AllComplete);
        let content: Vec<usize> = result.trace.iter().map(|t| t.content_tokens).collect();
        assert_eq!(content, vec![1, 2, 2, 0]);
    }

    #[test]
    fn scripted_step_counts_match_loop_bookkeeping() {
        for (lens, delay) in [
            (vec![5usize, 1, 1], 2usize),
            (vec![3, 2], 1),
            (vec![1, 1], 5),
            (vec![2, 4, 3, 1], 1),
            (vec![4], 3),
        ] {
            let subseqs: Vec<Vec<u32>> = lens.iter().map(|&m| vec![A; m]).collect();
            let stepper = ScriptedStepper::new(subseqs, 12);
            let result = pipelined_decode_with(stepper, &schedule(delay)).unwrap();
            assert_eq!(
                result.steps,
                completion_steps(&lens, delay).unwrap(),
                "lens {lens:?} delay {delay}"
            );
        }
    }

    #[test]
    fn immediate_end_token_gives_empty_output_in_one_step() {
        let stepper = ScriptedStepper::new(vec![], 12);
        let result = pipelined_decode_with(stepper, &schedule(1)).unwrap();
        assert!(result.subsequences.is_empty());
        assert_eq!(result.steps, 1);
        assert_eq!(result.emitted_tokens, 1);
    }

    struct NeverEnds;

    impl DecodeStepper<f32> for NeverEnds {
        fn step(&mut self, new_tokens: &[PackedToken]) -> Result<Vec<Vec<f32>>> {
            Ok(new_tokens
                .iter()
                .map(|_| {
                    let mut row = vec![0.0f32; 12];
                    row[A as usize] = 1.0;
                    row
                })
                .collect())
        }

        fn vocab_size(&self) -> usize {
            12
        }
    }

    #[test]
    fn runaway_generation_stops_at_time_cap() {
        let sched = PipelineSchedule {
            delay: 1,
            time_max: 7,
            sub_max: 3,
        };
        let result = pipelined_decode_with::<f32, _>(NeverEnds, &sched).unwrap();
        assert_eq!(result.steps, 7);
        assert_eq!(result.termination, Termination::TimeMax);
        // Three streams opened; they emit 7, 6, and 5 tokens respectively.
        assert_eq!(result.emitted_tokens, 18);
    }

    #[test]
    fn emission_accounting_is_consistent() {
        let stepper = ScriptedStepper::new(vec![vec![A, B], vec![C], vec![D, E]], 12);
        let result = pipelined_decode_with(stepper, &schedule(2)).unwrap();
        let traced: usize = result.trace.iter().map(|t| t.tokens_emitted).sum();
        assert_eq!(traced, result.emitted_tokens);
        let framed_total: usize = result.framed.iter().map(|f| f.len() - 1).sum();
        assert_eq!(framed_total, result.emitted_tokens);
        assert!(result.steps <= schedule(2).time_max);
    }

    #[test]
    fn scripted_sequential_emits_flat_stream() {
        let flat = vec![A, B, C, SEP_ID, D, E];
        let stepper = ScriptedSequential::new(flat.clone(), 12);
        let result = sequential_greedy_with(stepper, 50).unwrap();
        assert_eq!(result.steps, 7); // six content tokens plus the end token
        assert_eq!(result.raw.last(), Some(&EOS_ID));
        assert_eq!(result.tokens, flat);
    }

    #[test]
    fn sequential_immediate_end_is_one_step() {
        let stepper = ScriptedSequential::new(vec![], 12);
        let result = sequential_greedy_with(stepper, 50).unwrap();
        assert!(result.tokens.is_empty());
        assert_eq!(result.steps, 1);
    }

    #[test]
    fn sequential_respects_max_len() {
        let stepper = ScriptedSequential::new(vec![A; 100], 12);
        let result = sequential_greedy_with(stepper, 9).unwrap();
        assert_eq!(result.steps, 9);
        assert_eq!(result.raw.len(), 9);
    }

    fn tiny_model(seed: u64) -> Model<f32> {
        let mut cfg = ModelConfig::tiny(16);
        cfg.model_dim = 32;
        cfg.feedforward_dim = 48;
        cfg.dropout_rate = 0.0;
        Model::new(cfg, seed).unwrap()
    }

    /// Drives the loop with the incremental session while checking every
    /// step against the full-recompute oracle.
    struct DualStepper<'m> {
        fast: IncrementalSession<'m, f32>,
        oracle: FullForwardStepper<'m, f32>,
    }

    impl DecodeStepper<f32> for DualStepper<'_> {
        fn step(&mut self, new_tokens: &[PackedToken]) -> Result<Vec<Vec<f32>>> {
            let fast = self.fast.step(new_tokens)?;
            let slow = self.oracle.step(new_tokens)?;
            for (f, s) in fast.iter().zip(&slow) {
                for (a, b) in f.iter().zip(s) {
                    assert!((a - b).abs() <= 1e-4, "logit diverged: {a} vs {b}");
                }
                assert_eq!(greedy_pick(f), greedy_pick(s), "argmax diverged");
            }
            Ok(fast)
        }

        fn vocab_size(&self) -> usize {
            self.fast.vocab_size()
        }
    }

    #[test]
    fn incremental_matches_full_forward_on_first_step() {
        let model = tiny_model(3);
        let input = [5u32, 6, 7];
        let mut fast = IncrementalSession::new(&model, &input, 1).unwrap();
        let mut slow = FullForwardStepper::new(&model, &input, 1).unwrap();
        let fed = [PackedToken {
            position: GridPosition::new(1, 0),
            token: BOS_ID,
        }];
        let a = fast.step(&fed).unwrap();
        let b = slow.step(&fed).unwrap();
        for (x, y) in a[0].iter().zip(&b[0]) {
            assert!((x - y).abs() <= 1e-4);
        }
    }

    #[test]
    fn incremental_matches_full_forward_across_decodes() {
        for seed in [1u64, 2, 3] {
            for delay in [1usize, 2] {
                let model = tiny_model(seed);
                let input = [5u32, 6, 7, 8];
                let dual = DualStepper {
                    fast: IncrementalSession::new(&model, &input, delay).unwrap(),
                    oracle: FullForwardStepper::new(&model, &input, delay).unwrap(),
                };
                let sched = PipelineSchedule {
                    delay,
                    time_max: 8,
                    sub_max: 4,
                };
                pipelined_decode_with(dual, &sched).unwrap();
            }
        }
    }

    #[test]
    fn single_stream_cap_reduces_to_sequential_greedy() {
        let model = tiny_model(7);
        let input = [5u32, 9, 11];
        let sched = PipelineSchedule {
            delay: 1,
            time_max: 12,
            sub_max: 1,
        };
        let piped = pipelined_decode(&model, &input, &sched).unwrap();
        let seq = sequential_greedy(&model, &input, 12).unwrap();
        assert_eq!(piped.framed.len(), 1);
        assert_eq!(&piped.framed[0][1..], &seq.raw[..]);
        assert_eq!(piped.steps, seq.steps);
    }

    #[test]
    fn desynchronized_feed_is_rejected() {
        let model = tiny_model(1);
        let mut session = IncrementalSession::new(&model, &[5, 6], 1).unwrap();
        session
            .step(&[PackedToken {
                position: GridPosition::new(1, 1),
                token: A,
            }])
            .unwrap();
        let err = session
            .step(&[PackedToken {
                position: GridPosition::new(1, 0),
                token: BOS_ID,
            }])
            .unwrap_err();
        assert!(matches!(err, DecodeError::CacheDesync(_)));
    }
}
