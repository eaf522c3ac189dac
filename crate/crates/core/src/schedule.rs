//! Timestep algebra for pipelined generation.
//!
//! Tokens live on a grid: subsequence index `i >= 1` and offset `j >= 0`
//! within the subsequence (offset 0 is the subsequence's start token). With
//! delay `dt`, the token at `(i, j)` is produced at time-step
//! `(i - 1) * dt + j`. A query may attend a key exactly when the key's
//! subsequence index and time-step are both less than or equal to its own,
//! which reproduces "everything generated so far in my own and earlier
//! subsequences".

use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum ScheduleError {
    #[error("duplicate grid position (subseq {subseq}, offset {offset})")]
    DuplicatePosition { subseq: usize, offset: usize },
    #[error("completion query needs at least one subsequence length")]
    EmptyLengths,
    #[error("invalid schedule: {0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, ScheduleError>;

/// Coordinates of one generated token: subsequence index (1-based) and
/// offset within the subsequence (0 is the start token).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct GridPosition {
    pub subseq: usize,
    pub offset: usize,
}

impl GridPosition {
    pub fn new(subseq: usize, offset: usize) -> Self {
        debug_assert!(subseq >= 1, "subsequence indices are 1-based");
        GridPosition { subseq, offset }
    }

    /// Time-step at which this token is generated: `(i - 1) * delay + j`.
    pub fn timestep(&self, delay: usize) -> usize {
        timestep_of(*self, delay)
    }
}

pub fn timestep_of(pos: GridPosition, delay: usize) -> usize {
    debug_assert!(delay >= 1);
    (pos.subseq - 1) * delay + pos.offset
}

/// Number of subsequences in flight at time-step `t`: `ceil(t / delay)`,
/// before any cap.
pub fn active_subsequences(t: usize, delay: usize) -> usize {
    debug_assert!(t >= 1 && delay >= 1);
    t.div_ceil(delay)
}

/// Unsigned grid distance: `|t_a - t_b| + |i_a - i_b|`.
pub fn manhattan_distance(a: GridPosition, b: GridPosition, delay: usize) -> usize {
    let (ta, tb) = (timestep_of(a, delay), timestep_of(b, delay));
    ta.abs_diff(tb) + a.subseq.abs_diff(b.subseq)
}

/// Decode-control knobs: delay between new subsequences and the hard caps
/// on time-steps and subsequence count.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PipelineSchedule {
    pub delay: usize,
    pub time_max: usize,
    pub sub_max: usize,
}

impl Default for PipelineSchedule {
    fn default() -> Self {
        PipelineSchedule {
            delay: 1,
            time_max: 50,
            sub_max: 20,
        }
    }
}

impl PipelineSchedule {
    pub fn with_delay(delay: usize) -> Self {
        PipelineSchedule {
            delay,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.delay >= 1 && self.time_max >= 1 && self.sub_max >= 1 {
            Ok(())
        } else {
            Err(ScheduleError::Invalid(format!(
                "all schedule fields must be >= 1, got {self:?}"
            )))
        }
    }
}

/// Square boolean attention-permission matrix over packed token positions.
/// Entry `(q, k)` is true when query `q` may attend key `k`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskMatrix {
    size: usize,
    bits: Vec<bool>,
}

impl MaskMatrix {
    pub fn new_false(size: usize) -> Self {
        MaskMatrix {
            size,
            bits: vec![false; size * size],
        }
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn allowed(&self, q: usize, k: usize) -> bool {
        self.bits[q * self.size + k]
    }

    pub fn set(&mut self, q: usize, k: usize, value: bool) {
        self.bits[q * self.size + k] = value;
    }

    pub fn row(&self, q: usize) -> &[bool] {
        &self.bits[q * self.size..(q + 1) * self.size]
    }

    /// Flat row-major view, `size * size` entries.
    pub fn as_slice(&self) -> &[bool] {
        &self.bits
    }

    /// Standard causal (lower-triangular) mask.
    pub fn lower_triangular(size: usize) -> Self {
        let mut m = MaskMatrix::new_false(size);
        for q in 0..size {
            for k in 0..=q {
                m.set(q, k, true);
            }
        }
        m
    }
}

/// Build the self-attention permission mask for a packed list of grid
/// positions: `(q, k)` is allowed iff `subseq_k <= subseq_q` and
/// `timestep_k <= timestep_q`.
pub fn build_self_attention_mask(positions: &[GridPosition], delay: usize) -> Result<MaskMatrix> {
    let mut seen = std::collections::HashSet::with_capacity(positions.len());
    for p in positions {
        if !seen.insert(*p) {
            return Err(ScheduleError::DuplicatePosition {
                subseq: p.subseq,
                offset: p.offset,
            });
        }
    }
    let n = positions.len();
    let steps: Vec<usize> = positions.iter().map(|p| timestep_of(*p, delay)).collect();
    let mut mask = MaskMatrix::new_false(n);
    for q in 0..n {
        for k in 0..n {
            let ok = positions[k].subseq <= positions[q].subseq && steps[k] <= steps[q];
            mask.set(q, k, ok);
        }
    }
    Ok(mask)
}

/// One generation event in the bookkeeping simulation of the decode loop.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SimEvent {
    pub position: GridPosition,
    pub step: usize,
    /// True when the emitted token ends its subsequence.
    pub is_end: bool,
}

/// Model-free simulation of the decode loop for a target that consists of
/// the given subsequence lengths (content tokens; each subsequence then
/// emits one end token, and every exploratory subsequence beyond the last
/// real one ends immediately).
#[derive(Debug, Clone)]
pub struct ForcedSimulation {
    /// Generation events in (step, subseq) order.
    pub events: Vec<SimEvent>,
    /// Total number of decode time-steps taken.
    pub steps: usize,
    /// Subsequences established, including exploratory ones.
    pub established: usize,
}

/// Run the decode-loop bookkeeping with forced lengths. Mirrors the real
/// loop: at every step `t` with `(t - 1) % delay == 0` and fewer than
/// `sub_max` subsequences, a new one starts; every open subsequence emits
/// one token per step; the loop ends when all current subsequences have
/// ended.
pub fn simulate_forced(lengths: &[usize], delay: usize, sub_max: usize) -> ForcedSimulation {
    debug_assert!(delay >= 1);
    let n = lengths.len();
    let mut emitted: Vec<usize> = Vec::new(); // tokens emitted per open subsequence
    let mut ended: Vec<bool> = Vec::new();
    let mut events = Vec::new();
    let mut t = 0usize;
    loop {
        t += 1;
        if (t - 1) % delay == 0 && emitted.len() < sub_max {
            emitted.push(0);
            ended.push(false);
        }
        for i in 0..emitted.len() {
            if ended[i] {
                continue;
            }
            let content_len = if i < n { lengths[i] } else { 0 };
            let offset = emitted[i] + 1; // offset 0 is the start token
            let is_end = emitted[i] >= content_len;
            events.push(SimEvent {
                position: GridPosition::new(i + 1, offset),
                step: t,
                is_end,
            });
            emitted[i] += 1;
            if is_end {
                ended[i] = true;
            }
        }
        if ended.iter().all(|&e| e) {
            break;
        }
    }
    ForcedSimulation {
        events,
        steps: t,
        established: emitted.len(),
    }
}

/// Number of decode time-steps the pipelined loop takes to emit exactly
/// these subsequences (content plus one end token each), with no cap on
/// the subsequence count.
pub fn completion_steps(subseq_lengths: &[usize], delay: usize) -> Result<usize> {
    if subseq_lengths.is_empty() {
        return Err(ScheduleError::EmptyLengths);
    }
    if subseq_lengths.iter().any(|&l| l < 1) {
        return Err(ScheduleError::Invalid(
            "subsequence lengths must be >= 1".into(),
        ));
    }
    Ok(simulate_forced(subseq_lengths, delay, usize::MAX).steps)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pos(subseq: usize, offset: usize) -> GridPosition {
        GridPosition::new(subseq, offset)
    }

    #[test]
    fn timestep_examples() {
        assert_eq!(timestep_of(pos(1, 1), 1), 1);
        assert_eq!(timestep_of(pos(2, 1), 1), 2);
        assert_eq!(timestep_of(pos(3, 2), 2), 6);
    }

    #[test]
    fn active_subsequence_counts() {
        assert_eq!(active_subsequences(3, 1), 3);
        assert_eq!(active_subsequences(3, 2), 2);
        assert_eq!(active_subsequences(4, 4), 1);
    }

    #[test]
    fn manhattan_examples() {
        assert_eq!(manhattan_distance(pos(2, 3), pos(2, 3), 1), 0);
        assert_eq!(manhattan_distance(pos(1, 2), pos(2, 2), 1), 2);
        assert_eq!(manhattan_distance(pos(1, 1), pos(2, 1), 3), 4);
    }

    /// Positions for a two-subsequence target of lengths (3, 2) plus the
    /// empty terminator, framed with start/end tokens, delay 1.
    fn two_stream_positions() -> Vec<GridPosition> {
        let mut v = Vec::new();
        for j in 0..5 {
            v.push(pos(1, j)); // start A B C end
        }
        for j in 0..4 {
            v.push(pos(2, j)); // start D E end
        }
        for j in 0..2 {
            v.push(pos(3, j)); // start end
        }
        v
    }

    #[test]
    fn second_stream_start_attends_three_tokens() {
        let positions = two_stream_positions();
        let mask = build_self_attention_mask(&positions, 1).unwrap();
        let q = positions.iter().position(|p| *p == pos(2, 0)).unwrap();
        let attended: Vec<GridPosition> = (0..positions.len())
            .filter(|&k| mask.allowed(q, k))
            .map(|k| positions[k])
            .collect();
        assert_eq!(attended, vec![pos(1, 0), pos(1, 1), pos(2, 0)]);
    }

    #[test]
    fn second_stream_first_token_attends_five_tokens() {
        let positions = two_stream_positions();
        let mask = build_self_attention_mask(&positions, 1).unwrap();
        let q = positions.iter().position(|p| *p == pos(2, 1)).unwrap();
        let attended: Vec<GridPosition> = (0..positions.len())
            .filter(|&k| mask.allowed(q, k))
            .map(|k| positions[k])
            .collect();
        assert_eq!(
            attended,
            vec![pos(1, 0), pos(1, 1), pos(1, 2), pos(2, 0), pos(2, 1)]
        );
    }

    #[test]
    fn single_subsequence_mask_is_lower_triangular() {
        let positions: Vec<GridPosition> = (0..6).map(|j| pos(1, j)).collect();
        let mask = build_self_attention_mask(&positions, 1).unwrap();
        assert_eq!(mask, MaskMatrix::lower_triangular(6));
    }

    #[test]
    fn duplicate_positions_are_rejected() {
        let err = build_self_attention_mask(&[pos(1, 0), pos(1, 0)], 1).unwrap_err();
        assert!(matches!(err, ScheduleError::DuplicatePosition { .. }));
    }

    #[test]
    fn completion_examples() {
        assert_eq!(completion_steps(&[3, 2], 1).unwrap(), 4);
        for delay in 1..=4 {
            for m in 1..=6 {
                assert_eq!(completion_steps(&[m], delay).unwrap(), m + 1);
            }
        }
        assert!(matches!(
            completion_steps(&[], 1),
            Err(ScheduleError::EmptyLengths)
        ));
    }

    #[test]
    fn completion_matches_closed_form_when_no_truncation() {
        // Whenever every length is at least the delay, each subsequence is
        // still running when the next one starts, so the loop ends at
        // max_i((i-1)*delay + len_i + 1).
        for delay in 1..=3usize {
            for lens in [[3usize, 3, 4], [5, 5, 5], [4, 3, 3]] {
                let analytic = lens
                    .iter()
                    .enumerate()
                    .map(|(i, &m)| i * delay + m + 1)
                    .max()
                    .unwrap();
                assert_eq!(completion_steps(&lens, delay).unwrap(), analytic);
            }
        }
    }

    #[test]
    fn forced_simulation_counts_match_staggered_example() {
        // Lengths (3, 2) at delay 1: content emissions per step are 1, 2, 2
        // and the final step only carries end tokens; 4 steps total.
        let sim = simulate_forced(&[3, 2], 1, usize::MAX);
        assert_eq!(sim.steps, 4);
        let mut content_per_step = vec![0usize; sim.steps];
        for e in &sim.events {
            if !e.is_end {
                content_per_step[e.step - 1] += 1;
            }
        }
        assert_eq!(content_per_step, vec![1, 2, 2, 0]);
    }

    #[test]
    fn early_break_with_large_delay_skips_pending_subsequences() {
        // A length-1 subsequence finishes at step 2; with delay 5 the second
        // subsequence would only start at step 6, so the loop breaks first.
        let sim = simulate_forced(&[1, 1], 5, usize::MAX);
        assert_eq!(sim.steps, 2);
        assert_eq!(sim.established, 1);
    }

    #[test]
    fn mask_monotone_within_subsequence() {
        let positions = two_stream_positions();
        let mask = build_self_attention_mask(&positions, 1).unwrap();
        let n = positions.len();
        for q in 0..n {
            for k in 0..n {
                if !mask.allowed(q, k) {
                    continue;
                }
                for k2 in 0..n {
                    if positions[k2].subseq == positions[k].subseq
                        && positions[k2].offset < positions[k].offset
                    {
                        assert!(mask.allowed(q, k2));
                    }
                }
            }
        }
    }

    /// Exhaustive oracle: the mask row of the position that predicts a
    /// token must equal the set of tokens already present when the decode
    /// loop generates that token (restricted to subsequences at or below
    /// the token's own).
    #[test]
    fn mask_matches_decode_loop_availability_exhaustively() {
        for delay in 1..=3usize {
            for n in 1..=4usize {
                let mut lens = vec![1usize; n];
                loop {
                    check_mask_against_simulation(&lens, delay);
                    // Odometer over lengths in 1..=5.
                    let mut idx = 0;
                    loop {
                        if idx == n {
                            break;
                        }
                        lens[idx] += 1;
                        if lens[idx] <= 5 {
                            break;
                        }
                        lens[idx] = 1;
                        idx += 1;
                    }
                    if idx == n {
                        break;
                    }
                }
            }
        }
    }

    fn check_mask_against_simulation(lengths: &[usize], delay: usize) {
        let sim = simulate_forced(lengths, delay, usize::MAX);

        // Every position that exists in the packed layout: starts for each
        // established subsequence plus all generated tokens.
        let mut positions: Vec<GridPosition> = (1..=sim.established).map(|i| pos(i, 0)).collect();
        positions.extend(sim.events.iter().map(|e| e.position));
        positions.sort_by_key(|p| (timestep_of(*p, delay), p.subseq));
        let mask = build_self_attention_mask(&positions, delay).unwrap();
        let index_of = |p: GridPosition| positions.iter().position(|x| *x == p).unwrap();

        // Start tokens enter at establishment; generated tokens at their
        // event step. Both are visible from the step AFTER insertion, plus
        // same-step visibility handled below.
        let insertion_step = |p: GridPosition| -> usize {
            if p.offset == 0 {
                (p.subseq - 1) * delay + 1
            } else {
                sim.events
                    .iter()
                    .find(|e| e.position == p)
                    .expect("generated token has an event")
                    .step
            }
        };

        for event in &sim.events {
            // The query that predicts this token is the previous position
            // in the same subsequence.
            let query = pos(event.position.subseq, event.position.offset - 1);
            let q = index_of(query);
            for (k, kp) in positions.iter().enumerate() {
                let available_when_generated = kp.subseq <= event.position.subseq
                    && (insertion_step(*kp) < event.step
                        || (kp.offset == 0 && insertion_step(*kp) == event.step));
                assert_eq!(
                    mask.allowed(q, k),
                    available_when_generated,
                    "lengths {lengths:?} delay {delay} query {query:?} key {kp:?}"
                );
            }
        }
    }
}
