//! Desk-scale encoder-decoder transformer engine with a pipelined decoder.
//!
//! The decoder generates several target subsequences in parallel: a new
//! subsequence is established every `delay` time-steps, and at each step the
//! model emits one token per still-open subsequence. Token dependencies are
//! restricted by a grid-shaped attention mask so that a token in subsequence
//! `i` only conditions on earlier-or-equal-timestep tokens of subsequences
//! `1..=i`. The same network weights also serve an ordinary left-to-right
//! decoding regime, which acts as the speed/quality baseline.
//!
//! Crate layout:
//! - [`tensor`]: dense row-major tensors with tape-based reverse-mode autodiff
//! - [`schedule`]: grid positions, delay algebra, and dependency masks
//! - [`model`]: the transformer itself (shared by both regimes)
//! - [`train`]: packed training targets, teacher-forcing loss, the fit loop
//! - [`decode`]: incremental pipelined decoding and the sequential baseline
//! - [`data`]: synthetic tasks, vocabulary, JSONL persistence

pub mod data;
pub mod decode;
pub mod model;
pub mod scalar;
pub mod schedule;
pub mod tensor;
pub mod train;

pub use scalar::Scalar;

/// Decoding/training regime selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Regime {
    /// Standard left-to-right autoregressive generation.
    Sequential,
    /// Parallel generation of delay-staggered subsequences.
    Pipelined,
}

impl std::fmt::Display for Regime {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Regime::Sequential => write!(f, "sequential"),
            Regime::Pipelined => write!(f, "pipelined"),
        }
    }
}

impl std::str::FromStr for Regime {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "sequential" => Ok(Regime::Sequential),
            "pipelined" => Ok(Regime::Pipelined),
            other => Err(format!("unknown regime `{other}`")),
        }
    }
}
