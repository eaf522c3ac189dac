//! Packed training targets and the teacher-forcing optimization loop.
//!
//! A pipelined target frames every subsequence with start/end tokens, adds
//! one empty terminator subsequence so the model learns when to stop
//! opening new streams, packs all tokens in (timestep, subsequence) order,
//! and derives the grid attention mask. The sequential baseline uses the
//! same layout machinery with a single flat stream and a causal mask.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::EncodedExample;
use crate::model::vocab::{BOS_ID, EOS_ID, PAD_ID};
use crate::model::{Model, ModelError};
use crate::scalar::Scalar;
use crate::schedule::{
    build_self_attention_mask, timestep_of, GridPosition, MaskMatrix, ScheduleError,
};
use crate::tensor::{AdamW, AdamWConfig, Tape, Tensor, TensorError};
use crate::Regime;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("target subsequence {index} is empty; empty subsequences are reserved for the terminator")]
    EmptySubsequence { index: usize },
    #[error("reserved token id {id} inside subsequence content")]
    ReservedToken { id: u32 },
    #[error("no position carries a prediction target")]
    AllPositionsMasked,
    #[error("non-finite loss at optimization step {step}")]
    NonFiniteLoss { step: usize },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("{0}")]
    Contract(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
}

pub type Result<T> = std::result::Result<T, TrainError>;

/// A packed teacher-forcing target.
#[derive(Debug, Clone)]
pub struct TargetLayout {
    /// Token ids in canonical (timestep, subsequence) order.
    pub token_ids: Vec<u32>,
    pub positions: Vec<GridPosition>,
    pub mask: MaskMatrix,
    /// Next-in-subsequence token per position (padding id where inactive).
    pub targets: Vec<u32>,
    /// True exactly where `targets` holds a real prediction.
    pub loss_mask: Vec<bool>,
    pub delay: usize,
    /// Positions before any padding.
    pub content_len: usize,
}

impl TargetLayout {
    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    /// Extend to `target_len` with padding tokens. Pad positions attend
    /// only themselves and are excluded as keys and as loss positions.
    pub fn pad_to(&self, target_len: usize) -> TargetLayout {
        assert!(target_len >= self.len());
        let old = self.len();
        let mut out = self.clone();
        if target_len == old {
            return out;
        }
        let max_subseq = self.positions.iter().map(|p| p.subseq).max().unwrap_or(0);
        let mut mask = MaskMatrix::new_false(target_len);
        for q in 0..old {
            for k in 0..old {
                mask.set(q, k, self.mask.allowed(q, k));
            }
        }
        for p in old..target_len {
            mask.set(p, p, true);
        }
        for r in 0..(target_len - old) {
            out.token_ids.push(PAD_ID);
            out.positions.push(GridPosition::new(max_subseq + 1 + r, 0));
            out.targets.push(PAD_ID);
            out.loss_mask.push(false);
        }
        out.mask = mask;
        out
    }
}

fn check_content(subsequences: &[Vec<u32>]) -> Result<()> {
    if subsequences.is_empty() {
        return Err(TrainError::Contract("need at least one subsequence".into()));
    }
    for (i, s) in subsequences.iter().enumerate() {
        if s.is_empty() {
            return Err(TrainError::EmptySubsequence { index: i });
        }
        for &t in s {
            if t == PAD_ID || t == BOS_ID || t == EOS_ID {
                return Err(TrainError::ReservedToken { id: t });
            }
        }
    }
    Ok(())
}

/// Build the pipelined training layout: framed subsequences plus the empty
/// terminator, packed canonically, with mask and loss targets.
pub fn build_training_target(subsequences: &[Vec<u32>], delay: usize) -> Result<TargetLayout> {
    check_content(subsequences)?;
    if delay < 1 {
        return Err(TrainError::Contract("delay must be >= 1".into()));
    }
    let mut framed: Vec<Vec<u32>> = Vec::with_capacity(subsequences.len() + 1);
    for s in subsequences {
        let mut f = Vec::with_capacity(s.len() + 2);
        f.push(BOS_ID);
        f.extend_from_slice(s);
        f.push(EOS_ID);
        framed.push(f);
    }
    framed.push(vec![BOS_ID, EOS_ID]);

    // (position, token, predicted-next) triples.
    let mut entries: Vec<(GridPosition, u32, Option<u32>)> = Vec::new();
    for (idx, f) in framed.iter().enumerate() {
        let subseq = idx + 1;
        for (offset, &tok) in f.iter().enumerate() {
            let next = f.get(offset + 1).copied();
            entries.push((GridPosition::new(subseq, offset), tok, next));
        }
    }
    entries.sort_by_key(|(p, _, _)| (timestep_of(*p, delay), p.subseq));

    let positions: Vec<GridPosition> = entries.iter().map(|(p, _, _)| *p).collect();
    let mask = build_self_attention_mask(&positions, delay)?;
    let token_ids: Vec<u32> = entries.iter().map(|(_, t, _)| *t).collect();
    let targets: Vec<u32> = entries
        .iter()
        .map(|(_, _, n)| n.unwrap_or(PAD_ID))
        .collect();
    let loss_mask: Vec<bool> = entries.iter().map(|(_, _, n)| n.is_some()).collect();
    let content_len = token_ids.len();
    Ok(TargetLayout {
        token_ids,
        positions,
        mask,
        targets,
        loss_mask,
        delay,
        content_len,
    })
}

/// Flatten subsequences into the sequential rendering:
/// start, first subsequence, separator, second subsequence, ..., end.
pub fn build_sequential_target(subsequences: &[Vec<u32>], sep_id: u32) -> Vec<u32> {
    let mut out = vec![BOS_ID];
    for (i, s) in subsequences.iter().enumerate() {
        if i > 0 {
            out.push(sep_id);
        }
        out.extend_from_slice(s);
    }
    out.push(EOS_ID);
    out
}

/// Layout for the sequential baseline: one stream, causal mask.
pub fn sequential_layout(flat_framed: &[u32]) -> Result<TargetLayout> {
    if flat_framed.len() < 2 {
        return Err(TrainError::Contract(
            "sequential target needs start and end tokens".into(),
        ));
    }
    let n = flat_framed.len();
    let positions: Vec<GridPosition> = (0..n).map(|j| GridPosition::new(1, j)).collect();
    let mask = MaskMatrix::lower_triangular(n);
    let targets: Vec<u32> = (0..n)
        .map(|j| flat_framed.get(j + 1).copied().unwrap_or(PAD_ID))
        .collect();
    let mut loss_mask = vec![true; n];
    loss_mask[n - 1] = false;
    Ok(TargetLayout {
        token_ids: flat_framed.to_vec(),
        positions,
        mask,
        targets,
        loss_mask,
        delay: 1,
        content_len: n,
    })
}

/// Layout for one example under the given regime.
pub fn layout_for(example: &EncodedExample, regime: Regime, delay: usize) -> Result<TargetLayout> {
    match regime {
        Regime::Pipelined => build_training_target(&example.target_subseqs, delay),
        Regime::Sequential => {
            check_content(&example.target_subseqs)?;
            let flat =
                build_sequential_target(&example.target_subseqs, crate::model::vocab::SEP_ID);
            sequential_layout(&flat)
        }
    }
}

/// Mean negative log-probability of the true next token over predicting
/// positions. Eager counterpart of the differentiable loss used by `fit`.
pub fn compute_loss<T: Scalar>(logits: &Tensor<T>, layout: &TargetLayout) -> Result<f64> {
    if logits.shape().len() != 2 || logits.shape()[0] != layout.len() {
        return Err(TrainError::Contract(format!(
            "logits rows {:?} must match packed length {}",
            logits.shape(),
            layout.len()
        )));
    }
    let vocab = logits.shape()[1];
    let active = layout.loss_mask.iter().filter(|&&a| a).count();
    if active == 0 {
        return Err(TrainError::AllPositionsMasked);
    }
    let mut logp = vec![T::zero(); vocab];
    let mut total = 0.0f64;
    for r in 0..layout.len() {
        if !layout.loss_mask[r] {
            continue;
        }
        crate::tensor::kernels::log_softmax_row(logits.row(r), &mut logp);
        total -= Scalar::to_f64(logp[layout.targets[r] as usize]);
    }
    Ok(total / active as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub seed: u64,
    pub max_input_len: usize,
    pub delay: usize,
    pub weight_decay: f64,
    /// Linear learning-rate ramp over this many optimization steps.
    pub warmup_steps: usize,
    /// Stop after any epoch whose mean loss falls below this.
    pub early_stop_loss: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 16,
            learning_rate: 3e-4,
            epochs: 10,
            seed: 0,
            max_input_len: 256,
            delay: 1,
            weight_decay: 0.0,
            warmup_steps: 0,
            early_stop_loss: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.batch_size >= 1
            && self.learning_rate >= 0.0
            && self.epochs >= 1
            && self.max_input_len >= 1
            && self.delay >= 1
            && self.weight_decay >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(TrainError::Contract(format!(
                "invalid train config: {self:?}"
            )))
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitReport {
    pub epoch_losses: Vec<f64>,
    pub steps: usize,
    pub early_stopped: bool,
}

/// Format-versioned record of a training run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunMetadata {
    pub format_version: u32,
    pub regime: Regime,
    pub train_config: TrainConfig,
    pub model_config: crate::model::ModelConfig,
    pub vocab_hash: String,
    pub loss_reduction: String,
    pub epoch_losses: Vec<f64>,
    pub early_stopped: bool,
}

impl RunMetadata {
    pub const FORMAT_VERSION: u32 = 1;

    pub fn new<T: Scalar>(
        model: &Model<T>,
        cfg: &TrainConfig,
        regime: Regime,
        vocab_hash: &str,
        report: &FitReport,
    ) -> Self {
        RunMetadata {
            format_version: Self::FORMAT_VERSION,
            regime,
            train_config: cfg.clone(),
            model_config: model.config.clone(),
            vocab_hash: vocab_hash.to_string(),
            loss_reduction: "mean-over-predicting-positions".into(),
            epoch_losses: report.epoch_losses.clone(),
            early_stopped: report.early_stopped,
        }
    }

    pub fn save(&self, path: &std::path::Path) -> std::io::Result<()> {
        std::fs::write(path, serde_json::to_vec_pretty(self).expect("serializable"))
    }
}

fn derive_seed(seed: u64, epoch: usize, index: usize) -> u64 {
    // splitmix64 over the packed identifiers
    let mut z = seed
        .wrapping_add(0x9e3779b97f4a7c15u64.wrapping_mul(1 + epoch as u64))
        .wrapping_add(0x632be59bd9b4e019u64.wrapping_mul(1 + index as u64));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Loss and parameter gradients for one example.
fn example_grads<T: Scalar>(
    model: &Model<T>,
    input_ids: &[u32],
    layout: &TargetLayout,
    dropout_seed: u64,
) -> Result<(f64, Vec<(usize, Vec<T>)>)> {
    let mut tape = Tape::training(dropout_seed);
    let bind = model.bind(&mut tape);
    let enc = model.encode_on(&mut tape, &bind, input_ids)?;
    let logits = model.decoder_forward_on(
        &mut tape,
        &bind,
        enc,
        &layout.token_ids,
        &layout.positions,
        &layout.mask,
        layout.delay,
    )?;
    let loss = tape.mean_nll(logits, &layout.targets, &layout.loss_mask)?;
    let loss_val = Scalar::to_f64(tape.data(loss)[0]);
    let grads = tape.backward(loss)?;
    Ok((loss_val, grads))
}

/// Teacher-forcing training. Deterministic for a fixed seed: example order,
/// dropout, and gradient accumulation order are all seed-derived.
pub fn fit<T: Scalar>(
    model: &mut Model<T>,
    examples: &[EncodedExample],
    regime: Regime,
    cfg: &TrainConfig,
) -> Result<FitReport> {
    use rand::seq::SliceRandom;
    use rand::SeedableRng;

    cfg.validate()?;
    if examples.is_empty() {
        return Err(TrainError::EmptyDataset);
    }

    let prepared: Vec<(Vec<u32>, TargetLayout)> = examples
        .iter()
        .map(|ex| {
            let mut input = ex.input_ids.clone();
            input.truncate(cfg.max_input_len);
            let layout = layout_for(ex, regime, cfg.delay)?;
            Ok((input, layout))
        })
        .collect::<Result<_>>()?;

    let mut optimizer = AdamW::<T>::new(
        AdamWConfig {
            learning_rate: cfg.learning_rate,
            weight_decay: cfg.weight_decay,
            ..AdamWConfig::default()
        },
        &model.store().sizes(),
    );

    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut steps = 0usize;
    let mut early_stopped = false;

    let mut order: Vec<usize> = (0..prepared.len()).collect();
    for epoch in 0..cfg.epochs {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, epoch, 0));
        order.shuffle(&mut rng);

        let mut epoch_loss = 0.0f64;
        let mut seen = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            // Per-example gradients in parallel; reduction stays in batch
            // order so results are independent of worker scheduling.
            let results: Vec<Result<(f64, Vec<(usize, Vec<T>)>)>> = batch
                .par_iter()
                .map(|&idx| {
                    let (input, layout) = &prepared[idx];
                    example_grads(model, input, layout, derive_seed(cfg.seed, epoch, idx + 1))
                })
                .collect();

            let mut acc: Vec<Vec<T>> = model
                .store()
                .sizes()
                .iter()
                .map(|&s| vec![T::zero(); s])
                .collect();
            let inv = T::from_f64(1.0 / batch.len() as f64);
            for result in results {
                let (loss, grads) = result?;
                if !loss.is_finite() {
                    return Err(TrainError::NonFiniteLoss { step: steps });
                }
                epoch_loss += loss;
                seen += 1;
                for (slot, g) in grads {
                    crate::tensor::kernels::axpy(inv, &g, &mut acc[slot]);
                }
            }

            let step_no = optimizer.begin_step();
            if cfg.warmup_steps > 0 {
                let ramp = (step_no as f64 / cfg.warmup_steps as f64).min(1.0);
                optimizer.config.learning_rate = cfg.learning_rate * ramp;
            }
            for slot in 0..acc.len() {
                let name = model.store().name(slot).to_string();
                let param = model.store_mut().value_mut(slot);
                let len = param.len();
                optimizer.update(slot, &name, &mut param.data_mut()[..len], &acc[slot])?;
            }
            steps += 1;
        }

        let mean = epoch_loss / seen as f64;
        epoch_losses.push(mean);
        if cfg.early_stop_loss.is_some_and(|t| mean < t) {
            early_stopped = true;
            break;
        }
    }

    Ok(FitReport {
        epoch_losses,
        steps,
        early_stopped,
    })
}
