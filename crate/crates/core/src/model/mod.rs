//! The encoder-decoder transformer.
//!
//! One set of weights serves both decoding regimes: the decoder's
//! self-attention takes an externally supplied permission mask and a
//! relative-position bias derived from grid Manhattan distances, so the
//! sequential baseline is just this network with a lower-triangular mask
//! over a single-subsequence grid.

pub mod checkpoint;
pub mod vocab;

pub use vocab::Vocab;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;
use crate::schedule::{manhattan_distance, GridPosition, MaskMatrix};
use crate::tensor::{Tape, Tensor, TensorError, ValueId};

const RMS_EPS: f64 = 1e-6;

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("token id {id} out of vocabulary of size {vocab_size}")]
    OutOfVocab { id: u32, vocab_size: usize },
    #[error("input must be nonempty")]
    EmptyInput,
    #[error("{0}")]
    Contract(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub num_heads: usize,
    pub model_dim: usize,
    pub feedforward_dim: usize,
    pub vocab_size: usize,
    pub num_relative_buckets: usize,
    pub max_relative_distance: usize,
    /// Applied during training only.
    pub dropout_rate: f64,
}

impl ModelConfig {
    /// Small default suitable for unit tests.
    pub fn tiny(vocab_size: usize) -> Self {
        ModelConfig {
            num_layers: 2,
            num_heads: 4,
            model_dim: 64,
            feedforward_dim: 128,
            vocab_size,
            num_relative_buckets: 32,
            max_relative_distance: 128,
            dropout_rate: 0.1,
        }
    }

    pub fn dropout_rate(&self) -> f64 {
        self.dropout_rate
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.num_layers >= 1
            && self.num_heads >= 1
            && self.model_dim >= 1
            && self.model_dim % self.num_heads == 0
            && self.feedforward_dim >= 1
            && self.vocab_size > vocab::UNK_ID as usize
            && self.num_relative_buckets >= 2
            && self.max_relative_distance > self.num_relative_buckets / 2
            && (0.0..1.0).contains(&self.dropout_rate);
        if ok {
            Ok(())
        } else {
            Err(ModelError::Contract(format!("invalid model config: {self:?}")))
        }
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.num_heads
    }
}

/// Map an unsigned relative distance to a bias bucket: exact for the first
/// half of the buckets, logarithmic up to `max_distance`, saturating in the
/// last bucket beyond it.
pub fn relative_bucket(distance: usize, num_buckets: usize, max_distance: usize) -> u32 {
    let max_exact = num_buckets / 2;
    if distance < max_exact {
        return distance as u32;
    }
    let ratio = ((distance as f64) / (max_exact as f64)).ln()
        / ((max_distance as f64) / (max_exact as f64)).ln();
    let bucket = max_exact + (ratio * (num_buckets - max_exact) as f64) as usize;
    bucket.min(num_buckets - 1) as u32
}

/// Signed variant for encoder self-attention: half the table covers each
/// direction, so "one position left" and "one position right" get distinct
/// buckets. Direction matters there; the decoder grid needs no sign because
/// its mask already orders keys.
pub fn relative_bucket_signed(delta: isize, num_buckets: usize, max_distance: usize) -> u32 {
    let half = (num_buckets / 2).max(1);
    let base = if delta > 0 { half as u32 } else { 0 };
    base + relative_bucket(delta.unsigned_abs(), half, max_distance)
}

/// Encoder hidden states, one row per input token.
#[derive(Debug, Clone)]
pub struct EncoderOutput<T: Scalar> {
    pub hidden: Tensor<T>,
}

impl<T: Scalar> EncoderOutput<T> {
    pub fn len(&self) -> usize {
        self.hidden.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone)]
pub(crate) struct AttnRefs {
    pub norm: usize,
    pub wq: usize,
    pub wk: usize,
    pub wv: usize,
    pub wo: usize,
}

#[derive(Debug, Clone)]
pub(crate) struct FfnRefs {
    pub norm: usize,
    pub w1: usize,
    pub w2: usize,
}

#[derive(Debug, Clone)]
pub(crate) struct EncLayerRefs {
    pub attn: AttnRefs,
    pub ffn: FfnRefs,
}

#[derive(Debug, Clone)]
pub(crate) struct DecLayerRefs {
    pub self_attn: AttnRefs,
    pub cross_attn: AttnRefs,
    pub ffn: FfnRefs,
}

/// Ordered, named parameter tensors.
#[derive(Debug, Clone)]
pub struct ParamStore<T: Scalar> {
    names: Vec<String>,
    values: Vec<Tensor<T>>,
}

impl<T: Scalar> ParamStore<T> {
    fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            values: Vec::new(),
        }
    }

    fn add(&mut self, name: String, value: Tensor<T>) -> usize {
        self.names.push(name);
        self.values.push(value);
        self.values.len() - 1
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn name(&self, slot: usize) -> &str {
        &self.names[slot]
    }

    pub fn value(&self, slot: usize) -> &Tensor<T> {
        &self.values[slot]
    }

    pub fn value_mut(&mut self, slot: usize) -> &mut Tensor<T> {
        &mut self.values[slot]
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.values.iter().map(|v| v.len()).collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(self.values.iter())
    }

    pub fn slot_by_name(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }
}

/// Parameter slots bound onto a tape for one forward pass.
pub struct TapeBinding {
    ids: Vec<ValueId>,
}

impl TapeBinding {
    pub fn get(&self, slot: usize) -> ValueId {
        self.ids[slot]
    }
}

#[derive(Debug, Clone)]
pub struct Model<T: Scalar> {
    pub config: ModelConfig,
    store: ParamStore<T>,
    token_embedding: usize,
    output_head: usize,
    enc_bias_table: usize,
    dec_bias_table: usize,
    enc_final_norm: usize,
    dec_final_norm: usize,
    enc_layers: Vec<EncLayerRefs>,
    dec_layers: Vec<DecLayerRefs>,
}

impl<T: Scalar> Model<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.model_dim;
        let ff = config.feedforward_dim;
        let v = config.vocab_size;
        let mut store = ParamStore::new();

        fn xavier<T: Scalar>(
            rng: &mut ChaCha8Rng,
            store: &mut ParamStore<T>,
            name: String,
            rows: usize,
            cols: usize,
        ) -> usize {
            let bound = (6.0 / (rows + cols) as f64).sqrt();
            let data: Vec<T> = (0..rows * cols)
                .map(|_| T::from_f64(rng.gen_range(-bound..bound)))
                .collect();
            store.add(name, Tensor::new(data, vec![rows, cols]).expect("sized"))
        }
        fn ones<T: Scalar>(store: &mut ParamStore<T>, name: String, len: usize) -> usize {
            store.add(name, Tensor::new(vec![T::one(); len], vec![len]).expect("sized"))
        }
        fn attn<T: Scalar>(
            rng: &mut ChaCha8Rng,
            store: &mut ParamStore<T>,
            prefix: &str,
            d: usize,
        ) -> AttnRefs {
            AttnRefs {
                norm: ones(store, format!("{prefix}.norm"), d),
                wq: xavier(rng, store, format!("{prefix}.wq"), d, d),
                wk: xavier(rng, store, format!("{prefix}.wk"), d, d),
                wv: xavier(rng, store, format!("{prefix}.wv"), d, d),
                wo: xavier(rng, store, format!("{prefix}.wo"), d, d),
            }
        }

        let token_embedding = xavier(&mut rng, &mut store, "token_embedding".into(), v, d);
        let output_head = xavier(&mut rng, &mut store, "output_head".into(), d, v);
        let enc_bias_table = store.add(
            "encoder.bias_table".into(),
            Tensor::zeros(vec![config.num_relative_buckets, config.num_heads]),
        );
        let dec_bias_table = store.add(
            "decoder.bias_table".into(),
            Tensor::zeros(vec![config.num_relative_buckets, config.num_heads]),
        );

        let mut enc_layers = Vec::new();
        for l in 0..config.num_layers {
            let a = attn(&mut rng, &mut store, &format!("encoder.{l}.attn"), d);
            let f = FfnRefs {
                norm: ones(&mut store, format!("encoder.{l}.ffn.norm"), d),
                w1: xavier(&mut rng, &mut store, format!("encoder.{l}.ffn.w1"), d, ff),
                w2: xavier(&mut rng, &mut store, format!("encoder.{l}.ffn.w2"), ff, d),
            };
            enc_layers.push(EncLayerRefs { attn: a, ffn: f });
        }
        let mut dec_layers = Vec::new();
        for l in 0..config.num_layers {
            let s = attn(&mut rng, &mut store, &format!("decoder.{l}.self"), d);
            let c = attn(&mut rng, &mut store, &format!("decoder.{l}.cross"), d);
            let f = FfnRefs {
                norm: ones(&mut store, format!("decoder.{l}.ffn.norm"), d),
                w1: xavier(&mut rng, &mut store, format!("decoder.{l}.ffn.w1"), d, ff),
                w2: xavier(&mut rng, &mut store, format!("decoder.{l}.ffn.w2"), ff, d),
            };
            dec_layers.push(DecLayerRefs {
                self_attn: s,
                cross_attn: c,
                ffn: f,
            });
        }
        let enc_final_norm = ones(&mut store, "encoder.final_norm".into(), d);
        let dec_final_norm = ones(&mut store, "decoder.final_norm".into(), d);

        Ok(Model {
            config,
            store,
            token_embedding,
            output_head,
            enc_bias_table,
            dec_bias_table,
            enc_final_norm,
            dec_final_norm,
            enc_layers,
            dec_layers,
        })
    }

    pub fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    pub(crate) fn param_data(&self, slot: usize) -> &[T] {
        self.store.value(slot).data()
    }

    pub(crate) fn dec_layer_refs(&self) -> &[DecLayerRefs] {
        &self.dec_layers
    }

    pub(crate) fn slots(&self) -> ModelSlots {
        ModelSlots {
            token_embedding: self.token_embedding,
            output_head: self.output_head,
            enc_bias_table: self.enc_bias_table,
            dec_bias_table: self.dec_bias_table,
            enc_final_norm: self.enc_final_norm,
            dec_final_norm: self.dec_final_norm,
        }
    }

    /// Register every parameter on `tape`, in slot order.
    pub fn bind(&self, tape: &mut Tape<T>) -> TapeBinding {
        let ids = (0..self.store.len())
            .map(|slot| {
                let t = self.store.value(slot);
                tape.param(t.data(), t.shape(), slot)
            })
            .collect();
        TapeBinding { ids }
    }

    fn check_ids(&self, ids: &[u32]) -> Result<()> {
        if ids.is_empty() {
            return Err(ModelError::EmptyInput);
        }
        for &id in ids {
            if id as usize >= self.config.vocab_size {
                return Err(ModelError::OutOfVocab {
                    id,
                    vocab_size: self.config.vocab_size,
                });
            }
        }
        Ok(())
    }

    /// Pre-norm attention block. `kv_external` carries encoder states for
    /// cross-attention; self-attention keys/values come from the same
    /// normalized input as the queries.
    fn attention_block(
        &self,
        tape: &mut Tape<T>,
        bind: &TapeBinding,
        x: ValueId,
        kv_external: Option<ValueId>,
        refs: &AttnRefs,
        allowed: &[bool],
        bias: Option<ValueId>,
    ) -> Result<ValueId> {
        let heads = self.config.num_heads;
        let head_dim = self.config.head_dim();
        let eps = T::from_f64(RMS_EPS);

        let xn = tape.rmsnorm(x, bind.get(refs.norm), eps)?;
        let kv_source = kv_external.unwrap_or(xn);
        let q = tape.matmul(xn, bind.get(refs.wq))?;
        let k = tape.matmul(kv_source, bind.get(refs.wk))?;
        let v = tape.matmul(kv_source, bind.get(refs.wv))?;
        let qh = tape.split_heads(q, heads)?;
        let kh = tape.split_heads(k, heads)?;
        let vh = tape.split_heads(v, heads)?;
        let kt = tape.transpose_last(kh)?;
        let scores = tape.bmm(qh, kt)?;
        let scores = tape.scale(scores, T::from_f64(1.0 / (head_dim as f64).sqrt()));
        let scores = match bias {
            Some(b) => tape.add(scores, b)?,
            None => scores,
        };
        let probs = tape.masked_softmax(scores, allowed)?;
        let ctx = tape.bmm(probs, vh)?;
        let merged = tape.merge_heads(ctx)?;
        let out = tape.matmul(merged, bind.get(refs.wo))?;
        let out = tape.dropout(out, self.config.dropout_rate());
        tape.add(x, out).map_err(Into::into)
    }

    fn ffn_block(
        &self,
        tape: &mut Tape<T>,
        bind: &TapeBinding,
        x: ValueId,
        refs: &FfnRefs,
    ) -> Result<ValueId> {
        let eps = T::from_f64(RMS_EPS);
        let xn = tape.rmsnorm(x, bind.get(refs.norm), eps)?;
        let h = tape.matmul(xn, bind.get(refs.w1))?;
        let h = tape.relu(h);
        let out = tape.matmul(h, bind.get(refs.w2))?;
        let out = tape.dropout(out, self.config.dropout_rate());
        tape.add(x, out).map_err(Into::into)
    }

    /// Bias value ids for decoder self-attention: bucketed grid Manhattan
    /// distances, one learned value per (bucket, head).
    pub fn decoder_bias_on(
        &self,
        tape: &mut Tape<T>,
        bind: &TapeBinding,
        positions: &[GridPosition],
        delay: usize,
    ) -> Result<ValueId> {
        let n = positions.len();
        let buckets = self.relative_buckets_for(positions, delay);
        tape.gather_bias(bind.get(self.dec_bias_table), &buckets, n, n)
            .map_err(Into::into)
    }

    pub(crate) fn relative_buckets_for(&self, positions: &[GridPosition], delay: usize) -> Vec<u32> {
        let n = positions.len();
        let mut buckets = vec![0u32; n * n];
        for q in 0..n {
            for k in 0..n {
                let dist = manhattan_distance(positions[q], positions[k], delay);
                buckets[q * n + k] = relative_bucket(
                    dist,
                    self.config.num_relative_buckets,
                    self.config.max_relative_distance,
                );
            }
        }
        buckets
    }

    pub(crate) fn encoder_buckets(&self, len: usize) -> Vec<u32> {
        let mut buckets = vec![0u32; len * len];
        for q in 0..len {
            for k in 0..len {
                buckets[q * len + k] = relative_bucket_signed(
                    k as isize - q as isize,
                    self.config.num_relative_buckets,
                    self.config.max_relative_distance,
                );
            }
        }
        buckets
    }

    /// Encoder forward on an existing tape.
    pub fn encode_on(
        &self,
        tape: &mut Tape<T>,
        bind: &TapeBinding,
        input_ids: &[u32],
    ) -> Result<ValueId> {
        self.check_ids(input_ids)?;
        let l = input_ids.len();
        let mut x = tape.embed(bind.get(self.token_embedding), input_ids)?;
        x = tape.dropout(x, self.config.dropout_rate());
        let buckets = self.encoder_buckets(l);
        let bias = tape.gather_bias(bind.get(self.enc_bias_table), &buckets, l, l)?;
        let all = vec![true; l * l];
        for layer in &self.enc_layers {
            x = self.attention_block(tape, bind, x, None, &layer.attn, &all, Some(bias))?;
            x = self.ffn_block(tape, bind, x, &layer.ffn)?;
        }
        let eps = T::from_f64(RMS_EPS);
        tape.rmsnorm(x, bind.get(self.enc_final_norm), eps)
            .map_err(Into::into)
    }

    /// Inference-mode encoder pass.
    pub fn encode(&self, input_ids: &[u32]) -> Result<EncoderOutput<T>> {
        let mut tape = Tape::inference();
        let bind = self.bind(&mut tape);
        let out = self.encode_on(&mut tape, &bind, input_ids)?;
        Ok(EncoderOutput {
            hidden: tape.to_tensor(out),
        })
    }

    /// Decoder forward over a packed token sequence. Row `r` of the result
    /// holds next-token scores for the position following `positions[r]`
    /// within its subsequence. Self-attention obeys `mask` exactly;
    /// cross-attention sees every encoder position.
    pub fn decoder_forward_on(
        &self,
        tape: &mut Tape<T>,
        bind: &TapeBinding,
        enc: ValueId,
        token_ids: &[u32],
        positions: &[GridPosition],
        mask: &MaskMatrix,
        delay: usize,
    ) -> Result<ValueId> {
        self.check_ids(token_ids)?;
        let n = token_ids.len();
        if positions.len() != n || mask.size() != n {
            return Err(ModelError::Contract(format!(
                "packed length {n}, positions {}, mask {} must agree",
                positions.len(),
                mask.size()
            )));
        }
        let enc_len = tape.shape(enc)[0];
        let mut x = tape.embed(bind.get(self.token_embedding), token_ids)?;
        x = tape.dropout(x, self.config.dropout_rate());
        let bias = self.decoder_bias_on(tape, bind, positions, delay)?;
        let cross_all = vec![true; n * enc_len];
        for layer in &self.dec_layers {
            x = self.attention_block(
                tape,
                bind,
                x,
                None,
                &layer.self_attn,
                mask.as_slice(),
                Some(bias),
            )?;
            x = self.attention_block(
                tape,
                bind,
                x,
                Some(enc),
                &layer.cross_attn,
                &cross_all,
                None,
            )?;
            x = self.ffn_block(tape, bind, x, &layer.ffn)?;
        }
        let eps = T::from_f64(RMS_EPS);
        let xn = tape.rmsnorm(x, bind.get(self.dec_final_norm), eps)?;
        tape.matmul(xn, bind.get(self.output_head))
            .map_err(Into::into)
    }

    /// Inference-mode full decoder pass over a packed prefix.
    pub fn decoder_forward(
        &self,
        enc: &EncoderOutput<T>,
        token_ids: &[u32],
        positions: &[GridPosition],
        mask: &MaskMatrix,
        delay: usize,
    ) -> Result<Tensor<T>> {
        let mut tape = Tape::inference();
        let bind = self.bind(&mut tape);
        let enc_id = tape.leaf(enc.hidden.clone());
        let out = self.decoder_forward_on(&mut tape, &bind, enc_id, token_ids, positions, mask, delay)?;
        Ok(tape.to_tensor(out))
    }

    /// Lossy precision cast; used to move a trained model into
    /// verification mode.
    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            store: ParamStore {
                names: self.store.names.clone(),
                values: self.store.values.iter().map(|t| t.cast()).collect(),
            },
            token_embedding: self.token_embedding,
            output_head: self.output_head,
            enc_bias_table: self.enc_bias_table,
            dec_bias_table: self.dec_bias_table,
            enc_final_norm: self.enc_final_norm,
            dec_final_norm: self.dec_final_norm,
            enc_layers: self.enc_layers.clone(),
            dec_layers: self.dec_layers.clone(),
        }
    }
}

pub(crate) struct ModelSlots {
    pub token_embedding: usize,
    pub output_head: usize,
    #[allow(dead_code)]
    pub enc_bias_table: usize,
    pub dec_bias_table: usize,
    #[allow(dead_code)]
    pub enc_final_norm: usize,
    pub dec_final_norm: usize,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::build_self_attention_mask;

    fn tiny_model() -> Model<f32> {
        let mut cfg = ModelConfig::tiny(16);
        cfg.num_layers = 1;
        cfg.model_dim = 32;
        cfg.feedforward_dim = 48;
        cfg.dropout_rate = 0.0;
        Model::new(cfg, 11).unwrap()
    }

    #[test]
    fn encode_shape_and_determinism() {
        let m = tiny_model();
        let out = m.encode(&[5]).unwrap();
        assert_eq!(out.hidden.shape(), &[1, 32]);
        assert!(out.hidden.all_finite());

        let a = m.encode(&[5, 6, 7]).unwrap();
        let b = m.encode(&[5, 6, 7]).unwrap();
        assert_eq!(a.hidden.data(), b.hidden.data());
    }

    #[test]
    fn encode_is_position_sensitive() {
        let m = tiny_model();
        let a = m.encode(&[5, 6]).unwrap();
        let b = m.encode(&[6, 5]).unwrap();
        assert_ne!(a.hidden.data(), b.hidden.data());
    }

    #[test]
    fn encode_rejects_out_of_vocab() {
        let m = tiny_model();
        assert!(matches!(
            m.encode(&[99]),
            Err(ModelError::OutOfVocab { id: 99, .. })
        ));
        assert!(matches!(m.encode(&[]), Err(ModelError::EmptyInput)));
    }

    #[test]
    fn bucket_zero_for_self_and_monotone_saturating() {
        let (buckets, max_dist) = (16, 48);
        assert_eq!(relative_bucket(0, buckets, max_dist), 0);
        let mut last = 0;
        for d in 0..=2 * max_dist {
            let b = relative_bucket(d, buckets, max_dist);
            assert!(b >= last, "bucket must be non-decreasing");
            assert!((b as usize) < buckets);
            last = b;
        }
        for d in max_dist..=2 * max_dist {
            assert_eq!(relative_bucket(d, buckets, max_dist) as usize, buckets - 1);
        }
    }

    #[test]
    fn equal_distances_share_bias_regardless_of_direction() {
        let m = tiny_model();
        let positions = vec![
            GridPosition::new(1, 0),
            GridPosition::new(1, 1),
            GridPosition::new(2, 0),
        ];
        let buckets = m.relative_buckets_for(&positions, 1);
        let n = positions.len();
        for q in 0..n {
            for k in 0..n {
                assert_eq!(buckets[q * n + k], buckets[k * n + q]);
            }
        }
    }

    #[test]
    fn decoder_rows_match_packed_length_and_are_finite() {
        let m = tiny_model();
        let enc = m.encode(&[5, 6, 7]).unwrap();
        let positions: Vec<GridPosition> = (0..4).map(|j| GridPosition::new(1, j)).collect();
        let mask = build_self_attention_mask(&positions, 1).unwrap();
        let logits = m
            .decoder_forward(&enc, &[1, 8, 9, 10], &positions, &mask, 1)
            .unwrap();
        assert_eq!(logits.shape(), &[4, 16]);
        assert!(logits.all_finite());
    }

    #[test]
    fn decoder_rejects_mismatched_mask() {
        let m = tiny_model();
        let enc = m.encode(&[5]).unwrap();
        let positions: Vec<GridPosition> = (0..3).map(|j| GridPosition::new(1, j)).collect();
        let mask = build_self_attention_mask(&positions[..2], 1).unwrap();
        assert!(matches!(
            m.decoder_forward(&enc, &[1, 8, 9], &positions, &mask, 1),
            Err(ModelError::Contract(_))
        ));
    }

    #[test]
    fn masked_key_perturbation_leaves_query_rows_unchanged() {
        // Single layer: flipping the token at a masked key position must
        // not change logits of queries that cannot attend it.
        let m = tiny_model();
        let enc = m.encode(&[5, 6]).unwrap();
        let positions = vec![
            GridPosition::new(1, 0),
            GridPosition::new(1, 1),
            GridPosition::new(1, 2),
        ];
        let mask = build_self_attention_mask(&positions, 1).unwrap();
        let a = m
            .decoder_forward(&enc, &[1, 8, 9], &positions, &mask, 1)
            .unwrap();
        let b = m
            .decoder_forward(&enc, &[1, 8, 12], &positions, &mask, 1)
            .unwrap();
        // Queries 0 and 1 cannot see position 2.
        for r in 0..2 {
            for c in 0..16 {
                let (x, y) = (a.data()[r * 16 + c], b.data()[r * 16 + c]);
                assert!((x - y).abs() <= 1e-6, "row {r} changed: {x} vs {y}");
            }
        }
        assert_ne!(a.row(2), b.row(2));
    }

    #[test]
    fn dropping_a_key_column_only_affects_attending_queries() {
        // Transitive closure of the grid mask means non-attending queries
        // are unaffected even through multiple layers.
        let mut cfg = ModelConfig::tiny(16);
        cfg.dropout_rate = 0.0;
        let m: Model<f32> = Model::new(cfg, 3).unwrap();
        let enc = m.encode(&[5, 6, 7]).unwrap();
        let positions = vec![
            GridPosition::new(1, 0),
            GridPosition::new(1, 1),
            GridPosition::new(1, 2),
            GridPosition::new(2, 0),
            GridPosition::new(2, 1),
        ];
        let mask = build_self_attention_mask(&positions, 1).unwrap();
        let ids = [1, 8, 9, 1, 10];
        let full = m.decoder_forward(&enc, &ids, &positions, &mask, 1).unwrap();

        // Remove key column for position 4 (second subsequence content);
        // queries 0..=3 never attend it.
        let mut ablated = mask.clone();
        for q in 0..positions.len() {
            if q != 4 {
                ablated.set(q, 4, false);
            }
        }
        let cut = m
            .decoder_forward(&enc, &ids, &positions, &ablated, 1)
            .unwrap();
        for q in 0..4 {
            for c in 0..16 {
                let (x, y) = (full.data()[q * 16 + c], cut.data()[q * 16 + c]);
                assert!((x - y).abs() <= 1e-6);
            }
        }
    }
}
