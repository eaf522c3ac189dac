//! Tape-based reverse-mode automatic differentiation.
//!
//! A forward pass records every primitive onto the tape together with its
//! output buffer; `backward` replays the adjoint rules in reverse order and
//! hands back gradients for all registered parameter slots.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::kernels;
use super::{Result, Tensor, TensorError};
use crate::scalar::Scalar;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ValueId(usize);

#[derive(Debug)]
enum Op<T: Scalar> {
    Leaf {
        param_slot: Option<usize>,
    },
    Matmul {
        a: ValueId,
        b: ValueId,
        m: usize,
        k: usize,
        n: usize,
    },
    /// Batched matmul over a shared leading dimension.
    Bmm {
        a: ValueId,
        b: ValueId,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    TransposeLast {
        a: ValueId,
        batch: usize,
        rows: usize,
        cols: usize,
    },
    /// `[seq, heads*head_dim] -> [heads, seq, head_dim]`
    SplitHeads {
        a: ValueId,
        seq: usize,
        heads: usize,
        head_dim: usize,
    },
    /// `[heads, seq, head_dim] -> [seq, heads*head_dim]`
    MergeHeads {
        a: ValueId,
        seq: usize,
        heads: usize,
        head_dim: usize,
    },
    Add {
        a: ValueId,
        b: ValueId,
    },
    Mul {
        a: ValueId,
        b: ValueId,
    },
    Scale {
        a: ValueId,
        factor: T,
    },
    Relu {
        a: ValueId,
    },
    RmsNorm {
        x: ValueId,
        weight: ValueId,
        rows: usize,
        dim: usize,
        inv_rms: Vec<T>,
    },
    Embed {
        table: ValueId,
        ids: Vec<u32>,
        dim: usize,
    },
    /// `table[buckets, heads]` gathered into `[heads, rows, cols]`.
    GatherBias {
        table: ValueId,
        bucket_ids: Vec<u32>,
        heads: usize,
        rows: usize,
        cols: usize,
    },
    /// Row softmax; masked probabilities are exactly zero, so the adjoint
    /// needs no record of the mask itself.
    MaskedSoftmax {
        scores: ValueId,
        batch: usize,
        rows: usize,
        cols: usize,
    },
    Dropout {
        a: ValueId,
        kept: Vec<bool>,
        scale: T,
    },
    Sum {
        a: ValueId,
    },
    /// Mean negative log-likelihood over active rows of a logits matrix.
    MeanNll {
        logits: ValueId,
        targets: Vec<u32>,
        active: Vec<bool>,
        rows: usize,
        vocab: usize,
        probs: Vec<T>,
    },
}

#[derive(Debug)]
struct Node<T: Scalar> {
    op: Op<T>,
    shape: Vec<usize>,
    data: Vec<T>,
    needs_grad: bool,
}

/// Gradients keyed by parameter slot, in slot registration order.
pub type SlotGradients<T> = Vec<(usize, Vec<T>)>;

/// The operation record for one forward pass.
pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
    grad_enabled: bool,
    dropout_rng: Option<ChaCha8Rng>,
    consumed: bool,
}

impl<T: Scalar> Tape<T> {
    /// Gradient-recording tape with dropout disabled.
    pub fn recording() -> Self {
        Tape {
            nodes: Vec::new(),
            grad_enabled: true,
            dropout_rng: None,
            consumed: false,
        }
    }

    /// Gradient-recording tape with seeded dropout.
    pub fn training(dropout_seed: u64) -> Self {
        Tape {
            nodes: Vec::new(),
            grad_enabled: true,
            dropout_rng: Some(ChaCha8Rng::seed_from_u64(dropout_seed)),
            consumed: false,
        }
    }

    /// Forward-only tape: values are stored, gradients are not.
    pub fn inference() -> Self {
        Tape {
            nodes: Vec::new(),
            grad_enabled: false,
            dropout_rng: None,
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, id: ValueId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn data(&self, id: ValueId) -> &[T] {
        &self.nodes[id.0].data
    }

    pub fn to_tensor(&self, id: ValueId) -> Tensor<T> {
        Tensor::new(self.nodes[id.0].data.clone(), self.nodes[id.0].shape.clone())
            .expect("tape nodes hold consistent shapes")
    }

    fn push(&mut self, op: Op<T>, shape: Vec<usize>, data: Vec<T>, needs_grad: bool) -> ValueId {
        let id = ValueId(self.nodes.len());
        self.nodes.push(Node {
            op,
            shape,
            data,
            needs_grad: needs_grad && self.grad_enabled,
        });
        id
    }

    fn needs(&self, id: ValueId) -> bool {
        self.nodes[id.0].needs_grad
    }

    pub fn leaf(&mut self, tensor: Tensor<T>) -> ValueId {
        let shape = tensor.shape().to_vec();
        let data = tensor.data().to_vec();
        self.push(Op::Leaf { param_slot: None }, shape, data, false)
    }

    pub fn leaf_from(&mut self, data: Vec<T>, shape: Vec<usize>) -> Result<ValueId> {
        let t = Tensor::new(data, shape)?;
        Ok(self.leaf(t))
    }

    /// Register a trainable parameter; `slot` keys its gradient in the
    /// result of [`Tape::backward`].
    pub fn param(&mut self, data: &[T], shape: &[usize], slot: usize) -> ValueId {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.push(
            Op::Leaf {
                param_slot: Some(slot),
            },
            shape.to_vec(),
            data.to_vec(),
            true,
        )
    }

    pub fn matmul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: sa,
                rhs: sb,
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = kernels::matmul(&self.nodes[a.0].data, &self.nodes[b.0].data, m, k, n);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Matmul { a, b, m, k, n }, vec![m, n], out, needs))
    }

    pub fn bmm(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(TensorError::ShapeMismatch {
                op: "bmm",
                lhs: sa,
                rhs: sb,
            });
        }
        let (batch, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![T::zero(); batch * m * n];
        for bi in 0..batch {
            kernels::matmul_acc(
                &self.nodes[a.0].data[bi * m * k..(bi + 1) * m * k],
                &self.nodes[b.0].data[bi * k * n..(bi + 1) * k * n],
                &mut out[bi * m * n..(bi + 1) * m * n],
                m,
                k,
                n,
            );
        }
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(
            Op::Bmm {
                a,
                b,
                batch,
                m,
                k,
                n,
            },
            vec![batch, m, n],
            out,
            needs,
        ))
    }

    pub fn transpose_last(&mut self, a: ValueId) -> Result<ValueId> {
        let sa = self.shape(a).to_vec();
        let (batch, rows, cols, mut shape) = match sa.len() {
            2 => (1, sa[0], sa[1], vec![sa[1], sa[0]]),
            3 => (sa[0], sa[1], sa[2], vec![sa[0], sa[2], sa[1]]),
            _ => {
                return Err(TensorError::ShapeMismatch {
                    op: "transpose_last",
                    lhs: sa,
                    rhs: vec![],
                })
            }
        };
        shape.shrink_to_fit();
        let src = &self.nodes[a.0].data;
        let mut out = vec![T::zero(); src.len()];
        for bi in 0..batch {
            let base = bi * rows * cols;
            for r in 0..rows {
                for c in 0..cols {
                    out[base + c * rows + r] = src[base + r * cols + c];
                }
            }
        }
        let needs = self.needs(a);
        Ok(self.push(
            Op::TransposeLast {
                a,
                batch,
                rows,
                cols,
            },
            shape,
            out,
            needs,
        ))
    }

    pub fn split_heads(&mut self, a: ValueId, heads: usize) -> Result<ValueId> {
        let sa = self.shape(a).to_vec();
        if sa.len() != 2 || sa[1] % heads != 0 {
            return Err(TensorError::ShapeMismatch {
                op: "split_heads",
                lhs: sa,
                rhs: vec![heads],
            });
        }
        let (seq, dim) = (sa[0], sa[1]);
        let head_dim = dim / heads;
        let src = &self.nodes[a.0].data;
        let mut out = vec![T::zero(); src.len()];
        for h in 0..heads {
            for s in 0..seq {
                let dst = (h * seq + s) * head_dim;
                let from = s * dim + h * head_dim;
                out[dst..dst + head_dim].copy_from_slice(&src[from..from + head_dim]);
            }
        }
        let needs = self.needs(a);
        Ok(self.push(
            Op::SplitHeads {
                a,
                seq,
                heads,
                head_dim,
            },
            vec![heads, seq, head_dim],
            out,
            needs,
        ))
    }

    pub fn merge_heads(&mut self, a: ValueId) -> Result<ValueId> {
        let sa = self.shape(a).to_vec();
        if sa.len() != 3 {
            return Err(TensorError::ShapeMismatch {
                op: "merge_heads",
                lhs: sa,
                rhs: vec![],
            });
        }
        let (heads, seq, head_dim) = (sa[0], sa[1], sa[2]);
        let src = &self.nodes[a.0].data;
        let mut out = vec![T::zero(); src.len()];
        for h in 0..heads {
            for s in 0..seq {
                let from = (h * seq + s) * head_dim;
                let dst = s * heads * head_dim + h * head_dim;
                out[dst..dst + head_dim].copy_from_slice(&src[from..from + head_dim]);
            }
        }
        let needs = self.needs(a);
        Ok(self.push(
            Op::MergeHeads {
                a,
                seq,
                heads,
                head_dim,
            },
            vec![seq, heads * head_dim],
            out,
            needs,
        ))
    }

    fn elementwise_pair(&self, op: &'static str, a: ValueId, b: ValueId) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        self.elementwise_pair("add", a, b)?;
        let out: Vec<T> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(&x, &y)| x + y)
            .collect();
        let shape = self.shape(a).to_vec();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Add { a, b }, shape, out, needs))
    }

    pub fn mul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        self.elementwise_pair("mul", a, b)?;
        let out: Vec<T> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(&x, &y)| x * y)
            .collect();
        let shape = self.shape(a).to_vec();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Mul { a, b }, shape, out, needs))
    }

    pub fn scale(&mut self, a: ValueId, factor: T) -> ValueId {
        let out: Vec<T> = self.nodes[a.0].data.iter().map(|&x| x * factor).collect();
        let shape = self.shape(a).to_vec();
        let needs = self.needs(a);
        self.push(Op::Scale { a, factor }, shape, out, needs)
    }

    pub fn relu(&mut self, a: ValueId) -> ValueId {
        let out: Vec<T> = self.nodes[a.0]
            .data
            .iter()
            .map(|&x| if x > T::zero() { x } else { T::zero() })
            .collect();
        let shape = self.shape(a).to_vec();
        let needs = self.needs(a);
        self.push(Op::Relu { a }, shape, out, needs)
    }

    pub fn rmsnorm(&mut self, x: ValueId, weight: ValueId, eps: T) -> Result<ValueId> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(weight).to_vec();
        if sx.len() != 2 || sw != vec![sx[1]] {
            return Err(TensorError::ShapeMismatch {
                op: "rmsnorm",
                lhs: sx,
                rhs: sw,
            });
        }
        let (rows, dim) = (sx[0], sx[1]);
        let mut out = vec![T::zero(); rows * dim];
        let mut inv_rms = vec![T::zero(); rows];
        for r in 0..rows {
            inv_rms[r] = kernels::rmsnorm_row(
                &self.nodes[x.0].data[r * dim..(r + 1) * dim],
                &self.nodes[weight.0].data,
                eps,
                &mut out[r * dim..(r + 1) * dim],
            );
        }
        let needs = self.needs(x) || self.needs(weight);
        Ok(self.push(
            Op::RmsNorm {
                x,
                weight,
                rows,
                dim,
                inv_rms,
            },
            vec![rows, dim],
            out,
            needs,
        ))
    }

    pub fn embed(&mut self, table: ValueId, ids: &[u32]) -> Result<ValueId> {
        let st = self.shape(table).to_vec();
        if st.len() != 2 {
            return Err(TensorError::ShapeMismatch {
                op: "embed",
                lhs: st,
                rhs: vec![],
            });
        }
        let (vocab, dim) = (st[0], st[1]);
        let mut out = vec![T::zero(); ids.len() * dim];
        for (r, &id) in ids.iter().enumerate() {
            let id = id as usize;
            if id >= vocab {
                return Err(TensorError::IndexOutOfBounds {
                    index: id,
                    size: vocab,
                });
            }
            out[r * dim..(r + 1) * dim]
                .copy_from_slice(&self.nodes[table.0].data[id * dim..(id + 1) * dim]);
        }
        let shape = vec![ids.len(), dim];
        let needs = self.needs(table);
        Ok(self.push(
            Op::Embed {
                table,
                ids: ids.to_vec(),
                dim,
            },
            shape,
            out,
            needs,
        ))
    }

    pub fn gather_bias(
        &mut self,
        table: ValueId,
        bucket_ids: &[u32],
        rows: usize,
        cols: usize,
    ) -> Result<ValueId> {
        let st = self.shape(table).to_vec();
        if st.len() != 2 || bucket_ids.len() != rows * cols {
            return Err(TensorError::ShapeMismatch {
                op: "gather_bias",
                lhs: st,
                rhs: vec![rows, cols],
            });
        }
        let (buckets, heads) = (st[0], st[1]);
        let mut out = vec![T::zero(); heads * rows * cols];
        for (qk, &bucket) in bucket_ids.iter().enumerate() {
            let bucket = bucket as usize;
            if bucket >= buckets {
                return Err(TensorError::IndexOutOfBounds {
                    index: bucket,
                    size: buckets,
                });
            }
            for h in 0..heads {
                out[h * rows * cols + qk] = self.nodes[table.0].data[bucket * heads + h];
            }
        }
        let needs = self.needs(table);
        Ok(self.push(
            Op::GatherBias {
                table,
                bucket_ids: bucket_ids.to_vec(),
                heads,
                rows,
                cols,
            },
            vec![heads, rows, cols],
            out,
            needs,
        ))
    }

    /// Row-wise softmax over the last axis; `allowed` has `rows*cols`
    /// entries and is shared across any leading batch axis. Forbidden
    /// entries are exactly zero in the output.
    pub fn masked_softmax(&mut self, scores: ValueId, allowed: &[bool]) -> Result<ValueId> {
        let ss = self.shape(scores).to_vec();
        let (batch, rows, cols) = match ss.len() {
            2 => (1, ss[0], ss[1]),
            3 => (ss[0], ss[1], ss[2]),
            _ => {
                return Err(TensorError::ShapeMismatch {
                    op: "masked_softmax",
                    lhs: ss,
                    rhs: vec![allowed.len()],
                })
            }
        };
        if allowed.len() != rows * cols {
            return Err(TensorError::ShapeMismatch {
                op: "masked_softmax",
                lhs: ss,
                rhs: vec![allowed.len()],
            });
        }
        let mut out = vec![T::zero(); batch * rows * cols];
        for bi in 0..batch {
            for r in 0..rows {
                let base = bi * rows * cols + r * cols;
                let ok = kernels::masked_softmax_row(
                    &self.nodes[scores.0].data[base..base + cols],
                    &allowed[r * cols..(r + 1) * cols],
                    &mut out[base..base + cols],
                );
                if !ok {
                    return Err(TensorError::DegenerateRow { row: r });
                }
            }
        }
        let needs = self.needs(scores);
        Ok(self.push(
            Op::MaskedSoftmax {
                scores,
                batch,
                rows,
                cols,
            },
            ss,
            out,
            needs,
        ))
    }

    /// Inverted dropout. A no-op (identity pass-through) when the tape has
    /// no dropout source or `rate` is zero.
    pub fn dropout(&mut self, a: ValueId, rate: f64) -> ValueId {
        let rng = match (&mut self.dropout_rng, rate > 0.0) {
            (Some(rng), true) => rng,
            _ => return a,
        };
        let keep = 1.0 - rate;
        let kept: Vec<bool> = (0..self.nodes[a.0].data.len())
            .map(|_| rng.gen_range(0.0..1.0) < keep)
            .collect();
        let scale = T::from_f64(1.0 / keep);
        let out: Vec<T> = self.nodes[a.0]
            .data
            .iter()
            .zip(&kept)
            .map(|(&x, &k)| if k { x * scale } else { T::zero() })
            .collect();
        let shape = self.shape(a).to_vec();
        let needs = self.needs(a);
        self.push(Op::Dropout { a, kept, scale }, shape, out, needs)
    }

    pub fn sum(&mut self, a: ValueId) -> ValueId {
        let mut acc = T::zero();
        for &x in &self.nodes[a.0].data {
            acc = acc + x;
        }
        let needs = self.needs(a);
        self.push(Op::Sum { a }, vec![], vec![acc], needs)
    }

    /// Mean negative log-likelihood of `targets` over rows where `active`
    /// is true. Inactive rows contribute nothing.
    pub fn mean_nll(
        &mut self,
        logits: ValueId,
        targets: &[u32],
        active: &[bool],
    ) -> Result<ValueId> {
        let sl = self.shape(logits).to_vec();
        if sl.len() != 2 || targets.len() != sl[0] || active.len() != sl[0] {
            return Err(TensorError::ShapeMismatch {
                op: "mean_nll",
                lhs: sl,
                rhs: vec![targets.len()],
            });
        }
        let (rows, vocab) = (sl[0], sl[1]);
        let count = active.iter().filter(|&&a| a).count();
        if count == 0 {
            return Err(TensorError::Contract(
                "loss requires at least one active position".into(),
            ));
        }
        let mut probs = vec![T::zero(); rows * vocab];
        let mut total = T::zero();
        let mut logp = vec![T::zero(); vocab];
        for r in 0..rows {
            if !active[r] {
                continue;
            }
            let row = &self.nodes[logits.0].data[r * vocab..(r + 1) * vocab];
            kernels::log_softmax_row(row, &mut logp);
            let target = targets[r] as usize;
            if target >= vocab {
                return Err(TensorError::IndexOutOfBounds {
                    index: target,
                    size: vocab,
                });
            }
            total = total - logp[target];
            for (p, &lp) in probs[r * vocab..(r + 1) * vocab].iter_mut().zip(&logp) {
                *p = lp.exp();
            }
        }
        let loss = total / T::from_f64(count as f64);
        let needs = self.needs(logits);
        Ok(self.push(
            Op::MeanNll {
                logits,
                targets: targets.to_vec(),
                active: active.to_vec(),
                rows,
                vocab,
                probs,
            },
            vec![],
            vec![loss],
            needs,
        ))
    }

    /// Reverse pass from a scalar `loss`. Returns gradients for every
    /// parameter slot registered via [`Tape::param`]. A second call on the
    /// same tape is an error.
    pub fn backward(&mut self, loss: ValueId) -> Result<SlotGradients<T>> {
        if self.nodes.is_empty() {
            return Err(TensorError::EmptyTape);
        }
        if self.consumed {
            return Err(TensorError::TapeConsumed);
        }
        if !self.grad_enabled {
            return Err(TensorError::Contract(
                "tape was built without gradient recording".into(),
            ));
        }
        if !self.shape(loss).is_empty() {
            return Err(TensorError::NonScalarLoss {
                shape: self.shape(loss).to_vec(),
            });
        }
        self.consumed = true;

        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![T::one()]);

        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].needs_grad {
                continue;
            }
            let Some(out_grad) = grads[idx].take() else {
                continue;
            };
            self.apply_adjoint(idx, &out_grad, &mut grads);
            // Leaves keep their gradient for collection below.
            if matches!(self.nodes[idx].op, Op::Leaf { .. }) {
                grads[idx] = Some(out_grad);
            }
        }

        let mut result = Vec::new();
        for (idx, node) in self.nodes.iter().enumerate() {
            if let Op::Leaf {
                param_slot: Some(slot),
            } = node.op
            {
                let grad = grads[idx]
                    .take()
                    .unwrap_or_else(|| vec![T::zero(); node.data.len()]);
                result.push((slot, grad));
            }
        }
        Ok(result)
    }

    fn accumulate(grads: &mut [Option<Vec<T>>], target: usize, len: usize) -> &mut Vec<T> {
        grads[target].get_or_insert_with(|| vec![T::zero(); len])
    }

    fn apply_adjoint(&self, idx: usize, g: &[T], grads: &mut Vec<Option<Vec<T>>>) {
        match &self.nodes[idx].op {
            Op::Leaf { .. } => {}
            Op::Matmul { a, b, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                if self.needs(*a) {
                    let b_data = &self.nodes[b.0].data;
                    let da = Self::accumulate(grads, a.0, m * k);
                    kernels::matmul_bt_acc(g, b_data, da, m, n, k);
                }
                if self.needs(*b) {
                    let a_data = &self.nodes[a.0].data;
                    let db = Self::accumulate(grads, b.0, k * n);
                    kernels::matmul_at_acc(a_data, g, db, m, k, n);
                }
            }
            Op::Bmm {
                a,
                b,
                batch,
                m,
                k,
                n,
            } => {
                let (batch, m, k, n) = (*batch, *m, *k, *n);
                if self.needs(*a) {
                    let b_data = &self.nodes[b.0].data;
                    let da = Self::accumulate(grads, a.0, batch * m * k);
                    for bi in 0..batch {
                        kernels::matmul_bt_acc(
                            &g[bi * m * n..(bi + 1) * m * n],
                            &b_data[bi * k * n..(bi + 1) * k * n],
                            &mut da[bi * m * k..(bi + 1) * m * k],
                            m,
                            n,
                            k,
                        );
                    }
                }
                if self.needs(*b) {
                    let a_data = &self.nodes[a.0].data;
                    let db = Self::accumulate(grads, b.0, batch * k * n);
                    for bi in 0..batch {
                        kernels::matmul_at_acc(
                            &a_data[bi * m * k..(bi + 1) * m * k],
                            &g[bi * m * n..(bi + 1) * m * n],
                            &mut db[bi * k * n..(bi + 1) * k * n],
                            m,
                            k,
                            n,
                        );
                    }
                }
            }
            Op::TransposeLast {
                a,
                batch,
                rows,
                cols,
            } => {
                if self.needs(*a) {
                    let (batch, rows, cols) = (*batch, *rows, *cols);
                    let da = Self::accumulate(grads, a.0, batch * rows * cols);
                    for bi in 0..batch {
                        let base = bi * rows * cols;
                        for r in 0..rows {
                            for c in 0..cols {
                                da[base + r * cols + c] =
                                    da[base + r * cols + c] + g[base + c * rows + r];
                            }
                        }
                    }
                }
            }
            Op::SplitHeads {
                a,
                seq,
                heads,
                head_dim,
            } => {
                if self.needs(*a) {
                    let (seq, heads, head_dim) = (*seq, *heads, *head_dim);
                    let dim = heads * head_dim;
                    let da = Self::accumulate(grads, a.0, seq * dim);
                    for h in 0..heads {
                        for s in 0..seq {
                            let src = (h * seq + s) * head_dim;
                            let dst = s * dim + h * head_dim;
                            kernels::axpy(
                                T::one(),
                                &g[src..src + head_dim],
                                &mut da[dst..dst + head_dim],
                            );
                        }
                    }
                }
            }
            Op::MergeHeads {
                a,
                seq,
                heads,
                head_dim,
            } => {
                if self.needs(*a) {
                    let (seq, heads, head_dim) = (*seq, *heads, *head_dim);
                    let dim = heads * head_dim;
                    let da = Self::accumulate(grads, a.0, seq * dim);
                    for h in 0..heads {
                        for s in 0..seq {
                            let dst = (h * seq + s) * head_dim;
                            let src = s * dim + h * head_dim;
                            kernels::axpy(
                                T::one(),
                                &g[src..src + head_dim],
                                &mut da[dst..dst + head_dim],
                            );
                        }
                    }
                }
            }
            Op::Add { a, b } => {
                for input in [a, b] {
                    if self.needs(*input) {
                        let d = Self::accumulate(grads, input.0, g.len());
                        kernels::axpy(T::one(), g, d);
                    }
                }
            }
            Op::Mul { a, b } => {
                if self.needs(*a) {
                    let b_data = &self.nodes[b.0].data;
                    let da = Self::accumulate(grads, a.0, g.len());
                    for ((d, &gv), &bv) in da.iter_mut().zip(g).zip(b_data) {
                        *d = *d + gv * bv;
                    }
                }
                if self.needs(*b) {
                    let a_data = &self.nodes[a.0].data;
                    let db = Self::accumulate(grads, b.0, g.len());
                    for ((d, &gv), &av) in db.iter_mut().zip(g).zip(a_data) {
                        *d = *d + gv * av;
                    }
                }
            }
            Op::Scale { a, factor } => {
                if self.needs(*a) {
                    let da = Self::accumulate(grads, a.0, g.len());
                    kernels::axpy(*factor, g, da);
                }
            }
            Op::Relu { a } => {
                if self.needs(*a) {
                    let x = &self.nodes[a.0].data;
                    let da = Self::accumulate(grads, a.0, g.len());
                    for ((d, &gv), &xv) in da.iter_mut().zip(g).zip(x) {
                        if xv > T::zero() {
                            *d = *d + gv;
                        }
                    }
                }
            }
            Op::RmsNorm {
                x,
                weight,
                rows,
                dim,
                inv_rms,
            } => {
                let (rows, dim) = (*rows, *dim);
                let x_data = &self.nodes[x.0].data;
                let w_data = &self.nodes[weight.0].data;
                if self.needs(*x) {
                    let n = T::from_f64(dim as f64);
                    let dx = Self::accumulate(grads, x.0, rows * dim);
                    for r in 0..rows {
                        let ir = inv_rms[r];
                        let xr = &x_data[r * dim..(r + 1) * dim];
                        let gr = &g[r * dim..(r + 1) * dim];
                        // s = sum_i g_i w_i x_i * inv_rms
                        let mut s = T::zero();
                        for ((&gv, &wv), &xv) in gr.iter().zip(w_data).zip(xr) {
                            s = s + gv * wv * xv * ir;
                        }
                        let s_over_n = s / n;
                        let drow = &mut dx[r * dim..(r + 1) * dim];
                        for ((d, (&gv, &wv)), &xv) in
                            drow.iter_mut().zip(gr.iter().zip(w_data)).zip(xr)
                        {
                            *d = *d + ir * (gv * wv - xv * ir * s_over_n);
                        }
                    }
                }
                if self.needs(*weight) {
                    let dw = Self::accumulate(grads, weight.0, dim);
                    for r in 0..rows {
                        let ir = inv_rms[r];
                        let xr = &x_data[r * dim..(r + 1) * dim];
                        let gr = &g[r * dim..(r + 1) * dim];
                        for ((d, &gv), &xv) in dw.iter_mut().zip(gr).zip(xr) {
                            *d = *d + gv * xv * ir;
                        }
                    }
                }
            }
            Op::Embed { table, ids, dim } => {
                if self.needs(*table) {
                    let dim = *dim;
                    let len = self.nodes[table.0].data.len();
                    let dt = Self::accumulate(grads, table.0, len);
                    for (r, &id) in ids.iter().enumerate() {
                        let id = id as usize;
                        kernels::axpy(
                            T::one(),
                            &g[r * dim..(r + 1) * dim],
                            &mut dt[id * dim..(id + 1) * dim],
                        );
                    }
                }
            }
            Op::GatherBias {
                table,
                bucket_ids,
                heads,
                rows,
                cols,
            } => {
                if self.needs(*table) {
                    let (heads, rows, cols) = (*heads, *rows, *cols);
                    let len = self.nodes[table.0].data.len();
                    let dt = Self::accumulate(grads, table.0, len);
                    for (qk, &bucket) in bucket_ids.iter().enumerate() {
                        let bucket = bucket as usize;
                        for h in 0..heads {
                            dt[bucket * heads + h] =
                                dt[bucket * heads + h] + g[h * rows * cols + qk];
                        }
                    }
                }
            }
            Op::MaskedSoftmax {
                scores,
                batch,
                rows,
                cols,
            } => {
                if self.needs(*scores) {
                    let (batch, rows, cols) = (*batch, *rows, *cols);
                    let probs = &self.nodes[idx].data;
                    let ds = Self::accumulate(grads, scores.0, batch * rows * cols);
                    for bi in 0..batch {
                        for r in 0..rows {
                            let base = bi * rows * cols + r * cols;
                            let p = &probs[base..base + cols];
                            let gr = &g[base..base + cols];
                            let inner = kernels::dot(gr, p);
                            let drow = &mut ds[base..base + cols];
                            for ((d, &pv), &gv) in drow.iter_mut().zip(p).zip(gr) {
                                *d = *d + pv * (gv - inner);
                            }
                        }
                    }
                }
            }
            Op::Dropout { a, kept, scale } => {
                if self.needs(*a) {
                    let da = Self::accumulate(grads, a.0, g.len());
                    for ((d, &gv), &k) in da.iter_mut().zip(g).zip(kept) {
                        if k {
                            *d = *d + gv * *scale;
                        }
                    }
                }
            }
            Op::Sum { a } => {
                if self.needs(*a) {
                    let len = self.nodes[a.0].data.len();
                    let da = Self::accumulate(grads, a.0, len);
                    for d in da.iter_mut() {
                        *d = *d + g[0];
                    }
                }
            }
            Op::MeanNll {
                logits,
                targets,
                active,
                rows,
                vocab,
                probs,
            } => {
                if self.needs(*logits) {
                    let (rows, vocab) = (*rows, *vocab);
                    let count = active.iter().filter(|&&a| a).count();
                    let unit = g[0] / T::from_f64(count as f64);
                    let dl = Self::accumulate(grads, logits.0, rows * vocab);
                    for r in 0..rows {
                        if !active[r] {
                            continue;
                        }
                        let p = &probs[r * vocab..(r + 1) * vocab];
                        let drow = &mut dl[r * vocab..(r + 1) * vocab];
                        for (d, &pv) in drow.iter_mut().zip(p) {
                            *d = *d + pv * unit;
                        }
                        let t = targets[r] as usize;
                        drow[t] = drow[t] - unit;
                    }
                }
            }
        }
    }
}
