//! Reverse-mode automatic differentiation over a flat tape.
//!
//! Operations append eagerly-evaluated nodes; `backward` walks the tape in
//! reverse creation order (already topological) and accumulates gradients.
//! The op set is exactly what the model needs. No fusion, no threading:
//! every forward value and gradient is computed in a fixed order so that two
//! runs with the same inputs are bit-identical.

use crate::error::{Error, Result};
use crate::numerics::kernels;
use crate::numerics::rng::RngState;
use crate::numerics::tensor::Tensor;

pub const LN_2: f64 = std::f64::consts::LN_2;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(usize);

/// Position kind inside an up-sampled sequence: a raw character slot or an
/// end-of-token slot.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UpsampledKind {
    /// Character at this raw index.
    Char(usize),
    /// End-of-token slot following this token index (0-based).
    Eot(usize),
}

/// One position of the up-sampled layout: what it holds and which
/// token-model output row is added to it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct UpsampledPos {
    pub kind: UpsampledKind,
    /// 0-based row of the token-context input that this position receives.
    pub source_token: usize,
}

enum Op {
    Leaf,
    MatMul {
        a: TensorId,
        b: TensorId,
    },
    MatMulNT {
        a: TensorId,
        b: TensorId,
    },
    Add {
        a: TensorId,
        b: TensorId,
    },
    AddBiasRow {
        a: TensorId,
        bias: TensorId,
    },
    Scale {
        a: TensorId,
        c: f64,
    },
    Gelu {
        a: TensorId,
    },
    LayerNorm {
        x: TensorId,
        gain: TensorId,
        bias: TensorId,
        row_stats: Vec<(f64, f64)>,
    },
    SoftmaxRows {
        x: TensorId,
        row_len: usize,
    },
    CausalSoftmaxRows {
        x: TensorId,
    },
    SliceCols {
        x: TensorId,
        from: usize,
        to: usize,
    },
    ConcatCols {
        parts: Vec<TensorId>,
    },
    GatherRows {
        table: TensorId,
        ids: Vec<usize>,
    },
    SegmentMean {
        x: TensorId,
        spans: Vec<(usize, usize)>,
    },
    ShiftWithNull {
        x: TensorId,
        null: TensorId,
    },
    Upsample {
        chars: TensorId,
        eots: TensorId,
        ctx: TensorId,
        plan: Vec<UpsampledPos>,
    },
    CrossEntropyBits {
        logits: TensorId,
        targets: Vec<usize>,
        mask: Vec<bool>,
        probs: Vec<f64>,
        count: usize,
    },
    GumbelSigmoid {
        x: TensorId,
        tau: f64,
        soft: Vec<f64>,
    },
    /// Mean over each span of `x` rows gated by per-position values: the
    /// span-end position weighs `g_i`, interior positions weigh `1 - g_i`.
    /// At binary gates this is exactly the arithmetic span mean, but the
    /// backward pass also routes gradient into the gates, which is how the
    /// prediction loss reaches the boundary scorer through the
    /// straight-through samples.
    SegmentMeanGated {
        x: TensorId,
        gates: TensorId,
        spans: Vec<(usize, usize)>,
        inv_weights: Vec<f64>,
    },
    PriorKlBits {
        probs: TensorId,
        prior: f64,
        mean_clamped: f64,
    },
    /// Copy of `x` with one entry pinned to a constant. The pinned entry
    /// passes no gradient (it is structurally forced, not computed).
    OverrideEntry {
        x: TensorId,
        index: usize,
    },
}

struct Node {
    data: Vec<f64>,
    shape: Vec<usize>,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by a backward pass, indexed by node id.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn take(&mut self, id: TensorId) -> Option<Vec<f64>> {
        self.grads[id.0].take()
    }

    pub fn get(&self, id: TensorId) -> Option<&[f64]> {
        self.grads[id.0].as_deref()
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: TensorId) -> &[f64] {
        &self.nodes[id.0].data
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn scalar(&self, id: TensorId) -> f64 {
        debug_assert_eq!(self.nodes[id.0].data.len(), 1);
        self.nodes[id.0].data[0]
    }

    fn push(&mut self, data: Vec<f64>, shape: Vec<usize>, op: Op, requires_grad: bool) -> TensorId {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.nodes.push(Node {
            data,
            shape,
            op,
            requires_grad,
        });
        TensorId(self.nodes.len() - 1)
    }

    fn requires(&self, id: TensorId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn dims2(&self, id: TensorId, op: &'static str) -> Result<(usize, usize)> {
        match self.nodes[id.0].shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            other => Err(Error::ShapeMismatch {
                op,
                lhs: other.to_vec(),
                rhs: vec![0, 0],
            }),
        }
    }

    /// Insert a leaf carrying a copy of `t`'s values.
    pub fn leaf(&mut self, t: &Tensor) -> TensorId {
        self.push(
            t.data().to_vec(),
            t.shape().to_vec(),
            Op::Leaf,
            t.requires_grad,
        )
    }

    /// Insert a constant leaf (no gradient).
    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<f64>) -> TensorId {
        self.push(data, shape, Op::Leaf, false)
    }

    /// Standard matrix product [m x k] * [k x n] -> [m x n].
    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (m, ka) = self.dims2(a, "matmul")?;
        let (kb, n) = self.dims2(b, "matmul")?;
        if ka != kb {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let mut out = vec![0.0; m * n];
        kernels::matmul(self.value(a), self.value(b), &mut out, m, ka, n);
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(out, vec![m, n], Op::MatMul { a, b }, rg))
    }

    /// A * B^T for A[m x k], B[n x k] -> [m x n].
    pub fn matmul_nt(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (m, ka) = self.dims2(a, "matmul_nt")?;
        let (n, kb) = self.dims2(b, "matmul_nt")?;
        if ka != kb {
            return Err(Error::ShapeMismatch {
                op: "matmul_nt",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let mut out = vec![0.0; m * n];
        kernels::matmul_nt(self.value(a), self.value(b), &mut out, m, ka, n);
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(out, vec![m, n], Op::MatMulNT { a, b }, rg))
    }

    /// Elementwise sum of two same-shape tensors.
    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::ShapeMismatch {
                op: "add",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let out: Vec<f64> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(out, shape, Op::Add { a, b }, rg))
    }

    /// Add a [n] bias vector to every row of [m x n].
    pub fn add_bias_row(&mut self, a: TensorId, bias: TensorId) -> Result<TensorId> {
        let (m, n) = self.dims2(a, "add_bias_row")?;
        if self.shape(bias) != [n] {
            return Err(Error::ShapeMismatch {
                op: "add_bias_row",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(bias).to_vec(),
            });
        }
        let mut out = self.value(a).to_vec();
        let b = self.value(bias).to_vec();
        for i in 0..m {
            for j in 0..n {
                out[i * n + j] += b[j];
            }
        }
        let rg = self.requires(a) || self.requires(bias);
        Ok(self.push(out, vec![m, n], Op::AddBiasRow { a, bias }, rg))
    }

    /// Multiply by a compile-time constant.
    pub fn scale(&mut self, a: TensorId, c: f64) -> TensorId {
        let out: Vec<f64> = self.value(a).iter().map(|x| x * c).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.requires(a);
        self.push(out, shape, Op::Scale { a, c }, rg)
    }

    pub fn gelu(&mut self, a: TensorId) -> TensorId {
        let out: Vec<f64> = self.value(a).iter().map(|&x| kernels::gelu(x)).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.requires(a);
        self.push(out, shape, Op::Gelu { a }, rg)
    }

    /// Layer normalization over the final axis with affine gain/bias.
    pub fn layer_norm(
        &mut self,
        x: TensorId,
        gain: TensorId,
        bias: TensorId,
        eps: f64,
    ) -> Result<TensorId> {
        if eps <= 0.0 {
            return Err(Error::InvalidArgument(format!(
                "layer_norm eps must be positive, got {eps}"
            )));
        }
        let shape = self.shape(x).to_vec();
        let d = *shape.last().ok_or_else(|| Error::ShapeMismatch {
            op: "layer_norm",
            lhs: shape.clone(),
            rhs: vec![0],
        })?;
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(Error::ShapeMismatch {
                op: "layer_norm",
                lhs: self.shape(gain).to_vec(),
                rhs: vec![d],
            });
        }
        let rows = self.value(x).len() / d;
        let mut out = vec![0.0; rows * d];
        let mut row_stats = Vec::with_capacity(rows);
        {
            let xv = self.value(x);
            let g = self.value(gain);
            let b = self.value(bias);
            // Split borrows: copy gain/bias since they are small.
            let g = g.to_vec();
            let b = b.to_vec();
            for r in 0..rows {
                let stats = kernels::layer_norm_row(
                    &xv[r * d..(r + 1) * d],
                    &g,
                    &b,
                    eps,
                    &mut out[r * d..(r + 1) * d],
                );
                row_stats.push(stats);
            }
        }
        let rg = self.requires(x) || self.requires(gain) || self.requires(bias);
        Ok(self.push(
            out,
            shape,
            Op::LayerNorm {
                x,
                gain,
                bias,
                row_stats,
            },
            rg,
        ))
    }

    /// Softmax over the final axis. Rejects non-finite inputs.
    pub fn softmax_rows(&mut self, x: TensorId) -> Result<TensorId> {
        let shape = self.shape(x).to_vec();
        let n = *shape.last().ok_or_else(|| Error::ShapeMismatch {
            op: "softmax_rows",
            lhs: shape.clone(),
            rhs: vec![0],
        })?;
        if self.value(x).iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: "softmax_rows input".into(),
            });
        }
        let mut out = self.value(x).to_vec();
        for row in out.chunks_mut(n) {
            kernels::softmax_slice(row);
        }
        let rg = self.requires(x);
        Ok(self.push(out, shape, Op::SoftmaxRows { x, row_len: n }, rg))
    }

    /// Row-wise softmax restricted to the causal prefix: row i is a
    /// distribution over columns 0..=i, zero elsewhere. Input must be square.
    pub fn causal_softmax_rows(&mut self, x: TensorId) -> Result<TensorId> {
        let (m, n) = self.dims2(x, "causal_softmax_rows")?;
        if m != n {
            return Err(Error::ShapeMismatch {
                op: "causal_softmax_rows",
                lhs: vec![m, n],
                rhs: vec![m, m],
            });
        }
        let mut out = vec![0.0; m * n];
        {
            let xv = self.value(x);
            for i in 0..m {
                let row = &mut out[i * n..i * n + i + 1];
                row.copy_from_slice(&xv[i * n..i * n + i + 1]);
                kernels::softmax_slice(row);
            }
        }
        let rg = self.requires(x);
        Ok(self.push(out, vec![m, n], Op::CausalSoftmaxRows { x }, rg))
    }

    /// View of columns [from, to) of a [m x n] tensor.
    pub fn slice_cols(&mut self, x: TensorId, from: usize, to: usize) -> Result<TensorId> {
        let (m, n) = self.dims2(x, "slice_cols")?;
        if from >= to || to > n {
            return Err(Error::InvalidArgument(format!(
                "slice_cols range {from}..{to} invalid for {n} columns"
            )));
        }
        let w = to - from;
        let mut out = vec![0.0; m * w];
        {
            let xv = self.value(x);
            for i in 0..m {
                out[i * w..(i + 1) * w].copy_from_slice(&xv[i * n + from..i * n + to]);
            }
        }
        let rg = self.requires(x);
        Ok(self.push(out, vec![m, w], Op::SliceCols { x, from, to }, rg))
    }

    /// Concatenate same-height tensors along the column axis.
    pub fn concat_cols(&mut self, parts: &[TensorId]) -> Result<TensorId> {
        if parts.is_empty() {
            return Err(Error::InvalidArgument("concat_cols of zero parts".into()));
        }
        let (m, _) = self.dims2(parts[0], "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        let mut total = 0;
        for &p in parts {
            let (mp, np) = self.dims2(p, "concat_cols")?;
            if mp != m {
                return Err(Error::ShapeMismatch {
                    op: "concat_cols",
                    lhs: self.shape(parts[0]).to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
            widths.push(np);
            total += np;
        }
        let mut out = vec![0.0; m * total];
        let mut offset = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let pv = self.value(p);
            for i in 0..m {
                out[i * total + offset..i * total + offset + w]
                    .copy_from_slice(&pv[i * w..(i + 1) * w]);
            }
            offset += w;
        }
        let rg = parts.iter().any(|&p| self.requires(p));
        Ok(self.push(
            out,
            vec![m, total],
            Op::ConcatCols {
                parts: parts.to_vec(),
            },
            rg,
        ))
    }

    /// Gather rows of a [r x d] table by index.
    pub fn gather_rows(&mut self, table: TensorId, ids: &[usize]) -> Result<TensorId> {
        let (r, d) = self.dims2(table, "gather_rows")?;
        for &id in ids {
            if id >= r {
                return Err(Error::IndexOutOfRange {
                    what: "gather_rows row",
                    index: id,
                    bound: r,
                });
            }
        }
        let mut out = vec![0.0; ids.len() * d];
        {
            let tv = self.value(table);
            for (i, &id) in ids.iter().enumerate() {
                out[i * d..(i + 1) * d].copy_from_slice(&tv[id * d..(id + 1) * d]);
            }
        }
        let rg = self.requires(table);
        Ok(self.push(
            out,
            vec![ids.len(), d],
            Op::GatherRows {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// Mean of the rows inside each span of a [L x d] tensor. Spans are
    /// end-inclusive and must tile 0..L in order.
    pub fn segment_mean(&mut self, x: TensorId, spans: &[(usize, usize)]) -> Result<TensorId> {
        let (l, d) = self.dims2(x, "segment_mean")?;
        let mut expect = 0;
        for &(s, e) in spans {
            if s != expect || e < s || e >= l {
                return Err(Error::InvalidArgument(format!(
                    "segment_mean spans must tile 0..{l}, got span ({s},{e}) at cursor {expect}"
                )));
            }
            expect = e + 1;
        }
        if expect != l {
            return Err(Error::InvalidArgument(format!(
                "segment_mean spans cover {expect} of {l} rows"
            )));
        }
        let t = spans.len();
        let mut out = vec![0.0; t * d];
        {
            let xv = self.value(x);
            for (k, &(s, e)) in spans.iter().enumerate() {
                let row = &mut out[k * d..(k + 1) * d];
                for i in s..=e {
                    for (o, &v) in row.iter_mut().zip(&xv[i * d..(i + 1) * d]) {
                        *o += v;
                    }
                }
                let inv = 1.0 / (e - s + 1) as f64;
                for o in row.iter_mut() {
                    *o *= inv;
                }
            }
        }
        let rg = self.requires(x);
        Ok(self.push(
            out,
            vec![t, d],
            Op::SegmentMean {
                x,
                spans: spans.to_vec(),
            },
            rg,
        ))
    }

    /// Autoregressive offset: output row 0 is the null vector, row k is input
    /// row k-1; the final input row is dropped.
    pub fn shift_with_null(&mut self, x: TensorId, null: TensorId) -> Result<TensorId> {
        let (t, d) = self.dims2(x, "shift_with_null")?;
        if t == 0 {
            return Err(Error::InvalidArgument(
                "shift_with_null needs at least one row".into(),
            ));
        }
        if self.shape(null) != [d] {
            return Err(Error::ShapeMismatch {
                op: "shift_with_null",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(null).to_vec(),
            });
        }
        let mut out = vec![0.0; t * d];
        out[0..d].copy_from_slice(self.value(null));
        {
            let xv = self.value(x);
            out[d..].copy_from_slice(&xv[0..(t - 1) * d]);
        }
        let rg = self.requires(x) || self.requires(null);
        Ok(self.push(out, vec![t, d], Op::ShiftWithNull { x, null }, rg))
    }

    /// Build the up-sampled decoder input from character rows, end-of-token
    /// rows, and token-context rows according to `plan`.
    pub fn upsample(
        &mut self,
        chars: TensorId,
        eots: TensorId,
        ctx: TensorId,
        plan: &[UpsampledPos],
    ) -> Result<TensorId> {
        let (l, d) = self.dims2(chars, "upsample")?;
        let (te, de) = self.dims2(eots, "upsample")?;
        let (tc, dc) = self.dims2(ctx, "upsample")?;
        if de != d || dc != d {
            return Err(Error::ShapeMismatch {
                op: "upsample",
                lhs: vec![l, d],
                rhs: vec![te.max(tc), de.min(dc)],
            });
        }
        for p in plan {
            let src_ok = p.source_token < tc;
            let kind_ok = match p.kind {
                UpsampledKind::Char(i) => i < l,
                UpsampledKind::Eot(k) => k < te,
            };
            if !src_ok || !kind_ok {
                return Err(Error::InvalidArgument(
                    "upsample plan references out-of-range rows".into(),
                ));
            }
        }
        let mut out = vec![0.0; plan.len() * d];
        {
            let cv = self.value(chars);
            let ev = self.value(eots);
            let xv = self.value(ctx);
            for (pos, p) in plan.iter().enumerate() {
                let base = match p.kind {
                    UpsampledKind::Char(i) => &cv[i * d..(i + 1) * d],
                    UpsampledKind::Eot(k) => &ev[k * d..(k + 1) * d],
                };
                let add = &xv[p.source_token * d..(p.source_token + 1) * d];
                let row = &mut out[pos * d..(pos + 1) * d];
                for j in 0..d {
                    row[j] = base[j] + add[j];
                }
            }
        }
        let rg = self.requires(chars) || self.requires(eots) || self.requires(ctx);
        Ok(self.push(
            out,
            vec![plan.len(), d],
            Op::Upsample {
                chars,
                eots,
                ctx,
                plan: plan.to_vec(),
            },
            rg,
        ))
    }

    /// Mean over unmasked positions of -log2 p(target). Scalar output.
    pub fn cross_entropy_bits(
        &mut self,
        logits: TensorId,
        targets: &[usize],
        mask: &[bool],
    ) -> Result<TensorId> {
        let (l, v) = self.dims2(logits, "cross_entropy_bits")?;
        if targets.len() != l || mask.len() != l {
            return Err(Error::ShapeMismatch {
                op: "cross_entropy_bits",
                lhs: vec![l, v],
                rhs: vec![targets.len(), mask.len()],
            });
        }
        for (i, (&t, &m)) in targets.iter().zip(mask).enumerate() {
            if m && t >= v {
                return Err(Error::IndexOutOfRange {
                    what: "cross_entropy target",
                    index: t,
                    bound: v,
                });
            }
            let _ = i;
        }
        let mut probs = self.value(logits).to_vec();
        for row in probs.chunks_mut(v) {
            kernels::softmax_slice(row);
        }
        let mut total = 0.0;
        let mut count = 0usize;
        for i in 0..l {
            if mask[i] {
                total += -(probs[i * v + targets[i]].max(f64::MIN_POSITIVE)).ln() / LN_2;
                count += 1;
            }
        }
        let mean = if count > 0 { total / count as f64 } else { 0.0 };
        let rg = self.requires(logits);
        Ok(self.push(
            vec![mean],
            vec![1],
            Op::CrossEntropyBits {
                logits,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
                probs,
                count,
            },
            rg,
        ))
    }

    /// Gumbel-sigmoid relaxation of a Bernoulli gate.
    ///
    /// Soft output is sigmoid((x + g1 - g2)/tau) with g1, g2 independent
    /// standard Gumbel samples (two per element, drawn in element order).
    /// With `hard` the output is thresholded at 0.5 and the backward pass
    /// uses the soft value's gradient (straight-through).
    pub fn gumbel_sigmoid(
        &mut self,
        x: TensorId,
        tau: f64,
        rng: &mut RngState,
        hard: bool,
    ) -> Result<TensorId> {
        if tau <= 0.0 {
            return Err(Error::InvalidArgument(format!(
                "gumbel_sigmoid temperature must be positive, got {tau}"
            )));
        }
        let shape = self.shape(x).to_vec();
        let soft: Vec<f64> = self
            .value(x)
            .to_vec()
            .into_iter()
            .map(|v| {
                let g1 = rng.gumbel();
                let g2 = rng.gumbel();
                kernels::sigmoid((v + g1 - g2) / tau)
            })
            .collect();
        let data = if hard {
            soft.iter().map(|&s| if s > 0.5 { 1.0 } else { 0.0 }).collect()
        } else {
            soft.clone()
        };
        let rg = self.requires(x);
        Ok(self.push(data, shape, Op::GumbelSigmoid { x, tau, soft }, rg))
    }

    /// Gumbel-sigmoid drawing one noise realization and returning both the
    /// soft relaxation and the thresholded straight-through sample. The two
    /// nodes share noise: the hard node's value is `soft > 0.5` and its
    /// backward pass uses the soft gradient.
    pub fn gumbel_sigmoid_pair(
        &mut self,
        x: TensorId,
        tau: f64,
        rng: &mut RngState,
    ) -> Result<(TensorId, TensorId)> {
        let soft_id = self.gumbel_sigmoid(x, tau, rng, false)?;
        let soft = self.value(soft_id).to_vec();
        let hard: Vec<f64> = soft.iter().map(|&s| if s > 0.5 { 1.0 } else { 0.0 }).collect();
        let shape = self.shape(soft_id).to_vec();
        let rg = self.requires(x);
        let hard_id = self.push(hard, shape, Op::GumbelSigmoid { x, tau, soft }, rg);
        Ok((soft_id, hard_id))
    }

    /// Span means of `x` rows with boundary-gated weights. Forward values
    /// equal [`Tape::segment_mean`] exactly when gates are binary and
    /// consistent with `spans` (span ends 1, interiors 0); gradients flow to
    /// both the rows and the gates.
    pub fn segment_mean_gated(
        &mut self,
        x: TensorId,
        gates: TensorId,
        spans: &[(usize, usize)],
    ) -> Result<TensorId> {
        let (l, d) = self.dims2(x, "segment_mean_gated")?;
        if self.value(gates).len() != l {
            return Err(Error::ShapeMismatch {
                op: "segment_mean_gated",
                lhs: vec![l, d],
                rhs: self.shape(gates).to_vec(),
            });
        }
        let mut expect = 0;
        for &(s, e) in spans {
            if s != expect || e < s || e >= l {
                return Err(Error::InvalidArgument(format!(
                    "segment_mean_gated spans must tile 0..{l}, got span ({s},{e}) at cursor {expect}"
                )));
            }
            expect = e + 1;
        }
        if expect != l {
            return Err(Error::InvalidArgument(format!(
                "segment_mean_gated spans cover {expect} of {l} rows"
            )));
        }
        let t = spans.len();
        let mut out = vec![0.0; t * d];
        let mut inv_weights = Vec::with_capacity(t);
        {
            let xv = self.value(x);
            let gv = self.value(gates);
            for (k, &(s, e)) in spans.iter().enumerate() {
                let row = &mut out[k * d..(k + 1) * d];
                let mut wsum = 0.0;
                for i in s..=e {
                    let m = if i == e { gv[i] } else { 1.0 - gv[i] };
                    wsum += m;
                    for (o, &v) in row.iter_mut().zip(&xv[i * d..(i + 1) * d]) {
                        *o += m * v;
                    }
                }
                // Binary gates give wsum == span length; tiny clamps only
                // matter for the surrogate relaxation near a flip.
                let inv = 1.0 / wsum.max(1e-6);
                inv_weights.push(inv);
                for o in row.iter_mut() {
                    *o *= inv;
                }
            }
        }
        let rg = self.requires(x) || self.requires(gates);
        Ok(self.push(
            out,
            vec![t, d],
            Op::SegmentMeanGated {
                x,
                gates,
                spans: spans.to_vec(),
                inv_weights,
            },
            rg,
        ))
    }

    /// Copy `x` with entry `index` pinned to `value`; the pinned entry
    /// blocks gradient. Used to force the final position of a sequence to
    /// be a token boundary.
    pub fn override_entry(&mut self, x: TensorId, index: usize, value: f64) -> Result<TensorId> {
        if index >= self.value(x).len() {
            return Err(Error::IndexOutOfRange {
                what: "override_entry",
                index,
                bound: self.value(x).len(),
            });
        }
        let mut data = self.value(x).to_vec();
        data[index] = value;
        let shape = self.shape(x).to_vec();
        let rg = self.requires(x);
        Ok(self.push(data, shape, Op::OverrideEntry { x, index }, rg))
    }

    /// Deterministic sigmoid of each element (eval-mode boundary probability).
    pub fn sigmoid(&mut self, x: TensorId) -> TensorId {
        // Reuse the gumbel-sigmoid saved-soft machinery with zero noise by
        // treating it as tau=1 soft output; backward is identical.
        let shape = self.shape(x).to_vec();
        let soft: Vec<f64> = self.value(x).iter().map(|&v| kernels::sigmoid(v)).collect();
        let rg = self.requires(x);
        self.push(
            soft.clone(),
            shape,
            Op::GumbelSigmoid { x, tau: 1.0, soft },
            rg,
        )
    }

    /// Length-scaled KL divergence, in bits, between the mean of `probs` and
    /// a Bernoulli prior: L * KL(Bernoulli(mean) || Bernoulli(prior)).
    pub fn prior_kl_bits(&mut self, probs: TensorId, prior: f64) -> Result<TensorId> {
        if !(0.0 < prior && prior < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "prior must lie in (0,1), got {prior}"
            )));
        }
        let len = self.value(probs).len();
        if len == 0 {
            return Err(Error::InvalidArgument("prior_kl_bits of empty tensor".into()));
        }
        let mean = self.value(probs).iter().sum::<f64>() / len as f64;
        let m = mean.clamp(1e-12, 1.0 - 1e-12);
        let kl_nats = m * (m / prior).ln() + (1.0 - m) * ((1.0 - m) / (1.0 - prior)).ln();
        let out = len as f64 * kl_nats / LN_2;
        let rg = self.requires(probs);
        Ok(self.push(
            vec![out],
            vec![1],
            Op::PriorKlBits {
                probs,
                prior,
                mean_clamped: m,
            },
            rg,
        ))
    }

    /// Export a node as a standalone tensor.
    pub fn to_tensor(&self, id: TensorId) -> Tensor {
        Tensor::new(self.shape(id).to_vec(), self.value(id).to_vec()).expect("node is consistent")
    }

    /// Backward from a scalar loss with seed gradient 1.
    pub fn backward(&self, loss: TensorId) -> Result<Gradients> {
        self.backward_scaled(loss, 1.0)
    }

    /// Backward from a scalar loss with an arbitrary seed gradient, used to
    /// fold a batch mean into per-sequence passes.
    pub fn backward_scaled(&self, loss: TensorId, seed: f64) -> Result<Gradients> {
        if self.nodes[loss.0].data.len() != 1 {
            return Err(Error::InvalidArgument(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![seed]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let keep = matches!(self.nodes[idx].op, Op::Leaf);
            self.propagate(idx, &g, &mut grads);
            if keep {
                grads[idx] = Some(g);
            }
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], id: TensorId, add: impl FnOnce(&mut [f64])) {
        if !self.nodes[id.0].requires_grad {
            return;
        }
        let slot = grads[id.0].get_or_insert_with(|| vec![0.0; self.nodes[id.0].data.len()]);
        add(slot);
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                if self.requires(*a) {
                    let mut da = vec![0.0; m * k];
                    kernels::matmul_nt(g, self.value(*b), &mut da, m, n, k);
                    self.accumulate(grads, *a, |s| kernels::axpy(s, 1.0, &da));
                }
                if self.requires(*b) {
                    let av = self.value(*a);
                    self.accumulate(grads, *b, |s| {
                        kernels::matmul_tn_accum(av, g, s, m, k, n);
                    });
                }
            }
            Op::MatMulNT { a, b } => {
                // C = A * B^T; dA = dC * B, dB = dC^T * A.
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[0];
                if self.requires(*a) {
                    let mut da = vec![0.0; m * k];
                    kernels::matmul(g, self.value(*b), &mut da, m, n, k);
                    self.accumulate(grads, *a, |s| kernels::axpy(s, 1.0, &da));
                }
                if self.requires(*b) {
                    let av = self.value(*a);
                    self.accumulate(grads, *b, |s| {
                        // dB[j,:] += sum_i g[i,j] * A[i,:]
                        for i in 0..m {
                            for j in 0..n {
                                let gij = g[i * n + j];
                                if gij != 0.0 {
                                    kernels::axpy(&mut s[j * k..(j + 1) * k], gij, &av[i * k..(i + 1) * k]);
                                }
                            }
                        }
                    });
                }
            }
            Op::Add { a, b } => {
                self.accumulate(grads, *a, |s| kernels::axpy(s, 1.0, g));
                self.accumulate(grads, *b, |s| kernels::axpy(s, 1.0, g));
            }
            Op::AddBiasRow { a, bias } => {
                self.accumulate(grads, *a, |s| kernels::axpy(s, 1.0, g));
                let n = self.shape(*bias)[0];
                self.accumulate(grads, *bias, |s| {
                    for row in g.chunks(n) {
                        kernels::axpy(s, 1.0, row);
                    }
                });
            }
            Op::Scale { a, c } => {
                self.accumulate(grads, *a, |s| kernels::axpy(s, *c, g));
            }
            Op::Gelu { a } => {
                let xv = self.value(*a);
                self.accumulate(grads, *a, |s| {
                    for i in 0..s.len() {
                        s[i] += g[i] * kernels::gelu_grad(xv[i]);
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                row_stats,
            } => {
                let d = *node.shape.last().unwrap();
                let rows = node.data.len() / d;
                let xv = self.value(*x);
                let gv = self.value(*gain);
                if self.requires(*x) {
                    self.accumulate(grads, *x, |s| {
                        for r in 0..rows {
                            let (mean, inv_std) = row_stats[r];
                            let xr = &xv[r * d..(r + 1) * d];
                            let gr = &g[r * d..(r + 1) * d];
                            // dxhat_i = g_i * gain_i; then standard layer norm backward.
                            let mut sum_dxhat = 0.0;
                            let mut sum_dxhat_xhat = 0.0;
                            for i in 0..d {
                                let xhat = (xr[i] - mean) * inv_std;
                                let dxhat = gr[i] * gv[i];
                                sum_dxhat += dxhat;
                                sum_dxhat_xhat += dxhat * xhat;
                            }
                            let inv_d = 1.0 / d as f64;
                            let sr = &mut s[r * d..(r + 1) * d];
                            for i in 0..d {
                                let xhat = (xr[i] - mean) * inv_std;
                                let dxhat = gr[i] * gv[i];
                                sr[i] += inv_std * (dxhat - inv_d * sum_dxhat - xhat * inv_d * sum_dxhat_xhat);
                            }
                        }
                    });
                }
                if self.requires(*gain) {
                    self.accumulate(grads, *gain, |s| {
                        for r in 0..rows {
                            let (mean, inv_std) = row_stats[r];
                            for i in 0..d {
                                let xhat = (xv[r * d + i] - mean) * inv_std;
                                s[i] += g[r * d + i] * xhat;
                            }
                        }
                    });
                }
                if self.requires(*bias) {
                    self.accumulate(grads, *bias, |s| {
                        for r in 0..rows {
                            kernels::axpy(s, 1.0, &g[r * d..(r + 1) * d]);
                        }
                    });
                }
            }
            Op::SoftmaxRows { x, row_len } => {
                let n = *row_len;
                let y = &node.data;
                self.accumulate(grads, *x, |s| {
                    for (r, yr) in y.chunks(n).enumerate() {
                        let gr = &g[r * n..(r + 1) * n];
                        let mut dotv = 0.0;
                        for i in 0..n {
                            dotv += gr[i] * yr[i];
                        }
                        for i in 0..n {
                            s[r * n + i] += yr[i] * (gr[i] - dotv);
                        }
                    }
                });
            }
            Op::CausalSoftmaxRows { x } => {
                let m = node.shape[0];
                let y = &node.data;
                self.accumulate(grads, *x, |s| {
                    for i in 0..m {
                        let yr = &y[i * m..i * m + i + 1];
                        let gr = &g[i * m..i * m + i + 1];
                        let mut dotv = 0.0;
                        for j in 0..yr.len() {
                            dotv += gr[j] * yr[j];
                        }
                        for j in 0..yr.len() {
                            s[i * m + j] += yr[j] * (gr[j] - dotv);
                        }
                    }
                });
            }
            Op::SliceCols { x, from, to } => {
                let n = self.shape(*x)[1];
                let w = to - from;
                let m = node.shape[0];
                self.accumulate(grads, *x, |s| {
                    for i in 0..m {
                        kernels::axpy(
                            &mut s[i * n + from..i * n + to],
                            1.0,
                            &g[i * w..(i + 1) * w],
                        );
                    }
                });
            }
            Op::ConcatCols { parts } => {
                let total = node.shape[1];
                let m = node.shape[0];
                let mut offset = 0;
                for &p in parts {
                    let w = self.shape(p)[1];
                    self.accumulate(grads, p, |s| {
                        for i in 0..m {
                            kernels::axpy(
                                &mut s[i * w..(i + 1) * w],
                                1.0,
                                &g[i * total + offset..i * total + offset + w],
                            );
                        }
                    });
                    offset += w;
                }
            }
            Op::GatherRows { table, ids } => {
                let d = node.shape[1];
                self.accumulate(grads, *table, |s| {
                    for (i, &id) in ids.iter().enumerate() {
                        kernels::axpy(&mut s[id * d..(id + 1) * d], 1.0, &g[i * d..(i + 1) * d]);
                    }
                });
            }
            Op::SegmentMean { x, spans } => {
                let d = node.shape[1];
                self.accumulate(grads, *x, |s| {
                    for (k, &(start, end)) in spans.iter().enumerate() {
                        let inv = 1.0 / (end - start + 1) as f64;
                        let gr = &g[k * d..(k + 1) * d];
                        for i in start..=end {
                            kernels::axpy(&mut s[i * d..(i + 1) * d], inv, gr);
                        }
                    }
                });
            }
            Op::ShiftWithNull { x, null } => {
                let d = node.shape[1];
                let t = node.shape[0];
                self.accumulate(grads, *null, |s| kernels::axpy(s, 1.0, &g[0..d]));
                if t > 1 {
                    self.accumulate(grads, *x, |s| {
                        kernels::axpy(&mut s[0..(t - 1) * d], 1.0, &g[d..]);
                    });
                }
            }
            Op::Upsample {
                chars,
                eots,
                ctx,
                plan,
            } => {
                let d = node.shape[1];
                self.accumulate(grads, *ctx, |s| {
                    for (pos, p) in plan.iter().enumerate() {
                        kernels::axpy(
                            &mut s[p.source_token * d..(p.source_token + 1) * d],
                            1.0,
                            &g[pos * d..(pos + 1) * d],
                        );
                    }
                });
                self.accumulate(grads, *chars, |s| {
                    for (pos, p) in plan.iter().enumerate() {
                        if let UpsampledKind::Char(i) = p.kind {
                            kernels::axpy(&mut s[i * d..(i + 1) * d], 1.0, &g[pos * d..(pos + 1) * d]);
                        }
                    }
                });
                self.accumulate(grads, *eots, |s| {
                    for (pos, p) in plan.iter().enumerate() {
                        if let UpsampledKind::Eot(k) = p.kind {
                            kernels::axpy(&mut s[k * d..(k + 1) * d], 1.0, &g[pos * d..(pos + 1) * d]);
                        }
                    }
                });
            }
            Op::CrossEntropyBits {
                logits,
                targets,
                mask,
                probs,
                count,
            } => {
                if *count == 0 {
                    return;
                }
                let v = self.shape(*logits)[1];
                let scale = g[0] / (*count as f64 * LN_2);
                self.accumulate(grads, *logits, |s| {
                    for (i, (&t, &m)) in targets.iter().zip(mask).enumerate() {
                        if !m {
                            continue;
                        }
                        let pr = &probs[i * v..(i + 1) * v];
                        let sr = &mut s[i * v..(i + 1) * v];
                        for j in 0..v {
                            let indicator = if j == t { 1.0 } else { 0.0 };
                            sr[j] += scale * (pr[j] - indicator);
                        }
                    }
                });
            }
            Op::GumbelSigmoid { x, tau, soft } => {
                self.accumulate(grads, *x, |s| {
                    for i in 0..s.len() {
                        s[i] += g[i] * soft[i] * (1.0 - soft[i]) / tau;
                    }
                });
            }
            Op::SegmentMeanGated {
                x,
                gates,
                spans,
                inv_weights,
            } => {
                let d = node.shape[1];
                let out = &node.data;
                let xv = self.value(*x);
                let gv = self.value(*gates);
                if self.requires(*x) {
                    self.accumulate(grads, *x, |s| {
                        for (k, &(start, end)) in spans.iter().enumerate() {
                            let inv = inv_weights[k];
                            let gr = &g[k * d..(k + 1) * d];
                            for i in start..=end {
                                let m = if i == end { gv[i] } else { 1.0 - gv[i] };
                                kernels::axpy(&mut s[i * d..(i + 1) * d], m * inv, gr);
                            }
                        }
                    });
                }
                if self.requires(*gates) {
                    self.accumulate(grads, *gates, |s| {
                        for (k, &(start, end)) in spans.iter().enumerate() {
                            let inv = inv_weights[k];
                            let gr = &g[k * d..(k + 1) * d];
                            let ok = &out[k * d..(k + 1) * d];
                            let base = kernels::dot(gr, ok);
                            for i in start..=end {
                                let dm = inv * (kernels::dot(gr, &xv[i * d..(i + 1) * d]) - base);
                                s[i] += if i == end { dm } else { -dm };
                            }
                        }
                    });
                }
            }
            Op::OverrideEntry { x, index } => {
                self.accumulate(grads, *x, |s| {
                    for (i, (si, &gi)) in s.iter_mut().zip(g).enumerate() {
                        if i != *index {
                            *si += gi;
                        }
                    }
                });
            }
            Op::PriorKlBits {
                probs,
                prior,
                mean_clamped,
            } => {
                let m = *mean_clamped;
                let dkl_dmean = ((m / prior).ln() - ((1.0 - m) / (1.0 - prior)).ln()) / LN_2;
                let coeff = g[0] * dkl_dmean;
                self.accumulate(grads, *probs, |s| {
                    for v in s.iter_mut() {
                        *v += coeff;
                    }
                });
            }
        }
    }
}
