//! Differentiable forward pass over the autodiff tape.
//!
//! Composition: embed -> tokenizer -> boundaries -> pool -> null shift ->
//! token model -> up-sample with EOT slots -> decoder -> head. Character
//! positions in the decoder input carry the raw embedding as a residual
//! (not the tokenizer output), which is what lets generation finish a token
//! with the decoder alone.

use crate::error::{Error, Result};
use crate::model::{Mode, ModelConfig, Segmentation, StackParams, ToucanModel, LN_EPS};
use crate::numerics::tape::{Tape, TensorId, UpsampledKind, UpsampledPos};
use crate::numerics::RngState;

/// Tape handles for one layer's parameters.
pub struct BoundLayer {
    pub ln1_gain: TensorId,
    pub ln1_bias: TensorId,
    pub w_q: TensorId,
    pub b_q: TensorId,
    pub w_k: TensorId,
    pub b_k: TensorId,
    pub w_v: TensorId,
    pub b_v: TensorId,
    pub w_o: TensorId,
    pub b_o: TensorId,
    pub ln2_gain: TensorId,
    pub ln2_bias: TensorId,
    pub w_ff1: TensorId,
    pub b_ff1: TensorId,
    pub w_ff2: TensorId,
    pub b_ff2: TensorId,
}

pub struct BoundStack {
    pub layers: Vec<BoundLayer>,
    pub ln_f_gain: TensorId,
    pub ln_f_bias: TensorId,
}

/// All model parameters registered as tape leaves for one forward pass.
///
/// `ids_in_order` mirrors [`ToucanModel::visit_params`] so gradients can be
/// pulled back into the model after `backward`.
pub struct BoundModel {
    pub char_embeddings: TensorId,
    pub pos_embeddings: TensorId,
    pub tokenizer: BoundStack,
    pub token_model: BoundStack,
    pub decoder: BoundStack,
    pub boundary_w1: TensorId,
    pub boundary_b1: TensorId,
    pub boundary_w2: TensorId,
    pub boundary_b2: TensorId,
    pub null_vector: TensorId,
    pub lm_head_w: TensorId,
    pub lm_head_b: TensorId,
    pub ids_in_order: Vec<TensorId>,
}

fn bind_leaf(tape: &mut Tape, order: &mut Vec<TensorId>, t: &crate::numerics::Tensor) -> TensorId {
    let id = tape.leaf(t);
    order.push(id);
    id
}

fn bind_stack(tape: &mut Tape, order: &mut Vec<TensorId>, s: &StackParams) -> BoundStack {
    let layers = s
        .layers
        .iter()
        .map(|l| BoundLayer {
            ln1_gain: bind_leaf(tape, order, &l.ln1_gain),
            ln1_bias: bind_leaf(tape, order, &l.ln1_bias),
            w_q: bind_leaf(tape, order, &l.w_q),
            b_q: bind_leaf(tape, order, &l.b_q),
            w_k: bind_leaf(tape, order, &l.w_k),
            b_k: bind_leaf(tape, order, &l.b_k),
            w_v: bind_leaf(tape, order, &l.w_v),
            b_v: bind_leaf(tape, order, &l.b_v),
            w_o: bind_leaf(tape, order, &l.w_o),
            b_o: bind_leaf(tape, order, &l.b_o),
            ln2_gain: bind_leaf(tape, order, &l.ln2_gain),
            ln2_bias: bind_leaf(tape, order, &l.ln2_bias),
            w_ff1: bind_leaf(tape, order, &l.w_ff1),
            b_ff1: bind_leaf(tape, order, &l.b_ff1),
            w_ff2: bind_leaf(tape, order, &l.w_ff2),
            b_ff2: bind_leaf(tape, order, &l.b_ff2),
        })
        .collect();
    BoundStack {
        layers,
        ln_f_gain: bind_leaf(tape, order, &s.ln_f_gain),
        ln_f_bias: bind_leaf(tape, order, &s.ln_f_bias),
    }
}

impl BoundModel {
    /// Register every parameter as a tape leaf, in `visit_params` order.
    pub fn bind(tape: &mut Tape, model: &ToucanModel) -> BoundModel {
        let mut order = Vec::new();
        let char_embeddings = bind_leaf(tape, &mut order, &model.char_embeddings);
        let pos_embeddings = bind_leaf(tape, &mut order, &model.pos_embeddings);
        let tokenizer = bind_stack(tape, &mut order, &model.tokenizer);
        let token_model = bind_stack(tape, &mut order, &model.token_model);
        let decoder = bind_stack(tape, &mut order, &model.decoder);
        let boundary_w1 = bind_leaf(tape, &mut order, &model.boundary_mlp.w1);
        let boundary_b1 = bind_leaf(tape, &mut order, &model.boundary_mlp.b1);
        let boundary_w2 = bind_leaf(tape, &mut order, &model.boundary_mlp.w2);
        let boundary_b2 = bind_leaf(tape, &mut order, &model.boundary_mlp.b2);
        let null_vector = bind_leaf(tape, &mut order, &model.null_vector);
        let lm_head_w = bind_leaf(tape, &mut order, &model.lm_head_w);
        let lm_head_b = bind_leaf(tape, &mut order, &model.lm_head_b);
        BoundModel {
            char_embeddings,
            pos_embeddings,
            tokenizer,
            token_model,
            decoder,
            boundary_w1,
            boundary_b1,
            boundary_w2,
            boundary_b2,
            null_vector,
            lm_head_w,
            lm_head_b,
            ids_in_order: order,
        }
    }
}

/// One pre-norm transformer layer with causal multi-head attention.
fn layer_forward(
    tape: &mut Tape,
    layer: &BoundLayer,
    cfg: &ModelConfig,
    x: TensorId,
) -> Result<TensorId> {
    let hd = cfg.head_dim();
    let scale = 1.0 / (hd as f64).sqrt();

    let xn = tape.layer_norm(x, layer.ln1_gain, layer.ln1_bias, LN_EPS)?;
    let q = tape.matmul(xn, layer.w_q)?;
    let q = tape.add_bias_row(q, layer.b_q)?;
    let k = tape.matmul(xn, layer.w_k)?;
    let k = tape.add_bias_row(k, layer.b_k)?;
    let v = tape.matmul(xn, layer.w_v)?;
    let v = tape.add_bias_row(v, layer.b_v)?;

    let mut head_outs = Vec::with_capacity(cfg.n_heads);
    for h in 0..cfg.n_heads {
        let (from, to) = (h * hd, (h + 1) * hd);
        let qh = tape.slice_cols(q, from, to)?;
        let kh = tape.slice_cols(k, from, to)?;
        let vh = tape.slice_cols(v, from, to)?;
        let scores = tape.matmul_nt(qh, kh)?;
        let scores = tape.scale(scores, scale);
        let probs = tape.causal_softmax_rows(scores)?;
        head_outs.push(tape.matmul(probs, vh)?);
    }
    let cat = tape.concat_cols(&head_outs)?;
    let attn = tape.matmul(cat, layer.w_o)?;
    let attn = tape.add_bias_row(attn, layer.b_o)?;
    let x = tape.add(x, attn)?;

    let xn2 = tape.layer_norm(x, layer.ln2_gain, layer.ln2_bias, LN_EPS)?;
    let h1 = tape.matmul(xn2, layer.w_ff1)?;
    let h1 = tape.add_bias_row(h1, layer.b_ff1)?;
    let h1 = tape.gelu(h1);
    let ff = tape.matmul(h1, layer.w_ff2)?;
    let ff = tape.add_bias_row(ff, layer.b_ff2)?;
    tape.add(x, ff)
}

fn stack_forward(
    tape: &mut Tape,
    stack: &BoundStack,
    cfg: &ModelConfig,
    mut x: TensorId,
) -> Result<TensorId> {
    for layer in &stack.layers {
        x = layer_forward(tape, layer, cfg, x)?;
    }
    tape.layer_norm(x, stack.ln_f_gain, stack.ln_f_bias, LN_EPS)
}

/// Character embedding plus learned absolute position embedding.
///
/// `ids` must contain raw characters only (never the EOT symbol), and the
/// sequence must fit the position table.
pub fn embed_chars(
    tape: &mut Tape,
    bound: &BoundModel,
    cfg: &ModelConfig,
    ids: &[u8],
) -> Result<TensorId> {
    for &id in ids {
        if id as usize >= cfg.char_vocab_size {
            return Err(Error::IndexOutOfRange {
                what: "character id",
                index: id as usize,
                bound: cfg.char_vocab_size,
            });
        }
    }
    if ids.len() > cfg.max_seq_len {
        return Err(Error::Capacity {
            len: ids.len(),
            max: cfg.max_seq_len,
        });
    }
    let idx: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
    let chars = tape.gather_rows(bound.char_embeddings, &idx)?;
    let positions: Vec<usize> = (0..ids.len()).collect();
    let pos = tape.gather_rows(bound.pos_embeddings, &positions)?;
    tape.add(chars, pos)
}

/// Contextualize character vectors with the tokenizer stack.
pub fn tokenizer_forward(
    tape: &mut Tape,
    bound: &BoundModel,
    cfg: &ModelConfig,
    char_vecs: TensorId,
) -> Result<TensorId> {
    let rows = tape.shape(char_vecs)[0];
    if rows > cfg.max_seq_len {
        return Err(Error::Capacity {
            len: rows,
            max: cfg.max_seq_len,
        });
    }
    stack_forward(tape, &bound.tokenizer, cfg, char_vecs)
}

/// Per-position boundary logits from the feed-forward scorer.
pub fn boundary_logits(tape: &mut Tape, bound: &BoundModel, ctx: TensorId) -> Result<TensorId> {
    let h = tape.matmul(ctx, bound.boundary_w1)?;
    let h = tape.add_bias_row(h, bound.boundary_b1)?;
    let h = tape.gelu(h);
    let out = tape.matmul(h, bound.boundary_w2)?;
    tape.add_bias_row(out, bound.boundary_b2)
}

/// Boundary decisions frozen from one training pass: the straight-through
/// offsets (gate minus soft, per position) and the span-end flags. The
/// gradient-check harness replays a pass with these to obtain a forward
/// that is smooth in the parameters while passing through the same point.
#[derive(Debug, Clone)]
pub struct FrozenBoundaries {
    pub offsets: Vec<f64>,
    pub flags: Vec<bool>,
}

pub(crate) struct BoundaryDecision {
    /// Soft probabilities (noisy in train mode, sigmoid in eval).
    pub probs: TensorId,
    /// Straight-through gate values for pooling; None in eval mode.
    pub gate: Option<TensorId>,
    pub segmentation: Segmentation,
    pub frozen: Option<FrozenBoundaries>,
}

pub(crate) fn decide_boundaries(
    tape: &mut Tape,
    bound: &BoundModel,
    cfg: &ModelConfig,
    ctx: TensorId,
    rng: &mut RngState,
    mode: Mode,
    replay: Option<&FrozenBoundaries>,
) -> Result<BoundaryDecision> {
    let logits = boundary_logits(tape, bound, ctx)?;
    let len = tape.value(logits).len();
    match (mode, replay) {
        (Mode::Eval, _) => {
            let probs = tape.sigmoid(logits);
            let flags: Vec<bool> = tape.value(probs).iter().map(|&p| p > 0.5).collect();
            Ok(BoundaryDecision {
                probs,
                gate: None,
                segmentation: Segmentation::from_boundaries(&flags),
                frozen: None,
            })
        }
        (Mode::Train, None) => {
            let (soft, hard) = tape.gumbel_sigmoid_pair(logits, cfg.gumbel_temperature, rng)?;
            // The final position is a forced boundary so the partition is
            // total; the forced gate passes no gradient.
            let gate = tape.override_entry(hard, len - 1, 1.0)?;
            let flags: Vec<bool> = tape.value(gate).iter().map(|&g| g > 0.5).collect();
            let offsets: Vec<f64> = tape
                .value(gate)
                .iter()
                .zip(tape.value(soft))
                .map(|(g, s)| g - s)
                .collect();
            Ok(BoundaryDecision {
                probs: soft,
                gate: Some(gate),
                segmentation: Segmentation::from_boundaries(&flags),
                frozen: Some(FrozenBoundaries {
                    offsets,
                    flags,
                }),
            })
        }
        (Mode::Train, Some(frozen)) => {
            // Surrogate replay: same noise (same rng stream), thresholds
            // relaxed around the captured decisions. At the capture point
            // the forward is bit-identical to the original pass.
            let soft = tape.gumbel_sigmoid(logits, cfg.gumbel_temperature, rng, false)?;
            let shape = tape.shape(soft).to_vec();
            let delta = tape.constant(shape, frozen.offsets.clone());
            let shifted = tape.add(soft, delta)?;
            let gate = tape.override_entry(shifted, len - 1, 1.0)?;
            Ok(BoundaryDecision {
                probs: soft,
                gate: Some(gate),
                segmentation: Segmentation::from_boundaries(&frozen.flags),
                frozen: None,
            })
        }
    }
}

/// Score boundaries and cut the sequence into token spans.
///
/// A position flagged as a boundary is the LAST character of its token; the
/// final position is always a forced boundary. In train mode the cut comes
/// from gumbel-sigmoid samples thresholded at 0.5 (the returned
/// probabilities are the noisy soft values, which is what the prior loss
/// trains); in eval mode the noiseless sigmoid is thresholded instead.
pub fn predict_boundaries(
    tape: &mut Tape,
    bound: &BoundModel,
    cfg: &ModelConfig,
    ctx: TensorId,
    rng: &mut RngState,
    mode: Mode,
) -> Result<(TensorId, Segmentation)> {
    let d = decide_boundaries(tape, bound, cfg, ctx, rng, mode, None)?;
    Ok((d.probs, d.segmentation))
}

/// Mean-pool contextualized character rows into one vector per token span.
pub fn pool_segments(tape: &mut Tape, ctx: TensorId, seg: &Segmentation) -> Result<TensorId> {
    tape.segment_mean(ctx, seg.spans())
}

/// Offset token vectors by one position, inserting the learned NULL vector
/// in front, so row k carries only information from tokens before k.
pub fn shift_with_null(tape: &mut Tape, bound: &BoundModel, token_vecs: TensorId) -> Result<TensorId> {
    tape.shift_with_null(token_vecs, bound.null_vector)
}

/// Contextualize (shifted) token vectors with the token-model stack.
pub fn token_model_forward(
    tape: &mut Tape,
    bound: &BoundModel,
    cfg: &ModelConfig,
    shifted: TensorId,
) -> Result<TensorId> {
    stack_forward(tape, &bound.token_model, cfg, shifted)
}

/// Position-by-position description of an up-sampled sequence.
#[derive(Debug, Clone)]
pub struct UpsampleLayout {
    /// For each up-sampled position: char/EOT kind plus the token-context
    /// row added to it.
    pub plan: Vec<UpsampledPos>,
    /// Raw character index whose position embedding each EOT slot reuses
    /// (the character preceding the slot), one entry per token.
    pub eot_pos_index: Vec<usize>,
}

impl UpsampleLayout {
    /// Training layout: each token's characters followed by one EOT slot.
    /// The EOT slot after token k receives the next token's context; the
    /// final slot repeats the last context row (its target is masked).
    pub fn training(seg: &Segmentation) -> UpsampleLayout {
        let t = seg.num_tokens();
        let mut plan = Vec::with_capacity(seg.num_chars() + t);
        let mut eot_pos_index = Vec::with_capacity(t);
        for (k, &(s, e)) in seg.spans().iter().enumerate() {
            for i in s..=e {
                plan.push(UpsampledPos {
                    kind: UpsampledKind::Char(i),
                    source_token: k,
                });
            }
            plan.push(UpsampledPos {
                kind: UpsampledKind::Eot(k),
                source_token: (k + 1).min(t - 1),
            });
            eot_pos_index.push(e);
        }
        UpsampleLayout { plan, eot_pos_index }
    }

    pub fn len(&self) -> usize {
        self.plan.len()
    }

    pub fn is_empty(&self) -> bool {
        self.plan.is_empty()
    }
}

/// Broadcast token contexts back to character positions and inject EOT
/// slots: character i of token k becomes `char_embeds[i] + token_ctx[k]`,
/// and the slot after token k becomes `eot_embedding + pos[e_k] +
/// token_ctx[k+1]` (the next token's context, so the slot can predict that
/// token's first character).
pub fn upsample_with_eot(
    tape: &mut Tape,
    bound: &BoundModel,
    cfg: &ModelConfig,
    token_ctx: TensorId,
    layout: &UpsampleLayout,
    char_embeds: TensorId,
) -> Result<TensorId> {
    let t = layout.eot_pos_index.len();
    let eot_rows: Vec<usize> = vec![cfg.eot_id(); t];
    let eot_embed = tape.gather_rows(bound.char_embeddings, &eot_rows)?;
    let eot_pos = tape.gather_rows(bound.pos_embeddings, &layout.eot_pos_index)?;
    let eots = tape.add(eot_embed, eot_pos)?;
    tape.upsample(char_embeds, eots, token_ctx, &layout.plan)
}

/// Run the character decoder over the up-sampled sequence and project to
/// `char_vocab_size + 1` logits.
pub fn decoder_forward(
    tape: &mut Tape,
    bound: &BoundModel,
    cfg: &ModelConfig,
    ups: TensorId,
) -> Result<TensorId> {
    let dec = stack_forward(tape, &bound.decoder, cfg, ups)?;
    let logits = tape.matmul(dec, bound.lm_head_w)?;
    tape.add_bias_row(logits, bound.lm_head_b)
}

/// Everything a full forward pass produces, with values still on the tape.
pub struct ForwardPass {
    /// (L + T) x (char_vocab_size + 1) logits.
    pub logits: TensorId,
    /// Soft boundary probabilities, one per character position.
    pub boundary_probs: TensorId,
    pub segmentation: Segmentation,
    pub layout: UpsampleLayout,
    pub shortening_factor: f64,
    /// Captured straight-through decisions (train mode), for the
    /// gradient-check replay.
    pub frozen_boundaries: Option<FrozenBoundaries>,
}

fn forward_impl(
    tape: &mut Tape,
    bound: &BoundModel,
    cfg: &ModelConfig,
    ids: &[u8],
    rng: &mut RngState,
    mode: Mode,
    replay: Option<&FrozenBoundaries>,
) -> Result<ForwardPass> {
    if ids.is_empty() {
        return Err(Error::InvalidArgument("forward of empty sequence".into()));
    }
    let embeds = embed_chars(tape, bound, cfg, ids)?;
    let ctx = tokenizer_forward(tape, bound, cfg, embeds)?;
    let decision = decide_boundaries(tape, bound, cfg, ctx, rng, mode, replay)?;
    let segmentation = decision.segmentation;
    // Training pools through the straight-through gates so the prediction
    // loss reaches the boundary scorer; values equal the plain span means.
    let pooled = match decision.gate {
        Some(gate) => tape.segment_mean_gated(ctx, gate, segmentation.spans())?,
        None => tape.segment_mean(ctx, segmentation.spans())?,
    };
    let shifted = shift_with_null(tape, bound, pooled)?;
    let token_ctx = token_model_forward(tape, bound, cfg, shifted)?;
    let layout = UpsampleLayout::training(&segmentation);
    let ups = upsample_with_eot(tape, bound, cfg, token_ctx, &layout, embeds)?;
    let logits = decoder_forward(tape, bound, cfg, ups)?;
    let shortening_factor = segmentation.shortening_factor();
    Ok(ForwardPass {
        logits,
        boundary_probs: decision.probs,
        segmentation,
        layout,
        shortening_factor,
        frozen_boundaries: decision.frozen,
    })
}

/// Full differentiable forward pass.
pub fn forward(
    tape: &mut Tape,
    bound: &BoundModel,
    cfg: &ModelConfig,
    ids: &[u8],
    rng: &mut RngState,
    mode: Mode,
) -> Result<ForwardPass> {
    forward_impl(tape, bound, cfg, ids, rng, mode, None)
}

/// Training-mode forward with boundary decisions replayed from a captured
/// pass. With the same rng seed this reproduces the original pass exactly
/// at the capture point while staying smooth in the parameters, which is
/// what central differences need to verify straight-through gradients.
pub fn forward_frozen(
    tape: &mut Tape,
    bound: &BoundModel,
    cfg: &ModelConfig,
    ids: &[u8],
    rng: &mut RngState,
    frozen: &FrozenBoundaries,
) -> Result<ForwardPass> {
    forward_impl(tape, bound, cfg, ids, rng, Mode::Train, Some(frozen))
}

/// Labels aligned with the training up-sampled layout.
///
/// The position holding character i targets character i+1 within its token,
/// or EOT at a span end; the EOT slot after token k targets the first
/// character of token k+1. The final EOT slot has nothing to predict and is
/// masked. Exactly L + T - 1 positions end up unmasked.
pub fn build_targets(ids: &[u8], seg: &Segmentation, eot_id: usize) -> (Vec<usize>, Vec<bool>) {
    let spans = seg.spans();
    let t = spans.len();
    let mut targets = Vec::with_capacity(ids.len() + t);
    let mut mask = Vec::with_capacity(ids.len() + t);
    for (k, &(s, e)) in spans.iter().enumerate() {
        for i in s..=e {
            if i < e {
                targets.push(ids[i + 1] as usize);
            } else {
                targets.push(eot_id);
            }
            mask.push(true);
        }
        if k + 1 < t {
            targets.push(ids[spans[k + 1].0] as usize);
            mask.push(true);
        } else {
            targets.push(0);
            mask.push(false);
        }
    }
    (targets, mask)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ToucanModel;
    use crate::numerics::Tape;

    fn tiny_model(seed: u64) -> ToucanModel {
        let mut rng = RngState::new(seed);
        let cfg = ModelConfig {
            char_vocab_size: 27,
            d_model: 16,
            n_heads: 2,
            layers: (1, 1, 1),
            max_seq_len: 32,
            ..ModelConfig::default()
        };
        ToucanModel::new(cfg, &mut rng).unwrap()
    }

    #[test]
    fn embed_chars_empty_and_lookup() {
        let model = tiny_model(0);
        let mut tape = Tape::new();
        let bound = BoundModel::bind(&mut tape, &model);
        let e = embed_chars(&mut tape, &bound, &model.config, &[]).unwrap();
        assert_eq!(tape.shape(e), &[0, 16]);

        let e2 = embed_chars(&mut tape, &bound, &model.config, &[3, 3]).unwrap();
        let v = tape.value(e2);
        // Same character at two positions differs only by position encoding.
        let emb = model.char_embeddings.data();
        let pos = model.pos_embeddings.data();
        for j in 0..16 {
            assert_eq!(v[j], emb[3 * 16 + j] + pos[j]);
            assert_eq!(v[16 + j], emb[3 * 16 + j] + pos[16 + j]);
        }
    }

    #[test]
    fn embed_rejects_eot_and_overflow() {
        let model = tiny_model(0);
        let mut tape = Tape::new();
        let bound = BoundModel::bind(&mut tape, &model);
        assert!(embed_chars(&mut tape, &bound, &model.config, &[27]).is_err());
        let long = vec![0u8; 33];
        assert!(embed_chars(&mut tape, &bound, &model.config, &long).is_err());
    }

    #[test]
    fn tokenizer_prefix_stability() {
        // Appending a character must not change earlier rows (causal mask).
        let model = tiny_model(1);
        let run = |ids: &[u8]| {
            let mut tape = Tape::new();
            let bound = BoundModel::bind(&mut tape, &model);
            let e = embed_chars(&mut tape, &bound, &model.config, ids).unwrap();
            let ctx = tokenizer_forward(&mut tape, &bound, &model.config, e).unwrap();
            tape.value(ctx).to_vec()
        };
        let short = run(&[1, 2, 3, 4, 5]);
        let long = run(&[1, 2, 3, 4, 5, 6]);
        assert_eq!(short[..], long[..short.len()]);
    }

    #[test]
    fn tokenizer_perturbation_respects_causality() {
        let model = tiny_model(2);
        let base: Vec<u8> = vec![1, 2, 3, 4, 5, 6];
        let changed: Vec<u8> = vec![1, 2, 3, 4, 5, 9];
        let run = |ids: &[u8]| {
            let mut tape = Tape::new();
            let bound = BoundModel::bind(&mut tape, &model);
            let e = embed_chars(&mut tape, &bound, &model.config, ids).unwrap();
            let ctx = tokenizer_forward(&mut tape, &bound, &model.config, e).unwrap();
            tape.value(ctx).to_vec()
        };
        let a = run(&base);
        let b = run(&changed);
        // Row 3 is unchanged when position 5 is perturbed.
        assert_eq!(a[3 * 16..4 * 16], b[3 * 16..4 * 16]);
        assert_ne!(a[5 * 16..], b[5 * 16..]);
    }

    #[test]
    fn boundaries_extreme_logits() {
        let mut model = tiny_model(3);
        // Saturate the scorer bias so every logit is far negative.
        model.boundary_mlp.w1.data_mut().fill(0.0);
        model.boundary_mlp.w2.data_mut().fill(0.0);
        model.boundary_mlp.b2.data_mut()[0] = -1e6;
        let mut tape = Tape::new();
        let bound = BoundModel::bind(&mut tape, &model);
        let mut rng = RngState::new(0);
        let e = embed_chars(&mut tape, &bound, &model.config, &[1, 2, 3, 4]).unwrap();
        let ctx = tokenizer_forward(&mut tape, &bound, &model.config, e).unwrap();
        let (_, seg) =
            predict_boundaries(&mut tape, &bound, &model.config, ctx, &mut rng, Mode::Train)
                .unwrap();
        assert_eq!(seg.spans(), &[(0, 3)]);
        assert_eq!(seg.shortening_factor(), 4.0);

        model.boundary_mlp.b2.data_mut()[0] = 1e6;
        let mut tape = Tape::new();
        let bound = BoundModel::bind(&mut tape, &model);
        let e = embed_chars(&mut tape, &bound, &model.config, &[1, 2, 3, 4]).unwrap();
        let ctx = tokenizer_forward(&mut tape, &bound, &model.config, e).unwrap();
        let (_, seg) =
            predict_boundaries(&mut tape, &bound, &model.config, ctx, &mut rng, Mode::Train)
                .unwrap();
        assert_eq!(seg.num_tokens(), 4);
        assert_eq!(seg.shortening_factor(), 1.0);
    }

    #[test]
    fn eval_boundaries_ignore_rng() {
        let model = tiny_model(4);
        let run = |seed: u64| {
            let mut tape = Tape::new();
            let bound = BoundModel::bind(&mut tape, &model);
            let mut rng = RngState::new(seed);
            let out = forward(
                &mut tape,
                &bound,
                &model.config,
                &[5, 6, 7, 8, 9, 10],
                &mut rng,
                Mode::Eval,
            )
            .unwrap();
            out.segmentation
        };
        assert_eq!(run(1), run(999));
    }

    #[test]
    fn pool_and_shift_examples() {
        let mut tape = Tape::new();
        // Identical rows pool to the same vector; singleton spans are identity.
        let x = tape.constant(vec![2, 3], vec![1.0, 0.0, 2.0, 0.0, 1.0, 2.0]);
        let seg = Segmentation::from_spans(vec![(0, 1)]).unwrap();
        let pooled = pool_segments(&mut tape, x, &seg).unwrap();
        assert_eq!(tape.value(pooled), &[0.5, 0.5, 2.0]);

        let model = tiny_model(5);
        let mut tape = Tape::new();
        let bound = BoundModel::bind(&mut tape, &model);
        let tv = tape.constant(vec![3, 16], (0..48).map(|i| i as f64).collect());
        let shifted = shift_with_null(&mut tape, &bound, tv).unwrap();
        assert_eq!(&tape.value(shifted)[0..16], model.null_vector.data());
        assert_eq!(tape.value(shifted)[32..48], tape.value(tv)[16..32]);
    }

    #[test]
    fn training_layout_matches_construction_rule() {
        // Two tokens (0,0) and (1,2): char0, eot(0), char1, char2, eot(1).
        let seg = Segmentation::from_spans(vec![(0, 0), (1, 2)]).unwrap();
        let layout = UpsampleLayout::training(&seg);
        assert_eq!(layout.len(), 5);
        assert_eq!(
            layout.plan[0],
            UpsampledPos { kind: UpsampledKind::Char(0), source_token: 0 }
        );
        assert_eq!(
            layout.plan[1],
            UpsampledPos { kind: UpsampledKind::Eot(0), source_token: 1 }
        );
        assert_eq!(
            layout.plan[2],
            UpsampledPos { kind: UpsampledKind::Char(1), source_token: 1 }
        );
        assert_eq!(
            layout.plan[3],
            UpsampledPos { kind: UpsampledKind::Char(2), source_token: 1 }
        );
        // Final EOT repeats the last context row.
        assert_eq!(
            layout.plan[4],
            UpsampledPos { kind: UpsampledKind::Eot(1), source_token: 1 }
        );
        assert_eq!(layout.eot_pos_index, vec![0, 2]);
    }

    #[test]
    fn upsample_zero_ctx_is_raw_embedding_residual() {
        let model = tiny_model(6);
        let mut tape = Tape::new();
        let bound = BoundModel::bind(&mut tape, &model);
        let ids = [1u8, 2, 3];
        let e = embed_chars(&mut tape, &bound, &model.config, &ids).unwrap();
        let seg = Segmentation::from_spans(vec![(0, 2)]).unwrap();
        let layout = UpsampleLayout::training(&seg);
        let zero_ctx = tape.constant(vec![1, 16], vec![0.0; 16]);
        let ups =
            upsample_with_eot(&mut tape, &bound, &model.config, zero_ctx, &layout, e).unwrap();
        // L=3 chars in one token: up-sampled length 4.
        assert_eq!(tape.shape(ups), &[4, 16]);
        assert_eq!(tape.value(ups)[0..48], tape.value(e)[..]);
    }

    #[test]
    fn decoder_logit_width_is_vocab_plus_one() {
        let model = tiny_model(7);
        let mut tape = Tape::new();
        let bound = BoundModel::bind(&mut tape, &model);
        let mut rng = RngState::new(0);
        let out = forward(
            &mut tape,
            &bound,
            &model.config,
            &[0, 1, 2, 3, 4],
            &mut rng,
            Mode::Eval,
        )
        .unwrap();
        let shape = tape.shape(out.logits);
        assert_eq!(shape[1], 28);
        assert_eq!(
            shape[0],
            5 + out.segmentation.num_tokens()
        );
    }

    #[test]
    fn build_targets_single_token() {
        // "ab" in one token: a targets b, b targets EOT, final slot masked.
        let seg = Segmentation::from_spans(vec![(0, 1)]).unwrap();
        let (targets, mask) = build_targets(&[0, 1], &seg, 27);
        assert_eq!(targets[..2], [1, 27]);
        assert_eq!(mask, vec![true, true, false]);
    }

    #[test]
    fn build_targets_two_singletons() {
        let seg = Segmentation::from_spans(vec![(0, 0), (1, 1)]).unwrap();
        let (targets, mask) = build_targets(&[0, 1], &seg, 27);
        // a->EOT, eot(0)->b, b->EOT, eot(1) masked.
        assert_eq!(targets[..3], [27, 1, 27]);
        assert_eq!(mask, vec![true, true, true, false]);
    }

    #[test]
    fn build_targets_unmasked_count() {
        let ids: Vec<u8> = (0..12).map(|i| (i % 26) as u8).collect();
        for flags in [
            vec![false; 12],
            vec![true; 12],
            (0..12).map(|i| i % 3 == 0).collect::<Vec<bool>>(),
        ] {
            let seg = Segmentation::from_boundaries(&flags);
            let (_, mask) = build_targets(&ids, &seg, 27);
            let unmasked = mask.iter().filter(|&&m| m).count();
            assert_eq!(unmasked, 12 + seg.num_tokens() - 1);
        }
    }
}
