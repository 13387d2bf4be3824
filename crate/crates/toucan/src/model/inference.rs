//! Grad-free row-wise inference with per-layer key/value caches.
//!
//! Every computation here mirrors the tape path through the shared kernels
//! in `numerics::kernels`, with identical per-element accumulation order.
//! Appending rows one at a time therefore produces bit-identical values to a
//! full-matrix pass, which is what makes the incremental decoder provably
//! equivalent to full reprocessing. `tests` in `model::forward` and the
//! decode equivalence oracle both lean on this.

use crate::error::{Error, Result};
use crate::model::forward::UpsampleLayout;
use crate::model::{ModelConfig, Segmentation, StackParams, ToucanModel, LN_EPS};
use crate::numerics::kernels;
use crate::numerics::tape::UpsampledKind;

/// Cached keys and values for one layer, packed as consecutive d-wide rows.
struct LayerCache {
    k: Vec<f64>,
    v: Vec<f64>,
}

/// Key/value state for an incrementally-fed stack of layers.
pub struct StackCache {
    layers: Vec<LayerCache>,
    len: usize,
}

impl StackCache {
    pub fn new(stack: &StackParams) -> Self {
        StackCache {
            layers: stack
                .layers
                .iter()
                .map(|_| LayerCache {
                    k: Vec::new(),
                    v: Vec::new(),
                })
                .collect(),
            len: 0,
        }
    }

    /// Number of positions appended so far.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

fn row_affine(x: &[f64], w: &[f64], b: &[f64], n: usize) -> Vec<f64> {
    let k = x.len();
    let mut out = vec![0.0; n];
    kernels::matmul(x, w, &mut out, 1, k, n);
    for j in 0..n {
        out[j] += b[j];
    }
    out
}

/// Push one input row through every layer of a stack, extending the cache,
/// and return the post-final-norm output row.
pub fn stack_append_row(
    stack: &StackParams,
    cfg: &ModelConfig,
    cache: &mut StackCache,
    row: &[f64],
) -> Vec<f64> {
    let d = cfg.d_model;
    let hd = cfg.head_dim();
    let scale = 1.0 / (hd as f64).sqrt();
    let pos = cache.len;
    let mut x = row.to_vec();
    let mut xn = vec![0.0; d];
    for (layer, lc) in stack.layers.iter().zip(&mut cache.layers) {
        kernels::layer_norm_row(&x, layer.ln1_gain.data(), layer.ln1_bias.data(), LN_EPS, &mut xn);
        let q = row_affine(&xn, layer.w_q.data(), layer.b_q.data(), d);
        let k = row_affine(&xn, layer.w_k.data(), layer.b_k.data(), d);
        let v = row_affine(&xn, layer.w_v.data(), layer.b_v.data(), d);
        lc.k.extend_from_slice(&k);
        lc.v.extend_from_slice(&v);

        let mut cat = vec![0.0; d];
        let mut scores = vec![0.0; pos + 1];
        for h in 0..cfg.n_heads {
            let (from, to) = (h * hd, (h + 1) * hd);
            let qh = &q[from..to];
            for (j, s) in scores.iter_mut().enumerate() {
                *s = kernels::dot(qh, &lc.k[j * d + from..j * d + to]) * scale;
            }
            kernels::softmax_slice(&mut scores);
            let out_h = &mut cat[from..to];
            for (j, &p) in scores.iter().enumerate() {
                kernels::axpy(out_h, p, &lc.v[j * d + from..j * d + to]);
            }
        }
        let attn = row_affine(&cat, layer.w_o.data(), layer.b_o.data(), d);
        for j in 0..d {
            x[j] += attn[j];
        }

        kernels::layer_norm_row(&x, layer.ln2_gain.data(), layer.ln2_bias.data(), LN_EPS, &mut xn);
        let mut h1 = row_affine(&xn, layer.w_ff1.data(), layer.b_ff1.data(), 4 * d);
        for v in h1.iter_mut() {
            *v = kernels::gelu(*v);
        }
        let ff = row_affine(&h1, layer.w_ff2.data(), layer.b_ff2.data(), d);
        for j in 0..d {
            x[j] += ff[j];
        }
    }
    cache.len += 1;
    let mut out = vec![0.0; d];
    kernels::layer_norm_row(&x, stack.ln_f_gain.data(), stack.ln_f_bias.data(), LN_EPS, &mut out);
    out
}

/// Run a stack over all rows with a fresh cache (full reprocessing).
pub fn run_stack(stack: &StackParams, cfg: &ModelConfig, rows: &[f64]) -> Vec<f64> {
    let d = cfg.d_model;
    let n = rows.len() / d;
    let mut cache = StackCache::new(stack);
    let mut out = Vec::with_capacity(rows.len());
    for i in 0..n {
        out.extend(stack_append_row(stack, cfg, &mut cache, &rows[i * d..(i + 1) * d]));
    }
    out
}

/// Character embedding plus position embedding for one raw position.
pub fn embed_row(model: &ToucanModel, id: u8, pos: usize) -> Result<Vec<f64>> {
    let cfg = &model.config;
    let d = cfg.d_model;
    if id as usize >= cfg.char_vocab_size {
        return Err(Error::IndexOutOfRange {
            what: "character id",
            index: id as usize,
            bound: cfg.char_vocab_size,
        });
    }
    if pos >= cfg.max_seq_len {
        return Err(Error::Capacity {
            len: pos + 1,
            max: cfg.max_seq_len,
        });
    }
    let e = &model.char_embeddings.data()[id as usize * d..(id as usize + 1) * d];
    let p = &model.pos_embeddings.data()[pos * d..(pos + 1) * d];
    Ok(e.iter().zip(p).map(|(a, b)| a + b).collect())
}

/// EOT embedding reusing the position encoding of the preceding character.
pub fn eot_row(model: &ToucanModel, preceding_pos: usize) -> Result<Vec<f64>> {
    let cfg = &model.config;
    let d = cfg.d_model;
    if preceding_pos >= cfg.max_seq_len {
        return Err(Error::Capacity {
            len: preceding_pos + 1,
            max: cfg.max_seq_len,
        });
    }
    let e = &model.char_embeddings.data()[cfg.eot_id() * d..(cfg.eot_id() + 1) * d];
    let p = &model.pos_embeddings.data()[preceding_pos * d..(preceding_pos + 1) * d];
    Ok(e.iter().zip(p).map(|(a, b)| a + b).collect())
}

/// Boundary-scorer logit for one contextualized row.
pub fn boundary_logit(model: &ToucanModel, ctx_row: &[f64]) -> f64 {
    let d = model.config.d_model;
    let mut h = row_affine(
        ctx_row,
        model.boundary_mlp.w1.data(),
        model.boundary_mlp.b1.data(),
        d,
    );
    for v in h.iter_mut() {
        *v = kernels::gelu(*v);
    }
    kernels::dot(&h, model.boundary_mlp.w2.data()) + model.boundary_mlp.b2.data()[0]
}

/// Project one decoder output row to vocabulary logits.
pub fn lm_logits(model: &ToucanModel, dec_row: &[f64]) -> Vec<f64> {
    row_affine(
        dec_row,
        model.lm_head_w.data(),
        model.lm_head_b.data(),
        model.config.logit_width(),
    )
}

/// Mean of rows s..=e of a packed [n x d] buffer, matching the tape's
/// sum-then-scale order.
pub fn pool_span(rows: &[f64], d: usize, s: usize, e: usize) -> Vec<f64> {
    let mut out = vec![0.0; d];
    for i in s..=e {
        for (o, &v) in out.iter_mut().zip(&rows[i * d..(i + 1) * d]) {
            *o += v;
        }
    }
    let inv = 1.0 / (e - s + 1) as f64;
    for o in out.iter_mut() {
        *o *= inv;
    }
    out
}

/// Everything a deterministic (eval-mode) forward pass produces.
pub struct EvalOutput {
    /// (L + T) x logit_width, packed row-major.
    pub logits: Vec<f64>,
    pub segmentation: Segmentation,
    /// Noiseless sigmoid of each boundary logit.
    pub boundary_probs: Vec<f64>,
    pub layout: UpsampleLayout,
    pub shortening_factor: f64,
}

/// Deterministic full forward pass on the inference path. Bit-identical to
/// the tape path in eval mode.
pub fn eval_forward(model: &ToucanModel, ids: &[u8]) -> Result<EvalOutput> {
    if ids.is_empty() {
        return Err(Error::InvalidArgument("forward of empty sequence".into()));
    }
    let cfg = &model.config;
    let d = cfg.d_model;
    if ids.len() > cfg.max_seq_len {
        return Err(Error::Capacity {
            len: ids.len(),
            max: cfg.max_seq_len,
        });
    }
    let mut embeds = Vec::with_capacity(ids.len() * d);
    for (i, &id) in ids.iter().enumerate() {
        embeds.extend(embed_row(model, id, i)?);
    }
    let ctx = run_stack(&model.tokenizer, cfg, &embeds);

    let mut probs = Vec::with_capacity(ids.len());
    for i in 0..ids.len() {
        probs.push(kernels::sigmoid(boundary_logit(model, &ctx[i * d..(i + 1) * d])));
    }
    let flags: Vec<bool> = probs.iter().map(|&p| p > 0.5).collect();
    let segmentation = Segmentation::from_boundaries(&flags);

    let spans = segmentation.spans();
    let t = spans.len();
    let mut shifted = Vec::with_capacity(t * d);
    shifted.extend_from_slice(model.null_vector.data());
    for &(s, e) in &spans[..t - 1] {
        shifted.extend(pool_span(&ctx, d, s, e));
    }
    let token_ctx = run_stack(&model.token_model, cfg, &shifted);

    let layout = UpsampleLayout::training(&segmentation);
    let mut ups = Vec::with_capacity(layout.len() * d);
    for p in &layout.plan {
        let base = match p.kind {
            UpsampledKind::Char(i) => embeds[i * d..(i + 1) * d].to_vec(),
            UpsampledKind::Eot(k) => eot_row(model, layout.eot_pos_index[k])?,
        };
        let add = &token_ctx[p.source_token * d..(p.source_token + 1) * d];
        ups.extend(base.iter().zip(add).map(|(a, b)| a + b));
    }
    let dec = run_stack(&model.decoder, cfg, &ups);

    let width = cfg.logit_width();
    let mut logits = Vec::with_capacity(layout.len() * width);
    for i in 0..layout.len() {
        logits.extend(lm_logits(model, &dec[i * d..(i + 1) * d]));
    }
    let shortening_factor = segmentation.shortening_factor();
    Ok(EvalOutput {
        logits,
        segmentation,
        boundary_probs: probs,
        layout,
        shortening_factor,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::forward::{forward, BoundModel};
    use crate::model::Mode;
    use crate::numerics::{RngState, Tape};

    fn model_with(seed: u64, d: usize, heads: usize, layers: (usize, usize, usize)) -> ToucanModel {
        let mut rng = RngState::new(seed);
        let cfg = ModelConfig {
            char_vocab_size: 27,
            d_model: d,
            n_heads: heads,
            layers,
            max_seq_len: 64,
            ..ModelConfig::default()
        };
        let mut m = ToucanModel::new(cfg, &mut rng).unwrap();
        // Random head too, so logits are non-degenerate.
        m.randomize(0.05, &mut rng);
        m
    }

    #[test]
    fn eval_forward_matches_tape_bitwise() {
        for seed in 0..4u64 {
            let model = model_with(seed, 24, 3, (2, 2, 2));
            let ids: Vec<u8> = (0..17).map(|i| ((i * 7 + seed as usize) % 27) as u8).collect();

            let mut tape = Tape::new();
            let bound = BoundModel::bind(&mut tape, &model);
            let mut rng = RngState::new(0);
            let tp = forward(&mut tape, &bound, &model.config, &ids, &mut rng, Mode::Eval).unwrap();
            let inf = eval_forward(&model, &ids).unwrap();

            assert_eq!(tp.segmentation, inf.segmentation);
            let tape_logits = tape.value(tp.logits);
            assert_eq!(tape_logits.len(), inf.logits.len());
            for (a, b) in tape_logits.iter().zip(&inf.logits) {
                assert_eq!(a.to_bits(), b.to_bits(), "tape and inference diverge");
            }
            let tape_probs = tape.value(tp.boundary_probs);
            for (a, b) in tape_probs.iter().zip(&inf.boundary_probs) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }

    #[test]
    fn incremental_stack_matches_full_run() {
        let model = model_with(9, 16, 2, (1, 1, 2));
        let cfg = &model.config;
        let d = cfg.d_model;
        let rows: Vec<f64> = (0..10 * d).map(|i| ((i as f64) * 0.01).sin() * 0.3).collect();
        let full = run_stack(&model.decoder, cfg, &rows);

        let mut cache = StackCache::new(&model.decoder);
        for i in 0..10 {
            let out = stack_append_row(&model.decoder, cfg, &mut cache, &rows[i * d..(i + 1) * d]);
            for (a, b) in out.iter().zip(&full[i * d..(i + 1) * d]) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }

    #[test]
    fn decoder_prefix_stable_under_appends() {
        let model = model_with(4, 16, 2, (1, 1, 1));
        let cfg = &model.config;
        let d = cfg.d_model;
        let rows: Vec<f64> = (0..8 * d).map(|i| ((i as f64) * 0.02).cos()).collect();
        let short = run_stack(&model.decoder, cfg, &rows[..6 * d]);
        let long = run_stack(&model.decoder, cfg, &rows);
        assert_eq!(short[..], long[..6 * d]);
    }
}
