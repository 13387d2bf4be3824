//! The token-aware character model: tokenizer stack, boundary predictor,
//! dynamic pooling with a NULL-vector offset, token model, end-of-token
//! up-sampling, and the character decoder with an embedding-layer residual.

pub mod checkpoint;
pub mod config;
pub mod forward;
pub mod inference;
pub mod segmentation;
pub mod verify;

pub use config::ModelConfig;
pub use forward::{
    build_targets, forward, forward_frozen, BoundModel, ForwardPass, FrozenBoundaries,
    UpsampleLayout,
};
pub use segmentation::Segmentation;

use crate::numerics::{RngState, Tensor};

/// Layer-norm epsilon used by every normalization in the model.
pub const LN_EPS: f64 = 1e-5;

/// Whether a forward pass samples boundaries (train) or thresholds them
/// deterministically (eval).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Parameters of one pre-norm transformer layer.
#[derive(Debug, Clone)]
pub struct LayerParams {
    pub ln1_gain: Tensor,
    pub ln1_bias: Tensor,
    pub w_q: Tensor,
    pub b_q: Tensor,
    pub w_k: Tensor,
    pub b_k: Tensor,
    pub w_v: Tensor,
    pub b_v: Tensor,
    pub w_o: Tensor,
    pub b_o: Tensor,
    pub ln2_gain: Tensor,
    pub ln2_bias: Tensor,
    pub w_ff1: Tensor,
    pub b_ff1: Tensor,
    pub w_ff2: Tensor,
    pub b_ff2: Tensor,
}

impl LayerParams {
    fn new(d: usize, n_layers: usize, rng: &mut RngState) -> Self {
        let std = 0.02;
        // Residual-branch output projections are scaled down with depth.
        let out_std = std / (2.0 * n_layers as f64).sqrt();
        LayerParams {
            ln1_gain: Tensor::param_ones(vec![d]),
            ln1_bias: Tensor::param_zeros(vec![d]),
            w_q: Tensor::randn(vec![d, d], std, rng),
            b_q: Tensor::param_zeros(vec![d]),
            w_k: Tensor::randn(vec![d, d], std, rng),
            b_k: Tensor::param_zeros(vec![d]),
            w_v: Tensor::randn(vec![d, d], std, rng),
            b_v: Tensor::param_zeros(vec![d]),
            w_o: Tensor::randn(vec![d, d], out_std, rng),
            b_o: Tensor::param_zeros(vec![d]),
            ln2_gain: Tensor::param_ones(vec![d]),
            ln2_bias: Tensor::param_zeros(vec![d]),
            w_ff1: Tensor::randn(vec![d, 4 * d], std, rng),
            b_ff1: Tensor::param_zeros(vec![4 * d]),
            w_ff2: Tensor::randn(vec![4 * d, d], out_std, rng),
            b_ff2: Tensor::param_zeros(vec![d]),
        }
    }
}

/// A stack of causal transformer layers with a final layer norm.
#[derive(Debug, Clone)]
pub struct StackParams {
    pub layers: Vec<LayerParams>,
    pub ln_f_gain: Tensor,
    pub ln_f_bias: Tensor,
}

impl StackParams {
    fn new(d: usize, n_layers: usize, rng: &mut RngState) -> Self {
        StackParams {
            layers: (0..n_layers)
                .map(|_| LayerParams::new(d, n_layers, rng))
                .collect(),
            ln_f_gain: Tensor::param_ones(vec![d]),
            ln_f_bias: Tensor::param_zeros(vec![d]),
        }
    }
}

/// Per-position feed-forward boundary scorer: d -> d -> 1 with GELU.
#[derive(Debug, Clone)]
pub struct BoundaryMlp {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

/// All learned parameters plus the layer configuration.
#[derive(Debug, Clone)]
pub struct ToucanModel {
    pub config: ModelConfig,
    /// (char_vocab_size + 1) x d; the last row is the learned EOT embedding.
    pub char_embeddings: Tensor,
    /// max_seq_len x d learned absolute position table.
    pub pos_embeddings: Tensor,
    pub tokenizer: StackParams,
    pub token_model: StackParams,
    pub decoder: StackParams,
    pub boundary_mlp: BoundaryMlp,
    pub null_vector: Tensor,
    pub lm_head_w: Tensor,
    pub lm_head_b: Tensor,
}

impl ToucanModel {
    pub fn new(config: ModelConfig, rng: &mut RngState) -> crate::Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let (a, b, c) = config.layers;
        let std = 0.02;
        // Starting the boundary bias at the prior's log-odds makes the
        // initial sampled boundary rate equal the prior in expectation.
        let prior_logit = (config.boundary_prior / (1.0 - config.boundary_prior)).ln();
        let mut b2 = Tensor::param_zeros(vec![1]);
        b2.data_mut()[0] = prior_logit;
        // The scorer reads unit-scale (layer-normed) features; 1/sqrt(d)
        // keeps its initial logits at O(1) spread so positions are
        // distinguishable from the first step.
        let mlp_std = 1.0 / (d as f64).sqrt();
        Ok(ToucanModel {
            char_embeddings: Tensor::randn(vec![config.logit_width(), d], std, rng),
            pos_embeddings: Tensor::randn(vec![config.max_seq_len, d], std, rng),
            tokenizer: StackParams::new(d, a, rng),
            token_model: StackParams::new(d, b, rng),
            decoder: StackParams::new(d, c, rng),
            boundary_mlp: BoundaryMlp {
                w1: Tensor::randn(vec![d, d], mlp_std, rng),
                b1: Tensor::param_zeros(vec![d]),
                w2: Tensor::randn(vec![d, 1], mlp_std, rng),
                b2,
            },
            null_vector: Tensor::randn(vec![d], std, rng),
            // Zero head: an untrained model predicts the uniform distribution.
            lm_head_w: Tensor::param_zeros(vec![d, config.logit_width()]),
            lm_head_b: Tensor::param_zeros(vec![config.logit_width()]),
            config,
        })
    }

    /// Visit every parameter in the fixed serialization order.
    pub fn visit_params(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = Vec::new();
        out.push(("char_embeddings".to_string(), &self.char_embeddings));
        out.push(("pos_embeddings".to_string(), &self.pos_embeddings));
        for (stack_name, stack) in [
            ("tokenizer", &self.tokenizer),
            ("token_model", &self.token_model),
            ("decoder", &self.decoder),
        ] {
            for (i, layer) in stack.layers.iter().enumerate() {
                let p = |f: &str| format!("{stack_name}.{i}.{f}");
                out.push((p("ln1_gain"), &layer.ln1_gain));
                out.push((p("ln1_bias"), &layer.ln1_bias));
                out.push((p("w_q"), &layer.w_q));
                out.push((p("b_q"), &layer.b_q));
                out.push((p("w_k"), &layer.w_k));
                out.push((p("b_k"), &layer.b_k));
                out.push((p("w_v"), &layer.w_v));
                out.push((p("b_v"), &layer.b_v));
                out.push((p("w_o"), &layer.w_o));
                out.push((p("b_o"), &layer.b_o));
                out.push((p("ln2_gain"), &layer.ln2_gain));
                out.push((p("ln2_bias"), &layer.ln2_bias));
                out.push((p("w_ff1"), &layer.w_ff1));
                out.push((p("b_ff1"), &layer.b_ff1));
                out.push((p("w_ff2"), &layer.w_ff2));
                out.push((p("b_ff2"), &layer.b_ff2));
            }
            out.push((format!("{stack_name}.ln_f_gain"), &stack.ln_f_gain));
            out.push((format!("{stack_name}.ln_f_bias"), &stack.ln_f_bias));
        }
        out.push(("boundary_mlp.w1".to_string(), &self.boundary_mlp.w1));
        out.push(("boundary_mlp.b1".to_string(), &self.boundary_mlp.b1));
        out.push(("boundary_mlp.w2".to_string(), &self.boundary_mlp.w2));
        out.push(("boundary_mlp.b2".to_string(), &self.boundary_mlp.b2));
        out.push(("null_vector".to_string(), &self.null_vector));
        out.push(("lm_head_w".to_string(), &self.lm_head_w));
        out.push(("lm_head_b".to_string(), &self.lm_head_b));
        out
    }

    /// Mutable variant of [`Self::visit_params`], same order.
    pub fn visit_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> = Vec::new();
        out.push(("char_embeddings".to_string(), &mut self.char_embeddings));
        out.push(("pos_embeddings".to_string(), &mut self.pos_embeddings));
        for (stack_name, stack) in [
            ("tokenizer", &mut self.tokenizer),
            ("token_model", &mut self.token_model),
            ("decoder", &mut self.decoder),
        ] {
            for (i, layer) in stack.layers.iter_mut().enumerate() {
                let p = |f: &str| format!("{stack_name}.{i}.{f}");
                out.push((p("ln1_gain"), &mut layer.ln1_gain));
                out.push((p("ln1_bias"), &mut layer.ln1_bias));
                out.push((p("w_q"), &mut layer.w_q));
                out.push((p("b_q"), &mut layer.b_q));
                out.push((p("w_k"), &mut layer.w_k));
                out.push((p("b_k"), &mut layer.b_k));
                out.push((p("w_v"), &mut layer.w_v));
                out.push((p("b_v"), &mut layer.b_v));
                out.push((p("w_o"), &mut layer.w_o));
                out.push((p("b_o"), &mut layer.b_o));
                out.push((p("ln2_gain"), &mut layer.ln2_gain));
                out.push((p("ln2_bias"), &mut layer.ln2_bias));
                out.push((p("w_ff1"), &mut layer.w_ff1));
                out.push((p("b_ff1"), &mut layer.b_ff1));
                out.push((p("w_ff2"), &mut layer.w_ff2));
                out.push((p("b_ff2"), &mut layer.b_ff2));
            }
            out.push((format!("{stack_name}.ln_f_gain"), &mut stack.ln_f_gain));
            out.push((format!("{stack_name}.ln_f_bias"), &mut stack.ln_f_bias));
        }
        out.push(("boundary_mlp.w1".to_string(), &mut self.boundary_mlp.w1));
        out.push(("boundary_mlp.b1".to_string(), &mut self.boundary_mlp.b1));
        out.push(("boundary_mlp.w2".to_string(), &mut self.boundary_mlp.w2));
        out.push(("boundary_mlp.b2".to_string(), &mut self.boundary_mlp.b2));
        out.push(("null_vector".to_string(), &mut self.null_vector));
        out.push(("lm_head_w".to_string(), &mut self.lm_head_w));
        out.push(("lm_head_b".to_string(), &mut self.lm_head_b));
        out
    }

    pub fn param_count(&self) -> usize {
        self.visit_params().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn zero_grads(&mut self) {
        for (_, t) in self.visit_params_mut() {
            t.zero_grad();
        }
    }

    /// Re-draw every parameter from N(0, std^2). Used by tests and the
    /// decode-equivalence harness, which exercise arbitrary weights
    /// (including a non-degenerate output head).
    pub fn randomize(&mut self, std: f64, rng: &mut RngState) {
        for (_, t) in self.visit_params_mut() {
            for v in t.data_mut() {
                *v = rng.normal() * std;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn visit_orders_agree() {
        let mut rng = RngState::new(0);
        let cfg = ModelConfig {
            d_model: 16,
            n_heads: 2,
            max_seq_len: 32,
            ..ModelConfig::default()
        };
        let mut model = ToucanModel::new(cfg, &mut rng).unwrap();
        let names: Vec<String> = model.visit_params().iter().map(|(n, _)| n.clone()).collect();
        let names_mut: Vec<String> = model
            .visit_params_mut()
            .iter()
            .map(|(n, _)| n.clone())
            .collect();
        assert_eq!(names, names_mut);
        // (2,8,2) layers, 16 tensors each, plus stack norms, embeddings,
        // boundary mlp, null vector, and the head.
        assert_eq!(names.len(), 12 * 16 + 6 + 2 + 4 + 1 + 2);
    }

    #[test]
    fn vocabulary_has_one_extra_symbol() {
        let mut rng = RngState::new(1);
        let cfg = ModelConfig {
            d_model: 8,
            n_heads: 2,
            max_seq_len: 16,
            ..ModelConfig::default()
        };
        let model = ToucanModel::new(cfg, &mut rng).unwrap();
        assert_eq!(model.char_embeddings.shape()[0], 28);
        assert_eq!(model.lm_head_w.shape()[1], 28);
    }
}
