//! Adam with linear warmup and global-norm gradient clipping.

use crate::model::ToucanModel;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Adam state aligned with the model's fixed parameter order.
pub struct Adam {
    pub learning_rate: f64,
    pub warmup_steps: usize,
    step: usize,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(model: &ToucanModel, learning_rate: f64, warmup_steps: usize) -> Self {
        let sizes: Vec<usize> = model.visit_params().iter().map(|(_, t)| t.len()).collect();
        Adam {
            learning_rate,
            warmup_steps,
            step: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    /// Effective learning rate for the next step: linear warmup, then flat.
    pub fn next_lr(&self) -> f64 {
        if self.warmup_steps == 0 {
            self.learning_rate
        } else {
            let t = (self.step + 1) as f64;
            self.learning_rate * (t / self.warmup_steps as f64).min(1.0)
        }
    }

    /// Apply one update from the gradients stored on the parameters.
    /// Parameters without a gradient are left untouched.
    pub fn apply(&mut self, model: &mut ToucanModel) {
        let lr = self.next_lr();
        self.step += 1;
        let t = self.step as f64;
        let bc1 = 1.0 - ADAM_BETA1.powf(t);
        let bc2 = 1.0 - ADAM_BETA2.powf(t);
        for (slot, (_, param)) in model.visit_params_mut().into_iter().enumerate() {
            let Some(grad) = param.grad.as_ref() else { continue };
            let m = &mut self.m[slot];
            let v = &mut self.v[slot];
            let g = grad.clone();
            let data = param.data_mut();
            for i in 0..data.len() {
                m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * g[i];
                v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * g[i] * g[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                data[i] -= lr * mhat / (vhat.sqrt() + ADAM_EPS);
            }
        }
    }
}

/// Scale all gradients so the global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(model: &mut ToucanModel, max_norm: f64) -> f64 {
    let mut sq = 0.0;
    for (_, t) in model.visit_params() {
        if let Some(g) = t.grad.as_ref() {
            for &v in g {
                sq += v * v;
            }
        }
    }
    let norm = sq.sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = max_norm / norm;
        for (_, t) in model.visit_params_mut() {
            if let Some(g) = t.grad.as_mut() {
                for v in g.iter_mut() {
                    *v *= scale;
                }
            }
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::numerics::RngState;

    fn tiny() -> ToucanModel {
        let mut rng = RngState::new(0);
        let cfg = ModelConfig {
            d_model: 8,
            n_heads: 2,
            layers: (1, 1, 1),
            max_seq_len: 16,
            ..ModelConfig::default()
        };
        ToucanModel::new(cfg, &mut rng).unwrap()
    }

    #[test]
    fn clipping_contract() {
        let mut model = tiny();
        for (_, t) in model.visit_params_mut() {
            let n = t.len();
            t.grad = Some(vec![1.0; n]);
        }
        let before = clip_global_norm(&mut model, 1.0);
        assert!(before > 1.0);
        let mut sq = 0.0;
        for (_, t) in model.visit_params() {
            for &v in t.grad.as_ref().unwrap() {
                sq += v * v;
            }
        }
        assert!(sq.sqrt() <= 1.0 + 1e-9);
    }

    #[test]
    fn warmup_ramps_linearly() {
        let model = tiny();
        let mut opt = Adam::new(&model, 1e-3, 10);
        assert!((opt.next_lr() - 1e-4).abs() < 1e-12);
        let mut m = tiny();
        for _ in 0..10 {
            opt.apply(&mut m);
        }
        assert!((opt.next_lr() - 1e-3).abs() < 1e-12);
    }

    #[test]
    fn adam_moves_only_params_with_grads() {
        let mut model = tiny();
        let before = model.null_vector.data().to_vec();
        let emb_before = model.char_embeddings.data().to_vec();
        let n = model.null_vector.len();
        model.null_vector.grad = Some(vec![0.5; n]);
        let mut opt = Adam::new(&model, 1e-2, 0);
        opt.apply(&mut model);
        assert_ne!(model.null_vector.data(), &before[..]);
        assert_eq!(model.char_embeddings.data(), &emb_before[..]);
    }
}
