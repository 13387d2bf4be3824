//! End-to-end gradient verification for the full training loss.
//!
//! The training forward is stochastic (gumbel noise) and discrete (sampled
//! token boundaries). Central differences therefore check the gradient of a
//! replayed pass: identical noise (same seed) and the captured boundary
//! decisions relaxed smoothly around the sample point (`forward_frozen`).
//! At the capture point that replay is bit-identical to the original pass,
//! and its gradient is exactly what the tape computes — including the
//! straight-through path from the prediction loss into the boundary scorer.

use crate::error::Result;
use crate::model::forward::{forward, forward_frozen, build_targets, BoundModel, FrozenBoundaries};
use crate::model::{Mode, ToucanModel};
use crate::numerics::gradcheck::{rel_err, sample_indices, FD_STEP};
use crate::numerics::{RngState, Tape};

/// Worst relative error per parameter tensor.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub worst: f64,
    pub per_param: Vec<(String, f64)>,
}

fn surrogate_loss(
    model: &ToucanModel,
    ids: &[u8],
    noise_seed: u64,
    frozen: &FrozenBoundaries,
) -> f64 {
    let mut tape = Tape::new();
    let bound = BoundModel::bind(&mut tape, model);
    let mut rng = RngState::new(noise_seed);
    let pass = forward_frozen(&mut tape, &bound, &model.config, ids, &mut rng, frozen)
        .expect("replay of a pass that already succeeded");
    let (targets, mask) = build_targets(ids, &pass.segmentation, model.config.eot_id());
    let ce = tape
        .cross_entropy_bits(pass.logits, &targets, &mask)
        .expect("targets built from the same segmentation");
    let prior = tape
        .prior_kl_bits(pass.boundary_probs, model.config.boundary_prior)
        .expect("prior validated by the model config");
    let weighted = tape.scale(prior, model.config.prior_loss_weight);
    let loss = tape.add(ce, weighted).expect("scalar add");
    tape.scalar(loss)
}

/// Check every parameter tensor of the end-to-end training loss against
/// central differences. `entries_per_tensor` entries of each tensor are
/// perturbed (all of them when the tensor is small).
pub fn end_to_end_grad_check(
    model: &mut ToucanModel,
    ids: &[u8],
    noise_seed: u64,
    entries_per_tensor: usize,
) -> Result<GradCheckReport> {
    // Center pass: capture analytic gradients and the boundary decisions.
    let (analytic, frozen, center_loss) = {
        let mut tape = Tape::new();
        let bound = BoundModel::bind(&mut tape, model);
        let mut rng = RngState::new(noise_seed);
        let pass = forward(&mut tape, &bound, &model.config, ids, &mut rng, Mode::Train)?;
        let (targets, mask) = build_targets(ids, &pass.segmentation, model.config.eot_id());
        let ce = tape.cross_entropy_bits(pass.logits, &targets, &mask)?;
        let prior = tape.prior_kl_bits(pass.boundary_probs, model.config.boundary_prior)?;
        let weighted = tape.scale(prior, model.config.prior_loss_weight);
        let loss = tape.add(ce, weighted)?;
        let mut grads = tape.backward(loss)?;
        let analytic: Vec<Vec<f64>> = bound
            .ids_in_order
            .iter()
            .map(|&id| grads.take(id).unwrap_or_default())
            .collect();
        (
            analytic,
            pass.frozen_boundaries.expect("train pass captures decisions"),
            tape.scalar(loss),
        )
    };
    // The frozen replay must pass through the same point exactly.
    let replay_loss = surrogate_loss(model, ids, noise_seed, &frozen);
    assert_eq!(
        center_loss.to_bits(),
        replay_loss.to_bits(),
        "frozen replay diverged from the captured pass"
    );

    let names: Vec<String> = model.visit_params().iter().map(|(n, _)| n.clone()).collect();
    let mut per_param = Vec::with_capacity(names.len());
    let mut worst: f64 = 0.0;
    for (slot, name) in names.iter().enumerate() {
        let len = model.visit_params()[slot].1.len();
        let indices = sample_indices(len, entries_per_tensor);
        let mut tensor_worst: f64 = 0.0;
        for &i in &indices {
            let saved = model.visit_params_mut()[slot].1.data()[i];
            model.visit_params_mut()[slot].1.data_mut()[i] = saved + FD_STEP;
            let up = surrogate_loss(model, ids, noise_seed, &frozen);
            model.visit_params_mut()[slot].1.data_mut()[i] = saved - FD_STEP;
            let down = surrogate_loss(model, ids, noise_seed, &frozen);
            model.visit_params_mut()[slot].1.data_mut()[i] = saved;
            let numeric = (up - down) / (2.0 * FD_STEP);
            let a = analytic[slot].get(i).copied().unwrap_or(0.0);
            tensor_worst = tensor_worst.max(rel_err(a, numeric));
        }
        worst = worst.max(tensor_worst);
        per_param.push((name.clone(), tensor_worst));
    }
    Ok(GradCheckReport { worst, per_param })
}
