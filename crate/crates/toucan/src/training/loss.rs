//! Loss pieces shared between the tape (training) and the inference path
//! (evaluation). Both use the same softmax kernel and base-2 logs, so the
//! two routes agree bit-for-bit on identical logits.

use crate::numerics::kernels;
use crate::numerics::tape::LN_2;

/// Length-scaled Bernoulli KL in bits: `L * KL(mean(probs) || prior)`.
/// Zero exactly when the mean soft boundary rate equals the prior.
pub fn prior_loss_bits(probs: &[f64], prior: f64) -> f64 {
    assert!((0.0..1.0).contains(&prior) && prior > 0.0);
    assert!(!probs.is_empty());
    let mean = probs.iter().sum::<f64>() / probs.len() as f64;
    let m = mean.clamp(1e-12, 1.0 - 1e-12);
    let kl_nats = m * (m / prior).ln() + (1.0 - m) * ((1.0 - m) / (1.0 - prior)).ln();
    probs.len() as f64 * kl_nats / LN_2
}

/// Summed cross-entropy in bits over unmasked positions, split into
/// character-target and EOT-target contributions.
#[derive(Debug, Clone, Copy, Default)]
pub struct CeTotals {
    pub total_bits: f64,
    pub count: usize,
    pub char_bits: f64,
    pub char_count: usize,
}

impl CeTotals {
    pub fn merge(&mut self, other: &CeTotals) {
        self.total_bits += other.total_bits;
        self.count += other.count;
        self.char_bits += other.char_bits;
        self.char_count += other.char_count;
    }

    pub fn mean_bits(&self) -> f64 {
        if self.count == 0 {
            0.0
        } else {
            self.total_bits / self.count as f64
        }
    }
}

/// Accumulate -log2 p(target) over unmasked rows of packed logits.
pub fn cross_entropy_totals(
    logits: &[f64],
    width: usize,
    targets: &[usize],
    mask: &[bool],
    eot_id: usize,
) -> CeTotals {
    let rows = logits.len() / width;
    debug_assert_eq!(rows, targets.len());
    debug_assert_eq!(rows, mask.len());
    let mut row = vec![0.0; width];
    let mut out = CeTotals::default();
    for i in 0..rows {
        if !mask[i] {
            continue;
        }
        row.copy_from_slice(&logits[i * width..(i + 1) * width]);
        kernels::softmax_slice(&mut row);
        let bits = -(row[targets[i]].max(f64::MIN_POSITIVE)).ln() / LN_2;
        out.total_bits += bits;
        out.count += 1;
        if targets[i] != eot_id {
            out.char_bits += bits;
            out.char_count += 1;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn prior_loss_worked_example() {
        // p = 0.2, mean 0.5, L = 100: 100 * KL(0.5||0.2) in bits.
        let probs = vec![0.5; 100];
        let got = prior_loss_bits(&probs, 0.2);
        let expect = 100.0 * (0.5 * (0.5f64 / 0.2).ln() + 0.5 * (0.5f64 / 0.8).ln()) / LN_2;
        assert!((got - expect).abs() < 1e-9);
        assert!((got - 32.19).abs() < 0.01, "got {got}");
    }

    #[test]
    fn prior_loss_matches_tape_op() {
        use crate::numerics::Tape;
        let probs: Vec<f64> = (0..37).map(|i| 0.05 + 0.9 * (i as f64 / 36.0)).collect();
        let pure = prior_loss_bits(&probs, 0.1);
        let mut tape = Tape::new();
        let p = tape.constant(vec![37], probs);
        let kl = tape.prior_kl_bits(p, 0.1).unwrap();
        assert_eq!(pure.to_bits(), tape.scalar(kl).to_bits());
    }

    #[test]
    fn prior_loss_finite_difference() {
        use crate::numerics::gradcheck::{check_grad_entries, rel_err};
        use crate::numerics::Tape;
        let mut probs: Vec<f64> = (0..11).map(|i| 0.1 + 0.07 * i as f64).collect();
        let analytic = {
            let mut tape = Tape::new();
            let mut t = crate::numerics::Tensor::from_vec(probs.clone());
            t.requires_grad = true;
            let p = tape.leaf(&t);
            let kl = tape.prior_kl_bits(p, 0.2).unwrap();
            let mut grads = tape.backward(kl).unwrap();
            grads.take(p).unwrap()
        };
        let idx: Vec<usize> = (0..11).collect();
        let worst = check_grad_entries(&mut probs, &idx, &analytic, |p| prior_loss_bits(p, 0.2));
        assert!(worst < 1e-7, "rel err {worst}");
        let _ = rel_err(1.0, 1.0);
    }

    #[test]
    fn ce_totals_match_tape_mean() {
        use crate::numerics::Tape;
        let width = 5;
        let logits: Vec<f64> = (0..4 * width).map(|i| ((i * 13 % 7) as f64) * 0.4 - 1.0).collect();
        let targets = vec![0usize, 4, 3, 2];
        let mask = vec![true, true, false, true];
        let totals = cross_entropy_totals(&logits, width, &targets, &mask, 4);
        let mut tape = Tape::new();
        let l = tape.constant(vec![4, width], logits);
        let ce = tape.cross_entropy_bits(l, &targets, &mask).unwrap();
        assert!((totals.mean_bits() - tape.scalar(ce)).abs() < 1e-12);
        assert_eq!(totals.count, 3);
        assert_eq!(totals.char_count, 2); // target 4 is the EOT id here
    }
}
