//! Train a small model on synthetic English-like text and watch the
//! boundary predictor settle near the configured prior.
//!
//! ```bash
//! cargo run --release --example train_tiny -- [steps] [d_model] [seq_len] [batch] [lr] [prior] [weight] [corpus_chars]
//! ```

use toucan::model::{ModelConfig, ToucanModel};
use toucan::numerics::RngState;
use toucan::training::{synthetic_text, train_loop, Corpus, TrainConfig, TrainEvent};

fn arg<T: std::str::FromStr>(n: usize, default: T) -> T {
    std::env::args()
        .nth(n)
        .and_then(|s| s.parse().ok())
        .unwrap_or(default)
}

fn main() -> toucan::Result<()> {
    let steps = arg(1, 300usize);
    let d_model = arg(2, 64usize);
    let seq_len = arg(3, 128usize);
    let batch = arg(4, 2usize);
    let lr = arg(5, 1e-3f64);
    let prior = arg(6, 0.2f64);
    let weight = arg(7, 1.0f64);
    let corpus_chars = arg(8, 500_000usize);
    let tau = arg(9, 1.0f64);

    let corpus = Corpus::from_text("synthetic", &synthetic_text(corpus_chars, 42))?;
    let model_cfg = ModelConfig {
        d_model,
        n_heads: 4,
        layers: (2, 8, 2),
        boundary_prior: prior,
        gumbel_temperature: tau,
        max_seq_len: seq_len.max(256),
        ..ModelConfig::default()
    };
    let train_cfg = TrainConfig {
        batch_size: batch,
        seq_len,
        steps,
        learning_rate: lr,
        warmup_steps: (steps / 20).max(10),
        eval_interval: (steps / 4).max(50),
        prior_loss_weight: weight,
        ..TrainConfig::default()
    };
    let mut rng = RngState::new(0);
    let mut model = ToucanModel::new(model_cfg, &mut rng)?;
    println!(
        "params: {} | corpus: {} chars | steps: {steps}",
        model.param_count(),
        corpus.len()
    );
    let t0 = std::time::Instant::now();
    let outcome = train_loop(&mut model, &corpus, &train_cfg, None, |ev| match ev {
        TrainEvent::Step { step, loss } => {
            if step % 25 == 0 {
                println!(
                    "step {step:5}: ce={:.4} prior={:.4} sf={:.2} gnorm={:.2} [{:.1}s]",
                    loss.ce_bits,
                    loss.prior_bits,
                    loss.shortening_factor,
                    loss.grad_norm,
                    t0.elapsed().as_secs_f64()
                );
            }
        }
        TrainEvent::Eval { report } => {
            println!(
                "eval step {:5}: bpc={:.4} bpt={:.4} sf={:.3} bpc_chars={:.4}",
                report.step, report.bpc, report.bpt, report.sf, report.bpc_chars
            );
        }
    })?;
    println!(
        "done in {:.1}s: bpc={:.4} (uniform would be {:.3}), sf={:.3}",
        t0.elapsed().as_secs_f64(),
        outcome.final_eval.bpc,
        28f64.log2(),
        outcome.final_eval.sf
    );
    Ok(())
}
