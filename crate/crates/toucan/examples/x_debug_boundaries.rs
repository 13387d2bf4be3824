// Temporary diagnostic: watch boundary logit spread during training.
use toucan::model::inference::{boundary_logit, embed_row, run_stack};
use toucan::model::{ModelConfig, ToucanModel};
use toucan::numerics::RngState;
use toucan::training::{
    evaluate_windows, make_batches, synthetic_text, train_step, Adam, Corpus, Split, TrainConfig,
};

fn logit_stats(model: &ToucanModel, ids: &[u8]) -> (f64, f64, f64, f64) {
    let d = model.config.d_model;
    let mut rows = Vec::new();
    for (i, &id) in ids.iter().enumerate() {
        rows.extend(embed_row(model, id, i).unwrap());
    }
    let ctx = run_stack(&model.tokenizer, &model.config, &rows);
    let logits: Vec<f64> = (0..ids.len())
        .map(|i| boundary_logit(model, &ctx[i * d..(i + 1) * d]))
        .collect();
    let n = logits.len() as f64;
    let mean = logits.iter().sum::<f64>() / n;
    let var = logits.iter().map(|l| (l - mean) * (l - mean)).sum::<f64>() / n;
    let above = logits.iter().filter(|&&l| l > 0.0).count() as f64 / n;
    let max = logits.iter().cloned().fold(f64::MIN, f64::max);
    (mean, var.sqrt(), above, max)
}

fn arg<T: std::str::FromStr>(n: usize, default: T) -> T {
    std::env::args().nth(n).and_then(|s| s.parse().ok()).unwrap_or(default)
}

fn main() {
    let steps: usize = arg(1, 400);
    let lw: f64 = arg(2, 1.0);
    let tau: f64 = arg(3, 1.0);
    let lr: f64 = arg(4, 2e-3);
    let corpus = Corpus::from_text("synthetic", &synthetic_text(400_000, 42)).unwrap();
    let model_cfg = ModelConfig {
        d_model: 64,
        n_heads: 4,
        layers: (2, 8, 2),
        boundary_prior: 0.2,
        gumbel_temperature: tau,
        max_seq_len: 256,
        ..ModelConfig::default()
    };
    let cfg = TrainConfig {
        batch_size: 2,
        seq_len: 128,
        steps,
        learning_rate: lr,
        warmup_steps: 20,
        eval_interval: 50,
        eval_windows: 8,
        prior_loss_weight: lw,
        ..TrainConfig::default()
    };
    let mut rng = RngState::new(0);
    let mut model = ToucanModel::new(model_cfg, &mut rng).unwrap();
    let probe: Vec<u8> = corpus.split_slice(Split::Valid)[..128].to_vec();
    let mut opt = Adam::new(&model, cfg.learning_rate, cfg.warmup_steps);
    let mut step = 0;
    let t0 = std::time::Instant::now();
    'outer: for epoch in 0..1000u64 {
        let batches = make_batches(&corpus, Split::Train, cfg.seq_len, cfg.batch_size, epoch).unwrap();
        for b in &batches {
            step += 1;
            let loss = train_step(&mut model, b, &cfg, &mut opt, &mut rng).unwrap();
            if step % 50 == 0 {
                let (mean, std, above, max) = logit_stats(&model, &probe);
                let ev = evaluate_windows(&model, &corpus, Split::Valid, 128, 8, step).unwrap();
                println!(
                    "step {step:4}: ce={:.3} prior={:.3} train_sf={:.2} | logits mean={mean:+.2} std={std:.2} p(>0)={above:.3} max={max:+.2} | eval bpc={:.3} sf={:.1} [{:.0}s]",
                    loss.ce_bits, loss.prior_bits, loss.shortening_factor, ev.bpc, ev.sf, t0.elapsed().as_secs_f64()
                );
            }
            if step >= cfg.steps { break 'outer; }
        }
    }
}
