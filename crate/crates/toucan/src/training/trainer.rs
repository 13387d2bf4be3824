//! The optimization loop and the BPC/BPT/SF evaluation.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{build_targets, forward, BoundModel, Mode, ToucanModel};
use crate::model::inference::eval_forward;
use crate::numerics::{RngState, Tape};
use crate::training::corpus::{make_batches, Batch, Corpus, Split};
use crate::training::loss::{cross_entropy_totals, CeTotals};
use crate::training::optimizer::{clip_global_norm, Adam};

/// Training-run hyperparameters.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub seq_len: usize,
    pub steps: usize,
    pub learning_rate: f64,
    pub warmup_steps: usize,
    pub grad_clip_norm: f64,
    pub seed: u64,
    pub eval_interval: usize,
    /// Windows per mid-training evaluation (0 = the whole split).
    pub eval_windows: usize,
    /// Weight of the boundary-rate prior term in the total loss.
    pub prior_loss_weight: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 4,
            seq_len: 192,
            steps: 2000,
            learning_rate: 1e-3,
            warmup_steps: 100,
            grad_clip_norm: 1.0,
            seed: 0,
            eval_interval: 500,
            eval_windows: 64,
            prior_loss_weight: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.seq_len == 0 || self.steps == 0 || self.eval_interval == 0 {
            return Err(Error::Config(
                "batch_size, seq_len, steps, and eval_interval must be positive".into(),
            ));
        }
        if self.grad_clip_norm <= 0.0 {
            return Err(Error::Config(format!(
                "grad_clip_norm must be positive, got {}",
                self.grad_clip_norm
            )));
        }
        if self.learning_rate <= 0.0 {
            return Err(Error::Config(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.prior_loss_weight < 0.0 {
            return Err(Error::Config("prior_loss_weight must be nonnegative".into()));
        }
        Ok(())
    }
}

/// Per-step loss components, all in bits except the shortening factor.
#[derive(Debug, Clone, Copy)]
pub struct LossBreakdown {
    pub ce_bits: f64,
    pub prior_bits: f64,
    pub total: f64,
    pub shortening_factor: f64,
    pub grad_norm: f64,
}

/// Evaluation metrics on one split.
///
/// `bpc` averages over every unmasked label position, characters and EOT
/// symbols alike; `bpc_chars` restricts to character targets so the cost of
/// the extra EOT symbol is measurable. `shortening_factor` and
/// `mean_token_length` are the same ratio (characters per token).
#[derive(Debug, Clone, Copy)]
pub struct EvalReport {
    pub bpc: f64,
    pub bpt: f64,
    pub sf: f64,
    pub mean_token_length: f64,
    pub bpc_chars: f64,
    pub step: usize,
}

/// One optimizer step over a batch: mean sequence loss
/// `cross_entropy + weight * prior`, clip, Adam.
pub fn train_step(
    model: &mut ToucanModel,
    batch: &Batch,
    cfg: &TrainConfig,
    opt: &mut Adam,
    rng: &mut RngState,
) -> Result<LossBreakdown> {
    let b = batch.sequences.len();
    if b == 0 {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    model.zero_grads();
    let mut ce_sum = 0.0;
    let mut prior_sum = 0.0;
    let mut sf_sum = 0.0;
    for seq in &batch.sequences {
        let mut tape = Tape::new();
        let bound = BoundModel::bind(&mut tape, model);
        let pass = forward(&mut tape, &bound, &model.config, seq, rng, Mode::Train)?;
        let (targets, mask) = build_targets(seq, &pass.segmentation, model.config.eot_id());
        let ce = tape.cross_entropy_bits(pass.logits, &targets, &mask)?;
        let prior = tape.prior_kl_bits(pass.boundary_probs, model.config.boundary_prior)?;
        let weighted = tape.scale(prior, cfg.prior_loss_weight);
        let loss = tape.add(ce, weighted)?;

        let (ce_v, prior_v, loss_v) = (tape.scalar(ce), tape.scalar(prior), tape.scalar(loss));
        if !loss_v.is_finite() {
            return Err(Error::NonFinite {
                context: format!(
                    "training loss (ce_bits={ce_v}, prior_bits={prior_v}, total={loss_v})"
                ),
            });
        }
        ce_sum += ce_v;
        prior_sum += prior_v;
        sf_sum += pass.shortening_factor;

        let mut grads = tape.backward_scaled(loss, 1.0 / b as f64)?;
        for (id, (_, param)) in bound.ids_in_order.iter().zip(model.visit_params_mut()) {
            if let Some(g) = grads.take(*id) {
                param.accumulate_grad(&g);
            }
        }
    }
    let grad_norm = clip_global_norm(model, cfg.grad_clip_norm);
    if !grad_norm.is_finite() {
        return Err(Error::NonFinite {
            context: format!("gradient norm (ce_bits={})", ce_sum / b as f64),
        });
    }
    opt.apply(model);
    Ok(LossBreakdown {
        ce_bits: ce_sum / b as f64,
        prior_bits: prior_sum / b as f64,
        total: (ce_sum + cfg.prior_loss_weight * prior_sum) / b as f64,
        shortening_factor: sf_sum / b as f64,
        grad_norm,
    })
}

/// Deterministic evaluation over every full window of a split.
///
/// BPC is total bits over all unmasked label positions divided by their
/// count; the mean token length comes from the same deterministic
/// segmentation, and bpt = bpc * mean token length.
pub fn evaluate(
    model: &ToucanModel,
    corpus: &Corpus,
    split: Split,
    seq_len: usize,
    step: usize,
) -> Result<EvalReport> {
    evaluate_windows(model, corpus, split, seq_len, 0, step)
}

/// [`evaluate`] over at most `max_windows` leading windows (0 = all).
pub fn evaluate_windows(
    model: &ToucanModel,
    corpus: &Corpus,
    split: Split,
    seq_len: usize,
    max_windows: usize,
    step: usize,
) -> Result<EvalReport> {
    let data = corpus.split_slice(split);
    let mut n_windows = data.len() / seq_len;
    if max_windows > 0 {
        n_windows = n_windows.min(max_windows);
    }
    if n_windows == 0 {
        return Err(Error::Ingest(format!(
            "split has {} symbols, shorter than one {seq_len}-symbol evaluation window",
            data.len()
        )));
    }
    let mut totals = CeTotals::default();
    let mut chars = 0usize;
    let mut tokens = 0usize;
    for w in 0..n_windows {
        let ids = &data[w * seq_len..(w + 1) * seq_len];
        let out = eval_forward(model, ids)?;
        let (targets, mask) = build_targets(ids, &out.segmentation, model.config.eot_id());
        let t = cross_entropy_totals(
            &out.logits,
            model.config.logit_width(),
            &targets,
            &mask,
            model.config.eot_id(),
        );
        totals.merge(&t);
        chars += ids.len();
        tokens += out.segmentation.num_tokens();
    }
    let bpc = totals.mean_bits();
    let w_bar = chars as f64 / tokens as f64;
    Ok(EvalReport {
        bpc,
        bpt: bpc * w_bar,
        sf: w_bar,
        mean_token_length: w_bar,
        bpc_chars: if totals.char_count == 0 {
            0.0
        } else {
            totals.char_bits / totals.char_count as f64
        },
        step,
    })
}

/// Append-only CSV metrics log with the fixed header
/// `step,ce_bits,prior_bits,bpc,bpt,sf`. Train rows leave the eval columns
/// empty and vice versa.
pub struct MetricsLog {
    file: fs::File,
}

pub const METRICS_HEADER: &str = "step,ce_bits,prior_bits,bpc,bpt,sf";

impl MetricsLog {
    pub fn create(path: &Path) -> Result<Self> {
        let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        writeln!(file, "{METRICS_HEADER}").map_err(|e| Error::io(path, e))?;
        Ok(MetricsLog { file })
    }

    pub fn log_train(&mut self, step: usize, loss: &LossBreakdown) -> std::io::Result<()> {
        writeln!(
            self.file,
            "{step},{:.6},{:.6},,,{:.6}",
            loss.ce_bits, loss.prior_bits, loss.shortening_factor
        )
    }

    pub fn log_eval(&mut self, report: &EvalReport) -> std::io::Result<()> {
        writeln!(
            self.file,
            "{},,,{:.6},{:.6},{:.6}",
            report.step, report.bpc, report.bpt, report.sf
        )
    }
}

/// Events surfaced to the caller during a run.
pub enum TrainEvent<'a> {
    Step { step: usize, loss: &'a LossBreakdown },
    Eval { report: &'a EvalReport },
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub final_eval: EvalReport,
    pub eval_history: Vec<EvalReport>,
    pub last_loss: LossBreakdown,
}

/// Run `cfg.steps` optimizer steps with periodic validation evaluations.
pub fn train_loop(
    model: &mut ToucanModel,
    corpus: &Corpus,
    cfg: &TrainConfig,
    mut metrics: Option<&mut MetricsLog>,
    mut on_event: impl FnMut(&TrainEvent),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    model.config.prior_loss_weight = cfg.prior_loss_weight;
    let mut rng = RngState::new(cfg.seed);
    let mut opt = Adam::new(model, cfg.learning_rate, cfg.warmup_steps);
    let mut eval_history = Vec::new();
    let mut step = 0usize;
    let mut epoch = 0u64;
    let last_loss = 'outer: loop {
        let batches = make_batches(
            corpus,
            Split::Train,
            cfg.seq_len,
            cfg.batch_size,
            cfg.seed ^ epoch.wrapping_mul(0x9e37_79b9),
        )?;
        for batch in &batches {
            step += 1;
            let loss = train_step(model, batch, cfg, &mut opt, &mut rng).map_err(|e| match e {
                Error::NonFinite { context } => Error::NonFinite {
                    context: format!("step {step}: {context}"),
                },
                other => other,
            })?;
            if let Some(m) = metrics.as_deref_mut() {
                m.log_train(step, &loss).map_err(|e| Error::io("metrics.csv", e))?;
            }
            on_event(&TrainEvent::Step { step, loss: &loss });
            if step % cfg.eval_interval == 0 && step < cfg.steps {
                let report =
                    evaluate_windows(model, corpus, Split::Valid, cfg.seq_len, cfg.eval_windows, step)?;
                if let Some(m) = metrics.as_deref_mut() {
                    m.log_eval(&report).map_err(|e| Error::io("metrics.csv", e))?;
                }
                on_event(&TrainEvent::Eval { report: &report });
                eval_history.push(report);
            }
            if step >= cfg.steps {
                break 'outer loss;
            }
        }
        epoch += 1;
    };
    let final_eval =
        evaluate_windows(model, corpus, Split::Valid, cfg.seq_len, cfg.eval_windows, step)?;
    if let Some(m) = metrics.as_deref_mut() {
        m.log_eval(&final_eval).map_err(|e| Error::io("metrics.csv", e))?;
    }
    on_event(&TrainEvent::Eval { report: &final_eval });
    eval_history.push(final_eval);
    Ok(TrainOutcome {
        final_eval,
        eval_history,
        last_loss,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::training::corpus::synthetic_text;

    fn tiny_setup(seed: u64) -> (ToucanModel, Corpus) {
        let mut rng = RngState::new(seed);
        let cfg = ModelConfig {
            d_model: 16,
            n_heads: 2,
            layers: (1, 1, 1),
            max_seq_len: 64,
            ..ModelConfig::default()
        };
        let model = ToucanModel::new(cfg, &mut rng).unwrap();
        let corpus = Corpus::from_text("toy", &synthetic_text(6000, seed)).unwrap();
        (model, corpus)
    }

    #[test]
    fn single_repeated_batch_descends() {
        let (mut model, corpus) = tiny_setup(0);
        let cfg = TrainConfig {
            batch_size: 1,
            seq_len: 32,
            steps: 8,
            learning_rate: 3e-4,
            warmup_steps: 0,
            eval_interval: 1000,
            ..TrainConfig::default()
        };
        let batches = make_batches(&corpus, Split::Train, 32, 1, 0).unwrap();
        let batch = batches[0].clone();
        let mut opt = Adam::new(&model, cfg.learning_rate, 0);
        // Eval-style deterministic descent check is noisy under gumbel
        // sampling; use a fixed rng clone per step so each step sees the
        // same boundary noise and the loss decreases on the same batch.
        let mut first = None;
        let mut last = None;
        for _ in 0..cfg.steps {
            let mut rng = RngState::new(7);
            let loss = train_step(&mut model, &batch, &cfg, &mut opt, &mut rng).unwrap();
            if first.is_none() {
                first = Some(loss.total);
            }
            last = Some(loss.total);
        }
        assert!(
            last.unwrap() < first.unwrap(),
            "loss did not decrease: {first:?} -> {last:?}"
        );
    }

    #[test]
    fn zero_prior_weight_matches_pure_lm_update() {
        let (model, corpus) = tiny_setup(1);
        let cfg = TrainConfig {
            batch_size: 2,
            seq_len: 24,
            steps: 1,
            prior_loss_weight: 0.0,
            warmup_steps: 0,
            ..TrainConfig::default()
        };
        let batches = make_batches(&corpus, Split::Train, 24, 2, 1).unwrap();
        let run = |mut m: ToucanModel, weight: f64| {
            let mut c = cfg.clone();
            c.prior_loss_weight = weight;
            let mut opt = Adam::new(&m, c.learning_rate, 0);
            let mut rng = RngState::new(3);
            train_step(&mut m, &batches[0], &c, &mut opt, &mut rng).unwrap();
            m
        };
        // With weight 0 the update must ignore the prior: compare against a
        // run whose prior gradient is nulled by construction (weight 0 twice
        // gives identical params; weight 1 diverges).
        let m0a = run(model.clone(), 0.0);
        let m0b = run(model.clone(), 0.0);
        let m1 = run(model.clone(), 1.0);
        let flat = |m: &ToucanModel| {
            m.visit_params()
                .iter()
                .flat_map(|(_, t)| t.data().to_vec())
                .collect::<Vec<f64>>()
        };
        assert_eq!(flat(&m0a), flat(&m0b));
        assert_ne!(flat(&m0a), flat(&m1));
    }

    #[test]
    fn clip_contract_holds_in_training() {
        let (mut model, corpus) = tiny_setup(2);
        let cfg = TrainConfig {
            batch_size: 1,
            seq_len: 32,
            grad_clip_norm: 0.05,
            warmup_steps: 0,
            ..TrainConfig::default()
        };
        let batches = make_batches(&corpus, Split::Train, 32, 1, 2).unwrap();
        let mut opt = Adam::new(&model, cfg.learning_rate, 0);
        let mut rng = RngState::new(0);
        train_step(&mut model, &batches[0], &cfg, &mut opt, &mut rng).unwrap();
        let mut sq = 0.0;
        for (_, t) in model.visit_params() {
            if let Some(g) = t.grad.as_ref() {
                for &v in g {
                    sq += v * v;
                }
            }
        }
        assert!(sq.sqrt() <= 0.05 + 1e-9);
    }

    #[test]
    fn every_parameter_gets_a_gradient() {
        let (mut model, corpus) = tiny_setup(3);
        let cfg = TrainConfig {
            batch_size: 1,
            seq_len: 40,
            warmup_steps: 0,
            ..TrainConfig::default()
        };
        let batches = make_batches(&corpus, Split::Train, 40, 1, 3).unwrap();
        let mut opt = Adam::new(&model, 1e-9, 0);
        let mut rng = RngState::new(1);
        train_step(&mut model, &batches[0], &cfg, &mut opt, &mut rng).unwrap();
        for (name, t) in model.visit_params() {
            assert!(t.grad.is_some(), "parameter {name} has no gradient");
            assert_eq!(t.grad.as_ref().unwrap().len(), t.len(), "{name}");
        }
    }

    #[test]
    fn evaluate_untrained_uniform_model_near_log2_vocab() {
        let (model, corpus) = tiny_setup(4);
        // lm head is zero-initialized, so logits are exactly uniform.
        let report = evaluate(&model, &corpus, Split::Valid, 32, 0).unwrap();
        assert!((report.bpc - 28f64.log2()).abs() < 0.05, "bpc {}", report.bpc);
        assert!((report.bpt - report.bpc * report.mean_token_length).abs() < 1e-9);
        assert!(report.sf >= 1.0);
    }

    #[test]
    fn eval_report_identity_from_paper_row() {
        // bpc = 1.195 and mean token length 4.887 give bpt = 5.840.
        let bpc: f64 = 1.195;
        let w_bar: f64 = 4.887;
        assert!((bpc * w_bar - 5.840).abs() < 5e-4);
    }

    #[test]
    fn training_reproducible_same_seed() {
        let run = |seed: u64| {
            let (mut model, corpus) = tiny_setup(9);
            let cfg = TrainConfig {
                batch_size: 2,
                seq_len: 32,
                steps: 10,
                seed,
                eval_interval: 100,
                ..TrainConfig::default()
            };
            let out = train_loop(&mut model, &corpus, &cfg, None, |_| {}).unwrap();
            (out.last_loss.total, out.final_eval.bpc)
        };
        let a = run(5);
        let b = run(5);
        assert!((a.0 - b.0).abs() < 1e-9);
        assert!((a.1 - b.1).abs() < 1e-9);
    }
}
