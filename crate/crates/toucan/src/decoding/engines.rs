//! The two generation engines and the exact equivalence oracle.
//!
//! Shared semantics, enforced by a single driver loop:
//!
//! - The boundary predictor segments only the prompt (eval-mode thresholds).
//!   Token boundaries of generated text are dictated by emitted EOT symbols
//!   in both engines.
//! - The EOT symbol is never sampled at a token-start position (a token must
//!   hold at least one character); it is forced once a token reaches
//!   `max_token_length` characters, without consuming a random draw.
//! - Every symbol is produced from logits computed by exactly one engine
//!   step: a full pass for the first character of a token, one more
//!   pass/step per subsequent symbol. Ending a run on a token boundary
//!   therefore costs exactly `(N+T)*(a+b+c)` layer units naively and
//!   `N*c + T*(a+b+c)` token-aware, for N characters in T tokens.
//!
//! Both engines compute every decoder input row bit-identically (causal
//! prefix stability plus the fixed-order kernels), so greedy outputs agree
//! byte for byte; `assert_equivalence` checks this per step.

use std::time::Instant;

use crate::error::{Error, Result};
use crate::model::inference::{
    boundary_logit, embed_row, eot_row, lm_logits, pool_span, run_stack, stack_append_row,
    StackCache,
};
use crate::model::{Segmentation, ToucanModel};
use crate::numerics::kernels;
use crate::numerics::RngState;
use crate::decoding::stats::{
    DecodeStats, GenerationConfig, GenerationMode, Sampling, TokenTrace,
};

/// Segment a prompt with the deterministic (eval-mode) boundary predictor.
/// The final prompt position is a forced boundary, closing the last token.
pub fn segment_prompt(model: &ToucanModel, prompt: &[u8]) -> Result<Segmentation> {
    if prompt.is_empty() {
        return Err(Error::InvalidArgument("prompt must be nonempty".into()));
    }
    let cfg = &model.config;
    let d = cfg.d_model;
    let mut rows = Vec::with_capacity(prompt.len() * d);
    for (i, &id) in prompt.iter().enumerate() {
        rows.extend(embed_row(model, id, i)?);
    }
    let ctx = run_stack(&model.tokenizer, cfg, &rows);
    let flags: Vec<bool> = (0..prompt.len())
        .map(|i| kernels::sigmoid(boundary_logit(model, &ctx[i * d..(i + 1) * d])) > 0.5)
        .collect();
    Ok(Segmentation::from_boundaries(&flags))
}

/// Sample one symbol. At token starts the EOT symbol is masked out so every
/// token holds at least one character.
fn sample_symbol(
    logits: &[f64],
    sampling: Sampling,
    rng: &mut RngState,
    forbid_eot: bool,
    eot_id: usize,
) -> usize {
    match sampling {
        Sampling::Greedy => {
            let mut best = usize::MAX;
            let mut best_v = f64::NEG_INFINITY;
            for (i, &v) in logits.iter().enumerate() {
                if forbid_eot && i == eot_id {
                    continue;
                }
                if v > best_v {
                    best_v = v;
                    best = i;
                }
            }
            best
        }
        Sampling::Temperature(t) => {
            let mut probs: Vec<f64> = logits.iter().map(|&v| v / t).collect();
            if forbid_eot {
                probs[eot_id] = f64::NEG_INFINITY;
            }
            kernels::softmax_slice(&mut probs);
            let u = rng.uniform();
            let mut cum = 0.0;
            for (i, &p) in probs.iter().enumerate() {
                cum += p;
                if u < cum {
                    return i;
                }
            }
            probs.len() - 1
        }
    }
}

/// Shared generation state: all characters so far plus committed spans.
struct GenState {
    chars: Vec<u8>,
    committed: Vec<(usize, usize)>,
    partial_start: usize,
}

impl GenState {
    fn partial_len(&self) -> usize {
        self.chars.len() - self.partial_start
    }

    fn commit(&mut self) {
        debug_assert!(self.partial_len() > 0);
        self.committed.push((self.partial_start, self.chars.len() - 1));
        self.partial_start = self.chars.len();
    }
}

trait Engine {
    /// Full model pass; returns logits for the first symbol of a new token.
    fn begin_token(&mut self, state: &GenState, stats: &mut DecodeStats) -> Result<Vec<f64>>;
    /// Register an appended character (already in `state`); returns logits
    /// for the following symbol.
    fn push_char(&mut self, state: &GenState, stats: &mut DecodeStats) -> Result<Vec<f64>>;
}

fn count_full_pass(model: &ToucanModel, stats: &mut DecodeStats) {
    let (a, b, c) = model.config.layers;
    stats.layer_invocations.tokenizer += a as u64;
    stats.layer_invocations.token_model += b as u64;
    stats.layer_invocations.decoder += c as u64;
}

/// Tokenizer outputs and token-model contexts for the current state,
/// recomputed from scratch (both engines share this for their full passes).
///
/// The token model sees `[null, v_1, .., v_m]` for m committed tokens, so
/// its output row k is the context that predicts token k+1 — including row
/// m, the context for the token being generated next.
fn contexts_for_state(model: &ToucanModel, state: &GenState) -> (Vec<f64>, Vec<f64>) {
    let cfg = &model.config;
    let d = cfg.d_model;
    let mut rows = Vec::with_capacity(state.chars.len() * d);
    for (i, &id) in state.chars.iter().enumerate() {
        rows.extend(embed_row(model, id, i).expect("validated during generation"));
    }
    let ctx = run_stack(&model.tokenizer, cfg, &rows);
    let mut tm_in = Vec::with_capacity((state.committed.len() + 1) * d);
    tm_in.extend_from_slice(model.null_vector.data());
    for &(s, e) in &state.committed {
        tm_in.extend(pool_span(&ctx, d, s, e));
    }
    let token_ctx = run_stack(&model.token_model, cfg, &tm_in);
    (rows, token_ctx)
}

/// Baseline engine: reprocesses the entire sequence through all three
/// stacks for every generated symbol.
struct NaiveEngine<'m> {
    model: &'m ToucanModel,
}

impl NaiveEngine<'_> {
    fn full_pass(&self, state: &GenState, stats: &mut DecodeStats) -> Result<Vec<f64>> {
        count_full_pass(self.model, stats);
        let cfg = &self.model.config;
        let d = cfg.d_model;
        let (embeds, token_ctx) = contexts_for_state(self.model, state);
        // Up-sampled layout: committed tokens' characters plus their EOT
        // slots, then the open token's characters.
        let mut ups = Vec::new();
        for (k, &(s, e)) in state.committed.iter().enumerate() {
            for i in s..=e {
                let base = &embeds[i * d..(i + 1) * d];
                let add = &token_ctx[k * d..(k + 1) * d];
                ups.extend(base.iter().zip(add).map(|(x, y)| x + y));
            }
            let eot = eot_row(self.model, e)?;
            let add = &token_ctx[(k + 1) * d..(k + 2) * d];
            ups.extend(eot.iter().zip(add).map(|(x, y)| x + y));
        }
        let m = state.committed.len();
        for i in state.partial_start..state.chars.len() {
            let base = &embeds[i * d..(i + 1) * d];
            let add = &token_ctx[m * d..(m + 1) * d];
            ups.extend(base.iter().zip(add).map(|(x, y)| x + y));
        }
        let dec = run_stack(&self.model.decoder, cfg, &ups);
        let last = dec.len() - d;
        Ok(lm_logits(self.model, &dec[last..]))
    }
}

impl Engine for NaiveEngine<'_> {
    fn begin_token(&mut self, state: &GenState, stats: &mut DecodeStats) -> Result<Vec<f64>> {
        self.full_pass(state, stats)
    }

    fn push_char(&mut self, state: &GenState, stats: &mut DecodeStats) -> Result<Vec<f64>> {
        self.full_pass(state, stats)
    }
}

/// Token-aware engine: one full pass per token caches the next-token
/// context; inside a token only the decoder layers run, extending a
/// key/value cache.
struct FastEngine<'m> {
    model: &'m ToucanModel,
    dec_cache: StackCache,
    /// Token-model output row for the token currently being generated.
    cur_ctx: Vec<f64>,
    primed: bool,
}

impl<'m> FastEngine<'m> {
    fn new(model: &'m ToucanModel) -> Self {
        FastEngine {
            model,
            dec_cache: StackCache::new(&model.decoder),
            cur_ctx: Vec::new(),
            primed: false,
        }
    }

    fn append_dec_row(&mut self, base: &[f64], ctx: &[f64]) -> Vec<f64> {
        let row: Vec<f64> = base.iter().zip(ctx).map(|(x, y)| x + y).collect();
        stack_append_row(&self.model.decoder, &self.model.config, &mut self.dec_cache, &row)
    }
}

impl Engine for FastEngine<'_> {
    fn begin_token(&mut self, state: &GenState, stats: &mut DecodeStats) -> Result<Vec<f64>> {
        count_full_pass(self.model, stats);
        let cfg = &self.model.config;
        let d = cfg.d_model;
        let (embeds, token_ctx) = contexts_for_state(self.model, state);
        let m = state.committed.len();
        self.cur_ctx = token_ctx[m * d..(m + 1) * d].to_vec();
        let last_out;
        if !self.primed {
            // First pass: materialize the whole committed layout in the
            // decoder cache (prompt tokens and their EOT slots).
            let mut out = Vec::new();
            for (k, &(s, e)) in state.committed.iter().enumerate() {
                for i in s..=e {
                    let base = embeds[i * d..(i + 1) * d].to_vec();
                    out = self.append_dec_row(&base, &token_ctx[k * d..(k + 1) * d].to_vec());
                    let _ = &out;
                }
                let eot = eot_row(self.model, e)?;
                out = self.append_dec_row(&eot, &token_ctx[(k + 1) * d..(k + 2) * d].to_vec());
            }
            self.primed = true;
            last_out = out;
        } else {
            // Later passes: the committed characters are already cached;
            // append only the new EOT slot carrying the fresh context.
            let (_, e) = *state.committed.last().expect("a token was just committed");
            let eot = eot_row(self.model, e)?;
            let ctx = self.cur_ctx.clone();
            last_out = self.append_dec_row(&eot, &ctx);
        }
        Ok(lm_logits(self.model, &last_out))
    }

    fn push_char(&mut self, state: &GenState, stats: &mut DecodeStats) -> Result<Vec<f64>> {
        stats.layer_invocations.decoder += self.model.config.layers.2 as u64;
        let i = state.chars.len() - 1;
        let base = embed_row(self.model, state.chars[i], i)?;
        let ctx = self.cur_ctx.clone();
        let out = self.append_dec_row(&base, &ctx);
        Ok(lm_logits(self.model, &out))
    }
}

/// Full result of one generation run.
pub struct Generation {
    pub text: String,
    pub stats: DecodeStats,
    /// Per-step logits, recorded when requested (equivalence oracle).
    pub logit_trace: Option<Vec<Vec<f64>>>,
}

fn drive(
    model: &ToucanModel,
    engine: &mut dyn Engine,
    prompt: &[u8],
    cfg: &GenerationConfig,
    rng: &mut RngState,
    record_logits: bool,
) -> Result<Generation> {
    let started = Instant::now();
    let eot_id = model.config.eot_id();
    let mut stats = DecodeStats::default();
    let mut logit_trace = if record_logits { Some(Vec::new()) } else { None };

    let seg = segment_prompt(model, prompt)?;
    let mut state = GenState {
        chars: prompt.to_vec(),
        committed: seg.spans().to_vec(),
        partial_start: prompt.len(),
    };
    // Characters beyond the position table cannot be processed further.
    let capacity = model.config.max_seq_len.saturating_sub(prompt.len());
    let max_chars = cfg.max_chars.min(capacity);
    let mut text = String::new();
    let mut token_text = String::new();

    if max_chars > 0 && cfg.max_tokens > 0 {
        let mut logits = engine.begin_token(&state, &mut stats)?;
        loop {
            if let Some(tr) = logit_trace.as_mut() {
                tr.push(logits.clone());
            }
            let at_start = state.partial_len() == 0;
            let symbol = if !at_start && state.partial_len() >= cfg.max_token_length {
                stats.forced_boundaries += 1;
                eot_id
            } else {
                sample_symbol(&logits, cfg.sampling, rng, at_start, eot_id)
            };
            if symbol == eot_id {
                state.commit();
                stats.trace.push(TokenTrace {
                    index: stats.tokens_generated,
                    length: token_text.len(),
                    text: std::mem::take(&mut token_text),
                });
                stats.tokens_generated += 1;
                if stats.tokens_generated >= cfg.max_tokens || stats.chars_generated >= max_chars {
                    break;
                }
                logits = engine.begin_token(&state, &mut stats)?;
            } else {
                let ch = crate::training::corpus::id_to_char(symbol as u8);
                text.push(ch);
                token_text.push(ch);
                state.chars.push(symbol as u8);
                stats.chars_generated += 1;
                if stats.chars_generated >= max_chars {
                    break;
                }
                logits = engine.push_char(&state, &mut stats)?;
            }
        }
    }
    if !token_text.is_empty() {
        // Partial token flushed so the trace reconciles with the text.
        stats.trace.push(TokenTrace {
            index: stats.tokens_generated,
            length: token_text.len(),
            text: token_text,
        });
    }
    stats.wall_seconds = started.elapsed().as_secs_f64();
    Ok(Generation {
        text,
        stats,
        logit_trace,
    })
}

fn generate_with(
    model: &ToucanModel,
    prompt: &[u8],
    cfg: &GenerationConfig,
    rng: &mut RngState,
    mode: GenerationMode,
    record_logits: bool,
) -> Result<Generation> {
    match mode {
        GenerationMode::Naive => {
            let mut engine = NaiveEngine { model };
            drive(model, &mut engine, prompt, cfg, rng, record_logits)
        }
        GenerationMode::TokenAware => {
            let mut engine = FastEngine::new(model);
            drive(model, &mut engine, prompt, cfg, rng, record_logits)
        }
    }
}

/// Generate by reprocessing the entire sequence for every symbol.
pub fn generate_naive(
    model: &ToucanModel,
    prompt: &[u8],
    cfg: &GenerationConfig,
    rng: &mut RngState,
) -> Result<(String, DecodeStats)> {
    let g = generate_with(model, prompt, cfg, rng, GenerationMode::Naive, false)?;
    Ok((g.text, g.stats))
}

/// Generate with one full pass per token and decoder-only steps inside it.
pub fn generate_token_aware(
    model: &ToucanModel,
    prompt: &[u8],
    cfg: &GenerationConfig,
    rng: &mut RngState,
) -> Result<(String, DecodeStats)> {
    let g = generate_with(model, prompt, cfg, rng, GenerationMode::TokenAware, false)?;
    Ok((g.text, g.stats))
}

/// Generate with the mode picked from the config.
pub fn generate(
    model: &ToucanModel,
    prompt: &[u8],
    cfg: &GenerationConfig,
    rng: &mut RngState,
) -> Result<(String, DecodeStats)> {
    let g = generate_with(model, prompt, cfg, rng, cfg.mode, false)?;
    Ok((g.text, g.stats))
}

/// First point where the two engines disagreed.
#[derive(Debug, Clone)]
pub struct Divergence {
    pub step: usize,
    pub naive_logits: Vec<f64>,
    pub token_aware_logits: Vec<f64>,
}

/// Outcome of running both engines on identical inputs.
#[derive(Debug, Clone)]
pub struct EquivalenceReport {
    pub matched: bool,
    pub chars: usize,
    pub naive_text: String,
    pub token_aware_text: String,
    pub traces_match: bool,
    pub divergence: Option<Divergence>,
}

/// Run both engines greedily on the same prompt and seed and compare
/// text, per-token traces, and per-step logits exactly.
pub fn assert_equivalence(
    model: &ToucanModel,
    prompt: &[u8],
    n_chars: usize,
    seed: u64,
) -> Result<EquivalenceReport> {
    let cfg = GenerationConfig {
        mode: GenerationMode::Naive,
        sampling: Sampling::Greedy,
        max_chars: n_chars,
        max_tokens: usize::MAX / 2,
        ..GenerationConfig::default()
    };
    let mut rng_a = RngState::new(seed);
    let naive = generate_with(model, prompt, &cfg, &mut rng_a, GenerationMode::Naive, true)?;
    let mut rng_b = RngState::new(seed);
    let fast = generate_with(
        model,
        prompt,
        &cfg,
        &mut rng_b,
        GenerationMode::TokenAware,
        true,
    )?;

    let na = naive.logit_trace.as_ref().unwrap();
    let fa = fast.logit_trace.as_ref().unwrap();
    let mut divergence = None;
    for (step, (a, b)) in na.iter().zip(fa.iter()).enumerate() {
        if a.iter().zip(b).any(|(x, y)| x.to_bits() != y.to_bits()) {
            divergence = Some(Divergence {
                step,
                naive_logits: a.clone(),
                token_aware_logits: b.clone(),
            });
            break;
        }
    }
    if divergence.is_none() && na.len() != fa.len() {
        let step = na.len().min(fa.len());
        divergence = Some(Divergence {
            step,
            naive_logits: na.get(step).cloned().unwrap_or_default(),
            token_aware_logits: fa.get(step).cloned().unwrap_or_default(),
        });
    }
    let traces_match = naive.stats.trace == fast.stats.trace;
    let matched = naive.text == fast.text && traces_match && divergence.is_none();
    Ok(EquivalenceReport {
        matched,
        chars: naive.stats.chars_generated,
        naive_text: naive.text,
        token_aware_text: fast.text,
        traces_match,
        divergence,
    })
}
