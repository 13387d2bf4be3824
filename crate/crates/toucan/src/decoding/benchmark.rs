//! Wall-clock and layer-unit benchmark over a token-count grid.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::ToucanModel;
use crate::numerics::RngState;
use crate::decoding::engines::generate;
use crate::decoding::stats::{GenerationConfig, GenerationMode};

pub const BENCHMARK_CSV_HEADER: &str = "n_tokens,mode,wall_seconds,layer_units,chars";

#[derive(Debug, Clone)]
pub struct BenchRow {
    pub n_tokens: usize,
    pub mode: GenerationMode,
    pub wall_seconds: f64,
    pub layer_units: u64,
    pub chars: usize,
}

#[derive(Debug, Clone)]
pub struct BenchmarkResult {
    pub rows: Vec<BenchRow>,
    /// Median seconds to generate `gen_chars` characters, per mode.
    pub gen_at: Vec<(GenerationMode, f64)>,
    pub gen_chars: usize,
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    xs[xs.len() / 2]
}

/// Run both engines over every grid point, `runs` timed repetitions each
/// (plus one excluded warmup), strictly serially. Greedy sampling with the
/// config seed makes every repetition produce identical text and layer
/// counts; only wall time varies.
pub fn benchmark_speed(
    model: &ToucanModel,
    prompt: &[u8],
    base: &GenerationConfig,
    token_counts: &[usize],
    runs: usize,
    gen_chars: usize,
    csv_path: Option<&Path>,
) -> Result<BenchmarkResult> {
    if runs == 0 {
        return Err(Error::InvalidArgument("benchmark needs at least one run".into()));
    }
    let modes = [GenerationMode::Naive, GenerationMode::TokenAware];
    let mut rows = Vec::new();
    for &n_tokens in token_counts {
        for mode in modes {
            let cfg = GenerationConfig {
                mode,
                max_tokens: n_tokens,
                max_chars: usize::MAX / 2,
                ..base.clone()
            };
            let mut wall = Vec::with_capacity(runs);
            let mut units = 0;
            let mut chars = 0;
            for rep in 0..=runs {
                let mut rng = RngState::new(cfg.seed);
                let (_, stats) = generate(model, prompt, &cfg, &mut rng)?;
                if rep == 0 {
                    continue; // warmup excluded
                }
                wall.push(stats.wall_seconds);
                units = stats.layer_units();
                chars = stats.chars_generated;
            }
            rows.push(BenchRow {
                n_tokens,
                mode,
                wall_seconds: median(wall),
                layer_units: units,
                chars,
            });
        }
    }

    let mut gen_at = Vec::new();
    if gen_chars > 0 {
        for mode in modes {
            let cfg = GenerationConfig {
                mode,
                max_chars: gen_chars,
                max_tokens: usize::MAX / 2,
                ..base.clone()
            };
            let mut wall = Vec::with_capacity(runs);
            for rep in 0..=runs {
                let mut rng = RngState::new(cfg.seed);
                let (_, stats) = generate(model, prompt, &cfg, &mut rng)?;
                if rep == 0 {
                    continue;
                }
                wall.push(stats.wall_seconds);
            }
            gen_at.push((mode, median(wall)));
        }
    }

    if let Some(path) = csv_path {
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        writeln!(f, "{BENCHMARK_CSV_HEADER}").map_err(|e| Error::io(path, e))?;
        for r in &rows {
            writeln!(
                f,
                "{},{},{:.6},{},{}",
                r.n_tokens,
                r.mode.as_str(),
                r.wall_seconds,
                r.layer_units,
                r.chars
            )
            .map_err(|e| Error::io(path, e))?;
        }
    }
    Ok(BenchmarkResult {
        rows,
        gen_at,
        gen_chars,
    })
}
