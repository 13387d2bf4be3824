//! Generation engines, the decode-equivalence oracle, and the speed
//! benchmark harness.

pub mod benchmark;
pub mod engines;
pub mod stats;

pub use benchmark::{benchmark_speed, BenchRow, BenchmarkResult, BENCHMARK_CSV_HEADER};
pub use engines::{
    assert_equivalence, generate, generate_naive, generate_token_aware, segment_prompt,
    Divergence, EquivalenceReport, Generation,
};
pub use stats::{DecodeStats, GenerationConfig, GenerationMode, LayerCounts, Sampling, TokenTrace};

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, ToucanModel};
    use crate::numerics::RngState;

    fn random_model(seed: u64, d: usize, heads: usize, layers: (usize, usize, usize)) -> ToucanModel {
        let mut rng = RngState::new(seed);
        let cfg = ModelConfig {
            char_vocab_size: 27,
            d_model: d,
            n_heads: heads,
            layers,
            max_seq_len: 512,
            ..ModelConfig::default()
        };
        let mut m = ToucanModel::new(cfg, &mut rng).unwrap();
        m.randomize(0.08, &mut rng);
        m
    }

    #[test]
    fn zero_caps_mean_empty_output() {
        let model = random_model(0, 16, 2, (1, 1, 1));
        let cfg = GenerationConfig {
            max_chars: 0,
            ..GenerationConfig::default()
        };
        let mut rng = RngState::new(0);
        let (text, stats) = generate_naive(&model, &[1, 2, 3], &cfg, &mut rng).unwrap();
        assert!(text.is_empty());
        assert_eq!(stats.layer_units(), 0);
        assert_eq!(stats.chars_generated, 0);
    }

    #[test]
    fn empty_prompt_is_an_error() {
        let model = random_model(0, 16, 2, (1, 1, 1));
        let cfg = GenerationConfig::default();
        let mut rng = RngState::new(0);
        assert!(generate_naive(&model, &[], &cfg, &mut rng).is_err());
    }

    #[test]
    fn greedy_fixed_seed_is_deterministic() {
        let model = random_model(1, 16, 2, (1, 2, 1));
        let cfg = GenerationConfig {
            max_chars: 40,
            ..GenerationConfig::default()
        };
        let run = || {
            let mut rng = RngState::new(5);
            generate_token_aware(&model, &[0, 1, 2, 3], &cfg, &mut rng).unwrap()
        };
        let (a, _) = run();
        let (b, _) = run();
        assert_eq!(a, b);
    }

    #[test]
    fn layer_units_match_closed_forms_on_token_boundary() {
        // Stop on a token budget so the run ends exactly at an EOT.
        for seed in [3u64, 4, 5] {
            let model = random_model(seed, 16, 2, (2, 3, 2));
            let (a, b, c) = model.config.layers;
            let cfg = GenerationConfig {
                max_tokens: 6,
                max_chars: usize::MAX / 2,
                max_token_length: 8,
                ..GenerationConfig::default()
            };
            let mut rng = RngState::new(seed);
            let (_, ns) = generate_naive(&model, &[2, 4, 6], &cfg, &mut rng).unwrap();
            let mut rng = RngState::new(seed);
            let (_, fs_) = generate_token_aware(&model, &[2, 4, 6], &cfg, &mut rng).unwrap();

            let n = ns.chars_generated as u64;
            let t = ns.tokens_generated as u64;
            assert_eq!(t, 6);
            assert_eq!(ns.layer_units(), (n + t) * (a + b + c) as u64);
            assert_eq!(fs_.chars_generated as u64, n);
            assert_eq!(
                fs_.layer_units(),
                n * c as u64 + t * (a + b + c) as u64
            );
        }
    }

    #[test]
    fn equivalence_on_random_models() {
        for seed in 0..6u64 {
            let model = random_model(100 + seed, 16, 2, (1, 2, 1));
            let report = assert_equivalence(&model, &[1, 5, 9], 60, seed).unwrap();
            assert!(
                report.matched,
                "divergence at step {:?} (seed {seed})",
                report.divergence.as_ref().map(|d| d.step)
            );
            assert_eq!(report.naive_text, report.token_aware_text);
        }
    }

    #[test]
    fn equivalence_holds_under_temperature_sampling_too() {
        let model = random_model(42, 16, 2, (1, 1, 1));
        let cfg = GenerationConfig {
            sampling: Sampling::Temperature(0.9),
            max_chars: 50,
            ..GenerationConfig::default()
        };
        let mut ra = RngState::new(7);
        let (ta, _) = generate_naive(&model, &[3, 1, 4], &cfg, &mut ra).unwrap();
        let mut rb = RngState::new(7);
        let (tb, _) = generate_token_aware(&model, &[3, 1, 4], &cfg, &mut rb).unwrap();
        assert_eq!(ta, tb);
    }

    #[test]
    fn runaway_tokens_get_forced_boundaries() {
        // A model whose head never emits EOT: zero head weights with a
        // negative EOT bias keeps EOT strictly below every character logit.
        let mut model = random_model(9, 16, 2, (1, 1, 1));
        model.lm_head_w.data_mut().fill(0.0);
        let eot = model.config.eot_id();
        model.lm_head_b.data_mut().fill(0.0);
        model.lm_head_b.data_mut()[eot] = -10.0;
        let cfg = GenerationConfig {
            max_tokens: 3,
            max_chars: usize::MAX / 2,
            max_token_length: 5,
            ..GenerationConfig::default()
        };
        let mut rng = RngState::new(0);
        let (_, stats) = generate_token_aware(&model, &[1], &cfg, &mut rng).unwrap();
        assert_eq!(stats.tokens_generated, 3);
        assert_eq!(stats.forced_boundaries, 3);
        assert!(stats.trace.iter().all(|t| t.length == 5));
        // Closed forms still hold with forced boundaries.
        let (a, b, c) = model.config.layers;
        let n = stats.chars_generated as u64;
        assert_eq!(
            stats.layer_units(),
            n * c as u64 + 3 * (a + b + c) as u64
        );
    }

    #[test]
    fn trace_reconciles_with_chars() {
        let model = random_model(11, 16, 2, (1, 1, 1));
        let cfg = GenerationConfig {
            max_chars: 23,
            ..GenerationConfig::default()
        };
        let mut rng = RngState::new(1);
        let (text, stats) = generate_token_aware(&model, &[0, 2], &cfg, &mut rng).unwrap();
        assert_eq!(text.chars().count(), 23);
        let total: usize = stats.trace.iter().map(|t| t.length).sum();
        assert_eq!(total, stats.chars_generated);
        let concat: String = stats.trace.iter().map(|t| t.text.as_str()).collect();
        assert_eq!(concat, text);
    }

    #[test]
    fn benchmark_csv_shape_and_units() {
        let model = random_model(13, 16, 2, (2, 3, 2));
        let dir = tempfile::tempdir().unwrap();
        let csv = dir.path().join("bench.csv");
        let base = GenerationConfig {
            max_token_length: 8,
            ..GenerationConfig::default()
        };
        let result =
            benchmark_speed(&model, &[1, 2], &base, &[3, 5], 2, 0, Some(&csv)).unwrap();
        assert_eq!(result.rows.len(), 4);
        let content = std::fs::read_to_string(&csv).unwrap();
        let mut lines = content.lines();
        assert_eq!(lines.next().unwrap(), BENCHMARK_CSV_HEADER);
        assert_eq!(lines.count(), 4);
        let (a, b, c) = model.config.layers;
        for row in &result.rows {
            let n = row.chars as u64;
            let t = row.n_tokens as u64;
            let expect = match row.mode {
                GenerationMode::Naive => (n + t) * (a + b + c) as u64,
                GenerationMode::TokenAware => n * c as u64 + t * (a + b + c) as u64,
            };
            assert_eq!(row.layer_units, expect);
        }
    }

    #[test]
    fn speed_ratio_closed_form() {
        // (s+1)*12 / (2s+12) at s=4.9 is about 3.2 and exceeds 2 for s>1.5.
        let ratio = |s: f64| (s + 1.0) * 12.0 / (2.0 * s + 12.0);
        assert!((ratio(4.9) - 3.248).abs() < 1e-3);
        assert!(ratio(1.51) > 2.0);
        assert!(ratio(1.49) < 2.0);
        // Monotone: more compression, fewer layer units per character.
        let per_char = |s: f64| 2.0 + 12.0 / s;
        assert!(per_char(5.0) > per_char(6.0));
    }
}
