//! Extraction of the learned model's segmentation over a corpus, and
//! vocabulary-size-matched training of the subword baselines.

use std::collections::HashMap;

use crate::error::Result;
use crate::model::ToucanModel;
use crate::decoding::segment_prompt;
use crate::tokenizers::stats::TokenStats;
use crate::tokenizers::subword::{train_bpe, train_wordpiece, SubwordTokenizer};
use crate::training::corpus::{Corpus, Split};

/// One learned token occurrence: a span of the split it was extracted from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LearnedToken {
    /// Character offset within the split.
    pub start: usize,
    pub len: usize,
}

fn shard_count() -> usize {
    std::env::var("TOUCAN_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n >= 1)
        .unwrap_or(1)
}

/// Run the deterministic boundary predictor over the split in windows and
/// collect every token span. Window-edge fragments are ordinary tokens; the
/// returned stats record how many windows were scanned. Windows may be
/// sharded across `TOUCAN_THREADS` threads; counts merge in shard order, so
/// the result is independent of the thread count.
pub fn extract_learned_tokens(
    model: &ToucanModel,
    corpus: &Corpus,
    split: Split,
    window: Option<usize>,
) -> Result<(Vec<LearnedToken>, TokenStats)> {
    let data = corpus.split_slice(split);
    let window = window.unwrap_or(model.config.max_seq_len).min(model.config.max_seq_len);
    let ranges: Vec<(usize, usize)> = (0..data.len())
        .step_by(window)
        .map(|s| (s, (s + window).min(data.len())))
        .collect();

    let shards = shard_count().min(ranges.len().max(1));
    let mut tokens: Vec<LearnedToken> = Vec::new();
    if shards <= 1 {
        for &(s, e) in &ranges {
            collect_window(model, data, s, e, &mut tokens)?;
        }
    } else {
        let chunks: Vec<&[(usize, usize)]> = ranges.chunks(ranges.len().div_ceil(shards)).collect();
        let results: Vec<Result<Vec<LearnedToken>>> = std::thread::scope(|scope| {
            let handles: Vec<_> = chunks
                .iter()
                .map(|chunk| {
                    scope.spawn(move || {
                        let mut out = Vec::new();
                        for &(s, e) in *chunk {
                            collect_window(model, data, s, e, &mut out)?;
                        }
                        Ok(out)
                    })
                })
                .collect();
            handles.into_iter().map(|h| h.join().unwrap()).collect()
        });
        for r in results {
            tokens.extend(r?);
        }
    }

    let text = corpus.split_text(split);
    let mut freq: HashMap<String, u64> = HashMap::new();
    for t in &tokens {
        *freq.entry(text[t.start..t.start + t.len].to_string()).or_insert(0) += 1;
    }
    let stats = TokenStats::from_learned(&tokens, freq, ranges.len());
    Ok((tokens, stats))
}

fn collect_window(
    model: &ToucanModel,
    data: &[u8],
    start: usize,
    end: usize,
    out: &mut Vec<LearnedToken>,
) -> Result<()> {
    let seg = segment_prompt(model, &data[start..end])?;
    for &(s, e) in seg.spans() {
        out.push(LearnedToken {
            start: start + s,
            len: e - s + 1,
        });
    }
    Ok(())
}

/// Train BPE and WordPiece at a vocabulary size matching the learned
/// tokenizer's unique token count (clamped up to the alphabet seed size
/// when the count is degenerate; the flag reports the clamp).
pub fn vocab_size_matching(
    unique_token_count: usize,
    train_text: &str,
) -> Result<(SubwordTokenizer, SubwordTokenizer, bool)> {
    let chars_bpe = {
        let mut cs: Vec<char> = train_text.chars().filter(|c| *c != ' ').collect();
        cs.sort_unstable();
        cs.dedup();
        cs.len()
    };
    // WordPiece seeds both plain and continuation forms.
    let clamped = unique_token_count < 2 * chars_bpe;
    let bpe = train_bpe(train_text, unique_token_count.max(chars_bpe))?;
    let wp = train_wordpiece(train_text, unique_token_count.max(2 * chars_bpe))?;
    Ok((bpe, wp, clamped))
}

/// Learned tokens from a held-out split that never occur in the training
/// split's token set, echoing the generalization probe: subword baselines
/// cannot produce unseen vocabulary entries, the learned model can.
pub fn unseen_tokens(
    held_out_freq: &HashMap<String, u64>,
    train_freq: &HashMap<String, u64>,
    examples: usize,
) -> (u64, Vec<String>) {
    let mut count = 0u64;
    let mut sample: Vec<String> = Vec::new();
    let mut keys: Vec<&String> = held_out_freq.keys().collect();
    keys.sort();
    for k in keys {
        if !train_freq.contains_key(k) {
            count += held_out_freq[k];
            if sample.len() < examples {
                sample.push(k.clone());
            }
        }
    }
    (count, sample)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::numerics::RngState;
    use crate::training::corpus::synthetic_text;

    fn degenerate_all_boundary_model() -> ToucanModel {
        let mut rng = RngState::new(0);
        let cfg = ModelConfig {
            d_model: 16,
            n_heads: 2,
            layers: (1, 1, 1),
            max_seq_len: 64,
            ..ModelConfig::default()
        };
        let mut m = ToucanModel::new(cfg, &mut rng).unwrap();
        m.boundary_mlp.w1.data_mut().fill(0.0);
        m.boundary_mlp.w2.data_mut().fill(0.0);
        m.boundary_mlp.b2.data_mut()[0] = 50.0;
        m
    }

    #[test]
    fn all_boundaries_give_single_char_tokens() {
        let model = degenerate_all_boundary_model();
        let corpus = Corpus::from_text("t", &synthetic_text(3000, 1)).unwrap();
        let (tokens, stats) = extract_learned_tokens(&model, &corpus, Split::Train, None).unwrap();
        assert!(tokens.iter().all(|t| t.len == 1));
        assert!(stats.unique_token_count <= 27);
        assert!((stats.compression_rate - 1.0).abs() < 1e-12);
    }

    #[test]
    fn extraction_is_thread_count_invariant() {
        let model = degenerate_all_boundary_model();
        let corpus = Corpus::from_text("t", &synthetic_text(2000, 2)).unwrap();
        std::env::remove_var("TOUCAN_THREADS");
        let (a, _) = extract_learned_tokens(&model, &corpus, Split::Train, Some(50)).unwrap();
        std::env::set_var("TOUCAN_THREADS", "3");
        let (b, _) = extract_learned_tokens(&model, &corpus, Split::Train, Some(50)).unwrap();
        std::env::remove_var("TOUCAN_THREADS");
        assert_eq!(a, b);
    }

    #[test]
    fn unseen_token_counting() {
        let mut train = HashMap::new();
        train.insert("the".to_string(), 10u64);
        let mut test = HashMap::new();
        test.insert("the".to_string(), 2u64);
        test.insert("zebra".to_string(), 3u64);
        let (count, sample) = unseen_tokens(&test, &train, 5);
        assert_eq!(count, 3);
        assert_eq!(sample, vec!["zebra".to_string()]);
    }
}
