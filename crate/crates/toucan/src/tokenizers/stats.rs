//! Tokenization statistics and the comparison report files.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::model::ToucanModel;
use crate::decoding::segment_prompt;
use crate::tokenizers::learned::LearnedToken;
use crate::tokenizers::subword::SubwordTokenizer;
use crate::training::corpus::encode_text;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StatsSource {
    Model,
    Bpe,
    WordPiece,
}

impl StatsSource {
    pub fn as_str(&self) -> &'static str {
        match self {
            StatsSource::Model => "model",
            StatsSource::Bpe => "bpe",
            StatsSource::WordPiece => "wp",
        }
    }
}

/// Render a token for tables: spaces become underscores so learned tokens
/// like " the" read as "_the".
pub fn render_token(tok: &str) -> String {
    tok.replace(' ', "_")
}

/// Frequency and length statistics for one tokenization of a corpus split.
///
/// Character-count conventions differ by source and are recorded as
/// produced: learned tokens include their literal spaces; BPE/WordPiece
/// counts cover the non-space characters of words, with
/// `compression_rate_with_spaces` additionally crediting one implicit space
/// per word boundary.
#[derive(Debug, Clone)]
pub struct TokenStats {
    pub source: StatsSource,
    pub freq: HashMap<String, u64>,
    /// token length -> number of token occurrences of that length.
    pub length_histogram: BTreeMap<usize, u64>,
    pub unique_token_count: usize,
    pub compression_rate: f64,
    pub compression_rate_with_spaces: Option<f64>,
    pub total_tokens: u64,
    pub total_chars: u64,
    /// Windows scanned during extraction (model source only).
    pub windows: usize,
}

impl TokenStats {
    pub fn from_learned(
        tokens: &[LearnedToken],
        freq: HashMap<String, u64>,
        windows: usize,
    ) -> TokenStats {
        let mut hist: BTreeMap<usize, u64> = BTreeMap::new();
        let mut chars = 0u64;
        for t in tokens {
            *hist.entry(t.len).or_insert(0) += 1;
            chars += t.len as u64;
        }
        TokenStats {
            source: StatsSource::Model,
            unique_token_count: freq.len(),
            compression_rate: chars as f64 / tokens.len().max(1) as f64,
            compression_rate_with_spaces: None,
            total_tokens: tokens.len() as u64,
            total_chars: chars,
            windows,
            freq,
            length_histogram: hist,
        }
    }

    /// Encode `text` with a subword tokenizer and aggregate statistics.
    pub fn from_subword(tok: &SubwordTokenizer, text: &str, source: StatsSource) -> TokenStats {
        let mut freq: HashMap<String, u64> = HashMap::new();
        let mut hist: BTreeMap<usize, u64> = BTreeMap::new();
        let mut total_tokens = 0u64;
        let mut total_chars = 0u64;
        let mut n_words = 0u64;
        for word in text.split_whitespace() {
            n_words += 1;
            for piece in tok.encode_word(word) {
                let len = piece.trim_start_matches("##").chars().count();
                *freq.entry(piece).or_insert(0) += 1;
                *hist.entry(len).or_insert(0) += 1;
                total_tokens += 1;
                total_chars += len as u64;
            }
        }
        let with_spaces = if total_tokens == 0 {
            1.0
        } else {
            (total_chars + n_words.saturating_sub(1)) as f64 / total_tokens as f64
        };
        TokenStats {
            source,
            unique_token_count: freq.len(),
            compression_rate: total_chars as f64 / total_tokens.max(1) as f64,
            compression_rate_with_spaces: Some(with_spaces),
            total_tokens,
            total_chars,
            windows: 0,
            freq,
            length_histogram: hist,
        }
    }

    /// Most frequent tokens, ties broken lexicographically.
    pub fn top_k(&self, k: usize) -> Vec<(String, u64)> {
        let mut items: Vec<(String, u64)> = self
            .freq
            .iter()
            .map(|(s, &c)| (s.clone(), c))
            .collect();
        items.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        items.truncate(k);
        items
    }

    /// Histogram mass must reconcile with total characters per convention.
    pub fn histogram_checksum(&self) -> u64 {
        self.length_histogram
            .iter()
            .map(|(&len, &count)| len as u64 * count)
            .sum()
    }
}

/// Jensen-Shannon divergence (base-2, in [0, 1]) between two length
/// histograms.
pub fn js_divergence(a: &BTreeMap<usize, u64>, b: &BTreeMap<usize, u64>) -> f64 {
    let ta: u64 = a.values().sum();
    let tb: u64 = b.values().sum();
    if ta == 0 || tb == 0 {
        return 1.0;
    }
    let keys: std::collections::BTreeSet<usize> =
        a.keys().chain(b.keys()).copied().collect();
    let mut jsd = 0.0;
    for k in keys {
        let p = *a.get(&k).unwrap_or(&0) as f64 / ta as f64;
        let q = *b.get(&k).unwrap_or(&0) as f64 / tb as f64;
        let m = 0.5 * (p + q);
        if p > 0.0 {
            jsd += 0.5 * p * (p / m).log2();
        }
        if q > 0.0 {
            jsd += 0.5 * q * (q / m).log2();
        }
    }
    jsd
}

/// First learned-model token containing `word` as a whole word, plus the
/// split-relative character index of that token.
pub fn first_occurrence(
    word: &str,
    learned: &[LearnedToken],
    split_text: &str,
) -> Option<(String, usize)> {
    for t in learned {
        let text = &split_text[t.start..t.start + t.len];
        if text.split(' ').any(|w| w == word) {
            return Some((text.to_string(), t.start));
        }
    }
    None
}

/// Subword tokenization of a phrase, tokens joined with ": ".
pub fn phrase_dump_subword(tok: &SubwordTokenizer, phrase: &str) -> String {
    tok.encode(phrase).join(": ")
}

/// Learned-model tokenization of a phrase, tokens joined with ": ".
pub fn phrase_dump_model(model: &ToucanModel, phrase: &str) -> Result<String> {
    let ids = encode_text(phrase)?;
    let seg = segment_prompt(model, &ids)?;
    let toks: Vec<String> = seg
        .spans()
        .iter()
        .map(|&(s, e)| phrase[s..=e].to_string())
        .collect();
    Ok(toks.join(": "))
}

/// Everything the comparison report needs.
pub struct ComparisonReport<'a> {
    pub model_stats: &'a TokenStats,
    pub bpe: &'a SubwordTokenizer,
    pub bpe_stats: &'a TokenStats,
    pub wp: &'a SubwordTokenizer,
    pub wp_stats: &'a TokenStats,
    pub learned: &'a [LearnedToken],
    pub split_text: &'a str,
    pub unseen_held_out: Option<(u64, Vec<String>)>,
}

impl ComparisonReport<'_> {
    /// Emit histogram CSVs, top-k tables, the first-occurrence report, and
    /// phrase dumps into `dir`. Returns the created paths.
    pub fn emit(
        &self,
        model: &ToucanModel,
        dir: &Path,
        k: usize,
        phrases: &[String],
    ) -> Result<Vec<PathBuf>> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut created = Vec::new();

        for stats in [self.model_stats, self.bpe_stats, self.wp_stats] {
            let path = dir.join(format!("{}_lengths.csv", stats.source.as_str()));
            let mut f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
            writeln!(f, "length,count").map_err(|e| Error::io(&path, e))?;
            for (&len, &count) in &stats.length_histogram {
                writeln!(f, "{len},{count}").map_err(|e| Error::io(&path, e))?;
            }
            created.push(path);

            let path = dir.join(format!("top_tokens_{}.csv", stats.source.as_str()));
            let mut f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
            writeln!(f, "rank,token,count").map_err(|e| Error::io(&path, e))?;
            for (rank, (tok, count)) in stats.top_k(k).into_iter().enumerate() {
                writeln!(f, "{},{},{}", rank + 1, render_token(&tok), count)
                    .map_err(|e| Error::io(&path, e))?;
            }
            created.push(path);
        }

        // First occurrence of top subword tokens inside learned tokens.
        let path = dir.join("first_occurrence.csv");
        let mut f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        writeln!(f, "source,word,first_token,index").map_err(|e| Error::io(&path, e))?;
        for stats in [self.bpe_stats, self.wp_stats] {
            for (tok, _) in stats.top_k(k) {
                let word = tok.trim_start_matches("##");
                match first_occurrence(word, self.learned, self.split_text) {
                    Some((text, index)) => writeln!(
                        f,
                        "{},{},{},{}",
                        stats.source.as_str(),
                        word,
                        render_token(&text),
                        index
                    ),
                    None => writeln!(f, "{},{},-,-", stats.source.as_str(), word),
                }
                .map_err(|e| Error::io(&path, e))?;
            }
        }
        created.push(path);

        // Side-by-side phrase dumps, ": " between tokens.
        let path = dir.join("phrases.txt");
        let mut f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        for phrase in phrases {
            writeln!(f, "[phrase] {phrase}").map_err(|e| Error::io(&path, e))?;
            writeln!(f, "  model  {}", phrase_dump_model(model, phrase)?)
                .map_err(|e| Error::io(&path, e))?;
            writeln!(f, "  bpe    {}", phrase_dump_subword(self.bpe, phrase))
                .map_err(|e| Error::io(&path, e))?;
            writeln!(f, "  wp     {}", phrase_dump_subword(self.wp, phrase))
                .map_err(|e| Error::io(&path, e))?;
        }
        created.push(path);

        // Summary with compression rates under both space conventions and
        // the held-out generalization probe.
        let path = dir.join("summary.txt");
        let mut f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        for stats in [self.model_stats, self.bpe_stats, self.wp_stats] {
            write!(
                f,
                "{}: tokens={} unique={} chars={} compression={:.3}",
                stats.source.as_str(),
                stats.total_tokens,
                stats.unique_token_count,
                stats.total_chars,
                stats.compression_rate
            )
            .map_err(|e| Error::io(&path, e))?;
            if let Some(ws) = stats.compression_rate_with_spaces {
                write!(f, " compression_with_spaces={ws:.3}").map_err(|e| Error::io(&path, e))?;
            }
            if stats.windows > 0 {
                write!(f, " windows={}", stats.windows).map_err(|e| Error::io(&path, e))?;
            }
            writeln!(f).map_err(|e| Error::io(&path, e))?;
        }
        writeln!(
            f,
            "bpe_wp_length_jsd={:.6}",
            js_divergence(&self.bpe_stats.length_histogram, &self.wp_stats.length_histogram)
        )
        .map_err(|e| Error::io(&path, e))?;
        if let Some((count, examples)) = &self.unseen_held_out {
            writeln!(
                f,
                "held_out_unseen_tokens={count} examples={}",
                examples
                    .iter()
                    .map(|e| render_token(e))
                    .collect::<Vec<_>>()
                    .join(",")
            )
            .map_err(|e| Error::io(&path, e))?;
        }
        created.push(path);
        Ok(created)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenizers::subword::train_bpe;

    #[test]
    fn subword_stats_conserve_characters() {
        let text = "the cat sat on the mat the end";
        let tok = train_bpe(text, 30).unwrap();
        let stats = TokenStats::from_subword(&tok, text, StatsSource::Bpe);
        let non_space: u64 = text.chars().filter(|c| *c != ' ').count() as u64;
        assert_eq!(stats.total_chars, non_space);
        assert_eq!(stats.histogram_checksum(), non_space);
        assert!(stats.compression_rate >= 1.0);
        assert!(stats.compression_rate_with_spaces.unwrap() >= stats.compression_rate);
    }

    #[test]
    fn jsd_properties() {
        let mut a = BTreeMap::new();
        a.insert(1usize, 5u64);
        a.insert(2, 10);
        assert!(js_divergence(&a, &a).abs() < 1e-12);
        let mut b = BTreeMap::new();
        b.insert(9usize, 7u64);
        let d = js_divergence(&a, &b);
        assert!((d - 1.0).abs() < 1e-12, "disjoint supports give 1 bit, got {d}");
    }

    #[test]
    fn first_occurrence_whole_word_only() {
        let text = "them the cat";
        let learned = vec![
            LearnedToken { start: 0, len: 4 },  // "them"
            LearnedToken { start: 4, len: 4 },  // " the"
            LearnedToken { start: 8, len: 4 },  // " cat"
        ];
        let hit = first_occurrence("the", &learned, text).unwrap();
        assert_eq!(hit.1, 4);
        assert_eq!(hit.0, " the");
    }

    #[test]
    fn render_spaces_as_underscores() {
        assert_eq!(render_token(" the"), "_the");
        assert_eq!(render_token("of the"), "of_the");
    }
}
