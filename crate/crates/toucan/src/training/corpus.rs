//! Corpus ingestion and batching.
//!
//! Text is normalized onto the 27-symbol alphabet `a..z` plus space (space
//! is the last symbol, id 26): lowercase, everything else becomes a space,
//! space runs collapse to one. Splits are contiguous train/valid/test
//! slices, 90/5/5 by default.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::RngState;

/// The fixed character alphabet; index is the label id.
pub const ALPHABET: &[u8; 27] = b"abcdefghijklmnopqrstuvwxyz ";

/// Id of the space symbol.
pub const SPACE_ID: u8 = 26;

pub fn char_to_id(c: char) -> Option<u8> {
    match c {
        'a'..='z' => Some(c as u8 - b'a'),
        ' ' => Some(SPACE_ID),
        _ => None,
    }
}

pub fn id_to_char(id: u8) -> char {
    ALPHABET[id as usize] as char
}

/// Encode text already restricted to the alphabet.
pub fn encode_text(s: &str) -> Result<Vec<u8>> {
    s.chars()
        .map(|c| {
            char_to_id(c).ok_or_else(|| {
                Error::Ingest(format!("character {c:?} outside the a-z/space alphabet"))
            })
        })
        .collect()
}

pub fn decode_ids(ids: &[u8]) -> String {
    ids.iter().map(|&i| id_to_char(i)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Valid,
    Test,
}

/// How bytes outside the alphabet are handled during ingestion.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AlphabetPolicy {
    #[default]
    ReplaceWithSpace,
}

/// Ingestion accounting: bytes that were neither ASCII letters nor
/// whitespace and were replaced per policy.
#[derive(Debug, Clone, Default)]
pub struct IngestReport {
    pub replaced_bytes: usize,
    pub total_bytes: usize,
}

/// An encoded text stream with ordered train/valid/test splits.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub name: String,
    pub alphabet: Vec<char>,
    pub data: Vec<u8>,
    train_end: usize,
    valid_end: usize,
}

impl Corpus {
    /// Normalize and encode `text`, splitting 90/5/5.
    pub fn from_text(name: &str, text: &str) -> Result<Corpus> {
        let (norm, _) = normalize_bytes(text.as_bytes());
        if norm.is_empty() {
            return Err(Error::Ingest(format!(
                "corpus {name:?} is empty after normalization"
            )));
        }
        let data = encode_text(&norm)?;
        let n = data.len();
        let train_end = n * 90 / 100;
        let valid_end = n * 95 / 100;
        if train_end == 0 || valid_end == train_end || valid_end == n {
            return Err(Error::Ingest(format!(
                "corpus {name:?} too small to split ({n} symbols)"
            )));
        }
        Ok(Corpus {
            name: name.to_string(),
            alphabet: ALPHABET.iter().map(|&b| b as char).collect(),
            data,
            train_end,
            valid_end,
        })
    }

    pub fn split_slice(&self, split: Split) -> &[u8] {
        match split {
            Split::Train => &self.data[..self.train_end],
            Split::Valid => &self.data[self.train_end..self.valid_end],
            Split::Test => &self.data[self.valid_end..],
        }
    }

    pub fn split_text(&self, split: Split) -> String {
        decode_ids(self.split_slice(split))
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// Lowercase, map everything outside [a-z]/whitespace to space, collapse
/// space runs, trim. Returns the normalized text and the count of replaced
/// non-letter non-whitespace bytes.
pub fn normalize_bytes(raw: &[u8]) -> (String, usize) {
    let mut out = String::with_capacity(raw.len());
    let mut replaced = 0usize;
    let mut pending_space = false;
    for &b in raw {
        let c = match b {
            b'a'..=b'z' => Some(b as char),
            b'A'..=b'Z' => Some((b + 32) as char),
            b' ' | b'\t' | b'\n' | b'\r' | 0x0b | 0x0c => None,
            _ => {
                replaced += 1;
                None
            }
        };
        match c {
            Some(ch) => {
                if pending_space && !out.is_empty() {
                    out.push(' ');
                }
                pending_space = false;
                out.push(ch);
            }
            None => pending_space = true,
        }
    }
    (out, replaced)
}

/// Read a file and ingest it as a corpus.
pub fn ingest_text(path: &Path, _policy: AlphabetPolicy) -> Result<(Corpus, IngestReport)> {
    let raw = fs::read(path).map_err(|e| Error::io(path, e))?;
    if raw.is_empty() {
        return Err(Error::Ingest(format!("{} is empty", path.display())));
    }
    let (norm, replaced) = normalize_bytes(&raw);
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "corpus".to_string());
    let corpus = Corpus::from_text(&name, &norm)?;
    Ok((
        corpus,
        IngestReport {
            replaced_bytes: replaced,
            total_bytes: raw.len(),
        },
    ))
}

/// One training batch: contiguous non-overlapping windows of the split.
#[derive(Debug, Clone)]
pub struct Batch {
    pub sequences: Vec<Vec<u8>>,
    pub window_offsets: Vec<usize>,
}

/// Cut the split into `seq_len` windows (remainder dropped) and group them
/// into batches in a seed-deterministic shuffled order.
pub fn make_batches(
    corpus: &Corpus,
    split: Split,
    seq_len: usize,
    batch_size: usize,
    shuffle_seed: u64,
) -> Result<Vec<Batch>> {
    let data = corpus.split_slice(split);
    let n_windows = data.len() / seq_len;
    if n_windows == 0 {
        return Err(Error::Ingest(format!(
            "split has {} symbols, shorter than one {seq_len}-symbol window",
            data.len()
        )));
    }
    let mut order: Vec<usize> = (0..n_windows).collect();
    let mut rng = RngState::new(shuffle_seed);
    for i in (1..order.len()).rev() {
        let j = rng.below(i as u64 + 1) as usize;
        order.swap(i, j);
    }
    let mut batches = Vec::new();
    for chunk in order.chunks(batch_size) {
        let mut sequences = Vec::with_capacity(chunk.len());
        let mut window_offsets = Vec::with_capacity(chunk.len());
        for &w in chunk {
            sequences.push(data[w * seq_len..(w + 1) * seq_len].to_vec());
            window_offsets.push(w * seq_len);
        }
        batches.push(Batch {
            sequences,
            window_offsets,
        });
    }
    Ok(batches)
}

// ---------------------------------------------------------------------------
// Synthetic English-like text
// ---------------------------------------------------------------------------

const STEMS: &[&str] = &[
    "time", "year", "people", "way", "day", "man", "thing", "woman", "life", "child", "world",
    "school", "state", "family", "student", "group", "country", "problem", "hand", "part",
    "place", "case", "week", "company", "system", "program", "question", "work", "government",
    "number", "night", "point", "home", "water", "room", "mother", "area", "money", "story",
    "fact", "month", "lot", "right", "study", "book", "eye", "job", "word", "business", "issue",
    "side", "kind", "head", "house", "service", "friend", "father", "power", "hour", "game",
    "line", "end", "member", "law", "car", "city", "community", "name", "president", "team",
    "minute", "idea", "body", "information", "back", "parent", "face", "others", "level",
    "office", "door", "health", "person", "art", "war", "history", "party", "result", "change",
    "morning", "reason", "research", "girl", "guy", "moment", "air", "teacher", "force",
    "education", "foot", "boy", "age", "policy", "process", "music", "market", "sense",
    "nation", "plan", "college", "interest", "death", "experience", "effect", "use", "class",
    "control", "care", "field", "development", "role", "effort", "rate", "heart", "drug",
    "show", "leader", "light", "voice", "wife", "police", "mind", "price", "report", "decision",
    "son", "view", "relationship", "town", "road", "arm", "difference", "value", "building",
    "action", "model", "season", "society", "tax", "director", "position", "player", "record",
    "paper", "space", "ground", "form", "event", "official", "matter", "center", "couple",
    "site", "project", "activity", "star", "table", "need", "court", "american", "oil",
    "situation", "cost", "industry", "figure", "street", "image", "phone", "data", "picture",
    "practice", "piece", "land", "product", "doctor", "wall", "patient", "worker", "news",
    "test", "movie", "north", "love", "support", "technology", "understanding", "theory",
    "language", "structure", "material", "region", "energy", "period", "century", "section",
    "river", "science", "king", "church", "film", "island", "element", "surface", "character",
    "university", "military", "empire", "population", "album", "species", "design", "unit",
];

const VERBS: &[&str] = &[
    "call", "ask", "work", "seem", "feel", "try", "leave", "move", "live", "believe", "hold",
    "bring", "happen", "write", "provide", "sit", "stand", "lose", "pay", "meet", "include",
    "continue", "set", "learn", "lead", "understand", "watch", "follow", "stop", "create",
    "speak", "read", "allow", "add", "spend", "grow", "open", "walk", "win", "offer",
    "remember", "love", "consider", "appear", "buy", "wait", "serve", "die", "send", "expect",
    "build", "stay", "fall", "cut", "reach", "kill", "remain", "suggest", "raise", "pass",
    "sell", "require", "report", "decide", "pull", "record", "develop", "play", "form",
    "start", "cover", "describe", "produce", "locate", "found", "establish", "measure",
];

const FUNCTION_WORDS: &[(&str, f64)] = &[
    ("the", 60.0),
    ("of", 36.0),
    ("and", 32.0),
    ("one", 28.0),
    ("in", 26.0),
    ("a", 24.0),
    ("to", 22.0),
    ("zero", 20.0),
    ("nine", 19.0),
    ("two", 18.0),
    ("is", 14.0),
    ("as", 12.0),
    ("eight", 11.0),
    ("that", 10.5),
    ("for", 10.0),
    ("was", 9.5),
    ("with", 9.0),
    ("seven", 8.5),
    ("it", 8.2),
    ("which", 8.0),
    ("from", 7.8),
    ("five", 7.6),
    ("by", 7.4),
    ("three", 7.2),
    ("on", 7.0),
    ("six", 6.8),
    ("four", 6.6),
    ("are", 6.4),
    ("were", 6.2),
    ("but", 6.0),
    ("also", 5.8),
    ("this", 5.6),
    ("or", 5.4),
    ("his", 5.2),
    ("be", 5.0),
    ("at", 4.8),
    ("an", 4.6),
    ("not", 4.4),
    ("its", 4.2),
    ("first", 4.0),
    ("have", 3.8),
    ("he", 3.6),
    ("other", 3.4),
    ("can", 3.2),
    ("more", 3.0),
];

fn word_table() -> (Vec<String>, Vec<f64>) {
    let mut words: Vec<String> = Vec::new();
    let mut weights: Vec<f64> = Vec::new();
    for &(w, weight) in FUNCTION_WORDS {
        words.push(w.to_string());
        weights.push(weight);
    }
    let mut rank = 0usize;
    let mut push = |w: String, words: &mut Vec<String>, weights: &mut Vec<f64>| {
        words.push(w);
        weights.push(2.2 / (rank as f64 + 2.0));
        rank += 1;
    };
    for &s in STEMS {
        push(s.to_string(), &mut words, &mut weights);
        push(format!("{s}s"), &mut words, &mut weights);
    }
    for &v in VERBS {
        push(v.to_string(), &mut words, &mut weights);
        push(format!("{v}ing"), &mut words, &mut weights);
        push(format!("{v}ed"), &mut words, &mut weights);
        push(format!("{v}ion"), &mut words, &mut weights);
    }
    (words, weights)
}

/// Deterministic English-like word stream over the 27-symbol alphabet.
///
/// Common function words (including spelled-out digits, text8 style) follow
/// a fixed frequency table; content words decay Zipf-style. A fraction of
/// draws emit spelled-out year phrases such as "one nine eight four".
pub fn synthetic_text(n_chars: usize, seed: u64) -> String {
    let (words, weights) = word_table();
    let total: f64 = weights.iter().sum();
    let cumulative: Vec<f64> = weights
        .iter()
        .scan(0.0, |acc, w| {
            *acc += w;
            Some(*acc)
        })
        .collect();
    let digits = ["zero", "one", "two", "three", "four", "five", "six", "seven", "eight", "nine"];
    let mut rng = RngState::new(seed ^ 0x5eed_c0de);
    let mut out = String::with_capacity(n_chars + 16);
    while out.len() < n_chars {
        if !out.is_empty() {
            out.push(' ');
        }
        if rng.uniform() < 0.03 {
            // Year-like phrase: "one nine eight four".
            out.push_str("one nine ");
            out.push_str(digits[rng.below(10) as usize]);
            out.push(' ');
            out.push_str(digits[rng.below(10) as usize]);
            continue;
        }
        let u = rng.uniform() * total;
        let idx = cumulative.partition_point(|&c| c < u).min(words.len() - 1);
        out.push_str(&words[idx]);
    }
    out.truncate(n_chars);
    // Avoid a trailing partial word becoming a stray space.
    while out.ends_with(' ') {
        out.pop();
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashMap;

    #[test]
    fn normalize_lowercases() {
        let (s, _) = normalize_bytes(b"AbC");
        assert_eq!(s, "abc");
    }

    #[test]
    fn normalize_collapses_whitespace() {
        let (s, _) = normalize_bytes(b"a  b\nc");
        assert_eq!(s, "a b c");
    }

    #[test]
    fn normalize_counts_replaced() {
        let (s, replaced) = normalize_bytes(b"a1b\xC3\xA9c");
        assert_eq!(s, "a b c");
        assert_eq!(replaced, 3); // '1' and two utf-8 bytes
    }

    #[test]
    fn splits_are_ordered_and_disjoint() {
        let text = synthetic_text(10_000, 1);
        let c = Corpus::from_text("t", &text).unwrap();
        let (tr, va, te) = (
            c.split_slice(Split::Train).len(),
            c.split_slice(Split::Valid).len(),
            c.split_slice(Split::Test).len(),
        );
        assert_eq!(tr + va + te, c.len());
        assert!(tr > va && va > 0 && te > 0);
        assert!(c.data.iter().all(|&i| i < 27));
    }

    #[test]
    fn empty_corpus_is_an_error() {
        assert!(Corpus::from_text("e", "").is_err());
        assert!(Corpus::from_text("e", "  \n ").is_err());
    }

    #[test]
    fn batches_floor_division_and_disjoint() {
        let text = synthetic_text(2000, 2);
        let c = Corpus::from_text("t", &text).unwrap();
        // Train split is 90%; with window 30 expect floor(len/30) windows.
        let train_len = c.split_slice(Split::Train).len();
        let batches = make_batches(&c, Split::Train, 30, 4, 7).unwrap();
        let n_windows: usize = batches.iter().map(|b| b.sequences.len()).sum();
        assert_eq!(n_windows, train_len / 30);
        let mut seen = HashMap::new();
        for b in &batches {
            for &o in &b.window_offsets {
                assert!(seen.insert(o, ()).is_none(), "offset {o} repeated");
            }
        }
    }

    #[test]
    fn batches_deterministic_under_seed() {
        let text = synthetic_text(3000, 3);
        let c = Corpus::from_text("t", &text).unwrap();
        let a = make_batches(&c, Split::Train, 25, 3, 42).unwrap();
        let b = make_batches(&c, Split::Train, 25, 3, 42).unwrap();
        let offs = |bs: &[Batch]| bs.iter().flat_map(|b| b.window_offsets.clone()).collect::<Vec<_>>();
        assert_eq!(offs(&a), offs(&b));
        let c2 = make_batches(&c, Split::Train, 25, 3, 43).unwrap();
        assert_ne!(offs(&a), offs(&c2));
    }

    #[test]
    fn window_shorter_than_split_errors() {
        let text = synthetic_text(400, 4);
        let c = Corpus::from_text("t", &text).unwrap();
        // Valid split is ~20 chars; a 500-symbol window cannot fit.
        assert!(make_batches(&c, Split::Valid, 500, 1, 0).is_err());
    }

    #[test]
    fn synthetic_text_is_alphabet_only_and_skewed() {
        let text = synthetic_text(50_000, 5);
        assert!(text.chars().all(|c| c == ' ' || c.is_ascii_lowercase()));
        assert!(!text.contains("  "));
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for w in text.split_whitespace() {
            *counts.entry(w).or_default() += 1;
        }
        let mut by_freq: Vec<(&str, usize)> = counts.into_iter().collect();
        by_freq.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        assert_eq!(by_freq[0].0, "the");
        let top5: Vec<&str> = by_freq[..5].iter().map(|&(w, _)| w).collect();
        assert!(top5.contains(&"of") && top5.contains(&"and"), "{top5:?}");
    }
}
