use crate::error::{Error, Result};

/// A partition of a character sequence into contiguous token spans.
///
/// Spans are end-inclusive `(start, end)` index pairs that tile `0..L` in
/// order, each nonempty.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Segmentation {
    spans: Vec<(usize, usize)>,
}

impl Segmentation {
    /// Build from per-position "last character of a token" flags. The final
    /// position is always treated as a boundary so the partition is total.
    pub fn from_boundaries(is_span_end: &[bool]) -> Self {
        let l = is_span_end.len();
        assert!(l > 0, "segmentation of an empty sequence");
        let mut spans = Vec::new();
        let mut start = 0;
        for (i, &flag) in is_span_end.iter().enumerate() {
            if flag || i == l - 1 {
                spans.push((start, i));
                start = i + 1;
            }
        }
        Segmentation { spans }
    }

    /// Build from explicit spans, validating the partition invariants.
    pub fn from_spans(spans: Vec<(usize, usize)>) -> Result<Self> {
        let mut cursor = 0;
        for &(s, e) in &spans {
            if s != cursor || e < s {
                return Err(Error::InvalidArgument(format!(
                    "spans must tile the sequence contiguously; got ({s},{e}) at cursor {cursor}"
                )));
            }
            cursor = e + 1;
        }
        if spans.is_empty() {
            return Err(Error::InvalidArgument("segmentation needs at least one span".into()));
        }
        Ok(Segmentation { spans })
    }

    pub fn spans(&self) -> &[(usize, usize)] {
        &self.spans
    }

    pub fn num_tokens(&self) -> usize {
        self.spans.len()
    }

    pub fn num_chars(&self) -> usize {
        self.spans.last().map(|&(_, e)| e + 1).unwrap_or(0)
    }

    /// Characters per token, always >= 1.
    pub fn shortening_factor(&self) -> f64 {
        self.num_chars() as f64 / self.num_tokens() as f64
    }

    pub fn span_len(&self, k: usize) -> usize {
        let (s, e) = self.spans[k];
        e - s + 1
    }

    /// Per-position flags marking the last character of each token.
    pub fn span_end_flags(&self) -> Vec<bool> {
        let mut flags = vec![false; self.num_chars()];
        for &(_, e) in &self.spans {
            flags[e] = true;
        }
        flags
    }
}
