//! Maximum-matching n-gram segmentation.
//!
//! A *path* tiles a word sequence into segments, each either a single word
//! or a multi-word n-gram from the lexicon. The chosen boundaries belong to
//! a path with the fewest segments; among those, the one whose segment
//! lengths are lexicographically largest (leftmost-longest) wins.

use std::ops::Range;

use crate::error::{Error, Result};
use crate::lexicon::NGramLexicon;

/// Longest sequence [`enumerate_paths`] accepts.
pub const MAX_ENUMERATION_LEN: usize = 24;

/// Starting boundaries `b_1 = 1 < b_2 < .. < b_|b| = |x| + 1`, 1-based.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BoundarySeq {
    boundaries: Vec<usize>,
}

impl BoundarySeq {
    pub fn new(boundaries: Vec<usize>) -> Result<Self> {
        if boundaries.first() != Some(&1) {
            return Err(Error::Argument("boundaries must start at 1".into()));
        }
        if boundaries.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Argument("boundaries must be strictly increasing".into()));
        }
        Ok(BoundarySeq { boundaries })
    }

    pub fn from_lengths(lengths: &[usize]) -> Self {
        let mut b = Vec::with_capacity(lengths.len() + 1);
        b.push(1);
        for &l in lengths {
            b.push(b.last().unwrap() + l);
        }
        BoundarySeq { boundaries: b }
    }

    /// All-unigram boundaries for a sequence of `len` items.
    pub fn unigrams(len: usize) -> Self {
        BoundarySeq {
            boundaries: (1..=len + 1).collect(),
        }
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.boundaries
    }

    /// `|b| - 1`.
    pub fn num_segments(&self) -> usize {
        self.boundaries.len().saturating_sub(1)
    }

    pub fn seq_len(&self) -> usize {
        self.boundaries.last().map_or(0, |l| l - 1)
    }

    /// 0-based half-open range of segment `j` (1-based, as in `M`).
    pub fn segment(&self, j: usize) -> Range<usize> {
        self.boundaries[j - 1] - 1..self.boundaries[j] - 1
    }

    pub fn segments(&self) -> impl Iterator<Item = Range<usize>> + '_ {
        self.boundaries.windows(2).map(|w| w[0] - 1..w[1] - 1)
    }

    pub fn lengths(&self) -> Vec<usize> {
        self.boundaries.windows(2).map(|w| w[1] - w[0]).collect()
    }

    /// Carries word-level boundaries over to subword positions using a
    /// word→subword span map.
    pub fn to_subword(&self, spans: &[Range<usize>]) -> Result<BoundarySeq> {
        if self.seq_len() != spans.len() {
            return Err(Error::Argument(format!(
                "boundaries cover {} words but alignment has {}",
                self.seq_len(),
                spans.len()
            )));
        }
        let total = spans.last().map_or(0, |s| s.end);
        let b = self
            .boundaries
            .iter()
            .map(|&w| if w - 1 < spans.len() { spans[w - 1].start + 1 } else { total + 1 })
            .collect();
        BoundarySeq::new(b)
    }
}

fn valid_segment(words: &[String], lex: &NGramLexicon) -> bool {
    words.len() == 1 || lex.contains(words)
}

/// Every tiling of `words` into single words and lexicon n-grams.
pub fn enumerate_paths(words: &[String], lex: &NGramLexicon) -> Result<Vec<BoundarySeq>> {
    if words.len() > MAX_ENUMERATION_LEN {
        return Err(Error::Argument(format!(
            "path enumeration is limited to {MAX_ENUMERATION_LEN} words, got {}",
            words.len()
        )));
    }
    fn walk(
        words: &[String],
        lex: &NGramLexicon,
        max: usize,
        start: usize,
        lengths: &mut Vec<usize>,
        out: &mut Vec<BoundarySeq>,
    ) {
        if start == words.len() {
            out.push(BoundarySeq::from_lengths(lengths));
            return;
        }
        for len in 1..=max.min(words.len() - start) {
            if valid_segment(&words[start..start + len], lex) {
                lengths.push(len);
                walk(words, lex, max, start + len, lengths, out);
                lengths.pop();
            }
        }
    }
    let mut out = Vec::new();
    walk(words, lex, lex.max_order().max(1), 0, &mut Vec::new(), &mut out);
    Ok(out)
}

/// Shortest-path boundaries, leftmost-longest among ties. Linear in
/// `|words| × max_order` lexicon lookups.
pub fn extract_boundaries(words: &[String], lex: &NGramLexicon) -> BoundarySeq {
    let n = words.len();
    let max = lex.max_order().max(1);
    // fewest[i]: minimum number of segments tiling words[i..].
    let mut fewest = vec![usize::MAX; n + 1];
    fewest[n] = 0;
    for i in (0..n).rev() {
        for len in 1..=max.min(n - i) {
            if fewest[i + len] != usize::MAX && valid_segment(&words[i..i + len], lex) {
                fewest[i] = fewest[i].min(fewest[i + len] + 1);
            }
        }
    }
    let mut lengths = Vec::with_capacity(fewest[0]);
    let mut i = 0;
    while i < n {
        let len = (1..=max.min(n - i))
            .rev()
            .find(|&len| {
                fewest[i + len] != usize::MAX
                    && fewest[i + len] + 1 == fewest[i]
                    && valid_segment(&words[i..i + len], lex)
            })
            .expect("a unigram step is always available");
        lengths.push(len);
        i += len;
    }
    BoundarySeq::from_lengths(&lengths)
}
