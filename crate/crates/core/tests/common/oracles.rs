//! Slow, obviously-correct reference implementations.

use std::collections::HashMap;

use gramlm::lexicon::{NGramLexicon, ScoredNGram};
use gramlm::segmenter::{enumerate_paths, BoundarySeq};

/// Counts every window of every order, scores all of them and sorts.
pub fn brute_force_lexicon(docs: &[Vec<String>], k: &[(usize, usize)], min_count: u64) -> Vec<ScoredNGram> {
    let max = k.iter().map(|&(l, _)| l).max().unwrap_or(1);
    let mut counts: Vec<HashMap<Vec<String>, u64>> = vec![HashMap::new(); max + 1];
    let mut totals = vec![0u64; max + 1];
    for doc in docs {
        for l in 1..=max {
            for w in doc.windows(l) {
                *counts[l].entry(w.to_vec()).or_default() += 1;
                totals[l] += 1;
            }
        }
    }
    let mut out = Vec::new();
    for &(l, kl) in k {
        let mut scored: Vec<ScoredNGram> = Vec::new();
        for (w, &c) in &counts[l] {
            if c < min_count {
                continue;
            }
            let p = c as f64 / totals[l] as f64;
            let mut baseline = 1.0;
            for x in w {
                baseline *= counts[1][std::slice::from_ref(x)] as f64 / totals[1] as f64;
            }
            let variance = p * (1.0 - p);
            if variance <= 0.0 {
                continue;
            }
            scored.push(ScoredNGram {
                words: w.clone(),
                score: (p - baseline) / (variance / totals[l] as f64).sqrt(),
                count: c,
            });
        }
        scored.sort_by(|a, b| {
            b.score
                .partial_cmp(&a.score)
                .unwrap()
                .then(b.count.cmp(&a.count))
                .then(a.words.cmp(&b.words))
        });
        scored.truncate(kl);
        out.extend(scored);
    }
    out
}

/// Fewest segments over every tiling; ties go to the tiling whose segment
/// lengths, read left to right, are largest.
pub fn brute_force_segmentation(words: &[String], lex: &NGramLexicon) -> BoundarySeq {
    enumerate_paths(words, lex)
        .unwrap()
        .into_iter()
        .min_by(|a, b| {
            a.num_segments()
                .cmp(&b.num_segments())
                .then_with(|| b.lengths().cmp(&a.lengths()))
        })
        .unwrap()
}
