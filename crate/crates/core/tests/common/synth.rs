//! Synthetic corpora for tests and acceptance runs.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Topic corpus: each sentence picks a topic and strings together phrases
/// from that topic's small phrase set. Topics use disjoint words.
pub struct TopicWorld {
    pub words: Vec<String>,
    pub phrases: Vec<Vec<String>>,
    topics: Vec<Vec<usize>>,
}

impl TopicWorld {
    pub fn new(topics: usize, per_topic: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let syll = ["ka", "lo", "mi", "ne", "ru", "so", "ti", "vu", "ze", "pa", "de", "gu"];
        let mut next = 0usize;
        let mut fresh = || {
            let i = next;
            next += 1;
            format!("{}{}{}", syll[i % 12], syll[(i / 12) % 12], syll[(i / 144) % 12])
        };
        let mut words = Vec::new();
        let mut phrases = Vec::new();
        let mut groups = Vec::new();
        for _ in 0..topics {
            let mut group = Vec::new();
            for j in 0..per_topic {
                let n = if j % 2 == 0 { 2 } else { 3 };
                let p: Vec<String> = (0..n).map(|_| fresh()).collect();
                words.extend(p.iter().cloned());
                group.push(phrases.len());
                phrases.push(p);
            }
            groups.push(group);
        }
        words.shuffle(&mut rng);
        TopicWorld {
            words,
            phrases,
            topics: groups,
        }
    }

    pub fn sentence<R: Rng>(&self, rng: &mut R, phrases: usize) -> Vec<String> {
        let topic = self.topics.choose(rng).unwrap();
        let mut out = Vec::new();
        for _ in 0..phrases {
            out.extend(self.phrases[*topic.choose(rng).unwrap()].iter().cloned());
        }
        out
    }

    pub fn corpus(&self, bytes: usize, seed: u64) -> Vec<Vec<String>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = Vec::new();
        let mut size = 0;
        while size < bytes {
            let n = rng.gen_range(6..12);
            let s = self.sentence(&mut rng, n);
            size += s.iter().map(|w| w.len() + 1).sum::<usize>();
            out.push(s);
        }
        out
    }
}

/// Zipf-distributed words with a set of planted collocations.
pub fn zipf_corpus(total_words: usize, vocab: usize, seed: u64) -> Vec<Vec<String>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let words: Vec<String> = (0..vocab).map(|i| format!("w{i}")).collect();
    let weights: Vec<f64> = (1..=vocab).map(|r| 1.0 / r as f64).collect();
    let zipf = rand::distributions::WeightedIndex::new(&weights).unwrap();
    let planted: Vec<Vec<String>> = (0..40)
        .map(|i| {
            let n = 2 + i % 2;
            (0..n).map(|_| words[rng.gen_range(0..vocab)].clone()).collect()
        })
        .collect();
    let mut out = Vec::new();
    let mut n = 0;
    while n < total_words {
        let len = rng.gen_range(5..25);
        let mut s = Vec::with_capacity(len);
        while s.len() < len {
            if rng.gen_bool(0.1) {
                s.extend(planted.choose(&mut rng).unwrap().iter().cloned());
            } else {
                s.push(words[rand::distributions::Distribution::sample(&zipf, &mut rng)].clone());
            }
        }
        n += s.len();
        out.push(s);
    }
    out
}
