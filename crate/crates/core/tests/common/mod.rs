#![allow(dead_code)]

pub mod oracles;
pub mod synth;

use gramlm::corpus::FineVocab;
use gramlm::lexicon::{JointVocab, NGramLexicon};
use gramlm::maskplan::{plan_for_mask, sample_mask, MaskPlan, Objective, PlanConfig, RngState, Segmented};
use gramlm::model::{generator_forward_and_sample, ModelConfig, ModelParams};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn words(s: &str) -> Vec<String> {
    s.split_whitespace().map(String::from).collect()
}

/// Twelve words, three bigrams and a trigram.
pub fn toy_vocab() -> JointVocab {
    let fine = FineVocab::new(words("a b c d e f g h i j k l"), 4).unwrap();
    let lex = NGramLexicon::from_ngrams([words("a b"), words("c d"), words("e f"), words("g h i")]);
    JointVocab::new(fine, lex)
}

pub fn random_sentences(n: usize, len: usize, seed: u64) -> Vec<Vec<String>> {
    let pool = words("a b c d e f g h i j k l");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let mut s = Vec::new();
            while s.len() < len {
                // Favour lexicon entries so masked slots often carry n-grams.
                match rng.gen_range(0..6) {
                    0 => s.extend(words("a b")),
                    1 => s.extend(words("g h i")),
                    2 => s.extend(words("c d")),
                    _ => s.push(pool[rng.gen_range(0..pool.len())].clone()),
                }
            }
            s.truncate(len);
            s
        })
        .collect()
}

pub fn plans(jv: &JointVocab, objective: Objective, n: usize, seed: u64) -> Vec<MaskPlan> {
    let cfg = PlanConfig {
        rate: 0.3,
        max_query: 4,
        max_len: 64,
    };
    let mut rng = RngState::new(seed);
    random_sentences(n, 9, seed)
        .into_iter()
        .map(|s| {
            let seg = Segmented::new(s, &jv.fine, &jv.ngrams);
            let m = sample_mask(&seg.boundaries, cfg.rate, &mut rng).unwrap();
            plan_for_mask(&seg, &m, objective, jv, &cfg).unwrap()
        })
        .collect()
}

pub fn tiny_config(jv: &JointVocab) -> ModelConfig {
    ModelConfig {
        max_query: 4,
        ..ModelConfig::tiny(jv.fine_len(), jv.ngrams.len())
    }
}

/// Relation plans with generator-sampled, already-labelled slots.
pub fn filled_relation_plans(params: &ModelParams<f64>, jv: &JointVocab, n: usize, seed: u64) -> Vec<MaskPlan> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    plans(jv, Objective::Relation, n, seed)
        .into_iter()
        .map(|p| {
            let s = generator_forward_and_sample(params, &p, jv.fine.mask_id(), &mut rng, 1.0).unwrap();
            p.fill_sampled(&s, jv.len()).unwrap()
        })
        .collect()
}
