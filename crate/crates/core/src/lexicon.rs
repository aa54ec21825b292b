//! T-test n-gram lexicon extraction and the joint fine/n-gram identity space.
//!
//! For an l-gram `w = (x_1, .., x_l)` with `p(w) = Count(w) / N_l` and the
//! independence baseline `p'(w) = Π Count(x_i) / N_1`, the score is
//!
//! ```text
//! s = (p(w) - p'(w)) / sqrt(p(w) (1 - p(w)) / N_l)
//! ```
//!
//! Per order, the `k_l` highest scores are kept; the merged lists form the
//! n-gram lexicon whose entries become single identities next to the
//! fine-grained vocabulary.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BinaryHeap, HashMap};
use std::fmt::Write as _;

use crate::corpus::{CountTables, FineVocab};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct ScoredNGram {
    pub words: Vec<String>,
    pub score: f64,
    pub count: u64,
}

impl ScoredNGram {
    pub fn order(&self) -> usize {
        self.words.len()
    }

    pub fn surface(&self) -> String {
        self.words.join(" ")
    }

    /// Rank order: higher score first, then higher count, then
    /// lexicographically smaller words.
    pub fn rank_cmp(&self, other: &Self) -> Ordering {
        other
            .score
            .total_cmp(&self.score)
            .then_with(|| other.count.cmp(&self.count))
            .then_with(|| self.words.cmp(&other.words))
    }
}

pub fn t_statistic(counts: &CountTables, w: &[String]) -> Result<f64> {
    let order = w.len();
    if order == 0 || order > counts.n_max() {
        return Err(Error::Domain(format!(
            "n-gram of order {order} outside counted range 1..={}",
            counts.n_max()
        )));
    }
    let count = counts.count(w);
    if count == 0 {
        return Err(Error::Domain(format!("n-gram '{}' never occurs", w.join(" "))));
    }
    score_with_count(counts, w, count)
}

fn score_with_count(counts: &CountTables, w: &[String], count: u64) -> Result<f64> {
    let n_l = counts.total(w.len()) as f64;
    let n_1 = counts.total(1) as f64;
    let p = count as f64 / n_l;
    let mut baseline = 1.0;
    for x in w {
        let c = counts.unigram_count(x);
        if c == 0 {
            return Err(Error::Domain(format!("unigram '{x}' never occurs")));
        }
        baseline *= c as f64 / n_1;
    }
    let variance = p * (1.0 - p);
    if variance <= 0.0 {
        return Err(Error::Degenerate(format!(
            "'{}' makes up every {}-gram of the corpus",
            w.join(" "),
            w.len()
        )));
    }
    Ok((p - baseline) / (variance / n_l).sqrt())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LexiconConfig {
    /// `k_l` per order l ≥ 2.
    pub k: BTreeMap<usize, usize>,
    pub min_count: u64,
}

impl LexiconConfig {
    /// Bigrams and trigrams at a 2:1 ratio.
    pub fn bigrams_trigrams(k2: usize, k3: usize, min_count: u64) -> Self {
        LexiconConfig {
            k: BTreeMap::from([(2, k2), (3, k3)]),
            min_count,
        }
    }

    pub fn max_order(&self) -> usize {
        self.k.keys().copied().max().unwrap_or(1)
    }

    pub fn describe(&self) -> String {
        let ks: Vec<String> = self.k.iter().map(|(l, k)| format!("{l}:{k}")).collect();
        format!("k={} min_count={}", ks.join(","), self.min_count)
    }
}

impl Default for LexiconConfig {
    fn default() -> Self {
        LexiconConfig::bigrams_trigrams(2000, 1000, 5)
    }
}

/// Heap entry ordered so that the *worst* ranked n-gram sits on top.
struct Worst(ScoredNGram);

impl PartialEq for Worst {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for Worst {}
impl PartialOrd for Worst {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Worst {
    fn cmp(&self, other: &Self) -> Ordering {
        self.0.rank_cmp(&other.0)
    }
}

fn top_k(counts: &CountTables, order: usize, k: usize, min_count: u64) -> Vec<ScoredNGram> {
    let Some(table) = counts.order_table(order) else {
        return Vec::new();
    };
    let mut heap: BinaryHeap<Worst> = BinaryHeap::with_capacity(k + 1);
    for (words, &count) in table {
        if count < min_count {
            continue;
        }
        let score = match score_with_count(counts, words, count) {
            Ok(s) => s,
            Err(e) => {
                log::warn!("skipping n-gram: {e}");
                continue;
            }
        };
        let cand = ScoredNGram {
            words: words.clone(),
            score,
            count,
        };
        if heap.len() < k {
            heap.push(Worst(cand));
        } else if let Some(top) = heap.peek() {
            if cand.rank_cmp(&top.0) == Ordering::Less {
                heap.pop();
                heap.push(Worst(cand));
            }
        }
    }
    let mut out: Vec<ScoredNGram> = heap.into_iter().map(|w| w.0).collect();
    out.sort_by(ScoredNGram::rank_cmp);
    out
}

/// Ranked per-order lexicons merged into one id space (ids 0..len, ordered
/// by order then rank).
#[derive(Debug, Clone, PartialEq)]
pub struct NGramLexicon {
    entries: Vec<ScoredNGram>,
    index: HashMap<Vec<String>, u32>,
    k: BTreeMap<usize, usize>,
}

impl NGramLexicon {
    pub fn empty() -> Self {
        NGramLexicon::from_entries(Vec::new(), BTreeMap::new())
    }

    /// Builds a lexicon from arbitrary entries, keeping the given order and
    /// dropping duplicates.
    pub fn from_entries(entries: Vec<ScoredNGram>, k: BTreeMap<usize, usize>) -> Self {
        let mut index = HashMap::with_capacity(entries.len());
        let mut kept = Vec::with_capacity(entries.len());
        for e in entries {
            if e.words.len() < 2 || index.contains_key(&e.words) {
                continue;
            }
            index.insert(e.words.clone(), kept.len() as u32);
            kept.push(e);
        }
        NGramLexicon {
            entries: kept,
            index,
            k,
        }
    }

    /// Convenience for tests and examples: unscored n-grams.
    pub fn from_ngrams<I, W>(grams: I) -> Self
    where
        I: IntoIterator<Item = W>,
        W: IntoIterator,
        W::Item: Into<String>,
    {
        let entries = grams
            .into_iter()
            .map(|g| ScoredNGram {
                words: g.into_iter().map(Into::into).collect(),
                score: 0.0,
                count: 0,
            })
            .collect();
        NGramLexicon::from_entries(entries, BTreeMap::new())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[ScoredNGram] {
        &self.entries
    }

    pub fn order_entries(&self, order: usize) -> impl Iterator<Item = &ScoredNGram> {
        self.entries.iter().filter(move |e| e.order() == order)
    }

    pub fn id(&self, words: &[String]) -> Option<u32> {
        self.index.get(words).copied()
    }

    pub fn contains(&self, words: &[String]) -> bool {
        self.index.contains_key(words)
    }

    pub fn get(&self, id: u32) -> Option<&ScoredNGram> {
        self.entries.get(id as usize)
    }

    pub fn max_order(&self) -> usize {
        self.entries.iter().map(ScoredNGram::order).max().unwrap_or(1)
    }

    pub fn selection_sizes(&self) -> &BTreeMap<usize, usize> {
        &self.k
    }

    /// TSV: `surface \t order \t t_score \t count`, preceded by one `#`
    /// header line.
    pub fn to_tsv(&self, header: &str) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "# {}", header.replace('\n', " "));
        for e in &self.entries {
            let _ = writeln!(out, "{}\t{}\t{:?}\t{}", e.surface(), e.order(), e.score, e.count);
        }
        out
    }

    pub fn parse_tsv(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        let mut offset = 0;
        for line in text.split_inclusive('\n') {
            let start = offset;
            offset += line.len();
            let line = line.trim_end_matches(['\n', '\r']);
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() != 4 {
                return Err(Error::parse(start, "expected 4 tab-separated columns"));
            }
            let words: Vec<String> = cols[0].split(' ').map(String::from).collect();
            let order: usize = cols[1]
                .parse()
                .map_err(|_| Error::parse(start, "bad order column"))?;
            if order != words.len() {
                return Err(Error::parse(start, "order does not match surface length"));
            }
            let score: f64 = cols[2]
                .parse()
                .map_err(|_| Error::parse(start, "bad score column"))?;
            let count: u64 = cols[3]
                .parse()
                .map_err(|_| Error::parse(start, "bad count column"))?;
            entries.push(ScoredNGram {
                words,
                score,
                count,
            });
        }
        Ok(NGramLexicon::from_entries(entries, BTreeMap::new()))
    }
}

pub fn extract_lexicon(counts: &CountTables, config: &LexiconConfig) -> Result<NGramLexicon> {
    let mut entries = Vec::new();
    for (&order, &k) in &config.k {
        if order < 2 {
            return Err(Error::Argument(format!("lexicon orders start at 2, got {order}")));
        }
        if k == 0 {
            return Err(Error::Argument(format!("k for order {order} must be at least 1")));
        }
        entries.extend(top_k(counts, order, k, config.min_count));
    }
    Ok(NGramLexicon::from_entries(entries, config.k.clone()))
}

/// Identity in the joint space.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Identity {
    Fine(u32),
    NGram(u32),
}

/// `⟨V_F, V_N⟩`: fine ids occupy `[0, |V_F|)`, n-gram ids follow.
#[derive(Debug, Clone, PartialEq)]
pub struct JointVocab {
    pub fine: FineVocab,
    pub ngrams: NGramLexicon,
}

impl JointVocab {
    pub fn new(fine: FineVocab, ngrams: NGramLexicon) -> Self {
        JointVocab { fine, ngrams }
    }

    pub fn len(&self) -> usize {
        self.fine.len() + self.ngrams.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn fine_len(&self) -> usize {
        self.fine.len()
    }

    pub fn first_ngram_id(&self) -> u32 {
        self.fine.len() as u32
    }

    pub fn joint_id(&self, identity: Identity) -> u32 {
        match identity {
            Identity::Fine(id) => id,
            Identity::NGram(id) => self.first_ngram_id() + id,
        }
    }

    pub fn identity(&self, joint_id: u32) -> Option<Identity> {
        let f = self.first_ngram_id();
        if joint_id < f {
            Some(Identity::Fine(joint_id))
        } else if ((joint_id - f) as usize) < self.ngrams.len() {
            Some(Identity::NGram(joint_id - f))
        } else {
            None
        }
    }

    /// Joint id of a multi-word n-gram; `None` when it is not in the lexicon.
    pub fn ngram_id(&self, words: &[String]) -> Option<u32> {
        self.ngrams.id(words).map(|i| self.first_ngram_id() + i)
    }

    /// Looks a surface form up: space-separated words resolve against the
    /// n-gram lexicon, single tokens against the fine vocabulary.
    pub fn lookup(&self, surface: &str) -> Option<u32> {
        if surface.contains(' ') {
            let words: Vec<String> = surface.split(' ').map(String::from).collect();
            self.ngram_id(&words)
        } else {
            self.fine.id(surface)
        }
    }

    pub fn surface(&self, joint_id: u32) -> Option<String> {
        match self.identity(joint_id)? {
            Identity::Fine(id) => self.fine.token(id).map(String::from),
            Identity::NGram(id) => self.ngrams.get(id).map(ScoredNGram::surface),
        }
    }
}
