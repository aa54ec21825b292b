//! Corpus ingestion, word-level n-gram counting and subword tokenization.
//!
//! Lexicon statistics are gathered over *words*; the model consumes
//! *subwords*. [`subword_tokenize`] keeps an alignment map between the two
//! so that word-level n-gram boundaries can be carried over to subword
//! positions.

use std::collections::HashMap;
use std::fs;
use std::ops::Range;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TokenizeConfig {
    pub lowercase: bool,
    /// One document per line. When false, documents are separated by blank
    /// lines.
    pub doc_per_line: bool,
}

impl Default for TokenizeConfig {
    fn default() -> Self {
        TokenizeConfig {
            lowercase: true,
            doc_per_line: true,
        }
    }
}

/// Splits a line on whitespace and detaches every punctuation character
/// into its own word.
pub fn tokenize_words(text: &str, lowercase: bool) -> Vec<String> {
    let mut words = Vec::new();
    for chunk in text.split_whitespace() {
        let mut current = String::new();
        for c in chunk.chars() {
            if c.is_alphanumeric() {
                if lowercase {
                    current.extend(c.to_lowercase());
                } else {
                    current.push(c);
                }
            } else {
                if !current.is_empty() {
                    words.push(std::mem::take(&mut current));
                }
                words.push(c.to_string());
            }
        }
        if !current.is_empty() {
            words.push(current);
        }
    }
    words
}

/// Word sequences grouped by document. N-grams never span two documents.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct WordStream {
    pub documents: Vec<Vec<String>>,
}

impl WordStream {
    pub fn from_text(text: &str, config: &TokenizeConfig) -> Self {
        let mut documents = Vec::new();
        if config.doc_per_line {
            for line in text.lines() {
                let words = tokenize_words(line, config.lowercase);
                if !words.is_empty() {
                    documents.push(words);
                }
            }
        } else {
            let mut current = Vec::new();
            for line in text.lines() {
                if line.trim().is_empty() {
                    if !current.is_empty() {
                        documents.push(std::mem::take(&mut current));
                    }
                } else {
                    current.extend(tokenize_words(line, config.lowercase));
                }
            }
            if !current.is_empty() {
                documents.push(current);
            }
        }
        WordStream { documents }
    }

    pub fn num_words(&self) -> usize {
        self.documents.iter().map(Vec::len).sum()
    }

    pub fn extend(&mut self, other: WordStream) {
        self.documents.extend(other.documents);
    }
}

/// Reads a file as UTF-8, reporting the byte offset of the first invalid
/// sequence.
pub fn read_utf8(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    String::from_utf8(bytes).map_err(|e| Error::Decode {
        path: PathBuf::from(path),
        offset: e.utf8_error().valid_up_to(),
    })
}

pub fn ingest<P: AsRef<Path>>(paths: &[P], config: &TokenizeConfig) -> Result<WordStream> {
    let mut stream = WordStream::default();
    for path in paths {
        let text = read_utf8(path.as_ref())?;
        stream.extend(WordStream::from_text(&text, config));
    }
    Ok(stream)
}

/// Exact n-gram counts for every order `1..=n_max`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CountTables {
    n_max: usize,
    // tables[l - 1] holds the l-gram counts.
    tables: Vec<HashMap<Vec<String>, u64>>,
    totals: Vec<u64>,
}

impl CountTables {
    pub fn empty(n_max: usize) -> Result<Self> {
        if n_max < 2 {
            return Err(Error::Argument(format!("n_max must be at least 2, got {n_max}")));
        }
        Ok(CountTables {
            n_max,
            tables: vec![HashMap::new(); n_max],
            totals: vec![0; n_max],
        })
    }

    pub fn n_max(&self) -> usize {
        self.n_max
    }

    pub fn add_document(&mut self, words: &[String]) {
        for order in 1..=self.n_max {
            if words.len() < order {
                break;
            }
            let table = &mut self.tables[order - 1];
            for window in words.windows(order) {
                match table.get_mut(window) {
                    Some(c) => *c += 1,
                    None => {
                        table.insert(window.to_vec(), 1);
                    }
                }
            }
            self.totals[order - 1] += (words.len() - order + 1) as u64;
        }
    }

    /// Adds every count of `other` into `self`. Merging is associative and
    /// commutative, so shards may be counted independently.
    pub fn merge(&mut self, other: CountTables) -> Result<()> {
        if other.n_max != self.n_max {
            return Err(Error::Argument(format!(
                "cannot merge count tables of order {} and {}",
                self.n_max, other.n_max
            )));
        }
        for (mine, theirs) in self.tables.iter_mut().zip(other.tables) {
            for (gram, count) in theirs {
                *mine.entry(gram).or_insert(0) += count;
            }
        }
        for (mine, theirs) in self.totals.iter_mut().zip(other.totals) {
            *mine += theirs;
        }
        Ok(())
    }

    pub fn count(&self, gram: &[String]) -> u64 {
        if gram.is_empty() || gram.len() > self.n_max {
            return 0;
        }
        self.tables[gram.len() - 1].get(gram).copied().unwrap_or(0)
    }

    pub fn unigram_count(&self, word: &str) -> u64 {
        self.tables[0]
            .get(std::slice::from_ref(&word.to_string()))
            .copied()
            .unwrap_or(0)
    }

    /// N_l: the number of l-gram occurrences in the corpus.
    pub fn total(&self, order: usize) -> u64 {
        if order == 0 || order > self.n_max {
            return 0;
        }
        self.totals[order - 1]
    }

    pub fn order_table(&self, order: usize) -> Option<&HashMap<Vec<String>, u64>> {
        if order == 0 || order > self.n_max {
            None
        } else {
            Some(&self.tables[order - 1])
        }
    }
}

pub fn count_ngrams(stream: &WordStream, n_max: usize) -> Result<CountTables> {
    let mut tables = CountTables::empty(n_max)?;
    for doc in &stream.documents {
        tables.add_document(doc);
    }
    Ok(tables)
}

/// Counts documents in parallel shards of `shard_size` and merges the
/// results. Identical to [`count_ngrams`].
pub fn count_ngrams_parallel(
    stream: &WordStream,
    n_max: usize,
    shard_size: usize,
) -> Result<CountTables> {
    let empty = CountTables::empty(n_max)?;
    let shard_size = shard_size.max(1);
    stream
        .documents
        .par_chunks(shard_size)
        .map(|docs| {
            let mut t = empty.clone();
            for d in docs {
                t.add_document(d);
            }
            Ok::<_, Error>(t)
        })
        .try_reduce(
            || empty.clone(),
            |mut a, b| {
                a.merge(b)?;
                Ok(a)
            },
        )
}

pub const PAD: &str = "[PAD]";
pub const UNK: &str = "[UNK]";
pub const CLS: &str = "[CLS]";
pub const SEP: &str = "[SEP]";
pub const MASK: &str = "[MASK]";
pub const CONTINUATION: &str = "##";
/// Id of `[MASK]` in every [`FineVocab`].
pub const MASK_ID: u32 = 4;

const FIXED_RESERVED: [&str; 5] = [PAD, UNK, CLS, SEP, MASK];

/// Indexed query mask symbol `[M<i>]`, 1-based.
pub fn query_symbol(i: usize) -> String {
    format!("[M{i}]")
}

/// Fine-grained (subword) vocabulary.
///
/// Layout: `[PAD] [UNK] [CLS] [SEP] [MASK] [M1] .. [M<max_query>]` followed
/// by ordinary subwords. Ids are line numbers of the vocabulary file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FineVocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
    max_query: usize,
}

impl FineVocab {
    /// Builds a vocabulary from the reserved symbols followed by `tokens`
    /// (duplicates and reserved names are skipped).
    pub fn new<I, S>(tokens: I, max_query: usize) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        if max_query == 0 {
            return Err(Error::Config("vocabulary needs at least one query symbol".into()));
        }
        let mut all: Vec<String> = FIXED_RESERVED.iter().map(|s| s.to_string()).collect();
        all.extend((1..=max_query).map(query_symbol));
        let mut index: HashMap<String, u32> = all
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        for tok in tokens {
            let tok = tok.into();
            if tok.is_empty() || index.contains_key(&tok) {
                continue;
            }
            index.insert(tok.clone(), all.len() as u32);
            all.push(tok);
        }
        Ok(FineVocab {
            tokens: all,
            index,
            max_query,
        })
    }

    /// Parses the one-token-per-line format, validating the reserved prefix.
    /// Leading lines starting with `"# "` are comments; ids count from the
    /// first line after them.
    pub fn parse(text: &str) -> Result<Self> {
        let mut lines: Vec<&str> = text.lines().collect();
        let mut offset = 0usize;
        let comments = lines.iter().take_while(|l| l.starts_with("# ")).count();
        for l in lines.drain(..comments) {
            offset += l.len() + 1;
        }
        for (i, expected) in FIXED_RESERVED.iter().enumerate() {
            match lines.get(i) {
                Some(l) if l == expected => offset += l.len() + 1,
                _ => {
                    return Err(Error::parse(
                        offset,
                        format!("line {} must be the reserved symbol {expected}", i + 1),
                    ))
                }
            }
        }
        let mut max_query = 0;
        while lines
            .get(FIXED_RESERVED.len() + max_query)
            .is_some_and(|l| *l == query_symbol(max_query + 1))
        {
            max_query += 1;
        }
        if max_query == 0 {
            return Err(Error::parse(offset, "missing query symbol [M1] after [MASK]"));
        }
        let rest = &lines[FIXED_RESERVED.len() + max_query..];
        let mut seen = std::collections::HashSet::new();
        for (i, l) in rest.iter().enumerate() {
            if l.is_empty() || !seen.insert(*l) {
                return Err(Error::Config(format!(
                    "vocabulary line {} is empty or duplicated",
                    FIXED_RESERVED.len() + max_query + i + 1
                )));
            }
        }
        FineVocab::new(rest.iter().copied(), max_query)
    }

    pub fn load(path: &Path) -> Result<Self> {
        FineVocab::parse(&read_utf8(path)?)
    }

    pub fn to_file_string(&self) -> String {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        s
    }

    /// [`FineVocab::to_file_string`] preceded by a `# header` comment line.
    pub fn to_file_string_with_header(&self, header: &str) -> String {
        format!("# {}\n{}", header.replace('\n', " "), self.to_file_string())
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn max_query(&self) -> usize {
        self.max_query
    }

    pub fn pad_id(&self) -> u32 {
        0
    }

    pub fn unk_id(&self) -> u32 {
        1
    }

    pub fn cls_id(&self) -> u32 {
        2
    }

    pub fn sep_id(&self) -> u32 {
        3
    }

    pub fn mask_id(&self) -> u32 {
        MASK_ID
    }

    /// Id of `[M<i>]`, `i` 1-based.
    pub fn query_id(&self, i: usize) -> Option<u32> {
        if i == 0 || i > self.max_query {
            None
        } else {
            Some((FIXED_RESERVED.len() + i - 1) as u32)
        }
    }

    pub fn num_reserved(&self) -> usize {
        FIXED_RESERVED.len() + self.max_query
    }
}

/// Subword ids for a word sequence, with `spans[w]` covering word `w`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Subwords {
    pub ids: Vec<u32>,
    pub spans: Vec<Range<usize>>,
}

const MAX_WORD_CHARS: usize = 100;

/// Whole-word vocabulary: words seen at least `min_count` times, most
/// frequent first (ties in byte order), at most `max_size` of them.
pub fn build_vocab(stream: &WordStream, min_count: u64, max_size: usize, max_query: usize) -> Result<FineVocab> {
    let mut counts: HashMap<&str, u64> = HashMap::new();
    for w in stream.documents.iter().flatten() {
        *counts.entry(w.as_str()).or_default() += 1;
    }
    let mut ranked: Vec<(&str, u64)> = counts.into_iter().filter(|&(_, c)| c >= min_count).collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
    ranked.truncate(max_size);
    FineVocab::new(ranked.into_iter().map(|(w, _)| w), max_query)
}

/// Greedy longest-match segmentation of one word. Non-initial pieces carry
/// the `##` prefix. Returns `None` when the word cannot be covered.
fn wordpiece(word: &str, vocab: &FineVocab) -> Option<Vec<u32>> {
    let chars: Vec<char> = word.chars().collect();
    if chars.len() > MAX_WORD_CHARS {
        return None;
    }
    let mut pieces = Vec::new();
    let mut start = 0;
    while start < chars.len() {
        let mut end = chars.len();
        let mut found = None;
        while start < end {
            let mut piece: String = chars[start..end].iter().collect();
            if start > 0 {
                piece.insert_str(0, CONTINUATION);
            }
            if let Some(id) = vocab.id(&piece) {
                found = Some(id);
                break;
            }
            end -= 1;
        }
        pieces.push(found?);
        start = end;
    }
    Some(pieces)
}

pub fn subword_tokenize(words: &[String], vocab: &FineVocab) -> Subwords {
    let mut ids = Vec::with_capacity(words.len());
    let mut spans = Vec::with_capacity(words.len());
    for w in words {
        let start = ids.len();
        match wordpiece(w, vocab) {
            Some(p) => ids.extend(p),
            None => ids.push(vocab.unk_id()),
        }
        spans.push(start..ids.len());
    }
    Subwords { ids, spans }
}
