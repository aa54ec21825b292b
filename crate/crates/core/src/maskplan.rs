//! Training-example layouts for the four masking objectives.
//!
//! Given a segmented sequence and a set `M` of masked segments:
//!
//! * **contiguous**: every subword of a masked segment becomes `[MASK]` and
//!   is predicted at its own slot from the fine vocabulary;
//! * **explicit**: a masked segment collapses to a single `[MASK]` slot whose
//!   target is the segment's joint identity (an n-gram id for multi-word
//!   segments, the fine id for single-subword words);
//! * **comprehensive**: the explicit layout plus indexed query symbols
//!   `[M1]..[Mn]` appended after the context, one per subword of the
//!   masked segment, each sharing the position id of its slot;
//! * **relation**: the comprehensive layout with every slot filled by a
//!   generator-sampled identity and per-position replaced-token labels.
//!
//! A masked segment that has no joint identity (a single word split into
//! several subwords) or that is longer than the query budget is laid out
//! contiguously in every objective.

use std::io::{Read, Write};

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{subword_tokenize, FineVocab, Subwords};
use crate::error::{Error, Result};
use crate::lexicon::{JointVocab, NGramLexicon};
use crate::segmenter::{extract_boundaries, BoundarySeq};

pub const PLAN_FORMAT_VERSION: u16 = 1;
const PLAN_FILE_MAGIC: &[u8; 8] = b"GRMPLAN\0";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Objective {
    Contiguous,
    Explicit,
    Comprehensive,
    Relation,
}

impl Objective {
    pub fn code(self) -> u8 {
        match self {
            Objective::Contiguous => 0,
            Objective::Explicit => 1,
            Objective::Comprehensive => 2,
            Objective::Relation => 3,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Some(match code {
            0 => Objective::Contiguous,
            1 => Objective::Explicit,
            2 => Objective::Comprehensive,
            3 => Objective::Relation,
            _ => return None,
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            Objective::Contiguous => "contiguous",
            Objective::Explicit => "explicit",
            Objective::Comprehensive => "comprehensive",
            Objective::Relation => "relation",
        }
    }

    /// Whether masked n-grams are collapsed to single slots.
    pub fn uses_ngram_identities(self) -> bool {
        !matches!(self, Objective::Contiguous)
    }
}

impl std::str::FromStr for Objective {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "contiguous" => Ok(Objective::Contiguous),
            "explicit" => Ok(Objective::Explicit),
            "comprehensive" => Ok(Objective::Comprehensive),
            "relation" => Ok(Objective::Relation),
            other => Err(Error::Config(format!("unknown objective '{other}'"))),
        }
    }
}

/// Seed plus draw counter. Every draw derives a fresh generator from both,
/// so a state value fully determines what comes next.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub counter: u64,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl RngState {
    pub fn new(seed: u64) -> Self {
        RngState { seed, counter: 0 }
    }

    /// Independent stream for shard `index` of a run seeded with `seed`.
    pub fn for_shard(seed: u64, index: u64) -> Self {
        RngState::new(splitmix64(seed ^ splitmix64(index.wrapping_add(1))))
    }

    pub fn next_rng(&mut self) -> ChaCha8Rng {
        let s = splitmix64(self.seed ^ splitmix64(self.counter));
        self.counter += 1;
        ChaCha8Rng::seed_from_u64(s)
    }
}

/// Picks `max(1, round(rate · (|b| - 1)))` distinct segments uniformly.
/// Returns 1-based segment indexes in increasing order.
pub fn sample_mask(b: &BoundarySeq, rate: f64, rng: &mut RngState) -> Result<Vec<usize>> {
    if !(rate > 0.0 && rate < 1.0) {
        return Err(Error::Argument(format!("mask rate must lie in (0, 1), got {rate}")));
    }
    let n = b.num_segments();
    if n == 0 {
        return Err(Error::Argument("cannot mask an empty boundary sequence".into()));
    }
    let k = ((rate * n as f64).round() as usize).clamp(1, n);
    let mut picked: Vec<usize> = index::sample(&mut rng.next_rng(), n, k)
        .into_iter()
        .map(|i| i + 1)
        .collect();
    picked.sort_unstable();
    Ok(picked)
}

/// One sequence ready for masking: words, their subwords and word-level
/// n-gram boundaries.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Segmented {
    pub words: Vec<String>,
    pub subwords: Subwords,
    pub boundaries: BoundarySeq,
}

impl Segmented {
    pub fn new(words: Vec<String>, fine: &FineVocab, lex: &NGramLexicon) -> Self {
        let subwords = subword_tokenize(&words, fine);
        let boundaries = extract_boundaries(&words, lex);
        Segmented {
            words,
            subwords,
            boundaries,
        }
    }

    /// Subword-level boundaries.
    pub fn subword_boundaries(&self) -> BoundarySeq {
        self.boundaries
            .to_subword(&self.subwords.spans)
            .expect("alignment covers every word")
    }

    /// Splits a long document into pieces of at most `max_len` subwords,
    /// cutting only between n-gram segments. A single segment longer than
    /// `max_len` is dropped.
    pub fn chunk_document(
        words: &[String],
        fine: &FineVocab,
        lex: &NGramLexicon,
        max_len: usize,
    ) -> Vec<Segmented> {
        let whole = Segmented::new(words.to_vec(), fine, lex);
        if whole.subwords.ids.len() <= max_len {
            return if words.is_empty() { Vec::new() } else { vec![whole] };
        }
        let mut out = Vec::new();
        let mut cur_words: Vec<String> = Vec::new();
        let mut cur_len = 0;
        let flush = |cur_words: &mut Vec<String>, out: &mut Vec<Segmented>| {
            if !cur_words.is_empty() {
                out.push(Segmented::new(std::mem::take(cur_words), fine, lex));
            }
        };
        for seg in whole.boundaries.segments() {
            let sub_len = whole.subwords.spans[seg.end - 1].end - whole.subwords.spans[seg.start].start;
            if sub_len > max_len {
                flush(&mut cur_words, &mut out);
                cur_len = 0;
                continue;
            }
            if cur_len + sub_len > max_len {
                flush(&mut cur_words, &mut out);
                cur_len = 0;
            }
            cur_words.extend_from_slice(&whole.words[seg]);
            cur_len += sub_len;
        }
        flush(&mut cur_words, &mut out);
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Target {
    /// Row in the concatenated context+query sequence.
    pub row: u32,
    pub id: u32,
}

/// Bookkeeping for one masked segment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskedSpan {
    /// 1-based index into the boundary list (an element of `M`).
    pub segment: u32,
    /// First context slot occupied by the segment.
    pub slot: u32,
    /// Whether the segment has a coarse (joint identity) target.
    pub coarse: bool,
    /// Number of fine targets contributed by the segment.
    pub fine: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskPlan {
    pub objective: Objective,
    pub context_ids: Vec<u32>,
    /// Position ids for context then queries; context positions are 1..=T.
    pub positions: Vec<u32>,
    pub query_ids: Vec<u32>,
    pub spans: Vec<MaskedSpan>,
    /// Coarse targets in span order, one per span with `coarse == true`.
    pub coarse_targets: Vec<Target>,
    /// Fine targets grouped by span, in span order.
    pub fine_targets: Vec<Target>,
    pub rtd_labels: Option<Vec<bool>>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlanConfig {
    pub rate: f64,
    /// Longest masked segment (in subwords) that receives query symbols.
    pub max_query: usize,
    pub max_len: usize,
}

impl Default for PlanConfig {
    fn default() -> Self {
        PlanConfig {
            rate: 0.15,
            max_query: 8,
            max_len: 128,
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Layout {
    Contiguous,
    Explicit,
    Comprehensive,
}

fn build_layout(
    seg: &Segmented,
    masked: &[usize],
    jv: Option<&JointVocab>,
    fine: &FineVocab,
    layout: Layout,
    max_query: usize,
) -> Result<MaskPlan> {
    let b = &seg.boundaries;
    let n = b.num_segments();
    if masked.windows(2).any(|w| w[0] >= w[1]) || masked.iter().any(|&j| j == 0 || j > n) {
        return Err(Error::Plan(format!(
            "masked set {masked:?} is not a sorted subset of 1..={n}"
        )));
    }
    if layout == Layout::Comprehensive && max_query > fine.max_query() {
        return Err(Error::Config(format!(
            "query budget {max_query} exceeds the vocabulary's {} query symbols",
            fine.max_query()
        )));
    }
    let mask_id = fine.mask_id();
    let mut context = Vec::with_capacity(seg.subwords.ids.len());
    let mut spans = Vec::with_capacity(masked.len());
    let mut coarse_targets = Vec::new();
    let mut fine_targets = Vec::new();
    // (query symbol id, slot, fine id), rows assigned once T is known.
    let mut queries: Vec<(u32, u32, u32)> = Vec::new();
    let mut next_mask = masked.iter().peekable();

    for (j, words) in b.segments().enumerate() {
        let j = j + 1;
        let sub = seg.subwords.spans[words.start].start..seg.subwords.spans[words.end - 1].end;
        let tokens = &seg.subwords.ids[sub];
        if next_mask.peek() != Some(&&j) {
            context.extend_from_slice(tokens);
            continue;
        }
        next_mask.next();
        let slot = context.len() as u32;
        let identity = if layout == Layout::Contiguous {
            None
        } else if words.len() > 1 {
            let jv = jv.expect("identity layouts carry a joint vocabulary");
            let id = jv.ngram_id(&seg.words[words.clone()]).ok_or_else(|| {
                Error::Plan(format!(
                    "masked n-gram '{}' is not in the lexicon",
                    seg.words[words.clone()].join(" ")
                ))
            })?;
            Some(id)
        } else if tokens.len() == 1 {
            Some(tokens[0])
        } else {
            None
        };
        let too_long = layout == Layout::Comprehensive && tokens.len() > max_query;
        if too_long {
            log::warn!(
                "masked segment of {} subwords exceeds the query budget {max_query}; masking contiguously",
                tokens.len()
            );
        }
        match identity {
            Some(id) if !too_long => {
                context.push(mask_id);
                coarse_targets.push(Target { row: slot, id });
                let mut n_fine = 0;
                if layout == Layout::Comprehensive {
                    for (i, &tok) in tokens.iter().enumerate() {
                        let q = fine.query_id(i + 1).expect("checked against query budget");
                        queries.push((q, slot, tok));
                        n_fine += 1;
                    }
                }
                spans.push(MaskedSpan {
                    segment: j as u32,
                    slot,
                    coarse: true,
                    fine: n_fine,
                });
            }
            _ => {
                for &tok in tokens {
                    fine_targets.push(Target {
                        row: context.len() as u32,
                        id: tok,
                    });
                    context.push(mask_id);
                }
                spans.push(MaskedSpan {
                    segment: j as u32,
                    slot,
                    coarse: false,
                    fine: tokens.len() as u32,
                });
            }
        }
    }

    let t = context.len() as u32;
    let mut positions: Vec<u32> = (1..=t).collect();
    let mut query_ids = Vec::with_capacity(queries.len());
    // Query fine targets slot into span order; contiguous fallbacks were
    // pushed in order already, so merge by slot.
    let mut query_targets: Vec<(u32, Target)> = Vec::with_capacity(queries.len());
    for (qi, &(sym, slot, tok)) in queries.iter().enumerate() {
        query_ids.push(sym);
        positions.push(slot + 1);
        query_targets.push((
            slot,
            Target {
                row: t + qi as u32,
                id: tok,
            },
        ));
    }
    if !query_targets.is_empty() {
        let mut merged = Vec::with_capacity(fine_targets.len() + query_targets.len());
        let mut ctx = fine_targets.into_iter().peekable();
        let mut qry = query_targets.into_iter().peekable();
        loop {
            let take_ctx = match (ctx.peek(), qry.peek()) {
                (Some(c), Some((slot, _))) => c.row < *slot,
                (Some(_), None) => true,
                (None, Some(_)) => false,
                (None, None) => break,
            };
            if take_ctx {
                merged.push(ctx.next().unwrap());
            } else {
                merged.push(qry.next().unwrap().1);
            }
        }
        fine_targets = merged;
    }

    let objective = match layout {
        Layout::Contiguous => Objective::Contiguous,
        Layout::Explicit => Objective::Explicit,
        Layout::Comprehensive => Objective::Comprehensive,
    };
    Ok(MaskPlan {
        objective,
        context_ids: context,
        positions,
        query_ids,
        spans,
        coarse_targets,
        fine_targets,
        rtd_labels: None,
    })
}

pub fn plan_contiguous(seg: &Segmented, masked: &[usize], fine: &FineVocab) -> Result<MaskPlan> {
    build_layout(seg, masked, None, fine, Layout::Contiguous, 0)
}

pub fn plan_explicit(seg: &Segmented, masked: &[usize], jv: &JointVocab) -> Result<MaskPlan> {
    build_layout(seg, masked, Some(jv), &jv.fine, Layout::Explicit, 0)
}

pub fn plan_comprehensive(
    seg: &Segmented,
    masked: &[usize],
    jv: &JointVocab,
    max_query: usize,
) -> Result<MaskPlan> {
    build_layout(seg, masked, Some(jv), &jv.fine, Layout::Comprehensive, max_query)
}

/// Comprehensive layout with every coarse slot filled by `sampled[k]`, the
/// identity drawn for the k-th masked segment. Samples for segments laid
/// out contiguously are ignored.
pub fn plan_relation(
    seg: &Segmented,
    masked: &[usize],
    jv: &JointVocab,
    max_query: usize,
    sampled: &[u32],
) -> Result<MaskPlan> {
    if sampled.len() != masked.len() {
        return Err(Error::Argument(format!(
            "{} sampled identities for {} masked segments",
            sampled.len(),
            masked.len()
        )));
    }
    let plan = plan_comprehensive(seg, masked, jv, max_query)?;
    let per_coarse: Vec<u32> = plan
        .spans
        .iter()
        .zip(sampled)
        .filter(|(s, _)| s.coarse)
        .map(|(_, &id)| id)
        .collect();
    plan.fill_sampled(&per_coarse, jv.len())
}

/// Additive self-attention mask over the `T + Q` rows of a plan: context
/// rows see only context columns; query rows see the context and
/// themselves.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttnMask {
    pub context_len: usize,
    pub query_len: usize,
}

impl AttnMask {
    pub fn new(context_len: usize, query_len: usize) -> Self {
        AttnMask {
            context_len,
            query_len,
        }
    }

    pub fn size(&self) -> usize {
        self.context_len + self.query_len
    }

    pub fn allows(&self, row: usize, col: usize) -> bool {
        col < self.context_len || row == col
    }

    /// Entry of the `{0, -inf}` matrix.
    pub fn value(&self, row: usize, col: usize) -> f64 {
        if self.allows(row, col) {
            0.0
        } else {
            f64::NEG_INFINITY
        }
    }

    pub fn to_matrix(&self) -> Vec<Vec<f64>> {
        let n = self.size();
        (0..n)
            .map(|i| (0..n).map(|j| self.value(i, j)).collect())
            .collect()
    }
}

pub fn build_attention_mask(plan: &MaskPlan) -> AttnMask {
    AttnMask::new(plan.context_len(), plan.query_len())
}

impl MaskPlan {
    pub fn context_len(&self) -> usize {
        self.context_ids.len()
    }

    pub fn query_len(&self) -> usize {
        self.query_ids.len()
    }

    pub fn input_len(&self) -> usize {
        self.context_len() + self.query_len()
    }

    /// Context followed by query ids.
    pub fn input_ids(&self) -> Vec<u32> {
        let mut v = self.context_ids.clone();
        v.extend_from_slice(&self.query_ids);
        v
    }

    pub fn attention_mask(&self) -> AttnMask {
        build_attention_mask(self)
    }

    pub fn masked_set(&self) -> Vec<usize> {
        self.spans.iter().map(|s| s.segment as usize).collect()
    }

    /// The generator's view: the context with every coarse slot reset to
    /// `[MASK]`, no queries, only coarse targets.
    pub fn explicit_view(&self, mask_id: u32) -> MaskPlan {
        let t = self.context_len();
        let mut context = self.context_ids.clone();
        for c in &self.coarse_targets {
            context[c.row as usize] = mask_id;
        }
        let fine_targets = self
            .fine_targets
            .iter()
            .filter(|f| (f.row as usize) < t)
            .copied()
            .collect();
        let spans = self
            .spans
            .iter()
            .map(|s| MaskedSpan {
                fine: if s.coarse { 0 } else { s.fine },
                ..*s
            })
            .collect();
        MaskPlan {
            objective: Objective::Explicit,
            context_ids: context,
            positions: self.positions[..t].to_vec(),
            query_ids: Vec::new(),
            spans,
            coarse_targets: self.coarse_targets.clone(),
            fine_targets,
            rtd_labels: None,
        }
    }

    /// Fills each coarse slot with a sampled identity (one per coarse
    /// target) and labels every context position 1 where it matches the
    /// original-identity sequence.
    pub fn fill_sampled(&self, sampled: &[u32], joint_len: usize) -> Result<MaskPlan> {
        if sampled.len() != self.coarse_targets.len() {
            return Err(Error::Argument(format!(
                "{} sampled identities for {} coarse slots",
                sampled.len(),
                self.coarse_targets.len()
            )));
        }
        if let Some(bad) = sampled.iter().find(|&&id| id as usize >= joint_len) {
            return Err(Error::Argument(format!(
                "sampled id {bad} outside joint vocabulary of size {joint_len}"
            )));
        }
        let t = self.context_len();
        // Original identities: coarse slots hold y, contiguous slots the
        // original subword, everything else is untouched.
        let mut original = self.context_ids.clone();
        for f in &self.fine_targets {
            if (f.row as usize) < t {
                original[f.row as usize] = f.id;
            }
        }
        let mut context = self.context_ids.clone();
        for (c, &s) in self.coarse_targets.iter().zip(sampled) {
            original[c.row as usize] = c.id;
            context[c.row as usize] = s;
        }
        let labels = context.iter().zip(&original).map(|(a, b)| a == b).collect();
        Ok(MaskPlan {
            objective: Objective::Relation,
            context_ids: context,
            rtd_labels: Some(labels),
            ..self.clone()
        })
    }

    /// Coarse targets attached to each span (`None` for contiguous spans)
    /// and the span's fine-target range.
    pub fn span_targets(&self) -> Vec<(Option<Target>, std::ops::Range<usize>)> {
        let mut coarse = self.coarse_targets.iter();
        let mut start = 0;
        self.spans
            .iter()
            .map(|s| {
                let c = if s.coarse { coarse.next().copied() } else { None };
                let r = start..start + s.fine as usize;
                start = r.end;
                (c, r)
            })
            .collect()
    }
}

/// Samples `M` and lays out one example for `objective`. Relation plans
/// are returned in the comprehensive layout tagged `Relation`, unfilled:
/// identities are sampled by the generator during training.
pub fn make_plan(
    seg: &Segmented,
    objective: Objective,
    jv: &JointVocab,
    config: &PlanConfig,
    rng: &mut RngState,
) -> Result<MaskPlan> {
    let masked = sample_mask(&seg.boundaries, config.rate, rng)?;
    plan_for_mask(seg, &masked, objective, jv, config)
}

pub fn plan_for_mask(
    seg: &Segmented,
    masked: &[usize],
    objective: Objective,
    jv: &JointVocab,
    config: &PlanConfig,
) -> Result<MaskPlan> {
    match objective {
        Objective::Contiguous => plan_contiguous(seg, masked, &jv.fine),
        Objective::Explicit => plan_explicit(seg, masked, jv),
        Objective::Comprehensive => plan_comprehensive(seg, masked, jv, config.max_query),
        Objective::Relation => {
            let mut p = plan_comprehensive(seg, masked, jv, config.max_query)?;
            p.objective = Objective::Relation;
            Ok(p)
        }
    }
}

/// Builds plans for every document. Each document draws from its own
/// stream derived from `(seed, document index)`, so the output does not
/// depend on how the work is scheduled.
pub fn make_plans(
    documents: &[Vec<String>],
    objective: Objective,
    jv: &JointVocab,
    config: &PlanConfig,
    seed: u64,
) -> Result<Vec<MaskPlan>> {
    let per_doc: Vec<Result<Vec<MaskPlan>>> = documents
        .par_iter()
        .enumerate()
        .map(|(i, doc)| {
            let mut rng = RngState::for_shard(seed, i as u64);
            Segmented::chunk_document(doc, &jv.fine, &jv.ngrams, config.max_len)
                .iter()
                .map(|seg| make_plan(seg, objective, jv, config, &mut rng))
                .collect()
        })
        .collect();
    let mut out = Vec::new();
    for plans in per_doc {
        out.extend(plans?);
    }
    Ok(out)
}

fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

pub fn serialize_plan(plan: &MaskPlan) -> Vec<u8> {
    let mut body = Vec::with_capacity(64 + 8 * plan.input_len());
    body.extend_from_slice(&PLAN_FORMAT_VERSION.to_le_bytes());
    body.push(plan.objective.code());
    put_u32(&mut body, plan.context_len() as u32);
    put_u32(&mut body, plan.query_len() as u32);
    for &id in &plan.context_ids {
        put_u32(&mut body, id);
    }
    for &p in &plan.positions {
        put_u32(&mut body, p);
    }
    for &id in &plan.query_ids {
        put_u32(&mut body, id);
    }
    put_u32(&mut body, plan.spans.len() as u32);
    for s in &plan.spans {
        put_u32(&mut body, s.segment);
        put_u32(&mut body, s.slot);
        body.push(s.coarse as u8);
        put_u32(&mut body, s.fine);
    }
    for targets in [&plan.coarse_targets, &plan.fine_targets] {
        put_u32(&mut body, targets.len() as u32);
        for t in targets {
            put_u32(&mut body, t.row);
            put_u32(&mut body, t.id);
        }
    }
    match &plan.rtd_labels {
        None => body.push(0),
        Some(labels) => {
            body.push(1);
            let mut bits = vec![0u8; labels.len().div_ceil(8)];
            for (i, &l) in labels.iter().enumerate() {
                if l {
                    bits[i / 8] |= 1 << (i % 8);
                }
            }
            body.extend_from_slice(&bits);
        }
    }
    let mut out = Vec::with_capacity(body.len() + 4);
    put_u32(&mut out, body.len() as u32);
    out.extend_from_slice(&body);
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    base: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::parse(
                self.base + self.pos,
                format!("record truncated: needed {n} more bytes"),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u32s(&mut self, n: usize) -> Result<Vec<u32>> {
        let raw = self.take(n.checked_mul(4).ok_or_else(|| {
            Error::parse(self.base + self.pos, "length overflow")
        })?)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn targets(&mut self) -> Result<Vec<Target>> {
        let n = self.u32()? as usize;
        let flat = self.u32s(n.checked_mul(2).ok_or_else(|| {
            Error::parse(self.base + self.pos, "length overflow")
        })?)?;
        Ok(flat
            .chunks_exact(2)
            .map(|c| Target { row: c[0], id: c[1] })
            .collect())
    }
}

/// Parses one length-prefixed record from the front of `bytes`, returning
/// the plan and the number of bytes consumed.
pub fn parse_plan(bytes: &[u8]) -> Result<(MaskPlan, usize)> {
    parse_plan_at(bytes, 0)
}

fn parse_plan_at(bytes: &[u8], base: usize) -> Result<(MaskPlan, usize)> {
    if bytes.len() < 4 {
        return Err(Error::parse(base, "record truncated: missing length prefix"));
    }
    let len = u32::from_le_bytes(bytes[..4].try_into().unwrap()) as usize;
    if bytes.len() - 4 < len {
        return Err(Error::parse(
            base,
            format!("record truncated: length {len} but {} bytes remain", bytes.len() - 4),
        ));
    }
    let mut c = Cursor {
        bytes: &bytes[4..4 + len],
        pos: 0,
        base: base + 4,
    };
    let version = c.u16()?;
    if version != PLAN_FORMAT_VERSION {
        return Err(Error::Version {
            found: version as u32,
            expected: PLAN_FORMAT_VERSION as u32,
        });
    }
    let code = c.u8()?;
    let objective = Objective::from_code(code)
        .ok_or_else(|| Error::parse(base + 6, format!("unknown objective code {code}")))?;
    let t = c.u32()? as usize;
    let q = c.u32()? as usize;
    let context_ids = c.u32s(t)?;
    let positions = c.u32s(t + q)?;
    let query_ids = c.u32s(q)?;
    let n_spans = c.u32()? as usize;
    let mut spans = Vec::with_capacity(n_spans.min(len));
    for _ in 0..n_spans {
        let segment = c.u32()?;
        let slot = c.u32()?;
        let coarse = match c.u8()? {
            0 => false,
            1 => true,
            other => return Err(Error::parse(base + 4 + c.pos - 1, format!("bad flag {other}"))),
        };
        let fine = c.u32()?;
        spans.push(MaskedSpan {
            segment,
            slot,
            coarse,
            fine,
        });
    }
    let coarse_targets = c.targets()?;
    let fine_targets = c.targets()?;
    let rtd_labels = match c.u8()? {
        0 => None,
        1 => {
            let bits = c.take(t.div_ceil(8))?;
            Some((0..t).map(|i| bits[i / 8] & (1 << (i % 8)) != 0).collect())
        }
        other => {
            return Err(Error::parse(
                base + 4 + c.pos - 1,
                format!("bad label flag {other}"),
            ))
        }
    };
    if c.pos != len {
        return Err(Error::parse(base + 4 + c.pos, "trailing bytes in record"));
    }
    let plan = MaskPlan {
        objective,
        context_ids,
        positions,
        query_ids,
        spans,
        coarse_targets,
        fine_targets,
        rtd_labels,
    };
    Ok((plan, 4 + len))
}

/// Writes a plan file: magic, a length-prefixed provenance header (free
/// text, typically JSON), then records.
pub fn write_plan_file<W: Write>(mut w: W, header: &str, plans: &[MaskPlan]) -> std::io::Result<()> {
    w.write_all(PLAN_FILE_MAGIC)?;
    w.write_all(&(header.len() as u32).to_le_bytes())?;
    w.write_all(header.as_bytes())?;
    for p in plans {
        w.write_all(&serialize_plan(p))?;
    }
    w.flush()
}

/// Reads a plan file, returning its header and records.
pub fn read_plan_file<R: Read>(mut r: R) -> Result<(String, Vec<MaskPlan>)> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)
        .map_err(|e| Error::parse(0, format!("read failed: {e}")))?;
    parse_plan_file(&bytes)
}

pub fn parse_plan_file(bytes: &[u8]) -> Result<(String, Vec<MaskPlan>)> {
    if bytes.len() < 12 || &bytes[..8] != PLAN_FILE_MAGIC {
        return Err(Error::parse(0, "not a plan file"));
    }
    let hlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    if bytes.len() - 12 < hlen {
        return Err(Error::parse(8, "header truncated"));
    }
    let header = String::from_utf8(bytes[12..12 + hlen].to_vec())
        .map_err(|e| Error::parse(12 + e.utf8_error().valid_up_to(), "header is not UTF-8"))?;
    let mut pos = 12 + hlen;
    let mut plans = Vec::new();
    while pos < bytes.len() {
        let (p, used) = parse_plan_at(&bytes[pos..], pos)?;
        plans.push(p);
        pos += used;
    }
    Ok((header, plans))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn w(s: &str) -> Vec<String> {
        s.split(' ').map(String::from).collect()
    }

    fn toy() -> (JointVocab, Segmented) {
        let fine = FineVocab::new(w("x1 x2 x3 x4 x5 x6"), 8).unwrap();
        let lex = NGramLexicon::from_ngrams([w("x2 x3")]);
        let seg = Segmented::new(w("x1 x2 x3 x4 x5 x6"), &fine, &lex);
        (JointVocab::new(fine, lex), seg)
    }

    fn id(jv: &JointVocab, s: &str) -> u32 {
        jv.lookup(s).unwrap()
    }

    #[test]
    fn sample_mask_sizes_and_errors() {
        let b = BoundarySeq::unigrams(20);
        let mut rng = RngState::new(7);
        assert_eq!(sample_mask(&b, 0.15, &mut rng).unwrap().len(), 3);
        let b5 = BoundarySeq::unigrams(5);
        assert_eq!(sample_mask(&b5, 0.05, &mut rng).unwrap().len(), 1);
        assert!(sample_mask(&BoundarySeq::unigrams(0), 0.15, &mut rng).is_err());
        assert!(sample_mask(&b, 0.0, &mut rng).is_err());
        assert!(sample_mask(&b, 1.0, &mut rng).is_err());
    }

    #[test]
    fn sample_mask_is_seeded() {
        let b = BoundarySeq::unigrams(40);
        let a = sample_mask(&b, 0.15, &mut RngState::new(3)).unwrap();
        let c = sample_mask(&b, 0.15, &mut RngState::new(3)).unwrap();
        assert_eq!(a, c);
        assert!(a.iter().all(|&j| (1..=40).contains(&j)));
    }

    #[test]
    fn contiguous_layout() {
        let (jv, seg) = toy();
        let m = jv.fine.mask_id();
        let p = plan_contiguous(&seg, &[2, 4], &jv.fine).unwrap();
        let want = vec![id(&jv, "x1"), m, m, id(&jv, "x4"), m, id(&jv, "x6")];
        assert_eq!(p.context_ids, want);
        assert_eq!(p.fine_targets.len(), 3);
        assert_eq!(p.fine_targets[0], Target { row: 1, id: id(&jv, "x2") });
        assert_eq!(p.fine_targets[2], Target { row: 4, id: id(&jv, "x5") });
        assert!(p.coarse_targets.is_empty() && p.query_ids.is_empty());
    }

    #[test]
    fn explicit_layout() {
        let (jv, seg) = toy();
        let m = jv.fine.mask_id();
        let p = plan_explicit(&seg, &[2, 4], &jv).unwrap();
        assert_eq!(p.context_ids, vec![id(&jv, "x1"), m, id(&jv, "x4"), m, id(&jv, "x6")]);
        assert_eq!(
            p.coarse_targets,
            vec![
                Target { row: 1, id: id(&jv, "x2 x3") },
                Target { row: 3, id: id(&jv, "x5") },
            ]
        );
        assert!(p.coarse_targets[0].id >= jv.first_ngram_id());
        assert!(p.coarse_targets[1].id < jv.first_ngram_id());
        assert!(p.fine_targets.is_empty());
        assert_eq!(p.positions, vec![1, 2, 3, 4, 5]);
    }

    #[test]
    fn comprehensive_layout() {
        let (jv, seg) = toy();
        let p = plan_comprehensive(&seg, &[2, 4], &jv, 8).unwrap();
        assert_eq!(p.context_len(), 5);
        let q1 = jv.fine.query_id(1).unwrap();
        let q2 = jv.fine.query_id(2).unwrap();
        assert_eq!(p.query_ids, vec![q1, q2, q1]);
        assert_eq!(&p.positions[5..], &[2, 2, 4]);
        assert_eq!(
            p.fine_targets,
            vec![
                Target { row: 5, id: id(&jv, "x2") },
                Target { row: 6, id: id(&jv, "x3") },
                Target { row: 7, id: id(&jv, "x5") },
            ]
        );
        assert_eq!(p.coarse_targets.len(), 2);
    }

    #[test]
    fn comprehensive_query_budget() {
        let (jv, seg) = toy();
        // Budget 1 forces the bigram to fall back to contiguous masking.
        let p = plan_comprehensive(&seg, &[2], &jv, 1).unwrap();
        assert!(p.coarse_targets.is_empty());
        assert_eq!(p.fine_targets.len(), 2);
        assert!(p.query_ids.is_empty());
        assert!(matches!(
            plan_comprehensive(&seg, &[2], &jv, 9),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn missing_ngram_is_plan_error() {
        let (jv, _) = toy();
        let lex = NGramLexicon::from_ngrams([w("x3 x4")]);
        let seg = Segmented::new(w("x1 x2 x3 x4 x5 x6"), &jv.fine, &lex);
        assert!(matches!(plan_explicit(&seg, &[3], &jv), Err(Error::Plan(_))));
    }

    #[test]
    fn relation_layout_and_labels() {
        let (jv, seg) = toy();
        let fake = id(&jv, "x6");
        let p = plan_relation(&seg, &[2, 4], &jv, 8, &[fake, id(&jv, "x5")]).unwrap();
        assert_eq!(
            p.context_ids,
            vec![id(&jv, "x1"), fake, id(&jv, "x4"), id(&jv, "x5"), id(&jv, "x6")]
        );
        assert_eq!(p.rtd_labels, Some(vec![true, false, true, true, true]));
        let truth = plan_relation(&seg, &[2, 4], &jv, 8, &[id(&jv, "x2 x3"), id(&jv, "x5")]).unwrap();
        assert!(truth.rtd_labels.unwrap().iter().all(|&l| l));
        assert!(plan_relation(&seg, &[2, 4], &jv, 8, &[fake]).is_err());
        assert!(plan_relation(&seg, &[2, 4], &jv, 8, &[fake, 10_000]).is_err());
    }

    #[test]
    fn mask_layout() {
        let m = AttnMask::new(5, 2);
        for i in 0..5 {
            for j in 0..7 {
                assert_eq!(m.allows(i, j), j < 5);
            }
        }
        assert!(m.allows(5, 5) && !m.allows(5, 6));
        assert!(m.allows(6, 6) && !m.allows(6, 5));
        let zero = AttnMask::new(4, 0).to_matrix();
        assert!(zero.iter().flatten().all(|&v| v == 0.0));
    }

    #[test]
    fn record_errors() {
        let (jv, seg) = toy();
        let p = plan_comprehensive(&seg, &[2, 4], &jv, 8).unwrap();
        let bytes = serialize_plan(&p);
        assert_eq!(parse_plan(&bytes).unwrap(), (p, bytes.len()));
        for cut in [2, 10, bytes.len() - 1] {
            assert!(matches!(parse_plan(&bytes[..cut]), Err(Error::Parse { .. })));
        }
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(parse_plan(&bad), Err(Error::Version { found: 9, .. })));
    }

    #[test]
    fn chunking_respects_segments() {
        let fine = FineVocab::new(w("a b c d e"), 2).unwrap();
        let lex = NGramLexicon::from_ngrams([w("b c")]);
        let chunks = Segmented::chunk_document(&w("a b c d e a b c"), &fine, &lex, 3);
        let flat: Vec<String> = chunks.iter().flat_map(|c| c.words.clone()).collect();
        assert_eq!(flat, w("a b c d e a b c"));
        assert!(chunks.iter().all(|c| c.subwords.ids.len() <= 3));
        assert_eq!(chunks[0].words, w("a b c"));
    }
}
