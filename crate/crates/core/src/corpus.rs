//! Synthetic QA corpus: documents made of long-answer candidate nodes, a toy
//! whitespace tokenizer, sliding-window slicing with label projection, and
//! negative down-sampling.
//!
//! Document coordinates are defined over the node stream with one markup
//! token in front of every node, i.e. `[m00] node0... [m01] node1...`. Gold
//! spans always point at node content, never at markup positions.
//!
//! Answerable documents carry a learnable cue: a contiguous copy of the
//! question's last words immediately before the answer tokens. Distractor
//! nodes contain question tokens without that adjacency, which is what makes
//! the first-phase model produce confidently wrong answers for the second
//! phase to catch.

use crate::error::{Error, Result};
use crate::rng::derive;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

pub const PAD_ID: u32 = 0;
pub const CLS_ID: u32 = 1;
pub const SEP_ID: u32 = 2;
pub const UNK_ID: u32 = 3;
/// First id of the markup-token block.
pub const MARKUP_START: u32 = 4;
pub const MARKUP_BLOCK: u32 = 64;
/// First ordinary word id.
pub const WORD_START: u32 = MARKUP_START + MARKUP_BLOCK;

/// Markup token announcing node `node_idx`.
pub fn markup_token_id(node_idx: usize) -> u32 {
    MARKUP_START + (node_idx as u32 % MARKUP_BLOCK)
}

pub fn is_markup_id(id: u32) -> bool {
    (MARKUP_START..WORD_START).contains(&id)
}

// ---------------------------------------------------------------------------
// Vocabulary / tokenizer
// ---------------------------------------------------------------------------

/// Head of the word region: fixed surfaces so generated corpora read like QA
/// text. Ids are WORD_START + index.
const HEAD_WORDS: &[&str] = &[
    "yes", "no", "who", "what", "when", "where", "which", "how", "did", "is", "was", "made",
    "it", "the", "of", "in",
];

pub const YES_WORD: u32 = WORD_START;
pub const NO_WORD: u32 = WORD_START + 1;
const WH_FIRST: u32 = WORD_START + 2;
const WH_COUNT: u32 = 6;
/// First id of the generic content-word pool.
pub const CONTENT_START: u32 = WORD_START + HEAD_WORDS.len() as u32;

#[derive(Debug, Clone)]
pub struct Vocab {
    tokens: Vec<String>,
    lookup: HashMap<String, u32>,
}

impl Vocab {
    /// Deterministic synthetic vocabulary of exactly `size` entries.
    pub fn synthetic(size: usize) -> Result<Self> {
        let min = CONTENT_START as usize + 16;
        if size < min {
            return Err(Error::Config(format!(
                "vocabulary size {size} too small, need at least {min}"
            )));
        }
        let mut tokens = vec![
            "[pad]".to_string(),
            "[cls]".to_string(),
            "[sep]".to_string(),
            "[unk]".to_string(),
        ];
        for i in 0..MARKUP_BLOCK {
            tokens.push(format!("[m{i:02}]"));
        }
        for w in HEAD_WORDS {
            tokens.push((*w).to_string());
        }
        let mut n = 0usize;
        while tokens.len() < size {
            let mut code = String::new();
            let mut x = n;
            for _ in 0..3 {
                code.push(char::from(b'a' + (x % 26) as u8));
                x /= 26;
            }
            n += 1;
            if HEAD_WORDS.contains(&code.as_str()) {
                continue;
            }
            tokens.push(code);
        }
        Ok(Self::from_tokens(tokens))
    }

    fn from_tokens(tokens: Vec<String>) -> Self {
        let lookup = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Vocab { tokens, lookup }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Whitespace split, lowercase, unknown words map to `[unk]`.
    pub fn tokenize(&self, text: &str) -> Vec<u32> {
        text.split_whitespace()
            .map(|w| {
                let lower = w.to_lowercase();
                self.lookup.get(&lower).copied().unwrap_or(UNK_ID)
            })
            .collect()
    }

    pub fn surface(&self, id: u32) -> &str {
        &self.tokens[id as usize]
    }

    pub fn decode(&self, ids: &[u32]) -> String {
        ids.iter()
            .map(|&i| self.surface(i))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// One token per line; the line number is the id.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        for t in &self.tokens {
            writeln!(f, "{t}")?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        let f = BufReader::new(std::fs::File::open(path)?);
        let tokens: Vec<String> = f.lines().collect::<std::io::Result<_>>()?;
        Ok(Self::from_tokens(tokens))
    }
}

// ---------------------------------------------------------------------------
// Domain types
// ---------------------------------------------------------------------------

/// The six answer types of the type head, in head-index order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AnswerType {
    #[serde(rename = "NO_ANSWER")]
    NoAnswer,
    #[serde(rename = "YES")]
    Yes,
    #[serde(rename = "NO")]
    No,
    #[serde(rename = "SINGLE_SPAN")]
    SingleSpan,
    #[serde(rename = "MULTI_SPAN")]
    MultiSpan,
    #[serde(rename = "LONG_ONLY")]
    LongOnly,
}

pub const NUM_ANSWER_TYPES: usize = 6;

impl AnswerType {
    pub fn index(self) -> usize {
        match self {
            AnswerType::NoAnswer => 0,
            AnswerType::Yes => 1,
            AnswerType::No => 2,
            AnswerType::SingleSpan => 3,
            AnswerType::MultiSpan => 4,
            AnswerType::LongOnly => 5,
        }
    }

    pub fn from_index(i: usize) -> Self {
        match i {
            0 => AnswerType::NoAnswer,
            1 => AnswerType::Yes,
            2 => AnswerType::No,
            3 => AnswerType::SingleSpan,
            4 => AnswerType::MultiSpan,
            5 => AnswerType::LongOnly,
            _ => panic!("answer type index {i} out of range"),
        }
    }
}

/// Inclusive token span in document coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub fn new(start: usize, end: usize) -> Self {
        assert!(start <= end, "span start after end");
        Span { start, end }
    }

    pub fn len(&self) -> usize {
        self.end - self.start + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn contains(&self, other: &Span) -> bool {
        self.start <= other.start && other.end <= self.end
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GoldAnnotation {
    pub answer_type: AnswerType,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub long_node: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub short_span: Option<Span>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub multi_spans: Option<Vec<Span>>,
}

impl GoldAnnotation {
    pub fn no_answer() -> Self {
        GoldAnnotation {
            answer_type: AnswerType::NoAnswer,
            long_node: None,
            short_span: None,
            multi_spans: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Input(format!("invalid gold annotation: {m}")));
        match self.answer_type {
            AnswerType::NoAnswer => {
                if self.long_node.is_some() || self.short_span.is_some() || self.multi_spans.is_some()
                {
                    return fail("NO_ANSWER must have no answer fields");
                }
            }
            AnswerType::Yes | AnswerType::No | AnswerType::LongOnly => {
                if self.long_node.is_none() {
                    return fail("yes/no/long-only requires a long node");
                }
                if self.short_span.is_some() || self.multi_spans.is_some() {
                    return fail("yes/no/long-only must not carry spans");
                }
            }
            AnswerType::SingleSpan => {
                if self.long_node.is_none() || self.short_span.is_none() {
                    return fail("single-span requires long node and span");
                }
                if self.multi_spans.is_some() {
                    return fail("single-span must not carry multi spans");
                }
            }
            AnswerType::MultiSpan => {
                let spans = match &self.multi_spans {
                    Some(s) if s.len() >= 2 => s,
                    _ => return fail("multi-span requires at least two spans"),
                };
                for w in spans.windows(2) {
                    if w[1].start <= w[0].end {
                        return fail("multi spans must be disjoint and sorted");
                    }
                }
                let cover = Span::new(spans[0].start, spans[spans.len() - 1].end);
                if self.short_span != Some(cover) {
                    return fail("multi-span cover span mismatch");
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Document {
    pub doc_id: String,
    pub question: Vec<u32>,
    pub nodes: Vec<Vec<u32>>,
    pub gold: GoldAnnotation,
}

impl Document {
    /// Length of the document stream (nodes plus one markup token each).
    pub fn doc_len(&self) -> usize {
        self.nodes.iter().map(|n| n.len() + 1).sum()
    }

    /// The document token stream with markup interleaved.
    pub fn stream(&self) -> Vec<u32> {
        let mut out = Vec::with_capacity(self.doc_len());
        for (i, node) in self.nodes.iter().enumerate() {
            out.push(markup_token_id(i));
            out.extend_from_slice(node);
        }
        out
    }

    /// Content range (markup excluded) of node `idx` in document coordinates.
    pub fn node_content_range(&self, idx: usize) -> Span {
        let mut pos = 0;
        for (i, node) in self.nodes.iter().enumerate() {
            if i == idx {
                return Span::new(pos + 1, pos + node.len());
            }
            pos += node.len() + 1;
        }
        panic!("node index {idx} out of range");
    }

    /// Node whose region (markup included) covers document position `pos`.
    pub fn node_of_pos(&self, pos: usize) -> usize {
        let mut start = 0;
        for (i, node) in self.nodes.iter().enumerate() {
            let end = start + node.len(); // inclusive, markup at `start`
            if pos >= start && pos <= end {
                return i;
            }
            start = end + 1;
        }
        panic!("document position {pos} out of range");
    }

    /// Minimal single span containing the answer, in document coordinates.
    /// Yes/no and long-only answers resolve to their node's content range.
    pub fn minimal_gold_span(&self) -> Option<Span> {
        match self.gold.answer_type {
            AnswerType::NoAnswer => None,
            AnswerType::SingleSpan | AnswerType::MultiSpan => self.gold.short_span,
            AnswerType::Yes | AnswerType::No | AnswerType::LongOnly => {
                self.gold.long_node.map(|n| self.node_content_range(n))
            }
        }
    }
}

/// BIO labels for the multi-span head, in head-index order.
pub const BIO_B: u8 = 0;
pub const BIO_I: u8 = 1;
pub const BIO_O: u8 = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowLabel {
    pub answer_type: AnswerType,
    /// Start position in window coordinates; 0 (the `[cls]` slot) when negative.
    pub start: usize,
    pub end: usize,
    /// BIO sequence over all window positions; present iff type is MULTI_SPAN.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bio: Option<Vec<u8>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowInstance {
    pub doc_id: String,
    pub window_index: usize,
    /// `[cls] question [sep] markup window... [sep]` padded to max_len.
    pub tokens: Vec<u32>,
    pub segment_ids: Vec<u8>,
    /// For each window position, the document coordinate it came from.
    pub window_to_doc: Vec<Option<usize>>,
    pub label: WindowLabel,
    pub is_positive: bool,
}

impl WindowInstance {
    pub fn max_len(&self) -> usize {
        self.tokens.len()
    }

    /// Number of non-pad positions.
    pub fn valid_len(&self) -> usize {
        self.tokens.iter().rposition(|&t| t != PAD_ID).map_or(0, |p| p + 1)
    }

    pub fn valid_mask(&self) -> Vec<bool> {
        let v = self.valid_len();
        (0..self.tokens.len()).map(|i| i < v).collect()
    }

    /// Window positions that hold document content (markup included), with
    /// their document coordinates.
    pub fn content_positions(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.window_to_doc
            .iter()
            .enumerate()
            .filter_map(|(w, d)| d.map(|d| (w, d)))
    }

    /// Document region covered by this window, if any content is present.
    pub fn doc_region(&self) -> Option<Span> {
        let mut min = None;
        let mut max = None;
        for (_, d) in self.content_positions() {
            min = Some(min.map_or(d, |m: usize| m.min(d)));
            max = Some(max.map_or(d, |m: usize| m.max(d)));
        }
        Some(Span::new(min?, max?))
    }

    /// Window coordinate of document position `d`, if covered.
    pub fn window_pos_of_doc(&self, d: usize) -> Option<usize> {
        self.content_positions().find(|&(_, dp)| dp == d).map(|(w, _)| w)
    }

    /// Positions eligible as span endpoints: document content, not markup.
    pub fn candidate_positions(&self) -> Vec<usize> {
        self.content_positions()
            .filter(|&(w, _)| !is_markup_id(self.tokens[w]))
            .map(|(w, _)| w)
            .collect()
    }
}

// ---------------------------------------------------------------------------
// Corpus spec + generator
// ---------------------------------------------------------------------------

/// Answer-type mixture; must sum to 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Mixture {
    pub no_answer: f64,
    pub yes: f64,
    pub no: f64,
    pub single_span: f64,
    pub multi_span: f64,
    pub long_only: f64,
}

impl Default for Mixture {
    /// Mirrors the benchmark prevalences: about half no-answer, 3.5%
    /// multi-span, 1% yes/no combined, the rest split between single-span
    /// and long-only.
    fn default() -> Self {
        Mixture {
            no_answer: 0.51,
            yes: 0.005,
            no: 0.005,
            single_span: 0.2225,
            multi_span: 0.035,
            long_only: 0.2225,
        }
    }
}

impl Mixture {
    pub fn validate(&self) -> Result<()> {
        let parts = [
            self.no_answer,
            self.yes,
            self.no,
            self.single_span,
            self.multi_span,
            self.long_only,
        ];
        if parts.iter().any(|&p| !(0.0..=1.0).contains(&p) || !p.is_finite()) {
            return Err(Error::Config("mixture probabilities must be in [0,1]".into()));
        }
        let sum: f64 = parts.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("mixture sums to {sum}, expected 1")));
        }
        Ok(())
    }

    fn sample(&self, rng: &mut impl Rng) -> AnswerType {
        let x: f64 = rng.random();
        let order = [
            (self.no_answer, AnswerType::NoAnswer),
            (self.yes, AnswerType::Yes),
            (self.no, AnswerType::No),
            (self.single_span, AnswerType::SingleSpan),
            (self.multi_span, AnswerType::MultiSpan),
            (self.long_only, AnswerType::LongOnly),
        ];
        let mut acc = 0.0;
        for (p, t) in order {
            acc += p;
            if x < acc {
                return t;
            }
        }
        AnswerType::LongOnly
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusSpec {
    pub num_docs: usize,
    pub vocab_size: usize,
    /// Inclusive range of candidate nodes per document.
    pub node_count: (usize, usize),
    /// Inclusive range of tokens per node.
    pub node_len: (usize, usize),
    #[serde(default)]
    pub mixture: Mixture,
    /// Probability that a non-answer node contains question tokens.
    pub distractor_rate: f64,
    pub seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        CorpusSpec {
            num_docs: 500,
            vocab_size: 512,
            node_count: (3, 6),
            node_len: (5, 10),
            mixture: Mixture::default(),
            distractor_rate: 0.2,
            seed: 7,
        }
    }
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<()> {
        self.mixture.validate()?;
        if self.num_docs == 0 {
            return Err(Error::Config("num_docs must be positive".into()));
        }
        if self.node_count.0 == 0 || self.node_count.0 > self.node_count.1 {
            return Err(Error::Config("invalid node count range".into()));
        }
        if self.node_len.0 < 2 || self.node_len.0 > self.node_len.1 {
            return Err(Error::Config("invalid node length range (min 2)".into()));
        }
        if !(0.0..=1.0).contains(&self.distractor_rate) {
            return Err(Error::Config("distractor rate must be in [0,1]".into()));
        }
        Vocab::synthetic(self.vocab_size).map(|_| ())
    }
}

/// Window geometry and training-data preparation knobs, carried inside model
/// checkpoints so downstream commands slice documents exactly as training did.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WindowConfig {
    pub max_len: usize,
    /// Window start step; defaults to a quarter of max_len.
    pub stride: usize,
    /// Cap on predicted span length in tokens.
    pub max_answer_len: usize,
    /// Keep probability for negative training windows.
    pub negative_keep_ratio: f64,
    /// Trailing fraction of documents held out for model selection.
    pub dev_fraction: f64,
}

impl Default for WindowConfig {
    fn default() -> Self {
        WindowConfig {
            max_len: 128,
            stride: 32,
            max_answer_len: 30,
            negative_keep_ratio: 0.1,
            dev_fraction: 0.1,
        }
    }
}

impl WindowConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stride == 0 {
            return Err(Error::Config("stride must be at least 1".into()));
        }
        if self.max_answer_len == 0 {
            return Err(Error::Config("max_answer_len must be at least 1".into()));
        }
        if !(self.negative_keep_ratio > 0.0 && self.negative_keep_ratio <= 1.0) {
            return Err(Error::Config("negative_keep_ratio must be in (0,1]".into()));
        }
        if !(0.0..1.0).contains(&self.dev_fraction) {
            return Err(Error::Config("dev_fraction must be in [0,1)".into()));
        }
        Ok(())
    }
}

/// Deterministic train/dev split: the trailing `dev_fraction` of documents is
/// held out.
pub fn split_documents(docs: &[Document], dev_fraction: f64) -> (&[Document], &[Document]) {
    let dev_len = (docs.len() as f64 * dev_fraction).floor() as usize;
    let cut = docs.len() - dev_len;
    (&docs[..cut], &docs[cut..])
}

/// The trailing quarter of the word space holds "entity" words: short-answer
/// spans are made of them, filler text never is. Distractor and background
/// nodes still sprinkle entities so entity presence alone does not decide
/// answerability; locating the answer additionally requires the question cue.
pub fn entity_word_start(vocab_size: usize) -> u32 {
    let words = vocab_size as u32 - CONTENT_START;
    CONTENT_START + words - words / 4
}

fn random_filler_word(rng: &mut impl Rng, vocab_size: usize) -> u32 {
    rng.random_range(CONTENT_START..entity_word_start(vocab_size))
}

fn random_entity_word(rng: &mut impl Rng, vocab_size: usize) -> u32 {
    rng.random_range(entity_word_start(vocab_size)..vocab_size as u32)
}

/// Deterministic synthetic corpus. Each document gets its own derived RNG
/// stream, so corpora of different sizes share a prefix.
pub fn generate_corpus(spec: &CorpusSpec) -> Result<Vec<Document>> {
    spec.validate()?;
    let docs = (0..spec.num_docs)
        .map(|i| generate_doc(spec, i))
        .collect::<Vec<_>>();
    Ok(docs)
}

fn generate_doc(spec: &CorpusSpec, idx: usize) -> Document {
    let mut rng = derive(spec.seed, &[0xd0c5, idx as u64]);
    let vs = spec.vocab_size;

    let q_len = rng.random_range(4..=8usize);
    let mut question = vec![WH_FIRST + rng.random_range(0..WH_COUNT)];
    for _ in 1..q_len {
        question.push(random_filler_word(&mut rng, vs));
    }

    let answer_type = spec.mixture.sample(&mut rng);
    let node_count = rng.random_range(spec.node_count.0..=spec.node_count.1);
    let answer_node = rng.random_range(0..node_count);

    // The cue is the question tail copied verbatim in front of the answer; a
    // contiguous 3-4 token match is what separates answers from distractors'
    // scattered question tokens.
    let cue_len = rng.random_range(3..=4usize).min(question.len() - 1);
    let cue: Vec<u32> = question[question.len() - cue_len..].to_vec();

    let mut nodes = Vec::with_capacity(node_count);
    let mut gold = GoldAnnotation::no_answer();

    for n in 0..node_count {
        let base_len = rng.random_range(spec.node_len.0..=spec.node_len.1);
        if answer_type != AnswerType::NoAnswer && n == answer_node {
            let (node, local_gold) = build_answer_node(&mut rng, vs, base_len, &cue, answer_type);
            // Shift span offsets from node-local to document coordinates once
            // node layout is final (done below after all nodes exist).
            nodes.push(node);
            gold = local_gold;
        } else {
            let mut node: Vec<u32> = (0..base_len)
                .map(|_| random_filler_word(&mut rng, vs))
                .collect();
            if rng.random::<f64>() < 0.6 {
                // Background entities keep entity presence uninformative.
                for _ in 0..rng.random_range(1..=2usize) {
                    let pos = rng.random_range(0..node.len());
                    node[pos] = random_entity_word(&mut rng, vs);
                }
            }
            if rng.random::<f64>() < spec.distractor_rate && question.len() >= 2 {
                // Distractor: at least two question tokens, scattered.
                let k = rng.random_range(2..=3usize.min(question.len()));
                for _ in 0..k {
                    let qt = question[rng.random_range(0..question.len())];
                    let pos = rng.random_range(0..node.len());
                    node[pos] = qt;
                }
            }
            nodes.push(node);
        }
    }

    // Convert node-local gold offsets to document coordinates.
    if answer_type != AnswerType::NoAnswer {
        let mut doc = Document {
            doc_id: format!("doc-{idx:05}"),
            question,
            nodes,
            gold: GoldAnnotation::no_answer(),
        };
        let node_start = doc.node_content_range(answer_node).start;
        gold.long_node = Some(answer_node);
        if let Some(s) = gold.short_span {
            gold.short_span = Some(Span::new(s.start + node_start, s.end + node_start));
        }
        if let Some(ms) = &gold.multi_spans {
            gold.multi_spans = Some(
                ms.iter()
                    .map(|s| Span::new(s.start + node_start, s.end + node_start))
                    .collect(),
            );
        }
        doc.gold = gold;
        debug_assert!(doc.gold.validate().is_ok());
        doc
    } else {
        Document {
            doc_id: format!("doc-{idx:05}"),
            question,
            nodes,
            gold,
        }
    }
}

/// Build the node that carries the answer. Returned gold offsets are
/// node-local (0 = first content token).
fn build_answer_node(
    rng: &mut impl Rng,
    vocab_size: usize,
    base_len: usize,
    cue: &[u32],
    answer_type: AnswerType,
) -> (Vec<u32>, GoldAnnotation) {
    let mut payload: Vec<u32> = cue.to_vec();
    let mut gold = GoldAnnotation {
        answer_type,
        long_node: None,
        short_span: None,
        multi_spans: None,
    };

    match answer_type {
        AnswerType::SingleSpan => {
            let ans_len = rng.random_range(1..=3usize);
            let start = payload.len();
            for _ in 0..ans_len {
                payload.push(random_entity_word(rng, vocab_size));
            }
            gold.short_span = Some(Span::new(start, start + ans_len - 1));
        }
        AnswerType::MultiSpan => {
            let k = rng.random_range(2..=3usize);
            let cue_tail = *cue.last().expect("cue is non-empty");
            let mut spans = Vec::new();
            for j in 0..k {
                if j > 0 {
                    // Each later span repeats the cue tail in front of it, so
                    // the BIO pattern is learnable rather than positional luck.
                    payload.push(cue_tail);
                }
                let len = rng.random_range(1..=2usize);
                let start = payload.len();
                for _ in 0..len {
                    payload.push(random_entity_word(rng, vocab_size));
                }
                spans.push(Span::new(start, start + len - 1));
            }
            gold.short_span = Some(Span::new(spans[0].start, spans[k - 1].end));
            gold.multi_spans = Some(spans);
        }
        AnswerType::Yes | AnswerType::No => {
            payload.push(if answer_type == AnswerType::Yes {
                YES_WORD
            } else {
                NO_WORD
            });
        }
        AnswerType::LongOnly => {}
        AnswerType::NoAnswer => unreachable!(),
    }

    // Filler before and after the payload, keeping the payload contiguous.
    let extra = base_len.saturating_sub(payload.len()).max(2);
    let before = rng.random_range(0..=extra);
    let after = extra - before;
    let mut node = Vec::with_capacity(before + payload.len() + after);
    for _ in 0..before {
        node.push(random_filler_word(rng, vocab_size));
    }
    let shift = node.len();
    node.extend_from_slice(&payload);
    for _ in 0..after {
        node.push(random_filler_word(rng, vocab_size));
    }

    if let Some(s) = gold.short_span {
        gold.short_span = Some(Span::new(s.start + shift, s.end + shift));
    }
    if let Some(ms) = gold.multi_spans {
        gold.multi_spans = Some(
            ms.into_iter()
                .map(|s| Span::new(s.start + shift, s.end + shift))
                .collect(),
        );
    }
    (node, gold)
}

// ---------------------------------------------------------------------------
// Sliding windows
// ---------------------------------------------------------------------------

/// Tokens reserved around the window content: `[cls]`, the question
/// separator, the leading markup token and the trailing separator.
const WINDOW_OVERHEAD: usize = 4;

/// Slice a document into overlapping windows and project the gold label into
/// each. Windows that do not fully contain the minimal gold span are negative.
pub fn slice_windows(doc: &Document, max_len: usize, stride: usize) -> Result<Vec<WindowInstance>> {
    let q_len = doc.question.len();
    if max_len < q_len + 16 {
        return Err(Error::Input(format!(
            "question of {q_len} tokens too long for max_len {max_len} (needs {} slack)",
            16
        )));
    }
    if stride == 0 {
        return Err(Error::Input("stride must be at least 1".into()));
    }
    let capacity = max_len - q_len - WINDOW_OVERHEAD;
    if stride > capacity {
        return Err(Error::Input(format!(
            "stride {stride} exceeds window capacity {capacity}; document coverage impossible"
        )));
    }

    let stream = doc.stream();
    let doc_len = stream.len();
    let gold_span = doc.minimal_gold_span();

    let mut starts = vec![0usize];
    while *starts.last().unwrap() + capacity < doc_len {
        starts.push(starts.last().unwrap() + stride);
    }

    let content_offset = q_len + 3; // [cls] question [sep] markup
    let mut out = Vec::with_capacity(starts.len());
    for (w_idx, &w_start) in starts.iter().enumerate() {
        let w_end = (w_start + capacity).min(doc_len); // exclusive
        let content = &stream[w_start..w_end];

        let mut tokens = Vec::with_capacity(max_len);
        tokens.push(CLS_ID);
        tokens.extend_from_slice(&doc.question);
        tokens.push(SEP_ID);
        tokens.push(markup_token_id(doc.node_of_pos(w_start)));
        tokens.extend_from_slice(content);
        tokens.push(SEP_ID);

        let mut segment_ids = vec![0u8; q_len + 2];
        segment_ids.extend(std::iter::repeat_n(1u8, tokens.len() - (q_len + 2)));

        let mut window_to_doc: Vec<Option<usize>> = vec![None; tokens.len()];
        for (i, slot) in window_to_doc[content_offset..content_offset + content.len()]
            .iter_mut()
            .enumerate()
        {
            *slot = Some(w_start + i);
        }

        while tokens.len() < max_len {
            tokens.push(PAD_ID);
            segment_ids.push(0);
            window_to_doc.push(None);
        }

        let label = match gold_span {
            Some(gs) if w_start <= gs.start && gs.end < w_end => {
                let start = content_offset + (gs.start - w_start);
                let end = content_offset + (gs.end - w_start);
                let bio = if doc.gold.answer_type == AnswerType::MultiSpan {
                    let mut bio = vec![BIO_O; max_len];
                    for s in doc.gold.multi_spans.as_ref().unwrap() {
                        let ws = content_offset + (s.start - w_start);
                        bio[ws] = BIO_B;
                        for b in bio.iter_mut().take(content_offset + (s.end - w_start) + 1).skip(ws + 1)
                        {
                            *b = BIO_I;
                        }
                    }
                    Some(bio)
                } else {
                    None
                };
                WindowLabel {
                    answer_type: doc.gold.answer_type,
                    start,
                    end,
                    bio,
                }
            }
            _ => WindowLabel {
                answer_type: AnswerType::NoAnswer,
                start: 0,
                end: 0,
                bio: None,
            },
        };
        let is_positive = label.answer_type != AnswerType::NoAnswer;

        out.push(WindowInstance {
            doc_id: doc.doc_id.clone(),
            window_index: w_idx,
            tokens,
            segment_ids,
            window_to_doc,
            label,
            is_positive,
        });
    }
    Ok(out)
}

/// Keep every positive instance; keep each negative independently with
/// probability `keep_ratio`. Content is never altered, only membership.
pub fn downsample_negatives(
    instances: Vec<WindowInstance>,
    keep_ratio: f64,
    seed: u64,
) -> Result<Vec<WindowInstance>> {
    if !(keep_ratio > 0.0 && keep_ratio <= 1.0) {
        return Err(Error::Config(format!(
            "keep_ratio must be in (0, 1], got {keep_ratio}"
        )));
    }
    let mut rng = derive(seed, &[0xd05a]);
    Ok(instances
        .into_iter()
        .filter(|inst| {
            if inst.is_positive {
                true
            } else {
                rng.random::<f64>() < keep_ratio
            }
        })
        .collect())
}

// ---------------------------------------------------------------------------
// JSONL persistence
// ---------------------------------------------------------------------------

pub fn save_documents(path: &Path, docs: &[Document]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for d in docs {
        serde_json::to_writer(&mut f, d).map_err(|e| Error::Input(e.to_string()))?;
        writeln!(f)?;
    }
    Ok(())
}

pub fn load_documents(path: &Path) -> Result<Vec<Document>> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    let f = BufReader::new(std::fs::File::open(path)?);
    let mut docs = Vec::new();
    for (i, line) in f.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let doc: Document = serde_json::from_str(&line).map_err(|e| Error::MalformedLine {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        docs.push(doc);
    }
    Ok(docs)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_doc(question_len: usize, node_lens: &[usize], gold: GoldAnnotation) -> Document {
        Document {
            doc_id: "t".into(),
            question: (0..question_len).map(|i| CONTENT_START + i as u32).collect(),
            nodes: node_lens
                .iter()
                .enumerate()
                .map(|(n, &l)| (0..l).map(|i| CONTENT_START + 50 + (n * 20 + i) as u32).collect())
                .collect(),
            gold,
        }
    }

    #[test]
    fn tokenizer_basics() {
        let v = Vocab::synthetic(512).unwrap();
        assert!(v.tokenize("").is_empty());
        let ids = v.tokenize("Who Made It");
        assert_eq!(ids, vec![
            v.tokenize("who")[0],
            v.tokenize("made")[0],
            v.tokenize("it")[0]
        ]);
        assert!(ids.iter().all(|&i| i != UNK_ID));
        assert_eq!(v.tokenize("qqqzzzqqq"), vec![UNK_ID]);
        assert_eq!(v.decode(&ids), "who made it");
    }

    #[test]
    fn vocab_roundtrips_through_file() {
        let v = Vocab::synthetic(256).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.txt");
        v.save(&path).unwrap();
        let loaded = Vocab::load(&path).unwrap();
        assert_eq!(v.tokens, loaded.tokens);
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = CorpusSpec {
            num_docs: 50,
            ..CorpusSpec::default()
        };
        let a = generate_corpus(&spec).unwrap();
        let b = generate_corpus(&spec).unwrap();
        assert_eq!(
            serde_json::to_string(&a).unwrap(),
            serde_json::to_string(&b).unwrap()
        );
    }

    #[test]
    fn degenerate_mixture_yields_only_no_answer() {
        let spec = CorpusSpec {
            num_docs: 100,
            mixture: Mixture {
                no_answer: 1.0,
                yes: 0.0,
                no: 0.0,
                single_span: 0.0,
                multi_span: 0.0,
                long_only: 0.0,
            },
            ..CorpusSpec::default()
        };
        let docs = generate_corpus(&spec).unwrap();
        assert!(docs.iter().all(|d| d.gold.answer_type == AnswerType::NoAnswer));
    }

    #[test]
    fn default_mixture_frequencies_are_close() {
        let spec = CorpusSpec {
            num_docs: 2000,
            ..CorpusSpec::default()
        };
        let docs = generate_corpus(&spec).unwrap();
        let no_ans = docs
            .iter()
            .filter(|d| d.gold.answer_type == AnswerType::NoAnswer)
            .count() as f64
            / docs.len() as f64;
        assert!((0.46..=0.56).contains(&no_ans), "no-answer fraction {no_ans}");
        for d in &docs {
            d.gold.validate().unwrap();
        }
    }

    #[test]
    fn invalid_mixture_is_a_config_error() {
        let spec = CorpusSpec {
            mixture: Mixture {
                no_answer: 0.9,
                yes: 0.9,
                no: 0.0,
                single_span: 0.0,
                multi_span: 0.0,
                long_only: 0.0,
            },
            ..CorpusSpec::default()
        };
        assert!(matches!(generate_corpus(&spec), Err(Error::Config(_))));
    }

    #[test]
    fn distractors_share_tokens_but_no_span() {
        let spec = CorpusSpec {
            num_docs: 300,
            distractor_rate: 1.0,
            ..CorpusSpec::default()
        };
        let docs = generate_corpus(&spec).unwrap();
        let mut saw_distractor = false;
        for d in &docs {
            for (n, node) in d.nodes.iter().enumerate() {
                if Some(n) == d.gold.long_node {
                    continue;
                }
                let shared = node
                    .iter()
                    .filter(|t| d.question.contains(t))
                    .count();
                if shared >= 2 {
                    saw_distractor = true;
                }
            }
        }
        assert!(saw_distractor);
    }

    // The precondition max_len >= question + 16 together with 4 tokens of
    // window overhead makes 12 the smallest reachable capacity, so the window
    // geometry tests below run at capacity 12 (max_len 20, question 4).

    #[test]
    fn single_window_when_doc_fits() {
        let gold = GoldAnnotation {
            answer_type: AnswerType::SingleSpan,
            long_node: Some(0),
            short_span: Some(Span::new(3, 4)),
            multi_spans: None,
        };
        let doc = tiny_doc(4, &[11], gold); // stream length 12 == capacity
        let wins = slice_windows(&doc, 20, 4).unwrap();
        assert_eq!(wins.len(), 1);
        assert!(wins[0].is_positive);
        assert_eq!(wins[0].label.answer_type, AnswerType::SingleSpan);
    }

    #[test]
    fn non_overlapping_windows_label_the_right_one() {
        // Stream of 36: three nodes of 11 content tokens (plus markup each).
        // Windows enumerated by hand: [0..11], [12..23], [24..35].
        let gold = GoldAnnotation {
            answer_type: AnswerType::SingleSpan,
            long_node: Some(1),
            short_span: Some(Span::new(14, 16)),
            multi_spans: None,
        };
        let doc = tiny_doc(4, &[11, 11, 11], gold);
        assert_eq!(doc.doc_len(), 36);
        let wins = slice_windows(&doc, 20, 12).unwrap();
        assert_eq!(wins.len(), 3);
        let flags: Vec<bool> = wins.iter().map(|w| w.is_positive).collect();
        assert_eq!(flags, vec![false, true, false]);
        // Projection soundness: window tokens at (s..=e) equal the doc tokens.
        let w = &wins[1];
        let stream = doc.stream();
        for (off, p) in (w.label.start..=w.label.end).enumerate() {
            assert_eq!(w.tokens[p], stream[14 + off]);
            assert_eq!(w.window_to_doc[p], Some(14 + off));
        }
    }

    #[test]
    fn strided_windows_cover_every_position() {
        let doc = tiny_doc(4, &[11, 11, 11], GoldAnnotation::no_answer());
        let wins = slice_windows(&doc, 20, 6).unwrap();
        assert_eq!(wins.len(), 5);
        let mut covered = vec![false; doc.doc_len()];
        for w in &wins {
            for (_, d) in w.content_positions() {
                covered[d] = true;
            }
        }
        assert!(covered.iter().all(|&c| c));
        // Consecutive windows overlap by capacity - stride = 6 positions.
        for pair in wins.windows(2) {
            let r0 = pair[0].doc_region().unwrap();
            let r1 = pair[1].doc_region().unwrap();
            assert_eq!(r0.end as i64 - r1.start as i64 + 1, 6);
        }
    }

    #[test]
    fn question_too_long_is_an_input_error() {
        let doc = tiny_doc(10, &[5], GoldAnnotation::no_answer());
        assert!(matches!(slice_windows(&doc, 20, 4), Err(Error::Input(_))));
    }

    #[test]
    fn multi_span_bio_round_trips() {
        let gold = GoldAnnotation {
            answer_type: AnswerType::MultiSpan,
            long_node: Some(0),
            short_span: Some(Span::new(2, 7)),
            multi_spans: Some(vec![Span::new(2, 3), Span::new(6, 7)]),
        };
        let doc = tiny_doc(4, &[12], gold);
        let wins = slice_windows(&doc, 21, 5).unwrap();
        assert_eq!(wins.len(), 1);
        let w = &wins[0];
        let bio = w.label.bio.as_ref().unwrap();
        // Decode maximal B(I)* runs back into document spans.
        let mut spans = Vec::new();
        let mut i = 0;
        while i < bio.len() {
            if bio[i] == BIO_B {
                let mut j = i;
                while j + 1 < bio.len() && bio[j + 1] == BIO_I {
                    j += 1;
                }
                spans.push(Span::new(
                    w.window_to_doc[i].unwrap(),
                    w.window_to_doc[j].unwrap(),
                ));
                i = j + 1;
            } else {
                i += 1;
            }
        }
        assert_eq!(spans, doc.gold.multi_spans.clone().unwrap());
    }

    #[test]
    fn downsampling_keeps_positives_and_is_a_pure_filter() {
        let doc = tiny_doc(4, &[11, 11, 11], GoldAnnotation {
            answer_type: AnswerType::SingleSpan,
            long_node: Some(1),
            short_span: Some(Span::new(14, 15)),
            multi_spans: None,
        });
        let wins = slice_windows(&doc, 20, 6).unwrap();
        let kept = downsample_negatives(wins.clone(), 1.0, 9).unwrap();
        assert_eq!(kept, wins);

        let only_pos: Vec<_> = wins.iter().filter(|w| w.is_positive).cloned().collect();
        assert!(!only_pos.is_empty());
        let kept = downsample_negatives(only_pos.clone(), 0.01, 9).unwrap();
        assert_eq!(kept, only_pos);
    }

    #[test]
    fn downsampling_rate_is_roughly_binomial() {
        let doc = tiny_doc(4, &[40], GoldAnnotation::no_answer());
        let wins = slice_windows(&doc, 20, 1).unwrap();
        let negatives: Vec<_> = std::iter::repeat_n(wins[0].clone(), 1000).collect();
        let kept = downsample_negatives(negatives, 0.5, 42).unwrap();
        assert!((430..=570).contains(&kept.len()), "kept {}", kept.len());
    }

    #[test]
    fn documents_roundtrip_through_jsonl() {
        let spec = CorpusSpec {
            num_docs: 20,
            ..CorpusSpec::default()
        };
        let docs = generate_corpus(&spec).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("corpus.jsonl");
        save_documents(&path, &docs).unwrap();
        let loaded = load_documents(&path).unwrap();
        assert_eq!(docs, loaded);
    }

    #[test]
    fn malformed_jsonl_names_the_line() {
        let doc = tiny_doc(4, &[5], GoldAnnotation::no_answer());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        let good = serde_json::to_string(&doc).unwrap();
        std::fs::write(&path, format!("{good}\nnot json\n")).unwrap();
        match load_documents(&path) {
            Err(Error::MalformedLine { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }
}
