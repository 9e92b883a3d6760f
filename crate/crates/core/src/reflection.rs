//! Second-phase answer-confidence model.
//!
//! The trained first-phase model predicts over its full training corpus (all
//! windows, no down-sampling); every question it answers becomes one training
//! example per stream: the winning window instance, answer markers laid over
//! its tokens, a 42-vector of output-head features, and a 0/1 label saying
//! whether the predicted answer matched gold. Questions predicted no-answer
//! are dropped since their outcome is already final.
//!
//! The confidence network reuses the encoder architecture (initialized from
//! the first-phase checkpoint plus a fresh marker-embedding table), then
//! aggregates the `[cls]` vector with the transformed head features through
//! one GELU layer into a sigmoid probability. A features-only feed-forward
//! variant is provided for the same training target.

use crate::corpus::{AnswerType, Document, WindowInstance, WindowLabel, SEP_ID};
use crate::encoder::{
    build_marker_table, encoder_param_names, hidden_states, EncoderConfig, Mode,
};
use crate::error::{Error, Result};
use crate::evalkit::{match_answers, payloads_from_prediction, Stream};
use crate::graph::{Graph, NodeId, LOG_EPS};
use crate::linalg::Mat;
use crate::mrc::{decode_document, mrc_forward, AnswerPrediction, MrcOutput};
use crate::params::{init_normal, ParamStore};
use crate::rng::derive;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

/// 1 score + 6 one-hot + 6 probs + 1 prob + 4 blocks of (answer, [cls], top 5).
pub const HEAD_FEATURE_DIM: usize = 42;
/// How many top logits/probs each block carries.
pub const TOP_N: usize = 5;
/// Hidden width of the features-only feed-forward variant.
pub const DEFAULT_FNN_HIDDEN: usize = 200;

// ---------------------------------------------------------------------------
// Answer markers
// ---------------------------------------------------------------------------

/// Marker dictionary ids, in embedding-row order.
pub mod marker {
    pub const SINGLE_SPAN: u8 = 0;
    pub const MULTI_SPAN: u8 = 1;
    pub const YES: u8 = 2;
    pub const NO: u8 = 3;
    pub const LONG: u8 = 4;
    pub const START: u8 = 5;
    pub const END: u8 = 6;
    pub const B: u8 = 7;
    pub const I: u8 = 8;
    pub const O: u8 = 9;
    pub const EMPTY: u8 = 10;
}

/// Lay answer markers over the winning window: the answer-type mark sits on
/// `[cls]`, position marks on the answer tokens, everything else is EMPTY.
///
/// Long-stream examples mark the predicted long node's tokens LONG. Short
/// single spans get START/END boundary marks (START wins when the span is a
/// single token); multi spans get B/I over span tokens and O over the other
/// content tokens; yes/no and long-only answers mark their node like the
/// long stream.
pub fn build_markers(
    pred: &AnswerPrediction,
    inst: &WindowInstance,
    doc: &Document,
    stream: Stream,
) -> Result<Vec<u8>> {
    if pred.is_no_answer() {
        return Err(Error::Usage(
            "answer markers are undefined for no-answer predictions".into(),
        ));
    }
    let mut marks = vec![marker::EMPTY; inst.tokens.len()];

    let mark_node = |marks: &mut Vec<u8>, node: usize| {
        let range = doc.node_content_range(node);
        for (w, d) in inst.content_positions() {
            if d >= range.start && d <= range.end {
                marks[w] = marker::LONG;
            }
        }
    };

    match stream {
        Stream::Long => {
            marks[0] = marker::LONG;
            if let Some(n) = pred.long_node {
                mark_node(&mut marks, n);
            }
        }
        Stream::Short => match pred.answer_type {
            AnswerType::SingleSpan => {
                marks[0] = marker::SINGLE_SPAN;
                let span = pred
                    .short_span
                    .ok_or_else(|| Error::Usage("single-span prediction without span".into()))?;
                let ws = inst
                    .window_pos_of_doc(span.start)
                    .ok_or_else(|| Error::Usage("span start outside window".into()))?;
                let we = inst
                    .window_pos_of_doc(span.end)
                    .ok_or_else(|| Error::Usage("span end outside window".into()))?;
                marks[ws] = marker::START;
                if we != ws {
                    marks[we] = marker::END;
                }
            }
            AnswerType::MultiSpan => {
                marks[0] = marker::MULTI_SPAN;
                for w in inst.candidate_positions() {
                    marks[w] = marker::O;
                }
                for span in pred.multi_spans.as_deref().unwrap_or(&[]) {
                    for d in span.start..=span.end {
                        if let Some(w) = inst.window_pos_of_doc(d) {
                            marks[w] = if d == span.start { marker::B } else { marker::I };
                        }
                    }
                }
            }
            AnswerType::Yes | AnswerType::No => {
                marks[0] = if pred.answer_type == AnswerType::Yes {
                    marker::YES
                } else {
                    marker::NO
                };
                if let Some(n) = pred.long_node {
                    mark_node(&mut marks, n);
                }
            }
            AnswerType::LongOnly => {
                marks[0] = marker::LONG;
                if let Some(n) = pred.long_node {
                    mark_node(&mut marks, n);
                }
            }
            AnswerType::NoAnswer => unreachable!(),
        },
    }
    Ok(marks)
}

// ---------------------------------------------------------------------------
// Head features
// ---------------------------------------------------------------------------

/// The ordered 42-vector of output-head features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadFeatures(Vec<f64>);

impl HeadFeatures {
    pub fn new(v: Vec<f64>) -> Result<Self> {
        if v.len() != HEAD_FEATURE_DIM {
            return Err(Error::Input(format!(
                "head feature vector must have {HEAD_FEATURE_DIM} entries, got {}",
                v.len()
            )));
        }
        Ok(HeadFeatures(v))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn score(&self) -> f64 {
        self.0[0]
    }

    pub fn ans_type_one_hot(&self) -> &[f64] {
        &self.0[1..7]
    }

    pub fn ans_type_probs(&self) -> &[f64] {
        &self.0[7..13]
    }

    pub fn ans_type_prob(&self) -> f64 {
        self.0[13]
    }

    pub fn start_logits_block(&self) -> &[f64] {
        &self.0[14..21]
    }

    pub fn end_logits_block(&self) -> &[f64] {
        &self.0[21..28]
    }

    pub fn start_probs_block(&self) -> &[f64] {
        &self.0[28..35]
    }

    pub fn end_probs_block(&self) -> &[f64] {
        &self.0[35..42]
    }
}

/// `[value at the predicted position, value at [cls], top 5 descending]`.
fn position_block(values: &[f64], predicted: usize, valid: &[usize]) -> Result<Vec<f64>> {
    if valid.len() < TOP_N {
        return Err(Error::Input(format!(
            "need at least {TOP_N} valid positions for top-{TOP_N} feature blocks"
        )));
    }
    let mut block = Vec::with_capacity(2 + TOP_N);
    block.push(values[predicted]);
    block.push(values[0]);
    let mut top: Vec<f64> = valid.iter().map(|&i| values[i]).collect();
    top.sort_by(|a, b| b.partial_cmp(a).unwrap());
    block.extend_from_slice(&top[..TOP_N]);
    Ok(block)
}

/// Read the raw (untransformed) head features off the winning window's
/// outputs. Valid positions are recovered from the masked start softmax,
/// whose padded entries are exactly zero.
pub fn extract_head_features(
    output: &MrcOutput,
    pred: &AnswerPrediction,
) -> Result<HeadFeatures> {
    let (s, e) = pred.window_span.ok_or_else(|| {
        Error::Input("head features require the winning window span".into())
    })?;
    let valid: Vec<usize> = (0..output.start_probs.len())
        .filter(|&i| output.start_probs[i] > 0.0)
        .collect();

    let mut v = Vec::with_capacity(HEAD_FEATURE_DIM);
    v.push(pred.score);
    let mut one_hot = vec![0.0; 6];
    one_hot[pred.answer_type.index()] = 1.0;
    v.extend_from_slice(&one_hot);
    v.extend_from_slice(&output.type_probs);
    v.push(output.type_probs[pred.answer_type.index()]);
    v.extend(position_block(&output.start_logits, s, &valid)?);
    v.extend(position_block(&output.end_logits, e, &valid)?);
    v.extend(position_block(&output.start_probs, s, &valid)?);
    v.extend(position_block(&output.end_probs, e, &valid)?);
    HeadFeatures::new(v)
}

// ---------------------------------------------------------------------------
// Feature transform
// ---------------------------------------------------------------------------

/// Per-coordinate statistics frozen at training time: raw min/max for the
/// [0,1] scaling, then mean/std of the scaled-sqrt-log values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureStats {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// scale to [0,1] -> sqrt -> log(x + 1e-6). Out-of-range inference values are
/// clamped into [0,1] so the sqrt stays real; a constant training coordinate
/// (max == min) scales to 0.
fn pre_transform(x: f64, min: f64, max: f64) -> f64 {
    let d = max - min;
    let u = if d > 0.0 {
        ((x - min) / d).clamp(0.0, 1.0)
    } else {
        0.0
    };
    (u.sqrt() + 1e-6).ln()
}

pub fn fit_feature_stats(raws: &[&HeadFeatures]) -> Result<FeatureStats> {
    if raws.is_empty() {
        return Err(Error::Input(
            "cannot fit feature statistics on an empty training set".into(),
        ));
    }
    let n = raws.len() as f64;
    let dim = HEAD_FEATURE_DIM;
    let mut min = vec![f64::INFINITY; dim];
    let mut max = vec![f64::NEG_INFINITY; dim];
    for r in raws {
        for (j, &x) in r.as_slice().iter().enumerate() {
            min[j] = min[j].min(x);
            max[j] = max[j].max(x);
        }
    }
    let mut mean = vec![0.0; dim];
    for r in raws {
        for (j, &x) in r.as_slice().iter().enumerate() {
            mean[j] += pre_transform(x, min[j], max[j]);
        }
    }
    for m in &mut mean {
        *m /= n;
    }
    let mut var = vec![0.0; dim];
    for r in raws {
        for (j, &x) in r.as_slice().iter().enumerate() {
            let d = pre_transform(x, min[j], max[j]) - mean[j];
            var[j] += d * d;
        }
    }
    let std = var.iter().map(|v| (v / n).sqrt()).collect();
    Ok(FeatureStats {
        min,
        max,
        mean,
        std,
    })
}

/// Apply the frozen pipeline: scale -> sqrt -> log -> standardize. A zero-std
/// coordinate passes through centered only.
pub fn transform_features(raw: &HeadFeatures, stats: &FeatureStats) -> HeadFeatures {
    let v = raw
        .as_slice()
        .iter()
        .enumerate()
        .map(|(j, &x)| {
            let w = pre_transform(x, stats.min[j], stats.max[j]) - stats.mean[j];
            if stats.std[j] > 0.0 {
                w / stats.std[j]
            } else {
                w
            }
        })
        .collect();
    HeadFeatures(v)
}

pub fn save_feature_stats(path: &Path, stats: &FeatureStats) -> Result<()> {
    let json = serde_json::to_string_pretty(stats).map_err(|e| Error::Input(e.to_string()))?;
    std::fs::write(path, json)?;
    Ok(())
}

pub fn load_feature_stats(path: &Path) -> Result<FeatureStats> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::Checkpoint(e.to_string()))
}

// ---------------------------------------------------------------------------
// Dataset construction
// ---------------------------------------------------------------------------

/// One training case before feature transformation.
#[derive(Debug, Clone)]
pub struct RawExample {
    pub doc_id: String,
    pub stream: Stream,
    pub instance: WindowInstance,
    pub markers: Vec<u8>,
    pub raw: HeadFeatures,
    pub y: bool,
}

/// A finalized training case with transformed features.
#[derive(Debug, Clone)]
pub struct ReflectionExample {
    pub doc_id: String,
    pub stream: Stream,
    pub instance: WindowInstance,
    pub markers: Vec<u8>,
    pub raw: HeadFeatures,
    pub features: HeadFeatures,
    pub y: bool,
}

/// Run the trained first-phase model over every document (all windows, no
/// negative down-sampling) and build one example per stream for each question
/// whose prediction is an actual answer.
pub fn build_reflection_dataset(
    params: &ParamStore,
    cfg: &EncoderConfig,
    docs: &[Document],
    max_len: usize,
    stride: usize,
    max_answer_len: usize,
) -> Result<(Vec<RawExample>, Vec<RawExample>)> {
    let per_doc: Vec<Result<Option<(RawExample, RawExample)>>> = docs
        .par_iter()
        .map(|doc| build_doc_examples(params, cfg, doc, max_len, stride, max_answer_len))
        .collect();
    let mut long = Vec::new();
    let mut short = Vec::new();
    for r in per_doc {
        if let Some((l, s)) = r? {
            long.push(l);
            short.push(s);
        }
    }
    Ok((long, short))
}

fn build_doc_examples(
    params: &ParamStore,
    cfg: &EncoderConfig,
    doc: &Document,
    max_len: usize,
    stride: usize,
    max_answer_len: usize,
) -> Result<Option<(RawExample, RawExample)>> {
    let instances = crate::corpus::slice_windows(doc, max_len, stride)?;
    let outputs: Vec<MrcOutput> = instances
        .iter()
        .map(|inst| mrc_forward(params, cfg, inst))
        .collect::<Result<_>>()?;
    let pred = decode_document(&outputs, &instances, doc, max_answer_len)?;
    examples_from_prediction(doc, &instances, &outputs, &pred)
}

/// Turn one decoded document answer into its pair of (long, short) training
/// cases; `None` when the prediction is no-answer.
pub fn examples_from_prediction(
    doc: &Document,
    instances: &[WindowInstance],
    outputs: &[MrcOutput],
    pred: &AnswerPrediction,
) -> Result<Option<(RawExample, RawExample)>> {
    if pred.is_no_answer() {
        return Ok(None);
    }
    let inst = instances[pred.window_index].clone();
    let raw = extract_head_features(&outputs[pred.window_index], pred)?;
    let (long_payload, short_payload) = payloads_from_prediction(pred);

    let make = |stream: Stream, y: bool| -> Result<RawExample> {
        Ok(RawExample {
            doc_id: doc.doc_id.clone(),
            stream,
            instance: inst.clone(),
            markers: build_markers(pred, &inst, doc, stream)?,
            raw: raw.clone(),
            y,
        })
    };
    let y_long = match_answers(&long_payload, &doc.gold, Stream::Long)?;
    let y_short = match_answers(&short_payload, &doc.gold, Stream::Short)?;
    let long = make(Stream::Long, y_long)?;
    let short = make(Stream::Short, y_short)?;
    Ok(Some((long, short)))
}

/// Attach transformed features using statistics fitted elsewhere.
pub fn finalize_examples(raws: Vec<RawExample>, stats: &FeatureStats) -> Vec<ReflectionExample> {
    raws.into_iter()
        .map(|r| {
            let features = transform_features(&r.raw, stats);
            ReflectionExample {
                doc_id: r.doc_id,
                stream: r.stream,
                instance: r.instance,
                markers: r.markers,
                raw: r.raw,
                features,
                y: r.y,
            }
        })
        .collect()
}

// ---------------------------------------------------------------------------
// JSONL persistence
// ---------------------------------------------------------------------------

/// On-disk record; the window instance is reconstructed from the token ids.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReflectionRecord {
    pub doc_id: String,
    pub stream: Stream,
    pub tokens: Vec<u32>,
    pub markers: Vec<u8>,
    pub raw_features: Vec<f64>,
    pub transformed_features: Vec<f64>,
    pub y: u8,
}

impl From<&ReflectionExample> for ReflectionRecord {
    fn from(e: &ReflectionExample) -> Self {
        ReflectionRecord {
            doc_id: e.doc_id.clone(),
            stream: e.stream,
            tokens: e.instance.tokens.clone(),
            markers: e.markers.clone(),
            raw_features: e.raw.as_slice().to_vec(),
            transformed_features: e.features.as_slice().to_vec(),
            y: e.y as u8,
        }
    }
}

impl ReflectionRecord {
    /// Rebuild a forward-ready example. Segment ids are recovered from the
    /// first separator; the label projection is not needed for training.
    pub fn into_example(self) -> Result<ReflectionExample> {
        let first_sep = self
            .tokens
            .iter()
            .position(|&t| t == SEP_ID)
            .ok_or_else(|| Error::Input("record tokens contain no separator".into()))?;
        let valid_len = self
            .tokens
            .iter()
            .rposition(|&t| t != crate::corpus::PAD_ID)
            .map_or(0, |p| p + 1);
        let segment_ids = (0..self.tokens.len())
            .map(|i| u8::from(i > first_sep && i < valid_len))
            .collect();
        let instance = WindowInstance {
            doc_id: self.doc_id.clone(),
            window_index: 0,
            tokens: self.tokens,
            segment_ids,
            window_to_doc: Vec::new(),
            label: WindowLabel {
                answer_type: AnswerType::NoAnswer,
                start: 0,
                end: 0,
                bio: None,
            },
            is_positive: false,
        };
        Ok(ReflectionExample {
            doc_id: self.doc_id,
            stream: self.stream,
            instance,
            markers: self.markers,
            raw: HeadFeatures::new(self.raw_features)?,
            features: HeadFeatures::new(self.transformed_features)?,
            y: self.y != 0,
        })
    }
}

pub fn save_examples(path: &Path, examples: &[ReflectionExample]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for e in examples {
        let record = ReflectionRecord::from(e);
        serde_json::to_writer(&mut f, &record).map_err(|err| Error::Input(err.to_string()))?;
        writeln!(f)?;
    }
    Ok(())
}

pub fn load_examples(path: &Path) -> Result<Vec<ReflectionExample>> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    let f = BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in f.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: ReflectionRecord =
            serde_json::from_str(&line).map_err(|e| Error::MalformedLine {
                path: path.to_path_buf(),
                line: i + 1,
                message: e.to_string(),
            })?;
        out.push(record.into_example()?);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Confidence model
// ---------------------------------------------------------------------------

/// Append the aggregation and confidence parameters.
pub fn build_reflection_head_params(
    store: &mut ParamStore,
    cfg: &EncoderConfig,
    rng: &mut rand_chacha::ChaCha8Rng,
) {
    store.insert(
        "refl.w_r",
        init_normal(rng, cfg.hidden, cfg.hidden + HEAD_FEATURE_DIM, 0.02),
    );
    store.insert("refl.a", init_normal(rng, 1, cfg.hidden, 0.02));
}

pub fn reflection_head_param_names() -> [&'static str; 2] {
    ["refl.w_r", "refl.a"]
}

/// Fresh confidence-model parameters (encoder + marker table + head).
pub fn build_reflection_params(cfg: &EncoderConfig, seed: u64) -> ParamStore {
    let mut store = ParamStore::new();
    let mut rng = derive(seed, &[0x5ef1]);
    crate::encoder::build_encoder_params(&mut store, cfg, &mut rng, true);
    build_reflection_head_params(&mut store, cfg, &mut rng);
    store
}

/// Confidence-model parameters initialized from a trained first-phase store:
/// every shared encoder tensor is copied bit-for-bit; the marker table and
/// the aggregation/confidence head are freshly initialized from `seed`.
pub fn init_from_mrc(
    mrc_params: &ParamStore,
    cfg: &EncoderConfig,
    seed: u64,
) -> Result<ParamStore> {
    let mut rng = derive(seed, &[0x5ef1]);
    let mut store = ParamStore::new();
    let copy = |store: &mut ParamStore, name: &str| -> Result<()> {
        let t = mrc_params.get(name).ok_or_else(|| {
            Error::Checkpoint(format!("first-phase checkpoint is missing tensor {name}"))
        })?;
        store.insert(name, t.clone());
        Ok(())
    };
    copy(&mut store, "embed.word")?;
    copy(&mut store, "embed.pos")?;
    copy(&mut store, "embed.seg")?;
    build_marker_table(&mut store, cfg, &mut rng);
    for name in encoder_param_names(cfg)
        .iter()
        .filter(|n| !n.starts_with("embed.word") && !n.starts_with("embed.pos") && !n.starts_with("embed.seg"))
    {
        copy(&mut store, name)?;
    }
    build_reflection_head_params(&mut store, cfg, &mut rng);

    // Shape sanity against the config.
    let word = store.get("embed.word").unwrap();
    if word.rows != cfg.vocab_size || word.cols != cfg.hidden {
        return Err(Error::Checkpoint(format!(
            "embed.word shape ({}, {}) does not match config ({}, {})",
            word.rows, word.cols, cfg.vocab_size, cfg.hidden
        )));
    }
    Ok(store)
}

/// Aggregation head over a `[cls]` vector node: concatenate the transformed
/// features, one GELU-activated linear map to hidden size, then a sigmoid
/// dot-product confidence.
pub fn confidence_head_graph(g: &mut Graph, cls: NodeId, features: &HeadFeatures) -> NodeId {
    let feats = g.input(Mat::row_vector(features.as_slice().to_vec()));
    let cat = g.concat_cols(&[cls, feats]);
    let w_r = g.param("refl.w_r");
    let agg = g.matmul_nt(cat, w_r);
    let agg = g.gelu(agg);
    let a = g.param("refl.a");
    let z = g.matmul_nt(agg, a);
    g.sigmoid(z)
}

/// Full confidence forward: marker-augmented encoding plus the head.
pub fn reflection_forward_graph(
    g: &mut Graph,
    cfg: &EncoderConfig,
    inst: &WindowInstance,
    markers: &[u8],
    features: &HeadFeatures,
    mode: &mut Mode,
) -> Result<NodeId> {
    if markers.len() != inst.tokens.len() {
        return Err(Error::Input(format!(
            "marker length {} does not match instance length {}",
            markers.len(),
            inst.tokens.len()
        )));
    }
    let hidden = hidden_states(g, cfg, inst, Some(markers), mode)?;
    let cls = g.select_row(hidden, 0);
    Ok(confidence_head_graph(g, cls, features))
}

/// Evaluation-mode confidence for one example.
pub fn reflection_forward(
    params: &ParamStore,
    cfg: &EncoderConfig,
    example: &ReflectionExample,
) -> Result<f64> {
    let mut g = Graph::new(params);
    let p = reflection_forward_graph(
        &mut g,
        cfg,
        &example.instance,
        &example.markers,
        &example.features,
        &mut Mode::Eval,
    )?;
    Ok(g.scalar(p))
}

/// Binary cross entropy with the same epsilon clamp as the graph op.
pub fn reflection_loss(p: f64, y: bool) -> f64 {
    let yf = if y { 1.0 } else { 0.0 };
    -(yf * p.max(LOG_EPS).ln() + (1.0 - yf) * (1.0 - p).max(LOG_EPS).ln())
}

// ---------------------------------------------------------------------------
// Features-only feed-forward variant
// ---------------------------------------------------------------------------

pub fn build_fnn_params(store: &mut ParamStore, hidden: usize, seed: u64) {
    let mut rng = derive(seed, &[0xf17]);
    store.insert(
        "fnn.w1",
        init_normal(&mut rng, hidden, HEAD_FEATURE_DIM, 0.05),
    );
    store.insert("fnn.b1", Mat::zeros(1, hidden));
    store.insert("fnn.w2", init_normal(&mut rng, 1, hidden, 0.05));
    store.insert("fnn.b2", Mat::zeros(1, 1));
}

/// 42 -> hidden (GELU) -> 1 (sigmoid) over transformed features.
pub fn fnn_confidence_graph(g: &mut Graph, features: &HeadFeatures) -> NodeId {
    let x = g.input(Mat::row_vector(features.as_slice().to_vec()));
    let w1 = g.param("fnn.w1");
    let b1 = g.param("fnn.b1");
    let h = g.affine(x, w1, b1);
    let h = g.gelu(h);
    let w2 = g.param("fnn.w2");
    let b2 = g.param("fnn.b2");
    let z = g.affine(h, w2, b2);
    g.sigmoid(z)
}

pub fn fnn_confidence(params: &ParamStore, features: &HeadFeatures) -> f64 {
    let mut g = Graph::new(params);
    let p = fnn_confidence_graph(&mut g, features);
    g.scalar(p)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{GoldAnnotation, Span, Vocab};
    use crate::graph::gelu_scalar;

    fn uniform_output(t: usize) -> MrcOutput {
        MrcOutput {
            type_probs: vec![1.0 / 6.0; 6],
            start_logits: vec![0.0; t],
            end_logits: vec![0.0; t],
            start_probs: vec![1.0 / t as f64; t],
            end_probs: vec![1.0 / t as f64; t],
            bio_probs: vec![[1.0 / 3.0; 3]; t],
        }
    }

    fn span_prediction(t_s: usize, t_e: usize) -> AnswerPrediction {
        AnswerPrediction {
            doc_id: "d".into(),
            answer_type: AnswerType::SingleSpan,
            short_span: Some(Span::new(5, 6)),
            multi_spans: None,
            yes_no: None,
            long_node: Some(0),
            score: 1.25,
            window_index: 0,
            window_span: Some((t_s, t_e)),
        }
    }

    #[test]
    fn feature_vector_has_the_documented_blocks() {
        let t = 128;
        let out = uniform_output(t);
        let pred = span_prediction(9, 10);
        let f = extract_head_features(&out, &pred).unwrap();
        assert_eq!(f.len(), HEAD_FEATURE_DIM);
        assert_eq!(f.score(), 1.25);
        let one_hot = f.ans_type_one_hot();
        assert_eq!(one_hot.iter().sum::<f64>(), 1.0);
        assert_eq!(one_hot[AnswerType::SingleSpan.index()], 1.0);
        for p in f.ans_type_probs() {
            assert!((p - 1.0 / 6.0).abs() < 1e-12);
        }
        assert!((f.ans_type_prob() - 1.0 / 6.0).abs() < 1e-12);
        for p in f.start_probs_block().iter().chain(f.end_probs_block()) {
            assert!((p - 1.0 / t as f64).abs() < 1e-12);
        }
        assert_eq!(f.start_logits_block(), &[0.0; 7]);
    }

    #[test]
    fn top_blocks_are_sorted_descending() {
        let t = 12;
        let mut out = uniform_output(t);
        out.start_logits = (0..t).map(|i| i as f64 * 0.5).collect();
        let pred = span_prediction(3, 4);
        let f = extract_head_features(&out, &pred).unwrap();
        let block = f.start_logits_block();
        assert_eq!(block[0], out.start_logits[3]); // predicted
        assert_eq!(block[1], out.start_logits[0]); // [cls]
        let top: Vec<f64> = block[2..].to_vec();
        assert_eq!(top, vec![5.5, 5.0, 4.5, 4.0, 3.5]);
    }

    #[test]
    fn missing_window_span_is_an_input_error() {
        let out = uniform_output(8);
        let mut pred = span_prediction(1, 2);
        pred.window_span = None;
        assert!(matches!(
            extract_head_features(&out, &pred),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn min_max_scaling_matches_the_hand_case() {
        // {0, 5, 10} scale to {0, 0.5, 1} before sqrt/log.
        assert_eq!(pre_transform(0.0, 0.0, 10.0), (0.0f64.sqrt() + 1e-6).ln());
        assert_eq!(pre_transform(5.0, 0.0, 10.0), (0.5f64.sqrt() + 1e-6).ln());
        assert_eq!(pre_transform(10.0, 0.0, 10.0), (1.0f64.sqrt() + 1e-6).ln());
    }

    fn raw_with(first: f64) -> HeadFeatures {
        let mut v = vec![0.5; HEAD_FEATURE_DIM];
        v[0] = first;
        HeadFeatures::new(v).unwrap()
    }

    #[test]
    fn constant_coordinates_transform_to_zero() {
        let raws = [raw_with(1.0), raw_with(2.0), raw_with(3.0)];
        let refs: Vec<&HeadFeatures> = raws.iter().collect();
        let stats = fit_feature_stats(&refs).unwrap();
        for r in &raws {
            let t = transform_features(r, &stats);
            // Coordinate 1.. are constant 0.5 across the set.
            for &v in &t.as_slice()[1..] {
                assert_eq!(v, 0.0);
            }
        }
    }

    #[test]
    fn full_pipeline_matches_independent_recomputation() {
        let raws = [raw_with(0.0), raw_with(5.0), raw_with(10.0)];
        let refs: Vec<&HeadFeatures> = raws.iter().collect();
        let stats = fit_feature_stats(&refs).unwrap();
        // Spreadsheet-style recomputation of coordinate 0.
        let w: Vec<f64> = [0.0f64, 0.5, 1.0]
            .iter()
            .map(|u| (u.sqrt() + 1e-6).ln())
            .collect();
        let mean = w.iter().sum::<f64>() / 3.0;
        let std = (w.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / 3.0).sqrt();
        for (r, wi) in raws.iter().zip(&w) {
            let t = transform_features(r, &stats);
            assert!((t.as_slice()[0] - (wi - mean) / std).abs() < 1e-12);
        }
    }

    fn marked_doc() -> (Document, Vec<WindowInstance>) {
        let doc = Document {
            doc_id: "d".into(),
            question: vec![70, 71],
            nodes: vec![vec![80, 81, 82, 83, 84, 85]],
            gold: GoldAnnotation::no_answer(),
        };
        let wins = crate::corpus::slice_windows(&doc, 18, 6).unwrap();
        (doc, wins)
    }

    #[test]
    fn single_span_markers_invert_to_the_span() {
        let (doc, wins) = marked_doc();
        let inst = &wins[0];
        let mut pred = span_prediction(0, 0);
        // Use doc positions 2..=4 (inside node 0 content).
        pred.short_span = Some(Span::new(2, 4));
        pred.long_node = Some(0);
        let ws = inst.window_pos_of_doc(2).unwrap();
        let we = inst.window_pos_of_doc(4).unwrap();
        pred.window_span = Some((ws, we));
        let m = build_markers(&pred, inst, &doc, Stream::Short).unwrap();
        assert_eq!(m[0], marker::SINGLE_SPAN);
        assert_eq!(m[ws], marker::START);
        assert_eq!(m[we], marker::END);
        let others = m
            .iter()
            .enumerate()
            .filter(|&(i, _)| i != 0 && i != ws && i != we)
            .all(|(_, &v)| v == marker::EMPTY);
        assert!(others);

        // Single-token span keeps only START.
        pred.short_span = Some(Span::new(3, 3));
        let wp = inst.window_pos_of_doc(3).unwrap();
        pred.window_span = Some((wp, wp));
        let m = build_markers(&pred, inst, &doc, Stream::Short).unwrap();
        assert_eq!(m[wp], marker::START);
        assert!(!m.contains(&marker::END));
    }

    #[test]
    fn multi_span_markers_lay_bio_over_content() {
        let (doc, wins) = marked_doc();
        let inst = &wins[0];
        let mut pred = span_prediction(0, 0);
        pred.answer_type = AnswerType::MultiSpan;
        pred.short_span = None;
        pred.multi_spans = Some(vec![Span::new(2, 3), Span::new(5, 5)]);
        let ws = inst.window_pos_of_doc(2).unwrap();
        pred.window_span = Some((ws, ws));
        let m = build_markers(&pred, inst, &doc, Stream::Short).unwrap();
        assert_eq!(m[0], marker::MULTI_SPAN);
        assert_eq!(m[inst.window_pos_of_doc(2).unwrap()], marker::B);
        assert_eq!(m[inst.window_pos_of_doc(3).unwrap()], marker::I);
        assert_eq!(m[inst.window_pos_of_doc(5).unwrap()], marker::B);
        assert_eq!(m[inst.window_pos_of_doc(4).unwrap()], marker::O);
        // Question tokens stay EMPTY.
        assert_eq!(m[1], marker::EMPTY);

        // Inversion: recover spans from B/I runs.
        let mut spans = Vec::new();
        let mut i = 0;
        while i < m.len() {
            if m[i] == marker::B {
                let mut j = i;
                while j + 1 < m.len() && m[j + 1] == marker::I {
                    j += 1;
                }
                spans.push(Span::new(
                    inst.window_to_doc[i].unwrap(),
                    inst.window_to_doc[j].unwrap(),
                ));
                i = j + 1;
            } else {
                i += 1;
            }
        }
        assert_eq!(spans, pred.multi_spans.clone().unwrap());
    }

    #[test]
    fn long_stream_marks_the_winning_node() {
        let (doc, wins) = marked_doc();
        let inst = &wins[0];
        let pred = span_prediction(7, 7);
        let m = build_markers(&pred, inst, &doc, Stream::Long).unwrap();
        assert_eq!(m[0], marker::LONG);
        let range = doc.node_content_range(0);
        for (w, d) in inst.content_positions() {
            if d >= range.start && d <= range.end {
                assert_eq!(m[w], marker::LONG);
            }
        }
    }

    fn tiny_cfg() -> EncoderConfig {
        EncoderConfig {
            layers: 1,
            hidden: 8,
            heads: 2,
            ffn: 16,
            max_seq: 20,
            vocab_size: 100,
            dropout: 0.0,
            attn_dropout: 0.0,
        }
    }

    fn example_for(cfg: &EncoderConfig) -> ReflectionExample {
        let (doc, wins) = marked_doc();
        let inst = wins[0].clone();
        let mut pred = span_prediction(0, 0);
        pred.short_span = Some(Span::new(2, 3));
        let ws = inst.window_pos_of_doc(2).unwrap();
        let we = inst.window_pos_of_doc(3).unwrap();
        pred.window_span = Some((ws, we));
        let markers = build_markers(&pred, &inst, &doc, Stream::Short).unwrap();
        let features = HeadFeatures::new(vec![0.1; HEAD_FEATURE_DIM]).unwrap();
        assert!(inst.tokens.len() <= cfg.max_seq);
        ReflectionExample {
            doc_id: "d".into(),
            stream: Stream::Short,
            instance: inst,
            markers,
            raw: features.clone(),
            features,
            y: true,
        }
    }

    #[test]
    fn zero_confidence_vector_gives_exactly_half() {
        let cfg = tiny_cfg();
        let mut params = build_reflection_params(&cfg, 3);
        params.get_mut("refl.a").unwrap().data.fill(0.0);
        let ex = example_for(&cfg);
        let p = reflection_forward(&params, &cfg, &ex).unwrap();
        assert_eq!(p, 0.5);
    }

    #[test]
    fn confidence_head_matches_scalar_arithmetic() {
        // H=2 hand oracle on the aggregation head alone.
        let cfg = EncoderConfig {
            hidden: 2,
            heads: 1,
            ..tiny_cfg()
        };
        let mut params = ParamStore::new();
        let mut w_r = Mat::zeros(2, 2 + HEAD_FEATURE_DIM);
        *w_r.at_mut(0, 0) = 0.5; // cls[0]
        *w_r.at_mut(0, 2) = 2.0; // feature[0]
        *w_r.at_mut(1, 1) = -1.0; // cls[1]
        params.insert("refl.w_r", w_r);
        params.insert("refl.a", Mat::row_vector(vec![1.0, -2.0]));

        let mut g = Graph::new(&params);
        let cls = g.input(Mat::row_vector(vec![0.4, 0.6]));
        let mut feats = vec![0.0; HEAD_FEATURE_DIM];
        feats[0] = 0.3;
        let features = HeadFeatures::new(feats).unwrap();
        let p = confidence_head_graph(&mut g, cls, &features);

        let h0 = gelu_scalar(0.5 * 0.4 + 2.0 * 0.3);
        let h1 = gelu_scalar(-0.6);
        let z = h0 - 2.0 * h1;
        let expect = 1.0 / (1.0 + (-z).exp());
        assert!((g.scalar(p) - expect).abs() < 1e-15);
        assert_eq!(cfg.hidden, 2);
    }

    #[test]
    fn confidence_is_monotone_in_the_dot_product() {
        let mut params = ParamStore::new();
        params.insert("refl.w_r", init_ones_w());
        params.insert("refl.a", Mat::row_vector(vec![1.0]));
        fn init_ones_w() -> Mat {
            Mat::from_vec(1, 1 + HEAD_FEATURE_DIM, vec![1.0; 1 + HEAD_FEATURE_DIM])
        }
        // p is sigmoid(z) where z is the confidence dot product; sweep the
        // head and check p orders exactly as z does.
        let mut points: Vec<(f64, f64)> = Vec::new();
        for k in 0..20 {
            let cls_val = k as f64 * 0.3 - 2.0;
            let mut g = Graph::new(&params);
            let cls = g.input(Mat::row_vector(vec![cls_val]));
            let features = HeadFeatures::new(vec![0.0; HEAD_FEATURE_DIM]).unwrap();
            let node = confidence_head_graph(&mut g, cls, &features);
            let p = g.scalar(node);
            let z = gelu_scalar(cls_val); // a == 1, features zero
            points.push((z, p));
        }
        points.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        for w in points.windows(2) {
            if w[1].0 > w[0].0 {
                assert!(w[1].1 > w[0].1, "p must strictly increase with z");
            }
        }
    }

    #[test]
    fn bce_closed_forms() {
        assert!((reflection_loss(0.5, true) - (2.0f64).ln()).abs() < 1e-12);
        assert!((reflection_loss(0.5, false) - (2.0f64).ln()).abs() < 1e-12);
        assert!(reflection_loss(1.0 - 1e-13, true) < 1e-9);
        assert!((reflection_loss(0.9, false) - std::f64::consts::LN_10).abs() < 1e-12);
        assert!(reflection_loss(0.0, true).is_finite());
    }

    #[test]
    fn init_from_mrc_copies_encoder_bits_and_freshens_the_rest() {
        let cfg = tiny_cfg();
        let mut mrc_params = ParamStore::new();
        let mut rng = derive(11, &[0]);
        crate::encoder::build_encoder_params(&mut mrc_params, &cfg, &mut rng, false);
        crate::mrc::build_mrc_head_params(&mut mrc_params, &cfg, &mut rng);

        let refl = init_from_mrc(&mrc_params, &cfg, 5).unwrap();
        for name in encoder_param_names(&cfg) {
            assert_eq!(
                mrc_params.get(&name).unwrap().data,
                refl.get(&name).unwrap().data,
                "{name} not copied bit-exactly"
            );
        }
        assert!(refl.get("embed.marker").is_some());
        assert!(refl.get("refl.w_r").is_some());
        assert!(refl.get("mrc.w_type").is_none());

        let refl2 = init_from_mrc(&mrc_params, &cfg, 6).unwrap();
        assert_ne!(
            refl.get("embed.marker").unwrap().data,
            refl2.get("embed.marker").unwrap().data
        );

        // Marker-free forward equality against the first-phase encoder.
        let ex = example_for(&cfg);
        let run = |params: &ParamStore| {
            let mut g = Graph::new(params);
            let h = hidden_states(&mut g, &cfg, &ex.instance, None, &mut Mode::Eval).unwrap();
            g.value(h).data.clone()
        };
        assert_eq!(run(&mrc_params), run(&refl));
    }

    #[test]
    fn missing_tensor_fails_initialization() {
        let cfg = tiny_cfg();
        let store = ParamStore::new();
        assert!(matches!(
            init_from_mrc(&store, &cfg, 5),
            Err(Error::Checkpoint(_))
        ));
    }

    /// Recount oracle: one example per stream for exactly the answered
    /// questions, with correctness labels matching an independent rematch.
    #[test]
    fn dataset_counts_and_labels_match_an_independent_recount() {
        let cfg = EncoderConfig {
            max_seq: 40,
            ..tiny_cfg()
        };
        let spec = crate::corpus::CorpusSpec {
            num_docs: 40,
            vocab_size: 100,
            node_count: (2, 3),
            node_len: (4, 6),
            distractor_rate: 0.3,
            seed: 17,
            ..crate::corpus::CorpusSpec::default()
        };
        let docs = crate::corpus::generate_corpus(&spec).unwrap();
        let mut params = ParamStore::new();
        let mut rng = derive(2, &[0]);
        crate::encoder::build_encoder_params(&mut params, &cfg, &mut rng, false);
        crate::mrc::build_mrc_head_params(&mut params, &cfg, &mut rng);
        // Bias the type head away from no-answer so plenty of questions get
        // answered without any training.
        params
            .get_mut("mrc.w_type")
            .unwrap()
            .row_mut(AnswerType::SingleSpan.index())
            .fill(0.5);

        let (max_len, stride, max_ans) = (40, 8, 6);
        let (long, short) =
            build_reflection_dataset(&params, &cfg, &docs, max_len, stride, max_ans).unwrap();

        // Independent recount straight from per-document decoding.
        let mut answered = Vec::new();
        for doc in &docs {
            let wins = crate::corpus::slice_windows(doc, max_len, stride).unwrap();
            let outs: Vec<MrcOutput> = wins
                .iter()
                .map(|w| mrc_forward(&params, &cfg, w).unwrap())
                .collect();
            let pred = decode_document(&outs, &wins, doc, max_ans).unwrap();
            if !pred.is_no_answer() {
                answered.push(pred);
            }
        }
        assert!(!answered.is_empty(), "fixture must answer some questions");
        assert_eq!(long.len(), answered.len());
        assert_eq!(short.len(), answered.len());

        for (examples, stream) in [(&long, Stream::Long), (&short, Stream::Short)] {
            let mut seen = std::collections::BTreeSet::new();
            for (ex, pred) in examples.iter().zip(&answered) {
                assert!(seen.insert(ex.doc_id.clone()), "duplicate {}", ex.doc_id);
                assert_eq!(ex.doc_id, pred.doc_id);
                assert_eq!(ex.raw.len(), HEAD_FEATURE_DIM);
                let doc = docs.iter().find(|d| d.doc_id == ex.doc_id).unwrap();
                let (lp, sp) = payloads_from_prediction(pred);
                let payload = if stream == Stream::Long { lp } else { sp };
                let want = match_answers(&payload, &doc.gold, stream).unwrap();
                assert_eq!(ex.y, want, "label mismatch for {}", ex.doc_id);
            }
        }
    }

    #[test]
    fn fnn_zero_weights_give_half_and_hand_case_matches() {
        let mut params = ParamStore::new();
        build_fnn_params(&mut params, 4, 7);
        for name in ["fnn.w1", "fnn.b1", "fnn.w2", "fnn.b2"] {
            params.get_mut(name).unwrap().data.fill(0.0);
        }
        let features = HeadFeatures::new(vec![0.7; HEAD_FEATURE_DIM]).unwrap();
        assert_eq!(fnn_confidence(&params, &features), 0.5);

        // Two-active-feature reduced case.
        params.get_mut("fnn.w1").unwrap().row_mut(0)[..2].copy_from_slice(&[1.0, -0.5]);
        params.get_mut("fnn.w2").unwrap().data[0] = 2.0;
        let mut v = vec![0.0; HEAD_FEATURE_DIM];
        v[0] = 0.6;
        v[1] = 0.8;
        let features = HeadFeatures::new(v).unwrap();
        let z = 2.0 * gelu_scalar(0.6 - 0.5 * 0.8);
        let expect = 1.0 / (1.0 + (-z).exp());
        assert!((fnn_confidence(&params, &features) - expect).abs() < 1e-15);
    }

    #[test]
    fn all_no_answer_predictions_yield_an_empty_dataset() {
        let cfg = EncoderConfig {
            max_seq: 32,
            ..tiny_cfg()
        };
        let spec = crate::corpus::CorpusSpec {
            num_docs: 8,
            vocab_size: 100,
            node_count: (1, 2),
            node_len: (4, 6),
            distractor_rate: 0.0,
            seed: 3,
            ..crate::corpus::CorpusSpec::default()
        };
        let docs = crate::corpus::generate_corpus(&spec).unwrap();
        let mut params = ParamStore::new();
        let mut rng = derive(1, &[0]);
        crate::encoder::build_encoder_params(&mut params, &cfg, &mut rng, false);
        crate::mrc::build_mrc_head_params(&mut params, &cfg, &mut rng);
        // Zero type head: uniform probabilities, argmax falls on no-answer.
        params.get_mut("mrc.w_type").unwrap().data.fill(0.0);
        let (long, short) =
            build_reflection_dataset(&params, &cfg, &docs, 32, 7, 10).unwrap();
        assert!(long.is_empty());
        assert!(short.is_empty());
    }

    #[test]
    fn records_roundtrip_through_jsonl() {
        let cfg = tiny_cfg();
        let ex = example_for(&cfg);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("refl.jsonl");
        save_examples(&path, std::slice::from_ref(&ex)).unwrap();
        let loaded = load_examples(&path).unwrap();
        assert_eq!(loaded.len(), 1);
        assert_eq!(loaded[0].instance.tokens, ex.instance.tokens);
        assert_eq!(loaded[0].instance.segment_ids, ex.instance.segment_ids);
        assert_eq!(loaded[0].markers, ex.markers);
        assert_eq!(loaded[0].features, ex.features);
        assert_eq!(loaded[0].y, ex.y);
    }

    #[test]
    fn vocabulary_ids_fit_the_marker_table() {
        // The marker dictionary has exactly 11 symbols; EMPTY is the last row.
        assert_eq!(marker::EMPTY as usize + 1, crate::encoder::MARKER_VOCAB);
        let v = Vocab::synthetic(100).unwrap();
        assert!(v.len() == 100);
    }
}
