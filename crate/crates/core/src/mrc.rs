//! Answer heads over the encoder, the combined loss, the heuristic span
//! confidence and window/document-level decoding.
//!
//! Three heads read the hidden states: answer-type classification from the
//! `[cls]` vector, independent start/end position pointers, and a per-token
//! B/I/O head for multi-span answers. The per-window span search maximizes
//! `start_logit[s] + end_logit[e]` relative to the `[cls]` position, which is
//! exactly the heuristic confidence carried into document-level ranking.

use crate::corpus::{
    AnswerType, Document, Span, WindowInstance, WindowLabel, BIO_B, BIO_I, NUM_ANSWER_TYPES,
};
use crate::encoder::{hidden_states, EncoderConfig, Mode};
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId, LOG_EPS};
use crate::params::{init_normal, ParamStore};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub const NUM_BIO_LABELS: usize = 3;
/// Default cap on predicted span length, in tokens.
pub const DEFAULT_MAX_ANSWER_LEN: usize = 30;

/// Append the three answer-head parameter tensors.
pub fn build_mrc_head_params(store: &mut ParamStore, cfg: &EncoderConfig, rng: &mut ChaCha8Rng) {
    let h = cfg.hidden;
    store.insert("mrc.w_type", init_normal(rng, NUM_ANSWER_TYPES, h, 0.02));
    store.insert("mrc.s", init_normal(rng, 1, h, 0.02));
    store.insert("mrc.e", init_normal(rng, 1, h, 0.02));
    store.insert("mrc.w_bio", init_normal(rng, NUM_BIO_LABELS, h, 0.02));
}

pub fn mrc_head_param_names() -> [&'static str; 4] {
    ["mrc.w_type", "mrc.s", "mrc.e", "mrc.w_bio"]
}

/// Graph nodes for all head outputs of one window.
pub struct MrcGraphOut {
    pub type_probs: NodeId,
    pub start_logits: NodeId,
    pub end_logits: NodeId,
    pub start_probs: NodeId,
    pub end_probs: NodeId,
    pub bio_probs: NodeId,
}

/// Plain per-window head outputs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MrcOutput {
    pub type_probs: Vec<f64>,
    pub start_logits: Vec<f64>,
    pub end_logits: Vec<f64>,
    pub start_probs: Vec<f64>,
    pub end_probs: Vec<f64>,
    /// Row-major (T, 3) B/I/O probabilities.
    pub bio_probs: Vec<[f64; 3]>,
}

/// Run the heads over hidden states. `valid_mask` restricts the start/end
/// softmax to real positions; type and BIO probabilities are per-row softmaxes.
pub fn mrc_forward_graph(g: &mut Graph, hidden: NodeId, valid_mask: &[bool]) -> MrcGraphOut {
    let cls = g.select_row(hidden, 0);
    let w_type = g.param("mrc.w_type");
    let type_logits = g.matmul_nt(cls, w_type);
    let type_probs = g.softmax_rows(type_logits, None);

    let s_vec = g.param("mrc.s");
    let e_vec = g.param("mrc.e");
    let start_logits = g.matmul_nt(s_vec, hidden); // 1 x T
    let end_logits = g.matmul_nt(e_vec, hidden);
    let start_probs = g.softmax_rows(start_logits, Some(valid_mask));
    let end_probs = g.softmax_rows(end_logits, Some(valid_mask));

    let w_bio = g.param("mrc.w_bio");
    let bio_logits = g.matmul_nt(hidden, w_bio); // T x 3
    let bio_probs = g.softmax_rows(bio_logits, None);

    MrcGraphOut {
        type_probs,
        start_logits,
        end_logits,
        start_probs,
        end_probs,
        bio_probs,
    }
}

/// Materialize plain output vectors from the graph nodes.
pub fn extract_output(g: &Graph, out: &MrcGraphOut) -> MrcOutput {
    let bio = g.value(out.bio_probs);
    MrcOutput {
        type_probs: g.value(out.type_probs).data.clone(),
        start_logits: g.value(out.start_logits).data.clone(),
        end_logits: g.value(out.end_logits).data.clone(),
        start_probs: g.value(out.start_probs).data.clone(),
        end_probs: g.value(out.end_probs).data.clone(),
        bio_probs: (0..bio.rows)
            .map(|r| [bio.at(r, 0), bio.at(r, 1), bio.at(r, 2)])
            .collect(),
    }
}

/// Evaluation-mode forward for one instance: encoder plus heads.
pub fn mrc_forward(
    params: &ParamStore,
    cfg: &EncoderConfig,
    inst: &WindowInstance,
) -> Result<MrcOutput> {
    let mut g = Graph::new(params);
    let hidden = hidden_states(&mut g, cfg, inst, None, &mut Mode::Eval)?;
    let out = mrc_forward_graph(&mut g, hidden, &inst.valid_mask());
    Ok(extract_output(&g, &out))
}

// ---------------------------------------------------------------------------
// Loss
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MrcLoss {
    pub type_loss: f64,
    pub span_loss: f64,
    /// Exactly 0.0 for labels that are not multi-span.
    pub multi_loss: f64,
    pub total: f64,
}

fn neg_log(p: f64) -> f64 {
    -(p.max(LOG_EPS)).ln()
}

/// Combined loss over plain outputs: type + span + multi-span terms.
pub fn mrc_loss(output: &MrcOutput, label: &WindowLabel) -> MrcLoss {
    let type_loss = neg_log(output.type_probs[label.answer_type.index()]);
    let span_loss = neg_log(output.start_probs[label.start]) + neg_log(output.end_probs[label.end]);
    let multi_loss = match (&label.bio, label.answer_type) {
        (Some(bio), AnswerType::MultiSpan) => {
            let t = bio.len() as f64;
            bio.iter()
                .enumerate()
                .map(|(i, &l)| neg_log(output.bio_probs[i][l as usize]))
                .sum::<f64>()
                / t
        }
        _ => 0.0,
    };
    MrcLoss {
        type_loss,
        span_loss,
        multi_loss,
        total: type_loss + span_loss + multi_loss,
    }
}

/// Graph-side loss mirroring `mrc_loss`, for training.
pub fn mrc_loss_graph(g: &mut Graph, out: &MrcGraphOut, label: &WindowLabel) -> NodeId {
    let lt = g.pick_neg_log(out.type_probs, 0, label.answer_type.index());
    let ls = g.pick_neg_log(out.start_probs, 0, label.start);
    let le = g.pick_neg_log(out.end_probs, 0, label.end);
    let mut parts = vec![lt, ls, le];
    if label.answer_type == AnswerType::MultiSpan {
        if let Some(bio) = &label.bio {
            parts.push(g.row_neg_log_mean(out.bio_probs, bio));
        }
    }
    g.sum_scalars(&parts)
}

// ---------------------------------------------------------------------------
// Decoding
// ---------------------------------------------------------------------------

/// Span confidence relative to the `[cls]` position. Because the logits are
/// the head dot products with the hidden states, this equals
/// `S·h(x_s) + E·h(x_e) − S·h(x_1) − E·h(x_1)`.
pub fn heuristic_score(output: &MrcOutput, s: usize, e: usize) -> f64 {
    output.start_logits[s] + output.end_logits[e] - output.start_logits[0] - output.end_logits[0]
}

/// Best-scoring span of this window, in window coordinates.
///
/// Searches all pairs `s <= e < s + max_answer_len` over positions inside the
/// window's document region (markup excluded); ties prefer the smaller start,
/// then the smaller end. `None` when the window holds no eligible position.
pub fn decode_window(
    output: &MrcOutput,
    inst: &WindowInstance,
    max_answer_len: usize,
) -> Option<(usize, usize, f64)> {
    assert!(max_answer_len >= 1);
    let cands = inst.candidate_positions();
    let mut best: Option<(usize, usize, f64)> = None;
    for (i, &s) in cands.iter().enumerate() {
        for &e in &cands[i..] {
            if e >= s + max_answer_len {
                break;
            }
            let score = heuristic_score(output, s, e);
            if best.is_none_or(|(_, _, b)| score > b) {
                best = Some((s, e, score));
            }
        }
    }
    best
}

/// The decoded document-level answer: type, payload, node and the heuristic
/// score of the winning window span.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnswerPrediction {
    pub doc_id: String,
    pub answer_type: AnswerType,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub short_span: Option<Span>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub multi_spans: Option<Vec<Span>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub yes_no: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub long_node: Option<usize>,
    pub score: f64,
    pub window_index: usize,
    /// Top span in window coordinates of the winning window; the score's
    /// origin, kept for head-feature extraction. Absent for no-answer
    /// predictions.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub window_span: Option<(usize, usize)>,
}

impl AnswerPrediction {
    pub fn is_no_answer(&self) -> bool {
        self.answer_type == AnswerType::NoAnswer
    }
}

fn no_answer_prediction(doc_id: &str, score: f64, window_index: usize) -> AnswerPrediction {
    AnswerPrediction {
        doc_id: doc_id.to_string(),
        answer_type: AnswerType::NoAnswer,
        short_span: None,
        multi_spans: None,
        yes_no: None,
        long_node: None,
        score,
        window_index,
        window_span: None,
    }
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate() {
        if v > xs[best] {
            best = i;
        }
    }
    best
}

/// Decode B(I)* runs of the argmax BIO labels inside the window's document
/// region, mapped to document coordinates. Markup positions are treated as O
/// (the same eligibility rule as span endpoints), so runs never cross nodes.
fn decode_bio_runs(output: &MrcOutput, inst: &WindowInstance) -> Vec<Span> {
    let t = inst.tokens.len();
    let mut labels = vec![crate::corpus::BIO_O; t];
    for w in inst.candidate_positions() {
        let row = &output.bio_probs[w];
        labels[w] = argmax(row) as u8;
    }
    let mut spans = Vec::new();
    let mut i = 0;
    while i < t {
        if labels[i] == BIO_B {
            let mut j = i;
            while j + 1 < t && labels[j + 1] == BIO_I {
                j += 1;
            }
            if let (Some(ds), Some(de)) = (inst.window_to_doc[i], inst.window_to_doc[j]) {
                spans.push(Span::new(ds, de));
            }
            i = j + 1;
        } else {
            i += 1;
        }
    }
    spans
}

/// Pick the top window span across all windows of one document, then decode
/// the answer: the winning window's type probabilities decide the answer
/// type, multi-span types decode their BIO sequence further, and the long
/// answer is the node containing the top span.
pub fn decode_document(
    outputs: &[MrcOutput],
    instances: &[WindowInstance],
    doc: &Document,
    max_answer_len: usize,
) -> Result<AnswerPrediction> {
    if outputs.is_empty() || outputs.len() != instances.len() {
        return Err(Error::Input(
            "decode_document requires one output per window and at least one window".into(),
        ));
    }

    let mut best: Option<(usize, usize, usize, f64)> = None; // (win, s, e, score)
    for (w, (out, inst)) in outputs.iter().zip(instances).enumerate() {
        if let Some((s, e, score)) = decode_window(out, inst, max_answer_len) {
            if best.is_none_or(|(_, _, _, b)| score > b) {
                best = Some((w, s, e, score));
            }
        }
    }
    let (w, s, e, score) = match best {
        Some(b) => b,
        None => return Ok(no_answer_prediction(&doc.doc_id, 0.0, 0)),
    };

    let out = &outputs[w];
    let inst = &instances[w];
    let answer_type = AnswerType::from_index(argmax(&out.type_probs));
    if answer_type == AnswerType::NoAnswer {
        return Ok(no_answer_prediction(&doc.doc_id, score, w));
    }

    let doc_span = Span::new(
        inst.window_to_doc[s].expect("span start maps to document"),
        inst.window_to_doc[e].expect("span end maps to document"),
    );
    let long_node = Some(doc.node_of_pos(doc_span.start));

    let mut pred = AnswerPrediction {
        doc_id: doc.doc_id.clone(),
        answer_type,
        short_span: None,
        multi_spans: None,
        yes_no: None,
        long_node,
        score,
        window_index: w,
        window_span: Some((s, e)),
    };
    match answer_type {
        AnswerType::SingleSpan => pred.short_span = Some(doc_span),
        AnswerType::MultiSpan => {
            let runs = decode_bio_runs(out, inst);
            if runs.len() >= 2 {
                pred.multi_spans = Some(runs);
            } else {
                // A multi-span payload needs at least two spans; degenerate
                // BIO output falls back to the top span as a single span.
                pred.answer_type = AnswerType::SingleSpan;
                pred.short_span = Some(runs.first().copied().unwrap_or(doc_span));
            }
        }
        AnswerType::Yes => pred.yes_no = Some(true),
        AnswerType::No => pred.yes_no = Some(false),
        AnswerType::LongOnly => {}
        AnswerType::NoAnswer => unreachable!(),
    }
    Ok(pred)
}
