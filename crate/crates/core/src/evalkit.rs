//! Answer matching, optimal-threshold metrics, recall at fixed precision,
//! prediction ensembling and the right/wrong/no-answer analysis table.
//!
//! A prediction is *triggered* when its payload is an actual answer and its
//! confidence is strictly greater than the threshold. The sweep evaluates
//! every observed confidence plus the two infinities (trigger everything /
//! trigger nothing), which covers every distinct triggered set; F1 ties
//! resolve toward the higher threshold.

use crate::corpus::{AnswerType, Document, GoldAnnotation, Span};
use crate::error::{Error, Result};
use crate::mrc::AnswerPrediction;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Stream {
    #[serde(rename = "long")]
    Long,
    #[serde(rename = "short")]
    Short,
}

impl std::fmt::Display for Stream {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Stream::Long => write!(f, "long"),
            Stream::Short => write!(f, "short"),
        }
    }
}

/// Answer payload of one stream. Multi-span payloads are kept sorted so that
/// equality is set equality.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AnswerPayload {
    NoAnswer,
    Node { index: usize },
    Span { start: usize, end: usize },
    MultiSpan { spans: Vec<Span> },
    YesNo { value: bool },
}

impl AnswerPayload {
    pub fn is_answer(&self) -> bool {
        !matches!(self, AnswerPayload::NoAnswer)
    }

    fn canonical(mut self) -> Self {
        if let AnswerPayload::MultiSpan { spans } = &mut self {
            spans.sort();
        }
        self
    }

    fn allowed_in(&self, stream: Stream) -> bool {
        match stream {
            Stream::Long => matches!(self, AnswerPayload::NoAnswer | AnswerPayload::Node { .. }),
            Stream::Short => !matches!(self, AnswerPayload::Node { .. }),
        }
    }
}

/// One scored answer of one system for one question and stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredPrediction {
    pub doc_id: String,
    pub stream: Stream,
    pub payload: AnswerPayload,
    pub confidence: f64,
}

/// Long- and short-stream payloads of a decoded document answer.
pub fn payloads_from_prediction(pred: &AnswerPrediction) -> (AnswerPayload, AnswerPayload) {
    let long = match (pred.answer_type, pred.long_node) {
        (AnswerType::NoAnswer, _) | (_, None) => AnswerPayload::NoAnswer,
        (_, Some(n)) => AnswerPayload::Node { index: n },
    };
    let short = match pred.answer_type {
        AnswerType::SingleSpan => match pred.short_span {
            Some(s) => AnswerPayload::Span {
                start: s.start,
                end: s.end,
            },
            None => AnswerPayload::NoAnswer,
        },
        AnswerType::MultiSpan => match &pred.multi_spans {
            Some(spans) => AnswerPayload::MultiSpan {
                spans: spans.clone(),
            }
            .canonical(),
            None => AnswerPayload::NoAnswer,
        },
        AnswerType::Yes => AnswerPayload::YesNo { value: true },
        AnswerType::No => AnswerPayload::YesNo { value: false },
        AnswerType::LongOnly | AnswerType::NoAnswer => AnswerPayload::NoAnswer,
    };
    (long, short)
}

/// The gold payload of a stream; `NoAnswer` when the stream has none.
pub fn gold_payload(gold: &GoldAnnotation, stream: Stream) -> AnswerPayload {
    match stream {
        Stream::Long => match (gold.answer_type, gold.long_node) {
            (AnswerType::NoAnswer, _) | (_, None) => AnswerPayload::NoAnswer,
            (_, Some(n)) => AnswerPayload::Node { index: n },
        },
        Stream::Short => match gold.answer_type {
            AnswerType::SingleSpan => match gold.short_span {
                Some(s) => AnswerPayload::Span {
                    start: s.start,
                    end: s.end,
                },
                None => AnswerPayload::NoAnswer,
            },
            AnswerType::MultiSpan => match &gold.multi_spans {
                Some(spans) => AnswerPayload::MultiSpan {
                    spans: spans.clone(),
                }
                .canonical(),
                None => AnswerPayload::NoAnswer,
            },
            AnswerType::Yes => AnswerPayload::YesNo { value: true },
            AnswerType::No => AnswerPayload::YesNo { value: false },
            AnswerType::LongOnly | AnswerType::NoAnswer => AnswerPayload::NoAnswer,
        },
    }
}

/// Exact-match comparison of a predicted payload against the gold annotation.
/// Long answers match on the node index, short answers on identical spans
/// (multi-span as a set) or yes/no polarity; a gold without an answer in this
/// stream matches only a no-answer payload.
pub fn match_answers(
    payload: &AnswerPayload,
    gold: &GoldAnnotation,
    stream: Stream,
) -> Result<bool> {
    if !payload.allowed_in(stream) {
        return Err(Error::Usage(format!(
            "payload {payload:?} is not valid for the {stream} stream"
        )));
    }
    Ok(payload.clone().canonical() == gold_payload(gold, stream))
}

/// Gold annotations per doc id.
pub fn gold_map(docs: &[Document]) -> BTreeMap<String, GoldAnnotation> {
    docs.iter()
        .map(|d| (d.doc_id.clone(), d.gold.clone()))
        .collect()
}

// ---------------------------------------------------------------------------
// Threshold sweep
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepPoint {
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

struct StreamItems {
    /// (confidence, payload is an answer, answer matches gold)
    items: Vec<(f64, bool, bool)>,
    answerable: usize,
}

fn collect_stream(
    predictions: &[ScoredPrediction],
    golds: &BTreeMap<String, GoldAnnotation>,
    stream: Stream,
) -> Result<StreamItems> {
    let mut seen = BTreeMap::new();
    let mut items = Vec::new();
    for p in predictions.iter().filter(|p| p.stream == stream) {
        if !p.confidence.is_finite() {
            return Err(Error::Input(format!(
                "non-finite confidence for {}",
                p.doc_id
            )));
        }
        let gold = golds.get(&p.doc_id).ok_or_else(|| {
            Error::Input(format!("prediction for unknown doc {}", p.doc_id))
        })?;
        if seen.insert(p.doc_id.clone(), ()).is_some() {
            return Err(Error::Input(format!(
                "duplicate {stream} prediction for doc {}",
                p.doc_id
            )));
        }
        let right = p.payload.is_answer() && match_answers(&p.payload, gold, stream)?;
        items.push((p.confidence, p.payload.is_answer(), right));
    }
    let answerable = golds
        .values()
        .filter(|g| gold_payload(g, stream).is_answer())
        .count();
    Ok(StreamItems { items, answerable })
}

fn point_at(items: &StreamItems, threshold: f64) -> SweepPoint {
    let mut triggered = 0usize;
    let mut right = 0usize;
    for &(conf, is_answer, is_right) in &items.items {
        if is_answer && conf > threshold {
            triggered += 1;
            if is_right {
                right += 1;
            }
        }
    }
    let precision = if triggered > 0 {
        right as f64 / triggered as f64
    } else {
        0.0
    };
    let recall = if items.answerable > 0 {
        right as f64 / items.answerable as f64
    } else {
        0.0
    };
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    SweepPoint {
        threshold,
        precision,
        recall,
        f1,
    }
}

fn sweep_thresholds(items: &StreamItems) -> Vec<f64> {
    let mut ts = vec![f64::NEG_INFINITY, f64::INFINITY];
    ts.extend(items.items.iter().map(|&(c, _, _)| c));
    ts.sort_by(|a, b| a.partial_cmp(b).unwrap());
    ts.dedup();
    ts
}

/// Sweep every observed confidence (plus the infinities) and return the point
/// maximizing F1; ties resolve to the higher threshold.
pub fn optimal_threshold_f1(
    predictions: &[ScoredPrediction],
    golds: &BTreeMap<String, GoldAnnotation>,
    stream: Stream,
) -> Result<SweepPoint> {
    let items = collect_stream(predictions, golds, stream)?;
    let mut best: Option<SweepPoint> = None;
    for t in sweep_thresholds(&items) {
        let p = point_at(&items, t);
        if best.is_none_or(|b| p.f1 >= b.f1) {
            best = Some(p);
        }
    }
    Ok(best.expect("sweep always contains the infinities"))
}

/// Maximum recall among sweep points with precision at or above `target`;
/// 0 when the target is unreachable.
pub fn recall_at_precision(
    predictions: &[ScoredPrediction],
    golds: &BTreeMap<String, GoldAnnotation>,
    stream: Stream,
    target: f64,
) -> Result<f64> {
    if !(target > 0.0 && target <= 1.0) {
        return Err(Error::Input(format!(
            "precision target must be in (0,1], got {target}"
        )));
    }
    let items = collect_stream(predictions, golds, stream)?;
    let mut best = 0.0f64;
    for t in sweep_thresholds(&items) {
        let p = point_at(&items, t);
        if p.precision >= target && p.recall > best {
            best = p.recall;
        }
    }
    Ok(best)
}

// ---------------------------------------------------------------------------
// Analysis counts
// ---------------------------------------------------------------------------

/// Prediction counts at a fixed threshold, split by gold answerability.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnalysisCounts {
    pub has_ans_right: usize,
    pub has_ans_wrong: usize,
    pub has_ans_no_ans: usize,
    pub no_ans_wrong: usize,
    pub no_ans_no_ans: usize,
}

impl AnalysisCounts {
    pub fn gold_has_ans(&self) -> usize {
        self.has_ans_right + self.has_ans_wrong + self.has_ans_no_ans
    }

    pub fn gold_no_ans(&self) -> usize {
        self.no_ans_wrong + self.no_ans_no_ans
    }

    pub fn total_wrong(&self) -> usize {
        self.has_ans_wrong + self.no_ans_wrong
    }

    pub fn total_no_ans(&self) -> usize {
        self.has_ans_no_ans + self.no_ans_no_ans
    }
}

/// Categorize thresholded predictions: answerable golds split into
/// right/wrong/no-answer, unanswerable golds into wrong/no-answer.
pub fn analysis_counts(
    predictions: &[ScoredPrediction],
    golds: &BTreeMap<String, GoldAnnotation>,
    stream: Stream,
    threshold: f64,
) -> Result<AnalysisCounts> {
    let mut counts = AnalysisCounts {
        has_ans_right: 0,
        has_ans_wrong: 0,
        has_ans_no_ans: 0,
        no_ans_wrong: 0,
        no_ans_no_ans: 0,
    };
    for p in predictions.iter().filter(|p| p.stream == stream) {
        let gold = golds.get(&p.doc_id).ok_or_else(|| {
            Error::Input(format!("prediction for unknown doc {}", p.doc_id))
        })?;
        let gold_answerable = gold_payload(gold, stream).is_answer();
        let triggered = p.payload.is_answer() && p.confidence > threshold;
        if gold_answerable {
            if !triggered {
                counts.has_ans_no_ans += 1;
            } else if match_answers(&p.payload, gold, stream)? {
                counts.has_ans_right += 1;
            } else {
                counts.has_ans_wrong += 1;
            }
        } else if triggered {
            counts.no_ans_wrong += 1;
        } else {
            counts.no_ans_no_ans += 1;
        }
    }
    Ok(counts)
}

// ---------------------------------------------------------------------------
// Ensembling
// ---------------------------------------------------------------------------

/// Merge per-model predictions question by question: identical payloads pool
/// their confidences, the best-scoring payload wins, ties go to the payload
/// contributed by the lowest-indexed model.
pub fn ensemble_combine(per_model: &[Vec<ScoredPrediction>]) -> Result<Vec<ScoredPrediction>> {
    if per_model.is_empty() {
        return Err(Error::Input("ensemble requires at least one model".into()));
    }
    // Per (doc, stream): candidate groups of (payload, summed confidence,
    // first contributing model index).
    type Groups = Vec<(AnswerPayload, f64, usize)>;
    let mut table: BTreeMap<(String, Stream), Groups> = BTreeMap::new();
    for (model_idx, preds) in per_model.iter().enumerate() {
        for p in preds {
            let key = (p.doc_id.clone(), p.stream);
            let groups = table.entry(key).or_default();
            let payload = p.payload.clone().canonical();
            match groups.iter_mut().find(|(g, _, _)| *g == payload) {
                Some(slot) => slot.1 += p.confidence,
                None => groups.push((payload, p.confidence, model_idx)),
            }
        }
    }
    let mut out = Vec::with_capacity(table.len());
    for ((doc_id, stream), groups) in table {
        let mut best = 0;
        for i in 1..groups.len() {
            let better = groups[i].1 > groups[best].1
                || (groups[i].1 == groups[best].1 && groups[i].2 < groups[best].2);
            if better {
                best = i;
            }
        }
        let (payload, confidence, _) = groups[best].clone();
        out.push(ScoredPrediction {
            doc_id,
            stream,
            payload,
            confidence,
        });
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Report
// ---------------------------------------------------------------------------

/// Threshold that may be infinite; serialized as a number when finite and as
/// "inf"/"-inf" otherwise (JSON has no infinities).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Threshold(pub f64);

impl Serialize for Threshold {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        if self.0.is_finite() {
            s.serialize_f64(self.0)
        } else if self.0 > 0.0 {
            s.serialize_str("inf")
        } else {
            s.serialize_str("-inf")
        }
    }
}

impl<'de> Deserialize<'de> for Threshold {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Num(f64),
            Str(String),
        }
        match Repr::deserialize(d)? {
            Repr::Num(x) => Ok(Threshold(x)),
            Repr::Str(s) => match s.as_str() {
                "inf" => Ok(Threshold(f64::INFINITY)),
                "-inf" => Ok(Threshold(f64::NEG_INFINITY)),
                other => Err(serde::de::Error::custom(format!(
                    "invalid threshold string {other:?}"
                ))),
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamReport {
    pub threshold: Threshold,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Recall at fixed precision, keyed by the formatted target ("0.90").
    pub r_at_p: BTreeMap<String, f64>,
    pub analysis: AnalysisCounts,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub fingerprint: String,
    pub num_questions: usize,
    pub long: StreamReport,
    pub short: StreamReport,
}

/// Compute the full per-stream report at the F1-optimal threshold.
pub fn evaluate(
    predictions: &[ScoredPrediction],
    golds: &BTreeMap<String, GoldAnnotation>,
    r_at_p_targets: &[f64],
    fingerprint: &str,
) -> Result<EvalReport> {
    let mut reports = Vec::new();
    for stream in [Stream::Long, Stream::Short] {
        let n = predictions.iter().filter(|p| p.stream == stream).count();
        if n != golds.len() {
            return Err(Error::Input(format!(
                "expected one {stream} prediction per question ({} golds, {n} predictions)",
                golds.len()
            )));
        }
        let best = optimal_threshold_f1(predictions, golds, stream)?;
        let mut r_at_p = BTreeMap::new();
        for &t in r_at_p_targets {
            r_at_p.insert(
                format!("{t:.2}"),
                recall_at_precision(predictions, golds, stream, t)?,
            );
        }
        let analysis = analysis_counts(predictions, golds, stream, best.threshold)?;
        reports.push(StreamReport {
            threshold: Threshold(best.threshold),
            precision: best.precision,
            recall: best.recall,
            f1: best.f1,
            r_at_p,
            analysis,
        });
    }
    let short = reports.pop().unwrap();
    let long = reports.pop().unwrap();
    Ok(EvalReport {
        fingerprint: fingerprint.to_string(),
        num_questions: golds.len(),
        long,
        short,
    })
}

impl EvalReport {
    /// Human-readable rendering: one metrics row per stream plus the
    /// prediction-count analysis split by gold answerability.
    pub fn render_table(&self) -> String {
        let mut s = String::new();
        s.push_str("stream   F1      P       R       R@P=90  R@P=75  R@P=50  threshold\n");
        for (name, r) in [("long", &self.long), ("short", &self.short)] {
            let rp = |k: &str| {
                r.r_at_p
                    .get(k)
                    .map_or("-".to_string(), |v| format!("{:.4}", v))
            };
            s.push_str(&format!(
                "{:<8} {:.4}  {:.4}  {:.4}  {:<6}  {:<6}  {:<6}  {}\n",
                name,
                r.f1,
                r.precision,
                r.recall,
                rp("0.90"),
                rp("0.75"),
                rp("0.50"),
                if r.threshold.0.is_finite() {
                    format!("{:.6}", r.threshold.0)
                } else if r.threshold.0 > 0.0 {
                    "inf".to_string()
                } else {
                    "-inf".to_string()
                }
            ));
        }
        s.push('\n');
        s.push_str("analysis (thresholded predictions per gold category)\n");
        s.push_str("stream   has-ans: right  wrong  no-ans   | no-ans: wrong  no-ans\n");
        for (name, r) in [("long", &self.long), ("short", &self.short)] {
            let a = &r.analysis;
            s.push_str(&format!(
                "{:<8} {:>15} {:>6} {:>7}   | {:>14} {:>7}\n",
                name,
                a.has_ans_right,
                a.has_ans_wrong,
                a.has_ans_no_ans,
                a.no_ans_wrong,
                a.no_ans_no_ans
            ));
        }
        s
    }
}

// ---------------------------------------------------------------------------
// JSONL persistence
// ---------------------------------------------------------------------------

pub fn save_predictions(path: &Path, preds: &[ScoredPrediction]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for p in preds {
        serde_json::to_writer(&mut f, p).map_err(|e| Error::Input(e.to_string()))?;
        writeln!(f)?;
    }
    Ok(())
}

pub fn load_predictions(path: &Path) -> Result<Vec<ScoredPrediction>> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    let f = BufReader::new(std::fs::File::open(path)?);
    let mut preds = Vec::new();
    for (i, line) in f.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let p: ScoredPrediction =
            serde_json::from_str(&line).map_err(|e| Error::MalformedLine {
                path: path.to_path_buf(),
                line: i + 1,
                message: e.to_string(),
            })?;
        preds.push(p);
    }
    Ok(preds)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gold_span(start: usize, end: usize) -> GoldAnnotation {
        GoldAnnotation {
            answer_type: AnswerType::SingleSpan,
            long_node: Some(0),
            short_span: Some(Span::new(start, end)),
            multi_spans: None,
        }
    }

    fn span_payload(start: usize, end: usize) -> AnswerPayload {
        AnswerPayload::Span { start, end }
    }

    fn pred(doc: &str, stream: Stream, payload: AnswerPayload, conf: f64) -> ScoredPrediction {
        ScoredPrediction {
            doc_id: doc.into(),
            stream,
            payload,
            confidence: conf,
        }
    }

    #[test]
    fn matching_follows_exact_equality() {
        let gold = gold_span(3, 5);
        assert!(match_answers(&span_payload(3, 5), &gold, Stream::Short).unwrap());
        assert!(!match_answers(&span_payload(3, 6), &gold, Stream::Short).unwrap());

        let gold_ms = GoldAnnotation {
            answer_type: AnswerType::MultiSpan,
            long_node: Some(0),
            short_span: Some(Span::new(1, 8)),
            multi_spans: Some(vec![Span::new(1, 2), Span::new(7, 8)]),
        };
        let shuffled = AnswerPayload::MultiSpan {
            spans: vec![Span::new(7, 8), Span::new(1, 2)],
        };
        assert!(match_answers(&shuffled, &gold_ms, Stream::Short).unwrap());

        // Long stream matches on the node index.
        assert!(match_answers(
            &AnswerPayload::Node { index: 0 },
            &gold,
            Stream::Long
        )
        .unwrap());
        assert!(!match_answers(
            &AnswerPayload::Node { index: 1 },
            &gold,
            Stream::Long
        )
        .unwrap());

        // Gold no-answer matches only no-answer.
        let na = GoldAnnotation::no_answer();
        assert!(match_answers(&AnswerPayload::NoAnswer, &na, Stream::Short).unwrap());
        assert!(!match_answers(&span_payload(0, 0), &na, Stream::Short).unwrap());
    }

    #[test]
    fn stream_mismatch_is_a_usage_error() {
        let gold = gold_span(3, 5);
        assert!(matches!(
            match_answers(&AnswerPayload::Node { index: 0 }, &gold, Stream::Short),
            Err(Error::Usage(_))
        ));
        assert!(matches!(
            match_answers(&span_payload(1, 2), &gold, Stream::Long),
            Err(Error::Usage(_))
        ));
    }

    fn four_pred_fixture() -> (Vec<ScoredPrediction>, BTreeMap<String, GoldAnnotation>) {
        let mut golds = BTreeMap::new();
        golds.insert("a".to_string(), gold_span(1, 2));
        golds.insert("b".to_string(), gold_span(3, 4));
        golds.insert("c".to_string(), gold_span(5, 6));
        golds.insert("d".to_string(), GoldAnnotation::no_answer());
        let preds = vec![
            pred("a", Stream::Short, span_payload(1, 2), 0.9), // right
            pred("b", Stream::Short, span_payload(9, 9), 0.8), // wrong
            pred("c", Stream::Short, span_payload(5, 6), 0.7), // right
            pred("d", Stream::Short, span_payload(0, 1), 0.6), // wrong (gold no-ans)
        ];
        (preds, golds)
    }

    #[test]
    fn hand_sweep_case_peaks_at_two_thirds() {
        let (preds, golds) = four_pred_fixture();
        let best = optimal_threshold_f1(&preds, &golds, Stream::Short).unwrap();
        assert!((best.f1 - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(best.threshold, 0.6);
        assert!((best.precision - 2.0 / 3.0).abs() < 1e-12);
        assert!((best.recall - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn perfect_system_triggers_everything() {
        let mut golds = BTreeMap::new();
        let mut preds = Vec::new();
        for i in 0..5 {
            let id = format!("q{i}");
            golds.insert(id.clone(), gold_span(i, i + 1));
            preds.push(pred(&id, Stream::Short, span_payload(i, i + 1), 0.1 * i as f64));
        }
        let best = optimal_threshold_f1(&preds, &golds, Stream::Short).unwrap();
        assert_eq!(best.f1, 1.0);
        assert_eq!(best.threshold, f64::NEG_INFINITY);
        assert_eq!(
            recall_at_precision(&preds, &golds, Stream::Short, 0.9).unwrap(),
            1.0
        );
    }

    #[test]
    fn no_answerable_gold_gives_zero_f1() {
        let mut golds = BTreeMap::new();
        golds.insert("a".to_string(), GoldAnnotation::no_answer());
        let preds = vec![pred("a", Stream::Short, span_payload(0, 0), 0.5)];
        let best = optimal_threshold_f1(&preds, &golds, Stream::Short).unwrap();
        assert_eq!(best.f1, 0.0);
        // Ties across the whole sweep resolve to the highest threshold.
        assert_eq!(best.threshold, f64::INFINITY);
    }

    #[test]
    fn unreachable_precision_target_returns_zero() {
        // Best precision is 2/3 < 0.9 at every threshold that triggers.
        let mut golds = BTreeMap::new();
        golds.insert("a".to_string(), gold_span(1, 1));
        golds.insert("b".to_string(), gold_span(2, 2));
        golds.insert("c".to_string(), GoldAnnotation::no_answer());
        let preds = vec![
            pred("a", Stream::Short, span_payload(1, 1), 0.5),
            pred("b", Stream::Short, span_payload(9, 9), 0.5),
            pred("c", Stream::Short, span_payload(9, 9), 0.5),
        ];
        assert_eq!(
            recall_at_precision(&preds, &golds, Stream::Short, 0.9).unwrap(),
            0.0
        );
    }

    #[test]
    fn recall_at_precision_agrees_with_exhaustive_enumeration() {
        let (preds, golds) = four_pred_fixture();
        for target in [0.5, 0.75, 0.9, 1.0] {
            let got = recall_at_precision(&preds, &golds, Stream::Short, target).unwrap();
            // Exhaustive: every observed confidence plus the infinities.
            let mut thresholds = vec![f64::NEG_INFINITY, f64::INFINITY];
            thresholds.extend(preds.iter().map(|p| p.confidence));
            let mut best = 0.0f64;
            for &t in &thresholds {
                let triggered: Vec<_> =
                    preds.iter().filter(|p| p.confidence > t).collect();
                let right = triggered
                    .iter()
                    .filter(|p| {
                        match_answers(&p.payload, &golds[&p.doc_id], Stream::Short).unwrap()
                    })
                    .count();
                let prec = if triggered.is_empty() {
                    0.0
                } else {
                    right as f64 / triggered.len() as f64
                };
                let rec = right as f64 / 3.0;
                if prec >= target && rec > best {
                    best = rec;
                }
            }
            assert_eq!(got, best, "target {target}");
        }
    }

    #[test]
    fn precision_target_out_of_range_is_an_input_error() {
        let (preds, golds) = four_pred_fixture();
        assert!(matches!(
            recall_at_precision(&preds, &golds, Stream::Short, 0.0),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn analysis_partition_sums_to_gold_populations() {
        let (preds, golds) = four_pred_fixture();
        let c = analysis_counts(&preds, &golds, Stream::Short, 0.75).unwrap();
        // conf > 0.75 triggers docs a (right) and b (wrong); c, d untriggered.
        assert_eq!(c.has_ans_right, 1);
        assert_eq!(c.has_ans_wrong, 1);
        assert_eq!(c.has_ans_no_ans, 1);
        assert_eq!(c.no_ans_wrong, 0);
        assert_eq!(c.no_ans_no_ans, 1);
        assert_eq!(c.gold_has_ans(), 3);
        assert_eq!(c.gold_no_ans(), 1);
    }

    #[test]
    fn all_correct_predictions_have_zero_wrong_counts() {
        let mut golds = BTreeMap::new();
        golds.insert("a".to_string(), gold_span(1, 2));
        golds.insert("b".to_string(), GoldAnnotation::no_answer());
        let preds = vec![
            pred("a", Stream::Short, span_payload(1, 2), 0.9),
            pred("b", Stream::Short, AnswerPayload::NoAnswer, 0.9),
        ];
        let c = analysis_counts(&preds, &golds, Stream::Short, 0.0).unwrap();
        assert_eq!(c.total_wrong(), 0);
        assert_eq!(c.has_ans_right, 1);
        assert_eq!(c.no_ans_no_ans, 1);
    }

    #[test]
    fn ensemble_single_model_is_identity_up_to_order() {
        let (preds, _) = four_pred_fixture();
        let mut combined = ensemble_combine(std::slice::from_ref(&preds)).unwrap();
        combined.sort_by(|a, b| a.doc_id.cmp(&b.doc_id));
        let mut expect = preds;
        expect.sort_by(|a, b| a.doc_id.cmp(&b.doc_id));
        assert_eq!(combined, expect);
    }

    #[test]
    fn ensemble_groups_and_sums_confidences() {
        let models = vec![
            vec![pred("q", Stream::Short, span_payload(1, 2), 0.4)],
            vec![pred("q", Stream::Short, span_payload(1, 2), 0.3)],
            vec![pred("q", Stream::Short, span_payload(7, 8), 0.6)],
        ];
        let combined = ensemble_combine(&models).unwrap();
        assert_eq!(combined.len(), 1);
        assert_eq!(combined[0].payload, span_payload(1, 2));
        assert!((combined[0].confidence - 0.7).abs() < 1e-12);
    }

    #[test]
    fn ensemble_of_no_answers_sums_scores() {
        let models: Vec<Vec<ScoredPrediction>> = (0..3)
            .map(|_| vec![pred("q", Stream::Long, AnswerPayload::NoAnswer, 0.2)])
            .collect();
        let combined = ensemble_combine(&models).unwrap();
        assert_eq!(combined[0].payload, AnswerPayload::NoAnswer);
        assert!((combined[0].confidence - 0.6).abs() < 1e-12);
    }

    #[test]
    fn ensemble_tie_goes_to_the_lowest_model_index() {
        let models = vec![
            vec![pred("q", Stream::Short, span_payload(1, 2), 0.5)],
            vec![pred("q", Stream::Short, span_payload(7, 8), 0.5)],
        ];
        let combined = ensemble_combine(&models).unwrap();
        assert_eq!(combined[0].payload, span_payload(1, 2));
    }

    #[test]
    fn ensemble_idempotence_preserves_payloads_and_optimum() {
        let (preds, golds) = four_pred_fixture();
        let copies: Vec<Vec<ScoredPrediction>> = (0..3).map(|_| preds.clone()).collect();
        let mut combined = ensemble_combine(&copies).unwrap();
        combined.sort_by(|a, b| a.doc_id.cmp(&b.doc_id));
        for (c, p) in combined.iter().zip(&preds) {
            assert_eq!(c.payload, p.payload);
            assert!((c.confidence - 3.0 * p.confidence).abs() < 1e-12);
        }
        let before = optimal_threshold_f1(&preds, &golds, Stream::Short).unwrap();
        let after = optimal_threshold_f1(&combined, &golds, Stream::Short).unwrap();
        assert_eq!(before.f1, after.f1);
    }

    #[test]
    fn report_serialization_handles_infinite_thresholds() {
        let mut golds = BTreeMap::new();
        golds.insert("a".to_string(), gold_span(1, 2));
        let preds = vec![
            pred("a", Stream::Short, span_payload(1, 2), 0.9),
            pred("a", Stream::Long, AnswerPayload::Node { index: 0 }, 0.9),
        ];
        let report = evaluate(&preds, &golds, &[0.9, 0.75, 0.5], "fp").unwrap();
        let json = serde_json::to_string_pretty(&report).unwrap();
        let back: EvalReport = serde_json::from_str(&json).unwrap();
        assert_eq!(report, back);
        assert!(json.contains("\"-inf\""));
        assert!(!report.render_table().is_empty());
    }

    #[test]
    fn predictions_roundtrip_and_malformed_lines_are_located() {
        let (preds, _) = four_pred_fixture();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("preds.jsonl");
        save_predictions(&path, &preds).unwrap();
        assert_eq!(load_predictions(&path).unwrap(), preds);

        std::fs::write(&path, "garbage\n").unwrap();
        match load_predictions(&path) {
            Err(Error::MalformedLine { line, .. }) => assert_eq!(line, 1),
            other => panic!("unexpected {other:?}"),
        }
    }
}
