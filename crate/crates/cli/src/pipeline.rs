//! End-to-end orchestration behind the CLI commands.
//!
//! Every artifact carries the fingerprint of the corpus spec that produced
//! its inputs, either embedded (checkpoints, reports) or in a sidecar
//! `*.meta.json` / `meta.json` file; commands refuse to combine artifacts
//! from different corpora.

use crate::config::PipelineConfig;
use deskqa_core::corpus::{
    self, downsample_negatives, generate_corpus, slice_windows, split_documents, Document, Vocab,
    WindowConfig, WindowInstance,
};
use deskqa_core::encoder::{build_encoder_params, EncoderConfig};
use deskqa_core::error::{Error, Result};
use deskqa_core::evalkit::{
    self, ensemble_combine, evaluate, gold_map, payloads_from_prediction, EvalReport,
    ScoredPrediction, Stream,
};
use deskqa_core::fingerprint::fingerprint;
use deskqa_core::mrc::{
    build_mrc_head_params, decode_document, mrc_forward, AnswerPrediction, MrcOutput,
};
use deskqa_core::params::ParamStore;
use deskqa_core::reflection::{
    build_reflection_params, examples_from_prediction, finalize_examples, fit_feature_stats,
    fnn_confidence, init_from_mrc, load_examples, load_feature_stats, reflection_forward,
    save_examples, save_feature_stats, transform_features, FeatureStats, HeadFeatures,
    RawExample, ReflectionExample, DEFAULT_FNN_HIDDEN, HEAD_FEATURE_DIM,
};
use deskqa_core::rng::derive;
use deskqa_core::train::{
    run_phase, write_metrics_csv, Checkpoint, FnnTask, ModelKind, MrcTask, Phase,
    ReflectionTask, CHECKPOINT_VERSION,
};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::{Path, PathBuf};

pub const META_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ArtifactMeta {
    pub version: u32,
    pub fingerprint: String,
    pub created_by: String,
}

/// Sidecar location: `meta.json` inside directories, `<file>.meta.json` next
/// to files.
pub fn meta_path(artifact: &Path) -> PathBuf {
    if artifact.is_dir() {
        artifact.join("meta.json")
    } else {
        let mut name = artifact
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        name.push_str(".meta.json");
        artifact.with_file_name(name)
    }
}

pub fn write_meta(artifact: &Path, fingerprint: &str, created_by: &str) -> Result<()> {
    let meta = ArtifactMeta {
        version: META_VERSION,
        fingerprint: fingerprint.to_string(),
        created_by: created_by.to_string(),
    };
    let json = serde_json::to_string_pretty(&meta).map_err(|e| Error::Input(e.to_string()))?;
    std::fs::write(meta_path(artifact), json)?;
    Ok(())
}

pub fn read_meta(artifact: &Path) -> Result<ArtifactMeta> {
    let path = meta_path(artifact);
    if !path.exists() {
        return Err(Error::MissingArtifact(path));
    }
    let text = std::fs::read_to_string(&path)?;
    serde_json::from_str(&text).map_err(|e| Error::MalformedLine {
        path,
        line: 1,
        message: e.to_string(),
    })
}

fn check_fingerprints(left: &str, right: &str, context: &str) -> Result<()> {
    if left != right {
        return Err(Error::FingerprintMismatch {
            left: left[..left.len().min(12)].to_string(),
            right: right[..right.len().min(12)].to_string(),
            context: context.to_string(),
        });
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Corpus
// ---------------------------------------------------------------------------

pub fn gen_corpus(cfg: &PipelineConfig, out: &Path) -> Result<()> {
    std::fs::create_dir_all(out)?;
    let docs = generate_corpus(&cfg.corpus)?;
    let vocab = Vocab::synthetic(cfg.corpus.vocab_size)?;
    corpus::save_documents(&out.join("corpus.jsonl"), &docs)?;
    vocab.save(&out.join("vocab.txt"))?;
    let fp = fingerprint(&cfg.corpus)?;
    write_meta(out, &fp, "gen-corpus")?;
    Ok(())
}

pub struct LoadedCorpus {
    pub docs: Vec<Document>,
    pub vocab: Vocab,
    pub fingerprint: String,
}

pub fn load_corpus(dir: &Path) -> Result<LoadedCorpus> {
    let docs = corpus::load_documents(&dir.join("corpus.jsonl"))?;
    let vocab = Vocab::load(&dir.join("vocab.txt"))?;
    let meta = read_meta(dir)?;
    Ok(LoadedCorpus {
        docs,
        vocab,
        fingerprint: meta.fingerprint,
    })
}

// ---------------------------------------------------------------------------
// First-phase prediction plumbing
// ---------------------------------------------------------------------------

/// Decoded answer for one document plus the winning window's instance and
/// outputs (needed for confidence features downstream).
pub struct DocPrediction {
    pub pred: AnswerPrediction,
    pub instances: Vec<WindowInstance>,
    pub outputs: Vec<MrcOutput>,
}

pub fn mrc_predict_docs(
    params: &ParamStore,
    enc: &EncoderConfig,
    window: &WindowConfig,
    docs: &[Document],
) -> Result<Vec<DocPrediction>> {
    docs.par_iter()
        .map(|doc| {
            let instances = slice_windows(doc, window.max_len, window.stride)?;
            let outputs: Vec<MrcOutput> = instances
                .iter()
                .map(|inst| mrc_forward(params, enc, inst))
                .collect::<Result<_>>()?;
            let pred = decode_document(&outputs, &instances, doc, window.max_answer_len)?;
            Ok(DocPrediction {
                pred,
                instances,
                outputs,
            })
        })
        .collect()
}

/// Two heuristic-scored entries (long, short) per document.
pub fn heuristic_scored(preds: &[DocPrediction]) -> Vec<ScoredPrediction> {
    let mut out = Vec::with_capacity(preds.len() * 2);
    for dp in preds {
        let (long, short) = payloads_from_prediction(&dp.pred);
        out.push(ScoredPrediction {
            doc_id: dp.pred.doc_id.clone(),
            stream: Stream::Long,
            payload: long,
            confidence: dp.pred.score,
        });
        out.push(ScoredPrediction {
            doc_id: dp.pred.doc_id.clone(),
            stream: Stream::Short,
            payload: short,
            confidence: dp.pred.score,
        });
    }
    out.sort_by(|a, b| (&a.doc_id, a.stream).cmp(&(&b.doc_id, b.stream)));
    out
}

fn mean_dev_f1(
    params: &ParamStore,
    enc: &EncoderConfig,
    window: &WindowConfig,
    dev: &[Document],
) -> Result<f64> {
    let preds = mrc_predict_docs(params, enc, window, dev)?;
    let scored = heuristic_scored(&preds);
    let golds = gold_map(dev);
    let long = evalkit::optimal_threshold_f1(&scored, &golds, Stream::Long)?;
    let short = evalkit::optimal_threshold_f1(&scored, &golds, Stream::Short)?;
    Ok((long.f1 + short.f1) / 2.0)
}

// ---------------------------------------------------------------------------
// train-mrc
// ---------------------------------------------------------------------------

pub struct TrainSummary {
    pub steps: u64,
    pub epoch_mean_losses: Vec<f64>,
    pub best_dev: Option<(usize, f64)>,
}

pub fn train_mrc(cfg: &PipelineConfig) -> Result<TrainSummary> {
    let corpus = load_corpus(&cfg.paths.corpus_dir)?;
    if cfg.encoder.vocab_size < corpus.vocab.len() {
        return Err(Error::Config(format!(
            "encoder vocab_size {} cannot embed corpus vocabulary of {}",
            cfg.encoder.vocab_size,
            corpus.vocab.len()
        )));
    }
    let (train_docs, dev_docs) = split_documents(&corpus.docs, cfg.window.dev_fraction);

    let mut instances = Vec::new();
    for doc in train_docs {
        instances.extend(slice_windows(doc, cfg.window.max_len, cfg.window.stride)?);
    }
    let instances = downsample_negatives(
        instances,
        cfg.window.negative_keep_ratio,
        cfg.train.mrc.seed,
    )?;
    if instances.is_empty() {
        return Err(Error::Input("no training instances after slicing".into()));
    }

    let mut params = ParamStore::new();
    let mut rng = derive(cfg.train.mrc.seed, &[0x171]);
    build_encoder_params(&mut params, &cfg.encoder, &mut rng, false);
    build_mrc_head_params(&mut params, &cfg.encoder, &mut rng);

    let task = MrcTask {
        cfg: &cfg.encoder,
        instances: &instances,
    };
    let dev_closure = |p: &ParamStore| mean_dev_f1(p, &cfg.encoder, &cfg.window, dev_docs);
    let dev_eval: Option<deskqa_core::train::DevEval> = if dev_docs.is_empty() {
        None
    } else {
        Some(&dev_closure)
    };
    let outcome = run_phase(&task, &cfg.train.mrc, params, None, dev_eval, None)?;

    if let Some(parent) = cfg.paths.mrc_checkpoint.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let resumable = outcome.best_dev.is_none();
    let ckpt = Checkpoint {
        version: CHECKPOINT_VERSION,
        kind: ModelKind::Mrc,
        corpus_fingerprint: corpus.fingerprint.clone(),
        encoder: Some(cfg.encoder.clone()),
        window: Some(cfg.window.clone()),
        feature_stats: None,
        step: outcome.state.step,
        params: outcome.params,
        adam_m: resumable.then(|| outcome.state.m.clone()),
        adam_v: resumable.then(|| outcome.state.v.clone()),
    };
    ckpt.save(&cfg.paths.mrc_checkpoint)?;
    if let Some(parent) = cfg.paths.mrc_metrics.parent() {
        std::fs::create_dir_all(parent)?;
    }
    write_metrics_csv(&cfg.paths.mrc_metrics, &outcome.metrics)?;
    Ok(TrainSummary {
        steps: outcome.state.step,
        epoch_mean_losses: outcome.epoch_mean_losses,
        best_dev: outcome.best_dev,
    })
}

// ---------------------------------------------------------------------------
// gen-reflection-data
// ---------------------------------------------------------------------------

fn load_mrc_checkpoint(path: &Path) -> Result<(Checkpoint, EncoderConfig, WindowConfig)> {
    let ckpt = Checkpoint::load(path)?;
    if ckpt.kind != ModelKind::Mrc {
        return Err(Error::Usage(format!(
            "{} is not a first-phase checkpoint",
            path.display()
        )));
    }
    let enc = ckpt
        .encoder
        .clone()
        .ok_or_else(|| Error::Checkpoint("checkpoint lacks encoder config".into()))?;
    let window = ckpt
        .window
        .clone()
        .ok_or_else(|| Error::Checkpoint("checkpoint lacks window config".into()))?;
    Ok((ckpt, enc, window))
}

pub fn gen_reflection_data(mrc_path: &Path, corpus_dir: &Path, out: &Path) -> Result<()> {
    let (ckpt, enc, window) = load_mrc_checkpoint(mrc_path)?;
    let corpus = load_corpus(corpus_dir)?;
    check_fingerprints(
        &ckpt.corpus_fingerprint,
        &corpus.fingerprint,
        "first-phase checkpoint vs corpus",
    )?;
    let (train_docs, dev_docs) = split_documents(&corpus.docs, window.dev_fraction);

    std::fs::create_dir_all(out)?;
    let (long_raw, short_raw) = deskqa_core::reflection::build_reflection_dataset(
        &ckpt.params,
        &enc,
        train_docs,
        window.max_len,
        window.stride,
        window.max_answer_len,
    )?;
    if long_raw.is_empty() {
        return Err(Error::Input(
            "the first-phase model predicted no-answer everywhere; the confidence dataset is empty"
                .into(),
        ));
    }
    for (stream_name, raws) in [("long", &long_raw), ("short", &short_raw)] {
        let stats = fit_feature_stats(&raws.iter().map(|r| &r.raw).collect::<Vec<_>>())?;
        save_feature_stats(&out.join(format!("stats_{stream_name}.json")), &stats)?;
        let examples = finalize_examples(raws.clone(), &stats);
        save_examples(&out.join(format!("{stream_name}.jsonl")), &examples)?;
    }

    // Dev-split artifacts for epoch selection during confidence training:
    // examples transformed with the frozen training statistics, plus the
    // heuristic-scored dev predictions that hold the answer payloads.
    let dev_preds = mrc_predict_docs(&ckpt.params, &enc, &window, dev_docs)?;
    let mut dev_long: Vec<RawExample> = Vec::new();
    let mut dev_short: Vec<RawExample> = Vec::new();
    for dp in &dev_preds {
        if let Some((l, s)) =
            examples_from_prediction(doc_by_id(dev_docs, &dp.pred.doc_id)?, &dp.instances, &dp.outputs, &dp.pred)?
        {
            dev_long.push(l);
            dev_short.push(s);
        }
    }
    for (stream_name, raws) in [("long", dev_long), ("short", dev_short)] {
        let stats = load_feature_stats(&out.join(format!("stats_{stream_name}.json")))?;
        let examples = finalize_examples(raws, &stats);
        save_examples(&out.join(format!("dev_{stream_name}.jsonl")), &examples)?;
    }
    evalkit::save_predictions(&out.join("dev_predictions.jsonl"), &heuristic_scored(&dev_preds))?;
    write_meta(out, &corpus.fingerprint, "gen-reflection-data")?;
    Ok(())
}

fn doc_by_id<'a>(docs: &'a [Document], id: &str) -> Result<&'a Document> {
    docs.iter()
        .find(|d| d.doc_id == id)
        .ok_or_else(|| Error::Input(format!("unknown doc id {id}")))
}

// ---------------------------------------------------------------------------
// train-reflection
// ---------------------------------------------------------------------------

fn stream_name(stream: Stream) -> &'static str {
    match stream {
        Stream::Long => "long",
        Stream::Short => "short",
    }
}

/// Dev metric for a confidence model: replace the heuristic confidence of
/// every answered dev question with the model's score and take the stream's
/// optimal-threshold F1.
fn confidence_dev_f1(
    base_preds: &[ScoredPrediction],
    golds: &std::collections::BTreeMap<String, deskqa_core::corpus::GoldAnnotation>,
    stream: Stream,
    dev_examples: &[ReflectionExample],
    score: &dyn Fn(&ReflectionExample) -> Result<f64>,
) -> Result<f64> {
    let mut preds: Vec<ScoredPrediction> = base_preds
        .iter()
        .filter(|p| p.stream == stream)
        .cloned()
        .collect();
    for ex in dev_examples {
        let p = score(ex)?;
        if let Some(slot) = preds.iter_mut().find(|s| s.doc_id == ex.doc_id) {
            slot.confidence = p;
        }
    }
    Ok(evalkit::optimal_threshold_f1(&preds, golds, stream)?.f1)
}

pub fn train_reflection(cfg: &PipelineConfig, stream: Stream) -> Result<TrainSummary> {
    let (mrc_ckpt, enc, window) = load_mrc_checkpoint(&cfg.paths.mrc_checkpoint)?;
    let data_dir = &cfg.paths.reflection_data_dir;
    let data_meta = read_meta(data_dir)?;
    check_fingerprints(
        &data_meta.fingerprint,
        &mrc_ckpt.corpus_fingerprint,
        "reflection data vs first-phase checkpoint",
    )?;
    let corpus = load_corpus(&cfg.paths.corpus_dir)?;
    check_fingerprints(
        &corpus.fingerprint,
        &data_meta.fingerprint,
        "corpus vs reflection data",
    )?;

    let name = stream_name(stream);
    let examples = load_examples(&data_dir.join(format!("{name}.jsonl")))?;
    let examples: Vec<ReflectionExample> =
        examples.into_iter().filter(|e| e.stream == stream).collect();
    if examples.is_empty() {
        return Err(Error::Input(format!(
            "no {name}-stream training examples in {}",
            data_dir.display()
        )));
    }
    let stats = load_feature_stats(&data_dir.join(format!("stats_{name}.json")))?;
    let dev_examples = load_examples(&data_dir.join(format!("dev_{name}.jsonl")))?;
    let dev_preds = evalkit::load_predictions(&data_dir.join("dev_predictions.jsonl"))?;
    let (_, dev_docs) = split_documents(&corpus.docs, window.dev_fraction);
    let golds = gold_map(dev_docs);
    let has_dev = !dev_docs.is_empty();

    let train_cfg = &cfg.train.reflection;
    let (ckpt_path, metrics_path) = match stream {
        Stream::Long => (
            &cfg.paths.reflection_long_checkpoint,
            &cfg.paths.reflection_long_metrics,
        ),
        Stream::Short => (
            &cfg.paths.reflection_short_checkpoint,
            &cfg.paths.reflection_short_metrics,
        ),
    };

    let outcome;
    let kind;
    let encoder_field;
    if train_cfg.phase == Phase::Fnn {
        let items: Vec<(HeadFeatures, bool)> = examples
            .iter()
            .map(|e| (e.features.clone(), e.y))
            .collect();
        let mut params = ParamStore::new();
        deskqa_core::reflection::build_fnn_params(
            &mut params,
            DEFAULT_FNN_HIDDEN,
            train_cfg.seed,
        );
        let task = FnnTask { examples: &items };
        let dev_closure = |p: &ParamStore| {
            confidence_dev_f1(&dev_preds, &golds, stream, &dev_examples, &|ex| {
                Ok(fnn_confidence(p, &ex.features))
            })
        };
        let dev_eval: Option<deskqa_core::train::DevEval> =
            if has_dev { Some(&dev_closure) } else { None };
        outcome = run_phase(&task, train_cfg, params, None, dev_eval, None)?;
        kind = ModelKind::Fnn {
            stream,
            hidden: DEFAULT_FNN_HIDDEN,
        };
        encoder_field = None;
    } else {
        let init = if cfg.reflection_options.init_from_mrc {
            init_from_mrc(&mrc_ckpt.params, &enc, train_cfg.seed)?
        } else {
            build_reflection_params(&enc, train_cfg.seed)
        };
        let task = ReflectionTask {
            cfg: &enc,
            examples: &examples,
            use_head_features: cfg.reflection_options.use_head_features,
        };
        let use_features = cfg.reflection_options.use_head_features;
        let dev_closure = |p: &ParamStore| {
            confidence_dev_f1(&dev_preds, &golds, stream, &dev_examples, &|ex| {
                score_reflection_example(p, &enc, ex, use_features)
            })
        };
        let dev_eval: Option<deskqa_core::train::DevEval> =
            if has_dev { Some(&dev_closure) } else { None };
        outcome = run_phase(&task, train_cfg, init, None, dev_eval, None)?;
        kind = ModelKind::Reflection {
            stream,
            use_head_features: cfg.reflection_options.use_head_features,
        };
        encoder_field = Some(enc.clone());
    }

    if let Some(parent) = ckpt_path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let resumable = outcome.best_dev.is_none();
    let ckpt = Checkpoint {
        version: CHECKPOINT_VERSION,
        kind,
        corpus_fingerprint: corpus.fingerprint.clone(),
        encoder: encoder_field,
        window: Some(window),
        feature_stats: Some(stats),
        step: outcome.state.step,
        params: outcome.params,
        adam_m: resumable.then(|| outcome.state.m.clone()),
        adam_v: resumable.then(|| outcome.state.v.clone()),
    };
    ckpt.save(ckpt_path)?;
    if let Some(parent) = metrics_path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    write_metrics_csv(metrics_path, &outcome.metrics)?;
    Ok(TrainSummary {
        steps: outcome.state.step,
        epoch_mean_losses: outcome.epoch_mean_losses,
        best_dev: outcome.best_dev,
    })
}

fn score_reflection_example(
    params: &ParamStore,
    enc: &EncoderConfig,
    ex: &ReflectionExample,
    use_head_features: bool,
) -> Result<f64> {
    if use_head_features {
        reflection_forward(params, enc, ex)
    } else {
        let mut zeroed = ex.clone();
        zeroed.features = HeadFeatures::new(vec![0.0; HEAD_FEATURE_DIM])?;
        reflection_forward(params, enc, &zeroed)
    }
}

// ---------------------------------------------------------------------------
// predict
// ---------------------------------------------------------------------------

pub struct PredictArgs<'a> {
    pub mrc: &'a Path,
    pub reflection_long: Option<&'a Path>,
    pub reflection_short: Option<&'a Path>,
    pub corpus: &'a Path,
    pub out: &'a Path,
    pub dump_windows: Option<&'a Path>,
}

/// Per-question dump of the winning window's head outputs, enough to
/// recompute confidence features downstream.
#[derive(Serialize)]
struct WindowDump<'a> {
    prediction: &'a AnswerPrediction,
    type_probs: &'a [f64],
    start_logits: &'a [f64],
    end_logits: &'a [f64],
    start_probs: &'a [f64],
    end_probs: &'a [f64],
}

struct ConfidenceModel {
    ckpt: Checkpoint,
    stats: FeatureStats,
}

fn load_confidence_checkpoint(
    path: &Path,
    stream: Stream,
    corpus_fp: &str,
) -> Result<ConfidenceModel> {
    let ckpt = Checkpoint::load(path)?;
    match &ckpt.kind {
        ModelKind::Reflection { stream: s, .. } | ModelKind::Fnn { stream: s, .. } => {
            if *s != stream {
                return Err(Error::Usage(format!(
                    "{} is a {} model used for the {stream} stream",
                    path.display(),
                    stream_name(*s)
                )));
            }
        }
        ModelKind::Mrc => {
            return Err(Error::Usage(format!(
                "{} is a first-phase checkpoint, not a confidence model",
                path.display()
            )))
        }
    }
    check_fingerprints(&ckpt.corpus_fingerprint, corpus_fp, "confidence model vs corpus")?;
    let stats = ckpt
        .feature_stats
        .clone()
        .ok_or_else(|| Error::Checkpoint("confidence checkpoint lacks feature stats".into()))?;
    Ok(ConfidenceModel { ckpt, stats })
}

fn confidence_for(
    model: &ConfidenceModel,
    dp: &DocPrediction,
    doc: &Document,
    stream: Stream,
) -> Result<f64> {
    let inst = &dp.instances[dp.pred.window_index];
    let out = &dp.outputs[dp.pred.window_index];
    let raw = deskqa_core::reflection::extract_head_features(out, &dp.pred)?;
    let features = transform_features(&raw, &model.stats);
    match &model.ckpt.kind {
        ModelKind::Fnn { .. } => Ok(fnn_confidence(&model.ckpt.params, &features)),
        ModelKind::Reflection {
            use_head_features, ..
        } => {
            let enc = model
                .ckpt
                .encoder
                .as_ref()
                .ok_or_else(|| Error::Checkpoint("reflection checkpoint lacks encoder".into()))?;
            let markers =
                deskqa_core::reflection::build_markers(&dp.pred, inst, doc, stream)?;
            let ex = ReflectionExample {
                doc_id: dp.pred.doc_id.clone(),
                stream,
                instance: inst.clone(),
                markers,
                raw: raw.clone(),
                features,
                y: false,
            };
            score_reflection_example(&model.ckpt.params, enc, &ex, *use_head_features)
        }
        ModelKind::Mrc => unreachable!("rejected at load"),
    }
}

/// Score every document with the first-phase model and, where confidence
/// checkpoints are given, replace the heuristic confidence of answered
/// questions with the confidence model's probability. The confidence model
/// touches exactly one instance per answered question (the winning window);
/// the inference count is asserted against that.
pub fn score_documents(
    mrc_path: &Path,
    reflection_long: Option<&Path>,
    reflection_short: Option<&Path>,
    docs: &[Document],
    corpus_fingerprint: &str,
) -> Result<(Vec<DocPrediction>, Vec<ScoredPrediction>)> {
    let (ckpt, enc, window) = load_mrc_checkpoint(mrc_path)?;
    check_fingerprints(
        &ckpt.corpus_fingerprint,
        corpus_fingerprint,
        "first-phase checkpoint vs corpus",
    )?;
    let confidence_models = [
        (
            Stream::Long,
            reflection_long
                .map(|p| load_confidence_checkpoint(p, Stream::Long, corpus_fingerprint))
                .transpose()?,
        ),
        (
            Stream::Short,
            reflection_short
                .map(|p| load_confidence_checkpoint(p, Stream::Short, corpus_fingerprint))
                .transpose()?,
        ),
    ];

    let doc_preds = mrc_predict_docs(&ckpt.params, &enc, &window, docs)?;
    let answered = doc_preds.iter().filter(|dp| !dp.pred.is_no_answer()).count();
    let mut scored = heuristic_scored(&doc_preds);

    for (stream, model) in &confidence_models {
        let Some(model) = model else { continue };
        let mut inferences = 0usize;
        for (dp, doc) in doc_preds.iter().zip(docs) {
            if dp.pred.is_no_answer() {
                continue;
            }
            let conf = confidence_for(model, dp, doc, *stream)?;
            inferences += 1;
            let slot = scored
                .iter_mut()
                .find(|s| s.stream == *stream && s.doc_id == dp.pred.doc_id)
                .expect("scored entry exists for every document");
            slot.confidence = conf;
        }
        if inferences != answered {
            return Err(Error::Usage(format!(
                "confidence inference count {inferences} != answered question count {answered}"
            )));
        }
    }
    Ok((doc_preds, scored))
}

pub fn predict(args: &PredictArgs) -> Result<()> {
    let corpus = load_corpus(args.corpus)?;
    let (doc_preds, scored) = score_documents(
        args.mrc,
        args.reflection_long,
        args.reflection_short,
        &corpus.docs,
        &corpus.fingerprint,
    )?;

    if let Some(parent) = args.out.parent() {
        std::fs::create_dir_all(parent)?;
    }
    evalkit::save_predictions(args.out, &scored)?;
    write_meta(args.out, &corpus.fingerprint, "predict")?;

    if let Some(dump_path) = args.dump_windows {
        let mut f = std::io::BufWriter::new(std::fs::File::create(dump_path)?);
        for dp in &doc_preds {
            let out = &dp.outputs[dp.pred.window_index];
            let dump = WindowDump {
                prediction: &dp.pred,
                type_probs: &out.type_probs,
                start_logits: &out.start_logits,
                end_logits: &out.end_logits,
                start_probs: &out.start_probs,
                end_probs: &out.end_probs,
            };
            serde_json::to_writer(&mut f, &dump).map_err(|e| Error::Input(e.to_string()))?;
            writeln!(f)?;
        }
        drop(f);
        write_meta(dump_path, &corpus.fingerprint, "predict --dump-windows")?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// eval + ensemble
// ---------------------------------------------------------------------------

pub fn eval(pred_path: &Path, gold_dir: &Path, out: &Path) -> Result<EvalReport> {
    let corpus = load_corpus(gold_dir)?;
    let pred_meta = read_meta(pred_path)?;
    check_fingerprints(
        &pred_meta.fingerprint,
        &corpus.fingerprint,
        "predictions vs corpus",
    )?;
    let preds = evalkit::load_predictions(pred_path)?;
    let golds = gold_map(&corpus.docs);
    let report = evaluate(
        &preds,
        &golds,
        &[0.90, 0.75, 0.50],
        &corpus.fingerprint,
    )?;
    if let Some(parent) = out.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut json =
        serde_json::to_string_pretty(&report).map_err(|e| Error::Input(e.to_string()))?;
    json.push('\n');
    std::fs::write(out, json)?;
    Ok(report)
}

pub fn ensemble(pred_paths: &[PathBuf], out: &Path) -> Result<()> {
    if pred_paths.is_empty() {
        return Err(Error::Input("ensemble requires at least one prediction file".into()));
    }
    let mut per_model = Vec::with_capacity(pred_paths.len());
    let mut fp: Option<String> = None;
    for path in pred_paths {
        let meta = read_meta(path)?;
        match &fp {
            None => fp = Some(meta.fingerprint),
            Some(f) => check_fingerprints(f, &meta.fingerprint, "ensemble inputs")?,
        }
        per_model.push(evalkit::load_predictions(path)?);
    }
    let combined = ensemble_combine(&per_model)?;
    if let Some(parent) = out.parent() {
        std::fs::create_dir_all(parent)?;
    }
    evalkit::save_predictions(out, &combined)?;
    write_meta(out, &fp.unwrap(), "ensemble")?;
    Ok(())
}
