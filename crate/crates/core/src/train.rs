//! The optimization loop shared by all three training phases: Adam with
//! decoupled weight decay, linear warmup/decay, global-norm gradient
//! clipping, per-step metrics, checkpointing and epoch-level model selection
//! by a dev metric.
//!
//! All randomness is derived positionally (seed + epoch for shuffling, seed +
//! step + position for dropout), so resuming from a checkpoint replays the
//! exact run an uninterrupted training would have produced, and batch members
//! can be evaluated in parallel: gradients are reduced in batch order.

use crate::corpus::WindowInstance;
use crate::encoder::{EncoderConfig, Mode};
use crate::error::{Error, Result};
use crate::evalkit::Stream;
use crate::graph::Graph;
use crate::mrc::{mrc_forward_graph, mrc_loss_graph};
use crate::params::{GradStore, ParamStore};
use crate::reflection::{
    fnn_confidence_graph, reflection_forward_graph, HeadFeatures, ReflectionExample,
    HEAD_FEATURE_DIM,
};
use crate::rng::derive;
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    #[serde(rename = "mrc")]
    Mrc,
    #[serde(rename = "reflection")]
    Reflection,
    #[serde(rename = "fnn")]
    Fnn,
}

impl std::fmt::Display for Phase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Phase::Mrc => write!(f, "mrc"),
            Phase::Reflection => write!(f, "reflection"),
            Phase::Fnn => write!(f, "fnn"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub phase: Phase,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub weight_decay: f64,
    pub warmup_ratio: f64,
    pub clip_norm: Option<f64>,
    pub adam_eps: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub seed: u64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.warmup_ratio) {
            return Err(Error::Config("warmup ratio must be in [0,1)".into()));
        }
        Ok(())
    }

    fn base(phase: Phase, lr: f64, batch_size: usize, epochs: usize) -> Self {
        TrainConfig {
            phase,
            lr,
            batch_size,
            epochs,
            weight_decay: 0.01,
            warmup_ratio: 0.1,
            clip_norm: Some(1.0),
            adam_eps: 1e-8,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            seed: 7,
        }
    }

    /// Desk-scale defaults; toy models need larger rates than the full-scale
    /// presets below.
    pub fn desk_mrc() -> Self {
        Self::base(Phase::Mrc, 3e-3, 16, 20)
    }

    /// The confidence model trains several times slower than the first phase
    /// (a fifth of the rate here).
    pub fn desk_reflection() -> Self {
        Self::base(Phase::Reflection, 6e-4, 16, 10)
    }

    pub fn desk_fnn() -> Self {
        Self::base(Phase::Fnn, 3e-3, 32, 20)
    }

    /// Full-scale reference values (BERT-style encoder), kept as documented
    /// presets: lr 3e-5 / 5e-6, batch 24, 1 / 2 epochs, warmup 0.1, clip 1.0.
    pub fn paper_mrc_bert() -> Self {
        let mut c = Self::base(Phase::Mrc, 3e-5, 24, 1);
        c.clip_norm = Some(1.0);
        c
    }

    pub fn paper_reflection_bert() -> Self {
        let mut c = Self::base(Phase::Reflection, 5e-6, 24, 2);
        c.clip_norm = Some(1.0);
        c
    }

    /// RoBERTa-style reference: lr 2.2e-5 / 5e-6, batch 48, warmup 0.06,
    /// no gradient clipping.
    pub fn paper_mrc_roberta() -> Self {
        let mut c = Self::base(Phase::Mrc, 2.2e-5, 48, 1);
        c.warmup_ratio = 0.06;
        c.clip_norm = None;
        c
    }

    pub fn paper_reflection_roberta() -> Self {
        let mut c = Self::base(Phase::Reflection, 5e-6, 48, 2);
        c.warmup_ratio = 0.06;
        c.clip_norm = None;
        c
    }
}

// ---------------------------------------------------------------------------
// Schedule + Adam
// ---------------------------------------------------------------------------

/// Linear ramp 0 -> 1 over the warmup steps, then linear decay 1 -> 0.
pub fn schedule(step: u64, total_steps: u64, warmup_ratio: f64) -> f64 {
    if total_steps == 0 {
        return 0.0;
    }
    let total = total_steps as f64;
    let warmup = total * warmup_ratio;
    let s = (step.min(total_steps)) as f64;
    if s < warmup {
        s / warmup
    } else {
        (total - s) / (total - warmup)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdamState {
    pub m: GradStore,
    pub v: GradStore,
    /// Completed optimizer steps.
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &ParamStore) -> Self {
        AdamState {
            m: params.zeros_like(),
            v: params.zeros_like(),
            step: 0,
        }
    }
}

/// One Adam update with bias correction and decoupled weight decay, at
/// learning rate `cfg.lr * lr_scale`. Gradients are clipped to the global
/// norm first. Non-finite gradients abort the step.
pub fn adam_step(
    params: &mut ParamStore,
    grads: &GradStore,
    state: &mut AdamState,
    cfg: &TrainConfig,
    lr_scale: f64,
) -> Result<()> {
    if !grads.is_finite() {
        return Err(Error::Numeric(format!(
            "non-finite gradients at step {}; aborting the update",
            state.step
        )));
    }
    let mut clip_scale = 1.0;
    if let Some(clip) = cfg.clip_norm {
        let norm = grads.global_norm();
        if norm > clip {
            clip_scale = clip / norm;
        }
    }
    let t = state.step + 1;
    let lr = cfg.lr * lr_scale;
    let bc1 = 1.0 - cfg.adam_beta1.powi(t as i32);
    let bc2 = 1.0 - cfg.adam_beta2.powi(t as i32);
    for i in 0..grads.grads.len() {
        let g = &grads.grads[i];
        let m = &mut state.m.grads[i];
        let v = &mut state.v.grads[i];
        let p = &mut params.by_idx_mut(i).value;
        for k in 0..g.data.len() {
            let gk = g.data[k] * clip_scale;
            m.data[k] = cfg.adam_beta1 * m.data[k] + (1.0 - cfg.adam_beta1) * gk;
            v.data[k] = cfg.adam_beta2 * v.data[k] + (1.0 - cfg.adam_beta2) * gk * gk;
            let mhat = m.data[k] / bc1;
            let vhat = v.data[k] / bc2;
            p.data[k] -= lr * (mhat / (vhat.sqrt() + cfg.adam_eps) + cfg.weight_decay * p.data[k]);
        }
    }
    state.step = t;
    Ok(())
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum ModelKind {
    #[serde(rename = "mrc")]
    Mrc,
    #[serde(rename = "reflection")]
    Reflection {
        stream: Stream,
        /// Whether the model was trained with head features (the ablation
        /// flag zeroes them, and scoring must do the same).
        use_head_features: bool,
    },
    #[serde(rename = "fnn")]
    Fnn { stream: Stream, hidden: usize },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub kind: ModelKind,
    pub corpus_fingerprint: String,
    pub encoder: Option<EncoderConfig>,
    /// Window geometry the model was trained with; prediction and
    /// reflection-data generation reuse it so instances match bit-for-bit.
    pub window: Option<crate::corpus::WindowConfig>,
    /// Frozen feature-transform statistics (confidence models only).
    pub feature_stats: Option<crate::reflection::FeatureStats>,
    pub step: u64,
    pub params: ParamStore,
    pub adam_m: Option<GradStore>,
    pub adam_v: Option<GradStore>,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string(self).map_err(|e| Error::Checkpoint(e.to_string()))?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        let text = std::fs::read_to_string(path)?;
        let mut ckpt: Checkpoint =
            serde_json::from_str(&text).map_err(|e| Error::Checkpoint(e.to_string()))?;
        if ckpt.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {}",
                ckpt.version
            )));
        }
        ckpt.params.reindex();
        ckpt.params.check_finite()?;
        Ok(ckpt)
    }
}

// ---------------------------------------------------------------------------
// Phase loop
// ---------------------------------------------------------------------------

/// Per-item loss + gradient provider for one training phase.
pub trait TrainTask: Sync {
    fn len(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Training-mode loss and gradients for one item; dropout draws from the
    /// supplied stream.
    fn grad(&self, params: &ParamStore, idx: usize, rng: &mut ChaCha8Rng)
        -> Result<(f64, GradStore)>;
}

/// Per-epoch model-selection metric (higher is better).
pub type DevEval<'a> = &'a (dyn Fn(&ParamStore) -> Result<f64> + 'a);

#[derive(Debug, Clone, Serialize)]
pub struct MetricsRow {
    pub step: u64,
    pub phase: Phase,
    pub loss: f64,
    pub lr: f64,
}

/// Write the metrics log: one CSV row per optimizer step.
pub fn write_metrics_csv(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "step,phase,loss,lr")?;
    for r in rows {
        writeln!(f, "{},{},{},{}", r.step, r.phase, r.loss, r.lr)?;
    }
    Ok(())
}

pub struct PhaseOutcome {
    /// Selected parameters: best dev metric when a dev evaluator ran,
    /// otherwise the final parameters.
    pub params: ParamStore,
    /// Final parameters and optimizer state, for resuming.
    pub final_params: ParamStore,
    pub state: AdamState,
    pub metrics: Vec<MetricsRow>,
    pub epoch_mean_losses: Vec<f64>,
    /// (epoch, metric) of the selected checkpoint, when dev ran.
    pub best_dev: Option<(usize, f64)>,
}

/// Train `task` for `cfg.epochs` sweeps. Batch gradients are computed in
/// parallel and reduced in batch order; every random draw is derived from
/// (seed, epoch/step), so a run resumed from `stop_after_steps` reproduces
/// the uninterrupted run bit-for-bit as long as the config is unchanged.
pub fn run_phase(
    task: &dyn TrainTask,
    cfg: &TrainConfig,
    init: ParamStore,
    resume: Option<AdamState>,
    dev_eval: Option<DevEval>,
    stop_after_steps: Option<u64>,
) -> Result<PhaseOutcome> {
    cfg.validate()?;
    let n = task.len();
    let mut params = init;
    let mut state = resume.unwrap_or_else(|| AdamState::new(&params));
    let mut metrics = Vec::new();
    let mut epoch_mean_losses = Vec::new();
    let mut best: Option<(usize, f64, ParamStore)> = None;

    if n == 0 || cfg.epochs == 0 {
        return Ok(PhaseOutcome {
            final_params: params.clone(),
            params,
            state,
            metrics,
            epoch_mean_losses,
            best_dev: None,
        });
    }

    let batches_per_epoch = n.div_ceil(cfg.batch_size) as u64;
    let total_steps = batches_per_epoch * cfg.epochs as u64;

    'epochs: for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut derive(cfg.seed, &[0xe90c, epoch as u64]));

        let mut epoch_loss_sum = 0.0;
        let mut epoch_batches = 0u64;
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            let step = epoch as u64 * batches_per_epoch + b as u64;
            if step < state.step {
                continue; // already done before the resume point
            }
            if stop_after_steps.is_some_and(|s| state.step >= s) {
                break 'epochs;
            }
            let lr_scale = schedule(step, total_steps, cfg.warmup_ratio);
            let results: Vec<Result<(f64, GradStore)>> = batch
                .par_iter()
                .enumerate()
                .map(|(k, &idx)| {
                    let mut rng = derive(cfg.seed, &[0xd809, step, k as u64]);
                    task.grad(&params, idx, &mut rng)
                })
                .collect();
            let mut loss_sum = 0.0;
            let mut grads: Option<GradStore> = None;
            for r in results {
                let (loss, g) = r?;
                loss_sum += loss;
                match &mut grads {
                    Some(acc) => acc.add_assign(&g),
                    None => grads = Some(g),
                }
            }
            let mut grads = grads.expect("non-empty batch");
            let scale = 1.0 / batch.len() as f64;
            grads.scale_assign(scale);
            let mean_loss = loss_sum * scale;

            adam_step(&mut params, &grads, &mut state, cfg, lr_scale)?;
            metrics.push(MetricsRow {
                step,
                phase: cfg.phase,
                loss: mean_loss,
                lr: cfg.lr * lr_scale,
            });
            epoch_loss_sum += mean_loss;
            epoch_batches += 1;
        }
        if epoch_batches > 0 {
            epoch_mean_losses.push(epoch_loss_sum / epoch_batches as f64);
        }

        if let Some(eval) = dev_eval {
            let metric = eval(&params)?;
            let improved = best.as_ref().is_none_or(|(_, m, _)| metric > *m);
            if improved {
                best = Some((epoch, metric, params.clone()));
            }
        }
    }

    let (selected, best_dev) = match best {
        Some((epoch, metric, p)) => (p, Some((epoch, metric))),
        None => (params.clone(), None),
    };
    Ok(PhaseOutcome {
        params: selected,
        final_params: params,
        state,
        metrics,
        epoch_mean_losses,
        best_dev,
    })
}

// ---------------------------------------------------------------------------
// Tasks for the three phases
// ---------------------------------------------------------------------------

/// First-phase task over labeled window instances.
pub struct MrcTask<'a> {
    pub cfg: &'a EncoderConfig,
    pub instances: &'a [WindowInstance],
}

impl TrainTask for MrcTask<'_> {
    fn len(&self) -> usize {
        self.instances.len()
    }

    fn grad(
        &self,
        params: &ParamStore,
        idx: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<(f64, GradStore)> {
        let inst = &self.instances[idx];
        let mut g = Graph::new(params);
        let hidden = crate::encoder::hidden_states(
            &mut g,
            self.cfg,
            inst,
            None,
            &mut Mode::Train { rng },
        )?;
        let out = mrc_forward_graph(&mut g, hidden, &inst.valid_mask());
        let loss = mrc_loss_graph(&mut g, &out, &inst.label);
        let grads = g.backward(loss)?;
        Ok((g.scalar(loss), grads))
    }
}

/// Confidence-model task over reflection examples. With
/// `use_head_features` off the feature vector is zeroed, which removes its
/// contribution and gradient.
pub struct ReflectionTask<'a> {
    pub cfg: &'a EncoderConfig,
    pub examples: &'a [ReflectionExample],
    pub use_head_features: bool,
}

impl TrainTask for ReflectionTask<'_> {
    fn len(&self) -> usize {
        self.examples.len()
    }

    fn grad(
        &self,
        params: &ParamStore,
        idx: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<(f64, GradStore)> {
        let ex = &self.examples[idx];
        let zeros;
        let features = if self.use_head_features {
            &ex.features
        } else {
            zeros = HeadFeatures::new(vec![0.0; HEAD_FEATURE_DIM])?;
            &zeros
        };
        let mut g = Graph::new(params);
        let p = reflection_forward_graph(
            &mut g,
            self.cfg,
            &ex.instance,
            &ex.markers,
            features,
            &mut Mode::Train { rng },
        )?;
        let loss = g.bce(p, if ex.y { 1.0 } else { 0.0 });
        let grads = g.backward(loss)?;
        Ok((g.scalar(loss), grads))
    }
}

/// Features-only feed-forward task with the same training target.
pub struct FnnTask<'a> {
    pub examples: &'a [(HeadFeatures, bool)],
}

impl TrainTask for FnnTask<'_> {
    fn len(&self) -> usize {
        self.examples.len()
    }

    fn grad(
        &self,
        params: &ParamStore,
        idx: usize,
        _rng: &mut ChaCha8Rng,
    ) -> Result<(f64, GradStore)> {
        let (features, y) = &self.examples[idx];
        let mut g = Graph::new(params);
        let p = fnn_confidence_graph(&mut g, features);
        let loss = g.bce(p, if *y { 1.0 } else { 0.0 });
        let grads = g.backward(loss)?;
        Ok((g.scalar(loss), grads))
    }
}
