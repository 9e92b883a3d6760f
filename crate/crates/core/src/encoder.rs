//! Small post-layer-norm transformer encoder, trained from scratch.
//!
//! Wiring, in order: token + position + segment (+ optional answer-marker)
//! embedding sum, embedding layer norm, dropout, then `layers` blocks of
//! multi-head self-attention and a GELU feed-forward, each followed by
//! add & norm. With zero layers the output is exactly the layer-normed
//! embedding path.
//!
//! Attention masking skips padded key columns outright instead of adding a
//! large negative constant, so padded content can never perturb valid
//! positions, not even at the last bit.

use crate::corpus::WindowInstance;
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::linalg::Mat;
use crate::params::{init_normal, init_ones, ParamStore};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Number of segment embeddings (question vs window).
pub const NUM_SEGMENTS: usize = 2;
/// Answer-marker dictionary size (see `reflection::Marker`).
pub const MARKER_VOCAB: usize = 11;

const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub ffn: usize,
    pub max_seq: usize,
    pub vocab_size: usize,
    pub dropout: f64,
    pub attn_dropout: f64,
}

impl Default for EncoderConfig {
    /// Desk-scale defaults; dropout rates follow the usual 0.1.
    fn default() -> Self {
        EncoderConfig {
            layers: 2,
            hidden: 64,
            heads: 4,
            ffn: 256,
            max_seq: 128,
            vocab_size: 512,
            dropout: 0.1,
            attn_dropout: 0.1,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.heads == 0 || !self.hidden.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "hidden {} must be divisible by heads {}",
                self.hidden, self.heads
            )));
        }
        if self.max_seq == 0 || self.vocab_size == 0 {
            return Err(Error::Config(
                "max_seq and vocab_size must be positive".into(),
            ));
        }
        for (name, p) in [("dropout", self.dropout), ("attn_dropout", self.attn_dropout)] {
            if !(0.0..1.0).contains(&p) {
                return Err(Error::Config(format!("{name} must be in [0,1), got {p}")));
            }
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }
}

/// Append freshly initialized encoder parameters to `store`.
///
/// `with_markers` adds the answer-marker embedding table used by the
/// confidence model; the first-phase model does not have one.
pub fn build_encoder_params(
    store: &mut ParamStore,
    cfg: &EncoderConfig,
    rng: &mut ChaCha8Rng,
    with_markers: bool,
) {
    let h = cfg.hidden;
    store.insert("embed.word", init_normal(rng, cfg.vocab_size, h, INIT_STD));
    store.insert("embed.pos", init_normal(rng, cfg.max_seq, h, INIT_STD));
    store.insert("embed.seg", init_normal(rng, NUM_SEGMENTS, h, INIT_STD));
    if with_markers {
        build_marker_table(store, cfg, rng);
    }
    store.insert("embed.ln.gamma", init_ones(1, h));
    store.insert("embed.ln.beta", Mat::zeros(1, h));
    for l in 0..cfg.layers {
        let p = |s: &str| format!("layer{l}.{s}");
        store.insert(&p("attn.wq"), init_normal(rng, h, h, INIT_STD));
        store.insert(&p("attn.bq"), Mat::zeros(1, h));
        store.insert(&p("attn.wk"), init_normal(rng, h, h, INIT_STD));
        store.insert(&p("attn.bk"), Mat::zeros(1, h));
        store.insert(&p("attn.wv"), init_normal(rng, h, h, INIT_STD));
        store.insert(&p("attn.bv"), Mat::zeros(1, h));
        store.insert(&p("attn.wo"), init_normal(rng, h, h, INIT_STD));
        store.insert(&p("attn.bo"), Mat::zeros(1, h));
        store.insert(&p("ln1.gamma"), init_ones(1, h));
        store.insert(&p("ln1.beta"), Mat::zeros(1, h));
        store.insert(&p("ffn.w1"), init_normal(rng, cfg.ffn, h, INIT_STD));
        store.insert(&p("ffn.b1"), Mat::zeros(1, cfg.ffn));
        store.insert(&p("ffn.w2"), init_normal(rng, h, cfg.ffn, INIT_STD));
        store.insert(&p("ffn.b2"), Mat::zeros(1, h));
        store.insert(&p("ln2.gamma"), init_ones(1, h));
        store.insert(&p("ln2.beta"), Mat::zeros(1, h));
    }
}

/// The marker embedding table alone; used when initializing the confidence
/// model from a first-phase checkpoint that has none.
pub fn build_marker_table(store: &mut ParamStore, cfg: &EncoderConfig, rng: &mut ChaCha8Rng) {
    store.insert(
        "embed.marker",
        init_normal(rng, MARKER_VOCAB, cfg.hidden, INIT_STD),
    );
}

/// Names of the tensors every encoder shares (marker table excluded).
pub fn encoder_param_names(cfg: &EncoderConfig) -> Vec<String> {
    let mut names = vec![
        "embed.word".to_string(),
        "embed.pos".to_string(),
        "embed.seg".to_string(),
        "embed.ln.gamma".to_string(),
        "embed.ln.beta".to_string(),
    ];
    for l in 0..cfg.layers {
        for s in [
            "attn.wq", "attn.bq", "attn.wk", "attn.bk", "attn.wv", "attn.bv", "attn.wo",
            "attn.bo", "ln1.gamma", "ln1.beta", "ffn.w1", "ffn.b1", "ffn.w2", "ffn.b2",
            "ln2.gamma", "ln2.beta",
        ] {
            names.push(format!("layer{l}.{s}"));
        }
    }
    names
}

/// Forward mode: evaluation is deterministic; training applies dropout with
/// masks drawn from the supplied stream.
pub enum Mode<'r> {
    Eval,
    Train { rng: &'r mut ChaCha8Rng },
}

impl Mode<'_> {
    fn dropout(&mut self, g: &mut Graph, x: NodeId, rate: f64) -> NodeId {
        match self {
            Mode::Eval => x,
            Mode::Train { rng } => {
                if rate == 0.0 {
                    return x;
                }
                let n = {
                    let m = g.value(x);
                    m.rows * m.cols
                };
                let keep = 1.0 - rate;
                let mask: Vec<f64> = (0..n)
                    .map(|_| {
                        if rng.random::<f64>() < keep {
                            1.0 / keep
                        } else {
                            0.0
                        }
                    })
                    .collect();
                g.dropout(x, mask)
            }
        }
    }
}

/// Summed word + position + segment (+ marker) embeddings for one instance.
pub fn embed(
    g: &mut Graph,
    cfg: &EncoderConfig,
    tokens: &[u32],
    segments: &[u8],
    markers: Option<&[u8]>,
) -> Result<NodeId> {
    let t = tokens.len();
    if t > cfg.max_seq {
        return Err(Error::Input(format!(
            "sequence length {t} exceeds max_seq {}",
            cfg.max_seq
        )));
    }
    if segments.len() != t {
        return Err(Error::Input("segment ids must match token length".into()));
    }
    if let Some(m) = markers {
        if m.len() != t {
            return Err(Error::Input(
                "marker sequence must match token length".into(),
            ));
        }
        if m.iter().any(|&x| x as usize >= MARKER_VOCAB) {
            return Err(Error::Input("marker id out of range".into()));
        }
    }
    if tokens.iter().any(|&x| x as usize >= cfg.vocab_size) {
        return Err(Error::Input("token id out of vocabulary range".into()));
    }
    if segments.iter().any(|&s| s as usize >= NUM_SEGMENTS) {
        return Err(Error::Input("segment id out of range".into()));
    }

    let word_ids: Vec<usize> = tokens.iter().map(|&x| x as usize).collect();
    let pos_ids: Vec<usize> = (0..t).collect();
    let seg_ids: Vec<usize> = segments.iter().map(|&s| s as usize).collect();

    let word_table = g.param("embed.word");
    let pos_table = g.param("embed.pos");
    let seg_table = g.param("embed.seg");
    let w = g.gather_rows(word_table, &word_ids);
    let p = g.gather_rows(pos_table, &pos_ids);
    let s = g.gather_rows(seg_table, &seg_ids);
    let sum = g.add(w, p);
    let mut sum = g.add(sum, s);
    if let Some(m) = markers {
        let marker_ids: Vec<usize> = m.iter().map(|&x| x as usize).collect();
        let marker_table = g.param("embed.marker");
        let me = g.gather_rows(marker_table, &marker_ids);
        sum = g.add(sum, me);
    }
    Ok(sum)
}

/// Run the transformer stack over embedded inputs.
pub fn encode(
    g: &mut Graph,
    cfg: &EncoderConfig,
    embedded: NodeId,
    valid_mask: &[bool],
    mode: &mut Mode,
) -> NodeId {
    let gamma = g.param("embed.ln.gamma");
    let beta = g.param("embed.ln.beta");
    let x = g.layer_norm_rows(embedded, gamma, beta);
    let mut x = mode.dropout(g, x, cfg.dropout);

    let dh = cfg.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    for l in 0..cfg.layers {
        let p = |s: &str| format!("layer{l}.{s}");
        let wq = g.param(&p("attn.wq"));
        let bq = g.param(&p("attn.bq"));
        let wk = g.param(&p("attn.wk"));
        let bk = g.param(&p("attn.bk"));
        let wv = g.param(&p("attn.wv"));
        let bv = g.param(&p("attn.bv"));
        let q = g.affine(x, wq, bq);
        let k = g.affine(x, wk, bk);
        let v = g.affine(x, wv, bv);

        let mut head_ctx = Vec::with_capacity(cfg.heads);
        for a in 0..cfg.heads {
            let qh = g.slice_cols(q, a * dh, dh);
            let qh = g.scale(qh, scale);
            let kh = g.slice_cols(k, a * dh, dh);
            let vh = g.slice_cols(v, a * dh, dh);
            let scores = g.matmul_nt(qh, kh);
            let probs = g.softmax_rows(scores, Some(valid_mask));
            let probs = mode.dropout(g, probs, cfg.attn_dropout);
            head_ctx.push(g.matmul(probs, vh));
        }
        let ctx = g.concat_cols(&head_ctx);
        let wo = g.param(&p("attn.wo"));
        let bo = g.param(&p("attn.bo"));
        let attn_out = g.affine(ctx, wo, bo);
        let attn_out = mode.dropout(g, attn_out, cfg.dropout);
        let res = g.add(x, attn_out);
        let g1 = g.param(&p("ln1.gamma"));
        let b1 = g.param(&p("ln1.beta"));
        x = g.layer_norm_rows(res, g1, b1);

        let w1 = g.param(&p("ffn.w1"));
        let bb1 = g.param(&p("ffn.b1"));
        let w2 = g.param(&p("ffn.w2"));
        let bb2 = g.param(&p("ffn.b2"));
        let h1 = g.affine(x, w1, bb1);
        let h1 = g.gelu(h1);
        let h2 = g.affine(h1, w2, bb2);
        let h2 = mode.dropout(g, h2, cfg.dropout);
        let res = g.add(x, h2);
        let g2 = g.param(&p("ln2.gamma"));
        let b2 = g.param(&p("ln2.beta"));
        x = g.layer_norm_rows(res, g2, b2);
    }
    x
}

/// Embed and encode a window instance in one call.
pub fn hidden_states(
    g: &mut Graph,
    cfg: &EncoderConfig,
    inst: &WindowInstance,
    markers: Option<&[u8]>,
    mode: &mut Mode,
) -> Result<NodeId> {
    let e = embed(g, cfg, &inst.tokens, &inst.segment_ids, markers)?;
    Ok(encode(g, cfg, e, &inst.valid_mask(), mode))
}
