//! Multimodal fusion decoder.
//!
//! A transformer decoder whose cross-attention stage runs two parallel
//! branches over the same decoder query: one over the audio features `T`,
//! one over the visual features `I`. Each branch projects its own heads
//! and the two outputs are summed, `H = O_t + O_i`. When no visual text is
//! present the visual term is exactly zero and is never evaluated.

use std::cmp::Ordering;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::AudioFeatures;
use crate::error::{Error, Result};
use crate::layers::{
    attention, embed, feed_forward, init_feed_forward, layer_norm, AttentionParams,
    LayerNormParams, Mask,
};
use crate::numerics::{Binder, Graph, ParamStore, Var};
use crate::visual_encoder::VisualFeatures;

pub const PREFIX: &str = "decoder";
/// Name fragment shared by every visual-branch parameter.
pub const VISUAL_BRANCH: &str = "cross_visual";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecoderConfig {
    pub n_blocks: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    /// Text vocabulary plus BOS and EOS. Filled in from the corpus when 0.
    pub vocab_size: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            n_blocks: 2,
            n_heads: 4,
            d_model: 64,
            d_ff: 256,
            vocab_size: 0,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_blocks == 0 {
            return Err(Error::Config("decoder needs at least one block".into()));
        }
        if self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "decoder d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.vocab_size < 3 {
            return Err(Error::Config(format!("decoder vocab_size {} too small", self.vocab_size)));
        }
        Ok(())
    }

    /// BOS sits right after the text vocabulary.
    pub fn bos(&self) -> usize {
        self.vocab_size - 2
    }

    pub fn eos(&self) -> usize {
        self.vocab_size - 1
    }
}

pub fn init_params(cfg: &DecoderConfig, store: &mut ParamStore, rng: &mut impl Rng) -> Result<()> {
    cfg.validate()?;
    let d = cfg.d_model;
    store.init_normal(&format!("{PREFIX}.embed"), &[cfg.vocab_size, d], 1.0, rng);
    for b in 0..cfg.n_blocks {
        let p = format!("{PREFIX}.blocks.{b}");
        AttentionParams::init(store, &format!("{p}.self_attn"), d, rng);
        AttentionParams::init(store, &format!("{p}.cross_audio"), d, rng);
        init_feed_forward(store, &format!("{p}.ffn"), d, cfg.d_ff, rng);
        for ln in ["ln_self", "ln_cross", "ln_ffn"] {
            LayerNormParams::init(store, &format!("{p}.{ln}"), d);
        }
    }
    store.init_matrix(&format!("{PREFIX}.out_proj"), d, cfg.vocab_size, rng);
    Ok(())
}

/// Adds the visual cross-attention branch of every block.
pub fn init_fusion_params(cfg: &DecoderConfig, store: &mut ParamStore, rng: &mut impl Rng) {
    for b in 0..cfg.n_blocks {
        AttentionParams::init(store, &format!("{PREFIX}.blocks.{b}.{VISUAL_BRANCH}"), cfg.d_model, rng);
    }
}

pub fn is_visual_branch_param(name: &str) -> bool {
    name.starts_with(PREFIX) && name.contains(VISUAL_BRANCH)
}

#[derive(Clone, Copy, Debug)]
pub struct DualCrossAttentionParams {
    pub audio_branch: AttentionParams,
    /// `None` for an audio-only decoder.
    pub visual_branch: Option<AttentionParams>,
}

impl DualCrossAttentionParams {
    pub fn bind(g: &mut Graph, b: &Binder<'_>, block_prefix: &str, n_heads: usize) -> Result<Self> {
        let audio_branch = AttentionParams::bind(g, b, &format!("{block_prefix}.cross_audio"), n_heads)?;
        let visual_prefix = format!("{block_prefix}.{VISUAL_BRANCH}");
        let visual_branch = if b.has(&format!("{visual_prefix}.w_q")) {
            Some(AttentionParams::bind(g, b, &visual_prefix, n_heads)?)
        } else {
            None
        };
        Ok(Self {
            audio_branch,
            visual_branch,
        })
    }
}

/// `H = attention(q, T, T; audio) + attention(q, I, I; visual)`.
///
/// The visual term is defined as zero when `i_feats` is empty, and is also
/// skipped when the decoder has no visual branch.
pub fn dual_cross_attention(
    g: &mut Graph,
    q: Var,
    t_feats: &AudioFeatures,
    i_feats: &VisualFeatures,
    params: &DualCrossAttentionParams,
) -> Result<Var> {
    let d = params.audio_branch.d_model(g);
    if g.value(t_feats.frames).cols() != d {
        return Err(Error::dim("dual_cross_attention audio", &[d], g.shape(t_feats.frames)));
    }
    let audio = attention(g, q, t_feats.frames, t_feats.frames, &params.audio_branch, None)?;
    let Some(i_frames) = i_feats.frames else {
        return Ok(audio);
    };
    if g.value(i_frames).cols() != d {
        return Err(Error::dim("dual_cross_attention visual", &[d], g.shape(i_frames)));
    }
    let Some(vp) = &params.visual_branch else {
        return Err(Error::Contract(
            "visual features supplied to a decoder without a visual branch".into(),
        ));
    };
    let visual = attention(g, q, i_frames, i_frames, vp, None)?;
    g.add(audio, visual)
}

/// Teacher-forced decoder pass. `targets_in` starts with BOS; returns
/// `len × vocab_size` logits. Each block runs causal self-attention, dual
/// cross-attention and a feed-forward sublayer, each followed by a residual
/// connection and layer norm.
pub fn decoder_forward(
    g: &mut Graph,
    targets_in: &[usize],
    t_feats: &AudioFeatures,
    i_feats: &VisualFeatures,
    cfg: &DecoderConfig,
    b: &Binder<'_>,
) -> Result<Var> {
    if targets_in.is_empty() {
        return Err(Error::Input("decoder input must hold at least BOS".into()));
    }
    if targets_in[0] != cfg.bos() {
        return Err(Error::Input(format!(
            "decoder input must start with BOS ({}), got {}",
            cfg.bos(),
            targets_in[0]
        )));
    }
    if let Some(&id) = targets_in.iter().find(|&&t| t >= cfg.vocab_size) {
        return Err(Error::Vocab {
            id,
            size: cfg.vocab_size,
        });
    }
    let table = b.bind(g, &format!("{PREFIX}.embed"))?;
    let x = embed(g, targets_in, table)?;
    let mut x = g.dropout(x)?;
    let mask = Mask::causal(targets_in.len());
    for blk in 0..cfg.n_blocks {
        let p = format!("{PREFIX}.blocks.{blk}");
        let sa = AttentionParams::bind(g, b, &format!("{p}.self_attn"), cfg.n_heads)?;
        let h = attention(g, x, x, x, &sa, Some(&mask))?;
        let h = g.dropout(h)?;
        let h = g.add(x, h)?;
        let ln = LayerNormParams::bind(g, b, &format!("{p}.ln_self"))?;
        x = layer_norm(g, h, ln.gamma, ln.beta)?;

        let dual = DualCrossAttentionParams::bind(g, b, &p, cfg.n_heads)?;
        let h = dual_cross_attention(g, x, t_feats, i_feats, &dual)?;
        let h = g.dropout(h)?;
        let h = g.add(x, h)?;
        let ln = LayerNormParams::bind(g, b, &format!("{p}.ln_cross"))?;
        x = layer_norm(g, h, ln.gamma, ln.beta)?;

        let w1 = b.bind(g, &format!("{p}.ffn.w1"))?;
        let w2 = b.bind(g, &format!("{p}.ffn.w2"))?;
        let h = feed_forward(g, x, w1, w2)?;
        let h = g.dropout(h)?;
        let h = g.add(x, h)?;
        let ln = LayerNormParams::bind(g, b, &format!("{p}.ln_ffn"))?;
        x = layer_norm(g, h, ln.gamma, ln.beta)?;
    }
    let out = b.bind(g, &format!("{PREFIX}.out_proj"))?;
    g.matmul(x, out)
}

/// A finished decoding hypothesis. `tokens` excludes BOS and includes EOS
/// when one was emitted.
#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    pub tokens: Vec<usize>,
    pub log_prob: f64,
}

impl Hypothesis {
    /// Length-normalized log-probability.
    pub fn score(&self) -> f64 {
        self.log_prob / self.tokens.len().max(1) as f64
    }

    /// Tokens with a trailing EOS removed.
    pub fn content(&self, eos: usize) -> &[usize] {
        match self.tokens.last() {
            Some(&t) if t == eos => &self.tokens[..self.tokens.len() - 1],
            _ => &self.tokens,
        }
    }
}

/// Best-first order: higher normalized score, then lexicographically lower
/// token ids, then the shorter hypothesis.
pub fn hypothesis_order(a: &Hypothesis, b: &Hypothesis) -> Ordering {
    b.score()
        .total_cmp(&a.score())
        .then_with(|| a.tokens.cmp(&b.tokens))
        .then_with(|| a.tokens.len().cmp(&b.tokens.len()))
}

/// Length-normalized beam search over any next-token scorer.
///
/// `next_log_probs(prefix)` receives BOS followed by the hypothesis so far
/// and returns log-probabilities over the decoder vocabulary. BOS is never
/// emitted. A hypothesis finishes on EOS or when it reaches `max_len`
/// tokens; `beam = 1` is greedy decoding.
pub fn beam_search<F>(
    mut next_log_probs: F,
    bos: usize,
    eos: usize,
    beam: usize,
    max_len: usize,
) -> Result<Hypothesis>
where
    F: FnMut(&[usize]) -> Result<Vec<f64>>,
{
    if beam < 1 {
        return Err(Error::Config("beam width must be at least 1".into()));
    }
    if max_len < 1 {
        return Err(Error::Config("max_len must be at least 1".into()));
    }
    let mut alive = vec![Hypothesis {
        tokens: Vec::new(),
        log_prob: 0.0,
    }];
    let mut finished: Vec<Hypothesis> = Vec::new();
    let mut prefix = Vec::with_capacity(max_len + 1);
    for _ in 0..max_len {
        let mut candidates = Vec::new();
        for h in &alive {
            prefix.clear();
            prefix.push(bos);
            prefix.extend_from_slice(&h.tokens);
            let lp = next_log_probs(&prefix)?;
            for (t, &l) in lp.iter().enumerate() {
                if t == bos {
                    continue;
                }
                let mut tokens = h.tokens.clone();
                tokens.push(t);
                candidates.push(Hypothesis {
                    tokens,
                    log_prob: h.log_prob + l,
                });
            }
        }
        candidates.sort_by(hypothesis_order);
        candidates.truncate(beam);
        alive.clear();
        for c in candidates {
            if c.tokens.last() == Some(&eos) || c.tokens.len() >= max_len {
                finished.push(c);
            } else {
                alive.push(c);
            }
        }
        if alive.is_empty() {
            break;
        }
    }
    finished.sort_by(hypothesis_order);
    finished
        .into_iter()
        .next()
        .ok_or_else(|| Error::Contract("beam search finished without hypotheses".into()))
}

/// Beam search with the fusion decoder over fixed audio/visual features.
pub fn beam_decode(
    g: &mut Graph,
    t_feats: &AudioFeatures,
    i_feats: &VisualFeatures,
    cfg: &DecoderConfig,
    b: &Binder<'_>,
    beam: usize,
    max_len: usize,
) -> Result<Hypothesis> {
    beam_search(
        |prefix| {
            let logits = decoder_forward(g, prefix, t_feats, i_feats, cfg, b)?;
            let lp = g.log_softmax_rows(logits)?;
            let v = g.value(lp);
            Ok(v.row(v.rows() - 1).to_vec())
        },
        cfg.bos(),
        cfg.eos(),
        beam,
        max_len,
    )
}
