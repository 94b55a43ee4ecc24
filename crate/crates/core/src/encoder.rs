//! Conformer-lite speech encoder and its CTC output head.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{
    attention, conv_module, feed_forward, init_conv_module, init_feed_forward, layer_norm,
    sinusoidal_positions, AttentionParams, LayerNormParams, CONV_ACTIVATION,
};
use crate::numerics::{Binder, Graph, ParamStore, Var};

pub const PREFIX: &str = "encoder";
pub const CTC_HEAD: &str = "encoder.ctc_head";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub d_in: usize,
    /// Zero is accepted as a projection-only debug mode.
    pub n_blocks: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub conv_width: usize,
    pub subsample_factor: usize,
    /// Reserved tap for an intermediate-layer CTC loss. Not implemented;
    /// must stay unset.
    pub intermediate_ctc_layer: Option<usize>,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            d_in: 16,
            n_blocks: 4,
            n_heads: 4,
            d_model: 64,
            d_ff: 256,
            conv_width: 7,
            subsample_factor: 2,
            intermediate_ctc_layer: None,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if ![1, 2, 4].contains(&self.subsample_factor) {
            return Err(Error::Config(format!(
                "subsample_factor must be 1, 2 or 4, got {}",
                self.subsample_factor
            )));
        }
        if self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "encoder d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.conv_width.is_multiple_of(2) {
            return Err(Error::Config(format!("conv_width must be odd, got {}", self.conv_width)));
        }
        if self.d_in == 0 || self.d_ff == 0 {
            return Err(Error::Config("encoder dimensions must be positive".into()));
        }
        if self.intermediate_ctc_layer.is_some() {
            return Err(Error::Config("intermediate CTC taps are not supported".into()));
        }
        Ok(())
    }

    pub fn output_len(&self, raw_len: usize) -> usize {
        raw_len.div_ceil(self.subsample_factor)
    }
}

/// Encoder output, `t_len × d_model`, living in a graph.
#[derive(Clone, Copy, Debug)]
pub struct AudioFeatures {
    pub frames: Var,
    pub t_len: usize,
}

pub fn init_params(cfg: &EncoderConfig, ctc_classes: usize, store: &mut ParamStore, rng: &mut impl Rng) -> Result<()> {
    cfg.validate()?;
    let d = cfg.d_model;
    store.init_matrix(&format!("{PREFIX}.in_proj"), cfg.d_in, d, rng);
    for b in 0..cfg.n_blocks {
        let p = format!("{PREFIX}.blocks.{b}");
        for ln in ["ln_ff1", "ln_attn", "ln_conv", "ln_ff2", "ln_out"] {
            LayerNormParams::init(store, &format!("{p}.{ln}"), d);
        }
        init_feed_forward(store, &format!("{p}.ff1"), d, cfg.d_ff, rng);
        AttentionParams::init(store, &format!("{p}.attn"), d, rng);
        init_conv_module(store, &format!("{p}.conv"), d, cfg.conv_width, rng)?;
        init_feed_forward(store, &format!("{p}.ff2"), d, cfg.d_ff, rng);
    }
    store.init_matrix(CTC_HEAD, d, ctc_classes, rng);
    Ok(())
}

/// Input projection, strided mean-pool subsampling and sinusoidal positions,
/// followed by `n_blocks` macaron Conformer blocks:
/// `½FFN → self-attention → convolution → ½FFN → layer norm`, each
/// sublayer pre-normalized with a residual connection.
pub fn encode_audio(g: &mut Graph, frames: Var, cfg: &EncoderConfig, b: &Binder<'_>) -> Result<AudioFeatures> {
    let raw_len = g.value(frames).rows();
    if raw_len < cfg.subsample_factor || raw_len == 0 {
        return Err(Error::Input(format!(
            "{raw_len} input frames is shorter than the subsampling factor {}",
            cfg.subsample_factor
        )));
    }
    if g.value(frames).cols() != cfg.d_in {
        return Err(Error::dim("encode_audio", g.shape(frames), &[raw_len, cfg.d_in]));
    }
    let w_in = b.bind(g, &format!("{PREFIX}.in_proj"))?;
    let pooled = g.mean_pool_rows(frames, cfg.subsample_factor)?;
    let x = g.matmul(pooled, w_in)?;
    let t_len = g.value(x).rows();
    let x = g.add_const(x, &sinusoidal_positions(t_len, cfg.d_model))?;
    let mut x = g.dropout(x)?;

    for blk in 0..cfg.n_blocks {
        let p = format!("{PREFIX}.blocks.{blk}");
        let ln = |g: &mut Graph, x: Var, name: &str| -> Result<Var> {
            let lp = LayerNormParams::bind(g, b, &format!("{p}.{name}"))?;
            layer_norm(g, x, lp.gamma, lp.beta)
        };
        let half_ffn = |g: &mut Graph, x: Var, name: &str| -> Result<Var> {
            let w1 = b.bind(g, &format!("{p}.{name}.w1"))?;
            let w2 = b.bind(g, &format!("{p}.{name}.w2"))?;
            let y = feed_forward(g, x, w1, w2)?;
            let y = g.scale(y, 0.5);
            g.dropout(y)
        };

        let h = ln(g, x, "ln_ff1")?;
        let h = half_ffn(g, h, "ff1")?;
        x = g.add(x, h)?;

        let h = ln(g, x, "ln_attn")?;
        let ap = AttentionParams::bind(g, b, &format!("{p}.attn"), cfg.n_heads)?;
        let h = attention(g, h, h, h, &ap, None)?;
        let h = g.dropout(h)?;
        x = g.add(x, h)?;

        let h = ln(g, x, "ln_conv")?;
        let pw_in = b.bind(g, &format!("{p}.conv.pw_in"))?;
        let kernel = b.bind(g, &format!("{p}.conv.kernel"))?;
        let pw_out = b.bind(g, &format!("{p}.conv.pw_out"))?;
        let h = conv_module(g, h, pw_in, kernel, pw_out, CONV_ACTIVATION)?;
        let h = g.dropout(h)?;
        x = g.add(x, h)?;

        let h = ln(g, x, "ln_ff2")?;
        let h = half_ffn(g, h, "ff2")?;
        x = g.add(x, h)?;

        x = ln(g, x, "ln_out")?;
    }
    Ok(AudioFeatures { frames: x, t_len })
}

/// Per-frame log-softmax over `{blank} ∪ vocab`; blank is column 0.
pub fn ctc_head(g: &mut Graph, features: &AudioFeatures, w: Var) -> Result<Var> {
    let logits = g.matmul(features.frames, w)?;
    g.log_softmax_rows(logits)
}
