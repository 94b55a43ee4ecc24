//! Token-embedding encoder for OCR text streams.
//!
//! The OCR stream is everything read off the video at sentence level:
//! subtitle text and background text alike. There is deliberately no
//! field telling the two apart.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{attention, embed, layer_norm, AttentionParams, LayerNormParams};
use crate::numerics::{Binder, Graph, ParamStore, Var};

pub const PREFIX: &str = "visual";

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OcrTokenSequence {
    pub tokens: Vec<usize>,
}

impl OcrTokenSequence {
    pub fn new(tokens: Vec<usize>) -> Self {
        Self { tokens }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// `i_len × d_model` visual features. `frames` is `None` exactly when no
/// OCR text is present.
#[derive(Clone, Copy, Debug)]
pub struct VisualFeatures {
    pub frames: Option<Var>,
    pub i_len: usize,
}

impl VisualFeatures {
    pub fn empty() -> Self {
        Self {
            frames: None,
            i_len: 0,
        }
    }
}

pub fn init_params(vocab: usize, d_model: usize, store: &mut ParamStore, rng: &mut impl Rng) {
    store.init_normal(&format!("{PREFIX}.embed"), &[vocab, d_model], 1.0, rng);
    AttentionParams::init(store, &format!("{PREFIX}.attn"), d_model, rng);
    LayerNormParams::init(store, &format!("{PREFIX}.ln"), d_model);
}

/// Embedding plus positions, then one residual self-attention block with a
/// closing layer norm. With `frozen` set, every parameter enters the graph
/// as a constant and so receives no gradient.
pub fn encode_visual(
    g: &mut Graph,
    ocr: &OcrTokenSequence,
    b: &Binder<'_>,
    n_heads: usize,
    frozen: bool,
) -> Result<VisualFeatures> {
    let all_frozen;
    let b = if frozen {
        all_frozen = Binder::frozen_all(b.store());
        &all_frozen
    } else {
        b
    };
    let table = b.bind(g, &format!("{PREFIX}.embed"))?;
    let vocab = g.value(table).rows();
    if let Some(&id) = ocr.tokens.iter().find(|&&t| t >= vocab) {
        return Err(Error::Vocab { id, size: vocab });
    }
    if ocr.is_empty() {
        return Ok(VisualFeatures::empty());
    }
    let x = embed(g, &ocr.tokens, table)?;
    let ap = AttentionParams::bind(g, b, &format!("{PREFIX}.attn"), n_heads)?;
    let h = attention(g, x, x, x, &ap, None)?;
    let h = g.dropout(h)?;
    let x = g.add(x, h)?;
    let ln = LayerNormParams::bind(g, b, &format!("{PREFIX}.ln"))?;
    let x = layer_norm(g, x, ln.gamma, ln.beta)?;
    Ok(VisualFeatures {
        frames: Some(x),
        i_len: ocr.len(),
    })
}
