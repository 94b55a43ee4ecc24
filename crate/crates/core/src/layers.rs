//! Attention, normalization, feed-forward, convolution and embedding blocks.

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{Binder, Graph, ParamStore, Tensor, Var};

/// Additive logit penalty for disallowed attention positions.
pub const MASK_PENALTY: f64 = -1e9;

/// Layer-norm variance floor.
pub const LN_EPS: f64 = 1e-5;

/// Boolean visibility matrix, `query_len × key_len`.
#[derive(Clone, Debug, PartialEq)]
pub struct Mask {
    rows: usize,
    cols: usize,
    allowed: Vec<bool>,
}

impl Mask {
    pub fn new(rows: usize, cols: usize, allowed: Vec<bool>) -> Result<Self> {
        if allowed.len() != rows * cols {
            return Err(Error::dim("Mask::new", &[rows, cols], &[allowed.len()]));
        }
        Ok(Self { rows, cols, allowed })
    }

    /// Lower-triangular mask including the diagonal.
    pub fn causal(n: usize) -> Self {
        let allowed = (0..n * n).map(|k| k % n <= k / n).collect();
        Self {
            rows: n,
            cols: n,
            allowed,
        }
    }

    pub fn allowed(&self, i: usize, j: usize) -> bool {
        self.allowed[i * self.cols + j]
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    fn penalty(&self) -> Tensor {
        Tensor::from_fn(self.rows, self.cols, |i, j| {
            if self.allowed(i, j) {
                0.0
            } else {
                MASK_PENALTY
            }
        })
    }
}

/// Nonlinearity selector. Feed-forward blocks use [`FFN_ACTIVATION`] and
/// convolution modules [`CONV_ACTIVATION`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Silu,
    Identity,
}

pub const FFN_ACTIVATION: Activation = Activation::Relu;
pub const CONV_ACTIVATION: Activation = Activation::Silu;

impl Activation {
    pub fn apply(self, g: &mut Graph, x: Var) -> Var {
        match self {
            Activation::Relu => g.relu(x),
            Activation::Silu => g.silu(x),
            Activation::Identity => x,
        }
    }
}

/// Projections for one multi-head attention unit, bound into a graph.
#[derive(Clone, Copy, Debug)]
pub struct AttentionParams {
    pub w_q: Var,
    pub w_k: Var,
    pub w_v: Var,
    pub w_o: Var,
    pub n_heads: usize,
}

impl AttentionParams {
    pub fn init(store: &mut ParamStore, prefix: &str, d_model: usize, rng: &mut impl Rng) {
        for w in ["w_q", "w_k", "w_v", "w_o"] {
            store.init_matrix(&format!("{prefix}.{w}"), d_model, d_model, rng);
        }
    }

    pub fn bind(g: &mut Graph, b: &Binder<'_>, prefix: &str, n_heads: usize) -> Result<Self> {
        let p = Self {
            w_q: b.bind(g, &format!("{prefix}.w_q"))?,
            w_k: b.bind(g, &format!("{prefix}.w_k"))?,
            w_v: b.bind(g, &format!("{prefix}.w_v"))?,
            w_o: b.bind(g, &format!("{prefix}.w_o"))?,
            n_heads,
        };
        p.validate(g)?;
        Ok(p)
    }

    pub fn d_model(&self, g: &Graph) -> usize {
        g.value(self.w_q).rows()
    }

    pub fn validate(&self, g: &Graph) -> Result<()> {
        let d = self.d_model(g);
        if self.n_heads == 0 || !d.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d_model {d} not divisible into {} heads",
                self.n_heads
            )));
        }
        for w in [self.w_q, self.w_k, self.w_v, self.w_o] {
            if g.shape(w) != [d, d] {
                return Err(Error::dim("AttentionParams", &[d, d], g.shape(w)));
            }
        }
        Ok(())
    }
}

/// Multi-head scaled dot-product attention.
///
/// `q` is `L_q × d`, `k` and `v` are `L_k × d`, all before projection. Each
/// head computes `softmax(Q_h K_hᵀ / √d_k + penalty) V_h`; heads are
/// concatenated and projected by `w_o`.
pub fn attention(
    g: &mut Graph,
    q: Var,
    k: Var,
    v: Var,
    p: &AttentionParams,
    mask: Option<&Mask>,
) -> Result<Var> {
    let d = p.d_model(g);
    let (lq, lk) = (g.value(q).rows(), g.value(k).rows());
    for x in [q, k, v] {
        if g.value(x).cols() != d {
            return Err(Error::dim("attention", &[d], g.shape(x)));
        }
    }
    if g.value(v).rows() != lk {
        return Err(Error::dim("attention", g.shape(k), g.shape(v)));
    }
    if lk == 0 {
        return Err(Error::Contract("attention over an empty key sequence".into()));
    }
    if let Some(m) = mask {
        if m.dims() != (lq, lk) {
            return Err(Error::dim("attention mask", &[m.rows, m.cols], &[lq, lk]));
        }
        if let Some(i) = (0..lq).find(|&i| (0..lk).all(|j| !m.allowed(i, j))) {
            return Err(Error::Contract(format!("query {i} has no visible keys")));
        }
    }
    let dk = d / p.n_heads;
    let qp = g.matmul(q, p.w_q)?;
    let kp = g.matmul(k, p.w_k)?;
    let vp = g.matmul(v, p.w_v)?;
    let penalty = mask.map(Mask::penalty);
    let scale = 1.0 / (dk as f64).sqrt();
    let mut heads = Vec::with_capacity(p.n_heads);
    for h in 0..p.n_heads {
        let (qh, kh, vh) = if p.n_heads == 1 {
            (qp, kp, vp)
        } else {
            (
                g.slice_cols(qp, h * dk, dk)?,
                g.slice_cols(kp, h * dk, dk)?,
                g.slice_cols(vp, h * dk, dk)?,
            )
        };
        let scores = g.matmul_nt(qh, kh)?;
        let mut scores = g.scale(scores, scale);
        if let Some(pen) = &penalty {
            scores = g.add_const(scores, pen)?;
        }
        let weights = g.softmax_rows(scores)?;
        heads.push(g.matmul(weights, vh)?);
    }
    let cat = if heads.len() == 1 {
        heads[0]
    } else {
        g.concat_cols(&heads)?
    };
    g.matmul(cat, p.w_o)
}

#[derive(Clone, Copy, Debug)]
pub struct LayerNormParams {
    pub gamma: Var,
    pub beta: Var,
}

impl LayerNormParams {
    pub fn init(store: &mut ParamStore, prefix: &str, d: usize) {
        store.init_const(&format!("{prefix}.gamma"), &[d], 1.0);
        store.init_const(&format!("{prefix}.beta"), &[d], 0.0);
    }

    pub fn bind(g: &mut Graph, b: &Binder<'_>, prefix: &str) -> Result<Self> {
        Ok(Self {
            gamma: b.bind(g, &format!("{prefix}.gamma"))?,
            beta: b.bind(g, &format!("{prefix}.beta"))?,
        })
    }
}

pub fn layer_norm(g: &mut Graph, x: Var, gamma: Var, beta: Var) -> Result<Var> {
    g.layer_norm(x, gamma, beta, LN_EPS)
}

/// `activation(x · w1) · w2`; the residual is the caller's.
pub fn feed_forward(g: &mut Graph, x: Var, w1: Var, w2: Var) -> Result<Var> {
    let h = g.matmul(x, w1)?;
    let h = FFN_ACTIVATION.apply(g, h);
    g.matmul(h, w2)
}

pub fn init_feed_forward(store: &mut ParamStore, prefix: &str, d: usize, d_ff: usize, rng: &mut impl Rng) {
    store.init_matrix(&format!("{prefix}.w1"), d, d_ff, rng);
    store.init_matrix(&format!("{prefix}.w2"), d_ff, d, rng);
}

/// Conformer-style convolution: pointwise → depthwise(width) → activation →
/// pointwise. Output keeps the input length; the residual is the caller's.
pub fn conv_module(
    g: &mut Graph,
    x: Var,
    pointwise_in: Var,
    kernel: Var,
    pointwise_out: Var,
    activation: Activation,
) -> Result<Var> {
    let h = g.matmul(x, pointwise_in)?;
    let h = g.depthwise_conv(h, kernel)?;
    let h = activation.apply(g, h);
    g.matmul(h, pointwise_out)
}

pub fn init_conv_module(store: &mut ParamStore, prefix: &str, d: usize, width: usize, rng: &mut impl Rng) -> Result<()> {
    if width.is_multiple_of(2) {
        return Err(Error::Config(format!("convolution width must be odd, got {width}")));
    }
    store.init_matrix(&format!("{prefix}.pw_in"), d, d, rng);
    store.init_normal(&format!("{prefix}.kernel"), &[width, d], (1.0 / width as f64).sqrt(), rng);
    store.init_matrix(&format!("{prefix}.pw_out"), d, d, rng);
    Ok(())
}

/// Absolute sinusoidal encoding: `sin(pos / 10000^(2i/d))` on even columns,
/// `cos` of the same angle on the following odd column.
pub fn sinusoidal_positions(len: usize, d: usize) -> Tensor {
    Tensor::from_fn(len, d, |pos, j| {
        let i = (j / 2) as f64;
        let angle = pos as f64 / 10000f64.powf(2.0 * i / d as f64);
        if j % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}

/// Token lookup plus sinusoidal positions. An empty sequence gives `0 × d`.
pub fn embed(g: &mut Graph, tokens: &[usize], table: Var) -> Result<Var> {
    let d = g.value(table).cols();
    let rows = g.gather_rows(table, tokens)?;
    g.add_const(rows, &sinusoidal_positions(tokens.len(), d))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn causal_mask_is_lower_triangular() {
        let m = Mask::causal(4);
        for i in 0..4 {
            for j in 0..4 {
                assert_eq!(m.allowed(i, j), j <= i);
            }
        }
    }

    fn identity_attention(g: &mut Graph, d: usize, heads: usize) -> AttentionParams {
        let mut s = ParamStore::new();
        for w in ["w_q", "w_k", "w_v", "w_o"] {
            s.insert(format!("a.{w}"), Tensor::identity(d));
        }
        AttentionParams::bind(g, &Binder::frozen_all(&s), "a", heads).unwrap()
    }

    #[test]
    fn all_masked_row_is_contract_error() {
        let mut g = Graph::new();
        let p = identity_attention(&mut g, 2, 1);
        let x = g.constant(Tensor::ones(&[2, 2]));
        let m = Mask::new(2, 2, vec![true, false, false, false]).unwrap();
        assert!(matches!(attention(&mut g, x, x, x, &p, Some(&m)), Err(Error::Contract(_))));
        let bad = Mask::causal(3);
        assert!(matches!(attention(&mut g, x, x, x, &p, Some(&bad)), Err(Error::Dimension { .. })));
    }

    #[test]
    fn heads_must_divide_d_model() {
        let mut g = Graph::new();
        let mut s = ParamStore::new();
        for w in ["w_q", "w_k", "w_v", "w_o"] {
            s.insert(format!("a.{w}"), Tensor::identity(6));
        }
        assert!(matches!(
            AttentionParams::bind(&mut g, &Binder::new(&s), "a", 4),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn even_conv_width_rejected_at_init() {
        let mut s = ParamStore::new();
        let mut rng = rand::thread_rng();
        assert!(matches!(init_conv_module(&mut s, "c", 4, 4, &mut rng), Err(Error::Config(_))));
    }

    #[test]
    fn embed_rejects_out_of_vocab() {
        let mut g = Graph::new();
        let t = g.constant(Tensor::zeros(&[3, 4]));
        assert!(matches!(embed(&mut g, &[0, 3], t), Err(Error::Vocab { id: 3, size: 3 })));
    }

    #[test]
    fn empty_and_zero_table_embedding() {
        let mut g = Graph::new();
        let t = g.constant(Tensor::zeros(&[3, 4]));
        let e = embed(&mut g, &[], t).unwrap();
        assert_eq!(g.shape(e), &[0, 4]);
        let e = embed(&mut g, &[0], t).unwrap();
        assert_eq!(g.value(e).data(), &[0.0, 1.0, 0.0, 1.0]);
    }
}
