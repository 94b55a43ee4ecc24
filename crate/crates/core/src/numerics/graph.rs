//! Reverse-mode differentiation over an explicitly recorded graph.
//!
//! Every operation appends a node holding its forward value, its input
//! references and a backward rule. Nodes are only ever appended after their
//! inputs, so walking the node list in reverse is a valid reverse
//! topological order: each node is visited once, after all its consumers.
//!
//! Nodes that do not depend on any trainable leaf drop their backward rule
//! at construction time, which makes no-grad evaluation (decoding, frozen
//! sub-networks) cheap.

use std::collections::{BTreeMap, HashMap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::tensor::{self, Tensor};
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// What a backward rule sees: the upstream gradient, the forward inputs and
/// output, and which inputs actually need a gradient.
pub struct BackwardCtx<'a> {
    pub grad: &'a Tensor,
    pub inputs: Vec<&'a Tensor>,
    pub output: &'a Tensor,
    pub needs: Vec<bool>,
}

pub type BackwardFn = Box<dyn Fn(&BackwardCtx<'_>) -> Vec<Option<Tensor>>>;

struct Node {
    value: Tensor,
    parents: Vec<usize>,
    backward: Option<BackwardFn>,
    requires_grad: bool,
}

struct Dropout {
    rate: f64,
    rng: ChaCha8Rng,
}

/// A recorded computation. Dropout is off unless [`Graph::enable_dropout`]
/// was called, so evaluation graphs are deterministic functions of their
/// inputs.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: Vec<(String, usize)>,
    by_name: HashMap<String, Var>,
    dropout: Option<Dropout>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    /// Turns every later [`Graph::dropout`] call into inverted dropout with
    /// masks drawn from `seed`.
    pub fn enable_dropout(&mut self, rate: f64, seed: u64) -> Result<()> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config(format!("dropout rate {rate} outside [0, 1)")));
        }
        self.dropout = (rate > 0.0).then(|| Dropout {
            rate,
            rng: ChaCha8Rng::seed_from_u64(seed),
        });
        Ok(())
    }

    /// Zeroes each value with the enabled rate and rescales survivors by
    /// `1 / (1 − rate)`. Identity when dropout is off.
    pub fn dropout(&mut self, x: Var) -> Result<Var> {
        let Some(d) = self.dropout.as_mut() else {
            return Ok(x);
        };
        let (rate, scale) = (d.rate, 1.0 / (1.0 - d.rate));
        let shape = self.nodes[x.0].value.shape().to_vec();
        let n: usize = shape.iter().product();
        let mask: Vec<f64> = (0..n)
            .map(|_| if d.rng.gen::<f64>() < rate { 0.0 } else { scale })
            .collect();
        let m = self.constant(Tensor::new(shape, mask)?);
        self.mul(x, m)
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: t,
            parents: Vec::new(),
            backward: None,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// A named constant leaf, inserted once per graph. Used for frozen
    /// parameters so that repeated forward passes in one graph share a copy.
    pub fn named_constant(&mut self, name: &str, t: &Tensor) -> Var {
        if let Some(&v) = self.by_name.get(name) {
            return v;
        }
        let v = self.constant(t.clone());
        self.by_name.insert(name.to_string(), v);
        v
    }

    /// A named trainable leaf. Binding the same name twice returns the
    /// existing node so that shared weights accumulate into one gradient.
    pub fn param(&mut self, name: &str, t: &Tensor) -> Var {
        if let Some(&v) = self.by_name.get(name) {
            return v;
        }
        self.nodes.push(Node {
            value: t.clone(),
            parents: Vec::new(),
            backward: None,
            requires_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.params.push((name.to_string(), v.0));
        self.by_name.insert(name.to_string(), v);
        v
    }

    /// Appends an operation node. Public so that fused operations outside
    /// this module (the CTC recursion, for one) can register their own rule.
    pub fn custom(&mut self, inputs: &[Var], value: Tensor, backward: BackwardFn) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            parents: inputs.iter().map(|v| v.0).collect(),
            backward: requires_grad.then_some(backward),
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Propagates `d loss / d node` back to every node. `loss` must hold a
    /// single value.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = &self.nodes[loss.0].value;
        if lv.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(lv.shape()));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            let Some(rule) = &node.backward else { continue };
            let Some(g) = grads[i].take() else { continue };
            let ctx = BackwardCtx {
                grad: &g,
                inputs: node.parents.iter().map(|&p| &self.nodes[p].value).collect(),
                output: &node.value,
                needs: node
                    .parents
                    .iter()
                    .map(|&p| self.nodes[p].requires_grad)
                    .collect(),
            };
            let parent_grads = rule(&ctx);
            for (&p, pg) in node.parents.iter().zip(parent_grads) {
                let Some(pg) = pg else { continue };
                if !self.nodes[p].requires_grad {
                    continue;
                }
                match &mut grads[p] {
                    Some(acc) => acc.add_assign(&pg)?,
                    slot @ None => *slot = Some(pg),
                }
            }
            grads[i] = Some(g);
        }
        let params = self
            .params
            .iter()
            .map(|(name, idx)| {
                let g = grads[*idx]
                    .clone()
                    .unwrap_or_else(|| Tensor::zeros(self.nodes[*idx].value.shape()));
                (name.clone(), g)
            })
            .collect();
        Ok(Gradients { grads, params })
    }

    // ---- operations ----------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = tensor::matmul(self.value(a), self.value(b))?;
        Ok(self.custom(
            &[a, b],
            out,
            Box::new(|c| {
                vec![
                    c.needs[0].then(|| tensor::matmul_nt(c.grad, c.inputs[1]).expect("shape")),
                    c.needs[1].then(|| tensor::matmul_tn(c.inputs[0], c.grad).expect("shape")),
                ]
            }),
        ))
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = tensor::matmul_nt(self.value(a), self.value(b))?;
        Ok(self.custom(
            &[a, b],
            out,
            Box::new(|c| {
                vec![
                    c.needs[0].then(|| tensor::matmul(c.grad, c.inputs[1]).expect("shape")),
                    c.needs[1].then(|| tensor::matmul_tn(c.grad, c.inputs[0]).expect("shape")),
                ]
            }),
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        Ok(self.custom(
            &[a, b],
            out,
            Box::new(|c| vec![Some(c.grad.clone()), Some(c.grad.clone())]),
        ))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        Ok(self.custom(
            &[a, b],
            out,
            Box::new(|c| {
                vec![
                    c.needs[0].then(|| c.grad.zip_map(c.inputs[1], |g, y| g * y).expect("shape")),
                    c.needs[1].then(|| c.grad.zip_map(c.inputs[0], |g, x| g * x).expect("shape")),
                ]
            }),
        ))
    }

    /// Adds a length-`n` vector to every row of an `m × n` matrix.
    pub fn add_row(&mut self, a: Var, r: Var) -> Result<Var> {
        let (av, rv) = (self.value(a), self.value(r));
        let n = av.cols();
        if rv.len() != n {
            return Err(Error::dim("add_row", av.shape(), rv.shape()));
        }
        let mut out = av.clone();
        for row in out.data_mut().chunks_mut(n.max(1)) {
            for (o, b) in row.iter_mut().zip(rv.data()) {
                *o += b;
            }
        }
        Ok(self.custom(
            &[a, r],
            out,
            Box::new(|c| {
                let col = c.needs[1].then(|| column_sums(c.grad, c.inputs[1].shape()));
                vec![Some(c.grad.clone()), col]
            }),
        ))
    }

    /// Multiplies every row of an `m × n` matrix elementwise by a length-`n` vector.
    pub fn mul_row(&mut self, a: Var, r: Var) -> Result<Var> {
        let (av, rv) = (self.value(a), self.value(r));
        let n = av.cols();
        if rv.len() != n {
            return Err(Error::dim("mul_row", av.shape(), rv.shape()));
        }
        let mut out = av.clone();
        for row in out.data_mut().chunks_mut(n.max(1)) {
            for (o, s) in row.iter_mut().zip(rv.data()) {
                *o *= s;
            }
        }
        Ok(self.custom(
            &[a, r],
            out,
            Box::new(move |c| {
                let (x, s, g) = (c.inputs[0], c.inputs[1], c.grad);
                let dx = c.needs[0].then(|| {
                    let mut d = g.clone();
                    for row in d.data_mut().chunks_mut(n.max(1)) {
                        for (o, sv) in row.iter_mut().zip(s.data()) {
                            *o *= sv;
                        }
                    }
                    d
                });
                let ds = c.needs[1].then(|| {
                    let prod = g.zip_map(x, |a, b| a * b).expect("shape");
                    column_sums(&prod, s.shape())
                });
                vec![dx, ds]
            }),
        ))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|x| x * s);
        self.custom(&[a], out, Box::new(move |c| vec![Some(c.grad.map(|g| g * s))]))
    }

    /// Adds a fixed tensor (positional encodings, mask penalties).
    pub fn add_const(&mut self, a: Var, k: &Tensor) -> Result<Var> {
        let out = self.value(a).zip_map(k, |x, y| x + y)?;
        Ok(self.custom(&[a], out, Box::new(|c| vec![Some(c.grad.clone())])))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.max(0.0));
        self.custom(
            &[a],
            out,
            Box::new(|c| {
                vec![Some(
                    c.grad
                        .zip_map(c.inputs[0], |g, x| if x > 0.0 { g } else { 0.0 })
                        .expect("shape"),
                )]
            }),
        )
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x * sigmoid(x));
        self.custom(
            &[a],
            out,
            Box::new(|c| {
                vec![Some(
                    c.grad
                        .zip_map(c.inputs[0], |g, x| {
                            let s = sigmoid(x);
                            g * s * (1.0 + x * (1.0 - s))
                        })
                        .expect("shape"),
                )]
            }),
        )
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let out = tensor::softmax_rows(self.value(a))?;
        Ok(self.custom(
            &[a],
            out,
            Box::new(|c| {
                let (y, g) = (c.output, c.grad);
                let n = y.cols().max(1);
                let mut dx = vec![0.0; y.len()];
                for ((yr, gr), dr) in y
                    .data()
                    .chunks(n)
                    .zip(g.data().chunks(n))
                    .zip(dx.chunks_mut(n))
                {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for ((d, &yv), &gv) in dr.iter_mut().zip(yr).zip(gr) {
                        *d = yv * (gv - dot);
                    }
                }
                vec![Some(Tensor::new(y.shape().to_vec(), dx).expect("shape"))]
            }),
        ))
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Result<Var> {
        let out = tensor::log_softmax_rows(self.value(a))?;
        Ok(self.custom(
            &[a],
            out,
            Box::new(|c| {
                let (y, g) = (c.output, c.grad);
                let n = y.cols().max(1);
                let mut dx = vec![0.0; y.len()];
                for ((yr, gr), dr) in y
                    .data()
                    .chunks(n)
                    .zip(g.data().chunks(n))
                    .zip(dx.chunks_mut(n))
                {
                    let gsum: f64 = gr.iter().sum();
                    for ((d, &yv), &gv) in dr.iter_mut().zip(yr).zip(gr) {
                        *d = gv - yv.exp() * gsum;
                    }
                }
                vec![Some(Tensor::new(y.shape().to_vec(), dx).expect("shape"))]
            }),
        ))
    }

    /// Row-wise normalization to zero mean and unit (biased) variance,
    /// followed by a per-column scale and shift.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (xv, gv, bv) = (self.value(x), self.value(gamma), self.value(beta));
        let d = xv.cols();
        if gv.len() != d || bv.len() != d {
            return Err(Error::dim("layer_norm", xv.shape(), gv.shape()));
        }
        let mut out = Vec::with_capacity(xv.len());
        for row in xv.data().chunks(d.max(1)) {
            let (mean, inv_std) = row_stats(row, eps);
            for (j, &v) in row.iter().enumerate() {
                out.push((v - mean) * inv_std * gv.data()[j] + bv.data()[j]);
            }
        }
        let out = Tensor::new(xv.shape().to_vec(), out)?;
        Ok(self.custom(
            &[x, gamma, beta],
            out,
            Box::new(move |c| {
                let (xv, gv, g) = (c.inputs[0], c.inputs[1], c.grad);
                let mut dx = vec![0.0; xv.len()];
                let mut dgamma = vec![0.0; d];
                let mut dbeta = vec![0.0; d];
                let mut xhat = vec![0.0; d];
                let mut dxhat = vec![0.0; d];
                for ((row, grow), drow) in xv
                    .data()
                    .chunks(d.max(1))
                    .zip(g.data().chunks(d.max(1)))
                    .zip(dx.chunks_mut(d.max(1)))
                {
                    let (mean, inv_std) = row_stats(row, eps);
                    for j in 0..d {
                        xhat[j] = (row[j] - mean) * inv_std;
                        dxhat[j] = grow[j] * gv.data()[j];
                        dgamma[j] += grow[j] * xhat[j];
                        dbeta[j] += grow[j];
                    }
                    let mean_d: f64 = dxhat.iter().sum::<f64>() / d as f64;
                    let mean_dx: f64 =
                        dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                    for j in 0..d {
                        drow[j] = inv_std * (dxhat[j] - mean_d - xhat[j] * mean_dx);
                    }
                }
                vec![
                    c.needs[0].then(|| Tensor::new(xv.shape().to_vec(), dx).expect("shape")),
                    c.needs[1].then(|| Tensor::new(c.inputs[1].shape().to_vec(), dgamma).expect("shape")),
                    c.needs[2].then(|| Tensor::new(c.inputs[2].shape().to_vec(), dbeta).expect("shape")),
                ]
            }),
        ))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let av = self.value(a);
        let (r, n) = (av.rows(), av.cols());
        if start + len > n || av.shape().len() != 2 {
            return Err(Error::dim("slice_cols", av.shape(), &[start, len]));
        }
        let out = Tensor::from_fn(r, len, |i, j| av.get(i, start + j));
        Ok(self.custom(
            &[a],
            out,
            Box::new(move |c| {
                let mut d = Tensor::zeros(&[r, n]);
                for i in 0..r {
                    for j in 0..len {
                        d.set(i, start + j, c.grad.get(i, j));
                    }
                }
                vec![Some(d)]
            }),
        ))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let r = self.value(parts[0]).rows();
        let widths: Vec<usize> = parts.iter().map(|&p| self.value(p).cols()).collect();
        for &p in parts {
            if self.value(p).rows() != r {
                return Err(Error::dim("concat_cols", self.value(parts[0]).shape(), self.value(p).shape()));
            }
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        let out = Tensor::new(vec![r, total], data)?;
        Ok(self.custom(
            parts,
            out,
            Box::new(move |c| {
                let mut offset = 0;
                widths
                    .iter()
                    .map(|&w| {
                        let t = Tensor::from_fn(r, w, |i, j| c.grad.get(i, offset + j));
                        offset += w;
                        Some(t)
                    })
                    .collect()
            }),
        ))
    }

    /// Row lookup: `out[i] = table[ids[i]]`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        let (v, d) = (tv.rows(), tv.cols());
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(Error::Vocab { id, size: v });
            }
            data.extend_from_slice(tv.row(id));
        }
        let out = Tensor::new(vec![ids.len(), d], data)?;
        let ids = ids.to_vec();
        Ok(self.custom(
            &[table],
            out,
            Box::new(move |c| {
                let mut dt = Tensor::zeros(&[v, d]);
                for (i, &id) in ids.iter().enumerate() {
                    for j in 0..d {
                        let cur = dt.get(id, j);
                        dt.set(id, j, cur + c.grad.get(i, j));
                    }
                }
                vec![Some(dt)]
            }),
        ))
    }

    /// Averages consecutive groups of `factor` rows; a trailing partial
    /// group is averaged over the rows it has. Output has
    /// `ceil(rows / factor)` rows.
    pub fn mean_pool_rows(&mut self, a: Var, factor: usize) -> Result<Var> {
        if factor == 0 {
            return Err(Error::Config("pooling factor must be positive".into()));
        }
        let av = self.value(a);
        let (l, d) = (av.rows(), av.cols());
        let out_len = l.div_ceil(factor);
        let mut out = Tensor::zeros(&[out_len, d]);
        for o in 0..out_len {
            let lo = o * factor;
            let hi = (lo + factor).min(l);
            let n = (hi - lo) as f64;
            for j in 0..d {
                let s: f64 = (lo..hi).map(|t| av.get(t, j)).sum();
                out.set(o, j, s / n);
            }
        }
        Ok(self.custom(
            &[a],
            out,
            Box::new(move |c| {
                let mut dx = Tensor::zeros(&[l, d]);
                for o in 0..out_len {
                    let lo = o * factor;
                    let hi = (lo + factor).min(l);
                    let n = (hi - lo) as f64;
                    for t in lo..hi {
                        for j in 0..d {
                            dx.set(t, j, c.grad.get(o, j) / n);
                        }
                    }
                }
                vec![Some(dx)]
            }),
        ))
    }

    /// Per-channel 1-D convolution along rows with zero "same" padding.
    /// `kernel` is `width × d` with `width` odd.
    pub fn depthwise_conv(&mut self, x: Var, kernel: Var) -> Result<Var> {
        let (xv, kv) = (self.value(x), self.value(kernel));
        let (l, d) = (xv.rows(), xv.cols());
        let w = kv.rows();
        if kv.cols() != d || kv.shape().len() != 2 {
            return Err(Error::dim("depthwise_conv", xv.shape(), kv.shape()));
        }
        if w % 2 == 0 {
            return Err(Error::Config(format!("convolution width must be odd, got {w}")));
        }
        let half = w / 2;
        let mut out = Tensor::zeros(&[l, d]);
        for t in 0..l {
            for k in 0..w {
                let Some(src) = (t + k).checked_sub(half).filter(|&s| s < l) else {
                    continue;
                };
                for j in 0..d {
                    let cur = out.get(t, j);
                    out.set(t, j, cur + xv.get(src, j) * kv.get(k, j));
                }
            }
        }
        Ok(self.custom(
            &[x, kernel],
            out,
            Box::new(move |c| {
                let (xv, kv, g) = (c.inputs[0], c.inputs[1], c.grad);
                let mut dx = Tensor::zeros(&[l, d]);
                let mut dk = Tensor::zeros(&[w, d]);
                for t in 0..l {
                    for k in 0..w {
                        let Some(src) = (t + k).checked_sub(half).filter(|&s| s < l) else {
                            continue;
                        };
                        for j in 0..d {
                            let gv = g.get(t, j);
                            let cx = dx.get(src, j);
                            dx.set(src, j, cx + gv * kv.get(k, j));
                            let ck = dk.get(k, j);
                            dk.set(k, j, ck + gv * xv.get(src, j));
                        }
                    }
                }
                vec![c.needs[0].then_some(dx), c.needs[1].then_some(dk)]
            }),
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        self.custom(
            &[a],
            out,
            Box::new(|c| vec![Some(Tensor::full(c.inputs[0].shape(), c.grad.item()))]),
        )
    }

    /// `Σ a ⊙ k` for a fixed weight tensor `k`.
    pub fn dot_const(&mut self, a: Var, k: &Tensor) -> Result<Var> {
        let av = self.value(a);
        if av.shape() != k.shape() {
            return Err(Error::dim("dot_const", av.shape(), k.shape()));
        }
        let s: f64 = av.data().iter().zip(k.data()).map(|(x, y)| x * y).sum();
        let k = k.clone();
        Ok(self.custom(
            &[a],
            Tensor::scalar(s),
            Box::new(move |c| {
                let g = c.grad.item();
                vec![Some(k.map(|v| v * g))]
            }),
        ))
    }
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: Vec<(String, Tensor)>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    /// Gradient of every named parameter bound in the graph; parameters the
    /// loss did not reach get zeros.
    pub fn param_grads(self) -> BTreeMap<String, Tensor> {
        self.params.into_iter().collect()
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn row_stats(row: &[f64], eps: f64) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, 1.0 / (var + eps).sqrt())
}

fn column_sums(g: &Tensor, shape: &[usize]) -> Tensor {
    let n = g.cols();
    let mut out = vec![0.0; n];
    for row in g.data().chunks(n.max(1)) {
        for (o, v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
    Tensor::new(shape.to_vec(), out).expect("column sum shape")
}
