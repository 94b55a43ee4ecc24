//! Finite-difference gradient checks for every differentiable operation,
//! each over a batch of randomly drawn micro-configurations.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::ctc;
use crate::data::Utterance;
use crate::encoder::{self, AudioFeatures, EncoderConfig};
use crate::error::{Error, Result};
use crate::layers::{self, Activation, AttentionParams, Mask};
use crate::mfd_decoder::{self, DecoderConfig, DualCrossAttentionParams};
use crate::model::{Model, ModelConfig, Modality};
use crate::numerics::{relative_error, Binder, Graph, ParamStore, Tensor, Var};
use crate::train::utterance_loss;
use crate::visual_encoder::{OcrTokenSequence, VisualFeatures};

pub const EPS: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;
pub const CASES: usize = 20;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub cases: usize,
    /// Worst relative error over all cases and coordinates.
    pub worst: f64,
}

impl CheckOutcome {
    pub fn passed(&self) -> bool {
        self.worst < TOLERANCE
    }
}

fn randn(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches")
}

/// Adds noise to every tensor in `store` so layer-norm gains and biases
/// leave their symmetric initial values.
fn jitter(store: &mut ParamStore, rng: &mut ChaCha8Rng) {
    for (_, t) in store.iter_mut() {
        for x in t.data_mut() {
            *x += 0.1 * rng.sample::<f64, _>(StandardNormal);
        }
    }
}

/// Checks `f` against central differences with respect to every value in
/// `store`. `f` must return a scalar.
pub fn check_store<F>(store: &ParamStore, f: F) -> Result<f64>
where
    F: Fn(&mut Graph, &Binder<'_>) -> Result<Var>,
{
    let mut g = Graph::new();
    let out = f(&mut g, &Binder::new(store))?;
    if g.value(out).len() != 1 {
        return Err(Error::Contract("gradient check target must be a scalar".into()));
    }
    let grads = g.backward(out)?.param_grads();
    let eval = |s: &ParamStore| -> Result<f64> {
        let mut g = Graph::new();
        let out = f(&mut g, &Binder::frozen_all(s))?;
        Ok(g.value(out).item())
    };
    let mut work = store.clone();
    let mut worst = 0.0f64;
    for (name, t) in store.iter() {
        let analytic = grads.get(name).cloned().unwrap_or_else(|| Tensor::zeros(t.shape()));
        for i in 0..t.len() {
            let orig = t.data()[i];
            work.get_mut(name).expect("cloned").data_mut()[i] = orig + EPS;
            let plus = eval(&work)?;
            work.get_mut(name).expect("cloned").data_mut()[i] = orig - EPS;
            let minus = eval(&work)?;
            work.get_mut(name).expect("cloned").data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * EPS);
            let a = analytic.data()[i];
            let rel = relative_error(a, numeric);
            if !rel.is_finite() {
                return Err(Error::Numeric(format!("gradient check of `{name}`[{i}]")));
            }
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}

/// Scalar readout `Σ out ⊙ R` with a fixed random `R`.
fn readout(g: &mut Graph, out: Var, seed: u64) -> Result<Var> {
    let shape = g.shape(out).to_vec();
    let r = randn(&mut ChaCha8Rng::seed_from_u64(seed), &shape, 1.0);
    g.dot_const(out, &r)
}

/// Widths of at least 4: a layer norm over 2 features outputs `±γ` for
/// every input, which leaves upstream gradients at round-off level.
fn pick_dims(rng: &mut ChaCha8Rng) -> (usize, usize) {
    let heads = [1usize, 2][rng.gen_range(0..2)];
    let d = 2 * rng.gen_range(2..=4);
    (d, heads)
}

fn attention_case(rng: &mut ChaCha8Rng) -> Result<f64> {
    let (d, heads) = pick_dims(rng);
    let (lq, lk) = (rng.gen_range(1..=4), rng.gen_range(1..=4));
    let mut s = ParamStore::new();
    AttentionParams::init(&mut s, "a", d, rng);
    s.insert("q", randn(rng, &[lq, d], 1.0));
    s.insert("kv", randn(rng, &[lk, d], 1.0));
    let mask = if rng.gen_bool(0.5) {
        // Every row keeps at least its first key.
        let allowed = (0..lq * lk).map(|k| k % lk == 0 || rng.gen_bool(0.6)).collect();
        Some(Mask::new(lq, lk, allowed)?)
    } else {
        None
    };
    let seed = rng.gen();
    check_store(&s, |g, b| {
        let p = AttentionParams::bind(g, b, "a", heads)?;
        let (q, kv) = (b.bind(g, "q")?, b.bind(g, "kv")?);
        let out = layers::attention(g, q, kv, kv, &p, mask.as_ref())?;
        readout(g, out, seed)
    })
}

fn layer_norm_case(rng: &mut ChaCha8Rng) -> Result<f64> {
    let d = rng.gen_range(2..=6);
    let rows = rng.gen_range(1..=4);
    let mut s = ParamStore::new();
    s.insert("x", randn(rng, &[rows, d], 1.0));
    s.insert("gamma", randn(rng, &[d], 1.0));
    s.insert("beta", randn(rng, &[d], 1.0));
    let seed = rng.gen();
    check_store(&s, |g, b| {
        let (x, ga, be) = (b.bind(g, "x")?, b.bind(g, "gamma")?, b.bind(g, "beta")?);
        let out = layers::layer_norm(g, x, ga, be)?;
        readout(g, out, seed)
    })
}

fn feed_forward_case(rng: &mut ChaCha8Rng) -> Result<f64> {
    let (d, d_ff, rows) = (rng.gen_range(2..=5), rng.gen_range(2..=8), rng.gen_range(1..=4));
    let mut s = ParamStore::new();
    layers::init_feed_forward(&mut s, "ff", d, d_ff, rng);
    s.insert("x", randn(rng, &[rows, d], 1.0));
    let seed = rng.gen();
    check_store(&s, |g, b| {
        let (x, w1, w2) = (b.bind(g, "x")?, b.bind(g, "ff.w1")?, b.bind(g, "ff.w2")?);
        let out = layers::feed_forward(g, x, w1, w2)?;
        readout(g, out, seed)
    })
}

fn conv_module_case(rng: &mut ChaCha8Rng) -> Result<f64> {
    let (d, width, rows) = (rng.gen_range(2..=5), [1, 3, 5][rng.gen_range(0..3)], rng.gen_range(1..=6));
    let mut s = ParamStore::new();
    layers::init_conv_module(&mut s, "c", d, width, rng)?;
    s.insert("x", randn(rng, &[rows, d], 1.0));
    let seed = rng.gen();
    check_store(&s, |g, b| {
        let x = b.bind(g, "x")?;
        let (pi, k, po) = (b.bind(g, "c.pw_in")?, b.bind(g, "c.kernel")?, b.bind(g, "c.pw_out")?);
        let out = layers::conv_module(g, x, pi, k, po, Activation::Silu)?;
        readout(g, out, seed)
    })
}

/// Repeated tokens make keys nearly collinear in the high positional
/// dimensions, pushing key gradients down to finite-difference round-off.
fn distinct(rng: &mut ChaCha8Rng, range: usize, n: usize) -> Vec<usize> {
    rand::seq::index::sample(rng, range, n).into_vec()
}

fn micro_encoder(rng: &mut ChaCha8Rng) -> EncoderConfig {
    let (d, heads) = pick_dims(rng);
    EncoderConfig {
        d_in: rng.gen_range(2..=4),
        n_blocks: rng.gen_range(1..=2),
        n_heads: heads,
        d_model: d,
        d_ff: rng.gen_range(2..=6),
        conv_width: [1, 3][rng.gen_range(0..2)],
        subsample_factor: [1, 2][rng.gen_range(0..2)],
        intermediate_ctc_layer: None,
    }
}

fn encoder_case(rng: &mut ChaCha8Rng) -> Result<f64> {
    let cfg = micro_encoder(rng);
    let raw = rng.gen_range(cfg.subsample_factor..=5);
    let mut s = ParamStore::new();
    encoder::init_params(&cfg, 3, &mut s, rng)?;
    jitter(&mut s, rng);
    s.insert("x", randn(rng, &[raw, cfg.d_in], 1.0));
    let seed = rng.gen();
    check_store(&s, |g, b| {
        let x = b.bind(g, "x")?;
        let out = encoder::encode_audio(g, x, &cfg, b)?;
        readout(g, out.frames, seed)
    })
}

fn dual_cross_case(rng: &mut ChaCha8Rng) -> Result<f64> {
    let (d, heads) = pick_dims(rng);
    let (lq, t_len, i_len) = (rng.gen_range(1..=3), rng.gen_range(1..=4), rng.gen_range(1..=4));
    let mut s = ParamStore::new();
    AttentionParams::init(&mut s, "blk.cross_audio", d, rng);
    AttentionParams::init(&mut s, "blk.cross_visual", d, rng);
    s.insert("q", randn(rng, &[lq, d], 1.0));
    s.insert("t", randn(rng, &[t_len, d], 1.0));
    s.insert("i", randn(rng, &[i_len, d], 1.0));
    let seed = rng.gen();
    check_store(&s, |g, b| {
        let p = DualCrossAttentionParams::bind(g, b, "blk", heads)?;
        let q = b.bind(g, "q")?;
        let t = AudioFeatures {
            frames: b.bind(g, "t")?,
            t_len,
        };
        let i = VisualFeatures {
            frames: Some(b.bind(g, "i")?),
            i_len,
        };
        let out = mfd_decoder::dual_cross_attention(g, q, &t, &i, &p)?;
        readout(g, out, seed)
    })
}

fn decoder_case(rng: &mut ChaCha8Rng) -> Result<f64> {
    let (d, heads) = pick_dims(rng);
    let cfg = DecoderConfig {
        n_blocks: rng.gen_range(1..=2),
        n_heads: heads,
        d_model: d,
        d_ff: rng.gen_range(2..=5),
        vocab_size: rng.gen_range(3..=6),
    };
    let (t_len, i_len) = (rng.gen_range(1..=3), rng.gen_range(0..=3));
    let mut s = ParamStore::new();
    mfd_decoder::init_params(&cfg, &mut s, rng)?;
    mfd_decoder::init_fusion_params(&cfg, &mut s, rng);
    jitter(&mut s, rng);
    s.insert("t", randn(rng, &[t_len, d], 1.0));
    if i_len > 0 {
        s.insert("i", randn(rng, &[i_len, d], 1.0));
    }
    let len = rng.gen_range(0..=3.min(cfg.vocab_size - 2));
    let mut tokens = vec![cfg.bos()];
    tokens.extend(distinct(rng, cfg.vocab_size - 2, len));
    let seed = rng.gen();
    check_store(&s, |g, b| {
        let t = AudioFeatures {
            frames: b.bind(g, "t")?,
            t_len,
        };
        let i = if i_len > 0 {
            VisualFeatures {
                frames: Some(b.bind(g, "i")?),
                i_len,
            }
        } else {
            VisualFeatures::empty()
        };
        let out = mfd_decoder::decoder_forward(g, &tokens, &t, &i, &cfg, b)?;
        readout(g, out, seed)
    })
}

fn ctc_case(rng: &mut ChaCha8Rng) -> Result<f64> {
    let classes = rng.gen_range(2..=5);
    let u = rng.gen_range(0..=3);
    let labels: Vec<usize> = (0..u).map(|_| rng.gen_range(0..classes - 1)).collect();
    let t_len = labels.len() + ctc::repeats(&labels) + rng.gen_range(1..=3);
    let mut s = ParamStore::new();
    s.insert("logits", randn(rng, &[t_len, classes], 1.0));
    check_store(&s, |g, b| {
        let x = b.bind(g, "logits")?;
        let lp = g.log_softmax_rows(x)?;
        ctc::ctc_loss(g, lp, &labels)
    })
}

fn train_loss_case(rng: &mut ChaCha8Rng) -> Result<f64> {
    let text_vocab = rng.gen_range(4..=6);
    let mut enc = micro_encoder(rng);
    let dec = DecoderConfig {
        n_blocks: 1,
        n_heads: enc.n_heads,
        d_model: enc.d_model,
        d_ff: rng.gen_range(2..=4),
        vocab_size: 0,
    };
    enc.n_blocks = 1;
    let cfg = ModelConfig::new(text_vocab, enc, dec, false)?;
    let mut model = Model::new(cfg, rng.gen())?;
    let fusion = rng.gen_bool(0.5);
    if fusion {
        model.enable_fusion(rng.gen());
    }
    jitter(&mut model.params, rng);
    let u = rng.gen_range(1..=2);
    let ref_tokens = distinct(rng, text_vocab, u);
    let ocr_len = [0, 3, 4][rng.gen_range(0..3)];
    let frames = (ref_tokens.len() + ctc::repeats(&ref_tokens) + 1) * model.config.encoder.subsample_factor;
    let utt = Utterance {
        id: "g".into(),
        ref_tokens,
        durations: vec![],
        audio: randn(rng, &[frames, model.config.encoder.d_in], 1.0),
        ocr: OcrTokenSequence::new(distinct(rng, text_vocab, ocr_len)),
    };
    let lambda = rng.gen_range(0.0..=1.0);
    let modality = if fusion { Modality::AudioVisual } else { Modality::Audio };
    check_store(&model.params, |g, b| {
        let l = utterance_loss(g, &model, b, &utt, modality, 0.1)?;
        let c = g.scale(l.ctc, lambda);
        let a = g.scale(l.att, 1.0 - lambda);
        g.add(c, a)
    })
}

type Case = fn(&mut ChaCha8Rng) -> Result<f64>;

pub const CHECKS: [(&str, Case); 9] = [
    ("attention", attention_case),
    ("layer_norm", layer_norm_case),
    ("feed_forward", feed_forward_case),
    ("conv_module", conv_module_case),
    ("encoder_stack", encoder_case),
    ("dual_cross_attention", dual_cross_case),
    ("decoder_forward", decoder_case),
    ("ctc_loss", ctc_case),
    ("train_loss", train_loss_case),
];

/// Runs `cases` random configurations of one named check.
pub fn run_check(name: &'static str, case: Case, cases: usize, seed: u64) -> Result<CheckOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..cases {
        worst = worst.max(case(&mut rng)?);
    }
    Ok(CheckOutcome { name, cases, worst })
}

/// The full suite with [`CASES`] configurations per operation.
pub fn run_suite(seed: u64) -> Result<Vec<CheckOutcome>> {
    CHECKS
        .iter()
        .enumerate()
        .map(|(k, &(name, case))| run_check(name, case, CASES, seed.wrapping_add(k as u64)))
        .collect()
}
