use msr_core::data::Utterance;
use msr_core::encoder::{AudioFeatures, EncoderConfig};
use msr_core::gradsuite::check_store;
use msr_core::layers::{attention, layer_norm, sinusoidal_positions, AttentionParams};
use msr_core::mfd_decoder::{
    beam_search, dual_cross_attention, hypothesis_order, DecoderConfig, DualCrossAttentionParams, Hypothesis,
};
use msr_core::model::{Modality, Model, ModelConfig};
use msr_core::numerics::{log_softmax_rows, Binder, Graph, ParamStore, Tensor};
use msr_core::visual_encoder::{self, encode_visual, OcrTokenSequence, VisualFeatures};
use msr_core::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::from_fn(rows, cols, |_, _| rng.gen_range(-1.0..1.0))
}

fn branch(g: &mut Graph, ws: &[Tensor; 4]) -> AttentionParams {
    let [q, k, v, o] = ws.clone().map(|w| g.constant(w));
    AttentionParams {
        w_q: q,
        w_k: k,
        w_v: v,
        w_o: o,
        n_heads: 1,
    }
}

fn audio(g: &mut Graph, t: &Tensor) -> AudioFeatures {
    AudioFeatures {
        frames: g.constant(t.clone()),
        t_len: t.rows(),
    }
}

fn visual(g: &mut Graph, i: &Tensor) -> VisualFeatures {
    VisualFeatures {
        frames: Some(g.constant(i.clone())),
        i_len: i.rows(),
    }
}

/// Single-head attention straight from the definition.
fn attention_oracle(q: &Tensor, kv: &Tensor, ws: &[Tensor; 4]) -> Tensor {
    let proj = |x: &Tensor, w: &Tensor| Tensor::from_fn(x.rows(), w.cols(), |i, j| (0..x.cols()).map(|p| x.get(i, p) * w.get(p, j)).sum());
    let (qp, kp, vp) = (proj(q, &ws[0]), proj(kv, &ws[1]), proj(kv, &ws[2]));
    let d = q.cols() as f64;
    let heads = Tensor::from_fn(q.rows(), q.cols(), |i, c| {
        let scores: Vec<f64> = (0..kv.rows())
            .map(|j| (0..q.cols()).map(|p| qp.get(i, p) * kp.get(j, p)).sum::<f64>() / d.sqrt())
            .collect();
        let z: f64 = scores.iter().map(|s| s.exp()).sum();
        (0..kv.rows()).map(|j| scores[j].exp() / z * vp.get(j, c)).sum()
    });
    proj(&heads, &ws[3])
}

#[test]
fn dual_cross_attention_matches_two_softmax_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let d = 4;
    let (q, t, i) = (uniform(&mut rng, 2, d), uniform(&mut rng, 3, d), uniform(&mut rng, 2, d));
    let wa: [Tensor; 4] = [0; 4].map(|_| uniform(&mut rng, d, d));
    let wi: [Tensor; 4] = [0; 4].map(|_| uniform(&mut rng, d, d));
    let mut g = Graph::new();
    let p = DualCrossAttentionParams {
        audio_branch: branch(&mut g, &wa),
        visual_branch: Some(branch(&mut g, &wi)),
    };
    let (qv, tf, vf) = (g.constant(q.clone()), audio(&mut g, &t), visual(&mut g, &i));
    let h = dual_cross_attention(&mut g, qv, &tf, &vf, &p).unwrap();
    let mut want = attention_oracle(&q, &t, &wa);
    want.add_assign(&attention_oracle(&q, &i, &wi)).unwrap();
    assert!(g.value(h).max_abs_diff(&want) < 1e-12);
}

#[test]
fn empty_and_zeroed_visual_reduce_to_audio_branch() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let d = 4;
    let (q, t, i) = (uniform(&mut rng, 3, d), uniform(&mut rng, 5, d), uniform(&mut rng, 2, d));
    let wa: [Tensor; 4] = [0; 4].map(|_| uniform(&mut rng, d, d));
    let mut wi: [Tensor; 4] = [0; 4].map(|_| uniform(&mut rng, d, d));
    let mut g = Graph::new();
    let qv = g.constant(q);
    let tf = audio(&mut g, &t);
    let audio_only = {
        let ab = branch(&mut g, &wa);
        let out = attention(&mut g, qv, tf.frames, tf.frames, &ab, None).unwrap();
        g.value(out).clone()
    };
    let p = DualCrossAttentionParams {
        audio_branch: branch(&mut g, &wa),
        visual_branch: Some(branch(&mut g, &wi)),
    };
    let h = dual_cross_attention(&mut g, qv, &tf, &VisualFeatures::empty(), &p).unwrap();
    assert!(g.value(h).bitwise_eq(&audio_only));

    wi[2] = Tensor::zeros(&[d, d]);
    wi[3] = Tensor::zeros(&[d, d]);
    let p = DualCrossAttentionParams {
        audio_branch: branch(&mut g, &wa),
        visual_branch: Some(branch(&mut g, &wi)),
    };
    let vf = visual(&mut g, &i);
    let h = dual_cross_attention(&mut g, qv, &tf, &vf, &p).unwrap();
    assert!(g.value(h).bitwise_eq(&audio_only));
}

#[test]
fn visual_width_mismatch_is_dimension_error() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let wa: [Tensor; 4] = [0; 4].map(|_| uniform(&mut rng, 4, 4));
    let mut g = Graph::new();
    let p = DualCrossAttentionParams {
        audio_branch: branch(&mut g, &wa),
        visual_branch: Some(branch(&mut g, &wa)),
    };
    let qv = g.constant(uniform(&mut rng, 2, 4));
    let tf = audio(&mut g, &uniform(&mut rng, 3, 4));
    let vf = visual(&mut g, &uniform(&mut rng, 2, 3));
    assert!(matches!(dual_cross_attention(&mut g, qv, &tf, &vf, &p), Err(Error::Dimension { .. })));
}

fn visual_store(vocab: usize, d: usize, seed: u64) -> ParamStore {
    let mut s = ParamStore::new();
    visual_encoder::init_params(vocab, d, &mut s, &mut ChaCha8Rng::seed_from_u64(seed));
    s
}

#[test]
fn visual_encoder_examples() {
    let s = visual_store(7, 4, 4);
    let mut g = Graph::new();
    let b = Binder::new(&s);
    let empty = encode_visual(&mut g, &OcrTokenSequence::new(vec![]), &b, 2, false).unwrap();
    assert!(empty.frames.is_none() && empty.i_len == 0);
    assert!(matches!(
        encode_visual(&mut g, &OcrTokenSequence::new(vec![1, 7]), &b, 2, false),
        Err(Error::Vocab { id: 7, size: 7 })
    ));

    // Zero table and zero value path: the block reduces to the normalized
    // positional row.
    let mut z = s.clone();
    for name in ["visual.embed", "visual.attn.w_v"] {
        let t = z.get_mut(name).unwrap();
        *t = Tensor::zeros(t.shape());
    }
    let mut g = Graph::new();
    let f = encode_visual(&mut g, &OcrTokenSequence::new(vec![3]), &Binder::new(&z), 2, false).unwrap();
    let pos = g.constant(sinusoidal_positions(1, 4));
    let (gamma, beta) = (g.constant(Tensor::ones(&[4])), g.constant(Tensor::zeros(&[4])));
    let want = layer_norm(&mut g, pos, gamma, beta).unwrap();
    assert!(g.value(f.frames.unwrap()).bitwise_eq(g.value(want)));
}

#[test]
fn visual_encoder_gradients_and_freeze_flag() {
    let s = visual_store(9, 4, 5);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let tokens = OcrTokenSequence::new((0..5).map(|_| rng.gen_range(0..9)).collect());
    let readout = uniform(&mut rng, 5, 4);
    let err = check_store(&s, |g, b| {
        let f = encode_visual(g, &tokens, b, 2, false)?;
        assert_eq!(g.shape(f.frames.unwrap()), &[5, 4]);
        g.dot_const(f.frames.unwrap(), &readout)
    })
    .unwrap();
    assert!(err < 1e-4, "{err}");

    let mut g = Graph::new();
    let f = encode_visual(&mut g, &tokens, &Binder::new(&s), 2, true).unwrap();
    let loss = g.dot_const(f.frames.unwrap(), &readout).unwrap();
    let grads = g.backward(loss).unwrap().param_grads();
    assert!(grads.values().all(|t| t.data().iter().all(|&v| v == 0.0)));
}

// ---- decoder and beam search --------------------------------------------

fn micro_model(seed: u64, text_vocab: usize) -> Model {
    let enc = EncoderConfig {
        d_in: 3,
        n_blocks: 1,
        n_heads: 2,
        d_model: 8,
        d_ff: 16,
        conv_width: 3,
        subsample_factor: 1,
        intermediate_ctc_layer: None,
    };
    let dec = DecoderConfig {
        n_blocks: 2,
        n_heads: 2,
        d_model: 8,
        d_ff: 16,
        vocab_size: 0,
    };
    let mut m = Model::new(ModelConfig::new(text_vocab, enc, dec, false).unwrap(), seed).unwrap();
    m.enable_fusion(seed + 1);
    m
}

fn utterance(rng: &mut ChaCha8Rng, vocab: usize, frames: usize, ocr_len: usize) -> Utterance {
    Utterance {
        id: "u".into(),
        ref_tokens: vec![0],
        durations: vec![frames],
        audio: uniform(rng, frames, 3),
        ocr: OcrTokenSequence::new((0..ocr_len).map(|_| rng.gen_range(0..vocab)).collect()),
    }
}

fn logits(m: &Model, u: &Utterance, targets: &[usize]) -> Tensor {
    let mut g = Graph::new();
    let b = Binder::frozen_all(&m.params);
    let fwd = m.forward(&mut g, &b, u, Modality::AudioVisual).unwrap();
    let out = m.decoder_logits(&mut g, &b, &fwd, targets).unwrap();
    g.value(out).clone()
}

#[test]
fn bos_only_gives_one_finite_row() {
    let m = micro_model(1, 5);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let out = logits(&m, &utterance(&mut rng, 5, 4, 2), &[]);
    assert_eq!(out.shape(), &[1, m.config.decoder.vocab_size]);
    assert!(out.is_finite());
}

#[test]
fn beam_one_is_argmax_rollout() {
    let m = micro_model(2, 5);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (bos, eos) = (m.config.decoder.bos(), m.config.decoder.eos());
    for _ in 0..5 {
        let u = utterance(&mut rng, 5, 5, 3);
        let hyp = m.decode(&u, Modality::AudioVisual, 1, Some(6)).unwrap();
        let mut tokens: Vec<usize> = Vec::new();
        while tokens.len() < 6 && tokens.last() != Some(&eos) {
            let lp = log_softmax_rows(&logits(&m, &u, &tokens)).unwrap();
            let last = lp.row(lp.rows() - 1);
            let best = (0..last.len())
                .filter(|&t| t != bos)
                .fold(None, |acc: Option<usize>, t| match acc {
                    Some(b) if last[b] >= last[t] => Some(b),
                    _ => Some(t),
                })
                .unwrap();
            tokens.push(best);
        }
        assert_eq!(hyp.tokens, tokens);
    }
}

/// Deterministic pseudo-model over `{a, b, BOS, EOS}`.
fn toy_scorer(seed: u64) -> impl FnMut(&[usize]) -> msr_core::Result<Vec<f64>> {
    move |prefix: &[usize]| {
        let h = prefix.iter().fold(seed, |h, &t| h.wrapping_mul(0x100_0000_01B3).wrapping_add(t as u64 + 1));
        let mut rng = ChaCha8Rng::seed_from_u64(h);
        let raw = Tensor::from_fn(1, 4, |_, _| rng.gen_range(-2.0..2.0));
        Ok(log_softmax_rows(&raw)?.data().to_vec())
    }
}

fn brute_force_best(seed: u64, max_len: usize) -> Hypothesis {
    let (bos, eos) = (2, 3);
    let mut score = toy_scorer(seed);
    let mut all = Vec::new();
    let mut stack = vec![Hypothesis {
        tokens: vec![],
        log_prob: 0.0,
    }];
    while let Some(h) = stack.pop() {
        let mut prefix = vec![bos];
        prefix.extend_from_slice(&h.tokens);
        let lp = score(&prefix).unwrap();
        for t in [0, 1, eos] {
            let mut tokens = h.tokens.clone();
            tokens.push(t);
            let next = Hypothesis {
                tokens,
                log_prob: h.log_prob + lp[t],
            };
            if t == eos || next.tokens.len() == max_len {
                all.push(next);
            } else {
                stack.push(next);
            }
        }
    }
    all.sort_by(hypothesis_order);
    all.remove(0)
}

#[test]
fn exhaustive_beam_matches_enumeration() {
    for seed in 0..50 {
        let got = beam_search(toy_scorer(seed), 2, 3, 27, 3).unwrap();
        assert_eq!(got, brute_force_best(seed, 3), "seed {seed}");
    }
}

#[test]
fn wider_beam_scores_at_least_greedy_on_fixed_seeds() {
    for seed in 0..50 {
        let greedy = beam_search(toy_scorer(seed), 2, 3, 1, 5).unwrap();
        let wide = beam_search(toy_scorer(seed), 2, 3, 4, 5).unwrap();
        assert!(wide.score() >= greedy.score(), "seed {seed}");
    }
    assert!(matches!(beam_search(toy_scorer(0), 2, 3, 0, 5), Err(Error::Config(_))));
}

#[test]
fn both_branches_receive_gradient() {
    let m = micro_model(3, 6);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let u = utterance(&mut rng, 6, 5, 3);
    let mut g = Graph::new();
    let b = Binder::new(&m.params);
    let fwd = m.forward(&mut g, &b, &u, Modality::AudioVisual).unwrap();
    let out = m.decoder_logits(&mut g, &b, &fwd, &[1, 4]).unwrap();
    let r = uniform(&mut rng, 3, m.config.decoder.vocab_size);
    let loss = g.dot_const(out, &r).unwrap();
    let grads = g.backward(loss).unwrap().param_grads();
    for name in ["decoder.blocks.0.cross_audio.w_k", "decoder.blocks.0.cross_visual.w_k"] {
        assert!(grads[name].data().iter().any(|&v| v != 0.0), "{name}");
    }
}

fn permuted_rows(t: &Tensor, perm: &[usize]) -> Tensor {
    Tensor::from_fn(t.rows(), t.cols(), |i, j| t.get(perm[i], j))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn later_targets_never_affect_earlier_logits(seed in any::<u64>(), len in 2usize..6, j in 0usize..6) {
        let j = j % len;
        let m = micro_model(seed, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let u = utterance(&mut rng, 6, 4, 2);
        let targets: Vec<usize> = (0..len).map(|_| rng.gen_range(0..6)).collect();
        let mut changed = targets.clone();
        changed[j] = (changed[j] + 1) % 6;
        let (a, b) = (logits(&m, &u, &targets), logits(&m, &u, &changed));
        for r in 0..=j {
            prop_assert!(a.row(r).iter().zip(b.row(r)).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn audio_order_matters_and_visual_order_matters(seed in any::<u64>()) {
        let m = micro_model(seed, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
        let u = utterance(&mut rng, 6, 5, 3);
        let base = logits(&m, &u, &[1, 2]);
        let swapped_audio = Utterance { audio: permuted_rows(&u.audio, &[4, 3, 2, 1, 0]), ..u.clone() };
        prop_assert!(!logits(&m, &swapped_audio, &[1, 2]).bitwise_eq(&base));
        let mut ocr = u.ocr.tokens.clone();
        ocr.reverse();
        if ocr != u.ocr.tokens {
            let swapped_visual = Utterance { ocr: OcrTokenSequence::new(ocr), ..u.clone() };
            prop_assert!(!logits(&m, &swapped_visual, &[1, 2]).bitwise_eq(&base));
        }
    }
}
