use msr_core::layers::{
    attention, conv_module, embed, feed_forward, layer_norm, sinusoidal_positions, Activation, AttentionParams, Mask,
    CONV_ACTIVATION,
};
use msr_core::numerics::{Graph, Tensor, Var};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::from_fn(rows, cols, |_, _| rng.gen_range(-1.0..1.0))
}

fn params(g: &mut Graph, ws: [Tensor; 4], n_heads: usize) -> AttentionParams {
    let [q, k, v, o] = ws.map(|w| g.constant(w));
    AttentionParams {
        w_q: q,
        w_k: k,
        w_v: v,
        w_o: o,
        n_heads,
    }
}

fn identity_params(g: &mut Graph, d: usize) -> AttentionParams {
    params(g, [0; 4].map(|_| Tensor::identity(d)), 1)
}

fn random_params(g: &mut Graph, rng: &mut ChaCha8Rng, d: usize, n_heads: usize) -> AttentionParams {
    params(g, [0; 4].map(|_| uniform(rng, d, d)), n_heads)
}

fn run_attention(q: &Tensor, kv: &Tensor, ws: [Tensor; 4], heads: usize, mask: Option<&Mask>) -> Tensor {
    let mut g = Graph::new();
    let p = params(&mut g, ws, heads);
    let (qv, kvv) = (g.constant(q.clone()), g.constant(kv.clone()));
    let out = attention(&mut g, qv, kvv, kvv, &p, mask).unwrap();
    g.value(out).clone()
}

#[test]
fn single_key_returns_projected_value() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (q, kv) = (uniform(&mut rng, 3, 4), uniform(&mut rng, 1, 4));
    let ws = [0; 4].map(|_| uniform(&mut rng, 4, 4));
    let out = run_attention(&q, &kv, ws.clone(), 2, None);
    let projected = msr_core::numerics::matmul(&msr_core::numerics::matmul(&kv, &ws[2]).unwrap(), &ws[3]).unwrap();
    for r in 0..3 {
        for (a, b) in out.row(r).iter().zip(projected.row(0)) {
            assert!((a - b).abs() < 1e-14);
        }
    }
}

#[test]
fn zero_value_projection_gives_zero() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (q, kv) = (uniform(&mut rng, 2, 4), uniform(&mut rng, 5, 4));
    let mut ws = [0; 4].map(|_| uniform(&mut rng, 4, 4));
    ws[2] = Tensor::zeros(&[4, 4]);
    assert!(run_attention(&q, &kv, ws, 2, None).data().iter().all(|&v| v == 0.0));
}

#[test]
fn identity_projections_match_direct_formula() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let d = 5;
    let (q, kv) = (uniform(&mut rng, 2, d), uniform(&mut rng, 2, d));
    let out = run_attention(&q, &kv, [0; 4].map(|_| Tensor::identity(d)), 1, None);
    for i in 0..2 {
        let scores: Vec<f64> = (0..2)
            .map(|j| (0..d).map(|c| q.get(i, c) * kv.get(j, c)).sum::<f64>() / (d as f64).sqrt())
            .collect();
        let z: f64 = scores.iter().map(|s| s.exp()).sum();
        for c in 0..d {
            let want: f64 = (0..2).map(|j| scores[j].exp() / z * kv.get(j, c)).sum();
            assert!((out.get(i, c) - want).abs() < 1e-12);
        }
    }
}

#[test]
fn layer_norm_examples() {
    let mut g = Graph::new();
    let (gamma, beta) = (g.constant(Tensor::ones(&[2])), g.constant(Tensor::zeros(&[2])));
    let x = g.constant(Tensor::from_rows(&[vec![3.0, 3.0], vec![1.0, -1.0]]).unwrap());
    let y = layer_norm(&mut g, x, gamma, beta).unwrap();
    let y = g.value(y);
    assert_eq!(y.row(0), &[0.0, 0.0]);
    // Unit variance already: only the epsilon shrinks the row.
    let shrink = 1.0 / (1.0f64 + 1e-5).sqrt();
    assert!((y.get(1, 0) - shrink).abs() < 1e-15 && (y.get(1, 1) + shrink).abs() < 1e-15);
}

#[test]
fn feed_forward_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut g = Graph::new();
    let x = uniform(&mut rng, 3, 4);
    let xv = g.constant(x.clone());
    let zero = g.constant(Tensor::zeros(&[4, 6]));
    let w2 = g.constant(uniform(&mut rng, 6, 4));
    let y = feed_forward(&mut g, xv, zero, w2).unwrap();
    assert!(g.value(y).data().iter().all(|&v| v == 0.0));

    let pos = x.map(f64::abs);
    let pv = g.constant(pos.clone());
    let eye = g.constant(Tensor::identity(4));
    let y = feed_forward(&mut g, pv, eye, eye).unwrap();
    assert_eq!(g.value(y), &pos);

    let (w1t, w2t) = (uniform(&mut rng, 4, 6), uniform(&mut rng, 6, 4));
    let (w1, w2) = (g.constant(w1t.clone()), g.constant(w2t.clone()));
    let y = feed_forward(&mut g, xv, w1, w2).unwrap();
    for i in 0..3 {
        for j in 0..4 {
            let mut want = 0.0;
            for h in 0..6 {
                let pre: f64 = (0..4).map(|c| x.get(i, c) * w1t.get(c, h)).sum();
                want += pre.max(0.0) * w2t.get(h, j);
            }
            assert!((g.value(y).get(i, j) - want).abs() < 1e-12);
        }
    }
}

fn run_conv(x: &Tensor, kernel: &Tensor, pw_in: &Tensor, pw_out: &Tensor, act: Activation) -> Tensor {
    let mut g = Graph::new();
    let vars: Vec<Var> = [x, pw_in, kernel, pw_out].iter().map(|t| g.constant((*t).clone())).collect();
    let y = conv_module(&mut g, vars[0], vars[1], vars[2], vars[3], act).unwrap();
    g.value(y).clone()
}

fn delta(width: usize, d: usize) -> Tensor {
    Tensor::from_fn(width, d, |k, _| if k == width / 2 { 1.0 } else { 0.0 })
}

#[test]
fn conv_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (l, d) = (5, 3);
    let x = uniform(&mut rng, l, d);
    let eye = Tensor::identity(d);
    assert_eq!(run_conv(&x, &delta(3, d), &eye, &eye, Activation::Identity), x);
    let zero = run_conv(&x, &Tensor::zeros(&[3, d]), &uniform(&mut rng, d, d), &uniform(&mut rng, d, d), CONV_ACTIVATION);
    assert!(zero.data().iter().all(|&v| v == 0.0));

    // Sliding-window oracle with zero padding, then SiLU.
    let (kernel, pw_in, pw_out) = (uniform(&mut rng, 3, d), uniform(&mut rng, d, d), uniform(&mut rng, d, d));
    let got = run_conv(&x, &kernel, &pw_in, &pw_out, CONV_ACTIVATION);
    let h = msr_core::numerics::matmul(&x, &pw_in).unwrap();
    let conv = Tensor::from_fn(l, d, |t, c| {
        let mut s = 0.0;
        for k in 0..3 {
            let src = t as i64 + k as i64 - 1;
            if (0..l as i64).contains(&src) {
                s += h.get(src as usize, c) * kernel.get(k, c);
            }
        }
        s / (1.0 + (-s).exp())
    });
    let want = msr_core::numerics::matmul(&conv, &pw_out).unwrap();
    assert!(got.max_abs_diff(&want) < 1e-12);
    assert_eq!(got.shape(), &[l, d]);
}

#[test]
fn two_token_embedding_matches_sinusoid_formula() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let d = 6;
    let table = uniform(&mut rng, 4, d);
    let mut g = Graph::new();
    let t = g.constant(table.clone());
    let e = embed(&mut g, &[2, 1], t).unwrap();
    let e = g.value(e);
    for (pos, tok) in [(0usize, 2usize), (1, 1)] {
        for j in 0..d {
            let angle = pos as f64 / 10000f64.powf((2 * (j / 2)) as f64 / d as f64);
            let pe = if j % 2 == 0 { angle.sin() } else { angle.cos() };
            assert!((e.get(pos, j) - (table.get(tok, j) + pe)).abs() < 1e-15);
        }
    }
    assert_eq!(sinusoidal_positions(2, d).shape(), &[2, d]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn causal_attention_ignores_future_rows(n in 2usize..7, heads in 1usize..3, seed in any::<u64>(), t in 0usize..6) {
        let t = t % (n - 1);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = 2 * heads;
        let x = uniform(&mut rng, n, d);
        let mut perturbed = x.clone();
        for r in t + 1..n {
            for c in 0..d {
                perturbed.set(r, c, rng.gen_range(-3.0..3.0));
            }
        }
        let mask = Mask::causal(n);
        let mut g = Graph::new();
        let p = random_params(&mut g, &mut rng, d, heads);
        let (a, b) = (g.constant(x), g.constant(perturbed));
        let ya = attention(&mut g, a, a, a, &p, Some(&mask)).unwrap();
        let yb = attention(&mut g, b, b, b, &p, Some(&mask)).unwrap();
        for r in 0..=t {
            let same = g.value(ya).row(r).iter().zip(g.value(yb).row(r)).all(|(u, v)| u.to_bits() == v.to_bits());
            prop_assert!(same, "row {} changed", r);
        }
    }

    #[test]
    fn attention_rows_are_convex_combinations(lq in 1usize..4, lk in 1usize..6, d in 1usize..5, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (q, kv) = (uniform(&mut rng, lq, d), uniform(&mut rng, lk, d));
        let mut g = Graph::new();
        let mut p = identity_params(&mut g, d);
        p.w_q = g.constant(uniform(&mut rng, d, d));
        p.w_k = g.constant(uniform(&mut rng, d, d));
        let (qv, kvv) = (g.constant(q), g.constant(kv.clone()));
        let y = attention(&mut g, qv, kvv, kvv, &p, None).unwrap();
        for c in 0..d {
            let col: Vec<f64> = (0..lk).map(|j| kv.get(j, c)).collect();
            let lo = col.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            for i in 0..lq {
                let v = g.value(y).get(i, c);
                prop_assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
            }
        }
    }

    #[test]
    fn delta_kernel_conv_is_identity(l in 1usize..8, d in 1usize..5, half in 0usize..3, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = uniform(&mut rng, l, d);
        let eye = Tensor::identity(d);
        let y = run_conv(&x, &delta(2 * half + 1, d), &eye, &eye, Activation::Identity);
        prop_assert_eq!(y, x);
    }

    #[test]
    fn layer_norm_rows_have_zero_mean(l in 1usize..5, d in 2usize..8, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_fn(l, d, |_, _| rng.gen_range(-5.0..5.0)));
        let (gamma, beta) = (g.constant(Tensor::ones(&[d])), g.constant(Tensor::zeros(&[d])));
        let y = layer_norm(&mut g, x, gamma, beta).unwrap();
        for r in 0..l {
            let mean = g.value(y).row(r).iter().sum::<f64>() / d as f64;
            prop_assert!(mean.abs() < 1e-10);
        }
    }
}
