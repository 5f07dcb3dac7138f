use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tse_tensor::nn::{LayerNorm, Linear, Mlp, MultiHeadAttention};
use tse_tensor::{grad_check, ops, Graph, ParamStore, Tensor};

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.5..1.5)).collect()).unwrap()
}

fn store_with(rng: &mut ChaCha8Rng, shapes: &[(&str, &[usize])]) -> ParamStore {
    let mut s = ParamStore::new();
    for (name, shape) in shapes {
        s.add(*name, rand_tensor(rng, shape), true);
    }
    s
}

const TOL: f64 = 1e-4;

#[test]
fn quadratic_and_linear_examples() {
    let mut s = ParamStore::new();
    let th = s.add("theta", Tensor::new(&[1], vec![3.0]).unwrap(), false);
    let report = grad_check(&s, 1e-5, |g, s| {
        let t = g.param(s, th);
        let sq = g.mul(t, t)?;
        g.sum(sq)
    })
    .unwrap();
    assert!(report.max_rel_err() < 1e-6, "{report:?}");
    assert!((report.params[0].max_abs_grad - 6.0).abs() < 1e-12);

    let report = grad_check(&s, 1e-5, |g, s| {
        let t = g.param(s, th);
        let y = g.scale(t, -2.5)?;
        g.sum(y)
    })
    .unwrap();
    assert!(report.max_rel_err() < 1e-8, "{report:?}");
}

#[test]
fn every_differentiable_op_passes_grad_check() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for trial in 0..5 {
        let s = store_with(
            &mut rng,
            &[
                ("a", &[3, 4]),
                ("b", &[4, 5]),
                ("c", &[3, 5]),
                ("r", &[5]),
                ("col", &[3, 1]),
                ("table", &[6, 5]),
                ("gain", &[5]),
                ("bias", &[5]),
            ],
        );
        let id = |n: &str| s.find(n).unwrap();
        let targets = [2usize, 0, 4];
        let report = grad_check(&s, 1e-5, |g, s| {
            let a = g.param(s, id("a"));
            let b = g.param(s, id("b"));
            let c = g.param(s, id("c"));
            let r = g.param(s, id("r"));
            let col = g.param(s, id("col"));
            let table = g.param(s, id("table"));
            let gain = g.param(s, id("gain"));
            let bias = g.param(s, id("bias"));

            let x = g.matmul(a, b)?; // 3x5
            let x = g.add(x, c)?;
            let x = g.add_row(x, r)?;
            let x = g.gelu(x)?;
            let y = g.mul_row(x, gain)?;
            let y = g.sub(y, c)?;
            let y = g.layer_norm(y, gain, bias)?;
            let y = g.mul_col(y, col)?;
            let e = g.embedding(table, &[1, 5, 1])?;
            let y = g.mul(y, e)?;
            let y = g.tanh(y)?;
            let l = g.slice_cols(y, 1, 3)?;
            let rr = g.slice_cols(y, 0, 2)?;
            let cat = g.concat_cols(&[rr, l])?;
            let t = g.transpose(cat)?; // 5x3
            let sm = g.softmax_rows(t, Some(&[true, false, true]))?;
            let sm_t = g.transpose(sm)?; // 3x5
            let z = g.add(sm_t, y)?;
            let z = g.scale(z, 3.0)?;
            let ce = g.cross_entropy(z, &targets, &[true, true, false])?;
            let m = g.mean(y)?;
            let m = g.scale(m, 0.1)?;
            g.add(ce, m)
        })
        .unwrap();
        assert!(report.max_rel_err() <= TOL, "trial {trial}: {report:?}");
    }
}

#[test]
fn transformer_blocks_pass_grad_check() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut s = ParamStore::new();
    let mha = MultiHeadAttention::new(&mut s, "attn", 8, 2, &mut rng).unwrap();
    let mlp = Mlp::new(&mut s, "mlp", 8, 12, &mut rng);
    let ln = LayerNorm::new(&mut s, "ln", 8);
    let head = Linear::new(&mut s, "head", 8, 5, &mut rng);
    let xq = s.add("xq", rand_tensor(&mut rng, &[4, 8]), false);
    let xk = s.add("xk", rand_tensor(&mut rng, &[3, 8]), false);
    // shift gains and biases away from their init so their gradients are generic
    for (_, p) in s.clone().iter() {
        if p.name.ends_with("bias") || p.name.ends_with("gain") {
            let id = s.find(&p.name).unwrap();
            let n = p.value.len();
            *s.value_mut(id) = Tensor::new(p.value.shape(), (0..n).map(|_| rng.gen_range(-0.5..1.5)).collect()).unwrap();
        }
    }
    let report = grad_check(&s, 1e-5, |g, s| {
        let q = g.param(s, xq);
        let k = g.param(s, xk);
        let a = mha.forward(g, s, q, k, Some(&[true, true, false]))?;
        let x = g.add(q, a)?;
        let x = ln.forward(g, s, x)?;
        let m = mlp.forward(g, s, x)?;
        let x = g.add(x, m)?;
        let logits = head.forward(g, s, x)?;
        g.cross_entropy(logits, &[0, 4, 2, 1], &[true; 4])
    })
    .unwrap();
    assert!(report.max_rel_err() <= TOL, "{report:?}");
}

#[test]
fn adjoints_are_linear() {
    // backward(f + g) == backward(f) + backward(g) on random small graphs
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..10 {
        let s = store_with(&mut rng, &[("w", &[3, 3]), ("x", &[2, 3])]);
        let (w, x) = (s.find("w").unwrap(), s.find("x").unwrap());
        let f = |g: &mut Graph, s: &ParamStore| {
            let wv = g.param(s, w);
            let xv = g.param(s, x);
            let y = g.matmul(xv, wv).unwrap();
            let y = g.tanh(y).unwrap();
            g.sum(y).unwrap()
        };
        let h = |g: &mut Graph, s: &ParamStore| {
            let wv = g.param(s, w);
            let xv = g.param(s, x);
            let y = g.matmul(xv, wv).unwrap();
            let y = g.gelu(y).unwrap();
            let y = g.mul(y, y).unwrap();
            g.mean(y).unwrap()
        };
        let mut g1 = Graph::new();
        let o = f(&mut g1, &s);
        let gf = g1.backward(o, &s).unwrap();
        let mut g2 = Graph::new();
        let o = h(&mut g2, &s);
        let gh = g2.backward(o, &s).unwrap();
        let mut g3 = Graph::new();
        let a = f(&mut g3, &s);
        let b = h(&mut g3, &s);
        let o = g3.add(a, b).unwrap();
        let both = g3.backward(o, &s).unwrap();
        let mut sum = gf.clone();
        sum.merge(&gh);
        for id in s.ids() {
            let diff = sum.get(id).unwrap().max_abs_diff(both.get(id).unwrap());
            assert!(diff < 1e-12);
        }
    }
}

#[test]
fn non_finite_activation_is_an_error() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::new(&[1, 2], vec![1e300, 1e300]).unwrap());
    let y = g.constant(Tensor::new(&[2, 1], vec![1e300, 1e300]).unwrap());
    assert!(g.matmul(x, y).is_err());
}

fn identity_attention(dim: usize) -> (ParamStore, MultiHeadAttention) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut s = ParamStore::new();
    let mha = MultiHeadAttention::new(&mut s, "a", dim, 1, &mut rng).unwrap();
    let mut eye = Tensor::zeros(&[dim, dim]);
    for i in 0..dim {
        eye.data_mut()[i * dim + i] = 1.0;
    }
    for l in [&mha.query, &mha.key, &mha.value, &mha.output] {
        *s.value_mut(l.weight) = eye.clone();
    }
    (s, mha)
}

#[test]
fn attention_hand_example() {
    // identity projections, q=[1,0], k=v=I: weights softmax([1/sqrt2, 0]) applied to v
    let (s, mha) = identity_attention(2);
    let q = Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap();
    let kv = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
    let out = mha.apply(&s, &q, &kv, &kv).unwrap();
    let s0 = 1.0 / 2f64.sqrt();
    let w0 = s0.exp() / (s0.exp() + 1.0);
    assert!((out.data()[0] - w0).abs() < 1e-12);
    assert!((out.data()[1] - (1.0 - w0)).abs() < 1e-12);
}

#[test]
fn attention_single_key_returns_projected_value() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut s = ParamStore::new();
    let mha = MultiHeadAttention::new(&mut s, "a", 8, 4, &mut rng).unwrap();
    let q = rand_tensor(&mut rng, &[5, 8]);
    let kv = rand_tensor(&mut rng, &[1, 8]);
    let out = mha.apply(&s, &q, &kv, &kv).unwrap();
    // value projection then output projection of the lone row
    let mut g = Graph::new();
    let x = g.constant(kv.clone());
    let v = mha.value.forward(&mut g, &s, x).unwrap();
    let o = mha.output.forward(&mut g, &s, v).unwrap();
    let expected = g.value(o);
    for t in 0..5 {
        for j in 0..8 {
            assert!((out.row(t)[j] - expected.data()[j]).abs() < 1e-12);
        }
    }
}

#[test]
fn attention_rejects_bad_heads_and_shapes() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut s = ParamStore::new();
    assert!(MultiHeadAttention::new(&mut s, "bad", 10, 4, &mut rng).is_err());
    let mha = MultiHeadAttention::new(&mut s, "a", 8, 2, &mut rng).unwrap();
    let q = Tensor::zeros(&[2, 8]);
    let k = Tensor::zeros(&[3, 6]);
    assert!(mha.apply(&s, &q, &k, &k).is_err());
}

#[test]
fn attention_heads_are_convex_combinations() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut s = ParamStore::new();
    let mha = MultiHeadAttention::new(&mut s, "a", 8, 2, &mut rng).unwrap();
    let mut g = Graph::new();
    let q = g.constant(rand_tensor(&mut rng, &[4, 8]));
    let k = g.constant(rand_tensor(&mut rng, &[6, 8]));
    let tr = mha.trace(&mut g, &s, q, k, k, None).unwrap();
    for (vh, mh) in tr.values.iter().zip(&tr.mixed) {
        let (vals, mixed) = (g.value(*vh), g.value(*mh));
        let w = vals.shape()[1];
        for t in 0..4 {
            for j in 0..w {
                let col: Vec<f64> = (0..6).map(|r| vals.row(r)[j]).collect();
                let lo = col.iter().copied().fold(f64::INFINITY, f64::min);
                let hi = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let x = mixed.row(t)[j];
                assert!(x >= lo - 1e-12 && x <= hi + 1e-12);
            }
        }
    }
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(data in prop::collection::vec(-50.0f64..50.0, 12)) {
        let x = Tensor::new(&[3, 4], data).unwrap();
        for axis in 0..2 {
            let y = ops::softmax(&x, axis).unwrap();
            prop_assert!(y.data().iter().all(|&v| v >= 0.0));
            let sums: Vec<f64> = if axis == 1 {
                (0..3).map(|r| y.row(r).iter().sum()).collect()
            } else {
                (0..4).map(|c| (0..3).map(|r| y.row(r)[c]).sum()).collect()
            };
            for s in sums {
                prop_assert!((s - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn cross_entropy_is_nonnegative_and_ln_k_on_uniform(
        k in 2usize..200,
        c in -10.0f64..10.0,
        data in prop::collection::vec(-20.0f64..20.0, 8),
    ) {
        let uniform = Tensor::full(&[2, k], c);
        let l = ops::cross_entropy(&uniform, &[0, k - 1], &[true, true]).unwrap();
        prop_assert!((l - (k as f64).ln()).abs() < 1e-6);
        let x = Tensor::new(&[2, 4], data).unwrap();
        prop_assert!(ops::cross_entropy(&x, &[1, 3], &[true, true]).unwrap() >= 0.0);
    }

    #[test]
    fn attention_key_permutation_symmetry(seed in 0u64..500, shift in 1usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = ParamStore::new();
        let mha = MultiHeadAttention::new(&mut s, "a", 8, 2, &mut rng).unwrap();
        let q = rand_tensor(&mut rng, &[3, 8]);
        let kv = rand_tensor(&mut rng, &[5, 8]);
        let rows: Vec<Vec<f64>> = (0..5).map(|r| kv.row((r + shift) % 5).to_vec()).collect();
        let perm = Tensor::from_rows(&rows).unwrap();
        let a = mha.apply(&s, &q, &kv, &kv).unwrap();
        let b = mha.apply(&s, &q, &perm, &perm).unwrap();
        prop_assert!(a.max_abs_diff(&b) < 1e-12);
    }
}
