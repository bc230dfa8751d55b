use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::check::{finite_diff, relative_error};
use super::*;

const STEP: f64 = 1e-5;

/// Contracts `build`'s output against a fixed random weighting so every
/// output element contributes, then compares the tape gradient of each
/// input with central differences.
fn grad_check(
    inputs: Vec<Tensor>,
    tol: f64,
    build: impl Fn(&mut Graph, &[Var]) -> Result<Var>,
) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let probe_shape = {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
        let out = build(&mut g, &vars).unwrap();
        g.value(out).shape().to_vec()
    };
    let weights = Tensor::randn(&probe_shape, 1.0, &mut rng);

    let eval = |ts: &[Tensor]| -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = ts.iter().map(|t| g.constant(t.clone())).collect();
        let out = build(&mut g, &vars).unwrap();
        g.value(out)
            .data()
            .iter()
            .zip(weights.data())
            .map(|(a, b)| a * b)
            .sum()
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.variable(t.clone())).collect();
    let out = build(&mut g, &vars).unwrap();
    let w = g.constant(weights.clone());
    let prod = g.mul(out, w).unwrap();
    let loss = g.sum_all(prod);
    let grads = g.backward(loss).unwrap();

    let mut worst: f64 = 0.0;
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads
            .get(*v)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; inputs[i].numel()]);
        let numeric = finite_diff(&inputs[i], STEP, |x| {
            let mut ts = inputs.clone();
            ts[i] = x.clone();
            eval(&ts)
        });
        let err = relative_error(&analytic, numeric.data());
        assert!(err < tol, "input {i}: relative error {err:e} exceeds {tol:e}");
        worst = worst.max(err);
    }
    worst
}

fn rand(shape: &[usize], seed: u64) -> Tensor {
    Tensor::randn(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn positive(shape: &[usize], seed: u64) -> Tensor {
    let mut t = rand(shape, seed);
    t.data_mut().iter_mut().for_each(|x| *x = x.abs() + 0.5);
    t
}

#[test]
fn matmul_gradient() {
    grad_check(vec![rand(&[3, 4], 1), rand(&[4, 2], 2)], 1e-6, |g, v| g.matmul(v[0], v[1]));
    grad_check(vec![rand(&[1, 5], 3), rand(&[5, 6], 4)], 1e-6, |g, v| g.matmul(v[0], v[1]));
}

#[test]
fn elementwise_gradients() {
    for shape in [&[2, 3][..], &[5][..]] {
        let (a, b) = (rand(shape, 5), rand(shape, 6));
        grad_check(vec![a.clone(), b.clone()], 1e-6, |g, v| g.add(v[0], v[1]));
        grad_check(vec![a.clone(), b.clone()], 1e-6, |g, v| g.sub(v[0], v[1]));
        grad_check(vec![a.clone(), b.clone()], 1e-6, |g, v| g.mul(v[0], v[1]));
        grad_check(vec![a.clone()], 1e-6, |g, v| Ok(g.scale(v[0], -2.5)));
        grad_check(vec![a.clone()], 1e-6, |g, v| Ok(g.add_scalar(v[0], 0.7)));
        grad_check(vec![a.clone()], 1e-6, |g, v| Ok(g.gelu(v[0])));
        grad_check(vec![a.clone()], 1e-6, |g, v| Ok(g.exp(v[0])));
        grad_check(vec![positive(shape, 7)], 1e-6, |g, v| Ok(g.log(v[0])));
    }
}

#[test]
fn bias_and_reductions() {
    for (r, c) in [(3, 4), (1, 7)] {
        grad_check(vec![rand(&[r, c], 8), rand(&[c], 9)], 1e-6, |g, v| g.add_bias(v[0], v[1]));
        grad_check(vec![rand(&[r, c], 10)], 1e-6, |g, v| g.mean_axis(v[0], 0));
        grad_check(vec![rand(&[r, c], 11)], 1e-6, |g, v| g.mean_axis(v[0], 1));
        grad_check(vec![rand(&[r, c], 12)], 1e-6, |g, v| g.sum_axis(v[0], 1));
        grad_check(vec![rand(&[r, c], 13)], 1e-6, |g, v| Ok(g.mean_all(v[0])));
    }
}

#[test]
fn layer_norm_gradient() {
    for shape in [&[2, 5][..], &[4, 3][..]] {
        let d = shape[1];
        grad_check(
            vec![rand(shape, 14), rand(&[d], 15), rand(&[d], 16)],
            1e-6,
            |g, v| g.layer_norm(v[0], v[1], v[2], 1e-5),
        );
    }
}

#[test]
fn softmax_and_normalize_gradients() {
    for shape in [&[2, 5][..], &[3, 3][..]] {
        grad_check(vec![rand(shape, 17)], 1e-6, |g, v| g.softmax(v[0]));
        grad_check(vec![rand(shape, 18)], 1e-6, |g, v| g.l2_normalize(v[0]));
    }
    grad_check(vec![rand(&[4], 19), rand(&[4], 20)], 1e-6, |g, v| g.cosine_sim(v[0], v[1]));
}

#[test]
fn cross_entropy_gradient() {
    grad_check(vec![rand(&[3, 5], 21)], 1e-6, |g, v| {
        g.cross_entropy(v[0], &[0, 4, 2], Reduction::Mean)
    });
    grad_check(vec![rand(&[2, 7], 22)], 1e-6, |g, v| {
        g.cross_entropy(v[0], &[6, 6], Reduction::Sum)
    });
}

#[test]
fn structural_gradients() {
    grad_check(vec![rand(&[3, 4], 23)], 1e-6, |g, v| g.transpose(v[0]));
    grad_check(vec![rand(&[3, 4], 24)], 1e-6, |g, v| g.reshape(v[0], &[2, 6]));
    grad_check(vec![rand(&[2, 3], 25), rand(&[4, 3], 26)], 1e-6, |g, v| {
        g.concat_rows(&[v[0], v[1], v[0]])
    });
    grad_check(vec![rand(&[5, 3], 27)], 1e-6, |g, v| g.embedding(v[0], &[4, 0, 4, 2]));
    grad_check(vec![rand(&[6, 2], 28)], 1e-6, |g, v| {
        g.segment_mean(v[0], &[(0, 2), (2, 3), (5, 1)])
    });
    grad_check(vec![rand(&[3, 8], 29)], 1e-6, |g, v| g.rope(v[0], &[0, 5, 17], 2, 10_000.0));
}

#[test]
fn attention_gradient() {
    let segs = [
        AttnSegment { q_start: 0, q_len: 3, k_start: 0, k_len: 3 },
        AttnSegment { q_start: 3, q_len: 2, k_start: 3, k_len: 4 },
    ];
    grad_check(
        vec![rand(&[5, 8], 30), rand(&[7, 8], 31), rand(&[7, 8], 32)],
        1e-6,
        |g, v| g.attention(v[0], v[1], v[2], 2, &segs),
    );
    let single = [AttnSegment { q_start: 0, q_len: 4, k_start: 0, k_len: 4 }];
    grad_check(
        vec![rand(&[4, 4], 33), rand(&[4, 4], 34), rand(&[4, 4], 35)],
        1e-6,
        |g, v| g.attention(v[0], v[1], v[2], 1, &single),
    );
}

#[test]
fn two_consumers_accumulate() {
    // y = x·x + 3x for a scalar x = 2: dy/dx = 2x + 3 = 7.
    let mut g = Graph::new();
    let x = g.variable(Tensor::scalar(2.0));
    let sq = g.mul(x, x).unwrap();
    let lin = g.scale(x, 3.0);
    let y = g.add(sq, lin).unwrap();
    let grads = g.backward(y).unwrap();
    assert_eq!(grads.get(x).unwrap(), &[7.0]);
}

#[test]
fn shared_param_binds_once() {
    let mut store = ParamStore::new();
    let id = store.add("w", Tensor::vector(vec![1.5, -2.0]));
    let mut g = Graph::new();
    let a = g.param(&store, id);
    let b = g.param(&store, id);
    assert_eq!(a, b);
    let s = g.add(a, b).unwrap();
    let loss = g.sum_all(s);
    let grads = g.backward(loss).unwrap();
    assert_eq!(grads.param(&store, id).unwrap(), &[2.0, 2.0]);
}

#[test]
fn frozen_param_gets_no_gradient() {
    let mut store = ParamStore::new();
    let id = store.add("w", Tensor::vector(vec![1.0, 2.0]));
    store.set_trainable(id, false);
    let mut g = Graph::new();
    let w = g.param(&store, id);
    let x = g.variable(Tensor::vector(vec![3.0, 4.0]));
    let p = g.mul(w, x).unwrap();
    let loss = g.sum_all(p);
    let grads = g.backward(loss).unwrap();
    assert!(grads.param(&store, id).is_none());
    assert_eq!(grads.get(x).unwrap(), &[1.0, 2.0]);
}

#[test]
fn layer_norm_examples() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::vector(vec![1.0, 1.0, 1.0]));
    let gain = g.constant(Tensor::full(&[3], 1.0));
    let bias = g.constant(Tensor::zeros(&[3]));
    let y = g.layer_norm(x, gain, bias, 1e-5).unwrap();
    assert_eq!(g.value(y).data(), &[0.0, 0.0, 0.0]);

    let x = g.constant(Tensor::vector(vec![-1.0, 1.0]));
    let gain = g.constant(Tensor::full(&[2], 1.0));
    let bias = g.constant(Tensor::zeros(&[2]));
    let y = g.layer_norm(x, gain, bias, 0.0).unwrap();
    assert_eq!(g.value(y).data(), &[-1.0, 1.0]);
}

#[test]
fn softmax_examples() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::vector(vec![0.0, 0.0, 0.0]));
    let y = g.softmax(x).unwrap();
    for p in g.value(y).data() {
        assert!((p - 1.0 / 3.0).abs() < 1e-15);
    }
    let x = g.constant(Tensor::vector(vec![1e4, 0.0]));
    let y = g.softmax(x).unwrap();
    assert!(g.value(y).is_finite());
    assert_eq!(g.value(y).data()[0], 1.0);
}

#[test]
fn cross_entropy_examples() {
    let mut g = Graph::new();
    let logits = g.constant(Tensor::zeros(&[2, 4]));
    let l = g.cross_entropy(logits, &[1, 3], Reduction::Mean).unwrap();
    assert!((g.value(l).data()[0] - 4f64.ln()).abs() < 1e-15);

    let mut prev = f64::INFINITY;
    for mag in [1.0, 10.0, 100.0] {
        let logits = g.constant(Tensor::vector(vec![mag, 0.0, 0.0]).reshape(vec![1, 3]).unwrap());
        let l = g.cross_entropy(logits, &[0], Reduction::Sum).unwrap();
        let v = g.value(l).data()[0];
        assert!(v < prev);
        prev = v;
    }
    assert!(prev < 1e-40);

    let logits = g.constant(Tensor::zeros(&[1, 4]));
    assert!(matches!(
        g.cross_entropy(logits, &[4], Reduction::Mean),
        Err(Error::Index(_))
    ));
}

#[test]
fn cross_entropy_matches_direct_sum() {
    let t = rand(&[3, 5], 40);
    let targets = [2, 0, 4];
    let mut oracle = 0.0;
    for (r, &tgt) in targets.iter().enumerate() {
        let row = t.row(r);
        let z: f64 = row.iter().map(|x| x.exp()).sum();
        oracle += -(row[tgt].exp() / z).ln();
    }
    let mut g = Graph::new();
    let x = g.constant(t);
    let s = g.cross_entropy(x, &targets, Reduction::Sum).unwrap();
    let m = g.cross_entropy(x, &targets, Reduction::Mean).unwrap();
    assert!((g.value(s).data()[0] - oracle).abs() < 1e-12);
    assert!((g.value(m).data()[0] - oracle / 3.0).abs() < 1e-12);
}

#[test]
fn f32_mode_rounds_outputs() {
    let mut g = Graph::new().with_precision(Precision::F32);
    let x = g.constant(Tensor::scalar(0.1));
    let y = g.scale(x, 1.0);
    assert_eq!(g.value(y).data()[0], 0.1f32 as f64);
}

#[test]
fn deterministic_forward() {
    let run = || {
        let mut g = Graph::new();
        let a = g.constant(rand(&[6, 8], 50));
        let b = g.constant(rand(&[8, 8], 51));
        let c = g.matmul(a, b).unwrap();
        let s = g.softmax(c).unwrap();
        g.value(s).clone()
    };
    assert_eq!(run(), run());
}
