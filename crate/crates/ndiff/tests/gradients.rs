use ndiff::{finite_diff_check, grad_of, log_sum_exp, Graph, NodeId, Params, Result, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const STEP: f64 = 1e-5;
const TOL: f64 = 1e-4;
const SEEDS: u64 = 20;

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Values bounded away from zero so that kinked primitives are smooth near them.
fn random_off_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.random_range(0.1..1.0);
            if rng.random_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// A fixed random weighting keeps the reduction to a scalar non-degenerate.
fn weighted_sum(g: &mut Graph, x: NodeId, seed: u64) -> Result<NodeId> {
    let shape = g.value(x).shape().to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xa5a5);
    let w = g.constant(random(&mut rng, &shape));
    let a = g.sq_l2_distance(x, w)?;
    let b = g.sum(x)?;
    g.add(a, b)
}

fn check<F>(name: &str, build: F, params: impl Fn(&mut ChaCha8Rng) -> Params)
where
    F: Fn(&mut Graph, &Params, u64) -> Result<NodeId>,
{
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = params(&mut rng);
        let r = finite_diff_check(|g, p| build(g, p, seed), &p, STEP).unwrap();
        assert!(r.max_rel_error < TOL, "{name} seed {seed}: {r:?}");
    }
}

fn reg(g: &mut Graph, p: &Params, name: &str) -> Result<NodeId> {
    g.register(name, p.get(name)?.clone())
}

fn params(entries: &[(&str, Tensor)]) -> Params {
    let mut p = Params::new();
    for (n, t) in entries {
        p.insert(*n, t.clone());
    }
    p
}

#[test]
fn matmul_matrix_and_vector() {
    check(
        "matmul",
        |g, p, s| {
            let a = reg(g, p, "a")?;
            let b = reg(g, p, "b")?;
            let v = reg(g, p, "v")?;
            let ab = g.matmul(a, b)?;
            let av = g.matmul(a, v)?;
            let l1 = weighted_sum(g, ab, s)?;
            let l2 = weighted_sum(g, av, s + 1)?;
            g.add(l1, l2)
        },
        |r| params(&[("a", random(r, &[3, 4])), ("b", random(r, &[4, 5])), ("v", random(r, &[4]))]),
    );
}

#[test]
fn add_add_many_bias_scale_shift() {
    check(
        "elementwise",
        |g, p, s| {
            let x = reg(g, p, "x")?;
            let y = reg(g, p, "y")?;
            let b = reg(g, p, "b")?;
            let s1 = g.add(x, y)?;
            let s2 = g.add_many(&[x, y, s1])?;
            let s3 = g.add_bias(s2, b)?;
            let s4 = g.scale(s3, -1.7)?;
            let s5 = g.shift(s4, 0.3)?;
            weighted_sum(g, s5, s)
        },
        |r| params(&[("x", random(r, &[3, 4])), ("y", random(r, &[3, 4])), ("b", random(r, &[4]))]),
    );
}

#[test]
fn transpose_slice_concat_cols() {
    check(
        "layout",
        |g, p, s| {
            let x = reg(g, p, "x")?;
            let t = g.transpose(x)?;
            let left = g.slice_cols(t, 0, 2)?;
            let right = g.slice_cols(t, 2, 1)?;
            let c = g.concat_cols(&[right, left, right])?;
            weighted_sum(g, c, s)
        },
        |r| params(&[("x", random(r, &[3, 5]))]),
    );
}

#[test]
fn softmax_rows() {
    check(
        "softmax_rows",
        |g, p, s| {
            let x = reg(g, p, "x")?;
            let y = g.softmax_rows(x)?;
            weighted_sum(g, y, s)
        },
        |r| params(&[("x", random(r, &[4, 6]))]),
    );
}

#[test]
fn layer_norm() {
    check(
        "layer_norm",
        |g, p, s| {
            let x = reg(g, p, "x")?;
            let gain = reg(g, p, "gain")?;
            let bias = reg(g, p, "bias")?;
            let y = g.layer_norm(x, gain, bias, 1e-5)?;
            weighted_sum(g, y, s)
        },
        |r| {
            params(&[
                ("x", random(r, &[4, 8])),
                ("gain", random(r, &[8])),
                ("bias", random(r, &[8])),
            ])
        },
    );
}

#[test]
fn layer_norm_then_sum() {
    check(
        "layer_norm_sum",
        |g, p, _| {
            let x = reg(g, p, "x")?;
            let gain = reg(g, p, "gain")?;
            let bias = reg(g, p, "bias")?;
            let y = g.layer_norm(x, gain, bias, 1e-5)?;
            g.sum(y)
        },
        |r| {
            params(&[
                ("x", random(r, &[4, 8])),
                ("gain", Tensor::vector(vec![1.0; 8])),
                ("bias", Tensor::vector(vec![0.0; 8])),
            ])
        },
    );
}

#[test]
fn gelu_and_relu() {
    check(
        "activations",
        |g, p, s| {
            let x = reg(g, p, "x")?;
            let a = g.gelu(x)?;
            let b = g.relu(x)?;
            let c = g.add(a, b)?;
            weighted_sum(g, c, s)
        },
        |r| params(&[("x", random_off_zero(r, &[3, 5]))]),
    );
}

#[test]
fn concat_vectors_and_mean_over_indices() {
    check(
        "pooling",
        |g, p, s| {
            let x = reg(g, p, "x")?;
            let a = g.mean_over_indices(x, &[0, 2])?;
            let b = g.mean_over_indices(x, &[1])?;
            let c = g.mean_over_indices(x, &[3, 1, 2])?;
            let h = g.concat(&[a, b, c])?;
            weighted_sum(g, h, s)
        },
        |r| params(&[("x", random(r, &[4, 3]))]),
    );
}

#[test]
fn gather_and_replace_rows() {
    check(
        "rows",
        |g, p, s| {
            let table = reg(g, p, "table")?;
            let m = reg(g, p, "m")?;
            let x = g.gather_rows(table, &[0, 3, 3, 1])?;
            let y = g.replace_rows(x, m, &[1, 3])?;
            weighted_sum(g, y, s)
        },
        |r| params(&[("table", random(r, &[5, 3])), ("m", random(r, &[3]))]),
    );
}

#[test]
fn squared_distance_lse_cross_entropy() {
    check(
        "reductions",
        |g, p, _| {
            let a = reg(g, p, "a")?;
            let b = reg(g, p, "b")?;
            let d = g.sq_l2_distance(a, b)?;
            let l = g.log_sum_exp(a)?;
            let ce = g.cross_entropy(b, 2)?;
            g.add_many(&[d, l, ce])
        },
        |r| params(&[("a", random(r, &[5])), ("b", random(r, &[5]))]),
    );
}

#[test]
fn softmax_sum_gradient_is_zero() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut g = Graph::new();
    let z = g.register("z", random(&mut rng, &[3, 7])).unwrap();
    let s = g.softmax_rows(z).unwrap();
    let total = g.sum(s).unwrap();
    let grads = grad_of(total, &g).unwrap();
    assert!(grads["z"].data().iter().all(|v| v.abs() < 1e-12));
}

#[test]
fn square_gradient_is_six_at_three() {
    let mut g = Graph::new();
    let x = g.register("x", Tensor::matrix(1, 1, vec![3.0]).unwrap()).unwrap();
    let xx = g.matmul(x, x).unwrap();
    let loss = g.sum(xx).unwrap();
    assert_eq!(g.scalar(loss).unwrap(), 9.0);
    assert_eq!(grad_of(loss, &g).unwrap()["x"].data(), &[6.0]);
}

#[test]
fn forward_is_bit_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut g = Graph::new();
        let x = g.register("x", random(&mut rng, &[4, 8])).unwrap();
        let w = g.register("w", random(&mut rng, &[8, 8])).unwrap();
        let gain = g.constant(Tensor::vector(vec![1.0; 8]));
        let bias = g.constant(Tensor::vector(vec![0.0; 8]));
        let h = g.matmul(x, w).unwrap();
        let h = g.gelu(h).unwrap();
        let h = g.layer_norm(h, gain, bias, 1e-5).unwrap();
        let h = g.softmax_rows(h).unwrap();
        let loss = g.sum(h).unwrap();
        (g.value(h).clone(), grad_of(loss, &g).unwrap())
    };
    let (a, ga) = run();
    let (b, gb) = run();
    assert_eq!(a, b);
    assert_eq!(ga, gb);
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(rows in proptest::collection::vec(
        proptest::collection::vec(-50.0f64..50.0, 5), 1..6)) {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_rows(&rows).unwrap());
        let y = g.softmax_rows(x).unwrap();
        for r in 0..rows.len() {
            let s: f64 = g.value(y).row(r).iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn log_sum_exp_is_shift_stable(z in proptest::collection::vec(-30.0f64..30.0, 1..10),
                                   c in -500.0f64..500.0) {
        let shifted: Vec<f64> = z.iter().map(|v| v + c).collect();
        let lhs = log_sum_exp(&shifted);
        let rhs = log_sum_exp(&z) + c;
        prop_assert!((lhs - rhs).abs() < 1e-10 * rhs.abs().max(1.0));
    }
}

#[test]
fn mean_over_indices_gradient_matches_central_differences() {
    let x0 = Tensor::matrix(3, 2, vec![1., 2., 3., 4., 5., 6.]).unwrap();
    let mut g = Graph::new();
    let x = g.register("x", x0.clone()).unwrap();
    let m = g.mean_over_indices(x, &[0, 2]).unwrap();
    let loss = g.sum(m).unwrap();
    let analytic = grad_of(loss, &g).unwrap()["x"].clone();

    let f = |t: &Tensor| -> f64 {
        let rows = [t.row(0), t.row(2)];
        (0..2).map(|j| (rows[0][j] + rows[1][j]) / 2.0).sum()
    };
    let h = 1e-5;
    for i in 0..6 {
        let mut up = x0.clone();
        up.data_mut()[i] += h;
        let mut down = x0.clone();
        down.data_mut()[i] -= h;
        let numeric = (f(&up) - f(&down)) / (2.0 * h);
        assert!((numeric - analytic.data()[i]).abs() < 1e-8);
    }
    assert_eq!(analytic.data(), &[0.5, 0.5, 0.0, 0.0, 0.5, 0.5]);
}
