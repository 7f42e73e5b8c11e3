use super::*;
use crate::error::LabError;
use crate::gradcheck;
use crate::rng::RngState;

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape, data.to_vec()).unwrap()
}

fn rand(shape: &[usize], seed: u64) -> Tensor {
    Tensor::randn(shape, 1.0, &mut RngState::new(seed))
}

/// Weighted sum so that every output element gets a distinct upstream gradient.
fn weighted_sum(g: &mut Graph, y: Var, seed: u64) -> Result<Var, LabError> {
    let w = rand(g.shape(y), seed ^ 0xabc);
    let wv = g.leaf(&w);
    let p = g.mul(y, wv)?;
    Ok(g.sum(p))
}

/// Power series for erf; independent of libm.
fn erf_series(x: f64) -> f64 {
    let mut term = x;
    let mut total = x;
    for n in 1..80 {
        term *= -x * x / n as f64;
        total += term / (2 * n + 1) as f64;
    }
    total * 2.0 / std::f64::consts::PI.sqrt()
}

#[test]
fn matmul_examples() {
    let mut g = Graph::new();
    let i2 = g.leaf(&t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
    let m = g.leaf(&t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
    let p = g.matmul(i2, m).unwrap();
    assert_eq!(g.value(p), &[1.0, 2.0, 3.0, 4.0]);

    let a = g.leaf(&t(&[1, 2], &[1.0, 2.0]));
    let b = g.leaf(&t(&[2, 1], &[3.0, 4.0]));
    let d = g.matmul(a, b).unwrap();
    assert_eq!(g.shape(d), &[1, 1]);
    assert_eq!(g.value(d), &[11.0]);
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let mut g = Graph::new();
    let a = g.leaf(&Tensor::zeros(&[2, 3]));
    let b = g.leaf(&Tensor::zeros(&[2, 3]));
    match g.matmul(a, b) {
        Err(LabError::Dimension { lhs, rhs, .. }) => {
            assert_eq!(lhs, vec![2, 3]);
            assert_eq!(rhs, vec![2, 3]);
        }
        other => panic!("expected dimension error, got {other:?}"),
    }
}

#[test]
fn matmul_gradient_matches_finite_differences() {
    let params = [rand(&[3, 4], 1), rand(&[4, 2], 2)];
    let r = gradcheck::check(&params, 1e-5, |g, v| {
        let c = g.matmul(v[0], v[1])?;
        Ok(g.sum(c))
    })
    .unwrap();
    assert!(r.max_rel_err < 1e-6, "{r:?}");
}

#[test]
fn conv1d_examples() {
    let mut g = Graph::new();
    let x = rand(&[3, 7], 5);
    let xv = g.leaf(&x);
    let mut w = Tensor::zeros(&[3, 3, 1]);
    for c in 0..3 {
        w.data_mut()[c * 3 + c] = 1.0;
    }
    let wv = g.leaf(&w);
    let y = g.conv1d(xv, wv, 1).unwrap();
    assert_eq!(g.value(y), x.data());

    let ones = g.leaf(&Tensor::filled(&[1, 5], 1.0));
    let boxk = g.leaf(&Tensor::filled(&[1, 1, 3], 1.0));
    let y = g.conv1d(ones, boxk, 1).unwrap();
    assert_eq!(g.value(y), &[2.0, 3.0, 3.0, 3.0, 2.0]);
}

#[test]
fn conv_even_kernel_is_config_error() {
    let mut g = Graph::new();
    let x = g.leaf(&Tensor::zeros(&[1, 5]));
    let w = g.leaf(&Tensor::zeros(&[1, 1, 2]));
    assert!(matches!(g.conv1d(x, w, 1), Err(LabError::Config(_))));
    let x2 = g.leaf(&Tensor::zeros(&[1, 4, 4]));
    let w2 = g.leaf(&Tensor::zeros(&[1, 1, 2, 2]));
    assert!(matches!(g.conv2d(x2, w2, 1), Err(LabError::Config(_))));
}

#[test]
fn conv1d_dilation_preserves_length_and_gradients() {
    for (shape, k, dil) in [([2, 8], 3, 1), ([3, 11], 3, 2), ([1, 9], 5, 2)] {
        let params = [rand(&shape, 10), rand(&[4, shape[0], k], 11)];
        let r = gradcheck::check(&params, 1e-5, |g, v| {
            let y = g.conv1d(v[0], v[1], dil)?;
            assert_eq!(g.shape(y), &[4, shape[1]]);
            weighted_sum(g, y, 3)
        })
        .unwrap();
        assert!(r.max_rel_err < 1e-6, "{shape:?} {r:?}");
    }
}

#[test]
fn conv2d_examples_and_gradient() {
    let mut g = Graph::new();
    let x = rand(&[1, 4, 5], 3);
    let xv = g.leaf(&x);
    let w = g.leaf(&Tensor::filled(&[1, 1, 1, 1], 1.0));
    let y = g.conv2d(xv, w, 1).unwrap();
    assert_eq!(g.value(y), x.data());

    let ones = g.leaf(&Tensor::filled(&[1, 3, 3], 1.0));
    let k = g.leaf(&Tensor::filled(&[1, 1, 3, 3], 1.0));
    let y = g.conv2d(ones, k, 1).unwrap();
    assert_eq!(g.value(y)[4], 9.0);
    assert_eq!(g.value(y)[0], 4.0);

    for shape in [[2, 3, 4], [1, 5, 5], [3, 2, 6]] {
        let params = [rand(&shape, 20), rand(&[2, shape[0], 3, 3], 21)];
        let r = gradcheck::check(&params, 1e-5, |g, v| {
            let y = g.conv2d(v[0], v[1], 1)?;
            weighted_sum(g, y, 4)
        })
        .unwrap();
        assert!(r.max_rel_err < 1e-6, "{shape:?} {r:?}");
    }
}

#[test]
fn gelu_values_and_derivative() {
    let mut g = Graph::new();
    let x = g.leaf(&t(&[3], &[0.0, 3.0, -1.0]).with_requires_grad(true));
    let y = g.gelu(x);
    assert_eq!(g.value(y)[0], 0.0);
    let oracle = 3.0 * 0.5 * (1.0 + erf_series(3.0 / 2f64.sqrt()));
    assert!((oracle - 2.99595).abs() < 1e-4);
    assert!((g.value(y)[1] - oracle).abs() < 1e-12);
    assert!((g.value(y)[1] - 2.99595).abs() < 1e-4);
    let s = g.sum(y);
    g.backward(s).unwrap();
    assert!((g.grad(x).unwrap()[0] - 0.5).abs() < 1e-15);
}

#[test]
fn layer_norm_examples_and_gradient() {
    let mut g = Graph::new();
    let gamma = g.leaf(&Tensor::filled(&[4], 1.0));
    let beta = g.leaf(&Tensor::zeros(&[4]));
    let c = g.leaf(&Tensor::filled(&[4], 2.5));
    let y = g.layer_norm(c, gamma, beta, 1e-5).unwrap();
    assert!(g.value(y).iter().all(|&v| v == 0.0));

    let gamma2 = g.leaf(&Tensor::filled(&[2], 1.0));
    let beta2 = g.leaf(&Tensor::zeros(&[2]));
    let x = g.leaf(&t(&[2], &[1.0, 3.0]));
    let y = g.layer_norm(x, gamma2, beta2, 1e-5).unwrap();
    assert!((g.value(y)[0] + 1.0).abs() < 1e-4);
    assert!((g.value(y)[1] - 1.0).abs() < 1e-4);

    for shape in [vec![2, 6], vec![3, 5], vec![2, 2, 4]] {
        let d = *shape.last().unwrap();
        let params = [rand(&shape, 30), rand(&[d], 31), rand(&[d], 32)];
        let r = gradcheck::check(&params, 1e-5, |g, v| {
            let y = g.layer_norm(v[0], v[1], v[2], 1e-5)?;
            weighted_sum(g, y, 5)
        })
        .unwrap();
        assert!(r.max_rel_err < 1e-4, "{shape:?} {r:?}");
    }
}

fn naive_attention(q: &[f64], k: &[f64], v: &[f64], h: usize, len: usize, d: usize, causal: bool) -> Vec<f64> {
    let mut out = vec![0.0; h * len * d];
    for hh in 0..h {
        for i in 0..len {
            let mut scores = vec![f64::NEG_INFINITY; len];
            for j in 0..len {
                if causal && j > i {
                    continue;
                }
                let mut s = 0.0;
                for c in 0..d {
                    s += q[(hh * len + i) * d + c] * k[(hh * len + j) * d + c];
                }
                scores[j] = s / (d as f64).sqrt();
            }
            let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = scores.iter().map(|s| (s - m).exp()).sum();
            for j in 0..len {
                let p = (scores[j] - m).exp() / z;
                for c in 0..d {
                    out[(hh * len + i) * d + c] += p * v[(hh * len + j) * d + c];
                }
            }
        }
    }
    out
}

#[test]
fn attention_single_key_returns_values() {
    let mut g = Graph::new();
    let q = g.leaf(&rand(&[2, 1, 3], 1));
    let k = g.leaf(&rand(&[2, 1, 3], 2));
    let vt = rand(&[2, 1, 3], 3);
    let v = g.leaf(&vt);
    let o = g.attention(q, k, v, false).unwrap();
    assert_eq!(g.value(o), vt.data());
}

#[test]
fn attention_identical_keys_average_values() {
    let mut g = Graph::new();
    let q = g.leaf(&rand(&[1, 4, 2], 1));
    let k = g.leaf(&Tensor::filled(&[1, 4, 2], 0.7));
    let vt = rand(&[1, 4, 2], 3);
    let v = g.leaf(&vt);
    let o = g.attention(q, k, v, false).unwrap();
    for c in 0..2 {
        let mean: f64 = (0..4).map(|j| vt.data()[j * 2 + c]).sum::<f64>() / 4.0;
        for i in 0..4 {
            assert!((g.value(o)[i * 2 + c] - mean).abs() < 1e-12);
        }
    }
}

#[test]
fn attention_matches_nested_loop_oracle() {
    for causal in [false, true] {
        let (qt, kt, vt) = (rand(&[2, 4, 3], 7), rand(&[2, 4, 3], 8), rand(&[2, 4, 3], 9));
        let mut g = Graph::new();
        let (q, k, v) = (g.leaf(&qt), g.leaf(&kt), g.leaf(&vt));
        let o = g.attention(q, k, v, causal).unwrap();
        let want = naive_attention(qt.data(), kt.data(), vt.data(), 2, 4, 3, causal);
        let diff = g
            .value(o)
            .iter()
            .zip(&want)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(diff < 1e-10, "causal={causal} diff={diff}");
    }
}

#[test]
fn attention_rows_sum_to_one_and_causal_mask_is_exact() {
    let mut g = Graph::new();
    let (q, k, v) = (
        g.leaf(&rand(&[2, 6, 4], 1)),
        g.leaf(&rand(&[2, 6, 4], 2)),
        g.leaf(&rand(&[2, 6, 4], 3)),
    );
    let o = g.attention(q, k, v, true).unwrap();
    let probs = g.attention_probs(o).expect("attention node");
    for h in 0..2 {
        for i in 0..6 {
            let row = &probs[(h * 6 + i) * 6..(h * 6 + i + 1) * 6];
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(row[i + 1..].iter().all(|&p| p == 0.0));
        }
    }
}

#[test]
fn attention_gradient_matches_finite_differences() {
    for (shape, causal) in [([2, 4, 3], false), ([1, 5, 2], true), ([3, 3, 4], false)] {
        let params = [rand(&shape, 40), rand(&shape, 41), rand(&shape, 42)];
        let r = gradcheck::check(&params, 1e-5, |g, v| {
            let o = g.attention(v[0], v[1], v[2], causal)?;
            weighted_sum(g, o, 6)
        })
        .unwrap();
        assert!(r.max_rel_err < 1e-4, "{shape:?} {r:?}");
    }
}

#[test]
fn dropout_examples() {
    let mut rng = RngState::new(9);
    let mut g = Graph::new();
    let x = g.leaf(&rand(&[10], 1));
    assert_eq!(g.dropout(x, 0.0, &mut rng, true).unwrap(), x);
    assert_eq!(g.dropout(x, 0.7, &mut rng, false).unwrap(), x);
    assert!(matches!(g.dropout(x, 1.0, &mut rng, true), Err(LabError::Config(_))));

    let ones = g.leaf(&Tensor::filled(&[100_000], 1.0));
    let y = g.dropout(ones, 0.5, &mut rng, true).unwrap();
    let mean = g.value(y).iter().sum::<f64>() / 1e5;
    assert!((0.99..=1.01).contains(&mean), "mean {mean}");
}

#[test]
fn backward_examples() {
    let x = rand(&[5], 3).with_requires_grad(true);
    let mut g = Graph::new();
    let xv = g.leaf(&x);
    let s = g.sum(xv);
    g.backward(s).unwrap();
    assert!(g.grad(xv).unwrap().iter().all(|&d| d == 1.0));

    let mut g = Graph::new();
    let xv = g.leaf(&x);
    let sq = g.mul(xv, xv).unwrap();
    let s = g.sum(sq);
    g.backward(s).unwrap();
    for (d, v) in g.grad(xv).unwrap().iter().zip(x.data()) {
        assert_eq!(*d, 2.0 * v);
    }

    let mut g = Graph::new();
    let xv = g.leaf(&x);
    assert!(matches!(g.backward(xv), Err(LabError::Contract(_))));
}

#[test]
fn frozen_leaves_receive_no_gradient() {
    let mut g = Graph::new();
    let frozen = g.leaf(&rand(&[3, 3], 1));
    let live = g.leaf(&rand(&[3, 3], 2).with_requires_grad(true));
    let y = g.matmul(frozen, live).unwrap();
    let s = g.sum(y);
    g.backward(s).unwrap();
    assert!(g.grad(frozen).is_none());
    assert!(g.grad(live).is_some());
}

#[test]
fn graph_inputs_precede_outputs() {
    let mut g = Graph::new();
    let a = g.leaf(&rand(&[2, 4], 1).with_requires_grad(true));
    let b = g.leaf(&rand(&[4, 4], 2));
    let c = g.matmul(a, b).unwrap();
    let d = g.gelu(c);
    let e = g.add(d, c).unwrap();
    let f = g.softmax(e);
    let _ = g.mean(f);
    for v in g.vars() {
        for inp in g.inputs_of(v) {
            assert!(inp < v);
        }
    }
}

#[test]
fn elementwise_and_structural_ops_gradcheck() {
    type Build = fn(&mut Graph, &[Var]) -> Result<Var, LabError>;
    let cases: Vec<(&str, Vec<Vec<usize>>, Build)> = vec![
        ("sigmoid", vec![vec![2, 3]], |g, v| Ok(g.sigmoid(v[0]))),
        ("softmax", vec![vec![3, 4]], |g, v| Ok(g.softmax(v[0]))),
        ("add_row", vec![vec![3, 4], vec![4]], |g, v| g.add_row(v[0], v[1])),
        ("add_channel", vec![vec![3, 2, 2], vec![3]], |g, v| g.add_channel(v[0], v[1])),
        ("mul_channel", vec![vec![3, 5], vec![3]], |g, v| g.mul_channel(v[0], v[1])),
        ("transpose", vec![vec![3, 5]], |g, v| g.transpose(v[0])),
        ("split_heads", vec![vec![3, 4]], |g, v| g.split_heads(v[0], 2)),
        ("merge_heads", vec![vec![2, 3, 2]], |g, v| g.merge_heads(v[0])),
        ("mean_last", vec![vec![3, 5]], |g, v| Ok(g.mean_last(v[0]))),
        ("cum_mean_last", vec![vec![3, 5]], |g, v| Ok(g.cum_mean_last(v[0]))),
        ("shift_last", vec![vec![2, 6]], |g, v| Ok(g.shift_last(v[0], 2))),
        ("avg_pool2", vec![vec![2, 4, 6]], |g, v| g.avg_pool2(v[0])),
        ("upsample2", vec![vec![2, 2, 3]], |g, v| g.upsample2(v[0])),
        ("stack_mean", vec![vec![2, 3], vec![2, 3]], |g, v| {
            let s = g.stack(&[v[0], v[1], v[0]])?;
            g.mean_leading(s)
        }),
        ("gather", vec![vec![5, 3]], |g, v| g.gather(v[0], &[4, 0, 4, 2])),
        ("mse", vec![vec![2, 5], vec![2, 5]], |g, v| g.mse(v[0], v[1])),
        ("reshape_scale", vec![vec![2, 6]], |g, v| {
            let r = g.reshape(v[0], &[3, 4])?;
            Ok(g.scale(r, -1.5))
        }),
    ];
    for (name, shapes, build) in cases {
        for seed in 0..3u64 {
            let params: Vec<Tensor> = shapes.iter().map(|s| rand(s, 100 + seed * 7 + s.len() as u64)).collect();
            let r = gradcheck::check(&params, 1e-5, |g, v| {
                let y = build(g, v)?;
                weighted_sum(g, y, seed)
            })
            .unwrap();
            assert!(r.max_rel_err < 1e-4, "{name} seed {seed}: {r:?}");
        }
    }
}

#[test]
fn replay_is_bit_identical() {
    let run = || {
        let mut rng = RngState::new(77);
        let mut g = Graph::new();
        let x = g.leaf(&Tensor::randn(&[4, 6], 1.0, &mut rng));
        let w = g.leaf(&Tensor::randn(&[6, 6], 1.0, &mut rng));
        let h = g.matmul(x, w).unwrap();
        let h = g.gelu(h);
        let h = g.dropout(h, 0.3, &mut rng, true).unwrap();
        g.tensor(h)
    };
    let (a, b) = (run(), run());
    assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
}

#[test]
fn cum_mean_and_shift_values() {
    let mut g = Graph::new();
    let x = g.leaf(&t(&[1, 4], &[2.0, 4.0, 6.0, 8.0]));
    let c = g.cum_mean_last(x);
    assert_eq!(g.value(c), &[2.0, 3.0, 4.0, 5.0]);
    let s = g.shift_last(x, 1);
    assert_eq!(g.value(s), &[0.0, 2.0, 4.0, 6.0]);
    assert_eq!(g.shift_last(x, 0), x);
}
