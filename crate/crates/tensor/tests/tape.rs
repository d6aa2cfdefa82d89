use omdet_tensor::{gradient_check, Primitive, Tape, Tensor, TensorError, NORM_EPS};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn randn(seed: u64, shape: &[usize]) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| StandardNormal.sample(&mut rng)).collect()).unwrap()
}

#[test]
fn grad_of_sum_of_squares() {
    let mut t = Tape::<f64>::new();
    let x = t.param(Tensor::from_f64(vec![3], &[1.0, 2.0, 3.0]).unwrap());
    let y = t.mul(x, x).unwrap();
    let s = t.sum(y).unwrap();
    let g = t.backward(s).unwrap();
    assert_eq!(g.get(x).unwrap(), &[2.0f64, 4.0, 6.0]);
}

#[test]
fn grad_of_matmul_sum_is_ones_times_b_transposed() {
    let a = randn(1, &[3, 4]);
    let b = randn(2, &[4, 5]);
    let mut t = Tape::<f64>::new();
    let av = t.param(a.clone());
    let bv = t.param(b.clone());
    let c = t.matmul(av, bv).unwrap();
    let s = t.sum(c).unwrap();
    let g = t.backward(s).unwrap();
    // (ones[3x5] · Bᵀ)[i][j] = Σ_n B[j][n]
    let row_sums: Vec<f64> = (0..4).map(|j| (0..5).map(|n| b.at(&[j, n])).sum()).collect();
    let ga = g.get(av).unwrap();
    for i in 0..3 {
        for j in 0..4 {
            assert!((ga[i * 4 + j] - row_sums[j]).abs() < 1e-12);
        }
    }
    let err = gradient_check(
        |t, x| {
            let bv = t.constant(b.clone());
            let c = t.matmul(x, bv)?;
            t.sum(c)
        },
        &a,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-9, "{err}");
}

#[test]
fn constants_are_absent_from_gradients() {
    let mut t = Tape::<f64>::new();
    let x = t.param(Tensor::from_f64(vec![2], &[1.0, 2.0]).unwrap());
    let c = t.constant(Tensor::from_f64(vec![2], &[3.0, 4.0]).unwrap());
    let y = t.mul(x, c).unwrap();
    let s = t.sum(y).unwrap();
    let g = t.backward(s).unwrap();
    assert!(g.contains(x));
    assert!(!g.contains(c));
    assert_eq!(g.len(), 1);
}

#[test]
fn unused_param_gets_no_gradient() {
    let mut t = Tape::<f64>::new();
    let x = t.param(Tensor::<f64>::from_f64(vec![2], &[1.0, 2.0]).unwrap());
    let unused = t.param(Tensor::<f64>::zeros(vec![2]));
    let s = t.sum(x).unwrap();
    let g = t.backward(s).unwrap();
    assert!(g.get(unused).is_none());
}

#[test]
fn backward_usage_errors() {
    let mut t = Tape::<f64>::new();
    let x = t.param(Tensor::zeros(vec![3]));
    assert!(matches!(t.backward(x), Err(TensorError::Usage(_))));
    let mut other = Tape::<f64>::new();
    let y = other.param(Tensor::zeros(vec![1]));
    assert!(matches!(t.backward(y), Err(TensorError::Usage(_))));
    assert!(matches!(t.add(x, y), Err(TensorError::Usage(_))));
}

#[test]
fn shape_errors_name_the_primitive() {
    let mut t = Tape::<f64>::new();
    let a = t.constant(Tensor::zeros(vec![2, 3]));
    let b = t.constant(Tensor::zeros(vec![2, 3]));
    let err = t.matmul(a, b).unwrap_err().to_string();
    assert!(err.contains("matmul") && err.contains("[2, 3]"), "{err}");
    let err = t.apply(&Primitive::Concat { axis: 2 }, &[a, b]).unwrap_err().to_string();
    assert!(err.contains("concat"), "{err}");
}

#[test]
fn non_finite_outputs_are_rejected() {
    let mut t = Tape::<f64>::new();
    let a = t.constant(Tensor::from_f64(vec![1], &[1.0]).unwrap());
    let z = t.constant(Tensor::zeros(vec![1]));
    assert!(matches!(t.div(a, z), Err(TensorError::NonFinite { op: "div" })));
    let big = t.constant(Tensor::from_f64(vec![1], &[1000.0]).unwrap());
    assert!(matches!(t.exp(big), Err(TensorError::NonFinite { .. })));
}

#[test]
fn softmax_of_equal_logits_is_uniform() {
    let mut t = Tape::<f64>::new();
    let x = t.constant(Tensor::zeros(vec![2]));
    let y = t.softmax(x).unwrap();
    assert_eq!(t.value(y).data(), &[0.5, 0.5]);
}

#[test]
fn identity_matmul() {
    let a = randn(3, &[3, 3]);
    let mut t = Tape::<f64>::new();
    let i = t.constant(Tensor::eye(3));
    let av = t.constant(a.clone());
    let y = t.matmul(i, av).unwrap();
    assert_eq!(t.value(y).data(), a.data());
}

#[test]
fn cosine_self_similarity_is_one() {
    let u = randn(4, &[3, 7]);
    let mut t = Tape::<f64>::new();
    let a = t.constant(u.clone());
    let b = t.constant(u);
    let c = t.cosine_similarity(a, b).unwrap();
    for i in 0..3 {
        assert!((t.value(c).at(&[i, i]) - 1.0).abs() < 1e-12);
    }
}

#[test]
fn gradient_check_examples() {
    let x = randn(5, &[10]);
    let err = gradient_check(
        |t, x| {
            let y = t.sigmoid(x)?;
            t.sum(y)
        },
        &x,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-6, "sigmoid {err}");

    let x = randn(6, &[3, 8]);
    let (g, b) = (randn(7, &[8]), randn(8, &[8]));
    let w = randn(9, &[3, 8]);
    let err = gradient_check(
        |t, x| {
            let (g, b, w) = (t.constant(g.clone()), t.constant(b.clone()), t.constant(w.clone()));
            let y = t.layer_norm(x, g, b)?;
            // A plain sum of a layer norm has zero gradient; weight it.
            let y = t.mul(y, w)?;
            t.sum(y)
        },
        &x,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-5, "layer_norm {err}");

    let a = randn(10, &[4, 6]);
    let err = gradient_check(
        |t, x| {
            let a = t.constant(a.clone());
            let y = t.matmul(a, x)?;
            let y = t.affine(y, 2.5, -1.0)?;
            t.sum(y)
        },
        &randn(11, &[6, 2]),
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-9, "linear {err}");
}

#[test]
fn gradient_check_rejects_non_finite_point() {
    let x = Tensor::from_f64(vec![1], &[0.0]).unwrap();
    let r = gradient_check(
        |t, x| {
            let one = t.constant(Tensor::from_f64(vec![1], &[1.0])?);
            let y = t.div(one, x)?;
            t.sum(y)
        },
        &x,
        1e-5,
    );
    assert!(matches!(r, Err(TensorError::NonFinite { .. })));
}

#[test]
fn layer_norm_uses_documented_epsilon() {
    let mut t = Tape::<f64>::new();
    let x = t.constant(Tensor::from_f64(vec![2], &[1.0, -1.0]).unwrap());
    let g = t.constant(Tensor::full(vec![2], 1.0));
    let b = t.constant(Tensor::zeros(vec![2]));
    let y = t.layer_norm(x, g, b).unwrap();
    let expect = 1.0 / (1.0 + NORM_EPS).sqrt();
    assert!((t.value(y).data()[0] - expect).abs() < 1e-15);
}

/// A small network touching most primitives, run twice.
fn replay(seed: u64) -> (Vec<f32>, Vec<Vec<f32>>) {
    let x = randn(seed, &[2, 8, 8]).cast::<f32>();
    let w = randn(seed + 1, &[4, 2, 3, 3]).cast::<f32>();
    let lw = randn(seed + 2, &[3, 16]).cast::<f32>();
    let mut t = Tape::<f32>::new();
    let (xv, wv, lv) = (t.param(x), t.param(w), t.param(lw));
    let y = t.conv2d(xv, wv, None, 2, 1).unwrap();
    let y = t.gelu(y).unwrap();
    let y = t.reshape(y, &[4, 16]).unwrap();
    let y = t.linear(y, lv, None).unwrap();
    let y = t.softmax(y).unwrap();
    let s = t.sum(y).unwrap();
    let s = t.scale(s, 0.5).unwrap();
    let y2 = t.tanh(y).unwrap();
    let s2 = t.mean(y2).unwrap();
    let total = t.add(s, s2).unwrap();
    let g = t.backward(total).unwrap();
    (t.value(y).data().to_vec(), [xv, wv, lv].iter().map(|v| g.get(*v).unwrap().to_vec()).collect())
}

#[test]
fn tape_replay_is_bitwise_deterministic() {
    let a = replay(42);
    let b = replay(42);
    assert_eq!(a.0.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.0.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    for (ga, gb) in a.1.iter().zip(&b.1) {
        assert!(ga.iter().zip(gb).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}

proptest! {
    #[test]
    fn broadcast_add_matches_manual(rows in 1usize..5, cols in 1usize..5, seed in 0u64..1000) {
        let a = randn(seed, &[rows, cols]);
        let b = randn(seed + 7, &[cols]);
        let mut t = Tape::<f64>::new();
        let (av, bv) = (t.constant(a.clone()), t.constant(b.clone()));
        let y = t.add(av, bv).unwrap();
        for r in 0..rows {
            for c in 0..cols {
                prop_assert_eq!(t.value(y).at(&[r, c]), a.at(&[r, c]) + b.at(&[c]));
            }
        }
    }

    #[test]
    fn permute_round_trips(seed in 0u64..1000) {
        let a = randn(seed, &[2, 3, 4]);
        let mut t = Tape::<f64>::new();
        let av = t.constant(a.clone());
        let p = t.permute(av, &[2, 0, 1]).unwrap();
        let back = t.permute(p, &[1, 2, 0]).unwrap();
        prop_assert_eq!(t.value(back).data(), a.data());
    }
}
