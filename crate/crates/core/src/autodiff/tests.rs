use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape, data.to_vec()).unwrap()
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    t(shape, &(0..n).map(|_| rng.gen_range(-2.0..2.0)).collect::<Vec<_>>())
}

#[test]
fn relu_of_negative_is_zero() {
    let g = Graph::new();
    let x = g.leaf(&Tensor::scalar(-2.0)).unwrap();
    assert_eq!(x.relu().unwrap().item().unwrap(), 0.0);
}

#[test]
fn identity_matmul_returns_operand() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = random(&[3, 3], &mut rng);
    let g = Graph::new();
    let eye = g.constant(&[3, 3], vec![1., 0., 0., 0., 1., 0., 0., 0., 1.]).unwrap();
    let out = eye.matmul(g.leaf(&a).unwrap()).unwrap();
    assert_eq!(out.value().unwrap(), a.data());
}

#[test]
fn softplus_at_zero_is_ln2() {
    let g = Graph::new();
    let y = g
        .leaf(&Tensor::scalar(0.0))
        .unwrap()
        .softplus()
        .unwrap()
        .item()
        .unwrap();
    // closed form ln(1 + e^0)
    let expected = (1.0f64 + 0.0f64.exp()).ln();
    assert!((y - expected).abs() < 1e-15);
}

#[test]
fn softplus_is_stable_for_large_inputs() {
    let g = Graph::new();
    let x = g.leaf(&t(&[3], &[800.0, -800.0, 30.0])).unwrap();
    let y = x.softplus().unwrap().value().unwrap();
    assert_eq!(y[0], 800.0);
    assert!(y[1] >= 0.0 && y[1] < 1e-300);
    assert!((y[2] - 30.0).abs() < 1e-12);
}

#[test]
fn square_gradient() {
    let g = Graph::new();
    let x = g.param(&Tensor::scalar(3.0)).unwrap();
    let loss = x.mul(x).unwrap();
    let grads = g.backward(loss).unwrap();
    assert_eq!(grads.get(x).unwrap(), &[6.0]);
}

#[test]
fn relu_mask_gradient() {
    let g = Graph::new();
    let x = g.param(&t(&[2], &[-1.0, 2.0])).unwrap();
    let loss = x.relu().unwrap().sum().unwrap();
    let grads = g.backward(loss).unwrap();
    assert_eq!(grads.get(x).unwrap(), &[0.0, 1.0]);
}

#[test]
fn two_layer_mlp_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let input = random(&[5, 4], &mut rng);
    let w1 = random(&[4, 6], &mut rng);
    let b1 = random(&[6], &mut rng);
    let w2 = random(&[6, 2], &mut rng);
    let err_w1 = grad_check(
        |g, w| {
            let x = g.leaf(&input)?;
            let b = g.leaf(&b1)?;
            let w2v = g.leaf(&w2)?;
            x.matmul(w)?.add(b)?.softplus()?.matmul(w2v)?.sigmoid()?.sum()
        },
        &w1,
        1e-5,
    )
    .unwrap();
    let err_b1 = grad_check(
        |g, b| {
            let x = g.leaf(&input)?;
            let w = g.leaf(&w1)?;
            let w2v = g.leaf(&w2)?;
            x.matmul(w)?.add(b)?.relu()?.matmul(w2v)?.sigmoid()?.sum()
        },
        &b1,
        1e-5,
    )
    .unwrap();
    let err_w2 = grad_check(
        |g, w2v| {
            let x = g.leaf(&input)?;
            let w = g.leaf(&w1)?;
            let b = g.leaf(&b1)?;
            x.matmul(w)?.add(b)?.relu()?.matmul(w2v)?.sigmoid()?.sum()
        },
        &w2,
        1e-5,
    )
    .unwrap();
    assert!(err_w1 < 1e-4, "w1 {err_w1}");
    assert!(err_b1 < 1e-4, "b1 {err_b1}");
    assert!(err_w2 < 1e-4, "w2 {err_w2}");
}

#[test]
fn grad_check_of_linear_function_is_exact() {
    let x = t(&[4], &[0.3, -1.2, 2.0, 5.0]);
    let err = grad_check(|_, v| v.sum(), &x, 1e-5).unwrap();
    assert!(err < 1e-9, "{err}");
}

#[test]
fn grad_check_of_sum_sin() {
    let x = t(&[5], &[0.1, -0.4, 1.3, 2.0, -1.9]);
    let err = grad_check(|_, v| v.sin()?.sum(), &x, 1e-5).unwrap();
    assert!(err < 1e-6, "{err}");
    // the analytic gradient is cos(x)
    let g = Graph::new();
    let v = g.param(&x).unwrap();
    let grads = g.backward(v.sin().unwrap().sum().unwrap()).unwrap();
    for (gi, xi) in grads.get(v).unwrap().iter().zip(x.data()) {
        assert!((gi - xi.cos()).abs() < 1e-15);
    }
}

#[test]
fn grad_check_rejects_non_finite_objective() {
    let x = t(&[2], &[-1.0, 1.0]);
    let err = grad_check(|_, v| v.log()?.sum(), &x, 1e-5).unwrap_err();
    assert!(matches!(err, AutodiffError::NonFinite(_)));
    assert!(grad_check(|_, v| v.sum(), &x, 0.0).is_err());
}

#[test]
fn shape_mismatch_names_op_and_shapes() {
    let g = Graph::new();
    let a = g.leaf(&Tensor::zeros(&[2, 3])).unwrap();
    let b = g.leaf(&Tensor::zeros(&[2, 3])).unwrap();
    match a.matmul(b).unwrap_err() {
        AutodiffError::ShapeMismatch { op, lhs, rhs } => {
            assert_eq!(op, "matmul");
            assert_eq!(lhs, vec![2, 3]);
            assert_eq!(rhs, vec![2, 3]);
        }
        e => panic!("{e:?}"),
    }
    let c = g.leaf(&Tensor::zeros(&[4])).unwrap();
    assert!(matches!(
        a.add(c).unwrap_err(),
        AutodiffError::ShapeMismatch { op: "add", .. }
    ));
}

#[test]
fn backward_requires_tracked_scalar() {
    let g = Graph::new();
    let x = g.param(&Tensor::zeros(&[3])).unwrap();
    assert!(matches!(g.backward(x).unwrap_err(), AutodiffError::NotScalar(_)));
    let c = g.leaf(&Tensor::scalar(1.0)).unwrap();
    assert_eq!(g.backward(c).unwrap_err(), AutodiffError::Untracked);
}

#[test]
fn second_backward_is_an_error() {
    let g = Graph::new();
    let x = g.param(&Tensor::scalar(2.0)).unwrap();
    let loss = x.exp().unwrap();
    g.backward(loss).unwrap();
    assert_eq!(g.backward(loss).unwrap_err(), AutodiffError::Consumed);
    assert_eq!(x.relu().unwrap_err(), AutodiffError::Consumed);
}

#[test]
fn cleared_graph_rejects_backward() {
    let g = Graph::new();
    let x = g.param(&Tensor::scalar(2.0)).unwrap();
    let loss = x.exp().unwrap();
    g.clear();
    assert!(g.is_empty());
    assert_eq!(g.backward(loss).unwrap_err(), AutodiffError::Cleared);
}

#[test]
fn gradients_accumulate_over_multiple_uses() {
    // f = sin(x) + x·x + 3x, each use contributes additively
    let g = Graph::new();
    let x = g.param(&Tensor::scalar(0.7)).unwrap();
    let three = g.constant(&[], vec![3.0]).unwrap();
    let loss = x
        .sin()
        .unwrap()
        .add(x.mul(x).unwrap())
        .unwrap()
        .add(x.mul(three).unwrap())
        .unwrap();
    let grads = g.backward(loss).unwrap();
    let expected = 0.7f64.cos() + 1.4 + 3.0;
    assert!((grads.get(x).unwrap()[0] - expected).abs() < 1e-15);
}

#[test]
fn gradient_of_sum_equals_sum_of_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = random(&[6], &mut rng);
    let grad_of = |which: u8| {
        let g = Graph::new();
        let v = g.param(&x).unwrap();
        let f1 = v.sin().unwrap().sum().unwrap();
        let f2 = v.mul(v).unwrap().exp().unwrap().mean().unwrap();
        let loss = match which {
            1 => f1,
            2 => f2,
            _ => f1.add(f2).unwrap(),
        };
        g.backward(loss).unwrap().take(v).unwrap()
    };
    let (a, b, both) = (grad_of(1), grad_of(2), grad_of(0));
    for i in 0..6 {
        assert!((a[i] + b[i] - both[i]).abs() < 1e-12);
    }
}

#[test]
fn untracked_leaves_get_no_gradient() {
    let g = Graph::new();
    let x = g.param(&Tensor::scalar(1.0)).unwrap();
    let c = g.leaf(&Tensor::scalar(5.0)).unwrap();
    let grads = g.backward(x.mul(c).unwrap()).unwrap();
    assert!(grads.get(c).is_none());
    assert_eq!(grads.get(x).unwrap(), &[5.0]);
}

#[test]
fn foreign_variables_are_rejected() {
    let g1 = Graph::new();
    let g2 = Graph::new();
    let a = g1.leaf(&Tensor::scalar(1.0)).unwrap();
    let b = g2.leaf(&Tensor::scalar(1.0)).unwrap();
    assert_eq!(a.add(b).unwrap_err(), AutodiffError::ForeignVar);
}

#[test]
fn structural_ops_forward_values() {
    let g = Graph::new();
    let a = g.leaf(&t(&[2, 3], &[1., 2., 3., 4., 5., 6.])).unwrap();
    assert_eq!(a.sum_axis(0).unwrap().value().unwrap(), vec![5., 7., 9.]);
    assert_eq!(a.sum_axis(1).unwrap().value().unwrap(), vec![6., 15.]);
    assert_eq!(a.slice(1, 1, 2).unwrap().value().unwrap(), vec![2., 3., 5., 6.]);
    assert_eq!(
        a.cumsum_exclusive(1).unwrap().value().unwrap(),
        vec![0., 1., 3., 0., 4., 9.]
    );
    let b = g.leaf(&t(&[2, 1], &[7., 8.])).unwrap();
    assert_eq!(
        g.concat(&[a, b], 1).unwrap().value().unwrap(),
        vec![1., 2., 3., 7., 4., 5., 6., 8.]
    );
    assert_eq!(b.broadcast_to(&[2, 2]).unwrap().value().unwrap(), vec![7., 7., 8., 8.]);
    assert_eq!(a.mean().unwrap().item().unwrap(), 3.5);
}

#[test]
fn conv2d_matches_direct_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = random(&[2, 3, 5, 6], &mut rng);
    let w = random(&[4, 3, 3, 3], &mut rng);
    let b = random(&[4], &mut rng);
    for (stride, pad) in [(1, 1), (2, 1), (1, 0)] {
        let g = Graph::new();
        let out = g
            .leaf(&x)
            .unwrap()
            .conv2d(g.leaf(&w).unwrap(), g.leaf(&b).unwrap(), stride, pad)
            .unwrap();
        let shape = out.shape().unwrap();
        let got = out.value().unwrap();
        let (ho, wo) = (shape[2], shape[3]);
        for n in 0..2 {
            for o in 0..4 {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = b.data()[o];
                        for c in 0..3 {
                            for ky in 0..3 {
                                for kx in 0..3 {
                                    let iy = (oy * stride + ky) as isize - pad as isize;
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if iy < 0 || ix < 0 || iy >= 5 || ix >= 6 {
                                        continue;
                                    }
                                    acc += w.data()[((o * 3 + c) * 3 + ky) * 3 + kx]
                                        * x.data()[((n * 3 + c) * 5 + iy as usize) * 6 + ix as usize];
                                }
                            }
                        }
                        let v = got[((n * 4 + o) * ho + oy) * wo + ox];
                        assert!((v - acc).abs() < 1e-12);
                    }
                }
            }
        }
    }
}

/// Every op against central differences on inputs drawn from [-2, 2].
#[test]
fn every_op_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    type Case = Box<dyn for<'g> Fn(&'g Graph, Var<'g>) -> Result<Var<'g>, AutodiffError>>;
    let other = random(&[3, 4], &mut rng);
    let row = random(&[4], &mut rng);
    let positive = t(&[3, 4], &(0..12).map(|i| 0.5 + i as f64 * 0.1).collect::<Vec<_>>());
    let mat = random(&[4, 2], &mut rng);
    let convw = random(&[2, 1, 3, 2], &mut rng);
    let convb = random(&[2], &mut rng);
    let bias2 = random(&[2], &mut rng);
    let left = random(&[2, 3], &mut rng);
    let left4 = random(&[5, 4], &mut rng);
    let w44 = random(&[4, 4], &mut rng);
    let cases: Vec<(&str, Case)> = vec![
        ("add", Box::new(move |g, x| x.add(g.leaf(&row)?)?.sin()?.sum())),
        (
            "sub",
            Box::new({
                let o = other.clone();
                move |g, x| g.leaf(&o)?.sub(x)?.mul(x)?.sum()
            }),
        ),
        (
            "mul",
            Box::new({
                let o = other.clone();
                move |g, x| x.mul(g.leaf(&o)?)?.mul(x)?.sum()
            }),
        ),
        (
            "div",
            Box::new({
                let p = positive.clone();
                move |g, x| x.div(g.leaf(&p)?)?.sin()?.sum()
            }),
        ),
        (
            "div_rhs",
            Box::new(move |g, x| {
                let d = x.mul(x)?.add_scalar(1.0)?;
                g.leaf(&Tensor::scalar(2.0))?.div(d)?.sum()
            }),
        ),
        (
            "affine_x",
            Box::new({
                let m = mat.clone();
                move |g, x| x.affine(g.leaf(&m)?, g.leaf(&bias2)?)?.cos()?.sum()
            }),
        ),
        ("matmul", Box::new(move |g, x| x.matmul(g.leaf(&mat)?)?.cos()?.sum())),
        (
            "affine_w",
            Box::new(move |g, x| g.leaf(&left)?.affine(x, x.slice(0, 0, 1)?)?.sin()?.sum()),
        ),
        (
            "affine_b",
            Box::new(move |g, x| {
                let b = x.slice(0, 1, 1)?;
                g.leaf(&left4)?.affine(g.leaf(&w44)?, b)?.sin()?.sum()
            }),
        ),
        ("mean", Box::new(|_, x| x.mul(x)?.mean())),
        ("relu", Box::new(|_, x| x.scale(1.3)?.relu()?.mul(x)?.sum())),
        ("softplus", Box::new(|_, x| x.softplus()?.sum())),
        ("sigmoid", Box::new(|_, x| x.sigmoid()?.mul(x)?.sum())),
        ("exp", Box::new(|_, x| x.exp()?.sum())),
        ("log", Box::new(|_, x| x.mul(x)?.add_scalar(0.5)?.log()?.sum())),
        ("sin", Box::new(|_, x| x.sin()?.sum())),
        ("cos", Box::new(|_, x| x.cos()?.mul(x)?.sum())),
        ("abs", Box::new(|_, x| x.abs()?.mul(x)?.sum())),
        (
            "concat",
            Box::new(|g, x| {
                let y = x.sin()?;
                g.concat(&[x, y, x], 1)?.exp()?.sum()
            }),
        ),
        ("slice", Box::new(|_, x| x.slice(1, 1, 2)?.exp()?.sum())),
        ("sum_axis", Box::new(|_, x| x.sum_axis(0)?.sin()?.sum())),
        (
            "broadcast",
            Box::new(|_, x| x.slice(0, 0, 1)?.broadcast_to(&[5, 3, 4])?.sin()?.sum()),
        ),
        (
            "reshape",
            Box::new(|_, x| x.reshape(&[2, 6])?.slice(0, 1, 1)?.exp()?.sum()),
        ),
        ("cumsum", Box::new(|_, x| x.cumsum_exclusive(1)?.sin()?.sum())),
        ("clamp", Box::new(|_, x| x.clamp(-1.0, 1.0)?.mul(x)?.sum())),
        (
            "max_n",
            Box::new(|g, x| {
                let y = x.sin()?;
                let z = x.scale(-1.0)?;
                g.max_n(&[x, y, z])?.mul(x)?.sum()
            }),
        ),
        (
            "conv2d",
            Box::new(move |g, x| {
                let img = x.reshape(&[1, 1, 3, 4])?;
                img.conv2d(g.leaf(&convw)?, g.leaf(&convb)?, 1, 1)?.sin()?.sum()
            }),
        ),
        (
            "conv2d_stride",
            Box::new(|g, x| {
                let img = x.reshape(&[1, 1, 3, 4])?;
                let w = g.leaf(&Tensor::filled(&[1, 1, 3, 3], 0.3))?;
                let b = g.leaf(&Tensor::scalar(0.1).reshape(&[1])?)?;
                img.conv2d(w, b, 2, 1)?.exp()?.sum()
            }),
        ),
        (
            "upsample",
            Box::new(|_, x| x.reshape(&[1, 1, 3, 4])?.upsample2x()?.sin()?.sum()),
        ),
    ];
    for (name, f) in cases {
        for _ in 0..3 {
            let x = random(&[3, 4], &mut rng);
            let err = grad_check(&f, &x, 1e-5).unwrap();
            assert!(err < 1e-4, "{name}: relative error {err}");
        }
    }
}

#[test]
fn conv_weight_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = random(&[2, 2, 5, 5], &mut rng);
    let w = random(&[3, 2, 3, 3], &mut rng);
    let err = grad_check(
        |g, wv| {
            let b = g.leaf(&Tensor::zeros(&[3]))?;
            g.leaf(&x)?.conv2d(wv, b, 2, 1)?.sin()?.sum()
        },
        &w,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-4, "{err}");
}

proptest! {
    #[test]
    fn elementwise_results_stay_finite(data in proptest::collection::vec(-50.0f64..50.0, 1..20)) {
        let g = Graph::new();
        let x = g.leaf(&Tensor::vector(data)).unwrap();
        for v in [x.softplus().unwrap(), x.sigmoid().unwrap(), x.relu().unwrap(), x.sin().unwrap()] {
            prop_assert!(v.value().unwrap().iter().all(|y| y.is_finite()));
        }
    }

    #[test]
    fn sigmoid_plus_reflection_is_one(x in -30.0f64..30.0) {
        let g = Graph::new();
        let v = g.leaf(&Tensor::scalar(x)).unwrap();
        let a = v.sigmoid().unwrap().item().unwrap();
        let b = v.neg().unwrap().sigmoid().unwrap().item().unwrap();
        prop_assert!((a + b - 1.0).abs() < 1e-12);
    }
}
