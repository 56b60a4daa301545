
use super::*;
use crate::rng;

use super::normal_tensor as random;

fn naive_matmul(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            for l in 0..k {
                out[i * n + j] += a.data()[i * k + l] * b.data()[l * n + j];
            }
        }
    }
    Tensor::new(&[m, n], out).unwrap()
}

#[test]
fn matmul_matches_triple_loop() {
    let mut r = rng::from_seed(1);
    let a = random(&[3, 4], &mut r);
    let b = random(&[4, 2], &mut r);
    let g = Graph::inference();
    let c = g
        .constant(a.clone())
        .matmul(&g.constant(b.clone()))
        .unwrap()
        .value();
    assert!(c.max_abs_diff(&naive_matmul(&a, &b)) < 1e-12);
}

#[test]
fn bmm_matches_per_batch_matmul() {
    let mut r = rng::from_seed(2);
    let a = random(&[2, 3, 4], &mut r);
    let b = random(&[2, 4, 5], &mut r);
    let g = Graph::inference();
    let c = g
        .constant(a.clone())
        .bmm(&g.constant(b.clone()))
        .unwrap()
        .value();
    for k in 0..2 {
        let ak = Tensor::new(&[3, 4], a.data()[k * 12..(k + 1) * 12].to_vec()).unwrap();
        let bk = Tensor::new(&[4, 5], b.data()[k * 20..(k + 1) * 20].to_vec()).unwrap();
        let expect = naive_matmul(&ak, &bk);
        for (x, y) in c.data()[k * 15..(k + 1) * 15].iter().zip(expect.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}

#[test]
fn softmax_of_zeros_is_uniform() {
    let g = Graph::inference();
    let s = g
        .constant(Tensor::vector(vec![0.0, 0.0]))
        .softmax_last()
        .value();
    assert_eq!(s.data(), &[0.5, 0.5]);
}

#[test]
fn cosine_with_itself_is_one() {
    let mut r = rng::from_seed(3);
    for _ in 0..20 {
        let v = random(&[7], &mut r);
        let g = Graph::inference();
        let x = g.constant(v);
        assert!((x.cosine(&x).unwrap().item() - 1.0).abs() < 1e-14);
    }
}

#[test]
fn square_gradient_at_three_is_six() {
    let g = Graph::new();
    let x = g.variable(Tensor::scalar(3.0));
    let y = x.mul(&x).unwrap();
    let grads = g.backward(y).unwrap();
    assert_eq!(grads.wrt(x).unwrap().item(), 6.0);
}

#[test]
fn cross_entropy_gradient_vanishes_at_one_hot_optimum() {
    // A target distribution equal to softmax(logits) is the optimum of
    // softmax cross-entropy; use it with the logits of an exact one-hot limit.
    let logits = Tensor::vector(vec![0.3, -1.2, 2.0]);
    let g0 = Graph::inference();
    let target = g0.constant(logits.clone()).softmax_last().value();
    let g = Graph::new();
    let x = g.variable(logits);
    let t = g.constant(target);
    let loss = x.log_softmax_last().mul(&t).unwrap().sum().neg();
    let grads = g.backward(loss).unwrap();
    assert!(grads.wrt(x).unwrap().data().iter().all(|v| v.abs() < 1e-15));
}

#[test]
fn backward_twice_is_an_error() {
    let g = Graph::new();
    let x = g.variable(Tensor::scalar(1.0));
    let y = x.exp();
    g.backward(y).unwrap();
    assert_eq!(g.backward(y).unwrap_err(), TensorError::NoRecord);
    let gi = Graph::inference();
    let z = gi.variable(Tensor::scalar(1.0)).exp();
    assert_eq!(gi.backward(z).unwrap_err(), TensorError::NoRecord);
}

#[test]
fn backward_requires_scalar() {
    let g = Graph::new();
    let x = g.variable(Tensor::vector(vec![1.0, 2.0]));
    assert!(matches!(
        g.backward(x.exp()),
        Err(TensorError::NotScalar(_))
    ));
}

#[test]
fn shape_mismatch_is_reported() {
    let g = Graph::inference();
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[2, 2]));
    assert!(matches!(a.add(&b), Err(TensorError::ShapeMismatch { .. })));
    assert!(matches!(
        a.matmul(&a),
        Err(TensorError::ShapeMismatch { .. })
    ));
}

#[test]
fn linear_function_grad_check_is_tight() {
    let mut r = rng::from_seed(4);
    let w = random(&[6], &mut r);
    let p = random(&[6], &mut r);
    let err = grad_check(
        |g, x| Ok(x.mul(&g.constant(w.clone()))?.sum().add_scalar(0.7)),
        &p,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-10, "{err}");
}

#[test]
fn two_layer_perceptron_matches_finite_differences() {
    let mut r = rng::from_seed(5);
    let w1 = random(&[4, 5], &mut r);
    let w2 = random(&[5, 1], &mut r);
    let p = random(&[3, 4], &mut r);
    let err = grad_check(
        |g, x| {
            let h = x.matmul(&g.constant(w1.clone()))?.tanh();
            Ok(h.matmul(&g.constant(w2.clone()))?.square().mean())
        },
        &p,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-5, "{err}");
}

#[test]
fn every_op_passes_grad_check_at_ten_points() {
    let mut r = rng::from_seed(6);
    for case in op_suite(&mut r) {
        let (name, shape, f) = (case.name, &case.shape, &case.f);
        for trial in 0..10 {
            let point = random(shape, &mut r);
            let err = grad_check(|g, x| f(g, x), &point, 1e-5).unwrap();
            assert!(err < 1e-5, "{name} trial {trial}: rel err {err}");
        }
    }
}

#[test]
fn adam_with_zero_gradient_leaves_params_unchanged() {
    let mut r = rng::from_seed(7);
    let mut store = ParamStore::new();
    store.add("w", random(&[3, 3], &mut r));
    let before = store.clone();
    for cfg in [AdamConfig::adam(0.1), AdamConfig::adamw(0.1, 0.0)] {
        let mut opt = Adam::new(cfg, &store);
        let zero = vec![Some(Tensor::zeros(&[3, 3]))];
        for _ in 0..5 {
            opt.step(&mut store, &zero);
        }
        assert_eq!(store, before);
        assert_eq!(opt.steps(), 5);
    }
}

#[test]
fn adamw_decay_is_decoupled_from_gradient() {
    let mut store = ParamStore::new();
    let w = store.add("w", Tensor::vector(vec![2.0]));
    let mut opt = Adam::new(AdamConfig::adamw(0.1, 0.5), &store);
    opt.step(&mut store, &[Some(Tensor::vector(vec![0.0]))]);
    // pure decay: 2 * (1 - 0.1 * 0.5)
    assert!((store.get(w).item() - 1.9).abs() < 1e-15);

    let mut store2 = ParamStore::new();
    let w2 = store2.add("w", Tensor::vector(vec![2.0]));
    let mut adam = Adam::new(
        AdamConfig {
            weight_decay: 0.5,
            ..AdamConfig::adam(0.1)
        },
        &store2,
    );
    adam.step(&mut store2, &[Some(Tensor::vector(vec![0.0]))]);
    // coupled decay goes through the normalized step: moves by ~lr
    assert!((store2.get(w2).item() - 1.9).abs() < 1e-6);
}

#[test]
fn adam_minimizes_a_quadratic() {
    let mut store = ParamStore::new();
    let id = store.add("x", Tensor::vector(vec![5.0, -3.0]));
    let mut opt = Adam::new(AdamConfig::adam(0.1), &store);
    for _ in 0..500 {
        let g = Graph::new();
        let x = g.param(&store, id);
        let loss = x.square().sum();
        let grads = g.backward(loss).unwrap();
        let grads = grads.for_store(&store);
        opt.step(&mut store, &grads);
    }
    assert!(store.get(id).data().iter().all(|v| v.abs() < 1e-2));
}

#[test]
fn param_bound_twice_shares_one_node() {
    let mut store = ParamStore::new();
    let id = store.add("x", Tensor::scalar(2.0));
    let g = Graph::new();
    let a = g.param(&store, id);
    let b = g.param(&store, id);
    let y = a.mul(&b).unwrap();
    let grads = g.backward(y).unwrap();
    assert_eq!(grads.param(&store, id).unwrap().item(), 4.0);
}

#[test]
fn clip_grad_norm_rescales_only_above_the_cap() {
    let mut grads = vec![Some(Tensor::vector(vec![3.0, 0.0])), None, Some(Tensor::vector(vec![4.0]))];
    assert_eq!(clip_grad_norm(&mut grads, 10.0), 5.0);
    assert_eq!(grads[0].as_ref().unwrap().data(), &[3.0, 0.0]);
    assert_eq!(clip_grad_norm(&mut grads, 1.0), 5.0);
    let after: Vec<f64> = grads.iter().flatten().flat_map(|t| t.data().to_vec()).collect();
    assert!((after[0] - 0.6).abs() < 1e-15 && (after[2] - 0.8).abs() < 1e-15);
}

#[test]
fn frozen_params_get_no_gradient() {
    let mut store = ParamStore::new();
    let id = store.add("w", Tensor::scalar(2.0));
    let g = Graph::new().with_frozen_params();
    let x = g.variable(Tensor::scalar(3.0));
    let y = x.mul(&g.param(&store, id)).unwrap();
    let grads = g.backward(y).unwrap();
    assert!(grads.param(&store, id).is_none());
    assert_eq!(grads.wrt(x).unwrap().item(), 2.0);
}

mod props {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn softmax_rows_are_distributions(data in proptest::collection::vec(-50.0f64..50.0, 12)) {
            let g = Graph::inference();
            let s = g.constant(Tensor::new(&[3, 4], data).unwrap()).softmax_last().value();
            for row in s.rows() {
                prop_assert!(row.iter().all(|&v| v >= 0.0));
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }
}
