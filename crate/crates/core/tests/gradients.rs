mod common;

use bsa::numerics::{ParamStore, Sgd, Tape, Tensor};
use bsa::Error;

#[test]
fn every_kernel_matches_central_differences() {
    for (name, err) in common::kernel_checks().unwrap() {
        assert!(err < common::KERNEL_TOL, "{name}: relative error {err:e}");
    }
}

#[test]
fn composed_objective_matches_central_differences() {
    let err = common::composed_check().unwrap();
    assert!(err < common::COMPOSED_TOL, "relative error {err:e}");
}

#[test]
fn frozen_parameters_stay_bit_identical() {
    let mut store = ParamStore::<f32>::new();
    let a = store.add("a", Tensor::from_f64(2, 2, &[1.0, 2.0, 3.0, 4.0]).unwrap(), true).unwrap();
    let b = store.add("b", Tensor::from_f64(2, 2, &[0.5, -1.0, 0.25, 2.0]).unwrap(), false).unwrap();
    let before = store.checksum(&[b]);
    let mut sgd = Sgd::new(0.01);
    for _ in 0..5 {
        let mut tape = Tape::new();
        let x = tape.param(&store, a);
        let y = tape.param(&store, b);
        let z = tape.matmul(x, y).unwrap();
        let l = tape.mean(z);
        let g = tape.backward(l).unwrap();
        store.accumulate(&g);
        sgd.step(&mut store).unwrap();
    }
    assert_eq!(store.checksum(&[b]), before);
    assert_ne!(store.get(a).value.data, vec![1.0, 2.0, 3.0, 4.0]);
}

#[test]
fn non_finite_gradient_names_the_parameter() {
    let mut store = ParamStore::<f32>::new();
    let a = store.add("weights.bad", Tensor::from_f64(1, 2, &[1.0, 2.0]).unwrap(), true).unwrap();
    let mut tape = Tape::new();
    let x = tape.param(&store, a);
    let y = tape.scale(x, f32::INFINITY);
    let l = tape.mean(y);
    let g = tape.backward(l).unwrap();
    store.accumulate(&g);
    let before = store.get(a).value.data.clone();
    match Sgd::new(0.1).step(&mut store) {
        Err(Error::NonFinite(name)) => assert_eq!(name, "weights.bad"),
        other => panic!("expected a non-finite error, got {other:?}"),
    }
    assert_eq!(store.get(a).value.data, before);
}

#[test]
fn plain_sgd_step_is_w_minus_lr_g() {
    let mut store = ParamStore::<f64>::new();
    let a = store.add("a", Tensor::from_f64(1, 3, &[1.0, -2.0, 0.5]).unwrap(), true).unwrap();
    let mut tape = Tape::new();
    let x = tape.param(&store, a);
    let t = tape.constant(Tensor::from_f64(1, 3, &[0.0, 0.0, 0.0]).unwrap());
    let l = tape.squared_error(x, t).unwrap();
    let g = tape.backward(l).unwrap();
    store.accumulate(&g);
    Sgd::new(0.01).step(&mut store).unwrap();
    // d/dw sum(w^2) = 2w
    let want: Vec<f64> = [1.0, -2.0, 0.5].iter().map(|w| w - 0.01 * 2.0 * w).collect();
    for (got, want) in store.get(a).value.data.iter().zip(want) {
        assert!((got - want).abs() < 1e-15);
    }
}

#[test]
fn fused_point_layer_matches_unfused_chain() {
    let mut r = bsa::rng::rng_from(21);
    // 3000-row groups force one group per GEMM block, so block edges are hit
    for (rows, k, n, group) in [(12, 3, 5, 4), (9000, 2, 3, 3000), (64, 6, 7, 1)] {
        let x = Tensor::<f64>::randn(rows, k, 1.0, &mut r);
        let w = Tensor::<f64>::randn(k, n, 1.0, &mut r);
        let b = Tensor::<f64>::randn(1, n, 0.5, &mut r);
        let up = Tensor::<f64>::randn(rows / group, n, 1.0, &mut r);
        let run = |fused: bool| {
            let mut t = Tape::new();
            let (xv, wv, bv) = (t.input(x.clone()), t.input(w.clone()), t.input(b.clone()));
            let y = if fused {
                t.linear_relu_max(xv, wv, bv, group).unwrap()
            } else {
                let h = t.linear(xv, wv, bv).unwrap();
                let h = t.relu(h);
                t.max_pool(h, group).unwrap()
            };
            let target = t.constant(up.clone());
            let loss = t.squared_error(y, target).unwrap();
            let g = t.backward_keep(loss, &[xv, wv, bv]).unwrap();
            (t.value(y).data.clone(), [xv, wv, bv].map(|v| g.of(v).unwrap().to_vec()))
        };
        let (ya, ga) = run(true);
        let (yb, gb) = run(false);
        assert_eq!(ya, yb);
        for (a, b) in ga.iter().zip(&gb) {
            for (p, q) in a.iter().zip(b) {
                assert!((p - q).abs() <= 1e-12 * (1.0 + q.abs()), "{p} vs {q}");
            }
        }
    }
}
