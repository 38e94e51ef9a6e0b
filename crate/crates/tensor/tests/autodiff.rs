use gasr_tensor::{
    finite_difference_check, init, Graph, Mode, ParamId, ParamStore, Result, Tensor, TensorError, Var,
};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_store(shapes: &[(&str, &[usize])], seed: u64) -> (ParamStore<f64>, Vec<ParamId>) {
    let mut r = rng(seed);
    let mut store = ParamStore::new();
    let ids = shapes
        .iter()
        .map(|(name, shape)| store.add(*name, init::normal(&mut r, shape, 1.0)).unwrap())
        .collect();
    (store, ids)
}

/// Fixed random projection to turn any tensor into a scalar with a
/// non-trivial upstream gradient.
fn project(g: &mut Graph<f64>, x: Var, seed: u64) -> Result<Var> {
    let shape = g.shape(x).to_vec();
    let w = init::normal(&mut rng(seed), &shape, 1.0);
    let w = g.constant(w);
    let p = g.mul(x, w)?;
    g.sum(p)
}

fn check(shapes: &[(&str, &[usize])], f: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var>) -> f64 {
    let (mut store, ids) = random_store(shapes, 11);
    let report = finite_difference_check(
        &mut store,
        |g, s| {
            let vars: Vec<Var> = ids.iter().map(|&id| g.param(s, id)).collect();
            let y = f(g, &vars)?;
            if g.value(y).len() == 1 {
                Ok(y)
            } else {
                project(g, y, 99)
            }
        },
        1e-5,
        30,
        5,
    )
    .unwrap();
    assert!(report.checked > 0);
    report.max_rel_error
}

#[test]
fn primitive_gradients_match_finite_differences() {
    let cases: Vec<(&str, f64)> = vec![
        ("matmul", check(&[("a", &[3, 4]), ("b", &[4, 5])], |g, v| g.matmul(v[0], v[1]))),
        ("matmul_bt", check(&[("a", &[3, 4]), ("b", &[5, 4])], |g, v| g.matmul_bt(v[0], v[1]))),
        ("add", check(&[("a", &[3, 4]), ("b", &[3, 4])], |g, v| g.add(v[0], v[1]))),
        ("add_broadcast", check(&[("a", &[3, 4]), ("b", &[4])], |g, v| g.add(v[0], v[1]))),
        ("mul", check(&[("a", &[3, 4]), ("b", &[3, 4])], |g, v| g.mul(v[0], v[1]))),
        ("mul_broadcast", check(&[("a", &[3, 4]), ("b", &[1, 4])], |g, v| g.mul(v[0], v[1]))),
        ("scale", check(&[("a", &[2, 3])], |g, v| g.scale(v[0], -1.7))),
        (
            "concat_rows",
            check(&[("a", &[2, 3]), ("b", &[4, 3])], |g, v| g.concat(&[v[0], v[1]], 0)),
        ),
        (
            "concat_cols",
            check(&[("a", &[2, 3]), ("b", &[2, 1])], |g, v| g.concat(&[v[0], v[1]], 1)),
        ),
        ("slice_rows", check(&[("a", &[5, 3])], |g, v| g.slice(v[0], 0, 1, 3))),
        ("slice_cols", check(&[("a", &[5, 6])], |g, v| g.slice(v[0], 1, 2, 2))),
        ("embedding", check(&[("t", &[5, 3])], |g, v| g.embedding(v[0], &[4, 0, 4, 2]))),
        ("softmax", check(&[("a", &[3, 5])], |g, v| g.softmax(v[0]))),
        (
            "masked_softmax",
            check(&[("a", &[2, 3])], |g, v| {
                g.masked_softmax(v[0], &[true, false, true, false, true, true])
            }),
        ),
        ("log_softmax", check(&[("a", &[3, 5])], |g, v| g.log_softmax(v[0]))),
        (
            "layer_norm",
            check(&[("x", &[3, 6]), ("g", &[6]), ("b", &[6])], |g, v| {
                g.layer_norm(v[0], v[1], v[2], 1e-5)
            }),
        ),
        ("gelu", check(&[("a", &[4, 4])], |g, v| g.gelu(v[0]))),
        (
            "cross_entropy",
            check(&[("a", &[3, 4])], |g, v| {
                let lp = g.log_softmax(v[0])?;
                g.cross_entropy(lp, &[1, 3, 0])
            }),
        ),
        ("sum", check(&[("a", &[2, 5])], |g, v| g.sum(v[0]))),
        ("unfold_rows", check(&[("a", &[7, 2])], |g, v| g.unfold_rows(v[0], 3, 2, 1, 3))),
        ("reshape", check(&[("a", &[2, 6])], |g, v| g.reshape(v[0], vec![3, 4]))),
        (
            "dropout_eval",
            check(&[("a", &[2, 3])], |g, v| g.dropout(v[0], 0.5)),
        ),
        (
            "external_scalar",
            check(&[("a", &[3])], |g, v| {
                // f(a) = Σ a², gradient 2a supplied externally.
                let t = g.value(v[0]).clone();
                let value = t.data().iter().map(|x| x * x).sum();
                let grad = t.map(|x| 2.0 * x);
                g.external_scalar(v[0], value, grad)
            }),
        ),
    ];
    for (name, err) in &cases {
        println!("{name:>16}: max relative error {err:.2e}");
    }
    for (name, err) in cases {
        assert!(err <= 1e-3, "{name}: {err}");
    }
}

#[test]
fn relu_gradient_away_from_kink() {
    let mut store = ParamStore::<f64>::new();
    let id = store.add("a", Tensor::row(vec![-1.0, 0.5, 2.0, -0.3]).unwrap()).unwrap();
    let report = finite_difference_check(
        &mut store,
        |g, s| {
            let a = g.param(s, id);
            let r = g.relu(a)?;
            project(g, r, 3)
        },
        1e-5,
        4,
        0,
    )
    .unwrap();
    assert!(report.max_rel_error <= 1e-6, "{report:?}");
}

#[test]
fn matmul_identity() {
    let mut g = Graph::<f32>::inference();
    let a = Tensor::from_fn(&[3, 3], |i| (i as f32).sin());
    let i3 = g.constant(Tensor::identity(3));
    let av = g.constant(a.clone());
    let out = g.matmul(i3, av).unwrap();
    assert_eq!(g.value(out), &a);
}

#[test]
fn softmax_uniform_and_normalized() {
    let mut g = Graph::<f32>::inference();
    let x = g.constant(Tensor::row(vec![0.0; 4]).unwrap());
    let y = g.softmax(x).unwrap();
    assert_eq!(g.value(y).data(), &[0.25; 4]);

    let x = g.constant(Tensor::from_fn(&[6, 9], |i| ((i * 37 % 11) as f32) - 5.0));
    let y = g.softmax(x).unwrap();
    for r in 0..6 {
        let s: f64 = g.value(y).row_slice(r).iter().map(|&v| v as f64).sum();
        assert!((s - 1.0).abs() < 1e-6);
    }
}

#[test]
fn cross_entropy_matches_scalar_formula() {
    let mut g = Graph::<f32>::inference();
    let x = g.constant(Tensor::row(vec![1.0, 2.0, 3.0]).unwrap());
    let lp = g.log_softmax(x).unwrap();
    let ce = g.cross_entropy(lp, &[2]).unwrap();
    let direct = -(3.0f64 - (1f64.exp() + 2f64.exp() + 3f64.exp()).ln());
    assert!((g.value(ce).item() as f64 - direct).abs() < 1e-6);
}

#[test]
fn sum_gradient_is_ones() {
    let mut store = ParamStore::<f32>::new();
    let id = store.add("x", Tensor::from_fn(&[2, 3, 2], |i| i as f32)).unwrap();
    let mut g = Graph::new(Mode::Eval, 0);
    let x = g.param(&store, id);
    let s = g.sum(x).unwrap();
    g.backward(s, &mut [&mut store]).unwrap();
    assert!(store.get(id).grad().data().iter().all(|&v| v == 1.0));
}

#[test]
fn square_gradient_analytic() {
    let mut store = ParamStore::<f32>::new();
    let id = store.add("x", Tensor::scalar(3.0)).unwrap();
    let mut g = Graph::new(Mode::Eval, 0);
    let x = g.param(&store, id);
    let sq = g.mul(x, x).unwrap();
    g.backward(sq, &mut [&mut store]).unwrap();
    assert_eq!(store.get(id).grad().item(), 6.0);
}

fn mlp_loss(g: &mut Graph<f64>, s: &ParamStore<f64>, ids: &[ParamId], x: &Tensor<f64>) -> Result<Var> {
    let x = g.constant(x.clone());
    let w1 = g.param(s, ids[0]);
    let b1 = g.param(s, ids[1]);
    let w2 = g.param(s, ids[2]);
    let b2 = g.param(s, ids[3]);
    let h = g.matmul(x, w1)?;
    let h = g.add(h, b1)?;
    let h = g.gelu(h)?;
    let o = g.matmul(h, w2)?;
    let o = g.add(o, b2)?;
    let lp = g.log_softmax(o)?;
    g.cross_entropy(lp, &[0, 2, 1, 2])
}

#[test]
fn two_layer_mlp_matches_finite_differences() {
    let (mut store, ids) = random_store(&[("w1", &[5, 8]), ("b1", &[8]), ("w2", &[8, 3]), ("b2", &[3])], 7);
    let x = init::normal(&mut rng(8), &[4, 5], 1.0);
    let report = finite_difference_check(&mut store, |g, s| mlp_loss(g, s, &ids, &x), 1e-4, 40, 1).unwrap();
    assert!(report.max_rel_error <= 1e-3, "{report:?}");
}

#[test]
fn quadratic_form_gradient_tight() {
    let (mut store, ids) = random_store(&[("x", &[1, 6])], 3);
    let a = init::normal::<f64>(&mut rng(4), &[6, 6], 1.0);
    let report = finite_difference_check(
        &mut store,
        |g, s| {
            let x = g.param(s, ids[0]);
            let a = g.constant(a.clone());
            let ax = g.matmul_bt(x, a)?;
            let q = g.mul(ax, x)?;
            g.sum(q)
        },
        1e-4,
        6,
        0,
    )
    .unwrap();
    assert!(report.max_rel_error <= 1e-6, "{report:?}");
}

#[test]
fn constant_function_has_zero_error() {
    let (mut store, ids) = random_store(&[("x", &[3])], 3);
    let report = finite_difference_check(
        &mut store,
        |g, s| {
            let _ = g.param(s, ids[0]);
            let c = g.constant(Tensor::scalar(4.0));
            g.sum(c)
        },
        1e-4,
        3,
        0,
    )
    .unwrap();
    assert_eq!(report.max_rel_error, 0.0);
    assert!(store.get(ids[0]).grad().data().iter().all(|&v| v == 0.0));
}

#[test]
fn gradients_accumulate_additively() {
    let (store64, ids) = random_store(&[("w1", &[5, 8]), ("b1", &[8]), ("w2", &[8, 3]), ("b2", &[3])], 7);
    let mut store = store64;
    let x = init::normal(&mut rng(8), &[4, 5], 1.0);
    let mut once = Vec::new();
    for pass in 0..2 {
        let mut g = Graph::new(Mode::Eval, 0);
        let loss = mlp_loss(&mut g, &store, &ids, &x).unwrap();
        g.backward(loss, &mut [&mut store]).unwrap();
        if pass == 0 {
            once = ids.iter().map(|&id| store.get(id).grad().clone()).collect();
        }
    }
    for (id, g1) in ids.iter().zip(&once) {
        let twice = store.get(*id).grad();
        for (a, b) in twice.data().iter().zip(g1.data()) {
            assert_eq!(*a, 2.0 * b);
        }
    }
}

#[test]
fn fixed_seed_is_bit_identical() {
    let run = || {
        let mut store = ParamStore::<f32>::new();
        let mut r = rng(21);
        let w = store.add("w", init::xavier_uniform(&mut r, 6, 4)).unwrap();
        let x = init::normal::<f32>(&mut r, &[5, 6], 1.0);
        let mut g = Graph::new(Mode::Train, 77);
        let xv = g.constant(x);
        let wv = g.param(&store, w);
        let h = g.matmul(xv, wv).unwrap();
        let h = g.dropout(h, 0.7).unwrap();
        let lp = g.log_softmax(h).unwrap();
        let loss = g.cross_entropy(lp, &[0, 1, 2, 3, 0]).unwrap();
        g.backward(loss, &mut [&mut store]).unwrap();
        (g.value(loss).item().to_bits(), store.get(w).grad().clone())
    };
    let (l1, g1) = run();
    let (l2, g2) = run();
    assert_eq!(l1, l2);
    assert_eq!(
        g1.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
        g2.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    );
}

#[test]
fn dropout_train_scales_and_eval_is_identity() {
    let x = Tensor::<f32>::filled(&[50, 40], 1.0);
    let mut g = Graph::new(Mode::Train, 3);
    let xv = g.constant(x.clone());
    let y = g.dropout(xv, 0.8).unwrap();
    let vals = g.value(y).data();
    assert!(vals.iter().all(|&v| v == 0.0 || (v - 1.25).abs() < 1e-6));
    let kept = vals.iter().filter(|&&v| v > 0.0).count() as f64 / vals.len() as f64;
    assert!((kept - 0.8).abs() < 0.05, "kept fraction {kept}");

    let mut g = Graph::new(Mode::Eval, 3);
    let xv = g.constant(x.clone());
    let y = g.dropout(xv, 0.8).unwrap();
    assert_eq!(g.value(y), &x);
    assert!(g.dropout(xv, 0.0).is_err());
    assert!(g.dropout(xv, 1.5).is_err());
}

#[test]
fn shape_errors_name_operation() {
    let mut g = Graph::<f32>::inference();
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[2, 3]));
    let err = g.matmul(a, b).unwrap_err();
    assert!(matches!(err, TensorError::Shape { op: "matmul", .. }));
    assert!(err.to_string().contains("[2, 3] vs [2, 3]"));
    let c = g.constant(Tensor::zeros(&[4]));
    assert!(matches!(g.add(a, c), Err(TensorError::Shape { op: "add", .. })));
}

#[test]
fn non_scalar_loss_rejected() {
    let mut store = ParamStore::<f32>::new();
    let id = store.add("x", Tensor::zeros(&[2])).unwrap();
    let mut g = Graph::new(Mode::Eval, 0);
    let x = g.param(&store, id);
    assert!(matches!(
        g.backward(x, &mut [&mut store]),
        Err(TensorError::NonScalarLoss(_))
    ));
}

#[test]
fn fully_masked_row_rejected() {
    let mut g = Graph::<f32>::inference();
    let a = g.constant(Tensor::zeros(&[2, 2]));
    assert!(g.masked_softmax(a, &[true, false, false, false]).is_err());
}

#[test]
fn non_finite_output_rejected() {
    let mut g = Graph::<f32>::inference();
    let a = g.constant(Tensor::row(vec![f32::MAX, 1.0]).unwrap());
    assert!(matches!(g.scale(a, 10.0), Err(TensorError::NonFinite { op: "scale" })));
}

#[test]
fn frozen_parameters_receive_nothing() {
    let mut store = ParamStore::<f32>::new();
    let w = store.add("w", Tensor::row(vec![1.0, 2.0]).unwrap()).unwrap();
    let v = store.add("v", Tensor::row(vec![3.0, 4.0]).unwrap()).unwrap();
    store.set_frozen(w, true);
    let mut g = Graph::new(Mode::Eval, 0);
    let wv = g.param(&store, w);
    let vv = g.param(&store, v);
    let p = g.mul(wv, vv).unwrap();
    let s = g.sum(p).unwrap();
    g.backward(s, &mut [&mut store]).unwrap();
    assert!(store.get(w).grad().data().iter().all(|&x| x == 0.0));
    assert_eq!(store.get(v).grad().data(), &[1.0, 2.0]);
}

#[test]
fn missing_store_is_an_error() {
    let mut a = ParamStore::<f32>::new();
    let mut b = ParamStore::<f32>::new();
    let id = a.add("x", Tensor::scalar(1.0)).unwrap();
    b.add("y", Tensor::scalar(1.0)).unwrap();
    let mut g = Graph::new(Mode::Eval, 0);
    let x = g.param(&a, id);
    let s = g.sum(x).unwrap();
    assert!(matches!(g.backward(s, &mut [&mut b]), Err(TensorError::MissingStore)));
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions(vals in proptest::collection::vec(-30.0f32..30.0, 12)) {
        let mut g = Graph::<f32>::inference();
        let x = g.constant(Tensor::matrix(3, 4, vals).unwrap());
        let y = g.softmax(x).unwrap();
        for r in 0..3 {
            let row = g.value(y).row_slice(r);
            prop_assert!(row.iter().all(|&v| v >= 0.0));
            let s: f64 = row.iter().map(|&v| v as f64).sum();
            prop_assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn concat_then_slice_recovers_parts(rows_a in 1usize..4, rows_b in 1usize..4, cols in 1usize..4) {
        let mut g = Graph::<f32>::inference();
        let a = Tensor::from_fn(&[rows_a, cols], |i| i as f32);
        let b = Tensor::from_fn(&[rows_b, cols], |i| -(i as f32));
        let av = g.constant(a.clone());
        let bv = g.constant(b.clone());
        let c = g.concat(&[av, bv], 0).unwrap();
        let sa = g.slice(c, 0, 0, rows_a).unwrap();
        let sb = g.slice(c, 0, rows_a, rows_b).unwrap();
        prop_assert_eq!(g.value(sa), &a);
        prop_assert_eq!(g.value(sb), &b);
    }
}
