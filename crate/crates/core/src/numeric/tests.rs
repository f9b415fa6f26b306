use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::testutil::max_grad_error;
use crate::Error;

fn store_with(entries: &[(&str, Vec<usize>, Vec<f64>)]) -> (ParameterStore, Vec<ParamId>) {
    let mut store = ParameterStore::new();
    let ids = entries
        .iter()
        .map(|(n, s, d)| store.add(*n, Tensor::new(s.clone(), d.clone()).unwrap(), true).unwrap())
        .collect();
    (store, ids)
}

fn random_entries(rng: &mut ChaCha8Rng, specs: &[(&'static str, Vec<usize>)]) -> (ParameterStore, Vec<ParamId>) {
    let owned: Vec<_> = specs
        .iter()
        .map(|(n, s)| {
            let numel = s.iter().product();
            (*n, s.clone(), (0..numel).map(|_| rng.gen_range(-2.0..2.0)).collect())
        })
        .collect();
    store_with(&owned)
}

/// Direct transcription of the same-padded dilated convolution sum.
fn conv_oracle(x: &[Vec<f64>], kernel: &[Vec<Vec<f64>>], dilation: usize) -> Vec<Vec<f64>> {
    let len = x.len();
    let k = kernel[0][0].len();
    let half = (k - 1) as isize / 2;
    (0..len)
        .map(|i| {
            kernel
                .iter()
                .map(|ko| {
                    let mut s = 0.0;
                    for (j, kj) in ko.iter().enumerate() {
                        for (r, w) in kj.iter().enumerate() {
                            let src = i as isize + (r as isize - half) * dilation as isize;
                            if src >= 0 && (src as usize) < len {
                                s += w * x[src as usize][j];
                            }
                        }
                    }
                    s
                })
                .collect()
        })
        .collect()
}

#[test]
fn linear_identity_and_hand_arithmetic() {
    let (store, ids) = store_with(&[
        ("x", vec![2], vec![1.0, 2.0]),
        ("w", vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]),
        ("b", vec![2], vec![0.0, 0.0]),
    ]);
    let mut g = Graph::new();
    let (x, w, b) = (
        g.param(&store, ids[0]),
        g.param(&store, ids[1]),
        g.param(&store, ids[2]),
    );
    let y = g.linear(x, w, Some(b)).unwrap();
    assert_eq!(g.value(y).data(), &[1.0, 2.0]);

    let (store, ids) = store_with(&[
        ("x", vec![2], vec![1.0, 1.0]),
        ("w", vec![1, 2], vec![2.0, 3.0]),
        ("b", vec![1], vec![-5.0]),
    ]);
    let mut g = Graph::new();
    let (x, w, b) = (
        g.param(&store, ids[0]),
        g.param(&store, ids[1]),
        g.param(&store, ids[2]),
    );
    let y = g.linear(x, w, Some(b)).unwrap();
    let scalar_oracle = 1.0 * 2.0 + 1.0 * 3.0 - 5.0;
    assert_eq!(g.value(y).data(), &[scalar_oracle]);
}

#[test]
fn linear_shape_mismatch_is_dimension_error() {
    let (store, ids) = store_with(&[("x", vec![3], vec![1.0; 3]), ("w", vec![2, 2], vec![1.0; 4])]);
    let mut g = Graph::new();
    let (x, w) = (g.param(&store, ids[0]), g.param(&store, ids[1]));
    assert!(matches!(g.linear(x, w, None), Err(Error::Dimension { .. })));
}

#[test]
fn linear_weight_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (mut store, ids) = random_entries(&mut rng, &[("x", vec![4, 3]), ("w", vec![5, 3]), ("b", vec![5])]);
    let err = max_grad_error(&mut store, &ids, |s, g| {
        let (x, w, b) = (g.param(s, ids[0]), g.param(s, ids[1]), g.param(s, ids[2]));
        let y = g.linear(x, w, Some(b))?;
        Ok(g.sum(y))
    })
    .unwrap();
    assert!(err < 1e-6, "relative error {err}");
}

fn gru_store(input: usize, hidden: usize, seed: u64) -> (ParameterStore, GruCell) {
    let mut store = ParameterStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cell = GruCell::new(&mut store, "gru", input, hidden, &mut rng).unwrap();
    (store, cell)
}

#[test]
fn gru_zero_parameters_keep_zero_state() {
    let (mut store, cell) = gru_store(3, 4, 0);
    for id in store.ids().collect::<Vec<_>>() {
        store.value_mut(id).fill(0.0);
    }
    let mut g = Graph::new();
    let x = g.constant(Tensor::vector(vec![0.3, -1.0, 2.0]).unwrap());
    let h = g.constant(Tensor::zeros(&[4]));
    let out = cell.cell(&mut g, &store, x, h).unwrap();
    assert!(g.value(out).data().iter().all(|&v| v == 0.0));
}

#[test]
fn gru_saturated_update_gate_copies_state() {
    let (mut store, cell) = gru_store(3, 4, 2);
    // update-gate slice of the input bias
    for v in &mut store.value_mut(cell.b_ih)[4..8] {
        *v = 50.0;
    }
    let mut g = Graph::new();
    let x = g.constant(Tensor::vector(vec![0.5, -0.2, 0.1]).unwrap());
    let h_prev = vec![0.3, -0.7, 0.9, -0.1];
    let h = g.constant(Tensor::vector(h_prev.clone()).unwrap());
    let out = cell.cell(&mut g, &store, x, h).unwrap();
    for (a, b) in g.value(out).data().iter().zip(&h_prev) {
        assert!((a - b).abs() < 1e-8, "{a} vs {b}");
    }
}

#[test]
fn gru_output_stays_in_open_unit_box() {
    let (store, cell) = gru_store(2, 5, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..50 {
        let mut g = Graph::new();
        let x = g.constant(Tensor::uniform(&[2], 5.0, &mut rng));
        let h = g.constant(Tensor::uniform(&[5], 0.999, &mut rng));
        let out = cell.cell(&mut g, &store, x, h).unwrap();
        assert!(g.value(out).data().iter().all(|v| v.abs() < 1.0));
    }
}

#[test]
fn gru_gradients_match_finite_differences() {
    let (mut store, cell) = gru_store(3, 4, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let h_id = store
        .add("h_prev", Tensor::uniform(&[2, 4], 0.9, &mut rng), true)
        .unwrap();
    let x_id = store.add("x", Tensor::uniform(&[2, 3], 2.0, &mut rng), true).unwrap();
    let err = max_grad_error(&mut store, &[h_id], |s, g| {
        let (x, h) = (g.param(s, x_id), g.param(s, h_id));
        let y = cell.cell(g, s, x, h)?;
        Ok(g.sum_squares(y))
    })
    .unwrap();
    assert!(err < 1e-5, "h_prev relative error {err}");
    let all: Vec<_> = store.ids().collect();
    let err = max_grad_error(&mut store, &all, |s, g| {
        let (x, h) = (g.param(s, x_id), g.param(s, h_id));
        let y = cell.cell(g, s, x, h)?;
        Ok(g.sum_squares(y))
    })
    .unwrap();
    assert!(err < 1e-4, "relative error {err}");
}

#[test]
fn gru_sequence_gradient_matches_finite_differences() {
    let (mut store, cell) = gru_store(2, 3, 6);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let xs = store
        .add("xs", Tensor::uniform(&[2, 4, 2], 2.0, &mut rng), true)
        .unwrap();
    let h0 = store.add("h0", Tensor::uniform(&[2, 3], 0.5, &mut rng), true).unwrap();
    let all: Vec<_> = store.ids().collect();
    let err = max_grad_error(&mut store, &all, |s, g| {
        let (x, h) = (g.param(s, xs), g.param(s, h0));
        let (states, last) = cell.run(g, s, x, h)?;
        let a = g.sum_squares(states);
        let b = g.sum(last);
        g.add(a, b)
    })
    .unwrap();
    assert!(err < 1e-4, "relative error {err}");
}

fn conv(
    x: Vec<f64>,
    shape: Vec<usize>,
    kernel: Vec<f64>,
    kshape: Vec<usize>,
    dilation: usize,
) -> crate::Result<Tensor> {
    let mut g = Graph::new();
    let x = g.constant(Tensor::new(shape, x)?);
    let k = g.constant(Tensor::new(kshape, kernel)?);
    let y = g.dilated_conv1d(x, k, None, dilation)?;
    Ok(g.value(y).clone())
}

#[test]
fn conv_one_by_one_identity() {
    let x = vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
    let y = conv(x.clone(), vec![3, 2], vec![1.0, 0.0, 0.0, 1.0], vec![2, 2, 1], 1).unwrap();
    assert_eq!(y.data(), &x[..]);
}

#[test]
fn conv_hand_examples_match_direct_sum() {
    let y = conv(vec![1.0, 2.0, 3.0], vec![3, 1], vec![1.0; 3], vec![1, 1, 3], 1).unwrap();
    let oracle = conv_oracle(&[vec![1.0], vec![2.0], vec![3.0]], &[vec![vec![1.0; 3]]], 1);
    assert_eq!(oracle, vec![vec![3.0], vec![6.0], vec![5.0]]);
    assert_eq!(y.data(), &[3.0, 6.0, 5.0]);

    let xs: Vec<Vec<f64>> = (1..=5).map(|v| vec![v as f64]).collect();
    let oracle = conv_oracle(&xs, &[vec![vec![1.0; 3]]], 2);
    assert_eq!(oracle, vec![vec![4.0], vec![6.0], vec![9.0], vec![6.0], vec![8.0]]);
    let y = conv(
        (1..=5).map(f64::from).collect(),
        vec![5, 1],
        vec![1.0; 3],
        vec![1, 1, 3],
        2,
    )
    .unwrap();
    assert_eq!(y.data(), &[4.0, 6.0, 9.0, 6.0, 8.0]);
}

#[test]
fn conv_random_multichannel_matches_direct_sum() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for dilation in 1..=4 {
        let (len, c_in, c_out, k) = (7, 3, 2, 5);
        let x: Vec<Vec<f64>> = (0..len)
            .map(|_| (0..c_in).map(|_| rng.gen_range(-2.0..2.0)).collect())
            .collect();
        let kernel: Vec<Vec<Vec<f64>>> = (0..c_out)
            .map(|_| {
                (0..c_in)
                    .map(|_| (0..k).map(|_| rng.gen_range(-2.0..2.0)).collect())
                    .collect()
            })
            .collect();
        let y = conv(
            x.concat(),
            vec![len, c_in],
            kernel.iter().flatten().flatten().copied().collect(),
            vec![c_out, c_in, k],
            dilation,
        )
        .unwrap();
        assert_eq!(y.shape(), &[len, c_out]);
        for (a, b) in y.data().iter().zip(conv_oracle(&x, &kernel, dilation).concat()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn conv_even_kernel_is_configuration_error() {
    let err = conv(vec![1.0; 4], vec![4, 1], vec![1.0; 2], vec![1, 1, 2], 1).unwrap_err();
    assert!(matches!(err, Error::Config(_)));
}

#[test]
fn conv_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let (mut store, ids) = random_entries(&mut rng, &[("x", vec![2, 6, 3]), ("k", vec![4, 3, 3]), ("b", vec![4])]);
    let err = max_grad_error(&mut store, &ids, |s, g| {
        let (x, k, b) = (g.param(s, ids[0]), g.param(s, ids[1]), g.param(s, ids[2]));
        let y = g.dilated_conv1d(x, k, Some(b), 2)?;
        Ok(g.sum_squares(y))
    })
    .unwrap();
    assert!(err < 1e-4, "relative error {err}");
}

fn cross_entropy(logits: Vec<f64>, label: usize) -> crate::Result<f64> {
    let mut g = Graph::new();
    let x = g.constant(Tensor::vector(logits)?);
    let l = g.softmax_cross_entropy(x, &[label])?;
    Ok(g.value(l).item())
}

#[test]
fn cross_entropy_examples() {
    let uniform = cross_entropy(vec![0.7; 5], 3).unwrap();
    assert!((uniform - 5f64.ln()).abs() < 1e-12);
    assert!((uniform - 1.609438).abs() < 1e-6);
    assert!(cross_entropy(vec![50.0, -50.0], 0).unwrap() < 1e-20);
    assert!(matches!(cross_entropy(vec![0.0; 3], 3), Err(Error::Index(_))));
}

#[test]
fn cross_entropy_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let (mut store, ids) = random_entries(&mut rng, &[("logits", vec![3, 4])]);
    let err = max_grad_error(&mut store, &ids, |s, g| {
        let x = g.param(s, ids[0]);
        g.softmax_cross_entropy(x, &[0, 3, 1])
    })
    .unwrap();
    assert!(err < 1e-6, "relative error {err}");
}

#[test]
fn softmax_rows_lie_on_simplex() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let logits: Vec<f64> = (0..60).map(|_| rng.gen_range(-30.0..30.0)).collect();
    for row in softmax_rows(&logits, 6).chunks(6) {
        assert!(row.iter().all(|&p| p >= 0.0));
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn backward_of_constant_loss_leaves_zero_gradients() {
    let (mut store, ids) = store_with(&[("p", vec![3], vec![1.0, 2.0, 3.0])]);
    let mut g = Graph::new();
    let _p = g.param(&store, ids[0]);
    let c = g.constant(Tensor::scalar(4.0));
    g.backward(c, &mut store).unwrap();
    assert!(store.grad(ids[0]).data().iter().all(|&v| v == 0.0));
}

#[test]
fn backward_of_sum_of_squares_is_twice_p_and_accumulates() {
    let (mut store, ids) = store_with(&[("p", vec![3], vec![1.0, -2.0, 0.5])]);
    let mut g = Graph::new();
    let p = g.param(&store, ids[0]);
    let l = g.sum_squares(p);
    g.backward(l, &mut store).unwrap();
    assert_eq!(store.grad(ids[0]).data(), &[2.0, -4.0, 1.0]);
    g.backward(l, &mut store).unwrap();
    assert_eq!(store.grad(ids[0]).data(), &[4.0, -8.0, 2.0]);
}

#[test]
fn backward_rejects_non_scalar_loss() {
    let (mut store, ids) = store_with(&[("p", vec![3], vec![1.0, 2.0, 3.0])]);
    let mut g = Graph::new();
    let p = g.param(&store, ids[0]);
    assert!(matches!(g.backward(p, &mut store), Err(Error::Contract(_))));
}

#[test]
fn frozen_parameters_receive_no_gradient() {
    let (mut store, ids) = store_with(&[("p", vec![2], vec![1.0, 2.0])]);
    store.set_trainable(ids[0], false);
    let mut g = Graph::new();
    let p = g.param(&store, ids[0]);
    let l = g.sum_squares(p);
    g.backward(l, &mut store).unwrap();
    assert!(store.grad(ids[0]).data().iter().all(|&v| v == 0.0));
}

#[test]
fn non_finite_forward_value_names_first_node() {
    let (mut store, ids) = store_with(&[("p", vec![2], vec![1e200, 1.0])]);
    let mut g = Graph::new();
    let p = g.param(&store, ids[0]);
    let sq = g.mul(p, p).unwrap();
    let l = g.sum(sq);
    match g.backward(l, &mut store) {
        Err(Error::NonFinite { node, op, phase }) => {
            assert_eq!((node, op, phase), (sq.index(), "mul", "forward"));
        }
        other => panic!("expected non-finite error, got {other:?}"),
    }
    assert!(store.grad(ids[0]).data().iter().all(|&v| v == 0.0));
}

#[test]
fn tensor_rejects_bad_shapes_and_non_finite_entries() {
    assert!(matches!(
        Tensor::new(vec![2, 2], vec![1.0; 3]),
        Err(Error::Dimension { .. })
    ));
    assert!(matches!(
        Tensor::new(vec![2], vec![1.0, f64::NAN]),
        Err(Error::Contract(_))
    ));
}

#[test]
fn parameter_shapes_are_immutable() {
    let (mut store, ids) = store_with(&[("p", vec![2], vec![1.0, 2.0])]);
    assert!(store.set_value(ids[0], Tensor::vector(vec![1.0; 3]).unwrap()).is_err());
    assert!(store.add("p", Tensor::scalar(1.0), false).is_err());
}

/// Every elementwise and structural primitive against central differences
/// on random inputs in [−2, 2].
#[test]
fn all_primitives_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for trial in 0..5 {
        let (mut store, ids) = random_entries(
            &mut rng,
            &[
                ("a", vec![2, 3, 4]),
                ("b", vec![2, 3, 4]),
                ("v", vec![2, 4]),
                ("t", vec![5, 4]),
            ],
        );
        let err = max_grad_error(&mut store, &ids, |s, g| {
            let (a, b, v, t) = (
                g.param(s, ids[0]),
                g.param(s, ids[1]),
                g.param(s, ids[2]),
                g.param(s, ids[3]),
            );
            let sig = g.sigmoid(a);
            let th = g.tanh(b);
            let ge = g.gelu(a);
            let si = g.silu(b);
            let co = g.cos(a);
            let m = g.mul(sig, th)?;
            let e = g.expand(v, 1, 3)?;
            let s1 = g.add(m, e)?;
            let s2 = g.sub(ge, si)?;
            let s2 = g.scale(s2, 0.7);
            let cat = g.concat(&[s1, s2, co])?;
            let nar = g.narrow(cat, 2, 7)?;
            let sel0 = g.select(nar, 1, 0)?;
            let sel2 = g.select(nar, 1, 2)?;
            let st = g.stack(&[sel2, sel0], 0)?;
            let rs = g.reshape(st, &[4, 7])?;
            let rows = g.gather(t, &[4, 0, 0, 2])?;
            let logits = g.concat(&[rs, rows])?;
            let ce = g.softmax_cross_entropy(logits, &[0, 10, 3, 6])?;
            let sq = g.sum_squares(rs);
            let sm = g.sum(logits);
            let l = g.add(ce, sq)?;
            g.add(l, sm)
        })
        .unwrap();
        assert!(err < 1e-4, "trial {trial}: relative error {err}");
    }
}

#[test]
fn forward_is_pure_and_bit_identical() {
    let (store, cell) = gru_store(3, 4, 30);
    let run = || {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![2, 5, 3], (0..30).map(|i| (i as f64).sin()).collect()).unwrap());
        let h = g.constant(Tensor::zeros(&[2, 4]));
        let (states, _) = cell.run(&mut g, &store, x, h).unwrap();
        g.value(states).clone()
    };
    assert_eq!(run(), run());
}

mod props {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn conv_preserves_length(len in 1usize..12, half in 0usize..3, dilation in 1usize..5) {
            let k = 2 * half + 1;
            let y = conv(vec![1.0; len * 2], vec![len, 2], vec![0.5; 3 * 2 * k], vec![3, 2, k], dilation).unwrap();
            prop_assert_eq!(y.shape(), &[len, 3]);
        }
    }
}
