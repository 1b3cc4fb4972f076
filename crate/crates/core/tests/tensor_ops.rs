use gbst_core::gradcheck::check_fn;
use gbst_core::tensor::{BackwardFault, ParamStore, Tape, Tensor, Var};
use gbst_core::{Error, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn randn(shape: &[usize], seed: u64) -> Tensor {
    Tensor::randn(shape, 1.0, &mut rng(seed)).unwrap()
}

fn m(rows: &[&[f64]]) -> Tensor {
    Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
}

/// Reduces `y` to a scalar through fixed random weights so every output
/// coordinate carries a distinct gradient.
fn project(tape: &mut Tape, y: Var, seed: u64) -> Result<Var> {
    let shape = tape.value(y).shape().to_vec();
    let w = tape.constant(randn(&shape, seed))?;
    let p = tape.mul(y, w)?;
    tape.sum(p)
}

const H: f64 = 1e-5;

#[test]
fn matmul_identity_and_orthogonal_rows() {
    let mut t = Tape::new();
    let i2 = t.constant(m(&[&[1.0, 0.0], &[0.0, 1.0]])).unwrap();
    let a = t.constant(m(&[&[1.0, 2.0], &[3.0, 4.0]])).unwrap();
    let y = t.matmul(i2, a).unwrap();
    assert_eq!(t.value(y).data(), &[1.0, 2.0, 3.0, 4.0]);

    let r = t.constant(m(&[&[1.0, 0.0]])).unwrap();
    let c = t.constant(m(&[&[0.0], &[5.0]])).unwrap();
    let y = t.matmul(r, c).unwrap();
    assert_eq!(t.value(y).shape(), &[1, 1]);
    assert_eq!(t.value(y).data(), &[0.0]);
}

#[test]
fn matmul_shape_mismatch_is_dimension_error() {
    let mut t = Tape::new();
    let a = t.constant(randn(&[2, 3], 1)).unwrap();
    let b = t.constant(randn(&[2, 3], 2)).unwrap();
    assert!(matches!(t.matmul(a, b), Err(Error::Dimension { .. })));
}

#[test]
fn matmul_gradient_of_sum_matches_differences() {
    let err = check_fn(&[randn(&[3, 4], 3), randn(&[4, 2], 4)], H, 1e-6, None, |t, v| {
        let y = t.matmul(v[0], v[1])?;
        t.sum(y)
    })
    .unwrap();
    assert!(err < 1e-6, "{err}");
}

fn conv_loops(x: &Tensor, w: &Tensor, b: &Tensor) -> Vec<f64> {
    let (l, din) = (x.rows(), x.cols());
    let (k, dout) = (w.shape()[0], w.shape()[2]);
    let pad = (k - 1) / 2;
    let mut out = vec![0.0; l * dout];
    for i in 0..l {
        for o in 0..dout {
            let mut acc = b.data()[o];
            for t in 0..k {
                let src = i as isize + t as isize - pad as isize;
                if src < 0 || src >= l as isize {
                    continue;
                }
                for c in 0..din {
                    acc += x.get(src as usize, c) * w.data()[(t * din + c) * dout + o];
                }
            }
            out[i * dout + o] = acc;
        }
    }
    out
}

#[test]
fn conv_identity_kernel_is_identity() {
    let x = randn(&[6, 3], 5);
    let mut id = vec![0.0; 9];
    for c in 0..3 {
        id[c * 3 + c] = 1.0;
    }
    let mut t = Tape::new();
    let xv = t.constant(x.clone()).unwrap();
    let w = t.constant(Tensor::new(vec![1, 3, 3], id).unwrap()).unwrap();
    let b = t.constant(Tensor::zeros(&[3]).unwrap()).unwrap();
    let y = t.conv1d_same(xv, w, b).unwrap();
    assert_eq!(t.value(y), &x);
}

#[test]
fn conv_averaging_kernel_keeps_constant_interior() {
    let (k, d, l) = (5, 2, 11);
    let mut w = vec![0.0; k * d * d];
    for tap in 0..k {
        for c in 0..d {
            w[(tap * d + c) * d + c] = 1.0 / k as f64;
        }
    }
    let mut t = Tape::new();
    let x = t.constant(Tensor::full(&[l, d], 3.5).unwrap()).unwrap();
    let w = t.constant(Tensor::new(vec![k, d, d], w).unwrap()).unwrap();
    let b = t.constant(Tensor::zeros(&[d]).unwrap()).unwrap();
    let y = t.conv1d_same(x, w, b).unwrap();
    for i in 2..l - 2 {
        for c in 0..d {
            assert!((t.value(y).get(i, c) - 3.5).abs() < 1e-15);
        }
    }
    assert!(t.value(y).get(0, 0) < 3.5, "edges see zero padding");
}

#[test]
fn conv_matches_triple_loop() {
    let (x, w, b) = (randn(&[9, 3], 6), randn(&[5, 3, 3], 7), randn(&[3], 8));
    let mut t = Tape::new();
    let (xv, wv, bv) = (t.constant(x.clone()).unwrap(), t.constant(w.clone()).unwrap(), t.constant(b.clone()).unwrap());
    let y = t.conv1d_same(xv, wv, bv).unwrap();
    let want = conv_loops(&x, &w, &b);
    let diff = t.value(y).data().iter().zip(&want).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(diff < 1e-12, "{diff}");
}

#[test]
fn conv_channel_change_and_short_input() {
    let (x, w, b) = (randn(&[2, 3], 9), randn(&[5, 3, 4], 10), randn(&[4], 11));
    let mut t = Tape::new();
    let (xv, wv, bv) = (t.constant(x.clone()).unwrap(), t.constant(w.clone()).unwrap(), t.constant(b.clone()).unwrap());
    let y = t.conv1d_same(xv, wv, bv).unwrap();
    assert_eq!(t.value(y).shape(), &[2, 4]);
    let diff = t.value(y).data().iter().zip(conv_loops(&x, &w, &b)).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(diff < 1e-12);
}

#[test]
fn conv_even_kernel_is_config_error() {
    let mut t = Tape::new();
    let x = t.constant(randn(&[5, 2], 1)).unwrap();
    let w = t.constant(randn(&[4, 2, 2], 2)).unwrap();
    let b = t.constant(Tensor::zeros(&[2]).unwrap()).unwrap();
    assert!(matches!(t.conv1d_same(x, w, b), Err(Error::Config(_))));
}

#[test]
fn conv_gradients_match_differences() {
    let inputs = [randn(&[7, 3], 12), randn(&[5, 3, 2], 13), randn(&[2], 14)];
    let err = check_fn(&inputs, H, 1e-4, None, |t, v| {
        let y = t.conv1d_same(v[0], v[1], v[2])?;
        project(t, y, 15)
    })
    .unwrap();
    assert!(err < 1e-6, "{err}");
}

#[test]
fn mean_pool_lengths_and_constants() {
    let mut t = Tape::new();
    let x = t.constant(randn(&[8, 2], 1)).unwrap();
    let y = t.mean_pool_1d(x, 2, 2).unwrap();
    assert_eq!(t.value(y).rows(), 4);

    let c = t.constant(Tensor::full(&[9, 3], -1.25).unwrap()).unwrap();
    let y = t.mean_pool_1d(c, 3, 2).unwrap();
    assert!(t.value(y).data().iter().all(|&v| v == -1.25));
}

#[test]
fn mean_pool_matches_loop() {
    let x = randn(&[10, 2], 16);
    let mut t = Tape::new();
    let xv = t.constant(x.clone()).unwrap();
    let y = t.mean_pool_1d(xv, 3, 3).unwrap();
    assert_eq!(t.value(y).shape(), &[3, 2]);
    for j in 0..3 {
        for c in 0..2 {
            let want = (x.get(3 * j, c) + x.get(3 * j + 1, c) + x.get(3 * j + 2, c)) / 3.0;
            assert!((t.value(y).get(j, c) - want).abs() <= 1e-15);
        }
    }
}

#[test]
fn mean_pool_shorter_than_window_is_empty_output() {
    let mut t = Tape::new();
    let x = t.constant(randn(&[2, 2], 1)).unwrap();
    assert!(matches!(t.mean_pool_1d(x, 3, 3), Err(Error::EmptyOutput { .. })));
}

#[test]
fn mean_pool_gradient_matches_differences() {
    let err = check_fn(&[randn(&[11, 3], 17)], H, 1e-4, None, |t, v| {
        let y = t.mean_pool_1d(v[0], 3, 2)?;
        project(t, y, 18)
    })
    .unwrap();
    assert!(err < 1e-6, "{err}");
}

#[test]
fn softmax_uniform_and_stable() {
    let mut t = Tape::new();
    let z = t.constant(Tensor::zeros(&[1, 4]).unwrap()).unwrap();
    let p = t.softmax_last_axis(z).unwrap();
    assert_eq!(t.value(p).data(), &[0.25; 4]);

    let big = t.constant(m(&[&[1000.0, 0.0]])).unwrap();
    let p = t.softmax_last_axis(big).unwrap();
    let v = t.value(p).data();
    assert!((v[0] - 1.0).abs() < 1e-15 && v[1] < 1e-300 && v[1] >= 0.0);
}

#[test]
fn softmax_gradient_matches_differences() {
    let err = check_fn(&[randn(&[1, 4], 19)], H, 1e-6, None, |t, v| {
        let y = t.softmax_last_axis(v[0])?;
        project(t, y, 20)
    })
    .unwrap();
    assert!(err < 1e-6, "{err}");
}

#[test]
fn repeat_upsample_contract() {
    let mut t = Tape::new();
    let x = t.variable(m(&[&[1.0], &[2.0]])).unwrap();
    let same = t.repeat_upsample(x, 1).unwrap();
    assert_eq!(t.value(same).data(), &[1.0, 2.0]);
    let y = t.repeat_upsample(x, 3).unwrap();
    assert_eq!(t.value(y).data(), &[1.0, 1.0, 1.0, 2.0, 2.0, 2.0]);
    assert!(matches!(t.repeat_upsample(x, 0), Err(Error::Config(_))));
    let s = t.sum(y).unwrap();
    let g = t.backward(s).unwrap();
    assert_eq!(g.wrt(x).unwrap(), &[3.0, 3.0]);
}

#[test]
fn backward_through_a_parameter() {
    let mut store = ParamStore::new();
    let p = store.add("p", randn(&[2, 3], 21)).unwrap();

    let mut t = Tape::new();
    let v = t.param(&store, p).unwrap();
    let s = t.sum(v).unwrap();
    t.backward(s).unwrap().accumulate_into(&mut store);
    assert_eq!(store.get(p).grad, vec![1.0; 6]);

    store.zero_grad();
    let mut t = Tape::new();
    let v = t.param(&store, p).unwrap();
    let z = t.scale(v, 0.0).unwrap();
    let s = t.sum(z).unwrap();
    t.backward(s).unwrap().accumulate_into(&mut store);
    assert_eq!(store.get(p).grad, vec![0.0; 6]);
}

#[test]
fn frozen_parameter_gets_no_gradient() {
    let mut store = ParamStore::new();
    let p = store.add("gbst.scorer", randn(&[3, 1], 22)).unwrap();
    let q = store.add("other", randn(&[3, 1], 23)).unwrap();
    assert_eq!(store.set_frozen_prefix("gbst.", true), 1);
    let mut t = Tape::new();
    let (pv, qv) = (t.param(&store, p).unwrap(), t.param(&store, q).unwrap());
    let y = t.mul(pv, qv).unwrap();
    let s = t.sum(y).unwrap();
    t.backward(s).unwrap().accumulate_into(&mut store);
    assert_eq!(store.get(p).grad, vec![0.0; 3]);
    assert_eq!(store.get(q).grad, store.get(p).value.data());
}

#[test]
fn backward_preconditions() {
    let mut t = Tape::new();
    let x = t.variable(randn(&[2, 2], 24)).unwrap();
    assert!(matches!(t.backward(x), Err(Error::NotScalar(_))));
    let s = t.sum(x).unwrap();
    t.backward(s).unwrap();
    assert!(matches!(t.backward(s), Err(Error::TapeConsumed)));
}

#[test]
fn non_finite_values_are_rejected() {
    let mut t = Tape::new();
    let x = t.constant(m(&[&[1e300, 1e300]])).unwrap();
    assert!(matches!(t.mul(x, x), Err(Error::NonFinite("mul"))));
}

#[test]
fn empty_tensors_cannot_be_built() {
    assert!(Tensor::new(vec![0, 3], vec![]).is_err());
    assert!(Tensor::new(vec![2, 2], vec![1.0; 3]).is_err());
}

#[test]
fn plumbing_op_gradients_match_differences() {
    type Build = fn(&mut Tape, &[Var]) -> Result<Var>;
    let cases: Vec<(&str, Vec<Tensor>, Build)> = vec![
        ("add", vec![randn(&[3, 2], 30), randn(&[3, 2], 31)], |t, v| {
            let y = t.add(v[0], v[1])?;
            project(t, y, 1)
        }),
        ("add_bias", vec![randn(&[3, 2], 32), randn(&[2], 33)], |t, v| {
            let y = t.add_bias(v[0], v[1])?;
            project(t, y, 2)
        }),
        ("mul", vec![randn(&[3, 2], 34), randn(&[3, 2], 35)], |t, v| {
            let y = t.mul(v[0], v[1])?;
            project(t, y, 3)
        }),
        ("scale_rows", vec![randn(&[3, 2], 36), randn(&[3, 1], 37)], |t, v| {
            let y = t.scale_rows(v[0], v[1])?;
            project(t, y, 4)
        }),
        ("pad_rows", vec![randn(&[3, 2], 38)], |t, v| {
            let y = t.pad_rows(v[0], 2)?;
            project(t, y, 5)
        }),
        ("slice_rows", vec![randn(&[5, 2], 39)], |t, v| {
            let y = t.slice_rows(v[0], 1, 4)?;
            project(t, y, 6)
        }),
        ("slice_cols", vec![randn(&[3, 5], 40)], |t, v| {
            let y = t.slice_cols(v[0], 2, 5)?;
            project(t, y, 7)
        }),
        ("embedding_gather", vec![randn(&[6, 3], 41)], |t, v| {
            let y = t.embedding_gather(v[0], &[4, 0, 4, 5])?;
            project(t, y, 8)
        }),
        ("layer_norm", vec![randn(&[3, 5], 42), randn(&[5], 43), randn(&[5], 44)], |t, v| {
            let y = t.layer_norm(v[0], v[1], v[2])?;
            project(t, y, 9)
        }),
        ("gelu", vec![randn(&[4, 3], 45)], |t, v| {
            let y = t.gelu(v[0])?;
            project(t, y, 10)
        }),
        ("cross_entropy", vec![randn(&[3, 7], 46)], |t, v| t.cross_entropy_with_logits(v[0], &[6, 0, 3])),
        ("concat", vec![randn(&[3, 2], 47), randn(&[3, 4], 48)], |t, v| {
            let y = t.concat_last_axis(&[v[0], v[1]])?;
            project(t, y, 11)
        }),
        ("transpose", vec![randn(&[3, 4], 49)], |t, v| {
            let y = t.transpose_2d(v[0])?;
            project(t, y, 12)
        }),
    ];
    for (name, inputs, build) in cases {
        let err = check_fn(&inputs, H, 1e-4, None, build).unwrap();
        assert!(err < 1e-6, "{name}: {err}");
    }
}

#[test]
fn gather_out_of_range_is_range_error() {
    let mut t = Tape::new();
    let table = t.constant(randn(&[4, 2], 1)).unwrap();
    assert!(matches!(t.embedding_gather(table, &[1, 4]), Err(Error::Range { id: 4, rows: 4 })));
}

#[test]
fn injected_faults_break_their_op_gradient() {
    let gelu = check_fn(&[randn(&[3, 3], 50)], H, 1e-4, Some(BackwardFault::Gelu), |t, v| {
        let y = t.gelu(v[0])?;
        project(t, y, 13)
    })
    .unwrap();
    let softmax = check_fn(&[randn(&[2, 4], 51)], H, 1e-4, Some(BackwardFault::Softmax), |t, v| {
        let y = t.softmax_last_axis(v[0])?;
        project(t, y, 14)
    })
    .unwrap();
    let conv = check_fn(&[randn(&[5, 2], 52), randn(&[3, 2, 2], 53), randn(&[2], 54)], H, 1e-4, Some(BackwardFault::Conv1d), |t, v| {
        let y = t.conv1d_same(v[0], v[1], v[2])?;
        project(t, y, 15)
    })
    .unwrap();
    for (name, err) in [("gelu", gelu), ("softmax", softmax), ("conv1d", conv)] {
        assert!(err > 1e-2, "{name} fault went unnoticed: {err}");
    }
}

#[test]
fn identical_inputs_give_bit_identical_gradients() {
    let run = || {
        let mut t = Tape::new();
        let x = t.variable(randn(&[6, 4], 60)).unwrap();
        let w = t.variable(randn(&[3, 4, 4], 61)).unwrap();
        let b = t.variable(randn(&[4], 62)).unwrap();
        let y = t.conv1d_same(x, w, b).unwrap();
        let y = t.gelu(y).unwrap();
        let y = t.softmax_last_axis(y).unwrap();
        let s = project(&mut t, y, 63).unwrap();
        let g = t.backward(s).unwrap();
        (t.value(s).data().to_vec(), g.wrt(x).unwrap().to_vec(), g.wrt(w).unwrap().to_vec())
    };
    assert_eq!(run(), run());
}
