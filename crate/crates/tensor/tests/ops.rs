use noiseproj_tensor::gradcheck::max_relative_error;
use noiseproj_tensor::{Tape, Tensor, TensorError};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.5..1.5)).collect()).unwrap()
}

fn positive(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(0.3..2.0)).collect()).unwrap()
}

fn weights(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

#[test]
fn matmul_identity_padded() {
    let tape = Tape::new();
    let a = tape.constant(&Tensor::new(&[2, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap());
    let b = tape.constant(&Tensor::new(&[3, 2], vec![1., 0., 0., 1., 0., 0.]).unwrap());
    let c = a.matmul(b).unwrap();
    assert_eq!(c.shape(), vec![2, 2]);
    assert_eq!(c.data(), vec![1., 2., 4., 5.]);
}

#[test]
fn softmax_of_zeros_is_uniform() {
    let tape = Tape::new();
    let x = tape.constant(&Tensor::from_vec(vec![0.0, 0.0]));
    assert_eq!(x.softmax().unwrap().data(), vec![0.5, 0.5]);
}

#[test]
fn log_exp_round_trip() {
    let tape = Tape::new();
    let x = tape.constant(&Tensor::scalar(1.5));
    assert!((x.exp().ln().item() - 1.5).abs() < 1e-12);
}

#[test]
fn sum_of_squares_gradient() {
    let tape = Tape::new();
    let x = tape.leaf(&Tensor::from_vec(vec![1.0, 2.0, 3.0]).with_grad());
    let loss = x.square().sum();
    let grads = tape.backward(loss).unwrap();
    assert_eq!(grads.get(x).unwrap(), &[2.0, 4.0, 6.0]);
}

#[test]
fn unused_parameter_gets_no_gradient() {
    let tape = Tape::new();
    let x = tape.leaf(&Tensor::from_vec(vec![1.0, 2.0]).with_grad());
    let y = tape.leaf(&Tensor::from_vec(vec![3.0]).with_grad());
    let _unused = y.scale(2.0);
    let grads = tape.backward(x.sum()).unwrap();
    assert!(grads.get(y).is_none());
    let mut params = noiseproj_tensor::ParamSet::new();
    params.push("x", Tensor::from_vec(vec![1.0, 2.0]));
    let py = params.push("y", Tensor::from_vec(vec![3.0]));
    let tape = Tape::new();
    let bound = params.bind(&tape);
    let loss = bound.get(noiseproj_tensor::ParamId(0)).square().sum();
    let grads = tape.backward(loss).unwrap();
    params.absorb_grads(&bound, &grads);
    assert_eq!(params.get(py).grad().unwrap(), &[0.0]);
}

#[test]
fn backward_rejects_non_scalar() {
    let tape = Tape::new();
    let x = tape.leaf(&Tensor::from_vec(vec![1.0, 2.0]).with_grad());
    assert!(matches!(tape.backward(x), Err(TensorError::NonScalarLoss(_))));
}

#[test]
fn shape_errors_name_the_op() {
    let tape = Tape::new();
    let a = tape.constant(&Tensor::zeros(&[2, 3]));
    let b = tape.constant(&Tensor::zeros(&[2, 3]));
    let err = a.matmul(b).unwrap_err();
    assert!(err.to_string().contains("matmul"), "{err}");
    assert!(err.to_string().contains("[2, 3]"), "{err}");
    let c = tape.constant(&Tensor::zeros(&[4]));
    assert!(matches!(a.add(c), Err(TensorError::ShapeMismatch { op: "add", .. })));
}

#[test]
fn ops_do_not_mutate_inputs() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = random(&[2, 4, 4, 3], &mut rng);
    let tape = Tape::new();
    let v = tape.leaf(&x.clone().with_grad());
    let y = v.im2col3x3().unwrap().softmax().unwrap().layer_norm(1e-5).unwrap().sum();
    tape.backward(y).unwrap();
    assert_eq!(v.data(), x.data());
}

#[test]
fn broadcasting_forms() {
    let tape = Tape::new();
    let a = tape.constant(&Tensor::new(&[2, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap());
    let row = tape.constant(&Tensor::from_vec(vec![10., 20., 30.]));
    let col = tape.constant(&Tensor::new(&[2, 1], vec![100., 200.]).unwrap());
    assert_eq!(a.add(row).unwrap().data(), vec![11., 22., 33., 14., 25., 36.]);
    assert_eq!(a.mul(col).unwrap().data(), vec![100., 200., 300., 800., 1000., 1200.]);
    let s = tape.constant(&Tensor::scalar(2.0));
    assert_eq!(a.div(s).unwrap().data(), vec![0.5, 1., 1.5, 2., 2.5, 3.]);
}

#[test]
fn gradcheck_elementwise_and_broadcast() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let inputs = vec![random(&[3, 4], &mut rng), random(&[4], &mut rng), positive(&[3, 1], &mut rng)];
    let err = max_relative_error(&inputs, H, |tape, v| {
        let w = tape.constant(&Tensor::new(&[3, 4], weights(12, &mut ChaCha8Rng::seed_from_u64(1))).unwrap());
        let a = v[0].add(v[1])?.mul(v[2])?;
        let b = v[0].sub(v[1])?.div(v[2])?;
        Ok(a.mul(b)?.mul(w)?.sum())
    })
    .unwrap();
    assert!(err < TOL, "{err}");
}

#[test]
fn gradcheck_unary() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let inputs = vec![random(&[10], &mut rng), positive(&[10], &mut rng)];
    let err = max_relative_error(&inputs, H, |tape, v| {
        let w = tape.constant(&Tensor::from_vec(weights(10, &mut ChaCha8Rng::seed_from_u64(2))));
        let x = v[0];
        let p = v[1];
        let terms = [
            x.neg(),
            x.exp(),
            p.ln(),
            p.sqrt(),
            x.square(),
            x.tanh(),
            x.sigmoid(),
            x.silu(),
            x.softplus(),
            x.scale(-0.7),
            x.add_scalar(3.0),
            x.clamp(-2.0, 2.0),
        ];
        let mut total = tape.constant(&Tensor::scalar(0.0));
        for t in terms {
            total = total.add(t.mul(w)?.sum())?;
        }
        Ok(total)
    })
    .unwrap();
    assert!(err < TOL, "{err}");
}

#[test]
fn softplus_is_stable_for_large_inputs() {
    let tape = Tape::new();
    let x = tape.constant(&Tensor::from_vec(vec![-800.0, 0.0, 800.0]));
    let y = x.softplus().data();
    assert_eq!(y[0], 0.0);
    assert!((y[1] - std::f64::consts::LN_2).abs() < 1e-15);
    assert_eq!(y[2], 800.0);
}

#[test]
fn gradcheck_matmul_and_reductions() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let inputs = vec![random(&[2, 3, 4], &mut rng), random(&[4, 5], &mut rng)];
    let err = max_relative_error(&inputs, H, |tape, v| {
        let y = v[0].matmul(v[1])?;
        let w = tape.constant(&Tensor::new(&[3, 5], weights(15, &mut ChaCha8Rng::seed_from_u64(3))).unwrap());
        let a = y.sum_axis(0)?.mul(w)?.sum();
        let b = y.mean_axis(2)?.square().mean();
        let c = y.transpose_last2()?.reshape(&[10, 3])?.square().sum().scale(0.1);
        Ok(a.add(b)?.add(c)?)
    })
    .unwrap();
    assert!(err < TOL, "{err}");
}

#[test]
fn gradcheck_softmax_family_and_layer_norm() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let inputs = vec![random(&[4, 6], &mut rng)];
    let err = max_relative_error(&inputs, H, |tape, v| {
        let w = tape.constant(&Tensor::new(&[4, 6], weights(24, &mut ChaCha8Rng::seed_from_u64(4))).unwrap());
        let a = v[0].softmax()?.mul(w)?.sum();
        let b = v[0].log_softmax()?.pick(&[0, 5, 2, 3])?.sum();
        let c = v[0].layer_norm(1e-5)?.mul(w)?.sum();
        Ok(a.add(b)?.add(c)?)
    })
    .unwrap();
    assert!(err < TOL, "{err}");
}

#[test]
fn gradcheck_structural_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let inputs = vec![random(&[3, 2], &mut rng), random(&[3, 4], &mut rng)];
    let err = max_relative_error(&inputs, H, |tape, v| {
        let cat = tape.concat_last(&[v[0], v[1]])?;
        let g = cat.gather_rows(&[2, 0, 2, 1])?;
        let w = tape.constant(&Tensor::new(&[4, 6], weights(24, &mut ChaCha8Rng::seed_from_u64(5))).unwrap());
        Ok(g.mul(w)?.tanh().sum())
    })
    .unwrap();
    assert!(err < TOL, "{err}");
}

#[test]
fn gradcheck_spatial_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let inputs = vec![random(&[2, 4, 4, 3], &mut rng), random(&[27, 2], &mut rng)];
    let err = max_relative_error(&inputs, H, |tape, v| {
        let conv = v[0].im2col3x3()?.matmul(v[1])?;
        let pooled = conv.avg_pool2()?.silu();
        let up = pooled.upsample2()?;
        let w = tape.constant(&Tensor::new(&[2, 4, 4, 2], weights(64, &mut ChaCha8Rng::seed_from_u64(6))).unwrap());
        Ok(up.mul(w)?.sum().add(conv.square().mean())?)
    })
    .unwrap();
    assert!(err < TOL, "{err}");
}

#[test]
fn gradcheck_cross_attention() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    // two segments of 3 queries, attending to 2 and 3 key rows; 2 heads of width 2
    let inputs = vec![random(&[6, 4], &mut rng), random(&[5, 4], &mut rng), random(&[5, 4], &mut rng)];
    let err = max_relative_error(&inputs, H, |tape, v| {
        let out = tape.cross_attention(v[0], v[1], v[2], 2, 3, &[0, 2, 5])?;
        let w = tape.constant(&Tensor::new(&[6, 4], weights(24, &mut ChaCha8Rng::seed_from_u64(7))).unwrap());
        Ok(out.mul(w)?.sum())
    })
    .unwrap();
    assert!(err < TOL, "{err}");
}

#[test]
fn attention_over_single_key_copies_value() {
    let mut rng = ChaCha8Rng::seed_from_u64(18);
    let tape = Tape::new();
    let q = tape.constant(&random(&[3, 4], &mut rng));
    let k = tape.constant(&random(&[1, 4], &mut rng));
    let v = tape.constant(&random(&[1, 4], &mut rng));
    let out = tape.cross_attention(q, k, v, 2, 3, &[0, 1]).unwrap().data();
    let vd = v.data();
    for row in out.chunks(4) {
        assert_eq!(row, &vd[..]);
    }
}

#[test]
fn tape_evaluation_is_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let tape = Tape::new();
        let x = tape.leaf(&random(&[2, 4, 4, 3], &mut rng).with_grad());
        let w = tape.leaf(&random(&[27, 5], &mut rng).with_grad());
        let y = x.im2col3x3().unwrap().matmul(w).unwrap().silu().mean();
        let g = tape.backward(y).unwrap();
        (y.item().to_bits(), g.get(w).unwrap().iter().map(|v| v.to_bits()).collect::<Vec<_>>())
    };
    assert_eq!(run(), run());
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(values in proptest::collection::vec(-50.0f64..50.0, 1..40)) {
        let tape = Tape::new();
        let x = tape.constant(&Tensor::from_vec(values));
        let total: f64 = x.softmax().unwrap().data().iter().sum();
        prop_assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn matmul_gradients_match_finite_differences(seed in 0u64..1000, m in 1usize..4, k in 1usize..4, n in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs = vec![random(&[m, k], &mut rng), random(&[k, n], &mut rng)];
        let err = max_relative_error(&inputs, H, |_, v| Ok(v[0].matmul(v[1])?.tanh().sum())).unwrap();
        prop_assert!(err < TOL, "{}", err);
    }
}
