use noiseproj_tensor::{clip_grad_norm, Adam, AdamConfig, ParamSet, Tape, Tensor, TensorError};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn single(values: Vec<f64>) -> ParamSet {
    let mut p = ParamSet::new();
    p.push("w", Tensor::from_vec(values));
    p
}

#[test]
fn zero_gradient_leaves_parameters_unchanged() {
    let mut p = single(vec![0.3, -1.2]);
    let mut adam = Adam::new(&p, AdamConfig::default());
    let before = p.clone();
    for t in p.tensors_mut() {
        t.set_grad(vec![0.0; 2]).unwrap();
    }
    adam.step(&mut p).unwrap();
    assert_eq!(p.iter().next().unwrap().1.data(), before.iter().next().unwrap().1.data());
}

#[test]
fn first_step_moves_by_learning_rate() {
    // m̂ = g, v̂ = g², so the step is lr·g/(|g| + eps) ≈ lr·sign(g)
    let lr = 0.01;
    let mut p = single(vec![1.0, 1.0]);
    let mut adam = Adam::new(&p, AdamConfig { lr, ..Default::default() });
    for t in p.tensors_mut() {
        t.set_grad(vec![3.0, -0.5]).unwrap();
    }
    adam.step(&mut p).unwrap();
    let w = p.iter().next().unwrap().1.data().to_vec();
    let expect0 = 1.0 - lr * 3.0 / (3.0 + 1e-8);
    let expect1 = 1.0 + lr * 0.5 / (0.5 + 1e-8);
    assert!((w[0] - expect0).abs() < 1e-15);
    assert!((w[1] - expect1).abs() < 1e-15);
    assert!(p.iter().next().unwrap().1.grad().is_none(), "grads are cleared");
    assert_eq!(adam.steps_taken(), 1);
}

#[test]
fn missing_gradient_is_an_error() {
    let mut p = single(vec![1.0]);
    let mut adam = Adam::new(&p, AdamConfig::default());
    assert_eq!(adam.step(&mut p), Err(TensorError::MissingGrad("w".into())));
}

#[test]
fn identical_runs_are_bit_identical() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut p = ParamSet::new();
        let w = p.push_fan_in("w", &[3, 2], 3, &mut rng);
        let mut adam = Adam::new(&p, AdamConfig::default());
        for _ in 0..20 {
            let tape = Tape::new();
            let b = p.bind(&tape);
            let x = tape.constant(&Tensor::new(&[1, 3], vec![0.5, -1.0, 2.0]).unwrap());
            let loss = x.matmul(b.get(w)).unwrap().tanh().square().sum();
            let g = tape.backward(loss).unwrap();
            p.absorb_grads(&b, &g);
            adam.step(&mut p).unwrap();
        }
        p.content_hash()
    };
    assert_eq!(run(), run());
}

#[test]
fn clip_is_noop_within_bound() {
    let mut p = single(vec![0.0, 0.0]);
    p.tensors_mut().next().unwrap().set_grad(vec![0.3, 0.4]).unwrap();
    let norm = clip_grad_norm(&mut p, 1.0);
    assert!((norm - 0.5).abs() < 1e-15);
    assert_eq!(p.iter().next().unwrap().1.grad().unwrap(), &[0.3, 0.4]);
}

#[test]
fn clip_scales_uniformly() {
    let mut p = single(vec![0.0, 0.0]);
    p.tensors_mut().next().unwrap().set_grad(vec![6.0, 8.0]).unwrap();
    let norm = clip_grad_norm(&mut p, 1.0);
    assert_eq!(norm, 10.0);
    let g = p.iter().next().unwrap().1.grad().unwrap().to_vec();
    assert!((g[0] - 0.6).abs() < 1e-15 && (g[1] - 0.8).abs() < 1e-15);
}

proptest! {
    #[test]
    fn clipped_norm_within_bound(grads in proptest::collection::vec(-100.0f64..100.0, 1..50), max in 0.01f64..10.0) {
        let mut p = ParamSet::new();
        let half = grads.len() / 2;
        p.push("a", Tensor::zeros(&[half]));
        p.push("b", Tensor::zeros(&[grads.len() - half]));
        {
            let mut it = p.tensors_mut();
            it.next().unwrap().set_grad(grads[..half].to_vec()).unwrap();
            it.next().unwrap().set_grad(grads[half..].to_vec()).unwrap();
        }
        clip_grad_norm(&mut p, max);
        prop_assert!(p.grad_norm() <= max + 1e-9);
    }
}
