//! Frozen numeric oracles and structural properties for the tape ops.

use auxnas::gradcheck::{self, Closure, DEFAULT_EPS};
use auxnas::params::{ParamGroup, ParamStore};
use auxnas::tape::{BnState, Tape};
use auxnas::tensor::Tensor;
use proptest::prelude::*;

fn t2(rows: &[Vec<f64>]) -> Tensor {
    Tensor::from_rows(rows).unwrap()
}

#[test]
fn linear_identity_weight_passes_input_through() {
    let mut tape = Tape::new();
    let x = tape.input(t2(&[vec![1.0, 2.0]])).unwrap();
    let w = tape.input(t2(&[vec![1.0, 0.0], vec![0.0, 1.0]])).unwrap();
    let y = tape.linear(x, w, None).unwrap();
    assert_eq!(tape.value(y), &t2(&[vec![1.0, 2.0]]));
}

#[test]
fn linear_scalar_arithmetic_oracle() {
    // [1, -1] . [[2], [3]] = 1*2 + (-1)*3 = -1
    let mut tape = Tape::new();
    let x = tape.input(t2(&[vec![1.0, -1.0]])).unwrap();
    let w = tape.input(t2(&[vec![2.0], vec![3.0]])).unwrap();
    let y = tape.linear(x, w, None).unwrap();
    assert_eq!(tape.value(y), &t2(&[vec![-1.0]]));
}

#[test]
fn linear_zero_input_gives_zero_output() {
    let mut tape = Tape::new();
    let x = tape.input(Tensor::zeros(vec![2, 3])).unwrap();
    let w = tape.input(t2(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]])).unwrap();
    let y = tape.linear(x, w, None).unwrap();
    assert!(tape.value(y).data().iter().all(|v| *v == 0.0));
}

#[test]
fn concat_oracles() {
    let mut tape = Tape::new();
    let a = tape.input(t2(&[vec![1.0]])).unwrap();
    let b = tape.input(t2(&[vec![2.0, 3.0]])).unwrap();
    let c = tape.concat(&[a, b]).unwrap();
    assert_eq!(tape.value(c), &t2(&[vec![1.0, 2.0, 3.0]]));
    let single = tape.concat(&[b]).unwrap();
    assert_eq!(tape.value(single), tape.value(b));
}

#[test]
fn concat_gradient_is_ones_through_sum() {
    // inner(concat([a, b]), ones) sums every entry; da = ones(a)
    let mut tape = Tape::new();
    let a = tape.input(t2(&[vec![1.0, 2.0]])).unwrap();
    let b = tape.input(t2(&[vec![3.0]])).unwrap();
    let c = tape.concat(&[a, b]).unwrap();
    let ones = Tensor::new(vec![1, 3], vec![1.0; 3]).unwrap();
    let loss = tape.inner(c, &ones).unwrap();
    let grads = tape.backward(loss).unwrap();
    assert_eq!(grads.of_node(a).unwrap(), &t2(&[vec![1.0, 1.0]]));
}

#[test]
fn scale_oracles() {
    let mut tape = Tape::new();
    let x = tape.input(t2(&[vec![4.0, -2.0]])).unwrap();
    let zero = tape.input(Tensor::scalar(0.0)).unwrap();
    let one = tape.input(Tensor::scalar(1.0)).unwrap();
    let half = tape.input(Tensor::scalar(0.5)).unwrap();
    let y0 = tape.scale(x, zero).unwrap();
    assert!(tape.value(y0).data().iter().all(|v| *v == 0.0));
    let y1 = tape.scale(x, one).unwrap();
    assert_eq!(tape.value(y1), tape.value(x));
    let yh = tape.scale(x, half).unwrap();
    assert_eq!(tape.value(yh), &t2(&[vec![2.0, -1.0]]));
}

#[test]
fn batchnorm_zero_variance_columns_vanish() {
    // constant columns center to zero; eps guards the division
    let mut tape = Tape::new();
    let x = tape.input(t2(&[vec![3.0, 1.0], vec![3.0, 2.0]])).unwrap();
    let gamma = tape.input(Tensor::new(vec![2], vec![1.0, 1.0]).unwrap()).unwrap();
    let beta = tape.input(Tensor::zeros(vec![2])).unwrap();
    let mut bn = BnState::new(2);
    let y = tape.batchnorm(x, gamma, beta, true, &mut bn).unwrap();
    let v = tape.value(y).data();
    assert_eq!(v[0], 0.0);
    assert_eq!(v[2], 0.0);
}

#[test]
fn batchnorm_affine_on_standardized_input() {
    // columns already have mean 0 and variance 1; output = gamma*xhat + beta
    let mut tape = Tape::new();
    let x = tape.input(t2(&[vec![1.0], vec![-1.0]])).unwrap();
    let gamma = tape.input(Tensor::new(vec![1], vec![2.0]).unwrap()).unwrap();
    let beta = tape.input(Tensor::new(vec![1], vec![1.0]).unwrap()).unwrap();
    let mut bn = BnState::new(1);
    let y = tape.batchnorm(x, gamma, beta, true, &mut bn).unwrap();
    let v = tape.value(y).data();
    // xhat = x / sqrt(1 + eps); 2*xhat + 1
    let xhat = 1.0 / (1.0f64 + 1e-5).sqrt();
    assert!((v[0] - (2.0 * xhat + 1.0)).abs() < 1e-12);
    assert!((v[1] - (-2.0 * xhat + 1.0)).abs() < 1e-12);
}

#[test]
fn batchnorm_eval_mode_uses_running_stats() {
    // running mean 0, var 1 -> gamma * x / sqrt(1+eps) + beta, any batch
    let mut tape = Tape::new();
    let x = tape.input(t2(&[vec![3.0, -2.0]])).unwrap();
    let gamma = tape.input(Tensor::new(vec![2], vec![2.0, 2.0]).unwrap()).unwrap();
    let beta = tape.input(Tensor::new(vec![2], vec![1.0, 1.0]).unwrap()).unwrap();
    let mut bn = BnState::new(2);
    let y = tape.batchnorm(x, gamma, beta, false, &mut bn).unwrap();
    let v = tape.value(y).data();
    let s = 1.0 / (1.0f64 + 1e-5).sqrt();
    assert!((v[0] - (2.0 * 3.0 * s + 1.0)).abs() < 1e-12);
    assert!((v[1] - (2.0 * -2.0 * s + 1.0)).abs() < 1e-12);
}

#[test]
fn relu_mse_l1_oracles() {
    let mut tape = Tape::new();
    let x = tape.input(t2(&[vec![-1.0, 0.0, 2.0]])).unwrap();
    let y = tape.relu(x).unwrap();
    assert_eq!(tape.value(y), &t2(&[vec![0.0, 0.0, 2.0]]));

    let p = tape.input(t2(&[vec![0.3, -0.7]])).unwrap();
    let self_mse = tape.mse(p, &t2(&[vec![0.3, -0.7]])).unwrap();
    assert_eq!(tape.value(self_mse).item(), 0.0);

    let a = tape.input(Tensor::scalar(0.5)).unwrap();
    let b = tape.input(Tensor::scalar(0.25)).unwrap();
    let c = tape.input(Tensor::scalar(0.25)).unwrap();
    let l1 = tape.l1_norm(&[a, b, c]).unwrap();
    assert_eq!(tape.value(l1).item(), 1.0);
}

#[test]
fn mse_backward_hand_oracle() {
    // L = mean((x - 0)^2) over one element => dL/dx = 2x = 6 at x=3
    let mut tape = Tape::new();
    let x = tape.input(t2(&[vec![3.0]])).unwrap();
    let loss = tape.mse(x, &Tensor::zeros(vec![1, 1])).unwrap();
    let grads = tape.backward(loss).unwrap();
    assert_eq!(grads.of_node(x).unwrap(), &t2(&[vec![6.0]]));
}

#[test]
fn unused_parameter_gets_exact_zero_gradient() {
    let mut store = ParamStore::new();
    let used = store
        .insert("used", ParamGroup::PrimaryW, t2(&[vec![1.0], vec![2.0]]))
        .unwrap();
    let unused = store
        .insert("unused", ParamGroup::PrimaryW, t2(&[vec![5.0]]))
        .unwrap();
    let mut tape = Tape::new();
    let x = tape.input(t2(&[vec![1.0, 1.0]])).unwrap();
    let w = tape.param(used, &store).unwrap();
    tape.param(unused, &store).unwrap();
    let y = tape.linear(x, w, None).unwrap();
    let loss = tape.mse(y, &Tensor::zeros(vec![1, 1])).unwrap();
    let grads = tape.backward(loss).unwrap();
    let pg = grads.param_grads(&tape, &store);
    assert!(pg[unused.0].data().iter().all(|v| *v == 0.0));
    assert!(pg[used.0].data().iter().any(|v| *v != 0.0));
}

#[test]
fn l1_subgradient_is_sign_with_zero_at_zero() {
    let mut tape = Tape::new();
    let a = tape.input(Tensor::scalar(0.3)).unwrap();
    let b = tape.input(Tensor::scalar(-0.2)).unwrap();
    let c = tape.input(Tensor::scalar(0.0)).unwrap();
    let l1 = tape.l1_norm(&[a, b, c]).unwrap();
    let grads = tape.backward(l1).unwrap();
    assert_eq!(grads.of_node(a).unwrap().item(), 1.0);
    assert_eq!(grads.of_node(b).unwrap().item(), -1.0);
    assert_eq!(grads.of_node(c).unwrap().item(), 0.0);
}

fn small_graph_loss(tape: &mut Tape, x: auxnas::tape::NodeId) -> auxnas::tape::NodeId {
    let w = tape.input(t2(&[vec![0.4, -0.3], vec![0.7, 0.1]])).unwrap();
    let h = tape.linear(x, w, None).unwrap();
    let h = tape.relu(h).unwrap();
    tape.mse(h, &t2(&[vec![0.2, -0.1], vec![0.5, 0.3]])).unwrap()
}

#[test]
fn replay_determinism_is_bitwise() {
    let run = || {
        let mut tape = Tape::new();
        let x = tape.input(t2(&[vec![0.3, 1.2], vec![-0.8, 0.5]])).unwrap();
        let loss = small_graph_loss(&mut tape, x);
        let grads = tape.backward(loss).unwrap();
        (
            tape.value(loss).item().to_bits(),
            grads.of_node(x).unwrap().data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
        )
    };
    assert_eq!(run(), run());
}

#[test]
fn backward_is_linear_in_root_scaling() {
    // power of two: scaling by c is exact, so the check can stay bitwise
    let c = 4.0;
    let grads_of = |scale: f64| {
        let mut tape = Tape::new();
        let x = tape.input(t2(&[vec![0.3, 1.2], vec![-0.8, 0.5]])).unwrap();
        let loss = small_graph_loss(&mut tape, x);
        let scaled = tape.mul_const(loss, scale).unwrap();
        let grads = tape.backward(scaled).unwrap();
        grads.of_node(x).unwrap().data().to_vec()
    };
    let base = grads_of(1.0);
    let scaled = grads_of(c);
    for (g1, gc) in base.iter().zip(&scaled) {
        assert_eq!(gc.to_bits(), (c * g1).to_bits());
    }
}

// --- gradient checks for each primitive against central differences ---

fn check_with_resample(f: Closure, make: &dyn Fn(u64) -> Vec<Tensor>) -> f64 {
    for attempt in 0..20 {
        let inputs = make(attempt);
        let kink = gradcheck::kink_distance(f, &inputs).unwrap();
        if kink > 10.0 * DEFAULT_EPS {
            return gradcheck::grad_check(f, &inputs, DEFAULT_EPS).unwrap();
        }
    }
    panic!("no kink-free sample point found");
}

fn rand_tensor(seed: u64, tag: &str, shape: Vec<usize>) -> Tensor {
    use rand::Rng;
    let mut r = auxnas::rng::stream(seed, tag);
    let numel: usize = shape.iter().product();
    let data = (0..numel).map(|_| r.gen_range(-1.5..1.5)).collect();
    Tensor::new(shape, data).unwrap()
}

#[test]
fn primitive_ops_pass_gradient_check() {
    // one scalar loss per primitive; all under rtol 1e-4
    let target = t2(&[vec![0.1, -0.2], vec![0.3, 0.4]]);

    let linear: Closure = &|tape, ids| {
        let y = tape.linear(ids[0], ids[1], Some(ids[2]))?;
        tape.mse(y, &t2(&[vec![0.1, -0.2], vec![0.3, 0.4]]))
    };
    let relu: Closure = &|tape, ids| {
        let y = tape.relu(ids[0])?;
        tape.mse(y, &t2(&[vec![0.1, -0.2], vec![0.3, 0.4]]))
    };
    let scale_concat_add: Closure = &|tape, ids| {
        let s = tape.scale(ids[0], ids[1])?;
        let cat = tape.concat(&[s, ids[2]])?;
        let sum = tape.add(cat, cat)?;
        let ones = Tensor::new(vec![2, 4], vec![0.3; 8]).unwrap();
        tape.inner(sum, &ones)
    };
    let bn: Closure = &|tape, ids| {
        let mut st = BnState::new(2);
        let y = tape.batchnorm(ids[0], ids[1], ids[2], true, &mut st)?;
        tape.mse(y, &t2(&[vec![0.1, -0.2], vec![0.3, 0.4], vec![-0.5, 0.2]]))
    };
    let xent: Closure = &|tape, ids| tape.softmax_xent(ids[0], &[1, 0]);
    let cosine: Closure = &|tape, ids| {
        let t = t2(&[vec![0.6, -0.8], vec![0.3, 0.9]]);
        tape.cosine_loss(ids[0], &t)
    };
    let l1: Closure = &|tape, ids| {
        let l = tape.l1_norm(&[ids[0], ids[1]])?;
        tape.mul_const(l, 2.5)
    };

    for seed in 0..5u64 {
        let e = check_with_resample(linear, &|a| {
            vec![
                rand_tensor(seed * 100 + a, "x", vec![2, 3]),
                rand_tensor(seed * 100 + a, "w", vec![3, 2]),
                rand_tensor(seed * 100 + a, "b", vec![2]),
            ]
        });
        assert!(e < 1e-4, "linear err {e}");
        let _ = &target;

        let e = check_with_resample(relu, &|a| vec![rand_tensor(seed * 100 + a, "rx", vec![2, 2])]);
        assert!(e < 1e-4, "relu err {e}");

        let e = check_with_resample(scale_concat_add, &|a| {
            vec![
                rand_tensor(seed * 100 + a, "sx", vec![2, 2]),
                rand_tensor(seed * 100 + a, "sa", vec![]),
                rand_tensor(seed * 100 + a, "sc", vec![2, 2]),
            ]
        });
        assert!(e < 1e-4, "scale/concat/add err {e}");

        let e = check_with_resample(bn, &|a| {
            vec![
                rand_tensor(seed * 100 + a, "bx", vec![3, 2]),
                rand_tensor(seed * 100 + a, "bg", vec![2]),
                rand_tensor(seed * 100 + a, "bb", vec![2]),
            ]
        });
        assert!(e < 1e-4, "batchnorm err {e}");

        let e = check_with_resample(xent, &|a| vec![rand_tensor(seed * 100 + a, "lg", vec![2, 3])]);
        assert!(e < 1e-4, "softmax_xent err {e}");

        let e = check_with_resample(cosine, &|a| vec![rand_tensor(seed * 100 + a, "cp", vec![2, 2])]);
        assert!(e < 1e-4, "cosine err {e}");

        let e = check_with_resample(l1, &|a| {
            vec![rand_tensor(seed * 100 + a, "la", vec![]), rand_tensor(seed * 100 + a, "lb", vec![])]
        });
        assert!(e < 1e-4, "l1 err {e}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn prop_mse_nonnegative_and_zero_on_self(data in proptest::collection::vec(-10.0f64..10.0, 4)) {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::new(vec![2, 2], data.clone()).unwrap()).unwrap();
        let zero = tape.mse(x, &Tensor::new(vec![2, 2], data.clone()).unwrap()).unwrap();
        prop_assert_eq!(tape.value(zero).item(), 0.0);
        let l = tape.mse(x, &Tensor::zeros(vec![2, 2])).unwrap();
        prop_assert!(tape.value(l).item() >= 0.0);
    }

    #[test]
    fn prop_scale_matches_elementwise_multiply(
        data in proptest::collection::vec(-10.0f64..10.0, 6),
        alpha in -2.0f64..2.0,
    ) {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::new(vec![2, 3], data.clone()).unwrap()).unwrap();
        let a = tape.input(Tensor::scalar(alpha)).unwrap();
        let y = tape.scale(x, a).unwrap();
        for (got, want) in tape.value(y).data().iter().zip(&data) {
            prop_assert_eq!(got.to_bits(), (alpha * want).to_bits());
        }
    }

    #[test]
    fn prop_relu_never_emits_negative_zero(data in proptest::collection::vec(-1.0f64..1.0, 4)) {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::new(vec![2, 2], data).unwrap()).unwrap();
        let y = tape.relu(x).unwrap();
        for v in tape.value(y).data() {
            prop_assert!(*v >= 0.0);
            prop_assert!(!(*v == 0.0 && v.is_sign_negative()));
        }
    }

    #[test]
    fn prop_linear_gradcheck_random_points(seed in 0u64..500) {
        let f: Closure = &|tape, ids| {
            let y = tape.linear(ids[0], ids[1], None)?;
            tape.mse(y, &Tensor::zeros(vec![2, 2]))
        };
        let inputs = vec![
            rand_tensor(seed, "px", vec![2, 3]),
            rand_tensor(seed, "pw", vec![3, 2]),
        ];
        let err = gradcheck::grad_check(f, &inputs, DEFAULT_EPS).unwrap();
        prop_assert!(err < 1e-4, "err {}", err);
    }
}
