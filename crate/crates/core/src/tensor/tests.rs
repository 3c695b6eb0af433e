use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::Error;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

fn gradcheck(inputs: &[Tensor], f: &dyn Fn(&mut Tape, &[Var]) -> Var) -> f64 {
    let errs = gradient_check(inputs, 1e-5, |t, v| Ok(f(t, v))).unwrap();
    errs.into_iter().fold(0.0, f64::max)
}

fn rng() -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(2024)
}

#[test]
fn matmul_identity_and_projector() {
    let mut tape = Tape::new();
    let eye = tape.constant(Tensor::new(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
    let m = tape.constant(Tensor::new(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    let c = tape.matmul(eye, m).unwrap();
    assert_eq!(tape.value(c), &[1.0, 2.0, 3.0, 4.0]);

    let proj = tape.constant(Tensor::new(&[2, 2], vec![1.0, 0.0, 0.0, 0.0]).unwrap());
    let n = tape.constant(Tensor::new(&[2, 2], vec![5.0, 6.0, 7.0, 8.0]).unwrap());
    let c = tape.matmul(proj, n).unwrap();
    assert_eq!(tape.value(c), &[5.0, 6.0, 0.0, 0.0]);
}

#[test]
fn matmul_shape_mismatch_is_dimension_error() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::zeros(&[2, 3]));
    let b = tape.constant(Tensor::zeros(&[2, 3]));
    assert!(matches!(tape.matmul(a, b), Err(Error::Shape { .. })));
}

#[test]
fn matmul_sum_gradient_matches_finite_differences() {
    // d/da sum(a·b), checked element-wise at rel. err 1e-6
    let mut r = rng();
    let a = random(&[3, 4], &mut r);
    let b = random(&[4, 2], &mut r);
    let mut tape = Tape::new();
    let av = tape.leaf(a.clone(), true);
    let bv = tape.constant(b.clone());
    let c = tape.matmul(av, bv).unwrap();
    let loss = tape.sum(c).unwrap();
    let g = tape.backward(loss).unwrap().tensor(av);
    let h = 1e-5;
    let sum_of = |a: &Tensor| -> f64 { matmul_raw(a.data(), b.data(), 3, 4, 2).iter().sum() };
    for j in 0..a.numel() {
        let mut p = a.clone();
        p.data_mut()[j] += h;
        let mut m = a.clone();
        m.data_mut()[j] -= h;
        let fd = (sum_of(&p) - sum_of(&m)) / (2.0 * h);
        let rel = (g.data()[j] - fd).abs() / fd.abs().max(1e-12);
        assert!(rel < 1e-6, "element {j}: analytic {} vs fd {fd}", g.data()[j]);
    }
}

#[test]
fn conv2d_identity_kernel_and_counting() {
    let mut r = rng();
    let x = random(&[1, 5, 6], &mut r);
    let mut k = Tensor::zeros(&[1, 1, 3, 3]);
    k.data_mut()[4] = 1.0;
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let kv = tape.constant(k);
    let y = tape.conv2d(xv, kv).unwrap();
    assert_eq!(tape.value(y), x.data());

    let ones = tape.constant(Tensor::full(&[1, 5, 5], 1.0));
    let k1 = tape.constant(Tensor::full(&[1, 1, 3, 3], 1.0));
    let y = tape.conv2d(ones, k1).unwrap();
    let v = tape.value(y);
    assert_eq!(v[0], 4.0);
    assert_eq!(v[4], 4.0);
    assert_eq!(v[20], 4.0);
    assert_eq!(v[24], 4.0);
    assert_eq!(v[2], 6.0);
    assert_eq!(v[12], 9.0);
    assert_eq!(v[6], 9.0);
}

#[test]
fn conv2d_even_kernel_is_config_error() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::zeros(&[1, 4, 4]));
    let k = tape.constant(Tensor::zeros(&[1, 1, 2, 3]));
    assert!(matches!(tape.conv2d(x, k), Err(Error::Config(_))));
}

fn naive_conv2d(x: &Tensor, k: &Tensor) -> Tensor {
    let (ci_n, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (co_n, kh, kw) = (k.shape()[0], k.shape()[2], k.shape()[3]);
    let mut out = Tensor::zeros(&[co_n, h, w]);
    for co in 0..co_n {
        for i in 0..h as isize {
            for j in 0..w as isize {
                let mut acc = 0.0;
                for ci in 0..ci_n {
                    for a in 0..kh as isize {
                        for b in 0..kw as isize {
                            let (y, xx) = (i + a - kh as isize / 2, j + b - kw as isize / 2);
                            if y < 0 || xx < 0 || y >= h as isize || xx >= w as isize {
                                continue;
                            }
                            let kv = k.data()[((co * ci_n + ci) * kh + a as usize) * kw + b as usize];
                            acc += kv * x.data()[(ci * h + y as usize) * w + xx as usize];
                        }
                    }
                }
                out.data_mut()[(co * h + i as usize) * w + j as usize] = acc;
            }
        }
    }
    out
}

#[test]
fn conv2d_matches_naive_loop() {
    let mut r = rng();
    for (cin, cout, h, w, k) in [(1, 3, 8, 6, 3), (2, 2, 9, 5, 7), (3, 1, 4, 4, 7)] {
        let x = random(&[cin, h, w], &mut r);
        let kern = random(&[cout, cin, k, k], &mut r);
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let kv = tape.constant(kern.clone());
        let y = tape.conv2d(xv, kv).unwrap();
        let diff = tape.tensor(y).max_abs_diff(&naive_conv2d(&x, &kern));
        assert!(diff < 1e-12, "diff {diff}");
    }
}

#[test]
fn conv1d_examples() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::new(&[1, 3], vec![1.0, 2.0, 3.0]).unwrap());
    let id = tape.constant(Tensor::new(&[1, 1], vec![1.0]).unwrap());
    let y = tape.conv1d(x, id, Padding::Causal).unwrap();
    assert_eq!(tape.value(y), &[1.0, 2.0, 3.0]);
    let delay = tape.constant(Tensor::new(&[1, 2], vec![0.0, 1.0]).unwrap());
    let y = tape.conv1d(x, delay, Padding::Causal).unwrap();
    assert_eq!(tape.value(y), &[0.0, 1.0, 2.0]);
}

#[test]
fn conv1d_matches_naive_loop() {
    let mut r = rng();
    for padding in [Padding::Causal, Padding::Same] {
        for width in [1, 3, 4] {
            let (c, l) = (3, 11);
            let x = random(&[c, l], &mut r);
            let k = random(&[c, width], &mut r);
            let mut tape = Tape::new();
            let xv = tape.constant(x.clone());
            let kv = tape.constant(k.clone());
            let y = tape.conv1d(xv, kv, padding).unwrap();
            let lead = if padding == Padding::Causal { 0 } else { (width as isize - 1) / 2 };
            for ch in 0..c {
                for t in 0..l as isize {
                    let mut acc = 0.0;
                    for j in 0..width as isize {
                        let s = t - j + lead;
                        if (0..l as isize).contains(&s) {
                            acc += k.data()[ch * width + j as usize] * x.data()[ch * l + s as usize];
                        }
                    }
                    let got = tape.value(y)[ch * l + t as usize];
                    assert!((got - acc).abs() < 1e-12);
                }
            }
        }
    }
}

#[test]
fn elementwise_reference_values() {
    let mut tape = Tape::new();
    let z = tape.constant(Tensor::scalar(0.0));
    let s = tape.sigmoid(z).unwrap();
    assert_eq!(tape.item(s), 0.5);
    let sp = tape.softplus(z).unwrap();
    assert!((tape.item(sp) - 2f64.ln()).abs() < 1e-15);
    assert!((tape.item(sp) - 0.693147).abs() < 1e-6);
    let a = tape.constant(Tensor::full(&[3], 4.2));
    let sm = tape.softmax(a, 0).unwrap();
    for v in tape.value(sm) {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }
}

#[test]
fn log_of_non_positive_is_domain_error() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::new(&[2], vec![1.0, 0.0]).unwrap());
    assert!(matches!(tape.log(x), Err(Error::Domain { .. })));
}

#[test]
fn non_finite_results_are_errors() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::scalar(1000.0));
    assert!(matches!(tape.exp(x), Err(Error::NonFinite { op: "exp" })));
}

#[test]
fn backward_examples() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::new(&[2, 3], vec![0.1, -2.0, 3.0, 4.0, 5.0, 6.0]).unwrap(), true);
    let s = tape.sum(x).unwrap();
    let g = tape.backward(s).unwrap();
    assert_eq!(g.get(x).unwrap(), &[1.0; 6]);

    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::new(&[3], vec![1.0, 2.0, 3.0]).unwrap(), true);
    let sq = tape.mul(x, x).unwrap();
    let s = tape.sum(sq).unwrap();
    let g = tape.backward(s).unwrap();
    assert_eq!(g.get(x).unwrap(), &[2.0, 4.0, 6.0]);
}

#[test]
fn backward_rejects_non_scalar_loss() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::zeros(&[2]), true);
    assert!(matches!(tape.backward(x), Err(Error::Usage(_))));
}

#[test]
fn every_op_matches_finite_differences() {
    let mut r = rng();
    type Case = (&'static str, Vec<Tensor>, Box<dyn Fn(&mut Tape, &[Var]) -> Var>);
    let positive = Tensor::from_fn(&[3, 4], |i| 0.5 + 0.1 * i as f64);
    let cases: Vec<Case> = vec![
        ("matmul", vec![random(&[3, 4], &mut r), random(&[4, 2], &mut r)], Box::new(|t, v| t.matmul(v[0], v[1]).unwrap())),
        ("add", vec![random(&[2, 3], &mut r), random(&[2, 3], &mut r)], Box::new(|t, v| t.add(v[0], v[1]).unwrap())),
        ("sub", vec![random(&[2, 3], &mut r), random(&[2, 3], &mut r)], Box::new(|t, v| t.sub(v[0], v[1]).unwrap())),
        ("hadamard", vec![random(&[2, 3], &mut r), random(&[2, 3], &mut r)], Box::new(|t, v| t.mul(v[0], v[1]).unwrap())),
        ("scale", vec![random(&[5], &mut r)], Box::new(|t, v| t.scale(v[0], -1.7).unwrap())),
        ("add_scalar", vec![random(&[5], &mut r)], Box::new(|t, v| t.add_scalar(v[0], 0.3).unwrap())),
        ("mul_scalar", vec![random(&[2, 3], &mut r), random(&[1], &mut r)], Box::new(|t, v| t.mul_scalar_var(v[0], v[1]).unwrap())),
        ("relu", vec![random(&[3, 4], &mut r)], Box::new(|t, v| t.relu(v[0]).unwrap())),
        ("sigmoid", vec![random(&[3, 4], &mut r)], Box::new(|t, v| t.sigmoid(v[0]).unwrap())),
        ("softplus", vec![random(&[3, 4], &mut r)], Box::new(|t, v| t.softplus(v[0]).unwrap())),
        ("silu", vec![random(&[3, 4], &mut r)], Box::new(|t, v| t.silu(v[0]).unwrap())),
        ("exp", vec![random(&[3, 4], &mut r)], Box::new(|t, v| t.exp(v[0]).unwrap())),
        ("log", vec![positive], Box::new(|t, v| t.log(v[0]).unwrap())),
        ("sum_axis0", vec![random(&[3, 4, 2], &mut r)], Box::new(|t, v| t.sum_axis(v[0], 0).unwrap())),
        ("sum_axis1", vec![random(&[3, 4, 2], &mut r)], Box::new(|t, v| t.sum_axis(v[0], 1).unwrap())),
        ("mean_axis2", vec![random(&[3, 4, 2], &mut r)], Box::new(|t, v| t.mean_axis(v[0], 2).unwrap())),
        ("reshape", vec![random(&[3, 4], &mut r)], Box::new(|t, v| t.reshape(v[0], &[2, 6]).unwrap())),
        ("transpose", vec![random(&[3, 4], &mut r)], Box::new(|t, v| t.transpose(v[0]).unwrap())),
        ("narrow", vec![random(&[3, 5, 2], &mut r)], Box::new(|t, v| t.narrow(v[0], 1, 1, 3).unwrap())),
        (
            "concat",
            vec![random(&[2, 3, 2], &mut r), random(&[2, 1, 2], &mut r), random(&[2, 2, 2], &mut r)],
            Box::new(|t, v| t.concat(&[v[0], v[1], v[2]], 1).unwrap()),
        ),
        ("expand", vec![random(&[3, 2], &mut r)], Box::new(|t, v| t.expand(v[0], 1, 4).unwrap())),
        ("pick", vec![random(&[3, 2], &mut r)], Box::new(|t, v| t.pick(v[0], 4).unwrap())),
        ("layer_norm1", vec![random(&[3, 5], &mut r)], Box::new(|t, v| t.layer_norm(v[0], 1, 1e-9).unwrap())),
        ("layer_norm0", vec![random(&[4, 3], &mut r)], Box::new(|t, v| t.layer_norm(v[0], 0, 1e-9).unwrap())),
        ("softmax1", vec![random(&[3, 5], &mut r)], Box::new(|t, v| t.softmax(v[0], 1).unwrap())),
        ("softmax0", vec![random(&[3, 5], &mut r)], Box::new(|t, v| t.softmax(v[0], 0).unwrap())),
        ("logsumexp", vec![random(&[3, 5], &mut r)], Box::new(|t, v| t.logsumexp(v[0], 1).unwrap())),
        ("global_max_pool", vec![random(&[3, 4, 5], &mut r)], Box::new(|t, v| t.global_max_pool(v[0]).unwrap())),
        (
            "conv2d",
            vec![random(&[2, 6, 5], &mut r), random(&[3, 2, 3, 3], &mut r)],
            Box::new(|t, v| t.conv2d(v[0], v[1]).unwrap()),
        ),
        (
            "conv1d_causal",
            vec![random(&[3, 7], &mut r), random(&[3, 4], &mut r)],
            Box::new(|t, v| t.conv1d(v[0], v[1], Padding::Causal).unwrap()),
        ),
        (
            "conv1d_same",
            vec![random(&[3, 7], &mut r), random(&[3, 3], &mut r)],
            Box::new(|t, v| t.conv1d(v[0], v[1], Padding::Same).unwrap()),
        ),
    ];
    for (name, inputs, f) in &cases {
        let err = gradcheck(inputs, f.as_ref());
        assert!(err < 1e-5, "{name}: relative gradient error {err:e}");
    }
}

#[test]
fn backward_is_bit_identical_across_runs() {
    let mut r = rng();
    let a = random(&[4, 6], &mut r);
    let b = random(&[6, 3], &mut r);
    let run = || {
        let mut tape = Tape::new();
        let av = tape.param(&a);
        let bv = tape.param(&b);
        let c = tape.matmul(av, bv).unwrap();
        let s = tape.silu(c).unwrap();
        let sm = tape.softmax(s, 1).unwrap();
        let l = tape.logsumexp(sm, 0).unwrap();
        let loss = tape.sum(l).unwrap();
        let g = tape.backward(loss).unwrap();
        (g.tensor(av), g.tensor(bv))
    };
    let (a1, b1) = run();
    let (a2, b2) = run();
    assert_eq!(a1.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(), a2.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    assert_eq!(b1, b2);
}

mod properties {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn softmax_sums_to_one_and_is_shift_invariant(
            logits in proptest::collection::vec(-50.0f64..50.0, 2..12),
            shift in -100.0f64..100.0,
        ) {
            let n = logits.len();
            let mut tape = Tape::new();
            let x = tape.constant(Tensor::new(&[n], logits.clone()).unwrap());
            let shifted = tape.add_scalar(x, shift).unwrap();
            let p = tape.softmax(x, 0).unwrap();
            let q = tape.softmax(shifted, 0).unwrap();
            let total: f64 = tape.value(p).iter().sum();
            prop_assert!((total - 1.0).abs() < 1e-12);
            for (a, b) in tape.value(p).iter().zip(tape.value(q)) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }

        #[test]
        fn layer_norm_standardises(values in proptest::collection::vec(-10.0f64..10.0, 4..32)) {
            let n = values.len();
            let mean = values.iter().sum::<f64>() / n as f64;
            let spread = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
            prop_assume!(spread > 1e-2);
            let mut tape = Tape::new();
            let x = tape.constant(Tensor::new(&[1, n], values).unwrap());
            let y = tape.layer_norm(x, 1, 1e-9).unwrap();
            let out = tape.value(y);
            let m = out.iter().sum::<f64>() / n as f64;
            let v = out.iter().map(|a| (a - m).powi(2)).sum::<f64>() / n as f64;
            prop_assert!(m.abs() < 1e-9);
            prop_assert!((v - 1.0).abs() < 1e-6);
        }
    }
}
