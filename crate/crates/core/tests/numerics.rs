mod common;

use common::{finite_difference_error, naive_matmul, random_matrix, rng};
use hidden_transfer::numerics::{
    argmax_token, kernels, kl_divergence, softmax, softmax_slice, top_k_indices, AdamConfig, AdamState, KlDirection, Tape, Tensor,
};
use proptest::prelude::*;
use rand::Rng;

fn product(a: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
    let tape = Tape::inference();
    let (x, y) = (tape.constant(a.clone()), tape.constant(b.clone()));
    let z = tape.matmul(x, y).unwrap();
    (*tape.value(z)).clone()
}

#[test]
fn matmul_identity_and_permutation() {
    let mut r = rng(1);
    let b = random_matrix(&mut r, 3, 4, 1.0);
    assert_eq!(product(&Tensor::identity(3), &b), b);
    let a = Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let p = Tensor::matrix(2, 2, vec![0.0, 1.0, 1.0, 0.0]).unwrap();
    assert_eq!(product(&a, &p).data(), &[2.0, 1.0, 4.0, 3.0]);
}

#[test]
fn matmul_matches_triple_loop() {
    let mut r = rng(2);
    let a = random_matrix(&mut r, 5, 4, 1.0);
    let b = random_matrix(&mut r, 4, 3, 1.0);
    let oracle = naive_matmul(a.data(), b.data(), 5, 4, 3);
    let double = product(&a, &b);
    let single = {
        let tape = Tape::<f32>::inference();
        let z = tape.matmul(tape.constant(a.cast::<f32>()), tape.constant(b.cast::<f32>())).unwrap();
        (*tape.value(z)).clone()
    };
    for ((x, y), o) in double.data().iter().zip(single.data()).zip(&oracle) {
        assert!((x - o).abs() <= 1e-12);
        assert!((*y as f64 - o).abs() <= 1e-6);
    }
    assert!(tape_shape_error());
}

fn tape_shape_error() -> bool {
    let tape = Tape::<f64>::inference();
    let a = tape.constant(Tensor::zeros(vec![2, 3]));
    tape.matmul(a, a).is_err()
}

#[test]
fn softmax_cases() {
    let mut u = [0.0f64; 4];
    softmax_slice(&mut u);
    assert_eq!(u, [0.25; 4]);
    let mut big = [1000.0f64, 0.0];
    softmax_slice(&mut big);
    assert!((big[0] - 1.0).abs() < 1e-12 && big[1] < 1e-300 && big.iter().all(|v| v.is_finite()));
    let x = [1.0f64, 2.0, 3.0];
    let mut s = x;
    softmax_slice(&mut s);
    let z: f64 = x.iter().map(|v| v.exp()).sum();
    for (got, v) in s.iter().zip(x) {
        assert!((got - v.exp() / z).abs() <= 1e-7);
    }
    let t = softmax(&Tensor::matrix(2, 2, vec![0.0f64, 0.0, f64::NAN, 1.0]).unwrap());
    assert!(t.is_err());
}

#[test]
fn kl_cases() {
    let p = [0.2f64, 0.3, 0.5];
    assert_eq!(kl_divergence(&p, &p).unwrap(), 0.0);
    let k = kl_divergence(&[1.0f64, 0.0], &[0.5, 0.5]).unwrap();
    assert!((k - std::f64::consts::LN_2).abs() < 1e-12);
    let mut r = rng(3);
    for _ in 0..20 {
        let mut a: Vec<f64> = (0..7).map(|_| r.random_range(0.01..1.0)).collect();
        let mut b: Vec<f64> = (0..7).map(|_| r.random_range(0.01..1.0)).collect();
        let (sa, sb): (f64, f64) = (a.iter().sum(), b.iter().sum());
        a.iter_mut().for_each(|v| *v /= sa);
        b.iter_mut().for_each(|v| *v /= sb);
        let mut oracle = 0.0;
        for i in 0..7 {
            oracle += a[i] * (a[i] / b[i]).ln();
        }
        assert!((kl_divergence(&a, &b).unwrap() - oracle).abs() <= 1e-7);
    }
    assert!(kl_divergence(&[0.5f64, 0.6], &[0.5, 0.5]).is_err());
}

#[test]
fn argmax_cases() {
    assert_eq!(argmax_token(&[0.0f32, 5.0, 1.0]).unwrap(), 1);
    assert_eq!(argmax_token(&[3.0f32, 3.0, 1.0]).unwrap(), 0);
    assert!(argmax_token::<f32>(&[]).is_err());
    let mut r = rng(4);
    for _ in 0..50 {
        let v: Vec<f32> = (0..40).map(|_| r.random_range(0..8) as f32).collect();
        let mut best = 0;
        for i in 1..v.len() {
            if v[i] > v[best] {
                best = i;
            }
        }
        assert_eq!(argmax_token(&v).unwrap() as usize, best);
    }
}

#[test]
fn linear_gradient_is_input() {
    let tape = Tape::<f64>::new();
    let w = tape.param(Tensor::matrix(2, 3, vec![0.5, -1.0, 2.0, 0.0, 1.0, 3.0]).unwrap());
    let x = tape.constant(Tensor::matrix(3, 1, vec![1.0, 2.0, 3.0]).unwrap());
    let loss = tape.sum(tape.matmul(w, x).unwrap()).unwrap();
    let g = tape.backward(loss).unwrap();
    assert_eq!(g.get(w).unwrap().data(), &[1.0, 2.0, 3.0, 1.0, 2.0, 3.0]);
    assert!(g.get(x).is_none());
}

const H: f64 = 1e-4;
const TOL: f64 = 1e-3;

#[test]
fn finite_differences_elementwise_and_shape_ops() {
    let mut r = rng(5);
    let a = random_matrix(&mut r, 3, 4, 1.0);
    let b = random_matrix(&mut r, 4, 2, 1.0);
    let c = random_matrix(&mut r, 3, 4, 1.0);
    let bias = random_matrix(&mut r, 1, 4, 1.0).reshape(vec![4]).unwrap();
    let err = finite_difference_error(&[a.clone(), b.clone()], H, |t, v| {
        let z = t.matmul(v[0], v[1])?;
        t.sum(t.mul(z, z)?)
    });
    assert!(err <= TOL, "matmul {err}");
    let err = finite_difference_error(&[a.clone(), c.clone(), bias.clone()], H, |t, v| {
        let z = t.add_bias(t.add(v[0], v[1])?, v[2])?;
        let z = t.silu(t.scale(z, 0.7)?)?;
        t.sum(t.mul(z, v[1])?)
    });
    assert!(err <= TOL, "add/silu/scale {err}");
    let w = random_matrix(&mut r, 1, 4, 1.0).reshape(vec![4]).unwrap();
    let err = finite_difference_error(&[a.clone(), w], H, |t, v| {
        let z = t.rms_norm(v[0], v[1], 1e-5)?;
        t.sum(t.mul(z, t.constant(c.clone()))?)
    });
    assert!(err <= TOL, "rms_norm {err}");
    let err = finite_difference_error(&[a.clone(), c.clone()], H, |t, v| {
        let z = t.concat_rows(v[0], v[1])?;
        let z = t.gather_rows(z, &[5, 0, 0, 2])?;
        let z = t.slice_rows(z, 1, 2)?;
        t.sum(t.mul(z, z)?)
    });
    assert!(err <= TOL, "row ops {err}");
    let table = random_matrix(&mut r, 6, 3, 1.0);
    let err = finite_difference_error(&[table], H, |t, v| {
        let e = t.embedding(v[0], &[1, 4, 1])?;
        t.sum(t.mul(e, e)?)
    });
    assert!(err <= TOL, "embedding {err}");
}

#[test]
fn finite_differences_losses() {
    let mut r = rng(6);
    let logits = random_matrix(&mut r, 3, 5, 2.0);
    let mut teacher = random_matrix(&mut r, 3, 5, 2.0);
    for row in 0..3 {
        softmax_slice(teacher.row_mut(row));
    }
    for dir in [KlDirection::TeacherStudent, KlDirection::StudentTeacher] {
        let err = finite_difference_error(std::slice::from_ref(&logits), H, |t, v| t.kl_rows(v[0], &teacher, dir));
        assert!(err <= TOL, "{dir:?} {err}");
    }
    let err = finite_difference_error(&[logits], H, |t, v| t.cross_entropy(v[0], &[0, 4, 2]));
    assert!(err <= TOL, "cross_entropy {err}");
}

#[test]
fn adam_updates() {
    let mut w = Tensor::scalar(1.0f64);
    let mut opt = AdamState::new(AdamConfig::default(), [&w]);
    opt.step(&mut [&mut w], &[&Tensor::scalar(0.0)]).unwrap();
    assert_eq!(w.item(), 1.0);

    let mut w = Tensor::scalar(1.0f64);
    let mut opt = AdamState::new(
        AdamConfig {
            lr: 0.1,
            ..Default::default()
        },
        [&w],
    );
    let g = Tensor::scalar(2.0 * w.item());
    opt.step(&mut [&mut w], &[&g]).unwrap();
    assert!((w.item() - 0.9).abs() < 1e-6, "{}", w.item());

    // Convex quadratic sum_i c_i (x_i - 1)^2 from zero.
    let coef = [1.0, 3.0, 0.5, 2.0];
    let loss = |x: &Tensor<f64>| x.data().iter().zip(coef).map(|(v, c)| c * (v - 1.0) * (v - 1.0)).sum::<f64>();
    let mut x = Tensor::zeros(vec![4]);
    let start = loss(&x);
    let mut opt = AdamState::new(
        AdamConfig {
            lr: 0.05,
            ..Default::default()
        },
        [&x],
    );
    for _ in 0..200 {
        let g = Tensor::new(vec![4], x.data().iter().zip(coef).map(|(v, c)| 2.0 * c * (v - 1.0)).collect()).unwrap();
        opt.step(&mut [&mut x], &[&g]).unwrap();
    }
    assert!(loss(&x) * 100.0 <= start, "{} -> {}", start, loss(&x));
    assert_eq!(opt.steps_taken(), 200);
}

#[test]
fn repeated_runs_are_bit_identical() {
    let run = || {
        let mut r = rng(7);
        let a = random_matrix(&mut r, 6, 5, 1.0).cast::<f32>();
        let b = random_matrix(&mut r, 5, 7, 1.0).cast::<f32>();
        let tape = Tape::<f32>::new();
        let (x, y) = (tape.param(a), tape.param(b));
        let z = tape.silu(tape.matmul(x, y).unwrap()).unwrap();
        let loss = tape.cross_entropy(z, &[0, 1, 2, 3, 4, 5]).unwrap();
        let g = tape.backward(loss).unwrap();
        (tape.value(loss).item(), g.get(x).unwrap().clone())
    };
    assert_eq!(run(), run());
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(v in prop::collection::vec(-50.0f32..50.0, 1..40)) {
        let mut s = v.clone();
        softmax_slice(&mut s);
        let sum: f32 = s.iter().sum();
        prop_assert!((sum - 1.0).abs() <= 1e-6);
        prop_assert!(s.iter().all(|p| (0.0..=1.0).contains(p)));
    }

    #[test]
    fn kl_is_non_negative(a in prop::collection::vec(0.0f64..1.0, 2..12), seed in 0u64..1000) {
        let n = a.len();
        let mut r = rng(seed);
        let mut p: Vec<f64> = a.iter().map(|x| x + 1e-3).collect();
        let mut q: Vec<f64> = (0..n).map(|_| r.random_range(1e-3..1.0)).collect();
        let (sp, sq): (f64, f64) = (p.iter().sum(), q.iter().sum());
        p.iter_mut().for_each(|v| *v /= sp);
        q.iter_mut().for_each(|v| *v /= sq);
        prop_assert!(kl_divergence(&p, &q).unwrap() >= -1e-15);
        prop_assert_eq!(kl_divergence(&p, &p).unwrap(), 0.0);
    }

    #[test]
    fn kernel_matches_oracle(m in 0usize..7, k in 1usize..6, n in 1usize..6, seed in 0u64..1000) {
        let mut r = rng(seed);
        let a = random_matrix(&mut r, m, k, 2.0);
        let b = random_matrix(&mut r, k, n, 2.0);
        let got = kernels::matmul(a.data(), b.data(), m, k, n);
        let oracle = naive_matmul(a.data(), b.data(), m, k, n);
        for (x, y) in got.iter().zip(&oracle) {
            prop_assert!((x - y).abs() <= 1e-12);
        }
    }

    #[test]
    fn top_k_is_sorted_prefix(v in prop::collection::vec(-5.0f32..5.0, 1..30), k in 1usize..10) {
        let idx = top_k_indices(&v, k);
        prop_assert_eq!(idx.len(), k.min(v.len()));
        for w in idx.windows(2) {
            let (a, b) = (v[w[0] as usize], v[w[1] as usize]);
            prop_assert!(a > b || (a == b && w[0] < w[1]));
        }
        if let Some(&last) = idx.last() {
            let cut = v[last as usize];
            let above = v.iter().filter(|&&x| x > cut).count();
            prop_assert!(above < idx.len());
        }
    }
}
