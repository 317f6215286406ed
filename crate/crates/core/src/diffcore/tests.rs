use super::*;
use crate::error::{Error, Phase};
use crate::oracle::{finite_diff_grad, gradcheck, relative_error, FD_STEP};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn m(rows: &[Vec<f64>]) -> Tensor {
    Tensor::from_rows(rows).unwrap()
}

#[test]
fn matmul_examples() {
    let tape = Tape::new();
    let a = tape.constant(m(&[vec![1.0, 2.0], vec![3.0, 4.0]]));
    let e = tape.constant(m(&[vec![1.0], vec![0.0]]));
    assert_eq!(a.matmul(e).unwrap().value(), m(&[vec![1.0], vec![3.0]]));
    let id = tape.constant(m(&[vec![1.0, 0.0], vec![0.0, 1.0]]));
    assert_eq!(a.matmul(id).unwrap().value(), a.value());
    let bad = tape.constant(Tensor::zeros(&[3, 1]));
    assert!(matches!(a.matmul(bad), Err(Error::Shape(_))));
}

#[test]
fn matmul_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let a = gradcheck::uniform(&mut rng, &[3, 4], -1.0, 1.0);
    let b = gradcheck::uniform(&mut rng, &[4, 2], -1.0, 1.0);
    let tape = Tape::new();
    let av = tape.param(a.clone());
    let loss = av.matmul(tape.constant(b.clone())).unwrap().sum().unwrap();
    tape.backward(loss).unwrap();
    let fd = finite_diff_grad(|x| Ok(x.matmul(&b)?.data().iter().sum()), &a, FD_STEP).unwrap();
    assert!(relative_error(&av.grad().unwrap(), &fd) < 1e-7);
}

#[test]
fn sort_examples() {
    let tape = Tape::new();
    let (s, perm) = tape.constant(Tensor::vector(vec![3.0, 0.0, 2.0])).sort_with_permutation().unwrap();
    assert_eq!(s.value().data(), &[0.0, 2.0, 3.0]);
    assert_eq!(perm, vec![1, 2, 0]);
    let (_, perm) = tape.constant(Tensor::vector(vec![-1.0, 0.5, 4.0])).sort_with_permutation().unwrap();
    assert_eq!(perm, vec![0, 1, 2]);
    let (s, perm) = tape.constant(Tensor::vector(vec![])).sort_with_permutation().unwrap();
    assert_eq!((s.numel(), perm.len()), (0, 0));
}

#[test]
fn sort_is_stable() {
    let tape = Tape::new();
    let (_, perm) = tape.constant(Tensor::vector(vec![1.0, 0.0, 1.0, 0.0])).sort_with_permutation().unwrap();
    assert_eq!(perm, vec![1, 3, 0, 2]);
}

#[test]
fn sort_rejects_matrices() {
    let tape = Tape::new();
    assert!(tape.constant(Tensor::zeros(&[2, 2])).sort_with_permutation().is_err());
}

#[test]
fn gradient_of_sorted_mean_is_uniform() {
    let tape = Tape::new();
    let v = tape.param(Tensor::vector(vec![4.0, -1.0, 2.5, 0.0, 7.0]));
    let (s, _) = v.sort_with_permutation().unwrap();
    tape.backward(s.mean().unwrap()).unwrap();
    assert!(v.grad().unwrap().data().iter().all(|&g| g == 0.2));
}

fn heap_permutations(n: usize) -> Vec<Vec<usize>> {
    fn go(k: usize, a: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if k <= 1 {
            out.push(a.clone());
            return;
        }
        for i in 0..k {
            go(k - 1, a, out);
            let j = if k.is_multiple_of(2) { i } else { 0 };
            a.swap(j, k - 1);
        }
    }
    let mut out = Vec::new();
    go(n, &mut (0..n).collect(), &mut out);
    out
}

/// Gradient of Σ_k c_k·sorted(v)_k by enumerating every permutation and
/// picking the one that sorts `v` (distinct values assumed).
fn brute_force_sort_grad(v: &[f64], c: &[f64]) -> Vec<f64> {
    let perm = heap_permutations(v.len())
        .into_iter()
        .find(|p| p.windows(2).all(|w| v[w[0]] < v[w[1]]))
        .expect("distinct values have a sorting permutation");
    let mut g = vec![0.0; v.len()];
    for (k, &i) in perm.iter().enumerate() {
        g[i] = c[k];
    }
    g
}

#[test]
fn sort_backward_matches_permutation_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for n in 1..=6 {
        for _ in 0..5 {
            let v: Vec<f64> = (0..n).map(|_| rng.random_range(-5.0..5.0)).collect();
            let c: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let tape = Tape::new();
            let x = tape.param(Tensor::vector(v.clone()));
            let (s, _) = x.sort_with_permutation().unwrap();
            let loss = s.mul(tape.constant(Tensor::vector(c.clone()))).unwrap().sum().unwrap();
            tape.backward(loss).unwrap();
            assert_eq!(x.grad().unwrap().into_data(), brute_force_sort_grad(&v, &c));
        }
    }
}

#[test]
fn elementwise_examples() {
    assert_eq!(sigmoid(0.0), 0.5);
    let tape = Tape::new();
    let x = tape.param(Tensor::vector(vec![1.4]));
    let r = x.round_ste().unwrap();
    assert_eq!(r.item(), 1.0);
    tape.backward(r.sum().unwrap()).unwrap();
    assert_eq!(x.grad().unwrap().data(), &[1.0]);

    let tape = Tape::new();
    let z = tape.param(Tensor::vector(vec![0.0, -2.0, 3.0]));
    tape.backward(z.abs().unwrap().sum().unwrap()).unwrap();
    assert_eq!(z.grad().unwrap().data(), &[0.0, -1.0, 1.0]);
}

#[test]
fn clamped_straight_through_gradient() {
    let tape = Tape::new();
    let x = tape.param(Tensor::vector(vec![-0.7, 0.4, 1.6, 3.2]));
    let q = x.round_ste().unwrap().clamp(0.0, 2.0).unwrap();
    assert_eq!(q.value().data(), &[0.0, 0.0, 2.0, 2.0]);
    tape.backward(q.sum().unwrap()).unwrap();
    // -0.7 rounds to -1 (outside), 3.2 rounds to 3 (outside)
    assert_eq!(x.grad().unwrap().data(), &[0.0, 1.0, 1.0, 0.0]);
}

#[test]
fn domain_errors() {
    let tape = Tape::new();
    let a = tape.constant(Tensor::vector(vec![1.0, 2.0]));
    let zero = tape.constant(Tensor::vector(vec![1.0, 0.0]));
    assert!(matches!(a.div(zero), Err(Error::Domain { .. })));
    assert!(matches!(zero.log(), Err(Error::Domain { .. })));
    assert!(matches!(a.neg().unwrap().sqrt(), Err(Error::Domain { .. })));
    assert!(matches!(a.clamp(1.0, 0.0), Err(Error::Domain { .. })));
}

#[test]
fn broadcasting_trailing_dimensions() {
    let tape = Tape::new();
    let x = tape.param(m(&[vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]]));
    let b = tape.param(Tensor::vector(vec![10.0, 20.0, 30.0]));
    let y = x.add(b).unwrap();
    assert_eq!(y.value().row(1), &[14.0, 25.0, 36.0]);
    tape.backward(y.sum().unwrap()).unwrap();
    assert_eq!(b.grad().unwrap().data(), &[2.0, 2.0, 2.0]);
    let bad = tape.constant(Tensor::vector(vec![1.0, 2.0]));
    assert!(matches!(x.add(bad), Err(Error::Shape(_))));
}

#[test]
fn variance_is_population_variance() {
    let tape = Tape::new();
    let x = tape.constant(m(&[vec![2.0, -2.0], vec![1.0, 3.0]]));
    assert_eq!(x.variance_axis(1).unwrap().value().data(), &[4.0, 1.0]);
}

#[test]
fn backward_of_sum_is_ones_and_accumulates() {
    let tape = Tape::new();
    let x = tape.param(Tensor::zeros(&[2, 3]));
    let s = x.sum().unwrap();
    tape.backward(s).unwrap();
    assert!(x.grad().unwrap().data().iter().all(|&g| g == 1.0));
    tape.backward(s).unwrap();
    assert!(x.grad().unwrap().data().iter().all(|&g| g == 2.0));
    tape.zero_grad();
    assert!(x.grad().is_none());
}

#[test]
fn backward_usage_errors() {
    let tape = Tape::new();
    let x = tape.param(Tensor::zeros(&[3]));
    assert!(matches!(tape.backward(x), Err(Error::Usage(_))));
    let other = Tape::new();
    let y = other.param(Tensor::scalar(1.0));
    assert!(matches!(tape.backward(y), Err(Error::Usage(_))));
}

#[test]
fn constants_receive_no_gradient() {
    let tape = Tape::new();
    let c = tape.constant(Tensor::vector(vec![1.0, 2.0]));
    let p = tape.param(Tensor::vector(vec![3.0, 4.0]));
    tape.backward(c.mul(p).unwrap().sum().unwrap()).unwrap();
    assert!(c.grad().is_none());
    assert_eq!(p.grad().unwrap().data(), &[1.0, 2.0]);
    assert!(!c.requires_grad());
    assert!(p.detach().grad().is_none());
}

#[test]
fn finiteness_guard_names_the_operation() {
    let tape = Tape::new();
    let big = tape.param(Tensor::vector(vec![1000.0]));
    match big.exp() {
        Err(Error::NonFinite { op, phase }) => {
            assert_eq!(op, "exp");
            assert_eq!(phase, Phase::Forward);
        }
        other => panic!("expected a forward guard, got {other:?}"),
    }
    let z = tape.param(Tensor::vector(vec![0.0]));
    let r = z.sqrt().unwrap();
    match tape.backward(r.sum().unwrap()) {
        Err(Error::NonFinite { op, phase }) => {
            assert_eq!(op, "sqrt");
            assert_eq!(phase, Phase::Backward);
        }
        other => panic!("expected a backward guard, got {other:?}"),
    }
}

#[test]
fn logit_inverts_sigmoid() {
    for p in [0.5, 0.9] {
        assert_eq!(sigmoid(logit(p)), p, "{p}");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let others = [0.1, 0.25, 1e-6, 0.999, 1.0 - 1e-6].into_iter().chain((0..200).map(|_| rng.random_range(0.0..1.0)));
    for p in others {
        let back = sigmoid(logit(p));
        assert!((back - p).abs() <= 4.0 * f64::EPSILON * p.max(1.0 - p), "{p}");
    }
}

#[test]
fn forward_and_backward_are_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let a = gradcheck::uniform(&mut rng, &[5, 4], -1.0, 1.0);
        let tape = Tape::new();
        let x = tape.param(a);
        let y = x.matmul(x.transpose().unwrap()).unwrap().gelu().unwrap().sort_last().unwrap();
        let loss = y.log_softmax_last().unwrap().mean().unwrap();
        tape.backward(loss).unwrap();
        (loss.item().to_bits(), x.grad().unwrap().into_data().iter().map(|v| v.to_bits()).collect::<Vec<_>>())
    };
    assert_eq!(run(), run());
}

#[test]
fn memory_tracking_counts_tape_values() {
    let before = memtrack::current_bytes();
    memtrack::reset_peak();
    {
        let tape = Tape::new();
        tape.constant(Tensor::zeros(&[1000]));
        assert_eq!(memtrack::current_bytes(), before + 8000);
    }
    assert_eq!(memtrack::current_bytes(), before);
    assert_eq!(memtrack::peak_bytes(), before + 8000);
}

#[test]
fn every_registered_operation_passes_gradient_check() {
    for check in gradcheck::registry() {
        let err = check.worst_error(4, 2).unwrap();
        assert!(err < gradcheck::GRAD_TOLERANCE, "{}: {err}", check.name);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn sorted_output_is_ascending_permutation(v in prop::collection::vec(-100.0f64..100.0, 0..20)) {
        let tape = Tape::new();
        let (s, perm) = tape.constant(Tensor::vector(v.clone())).sort_with_permutation().unwrap();
        let s = s.value().into_data();
        prop_assert!(s.windows(2).all(|w| w[0] <= w[1]));
        let mut seen = perm.clone();
        seen.sort_unstable();
        prop_assert_eq!(seen, (0..v.len()).collect::<Vec<_>>());
        for (k, &i) in perm.iter().enumerate() {
            prop_assert_eq!(s[k], v[i]);
        }
    }

    #[test]
    fn matmul_matches_naive_product(seed in 0u64..500, n in 1usize..5, k in 1usize..5, mm in 1usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = gradcheck::uniform(&mut rng, &[n, k], -3.0, 3.0);
        let b = gradcheck::uniform(&mut rng, &[k, mm], -3.0, 3.0);
        let got = a.matmul(&b).unwrap();
        for i in 0..n {
            for j in 0..mm {
                let want: f64 = (0..k).map(|t| a.data()[i * k + t] * b.data()[t * mm + j]).sum();
                prop_assert!((got.data()[i * mm + j] - want).abs() < 1e-12);
            }
        }
    }
}
