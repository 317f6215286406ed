use super::*;
use crate::oracle::{exact_w1_1d, exact_w1_assignment, gradcheck};
use proptest::prelude::*;
use rand::Rng;

fn t2(rows: &[Vec<f64>]) -> Tensor {
    Tensor::from_rows(rows).unwrap()
}

fn random(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Tensor {
    gradcheck::uniform(rng, &[n, d], -2.0, 2.0)
}

fn sw(y_fp: &Tensor, y_q: &Tensor, proj: &ProjectionSet) -> f64 {
    sliced_wasserstein_value(y_fp, y_q, proj).unwrap()
}

fn mse(y_fp: &Tensor, y_q: &Tensor) -> f64 {
    let tape = Tape::new();
    let b = BlockOutputs::new(tape.constant(y_fp.clone()), tape.constant(y_q.clone())).unwrap();
    mse_loss(&b).unwrap().item()
}

fn permute_rows(t: &Tensor, perm: &[usize]) -> Tensor {
    t2(&perm.iter().map(|&i| t.row(i).to_vec()).collect::<Vec<_>>())
}

#[test]
fn mse_examples() {
    let a = t2(&[vec![0.0, 0.0]]);
    let b = t2(&[vec![3.0, 4.0]]);
    assert_eq!(mse(&a, &a), 0.0);
    assert_eq!(mse(&a, &b), 12.5);
    let tape = Tape::new();
    let bo = BlockOutputs::new(tape.constant(a), tape.constant(b)).unwrap();
    assert_eq!(mse_loss_with(&bo, MseReduction::Sum).unwrap().item(), 25.0);
}

#[test]
fn mse_of_identical_inputs_has_zero_gradient() {
    let tape = Tape::new();
    let x = tape.param(t2(&[vec![1.0, -2.0], vec![0.5, 3.0]]));
    let b = BlockOutputs::new(x, x).unwrap();
    tape.backward(mse_loss(&b).unwrap()).unwrap();
    assert!(x.grad().unwrap().data().iter().all(|&g| g == 0.0));
}

#[test]
fn block_outputs_flatten_and_validate() {
    let tape = Tape::new();
    let y = tape.constant(Tensor::zeros(&[2, 3, 4]));
    let b = BlockOutputs::new(y, y).unwrap();
    assert_eq!((b.n(), b.d()), (6, 4));
    let z = tape.constant(Tensor::zeros(&[6, 3]));
    assert!(matches!(BlockOutputs::new(z, tape.constant(Tensor::zeros(&[6, 4]))), Err(Error::Shape(_))));
    let empty = tape.constant(Tensor::zeros(&[0, 4]));
    assert!(BlockOutputs::new(empty, empty).is_err());
}

#[test]
fn w1_examples() {
    let tape = Tape::new();
    let v = |d: Vec<f64>| tape.constant(Tensor::vector(d));
    assert_eq!(w1_1d(v(vec![1.0, 5.0]), v(vec![5.0, 1.0])).unwrap().item(), 0.0);
    assert_eq!(w1_1d(v(vec![0.0, 2.0]), v(vec![1.0, 3.0])).unwrap().item(), 1.0);
    assert_eq!(w1_1d(v(vec![3.0, 0.0]), v(vec![1.0, 2.0])).unwrap().item(), 1.0);
    assert!(matches!(w1_1d(v(vec![1.0]), v(vec![1.0, 2.0])), Err(Error::Usage(_))));
}

#[test]
fn w1_matches_cdf_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for n in [1, 2, 5, 33] {
        let a: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
        let b: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..4.0)).collect();
        let tape = Tape::new();
        let got = w1_1d(tape.constant(Tensor::vector(a.clone())), tape.constant(Tensor::vector(b.clone())))
            .unwrap()
            .item();
        assert!((got - exact_w1_1d(&a, &b).unwrap()).abs() < 1e-12);
    }
}

#[test]
fn forced_projection_example() {
    let proj = ProjectionSet::from_directions(&[vec![1.0, 0.0]]).unwrap();
    let y_fp = t2(&[vec![0.0, 0.0], vec![1.0, 0.0]]);
    let y_q = t2(&[vec![2.0, 0.0], vec![3.0, 0.0]]);
    assert_eq!(sw(&y_fp, &y_q, &proj), 2.0);
    assert_eq!(sw(&y_fp, &y_fp, &proj), 0.0);
}

#[test]
fn identical_outputs_give_zero_for_any_projection() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let y = random(&mut rng, 7, 5);
    for seed in 0..5 {
        assert_eq!(sw(&y, &y, &sample_projections(5, 16, seed).unwrap()), 0.0);
    }
}

#[test]
fn projection_dimension_mismatch() {
    let tape = Tape::new();
    let y = tape.constant(Tensor::zeros(&[3, 4]));
    let b = BlockOutputs::new(y, y).unwrap();
    let proj = sample_projections(5, 2, 0).unwrap();
    assert!(matches!(sliced_wasserstein_loss(&b, &proj), Err(Error::Shape(_))));
}

#[test]
fn projections_are_unit_and_seeded() {
    let p = sample_projections(7, 300, 11).unwrap();
    for r in 0..p.n_proj() {
        let norm: f64 = p.matrix().row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() <= 1e-12);
    }
    assert_eq!(p, sample_projections(7, 300, 11).unwrap());
    assert_ne!(p, sample_projections(7, 300, 12).unwrap());
    assert!(ProjectionSet::from_directions(&[vec![0.0, 0.0]]).is_err());
}

#[test]
fn projection_mean_vanishes() {
    let n = 10_000;
    let p = sample_projections(6, n, 5).unwrap();
    let mut mean = [0.0; 6];
    for r in 0..n {
        for (m, v) in mean.iter_mut().zip(p.matrix().row(r)) {
            *m += v / n as f64;
        }
    }
    let norm = mean.iter().map(|v| v * v).sum::<f64>().sqrt();
    assert!(norm < 3.0 / (n as f64).sqrt(), "{norm}");
}

#[test]
fn projection_streams_are_independent_and_reproducible() {
    let mut a = ProjectionStream::new(9, 0);
    let mut b = ProjectionStream::new(9, 1);
    let first = a.next_set(4, 8).unwrap();
    assert_ne!(first, b.next_set(4, 8).unwrap());
    assert_eq!(first, ProjectionStream::new(9, 0).next_set(4, 8).unwrap());
    assert_ne!(first, a.next_set(4, 8).unwrap());
}

#[test]
fn sw_row_permutation_invariance_is_bit_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (y_fp, y_q) = (random(&mut rng, 9, 4), random(&mut rng, 9, 4));
    let proj = sample_projections(4, 32, 1).unwrap();
    let perm = [3, 8, 0, 1, 7, 2, 6, 4, 5];
    let base = sw(&y_fp, &y_q, &proj);
    assert_eq!(sw(&y_fp, &permute_rows(&y_q, &perm), &proj).to_bits(), base.to_bits());
    assert_eq!(sw(&permute_rows(&y_fp, &perm), &y_q, &proj).to_bits(), base.to_bits());
    // the pointwise loss does see the permutation
    assert_ne!(mse(&y_fp, &permute_rows(&y_q, &perm)), mse(&y_fp, &y_q));
}

#[test]
fn homogeneity() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let (y_fp, y_q) = (random(&mut rng, 6, 3), random(&mut rng, 6, 3));
    let proj = sample_projections(3, 16, 2).unwrap();
    let (s, m) = (sw(&y_fp, &y_q, &proj), mse(&y_fp, &y_q));
    // powers of two scale every intermediate exactly
    for a in [0.5, 2.0, 8.0] {
        let (f, q) = (y_fp.map(|v| v * a), y_q.map(|v| v * a));
        assert_eq!(sw(&f, &q, &proj), a * s);
        assert_eq!(mse(&f, &q), a * a * m);
    }
    for a in [0.3, 1.7, 13.0] {
        let (f, q) = (y_fp.map(|v| v * a), y_q.map(|v| v * a));
        assert!((sw(&f, &q, &proj) - a * s).abs() <= 1e-12 * a * s);
        assert!((mse(&f, &q) - a * a * m).abs() <= 1e-12 * a * a * m);
    }
}

#[test]
fn translation_invariance() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    // values on a 1/64 grid so every shifted difference is representable
    let dyadic = |t: Tensor| t.map(|v| (v * 64.0).round() / 64.0);
    let (y_fp, y_q) = (dyadic(random(&mut rng, 6, 3)), dyadic(random(&mut rng, 6, 3)));
    let proj = sample_projections(3, 16, 4).unwrap();
    let c = [0.75, -1.5, 3.0];
    let shift = |t: &Tensor| {
        t2(&(0..6)
            .map(|r| t.row(r).iter().zip(c).map(|(v, cc)| v + cc).collect())
            .collect::<Vec<_>>())
    };
    assert!((sw(&shift(&y_fp), &shift(&y_q), &proj) - sw(&y_fp, &y_q, &proj)).abs() < 1e-9);
    assert_eq!(mse(&shift(&y_fp), &shift(&y_q)), mse(&y_fp, &y_q));
}

#[test]
fn sw_is_bounded_by_exact_transport() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for trial in 0..40 {
        let n = 2 + trial % 7;
        let d = 1 + trial % 4;
        let (y_fp, y_q) = (random(&mut rng, n, d), random(&mut rng, n, d));
        let exact = exact_w1_assignment(&y_fp, &y_q).unwrap();
        for seed in 0..5 {
            let proj = sample_projections(d, 8, seed + 100 * trial as u64).unwrap();
            assert!(sw(&y_fp, &y_q, &proj) <= exact + 1e-9);
        }
    }
}

#[test]
fn combined_loss_endpoints_are_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (y_fp, y_q) = (random(&mut rng, 8, 4), random(&mut rng, 8, 4));
    let proj = sample_projections(4, 128, 0).unwrap();
    let tape = Tape::new();
    let b = BlockOutputs::new(tape.constant(y_fp.clone()), tape.constant(y_q.clone())).unwrap();
    let mut spec = LossSpec::default();
    assert_eq!(combined_block_loss(&b, &spec, &proj).unwrap().item(), mse(&y_fp, &y_q));
    spec.sw_w = 1.0;
    assert_eq!(combined_block_loss(&b, &spec, &proj).unwrap().item(), sw(&y_fp, &y_q, &proj));
    spec.sw_w = 0.2;
    spec.n_proj = 128;
    assert!(spec.validate().is_ok());
    let terms = combined_block_loss_terms(&b, &spec, &proj).unwrap();
    let want = 0.8 * terms.mse.item() + 0.2 * terms.sw.item();
    assert!((terms.total.item() - want).abs() < 1e-15);
    spec.sw_w = 1.5;
    assert!(matches!(combined_block_loss(&b, &spec, &proj), Err(Error::Config(_))));
}

#[test]
fn loss_spec_validation_and_defaults() {
    let spec: LossSpec = serde_json::from_str("{}").unwrap();
    assert_eq!(spec, LossSpec::default());
    assert_eq!((spec.sw_w, spec.n_proj, spec.kl_temperature), (0.0, 128, 1.0));
    assert!(serde_json::from_str::<LossSpec>(r#"{"unknown": 1}"#).is_err());
    for bad in [
        r#"{"sw_w": -0.1}"#,
        r#"{"n_proj": 0}"#,
        r#"{"kl_temperature": 0}"#,
        r#"{"hybrid_alpha": 1.5}"#,
        r#"{"label_smoothing": 1.0}"#,
    ] {
        let s: LossSpec = serde_json::from_str(bad).unwrap();
        assert!(matches!(s.validate(), Err(Error::Config(_))), "{bad}");
    }
}

fn kl_value(fp: &[Vec<f64>], q: &[Vec<f64>], temperature: f64) -> f64 {
    let tape = Tape::new();
    kl_loss(tape.constant(t2(fp)), tape.constant(t2(q)), temperature).unwrap().item()
}

#[test]
fn kl_examples() {
    let l = vec![vec![0.3, -1.2, 2.0]];
    assert!(kl_value(&l, &l, 1.0).abs() < 1e-15);
    // p = [0.5, 0.5]; q = [0.25, 0.75] from logits [0, ln 3]
    let got = kl_value(&[vec![0.0, 0.0]], &[vec![0.0, 3f64.ln()]], 1.0);
    let want = 0.5 * 2f64.ln() + 0.5 * (2.0f64 / 3.0).ln();
    assert!((got - want).abs() < 1e-12);
    assert!((got - 0.143841).abs() < 1e-6);
}

#[test]
fn kl_temperature_flattens() {
    let fp = vec![vec![2.0, 0.0, -1.0]];
    let q = vec![vec![0.0, 1.0, 0.5]];
    assert!(kl_value(&fp, &q, 4.0) < kl_value(&fp, &q, 1.0));
    let tape = Tape::new();
    let c = tape.constant(t2(&fp));
    assert!(matches!(kl_loss(c, c, 0.0), Err(Error::Config(_))));
}

#[test]
fn kl_gradient_reaches_only_quantized_logits() {
    let tape = Tape::new();
    let fp = tape.param(t2(&[vec![1.0, 0.0, -1.0]]));
    let q = tape.param(t2(&[vec![0.0, 0.5, 0.0]]));
    tape.backward(kl_loss(fp, q, 1.0).unwrap()).unwrap();
    assert!(fp.grad().is_none_or(|g| g.data().iter().all(|&v| v == 0.0)));
    assert!(q.grad().unwrap().data().iter().any(|&v| v != 0.0));
}

#[test]
fn kl_rejects_non_finite_reference() {
    let tape = Tape::new();
    let fp = tape.constant(t2(&[vec![f64::NAN, 0.0]]));
    let q = tape.constant(t2(&[vec![0.0, 0.0]]));
    assert!(matches!(kl_loss(fp, q, 1.0), Err(Error::NonFinite { .. })));
}

#[test]
fn label_smoothing_keeps_kl_nonnegative() {
    let tape = Tape::new();
    let fp = tape.constant(t2(&[vec![5.0, -5.0, 0.0]]));
    let q = tape.constant(t2(&[vec![-1.0, 2.0, 0.0]]));
    let plain = kl_loss(fp, q, 1.0).unwrap().item();
    let smooth = kl_loss_smoothed(fp, q, 1.0, 0.1).unwrap().item();
    assert!(smooth >= 0.0 && smooth != plain);
}

#[test]
fn hybrid_endpoints_and_midpoint() {
    let mut rng = ChaCha8Rng::seed_from_u64(30);
    let tape = Tape::new();
    let b = BlockOutputs::new(
        tape.constant(random(&mut rng, 4, 3)),
        tape.constant(random(&mut rng, 4, 3)),
    )
    .unwrap();
    let (lf, lq) = (tape.constant(random(&mut rng, 4, 5)), tape.constant(random(&mut rng, 4, 5)));
    let m = mse_loss(&b).unwrap().item();
    let k = kl_loss(lf, lq, 1.0).unwrap().item();
    assert_eq!(hybrid_loss(&b, lf, lq, 1.0, 1.0).unwrap().item(), m);
    assert_eq!(hybrid_loss(&b, lf, lq, 0.0, 1.0).unwrap().item(), k);
    assert!((hybrid_loss(&b, lf, lq, 0.5, 1.0).unwrap().item() - (m + k) / 2.0).abs() < 1e-15);
    assert!(matches!(hybrid_loss(&b, lf, lq, -0.1, 1.0), Err(Error::Config(_))));
}

#[test]
fn per_projection_values_average_to_sw() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let (y_fp, y_q) = (random(&mut rng, 5, 3), random(&mut rng, 5, 3));
    let proj = sample_projections(3, 10, 7).unwrap();
    let per = per_projection_w1(&y_fp, &y_q, &proj).unwrap();
    let mean = per.iter().sum::<f64>() / per.len() as f64;
    assert!((mean - sw(&y_fp, &y_q, &proj)).abs() < 1e-14);
    for (i, w) in per.iter().enumerate() {
        let single = ProjectionSet::from_directions(&[proj.matrix().row(i).to_vec()]).unwrap();
        assert!((w - sw(&y_fp, &y_q, &single)).abs() < 1e-14);
    }
}

#[test]
fn every_loss_passes_gradient_check() {
    for name in [
        "mse", "w1_1d", "sw_nproj_1", "sw_nproj_16", "sw_nproj_128", "kl", "kl_temperature_2",
        "hybrid", "combined_sw_w_0", "combined_sw_w_0.2", "combined_sw_w_1",
    ] {
        let err = gradcheck::find(name).unwrap().worst_error(5, 1).unwrap();
        assert!(err < gradcheck::GRAD_TOLERANCE, "{name}: {err}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn kl_is_nonnegative(fp in prop::collection::vec(-5.0f64..5.0, 12), q in prop::collection::vec(-5.0f64..5.0, 12)) {
        let fp: Vec<Vec<f64>> = fp.chunks(4).map(<[f64]>::to_vec).collect();
        let q: Vec<Vec<f64>> = q.chunks(4).map(<[f64]>::to_vec).collect();
        prop_assert!(kl_value(&fp, &q, 1.0) >= -1e-15);
    }

    #[test]
    fn sw_is_symmetric_and_nonnegative(seed in 0u64..1000, n in 1usize..8, d in 1usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (a, b) = (random(&mut rng, n, d), random(&mut rng, n, d));
        let proj = sample_projections(d, 8, seed).unwrap();
        let ab = sw(&a, &b, &proj);
        prop_assert!(ab >= 0.0);
        prop_assert_eq!(ab, sw(&b, &a, &proj));
    }

    #[test]
    fn sw_never_exceeds_mean_row_distance(seed in 0u64..1000, n in 1usize..8, d in 1usize..5) {
        // the identity coupling is a feasible transport plan
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (a, b) = (random(&mut rng, n, d), random(&mut rng, n, d));
        let proj = sample_projections(d, 8, seed).unwrap();
        let mean_dist = (0..n)
            .map(|r| a.row(r).iter().zip(b.row(r)).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt())
            .sum::<f64>() / n as f64;
        prop_assert!(sw(&a, &b, &proj) <= mean_dist + 1e-12);
    }
}
