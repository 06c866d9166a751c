//! Property tests for the autodiff engine, the alignment metric, the losses
//! and the center calibration.

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use dmsd::codec::{cycle_loss, dtd_forward, dte_forward, EncoderParams};
use dmsd::heads::{
    alignment_cost, ema_update, frame_cost_matrix, kl_distill, meta_probs, otam_distance, AlignConfig, ProbDist,
};
use dmsd::mixer::{icc_center, CenterMode};
use dmsd::tensor::{grad_check, Tape, Tensor};
use dmsd::Error;

const HARD: AlignConfig = AlignConfig { gamma: 0.0, relaxed_boundary: false };

fn matrix(m: usize, d: usize, lo: f64, hi: f64) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(lo..hi, m * d).prop_map(move |v| Tensor::matrix(m, d, v).unwrap())
}

/// Minimum over every monotone path, by explicit enumeration.
fn brute_force(cost: &[f64], r: usize, c: usize) -> f64 {
    fn walk(cost: &[f64], r: usize, c: usize, i: usize, j: usize, acc: f64) -> f64 {
        let acc = acc + cost[i * c + j];
        if i == r - 1 && j == c - 1 {
            return acc;
        }
        let mut best = f64::INFINITY;
        if i + 1 < r {
            best = best.min(walk(cost, r, c, i + 1, j, acc));
        }
        if j + 1 < c {
            best = best.min(walk(cost, r, c, i, j + 1, acc));
        }
        if i + 1 < r && j + 1 < c {
            best = best.min(walk(cost, r, c, i + 1, j + 1, acc));
        }
        best
    }
    walk(cost, r, c, 0, 0, 0.0)
}

fn otam(q: &Tensor, p: &Tensor, align: AlignConfig) -> f64 {
    let mut tape = Tape::new();
    let (a, b) = (tape.leaf(q), tape.leaf(p));
    let d = otam_distance(&mut tape, a, b, align).unwrap();
    tape.scalar(d).unwrap()
}

fn argmax(v: &[f64]) -> usize {
    (0..v.len()).fold(0, |best, i| if v[i] > v[best] { i } else { best })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn softmax_is_a_distribution_and_shift_invariant(
        logits in prop::collection::vec(-30.0f64..30.0, 1..12),
        shift in -100.0f64..100.0,
    ) {
        let mut tape = Tape::new();
        let a = tape.constant(vec![logits.len()], logits.clone()).unwrap();
        let b = tape.constant(vec![logits.len()], logits.iter().map(|x| x + shift).collect()).unwrap();
        let (pa, pb) = (tape.softmax(a).unwrap(), tape.softmax(b).unwrap());
        let (pa, pb) = (tape.value(pa), tape.value(pb));
        prop_assert!((pa.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        prop_assert!(pa.iter().all(|&p| p >= 0.0));
        for (x, y) in pa.iter().zip(pb) {
            prop_assert!((x - y).abs() <= 1e-12);
        }
    }

    #[test]
    fn gradients_sum_over_uses(x in prop::collection::vec(-5.0f64..5.0, 1..8)) {
        // f = Σ (x·x + x) has ∂f/∂x = 2x + 1.
        let t = Tensor::vector(x.clone()).unwrap().with_grad();
        let mut tape = Tape::new();
        let v = tape.leaf(&t);
        let sq = tape.mul(v, v).unwrap();
        let s = tape.add(sq, v).unwrap();
        let f = tape.sum(s).unwrap();
        let g = tape.backward(f).unwrap();
        for (gi, xi) in g.get(v).unwrap().iter().zip(&x) {
            prop_assert!((gi - (2.0 * xi + 1.0)).abs() <= 1e-12);
        }
    }

    #[test]
    fn hard_alignment_matches_enumeration(
        (r, c, cost) in (1usize..=5, 1usize..=5)
            .prop_flat_map(|(r, c)| (Just(r), Just(c), prop::collection::vec(0.0f64..2.0, r * c)))
    ) {
        let dp = alignment_cost(&cost, r, c, HARD).unwrap();
        prop_assert!((dp - brute_force(&cost, r, c)).abs() <= 1e-12);
        // Smoothing only ever lowers the cost, by at most γ·ln(#paths) ≤ γ·ln(3)·(r+c).
        let gamma = 0.05;
        let soft = alignment_cost(&cost, r, c, AlignConfig { gamma, relaxed_boundary: false }).unwrap();
        prop_assert!(soft <= dp + 1e-12);
        prop_assert!(dp - soft <= gamma * 3f64.ln() * (r + c) as f64);
    }

    #[test]
    fn alignment_of_frames_matches_enumeration(q in matrix(4, 6, -1.0, 1.0), p in matrix(4, 6, -1.0, 1.0)) {
        let cost = frame_cost_matrix(q.data(), p.data(), 4, 4, 6).unwrap();
        prop_assert!((otam(&q, &p, HARD) - brute_force(&cost, 4, 4)).abs() <= 1e-12);
        prop_assert!(otam(&q, &p, HARD) >= 0.0);
    }

    #[test]
    fn self_alignment_is_zero(f in matrix(5, 6, -1.0, 1.0)) {
        prop_assert!(otam(&f, &f, HARD).abs() <= 1e-12);
    }

    #[test]
    fn alignment_gradient_matches_finite_differences(q in matrix(3, 4, -1.0, 1.0), p in matrix(3, 4, -1.0, 1.0)) {
        let align = AlignConfig { gamma: 0.1, relaxed_boundary: false };
        let err = grad_check(|tape, v| { let c = tape.leaf(&p); otam_distance(tape, v, c, align) }, &q, 1e-5).unwrap();
        prop_assert!(err < 1e-6, "max rel err {err}");
    }

    #[test]
    fn kl_is_nonnegative_and_zero_on_itself(
        (a, b) in (2usize..10).prop_flat_map(|n| (
            prop::collection::vec(-8.0f64..8.0, n),
            prop::collection::vec(-8.0f64..8.0, n),
        ))
    ) {
        let mut tape = Tape::new();
        let la = tape.constant(vec![a.len()], a).unwrap();
        let lb = tape.constant(vec![b.len()], b).unwrap();
        let (pa, pb) = (tape.softmax(la).unwrap(), tape.softmax(lb).unwrap());
        let q = ProbDist::from_var(&tape, pb).unwrap();
        let kl = kl_distill(&mut tape, &q, pa).unwrap();
        prop_assert!(tape.scalar(kl).unwrap() >= -1e-12);
        let self_kl = kl_distill(&mut tape, &q, pb).unwrap();
        prop_assert!(tape.scalar(self_kl).unwrap().abs() <= 1e-12);
    }

    #[test]
    fn meta_prediction_follows_nearest_prototype(
        q in matrix(3, 5, -1.0, 1.0),
        protos in prop::collection::vec(matrix(3, 5, -1.0, 1.0), 2..6),
        tau in 0.05f64..5.0,
        s in 0.1f64..10.0,
    ) {
        let probs = |tau: f64| {
            let mut tape = Tape::new();
            let qv = tape.leaf(&q);
            let pv: Vec<_> = protos.iter().map(|p| tape.leaf(p)).collect();
            let out = meta_probs(&mut tape, qv, &pv, HARD, tau).unwrap();
            tape.value(out).to_vec()
        };
        let dists: Vec<f64> = protos.iter().map(|p| otam(&q, p, HARD)).collect();
        let mut sorted = dists.clone();
        sorted.sort_by(f64::total_cmp);
        prop_assume!(sorted[1] - sorted[0] > 1e-9);
        let nearest = argmax(&dists.iter().map(|d| -d).collect::<Vec<_>>());
        prop_assert_eq!(argmax(&probs(tau)), nearest);
        prop_assert_eq!(argmax(&probs(tau * s)), nearest);
    }

    #[test]
    fn ema_is_the_exact_convex_combination(seed in any::<u64>(), alpha in 0.0f64..=1.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let student = EncoderParams::init(4, 6, &mut rng);
        let before = EncoderParams::init(4, 6, &mut rng);
        let mut teacher = before.clone();
        ema_update(teacher.store_mut(), student.store(), alpha).unwrap();
        for (((_, t), (_, b)), (_, s)) in teacher.store().iter().zip(before.store().iter()).zip(student.store().iter()) {
            for ((t, b), s) in t.data().iter().zip(b.data()).zip(s.data()) {
                prop_assert_eq!(t.to_bits(), (alpha * b + (1.0 - alpha) * s).to_bits());
            }
        }
        let d0 = before.store().distance(student.store()).unwrap();
        let d1 = teacher.store().distance(student.store()).unwrap();
        prop_assert!((d1 - alpha * d0).abs() <= 1e-12 * d0.max(1.0));
    }

    #[test]
    fn reconstruction_loss_is_nonnegative(seed in any::<u64>(), f in matrix(4, 6, -2.0, 2.0)) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (enc, dec) = (EncoderParams::init(6, 8, &mut rng), EncoderParams::init(6, 8, &mut rng));
        let mut tape = Tape::new();
        let (be, bd) = (enc.bind(&mut tape), dec.bind(&mut tape));
        let x = tape.leaf(&f);
        let z = dte_forward(&mut tape, x, &be).unwrap();
        prop_assert_eq!(tape.shape(z), &[4, 6]);
        let r = dtd_forward(&mut tape, z, &bd).unwrap();
        let l = cycle_loss(&mut tape, r, x).unwrap();
        prop_assert!(tape.scalar(l).unwrap() >= 0.0);
        let zero = cycle_loss(&mut tape, x, x).unwrap();
        prop_assert_eq!(tape.scalar(zero).unwrap(), 0.0);
    }

    #[test]
    fn center_is_permutation_invariant_and_bounded(
        xs in prop::collection::vec(matrix(3, 4, 0.05, 1.0), 2..7),
        rot in 0usize..7,
    ) {
        let refs: Vec<&Tensor> = xs.iter().collect();
        let base = icc_center(&refs, CenterMode::Calibrated).unwrap();
        let mut rotated = refs.clone();
        rotated.rotate_left(rot % refs.len());
        let c = icc_center(&rotated, CenterMode::Calibrated).unwrap();
        prop_assert_eq!(&c.center, &base.center);
        prop_assert!(base.weights.iter().all(|w| (-1.0..=1.0 + 1e-12).contains(w)));
        // Positive weights: the center is a convex combination, so it stays
        // inside the coordinate-wise hull.
        for (k, v) in base.center.data().iter().enumerate() {
            let lo = xs.iter().map(|x| x.data()[k]).fold(f64::INFINITY, f64::min);
            let hi = xs.iter().map(|x| x.data()[k]).fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(*v >= lo - 1e-12 && *v <= hi + 1e-12);
        }
        let mean = icc_center(&refs, CenterMode::Mean).unwrap();
        for (k, v) in mean.center.data().iter().enumerate() {
            let m = xs.iter().map(|x| x.data()[k]).sum::<f64>() / xs.len() as f64;
            prop_assert!((v - m).abs() <= 1e-12);
        }
    }
}

#[test]
fn backward_twice_is_an_error() {
    let x = Tensor::vector(vec![1.0, 2.0]).unwrap().with_grad();
    let mut tape = Tape::new();
    let v = tape.leaf(&x);
    let s = tape.sum(v).unwrap();
    tape.backward(s).unwrap();
    assert!(matches!(tape.backward(s), Err(Error::Usage(_))));
}

#[test]
fn backward_needs_a_scalar_root() {
    let x = Tensor::vector(vec![1.0, 2.0]).unwrap().with_grad();
    let mut tape = Tape::new();
    let v = tape.leaf(&x);
    assert!(matches!(tape.backward(v), Err(Error::Usage(_))));
}

#[test]
fn center_needs_two_instances() {
    let x = Tensor::matrix(2, 2, vec![1.0; 4]).unwrap();
    assert!(matches!(icc_center(&[&x], CenterMode::Calibrated), Err(Error::Degenerate(_))));
}
