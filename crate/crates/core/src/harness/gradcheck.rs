//! Finite-difference verification of every differentiable operation and of
//! the full meta-training objective on a tiny episode.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::{Ablation, LossWeights};
use super::train::{student_losses, teacher_outputs, EpisodeInputs, LossSetup, Member, Stage, StudentVars};
use crate::codec::{attention_block, cycle_loss, dtd_forward, dte_forward, EncoderParams};
use crate::error::Result;
use crate::heads::{
    cross_entropy, kl_distill, meta_probs, otam_distance, supervised_probs, AlignConfig, HeadParams, ProbDist, CLS_B,
    CLS_W,
};
use crate::params::Bound;
use crate::tensor::{grad_check_many, Tape, Tensor, Var};

/// Central-difference step.
pub const STEP: f64 = 1e-5;
/// Tolerance for single primitive operations.
pub const PRIMITIVE_TOL: f64 = 1e-6;
/// Tolerance for composite blocks and losses.
pub const COMPOSITE_TOL: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_err: f64,
    pub tolerance: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tolerance
    }
}

impl std::fmt::Display for CheckResult {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{} {:<24} max rel err {:.3e} (tol {:.0e})",
            if self.passed() { "PASS" } else { "FAIL" },
            self.name,
            self.max_rel_err,
            self.tolerance
        )
    }
}

/// Reduces any output to a scalar through fixed random weights so every
/// output coordinate contributes to the check.
fn project(tape: &mut Tape, v: Var, salt: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed ^ salt);
    let shape = tape.shape(v).to_vec();
    let n = shape.iter().product();
    let w = tape.constant(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())?;
    let p = tape.mul(v, w)?;
    tape.sum(p)
}

fn rand_t(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).expect("shape")
}

/// Values bounded away from zero so `relu` has no kink within a step.
fn away_from_zero(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.random_range(0.1..1.0);
            if rng.random_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape")
}

fn check<F>(name: &str, tol: f64, xs: &[Tensor], f: F) -> Result<CheckResult>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let salt = name.bytes().fold(0u64, |h, b| h.wrapping_mul(31).wrapping_add(b as u64));
    let err = grad_check_many(
        |tape, v| {
            let out = f(tape, v)?;
            project(tape, out, salt)
        },
        xs,
        STEP,
    )?;
    Ok(CheckResult { name: name.to_string(), max_rel_err: err, tolerance: tol })
}

fn encoder_inputs(p: &EncoderParams) -> (Vec<String>, Vec<Tensor>) {
    p.store().iter().map(|(k, t)| (k.to_string(), t.clone())).unzip()
}

fn bind_named(names: &[String], vars: &[Var]) -> Bound {
    Bound::from_pairs(names.iter().cloned().zip(vars.iter().copied()).collect())
}

/// Primitive tape operations.
pub fn primitive_checks(rng: &mut ChaCha8Rng) -> Result<Vec<CheckResult>> {
    let a = rand_t(&[3, 4], -1.0, 1.0, rng);
    let b = rand_t(&[3, 4], -1.0, 1.0, rng);
    let w = rand_t(&[4, 2], -1.0, 1.0, rng);
    let bias = rand_t(&[2], -1.0, 1.0, rng);
    let pos = rand_t(&[5], 0.2, 2.0, rng);
    let kinked = away_from_zero(&[3, 4], rng);
    let v = rand_t(&[5], -2.0, 2.0, rng);
    let t = PRIMITIVE_TOL;
    Ok(vec![
        check("add", t, &[a.clone(), b.clone()], |tp, x| tp.add(x[0], x[1]))?,
        check("sub", t, &[a.clone(), b.clone()], |tp, x| tp.sub(x[0], x[1]))?,
        check("mul", t, &[a.clone(), b.clone()], |tp, x| tp.mul(x[0], x[1]))?,
        check("scale", t, std::slice::from_ref(&a), |tp, x| tp.scale(x[0], -1.7))?,
        check("matmul", t, &[a.clone(), w.clone()], |tp, x| tp.matmul(x[0], x[1]))?,
        check("linear", t, &[a.clone(), w.clone(), bias.clone()], |tp, x| tp.linear(x[0], x[1], x[2]))?,
        check("relu", t, &[kinked], |tp, x| tp.relu(x[0]))?,
        check("softmax", t, std::slice::from_ref(&v), |tp, x| tp.softmax(x[0]))?,
        check("log", t, std::slice::from_ref(&pos), |tp, x| tp.log(x[0]))?,
        check("clamp_min", t, std::slice::from_ref(&v), |tp, x| tp.clamp_min(x[0], 0.05))?,
        check("sum", t, std::slice::from_ref(&a), |tp, x| tp.sum(x[0]))?,
        check("mean", t, std::slice::from_ref(&a), |tp, x| tp.mean(x[0]))?,
        check("l2_norm_sq", t, std::slice::from_ref(&a), |tp, x| tp.l2_norm_sq(x[0]))?,
        check("cosine_similarity", t, &[a.clone(), b.clone()], |tp, x| tp.cosine_similarity(x[0], x[1]))?,
        check("row_mean", t, std::slice::from_ref(&a), |tp, x| tp.row_mean(x[0]))?,
        check("stack", t, std::slice::from_ref(&pos), |tp, x| {
            let s: Vec<Var> = (0..5).map(|k| tp.select(x[0], 4 - k)).collect::<Result<_>>()?;
            tp.stack(&s)
        })?,
        check("select", t, &[v], |tp, x| tp.select(x[0], 2))?,
    ])
}

/// Blocks and losses built from the primitives.
pub fn composite_checks(rng: &mut ChaCha8Rng) -> Result<Vec<CheckResult>> {
    let (m, d, classes) = (3, 4, 3);
    let enc = EncoderParams::init(d, 2 * d, rng);
    let (names, params) = encoder_inputs(&enc);
    let f = rand_t(&[m, d], -1.0, 1.0, rng);
    let g = rand_t(&[m, d], -1.0, 1.0, rng);
    let np = params.len();
    let with = |extra: &[Tensor]| -> Vec<Tensor> {
        let mut v = params.clone();
        v.extend_from_slice(extra);
        v
    };
    let head = HeadParams::init(d, classes, rng);
    let head_in = vec![head.store().get(CLS_W)?.clone(), head.store().get(CLS_B)?.clone(), f.clone()];
    let align = AlignConfig::default();
    let t = COMPOSITE_TOL;
    let protos: Vec<Tensor> = (0..3).map(|_| rand_t(&[m, d], -1.0, 1.0, rng)).collect();
    let mut meta_in = vec![f.clone()];
    meta_in.extend(protos);
    let teacher = ProbDist::new(vec![0.6, 0.3, 0.1])?;

    Ok(vec![
        check("attention_block", t, &with(&[f.clone(), g.clone()]), |tp, x| {
            attention_block(tp, x[np], x[np + 1], &bind_named(&names, &x[..np]))
        })?,
        check("encoder", t, &with(std::slice::from_ref(&f)), |tp, x| {
            dte_forward(tp, x[np], &bind_named(&names, &x[..np]))
        })?,
        check("decoder", t, &with(std::slice::from_ref(&f)), |tp, x| {
            dtd_forward(tp, x[np], &bind_named(&names, &x[..np]))
        })?,
        check("cycle_loss", t, &[f.clone(), g.clone()], |tp, x| cycle_loss(tp, x[0], x[1]))?,
        check("otam_distance", t, &[f.clone(), g.clone()], |tp, x| otam_distance(tp, x[0], x[1], align))?,
        check("otam_relaxed", t, &[f.clone(), g.clone()], |tp, x| {
            otam_distance(tp, x[0], x[1], AlignConfig { relaxed_boundary: true, ..align })
        })?,
        check("meta_probs", t, &meta_in, |tp, x| meta_probs(tp, x[0], &x[1..], align, 0.5))?,
        check("supervised_probs", t, &head_in, |tp, x| {
            let b = Bound::from_pairs(vec![(CLS_W.into(), x[0]), (CLS_B.into(), x[1])]);
            supervised_probs(tp, x[2], &b)
        })?,
        check("cross_entropy", t, &head_in, |tp, x| {
            let b = Bound::from_pairs(vec![(CLS_W.into(), x[0]), (CLS_B.into(), x[1])]);
            let p = supervised_probs(tp, x[2], &b)?;
            cross_entropy(tp, p, 1)
        })?,
        check("kl_distill", t, &head_in, |tp, x| {
            let b = Bound::from_pairs(vec![(CLS_W.into(), x[0]), (CLS_B.into(), x[1])]);
            let p = supervised_probs(tp, x[2], &b)?;
            kl_distill(tp, &teacher, p)
        })?,
    ])
}

/// The full meta-training objective with every term active, differentiated
/// with respect to all student parameters, on an `N=2, K=1, P=2, N′=2,
/// M=3, D=4` episode.
pub fn full_objective_check(rng: &mut ChaCha8Rng, mixed_ce: bool) -> Result<CheckResult> {
    let (n_way, m, d, classes) = (2, 3, 4, 3);
    let frames: Vec<Tensor> = (0..6).map(|_| rand_t(&[m, d], 0.1, 1.0, rng)).collect();
    let member = |i: usize, local: usize, global: usize| Member { frames: &frames[i], local, global };
    let inputs = EpisodeInputs {
        n_way,
        support: vec![member(0, 0, 2), member(1, 1, 0)],
        query: vec![member(2, 0, 2), member(3, 1, 0)],
        unlabeled: vec![&frames[4], &frames[5]],
    };
    let dte = EncoderParams::init(d, 2 * d, rng);
    let dtd = EncoderParams::init(d, 2 * d, rng);
    let dme = EncoderParams::init(d, 2 * d, rng);
    let head = HeadParams::init(d, classes, rng);
    let setup = LossSetup {
        stage: Stage::Metatrain,
        align: AlignConfig::default(),
        tau: 1.0,
        alphas: LossWeights { con: 1.0, meta: 0.7, sup: 1.3, distill_meta: 0.9, distill_sup: 1.1 },
        ablation: Ablation { mixed_ce, ..Ablation::default() },
    };
    let teacher = teacher_outputs(&inputs, &dme, &head, &setup)?;

    let (dte_names, mut xs) = encoder_inputs(&dte);
    let (dtd_names, dtd_in) = encoder_inputs(&dtd);
    xs.extend(dtd_in);
    xs.extend([head.store().get(CLS_W)?.clone(), head.store().get(CLS_B)?.clone()]);
    let (a, b) = (dte_names.len(), dte_names.len() + dtd_names.len());
    let name = if mixed_ce { "objective+mixed_ce" } else { "objective" };
    let err = grad_check_many(
        |tape, v| {
            let vars = StudentVars {
                dte: bind_named(&dte_names, &v[..a]),
                dtd: bind_named(&dtd_names, &v[a..b]),
                head: Bound::from_pairs(vec![(CLS_W.into(), v[b]), (CLS_B.into(), v[b + 1])]),
            };
            Ok(student_losses(tape, &inputs, &vars, Some(&teacher), &setup)?.0)
        },
        &xs,
        STEP,
    )?;
    Ok(CheckResult { name: name.into(), max_rel_err: err, tolerance: COMPOSITE_TOL })
}

/// Every check at the tiny scale.
pub fn run_tiny(seed: u64) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = primitive_checks(&mut rng)?;
    out.extend(composite_checks(&mut rng)?);
    out.push(full_objective_check(&mut rng, false)?);
    out.push(full_objective_check(&mut rng, true)?);
    Ok(out)
}
