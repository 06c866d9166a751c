//! Classifier heads, the ordered temporal alignment metric, losses,
//! prediction distillation and the moving-average teacher update.

use rand::Rng;

use crate::error::{shape_err, Error, Result};
use crate::params::{uniform, Bound, ParamStore};
use crate::tensor::{cosine, cosine_grads, Tape, Tensor, Var};

pub const CLS_W: &str = "cls_w";
pub const CLS_B: &str = "cls_b";

/// Floor applied to probabilities before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;

/// A normalized probability vector.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbDist(Vec<f64>);

impl ProbDist {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::Numeric("empty probability vector".into()));
        }
        if probs.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
            return Err(Error::Numeric(format!("invalid probability in {probs:?}")));
        }
        let s: f64 = probs.iter().sum();
        if (s - 1.0).abs() > 1e-9 {
            return Err(Error::Numeric(format!("probabilities sum to {s}")));
        }
        Ok(Self(probs))
    }

    pub fn from_var(tape: &Tape, v: Var) -> Result<Self> {
        Self::new(tape.value(v).to_vec())
    }

    pub fn probs(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Index of the largest probability (first one on ties).
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &p) in self.0.iter().enumerate() {
            if p > self.0[best] {
                best = i;
            }
        }
        best
    }
}

/// Linear classifier over temporally pooled features.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams {
    store: ParamStore,
}

impl HeadParams {
    pub fn init(dim: usize, num_classes: usize, rng: &mut impl Rng) -> Self {
        let mut store = ParamStore::new();
        store.insert(CLS_W, uniform(&[dim, num_classes], 1.0 / (dim as f64).sqrt(), rng));
        store.insert(CLS_B, Tensor::zeros(&[num_classes]));
        Self { store }
    }

    pub fn zeros(dim: usize, num_classes: usize) -> Self {
        let mut store = ParamStore::new();
        store.insert(CLS_W, Tensor::zeros(&[dim, num_classes]));
        store.insert(CLS_B, Tensor::zeros(&[num_classes]));
        Self { store }
    }

    pub fn from_store(store: ParamStore) -> Result<Self> {
        let (d, c) = store.get(CLS_W)?.dims2()?;
        if store.len() != 2 || store.get(CLS_B)?.shape() != [c] || d == 0 {
            return Err(Error::Structural("classifier head needs cls_w [D×Ñ] and cls_b [Ñ]".into()));
        }
        Ok(Self { store })
    }

    pub fn num_classes(&self) -> usize {
        self.store.get(CLS_B).map(|b| b.numel()).unwrap_or(0)
    }

    pub fn dim(&self) -> usize {
        self.store.get(CLS_W).map(|w| w.shape()[0]).unwrap_or(0)
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn into_store(self) -> ParamStore {
        self.store
    }

    pub fn bind(&self, tape: &mut Tape) -> Bound {
        self.store.bind(tape)
    }
}

/// Mean-pool over frames, linear map to `Ñ` logits, softmax.
pub fn supervised_probs(tape: &mut Tape, feature: Var, head: &Bound) -> Result<Var> {
    let pooled = tape.row_mean(feature)?;
    let logits = tape.linear(pooled, head.var(CLS_W)?, head.var(CLS_B)?)?;
    tape.softmax(logits)
}

/// Per-class frame-wise mean of the support features. `support` pairs each
/// feature with its episode-local class in `0..n_way`.
pub fn prototypes(tape: &mut Tape, support: &[(Var, usize)], n_way: usize) -> Result<Vec<Var>> {
    let mut members: Vec<Vec<Var>> = vec![Vec::new(); n_way];
    for &(v, c) in support {
        if c >= n_way {
            return Err(Error::Episode(format!("support label {c} outside 0..{n_way}")));
        }
        members[c].push(v);
    }
    let mut out = Vec::with_capacity(n_way);
    for (c, vs) in members.iter().enumerate() {
        let Some((&first, rest)) = vs.split_first() else {
            return Err(Error::Episode(format!("class {c} has no support samples")));
        };
        let mut acc = first;
        for &v in rest {
            acc = tape.add(acc, v)?;
        }
        out.push(if vs.len() == 1 { acc } else { tape.scale(acc, 1.0 / vs.len() as f64)? });
    }
    Ok(out)
}

/// Settings of the ordered alignment metric.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AlignConfig {
    /// Soft-min smoothing; `0` selects the hard minimum.
    pub gamma: f64,
    /// Pad the prototype axis with free zero-cost columns at both ends so
    /// the alignment may start and end anywhere along the prototype.
    pub relaxed_boundary: bool,
}

impl Default for AlignConfig {
    fn default() -> Self {
        Self { gamma: 0.1, relaxed_boundary: false }
    }
}

/// Frame distance matrix `C[l][m] = 1 − cos(query_l, proto_m)`, row-major
/// `rows × cols`.
pub fn frame_cost_matrix(query: &[f64], proto: &[f64], rows: usize, cols: usize, dim: usize) -> Result<Vec<f64>> {
    let mut c = Vec::with_capacity(rows * cols);
    for l in 0..rows {
        for m in 0..cols {
            c.push(1.0 - cosine(&query[l * dim..(l + 1) * dim], &proto[m * dim..(m + 1) * dim])?);
        }
    }
    Ok(c)
}

fn pad_columns(cost: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(rows * (cols + 2));
    for l in 0..rows {
        out.push(0.0);
        out.extend_from_slice(&cost[l * cols..(l + 1) * cols]);
        out.push(0.0);
    }
    out
}

fn soft_min(xs: &[f64], gamma: f64) -> f64 {
    let m = xs.iter().cloned().fold(f64::INFINITY, f64::min);
    if gamma == 0.0 || m.is_infinite() {
        return m;
    }
    let s: f64 = xs.iter().map(|x| (-(x - m) / gamma).exp()).sum();
    m - gamma * s.ln()
}

/// Accumulated cost table for monotone alignments from `(0,0)` to
/// `(rows−1, cols−1)` with right, down and diagonal moves.
fn accumulate(cost: &[f64], rows: usize, cols: usize, gamma: f64) -> Vec<f64> {
    let mut r = vec![f64::INFINITY; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            let c = cost[i * cols + j];
            if i == 0 && j == 0 {
                r[0] = c;
                continue;
            }
            let mut prev = [f64::INFINITY; 3];
            if i > 0 {
                prev[0] = r[(i - 1) * cols + j];
            }
            if j > 0 {
                prev[1] = r[i * cols + j - 1];
            }
            if i > 0 && j > 0 {
                prev[2] = r[(i - 1) * cols + j - 1];
            }
            r[i * cols + j] = c + soft_min(&prev, gamma);
        }
    }
    r
}

/// `∂ R[end] / ∂ cost[i][j]` for every cell.
fn accumulate_grad(cost: &[f64], r: &[f64], rows: usize, cols: usize, gamma: f64) -> Vec<f64> {
    let mut e = vec![0.0; rows * cols];
    e[rows * cols - 1] = 1.0;
    // Predecessor weights of cell s: softmax(-R[pred]/γ), or a one-hot argmin
    // (first of up, left, diagonal) when γ = 0.
    let weights = |i: usize, j: usize| -> [(isize, isize, f64); 3] {
        let cand = [(-1isize, 0isize), (0, -1), (-1, -1)];
        let vals: Vec<f64> = cand
            .iter()
            .map(|&(di, dj)| {
                let (pi, pj) = (i as isize + di, j as isize + dj);
                if pi < 0 || pj < 0 {
                    f64::INFINITY
                } else {
                    r[pi as usize * cols + pj as usize]
                }
            })
            .collect();
        let mut w = [0.0; 3];
        if gamma == 0.0 {
            let mut best = 0;
            for k in 1..3 {
                if vals[k] < vals[best] {
                    best = k;
                }
            }
            w[best] = 1.0;
        } else {
            let smin = r[i * cols + j] - cost[i * cols + j];
            for k in 0..3 {
                if vals[k].is_finite() {
                    w[k] = ((smin - vals[k]) / gamma).exp();
                }
            }
        }
        [(cand[0].0, cand[0].1, w[0]), (cand[1].0, cand[1].1, w[1]), (cand[2].0, cand[2].1, w[2])]
    };
    for i in (0..rows).rev() {
        for j in (0..cols).rev() {
            if i == 0 && j == 0 {
                continue;
            }
            let g = e[i * cols + j];
            if g == 0.0 {
                continue;
            }
            for (di, dj, w) in weights(i, j) {
                if w != 0.0 {
                    let (pi, pj) = ((i as isize + di) as usize, (j as isize + dj) as usize);
                    e[pi * cols + pj] += g * w;
                }
            }
        }
    }
    e
}

/// Alignment cost of a precomputed `rows × cols` cost matrix.
pub fn alignment_cost(cost: &[f64], rows: usize, cols: usize, align: AlignConfig) -> Result<f64> {
    if align.gamma < 0.0 || !align.gamma.is_finite() {
        return Err(Error::Usage(format!("gamma must be a finite non-negative value, got {}", align.gamma)));
    }
    if rows == 0 || cols == 0 || cost.len() != rows * cols {
        return shape_err(format!("cost matrix of {} values is not {rows}×{cols}", cost.len()));
    }
    let (cost, cols) =
        if align.relaxed_boundary { (pad_columns(cost, rows, cols), cols + 2) } else { (cost.to_vec(), cols) };
    Ok(accumulate(&cost, rows, cols, align.gamma)[rows * cols - 1])
}

/// Ordered alignment distance between two `M × D` feature sequences,
/// recorded on the tape. Differentiable for `gamma > 0`; at `gamma = 0`
/// the gradient follows the minimum-cost path.
pub fn otam_distance(tape: &mut Tape, query: Var, proto: Var, align: AlignConfig) -> Result<Var> {
    if align.gamma < 0.0 || !align.gamma.is_finite() {
        return Err(Error::Usage(format!("gamma must be a finite non-negative value, got {}", align.gamma)));
    }
    let shape = tape.shape(query).to_vec();
    if tape.shape(proto) != shape.as_slice() || shape.len() != 2 {
        return shape_err(format!("alignment needs equal M×D shapes, got {shape:?} and {:?}", tape.shape(proto)));
    }
    let (m, d) = (shape[0], shape[1]);
    let cost = frame_cost_matrix(tape.value(query), tape.value(proto), m, m, d)?;
    let value = alignment_cost(&cost, m, m, align)?;

    let backward = Box::new(move |g: &[f64], inputs: &[&[f64]], _out: &[f64]| -> Vec<Vec<f64>> {
        let (q, p) = (inputs[0], inputs[1]);
        let cost = frame_cost_matrix(q, p, m, m, d).expect("validated in forward");
        let (padded, cols, off) =
            if align.relaxed_boundary { (pad_columns(&cost, m, m), m + 2, 1) } else { (cost, m, 0) };
        let r = accumulate(&padded, m, cols, align.gamma);
        let e = accumulate_grad(&padded, &r, m, cols, align.gamma);
        let mut gq = vec![0.0; m * d];
        let mut gp = vec![0.0; m * d];
        for l in 0..m {
            for k in 0..m {
                let w = e[l * cols + k + off] * g[0];
                if w == 0.0 {
                    continue;
                }
                let (ql, pk) = (&q[l * d..(l + 1) * d], &p[k * d..(k + 1) * d]);
                let c = 1.0 - padded[l * cols + k + off];
                let (dq, dp) = cosine_grads(ql, pk, c);
                gq[l * d..(l + 1) * d].iter_mut().zip(dq).for_each(|(o, x)| *o -= w * x);
                gp[k * d..(k + 1) * d].iter_mut().zip(dp).for_each(|(o, x)| *o -= w * x);
            }
        }
        vec![gq, gp]
    });
    tape.custom(&[query, proto], vec![1], vec![value], backward)
}

/// Softmax over negated alignment distances scaled by `1/tau`.
pub fn meta_probs(tape: &mut Tape, query: Var, protos: &[Var], align: AlignConfig, tau: f64) -> Result<Var> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::Usage(format!("temperature must be positive, got {tau}")));
    }
    if protos.is_empty() {
        return Err(Error::Episode("no prototypes".into()));
    }
    let dists = protos.iter().map(|&p| otam_distance(tape, query, p, align)).collect::<Result<Vec<_>>>()?;
    let d = tape.stack(&dists)?;
    let logits = tape.scale(d, -1.0 / tau)?;
    tape.softmax(logits)
}

/// `−log p[label]` with `p` floored at [`PROB_FLOOR`].
pub fn cross_entropy(tape: &mut Tape, probs: Var, label: usize) -> Result<Var> {
    let n = tape.value(probs).len();
    if label >= n {
        return Err(Error::Usage(format!("label {label} outside 0..{n}")));
    }
    let p = tape.select(probs, label)?;
    let p = tape.clamp_min(p, PROB_FLOOR)?;
    let lp = tape.log(p)?;
    tape.scale(lp, -1.0)
}

/// `KL(teacher ‖ student) = Σ_j Q_j log(Q_j / P_j)`. The teacher enters as
/// plain numbers, so no gradient can reach it; zero teacher entries
/// contribute nothing.
pub fn kl_distill(tape: &mut Tape, teacher: &ProbDist, student: Var) -> Result<Var> {
    let n = tape.value(student).len();
    if teacher.len() != n {
        return shape_err(format!("teacher has {} classes, student {n}", teacher.len()));
    }
    let q = teacher.probs();
    let entropy_term: f64 = q.iter().filter(|&&x| x > 0.0).map(|&x| x * x.ln()).sum();
    let p = tape.clamp_min(student, PROB_FLOOR)?;
    let lp = tape.log(p)?;
    let shape = tape.shape(student).to_vec();
    let w = tape.constant(shape, q.to_vec())?;
    let cross = tape.mul(w, lp)?;
    let cross = tape.sum(cross)?;
    let neg = tape.scale(cross, -1.0)?;
    let c = tape.constant(vec![1], vec![entropy_term])?;
    tape.add(c, neg)
}

/// `θ_t ← α·θ_t + (1−α)·θ_s`, in place on the teacher.
pub fn ema_update(teacher: &mut ParamStore, student: &ParamStore, alpha: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Usage(format!("EMA coefficient must lie in [0, 1], got {alpha}")));
    }
    teacher.check_congruent(student)?;
    for ((_, t), (_, s)) in teacher.iter_mut().zip(student.iter()) {
        t.data_mut().iter_mut().zip(s.data()).for_each(|(a, &b)| *a = alpha * *a + (1.0 - alpha) * b);
    }
    Ok(())
}

/// `Σ_k weight_k · Σ terms_k`. Zero-weight groups are left out of the graph
/// entirely.
pub fn weighted_total(tape: &mut Tape, groups: &[(f64, &[Var])]) -> Result<Var> {
    let mut total: Option<Var> = None;
    for &(w, terms) in groups {
        if !(w >= 0.0 && w.is_finite()) {
            return Err(Error::Usage(format!("loss weights must be non-negative, got {w}")));
        }
        if w == 0.0 || terms.is_empty() {
            continue;
        }
        let mut s = terms[0];
        for &t in &terms[1..] {
            s = tape.add(s, t)?;
        }
        let s = if w == 1.0 { s } else { tape.scale(s, w)? };
        total = Some(match total {
            None => s,
            Some(acc) => tape.add(acc, s)?,
        });
    }
    match total {
        Some(t) => Ok(t),
        None => tape.constant(vec![1], vec![0.0]),
    }
}

/// Pre-training objective: `α₁ Σ L_con + α₂ Σ L_super`.
pub fn total_loss_pretrain(tape: &mut Tape, con: &[Var], sup: &[Var], alphas: [f64; 2]) -> Result<Var> {
    weighted_total(tape, &[(alphas[0], con), (alphas[1], sup)])
}

/// Meta-training objective:
/// `α₁ Σ L_con + α₂ Σ L_meta + α₃ Σ L_super + α₄ Σ L_m + α₅ Σ L_s`.
pub fn total_loss_meta(
    tape: &mut Tape,
    con: &[Var],
    meta: &[Var],
    sup: &[Var],
    distill_meta: &[Var],
    distill_sup: &[Var],
    alphas: [f64; 5],
) -> Result<Var> {
    weighted_total(
        tape,
        &[(alphas[0], con), (alphas[1], meta), (alphas[2], sup), (alphas[3], distill_meta), (alphas[4], distill_sup)],
    )
}
