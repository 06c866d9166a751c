//! Mixed-source features: a similarity-calibrated center of the unlabeled
//! target samples, and a cross-attention block that re-encodes source
//! samples with that center as the query.

use std::cmp::Ordering;

use crate::codec::{attention_block, EncoderParams};
use crate::error::{shape_err, Error, Result};
use crate::params::Bound;
use crate::tensor::{cosine, Tape, Tensor, Var};

/// How the target instances are aggregated into one center.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CenterMode {
    /// `Σ αᵢ fᵢ / Σ αᵢ` over all instances.
    #[default]
    Calibrated,
    /// `1/(N′−1) · Σ_{i<N′} αᵢ fᵢ`, i.e. the formula read with its printed
    /// bounds. Drops the last instance and is not permutation invariant.
    Literal,
    /// Plain arithmetic mean, weights all 1.
    Mean,
}

impl std::str::FromStr for CenterMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "calibrated" => Ok(Self::Calibrated),
            "literal" => Ok(Self::Literal),
            "mean" => Ok(Self::Mean),
            other => Err(format!("unknown center mode `{other}` (calibrated|literal|mean)")),
        }
    }
}

impl std::fmt::Display for CenterMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Calibrated => "calibrated",
            Self::Literal => "literal",
            Self::Mean => "mean",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibratedCenter {
    pub center: Tensor,
    /// One weight per input instance, in input order.
    pub weights: Vec<f64>,
}

/// Below this total weight the calibrated center falls back to the mean.
const MIN_WEIGHT_SUM: f64 = 1e-8;

fn lexicographic(a: &[f64], b: &[f64]) -> Ordering {
    a.iter().zip(b).map(|(x, y)| x.total_cmp(y)).find(|o| o.is_ne()).unwrap_or(Ordering::Equal)
}

/// Aggregates `N′ ≥ 2` same-shaped target instances.
///
/// `αᵢ` is the mean cosine similarity (on flattened features) between
/// instance `i` and every other instance.
pub fn icc_center(targets: &[&Tensor], mode: CenterMode) -> Result<CalibratedCenter> {
    let n = targets.len();
    if n < 2 {
        return Err(Error::Degenerate(format!("center calibration needs at least 2 instances, got {n}")));
    }
    let shape = targets[0].shape();
    if let Some(t) = targets.iter().find(|t| t.shape() != shape) {
        return shape_err(format!("target instances have shapes {shape:?} and {:?}", t.shape()));
    }
    if targets.iter().any(|t| t.data().iter().all(|&x| x == 0.0)) {
        return Err(Error::Degenerate("all-zero target instance".into()));
    }

    // Work in a canonical order so the result does not depend on input order.
    let mut order: Vec<usize> = (0..n).collect();
    if mode != CenterMode::Literal {
        order.sort_by(|&a, &b| lexicographic(targets[a].data(), targets[b].data()));
    }
    let inst: Vec<&[f64]> = order.iter().map(|&i| targets[i].data()).collect();

    let mut sims = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let c = cosine(inst[i], inst[j])?;
            sims[i * n + j] = c;
            sims[j * n + i] = c;
        }
    }
    let alpha: Vec<f64> = match mode {
        CenterMode::Mean => vec![1.0; n],
        _ => {
            (0..n).map(|i| (0..n).filter(|&j| j != i).map(|j| sims[i * n + j]).sum::<f64>() / (n - 1) as f64).collect()
        }
    };

    let len = inst[0].len();
    let weighted = |used: usize, coef: &dyn Fn(usize) -> f64| -> Vec<f64> {
        let mut acc = vec![0.0; len];
        for (i, f) in inst.iter().enumerate().take(used) {
            let w = coef(i);
            acc.iter_mut().zip(*f).for_each(|(a, &x)| *a += w * x);
        }
        acc
    };
    let mean = || weighted(n, &|_| 1.0 / n as f64);
    let center = match mode {
        CenterMode::Mean => mean(),
        CenterMode::Calibrated => {
            let total: f64 = alpha.iter().sum();
            if total <= MIN_WEIGHT_SUM {
                log::warn!("calibration weights sum to {total:e}; using the plain mean");
                mean()
            } else {
                weighted(n, &|i| alpha[i] / total)
            }
        }
        CenterMode::Literal => weighted(n - 1, &|i| alpha[i] / (n - 1) as f64),
    };

    let mut weights = vec![0.0; n];
    for (k, &i) in order.iter().enumerate() {
        weights[i] = alpha[k];
    }
    Ok(CalibratedCenter { center: Tensor::new(shape.to_vec(), center)?, weights })
}

/// Cross-attention: query from the center, key, value and residual from the
/// source sample.
pub fn dme_forward(tape: &mut Tape, source: Var, center: Var, p: &Bound) -> Result<Var> {
    attention_block(tape, center, source, p)
}

/// A source sample re-encoded against the target center. Keeps the source
/// label.
#[derive(Debug, Clone, PartialEq)]
pub struct MixedFeature {
    pub frames: Tensor,
    pub label: Option<usize>,
}

pub fn mix(
    source: &Tensor,
    label: Option<usize>,
    center: &CalibratedCenter,
    p: &EncoderParams,
) -> Result<MixedFeature> {
    let mut tape = Tape::new();
    let b = p.bind(&mut tape);
    let s = tape.leaf(source);
    let c = tape.leaf(&center.center);
    let out = dme_forward(&mut tape, s, c, &b)?;
    Ok(MixedFeature { frames: tape.to_tensor(out), label })
}
