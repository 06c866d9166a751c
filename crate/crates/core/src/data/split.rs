use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Dataset, VideoFeature};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A target video whose label has been removed. There is no way to recover
/// the label from this type.
#[derive(Debug, Clone, PartialEq)]
pub struct UnlabeledVideo {
    pub id: u32,
    pub frames: Tensor,
}

impl UnlabeledVideo {
    /// Always `None`: pool members carry no label.
    pub fn label(&self) -> Option<usize> {
        None
    }
}

/// Fractions of the target domain routed to the unlabeled training pool,
/// the labeled evaluation support pool and the evaluation query pool.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitFractions {
    pub u_train: f64,
    pub lt: f64,
    pub ut: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        Self { u_train: 0.5, lt: 0.25, ut: 0.25 }
    }
}

impl SplitFractions {
    pub fn validate(&self) -> Result<()> {
        let parts = [self.u_train, self.lt, self.ut];
        if parts.iter().any(|f| !(f.is_finite() && *f > 0.0)) {
            return Err(Error::Spec(format!("split fractions must be positive, got {parts:?}")));
        }
        if (parts.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Spec(format!("split fractions must sum to 1, got {parts:?}")));
        }
        Ok(())
    }
}

/// The target domain partitioned into three disjoint pools.
#[derive(Debug, Clone)]
pub struct TargetSplit {
    pub u_train: Vec<UnlabeledVideo>,
    pub lt: Dataset,
    pub ut: Dataset,
}

/// Shuffles the target videos and cuts them into the three pools.
pub fn split_target(target: &Dataset, fractions: SplitFractions, seed: u64) -> Result<TargetSplit> {
    fractions.validate()?;
    let n = target.len();
    let n_u = (fractions.u_train * n as f64).round() as usize;
    let n_lt = (fractions.lt * n as f64).round() as usize;
    if n_u == 0 || n_lt == 0 || n_u + n_lt >= n {
        return Err(Error::Spec(format!("fractions {fractions:?} leave an empty pool for {n} target videos")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));

    let u_train = order[..n_u]
        .iter()
        .map(|&i| UnlabeledVideo { id: target.videos[i].id, frames: target.videos[i].frames.clone() })
        .collect();
    let pool = |idx: &[usize]| -> Result<Dataset> {
        let mut vids: Vec<VideoFeature> = idx.iter().map(|&i| target.videos[i].clone()).collect();
        vids.sort_by_key(|v| v.id);
        Dataset::new(vids, target.num_categories, target.category_names.clone())
    };
    Ok(TargetSplit { u_train, lt: pool(&order[n_u..n_u + n_lt])?, ut: pool(&order[n_u + n_lt..])? })
}
