//! Frame-feature datasets, target-domain splits and episode sampling.

mod dmf;
mod episode;
mod split;
mod synth;

pub use dmf::{decode_features, encode_features, load_features, save_features, DMF_MAGIC, DMF_VERSION};
pub use episode::{
    sample_episode, sample_eval_episode, Episode, EpisodeSampler, EpisodeShape, EvalEpisode, EvalSampler, LabeledSample,
};
pub use split::{split_target, SplitFractions, TargetSplit, UnlabeledVideo};
pub use synth::{gen_synthetic, SynthSpec};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Domain {
    Source,
    Target,
}

impl Domain {
    pub fn code(self) -> u8 {
        match self {
            Domain::Source => 0,
            Domain::Target => 1,
        }
    }

    pub fn from_code(c: u8) -> Option<Self> {
        match c {
            0 => Some(Domain::Source),
            1 => Some(Domain::Target),
            _ => None,
        }
    }
}

/// One video as an `M × D` matrix of pooled frame features.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoFeature {
    pub id: u32,
    pub domain: Domain,
    pub label: Option<usize>,
    pub frames: Tensor,
}

impl VideoFeature {
    pub fn new(id: u32, domain: Domain, label: Option<usize>, frames: Tensor) -> Result<Self> {
        let v = Self { id, domain, label, frames };
        v.validate()?;
        Ok(v)
    }

    pub fn validate(&self) -> Result<()> {
        let (m, d) =
            self.frames.dims2().map_err(|_| Error::Data(format!("video {}: frames must be an M×D matrix", self.id)))?;
        if m < 2 || d < 1 {
            return Err(Error::Data(format!("video {}: need M ≥ 2 and D ≥ 1, got {m}×{d}", self.id)));
        }
        if !self.frames.is_finite() {
            return Err(Error::Data(format!("video {}: non-finite feature value", self.id)));
        }
        if self.domain == Domain::Source && self.label.is_none() {
            return Err(Error::Data(format!("video {}: source videos must be labeled", self.id)));
        }
        Ok(())
    }

    pub fn num_frames(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.frames.shape()[1]
    }
}

/// A collection of videos with a shared label space.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub videos: Vec<VideoFeature>,
    pub num_categories: usize,
    pub category_names: Vec<String>,
}

impl Dataset {
    pub fn new(videos: Vec<VideoFeature>, num_categories: usize, category_names: Vec<String>) -> Result<Self> {
        let ds = Self { videos, num_categories, category_names };
        ds.validate()?;
        Ok(ds)
    }

    /// Builds a dataset whose label space is `0..=max label`.
    pub fn from_videos(videos: Vec<VideoFeature>) -> Result<Self> {
        let num_categories = videos.iter().filter_map(|v| v.label).max().map_or(0, |m| m + 1);
        let names = (0..num_categories).map(|c| format!("class_{c}")).collect();
        Self::new(videos, num_categories, names)
    }

    pub fn validate(&self) -> Result<()> {
        if self.category_names.len() != self.num_categories {
            return Err(Error::Data(format!(
                "{} category names for {} categories",
                self.category_names.len(),
                self.num_categories
            )));
        }
        let mut seen = std::collections::HashSet::new();
        for v in &self.videos {
            v.validate()?;
            if let Some(l) = v.label {
                if l >= self.num_categories {
                    return Err(Error::Data(format!("video {}: label {l} outside [0, {})", v.id, self.num_categories)));
                }
            }
            if !seen.insert(v.id) {
                return Err(Error::Data(format!("duplicate video id {}", v.id)));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.videos.len()
    }

    pub fn is_empty(&self) -> bool {
        self.videos.is_empty()
    }

    /// Video indices per category.
    pub fn class_index(&self) -> Vec<Vec<usize>> {
        let mut idx = vec![Vec::new(); self.num_categories];
        for (i, v) in self.videos.iter().enumerate() {
            if let Some(l) = v.label {
                idx[l].push(i);
            }
        }
        idx
    }

    /// Checks that every labeled category holds at least `k + p` videos.
    pub fn check_feasible(&self, k: usize, p: usize) -> Result<()> {
        for (c, members) in self.class_index().iter().enumerate() {
            if !members.is_empty() && members.len() < k + p {
                return Err(Error::Spec(format!(
                    "category {c} has {} instances, episodes need {}",
                    members.len(),
                    k + p
                )));
            }
        }
        Ok(())
    }

    /// The common `(M, D)` shape of all videos, if uniform.
    pub fn uniform_shape(&self) -> Result<Option<(usize, usize)>> {
        let mut shape = None;
        for v in &self.videos {
            let s = (v.num_frames(), v.dim());
            match shape {
                None => shape = Some(s),
                Some(prev) if prev != s => {
                    return Err(Error::Data(format!(
                        "videos have differing shapes {prev:?} and {s:?}; a run needs uniform M and D"
                    )))
                }
                _ => {}
            }
        }
        Ok(shape)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn frames(m: usize, d: usize, v: f64) -> Tensor {
        Tensor::matrix(m, d, vec![v; m * d]).unwrap()
    }

    #[test]
    fn video_invariants() {
        assert!(VideoFeature::new(0, Domain::Source, Some(0), frames(2, 1, 1.0)).is_ok());
        assert!(VideoFeature::new(0, Domain::Source, None, frames(2, 1, 1.0)).is_err());
        assert!(VideoFeature::new(0, Domain::Target, None, frames(1, 3, 1.0)).is_err());
        assert!(VideoFeature::new(0, Domain::Target, None, frames(2, 3, f64::INFINITY)).is_err());
    }

    #[test]
    fn dataset_label_range() {
        let v = VideoFeature::new(0, Domain::Source, Some(3), frames(2, 2, 0.5)).unwrap();
        assert!(Dataset::new(vec![v.clone()], 3, vec!["a".into(), "b".into(), "c".into()]).is_err());
        let ds = Dataset::from_videos(vec![v]).unwrap();
        assert_eq!(ds.num_categories, 4);
        assert!(ds.check_feasible(1, 1).is_err());
        assert!(ds.check_feasible(1, 0).is_ok());
    }
}
