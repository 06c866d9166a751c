//! N-way K-shot episode sampling.
//!
//! `P` is the total number of queries per episode. Each of the `N` classes
//! gets `⌊P/N⌋` queries and the `P mod N` leftovers go to randomly chosen
//! distinct classes.

use rand::seq::index::sample as sample_indices;
use rand::Rng;

use super::{Dataset, UnlabeledVideo, VideoFeature};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EpisodeShape {
    /// Classes per episode.
    pub n_way: usize,
    /// Support shots per class.
    pub k_shot: usize,
    /// Total queries per episode.
    pub queries: usize,
    /// Unlabeled target samples per training episode.
    pub unlabeled: usize,
}

impl EpisodeShape {
    pub fn validate(&self) -> Result<()> {
        if self.n_way == 0 || self.k_shot == 0 || self.queries == 0 {
            return Err(Error::Sampling(format!("episode shape must be positive: {self:?}")));
        }
        Ok(())
    }

    /// Most queries any single class can receive.
    pub fn max_queries_per_class(&self) -> usize {
        self.queries.div_ceil(self.n_way)
    }

    fn query_counts(&self, rng: &mut impl Rng) -> Vec<usize> {
        let base = self.queries / self.n_way;
        let mut counts = vec![base; self.n_way];
        for i in sample_indices(rng, self.n_way, self.queries % self.n_way) {
            counts[i] += 1;
        }
        counts
    }
}

/// A labeled member of an episode with its episode-local class.
#[derive(Debug, Clone, Copy)]
pub struct LabeledSample<'a> {
    pub video: &'a VideoFeature,
    pub local_label: usize,
}

/// One training task. `support` is ordered class-major, `K` shots per class.
#[derive(Debug, Clone)]
pub struct Episode<'a> {
    /// Dataset category of each episode-local class.
    pub classes: Vec<usize>,
    pub support: Vec<LabeledSample<'a>>,
    pub query: Vec<LabeledSample<'a>>,
    pub unlabeled_target: Vec<&'a UnlabeledVideo>,
}

/// One evaluation task: support from the labeled pool, queries from the
/// query pool, no unlabeled samples.
pub type EvalEpisode<'a> = Episode<'a>;

fn pick_classes(eligible: &[usize], shape: &EpisodeShape, rng: &mut impl Rng) -> Result<Vec<usize>> {
    if eligible.len() < shape.n_way {
        return Err(Error::Sampling(format!("{} eligible categories, episode needs {}", eligible.len(), shape.n_way)));
    }
    Ok(sample_indices(rng, eligible.len(), shape.n_way).into_iter().map(|i| eligible[i]).collect())
}

/// Reusable sampler over a source dataset and the unlabeled target pool.
pub struct EpisodeSampler<'a> {
    source: &'a Dataset,
    u_train: &'a [UnlabeledVideo],
    shape: EpisodeShape,
    by_class: Vec<Vec<usize>>,
    eligible: Vec<usize>,
}

impl<'a> EpisodeSampler<'a> {
    pub fn new(source: &'a Dataset, u_train: &'a [UnlabeledVideo], shape: EpisodeShape) -> Result<Self> {
        shape.validate()?;
        let by_class = source.class_index();
        let need = shape.k_shot + shape.max_queries_per_class();
        let eligible: Vec<usize> = (0..by_class.len()).filter(|&c| by_class[c].len() >= need).collect();
        if eligible.len() < shape.n_way {
            return Err(Error::Sampling(format!(
                "only {} categories have the {need} instances an episode needs; {} required",
                eligible.len(),
                shape.n_way
            )));
        }
        if u_train.len() < shape.unlabeled {
            return Err(Error::Sampling(format!(
                "unlabeled pool has {} videos, episode needs {}",
                u_train.len(),
                shape.unlabeled
            )));
        }
        Ok(Self { source, u_train, shape, by_class, eligible })
    }

    pub fn eligible_classes(&self) -> &[usize] {
        &self.eligible
    }

    pub fn sample(&self, rng: &mut impl Rng) -> Result<Episode<'a>> {
        let classes = pick_classes(&self.eligible, &self.shape, rng)?;
        let counts = self.shape.query_counts(rng);
        let k = self.shape.k_shot;
        let mut support = Vec::with_capacity(self.shape.n_way * k);
        let mut query = Vec::with_capacity(self.shape.queries);
        for (local, (&c, &q)) in classes.iter().zip(&counts).enumerate() {
            let members = &self.by_class[c];
            let picked = sample_indices(rng, members.len(), k + q).into_vec();
            for (j, &i) in picked.iter().enumerate() {
                let s = LabeledSample { video: &self.source.videos[members[i]], local_label: local };
                if j < k {
                    support.push(s);
                } else {
                    query.push(s);
                }
            }
        }
        let unlabeled_target = sample_indices(rng, self.u_train.len(), self.shape.unlabeled)
            .into_iter()
            .map(|i| &self.u_train[i])
            .collect();
        Ok(Episode { classes, support, query, unlabeled_target })
    }
}

pub fn sample_episode<'a>(
    source: &'a Dataset,
    u_train: &'a [UnlabeledVideo],
    shape: EpisodeShape,
    rng: &mut impl Rng,
) -> Result<Episode<'a>> {
    EpisodeSampler::new(source, u_train, shape)?.sample(rng)
}

/// Evaluation sampler: support from `lt`, queries from `ut`.
pub struct EvalSampler<'a> {
    lt: &'a Dataset,
    ut: &'a Dataset,
    shape: EpisodeShape,
    lt_by_class: Vec<Vec<usize>>,
    ut_by_class: Vec<Vec<usize>>,
    eligible: Vec<usize>,
}

impl<'a> EvalSampler<'a> {
    pub fn new(lt: &'a Dataset, ut: &'a Dataset, shape: EpisodeShape) -> Result<Self> {
        shape.validate()?;
        let lt_by_class = lt.class_index();
        let ut_by_class = ut.class_index();
        let need_q = shape.max_queries_per_class();
        let eligible: Vec<usize> = (0..lt_by_class.len().min(ut_by_class.len()))
            .filter(|&c| lt_by_class[c].len() >= shape.k_shot && ut_by_class[c].len() >= need_q)
            .collect();
        if eligible.len() < shape.n_way {
            return Err(Error::Sampling(format!(
                "only {} target categories have {} labeled and {need_q} query instances; {} required",
                eligible.len(),
                shape.k_shot,
                shape.n_way
            )));
        }
        Ok(Self { lt, ut, shape, lt_by_class, ut_by_class, eligible })
    }

    pub fn sample(&self, rng: &mut impl Rng) -> Result<EvalEpisode<'a>> {
        let classes = pick_classes(&self.eligible, &self.shape, rng)?;
        let counts = self.shape.query_counts(rng);
        let mut support = Vec::with_capacity(self.shape.n_way * self.shape.k_shot);
        let mut query = Vec::with_capacity(self.shape.queries);
        for (local, (&c, &q)) in classes.iter().zip(&counts).enumerate() {
            let lt_members = &self.lt_by_class[c];
            for i in sample_indices(rng, lt_members.len(), self.shape.k_shot) {
                support.push(LabeledSample { video: &self.lt.videos[lt_members[i]], local_label: local });
            }
            let ut_members = &self.ut_by_class[c];
            for i in sample_indices(rng, ut_members.len(), q) {
                query.push(LabeledSample { video: &self.ut.videos[ut_members[i]], local_label: local });
            }
        }
        Ok(Episode { classes, support, query, unlabeled_target: Vec::new() })
    }
}

pub fn sample_eval_episode<'a>(
    lt: &'a Dataset,
    ut: &'a Dataset,
    shape: EpisodeShape,
    rng: &mut impl Rng,
) -> Result<EvalEpisode<'a>> {
    EvalSampler::new(lt, ut, shape)?.sample(rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Domain;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::collections::HashSet;

    fn dataset(classes: usize, per_class: usize) -> Dataset {
        let mut videos = Vec::new();
        for c in 0..classes {
            for i in 0..per_class {
                let id = (c * per_class + i) as u32;
                videos.push(
                    VideoFeature::new(id, Domain::Source, Some(c), Tensor::matrix(2, 1, vec![id as f64, 0.0]).unwrap())
                        .unwrap(),
                );
            }
        }
        Dataset::from_videos(videos).unwrap()
    }

    fn pool(n: usize) -> Vec<UnlabeledVideo> {
        (0..n).map(|i| UnlabeledVideo { id: 1000 + i as u32, frames: Tensor::zeros(&[2, 1]) }).collect()
    }

    #[test]
    fn five_way_one_shot_sizes() {
        let src = dataset(10, 6);
        let u = pool(20);
        let shape = EpisodeShape { n_way: 5, k_shot: 1, queries: 5, unlabeled: 5 };
        let ep = sample_episode(&src, &u, shape, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!((ep.support.len(), ep.query.len(), ep.unlabeled_target.len()), (5, 5, 5));

        let sup_ids: HashSet<u32> = ep.support.iter().map(|s| s.video.id).collect();
        for q in &ep.query {
            assert!(!sup_ids.contains(&q.video.id));
            assert_eq!(q.video.label, Some(ep.classes[q.local_label]));
        }
        let locals: HashSet<usize> = ep.support.iter().map(|s| s.local_label).collect();
        assert_eq!(locals, (0..5).collect());
    }

    #[test]
    fn two_way_on_two_classes() {
        let src = dataset(2, 3);
        let u = pool(2);
        let shape = EpisodeShape { n_way: 2, k_shot: 1, queries: 2, unlabeled: 2 };
        let ep = sample_episode(&src, &u, shape, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let mut seen: Vec<usize> = ep.support.iter().map(|s| s.video.label.unwrap()).collect();
        seen.sort();
        assert_eq!(seen, vec![0, 1]);
    }

    #[test]
    fn uneven_query_distribution() {
        let src = dataset(6, 5);
        let u = pool(3);
        let shape = EpisodeShape { n_way: 3, k_shot: 2, queries: 4, unlabeled: 0 };
        let s = EpisodeSampler::new(&src, &u, shape).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..50 {
            let ep = s.sample(&mut rng).unwrap();
            assert_eq!(ep.query.len(), 4);
            let mut per = [0usize; 3];
            ep.query.iter().for_each(|q| per[q.local_label] += 1);
            assert!(per.iter().all(|&c| c == 1 || c == 2));
        }
    }

    #[test]
    fn infeasible_requests() {
        let src = dataset(3, 2);
        let u = pool(1);
        let five = EpisodeShape { n_way: 5, k_shot: 1, queries: 5, unlabeled: 1 };
        assert!(matches!(sample_episode(&src, &u, five, &mut ChaCha8Rng::seed_from_u64(0)), Err(Error::Sampling(_))));
        let many_unl = EpisodeShape { n_way: 2, k_shot: 1, queries: 2, unlabeled: 3 };
        assert!(sample_episode(&src, &u, many_unl, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }

    #[test]
    fn eval_episode_pools() {
        let lt = dataset(6, 2);
        let mut ut = dataset(6, 4);
        for v in &mut ut.videos {
            v.id += 500;
        }
        let shape = EpisodeShape { n_way: 5, k_shot: 1, queries: 5, unlabeled: 5 };
        let ep = sample_eval_episode(&lt, &ut, shape, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        assert!(ep.unlabeled_target.is_empty());
        assert!(ep.support.iter().all(|s| s.video.id < 500));
        assert!(ep.query.iter().all(|s| s.video.id >= 500));
    }
}
