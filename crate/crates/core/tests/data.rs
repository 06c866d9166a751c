//! Feature generation, feature files, target splits and episode sampling.

use std::collections::{HashMap, HashSet};

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use dmsd::data::{
    decode_features, encode_features, gen_synthetic, sample_episode, split_target, Dataset, Domain, EpisodeSampler,
    EpisodeShape, EvalSampler, SplitFractions, SynthSpec, VideoFeature,
};
use dmsd::tensor::{cosine, Tensor};
use dmsd::Error;

fn pooled(v: &VideoFeature) -> Vec<f64> {
    let (m, d) = v.frames.dims2().unwrap();
    (0..d).map(|j| (0..m).map(|i| v.frames.row(i)[j]).sum::<f64>() / m as f64).collect()
}

fn centroid<'a>(xs: impl Iterator<Item = &'a Vec<f64>>) -> Vec<f64> {
    let mut sum: Vec<f64> = Vec::new();
    let mut n = 0.0;
    for x in xs {
        sum.resize(x.len(), 0.0);
        sum.iter_mut().zip(x).for_each(|(s, v)| *s += v);
        n += 1.0;
    }
    sum.iter().map(|s| s / n).collect()
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

#[test]
fn zero_shift_domains_share_feature_distribution() {
    let spec = SynthSpec { shift: 0.0, ..SynthSpec::default() };
    for seed in 0..3 {
        let (src, tgt) = gen_synthetic(&spec, seed).unwrap();
        let s: Vec<Vec<f64>> = src.videos.iter().map(pooled).collect();
        let t: Vec<Vec<f64>> = tgt.videos.iter().map(pooled).collect();
        let sim = cosine(&centroid(s.iter()), &centroid(t.iter())).unwrap();
        assert!(sim > 0.9, "seed {seed}: mean cosine {sim}");
    }
}

#[test]
fn large_shift_is_linearly_detectable() {
    for shift in [2.0, 3.0] {
        let spec = SynthSpec { shift, ..SynthSpec::default() };
        let (src, tgt) = gen_synthetic(&spec, 7).unwrap();
        let s: Vec<Vec<f64>> = src.videos.iter().map(pooled).collect();
        let t: Vec<Vec<f64>> = tgt.videos.iter().map(pooled).collect();
        // Fit centroids on even indices, classify odd ones.
        let cs = centroid(s.iter().step_by(2));
        let ct = centroid(t.iter().step_by(2));
        let held: Vec<(&Vec<f64>, bool)> = s
            .iter()
            .skip(1)
            .step_by(2)
            .map(|x| (x, false))
            .chain(t.iter().skip(1).step_by(2).map(|x| (x, true)))
            .collect();
        let correct = held.iter().filter(|(x, is_t)| (sq_dist(x, &ct) < sq_dist(x, &cs)) == *is_t).count();
        let acc = correct as f64 / held.len() as f64;
        assert!(acc > 0.95, "shift {shift}: domain classifier accuracy {acc}");
    }
}

#[test]
fn generator_is_seeded() {
    let spec = SynthSpec {
        source_classes: 6,
        source_per_class: 4,
        target_classes: 5,
        target_per_class: 6,
        ..SynthSpec::default()
    };
    let a = gen_synthetic(&spec, 3).unwrap();
    let b = gen_synthetic(&spec, 3).unwrap();
    let c = gen_synthetic(&spec, 4).unwrap();
    assert_eq!(a, b);
    assert_ne!(a.0, c.0);
    assert!(a.0.videos.iter().all(|v| v.domain == Domain::Source && v.label.is_some()));
    assert!(a.1.videos.iter().all(|v| v.domain == Domain::Target && v.label.is_some()));
}

fn arb_dataset() -> impl Strategy<Value = Dataset> {
    (1usize..5, 2usize..6, 1usize..4, 1usize..8).prop_flat_map(|(classes, m, d, n)| {
        prop::collection::vec((0..classes, prop::collection::vec(-1e6f32..1e6f32, m * d), any::<bool>()), n).prop_map(
            move |rows| {
                let videos = rows
                    .into_iter()
                    .enumerate()
                    .map(|(i, (label, values, target))| {
                        // Target videos may come without labels.
                        let (domain, label) = if target && label == 0 {
                            (Domain::Target, None)
                        } else if target {
                            (Domain::Target, Some(label))
                        } else {
                            (Domain::Source, Some(label))
                        };
                        let frames = Tensor::matrix(m, d, values.into_iter().map(f64::from).collect()).unwrap();
                        VideoFeature::new(i as u32, domain, label, frames).unwrap()
                    })
                    .collect();
                let names = (0..classes).map(|c| format!("class_{c}")).collect();
                Dataset::new(videos, classes, names).unwrap()
            },
        )
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn feature_file_round_trips(ds in arb_dataset()) {
        let bytes = encode_features(&ds).unwrap();
        let back = decode_features(&bytes).unwrap();
        // The file stores videos only; category metadata is re-derived.
        prop_assert_eq!(&back.videos, &ds.videos);
        prop_assert_eq!(encode_features(&back).unwrap(), bytes);
    }

    #[test]
    fn truncated_feature_file_is_rejected(ds in arb_dataset(), cut in 1usize..64) {
        let bytes = encode_features(&ds).unwrap();
        let keep = bytes.len().saturating_sub(cut);
        let is_format_error = matches!(decode_features(&bytes[..keep]), Err(Error::Format { .. }));
        prop_assert!(is_format_error);
    }
}

fn small_target(seed: u64) -> Dataset {
    let spec = SynthSpec {
        source_classes: 2,
        source_per_class: 2,
        target_classes: 6,
        target_per_class: 12,
        ..SynthSpec::default()
    };
    gen_synthetic(&spec, seed).unwrap().1
}

#[test]
fn split_pools_are_disjoint_and_cover_target() {
    let target = small_target(1);
    for seed in 0..5 {
        let split = split_target(&target, SplitFractions::default(), seed).unwrap();
        let u: HashSet<u32> = split.u_train.iter().map(|v| v.id).collect();
        let lt: HashSet<u32> = split.lt.videos.iter().map(|v| v.id).collect();
        let ut: HashSet<u32> = split.ut.videos.iter().map(|v| v.id).collect();
        assert!(u.is_disjoint(&lt) && u.is_disjoint(&ut) && lt.is_disjoint(&ut));
        assert_eq!(u.len() + lt.len() + ut.len(), target.len());
        assert_eq!(u.len(), target.len() / 2);
        assert!(split.u_train.iter().all(|v| v.label().is_none()));
    }
    let a = split_target(&target, SplitFractions::default(), 9).unwrap();
    let b = split_target(&target, SplitFractions::default(), 9).unwrap();
    assert_eq!(a.u_train, b.u_train);
    assert_eq!(a.lt, b.lt);
    let bad = SplitFractions { u_train: 0.6, lt: 0.3, ut: 0.3 };
    assert!(matches!(split_target(&target, bad, 0), Err(Error::Spec(_))));
}

fn sampling_fixture() -> (Dataset, Dataset) {
    let spec = SynthSpec {
        source_classes: 10,
        source_per_class: 8,
        target_classes: 5,
        target_per_class: 8,
        ..SynthSpec::default()
    };
    gen_synthetic(&spec, 2).unwrap()
}

const SHAPE: EpisodeShape = EpisodeShape { n_way: 5, k_shot: 1, queries: 7, unlabeled: 4 };

#[test]
fn class_frequency_is_near_uniform() {
    let (src, tgt) = sampling_fixture();
    let split = split_target(&tgt, SplitFractions::default(), 0).unwrap();
    let sampler = EpisodeSampler::new(&src, &split.u_train, SHAPE).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut counts: HashMap<usize, usize> = HashMap::new();
    let episodes = 10_000;
    for _ in 0..episodes {
        for c in sampler.sample(&mut rng).unwrap().classes {
            *counts.entry(c).or_default() += 1;
        }
    }
    let expected = (episodes * SHAPE.n_way) as f64 / src.num_categories as f64;
    assert_eq!(counts.len(), src.num_categories);
    for (c, n) in counts {
        let rel = (n as f64 - expected).abs() / expected;
        assert!(rel < 0.2, "class {c}: {n} draws vs {expected} expected");
    }
}

#[test]
fn episodes_relabel_bijectively_and_reproduce() {
    let (src, tgt) = sampling_fixture();
    let split = split_target(&tgt, SplitFractions::default(), 0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..200 {
        let ep = sample_episode(&src, &split.u_train, SHAPE, &mut rng).unwrap();
        assert_eq!(ep.classes.iter().collect::<HashSet<_>>().len(), SHAPE.n_way);
        assert_eq!(ep.support.len(), SHAPE.n_way * SHAPE.k_shot);
        assert_eq!(ep.query.len(), SHAPE.queries);
        assert_eq!(ep.unlabeled_target.len(), SHAPE.unlabeled);
        for s in ep.support.iter().chain(&ep.query) {
            assert_eq!(ep.classes[s.local_label], s.video.label.unwrap());
        }
        let ids: HashSet<u32> = ep.support.iter().chain(&ep.query).map(|s| s.video.id).collect();
        assert_eq!(ids.len(), ep.support.len() + ep.query.len(), "support and query overlap");
        // Every class gets ⌊P/N⌋ or ⌈P/N⌉ queries.
        for local in 0..SHAPE.n_way {
            let q = ep.query.iter().filter(|s| s.local_label == local).count();
            assert!(q == 1 || q == 2);
        }
    }
    let ids = |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ep = sample_episode(&src, &split.u_train, SHAPE, &mut rng).unwrap();
        ep.support
            .iter()
            .chain(&ep.query)
            .map(|s| s.video.id)
            .chain(ep.unlabeled_target.iter().map(|u| u.id))
            .collect::<Vec<_>>()
    };
    assert_eq!(ids(3), ids(3));
    assert_ne!(ids(3), ids(4));
}

#[test]
fn infeasible_episodes_are_rejected() {
    let (src, tgt) = sampling_fixture();
    let split = split_target(&tgt, SplitFractions::default(), 0).unwrap();
    let too_wide = EpisodeShape { n_way: 11, ..SHAPE };
    assert!(matches!(EpisodeSampler::new(&src, &split.u_train, too_wide), Err(Error::Sampling(_))));
    let too_deep = EpisodeShape { k_shot: 8, ..SHAPE };
    assert!(matches!(EpisodeSampler::new(&src, &split.u_train, too_deep), Err(Error::Sampling(_))));
    let too_many_unlabeled = EpisodeShape { unlabeled: split.u_train.len() + 1, ..SHAPE };
    assert!(matches!(EpisodeSampler::new(&src, &split.u_train, too_many_unlabeled), Err(Error::Sampling(_))));
}

#[test]
fn eval_episodes_draw_support_and_queries_from_their_pools() {
    let target = small_target(4);
    let split = split_target(&target, SplitFractions::default(), 0).unwrap();
    let shape = EpisodeShape { n_way: 5, k_shot: 1, queries: 5, unlabeled: 0 };
    let sampler = EvalSampler::new(&split.lt, &split.ut, shape).unwrap();
    let lt: HashSet<u32> = split.lt.videos.iter().map(|v| v.id).collect();
    let ut: HashSet<u32> = split.ut.videos.iter().map(|v| v.id).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for _ in 0..100 {
        let ep = sampler.sample(&mut rng).unwrap();
        assert!(ep.support.iter().all(|s| lt.contains(&s.video.id)));
        assert!(ep.query.iter().all(|s| ut.contains(&s.video.id)));
        assert!(ep.unlabeled_target.is_empty());
    }
}
