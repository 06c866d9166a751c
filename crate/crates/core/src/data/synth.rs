//! Synthetic frame-feature domains with a controllable shift.
//!
//! Every frame is `mean + class prototype + t·class drift + noise`, with
//! `t ∈ [-½, ½]` following a per-video random time warp. Classes come in
//! pairs that share a prototype and move along opposite drifts, so their
//! temporally pooled features coincide and only frame order separates them.
//!
//! The target domain draws an independent class family from the same
//! process and maps every frame through `x ↦ A·x + b` with
//! `A = diag(scale)·rotation`. Rotation angles, log-scales and the offset
//! all grow linearly with `shift`; `shift = 0` gives `A = I, b = 0`.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{Dataset, Domain, VideoFeature};
use crate::error::{Error, Result};
use crate::kvfile::KvFile;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub source_classes: usize,
    pub target_classes: usize,
    pub source_per_class: usize,
    pub target_per_class: usize,
    pub frames: usize,
    pub dim: usize,
    /// Per-coordinate Gaussian noise σ.
    pub noise: f64,
    /// σ of class prototype coordinates.
    pub class_scale: f64,
    /// σ of class drift coordinates.
    pub drift_scale: f64,
    /// Level of the shared positive mean every feature sits on.
    pub mean_level: f64,
    /// Spread of the per-video time-warp exponent (0 = no warp).
    pub warp: f64,
    pub shift: f64,
    /// Rotation angle per unit shift, radians.
    pub rotation: f64,
    /// σ of per-dimension log-scale per unit shift.
    pub scale_jitter: f64,
    /// σ of offset coordinates per unit shift.
    pub offset: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            source_classes: 32,
            target_classes: 10,
            source_per_class: 24,
            target_per_class: 40,
            frames: 8,
            dim: 32,
            noise: 1.0,
            class_scale: 0.5,
            drift_scale: 1.0,
            mean_level: 1.0,
            warp: 0.4,
            shift: 1.0,
            rotation: 0.6,
            scale_jitter: 0.3,
            offset: 0.5,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("source_classes", self.source_classes),
            ("target_classes", self.target_classes),
            ("source_per_class", self.source_per_class),
            ("target_per_class", self.target_per_class),
            ("dim", self.dim),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::Spec(format!("{name} must be positive")));
            }
        }
        if self.frames < 2 {
            return Err(Error::Spec("frames must be at least 2".into()));
        }
        let reals = [
            ("noise", self.noise),
            ("class_scale", self.class_scale),
            ("drift_scale", self.drift_scale),
            ("mean_level", self.mean_level),
            ("warp", self.warp),
            ("shift", self.shift),
            ("rotation", self.rotation),
            ("scale_jitter", self.scale_jitter),
            ("offset", self.offset),
        ];
        for (name, v) in reals {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Spec(format!("{name} must be finite and non-negative, got {v}")));
            }
        }
        Ok(())
    }

    /// Fails unless both domains hold at least `min_per_class` videos per class.
    pub fn check_feasible(&self, min_per_class: usize) -> Result<()> {
        if self.source_per_class < min_per_class || self.target_per_class < min_per_class {
            return Err(Error::Spec(format!(
                "episodes need {min_per_class} instances per class, spec provides {}/{}",
                self.source_per_class, self.target_per_class
            )));
        }
        Ok(())
    }

    pub fn from_kv(kv: &mut KvFile) -> Result<Self> {
        let mut s = Self::default();
        kv.take_into("source_classes", &mut s.source_classes)?;
        kv.take_into("target_classes", &mut s.target_classes)?;
        kv.take_into("source_per_class", &mut s.source_per_class)?;
        kv.take_into("target_per_class", &mut s.target_per_class)?;
        kv.take_into("frames", &mut s.frames)?;
        kv.take_into("dim", &mut s.dim)?;
        kv.take_into("noise", &mut s.noise)?;
        kv.take_into("class_scale", &mut s.class_scale)?;
        kv.take_into("drift_scale", &mut s.drift_scale)?;
        kv.take_into("mean_level", &mut s.mean_level)?;
        kv.take_into("warp", &mut s.warp)?;
        kv.take_into("shift", &mut s.shift)?;
        kv.take_into("rotation", &mut s.rotation)?;
        kv.take_into("scale_jitter", &mut s.scale_jitter)?;
        kv.take_into("offset", &mut s.offset)?;
        s.validate()?;
        Ok(s)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut kv = KvFile::parse(text)?;
        let s = Self::from_kv(&mut kv)?;
        kv.finish()?;
        Ok(s)
    }

    pub fn to_kv_string(&self) -> String {
        format!(
            "source_classes={}\ntarget_classes={}\nsource_per_class={}\ntarget_per_class={}\nframes={}\ndim={}\n\
             noise={}\nclass_scale={}\ndrift_scale={}\nmean_level={}\nwarp={}\nshift={}\nrotation={}\n\
             scale_jitter={}\noffset={}\n",
            self.source_classes,
            self.target_classes,
            self.source_per_class,
            self.target_per_class,
            self.frames,
            self.dim,
            self.noise,
            self.class_scale,
            self.drift_scale,
            self.mean_level,
            self.warp,
            self.shift,
            self.rotation,
            self.scale_jitter,
            self.offset
        )
    }
}

struct ClassFamily {
    protos: Vec<Vec<f64>>,
    drifts: Vec<Vec<f64>>,
}

fn gaussian(n: usize, sigma: f64, rng: &mut impl Rng) -> Vec<f64> {
    (0..n).map(|_| sigma * rng.sample::<f64, _>(StandardNormal)).collect()
}

impl ClassFamily {
    fn draw(classes: usize, spec: &SynthSpec, rng: &mut impl Rng) -> Self {
        let mut protos: Vec<Vec<f64>> = Vec::with_capacity(classes);
        let mut drifts: Vec<Vec<f64>> = Vec::with_capacity(classes);
        for c in 0..classes {
            if c % 2 == 1 {
                let proto = protos[c - 1].clone();
                let drift: Vec<f64> = drifts[c - 1].iter().map(|x: &f64| -x).collect();
                protos.push(proto);
                drifts.push(drift);
            } else {
                protos.push(gaussian(spec.dim, spec.class_scale, rng));
                drifts.push(gaussian(spec.dim, spec.drift_scale, rng));
            }
        }
        Self { protos, drifts }
    }
}

/// Frame-wise affine map `x ↦ diag(scale)·R·x + offset`, with `R` a product
/// of Givens rotations on a random pairing of coordinates.
struct ShiftMap {
    pairs: Vec<(usize, usize, f64)>,
    scale: Vec<f64>,
    offset: Vec<f64>,
}

impl ShiftMap {
    fn draw(spec: &SynthSpec, rng: &mut impl Rng) -> Self {
        let mut order: Vec<usize> = (0..spec.dim).collect();
        order.shuffle(rng);
        let pairs = order
            .chunks_exact(2)
            .map(|p| (p[0], p[1], spec.shift * spec.rotation * rng.random_range(0.5..1.5)))
            .collect();
        let scale = gaussian(spec.dim, spec.shift * spec.scale_jitter, rng).into_iter().map(f64::exp).collect();
        let offset = gaussian(spec.dim, spec.shift * spec.offset, rng);
        Self { pairs, scale, offset }
    }

    fn apply(&self, x: &mut [f64]) {
        for &(i, j, theta) in &self.pairs {
            let (c, s) = (theta.cos(), theta.sin());
            let (a, b) = (x[i], x[j]);
            x[i] = c * a - s * b;
            x[j] = s * a + c * b;
        }
        for ((v, s), o) in x.iter_mut().zip(&self.scale).zip(&self.offset) {
            *v = *v * s + o;
        }
    }
}

fn video(
    family: &ClassFamily,
    class: usize,
    mean: &[f64],
    spec: &SynthSpec,
    map: Option<&ShiftMap>,
    rng: &mut impl Rng,
) -> Tensor {
    let (m, d) = (spec.frames, spec.dim);
    let exponent = (spec.warp * rng.sample::<f64, _>(StandardNormal)).exp();
    let mut data = Vec::with_capacity(m * d);
    for f in 0..m {
        let t = (f as f64 / (m - 1) as f64).powf(exponent) - 0.5;
        let mut frame: Vec<f64> = (0..d)
            .map(|k| {
                let eps: f64 = rng.sample(StandardNormal);
                mean[k] + family.protos[class][k] + t * family.drifts[class][k] + spec.noise * eps
            })
            .collect();
        if let Some(map) = map {
            map.apply(&mut frame);
        }
        // Values are kept f32-representable so feature files round-trip exactly.
        data.extend(frame.into_iter().map(|v| v as f32 as f64));
    }
    Tensor::matrix(m, d, data).expect("generated shape")
}

/// Generates a labeled source domain and a labeled target domain with
/// disjoint class families.
pub fn gen_synthetic(spec: &SynthSpec, seed: u64) -> Result<(Dataset, Dataset)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mean: Vec<f64> = (0..spec.dim).map(|_| spec.mean_level * rng.random_range(0.5..1.5)).collect();
    let source_family = ClassFamily::draw(spec.source_classes, spec, &mut rng);
    let target_family = ClassFamily::draw(spec.target_classes, spec, &mut rng);
    let map = ShiftMap::draw(spec, &mut rng);

    let mut next_id = 0u32;
    let mut build = |family: &ClassFamily,
                     classes: usize,
                     per_class: usize,
                     domain: Domain,
                     map: Option<&ShiftMap>,
                     rng: &mut ChaCha8Rng|
     -> Result<Vec<VideoFeature>> {
        let mut out = Vec::with_capacity(classes * per_class);
        for c in 0..classes {
            for _ in 0..per_class {
                let frames = video(family, c, &mean, spec, map, rng);
                out.push(VideoFeature::new(next_id, domain, Some(c), frames)?);
                next_id += 1;
            }
        }
        Ok(out)
    };
    let src = build(&source_family, spec.source_classes, spec.source_per_class, Domain::Source, None, &mut rng)?;
    let tgt = build(&target_family, spec.target_classes, spec.target_per_class, Domain::Target, Some(&map), &mut rng)?;

    let source =
        Dataset::new(src, spec.source_classes, (0..spec.source_classes).map(|c| format!("source_{c}")).collect())?;
    let target =
        Dataset::new(tgt, spec.target_classes, (0..spec.target_classes).map(|c| format!("target_{c}")).collect())?;
    Ok((source, target))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::cosine;

    fn small(shift: f64) -> SynthSpec {
        SynthSpec {
            source_classes: 8,
            target_classes: 6,
            source_per_class: 10,
            target_per_class: 10,
            shift,
            ..SynthSpec::default()
        }
    }

    #[test]
    fn deterministic() {
        let a = gen_synthetic(&small(1.0), 5).unwrap();
        let b = gen_synthetic(&small(1.0), 5).unwrap();
        assert_eq!(a, b);
        let c = gen_synthetic(&small(1.0), 6).unwrap();
        assert_ne!(a.0, c.0);
    }

    #[test]
    fn zero_shift_is_identity_map() {
        let spec = small(0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let map = ShiftMap::draw(&spec, &mut rng);
        let mut x: Vec<f64> = (0..spec.dim).map(|i| i as f64 - 3.0).collect();
        let orig = x.clone();
        map.apply(&mut x);
        assert_eq!(x, orig);
    }

    #[test]
    fn paired_classes_share_pooled_mean() {
        let spec = SynthSpec { noise: 0.0, warp: 0.0, ..small(0.0) };
        let (src, _) = gen_synthetic(&spec, 1).unwrap();
        let pooled = |v: &VideoFeature| -> Vec<f64> {
            let (m, d) = v.frames.dims2().unwrap();
            (0..d).map(|k| (0..m).map(|f| v.frames.data()[f * d + k]).sum::<f64>() / m as f64).collect()
        };
        let a = pooled(&src.videos[0]);
        let b = pooled(&src.videos[spec.source_per_class]);
        assert_eq!(src.videos[spec.source_per_class].label, Some(1));
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-5);
        }
        assert!(cosine(src.videos[0].frames.row(0), src.videos[spec.source_per_class].frames.row(0)).unwrap() < 0.999);
    }

    #[test]
    fn spec_parsing() {
        let s = SynthSpec::parse("shift=2.5\ndim=16\n").unwrap();
        assert_eq!(s.shift, 2.5);
        assert_eq!(s.dim, 16);
        assert_eq!(SynthSpec::parse(&s.to_kv_string()).unwrap(), s);
        assert!(SynthSpec::parse("bogus=1").is_err());
        assert!(SynthSpec::parse("frames=1").is_err());
        assert!(SynthSpec::parse("shift=-1").is_err());
        assert!(small(1.0).check_feasible(11).is_err());
    }
}
