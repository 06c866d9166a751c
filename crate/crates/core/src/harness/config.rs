//! Run configuration read from `key=value` files.

use std::path::{Path, PathBuf};

use crate::data::{EpisodeShape, SplitFractions, SynthSpec};
use crate::error::{Error, Result};
use crate::heads::AlignConfig;
use crate::kvfile::KvFile;
use crate::mixer::CenterMode;

/// Where the two domains come from.
#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    /// Generated on the fly; `synth.<key>` entries in the config or a
    /// separate spec file via `synth_spec`.
    Synthetic(SynthSpec),
    /// Two feature files in the binary feature format.
    Files { source: PathBuf, target: PathBuf },
}

/// When the teacher takes its moving-average step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EmaCadence {
    OptimizerStep,
    Episode,
}

impl std::str::FromStr for EmaCadence {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "step" => Ok(Self::OptimizerStep),
            "episode" => Ok(Self::Episode),
            other => Err(format!("unknown cadence `{other}` (step|episode)")),
        }
    }
}

/// Loss weights of the two stage objectives.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub con: f64,
    pub meta: f64,
    pub sup: f64,
    pub distill_meta: f64,
    pub distill_sup: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { con: 1.0, meta: 1.0, sup: 1.0, distill_meta: 1.0, distill_sup: 1.0 }
    }
}

impl LossWeights {
    pub fn as_array(&self) -> [f64; 5] {
        [self.con, self.meta, self.sup, self.distill_meta, self.distill_sup]
    }
}

/// Switches for the ablation study.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ablation {
    /// Run the teacher branch (calibrated center, mixer, teacher outputs).
    pub use_mixed_branch: bool,
    pub use_cycle_pretrain: bool,
    pub use_cycle_meta: bool,
    /// Supervised-level distillation term.
    pub distill_supervised: bool,
    /// Meta-level distillation term.
    pub distill_meta: bool,
    /// Similarity-calibrated center; off uses the plain mean.
    pub use_icc: bool,
    pub center_mode: CenterMode,
    /// Also train the supervised head with cross-entropy on the mixed
    /// features (head only, the mixer stays gradient-free).
    pub mixed_ce: bool,
}

impl Default for Ablation {
    fn default() -> Self {
        Self {
            use_mixed_branch: true,
            use_cycle_pretrain: true,
            use_cycle_meta: true,
            distill_supervised: true,
            distill_meta: true,
            use_icc: true,
            center_mode: CenterMode::Calibrated,
            mixed_ce: false,
        }
    }
}

impl Ablation {
    /// Effective center aggregation.
    pub fn center(&self) -> CenterMode {
        if self.use_icc {
            self.center_mode
        } else {
            CenterMode::Mean
        }
    }

    /// The plain prototype baseline: no teacher branch and no reconstruction.
    pub fn baseline() -> Self {
        Self { use_mixed_branch: false, use_cycle_pretrain: false, use_cycle_meta: false, ..Self::default() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    pub n_way: usize,
    pub k_shot: usize,
    /// Total queries per episode.
    pub queries: usize,
    /// Unlabeled target samples per episode.
    pub unlabeled: usize,
    pub frames: usize,
    pub dim: usize,
    /// Feed-forward width, `2·dim` unless given.
    pub hidden: usize,
    /// Number of source categories; taken from the data when absent.
    pub source_classes: Option<usize>,
    pub gamma: f64,
    pub tau: f64,
    pub relaxed_boundary: bool,
    pub alphas: LossWeights,
    pub ema_alpha: f64,
    pub ema_cadence: EmaCadence,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub accum_steps: usize,
    pub pretrain_episodes: usize,
    pub metatrain_episodes: usize,
    pub eval_episodes: usize,
    pub seed: u64,
    pub data_seed: u64,
    pub split: SplitFractions,
    pub data: DataSource,
    pub ablation: Ablation,
    /// Records per metrics line; losses are averaged over the interval.
    pub log_every: usize,
    /// Include elapsed seconds in metrics records. Off makes the metrics
    /// stream reproducible byte for byte.
    pub wall_clock: bool,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            n_way: 5,
            k_shot: 1,
            queries: 5,
            unlabeled: 5,
            frames: 8,
            dim: 32,
            hidden: 64,
            source_classes: None,
            gamma: 0.1,
            tau: 1.0,
            relaxed_boundary: false,
            alphas: LossWeights::default(),
            ema_alpha: 0.999,
            ema_cadence: EmaCadence::OptimizerStep,
            lr: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            accum_steps: 16,
            pretrain_episodes: 500,
            metatrain_episodes: 2000,
            eval_episodes: 1000,
            seed: 0,
            data_seed: 0,
            split: SplitFractions::default(),
            data: DataSource::Synthetic(SynthSpec::default()),
            ablation: Ablation::default(),
            log_every: 1,
            wall_clock: true,
        }
    }
}

impl Config {
    pub fn episode_shape(&self) -> EpisodeShape {
        EpisodeShape { n_way: self.n_way, k_shot: self.k_shot, queries: self.queries, unlabeled: self.unlabeled }
    }

    pub fn align(&self) -> AlignConfig {
        AlignConfig { gamma: self.gamma, relaxed_boundary: self.relaxed_boundary }
    }

    /// Parses a config file; relative data paths resolve against `base`.
    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let mut kv = KvFile::parse(text)?;
        let mut c = Self::default();
        kv.take_into("n_way", &mut c.n_way)?;
        kv.take_into("k_shot", &mut c.k_shot)?;
        kv.take_into("queries", &mut c.queries)?;
        kv.take_into("unlabeled", &mut c.unlabeled)?;
        kv.take_into("frames", &mut c.frames)?;
        kv.take_into("dim", &mut c.dim)?;
        c.hidden = 2 * c.dim;
        kv.take_into("hidden", &mut c.hidden)?;
        c.source_classes = kv.take("source_classes")?;
        kv.take_into("gamma", &mut c.gamma)?;
        kv.take_into("tau", &mut c.tau)?;
        kv.take_into("relaxed_boundary", &mut c.relaxed_boundary)?;
        kv.take_into("alpha_con", &mut c.alphas.con)?;
        kv.take_into("alpha_meta", &mut c.alphas.meta)?;
        kv.take_into("alpha_super", &mut c.alphas.sup)?;
        kv.take_into("alpha_distill_meta", &mut c.alphas.distill_meta)?;
        kv.take_into("alpha_distill_super", &mut c.alphas.distill_sup)?;
        kv.take_into("ema_alpha", &mut c.ema_alpha)?;
        kv.take_into("ema_cadence", &mut c.ema_cadence)?;
        kv.take_into("lr", &mut c.lr)?;
        kv.take_into("beta1", &mut c.beta1)?;
        kv.take_into("beta2", &mut c.beta2)?;
        kv.take_into("eps", &mut c.eps)?;
        kv.take_into("accum_steps", &mut c.accum_steps)?;
        kv.take_into("pretrain_episodes", &mut c.pretrain_episodes)?;
        kv.take_into("metatrain_episodes", &mut c.metatrain_episodes)?;
        kv.take_into("eval_episodes", &mut c.eval_episodes)?;
        kv.take_into("seed", &mut c.seed)?;
        c.data_seed = c.seed;
        kv.take_into("data_seed", &mut c.data_seed)?;
        kv.take_into("split_u_train", &mut c.split.u_train)?;
        kv.take_into("split_lt", &mut c.split.lt)?;
        kv.take_into("split_ut", &mut c.split.ut)?;
        kv.take_into("log_every", &mut c.log_every)?;
        kv.take_into("wall_clock", &mut c.wall_clock)?;

        let a = &mut c.ablation;
        kv.take_into("use_mixed_branch", &mut a.use_mixed_branch)?;
        kv.take_into("use_cycle_pretrain", &mut a.use_cycle_pretrain)?;
        kv.take_into("use_cycle_meta", &mut a.use_cycle_meta)?;
        kv.take_into("distill_supervised", &mut a.distill_supervised)?;
        kv.take_into("distill_meta", &mut a.distill_meta)?;
        kv.take_into("use_icc", &mut a.use_icc)?;
        kv.take_into("center_mode", &mut a.center_mode)?;
        kv.take_into("mixed_ce", &mut a.mixed_ce)?;

        let source: Option<String> = kv.take("source_features")?;
        let target: Option<String> = kv.take("target_features")?;
        let spec_file: Option<String> = kv.take("synth_spec")?;
        let inline = kv.take_prefixed("synth.");
        c.data = match (source, target, spec_file) {
            (Some(s), Some(t), None) if inline.is_empty() => {
                DataSource::Files { source: base.join(s), target: base.join(t) }
            }
            (None, None, spec_file) => {
                let mut text = match &spec_file {
                    Some(p) => std::fs::read_to_string(base.join(p))?,
                    None => String::new(),
                };
                for (k, v) in &inline {
                    text.push_str(&format!("\n{k}={v}"));
                }
                if spec_file.is_none() && !inline.iter().any(|(k, _)| k == "frames") {
                    text.push_str(&format!("\nframes={}", c.frames));
                }
                if spec_file.is_none() && !inline.iter().any(|(k, _)| k == "dim") {
                    text.push_str(&format!("\ndim={}", c.dim));
                }
                DataSource::Synthetic(SynthSpec::parse(&text)?)
            }
            _ => {
                return Err(Error::Config(
                    "give either source_features and target_features, or synthetic settings".into(),
                ))
            }
        };
        kv.finish()?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text, path.parent().unwrap_or(Path::new(".")))
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_way", self.n_way),
            ("k_shot", self.k_shot),
            ("queries", self.queries),
            ("unlabeled", self.unlabeled),
            ("dim", self.dim),
            ("hidden", self.hidden),
            ("accum_steps", self.accum_steps),
            ("eval_episodes", self.eval_episodes),
            ("log_every", self.log_every),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.frames < 2 {
            return Err(Error::Config("frames must be at least 2".into()));
        }
        if self.unlabeled < 2 && self.ablation.use_mixed_branch {
            return Err(Error::Config("the mixed branch needs at least 2 unlabeled samples".into()));
        }
        if self.source_classes == Some(0) {
            return Err(Error::Config("source_classes must be positive".into()));
        }
        if self.alphas.as_array().iter().any(|a| !(a.is_finite() && *a >= 0.0)) {
            return Err(Error::Config(format!("loss weights must be non-negative: {:?}", self.alphas)));
        }
        if !(0.0..=1.0).contains(&self.ema_alpha) {
            return Err(Error::Config(format!("ema_alpha must lie in [0, 1], got {}", self.ema_alpha)));
        }
        if !(self.gamma.is_finite() && self.gamma >= 0.0) {
            return Err(Error::Config(format!("gamma must be non-negative, got {}", self.gamma)));
        }
        if !(self.tau.is_finite() && self.tau > 0.0) {
            return Err(Error::Config(format!("tau must be positive, got {}", self.tau)));
        }
        if !(self.lr.is_finite() && self.lr > 0.0 && self.eps > 0.0) {
            return Err(Error::Config("lr and eps must be positive".into()));
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2)) {
            return Err(Error::Config("Adam betas must lie in [0, 1)".into()));
        }
        self.split.validate().map_err(|e| Error::Config(e.to_string()))?;
        if let DataSource::Synthetic(spec) = &self.data {
            if spec.frames != self.frames || spec.dim != self.dim {
                return Err(Error::Config(format!(
                    "synthetic data is {}×{}, config expects {}×{}",
                    spec.frames, spec.dim, self.frames, self.dim
                )));
            }
            if let Some(n) = self.source_classes {
                if n != spec.source_classes {
                    return Err(Error::Config(format!(
                        "source_classes={n} but the synthetic spec has {}",
                        spec.source_classes
                    )));
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults() {
        let c = Config::parse("", Path::new(".")).unwrap();
        assert_eq!((c.n_way, c.k_shot, c.queries, c.unlabeled, c.frames, c.dim, c.hidden), (5, 1, 5, 5, 8, 32, 64));
        assert_eq!((c.lr, c.accum_steps, c.gamma, c.tau, c.ema_alpha), (0.001, 16, 0.1, 1.0, 0.999));
        assert_eq!(c.alphas.as_array(), [1.0; 5]);
        assert_eq!(c.ablation, Ablation::default());
    }

    #[test]
    fn synthetic_keys_and_files() {
        let c = Config::parse("dim=16\nsynth.shift=0.0\nseed=4", Path::new(".")).unwrap();
        let DataSource::Synthetic(s) = &c.data else { panic!() };
        assert_eq!((s.dim, s.shift, c.data_seed), (16, 0.0, 4));

        let c = Config::parse("source_features=a.dmf\ntarget_features=b.dmf", Path::new("/x")).unwrap();
        assert_eq!(c.data, DataSource::Files { source: "/x/a.dmf".into(), target: "/x/b.dmf".into() });
    }

    #[test]
    fn rejects_bad_configs() {
        for bad in [
            "bogus=1",
            "n_way=0",
            "ema_alpha=1.5",
            "alpha_meta=-1",
            "tau=0",
            "synth.dim=8",
            "source_features=a.dmf",
            "source_features=a\ntarget_features=b\nsynth.shift=1",
            "center_mode=median",
            "use_icc=maybe",
            "unlabeled=1",
        ] {
            assert!(matches!(Config::parse(bad, Path::new(".")), Err(Error::Config(_)) | Err(Error::Spec(_))), "{bad}");
        }
    }
}
