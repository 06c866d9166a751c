//! Two-stage training and evaluation loops.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::checkpoint::Checkpoint;
use super::config::{Ablation, Config, DataSource, EmaCadence, LossWeights};
use super::metrics::{IntervalMean, LossBreakdown, MetricsRecord, MetricsSink};
use super::optim::Adam;
use crate::codec::{cycle_loss, dtd_forward, dte_forward, EncoderParams};
use crate::data::{
    gen_synthetic, load_features, split_target, Dataset, Episode, EpisodeSampler, EvalSampler, TargetSplit,
};
use crate::error::{Error, Result};
use crate::heads::{
    cross_entropy, ema_update, kl_distill, meta_probs, prototypes, supervised_probs, total_loss_meta,
    total_loss_pretrain, AlignConfig, HeadParams, ProbDist,
};
use crate::mixer::{dme_forward, icc_center};
use crate::params::Bound;
use crate::tensor::{Tape, Tensor, Var};

const INIT_STREAM: u64 = 0;
const PRETRAIN_STREAM: u64 = 1;
const METATRAIN_STREAM: u64 = 2;
const EVAL_STREAM: u64 = 3;

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Source domain plus the three target pools.
#[derive(Debug, Clone)]
pub struct Domains {
    pub source: Dataset,
    pub target: TargetSplit,
}

impl Domains {
    /// Generates or loads both domains and splits the target.
    pub fn load(config: &Config) -> Result<Self> {
        let (source, target) = match &config.data {
            DataSource::Synthetic(spec) => gen_synthetic(spec, config.data_seed)?,
            DataSource::Files { source, target } => (load_features(source)?, load_features(target)?),
        };
        let target = split_target(&target, config.split, config.data_seed)?;
        let d = Self { source, target };
        d.check(config)?;
        Ok(d)
    }

    fn check(&self, config: &Config) -> Result<()> {
        for (name, ds) in [("source", &self.source), ("lt", &self.target.lt), ("ut", &self.target.ut)] {
            if let Some((m, d)) = ds.uniform_shape()? {
                if (m, d) != (config.frames, config.dim) {
                    return Err(Error::Data(format!(
                        "{name} features are {m}×{d}, config expects {}×{}",
                        config.frames, config.dim
                    )));
                }
            }
        }
        if let Some(n) = config.source_classes {
            if n != self.source.num_categories {
                return Err(Error::Data(format!(
                    "config says {n} source classes, data has {}",
                    self.source.num_categories
                )));
            }
        }
        Ok(())
    }
}

/// Fresh student encoder and decoder, a teacher copied from the encoder and
/// a classifier head.
pub fn init_model(config: &Config, source_classes: usize) -> Result<Checkpoint> {
    let mut rng = stream_rng(config.seed, INIT_STREAM);
    let dte = EncoderParams::init(config.dim, config.hidden, &mut rng);
    let dtd = EncoderParams::init(config.dim, config.hidden, &mut rng);
    let head = HeadParams::init(config.dim, source_classes, &mut rng);
    Checkpoint::new(dte.clone(), dtd, dte, head, config.frames, 0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Pretrain,
    Metatrain,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Pretrain => "pretrain",
            Stage::Metatrain => "metatrain",
        }
    }
}

/// Loss settings shared by the training loop and the gradient check.
#[derive(Debug, Clone, Copy)]
pub struct LossSetup {
    pub stage: Stage,
    pub align: AlignConfig,
    pub tau: f64,
    pub alphas: LossWeights,
    pub ablation: Ablation,
}

impl LossSetup {
    pub fn from_config(config: &Config, stage: Stage) -> Self {
        Self { stage, align: config.align(), tau: config.tau, alphas: config.alphas, ablation: config.ablation }
    }

    fn use_cycle(&self) -> bool {
        match self.stage {
            Stage::Pretrain => self.ablation.use_cycle_pretrain,
            Stage::Metatrain => self.ablation.use_cycle_meta,
        }
    }

    fn use_teacher(&self) -> bool {
        self.stage == Stage::Metatrain && self.ablation.use_mixed_branch
    }
}

/// A labeled episode member: frames, episode-local class, source category.
#[derive(Debug, Clone, Copy)]
pub struct Member<'a> {
    pub frames: &'a Tensor,
    pub local: usize,
    pub global: usize,
}

/// The tensors one training episode consumes.
#[derive(Debug, Clone)]
pub struct EpisodeInputs<'a> {
    pub n_way: usize,
    pub support: Vec<Member<'a>>,
    pub query: Vec<Member<'a>>,
    pub unlabeled: Vec<&'a Tensor>,
}

impl<'a> EpisodeInputs<'a> {
    pub fn from_episode(ep: &Episode<'a>) -> Result<Self> {
        let member = |s: &crate::data::LabeledSample<'a>| -> Result<Member<'a>> {
            let global =
                s.video.label.ok_or_else(|| Error::Episode(format!("training video {} has no label", s.video.id)))?;
            Ok(Member { frames: &s.video.frames, local: s.local_label, global })
        };
        Ok(Self {
            n_way: ep.classes.len(),
            support: ep.support.iter().map(member).collect::<Result<_>>()?,
            query: ep.query.iter().map(member).collect::<Result<_>>()?,
            unlabeled: ep.unlabeled_target.iter().map(|u| &u.frames).collect(),
        })
    }

    fn labeled(&self) -> impl Iterator<Item = &Member<'a>> {
        self.support.iter().chain(&self.query)
    }
}

/// Teacher predictions for one episode; no gradient path leads back to
/// the mixer.
#[derive(Debug, Clone)]
pub struct TeacherOutputs {
    /// Meta-level distribution per query.
    pub meta: Vec<ProbDist>,
    /// Supervised-level distribution per support then query sample.
    pub sup: Vec<ProbDist>,
    /// Mixed features per support then query sample.
    pub mixed: Vec<Tensor>,
}

/// Runs the mixed branch on its own tape.
pub fn teacher_outputs(
    inputs: &EpisodeInputs,
    dme: &EncoderParams,
    head: &HeadParams,
    setup: &LossSetup,
) -> Result<TeacherOutputs> {
    let center = icc_center(&inputs.unlabeled, setup.ablation.center())?;
    let mut tape = Tape::new();
    let p = dme.bind(&mut tape);
    let h = head.bind(&mut tape);
    let c = tape.leaf(&center.center);
    let mut feats = Vec::new();
    for m in inputs.labeled() {
        let x = tape.leaf(m.frames);
        feats.push(dme_forward(&mut tape, x, c, &p)?);
    }
    let ns = inputs.support.len();
    let support: Vec<(Var, usize)> = feats[..ns].iter().zip(&inputs.support).map(|(&f, m)| (f, m.local)).collect();
    let protos = prototypes(&mut tape, &support, inputs.n_way)?;
    let mut meta = Vec::with_capacity(inputs.query.len());
    for &q in &feats[ns..] {
        let p = meta_probs(&mut tape, q, &protos, setup.align, setup.tau)?;
        meta.push(ProbDist::from_var(&tape, p)?);
    }
    let mut sup = Vec::with_capacity(feats.len());
    for &f in &feats {
        let p = supervised_probs(&mut tape, f, &h)?;
        sup.push(ProbDist::from_var(&tape, p)?);
    }
    let mixed = feats.iter().map(|&f| tape.to_tensor(f)).collect();
    Ok(TeacherOutputs { meta, sup, mixed })
}

/// Student parameters bound on a tape.
pub struct StudentVars {
    pub dte: Bound,
    pub dtd: Bound,
    pub head: Bound,
}

/// Records the stage objective for one episode and returns the total loss
/// with its per-term sums.
pub fn student_losses(
    tape: &mut Tape,
    inputs: &EpisodeInputs,
    vars: &StudentVars,
    teacher: Option<&TeacherOutputs>,
    setup: &LossSetup,
) -> Result<(Var, LossBreakdown)> {
    let mut feats = Vec::new();
    for m in inputs.labeled() {
        let x = tape.leaf(m.frames);
        feats.push(dte_forward(tape, x, &vars.dte)?);
    }
    let ns = inputs.support.len();

    let mut con = Vec::new();
    if setup.use_cycle() {
        for &u in &inputs.unlabeled {
            let x = tape.leaf(u);
            let e = dte_forward(tape, x, &vars.dte)?;
            let r = dtd_forward(tape, e, &vars.dtd)?;
            con.push(cycle_loss(tape, r, x)?);
        }
    }

    let mut sup = Vec::new();
    let mut sup_probs = Vec::new();
    for (&f, m) in feats.iter().zip(inputs.labeled()) {
        let p = supervised_probs(tape, f, &vars.head)?;
        sup_probs.push(p);
        sup.push(cross_entropy(tape, p, m.global)?);
    }
    if let (true, Some(t)) = (setup.ablation.mixed_ce, teacher) {
        for (x, m) in t.mixed.iter().zip(inputs.labeled()) {
            let x = tape.leaf(x);
            let p = supervised_probs(tape, x, &vars.head)?;
            sup.push(cross_entropy(tape, p, m.global)?);
        }
    }

    let (mut meta, mut dm, mut ds) = (Vec::new(), Vec::new(), Vec::new());
    if setup.stage == Stage::Metatrain {
        let support: Vec<(Var, usize)> = feats[..ns].iter().zip(&inputs.support).map(|(&f, m)| (f, m.local)).collect();
        let protos = prototypes(tape, &support, inputs.n_way)?;
        let mut meta_p = Vec::new();
        for (&q, m) in feats[ns..].iter().zip(&inputs.query) {
            let p = meta_probs(tape, q, &protos, setup.align, setup.tau)?;
            meta_p.push(p);
            meta.push(cross_entropy(tape, p, m.local)?);
        }
        if let Some(t) = teacher {
            if setup.ablation.distill_meta {
                for (q, &p) in t.meta.iter().zip(&meta_p) {
                    dm.push(kl_distill(tape, q, p)?);
                }
            }
            if setup.ablation.distill_supervised {
                for (q, &p) in t.sup.iter().zip(&sup_probs) {
                    ds.push(kl_distill(tape, q, p)?);
                }
            }
        }
    }

    let a = setup.alphas;
    let total = match setup.stage {
        Stage::Pretrain => total_loss_pretrain(tape, &con, &sup, [a.con, a.sup])?,
        Stage::Metatrain => total_loss_meta(tape, &con, &meta, &sup, &dm, &ds, a.as_array())?,
    };
    let sum = |tape: &Tape, vs: &[Var]| vs.iter().fold(0.0, |acc, &v| acc + tape.value(v)[0]);
    let breakdown = LossBreakdown {
        l_con: sum(tape, &con),
        l_meta: sum(tape, &meta),
        l_super: sum(tape, &sup),
        l_m: sum(tape, &dm),
        l_s: sum(tape, &ds),
        total: tape.value(total)[0],
    };
    Ok((total, breakdown))
}

/// Result of a training stage.
#[derive(Debug, Clone)]
pub struct StageOutcome {
    pub checkpoint: Checkpoint,
    /// Per-episode losses.
    pub history: Vec<LossBreakdown>,
    /// Optimizer steps after which the teacher's gradient buffers were
    /// verified to be empty.
    pub teacher_checks: usize,
}

struct Trainer<'a> {
    config: &'a Config,
    setup: LossSetup,
    dte: EncoderParams,
    dtd: EncoderParams,
    dme: EncoderParams,
    head: HeadParams,
    adam: Adam,
    step: u64,
    pending: usize,
    teacher_checks: usize,
}

impl Trainer<'_> {
    fn episode(&mut self, inputs: &EpisodeInputs) -> Result<LossBreakdown> {
        let teacher = if self.setup.use_teacher() {
            Some(teacher_outputs(inputs, &self.dme, &self.head, &self.setup)?)
        } else {
            None
        };
        let mut tape = Tape::new();
        let vars = StudentVars {
            dte: self.dte.bind(&mut tape),
            dtd: self.dtd.bind(&mut tape),
            head: self.head.bind(&mut tape),
        };
        let (total, losses) = student_losses(&mut tape, inputs, &vars, teacher.as_ref(), &self.setup)?;
        if !losses.is_finite() {
            return Ok(losses);
        }
        let grads = tape.backward(total)?;
        self.dte.store_mut().accumulate(&vars.dte, &grads)?;
        self.dtd.store_mut().accumulate(&vars.dtd, &grads)?;
        self.head.store_mut().accumulate(&vars.head, &grads)?;
        self.pending += 1;
        Ok(losses)
    }

    fn check_teacher(&mut self) -> Result<()> {
        if !self.dme.store().grads_are_zero() {
            return Err(Error::Structural("the teacher mixer received a gradient".into()));
        }
        self.teacher_checks += 1;
        Ok(())
    }

    fn ema(&mut self) -> Result<()> {
        if self.setup.stage == Stage::Metatrain {
            ema_update(self.dme.store_mut(), self.dte.store(), self.config.ema_alpha)?;
        }
        Ok(())
    }

    /// Applies the averaged accumulated gradients.
    fn flush(&mut self) -> Result<()> {
        if self.pending == 0 {
            return Ok(());
        }
        let scale = 1.0 / self.pending as f64;
        self.adam.step(
            &mut [("dte", self.dte.store_mut()), ("dtd", self.dtd.store_mut()), ("head", self.head.store_mut())],
            scale,
        );
        self.pending = 0;
        self.step += 1;
        self.check_teacher()?;
        if self.config.ema_cadence == EmaCadence::OptimizerStep {
            self.ema()?;
        }
        Ok(())
    }

    fn run(
        mut self,
        domains: &Domains,
        episodes: usize,
        rng: &mut ChaCha8Rng,
        metrics: &mut MetricsSink,
    ) -> Result<StageOutcome> {
        let sampler = EpisodeSampler::new(&domains.source, &domains.target.u_train, self.config.episode_shape())?;
        let start = Instant::now();
        let stage = self.setup.stage.name();
        let mut history = Vec::with_capacity(episodes);
        let mut interval = IntervalMean::default();
        let wall = |on: bool| on.then(|| start.elapsed().as_secs_f64());
        for e in 0..episodes {
            let ep = sampler.sample(rng)?;
            let inputs = EpisodeInputs::from_episode(&ep)?;
            // Non-finite values can surface inside the forward pass or in the
            // loss itself; either way the stream gets a diagnostic record.
            let outcome = match self.episode(&inputs) {
                Ok(l) if l.is_finite() => Ok(l),
                Ok(l) => Err((l, format!("non-finite loss {l:?}"))),
                Err(Error::Numeric(msg)) => Err((LossBreakdown::default(), msg)),
                Err(other) => return Err(other),
            };
            let losses = match outcome {
                Ok(l) => l,
                Err((losses, msg)) => {
                    metrics.write(&MetricsRecord {
                        stage: stage.into(),
                        episode: e,
                        losses,
                        eval_accuracy: None,
                        wall_time: wall(self.config.wall_clock),
                        error: Some(msg.clone()),
                    })?;
                    metrics.flush()?;
                    return Err(Error::Numeric(format!("{stage} episode {e}: {msg}")));
                }
            };
            history.push(losses);
            interval.push(&losses);
            if self.setup.stage == Stage::Metatrain && self.config.ema_cadence == EmaCadence::Episode {
                self.ema()?;
            }
            if self.pending == self.config.accum_steps {
                self.flush()?;
            }
            if (e + 1) % self.config.log_every == 0 || e + 1 == episodes {
                if let Some(mean) = interval.take() {
                    metrics.write(&MetricsRecord {
                        stage: stage.into(),
                        episode: e,
                        losses: mean,
                        eval_accuracy: None,
                        wall_time: wall(self.config.wall_clock),
                        error: None,
                    })?;
                }
            }
        }
        self.flush()?;
        metrics.flush()?;
        log::info!("{stage}: {episodes} episodes, {} optimizer steps", self.step);

        let mut dte = self.dte;
        let mut dtd = self.dtd;
        let mut head = self.head;
        let mut dme = if self.setup.stage == Stage::Pretrain { dte.clone() } else { self.dme };
        for s in [dte.store_mut(), dtd.store_mut(), head.store_mut(), dme.store_mut()] {
            s.set_requires_grad(false);
        }
        Ok(StageOutcome {
            checkpoint: Checkpoint::new(dte, dtd, dme, head, self.config.frames, self.step)?,
            history,
            teacher_checks: self.teacher_checks,
        })
    }
}

fn trainer<'a>(config: &'a Config, stage: Stage, init: Checkpoint) -> Trainer<'a> {
    let Checkpoint { mut dte, mut dtd, mut dme, mut head, step, .. } = init;
    for s in [dte.store_mut(), dtd.store_mut(), head.store_mut()] {
        s.set_requires_grad(true);
    }
    dme.store_mut().set_requires_grad(false);
    Trainer {
        config,
        setup: LossSetup::from_config(config, stage),
        dte,
        dtd,
        dme,
        head,
        adam: Adam::new(config.lr, config.beta1, config.beta2, config.eps),
        step,
        pending: 0,
        teacher_checks: 0,
    }
}

/// Stage one: supervised classification of source samples plus
/// reconstruction of unlabeled target samples. The teacher is a copy of
/// the trained encoder.
pub fn run_pretrain(config: &Config, domains: &Domains, metrics: &mut MetricsSink) -> Result<StageOutcome> {
    let init = init_model(config, domains.source.num_categories)?;
    let mut rng = stream_rng(config.seed, PRETRAIN_STREAM);
    trainer(config, Stage::Pretrain, init).run(domains, config.pretrain_episodes, &mut rng, metrics)
}

/// Stage two: episodic training with the alignment metric, the teacher
/// branch and dual distillation, starting from `init`.
pub fn run_metatrain(
    config: &Config,
    domains: &Domains,
    init: Checkpoint,
    metrics: &mut MetricsSink,
) -> Result<StageOutcome> {
    init.check_config(config, Some(domains.source.num_categories))?;
    let mut rng = stream_rng(config.seed, METATRAIN_STREAM);
    trainer(config, Stage::Metatrain, init).run(domains, config.metatrain_episodes, &mut rng, metrics)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub episodes: usize,
    pub mean_accuracy: f64,
    /// Half-width of the 95% normal-approximation interval.
    pub ci95: f64,
    pub accuracies: Vec<f64>,
}

impl std::fmt::Display for EvalReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "accuracy {:.2}% ± {:.2}% over {} episodes",
            100.0 * self.mean_accuracy,
            100.0 * self.ci95,
            self.episodes
        )
    }
}

/// Few-shot evaluation on the target domain with the student encoder and
/// the alignment metric. Reads only the labeled support pool and the query
/// pool and changes no parameter.
pub fn run_eval(config: &Config, lt: &Dataset, ut: &Dataset, ckpt: &Checkpoint, episodes: usize) -> Result<EvalReport> {
    if episodes == 0 {
        return Err(Error::Usage("evaluation needs at least one episode".into()));
    }
    if ckpt.dte.dim() != config.dim || ckpt.frames != config.frames {
        return Err(Error::Structural(format!(
            "checkpoint is {}×{}, config expects {}×{}",
            ckpt.frames,
            ckpt.dte.dim(),
            config.frames,
            config.dim
        )));
    }
    let sampler = EvalSampler::new(lt, ut, config.episode_shape())?;
    let encode = |ds: &Dataset| -> Result<std::collections::HashMap<u32, Tensor>> {
        ds.videos.iter().map(|v| Ok((v.id, ckpt.dte.apply(&v.frames)?))).collect()
    };
    let (lt_feats, ut_feats) = (encode(lt)?, encode(ut)?);
    let mut rng = stream_rng(config.seed, EVAL_STREAM);
    let mut accuracies = Vec::with_capacity(episodes);
    for _ in 0..episodes {
        let ep = sampler.sample(&mut rng)?;
        let mut tape = Tape::new();
        let support: Vec<(Var, usize)> =
            ep.support.iter().map(|s| (tape.leaf(&lt_feats[&s.video.id]), s.local_label)).collect();
        let protos = prototypes(&mut tape, &support, ep.classes.len())?;
        let mut predictions = Vec::with_capacity(ep.query.len());
        for q in &ep.query {
            let x = tape.leaf(&ut_feats[&q.video.id]);
            let p = meta_probs(&mut tape, x, &protos, config.align(), config.tau)?;
            predictions.push(ProbDist::from_var(&tape, p)?.argmax());
        }
        let correct = predictions.iter().zip(&ep.query).filter(|(&p, q)| p == q.local_label).count();
        accuracies.push(correct as f64 / ep.query.len() as f64);
    }
    let n = accuracies.len() as f64;
    let mean = accuracies.iter().sum::<f64>() / n;
    let var =
        if accuracies.len() > 1 { accuracies.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
    Ok(EvalReport { episodes, mean_accuracy: mean, ci95: 1.96 * (var / n).sqrt(), accuracies })
}
