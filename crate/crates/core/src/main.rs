use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand, ValueEnum};

use dmsd::data::{gen_synthetic, save_features, SynthSpec};
use dmsd::harness::{
    gradcheck, run_eval, run_metatrain, run_pretrain, Checkpoint, Config, Domains, MetricsRecord, MetricsSink,
};

#[derive(Parser)]
#[command(name = "dmsd", version, about = "Cross-domain few-shot action recognition on frame features")]
struct Cli {
    /// Append JSON-lines metrics to this file.
    #[arg(long, global = true)]
    metrics: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic source/target pair as feature files.
    GenData {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Stage one: supervised source training with target reconstruction.
    Pretrain {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Stage two: episodic training with the distillation teacher.
    Metatrain {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        init: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Few-shot accuracy on the target query pool.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        /// Defaults to `eval_episodes` from the config.
        #[arg(long)]
        episodes: Option<usize>,
    },
    /// Finite-difference check of every differentiable operation.
    Gradcheck {
        #[arg(long, value_enum, default_value_t = Scale::Tiny)]
        scale: Scale,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Scale {
    Tiny,
}

fn sink(path: Option<&Path>) -> anyhow::Result<MetricsSink> {
    Ok(match path {
        Some(p) => MetricsSink::append(p).with_context(|| format!("opening {}", p.display()))?,
        None => MetricsSink::disabled(),
    })
}

fn load_config(path: &Path) -> anyhow::Result<(Config, Domains)> {
    let config = Config::load(path).with_context(|| format!("reading config {}", path.display()))?;
    let domains = Domains::load(&config).context("preparing data")?;
    Ok((config, domains))
}

fn run(cli: Cli) -> anyhow::Result<bool> {
    let metrics = cli.metrics.as_deref();
    match cli.command {
        Command::GenData { spec, out, seed } => {
            let text = std::fs::read_to_string(&spec).with_context(|| format!("reading {}", spec.display()))?;
            let spec = SynthSpec::parse(&text)?;
            let (source, target) = gen_synthetic(&spec, seed)?;
            std::fs::create_dir_all(&out)?;
            save_features(&source, out.join("source.dmf"))?;
            save_features(&target, out.join("target.dmf"))?;
            println!("wrote {} source and {} target videos to {}", source.len(), target.len(), out.display());
        }
        Command::Pretrain { config, out } => {
            let (config, domains) = load_config(&config)?;
            let outcome = run_pretrain(&config, &domains, &mut sink(metrics)?)?;
            outcome.checkpoint.save(&out)?;
            if let Some(last) = outcome.history.last() {
                println!("pretrain done: {} episodes, last total loss {:.4}", outcome.history.len(), last.total);
            }
        }
        Command::Metatrain { config, init, out } => {
            let (config, domains) = load_config(&config)?;
            let init = Checkpoint::load(&init).with_context(|| format!("loading {}", init.display()))?;
            let outcome = run_metatrain(&config, &domains, init, &mut sink(metrics)?)?;
            outcome.checkpoint.save(&out)?;
            if let Some(last) = outcome.history.last() {
                println!("metatrain done: {} episodes, last total loss {:.4}", outcome.history.len(), last.total);
            }
        }
        Command::Eval { config, ckpt, episodes } => {
            let (config, domains) = load_config(&config)?;
            let ckpt = Checkpoint::load(&ckpt).with_context(|| format!("loading {}", ckpt.display()))?;
            ckpt.check_config(&config, Some(domains.source.num_categories))?;
            let episodes = episodes.unwrap_or(config.eval_episodes);
            let report = run_eval(&config, &domains.target.lt, &domains.target.ut, &ckpt, episodes)?;
            println!("{report}");
            let mut sink = sink(metrics)?;
            sink.write(&MetricsRecord {
                stage: "eval".into(),
                episode: episodes.saturating_sub(1),
                losses: Default::default(),
                eval_accuracy: Some(report.mean_accuracy),
                wall_time: None,
                error: None,
            })?;
            sink.flush()?;
        }
        Command::Gradcheck { scale: Scale::Tiny, seed } => {
            let start = std::time::Instant::now();
            let results = gradcheck::run_tiny(seed)?;
            for r in &results {
                println!("{r}");
            }
            let failed = results.iter().filter(|r| !r.passed()).count();
            println!("{} checks, {failed} failed, {:.2}s", results.len(), start.elapsed().as_secs_f64());
            return Ok(failed == 0);
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
