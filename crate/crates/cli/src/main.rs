use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use offrl_core::pipeline::{AblationKind, Method, Pipeline, RunConfig};
use offrl_core::rewards::ScorerKind;
use offrl_core::{Error, Result};

#[derive(Parser)]
#[command(name = "offrl", version, about = "Offline RL pipeline for dialogue response generation")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    cmd: Command,
}

/// Flags override the matching config keys.
#[derive(Args)]
struct Common {
    /// Run config (TOML). Without it the full preset is used.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, env = "OFFRL_OUT")]
    out: Option<PathBuf>,
    /// Share of offline contexts used by stage 3.
    #[arg(long, global = true)]
    fraction: Option<f64>,
    /// Restrict evaluation to these methods (repeatable).
    #[arg(long, global = true)]
    method: Vec<String>,
    /// External similarity scorer; switches the reward to it.
    #[arg(long, global = true)]
    scorer_cmd: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate or ingest the corpus and build the vocabulary.
    GenCorpus,
    /// Stage 1: train the behavior model by teacher forcing.
    TrainTf,
    /// Stage 2: sample and score the offline dataset.
    GenOffline,
    /// Stage 3: fine-tune one method.
    Train {
        #[arg(id = "train_method", value_name = "METHOD")]
        method: TrainMethod,
    },
    /// Greedy metrics, histograms and best-of-k curves.
    EvalGen,
    /// Rank shared behavior-model candidates with each method.
    EvalRank,
    /// Retrain across one swept setting.
    Ablate { kind: Sweep },
    /// Every stage, evaluation and the configured ablations.
    RunAll,
    /// Print the effective config.
    ShowConfig,
}

#[derive(Clone, Copy, ValueEnum)]
enum TrainMethod {
    TfAll,
    TfTop,
    Dt,
    Ilql,
    Ppo,
    Quark,
}

impl From<TrainMethod> for Method {
    fn from(m: TrainMethod) -> Self {
        match m {
            TrainMethod::TfAll => Method::TfAll,
            TrainMethod::TfTop => Method::TfTop,
            TrainMethod::Dt => Method::Dt,
            TrainMethod::Ilql => Method::Ilql,
            TrainMethod::Ppo => Method::Ppo,
            TrainMethod::Quark => Method::Quark,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Sweep {
    Threshold,
    Alpha,
    Fraction,
}

fn load_config(c: &Common) -> Result<RunConfig> {
    let mut cfg = match &c.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if let Some(o) = &c.out {
        cfg.out = o.clone();
    }
    if let Some(f) = c.fraction {
        cfg.data_fraction = f;
    }
    if let Some(cmd) = &c.scorer_cmd {
        cfg.reward.scorer = ScorerKind::External;
        cfg.reward.scorer_cmd = Some(cmd.clone());
    }
    if !c.method.is_empty() {
        cfg.eval.methods = c.method.iter().map(|m| m.parse()).collect::<Result<_>>()?;
    }
    cfg.check()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli.common)?;
    if let Command::ShowConfig = cli.cmd {
        print!("{}", cfg.to_toml());
        return Ok(());
    }
    let p = Pipeline::open(cfg)?;
    let methods = p.cfg.eval.methods.clone();
    match cli.cmd {
        Command::GenCorpus => p.gen_corpus()?,
        Command::TrainTf => p.train_behavior()?,
        Command::GenOffline => p.gen_offline()?,
        Command::Train { method } => p.train(method.into())?,
        Command::EvalGen => {
            for r in p.eval_gen(&methods)? {
                println!("{:<8} click {:.3}  f1 {:.3}  bleu {:.3}", r.method, r.click, r.token_f1, r.bleu);
            }
            p.emit()?;
        }
        Command::EvalRank => {
            for r in p.eval_rank(&methods)? {
                println!("{:<8} ranked reward {:.3}", r.method, r.mean_reward);
            }
            p.emit()?;
        }
        Command::Ablate { kind } => {
            let kind = match kind {
                Sweep::Threshold => AblationKind::Threshold,
                Sweep::Alpha => AblationKind::Alpha,
                Sweep::Fraction => AblationKind::Fraction,
            };
            for pt in p.ablate(kind)?.points {
                println!("{:<8} {:>6}  similarity {:.3}", pt.method, pt.x, pt.similarity);
            }
            p.emit()?;
        }
        Command::RunAll => {
            let report = p.run_all()?;
            for r in &report.generation {
                println!("{:<8} click {:.3}", r.method, r.click);
            }
        }
        Command::ShowConfig => unreachable!("handled before locking"),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_status(&e))
        }
    }
}

fn exit_status(e: &Error) -> u8 {
    e.exit_code() as u8
}
