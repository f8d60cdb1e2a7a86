use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context as _, Result};
use clap::{Parser, Subcommand};
use log::info;
use serde::Serialize;

use noiseproj_core::config::{Config, SeedRange};
use noiseproj_core::eval::{load_checkpoint, save_checkpoint, Stage};
use noiseproj_core::nets::NoiseProjector;
use noiseproj_core::pipeline::Context;
use noiseproj_core::reward::{FrozenReward, RewardDataset};
use noiseproj_core::Error;

const WORLD: &str = "world.json";
const DATASET: &str = "dataset.jsonl";
const REWARD: &str = "reward.ckpt";
const WARMUP: &str = "warmup.ckpt";
const PROJECTOR: &str = "projector.ckpt";

#[derive(Parser)]
#[command(name = "noiseproj", version, about = "Noise projection for prompt-aligned diffusion sampling")]
struct Cli {
    /// TOML configuration; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Working directory for every artifact.
    #[arg(long, global = true, default_value = "run")]
    out: PathBuf,

    /// Overrides the stage's seed range, written `A..B`.
    #[arg(long, global = true)]
    seed_range: Option<SeedRange>,

    /// Load checkpoints written under a different configuration.
    #[arg(long, global = true)]
    allow_mismatch: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build the synthetic world and write it as JSON.
    MakeWorld,
    /// Sample the scored triplet dataset.
    GenData,
    /// Fit the reward model on the dataset.
    TrainReward,
    /// Pretrain the projector against the throwaway decoder.
    Warmup,
    /// Train the projector against the frozen reward model.
    TrainProjector {
        #[arg(long)]
        tau: Option<f64>,
        #[arg(long)]
        w_max: Option<f64>,
        #[arg(long)]
        beta_dpo: Option<f64>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Score sampled images with the oracle, with or without a projector.
    Eval {
        /// Projector checkpoint; the pretrained sampler is scored when omitted.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Compare sample diversity with and without the projector.
    Diversity {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Retrain the projector for several constraint weights.
    AblateTau {
        #[arg(long, value_delimiter = ',')]
        taus: Option<Vec<f64>>,
    },
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)?).with_context(|| format!("writing {}", path.display()))?;
    info!("wrote {}", path.display());
    Ok(())
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    info!("wrote {}", path.display());
    Ok(())
}

struct Run {
    ctx: Context,
    out: PathBuf,
    seeds: Option<SeedRange>,
    allow_mismatch: bool,
}

impl Run {
    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn load_params(&self, path: &Path, stage: Stage) -> Result<noiseproj_tensor::ParamSet> {
        let ckpt = load_checkpoint(path, &self.ctx.config.model_hash(), self.allow_mismatch)?;
        if ckpt.manifest.stage != stage {
            anyhow::bail!("{}: expected a {:?} checkpoint, found {:?}", path.display(), stage, ckpt.manifest.stage);
        }
        Ok(ckpt.params)
    }

    fn projector(&self, path: &Path) -> Result<NoiseProjector> {
        let ckpt = load_checkpoint(path, &self.ctx.config.model_hash(), self.allow_mismatch)?;
        if ckpt.manifest.stage == Stage::Reward {
            anyhow::bail!("{}: this is a reward model checkpoint", path.display());
        }
        Ok(self.ctx.projector_from(&ckpt.params)?)
    }

    fn reward(&self) -> Result<FrozenReward> {
        let params = self.load_params(&self.path(REWARD), Stage::Reward)?;
        Ok(FrozenReward::new(self.ctx.reward_from(&params)?))
    }

    fn save(&self, name: &str, params: &noiseproj_tensor::ParamSet, stage: Stage) -> Result<()> {
        let path = self.path(name);
        save_checkpoint(&path, params, stage, &self.ctx.config.model_hash())?;
        info!("wrote {}", path.display());
        Ok(())
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut config = match &cli.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    if let Command::TrainProjector { tau, w_max, beta_dpo, epochs } = &cli.command {
        let p = &mut config.projector;
        p.tau = tau.unwrap_or(p.tau);
        p.w_max = w_max.unwrap_or(p.w_max);
        p.beta_dpo = beta_dpo.unwrap_or(p.beta_dpo);
        p.final_epochs = epochs.unwrap_or(p.final_epochs);
    }
    fs::create_dir_all(&cli.out).with_context(|| format!("creating {}", cli.out.display()))?;
    let run = Run {
        ctx: Context::new(config)?,
        out: cli.out,
        seeds: cli.seed_range,
        allow_mismatch: cli.allow_mismatch,
    };
    let ctx = &run.ctx;
    let cfg = &ctx.config;

    match cli.command {
        Command::MakeWorld => {
            write_text(&run.path(WORLD), &ctx.world.to_json())?;
            write_text(&run.path("config.toml"), &cfg.to_toml_string())?;
        }
        Command::GenData => {
            let dataset = ctx.gen_data(run.seeds.unwrap_or(cfg.reward.seeds))?;
            dataset.save(&run.path(DATASET))?;
            println!("{} triplets", dataset.triplets.len());
        }
        Command::TrainReward => {
            let dataset = RewardDataset::load(&run.path(DATASET))?;
            let (model, report) = ctx.train_reward(&dataset)?;
            run.save(REWARD, &model.params, Stage::Reward)?;
            write_json(&run.path("reward_report.json"), &report)?;
            if let Some(last) = report.last() {
                println!("held-out within-1 {:.3}, spearman {:.3}", last.heldout_within1, report.heldout_spearman);
            }
        }
        Command::Warmup => {
            let (projector, report) = ctx.warmup()?;
            run.save(WARMUP, &projector.params, Stage::ProjectorWarmup)?;
            write_json(&run.path("warmup_report.json"), &report)?;
        }
        Command::TrainProjector { .. } => {
            let warm = ctx.projector_from(&run.load_params(&run.path(WARMUP), Stage::ProjectorWarmup)?)?;
            let reward = run.reward()?;
            let (projector, report) = ctx.train_projector(&warm, &reward, None, true)?;
            run.save(PROJECTOR, &projector.params, Stage::ProjectorFinal)?;
            write_json(&run.path("projector_report.json"), &report)?;
        }
        Command::Eval { checkpoint } => {
            let projector = checkpoint.as_deref().map(|p| run.projector(p)).transpose()?;
            let seeds = run.seeds.unwrap_or(cfg.eval.unseen_seeds);
            let report = ctx.eval(projector.as_ref(), seeds)?;
            let stem = format!("eval_{}_{}_{}", if projector.is_some() { "projector" } else { "pretrained" }, seeds.start, seeds.end);
            write_json(&run.path(&format!("{stem}.json")), &report)?;
            write_text(&run.path(&format!("{stem}.csv")), &report.to_csv())?;
            println!("mean {:.2} (std {:.2}) over {} samples", report.mean, report.std, report.samples.len());
        }
        Command::Diversity { checkpoint } => {
            let path = checkpoint.unwrap_or_else(|| run.path(PROJECTOR));
            let cmp = ctx.diversity(&run.projector(&path)?)?;
            write_json(&run.path("diversity.json"), &cmp)?;
            write_text(&run.path("diversity.csv"), &cmp.to_csv())?;
            print!("{}", cmp.to_csv());
        }
        Command::AblateTau { taus } => {
            let warm = ctx.projector_from(&run.load_params(&run.path(WARMUP), Stage::ProjectorWarmup)?)?;
            let reward = run.reward()?;
            let taus = taus.unwrap_or_else(|| cfg.eval.ablation_taus.clone());
            let table = ctx.ablate_tau(&warm, &reward, &taus, run.seeds.unwrap_or(cfg.eval.unseen_seeds))?;
            write_json(&run.path("ablation.json"), &table)?;
            write_text(&run.path("ablation.csv"), &table.to_csv())?;
            print!("{}", table.to_csv());
        }
    }
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(Error::Io { source, .. }) if source.kind() == std::io::ErrorKind::NotFound => 2,
        Some(Error::Config(_) | Error::Toml(_)) => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
