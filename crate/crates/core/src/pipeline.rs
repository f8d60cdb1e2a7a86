//! The stages wired together for one configuration.

use noiseproj_tensor::ParamSet;

use crate::config::{Config, SeedRange};
use crate::diffusion::{DiffusionEngine, GuidanceConfig};
use crate::error::Result;
use crate::eval::{self, AblationTable, DiversityComparison, DiversitySettings, EvalReport, Provenance, Sampler};
use crate::nets::{NoiseProjector, RewardModel, VaeDecoder};
use crate::projector::{self, FinalReport, Probe, WarmupReport};
use crate::reward::{self, FrozenReward, RewardDataset, RewardReport};
use crate::testbed::{make_world, World};

pub struct Context {
    pub config: Config,
    pub world: World,
    pub engine: DiffusionEngine,
    pub guidance: GuidanceConfig,
    pub provenance: Provenance,
}

impl Context {
    pub fn new(config: Config) -> Result<Self> {
        config.validate()?;
        let world = make_world(&config.world)?;
        let engine = DiffusionEngine::from_world(&world, &config.schedule)?;
        let guidance = GuidanceConfig::new(config.schedule.cfg_w)?;
        let provenance = Provenance::new(&config, &world);
        Ok(Self {
            config,
            world,
            engine,
            guidance,
            provenance,
        })
    }

    pub fn sampler(&self) -> Sampler<'_> {
        Sampler {
            engine: &self.engine,
            guidance: self.guidance,
            world: &self.world,
        }
    }

    pub fn all_prompts(&self) -> Vec<usize> {
        (0..self.world.prompts.len()).collect()
    }

    pub fn training_prompts(&self) -> Vec<usize> {
        projector::training_prompts(&self.config.projector, &self.world)
    }

    pub fn new_reward_model(&self) -> Result<RewardModel> {
        RewardModel::new(&self.config.backbone, self.world.shape(), self.world.config.d_txt)
    }

    pub fn new_projector(&self) -> Result<NoiseProjector> {
        NoiseProjector::new(&self.config.backbone, self.world.shape(), self.world.config.d_txt)
    }

    pub fn reward_from(&self, params: &ParamSet) -> Result<RewardModel> {
        let mut m = self.new_reward_model()?;
        m.params.load_values(params)?;
        Ok(m)
    }

    pub fn projector_from(&self, params: &ParamSet) -> Result<NoiseProjector> {
        let mut p = self.new_projector()?;
        p.params.load_values(params)?;
        Ok(p)
    }

    pub fn gen_data(&self, seeds: SeedRange) -> Result<RewardDataset> {
        reward::generate_dataset(&self.world, &self.config.schedule, &self.all_prompts(), seeds)
    }

    pub fn train_reward(&self, dataset: &RewardDataset) -> Result<(RewardModel, RewardReport)> {
        dataset.check_world(&self.world, &self.config.schedule)?;
        reward::train_reward(&self.world, dataset, &self.config.backbone, &self.config.reward)
    }

    pub fn warmup(&self) -> Result<(NoiseProjector, WarmupReport)> {
        let mut p = self.new_projector()?;
        let decoder = VaeDecoder::new(&self.config.backbone, self.world.shape());
        let report = projector::pretrain(&mut p, decoder, &self.world, &self.config.projector)?;
        Ok((p, report))
    }

    /// Final training from a copy of `warm`, with an optional `τ` override.
    pub fn train_projector(&self, warm: &NoiseProjector, reward: &FrozenReward, tau: Option<f64>, with_probe: bool) -> Result<(NoiseProjector, FinalReport)> {
        let mut cfg = self.config.projector.clone();
        if let Some(t) = tau {
            cfg.tau = t;
        }
        let probe = Probe {
            engine: &self.engine,
            guidance: self.guidance,
            seeds: self.config.eval.probe_seeds,
        };
        let mut p = warm.clone();
        let report = projector::train_final(&mut p, reward, &self.world, &cfg, with_probe.then_some(&probe))?;
        Ok((p, report))
    }

    pub fn eval(&self, projector: Option<&NoiseProjector>, seeds: SeedRange) -> Result<EvalReport> {
        eval::eval_alignment(&self.sampler(), projector, &self.all_prompts(), seeds, &self.provenance)
    }

    pub fn diversity(&self, projector: &NoiseProjector) -> Result<DiversityComparison> {
        let settings = DiversitySettings::from_config(&self.config);
        let sampler = self.sampler();
        Ok(DiversityComparison {
            pretrained: eval::diversity_probe(&sampler, None, &settings)?,
            projector: eval::diversity_probe(&sampler, Some(projector), &settings)?,
            settings,
            provenance: self.provenance.clone(),
        })
    }

    pub fn ablate_tau(&self, warm: &NoiseProjector, reward: &FrozenReward, taus: &[f64], seeds: SeedRange) -> Result<AblationTable> {
        eval::ablate_tau(&self.sampler(), warm, reward, &self.config.projector, taus, seeds, &self.provenance)
    }
}
