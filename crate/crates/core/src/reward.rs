//! Token-level scored data from the oracle and cross-entropy distillation
//! of the reward model.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use log::info;
use noiseproj_tensor::{Adam, AdamConfig, Tape};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{json_hash, BackboneConfig, RewardTrainConfig, ScheduleConfig, SeedRange};
use crate::diffusion::{DiffusionEngine, GuidanceConfig};
use crate::error::{io_err, Error, Result};
use crate::nets::{chw_to_hwc, RewardDistribution, RewardModel, NUM_SCORES};
use crate::stats;
use crate::testbed::{oracle_token_score, seed_to_noise, Latent, World};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScoredTriplet {
    pub seed: u64,
    pub prompt_id: usize,
    pub token_id: usize,
    pub score: u8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub world_hash: String,
    pub schedule_hash: String,
    pub seeds: SeedRange,
    pub prompt_ids: Vec<usize>,
}

/// Sampled `x0` for one `(seed, prompt)`, kept so evaluation can skip re-integration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CachedSample {
    pub seed: u64,
    pub prompt_id: usize,
    pub x0: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RewardDataset {
    pub header: DatasetHeader,
    pub triplets: Vec<ScoredTriplet>,
    pub samples: Vec<CachedSample>,
}

/// Sample `x0` for one seed and prompt, tagging failures with both.
pub fn sample_seed(engine: &DiffusionEngine, world: &World, seed: u64, prompt_id: usize, guidance: GuidanceConfig) -> Result<Latent> {
    let noise = seed_to_noise(seed, world.shape());
    engine
        .sample_ode(&noise.latent, prompt_id, guidance)
        .map_err(|e| Error::Sampling {
            seed,
            prompt_id,
            source: Box::new(e),
        })
}

pub fn generate_dataset(
    world: &World,
    schedule: &ScheduleConfig,
    prompt_ids: &[usize],
    seeds: SeedRange,
) -> Result<RewardDataset> {
    if seeds.is_empty() {
        return Err(Error::Invalid("empty seed range".into()));
    }
    for &p in prompt_ids {
        world.prompt(p)?;
    }
    let engine = DiffusionEngine::from_world(world, schedule)?;
    let guidance = GuidanceConfig::new(schedule.cfg_w)?;
    let mut triplets = Vec::new();
    let mut samples = Vec::new();
    for seed in seeds.iter() {
        for &prompt_id in prompt_ids {
            let x0 = sample_seed(&engine, world, seed, prompt_id, guidance)?;
            for &token_id in &world.prompts[prompt_id].tokens {
                triplets.push(ScoredTriplet {
                    seed,
                    prompt_id,
                    token_id,
                    score: oracle_token_score(&x0.values, &world.tokens[token_id]),
                });
            }
            samples.push(CachedSample {
                seed,
                prompt_id,
                x0: x0.values,
            });
        }
    }
    Ok(RewardDataset {
        header: DatasetHeader {
            world_hash: world.hash(),
            schedule_hash: json_hash(schedule),
            seeds,
            prompt_ids: prompt_ids.to_vec(),
        },
        triplets,
        samples,
    })
}

/// Sidecar file holding the cached samples of `path`.
pub fn samples_path(path: &Path) -> PathBuf {
    let mut name = path.file_stem().unwrap_or_default().to_os_string();
    name.push(".x0.jsonl");
    path.with_file_name(name)
}

fn write_lines<T: Serialize>(path: &Path, first: Option<&DatasetHeader>, items: &[T]) -> Result<()> {
    let mut out = Vec::new();
    if let Some(h) = first {
        serde_json::to_writer(&mut out, h)?;
        out.push(b'\n');
    }
    for item in items {
        serde_json::to_writer(&mut out, item)?;
        out.push(b'\n');
    }
    fs::File::create(path)
        .and_then(|mut f| f.write_all(&out))
        .map_err(io_err(path))
}

impl RewardDataset {
    /// Triplets as JSON lines after a header line; samples go to the sidecar.
    pub fn save(&self, path: &Path) -> Result<()> {
        write_lines(path, Some(&self.header), &self.triplets)?;
        write_lines(&samples_path(path), None, &self.samples)
    }

    /// Loads the triplets and, when present, the sample sidecar.
    pub fn load(path: &Path) -> Result<Self> {
        let file = fs::File::open(path).map_err(io_err(path))?;
        let mut lines = BufReader::new(file).lines();
        let header: DatasetHeader = match lines.next() {
            Some(line) => serde_json::from_str(&line.map_err(io_err(path))?)?,
            None => return Err(Error::Invalid(format!("{}: empty dataset file", path.display()))),
        };
        let mut triplets = Vec::new();
        for line in lines {
            let line = line.map_err(io_err(path))?;
            if !line.trim().is_empty() {
                triplets.push(serde_json::from_str(&line)?);
            }
        }
        let side = samples_path(path);
        let mut samples = Vec::new();
        if side.exists() {
            let text = fs::read_to_string(&side).map_err(io_err(&side))?;
            for line in text.lines().filter(|l| !l.trim().is_empty()) {
                samples.push(serde_json::from_str(line)?);
            }
        }
        Ok(Self { header, triplets, samples })
    }

    pub fn check_world(&self, world: &World, schedule: &ScheduleConfig) -> Result<()> {
        if self.header.world_hash != world.hash() || self.header.schedule_hash != json_hash(schedule) {
            return Err(Error::Invalid("dataset was generated for a different world or schedule".into()));
        }
        Ok(())
    }

    /// Copy with labels shuffled across triplets (a null-label control).
    pub fn with_permuted_labels(&self, seed: u64) -> Self {
        let mut labels: Vec<u8> = self.triplets.iter().map(|t| t.score).collect();
        labels.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let mut out = self.clone();
        for (t, s) in out.triplets.iter_mut().zip(labels) {
            t.score = s;
        }
        out
    }
}

/// `Σ_i i·p_i`.
pub fn scalar_reward(dist: &RewardDistribution) -> f64 {
    dist.probs.iter().enumerate().map(|(i, p)| i as f64 * p).sum()
}

/// Most probable score; ties go to the lower index.
pub fn argmax_score(dist: &RewardDistribution) -> u8 {
    let mut best = 0;
    for i in 1..NUM_SCORES {
        if dist.probs[i] > dist.probs[best] {
            best = i;
        }
    }
    best as u8
}

/// Whether `seed` belongs to the held-out split.
pub fn is_heldout(seed: u64, seeds: SeedRange, every: u64) -> bool {
    (seed - seeds.start) % every == every - 1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardEpoch {
    pub epoch: usize,
    pub train_ce: f64,
    pub heldout_ce: f64,
    pub heldout_top1: f64,
    pub heldout_within1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardReport {
    pub train_triplets: usize,
    pub heldout_triplets: usize,
    pub epochs: Vec<RewardEpoch>,
    pub train_top1: f64,
    pub train_within1: f64,
    /// Spearman correlation of the scalar reward with the oracle score on held-out triplets.
    pub heldout_spearman: f64,
    pub param_hash: String,
}

impl RewardReport {
    pub fn last(&self) -> Option<&RewardEpoch> {
        self.epochs.last()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplitMetrics {
    pub ce: f64,
    pub top1: f64,
    pub within1: f64,
    pub spearman: f64,
}

struct Examples {
    noise: BTreeMap<u64, Vec<f64>>,
}

impl Examples {
    fn new(world: &World, triplets: &[ScoredTriplet]) -> Self {
        let shape = world.shape();
        let mut noise = BTreeMap::new();
        for t in triplets {
            noise
                .entry(t.seed)
                .or_insert_with(|| chw_to_hwc(&seed_to_noise(t.seed, shape).latent.values, shape));
        }
        Self { noise }
    }

    fn batch(&self, world: &World, triplets: &[&ScoredTriplet]) -> (Vec<f64>, Vec<f64>, Vec<usize>) {
        let mut eps = Vec::new();
        let mut tokens = Vec::new();
        let mut labels = Vec::new();
        for t in triplets {
            eps.extend_from_slice(&self.noise[&t.seed]);
            tokens.extend_from_slice(&world.tokens[t.token_id].embedding);
            labels.push(t.score as usize);
        }
        (eps, tokens, labels)
    }
}

fn batch_ce<'t>(model: &RewardModel, world: &World, tape: &'t Tape, b: &noiseproj_tensor::Bound<'t>, ex: &Examples, items: &[&ScoredTriplet]) -> Result<(noiseproj_tensor::Var<'t>, Vec<f64>)> {
    let shape = world.shape();
    let (eps, tokens, labels) = ex.batch(world, items);
    let n = items.len();
    let eps = tape.constant_from(&[n, shape.height, shape.width, shape.channels], eps)?;
    let tokens = tape.constant_from(&[n, world.config.d_txt], tokens)?;
    let logits = model.logits(b, eps, tokens)?;
    let ce = logits.log_softmax()?.pick(&labels)?.mean().neg();
    Ok((ce, logits.data()))
}

/// Cross-entropy, top-1, within-±1 and Spearman of `model` on `triplets`.
pub fn evaluate_reward(model: &RewardModel, world: &World, triplets: &[ScoredTriplet]) -> Result<SplitMetrics> {
    if triplets.is_empty() {
        return Err(Error::Invalid("no triplets to evaluate".into()));
    }
    let ex = Examples::new(world, triplets);
    let refs: Vec<&ScoredTriplet> = triplets.iter().collect();
    let mut ce_total = 0.0;
    let mut top1 = 0usize;
    let mut within1 = 0usize;
    let mut predicted = Vec::with_capacity(triplets.len());
    for chunk in refs.chunks(128) {
        let tape = Tape::new();
        let b = model.params.bind_frozen(&tape);
        let (ce, logits) = batch_ce(model, world, &tape, &b, &ex, chunk)?;
        ce_total += ce.item() * chunk.len() as f64;
        for (t, l) in chunk.iter().zip(logits.chunks(NUM_SCORES)) {
            let dist = RewardDistribution::from_logits(l)?;
            let guess = argmax_score(&dist);
            top1 += (guess == t.score) as usize;
            within1 += (guess.abs_diff(t.score) <= 1) as usize;
            predicted.push(scalar_reward(&dist));
        }
    }
    let n = triplets.len() as f64;
    let truth: Vec<f64> = triplets.iter().map(|t| t.score as f64).collect();
    Ok(SplitMetrics {
        ce: ce_total / n,
        top1: top1 as f64 / n,
        within1: within1 as f64 / n,
        spearman: stats::spearman(&predicted, &truth),
    })
}

/// Cosine decay from `lr` at the first epoch towards `lr·floor` at the last.
pub fn cosine_lr(lr: f64, floor: f64, epoch: usize, epochs: usize) -> f64 {
    if epochs <= 1 {
        return lr;
    }
    let progress = epoch as f64 / (epochs - 1) as f64;
    lr * (floor + (1.0 - floor) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
}

/// Splits `dataset` by seed, trains with Adam on cross-entropy, and
/// reports per-epoch metrics.
pub fn train_reward(
    world: &World,
    dataset: &RewardDataset,
    backbone: &BackboneConfig,
    cfg: &RewardTrainConfig,
) -> Result<(RewardModel, RewardReport)> {
    if dataset.triplets.is_empty() {
        return Err(Error::Invalid("cannot train on an empty dataset".into()));
    }
    let seeds = dataset.header.seeds;
    let (heldout, train): (Vec<ScoredTriplet>, Vec<ScoredTriplet>) = dataset
        .triplets
        .iter()
        .partition(|t| seeds.len() > 1 && is_heldout(t.seed, seeds, cfg.holdout_every));
    let mut model = RewardModel::new(backbone, world.shape(), world.config.d_txt)?;
    let mut adam = Adam::new(
        &model.params,
        AdamConfig {
            lr: cfg.lr,
            ..Default::default()
        },
    );
    let ex = Examples::new(world, &train);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.shuffle_seed);
    let mut epochs = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        adam.config.lr = cosine_lr(cfg.lr, cfg.min_lr_fraction, epoch, cfg.epochs);
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for idx in order.chunks(cfg.batch_size) {
            let items: Vec<&ScoredTriplet> = idx.iter().map(|&i| &train[i]).collect();
            let tape = Tape::new();
            let b = model.params.bind(&tape);
            let (ce, _) = batch_ce(&model, world, &tape, &b, &ex, &items)?;
            let value = ce.item();
            if !value.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    reason: format!("non-finite cross-entropy on a batch starting at seed {}", items[0].seed),
                });
            }
            total += value * items.len() as f64;
            let grads = tape.backward(ce)?;
            model.params.absorb_grads(&b, &grads);
            adam.step(&mut model.params)?;
        }
        let held = if heldout.is_empty() {
            SplitMetrics {
                ce: f64::NAN,
                top1: f64::NAN,
                within1: f64::NAN,
                spearman: f64::NAN,
            }
        } else {
            evaluate_reward(&model, world, &heldout)?
        };
        let record = RewardEpoch {
            epoch,
            train_ce: total / train.len() as f64,
            heldout_ce: held.ce,
            heldout_top1: held.top1,
            heldout_within1: held.within1,
        };
        info!(
            "reward epoch {epoch}: train ce {:.4}, held-out ce {:.4}, top1 {:.3}, within1 {:.3}",
            record.train_ce, record.heldout_ce, record.heldout_top1, record.heldout_within1
        );
        epochs.push(record);
    }
    let train_metrics = evaluate_reward(&model, world, &train)?;
    let heldout_spearman = if heldout.is_empty() {
        f64::NAN
    } else {
        evaluate_reward(&model, world, &heldout)?.spearman
    };
    let report = RewardReport {
        train_triplets: train.len(),
        heldout_triplets: heldout.len(),
        epochs,
        train_top1: train_metrics.top1,
        train_within1: train_metrics.within1,
        heldout_spearman,
        param_hash: model.params.content_hash(),
    };
    Ok((model, report))
}

/// A reward model whose parameters must not change after freezing.
pub struct FrozenReward {
    model: RewardModel,
    hash: String,
}

impl FrozenReward {
    pub fn new(model: RewardModel) -> Self {
        let hash = model.params.content_hash();
        Self { model, hash }
    }

    pub fn hash(&self) -> &str {
        &self.hash
    }

    /// The model, after confirming its parameters still match the freeze-time hash.
    pub fn model(&self) -> Result<&RewardModel> {
        let found = self.model.params.content_hash();
        if found != self.hash {
            return Err(Error::FrozenHashMismatch {
                expected: self.hash.clone(),
                found,
            });
        }
        Ok(&self.model)
    }

    /// Direct access without the hash check, e.g. for tests that tamper.
    pub fn model_unchecked_mut(&mut self) -> &mut RewardModel {
        &mut self.model
    }

    pub fn into_inner(self) -> RewardModel {
        self.model
    }
}
