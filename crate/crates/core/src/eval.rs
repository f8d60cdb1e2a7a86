//! Alignment reports, diversity metrics, the τ ablation driver and
//! checkpoint persistence.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use log::warn;
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use noiseproj_tensor::{ParamSet, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{Config, ProjectorConfig, SeedRange};
use crate::diffusion::{DiffusionEngine, GuidanceConfig};
use crate::error::{io_err, Error, Result};
use crate::nets::NoiseProjector;
use crate::projector::{examples, refine_batch, train_final, FinalReport};
use crate::reward::FrozenReward;
use crate::stats;
use crate::testbed::{oracle_token_score, sentence_from_token_scores, token_scores, Latent, World};

/// Identifier of the source tree this binary was built from.
pub const BUILD_ID: &str = env!("NOISEPROJ_BUILD_ID");

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub config_hash: String,
    pub world_hash: String,
    pub build_id: String,
}

impl Provenance {
    pub fn new(config: &Config, world: &World) -> Self {
        Self {
            config_hash: config.hash(),
            world_hash: world.hash(),
            build_id: BUILD_ID.to_string(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Pretrained,
    Projector,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleScore {
    pub seed: u64,
    pub prompt_id: usize,
    pub sentence_score: u8,
    pub token_scores: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub method: Method,
    pub seeds: SeedRange,
    pub prompt_ids: Vec<usize>,
    pub samples: Vec<SampleScore>,
    pub mean: f64,
    /// Population standard deviation of the sentence scores.
    pub std: f64,
    pub provenance: Provenance,
}

impl EvalReport {
    pub fn sentence_scores(&self) -> Vec<f64> {
        self.samples.iter().map(|s| s.sentence_score as f64).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("seed,prompt_id,sentence_score,token_scores\n");
        for s in &self.samples {
            let tokens: Vec<String> = s.token_scores.iter().map(|t| t.to_string()).collect();
            let _ = writeln!(out, "{},{},{},{}", s.seed, s.prompt_id, s.sentence_score, tokens.join(" "));
        }
        out
    }
}

/// Everything needed to turn a noise into a scored sample.
pub struct Sampler<'a> {
    pub engine: &'a DiffusionEngine,
    pub guidance: GuidanceConfig,
    pub world: &'a World,
}

impl Sampler<'_> {
    /// `x0` for each `(seed, prompt)`, refining the seed noise first when a projector is given.
    pub fn samples(&self, projector: Option<&NoiseProjector>, seeds: SeedRange, prompt_ids: &[usize]) -> Result<Vec<(u64, usize, Latent)>> {
        let data = examples(self.world, seeds, prompt_ids)?;
        let mut out = Vec::with_capacity(data.len());
        for chunk in data.chunks(32) {
            let noise: Vec<Latent> = match projector {
                Some(p) => {
                    let items: Vec<_> = chunk.iter().map(|e| (&e.eps, &self.world.prompts[e.prompt_id])).collect();
                    refine_batch(p, &items)?
                }
                None => chunk.iter().map(|e| e.eps.clone()).collect(),
            };
            for (ex, eps) in chunk.iter().zip(noise) {
                let x0 = self.engine.sample_ode(&eps, ex.prompt_id, self.guidance).map_err(|e| Error::Sampling {
                    seed: ex.seed,
                    prompt_id: ex.prompt_id,
                    source: Box::new(e),
                })?;
                out.push((ex.seed, ex.prompt_id, x0));
            }
        }
        Ok(out)
    }
}

pub fn eval_alignment(
    sampler: &Sampler<'_>,
    projector: Option<&NoiseProjector>,
    prompt_ids: &[usize],
    seeds: SeedRange,
    provenance: &Provenance,
) -> Result<EvalReport> {
    if seeds.is_empty() {
        return Err(Error::Invalid("evaluation needs a non-empty seed range".into()));
    }
    let world = sampler.world;
    let samples: Vec<SampleScore> = sampler
        .samples(projector, seeds, prompt_ids)?
        .into_iter()
        .map(|(seed, prompt_id, x0)| {
            let tokens = token_scores(&x0.values, &world.prompts[prompt_id], world);
            SampleScore {
                seed,
                prompt_id,
                sentence_score: sentence_from_token_scores(&tokens),
                token_scores: tokens,
            }
        })
        .collect();
    let scores: Vec<f64> = samples.iter().map(|s| s.sentence_score as f64).collect();
    Ok(EvalReport {
        method: if projector.is_some() { Method::Projector } else { Method::Pretrained },
        seeds,
        prompt_ids: prompt_ids.to_vec(),
        mean: stats::mean(&scores),
        std: stats::std_dev(&scores),
        samples,
        provenance: provenance.clone(),
    })
}

fn moments(set: &[Vec<f64>]) -> (DVector<f64>, DMatrix<f64>) {
    let (n, d) = (set.len(), set[0].len());
    let data = DMatrix::from_fn(n, d, |i, j| set[i][j]);
    let mean = DVector::from_fn(d, |j, _| data.column(j).mean());
    let mut centered = data;
    for j in 0..d {
        let m = mean[j];
        centered.column_mut(j).add_scalar_mut(-m);
    }
    let cov = centered.transpose() * &centered / (n as f64 - 1.0);
    (mean, cov)
}

fn sym_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(m.clone());
    let roots = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

fn symmetrize(m: DMatrix<f64>) -> DMatrix<f64> {
    (&m + m.transpose()) * 0.5
}

/// `‖μa−μb‖² + Tr(Σa + Σb − 2(Σa Σb)^½)` for given moments.
///
/// The cross term uses `Tr((A^½ B A^½)^½)`, which equals `Tr((AB)^½)` and
/// only needs symmetric eigendecompositions; negative eigenvalues are clamped.
pub fn frechet_from_moments(mu_a: &DVector<f64>, cov_a: &DMatrix<f64>, mu_b: &DVector<f64>, cov_b: &DMatrix<f64>) -> f64 {
    let diff = mu_a - mu_b;
    let root_a = sym_sqrt(cov_a);
    let middle = symmetrize(&root_a * cov_b * &root_a);
    let cross: f64 = SymmetricEigen::new(middle).eigenvalues.iter().map(|v| v.max(0.0).sqrt()).sum();
    (diff.dot(&diff) + cov_a.trace() + cov_b.trace() - 2.0 * cross).max(0.0)
}

fn is_degenerate(cov: &DMatrix<f64>) -> bool {
    let eig = SymmetricEigen::new(cov.clone()).eigenvalues;
    let max = eig.iter().cloned().fold(0.0, f64::max);
    let min = eig.iter().cloned().fold(f64::INFINITY, f64::min);
    min <= 1e-12 * max.max(1e-300)
}

/// Fréchet distance between Gaussian fits of two feature sets.
pub fn frechet_distance(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    let d = a.first().map_or(0, Vec::len);
    if d == 0 || a.iter().chain(b).any(|v| v.len() != d) {
        return Err(Error::Invalid("feature sets must be non-empty with a common dimension".into()));
    }
    if a.len() < d + 1 || b.len() < d + 1 {
        return Err(Error::Invalid(format!(
            "need at least {} vectors per set for dimension {d}, got {} and {}",
            d + 1,
            a.len(),
            b.len()
        )));
    }
    let (mu_a, mut cov_a) = moments(a);
    let (mu_b, mut cov_b) = moments(b);
    if is_degenerate(&cov_a) || is_degenerate(&cov_b) {
        warn!("degenerate covariance in frechet_distance; adding 1e-6 I");
        let eye = DMatrix::<f64>::identity(d, d) * 1e-6;
        cov_a += &eye;
        cov_b += eye;
    }
    Ok(frechet_from_moments(&mu_a, &cov_a, &mu_b, &cov_b))
}

/// Mean Fréchet distance between random halves of one set over `reshuffles` splits.
pub fn split_frechet(features: &[Vec<f64>], reshuffles: usize, seed: u64) -> Result<f64> {
    if reshuffles == 0 {
        return Err(Error::Invalid("split_frechet needs at least one reshuffle".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..features.len()).collect();
    let mut total = 0.0;
    for _ in 0..reshuffles {
        order.shuffle(&mut rng);
        let half = order.len() / 2;
        let a: Vec<Vec<f64>> = order[..half].iter().map(|&i| features[i].clone()).collect();
        let b: Vec<Vec<f64>> = order[half..2 * half].iter().map(|&i| features[i].clone()).collect();
        // each half serves as the reference in turn
        total += 0.5 * (frechet_distance(&a, &b)? + frechet_distance(&b, &a)?);
    }
    Ok(total / reshuffles as f64)
}

/// Normalized oracle token-score profile over every token of the world.
pub fn score_posterior(x0: &[f64], world: &World) -> Vec<f64> {
    let scores: Vec<f64> = world.tokens.iter().map(|t| oracle_token_score(x0, t) as f64).collect();
    let total: f64 = scores.iter().sum();
    if total == 0.0 {
        vec![1.0 / scores.len() as f64; scores.len()]
    } else {
        scores.iter().map(|s| s / total).collect()
    }
}

fn kl(p: &[f64], q: &[f64]) -> f64 {
    p.iter().zip(q).filter(|(pi, _)| **pi > 0.0).map(|(pi, qi)| pi * (pi / qi).ln()).sum()
}

/// `exp(mean over folds of mean_x KL(p(y|x) ‖ p̄))`, `p̄` taken over the whole set.
pub fn inception_like_score(posteriors: &[Vec<f64>], folds: usize, fold_seed: u64) -> Result<f64> {
    if folds == 0 || posteriors.len() < folds.max(10) {
        return Err(Error::Invalid(format!(
            "inception-like score needs at least {} samples, got {}",
            folds.max(10),
            posteriors.len()
        )));
    }
    let k = posteriors[0].len();
    let mut marginal = vec![0.0; k];
    for p in posteriors {
        for (m, v) in marginal.iter_mut().zip(p) {
            *m += v / posteriors.len() as f64;
        }
    }
    let mut order: Vec<usize> = (0..posteriors.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(fold_seed));
    let mut fold_means = Vec::with_capacity(folds);
    for f in 0..folds {
        let lo = f * order.len() / folds;
        let hi = (f + 1) * order.len() / folds;
        let kls: Vec<f64> = order[lo..hi].iter().map(|&i| kl(&posteriors[i], &marginal)).collect();
        fold_means.push(stats::mean(&kls));
    }
    Ok(stats::mean(&fold_means).exp().max(1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiversityMetrics {
    pub method: Method,
    pub samples: usize,
    pub split_fid: f64,
    pub is_like: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiversitySettings {
    pub prompt_id: usize,
    pub samples: usize,
    pub seed_start: u64,
    pub reshuffles: usize,
    pub folds: usize,
    pub fold_seed: u64,
}

impl DiversitySettings {
    pub fn from_config(cfg: &Config) -> Self {
        let e = &cfg.eval;
        Self {
            prompt_id: e.diversity_prompt,
            samples: e.diversity_samples,
            seed_start: e.diversity_seed_start,
            reshuffles: e.fid_reshuffles,
            folds: e.is_folds,
            fold_seed: e.fold_seed,
        }
    }
}

/// Split-FID and IS-like score of `samples` outputs for one prompt.
pub fn diversity_probe(sampler: &Sampler<'_>, projector: Option<&NoiseProjector>, settings: &DiversitySettings) -> Result<DiversityMetrics> {
    if settings.samples < 100 {
        return Err(Error::Invalid(format!("diversity probe needs at least 100 samples, got {}", settings.samples)));
    }
    let seeds = SeedRange::new(settings.seed_start, settings.seed_start + settings.samples as u64);
    let outputs = sampler.samples(projector, seeds, &[settings.prompt_id])?;
    let features: Vec<Vec<f64>> = outputs.iter().map(|(_, _, x)| x.values.clone()).collect();
    let posteriors: Vec<Vec<f64>> = features.iter().map(|x| score_posterior(x, sampler.world)).collect();
    Ok(DiversityMetrics {
        method: if projector.is_some() { Method::Projector } else { Method::Pretrained },
        samples: settings.samples,
        split_fid: split_frechet(&features, settings.reshuffles, settings.fold_seed)?,
        is_like: inception_like_score(&posteriors, settings.folds, settings.fold_seed)?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiversityComparison {
    pub settings: DiversitySettings,
    pub pretrained: DiversityMetrics,
    pub projector: DiversityMetrics,
    pub provenance: Provenance,
}

impl DiversityComparison {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("method,samples,split_fid,is_like\n");
        for m in [&self.pretrained, &self.projector] {
            let _ = writeln!(out, "{},{},{},{}", method_name(m.method), m.samples, m.split_fid, m.is_like);
        }
        out
    }
}

fn method_name(m: Method) -> &'static str {
    match m {
        Method::Pretrained => "pretrained",
        Method::Projector => "projector",
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub tau: f64,
    pub report: Option<EvalReport>,
    pub training: Option<FinalReport>,
    pub error: Option<String>,
}

impl AblationRow {
    pub fn final_constraint(&self) -> Option<f64> {
        self.training.as_ref()?.epochs.last().map(|e| e.constraint)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
    pub provenance: Provenance,
}

impl AblationTable {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("tau,mean,std,final_constraint,error\n");
        for r in &self.rows {
            let (mean, std) = r.report.as_ref().map_or((String::new(), String::new()), |rep| (rep.mean.to_string(), rep.std.to_string()));
            let c = r.final_constraint().map_or(String::new(), |v| v.to_string());
            let _ = writeln!(out, "{},{},{},{},{}", r.tau, mean, std, c, r.error.clone().unwrap_or_default().replace(',', ";"));
        }
        out
    }
}

/// Trains one projector per `τ` from the same warmup parameters and scores
/// each on `seeds`. A failing `τ` yields a row carrying its error.
pub fn ablate_tau(
    sampler: &Sampler<'_>,
    warmup: &NoiseProjector,
    reward: &FrozenReward,
    base: &ProjectorConfig,
    taus: &[f64],
    seeds: SeedRange,
    provenance: &Provenance,
) -> Result<AblationTable> {
    if taus.len() < 2 {
        return Err(Error::Invalid("ablation needs at least two tau values".into()));
    }
    let world = sampler.world;
    let prompts = crate::projector::training_prompts(base, world);
    let mut rows = Vec::with_capacity(taus.len());
    for &tau in taus {
        let cfg = ProjectorConfig { tau, ..base.clone() };
        let mut projector = warmup.clone();
        let outcome = train_final(&mut projector, reward, world, &cfg, None)
            .and_then(|training| Ok((eval_alignment(sampler, Some(&projector), &prompts, seeds, provenance)?, training)));
        rows.push(match outcome {
            Ok((report, training)) => AblationRow {
                tau,
                report: Some(report),
                training: Some(training),
                error: None,
            },
            Err(e) => AblationRow {
                tau,
                report: None,
                training: None,
                error: Some(e.to_string()),
            },
        });
    }
    Ok(AblationTable {
        rows,
        provenance: provenance.clone(),
    })
}

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"NOISEPRJ";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Reward,
    ProjectorWarmup,
    ProjectorFinal,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset into the blob, in values.
    pub offset: usize,
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub stage: Stage,
    pub config_hash: String,
    pub param_hash: String,
    pub dtype: String,
    pub tensors: Vec<TensorEntry>,
}

/// Magic, `u32` version, `u64` manifest length, JSON manifest, then the
/// parameter values as little-endian `f64`.
pub fn save_checkpoint(path: &Path, params: &ParamSet, stage: Stage, config_hash: &str) -> Result<()> {
    let mut tensors = Vec::with_capacity(params.len());
    let mut blob = Vec::with_capacity(params.num_values() * 8);
    let mut offset = 0;
    for (name, t) in params.iter() {
        tensors.push(TensorEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            offset,
            len: t.numel(),
        });
        offset += t.numel();
        for v in t.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = Manifest {
        format_version: CHECKPOINT_VERSION,
        stage,
        config_hash: config_hash.to_string(),
        param_hash: params.content_hash(),
        dtype: "f64-le".into(),
        tensors,
    };
    let header = serde_json::to_vec_pretty(&manifest)?;
    let mut out = Vec::with_capacity(20 + header.len() + blob.len());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&blob);
    fs::write(path, out).map_err(io_err(path))
}

pub struct Checkpoint {
    pub manifest: Manifest,
    pub params: ParamSet,
}

/// Reads a checkpoint, refusing a different config hash unless `allow_mismatch`.
pub fn load_checkpoint(path: &Path, config_hash: &str, allow_mismatch: bool) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    let bad = |reason: &str| Error::Checkpoint {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    if bytes.len() < 20 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(bad("not a checkpoint file"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(bad(&format!("unsupported format version {version}")));
    }
    let header_len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let blob_start = 20usize.checked_add(header_len).filter(|&e| e <= bytes.len()).ok_or_else(|| bad("truncated manifest"))?;
    let manifest: Manifest = serde_json::from_slice(&bytes[20..blob_start])?;
    if manifest.config_hash != config_hash {
        if allow_mismatch {
            warn!("{}: loading despite config hash mismatch", path.display());
        } else {
            return Err(Error::ConfigHashMismatch {
                stored: manifest.config_hash,
                current: config_hash.to_string(),
            });
        }
    }
    let blob = &bytes[blob_start..];
    let mut params = ParamSet::new();
    for entry in &manifest.tensors {
        let start = entry.offset * 8;
        let end = start + entry.len * 8;
        if end > blob.len() {
            return Err(bad(&format!("tensor {} extends past the end of the file", entry.name)));
        }
        let values = blob[start..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        params.push(entry.name.clone(), Tensor::new(&entry.shape, values)?);
    }
    if params.content_hash() != manifest.param_hash {
        return Err(bad("parameter hash does not match the manifest"));
    }
    Ok(Checkpoint { manifest, params })
}
