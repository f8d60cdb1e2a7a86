//! The synthetic world: attribute tokens with region predicates, prompts,
//! per-prompt Gaussian-mixture data, seeded noise, and the rubric oracle.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::config::{json_hash, WorldConfig};
use crate::error::{Error, Result};

/// Shape `C×H×W` of a latent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LatentShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl LatentShape {
    pub fn new(channels: usize, height: usize, width: usize) -> Self {
        Self { channels, height, width }
    }

    pub fn numel(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn positions(&self) -> usize {
        self.height * self.width
    }
}

impl From<[usize; 3]> for LatentShape {
    fn from(s: [usize; 3]) -> Self {
        Self::new(s[0], s[1], s[2])
    }
}

/// A noise or data tensor stored row-major as `C×H×W`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Latent {
    pub shape: LatentShape,
    pub values: Vec<f64>,
}

impl Latent {
    pub fn new(shape: LatentShape, values: Vec<f64>) -> Result<Self> {
        if values.len() != shape.numel() {
            return Err(Error::Invalid(format!(
                "latent of shape {shape:?} needs {} values, got {}",
                shape.numel(),
                values.len()
            )));
        }
        Ok(Self { shape, values })
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

/// Ball predicate over a few projected latent coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionPredicate {
    /// Latent coordinates the predicate reads (all inside the projection).
    pub axes: Vec<usize>,
    pub center: Vec<f64>,
    pub radius: f64,
    pub core_radius: f64,
}

impl RegionPredicate {
    pub fn distance(&self, x: &[f64]) -> f64 {
        self.axes
            .iter()
            .zip(&self.center)
            .map(|(&a, c)| (x[a] - c) * (x[a] - c))
            .sum::<f64>()
            .sqrt()
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        self.distance(x) <= self.radius
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributeToken {
    pub token_id: usize,
    pub embedding: Vec<f64>,
    pub predicate: RegionPredicate,
    /// Where the data puts this attribute relative to the region center, per axis.
    pub data_offset: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptSpec {
    pub prompt_id: usize,
    pub tokens: Vec<usize>,
    /// One row per token, in token order.
    pub sentence_embedding: Vec<Vec<f64>>,
}

/// Diagonal Gaussian mixture over flattened latents.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionalData {
    pub prompt_id: usize,
    pub weights: Vec<f64>,
    pub means: Vec<Vec<f64>>,
    pub variances: Vec<Vec<f64>>,
}

impl ConditionalData {
    pub fn sample<R: Rng>(&self, rng: &mut R) -> Vec<f64> {
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        let mut k = self.weights.len() - 1;
        for (i, w) in self.weights.iter().enumerate() {
            acc += w;
            if u < acc {
                k = i;
                break;
            }
        }
        self.means[k]
            .iter()
            .zip(&self.variances[k])
            .map(|(m, v)| m + v.sqrt() * rng.sample::<f64, _>(StandardNormal))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct World {
    pub config: WorldConfig,
    pub tokens: Vec<AttributeToken>,
    pub prompts: Vec<PromptSpec>,
    pub data: Vec<ConditionalData>,
}

/// Seeded standard-normal noise.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSample {
    pub seed: u64,
    pub latent: Latent,
}

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// 64 random bits fully determined by `(seed, counter)`.
fn counter_bits(seed: u64, counter: u64) -> u64 {
    let key = mix64(seed.wrapping_add(GOLDEN));
    mix64(key ^ mix64(counter.wrapping_mul(GOLDEN).wrapping_add(0x632B_E59B_D9B4_E019)))
}

/// Standard normal value for element `index` of the noise of `seed`.
///
/// Box–Muller over two counter-derived uniforms; `libm` keeps the
/// transcendental functions identical across platforms.
pub fn seeded_normal(seed: u64, index: u64) -> f64 {
    let a = counter_bits(seed, 2 * index);
    let b = counter_bits(seed, 2 * index + 1);
    let scale = 1.0 / (1u64 << 53) as f64;
    let u1 = ((a >> 11) + 1) as f64 * scale;
    let u2 = (b >> 11) as f64 * scale;
    libm::sqrt(-2.0 * libm::log(u1)) * libm::cos(2.0 * std::f64::consts::PI * u2)
}

pub fn seed_to_noise(seed: u64, shape: LatentShape) -> NoiseSample {
    let values = (0..shape.numel() as u64).map(|i| seeded_normal(seed, i)).collect();
    NoiseSample {
        seed,
        latent: Latent { shape, values },
    }
}

/// Orthonormal-direction embeddings, each scaled to norm `sqrt(d)`.
fn orthogonal_embeddings(n: usize, d: usize, rng: &mut ChaCha8Rng) -> Result<Vec<Vec<f64>>> {
    if n > d {
        return Err(Error::Config(format!("{n} tokens cannot have near-orthogonal embeddings in {d} dimensions")));
    }
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(n);
    while basis.len() < n {
        let mut v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        for b in &basis {
            let dot: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= dot * y);
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            v.iter_mut().for_each(|x| *x /= norm);
            basis.push(v);
        }
    }
    let scale = (d as f64).sqrt();
    Ok(basis.into_iter().map(|v| v.into_iter().map(|x| x * scale).collect()).collect())
}

/// Places projected coordinate `k` in the latent: consecutive coordinates fill the
/// channels of one pixel, and the pixels sit on a coarse grid spread over the image.
pub fn axis_index(k: usize, proj: usize, shape: LatentShape) -> usize {
    let c = shape.channels;
    let hw = shape.height * shape.width;
    let pixels = proj.div_ceil(c);
    if pixels > hw {
        return k;
    }
    let g = (1..).find(|g| g * g >= pixels).unwrap_or(1);
    let q = k / c;
    let (row, col) = (q / g, q % g);
    let h = (row * shape.height + shape.height / 2) / g;
    let w = (col * shape.width + shape.width / 2) / g;
    let pixel = if h < shape.height && w < shape.width { h * shape.width + w } else { q };
    (k % c) * hw + pixel
}

pub fn make_world(config: &WorldConfig) -> Result<World> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.world_seed);
    let shape = LatentShape::from(config.latent_shape);
    let proj = config.effective_proj_dim();
    if proj > shape.numel() || config.axes_per_token > proj {
        return Err(Error::Config("predicate projection does not fit the latent".into()));
    }

    let embeddings = orthogonal_embeddings(config.n_tokens, config.d_txt, &mut rng)?;
    let radius = config.token_radius;
    let tokens: Vec<AttributeToken> = embeddings
        .into_iter()
        .enumerate()
        .map(|(j, embedding)| {
            let axes: Vec<usize> = (0..config.axes_per_token).map(|i| axis_index((j * config.axes_per_token + i) % proj, proj, shape)).collect();
            let dir: Vec<f64> = axes.iter().map(|_| rng.sample(StandardNormal)).collect();
            let norm = dir.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            let center = dir.iter().map(|x| x / norm * config.center_norm).collect();
            let off: Vec<f64> = axes.iter().map(|_| rng.sample(StandardNormal)).collect();
            let off_norm = off.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            let data_offset = off.iter().map(|x| x / off_norm * config.token_offset * radius).collect();
            AttributeToken {
                token_id: j,
                embedding,
                predicate: RegionPredicate {
                    axes,
                    center,
                    radius,
                    core_radius: config.core_fraction * radius,
                },
                data_offset,
            }
        })
        .collect();

    let [tmin, tmax] = config.tokens_per_prompt;
    let mut prompts: Vec<PromptSpec> = Vec::with_capacity(config.n_prompts);
    let ids: Vec<usize> = (0..config.n_tokens).collect();
    for prompt_id in 0..config.n_prompts {
        let mut chosen = Vec::new();
        // prefer a token set not used by an earlier prompt
        for _ in 0..64 {
            let k = rng.gen_range(tmin..=tmax);
            chosen = ids.choose_multiple(&mut rng, k).copied().collect();
            let mut key = chosen.clone();
            key.sort_unstable();
            let fresh = prompts.iter().all(|p| {
                let mut other = p.tokens.clone();
                other.sort_unstable();
                other != key
            });
            if fresh {
                break;
            }
        }
        let sentence_embedding = chosen.iter().map(|&t| tokens[t].embedding.clone()).collect();
        prompts.push(PromptSpec {
            prompt_id,
            tokens: chosen,
            sentence_embedding,
        });
    }

    let data = prompts
        .iter()
        .map(|p| prompt_mixture(config, &tokens, p, &mut rng))
        .collect::<Result<Vec<_>>>()?;

    Ok(World {
        config: config.clone(),
        tokens,
        prompts,
        data,
    })
}

const MAX_JITTER_DRAWS: usize = 1000;

fn prompt_mixture(config: &WorldConfig, tokens: &[AttributeToken], prompt: &PromptSpec, rng: &mut ChaCha8Rng) -> Result<ConditionalData> {
    let n = config.latent_len();
    // target value per constrained axis: mean of the offset centers of the prompt's tokens reading it
    let mut sum = vec![0.0; n];
    let mut count = vec![0usize; n];
    for &t in &prompt.tokens {
        let pred = &tokens[t].predicate;
        for ((&a, c), o) in pred.axes.iter().zip(&pred.center).zip(&tokens[t].data_offset) {
            sum[a] += c + o;
            count[a] += 1;
        }
    }
    let k = config.components_per_prompt;
    let mut means = Vec::with_capacity(k);
    let mut variances = Vec::with_capacity(k);
    for _ in 0..k {
        let mut var = vec![0.0; n];
        let mut background = vec![0.0; n];
        for i in 0..n {
            if count[i] > 0 {
                var[i] = config.token_std * config.token_std;
            } else {
                background[i] = config.background_mean_scale * rng.sample::<f64, _>(StandardNormal);
                var[i] = config.background_std * config.background_std;
            }
        }
        // jittered means are redrawn until every token region still holds them
        let mut mean = None;
        for _ in 0..MAX_JITTER_DRAWS {
            let candidate: Vec<f64> = (0..n)
                .map(|i| {
                    if count[i] > 0 {
                        let jitter: f64 = rng.sample(StandardNormal);
                        sum[i] / count[i] as f64 + jitter * config.mean_jitter * config.token_radius
                    } else {
                        background[i]
                    }
                })
                .collect();
            if prompt.tokens.iter().all(|&t| tokens[t].predicate.contains(&candidate)) {
                mean = Some(candidate);
                break;
            }
        }
        let Some(mean) = mean else {
            let mut conflicting: Vec<usize> = prompt.tokens.clone();
            conflicting.sort_unstable();
            return Err(Error::InfeasiblePredicates {
                prompt_id: prompt.prompt_id,
                tokens: conflicting,
            });
        };
        means.push(mean);
        variances.push(var);
    }
    Ok(ConditionalData {
        prompt_id: prompt.prompt_id,
        weights: vec![1.0 / k as f64; k],
        means,
        variances,
    })
}

impl World {
    pub fn shape(&self) -> LatentShape {
        LatentShape::from(self.config.latent_shape)
    }

    pub fn prompt(&self, id: usize) -> Result<&PromptSpec> {
        self.prompts.get(id).ok_or(Error::UnknownPrompt(id))
    }

    pub fn token(&self, id: usize) -> Result<&AttributeToken> {
        self.tokens.get(id).ok_or(Error::UnknownToken(id))
    }

    pub fn hash(&self) -> String {
        json_hash(self)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("world serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

/// Token-level rubric score in `0..=9`.
///
/// `g = exp(-d²/(2ρ²))` for distance `d` to the region center (`g = 1` inside
/// the core), and the score is `floor(10 g)` capped at 9.
pub fn oracle_token_score(x0: &[f64], token: &AttributeToken) -> u8 {
    let pred = &token.predicate;
    let d = pred.distance(x0);
    let g = if d <= pred.core_radius {
        1.0
    } else {
        (-(d * d) / (2.0 * pred.radius * pred.radius)).exp()
    };
    ((10.0 * g).floor() as i64).clamp(0, 9) as u8
}

/// Sentence-level score in `0..=99`: `floor(99 · mean(token_score / 9))`.
pub fn oracle_sentence_score(x0: &[f64], prompt: &PromptSpec, world: &World) -> u8 {
    sentence_from_token_scores(&token_scores(x0, prompt, world))
}

pub fn token_scores(x0: &[f64], prompt: &PromptSpec, world: &World) -> Vec<u8> {
    prompt.tokens.iter().map(|&t| oracle_token_score(x0, &world.tokens[t])).collect()
}

/// `floor(99·Σs/(9n)) = floor(11·Σs/n)`, computed in integers.
pub fn sentence_from_token_scores(scores: &[u8]) -> u8 {
    if scores.is_empty() {
        return 0;
    }
    let total: usize = scores.iter().map(|&s| s as usize).sum();
    (11 * total / scores.len()) as u8
}
